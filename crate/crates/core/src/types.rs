//! Domain model shared by every other module: candidates, candidate sets,
//! preference pairs and the selection configuration.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic mean of the reward sources attached to one candidate.
///
/// The mean is computed over the sorted values so the result does not depend
/// on the names the scores are filed under.
pub fn aggregate_reward(rewards: &BTreeMap<String, f64>) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::NoRewardSources);
    }
    for (name, &value) in rewards {
        check_reward(name, value)?;
    }
    let mut values: Vec<f64> = rewards.values().copied().collect();
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(mean.clamp(values[0], values[values.len() - 1]))
}

pub(crate) fn check_reward(name: &str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::RewardOutOfRange {
            name: name.to_string(),
            value,
        });
    }
    Ok(())
}

/// One sampled output for a source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    id: String,
    text: String,
    logprob: Option<f64>,
    token_count: Option<u32>,
    rewards: BTreeMap<String, f64>,
    reward_agg: Option<f64>,
}

impl Candidate {
    /// Builds a candidate, validating the log-probability and every reward.
    ///
    /// Either part may be absent: a candidate merged from an external pool
    /// can lack a likelihood, and selectors that need one report the gap.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        logprob: Option<f64>,
        rewards: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let id = id.into();
        if let Some(lp) = logprob {
            if !lp.is_finite() || lp > 0.0 {
                return Err(Error::InvalidLogprob { id, value: lp });
            }
        }
        let reward_agg = if rewards.is_empty() {
            None
        } else {
            Some(aggregate_reward(&rewards)?)
        };
        Ok(Self {
            id,
            text: text.into(),
            logprob,
            token_count: None,
            rewards,
            reward_agg,
        })
    }

    /// Candidate with a single reward source named `reward`.
    pub fn scored(id: impl Into<String>, reward: f64, logprob: f64) -> Result<Self> {
        let id = id.into();
        let text = id.clone();
        Self::new(
            id,
            text,
            Some(logprob),
            BTreeMap::from([("reward".to_string(), reward)]),
        )
    }

    pub fn with_token_count(mut self, tokens: u32) -> Self {
        self.token_count = Some(tokens);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn rewards(&self) -> &BTreeMap<String, f64> {
        &self.rewards
    }

    pub fn token_count(&self) -> Option<u32> {
        self.token_count
    }

    pub fn logprob_opt(&self) -> Option<f64> {
        self.logprob
    }

    pub fn reward_opt(&self) -> Option<f64> {
        self.reward_agg
    }

    /// Summed log-probability under the reference policy.
    pub fn logprob(&self) -> Result<f64> {
        self.logprob.ok_or_else(|| Error::MissingLogprob {
            id: self.id.clone(),
        })
    }

    /// Aggregate reward (mean over sources).
    pub fn reward(&self) -> Result<f64> {
        self.reward_agg.ok_or_else(|| Error::MissingReward {
            id: self.id.clone(),
        })
    }
}

/// Log-probability as seen by the scoring functions.
pub fn effective_logprob(candidate: &Candidate, config: &SelectionConfig) -> Result<f64> {
    let lp = candidate.logprob()?;
    match config.logprob_norm {
        LogprobNorm::Sum => Ok(lp),
        LogprobNorm::PerToken => match candidate.token_count {
            Some(n) if n > 0 => Ok(lp / f64::from(n)),
            _ => Err(Error::MissingTokenCount {
                id: candidate.id.clone(),
            }),
        },
    }
}

/// Whether a translation direction goes into English or out of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionClass {
    IntoEnglish,
    OutOfEnglish,
}

/// Ordered (source language, target language) tag pair, written `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Direction {
    pub source: String,
    pub target: String,
}

impl Direction {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }

    /// Directions whose target tag is `en` are into-English; all others are
    /// out-of-English.
    pub fn class(&self) -> Result<DirectionClass> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Direction(self.to_string()));
        }
        if self.target.eq_ignore_ascii_case("en") {
            Ok(DirectionClass::IntoEnglish)
        } else {
            Ok(DirectionClass::OutOfEnglish)
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((src, tgt)) if !src.is_empty() && !tgt.is_empty() && !tgt.contains('-') => {
                Ok(Direction::new(src, tgt))
            }
            _ => Err(Error::Direction(s.to_string())),
        }
    }
}

/// All candidates sampled for one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    source_id: String,
    source_text: String,
    direction: Direction,
    candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(
        source_id: impl Into<String>,
        source_text: impl Into<String>,
        direction: Direction,
        candidates: Vec<Candidate>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        if candidates.is_empty() {
            return Err(Error::TooFewCandidates {
                source_id,
                k: 0,
                min: 1,
            });
        }
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::DuplicateCandidate {
                    source_id,
                    candidate_id: c.id.clone(),
                });
            }
        }
        Ok(Self {
            source_id,
            source_text: source_text.into(),
            direction,
            candidates,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn direction(&self) -> &Direction {
        &self.direction
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn get(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub(crate) fn require_k(&self, min: usize) -> Result<()> {
        if self.k() < min {
            return Err(Error::TooFewCandidates {
                source_id: self.source_id.clone(),
                k: self.k(),
                min,
            });
        }
        Ok(())
    }

    /// Candidate indices ordered by id, the canonical tie-break order.
    pub(crate) fn id_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| self.candidates[a].id.cmp(&self.candidates[b].id));
        order
    }
}

/// Selection method tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CrPlus,
    CrTimes,
    Rso,
    RsDpo,
    MbrBw,
    MbrBmw,
    QeBest,
    TopScores,
    MinmaxR,
    MinmaxP,
    MinmaxPo,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::CrPlus,
        Method::CrTimes,
        Method::Rso,
        Method::RsDpo,
        Method::MbrBw,
        Method::MbrBmw,
        Method::QeBest,
        Method::TopScores,
        Method::MinmaxR,
        Method::MinmaxP,
        Method::MinmaxPo,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::CrPlus => "cr_plus",
            Method::CrTimes => "cr_times",
            Method::Rso => "rso",
            Method::RsDpo => "rs_dpo",
            Method::MbrBw => "mbr_bw",
            Method::MbrBmw => "mbr_bmw",
            Method::QeBest => "qe_best",
            Method::TopScores => "top_scores",
            Method::MinmaxR => "minmax_r",
            Method::MinmaxP => "minmax_p",
            Method::MinmaxPo => "minmax_po",
        }
    }

    pub fn is_mbr(self) -> bool {
        matches!(self, Method::MbrBw | Method::MbrBmw)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                let tags: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
                Error::Config(format!("unknown method `{s}` (valid: {})", tags.join(", ")))
            })
    }
}

/// Likelihood gate applied before CR scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Rely on the positivity filter alone.
    #[default]
    Off,
    /// Keep `j` when `logp_j - logp_best + epsilon > 0`.
    LogSpace,
    /// Keep `j` when `p_j - p_best + epsilon > 0`, with `p = exp(logp)`.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogprobNorm {
    #[default]
    Sum,
    PerToken,
}

/// Reward-gap thresholds per direction class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaMap {
    pub out_of_english: f64,
    pub into_english: f64,
}

impl Default for EtaMap {
    fn default() -> Self {
        Self {
            out_of_english: 0.6,
            into_english: 0.5,
        }
    }
}

impl EtaMap {
    pub fn for_class(&self, class: DirectionClass) -> f64 {
        match class {
            DirectionClass::IntoEnglish => self.into_english,
            DirectionClass::OutOfEnglish => self.out_of_english,
        }
    }
}

/// Method choice plus every selection hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub method: Method,
    /// Trust weight on the reward term of CR+.
    pub k_trust: f64,
    /// KL temperature used by RSO acceptance.
    pub beta: f64,
    pub eta: EtaMap,
    pub gate_mode: GateMode,
    pub epsilon: f64,
    /// Number of accepted samples for RSO.
    pub rso_samples: usize,
    /// Candidates kept by `top_scores` (capped at the set size).
    pub top_n: usize,
    pub seed: u64,
    pub logprob_norm: LogprobNorm,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            method: Method::CrPlus,
            k_trust: 50.0,
            beta: 0.1,
            eta: EtaMap::default(),
            gate_mode: GateMode::Off,
            epsilon: 0.0,
            rso_samples: 8,
            top_n: 8,
            seed: 0,
            logprob_norm: LogprobNorm::Sum,
        }
    }
}

impl SelectionConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be finite and > 0, got {v}"
                )))
            }
        };
        positive("k_trust", self.k_trust)?;
        positive("beta", self.beta)?;
        for (name, v) in [
            ("eta.out_of_english", self.eta.out_of_english),
            ("eta.into_english", self.eta.into_english),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.rso_samples < 2 {
            return Err(Error::Config("rso_samples must be >= 2".into()));
        }
        if self.top_n < 2 {
            return Err(Error::Config("top_n must be >= 2".into()));
        }
        Ok(())
    }
}

/// A (chosen, rejected) selection for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub source_id: String,
    pub chosen_id: String,
    pub rejected_id: String,
    pub method: Method,
    pub score: f64,
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

/// A single supervised target, produced by QE fine-tuning selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftTarget {
    pub source_id: String,
    pub candidate_id: String,
    pub method: Method,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SelectionConfig,
    /// SHA-256 of the candidate input, hex encoded.
    pub input_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub sft_targets: Vec<SftTarget>,
    pub provenance: Provenance,
}

impl PreferenceDataset {
    /// Checks that every pair and target resolves against `sets`.
    pub fn validate(&self, sets: &[CandidateSet]) -> Result<()> {
        let by_source: std::collections::HashMap<&str, &CandidateSet> =
            sets.iter().map(|s| (s.source_id(), s)).collect();
        let lookup = |source_id: &str| {
            by_source
                .get(source_id)
                .copied()
                .ok_or_else(|| Error::Unresolved(format!("source `{source_id}`")))
        };
        for pair in &self.pairs {
            validate_pair(lookup(&pair.source_id)?, pair)?;
        }
        for target in &self.sft_targets {
            let set = lookup(&target.source_id)?;
            if set.get(&target.candidate_id).is_none() {
                return Err(Error::Unresolved(format!(
                    "candidate `{}` in source `{}`",
                    target.candidate_id, target.source_id
                )));
            }
        }
        Ok(())
    }
}

/// Extras keys holding the ranking score MBR pairs are ordered by.
pub const EXTRA_CHOSEN_MBR: &str = "chosen_mbr";
pub const EXTRA_REJECTED_MBR: &str = "rejected_mbr";

/// Checks the pair invariants against its candidate set: distinct resolvable
/// ids and a chosen side that ranks at least as high as the rejected side.
///
/// Ranking uses the aggregate reward, except for MBR pairs which are ordered
/// by their expected utility (stored in `extras`).
pub fn validate_pair(set: &CandidateSet, pair: &PreferencePair) -> Result<()> {
    if pair.source_id != set.source_id() {
        return Err(Error::Unresolved(format!(
            "pair source `{}` checked against set `{}`",
            pair.source_id,
            set.source_id()
        )));
    }
    if pair.chosen_id == pair.rejected_id {
        return Err(Error::Invariant(format!(
            "chosen and rejected are both `{}`",
            pair.chosen_id
        )));
    }
    let resolve = |id: &str| {
        set.get(id).ok_or_else(|| {
            Error::Unresolved(format!("candidate `{id}` in source `{}`", set.source_id()))
        })
    };
    let chosen = resolve(&pair.chosen_id)?;
    let rejected = resolve(&pair.rejected_id)?;
    let (hi, lo) = if pair.method.is_mbr() {
        match (
            pair.extras.get(EXTRA_CHOSEN_MBR),
            pair.extras.get(EXTRA_REJECTED_MBR),
        ) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                return Err(Error::Invariant(
                    "MBR pair without expected-utility extras".into(),
                ))
            }
        }
    } else {
        (chosen.reward()?, rejected.reward()?)
    };
    if hi < lo {
        return Err(Error::Invariant(format!(
            "chosen `{}` ranks below rejected `{}` ({hi} < {lo})",
            pair.chosen_id, pair.rejected_id
        )));
    }
    Ok(())
}
