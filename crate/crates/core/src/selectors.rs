//! Turn a candidate set into preference pairs (or a supervised target).
//!
//! Every argmax/argmin breaks ties by the lowest candidate id so results are
//! reproducible regardless of input order.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scoring::{cr_plus, cr_times, mbr_scores, PairScoreInput, UtilityMatrix};
use crate::types::{
    effective_logprob, validate_pair, CandidateSet, GateMode, Method, PreferenceDataset,
    PreferencePair, Provenance, SelectionConfig, SftTarget, EXTRA_CHOSEN_MBR, EXTRA_REJECTED_MBR,
};

pub const SKIP_NO_POSITIVE: &str = "no positive CR score";
pub const SKIP_ZERO_GAP: &str = "zero reward gap";
pub const SKIP_NO_CONFIDENCE_GAP: &str = "no positive confidence gap";
pub const SKIP_SAME_CANDIDATE: &str = "likelihood extremes coincide";
pub const SKIP_BELOW_THRESHOLD: &str = "no pair above threshold";

/// Result of running one selector on one candidate set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionOutcome {
    pub pairs: Vec<PreferencePair>,
    pub sft_target: Option<SftTarget>,
    pub skipped_reason: Option<String>,
    /// Number of candidate pairs that were scored.
    pub examined: usize,
}

impl SelectionOutcome {
    fn skipped(reason: &str, examined: usize) -> Self {
        Self {
            skipped_reason: Some(reason.to_string()),
            examined,
            ..Self::default()
        }
    }

    fn single(pair: PreferencePair, examined: usize) -> Self {
        Self {
            pairs: vec![pair],
            examined,
            ..Self::default()
        }
    }
}

fn rewards(set: &CandidateSet) -> Result<Vec<f64>> {
    set.candidates().iter().map(|c| c.reward()).collect()
}

fn logprobs(set: &CandidateSet, config: &SelectionConfig) -> Result<Vec<f64>> {
    set.candidates()
        .iter()
        .map(|c| effective_logprob(c, config))
        .collect()
}

/// Index of the largest value; ties go to the first index in `order`.
fn argmax(values: &[f64], order: &[usize]) -> usize {
    let mut best = order[0];
    for &i in &order[1..] {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn argmin(values: &[f64], order: &[usize]) -> usize {
    let mut best = order[0];
    for &i in &order[1..] {
        if values[i] < values[best] {
            best = i;
        }
    }
    best
}

fn make_pair(
    set: &CandidateSet,
    chosen: usize,
    rejected: usize,
    method: Method,
    score: f64,
    extras: BTreeMap<String, f64>,
) -> PreferencePair {
    let c = set.candidates();
    PreferencePair {
        source_id: set.source_id().to_string(),
        chosen_id: c[chosen].id().to_string(),
        rejected_id: c[rejected].id().to_string(),
        method,
        score,
        extras,
    }
}

fn gap_extras(r: &[f64], lp: Option<&[f64]>, w: usize, l: usize) -> BTreeMap<String, f64> {
    let mut extras = BTreeMap::from([("reward_gap".to_string(), r[w] - r[l])]);
    if let Some(lp) = lp {
        extras.insert("confidence_gap".to_string(), lp[l] - lp[w]);
    }
    extras
}

fn gate_passes(mode: GateMode, epsilon: f64, logp_j: f64, logp_best: f64) -> bool {
    match mode {
        GateMode::Off => true,
        GateMode::LogSpace => logp_j - logp_best + epsilon > 0.0,
        GateMode::Probability => logp_j.exp() - logp_best.exp() + epsilon > 0.0,
    }
}

/// Confidence-reward selection: pair the highest-reward candidate with the
/// candidate maximizing the CR score, keeping it only if the score is
/// positive.
pub fn select_crpo(set: &CandidateSet, config: &SelectionConfig) -> Result<SelectionOutcome> {
    let method = config.method;
    if !matches!(method, Method::CrPlus | Method::CrTimes) {
        return Err(Error::WrongMethod {
            method: method.tag(),
            selector: "select_crpo",
        });
    }
    set.require_k(2)?;
    let r = rewards(set)?;
    let lp = logprobs(set, config)?;
    let order = set.id_order();
    let best = argmax(&r, &order);

    let mut s_best = 0.0;
    let mut pick = None;
    let mut examined = 0;
    for &j in &order {
        if j == best || !gate_passes(config.gate_mode, config.epsilon, lp[j], lp[best]) {
            continue;
        }
        examined += 1;
        let input = PairScoreInput::new(r[best], r[j], lp[best], lp[j]);
        let s = match method {
            Method::CrPlus => cr_plus(input, config.k_trust)?,
            _ => cr_times(input)?,
        };
        if s > s_best {
            s_best = s;
            pick = Some(j);
        }
    }
    Ok(match pick {
        Some(j) => SelectionOutcome::single(
            make_pair(
                set,
                best,
                j,
                method,
                s_best,
                gap_extras(&r, Some(&lp), best, j),
            ),
            examined,
        ),
        None => SelectionOutcome::skipped(SKIP_NO_POSITIVE, examined),
    })
}

/// Acceptance probability `exp((r − r_max)/β)` of statistical rejection
/// sampling.
pub fn rso_acceptance_probability(reward: f64, r_max: f64, beta: f64) -> f64 {
    ((reward - r_max) / beta).exp().min(1.0)
}

/// One accept/reject trial for a candidate with the given reward.
pub fn rso_accept<R: Rng + ?Sized>(reward: f64, r_max: f64, beta: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < rso_acceptance_probability(reward, r_max, beta)
}

/// Rejection-sampling selection.
///
/// Candidates are drawn uniformly with replacement and accepted with
/// [`rso_acceptance_probability`] until `rso_samples` are accepted. After
/// `64 · rso_samples` draws the remaining slots are filled with the
/// highest-reward candidates not yet accepted. The accepted list is shuffled
/// and split into consecutive pairs; zero-gap pairs are dropped.
pub fn select_rso<R: Rng + ?Sized>(
    set: &CandidateSet,
    config: &SelectionConfig,
    rng: &mut R,
) -> Result<SelectionOutcome> {
    set.require_k(2)?;
    if !(config.beta.is_finite() && config.beta > 0.0) {
        return Err(Error::Config(format!(
            "beta must be > 0, got {}",
            config.beta
        )));
    }
    if config.rso_samples < 2 {
        return Err(Error::Config("rso_samples must be >= 2".into()));
    }
    let r = rewards(set)?;
    let k = set.k();
    let r_max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let target = config.rso_samples;

    let mut accepted = Vec::with_capacity(target);
    let mut draws = 0;
    while accepted.len() < target && draws < 64 * target {
        let j = rng.random_range(0..k);
        draws += 1;
        if rso_accept(r[j], r_max, config.beta, rng) {
            accepted.push(j);
        }
    }
    if accepted.len() < target {
        let mut fill: Vec<usize> = set
            .id_order()
            .into_iter()
            .filter(|j| !accepted.contains(j))
            .collect();
        // stable sort keeps id order among equal rewards
        fill.sort_by(|&a, &b| r[b].total_cmp(&r[a]));
        let missing = target - accepted.len();
        accepted.extend(fill.into_iter().take(missing));
    }
    accepted.shuffle(rng);

    let mut pairs = Vec::new();
    for chunk in accepted.chunks_exact(2) {
        let (a, b) = (chunk[0], chunk[1]);
        let (w, l) = if r[a] >= r[b] { (a, b) } else { (b, a) };
        let gap = r[w] - r[l];
        if gap <= 0.0 {
            continue;
        }
        let mut extras = gap_extras(&r, None, w, l);
        extras.insert(
            "chosen_acceptance".into(),
            rso_acceptance_probability(r[w], r_max, config.beta),
        );
        extras.insert(
            "rejected_acceptance".into(),
            rso_acceptance_probability(r[l], r_max, config.beta),
        );
        pairs.push(make_pair(set, w, l, Method::Rso, gap, extras));
    }
    let examined = accepted.len() / 2;
    Ok(if pairs.is_empty() {
        SelectionOutcome::skipped(SKIP_ZERO_GAP, examined)
    } else {
        SelectionOutcome {
            pairs,
            examined,
            ..SelectionOutcome::default()
        }
    })
}

/// Reward-gap threshold selection over every unordered pair.
pub fn select_rsdpo(set: &CandidateSet, config: &SelectionConfig) -> Result<SelectionOutcome> {
    set.require_k(2)?;
    let eta = config.eta.for_class(set.direction().class()?);
    let r = rewards(set)?;
    let order = set.id_order();

    let mut pairs = Vec::new();
    let mut examined = 0;
    for (pos, &a) in order.iter().enumerate() {
        for &b in &order[pos + 1..] {
            examined += 1;
            let (w, l) = if r[a] >= r[b] { (a, b) } else { (b, a) };
            let gap = r[w] - r[l];
            if gap > eta {
                pairs.push(make_pair(
                    set,
                    w,
                    l,
                    Method::RsDpo,
                    gap,
                    gap_extras(&r, None, w, l),
                ));
            }
        }
    }
    pairs.sort_by(|x, y| {
        (x.chosen_id.as_str(), x.rejected_id.as_str())
            .cmp(&(y.chosen_id.as_str(), y.rejected_id.as_str()))
    });
    Ok(if pairs.is_empty() {
        SelectionOutcome::skipped(SKIP_BELOW_THRESHOLD, examined)
    } else {
        SelectionOutcome {
            pairs,
            examined,
            ..SelectionOutcome::default()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbrVariant {
    /// Best versus worst.
    Bw,
    /// Best, middle and worst, expanded to three pairs.
    Bmw,
}

impl MbrVariant {
    fn method(self) -> Method {
        match self {
            MbrVariant::Bw => Method::MbrBw,
            MbrVariant::Bmw => Method::MbrBmw,
        }
    }

    fn min_k(self) -> usize {
        match self {
            MbrVariant::Bw => 2,
            MbrVariant::Bmw => 3,
        }
    }
}

/// Minimum-Bayes-risk selection. Candidates are ranked by expected utility;
/// pairs are labelled by that rank.
pub fn select_mbr(
    set: &CandidateSet,
    utility: &UtilityMatrix,
    variant: MbrVariant,
) -> Result<SelectionOutcome> {
    set.require_k(variant.min_k())?;
    let matrix = utility.aligned_to(set)?;
    let scores = mbr_scores(&matrix)?;
    let mut ranked = set.id_order();
    // stable: equal scores stay in id order
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let k = set.k();
    let method = variant.method();
    let pair = |w: usize, l: usize| {
        let extras = BTreeMap::from([
            (EXTRA_CHOSEN_MBR.to_string(), scores[w]),
            (EXTRA_REJECTED_MBR.to_string(), scores[l]),
        ]);
        make_pair(set, w, l, method, scores[w] - scores[l], extras)
    };
    let (best, worst) = (ranked[0], ranked[k - 1]);
    let pairs = match variant {
        MbrVariant::Bw => vec![pair(best, worst)],
        MbrVariant::Bmw => {
            let middle = ranked[k.div_ceil(2) - 1];
            vec![pair(best, middle), pair(best, worst), pair(middle, worst)]
        }
    };
    Ok(SelectionOutcome {
        examined: pairs.len(),
        pairs,
        ..SelectionOutcome::default()
    })
}

/// QE fine-tuning target: the highest-reward candidate.
pub fn select_qe_best(set: &CandidateSet) -> Result<SelectionOutcome> {
    let r = rewards(set)?;
    let best = argmax(&r, &set.id_order());
    Ok(SelectionOutcome {
        sft_target: Some(SftTarget {
            source_id: set.source_id().to_string(),
            candidate_id: set.candidates()[best].id().to_string(),
            method: Method::QeBest,
            score: r[best],
        }),
        ..SelectionOutcome::default()
    })
}

/// Keep the `n` highest-reward candidates and pair the best with the worst
/// among them.
pub fn select_top_scores(set: &CandidateSet, n: usize) -> Result<SelectionOutcome> {
    if n < 2 || n > set.k() {
        return Err(Error::Config(format!(
            "top_scores needs 2 <= n <= K (n={n}, K={})",
            set.k()
        )));
    }
    let r = rewards(set)?;
    let mut ranked = set.id_order();
    ranked.sort_by(|&a, &b| r[b].total_cmp(&r[a]));
    let mut kept = ranked[..n].to_vec();
    kept.sort_by(|&a, &b| set.candidates()[a].id().cmp(set.candidates()[b].id()));
    extreme_reward_pair(set, &r, &kept, Method::TopScores)
}

/// Reward-only ablation: highest versus lowest reward.
pub fn select_minmax_r(set: &CandidateSet) -> Result<SelectionOutcome> {
    set.require_k(2)?;
    let r = rewards(set)?;
    extreme_reward_pair(set, &r, &set.id_order(), Method::MinmaxR)
}

fn extreme_reward_pair(
    set: &CandidateSet,
    r: &[f64],
    order: &[usize],
    method: Method,
) -> Result<SelectionOutcome> {
    let (w, l) = (argmax(r, order), argmin(r, order));
    let gap = r[w] - r[l];
    if gap <= 0.0 {
        return Ok(SelectionOutcome::skipped(SKIP_ZERO_GAP, 1));
    }
    Ok(SelectionOutcome::single(
        make_pair(set, w, l, method, gap, gap_extras(r, None, w, l)),
        1,
    ))
}

/// Confidence-only ablation: CR+ with a zero trust weight.
pub fn select_minmax_p(set: &CandidateSet, config: &SelectionConfig) -> Result<SelectionOutcome> {
    set.require_k(2)?;
    let r = rewards(set)?;
    let lp = logprobs(set, config)?;
    let order = set.id_order();
    let best = argmax(&r, &order);

    let mut s_best = 0.0;
    let mut pick = None;
    let mut examined = 0;
    for &j in &order {
        if j == best {
            continue;
        }
        examined += 1;
        let s = cr_plus(PairScoreInput::new(r[best], r[j], lp[best], lp[j]), 0.0)?;
        if s > s_best {
            s_best = s;
            pick = Some(j);
        }
    }
    Ok(match pick {
        Some(j) => SelectionOutcome::single(
            make_pair(
                set,
                best,
                j,
                Method::MinmaxP,
                s_best,
                gap_extras(&r, Some(&lp), best, j),
            ),
            examined,
        ),
        None => SelectionOutcome::skipped(SKIP_NO_CONFIDENCE_GAP, examined),
    })
}

/// Likelihood-extremes ablation: the most and least likely candidates, the
/// higher-reward one chosen.
pub fn select_minmax_po(set: &CandidateSet, config: &SelectionConfig) -> Result<SelectionOutcome> {
    set.require_k(2)?;
    let r = rewards(set)?;
    let lp = logprobs(set, config)?;
    let order = set.id_order();
    let (hi, lo) = (argmax(&lp, &order), argmin(&lp, &order));
    if hi == lo {
        return Ok(SelectionOutcome::skipped(SKIP_SAME_CANDIDATE, 1));
    }
    if r[hi] == r[lo] {
        return Ok(SelectionOutcome::skipped(SKIP_ZERO_GAP, 1));
    }
    let (w, l) = if r[hi] > r[lo] { (hi, lo) } else { (lo, hi) };
    Ok(SelectionOutcome::single(
        make_pair(
            set,
            w,
            l,
            Method::MinmaxPo,
            r[w] - r[l],
            gap_extras(&r, Some(&lp), w, l),
        ),
        1,
    ))
}

/// Where MBR selectors get their utilities from.
#[derive(Debug, Clone, Copy, Default)]
pub enum UtilitySource<'a> {
    /// Built-in character n-gram metric on candidate texts.
    #[default]
    Builtin,
    /// Precomputed matrices keyed by source id.
    Precomputed(&'a HashMap<String, UtilityMatrix>),
}

/// Deterministic generator for the set at position `stream` in a run.
pub fn selection_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the configured selector on one set and checks the output invariants.
pub fn select<R: Rng + ?Sized>(
    set: &CandidateSet,
    config: &SelectionConfig,
    utility: UtilitySource<'_>,
    rng: &mut R,
) -> Result<SelectionOutcome> {
    let outcome = match config.method {
        Method::CrPlus | Method::CrTimes => select_crpo(set, config)?,
        Method::Rso => select_rso(set, config, rng)?,
        Method::RsDpo => select_rsdpo(set, config)?,
        Method::MbrBw | Method::MbrBmw => {
            let variant = if config.method == Method::MbrBw {
                MbrVariant::Bw
            } else {
                MbrVariant::Bmw
            };
            match utility {
                UtilitySource::Builtin => select_mbr(set, &UtilityMatrix::builtin(set), variant)?,
                UtilitySource::Precomputed(map) => {
                    let m = map.get(set.source_id()).ok_or_else(|| {
                        Error::Utility(format!("no matrix for source `{}`", set.source_id()))
                    })?;
                    select_mbr(set, m, variant)?
                }
            }
        }
        Method::QeBest => select_qe_best(set)?,
        Method::TopScores => select_top_scores(set, config.top_n.min(set.k()))?,
        Method::MinmaxR => select_minmax_r(set)?,
        Method::MinmaxP => select_minmax_p(set, config)?,
        Method::MinmaxPo => select_minmax_po(set, config)?,
    };
    for pair in &outcome.pairs {
        validate_pair(set, pair)?;
    }
    Ok(outcome)
}

/// Selects over many sets in parallel. Output order follows input order and
/// does not depend on the number of worker threads.
pub fn select_all(
    sets: &[CandidateSet],
    config: &SelectionConfig,
    utility: UtilitySource<'_>,
) -> Result<Vec<SelectionOutcome>> {
    config.validate()?;
    sets.par_iter()
        .enumerate()
        .map(|(i, set)| {
            let mut rng = selection_rng(config.seed, i as u64);
            select(set, config, utility, &mut rng)
        })
        .collect()
}

/// Collects outcomes into a dataset stamped with the config and input digest.
pub fn build_dataset(
    outcomes: Vec<SelectionOutcome>,
    config: &SelectionConfig,
    input_digest: impl Into<String>,
) -> PreferenceDataset {
    let mut pairs = Vec::new();
    let mut sft_targets = Vec::new();
    for o in outcomes {
        pairs.extend(o.pairs);
        sft_targets.extend(o.sft_target);
    }
    PreferenceDataset {
        pairs,
        sft_targets,
        provenance: Provenance {
            config: config.clone(),
            input_digest: input_digest.into(),
        },
    }
}
