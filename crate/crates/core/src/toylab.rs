//! An exactly solvable preference-optimization world.
//!
//! Each source has `M` enumerable outputs with a fixed reward and a tabular
//! softmax reference policy. Candidates are sampled from the reference, a
//! selector builds preference pairs, a tabular policy is trained on them with
//! full-batch gradient descent, and the expected reward of the result is
//! computed exactly.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{batch_loss_and_grad, Objective, ObjectiveConfig, TabularPair};
use crate::math::{log_softmax, softmax};
use crate::scoring::UtilityMatrix;
use crate::selectors::{select, select_crpo, select_rsdpo, selection_rng, UtilitySource};
use crate::types::{Candidate, CandidateSet, Direction, Method, PreferencePair, SelectionConfig};

/// Tabular softmax policy: one row of logits per source.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    n_sources: usize,
    outputs: usize,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn from_logits(n_sources: usize, outputs: usize, logits: Vec<f64>) -> Result<Self> {
        if outputs == 0 || logits.len() != n_sources * outputs {
            return Err(Error::Config(format!(
                "expected {n_sources}x{outputs} logits, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy logits"));
        }
        Ok(Self {
            n_sources,
            outputs,
            logits,
        })
    }

    pub fn uniform(n_sources: usize, outputs: usize) -> Self {
        Self {
            n_sources,
            outputs,
            logits: vec![0.0; n_sources * outputs],
        }
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row_logits(&self, source: usize) -> &[f64] {
        &self.logits[source * self.outputs..(source + 1) * self.outputs]
    }

    pub fn row_logprobs(&self, source: usize) -> Vec<f64> {
        log_softmax(self.row_logits(source))
    }

    pub fn row_probs(&self, source: usize) -> Vec<f64> {
        softmax(self.row_logits(source))
    }
}

/// Parameters for generating a random [`ToyWorld`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_sources: usize,
    pub outputs: usize,
    /// Weight of the reference-likelihood rank in each reward; `0` makes
    /// rewards independent of the reference policy.
    pub rho: f64,
    /// Standard deviation of the reference logits.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_sources: 50,
            outputs: 32,
            rho: 0.5,
            logit_scale: 2.0,
            seed: 0,
        }
    }
}

/// Finite output spaces with an exact reward table and reference policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    n_sources: usize,
    outputs: usize,
    rewards: Vec<f64>,
    reference: ToyPolicy,
    seed: u64,
}

impl ToyWorld {
    pub fn new(
        n_sources: usize,
        outputs: usize,
        rewards: Vec<f64>,
        ref_logits: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let reference = ToyPolicy::from_logits(n_sources, outputs, ref_logits)?;
        if rewards.len() != n_sources * outputs {
            return Err(Error::Config("reward table shape mismatch".into()));
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::RewardOutOfRange {
                name: "reward_table".into(),
                value: *r,
            });
        }
        Ok(Self {
            n_sources,
            outputs,
            rewards,
            reference,
            seed,
        })
    }

    /// Gaussian reference logits; rewards mix the within-row likelihood rank
    /// (weight `rho`) with independent uniform noise.
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        let WorldConfig {
            n_sources,
            outputs,
            rho,
            logit_scale,
            seed,
        } = *config;
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must lie in [0,1], got {rho}")));
        }
        if outputs < 2 {
            return Err(Error::Config("a toy world needs at least 2 outputs".into()));
        }
        let normal = Normal::new(0.0, logit_scale)
            .map_err(|e| Error::Config(format!("logit_scale: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::with_capacity(n_sources * outputs);
        let mut rewards = Vec::with_capacity(n_sources * outputs);
        for _ in 0..n_sources {
            let row: Vec<f64> = (0..outputs).map(|_| normal.sample(&mut rng)).collect();
            let mut order: Vec<usize> = (0..outputs).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            let mut rank = vec![0.0; outputs];
            for (pos, &m) in order.iter().enumerate() {
                rank[m] = pos as f64 / (outputs - 1) as f64;
            }
            for &p in &rank {
                let noise: f64 = rng.random();
                rewards.push((rho * p + (1.0 - rho) * noise).clamp(0.0, 1.0));
            }
            logits.extend(row);
        }
        Self::new(n_sources, outputs, rewards, logits, seed)
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn reward(&self, source: usize, output: usize) -> f64 {
        self.rewards[source * self.outputs + output]
    }

    pub fn reward_row(&self, source: usize) -> &[f64] {
        &self.rewards[source * self.outputs..(source + 1) * self.outputs]
    }

    pub fn reference(&self) -> &ToyPolicy {
        &self.reference
    }

    /// Copy of the world with `delta` added to one reward row.
    pub fn with_shifted_rewards(&self, source: usize, delta: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.rewards[source * self.outputs..(source + 1) * self.outputs] {
            *r += delta;
        }
        out
    }
}

/// Candidates sampled for one source together with the output each
/// candidate id refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub source: usize,
    pub set: CandidateSet,
    pub outputs: Vec<usize>,
}

impl ToySample {
    pub fn output_of(&self, candidate_id: &str) -> Option<usize> {
        self.set
            .candidates()
            .iter()
            .position(|c| c.id() == candidate_id)
            .map(|i| self.outputs[i])
    }
}

pub fn toy_source_id(source: usize) -> String {
    format!("s{source:04}")
}

/// Nucleus set of a probability vector: the most likely outputs whose mass
/// first reaches `top_p`, with ties in probability broken by index.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut mass = 0.0;
    let mut kept = Vec::new();
    for m in order {
        kept.push(m);
        mass += probs[m];
        if mass >= top_p {
            break;
        }
    }
    kept
}

/// Draws `k` candidates with replacement from the temperature-scaled,
/// nucleus-truncated reference distribution of `source`.
///
/// Candidate log-probabilities are the untruncated reference
/// log-probabilities, not the sampler's.
pub fn sample_candidates<R: Rng + ?Sized>(
    world: &ToyWorld,
    source: usize,
    k: usize,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<ToySample> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Config(format!(
            "top_p must lie in (0,1], got {top_p}"
        )));
    }
    if source >= world.n_sources() || k == 0 {
        return Err(Error::Config(format!("invalid source {source} or k {k}")));
    }
    let row = world.reference().row_logits(source);
    let scaled: Vec<f64> = row.iter().map(|z| z / temperature).collect();
    let probs = softmax(&scaled);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateDistribution {
            source_index: source,
        });
    }
    let kept = nucleus(&probs, top_p);
    let dist = WeightedIndex::new(kept.iter().map(|&m| probs[m])).map_err(|_| {
        Error::DegenerateDistribution {
            source_index: source,
        }
    })?;

    let ref_logprobs = world.reference().row_logprobs(source);
    let mut candidates = Vec::with_capacity(k);
    let mut outputs = Vec::with_capacity(k);
    for j in 0..k {
        let m = kept[dist.sample(rng)];
        outputs.push(m);
        candidates.push(Candidate::new(
            format!("c{j:03}"),
            format!("y{m}"),
            Some(ref_logprobs[m].min(0.0)),
            BTreeMap::from([("toy".to_string(), world.reward(source, m))]),
        )?);
    }
    let set = CandidateSet::new(
        toy_source_id(source),
        format!("x{source}"),
        Direction::new("en", "xx"),
        candidates,
    )?;
    Ok(ToySample {
        source,
        set,
        outputs,
    })
}

/// The KL-regularized optimum `π* ∝ π_ref · exp(R/β)`, stored as normalized
/// log-probabilities.
pub fn exact_optimal_policy(world: &ToyWorld, beta: f64) -> Result<ToyPolicy> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    let mut logits = Vec::with_capacity(world.n_sources() * world.outputs());
    for s in 0..world.n_sources() {
        let shifted: Vec<f64> = world
            .reference()
            .row_logprobs(s)
            .iter()
            .zip(world.reward_row(s))
            .map(|(lp, r)| lp + r / beta)
            .collect();
        logits.extend(log_softmax(&shifted));
    }
    ToyPolicy::from_logits(world.n_sources(), world.outputs(), logits)
}

/// Mean over sources of the policy's expected reward.
pub fn expected_reward(policy: &ToyPolicy, world: &ToyWorld) -> Result<f64> {
    if policy.n_sources() != world.n_sources() || policy.outputs() != world.outputs() {
        return Err(Error::Config("policy shape does not match world".into()));
    }
    if world.n_sources() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..world.n_sources())
        .map(|s| {
            policy
                .row_probs(s)
                .iter()
                .zip(world.reward_row(s))
                .map(|(p, r)| p * r)
                .sum::<f64>()
        })
        .sum();
    Ok(total / world.n_sources() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    /// Loss before each update.
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Full-batch gradient descent on the preference objective.
pub fn train_dpo(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TabularPair],
    lr: f64,
    steps: usize,
    objective: &ObjectiveConfig,
) -> Result<TrainOutcome> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    let mut current = policy.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = batch_loss_and_grad(&current, reference, pairs, objective)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        for (z, g) in current.logits.iter_mut().zip(&grad) {
            *z -= lr * g;
        }
        if current.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
    }
    let (final_loss, _) = batch_loss_and_grad(&current, reference, pairs, objective)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: steps,
            loss: final_loss,
        });
    }
    Ok(TrainOutcome {
        policy: current,
        losses,
        final_loss,
    })
}

/// A method entered in a toy comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompareMethod {
    Select(Method),
    /// Control: two distinct random candidates, higher reward chosen.
    RandomPair,
}

impl CompareMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            CompareMethod::Select(m) => m.tag(),
            CompareMethod::RandomPair => "random_pair",
        }
    }
}

impl FromStr for CompareMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random_pair" {
            return Ok(CompareMethod::RandomPair);
        }
        s.parse::<Method>()
            .map(CompareMethod::Select)
            .map_err(|e| Error::Config(format!("{e}, or random_pair")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Candidates sampled per source.
    pub k: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub lr: f64,
    pub steps: usize,
    pub objective: ObjectiveConfig,
    /// Hyperparameters for the selectors; `method` and `seed` are set per run.
    pub selection: SelectionConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            k: 16,
            temperature: 0.9,
            top_p: 0.9,
            lr: 1.0,
            steps: 100,
            objective: ObjectiveConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_gain: f64,
    pub std_err: f64,
    /// Expected-reward gain over the reference policy, one per seed.
    pub gains: Vec<f64>,
    pub pair_counts: Vec<usize>,
    /// Set when the method produced no pairs for any source on some seed.
    pub empty_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub method: String,
    pub against: String,
    /// Fraction of seeds on which `method` gained strictly more.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub world_seed: u64,
    pub n_sources: usize,
    pub outputs: usize,
    pub reference_reward: f64,
    pub seeds: Vec<u64>,
    pub trainer: TrainerConfig,
    pub methods: Vec<MethodSummary>,
    pub win_rates: Vec<WinRate>,
}

impl ComparisonReport {
    pub fn method(&self, tag: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == tag)
    }
}

/// Candidate pools for every source, drawn from a seed that does not depend
/// on the method, so all methods in a comparison see identical pools.
pub fn sample_world(
    world: &ToyWorld,
    seed: u64,
    trainer: &TrainerConfig,
) -> Result<Vec<ToySample>> {
    (0..world.n_sources())
        .map(|s| {
            let mut rng = selection_rng(seed, s as u64);
            sample_candidates(
                world,
                s,
                trainer.k,
                trainer.temperature,
                trainer.top_p,
                &mut rng,
            )
        })
        .collect()
}

/// Utility used by MBR selectors inside the toy world: agreement of rewards,
/// `1 − |R(a) − R(b)|`.
pub fn toy_utility(sample: &ToySample) -> UtilityMatrix {
    let c = sample.set.candidates();
    let r: Vec<f64> = c.iter().map(|c| c.reward_opt().unwrap_or(0.0)).collect();
    UtilityMatrix::from_fn(c.iter().map(|c| c.id().to_string()).collect(), |i, j| {
        1.0 - (r[i] - r[j]).abs()
    })
    .expect("finite utilities")
}

const CONTROL_STREAM: u64 = 0x5eed_c0de;

/// Builds the tabular training pairs one method selects on a sampled pool.
pub fn select_training_pairs(
    samples: &[ToySample],
    method: CompareMethod,
    seed: u64,
    selection: &SelectionConfig,
) -> Result<Vec<TabularPair>> {
    let mut out = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let resolve = |id: &str| {
            sample.output_of(id).ok_or_else(|| {
                Error::Unresolved(format!("candidate `{id}` in {}", sample.set.source_id()))
            })
        };
        match method {
            CompareMethod::RandomPair => {
                let mut rng = selection_rng(seed ^ CONTROL_STREAM, i as u64);
                let k = sample.set.k();
                if k < 2 {
                    continue;
                }
                let a = rng.random_range(0..k);
                let b = (a + rng.random_range(1..k)) % k;
                let c = sample.set.candidates();
                let (ra, rb) = (c[a].reward()?, c[b].reward()?);
                if ra == rb {
                    continue;
                }
                let (w, l) = if ra > rb { (a, b) } else { (b, a) };
                out.push(TabularPair {
                    source: sample.source,
                    chosen: sample.outputs[w],
                    rejected: sample.outputs[l],
                });
            }
            CompareMethod::Select(m) => {
                let config = SelectionConfig {
                    method: m,
                    seed,
                    ..selection.clone()
                };
                let mut rng = selection_rng(seed, i as u64);
                let outcome = if m.is_mbr() {
                    let map =
                        HashMap::from([(sample.set.source_id().to_string(), toy_utility(sample))]);
                    select(
                        &sample.set,
                        &config,
                        UtilitySource::Precomputed(&map),
                        &mut rng,
                    )?
                } else {
                    select(&sample.set, &config, UtilitySource::Builtin, &mut rng)?
                };
                for PreferencePair {
                    chosen_id,
                    rejected_id,
                    ..
                } in &outcome.pairs
                {
                    out.push(TabularPair {
                        source: sample.source,
                        chosen: resolve(chosen_id)?,
                        rejected: resolve(rejected_id)?,
                    });
                }
                if let Some(t) = &outcome.sft_target {
                    let m = resolve(&t.candidate_id)?;
                    out.push(TabularPair {
                        source: sample.source,
                        chosen: m,
                        rejected: m,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn run_one(
    world: &ToyWorld,
    samples: &[ToySample],
    method: CompareMethod,
    seed: u64,
    trainer: &TrainerConfig,
    reference_reward: f64,
) -> Result<(f64, usize)> {
    let pairs = select_training_pairs(samples, method, seed, &trainer.selection)?;
    if pairs.is_empty() {
        return Ok((0.0, 0));
    }
    let mut objective = trainer.objective;
    if method == CompareMethod::Select(Method::QeBest) {
        objective.objective = Objective::Sft;
    }
    let trained = train_dpo(
        world.reference(),
        world.reference(),
        &pairs,
        trainer.lr,
        trainer.steps,
        &objective,
    )?;
    Ok((
        expected_reward(&trained.policy, world)? - reference_reward,
        pairs.len(),
    ))
}

/// Runs every (method, seed) combination: sample, select, train, and measure
/// the expected-reward gain over the reference policy.
pub fn run_comparison(
    world: &ToyWorld,
    methods: &[CompareMethod],
    seeds: &[u64],
    trainer: &TrainerConfig,
) -> Result<ComparisonReport> {
    if methods.len() < 2 {
        return Err(Error::Config(
            "a comparison needs at least 2 methods".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Config("a comparison needs at least one seed".into()));
    }
    let reference_reward = expected_reward(world.reference(), world)?;
    let pools = seeds
        .par_iter()
        .map(|&seed| sample_world(world, seed, trainer))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..seeds.len()).map(move |s| (m, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(m, s)| {
            run_one(
                world,
                &pools[s],
                methods[m],
                seeds[s],
                trainer,
                reference_reward,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let n = seeds.len();
    let summaries: Vec<MethodSummary> = methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let runs = &results[m * n..(m + 1) * n];
            let gains: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let mean = gains.iter().sum::<f64>() / n as f64;
            let std_err = if n > 1 {
                let var = gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            MethodSummary {
                method: method.tag().to_string(),
                mean_gain: mean,
                std_err,
                gains,
                pair_counts: runs.iter().map(|r| r.1).collect(),
                empty_runs: runs.iter().filter(|r| r.1 == 0).count(),
            }
        })
        .collect();

    let mut win_rates = Vec::new();
    for a in &summaries {
        for b in &summaries {
            if a.method == b.method {
                continue;
            }
            let wins = a.gains.iter().zip(&b.gains).filter(|(x, y)| x > y).count();
            win_rates.push(WinRate {
                method: a.method.clone(),
                against: b.method.clone(),
                rate: wins as f64 / n as f64,
            });
        }
    }

    Ok(ComparisonReport {
        world_seed: world.seed(),
        n_sources: world.n_sources(),
        outputs: world.outputs(),
        reference_reward,
        seeds: seeds.to_vec(),
        trainer: trainer.clone(),
        methods: summaries,
        win_rates,
    })
}

/// Trust weight that puts the reward and confidence terms on the same scale:
/// the ratio of the standard deviations of log-probability and reward over
/// every candidate in `sets`.
pub fn magnitude_matched_trust(sets: &[CandidateSet]) -> Result<f64> {
    let mut lp = Vec::new();
    let mut r = Vec::new();
    for c in sets.iter().flat_map(|s| s.candidates()) {
        lp.push(c.logprob()?);
        r.push(c.reward()?);
    }
    let sd = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let (s_lp, s_r) = (sd(&lp), sd(&r));
    if !(s_lp > 0.0 && s_r > 0.0) {
        return Err(Error::Config(
            "trust weight needs spread in both rewards and log-probabilities".into(),
        ));
    }
    Ok(s_lp / s_r)
}

/// For every set where both selectors emit pairs: the log-probability of the
/// CRPO-rejected candidate and the mean log-probability of the RS-DPO-rejected
/// candidates.
pub fn rejected_logprob_contrast(
    sets: &[CandidateSet],
    crpo_config: &SelectionConfig,
    rsdpo_config: &SelectionConfig,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for set in sets {
        let cr = select_crpo(set, crpo_config)?;
        let rs = select_rsdpo(set, rsdpo_config)?;
        if cr.pairs.is_empty() || rs.pairs.is_empty() {
            continue;
        }
        let lp = |id: &str| {
            set.get(id)
                .ok_or_else(|| Error::Unresolved(format!("candidate `{id}`")))
                .and_then(Candidate::logprob)
        };
        let mut rejected = 0.0;
        for p in &rs.pairs {
            rejected += lp(&p.rejected_id)?;
        }
        out.push((
            lp(&cr.pairs[0].rejected_id)?,
            rejected / rs.pairs.len() as f64,
        ));
    }
    Ok(out)
}
