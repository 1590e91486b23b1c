//! Preference-optimization objectives and their gradients for tabular
//! policies.
//!
//! The DPO loss for a pair is
//!
//! ```text
//! L = -log σ(β · [(log π_θ(y_w) − log π_ref(y_w)) − (log π_θ(y_l) − log π_ref(y_l))])
//! ```
//!
//! CPO drops the reference terms. An optional behaviour-cloning term
//! `−log π_θ(y_w)` is added with weight `sft_weight`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax, sigmoid, softplus};
use crate::toylab::ToyPolicy;
use crate::types::check_reward;

/// Policy and reference log-probabilities of one preference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogits {
    pub logp_theta_w: f64,
    pub logp_theta_l: f64,
    pub logp_ref_w: f64,
    pub logp_ref_l: f64,
    pub beta: f64,
}

impl PairLogits {
    /// Difference of the chosen and rejected log-ratios.
    pub fn margin(&self) -> f64 {
        (self.logp_theta_w - self.logp_ref_w) - (self.logp_theta_l - self.logp_ref_l)
    }
}

pub fn dpo_loss(input: &PairLogits) -> f64 {
    softplus(-input.beta * input.margin())
}

pub fn cpo_loss(logp_theta_w: f64, logp_theta_l: f64, beta: f64) -> f64 {
    softplus(-beta * (logp_theta_w - logp_theta_l))
}

/// Behaviour-cloning term on the chosen output.
pub fn sft_term(logp_theta_w: f64) -> f64 {
    -logp_theta_w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `+1` when the chosen side has the higher reward, `−1` otherwise.
    Sign,
    /// The raw reward gap.
    Identity,
}

pub fn gamma(mode: GammaMode, reward_gap: f64) -> f64 {
    match mode {
        GammaMode::Sign => {
            if reward_gap > 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        GammaMode::Identity => reward_gap,
    }
}

/// Reward-weighted likelihood margin `γ(r_w − r_l)·(logp_w − logp_l)`.
pub fn gamma_loss(r_w: f64, r_l: f64, logp_w: f64, logp_l: f64, mode: GammaMode) -> Result<f64> {
    check_reward("r_w", r_w)?;
    check_reward("r_l", r_l)?;
    Ok(gamma(mode, r_w - r_l) * (logp_w - logp_l))
}

/// Log-probabilities of the chosen and rejected sentence under one policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

/// Change of the inner DPO margin when moving from `before` to `after`.
pub fn delta_loss(before: PairLogProbs, after: PairLogProbs) -> f64 {
    (after.chosen - after.rejected) + (before.rejected - before.chosen)
}

/// Log-probabilities of the reward-tilted policy `∝ exp(k · R)` over a finite
/// candidate space.
pub fn reward_tilted_logprobs(rewards: &[f64], k_trust: f64) -> Vec<f64> {
    let logits: Vec<f64> = rewards.iter().map(|r| k_trust * r).collect();
    log_softmax(&logits)
}

/// Log-probabilities of the KL-regularized optimum `∝ π_ref · exp(R/β)`.
pub fn optimal_policy_logprobs(ref_logprobs: &[f64], rewards: &[f64], beta: f64) -> Vec<f64> {
    let logits: Vec<f64> = ref_logprobs
        .iter()
        .zip(rewards)
        .map(|(lp, r)| lp + r / beta)
        .collect();
    log_softmax(&logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dpo,
    Cpo,
    /// Behaviour cloning only; the rejected side of each pair is ignored.
    Sft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub beta: f64,
    pub sft_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dpo,
            beta: 0.1,
            sft_weight: 1.0,
        }
    }
}

/// A preference pair addressed by (source row, output column) in a tabular
/// policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TabularPair {
    pub source: usize,
    pub chosen: usize,
    pub rejected: usize,
}

fn check_pairs(policy: &ToyPolicy, pairs: &[TabularPair]) -> Result<()> {
    for p in pairs {
        if p.source >= policy.n_sources()
            || p.chosen >= policy.outputs()
            || p.rejected >= policy.outputs()
        {
            return Err(Error::Unresolved(format!(
                "pair {p:?} outside a {}x{} policy",
                policy.n_sources(),
                policy.outputs()
            )));
        }
    }
    Ok(())
}

/// Loss of a single pair given the row log-probabilities of both policies.
fn pair_loss(cfg: &ObjectiveConfig, lp: &[f64], lp_ref: &[f64], p: &TabularPair) -> f64 {
    let sft = cfg.sft_weight * sft_term(lp[p.chosen]);
    match cfg.objective {
        Objective::Dpo => {
            dpo_loss(&PairLogits {
                logp_theta_w: lp[p.chosen],
                logp_theta_l: lp[p.rejected],
                logp_ref_w: lp_ref[p.chosen],
                logp_ref_l: lp_ref[p.rejected],
                beta: cfg.beta,
            }) + sft
        }
        Objective::Cpo => cpo_loss(lp[p.chosen], lp[p.rejected], cfg.beta) + sft,
        Objective::Sft => sft,
    }
}

/// Mean objective over `pairs`, without the gradient.
pub fn batch_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TabularPair],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    check_pairs(policy, pairs)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            pair_loss(
                cfg,
                &policy.row_logprobs(p.source),
                &reference.row_logprobs(p.source),
                p,
            )
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Mean objective over `pairs` and its analytic gradient with respect to the
/// policy's logit table (row-major, same shape as the policy).
///
/// With `log π(m) = z_m − logsumexp(z)` the row gradient of `log π(m)` is
/// `e_m − π`, so the DPO/CPO terms contribute `−β σ(−β u)(e_w − e_l)` and the
/// SFT term contributes `−w (e_w − π)`. Pairs are accumulated in input order.
pub fn batch_loss_and_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TabularPair],
    cfg: &ObjectiveConfig,
) -> Result<(f64, Vec<f64>)> {
    check_pairs(policy, pairs)?;
    let m = policy.outputs();
    let mut grad = vec![0.0; policy.n_sources() * m];
    if pairs.is_empty() {
        return Ok((0.0, grad));
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for p in pairs {
        let lp = policy.row_logprobs(p.source);
        let lp_ref = reference.row_logprobs(p.source);
        total += pair_loss(cfg, &lp, &lp_ref, p);

        let row = &mut grad[p.source * m..(p.source + 1) * m];
        let margin = match cfg.objective {
            Objective::Dpo => {
                Some((lp[p.chosen] - lp_ref[p.chosen]) - (lp[p.rejected] - lp_ref[p.rejected]))
            }
            Objective::Cpo => Some(lp[p.chosen] - lp[p.rejected]),
            Objective::Sft => None,
        };
        if let Some(u) = margin {
            let c = -cfg.beta * sigmoid(-cfg.beta * u) / n;
            row[p.chosen] += c;
            row[p.rejected] -= c;
        }
        if cfg.sft_weight != 0.0 {
            let w = cfg.sft_weight / n;
            for (g, l) in row.iter_mut().zip(&lp) {
                *g += w * l.exp();
            }
            row[p.chosen] -= w;
        }
    }
    Ok((total / n, grad))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Worst relative gradient error for one objective across a batch of
/// random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub objective: Objective,
    pub sft_weight: f64,
    pub instances: usize,
    pub max_relative_error: f64,
}

/// Denominator floor for relative gradient errors. Central differences with
/// `h = 1e-5` carry rounding noise near `1e-10`, so entries whose true
/// gradient is zero would otherwise dominate the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compares [`batch_loss_and_grad`] with central differences (step `h`) on
/// `instances` random tabular problems for DPO, CPO and CPO+SFT.
pub fn check_gradients(seed: u64, instances: usize, h: f64) -> Result<Vec<GradCheck>> {
    let variants = [
        (Objective::Dpo, 0.0),
        (Objective::Cpo, 0.0),
        (Objective::Cpo, 1.0),
    ];
    let mut out: Vec<GradCheck> = variants
        .iter()
        .map(|&(objective, sft_weight)| GradCheck {
            objective,
            sft_weight,
            instances,
            max_relative_error: 0.0,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (n, m) = (rng.random_range(1..=4), rng.random_range(2..=8));
        let mut table = || {
            (0..n * m)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect::<Vec<f64>>()
        };
        let (z, z_ref) = (table(), table());
        let reference = ToyPolicy::from_logits(n, m, z_ref)?;
        let pairs: Vec<TabularPair> = (0..rng.random_range(1..=6))
            .map(|_| {
                let chosen = rng.random_range(0..m);
                TabularPair {
                    source: rng.random_range(0..n),
                    chosen,
                    rejected: (chosen + rng.random_range(1..m)) % m,
                }
            })
            .collect();
        let beta = rng.random_range(0.05..2.0);
        for check in out.iter_mut() {
            let cfg = ObjectiveConfig {
                objective: check.objective,
                beta,
                sft_weight: check.sft_weight,
            };
            let policy = ToyPolicy::from_logits(n, m, z.clone())?;
            let (_, analytic) = batch_loss_and_grad(&policy, &reference, &pairs, &cfg)?;
            let numeric = central_difference(
                |x| {
                    let p = ToyPolicy::from_logits(n, m, x.to_vec()).expect("finite probe");
                    batch_loss(&p, &reference, &pairs, &cfg).expect("pairs in range")
                },
                &z,
                h,
            );
            let err = max_relative_error(&analytic, &numeric, GRAD_CHECK_FLOOR);
            check.max_relative_error = check.max_relative_error.max(err);
        }
    }
    Ok(out)
}
