//! Pure scoring functions used by the selectors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_reward, CandidateSet};

/// Aggregate rewards and effective log-probabilities of a candidate pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScoreInput {
    pub r_w: f64,
    pub r_l: f64,
    pub logp_w: f64,
    pub logp_l: f64,
}

impl PairScoreInput {
    pub fn new(r_w: f64, r_l: f64, logp_w: f64, logp_l: f64) -> Self {
        Self {
            r_w,
            r_l,
            logp_w,
            logp_l,
        }
    }

    /// The same pair with the two sides exchanged.
    pub fn swapped(self) -> Self {
        Self::new(self.r_l, self.r_w, self.logp_l, self.logp_w)
    }

    fn check(&self) -> Result<()> {
        if [self.r_w, self.r_l, self.logp_w, self.logp_l]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::NonFinite("pair score input"))
        }
    }

    /// `logp_l - logp_w`: how much more the reference policy favours the
    /// rejected side.
    pub fn confidence_gap(&self) -> f64 {
        self.logp_l - self.logp_w
    }
}

/// Additive confidence-reward score: `k·(r_w − r_l) + (logp_l − logp_w)`.
///
/// `k_trust = 0` leaves only the confidence term.
pub fn cr_plus(input: PairScoreInput, k_trust: f64) -> Result<f64> {
    input.check()?;
    if !(k_trust.is_finite() && k_trust >= 0.0) {
        return Err(Error::Config(format!(
            "k_trust must be finite and >= 0, got {k_trust}"
        )));
    }
    Ok(k_trust * (input.r_w - input.r_l) + input.confidence_gap())
}

/// Multiplicative confidence-reward score: `(r_w − r_l)·(logp_l − logp_w)`.
pub fn cr_times(input: PairScoreInput) -> Result<f64> {
    input.check()?;
    Ok((input.r_w - input.r_l) * input.confidence_gap())
}

pub fn reward_gap(r_w: f64, r_l: f64) -> Result<f64> {
    check_reward("r_w", r_w)?;
    check_reward("r_l", r_l)?;
    Ok(r_w - r_l)
}

/// Pairwise utilities between the candidates of one set:
/// `value(i, j) = U(y_i, y_j)` with `y_j` acting as pseudo-reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityMatrix {
    ids: Vec<String>,
    /// Row-major, `ids.len()²` entries.
    values: Vec<f64>,
}

impl UtilityMatrix {
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let k = ids.len();
        if values.len() != k * k {
            return Err(Error::Utility(format!(
                "expected {} values for {k} ids, got {}",
                k * k,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Utility(format!(
                "non-finite entry at ({}, {})",
                pos / k,
                pos % k
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Utility(format!("duplicate id `{dup}`")));
        }
        Ok(Self { ids, values })
    }

    pub fn from_fn(ids: Vec<String>, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let k = ids.len();
        let mut values = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                values.push(f(i, j));
            }
        }
        Self::new(ids, values)
    }

    /// Built-in character n-gram utility between every pair of candidate texts.
    pub fn builtin(set: &CandidateSet) -> Self {
        let c = set.candidates();
        let prepared: Vec<CharNgrams> = c.iter().map(|c| CharNgrams::new(c.text())).collect();
        let ids = c.iter().map(|c| c.id().to_string()).collect();
        Self::from_fn(ids, |i, j| {
            if i == j {
                1.0
            } else {
                prepared[i].fscore(&prepared[j])
            }
        })
        .expect("builtin utility is finite and ids are distinct")
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k() + j]
    }

    /// Reorders the matrix to follow the candidate order of `set`.
    pub fn aligned_to(&self, set: &CandidateSet) -> Result<Self> {
        if self.k() != set.k() {
            return Err(Error::Utility(format!(
                "matrix has {} ids, source `{}` has {} candidates",
                self.k(),
                set.source_id(),
                set.k()
            )));
        }
        let index: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let perm = set
            .candidates()
            .iter()
            .map(|c| {
                index
                    .get(c.id())
                    .copied()
                    .ok_or_else(|| Error::Utility(format!("no row for candidate `{}`", c.id())))
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = set
            .candidates()
            .iter()
            .map(|c| c.id().to_string())
            .collect();
        Self::from_fn(ids, |i, j| self.get(perm[i], perm[j]))
    }
}

/// Expected utility of candidate `j` against every other candidate as a
/// pseudo-reference; the diagonal is excluded.
pub fn mbr_expected_utility(matrix: &UtilityMatrix, j: usize) -> Result<f64> {
    let k = matrix.k();
    if k < 2 {
        return Err(Error::Utility(format!("MBR needs K >= 2, got {k}")));
    }
    if j >= k {
        return Err(Error::Utility(format!("index {j} out of range for K={k}")));
    }
    let total: f64 = (0..k).filter(|&m| m != j).map(|m| matrix.get(j, m)).sum();
    Ok(total / (k - 1) as f64)
}

pub fn mbr_scores(matrix: &UtilityMatrix) -> Result<Vec<f64>> {
    (0..matrix.k())
        .map(|j| mbr_expected_utility(matrix, j))
        .collect()
}

const MAX_ORDER: usize = 6;
const FSCORE_BETA: f64 = 2.0;

/// Character n-gram counts (orders 1..=6) of a whitespace-stripped text.
#[derive(Debug, Clone)]
struct CharNgrams {
    orders: Vec<HashMap<Vec<char>, u32>>,
    totals: [u32; MAX_ORDER],
}

impl CharNgrams {
    fn new(text: &str) -> Self {
        let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut orders = Vec::with_capacity(MAX_ORDER);
        let mut totals = [0; MAX_ORDER];
        for n in 1..=MAX_ORDER {
            let mut counts = HashMap::new();
            for window in chars.windows(n) {
                *counts.entry(window.to_vec()).or_insert(0) += 1;
                totals[n - 1] += 1;
            }
            orders.push(counts);
        }
        Self { orders, totals }
    }

    /// chrF-style F-score of `self` (hypothesis) against `reference`.
    ///
    /// Precision and recall are averaged over every order where at least
    /// one side has n-grams, then combined with recall weighted by β=2.
    fn fscore(&self, reference: &Self) -> f64 {
        let mut precision = 0.0;
        let mut recall = 0.0;
        let mut orders = 0usize;
        for n in 0..MAX_ORDER {
            let (hyp_total, ref_total) = (self.totals[n], reference.totals[n]);
            if hyp_total == 0 && ref_total == 0 {
                continue;
            }
            let matches: u32 = self.orders[n]
                .iter()
                .map(|(g, &c)| c.min(reference.orders[n].get(g).copied().unwrap_or(0)))
                .sum();
            if hyp_total > 0 {
                precision += f64::from(matches) / f64::from(hyp_total);
            }
            if ref_total > 0 {
                recall += f64::from(matches) / f64::from(ref_total);
            }
            orders += 1;
        }
        if orders == 0 {
            // both texts are empty
            return 1.0;
        }
        precision /= orders as f64;
        recall /= orders as f64;
        let b2 = FSCORE_BETA * FSCORE_BETA;
        let denom = b2 * precision + recall;
        if denom <= 0.0 {
            return 0.0;
        }
        ((1.0 + b2) * precision * recall / denom).clamp(0.0, 1.0)
    }
}

/// Character n-gram F-score (orders 1–6, β = 2) of `hypothesis` against
/// `reference`, in `[0, 1]`. Whitespace is ignored.
pub fn builtin_utility(hypothesis: &str, reference: &str) -> f64 {
    CharNgrams::new(hypothesis).fscore(&CharNgrams::new(reference))
}
