//! Offset transfer with an unknown transferable set, by ranking sources and
//! aggregating the resulting candidates.
//!
//! The target sample is split three ways. The first half fits a local
//! estimator, ranks sources by how closely their predictions agree with it and
//! builds one offset-transfer candidate per prefix of the ranking. The
//! remaining quarters select a leader and blend it with a single competitor.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::estimators::{fit_local_with, fit_otl, LambdaConfig, VarianceMode};
use crate::rng::stream_rng;
use crate::smoothing::{CoefEstimate, Method, SmoothedDataset};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConstants {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub alpha: f64,
}

impl AggregationConstants {
    /// Constants for `k` sources and `n0` target subjects, given the bound `b3`.
    pub fn new(b3: f64, k: usize, n0: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if !(b3 >= 0.0) || !b3.is_finite() {
            return Err(Error::invalid(format!("b3 must be finite and >= 0, got {b3}")));
        }
        if n0 == 0 {
            return Err(Error::invalid("target sample is empty"));
        }
        Ok(AggregationConstants {
            b1: 4.0 * (1.0 + 9.0 * b3),
            b2: b3 * ((((k + 1) as f64).ln() + alpha) / n0 as f64).sqrt(),
            b3,
            alpha,
        })
    }

    /// Admission slack for a candidate at estimation distance `r2` from the leader.
    pub fn slack(&self, r2: f64) -> f64 {
        self.b1 * (self.b2 * self.b2).max(self.b2 * r2.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub idx_01: Vec<usize>,
    pub idx_021: Vec<usize>,
    pub idx_022: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    /// Random split of `0..n`: `ceil(n/2)` subjects to the first part, the rest
    /// halved with the odd one going to the second part. Index sets are sorted.
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n < 3 {
            return Err(Error::invalid(format!("need at least 3 target subjects to split, got {n}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, "aotl-split"));
        let n1 = n.div_ceil(2);
        let n21 = (n - n1).div_ceil(2);
        let mut parts = [
            idx[..n1].to_vec(),
            idx[n1..n1 + n21].to_vec(),
            idx[n1 + n21..].to_vec(),
        ];
        for p in &mut parts {
            p.sort_unstable();
        }
        let [idx_01, idx_021, idx_022] = parts;
        Ok(SplitPlan {
            idx_01,
            idx_021,
            idx_022,
            seed,
        })
    }
}

fn check_subset(sm: &SmoothedDataset, idx: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::invalid("empty index set"));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= sm.n()) {
        return Err(Error::invalid(format!("index {bad} out of range for {} subjects", sm.n())));
    }
    Ok(())
}

/// Mean squared prediction error of `f` over the subjects `idx`.
pub fn risk_r1(f: &CoefEstimate, sm: &SmoothedDataset, idx: &[usize]) -> Result<f64> {
    check_subset(sm, idx)?;
    f.check_basis(sm.basis())?;
    let pred = sm.inner_products(&f.c);
    let y = sm.y();
    Ok(idx.iter().map(|&i| (y[i] - pred[i]).powi(2)).sum::<f64>() / idx.len() as f64)
}

/// Mean squared difference between the predictions of `f1` and `f2` over `idx`.
pub fn dist_r2(f1: &CoefEstimate, f2: &CoefEstimate, sm: &SmoothedDataset, idx: &[usize]) -> Result<f64> {
    check_subset(sm, idx)?;
    f1.check_basis(sm.basis())?;
    f2.check_basis(sm.basis())?;
    let d = sm.inner_products(&(&f1.c - &f2.c));
    Ok(idx.iter().map(|&i| d[i] * d[i]).sum::<f64>() / idx.len() as f64)
}

/// Nested prefixes of the sources sorted by `distances` (ties to the smaller
/// index). Entries are 0-based source positions.
pub fn candidate_sets_from_distances(distances: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    (1..=order.len()).map(|k| order[..k].to_vec()).collect()
}

/// Transferable-set candidates ranked by agreement with `beta_01` on `idx_01`.
pub fn candidate_sets(
    beta_01: &CoefEstimate,
    source_fits: &[CoefEstimate],
    sm: &SmoothedDataset,
    idx_01: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let d = source_fits
        .iter()
        .map(|f| dist_r2(beta_01, f, sm, idx_01))
        .collect::<Result<Vec<_>>>()?;
    Ok(candidate_sets_from_distances(&d))
}

#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub estimate: CoefEstimate,
    /// Index into the candidate list of the leader on the second quarter.
    pub leader: usize,
    /// Candidates admitted for blending.
    pub admitted: Vec<usize>,
    /// Competitor blended with the leader and its weight on the leader.
    pub partner: usize,
    pub weight: f64,
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v < values[best] { i } else { best })
}

/// Weight on the leader minimizing the blend risk, clamped to `[0,1]`.
pub fn blend_weight(r1_theta: f64, r1_leader: f64, r2: f64) -> f64 {
    if r2 <= 0.0 {
        return 1.0;
    }
    (0.5 * (r1_theta - r1_leader) / r2 + 0.5).clamp(0.0, 1.0)
}

/// Picks the leader on `idx_021`, admits competitors within the slack and
/// returns the best two-point blend on `idx_022`.
pub fn hyper_sparse_aggregate(
    candidates: &[CoefEstimate],
    sm: &SmoothedDataset,
    idx_021: &[usize],
    idx_022: &[usize],
    consts: &AggregationConstants,
) -> Result<AggregationOutcome> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to aggregate"));
    }
    if idx_021.is_empty() || idx_022.is_empty() {
        return Err(Error::invalid("degenerate split: an evaluation part is empty"));
    }
    let r1a = candidates
        .iter()
        .map(|f| risk_r1(f, sm, idx_021))
        .collect::<Result<Vec<_>>>()?;
    let leader = argmin(&r1a);
    let star = &candidates[leader];
    let mut admitted = Vec::new();
    for (i, f) in candidates.iter().enumerate() {
        let r2 = dist_r2(star, f, sm, idx_021)?;
        if r1a[i] <= r1a[leader] + consts.slack(r2) {
            admitted.push(i);
        }
    }
    let r1_star = risk_r1(star, sm, idx_022)?;
    let mut best: Option<(f64, usize, f64, DVector<f64>)> = None;
    for &i in &admitted {
        let theta = &candidates[i];
        let a = blend_weight(risk_r1(theta, sm, idx_022)?, r1_star, dist_r2(star, theta, sm, idx_022)?);
        let c = &star.c * a + &theta.c * (1.0 - a);
        let blended = CoefEstimate {
            c: c.clone(),
            method: Method::Aotl,
            basis: star.basis.clone(),
        };
        let r = risk_r1(&blended, sm, idx_022)?;
        if best.as_ref().is_none_or(|b| r < b.0) {
            best = Some((r, i, a, c));
        }
    }
    let (_, partner, weight, c) = best.expect("leader is always admitted");
    Ok(AggregationOutcome {
        estimate: CoefEstimate {
            c,
            method: Method::Aotl,
            basis: star.basis.clone(),
        },
        leader,
        admitted,
        partner,
        weight,
    })
}

#[derive(Debug, Clone)]
pub struct AotlOutcome {
    pub aggregation: AggregationOutcome,
    pub plan: SplitPlan,
    pub candidate_sets: Vec<Vec<usize>>,
    /// Local first-half fit followed by one transfer fit per candidate set.
    pub candidates: Vec<CoefEstimate>,
    pub constants: AggregationConstants,
}

impl AotlOutcome {
    pub fn estimate(&self) -> &CoefEstimate {
        &self.aggregation.estimate
    }
}

/// Full procedure on a smoothed target with `sources` and their local fits.
pub fn run_aotl(
    target: &SmoothedDataset,
    sources: &[&SmoothedDataset],
    source_fits: &[CoefEstimate],
    lambdas: &LambdaConfig,
    alpha: f64,
    seed: u64,
) -> Result<AotlOutcome> {
    let k = sources.len();
    if k == 0 {
        return Err(Error::invalid("at least one source is required"));
    }
    if source_fits.len() != k {
        return Err(Error::invalid(format!(
            "{} source fits for {k} sources",
            source_fits.len()
        )));
    }
    let basis: &Arc<BasisSystem> = target.basis();
    for s in sources {
        if s.basis() != basis {
            return Err(Error::invalid("source smoothed with a different basis"));
        }
    }
    let plan = SplitPlan::new(target.n(), seed)?;
    let half = target.subset(&plan.idx_01)?;
    let beta_01 = fit_local_with(&half, lambdas.local, VarianceMode::Homoskedastic)?.estimate();
    let sets = candidate_sets(&beta_01, source_fits, target, &plan.idx_01)?;
    let transfer = sets
        .par_iter()
        .map(|set| {
            let chosen: Vec<&SmoothedDataset> = set.iter().map(|&i| sources[i]).collect();
            fit_otl(&half, &chosen, lambdas)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut candidates = Vec::with_capacity(k + 1);
    candidates.push(beta_01);
    candidates.extend(transfer);

    let mut b3 = target.y().amax();
    for f in &candidates {
        b3 = b3.max(target.inner_products(&f.c).amax());
    }
    let constants = AggregationConstants::new(b3, k, target.n(), alpha)?;
    let aggregation = hyper_sparse_aggregate(&candidates, target, &plan.idx_021, &plan.idx_022, &constants)?;
    Ok(AotlOutcome {
        aggregation,
        plan,
        candidate_sets: sets,
        candidates,
        constants,
    })
}
