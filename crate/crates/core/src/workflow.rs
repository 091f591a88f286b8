//! End-to-end estimation on one target and its sources.
//!
//! [`prepare`] smooths every dataset and computes the local fits once;
//! [`fit_method`] then produces any estimator from the prepared state together
//! with the tuning values it resolved.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::aotl::{run_aotl, DEFAULT_ALPHA};
use crate::basis::BasisSystem;
use crate::cvs::{assemble_cvs, cvs_estimate};
use crate::error::{Error, Result};
use crate::estimators::{
    fit_local, fit_local_with, fit_otl, LambdaChoice, LambdaConfig, LocalFit, VarianceMode,
};
use crate::pcvs::{default_zeta_ratios, pcvs_estimate, system_zeta_max, zeta_path};
use crate::rng::stream_rng;
use crate::smoothing::{smooth_with, CoefEstimate, Method, RawDataset, RhoChoice, SmoothedDataset};

/// Fraction of the target training set used to fit along the `zeta` path;
/// the rest scores it.
pub const ZETA_FIT_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZetaChoice {
    Fixed(f64),
    /// Ratio to `zeta_max` picked on a validation split of the target.
    Path,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkflowConfig {
    pub rho: RhoChoice,
    pub lambdas: LambdaConfig,
    pub variance_mode: VarianceMode,
    pub zeta: ZetaChoice,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        WorkflowConfig {
            rho: RhoChoice::Gcv,
            lambdas: LambdaConfig::default(),
            variance_mode: VarianceMode::Homoskedastic,
            zeta: ZetaChoice::Path,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub basis: Arc<BasisSystem>,
    pub target: SmoothedDataset,
    pub sources: Vec<SmoothedDataset>,
    pub target_fit: LocalFit,
    pub source_fits: Vec<LocalFit>,
}

impl Prepared {
    pub fn source_refs(&self) -> Vec<&SmoothedDataset> {
        self.sources.iter().collect()
    }

    /// Local fits with the target first.
    pub fn all_fits(&self) -> Vec<LocalFit> {
        std::iter::once(&self.target_fit)
            .chain(&self.source_fits)
            .cloned()
            .collect()
    }
}

/// Smooths and locally fits the target and every source, in parallel.
pub fn prepare(
    target: &RawDataset,
    sources: &[RawDataset],
    basis: &Arc<BasisSystem>,
    cfg: &WorkflowConfig,
) -> Result<Prepared> {
    let all: Vec<&RawDataset> = std::iter::once(target).chain(sources).collect();
    let fitted = all
        .par_iter()
        .map(|raw| {
            let sm = smooth_with(raw, basis, cfg.rho)?;
            let fit = fit_local_with(&sm, cfg.lambdas.local, cfg.variance_mode)?;
            Ok((sm, fit))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = fitted.into_iter();
    let (target, target_fit) = it.next().expect("target is always present");
    let (sources, source_fits) = it.unzip();
    Ok(Prepared {
        basis: basis.clone(),
        target,
        sources,
        target_fit,
        source_fits,
    })
}

/// An estimate with the tuning values that produced it, as `(key, value)` pairs.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub estimate: CoefEstimate,
    pub notes: Vec<(String, String)>,
}

fn note(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn require_sources(prep: &Prepared, method: Method) -> Result<()> {
    if prep.sources.is_empty() {
        Err(Error::invalid(format!("method {method} needs at least one source")))
    } else {
        Ok(())
    }
}

/// Runs `method` on prepared data. Offset transfer uses every source.
pub fn fit_method(prep: &Prepared, method: Method, cfg: &WorkflowConfig) -> Result<MethodFit> {
    match method {
        Method::Local => Ok(MethodFit {
            estimate: prep.target_fit.estimate(),
            notes: vec![note("lambda", prep.target_fit.lambda)],
        }),
        Method::Pooled => {
            require_sources(prep, method)?;
            let refs = prep.source_refs();
            let lambda = match cfg.lambdas.pooled {
                LambdaChoice::Fixed(l) => l,
                LambdaChoice::Cv => crate::estimators::pooled_cv_lambda(&refs)?,
            };
            Ok(MethodFit {
                estimate: crate::estimators::fit_pooled(&refs, lambda)?,
                notes: vec![note("lambda_pooled", lambda)],
            })
        }
        Method::Otl => {
            require_sources(prep, method)?;
            Ok(MethodFit {
                estimate: fit_otl(&prep.target, &prep.source_refs(), &cfg.lambdas)?,
                notes: Vec::new(),
            })
        }
        Method::Aotl => {
            require_sources(prep, method)?;
            let fits: Vec<CoefEstimate> = prep.source_fits.iter().map(|f| f.estimate()).collect();
            let out = run_aotl(&prep.target, &prep.source_refs(), &fits, &cfg.lambdas, cfg.alpha, cfg.seed)?;
            let agg = &out.aggregation;
            Ok(MethodFit {
                notes: vec![
                    note("alpha", cfg.alpha),
                    note("b1", out.constants.b1),
                    note("b2", out.constants.b2),
                    note("b3", out.constants.b3),
                    note("leader", agg.leader),
                    note("partner", agg.partner),
                    note("weight", agg.weight),
                ],
                estimate: out.aggregation.estimate,
            })
        }
        Method::Cvs => {
            require_sources(prep, method)?;
            let sys = assemble_cvs(&prep.all_fits())?;
            Ok(MethodFit {
                estimate: cvs_estimate(&sys, &prep.target_fit)?,
                notes: Vec::new(),
            })
        }
        Method::Pcvs => {
            require_sources(prep, method)?;
            let sys = assemble_cvs(&prep.all_fits())?;
            let q = sys.delta_precision();
            let zmax = system_zeta_max(&sys, &q)?;
            let (zeta, mut notes) = match cfg.zeta {
                ZetaChoice::Fixed(z) => (z, Vec::new()),
                ZetaChoice::Path => {
                    let ratio = select_zeta_ratio(prep, cfg)?;
                    (ratio * zmax, vec![note("zeta_ratio", ratio)])
                }
            };
            let fit = pcvs_estimate(&sys, &q, &prep.target_fit, zeta)?;
            notes.push(note("zeta", zeta));
            notes.push(note("zeta_max", zmax));
            notes.push(note(
                "active_groups",
                fit.solution
                    .active_groups
                    .iter()
                    .map(|g| (g + 1).to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            ));
            notes.push(note("solver_iterations", fit.solution.iterations));
            Ok(MethodFit {
                estimate: fit.estimate,
                notes,
            })
        }
    }
}

/// Picks `zeta / zeta_max` from [`default_zeta_ratios`] by refitting the
/// target on a random part of its training set and scoring the path on the
/// rest. Ties go to the larger ratio.
pub fn select_zeta_ratio(prep: &Prepared, cfg: &WorkflowConfig) -> Result<f64> {
    let n = prep.target.n();
    let n_fit = ((n as f64) * ZETA_FIT_FRACTION).round() as usize;
    if n_fit < 2 || n_fit >= n {
        return Err(Error::invalid(format!("target too small ({n}) for a zeta validation split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(cfg.seed, "zeta-split"));
    let (fit_idx, val_idx) = idx.split_at(n_fit);
    let sub = prep.target.subset(fit_idx)?;
    let sub_fit = fit_local(&sub, prep.target_fit.lambda, cfg.variance_mode)?;
    let mut fits = vec![sub_fit];
    fits.extend(prep.source_fits.iter().cloned());
    let sys = assemble_cvs(&fits)?;
    let q = sys.delta_precision();
    let zmax = system_zeta_max(&sys, &q)?;
    if zmax == 0.0 {
        return Ok(1.0);
    }
    let ratios = default_zeta_ratios();
    let grid: Vec<f64> = ratios.iter().map(|r| r * zmax).collect();
    let path = zeta_path(&sys, &q, &fits[0], &grid)?;
    let val = prep.target.subset(val_idx)?;
    let y = val.y();
    let mut best = (f64::INFINITY, 1.0);
    // path[0] sits at zeta_max, i.e. ratio 1
    for (point, ratio) in path.iter().zip(std::iter::once(1.0).chain(ratios)) {
        let err: f64 = (y - val.inner_products(&point.estimate.c)).norm_squared();
        if err < best.0 {
            best = (err, ratio);
        }
    }
    Ok(best.1)
}

/// Every estimator that applies to `prep`, local first; errors are kept per method.
pub fn fit_methods(
    prep: &Prepared,
    methods: &[Method],
    cfg: &WorkflowConfig,
) -> Vec<(Method, Result<MethodFit>)> {
    methods
        .par_iter()
        .map(|&m| (m, fit_method(prep, m, cfg)))
        .collect()
}

/// Squared prediction errors `sum_i (y_i - <x_i, c>)^2` on `sm`.
pub fn sum_sq_prediction_error(c: &DVector<f64>, sm: &SmoothedDataset) -> f64 {
    (sm.y() - sm.inner_products(c)).norm_squared()
}
