use std::sync::Arc;

use sofr_transfer::simbench::{run_experiment, simulate_dataset, LatentSampler, SimConfig, Which};
use sofr_transfer::workflow::{fit_method, fit_methods, prepare, WorkflowConfig, ZetaChoice};
use sofr_transfer::{default_m, fourier_basis, stream_rng, Method};

fn small() -> SimConfig {
    SimConfig {
        n: 80,
        j: 11,
        k_sources: 3,
        latent_grid: 101,
        replications: 3,
        seed: 9,
        ..SimConfig::default()
    }
}

fn prepared(cfg: &SimConfig, wf: &WorkflowConfig) -> sofr_transfer::workflow::Prepared {
    let sampler = LatentSampler::for_config(cfg).unwrap();
    let mut rng = stream_rng(cfg.seed, "pipeline");
    let target = simulate_dataset(cfg, &sampler, Which::Target, &mut rng).unwrap().raw;
    let sources: Vec<_> = (1..=cfg.k_sources)
        .map(|k| simulate_dataset(cfg, &sampler, Which::Source(k), &mut rng).unwrap().raw)
        .collect();
    let basis = Arc::new(default_m(cfg.j).and_then(fourier_basis).unwrap());
    prepare(&target, &sources, &basis, wf).unwrap()
}

#[test]
fn every_method_fits_simulated_data() {
    let wf = WorkflowConfig::default();
    let prep = prepared(&small(), &wf);
    let all = [Method::Local, Method::Pooled, Method::Otl, Method::Aotl, Method::Cvs, Method::Pcvs];
    for (m, fit) in fit_methods(&prep, &all, &wf) {
        let fit = fit.unwrap_or_else(|e| panic!("{m}: {e}"));
        assert_eq!(fit.estimate.c.len(), prep.basis.m());
        assert!(fit.estimate.c.iter().all(|v| v.is_finite()), "{m}");
    }
}

#[test]
fn unpenalized_pcvs_is_the_local_fit() {
    let wf = WorkflowConfig {
        zeta: ZetaChoice::Fixed(0.0),
        ..WorkflowConfig::default()
    };
    let prep = prepared(&small(), &wf);
    let local = fit_method(&prep, Method::Local, &wf).unwrap().estimate.c;
    let pcvs = fit_method(&prep, Method::Pcvs, &wf).unwrap().estimate.c;
    assert!((local - pcvs).amax() <= 1e-10);
}

#[test]
fn experiments_repeat_exactly() {
    let cfg = small();
    let methods = [Method::Otl, Method::Cvs];
    let a = run_experiment(&cfg, &methods).unwrap();
    let b = run_experiment(&cfg, &methods).unwrap();
    assert_eq!(a.len(), cfg.replications * 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.replicate, x.method), (y.replicate, y.method));
        assert_eq!(x.ree.map(f64::to_bits), y.ree.map(f64::to_bits));
        assert_eq!(x.rpe.map(f64::to_bits), y.rpe.map(f64::to_bits));
    }
    for r in a.iter().filter(|r| r.method == Method::Local) {
        assert_eq!((r.ree, r.rpe), (Some(1.0), Some(1.0)));
    }
}
