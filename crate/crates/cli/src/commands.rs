use std::path::{Path, PathBuf};

use sofr_transfer::simbench::{
    run_sweep, simulate_dataset, summarize, truth_c, LatentSampler, ResultRow, Which,
};
use sofr_transfer::workflow::{fit_method, prepare, Prepared};
use sofr_transfer::{default_m, fourier_basis, stream_rng, Method, RawDataset};
use std::sync::Arc;

use crate::config::{render, BenchConfig, RunConfig, SimulateConfig};
use crate::error::{CliError, CliResult};
use crate::io::{load_dataset, save_dataset, write_csv};

pub const COEF_HEADER: [&str; 3] = ["method", "basis_index", "coefficient"];
pub const RESULT_HEADER: [&str; 6] = ["replicate", "method", "eta", "ree", "rpe", "wall_ms"];
pub const SUMMARY_HEADER: [&str; 6] = ["eta", "method", "median_ree", "median_rpe", "succeeded", "failed"];

/// `<output>.<suffix>` next to the output file.
pub fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let mut s = output.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn module_of(m: Method) -> &'static str {
    match m {
        Method::Local | Method::Pooled | Method::Otl => "estimators",
        Method::Aotl => "aotl",
        Method::Cvs => "cvs",
        Method::Pcvs => "pcvs",
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn dataset_notes(name: &str, prep_sm: &sofr_transfer::SmoothedDataset, fit: &sofr_transfer::LocalFit) -> String {
    format!(
        "# {name}: n={} j={} rho={} lambda={} variance_jitter={}\n",
        prep_sm.n(),
        prep_sm.raw().j(),
        prep_sm.rho(),
        fit.lambda,
        fit.jitter
    )
}

/// Coefficients of every requested method, in request order.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub prepared: Prepared,
    pub coefficients: Vec<(Method, Vec<f64>)>,
}

pub fn load_inputs(cfg: &RunConfig) -> CliResult<(RawDataset, Vec<RawDataset>)> {
    let prep = |raw: RawDataset| if cfg.center { raw.centered() } else { raw };
    let target = prep(load_dataset(&cfg.target, 0)?);
    let sources = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(k, p)| load_dataset(p, k + 1).map(prep))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((target, sources))
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<FitReport> {
    let (target, sources) = load_inputs(cfg)?;
    let basis = Arc::new(
        default_m(target.j())
            .and_then(fourier_basis)
            .map_err(CliError::model("basis"))?,
    );
    let prepared = prepare(&target, &sources, &basis, &cfg.workflow).map_err(CliError::model("smoothing"))?;

    let mut manifest = String::from("# sofr-tl fit manifest; the settings below rerun this fit as a config file\n");
    manifest.push_str(&render(&cfg.lines()));
    manifest.push_str("# resolved tuning\n");
    manifest.push_str(&dataset_notes("target", &prepared.target, &prepared.target_fit));
    for (k, (sm, fit)) in prepared.sources.iter().zip(&prepared.source_fits).enumerate() {
        manifest.push_str(&dataset_notes(&format!("source{}", k + 1), sm, fit));
    }
    let mut coefficients = Vec::new();
    for &m in &cfg.methods {
        let fit = fit_method(&prepared, m, &cfg.workflow).map_err(CliError::model(module_of(m)))?;
        for (k, v) in &fit.notes {
            manifest.push_str(&format!("# {m}: {k}={v}\n"));
        }
        coefficients.push((m, fit.estimate.c.iter().copied().collect::<Vec<_>>()));
    }
    let rows = coefficients.iter().flat_map(|(m, c)| {
        c.iter()
            .enumerate()
            .map(move |(i, v)| vec![m.to_string(), i.to_string(), v.to_string()])
    });
    write_csv(&cfg.output, &COEF_HEADER, rows)?;
    write_text(&sidecar(&cfg.output, "manifest.txt"), &manifest)?;
    Ok(FitReport {
        prepared,
        coefficients,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn result_record(r: &ResultRow) -> Vec<String> {
    vec![
        r.replicate.to_string(),
        r.method.to_string(),
        r.eta.to_string(),
        opt(r.ree),
        opt(r.rpe),
        opt(r.wall_ms),
    ]
}

pub fn cmd_bench(cfg: &BenchConfig) -> CliResult<Vec<ResultRow>> {
    let rows = run_sweep(&cfg.sim, &cfg.etas, &cfg.methods).map_err(CliError::model("simbench"))?;
    write_csv(&cfg.output, &RESULT_HEADER, rows.iter().map(result_record))?;
    let summary = summarize(&rows).into_iter().map(|s| {
        vec![
            s.eta.to_string(),
            s.method.to_string(),
            opt(s.median_ree),
            opt(s.median_rpe),
            s.succeeded.to_string(),
            s.failed.to_string(),
        ]
    });
    write_csv(&sidecar(&cfg.output, "summary.csv"), &SUMMARY_HEADER, summary)?;
    let mut manifest = String::from("# sofr-tl bench manifest; the settings below rerun this benchmark as a config file\n");
    manifest.push_str(&render(&cfg.lines()));
    for r in rows.iter().filter(|r| r.error.is_some()) {
        manifest.push_str(&format!(
            "# failed: eta={} replicate={} method={}: {}\n",
            r.eta,
            r.replicate,
            r.method,
            r.error.as_deref().unwrap_or("")
        ));
    }
    write_text(&sidecar(&cfg.output, "manifest.txt"), &manifest)?;
    Ok(rows)
}

/// Writes one simulated replicate: `target/`, `source1/` ... and `truth.csv`
/// with the basis coefficients of the true coefficient function.
pub fn cmd_simulate(cfg: &SimulateConfig) -> CliResult<()> {
    let sim = &cfg.sim;
    let sampler = LatentSampler::for_config(sim).map_err(CliError::model("simbench"))?;
    let mut rng = stream_rng(sim.seed, &format!("sim:{}", cfg.replicate));
    let target = simulate_dataset(sim, &sampler, Which::Target, &mut rng).map_err(CliError::model("simbench"))?;
    save_dataset(&target.raw, &cfg.output.join("target"))?;
    for k in 1..=sim.k_sources {
        let d = simulate_dataset(sim, &sampler, Which::Source(k), &mut rng).map_err(CliError::model("simbench"))?;
        save_dataset(&d.raw, &cfg.output.join(format!("source{k}")))?;
    }
    let basis = default_m(sim.j).and_then(fourier_basis).map_err(CliError::model("basis"))?;
    let truth = truth_c(&basis);
    write_csv(
        &cfg.output.join("truth.csv"),
        &["basis_index", "coefficient"],
        truth.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]),
    )
}
