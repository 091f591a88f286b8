//! Flat `key = value` configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sofr_transfer::simbench::{default_latent_grid, SimConfig};
use sofr_transfer::workflow::{WorkflowConfig, ZetaChoice};
use sofr_transfer::{LambdaChoice, LambdaConfig, Method, RhoChoice, VarianceMode};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed lines of a config file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone)]
pub struct ConfigMap {
    entries: BTreeMap<String, Entry>,
    source: String,
    base_dir: PathBuf,
}

impl ConfigMap {
    pub fn parse(text: &str, source: &str, base_dir: &Path) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(CliError::ConfigLine {
                    path: source.to_string(),
                    line,
                    msg: format!("expected key = value, got '{content}'"),
                });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(CliError::ConfigLine {
                    path: source.to_string(),
                    line,
                    msg: "empty key".into(),
                });
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line,
            };
            if let Some(prev) = entries.insert(key.clone(), entry) {
                return Err(CliError::ConfigLine {
                    path: source.to_string(),
                    line,
                    msg: format!("duplicate key '{key}' (first set on line {})", prev.line),
                });
            }
        }
        Ok(ConfigMap {
            entries,
            source: source.to_string(),
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    fn err(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        match self.entries.get(key) {
            Some(e) => CliError::ConfigLine {
                path: self.source.clone(),
                line: e.line,
                msg: format!("{key}: {msg}"),
            },
            None => CliError::Config(format!("{}: {key}: {msg}", self.source)),
        }
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> CliResult<()> {
        for (key, e) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::ConfigLine {
                    path: self.source.clone(),
                    line: e.line,
                    msg: format!("unknown key '{key}'"),
                });
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn required(&self, key: &str) -> CliResult<&str> {
        self.raw(key)
            .ok_or_else(|| CliError::Config(format!("{}: missing required key '{key}'", self.source)))
    }

    pub fn parsed<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| self.err(key, format!("cannot parse '{v}': {e}"))),
        }
    }

    fn checked<T: FromStr + Copy>(&self, key: &str, default: T, ok: impl Fn(T) -> bool, what: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.parsed(key, default)?;
        if ok(v) {
            Ok(v)
        } else {
            Err(self.err(key, format!("must be {what}")))
        }
    }

    fn positive(&self, key: &str, default: f64) -> CliResult<f64> {
        self.checked(key, default, |v: f64| v > 0.0 && v.is_finite(), "a positive number")
    }

    fn nonneg(&self, key: &str, default: f64) -> CliResult<f64> {
        self.checked(key, default, |v: f64| v >= 0.0 && v.is_finite(), "a nonnegative number")
    }

    fn count(&self, key: &str, default: usize) -> CliResult<usize> {
        self.checked(key, default, |v: usize| v > 0, "a positive integer")
    }

    pub fn path(&self, key: &str) -> CliResult<PathBuf> {
        Ok(self.resolve(self.required(key)?))
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn workflow(&self, seed: u64) -> CliResult<WorkflowConfig> {
        let rho = match self.raw("rho").unwrap_or("gcv") {
            "gcv" => RhoChoice::Gcv,
            _ => RhoChoice::Fixed(self.positive("rho", 1.0)?),
        };
        let lambda = match self.raw("lambda").unwrap_or("cv") {
            "cv" => LambdaChoice::Cv,
            _ => LambdaChoice::Fixed(self.positive("lambda", 1.0)?),
        };
        let zeta = match self.raw("zeta").unwrap_or("path") {
            "path" => ZetaChoice::Path,
            _ => ZetaChoice::Fixed(self.nonneg("zeta", 0.0)?),
        };
        let alpha = self.checked(
            "alpha",
            sofr_transfer::aotl::DEFAULT_ALPHA,
            |a: f64| a > 0.0 && a < 1.0,
            "in (0, 1)",
        )?;
        let variance_mode = match self.raw("variance_mode").unwrap_or("homoskedastic") {
            "homoskedastic" => VarianceMode::Homoskedastic,
            "hc" => VarianceMode::Hc,
            other => return Err(self.err("variance_mode", format!("expected homoskedastic or hc, got '{other}'"))),
        };
        Ok(WorkflowConfig {
            rho,
            lambdas: LambdaConfig {
                local: lambda,
                pooled: lambda,
                offset: lambda,
            },
            variance_mode,
            zeta,
            alpha,
            seed,
        })
    }
}

const WORKFLOW_KEYS: &[&str] = &["rho", "lambda", "zeta", "alpha", "variance_mode", "seed", "output"];

pub fn rho_str(c: RhoChoice) -> String {
    match c {
        RhoChoice::Gcv => "gcv".into(),
        RhoChoice::Fixed(v) => v.to_string(),
    }
}

pub fn lambda_str(c: LambdaChoice) -> String {
    match c {
        LambdaChoice::Cv => "cv".into(),
        LambdaChoice::Fixed(v) => v.to_string(),
    }
}

pub fn zeta_str(c: ZetaChoice) -> String {
    match c {
        ZetaChoice::Path => "path".into(),
        ZetaChoice::Fixed(v) => v.to_string(),
    }
}

pub fn variance_str(v: VarianceMode) -> &'static str {
    match v {
        VarianceMode::Homoskedastic => "homoskedastic",
        VarianceMode::Hc => "hc",
    }
}

fn workflow_lines(w: &WorkflowConfig) -> Vec<(String, String)> {
    vec![
        ("rho".into(), rho_str(w.rho)),
        ("lambda".into(), lambda_str(w.lambdas.local)),
        ("zeta".into(), zeta_str(w.zeta)),
        ("alpha".into(), w.alpha.to_string()),
        ("variance_mode".into(), variance_str(w.variance_mode).into()),
        ("seed".into(), w.seed.to_string()),
    ]
}

/// Configuration of `sofr-tl fit`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub target: PathBuf,
    pub sources: Vec<PathBuf>,
    pub methods: Vec<Method>,
    pub method_key: String,
    pub center: bool,
    pub workflow: WorkflowConfig,
    pub output: PathBuf,
}

pub const ALL_METHODS: [Method; 5] = [Method::Local, Method::Otl, Method::Aotl, Method::Cvs, Method::Pcvs];

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> CliResult<Self> {
        let mut allowed = vec!["target", "sources", "method", "center"];
        allowed.extend_from_slice(WORKFLOW_KEYS);
        map.check_keys(&allowed)?;
        let target = map.path("target")?;
        let sources: Vec<PathBuf> = map.list("sources").iter().map(|s| map.resolve(s)).collect();
        for p in std::iter::once(&target).chain(&sources) {
            if !p.is_dir() {
                return Err(CliError::Io(format!("dataset directory not found: {}", p.display())));
            }
        }
        let method_key = map.raw("method").unwrap_or("local").to_string();
        let methods = match method_key.as_str() {
            "all" => ALL_METHODS.to_vec(),
            "local" | "otl" | "aotl" | "cvs" | "pcvs" => vec![method_key.parse().expect("listed method")],
            other => {
                return Err(map.err("method", format!("expected local, otl, aotl, cvs, pcvs or all, got '{other}'")))
            }
        };
        let seed = map.parsed("seed", 0u64)?;
        Ok(RunConfig {
            target,
            sources,
            methods,
            method_key,
            center: map.parsed("center", true)?,
            workflow: map.workflow(seed)?,
            output: map.path("output")?,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_map(&ConfigMap::load(path)?)
    }

    /// Resolved settings as config lines; absolute paths so the block can be rerun anywhere.
    pub fn lines(&self) -> Vec<(String, String)> {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string();
        let mut out = vec![
            ("target".to_string(), abs(&self.target)),
            (
                "sources".into(),
                self.sources.iter().map(|p| abs(p)).collect::<Vec<_>>().join(", "),
            ),
            ("method".into(), self.method_key.clone()),
            ("center".into(), self.center.to_string()),
        ];
        out.extend(workflow_lines(&self.workflow));
        out.push(("output".into(), abs(&self.output)));
        out
    }
}

const SIM_KEYS: &[&str] = &[
    "n",
    "j",
    "k_sources",
    "eta",
    "target_scale",
    "kernel_rate",
    "noise_var_meas",
    "noise_var_reg",
    "replications",
    "train_frac",
    "latent_grid",
    "record_timing",
];

fn sim_config(map: &ConfigMap, eta: f64) -> CliResult<SimConfig> {
    let d = SimConfig::default();
    let j = map.count("j", d.j)?;
    if j < 2 {
        return Err(map.err("j", "must be at least 2"));
    }
    let seed = map.parsed("seed", d.seed)?;
    let cfg = SimConfig {
        n: map.count("n", d.n)?,
        j,
        k_sources: map.count("k_sources", d.k_sources)?,
        eta,
        target_scale: map.positive("target_scale", d.target_scale)?,
        kernel_rate: map.positive("kernel_rate", d.kernel_rate)?,
        noise_var_meas: map.nonneg("noise_var_meas", d.noise_var_meas)?,
        noise_var_reg: map.nonneg("noise_var_reg", d.noise_var_reg)?,
        replications: map.count("replications", d.replications)?,
        seed,
        train_frac: map.checked("train_frac", d.train_frac, |v: f64| v > 0.0 && v < 1.0, "in (0, 1)")?,
        latent_grid: map.count("latent_grid", default_latent_grid(j))?,
        record_timing: map.parsed("record_timing", false)?,
        workflow: map.workflow(seed)?,
    };
    cfg.validate().map_err(|e| CliError::Config(format!("{}: {e}", map.source)))?;
    Ok(cfg)
}

fn sim_lines(c: &SimConfig) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = [
        ("n", c.n.to_string()),
        ("j", c.j.to_string()),
        ("k_sources", c.k_sources.to_string()),
        ("target_scale", c.target_scale.to_string()),
        ("kernel_rate", c.kernel_rate.to_string()),
        ("noise_var_meas", c.noise_var_meas.to_string()),
        ("noise_var_reg", c.noise_var_reg.to_string()),
        ("replications", c.replications.to_string()),
        ("train_frac", c.train_frac.to_string()),
        ("latent_grid", c.latent_grid.to_string()),
        ("record_timing", c.record_timing.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    out.extend(workflow_lines(&c.workflow));
    out
}

fn parse_eta(map: &ConfigMap, v: &str) -> CliResult<f64> {
    match v.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        Ok(_) => Err(map.err("eta", format!("must be a positive number, got {v}"))),
        Err(e) => Err(map.err("eta", format!("cannot parse '{v}': {e}"))),
    }
}

/// Configuration of `sofr-tl bench`.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sim: SimConfig,
    pub etas: Vec<f64>,
    pub methods: Vec<Method>,
    pub output: PathBuf,
}

impl BenchConfig {
    pub fn from_map(map: &ConfigMap) -> CliResult<Self> {
        let mut allowed = vec!["methods"];
        allowed.extend_from_slice(SIM_KEYS);
        allowed.extend_from_slice(WORKFLOW_KEYS);
        map.check_keys(&allowed)?;
        let etas = match map.raw("eta") {
            None => vec![SimConfig::default().eta],
            Some(_) => map.list("eta").iter().map(|v| parse_eta(map, v)).collect::<CliResult<Vec<_>>>()?,
        };
        if etas.is_empty() {
            return Err(map.err("eta", "no values given"));
        }
        let names = if map.raw("methods").is_some() {
            map.list("methods")
        } else {
            vec!["otl".into(), "aotl".into(), "cvs".into(), "pcvs".into()]
        };
        let mut methods = Vec::new();
        for name in &names {
            let m = match name.as_str() {
                "otl" | "aotl" | "cvs" | "pcvs" => name.parse::<Method>().expect("listed method"),
                other => return Err(map.err("methods", format!("expected otl, aotl, cvs or pcvs, got '{other}'"))),
            };
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
        let sim = sim_config(map, etas[0])?;
        Ok(BenchConfig {
            sim,
            etas,
            methods,
            output: map.path("output")?,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_map(&ConfigMap::load(path)?)
    }

    pub fn lines(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("eta".to_string(), self.etas.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ")),
            (
                "methods".into(),
                self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", "),
            ),
        ];
        out.extend(sim_lines(&self.sim));
        out.push(("output".into(), self.output.display().to_string()));
        out
    }
}

/// Configuration of `sofr-tl simulate`: one replicate written as datasets.
#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub sim: SimConfig,
    pub replicate: usize,
    pub output: PathBuf,
}

impl SimulateConfig {
    pub fn from_map(map: &ConfigMap) -> CliResult<Self> {
        let mut allowed = vec!["replicate"];
        allowed.extend_from_slice(SIM_KEYS);
        allowed.extend_from_slice(WORKFLOW_KEYS);
        map.check_keys(&allowed)?;
        let eta = match map.raw("eta") {
            None => SimConfig::default().eta,
            Some(v) => parse_eta(map, v)?,
        };
        Ok(SimulateConfig {
            sim: sim_config(map, eta)?,
            replicate: map.parsed("replicate", 0usize)?,
            output: map.path("output")?,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_map(&ConfigMap::load(path)?)
    }
}

/// Renders `key = value` lines.
pub fn render(lines: &[(String, String)]) -> String {
    lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(text: &str) -> CliResult<ConfigMap> {
        ConfigMap::parse(text, "test.cfg", Path::new("/base"))
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let m = map("# header\n  a = 1 # trailing\n\nb=two words\n").unwrap();
        assert_eq!(m.raw("a"), Some("1"));
        assert_eq!(m.raw("b"), Some("two words"));
        assert_eq!(m.raw("c"), None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = map("a = 1\nnot a pair\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = map("a = 1\n\na = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 3") && e.to_string().contains("duplicate"), "{e}");
        let m = map("x = 1\nalpha = 2\n").unwrap();
        let e = m.checked("alpha", 0.5, |a: f64| a < 1.0, "in (0, 1)").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("alpha"), "{e}");
        let e = m.check_keys(&["alpha"]).unwrap_err();
        assert!(e.to_string().contains("unknown key 'x'"), "{e}");
    }

    #[test]
    fn bench_config_reads_lists_and_rejects_bad_eta() {
        let m = map("eta = 100, 1\nmethods = cvs\nreplications = 2\nn = 40\nj = 11\noutput = out.csv\n").unwrap();
        let b = BenchConfig::from_map(&m).unwrap();
        assert_eq!(b.etas, vec![100.0, 1.0]);
        assert_eq!(b.methods, vec![Method::Cvs]);
        assert_eq!(b.sim.latent_grid, 1001);
        assert_eq!(b.output, Path::new("/base/out.csv"));
        let e = BenchConfig::from_map(&map("eta = 0\noutput = o.csv\n").unwrap()).unwrap_err();
        assert!(e.to_string().contains("eta"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let e = BenchConfig::from_map(&map("methods = local\noutput = o.csv\n").unwrap()).unwrap_err();
        assert!(e.to_string().contains("methods"), "{e}");
    }

    #[test]
    fn workflow_values() {
        let m = map("rho = 0.001\nlambda = cv\nzeta = 0\nvariance_mode = hc\n").unwrap();
        let w = m.workflow(3).unwrap();
        assert_eq!(w.rho, RhoChoice::Fixed(0.001));
        assert_eq!(w.lambdas.pooled, LambdaChoice::Cv);
        assert_eq!(w.zeta, ZetaChoice::Fixed(0.0));
        assert_eq!(w.variance_mode, VarianceMode::Hc);
        assert_eq!(w.seed, 3);
        assert!(map("rho = -1\n").unwrap().workflow(0).is_err());
        assert!(map("variance_mode = robust\n").unwrap().workflow(0).is_err());
        assert!(map("alpha = 1\n").unwrap().workflow(0).is_err());
    }
}
