//! Flat, sectioned `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! [experiment]
//! algorithm = upcycled
//! rounds = 40
//! seeds = 1, 2, 3
//!
//! [privacy]
//! eps_target = 1.0
//! ```
//!
//! Every key is addressed as `section.key`, which is also the syntax of
//! command-line overrides. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::channel::power_cap_for_snr;
use crate::data::Partition;
use crate::error::{Error, Result};
use crate::fl_protocol::{
    AlphaUMode, GlobalSchedule, JammerPolicy, LambdaSchedule, ProtocolConfig, ServerRescale,
};
use crate::model::{Algorithm, LocalHyper};

/// Environment variable that overrides `experiment.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "OTAFL_OUTPUT_DIR";

/// Ordered `section.key → value` map.
pub type RawConfig = BTreeMap<String, String>;

/// Parse the text form. Keys outside any section are an error.
pub fn parse_config(text: &str) -> Result<RawConfig> {
    let mut out = RawConfig::new();
    let mut section: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: bad section header", n + 1)))?;
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
        let sec = section
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: key outside a section", n + 1)))?;
        let full = format!("{sec}.{}", key.trim());
        if out.insert(full.clone(), value.trim().to_string()).is_some() {
            return Err(Error::InvalidConfig(format!("line {}: duplicate key {full}", n + 1)));
        }
    }
    Ok(out)
}

/// Apply `section.key=value` overrides on top of a parsed config.
pub fn apply_overrides<S: AsRef<str>>(raw: &mut RawConfig, overrides: &[S]) -> Result<()> {
    for o in overrides {
        let o = o.as_ref();
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not key=value")))?;
        let k = k.trim();
        if !k.contains('.') {
            return Err(Error::InvalidConfig(format!("override key `{k}` needs a section prefix")));
        }
        raw.insert(k.to_string(), v.trim().to_string());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JammerMode {
    Auto,
    Off,
    Forced,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { n_min: usize, n_max: usize },
    Table(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: Partition,
    pub classes: usize,
    pub shards_per_client: usize,
    pub test_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub hidden: usize,
    pub bias: bool,
}

impl ModelConfig {
    pub fn shapes(&self, classes: usize) -> Vec<(usize, usize)> {
        vec![(self.feat_dim, self.hidden), (self.hidden, classes)]
    }

    /// Parameter count `d`.
    pub fn dim(&self, classes: usize) -> usize {
        let w = self.feat_dim * self.hidden + self.hidden * classes;
        if self.bias {
            w + self.hidden + classes
        } else {
            w
        }
    }
}

/// Bound constant: fixed by the user or estimated along the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundValue {
    Estimate,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    pub enabled: bool,
    pub l: BoundValue,
    pub b: BoundValue,
    pub q: BoundValue,
    pub g: BoundValue,
    pub kappa: BoundValue,
    /// `None` means "use μ".
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub wall_clock: bool,
    pub label: String,

    pub snr_db: f64,
    pub sigma_c: f64,
    /// Channel AWGN switched off (power caps still use `sigma_c`).
    pub noiseless: bool,
    pub alpha_u_mode: AlphaUMode,
    pub server_rescale: ServerRescale,

    pub eps_target: Option<f64>,
    pub delta: f64,
    pub jammer_mode: JammerMode,
    pub jammer_margin: f64,
    pub jammer_alpha: f64,

    pub model: ModelConfig,
    pub data: DataConfig,
    pub hyper: LocalHyper,
    pub lambda: LambdaSchedule,
    pub bound: BoundConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Upcycled,
            clients: 10,
            rounds: 40,
            seeds: vec![1],
            threads: 0,
            output_dir: PathBuf::from("out"),
            wall_clock: false,
            label: String::new(),
            snr_db: 1.0,
            sigma_c: 1.0,
            noiseless: false,
            alpha_u_mode: AlphaUMode::Dynamic,
            server_rescale: ServerRescale::TauOnly,
            eps_target: None,
            delta: 1e-5,
            jammer_mode: JammerMode::Off,
            jammer_margin: 1.0,
            jammer_alpha: 0.0,
            model: ModelConfig {
                feat_dim: 64,
                hidden: 32,
                bias: false,
            },
            data: DataConfig {
                source: DataSource::Synthetic {
                    n_min: 150,
                    n_max: 250,
                },
                partition: Partition::LabelShard,
                classes: 10,
                shards_per_client: 5,
                test_frac: 0.2,
            },
            hyper: LocalHyper {
                local_epochs: 5,
                ..LocalHyper::default()
            },
            lambda: LambdaSchedule::default(),
            bound: BoundConfig {
                enabled: true,
                l: BoundValue::Estimate,
                b: BoundValue::Estimate,
                q: BoundValue::Estimate,
                g: BoundValue::Estimate,
                kappa: BoundValue::Estimate,
                rho: None,
            },
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::InvalidConfig(format!("{key} = `{value}`: {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "not a number"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn bound_value(key: &str, v: &str) -> Result<BoundValue> {
    if v == "estimate" {
        Ok(BoundValue::Estimate)
    } else {
        Ok(BoundValue::Fixed(num(key, v)?))
    }
}

fn lambda_breakpoints(key: &str, v: &str) -> Result<LambdaSchedule> {
    let mut bps = Vec::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (m, l) = part
            .split_once(':')
            .ok_or_else(|| bad(key, v, "expected m:lambda pairs"))?;
        bps.push((num(key, m.trim())?, num(key, l.trim())?));
    }
    LambdaSchedule::new(bps)
}

impl ExperimentConfig {
    /// Model-size presets: `desk` (64→32→10) and `wide` (784→196→10).
    fn apply_preset(&mut self, preset: &str) -> Result<()> {
        let (feat, hidden) = match preset {
            "desk" => (64, 32),
            "wide" => (784, 196),
            other => return Err(bad("model.preset", other, "unknown preset")),
        };
        self.model.feat_dim = feat;
        self.model.hidden = hidden;
        self.data.classes = 10;
        Ok(())
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = raw.get("model.preset") {
            cfg.apply_preset(p)?;
        }
        let mut mu = None;
        let (mut n_min, mut n_max) = (150, 250);
        let mut table = None;
        for (key, v) in raw {
            let v = v.as_str();
            let k = key.as_str();
            match k {
                "model.preset" => {}
                "experiment.algorithm" => cfg.algorithm = v.parse()?,
                "experiment.clients" => cfg.clients = num(k, v)?,
                "experiment.rounds" => cfg.rounds = num(k, v)?,
                "experiment.seeds" => {
                    cfg.seeds = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| num(k, s))
                        .collect::<Result<_>>()?
                }
                "experiment.threads" => cfg.threads = num(k, v)?,
                "experiment.output_dir" => cfg.output_dir = PathBuf::from(v),
                "experiment.wall_clock" => cfg.wall_clock = boolean(k, v)?,
                "experiment.label" => cfg.label = v.to_string(),

                "channel.snr_db" => cfg.snr_db = num(k, v)?,
                "channel.sigma_c" => cfg.sigma_c = num(k, v)?,
                "channel.noiseless" => cfg.noiseless = boolean(k, v)?,
                "channel.alpha_u" => {
                    cfg.alpha_u_mode = match v {
                        "dynamic" => AlphaUMode::Dynamic,
                        _ => AlphaUMode::Fixed(num(k, v)?),
                    }
                }
                "channel.server_rescale" => {
                    cfg.server_rescale = match v {
                        "tau_only" => ServerRescale::TauOnly,
                        "none" => ServerRescale::None,
                        _ => return Err(bad(k, v, "expected tau_only or none")),
                    }
                }

                "privacy.eps_target" => {
                    cfg.eps_target = match v {
                        "none" | "inf" => None,
                        _ => Some(num(k, v)?),
                    }
                }
                "privacy.delta" => cfg.delta = num(k, v)?,
                "privacy.jammer_mode" => {
                    cfg.jammer_mode = match v {
                        "auto" => JammerMode::Auto,
                        "off" => JammerMode::Off,
                        "forced" => JammerMode::Forced,
                        _ => return Err(bad(k, v, "expected auto, off or forced")),
                    }
                }
                "privacy.jammer_margin" => cfg.jammer_margin = num(k, v)?,
                "privacy.jammer_alpha" => cfg.jammer_alpha = num(k, v)?,

                "model.feat_dim" => cfg.model.feat_dim = num(k, v)?,
                "model.hidden" => cfg.model.hidden = num(k, v)?,
                "model.bias" => cfg.model.bias = boolean(k, v)?,

                "data.partition" => cfg.data.partition = v.parse()?,
                "data.classes" => cfg.data.classes = num(k, v)?,
                "data.shards_per_client" => cfg.data.shards_per_client = num(k, v)?,
                "data.test_frac" => cfg.data.test_frac = num(k, v)?,
                "data.n_min" => n_min = num(k, v)?,
                "data.n_max" => n_max = num(k, v)?,
                "data.table" => table = Some(PathBuf::from(v)),

                "local.lr" => cfg.hyper.lr = num(k, v)?,
                "local.momentum" => cfg.hyper.momentum = num(k, v)?,
                "local.epochs" => cfg.hyper.local_epochs = num(k, v)?,
                "local.batch_size" => cfg.hyper.batch_size = num(k, v)?,
                "local.mu" => mu = Some(num(k, v)?),
                "local.tau" => cfg.hyper.tau = num(k, v)?,

                "schedule.lambda" => cfg.lambda = lambda_breakpoints(k, v)?,

                "bound.enabled" => cfg.bound.enabled = boolean(k, v)?,
                "bound.l" => cfg.bound.l = bound_value(k, v)?,
                "bound.b" => cfg.bound.b = bound_value(k, v)?,
                "bound.q" => cfg.bound.q = bound_value(k, v)?,
                "bound.g" => cfg.bound.g = bound_value(k, v)?,
                "bound.kappa" => cfg.bound.kappa = bound_value(k, v)?,
                "bound.rho" => cfg.bound.rho = Some(num(k, v)?),

                _ => return Err(Error::InvalidConfig(format!("unknown key `{k}`"))),
            }
        }
        cfg.hyper.mu = match (mu, cfg.algorithm) {
            (Some(m), _) => m,
            (None, Algorithm::FedAvg) => 0.0,
            (None, _) => LocalHyper::default().mu,
        };
        cfg.data.source = match table {
            Some(p) => DataSource::Table(p),
            None => DataSource::Synthetic { n_min, n_max },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut raw = parse_config(&text)?;
        apply_overrides(&mut raw, overrides)?;
        Self::from_raw(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.clients == 0 || self.rounds == 0 {
            return fail("clients and rounds must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("no seeds given".into());
        }
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return fail(format!("channel.sigma_c = {} must be positive", self.sigma_c));
        }
        if !self.snr_db.is_finite() {
            return fail("channel.snr_db must be finite".into());
        }
        if self.model.feat_dim == 0 || self.model.hidden == 0 {
            return fail("model dimensions must be positive".into());
        }
        if let Some(e) = self.eps_target {
            if !(e > 0.0 && e.is_finite()) {
                return fail(format!("privacy.eps_target = {e} must be positive"));
            }
        }
        if self.jammer_mode == JammerMode::Auto && self.eps_target.is_none() {
            return fail("jammer_mode = auto needs privacy.eps_target".into());
        }
        let silent_jammer = match self.jammer_mode {
            JammerMode::Off => true,
            JammerMode::Forced => self.jammer_alpha == 0.0,
            JammerMode::Auto => false,
        };
        if self.eps_target.is_some() && self.noiseless && silent_jammer {
            return fail("eps_target set but the effective noise is zero".into());
        }
        if let DataSource::Synthetic { n_min, n_max } = self.data.source {
            if n_min == 0 || n_min > n_max {
                return fail(format!("bad sample range {n_min}..={n_max}"));
            }
        }
        if !(self.data.test_frac > 0.0 && self.data.test_frac < 1.0) {
            return fail(format!("data.test_frac = {} not in (0, 1)", self.data.test_frac));
        }
        self.protocol(0).validate()
    }

    /// `d`.
    pub fn model_dim(&self) -> usize {
        self.model.dim(self.data.classes)
    }

    /// `P_i = 10^(snr_db/10) · d · σ_c²`, the same for every client.
    pub fn power_cap(&self) -> f64 {
        power_cap_for_snr(self.snr_db, self.model_dim(), self.sigma_c)
    }

    /// Channel AWGN standard deviation actually applied.
    pub fn channel_sigma(&self) -> f64 {
        if self.noiseless {
            0.0
        } else {
            self.sigma_c
        }
    }

    pub fn protocol(&self, seed: u64) -> ProtocolConfig {
        let jammer = match self.jammer_mode {
            JammerMode::Off => JammerPolicy::Off,
            JammerMode::Forced => JammerPolicy::Forced {
                alpha_cj: self.jammer_alpha,
            },
            JammerMode::Auto => JammerPolicy::Auto {
                eps_target: self.eps_target.unwrap_or(f64::NAN),
                margin: self.jammer_margin,
            },
        };
        ProtocolConfig {
            schedule: GlobalSchedule {
                algorithm: self.algorithm,
                rounds: self.rounds,
                lambda: self.lambda.clone(),
            },
            hyper: self.hyper.clone(),
            sigma_c: self.channel_sigma(),
            alpha_u_mode: self.alpha_u_mode,
            server_rescale: self.server_rescale,
            jammer,
            delta: self.delta,
            seed,
        }
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => self.output_dir.clone(),
        }
    }
}
