//! Experiment orchestration: data and model setup per seed, the training
//! loop, invariant checks, and the on-disk artifacts
//! (`metrics_<seed>.csv`, `ledger_<seed>.csv`, `summary.json`,
//! `curves.svg`).

pub mod config;
pub mod output;

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::bound::{eval_bound, BoundConstants, BoundReport, EmpiricalConstants, RoundTerms};
use crate::data::{gen_synthetic, load_table, partition_dataset, train_test_split, ClientRecord, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fl_protocol::{JammerPolicy, Trainer};
use crate::model::{accuracy, forward_loss, ModelParams};
use crate::privacy::{EffectiveNoise, PrivacyLedger};

pub use config::{
    apply_overrides, parse_config, BoundValue, DataSource, ExperimentConfig, JammerMode,
    RawConfig, OUTPUT_DIR_ENV,
};
pub use output::{
    emit_csv, emit_svg, ledger_csv, metrics_csv, parse_ledger_csv, parse_metrics_csv, render_svg,
    LedgerRow, LedgerTrace, RoundMetrics, Series, METRICS_HEADER,
};

/// Tolerance on the ε target when the jammer is designed automatically.
const EPS_TARGET_SLACK: f64 = 1e-6;

/// Training clients (with power caps set) and the global test set.
pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<ClientRecord>, Dataset)> {
    let records = match &cfg.data.source {
        DataSource::Synthetic { n_min, n_max } => gen_synthetic(
            &SyntheticSpec {
                clients: cfg.clients,
                n_range: (*n_min, *n_max),
                feat_dim: cfg.model.feat_dim,
                classes: cfg.data.classes,
                mode: cfg.data.partition,
                shards_per_client: cfg.data.shards_per_client,
            },
            seed,
        )?,
        DataSource::Table(path) => {
            let file = File::open(path)
                .map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", path.display())))?;
            let table = load_table(BufReader::new(file))?;
            if table.feat_dim() != cfg.model.feat_dim {
                return Err(Error::InvalidConfig(format!(
                    "table has {} features, model expects {}",
                    table.feat_dim(),
                    cfg.model.feat_dim
                )));
            }
            if let Some(&l) = table.labels().iter().find(|&&l| l >= cfg.data.classes) {
                return Err(Error::InvalidConfig(format!(
                    "label {l} outside {} classes",
                    cfg.data.classes
                )));
            }
            partition_dataset(&table, cfg.clients, cfg.data.partition, cfg.data.shards_per_client, seed)?
        }
    };
    let (mut train, test) = train_test_split(&records, cfg.data.test_frac, seed)?;
    let cap = cfg.power_cap();
    for c in &mut train {
        c.power_cap = cap;
    }
    Ok((train, test))
}

pub fn init_params(cfg: &ExperimentConfig, seed: u64) -> Result<ModelParams> {
    let shapes = cfg.model.shapes(cfg.data.classes);
    if cfg.model.bias {
        ModelParams::init_with_bias(&shapes, seed)
    } else {
        ModelParams::init(&shapes, seed)
    }
}

/// `f(w) = Σ_i p_i F_i(w)`.
pub fn global_train_loss(w: &ModelParams, clients: &[ClientRecord]) -> Result<f64> {
    let parts: Vec<f64> = clients
        .par_iter()
        .map(|c| Ok(c.weight * forward_loss(w, &c.data)?))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSummary {
    pub l: f64,
    pub b: f64,
    pub rho: f64,
    pub q: f64,
    pub g: f64,
    pub kappa_max: f64,
    pub mu: f64,
    pub tau: f64,
    pub d: usize,
    pub f0_minus_fstar: f64,
    /// Any constant came from the empirical estimator.
    pub heuristic: bool,
    pub report: BoundReport,
}

/// Everything one seed produced, in memory.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub ledger_trace: LedgerTrace,
    pub ledger: PrivacyLedger,
    pub max_power_ratio: f64,
    pub min_slack: f64,
    pub bound: Option<BoundSummary>,
    pub warnings: Vec<String>,
}

impl SeedRun {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.metrics.last().expect("a run has at least one iteration")
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Run one seed end to end without touching the filesystem.
pub fn simulate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    pool(cfg.threads)?.install(|| simulate_in_pool(cfg, seed))
}

fn simulate_in_pool(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let (clients, test) = build_data(cfg, seed)?;
    let init = init_params(cfg, seed)?;
    let f0 = global_train_loss(&init, &clients)?;
    let protocol = cfg.protocol(seed);
    let jammer_auto = matches!(protocol.jammer, JammerPolicy::Auto { .. });
    let mut trainer = Trainer::new(protocol, clients, init)?;

    let weights: Vec<f64> = trainer.clients().iter().map(|c| c.weight).collect();
    let want_bound = cfg.bound.enabled && cfg.hyper.mu > 0.0;
    let estimating = want_bound
        && [cfg.bound.l, cfg.bound.b, cfg.bound.q, cfg.bound.g, cfg.bound.kappa]
            .contains(&BoundValue::Estimate);
    let mut empirical = EmpiricalConstants::new(trainer.clients().len());
    let mut round_terms = Vec::new();

    let mut metrics = Vec::new();
    let mut rows = Vec::new();
    let mut max_ratio: f64 = 0.0;
    let mut min_slack = f64::INFINITY;
    let mut warnings = Vec::new();
    let (mut prev_eps, mut prev_max) = (0.0, 0.0);

    for it in 1..=cfg.protocol(seed).schedule.total_iterations() {
        let before = trainer.global().clone();
        let transmits = trainer.config().schedule.transmits(it);
        if estimating && transmits {
            empirical.observe(&before, trainer.clients(), seed)?;
        }
        let report = trainer.run_round(it)?;
        if report.transmitted {
            if estimating {
                empirical.observe_gap(trainer.global(), &before);
            }
            max_ratio = max_ratio.max(report.max_power_ratio);
            min_slack = report.slack.iter().copied().fold(min_slack, f64::min);
            rows.push(LedgerRow {
                iteration: it,
                sigma_sq: report.sigma_sq,
                slack: report.slack.clone(),
            });
            let channel = report.channel.as_ref().expect("transmitting rounds carry a channel draw");
            round_terms.push(RoundTerms {
                slack: report.slack.clone(),
                alpha_u: report.alpha_u,
                h_cj: channel.jammer_gain,
                alpha_cj: report.alpha_cj,
            });
        }
        if max_ratio > 1.0 + crate::channel::POWER_SLACK {
            return Err(Error::Invariant(format!("power ratio {max_ratio} at iteration {it}")));
        }
        if min_slack < 1.0 {
            return Err(Error::Invariant(format!("slack factor {min_slack} below 1")));
        }

        let eps = trainer.eps_bound();
        let eps_max = trainer.eps_max_client();
        if eps < prev_eps || eps_max < prev_max {
            return Err(Error::Invariant(format!("ε decreased at iteration {it}")));
        }
        if eps_max > eps * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Invariant(format!(
                "per-client ε {eps_max} above the bound {eps} at iteration {it}"
            )));
        }
        (prev_eps, prev_max) = (eps, eps_max);

        let w = trainer.global();
        metrics.push(RoundMetrics {
            iteration: it,
            transmitted: report.transmitted,
            train_loss: global_train_loss(w, trainer.clients())?,
            test_acc: accuracy(w, &test)?,
            eps_bound: eps,
            eps_max_client: eps_max,
            jammer_var: report.jammer_var,
            avg_tx_power: report.avg_tx_power,
            wall_ms: if cfg.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
        });
    }

    if let (true, Some(target)) = (jammer_auto, cfg.eps_target) {
        if prev_eps > target * (1.0 + EPS_TARGET_SLACK) {
            return Err(Error::Invariant(format!(
                "final ε {prev_eps} exceeds the target {target} despite jammer design"
            )));
        }
    } else if let Some(target) = cfg.eps_target {
        if prev_eps > target {
            warnings.push(format!("final ε bound {prev_eps} exceeds the target {target}"));
        }
    }

    let bound = if want_bound {
        let pick = |v: BoundValue, est: f64| match v {
            BoundValue::Fixed(x) => x,
            BoundValue::Estimate => est,
        };
        let kappa: Vec<f64> = match cfg.bound.kappa {
            BoundValue::Fixed(x) => vec![x; weights.len()],
            BoundValue::Estimate => empirical.kappa.clone(),
        };
        let constants = BoundConstants {
            l: pick(cfg.bound.l, empirical.l),
            b: pick(cfg.bound.b, empirical.b),
            rho: cfg.bound.rho.unwrap_or(cfg.hyper.mu),
            q: pick(cfg.bound.q, empirical.q),
            g: pick(cfg.bound.g, empirical.g),
            kappa,
            mu: cfg.hyper.mu,
            lambda: cfg.lambda.clone(),
            tau: cfg.hyper.tau,
            d: cfg.model_dim(),
            sigma_c: cfg.channel_sigma(),
        };
        match eval_bound(&constants, f0, &round_terms, &weights) {
            Ok(report) => {
                if report.value.is_none() {
                    warnings.push(format!("C1 = {} ≤ 0: convergence bound does not apply", report.c1));
                }
                Some(BoundSummary {
                    l: constants.l,
                    b: constants.b,
                    rho: constants.rho,
                    q: constants.q,
                    g: constants.g,
                    kappa_max: constants.kappa.iter().copied().fold(0.0, f64::max),
                    mu: constants.mu,
                    tau: constants.tau,
                    d: constants.d,
                    f0_minus_fstar: f0,
                    heuristic: estimating,
                    report,
                })
            }
            Err(e) => {
                warnings.push(format!("convergence bound not evaluated: {e}"));
                None
            }
        }
    } else {
        None
    };

    let ledger = trainer.ledger().clone();
    Ok(SeedRun {
        seed,
        metrics,
        ledger_trace: LedgerTrace {
            delta: ledger.delta(),
            data_size: ledger.data_size(),
            rows,
        },
        ledger,
        max_power_ratio: max_ratio,
        min_slack,
        bound,
        warnings,
    })
}

/// `null` in JSON stands for an unbounded ε.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_test_acc: f64,
    pub final_train_loss: f64,
    pub eps_bound: Option<f64>,
    pub eps_max_client: Option<f64>,
    pub transmissions: usize,
    pub max_power_ratio: f64,
    pub min_slack: f64,
    pub bound: Option<BoundSummary>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: String,
    pub clients: usize,
    pub rounds: usize,
    pub iterations: usize,
    pub model_dim: usize,
    pub power_cap: f64,
    pub delta: f64,
    pub eps_target: Option<f64>,
    pub seeds: Vec<SeedSummary>,
    pub test_acc_mean: f64,
    /// Sample standard deviation; `None` for a single seed.
    pub test_acc_std: Option<f64>,
    pub output_dir: PathBuf,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn label(cfg: &ExperimentConfig) -> String {
    if cfg.label.is_empty() {
        cfg.algorithm.name().to_string()
    } else {
        cfg.label.clone()
    }
}

/// Run every seed and write all artifacts to the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir)?;
    let pool = pool(cfg.threads)?;
    let name = label(cfg);

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = pool.install(|| simulate_in_pool(cfg, seed))?;
        emit_csv(&run.metrics, &dir.join(format!("metrics_{seed}.csv")))?;
        std::fs::write(dir.join(format!("ledger_{seed}.csv")), ledger_csv(&run.ledger_trace))?;
        runs.push(run);
    }

    let series: Vec<Series> = runs
        .iter()
        .map(|r| Series {
            label: format!("{name} seed {}", r.seed),
            metrics: r.metrics.clone(),
        })
        .collect();
    emit_svg(&series, &dir.join("curves.svg"))?;

    let accs: Vec<f64> = runs.iter().map(|r| r.final_metrics().test_acc).collect();
    let (test_acc_mean, test_acc_std) = mean_std(&accs);
    let summary = RunSummary {
        label: name,
        algorithm: cfg.algorithm.name().to_string(),
        clients: cfg.clients,
        rounds: cfg.rounds,
        iterations: cfg.protocol(0).schedule.total_iterations(),
        model_dim: cfg.model_dim(),
        power_cap: cfg.power_cap(),
        delta: cfg.delta,
        eps_target: cfg.eps_target,
        seeds: runs
            .into_iter()
            .map(|r| {
                let last = r.final_metrics().clone();
                SeedSummary {
                    seed: r.seed,
                    final_test_acc: last.test_acc,
                    final_train_loss: last.train_loss,
                    eps_bound: finite(last.eps_bound),
                    eps_max_client: finite(last.eps_max_client),
                    transmissions: r.ledger_trace.rows.len(),
                    max_power_ratio: r.max_power_ratio,
                    min_slack: r.min_slack,
                    bound: r.bound,
                    warnings: r.warnings,
                }
            })
            .collect(),
        test_acc_mean,
        test_acc_std,
        output_dir: dir.clone(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::InvalidInput(format!("summary serialization: {e}")))?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

/// ε after each recorded round, recomputed from a ledger trace alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayPoint {
    pub iteration: usize,
    pub eps_bound: f64,
    pub eps_max_client: f64,
}

pub fn replay_ledger(trace: &LedgerTrace) -> Result<Vec<ReplayPoint>> {
    let k = trace.rows.first().map_or(0, |r| r.slack.len());
    let mut ledger = PrivacyLedger::new(trace.delta, trace.data_size, k)?;
    let mut unbounded = false;
    let mut out = Vec::with_capacity(trace.rows.len());
    for row in &trace.rows {
        if row.sigma_sq == 0.0 {
            unbounded = true;
        } else {
            ledger.record_round(EffectiveNoise { sigma_sq: row.sigma_sq }, &row.slack)?;
        }
        let (b, m) = if unbounded {
            (f64::INFINITY, f64::INFINITY)
        } else {
            (ledger.epsilon_upper_bound(), ledger.epsilon_max_client())
        };
        out.push(ReplayPoint {
            iteration: row.iteration,
            eps_bound: b,
            eps_max_client: m,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s.unwrap() - 1.290_994_448_735_805_6).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]).1, None);
    }

    #[test]
    fn replay_marks_noiseless_rounds_unbounded() {
        let trace = LedgerTrace {
            delta: 1e-5,
            data_size: 100,
            rows: vec![
                LedgerRow { iteration: 1, sigma_sq: 0.01, slack: vec![1.0] },
                LedgerRow { iteration: 2, sigma_sq: 0.0, slack: vec![1.0] },
            ],
        };
        let pts = replay_ledger(&trace).unwrap();
        assert!(pts[0].eps_bound.is_finite());
        assert!(pts[1].eps_bound.is_infinite());
    }
}
