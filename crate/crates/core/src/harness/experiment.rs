//! Monte-Carlo sweeps over one system parameter and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::RngCore;
use rayon::prelude::*;

use crate::channel::{draw_channels, ChannelRealization, SystemConfig};
use crate::error::{Error, Result};
use crate::fedlearn::{read_flat_binary, read_idx, synthetic_federation, train, FeelConfig, Federation};
use crate::numerics::RngStream;
use crate::scheduler::{schedule, Policy, ScheduleOutcome};
use crate::sensing::sense;

use super::config::{DatasetSource, RunConfig, SweepVariable};

/// One sweep: grid over a single variable, paired trials, several policies.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub trials: usize,
    pub policies: Vec<Policy>,
    pub out: PathBuf,
    pub base: SystemConfig,
    pub feel: FeelConfig,
    pub dataset: DatasetSource,
    pub sensing_blocks: usize,
    pub train: bool,
}

impl ExperimentSpec {
    pub fn from_config(cfg: &RunConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let spec = Self {
            variable: cfg.sweep.variable,
            values: cfg.sweep.values.clone(),
            trials: cfg.sweep.trials,
            policies: cfg.sweep.policies.clone(),
            out,
            base: cfg.system.clone(),
            feel: cfg.feel.clone(),
            dataset: cfg.dataset.clone(),
            sensing_blocks: cfg.sweep.sensing_blocks,
            train: cfg.sweep.train,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid nonempty and sorted, at least one trial and policy, and every grid
    /// point yields a valid system configuration.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.values.is_empty() {
            errs.push("values: grid must be nonempty".to_string());
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            errs.push("values: grid must be strictly increasing".to_string());
        }
        if self.trials == 0 {
            errs.push("trials: must be >= 1".to_string());
        }
        if self.policies.is_empty() {
            errs.push("policies: need at least one policy".to_string());
        }
        for &v in &self.values {
            match self.variable.apply(&self.base, v).and_then(|c| c.validate()) {
                Ok(()) => {}
                Err(Error::InvalidConfig(e)) => errs.extend(e.into_iter().map(|m| format!("{}={v}: {m}", self.variable.key()))),
                Err(e) => errs.push(e.to_string()),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// Raw result of one `(value, policy, trial)` job.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub value_index: usize,
    pub policy_index: usize,
    pub trial: usize,
    pub selected: usize,
    pub feasible: bool,
    pub crb: f64,
    pub agg_error: f64,
    pub sensing_mse: f64,
    pub accuracy: f64,
    pub loss: f64,
    /// `None` when the precoder problem itself was infeasible.
    pub outcome: Option<ScheduleOutcome>,
}

/// One CSV row: aggregate over the trials of a `(value, policy)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub policy: Policy,
    pub mean_selected: f64,
    pub mean_crb: f64,
    pub mean_agg_error: f64,
    pub mean_sensing_mse: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub trials: usize,
    pub se_selected: f64,
    pub se_crb: f64,
    pub se_agg_error: f64,
    pub se_sensing_mse: f64,
    pub se_accuracy: f64,
    pub se_loss: f64,
    pub feasible_rate: f64,
}

pub const CSV_HEADER: &str = "sweep_value,policy,mean_selected,mean_crb,mean_agg_error,mean_sensing_mse,final_accuracy,final_loss,trials,se_selected,se_crb,se_agg_error,se_sensing_mse,se_accuracy,se_loss,feasible_rate";

/// Shortest round-trip form; scientific notation outside `[1e-4, 1e15)`.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let f = [
            self.mean_selected,
            self.mean_crb,
            self.mean_agg_error,
            self.mean_sensing_mse,
            self.final_accuracy,
            self.final_loss,
        ];
        let se = [self.se_selected, self.se_crb, self.se_agg_error, self.se_sensing_mse, self.se_accuracy, self.se_loss];
        let mut s = format!("{},{}", format_float(self.sweep_value), self.policy.name());
        for v in f {
            let _ = write!(s, ",{}", format_float(v));
        }
        let _ = write!(s, ",{}", self.trials);
        for v in se {
            let _ = write!(s, ",{}", format_float(v));
        }
        let _ = write!(s, ",{}", format_float(self.feasible_rate));
        s
    }
}

/// Loads or synthesises the data set, splits it and partitions it over the devices.
pub fn build_federation(cfg: &SystemConfig, feel: &FeelConfig, source: &DatasetSource, seed: u64) -> Result<Federation> {
    let data = match source {
        DatasetSource::Synthetic => return synthetic_federation(cfg, feel, seed),
        DatasetSource::Flat(path) => read_flat_binary(path)?,
        DatasetSource::Idx { images, labels } => read_idx(images, labels)?,
    };
    let mut rng = RngStream::derive(seed, &[0, 2]);
    let (train, test) = data.split(feel.test_fraction, &mut rng);
    Federation::new(train, test, cfg.n_devices, feel, &mut rng)
}

/// Channel stream of a trial, shared by every policy and grid point.
pub fn channel_stream(seed: u64, trial: usize) -> RngStream {
    RngStream::derive(seed, &[trial as u64, 0])
}

/// Removal-rule stream of a trial and policy.
pub fn policy_stream(seed: u64, trial: usize, policy: Policy) -> RngStream {
    RngStream::derive(seed, &[trial as u64, 1, policy as u64])
}

fn sensing_stream(seed: u64, trial: usize, policy: Policy) -> RngStream {
    RngStream::derive(seed, &[trial as u64, 2, policy as u64])
}

/// The realisation a trial sees at configuration `cfg`.
pub fn trial_realization(cfg: &SystemConfig, trial: usize) -> Result<ChannelRealization> {
    draw_channels(cfg, &mut channel_stream(cfg.seed, trial))
}

fn run_trial(spec: &ExperimentSpec, vi: usize, pi: usize, trial: usize, federation: Option<&Federation>) -> Result<TrialRecord> {
    let cfg = spec.variable.apply(&spec.base, spec.values[vi])?;
    let policy = spec.policies[pi];
    let real = trial_realization(&cfg, trial)?;
    let base = vec![1.0; cfg.n_devices];
    let mut record = TrialRecord {
        value_index: vi,
        policy_index: pi,
        trial,
        selected: 0,
        feasible: false,
        crb: f64::NAN,
        agg_error: f64::NAN,
        sensing_mse: f64::NAN,
        accuracy: f64::NAN,
        loss: f64::NAN,
        outcome: None,
    };
    let outcome = match schedule(&real, &cfg, policy, &base, Some(&mut policy_stream(cfg.seed, trial, policy))) {
        Ok(o) => o,
        Err(Error::InfeasibleSnrFloor { .. }) => return Ok(record),
        Err(e) => return Err(e),
    };
    record.feasible = outcome.feasible;
    record.selected = outcome.set.len();
    if outcome.feasible {
        record.crb = outcome.crb_value;
        record.agg_error = outcome.agg_error;
        if spec.sensing_blocks > 0 {
            let est = sense(&cfg, &real, &outcome.w, &outcome.scaling, true, spec.sensing_blocks, &mut sensing_stream(cfg.seed, trial, policy))?;
            record.sensing_mse = est.empirical_mse.unwrap_or(f64::NAN);
        }
    }
    if let Some(fed) = federation {
        let mut fed = fed.clone();
        fed.cfg.policy = policy;
        let state = train(&cfg, &fed, RngStream::derive(cfg.seed, &[trial as u64, 3]).next_u64())?;
        record.accuracy = *state.acc_history.last().unwrap_or(&f64::NAN);
        record.loss = *state.loss_history.last().unwrap_or(&f64::NAN);
    }
    record.outcome = Some(outcome);
    Ok(record)
}

/// Runs every job in parallel and returns the records sorted by `(value, policy, trial)`.
pub fn run_trials(spec: &ExperimentSpec) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    let federations: Vec<Option<Federation>> = if spec.train {
        spec.values
            .iter()
            .map(|&v| {
                let cfg = spec.variable.apply(&spec.base, v)?;
                build_federation(&cfg, &spec.feel, &spec.dataset, cfg.seed).map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; spec.values.len()]
    };
    let jobs: Vec<(usize, usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.policies.len()).flat_map(move |p| (0..spec.trials).map(move |t| (v, p, t))))
        .collect();
    let mut records = jobs
        .par_iter()
        .map(|&(v, p, t)| run_trial(spec, v, p, t, federations[v].as_ref()))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| (r.value_index, r.policy_index, r.trial));
    Ok(records)
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One row per `(value, policy)`. `|S|` averages over all trials (infeasible
/// trials count as zero); CRB, aggregation error and sensing MSE average over
/// feasible trials only.
pub fn summarize(spec: &ExperimentSpec, records: &[TrialRecord]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (vi, &value) in spec.values.iter().enumerate() {
        for (pi, &policy) in spec.policies.iter().enumerate() {
            let cell: Vec<&TrialRecord> = records.iter().filter(|r| r.value_index == vi && r.policy_index == pi).collect();
            let pick = |f: fn(&TrialRecord) -> f64| cell.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (mean_selected, se_selected) = mean_se(&pick(|r| r.selected as f64));
            let (mean_crb, se_crb) = mean_se(&pick(|r| r.crb));
            let (mean_agg_error, se_agg_error) = mean_se(&pick(|r| r.agg_error));
            let (mean_sensing_mse, se_sensing_mse) = mean_se(&pick(|r| r.sensing_mse));
            let (final_accuracy, se_accuracy) = mean_se(&pick(|r| r.accuracy));
            let (final_loss, se_loss) = mean_se(&pick(|r| r.loss));
            let feasible = cell.iter().filter(|r| r.feasible).count();
            rows.push(ResultRow {
                sweep_value: value,
                policy,
                mean_selected,
                mean_crb,
                mean_agg_error,
                mean_sensing_mse,
                final_accuracy,
                final_loss,
                trials: cell.len(),
                se_selected,
                se_crb,
                se_agg_error,
                se_sensing_mse,
                se_accuracy,
                se_loss,
                feasible_rate: if cell.is_empty() { 0.0 } else { feasible as f64 / cell.len() as f64 },
            });
        }
    }
    rows
}

pub fn render_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Runs the sweep and writes the CSV to `spec.out`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    let records = run_trials(spec)?;
    let rows = summarize(spec, &records);
    fs::write(&spec.out, render_csv(&rows))?;
    Ok(rows)
}
