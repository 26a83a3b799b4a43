//! Sectioned `key = value` configuration files and `--set` overrides.

use std::path::PathBuf;

use crate::channel::{SystemConfig, CONFIG_KEYS};
use crate::error::{Error, Result};
use crate::fedlearn::{FeelConfig, FEEL_KEYS};
use crate::scheduler::Policy;

/// Swept parameter of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    Eps0,
    Gamma0,
    Gamma,
    DTarget,
    N,
    K,
}

impl SweepVariable {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "eps0" => Self::Eps0,
            "Gamma0" => Self::Gamma0,
            "gamma" => Self::Gamma,
            "d_target" => Self::DTarget,
            "N" => Self::N,
            "K" => Self::K,
            other => {
                return Err(Error::invalid(format!(
                    "variable: '{other}' is not one of eps0, Gamma0, gamma, d_target, N, K"
                )))
            }
        })
    }

    /// The `[system]` key this variable overrides.
    pub fn key(self) -> &'static str {
        match self {
            Self::Eps0 => "eps0",
            Self::Gamma0 => "Gamma0",
            Self::Gamma => "gamma",
            Self::DTarget => "d_target",
            Self::N => "N",
            Self::K => "K",
        }
    }

    pub fn apply(self, cfg: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let mut out = cfg.clone();
        out.set(self.key(), &value.to_string())?;
        Ok(out)
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic,
    Flat(PathBuf),
    Idx { images: PathBuf, labels: PathBuf },
}

impl DatasetSource {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "synthetic" {
            Ok(Self::Synthetic)
        } else if let Some(p) = s.strip_prefix("flat:") {
            Ok(Self::Flat(PathBuf::from(p)))
        } else if let Some(rest) = s.strip_prefix("idx:") {
            let (images, labels) = rest
                .split_once(',')
                .ok_or_else(|| Error::invalid("dataset: idx needs 'idx:IMAGES,LABELS'"))?;
            Ok(Self::Idx { images: images.trim().into(), labels: labels.trim().into() })
        } else {
            Err(Error::invalid(format!("dataset: '{s}' is not synthetic, flat:PATH or idx:IMAGES,LABELS")))
        }
    }

    pub fn render(&self) -> String {
        match self {
            Self::Synthetic => "synthetic".into(),
            Self::Flat(p) => format!("flat:{}", p.display()),
            Self::Idx { images, labels } => format!("idx:{},{}", images.display(), labels.display()),
        }
    }
}

/// `[sweep]` section.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub trials: usize,
    pub policies: Vec<Policy>,
    pub out: Option<PathBuf>,
    /// Monte-Carlo sensing blocks per trial for the sensing-MSE column; 0 skips it.
    pub sensing_blocks: usize,
    /// Run a training job per trial to fill the accuracy and loss columns.
    pub train: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            variable: SweepVariable::Eps0,
            values: vec![60.0, 100.0, 150.0, 200.0, 300.0],
            trials: 100,
            policies: Policy::ALL.to_vec(),
            out: None,
            sensing_blocks: 10,
            train: false,
        }
    }
}

pub const SWEEP_KEYS: &[&str] = &["variable", "values", "trials", "policies", "out", "sensing_blocks", "train"];

impl SweepSection {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let count = |v: &str| -> Result<usize> {
            v.trim().parse().map_err(|_| Error::invalid(format!("{key}: '{v}' is not a non-negative integer")))
        };
        match key {
            "variable" => self.variable = SweepVariable::parse(value)?,
            "values" => {
                self.values = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("values: '{}' is not a number", s.trim()))))
                    .collect::<Result<_>>()?
            }
            "trials" => self.trials = count(value)?,
            "policies" => {
                self.policies = value.split(',').filter(|s| !s.trim().is_empty()).map(Policy::parse).collect::<Result<_>>()?
            }
            "out" => self.out = Some(value.trim()).filter(|v| !v.is_empty()).map(PathBuf::from),
            "sensing_blocks" => self.sensing_blocks = count(value)?,
            "train" => {
                self.train = match value.trim() {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    other => return Err(Error::invalid(format!("train: '{other}' is not a boolean"))),
                }
            }
            _ => return Err(Error::invalid(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "variable" => self.variable.key().into(),
            "values" => self.values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "),
            "trials" => self.trials.to_string(),
            "policies" => self.policies.iter().map(|p| p.name()).collect::<Vec<_>>().join(", "),
            "out" => self.out.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "sensing_blocks" => self.sensing_blocks.to_string(),
            "train" => self.train.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.values.is_empty() {
            errs.push("values: grid must be nonempty".into());
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            errs.push("values: grid must be strictly increasing".into());
        }
        if self.trials == 0 {
            errs.push("trials: must be >= 1".into());
        }
        if self.policies.is_empty() {
            errs.push("policies: need at least one of mp, greedy, random".into());
        }
        errs
    }
}

/// Everything a CLI invocation can configure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub feel: FeelConfig,
    pub dataset: DatasetSource,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            feel: FeelConfig::default(),
            dataset: DatasetSource::Synthetic,
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    System,
    Feel,
    Sweep,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        match name.trim() {
            "system" | "channel" => Some(Self::System),
            "feel" | "fedlearn" => Some(Self::Feel),
            "sweep" | "harness" => Some(Self::Sweep),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::Feel => "feel",
            Self::Sweep => "sweep",
        }
    }

    fn owns(self, key: &str) -> bool {
        match self {
            Self::System => CONFIG_KEYS.contains(&key),
            Self::Feel => FEEL_KEYS.contains(&key) || key == "dataset",
            Self::Sweep => SWEEP_KEYS.contains(&key),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, section: Section, key: &str, value: &str) -> Result<()> {
        match section {
            Section::System => self.system.set(key, value),
            Section::Feel if key == "dataset" => {
                self.dataset = DatasetSource::parse(value)?;
                Ok(())
            }
            Section::Feel => self.feel.set(key, value),
            Section::Sweep => self.sweep.set(key, value),
        }
    }

    /// Applies `key=value` or `section.key=value`; a bare key is looked up in
    /// `system`, then `feel`, then `sweep`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override '{assignment}' is not key=value")))?;
        let lhs = lhs.trim();
        let (section, key) = match lhs.split_once('.') {
            Some((s, k)) => {
                let section = Section::parse(s).ok_or_else(|| Error::invalid(format!("unknown section '{s}'")))?;
                if !section.owns(k) {
                    return Err(Error::invalid(format!("unknown key '{k}' in [{s}]")));
                }
                (section, k)
            }
            None => {
                let section = [Section::System, Section::Feel, Section::Sweep]
                    .into_iter()
                    .find(|s| s.owns(lhs))
                    .ok_or_else(|| Error::invalid(format!("unknown key '{lhs}'")))?;
                (section, lhs)
            }
        };
        self.set(section, key, value)
    }

    /// Every invariant of every section, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = match self.system.validate() {
            Ok(()) => Vec::new(),
            Err(Error::InvalidConfig(v)) => v,
            Err(e) => vec![e.to_string()],
        };
        errs.extend(self.feel.validate());
        errs.extend(self.sweep.validate());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Renders the configuration in file format.
    pub fn render(&self) -> String {
        let mut out = String::from("[system]\n");
        for key in CONFIG_KEYS {
            out.push_str(&format!("{key} = {}\n", self.system.get(key).unwrap_or_default()));
        }
        out.push_str("\n[feel]\n");
        out.push_str(&format!("dataset = {}\n", self.dataset.render()));
        for key in FEEL_KEYS {
            out.push_str(&format!("{key} = {}\n", self.feel.get(key).unwrap_or_default()));
        }
        out.push_str("\n[sweep]\n");
        for key in SWEEP_KEYS {
            out.push_str(&format!("{key} = {}\n", self.sweep.get(key).unwrap_or_default()));
        }
        out
    }
}

/// Parses a config file on top of the defaults.
///
/// Lines are `[section]` headers, `key = value` pairs, blanks, or comments
/// starting with `#` or `;`. Keys before the first header belong to `[system]`.
/// Malformed lines are parse errors; unknown keys and bad values are collected
/// and reported together.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = Section::System;
    let mut errs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("unterminated section header '{line}'") })?;
            section = Section::parse(name)
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("unknown section '{name}'") })?;
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected key = value, found '{line}'") })?;
        let (key, value) = (key.trim(), value.trim());
        if !section.owns(key) {
            errs.push(format!("line {line_no}: unknown key '{key}' in [{}]", section.name()));
            continue;
        }
        if let Err(e) = cfg.set(section, key, value) {
            match e {
                Error::InvalidConfig(v) => errs.extend(v.into_iter().map(|m| format!("line {line_no}: {m}"))),
                other => errs.push(format!("line {line_no}: {other}")),
            }
        }
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::InvalidConfig(errs))
    }
}
