//! Federated training of a regularised logistic-regression model with
//! over-the-air aggregation through the simulated uplink.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::aggregation::{aggregation_error, sic_aggregate, zf_coordination};
use crate::channel::{draw_channels, ChannelRealization, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{norm, normalized, ComplexMatrix, RngStream, C64, ZERO};
use crate::scheduler::{renormalized_weights, schedule, Policy};
use crate::sensing::{effective_noise_cov, estimate_from_block, random_pilots, Scene};

/// Dense labelled dataset, features row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::Dataset(format!("need dim >= 1 and >= 2 classes (got {dim}, {classes})")));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dataset(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { features, labels, dim, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset { features, labels: idx.iter().map(|&i| self.labels[i]).collect(), dim: self.dim, classes: self.classes }
    }

    /// Shuffled `(train, test)` split.
    pub fn split(&self, test_fraction: f64, rng: &mut RngStream) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        (self.subset(&idx[n_test..]), self.subset(&idx[..n_test]))
    }
}

/// Gaussian mixture with unit-variance noise around random class means of norm `separation`.
///
/// Two classes use antipodal means `±(separation/2)u`.
pub fn synthetic_mixture(n: usize, dim: usize, classes: usize, separation: f64, rng: &mut RngStream) -> Result<Dataset> {
    let direction = |rng: &mut RngStream| {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let means: Vec<Vec<f64>> = if classes == 2 {
        let u = direction(rng);
        vec![u.iter().map(|x| -0.5 * separation * x).collect(), u.iter().map(|x| 0.5 * separation * x).collect()]
    } else {
        (0..classes).map(|_| direction(rng).into_iter().map(|x| separation * x).collect()).collect()
    };
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.below(classes);
        features.extend(means[y].iter().map(|m| m + rng.normal()));
        labels.push(y);
    }
    Dataset::new(features, labels, dim, classes)
}

pub const FLAT_MAGIC: [u8; 4] = *b"OTFD";

/// Writes `magic, n: u32, dim: u32, classes: u32, features: f32[n·dim], labels: i32[n]`, little endian.
pub fn write_flat_binary(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&FLAT_MAGIC)?;
    for v in [data.len(), data.dim, data.classes] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for &x in &data.features {
        out.write_all(&(x as f32).to_le_bytes())?;
    }
    for &y in &data.labels {
        out.write_all(&(y as i32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_flat_binary(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 16 || bytes[..4] != FLAT_MAGIC {
        return Err(Error::Dataset("missing flat-binary magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, dim, classes) = (word(4), word(8), word(12));
    let want = 16 + 4 * n * dim + 4 * n;
    if bytes.len() != want {
        return Err(Error::Dataset(format!("expected {want} bytes, found {}", bytes.len())));
    }
    let features = (0..n * dim)
        .map(|i| f32::from_le_bytes(bytes[16 + 4 * i..20 + 4 * i].try_into().expect("4 bytes")) as f64)
        .collect();
    let base = 16 + 4 * n * dim;
    let labels = (0..n)
        .map(|i| {
            let y = i32::from_le_bytes(bytes[base + 4 * i..base + 4 * i + 4].try_into().expect("4 bytes"));
            usize::try_from(y).map_err(|_| Error::Dataset(format!("negative label {y}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(features, labels, dim, classes)
}

fn read_idx_file(path: &Path, expected_type: u8) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != expected_type {
        return Err(Error::Dataset(format!("{}: not an unsigned-byte IDX file", path.display())));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Dataset(format!("{}: truncated header", path.display())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(Error::Dataset(format!("{}: expected {} payload bytes", path.display(), count)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Loads an IDX image/label pair (the MNIST layout). Pixels are scaled to `[0, 1]`
/// and a constant 1 feature is appended as a bias.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = read_idx_file(images, 0x08)?;
    let (ldims, raw_labels) = read_idx_file(labels, 0x08)?;
    if idims.is_empty() || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Dataset("image and label counts differ".into()));
    }
    let n = idims[0];
    let pixels_per = idims[1..].iter().product::<usize>();
    let dim = pixels_per + 1;
    let mut features = Vec::with_capacity(n * dim);
    for i in 0..n {
        features.extend(pixels[i * pixels_per..(i + 1) * pixels_per].iter().map(|&p| p as f64 / 255.0));
        features.push(1.0);
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(features, labels, dim, classes)
}

/// L2-regularised logistic regression: sigmoid for two classes, softmax otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticModel {
    pub dim: usize,
    pub classes: usize,
    /// Regularisation weight, which is also the strong-convexity modulus.
    pub reg: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) }
}

impl LogisticModel {
    pub fn for_data(data: &Dataset, reg: f64) -> Self {
        Self { dim: data.dim, classes: data.classes, reg }
    }

    pub fn params(&self) -> usize {
        if self.classes == 2 { self.dim } else { self.dim * self.classes }
    }

    fn binary(&self) -> bool {
        self.classes == 2
    }

    fn scores(&self, r: &[f64], x: &[f64]) -> Vec<f64> {
        if self.binary() {
            vec![r.iter().zip(x).map(|(a, b)| a * b).sum()]
        } else {
            (0..self.classes).map(|c| r[c * self.dim..(c + 1) * self.dim].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        }
    }

    fn sample_loss(&self, r: &[f64], x: &[f64], y: usize) -> f64 {
        let s = self.scores(r, x);
        if self.binary() {
            softplus(s[0]) - if y == 1 { s[0] } else { 0.0 }
        } else {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - s[y]
        }
    }

    fn add_sample_grad(&self, r: &[f64], x: &[f64], y: usize, out: &mut [f64], weight: f64) {
        let s = self.scores(r, x);
        if self.binary() {
            let e = sigmoid(s[0]) - if y == 1 { 1.0 } else { 0.0 };
            for (o, xi) in out.iter_mut().zip(x) {
                *o += weight * e * xi;
            }
        } else {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for c in 0..self.classes {
                let e = (s[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 };
                for (o, xi) in out[c * self.dim..(c + 1) * self.dim].iter_mut().zip(x) {
                    *o += weight * e * xi;
                }
            }
        }
    }

    /// `(1/n) Σ ℓ_i + (reg/2)‖r‖²` over `idx` (all samples when `None`).
    pub fn loss(&self, r: &[f64], data: &Dataset, idx: Option<&[usize]>) -> f64 {
        let reg = 0.5 * self.reg * r.iter().map(|v| v * v).sum::<f64>();
        let (sum, n) = match idx {
            Some(idx) => (idx.iter().map(|&i| self.sample_loss(r, data.row(i), data.labels[i])).sum::<f64>(), idx.len()),
            None => ((0..data.len()).map(|i| self.sample_loss(r, data.row(i), data.labels[i])).sum::<f64>(), data.len()),
        };
        sum / n.max(1) as f64 + reg
    }

    pub fn gradient(&self, r: &[f64], data: &Dataset, idx: Option<&[usize]>) -> Vec<f64> {
        let mut g: Vec<f64> = r.iter().map(|v| self.reg * v).collect();
        let all: Vec<usize>;
        let idx = match idx {
            Some(idx) => idx,
            None => {
                all = (0..data.len()).collect();
                &all
            }
        };
        let w = 1.0 / idx.len().max(1) as f64;
        for &i in idx {
            self.add_sample_grad(r, data.row(i), data.labels[i], &mut g, w);
        }
        g
    }

    pub fn predict(&self, r: &[f64], x: &[f64]) -> usize {
        let s = self.scores(r, x);
        if self.binary() {
            usize::from(s[0] > 0.0)
        } else {
            let mut best = 0;
            for c in 1..s.len() {
                if s[c] > s[best] {
                    best = c;
                }
            }
            best
        }
    }

    pub fn accuracy(&self, r: &[f64], data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = (0..data.len()).filter(|&i| self.predict(r, data.row(i)) == data.labels[i]).count();
        hits as f64 / data.len() as f64
    }

    /// Gradient-Lipschitz constant: `¼λ_max + reg` (sigmoid) or `½λ_max + reg` (softmax),
    /// with `λ_max` the top eigenvalue of the feature second-moment matrix.
    pub fn lipschitz(&self, data: &Dataset) -> f64 {
        let curvature = if self.binary() { 0.25 } else { 0.5 };
        curvature * second_moment_top_eigenvalue(data) + self.reg
    }

    /// Full-batch gradient descent at step `1/L` until the gradient norm stalls.
    pub fn minimize(&self, data: &Dataset, max_iter: usize) -> (Vec<f64>, f64) {
        let step = 1.0 / self.lipschitz(data);
        let mut r = vec![0.0; self.params()];
        for _ in 0..max_iter {
            let g = self.gradient(&r, data, None);
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (ri, gi) in r.iter_mut().zip(&g) {
                *ri -= step * gi;
            }
            if gn <= 1e-12 {
                break;
            }
        }
        let loss = self.loss(&r, data, None);
        (r, loss)
    }
}

/// Top eigenvalue of `(1/n) XᵀX` by power iteration.
pub fn second_moment_top_eigenvalue(data: &Dataset) -> f64 {
    let (n, d) = (data.len(), data.dim);
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let mut next = vec![0.0; d];
        for i in 0..n {
            let x = data.row(i);
            let p: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (o, xi) in next.iter_mut().zip(x) {
                *o += p * xi / n as f64;
            }
        }
        let s = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s == 0.0 {
            return 0.0;
        }
        let converged = (s - lambda).abs() <= 1e-12 * s;
        lambda = s;
        v = next.into_iter().map(|x| x / s).collect();
        if converged {
            break;
        }
    }
    lambda
}

/// Sample indices held by each device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPartition {
    pub shards: Vec<Vec<usize>>,
}

impl DataPartition {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }
}

/// Shard sizes follow a Dirichlet(`alpha`·1) draw, rounded by largest remainder,
/// with at least one sample per device. Samples are shuffled before assignment.
pub fn partition_dirichlet(n: usize, k: usize, alpha: f64, rng: &mut RngStream) -> Result<DataPartition> {
    if alpha <= 0.0 || alpha.is_nan() {
        return Err(Error::invalid(format!("Dirichlet concentration must be positive (got {alpha})")));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot split {n} samples over {k} devices")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let spare = n - k;
    let quotas: Vec<f64> = draws.iter().map(|g| g / total * spare as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = spare - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for s in sizes {
        shards.push(idx[start..start + s + 1].to_vec());
        start += s + 1;
    }
    Ok(DataPartition { shards })
}

/// `steps` local gradient steps from `r_global`; mini-batches are drawn without
/// replacement, and `batch >= |shard|` means full-batch steps.
pub fn local_update(
    model: &LogisticModel,
    r_global: &[f64],
    data: &Dataset,
    shard: &[usize],
    steps: usize,
    lr: f64,
    batch: usize,
    rng: &mut RngStream,
) -> Vec<f64> {
    let mut r = r_global.to_vec();
    if lr == 0.0 {
        return r;
    }
    let mut pool = shard.to_vec();
    for _ in 0..steps {
        let g = if batch >= shard.len() {
            model.gradient(&r, data, Some(shard))
        } else {
            let (chosen, _) = pool.partial_shuffle(rng, batch);
            model.gradient(&r, data, Some(chosen))
        };
        for (ri, gi) in r.iter_mut().zip(&g) {
            *ri -= lr * gi;
        }
    }
    r
}

/// Which echo estimate the server cancels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensingMode {
    /// Maximum-likelihood estimate from the first `L` symbols of each block.
    Estimated,
    /// The true target response.
    Oracle,
    /// No cancellation.
    Off,
}

impl SensingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "estimated" | "on" => Ok(Self::Estimated),
            "oracle" => Ok(Self::Oracle),
            "off" => Ok(Self::Off),
            other => Err(Error::invalid(format!("unknown sensing mode '{other}' (expected estimated|oracle|off)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Estimated => "estimated",
            Self::Oracle => "oracle",
            Self::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeelConfig {
    pub rounds: usize,
    pub local_steps: usize,
    /// Local learning rate; `None` uses `1/L_Lip`.
    pub lr: Option<f64>,
    /// Mini-batch size; `0` means full batch.
    pub batch: usize,
    pub reg: f64,
    pub alpha_dir: f64,
    pub sensing: SensingMode,
    /// Whether the target echo is present in the uplink samples.
    pub echo: bool,
    /// Zero receiver noise.
    pub noiseless: bool,
    pub policy: Policy,
    /// Compute the optimum loss so the gap history is meaningful.
    pub track_gap: bool,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub test_fraction: f64,
}

impl Default for FeelConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_steps: 1,
            lr: None,
            batch: 0,
            reg: 0.05,
            alpha_dir: 1.0,
            sensing: SensingMode::Estimated,
            echo: true,
            noiseless: false,
            policy: Policy::MatchingPursuit,
            track_gap: true,
            samples: 2500,
            dim: 20,
            classes: 2,
            separation: 2.5,
            test_fraction: 0.2,
        }
    }
}

pub const FEEL_KEYS: &[&str] = &[
    "rounds", "local_steps", "lr", "batch", "reg", "alpha_dir", "sensing", "echo", "noiseless", "policy", "track_gap",
    "samples", "dim", "classes", "separation", "test_fraction",
];

impl FeelConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::invalid(format!("{key}: '{v}' is not a number")));
        let count = |v: &str| -> Result<usize> {
            let x = num(v)?;
            if x < 0.0 || x.fract() != 0.0 {
                return Err(Error::invalid(format!("{key}: '{v}' is not a non-negative integer")));
            }
            Ok(x as usize)
        };
        let flag = |v: &str| match v.trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::invalid(format!("{key}: '{other}' is not a boolean"))),
        };
        match key {
            "rounds" => self.rounds = count(value)?,
            "local_steps" => self.local_steps = count(value)?,
            "lr" => self.lr = if value.trim() == "auto" { None } else { Some(num(value)?) },
            "batch" => self.batch = count(value)?,
            "reg" => self.reg = num(value)?,
            "alpha_dir" => self.alpha_dir = num(value)?,
            "sensing" => self.sensing = SensingMode::parse(value)?,
            "echo" => self.echo = flag(value)?,
            "noiseless" => self.noiseless = flag(value)?,
            "policy" => self.policy = Policy::parse(value)?,
            "track_gap" => self.track_gap = flag(value)?,
            "samples" => self.samples = count(value)?,
            "dim" => self.dim = count(value)?,
            "classes" => self.classes = count(value)?,
            "separation" => self.separation = num(value)?,
            "test_fraction" => self.test_fraction = num(value)?,
            _ => return Err(Error::invalid(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "rounds" => self.rounds.to_string(),
            "local_steps" => self.local_steps.to_string(),
            "lr" => self.lr.map_or("auto".into(), |v| v.to_string()),
            "batch" => self.batch.to_string(),
            "reg" => self.reg.to_string(),
            "alpha_dir" => self.alpha_dir.to_string(),
            "sensing" => self.sensing.name().into(),
            "echo" => self.echo.to_string(),
            "noiseless" => self.noiseless.to_string(),
            "policy" => self.policy.name().into(),
            "track_gap" => self.track_gap.to_string(),
            "samples" => self.samples.to_string(),
            "dim" => self.dim.to_string(),
            "classes" => self.classes.to_string(),
            "separation" => self.separation.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.rounds == 0 {
            errs.push("rounds: must be >= 1".into());
        }
        if self.local_steps == 0 {
            errs.push("local_steps: must be >= 1".into());
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0) {
                errs.push(format!("lr: must be >= 0 (got {lr})"));
            }
        }
        if !(self.reg > 0.0) {
            errs.push(format!("reg: must be positive (got {})", self.reg));
        }
        if !(self.alpha_dir > 0.0) {
            errs.push(format!("alpha_dir: must be positive (got {})", self.alpha_dir));
        }
        if self.dim == 0 {
            errs.push("dim: must be >= 1".into());
        }
        if self.classes < 2 {
            errs.push("classes: must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            errs.push(format!("test_fraction: must lie in [0, 1) (got {})", self.test_fraction));
        }
        errs
    }
}

/// Global model and per-round metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub r: Vec<f64>,
    pub round: usize,
    pub loss_history: Vec<f64>,
    pub acc_history: Vec<f64>,
    pub gap_history: Vec<f64>,
    pub selected_history: Vec<usize>,
    /// Closed-form aggregation error of the round's schedule.
    pub agg_error_history: Vec<f64>,
    /// Realised mean squared error of the aggregated symbols.
    pub agg_mse_history: Vec<f64>,
    /// Aggregation-error budget of the round expressed as gradient-error energy.
    pub noise_budget_history: Vec<f64>,
    /// Rounds that fell back to the single best-channel device.
    pub fallback_rounds: Vec<usize>,
}

impl TrainState {
    pub fn new(params: usize) -> Self {
        Self {
            r: vec![0.0; params],
            round: 0,
            loss_history: Vec::new(),
            acc_history: Vec::new(),
            gap_history: Vec::new(),
            selected_history: Vec::new(),
            agg_error_history: Vec::new(),
            agg_mse_history: Vec::new(),
            noise_budget_history: Vec::new(),
            fallback_rounds: Vec::new(),
        }
    }
}

/// Data, model and partition shared by every round of one training run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub model: LogisticModel,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: DataPartition,
    pub lr: f64,
    pub l_lip: f64,
    /// `min L`, or zero when the gap is not tracked.
    pub optimum_loss: f64,
    pub cfg: FeelConfig,
}

impl Federation {
    pub fn new(train: Dataset, test: Dataset, n_devices: usize, cfg: &FeelConfig, rng: &mut RngStream) -> Result<Self> {
        let model = LogisticModel::for_data(&train, cfg.reg);
        let partition = partition_dirichlet(train.len(), n_devices, cfg.alpha_dir, rng)?;
        let l_lip = model.lipschitz(&train);
        let optimum_loss = if cfg.track_gap { model.minimize(&train, 200_000).1 } else { 0.0 };
        Ok(Self { lr: cfg.lr.unwrap_or(1.0 / l_lip), model, train, test, partition, l_lip, optimum_loss, cfg: cfg.clone() })
    }

    pub fn initial_state(&self) -> TrainState {
        TrainState::new(self.model.params())
    }

    fn record(&self, state: &mut TrainState) {
        let loss = self.model.loss(&state.r, &self.train, None);
        state.loss_history.push(loss);
        state.acc_history.push(self.model.accuracy(&state.r, &self.test));
        state.gap_history.push((loss - self.optimum_loss).max(0.0));
    }
}

/// Contiguous `(start, end)` ranges of at most `m` entries covering `0..d`.
pub fn block_ranges(d: usize, m: usize) -> Vec<(usize, usize)> {
    (0..d.div_ceil(m)).map(|b| (b * m, ((b + 1) * m).min(d))).collect()
}

/// Per-block shift/scale side information for a set of device updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockNormalization {
    /// `means[b][k]`: mean of device `k`'s update entries in block `b`.
    pub means: Vec<Vec<f64>>,
    /// Common scale per block, the RMS of the devices' standard deviations.
    pub scales: Vec<f64>,
}

pub fn normalize_blocks(updates: &[Vec<f64>], set: &[usize], ranges: &[(usize, usize)]) -> BlockNormalization {
    let k = updates.len();
    let mut means = Vec::with_capacity(ranges.len());
    let mut scales = Vec::with_capacity(ranges.len());
    for &(a, b) in ranges {
        let len = (b - a) as f64;
        let mut m = vec![0.0; k];
        let mut var_sum = 0.0;
        for &dev in set {
            let u = &updates[dev][a..b];
            m[dev] = u.iter().sum::<f64>() / len;
            var_sum += u.iter().map(|x| (x - m[dev]).powi(2)).sum::<f64>() / len;
        }
        let s = (var_sum / set.len().max(1) as f64).sqrt();
        means.push(m);
        scales.push(if s > 0.0 { s } else { 1.0 });
    }
    BlockNormalization { means, scales }
}

/// One communication round: schedule, local updates, uplink with echo, sensing, SIC, aggregation.
pub fn run_feel_round(
    state: &TrainState,
    fed: &Federation,
    real: &ChannelRealization,
    cfg: &SystemConfig,
    rng: &mut RngStream,
) -> Result<TrainState> {
    let fcfg = &fed.cfg;
    let k_all = real.n_devices();
    let sizes: Vec<f64> = fed.partition.sizes().iter().map(|&s| s as f64).collect();
    let sigma2 = if fcfg.noiseless { 0.0 } else { cfg.sigma2_ps };
    let mut next = state.clone();

    let mut policy_rng = RngStream::derive(rng.next_u64(), &[1]);
    let outcome = schedule(real, cfg, fcfg.policy, &sizes, Some(&mut policy_rng))?;
    let (set, c) = if outcome.feasible {
        (outcome.set.clone(), outcome.c.clone())
    } else {
        let best = (0..k_all)
            .max_by(|&a, &b| norm(&real.uplink.col(a)).total_cmp(&norm(&real.uplink.col(b))).then(b.cmp(&a)))
            .ok_or(Error::EmptyActiveSet)?;
        next.fallback_rounds.push(state.round);
        (vec![best], normalized(&real.uplink.col(best)))
    };
    let phi = renormalized_weights(&sizes, &set);
    let scaling = zf_coordination(&real.uplink, &c, &phi, &set, cfg.p_u)?;
    let agg_error = aggregation_error(&c, &set, &real.uplink, &phi, cfg)?;

    let device_seed = rng.next_u64();
    let updates: Vec<Vec<f64>> = (0..k_all)
        .into_par_iter()
        .map(|k| {
            let mut local_rng = RngStream::derive(device_seed, &[k as u64]);
            let batch = if fcfg.batch == 0 { usize::MAX } else { fcfg.batch };
            let r_k = local_update(&fed.model, &state.r, &fed.train, &fed.partition.shards[k], fcfg.local_steps, fed.lr, batch, &mut local_rng);
            r_k.iter().zip(&state.r).map(|(a, b)| a - b).collect()
        })
        .collect();

    let m = cfg.model_len;
    let l = cfg.sensing_len;
    let ranges = block_ranges(state.r.len(), m);
    let norm_info = normalize_blocks(&updates, &set, &ranges);
    let r_cov = effective_noise_cov(&real.uplink, &scaling, true, sigma2);
    let scene = Scene { g: &real.target, w: &outcome.w, f: &real.uplink, scaling: &scaling, sigma2 };
    let echo_mask = vec![fcfg.echo; m];
    let uplink_mask = vec![true; m];
    let cancel_mask = vec![fcfg.sensing != SensingMode::Off; m];

    let mut new_r = state.r.clone();
    let mut sq_err = 0.0;
    let mut budget = 0.0;
    for (b, &(start, end)) in ranges.iter().enumerate() {
        let s = norm_info.scales[b];
        let symbols = ComplexMatrix::from_fn(k_all, m, |dev, j| {
            if j < end - start && scaling.b[dev] != ZERO {
                C64::new((updates[dev][start + j] - norm_info.means[b][dev]) / s, 0.0)
            } else {
                ZERO
            }
        });
        let pilots = random_pilots(m, rng);
        let y = scene.receive(&pilots, &symbols, &echo_mask, &uplink_mask, rng);
        let g_hat = match fcfg.sensing {
            SensingMode::Estimated => {
                let window = ComplexMatrix::from_fn(y.rows(), l, |i, j| y[(i, j)]);
                estimate_from_block(&window, &outcome.w, &pilots[..l], &r_cov)?
            }
            SensingMode::Oracle => real.target.clone(),
            SensingMode::Off => ComplexMatrix::zeros(real.n_antennas(), real.n_antennas()),
        };
        let est = sic_aggregate(&y, &g_hat, &outcome.w, &pilots, &c, &scaling, &cancel_mask);
        let shift: f64 = set.iter().map(|&dev| phi[dev] * norm_info.means[b][dev]).sum();
        for j in 0..end - start {
            let want: f64 = set.iter().map(|&dev| phi[dev] * symbols[(dev, j)].re).sum();
            sq_err += (est[j].re - want).powi(2);
            new_r[start + j] += s * est[j].re + shift;
        }
        budget += (end - start) as f64 * s * s * 0.5 * cfg.eps0;
    }
    next.r = new_r;
    next.round += 1;
    next.selected_history.push(set.len());
    next.agg_error_history.push(agg_error);
    next.agg_mse_history.push(sq_err / state.r.len() as f64);
    next.noise_budget_history.push(budget / (fed.lr * fed.lr));
    fed.record(&mut next);
    Ok(next)
}

/// Full training run. Device distances stay fixed; small-scale fading is redrawn every round.
pub fn train(cfg: &SystemConfig, fed: &Federation, seed: u64) -> Result<TrainState> {
    let mut channel_rng = RngStream::derive(seed, &[0, 0]);
    let mut round_rng = RngStream::derive(seed, &[0, 1]);
    let mut real = draw_channels(cfg, &mut channel_rng)?;
    let mut state = fed.initial_state();
    for _ in 0..fed.cfg.rounds {
        real = real.redraw_fading(cfg, &mut channel_rng)?;
        state = run_feel_round(&state, fed, &real, cfg, &mut round_rng)?;
    }
    Ok(state)
}

/// Synthetic-data federation for the given configs and seed.
pub fn synthetic_federation(cfg: &SystemConfig, fcfg: &FeelConfig, seed: u64) -> Result<Federation> {
    let mut data_rng = RngStream::derive(seed, &[0, 2]);
    let data = synthetic_mixture(fcfg.samples, fcfg.dim, fcfg.classes, fcfg.separation, &mut data_rng)?;
    let (train, test) = data.split(fcfg.test_fraction, &mut data_rng);
    Federation::new(train, test, cfg.n_devices, fcfg, &mut data_rng)
}

/// Empirical check of `G_{t+1} ≤ (1 − ζ/L) G_t + ε_t/(2L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub rounds_checked: usize,
    pub rounds_holding: usize,
    pub fraction_holding: f64,
    /// Mean gap over the final quarter of the rounds.
    pub converged_gap: f64,
    /// `ε/(2ζ)` with `ε` the mean budget.
    pub fixed_point: f64,
}

/// `gaps[0]` is the gap after the first round; `budgets[t]` is the round-`t` error budget.
pub fn gap_bound_check(gaps: &[f64], zeta: f64, l_lip: f64, budgets: &[f64]) -> GapReport {
    let rounds_checked = gaps.len().saturating_sub(1);
    let rounds_holding = (0..rounds_checked)
        .filter(|&t| {
            let bound = (1.0 - zeta / l_lip) * gaps[t] + budgets[t + 1] / (2.0 * l_lip);
            gaps[t + 1] <= bound * (1.0 + 1e-12) + 1e-15
        })
        .count();
    let tail = &gaps[gaps.len() - gaps.len().div_ceil(4).max(1).min(gaps.len())..];
    let mean_budget = if budgets.is_empty() { 0.0 } else { budgets.iter().sum::<f64>() / budgets.len() as f64 };
    GapReport {
        rounds_checked,
        rounds_holding,
        fraction_holding: if rounds_checked == 0 { 1.0 } else { rounds_holding as f64 / rounds_checked as f64 },
        converged_gap: if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 },
        fixed_point: mean_budget / (2.0 * zeta),
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn blocks_tile_the_model(d in 1usize..2000, m in 1usize..300) {
            let ranges = block_ranges(d, m);
            prop_assert_eq!(ranges.len(), d.div_ceil(m));
            prop_assert_eq!(ranges[0].0, 0);
            prop_assert_eq!(ranges.last().unwrap().1, d);
            prop_assert!(ranges.windows(2).all(|w| w[0].1 == w[1].0));
            prop_assert!(ranges.iter().all(|&(a, b)| b > a && b - a <= m));
        }

        #[test]
        fn normalisation_round_trips(seed in any::<u64>(), d in 1usize..200, m in 1usize..64, k in 1usize..6) {
            let mut rng = RngStream::new(seed, 0);
            let updates: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 3.0 * rng.normal() + 1.0).collect()).collect();
            let set: Vec<usize> = (0..k).collect();
            let ranges = block_ranges(d, m);
            let norm = normalize_blocks(&updates, &set, &ranges);
            for (b, &(lo, hi)) in ranges.iter().enumerate() {
                for dev in 0..k {
                    for i in lo..hi {
                        let z = (updates[dev][i] - norm.means[b][dev]) / norm.scales[b];
                        let back = z * norm.scales[b] + norm.means[b][dev];
                        prop_assert!((back - updates[dev][i]).abs() <= 1e-12 * updates[dev][i].abs().max(1.0));
                    }
                }
            }
        }

        #[test]
        fn partition_covers_every_sample_once(seed in any::<u64>(), n in 1usize..500, k in 1usize..30, alpha in 0.05f64..10.0) {
            prop_assume!(k <= n);
            let p = partition_dirichlet(n, k, alpha, &mut RngStream::new(seed, 0)).unwrap();
            prop_assert_eq!(p.shards.len(), k);
            prop_assert!(p.shards.iter().all(|s| !s.is_empty()));
            let mut all: Vec<usize> = p.shards.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
