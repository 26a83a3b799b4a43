//! Oracle checks run by the `selftest` subcommand.

use std::path::PathBuf;

use crate::aggregation::{zf_coordination, zf_residual};
use crate::channel::{draw_channels, SystemConfig};
use crate::error::Result;
use crate::fedlearn::FeelConfig;
use crate::numerics::{hermitian_eig, normalized, sample_complex_gaussian, ComplexMatrix, RngStream, ONE};
use crate::scheduler::{
    check_constraints, overall_penalty_matrix, penalty_ck, solve_precoder_m1, solve_receiver_m2, Policy,
    DUALITY_GAP_TOL,
};
use crate::sensing::{crb, crb_covariance, effective_noise_cov, fisher_information, ml_estimate_g, whitening_filter};

use super::config::{DatasetSource, SweepVariable};
use super::experiment::{run_trials, summarize, trial_realization, ExperimentSpec};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn random_matrix(r: usize, c: usize, rng: &mut RngStream) -> ComplexMatrix {
    ComplexMatrix::from_vec(r, c, sample_complex_gaussian(rng, r * c, 1.0)).expect("shape")
}

fn relative(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    (a - b).frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

fn whitening(cfg: &SystemConfig, rng: &mut RngStream) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let real = draw_channels(cfg, rng)?;
        let c = normalized(&sample_complex_gaussian(rng, cfg.n_antennas, 1.0));
        let phi = vec![1.0 / cfg.n_devices as f64; cfg.n_devices];
        let all: Vec<usize> = (0..cfg.n_devices).collect();
        let s = zf_coordination(&real.uplink, &c, &phi, &all, cfg.p_u)?;
        let r = effective_noise_cov(&real.uplink, &s, true, cfg.sigma2_ps);
        let t = whitening_filter(&r)?;
        worst = worst.max(relative(&(&(&t * &r) * &t.adjoint()), &ComplexMatrix::identity(cfg.n_antennas)));
    }
    Ok(CheckResult::new("whitening", worst < 1e-9, format!("max |T R T^H - I| / |I| = {worst:.2e}")))
}

fn noiseless_recovery(cfg: &SystemConfig, rng: &mut RngStream) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let real = draw_channels(cfg, rng)?;
        let w = random_matrix(cfg.n_antennas, cfg.sensing_len, rng);
        let pilots = vec![ONE; cfg.sensing_len];
        let y = &real.target * &w;
        let g = ml_estimate_g(&y, &w, &pilots, &ComplexMatrix::identity(cfg.n_antennas))?;
        worst = worst.max(relative(&g, &real.target));
    }
    Ok(CheckResult::new("noiseless recovery", worst < 1e-9, format!("max relative error {worst:.2e}")))
}

fn fisher_identity(cfg: &SystemConfig, rng: &mut RngStream) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for _ in 0..5 {
        let n = 4;
        let a = random_matrix(n, n, rng);
        let r = (&(&a * &a.adjoint()) + &ComplexMatrix::identity(n)).hermitian_part();
        let w = random_matrix(n, cfg.sensing_len.max(n), rng);
        let inv = fisher_information(&r, &w)?.inverse()?;
        let cov = crb_covariance(&r, &w)?;
        worst = worst.max(relative(&inv, &cov));
        worst = worst.max((cov.trace().re - crb(&r, &w)?).abs() / cov.trace().re);
    }
    Ok(CheckResult::new("Fisher inverse equals CRB covariance", worst < 1e-9, format!("max relative error {worst:.2e}")))
}

fn zf_exact(cfg: &SystemConfig, rng: &mut RngStream) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let real = draw_channels(cfg, rng)?;
        let c = normalized(&sample_complex_gaussian(rng, cfg.n_antennas, 1.0));
        let phi = vec![1.0 / cfg.n_devices as f64; cfg.n_devices];
        let all: Vec<usize> = (0..cfg.n_devices).collect();
        let s = zf_coordination(&real.uplink, &c, &phi, &all, cfg.p_u)?;
        worst = worst.max(zf_residual(&real.uplink, &c, &s));
    }
    Ok(CheckResult::new("zero-forcing residual", worst < 1e-20, format!("max residual {worst:.2e}")))
}

fn precoder_checks(cfg: &SystemConfig, rng: &mut RngStream) -> Result<Vec<CheckResult>> {
    let real = draw_channels(cfg, rng)?;
    let open = SystemConfig { gamma: 0.0, ..cfg.clone() };
    let sol = solve_precoder_m1(&real.downlink, &open)?;
    let iso = ComplexMatrix::identity(cfg.n_antennas).scale(cfg.sensing_len as f64 * cfg.p_d / cfg.n_antennas as f64);
    let dev = relative(&sol.q, &iso);
    let mut out = vec![CheckResult::new("precoder without floor is isotropic", dev < 1e-9, format!("relative deviation {dev:.2e}"))];

    let mut worst_gap = 0.0_f64;
    let mut worst_power = 0.0_f64;
    for _ in 0..20 {
        let real = draw_channels(cfg, rng)?;
        let sol = solve_precoder_m1(&real.downlink, cfg)?;
        worst_gap = worst_gap.max(sol.duality_gap);
        let budget = cfg.sensing_len as f64 * cfg.p_d;
        worst_power = worst_power.max((sol.q.trace().re - budget).abs() / budget);
    }
    out.push(CheckResult::new("precoder duality gap", worst_gap <= DUALITY_GAP_TOL, format!("max gap {worst_gap:.2e}")));
    out.push(CheckResult::new("precoder spends full power", worst_power < 1e-9, format!("max relative slack {worst_power:.2e}")));
    Ok(out)
}

fn receiver_checks(cfg: &SystemConfig, rng: &mut RngStream) -> Result<Vec<CheckResult>> {
    let mut worst_opt = f64::NEG_INFINITY;
    let mut worst_eq = 0.0_f64;
    for _ in 0..10 {
        let real = draw_channels(cfg, rng)?;
        let set: Vec<usize> = (0..cfg.n_devices).collect();
        let phi = vec![1.0 / cfg.n_devices as f64; cfg.n_devices];
        let tau = vec![1.0; cfg.n_devices];
        let m = overall_penalty_matrix(&real.uplink, &set, &phi, &tau, cfg);
        let c = solve_receiver_m2(&real.uplink, &set, &phi, &tau, cfg)?;
        let best = m.quad_form(&c);
        let lambda_min = hermitian_eig(&m)?.min();
        let scale = m.max_abs();
        worst_opt = worst_opt.max((best - lambda_min).abs() / scale);
        for _ in 0..50 {
            let v = normalized(&sample_complex_gaussian(rng, cfg.n_antennas, 1.0));
            worst_opt = worst_opt.max((best - m.quad_form(&v)) / scale);
        }
        let v = sample_complex_gaussian(rng, cfg.n_antennas, 1.0);
        let sum: f64 = set.iter().map(|&k| tau[k] * penalty_ck(&v, k, &real.uplink, &phi, &set, cfg)).sum();
        let quad = m.quad_form(&v);
        worst_eq = worst_eq.max((sum - quad).abs() / quad.abs().max(scale));
    }
    Ok(vec![
        CheckResult::new(
            "receiver is the penalty minimiser",
            worst_opt <= 1e-9,
            format!("max excess over minimum {worst_opt:.2e}"),
        ),
        CheckResult::new(
            "weighted penalties equal the penalty quadratic form",
            worst_eq < 1e-9,
            format!("max relative mismatch {worst_eq:.2e}"),
        ),
    ])
}

/// Runs a small sweep, re-verifies every feasible outcome with the
/// independent constraint checker and recounts the feasibility rates.
fn sweep_recheck(cfg: &SystemConfig) -> Result<Vec<CheckResult>> {
    let spec = ExperimentSpec {
        variable: SweepVariable::Eps0,
        values: vec![100.0, 300.0],
        trials: 8,
        policies: Policy::ALL.to_vec(),
        out: PathBuf::new(),
        base: cfg.clone(),
        feel: FeelConfig::default(),
        dataset: DatasetSource::Synthetic,
        sensing_blocks: 0,
        train: false,
    };
    let records = run_trials(&spec)?;
    let rows = summarize(&spec, &records);
    let base = vec![1.0; cfg.n_devices];
    let (mut checked, mut violations) = (0, 0);
    for r in records.iter().filter(|r| r.feasible) {
        let out = r.outcome.as_ref().expect("feasible trials keep their outcome");
        let vcfg = spec.variable.apply(cfg, spec.values[r.value_index])?;
        let real = trial_realization(&vcfg, r.trial)?;
        checked += 1;
        if !check_constraints(out, &real, &base, &vcfg)?.all() {
            violations += 1;
        }
    }
    let mismatched = rows
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let (vi, pi) = (i / spec.policies.len(), i % spec.policies.len());
            let cell: Vec<_> = records.iter().filter(|r| r.value_index == vi && r.policy_index == pi).collect();
            let rate = cell.iter().filter(|r| r.feasible).count() as f64 / cell.len() as f64;
            rate != row.feasible_rate
        })
        .count();
    Ok(vec![
        CheckResult::new(
            "sweep outcomes satisfy every constraint",
            violations == 0 && checked > 0,
            format!("{checked} feasible outcomes rechecked, {violations} violations"),
        ),
        CheckResult::new("sweep feasibility rates", mismatched == 0, format!("{mismatched} rows disagree with raw records")),
    ])
}

/// Runs every check at configuration `cfg`.
pub fn run_selftest(cfg: &SystemConfig) -> Result<Vec<CheckResult>> {
    let mut rng = RngStream::derive(cfg.seed, &[0x5e1f]);
    let mut out = vec![
        whitening(cfg, &mut rng)?,
        noiseless_recovery(cfg, &mut rng)?,
        fisher_identity(cfg, &mut rng)?,
        zf_exact(cfg, &mut rng)?,
    ];
    out.extend(precoder_checks(cfg, &mut rng)?);
    out.extend(receiver_checks(cfg, &mut rng)?);
    out.extend(sweep_recheck(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass() {
        let results = run_selftest(&SystemConfig::default()).unwrap();
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
        assert!(results.len() >= 10);
    }
}
