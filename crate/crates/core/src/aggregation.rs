//! Over-the-air aggregation: zero-forcing transmit coordination, echo
//! cancellation and the closed-form aggregation error.

use crate::channel::{ChannelRealization, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{dot_h, norm_sqr, ComplexMatrix, RngStream, C64, ZERO};
use crate::sensing::{
    effective_noise_cov, estimate_from_block, gaussian_symbols, precoder_column, random_pilots, Scene,
    UplinkScaling,
};

/// Relative inner-product floor below which a device counts as orthogonal to `c`.
pub const ORTHOGONAL_TOL: f64 = 1e-12;

/// Closed-form and simulated aggregation error for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationReport {
    pub error_closed_form: f64,
    pub error_monte_carlo: f64,
    pub eta: f64,
    pub residual_zf: f64,
}

fn inner_products(c: &[C64], f: &ComplexMatrix, set: &[usize]) -> Result<Vec<C64>> {
    if set.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    set.iter()
        .map(|&k| {
            let fk = f.col(k);
            let g = dot_h(c, &fk);
            if g.norm() < ORTHOGONAL_TOL * norm_sqr(&fk).sqrt() || g.norm() == 0.0 {
                Err(Error::OrthogonalDevice { device: k, gain: g.norm() })
            } else {
                Ok(g)
            }
        })
        .collect()
}

/// Zero-forcing scalings `b_k = φ_k √η / (c^H f_k)` with `η = P_u min_k |c^H f_k|² / φ_k²`.
///
/// `phi` is indexed by device; entries outside `set` are ignored and zeroed.
pub fn zf_coordination(f: &ComplexMatrix, c: &[C64], phi: &[f64], set: &[usize], p_u: f64) -> Result<UplinkScaling> {
    let gains = inner_products(c, f, set)?;
    if let Some(&k) = set.iter().find(|&&k| phi[k] <= 0.0) {
        return Err(Error::invalid(format!("device {k} is scheduled with non-positive weight")));
    }
    let eta = p_u
        * set
            .iter()
            .zip(&gains)
            .map(|(&k, g)| g.norm_sqr() / (phi[k] * phi[k]))
            .fold(f64::INFINITY, f64::min);
    let k_all = f.cols();
    let mut b = vec![ZERO; k_all];
    let mut weights = vec![0.0; k_all];
    for (&k, g) in set.iter().zip(&gains) {
        b[k] = C64::new(phi[k] * eta.sqrt(), 0.0) / g;
        weights[k] = phi[k];
    }
    Ok(UplinkScaling { b, eta, phi: weights })
}

/// `‖(1/√η) c^H F B − φ^T‖²`, zero under exact zero-forcing.
pub fn zf_residual(f: &ComplexMatrix, c: &[C64], scaling: &UplinkScaling) -> f64 {
    let root = scaling.eta.sqrt();
    (0..f.cols())
        .map(|k| (dot_h(c, &f.col(k)) * scaling.b[k] / root - scaling.phi[k]).norm_sqr())
        .sum()
}

/// `E(c,S) = (1 + N/L) σ²/P_u · max_k φ_k² ‖c‖² / |c^H f_k|² + (N/L) Σ_k φ_k²`.
pub fn aggregation_error(c: &[C64], set: &[usize], f: &ComplexMatrix, phi: &[f64], cfg: &SystemConfig) -> Result<f64> {
    aggregation_error_with_echo(c, set, f, phi, cfg, 1.0)
}

/// Aggregation error when echoes are present in a fraction `echo_fraction` of the intervals.
pub fn aggregation_error_with_echo(
    c: &[C64],
    set: &[usize],
    f: &ComplexMatrix,
    phi: &[f64],
    cfg: &SystemConfig,
    echo_fraction: f64,
) -> Result<f64> {
    let gains = inner_products(c, f, set)?;
    let c2 = norm_sqr(c);
    let worst = set
        .iter()
        .zip(&gains)
        .map(|(&k, g)| phi[k] * phi[k] * c2 / g.norm_sqr())
        .fold(0.0, f64::max);
    let ratio = cfg.n_antennas as f64 / cfg.sensing_len as f64 * echo_fraction;
    let phi2: f64 = set.iter().map(|&k| phi[k] * phi[k]).sum();
    Ok((1.0 + ratio) * cfg.sigma2_ps / cfg.p_u * worst + ratio * phi2)
}

/// Cancels the estimated echo and applies the receive beamformer:
/// `r̂[m] = c^H (y[m] − β_s[m] Ĝ w[m] x[m]) / √η`.
pub fn sic_aggregate(
    y: &ComplexMatrix,
    g_hat: &ComplexMatrix,
    w: &ComplexMatrix,
    pilots: &[C64],
    c: &[C64],
    scaling: &UplinkScaling,
    beta_s: &[bool],
) -> Vec<C64> {
    let root = scaling.eta.sqrt();
    (0..y.cols())
        .map(|m| {
            let mut col = y.col(m);
            if beta_s[m] {
                let echo = g_hat.matvec(&precoder_column(w, m));
                for (v, e) in col.iter_mut().zip(echo) {
                    *v -= e * pilots[m];
                }
            }
            dot_h(c, &col) / root
        })
        .collect()
}

/// Variance of the post-cancellation error in one interval:
/// `(β_s/η)(c^H ⊗ w^T) C (c ⊗ w*) + ‖c‖² σ²/η`.
pub fn error_process_variance(
    c: &[C64],
    w_col: &[C64],
    cov: &ComplexMatrix,
    eta: f64,
    sigma2_ps: f64,
    beta_s: f64,
) -> f64 {
    let v: Vec<C64> = c.iter().flat_map(|&ci| w_col.iter().map(move |wj| ci * wj.conj())).collect();
    let echo = if beta_s == 0.0 { 0.0 } else { beta_s / eta * cov.quad_form(&v) };
    (echo + norm_sqr(c) * sigma2_ps / eta).max(0.0)
}

/// Desired aggregate `Σ_k φ_k r_k[m]` for every interval.
pub fn target_aggregate(symbols: &ComplexMatrix, phi: &[f64]) -> Vec<C64> {
    (0..symbols.cols())
        .map(|m| (0..symbols.rows()).map(|k| symbols[(k, m)] * phi[k]).sum())
        .collect()
}

/// Simulates sensing followed by aggregation and compares against the closed form.
///
/// Each block estimates `Ĝ` from `L` fresh samples and is then used to cancel
/// the echo on `intervals` further samples that reuse the block's precoder columns.
pub fn verify_aggregation(
    cfg: &SystemConfig,
    real: &ChannelRealization,
    w: &ComplexMatrix,
    c: &[C64],
    set: &[usize],
    phi: &[f64],
    blocks: usize,
    intervals: usize,
    rng: &mut RngStream,
) -> Result<AggregationReport> {
    let scaling = zf_coordination(&real.uplink, c, phi, set, cfg.p_u)?;
    let closed = aggregation_error(c, set, &real.uplink, phi, cfg)?;
    let r = effective_noise_cov(&real.uplink, &scaling, true, cfg.sigma2_ps);
    let scene = Scene { g: &real.target, w, f: &real.uplink, scaling: &scaling, sigma2: cfg.sigma2_ps };
    let l = w.cols();
    let k = real.n_devices();
    let (on_l, on_m) = (vec![true; l], vec![true; intervals]);
    let mut total = 0.0;
    for _ in 0..blocks {
        let pilots = random_pilots(l, rng);
        let symbols = gaussian_symbols(k, l, rng);
        let y = scene.receive(&pilots, &symbols, &on_l, &on_l, rng);
        let g_hat = estimate_from_block(&y, w, &pilots, &r)?;

        let pilots = random_pilots(intervals, rng);
        let symbols = gaussian_symbols(k, intervals, rng);
        let y = scene.receive(&pilots, &symbols, &on_m, &on_m, rng);
        let est = sic_aggregate(&y, &g_hat, w, &pilots, c, &scaling, &on_m);
        let want = target_aggregate(&symbols, &scaling.phi);
        total += est.iter().zip(&want).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
    }
    Ok(AggregationReport {
        error_closed_form: closed,
        error_monte_carlo: total / (blocks * intervals) as f64,
        eta: scaling.eta,
        residual_zf: zf_residual(&real.uplink, c, &scaling),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_channels;
    use crate::numerics::{normalized, sample_complex_gaussian, ONE};
    use crate::sensing::ml_error_covariance;

    fn dft_precoder(n: usize, l: usize, power: f64) -> ComplexMatrix {
        let s = (power / n as f64).sqrt();
        ComplexMatrix::from_fn(n, l, |i, j| {
            C64::from_polar(s, -2.0 * std::f64::consts::PI * (i * j) as f64 / l as f64)
        })
    }

    fn uniform_phi(k: usize, set: &[usize]) -> Vec<f64> {
        let mut phi = vec![0.0; k];
        for &i in set {
            phi[i] = 1.0 / set.len() as f64;
        }
        phi
    }

    #[test]
    fn single_device_saturates_power() {
        let f = ComplexMatrix::from_columns(&[vec![C64::new(2.0, 0.0), ZERO]]);
        let s = zf_coordination(&f, &[ONE, ZERO], &[1.0], &[0], 1.0).unwrap();
        assert!((s.eta - 4.0).abs() < 1e-15);
        assert!((s.b[0] - ONE).norm() < 1e-15);
    }

    #[test]
    fn weakest_device_transmits_at_full_power() {
        let f = ComplexMatrix::from_columns(&[vec![C64::new(2.0, 0.0), ZERO], vec![ONE, ZERO]]);
        let p_u = 0.3;
        let s = zf_coordination(&f, &[ONE, ZERO], &[0.5, 0.5], &[0, 1], p_u).unwrap();
        assert!((s.eta - 4.0 * p_u).abs() < 1e-15);
        assert!((s.b[1].norm_sqr() - p_u).abs() < 1e-15);
        assert!(s.b[0].norm_sqr() < p_u);
    }

    #[test]
    fn orthogonal_device_is_reported() {
        let f = ComplexMatrix::from_columns(&[vec![ONE, ZERO], vec![ZERO, ONE]]);
        match zf_coordination(&f, &[ONE, ZERO], &[0.5, 0.5], &[0, 1], 1.0) {
            Err(Error::OrthogonalDevice { device, .. }) => assert_eq!(device, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(zf_coordination(&f, &[ONE, ZERO], &[1.0, 0.0], &[], 1.0), Err(Error::EmptyActiveSet)));
    }

    #[test]
    fn zero_forcing_residual_vanishes() {
        let cfg = SystemConfig::default();
        let mut rng = RngStream::new(1, 0);
        for _ in 0..100 {
            let real = draw_channels(&cfg, &mut rng).unwrap();
            let c = normalized(&sample_complex_gaussian(&mut rng, cfg.n_antennas, 1.0));
            let set: Vec<usize> = (0..cfg.n_devices).filter(|_| rng.uniform() < 0.6).collect();
            if set.is_empty() {
                continue;
            }
            let phi = uniform_phi(cfg.n_devices, &set);
            let s = zf_coordination(&real.uplink, &c, &phi, &set, cfg.p_u).unwrap();
            assert!(zf_residual(&real.uplink, &c, &s) <= 1e-12);
            let max_power = set.iter().map(|&k| s.b[k].norm_sqr()).fold(0.0, f64::max);
            assert!(set.iter().all(|&k| s.b[k].norm_sqr() <= cfg.p_u * (1.0 + 1e-12)));
            assert!((max_power - cfg.p_u).abs() <= 1e-12 * cfg.p_u);
        }
    }

    #[test]
    fn closed_form_examples() {
        let cfg = SystemConfig {
            n_antennas: 2,
            sensing_len: 2,
            model_len: 2,
            p_u: 1.0,
            sigma2_ps: 1.0,
            ..SystemConfig::default()
        };
        let f = ComplexMatrix::from_columns(&[vec![C64::new(2.0, 0.0), ZERO]]);
        let e = aggregation_error(&[ONE, ZERO], &[0], &f, &[1.0], &cfg).unwrap();
        assert!((e - 1.5).abs() < 1e-15);

        let long = SystemConfig { sensing_len: 1 << 30, model_len: 1 << 30, ..cfg };
        let e = aggregation_error(&[ONE, ZERO], &[0], &f, &[1.0], &long).unwrap();
        assert!((e - 0.25).abs() < 1e-8);
        assert!(aggregation_error(&[ONE, ZERO], &[], &f, &[1.0], &cfg).is_err());
    }

    #[test]
    fn closed_form_matches_simulation() {
        let cfg = SystemConfig::default();
        let mut rng = RngStream::new(2, 0);
        let real = draw_channels(&SystemConfig { d_target: 10.0, ..cfg.clone() }, &mut rng).unwrap();
        let w = dft_precoder(cfg.n_antennas, cfg.sensing_len, cfg.p_d);
        let set: Vec<usize> = (0..6).collect();
        let phi = uniform_phi(cfg.n_devices, &set);
        let c = normalized(&real.uplink.col(0));
        let report = verify_aggregation(&cfg, &real, &w, &c, &set, &phi, 1000, 100, &mut rng).unwrap();
        let rel = (report.error_monte_carlo / report.error_closed_form - 1.0).abs();
        assert!(rel < 0.03, "{report:?}");
        assert!(report.residual_zf <= 1e-12);
    }

    #[test]
    fn perfect_cancellation_recovers_the_aggregate() {
        let cfg = SystemConfig { sigma2_ps: 0.0, ..SystemConfig::default() };
        let mut rng = RngStream::new(3, 0);
        let real = draw_channels(&SystemConfig::default(), &mut rng).unwrap();
        let w = dft_precoder(cfg.n_antennas, cfg.sensing_len, cfg.p_d);
        let set = [1, 4, 7];
        let phi = uniform_phi(cfg.n_devices, &set);
        let c = normalized(&real.uplink.col(4));
        let s = zf_coordination(&real.uplink, &c, &phi, &set, cfg.p_u).unwrap();
        let scene = Scene { g: &real.target, w: &w, f: &real.uplink, scaling: &s, sigma2: 0.0 };
        let m = cfg.model_len;
        let pilots = random_pilots(m, &mut rng);
        let symbols = gaussian_symbols(cfg.n_devices, m, &mut rng);
        let mask = vec![true; m];
        let y = scene.receive(&pilots, &symbols, &mask, &mask, &mut rng);
        let est = sic_aggregate(&y, &real.target, &w, &pilots, &c, &s, &mask);
        let want = target_aggregate(&symbols, &s.phi);
        for (a, b) in est.iter().zip(&want) {
            assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
        }
    }

    #[test]
    fn cancellation_helps_and_is_ignored_without_echo() {
        let cfg = SystemConfig { d_target: 5.0, ..SystemConfig::default() };
        let mut rng = RngStream::new(4, 0);
        let real = draw_channels(&cfg, &mut rng).unwrap();
        let w = dft_precoder(cfg.n_antennas, cfg.sensing_len, cfg.p_d);
        let set = [0, 2];
        let phi = uniform_phi(cfg.n_devices, &set);
        let c = normalized(&real.uplink.col(0));
        let s = zf_coordination(&real.uplink, &c, &phi, &set, cfg.p_u).unwrap();
        let scene = Scene { g: &real.target, w: &w, f: &real.uplink, scaling: &s, sigma2: cfg.sigma2_ps };
        let m = 64;
        let pilots = random_pilots(m, &mut rng);
        let symbols = gaussian_symbols(cfg.n_devices, m, &mut rng);
        let on = vec![true; m];
        let y = scene.receive(&pilots, &symbols, &on, &on, &mut rng);
        let want = target_aggregate(&symbols, &s.phi);
        let zero = ComplexMatrix::zeros(cfg.n_antennas, cfg.n_antennas);
        let with = sic_aggregate(&y, &real.target, &w, &pilots, &c, &s, &on);
        let without = sic_aggregate(&y, &zero, &w, &pilots, &c, &s, &on);
        let err = |est: &[C64]| est.iter().zip(&want).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        assert!(err(&without) > err(&with), "{} vs {}", err(&without), err(&with));
        let off = vec![false; m];
        let a = sic_aggregate(&y, &real.target, &w, &pilots, &c, &s, &off);
        let b = sic_aggregate(&y, &zero, &w, &pilots, &c, &s, &off);
        assert_eq!(a, b);
    }

    #[test]
    fn error_variance_examples() {
        let c = [ONE];
        let v = error_process_variance(&c, &[ONE], &ComplexMatrix::identity(1), 2.0, 1.0, 0.0);
        assert!((v - 0.5).abs() < 1e-15);
        // Scalar case: C = ½ R (W*W^T)⁻¹ with R = W = 1 gives (½ + σ²)/η.
        let cov = ComplexMatrix::identity(1).scale(0.5);
        let v = error_process_variance(&c, &[ONE], &cov, 2.0, 1.0, 1.0);
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn error_variance_matches_simulated_estimation_error() {
        let cfg = SystemConfig { sensing_len: 128, model_len: 128, d_target: 20.0, ..SystemConfig::default() };
        let mut rng = RngStream::new(5, 0);
        let real = draw_channels(&cfg, &mut rng).unwrap();
        let l = cfg.sensing_len;
        let w = dft_precoder(cfg.n_antennas, l, cfg.p_d);
        let set = [0, 1, 2];
        let phi = uniform_phi(cfg.n_devices, &set);
        let c = normalized(&real.uplink.col(1));
        let s = zf_coordination(&real.uplink, &c, &phi, &set, cfg.p_u).unwrap();
        let r = effective_noise_cov(&real.uplink, &s, true, cfg.sigma2_ps);
        let cov = ml_error_covariance(&r, &w).unwrap();
        let scene = Scene { g: &real.target, w: &w, f: &real.uplink, scaling: &s, sigma2: cfg.sigma2_ps };
        let on = vec![true; l];
        let probe = 5;
        let w_col = precoder_column(&w, probe);
        let trials = 20_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let pilots = random_pilots(l, &mut rng);
            let symbols = gaussian_symbols(cfg.n_devices, l, &mut rng);
            let y = scene.receive(&pilots, &symbols, &on, &on, &mut rng);
            let g_hat = estimate_from_block(&y, &w, &pilots, &r).unwrap();
            let diff = &real.target - &g_hat;
            let echo = dot_h(&c, &diff.matvec(&w_col)) / s.eta.sqrt();
            let noise = dot_h(&c, &sample_complex_gaussian(&mut rng, cfg.n_antennas, cfg.sigma2_ps)) / s.eta.sqrt();
            acc += (echo + noise).norm_sqr();
        }
        let mc = acc / trials as f64;
        let formula = error_process_variance(&c, &w_col, &cov, s.eta, cfg.sigma2_ps, 1.0);
        assert!((mc / formula - 1.0).abs() < 0.05, "mc {mc} formula {formula}");
    }
}
