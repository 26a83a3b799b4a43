//! Target-response estimation from downlink echoes: effective noise, whitening,
//! the maximum-likelihood estimator, Fisher information and the CRB metric.

use crate::channel::{ChannelRealization, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{inv_sqrt, numerical_rank, pinv, ComplexMatrix, RngStream, C64, ZERO};

/// Device transmit scalings, receive power scaling and aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkScaling {
    pub b: Vec<C64>,
    pub eta: f64,
    pub phi: Vec<f64>,
}

impl UplinkScaling {
    /// No device transmits.
    pub fn silent(k: usize) -> Self {
        Self { b: vec![ZERO; k], eta: 1.0, phi: vec![0.0; k] }
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.b.len()).filter(|&k| self.b[k] != ZERO).collect()
    }
}

/// Covariance of echo-free received samples: `β_c F B B^H F^H + σ² I`.
pub fn effective_noise_cov(f: &ComplexMatrix, scaling: &UplinkScaling, beta_c: bool, sigma2: f64) -> ComplexMatrix {
    let n = f.rows();
    let mut r = ComplexMatrix::identity(n).scale(sigma2);
    if !beta_c {
        return r;
    }
    for (k, &b) in scaling.b.iter().enumerate() {
        if b == ZERO {
            continue;
        }
        let p = b.norm_sqr();
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] += f[(i, k)] * f[(j, k)].conj() * p;
            }
        }
    }
    r.hermitian_part()
}

/// `T = R^{-1/2}`, so that `T R T^H = I`.
pub fn whitening_filter(r: &ComplexMatrix) -> Result<ComplexMatrix> {
    inv_sqrt(r)
}

/// Pseudo-random ±1 pilot symbols.
pub fn random_pilots(len: usize, rng: &mut RngStream) -> Vec<C64> {
    (0..len).map(|_| C64::new(rng.sign(), 0.0)).collect()
}

/// `W D` with `D = diag(x)`.
fn precoded_pilots(w: &ComplexMatrix, pilots: &[C64]) -> Result<ComplexMatrix> {
    if pilots.len() != w.cols() {
        return Err(Error::Dimension(format!("{} pilots for {} precoder columns", pilots.len(), w.cols())));
    }
    Ok(ComplexMatrix::from_fn(w.rows(), w.cols(), |i, l| w[(i, l)] * pilots[l]))
}

/// Maximum-likelihood estimate `Ĝ = T⁻¹ (T Y) (W D)⁺` from one sensing block.
pub fn ml_estimate_g(y: &ComplexMatrix, w: &ComplexMatrix, pilots: &[C64], t: &ComplexMatrix) -> Result<ComplexMatrix> {
    if y.rows() != w.rows() || y.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "block is {}x{}, precoder is {}x{}",
            y.rows(),
            y.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let wd = precoded_pilots(w, pilots)?;
    let rank = numerical_rank(&wd);
    if rank < w.rows() {
        return Err(Error::RankDeficient { rank, required: w.rows() });
    }
    let whitened = t * y;
    Ok(&(&t.inverse()? * &whitened) * &pinv(&wd))
}

/// Estimates `Ĝ` from a block, whitening with `R` when it is invertible.
///
/// The estimate does not depend on the whitening filter, so a singular `R`
/// (noise-free simulations) falls back to `T = I`.
pub fn estimate_from_block(y: &ComplexMatrix, w: &ComplexMatrix, pilots: &[C64], r: &ComplexMatrix) -> Result<ComplexMatrix> {
    let t = match whitening_filter(r) {
        Ok(t) => t,
        Err(Error::IllConditioned { .. }) => ComplexMatrix::identity(r.rows()),
        Err(e) => return Err(e),
    };
    ml_estimate_g(y, w, pilots, &t)
}

/// `W* W^T`, the precoder Gram matrix appearing in the Fisher information.
pub fn precoder_gram(w: &ComplexMatrix) -> ComplexMatrix {
    (&w.conj() * &w.transpose()).hermitian_part()
}

fn inverse_precoder_gram(w: &ComplexMatrix) -> Result<ComplexMatrix> {
    precoder_gram(w)
        .inverse()
        .map_err(|_| Error::Singular("precoder does not excite every antenna dimension".into()))
}

/// `½ tr(R) tr((W* W^T)⁻¹)`.
pub fn crb(r: &ComplexMatrix, w: &ComplexMatrix) -> Result<f64> {
    let inv = inverse_precoder_gram(w)?;
    Ok(0.5 * r.trace().re * inv.trace().re)
}

/// `I(G) = 2 R⁻¹ ⊗ W* W^T` over the row-major vectorisation of `G`.
pub fn fisher_information(r: &ComplexMatrix, w: &ComplexMatrix) -> Result<ComplexMatrix> {
    let r_inv = r.inverse()?;
    Ok(r_inv.kron(&precoder_gram(w)).scale(2.0).hermitian_part())
}

/// Inverse Fisher information `½ R ⊗ (W* W^T)⁻¹`.
pub fn crb_covariance(r: &ComplexMatrix, w: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(r.kron(&inverse_precoder_gram(w)?).scale(0.5))
}

/// Exact error covariance of the ML estimator, `E[vec(Ĝ−G) vec(Ĝ−G)^H] = R ⊗ (W* W^T)⁻¹`.
///
/// This is twice [`crb_covariance`]: the Fisher matrix above is the curvature
/// along real directions, so its inverse covers the real (or imaginary) part of
/// the error only.
pub fn ml_error_covariance(r: &ComplexMatrix, w: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(r.kron(&inverse_precoder_gram(w)?))
}

/// Precoder column used in interval `m` (columns repeat every `L` intervals).
pub fn precoder_column(w: &ComplexMatrix, m: usize) -> Vec<C64> {
    w.col(m % w.cols())
}

/// Everything needed to synthesise received samples.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub g: &'a ComplexMatrix,
    pub w: &'a ComplexMatrix,
    pub f: &'a ComplexMatrix,
    pub scaling: &'a UplinkScaling,
    pub sigma2: f64,
}

impl Scene<'_> {
    /// Received samples `y[m] = β_s G w[m] x[m] + β_c F B r[m] + z[m]`.
    ///
    /// `symbols` is `K×M` (row `k` holds device `k`'s stream); masks and pilots have length `M`.
    pub fn receive(
        &self,
        pilots: &[C64],
        symbols: &ComplexMatrix,
        beta_s: &[bool],
        beta_c: &[bool],
        rng: &mut RngStream,
    ) -> ComplexMatrix {
        let (n, m) = (self.f.rows(), symbols.cols());
        let active = self.scaling.active();
        let mut y = ComplexMatrix::zeros(n, m);
        for l in 0..m {
            if beta_s[l] {
                let gw = self.g.matvec(&precoder_column(self.w, l));
                for i in 0..n {
                    y[(i, l)] += gw[i] * pilots[l];
                }
            }
            if beta_c[l] {
                for &k in &active {
                    let s = self.scaling.b[k] * symbols[(k, l)];
                    for i in 0..n {
                        y[(i, l)] += self.f[(i, k)] * s;
                    }
                }
            }
            for i in 0..n {
                y[(i, l)] += rng.complex_normal(self.sigma2);
            }
        }
        y
    }
}

/// Unit-variance complex Gaussian model symbols, `K×len`.
pub fn gaussian_symbols(k: usize, len: usize, rng: &mut RngStream) -> ComplexMatrix {
    ComplexMatrix::from_fn(k, len, |_, _| rng.complex_normal(1.0))
}

/// Result of one sensing evaluation.
#[derive(Debug, Clone)]
pub struct SensingEstimate {
    pub g_hat: ComplexMatrix,
    pub crb: f64,
    /// Mean `‖G − Ĝ‖²_F` over the Monte-Carlo trials.
    pub empirical_mse: Option<f64>,
    /// Mean `‖G − Ĝ‖²_F / ‖G‖²_F`.
    pub relative_mse: Option<f64>,
}

/// Runs `trials` independent sensing blocks and reports the last estimate with averaged errors.
pub fn sense(
    cfg: &SystemConfig,
    real: &ChannelRealization,
    w: &ComplexMatrix,
    scaling: &UplinkScaling,
    beta_c: bool,
    trials: usize,
    rng: &mut RngStream,
) -> Result<SensingEstimate> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let l = w.cols();
    let r = effective_noise_cov(&real.uplink, scaling, beta_c, cfg.sigma2_ps);
    let scene = Scene { g: &real.target, w, f: &real.uplink, scaling, sigma2: cfg.sigma2_ps };
    let beta_s = vec![true; l];
    let beta_c_mask = vec![beta_c; l];
    let g_norm = real.target.frobenius_norm_sqr();
    let mut total = 0.0;
    let mut g_hat = ComplexMatrix::zeros(w.rows(), w.rows());
    for _ in 0..trials {
        let pilots = random_pilots(l, rng);
        let symbols = gaussian_symbols(real.n_devices(), l, rng);
        let y = scene.receive(&pilots, &symbols, &beta_s, &beta_c_mask, rng);
        g_hat = estimate_from_block(&y, w, &pilots, &r)?;
        total += (&g_hat - &real.target).frobenius_norm_sqr();
    }
    let mse = total / trials as f64;
    Ok(SensingEstimate {
        g_hat,
        crb: crb(&r, w)?,
        empirical_mse: Some(mse),
        relative_mse: (g_norm > 0.0).then(|| mse / g_norm),
    })
}

/// Mean `‖G − Ĝ‖²_F` over `trials` independent noise and model-symbol draws.
pub fn empirical_sensing_mse(
    cfg: &SystemConfig,
    real: &ChannelRealization,
    w: &ComplexMatrix,
    scaling: &UplinkScaling,
    trials: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let est = sense(cfg, real, w, scaling, true, trials, rng)?;
    Ok(est.empirical_mse.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_channels;
    use crate::numerics::{sample_complex_gaussian, ONE};

    fn random_matrix(r: usize, c: usize, rng: &mut RngStream) -> ComplexMatrix {
        ComplexMatrix::from_vec(r, c, sample_complex_gaussian(rng, r * c, 1.0)).unwrap()
    }

    fn dft_precoder(n: usize, l: usize, power: f64) -> ComplexMatrix {
        let s = (power * l as f64 / n as f64).sqrt() / (l as f64).sqrt();
        ComplexMatrix::from_fn(n, l, |i, j| {
            C64::from_polar(s, -2.0 * std::f64::consts::PI * (i * j) as f64 / l as f64)
        })
    }

    fn scaling_with(b: Vec<C64>) -> UplinkScaling {
        let k = b.len();
        UplinkScaling { b, eta: 1.0, phi: vec![1.0 / k as f64; k] }
    }

    #[test]
    fn noise_cov_examples() {
        let mut rng = RngStream::new(1, 0);
        let f = random_matrix(3, 4, &mut rng);
        let s = scaling_with(vec![ONE; 4]);
        assert_eq!(effective_noise_cov(&f, &s, false, 0.7), ComplexMatrix::identity(3).scale(0.7));
        assert_eq!(effective_noise_cov(&f, &UplinkScaling::silent(4), true, 0.7), ComplexMatrix::identity(3).scale(0.7));

        let f1 = ComplexMatrix::from_columns(&[vec![ONE, ZERO]]);
        let r = effective_noise_cov(&f1, &scaling_with(vec![ONE]), true, 1.0);
        assert_eq!(r, ComplexMatrix::from_real_diag(&[2.0, 1.0]));
    }

    #[test]
    fn noise_cov_matches_sample_covariance() {
        let mut rng = RngStream::new(2, 0);
        let (n, k) = (4, 3);
        let f = random_matrix(n, k, &mut rng);
        let s = scaling_with(sample_complex_gaussian(&mut rng, k, 1.0));
        let r = effective_noise_cov(&f, &s, true, 0.5);
        let zero_g = ComplexMatrix::zeros(n, n);
        let w = ComplexMatrix::zeros(n, 1);
        let scene = Scene { g: &zero_g, w: &w, f: &f, scaling: &s, sigma2: 0.5 };
        let draws = 100_000;
        let symbols = gaussian_symbols(k, draws, &mut rng);
        let pilots = vec![ONE; draws];
        let y = scene.receive(&pilots, &symbols, &vec![false; draws], &vec![true; draws], &mut rng);
        let sample = (&y * &y.adjoint()).scale(1.0 / draws as f64);
        let rel = (&sample - &r).frobenius_norm() / r.frobenius_norm();
        assert!(rel < 0.02, "relative error {rel}");
    }

    #[test]
    fn whitening_examples() {
        let t = whitening_filter(&ComplexMatrix::identity(3)).unwrap();
        assert!((&t - &ComplexMatrix::identity(3)).max_abs() < 1e-15);
        let t = whitening_filter(&ComplexMatrix::from_real_diag(&[4.0, 1.0])).unwrap();
        assert!((&t - &ComplexMatrix::from_real_diag(&[0.5, 1.0])).max_abs() < 1e-15);
        let cfg = SystemConfig::default();
        let mut rng = RngStream::new(3, 0);
        for _ in 0..20 {
            let real = draw_channels(&cfg, &mut rng).unwrap();
            let s = scaling_with(sample_complex_gaussian(&mut rng, cfg.n_devices, 1e-3));
            let r = effective_noise_cov(&real.uplink, &s, true, cfg.sigma2_ps);
            let t = whitening_filter(&r).unwrap();
            let e = &(&(&t * &r) * &t.adjoint()) - &ComplexMatrix::identity(cfg.n_antennas);
            assert!(e.frobenius_norm() < 1e-9);
            assert!(t.max_asymmetry() <= 1e-12 * t.max_abs());
        }
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let cfg = SystemConfig { sigma2_ps: 1e-30, ..SystemConfig::default() };
        let mut rng = RngStream::new(4, 0);
        for _ in 0..10 {
            let real = draw_channels(&cfg, &mut rng).unwrap();
            let w = random_matrix(cfg.n_antennas, cfg.sensing_len, &mut rng);
            let pilots = vec![ONE; cfg.sensing_len];
            let y = &real.target * &w;
            let g = ml_estimate_g(&y, &w, &pilots, &ComplexMatrix::identity(cfg.n_antennas)).unwrap();
            assert!((&g - &real.target).frobenius_norm() <= 1e-9 * real.target.frobenius_norm());
        }
    }

    #[test]
    fn rank_deficient_precoder_is_rejected() {
        let w = ComplexMatrix::from_fn(3, 4, |i, _| if i == 2 { ZERO } else { ONE });
        let y = ComplexMatrix::zeros(3, 4);
        match ml_estimate_g(&y, &w, &[ONE; 4], &ComplexMatrix::identity(3)) {
            Err(Error::RankDeficient { rank, required }) => {
                assert_eq!(rank, 1);
                assert_eq!(required, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn neg_log_likelihood(y: &ComplexMatrix, g: &ComplexMatrix, wd: &ComplexMatrix, t: &ComplexMatrix) -> f64 {
        (&(t * y) - &(&(t * g) * wd)).frobenius_norm_sqr()
    }

    #[test]
    fn estimate_maximises_likelihood_on_a_grid() {
        let mut rng = RngStream::new(5, 0);
        let w = ComplexMatrix::from_fn(2, 2, |_, _| C64::new(rng.normal(), 0.0));
        let pilots = [ONE, C64::new(-1.0, 0.0)];
        let g = ComplexMatrix::from_fn(2, 2, |_, _| C64::new(rng.normal(), 0.0));
        let wd = precoded_pilots(&w, &pilots).unwrap();
        let noise = ComplexMatrix::from_fn(2, 2, |_, _| C64::new(0.1 * rng.normal(), 0.0));
        let y = &(&g * &wd) + &noise;
        let r = ComplexMatrix::from_real_diag(&[1.0, 2.0]);
        let t = whitening_filter(&r).unwrap();
        let g_hat = ml_estimate_g(&y, &w, &pilots, &t).unwrap();

        let step = 0.02;
        let steps: Vec<f64> = (-25..=25).map(|i| i as f64 * step).collect();
        let mut best = (f64::INFINITY, ComplexMatrix::zeros(2, 2));
        for &a in &steps {
            for &b in &steps {
                for &c in &steps {
                    for &d in &steps {
                        let cand = ComplexMatrix::from_fn(2, 2, |i, j| {
                            g[(i, j)] + C64::new([[a, b], [c, d]][i][j], 0.0)
                        });
                        let v = neg_log_likelihood(&y, &cand, &wd, &t);
                        if v < best.0 {
                            best = (v, cand);
                        }
                    }
                }
            }
        }
        assert!((&best.1 - &g_hat).max_abs() <= step, "grid {:?} vs closed form {:?}", best.1, g_hat);
        assert!(neg_log_likelihood(&y, &g_hat, &wd, &t) <= best.0 + 1e-12);
    }

    #[test]
    fn estimator_is_unbiased() {
        let cfg = SystemConfig { n_antennas: 2, sensing_len: 64, ..SystemConfig::default() };
        let mut rng = RngStream::new(6, 0);
        let real = draw_channels(&cfg, &mut rng).unwrap();
        let w = dft_precoder(2, 64, cfg.p_d);
        let r = effective_noise_cov(&real.uplink, &UplinkScaling::silent(cfg.n_devices), false, cfg.sigma2_ps);
        let scaling = UplinkScaling::silent(cfg.n_devices);
        let scene = Scene { g: &real.target, w: &w, f: &real.uplink, scaling: &scaling, sigma2: cfg.sigma2_ps };
        let trials = 4000;
        let mut bias = ComplexMatrix::zeros(2, 2);
        let mut sq = 0.0;
        for _ in 0..trials {
            let pilots = random_pilots(64, &mut rng);
            let symbols = gaussian_symbols(cfg.n_devices, 64, &mut rng);
            let y = scene.receive(&pilots, &symbols, &[true; 64], &[false; 64], &mut rng);
            let e = &estimate_from_block(&y, &w, &pilots, &r).unwrap() - &real.target;
            sq += e.frobenius_norm_sqr();
            bias = &bias + &e;
        }
        let bias = bias.scale(1.0 / trials as f64).frobenius_norm();
        let se = (sq / trials as f64 / trials as f64).sqrt();
        assert!(bias <= 3.0 * se, "bias {bias} se {se}");
    }

    #[test]
    fn crb_examples() {
        let w = ComplexMatrix::identity(2);
        let r = ComplexMatrix::identity(2);
        assert!((crb(&r, &w).unwrap() - 2.0).abs() < 1e-15);
        let mut rng = RngStream::new(7, 0);
        let w = random_matrix(3, 8, &mut rng);
        let r = effective_noise_cov(&random_matrix(3, 2, &mut rng), &scaling_with(vec![ONE; 2]), true, 1.0);
        let ratio = crb(&r, &w).unwrap() / crb(&r, &w.scale(2f64.sqrt())).unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
        let singular = ComplexMatrix::from_fn(2, 3, |_, _| ONE);
        assert!(matches!(crb(&ComplexMatrix::identity(2), &singular), Err(Error::Singular(_))));
    }

    #[test]
    fn fisher_examples() {
        let fim = fisher_information(&ComplexMatrix::identity(2), &ComplexMatrix::identity(2)).unwrap();
        assert!((&fim - &ComplexMatrix::identity(4).scale(2.0)).max_abs() < 1e-15);
        let mut rng = RngStream::new(8, 0);
        for _ in 0..20 {
            let w = random_matrix(3, 6, &mut rng);
            let r = effective_noise_cov(&random_matrix(3, 4, &mut rng), &scaling_with(vec![ONE; 4]), true, 0.3);
            let fim = fisher_information(&r, &w).unwrap();
            let tr = fim.inverse().unwrap().trace().re;
            let closed = crb(&r, &w).unwrap();
            assert!((tr - closed).abs() <= 1e-9 * closed);
            let cov = crb_covariance(&r, &w).unwrap();
            assert!((cov.trace().re - closed).abs() <= 1e-9 * closed);
        }
    }

    #[test]
    fn fisher_matches_likelihood_curvature() {
        let (n, l) = (2, 1000);
        let mut rng = RngStream::new(9, 0);
        let w = random_matrix(n, l, &mut rng).scale(0.1);
        let pilots = random_pilots(l, &mut rng);
        let wd = precoded_pilots(&w, &pilots).unwrap();
        let f = random_matrix(n, 2, &mut rng);
        let scaling = scaling_with(vec![ONE; 2]);
        let r = effective_noise_cov(&f, &scaling, true, 0.5);
        let t = whitening_filter(&r).unwrap();
        let g = random_matrix(n, n, &mut rng);
        let scene = Scene { g: &g, w: &w, f: &f, scaling: &scaling, sigma2: 0.5 };
        let symbols = gaussian_symbols(2, l, &mut rng);
        let y = scene.receive(&pilots, &symbols, &vec![true; l], &vec![true; l], &mut rng);

        // Directions 0..n² perturb real parts, n²..2n² imaginary parts of the row-major entries.
        let dim = n * n;
        let direction = |d: usize| {
            let mut e = ComplexMatrix::zeros(n, n);
            let idx = d % dim;
            e[(idx / n, idx % n)] = if d < dim { ONE } else { C64::new(0.0, 1.0) };
            e
        };
        let h = 1e-3;
        let nll = |m: &ComplexMatrix| neg_log_likelihood(&y, m, &wd, &t);
        let fim = fisher_information(&r, &w).unwrap();
        let scale = fim.max_abs();
        for a in 0..2 * dim {
            for b in 0..2 * dim {
                let (ea, eb) = (direction(a).scale(h), direction(b).scale(h));
                let pp = nll(&(&(&g + &ea) + &eb));
                let pm = nll(&(&(&g + &ea) - &eb));
                let mp = nll(&(&(&g - &ea) + &eb));
                let mm = nll(&(&(&g - &ea) - &eb));
                let curvature = (pp - pm - mp + mm) / (4.0 * h * h);
                let entry = fim[(a % dim, b % dim)];
                let expected = match (a < dim, b < dim) {
                    (true, true) | (false, false) => entry.re,
                    (true, false) => -entry.im,
                    (false, true) => entry.im,
                };
                assert!(
                    (curvature - expected).abs() <= 0.05 * expected.abs().max(0.05 * scale),
                    "({a},{b}): curvature {curvature} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn ml_mse_is_twice_the_crb() {
        let cfg = SystemConfig { n_antennas: 2, sensing_len: 64, ..SystemConfig::default() };
        let mut rng = RngStream::new(10, 0);
        let real = draw_channels(&cfg, &mut rng).unwrap();
        let w = dft_precoder(2, 64, cfg.p_d);
        let scaling = UplinkScaling::silent(cfg.n_devices);
        let est = sense(&cfg, &real, &w, &scaling, false, 10_000, &mut rng).unwrap();
        let mse = est.empirical_mse.unwrap();
        assert!(mse >= est.crb);
        assert!((mse / (2.0 * est.crb) - 1.0).abs() < 0.05, "mse/crb = {}", mse / est.crb);
    }

    #[test]
    fn zero_noise_gives_zero_mse() {
        let cfg = SystemConfig { sigma2_ps: 0.0, ..SystemConfig::default() };
        let mut rng = RngStream::new(11, 0);
        let real = draw_channels(&SystemConfig::default(), &mut rng).unwrap();
        let w = dft_precoder(cfg.n_antennas, cfg.sensing_len, cfg.p_d);
        let est = sense(&cfg, &real, &w, &UplinkScaling::silent(cfg.n_devices), false, 5, &mut rng).unwrap();
        assert!(est.empirical_mse.unwrap() <= 1e-16);
    }

    #[test]
    fn mse_shrinks_with_block_length() {
        let mut prev = f64::INFINITY;
        for l in [8, 16, 32, 64] {
            let cfg = SystemConfig { sensing_len: l, model_len: 128, ..SystemConfig::default() };
            let mut rng = RngStream::new(12, 0);
            let real = draw_channels(&cfg, &mut rng).unwrap();
            let w = dft_precoder(cfg.n_antennas, l, cfg.p_d);
            let scaling = UplinkScaling::silent(cfg.n_devices);
            let mse = empirical_sensing_mse(&cfg, &real, &w, &scaling, 400, &mut rng).unwrap();
            assert!(mse < prev, "L={l}: {mse} vs {prev}");
            prev = mse;
        }
    }

    #[test]
    fn relative_mse_grows_with_target_distance() {
        let cfg = SystemConfig::default();
        let mut rng = RngStream::new(13, 0);
        let base = draw_channels(&cfg, &mut rng).unwrap();
        let w = dft_precoder(cfg.n_antennas, cfg.sensing_len, cfg.p_d);
        let scaling = UplinkScaling::silent(cfg.n_devices);
        let mut prev = 0.0;
        for d in [5.0, 20.0, 50.0, 200.0] {
            let real = base.with_target_distance(&cfg, d).unwrap();
            let est = sense(&cfg, &real, &w, &scaling, true, 200, &mut RngStream::new(14, 0)).unwrap();
            let rel = est.relative_mse.unwrap();
            assert!(rel > prev, "d={d}: {rel}");
            prev = rel;
        }
    }
}
