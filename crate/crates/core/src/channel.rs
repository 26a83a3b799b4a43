//! Network geometry, path loss, Rayleigh fading and the line-of-sight
//! target response seen by the parameter server.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{ComplexMatrix, RngStream, C64};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;
/// Thermal noise spectral density used for the default noise powers (W/Hz).
pub const NOISE_PSD: f64 = 9.8e-18;

/// Downlink SNR-floor constraint form used by the precoder design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrFloor {
    /// `(1/K) Σ_k h_k^T W W^H h_k^* / L ≥ γ`
    Average,
    /// `min_k h_k^T W W^H h_k^* / L ≥ γ`
    Min,
}

/// Scalar parameters of the simulated network.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n_antennas: usize,
    pub n_devices: usize,
    /// Sensing block length `L` in symbols.
    pub sensing_len: usize,
    /// Uplink model block length `M` in symbols.
    pub model_len: usize,
    pub p_d: f64,
    pub p_u: f64,
    pub sigma2_ps: f64,
    pub sigma2_k: f64,
    pub gamma: f64,
    pub gamma0: f64,
    pub eps0: f64,
    pub delta: f64,
    pub tau0: f64,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub d_in: f64,
    pub d_out: f64,
    pub eps_c: f64,
    pub eps_t: f64,
    pub sigma_rcs: f64,
    pub d_target: f64,
    pub theta_target: f64,
    /// Element spacing in wavelengths.
    pub antenna_spacing: f64,
    pub seed: u64,
    pub random_target_phase: bool,
    pub snr_floor: SnrFloor,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let bandwidth_hz = 10e6;
        let noise = NOISE_PSD * bandwidth_hz;
        Self {
            n_antennas: 8,
            n_devices: 20,
            sensing_len: 32,
            model_len: 128,
            p_d: 1.0,
            p_u: 1e-3,
            sigma2_ps: noise,
            sigma2_k: noise,
            gamma: 1e-11,
            gamma0: 1e-8,
            eps0: 200.0,
            delta: 0.1,
            tau0: 0.5,
            carrier_hz: 5e9,
            bandwidth_hz,
            d_in: 200.0,
            d_out: 500.0,
            eps_c: 2.5,
            eps_t: 4.5,
            sigma_rcs: 0.1,
            d_target: 50.0,
            theta_target: PI / 6.0,
            antenna_spacing: 0.5,
            seed: 1,
            random_target_phase: false,
            snr_floor: SnrFloor::Average,
        }
    }
}

/// Config-file key names, in the order they are documented.
pub const CONFIG_KEYS: &[&str] = &[
    "N", "K", "L", "M", "P_d", "P_u", "sigma2_ps", "sigma2_k", "gamma", "Gamma0", "eps0", "delta",
    "tau0", "carrier_hz", "bandwidth_hz", "D_in", "D_out", "eps_c", "eps_t", "sigma_rcs",
    "d_target", "theta_target", "antenna_spacing", "seed", "random_target_phase", "snr_floor",
];

impl SystemConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Checks every invariant and reports all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_antennas < 1 {
            bad.push("N must be >= 1".to_string());
        }
        if self.n_devices < 1 {
            bad.push("K must be >= 1".to_string());
        }
        if self.sensing_len < self.n_antennas {
            bad.push(format!("L ({}) must be >= N ({})", self.sensing_len, self.n_antennas));
        }
        if self.model_len < self.sensing_len {
            bad.push(format!("M ({}) must be >= L ({})", self.model_len, self.sensing_len));
        }
        let positive = [
            ("P_d", self.p_d),
            ("P_u", self.p_u),
            ("sigma2_ps", self.sigma2_ps),
            ("sigma2_k", self.sigma2_k),
            ("gamma", self.gamma),
            ("Gamma0", self.gamma0),
            ("eps0", self.eps0),
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("D_in", self.d_in),
            ("sigma_rcs", self.sigma_rcs),
            ("d_target", self.d_target),
            ("antenna_spacing", self.antenna_spacing),
        ];
        for (key, v) in positive {
            // γ = 0 switches the SNR floor off and is allowed.
            let ok = if key == "gamma" { v >= 0.0 } else { v > 0.0 };
            if !ok || v.is_nan() {
                bad.push(format!("{key} must be positive (got {v})"));
            }
        }
        for (key, v) in [("delta", self.delta), ("tau0", self.tau0)] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{key} must lie in [0, 1] (got {v})"));
            }
        }
        if self.d_in >= self.d_out {
            bad.push(format!("D_in ({}) must be < D_out ({})", self.d_in, self.d_out));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    /// Sets a field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::invalid(format!("{key}: cannot parse '{v}'")))
        }
        fn count(key: &str, v: &str) -> Result<usize> {
            // Accept "8" as well as "8.0" or "1e1" from sweep grids.
            let x: f64 = num(key, v)?;
            if x < 0.0 || x.fract() != 0.0 {
                return Err(Error::invalid(format!("{key}: expected a count, got '{v}'")));
            }
            Ok(x as usize)
        }
        match key {
            "N" => self.n_antennas = count(key, value)?,
            "K" => self.n_devices = count(key, value)?,
            "L" => self.sensing_len = count(key, value)?,
            "M" => self.model_len = count(key, value)?,
            "P_d" => self.p_d = num(key, value)?,
            "P_u" => self.p_u = num(key, value)?,
            "sigma2_ps" => self.sigma2_ps = num(key, value)?,
            "sigma2_k" => self.sigma2_k = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "Gamma0" => self.gamma0 = num(key, value)?,
            "eps0" => self.eps0 = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "tau0" => self.tau0 = num(key, value)?,
            "carrier_hz" => self.carrier_hz = num(key, value)?,
            "bandwidth_hz" => self.bandwidth_hz = num(key, value)?,
            "D_in" => self.d_in = num(key, value)?,
            "D_out" => self.d_out = num(key, value)?,
            "eps_c" => self.eps_c = num(key, value)?,
            "eps_t" => self.eps_t = num(key, value)?,
            "sigma_rcs" => self.sigma_rcs = num(key, value)?,
            "d_target" => self.d_target = num(key, value)?,
            "theta_target" => self.theta_target = num(key, value)?,
            "antenna_spacing" => self.antenna_spacing = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "random_target_phase" => self.random_target_phase = num(key, value)?,
            "snr_floor" => {
                self.snr_floor = match value.trim() {
                    "average" => SnrFloor::Average,
                    "min" => SnrFloor::Min,
                    other => {
                        return Err(Error::invalid(format!("snr_floor: expected average|min, got '{other}'")))
                    }
                }
            }
            _ => return Err(Error::invalid(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Renders a field for `--help` and config dumps.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "N" => self.n_antennas.to_string(),
            "K" => self.n_devices.to_string(),
            "L" => self.sensing_len.to_string(),
            "M" => self.model_len.to_string(),
            "P_d" => self.p_d.to_string(),
            "P_u" => self.p_u.to_string(),
            "sigma2_ps" => self.sigma2_ps.to_string(),
            "sigma2_k" => self.sigma2_k.to_string(),
            "gamma" => self.gamma.to_string(),
            "Gamma0" => self.gamma0.to_string(),
            "eps0" => self.eps0.to_string(),
            "delta" => self.delta.to_string(),
            "tau0" => self.tau0.to_string(),
            "carrier_hz" => self.carrier_hz.to_string(),
            "bandwidth_hz" => self.bandwidth_hz.to_string(),
            "D_in" => self.d_in.to_string(),
            "D_out" => self.d_out.to_string(),
            "eps_c" => self.eps_c.to_string(),
            "eps_t" => self.eps_t.to_string(),
            "sigma_rcs" => self.sigma_rcs.to_string(),
            "d_target" => self.d_target.to_string(),
            "theta_target" => self.theta_target.to_string(),
            "antenna_spacing" => self.antenna_spacing.to_string(),
            "seed" => self.seed.to_string(),
            "random_target_phase" => self.random_target_phase.to_string(),
            "snr_floor" => match self.snr_floor {
                SnrFloor::Average => "average".into(),
                SnrFloor::Min => "min".into(),
            },
            _ => return None,
        })
    }
}

/// Uniform-linear-array response `a(θ)`, entry `n` = `exp(j 2π n d sin θ)`.
pub fn steering_vector(theta: f64, n: usize, spacing: f64) -> Vec<C64> {
    let phase = 2.0 * PI * spacing * theta.sin();
    (0..n).map(|i| C64::from_polar(1.0, phase * i as f64)).collect()
}

/// Round-trip power gain of the target echo: `σ_RCS λ² / (4π)³ · d^{-ε_t}`.
pub fn target_pathloss(d: f64, cfg: &SystemConfig) -> Result<f64> {
    if d <= 0.0 || d.is_nan() {
        return Err(Error::invalid(format!("target distance must be positive (got {d})")));
    }
    let lambda = cfg.wavelength();
    let reference = cfg.sigma_rcs * lambda * lambda / (4.0 * PI).powi(3);
    Ok(reference * d.powf(-cfg.eps_t))
}

/// Device-to-server power gain: `(λ/4π)² · d^{-ε_c}`.
pub fn device_pathloss(d: f64, cfg: &SystemConfig) -> f64 {
    let reference = (cfg.wavelength() / (4.0 * PI)).powi(2);
    reference * d.powf(-cfg.eps_c)
}

/// One Monte-Carlo draw of every channel in the network.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// `N×K` uplink channels, column `k` is `f_k`.
    pub uplink: ComplexMatrix,
    /// `N×K` downlink channels, column `k` is `h_k`.
    pub downlink: ComplexMatrix,
    /// `N×N` target response `α a(θ) a(θ)^T`.
    pub target: ComplexMatrix,
    pub alpha: C64,
    pub theta: f64,
    pub distances: Vec<f64>,
}

impl ChannelRealization {
    pub fn n_antennas(&self) -> usize {
        self.uplink.rows()
    }

    pub fn n_devices(&self) -> usize {
        self.uplink.cols()
    }

    pub fn uplink_col(&self, k: usize) -> Vec<C64> {
        self.uplink.col(k)
    }

    /// Fresh small-scale fading at the same device positions.
    pub fn redraw_fading(&self, cfg: &SystemConfig, rng: &mut RngStream) -> Result<Self> {
        build(cfg, self.distances.clone(), rng)
    }

    /// Same devices and fading, target moved to `d`.
    pub fn with_target_distance(&self, cfg: &SystemConfig, d: f64) -> Result<Self> {
        let gain = target_pathloss(d, cfg)?.sqrt();
        let alpha = C64::from_polar(gain, self.alpha.arg());
        let a = steering_vector(self.theta, cfg.n_antennas, cfg.antenna_spacing);
        Ok(Self { target: target_response(alpha, &a), alpha, ..self.clone() })
    }
}

fn target_response(alpha: C64, a: &[C64]) -> ComplexMatrix {
    ComplexMatrix::from_fn(a.len(), a.len(), |i, j| alpha * a[i] * a[j])
}

/// Draws device positions, Rayleigh fading for both links and the target response.
///
/// Path-loss figures are power gains; channel amplitudes carry their square root.
pub fn draw_channels(cfg: &SystemConfig, rng: &mut RngStream) -> Result<ChannelRealization> {
    cfg.validate()?;
    let distances = (0..cfg.n_devices)
        .map(|_| cfg.d_in + (cfg.d_out - cfg.d_in) * rng.uniform())
        .collect();
    build(cfg, distances, rng)
}

fn build(cfg: &SystemConfig, distances: Vec<f64>, rng: &mut RngStream) -> Result<ChannelRealization> {
    let (n, k) = (cfg.n_antennas, cfg.n_devices);
    let amp: Vec<f64> = distances.iter().map(|&d| device_pathloss(d, cfg).sqrt()).collect();
    let mut uplink = ComplexMatrix::zeros(n, k);
    let mut downlink = ComplexMatrix::zeros(n, k);
    for (j, &a) in amp.iter().enumerate() {
        for i in 0..n {
            uplink[(i, j)] = rng.complex_normal(1.0) * a;
        }
        for i in 0..n {
            downlink[(i, j)] = rng.complex_normal(1.0) * a;
        }
    }
    let gain = target_pathloss(cfg.d_target, cfg)?.sqrt();
    let phase = if cfg.random_target_phase { 2.0 * PI * rng.uniform() } else { 0.0 };
    let alpha = C64::from_polar(gain, phase);
    let a = steering_vector(cfg.theta_target, n, cfg.antenna_spacing);
    Ok(ChannelRealization {
        target: target_response(alpha, &a),
        uplink,
        downlink,
        alpha,
        theta: cfg.theta_target,
        distances,
    })
}
