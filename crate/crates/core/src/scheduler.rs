//! Joint device scheduling, downlink precoding and receive beamforming by
//! matching pursuit, plus the random and greedy baselines.

use std::fmt::Write as _;

use crate::aggregation::{aggregation_error, zf_coordination};
use crate::channel::{ChannelRealization, SnrFloor, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{dot_h, hermitian_eig, norm, norm_sqr, ComplexMatrix, RngStream, C64, ZERO};
use crate::sensing::{effective_noise_cov, UplinkScaling};

/// Relative duality gap accepted from the precoder solver.
pub const DUALITY_GAP_TOL: f64 = 1e-6;
const BISECTION_STEPS: usize = 200;

/// Optimal transmit covariance and one precoder realising it.
#[derive(Debug, Clone)]
pub struct PrecoderSolution {
    pub q: ComplexMatrix,
    pub w: ComplexMatrix,
    /// Multiplier of the power constraint.
    pub mu: f64,
    /// Multiplier(s) of the SNR-floor constraint.
    pub nu: Vec<f64>,
    /// `tr(Q⁻¹)`.
    pub objective: f64,
    /// `(primal − dual) / primal`.
    pub duality_gap: f64,
}

/// `H = (1/(K L)) Σ_k h_k* h_k^T`, so the average SNR-floor term equals `tr(Q H)`.
pub fn average_snr_matrix(hdl: &ComplexMatrix, l: usize) -> ComplexMatrix {
    let (n, k) = (hdl.rows(), hdl.cols());
    let scale = 1.0 / (k * l) as f64;
    ComplexMatrix::from_fn(n, n, |i, j| {
        (0..k).map(|c| hdl[(i, c)].conj() * hdl[(j, c)]).sum::<C64>() * scale
    })
    .hermitian_part()
}

/// Per-device floor terms `h_k^T Q h_k* / L`.
pub fn device_snr(hdl: &ComplexMatrix, q: &ComplexMatrix, l: usize) -> Vec<f64> {
    (0..hdl.cols())
        .map(|k| {
            let h: Vec<C64> = hdl.col(k).iter().map(|v| v.conj()).collect();
            q.quad_form(&h) / l as f64
        })
        .collect()
}

/// Value of the configured SNR-floor expression for covariance `Q`.
pub fn snr_floor_value(hdl: &ComplexMatrix, q: &ComplexMatrix, l: usize, form: SnrFloor) -> f64 {
    let per = device_snr(hdl, q, l);
    match form {
        SnrFloor::Average => per.iter().sum::<f64>() / per.len() as f64,
        SnrFloor::Min => per.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// First `N` rows of the unitary `L`-point DFT, so `V V^H = I_N`.
pub fn dft_selector(n: usize, l: usize) -> ComplexMatrix {
    let s = 1.0 / (l as f64).sqrt();
    ComplexMatrix::from_fn(n, l, |i, j| {
        C64::from_polar(s, -2.0 * std::f64::consts::PI * ((i * j) % l) as f64 / l as f64)
    })
}

/// `W = Q^{1/2} V` with `V` a row-orthonormal selector, so `W W^H = Q`.
pub fn precoder_from_covariance(q: &ComplexMatrix, l: usize) -> Result<ComplexMatrix> {
    let root = crate::numerics::sqrt_psd(q)?;
    Ok(&root * &dft_selector(q.rows(), l))
}

/// Bisection for `t > 0` with `Σ_i (t + a_i)^{-1/2} = budget`, `a_i ≥ 0`.
///
/// Returns the upper end, where the sum is at most `budget`.
fn power_level(offsets: &[f64], budget: f64) -> f64 {
    let total = |t: f64| offsets.iter().map(|&a| (t + a).powf(-0.5)).sum::<f64>();
    let (mut lo, mut hi) = (1e-300_f64, 1.0_f64);
    while total(hi) > budget {
        hi *= 4.0;
    }
    while total(lo.max(1e-300)) <= budget && lo < hi {
        lo = (lo * 1e-4).max(1e-300);
        if lo == 1e-300 {
            break;
        }
    }
    for _ in 0..BISECTION_STEPS {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Eigen-domain solution of `min Σ 1/q_i` s.t. `Σ q_i ≤ P`, `Σ h_i q_i ≥ γ`.
struct ScalarSolution {
    q: Vec<f64>,
    mu: f64,
    nu: f64,
}

fn solve_eigen_domain(h: &[f64], budget: f64, gamma: f64) -> ScalarSolution {
    let n = h.len();
    let iso = budget / n as f64;
    let h_max = h.iter().cloned().fold(0.0, f64::max);
    if gamma <= 0.0 || iso * h.iter().sum::<f64>() >= gamma {
        return ScalarSolution { q: vec![iso; n], mu: 1.0 / (iso * iso), nu: 0.0 };
    }
    // For multiplier ν the covariance is q_i = (t + ν (h_max − h_i))^{-1/2}, μ = t + ν h_max.
    let at = |nu: f64| {
        let offsets: Vec<f64> = h.iter().map(|&hi| nu * (h_max - hi)).collect();
        let t = power_level(&offsets, budget);
        let q: Vec<f64> = offsets.iter().map(|&a| (t + a).powf(-0.5)).collect();
        let snr: f64 = q.iter().zip(h).map(|(q, h)| q * h).sum();
        (ScalarSolution { mu: t + nu * h_max, q, nu }, snr)
    };
    let mut hi = 1.0 / (h_max * iso * iso);
    while at(hi).1 < gamma {
        hi *= 4.0;
        if !hi.is_finite() {
            break;
        }
    }
    let mut lo = hi / 4.0;
    while lo > 0.0 && at(lo).1 >= gamma {
        lo /= 4.0;
        if lo < 1e-300 {
            lo = 0.0;
        }
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid).1 >= gamma {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    at(hi).0
}

/// Minimises `tr(Q⁻¹)` over `Q ⪰ 0`, `tr(Q) ≤ L P_d` and the SNR floor `≥ γ`.
pub fn solve_precoder_m1(hdl: &ComplexMatrix, cfg: &SystemConfig) -> Result<PrecoderSolution> {
    if (0..hdl.cols()).any(|k| norm_sqr(&hdl.col(k)) == 0.0) {
        return Err(Error::invalid("downlink channel with zero column"));
    }
    match cfg.snr_floor {
        SnrFloor::Average => solve_average_floor(hdl, cfg),
        SnrFloor::Min => solve_min_floor(hdl, cfg),
    }
}

fn solve_average_floor(hdl: &ComplexMatrix, cfg: &SystemConfig) -> Result<PrecoderSolution> {
    let l = cfg.sensing_len;
    let budget = l as f64 * cfg.p_d;
    let eig = hermitian_eig(&average_snr_matrix(hdl, l))?;
    let h: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
    let max_floor = budget * h.iter().cloned().fold(0.0, f64::max);
    if cfg.gamma >= max_floor {
        return Err(Error::InfeasibleSnrFloor { requested: cfg.gamma, max_attainable: max_floor });
    }
    let sol = solve_eigen_domain(&h, budget, cfg.gamma);
    let primal: f64 = sol.q.iter().map(|q| 1.0 / q).sum();
    let sum_q: f64 = sol.q.iter().sum();
    let snr: f64 = sol.q.iter().zip(&h).map(|(q, h)| q * h).sum();
    // Dual value g(μ, ν) = 2 Σ √(μ − ν h_i) − μ L P_d + ν γ at the returned multipliers.
    let dual: f64 = h.iter().map(|&hi| 2.0 * (sol.mu - sol.nu * hi).max(0.0).sqrt()).sum::<f64>() - sol.mu * budget
        + sol.nu * cfg.gamma;
    let slack = sol.mu * (budget - sum_q) + sol.nu * (snr - cfg.gamma);
    let gap = ((primal - dual).abs().max(slack.abs())) / primal;
    let q = {
        let mut m = ComplexMatrix::zeros(h.len(), h.len());
        for (i, &qi) in sol.q.iter().enumerate() {
            let u = eig.vector(i);
            for r in 0..h.len() {
                for c in 0..h.len() {
                    m[(r, c)] += u[r] * u[c].conj() * qi;
                }
            }
        }
        m.hermitian_part()
    };
    Ok(PrecoderSolution {
        w: precoder_from_covariance(&q, l)?,
        q,
        mu: sol.mu,
        nu: vec![sol.nu],
        objective: primal,
        duality_gap: gap,
    })
}

/// Per-device floors handled by projected dual ascent over `ν ∈ R^K_+`.
fn solve_min_floor(hdl: &ComplexMatrix, cfg: &SystemConfig) -> Result<PrecoderSolution> {
    let (n, k, l) = (hdl.rows(), hdl.cols(), cfg.sensing_len);
    let budget = l as f64 * cfg.p_d;
    let gamma = cfg.gamma;
    let max_floor = (0..k).map(|c| budget * norm_sqr(&hdl.col(c)) / l as f64).fold(f64::INFINITY, f64::min);
    if gamma >= max_floor {
        return Err(Error::InfeasibleSnrFloor { requested: gamma, max_attainable: max_floor });
    }
    let iso = ComplexMatrix::identity(n).scale(budget / n as f64);
    if gamma <= 0.0 || device_snr(hdl, &iso, l).iter().all(|&s| s >= gamma) {
        let w = precoder_from_covariance(&iso, l)?;
        let iso_q = budget / n as f64;
        return Ok(PrecoderSolution {
            q: iso,
            w,
            mu: 1.0 / (iso_q * iso_q),
            nu: vec![0.0; k],
            objective: n as f64 / iso_q,
            duality_gap: 0.0,
        });
    }
    // Constraint terms normalised by γ so multipliers are O(objective).
    let terms: Vec<ComplexMatrix> = (0..k)
        .map(|c| {
            let h = hdl.col(c);
            ComplexMatrix::from_fn(n, n, |i, j| h[i].conj() * h[j] / (l as f64 * gamma))
        })
        .collect();
    let evaluate = |nu: &[f64]| -> Result<(ComplexMatrix, f64, f64, Vec<f64>)> {
        let mut hm = ComplexMatrix::zeros(n, n);
        for (t, &v) in terms.iter().zip(nu) {
            if v > 0.0 {
                hm = &hm + &t.scale(v);
            }
        }
        let eig = hermitian_eig(&hm.hermitian_part())?;
        let h_max = eig.max();
        let offsets: Vec<f64> = eig.values.iter().map(|&v| h_max - v).collect();
        let t = power_level(&offsets, budget);
        let mu = t + h_max;
        let q = eig.map(|v| (mu - v).max(1e-300).powf(-0.5));
        let dual = eig.values.iter().map(|&v| 2.0 * (mu - v).max(0.0).sqrt()).sum::<f64>() - mu * budget
            + nu.iter().sum::<f64>();
        let grads: Vec<f64> = terms.iter().map(|t| 1.0 - (&q * t).trace().re).collect();
        Ok((q, mu, dual, grads))
    };
    let mut nu = vec![0.0; k];
    let (mut q, mut mu, mut dual, mut grads) = evaluate(&nu)?;
    let mut step = n as f64 / budget;
    let mut best: Option<(ComplexMatrix, f64, f64, Vec<f64>)> = None;
    for _ in 0..20_000 {
        let objective = q.inverse()?.trace().re;
        let feasible = grads.iter().all(|&g| g <= 1e-9);
        if feasible && best.as_ref().is_none_or(|b| objective < b.1) {
            best = Some((q.clone(), objective, mu, nu.clone()));
        }
        if let Some(b) = &best {
            if (b.1 - dual) / b.1 <= DUALITY_GAP_TOL {
                break;
            }
        }
        let candidate: Vec<f64> = nu.iter().zip(&grads).map(|(v, g)| (v + step * g).max(0.0)).collect();
        let next = evaluate(&candidate)?;
        if next.2 >= dual {
            nu = candidate;
            (q, mu, dual, grads) = next;
            step *= 1.5;
        } else {
            step *= 0.5;
            if step < 1e-300 {
                break;
            }
        }
    }
    let (q, objective, mu, nu) = match best {
        Some(b) => b,
        None => return Err(Error::InfeasibleSnrFloor { requested: gamma, max_attainable: max_floor }),
    };
    Ok(PrecoderSolution {
        w: precoder_from_covariance(&q, l)?,
        q,
        mu,
        nu: nu.iter().map(|v| v / gamma).collect(),
        objective,
        duality_gap: ((objective - dual) / objective).max(0.0),
    })
}

/// CRB gate: `½ tr(R) tr(Q⁻¹) ≤ Γ₀`.
pub fn feasibility_gate_precoder(q: &ComplexMatrix, cfg: &SystemConfig, r: &ComplexMatrix) -> bool {
    match q.inverse() {
        Ok(inv) => 0.5 * r.trace().re * inv.trace().re <= cfg.gamma0,
        Err(_) => false,
    }
}

/// Coefficient `ξ = P_u/(σ²(1+N/L)) ((N/L) Σ_{k∈S} φ_k² − ε₀)`.
pub fn penalty_coefficient(set: &[usize], phi: &[f64], cfg: &SystemConfig) -> f64 {
    let ratio = cfg.n_antennas as f64 / cfg.sensing_len as f64;
    let phi2: f64 = set.iter().map(|&k| phi[k] * phi[k]).sum();
    cfg.p_u / (cfg.sigma2_ps * (1.0 + ratio)) * (ratio * phi2 - cfg.eps0)
}

/// `C_k(c) = φ_k² ‖c‖² + ξ |c^H f_k|²`.
pub fn penalty_ck(c: &[C64], k: usize, f: &ComplexMatrix, phi: &[f64], set: &[usize], cfg: &SystemConfig) -> f64 {
    phi[k] * phi[k] * norm_sqr(c) + penalty_coefficient(set, phi, cfg) * dot_h(c, &f.col(k)).norm_sqr()
}

/// `φ̄ I + ξ F T F^H` with `φ̄ = Σ τ_k φ_k²` and `T = diag(τ)` restricted to `S`.
pub fn overall_penalty_matrix(f: &ComplexMatrix, set: &[usize], phi: &[f64], tau: &[f64], cfg: &SystemConfig) -> ComplexMatrix {
    let n = f.rows();
    let xi = penalty_coefficient(set, phi, cfg);
    let phi_bar: f64 = set.iter().map(|&k| tau[k] * phi[k] * phi[k]).sum();
    let mut m = ComplexMatrix::identity(n).scale(phi_bar);
    for &k in set {
        let w = xi * tau[k];
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += f[(i, k)] * f[(j, k)].conj() * w;
            }
        }
    }
    m.hermitian_part()
}

/// Unit receive beamformer minimising the overall penalty: the minimum-eigenvalue eigenvector.
pub fn solve_receiver_m2(f: &ComplexMatrix, set: &[usize], phi: &[f64], tau: &[f64], cfg: &SystemConfig) -> Result<Vec<C64>> {
    if set.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let eig = hermitian_eig(&overall_penalty_matrix(f, set, phi, tau, cfg))?;
    Ok(eig.vector(0))
}

/// `C₀ = ½ tr(R) tr(Q⁻¹) − Γ₀`.
pub fn sensing_penalty(trace_r: f64, trace_q_inv: f64, cfg: &SystemConfig) -> f64 {
    0.5 * trace_r * trace_q_inv - cfg.gamma0
}

/// `S_k = C_k(c*) − τ₀ C₀(S − {k}, W*)`, with device `k`'s interference removed from `tr(R)`.
pub fn selection_metric(
    k: usize,
    c_star: &[C64],
    trace_q_inv: f64,
    set: &[usize],
    f: &ComplexMatrix,
    phi: &[f64],
    scaling: &UplinkScaling,
    trace_r: f64,
    cfg: &SystemConfig,
) -> f64 {
    let trace_r_minus_k = trace_r - scaling.b[k].norm_sqr() * norm_sqr(&f.col(k));
    penalty_ck(c_star, k, f, phi, set, cfg) - cfg.tau0 * sensing_penalty(trace_r_minus_k, trace_q_inv, cfg)
}

/// Device-removal rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    MatchingPursuit,
    Greedy,
    Random,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::MatchingPursuit, Policy::Greedy, Policy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Policy::MatchingPursuit => "mp",
            Policy::Greedy => "greedy",
            Policy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "mp" => Ok(Policy::MatchingPursuit),
            "greedy" => Ok(Policy::Greedy),
            "random" => Ok(Policy::Random),
            other => Err(Error::invalid(format!("unknown policy '{other}' (expected mp|greedy|random)"))),
        }
    }
}

/// One pass of the scheduling loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub set_size: usize,
    pub crb: f64,
    pub agg_error: f64,
    pub removed: usize,
    /// `(device, S_k)`; empty for the baselines.
    pub metrics: Vec<(usize, f64)>,
    /// `(device, C_k)` at the current receiver.
    pub penalties: Vec<(usize, f64)>,
}

/// Result of a scheduling solve.
#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub policy: Policy,
    pub set: Vec<usize>,
    pub w: ComplexMatrix,
    pub q: ComplexMatrix,
    pub c: Vec<C64>,
    pub tau: Vec<f64>,
    pub scaling: UplinkScaling,
    pub feasible: bool,
    pub crb_value: f64,
    pub agg_error: f64,
    pub duality_gap: f64,
    pub trace: Vec<TraceEntry>,
}

impl ScheduleOutcome {
    /// Line-oriented log: a header line, then one line per removal.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "policy={} feasible={} selected={} crb={:e} agg_error={:e} set={:?}",
            self.policy.name(),
            self.feasible,
            self.set.len(),
            self.crb_value,
            self.agg_error,
            self.set
        );
        for t in &self.trace {
            let _ = write!(
                out,
                "iter={} size={} crb={:e} agg_error={:e} removed={}",
                t.iteration, t.set_size, t.crb, t.agg_error, t.removed
            );
            if !t.metrics.is_empty() {
                let _ = write!(out, " metrics=");
                for (i, (k, v)) in t.metrics.iter().enumerate() {
                    let _ = write!(out, "{}{k}:{v:e}", if i > 0 { "," } else { "" });
                }
            }
            let _ = write!(out, " penalties=");
            for (i, (k, v)) in t.penalties.iter().enumerate() {
                let _ = write!(out, "{}{k}:{v:e}", if i > 0 { "," } else { "" });
            }
            out.push('\n');
        }
        out
    }
}

/// `φ_k = w_k / Σ_{j∈S} w_j` over the active set, zero elsewhere.
pub fn renormalized_weights(base: &[f64], set: &[usize]) -> Vec<f64> {
    let total: f64 = set.iter().map(|&k| base[k]).sum();
    let mut phi = vec![0.0; base.len()];
    for &k in set {
        phi[k] = base[k] / total;
    }
    phi
}

/// Evaluation of the constraints for a candidate `(S, c)`.
struct Evaluation {
    scaling: UplinkScaling,
    trace_r: f64,
    crb: f64,
    agg_error: f64,
}

fn evaluate(real: &ChannelRealization, c: &[C64], set: &[usize], phi: &[f64], tq_inv: f64, cfg: &SystemConfig) -> Result<Evaluation> {
    let scaling = zf_coordination(&real.uplink, c, phi, set, cfg.p_u)?;
    let r = effective_noise_cov(&real.uplink, &scaling, true, cfg.sigma2_ps);
    let trace_r = r.trace().re;
    Ok(Evaluation {
        agg_error: aggregation_error(c, set, &real.uplink, phi, cfg)?,
        crb: 0.5 * trace_r * tq_inv,
        trace_r,
        scaling,
    })
}

/// Matching-pursuit scheduling with uniform base weights.
pub fn schedule_mp(real: &ChannelRealization, cfg: &SystemConfig) -> Result<ScheduleOutcome> {
    let base = vec![1.0; real.n_devices()];
    schedule(real, cfg, Policy::MatchingPursuit, &base, None)
}

/// Random or greedy baseline with uniform base weights.
pub fn schedule_baseline(
    real: &ChannelRealization,
    cfg: &SystemConfig,
    policy: Policy,
    rng: &mut RngStream,
) -> Result<ScheduleOutcome> {
    let base = vec![1.0; real.n_devices()];
    schedule(real, cfg, policy, &base, Some(rng))
}

/// Shared scheduling loop. `base` holds unnormalised aggregation weights (e.g. data sizes).
///
/// Removal continues until the CRB and aggregation constraints both hold or
/// no device is left. The precoder is solved once up front.
pub fn schedule(
    real: &ChannelRealization,
    cfg: &SystemConfig,
    policy: Policy,
    base: &[f64],
    rng: Option<&mut RngStream>,
) -> Result<ScheduleOutcome> {
    let precoder = solve_precoder_m1(&real.downlink, cfg)?;
    schedule_with_precoder(real, cfg, policy, base, &precoder, rng)
}

/// Scheduling loop for a precomputed precoder.
pub fn schedule_with_precoder(
    real: &ChannelRealization,
    cfg: &SystemConfig,
    policy: Policy,
    base: &[f64],
    precoder: &PrecoderSolution,
    mut rng: Option<&mut RngStream>,
) -> Result<ScheduleOutcome> {
    let k_all = real.n_devices();
    let tq_inv = precoder.objective;
    let mut set: Vec<usize> = (0..k_all).collect();
    let mut tau = vec![1.0; k_all];
    let mut trace = Vec::new();
    let mut last_c = vec![ZERO; real.n_antennas()];
    let mut last_scaling = UplinkScaling::silent(k_all);
    let mut last = (f64::INFINITY, f64::INFINITY);
    let mut iteration = 0;
    while !set.is_empty() {
        let phi = renormalized_weights(base, &set);
        let c = solve_receiver_m2(&real.uplink, &set, &phi, &tau, cfg)?;
        let penalties: Vec<(usize, f64)> =
            set.iter().map(|&k| (k, penalty_ck(&c, k, &real.uplink, &phi, &set, cfg))).collect();
        let eval = match evaluate(real, &c, &set, &phi, tq_inv, cfg) {
            Ok(e) => Some(e),
            Err(Error::OrthogonalDevice { device, .. }) => {
                trace.push(TraceEntry {
                    iteration,
                    set_size: set.len(),
                    crb: f64::INFINITY,
                    agg_error: f64::INFINITY,
                    removed: device,
                    metrics: Vec::new(),
                    penalties,
                });
                set.retain(|&k| k != device);
                tau[device] = 0.0;
                iteration += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let eval = eval.expect("handled above");
        last_c = c.clone();
        last = (eval.crb, eval.agg_error);
        if eval.crb <= cfg.gamma0 && eval.agg_error <= cfg.eps0 {
            return Ok(ScheduleOutcome {
                policy,
                set,
                w: precoder.w.clone(),
                q: precoder.q.clone(),
                c,
                tau,
                scaling: eval.scaling,
                feasible: true,
                crb_value: eval.crb,
                agg_error: eval.agg_error,
                duality_gap: precoder.duality_gap,
                trace,
            });
        }
        last_scaling = eval.scaling.clone();
        let (removed, metrics) = match policy {
            Policy::MatchingPursuit => {
                let metrics: Vec<(usize, f64)> = set
                    .iter()
                    .map(|&k| {
                        let s = selection_metric(k, &c, tq_inv, &set, &real.uplink, &phi, &eval.scaling, eval.trace_r, cfg);
                        (k, s)
                    })
                    .collect();
                let mut best = metrics[0];
                for &(k, s) in &metrics[1..] {
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                (best.0, metrics)
            }
            Policy::Greedy => {
                let mut best = (set[0], f64::INFINITY);
                for &k in &set {
                    let g = norm(&real.uplink.col(k));
                    if g < best.1 {
                        best = (k, g);
                    }
                }
                (best.0, Vec::new())
            }
            Policy::Random => {
                let rng = rng.as_deref_mut().ok_or_else(|| Error::invalid("random policy needs an rng"))?;
                (set[rng.below(set.len())], Vec::new())
            }
        };
        trace.push(TraceEntry {
            iteration,
            set_size: set.len(),
            crb: eval.crb,
            agg_error: eval.agg_error,
            removed,
            metrics: metrics.clone(),
            penalties,
        });
        set.retain(|&k| k != removed);
        tau[removed] = 0.0;
        if policy == Policy::MatchingPursuit {
            for &(k, s) in &metrics {
                if k != removed {
                    tau[k] = if s > 0.0 { cfg.delta } else { 1.0 - cfg.delta };
                }
            }
        }
        iteration += 1;
    }
    Ok(ScheduleOutcome {
        policy,
        set,
        w: precoder.w.clone(),
        q: precoder.q.clone(),
        c: last_c,
        tau,
        scaling: last_scaling,
        feasible: false,
        crb_value: last.0,
        agg_error: last.1,
        duality_gap: precoder.duality_gap,
        trace,
    })
}

/// Independent re-evaluation of every constraint for a scheduled set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCheck {
    pub crb_ok: bool,
    pub agg_ok: bool,
    pub unit_receiver: bool,
    pub power_ok: bool,
    pub snr_floor_ok: bool,
    pub uplink_power_ok: bool,
}

impl ConstraintCheck {
    pub fn all(&self) -> bool {
        self.crb_ok && self.agg_ok && self.unit_receiver && self.power_ok && self.snr_floor_ok && self.uplink_power_ok
    }
}

/// Recomputes all constraints from the raw outcome data.
pub fn check_constraints(out: &ScheduleOutcome, real: &ChannelRealization, base: &[f64], cfg: &SystemConfig) -> Result<ConstraintCheck> {
    let l = out.w.cols();
    let wwh = &out.w * &out.w.adjoint();
    let power = wwh.trace().re / l as f64;
    let floor = snr_floor_value(&real.downlink, &wwh, l, cfg.snr_floor);
    let rel = 1e-9;
    let mut check = ConstraintCheck {
        crb_ok: false,
        agg_ok: false,
        unit_receiver: (norm(&out.c) - 1.0).abs() <= 1e-9,
        power_ok: power <= cfg.p_d * (1.0 + rel),
        snr_floor_ok: floor >= cfg.gamma * (1.0 - rel),
        uplink_power_ok: false,
    };
    if out.set.is_empty() {
        return Ok(check);
    }
    let phi = renormalized_weights(base, &out.set);
    let scaling = zf_coordination(&real.uplink, &out.c, &phi, &out.set, cfg.p_u)?;
    let r = effective_noise_cov(&real.uplink, &scaling, true, cfg.sigma2_ps);
    let crb = crate::sensing::crb(&r, &out.w)?;
    check.crb_ok = crb <= cfg.gamma0 * (1.0 + rel);
    let e = aggregation_error(&out.c, &out.set, &real.uplink, &phi, cfg)?;
    check.agg_ok = e <= cfg.eps0 * (1.0 + rel);
    check.uplink_power_ok = out.set.iter().all(|&k| scaling.b[k].norm_sqr() <= cfg.p_u * (1.0 + rel));
    Ok(check)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::channel::draw_channels;
    use crate::numerics::{normalized, sample_complex_gaussian};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn loop_descends_and_keeps_the_precoder(seed in any::<u64>(), eps0 in 30.0f64..600.0, which in 0usize..3) {
            let cfg = SystemConfig { eps0, ..SystemConfig::default() };
            let real = draw_channels(&cfg, &mut RngStream::new(seed, 0)).unwrap();
            let policy = Policy::ALL[which];
            let base = vec![1.0; cfg.n_devices];
            let out = schedule(&real, &cfg, policy, &base, Some(&mut RngStream::new(seed, 1))).unwrap();
            prop_assert!(out.trace.len() <= cfg.n_devices);
            for (i, t) in out.trace.iter().enumerate() {
                prop_assert_eq!(t.iteration, i);
                prop_assert_eq!(t.set_size, cfg.n_devices - i);
            }
            let sol = solve_precoder_m1(&real.downlink, &cfg).unwrap();
            prop_assert!(sol.duality_gap <= DUALITY_GAP_TOL);
            prop_assert_eq!(&out.w, &sol.w);
            if out.feasible {
                prop_assert!(check_constraints(&out, &real, &base, &cfg).unwrap().all());
            }
        }

        #[test]
        fn receiver_attains_the_minimum_penalty(seed in any::<u64>(), mask in 1u32..(1 << 20), probes in proptest::collection::vec(any::<u64>(), 20)) {
            let cfg = SystemConfig::default();
            let mut rng = RngStream::new(seed, 2);
            let real = draw_channels(&cfg, &mut rng).unwrap();
            let set: Vec<usize> = (0..20).filter(|i| mask >> i & 1 == 1).collect();
            let phi = renormalized_weights(&[1.0; 20], &set);
            let tau: Vec<f64> = (0..20).map(|_| if rng.uniform() < 0.5 { cfg.delta } else { 1.0 - cfg.delta }).collect();
            let m = overall_penalty_matrix(&real.uplink, &set, &phi, &tau, &cfg);
            let u = solve_receiver_m2(&real.uplink, &set, &phi, &tau, &cfg).unwrap();
            let eig = hermitian_eig(&m).unwrap();
            let scale = eig.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            prop_assert!((m.quad_form(&u) - eig.min()).abs() <= 1e-10 * scale);
            for p in probes {
                let v = normalized(&sample_complex_gaussian(&mut RngStream::new(p, 3), cfg.n_antennas, 1.0));
                prop_assert!(m.quad_form(&v) >= m.quad_form(&u) - 1e-12 * scale);
            }
        }
    }
}
