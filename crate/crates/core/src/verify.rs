//! Trajectory-level checks of the incremental dissipation inequality
//! `V(T) − V(0) ≤ ∫ δuᵀ δy dt` along simulated trajectory pairs.
//!
//! Tolerance model: `tol = factor · dt² · T · max|s̈|`, where `s = δuᵀδy` is
//! the supply rate sampled on the trajectory grid and `s̈` its second
//! difference quotient. This bounds the combined integrator and quadrature
//! error for smooth signals with generous headroom.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{rotate, Vec2};
use crate::model::{closed_loop_rhs, storage_unchecked, ErrorState, HacGains, InverterParams, InverterState, PortInput};
use crate::netsim::{integrate, IntegrateOptions, OdeSystem, SimError, Trajectory};
use crate::smallsignal::equilibrium_with_resistive_load;

pub const DEFAULT_TOL_FACTOR: f64 = 10.0;
/// Output labels of [`InverterSim`]; the last three are the pairing input
/// `[i_dc_ref, −i_load]`.
pub const OUTPUT_LABELS: [&str; 6] =
    ["v_dc_V", "v_alpha_V", "v_beta_V", "i_dc_ref_A", "neg_i_load_alpha_A", "neg_i_load_beta_A"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("trajectories differ in time grid ({0})")]
    GridMismatch(String),
    #[error("trajectory does not come from a single-inverter simulation: {0}")]
    Shape(String),
    #[error("lambda = {0} must be finite and > 0")]
    InvalidLambda(f64),
    #[error("rho = {0} must be finite and >= 0")]
    InvalidRho(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One sinusoidal component `a·sin(ωt + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl Tone {
    fn eval(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
}

/// Smooth DC current step: raised-cosine ramp of length `ramp` from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothStep {
    pub amplitude: f64,
    pub start: f64,
    pub ramp: f64,
}

impl SmoothStep {
    fn eval(&self, t: f64) -> f64 {
        if t <= self.start {
            0.0
        } else if t >= self.start + self.ramp {
            self.amplitude
        } else {
            0.5 * self.amplitude * (1.0 - (PI * (t - self.start) / self.ramp).cos())
        }
    }
}

/// Input perturbation added to the reference input.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputPerturbation {
    pub dc: Vec<Tone>,
    /// Added to the αβ load current.
    pub load_alpha: Vec<Tone>,
    pub load_beta: Vec<Tone>,
    pub dc_step: Option<SmoothStep>,
}

impl InputPerturbation {
    fn eval(&self, t: f64) -> PortInput {
        let sum = |tones: &[Tone]| tones.iter().map(|x| x.eval(t)).sum::<f64>();
        PortInput {
            i_dc_ref: sum(&self.dc) + self.dc_step.map_or(0.0, |s| s.eval(t)),
            i_load: Vec2::new(sum(&self.load_alpha), sum(&self.load_beta)),
        }
    }
}

/// Single inverter driven by a constant DC reference, a balanced sinusoidal
/// load current rotating at ω₀, and an optional perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct InverterSim {
    pub p: InverterParams,
    pub g: HacGains,
    pub i_dc_ref: f64,
    /// Load current in the frame rotating at ω₀ (A).
    pub i_load_dq: Vec2,
    pub perturbation: InputPerturbation,
}

impl InverterSim {
    pub fn input(&self, t: f64) -> PortInput {
        let base = PortInput { i_dc_ref: self.i_dc_ref, i_load: rotate(&self.i_load_dq, self.g.omega0 * t) };
        base + self.perturbation.eval(t)
    }
}

impl OdeSystem for InverterSim {
    fn dim(&self) -> usize {
        InverterState::DIM
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        let f = closed_loop_rhs(&InverterState::from_slice(x), &self.input(t), &self.p, &self.g, t);
        dx.copy_from_slice(&f.to_array());
    }

    fn output_labels(&self) -> Vec<String> {
        OUTPUT_LABELS.iter().map(|s| s.to_string()).collect()
    }

    fn outputs(&self, t: f64, x: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(&[x[0], x[1], x[2]]);
        out.extend_from_slice(&self.input(t).pairing_vector());
    }
}

/// Bounds for [`random_trajectory_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub dt: f64,
    pub t_end: f64,
    /// Reference load current magnitude, in phase with the capacitor voltage (A).
    pub load_current: f64,
    /// Initial-state perturbation bounds.
    pub dv_dc: f64,
    pub dv_ac: f64,
    pub di_ac: f64,
    pub dtheta: f64,
    /// Peak amplitude of the DC reference perturbation (A).
    pub dc_amplitude: f64,
    /// Peak amplitude of each αβ load current perturbation (A).
    pub ac_amplitude: f64,
    /// Tone frequencies are drawn from `[1, omega_max]` rad/s.
    pub omega_max: f64,
    pub tones: usize,
    /// Replace the DC tones by a smooth step of amplitude `dc_amplitude`.
    pub adversarial: bool,
}

impl InputSpec {
    /// Defaults scaled to the inverter rating: 0.5 pu reference load, 5 %
    /// input perturbations, 0.5 s at 50 µs.
    pub fn for_rating(rated_power: f64, voltage_ll: f64, v_dc_star: f64) -> Self {
        let i_rated = rated_power / voltage_ll;
        Self {
            dt: 50e-6,
            t_end: 0.5,
            load_current: 0.5 * i_rated,
            dv_dc: 0.02 * v_dc_star,
            dv_ac: 0.02 * voltage_ll,
            di_ac: 0.02 * i_rated,
            dtheta: 0.5,
            dc_amplitude: 0.05 * rated_power / v_dc_star,
            ac_amplitude: 0.05 * i_rated,
            omega_max: 300.0,
            tones: 3,
            adversarial: false,
        }
    }

    /// The same spec with no perturbation of state or input.
    pub fn unperturbed(&self) -> Self {
        Self { dv_dc: 0.0, dv_ac: 0.0, di_ac: 0.0, dtheta: 0.0, dc_amplitude: 0.0, ac_amplitude: 0.0, ..*self }
    }
}

fn sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn draw_tones(rng: &mut ChaCha8Rng, amplitude: f64, spec: &InputSpec) -> Vec<Tone> {
    if amplitude <= 0.0 || spec.tones == 0 {
        return Vec::new();
    }
    (0..spec.tones)
        .map(|_| Tone {
            amplitude: rng.random_range(0.0..=amplitude / spec.tones as f64),
            omega: rng.random_range(1.0..=spec.omega_max.max(1.0)),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect()
}

/// Simulates a reference run sitting on the setpoint equilibrium
/// (`v̄_dc = v*`, `θ̄ = θ*(t)`) and a perturbed run with a random initial
/// offset and random band-limited input perturbations. Returns
/// `(perturbed, reference)`.
pub fn random_trajectory_pair(
    p: &InverterParams,
    g: &HacGains,
    spec: &InputSpec,
    seed: u64,
) -> Result<(Trajectory, Trajectory), VerifyError> {
    let eq = equilibrium_with_resistive_load(p, g, spec.load_current);
    let x_ref = InverterState {
        v_dc: eq.v_dc_eq,
        v_ac: eq.v_dq_eq,
        i_ac: eq.i_dq_eq,
        theta: g.theta_star(0.0),
    };
    let reference = InverterSim {
        p: *p,
        g: *g,
        i_dc_ref: eq.input_eq.i_dc_ref,
        i_load_dq: eq.input_eq.i_load,
        perturbation: InputPerturbation::default(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = InverterState {
        v_dc: x_ref.v_dc + sym(&mut rng, spec.dv_dc),
        v_ac: x_ref.v_ac + Vec2::new(sym(&mut rng, spec.dv_ac), sym(&mut rng, spec.dv_ac)),
        i_ac: x_ref.i_ac + Vec2::new(sym(&mut rng, spec.di_ac), sym(&mut rng, spec.di_ac)),
        theta: x_ref.theta + sym(&mut rng, spec.dtheta),
    };
    let mut perturbation = InputPerturbation {
        load_alpha: draw_tones(&mut rng, spec.ac_amplitude, spec),
        load_beta: draw_tones(&mut rng, spec.ac_amplitude, spec),
        ..Default::default()
    };
    if spec.adversarial {
        if spec.dc_amplitude > 0.0 {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            perturbation.dc_step = Some(SmoothStep {
                amplitude: sign * spec.dc_amplitude,
                start: 0.1 * spec.t_end,
                ramp: 0.05 * spec.t_end,
            });
        }
    } else {
        perturbation.dc = draw_tones(&mut rng, spec.dc_amplitude, spec);
    }
    let mut perturbed = InverterSim { perturbation, ..reference.clone() };
    let mut reference = reference;

    let span = (0.0, spec.t_end);
    let opts = IntegrateOptions::default();
    let a = integrate(&mut perturbed, &x0.to_array(), span, spec.dt, &[], opts)?;
    let b = integrate(&mut reference, &x_ref.to_array(), span, spec.dt, &[], opts)?;
    Ok((a, b))
}

/// Composite Simpson integral of uniformly spaced samples at every sample
/// index. Odd interval counts close with the 3/8 rule; a single interval
/// uses the trapezoid rule.
pub fn cumulative_simpson(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    // even[k] for even k: Simpson integral over [0, k]
    let mut even = vec![0.0; n];
    let mut k = 2;
    while k < n {
        even[k] = even[k - 2] + h / 3.0 * (values[k - 2] + 4.0 * values[k - 1] + values[k]);
        k += 2;
    }
    for k in 1..n {
        out[k] = if k % 2 == 0 {
            even[k]
        } else if k == 1 {
            0.5 * h * (values[0] + values[1])
        } else {
            even[k - 3] + 3.0 * h / 8.0 * (values[k - 3] + 3.0 * (values[k - 2] + values[k - 1]) + values[k])
        };
    }
    out
}

/// Composite Simpson integral over all samples.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    cumulative_simpson(values, h).last().copied().unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub samples: usize,
    pub dt: f64,
    pub storage_start: f64,
    pub storage_end: f64,
    /// `∫ δuᵀ δy dt` (J).
    pub supplied: f64,
    /// `supplied − (storage_end − storage_start)` (J).
    pub slack: f64,
    /// `∫ ‖δy‖² dt`.
    pub output_energy: f64,
    /// Output-strict weight used for `strict_margin`.
    pub rho: f64,
    /// `slack − ρ ∫‖δy‖²` (J).
    pub strict_margin: f64,
    /// Largest ρ with `strict_margin ≥ −tol`.
    pub rho_max: f64,
    pub tol: f64,
    pub passed: bool,
    /// `max(0, −min_t slack(t))` over the cumulative slack.
    pub worst_negative_excursion: f64,
    /// `max_t |V(t) − V(0) − ∫ V̇|`, with `V̇` evaluated exactly from the
    /// model: the part of the balance produced by discretization.
    pub discretization_defect: f64,
    /// Fraction of interior samples where the difference quotient of `V`
    /// stays below the supply rate plus `tol / T`.
    pub pointwise_fraction: f64,
    /// `|δθ|` reached `2π` somewhere; the storage is then outside its
    /// validated region.
    pub outside_region: bool,
}

struct Pair<'a> {
    a: &'a Trajectory,
    b: &'a Trajectory,
}

impl Pair<'_> {
    fn new<'a>(a: &'a Trajectory, b: &'a Trajectory) -> Result<Pair<'a>, VerifyError> {
        for t in [a, b] {
            if t.dim != InverterState::DIM || t.output_labels.len() != OUTPUT_LABELS.len() {
                return Err(VerifyError::Shape(format!("dim {}, {} outputs", t.dim, t.output_labels.len())));
            }
        }
        if a.len() != b.len() {
            return Err(VerifyError::GridMismatch(format!("{} vs {} samples", a.len(), b.len())));
        }
        if a.len() < 2 {
            return Err(VerifyError::GridMismatch("fewer than two samples".into()));
        }
        let h = a.step();
        for (ta, tb) in a.times.iter().zip(&b.times) {
            if (ta - tb).abs() > 1e-9 * h {
                return Err(VerifyError::GridMismatch(format!("t = {ta} vs {tb}")));
            }
        }
        Ok(Pair { a, b })
    }

    fn error(&self, k: usize) -> ErrorState {
        ErrorState::between(&InverterState::from_slice(self.a.state(k)), &InverterState::from_slice(self.b.state(k)))
    }

    fn supply_rate(&self, k: usize) -> f64 {
        let (oa, ob) = (self.a.output(k), self.b.output(k));
        (0..3).map(|j| (oa[3 + j] - ob[3 + j]) * (oa[j] - ob[j])).sum()
    }

    fn output_sq(&self, k: usize) -> f64 {
        let (oa, ob) = (self.a.output(k), self.b.output(k));
        (0..3).map(|j| (oa[j] - ob[j]).powi(2)).sum()
    }

    fn input(traj: &Trajectory, k: usize) -> PortInput {
        let o = traj.output(k);
        PortInput { i_dc_ref: o[3], i_load: Vec2::new(-o[4], -o[5]) }
    }

    /// Exact storage rate from the model right-hand sides.
    fn storage_rate(&self, k: usize, p: &InverterParams, g: &HacGains, lambda: f64) -> f64 {
        let t = self.a.times[k];
        let xa = InverterState::from_slice(self.a.state(k));
        let xb = InverterState::from_slice(self.b.state(k));
        let fa = closed_loop_rhs(&xa, &Self::input(self.a, k), p, g, t);
        let fb = closed_loop_rhs(&xb, &Self::input(self.b, k), p, g, t);
        let d = ErrorState::between(&xa, &xb);
        p.c_dc * d.d_v_dc * (fa.v_dc - fb.v_dc)
            + p.c_f * d.d_v_ac.dot(&(fa.v_ac - fb.v_ac))
            + p.l_f * d.d_i_ac.dot(&(fa.i_ac - fb.i_ac))
            + lambda * (0.5 * d.d_theta).sin() * (fa.theta - fb.theta)
    }
}

/// Default tolerance `factor · dt² · T · max|s̈|` for a trajectory pair.
pub fn tolerance_model(a: &Trajectory, b: &Trajectory, factor: f64) -> Result<f64, VerifyError> {
    let pair = Pair::new(a, b)?;
    let n = a.len();
    let h = a.step();
    let s: Vec<f64> = (0..n).map(|k| pair.supply_rate(k)).collect();
    let mut s2 = 0.0f64;
    for k in 1..n - 1 {
        s2 = s2.max(((s[k + 1] - 2.0 * s[k] + s[k - 1]) / (h * h)).abs());
    }
    let span = a.times[n - 1] - a.times[0];
    Ok(factor * h * h * span * s2)
}

/// Checks `V(T) − V(0) ≤ ∫ δuᵀδy + tol` for a perturbed run `a` against a
/// reference run `b`. `tol = None` uses [`tolerance_model`] with the
/// default factor.
pub fn dissipation_check(
    a: &Trajectory,
    b: &Trajectory,
    p: &InverterParams,
    g: &HacGains,
    lambda: f64,
    tol: Option<f64>,
) -> Result<DissipationReport, VerifyError> {
    output_strict_check(a, b, p, g, lambda, 0.0, tol)
}

/// As [`dissipation_check`] with the output-strict term `ρ ∫‖δy‖²`.
pub fn output_strict_check(
    a: &Trajectory,
    b: &Trajectory,
    p: &InverterParams,
    g: &HacGains,
    lambda: f64,
    rho: f64,
    tol: Option<f64>,
) -> Result<DissipationReport, VerifyError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(VerifyError::InvalidLambda(lambda));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(VerifyError::InvalidRho(rho));
    }
    let pair = Pair::new(a, b)?;
    let tol = match tol {
        Some(t) => t,
        None => tolerance_model(a, b, DEFAULT_TOL_FACTOR)?,
    };
    let n = a.len();
    let h = a.step();
    let span = a.times[n - 1] - a.times[0];

    let storage: Vec<f64> = (0..n).map(|k| storage_unchecked(&pair.error(k), p, lambda)).collect();
    let supply: Vec<f64> = (0..n).map(|k| pair.supply_rate(k)).collect();
    let rate: Vec<f64> = (0..n).map(|k| pair.storage_rate(k, p, g, lambda)).collect();
    let out_sq: Vec<f64> = (0..n).map(|k| pair.output_sq(k)).collect();
    let outside_region = (0..n).any(|k| pair.error(k).d_theta.abs() >= 2.0 * PI);

    let cum_supply = cumulative_simpson(&supply, h);
    let cum_rate = cumulative_simpson(&rate, h);
    let mut min_slack = 0.0f64;
    let mut defect = 0.0f64;
    for k in 0..n {
        let dv = storage[k] - storage[0];
        min_slack = min_slack.min(cum_supply[k] - dv);
        defect = defect.max((dv - cum_rate[k]).abs());
    }
    let point_tol = if span > 0.0 { tol / span } else { 0.0 };
    let ok_points = (1..n - 1)
        .filter(|&k| (storage[k + 1] - storage[k - 1]) / (2.0 * h) <= supply[k] + point_tol)
        .count();
    let pointwise_fraction = if n > 2 { ok_points as f64 / (n - 2) as f64 } else { 1.0 };

    let supplied = cum_supply[n - 1];
    let slack = supplied - (storage[n - 1] - storage[0]);
    let output_energy = simpson(&out_sq, h);
    let strict_margin = slack - rho * output_energy;
    let rho_max = if output_energy > 0.0 { ((slack + tol) / output_energy).max(0.0) } else { f64::INFINITY };
    Ok(DissipationReport {
        samples: n,
        dt: h,
        storage_start: storage[0],
        storage_end: storage[n - 1],
        supplied,
        slack,
        output_energy,
        rho,
        strict_margin,
        rho_max,
        tol,
        passed: strict_margin >= -tol,
        worst_negative_excursion: (-min_slack).max(0.0),
        discretization_defect: defect,
        pointwise_fraction,
        outside_region,
    })
}

/// Pointwise storage and supply rate, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseSeries {
    pub times: Vec<f64>,
    pub storage: Vec<f64>,
    pub supply_rate: Vec<f64>,
}

impl PointwiseSeries {
    pub fn new(a: &Trajectory, b: &Trajectory, p: &InverterParams, lambda: f64) -> Result<Self, VerifyError> {
        let pair = Pair::new(a, b)?;
        Ok(Self {
            times: a.times.clone(),
            storage: (0..a.len()).map(|k| storage_unchecked(&pair.error(k), p, lambda)).collect(),
            supply_rate: (0..a.len()).map(|k| pair.supply_rate(k)).collect(),
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time_s", "storage_J", "supply_rate_W"])?;
        for k in 0..self.times.len() {
            out.write_record([self.times[k].to_string(), self.storage[k].to_string(), self.supply_rate[k].to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Result for one seed of a verification campaign.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: DissipationReport,
}

/// Runs [`random_trajectory_pair`] and [`dissipation_check`] for each seed,
/// in parallel, returning results in seed order.
pub fn run_seeds(
    p: &InverterParams,
    g: &HacGains,
    spec: &InputSpec,
    lambda: f64,
    seeds: &[u64],
    tol_factor: f64,
) -> Result<Vec<SeedResult>, VerifyError> {
    seeds
        .par_iter()
        .map(|&seed| {
            let (a, b) = random_trajectory_pair(p, g, spec, seed)?;
            let tol = tolerance_model(&a, &b, tol_factor)?;
            let report = dissipation_check(&a, &b, p, g, lambda, Some(tol))?;
            Ok(SeedResult { seed, report })
        })
        .collect()
}

/// Reference state on the setpoint trajectory at time `t`.
pub fn setpoint_state(p: &InverterParams, g: &HacGains, load_current: f64, t: f64) -> InverterState {
    let eq = equilibrium_with_resistive_load(p, g, load_current);
    let r = g.omega0 * t;
    InverterState {
        v_dc: eq.v_dc_eq,
        v_ac: rotate(&eq.v_dq_eq, r),
        i_ac: rotate(&eq.i_dq_eq, r),
        theta: g.theta_star(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let h = 0.1;
        for n in [2usize, 3, 4, 5, 8, 11] {
            let xs: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
            let f: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 3.0 * x * x - x * x * x).collect();
            let cum = cumulative_simpson(&f, h);
            for k in 2..=n {
                let x = xs[k];
                let exact = x - x * x + x * x * x - 0.25 * x * x * x * x;
                assert!((cum[k] - exact).abs() < 1e-14, "n={n} k={k}");
            }
        }
        assert_eq!(cumulative_simpson(&[1.0, 3.0], 0.5), vec![0.0, 1.0]);
        assert_eq!(simpson(&[], 1.0), 0.0);
    }

    #[test]
    fn smooth_step_shape() {
        let s = SmoothStep { amplitude: 2.0, start: 1.0, ramp: 0.5 };
        assert_eq!(s.eval(0.5), 0.0);
        assert!((s.eval(1.25) - 1.0).abs() < 1e-15);
        assert_eq!(s.eval(2.0), 2.0);
    }
}
