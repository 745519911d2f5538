//! Averaged two-level inverter under hybrid-angle control.
//!
//! All vector quantities live in the stationary αβ frame with the
//! power-invariant scaling, so `vᵀi` is the three-phase instantaneous power
//! and the averaged switch is lossless: `v_dc·i_x = v_xᵀ·i_ac`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{unit, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter `{field}` = {value}: {reason}")]
    InvalidParameter {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
}

fn require(ok: bool, field: &'static str, value: f64, reason: &'static str) -> Result<(), ModelError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { field, value, reason })
    }
}

/// Physical constants of one inverter, in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterParams {
    /// DC-link capacitance (F).
    pub c_dc: f64,
    /// DC-link conductance (S).
    pub g_dc: f64,
    /// AC filter capacitance (F).
    pub c_f: f64,
    /// AC shunt conductance (S).
    pub g_f: f64,
    /// Filter inductance (H).
    pub l_f: f64,
    /// Filter resistance (Ω).
    pub r_f: f64,
    /// Modulation magnitude, in `[0, 1]`.
    pub mu: f64,
    /// Proportional DC-voltage gain of the DC current control (S).
    pub kappa: f64,
}

impl InverterParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        require(self.c_dc > 0.0, "c_dc", self.c_dc, "must be > 0")?;
        require(self.g_dc >= 0.0, "g_dc", self.g_dc, "must be >= 0")?;
        require(self.c_f > 0.0, "c_f", self.c_f, "must be > 0")?;
        require(self.g_f >= 0.0, "g_f", self.g_f, "must be >= 0")?;
        require(self.l_f > 0.0, "l_f", self.l_f, "must be > 0")?;
        require(self.r_f > 0.0, "r_f", self.r_f, "must be > 0")?;
        require((0.0..=1.0).contains(&self.mu), "mu", self.mu, "must lie in [0, 1]")?;
        require(self.kappa >= 0.0, "kappa", self.kappa, "must be >= 0")?;
        Ok(())
    }

    /// Effective DC conductance `g_dc + kappa`.
    pub fn g_dc_eff(&self) -> f64 {
        self.g_dc + self.kappa
    }
}

/// Gains and setpoints of the hybrid-angle control law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HacGains {
    /// Nominal angular frequency (rad/s).
    pub omega0: f64,
    /// DC-voltage gain (rad/(s·V)).
    pub eta: f64,
    /// Half-angle feedback gain (rad/s).
    pub gamma: f64,
    /// DC voltage setpoint (V).
    pub v_dc_star: f64,
    /// Angle setpoint in the frame rotating at `omega0` (rad).
    pub theta_star0: f64,
}

impl HacGains {
    pub fn validate(&self) -> Result<(), ModelError> {
        require(self.omega0 > 0.0, "omega0", self.omega0, "must be > 0")?;
        require(self.eta >= 0.0, "eta", self.eta, "must be >= 0")?;
        require(self.gamma >= 0.0, "gamma", self.gamma, "must be >= 0")?;
        require(self.v_dc_star > 0.0, "v_dc_star", self.v_dc_star, "must be > 0")?;
        require(true, "theta_star0", self.theta_star0, "must be finite")?;
        Ok(())
    }

    /// Stationary-frame angle setpoint `θ*(t) = θ*₀ + ω₀ t`.
    pub fn theta_star(&self, t: f64) -> f64 {
        self.theta_star0 + self.omega0 * t
    }
}

/// State of one inverter. Also used for its time derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InverterState {
    pub v_dc: f64,
    pub v_ac: Vec2,
    pub i_ac: Vec2,
    /// Unwrapped modulation angle (rad).
    pub theta: f64,
}

impl InverterState {
    pub const DIM: usize = 6;

    pub fn to_array(&self) -> [f64; 6] {
        [self.v_dc, self.v_ac.x, self.v_ac.y, self.i_ac.x, self.i_ac.y, self.theta]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            v_dc: x[0],
            v_ac: Vec2::new(x[1], x[2]),
            i_ac: Vec2::new(x[3], x[4]),
            theta: x[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// External port signals: DC reference current and AC load current.
///
/// The passivity pairing uses `[i_dc_ref, -i_load]` as input and
/// `[v_dc, v_ac]` as output.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PortInput {
    pub i_dc_ref: f64,
    pub i_load: Vec2,
}

impl PortInput {
    /// Input vector of the passivity pairing, `[i_dc_ref, -i_load]`.
    pub fn pairing_vector(&self) -> [f64; 3] {
        [self.i_dc_ref, -self.i_load.x, -self.i_load.y]
    }
}

impl std::ops::Add for PortInput {
    type Output = PortInput;
    fn add(self, rhs: PortInput) -> PortInput {
        PortInput {
            i_dc_ref: self.i_dc_ref + rhs.i_dc_ref,
            i_load: self.i_load + rhs.i_load,
        }
    }
}

impl std::ops::Sub for PortInput {
    type Output = PortInput;
    fn sub(self, rhs: PortInput) -> PortInput {
        PortInput {
            i_dc_ref: self.i_dc_ref - rhs.i_dc_ref,
            i_load: self.i_load - rhs.i_load,
        }
    }
}

/// Difference between two inverter trajectories, `x - x̄`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorState {
    pub d_v_dc: f64,
    pub d_v_ac: Vec2,
    pub d_i_ac: Vec2,
    pub d_theta: f64,
}

impl ErrorState {
    pub fn between(x: &InverterState, x_ref: &InverterState) -> Self {
        Self {
            d_v_dc: x.v_dc - x_ref.v_dc,
            d_v_ac: x.v_ac - x_ref.v_ac,
            d_i_ac: x.i_ac - x_ref.i_ac,
            d_theta: x.theta - x_ref.theta,
        }
    }
}

/// Modulation signal `μ [cos θ, sin θ]`.
pub fn modulation(theta: f64, mu: f64) -> Result<Vec2, ModelError> {
    require((0.0..=1.0).contains(&mu), "mu", mu, "must lie in [0, 1]")?;
    Ok(mu * unit(theta))
}

/// Hybrid-angle control law: `ω₀ + η(v_dc − v*) − γ sin((θ − θ*(t))/2)`.
pub fn hac_angle_rate(theta: f64, v_dc: f64, t: f64, gains: &HacGains) -> f64 {
    gains.omega0 + gains.eta * (v_dc - gains.v_dc_star)
        - gains.gamma * (0.5 * (theta - gains.theta_star(t))).sin()
}

/// Closed-loop right-hand side of the inverter with DC current control
/// `i_dc = i_dc_ref + κ(v* − v_dc)`.
pub fn closed_loop_rhs(x: &InverterState, u: &PortInput, p: &InverterParams, g: &HacGains, t: f64) -> InverterState {
    let psi = unit(x.theta);
    let i_dc = u.i_dc_ref + p.kappa * (g.v_dc_star - x.v_dc);
    let i_x = p.mu * psi.dot(&x.i_ac);
    let v_x = p.mu * x.v_dc * psi;
    InverterState {
        v_dc: (-p.g_dc * x.v_dc + i_dc - i_x) / p.c_dc,
        v_ac: (-p.g_f * x.v_ac - u.i_load + x.i_ac) / p.c_f,
        i_ac: (-p.r_f * x.i_ac - x.v_ac + v_x) / p.l_f,
        theta: hac_angle_rate(x.theta, x.v_dc, t, g),
    }
}

/// Port output `(v_dc, v_ac)`.
pub fn port_output(x: &InverterState) -> (f64, Vec2) {
    (x.v_dc, x.v_ac)
}

/// Incremental dynamics about a reference trajectory whose angle tracks the
/// setpoint, `θ̄(t) = θ*(t)`.
///
/// `ref_v_dc`, `ref_i_ac` and `ref_theta` are the reference values at the
/// current instant and `du` is the input increment `u − ū`.
pub fn error_rhs(
    dx: &ErrorState,
    du: &PortInput,
    ref_v_dc: f64,
    ref_i_ac: &Vec2,
    ref_theta: f64,
    p: &InverterParams,
    g: &HacGains,
) -> ErrorState {
    let psi_ref = unit(ref_theta);
    let psi = unit(ref_theta + dx.d_theta);
    let d_psi = psi - psi_ref;
    let mu = p.mu;
    ErrorState {
        d_v_dc: (-p.g_dc_eff() * dx.d_v_dc + du.i_dc_ref - mu * (d_psi.dot(ref_i_ac) + psi.dot(&dx.d_i_ac)))
            / p.c_dc,
        d_v_ac: (-p.g_f * dx.d_v_ac + dx.d_i_ac - du.i_load) / p.c_f,
        d_i_ac: (-p.r_f * dx.d_i_ac - dx.d_v_ac + mu * (psi * dx.d_v_dc + d_psi * ref_v_dc)) / p.l_f,
        d_theta: g.eta * dx.d_v_dc - g.gamma * (0.5 * dx.d_theta).sin(),
    }
}

/// Incremental storage
/// `½(C_dc δv_dc² + C‖δv‖² + L‖δi‖²) + 2λ(1 − cos(δθ/2))`.
pub fn storage(dx: &ErrorState, p: &InverterParams, lambda: f64) -> Result<f64, ModelError> {
    require(lambda > 0.0, "lambda", lambda, "must be > 0")?;
    Ok(storage_unchecked(dx, p, lambda))
}

pub(crate) fn storage_unchecked(dx: &ErrorState, p: &InverterParams, lambda: f64) -> f64 {
    // 2λ(1 − cos(x/2)) = 4λ sin²(x/4), without the cancellation
    let s = (0.25 * dx.d_theta).sin();
    0.5 * (p.c_dc * dx.d_v_dc * dx.d_v_dc + p.c_f * dx.d_v_ac.norm_squared() + p.l_f * dx.d_i_ac.norm_squared())
        + 4.0 * lambda * s * s
}

/// Kind of quantity converted by the per-unit helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerUnitKind {
    Inductance,
    Resistance,
    Capacitance,
    Conductance,
}

/// Per-unit base defined by rated power, line-to-line voltage and angular
/// frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub power: f64,
    pub voltage_ll: f64,
    pub omega: f64,
}

impl PerUnitBase {
    pub fn new(power: f64, voltage_ll: f64, omega: f64) -> Result<Self, ModelError> {
        require(power > 0.0, "base_power", power, "must be > 0")?;
        require(voltage_ll > 0.0, "base_voltage_ll", voltage_ll, "must be > 0")?;
        require(omega > 0.0, "base_frequency", omega, "must be > 0")?;
        Ok(Self { power, voltage_ll, omega })
    }

    /// `Z_base = V_ll² / S`.
    pub fn impedance(&self) -> f64 {
        self.voltage_ll * self.voltage_ll / self.power
    }

    /// Magnitude of the rated current vector, `S / V_ll`.
    pub fn current(&self) -> f64 {
        self.power / self.voltage_ll
    }

    fn si_per_pu(&self, kind: PerUnitKind) -> f64 {
        let z = self.impedance();
        match kind {
            PerUnitKind::Resistance => z,
            PerUnitKind::Inductance => z / self.omega,
            PerUnitKind::Capacitance => 1.0 / (z * self.omega),
            PerUnitKind::Conductance => 1.0 / z,
        }
    }

    pub fn to_si(&self, value_pu: f64, kind: PerUnitKind) -> f64 {
        value_pu * self.si_per_pu(kind)
    }

    pub fn to_per_unit(&self, value_si: f64, kind: PerUnitKind) -> f64 {
        value_si / self.si_per_pu(kind)
    }
}

pub fn per_unit_to_si(
    base_power: f64,
    base_voltage_ll: f64,
    base_frequency: f64,
    value_pu: f64,
    kind: PerUnitKind,
) -> Result<f64, ModelError> {
    Ok(PerUnitBase::new(base_power, base_voltage_ll, base_frequency)?.to_si(value_pu, kind))
}

pub fn si_to_per_unit(
    base_power: f64,
    base_voltage_ll: f64,
    base_frequency: f64,
    value_si: f64,
    kind: PerUnitKind,
) -> Result<f64, ModelError> {
    Ok(PerUnitBase::new(base_power, base_voltage_ll, base_frequency)?.to_per_unit(value_si, kind))
}
