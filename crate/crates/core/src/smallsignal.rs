//! Small-signal analysis in the frame rotating at ω₀.
//!
//! States are `[v_dc, v_d, v_q, i_d, i_q, φ]` with `φ = θ − ω₀t`. The
//! linearization uses the half angle `δφ_lin = δθ/2` as its last state so
//! that the quadratic storage `P = diag(C_dc, C, C, L, L, 2λ)` is the second
//! order expansion of the large-signal storage.

use std::io::Write;

use nalgebra::{DMatrix, Matrix4, Matrix6, Vector4, Vector6};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{Certificate, CertificateReport};
use crate::linalg::{hermitian_part_min_eigenvalue, rot90, symmetric_eigenvalues, unit, Vec2};
use crate::model::{closed_loop_rhs, HacGains, InverterParams, InverterState, PortInput};

pub const STATE_LABELS: [&str; 6] = ["d_v_dc", "d_v_d", "d_v_q", "d_i_d", "d_i_q", "d_phi"];
pub const INPUT_LABELS: [&str; 3] = ["d_i_dc_ref", "-d_i_load_d", "-d_i_load_q"];
pub const OUTPUT_LABELS: [&str; 3] = ["d_v_dc", "d_v_d", "d_v_q"];

const MAX_NEWTON_ITERATIONS: usize = 50;
const EQUILIBRIUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmallSignalError {
    #[error("equilibrium Newton iteration did not converge after {iterations} iterations (scaled residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("lambda = {lambda} must be finite and > 0")]
    InvalidLambda { lambda: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("jwI - A is singular at omega = {omega} rad/s")]
    SingularResolvent { omega: f64 },
    #[error("G(jw) is singular or ill-conditioned at omega = {omega} rad/s (condition number {condition:.3e})")]
    SingularTransfer { omega: f64, condition: f64 },
    #[error("frequency grid must be non-empty, positive and strictly increasing")]
    BadGrid,
}

/// Operating point in the rotating frame. `input_eq.i_load` is in dq
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub v_dc_eq: f64,
    pub v_dq_eq: Vec2,
    pub i_dq_eq: Vec2,
    /// Angle in the rotating frame, `φ = θ − ω₀t` (rad).
    pub theta_eq: f64,
    pub input_eq: PortInput,
}

impl Equilibrium {
    pub fn state(&self) -> [f64; 6] {
        [self.v_dc_eq, self.v_dq_eq.x, self.v_dq_eq.y, self.i_dq_eq.x, self.i_dq_eq.y, self.theta_eq]
    }

    /// Scaled residual of the rotating-frame right-hand side at this point.
    pub fn residual(&self, p: &InverterParams, g: &HacGains) -> f64 {
        scaled_norm(&rotating_rhs(&self.state(), &self.input_eq, p, g), &self.state(), &self.input_eq, p, g)
    }
}

/// Right-hand side in the frame rotating at ω₀.
///
/// At `t = 0` the stationary and rotating frames coincide, so this is the
/// stationary right-hand side minus the frame rotation terms.
pub fn rotating_rhs(z: &[f64; 6], u: &PortInput, p: &InverterParams, g: &HacGains) -> [f64; 6] {
    let x = InverterState::from_slice(z);
    let f = closed_loop_rhs(&x, u, p, g, 0.0);
    let j = rot90();
    let dv = f.v_ac - g.omega0 * (j * x.v_ac);
    let di = f.i_ac - g.omega0 * (j * x.i_ac);
    [f.v_dc, dv.x, dv.y, di.x, di.y, f.theta - g.omega0]
}

fn scales(z: &[f64; 6], u: &PortInput, p: &InverterParams, g: &HacGains) -> [f64; 6] {
    let v_nom = (p.mu * g.v_dc_star).max(1.0);
    let v = Vec2::new(z[1], z[2]).norm().max(v_nom);
    let i = Vec2::new(z[3], z[4])
        .norm()
        .max(u.i_load.norm())
        .max(v_nom * g.omega0 * p.c_f)
        .max(1.0);
    [g.v_dc_star, v, v, i, i, 1.0]
}

fn scaled_norm(f: &[f64; 6], z: &[f64; 6], u: &PortInput, p: &InverterParams, g: &HacGains) -> f64 {
    let s = scales(z, u, p, g);
    f.iter()
        .zip(s)
        .map(|(fk, sk)| (fk / (g.omega0 * sk)).abs())
        .fold(0.0, f64::max)
}

/// Solves for the rotating-frame equilibrium by Newton's method from the
/// flat start `(v*, [μv*, 0], 0, θ*₀)`.
pub fn equilibrium(p: &InverterParams, g: &HacGains, input_eq: &PortInput) -> Result<Equilibrium, SmallSignalError> {
    let mut z = [g.v_dc_star, p.mu * g.v_dc_star, 0.0, 0.0, 0.0, g.theta_star0];
    let mut f = rotating_rhs(&z, input_eq, p, g);
    let mut res = scaled_norm(&f, &z, input_eq, p, g);
    let mut iterations = 0;
    while iterations < MAX_NEWTON_ITERATIONS && res > 1e-14 {
        iterations += 1;
        let jac = state_jacobian(p, g, &z, input_eq);
        let Some(step) = jac.lu().solve(&-Vector6::from_column_slice(&f)) else {
            break;
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = z;
            for k in 0..6 {
                trial[k] += alpha * step[k];
            }
            let ft = rotating_rhs(&trial, input_eq, p, g);
            let rt = scaled_norm(&ft, &trial, input_eq, p, g);
            if rt < res {
                z = trial;
                f = ft;
                res = rt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res < EQUILIBRIUM_TOL {
        Ok(Equilibrium {
            v_dc_eq: z[0],
            v_dq_eq: Vec2::new(z[1], z[2]),
            i_dq_eq: Vec2::new(z[3], z[4]),
            theta_eq: z[5],
            input_eq: *input_eq,
        })
    } else {
        Err(SmallSignalError::NoConvergence { iterations, residual: res })
    }
}

/// Equilibrium with `v_dc = v*` and `φ = θ*₀` for a given dq load current.
/// The DC reference current is chosen so that this point is an equilibrium.
pub fn equilibrium_at_setpoint(p: &InverterParams, g: &HacGains, i_load_dq: &Vec2) -> Equilibrium {
    let psi = unit(g.theta_star0);
    let w = g.omega0;
    // unknowns [v_d, v_q, i_d, i_q]:
    //   −G v − C ω₀ J v + i = i_load
    //   −v − R i − L ω₀ J i = −μ v* ψ
    #[rustfmt::skip]
    let m = Matrix4::new(
        -p.g_f,       w * p.c_f,  1.0,          0.0,
        -w * p.c_f,   -p.g_f,     0.0,          1.0,
        -1.0,         0.0,        -p.r_f,       w * p.l_f,
        0.0,          -1.0,       -w * p.l_f,   -p.r_f,
    );
    let rhs = Vector4::new(i_load_dq.x, i_load_dq.y, -p.mu * g.v_dc_star * psi.x, -p.mu * g.v_dc_star * psi.y);
    let sol = m.lu().solve(&rhs).expect("filter network with R > 0 is nonsingular");
    let i = Vec2::new(sol[2], sol[3]);
    Equilibrium {
        v_dc_eq: g.v_dc_star,
        v_dq_eq: Vec2::new(sol[0], sol[1]),
        i_dq_eq: i,
        theta_eq: g.theta_star0,
        input_eq: PortInput {
            i_dc_ref: p.g_dc * g.v_dc_star + p.mu * psi.dot(&i),
            i_load: *i_load_dq,
        },
    }
}

/// Setpoint equilibrium supplying a load current of magnitude `i_load_norm`
/// in phase with the capacitor voltage.
pub fn equilibrium_with_resistive_load(p: &InverterParams, g: &HacGains, i_load_norm: f64) -> Equilibrium {
    let mut dir = unit(g.theta_star0);
    let mut eq = equilibrium_at_setpoint(p, g, &(i_load_norm * dir));
    for _ in 0..50 {
        let next = eq.v_dq_eq.normalize();
        let change = (next - dir).norm();
        dir = next;
        eq = equilibrium_at_setpoint(p, g, &(i_load_norm * dir));
        if change < 1e-15 {
            break;
        }
    }
    eq
}

/// Linearized model in `[δv_dc, δv_dq, δi_dq, δθ/2]` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, SmallSignalError> {
        let n = a.nrows();
        let ok = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && d.nrows() == c.nrows()
            && d.ncols() == b.ncols();
        if !ok {
            return Err(SmallSignalError::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }
}

/// Unscaled matrix `Ā` with `S·ẋ_lin = Ā·x_lin`, `S = diag(C_dc, C, C, L, L, 1)`.
pub fn a_bar(p: &InverterParams, g: &HacGains, eq: &Equilibrium) -> Matrix6<f64> {
    let psi = unit(eq.theta_eq);
    let j = rot90();
    let jpsi = j * psi;
    let w = g.omega0;
    let mut a = Matrix6::zeros();
    a[(0, 0)] = -p.g_dc_eff();
    a[(0, 3)] = -p.mu * psi.x;
    a[(0, 4)] = -p.mu * psi.y;
    a[(0, 5)] = -2.0 * p.mu * jpsi.dot(&eq.i_dq_eq);
    for r in 0..2 {
        for c in 0..2 {
            let id = if r == c { 1.0 } else { 0.0 };
            a[(1 + r, 1 + c)] = -p.g_f * id - p.c_f * w * j[(r, c)];
            a[(1 + r, 3 + c)] = id;
            a[(3 + r, 1 + c)] = -id;
            a[(3 + r, 3 + c)] = -p.r_f * id - p.l_f * w * j[(r, c)];
        }
        a[(3 + r, 0)] = p.mu * psi[r];
        a[(3 + r, 5)] = 2.0 * p.mu * eq.v_dc_eq * jpsi[r];
    }
    a[(5, 0)] = 0.5 * g.eta;
    a[(5, 5)] = -0.5 * g.gamma * (0.5 * (eq.theta_eq - g.theta_star0)).cos();
    a
}

fn scaling(p: &InverterParams) -> [f64; 6] {
    [p.c_dc, p.c_f, p.c_f, p.l_f, p.l_f, 1.0]
}

/// Builds `A_lin = S⁻¹Ā`, `B_lin`, `C_lin = [I₃ 0]` and `D_lin = 0`.
pub fn linearize(p: &InverterParams, g: &HacGains, eq: &Equilibrium) -> StateSpace {
    let s = scaling(p);
    let ab = a_bar(p, g, eq);
    let a = DMatrix::from_fn(6, 6, |r, c| ab[(r, c)] / s[r]);
    let mut b = DMatrix::zeros(6, 3);
    b[(0, 0)] = 1.0 / p.c_dc;
    b[(1, 1)] = 1.0 / p.c_f;
    b[(2, 2)] = 1.0 / p.c_f;
    let mut c = DMatrix::zeros(3, 6);
    for k in 0..3 {
        c[(k, k)] = 1.0;
    }
    StateSpace { a, b, c, d: DMatrix::zeros(3, 3) }
}

/// Jacobian of [`rotating_rhs`] with respect to `[v_dc, v_dq, i_dq, φ]`.
fn state_jacobian(p: &InverterParams, g: &HacGains, z: &[f64; 6], u: &PortInput) -> Matrix6<f64> {
    let eq = Equilibrium {
        v_dc_eq: z[0],
        v_dq_eq: Vec2::new(z[1], z[2]),
        i_dq_eq: Vec2::new(z[3], z[4]),
        theta_eq: z[5],
        input_eq: *u,
    };
    let a = linearize(p, g, &eq).a;
    // δθ = 2·δφ_lin
    Matrix6::from_fn(|r, c| {
        let left = if r == 5 { 2.0 } else { 1.0 };
        let right = if c == 5 { 0.5 } else { 1.0 };
        left * a[(r, c)] * right
    })
}

/// Quadratic storage matrix `P = diag(C_dc, C, C, L, L, 2λ)`.
pub fn storage_matrix(p: &InverterParams, lambda: f64) -> Result<DMatrix<f64>, SmallSignalError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SmallSignalError::InvalidLambda { lambda });
    }
    Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        p.c_dc,
        p.c_f,
        p.c_f,
        p.l_f,
        p.l_f,
        2.0 * lambda,
    ])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiResidual {
    /// `−(AᵀP + PA)/2`; passivity requires it to be positive semidefinite.
    pub matrix: DMatrix<f64>,
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
}

impl LmiResidual {
    pub fn min_eig(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::INFINITY)
    }
}

pub fn lmi_residual(ss: &StateSpace, pmat: &DMatrix<f64>) -> Result<LmiResidual, SmallSignalError> {
    let n = ss.states();
    if pmat.nrows() != n || pmat.ncols() != n {
        return Err(SmallSignalError::Dimension(format!(
            "P is {}x{} but A is {n}x{n}",
            pmat.nrows(),
            pmat.ncols()
        )));
    }
    let pa = pmat * &ss.a;
    let mut m = -0.5 * (&pa + pa.transpose());
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
    let eigenvalues = symmetric_eigenvalues(&m);
    Ok(LmiResidual { matrix: m, eigenvalues })
}

/// The reduced dissipation matrix written directly from the parameters, with
/// `τ* = (λη − 2μ(Jψ*)ᵀ i*)/2`.
pub fn lmi_display(p: &InverterParams, g: &HacGains, eq: &Equilibrium, lambda: f64) -> DMatrix<f64> {
    let psi = unit(eq.theta_eq);
    let jpsi = rot90() * psi;
    let tau = 0.5 * (lambda * g.eta - 2.0 * p.mu * jpsi.dot(&eq.i_dq_eq));
    let mut m = DMatrix::zeros(6, 6);
    m[(0, 0)] = p.g_dc_eff();
    m[(1, 1)] = p.g_f;
    m[(2, 2)] = p.g_f;
    m[(3, 3)] = p.r_f;
    m[(4, 4)] = p.r_f;
    m[(5, 5)] = lambda * g.gamma * (0.5 * (eq.theta_eq - g.theta_star0)).cos();
    m[(0, 5)] = -tau;
    m[(5, 0)] = -tau;
    for r in 0..2 {
        let e = -p.mu * eq.v_dc_eq * jpsi[r];
        m[(3 + r, 5)] = e;
        m[(5, 3 + r)] = e;
    }
    m
}

/// `BᵀP − C`. Structural zeros come out as exact zeros; the entries that
/// pair `1/C` with `C` are zero up to one rounding of the product.
pub fn passive_pairing_residual(ss: &StateSpace, pmat: &DMatrix<f64>) -> DMatrix<f64> {
    ss.b.transpose() * pmat - &ss.c
}

/// Full KYP block `[[AᵀP + PA, PB − Cᵀ], [BᵀP − C, −D − Dᵀ]]`; passivity
/// requires it to be negative semidefinite.
pub fn kyp_matrix(ss: &StateSpace, pmat: &DMatrix<f64>) -> DMatrix<f64> {
    let n = ss.states();
    let m = ss.b.ncols();
    let pa = pmat * &ss.a;
    let top_left = &pa + pa.transpose();
    let top_right = pmat * &ss.b - ss.c.transpose();
    let bottom = -(&ss.d + ss.d.transpose());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&top_left);
    k.view_mut((0, n), (n, m)).copy_from(&top_right);
    k.view_mut((n, 0), (m, n)).copy_from(&top_right.transpose());
    k.view_mut((n, n), (m, m)).copy_from(&bottom);
    k
}

/// Small-signal certificate conditions with `‖ī_dq‖` in place of `‖ī_αβ‖`.
///
/// The rotation to dq coordinates preserves norms, so the slacks are the
/// same expressions as the large-signal ones.
pub fn smallsignal_conditions(p: &InverterParams, g: &HacGains, c: &Certificate) -> CertificateReport {
    let i_dq_max = c.envelope.i_ac_norm_max;
    let v_bar = c.envelope.v_dc_bar_max;
    let r_slack = p.r_f - c.eps2 * c.eps2;
    let t1 = c.eps1 * i_dq_max * p.mu;
    let dc_slack = p.g_dc_eff() - t1 * t1;
    let t2 = p.mu * v_bar / c.eps2;
    let big_lambda = c.lambda * g.gamma - 1.0 / (c.eps1 * c.eps1) - t2 * t2;
    let tau = 0.5 * c.lambda * g.eta;
    let margins = [r_slack, dc_slack, big_lambda * dc_slack - tau * tau];

    let mut q = DMatrix::zeros(6, 6);
    q[(0, 0)] = dc_slack;
    q[(1, 1)] = p.g_f;
    q[(2, 2)] = p.g_f;
    q[(3, 3)] = r_slack;
    q[(4, 4)] = r_slack;
    q[(5, 5)] = big_lambda;
    q[(0, 5)] = -tau;
    q[(5, 0)] = -tau;
    CertificateReport::assemble(margins, p.g_f, &q, 0.0)
}

/// `G(jω) = C(jωI − A)⁻¹B + D`.
pub fn transfer(ss: &StateSpace, omega: f64) -> Result<DMatrix<Complex64>, SmallSignalError> {
    let n = ss.states();
    let d = ss.d.map(|x| Complex64::new(x, 0.0));
    if n == 0 {
        return Ok(d);
    }
    let mut res = ss.a.map(|x| Complex64::new(-x, 0.0));
    for k in 0..n {
        res[(k, k)] += Complex64::new(0.0, omega);
    }
    let b = ss.b.map(|x| Complex64::new(x, 0.0));
    let lu = res.lu();
    let x = lu.solve(&b).ok_or(SmallSignalError::SingularResolvent { omega })?;
    if !x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return Err(SmallSignalError::SingularResolvent { omega });
    }
    Ok(ss.c.map(|x| Complex64::new(x, 0.0)) * x + d)
}

/// Input-feedforward passivity index `λ_min((G + Gᴴ)/2)` at `jω`.
pub fn ifp(ss: &StateSpace, omega: f64) -> Result<f64, SmallSignalError> {
    Ok(hermitian_part_min_eigenvalue(&transfer(ss, omega)?))
}

fn one_norm(m: &DMatrix<Complex64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Output-feedback passivity index `λ_min((G⁻¹ + G⁻ᴴ)/2)` at `jω`.
pub fn ofp(ss: &StateSpace, omega: f64) -> Result<f64, SmallSignalError> {
    let gm = transfer(ss, omega)?;
    let singular = SmallSignalError::SingularTransfer { omega, condition: f64::INFINITY };
    let inv = gm.clone().try_inverse().ok_or(singular.clone())?;
    let condition = one_norm(&gm) * one_norm(&inv);
    if !(condition <= 1e12) {
        return Err(SmallSignalError::SingularTransfer { omega, condition });
    }
    Ok(hermitian_part_min_eigenvalue(&inv))
}

/// A grid point at which an index could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGap {
    pub index: usize,
    pub omega: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub omegas: Vec<f64>,
    /// IFP per grid point; `NaN` at gaps.
    pub ifp: Vec<f64>,
    /// OFP per grid point; `NaN` at gaps.
    pub ofp: Vec<f64>,
    pub gaps: Vec<SweepGap>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["omega_rad_s", "freq_hz", "ifp", "ofp"])?;
        for k in 0..self.omegas.len() {
            let om = self.omegas[k];
            out.write_record([
                om.to_string(),
                (om / (2.0 * std::f64::consts::PI)).to_string(),
                self.ifp[k].to_string(),
                self.ofp[k].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `n` log-spaced frequencies over `[lo, hi]` rad/s.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

/// Default sweep grid: 400 log-spaced points over `[0.1, 1e4]` rad/s.
pub fn default_grid() -> Vec<f64> {
    log_grid(0.1, 1e4, 400)
}

/// Evaluates IFP and OFP on a grid. Points that fail are recorded as gaps.
pub fn sweep(ss: &StateSpace, omega_grid: &[f64]) -> Result<SweepResult, SmallSignalError> {
    let valid = !omega_grid.is_empty()
        && omega_grid.iter().all(|w| *w > 0.0 && w.is_finite())
        && omega_grid.windows(2).all(|w| w[1] > w[0]);
    if !valid {
        return Err(SmallSignalError::BadGrid);
    }
    let points: Vec<(Result<f64, SmallSignalError>, Result<f64, SmallSignalError>)> =
        omega_grid.par_iter().map(|&w| (ifp(ss, w), ofp(ss, w))).collect();
    let mut result = SweepResult {
        omegas: omega_grid.to_vec(),
        ifp: Vec::with_capacity(points.len()),
        ofp: Vec::with_capacity(points.len()),
        gaps: Vec::new(),
    };
    for (index, (a, b)) in points.into_iter().enumerate() {
        let omega = omega_grid[index];
        for (value, dest) in [(a, &mut result.ifp), (b, &mut result.ofp)] {
            match value {
                Ok(v) => dest.push(v),
                Err(e) => {
                    dest.push(f64::NAN);
                    result.gaps.push(SweepGap { index, omega, reason: e.to_string() });
                }
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{check_conditions, synthesize_certificate, OperatingEnvelope};
    use crate::model::{PerUnitBase, PerUnitKind};
    use std::f64::consts::PI;

    fn inverter2() -> (InverterParams, HacGains, PerUnitBase) {
        let base = PerUnitBase::new(192e6, 690.0, 2.0 * PI * 60.0).unwrap();
        let p = InverterParams {
            c_dc: 14.44,
            g_dc: 0.15,
            c_f: base.to_si(0.05, PerUnitKind::Capacitance),
            g_f: base.to_si(1e-4, PerUnitKind::Conductance),
            l_f: base.to_si(0.05, PerUnitKind::Inductance),
            r_f: base.to_si(0.05 / 30.0, PerUnitKind::Resistance),
            mu: 1.025 * 690.0 / 1130.0,
            kappa: 1.5123e4,
        };
        let g = HacGains { omega0: 2.0 * PI * 60.0, eta: 1e-3, gamma: 100.0, v_dc_star: 1130.0, theta_star0: 0.0108 };
        (p, g, base)
    }

    #[test]
    fn equilibrium_no_load() {
        let (p, g, _) = inverter2();
        let u = PortInput { i_dc_ref: p.g_dc * g.v_dc_star, i_load: Vec2::zeros() };
        let eq = equilibrium(&p, &g, &u).unwrap();
        assert!(eq.residual(&p, &g) < 1e-9);
        // only the capacitor charging current flows
        let i_cap = p.mu * g.v_dc_star * g.omega0 * p.c_f;
        assert!(eq.i_dq_eq.norm() < 1.1 * i_cap);
        let again = equilibrium(&p, &g, &u).unwrap();
        assert_eq!(eq, again);
    }

    #[test]
    fn setpoint_equilibrium_is_an_equilibrium() {
        let (p, g, base) = inverter2();
        let eq = equilibrium_with_resistive_load(&p, &g, 0.5 * base.current());
        assert!(eq.residual(&p, &g) < 1e-12);
        let solved = equilibrium(&p, &g, &eq.input_eq).unwrap();
        for (a, b) in solved.state().iter().zip(eq.state()) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0), "{a} vs {b}");
        }
        let cos = eq.input_eq.i_load.dot(&eq.v_dq_eq) / (eq.input_eq.i_load.norm() * eq.v_dq_eq.norm());
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn b_sparsity_and_passive_pairing() {
        let (p, g, base) = inverter2();
        let eq = equilibrium_with_resistive_load(&p, &g, 0.5 * base.current());
        let ss = linearize(&p, &g, &eq);
        for r in 0..6 {
            for c in 0..3 {
                let expected = match (r, c) {
                    (0, 0) => 1.0 / p.c_dc,
                    (1, 1) | (2, 2) => 1.0 / p.c_f,
                    _ => 0.0,
                };
                assert_eq!(ss.b[(r, c)], expected);
            }
        }
        assert!(ss.d.iter().all(|x| *x == 0.0));
        let pm = storage_matrix(&p, 3.7e9).unwrap();
        let r = passive_pairing_residual(&ss, &pm);
        assert!(r.iter().all(|x| x.abs() <= f64::EPSILON), "{r}");
    }

    #[test]
    fn zero_frequency_removes_frame_coupling() {
        let (p, g, base) = inverter2();
        let g0 = HacGains { omega0: 0.0, ..g };
        let eq = equilibrium_with_resistive_load(&p, &g, 0.3 * base.current());
        let a = a_bar(&p, &g0, &eq);
        assert_eq!(a[(1, 2)], 0.0);
        assert_eq!(a[(2, 1)], 0.0);
        assert_eq!(a[(3, 4)], 0.0);
        assert_eq!(a[(4, 3)], 0.0);
        let a = a_bar(&p, &g, &eq);
        assert_eq!(a[(1, 2)], g.omega0 * p.c_f);
        assert_eq!(a[(3, 4)], g.omega0 * p.l_f);
    }

    #[test]
    fn storage_matrix_examples() {
        let unit_p = InverterParams { c_dc: 1.0, g_dc: 0.0, c_f: 1.0, g_f: 0.0, l_f: 1.0, r_f: 1.0, mu: 0.5, kappa: 0.0 };
        let pm = storage_matrix(&unit_p, 1.0).unwrap();
        let diag: Vec<f64> = pm.diagonal().iter().copied().collect();
        assert_eq!(diag, vec![1.0, 1.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(storage_matrix(&unit_p, 0.0).is_err());
        assert!(storage_matrix(&unit_p, -2.0).is_err());
        let (p, _, _) = inverter2();
        let pm = storage_matrix(&p, 1e-7).unwrap();
        let min = symmetric_eigenvalues(&pm)[0];
        assert_eq!(min, p.c_f.min(p.l_f).min(p.c_dc).min(2e-7));
    }

    #[test]
    fn display_matrix_matches_computed_residual() {
        let (p, g, base) = inverter2();
        for load in [0.0, 0.4, 1.2] {
            let eq = equilibrium_with_resistive_load(&p, &g, load * base.current());
            let ss = linearize(&p, &g, &eq);
            let lambda = 2.3e9;
            let r = lmi_residual(&ss, &storage_matrix(&p, lambda).unwrap()).unwrap();
            let d = lmi_display(&p, &g, &eq, lambda);
            for i in 0..6 {
                for j in 0..6 {
                    let scale = d.row(i).amax().max(d.column(j).amax());
                    assert!((r.matrix[(i, j)] - d[(i, j)]).abs() <= 1e-10 * scale, "({i},{j}) {} vs {}", r.matrix[(i, j)], d[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn decoupled_lmi_is_diagonal() {
        let (p, g, base) = inverter2();
        let p0 = InverterParams { mu: 0.0, ..p };
        let g0 = HacGains { eta: 0.0, ..g };
        let eq = equilibrium_with_resistive_load(&p0, &g0, 0.2 * base.current());
        let lambda = 5.0;
        let r = lmi_residual(&linearize(&p0, &g0, &eq), &storage_matrix(&p0, lambda).unwrap()).unwrap();
        let expected = [p0.g_dc_eff(), p0.g_f, p0.g_f, p0.r_f, p0.r_f, lambda * g0.gamma];
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { expected[i] } else { 0.0 };
                assert!((r.matrix[(i, j)] - e).abs() <= 1e-12 * e.abs().max(1.0), "({i},{j})");
            }
        }
        let min = expected.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((r.min_eig() - min).abs() <= 1e-12 * min);
    }

    #[test]
    fn kyp_block_agrees_with_reduced_form() {
        let (p, g, base) = inverter2();
        let env = OperatingEnvelope::rated(g.v_dc_star, &base);
        let cert = synthesize_certificate(&p, &g, &env).unwrap();
        let eq = equilibrium_with_resistive_load(&p, &g, 0.5 * base.current());
        let ss = linearize(&p, &g, &eq);
        let pm = storage_matrix(&p, cert.lambda).unwrap();
        let reduced = lmi_residual(&ss, &pm).unwrap();
        assert!(reduced.min_eig() >= 0.0);
        let k = kyp_matrix(&ss, &pm);
        // off-diagonal block vanishes, D = 0: the full block is diag(−2M, 0)
        let eig = symmetric_eigenvalues(&(-k));
        assert!(eig[0] >= -1e-12 * reduced.matrix.amax());
    }

    #[test]
    fn smallsignal_margins_equal_large_signal() {
        let (p, g, base) = inverter2();
        let env = OperatingEnvelope::rated(g.v_dc_star, &base);
        let c = synthesize_certificate(&p, &g, &env).unwrap();
        let a = smallsignal_conditions(&p, &g, &c);
        let b = check_conditions(&p, &g, &c);
        assert_eq!(a, b);
        let big = Certificate { eps1: 1e6, ..c };
        let r = smallsignal_conditions(&p, &g, &big);
        assert!(!r.feasible);
        assert!(r.margins[1] < 0.0);
    }

    #[test]
    fn static_system_ifp_is_min_eig_of_d() {
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let ss = StateSpace::new(DMatrix::zeros(0, 0), DMatrix::zeros(0, 2), DMatrix::zeros(2, 0), d.clone()).unwrap();
        let expected = symmetric_eigenvalues(&d)[0];
        for w in [0.1, 3.0, 1e4] {
            assert!((ifp(&ss, w).unwrap() - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn first_order_lag() {
        let one = |x: f64| DMatrix::from_element(1, 1, x);
        let ss = StateSpace::new(one(-1.0), one(1.0), one(1.0), one(0.0)).unwrap();
        assert!((ifp(&ss, 0.0).unwrap() - 1.0).abs() < 1e-15);
        for w in [0.5, 2.0, 100.0] {
            // Re 1/(1 + jw) = 1/(1 + w²)
            assert!((ifp(&ss, w).unwrap() - 1.0 / (1.0 + w * w)).abs() < 1e-15);
            assert!((ifp(&ss, -w).unwrap() - ifp(&ss, w).unwrap()).abs() < 1e-15);
            // 1/G = 1 + jw
            assert!((ofp(&ss, w).unwrap() - 1.0).abs() < 1e-12);
        }
        let hi = ifp(&ss, 1e8).unwrap();
        assert!(hi > 0.0 && hi < 1e-15);
        let bad = StateSpace::new(one(0.0), one(1.0), one(1.0), one(0.0)).unwrap();
        assert!(matches!(ifp(&bad, 0.0), Err(SmallSignalError::SingularResolvent { .. })));
    }

    #[test]
    fn sweep_grid_handling() {
        let one = |x: f64| DMatrix::from_element(1, 1, x);
        let ss = StateSpace::new(one(-1.0), one(1.0), one(1.0), one(0.0)).unwrap();
        let r = sweep(&ss, &[2.0]).unwrap();
        assert_eq!(r.omegas.len(), 1);
        assert!(sweep(&ss, &[3.0, 2.0]).is_err());
        assert!(sweep(&ss, &[]).is_err());
        let grid = default_grid();
        assert_eq!(grid.len(), 400);
        assert!((grid[0] - 0.1).abs() < 1e-15 && (grid[399] - 1e4).abs() < 1e-9);
        let r = sweep(&ss, &grid).unwrap();
        assert!(r.gaps.is_empty());
        assert_eq!(r.ifp.len(), 400);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("omega_rad_s,freq_hz,ifp,ofp\n"));
        assert_eq!(text.lines().count(), 401);
    }

    #[test]
    fn ofp_gap_on_rank_deficient_transfer() {
        // two outputs reading the same state: G(jω) is rank one
        let ss = StateSpace::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let r = sweep(&ss, &[1.0, 2.0]).unwrap();
        assert_eq!(r.gaps.len(), 2);
        assert!(r.ofp.iter().all(|x| x.is_nan()));
        assert!(r.ifp.iter().all(|x| x.is_finite()));
    }
}
