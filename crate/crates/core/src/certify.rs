//! Decentralized large-signal incremental passivity certificate.
//!
//! The certificate `(ε₁, ε₂, λ)` bounds the time derivative of the
//! incremental storage by `−ζᵀ Q ζ + δuᵀ δy` with
//! `ζ = [δv_dc, δv_ac, δi_ac, sin(δθ/2)]`. It holds for any reference
//! trajectory inside the operating envelope, so each inverter can be
//! certified without knowing the network it is connected to.

use nalgebra::{DMatrix, Matrix6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{frobenius, symmetric_min_eigenvalue};
use crate::model::{HacGains, InverterParams, PerUnitBase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("invalid {field} = {value}: must be finite and > 0")]
    NonPositive { field: &'static str, value: f64 },
}

fn positive(field: &'static str, value: f64) -> Result<(), CertifyError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(CertifyError::NonPositive { field, value })
    }
}

/// Bounds on the reference trajectory the certificate must cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingEnvelope {
    /// Bound on the reference DC voltage (V).
    pub v_dc_bar_max: f64,
    /// Bound on the reference AC current norm (A).
    pub i_ac_norm_max: f64,
}

impl OperatingEnvelope {
    pub fn new(v_dc_bar_max: f64, i_ac_norm_max: f64) -> Result<Self, CertifyError> {
        positive("v_dc_bar_max", v_dc_bar_max)?;
        positive("i_ac_norm_max", i_ac_norm_max)?;
        Ok(Self { v_dc_bar_max, i_ac_norm_max })
    }

    /// Default envelope: 1.2× the DC setpoint and 1.5× the rated current
    /// vector magnitude `S_N / V_ll`.
    pub fn rated(v_dc_star: f64, rating: &PerUnitBase) -> Self {
        Self {
            v_dc_bar_max: 1.2 * v_dc_star,
            i_ac_norm_max: 1.5 * rating.current(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub eps1: f64,
    pub eps2: f64,
    pub lambda: f64,
    pub envelope: OperatingEnvelope,
}

impl Certificate {
    pub fn validate(&self) -> Result<(), CertifyError> {
        positive("eps1", self.eps1)?;
        positive("eps2", self.eps2)?;
        positive("lambda", self.lambda)?;
        positive("v_dc_bar_max", self.envelope.v_dc_bar_max)?;
        positive("i_ac_norm_max", self.envelope.i_ac_norm_max)
    }

    /// Angle weight `Λ = λγ − 1/ε₁² − (μ v̄_dc / ε₂)²`.
    pub fn angle_weight(&self, p: &InverterParams, g: &HacGains) -> f64 {
        let t = p.mu * self.envelope.v_dc_bar_max / self.eps2;
        self.lambda * g.gamma - 1.0 / (self.eps1 * self.eps1) - t * t
    }

    /// DC weight `G̃_dc − (ε₁ ‖ī‖ μ)²`.
    pub fn dc_weight(&self, p: &InverterParams) -> f64 {
        let t = self.eps1 * self.envelope.i_ac_norm_max * p.mu;
        p.g_dc_eff() - t * t
    }
}

/// Names of the three inequality slacks, in report order.
pub const MARGIN_NAMES: [&str; 3] = [
    "filter: R - eps2^2",
    "dc link: G_dc_eff - (eps1 |i| mu)^2",
    "angle: Lambda * dc_weight - (lambda eta / 2)^2",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub feasible: bool,
    /// Slacks of the three inequalities; each must be positive.
    pub margins: [f64; 3],
    /// Smallest eigenvalue of the dissipation matrix `Q`.
    pub q_min_eig: f64,
    /// `Q ≻ 0` also needs a strictly positive AC shunt conductance.
    pub shunt_conductance: f64,
    /// Whether the inequality route and the eigenvalue route agree (or the
    /// eigenvalue is within `1e-10·‖Q‖` of zero, where neither route is
    /// decisive).
    pub routes_agree: bool,
}

impl CertificateReport {
    pub(crate) fn assemble(margins: [f64; 3], shunt_conductance: f64, q: &DMatrix<f64>, slack_tol: f64) -> Self {
        let q_min_eig = symmetric_min_eigenvalue(q);
        let by_inequalities = margins.iter().all(|m| *m > slack_tol) && shunt_conductance > 0.0;
        let by_eigenvalue = q_min_eig > 0.0;
        let undecided = q_min_eig.abs() <= 1e-10 * frobenius(q);
        Self {
            feasible: by_inequalities,
            margins,
            q_min_eig,
            shunt_conductance,
            routes_agree: undecided || by_inequalities == by_eigenvalue,
        }
    }

    /// Index of the first violated inequality, if any.
    pub fn first_violation(&self) -> Option<usize> {
        self.margins.iter().position(|m| !(*m > 0.0))
    }
}

/// Dissipation matrix `Q` in the coordinates
/// `[δv_dc, δv_α, δv_β, δi_α, δi_β, sin(δθ/2)]`.
pub fn build_q(p: &InverterParams, g: &HacGains, c: &Certificate) -> Matrix6<f64> {
    let mut q = Matrix6::zeros();
    q[(0, 0)] = c.dc_weight(p);
    q[(1, 1)] = p.g_f;
    q[(2, 2)] = p.g_f;
    let filter = p.r_f - c.eps2 * c.eps2;
    q[(3, 3)] = filter;
    q[(4, 4)] = filter;
    q[(5, 5)] = c.angle_weight(p, g);
    let coupling = -0.5 * c.lambda * g.eta;
    q[(0, 5)] = coupling;
    q[(5, 0)] = coupling;
    q
}

fn margins(p: &InverterParams, g: &HacGains, c: &Certificate) -> [f64; 3] {
    let dc = c.dc_weight(p);
    let cross = 0.5 * c.lambda * g.eta;
    [
        p.r_f - c.eps2 * c.eps2,
        dc,
        c.angle_weight(p, g) * dc - cross * cross,
    ]
}

/// Evaluates the three certificate inequalities and, independently, the
/// eigenvalues of `Q`.
pub fn check_conditions(p: &InverterParams, g: &HacGains, c: &Certificate) -> CertificateReport {
    check_conditions_with_tol(p, g, c, 0.0)
}

/// As [`check_conditions`], requiring every margin to exceed `slack_tol`.
pub fn check_conditions_with_tol(p: &InverterParams, g: &HacGains, c: &Certificate, slack_tol: f64) -> CertificateReport {
    let q = build_q(p, g, c);
    let q = DMatrix::from_column_slice(6, 6, q.as_slice());
    CertificateReport::assemble(margins(p, g, c), p.g_f, &q, slack_tol)
}

/// Why no certificate could be synthesized.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum Infeasibility {
    #[error("AC shunt conductance is {g_f}; a strictly positive value is required")]
    NoShuntConductance { g_f: f64 },
    #[error("effective DC conductance is {g_dc_eff}; a strictly positive value is required")]
    NoDcDamping { g_dc_eff: f64 },
    #[error("angle gain gamma = {gamma} gives no angle damping")]
    NoAngleDamping { gamma: f64 },
    #[error("angle inequality has no admissible lambda: discriminant gamma^2 b^2 - eta^2 a b = {discriminant}")]
    AngleDiscriminant { discriminant: f64, a: f64, b: f64 },
    #[error("synthesized certificate is numerically marginal (margins {margins:?})")]
    Marginal { margins: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    /// Search a grid of (ε₁, ε₂) splits instead of using the range midpoints.
    pub refine: bool,
    /// Grid points per axis when refining.
    pub grid: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { refine: false, grid: 19 }
    }
}

/// Picks a certificate for the given hardware, gains and envelope.
///
/// Uses `ε₂² = R/2` and `ε₁² = G̃_dc / (2(‖ī‖μ)²)`, then takes `λ` at the
/// midpoint of the interval on which the angle inequality holds.
pub fn synthesize_certificate(p: &InverterParams, g: &HacGains, envelope: &OperatingEnvelope) -> Result<Certificate, Infeasibility> {
    synthesize_with(p, g, envelope, SynthesisOptions::default())
}

pub fn synthesize_with(
    p: &InverterParams,
    g: &HacGains,
    envelope: &OperatingEnvelope,
    opts: SynthesisOptions,
) -> Result<Certificate, Infeasibility> {
    if !(p.g_f > 0.0) {
        return Err(Infeasibility::NoShuntConductance { g_f: p.g_f });
    }
    if !(p.g_dc_eff() > 0.0) {
        return Err(Infeasibility::NoDcDamping { g_dc_eff: p.g_dc_eff() });
    }
    if !(g.gamma > 0.0) {
        return Err(Infeasibility::NoAngleDamping { gamma: g.gamma });
    }
    let cert = if opts.refine && opts.grid > 0 {
        let n = opts.grid;
        let mut best: Option<(f64, Certificate)> = None;
        let mut last_err = None;
        for i in 1..=n {
            for j in 1..=n {
                let f1 = i as f64 / (n + 1) as f64;
                let f2 = j as f64 / (n + 1) as f64;
                match lambda_for_split(p, g, envelope, f1, f2) {
                    Ok((cert, width)) => {
                        if best.as_ref().is_none_or(|(w, _)| width > *w) {
                            best = Some((width, cert));
                        }
                    }
                    Err(e) => last_err = Some(e),
                }
            }
        }
        match best {
            Some((_, cert)) => cert,
            None => return Err(last_err.expect("grid is non-empty")),
        }
    } else {
        lambda_for_split(p, g, envelope, 0.5, 0.5)?.0
    };
    let report = check_conditions(p, g, &cert);
    if report.feasible {
        Ok(cert)
    } else {
        Err(Infeasibility::Marginal { margins: report.margins })
    }
}

/// Sets `ε₂² = f2·R`, `ε₁² = f1·G̃/(‖ī‖μ)²` and solves for λ. Returns the
/// certificate and the relative width of the admissible λ interval.
fn lambda_for_split(
    p: &InverterParams,
    g: &HacGains,
    env: &OperatingEnvelope,
    f1: f64,
    f2: f64,
) -> Result<(Certificate, f64), Infeasibility> {
    let g_eff = p.g_dc_eff();
    let eps2 = (f2 * p.r_f).sqrt();
    let coupling = env.i_ac_norm_max * p.mu;
    // without AC current coupling the DC Young split is vacuous; fix ε₁ so
    // that 1/ε₁² matches the DC conductance
    let eps1 = if coupling > 0.0 {
        (f1 * g_eff).sqrt() / coupling
    } else {
        1.0 / g_eff.sqrt()
    };
    let b = g_eff - (eps1 * coupling).powi(2);
    let a = 1.0 / (eps1 * eps1) + (p.mu * env.v_dc_bar_max / eps2).powi(2);
    let (lambda, width) = if g.eta == 0.0 {
        (2.0 * a / g.gamma, 1.0)
    } else {
        let gb = g.gamma * b;
        let discriminant = gb * gb - g.eta * g.eta * a * b;
        if !(discriminant > 0.0) {
            return Err(Infeasibility::AngleDiscriminant { discriminant, a, b });
        }
        (2.0 * gb / (g.eta * g.eta), discriminant.sqrt() / gb)
    };
    Ok((Certificate { eps1, eps2, lambda, envelope: *env }, width))
}

/// Largest `η` for which [`synthesize_certificate`] succeeds at the given
/// `γ`, to relative tolerance 1e-6. Returns `+inf` when no finite bound
/// exists below 1e300.
pub fn gain_frontier(p: &InverterParams, envelope: &OperatingEnvelope, gamma: f64) -> f64 {
    let feasible = |eta: f64| {
        let g = HacGains {
            omega0: 1.0,
            eta,
            gamma,
            v_dc_star: envelope.v_dc_bar_max,
            theta_star0: 0.0,
        };
        synthesize_certificate(p, &g, envelope).is_ok()
    };
    if !feasible(0.0) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = gamma.max(1e-12);
    while feasible(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    while hi - lo > 1e-7 * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PerUnitKind;
    use std::f64::consts::PI;

    fn inverter3() -> (InverterParams, HacGains, PerUnitBase) {
        let base = PerUnitBase::new(128e6, 690.0, 2.0 * PI * 60.0).unwrap();
        let p = InverterParams {
            c_dc: 5.78,
            g_dc: 0.10,
            c_f: base.to_si(0.05, PerUnitKind::Capacitance),
            g_f: base.to_si(1e-4, PerUnitKind::Conductance),
            l_f: base.to_si(0.05, PerUnitKind::Inductance),
            r_f: base.to_si(0.05 / 30.0, PerUnitKind::Resistance),
            mu: 690.0 / 1130.0,
            kappa: 1.0082e4,
        };
        let g = HacGains { omega0: 2.0 * PI * 60.0, eta: 1e-3, gamma: 100.0, v_dc_star: 1130.0, theta_star0: 0.0108 };
        (p, g, base)
    }

    fn reference_witness(g: &HacGains, base: &PerUnitBase) -> Certificate {
        Certificate {
            eps1: 2.2097e-4,
            eps2: 1.4375e-3,
            lambda: 1e10,
            envelope: OperatingEnvelope::rated(g.v_dc_star, base),
        }
    }

    #[test]
    fn q_entries_by_hand() {
        let (p, g, base) = inverter3();
        let c = reference_witness(&g, &base);
        let q = build_q(&p, &g, &c);
        // hand substitution
        let i_max = 1.5 * 128e6 / 690.0;
        let v_max: f64 = 1.2 * 1130.0;
        let mu: f64 = 690.0 / 1130.0;
        let q11 = (0.10 + 1.0082e4) - (2.2097e-4 * i_max * mu) * (2.2097e-4 * i_max * mu);
        let lam = 1e10 * 100.0 - 1.0 / (2.2097e-4 * 2.2097e-4) - (mu * v_max / 1.4375e-3).powi(2);
        assert!((q[(0, 0)] - q11).abs() < 1e-10 * q11);
        assert!((q[(5, 5)] - lam).abs() < 1e-12 * lam);
        assert_eq!(q[(0, 5)], -5e6);
        assert_eq!(q[(5, 0)], -5e6);
        assert_eq!(q[(3, 3)], p.r_f - 1.4375e-3 * 1.4375e-3);
        assert_eq!(q[(1, 1)], p.g_f);
        assert_eq!(q, q.transpose());
    }

    #[test]
    fn q_structure_special_cases() {
        let (p, g, base) = inverter3();
        let c = reference_witness(&g, &base);
        let q = build_q(&p, &HacGains { eta: 0.0, ..g }, &c);
        assert_eq!(q[(0, 5)], 0.0);
        assert_eq!(q[(5, 5)], c.angle_weight(&p, &g));
        let p0 = InverterParams { mu: 0.0, ..p };
        let q = build_q(&p0, &g, &c);
        assert_eq!(q[(0, 0)], p.g_dc_eff());
        assert_eq!(q[(5, 5)], c.lambda * g.gamma - 1.0 / (c.eps1 * c.eps1));
    }

    #[test]
    fn reference_witness_is_feasible() {
        let (p, g, base) = inverter3();
        let r = check_conditions(&p, &g, &reference_witness(&g, &base));
        assert!(r.feasible, "{r:?}");
        assert!(r.q_min_eig > 0.0);
        assert!(r.routes_agree);
    }

    #[test]
    fn violated_inequalities() {
        let (p, g, base) = inverter3();
        let c = reference_witness(&g, &base);
        let bad = Certificate { eps2: (2.0 * p.r_f).sqrt(), ..c };
        let r = check_conditions(&p, &g, &bad);
        assert!(!r.feasible);
        assert!(r.margins[0] < 0.0);
        assert_eq!(r.first_violation(), Some(0));

        let r = check_conditions(&p, &HacGains { gamma: 0.0, ..g }, &c);
        assert!(!r.feasible);
        assert!(c.angle_weight(&p, &HacGains { gamma: 0.0, ..g }) < 0.0);
        assert!(r.margins[2] < 0.0);
        assert!(r.routes_agree);

        let r = check_conditions(&InverterParams { g_f: 0.0, ..p }, &g, &c);
        assert!(!r.feasible);
    }

    #[test]
    fn synthesis_examples() {
        let (p, g, base) = inverter3();
        let env = OperatingEnvelope::rated(g.v_dc_star, &base);
        let c = synthesize_certificate(&p, &g, &env).unwrap();
        assert!(check_conditions(&p, &g, &c).feasible);
        let refined = synthesize_with(&p, &g, &env, SynthesisOptions { refine: true, grid: 9 }).unwrap();
        assert!(check_conditions(&p, &g, &refined).feasible);

        let g0 = HacGains { eta: 0.0, ..g };
        let c = synthesize_certificate(&p, &g0, &env).unwrap();
        let coupling = env.i_ac_norm_max * p.mu;
        let eps1_sq = p.g_dc_eff() / (2.0 * coupling * coupling);
        let a = 1.0 / eps1_sq + (p.mu * env.v_dc_bar_max).powi(2) / (p.r_f / 2.0);
        assert!((c.lambda - 2.0 * a / g.gamma).abs() < 1e-9 * c.lambda);

        let err = synthesize_certificate(&p, &HacGains { eta: 1.0, gamma: 1e-3, ..g }, &env).unwrap_err();
        assert!(matches!(err, Infeasibility::AngleDiscriminant { .. }), "{err}");
        let err = synthesize_certificate(&InverterParams { g_f: 0.0, ..p }, &g, &env).unwrap_err();
        assert!(matches!(err, Infeasibility::NoShuntConductance { .. }));
    }

    #[test]
    fn frontier_matches_closed_form() {
        let (p, g, base) = inverter3();
        let env = OperatingEnvelope::rated(g.v_dc_star, &base);
        let eta_max = gain_frontier(&p, &env, g.gamma);
        // midpoint split: b = G̃/2, a = 2(‖ī‖μ)²/G̃ + 2(μ v̄)²/R, Δ > 0 ⇔ η < γ √(b/a)
        let coupling = env.i_ac_norm_max * p.mu;
        let b = p.g_dc_eff() / 2.0;
        let a = 2.0 * coupling * coupling / p.g_dc_eff() + 2.0 * (p.mu * env.v_dc_bar_max).powi(2) / p.r_f;
        let closed = g.gamma * (b / a).sqrt();
        assert!((eta_max - closed).abs() < 2e-6 * closed, "{eta_max} vs {closed}");
        let at = |eta: f64| synthesize_certificate(&p, &HacGains { eta, ..g }, &env).is_ok();
        assert!(at(eta_max * (1.0 - 1e-6)));
        assert!(!at(eta_max * 1.01));
        assert!(g.eta < eta_max, "reference gain lies inside the frontier");
    }

    #[test]
    fn frontier_monotone_in_gamma() {
        let (p, g, base) = inverter3();
        let env = OperatingEnvelope::rated(g.v_dc_star, &base);
        let mut prev = 0.0;
        for gamma in [1.0, 5.0, 20.0, 100.0, 400.0, 2000.0] {
            let f = gain_frontier(&p, &env, gamma);
            assert!(f >= prev, "gamma {gamma}: {f} < {prev}");
            prev = f;
        }
    }

    #[test]
    fn frontier_without_modulation() {
        let (p, g, base) = inverter3();
        let p0 = InverterParams { mu: 0.0, ..p };
        let env = OperatingEnvelope::rated(g.v_dc_star, &base);
        let f = gain_frontier(&p0, &env, g.gamma);
        assert!(f.is_finite());
        // μ = 0: (λη/2)² < (λγ − 1/ε₁²) G̃ maximised over λ at λ = 2/(γ ε₁²)
        // gives η² < γ² ε₁² G̃ with ε₁² = 1/G̃ from the degenerate split
        let eps1_sq = 1.0 / p0.g_dc_eff();
        let lam_best = 2.0 / (g.gamma * eps1_sq);
        let eta_oracle = (4.0 * (lam_best * g.gamma - 1.0 / eps1_sq) * p0.g_dc_eff()).sqrt() / lam_best;
        assert!((f - eta_oracle).abs() < 2e-6 * eta_oracle, "{f} vs {eta_oracle}");
    }
}
