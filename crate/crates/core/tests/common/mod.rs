#![allow(dead_code)]

use hac_passivity::netsim::{load_config, InverterSite, NetworkConfig};

pub fn ieee9_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ieee9.cfg")
}

pub fn ieee9() -> NetworkConfig {
    load_config(&std::fs::read_to_string(ieee9_path()).unwrap()).unwrap()
}

pub fn site(name: &str) -> InverterSite {
    let cfg = ieee9();
    let k = cfg.inverter_by_name(name).unwrap();
    cfg.inverters[k].clone()
}

use std::f64::consts::PI;

use hac_passivity::certify::{Certificate, OperatingEnvelope};
use hac_passivity::model::{HacGains, InverterParams, PerUnitBase, PerUnitKind, PortInput};
use hac_passivity::smallsignal::{equilibrium, equilibrium_with_resistive_load, rotating_rhs, Equilibrium};
use rand::Rng;

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo.log10()..hi.log10()))
}

/// Random but physically plausible inverter hardware and gains.
pub fn random_inverter<R: Rng>(rng: &mut R) -> (InverterParams, HacGains, PerUnitBase) {
    let freq = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
    let base = PerUnitBase::new(log_uniform(rng, 1e6, 3e8), log_uniform(rng, 400.0, 4160.0), 2.0 * PI * freq).unwrap();
    let v_star = base.voltage_ll * rng.random_range(1.4..2.0);
    let dc_pu = base.power / (v_star * v_star);
    let l_f = rng.random_range(0.02..0.15);
    let p = InverterParams {
        c_dc: rng.random_range(0.01..0.1) * dc_pu,
        g_dc: log_uniform(rng, 1e-4, 1e-2) * dc_pu,
        c_f: base.to_si(rng.random_range(0.02..0.1), PerUnitKind::Capacitance),
        g_f: base.to_si(log_uniform(rng, 1e-5, 1e-3), PerUnitKind::Conductance),
        l_f: base.to_si(l_f, PerUnitKind::Inductance),
        r_f: base.to_si(l_f / rng.random_range(10.0..60.0), PerUnitKind::Resistance),
        mu: (rng.random_range(0.9..1.1) * base.voltage_ll / v_star).min(1.0),
        kappa: rng.random_range(10.0..300.0) * dc_pu,
    };
    let g = HacGains {
        omega0: base.omega,
        eta: log_uniform(rng, 1e-5, 1e-1),
        gamma: log_uniform(rng, 1.0, 1e3),
        v_dc_star: v_star,
        theta_star0: rng.random_range(-0.3..0.3),
    };
    (p, g, base)
}

/// Random certificate near the feasibility boundary, so that both outcomes
/// are common.
pub fn random_certificate<R: Rng>(rng: &mut R, p: &InverterParams, g: &HacGains, base: &PerUnitBase) -> Certificate {
    let envelope = OperatingEnvelope::rated(g.v_dc_star, base);
    let eps2 = (p.r_f * rng.random_range(0.05..1.5)).sqrt();
    let eps1 = (p.g_dc_eff() * rng.random_range(0.05..1.5)).sqrt() / (envelope.i_ac_norm_max * p.mu);
    let t = p.mu * envelope.v_dc_bar_max / eps2;
    let lambda_c = (1.0 / (eps1 * eps1) + t * t) / g.gamma;
    Certificate { eps1, eps2, lambda: lambda_c * log_uniform(rng, 0.3, 1e3), envelope }
}

/// Equilibrium for a random load current (up to rated, any phase) and a DC
/// reference perturbed off the setpoint value, so that `v_dc ≠ v*` and
/// `φ ≠ θ*₀` in general.
pub fn random_equilibrium<R: Rng>(rng: &mut R, p: &InverterParams, g: &HacGains, base: &PerUnitBase) -> Option<Equilibrium> {
    let seed = equilibrium_with_resistive_load(p, g, rng.random_range(0.0..1.0) * base.current());
    let phase = rng.random_range(-0.5..0.5);
    let input = PortInput {
        i_dc_ref: seed.input_eq.i_dc_ref * rng.random_range(0.98..1.02),
        i_load: hac_passivity::linalg::rotate(&seed.input_eq.i_load, phase),
    };
    equilibrium(p, g, &input).ok()
}

/// Central finite-difference Jacobian of the rotating-frame dynamics in the
/// linearization coordinates `[v_dc, v_dq, i_dq, φ/2]`, with one Richardson
/// extrapolation step.
pub fn fd_jacobian(eq: &Equilibrium, p: &InverterParams, g: &HacGains) -> [[f64; 6]; 6] {
    let z0 = eq.state();
    let scales = [g.v_dc_star, g.v_dc_star, g.v_dc_star, 1.0 + eq.i_dq_eq.norm(), 1.0 + eq.i_dq_eq.norm(), 1.0];
    let column = |j: usize, h: f64| {
        let mut zp = z0;
        let mut zm = z0;
        zp[j] += h;
        zm[j] -= h;
        let (fp, fm) = (rotating_rhs(&zp, &eq.input_eq, p, g), rotating_rhs(&zm, &eq.input_eq, p, g));
        let mut c = [0.0; 6];
        for i in 0..6 {
            c[i] = (fp[i] - fm[i]) / (2.0 * h);
        }
        c
    };
    let mut jac = [[0.0; 6]; 6];
    for j in 0..6 {
        let h = 1e-4 * scales[j];
        let (c1, c2) = (column(j, h), column(j, 0.5 * h));
        for i in 0..6 {
            let d = (4.0 * c2[i] - c1[i]) / 3.0;
            let left = if i == 5 { 0.5 } else { 1.0 };
            let right = if j == 5 { 2.0 } else { 1.0 };
            jac[i][j] = left * d * right;
        }
    }
    jac
}
