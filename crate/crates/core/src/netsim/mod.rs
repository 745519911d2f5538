//! Averaged multi-inverter network simulation in the stationary αβ frame.
//!
//! The state vector is laid out as
//! `[inverters (6 each) | branch currents (2 each) | load currents (2 each) | junction bus voltages (2 each)]`.
//! An inverter bus voltage is that inverter's filter capacitor voltage; line
//! charging at the bus is lumped in parallel with the filter capacitor.
//! Buses without an inverter carry their line charging plus a small
//! fictitious capacitance.

mod config;
mod integrate;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{rotate, Vec2};
use crate::model::{closed_loop_rhs, hac_angle_rate, storage_unchecked, ErrorState, InverterState, PortInput};

pub use config::{
    load_config, BranchConfig, BusConfig, ConfigError, DcSource, InverterSite, LoadConfig, NetworkConfig,
    DEFAULT_G_F_PU, DEFAULT_JUNCTION_CAPACITANCE_PU,
};
pub use integrate::{integrate, EventAction, FnSystem, IntegrateOptions, OdeSystem, SimError, SimEvent, Trajectory};

/// Default integration step (s).
pub const DEFAULT_DT: f64 = 50e-6;
/// Default scenario length (s).
pub const DEFAULT_T_END: f64 = 5.0;
/// Post-event settling threshold relative to the post-event peak.
pub const SETTLING_RATIO: f64 = 1e-4;
/// Absolute settling threshold on the scaled residual. RK4 keeps the
/// discrete orbit O(dt⁴) away from the exact equilibrium (about 1e-5 at
/// the default step), so the metric never reaches zero.
pub const SETTLING_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("junction bus {bus} has no shunt capacitance; set system.junction_capacitance_pu > 0")]
    NoJunctionCapacitance { bus: u32 },
    #[error("steady state not found (scaled residual history {history:?})")]
    SteadyState { history: Vec<f64> },
    #[error("bus {bus} has a mode at {omega:.4e} rad/s; dt = {dt:e} s exceeds the RK4 stability limit (ω·dt ≤ 2√2)")]
    StepTooLarge { bus: u32, omega: f64, dt: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BusKind {
    Inverter { index: usize, extra_c: f64 },
    Junction { offset: usize, capacitance: f64 },
}

/// Assembled network: a [`NetworkConfig`] plus state layout and the mutable
/// inputs changed by events.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    bus_kind: Vec<BusKind>,
    branch_ends: Vec<(usize, usize)>,
    load_bus: Vec<usize>,
    inv_bus: Vec<usize>,
    /// DC reference current per inverter (A).
    pub i_dc_ref: Vec<f64>,
    /// Admittance multiplier per load.
    pub load_scale: Vec<f64>,
    branch_offset: usize,
    load_offset: usize,
    dim: usize,
}

/// Power balance terms at one instant (W).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerAudit {
    /// Power delivered by the DC current sources `i_dc_ref + κ(v* − v_dc)`.
    pub sources: f64,
    pub dissipation: f64,
    pub stored_rate: f64,
}

impl PowerAudit {
    pub fn imbalance(&self) -> f64 {
        self.sources - self.dissipation - self.stored_rate
    }
}

/// Three-phase active and reactive power drawn at a bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BusPower {
    pub bus: u32,
    pub p_w: f64,
    pub q_var: f64,
}

fn pair(x: &[f64], k: usize) -> Vec2 {
    Vec2::new(x[k], x[k + 1])
}

fn set_pair(x: &mut [f64], k: usize, v: Vec2) {
    x[k] = v.x;
    x[k + 1] = v.y;
}

/// Active and reactive power `vᵀi`, `v_β i_α − v_α i_β` (inductive > 0).
pub fn complex_power(v: &Vec2, i: &Vec2) -> (f64, f64) {
    (v.dot(i), v.y * i.x - v.x * i.y)
}

impl Network {
    pub fn assemble(cfg: &NetworkConfig) -> Result<Self, NetworkError> {
        let n_bus = cfg.buses.len();
        let idx = |id: u32| cfg.bus_index(id).expect("validated bus id");
        let mut shunt = vec![0.0; n_bus];
        let branch_ends: Vec<(usize, usize)> = cfg
            .branches
            .iter()
            .map(|b| {
                let (f, t) = (idx(b.from), idx(b.to));
                shunt[f] += 0.5 * b.c_shunt;
                shunt[t] += 0.5 * b.c_shunt;
                (f, t)
            })
            .collect();
        let inv_bus: Vec<usize> = cfg.inverters.iter().map(|s| idx(s.bus)).collect();
        let branch_offset = 6 * cfg.inverters.len();
        let load_offset = branch_offset + 2 * cfg.branches.len();
        let mut next = load_offset + 2 * cfg.loads.len();
        let mut bus_kind = Vec::with_capacity(n_bus);
        for (b, bus) in cfg.buses.iter().enumerate() {
            if let Some(index) = inv_bus.iter().position(|&ib| ib == b) {
                bus_kind.push(BusKind::Inverter { index, extra_c: shunt[b] });
            } else {
                let capacitance = shunt[b] + cfg.junction_capacitance;
                if !(capacitance > 0.0) {
                    return Err(NetworkError::NoJunctionCapacitance { bus: bus.id });
                }
                bus_kind.push(BusKind::Junction { offset: next, capacitance });
                next += 2;
            }
        }
        let i_dc_ref = cfg
            .inverters
            .iter()
            .map(|s| match s.dc_source {
                DcSource::Fixed(i) => i,
                DcSource::Auto => s.params.g_dc * s.gains.v_dc_star,
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            bus_kind,
            branch_ends,
            load_bus: cfg.loads.iter().map(|l| idx(l.bus)).collect(),
            inv_bus,
            i_dc_ref,
            load_scale: vec![1.0; cfg.loads.len()],
            branch_offset,
            load_offset,
            dim: next,
        })
    }

    pub fn inverter_offset(&self, k: usize) -> usize {
        6 * k
    }

    pub fn branch_offset(&self, k: usize) -> usize {
        self.branch_offset + 2 * k
    }

    pub fn load_offset(&self, k: usize) -> usize {
        self.load_offset + 2 * k
    }

    pub fn inverter_state(&self, x: &[f64], k: usize) -> InverterState {
        InverterState::from_slice(&x[6 * k..6 * k + 6])
    }

    pub fn bus_voltage(&self, x: &[f64], b: usize) -> Vec2 {
        match self.bus_kind[b] {
            BusKind::Inverter { index, .. } => pair(x, 6 * index + 1),
            BusKind::Junction { offset, .. } => pair(x, offset),
        }
    }

    /// Net current flowing from each bus into branches and loads.
    fn bus_currents(&self, x: &[f64]) -> Vec<Vec2> {
        let mut i_net = vec![Vec2::zeros(); self.bus_kind.len()];
        for (k, &(f, t)) in self.branch_ends.iter().enumerate() {
            let i = pair(x, self.branch_offset(k));
            i_net[f] += i;
            i_net[t] -= i;
        }
        for (k, &b) in self.load_bus.iter().enumerate() {
            i_net[b] += pair(x, self.load_offset(k));
        }
        i_net
    }

    fn inverter_input(&self, k: usize, i_net: &[Vec2]) -> PortInput {
        PortInput { i_dc_ref: self.i_dc_ref[k], i_load: i_net[self.inv_bus[k]] }
    }

    /// Flat start: modulation at the setpoint angle, no currents.
    pub fn flat_start(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        for (k, s) in self.cfg.inverters.iter().enumerate() {
            let g = &s.gains;
            let st = InverterState {
                v_dc: g.v_dc_star,
                v_ac: s.params.mu * g.v_dc_star * crate::linalg::unit(g.theta_star0),
                i_ac: Vec2::zeros(),
                theta: g.theta_star0,
            };
            x[6 * k..6 * k + 6].copy_from_slice(&st.to_array());
        }
        let theta0 = self.cfg.inverters[0].gains.theta_star0;
        for (b, kind) in self.bus_kind.iter().enumerate() {
            if let BusKind::Junction { offset, .. } = kind {
                set_pair(&mut x, *offset, self.cfg.buses[b].voltage_ll * crate::linalg::unit(theta0));
            }
        }
        x
    }

    /// Instantaneous power balance.
    pub fn power_audit(&self, t: f64, x: &[f64]) -> PowerAudit {
        let mut dx = vec![0.0; self.dim];
        self.rhs(t, x, &mut dx);
        let mut sources = 0.0;
        let mut dissipation = 0.0;
        let mut stored = 0.0;
        for (k, s) in self.cfg.inverters.iter().enumerate() {
            let p = &s.params;
            let st = self.inverter_state(x, k);
            let d = self.inverter_state(&dx, k);
            let extra_c = match self.bus_kind[self.inv_bus[k]] {
                BusKind::Inverter { extra_c, .. } => extra_c,
                BusKind::Junction { .. } => unreachable!(),
            };
            let i_dc = self.i_dc_ref[k] + p.kappa * (s.gains.v_dc_star - st.v_dc);
            sources += st.v_dc * i_dc;
            dissipation += p.g_dc * st.v_dc * st.v_dc + p.g_f * st.v_ac.norm_squared() + p.r_f * st.i_ac.norm_squared();
            stored += p.c_dc * st.v_dc * d.v_dc + (p.c_f + extra_c) * st.v_ac.dot(&d.v_ac) + p.l_f * st.i_ac.dot(&d.i_ac);
        }
        for (k, br) in self.cfg.branches.iter().enumerate() {
            let o = self.branch_offset(k);
            let i = pair(x, o);
            dissipation += br.r * i.norm_squared();
            stored += br.l * i.dot(&pair(&dx, o));
        }
        for (k, ld) in self.cfg.loads.iter().enumerate() {
            let o = self.load_offset(k);
            let i = pair(x, o);
            let m = self.load_scale[k];
            dissipation += ld.r / m * i.norm_squared();
            stored += ld.l / m * i.dot(&pair(&dx, o));
        }
        for kind in &self.bus_kind {
            if let BusKind::Junction { offset, capacitance } = *kind {
                stored += capacitance * pair(x, offset).dot(&pair(&dx, offset));
            }
        }
        PowerAudit { sources, dissipation, stored_rate: stored }
    }

    /// Total stored energy in all capacitors and inductors (J).
    pub fn stored_energy(&self, x: &[f64]) -> f64 {
        let zero = ErrorState::default();
        let mut e = 0.0;
        for (k, s) in self.cfg.inverters.iter().enumerate() {
            let st = self.inverter_state(x, k);
            let as_error = ErrorState { d_v_dc: st.v_dc, d_v_ac: st.v_ac, d_i_ac: st.i_ac, ..zero };
            e += storage_unchecked(&as_error, &s.params, 0.0);
        }
        e + self.network_energy(x, None)
    }

    /// Energy of network elements (line charging at inverter buses,
    /// branches, loads, junction capacitors), optionally of the difference
    /// `x − x_ref`.
    fn network_energy(&self, x: &[f64], x_ref: Option<&[f64]>) -> f64 {
        let d = |o: usize| match x_ref {
            Some(r) => pair(x, o) - pair(r, o),
            None => pair(x, o),
        };
        let mut e = 0.0;
        for (k, br) in self.cfg.branches.iter().enumerate() {
            e += 0.5 * br.l * d(self.branch_offset(k)).norm_squared();
        }
        for (k, ld) in self.cfg.loads.iter().enumerate() {
            e += 0.5 * ld.l / self.load_scale[k] * d(self.load_offset(k)).norm_squared();
        }
        for kind in &self.bus_kind {
            e += match *kind {
                BusKind::Inverter { index, extra_c } => 0.5 * extra_c * d(6 * index + 1).norm_squared(),
                BusKind::Junction { offset, capacitance } => 0.5 * capacitance * d(offset).norm_squared(),
            };
        }
        e
    }

    /// Aggregate incremental storage: the per-inverter storage with weights
    /// `lambdas` plus the incremental energy of every network element.
    pub fn incremental_storage(&self, x: &[f64], x_ref: &[f64], lambdas: &[f64]) -> f64 {
        let mut v = self.network_energy(x, Some(x_ref));
        for (k, s) in self.cfg.inverters.iter().enumerate() {
            let dx = ErrorState::between(&self.inverter_state(x, k), &self.inverter_state(x_ref, k));
            v += storage_unchecked(&dx, &s.params, lambdas[k]);
        }
        v
    }

    /// Power drawn by the loads at each load bus.
    pub fn load_power(&self, x: &[f64]) -> Vec<BusPower> {
        let mut out: Vec<BusPower> = Vec::new();
        for (k, &b) in self.load_bus.iter().enumerate() {
            let (p, q) = complex_power(&self.bus_voltage(x, b), &pair(x, self.load_offset(k)));
            let bus = self.cfg.buses[b].id;
            match out.iter_mut().find(|e| e.bus == bus) {
                Some(e) => {
                    e.p_w += p;
                    e.q_var += q;
                }
                None => out.push(BusPower { bus, p_w: p, q_var: q }),
            }
        }
        out
    }

    fn state_scales(&self) -> Vec<f64> {
        let mut s = vec![1.0; self.dim];
        let i_sys = self.cfg.base.current();
        for (k, site) in self.cfg.inverters.iter().enumerate() {
            let o = 6 * k;
            s[o] = site.gains.v_dc_star;
            s[o + 1] = site.rating.voltage_ll;
            s[o + 2] = site.rating.voltage_ll;
            s[o + 3] = site.rating.current();
            s[o + 4] = site.rating.current();
            s[o + 5] = 1.0;
        }
        for k in 0..self.cfg.branches.len() {
            let o = self.branch_offset(k);
            s[o] = i_sys;
            s[o + 1] = i_sys;
        }
        for k in 0..self.cfg.loads.len() {
            let o = self.load_offset(k);
            s[o] = i_sys;
            s[o + 1] = i_sys;
        }
        for (b, kind) in self.bus_kind.iter().enumerate() {
            if let BusKind::Junction { offset, .. } = *kind {
                s[offset] = self.cfg.buses[b].voltage_ll;
                s[offset + 1] = self.cfg.buses[b].voltage_ll;
            }
        }
        s
    }

    /// Right-hand side with the synchronous rotation removed, each entry
    /// divided by `ω₀·scale`. Zero exactly at a synchronous steady state.
    fn rotating_residual(&self, t: f64, x: &[f64], scales: &[f64], out: &mut [f64]) {
        self.rhs(t, x, out);
        let w = self.cfg.omega0;
        let mut rotate_pair = |o: usize| {
            // f − ω₀ J x
            out[o] += w * x[o + 1];
            out[o + 1] -= w * x[o];
        };
        for k in 0..self.cfg.inverters.len() {
            rotate_pair(6 * k + 1);
            rotate_pair(6 * k + 3);
        }
        for o in (self.branch_offset..self.dim).step_by(2) {
            rotate_pair(o);
        }
        for k in 0..self.cfg.inverters.len() {
            out[6 * k + 5] -= w;
        }
        for (o, s) in out.iter_mut().zip(scales) {
            *o /= w * s;
        }
    }

    /// Settling metric: max-norm of the scaled rotating-frame residual.
    pub fn settling_metric(&self, t: f64, x: &[f64]) -> f64 {
        let scales = self.state_scales();
        let mut r = vec![0.0; self.dim];
        self.rotating_residual(t, x, &scales, &mut r);
        r.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Per-bus LC natural frequency `√(Σ 1/L / C)` over every inductor
    /// attached to the bus (rad/s).
    pub fn bus_modes(&self) -> Vec<f64> {
        let mut inv_l = vec![0.0; self.bus_kind.len()];
        for (k, &(f, t)) in self.branch_ends.iter().enumerate() {
            inv_l[f] += 1.0 / self.cfg.branches[k].l;
            inv_l[t] += 1.0 / self.cfg.branches[k].l;
        }
        for (k, &b) in self.load_bus.iter().enumerate() {
            inv_l[b] += self.load_scale[k] / self.cfg.loads[k].l;
        }
        self.bus_kind
            .iter()
            .zip(inv_l)
            .map(|(kind, y)| match *kind {
                BusKind::Inverter { index, extra_c } => {
                    let p = &self.cfg.inverters[index].params;
                    ((y + 1.0 / p.l_f) / (p.c_f + extra_c)).sqrt()
                }
                BusKind::Junction { capacitance, .. } => (y / capacitance).sqrt(),
            })
            .collect()
    }

    /// Rejects `dt` if any bus mode lies outside the RK4 stability interval
    /// on the imaginary axis.
    pub fn check_step(&self, dt: f64) -> Result<(), NetworkError> {
        let limit = 2.0 * std::f64::consts::SQRT_2;
        for (b, omega) in self.bus_modes().into_iter().enumerate() {
            if omega * dt > limit {
                return Err(NetworkError::StepTooLarge { bus: self.cfg.buses[b].id, omega, dt });
            }
        }
        Ok(())
    }

    /// Rotates every αβ pair of `x` by `angle` and shifts every inverter
    /// angle by `angle`.
    pub fn rotate_state(&self, x: &[f64], angle: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut rot = |o: usize| set_pair(&mut y, o, rotate(&pair(x, o), angle));
        for k in 0..self.cfg.inverters.len() {
            rot(6 * k + 1);
            rot(6 * k + 3);
        }
        for o in (self.branch_offset..self.dim).step_by(2) {
            rot(o);
        }
        for k in 0..self.cfg.inverters.len() {
            y[6 * k + 5] += angle;
        }
        y
    }
}

impl OdeSystem for Network {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        let i_net = self.bus_currents(x);
        for (k, &(f, to)) in self.branch_ends.iter().enumerate() {
            let br = &self.cfg.branches[k];
            let o = self.branch_offset(k);
            let d = (self.bus_voltage(x, f) - self.bus_voltage(x, to) - br.r * pair(x, o)) / br.l;
            set_pair(dx, o, d);
        }
        for (k, &b) in self.load_bus.iter().enumerate() {
            let ld = &self.cfg.loads[k];
            let o = self.load_offset(k);
            // impedance divided by the scale m: (L/m) i̇ = v − (R/m) i
            let d = (self.load_scale[k] * self.bus_voltage(x, b) - ld.r * pair(x, o)) / ld.l;
            set_pair(dx, o, d);
        }
        for (b, kind) in self.bus_kind.iter().enumerate() {
            match *kind {
                BusKind::Inverter { index, extra_c } => {
                    let s = &self.cfg.inverters[index];
                    let st = self.inverter_state(x, index);
                    let mut f = closed_loop_rhs(&st, &self.inverter_input(index, &i_net), &s.params, &s.gains, t);
                    if extra_c != 0.0 {
                        f.v_ac *= s.params.c_f / (s.params.c_f + extra_c);
                    }
                    dx[6 * index..6 * index + 6].copy_from_slice(&f.to_array());
                }
                BusKind::Junction { offset, capacitance } => {
                    set_pair(dx, offset, -i_net[b] / capacitance);
                }
            }
        }
    }

    fn apply_event(&mut self, event: &SimEvent) -> Result<(), SimError> {
        match event.action {
            EventAction::LoadScale { bus, multiplier } => {
                let b = self
                    .cfg
                    .bus_index(bus)
                    .ok_or_else(|| SimError::BadEvent(format!("unknown bus {bus}")))?;
                if !(multiplier > 0.0 && multiplier.is_finite()) {
                    return Err(SimError::BadEvent(format!("load multiplier {multiplier} must be > 0")));
                }
                let mut hit = false;
                for (k, &lb) in self.load_bus.iter().enumerate() {
                    if lb == b {
                        self.load_scale[k] *= multiplier;
                        hit = true;
                    }
                }
                if !hit {
                    return Err(SimError::BadEvent(format!("bus {bus} has no load")));
                }
            }
            EventAction::InputStep { inverter, delta } => {
                let slot = self
                    .i_dc_ref
                    .get_mut(inverter)
                    .ok_or_else(|| SimError::BadEvent(format!("no inverter {inverter}")))?;
                *slot += delta;
            }
        }
        Ok(())
    }

    fn output_labels(&self) -> Vec<String> {
        let mut labels = Vec::new();
        for s in &self.cfg.inverters {
            for q in ["v_dc_V", "v_alpha_V", "v_beta_V", "i_alpha_A", "i_beta_A", "freq_est_rad_s", "p_W", "q_var"] {
                labels.push(format!("{}_{q}", s.name));
            }
        }
        let mut seen = Vec::new();
        for &b in &self.load_bus {
            if !seen.contains(&b) {
                seen.push(b);
                let id = self.cfg.buses[b].id;
                labels.push(format!("load_bus{id}_p_W"));
                labels.push(format!("load_bus{id}_q_var"));
            }
        }
        labels
    }

    fn outputs(&self, t: f64, x: &[f64], out: &mut Vec<f64>) {
        let i_net = self.bus_currents(x);
        for (k, s) in self.cfg.inverters.iter().enumerate() {
            let st = self.inverter_state(x, k);
            let (p, q) = complex_power(&st.v_ac, &i_net[self.inv_bus[k]]);
            out.extend_from_slice(&[
                st.v_dc,
                st.v_ac.x,
                st.v_ac.y,
                st.i_ac.x,
                st.i_ac.y,
                hac_angle_rate(st.theta, st.v_dc, t, &s.gains),
                p,
                q,
            ]);
        }
        for bp in self.load_power(x) {
            out.push(bp.p_w);
            out.push(bp.q_var);
        }
    }
}

/// Synchronous operating point at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyState {
    pub state: Vec<f64>,
    /// DC reference currents, including those solved for auto sources.
    pub i_dc_ref: Vec<f64>,
    /// Final scaled residual.
    pub residual: f64,
    /// Scaled residual after each Newton iteration.
    pub history: Vec<f64>,
}

const STEADY_TOL: f64 = 1e-8;

/// Finds the synchronous steady state at `t = 0` by Newton's method on the
/// rotating-frame residual. For inverters with an automatic DC source the
/// unknown is `i_dc_ref` and `v_dc` is held at `v*`. If Newton stalls, the
/// network is time-stepped with its DC references frozen and Newton is
/// restarted from the result.
pub fn steady_state(net: &Network) -> Result<SteadyState, NetworkError> {
    let mut history = Vec::new();
    let mut start = net.flat_start();
    let mut i_ref = net.i_dc_ref.clone();
    for round in 0..3 {
        let (z, res) = newton_steady(net, &start, &i_ref, &mut history);
        let (x, refs) = unpack(net, &z, &i_ref);
        if res < STEADY_TOL {
            return Ok(SteadyState { state: x, i_dc_ref: refs, residual: res, history });
        }
        if round == 2 {
            break;
        }
        let mut sim = net.clone();
        sim.i_dc_ref = refs.clone();
        let t_end = 1.0;
        let traj = integrate(&mut sim, &x, (0.0, t_end), DEFAULT_DT, &[], IntegrateOptions { sample_every: usize::MAX })?;
        start = net.rotate_state(traj.last_state(), -net.cfg.omega0 * t_end);
        i_ref = refs;
    }
    Err(NetworkError::SteadyState { history })
}

fn is_auto(net: &Network, k: usize) -> bool {
    matches!(net.cfg.inverters[k].dc_source, DcSource::Auto)
}

fn pack(net: &Network, x: &[f64], i_ref: &[f64]) -> Vec<f64> {
    let mut z = x.to_vec();
    for k in 0..net.cfg.inverters.len() {
        if is_auto(net, k) {
            z[6 * k] = i_ref[k];
        }
    }
    z
}

fn unpack(net: &Network, z: &[f64], i_ref: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut x = z.to_vec();
    let mut refs = i_ref.to_vec();
    for (k, s) in net.cfg.inverters.iter().enumerate() {
        if is_auto(net, k) {
            refs[k] = z[6 * k];
            x[6 * k] = s.gains.v_dc_star;
        }
    }
    (x, refs)
}

fn newton_steady(net: &Network, x0: &[f64], i_ref0: &[f64], history: &mut Vec<f64>) -> (Vec<f64>, f64) {
    let n = net.dim;
    let mut scales = net.state_scales();
    for (k, s) in net.cfg.inverters.iter().enumerate() {
        if is_auto(net, k) {
            // the unknown in this slot is a current
            scales[6 * k] = s.rating.power / s.gains.v_dc_star;
        }
    }
    let residual_scales = net.state_scales();
    let mut work = net.clone();
    let mut eval = |z: &[f64], out: &mut [f64]| {
        let (x, refs) = unpack(net, z, i_ref0);
        work.i_dc_ref = refs;
        work.rotating_residual(0.0, &x, &residual_scales, out);
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));

    let mut z = pack(net, x0, i_ref0);
    let mut f = vec![0.0; n];
    eval(&z, &mut f);
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for _ in 0..30 {
        if max_abs(&f) < 1e-13 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for c in 0..n {
            let h = 1e-6 * scales[c];
            let saved = z[c];
            z[c] = saved + h;
            eval(&z, &mut fp);
            z[c] = saved - h;
            eval(&z, &mut fm);
            z[c] = saved;
            for r in 0..n {
                jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        let Some(step) = jac.lu().solve(&-DVector::from_column_slice(&f)) else {
            break;
        };
        let base = norm(&f);
        let mut alpha = 1.0;
        let mut improved = false;
        let mut trial = z.clone();
        for _ in 0..30 {
            for k in 0..n {
                trial[k] = z[k] + alpha * step[k];
            }
            eval(&trial, &mut fp);
            if norm(&fp) < base {
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
        z.clone_from(&trial);
        f.clone_from(&fp);
        history.push(max_abs(&f));
    }
    let res = max_abs(&f);
    if history.is_empty() {
        history.push(res);
    }
    (z, res)
}

/// Settling summary of a scenario run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Settling {
    /// Time from which the metric is evaluated (last applied event, or 0).
    pub from_time: f64,
    pub peak: f64,
    pub final_value: f64,
    pub ratio: f64,
    /// `final_value ≤ max(SETTLING_RATIO·peak, SETTLING_FLOOR)`.
    pub settled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioOptions {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self { dt: DEFAULT_DT, t_end: DEFAULT_T_END, sample_every: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub trajectory: Trajectory,
    pub steady: SteadyState,
    pub pre_event_load_power: Vec<BusPower>,
    pub settling: Settling,
    /// Events later than `t_end`, not applied.
    pub skipped_events: Vec<SimEvent>,
}

/// Runs a disturbance scenario: steady-state initialization, integration
/// with `events`, and the post-event settling metric.
pub fn run_scenario(cfg: &NetworkConfig, events: &[SimEvent], opts: ScenarioOptions) -> Result<ScenarioResult, NetworkError> {
    let mut net = Network::assemble(cfg)?;
    let (applied, skipped): (Vec<SimEvent>, Vec<SimEvent>) = events.iter().partition(|e| e.time <= opts.t_end);
    net.check_step(opts.dt)?;
    let mut after = net.clone();
    for e in &applied {
        after.apply_event(e)?;
    }
    after.check_step(opts.dt)?;
    let steady = steady_state(&net)?;
    net.i_dc_ref.clone_from(&steady.i_dc_ref);
    let pre_event_load_power = net.load_power(&steady.state);
    let trajectory = integrate(
        &mut net,
        &steady.state,
        (0.0, opts.t_end),
        opts.dt,
        &applied,
        IntegrateOptions { sample_every: opts.sample_every },
    )?;
    // `net` now carries the post-event inputs
    let from_time = applied.last().map_or(0.0, |e| e.time);
    let mut peak = 0.0f64;
    let mut final_value = 0.0;
    for k in 0..trajectory.len() {
        let t = trajectory.times[k];
        if t + 1e-12 < from_time {
            continue;
        }
        final_value = net.settling_metric(t, trajectory.state(k));
        peak = peak.max(final_value);
    }
    let ratio = if peak > 0.0 { final_value / peak } else { 0.0 };
    Ok(ScenarioResult {
        trajectory,
        steady,
        pre_event_load_power,
        settling: Settling { from_time, peak, final_value, ratio, settled: final_value <= (SETTLING_RATIO * peak).max(SETTLING_FLOOR) },
        skipped_events: skipped,
    })
}

/// The shipped load-doubling scenario: the config's own events.
pub fn scenario_nine_bus(cfg: &NetworkConfig, opts: ScenarioOptions) -> Result<ScenarioResult, NetworkError> {
    run_scenario(cfg, &cfg.events, opts)
}

/// Writes the per-inverter outputs of a trajectory as CSV.
pub fn export_csv<W: Write>(traj: &Trajectory, w: W) -> csv::Result<()> {
    traj.write_csv(w)
}
