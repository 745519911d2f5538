//! Network configuration file (TOML).
//!
//! Field names carry their unit (`_v`, `_a`, `_f`, `_s`, `_ohm`, `_h`,
//! `_w`, `_var`, `_va`, `_hz`, `_rad`, `_rad_s`); per-unit fields end in
//! `_pu` and are converted to SI on load. Branch per-unit data is on the
//! system base, inverter filter per-unit data on the inverter rating.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{Certificate, OperatingEnvelope};
use crate::model::{HacGains, InverterParams, PerUnitBase, PerUnitKind};

use super::integrate::{EventAction, SimEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.into(), reason: reason.into() }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: RawSystem,
    #[serde(default)]
    bus: Vec<RawBus>,
    #[serde(default)]
    branch: Vec<RawBranch>,
    #[serde(default)]
    load: Vec<RawLoad>,
    #[serde(default)]
    inverter: Vec<RawInverter>,
    #[serde(default)]
    event: Vec<RawEvent>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    frequency_hz: f64,
    base_power_va: f64,
    base_voltage_ll_v: f64,
    junction_capacitance_pu: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBus {
    id: u32,
    voltage_ll_v: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBranch {
    from: u32,
    to: u32,
    r_pu: Option<f64>,
    x_pu: Option<f64>,
    b_pu: Option<f64>,
    r_ohm: Option<f64>,
    l_h: Option<f64>,
    c_f: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoad {
    bus: u32,
    p_w: Option<f64>,
    q_var: Option<f64>,
    r_ohm: Option<f64>,
    l_h: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInverter {
    name: Option<String>,
    bus: u32,
    rating_va: f64,
    voltage_ll_v: Option<f64>,
    v_dc_star_v: f64,
    c_dc_f: f64,
    g_dc_s: f64,
    kappa_s: f64,
    l_f_pu: f64,
    r_f_pu: f64,
    c_f_pu: f64,
    g_f_pu: Option<f64>,
    v_ac_pu: Option<f64>,
    mu: Option<f64>,
    eta_rad_per_v_s: f64,
    gamma_rad_s: f64,
    theta_star_rad: f64,
    dc_source: Option<String>,
    i_dc_ref_a: Option<f64>,
    certificate: Option<RawCertificate>,
    envelope: Option<RawEnvelope>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCertificate {
    lambda: f64,
    eps1: f64,
    eps2: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    v_dc_bar_max_v: Option<f64>,
    i_ac_norm_max_a: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    time_s: f64,
    kind: String,
    bus: Option<u32>,
    multiplier: Option<f64>,
    inverter: Option<usize>,
    delta_a: Option<f64>,
}

/// Default AC shunt conductance (pu on the inverter rating).
pub const DEFAULT_G_F_PU: f64 = 1e-4;
/// Default fictitious capacitance at junction buses (pu on the system base).
pub const DEFAULT_JUNCTION_CAPACITANCE_PU: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusConfig {
    pub id: u32,
    /// Nominal line-to-line rms voltage (V).
    pub voltage_ll: f64,
}

/// Series RL branch with its total shunt line charging split between the
/// end buses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchConfig {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub l: f64,
    pub c_shunt: f64,
}

/// Constant-impedance series RL load.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadConfig {
    pub bus: u32,
    pub r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", content = "i_dc_ref_a", rename_all = "snake_case")]
pub enum DcSource {
    /// DC reference chosen by the steady-state solve so that `v_dc = v*`.
    Auto,
    /// Constant DC reference current (A).
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InverterSite {
    pub name: String,
    pub bus: u32,
    pub rating: PerUnitBase,
    pub params: InverterParams,
    pub gains: HacGains,
    pub dc_source: DcSource,
    pub certificate: Option<Certificate>,
    pub envelope: OperatingEnvelope,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkConfig {
    /// Nominal angular frequency (rad/s).
    pub omega0: f64,
    pub base: PerUnitBase,
    /// Fictitious shunt capacitance added at every junction bus (F).
    pub junction_capacitance: f64,
    pub buses: Vec<BusConfig>,
    pub branches: Vec<BranchConfig>,
    pub loads: Vec<LoadConfig>,
    pub inverters: Vec<InverterSite>,
    /// Scenario events shipped with the config.
    pub events: Vec<SimEvent>,
}

impl NetworkConfig {
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn inverter_by_name(&self, name: &str) -> Option<usize> {
        self.inverters.iter().position(|s| s.name == name)
    }
}

fn finite(path: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(path, format!("{v} is not finite")))
    }
}

fn positive(path: &str, v: f64) -> Result<f64, ConfigError> {
    if finite(path, v)? > 0.0 {
        Ok(v)
    } else {
        Err(invalid(path, format!("{v} must be > 0")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<f64, ConfigError> {
    if finite(path, v)? >= 0.0 {
        Ok(v)
    } else {
        Err(invalid(path, format!("{v} must be >= 0")))
    }
}

/// Parses and validates a network configuration.
pub fn load_config(text: &str) -> Result<NetworkConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let sys = &raw.system;
    let omega0 = 2.0 * std::f64::consts::PI * positive("system.frequency_hz", sys.frequency_hz)?;
    let base = PerUnitBase::new(
        positive("system.base_power_va", sys.base_power_va)?,
        positive("system.base_voltage_ll_v", sys.base_voltage_ll_v)?,
        omega0,
    )
    .map_err(|e| invalid("system", e.to_string()))?;
    let junction_pu = non_negative(
        "system.junction_capacitance_pu",
        sys.junction_capacitance_pu.unwrap_or(DEFAULT_JUNCTION_CAPACITANCE_PU),
    )?;

    if raw.bus.is_empty() {
        return Err(invalid("bus", "at least one bus is required"));
    }
    let mut buses = Vec::with_capacity(raw.bus.len());
    for (k, b) in raw.bus.iter().enumerate() {
        let path = format!("bus[{k}]");
        if buses.iter().any(|x: &BusConfig| x.id == b.id) {
            return Err(invalid(format!("{path}.id"), format!("duplicate bus id {}", b.id)));
        }
        let v = positive(&format!("{path}.voltage_ll_v"), b.voltage_ll_v.unwrap_or(base.voltage_ll))?;
        buses.push(BusConfig { id: b.id, voltage_ll: v });
    }
    let bus_voltage = |id: u32, path: &str| -> Result<f64, ConfigError> {
        buses
            .iter()
            .find(|b| b.id == id)
            .map(|b| b.voltage_ll)
            .ok_or_else(|| invalid(path, format!("unknown bus {id}")))
    };

    let mut branches = Vec::with_capacity(raw.branch.len());
    for (k, br) in raw.branch.iter().enumerate() {
        let path = format!("branch[{k}]");
        let vf = bus_voltage(br.from, &format!("{path}.from"))?;
        let vt = bus_voltage(br.to, &format!("{path}.to"))?;
        if br.from == br.to {
            return Err(invalid(&path, "branch connects a bus to itself"));
        }
        if (vf - vt).abs() > 1e-9 * vf {
            return Err(invalid(&path, "end buses have different nominal voltages; fold transformers into a common base"));
        }
        let per_unit = br.r_pu.is_some() || br.x_pu.is_some() || br.b_pu.is_some();
        let si = br.r_ohm.is_some() || br.l_h.is_some() || br.c_f.is_some();
        let local = PerUnitBase { voltage_ll: vf, ..base };
        let (r, l, c) = match (per_unit, si) {
            (true, false) => (
                local.to_si(non_negative(&format!("{path}.r_pu"), br.r_pu.unwrap_or(0.0))?, PerUnitKind::Resistance),
                local.to_si(
                    positive(&format!("{path}.x_pu"), br.x_pu.ok_or_else(|| invalid(format!("{path}.x_pu"), "missing"))?)?,
                    PerUnitKind::Inductance,
                ),
                local.to_si(non_negative(&format!("{path}.b_pu"), br.b_pu.unwrap_or(0.0))?, PerUnitKind::Capacitance),
            ),
            (false, true) => (
                non_negative(&format!("{path}.r_ohm"), br.r_ohm.unwrap_or(0.0))?,
                positive(&format!("{path}.l_h"), br.l_h.ok_or_else(|| invalid(format!("{path}.l_h"), "missing"))?)?,
                non_negative(&format!("{path}.c_f"), br.c_f.unwrap_or(0.0))?,
            ),
            _ => return Err(invalid(&path, "give either r_pu/x_pu/b_pu or r_ohm/l_h/c_f")),
        };
        branches.push(BranchConfig { from: br.from, to: br.to, r, l, c_shunt: c });
    }

    let mut loads = Vec::with_capacity(raw.load.len());
    for (k, ld) in raw.load.iter().enumerate() {
        let path = format!("load[{k}]");
        let v = bus_voltage(ld.bus, &format!("{path}.bus"))?;
        let (r, l) = match (ld.p_w, ld.q_var, ld.r_ohm, ld.l_h) {
            (Some(p), Some(q), None, None) => {
                let p = non_negative(&format!("{path}.p_w"), p)?;
                let q = positive(&format!("{path}.q_var"), q)
                    .map_err(|_| invalid(format!("{path}.q_var"), "a series RL load needs q_var > 0"))?;
                // Z = V² / conj(S)
                let s2 = p * p + q * q;
                (v * v * p / s2, v * v * q / s2 / omega0)
            }
            (None, None, Some(r), Some(l)) => {
                (non_negative(&format!("{path}.r_ohm"), r)?, positive(&format!("{path}.l_h"), l)?)
            }
            _ => return Err(invalid(&path, "give either p_w and q_var or r_ohm and l_h")),
        };
        loads.push(LoadConfig { bus: ld.bus, r, l });
    }

    if raw.inverter.is_empty() {
        return Err(invalid("inverter", "at least one inverter is required"));
    }
    let mut inverters: Vec<InverterSite> = Vec::with_capacity(raw.inverter.len());
    for (k, inv) in raw.inverter.iter().enumerate() {
        inverters.push(resolve_inverter(k, inv, omega0, &bus_voltage)?);
        let bus = inv.bus;
        if inverters[..k].iter().any(|s| s.bus == bus) {
            return Err(invalid(format!("inverter[{k}].bus"), format!("bus {bus} already has an inverter")));
        }
        if inverters[..k].iter().any(|s| s.name == inverters[k].name) {
            return Err(invalid(format!("inverter[{k}].name"), "duplicate inverter name"));
        }
    }

    let mut events = Vec::with_capacity(raw.event.len());
    for (k, ev) in raw.event.iter().enumerate() {
        let path = format!("event[{k}]");
        let time = non_negative(&format!("{path}.time_s"), ev.time_s)?;
        let action = match ev.kind.as_str() {
            "load_scale" => {
                let bus = ev.bus.ok_or_else(|| invalid(format!("{path}.bus"), "missing"))?;
                bus_voltage(bus, &format!("{path}.bus"))?;
                let m = positive(
                    &format!("{path}.multiplier"),
                    ev.multiplier.ok_or_else(|| invalid(format!("{path}.multiplier"), "missing"))?,
                )?;
                EventAction::LoadScale { bus, multiplier: m }
            }
            "input_step" => {
                let inverter = ev.inverter.ok_or_else(|| invalid(format!("{path}.inverter"), "missing"))?;
                if inverter >= inverters.len() {
                    return Err(invalid(format!("{path}.inverter"), format!("no inverter {inverter}")));
                }
                let delta = finite(
                    &format!("{path}.delta_a"),
                    ev.delta_a.ok_or_else(|| invalid(format!("{path}.delta_a"), "missing"))?,
                )?;
                EventAction::InputStep { inverter, delta }
            }
            other => return Err(invalid(format!("{path}.kind"), format!("unknown event kind `{other}`"))),
        };
        events.push(SimEvent { time, action });
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));

    let cfg = NetworkConfig {
        omega0,
        junction_capacitance: base.to_si(junction_pu, PerUnitKind::Capacitance),
        base,
        buses,
        branches,
        loads,
        inverters,
        events,
    };
    check_connected(&cfg)?;
    Ok(cfg)
}

fn resolve_inverter(
    k: usize,
    inv: &RawInverter,
    omega0: f64,
    bus_voltage: &dyn Fn(u32, &str) -> Result<f64, ConfigError>,
) -> Result<InverterSite, ConfigError> {
    let path = format!("inverter[{k}]");
    let f = |name: &str| format!("{path}.{name}");
    let v_bus = bus_voltage(inv.bus, &f("bus"))?;
    let v_ll = positive(&f("voltage_ll_v"), inv.voltage_ll_v.unwrap_or(v_bus))?;
    let rating = PerUnitBase::new(positive(&f("rating_va"), inv.rating_va)?, v_ll, omega0)
        .map_err(|e| invalid(&path, e.to_string()))?;
    let v_dc_star = positive(&f("v_dc_star_v"), inv.v_dc_star_v)?;
    let mu = match (inv.mu, inv.v_ac_pu) {
        (Some(mu), None) => finite(&f("mu"), mu)?,
        (None, Some(v)) => positive(&f("v_ac_pu"), v)? * v_ll / v_dc_star,
        _ => return Err(invalid(&path, "give exactly one of mu or v_ac_pu")),
    };
    let params = InverterParams {
        c_dc: inv.c_dc_f,
        g_dc: inv.g_dc_s,
        c_f: rating.to_si(inv.c_f_pu, PerUnitKind::Capacitance),
        g_f: rating.to_si(inv.g_f_pu.unwrap_or(DEFAULT_G_F_PU), PerUnitKind::Conductance),
        l_f: rating.to_si(inv.l_f_pu, PerUnitKind::Inductance),
        r_f: rating.to_si(inv.r_f_pu, PerUnitKind::Resistance),
        mu,
        kappa: inv.kappa_s,
    };
    params.validate().map_err(|e| invalid(&path, e.to_string()))?;
    let gains = HacGains {
        omega0,
        eta: inv.eta_rad_per_v_s,
        gamma: inv.gamma_rad_s,
        v_dc_star,
        theta_star0: inv.theta_star_rad,
    };
    gains.validate().map_err(|e| invalid(&path, e.to_string()))?;
    let dc_source = match (inv.dc_source.as_deref(), inv.i_dc_ref_a) {
        (None | Some("auto"), None) => DcSource::Auto,
        (None | Some("fixed"), Some(i)) => DcSource::Fixed(finite(&f("i_dc_ref_a"), i)?),
        (Some("fixed"), None) => return Err(invalid(f("i_dc_ref_a"), "fixed DC source needs i_dc_ref_a")),
        (Some("auto"), Some(_)) => return Err(invalid(f("i_dc_ref_a"), "not allowed with dc_source = \"auto\"")),
        (Some(other), _) => return Err(invalid(f("dc_source"), format!("unknown DC source `{other}`"))),
    };
    let rated = OperatingEnvelope::rated(v_dc_star, &rating);
    let envelope = match &inv.envelope {
        None => rated,
        Some(e) => OperatingEnvelope::new(
            e.v_dc_bar_max_v.unwrap_or(rated.v_dc_bar_max),
            e.i_ac_norm_max_a.unwrap_or(rated.i_ac_norm_max),
        )
        .map_err(|err| invalid(f("envelope"), err.to_string()))?,
    };
    let certificate = match &inv.certificate {
        None => None,
        Some(c) => {
            let cert = Certificate { eps1: c.eps1, eps2: c.eps2, lambda: c.lambda, envelope };
            cert.validate().map_err(|err| invalid(f("certificate"), err.to_string()))?;
            Some(cert)
        }
    };
    Ok(InverterSite {
        name: inv.name.clone().unwrap_or_else(|| format!("inv{}", k + 1)),
        bus: inv.bus,
        rating,
        params,
        gains,
        dc_source,
        certificate,
        envelope,
    })
}

fn check_connected(cfg: &NetworkConfig) -> Result<(), ConfigError> {
    let n = cfg.buses.len();
    let mut adj = vec![Vec::new(); n];
    for br in &cfg.branches {
        let a = cfg.bus_index(br.from).expect("validated");
        let b = cfg.bus_index(br.to).expect("validated");
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        None => Ok(()),
        Some(k) => Err(invalid(
            format!("bus[{k}]"),
            format!("bus {} is not connected to bus {}", cfg.buses[k].id, cfg.buses[0].id),
        )),
    }
}
