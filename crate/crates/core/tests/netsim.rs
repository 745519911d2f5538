mod common;

use hac_passivity::certify::synthesize_certificate;
use hac_passivity::model::{closed_loop_rhs, PortInput};
use hac_passivity::netsim::*;
use hac_passivity::verify::simpson;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INV3: &str = r#"
rating_va = 128e6
v_dc_star_v = 1130.0
c_dc_f = 5.78
g_dc_s = 0.10
kappa_s = 1.0082e4
l_f_pu = 0.05
r_f_pu = 0.0016666666666666668
c_f_pu = 0.05
g_f_pu = 1e-4
v_ac_pu = 1.025
eta_rad_per_v_s = 1e-3
gamma_rad_s = 100.0
theta_star_rad = 0.0108
"#;

const SYSTEM: &str = "[system]\nfrequency_hz = 60.0\nbase_power_va = 100e6\nbase_voltage_ll_v = 690.0\n";

fn inverter(bus: u32, name: &str) -> String {
    format!("[[inverter]]\nname = \"{name}\"\nbus = {bus}\n{INV3}")
}

#[test]
fn shipped_config_describes_the_nine_bus_system() {
    let cfg = common::ieee9();
    assert_eq!(cfg.buses.len(), 9);
    assert_eq!(cfg.branches.len(), 9);
    let inv_buses: Vec<u32> = cfg.inverters.iter().map(|s| s.bus).collect();
    assert_eq!(inv_buses, vec![1, 2, 3]);
    let load_buses: Vec<u32> = cfg.loads.iter().map(|l| l.bus).collect();
    assert_eq!(load_buses, vec![5, 6, 8]);
    assert_eq!(cfg.events.len(), 1);
    assert_eq!(cfg.events[0].time, 1.5);
    assert!(cfg.inverters[2].certificate.is_some());
}

#[test]
fn config_errors_name_the_offending_entry() {
    assert!(load_config("").is_err());
    let text = format!("{SYSTEM}[[bus]]\nid = 1\n[[bus]]\nid = 2\n[[branch]]\nfrom = 1\nto = 7\nx_pu = 0.1\n");
    let err = load_config(&text).unwrap_err().to_string();
    assert!(err.contains("branch[0]") && err.contains('7'), "{err}");
    let unknown_key = format!("{SYSTEM}colour = 3\n[[bus]]\nid = 1\n");
    assert!(load_config(&unknown_key).is_err());
    let two_inverters = format!("{SYSTEM}[[bus]]\nid = 1\n{}{}", inverter(1, "a"), inverter(1, "b"));
    assert!(load_config(&two_inverters).unwrap_err().to_string().contains("already has an inverter"));
}

#[test]
fn single_bus_network_reduces_to_the_inverter_model() {
    let text = format!("{SYSTEM}[[bus]]\nid = 1\n[[load]]\nbus = 1\nr_ohm = 4.0\nl_h = 0.002\n{}", inverter(1, "solo"));
    let cfg = load_config(&text).unwrap();
    let net = Network::assemble(&cfg).unwrap();
    assert_eq!(net.dim(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x: Vec<f64> = vec![
            1130.0 + rng.random_range(-50.0..50.0),
            rng.random_range(-700.0..700.0),
            rng.random_range(-700.0..700.0),
            rng.random_range(-1e4..1e4),
            rng.random_range(-1e4..1e4),
            rng.random_range(-3.0..3.0),
            rng.random_range(-1e3..1e3),
            rng.random_range(-1e3..1e3),
        ];
        let t = rng.random_range(0.0..1.0);
        let mut dx = vec![0.0; 8];
        net.rhs(t, &x, &mut dx);
        let s = &cfg.inverters[0];
        let u = PortInput { i_dc_ref: net.i_dc_ref[0], i_load: nalgebra::Vector2::new(x[6], x[7]) };
        let f = closed_loop_rhs(&net.inverter_state(&x, 0), &u, &s.params, &s.gains, t);
        assert_eq!(&dx[..6], &f.to_array()[..]);
        assert_eq!(dx[6], (x[1] - 4.0 * x[6]) / 0.002);
    }
}

#[test]
fn instantaneous_power_balances() {
    let cfg = common::ieee9();
    let net = Network::assemble(&cfg).unwrap();
    let steady = steady_state(&net).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x: Vec<f64> = steady.state.iter().map(|v| v * (1.0 + rng.random_range(-0.2..0.2)) + rng.random_range(-5.0..5.0)).collect();
        let a = net.power_audit(0.3, &x);
        let scale = a.sources.abs() + a.dissipation.abs() + a.stored_rate.abs();
        assert!(a.imbalance().abs() <= 1e-9 * scale, "{a:?}");
    }
}

#[test]
fn energy_audit_over_a_window() {
    let cfg = common::ieee9();
    let mut net = Network::assemble(&cfg).unwrap();
    let steady = steady_state(&net).unwrap();
    net.i_dc_ref.clone_from(&steady.i_dc_ref);
    net.load_scale[1] = 2.0;
    let dt = 20e-6;
    let traj = integrate(&mut net, &steady.state, (0.0, 0.05), dt, &[], IntegrateOptions::default()).unwrap();
    let net_rate: Vec<f64> = (0..traj.len())
        .map(|k| {
            let a = net.power_audit(traj.times[k], traj.state(k));
            a.sources - a.dissipation
        })
        .collect();
    let delivered = simpson(&net_rate, dt);
    let stored = net.stored_energy(traj.last_state()) - net.stored_energy(traj.state(0));
    let scale: f64 = net_rate.iter().map(|v| v.abs()).sum::<f64>() * dt;
    assert!((delivered - stored).abs() <= 1e-6 * scale, "delivered {delivered}, stored {stored}");
}

#[test]
fn unloaded_network_sits_at_nominal_voltage() {
    let mut cfg = common::ieee9();
    cfg.loads.clear();
    cfg.events.clear();
    let net = Network::assemble(&cfg).unwrap();
    let steady = steady_state(&net).unwrap();
    assert!(steady.residual < 1e-8);
    for (k, s) in cfg.inverters.iter().enumerate() {
        let st = net.inverter_state(&steady.state, k);
        assert_eq!(st.v_dc, s.gains.v_dc_star);
        let v_pu = st.v_ac.norm() / s.rating.voltage_ll;
        assert!((v_pu - 1.0).abs() < 0.06, "{} at {v_pu} pu", s.name);
        // only filter and line losses remain on the DC side
        let p_ac = st.v_ac.dot(&st.i_ac);
        assert!(p_ac.abs() < 0.01 * s.rating.power, "{} delivers {p_ac} W", s.name);
    }
}

fn two_inverter_text(order: [(u32, &str); 2]) -> String {
    let mut text = format!("{SYSTEM}[[bus]]\nid = 1\n[[bus]]\nid = 2\n[[bus]]\nid = 3\n");
    text += "[[branch]]\nfrom = 1\nto = 3\nr_pu = 0.01\nx_pu = 0.08\nb_pu = 0.1\n";
    text += "[[branch]]\nfrom = 2\nto = 3\nr_pu = 0.01\nx_pu = 0.08\nb_pu = 0.1\n";
    text += "[[load]]\nbus = 3\np_w = 100e6\nq_var = 20e6\n";
    for (bus, name) in order {
        text += &inverter(bus, name);
    }
    text
}

#[test]
fn inverter_ordering_does_not_change_the_solution() {
    let cfg_a = load_config(&two_inverter_text([(1, "x"), (2, "y")])).unwrap();
    let cfg_b = load_config(&two_inverter_text([(2, "y"), (1, "x")])).unwrap();
    let opts = ScenarioOptions { t_end: 0.1, ..Default::default() };
    let ev = [SimEvent { time: 0.02, action: EventAction::LoadScale { bus: 3, multiplier: 2.0 } }];
    let ra = run_scenario(&cfg_a, &ev, opts).unwrap();
    let rb = run_scenario(&cfg_b, &ev, opts).unwrap();
    let (xa, xb) = (ra.trajectory.last_state(), rb.trajectory.last_state());
    for j in 0..6 {
        for (a, b) in [(xa[j], xb[6 + j]), (xa[6 + j], xb[j])] {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
    // the symmetric network shares the load equally
    for j in 0..6 {
        assert!((xa[j] - xa[6 + j]).abs() <= 1e-6 * xa[j].abs().max(1.0));
    }
}

#[test]
fn step_beyond_rk4_stability_is_rejected() {
    // the junction bus carries only the regularizing capacitance
    let text = two_inverter_text([(1, "x"), (2, "y")]).replace("b_pu = 0.1\n", "");
    let cfg = load_config(&text).unwrap();
    let net = Network::assemble(&cfg).unwrap();
    let modes = net.bus_modes();
    assert!(modes[2] > 1e5, "{modes:?}");
    let opts = ScenarioOptions { t_end: 0.01, ..Default::default() };
    assert!(matches!(run_scenario(&cfg, &[], opts), Err(NetworkError::StepTooLarge { bus: 3, .. })));
    let fine = ScenarioOptions { dt: 1.0 / modes[2], t_end: 0.001, sample_every: 1 };
    assert!(net.check_step(fine.dt).is_ok());
    let nine = Network::assemble(&common::ieee9()).unwrap();
    assert!(nine.check_step(DEFAULT_DT).is_ok());
}

#[test]
fn scenario_runs_are_deterministic() {
    let cfg = common::ieee9();
    let opts = ScenarioOptions { t_end: 1.6, ..Default::default() };
    let a = scenario_nine_bus(&cfg, opts).unwrap();
    let b = scenario_nine_bus(&cfg, opts).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    export_csv(&a.trajectory, &mut csv_a).unwrap();
    export_csv(&b.trajectory, &mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn events_beyond_the_horizon_are_skipped() {
    let cfg = common::ieee9();
    let r = scenario_nine_bus(&cfg, ScenarioOptions { t_end: 0.5, ..Default::default() }).unwrap();
    assert_eq!(r.skipped_events.len(), 1);
    assert_eq!(r.settling.from_time, 0.0);
    let off_grid = [SimEvent { time: 0.100001, action: EventAction::LoadScale { bus: 6, multiplier: 2.0 } }];
    assert!(run_scenario(&cfg, &off_grid, ScenarioOptions { t_end: 0.5, ..Default::default() }).is_err());
}

/// Simulates `cfg` from its steady state after scaling the load at `bus`,
/// with the DC references re-solved for the post-event equilibrium, and
/// checks that the aggregate incremental storage never grows.
fn assert_storage_decreases(cfg: &NetworkConfig, bus: u32, multiplier: f64, t_end: f64) {
    let pre = steady_state(&Network::assemble(cfg).unwrap()).unwrap();
    let mut post_cfg = cfg.clone();
    for ld in post_cfg.loads.iter_mut().filter(|l| l.bus == bus) {
        ld.r /= multiplier;
        ld.l /= multiplier;
    }
    let mut net = Network::assemble(&post_cfg).unwrap();
    let post = steady_state(&net).unwrap();
    net.i_dc_ref.clone_from(&post.i_dc_ref);
    let lambdas: Vec<f64> = cfg
        .inverters
        .iter()
        .map(|s| synthesize_certificate(&s.params, &s.gains, &s.envelope).unwrap().lambda)
        .collect();
    let omega0 = cfg.omega0;
    let traj = integrate(&mut net, &pre.state, (0.0, t_end), 50e-6, &[], IntegrateOptions { sample_every: 4 }).unwrap();
    let storage: Vec<f64> = (0..traj.len())
        .map(|k| {
            let x_ref = net.rotate_state(&post.state, omega0 * traj.times[k]);
            net.incremental_storage(traj.state(k), &x_ref, &lambdas)
        })
        .collect();
    assert!(storage[0] > 0.0);
    for k in 1..storage.len() {
        assert!(storage[k] <= storage[k - 1] * (1.0 + 1e-9) + 1e-9 * storage[0], "storage rose at sample {k}");
    }
    assert!(*storage.last().unwrap() < 1e-3 * storage[0]);
}

#[test]
fn nine_bus_storage_decreases_after_load_step() {
    assert_storage_decreases(&common::ieee9(), 6, 2.0, 0.5);
}

#[test]
fn random_passive_networks_keep_storage_decreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..4 {
        let mut text = format!("{SYSTEM}[[bus]]\nid = 1\n[[bus]]\nid = 2\n[[bus]]\nid = 3\n");
        for from in [1, 2] {
            text += &format!(
                "[[branch]]\nfrom = {from}\nto = 3\nr_pu = {}\nx_pu = {}\nb_pu = {}\n",
                rng.random_range(0.002..0.05),
                rng.random_range(0.02..0.2),
                rng.random_range(0.05..0.2)
            );
        }
        text += &format!(
            "[[load]]\nbus = 3\np_w = {}\nq_var = {}\n",
            rng.random_range(20e6..120e6),
            rng.random_range(1e6..40e6)
        );
        text += &inverter(1, "a");
        text += &inverter(2, "b");
        let cfg = load_config(&text).unwrap();
        assert_storage_decreases(&cfg, 3, rng.random_range(1.2..2.0), 0.3);
    }
}
