//! Fixed-step classical Runge–Kutta integration with timed events.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for an event time to count as a multiple of `dt`.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventAction {
    /// Multiply the admittance of every load at `bus` by `multiplier`
    /// (2 doubles the load).
    LoadScale { bus: u32, multiplier: f64 },
    /// Add `delta` amperes to the DC reference current of inverter `inverter`
    /// (0-based position in the config).
    InputStep { inverter: usize, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    #[serde(flatten)]
    pub action: EventAction,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("time step must be finite and > 0, got {0}")]
    BadStep(f64),
    #[error("time span [{0}, {1}] is empty or not a whole number of steps")]
    BadSpan(f64, f64),
    #[error("event at t = {time} s does not fall on the dt = {dt} s grid")]
    OffGridEvent { time: f64, dt: f64 },
    #[error("events must be sorted by time and lie inside the time span (event at t = {0} s)")]
    UnsortedEvents(f64),
    #[error("initial state has length {got}, system dimension is {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("state diverged at t = {time} s; last finite state at t = {last_time} s")]
    Diverged { time: f64, last_time: f64, last_state: Vec<f64> },
    #[error("event cannot be applied: {0}")]
    BadEvent(String),
}

/// A system of ordinary differential equations with optional events and
/// named outputs.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]);

    fn apply_event(&mut self, event: &SimEvent) -> Result<(), SimError> {
        Err(SimError::BadEvent(format!("{event:?} is not supported by this system")))
    }

    fn output_labels(&self) -> Vec<String> {
        Vec::new()
    }

    /// Appends the outputs at `(t, x)` to `out`.
    fn outputs(&self, _t: f64, _x: &[f64], _out: &mut Vec<f64>) {}
}

/// Adapter turning a closure into an [`OdeSystem`] without outputs.
pub struct FnSystem<F: Fn(f64, &[f64], &mut [f64])> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        (self.f)(t, x, dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    /// Keep every `sample_every`-th step (the last step is always kept).
    pub sample_every: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { sample_every: 1 }
    }
}

/// Uniformly sampled solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub dim: usize,
    /// Row-major states, `dim` values per sample.
    pub states: Vec<f64>,
    pub output_labels: Vec<String>,
    /// Row-major outputs, `output_labels.len()` values per sample.
    pub outputs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn output(&self, k: usize) -> &[f64] {
        let m = self.output_labels.len();
        &self.outputs[k * m..(k + 1) * m]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Sample spacing (s).
    pub fn step(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Writes `time_s` and the outputs as CSV. Values use the shortest
    /// representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["time_s".to_string()];
        header.extend(self.output_labels.iter().cloned());
        out.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for k in 0..self.len() {
            row.clear();
            row.push(self.times[k].to_string());
            row.extend(self.output(k).iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn steps_for(span: f64, dt: f64) -> Option<usize> {
    let n = (span / dt).round();
    if n >= 0.0 && (n * dt - span).abs() <= GRID_TOL * span.abs().max(dt) {
        Some(n as usize)
    } else {
        None
    }
}

/// Integrates `sys` over `t_span` with classical RK4 at fixed step `dt`.
///
/// Each event is applied at its timestamp, which must be a whole number of
/// steps from `t_span.0`. The sample at an event time holds the pre-event
/// outputs.
pub fn integrate<S: OdeSystem>(
    sys: &mut S,
    x0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    events: &[SimEvent],
    opts: IntegrateOptions,
) -> Result<Trajectory, SimError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::BadStep(dt));
    }
    let (t0, t1) = t_span;
    let n_steps = steps_for(t1 - t0, dt).filter(|_| t1 >= t0).ok_or(SimError::BadSpan(t0, t1))?;
    let n = sys.dim();
    if x0.len() != n {
        return Err(SimError::Dimension { expected: n, got: x0.len() });
    }
    let mut event_steps = Vec::with_capacity(events.len());
    let mut prev = f64::NEG_INFINITY;
    for e in events {
        if e.time < prev || e.time < t0 || e.time > t1 {
            return Err(SimError::UnsortedEvents(e.time));
        }
        prev = e.time;
        let k = steps_for(e.time - t0, dt).ok_or(SimError::OffGridEvent { time: e.time, dt })?;
        event_steps.push(k);
    }

    let every = opts.sample_every.max(1);
    let labels = sys.output_labels();
    let n_samples = n_steps / every + 2;
    let mut traj = Trajectory {
        times: Vec::with_capacity(n_samples),
        dim: n,
        states: Vec::with_capacity(n_samples * n),
        output_labels: labels,
        outputs: Vec::new(),
    };
    let record = |sys: &S, traj: &mut Trajectory, t: f64, x: &[f64]| {
        traj.times.push(t);
        traj.states.extend_from_slice(x);
        sys.outputs(t, x, &mut traj.outputs);
    };

    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut next_event = 0;
    for step in 0..=n_steps {
        let t = t0 + step as f64 * dt;
        if step % every == 0 || step == n_steps {
            record(sys, &mut traj, t, &x);
        }
        while next_event < events.len() && event_steps[next_event] == step {
            sys.apply_event(&events[next_event])?;
            next_event += 1;
        }
        if step == n_steps {
            break;
        }
        sys.rhs(t, &x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        sys.rhs(t + 0.5 * dt, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        sys.rhs(t + 0.5 * dt, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        sys.rhs(t + dt, &tmp, &mut k4);
        for i in 0..n {
            tmp[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
        if tmp.iter().any(|v| !v.is_finite() || v.abs() > 1e100) {
            return Err(SimError::Diverged { time: t + dt, last_time: t, last_state: x });
        }
        std::mem::swap(&mut x, &mut tmp);
    }
    Ok(traj)
}
