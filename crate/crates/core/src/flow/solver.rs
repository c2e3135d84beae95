//! Explicit Runge-Kutta integration of tape-valued state.
//!
//! The state is a list of tape variables advanced together. In
//! [`Recording::Full`] mode every accepted stage stays on the tape, so the
//! integrated result can be differentiated (discretize-then-optimize). In
//! [`Recording::Detached`] mode only values survive each step and the tape is
//! truncated back, keeping memory flat during inference.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on attempted steps per integration.
    pub max_steps: usize,
    /// When set, classic RK4 with this many equal steps replaces the
    /// adaptive solver.
    #[serde(default)]
    pub fixed_steps: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rtol: 1e-3, atol: 1e-3, max_steps: 10_000, fixed_steps: None }
    }
}

impl SolverConfig {
    pub fn adaptive(tol: f64) -> Self {
        Self { rtol: tol, atol: tol, ..Self::default() }
    }

    pub fn fixed(steps: usize) -> Self {
        Self { fixed_steps: Some(steps), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!("solver tolerances must be positive, got rtol {} atol {}", self.rtol, self.atol)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("solver max_steps must be at least 1".into()));
        }
        if self.fixed_steps == Some(0) {
            return Err(Error::Config("fixed_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recording {
    Full,
    Detached,
}

/// Final state of an integration.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub state: Vec<Var>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// One Dormand-Prince step: the fifth-order state, the derivative at the
/// new state, and the embedded error estimate per state part.
pub struct StepResult {
    pub state: Vec<Var>,
    pub derivative: Vec<Var>,
    pub error: Vec<Tensor>,
}

fn integration_error(t: f64, err: Error) -> Error {
    match err {
        e @ Error::Integration { .. } => e,
        other => Error::Integration { molecule: String::new(), t, message: other.to_string() },
    }
}

fn combine(tape: &mut Tape, y: &[Var], terms: &[(f64, &[Var])]) -> Result<Vec<Var>> {
    y.iter()
        .enumerate()
        .map(|(p, &base)| {
            let mut acc = base;
            for &(w, k) in terms {
                if w != 0.0 {
                    let s = tape.scale(k[p], w)?;
                    acc = tape.add(acc, s)?;
                }
            }
            Ok(acc)
        })
        .collect()
}

fn check_parts(tape: &Tape, y: &[Var], k: &[Var]) -> Result<()> {
    if y.len() != k.len() || y.iter().zip(k).any(|(&a, &b)| tape.shape(a) != tape.shape(b)) {
        return Err(Error::Shape("field returned a derivative that does not match the state".into()));
    }
    Ok(())
}

/// Advances `y` by `h` from `t` given the derivative `k1` at `(t, y)`.
pub fn rk45_step<F>(tape: &mut Tape, field: &mut F, t: f64, y: &[Var], k1: &[Var], h: f64) -> Result<StepResult>
where
    F: FnMut(&mut Tape, f64, &[Var]) -> Result<Vec<Var>>,
{
    let mut ks: Vec<Vec<Var>> = vec![k1.to_vec()];
    let mut state = Vec::new();
    for s in 1..7 {
        let terms: Vec<(f64, &[Var])> = A[s].iter().zip(&ks).map(|(&a, k)| (a * h, k.as_slice())).collect();
        let stage = combine(tape, y, &terms)?;
        let k = field(tape, t + C[s] * h, &stage)?;
        check_parts(tape, y, &k)?;
        ks.push(k);
        if s == 6 {
            state = stage;
        }
    }
    let error = (0..y.len())
        .map(|p| {
            let [r, c] = tape.shape(y[p]);
            let mut acc = Tensor::zeros(r, c);
            for (s, k) in ks.iter().enumerate() {
                if E[s] != 0.0 {
                    acc.axpy(h * E[s], tape.value(k[p]));
                }
            }
            acc
        })
        .collect();
    Ok(StepResult { state, derivative: ks.pop().unwrap_or_default(), error })
}

fn rk4_step<F>(tape: &mut Tape, field: &mut F, t: f64, y: &[Var], k1: &[Var], h: f64) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, f64, &[Var]) -> Result<Vec<Var>>,
{
    let s2 = combine(tape, y, &[(h / 2.0, k1)])?;
    let k2 = field(tape, t + h / 2.0, &s2)?;
    let s3 = combine(tape, y, &[(h / 2.0, &k2)])?;
    let k3 = field(tape, t + h / 2.0, &s3)?;
    let s4 = combine(tape, y, &[(h, &k3)])?;
    let k4 = field(tape, t + h, &s4)?;
    combine(tape, y, &[(h / 6.0, k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)])
}

/// Root-mean-square of `error` scaled by `atol + rtol * max(|y0|, |y1|)`.
fn error_norm(tape: &Tape, y0: &[Var], y1: &[Var], error: &[Tensor], rtol: f64, atol: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..error.len() {
        let a = tape.value(y0[p]).data();
        let b = tape.value(y1[p]).data();
        for ((e, x0), x1) in error[p].data().iter().zip(a).zip(b) {
            let scale = atol + rtol * x0.abs().max(x1.abs());
            total += (e / scale).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (total / count as f64).sqrt()
    }
}

fn rms_scaled(values: &[&Tensor], scale_from: &[&Tensor], rtol: f64, atol: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, s) in values.iter().zip(scale_from) {
        for (x, y) in v.data().iter().zip(s.data()) {
            total += (x / (atol + rtol * y.abs())).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (total / count as f64).sqrt()
    }
}

fn detach(tape: &mut Tape, base: usize, parts: &[&[Var]]) -> Vec<Vec<Var>> {
    let values: Vec<Vec<Tensor>> = parts.iter().map(|vs| vs.iter().map(|&v| tape.value(v).clone()).collect()).collect();
    tape.truncate(base);
    values.into_iter().map(|vs| vs.into_iter().map(|v| tape.constant(v)).collect()).collect()
}

/// Starting step size from the local derivative scale, capped at `span`.
#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    tape: &mut Tape,
    field: &mut F,
    t0: f64,
    y0: &[Var],
    f0: &[Var],
    span: f64,
    dir: f64,
    config: &SolverConfig,
) -> Result<f64>
where
    F: FnMut(&mut Tape, f64, &[Var]) -> Result<Vec<Var>>,
{
    let y_vals: Vec<&Tensor> = y0.iter().map(|&v| tape.value(v)).collect();
    let f_vals: Vec<&Tensor> = f0.iter().map(|&v| tape.value(v)).collect();
    let d0 = rms_scaled(&y_vals, &y_vals, config.rtol, config.atol);
    let d1 = rms_scaled(&f_vals, &y_vals, config.rtol, config.atol);
    if d1 < 1e-12 {
        return Ok(span);
    }
    let h0 = if d0 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    let mark = tape.len();
    let probe = combine(tape, y0, &[(h0 * dir, f0)])?;
    let f1 = field(tape, t0 + h0 * dir, &probe)?;
    let diff: Vec<Tensor> = f0
        .iter()
        .zip(&f1)
        .map(|(&a, &b)| tape.value(b).zip_map(tape.value(a), |x, y| x - y))
        .collect();
    let diff_refs: Vec<&Tensor> = diff.iter().collect();
    let y_vals: Vec<&Tensor> = y0.iter().map(|&v| tape.value(v)).collect();
    let d2 = rms_scaled(&diff_refs, &y_vals, config.rtol, config.atol) / h0;
    tape.truncate(mark);
    let h1 = if d1.max(d2) <= 1e-15 { span } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Integrates `dy/dt = field(t, y)` from `t0` to `t1` (either order).
pub fn integrate<F>(
    tape: &mut Tape,
    mut field: F,
    y0: &[Var],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
    recording: Recording,
) -> Result<Trajectory>
where
    F: FnMut(&mut Tape, f64, &[Var]) -> Result<Vec<Var>>,
{
    config.validate()?;
    let base = tape.len();
    let span = (t1 - t0).abs();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut trajectory = Trajectory { state: y0.to_vec(), accepted: 0, rejected: 0, evaluations: 0 };
    if span == 0.0 {
        return Ok(trajectory);
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k = field(tape, t, &y).map_err(|e| integration_error(t, e))?;
    check_parts(tape, &y, &k)?;
    trajectory.evaluations += 1;

    if let Some(n) = config.fixed_steps {
        let h = (t1 - t0) / n as f64;
        for i in 0..n {
            let next = rk4_step(tape, &mut field, t, &y, &k, h).map_err(|e| integration_error(t, e))?;
            trajectory.evaluations += 3;
            t = if i + 1 == n { t1 } else { t0 + h * (i + 1) as f64 };
            y = next;
            trajectory.accepted += 1;
            if i + 1 < n {
                k = field(tape, t, &y).map_err(|e| integration_error(t, e))?;
                trajectory.evaluations += 1;
            }
            if recording == Recording::Detached {
                let mut fresh = detach(tape, base, &[&y, &k]);
                k = fresh.pop().unwrap_or_default();
                y = fresh.pop().unwrap_or_default();
            }
        }
        trajectory.state = y;
        return Ok(trajectory);
    }

    let mut h = initial_step(tape, &mut field, t, &y, &k, span, dir, config).map_err(|e| integration_error(t, e))?;
    trajectory.evaluations += 1;
    while (t1 - t) * dir > 0.0 {
        if trajectory.accepted + trajectory.rejected >= config.max_steps {
            return Err(Error::Integration {
                molecule: String::new(),
                t,
                message: format!("step limit {} reached", config.max_steps),
            });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        let step = if last { remaining } else { h };
        let mark = tape.len();
        let result = rk45_step(tape, &mut field, t, &y, &k, step * dir).map_err(|e| integration_error(t, e))?;
        trajectory.evaluations += 6;
        let norm = error_norm(tape, &y, &result.state, &result.error, config.rtol, config.atol);
        if !norm.is_finite() {
            return Err(Error::Integration { molecule: String::new(), t, message: "non-finite error estimate".into() });
        }
        if norm <= 1.0 {
            t = if last { t1 } else { t + step * dir };
            y = result.state;
            k = result.derivative;
            trajectory.accepted += 1;
            let factor = if norm == 0.0 { MAX_FACTOR } else { (SAFETY * norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
            h = step * factor;
            if recording == Recording::Detached {
                let mut fresh = detach(tape, base, &[&y, &k]);
                k = fresh.pop().unwrap_or_default();
                y = fresh.pop().unwrap_or_default();
            }
        } else {
            tape.truncate(mark);
            trajectory.rejected += 1;
            h = step * (SAFETY * norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }
    trajectory.state = y;
    Ok(trajectory)
}
