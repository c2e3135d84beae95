use rand::Rng;

use super::solver::{integrate, Recording, SolverConfig};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `M x 3` matrix of independent ±1 entries.
pub fn rademacher(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// Hutchinson estimates `(εᵀJε, ‖εᵀJ‖²)` of the trace and squared Frobenius
/// norm of `J = ∂f/∂z`, sharing one vector-Jacobian product.
pub fn hutchinson_estimates(tape: &mut Tape, f: Var, z: Var, eps: Var) -> Result<(Var, Var)> {
    let u = tape.vjp(f, eps, z)?;
    let ue = tape.mul(u, eps)?;
    let trace = tape.sum(ue)?;
    let u2 = tape.square(u)?;
    let frob = tape.sum(u2)?;
    Ok((trace, frob))
}

/// Result of integrating one continuous flow block.
#[derive(Clone, Copy, Debug)]
pub struct CnfOutput {
    pub z: Var,
    /// `-∫ tr(∂f/∂z) dt` along the direction integrated, i.e. minus the
    /// log-determinant of the map applied.
    pub dlogp: Var,
    /// `∫ ‖f‖² dt`, non-negative in either direction.
    pub ke: Var,
    /// `∫ ‖εᵀJ‖² dt`, non-negative in either direction.
    pub jf: Var,
    pub steps: usize,
}

/// Integrates the augmented state `[z, dlogp, ke, jf]` from `t_start` to
/// `t_end` under `dynamics(t, z)`, with a fixed probe `eps` for the whole
/// integration. Without a probe the trace and Frobenius channels stay zero.
#[allow(clippy::too_many_arguments)]
pub fn integrate_cnf<D>(
    tape: &mut Tape,
    mut dynamics: D,
    z: Var,
    eps: Option<&Tensor>,
    t_start: f64,
    t_end: f64,
    solver: &SolverConfig,
    recording: Recording,
) -> Result<CnfOutput>
where
    D: FnMut(&mut Tape, f64, Var) -> Result<Var>,
{
    if let Some(e) = eps {
        if tape.shape(z) != e.shape() {
            return Err(Error::Shape(format!("probe {:?} for state {:?}", e.shape(), tape.shape(z))));
        }
    }
    let eps = eps.map(|e| tape.constant(e.clone()));
    let sign = if t_end >= t_start { 1.0 } else { -1.0 };
    let zero = Tensor::scalar(0.0);
    let y0 = [z, tape.constant(zero.clone()), tape.constant(zero.clone()), tape.constant(zero)];
    let field = |tape: &mut Tape, t: f64, y: &[Var]| -> Result<Vec<Var>> {
        let f = dynamics(tape, t, y[0])?;
        let f2 = tape.square(f)?;
        let ke = tape.sum(f2)?;
        let ke = tape.scale(ke, sign)?;
        match eps {
            Some(eps) => {
                let (trace, frob) = hutchinson_estimates(tape, f, y[0], eps)?;
                Ok(vec![f, tape.neg(trace)?, ke, tape.scale(frob, sign)?])
            }
            None => {
                let zero = tape.constant(Tensor::scalar(0.0));
                Ok(vec![f, zero, ke, zero])
            }
        }
    };
    let out = integrate(tape, field, &y0, t_start, t_end, solver, recording)?;
    Ok(CnfOutput {
        z: out.state[0],
        dlogp: out.state[1],
        ke: out.state[2],
        jf: out.state[3],
        steps: out.accepted,
    })
}

/// Broadcasts a `1 x 3` row to `rows x 3`.
fn broadcast_row(tape: &mut Tape, row: Var, rows: usize) -> Result<Var> {
    tape.gather(row, &vec![0; rows].into())
}

fn check_scale(tape: &Tape, scale: Var) -> Result<()> {
    if let Some(&s) = tape.value(scale).data().iter().find(|s| s.abs() < 1e-8) {
        return Err(Error::DegenerateScale(s));
    }
    Ok(())
}

/// `M · Σ_d log|s_d|`.
fn actnorm_logdet(tape: &mut Tape, scale: Var, rows: usize) -> Result<Var> {
    let sq = tape.square(scale)?;
    let log = tape.log(sq)?;
    let total = tape.sum(log)?;
    tape.scale(total, 0.5 * rows as f64)
}

/// `Z' = s ⊙ Z + b` row-wise, with its log-determinant.
pub fn actnorm_forward(tape: &mut Tape, scale: Var, shift: Var, z: Var) -> Result<(Var, Var)> {
    check_scale(tape, scale)?;
    let rows = tape.shape(z)[0];
    let s = broadcast_row(tape, scale, rows)?;
    let b = broadcast_row(tape, shift, rows)?;
    let scaled = tape.mul(z, s)?;
    let out = tape.add(scaled, b)?;
    Ok((out, actnorm_logdet(tape, scale, rows)?))
}

/// `Z' = (Z - b) / s` row-wise, with its log-determinant.
pub fn actnorm_inverse(tape: &mut Tape, scale: Var, shift: Var, z: Var) -> Result<(Var, Var)> {
    check_scale(tape, scale)?;
    let rows = tape.shape(z)[0];
    let b = broadcast_row(tape, shift, rows)?;
    let inv = tape.recip(scale)?;
    let inv = broadcast_row(tape, inv, rows)?;
    let centred = tape.sub(z, b)?;
    let out = tape.mul(centred, inv)?;
    let logdet = actnorm_logdet(tape, scale, rows)?;
    Ok((out, tape.neg(logdet)?))
}
