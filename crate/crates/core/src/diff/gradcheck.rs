use super::params::{BoundParams, ParamCoord, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub coord: ParamCoord,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
}

/// Scale below which a gradient is treated as zero when forming relative
/// errors.
const REL_FLOOR: f64 = 1e-8;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `objective` with central differences of
/// step `h` at each coordinate in `coords`.
///
/// `objective` must build a scalar on the tape from the bound parameters and
/// be deterministic.
pub fn check_gradients<F>(store: &ParameterStore, coords: &[ParamCoord], h: f64, objective: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let root = objective(&mut tape, &bound)?;
    let grads = tape.backward(root)?;
    let analytic = bound.collect(&grads, store);
    drop(tape);

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, false);
        let root = objective(&mut tape, &bound)?;
        Ok(tape.value(root).item())
    };

    let mut entries = Vec::with_capacity(coords.len());
    let mut probe = store.clone();
    for &coord in coords {
        let orig = store.get(coord.param).data()[coord.offset];
        probe.get_mut(coord.param).data_mut()[coord.offset] = orig + h;
        let up = eval(&probe)?;
        probe.get_mut(coord.param).data_mut()[coord.offset] = orig - h;
        let down = eval(&probe)?;
        probe.get_mut(coord.param).data_mut()[coord.offset] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[coord.param.index()].data()[coord.offset];
        entries.push(GradCheckEntry { coord, analytic: a, numeric, relative_error: relative_error(a, numeric) });
    }
    let max_relative_error = entries.iter().map(|e| e.relative_error).fold(0.0, f64::max);
    Ok(GradCheck { entries, max_relative_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.register("w1", Tensor::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin() * 0.8)).unwrap();
        s.register("b1", Tensor::from_fn(1, 4, |_, j| 0.1 * j as f64 - 0.15)).unwrap();
        s.register("w2", Tensor::from_fn(4, 1, |i, _| (i as f64 * 1.3).cos() * 0.6)).unwrap();
        s.register("unused", Tensor::filled(1, 2, 0.5)).unwrap();
        s
    }

    #[test]
    fn linear_objective_is_exact() {
        let s = store();
        let x = Tensor::from_fn(5, 3, |i, j| (i + j) as f64 * 0.25 + 0.5);
        let check = check_gradients(&s, &s.coords(), 1e-5, |t, p| {
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, p.var(s.id("w1").unwrap()))?;
            t.sum(y)
        })
        .unwrap();
        assert!(check.max_relative_error < 1e-9, "{}", check.max_relative_error);
    }

    #[test]
    fn swish_mlp_and_ignored_parameter() {
        let s = store();
        let x = Tensor::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).cos());
        let rows: crate::diff::Index = vec![0; 5].into();
        let check = check_gradients(&s, &s.coords(), 1e-5, |t, p| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, p.var(s.id("w1").unwrap()))?;
            let b = t.gather(p.var(s.id("b1").unwrap()), &rows)?;
            let h = t.add(h, b)?;
            let h = t.swish(h)?;
            let y = t.matmul(h, p.var(s.id("w2").unwrap()))?;
            let y = t.square(y)?;
            t.sum(y)
        })
        .unwrap();
        assert!(check.max_relative_error < 1e-5, "{}", check.max_relative_error);
        let unused = s.id("unused").unwrap();
        for e in check.entries.iter().filter(|e| e.coord.param == unused) {
            assert!(e.analytic.abs() < 1e-12 && e.numeric.abs() < 1e-12);
        }
    }
}
