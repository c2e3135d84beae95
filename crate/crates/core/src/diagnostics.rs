//! Self-checks of the numerical invariants, run by `confflow check`.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{check_gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{
    hutchinson_estimates, rademacher, standard_normal, ConfFlowModel, Direction, FlowConfig, Layer, PreparedMolecule,
    SolverConfig,
};
use crate::gcpt::{eval_dynamics, GcptConfig};
use crate::molgraph::{compute_feature_stats, generate_toy_dataset, Edge, MolecularGraph, MoleculeRecord, ToySpec};
use crate::train::{batch_loss_on_tape, TrainItem, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckLevel {
    Fast,
    Full,
}

/// Outcome of one invariant: `measured` must stay below `threshold`.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.measured < self.threshold
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} measured {:.3e} < {:.1e} ({:.1}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.elapsed.as_secs_f64()
        )
    }
}

const TEMPLATES: [&str; 6] = ["chain-4", "chain-6", "ring-3", "ring-5", "branched-5", "branched-7"];

/// A small flow with all non-ActNorm parameters uniformly jittered, and the
/// toy molecules it is evaluated on.
pub struct Harness {
    pub model: ConfFlowModel,
    pub records: Vec<MoleculeRecord>,
}

impl Harness {
    pub fn new(names: &[&str], conformers: usize, jitter: f64, seed: u64) -> Result<Self> {
        let records = generate_toy_dataset(&ToySpec::parse(names, conformers)?, seed)?;
        let stats = compute_feature_stats(records.iter().map(|r| &r.graph))?;
        let config =
            FlowConfig { gcpt: GcptConfig { embed_dim: 8, blocks: 2, rounds: 1, coord_width: 6 }, ..FlowConfig::default() };
        let mut model = ConfFlowModel::new(config, stats, seed)?;
        jitter_parameters(&mut model, jitter, seed);
        Ok(Self { model, records })
    }

    /// Single-block flow whose dynamics are a jittered GCPT plus a strongly
    /// contracting per-atom path `≈ -kappa z`, so the Jacobian trace dominates
    /// its off-diagonal mass.
    pub fn contracting(names: &[&str], kappa: f64, seed: u64) -> Result<Self> {
        let records = generate_toy_dataset(&ToySpec::parse(names, 2)?, seed)?;
        let stats = compute_feature_stats(records.iter().map(|r| &r.graph))?;
        let config =
            FlowConfig { gcpt: GcptConfig { embed_dim: 8, blocks: 1, rounds: 1, coord_width: 6 }, ..FlowConfig::default() };
        let mut model = ConfFlowModel::new(config, stats, seed)?;
        jitter_parameters(&mut model, 0.3, seed);
        let omegas: Vec<_> = model
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Cnf(d) => Some(d.blocks[0].omega.clone()),
                Layer::ActNorm { .. } => None,
            })
            .collect();
        let store = model.store_mut();
        for omega in omegas {
            // Hidden units 0..3 carry z in the near-linear range of swish.
            let w1 = store.get_mut(omega.first.weight);
            for d in 0..3 {
                for k in 0..3 {
                    w1.set(d, k, if d == k { 1.0 } else { 0.0 });
                }
            }
            let b1 = store.get_mut(omega.first.bias);
            for k in 0..3 {
                b1.set(0, k, 8.0);
            }
            let w2 = store.get_mut(omega.second.weight);
            for k in 0..3 {
                for d in 0..3 {
                    w2.set(k, d, if d == k { -kappa } else { 0.0 });
                }
            }
        }
        Ok(Self { model, records })
    }

    pub fn prepared(&self) -> Result<Vec<PreparedMolecule>> {
        self.records.iter().map(|r| self.model.prepare(&r.graph)).collect()
    }
}

/// Adds `U(-scale, scale)` noise to every parameter outside the ActNorm layers.
pub fn jitter_parameters(model: &mut ConfFlowModel, scale: f64, seed: u64) {
    if scale <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        if model.store().name(id).starts_with("actnorm") {
            continue;
        }
        for x in model.store_mut().get_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

fn first_cnf(model: &ConfFlowModel) -> Result<&crate::gcpt::DynamicsParams> {
    model
        .layers()
        .iter()
        .find_map(|l| match l {
            Layer::Cnf(d) => Some(d),
            Layer::ActNorm { .. } => None,
        })
        .ok_or_else(|| Error::Precondition("model has no continuous layer".into()))
}

fn timed(name: impl Into<String>, threshold: f64, f: impl FnOnce() -> Result<f64>) -> Result<CheckOutcome> {
    let start = Instant::now();
    let measured = f()?;
    Ok(CheckOutcome { name: name.into(), measured, threshold, elapsed: start.elapsed() })
}

/// Largest `|encode(generate(z)) - z|` over Gaussian latents.
pub fn round_trip_error(harness: &Harness, tol: f64, seed: u64) -> Result<f64> {
    let solver = SolverConfig::adaptive(tol);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for mol in harness.prepared()? {
        let z = standard_normal(mol.atoms(), &mut rng);
        let x = harness.model.transform(&mol, &z, Direction::Generate, None, Some(&solver))?;
        let back = harness.model.transform(&mol, &x.out, Direction::Encode, None, Some(&solver))?;
        worst = worst.max(back.out.max_abs_diff(&z));
    }
    Ok(worst)
}

/// Jacobian of the first continuous layer's dynamics at `z`, one row per
/// output coordinate, assembled from unit-vector VJPs.
pub fn dense_jacobian(model: &ConfFlowModel, mol: &PreparedMolecule, z: &Tensor, t: f64) -> Result<Vec<Vec<f64>>> {
    let dynamics = first_cnf(model)?;
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, false);
    let cond = model.condition(&mut tape, &bound, mol)?;
    let zv = tape.constant(z.clone());
    let f = eval_dynamics(&mut tape, dynamics, &bound, &mol.topology, &cond, zv, t)?;
    let base = tape.len();
    let n = z.len();
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let mut e = Tensor::zeros(z.rows(), 3);
        e.data_mut()[k] = 1.0;
        let ev = tape.constant(e);
        let row = tape.vjp(f, ev, zv)?;
        rows.push(tape.value(row).data().to_vec());
        tape.truncate(base);
    }
    Ok(rows)
}

/// Mean Hutchinson trace and Frobenius estimates over `probes` Rademacher
/// draws for the same dynamics as [`dense_jacobian`].
pub fn hutchinson_means(
    model: &ConfFlowModel,
    mol: &PreparedMolecule,
    z: &Tensor,
    t: f64,
    probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let dynamics = first_cnf(model)?;
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, false);
    let cond = model.condition(&mut tape, &bound, mol)?;
    let zv = tape.constant(z.clone());
    let f = eval_dynamics(&mut tape, dynamics, &bound, &mol.topology, &cond, zv, t)?;
    let base = tape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut trace, mut frob) = (0.0, 0.0);
    for _ in 0..probes {
        let eps: Var = tape.constant(rademacher(z.rows(), 3, &mut rng));
        let (tr, fr) = hutchinson_estimates(&mut tape, f, zv, eps)?;
        trace += tape.value(tr).item();
        frob += tape.value(fr).item();
        tape.truncate(base);
    }
    Ok((trace / probes as f64, frob / probes as f64))
}

/// Worst relative error of the Hutchinson means against the dense Jacobian
/// over the harness molecules, as `(trace, frobenius)`.
pub fn trace_oracle_error(harness: &Harness, probes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_tr, mut worst_fr): (f64, f64) = (0.0, 0.0);
    for (k, mol) in harness.prepared()?.iter().enumerate() {
        let z = standard_normal(mol.atoms(), &mut rng);
        let jac = dense_jacobian(&harness.model, mol, &z, 0.5)?;
        let exact_tr: f64 = (0..jac.len()).map(|i| jac[i][i]).sum();
        let exact_fr: f64 = jac.iter().flatten().map(|v| v * v).sum();
        let (tr, fr) = hutchinson_means(&harness.model, mol, &z, 0.5, probes, seed.wrapping_add(k as u64))?;
        worst_tr = worst_tr.max((tr - exact_tr).abs() / exact_tr.abs());
        worst_fr = worst_fr.max((fr - exact_fr).abs() / exact_fr.abs());
    }
    Ok((worst_tr, worst_fr))
}

/// Gradient check of the batch loss over `coords` random parameter
/// coordinates with a fixed-step solver and fixed probes.
pub fn loss_gradient_error(harness: &Harness, coords: usize, seed: u64) -> Result<f64> {
    let model = &harness.model;
    let set = TrainingSet::new(model, &harness.records[..2.min(harness.records.len())])?;
    let rows: Vec<usize> = (0..set.rows.len()).step_by(set.rows.len().div_ceil(2).max(1)).take(2).collect();
    let items: Vec<TrainItem> = set.items(&rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<Vec<Tensor>> = items.iter().map(|i| model.draw_probes(i.molecule.atoms(), &mut rng)).collect();
    let solver = SolverConfig::fixed(2);
    let atoms = items.iter().map(|i| i.molecule.atoms()).sum();
    let all = model.store().coords();
    let picked: Vec<_> = (0..coords).map(|_| all[rng.random_range(0..all.len())]).collect();
    let check = check_gradients(model.store(), &picked, 1e-5, |tape, bound| {
        Ok(batch_loss_on_tape(tape, bound, model, &items, &probes, &solver, 0.2, 0.2, atoms)?.loss)
    })?;
    Ok(check.max_relative_error)
}

/// Relabels atoms so that new atom `k` is old atom `perm[k]`.
pub fn permute_graph(graph: &MolecularGraph, perm: &[usize]) -> MolecularGraph {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    MolecularGraph {
        id: graph.id.clone(),
        atoms: perm.iter().map(|&old| graph.atoms[old].clone()).collect(),
        edges: graph
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (inv[e.i], inv[e.j]);
                Edge { i: a.min(b), j: a.max(b), attrs: e.attrs.clone() }
            })
            .collect(),
    }
}

fn dynamics_at(model: &ConfFlowModel, mol: &PreparedMolecule, z: &Tensor, t: f64) -> Result<Tensor> {
    let dynamics = first_cnf(model)?;
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, false);
    let cond = model.condition(&mut tape, &bound, mol)?;
    let zv = tape.constant(z.clone());
    let f = eval_dynamics(&mut tape, dynamics, &bound, &mol.topology, &cond, zv, t)?;
    Ok(tape.value(f).clone())
}

/// Largest discrepancy between permuting the dynamics' output and evaluating
/// on a permuted molecule (atoms relabelled, edge list shuffled), over
/// `trials` random relabellings.
pub fn permutation_error(harness: &Harness, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let record = &harness.records[k % harness.records.len()];
        let mol = harness.model.prepare(&record.graph)?;
        let z = standard_normal(mol.atoms(), &mut rng);
        let t = rng.random_range(0.0..1.0);
        let mut perm: Vec<usize> = (0..mol.atoms()).collect();
        perm.shuffle(&mut rng);
        let out = dynamics_at(&harness.model, &mol, &z, t)?;
        let mut relabelled = permute_graph(&record.graph, &perm);
        relabelled.edges.shuffle(&mut rng);
        let permuted = harness.model.prepare(&relabelled)?;
        let out_p = dynamics_at(&harness.model, &permuted, &z.select_rows(&perm), t)?;
        worst = worst.max(out_p.max_abs_diff(&out.select_rows(&perm)));
    }
    Ok(worst)
}

/// Largest atom displacement of a freshly initialised flow in the
/// generating direction.
pub fn identity_displacement(names: &[&str], seed: u64) -> Result<f64> {
    let records = generate_toy_dataset(&ToySpec::parse(names, 2)?, seed)?;
    let stats = compute_feature_stats(records.iter().map(|r| &r.graph))?;
    let model = ConfFlowModel::new(FlowConfig::default(), stats, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for r in &records {
        let mol = model.prepare(&r.graph)?;
        let z = standard_normal(mol.atoms(), &mut rng);
        let x = model.transform(&mol, &z, Direction::Generate, None, None)?;
        worst = worst.max(x.out.max_abs_diff(&z));
    }
    Ok(worst)
}

/// Runs every invariant once. `Full` widens the molecule set and uses 10⁴
/// probes for the trace oracle.
pub fn run_checks(level: CheckLevel, mut report: impl FnMut(&CheckOutcome)) -> Result<Vec<CheckOutcome>> {
    let full = level == CheckLevel::Full;
    let names: &[&str] = if full { &TEMPLATES } else { &TEMPLATES[..3] };
    let seed = 17;
    let harness = Harness::new(names, 2, 0.3, seed)?;
    let trace_names = ["chain-4", "ring-3", "chain-5", "branched-5", "chain-6"];
    let trace_harness = Harness::contracting(&trace_names[..if full { 5 } else { 2 }], 1.0, seed)?;
    let probes = if full { 10_000 } else { 2_000 };
    let trace_tol = if full { 0.01 } else { 0.03 };
    let mut outcomes = Vec::new();
    let mut push = |o: CheckOutcome| {
        report(&o);
        outcomes.push(o);
    };
    push(timed("round-trip (tol 1e-3)", 2e-3, || round_trip_error(&harness, 1e-3, seed))?);
    if full {
        push(timed("round-trip (tol 1e-8)", 1e-6, || round_trip_error(&harness, 1e-8, seed))?);
    }
    let start = Instant::now();
    let (tr, fr) = trace_oracle_error(&trace_harness, probes, seed)?;
    let elapsed = start.elapsed();
    push(CheckOutcome { name: format!("trace oracle ({probes} probes)"), measured: tr, threshold: trace_tol, elapsed });
    push(CheckOutcome {
        name: format!("frobenius oracle ({probes} probes)"),
        measured: fr,
        threshold: 2.0 * trace_tol,
        elapsed,
    });
    push(timed("gradient check", 1e-4, || loss_gradient_error(&harness, if full { 20 } else { 8 }, seed))?);
    push(timed("permutation equivariance", 1e-9, || permutation_error(&harness, 20, seed))?);
    push(timed("identity at initialisation", 1e-8, || identity_displacement(names, seed))?);
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permuting_twice_by_inverse_restores_graph() {
        let records = generate_toy_dataset(&ToySpec::parse(&["branched-5"], 2).unwrap(), 0).unwrap();
        let g = &records[0].graph;
        let n = g.atom_count();
        let perm: Vec<usize> = (0..n).rev().collect();
        let back = permute_graph(&permute_graph(g, &perm), &perm);
        assert_eq!(&back, g);
    }

    #[test]
    fn dense_jacobian_of_zero_dynamics_is_zero() {
        let h = Harness::new(&["chain-4"], 2, 0.0, 1).unwrap();
        let mol = &h.prepared().unwrap()[0];
        let z = Tensor::from_fn(mol.atoms(), 3, |i, j| (i + j) as f64);
        let jac = dense_jacobian(&h.model, mol, &z, 0.3).unwrap();
        assert_eq!(jac.len(), 3 * mol.atoms());
        assert!(jac.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn outcome_line_reports_verdict() {
        let o = CheckOutcome { name: "x".into(), measured: 0.5, threshold: 0.1, elapsed: Duration::ZERO };
        assert!(!o.passed());
        assert!(o.to_string().starts_with("FAIL x"));
    }
}
