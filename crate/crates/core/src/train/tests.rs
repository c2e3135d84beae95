use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::check_gradients;
use crate::flow::FlowConfig;
use crate::gcpt::GcptConfig;
use crate::molgraph::{
    compute_feature_stats, generate_toy_dataset, AtomAttributes, Conformation, MolecularGraph, ToySpec,
};

fn tiny_flow() -> FlowConfig {
    FlowConfig { gcpt: GcptConfig { embed_dim: 4, blocks: 1, rounds: 1, coord_width: 3 }, ..FlowConfig::default() }
}

fn toy_set(names: &[&str], conformers: usize, config: FlowConfig) -> (ConfFlowModel, TrainingSet) {
    let records = generate_toy_dataset(&ToySpec::parse(names, conformers).unwrap(), 11).unwrap();
    let stats = compute_feature_stats(records.iter().map(|r| &r.graph)).unwrap();
    let model = ConfFlowModel::new(config, stats, 5).unwrap();
    let set = TrainingSet::new(&model, &records).unwrap();
    (model, set)
}

fn perturb(model: &mut ConfFlowModel, seed: u64, scale: f64) {
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

fn probes_for(model: &ConfFlowModel, items: &[TrainItem], seed: u64) -> Vec<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.iter().map(|i| model.draw_probes(i.molecule.atoms(), &mut rng)).collect()
}

#[test]
fn single_atom_at_origin_has_standard_normal_loss() {
    let graph = MolecularGraph { id: "c".into(), atoms: vec![AtomAttributes::element(6)], edges: vec![] };
    let stats = compute_feature_stats([&graph]).unwrap();
    let model = ConfFlowModel::new(tiny_flow(), stats, 0).unwrap();
    let record = MoleculeRecord {
        graph: graph.clone(),
        conformers: vec![Conformation::for_graph(&graph, vec![[0.0; 3]]).unwrap()],
    };
    let set = TrainingSet::new(&model, &[record]).unwrap();
    let items = set.items(&[0]);
    let probes = probes_for(&model, &items, 0);
    let (terms, _) = batch_loss(&model, &items, &probes, &SolverConfig::default(), 0.2, 0.2).unwrap();
    assert!((terms.loss - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

#[test]
fn loss_decomposes_into_terms() {
    let (mut model, set) = toy_set(&["chain-5", "ring-4"], 2, tiny_flow());
    perturb(&mut model, 1, 0.3);
    let items = set.items(&[0, 3]);
    let probes = probes_for(&model, &items, 2);
    let solver = SolverConfig::fixed(4);
    let (plain, _) = batch_loss(&model, &items, &probes, &solver, 0.0, 0.0).unwrap();
    assert_eq!(plain.loss, plain.nll_per_dim);
    let (reg, _) = batch_loss(&model, &items, &probes, &solver, 0.3, 0.7).unwrap();
    assert!(reg.ke > 0.0 && reg.jf > 0.0);
    assert!((reg.loss - (plain.loss + 0.3 * plain.ke + 0.7 * plain.jf)).abs() < 1e-12);
}

#[test]
fn duplicated_batch_has_same_loss() {
    let (mut model, set) = toy_set(&["chain-5", "branched-6"], 2, tiny_flow());
    perturb(&mut model, 3, 0.3);
    let items = set.items(&[0, 2]);
    let probes = probes_for(&model, &items, 4);
    let solver = SolverConfig::fixed(3);
    let (once, _) = batch_loss(&model, &items, &probes, &solver, 0.2, 0.2).unwrap();
    let doubled: Vec<TrainItem> = items.iter().chain(items.iter()).copied().collect();
    let probes2: Vec<Vec<Tensor>> = probes.iter().chain(probes.iter()).cloned().collect();
    let (twice, _) = batch_loss(&model, &doubled, &probes2, &solver, 0.2, 0.2).unwrap();
    assert!((once.loss - twice.loss).abs() < 1e-10);
}

#[test]
fn per_item_tapes_match_a_single_tape() {
    let (mut model, set) = toy_set(&["chain-4", "ring-3"], 2, tiny_flow());
    perturb(&mut model, 5, 0.3);
    let items = set.items(&[1, 2]);
    let probes = probes_for(&model, &items, 6);
    let solver = SolverConfig::fixed(3);
    let (terms, grads) = batch_loss(&model, &items, &probes, &solver, 0.2, 0.2).unwrap();
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape, true);
    let atoms = items.iter().map(|i| i.molecule.atoms()).sum();
    let vars = batch_loss_on_tape(&mut tape, &bound, &model, &items, &probes, &solver, 0.2, 0.2, atoms).unwrap();
    assert!((tape.value(vars.loss).item() - terms.loss).abs() < 1e-12);
    let single = bound.collect(&tape.backward(vars.loss).unwrap(), model.store());
    for (a, b) in grads.iter().zip(&single) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (mut model, set) = toy_set(&["chain-4"], 2, tiny_flow());
    perturb(&mut model, 7, 0.4);
    let items = set.items(&[0, 1]);
    let probes = probes_for(&model, &items, 8);
    let solver = SolverConfig::fixed(2);
    let atoms = items.iter().map(|i| i.molecule.atoms()).sum();
    let all = model.store().coords();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let coords: Vec<_> = (0..10).map(|_| all[rng.random_range(0..all.len())]).collect();
    let check = check_gradients(model.store(), &coords, 1e-5, |tape, bound| {
        Ok(batch_loss_on_tape(tape, bound, &model, &items, &probes, &solver, 0.2, 0.2, atoms)?.loss)
    })
    .unwrap();
    assert!(check.max_relative_error < 1e-4, "{}", check.max_relative_error);
}

#[test]
fn clipping_examples() {
    let mut small = vec![Tensor::new(1, 2, vec![0.006, 0.008]).unwrap()];
    assert!((clip_gradients(&mut small, 0.05) - 0.01).abs() < 1e-15);
    assert_eq!(small[0].data(), &[0.006, 0.008]);
    let mut large = vec![Tensor::new(1, 2, vec![0.3, 0.4]).unwrap()];
    assert!((clip_gradients(&mut large, 0.05) - 0.5).abs() < 1e-15);
    assert!((global_norm(&large) - 0.05).abs() < 1e-12);
    assert!((large[0].get(0, 0) - 0.03).abs() < 1e-15);
}

#[test]
fn first_adam_step_by_hand() {
    let mut store = ParameterStore::new();
    let id = store.register("w", Tensor::scalar(1.0)).unwrap();
    let mut adam = AdamState::new(&store);
    let g = 0.25;
    adam.update(&mut store, &[Tensor::scalar(g)], 1e-3);
    let m = 0.1 * g / (1.0 - 0.9);
    let v = 0.001 * g * g / (1.0 - 0.999);
    let expect = 1.0 - 1e-3 * m / (v.sqrt() + 1e-8);
    assert!((store.get(id).item() - expect).abs() < 1e-15);
    assert!((store.get(id).item() - (1.0 - 1e-3)).abs() < 1e-10);
}

#[test]
fn zero_iterations_leave_the_model_untouched() {
    let (mut model, set) = toy_set(&["chain-4"], 2, tiny_flow());
    let before = model.store().clone();
    let config = TrainConfig { iterations: 0, ..TrainConfig::default() };
    let records = train(&mut model, &set, &config, |_, _| Ok(())).unwrap();
    assert!(records.is_empty());
    assert_eq!(model.store(), &before);
    assert!(!model.is_actnorm_initialized());
}

#[test]
fn fixed_seed_training_is_deterministic() {
    let run = || {
        let (mut model, set) = toy_set(&["chain-4", "ring-3"], 3, tiny_flow());
        let config =
            TrainConfig { iterations: 3, batch_size: 2, solver: Some(SolverConfig::fixed(2)), ..TrainConfig::default() };
        let records = train(&mut model, &set, &config, |_, _| Ok(())).unwrap();
        let curve: Vec<(f64, f64)> = records.iter().map(|r| (r.loss, r.grad_norm)).collect();
        (curve, model.store().clone())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert!(a.iter().all(|(l, g)| l.is_finite() && g.is_finite()));
}

#[test]
fn divergence_is_reported() {
    let (mut model, set) = toy_set(&["chain-4"], 2, tiny_flow());
    let config = TrainConfig { iterations: 2, divergence_threshold: -1e9, ..TrainConfig::default() };
    let err = train(&mut model, &set, &config, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Divergence { iteration: 1, .. }));
}

#[test]
fn config_validation() {
    assert!(TrainConfig { grad_clip: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lambda_k: -1.0, ..TrainConfig::default() }.validate().is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
    assert_eq!(parsed.iterations, 7);
    assert_eq!(parsed.lambda_j, 0.2);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"iters": 7}"#).is_err());
}
