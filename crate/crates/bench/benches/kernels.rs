use std::hint::black_box;

use confflow::diff::Tape;
use confflow::flow::{standard_normal, ConfFlowModel, Direction, FlowConfig, Layer, SolverConfig};
use confflow::gcpt::eval_dynamics;
use confflow::metrics::{kabsch_points, mmd, DistanceSamples, MmdVariant};
use confflow::molgraph::{compute_feature_stats, generate_toy_dataset, ToySpec};
use confflow::train::{batch_loss, TrainingSet};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_for(names: &[&str], config: FlowConfig) -> (ConfFlowModel, Vec<confflow::molgraph::MoleculeRecord>) {
    let records = generate_toy_dataset(&ToySpec::parse(names, 4).unwrap(), 0).unwrap();
    let stats = compute_feature_stats(records.iter().map(|r| &r.graph)).unwrap();
    let mut model = ConfFlowModel::new(config, stats, 0).unwrap();
    confflow::diagnostics::jitter_parameters(&mut model, 0.2, 1);
    (model, records)
}

fn dynamics(c: &mut Criterion) {
    let mut group = c.benchmark_group("eval_dynamics");
    for (label, config) in [("desk", FlowConfig::desk()), ("full", FlowConfig::default())] {
        for name in ["chain-6", "branched-12"] {
            let (model, records) = model_for(&[name], config.clone());
            let mol = model.prepare(&records[0].graph).unwrap();
            let Layer::Cnf(params) = &model.layers()[1] else { unreachable!() };
            let z = standard_normal(mol.atoms(), &mut ChaCha8Rng::seed_from_u64(2));
            group.bench_function(BenchmarkId::new(label, name), |b| {
                b.iter(|| {
                    let mut tape = Tape::new();
                    let bound = model.store().bind(&mut tape, false);
                    let cond = model.condition(&mut tape, &bound, &mol).unwrap();
                    let zv = tape.constant(z.clone());
                    let f = eval_dynamics(&mut tape, params, &bound, &mol.topology, &cond, zv, 0.5).unwrap();
                    black_box(tape.value(f).get(0, 0))
                })
            });
        }
    }
    group.finish();
}

fn flow_passes(c: &mut Criterion) {
    let (model, records) = model_for(&["chain-6", "ring-5", "branched-7"], FlowConfig::desk());
    let mol = model.prepare(&records[2].graph).unwrap();
    let z = standard_normal(mol.atoms(), &mut ChaCha8Rng::seed_from_u64(3));
    c.bench_function("generate/desk/branched-7", |b| {
        b.iter(|| black_box(model.transform(&mol, &z, Direction::Generate, None, None).unwrap().logdet))
    });
    let adaptive = SolverConfig::adaptive(1e-3);
    c.bench_function("generate/adaptive/branched-7", |b| {
        b.iter(|| black_box(model.transform(&mol, &z, Direction::Generate, None, Some(&adaptive)).unwrap().logdet))
    });
    let set = TrainingSet::new(&model, &records).unwrap();
    let items = set.items(&[0, 4, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probes: Vec<_> = items.iter().map(|i| model.draw_probes(i.molecule.atoms(), &mut rng)).collect();
    let solver = SolverConfig::fixed(4);
    c.bench_function("batch_loss/desk/3", |b| {
        b.iter(|| black_box(batch_loss(&model, &items, &probes, &solver, 0.2, 0.2).unwrap().0.loss))
    });
}

fn kabsch(c: &mut Criterion) {
    let mut group = c.benchmark_group("kabsch");
    for n in [8usize, 32, 128] {
        let a: Vec<[f64; 3]> = (0..n).map(|i| [(i as f64).sin(), (1.3 * i as f64).cos(), 0.1 * i as f64]).collect();
        let b: Vec<[f64; 3]> = a.iter().map(|p| [p[1] + 0.01, -p[0], p[2] + 0.5]).collect();
        group.bench_function(BenchmarkId::from_parameter(n), |bench| bench.iter(|| black_box(kabsch_points(&a, &b).unwrap().rmsd)));
    }
    group.finish();
}

fn mmd_estimates(c: &mut Criterion) {
    let rows = |n: usize, shift: f64| -> DistanceSamples {
        DistanceSamples {
            edges: (0..12).map(|k| (0, k + 1)).collect(),
            rows: (0..n).map(|i| (0..12).map(|k| 1.5 + shift + 0.1 * ((i * 13 + k * 7) as f64).sin()).collect()).collect(),
        }
    };
    let g = rows(40, 0.0);
    let r = rows(20, 0.05);
    let mut group = c.benchmark_group("mmd");
    for v in [MmdVariant::Single, MmdVariant::Pair, MmdVariant::All] {
        group.bench_function(BenchmarkId::from_parameter(v), |b| b.iter(|| black_box(mmd(&g, &r, v, 0).unwrap().value)));
    }
    group.finish();
}

criterion_group!(benches, dynamics, flow_passes, kabsch, mmd_estimates);
criterion_main!(benches);
