use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{check_gradients, ParamCoord, ParameterStore};

fn randomize(store: &mut ParameterStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

fn lin(store: &ParameterStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight);
    let b = store.get(l.bias);
    (0..w.cols()).map(|o| b.get(0, o) + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, o)).sum::<f64>()).collect()
}

fn mlp(store: &ParameterStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = lin(store, &m.first, x).into_iter().map(|v| v / (1.0 + (-v).exp())).collect();
    lin(store, &m.second, &h)
}

#[test]
fn ladder_matches_block_count() {
    let cfg = GcptConfig::default();
    assert_eq!(cfg.ladder(), vec![(3, 32), (32, 32), (32, 3)]);
    let one = GcptConfig { blocks: 1, ..cfg };
    assert_eq!(one.ladder(), vec![(3, 3)]);
}

#[test]
fn embed_zero_weights_gives_bias_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let p = EmbeddingParams::init(&mut store, 2, 2, 3, &mut rng).unwrap();
    store.get_mut(p.node.weight).data_mut().fill(0.0);
    store.get_mut(p.node.bias).data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
    let topo = Topology::from_pairs(3, [(0, 1), (1, 2)]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::from_fn(3, 2, |i, j| (i + j) as f64));
    let ef = tape.constant(Tensor::zeros(2, 2));
    let c = embed(&mut tape, &p, &bound, &topo, x, ef).unwrap();
    for i in 0..3 {
        assert_eq!(tape.value(c.nodes).row(i), &[1.0, -2.0, 0.5]);
    }
    assert_eq!(tape.shape(c.edges), [4, 3]);
}

#[test]
fn embed_scalar_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let p = EmbeddingParams::init(&mut store, 1, 1, 1, &mut rng).unwrap();
    store.get_mut(p.node.weight).data_mut()[0] = 2.0;
    let topo = Topology::from_pairs(1, []);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::scalar(3.0));
    let ef = tape.constant(Tensor::zeros(0, 1));
    let c = embed(&mut tape, &p, &bound, &topo, x, ef).unwrap();
    assert_eq!(tape.value(c.nodes).item(), 6.0);
}

#[test]
fn embed_rejects_wrong_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let p = EmbeddingParams::init(&mut store, 4, 2, 3, &mut rng).unwrap();
    let topo = Topology::from_pairs(2, [(0, 1)]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(2, 5));
    let ef = tape.constant(Tensor::zeros(1, 2));
    assert!(matches!(embed(&mut tape, &p, &bound, &topo, x, ef), Err(Error::Shape(_))));
}

#[test]
fn zero_residual_branches_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::new();
    let layer = GcptLayerParams::init(&mut store, "l", 4, 3, &mut rng).unwrap();
    let topo = Topology::from_pairs(3, [(0, 1), (1, 2), (0, 2)]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let h = tape.constant(Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1));
    let he = tape.constant(Tensor::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.3));
    let z = tape.constant(Tensor::from_fn(3, 3, |i, j| (i * j) as f64));
    let (h2, he2) = gcpt_layer(&mut tape, &layer, &bound, &topo, h, he, z, 0.4).unwrap();
    assert_eq!(tape.value(h2), tape.value(h));
    assert_eq!(tape.value(he2), tape.value(he));
}

#[test]
fn isolated_node_gets_zero_message() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::new();
    let layer = GcptLayerParams::init(&mut store, "l", 2, 3, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.8);
    let topo = Topology::from_pairs(1, []);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let h = tape.constant(Tensor::new(1, 2, vec![0.3, -0.7]).unwrap());
    let he = tape.constant(Tensor::zeros(0, 2));
    let z = tape.constant(Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let t = 0.25;
    let (h2, _, ws) = gcpt_layer_traced(&mut tape, &layer, &bound, &topo, h, he, z, t).unwrap();
    assert_eq!(tape.value(ws.message).data(), &[0.0, 0.0]);
    let theta = mlp(&store, &layer.theta, &[0.3, -0.7, 0.0, 0.0, t]);
    let got = tape.value(h2).data();
    assert!((got[0] - (0.3 + theta[0])).abs() < 1e-14);
    assert!((got[1] - (-0.7 + theta[1])).abs() < 1e-14);
}

#[test]
fn single_neighbor_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParameterStore::new();
    let layer = GcptLayerParams::init(&mut store, "l", 1, 1, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let topo = Topology::from_pairs(2, [(0, 1)]);
    let (h0, h1, he01, z0, z1, t) = (0.4, -1.1, 0.7, 0.9, -0.6, 0.3);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let h = tape.constant(Tensor::column(&[h0, h1]));
    let he = tape.constant(Tensor::column(&[he01, he01]));
    let z = tape.constant(Tensor::column(&[z0, z1]));
    let (h2, he2, ws) = gcpt_layer_traced(&mut tape, &layer, &bound, &topo, h, he, z, t).unwrap();

    let hs = [h0, h1];
    let zs = [z0, z1];
    for (k, (i, j)) in [(0usize, 1usize), (1, 0)].into_iter().enumerate() {
        let d = zs[i] - zs[j];
        let delta = mlp(&store, &layer.delta, &[d, t])[0];
        let psi = lin(&store, &layer.psi, &[hs[i], t])[0];
        let phi = lin(&store, &layer.phi, &[hs[j], t])[0];
        let hhat = mlp(&store, &layer.gamma, &[psi - phi + he01, delta, t])[0];
        let alpha = lin(&store, &layer.alpha, &[hs[j], t])[0];
        let m = alpha + delta;
        let theta = mlp(&store, &layer.theta, &[hs[i], m, t])[0];
        assert_eq!(tape.value(ws.attention).get(k, 0), 1.0);
        assert!((tape.value(ws.displacement).get(k, 0) - d).abs() < 1e-15);
        assert!((tape.value(ws.message).get(i, 0) - m).abs() < 1e-12);
        assert!((tape.value(h2).get(i, 0) - (hs[i] + theta)).abs() < 1e-12);
        assert!((tape.value(he2).get(k, 0) - (he01 + hhat)).abs() < 1e-12);
    }
}

#[test]
fn workspace_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    let layer = GcptLayerParams::init(&mut store, "l", 3, 3, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let topo = Topology::from_pairs(4, [(0, 1), (1, 2), (2, 3), (0, 2), (1, 3)]);
    let sets = topo.neighbor_sets();
    for (i, s) in sets.iter().enumerate() {
        for &j in s {
            assert!(sets[j].contains(&i));
        }
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let h = tape.constant(Tensor::from_fn(4, 3, |i, j| ((i + 2 * j) as f64).sin()));
    let he = tape.constant(Tensor::from_fn(10, 3, |i, j| ((i * j) as f64).cos()));
    let z = tape.constant(Tensor::from_fn(4, 3, |i, j| ((3 * i + j) as f64).sin() * 2.0));
    let (_, _, ws) = gcpt_layer_traced(&mut tape, &layer, &bound, &topo, h, he, z, 0.5).unwrap();
    let d = tape.value(ws.displacement);
    for k in 0..5 {
        for c in 0..3 {
            assert_eq!(d.get(2 * k, c), -d.get(2 * k + 1, c));
        }
    }
    let rho = tape.value(ws.attention);
    for i in 0..4 {
        for c in 0..3 {
            let mut total = 0.0;
            for (k, &centre) in topo.centers().iter().enumerate() {
                if centre == i {
                    let r = rho.get(k, c);
                    assert!((0.0..=1.0).contains(&r));
                    total += r;
                }
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn coordinate_update_zero_final_layer_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParameterStore::new();
    let omega = Mlp::init(&mut store, "omega", 3 + 4 + 1, 2, 3, true, &mut rng).unwrap();
    store.get_mut(omega.second.bias).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let topo = Topology::from_pairs(3, [(0, 1)]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let z = tape.constant(Tensor::from_fn(3, 3, |i, j| (i + j) as f64));
    let h = tape.constant(Tensor::from_fn(3, 2, |i, j| (i * j) as f64));
    let he = tape.constant(Tensor::from_fn(2, 2, |i, j| (i + j) as f64));
    let out = coordinate_update(&mut tape, &omega, &bound, &topo, z, h, he, 0.1).unwrap();
    for i in 0..3 {
        assert_eq!(tape.value(out).row(i), &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn coordinate_update_scalar_toy_matches_hand_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParameterStore::new();
    let omega = Mlp::init(&mut store, "omega", 4, 1, 1, false, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let topo = Topology::from_pairs(3, [(0, 1), (0, 2)]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let z = tape.constant(Tensor::column(&[1.0, 2.0, 3.0]));
    let h = tape.constant(Tensor::column(&[0.1, 0.2, 0.3]));
    let he = tape.constant(Tensor::column(&[0.5, 0.7, -0.4, 1.2]));
    let t = 0.6;
    let out = coordinate_update(&mut tape, &omega, &bound, &topo, z, h, he, t).unwrap();
    let expect = [
        mlp(&store, &omega, &[1.0, 0.1, (0.5 - 0.4) / 2.0, t])[0],
        mlp(&store, &omega, &[2.0, 0.2, 0.7, t])[0],
        mlp(&store, &omega, &[3.0, 0.3, 1.2, t])[0],
    ];
    for (i, e) in expect.iter().enumerate() {
        assert!((tape.value(out).get(i, 0) - e).abs() < 1e-13);
    }
}

#[test]
fn isomorphic_nodes_get_identical_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParameterStore::new();
    let omega = Mlp::init(&mut store, "omega", 3 + 2 + 1, 2, 3, false, &mut rng).unwrap();
    let topo = Topology::from_pairs(3, [(0, 1), (1, 2)]);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let z = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]));
    let h = tape.constant(Tensor::zeros(3, 1));
    let he = tape.constant(Tensor::column(&[0.3, 0.5, 0.5, 0.3]));
    let out = coordinate_update(&mut tape, &omega, &bound, &topo, z, h, he, 0.0).unwrap();
    assert_eq!(tape.value(out).row(0), tape.value(out).row(2));
}

struct Fixture {
    store: ParameterStore,
    embedding: EmbeddingParams,
    dynamics: DynamicsParams,
}

fn fixture(seed: u64, config: &GcptConfig, scale: f64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let embedding = EmbeddingParams::init(&mut store, 2, 2, config.embed_dim, &mut rng).unwrap();
    let dynamics = DynamicsParams::init(&mut store, "cnf", config, &mut rng).unwrap();
    randomize(&mut store, &mut rng, scale);
    Fixture { store, embedding, dynamics }
}

fn run_dynamics(f: &Fixture, pairs: &[(usize, usize)], nodes: &Tensor, edges: &Tensor, z: &Tensor, t: f64) -> Tensor {
    let topo = Topology::from_pairs(nodes.rows(), pairs.iter().copied());
    let mut tape = Tape::new();
    let bound = f.store.bind(&mut tape, false);
    let nf = tape.constant(nodes.clone());
    let ef = tape.constant(edges.clone());
    let cond = embed(&mut tape, &f.embedding, &bound, &topo, nf, ef).unwrap();
    let zv = tape.constant(z.clone());
    let out = eval_dynamics(&mut tape, &f.dynamics, &bound, &topo, &cond, zv, t).unwrap();
    tape.value(out).clone()
}

fn small_config() -> GcptConfig {
    GcptConfig { embed_dim: 4, blocks: 2, rounds: 2, coord_width: 5 }
}

#[test]
fn default_init_dynamics_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    let config = small_config();
    let embedding = EmbeddingParams::init(&mut store, 2, 2, config.embed_dim, &mut rng).unwrap();
    let dynamics = DynamicsParams::init(&mut store, "cnf", &config, &mut rng).unwrap();
    let f = Fixture { store, embedding, dynamics };
    let z = Tensor::from_fn(3, 3, |i, j| (i + j) as f64);
    let out = run_dynamics(&f, &[(0, 1), (1, 2)], &Tensor::filled(3, 2, 1.0), &Tensor::filled(2, 2, 1.0), &z, 0.5);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dynamics_are_permutation_equivariant() {
    let f = fixture(10, &small_config(), 0.5);
    let pairs = [(0, 1), (1, 2), (2, 3), (0, 2), (3, 4)];
    let nodes = Tensor::from_fn(5, 2, |i, j| ((i * 7 + j) as f64).sin());
    let edges = Tensor::from_fn(5, 2, |i, j| ((i * 3 + j) as f64).cos());
    let z = Tensor::from_fn(5, 3, |i, j| ((i * 5 + j * 2) as f64).sin() * 1.5);
    let out = run_dynamics(&f, &pairs, &nodes, &edges, &z, 0.3);

    let perm = [3usize, 0, 4, 1, 2];
    let mut inv = [0usize; 5];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let pairs_p: Vec<_> = pairs.iter().map(|&(i, j)| (inv[i], inv[j])).collect();
    let nodes_p = nodes.select_rows(&perm);
    let z_p = z.select_rows(&perm);
    let out_p = run_dynamics(&f, &pairs_p, &nodes_p, &edges, &z_p, 0.3);
    assert!(out_p.max_abs_diff(&out.select_rows(&perm)) < 1e-9);
}

#[test]
fn dynamics_are_not_translation_invariant() {
    let f = fixture(11, &small_config(), 0.5);
    let pairs = [(0, 1), (1, 2)];
    let nodes = Tensor::from_fn(3, 2, |i, j| (i + j) as f64 * 0.2);
    let edges = Tensor::filled(2, 2, 0.5);
    let z = Tensor::from_fn(3, 3, |i, j| ((i + 2 * j) as f64).cos());
    let shifted = z.map(|v| v + 1.0);
    let a = run_dynamics(&f, &pairs, &nodes, &edges, &z, 0.2);
    let b = run_dynamics(&f, &pairs, &nodes, &edges, &shifted, 0.2);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn dynamics_reject_wrong_coordinate_shape() {
    let f = fixture(12, &small_config(), 0.5);
    let topo = Topology::from_pairs(2, [(0, 1)]);
    let mut tape = Tape::new();
    let bound = f.store.bind(&mut tape, false);
    let nf = tape.constant(Tensor::zeros(2, 2));
    let ef = tape.constant(Tensor::zeros(1, 2));
    let cond = embed(&mut tape, &f.embedding, &bound, &topo, nf, ef).unwrap();
    let z = tape.constant(Tensor::zeros(2, 2));
    assert!(eval_dynamics(&mut tape, &f.dynamics, &bound, &topo, &cond, z, 0.0).is_err());
}

#[test]
fn dynamics_gradients_match_finite_differences() {
    let f = fixture(13, &GcptConfig { embed_dim: 3, blocks: 2, rounds: 1, coord_width: 3 }, 0.6);
    let topo = Topology::from_pairs(3, [(0, 1), (1, 2), (0, 2)]);
    let nodes = Tensor::from_fn(3, 2, |i, j| ((i + j) as f64).sin());
    let edges = Tensor::from_fn(3, 2, |i, j| ((i * 2 + j) as f64).cos());
    let z = Tensor::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
    let weights = Tensor::from_fn(3, 3, |i, j| 1.0 + 0.1 * (i * 3 + j) as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let all = f.store.coords();
    let coords: Vec<ParamCoord> = (0..25).map(|_| all[rng.random_range(0..all.len())]).collect();
    let check = check_gradients(&f.store, &coords, 1e-5, |tape, bound| {
        let nf = tape.constant(nodes.clone());
        let ef = tape.constant(edges.clone());
        let cond = embed(tape, &f.embedding, bound, &topo, nf, ef)?;
        let zv = tape.constant(z.clone());
        let out = eval_dynamics(tape, &f.dynamics, bound, &topo, &cond, zv, 0.4)?;
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w)?;
        tape.sum(p)
    })
    .unwrap();
    assert!(check.max_relative_error < 1e-5, "{}", check.max_relative_error);
}
