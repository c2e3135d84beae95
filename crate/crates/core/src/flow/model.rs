use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cnf::{actnorm_forward, actnorm_inverse, integrate_cnf, rademacher};
use super::solver::{Recording, SolverConfig};
use crate::diff::{BoundParams, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gcpt::{embed, eval_dynamics, Condition, DynamicsParams, EmbeddingParams, GcptConfig, Topology};
use crate::molgraph::{encode_features, Conformation, FeatureStats, MolecularGraph, EDGE_WIDTH, NODE_WIDTH};

const CHECKPOINT_FORMAT: &str = "confflow-checkpoint-v1";

/// Architecture, solver and integration interval of a flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Length of the alternating ActNorm / CNF stack (odd).
    pub layers: usize,
    pub gcpt: GcptConfig,
    pub solver: SolverConfig,
    pub t0: f64,
    pub t1: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { layers: 5, gcpt: GcptConfig::default(), solver: SolverConfig::default(), t0: 0.0, t1: 1.0 }
    }
}

impl FlowConfig {
    /// Small architecture with a fixed-step solver, sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            gcpt: GcptConfig { embed_dim: 16, blocks: 2, rounds: 1, coord_width: 16 },
            solver: SolverConfig::fixed(4),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers % 2 == 0 {
            return Err(Error::Config(format!("layer count must be odd, got {}", self.layers)));
        }
        let g = &self.gcpt;
        if g.embed_dim == 0 || g.blocks == 0 || g.coord_width == 0 {
            return Err(Error::Config("embedding width, block count and coordinate width must be positive".into()));
        }
        if !(self.t0.is_finite() && self.t1.is_finite() && self.t0 < self.t1) {
            return Err(Error::Config(format!("invalid integration interval [{}, {}]", self.t0, self.t1)));
        }
        self.solver.validate()
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    ActNorm { scale: ParamId, shift: ParamId },
    Cnf(DynamicsParams),
}

/// Which way a pass runs through the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Latent to data (sampling).
    Generate,
    /// Data to latent (density evaluation).
    Encode,
}

/// A molecule's graph with its encoded features.
#[derive(Clone, Debug)]
pub struct PreparedMolecule {
    pub id: String,
    pub topology: Topology,
    pub node_features: Tensor,
    pub edge_features: Tensor,
    pub heavy_mask: Vec<bool>,
}

impl PreparedMolecule {
    pub fn atoms(&self) -> usize {
        self.topology.atoms()
    }
}

/// Tape-level result of a full pass.
#[derive(Clone, Copy, Debug)]
pub struct PassOutput {
    pub out: Var,
    /// Total log-determinant of the maps applied.
    pub logdet: Var,
    pub ke: Var,
    pub jf: Var,
    pub steps: usize,
}

/// Value-level result of a full pass.
#[derive(Clone, Debug)]
pub struct Transformed {
    pub out: Tensor,
    pub logdet: f64,
    pub ke: f64,
    pub jf: f64,
    pub steps: usize,
}

/// The normalizing flow: ActNorm layers interleaved with graph-conditioned
/// continuous flow blocks, plus the shared feature embeddings.
#[derive(Clone, Debug)]
pub struct ConfFlowModel {
    config: FlowConfig,
    stats: FeatureStats,
    store: ParameterStore,
    embedding: EmbeddingParams,
    layers: Vec<Layer>,
    actnorm_initialized: bool,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: FlowConfig,
    stats: FeatureStats,
    actnorm_initialized: bool,
    params: serde_json::Value,
}

/// `Σ log N(z; 0, 1)` over every entry.
pub fn standard_normal_logpdf(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.value(z).len() as f64;
    let sq = tape.square(z)?;
    let total = tape.sum(sq)?;
    let half = tape.scale(total, -0.5)?;
    let c = tape.constant(Tensor::scalar(-0.5 * n * (2.0 * std::f64::consts::PI).ln()));
    tape.add(half, c)
}

pub fn conformation_tensor(c: &Conformation) -> Tensor {
    Tensor::from_rows(&c.coords)
}

impl ConfFlowModel {
    pub fn new(config: FlowConfig, stats: FeatureStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let embedding = EmbeddingParams::init(&mut store, NODE_WIDTH, EDGE_WIDTH, config.gcpt.embed_dim, &mut rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            if l % 2 == 0 {
                let scale = store.register(format!("actnorm{l}.scale"), Tensor::filled(1, 3, 1.0))?;
                let shift = store.register(format!("actnorm{l}.shift"), Tensor::zeros(1, 3))?;
                layers.push(Layer::ActNorm { scale, shift });
            } else {
                layers.push(Layer::Cnf(DynamicsParams::init(&mut store, &format!("cnf{l}"), &config.gcpt, &mut rng)?));
            }
        }
        Ok(Self { config, stats, store, embedding, layers, actnorm_initialized: false })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn embedding(&self) -> &EmbeddingParams {
        &self.embedding
    }

    pub fn cnf_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Cnf(_))).count()
    }

    pub fn is_actnorm_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    pub fn set_actnorm_initialized(&mut self, value: bool) {
        self.actnorm_initialized = value;
    }

    /// Replaces the solver used by inference passes.
    pub fn set_solver(&mut self, solver: SolverConfig) -> Result<()> {
        solver.validate()?;
        self.config.solver = solver;
        Ok(())
    }

    pub fn prepare(&self, graph: &MolecularGraph) -> Result<PreparedMolecule> {
        let encoded = encode_features(graph, &self.stats)?;
        Ok(PreparedMolecule {
            id: graph.id.clone(),
            topology: Topology::new(graph),
            node_features: encoded.nodes,
            edge_features: encoded.edges,
            heavy_mask: graph.heavy_mask(),
        })
    }

    pub fn condition(&self, tape: &mut Tape, bound: &BoundParams, mol: &PreparedMolecule) -> Result<Condition> {
        let nodes = tape.constant(mol.node_features.clone());
        let edges = tape.constant(mol.edge_features.clone());
        embed(tape, &self.embedding, bound, &mol.topology, nodes, edges)
    }

    /// One Rademacher probe per continuous flow block.
    pub fn draw_probes(&self, atoms: usize, rng: &mut impl rand::Rng) -> Vec<Tensor> {
        (0..self.cnf_count()).map(|_| rademacher(atoms, 3, rng)).collect()
    }

    /// Runs the stack on `input`. `probes` holds one probe per CNF block;
    /// `None` skips the trace and Frobenius estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn run_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        mol: &PreparedMolecule,
        cond: &Condition,
        input: Var,
        direction: Direction,
        probes: Option<&[Tensor]>,
        solver: &SolverConfig,
        recording: Recording,
    ) -> Result<PassOutput> {
        if tape.shape(input) != [mol.atoms(), 3] {
            return Err(Error::Shape(format!(
                "{}: coordinates {:?} for {} atoms",
                mol.id,
                tape.shape(input),
                mol.atoms()
            )));
        }
        if let Some(p) = probes {
            if p.len() != self.cnf_count() {
                return Err(Error::Config(format!("{} probes for {} flow blocks", p.len(), self.cnf_count())));
            }
        }
        let order: Vec<usize> = match direction {
            Direction::Generate => (0..self.layers.len()).collect(),
            Direction::Encode => (0..self.layers.len()).rev().collect(),
        };
        let (t_start, t_end) = match direction {
            Direction::Generate => (self.config.t0, self.config.t1),
            Direction::Encode => (self.config.t1, self.config.t0),
        };
        let mut z = input;
        let mut logdet = tape.constant(Tensor::scalar(0.0));
        let mut ke = tape.constant(Tensor::scalar(0.0));
        let mut jf = tape.constant(Tensor::scalar(0.0));
        let mut steps = 0;
        for l in order {
            match &self.layers[l] {
                Layer::ActNorm { scale, shift } => {
                    let (s, b) = (bound.var(*scale), bound.var(*shift));
                    let (out, ld) = match direction {
                        Direction::Generate => actnorm_forward(tape, s, b, z)?,
                        Direction::Encode => actnorm_inverse(tape, s, b, z)?,
                    };
                    z = out;
                    logdet = tape.add(logdet, ld)?;
                }
                Layer::Cnf(dynamics) => {
                    let k = l / 2;
                    let probe = probes.map(|p| &p[k]);
                    let topo = &mol.topology;
                    let field = |tape: &mut Tape, t: f64, z: Var| eval_dynamics(tape, dynamics, bound, topo, cond, z, t);
                    let out = integrate_cnf(tape, field, z, probe, t_start, t_end, solver, recording).map_err(|e| match e {
                        Error::Integration { t, message, .. } => Error::Integration { molecule: mol.id.clone(), t, message },
                        other => other,
                    })?;
                    z = out.z;
                    logdet = tape.sub(logdet, out.dlogp)?;
                    ke = tape.add(ke, out.ke)?;
                    jf = tape.add(jf, out.jf)?;
                    steps += out.steps;
                }
            }
        }
        Ok(PassOutput { out: z, logdet, ke, jf, steps })
    }

    /// Value-level pass with the model's solver unless `solver` overrides it.
    pub fn transform(
        &self,
        mol: &PreparedMolecule,
        input: &Tensor,
        direction: Direction,
        probes: Option<&[Tensor]>,
        solver: Option<&SolverConfig>,
    ) -> Result<Transformed> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let cond = self.condition(&mut tape, &bound, mol)?;
        let x = tape.constant(input.clone());
        let solver = solver.unwrap_or(&self.config.solver);
        let pass = self.run_on_tape(&mut tape, &bound, mol, &cond, x, direction, probes, solver, Recording::Detached)?;
        Ok(Transformed {
            out: tape.value(pass.out).clone(),
            logdet: tape.value(pass.logdet).item(),
            ke: tape.value(pass.ke).item(),
            jf: tape.value(pass.jf).item(),
            steps: pass.steps,
        })
    }

    /// Negative log-likelihood of the (centred) coordinates `x` in nats per
    /// dimension, with Hutchinson probes from `probe_seed`.
    pub fn log_likelihood(&self, mol: &PreparedMolecule, x: &Tensor, probe_seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probes = self.draw_probes(mol.atoms(), &mut rng);
        let t = self.transform(mol, x, Direction::Encode, Some(&probes), None)?;
        Ok(nll_per_dim(&t.out, t.logdet))
    }

    /// `n` conformations drawn from standard-normal latents. Each draw fails
    /// independently.
    pub fn sample(&self, mol: &PreparedMolecule, n: usize, seed: u64) -> Vec<Result<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Tensor> = (0..n).map(|_| standard_normal(mol.atoms(), &mut rng)).collect();
        latents.iter().map(|z| self.transform(mol, z, Direction::Generate, None, None).map(|t| t.out)).collect()
    }

    /// Data-dependent ActNorm initialisation: walking the stack in the
    /// encoding direction, each ActNorm gets the per-axis mean and standard
    /// deviation of its input over the batch. Runs at most once.
    pub fn initialize_actnorm(&mut self, batch: &[(&PreparedMolecule, &Tensor)]) -> Result<bool> {
        if self.actnorm_initialized {
            return Ok(false);
        }
        if batch.is_empty() {
            return Err(Error::Precondition("ActNorm initialisation needs a non-empty batch".into()));
        }
        let mut current: Vec<Tensor> = batch.iter().map(|(_, x)| (*x).clone()).collect();
        for l in (0..self.layers.len()).rev() {
            match self.layers[l].clone() {
                Layer::ActNorm { scale, shift } => {
                    let rows: usize = current.iter().map(|t| t.rows()).sum();
                    let mut mean = [0.0; 3];
                    for t in &current {
                        for i in 0..t.rows() {
                            for d in 0..3 {
                                mean[d] += t.get(i, d) / rows as f64;
                            }
                        }
                    }
                    let mut var = [0.0; 3];
                    for t in &current {
                        for i in 0..t.rows() {
                            for d in 0..3 {
                                var[d] += (t.get(i, d) - mean[d]).powi(2) / rows as f64;
                            }
                        }
                    }
                    let std = var.map(f64::sqrt);
                    if let Some(&s) = std.iter().find(|s| **s < 1e-8) {
                        return Err(Error::DegenerateScale(s));
                    }
                    self.store.get_mut(scale).data_mut().copy_from_slice(&std);
                    self.store.get_mut(shift).data_mut().copy_from_slice(&mean);
                    for t in &mut current {
                        *t = Tensor::from_fn(t.rows(), 3, |i, d| (t.get(i, d) - mean[d]) / std[d]);
                    }
                }
                Layer::Cnf(dynamics) => {
                    for ((mol, _), t) in batch.iter().zip(current.iter_mut()) {
                        let mut tape = Tape::new();
                        let bound = self.store.bind(&mut tape, false);
                        let cond = self.condition(&mut tape, &bound, mol)?;
                        let z = tape.constant(t.clone());
                        let topo = &mol.topology;
                        let field = |tape: &mut Tape, time: f64, z: Var| {
                            eval_dynamics(tape, &dynamics, &bound, topo, &cond, z, time)
                        };
                        let out = integrate_cnf(
                            &mut tape,
                            field,
                            z,
                            None,
                            self.config.t1,
                            self.config.t0,
                            &self.config.solver,
                            Recording::Detached,
                        )?;
                        *t = tape.value(out.z).clone();
                    }
                }
            }
        }
        self.actnorm_initialized = true;
        Ok(true)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            stats: self.stats.clone(),
            actnorm_initialized: self.actnorm_initialized,
            params: self.store.to_json(),
        };
        serde_json::to_value(ck).expect("checkpoint serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        let mut model = Self::new(ck.config, ck.stats, 0)?;
        let loaded = ParameterStore::from_json(ck.params)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, architecture expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in loaded.iter().zip(model.store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!("tensor {a} {:?} does not match {b} {:?}", ta.shape(), tb.shape())));
            }
        }
        model.store = loaded;
        model.actnorm_initialized = ck.actnorm_initialized;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json(serde_json::from_slice(&bytes)?)
    }
}

/// `-(log N(z) + logdet) / (3M)`.
pub fn nll_per_dim(latent: &Tensor, logdet: f64) -> f64 {
    let n = latent.len() as f64;
    let log_pz = -0.5 * latent.norm_sq() - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    -(log_pz + logdet) / n
}

pub fn standard_normal(rows: usize, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::from_fn(rows, 3, |_, _| StandardNormal.sample(rng))
}
