//! Maximum-likelihood training with kinetic-energy and Jacobian-Frobenius
//! regularization, Adam and global-norm gradient clipping.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{BoundParams, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{
    conformation_tensor, standard_normal_logpdf, ConfFlowModel, Direction, PreparedMolecule, Recording, SolverConfig,
};
use crate::molgraph::{center_conformation, MoleculeRecord};

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_k: f64,
    pub lambda_j: f64,
    pub learning_rate: f64,
    /// Conformations per batch.
    pub batch_size: usize,
    pub iterations: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Loss above which training is aborted as diverged.
    pub divergence_threshold: f64,
    /// Solver used during training; `None` uses the model's own.
    pub solver: Option<SolverConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_k: 0.2,
            lambda_j: 0.2,
            learning_rate: 1e-3,
            batch_size: 8,
            iterations: 500,
            grad_clip: 0.05,
            seed: 0,
            checkpoint_every: 0,
            divergence_threshold: 1e6,
            solver: None,
        }
    }
}

impl TrainConfig {
    /// Training settings paired with [`crate::flow::FlowConfig::desk`].
    pub fn desk() -> Self {
        Self { learning_rate: 1e-2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_k >= 0.0 && self.lambda_j >= 0.0) {
            return Err(Error::Config("regularization weights must be non-negative".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(s) = &self.solver {
            s.validate()?;
        }
        Ok(())
    }
}

/// Adam moments for every tensor of a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected update of `store` along `grads`.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` to norm `clip` when larger. Returns the norm before
/// clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let f = clip / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= f;
            }
        }
    }
    norm
}

/// Clips `grads` and applies one Adam step. Returns the pre-clip norm.
pub fn clip_and_step(store: &mut ParameterStore, grads: &mut [Tensor], adam: &mut AdamState, clip: f64, lr: f64) -> f64 {
    let norm = clip_gradients(grads, clip);
    adam.update(store, grads, lr);
    norm
}

/// One training row: a molecule and one of its centred conformations.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub molecule: &'a PreparedMolecule,
    pub coords: &'a Tensor,
}

/// Tape handles of the loss and its components, all per dimension.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub nll: Var,
    pub ke: Var,
    pub jf: Var,
}

/// Values of the loss and its components, all per dimension.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub nll_per_dim: f64,
    pub ke: f64,
    pub jf: f64,
}

/// Regularized objective of `items` recorded on one tape, normalised by
/// `3 * total_atoms`. `probes[k]` holds the per-block probes of item `k`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &ConfFlowModel,
    items: &[TrainItem],
    probes: &[Vec<Tensor>],
    solver: &SolverConfig,
    lambda_k: f64,
    lambda_j: f64,
    total_atoms: usize,
) -> Result<LossVars> {
    if probes.len() != items.len() {
        return Err(Error::Config(format!("{} probe sets for {} items", probes.len(), items.len())));
    }
    let mut nll = tape.constant(Tensor::scalar(0.0));
    let mut ke = tape.constant(Tensor::scalar(0.0));
    let mut jf = tape.constant(Tensor::scalar(0.0));
    for (item, probe) in items.iter().zip(probes) {
        let cond = model.condition(tape, bound, item.molecule)?;
        let x = tape.constant(item.coords.clone());
        let pass = model.run_on_tape(
            tape,
            bound,
            item.molecule,
            &cond,
            x,
            Direction::Encode,
            Some(probe),
            solver,
            Recording::Full,
        )?;
        let log_pz = standard_normal_logpdf(tape, pass.out)?;
        let log_px = tape.add(log_pz, pass.logdet)?;
        nll = tape.sub(nll, log_px)?;
        ke = tape.add(ke, pass.ke)?;
        jf = tape.add(jf, pass.jf)?;
    }
    let norm = 1.0 / (3.0 * total_atoms as f64);
    let nll = tape.scale(nll, norm)?;
    let ke = tape.scale(ke, norm)?;
    let jf = tape.scale(jf, norm)?;
    let wk = tape.scale(ke, lambda_k)?;
    let wj = tape.scale(jf, lambda_j)?;
    let loss = tape.add(nll, wk)?;
    let loss = tape.add(loss, wj)?;
    Ok(LossVars { loss, nll, ke, jf })
}

/// Loss and gradient of a batch. Items are evaluated on separate tapes (in
/// parallel) and their gradients summed in order.
pub fn batch_loss(
    model: &ConfFlowModel,
    items: &[TrainItem],
    probes: &[Vec<Tensor>],
    solver: &SolverConfig,
    lambda_k: f64,
    lambda_j: f64,
) -> Result<(LossTerms, Vec<Tensor>)> {
    if items.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let total_atoms: usize = items.iter().map(|i| i.molecule.atoms()).sum();
    let parts: Vec<Result<(LossTerms, Vec<Tensor>)>> = items
        .par_iter()
        .zip(probes.par_iter())
        .map(|(item, probe)| {
            let mut tape = Tape::new();
            let bound = model.store().bind(&mut tape, true);
            let vars = batch_loss_on_tape(
                &mut tape,
                &bound,
                model,
                std::slice::from_ref(item),
                std::slice::from_ref(probe),
                solver,
                lambda_k,
                lambda_j,
                total_atoms,
            )?;
            let grads = tape.backward(vars.loss)?;
            let terms = LossTerms {
                loss: tape.value(vars.loss).item(),
                nll_per_dim: tape.value(vars.nll).item(),
                ke: tape.value(vars.ke).item(),
                jf: tape.value(vars.jf).item(),
            };
            Ok((terms, bound.collect(&grads, model.store())))
        })
        .collect();
    let mut total = LossTerms::default();
    let mut grads: Option<Vec<Tensor>> = None;
    for part in parts {
        let (terms, g) = part?;
        total.loss += terms.loss;
        total.nll_per_dim += terms.nll_per_dim;
        total.ke += terms.ke;
        total.jf += terms.jf;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.axpy(1.0, b);
                }
            }
        }
    }
    Ok((total, grads.unwrap_or_default()))
}

/// Per-iteration training log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub nll_per_dim: f64,
    pub ke: f64,
    pub jf: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Centred training rows of a dataset with their prepared molecules.
pub struct TrainingSet {
    pub molecules: Vec<PreparedMolecule>,
    /// `(molecule index, centred coordinates)`.
    pub rows: Vec<(usize, Tensor)>,
}

impl TrainingSet {
    pub fn new(model: &ConfFlowModel, dataset: &[MoleculeRecord]) -> Result<Self> {
        let mut molecules = Vec::with_capacity(dataset.len());
        let mut rows = Vec::new();
        for (k, record) in dataset.iter().enumerate() {
            molecules.push(model.prepare(&record.graph)?);
            for c in &record.conformers {
                rows.push((k, conformation_tensor(&center_conformation(c))));
            }
        }
        if rows.is_empty() {
            return Err(Error::Precondition("training set has no conformations".into()));
        }
        Ok(Self { molecules, rows })
    }

    pub fn items(&self, rows: &[usize]) -> Vec<TrainItem<'_>> {
        rows.iter().map(|&r| TrainItem { molecule: &self.molecules[self.rows[r].0], coords: &self.rows[r].1 }).collect()
    }

    /// Mean negative log-likelihood per dimension over every row, with
    /// probes from `seed`.
    pub fn mean_nll(&self, model: &ConfFlowModel, seed: u64) -> Result<f64> {
        let values: Vec<Result<f64>> = self
            .rows
            .par_iter()
            .enumerate()
            .map(|(k, (m, x))| model.log_likelihood(&self.molecules[*m], x, seed.wrapping_add(k as u64)))
            .collect();
        let mut total = 0.0;
        for v in values {
            total += v?;
        }
        Ok(total / self.rows.len() as f64)
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Integration { .. } | Error::DegenerateScale(_))
}

/// Runs `config.iterations` optimisation steps, calling `on_step` after each.
/// On divergence the model keeps the parameters of the last good step.
pub fn train(
    model: &mut ConfFlowModel,
    data: &TrainingSet,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord, &ConfFlowModel) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    config.validate()?;
    let solver = config.solver.clone().unwrap_or_else(|| model.config().solver.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.store());
    let mut records = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    let batch = config.batch_size.min(data.rows.len());
    for iteration in 1..=config.iterations {
        let rows = sample_indices(&mut rng, data.rows.len(), batch).into_vec();
        let items = data.items(&rows);
        if !model.is_actnorm_initialized() {
            let init: Vec<(&PreparedMolecule, &Tensor)> = items.iter().map(|i| (i.molecule, i.coords)).collect();
            model.initialize_actnorm(&init)?;
        }
        let probes: Vec<Vec<Tensor>> = items.iter().map(|i| model.draw_probes(i.molecule.atoms(), &mut rng)).collect();
        let ids = || items.iter().map(|i| i.molecule.id.as_str()).collect::<Vec<_>>().join(", ");
        let (terms, mut grads) = match batch_loss(model, &items, &probes, &solver, config.lambda_k, config.lambda_j) {
            Ok(r) => r,
            Err(e) if is_divergence(&e) => {
                return Err(Error::Divergence { iteration, message: format!("{e} (batch: {})", ids()) });
            }
            Err(e) => return Err(e),
        };
        if !terms.loss.is_finite() || terms.loss > config.divergence_threshold {
            return Err(Error::Divergence { iteration, message: format!("loss {} (batch: {})", terms.loss, ids()) });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration, message: format!("non-finite gradient (batch: {})", ids()) });
        }
        let grad_norm = clip_and_step(model.store_mut(), &mut grads, &mut adam, config.grad_clip, config.learning_rate);
        let record = TrainRecord {
            iteration,
            loss: terms.loss,
            nll_per_dim: terms.nll_per_dim,
            ke: terms.ke,
            jf: terms.jf,
            grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_step(&record, model)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests;
