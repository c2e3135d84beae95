//! Graph-conditional point transformer: the network that defines the flow's
//! dynamics.
//!
//! One dynamics evaluation runs `S` point-transformer blocks. Each block
//! performs `R` rounds of attention-style message passing over the molecular
//! graph, using coordinate differences as position encodings, and then maps
//! every atom's coordinate embedding through `Ω`. Interior blocks lift the
//! three Cartesian coordinates to a wider embedding; the final block maps
//! back to three dimensions and its output is the per-atom velocity.

mod params;

use std::sync::Arc;

use crate::diff::{BoundParams, Index, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::molgraph::MolecularGraph;

pub use params::{BlockParams, DynamicsParams, EmbeddingParams, GcptConfig, GcptLayerParams, Linear, Mlp};

/// Directed message-passing structure of one molecule.
///
/// Undirected edge `k = (i, j)` becomes directed edges `2k` (centre `i`,
/// neighbour `j`) and `2k + 1` (centre `j`, neighbour `i`).
#[derive(Clone, Debug)]
pub struct Topology {
    atoms: usize,
    centers: Index,
    neighbors: Index,
    undirected: Index,
    inv_degree: Vec<f64>,
}

impl Topology {
    pub fn new(graph: &MolecularGraph) -> Self {
        Self::from_pairs(graph.atom_count(), graph.edges.iter().map(|e| (e.i, e.j)))
    }

    pub fn from_pairs(atoms: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut centers = Vec::new();
        let mut neighbors = Vec::new();
        let mut undirected = Vec::new();
        for (k, (i, j)) in pairs.into_iter().enumerate() {
            centers.extend([i, j]);
            neighbors.extend([j, i]);
            undirected.extend([k, k]);
        }
        let mut degree = vec![0usize; atoms];
        for &c in &centers {
            degree[c] += 1;
        }
        let inv_degree = degree.iter().map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 }).collect();
        Self {
            atoms,
            centers: Arc::from(centers),
            neighbors: Arc::from(neighbors),
            undirected: Arc::from(undirected),
            inv_degree,
        }
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn directed_edges(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &Index {
        &self.centers
    }

    pub fn neighbors(&self) -> &Index {
        &self.neighbors
    }

    /// Neighbour lists `𝒩_i`.
    pub fn neighbor_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.atoms];
        for (&c, &n) in self.centers.iter().zip(self.neighbors.iter()) {
            sets[c].push(n);
        }
        sets
    }
}

/// Embedded graph features on a tape, computed once per forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Condition {
    /// `M x e` node embeddings.
    pub nodes: Var,
    /// `2|E| x e` directed edge embeddings.
    pub edges: Var,
}

fn time_column(tape: &mut Tape, rows: usize, t: f64) -> Var {
    tape.constant(Tensor::filled(rows, 1, t))
}

/// Node and edge embeddings. Edge rows are expanded to both directions.
pub fn embed(
    tape: &mut Tape,
    params: &EmbeddingParams,
    bound: &BoundParams,
    topo: &Topology,
    node_features: Var,
    edge_features: Var,
) -> Result<Condition> {
    let [m, a] = tape.shape(node_features);
    let [e, b] = tape.shape(edge_features);
    if m != topo.atoms || e * 2 != topo.directed_edges() {
        return Err(Error::Shape(format!(
            "embed: features for {m} atoms / {e} edges do not match topology ({} atoms, {} directed edges)",
            topo.atoms,
            topo.directed_edges()
        )));
    }
    if a != params.node.input_width() || b != params.edge.input_width() {
        return Err(Error::Shape(format!(
            "embed: feature widths ({a}, {b}) differ from ({}, {})",
            params.node.input_width(),
            params.edge.input_width()
        )));
    }
    let nodes = params.node.apply(tape, bound, node_features)?;
    let undirected = params.edge.apply(tape, bound, edge_features)?;
    let edges = tape.gather(undirected, &topo.undirected)?;
    Ok(Condition { nodes, edges })
}

/// Intermediate quantities of one message-passing round, exposed for
/// inspection.
#[derive(Clone, Copy, Debug)]
pub struct MessageWorkspace {
    /// `z_i - z_j` per directed edge.
    pub displacement: Var,
    /// Position encoding `Δ(d_ij, t)`.
    pub position: Var,
    /// Candidate edge update `ĥ_ij`.
    pub edge_update: Var,
    /// Attention weights `ρ(ĥ_ij)`.
    pub attention: Var,
    /// Aggregated message `m_i`.
    pub message: Var,
}

/// One GCPT round. Returns updated node and edge features.
#[allow(clippy::too_many_arguments)]
pub fn gcpt_layer(
    tape: &mut Tape,
    layer: &GcptLayerParams,
    bound: &BoundParams,
    topo: &Topology,
    h_nodes: Var,
    h_edges: Var,
    z: Var,
    t: f64,
) -> Result<(Var, Var)> {
    let (h_nodes, h_edges, _) = gcpt_layer_traced(tape, layer, bound, topo, h_nodes, h_edges, z, t)?;
    Ok((h_nodes, h_edges))
}

/// [`gcpt_layer`] that also returns its [`MessageWorkspace`].
#[allow(clippy::too_many_arguments)]
pub fn gcpt_layer_traced(
    tape: &mut Tape,
    layer: &GcptLayerParams,
    bound: &BoundParams,
    topo: &Topology,
    h_nodes: Var,
    h_edges: Var,
    z: Var,
    t: f64,
) -> Result<(Var, Var, MessageWorkspace)> {
    let m = topo.atoms;
    let de = topo.directed_edges();
    let t_nodes = time_column(tape, m, t);
    let t_edges = time_column(tape, de, t);

    let zi = tape.gather(z, &topo.centers)?;
    let zj = tape.gather(z, &topo.neighbors)?;
    let displacement = tape.sub(zi, zj)?;
    let d_in = tape.concat(&[displacement, t_edges])?;
    let position = layer.delta.apply(tape, bound, d_in)?;

    let h_t = tape.concat(&[h_nodes, t_nodes])?;
    let psi = layer.psi.apply(tape, bound, h_t)?;
    let phi = layer.phi.apply(tape, bound, h_t)?;
    let alpha = layer.alpha.apply(tape, bound, h_t)?;

    let psi_i = tape.gather(psi, &topo.centers)?;
    let phi_j = tape.gather(phi, &topo.neighbors)?;
    let relation = tape.sub(psi_i, phi_j)?;
    let relation = tape.add(relation, h_edges)?;
    let gamma_in = tape.concat(&[relation, position, t_edges])?;
    let edge_update = layer.gamma.apply(tape, bound, gamma_in)?;

    let attention = tape.segment_softmax(edge_update, &topo.centers, m)?;
    let alpha_j = tape.gather(alpha, &topo.neighbors)?;
    let value = tape.add(alpha_j, position)?;
    let weighted = tape.mul(attention, value)?;
    let message = tape.segment_sum(weighted, &topo.centers, m)?;

    let theta_in = tape.concat(&[h_nodes, message, t_nodes])?;
    let node_update = layer.theta.apply(tape, bound, theta_in)?;
    let new_nodes = tape.add(h_nodes, node_update)?;
    let new_edges = tape.add(h_edges, edge_update)?;
    Ok((new_nodes, new_edges, MessageWorkspace { displacement, position, edge_update, attention, message }))
}

/// `Ω(z_i, h_i, mean_{j ∈ 𝒩_i} h_ij, t)` for every atom. Isolated atoms see a
/// zero edge mean.
#[allow(clippy::too_many_arguments)]
pub fn coordinate_update(
    tape: &mut Tape,
    omega: &Mlp,
    bound: &BoundParams,
    topo: &Topology,
    z: Var,
    h_nodes: Var,
    h_edges: Var,
    t: f64,
) -> Result<Var> {
    let m = topo.atoms;
    let width = tape.shape(h_edges)[1];
    let summed = tape.segment_sum(h_edges, &topo.centers, m)?;
    let scale = tape.constant(Tensor::from_fn(m, width, |i, _| topo.inv_degree[i]));
    let edge_mean = tape.mul(summed, scale)?;
    let t_nodes = time_column(tape, m, t);
    let input = tape.concat(&[z, h_nodes, edge_mean, t_nodes])?;
    omega.apply(tape, bound, input)
}

/// Velocity `dZ/dt` of the 3-D coordinates `z` at time `t`.
///
/// The last block's `Ω` output is the displacement `z̃ - z`, so the final
/// coordinate update is `z̃ = z + Ω(...)`.
pub fn eval_dynamics(
    tape: &mut Tape,
    params: &DynamicsParams,
    bound: &BoundParams,
    topo: &Topology,
    condition: &Condition,
    z: Var,
    t: f64,
) -> Result<Var> {
    let shape = tape.shape(z);
    if shape != [topo.atoms, 3] {
        return Err(Error::Shape(format!("eval_dynamics: coordinates {shape:?} for {} atoms", topo.atoms)));
    }
    let mut coords = z;
    let mut h_nodes = condition.nodes;
    let mut h_edges = condition.edges;
    for block in &params.blocks {
        for layer in &block.layers {
            (h_nodes, h_edges) = gcpt_layer(tape, layer, bound, topo, h_nodes, h_edges, coords, t)?;
        }
        coords = coordinate_update(tape, &block.omega, bound, topo, coords, h_nodes, h_edges, t)?;
    }
    if !tape.value(coords).is_finite() {
        return Err(Error::NonFinite(format!("dynamics at t = {t}")));
    }
    Ok(coords)
}

#[cfg(test)]
mod tests;
