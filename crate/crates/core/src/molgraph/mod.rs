//! Molecular graphs, conformations, feature encoding and dataset I/O.

mod augment;
mod dataset;
mod features;
mod toy;

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment_edges, bonded_distances};
pub use dataset::{parse_dataset, read_dataset, serialize_dataset, write_dataset, Dataset, MoleculeRecord};
pub use features::{
    compute_feature_stats, edge_cols, encode_features, node_cols, EncodedGraph, FeatureStats, EDGE_WIDTH, NODE_WIDTH,
    STD_FLOOR,
};
pub use toy::{generate_toy_dataset, Template, ToySpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hybridization {
    S,
    Sp,
    Sp2,
    Sp3,
    Sp3d,
    Sp3d2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chirality {
    Cw,
    Ccw,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stereo {
    Z,
    E,
    Cis,
    Trans,
    Any,
}

/// Per-atom attributes. `None` marks an absent value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomAttributes {
    pub atomic_number: Option<u8>,
    pub hybridization: Option<Hybridization>,
    pub degree: Option<u8>,
    pub formal_charge: Option<i8>,
    pub total_h: Option<u8>,
    pub implicit_valence: Option<u8>,
    pub total_valence: Option<u8>,
    pub radical_electrons: Option<u8>,
    pub chirality: Option<Chirality>,
    pub is_aromatic: bool,
    pub is_in_ring: bool,
}

impl AtomAttributes {
    /// A neutral, non-aromatic atom of the given element with every other
    /// field absent.
    pub fn element(atomic_number: u8) -> Self {
        Self {
            atomic_number: Some(atomic_number),
            hybridization: None,
            degree: None,
            formal_charge: None,
            total_h: None,
            implicit_valence: None,
            total_valence: None,
            radical_electrons: None,
            chirality: None,
            is_aromatic: false,
            is_in_ring: false,
        }
    }

    pub fn is_hydrogen(&self) -> bool {
        self.atomic_number == Some(1)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        fn range<T: PartialOrd + Copy + std::fmt::Display>(
            name: &str,
            v: Option<T>,
            lo: T,
            hi: T,
        ) -> std::result::Result<(), String> {
            match v {
                Some(x) if x < lo || x > hi => Err(format!("{name} = {x} outside {lo}..={hi}")),
                _ => Ok(()),
            }
        }
        range("atomic_number", self.atomic_number, 1, 119)?;
        range("degree", self.degree, 0, 10)?;
        range("formal_charge", self.formal_charge, -5, 5)?;
        range("total_h", self.total_h, 0, 8)?;
        range("implicit_valence", self.implicit_valence, 1, 15)?;
        range("total_valence", self.total_valence, 1, 15)?;
        range("radical_electrons", self.radical_electrons, 0, 4)?;
        if let (Some(h), Some(v)) = (self.total_h, self.total_valence) {
            if h > v {
                return Err(format!("total_h {h} exceeds total_valence {v}"));
            }
        }
        Ok(())
    }
}

/// Ring sizes covered by [`EdgeAttributes::in_ring_size`], starting at 3.
pub const RING_SIZES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttributes {
    pub bond_type: Option<BondType>,
    pub stereo: Option<Stereo>,
    pub is_conjugated: bool,
    pub is_same_ring: bool,
    pub shortest_path: u8,
    /// Membership in rings of size 3 through 9.
    pub in_ring_size: [bool; RING_SIZES],
}

impl EdgeAttributes {
    pub fn single_bond() -> Self {
        Self {
            bond_type: Some(BondType::Single),
            stereo: None,
            is_conjugated: false,
            is_same_ring: false,
            shortest_path: 1,
            in_ring_size: [false; RING_SIZES],
        }
    }

    /// Non-bonded edge between atoms `hops` bonds apart.
    pub fn auxiliary(hops: u8) -> Self {
        Self {
            bond_type: None,
            stereo: None,
            is_conjugated: false,
            is_same_ring: false,
            shortest_path: hops,
            in_ring_size: [false; RING_SIZES],
        }
    }

    pub fn is_bonded(&self) -> bool {
        self.shortest_path == 1
    }

    pub fn with_ring_size(mut self, size: usize) -> Self {
        if (3..3 + RING_SIZES).contains(&size) {
            self.in_ring_size[size - 3] = true;
            self.is_same_ring = true;
        }
        self
    }
}

/// Undirected edge stored once with `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub attrs: EdgeAttributes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MolecularGraph {
    pub id: String,
    pub atoms: Vec<AtomAttributes>,
    pub edges: Vec<Edge>,
}

impl MolecularGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn heavy_mask(&self) -> Vec<bool> {
        self.atoms.iter().map(|a| !a.is_hydrogen()).collect()
    }

    pub fn is_augmented(&self) -> bool {
        self.edges.iter().any(|e| !e.attrs.is_bonded())
    }

    pub fn bonded_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().filter(|e| e.attrs.is_bonded()).map(|e| (e.i, e.j))
    }

    /// Checks index bounds, uniqueness, attribute ranges, edge-kind
    /// consistency and bonded connectivity.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation { molecule: self.id.clone(), message };
        let m = self.atoms.len();
        if m == 0 {
            return Err(fail("molecule has no atoms".into()));
        }
        for (k, a) in self.atoms.iter().enumerate() {
            a.validate().map_err(|e| fail(format!("atom {k}: {e}")))?;
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            if e.i >= m || e.j >= m {
                return Err(fail(format!("edge ({}, {}) references atom beyond {m}", e.i, e.j)));
            }
            if e.i >= e.j {
                return Err(fail(format!("edge ({}, {}) must satisfy i < j", e.i, e.j)));
            }
            if !seen.insert((e.i, e.j)) {
                return Err(fail(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
            let sp = e.attrs.shortest_path;
            match (sp, e.attrs.bond_type.is_some()) {
                (1, true) | (2, false) | (3, false) => {}
                _ => {
                    return Err(fail(format!(
                        "edge ({}, {}) has shortest_path {sp} inconsistent with its bond type",
                        e.i, e.j
                    )))
                }
            }
        }
        let mut adj = vec![Vec::new(); m];
        for (i, j) in self.bonded_pairs() {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut visited = vec![false; m];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(k) = visited.iter().position(|v| !v) {
            return Err(fail(format!("atom {k} is not connected to the bonded graph")));
        }
        Ok(())
    }
}

/// Atomic coordinates in Ångström with the heavy-atom mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformation {
    pub coords: Vec<[f64; 3]>,
    pub heavy_mask: Vec<bool>,
}

impl Conformation {
    pub fn new(coords: Vec<[f64; 3]>, heavy_mask: Vec<bool>) -> Result<Self> {
        if coords.len() != heavy_mask.len() {
            return Err(Error::Shape(format!(
                "conformation has {} coordinates but {} mask entries",
                coords.len(),
                heavy_mask.len()
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conformation coordinates".into()));
        }
        Ok(Self { coords, heavy_mask })
    }

    /// Conformation whose mask is derived from `graph`'s atomic numbers.
    pub fn for_graph(graph: &MolecularGraph, coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.len() != graph.atom_count() {
            return Err(Error::Validation {
                molecule: graph.id.clone(),
                message: format!("conformer has {} atoms, graph has {}", coords.len(), graph.atom_count()),
            });
        }
        Self::new(coords, graph.heavy_mask())
    }

    pub fn atom_count(&self) -> usize {
        self.coords.len()
    }

    pub fn translated(&self, v: [f64; 3]) -> Self {
        let coords = self.coords.iter().map(|c| [c[0] + v[0], c[1] + v[1], c[2] + v[2]]).collect();
        Self { coords, heavy_mask: self.heavy_mask.clone() }
    }
}

/// Removes the per-axis mean.
pub fn center_conformation(c: &Conformation) -> Conformation {
    let n = c.coords.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for p in &c.coords {
        for d in 0..3 {
            mean[d] += p[d];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let coords = c.coords.iter().map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]).collect();
    Conformation { coords, heavy_mask: c.heavy_mask.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(m: usize) -> MolecularGraph {
        MolecularGraph {
            id: format!("chain{m}"),
            atoms: vec![AtomAttributes::element(6); m],
            edges: (0..m - 1).map(|i| Edge { i, j: i + 1, attrs: EdgeAttributes::single_bond() }).collect(),
        }
    }

    #[test]
    fn validation_catches_bad_edges() {
        assert!(chain(3).validate().is_ok());
        let mut g = chain(3);
        g.edges.push(Edge { i: 0, j: 3, attrs: EdgeAttributes::single_bond() });
        assert!(matches!(g.validate(), Err(Error::Validation { molecule, .. }) if molecule == "chain3"));
        let mut g = chain(3);
        g.edges.push(g.edges[0].clone());
        assert!(g.validate().is_err());
        let mut g = chain(3);
        g.edges[0].attrs.shortest_path = 2;
        assert!(g.validate().is_err());
        let mut g = chain(4);
        g.edges.pop();
        assert!(g.validate().unwrap_err().to_string().contains("not connected"));
    }

    #[test]
    fn attribute_ranges_checked() {
        let mut g = chain(2);
        g.atoms[1].total_h = Some(5);
        g.atoms[1].total_valence = Some(4);
        assert!(g.validate().is_err());
        let mut g = chain(2);
        g.atoms[0].formal_charge = Some(-6);
        assert!(g.validate().is_err());
    }

    #[test]
    fn centering_examples() {
        let c = Conformation::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![true, true]).unwrap();
        let centered = center_conformation(&c);
        assert_eq!(centered.coords, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(center_conformation(&centered).coords == centered.coords);
        let moved = c.translated([1.0, 2.0, 3.0]);
        assert_eq!(center_conformation(&moved).coords, centered.coords);
    }

    #[test]
    fn heavy_mask_follows_atomic_number() {
        let mut g = chain(3);
        g.atoms[2] = AtomAttributes::element(1);
        assert_eq!(g.heavy_mask(), vec![true, true, false]);
    }
}
