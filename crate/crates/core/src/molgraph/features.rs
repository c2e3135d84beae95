use serde::{Deserialize, Serialize};

use super::{AtomAttributes, BondType, Chirality, EdgeAttributes, Hybridization, MolecularGraph, Stereo, RING_SIZES};
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Lower bound applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

const NODE_NUMERIC: usize = 7;
const EDGE_NUMERIC: usize = 1;
const HYBRIDIZATIONS: [Hybridization; 6] = [
    Hybridization::S,
    Hybridization::Sp,
    Hybridization::Sp2,
    Hybridization::Sp3,
    Hybridization::Sp3d,
    Hybridization::Sp3d2,
];
const CHIRALITIES: [Chirality; 3] = [Chirality::Cw, Chirality::Ccw, Chirality::Other];
const BOND_TYPES: [BondType; 4] = [BondType::Single, BondType::Double, BondType::Triple, BondType::Aromatic];
const STEREOS: [Stereo; 5] = [Stereo::Z, Stereo::E, Stereo::Cis, Stereo::Trans, Stereo::Any];

/// Node row: z-scored numerics, their absence flags, hybridization and
/// chirality one-hots (each with an absent slot), then two booleans.
pub const NODE_WIDTH: usize = NODE_NUMERIC * 2 + (HYBRIDIZATIONS.len() + 1) + (CHIRALITIES.len() + 1) + 2;

/// Edge row: z-scored shortest path, bond-type and stereo one-hots (each with
/// an absent slot), two booleans, then ring-size membership.
pub const EDGE_WIDTH: usize = EDGE_NUMERIC + (BOND_TYPES.len() + 1) + (STEREOS.len() + 1) + 2 + RING_SIZES;

/// Column offsets inside a node row.
pub mod node_cols {
    pub const ATOMIC_NUMBER: usize = 0;
    pub const ABSENT_FLAGS: usize = 7;
    pub const HYBRIDIZATION: usize = 14;
    pub const CHIRALITY: usize = 21;
    pub const IS_AROMATIC: usize = 25;
    pub const IS_IN_RING: usize = 26;
}

/// Column offsets inside an edge row.
pub mod edge_cols {
    pub const SHORTEST_PATH: usize = 0;
    pub const BOND_TYPE: usize = 1;
    pub const STEREO: usize = 6;
    pub const IS_CONJUGATED: usize = 12;
    pub const IS_SAME_RING: usize = 13;
    pub const RING_SIZE: usize = 14;
}

/// Dataset-level normalization for the numeric channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub node_mean: Vec<f64>,
    pub node_std: Vec<f64>,
    pub edge_mean: Vec<f64>,
    pub edge_std: Vec<f64>,
}

/// Node and edge feature matrices of one graph. Edge rows follow the
/// graph's edge order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGraph {
    pub nodes: Tensor,
    pub edges: Tensor,
}

fn node_numeric(a: &AtomAttributes) -> [Option<f64>; NODE_NUMERIC] {
    [
        a.atomic_number.map(f64::from),
        a.degree.map(f64::from),
        a.formal_charge.map(f64::from),
        a.total_h.map(f64::from),
        a.implicit_valence.map(f64::from),
        a.total_valence.map(f64::from),
        a.radical_electrons.map(f64::from),
    ]
}

fn edge_numeric(e: &EdgeAttributes) -> [Option<f64>; EDGE_NUMERIC] {
    [Some(f64::from(e.shortest_path))]
}

fn moments<const N: usize>(rows: impl Iterator<Item = [Option<f64>; N]>) -> (Vec<f64>, Vec<f64>) {
    let mut count = [0usize; N];
    let mut sum = [0.0; N];
    let mut sum_sq = [0.0; N];
    for row in rows {
        for (k, v) in row.iter().enumerate() {
            if let Some(v) = v {
                count[k] += 1;
                sum[k] += v;
                sum_sq[k] += v * v;
            }
        }
    }
    let mut mean = vec![0.0; N];
    let mut std = vec![1.0; N];
    for k in 0..N {
        if count[k] > 0 {
            let n = count[k] as f64;
            mean[k] = sum[k] / n;
            let var = (sum_sq[k] / n - mean[k] * mean[k]).max(0.0);
            std[k] = var.sqrt().max(STD_FLOOR);
        }
    }
    (mean, std)
}

/// Population mean and standard deviation of each numeric channel over
/// every atom and edge of `graphs`.
pub fn compute_feature_stats<'a, I>(graphs: I) -> Result<FeatureStats>
where
    I: IntoIterator<Item = &'a MolecularGraph>,
{
    let graphs: Vec<&MolecularGraph> = graphs.into_iter().collect();
    if graphs.is_empty() {
        return Err(Error::Precondition("feature statistics need at least one molecule".into()));
    }
    let (node_mean, node_std) = moments(graphs.iter().flat_map(|g| g.atoms.iter().map(node_numeric)));
    let (edge_mean, edge_std) = moments(graphs.iter().flat_map(|g| g.edges.iter().map(|e| edge_numeric(&e.attrs))));
    Ok(FeatureStats { node_mean, node_std, edge_mean, edge_std })
}

fn one_hot<T: PartialEq>(row: &mut [f64], vocab: &[T], value: Option<&T>) {
    let slot = match value {
        Some(v) => vocab.iter().position(|x| x == v).unwrap_or(vocab.len()),
        None => vocab.len(),
    };
    row[slot] = 1.0;
}

fn check_range(molecule: &str, what: &str, v: Option<f64>, lo: f64, hi: f64) -> Result<()> {
    match v {
        Some(x) if !(lo..=hi).contains(&x) => {
            Err(Error::Encoding(format!("{molecule}: {what} = {x} outside vocabulary {lo}..={hi}")))
        }
        _ => Ok(()),
    }
}

/// Fixed-layout feature matrices for `g`, `M x NODE_WIDTH` and
/// `|E| x EDGE_WIDTH`.
pub fn encode_features(g: &MolecularGraph, stats: &FeatureStats) -> Result<EncodedGraph> {
    const NODE_RANGES: [(&str, f64, f64); NODE_NUMERIC] = [
        ("atomic_number", 1.0, 119.0),
        ("degree", 0.0, 10.0),
        ("formal_charge", -5.0, 5.0),
        ("total_h", 0.0, 8.0),
        ("implicit_valence", 1.0, 15.0),
        ("total_valence", 1.0, 15.0),
        ("radical_electrons", 0.0, 4.0),
    ];
    if stats.node_mean.len() != NODE_NUMERIC || stats.edge_mean.len() != EDGE_NUMERIC {
        return Err(Error::Encoding("feature statistics have the wrong channel count".into()));
    }
    let mut nodes = Tensor::zeros(g.atom_count(), NODE_WIDTH);
    for (r, atom) in g.atoms.iter().enumerate() {
        let row = &mut nodes.data_mut()[r * NODE_WIDTH..(r + 1) * NODE_WIDTH];
        for (k, v) in node_numeric(atom).into_iter().enumerate() {
            let (name, lo, hi) = NODE_RANGES[k];
            check_range(&g.id, name, v, lo, hi)?;
            match v {
                Some(x) => row[k] = (x - stats.node_mean[k]) / stats.node_std[k],
                None => row[node_cols::ABSENT_FLAGS + k] = 1.0,
            }
        }
        one_hot(
            &mut row[node_cols::HYBRIDIZATION..node_cols::CHIRALITY],
            &HYBRIDIZATIONS,
            atom.hybridization.as_ref(),
        );
        one_hot(&mut row[node_cols::CHIRALITY..node_cols::IS_AROMATIC], &CHIRALITIES, atom.chirality.as_ref());
        row[node_cols::IS_AROMATIC] = f64::from(u8::from(atom.is_aromatic));
        row[node_cols::IS_IN_RING] = f64::from(u8::from(atom.is_in_ring));
    }
    let mut edges = Tensor::zeros(g.edges.len(), EDGE_WIDTH);
    for (r, e) in g.edges.iter().enumerate() {
        let row = &mut edges.data_mut()[r * EDGE_WIDTH..(r + 1) * EDGE_WIDTH];
        let sp = f64::from(e.attrs.shortest_path);
        check_range(&g.id, "shortest_path", Some(sp), 1.0, 3.0)?;
        row[edge_cols::SHORTEST_PATH] = (sp - stats.edge_mean[0]) / stats.edge_std[0];
        one_hot(&mut row[edge_cols::BOND_TYPE..edge_cols::STEREO], &BOND_TYPES, e.attrs.bond_type.as_ref());
        one_hot(&mut row[edge_cols::STEREO..edge_cols::IS_CONJUGATED], &STEREOS, e.attrs.stereo.as_ref());
        row[edge_cols::IS_CONJUGATED] = f64::from(u8::from(e.attrs.is_conjugated));
        row[edge_cols::IS_SAME_RING] = f64::from(u8::from(e.attrs.is_same_ring));
        for (k, &member) in e.attrs.in_ring_size.iter().enumerate() {
            row[edge_cols::RING_SIZE + k] = f64::from(u8::from(member));
        }
    }
    Ok(EncodedGraph { nodes, edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::Edge;

    fn two_atoms(z0: u8, z1: u8) -> MolecularGraph {
        MolecularGraph {
            id: "pair".into(),
            atoms: vec![AtomAttributes::element(z0), AtomAttributes::element(z1)],
            edges: vec![Edge { i: 0, j: 1, attrs: EdgeAttributes::single_bond() }],
        }
    }

    #[test]
    fn layout_offsets_are_consistent() {
        assert_eq!(NODE_WIDTH, 27);
        assert_eq!(EDGE_WIDTH, 21);
        assert_eq!(node_cols::IS_IN_RING + 1, NODE_WIDTH);
        assert_eq!(edge_cols::RING_SIZE + RING_SIZES, EDGE_WIDTH);
    }

    #[test]
    fn stats_population_convention() {
        let g = two_atoms(6, 8);
        let stats = compute_feature_stats([&g]).unwrap();
        assert_eq!(stats.node_mean[0], 7.0);
        assert_eq!(stats.node_std[0], 1.0);
        let enc = encode_features(&g, &stats).unwrap();
        assert_eq!(enc.nodes.get(1, node_cols::ATOMIC_NUMBER), 1.0);
        assert_eq!(enc.nodes.get(0, node_cols::ATOMIC_NUMBER), -1.0);
    }

    #[test]
    fn constant_channels_hit_floor() {
        let g = two_atoms(6, 6);
        let stats = compute_feature_stats([&g]).unwrap();
        assert_eq!(stats.node_std[0], STD_FLOOR);
        assert_eq!(stats.edge_std[0], STD_FLOOR);
        let enc = encode_features(&g, &stats).unwrap();
        assert_eq!(enc.nodes.get(0, node_cols::ATOMIC_NUMBER), 0.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(compute_feature_stats(std::iter::empty()), Err(Error::Precondition(_))));
    }

    #[test]
    fn booleans_absent_slots_and_ring_sizes() {
        let mut g = two_atoms(6, 6);
        g.atoms[0].is_aromatic = true;
        g.edges[0].attrs = EdgeAttributes::single_bond().with_ring_size(5);
        let stats = compute_feature_stats([&g]).unwrap();
        let enc = encode_features(&g, &stats).unwrap();
        assert_eq!(enc.nodes.get(0, node_cols::IS_AROMATIC), 1.0);
        assert_eq!(enc.nodes.get(1, node_cols::IS_AROMATIC), 0.0);
        // absent hybridization lands in the final slot of its block
        assert_eq!(enc.nodes.get(0, node_cols::CHIRALITY - 1), 1.0);
        assert_eq!(enc.nodes.get(0, node_cols::ABSENT_FLAGS + 1), 1.0);
        let ring: Vec<f64> = enc.edges.row(0)[edge_cols::RING_SIZE..].to_vec();
        assert_eq!(ring, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(enc.edges.get(0, edge_cols::BOND_TYPE), 1.0);
    }

    #[test]
    fn out_of_vocabulary_value_is_an_encoding_error() {
        let mut g = two_atoms(6, 6);
        let stats = compute_feature_stats([&g]).unwrap();
        g.atoms[0].degree = Some(11);
        assert!(matches!(encode_features(&g, &stats), Err(Error::Encoding(_))));
    }
}
