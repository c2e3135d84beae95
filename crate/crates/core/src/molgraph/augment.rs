use std::collections::VecDeque;

use super::{Edge, EdgeAttributes, MolecularGraph};
use crate::error::{Error, Result};

/// Bonded-graph hop counts from `source`, `None` when unreachable.
pub fn bonded_distances(g: &MolecularGraph, source: usize) -> Vec<Option<usize>> {
    let m = g.atom_count();
    let mut adj = vec![Vec::new(); m];
    for (i, j) in g.bonded_pairs() {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut dist = vec![None; m];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Adds a non-bonded edge for every atom pair two or three bonds apart.
///
/// Bonded edges are kept as they are and the result is sorted by `(i, j)`.
/// Graphs that already carry auxiliary edges are rejected.
pub fn augment_edges(g: &MolecularGraph) -> Result<MolecularGraph> {
    if g.is_augmented() {
        return Err(Error::AlreadyAugmented(g.id.clone()));
    }
    let m = g.atom_count();
    let mut edges = g.edges.clone();
    for i in 0..m {
        let dist = bonded_distances(g, i);
        for (j, d) in dist.iter().enumerate().skip(i + 1) {
            if let Some(d @ (2 | 3)) = *d {
                edges.push(Edge { i, j, attrs: EdgeAttributes::auxiliary(d as u8) });
            }
        }
    }
    edges.sort_by_key(|e| (e.i, e.j));
    Ok(MolecularGraph { id: g.id.clone(), atoms: g.atoms.clone(), edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::AtomAttributes;

    fn graph(m: usize, bonds: &[(usize, usize)]) -> MolecularGraph {
        MolecularGraph {
            id: "g".into(),
            atoms: vec![AtomAttributes::element(6); m],
            edges: bonds.iter().map(|&(i, j)| Edge { i, j, attrs: EdgeAttributes::single_bond() }).collect(),
        }
    }

    fn summary(g: &MolecularGraph) -> Vec<(usize, usize, u8)> {
        g.edges.iter().map(|e| (e.i, e.j, e.attrs.shortest_path)).collect()
    }

    #[test]
    fn three_atom_path() {
        let out = augment_edges(&graph(3, &[(0, 1), (1, 2)])).unwrap();
        assert_eq!(summary(&out), vec![(0, 1, 1), (0, 2, 2), (1, 2, 1)]);
        assert_eq!(out.edges[1].attrs.bond_type, None);
    }

    #[test]
    fn four_atom_path() {
        let out = augment_edges(&graph(4, &[(0, 1), (1, 2), (2, 3)])).unwrap();
        assert_eq!(summary(&out), vec![(0, 1, 1), (0, 2, 2), (0, 3, 3), (1, 2, 1), (1, 3, 2), (2, 3, 1)]);
    }

    #[test]
    fn triangle_gains_nothing() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let out = augment_edges(&g).unwrap();
        assert_eq!(summary(&out), vec![(0, 1, 1), (0, 2, 1), (1, 2, 1)]);
    }

    #[test]
    fn second_augmentation_rejected() {
        let out = augment_edges(&graph(3, &[(0, 1), (1, 2)])).unwrap();
        assert!(matches!(augment_edges(&out), Err(Error::AlreadyAugmented(_))));
    }
}
