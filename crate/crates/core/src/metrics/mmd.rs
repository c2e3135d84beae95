use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{Conformation, MolecularGraph};

/// Edge pairs beyond which the `Pair` variant subsamples.
pub const PAIR_CAP: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MmdVariant {
    /// Marginal of each edge distance.
    Single,
    /// Joint of each pair of edge distances.
    Pair,
    /// Joint of all edge distances.
    All,
}

impl fmt::Display for MmdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Single => "single",
            Self::Pair => "pair",
            Self::All => "all",
        })
    }
}

/// Interatomic distances over a fixed edge set, one row per conformation.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceSamples {
    pub edges: Vec<(usize, usize)>,
    pub rows: Vec<Vec<f64>>,
}

impl DistanceSamples {
    /// Distances over every graph edge (bonded and auxiliary). Edges touching
    /// a hydrogen are dropped unless `with_hydrogen`.
    pub fn from_conformations(graph: &MolecularGraph, conformations: &[Conformation], with_hydrogen: bool) -> Result<Self> {
        let edges: Vec<(usize, usize)> = graph
            .edges
            .iter()
            .filter(|e| with_hydrogen || !(graph.atoms[e.i].is_hydrogen() || graph.atoms[e.j].is_hydrogen()))
            .map(|e| (e.i, e.j))
            .collect();
        let mut rows = Vec::with_capacity(conformations.len());
        for c in conformations {
            if c.atom_count() != graph.atom_count() {
                return Err(Error::Metric(format!("{}: conformation has {} atoms", graph.id, c.atom_count())));
            }
            rows.push(
                edges
                    .iter()
                    .map(|&(i, j)| {
                        let (a, b) = (c.coords[i], c.coords[j]);
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                    })
                    .collect(),
            );
        }
        Ok(Self { edges, rows })
    }

    fn project(&self, cols: &[usize]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect();
        // Canonical row order.
        out.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        out
    }
}

/// One MMD² estimate with the mean kernel bandwidth used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub variant: MmdVariant,
    pub value: f64,
    pub bandwidth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub with_hydrogen: bool,
    /// Mean over molecules of each variant.
    pub entries: Vec<MmdEstimate>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Median of the non-zero pairwise distances of the pooled sample, 1 if
/// there are none.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let v = dist(pooled[i], pooled[j]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

/// Unbiased MMD² U-statistic with a Gaussian kernel of bandwidth `h`.
pub fn mmd_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-dist(a, b).powi(2) / (2.0 * h * h)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    total += k(&s[i], &s[j]);
                }
            }
        }
        total / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

fn estimate(x: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, f64) {
    let h = median_bandwidth(x, y);
    (mmd_unbiased(x, y, h), h)
}

/// MMD² between generated and reference distance samples, clamped at zero.
pub fn mmd(generated: &DistanceSamples, reference: &DistanceSamples, variant: MmdVariant, seed: u64) -> Result<MmdEstimate> {
    if generated.edges != reference.edges {
        return Err(Error::Metric("generated and reference edge sets differ".into()));
    }
    if generated.rows.len() < 2 || reference.rows.len() < 2 {
        return Err(Error::Metric("MMD needs at least two samples on each side".into()));
    }
    let e = generated.edges.len();
    if e == 0 {
        return Err(Error::Metric("no edges to compare".into()));
    }
    let groups: Vec<Vec<usize>> = match variant {
        MmdVariant::Single => (0..e).map(|k| vec![k]).collect(),
        MmdVariant::All => vec![(0..e).collect()],
        MmdVariant::Pair => {
            let pairs: Vec<Vec<usize>> = (0..e).flat_map(|a| (a + 1..e).map(move |b| vec![a, b])).collect();
            if pairs.len() <= PAIR_CAP {
                pairs
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = sample_indices(&mut rng, pairs.len(), PAIR_CAP).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|k| pairs[k].clone()).collect()
            }
        }
    };
    if groups.is_empty() {
        return Err(Error::Metric("the pair variant needs at least two edges".into()));
    }
    let mut value = 0.0;
    let mut bandwidth = 0.0;
    for cols in &groups {
        let (v, h) = estimate(&generated.project(cols), &reference.project(cols));
        value += v;
        bandwidth += h;
    }
    let n = groups.len() as f64;
    Ok(MmdEstimate { variant, value: (value / n).max(0.0), bandwidth: bandwidth / n })
}
