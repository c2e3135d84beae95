//! Small synthetic molecules with torsion-randomized conformers.
//!
//! Every template is built from internal coordinates with fixed bond lengths
//! and angles; only dihedrals about rotatable bonds vary between conformers.
//! Dihedrals are drawn from the three staggered rotamers with a little
//! Gaussian jitter, which gives a multi-modal conformer distribution.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    augment_edges, AtomAttributes, Chirality, Conformation, Edge, EdgeAttributes, Hybridization, MolecularGraph,
    MoleculeRecord,
};
use crate::error::{Error, Result};

const CC: f64 = 1.54;
const CO: f64 = 1.43;
const OH: f64 = 0.96;
const TETRAHEDRAL: f64 = 109.47 * PI / 180.0;
const HOH_ANGLE: f64 = 108.5 * PI / 180.0;
const ROTAMER_JITTER_DEG: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// Linear carbon chain, 4..=12 atoms.
    Chain(usize),
    /// Carbon ring of size 3..=9 carrying a -CH2-OH substituent.
    Ring(usize),
    /// Carbon chain with a methyl branch on the second atom, 5..=12 atoms.
    Branched(usize),
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown template {s:?}"));
        let (kind, n) = s.split_once('-').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let t = match kind {
            "chain" if (4..=12).contains(&n) => Template::Chain(n),
            "ring" if (3..=9).contains(&n) => Template::Ring(n),
            "branched" if (5..=12).contains(&n) => Template::Branched(n),
            _ => return Err(bad()),
        };
        Ok(t)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::Chain(n) => write!(f, "chain-{n}"),
            Template::Ring(n) => write!(f, "ring-{n}"),
            Template::Branched(n) => write!(f, "branched-{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub templates: Vec<Template>,
    pub conformers: usize,
}

impl ToySpec {
    pub fn parse(names: &[impl AsRef<str>], conformers: usize) -> Result<Self> {
        let templates = names.iter().map(|n| n.as_ref().parse()).collect::<Result<Vec<_>>>()?;
        Ok(Self { templates, conformers })
    }
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Position of `d` given `a-b-c`, `|cd| = bond`, angle `b-c-d` and dihedral
/// `a-b-c-d`.
fn place(a: V3, b: V3, c: V3, bond: f64, angle: f64, torsion: f64) -> V3 {
    let bc = unit(sub(c, b));
    let n = unit(cross(sub(b, a), bc));
    let m = cross(n, bc);
    let local = [-bond * angle.cos(), bond * angle.sin() * torsion.cos(), bond * angle.sin() * torsion.sin()];
    add(c, add(scale(bc, local[0]), add(scale(m, local[1]), scale(n, local[2]))))
}

pub(crate) fn dihedral(a: V3, b: V3, c: V3, d: V3) -> f64 {
    let b0 = sub(a, b);
    let b1 = unit(sub(c, b));
    let b2 = sub(d, c);
    let v = sub(b0, scale(b1, dot(b0, b1)));
    let w = sub(b2, scale(b1, dot(b2, b1)));
    let x = dot(v, w);
    let y = dot(cross(b1, v), w);
    y.atan2(x)
}

fn rotamer(rng: &mut ChaCha8Rng) -> f64 {
    let base = [60.0, 180.0, 300.0][rng.random_range(0..3)];
    let jitter = Normal::new(0.0, ROTAMER_JITTER_DEG).expect("valid normal").sample(rng);
    (base + jitter) * PI / 180.0
}

fn carbon(heavy_degree: u8, in_ring: bool) -> AtomAttributes {
    let h = 4 - heavy_degree;
    AtomAttributes {
        atomic_number: Some(6),
        hybridization: Some(Hybridization::Sp3),
        degree: Some(heavy_degree),
        formal_charge: Some(0),
        total_h: Some(h),
        implicit_valence: Some(h),
        total_valence: Some(4),
        radical_electrons: Some(0),
        chirality: Some(Chirality::Other),
        is_aromatic: false,
        is_in_ring: in_ring,
    }
}

fn hydroxyl_oxygen() -> AtomAttributes {
    AtomAttributes {
        atomic_number: Some(8),
        hybridization: Some(Hybridization::Sp3),
        degree: Some(2),
        formal_charge: Some(0),
        total_h: Some(1),
        implicit_valence: None,
        total_valence: Some(2),
        radical_electrons: Some(0),
        chirality: Some(Chirality::Other),
        is_aromatic: false,
        is_in_ring: false,
    }
}

fn hydrogen() -> AtomAttributes {
    AtomAttributes {
        atomic_number: Some(1),
        hybridization: None,
        degree: Some(1),
        formal_charge: Some(0),
        total_h: Some(0),
        implicit_valence: None,
        total_valence: Some(1),
        radical_electrons: Some(0),
        chirality: Some(Chirality::Other),
        is_aromatic: false,
        is_in_ring: false,
    }
}

fn bonded_graph(id: String, atoms: Vec<AtomAttributes>, bonds: Vec<(usize, usize, EdgeAttributes)>) -> MolecularGraph {
    let mut edges: Vec<Edge> = bonds.into_iter().map(|(a, b, attrs)| Edge { i: a.min(b), j: a.max(b), attrs }).collect();
    edges.sort_by_key(|e| (e.i, e.j));
    MolecularGraph { id, atoms, edges }
}

fn chain_coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<V3> {
    let mut x = vec![[0.0, 0.0, 0.0], [CC, 0.0, 0.0]];
    x.push(add(x[1], [-CC * TETRAHEDRAL.cos(), CC * TETRAHEDRAL.sin(), 0.0]));
    for k in 3..n {
        let p = place(x[k - 3], x[k - 2], x[k - 1], CC, TETRAHEDRAL, rotamer(rng));
        x.push(p);
    }
    x
}

fn degrees(n: usize, bonds: &[(usize, usize)]) -> Vec<u8> {
    let mut d = vec![0u8; n];
    for &(a, b) in bonds {
        d[a] += 1;
        d[b] += 1;
    }
    d
}

fn build_graph(template: Template, id: String) -> MolecularGraph {
    match template {
        Template::Chain(n) => {
            let bonds: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
            let atoms = degrees(n, &bonds).into_iter().map(|d| carbon(d, false)).collect();
            bonded_graph(id, atoms, bonds.into_iter().map(|(a, b)| (a, b, EdgeAttributes::single_bond())).collect())
        }
        Template::Branched(n) => {
            let mut bonds: Vec<_> = (0..n - 2).map(|i| (i, i + 1)).collect();
            bonds.push((1, n - 1));
            let atoms = degrees(n, &bonds).into_iter().map(|d| carbon(d, false)).collect();
            bonded_graph(id, atoms, bonds.into_iter().map(|(a, b)| (a, b, EdgeAttributes::single_bond())).collect())
        }
        Template::Ring(n) => {
            let mut bonds: Vec<(usize, usize, EdgeAttributes)> =
                (0..n).map(|i| (i, (i + 1) % n, EdgeAttributes::single_bond().with_ring_size(n))).collect();
            let (c, o, h) = (n, n + 1, n + 2);
            bonds.push((0, c, EdgeAttributes::single_bond()));
            bonds.push((c, o, EdgeAttributes::single_bond()));
            bonds.push((o, h, EdgeAttributes::single_bond()));
            let pairs: Vec<_> = bonds.iter().map(|b| (b.0, b.1)).collect();
            let deg = degrees(n + 3, &pairs);
            let mut atoms: Vec<_> = (0..n).map(|k| carbon(deg[k], true)).collect();
            atoms.push(carbon(deg[c], false));
            atoms.push(hydroxyl_oxygen());
            atoms.push(hydrogen());
            bonded_graph(id, atoms, bonds)
        }
    }
}

fn build_coords(template: Template, rng: &mut ChaCha8Rng) -> Vec<V3> {
    match template {
        Template::Chain(n) => chain_coords(n, rng),
        Template::Branched(n) => {
            let mut x = chain_coords(n - 1, rng);
            let base = dihedral(x[3], x[2], x[1], x[0]);
            x.push(place(x[3], x[2], x[1], CC, TETRAHEDRAL, base + 2.0 * PI / 3.0));
            x
        }
        Template::Ring(n) => {
            let radius = CC / (2.0 * (PI / n as f64).sin());
            let mut x: Vec<V3> = (0..n)
                .map(|k| {
                    let phi = 2.0 * PI * k as f64 / n as f64;
                    [radius * phi.cos(), radius * phi.sin(), 0.0]
                })
                .collect();
            let exo = [radius + CC, 0.0, 0.0];
            x.push(exo);
            let o = place(x[1], x[0], exo, CO, TETRAHEDRAL, rotamer(rng));
            x.push(o);
            x.push(place(x[0], exo, o, OH, HOH_ANGLE, rotamer(rng)));
            x
        }
    }
}

/// Generates one augmented molecule per template, each with
/// `spec.conformers` conformers. Deterministic in `seed`.
pub fn generate_toy_dataset(spec: &ToySpec, seed: u64) -> Result<Vec<MoleculeRecord>> {
    if spec.conformers < 2 {
        return Err(Error::Config("toy molecules need at least two conformers".into()));
    }
    let mut out = Vec::with_capacity(spec.templates.len());
    for (k, &template) in spec.templates.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64));
        let bonded = build_graph(template, format!("{template}_{k}"));
        bonded.validate()?;
        let graph = augment_edges(&bonded)?;
        let conformers = (0..spec.conformers)
            .map(|_| Conformation::for_graph(&graph, build_coords(template, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        out.push(MoleculeRecord { graph, conformers });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::serialize_dataset;

    fn dist(a: V3, b: V3) -> f64 {
        dot(sub(a, b), sub(a, b)).sqrt()
    }

    #[test]
    fn template_names() {
        assert_eq!("chain-6".parse::<Template>().unwrap(), Template::Chain(6));
        assert_eq!(Template::Ring(5).to_string(), "ring-5");
        for bad in ["helix-4", "chain-2", "ring-12", "chain", "branched-x"] {
            assert!(matches!(bad.parse::<Template>(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn place_respects_internal_coordinates() {
        let (a, b, c) = ([0.3, -1.0, 0.2], [0.0, 0.0, 0.0], [1.2, 0.4, -0.1]);
        let d = place(a, b, c, 1.3, 1.9, 0.7);
        assert!((dist(c, d) - 1.3).abs() < 1e-12);
        let cb = unit(sub(b, c));
        let cd = unit(sub(d, c));
        assert!((dot(cb, cd).acos() - 1.9).abs() < 1e-12);
        assert!((dihedral(a, b, c, d) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = ToySpec::parse(&["chain-6"], 5).unwrap();
        let a = serialize_dataset(&generate_toy_dataset(&spec, 7).unwrap());
        let b = serialize_dataset(&generate_toy_dataset(&spec, 7).unwrap());
        assert_eq!(a, b);
        let c = serialize_dataset(&generate_toy_dataset(&spec, 8).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn bonded_distances_are_rigid() {
        let spec = ToySpec::parse(&["chain-4", "ring-5", "branched-7"], 6).unwrap();
        for rec in generate_toy_dataset(&spec, 3).unwrap() {
            rec.graph.validate().unwrap();
            for (i, j) in rec.graph.bonded_pairs() {
                let reference = dist(rec.conformers[0].coords[i], rec.conformers[0].coords[j]);
                for c in &rec.conformers[1..] {
                    assert!((dist(c.coords[i], c.coords[j]) - reference).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn too_few_conformers_rejected() {
        let spec = ToySpec::parse(&["chain-4"], 1).unwrap();
        assert!(generate_toy_dataset(&spec, 0).is_err());
    }

    #[test]
    fn ring_template_carries_a_hydrogen() {
        let spec = ToySpec::parse(&["ring-5"], 2).unwrap();
        let rec = &generate_toy_dataset(&spec, 1).unwrap()[0];
        assert_eq!(rec.graph.atom_count(), 8);
        assert_eq!(rec.graph.heavy_mask().iter().filter(|h| !**h).count(), 1);
        assert!(rec.graph.is_augmented());
    }
}
