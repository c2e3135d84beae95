use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AtomAttributes, Conformation, Edge, EdgeAttributes, MolecularGraph};
use crate::error::{Error, Result};

/// One molecule with its conformer ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeRecord {
    pub graph: MolecularGraph,
    pub conformers: Vec<Conformation>,
}

pub type Dataset = Vec<MoleculeRecord>;

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    atoms: Vec<AtomAttributes>,
    edges: Vec<(usize, usize, EdgeAttributes)>,
    conformers: Vec<Vec<[f64; 3]>>,
}

impl MoleculeRecord {
    fn from_raw(raw: RawRecord) -> Result<Self> {
        let graph = MolecularGraph {
            id: raw.id,
            atoms: raw.atoms,
            edges: raw.edges.into_iter().map(|(i, j, attrs)| Edge { i, j, attrs }).collect(),
        };
        graph.validate()?;
        if raw.conformers.is_empty() {
            return Err(Error::Validation { molecule: graph.id.clone(), message: "no conformers".into() });
        }
        let conformers = raw
            .conformers
            .into_iter()
            .map(|c| Conformation::for_graph(&graph, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { graph, conformers })
    }

    fn to_raw(&self) -> RawRecord {
        RawRecord {
            id: self.graph.id.clone(),
            atoms: self.graph.atoms.clone(),
            edges: self.graph.edges.iter().map(|e| (e.i, e.j, e.attrs.clone())).collect(),
            conformers: self.conformers.iter().map(|c| c.coords.clone()).collect(),
        }
    }
}

/// Reads JSON-lines molecule records. Blank lines are skipped.
pub fn read_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: k + 1, message: e.to_string() })?;
        out.push(MoleculeRecord::from_raw(raw)?);
    }
    Ok(out)
}

pub fn parse_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(BufReader::new(file))
}

/// JSON-lines text, one record per line, newline terminated.
pub fn serialize_dataset(records: &[MoleculeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r.to_raw()).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, records: &[MoleculeRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serialize_dataset(records).as_bytes())?;
    Ok(())
}
