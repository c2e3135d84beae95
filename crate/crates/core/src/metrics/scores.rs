use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::kabsch::kabsch_rmsd;
use super::mmd::MmdReport;
use crate::error::{Error, Result};
use crate::molgraph::Conformation;

/// Coverage, matching and mismatch of one generated ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleScores {
    pub cov: f64,
    pub mat: f64,
    pub mis: f64,
}

/// Scores from an RMSD matrix with generated conformations as rows and
/// reference conformations as columns.
pub fn scores_from_matrix(rmsd: &[Vec<f64>], delta: f64) -> Result<EnsembleScores> {
    let n_gen = rmsd.len();
    let n_ref = rmsd.first().map_or(0, Vec::len);
    if n_gen == 0 || n_ref == 0 {
        return Err(Error::Metric("generated and reference sets must be non-empty".into()));
    }
    if rmsd.iter().any(|row| row.len() != n_ref) {
        return Err(Error::Metric("ragged RMSD matrix".into()));
    }
    let mut covered = 0usize;
    let mut mat = 0.0;
    for r in 0..n_ref {
        let best = (0..n_gen).map(|g| rmsd[g][r]).fold(f64::INFINITY, f64::min);
        if best < delta {
            covered += 1;
        }
        mat += best;
    }
    let missed = rmsd.iter().filter(|row| row.iter().all(|&d| d > delta)).count();
    Ok(EnsembleScores { cov: covered as f64 / n_ref as f64, mat: mat / n_ref as f64, mis: missed as f64 / n_gen as f64 })
}

/// Pairwise aligned RMSDs, generated rows by reference columns.
pub fn rmsd_matrix(generated: &[Conformation], reference: &[Conformation], heavy_only: bool) -> Result<Vec<Vec<f64>>> {
    generated
        .iter()
        .map(|g| reference.iter().map(|r| kabsch_rmsd(r, g, heavy_only).map(|a| a.rmsd)).collect())
        .collect()
}

pub fn score_ensembles(
    generated: &[Conformation],
    reference: &[Conformation],
    delta: f64,
    heavy_only: bool,
) -> Result<EnsembleScores> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Metric("generated and reference sets must be non-empty".into()));
    }
    let mask = &reference[0].heavy_mask;
    if generated.iter().chain(reference).any(|c| &c.heavy_mask != mask) {
        return Err(Error::Metric("conformations do not share one atom layout".into()));
    }
    scores_from_matrix(&rmsd_matrix(generated, reference, heavy_only)?, delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeScores {
    pub id: String,
    pub generated: usize,
    pub reference: usize,
    pub masked_atoms: usize,
    #[serde(flatten)]
    pub scores: EnsembleScores,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, median: f64::NAN };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self { mean: v.iter().sum::<f64>() / n as f64, median }
    }
}

/// Dataset-level report with per-molecule detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub delta: f64,
    pub heavy_only: bool,
    pub masked_atoms: usize,
    pub cov: Summary,
    pub mat: Summary,
    pub mis: Summary,
    pub molecules: Vec<MoleculeScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<MmdReport>,
}

pub fn score_dataset(molecules: Vec<MoleculeScores>, delta: f64, heavy_only: bool) -> Result<ScoreReport> {
    if molecules.is_empty() {
        return Err(Error::Metric("no molecules to score".into()));
    }
    let pick = |f: fn(&EnsembleScores) -> f64| Summary::of(&molecules.iter().map(|m| f(&m.scores)).collect::<Vec<_>>());
    Ok(ScoreReport {
        delta,
        heavy_only,
        masked_atoms: molecules.iter().map(|m| m.masked_atoms).sum(),
        cov: pick(|s| s.cov),
        mat: pick(|s| s.mat),
        mis: pick(|s| s.mis),
        molecules,
        mmd: None,
    })
}

impl ScoreReport {
    /// Plain-text table of the summary followed by per-molecule rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let atoms = if self.heavy_only { "heavy atoms" } else { "all atoms" };
        let _ = writeln!(out, "delta = {} A, RMSD over {atoms} ({} masked atoms)", self.delta, self.masked_atoms);
        let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "", "COV-mean", "COV-med", "MAT-mean", "MAT-med", "MIS-mean", "MIS-med");
        let _ = writeln!(
            out,
            "{:<12} {:>8.2}% {:>8.2}% {:>9.4} {:>9.4} {:>8.2}% {:>8.2}%",
            "summary",
            100.0 * self.cov.mean,
            100.0 * self.cov.median,
            self.mat.mean,
            self.mat.median,
            100.0 * self.mis.mean,
            100.0 * self.mis.median
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>5} {:>5} {:>9} {:>9} {:>9}", "molecule", "gen", "ref", "COV", "MAT", "MIS");
        for m in &self.molecules {
            let _ = writeln!(
                out,
                "{:<24} {:>5} {:>5} {:>8.2}% {:>9.4} {:>8.2}%",
                m.id,
                m.generated,
                m.reference,
                100.0 * m.scores.cov,
                m.scores.mat,
                100.0 * m.scores.mis
            );
        }
        if let Some(mmd) = &self.mmd {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<8} {:>12} {:>12}", "MMD", "estimate", "bandwidth");
            for e in &mmd.entries {
                let _ = writeln!(out, "{:<8} {:>12.6} {:>12.6}", e.variant, e.value, e.bandwidth);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture() {
        let m = vec![vec![0.3, 0.7], vec![0.6, 0.4], vec![0.9, 0.8]];
        let s = scores_from_matrix(&m, 0.5).unwrap();
        assert_eq!(s.cov, 1.0);
        assert!((s.mat - 0.35).abs() < 1e-15);
        assert!((s.mis - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_threshold_is_strict() {
        let m = vec![vec![0.0, 0.2], vec![0.3, 0.0]];
        let s = scores_from_matrix(&m, 0.0).unwrap();
        assert_eq!(s.cov, 0.0);
        assert_eq!(s.mis, 0.0);
        let s = scores_from_matrix(&[vec![0.5, 0.7]], 0.5).unwrap();
        assert_eq!((s.cov, s.mis), (0.0, 0.0));
    }

    #[test]
    fn identical_ensembles() {
        let c = |x: f64| Conformation::new(vec![[0.0, 0.0, 0.0], [1.0 + x, 0.0, 0.0], [0.0, 1.0, x]], vec![true; 3]).unwrap();
        let set = vec![c(0.0), c(0.3), c(0.7)];
        let s = score_ensembles(&set, &set, 0.5, true).unwrap();
        assert_eq!((s.cov, s.mis), (1.0, 0.0));
        assert!(s.mat < 1e-10);
    }

    #[test]
    fn empty_sets_are_errors() {
        assert!(scores_from_matrix(&[], 0.5).is_err());
        assert!(score_ensembles(&[], &[], 0.5, true).is_err());
    }

    #[test]
    fn summaries() {
        let one = Summary::of(&[0.4]);
        assert_eq!((one.mean, one.median), (0.4, 0.4));
        let two = Summary::of(&[0.2, 0.8]);
        assert!((two.mean - 0.5).abs() < 1e-15 && (two.median - 0.5).abs() < 1e-15);
        assert_eq!(Summary::of(&[3.0, 1.0, 2.0]).median, 2.0);
    }

    #[test]
    fn report_table_and_json() {
        let mols = vec![
            MoleculeScores { id: "a".into(), generated: 4, reference: 2, masked_atoms: 3, scores: EnsembleScores { cov: 0.2, mat: 0.5, mis: 0.1 } },
            MoleculeScores { id: "b".into(), generated: 4, reference: 2, masked_atoms: 5, scores: EnsembleScores { cov: 0.8, mat: 0.3, mis: 0.3 } },
        ];
        let r = score_dataset(mols, 1.25, true).unwrap();
        assert!((r.cov.mean - 0.5).abs() < 1e-15);
        assert_eq!(r.masked_atoms, 8);
        let table = r.to_table();
        assert!(table.contains("COV-mean") && table.contains("50.00%"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<ScoreReport>(&json).unwrap(), r);
    }
}
