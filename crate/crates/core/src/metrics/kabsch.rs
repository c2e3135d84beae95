use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::molgraph::Conformation;

/// Optimal proper rigid motion taking `moving` onto `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    /// Row-major rotation `U` with `x ↦ U x + translation`.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub rmsd: f64,
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::from(*p);
    }
    c / points.len() as f64
}

/// Minimum RMSD between paired point sets over proper rotations and
/// translations of `moving`.
pub fn kabsch_points(target: &[[f64; 3]], moving: &[[f64; 3]]) -> Result<AlignmentResult> {
    if target.len() != moving.len() {
        return Err(Error::Metric(format!("point counts differ: {} vs {}", target.len(), moving.len())));
    }
    if target.is_empty() {
        return Err(Error::Metric("alignment needs at least one atom".into()));
    }
    let ct = centroid(target);
    let cm = centroid(moving);
    // H = Σ (m - cm)(t - ct)ᵀ
    let mut h = Matrix3::zeros();
    for (t, m) in target.iter().zip(moving) {
        h += (Vector3::from(*m) - cm) * (Vector3::from(*t) - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Metric("singular value decomposition failed".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = ct - rotation * cm;
    let mut sq = 0.0;
    for (t, m) in target.iter().zip(moving) {
        sq += (rotation * Vector3::from(*m) + translation - Vector3::from(*t)).norm_squared();
    }
    let mut rows = [[0.0; 3]; 3];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = rotation[(i, j)];
        }
    }
    Ok(AlignmentResult { rotation: rows, translation: translation.into(), rmsd: (sq / target.len() as f64).sqrt() })
}

/// Aligned RMSD between two conformations of the same molecule, restricted
/// to heavy atoms when `heavy_only`.
pub fn kabsch_rmsd(reference: &Conformation, other: &Conformation, heavy_only: bool) -> Result<AlignmentResult> {
    if reference.atom_count() != other.atom_count() {
        return Err(Error::Metric(format!(
            "atom counts differ: {} vs {}",
            reference.atom_count(),
            other.atom_count()
        )));
    }
    let keep = |k: usize| !heavy_only || reference.heavy_mask[k];
    let a: Vec<[f64; 3]> = reference.coords.iter().enumerate().filter(|(k, _)| keep(*k)).map(|(_, p)| *p).collect();
    let b: Vec<[f64; 3]> = other.coords.iter().enumerate().filter(|(k, _)| keep(*k)).map(|(_, p)| *p).collect();
    if a.is_empty() {
        return Err(Error::Metric("no atoms selected for alignment".into()));
    }
    kabsch_points(&a, &b)
}
