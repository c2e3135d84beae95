//! Evaluation: aligned RMSD, ensemble coverage scores and distance MMD.

mod kabsch;
mod mmd;
mod scores;

pub use kabsch::{kabsch_points, kabsch_rmsd, AlignmentResult};
pub use mmd::{median_bandwidth, mmd, mmd_unbiased, DistanceSamples, MmdEstimate, MmdReport, MmdVariant, PAIR_CAP};
pub use scores::{
    rmsd_matrix, score_dataset, score_ensembles, scores_from_matrix, EnsembleScores, MoleculeScores, ScoreReport,
    Summary,
};
