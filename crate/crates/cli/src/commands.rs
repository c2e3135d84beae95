use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use confflow::diagnostics::{run_checks, CheckLevel};
use confflow::flow::{ConfFlowModel, FlowConfig, SolverConfig};
use confflow::metrics::{
    mmd, score_dataset, score_ensembles, DistanceSamples, MmdEstimate, MmdReport, MmdVariant, MoleculeScores,
};
use confflow::molgraph::{
    augment_edges, compute_feature_stats, generate_toy_dataset, parse_dataset, serialize_dataset, Conformation,
    Dataset, MoleculeRecord, ToySpec,
};
use confflow::train::{train as fit, TrainConfig, TrainRecord, TrainingSet};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{create_out_dir, load_patch, required, resolve, resolve_with, write_file, write_resolved};
use crate::{CheckArgs, EvalArgs, GenDataArgs, Level, Preset, SampleArgs, Status, TrainArgs};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SCORES_JSON: &str = "scores.json";
pub const SCORES_TEXT: &str = "scores.txt";

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let mut records = parse_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    ensure!(!records.is_empty(), "dataset {} has no molecules", path.display());
    for r in &mut records {
        if !r.graph.is_augmented() {
            r.graph = augment_edges(&r.graph)?;
        }
    }
    Ok(records)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    templates: Vec<String>,
    conformers: usize,
    seed: u64,
    out: Option<PathBuf>,
}

pub fn gen_data(args: GenDataArgs) -> anyhow::Result<Status> {
    let defaults = GenDataConfig { templates: Vec::new(), conformers: 5, seed: 0, out: None };
    let mut c = resolve(&defaults, args.config.as_deref())?;
    if !args.templates.is_empty() {
        c.templates = args.templates;
    }
    c.conformers = args.conformers.unwrap_or(c.conformers);
    c.seed = args.seed.unwrap_or(c.seed);
    c.out = args.out.or(c.out);
    let out = required(&c.out, "out")?;
    ensure!(!c.templates.is_empty(), "at least one --template is required");
    let records = generate_toy_dataset(&ToySpec::parse(&c.templates, c.conformers)?, c.seed)?;
    create_out_dir(&out)?;
    write_file(out.join(DATASET_FILE), serialize_dataset(&records))?;
    write_resolved(&out, &c)?;
    let conformers: usize = records.iter().map(|r| r.conformers.len()).sum();
    println!("wrote {} molecules, {conformers} conformers to {}", records.len(), out.join(DATASET_FILE).display());
    Ok(Status::Ok)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRunConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    preset: Preset,
    model: FlowConfig,
    train: TrainConfig,
    log_every: usize,
}

impl TrainRunConfig {
    fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Desk => (FlowConfig::desk(), TrainConfig::desk()),
            Preset::Full => (FlowConfig::default(), TrainConfig::default()),
        };
        Self { data: None, out: None, preset, model, train, log_every: 50 }
    }
}

/// One CSV row of the training log.
#[derive(Serialize)]
struct LogRow {
    iteration: usize,
    loss: f64,
    nll_per_dim: f64,
    ke: f64,
    jf: f64,
    grad_norm: f64,
}

impl From<&TrainRecord> for LogRow {
    fn from(r: &TrainRecord) -> Self {
        Self { iteration: r.iteration, loss: r.loss, nll_per_dim: r.nll_per_dim, ke: r.ke, jf: r.jf, grad_norm: r.grad_norm }
    }
}

fn write_log(path: PathBuf, rows: &[LogRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(["iteration", "loss", "nll_per_dim", "ke", "jf", "grad_norm"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(args: TrainArgs) -> anyhow::Result<Status> {
    let patch = load_patch(args.config.as_deref())?;
    let file_preset = match patch.as_ref().and_then(|p| p.get("preset")) {
        Some(v) => Some(serde_json::from_value::<Preset>(v.clone()).context("invalid preset")?),
        None => None,
    };
    let preset = args.preset.or(file_preset).unwrap_or(Preset::Desk);
    let mut c = resolve_with(&TrainRunConfig::preset(preset), patch)?;
    c.preset = preset;
    c.data = args.data.or(c.data);
    c.out = args.out.or(c.out);
    let t = &mut c.train;
    t.iterations = args.iterations.unwrap_or(t.iterations);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = args.learning_rate.unwrap_or(t.learning_rate);
    t.seed = args.seed.unwrap_or(t.seed);
    t.checkpoint_every = args.checkpoint_every.unwrap_or(t.checkpoint_every);
    c.log_every = args.log_every.unwrap_or(c.log_every);
    let data_path = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    c.model.validate()?;
    c.train.validate()?;

    let records = load_dataset(&data_path)?;
    let stats = compute_feature_stats(records.iter().map(|r| &r.graph))?;
    let mut model = ConfFlowModel::new(c.model.clone(), stats, c.train.seed)?;
    let set = TrainingSet::new(&model, &records)?;
    create_out_dir(&out)?;
    write_resolved(&out, &c)?;

    let every = c.train.checkpoint_every;
    let log_every = c.log_every;
    let total = c.train.iterations;
    let mut rows = Vec::new();
    let result = fit(&mut model, &set, &c.train, |r, m| {
        if log_every > 0 && (r.iteration % log_every == 0 || r.iteration == total) {
            eprintln!(
                "iter {:>6}  loss {:>9.4}  nll/dim {:>9.4}  ke {:>8.4}  jf {:>8.4}  |g| {:>8.4}",
                r.iteration, r.loss, r.nll_per_dim, r.ke, r.jf, r.grad_norm
            );
        }
        if every > 0 && r.iteration % every == 0 {
            m.save(&out.join(format!("checkpoint-{:06}.json", r.iteration)))?;
        }
        rows.push(LogRow::from(r));
        Ok(())
    });
    let result = match result {
        Err(e) if !matches!(e, confflow::Error::Divergence { .. }) => return Err(e.into()),
        other => other,
    };
    let model_path = out.join(MODEL_FILE);
    model.save(&model_path).with_context(|| format!("writing {}", model_path.display()))?;
    write_log(out.join(LOG_FILE), &rows)?;
    match result {
        Ok(records) => {
            println!("trained {} iterations; model written to {}", records.len(), model_path.display());
            Ok(Status::Ok)
        }
        Err(e) => {
            eprintln!("last good parameters written to {}", model_path.display());
            Err(e.into())
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    per_molecule: Option<usize>,
    times_reference: Option<usize>,
    seed: u64,
    /// Overrides the checkpoint's solver when set.
    solver: Option<SolverConfig>,
}

pub fn sample(args: SampleArgs) -> anyhow::Result<Status> {
    let defaults =
        SampleConfig { model: None, data: None, out: None, per_molecule: None, times_reference: None, seed: 0, solver: None };
    let mut c = resolve(&defaults, args.config.as_deref())?;
    c.model = args.model.or(c.model);
    c.data = args.data.or(c.data);
    c.out = args.out.or(c.out);
    c.seed = args.seed.unwrap_or(c.seed);
    if args.per_molecule.is_some() || args.times_reference.is_some() {
        c.per_molecule = args.per_molecule;
        c.times_reference = args.times_reference;
    }
    if let Some(tol) = args.tol {
        c.solver = Some(SolverConfig::adaptive(tol));
    }
    if let Some(n) = args.fixed_steps {
        c.solver = Some(SolverConfig::fixed(n));
    }
    if c.per_molecule.is_some() && c.times_reference.is_some() {
        bail!("--per-molecule and --times-reference are mutually exclusive");
    }
    if c.per_molecule.is_none() && c.times_reference.is_none() {
        c.times_reference = Some(2);
    }
    let model_path = required(&c.model, "model")?;
    let data_path = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;

    let mut model =
        ConfFlowModel::load(&model_path).with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    if let Some(s) = &c.solver {
        model.set_solver(s.clone())?;
    }
    let records = load_dataset(&data_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let seeds: Vec<u64> = records.iter().map(|_| rng.next_u64()).collect();
    let counts: Vec<usize> = records
        .iter()
        .map(|r| c.per_molecule.unwrap_or_else(|| c.times_reference.unwrap_or(2) * r.conformers.len()))
        .collect();
    let results: Vec<anyhow::Result<MoleculeRecord>> = records
        .par_iter()
        .zip(seeds.par_iter().zip(counts.par_iter()))
        .map(|(r, (&seed, &n))| {
            let mol = model.prepare(&r.graph)?;
            let mut conformers = Vec::with_capacity(n);
            for s in model.sample(&mol, n, seed) {
                let t = s?;
                let coords = (0..t.rows()).map(|i| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]).collect();
                conformers.push(Conformation::for_graph(&r.graph, coords)?);
            }
            Ok(MoleculeRecord { graph: r.graph.clone(), conformers })
        })
        .collect();
    let mut generated = Vec::new();
    let mut skipped = 0;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(g) => generated.push(g),
            Err(e) => {
                skipped += 1;
                eprintln!("skipped {}: {e:#}", r.graph.id);
            }
        }
    }
    create_out_dir(&out)?;
    write_file(out.join(SAMPLES_FILE), serialize_dataset(&generated))?;
    write_resolved(&out, &c)?;
    let total: usize = generated.iter().map(|r| r.conformers.len()).sum();
    println!("wrote {total} conformers for {} molecules to {}", generated.len(), out.join(SAMPLES_FILE).display());
    if skipped > 0 {
        eprintln!("{skipped} molecule(s) skipped");
        return Ok(Status::PartialSampling);
    }
    Ok(Status::Ok)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    generated: Option<PathBuf>,
    reference: Option<PathBuf>,
    out: Option<PathBuf>,
    delta: f64,
    heavy_only: bool,
    mmd: bool,
    with_hydrogen: bool,
    seed: u64,
}

fn mmd_report(pairs: &[(&MoleculeRecord, &MoleculeRecord)], with_hydrogen: bool, seed: u64) -> anyhow::Result<MmdReport> {
    let variants = [MmdVariant::Single, MmdVariant::Pair, MmdVariant::All];
    let per_molecule: Vec<anyhow::Result<Vec<MmdEstimate>>> = pairs
        .par_iter()
        .map(|(g, r)| {
            let gs = DistanceSamples::from_conformations(&r.graph, &g.conformers, with_hydrogen)?;
            let rs = DistanceSamples::from_conformations(&r.graph, &r.conformers, with_hydrogen)?;
            variants
                .iter()
                .map(|&v| mmd(&gs, &rs, v, seed).with_context(|| format!("MMD ({v}) for {}", r.graph.id)))
                .collect()
        })
        .collect();
    let mut sums = vec![(0.0, 0.0); variants.len()];
    for m in per_molecule {
        for (acc, e) in sums.iter_mut().zip(m?) {
            acc.0 += e.value;
            acc.1 += e.bandwidth;
        }
    }
    let n = pairs.len() as f64;
    let entries = variants
        .iter()
        .zip(sums)
        .map(|(&variant, (v, h))| MmdEstimate { variant, value: v / n, bandwidth: h / n })
        .collect();
    Ok(MmdReport { with_hydrogen, entries })
}

pub fn eval(args: EvalArgs) -> anyhow::Result<Status> {
    let defaults = EvalConfig {
        generated: None,
        reference: None,
        out: None,
        delta: 0.5,
        heavy_only: true,
        mmd: false,
        with_hydrogen: false,
        seed: 0,
    };
    let mut c = resolve(&defaults, args.config.as_deref())?;
    c.generated = args.generated.or(c.generated);
    c.reference = args.reference.or(c.reference);
    c.out = args.out.or(c.out);
    c.delta = args.delta.unwrap_or(c.delta);
    if args.all_atoms {
        c.heavy_only = false;
    }
    if args.heavy_only {
        c.heavy_only = true;
    }
    c.mmd |= args.mmd;
    c.with_hydrogen |= args.with_hydrogen;
    c.seed = args.seed.unwrap_or(c.seed);
    ensure!(c.delta.is_finite() && c.delta >= 0.0, "delta must be a non-negative number");
    let gen_path = required(&c.generated, "generated")?;
    let ref_path = required(&c.reference, "reference")?;
    let out = required(&c.out, "out")?;

    let generated = load_dataset(&gen_path)?;
    let reference = load_dataset(&ref_path)?;
    let by_id: HashMap<&str, &MoleculeRecord> = generated.iter().map(|r| (r.graph.id.as_str(), r)).collect();
    ensure!(by_id.len() == generated.len(), "duplicate molecule ids in {}", gen_path.display());
    let mut pairs = Vec::with_capacity(reference.len());
    for r in &reference {
        let Some(g) = by_id.get(r.graph.id.as_str()) else {
            bail!("molecule {} has no generated conformations", r.graph.id);
        };
        ensure!(
            g.graph.atom_count() == r.graph.atom_count(),
            "molecule {}: generated and reference atom counts differ",
            r.graph.id
        );
        pairs.push((*g, r));
    }
    ensure!(generated.len() == reference.len(), "generated set has molecules missing from the reference set");

    let heavy_only = c.heavy_only;
    let delta = c.delta;
    let scored: Vec<anyhow::Result<MoleculeScores>> = pairs
        .par_iter()
        .map(|(g, r)| {
            let scores = score_ensembles(&g.conformers, &r.conformers, delta, heavy_only)
                .with_context(|| format!("scoring {}", r.graph.id))?;
            let masked_atoms =
                if heavy_only { r.graph.heavy_mask().iter().filter(|&&h| h).count() } else { r.graph.atom_count() };
            Ok(MoleculeScores {
                id: r.graph.id.clone(),
                generated: g.conformers.len(),
                reference: r.conformers.len(),
                masked_atoms,
                scores,
            })
        })
        .collect::<Vec<_>>();
    let molecules = scored.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let mut report = score_dataset(molecules, delta, heavy_only)?;
    if c.mmd {
        report.mmd = Some(mmd_report(&pairs, c.with_hydrogen, c.seed)?);
    }
    let table = report.to_table();
    print!("{table}");
    create_out_dir(&out)?;
    write_file(out.join(SCORES_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    write_file(out.join(SCORES_TEXT), table)?;
    write_resolved(&out, &c)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct CheckConfig {
    level: Level,
}

pub fn check(args: CheckArgs) -> anyhow::Result<Status> {
    if let Some(out) = &args.out {
        create_out_dir(out)?;
        write_resolved(out, &CheckConfig { level: args.level })?;
    }
    let level = match args.level {
        Level::Fast => CheckLevel::Fast,
        Level::Full => CheckLevel::Full,
    };
    let outcomes = run_checks(level, |o| println!("{o}"))?;
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { Status::Ok } else { Status::CheckFailed })
}
