//! Command implementations behind the `bitrank` binary: data ingestion and
//! splitting, fitting, binarization, evaluation, throughput benchmarking
//! and hyperparameter random search.
//!
//! Every command is deterministic given its seed and records a JSON run
//! manifest with content fingerprints of its inputs and outputs so dataset
//! mutation between pipeline stages is detectable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    self, Format, InteractionSet, PositiveSets, SplitSpec,
};
use crate::error::{Error, Result};
use crate::evalbench::{
    benchmark_ppms, mrr, synthetic_dense, BenchReport, EvalReport, ReportLine,
};
use crate::model::{binarize, load_model, save_model, DenseModel, ModelFile, Representation};
use crate::training::{fit, EpochStats, Loss, TrainConfig, TrainReport};

/// Random-search distributions over the training hyperparameters.
///
/// The paper-level protocol names the searched hyperparameters but not
/// their ranges; these defaults are this artifact's choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate_range: (f64, f64),
    pub l2_range: (f64, f64),
    pub minibatch_choices: Vec<usize>,
    pub epoch_choices: Vec<usize>,
    pub losses: Vec<Loss>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate_range: (1e-4, 1e-1),
            l2_range: (1e-9, 1e-3),
            minibatch_choices: vec![128, 256, 512, 1024, 2048],
            epoch_choices: vec![5, 10, 20, 30, 50],
            losses: vec![Loss::Bpr, Loss::AdaptiveHinge],
            trials: 30,
            seed: 42,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let log_range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi > lo;
        if !log_range_ok(self.learning_rate_range) || !log_range_ok(self.l2_range) {
            return Err(Error::InvalidConfig(
                "search ranges must be positive and increasing".into(),
            ));
        }
        if self.minibatch_choices.is_empty()
            || self.epoch_choices.is_empty()
            || self.losses.is_empty()
        {
            return Err(Error::InvalidConfig("search choice lists must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("search budget must be at least 1".into()));
        }
        Ok(())
    }

    /// Draws one configuration; log-uniform over the continuous ranges.
    pub fn sample(
        &self,
        dim: usize,
        representation: Representation,
        max_sampled: usize,
        trial_seed: u64,
        rng: &mut impl Rng,
    ) -> TrainConfig {
        let log_uniform = |(lo, hi): (f64, f64), rng: &mut dyn rand::RngCore| -> f64 {
            let x: f64 = rand::Rng::gen_range(&mut &mut *rng, lo.ln()..hi.ln());
            x.exp()
        };
        TrainConfig {
            dim,
            representation,
            loss: self.losses[rng.gen_range(0..self.losses.len())],
            learning_rate: log_uniform(self.learning_rate_range, rng) as f32,
            l2: log_uniform(self.l2_range, rng) as f32,
            minibatch_size: self.minibatch_choices[rng.gen_range(0..self.minibatch_choices.len())],
            epochs: self.epoch_choices[rng.gen_range(0..self.epoch_choices.len())],
            max_sampled,
            seed: trial_seed,
        }
    }
}

/// A referenced file plus the SHA-256 of its content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub sha256: String,
}

/// Run record written next to each command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub config: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub metrics: std::collections::BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: serde_json::Map::new(),
            metrics: std::collections::BTreeMap::new(),
        }
    }

    fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(ArtifactRef {
            path: path.to_path_buf(),
            sha256: fingerprint_file(path)?,
        });
        Ok(())
    }

    fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(ArtifactRef {
            path: path.to_path_buf(),
            sha256: fingerprint_file(path)?,
        });
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| Error::InvalidConfig(format!("manifest serialization: {e}")))?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::MalformedReport(format!("manifest {}: {e}", path.display())))
    }
}

/// SHA-256 hex digest of a file's bytes.
pub fn fingerprint_file(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let read = file.read(&mut buf)?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn read_dataset(path: &Path) -> Result<InteractionSet> {
    let file = File::open(path)?;
    dataset::read_interactions(&mut BufReader::new(file))
}

fn write_dataset(set: &InteractionSet, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    dataset::write_interactions(set, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_model(path: &Path) -> Result<ModelFile> {
    let file = File::open(path)?;
    load_model(&mut BufReader::new(file))
}

fn write_model(model: &ModelFile, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    save_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Outcome of `split`: the three dataset files plus the manifest.
#[derive(Debug)]
pub struct SplitOutcome {
    pub train: PathBuf,
    pub test: PathBuf,
    pub validation: PathBuf,
    pub manifest: PathBuf,
    pub counts: (usize, usize, usize),
}

/// Parses a ratings file, splits it and writes the three compact datasets.
pub fn cmd_split(
    input: &Path,
    format: Format,
    min_rating: Option<f32>,
    spec: &SplitSpec,
    out_dir: &Path,
) -> Result<SplitOutcome> {
    let file = File::open(input)?;
    let interactions =
        dataset::parse_movielens_filtered(BufReader::new(file), format, min_rating)?;
    let (train, test, validation) = dataset::split(&interactions, spec)?;

    std::fs::create_dir_all(out_dir)?;
    let train_path = out_dir.join("train.blri");
    let test_path = out_dir.join("test.blri");
    let val_path = out_dir.join("validation.blri");
    write_dataset(&train, &train_path)?;
    write_dataset(&test, &test_path)?;
    write_dataset(&validation, &val_path)?;

    let mut manifest = RunManifest::new("split", spec.seed);
    manifest.add_input(input)?;
    manifest.add_output(&train_path)?;
    manifest.add_output(&test_path)?;
    manifest.add_output(&val_path)?;
    manifest.config.insert(
        "fractions".into(),
        serde_json::json!([
            spec.train_fraction,
            spec.test_fraction,
            spec.validation_fraction
        ]),
    );
    manifest
        .metrics
        .insert("interactions".into(), interactions.len() as f64);
    manifest.metrics.insert("users".into(), interactions.num_users() as f64);
    manifest.metrics.insert("items".into(), interactions.num_items() as f64);
    let manifest_path = out_dir.join("manifest.json");
    manifest.write_to(&manifest_path)?;

    Ok(SplitOutcome {
        train: train_path,
        test: test_path,
        validation: val_path,
        manifest: manifest_path,
        counts: (train.len(), test.len(), validation.len()),
    })
}

/// Outcome of `fit`: the model file plus the training report.
#[derive(Debug)]
pub struct FitOutcome {
    pub model_path: PathBuf,
    pub manifest: PathBuf,
    pub report: TrainReport,
}

/// Fits a model on a compact dataset file and writes it out.
pub fn cmd_fit(
    train_path: &Path,
    config: &TrainConfig,
    out_model: &Path,
    progress: impl FnMut(&EpochStats),
) -> Result<FitOutcome> {
    let train = read_dataset(train_path)?;
    let positives = dataset::positive_sets(&train);
    let (model, report) = fit(&train, &positives, config, progress)?;
    write_model(&ModelFile::Dense(model), out_model)?;

    let mut manifest = RunManifest::new("fit", config.seed);
    manifest.add_input(train_path)?;
    manifest.add_output(out_model)?;
    manifest.config = match serde_json::to_value(config) {
        Ok(serde_json::Value::Object(map)) => map,
        _ => serde_json::Map::new(),
    };
    if let Some(last) = report.epoch_losses.last() {
        manifest.metrics.insert("final_mean_loss".into(), *last);
    }
    manifest
        .metrics
        .insert("skipped_pairs".into(), report.skipped_pairs as f64);
    let manifest_path = manifest_path_for(out_model);
    manifest.write_to(&manifest_path)?;

    Ok(FitOutcome {
        model_path: out_model.to_path_buf(),
        manifest: manifest_path,
        report,
    })
}

fn manifest_path_for(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// One random-search trial record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: TrainConfig,
    pub mrr: Option<f64>,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Key=value line for the trials log.
    pub fn render(&self) -> String {
        let status = if self.mrr.is_some() { "ok" } else { "failed" };
        let mut line = format!(
            "trial={} status={status} dim={} representation={} loss={} lr={:e} l2={:e} minibatch={} epochs={} seed={}",
            self.index,
            self.config.dim,
            self.config.representation.as_str(),
            self.config.loss.as_str(),
            self.config.learning_rate,
            self.config.l2,
            self.config.minibatch_size,
            self.config.epochs,
            self.config.seed,
        );
        if let Some(m) = self.mrr {
            line.push_str(&format!(" mrr={m:.6}"));
        }
        if let Some(e) = &self.error {
            line.push_str(&format!(" error={:?}", e));
        }
        line
    }
}

/// Outcome of `search`.
#[derive(Debug)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub best_mrr: f64,
    pub trials: Vec<TrialRecord>,
    pub log_path: PathBuf,
    pub best_path: PathBuf,
}

/// Parses a trials log and returns the argmax trial index and its MRR.
/// Ties resolve to the earliest trial, matching the search itself.
pub fn argmax_of_trials_log(text: &str) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for line in text.lines() {
        let mut index = None;
        let mut mrr_value = None;
        for token in line.split_whitespace() {
            if let Some(v) = token.strip_prefix("trial=") {
                index = v.parse::<usize>().ok();
            }
            if let Some(v) = token.strip_prefix("mrr=") {
                mrr_value = v.parse::<f64>().ok();
            }
        }
        if let (Some(idx), Some(m)) = (index, mrr_value) {
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((idx, m));
            }
        }
    }
    best.ok_or_else(|| Error::MalformedReport("no successful trial in log".into()))
}

/// Random hyperparameter search: fit each sampled config on the training
/// set, rank by test-set MRR, return the argmax. Failed trials are logged
/// and skipped; the search only errors when every trial fails.
pub fn cmd_search(
    train_path: &Path,
    test_path: &Path,
    space: &SearchSpace,
    dim: usize,
    representation: Representation,
    max_sampled: usize,
    out_dir: &Path,
) -> Result<SearchOutcome> {
    space.validate()?;
    let train = read_dataset(train_path)?;
    let test = read_dataset(test_path)?;
    let positives = dataset::positive_sets(&train);

    // Sample every configuration up front so the draw sequence does not
    // depend on trial scheduling.
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let configs: Vec<TrainConfig> = (0..space.trials)
        .map(|t| {
            space.sample(
                dim,
                representation,
                max_sampled,
                space.seed.wrapping_add(t as u64),
                &mut rng,
            )
        })
        .collect();

    use rayon::prelude::*;
    let trials: Vec<TrialRecord> = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| {
            let result = fit(&train, &positives, &config, |_| {})
                .and_then(|(model, _)| mrr(&model, &test, &positives));
            match result {
                Ok(report) => TrialRecord {
                    index,
                    config,
                    mrr: Some(report.mrr),
                    error: None,
                },
                Err(e) => TrialRecord {
                    index,
                    config,
                    mrr: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let best = trials
        .iter()
        .filter_map(|t| t.mrr.map(|m| (t.index, m)))
        .fold(None::<(usize, f64)>, |acc, (idx, m)| match acc {
            Some((_, b)) if b >= m => acc,
            _ => Some((idx, m)),
        });
    let (best_index, best_mrr) = best.ok_or(Error::AllTrialsFailed(space.trials))?;

    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("trials.log");
    let mut log = BufWriter::new(File::create(&log_path)?);
    for trial in &trials {
        writeln!(log, "{}", trial.render())?;
    }
    log.flush()?;

    let best_config = trials[best_index].config.clone();
    let best_path = out_dir.join("best_config.json");
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(&best_path)?),
        &best_config,
    )
    .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))?;

    let mut manifest = RunManifest::new("search", space.seed);
    manifest.add_input(train_path)?;
    manifest.add_input(test_path)?;
    manifest.add_output(&log_path)?;
    manifest.add_output(&best_path)?;
    manifest.metrics.insert("best_mrr".into(), best_mrr);
    manifest
        .metrics
        .insert("best_trial".into(), best_index as f64);
    manifest.write_to(&out_dir.join("manifest.json"))?;

    Ok(SearchOutcome {
        best: best_config,
        best_mrr,
        trials,
        log_path,
        best_path,
    })
}

/// Outcome of `evaluate`.
#[derive(Debug)]
pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub line: ReportLine,
    pub table: String,
}

/// Ranks every eval interaction with the stored model, excluding the
/// user's training positives.
pub fn cmd_evaluate(model_path: &Path, eval_path: &Path, train_path: &Path) -> Result<EvaluateOutcome> {
    let model = read_model(model_path)?;
    let eval_set = read_dataset(eval_path)?;
    let train = read_dataset(train_path)?;
    let positives = dataset::positive_sets(&train);

    let report = match &model {
        ModelFile::Dense(m) => mrr(m, &eval_set, &positives)?,
        ModelFile::Packed(m) => mrr(m, &eval_set, &positives)?,
    };
    let line = ReportLine {
        dim: Some(model.dim()),
        mrr: Some(report.mrr),
        ..ReportLine::default()
    };
    let table = render_table(std::slice::from_ref(&line));
    Ok(EvaluateOutcome { report, line, table })
}

/// Converts a dense model file into its packed counterpart.
pub fn cmd_binarize(model_path: &Path, out_path: &Path) -> Result<()> {
    let model = match read_model(model_path)? {
        ModelFile::Dense(m) => m,
        ModelFile::Packed(_) => {
            return Err(Error::WrongModelKind {
                expected: "dense",
                found: "packed",
            });
        }
    };
    write_model(&ModelFile::Packed(binarize(&model)), out_path)?;
    let mut manifest = RunManifest::new("binarize", 0);
    manifest.add_input(model_path)?;
    manifest.add_output(out_path)?;
    manifest.write_to(&manifest_path_for(out_path))?;
    Ok(())
}

/// Outcome of `benchmark`.
#[derive(Debug)]
pub struct BenchmarkOutcome {
    pub reports: Vec<BenchReport>,
    pub lines: Vec<ReportLine>,
    pub table: String,
}

/// Scoring-throughput benchmark over synthetic models, one row per
/// dimensionality, plus the memory-accounting columns.
pub fn cmd_benchmark(
    dims: &[usize],
    items: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchmarkOutcome> {
    if dims.is_empty() {
        return Err(Error::InvalidConfig("benchmark needs at least one dim".into()));
    }
    if items == 0 {
        return Err(Error::InvalidConfig("benchmark needs at least one item".into()));
    }
    if repetitions == 0 {
        return Err(Error::InvalidConfig("benchmark needs at least one repetition".into()));
    }
    let mut reports = Vec::with_capacity(dims.len());
    for &dim in dims {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ dim as u64);
        let dense_model = synthetic_dense(dim, 8, items, &mut rng)?;
        let packed_model = binarize(&dense_model);
        let dense_stats = benchmark_ppms(&dense_model, repetitions)?;
        let packed_stats = benchmark_ppms(&packed_model, repetitions)?;
        reports.push(BenchReport::from_stats(dim, &dense_stats, &packed_stats)?);
    }
    let lines: Vec<ReportLine> = reports.iter().map(ReportLine::from_bench).collect();
    let table = render_table(&lines);
    Ok(BenchmarkOutcome { reports, lines, table })
}

/// Fixed-width results table over report lines, mirroring the benchmark
/// columns: dimension, MRR, PPMS for both kinds, their ratio and the
/// memory-use ratio.
pub fn render_table(lines: &[ReportLine]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>9} {:>9} {:>12} {:>13} {:>11} {:>13}\n",
        "Dimension", "MRR", "PPMS", "Binary PPMS", "PPMS ratio", "Memory ratio"
    ));
    let fmt_opt = |v: Option<f64>, prec: usize, width: usize| -> String {
        match v {
            Some(x) => format!("{x:>width$.prec$}"),
            None => format!("{:>width$}", "-"),
        }
    };
    for line in lines {
        let dim = line
            .dim
            .map(|d| d.to_string())
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:>9} {} {} {} {} {}\n",
            dim,
            fmt_opt(line.mrr, 4, 9),
            fmt_opt(line.ppms_dense, 1, 12),
            fmt_opt(line.ppms_packed, 1, 13),
            fmt_opt(line.ppms_ratio, 3, 11),
            fmt_opt(line.memory_ratio, 3, 13),
        ));
    }
    out
}

/// Fits a model and evaluates it in one shot; convenience used by tests
/// and examples rather than a CLI subcommand.
pub fn fit_and_evaluate(
    train: &InteractionSet,
    eval_set: &InteractionSet,
    positives: &PositiveSets,
    config: &TrainConfig,
) -> Result<(DenseModel, EvalReport)> {
    let (model, _) = fit(train, positives, config, |_| {})?;
    let report = mrr(&model, eval_set, positives)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_space_sampling_is_within_bounds() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 0..50 {
            let c = space.sample(64, Representation::Dense, 5, t, &mut rng);
            assert!(c.learning_rate >= 1e-4 && c.learning_rate <= 1e-1);
            assert!(c.l2 >= 1e-9 && c.l2 <= 1e-3);
            assert!(space.minibatch_choices.contains(&c.minibatch_size));
            assert!(space.epoch_choices.contains(&c.epochs));
            assert!(space.losses.contains(&c.loss));
            assert_eq!(c.dim, 64);
            c.validate().unwrap();
        }
    }

    #[test]
    fn search_space_rejects_degenerate_settings() {
        let mut space = SearchSpace::default();
        space.trials = 0;
        assert!(space.validate().is_err());
        let mut space = SearchSpace::default();
        space.learning_rate_range = (0.0, 1.0);
        assert!(space.validate().is_err());
    }

    #[test]
    fn trials_log_argmax_roundtrip() {
        let text = "trial=0 status=ok mrr=0.100000\n\
                    trial=1 status=failed error=\"boom\"\n\
                    trial=2 status=ok mrr=0.300000\n\
                    trial=3 status=ok mrr=0.200000\n";
        assert_eq!(argmax_of_trials_log(text).unwrap(), (2, 0.3));
        assert!(argmax_of_trials_log("trial=9 status=failed\n").is_err());
    }

    #[test]
    fn render_table_handles_missing_columns() {
        let line = ReportLine {
            dim: Some(32),
            mrr: Some(0.5),
            ..ReportLine::default()
        };
        let table = render_table(&[line]);
        assert!(table.contains("32"));
        assert!(table.contains("0.5000"));
        assert!(table.contains('-'));
    }
}
