//! Experiment configuration and run orchestration: one JSON config in, one
//! self-describing run directory out.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adapters::report_gate_coefficients;
use crate::analysis;
use crate::backbone::{load_checkpoint, save_checkpoint, Model, ModelConfig, Variant};
use crate::data::{build_task_data, Dataset, DatasetDescriptor, TaskData, WindowOptions};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalOptions, Evaluation, Predictions};
use crate::metrics::MetricReport;
use crate::scalar::{DType, Scalar};
use crate::tasks_heads::{prepare_batch, Sample};
use crate::tensor::Tensor;
use crate::training::{
    run_percentage_sweep, sweep_csv, train, zero_shot_data, zero_shot_eval, History, SweepRow,
    TrainConfig,
};

/// Optional probes run on the trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisFlags {
    pub similarity: bool,
    pub pca_substitution: bool,
    pub conditioning: bool,
    /// Pretrained/random mix ratios; empty skips the mix curve.
    pub mix_ratios: Vec<f64>,
    /// Test samples fed to the probes.
    pub max_samples: usize,
}

impl Default for AnalysisFlags {
    fn default() -> Self {
        Self {
            similarity: false,
            pca_substitution: false,
            conditioning: false,
            mix_ratios: Vec::new(),
            max_samples: 32,
        }
    }
}

fn default_dtype() -> DType {
    DType::F64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetDescriptor,
    #[serde(default)]
    pub windows: WindowOptions,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub analysis: AnalysisFlags,
    /// Pretrained backbone checkpoint directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Seeds model init, shuffling, dropout and imputation masks.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // relative paths in a config are relative to the config file
        if let Some(base) = path.parent() {
            if let Some(c) = cfg.checkpoint.as_mut() {
                if c.is_relative() {
                    *c = base.join(&*c);
                }
            }
            if let crate::data::DataSource::Csv { path: p, .. } = &mut cfg.dataset.source {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// The single seed and the few-shot fraction pushed into every sub-config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = self.seed;
        c.train.seed = self.seed;
        c.windows.seed = self.seed;
        if let Some(v) = self.train.variant {
            c.model.variant = v;
        }
        c.train.variant = None;
        if let Some(f) = self.train.few_shot_fraction.or(self.windows.fraction) {
            c.windows.fraction = Some(f);
            c.train.few_shot_fraction = Some(f);
        }
        if c.eval.seasonal_period.is_none() {
            c.eval.seasonal_period = self.dataset.seasonal_period;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.split_fractions().validate()?;
        if self.windows.stride == 0 || self.windows.eval_stride == 0 {
            return Err(Error::invalid("window strides must be positive"));
        }
        Ok(())
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Builds the configured model; frozen weights come from the checkpoint
/// when one is set and the variant uses pretrained weights.
pub fn build_model<T: Scalar>(cfg: &ExperimentConfig) -> Result<Model<T>> {
    let c = cfg.resolved();
    match &c.checkpoint {
        Some(dir) if c.model.variant.uses_pretrained() => {
            Model::from_pretrained(c.model.clone(), &load_checkpoint(dir)?)
        }
        _ => {
            if c.model.variant.uses_pretrained() {
                log::warn!(
                    "no checkpoint configured; the backbone stays at its random initialization"
                );
            }
            Model::new(c.model)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunMode {
    /// Train, evaluate and save the trained model.
    Train,
    /// Evaluate a saved model on the configured dataset.
    Eval { model_dir: PathBuf },
    /// Evaluate a saved model on non-overlapping target windows, checking
    /// that no parameter changes.
    ZeroShot { model_dir: PathBuf },
}

impl RunMode {
    fn name(&self) -> &'static str {
        match self {
            RunMode::Train => "train",
            RunMode::Eval { .. } => "eval",
            RunMode::ZeroShot { .. } => "zero_shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub report: MetricReport,
    pub history: Option<History>,
}

/// Per-run provenance written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub mode: String,
    pub seed: u64,
    pub dtype: DType,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureManifest {
    pub stage: String,
    pub error: String,
    pub config_hash: Option<String>,
}

/// Records a failure in `out/failure.json`; the original error is returned.
fn record_failure(out: &Path, stage: &str, hash: Option<&str>, err: Error) -> Error {
    let manifest = FailureManifest {
        stage: stage.to_string(),
        error: err.to_string(),
        config_hash: hash.map(str::to_string),
    };
    if create_dir(out).is_ok() {
        if let Ok(s) = serde_json::to_string_pretty(&manifest) {
            let _ = write(&out.join("failure.json"), s);
        }
    }
    err
}

/// Runs `cfg` in `mode` and writes everything to `out`.
///
/// Files: `config.json`, `run.json`, `metrics.json`, `predictions.csv`,
/// `summary.txt`, plus `history.json` and `model/` when training,
/// `gates.json` for adapter models and `analysis/` when probes are flagged.
/// Any failure leaves `failure.json` naming the stage.
pub fn run_experiment(cfg: &ExperimentConfig, mode: &RunMode, out: &Path) -> Result<RunSummary> {
    match cfg.dtype {
        DType::F64 => run_typed::<f64>(cfg, mode, out),
        DType::F32 => run_typed::<f32>(cfg, mode, out),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, mode: &RunMode, out: &Path) -> Result<RunSummary> {
    let c = cfg.resolved();
    let hash = c
        .hash()
        .map_err(|e| record_failure(out, "config", None, e))?;
    let h = Some(hash.as_str());
    c.validate()
        .map_err(|e| record_failure(out, "config", h, e))?;
    create_dir(out).map_err(|e| record_failure(out, "output", h, e))?;
    let _ = fs::remove_file(out.join("failure.json"));
    let info = RunInfo {
        config_hash: hash.clone(),
        mode: mode.name().into(),
        seed: c.seed,
        dtype: c.dtype,
        crate_version: env!("CARGO_PKG_VERSION").into(),
    };
    let prelude = || -> Result<()> {
        write(&out.join("config.json"), c.to_json()?)?;
        write(&out.join("run.json"), serde_json::to_string_pretty(&info)?)
    };
    prelude().map_err(|e| record_failure(out, "output", h, e))?;

    let ds = c
        .dataset
        .load(None)
        .map_err(|e| record_failure(out, "data", h, e))?;
    let fractions = c.dataset.split_fractions();
    let (model, data, history, eval) = match mode {
        RunMode::Train => {
            let mut model = build_model::<T>(&c).map_err(|e| record_failure(out, "model", h, e))?;
            let data = build_task_data::<T>(&ds, fractions, model.config(), &c.windows)
                .map_err(|e| record_failure(out, "data", h, e))?;
            let hist = train(&mut model, &data.train, &data.val, &c.train)
                .map_err(|e| record_failure(out, "train", h, e))?;
            let ev =
                evaluate(&model, &data, &c.eval).map_err(|e| record_failure(out, "eval", h, e))?;
            (model, data, Some(hist), ev)
        }
        RunMode::Eval { model_dir } | RunMode::ZeroShot { model_dir } => {
            let model = load_checkpoint::<T>(model_dir)
                .and_then(|ck| ck.into_model())
                .map_err(|e| record_failure(out, "model", h, e))?;
            let zero = matches!(mode, RunMode::ZeroShot { .. });
            let data = if zero {
                zero_shot_data::<T>(&ds, fractions, model.config())
            } else {
                let w = WindowOptions {
                    fraction: None,
                    ..c.windows
                };
                build_task_data::<T>(&ds, fractions, model.config(), &w)
            }
            .map_err(|e| record_failure(out, "data", h, e))?;
            let ev = if zero {
                zero_shot_eval(&model, &data, &c.eval)
            } else {
                evaluate(&model, &data, &c.eval)
            }
            .map_err(|e| record_failure(out, "eval", h, e))?;
            (model, data, None, ev)
        }
    };
    let emit = || -> Result<()> {
        write(&out.join("metrics.json"), eval.report.to_json()?)?;
        write(
            &out.join("predictions.csv"),
            predictions_csv(&eval.predictions),
        )?;
        if let Some(hist) = &history {
            write(
                &out.join("history.json"),
                serde_json::to_string_pretty(hist)?,
            )?;
            save_checkpoint(&model, &out.join("model"))?;
        }
        if let Some(g) = report_gate_coefficients(&model) {
            write(&out.join("gates.json"), serde_json::to_string_pretty(&g)?)?;
        }
        write(
            &out.join("summary.txt"),
            summary_table(&c, &hash, &data, history.as_ref(), &eval),
        )
    };
    emit().map_err(|e| record_failure(out, "output", h, e))?;
    if c.analysis != AnalysisFlags::default() {
        run_flagged_analysis(&c, &model, &data, &out.join("analysis"))
            .map_err(|e| record_failure(out, "analysis", h, e))?;
    }
    Ok(RunSummary {
        config_hash: hash,
        out_dir: out.to_path_buf(),
        report: eval.report,
        history,
    })
}

/// Trains one model per fraction; writes `sweep.csv` and `sweep.json`.
pub fn run_sweep(cfg: &ExperimentConfig, fractions: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    let c = cfg.resolved();
    let hash = c
        .hash()
        .map_err(|e| record_failure(out, "config", None, e))?;
    let h = Some(hash.as_str());
    c.validate()
        .map_err(|e| record_failure(out, "config", h, e))?;
    create_dir(out).map_err(|e| record_failure(out, "output", h, e))?;
    write(&out.join("config.json"), c.to_json()?)
        .map_err(|e| record_failure(out, "output", h, e))?;
    let rows = match c.dtype {
        DType::F64 => sweep_typed::<f64>(&c, fractions),
        DType::F32 => sweep_typed::<f32>(&c, fractions),
    }
    .map_err(|e| record_failure(out, "sweep", h, e))?;
    let emit = || -> Result<()> {
        write(&out.join("sweep.csv"), sweep_csv(&rows))?;
        write(
            &out.join("sweep.json"),
            serde_json::to_string_pretty(&rows)?,
        )
    };
    emit().map_err(|e| record_failure(out, "output", h, e))?;
    Ok(rows)
}

fn sweep_typed<T: Scalar>(c: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let ds = c.dataset.load(None)?;
    let base = build_model::<T>(c)?;
    let mut train_cfg = c.train.clone();
    train_cfg.few_shot_fraction = None;
    let w = WindowOptions {
        fraction: None,
        ..c.windows
    };
    run_percentage_sweep(
        &base,
        &ds,
        c.dataset.split_fractions(),
        &w,
        &train_cfg,
        &c.eval,
        fractions,
    )
}

/// One CSV per prediction kind.
pub fn predictions_csv(p: &Predictions) -> String {
    let mut out = String::new();
    match p {
        Predictions::Series { pred, truth, mask } => {
            out.push_str(if mask.is_some() {
                "row,step,pred,truth,observed\n"
            } else {
                "row,step,pred,truth\n"
            });
            for (r, (pr, tr)) in pred.iter().zip(truth).enumerate() {
                for (t, (a, b)) in pr.iter().zip(tr).enumerate() {
                    out.push_str(&format!("{r},{t},{a},{b}"));
                    if let Some(m) = mask {
                        out.push_str(&format!(",{}", m[r][t]));
                    }
                    out.push('\n');
                }
            }
        }
        Predictions::Classes { pred, truth } => {
            out.push_str("sample,pred,truth\n");
            for (i, (a, b)) in pred.iter().zip(truth).enumerate() {
                out.push_str(&format!("{i},{a},{b}\n"));
            }
        }
        Predictions::Anomaly {
            scores,
            flags,
            labels,
            ..
        } => {
            out.push_str("t,score,flag,label\n");
            for (t, (s, f)) in scores.iter().zip(flags).enumerate() {
                let l = labels.as_ref().map_or(String::new(), |l| l[t].to_string());
                out.push_str(&format!("{t},{s},{f},{l}\n"));
            }
        }
    }
    out
}

fn summary_table<T>(
    c: &ExperimentConfig,
    hash: &str,
    data: &TaskData<T>,
    hist: Option<&History>,
    ev: &Evaluation,
) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("experiment".into(), c.name.clone()),
        ("config".into(), hash[..16].to_string()),
        ("dataset".into(), c.dataset.name.clone()),
        ("task".into(), c.model.task.name().into()),
        ("variant".into(), c.model.variant.to_string()),
        ("seed".into(), c.seed.to_string()),
        ("train_len".into(), data.train_len.to_string()),
        ("test_windows".into(), data.test.len().to_string()),
    ];
    if let Some(h) = hist {
        rows.push(("epochs".into(), h.epochs.len().to_string()));
        if let Some(b) = h.best_epoch {
            rows.push(("best_epoch".into(), b.to_string()));
        }
        rows.push((
            "trainable".into(),
            format!("{} scalars", h.trainable_scalars),
        ));
        rows.push(("frozen".into(), format!("{} scalars", h.frozen_scalars)));
    }
    for (k, v) in &ev.report.values {
        rows.push((k.clone(), format!("{v:.6}")));
    }
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<w$}  {v}\n"))
        .collect()
}

fn probe_patches<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    max: usize,
) -> Result<Tensor<T>> {
    let refs: Vec<&Sample<T>> = samples.iter().take(max.max(1)).collect();
    if refs.is_empty() {
        return Err(Error::Empty("no samples for analysis"));
    }
    Ok(prepare_batch(model.config(), &refs)?.patches)
}

/// A same-config model whose backbone keeps its fresh random initialization.
fn random_counterpart<T: Scalar>(c: &ExperimentConfig) -> Result<Model<T>> {
    let mut m = c.model.clone();
    m.variant = Variant::NoPretrainFreeze;
    Model::new(m)
}

fn run_flagged_analysis<T: Scalar>(
    c: &ExperimentConfig,
    model: &Model<T>,
    data: &TaskData<T>,
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    let a = &c.analysis;
    let patches = probe_patches(model, &data.test, a.max_samples)?;
    if a.similarity {
        let p = analysis::token_similarity_profile(model, &patches)?;
        write(&dir.join("similarity.csv"), p.to_csv())?;
        write(
            &dir.join("similarity.json"),
            serde_json::to_string_pretty(&p)?,
        )?;
    }
    if a.pca_substitution {
        let r = analysis::substitute_pca_attention(model, &patches, &[])?;
        write(&dir.join("pca_sub.csv"), pca_csv(&r))?;
        write(&dir.join("pca_sub.json"), serde_json::to_string_pretty(&r)?)?;
    }
    if a.conditioning {
        let v = conditioning_pair(c, model, &patches)?;
        write(
            &dir.join("conditioning.json"),
            serde_json::to_string_pretty(&v)?,
        )?;
    }
    if !a.mix_ratios.is_empty() {
        let random = random_counterpart::<T>(c)?;
        let pts = analysis::mix_similarity_curve(model, &random, &patches, &a.mix_ratios)?;
        write(&dir.join("mix.csv"), analysis::mix_curve_csv(&pts))?;
    }
    Ok(())
}

/// `source,layer,mean`: the attention profile, then one block per PCA rank.
pub fn pca_csv(r: &analysis::PcaReport) -> String {
    let mut out = String::from("source,layer,mean\n");
    for l in &r.attention.layers {
        out.push_str(&format!("attention,{},{}\n", l.layer, l.mean));
    }
    for s in &r.substitutions {
        for l in &s.profile.layers {
            out.push_str(&format!("pca_{},{},{}\n", s.rank, l.layer, l.mean));
        }
    }
    out
}

fn conditioning_pair<T: Scalar>(
    c: &ExperimentConfig,
    model: &Model<T>,
    patches: &Tensor<T>,
) -> Result<serde_json::Value> {
    let own = analysis::conditioning_diagnostic(&analysis::token_features(model, patches)?)?;
    let random = random_counterpart::<T>(c)?;
    let fresh = analysis::conditioning_diagnostic(&analysis::token_features(&random, patches)?)?;
    log::info!(
        "feature sigma_min: {} {own:.3e}, random backbone {fresh:.3e}",
        model.config().variant
    );
    Ok(json!({
        "variant": model.config().variant,
        "sigma_min": own,
        "random_backbone_sigma_min": fresh,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Similarity,
    PcaSub,
    Mix,
    Theorem1,
    LemmaBound,
    Convergence,
    Conditioning,
}

impl Probe {
    pub const ALL: [Probe; 7] = [
        Probe::Similarity,
        Probe::PcaSub,
        Probe::Mix,
        Probe::Theorem1,
        Probe::LemmaBound,
        Probe::Convergence,
        Probe::Conditioning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Probe::Similarity => "similarity",
            Probe::PcaSub => "pca-sub",
            Probe::Mix => "mix",
            Probe::Theorem1 => "theorem1",
            Probe::LemmaBound => "lemma-bound",
            Probe::Convergence => "convergence",
            Probe::Conditioning => "conditioning",
        }
    }

    /// Whether the probe runs on a configured model and dataset.
    pub fn needs_model(self) -> bool {
        matches!(
            self,
            Probe::Similarity | Probe::PcaSub | Probe::Mix | Probe::Conditioning
        )
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Probe::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown probe `{s}`")))
    }
}

/// Runs one probe and writes `<probe>.json` (and a CSV curve where one
/// exists) into `out`. Model probes need `cfg`.
pub fn run_probe(
    probe: Probe,
    cfg: Option<&ExperimentConfig>,
    seed: u64,
    out: &Path,
) -> Result<serde_json::Value> {
    create_dir(out)?;
    let stem = probe.name().replace('-', "_");
    let (report, csv) = match probe {
        Probe::Theorem1 => {
            let r = analysis::verify_theorem1(8, 64, 4, seed, 10)?;
            let mut csv = String::from("start,objective,relative_gap\n");
            for (i, (o, g)) in r
                .descent_objectives
                .iter()
                .zip(&r.descent_relative_gaps)
                .enumerate()
            {
                csv.push_str(&format!("{i},{o},{g}\n"));
            }
            (serde_json::to_value(&r)?, Some(csv))
        }
        Probe::LemmaBound => {
            let r = analysis::verify_lemma_bound(50, 8, 8, 0.1, seed)?;
            let mut csv = String::from("n,d,jacobian_norm,bound,bound_with_n\n");
            for i in &r.instances {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    i.n, i.d, i.jacobian_norm, i.bound, i.bound_with_n
                ));
            }
            (serde_json::to_value(&r)?, Some(csv))
        }
        Probe::Convergence => {
            let r =
                analysis::verify_convergence_rate(&analysis::ConvergenceConfig::default(), seed)?;
            let csv = analysis::convergence_csv(&r);
            (serde_json::to_value(&r)?, Some(csv))
        }
        _ => {
            let c = cfg.ok_or_else(|| {
                Error::invalid(format!("probe `{probe}` needs an experiment config"))
            })?;
            let mut c = c.clone();
            c.seed = seed;
            match c.dtype {
                DType::F64 => model_probe::<f64>(probe, &c)?,
                DType::F32 => model_probe::<f32>(probe, &c)?,
            }
        }
    };
    write(
        &out.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    if let Some(csv) = csv {
        write(&out.join(format!("{stem}.csv")), csv)?;
    }
    Ok(report)
}

fn model_probe<T: Scalar>(
    probe: Probe,
    c: &ExperimentConfig,
) -> Result<(serde_json::Value, Option<String>)> {
    let c = c.resolved();
    let model = build_model::<T>(&c)?;
    let ds: Dataset = c.dataset.load(None)?;
    let data = build_task_data::<T>(&ds, c.dataset.split_fractions(), model.config(), &c.windows)?;
    let patches = probe_patches(&model, &data.test, c.analysis.max_samples)?;
    Ok(match probe {
        Probe::Similarity => {
            let p = analysis::token_similarity_profile(&model, &patches)?;
            let csv = p.to_csv();
            (serde_json::to_value(&p)?, Some(csv))
        }
        Probe::PcaSub => {
            let r = analysis::substitute_pca_attention(&model, &patches, &[])?;
            let csv = pca_csv(&r);
            (serde_json::to_value(&r)?, Some(csv))
        }
        Probe::Mix => {
            let ratios = if c.analysis.mix_ratios.is_empty() {
                (0..=10).map(|i| f64::from(i) / 10.0).collect()
            } else {
                c.analysis.mix_ratios.clone()
            };
            let random = random_counterpart::<T>(&c)?;
            let pts = analysis::mix_similarity_curve(&model, &random, &patches, &ratios)?;
            let csv = analysis::mix_curve_csv(&pts);
            (serde_json::to_value(&pts)?, Some(csv))
        }
        Probe::Conditioning => (conditioning_pair(&c, &model, &patches)?, None),
        _ => unreachable!("analytic probes are handled by run_probe"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::SyntheticSpec;
    use crate::preprocessing::PatchConfig;
    use crate::tasks_heads::TaskSpec;

    pub(crate) fn small_config(task: TaskSpec, variant: Variant) -> ExperimentConfig {
        let mut backbone = BackboneConfig::small(2, 16);
        backbone.max_tokens = 16;
        let (spec, channels) = match task {
            TaskSpec::Anomaly { .. } => (
                SyntheticSpec::PeriodicWithAnomalies {
                    length: 800,
                    channels: 1,
                    period: 16.0,
                    anomaly_ratio: 0.01,
                    spike: 4.0,
                    noise: 0.05,
                },
                1,
            ),
            _ => (
                SyntheticSpec::SinusoidMix {
                    length: 400,
                    channels: 2,
                    periods: vec![12.0],
                    amplitudes: vec![1.0],
                    noise: 0.05,
                },
                2,
            ),
        };
        ExperimentConfig {
            name: "unit".into(),
            model: ModelConfig {
                backbone,
                patch: PatchConfig::new(8, 8, 32).unwrap(),
                channels,
                task,
                variant,
                adapters: Default::default(),
                seed: 0,
            },
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 16,
                max_batches_per_epoch: Some(4),
                ..Default::default()
            },
            dataset: DatasetDescriptor::synthetic("synthetic", spec, 3),
            windows: WindowOptions {
                stride: 4,
                eval_stride: 8,
                ..Default::default()
            },
            eval: EvalOptions::default(),
            analysis: AnalysisFlags::default(),
            checkpoint: None,
            output_dir: None,
            dtype: DType::F64,
            seed: 5,
        }
    }

    #[test]
    fn config_round_trip_is_a_fixed_point() {
        let c = small_config(TaskSpec::LongForecast { horizon: 8 }, Variant::Adapter);
        let s1 = c.to_json().unwrap();
        let back = ExperimentConfig::from_json(&s1).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), s1);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(other.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn forecast_run_writes_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(TaskSpec::LongForecast { horizon: 8 }, Variant::Adapter);
        c.analysis.similarity = true;
        let s = run_experiment(&c, &RunMode::Train, dir.path()).unwrap();
        for f in [
            "config.json",
            "run.json",
            "metrics.json",
            "predictions.csv",
            "history.json",
            "gates.json",
            "summary.txt",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join("analysis/similarity.csv").exists());
        assert!(s.report.get("mse").is_some() && s.report.get("mae").is_some());
        let again = tempfile::tempdir().unwrap();
        run_experiment(&c, &RunMode::Train, again.path()).unwrap();
        let read = |p: &Path| fs::read(p.join("metrics.json")).unwrap();
        assert_eq!(read(dir.path()), read(again.path()));
        // the saved model evaluates to the same metrics
        let ev = tempfile::tempdir().unwrap();
        let r = run_experiment(
            &c,
            &RunMode::Eval {
                model_dir: dir.path().join("model"),
            },
            ev.path(),
        )
        .unwrap();
        assert_eq!(r.report, s.report);
        let zs = tempfile::tempdir().unwrap();
        run_experiment(
            &c,
            &RunMode::ZeroShot {
                model_dir: dir.path().join("model"),
            },
            zs.path(),
        )
        .unwrap();
    }

    #[test]
    fn anomaly_run_reports_raw_and_adjusted_scores() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(
            TaskSpec::Anomaly {
                anomaly_ratio: 0.01,
            },
            Variant::Frozen,
        );
        let s = run_experiment(&c, &RunMode::Train, dir.path()).unwrap();
        for k in [
            "precision",
            "recall",
            "f1",
            "pa_precision",
            "pa_recall",
            "pa_f1",
        ] {
            assert!(s.report.get(k).is_some(), "{k}");
        }
        assert!(!dir.path().join("gates.json").exists());
    }

    #[test]
    fn failures_leave_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(TaskSpec::LongForecast { horizon: 8 }, Variant::Frozen);
        c.dataset.channels = Some(5);
        assert!(run_experiment(&c, &RunMode::Train, dir.path()).is_err());
        let m: FailureManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("failure.json")).unwrap())
                .unwrap();
        assert_eq!(m.stage, "data");
        assert!(m.config_hash.is_some());
    }

    #[test]
    fn sweep_has_one_row_per_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(TaskSpec::LongForecast { horizon: 8 }, Variant::Frozen);
        let rows = run_sweep(&c, &[0.01, 0.5, 1.0], dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].note.is_some());
        assert_eq!(
            fs::read_to_string(dir.path().join("sweep.csv"))
                .unwrap()
                .lines()
                .count(),
            4
        );
    }

    #[test]
    fn probes_dispatch() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!("pca_sub".parse::<Probe>().unwrap(), Probe::PcaSub);
        assert!("nope".parse::<Probe>().is_err());
        let c = small_config(TaskSpec::LongForecast { horizon: 8 }, Variant::Frozen);
        for p in Probe::ALL {
            if p == Probe::LemmaBound || p == Probe::Convergence {
                continue;
            }
            let v = run_probe(p, Some(&c), 7, dir.path()).unwrap();
            assert!(dir
                .path()
                .join(format!("{}.json", p.name().replace('-', "_")))
                .exists());
            if p == Probe::Theorem1 {
                assert!(
                    v.get("analytic_objective").is_some() && v.get("descent_objectives").is_some()
                );
            }
        }
        assert!(run_probe(Probe::Similarity, None, 0, dir.path()).is_err());
    }
}
