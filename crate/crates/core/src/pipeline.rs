//! The end-to-end experiment and the stage functions it is built from.
//!
//! `run` generates or loads data, preprocesses it, trains every configured
//! (encoder, task) model on the unshifted training split, and then for each
//! shift embeds all recordings, scores latent-space integrity against the
//! unshifted embeddings, and evaluates the models on the shifted test split
//! with Monte Carlo dropout. Shifts are applied to raw data before
//! preprocessing. Every value crossing a stage boundary is rounded to `f32`,
//! the precision of the on-disk formats, so running the stages one by one
//! through files gives the same numbers as a single `run`.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml                  normalized configuration
//! split.csv                    recording_id,split
//! models/<encoder>-<task>.spp  checkpoints (+ .json sidecar, _history.csv)
//! embeddings/<space>/<shift>.csv
//! predictions/<encoder>-<task>/<dataset>-<shift>.csv (+ _summary.csv)
//! graphs/<space>/<shift>_edges.csv, _vertices.csv
//! integrity.jsonl
//! report.jsonl, report_pivot.csv
//! status.json
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{DataSource, EncoderKind, ExperimentConfig, SplitConfig};
use crate::encoders::{Embedding, EmbeddingSet, Encoder, NeuralEncoder, Origin, PsdEncoder};
use crate::error::{Error, Result};
use crate::formats;
use crate::metrics::{self, summarize_condition, EvaluationRow, ScoredRecording};
use crate::par;
use crate::rng;
use crate::shifts::{NoiseKey, ShiftSpec};
use crate::signal::{preprocess, Grade, PreprocessConfig, RawRecording, Recording};
use crate::synth::synth_generate;
use crate::topology::{integrity_with_graphs, IntegrityConfig, IntegrityResult};
use crate::training::{
    load_network, save_network, train, Architecture, CheckpointMeta, HistoryRow, Labeled, Network, Regime, Task,
    Tensor, TrainConfig,
};
use crate::uncertainty::{aggregate_recording, mcd_predict, mcd_prefix, McdConfig, McdPredictionSet};

pub const IN_SAMPLE: &str = "A";
pub const OUT_OF_SAMPLE: &str = "B";

/// Recording ids of each split, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Splits by recording, stratified by grade, so no recording contributes
/// epochs to two splits.
pub fn split_recordings(items: &[(String, Option<Grade>)], cfg: &SplitConfig, seed: u64) -> Result<Split> {
    let mut groups: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for (id, grade) in items {
        let g = match grade {
            None => 0,
            Some(Grade::Normal) => 1,
            Some(Grade::Abnormal) => 2,
        };
        groups.entry(g).or_default().push(id.clone());
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (g, mut ids) in groups {
        ids.sort();
        ids.shuffle(&mut rng::stream(seed, &[g]));
        let n = ids.len();
        let mut n_train = (n as f64 * cfg.train).round() as usize;
        let mut n_val = (n as f64 * cfg.val).round() as usize;
        if n >= 3 {
            n_train = n_train.clamp(1, n - 2);
            n_val = n_val.clamp(1, n - n_train - 1);
        } else {
            n_train = n_train.min(n);
            n_val = n_val.min(n - n_train);
        }
        split.train.extend_from_slice(&ids[..n_train]);
        split.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        split.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} recordings are too few for a train/val/test split",
            items.len()
        )));
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

pub fn select<'a>(recordings: &'a [Recording], ids: &[String]) -> Vec<&'a Recording> {
    recordings.iter().filter(|r| ids.binary_search(&r.id).is_ok()).collect()
}

/// Loads or generates the raw recordings of a data source.
pub fn load_source(source: &DataSource, synthetic: Option<crate::synth::SyntheticSpec>) -> Result<Vec<RawRecording>> {
    match (source, synthetic) {
        (_, Some(spec)) => synth_generate(&spec),
        (DataSource::Files { path }, None) => formats::read_raw_dataset(path),
        (DataSource::Synthetic(_), None) => unreachable!("synthetic source always carries its spec"),
    }
}

/// Applies `shift` to each raw recording, then preprocesses it. Both the
/// shifted raw signal and the resulting epochs are rounded to `f32`.
pub fn shift_and_preprocess(raw: &[RawRecording], shift: &ShiftSpec, cfg: &PreprocessConfig) -> Result<Vec<Recording>> {
    par::try_map(raw, |r| {
        let mut shifted = r.clone();
        shifted.data = shift.apply(
            &r.data,
            r.fs,
            NoiseKey {
                recording_id: &r.id,
                epoch_index: 0,
            },
        )?;
        formats::round_f32(&mut shifted.data);
        let mut rec = preprocess(&shifted, cfg)?;
        for e in &mut rec.epochs {
            formats::round_f32(&mut e.data);
        }
        Ok(rec)
    })
}

pub fn regime_of(kind: EncoderKind) -> Regime {
    match kind {
        EncoderKind::NeuralFrozen => Regime::FrozenEncoder,
        EncoderKind::Psde | EncoderKind::NeuralFull => Regime::Full,
    }
}

fn target_of(rec: &Recording, task: Task) -> Result<f64> {
    match task {
        Task::Grade => rec.grade.map(Grade::as_label),
        Task::Age => rec.age,
    }
    .ok_or_else(|| Error::InvalidParameter(format!("recording {} has no {task} label", rec.id)))
}

/// Network input of one epoch for an encoder kind.
fn model_input(kind: EncoderKind, psd: &PsdEncoder, epoch: &ndarray::Array2<f64>) -> Result<Tensor> {
    match kind {
        EncoderKind::Psde => Ok(Tensor::vector(psd.encode(epoch)?)),
        EncoderKind::NeuralFrozen | EncoderKind::NeuralFull => Ok(Tensor::from_array2(epoch)),
    }
}

fn epoch_shape(recordings: &[&Recording]) -> Result<(usize, usize, f64)> {
    let (_, e) = recordings
        .iter()
        .flat_map(|r| r.valid_epochs())
        .next()
        .ok_or(Error::NoValidEpochs)?;
    Ok((e.channels(), e.samples(), e.fs))
}

/// A trained model with what is needed to run it on new epochs.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: EncoderKind,
    pub task: Task,
    pub network: Network,
    pub psd: PsdEncoder,
}

impl Model {
    fn new(kind: EncoderKind, task: Task, network: Network, fs: f64, samples: usize) -> Result<Self> {
        Ok(Self {
            kind,
            task,
            network,
            psd: PsdEncoder::standard(fs, samples)?,
        })
    }

    pub fn regime(&self) -> Regime {
        regime_of(self.kind)
    }

    /// The encoder whose output space integrity is measured in.
    pub fn encoder(&self) -> Box<dyn Encoder + '_> {
        match self.kind {
            EncoderKind::Psde => Box::new(self.psd.clone()),
            _ => Box::new(NeuralEncoder::new(
                self.kind.embedding_id(self.task),
                Arc::new(self.network.clone()),
            )),
        }
    }

    pub fn meta(&self, fingerprint: Option<String>) -> CheckpointMeta {
        CheckpointMeta {
            architecture: self.network.architecture().clone(),
            output: self.network.output,
            init_seed: self.network.params.init_seed,
            encoder_id: Some(self.kind.as_str().into()),
            task: Some(self.task.as_str().into()),
            regime: Some(
                match self.regime() {
                    Regime::Full => "full",
                    Regime::FrozenEncoder => "frozen_encoder",
                }
                .into(),
            ),
            fingerprint,
        }
    }

    pub fn save(&self, path: &Path, fingerprint: Option<String>) -> Result<()> {
        save_network(path, &self.network, &self.meta(fingerprint))
    }

    /// Loads a checkpoint written by [`Model::save`], for epochs of
    /// `samples` samples at `fs` Hz.
    pub fn load(path: &Path, fs: f64, samples: usize) -> Result<(Self, CheckpointMeta)> {
        let (network, meta) = load_network(path)?;
        let field = |v: &Option<String>, what: &str| {
            v.clone()
                .ok_or_else(|| Error::format(path, format!("checkpoint metadata has no {what}")))
        };
        let kind: EncoderKind = field(&meta.encoder_id, "encoder")?.parse()?;
        let task: Task = field(&meta.task, "task")?.parse()?;
        Ok((Self::new(kind, task, network, fs, samples)?, meta))
    }
}

/// Initialization seed of an encoder kind. Independent of the task, so both
/// task heads of the frozen encoder sit on the same random encoder.
fn init_seed(train_seed: u64, kind: EncoderKind) -> u64 {
    rng::stream_seed(train_seed, &[rng::id_hash(kind.as_str())])
}

/// Trains one model on the valid epochs of `train_set`, early-stopping on
/// `val_set`. Epoch targets are their recording's label.
pub fn train_model(
    kind: EncoderKind,
    task: Task,
    train_set: &[&Recording],
    val_set: &[&Recording],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<HistoryRow>)> {
    let (channels, samples, fs) = epoch_shape(train_set)?;
    let psd = PsdEncoder::standard(fs, samples)?;
    let arch = match kind {
        EncoderKind::Psde => Architecture::Head {
            inputs: psd.dim(),
            dropout: cfg.dropout_p,
        },
        _ => match Architecture::shallow(channels, samples) {
            Architecture::Shallow {
                channels,
                samples,
                temporal_filters,
                kernel,
                spatial_filters,
                pool_window,
                pool_stride,
                embed_dim,
                ..
            } => Architecture::Shallow {
                channels,
                samples,
                temporal_filters,
                kernel,
                spatial_filters,
                pool_window,
                pool_stride,
                embed_dim,
                dropout: cfg.dropout_p,
            },
            other => other,
        },
    };
    let mut network = Network::new(arch, init_seed(cfg.seed, kind))?;
    network.params.round_to_f32();
    let data = |set: &[&Recording]| -> Result<(Vec<Tensor>, Vec<f64>)> {
        let items: Vec<(&Recording, &ndarray::Array2<f64>)> = set
            .iter()
            .flat_map(|r| r.valid_epochs().map(move |(_, e)| (*r, &e.data)))
            .collect();
        let inputs = par::try_map(&items, |(_, e)| model_input(kind, &psd, e))?;
        let targets = items
            .iter()
            .map(|(r, _)| target_of(r, task))
            .collect::<Result<Vec<_>>>()?;
        Ok((inputs, targets))
    };
    let (tr_x, tr_y) = data(train_set)?;
    let (va_x, va_y) = data(val_set)?;
    let history = train(
        &mut network,
        regime_of(kind),
        task,
        Labeled::new(&tr_x, &tr_y)?,
        Labeled::new(&va_x, &va_y)?,
        cfg,
    )?;
    // Match the checkpoint, so a cached model predicts exactly like a fresh one.
    network.params.round_to_f32();
    Ok((Model::new(kind, task, network, fs, samples)?, history))
}

/// Embeds every valid epoch, in recording then epoch order.
pub fn encode_recordings(encoder: &dyn Encoder, recordings: &[Recording], origin: Origin) -> Result<EmbeddingSet> {
    let items: Vec<(&Recording, usize)> = recordings
        .iter()
        .flat_map(|r| r.valid_epochs().map(move |(i, _)| (r, i)))
        .collect();
    let vectors = par::try_map(&items, |(r, i)| encoder.encode(&r.epochs[*i].data))?;
    let mut set = EmbeddingSet::new(encoder.id(), encoder.dim());
    for ((r, i), vector) in items.into_iter().zip(vectors) {
        set.push(Embedding {
            vector,
            origin,
            recording_id: r.id.clone(),
            epoch_index: i,
        })?;
    }
    Ok(set)
}

/// Key of the dropout masks of one epoch; shared by every shift so that
/// conditions differ only by their inputs.
pub fn epoch_input_id(recording_id: &str, epoch_index: usize) -> String {
    format!("{recording_id}#{epoch_index}")
}

/// Recording-level MC predictions of `model` on the valid epochs of each
/// recording. Recordings without valid epochs are skipped.
pub fn predict_recordings(model: &Model, recordings: &[&Recording], mcd: &McdConfig) -> Result<Vec<McdPredictionSet>> {
    let items: Vec<(&Recording, usize)> = recordings
        .iter()
        .flat_map(|r| r.valid_epochs().map(move |(i, _)| (*r, i)))
        .collect();
    let epoch_sets = par::try_map(&items, |(r, i)| {
        let x = model_input(model.kind, &model.psd, &r.epochs[*i].data)?;
        let input = mcd_prefix(&model.network, model.regime(), &x, 0)?;
        mcd_predict(&model.network, model.task, &input, &epoch_input_id(&r.id, *i), mcd)
    })?;
    let mut by_recording: Vec<(String, Vec<McdPredictionSet>)> = Vec::new();
    for ((r, _), set) in items.iter().zip(epoch_sets) {
        match by_recording.last_mut() {
            Some((id, sets)) if *id == r.id => sets.push(set),
            _ => by_recording.push((r.id.clone(), vec![set])),
        }
    }
    by_recording
        .iter()
        .map(|(id, sets)| aggregate_recording(id, sets))
        .collect()
}

/// Scores recording-level predictions against the recordings' labels.
pub fn evaluate_predictions(
    model_kind: EncoderKind,
    task: Task,
    dataset: &str,
    shift: &ShiftSpec,
    predictions: &[McdPredictionSet],
    recordings: &[&Recording],
    tau: f64,
) -> Result<EvaluationRow> {
    let by_id: HashMap<&str, &Recording> = recordings.iter().map(|r| (r.id.as_str(), *r)).collect();
    let scored = predictions
        .iter()
        .map(|p| {
            let rec = by_id
                .get(p.input_id.as_str())
                .ok_or_else(|| Error::InvalidParameter(format!("no recording for predictions of {}", p.input_id)))?;
            Ok(ScoredRecording {
                predictions: p.clone(),
                target: target_of(rec, task)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_condition(dataset, shift, model_kind.as_str(), task, &scored, tau)
}

/// MC evaluation of one model on one (already shifted and preprocessed)
/// condition.
pub fn evaluate_condition(
    model: &Model,
    dataset: &str,
    shift: &ShiftSpec,
    recordings: &[&Recording],
    mcd: &McdConfig,
) -> Result<(EvaluationRow, Vec<McdPredictionSet>)> {
    let predictions = predict_recordings(model, recordings, mcd)?;
    let row = evaluate_predictions(
        model.kind,
        model.task,
        dataset,
        shift,
        &predictions,
        recordings,
        mcd.tau,
    )?;
    Ok((row, predictions))
}

/// File-name form of a shift label.
pub fn shift_slug(shift: &ShiftSpec) -> String {
    let s: String = shift
        .to_string()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    s.trim_end_matches('_').to_string()
}

fn fingerprint<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config values serialize");
    format!("{:016x}", rng::id_hash(&text))
}

/// Exclusive ownership of an output directory for the life of the guard.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<EvaluationRow>,
    pub integrity: Vec<IntegrityResult>,
    pub dir: PathBuf,
}

#[derive(Serialize)]
struct Status<'a> {
    state: &'a str,
    completed: &'a [&'static str],
    failed_stage: Option<&'a str>,
    error: Option<String>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    completed: Vec<&'static str>,
}

impl Runner<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let value = f(self).map_err(Error::in_stage(name))?;
        self.completed.push(name);
        Ok(value)
    }

    fn write_status(&self, failure: Option<&Error>) -> Result<()> {
        let failed_stage = match failure {
            Some(Error::Stage { stage, .. }) => Some(*stage),
            _ => None,
        };
        let status = Status {
            state: if failure.is_some() { "failed" } else { "complete" },
            completed: &self.completed,
            failed_stage,
            error: failure.map(|e| e.to_string()),
        };
        let text = serde_json::to_string_pretty(&status).expect("status serializes");
        fs::write(self.out.join("status.json"), text + "\n")?;
        Ok(())
    }
}

/// Reads a cached artifact when its stamp matches, otherwise computes and
/// writes it along with the stamp.
fn cached<T>(
    path: &Path,
    stamp: &str,
    read: impl FnOnce(&Path) -> Result<T>,
    compute: impl FnOnce() -> Result<T>,
    write: impl FnOnce(&Path, &T) -> Result<()>,
) -> Result<T> {
    let stamp_path = path.with_extension("stamp");
    if path.exists() && fs::read_to_string(&stamp_path).is_ok_and(|s| s.trim() == stamp) {
        if let Ok(value) = read(path) {
            log::debug!("reusing {}", path.display());
            return Ok(value);
        }
    }
    let value = compute()?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write(path, &value)?;
    fs::write(stamp_path, format!("{stamp}\n"))?;
    Ok(value)
}

/// Runs the full experiment into `out`. The directory is locked for the
/// duration; artifacts from an earlier run with matching inputs are reused.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    let mut runner = Runner {
        cfg,
        out,
        completed: Vec::new(),
    };
    let result = run_stages(&mut runner);
    runner.write_status(result.as_ref().err())?;
    result
}

fn run_stages(runner: &mut Runner<'_>) -> Result<RunOutput> {
    let cfg = runner.cfg;
    let out = runner.out;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let pre = &cfg.preprocess;
    let train_cfg = cfg.train_config();
    let mcd = cfg.mcd_config();
    let icfg: IntegrityConfig = cfg.integrity_config();

    let raw = runner.stage("data", |_| load_source(&cfg.data, cfg.synthetic()))?;
    let data_fp = fingerprint(&(&cfg.data, cfg.synthetic(), pre));
    let clean = runner.stage("preprocess", |_| shift_and_preprocess(&raw, &ShiftSpec::NoShift, pre))?;

    let split = runner.stage("split", |_| {
        let items: Vec<(String, Option<Grade>)> = clean.iter().map(|r| (r.id.clone(), r.grade)).collect();
        let split = split_recordings(&items, &cfg.split, cfg.split_seed())?;
        let mut text = String::from("recording_id,split\n");
        let mut rows: Vec<(&String, &str)> = Vec::new();
        rows.extend(split.train.iter().map(|id| (id, "train")));
        rows.extend(split.val.iter().map(|id| (id, "val")));
        rows.extend(split.test.iter().map(|id| (id, "test")));
        rows.sort();
        for (id, s) in rows {
            text.push_str(&format!("{id},{s}\n"));
        }
        fs::write(out.join("split.csv"), text)?;
        Ok(split)
    })?;

    let (_, samples, fs_pre) = epoch_shape(&clean.iter().collect::<Vec<_>>())?;
    let models: Vec<(Model, String)> = runner.stage("train", |_| {
        let tr = select(&clean, &split.train);
        let va = select(&clean, &split.val);
        let mut models = Vec::new();
        for &kind in &cfg.encoders {
            for &task in &cfg.tasks {
                let fp = fingerprint(&(&data_fp, &split, &train_cfg, kind, task));
                let path = out.join("models").join(format!("{kind}-{task}.spp"));
                fs::create_dir_all(out.join("models"))?;
                let model = cached(
                    &path,
                    &fp,
                    |p| Model::load(p, fs_pre, samples).map(|(m, _)| m),
                    || {
                        log::info!("training {kind} for {task}");
                        let (model, history) = train_model(kind, task, &tr, &va, &train_cfg)?;
                        formats::write_history(&path.with_file_name(format!("{kind}-{task}_history.csv")), &history)?;
                        Ok(model)
                    },
                    |p, m| m.save(p, Some(fp.clone())),
                )?;
                models.push((model, fp));
            }
        }
        Ok(models)
    })?;

    // One embedding space per distinct encoder.
    let mut spaces: Vec<(String, &Model, String)> = Vec::new();
    for (model, fp) in &models {
        let id = model.kind.embedding_id(model.task);
        if !spaces.iter().any(|(s, _, _)| *s == id) {
            let space_fp = match model.kind {
                EncoderKind::Psde => fingerprint(&(&data_fp, "psde")),
                EncoderKind::NeuralFrozen => fingerprint(&(fp, "encoder")),
                EncoderKind::NeuralFull => fp.clone(),
            };
            spaces.push((id, model, space_fp));
        }
    }

    let embed = |recs: &[Recording], shift: &ShiftSpec, origin: Origin| -> Result<Vec<EmbeddingSet>> {
        spaces
            .iter()
            .map(|(id, model, space_fp)| {
                let path = out
                    .join("embeddings")
                    .join(id)
                    .join(format!("{}.csv", shift_slug(shift)));
                cached(
                    &path,
                    &fingerprint(&(space_fp, shift, origin)),
                    formats::read_embeddings,
                    || encode_recordings(model.encoder().as_ref(), recs, origin),
                    formats::write_embeddings,
                )
            })
            .collect()
    };

    let predict = |recs: &[&Recording], shift: &ShiftSpec, dataset: &str| -> Result<Vec<EvaluationRow>> {
        models
            .iter()
            .map(|(model, fp)| {
                let dir = out.join("predictions").join(format!("{}-{}", model.kind, model.task));
                let path = dir.join(format!("{dataset}-{}.csv", shift_slug(shift)));
                let preds = cached(
                    &path,
                    &fingerprint(&(fp, &data_fp, shift, dataset, &mcd)),
                    formats::read_predictions,
                    || predict_recordings(model, recs, &mcd),
                    |p, sets| {
                        formats::write_predictions(p, sets)?;
                        let summary = p.with_file_name(format!("{dataset}-{}_summary.csv", shift_slug(shift)));
                        formats::write_prediction_summary(&summary, sets, mcd.tau)
                    },
                )?;
                evaluate_predictions(model.kind, model.task, dataset, shift, &preds, recs, mcd.tau)
            })
            .collect()
    };

    let mut rows = Vec::new();
    let mut integrity = Vec::new();
    runner.stage("conditions", |_| {
        let z = embed(&clean, &ShiftSpec::NoShift, Origin::Z)?;
        for shift in &cfg.shifts {
            log::info!("condition {shift}");
            let shifted = if *shift == ShiftSpec::NoShift {
                None
            } else {
                Some(shift_and_preprocess(&raw, shift, pre)?)
            };
            let recs = shifted.as_deref().unwrap_or(&clean);
            let zt = match shifted {
                Some(_) => embed(recs, shift, Origin::ZShifted)?,
                None => z.clone(),
            };
            for (a, b) in z.iter().zip(&zt) {
                let (result, graphs) = integrity_with_graphs(a, b, shift, &icfg)?;
                if cfg.export_graphs {
                    let dir = out.join("graphs").join(&a.encoder_id);
                    fs::create_dir_all(&dir)?;
                    for (k, g) in graphs.iter().enumerate() {
                        let prefix = match graphs.len() {
                            1 => shift_slug(shift),
                            _ => format!("{}_{k}", shift_slug(shift)),
                        };
                        formats::write_graph(&dir, &prefix, g)?;
                    }
                }
                integrity.push(result);
            }
            rows.extend(predict(&select(recs, &split.test), shift, IN_SAMPLE)?);
        }
        Ok(())
    })?;

    if let Some(source) = &cfg.domain_b {
        runner.stage("domain_b", |_| {
            let raw_b = load_source(source, cfg.synthetic_b())?;
            let clean_b = shift_and_preprocess(&raw_b, &ShiftSpec::NoShift, pre)?;
            let all: Vec<&Recording> = clean_b.iter().collect();
            rows.extend(predict(&all, &ShiftSpec::NoShift, OUT_OF_SAMPLE)?);
            Ok(())
        })?;
    }

    runner.stage("report", |_| {
        metrics::sort_rows(&mut rows);
        metrics::emit_report(&rows, out)?;
        integrity.sort_by(|a, b| {
            a.encoder.cmp(&b.encoder).then_with(|| {
                let sa: ShiftSpec = a.shift.parse().expect("shift labels parse");
                let sb: ShiftSpec = b.shift.parse().expect("shift labels parse");
                sa.report_order(&sb)
            })
        });
        fs::write(out.join("integrity.jsonl"), formats::integrity_jsonl(&integrity)?)?;
        Ok(())
    })?;

    Ok(RunOutput {
        rows,
        integrity,
        dir: out.to_path_buf(),
    })
}
