//! On-disk formats: `SPB1` epoch files, dataset directories, and the CSV and
//! JSON-lines outputs of each stage.
//!
//! `SPB1` layout (little-endian): magic `SPB1`, `u32` channels, `u32`
//! samples, `f32` sampling rate, `u32` epoch count, then every epoch as
//! `channels x samples` `f32` values, channel-major. Channel names sit one per
//! line in a `.channels` file next to it. A continuous recording is stored as
//! a single epoch.
//!
//! A dataset directory holds one `<id>.spb` per recording plus
//! `manifest.csv` with columns `recording_id,file,grade,age,valid`, where
//! `valid` is one `0`/`1` per epoch (empty for continuous recordings). Read
//! as raw data, the epochs of a file are joined end to end.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, EmbeddingSet};
use crate::error::{Error, Result};
use crate::signal::{ChannelLayout, Grade, MultichannelEpoch, RawRecording, Recording};
use crate::topology::{IntegrityResult, NeighborhoodGraph};
use crate::training::{HistoryRow, Task};
use crate::uncertainty::{agreement_index, mc_mean, mc_var, McdPredictionSet};

const SPB_MAGIC: &[u8; 4] = b"SPB1";
pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochFile {
    pub channels: Vec<String>,
    pub fs: f64,
    pub epochs: Vec<Array2<f64>>,
}

pub fn channels_path(path: &Path) -> PathBuf {
    path.with_extension("channels")
}

/// Rounds every sample to `f32`, as stored on disk.
pub fn round_f32(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v as f32 as f64);
}

pub fn write_spb(path: &Path, file: &EpochFile) -> Result<()> {
    let m = file.channels.len();
    let n = file.epochs.first().map_or(0, |e| e.ncols());
    if let Some(e) = file.epochs.iter().find(|e| e.dim() != (m, n)) {
        return Err(Error::ShapeMismatch {
            expected: format!("{m} x {n}"),
            got: format!("{} x {}", e.nrows(), e.ncols()),
        });
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SPB_MAGIC)?;
    w.write_all(&(m as u32).to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(file.fs as f32).to_le_bytes())?;
    w.write_all(&(file.epochs.len() as u32).to_le_bytes())?;
    for e in &file.epochs {
        for v in e.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    fs::write(channels_path(path), file.channels.join("\n") + "\n")?;
    Ok(())
}

pub fn read_spb(path: &Path) -> Result<EpochFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != SPB_MAGIC {
        return Err(Error::format(path, "missing SPB1 header"));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4 bytes") };
    let m = u32::from_le_bytes(word(4)) as usize;
    let n = u32::from_le_bytes(word(8)) as usize;
    let fs = f32::from_le_bytes(word(12)) as f64;
    let count = u32::from_le_bytes(word(16)) as usize;
    let expected = 20 + count * m * n * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let epochs = (0..count)
        .map(|k| {
            let start = 20 + k * m * n * 4;
            let data = bytes[start..start + m * n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            Array2::from_shape_vec((m, n), data).expect("sized above")
        })
        .collect();
    let side = channels_path(path);
    let channels: Vec<String> = match fs::read_to_string(&side) {
        Ok(text) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        Err(_) => return Err(Error::format(&side, "channel sidecar missing")),
    };
    if channels.len() != m {
        return Err(Error::format(
            &side,
            format!("{} channel names for {m} channels", channels.len()),
        ));
    }
    Ok(EpochFile { channels, fs, epochs })
}

/// One epoch as CSV, one row per channel. A non-numeric first field is taken
/// as the channel name.
pub fn read_epoch_csv(path: &Path) -> Result<(Vec<Option<String>>, Array2<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut names = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let mut fields = rec.iter().peekable();
        let name = match fields.peek() {
            Some(f) if f.parse::<f64>().is_err() => fields.next().map(String::from),
            _ => None,
        };
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("row {}: bad number '{f}'", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format(
                    path,
                    format!("row {} has {} samples, expected {}", i + 1, row.len(), first.len()),
                ));
            }
        }
        names.push(name);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    let n = rows[0].len();
    let data = Array2::from_shape_vec((rows.len(), n), rows.concat()).expect("rectangular");
    Ok((names, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub recording_id: String,
    pub file: String,
    pub grade: Option<Grade>,
    pub age: Option<f64>,
    pub valid: String,
}

fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(&path, e.to_string())))
        .collect()
}

fn file_name(id: &str) -> Result<String> {
    if id.is_empty() || id.contains(['/', '\\', ',', '"']) || id.starts_with('.') {
        return Err(Error::InvalidParameter(format!(
            "recording id '{id}' is not a safe file name"
        )));
    }
    Ok(format!("{id}.spb"))
}

pub fn write_raw_dataset(dir: &Path, recordings: &[RawRecording]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(recordings.len());
    for r in recordings {
        let file = file_name(&r.id)?;
        write_spb(
            &dir.join(&file),
            &EpochFile {
                channels: r.layout.names().to_vec(),
                fs: r.fs,
                epochs: vec![r.data.clone()],
            },
        )?;
        rows.push(ManifestRow {
            recording_id: r.id.clone(),
            file,
            grade: r.grade,
            age: r.age,
            valid: String::new(),
        });
    }
    write_manifest(dir, &rows)
}

pub fn read_raw_dataset(dir: &Path) -> Result<Vec<RawRecording>> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let path = dir.join(&row.file);
            let f = read_spb(&path)?;
            if f.epochs.is_empty() {
                return Err(Error::format(&path, "no samples"));
            }
            let views: Vec<_> = f.epochs.iter().map(|e| e.view()).collect();
            let data = ndarray::concatenate(ndarray::Axis(1), &views).expect("equal channel counts");
            Ok(RawRecording {
                id: row.recording_id,
                layout: Arc::new(ChannelLayout::new(f.channels)?),
                fs: f.fs,
                data,
                grade: row.grade,
                age: row.age,
            })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, recordings: &[Recording]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(recordings.len());
    for r in recordings {
        let file = file_name(&r.id)?;
        write_spb(
            &dir.join(&file),
            &EpochFile {
                channels: r.layout.names().to_vec(),
                fs: r.fs,
                epochs: r.epochs.iter().map(|e| e.data.clone()).collect(),
            },
        )?;
        rows.push(ManifestRow {
            recording_id: r.id.clone(),
            file,
            grade: r.grade,
            age: r.age,
            valid: r.valid_mask.iter().map(|&v| if v { '1' } else { '0' }).collect(),
        });
    }
    write_manifest(dir, &rows)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Recording>> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let path = dir.join(&row.file);
            let f = read_spb(&path)?;
            let layout = Arc::new(ChannelLayout::new(f.channels)?);
            let valid_mask: Vec<bool> = row.valid.chars().map(|c| c == '1').collect();
            if valid_mask.len() != f.epochs.len() {
                return Err(Error::format(
                    dir.join(MANIFEST),
                    format!(
                        "{}: {} validity flags for {} epochs",
                        row.recording_id,
                        valid_mask.len(),
                        f.epochs.len()
                    ),
                ));
            }
            Ok(Recording {
                id: row.recording_id,
                layout: layout.clone(),
                fs: f.fs,
                epochs: f
                    .epochs
                    .into_iter()
                    .map(|data| MultichannelEpoch {
                        layout: layout.clone(),
                        fs: f.fs,
                        data,
                    })
                    .collect(),
                grade: row.grade,
                age: row.age,
                valid_mask,
            })
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

/// Header `encoder_id,recording_id,epoch_index,origin,v0..v{d-1}`.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec![
        "encoder_id".to_string(),
        "recording_id".into(),
        "epoch_index".into(),
        "origin".into(),
    ];
    header.extend((0..set.dim).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for e in &set.embeddings {
        let mut rec = vec![
            set.encoder_id.clone(),
            e.recording_id.clone(),
            e.epoch_index.to_string(),
            e.origin.to_string(),
        ];
        rec.extend(e.vector.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let dim = r.headers().map_err(csv_err(path))?.len().saturating_sub(4);
    let mut set: Option<EmbeddingSet> = None;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", i + 1));
        let set = set.get_or_insert_with(|| EmbeddingSet::new(&rec[0], dim));
        if rec[0] != *set.encoder_id {
            return Err(bad("encoder id (mixed encoders)"));
        }
        let vector = (4..rec.len())
            .map(|j| rec[j].parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        set.push(Embedding {
            vector,
            origin: rec[3].parse()?,
            recording_id: rec[1].to_string(),
            epoch_index: rec[2].parse().map_err(|_| bad("epoch index"))?,
        })?;
    }
    set.ok_or_else(|| Error::format(path, "no embeddings"))
}

/// Header `recording_id,task,repeat,prediction`.
pub fn write_predictions(path: &Path, sets: &[McdPredictionSet]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["recording_id", "task", "repeat", "prediction"])
        .map_err(csv_err(path))?;
    for s in sets {
        for (t, p) in s.predictions.iter().enumerate() {
            w.write_record([s.input_id.clone(), s.task.to_string(), t.to_string(), p.to_string()])
                .map_err(csv_err(path))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<McdPredictionSet>> {
    #[derive(Deserialize)]
    struct Row {
        recording_id: String,
        task: Task,
        repeat: usize,
        prediction: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut sets: Vec<McdPredictionSet> = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(csv_err(path))?;
        let same = sets.last().is_some_and(|s| s.input_id == row.recording_id);
        if !same {
            sets.push(McdPredictionSet {
                input_id: row.recording_id.clone(),
                task: row.task,
                predictions: Vec::new(),
            });
        }
        let s = sets.last_mut().expect("pushed above");
        if row.repeat != s.predictions.len() || row.task != s.task {
            return Err(Error::format(
                path,
                format!("{}: repeats out of order", row.recording_id),
            ));
        }
        s.predictions.push(row.prediction);
    }
    Ok(sets)
}

/// Header `recording_id,mean,var,sd,phi_raw,agreement`; the agreement
/// columns are empty for regression.
pub fn write_prediction_summary(path: &Path, sets: &[McdPredictionSet], tau: f64) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["recording_id", "mean", "var", "sd", "phi_raw", "agreement"])
        .map_err(csv_err(path))?;
    for s in sets {
        let var = mc_var(s);
        let (phi, agr) = match s.task {
            Task::Grade => {
                let a = agreement_index(s, tau)?;
                (a.phi_raw.to_string(), a.agreement.to_string())
            }
            Task::Age => (String::new(), String::new()),
        };
        w.write_record([
            s.input_id.clone(),
            mc_mean(s).to_string(),
            var.to_string(),
            var.sqrt().to_string(),
            phi,
            agr,
        ])
        .map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

/// Header `epoch,train_loss,val_loss,lr`.
pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for h in history {
        w.serialize(h).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|h| h.map_err(csv_err(path))).collect()
}

/// Writes `<prefix>_edges.csv` (`u,v,class`) and `<prefix>_vertices.csv`
/// (`index,origin,recording_id,epoch_index`).
pub fn write_graph(dir: &Path, prefix: &str, graph: &NeighborhoodGraph) -> Result<()> {
    let path = dir.join(format!("{prefix}_edges.csv"));
    let mut w = csv_writer(&path)?;
    w.write_record(["u", "v", "class"]).map_err(csv_err(&path))?;
    for (&(u, v), class) in graph.edges.iter().zip(&graph.classes) {
        w.write_record([u.to_string(), v.to_string(), class.as_str().to_string()])
            .map_err(csv_err(&path))?;
    }
    w.flush()?;
    let path = dir.join(format!("{prefix}_vertices.csv"));
    let mut w = csv_writer(&path)?;
    w.write_record(["index", "origin", "recording_id", "epoch_index"])
        .map_err(csv_err(&path))?;
    for (i, v) in graph.vertices.iter().enumerate() {
        w.write_record([
            i.to_string(),
            v.origin.to_string(),
            v.recording_id.clone(),
            v.epoch_index.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn integrity_jsonl(results: &[IntegrityResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_integrity(path: &Path) -> Result<Vec<IntegrityResult>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
