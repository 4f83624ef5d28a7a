use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shiftprobe::config::{EncoderKind, ExperimentConfig};
use shiftprobe::encoders::{Origin, PsdEncoder};
use shiftprobe::formats::{self, EpochFile};
use shiftprobe::metrics::{self, EvaluationRow};
use shiftprobe::pipeline::{self, Model};
use shiftprobe::shifts::{NoiseKey, ShiftSpec};
use shiftprobe::signal::{Grade, Recording};
use shiftprobe::synth::synth_generate;
use shiftprobe::topology::{integrity_with_graphs, GraphMethod, IntegrityMode};
use shiftprobe::training::Task;
use shiftprobe::{par, Error};

#[derive(Parser)]
#[command(
    name = "shiftprobe",
    version,
    about = "Data-shift robustness diagnostics for multichannel recordings"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "SHIFTPROBE_JOBS")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raw dataset into --out.
    Synth {
        #[arg(long, value_enum, default_value_t = DomainArg::A)]
        domain: DomainArg,
    },
    /// Preprocess a raw dataset directory.
    Preprocess { input: PathBuf, output: PathBuf },
    /// Apply one shift to an SPB1 file or a raw dataset directory.
    Shift {
        #[arg(long)]
        spec: ShiftSpec,
        input: PathBuf,
        output: PathBuf,
    },
    /// Train one model on the train split of a preprocessed dataset; writes
    /// the checkpoint to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: EncoderKind,
        #[arg(long)]
        task: Task,
    },
    /// Embed every valid epoch of a preprocessed dataset into a CSV at --out.
    Encode {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint whose encoder to use; omit for the PSD encoder.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OriginArg::Z)]
        origin: OriginArg,
    },
    /// Score latent-space integrity between two embedding files and print
    /// the summary as a JSON line.
    Integrity {
        #[arg(long)]
        z: PathBuf,
        #[arg(long)]
        zt: PathBuf,
        #[arg(long, default_value = "NONE")]
        shift: ShiftSpec,
        #[arg(long)]
        method: Option<GraphMethod>,
        #[arg(long)]
        mode: Option<IntegrityMode>,
        /// Directory for the edge and vertex lists.
        #[arg(long)]
        graphs: Option<PathBuf>,
    },
    /// Shift and preprocess a raw dataset, run MC dropout on its test split
    /// and print one report row as a JSON line.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "NONE")]
        shift: ShiftSpec,
        /// Dataset label of the row.
        #[arg(long, default_value = pipeline::IN_SAMPLE)]
        dataset: String,
        /// Evaluate every recording rather than the test split.
        #[arg(long)]
        all: bool,
        /// Also write the per-repeat predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Collect report rows (JSON lines) into report.jsonl and report_pivot.csv
    /// under --out.
    Report {
        #[arg(required = true)]
        rows: Vec<PathBuf>,
    },
    /// Run the whole experiment into --out.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum OriginArg {
    Z,
    Zt,
}

/// Errors in what the user asked for, as opposed to in the data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match par::with_jobs(cli.global.jobs, || execute(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(_) => anyhow::Error::new(e).context(format!("reading {}", path.display())),
            other => usage(format!("invalid config {}: {other}", path.display())),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_path(g: &Global, cfg: &ExperimentConfig) -> Result<PathBuf> {
    g.out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| usage("this command needs --out"))
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    match &cli.command {
        Command::Synth { domain } => {
            let spec = match domain {
                DomainArg::A => cfg.synthetic(),
                DomainArg::B => cfg.synthetic_b(),
            }
            .ok_or_else(|| usage("the config has no synthetic source for that domain"))?;
            let out = out_path(g, &cfg)?;
            formats::write_raw_dataset(&out, &synth_generate(&spec)?)?;
            log::info!("wrote {} recordings to {}", spec.n_recordings, out.display());
        }
        Command::Preprocess { input, output } => {
            let raw = formats::read_raw_dataset(input)?;
            let recs = pipeline::shift_and_preprocess(&raw, &ShiftSpec::NoShift, &cfg.preprocess)?;
            formats::write_dataset(output, &recs)?;
        }
        Command::Shift { spec, input, output } => shift_command(spec, input, output)?,
        Command::Train { data, encoder, task } => {
            let recs = formats::read_dataset(data)?;
            let split = split_of(&cfg, &recs)?;
            let (model, history) = pipeline::train_model(
                *encoder,
                *task,
                &pipeline::select(&recs, &split.train),
                &pipeline::select(&recs, &split.val),
                &cfg.train_config(),
            )?;
            let out = out_path(g, &cfg)?;
            model.save(&out, None)?;
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            formats::write_history(&out.with_file_name(format!("{stem}_history.csv")), &history)?;
        }
        Command::Encode { data, model, origin } => {
            let recs = formats::read_dataset(data)?;
            let origin = match origin {
                OriginArg::Z => Origin::Z,
                OriginArg::Zt => Origin::ZShifted,
            };
            let (fs_, samples) = epoch_geometry(&recs)?;
            let model = model.as_ref().map(|p| Model::load(p, fs_, samples)).transpose()?;
            let set = match &model {
                Some((model, _)) => pipeline::encode_recordings(model.encoder().as_ref(), &recs, origin)?,
                None => pipeline::encode_recordings(&PsdEncoder::standard(fs_, samples)?, &recs, origin)?,
            };
            formats::write_embeddings(&out_path(g, &cfg)?, &set)?;
        }
        Command::Integrity {
            z,
            zt,
            shift,
            method,
            mode,
            graphs,
        } => {
            let mut icfg = cfg.integrity_config();
            if let Some(m) = method {
                icfg.method = *m;
            }
            if let Some(m) = mode {
                icfg.mode = *m;
            }
            let (a, b) = (formats::read_embeddings(z)?, formats::read_embeddings(zt)?);
            let (result, gs) = integrity_with_graphs(&a, &b, shift, &icfg)?;
            if let Some(dir) = graphs {
                fs::create_dir_all(dir)?;
                for (k, graph) in gs.iter().enumerate() {
                    let prefix = match gs.len() {
                        1 => pipeline::shift_slug(shift),
                        _ => format!("{}_{k}", pipeline::shift_slug(shift)),
                    };
                    formats::write_graph(dir, &prefix, graph)?;
                }
            }
            print!("{}", formats::integrity_jsonl(&[result])?);
        }
        Command::Evaluate {
            data,
            model,
            shift,
            dataset,
            all,
            predictions,
        } => {
            let raw = formats::read_raw_dataset(data)?;
            let recs = pipeline::shift_and_preprocess(&raw, shift, &cfg.preprocess)?;
            let subset: Vec<&Recording> = if *all {
                recs.iter().collect()
            } else {
                pipeline::select(&recs, &split_of(&cfg, &recs)?.test)
            };
            let (fs_, samples) = epoch_geometry(&recs)?;
            let (model, _) = Model::load(model, fs_, samples)?;
            let mcd = cfg.mcd_config();
            let (row, sets) = pipeline::evaluate_condition(&model, dataset, shift, &subset, &mcd)?;
            if let Some(path) = predictions {
                formats::write_predictions(path, &sets)?;
            }
            print!("{}", metrics::report_jsonl(&[row])?);
        }
        Command::Report { rows } => {
            let mut all: Vec<EvaluationRow> = Vec::new();
            for path in rows {
                all.extend(metrics::read_report(path)?);
            }
            metrics::sort_rows(&mut all);
            let out = out_path(g, &cfg)?;
            fs::create_dir_all(&out)?;
            metrics::emit_report(&all, &out)?;
        }
        Command::Run => {
            let out = out_path(g, &cfg)?;
            let result = pipeline::run(&cfg, &out)?;
            log::info!(
                "{} report rows and {} integrity scores in {}",
                result.rows.len(),
                result.integrity.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn split_of(cfg: &ExperimentConfig, recs: &[Recording]) -> Result<pipeline::Split> {
    let items: Vec<(String, Option<Grade>)> = recs.iter().map(|r| (r.id.clone(), r.grade)).collect();
    Ok(pipeline::split_recordings(&items, &cfg.split, cfg.split_seed())?)
}

fn epoch_geometry(recs: &[Recording]) -> Result<(f64, usize)> {
    recs.iter()
        .flat_map(|r| r.valid_epochs())
        .map(|(_, e)| (e.fs, e.samples()))
        .next()
        .ok_or_else(|| anyhow!("the dataset has no valid epochs"))
}

fn shift_command(spec: &ShiftSpec, input: &Path, output: &Path) -> Result<()> {
    if input.is_dir() {
        let mut raw = formats::read_raw_dataset(input)?;
        for r in &mut raw {
            let key = NoiseKey {
                recording_id: &r.id,
                epoch_index: 0,
            };
            r.data = spec.apply(&r.data, r.fs, key)?;
        }
        formats::write_raw_dataset(output, &raw)?;
        return Ok(());
    }
    let file = formats::read_spb(input)?;
    let id = input
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("{} has no usable file name", input.display()))?;
    let epochs = file
        .epochs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            spec.apply(
                e,
                file.fs,
                NoiseKey {
                    recording_id: id,
                    epoch_index: i as u64,
                },
            )
        })
        .collect::<shiftprobe::Result<Vec<_>>>()?;
    if output.is_dir() {
        bail!("{} is a directory; give an output file", output.display());
    }
    formats::write_spb(output, &EpochFile { epochs, ..file })?;
    Ok(())
}
