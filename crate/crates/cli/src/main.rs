use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ircount::baseline::{evaluate_folds, BaselineConfig};
use ircount::dataset::{load_sessions, make_folds, write_sessions, Fold, SessionRecord, WindowSet};
use ircount::explorer::{
    load_records, run_grid, train_on_fold, Axis, ExploreConfig, ExtractorRule,
};
use ircount::metrics::{write_metrics_csv, FoldMetrics};
use ircount::modelfile::{config_digest, ModelFile, Payload, Provenance};
use ircount::quant::export_int8;
use ircount::report::{markdown_report, scatter_csv, scatter_svg};
use ircount::synth::{generate, SynthConfig};
use ircount::trainer::{evaluate, evaluate_int, TrainConfig, TrainHistory};
use ircount::zoo::{Family, GridConfig, ModelSpec, Preset};

#[derive(Parser)]
#[command(
    name = "ircount",
    version,
    about = "People counting on 8x8 infrared frames"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV (session,frame_idx,label,confidence,p00..p77).
    #[arg(long, env = "IRCOUNT_DATA")]
    data: PathBuf,
    /// Keep frames flagged as low-confidence.
    #[arg(long)]
    keep_low_confidence: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<SessionRecord>> {
        load_sessions(&self.data, !self.keep_low_confidence)
            .with_context(|| format!("loading {}", self.data.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one architecture on one cross-validation fold.
    Train {
        #[arg(long)]
        arch: String,
        /// Test session of the fold.
        #[arg(long)]
        fold: u32,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue with quantization-aware training and save the int8 model.
        #[arg(long)]
        qat: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Grid exploration over model families.
    Explore {
        /// Comma-separated families or `all`.
        #[arg(long, default_value = "all")]
        families: String,
        #[arg(long, default_value = "full")]
        preset: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fronts supplying feature extractors: macs, params or union.
        #[arg(long, default_value = "union")]
        extractors: String,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Skip the int8 twins.
        #[arg(long)]
        float_only: bool,
        /// Comma-separated window sizes for the multi-frame families.
        #[arg(long)]
        windows: Option<String>,
        /// Comma-separated conv channel choices.
        #[arg(long)]
        channels: Option<String>,
        /// Comma-separated head sizes (cat hidden, LSTM hidden, TCN channels).
        #[arg(long)]
        heads: Option<String>,
    },
    /// Pareto tables, scatter CSV and SVG from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "macs")]
        axis: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate saved models, each on the test session of its training fold.
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the deterministic baseline on every fold's test session.
    Baseline {
        /// `key = value` configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated test sessions (default: all folds).
        #[arg(long)]
        folds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset in the dataset CSV format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        sessions: u32,
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("invalid {what} '{}'", t.trim()))
        })
        .collect()
}

fn find_fold(sessions: &[SessionRecord], test: u32) -> Result<Fold> {
    let folds = make_folds(sessions)?;
    match folds.iter().find(|f| f.test_session == test) {
        Some(f) => Ok(f.clone()),
        None => bail!(
            "fold {test} does not exist (test sessions: {:?})",
            folds.iter().map(|f| f.test_session).collect::<Vec<_>>()
        ),
    }
}

fn test_windows(sessions: &[SessionRecord], file: &ModelFile) -> Result<WindowSet> {
    let mut set = WindowSet::new(file.spec().window)?;
    for s in sessions
        .iter()
        .filter(|s| s.session_id == file.provenance.fold)
    {
        set.extend_session(s, &file.norm);
    }
    if set.is_empty() {
        bail!("test session {} has no samples", file.provenance.fold);
    }
    Ok(set)
}

fn evaluate_file(sessions: &[SessionRecord], file: &ModelFile) -> Result<FoldMetrics> {
    let test = test_windows(sessions, file)?;
    Ok(match &file.payload {
        Payload::Float(m) => evaluate(m, &test)?,
        Payload::Int8(q) => evaluate_int(q, &test)?,
    })
}

fn write_history(path: &Path, phases: &[(&str, &TrainHistory)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["phase", "epoch", "loss", "lr"])?;
    for (phase, h) in phases {
        for (i, (l, lr)) in h.losses.iter().zip(&h.lrs).enumerate() {
            w.write_record([
                phase.to_string(),
                i.to_string(),
                l.to_string(),
                lr.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(path: &Path, folds: &[(u32, FoldMetrics)], digest: &str) -> Result<()> {
    let f =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_metrics_csv(f, folds, digest)?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn with_epochs(mut cfg: TrainConfig, max_epochs: Option<usize>) -> TrainConfig {
    if let Some(e) = max_epochs {
        cfg.max_epochs = e;
    }
    cfg
}

fn cmd_train(
    arch: &str,
    fold: u32,
    data: &DataArgs,
    seed: u64,
    qat: bool,
    out: &Path,
    max_epochs: Option<usize>,
) -> Result<()> {
    let spec = ModelSpec::parse(arch)?;
    if qat && !spec.family.supports_int8() {
        return Err(ircount::Error::QuantUnsupported(spec.family.to_string()).into());
    }
    let sessions = data.load()?;
    let fold = find_fold(&sessions, fold)?;
    let float_cfg = with_epochs(TrainConfig::float(), max_epochs);
    let qat_cfg = with_epochs(TrainConfig::qat(), max_epochs);
    let digest = config_digest(&format!(
        "train;spec={spec};fold={};seed={seed};qat={qat};float[{}];qat[{}]",
        fold.test_session,
        float_cfg.canonical(),
        qat_cfg.canonical()
    ));
    let t = train_on_fold(
        &spec,
        &sessions,
        &fold,
        seed,
        &float_cfg,
        qat.then_some(&qat_cfg),
    )?;
    let provenance = Provenance {
        seed,
        fold: fold.test_session,
        config_digest: digest.clone(),
    };
    let (payload, phases) = match t.qat {
        Some(q) => {
            let (m, h) = q?;
            (
                Payload::Int8(export_int8(&m)?),
                vec![("float", t.float_history.clone()), ("qat", h)],
            )
        }
        None => (
            Payload::Float(t.float),
            vec![("float", t.float_history.clone())],
        ),
    };
    let file = ModelFile {
        provenance,
        norm: t.norm,
        payload,
    };
    let metrics = evaluate_file(&sessions, &file)?;
    file.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let phases: Vec<(&str, &TrainHistory)> = phases.iter().map(|(p, h)| (*p, h)).collect();
    write_history(&sibling(out, "history.csv"), &phases)?;
    write_metrics(
        &sibling(out, "metrics.csv"),
        &[(fold.test_session, metrics)],
        &digest,
    )?;
    println!(
        "{spec} fold {}: bal_acc {:.4}, acc {:.4} ({})",
        fold.test_session,
        metrics.bal_acc,
        metrics.acc,
        file.precision()
    );
    Ok(())
}

fn parse_families(text: &str) -> Result<Vec<Family>> {
    if text == "all" {
        return Ok(Family::ALL.to_vec());
    }
    Ok(text
        .split(',')
        .map(|t| t.trim().parse::<Family>())
        .collect::<ircount::Result<_>>()?)
}

fn cmd_report(results: &Path, axis: &str, out_dir: &Path) -> Result<()> {
    let axis: Axis = axis.parse()?;
    let records =
        load_records(results).with_context(|| format!("reading {}", results.display()))?;
    if records.is_empty() {
        bail!("{} has no records", results.display());
    }
    let bytes = std::fs::read(results)?;
    let digest = config_digest(&format!(
        "report;axis={};results={}",
        axis.name(),
        config_digest(&String::from_utf8_lossy(&bytes))
    ));
    std::fs::create_dir_all(out_dir)?;
    let name = axis.name();
    std::fs::write(
        out_dir.join(format!("report_{name}.md")),
        markdown_report(&records, axis, &digest)?,
    )?;
    std::fs::write(
        out_dir.join(format!("scatter_{name}.csv")),
        scatter_csv(&records, axis, &digest)?,
    )?;
    std::fs::write(
        out_dir.join(format!("pareto_{name}.svg")),
        scatter_svg(&records, axis, &digest)?,
    )?;
    println!("report written to {}", out_dir.display());
    Ok(())
}

fn cmd_eval(models: &[PathBuf], data: &DataArgs, out: &Path) -> Result<()> {
    let sessions = data.load()?;
    let mut rows = Vec::new();
    let mut digests = Vec::new();
    for path in models {
        let file = ModelFile::load(path).with_context(|| format!("loading {}", path.display()))?;
        rows.push((file.provenance.fold, evaluate_file(&sessions, &file)?));
        digests.push(file.provenance.config_digest.clone());
    }
    let digest = if digests.len() == 1 {
        digests.remove(0)
    } else {
        config_digest(&format!("eval;{}", digests.join(",")))
    };
    write_metrics(out, &rows, &digest)?;
    println!("{} model(s) evaluated", rows.len());
    Ok(())
}

fn cmd_baseline(
    config: Option<&Path>,
    data: &DataArgs,
    folds: Option<&str>,
    out: &Path,
) -> Result<()> {
    let cfg = match config {
        Some(p) => BaselineConfig::parse(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => BaselineConfig::default(),
    };
    let sessions = data.load()?;
    let mut all = make_folds(&sessions)?;
    if let Some(list) = folds {
        let wanted: Vec<u32> = parse_list(list, "fold")?;
        for w in &wanted {
            if !all.iter().any(|f| f.test_session == *w) {
                bail!("fold {w} does not exist");
            }
        }
        all.retain(|f| wanted.contains(&f.test_session));
    }
    let rows = evaluate_folds(&sessions, &all, &cfg)?;
    write_metrics(
        out,
        &rows,
        &config_digest(&format!("baseline;{}", cfg.to_text())),
    )?;
    println!("baseline evaluated on {} fold(s)", rows.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            arch,
            fold,
            data,
            seed,
            qat,
            out,
            max_epochs,
        } => cmd_train(&arch, fold, &data, seed, qat, &out, max_epochs),
        Command::Explore {
            families,
            preset,
            data,
            jobs,
            out,
            seed,
            extractors,
            max_epochs,
            float_only,
            windows,
            channels,
            heads,
        } => {
            let families = parse_families(&families)?;
            let mut grid = GridConfig {
                preset: preset.parse::<Preset>()?,
                ..GridConfig::default()
            };
            if let Some(w) = windows {
                grid.windows = parse_list(&w, "window")?;
            }
            if let Some(c) = channels {
                grid.channels = parse_list(&c, "channel count")?;
            }
            if let Some(h) = heads {
                grid.heads = parse_list(&h, "head size")?;
            }
            let cfg = ExploreConfig {
                master_seed: seed,
                jobs,
                grid,
                float: with_epochs(TrainConfig::float(), max_epochs),
                qat: with_epochs(TrainConfig::qat(), max_epochs),
                quantize: !float_only,
                rule: extractors.parse::<ExtractorRule>()?,
            };
            let sessions = data.load()?;
            let records = run_grid(&families, &sessions, &cfg, Some(&out))?;
            let failed = records.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} records ({failed} failed) in {}",
                records.len(),
                out.display()
            );
            Ok(())
        }
        Command::Report {
            results,
            axis,
            out_dir,
        } => cmd_report(&results, &axis, &out_dir),
        Command::Eval { models, data, out } => cmd_eval(&models, &data, &out),
        Command::Baseline {
            config,
            data,
            folds,
            out,
        } => cmd_baseline(config.as_deref(), &data, folds.as_deref(), &out),
        Command::Synth {
            out,
            sessions,
            frames,
            seed,
        } => {
            let data = generate(&SynthConfig {
                sessions,
                frames_per_session: frames,
                seed,
                ..SynthConfig::default()
            });
            write_sessions(BufWriter::new(File::create(&out)?), &data)?;
            println!("{} sessions written to {}", data.len(), out.display());
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
