use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aerosense::config::RunConfig;
use aerosense::io::{
    attention_export, parse_norm_stats, parse_snapshot, read_messages, read_samples, write_ndjson, write_ndjson_file,
};
use aerosense::model::ModelParams;
use aerosense::simulator::generate_traffic;
use aerosense::snapshot::{chronological_split, make_dataset, time_grid, LabeledSample, MessageIndex};
use aerosense::features::fit_norm_stats;
use aerosense::train::{baseline_persistence, daypart_report, evaluate, evaluate_predictions, fit_model, RegionMetrics};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

/// Environment variable holding the log filter (`error`, `info`, `debug`...).
const LOG_ENV: &str = "AEROSENSE_LOG";

#[derive(Parser)]
#[command(name = "aerosense", version, about = "State-to-flow traffic prediction for terminal airspace")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the simulation, initialization and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate traffic and write ADS-B messages as NDJSON.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build labeled snapshots and write train/val/test splits plus norm.json.
    BuildDataset {
        messages: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes parameters and an NDJSON epoch log next to them.
    Train {
        train: PathBuf,
        val: PathBuf,
        /// Normalization statistics; fitted on the training split when omitted.
        #[arg(long)]
        norm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate on a labeled split; writes metrics.csv and daypart.csv.
    Evaluate {
        model: PathBuf,
        test: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict both regional counts for one snapshot document.
    Predict { model: PathBuf, snapshot: PathBuf },
    /// Write per-head attention matrices and influence scores for one snapshot.
    ExportAttention {
        model: PathBuf,
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<aerosense::Error>() {
            return err.exit_code() as u8;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 3;
        }
    }
    1
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(aerosense::Error::from)
                .with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Simulate { out } => simulate(&cfg, out),
        Command::BuildDataset { messages, out } => build_dataset(&cfg, messages, out),
        Command::Train { train, val, norm, out } => train_cmd(&cfg, train, val, norm.as_deref(), out),
        Command::Evaluate { model, test, out } => evaluate_cmd(&cfg, model, test, out),
        Command::Predict { model, snapshot } => predict(&cfg, model, snapshot),
        Command::ExportAttention { model, snapshot, out } => export_attention(&cfg, model, snapshot, out),
    }
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let msgs = generate_traffic(&cfg.simulation, &cfg.airspace)?;
    write_ndjson_file(out, &msgs).with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote {} messages to {}", msgs.len(), out.display());
    Ok(())
}

fn build_dataset(cfg: &RunConfig, messages: &Path, out: &Path) -> Result<()> {
    let msgs = read_messages(messages).with_context(|| format!("reading {}", messages.display()))?;
    let (first, last) = MessageIndex::new(&msgs)
        .coverage()
        .ok_or_else(|| aerosense::Error::Data("message file holds no messages".into()))?;
    let d = &cfg.dataset;
    let grid = time_grid(first.ceil(), last - d.horizon_s, d.cadence_s);
    let samples = make_dataset(&msgs, &grid, d.spec(), &cfg.airspace, None)?;
    let (tr, va, te) = chronological_split(samples, d.split)?;
    let norm = fit_norm_stats(&tr)?;
    fs::create_dir_all(out).map_err(aerosense::Error::from)?;
    for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
        write_ndjson_file(&out.join(format!("{name}.ndjson")), part)?;
    }
    fs::write(out.join("norm.json"), serde_json::to_string_pretty(&norm)?).map_err(aerosense::Error::from)?;
    log::info!("samples: {} train, {} val, {} test", tr.len(), va.len(), te.len());
    Ok(())
}

fn read_split(path: &Path) -> Result<Vec<LabeledSample>> {
    read_samples(path).with_context(|| format!("reading {}", path.display()))
}

fn log_path(model_out: &Path) -> PathBuf {
    let mut name = model_out.file_stem().unwrap_or_default().to_os_string();
    name.push(".log.ndjson");
    model_out.with_file_name(name)
}

fn train_cmd(cfg: &RunConfig, train: &Path, val: &Path, norm: Option<&Path>, out: &Path) -> Result<()> {
    let (tr, va) = (read_split(train)?, read_split(val)?);
    let norm = match norm {
        Some(p) => Some(parse_norm_stats(&fs::read_to_string(p).map_err(aerosense::Error::from)?)?),
        None => None,
    };
    let outcome = fit_model(&cfg.model, &cfg.train, &tr, &va, &cfg.airspace, norm)?;
    outcome.params.save(out, Some(&cfg.train))?;
    write_ndjson_file(&log_path(out), &outcome.log)?;
    log::info!("best epoch {} val loss {:.6}", outcome.best_epoch, outcome.best_val_loss);
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelParams> {
    Ok(ModelParams::load(path).with_context(|| format!("loading {}", path.display()))?.0)
}

#[derive(Serialize)]
struct MetricRow<'a> {
    model: &'a str,
    region: &'a str,
    mae: f64,
    rmse: f64,
    r2: f64,
}

fn metric_rows<'a>(model: &'a str, m: &RegionMetrics) -> [MetricRow<'a>; 2] {
    [
        MetricRow { model, region: "AP", mae: m.ap.mae, rmse: m.ap.rmse, r2: m.ap.r2 },
        MetricRow { model, region: "AR", mae: m.ar.mae, rmse: m.ar.rmse, r2: m.ar.r2 },
    ]
}

fn evaluate_cmd(cfg: &RunConfig, model: &Path, test: &Path, out: &Path) -> Result<()> {
    let params = load_model(model)?;
    let samples = read_split(test)?;
    let encoded = params.encode_samples(&samples, &cfg.airspace)?;
    let (preds, m) = evaluate(&params, &encoded)?;
    let labels: Vec<[f64; 2]> = samples.iter().map(LabeledSample::labels).collect();
    let persistence = evaluate_predictions(&baseline_persistence(&samples, &cfg.airspace), &labels)?;

    fs::create_dir_all(out).map_err(aerosense::Error::from)?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    for row in metric_rows("aerosense", &m).iter().chain(&metric_rows("persistence", &persistence)) {
        w.serialize(row)?;
    }
    w.flush()?;

    let times: Vec<f64> = samples.iter().map(LabeledSample::t).collect();
    let mut w = csv::Writer::from_path(out.join("daypart.csv"))?;
    for bin in daypart_report(&times, &preds, &labels) {
        w.serialize(bin)?;
    }
    w.flush()?;
    println!("AP mae {:.4} rmse {:.4} r2 {:.4}", m.ap.mae, m.ap.rmse, m.ap.r2);
    println!("AR mae {:.4} rmse {:.4} r2 {:.4}", m.ar.mae, m.ar.rmse, m.ar.r2);
    Ok(())
}

fn read_snapshot(path: &Path) -> Result<aerosense::snapshot::Snapshot> {
    let text = fs::read_to_string(path).map_err(aerosense::Error::from)?;
    parse_snapshot(&text).with_context(|| format!("parsing {}", path.display()))
}

fn predict(cfg: &RunConfig, model: &Path, snapshot: &Path) -> Result<()> {
    let params = load_model(model)?;
    let snap = read_snapshot(snapshot)?;
    let sample = params.encode(&snap, [0.0, 0.0], &cfg.airspace)?;
    let p = params.predict_encoded(&[sample], 1)?[0];
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    writeln!(w, "{}", serde_json::json!({ "t": snap.t, "y_ap_hat": p.y_ap_hat, "y_ar_hat": p.y_ar_hat }))?;
    Ok(())
}

fn export_attention(cfg: &RunConfig, model: &Path, snapshot: &Path, out: &Path) -> Result<()> {
    let params = load_model(model)?;
    let snap = read_snapshot(snapshot)?;
    let export = attention_export(&params, &snap, &cfg.airspace)?;
    let file = fs::File::create(out).map_err(aerosense::Error::from)?;
    write_ndjson(BufWriter::new(file), std::slice::from_ref(&export))?;
    Ok(())
}
