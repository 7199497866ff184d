//! The `mdvit` command line: one subcommand per pipeline stage.

pub mod config;
pub mod error;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdvit::dsp;
use mdvit::formats::{encode_gray_png, encode_rgb_png, load_iq, load_spectrogram, save_iq, save_spectrogram, to_u8, write_bytes};
use mdvit::iqsim::{add_noise_relative, simulate_rotor_iq, ClassId, IQRecord};
use mdvit::mdtcwt::{denoise_with, DenoiseOptions};
use mdvit::rng::{derive_seed, RNG_ALGORITHM};
use mdvit::train::{self, DatasetSpec, ManifestSamples, Split, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT, MANIFEST_FILE};
use mdvit::vit::{count_macs, count_params, forward_compact, load_checkpoint, pad_and_mask, raw_attention_map, Mode, MAC_CONVENTION};

use crate::config::{parse_assignment, parse_value, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{compare, digest_outputs, RunManifest};

/// Overlay colour for full attention; the spectrogram supplies the grey.
pub const OVERLAY_RGB: [f64; 3] = [255.0, 64.0, 0.0];

#[derive(Parser, Debug)]
#[command(name = "mdvit", version, about = "Micro-Doppler rotorcraft pipeline: simulate, denoise, render, train, classify")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat-key TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Top-level seed (required by simulate, dataset and train).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Thread count recorded in the run manifest. Defaults to RUN_THREADS or 1.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override any config key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run manifest path (default: next to or inside the primary output).
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Re-run and compare outputs with the digests in an existing manifest
    /// instead of recording new ones.
    #[arg(long, global = true)]
    pub check: bool,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Simulate one rotor IQ record (MDIQ).
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Rotor class (sim.class_id).
        #[arg(long)]
        class: Option<String>,
        /// CPI length in pulses (cpi.n_pulses).
        #[arg(long)]
        pulses: Option<usize>,
        /// Noise level against the rotor power, `inf` for none (sim.snr_db).
        #[arg(long)]
        snr_db: Option<String>,
    },
    /// Highpass (if dsp.highpass) and mDTCWT-denoise an MDIQ record.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clean reference; SNR before and after is printed as JSON.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Render an MDIQ record to an MDSP spectrogram.
    Spectrogram {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write an 8-bit greyscale PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Generate a synthetic dataset directory with manifest.jsonl.
    Dataset {
        #[arg(long)]
        out: PathBuf,
        /// Number of records (dataset.total).
        #[arg(long)]
        total: Option<usize>,
    },
    /// Train on a dataset directory; writes history and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint holding optimizer state (last.mdvt).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch count (train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split; writes metrics JSON and a
    /// confusion table next to it (.txt).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Raw attention heatmap of a spectrogram as greyscale PNG. The overlay
    /// blends each pixel as (1 - a) * grey + a * (255, 64, 0), where a is
    /// the normalized attention.
    Attend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// MDSP spectrogram.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Parameter and MAC report for the configured model.
    Info {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Denoise { .. } => "denoise",
            Command::Spectrogram { .. } => "spectrogram",
            Command::Dataset { .. } => "dataset",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Attend { .. } => "attend",
            Command::Info { .. } => "info",
        }
    }

    /// Config keys set by dedicated flags.
    fn overrides(&self) -> Vec<(String, toml::Value)> {
        let mut v = Vec::new();
        match self {
            Command::Simulate { class, pulses, snr_db, .. } => {
                if let Some(c) = class {
                    v.push(("sim.class_id".into(), toml::Value::String(c.clone())));
                }
                if let Some(p) = pulses {
                    v.push(("cpi.n_pulses".into(), toml::Value::Integer(*p as i64)));
                }
                if let Some(s) = snr_db {
                    v.push(("sim.snr_db".into(), parse_value(s)));
                }
            }
            Command::Dataset { total: Some(t), .. } => v.push(("dataset.total".into(), toml::Value::Integer(*t as i64))),
            Command::Train { epochs: Some(e), .. } => v.push(("train.epochs".into(), toml::Value::Integer(*e as i64))),
            _ => {}
        }
        v
    }

    /// Files or directories this command creates.
    fn outputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Simulate { out, .. } | Command::Denoise { out, .. } => vec![out.clone()],
            Command::Spectrogram { out, png, .. } => std::iter::once(out.clone()).chain(png.clone()).collect(),
            Command::Dataset { out, .. } => vec![out.join(MANIFEST_FILE), out.join("spectrograms")],
            Command::Train { out, .. } => vec![out.join(HISTORY_FILE), out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT)],
            Command::Eval { out, .. } => vec![out.clone(), table_path(out)],
            Command::Attend { out, overlay, .. } => std::iter::once(out.clone()).chain(overlay.clone()).collect(),
            Command::Info { out } => out.iter().cloned().collect(),
        }
    }

    fn default_manifest(&self) -> Option<PathBuf> {
        match self {
            Command::Dataset { out, .. } | Command::Train { out, .. } => Some(out.join("run.json")),
            Command::Info { out: None } => None,
            _ => self.outputs().first().map(|p| sidecar(p, "run.json")),
        }
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn table_path(out: &Path) -> PathBuf {
    out.with_extension("txt")
}

/// Process entry point minus the exit: returns what to print on stdout.
pub fn run(argv: &[String]) -> CliResult<String> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                return Ok(e.to_string());
            }
            let first = e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string();
            return Err(CliError::Usage(first));
        }
    };
    execute(&cli, argv)
}

fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    let env_threads = std::env::var("RUN_THREADS").ok();
    if let Some(t) = &env_threads {
        let n: usize = t.trim().parse().map_err(|_| CliError::Usage(format!("RUN_THREADS must be a positive integer, got {t:?}")))?;
        overrides.push(("threads".to_string(), toml::Value::Integer(n as i64)));
    }
    for s in &cli.common.set {
        overrides.push(parse_assignment(s)?);
    }
    overrides.extend(cli.command.overrides());
    if let Some(seed) = cli.common.seed {
        overrides.push(("seed".into(), toml::Value::Integer(seed as i64)));
    }
    if let Some(t) = cli.common.threads {
        overrides.push(("threads".into(), toml::Value::Integer(t as i64)));
    }
    config::load(cli.common.config.as_deref(), &overrides)
}

fn execute(cli: &Cli, argv: &[String]) -> CliResult<String> {
    let cfg = effective_config(cli)?;
    let cmd = &cli.command;
    if matches!(cmd, Command::Simulate { .. } | Command::Dataset { .. } | Command::Train { .. }) {
        cfg.require_seed()?;
    }
    let manifest_path = cli.common.manifest.clone().or_else(|| cmd.default_manifest());
    let recorded = if cli.common.check {
        let path = manifest_path.as_ref().ok_or_else(|| CliError::Usage("--check needs a manifest (--manifest PATH)".into()))?;
        Some(RunManifest::read(path)?)
    } else {
        None
    };
    let outputs = cmd.outputs();
    let preexisting: Vec<bool> = outputs.iter().map(|p| p.exists()).collect();

    let mut manifest = RunManifest {
        tool: "mdvit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.name().into(),
        argv: argv.iter().skip(1).cloned().collect(),
        config: cfg.effective_text()?.lines().map(String::from).collect(),
        threads: cfg.threads,
        run_threads_env: std::env::var("RUN_THREADS").ok(),
        rng: RNG_ALGORITHM.into(),
        status: "running".into(),
        outputs: BTreeMap::new(),
    };
    if recorded.is_none() {
        if let Some(p) = &manifest_path {
            manifest.write(p)?;
        }
    }

    let result = dispatch(cmd, &cfg);
    let stdout = match result {
        Ok(s) => s,
        Err(e) => {
            for (p, existed) in outputs.iter().zip(preexisting) {
                if !existed {
                    let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
                }
            }
            return Err(e);
        }
    };

    let digests = digest_outputs(&outputs)?;
    match recorded {
        Some(rec) => {
            if let Some(diff) = compare(&rec.outputs, &digests) {
                return Err(CliError::Check(diff));
            }
            Ok(stdout + &format!("check: {} outputs match\n", digests.len()))
        }
        None => {
            manifest.outputs = digests;
            manifest.status = "complete".into();
            if let Some(p) = &manifest_path {
                manifest.write(p)?;
            }
            Ok(stdout)
        }
    }
}

fn process(iq: &IQRecord, cfg: &RunConfig) -> CliResult<IQRecord> {
    let filtered = if cfg.dsp.highpass { dsp::highpass(iq, cfg.dsp.cutoff_hz)? } else { iq.clone() };
    Ok(denoise_with(&filtered, DenoiseOptions { levels: cfg.dsp.levels, rule: cfg.dsp.rule })?)
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> CliResult<String> {
    match cmd {
        Command::Simulate { out, .. } => {
            let seed = cfg.require_seed()?;
            let clean = simulate_rotor_iq(&cfg.rotor, &cfg.cpi, derive_seed(seed, 0))?;
            let reference = clean.meta.rotor_power.unwrap_or_else(|| clean.mean_power());
            let iq = add_noise_relative(&clean, cfg.sim.snr_db, reference, derive_seed(seed, 1))?;
            save_iq(out, &iq)?;
            Ok(format!("{}\n", serde_json::json!({ "pulses": iq.n_pulses(), "flashes": iq.meta.flash_times_s.len() })))
        }
        Command::Denoise { input, out, clean } => {
            let iq = load_iq(input)?;
            let den = process(&iq, cfg)?;
            save_iq(out, &den)?;
            match clean {
                None => Ok(String::new()),
                Some(c) => {
                    let reference = load_iq(c)?;
                    let reference = if cfg.dsp.highpass { dsp::highpass(&reference, cfg.dsp.cutoff_hz)? } else { reference };
                    let before = dsp::snr_db(&reference, &if cfg.dsp.highpass { dsp::highpass(&iq, cfg.dsp.cutoff_hz)? } else { iq })?;
                    let after = dsp::snr_db(&reference, &den)?;
                    Ok(format!("{}\n", serde_json::json!({ "snr_before_db": before, "snr_after_db": after })))
                }
            }
        }
        Command::Spectrogram { input, out, png } => {
            let img = dsp::spectrogram(&load_iq(input)?)?;
            save_spectrogram(out, &img)?;
            if let Some(p) = png {
                write_bytes(p, &encode_gray_png(&img.gray, img.width, img.height)?)?;
            }
            Ok(format!("{}\n", serde_json::json!({ "height": img.height, "width": img.width })))
        }
        Command::Dataset { out, .. } => {
            let spec = DatasetSpec { total: cfg.dataset.total, snr_db: (cfg.dataset.snr_min_db, cfg.dataset.snr_max_db), seed: cfg.require_seed()? };
            let rows = train::build_dataset(&spec, out)?;
            let counts = |s: Split| rows.iter().filter(|r| r.split == s).count();
            Ok(format!(
                "{}\n",
                serde_json::json!({ "rows": rows.len(), "train": counts(Split::Train), "val": counts(Split::Val), "test": counts(Split::Test) })
            ))
        }
        Command::Train { data, out, resume, .. } => {
            let rows = train::read_manifest(&data.join(MANIFEST_FILE))?;
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            let model = resume.as_ref().map_or(&cfg.vit, |c| &c.config);
            let tr = ManifestSamples::new(data, &rows, Split::Train, model);
            let va = ManifestSamples::new(data, &rows, Split::Val, model);
            let outcome = train::train(&tr, &va, &cfg.vit, &cfg.train, out, resume.as_ref())?;
            let last = outcome.history.last().map(serde_json::to_value).transpose()?;
            Ok(format!("{}\n", serde_json::json!({ "epochs": outcome.history.len(), "best_val_acc": outcome.best.meta.val_acc, "last": last })))
        }
        Command::Eval { checkpoint, data, split, out } => {
            let split: Split = split.parse()?;
            let ck = load_checkpoint(checkpoint)?;
            let rows = train::read_manifest(&data.join(MANIFEST_FILE))?;
            let samples = ManifestSamples::new(data, &rows, split, &ck.config);
            let metrics = train::evaluate(&ck.params, &ck.config, &samples)?;
            let names: Vec<&str> = (0..ck.config.n_classes).map(|i| ClassId::from_index(i).map_or("?", |c| c.name())).collect();
            let table = metrics.confusion_table(&names);
            write_bytes(out, (serde_json::to_string_pretty(&metrics)? + "\n").as_bytes())?;
            write_bytes(&table_path(out), table.as_bytes())?;
            Ok(format!("accuracy {:.4} on {} {} samples\n{table}", metrics.accuracy, metrics.samples, split.name()))
        }
        Command::Attend { checkpoint, input, out, overlay } => {
            let ck = load_checkpoint(checkpoint)?;
            let img = load_spectrogram(input)?;
            let x = pad_and_mask(&img, &ck.config)?;
            let res = forward_compact(&x, &ck.params, &ck.config, Mode::Eval, 0, true)?;
            let attn = res.attention.as_ref().ok_or_else(|| CliError::Lib(mdvit::Error::Invalid("no attention recorded".into())))?;
            let heat = raw_attention_map(attn, &x)?;
            write_bytes(out, &encode_gray_png(&heat.data, heat.width, heat.height)?)?;
            if let Some(p) = overlay {
                let rgb: Vec<u8> = img
                    .gray
                    .iter()
                    .zip(&heat.data)
                    .flat_map(|(&g, &a)| {
                        let (g, a) = (to_u8(g) as f64, a.clamp(0.0, 1.0) as f64);
                        OVERLAY_RGB.map(|c| ((1.0 - a) * g + a * c).round() as u8)
                    })
                    .collect();
                write_bytes(p, &encode_rgb_png(&rgb, img.width, img.height)?)?;
            }
            let predicted = res.predicted();
            let name = ClassId::from_index(predicted).map_or("?".to_string(), |c| c.name().to_string());
            Ok(format!("{}\n", serde_json::json!({ "predicted": predicted, "class": name })))
        }
        Command::Info { out } => {
            let v = &cfg.vit;
            let report = serde_json::json!({
                "model": cfg.model,
                "config": v,
                "seq_len": v.seq_len(),
                "params": count_params(v),
                "macs": count_macs(v),
                "mac_convention": MAC_CONVENTION,
            });
            let text = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(p) = out {
                write_bytes(p, text.as_bytes())?;
            }
            Ok(text)
        }
    }
}
