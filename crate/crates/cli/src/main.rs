//! `tripool` command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use tripool::bench::{
    bench_csv, desk_bench_config, full_scale_config, run_bench, BenchMode, Lengths, FULL_SCALE_LENGTHS,
};
use tripool::checks::{gradcheck_suite, report_table};
use tripool::config::{DataShape, RunConfig};
use tripool::dump::write_maps;
use tripool::numerics::{Fault, Tape};
use tripool::pooling::PassTag;
use tripool::synth::{generate, read_dataset, read_manifest, write_dataset, Dataset, SynthSpec};
use tripool::train::{evaluate, log_csv, train, FeaturizedDataset, Featurizer};
use tripool::{variant, Model, ModelConfig, VariantRegistry};

const CHECKPOINT: &str = "checkpoint.bin";
const TRAIN_LOG: &str = "train_log.csv";
const RESOLVED_CONFIG: &str = "config.json";

#[derive(Parser)]
#[command(name = "tripool", version, about = "Tri-modal token pooling transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// JSON dataset spec; omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes a checkpoint, a per-epoch log and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-class and average metrics on one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Omit to evaluate the freshly initialised model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the tiny end-to-end model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// FLOP, time or memory comparison of variants over a list of K.
    Bench {
        #[arg(long, value_enum, default_value_t = Mode::Flops)]
        mode: Mode,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        k: Vec<usize>,
        /// `Q,M,N_text`.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_value = "full,no_attention")]
        variant: Vec<String>,
        /// d=768, 12 heads, 12 layers instead of the desk scale.
        #[arg(long, alias = "paper-scale")]
        full_scale: bool,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the attention maps of one sample as CSV and PGM.
    AttnDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Flops,
    Time,
    Memory,
}

enum Failure {
    Check(String),
    Input(String),
}

impl From<tripool::Error> for Failure {
    fn from(e: tripool::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            variant,
            dataset,
            output,
            epochs,
            seed,
        } => cmd_train(&config, variant, dataset, output, epochs, seed),
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => cmd_eval(&config, checkpoint.as_deref(), &split, out.as_deref()),
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(seed, inject_fault),
        Command::Bench {
            mode,
            k,
            lengths,
            variant,
            full_scale,
            runs,
            seed,
            out,
        } => cmd_bench(mode, &k, lengths, &variant, full_scale, runs, seed, out.as_deref()),
        Command::AttnDump {
            config,
            checkpoint,
            split,
            sample,
            out,
        } => cmd_attn_dump(&config, &checkpoint, &split, sample, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let dataset = generate(&spec)?;
    let manifest = write_dataset(&dataset, out)?;
    println!(
        "wrote {} train, {} valid, {} test samples to {}",
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
        out.display()
    );
    println!("manifest sha256 {}", hex(&Sha256::digest(&manifest)));
    Ok(())
}

/// Config, dataset shape and model config, all validated before any data
/// is loaded.
fn prepare(config: &RunConfig) -> Result<ModelConfig, Failure> {
    config.validate()?;
    let manifest = read_manifest(&config.dataset)?;
    let shape = DataShape::from_synth(&manifest.spec, config.acoustic_patches)?;
    Ok(config.model_config(shape)?)
}

fn build_model(config: &RunConfig, model_config: ModelConfig) -> Result<Model<f32>, Failure> {
    Ok(Model::new(model_config, variant::<f32>(&config.variant)?, config.seed)?)
}

fn cmd_train(
    path: &Path,
    variant_name: Option<String>,
    dataset: Option<PathBuf>,
    output: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> CliResult {
    let mut config = RunConfig::load(path)?;
    if let Some(v) = variant_name {
        config.variant = v;
    }
    if let Some(d) = dataset {
        config.dataset = d;
    }
    if let Some(o) = output {
        config.output = o;
    }
    if let Some(e) = epochs {
        config.training.epochs = e;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let model_config = prepare(&config)?;
    let data = FeaturizedDataset::new(&read_dataset(&config.dataset)?, config.acoustic_patches)?;
    let mut model = build_model(&config, model_config)?;
    let logs = train(&mut model, &data.train, &data.valid, &config.training, config.seed)?;

    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
    model.params.write_checkpoint(&out.join(CHECKPOINT))?;
    let log_path = out.join(TRAIN_LOG);
    fs::write(&log_path, log_csv(&logs)).map_err(|e| Failure::Input(format!("{}: {e}", log_path.display())))?;
    config.save(&out.join(RESOLVED_CONFIG))?;
    if let Some(last) = logs.last() {
        println!(
            "variant {} epochs {} final train loss {:.6} valid accuracy {:.4} valid f1 {:.4} pool flops {}",
            config.variant, last.epoch, last.train_loss, last.valid_accuracy, last.valid_f1, last.pool_flops
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_split(config: &RunConfig, split: &str) -> Result<(Dataset, Vec<tripool::train::FeaturizedSample>), Failure> {
    let dataset = read_dataset(&config.dataset)?;
    let samples = Featurizer::new(&dataset.spec, config.acoustic_patches)?.featurize_all(dataset.split(split)?)?;
    Ok((dataset, samples))
}

fn check_split(split: &str) -> CliResult {
    if tripool::synth::SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(Failure::Input(format!(
            "unknown split {split:?}; expected train, valid or test"
        )))
    }
}

fn cmd_eval(path: &Path, checkpoint: Option<&Path>, split: &str, out: Option<&Path>) -> CliResult {
    let config = RunConfig::load(path)?;
    check_split(split)?;
    let model_config = prepare(&config)?;
    let mut model = build_model(&config, model_config)?;
    if let Some(c) = checkpoint {
        model.params.load_checkpoint(c)?;
    }
    let (_, samples) = load_split(&config, split)?;
    let eval = evaluate(&model, &samples, config.training.threshold)?;
    let csv = eval.report.to_csv();
    match out {
        Some(p) => {
            fs::write(p, &csv).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
            println!(
                "{split}: {} samples, accuracy {:.4}, weighted accuracy {:.4}, f1 {:.4}",
                samples.len(),
                eval.report.average.accuracy,
                eval.report.average.weighted_accuracy,
                eval.report.average.f1
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, inject_fault: bool) -> CliResult {
    let fault = inject_fault.then_some(Fault::GeluBackwardSignFlip);
    let reports = gradcheck_suite(seed, fault)?;
    print!("{}", report_table(&reports));
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            reports.len(),
            failed.join(", ")
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    mode: Mode,
    ks: &[usize],
    lengths: Option<Vec<usize>>,
    variants: &[String],
    full_scale: bool,
    runs: usize,
    seed: u64,
    out: Option<&Path>,
) -> CliResult {
    let lengths = match lengths.as_deref() {
        None => FULL_SCALE_LENGTHS,
        Some(&[q, m, text]) if q > 0 && m > 0 && text > 0 => Lengths { q, m, text },
        Some(_) => {
            return Err(Failure::Input(
                "--lengths takes three positive integers Q,M,N_text".into(),
            ))
        }
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(Failure::Input("--k needs positive token counts".into()));
    }
    if runs == 0 {
        return Err(Failure::Input("--runs must be positive".into()));
    }
    let registry = VariantRegistry::<f32>::with_builtins();
    for v in variants {
        registry.get(v)?;
    }
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let base = if full_scale {
        full_scale_config(k_max, lengths)
    } else {
        desk_bench_config(k_max, lengths)
    };
    let mode = match mode {
        Mode::Flops => BenchMode::Flops,
        Mode::Time => BenchMode::Time,
        Mode::Memory => BenchMode::Memory,
    };
    let names: Vec<&str> = variants.iter().map(String::as_str).collect();
    let rows = run_bench(mode, &names, ks, lengths, &base, runs, seed)?;
    let csv = bench_csv(&rows);
    match out {
        Some(p) => fs::write(p, &csv).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_attn_dump(path: &Path, checkpoint: &Path, split: &str, sample: usize, out: &Path) -> CliResult {
    let config = RunConfig::load(path)?;
    check_split(split)?;
    let manifest = read_manifest(&config.dataset)?;
    let entries = match split {
        "train" => &manifest.train,
        "valid" => &manifest.valid,
        _ => &manifest.test,
    };
    if !entries.iter().any(|e| e.id == sample) {
        return Err(Failure::Input(format!("no sample {sample} in split {split}")));
    }
    let model_config = prepare(&config)?;
    let mut model = build_model(&config, model_config)?;
    model.params.load_checkpoint(checkpoint)?;
    let dataset = read_dataset(&config.dataset)?;
    let raw = dataset
        .split(split)?
        .iter()
        .find(|s| s.id == sample)
        .ok_or_else(|| Failure::Input(format!("no sample {sample} in split {split}")))?;
    let s = Featurizer::new(&dataset.spec, config.acoustic_patches)?.featurize(raw)?;

    let mut tape = Tape::with_params(&model.params);
    let output = model.forward(&mut tape, &s.input)?;
    let maps = output.state.attention_maps(&tape);
    if maps.is_empty() {
        return Err(Failure::Input(format!(
            "variant {} has no pooling maps",
            config.variant
        )));
    }
    let paths = write_maps(&maps, out)?;
    let mut summary = format!("split {split} sample {sample}");
    for map in &maps {
        let planted = match map.pass {
            PassTag::Acoustic => &s.planted_acoustic,
            PassTag::VisualPass1 | PassTag::VisualPass2 => &s.planted_visual,
        };
        let uniform = planted.len() as f64 / map.cols() as f64;
        summary.push_str(&format!(
            " {} {:.4} (uniform {:.4})",
            map.pass.as_str(),
            map.mass_on(planted)?,
            uniform
        ));
    }
    let summary_path = out.join("summary.txt");
    fs::write(&summary_path, format!("{summary}\n"))
        .map_err(|e| Failure::Input(format!("{}: {e}", summary_path.display())))?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    println!("{summary}");
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
