//! Batch CLI: synth, build-bank, train, eval, bench.
//!
//! Every run writes a `run_manifest.json` into its output directory with the
//! resolved configuration, SHA-256 digests of all input files, the seed, and
//! the tool version, so any two runs with identical manifests are expected to
//! produce identical outputs.
//!
//! Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use protoclass::classifier::{
    ensemble, score_aligned, score_conventional, ClassifierParams, EnsembleMode,
};
use protoclass::error::{Error, Result};
use protoclass::eval::{bench_scoring, split_accuracy, topk_accuracy, EvalReport};
use protoclass::io;
use protoclass::prototype::{build_bank, SigmaTable};
use protoclass::synth::{self, generate_world, world_to_inputs, WorldConfig};
use protoclass::trainer::{fit, init_params, TrainConfig};

#[derive(Parser)]
#[command(name = "protoclass", version, about = "Multi-modal prototype classification pipelines")]
struct Cli {
    /// Thread cap for internal parallelism; recorded in the run manifest.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding world and write its input files.
    Synth(SynthArgs),
    /// Build a prototype bank from descriptions and reference embeddings.
    BuildBank(BuildBankArgs),
    /// Train classifier parameters against a bank.
    Train(TrainArgs),
    /// Evaluate trained parameters on a labeled batch.
    Eval(EvalArgs),
    /// Measure ensemble scoring throughput on random data.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// World configuration JSON (see WorldConfig fields).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildBankArgs {
    #[arg(long)]
    descriptions: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    ref_embeddings: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Optional sigma-table override (JSON array of buckets).
    #[arg(long)]
    sigma_table: Option<PathBuf>,
    /// Output directory; the bank is written as bank.pbnk.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    train_labels: PathBuf,
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    heldout_labels: Option<PathBuf>,
    /// Training configuration JSON (TrainConfig fields).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Directory produced by `train` (w/p_t/p_v PEMBs + params.json).
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: EnsembleMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    categories: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    objects: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<EnsembleMode, String> {
    match s {
        "supervised" => Ok(EnsembleMode::Supervised),
        "open_vocab" => Ok(EnsembleMode::OpenVocab),
        other => Err(format!("unknown mode {other:?} (supervised | open_vocab)")),
    }
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    resolved_config: serde_json::Value,
    input_digests: BTreeMap<String, String>,
    seed: u64,
    threads: usize,
    tool_version: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let hash = Sha256::digest(&bytes);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_run_manifest(
    dir: &Path,
    subcommand: &str,
    resolved_config: serde_json::Value,
    inputs: &[&Path],
    seed: u64,
    threads: usize,
) -> Result<()> {
    let mut input_digests = BTreeMap::new();
    for p in inputs {
        input_digests.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        subcommand: subcommand.into(),
        resolved_config,
        input_digests,
        seed,
        threads,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&manifest, &dir.join("run_manifest.json"))
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!(
        "{}: {e}",
        path.display()
    )))
}

fn cmd_synth(args: &SynthArgs, threads: usize) -> Result<()> {
    let mut cfg: WorldConfig = read_json_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let world = generate_world(&cfg)?;
    ensure_dir(&args.out)?;
    world_to_inputs(&world, &args.out)?;
    write_run_manifest(
        &args.out,
        "synth",
        serde_json::to_value(&cfg).expect("config serializes"),
        &[args.config.as_path()],
        cfg.seed,
        threads,
    )?;
    eprintln!(
        "synth: {} categories, {} train / {} heldout objects -> {}",
        cfg.n_categories,
        world.train.len(),
        world.heldout.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_build_bank(args: &BuildBankArgs, threads: usize) -> Result<()> {
    let descriptions = io::read_embeddings(&args.descriptions)?;
    let ref_embeddings = io::read_embeddings(&args.ref_embeddings)?;
    let manifest = io::read_manifest(&args.manifest)?;
    let (refs, warnings) = io::read_reference_index(&args.refs, &ref_embeddings)?;
    if warnings > 0 {
        eprintln!("build-bank: {warnings} reference ordering fix(es) applied");
    }
    let table = match &args.sigma_table {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            SigmaTable::from_json(&text)?
        }
        None => SigmaTable::default(),
    };
    let bank = build_bank(&descriptions, &refs, &ref_embeddings, &manifest, &table)?;
    ensure_dir(&args.out)?;
    io::save_bank(&bank, &args.out.join("bank.pbnk"))?;
    let mut inputs: Vec<&Path> = vec![
        args.descriptions.as_path(),
        args.refs.as_path(),
        args.ref_embeddings.as_path(),
        args.manifest.as_path(),
    ];
    if let Some(p) = &args.sigma_table {
        inputs.push(p.as_path());
    }
    write_run_manifest(
        &args.out,
        "build-bank",
        serde_json::json!({ "sigma_table_hash": bank.sigma_table_hash }),
        &inputs,
        0,
        threads,
    )?;
    eprintln!(
        "build-bank: {} categories -> {}",
        bank.categories.len(),
        args.out.join("bank.pbnk").display()
    );
    Ok(())
}

const PARAMS_META: &str = "params.json";

#[derive(Serialize, serde::Deserialize)]
struct ParamsMeta {
    tau: f32,
    conventional_normalized: bool,
    mode: EnsembleMode,
}

fn save_params(params: &ClassifierParams, mode: EnsembleMode, dir: &Path) -> Result<()> {
    io::write_embeddings(&params.w, &dir.join("w.pemb"))?;
    io::write_embeddings(&params.p_t, &dir.join("p_t.pemb"))?;
    io::write_embeddings(&params.p_v, &dir.join("p_v.pemb"))?;
    write_json(
        &ParamsMeta {
            tau: params.tau,
            conventional_normalized: params.conventional_normalized,
            mode,
        },
        &dir.join(PARAMS_META),
    )
}

fn load_params(dir: &Path) -> Result<(ClassifierParams, EnsembleMode)> {
    let meta: ParamsMeta = read_json_config(&dir.join(PARAMS_META))?;
    let params = ClassifierParams {
        w: io::read_embeddings(&dir.join("w.pemb"))?,
        p_t: io::read_embeddings(&dir.join("p_t.pemb"))?,
        p_v: io::read_embeddings(&dir.join("p_v.pemb"))?,
        tau: meta.tau,
        conventional_normalized: meta.conventional_normalized,
    };
    params.validate()?;
    Ok((params, meta.mode))
}

fn cmd_train(args: &TrainArgs, threads: usize) -> Result<()> {
    let mut cfg: TrainConfig = read_json_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let bank = io::load_bank(&args.bank)?;
    let train = synth::read_batch(&args.train, &args.train_labels)?;
    let heldout = match (&args.heldout, &args.heldout_labels) {
        (Some(e), Some(l)) => Some(synth::read_batch(e, l)?),
        (None, None) => None,
        _ => {
            return Err(Error::InvalidConfig(
                "--heldout and --heldout-labels must be given together".into(),
            ))
        }
    };
    let c = bank.categories.len();
    let l = train.x.dims();
    let params = init_params(
        cfg.seed,
        c,
        l,
        bank.textual.dims(),
        bank.visual.dims(),
        protoclass::classifier::DEFAULT_TAU,
        true,
    );
    let result = fit(&params, &bank, &train, heldout.as_ref(), &cfg)?;
    ensure_dir(&args.out)?;
    save_params(&result.params, cfg.mode, &args.out)?;
    write_json(&result.trace, &args.out.join("trace.json"))?;
    let mut inputs: Vec<&Path> = vec![
        args.bank.as_path(),
        args.train.as_path(),
        args.train_labels.as_path(),
        args.config.as_path(),
    ];
    if let (Some(e), Some(la)) = (&args.heldout, &args.heldout_labels) {
        inputs.push(e.as_path());
        inputs.push(la.as_path());
    }
    write_run_manifest(
        &args.out,
        "train",
        serde_json::to_value(&cfg).expect("config serializes"),
        &inputs,
        cfg.seed,
        threads,
    )?;
    if let Some(last) = result.trace.last() {
        eprintln!(
            "train: {} epochs, final loss {:.6}, heldout top-1 {:?}",
            result.trace.len(),
            last.loss,
            last.top1_on_heldout
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, threads: usize) -> Result<()> {
    let bank = io::load_bank(&args.bank)?;
    let (params, _trained_mode) = load_params(&args.params)?;
    let batch = synth::read_batch(&args.batch, &args.labels)?;

    let s_text = score_aligned(&bank.textual, &params.p_t, &batch.x, params.tau)?;
    let s_vis = score_aligned(&bank.visual, &params.p_v, &batch.x, params.tau)?;
    let s = match args.mode {
        EnsembleMode::Supervised => {
            let s_con = score_conventional(&params, &batch.x)?;
            ensemble(EnsembleMode::Supervised, Some(&s_con), &s_text, &s_vis)?
        }
        // W is ignored entirely in the open-vocabulary arm
        EnsembleMode::OpenVocab => ensemble(EnsembleMode::OpenVocab, None, &s_text, &s_vis)?,
    };

    let splits: Vec<io::Split> = bank.categories.iter().map(|c| c.split).collect();
    let k5 = 5.min(bank.categories.len());
    let report = EvalReport {
        top1: topk_accuracy(&s, &batch.labels, 1)?,
        top5: topk_accuracy(&s, &batch.labels, k5)?,
        per_split: split_accuracy(&s, &batch.labels, &splits, k5)?,
        silhouette: None,
        mode: args.mode,
        config_digest: bank.sigma_table_hash.clone(),
    };
    ensure_dir(&args.out)?;
    write_json(&report, &args.out.join("eval_report.json"))?;
    write_run_manifest(
        &args.out,
        "eval",
        serde_json::to_value(&report).expect("report serializes"),
        &[
            args.bank.as_path(),
            args.params.join(PARAMS_META).as_path(),
            args.batch.as_path(),
            args.labels.as_path(),
        ],
        0,
        threads,
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs, threads: usize) -> Result<()> {
    let mut report = bench_scoring(args.categories, args.dim, args.objects, args.seed)?;
    report.threads = threads;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        write_json(&report, &out.join("bench_report.json"))?;
        write_run_manifest(
            out,
            "bench",
            serde_json::to_value(&report).expect("report serializes"),
            &[],
            args.seed,
            threads,
        )?;
    }
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads;
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, threads),
        Command::BuildBank(a) => cmd_build_bank(a, threads),
        Command::Train(a) => cmd_train(a, threads),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Bench(a) => cmd_bench(a, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
