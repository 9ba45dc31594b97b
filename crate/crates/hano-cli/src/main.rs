//! Command-line driver for the hierarchical attention operator stack:
//! dataset generation, training, evaluation, hierarchical-matrix
//! certification, complexity benchmarking, and spectral error reports.
//!
//! Conventions shared by every subcommand:
//!
//! * machine-readable results go to stdout as CSV or a single JSON line;
//!   progress and diagnostics go to stderr;
//! * exit code 0 means success, 1 a runtime failure (or a failed
//!   certification), 2 a flag error (raised by the argument parser);
//! * every run is deterministic under fixed flags; the `HANO_SEED`
//!   environment variable supplies a default seed when `--seed` is absent;
//! * `--threads` caps the global worker pool used by data generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hano_core::data::{
    generate_darcy, generate_trig, read_dataset, write_dataset, DatasetHeader, GenSummary,
    GeneratorParams, Sample, DATASET_VERSION, FIELDS_PER_SAMPLE,
};
use hano_core::hattn::{qkv, v_cycle, AttnMode, OwnedVCycleWeights, TokenField};
use hano_core::hierarchy::IndexTree;
use hano_core::hmatrix::{
    dense_flop_count, flop_count, materialize_level_contributions, offdiag_rank_check, RankReport,
};
use hano_core::model::{HanoConfig, ModelState};
use hano_core::spectral::{
    freq_error_spectrum, rel_h1, rel_l2, spectrum_csv_row, SPECTRUM_CSV_HEADER,
};
use hano_core::trainer::{
    evaluate, history_csv, save_checkpoint_atomic, spectrum_csv, train, LossKind, TrainConfig,
};
use hano_core::GridField;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Agreement tolerance for the hierarchical-matrix certification.
const EQUIVALENCE_TOL: f64 = 1e-10;
/// Accepted per-4×-token growth ratio of the hierarchical operation count.
const HIER_RATIO_BOUNDS: (f64, f64) = (3.5, 5.0);
/// Channel width used by the complexity benchmark at every level.
const BENCH_WIDTH: usize = 32;
/// Pixel patch size used by the complexity benchmark.
const BENCH_PATCH: usize = 4;
/// Deepest hierarchy the benchmark builds.
const BENCH_MAX_LEVELS: usize = 5;

#[derive(Parser)]
#[command(
    name = "hano",
    version,
    about = "Hierarchical attention operator learning for multiscale elliptic PDEs"
)]
struct Cli {
    /// Cap the number of worker threads (defaults to all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate two-phase Darcy flow samples from thresholded Gaussian
    /// random fields and write them as one dataset file.
    GenDarcy(GenDarcyArgs),
    /// Generate multiscale trigonometric coefficient samples and write them
    /// as one dataset file.
    GenTrig(GenTrigArgs),
    /// Train a model on a dataset and write history, optional spectrum
    /// trace, and the selected checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print mean relative errors.
    Eval(EvalArgs),
    /// Certify that the attention V-cycle equals its materialized
    /// hierarchical matrix and that off-diagonal blocks obey the rank bound.
    VerifyHmatrix(VerifyHmatrixArgs),
    /// Measure analytic operation counts and wall time across resolutions
    /// and check the linear-cost growth ratio.
    BenchComplexity(BenchComplexityArgs),
    /// Write the per-frequency error spectrum of a checkpoint on a dataset.
    SpectralReport(SpectralReportArgs),
}

#[derive(Args)]
struct GenDarcyArgs {
    /// Grid resolution (points per side).
    #[arg(long)]
    resolution: usize,
    /// Number of samples to generate.
    #[arg(long)]
    samples: usize,
    /// Generation seed (falls back to HANO_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Coefficient value on the high phase.
    #[arg(long, default_value_t = 12.0)]
    amax: f64,
    /// Coefficient value on the low phase.
    #[arg(long, default_value_t = 3.0)]
    amin: f64,
    /// Inverse length scale of the underlying random field.
    #[arg(long, default_value_t = 9.0)]
    c: f64,
    /// Fourier modes kept per axis when sampling the random field.
    #[arg(long, default_value_t = 64)]
    modes: usize,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenTrigArgs {
    /// Grid resolution (points per side).
    #[arg(long)]
    resolution: usize,
    /// Number of samples to generate.
    #[arg(long)]
    samples: usize,
    /// Generation seed (falls back to HANO_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file produced by gen-darcy or gen-trig.
    #[arg(long)]
    data: PathBuf,
    /// Model configuration JSON; unknown keys are rejected. Defaults to the
    /// standard five-level model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training objective.
    #[arg(long, default_value_t = LossKind::L2)]
    loss: LossKind,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Run seed for initialization and shuffling (falls back to HANO_SEED,
    /// then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Peak learning rate of the one-cycle schedule.
    #[arg(long, default_value_t = 1e-3)]
    max_lr: f64,
    /// Learning rate at the final step.
    #[arg(long, default_value_t = 1e-5)]
    final_lr: f64,
    /// Decoupled weight-decay coefficient.
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Leading samples used for optimization (defaults to everything left
    /// after the validation and test splits).
    #[arg(long)]
    train_size: Option<usize>,
    /// Samples after the train split used for checkpoint selection.
    #[arg(long, default_value_t = 0)]
    val_size: usize,
    /// Samples after the validation split used for reporting.
    #[arg(long, default_value_t = 0)]
    test_size: usize,
    /// Track the error spectrum at this many dominating frequencies
    /// (0 disables the trace).
    #[arg(long, default_value_t = 0)]
    spectrum_k: usize,
    /// Output directory for history.csv, spectrum.csv, and model.hck.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Resample inputs to this training resolution and predictions back,
    /// instead of running the model at the dataset's native resolution.
    #[arg(long)]
    train_resolution: Option<usize>,
}

#[derive(Args)]
struct VerifyHmatrixArgs {
    /// Number of finest-level tokens (a perfect square).
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..=4096))]
    tokens: u64,
    /// Hierarchy depth.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    levels: u64,
    /// Channel width at every level (also the claimed off-diagonal rank
    /// bound).
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    channels: u64,
    /// Weight/input seed (falls back to HANO_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Self-test hook: perturb one decompose entry after materialization,
    /// which must make the certification fail.
    #[arg(long)]
    corrupt: bool,
}

#[derive(Args)]
struct BenchComplexityArgs {
    /// Ascending pixel resolutions to benchmark (each a multiple of the
    /// patch size 4).
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512])]
    sides: Vec<usize>,
    /// Weight/input seed (falls back to HANO_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SpectralReportArgs {
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Number of dominating frequencies to report.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Output CSV path; when absent the CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads as usize)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenDarcy(args) => cmd_gen_darcy(args).map(|()| ExitCode::SUCCESS),
        Command::GenTrig(args) => cmd_gen_trig(args).map(|()| ExitCode::SUCCESS),
        Command::Train(args) => cmd_train(args).map(|()| ExitCode::SUCCESS),
        Command::Eval(args) => cmd_eval(args).map(|()| ExitCode::SUCCESS),
        Command::VerifyHmatrix(args) => cmd_verify_hmatrix(args),
        Command::BenchComplexity(args) => cmd_bench_complexity(args).map(|()| ExitCode::SUCCESS),
        Command::SpectralReport(args) => cmd_spectral_report(args).map(|()| ExitCode::SUCCESS),
    }
}

/// Resolve the effective seed: explicit flag, then `HANO_SEED`, then 0.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    match flag {
        Some(seed) => Ok(seed),
        None => match std::env::var("HANO_SEED") {
            Ok(text) => text
                .trim()
                .parse()
                .with_context(|| format!("HANO_SEED must be an unsigned integer, got {text:?}")),
            Err(std::env::VarError::NotPresent) => Ok(0),
            Err(e) => Err(e).context("reading HANO_SEED"),
        },
    }
}

fn print_gen_summary(path: &Path, header: &DatasetHeader, summary: &GenSummary) {
    println!(
        "{}",
        serde_json::json!({
            "path": path.display().to_string(),
            "generator": header.generator,
            "samples": header.samples,
            "resolution": header.resolution,
            "seed": header.seed,
            "coeff_min": summary.coeff_min,
            "coeff_max": summary.coeff_max,
            "max_residual": summary.max_residual,
        })
    );
}

fn cmd_gen_darcy(args: GenDarcyArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    eprintln!(
        "generating {} Darcy samples at {}x{} (seed {seed})",
        args.samples, args.resolution, args.resolution
    );
    let (samples, summary) = generate_darcy(
        args.resolution,
        args.samples,
        seed,
        args.amax,
        args.amin,
        args.c,
        args.modes,
    )?;
    let header = DatasetHeader {
        version: DATASET_VERSION,
        samples: samples.len() as u32,
        resolution: args.resolution as u32,
        fields_per_sample: FIELDS_PER_SAMPLE,
        generator: "darcy".to_string(),
        seed,
        params: GeneratorParams {
            a_max: Some(args.amax),
            a_min: Some(args.amin),
            c: Some(args.c),
            modes: Some(args.modes as u32),
        },
    };
    write_dataset(&args.out, &header, &samples)?;
    print_gen_summary(&args.out, &header, &summary);
    Ok(())
}

fn cmd_gen_trig(args: GenTrigArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    eprintln!(
        "generating {} trigonometric samples at {}x{} (seed {seed})",
        args.samples, args.resolution, args.resolution
    );
    let (samples, summary) = generate_trig(args.resolution, args.samples, seed)?;
    let header = DatasetHeader {
        version: DATASET_VERSION,
        samples: samples.len() as u32,
        resolution: args.resolution as u32,
        fields_per_sample: FIELDS_PER_SAMPLE,
        generator: "trig".to_string(),
        seed,
        params: GeneratorParams::default(),
    };
    write_dataset(&args.out, &header, &samples)?;
    print_gen_summary(&args.out, &header, &summary);
    Ok(())
}

fn load_model_config(path: Option<&Path>) -> Result<HanoConfig> {
    match path {
        None => Ok(HanoConfig::standard()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading model config {}", p.display()))?;
            let config: HanoConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing model config {}", p.display()))?;
            Ok(config)
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (_, samples) = read_dataset(&args.data)?;
    let model_config = load_model_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed)?;
    let train_size = args
        .train_size
        .unwrap_or_else(|| samples.len().saturating_sub(args.val_size + args.test_size));
    let config = TrainConfig {
        max_lr: args.max_lr,
        final_lr: args.final_lr,
        weight_decay: args.weight_decay,
        batch: args.batch,
        epochs: args.epochs,
        loss: args.loss,
        seed,
        train_size,
        val_size: args.val_size,
        test_size: args.test_size,
    };
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    eprintln!(
        "training {} epochs on {} samples ({} train / {} val / {} test, loss {}, seed {seed})",
        config.epochs,
        samples.len(),
        config.train_size,
        config.val_size,
        config.test_size,
        config.loss,
    );

    let started = Instant::now();
    let (state, history) = train(&model_config, &samples, &config, args.spectrum_k)?;
    let seconds = started.elapsed().as_secs_f64();

    let history_path = args.out.join("history.csv");
    fs::write(&history_path, history_csv(&history.records))?;
    let spectrum_path = if args.spectrum_k > 0 {
        let p = args.out.join("spectrum.csv");
        fs::write(&p, spectrum_csv(&history.spectra))?;
        Some(p)
    } else {
        None
    };
    let checkpoint_path = args.out.join("model.hck");
    save_checkpoint_atomic(&state, &checkpoint_path)?;

    // Metrics of the model actually checkpointed (after best-by-validation
    // selection), not necessarily the last epoch's row.
    let test_start = config.train_size + config.val_size;
    let test = &samples[test_start..test_start + config.test_size];
    let (test_l2, test_h1) = if test.is_empty() {
        (None, None)
    } else {
        let (l2, h1) = evaluate(&state, test)?;
        (Some(l2), Some(h1))
    };
    let last = history.records.last().expect("at least one epoch");
    eprintln!("trained in {seconds:.1}s; wrote {}", args.out.display());
    println!(
        "{}",
        serde_json::json!({
            "epochs": config.epochs,
            "train_loss": last.train_loss,
            "test_l2": test_l2,
            "test_h1": test_h1,
            "params": state.params().scalar_count(),
            "history": history_path.display().to_string(),
            "spectrum": spectrum_path.map(|p| p.display().to_string()),
            "checkpoint": checkpoint_path.display().to_string(),
            "seconds": seconds,
        })
    );
    Ok(())
}

/// Mean relative errors with inputs resampled through a fixed training
/// resolution (the resolution-transfer evaluation path).
fn evaluate_resampled(state: &ModelState, samples: &[Sample], train_n: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        bail!("cannot evaluate an empty split");
    }
    let (mut l2, mut h1) = (0.0, 0.0);
    for s in samples {
        let pred = state.eval_at_resolution(&s.a, train_n)?;
        l2 += rel_l2(&pred, &s.u)?;
        h1 += rel_h1(&pred, &s.u)?;
    }
    let count = samples.len() as f64;
    Ok((l2 / count, h1 / count))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let state = ModelState::load_checkpoint(&args.checkpoint)?;
    let (header, samples) = read_dataset(&args.data)?;
    let (l2, h1) = match args.train_resolution {
        None => evaluate(&state, &samples)?,
        Some(train_n) => evaluate_resampled(&state, &samples, train_n)?,
    };
    println!(
        "{}",
        serde_json::json!({
            "samples": samples.len(),
            "resolution": header.resolution,
            "rel_l2": l2,
            "rel_h1": h1,
        })
    );
    Ok(())
}

fn cmd_verify_hmatrix(args: VerifyHmatrixArgs) -> Result<ExitCode> {
    let tokens = args.tokens as usize;
    let levels = args.levels as usize;
    let channels = args.channels as usize;
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        bail!("--tokens must be a perfect square (token grids are square), got {tokens}");
    }
    let seed = resolve_seed(args.seed)?;
    let tree = IndexTree::build(side, levels, &vec![3; levels])?;
    let widths = vec![channels; levels];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = OwnedVCycleWeights::random(&mut rng, &widths)?;
    let field = TokenField::random(&mut rng, side, channels)?;

    // Materialize the per-level contributions first, then (optionally)
    // corrupt one decompose matrix: the nested cycle below then disagrees
    // with the already-materialized matrix, which must be caught.
    let mut flops = 0u64;
    let (q, k, v) = qkv(&field, &weights.wq, &weights.wk, &weights.wv, &mut flops)?;
    let contributions = materialize_level_contributions(&tree, &weights.borrow(), &q, &k)?;
    if args.corrupt {
        if levels < 2 {
            bail!("--corrupt perturbs a decompose matrix, which needs at least 2 levels");
        }
        weights.transitions[0][3][1].data_mut()[0] += 0.25;
        eprintln!("corruption hook: perturbed one decompose entry after materialization");
    }
    let nested = v_cycle(&field, &weights.borrow(), &tree, AttnMode::ORACLE)?;

    let mut total = contributions[0].matrix.clone();
    for c in &contributions[1..] {
        total.add_assign_matrix(&c.matrix)?;
    }
    let want = total.matvec(v.data())?;
    let max_abs_diff = nested
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut reports: Vec<RankReport> = Vec::new();
    for contribution in &contributions {
        if contribution.level < levels {
            reports.push(offdiag_rank_check(contribution, &tree)?);
        }
    }

    eprintln!("max abs diff nested vs materialized: {max_abs_diff:.3e} (tolerance {EQUIVALENCE_TOL:.0e})");
    for r in &reports {
        eprintln!(
            "level {}: max off-diagonal rank {} of bound {} over {} blocks",
            r.level, r.max_rank, r.width, r.blocks_checked
        );
    }
    let pass = max_abs_diff < EQUIVALENCE_TOL && reports.iter().all(RankReport::within_bound);
    println!(
        "{}",
        serde_json::json!({
            "tokens": tokens,
            "levels": levels,
            "channels": channels,
            "seed": seed,
            "max_abs_diff": max_abs_diff,
            "ranks": reports
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "level": r.level,
                        "width": r.width,
                        "max_rank": r.max_rank,
                        "blocks_checked": r.blocks_checked,
                    })
                })
                .collect::<Vec<_>>(),
            "pass": pass,
        })
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        eprintln!("certification FAILED");
        ExitCode::from(1)
    })
}

/// Deepest hierarchy (capped) whose coarsest grid still has side ≥ 2.
fn bench_levels(token_side: usize) -> usize {
    let mut levels = 1;
    while levels < BENCH_MAX_LEVELS {
        let down = 1usize << levels;
        if token_side.is_multiple_of(down) && token_side / down >= 2 {
            levels += 1;
        } else {
            break;
        }
    }
    levels
}

fn cmd_bench_complexity(args: BenchComplexityArgs) -> Result<()> {
    if args.sides.is_empty() {
        bail!("--sides needs at least one resolution");
    }
    if !args.sides.windows(2).all(|w| w[0] < w[1]) {
        bail!("--sides must be strictly ascending, got {:?}", args.sides);
    }
    for &side in &args.sides {
        if side % BENCH_PATCH != 0 || side / BENCH_PATCH < 2 {
            bail!("each side must be a multiple of the patch size {BENCH_PATCH} with at least 2 patches per side, got {side}");
        }
    }
    let seed = resolve_seed(args.seed)?;

    println!("side,tokens,hier_flops,dense_flops,hier_ms");
    let mut rows: Vec<(usize, u64, u64)> = Vec::new(); // (tokens, hier, dense)
    for &side in &args.sides {
        let token_side = side / BENCH_PATCH;
        let tokens = token_side * token_side;
        let levels = bench_levels(token_side);
        let tree = IndexTree::build(token_side, levels, &vec![3; levels])?;
        let hier = flop_count(&tree, &vec![BENCH_WIDTH; levels])?.total;
        let dense = dense_flop_count(tokens, BENCH_WIDTH);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ side as u64);
        let weights = OwnedVCycleWeights::random(&mut rng, &vec![BENCH_WIDTH; levels])?;
        let field = TokenField::random(&mut rng, token_side, BENCH_WIDTH)?;
        let reps = if tokens <= 4096 { 3 } else { 2 };
        v_cycle(&field, &weights.borrow(), &tree, AttnMode::TRAINED)?; // warmup
        let mut best = f64::INFINITY;
        for _ in 0..reps {
            let t0 = Instant::now();
            v_cycle(&field, &weights.borrow(), &tree, AttnMode::TRAINED)?;
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        println!("{side},{tokens},{hier},{dense},{best:.3}");
        rows.push((tokens, hier, dense));
    }

    for pair in rows.windows(2) {
        let ((t0, h0, _), (t1, h1, _)) = (pair[0], pair[1]);
        if t1 == 4 * t0 {
            let ratio = h1 as f64 / h0 as f64;
            if ratio < HIER_RATIO_BOUNDS.0 || ratio > HIER_RATIO_BOUNDS.1 {
                bail!(
                    "hierarchical cost grew {ratio:.3}x over a 4x token step ({t0} -> {t1} tokens); \
                     expected within [{}, {}]",
                    HIER_RATIO_BOUNDS.0,
                    HIER_RATIO_BOUNDS.1
                );
            }
        }
    }
    Ok(())
}

fn cmd_spectral_report(args: SpectralReportArgs) -> Result<()> {
    let state = ModelState::load_checkpoint(&args.checkpoint)?;
    let (_, samples) = read_dataset(&args.data)?;
    let preds: Vec<GridField> = samples
        .iter()
        .map(|s| state.forward(&s.a))
        .collect::<hano_core::Result<_>>()?;
    let targets: Vec<GridField> = samples.iter().map(|s| s.u.clone()).collect();
    let rows = freq_error_spectrum(&preds, &targets, args.k)?;

    let mut csv = String::from(SPECTRUM_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&spectrum_csv_row(0, "eval", row));
        csv.push('\n');
    }
    match args.out {
        Some(path) => {
            fs::write(&path, csv)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": path.display().to_string(),
                    "rows": rows.len(),
                })
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}
