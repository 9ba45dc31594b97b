//! Acceptance gate for the whole stack: ten end-to-end criteria, each
//! printing one `ACCEPT <n> PASS|FAIL` line with its measured numbers.
//!
//! The criteria exercise the public library API and the compiled `hano`
//! binary only — no internal test hooks — so together they certify the
//! shipped surface: hierarchical-matrix equivalence, full-model gradients,
//! linear complexity, solver accuracy, spectral identities, deterministic
//! data generation, training behaviour, the spectral-bias diagnostic,
//! resolution transfer, and file-format integrity.

use std::f64::consts::PI;
use std::fs;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use hano_core::data::{
    generate_trig, read_dataset, solve_darcy, write_dataset, DatasetHeader, GeneratorParams,
    Sample, DATASET_VERSION, FIELDS_PER_SAMPLE,
};
use hano_core::diffcore::grad_check;
use hano_core::hattn::{qkv, v_cycle, AttnMode, OwnedVCycleWeights, TokenField};
use hano_core::hierarchy::IndexTree;
use hano_core::hmatrix::materialize_gh;
use hano_core::model::{HanoConfig, ModelState};
use hano_core::spectral::{dft2, dft2_direct, rel_h1, rel_h1_grad, rel_l2, SpectrumRow};
use hano_core::trainer::{evaluate, train, LossKind, TrainConfig, TrainHistory};
use hano_core::{GridField, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nested-cycle vs materialized-matrix agreement tolerance.
const EQUIVALENCE_TOL: f64 = 1e-10;
/// Full-model gradient tolerance against central differences.
const GRAD_TOL: f64 = 1e-4;
/// Central-difference step for the gradient check.
const GRAD_STEP: f64 = 1e-5;
/// Hierarchical cost growth bounds per 4× token step.
const HIER_RATIO: (f64, f64) = (3.5, 5.0);
/// Dense-attention cost growth bounds per 4× token step.
const DENSE_RATIO: (f64, f64) = (14.0, 18.0);
/// Wall-time growth bound for the 4096 → 16384 token step.
const WALL_RATIO_MAX: f64 = 6.0;
/// Minimum observed solver convergence order.
const SOLVER_ORDER_MIN: f64 = 1.9;
/// Parseval / shift-invariance tolerance.
const IDENTITY_TOL: f64 = 1e-12;
/// Fast-vs-direct transform agreement tolerance.
const DFT_TOL: f64 = 1e-10;
/// Final test error must drop to at most this fraction of its epoch-1 value.
const SMOKE_IMPROVEMENT: f64 = 0.5;
/// Resolution-transfer error may grow by at most this factor.
const TRANSFER_FACTOR: f64 = 2.0;

fn verdict(n: usize, ok: bool, detail: &str) {
    println!("ACCEPT {n} {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

/// Smooth but oscillatory deterministic field for probe inputs.
fn wavy(n: usize, phase: f64, amp: f64) -> GridField {
    let values = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64, (i % n) as f64);
            let x = r / n as f64;
            let y = c / n as f64;
            amp * ((2.0 * PI * x + phase).sin() * (4.0 * PI * y).cos()
                + 0.5 * (6.0 * PI * (x + y) + 0.3 * phase).sin())
        })
        .collect();
    GridField::from_values(n, values).expect("wavy field")
}

// ---------------------------------------------------------------------------
// 1. Hierarchical-matrix equivalence.
// ---------------------------------------------------------------------------

fn equivalence_diff(seed: u64, side: usize, levels: usize) -> Result<f64> {
    let tree = IndexTree::build(side, levels, &vec![3; levels])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = OwnedVCycleWeights::random(&mut rng, &vec![4; levels])?;
    let field = TokenField::random(&mut rng, side, 4)?;
    // Unnormalized, unscaled attention: the output is linear in v, so the
    // nested cycle must equal one explicit matrix–vector product.
    let nested = v_cycle(&field, &weights.borrow(), &tree, AttnMode::ORACLE)?;
    let mut flops = 0u64;
    let (q, k, v) = qkv(&field, &weights.wq, &weights.wk, &weights.wv, &mut flops)?;
    let gh = materialize_gh(&tree, &weights.borrow(), &q, &k)?;
    let want = gh.matvec(v.data())?;
    Ok(nested
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[test]
fn acceptance_01_hierarchical_matrix_equivalence() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        for levels in [2usize, 3] {
            let diff = equivalence_diff(seed, 16, levels).expect("equivalence run");
            worst = worst.max(diff);
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    let ok = worst < EQUIVALENCE_TOL && seconds < 10.0;
    verdict(
        1,
        ok,
        &format!("max abs diff {worst:.3e} over 10 seeds x {{2,3}} levels, {seconds:.1}s"),
    );
    assert!(
        ok,
        "equivalence diff {worst:.3e} (tolerance {EQUIVALENCE_TOL:.0e}) in {seconds:.1}s (budget 10s)"
    );
}

// ---------------------------------------------------------------------------
// 2. Full-model gradient correctness under the frequency-weighted loss.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_full_model_gradients() {
    let started = Instant::now();
    // 16×16 input, 3 levels of width 4, one cycle: patch 2 gives an 8×8
    // token grid whose quadtree bottoms out at 2×2.
    let config = HanoConfig {
        levels: 3,
        widths: vec![4, 4, 4],
        windows: vec![3, 3, 3],
        patch: 2,
        cycles: 1,
        normalize: true,
        include_coords: true,
        d_a: 1,
        d_u: 1,
    };
    let a = wavy(16, 0.4, 1.0);
    let u = wavy(16, 1.7, 0.8);

    let mut state = ModelState::init(config.clone(), 0).expect("model init");
    let (pred, trace) = state.forward_traced(&a).expect("forward");
    let (_, d_pred) = rel_h1_grad(&pred, &u).expect("loss grad");
    state.params_mut().zero_grads();
    state.backward(&trace, &d_pred).expect("backward");

    let probe_config = config.clone();
    let probe_a = a.clone();
    let probe_u = u.clone();
    let report = grad_check(
        state.params_mut(),
        move |store| {
            let mut probe = ModelState::init(probe_config.clone(), 0)?;
            *probe.params_mut() = store.clone();
            let pred = probe.forward(&probe_a)?;
            rel_h1(&pred, &probe_u)
        },
        GRAD_STEP,
    )
    .expect("gradient check");

    let seconds = started.elapsed().as_secs_f64();
    let ok = report.max_rel_err < GRAD_TOL && seconds < 120.0;
    verdict(
        2,
        ok,
        &format!(
            "max rel err {:.3e} (worst {}[{}]), {seconds:.1}s",
            report.max_rel_err, report.worst_param, report.worst_index
        ),
    );
    assert!(
        ok,
        "gradient check {:.3e} at {}[{}] (analytic {:.6e}, fd {:.6e}) in {seconds:.1}s",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.finite_diff
    );
}

// ---------------------------------------------------------------------------
// 3. Linear complexity: analytic counts and wall time from the binary.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_linear_complexity() {
    let out = Command::new(env!("CARGO_BIN_EXE_hano"))
        .arg("bench-complexity")
        .output()
        .expect("run bench-complexity");
    assert!(
        out.status.success(),
        "bench-complexity failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).expect("utf-8 csv");
    let rows: Vec<(u64, u64, u64, f64)> = stdout
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            (
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(rows.len(), 4, "expected rows for sides 64..512:\n{stdout}");

    let mut ok = true;
    let mut detail = String::new();
    for pair in rows.windows(2) {
        let ((t0, h0, d0, _), (t1, h1, d1, _)) = (pair[0], pair[1]);
        assert_eq!(t1, 4 * t0, "sides must quadruple the token count");
        let hier = h1 as f64 / h0 as f64;
        let dense = d1 as f64 / d0 as f64;
        ok &= hier >= HIER_RATIO.0 && hier <= HIER_RATIO.1;
        ok &= dense >= DENSE_RATIO.0 && dense <= DENSE_RATIO.1;
        detail.push_str(&format!("{t0}->{t1}: hier {hier:.2} dense {dense:.2}; "));
    }
    let ms_4096 = rows.iter().find(|r| r.0 == 4096).expect("4096-token row").3;
    let ms_16384 = rows.iter().find(|r| r.0 == 16384).expect("16384-token row").3;
    let wall = ms_16384 / ms_4096;
    ok &= wall <= WALL_RATIO_MAX;
    detail.push_str(&format!("wall 4096->16384 {wall:.2}"));

    verdict(3, ok, &detail);
    assert!(ok, "complexity ratios out of bounds: {detail}\n{stdout}");
}

// ---------------------------------------------------------------------------
// 4. Finite-difference solver convergence order.
// ---------------------------------------------------------------------------

fn manufactured_error(n: usize) -> f64 {
    let h = 1.0 / (n - 1) as f64;
    let a = GridField::constant(n, 1.0).unwrap();
    let mut f = GridField::zeros(n).unwrap();
    let mut exact = GridField::zeros(n).unwrap();
    for i in 0..n {
        for j in 0..n {
            let star = (PI * (i as f64 * h)).sin() * (PI * (j as f64 * h)).sin();
            exact.set(i, j, star);
            f.set(i, j, 2.0 * PI * PI * star);
        }
    }
    let sol = solve_darcy(&a, &f, h, 1e-12).expect("manufactured solve");
    sol.u
        .values()
        .iter()
        .zip(exact.values())
        .map(|(u, e)| (u - e).abs())
        .fold(0.0, f64::max)
}

#[test]
fn acceptance_04_solver_convergence_order() {
    let started = Instant::now();
    let errors: Vec<(f64, f64)> = [32usize, 64, 128]
        .iter()
        .map(|&n| (1.0 / (n - 1) as f64, manufactured_error(n)))
        .collect();
    let mut worst_order = f64::INFINITY;
    for pair in errors.windows(2) {
        let ((h1, e1), (h2, e2)) = (pair[0], pair[1]);
        worst_order = worst_order.min((e1 / e2).ln() / (h1 / h2).ln());
    }
    let seconds = started.elapsed().as_secs_f64();
    let ok = worst_order >= SOLVER_ORDER_MIN && seconds < 30.0;
    verdict(
        4,
        ok,
        &format!("min observed order {worst_order:.3} over n in {{32,64,128}}, {seconds:.1}s"),
    );
    assert!(
        ok,
        "convergence order {worst_order:.3} (need >= {SOLVER_ORDER_MIN}) in {seconds:.1}s"
    );
}

// ---------------------------------------------------------------------------
// 5. Spectral identities.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_spectral_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut random_field = |n: usize| {
        GridField::from_values(n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    };

    // Parseval on 100 random 64×64 fields (unitary transform).
    let mut worst_parseval = 0.0f64;
    for _ in 0..100 {
        let field = random_field(64);
        let space: f64 = field.values().iter().map(|v| v * v).sum();
        let freq = dft2(&field).energy();
        worst_parseval = worst_parseval.max((space - freq).abs() / space.max(1.0));
    }

    // Shifting both fields by one constant leaves the seminorm error alone.
    let target = random_field(16);
    let pred = random_field(16);
    let base = rel_h1(&pred, &target).unwrap();
    let shift = |g: &GridField| {
        GridField::from_values(16, g.values().iter().map(|v| v + 3.7).collect()).unwrap()
    };
    let shifted = rel_h1(&shift(&pred), &shift(&target)).unwrap();
    let shift_err = (base - shifted).abs();

    // Radix-2 fast path against the literal quadruple-loop transform.
    let field = random_field(64);
    let fast = dft2(&field);
    let direct = dft2_direct(&field);
    let dft_diff = fast
        .coeffs()
        .iter()
        .zip(direct.coeffs())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);

    let ok = worst_parseval <= IDENTITY_TOL && shift_err < IDENTITY_TOL && dft_diff < DFT_TOL;
    verdict(
        5,
        ok,
        &format!(
            "parseval {worst_parseval:.2e}, shift {shift_err:.2e}, fast-vs-direct {dft_diff:.2e}"
        ),
    );
    assert!(
        ok,
        "spectral identities: parseval {worst_parseval:.3e} (<= {IDENTITY_TOL:.0e}), \
         shift {shift_err:.3e} (< {IDENTITY_TOL:.0e}), dft {dft_diff:.3e} (< {DFT_TOL:.0e})"
    );
}

// ---------------------------------------------------------------------------
// 6. Deterministic data generation through the binary.
// ---------------------------------------------------------------------------

fn gen_bytes(args: &[&str], out: &std::path::Path) -> Vec<u8> {
    let run = Command::new(env!("CARGO_BIN_EXE_hano"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run generator");
    assert!(
        run.status.success(),
        "generator failed: {}",
        String::from_utf8_lossy(&run.stderr)
    );
    fs::read(out).expect("read generated dataset")
}

#[test]
fn acceptance_06_generation_determinism() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut ok = true;
    let mut detail = String::new();
    for (name, base) in [
        (
            "gen-trig",
            vec!["gen-trig", "--resolution", "32", "--samples", "3", "--seed", "11"],
        ),
        (
            "gen-darcy",
            vec![
                "gen-darcy",
                "--resolution",
                "33",
                "--samples",
                "3",
                "--seed",
                "11",
                "--modes",
                "16",
            ],
        ),
    ] {
        // Two identical runs, then a third with a different worker count.
        let runs: Vec<Vec<u8>> = ["1", "1", "4"]
            .iter()
            .enumerate()
            .map(|(i, threads)| {
                let mut args = base.clone();
                args.extend_from_slice(&["--threads", threads]);
                gen_bytes(&args, &dir.path().join(format!("{name}-{i}.ds")))
            })
            .collect();
        let identical = runs[0] == runs[1] && runs[0] == runs[2];
        ok &= identical;
        detail.push_str(&format!(
            "{name}: {} bytes, repeat+threads{{1,4}} identical={identical}; ",
            runs[0].len()
        ));
    }
    let detail = detail.trim_end_matches("; ").to_string();
    verdict(6, ok, &detail);
    assert!(ok, "generation not byte-identical: {detail}");
}

// ---------------------------------------------------------------------------
// Shared training smoke runs (criteria 7, 8, 9).
// ---------------------------------------------------------------------------

struct SmokeRun {
    loss: LossKind,
    data_seed: u64,
    state: ModelState,
    history: TrainHistory,
}

struct Smoke {
    /// 3 seeds × 2 losses: trigonometric 64×64 data, 100 train / 20 test,
    /// toy model, 50 epochs, spectrum tracked at 20 frequencies.
    runs: Vec<SmokeRun>,
    seconds: f64,
}

impl Smoke {
    fn run(&self, data_seed: u64, loss: LossKind) -> &SmokeRun {
        self.runs
            .iter()
            .find(|r| r.loss == loss && r.data_seed == data_seed)
            .expect("smoke run present")
    }
}

static SMOKE: OnceLock<Smoke> = OnceLock::new();

fn smoke() -> &'static Smoke {
    SMOKE.get_or_init(|| build_smoke().expect("training smoke runs"))
}

fn build_smoke() -> Result<Smoke> {
    let started = Instant::now();
    let mut runs = Vec::new();
    for data_seed in 0..3u64 {
        let (samples, _) = generate_trig(64, 120, data_seed)?;
        for loss in [LossKind::L2, LossKind::H1] {
            let config = TrainConfig {
                batch: 4,
                epochs: 50,
                loss,
                seed: data_seed,
                train_size: 100,
                val_size: 0,
                test_size: 20,
                ..TrainConfig::default()
            };
            let (state, history) = train(&HanoConfig::toy(), &samples, &config, 20)?;
            runs.push(SmokeRun {
                loss,
                data_seed,
                state,
                history,
            });
        }
    }
    Ok(Smoke {
        runs,
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// 7. Training smoke: error halves, and the frequency-weighted objective
//    wins on the frequency-weighted metric.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_training_smoke() {
    let smoke = smoke();
    let mut ok = smoke.seconds <= 3600.0;
    let mut detail = String::new();

    // (a) Final test relative L² at most half its epoch-1 value, for every
    // run regardless of training objective.
    for run in &smoke.runs {
        let first = run.history.records.first().expect("epoch 1").test_l2;
        let last = run.history.records.last().expect("final epoch").test_l2;
        ok &= last <= SMOKE_IMPROVEMENT * first;
        detail.push_str(&format!(
            "{} seed {}: l2 {first:.3}->{last:.3}; ",
            run.loss, run.data_seed
        ));
    }

    // (b) The H¹-trained model reaches a strictly lower final test relative
    // H¹ than the L²-trained model, averaged over the three seeds.
    let mean_final_h1 = |loss: LossKind| -> f64 {
        (0..3u64)
            .map(|s| smoke.run(s, loss).history.records.last().unwrap().test_h1)
            .sum::<f64>()
            / 3.0
    };
    let h1_of_l2 = mean_final_h1(LossKind::L2);
    let h1_of_h1 = mean_final_h1(LossKind::H1);
    ok &= h1_of_h1 < h1_of_l2;
    detail.push_str(&format!(
        "mean final test relH1: h1-trained {h1_of_h1:.3} vs l2-trained {h1_of_l2:.3}; {:.0}s",
        smoke.seconds
    ));

    verdict(7, ok, &detail);
    assert!(ok, "training smoke failed: {detail}");
}

// ---------------------------------------------------------------------------
// 8. Spectral-bias diagnostic on the smoke runs.
// ---------------------------------------------------------------------------

/// The train-split spectrum rows recorded at one epoch of one run.
fn spectrum_at(run: &SmokeRun, epoch: usize) -> &[SpectrumRow] {
    &run.history
        .spectra
        .iter()
        .find(|t| t.epoch == epoch && t.split == "train")
        .expect("train spectrum trace")
        .rows
}

/// Normalized error at the highest and the lowest-nonzero frequency
/// magnitude among the retained dominating rows: each frequency's mean
/// absolute error at the probed epoch divided by its pre-training (epoch-0)
/// value, so 1.0 means "nothing learned yet at this frequency". Conjugate
/// and axis symmetry put several retained ξ in each |ξ| class; the error at
/// a frequency magnitude averages its rows.
fn high_low(run: &SmokeRun, epoch: usize) -> (f64, f64) {
    let rows = spectrum_at(run, epoch);
    let base = spectrum_at(run, 0);
    let sq = |r: &SpectrumRow| r.xi1 * r.xi1 + r.xi2 * r.xi2;
    let hi_sq = rows.iter().map(&sq).max().expect("high frequency");
    let lo_sq = rows
        .iter()
        .map(&sq)
        .filter(|&s| s > 0)
        .min()
        .expect("nonzero frequency");
    let class_mean = |target: i64| {
        let sel: Vec<f64> = rows
            .iter()
            .filter(|r| sq(r) == target)
            .map(|r| {
                let init = base
                    .iter()
                    .find(|b| b.xi1 == r.xi1 && b.xi2 == r.xi2)
                    .expect("frequency present pre-training");
                r.mean_abs_err / init.mean_abs_err
            })
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    (class_mean(hi_sq), class_mean(lo_sq))
}

#[test]
fn acceptance_08_spectral_bias() {
    let smoke = smoke();
    let final_epoch = 50;

    // (a) After one epoch of L² training the high frequency retains more of
    // its initial error than the low one — low frequencies are fitted first
    // (averaged over seeds).
    let (mut high1, mut low1) = (0.0, 0.0);
    for seed in 0..3u64 {
        let (h, l) = high_low(smoke.run(seed, LossKind::L2), 1);
        high1 += h / 3.0;
        low1 += l / 3.0;
    }

    // (b) The frequency-weighted objective flattens the final high/low error
    // ratio relative to plain L² (averaged over seeds).
    let mean_ratio = |loss: LossKind| -> f64 {
        (0..3u64)
            .map(|s| {
                let (h, l) = high_low(smoke.run(s, loss), final_epoch);
                h / l
            })
            .sum::<f64>()
            / 3.0
    };
    let ratio_l2 = mean_ratio(LossKind::L2);
    let ratio_h1 = mean_ratio(LossKind::H1);

    let ok = high1 > low1 && ratio_h1 < ratio_l2;
    verdict(
        8,
        ok,
        &format!(
            "epoch-1 normalized err high {high1:.3} vs low {low1:.3}; \
             final high/low ratio h1 {ratio_h1:.3} vs l2 {ratio_l2:.3}"
        ),
    );
    assert!(
        ok,
        "spectral bias: epoch-1 high {high1:.4} must exceed low {low1:.4}; \
         final ratio h1 {ratio_h1:.4} must be below l2 {ratio_l2:.4}"
    );
}

// ---------------------------------------------------------------------------
// 9. Resolution transfer: evaluate the 64-trained model at 128.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_resolution_transfer() {
    let smoke = smoke();
    let state = &smoke.run(0, LossKind::L2).state;
    // The same underlying coefficient functions sampled at both resolutions:
    // per-sample seeds depend only on the generation seed and index.
    let (set64, _) = generate_trig(64, 20, 777).expect("64x64 eval set");
    let (set128, _) = generate_trig(128, 20, 777).expect("128x128 eval set");

    let (native, _) = evaluate(state, &set64).expect("native evaluation");
    let mut transfer = 0.0;
    for s in &set128 {
        let pred = state.eval_at_resolution(&s.a, 64).expect("transfer forward");
        transfer += rel_l2(&pred, &s.u).expect("transfer error") / set128.len() as f64;
    }

    let ok = transfer <= TRANSFER_FACTOR * native;
    verdict(
        9,
        ok,
        &format!("rel l2 native(64) {native:.3}, transferred(128) {transfer:.3}"),
    );
    assert!(
        ok,
        "transfer error {transfer:.4} exceeds {TRANSFER_FACTOR}x native {native:.4}"
    );
}

// ---------------------------------------------------------------------------
// 10. File-format round trips and corruption detection.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_round_trip_integrity() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut ok = true;
    let mut detail = String::new();

    // Dataset: write → read → rewrite must be byte-identical; flipping one
    // payload byte must be caught by the checksum.
    let samples = vec![
        Sample {
            a: wavy(16, 0.1, 1.0),
            u: wavy(16, 0.9, 0.5),
        },
        Sample {
            a: wavy(16, 2.1, 0.7),
            u: wavy(16, 1.3, 0.4),
        },
    ];
    let header = DatasetHeader {
        version: DATASET_VERSION,
        samples: samples.len() as u32,
        resolution: 16,
        fields_per_sample: FIELDS_PER_SAMPLE,
        generator: "trig".to_string(),
        seed: 7,
        params: GeneratorParams::default(),
    };
    let ds_path = dir.path().join("roundtrip.ds");
    write_dataset(&ds_path, &header, &samples).expect("write dataset");
    let ds_bytes = fs::read(&ds_path).expect("read dataset bytes");
    let (header_back, samples_back) = read_dataset(&ds_path).expect("read dataset");
    let ds_rewrite = dir.path().join("rewrite.ds");
    write_dataset(&ds_rewrite, &header_back, &samples_back).expect("rewrite dataset");
    let ds_roundtrip = ds_bytes == fs::read(&ds_rewrite).expect("read rewrite");
    ok &= ds_roundtrip;

    let mut corrupted = ds_bytes.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 0x01;
    let ds_corrupt = dir.path().join("corrupt.ds");
    fs::write(&ds_corrupt, &corrupted).expect("write corrupted");
    let ds_detected = read_dataset(&ds_corrupt).is_err();
    ok &= ds_detected;
    detail.push_str(&format!(
        "dataset roundtrip={ds_roundtrip} corruption detected={ds_detected}; "
    ));

    // Checkpoint: save → load → resave must be byte-identical with bitwise
    // equal parameters; a flipped payload byte must fail the load.
    let state = ModelState::init(HanoConfig::toy(), 3).expect("model init");
    let ck_path = dir.path().join("model.hck");
    state.save_checkpoint(&ck_path).expect("save checkpoint");
    let ck_bytes = fs::read(&ck_path).expect("read checkpoint bytes");
    let loaded = ModelState::load_checkpoint(&ck_path).expect("load checkpoint");
    let params_equal = state
        .params()
        .iter()
        .zip(loaded.params().iter())
        .all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let ck_resave = dir.path().join("resave.hck");
    loaded.save_checkpoint(&ck_resave).expect("resave checkpoint");
    let ck_roundtrip = params_equal && ck_bytes == fs::read(&ck_resave).expect("read resave");
    ok &= ck_roundtrip;

    let mut ck_corrupted = ck_bytes.clone();
    let mid = ck_corrupted.len() / 2;
    ck_corrupted[mid] ^= 0x01;
    let ck_corrupt = dir.path().join("corrupt.hck");
    fs::write(&ck_corrupt, &ck_corrupted).expect("write corrupted checkpoint");
    let ck_detected = ModelState::load_checkpoint(&ck_corrupt).is_err();
    ok &= ck_detected;
    detail.push_str(&format!(
        "checkpoint roundtrip={ck_roundtrip} corruption detected={ck_detected}"
    ));

    verdict(10, ok, &detail);
    assert!(ok, "round-trip integrity failed: {detail}");
}
