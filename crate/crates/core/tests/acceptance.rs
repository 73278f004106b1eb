//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::sync::OnceLock;
use std::time::Instant;

use magnet_core::baselines::{LinearMotion, LstmBaseline, MlpBaseline};
use magnet_core::eval::{evaluate_rollout, DenoisedStart, EvalOptions, EvalReport};
use magnet_core::nn::gradcheck::check_gradients;
use magnet_core::nn::{Tensor, Var};
use magnet_core::preprocess::{add_gaussian_noise, denoise_dataset, tv_differentiate};
use magnet_core::sim::{rk4_integrate, KuramotoSpec, PointMassSpec, DEFAULT_DT, DEFAULT_SUBSTEPS};
use magnet_core::train::{retune_wrapper, train_single_step, RetuneConfig, TrainConfig, TrainReport};
use magnet_core::{generate_dataset, ArchConfig, Dataset, MagnetModel, Model, SystemKind, SystemSpec, TvConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SYSTEM_SEED: u64 = 11;
const TRAIN_SEED: u64 = 12;
const TEST_SEED: u64 = 13;
const MODEL_SEED: u64 = 14;
const SHUFFLE_SEED: u64 = 15;
const NOISE_SEED: u64 = 16;

const HORIZON: usize = 100;
/// First index with a full 16-sample noisy prefix; all point-mass rollouts
/// start here so clean, noisy and baseline runs share initial conditions.
const NOISY_START: usize = 15;
const TEST_SEQUENCES: usize = 20;
const TEST_LENGTH: usize = 120;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 32,
        seed: SHUFFLE_SEED,
        ..TrainConfig::default()
    }
}

struct PointMassSetup {
    train: Dataset,
    test: Dataset,
}

fn point_mass() -> &'static PointMassSetup {
    static SETUP: OnceLock<PointMassSetup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let spec = SystemSpec::sample(SystemKind::PointMass, 4, DEFAULT_DT, DEFAULT_SUBSTEPS, SYSTEM_SEED).unwrap();
        let train = generate_dataset(&spec, 20, 300, TRAIN_SEED).unwrap();
        let test = generate_dataset(&spec, TEST_SEQUENCES, TEST_LENGTH, TEST_SEED).unwrap();
        PointMassSetup { train, test }
    })
}

fn position_options(start: usize) -> EvalOptions {
    EvalOptions {
        horizon: HORIZON,
        start: Some(start),
        channels: SystemKind::PointMass.metric_channels(),
    }
}

/// Clean desk-scale point-mass run: trained model, report, evaluation.
struct CleanRun {
    model: MagnetModel,
    report: TrainReport,
    eval: EvalReport,
}

fn clean_run() -> CleanRun {
    let setup = point_mass();
    let arch = ArchConfig::for_system(SystemKind::PointMass);
    let mut model = MagnetModel::build(arch, 4, DEFAULT_DT, MODEL_SEED).unwrap();
    let report = train_single_step(&mut model, &setup.train, &desk_config()).unwrap();
    let eval = evaluate_rollout(&model, &setup.test, &setup.test, &position_options(NOISY_START)).unwrap();
    CleanRun { model, report, eval }
}

fn shared_clean() -> &'static CleanRun {
    static RUN: OnceLock<CleanRun> = OnceLock::new();
    RUN.get_or_init(clean_run)
}

fn criterion_counts() -> Outcome {
    let arch = ArchConfig::for_system(SystemKind::PointMass);
    let (core, w4) = MagnetModel::build(arch.clone(), 4, DEFAULT_DT, 0).unwrap().count_params();
    let (core8, w8) = MagnetModel::build(arch, 8, DEFAULT_DT, 0).unwrap().count_params();
    outcome(
        core == 9108 && core8 == 9108 && w4 == 120 && w8 == 496,
        format!("core={core} wrapper(N=4)={w4} wrapper(N=8)={w8}"),
    )
}

/// Worst relative error over sampled coordinates of every tensor, for
/// `instances` random models, states and targets.
fn gradcheck_model<M: Model>(build: impl Fn(u64) -> M, instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let model = build(k);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
        let rows = 3;
        let frame = model.frame_len();
        let window: Vec<Tensor> = (0..model.history_len())
            .map(|_| {
                let data = (0..rows * frame).map(|_| rng.random_range(-1.5..1.5)).collect();
                Tensor::new(vec![rows, frame], data).unwrap()
            })
            .collect();
        let target = {
            let last = window.last().unwrap();
            let data = last
                .data()
                .iter()
                .map(|v| v + 0.6 * { let z: f64 = StandardNormal.sample(&mut rng); z })
                .collect();
            Tensor::new(vec![rows, frame], data).unwrap()
        };
        let sizes: Vec<usize> = model.tensors().iter().map(Tensor::numel).collect();
        let picks: Vec<Vec<bool>> = sizes
            .iter()
            .map(|&n| {
                let mut mask = vec![n <= 8; n];
                for _ in 0..8.min(n) {
                    mask[rng.random_range(0..n)] = true;
                }
                mask
            })
            .collect();
        let report = check_gradients(
            model.tensors(),
            1e-6,
            |tape, params: &[Var]| {
                let vars: Vec<Var> = window.iter().map(|w| tape.constant(w.clone())).collect();
                let pred = model.predict_next(tape, params, &vars)?;
                tape.smooth_l1(pred, target.clone())
            },
            |t, e| picks[t][e],
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let mut magnet_arch = ArchConfig::for_system(SystemKind::PointMass);
    magnet_arch.h_widths = vec![64, 64];
    let magnet = gradcheck_model(|k| MagnetModel::build(magnet_arch.clone(), 3, 0.1, 50 + k).unwrap(), 20);
    let mlp = gradcheck_model(|k| MlpBaseline::build(3, 4, 0.1, &MlpBaseline::DEFAULT_HIDDEN, 70 + k).unwrap(), 20);
    let lstm = gradcheck_model(|k| LstmBaseline::build(3, 4, 0.1, 64, 2, 90 + k).unwrap(), 20);
    let worst = magnet.max(mlp).max(lstm);
    outcome(
        worst < 1e-5,
        format!("max relative error magnet={magnet:.2e} mlp={mlp:.2e} lstm={lstm:.2e} (limit 1e-5)"),
    )
}

fn criterion_physics() -> Outcome {
    // Momentum drift over 1000 samples.
    let spec = SystemSpec::sample(SystemKind::PointMass, 4, DEFAULT_DT, DEFAULT_SUBSTEPS, 3).unwrap();
    let SystemSpec::PointMass(pm) = &spec else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = spec.initial_state(&mut rng);
    let traj = rk4_integrate(&spec, &init, 1000).unwrap();
    let momentum = |frame: &[f64]| -> ([f64; 2], f64) {
        let mut p = [0.0; 2];
        let mut scale = 0.0;
        for (i, m) in pm.masses.iter().enumerate() {
            p[0] += m * frame[4 * i + 2];
            p[1] += m * frame[4 * i + 3];
            scale += m * frame[4 * i + 2].hypot(frame[4 * i + 3]);
        }
        (p, scale)
    };
    let (p0, scale) = momentum(&init);
    let denom = p0[0].hypot(p0[1]).max(scale);
    let drift = (0..1000)
        .map(|t| {
            let (p, _) = momentum(&traj[t * 16..(t + 1) * 16]);
            (p[0] - p0[0]).hypot(p[1] - p0[1]) / denom
        })
        .fold(0.0, f64::max);

    // Mean-phase rate.
    let mut krng = ChaCha8Rng::seed_from_u64(5);
    let ks = KuramotoSpec::sample(8, DEFAULT_DT, DEFAULT_SUBSTEPS, &mut krng);
    let target = ks.frequencies.iter().sum::<f64>() / 8.0;
    let ksys = SystemSpec::Kuramoto(ks);
    let ktraj = rk4_integrate(&ksys, &ksys.initial_state(&mut krng), 500).unwrap();
    let mean = |t: usize| ktraj[t * 8..(t + 1) * 8].iter().sum::<f64>() / 8.0;
    let rate_err = [(0, 499), (120, 121), (250, 400)]
        .iter()
        .map(|&(a, b)| ((mean(b) - mean(a)) / ((b - a) as f64 * DEFAULT_DT) - target).abs())
        .fold(0.0, f64::max);

    // RK4 refinement ratio.
    let end = |substeps: usize| -> Vec<f64> {
        let mut s: PointMassSpec = pm.clone();
        s.dt = 0.2;
        s.substeps = substeps;
        let t = rk4_integrate(&SystemSpec::PointMass(s), &init, 21).unwrap();
        t[20 * 16..].to_vec()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let reference = end(8);
    let ratio = dist(&end(1), &reference) / dist(&end(2), &reference);

    outcome(
        drift < 1e-8 && rate_err < 1e-6 && (12.0..=20.0).contains(&ratio),
        format!("momentum drift {drift:.2e} (<1e-8), mean-phase rate error {rate_err:.2e} (<1e-6), RK4 refinement ratio {ratio:.2} (12..20)"),
    )
}

fn criterion_clean_point_mass() -> Outcome {
    let run = shared_clean();
    let setup = point_mass();
    let linear = LinearMotion {
        frame_len: setup.test.frame_len(),
    };
    let base = evaluate_rollout(&linear, &setup.test, &setup.test, &position_options(NOISY_START)).unwrap();
    let (m, l) = (run.eval.mse_at(HORIZON), base.mse_at(HORIZON));
    outcome(
        m <= 0.1 * l && run.eval.failures.is_empty(),
        format!("step-100 position MSE magnet={m:.3e} linear={l:.3e} ratio={:.4} (limit 0.1)", m / l),
    )
}

fn criterion_kuramoto() -> Outcome {
    let spec = SystemSpec::sample(SystemKind::Kuramoto, 8, DEFAULT_DT, DEFAULT_SUBSTEPS, SYSTEM_SEED).unwrap();
    let train = generate_dataset(&spec, 20, 300, TRAIN_SEED).unwrap();
    let test = generate_dataset(&spec, TEST_SEQUENCES, TEST_LENGTH, TEST_SEED).unwrap();
    let mut model = MagnetModel::build(ArchConfig::for_system(SystemKind::Kuramoto), 8, DEFAULT_DT, MODEL_SEED).unwrap();
    train_single_step(&mut model, &train, &desk_config()).unwrap();
    let opts = EvalOptions {
        horizon: HORIZON,
        start: Some(1),
        channels: SystemKind::Kuramoto.metric_channels(),
    };
    let magnet = evaluate_rollout(&model, &test, &test, &opts).unwrap();
    let linear = evaluate_rollout(&LinearMotion { frame_len: 8 }, &test, &test, &opts).unwrap();
    let pass = [50, 100].iter().all(|&k| magnet.mse_at(k) < linear.mse_at(k));
    outcome(
        pass,
        format!(
            "phase MSE step 50 magnet={:.3e} linear={:.3e}; step 100 magnet={:.3e} linear={:.3e}",
            magnet.mse_at(50),
            linear.mse_at(50),
            magnet.mse_at(100),
            linear.mse_at(100)
        ),
    )
}

fn criterion_noisy() -> Outcome {
    let setup = point_mass();
    let clean = shared_clean();
    let tv = TvConfig::default();
    let noisy_train = add_gaussian_noise(&setup.train, &[0, 1], 0.01, NOISE_SEED).unwrap();
    let prepared = denoise_dataset(&noisy_train, &tv).unwrap();
    let mut model =
        MagnetModel::build(ArchConfig::for_system(SystemKind::PointMass), 4, DEFAULT_DT, MODEL_SEED).unwrap();
    train_single_step(&mut model, &prepared, &desk_config()).unwrap();

    let noisy_test = add_gaussian_noise(&setup.test, &[0, 1], 0.01, NOISE_SEED + 1).unwrap();
    let predictor = DenoisedStart::new(&model, tv);
    let report = evaluate_rollout(&predictor, &noisy_test, &setup.test, &position_options(NOISY_START)).unwrap();
    let (n, c) = (report.mse_at(HORIZON), clean.eval.mse_at(HORIZON));
    outcome(
        n <= 20.0 * c && report.failures.is_empty(),
        format!("step-100 position MSE noisy-trained={n:.3e} clean-trained={c:.3e} ratio={:.2} (limit 20)", n / c),
    )
}

fn criterion_retune() -> Outcome {
    let pretrained = &shared_clean().model;
    let target = SystemSpec::sample(SystemKind::PointMass, 8, DEFAULT_DT, DEFAULT_SUBSTEPS, SYSTEM_SEED + 100).unwrap();
    let stream = generate_dataset(&target, 1, 3000, TRAIN_SEED + 100).unwrap();
    let test = generate_dataset(&target, TEST_SEQUENCES, TEST_LENGTH, TEST_SEED + 100).unwrap();
    let mut model = pretrained.with_averaged_wrapper(8).unwrap();
    let opts = EvalOptions {
        horizon: HORIZON,
        start: Some(1),
        channels: SystemKind::PointMass.metric_channels(),
    };
    let before = evaluate_rollout(&model, &test, &test, &opts).unwrap().mse_at(HORIZON);
    let core_before: Vec<Vec<u64>> = model.tensors()[..model.core_len()]
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let cfg = RetuneConfig {
        epochs: 10,
        batch_size: 32,
        seed: SHUFFLE_SEED,
        ..RetuneConfig::default()
    };
    retune_wrapper(&mut model, &stream, &cfg).unwrap();
    let core_after: Vec<Vec<u64>> = model.tensors()[..model.core_len()]
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let frozen = core_before == core_after;
    let after = evaluate_rollout(&model, &test, &test, &opts).unwrap().mse_at(HORIZON);
    outcome(
        after <= 0.5 * before && frozen,
        format!(
            "step-100 MSE before={before:.3e} after={after:.3e} ratio={:.3} (limit 0.5); core bitwise unchanged={frozen}",
            after / before
        ),
    )
}

fn criterion_tv() -> Outcome {
    let dt = 0.01;
    let slope = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y: Vec<f64> = (0..200)
        .map(|k| slope * k as f64 * dt + 0.05 * { let z: f64 = StandardNormal.sample(&mut rng); z })
        .collect();
    let u = tv_differentiate(&y, dt, &TvConfig::default()).unwrap();
    let tv_err = u.iter().map(|v| (v - slope).abs()).sum::<f64>() / u.len() as f64 / slope;
    let naive_err = y.windows(2).map(|w| ((w[1] - w[0]) / dt - slope).abs()).sum::<f64>() / (y.len() - 1) as f64 / slope;
    outcome(
        tv_err < 0.05 && naive_err > 0.5,
        format!("mean relative slope error TV={:.2}% (limit 5%), naive={:.0}% (must exceed 50%)", 100.0 * tv_err, 100.0 * naive_err),
    )
}

fn criterion_determinism() -> Outcome {
    let first = shared_clean();
    let second = clean_run();
    let same_trace = first.report.trace.to_csv() == second.report.trace.to_csv();
    let same_csv = first.eval.to_csv() == second.eval.to_csv();
    let same_model = first
        .model
        .tensors()
        .iter()
        .zip(second.model.tensors())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    outcome(
        same_trace && same_csv && same_model,
        format!("loss trace identical={same_trace}, evaluation CSV identical={same_csv}, parameters identical={same_model}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 parameter counts", criterion_counts),
        ("2 gradient correctness", criterion_gradients),
        ("3 simulator physics", criterion_physics),
        ("4 clean point-mass training", criterion_clean_point_mass),
        ("5 Kuramoto ordering", criterion_kuramoto),
        ("6 noisy regime", criterion_noisy),
        ("7 wrapper re-tuning", criterion_retune),
        ("8 TV differentiation", criterion_tv),
        ("9 determinism", criterion_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = run();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} criterion {name}: {} [{:.1}s]",
            result.detail,
            t0.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
