//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines appear in order and unbuffered.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use udc::beamform::mvdr_souden;
use udc::cacgmm::{cacg_log_pdf, em_fit_with, Initialization};
use udc::linalg::CMatrix;
use udc::masks::{MaskSet, MaskStage, SIMPLEX_TOL};
use udc::metrics::{ExtractionMode, SceneStfts};
use udc::mixsim::{render_scene, sample_scene, MixtureScene, SimConfig};
use udc::permalign::align;
use udc::pipeline::{
    evaluate_masks, predict_mixture, teach_mixture, PredictionMode, Stage, StageLog, StudentConfig, TeacherConfig,
};
use udc::stft::{istft, stft, MultichannelStft, StftConfig};
use udc::student::{
    dc_loss, extract_features, harden_targets, train, NetConfig, StudentNet, TargetAssignment, TrainingExample,
};
use udc::tensor_io::AudioBuffer;
use udc::C64;

const HELD_OUT: u64 = 25;
const TRAIN_MIXTURES: u64 = 200;
const HELD_OUT_SEED: u64 = 1_000_000;
const MONOTONICITY_SEED: u64 = 2_000_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = out.pass && in_time;
        if !pass {
            self.failures += 1;
        }
        let timing = if in_time {
            format!("{:.1}s", elapsed.as_secs_f64())
        } else {
            format!("{:.1}s, over the {:.0}s budget", elapsed.as_secs_f64(), budget.as_secs_f64())
        };
        println!(
            "{} criterion {id:>2} {name}: {} ({timing})",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
}

fn sim_config() -> SimConfig {
    SimConfig {
        mics: 4,
        ..SimConfig::default()
    }
}

fn scene(seed: u64) -> MixtureScene {
    let cfg = sim_config();
    render_scene(&sample_scene(seed, &cfg).unwrap(), cfg.max_order).unwrap()
}

fn c(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn random_pd(dim: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    let mut m = CMatrix::zeros(dim);
    for _ in 0..dim + 1 {
        let v: Vec<C64> = (0..dim).map(|_| c(rng)).collect();
        m.rank1_update_lower(1.0, &v);
    }
    m.mirror_lower();
    m.add_diagonal(0.1);
    m
}

fn max_defect(acc: &mut f64, masks: &MaskSet) {
    *acc = acc.max(masks.simplex_defect());
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = rng.random_range(3..6);
        let frames = rng.random_range(3..7);
        let classes = rng.random_range(2..4);
        let cfg = NetConfig {
            bins,
            embedding_dim: rng.random_range(2..5),
            hidden: rng.random_range(4..9),
            context: 1,
        };
        let net = StudentNet::new(cfg, seed).unwrap();
        let feats = udc::student::FeatureField::new(
            (0..frames * bins).map(|_| rng.random_range(-2.0..2.0)).collect(),
            frames,
            bins,
        )
        .unwrap();
        let targets =
            TargetAssignment::new((0..frames * bins).map(|_| rng.random_range(0..classes)).collect(), classes).unwrap();
        let (_, analytic) = net.loss_and_grad(&feats, &targets).unwrap();
        let analytic = analytic.slices().iter().flat_map(|s| s.iter().copied()).collect::<Vec<_>>();
        let mut numeric = Vec::with_capacity(analytic.len());
        let eps = 1e-5;
        let mut probe = net.clone();
        for (slot, len) in net.params().slices().iter().map(|s| s.len()).enumerate() {
            for i in 0..len {
                let orig = probe.params().slices()[slot][i];
                probe.params_mut().slices_mut()[slot][i] = orig + eps;
                let up = probe.loss(&feats, &targets).unwrap();
                probe.params_mut().slices_mut()[slot][i] = orig - eps;
                let down = probe.loss(&feats, &targets).unwrap();
                probe.params_mut().slices_mut()[slot][i] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        worst = worst.max(diff / scale);
    }
    outcome(worst < 1e-4, format!("worst relative max-norm error {worst:.2e} (< 1e-4)"))
}

fn loss_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=64);
        let dim = rng.random_range(1..8);
        let classes = rng.random_range(2..5);
        let mut e = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0f64..1.0));
        for mut row in e.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut frob = 0.0;
        for i in 0..n {
            for j in 0..n {
                let eet = e.row(i).dot(&e.row(j));
                let cct = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                frob += (eet - cct) * (eet - cct);
            }
        }
        let oracle = frob / (n * n) as f64;
        let loss = dc_loss(e.view(), &TargetAssignment::new(labels, classes).unwrap()).unwrap();
        worst = worst.max((loss - oracle).abs());
    }
    outcome(worst <= 1e-10, format!("worst deviation {worst:.2e} over 50 instances (<= 1e-10)"))
}

fn mvdr_closed_form() -> Outcome {
    let (mut worst_w, mut worst_resp) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(2..7);
        let d: Vec<C64> = (0..dim).map(|_| c(&mut rng)).collect();
        let sigma = rng.random_range(0.01..10.0);
        let mut inter = CMatrix::identity(dim);
        inter.scale(sigma);
        let reference = rng.random_range(0..dim);
        let w = mvdr_souden(&CMatrix::outer(&d), &inter, reference).unwrap().w;
        let norm2: f64 = d.iter().map(|z| z.norm_sqr()).sum();
        for (wi, di) in w.iter().zip(&d) {
            worst_w = worst_w.max((wi - di * d[reference].conj() / norm2).norm());
        }
        let resp: C64 = w.iter().zip(&d).map(|(a, b)| a.conj() * b).sum();
        worst_resp = worst_resp.max((resp - d[reference]).norm());
    }
    outcome(
        worst_w <= 1e-10 && worst_resp <= 1e-10,
        format!("max |w - w*| {worst_w:.2e}, max |w^H d - d_ref| {worst_resp:.2e} (<= 1e-10)"),
    )
}

fn stft_reconstruction() -> Outcome {
    let cfg = StftConfig::new(512, 128).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(1000..40000);
        let x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let back = istft(&stft(&AudioBuffer::mono(x.clone(), 16000).unwrap(), cfg).unwrap(), len).unwrap();
        worst = x.iter().zip(back.channel(0)).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    outcome(worst < 1e-6, format!("max abs error {worst:.2e} over 20 signals (< 1e-6)"))
}

/// Masks driven by per-class on/off activity shared across frequency, with
/// frequency-dependent jitter.
fn activity_masks(classes: usize, frames: usize, bins: usize, rng: &mut ChaCha8Rng) -> MaskSet {
    let activity: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut on = rng.random_bool(0.5);
            (0..frames)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        on = !on;
                    }
                    if on { 1.0 } else { 0.05 }
                })
                .collect()
        })
        .collect();
    let mut v = vec![0.0; classes * frames * bins];
    for t in 0..frames {
        for f in 0..bins {
            let raw: Vec<f64> = (0..classes).map(|k| activity[k][t] * rng.random_range(0.2..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..classes {
                v[(k * frames + t) * bins + f] = raw[k] / s;
            }
        }
    }
    MaskSet::new(v, classes, frames, bins, MaskStage::Raw).unwrap()
}

fn permutation_recovery() -> Outcome {
    let (mut recovered, mut total) = (0usize, 0usize);
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = if seed % 2 == 0 { 2 } else { 3 };
        let (frames, bins) = (120, 65);
        let truth = activity_masks(classes, frames, bins, &mut rng);
        let perms: Vec<Vec<usize>> = (0..bins)
            .map(|_| {
                let mut p: Vec<usize> = (0..classes).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let scrambled = truth.permute_per_frequency(&perms).unwrap();
        let (aligned, _) = align(&scrambled).unwrap();
        // Best global relabeling, then count bins that match it exactly.
        let best = itertools::Itertools::permutations(0..classes, classes)
            .map(|g| {
                (0..bins)
                    .filter(|&f| {
                        (0..classes).all(|k| {
                            (0..frames).all(|t| (aligned.get(g[k], t, f) - truth.get(k, t, f)).abs() < 1e-12)
                        })
                    })
                    .count()
            })
            .max()
            .unwrap();
        recovered += best;
        total += bins;
    }
    let rate = recovered as f64 / total as f64;
    outcome(
        rate >= 0.95,
        format!("{:.2}% of {total} permuted bins recovered over 200 fixtures (>= 95%)", 100.0 * rate),
    )
}

fn cacg_normalization() -> Outcome {
    let samples = 400_000;
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = if seed % 2 == 0 { 2 } else { 3 };
        let shape = random_pd(dim, &mut rng);
        let mut sum = 0.0;
        for _ in 0..samples {
            let mut z: Vec<C64> = (0..dim).map(|_| c(&mut rng)).collect();
            let n = z.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            z.iter_mut().for_each(|v| *v /= n);
            sum += cacg_log_pdf(&z, &shape).unwrap().exp();
        }
        // Area of the unit sphere in C^D is 2 pi^D / (D-1)!.
        let area = 2.0 * std::f64::consts::PI.powi(dim as i32) / (1..dim).product::<usize>() as f64;
        let integral = area * sum / samples as f64;
        worst = worst.max((integral - 1.0).abs());
    }
    outcome(worst <= 0.02, format!("worst |integral - 1| {worst:.4} over 10 shapes (<= 0.02)"))
}

fn em_monotonicity(defect: &mut f64) -> Outcome {
    let stft_cfg = StftConfig::default();
    let results: Vec<(f64, usize, f64)> = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let y = stft(&scene(MONOTONICITY_SEED + i).observation, stft_cfg).unwrap();
            let mut worst_defect = 0.0f64;
            let fit = em_fit_with(&y, 3, Initialization::Random { seed: i }, 100, |_, m| {
                max_defect(&mut worst_defect, m)
            })
            .unwrap();
            let worst_drop = fit
                .loglik_trace
                .windows(2)
                .map(|w| (w[0] - w[1]) / w[0].abs().max(1e-300))
                .fold(f64::NEG_INFINITY, f64::max);
            (worst_drop, y.frames(), worst_defect)
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let frames = results[0].1;
    for r in &results {
        *defect = defect.max(r.2);
    }
    outcome(
        worst <= 1e-6,
        format!("largest relative decrease {worst:.2e} over 20 mixtures, T={frames}, F=257, D=4, K=3 (<= 1e-6)"),
    )
}

struct HeldOut {
    stft: MultichannelStft,
    truth: SceneStfts,
}

fn held_out() -> Vec<HeldOut> {
    let cfg = StftConfig::default();
    (0..HELD_OUT)
        .into_par_iter()
        .map(|i| {
            let s = scene(HELD_OUT_SEED + i);
            HeldOut {
                stft: stft(&s.observation, cfg).unwrap(),
                truth: SceneStfts::from_scene(&s, cfg).unwrap(),
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variant_gains(
    data: &[HeldOut],
    mode: PredictionMode,
    net: Option<&StudentNet>,
    teacher: &TeacherConfig,
    student: &StudentConfig,
    defect: &mut f64,
) -> (Vec<f64>, Vec<StageLog>) {
    let results: Vec<(f64, StageLog, f64)> = data
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut log = StageLog::default();
            let masks = predict_mixture(&d.stft, mode, teacher, student, net, i as u64, &mut log).unwrap();
            let entry = evaluate_masks(&format!("{i}"), &d.stft, &d.truth, &masks, ExtractionMode::Mvdr, 0).unwrap();
            (entry.gain_db, log, masks.simplex_defect())
        })
        .collect();
    let mut gains = Vec::new();
    let mut logs = Vec::new();
    for (g, l, dft) in results {
        gains.push(g);
        logs.push(l);
        *defect = defect.max(dft);
    }
    (gains, logs)
}

fn student_corpus(teacher: &TeacherConfig, defect: &mut f64) -> Vec<TrainingExample> {
    let cfg = StftConfig::default();
    let results: Vec<(TrainingExample, f64)> = (0..TRAIN_MIXTURES)
        .into_par_iter()
        .map(|i| {
            let y = stft(&scene(i).observation, cfg).unwrap();
            let masks = teach_mixture(&y, teacher, i, &mut StageLog::default()).unwrap();
            let example =
                TrainingExample::new(extract_features(&y.select_channel(0).unwrap()).unwrap(), harden_targets(&masks))
                    .unwrap();
            (example, masks.simplex_defect())
        })
        .collect();
    results
        .into_iter()
        .map(|(e, d)| {
            *defect = defect.max(d);
            e
        })
        .collect()
}

fn main() -> ExitCode {
    // Accepts and ignores libtest flags such as --nocapture.
    let mut report = Report { failures: 0 };
    let minute = Duration::from_secs(60);
    let unbounded = Duration::from_secs(24 * 3600);
    let mut defect = 0.0f64;

    report.run(4, "gradient correctness", minute, gradient_check);
    report.run(5, "loss oracle equivalence", unbounded, loss_oracle);
    report.run(6, "MVDR closed form", unbounded, mvdr_closed_form);
    report.run(7, "STFT perfect reconstruction", unbounded, stft_reconstruction);
    report.run(8, "permutation alignment", unbounded, permutation_recovery);
    report.run(9, "cACG normalization", unbounded, cacg_normalization);
    report.run(1, "EM monotonicity", 5 * minute, || em_monotonicity(&mut defect));

    let teacher = TeacherConfig::default();
    let student = StudentConfig::default();
    let start = Instant::now();
    let data = held_out();
    let mut teacher_gain = f64::NAN;
    report.run(2, "teacher efficacy", 15 * minute, || {
        let (gains, _) = variant_gains(&data, PredictionMode::TeacherOnly, None, &teacher, &student, &mut defect);
        teacher_gain = mean(&gains);
        outcome(
            teacher_gain >= 5.0,
            format!("random-init cACGMM + alignment + MVDR mean gain {teacher_gain:.2} dB on {HELD_OUT} mixtures (>= 5 dB)"),
        )
    });
    let budget = (120 * minute).saturating_sub(start.elapsed());
    report.run(3, "student-initialized cACGMM ordering", budget, || {
        let corpus = student_corpus(&teacher, &mut defect);
        let net = StudentNet::new(student.net_config(257), student.seed).unwrap();
        let (net, log) = train(net, &corpus, &student.train).unwrap();
        let (gains, logs) =
            variant_gains(&data, PredictionMode::StudentInitCacgmm, Some(&net), &teacher, &student, &mut defect);
        let gain = mean(&gains);
        let skipped = logs.iter().all(|l| l.contains(Stage::RefineEm) && !l.contains(Stage::Permalign));
        outcome(
            gain >= teacher_gain + 0.5 && skipped,
            format!(
                "student-init gain {gain:.2} dB vs random-init {teacher_gain:.2} dB (needs >= {:.2}); \
                 permalign skipped on {}/{HELD_OUT}; {} training mixtures, best step {} of {}",
                teacher_gain + 0.5,
                logs.iter().filter(|l| !l.contains(Stage::Permalign)).count(),
                corpus.len(),
                log.best_step,
                log.steps_run
            ),
        )
    });
    report.run(10, "simplex property", unbounded, || {
        outcome(
            defect <= SIMPLEX_TOL,
            format!("worst simplex defect {defect:.2e} across EM iterations and pipeline stages (<= {SIMPLEX_TOL:e})"),
        )
    });

    if report.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", report.failures);
        ExitCode::FAILURE
    }
}
