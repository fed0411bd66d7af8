//! End-to-end acceptance checks, one test per criterion.
//!
//! Every test prints a single `PASS`/`FAIL` line. The tests hold a shared
//! lock so that the runtime limits measure one job at a time on the machine.
//!
//! Criteria 5 to 8 need the Speech Commands corpus, located through
//! `SPEECH_COMMANDS_DIR`. Without it they fail with "corpus not found".
//! Criterion 4 falls back to a generated corpus, since it only checks
//! byte-level reproducibility.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlkws::dataset::Subset;
use rlkws::experiment::csv::read_metrics_csv;
use rlkws::experiment::{run_benchmark, ExperimentConfig, Profile};
use rlkws::features::{mfcc, FeatureMatrix, MfccConfig};
use rlkws::metrics::EpisodeMetrics;
use rlkws::model::{build, load_checkpoint_for, predict, save_checkpoint, Architecture, ModelPair, PolicyParams};
use rlkws::rl::{self, Agent, EpisodeHistory, RlConfig, WarmStart};
use rlkws::supervised::Sample;
use rlkws::synth::{generate, SynthConfig};
use rlkws_nn::check::{max_relative_error, numeric_gradient};
use rlkws_nn::{Graph, NodeId, Tensor};

const CORPUS_ENV: &str = "SPEECH_COMMANDS_DIR";
const DESK_BUDGET: Duration = Duration::from_secs(3600);

type Outcome = Result<String, String>;
type OpBuilder = Box<dyn Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId>;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail}"),
        Err(detail) => {
            println!("FAIL criterion {id:>2} ({name}): {detail}");
            panic!("criterion {id} failed: {detail}");
        }
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn corpus() -> Result<PathBuf, String> {
    match std::env::var_os(CORPUS_ENV).map(PathBuf::from) {
        Some(p) if p.join("left").is_dir() && p.join("right").is_dir() => Ok(p),
        Some(p) => Err(format!("corpus not found: {} has no left/ and right/", p.display())),
        None => Err(format!("corpus not found: set {CORPUS_ENV} to the Speech Commands root")),
    }
}

// ---------------------------------------------------------------- criterion 1

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error of the analytic gradient of `sum(out * proj)` with respect
/// to every tensor in `params`.
fn op_error<F>(params: Vec<Tensor<f64>>, seed: u64, build_op: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
{
    let n = params.len();
    let scalar = |ps: &[Tensor<f64>], grads: bool| {
        let mut g = Graph::new(ps);
        let ids: Vec<NodeId> = (0..n).map(|i| g.param(i).unwrap()).collect();
        let out = build_op(&mut g, &ids);
        let shape = g.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let proj = g.input(random(&shape, &mut rng));
        let m = g.mul(out, proj).unwrap();
        let loss = g.sum(m);
        let value = g.value(loss).data()[0];
        let mut acc: Vec<Tensor<f64>> = ps.iter().map(|p| Tensor::zeros(p.shape())).collect();
        if grads {
            g.backward(loss, 1.0).accumulate_params(&g, &mut acc);
        }
        (value, acc)
    };
    let (_, analytic) = scalar(&params, true);
    let mut ps = params;
    let numeric = numeric_gradient(&mut ps, |ps| scalar(ps, false).0);
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_op = 0.0f64;
    let mut checks = 0;
    let mut failures = Vec::new();
    for seed in 1..=5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 2 + seed as usize % 3;
        let cases: Vec<(&str, Vec<Tensor<f64>>, OpBuilder)> = vec![
            ("dense", vec![random(&[4], &mut rng), random(&[3, 4], &mut rng), random(&[3], &mut rng)],
                Box::new(|g, p| g.dense(p[0], p[1], p[2]).unwrap())),
            ("conv1d", vec![random(&[2, 6, 2], &mut rng), random(&[3, 2, 3], &mut rng), random(&[3], &mut rng)],
                Box::new(|g, p| g.conv1d(p[0], p[1], p[2]).unwrap())),
            ("maxpool1d", vec![random(&[8, 3], &mut rng)], Box::new(|g, p| g.maxpool1d(p[0], 2).unwrap())),
            ("lstm", vec![random(&[4, 3], &mut rng), random(&[4 * h, 3], &mut rng),
                random(&[4 * h, h], &mut rng), random(&[4 * h], &mut rng)],
                Box::new(|g, p| g.lstm(p[0], p[1], p[2], p[3]).unwrap())),
            ("relu", vec![random(&[7], &mut rng)], Box::new(|g, p| g.relu(p[0]))),
            ("dropout", vec![random(&[7], &mut rng)], Box::new(move |g, p| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                g.dropout(p[0], 0.3, true, &mut r).unwrap()
            })),
            ("add+mul", vec![random(&[5], &mut rng), random(&[5], &mut rng)], Box::new(|g, p| {
                let m = g.mul(p[0], p[1]).unwrap();
                g.add(m, p[1]).unwrap()
            })),
            ("softmax", vec![random(&[5], &mut rng)], Box::new(|g, p| g.softmax(p[0]))),
            ("cross_entropy", vec![random(&[4], &mut rng)], Box::new(move |g, p| {
                let s = g.softmax(p[0]);
                g.cross_entropy(s, seed as usize % 4).unwrap()
            })),
            ("huber", vec![random(&[6], &mut rng), random(&[6], &mut rng)], Box::new(|g, p| {
                // Widened so both branches of the loss are hit.
                let three = g.input(Tensor::full(&[6], 3.0));
                let wide = g.mul(p[0], three).unwrap();
                g.huber(wide, p[1], 1.0).unwrap()
            })),
        ];
        for (name, params, f) in cases {
            let err = op_error(params, seed, f);
            checks += 1;
            worst_op = worst_op.max(err);
            if err > 1e-4 {
                failures.push(format!("{name} seed {seed}: {err:.2e}"));
            }
        }
    }

    let arch = Architecture {
        conv_filters: [3, 2],
        lstm_hidden: 4,
        dense: vec![5, 3],
        input_scale: 0.05,
        ..Architecture::new(6, 4, 2)
    };
    let mut worst_net = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let p = PolicyParams::<f64>::init(arch.clone(), &mut rng).unwrap();
        let mut tensors: Vec<Tensor<f64>> = p.tensors().to_vec();
        for t in tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let values = (0..24).map(|_| rng.random_range(-30.0f32..30.0)).collect();
        let state = FeatureMatrix::new(6, 4, values).unwrap();
        let label = seed as usize % 2;
        let loss_of = |ts: &[Tensor<f64>]| {
            let mut g = Graph::new(ts);
            let mut drop = ChaCha8Rng::seed_from_u64(seed);
            let probs = build(&mut g, &arch, &state, true, &mut drop).unwrap();
            let loss = g.cross_entropy(probs, label).unwrap();
            let mut acc: Vec<Tensor<f64>> = ts.iter().map(|t| Tensor::zeros(t.shape())).collect();
            g.backward(loss, 1.0).accumulate_params(&g, &mut acc);
            (g.value(loss).data()[0], acc)
        };
        let (_, analytic) = loss_of(&tensors);
        let numeric = numeric_gradient(&mut tensors, |ts| loss_of(ts).0);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        worst_net = worst_net.max(err);
        if err > 1e-3 {
            failures.push(format!("policy network seed {seed}: {err:.2e}"));
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    if failures.is_empty() {
        Ok(format!(
            "{checks} op checks, worst {worst_op:.2e} (limit 1e-4); network worst {worst_net:.2e} (limit 1e-3); {:.1} s",
            start.elapsed().as_secs_f64()
        ))
    } else {
        Err(failures.join("; "))
    }
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = serial();
    report(1, "gradient suite", gradient_suite());
}

// ---------------------------------------------------------------- criterion 2

fn fixture(name: &str) -> Vec<f64> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name);
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .flat_map(|l| l.split_whitespace().map(|v| v.parse::<f64>().unwrap()))
        .collect()
}

fn dsp_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = MfccConfig::default();
    let sine: Vec<f32> = (0..16000)
        .map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16000.0).sin() as f32)
        .collect();
    let mut detail = Vec::new();
    for (name, signal) in [("sine440_mfcc.txt", sine), ("zeros_mfcc.txt", vec![0.0f32; 16000])] {
        let reference = fixture(name);
        let ours: Vec<f64> = mfcc(&signal, &cfg).map_err(|e| e.to_string())?.coeffs().iter().map(|&v| v as f64).collect();
        if ours.len() != reference.len() {
            return Err(format!("{name}: {} values vs {}", ours.len(), reference.len()));
        }
        let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = ours.iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let rel = diff / scale;
        if rel > 1e-3 {
            return Err(format!("{name}: relative error {rel:.2e}"));
        }
        detail.push(format!("{name} {rel:.1e}"));
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{} (limit 1e-3)", detail.join(", ")))
}

#[test]
fn criterion_02_dsp_oracle() {
    let _g = serial();
    report(2, "DSP oracle", dsp_oracle());
}

// ---------------------------------------------------------------- criterion 3

fn tiny_arch(classes: usize) -> Architecture {
    Architecture {
        conv_filters: [3, 2],
        lstm_hidden: 4,
        dense: vec![6, 4],
        input_scale: 0.1,
        ..Architecture::new(6, 4, classes)
    }
}

fn tiny_pool(n: usize, classes: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % classes;
            let v = (0..24).map(|_| label as f32 * 4.0 - 2.0 + rng.random_range(-1.0f32..1.0)).collect();
            Sample { features: FeatureMatrix::new(6, 4, v).unwrap(), label }
        })
        .collect()
}

fn accuracy_identity() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(RunnerConfig::with_cases(500));
    let episodes = proptest::collection::vec((0usize..30, 0usize..30), 1..120);
    runner
        .run(&episodes, |pairs| {
            let mut h = EpisodeHistory::default();
            for (t, &(a, g)) in pairs.iter().enumerate() {
                h.push(t, a, rl::reward(a, g));
            }
            let eta = pairs.len() as f64;
            prop_assert_eq!(h.accuracy(), (h.reward_sum() + eta) / (2.0 * eta));
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let mut logged = 0;
    for (seed, classes) in [(1u64, 2usize), (2, 3), (3, 5)] {
        let pool = tiny_pool(40, classes, seed);
        let cfg = RlConfig {
            eta: 9,
            num_episodes: 15,
            sync_interval: 4,
            rl_lr: 1e-2,
            seed,
            rolling_window: 5,
            ..RlConfig::default()
        };
        let mut bad = None;
        rl::run(&cfg, &tiny_arch(classes), WarmStart::None, &pool, |m: &EpisodeMetrics| {
            logged += 1;
            if m.accuracy != (m.reward_sum + 9.0) / 18.0 {
                bad = Some(format!("episode {} logs {} with reward sum {}", m.episode, m.accuracy, m.reward_sum));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        if let Some(b) = bad {
            return Err(b);
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("500 random episodes and {logged} logged episodes satisfy the identity exactly"))
}

#[test]
fn criterion_03_accuracy_identity() {
    let _g = serial();
    report(3, "accuracy identity", accuracy_identity());
}

// ---------------------------------------------------------- criteria 4 and 6-8

struct DeskRun {
    dir: PathBuf,
    elapsed: Duration,
}

fn compare_desk(corpus: &Path, out: &Path, cache: &Path) -> Result<DeskRun, String> {
    let _ = std::fs::remove_dir_all(out);
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_rlkws"))
        .args(["compare", "--profile", "desk", "--seed", "7", "--corpus"])
        .arg(corpus)
        .arg("--out")
        .arg(out)
        .arg("--cache")
        .arg(cache)
        .env("RUST_LOG", "warn")
        .status()
        .map_err(|e| format!("cannot start rlkws: {e}"))?;
    if !status.success() {
        return Err(format!("compare exited with {status}"));
    }
    Ok(DeskRun {
        dir: out.to_path_buf(),
        elapsed: start.elapsed(),
    })
}

/// Corpus for the determinism check: the real one when available.
fn determinism_corpus() -> Result<(PathBuf, &'static str), String> {
    if let Ok(p) = corpus() {
        return Ok((p, "Speech Commands"));
    }
    let root = work_dir("synthetic-corpus");
    if !root.join("right").is_dir() {
        generate(&root, &SynthConfig::new(&["left", "right"], 150, 8, 7)).map_err(|e| e.to_string())?;
    }
    Ok((root, "generated corpus"))
}

/// First desk comparison, shared by criteria 4 and 6 to 8.
fn run_a() -> &'static Result<(DeskRun, &'static str), String> {
    static RUN: OnceLock<Result<(DeskRun, &'static str), String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let (root, label) = determinism_corpus()?;
        let run = compare_desk(&root, &work_dir("desk-a"), &work_dir("feature-cache"))?;
        Ok((run, label))
    })
}

fn determinism() -> Outcome {
    let (a, label) = run_a().as_ref().map_err(Clone::clone)?;
    let (root, _) = determinism_corpus()?;
    let b = compare_desk(&root, &work_dir("desk-b"), &work_dir("feature-cache"))?;
    for name in ["with_pretraining.csv", "without_pretraining.csv"] {
        let x = std::fs::read(a.dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
        if x.is_empty() {
            return Err(format!("{name} is empty"));
        }
    }
    within(a.elapsed + b.elapsed, 2 * DESK_BUDGET)?;
    Ok(format!(
        "both CSVs byte-identical on the {label}; runs took {:.0} s and {:.0} s (limit {} s)",
        a.elapsed.as_secs_f64(),
        b.elapsed.as_secs_f64(),
        2 * DESK_BUDGET.as_secs()
    ))
}

#[test]
fn criterion_04_determinism() {
    let _g = serial();
    report(4, "determinism", determinism());
}

/// Both arms of the desk run on the real corpus.
fn desk_arms() -> Result<(Vec<EpisodeMetrics>, Vec<EpisodeMetrics>, Duration), String> {
    corpus()?;
    let (run, _) = run_a().as_ref().map_err(Clone::clone)?;
    let read = |name: &str| read_metrics_csv(&run.dir.join(name)).map_err(|e| e.to_string());
    let with = read("with_pretraining.csv")?;
    let without = read("without_pretraining.csv")?;
    if with.len() != 2000 || without.len() != 2000 {
        return Err(format!("expected 2000 episodes per arm, got {} and {}", with.len(), without.len()));
    }
    Ok((with, without, run.elapsed))
}

fn mean_accuracy(ms: &[EpisodeMetrics]) -> f64 {
    ms.iter().map(|m| m.accuracy).sum::<f64>() / ms.len() as f64
}

fn pretraining_effect() -> Outcome {
    let (with, without, elapsed) = desk_arms()?;
    within(elapsed, DESK_BUDGET)?;
    let (a, b) = (mean_accuracy(&with[..200]), mean_accuracy(&without[..200]));
    let delta = 100.0 * (a - b);
    let detail = format!("episodes 1-200: w/ {:.2}%, w/o {:.2}%, delta {delta:.2} pp (need >= 10)", 100.0 * a, 100.0 * b);
    if delta >= 10.0 { Ok(detail) } else { Err(detail) }
}

fn final_ordering() -> Outcome {
    let (with, without, _) = desk_arms()?;
    let (a, b) = (with[1999].rolling_mean, without[1999].rolling_mean);
    let detail = format!("rolling mean at 2000: w/ {:.2}%, w/o {:.2}%", 100.0 * a, 100.0 * b);
    if a >= b && a >= 0.90 { Ok(detail) } else { Err(format!("{detail} (need w/ >= w/o and w/ >= 90%)")) }
}

fn consistency() -> Outcome {
    let (with, _, _) = desk_arms()?;
    let (early, late) = (with[199].rolling_std, with[1999].rolling_std);
    let detail = format!("w/ pre-training rolling std: episodes 1-200 {early:.4}, 1801-2000 {late:.4}");
    if late < early { Ok(detail) } else { Err(format!("{detail} (need late < early)")) }
}

#[test]
fn criterion_06_pretraining_effect() {
    let _g = serial();
    report(6, "pre-training effect", pretraining_effect());
}

#[test]
fn criterion_07_final_accuracy_ordering() {
    let _g = serial();
    report(7, "final accuracy ordering", final_ordering());
}

#[test]
fn criterion_08_consistency() {
    let _g = serial();
    report(8, "consistency", consistency());
}

// ---------------------------------------------------------------- criterion 5

fn supervised_benchmark() -> Outcome {
    let root = corpus()?;
    let mut cfg = ExperimentConfig::profile(Profile::Paper);
    cfg.subset = Subset::Binary;
    cfg.corpus_root = root;
    cfg.out_dir = work_dir("benchmark");
    cfg.cache_dir = Some(work_dir("feature-cache"));
    let start = Instant::now();
    let out = run_benchmark(&cfg).map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(45 * 60))?;
    let detail = format!(
        "held-out accuracy {:.2}% after {} epochs (need >= 80%); {:.0} s",
        100.0 * out.test_accuracy,
        out.report.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    if out.test_accuracy >= 0.80 { Ok(detail) } else { Err(detail) }
}

#[test]
fn criterion_05_supervised_benchmark() {
    let _g = serial();
    report(5, "supervised benchmark", supervised_benchmark());
}

// ---------------------------------------------------------------- criterion 9

fn target_sync() -> Outcome {
    let start = Instant::now();
    let bits = |ts: &[Tensor<f32>]| -> Vec<u32> { ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    let mut pair = ModelPair::new(vec![Tensor::<f32>::vector(&[0.25, -1.5])]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let interval = 4;
    let mut frozen = bits(pair.target());
    for step in 1..=40 {
        let i = rng.random_range(0..2);
        pair.policy[0].data_mut()[i] += rng.random_range(-0.5f32..0.5);
        if bits(pair.target()) != frozen {
            return Err(format!("target moved between syncs at step {step}"));
        }
        if step % interval == 0 {
            pair.sync_target();
            if bits(pair.target()) != bits(&pair.policy) {
                return Err(format!("target differs from policy after sync at step {step}"));
            }
            frozen = bits(pair.target());
        }
    }
    if pair.sync_count() != 10 {
        return Err(format!("expected 10 syncs, counted {}", pair.sync_count()));
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok("40 updates, 10 syncs: target bit-stable between syncs and equal to the policy at each".into())
}

#[test]
fn criterion_09_target_sync() {
    let _g = serial();
    report(9, "target sync", target_sync());
}

// --------------------------------------------------------------- criterion 10

fn checkpoint_round_trip() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let arch = Architecture { dense: vec![32, 16], ..Architecture::new(40, 32, 2) };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let probe: Vec<Sample> = (0..16)
        .map(|i| {
            let v = (0..40 * 32).map(|_| rng.random_range(-40.0f32..40.0)).collect();
            Sample { features: FeatureMatrix::new(40, 32, v).unwrap(), label: i % 2 }
        })
        .collect();
    let mut params = PolicyParams::<f32>::init(arch.clone(), &mut rng).map_err(|e| e.to_string())?;
    let cfg = RlConfig { pretrain_epochs: 1, ..RlConfig::default() };
    rl::pretrain(&mut params, &probe, &cfg).map_err(|e| e.to_string())?;

    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    save_checkpoint(&params, &first).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint_for(&first, &arch).map_err(|e| e.to_string())?;
    save_checkpoint(&loaded, &second).map_err(|e| e.to_string())?;
    let (x, y) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    if x != y {
        return Err("save -> load -> save changed the bytes".into());
    }

    let agent = Agent::new(loaded, cfg).map_err(|e| e.to_string())?;
    for (i, s) in probe.iter().enumerate() {
        let want = predict(&params, &s.features).map_err(|e| e.to_string())?;
        let got = predict(&agent.pair.policy, &s.features).map_err(|e| e.to_string())?;
        let same = want.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("probe {i}: {got:?} vs {want:?}"));
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{} byte checkpoint stable; 16 probe predictions bit-identical in the RL agent", x.len()))
}

#[test]
fn criterion_10_checkpoint_round_trip() {
    let _g = serial();
    report(10, "checkpoint round trip", checkpoint_round_trip());
}
