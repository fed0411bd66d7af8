use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::dataset::{scan_corpus, split, SplitAssignment, UtteranceMeta};
use crate::features::{extract_batch, CacheStats};
use crate::metrics::EpisodeMetrics;
use crate::model::{load_checkpoint_for, save_checkpoint, Architecture, PolicyParams};
use crate::rl::{self, rng_stream, Stream, WarmStart};
use crate::supervised::{self, FitConfig, FitReport, Sample};
use crate::Result;

use super::csv::MetricsWriter;
use super::plot::{render_plot, PlotKind};
use super::report::ComparisonReport;
use super::{io_err, ExperimentConfig, ExperimentError};

/// File stem and legend label of the arm that starts from pre-trained weights.
pub const ARM_WITH: (&str, &str) = ("with_pretraining", "w/ pre-training");
/// File stem and legend label of the arm that starts from random weights.
pub const ARM_WITHOUT: (&str, &str) = ("without_pretraining", "w/o pre-training");

pub fn arm_names() -> [(&'static str, &'static str); 2] {
    [ARM_WITH, ARM_WITHOUT]
}

/// Scanned corpus, its split and the features of every utterance.
pub struct Prepared {
    pub utterances: Vec<UtteranceMeta>,
    pub split: SplitAssignment,
    /// One sample per utterance, same order.
    pub samples: Vec<Sample>,
    pub cache: CacheStats,
    pub n_frames: usize,
}

impl Prepared {
    pub fn select(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }

    fn nonempty(&self, name: &'static str, indices: &[usize]) -> Result<Vec<Sample>> {
        if indices.is_empty() {
            return Err(ExperimentError::EmptyPartition { partition: name }.into());
        }
        Ok(self.select(indices))
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let spec = cfg.subset.spec();
    let utterances = scan_corpus(&cfg.corpus_root, &spec)?;
    let split = split(&utterances, cfg.split, cfg.rl.seed)?;
    info!(
        "{} utterances in {} classes; extracting features",
        utterances.len(),
        spec.num_classes()
    );
    let (features, cache) = extract_batch(&utterances, &cfg.mfcc, cfg.cache_dir.as_deref())?;
    info!(
        "features ready ({} cached, {} computed, {} corrupt entries replaced)",
        cache.hits, cache.computed, cache.corrupt
    );
    let n_frames = cfg.mfcc.num_frames(cfg.mfcc.utterance_len());
    let samples = features
        .into_iter()
        .map(|(features, label)| Sample { features, label })
        .collect();
    Ok(Prepared {
        utterances,
        split,
        samples,
        cache,
        n_frames,
    })
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    cfg.save(&dir.join("config.conf"))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FeaturesOutcome {
    pub utterances: usize,
    pub cache: CacheStats,
    pub manifest: PathBuf,
}

/// Extracts (and caches) features and writes the split manifest.
pub fn run_features(cfg: &ExperimentConfig) -> Result<FeaturesOutcome> {
    let dir = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let manifest = dir.join("split_manifest.tsv");
    prepared.split.write_manifest(&prepared.utterances, &manifest)?;
    Ok(FeaturesOutcome {
        utterances: prepared.utterances.len(),
        cache: prepared.cache,
        manifest,
    })
}

fn fit_log(report: &FitReport) -> String {
    let mut s = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), super::csv::format_value);
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            super::csv::format_value(e.train_loss),
            super::csv::format_value(e.train_accuracy),
            opt(e.val_loss),
            opt(e.val_accuracy)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub report: FitReport,
    pub checkpoint: PathBuf,
    pub params: PolicyParams<f32>,
}

fn pretrain_params(cfg: &ExperimentConfig, arch: &Architecture, samples: &[Sample]) -> Result<(PolicyParams<f32>, FitReport)> {
    let mut params = PolicyParams::init(arch.clone(), &mut rng_stream(cfg.rl.seed, Stream::Init))?;
    let report = rl::pretrain(&mut params, samples, &cfg.rl)?;
    Ok((params, report))
}

/// Supervised pre-training on the pre-training partition; writes
/// `pretrained.ckpt` and `pretrain_log.csv`.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let dir = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let samples = prepared.nonempty("pretrain", &prepared.split.pretrain)?;
    let arch = cfg.architecture(prepared.n_frames);
    let (params, report) = pretrain_params(cfg, &arch, &samples)?;
    let checkpoint = dir.join("pretrained.ckpt");
    save_checkpoint(&params, &checkpoint)?;
    write_text(&dir.join("pretrain_log.csv"), &fit_log(&report))?;
    Ok(PretrainOutcome {
        report,
        checkpoint,
        params,
    })
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub report: FitReport,
    pub checkpoint: PathBuf,
}

/// Supervised training of the policy architecture on the benchmark split,
/// early-stopped on a held-out share of the training partition, then scored
/// on the test partition. Writes `benchmark.ckpt`, `benchmark_log.csv` and
/// `benchmark.txt`.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutcome> {
    let dir = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let train = prepared.nonempty("bench_train", &prepared.split.bench_train)?;
    let test = prepared.nonempty("bench_test", &prepared.split.bench_test)?;
    let arch = cfg.architecture(prepared.n_frames);
    let mut params = PolicyParams::init(arch, &mut rng_stream(cfg.rl.seed, Stream::Init))?;
    let mut rng = rng_stream(cfg.rl.seed, Stream::Pretrain);
    let train_refs: Vec<&Sample> = train.iter().collect();
    let (fit_set, val) = supervised::holdout(&train_refs, cfg.benchmark.val_split, &mut rng);
    let fit_cfg = FitConfig {
        learning_rate: cfg.benchmark.learning_rate,
        batch_size: cfg.benchmark.batch_size,
        epochs: cfg.benchmark.max_epochs,
        patience: Some(cfg.benchmark.patience),
    };
    let report = supervised::fit(&mut params, &fit_set, &val, &fit_cfg, &mut rng)?;
    let test_refs: Vec<&Sample> = test.iter().collect();
    let (test_loss, test_accuracy) = supervised::evaluate(&params, &test_refs)?;
    let checkpoint = dir.join("benchmark.ckpt");
    save_checkpoint(&params, &checkpoint)?;
    write_text(&dir.join("benchmark_log.csv"), &fit_log(&report))?;
    write_text(
        &dir.join("benchmark.txt"),
        &format!(
            "subset {}\ntrain {} validation {} test {}\nepochs run {} kept epoch {}\ntest loss {:.6}\ntest accuracy % {:.2}\n",
            cfg.subset,
            fit_set.len(),
            val.len(),
            test.len(),
            report.epochs.len(),
            report.kept_epoch,
            test_loss,
            test_accuracy * 100.0
        ),
    )?;
    Ok(BenchmarkOutcome {
        test_accuracy,
        test_loss,
        report,
        checkpoint,
    })
}

fn run_arm(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    warm_start: WarmStart<'_>,
    pool: &[Sample],
    csv: &Path,
) -> Result<(Vec<EpisodeMetrics>, PolicyParams<f32>)> {
    let mut writer = MetricsWriter::create(csv)?;
    let mut all = Vec::with_capacity(cfg.rl.num_episodes);
    let outcome = rl::run(&cfg.rl, arch, warm_start, pool, |m| {
        all.push(m.clone());
        writer.write(m).map_err(|e| e.to_string())
    })?;
    Ok((all, outcome.final_params))
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub metrics: Vec<EpisodeMetrics>,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
}

/// One RL run on the RL pool, from random weights or a checkpoint. Writes
/// `rl_metrics.csv` and `rl_final.ckpt`.
pub fn run_rl(cfg: &ExperimentConfig, pretrained: Option<&Path>) -> Result<RlOutcome> {
    let dir = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let pool = prepared.nonempty("rl_pool", &prepared.split.rl_pool)?;
    let arch = cfg.architecture(prepared.n_frames);
    let warm = match pretrained {
        Some(path) => WarmStart::Params(load_checkpoint_for(path, &arch)?),
        None => WarmStart::None,
    };
    let csv = dir.join("rl_metrics.csv");
    let (metrics, params) = run_arm(cfg, &arch, warm, &pool, &csv)?;
    let checkpoint = dir.join("rl_final.ckpt");
    save_checkpoint(&params, &checkpoint)?;
    Ok(RlOutcome {
        metrics,
        csv,
        checkpoint,
    })
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub report: ComparisonReport,
    pub with: Vec<EpisodeMetrics>,
    pub without: Vec<EpisodeMetrics>,
    pub csv_with: PathBuf,
    pub csv_without: PathBuf,
}

/// Both arms on the same split, seed and episode draws; only the starting
/// weights differ (random initialisation vs. the same initialisation after
/// pre-training). Writes the two metrics CSVs, `accuracy.svg`,
/// `stddev.svg`, `comparison.txt` and the checkpoints.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareOutcome> {
    let dir = out_dir(cfg)?;
    let prepared = prepare(cfg)?;
    let pretrain_set = prepared.nonempty("pretrain", &prepared.split.pretrain)?;
    let pool = prepared.nonempty("rl_pool", &prepared.split.rl_pool)?;
    prepared
        .split
        .write_manifest(&prepared.utterances, &dir.join("split_manifest.tsv"))?;
    let arch = cfg.architecture(prepared.n_frames);

    let (pretrained, report) = pretrain_params(cfg, &arch, &pretrain_set)?;
    save_checkpoint(&pretrained, &dir.join("pretrained.ckpt"))?;
    write_text(&dir.join("pretrain_log.csv"), &fit_log(&report))?;

    let csv_with = dir.join(format!("{}.csv", ARM_WITH.0));
    let csv_without = dir.join(format!("{}.csv", ARM_WITHOUT.0));
    info!("running arm {}", ARM_WITH.1);
    let (with, p_with) = run_arm(cfg, &arch, WarmStart::Params(pretrained), &pool, &csv_with)?;
    save_checkpoint(&p_with, &dir.join(format!("{}_final.ckpt", ARM_WITH.0)))?;
    info!("running arm {}", ARM_WITHOUT.1);
    let (without, p_without) = run_arm(cfg, &arch, WarmStart::None, &pool, &csv_without)?;
    save_checkpoint(&p_without, &dir.join(format!("{}_final.ckpt", ARM_WITHOUT.0)))?;

    let series = [
        (ARM_WITH.1.to_string(), csv_with.as_path()),
        (ARM_WITHOUT.1.to_string(), csv_without.as_path()),
    ];
    render_plot(&series, PlotKind::Accuracy, &dir.join("accuracy.svg"))?;
    render_plot(&series, PlotKind::Stddev, &dir.join("stddev.svg"))?;
    let report = ComparisonReport::new(cfg.subset.as_str(), &with, &without, cfg.rl.rolling_window, 5);
    write_text(&dir.join("comparison.txt"), &report.to_text())?;
    Ok(CompareOutcome {
        report,
        with,
        without,
        csv_with,
        csv_without,
    })
}
