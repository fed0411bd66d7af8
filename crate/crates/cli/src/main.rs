use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rlkws::dataset::Subset;
use rlkws::experiment::plot::{render_plot, PlotKind};
use rlkws::experiment::{self, ExperimentConfig, Mode, Profile};
use rlkws::synth::{self, SynthConfig};

/// Environment variable naming the corpus root when `--corpus` is absent.
const CORPUS_ENV: &str = "SPEECH_COMMANDS_DIR";

#[derive(Parser)]
#[command(name = "rlkws", version, about = "Keyword spotting with pre-trained episodic RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and cache MFCC features, write the split manifest.
    Features(Common),
    /// Supervised pre-training on the pre-training partition.
    Pretrain(Common),
    /// Supervised benchmark on the 80/20 split.
    Benchmark(Common),
    /// One RL run, from random weights or a checkpoint.
    RlTrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// RL with and without pre-training on identical draws.
    Compare(Common),
    /// Chart one or more metrics CSVs.
    Plot {
        /// Inputs as `LABEL=PATH` or `PATH` (label from the file name).
        #[arg(required = true)]
        csvs: Vec<String>,
        #[arg(long, value_enum, default_value = "accuracy")]
        kind: Kind,
        /// Output SVG file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus in the Speech Commands layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        subset: SubsetArg,
        #[arg(long, default_value_t = 40)]
        speakers: usize,
        #[arg(long, default_value_t = 5)]
        takes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (`section.key = value` lines) applied over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long, value_enum)]
    subset: Option<SubsetArg>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus root; defaults to $SPEECH_COMMANDS_DIR, then the config value.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Feature cache directory.
    #[arg(long, conflicts_with = "no_cache")]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Binary,
    Main20,
    All30,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Accuracy,
    Stddev,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Binary => Subset::Binary,
            SubsetArg::Main20 => Subset::Main20,
            SubsetArg::All30 => Subset::All30,
        }
    }
}

impl Common {
    fn resolve(&self, mode: Mode) -> Result<ExperimentConfig> {
        let profile = match self.profile {
            Some(ProfileArg::Desk) => Profile::Desk,
            Some(ProfileArg::Paper) | None => Profile::Paper,
        };
        let mut cfg = ExperimentConfig::profile(profile);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        cfg.mode = mode;
        if let Some(s) = self.subset {
            cfg.subset = s.into();
        }
        if let Some(n) = self.episodes {
            cfg.rl.num_episodes = n;
        }
        if let Some(s) = self.seed {
            cfg.rl.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(c) = &self.corpus {
            cfg.corpus_root = c.clone();
        } else if let Some(c) = std::env::var_os(CORPUS_ENV) {
            cfg.corpus_root = PathBuf::from(c);
        }
        if self.no_cache {
            cfg.cache_dir = None;
        } else if let Some(c) = &self.cache {
            cfg.cache_dir = Some(c.clone());
        }
        Ok(cfg)
    }
}

fn plot_inputs(csvs: &[String]) -> Vec<(String, PathBuf)> {
    csvs.iter()
        .map(|arg| match arg.split_once('=') {
            Some((label, path)) => (label.to_string(), PathBuf::from(path)),
            None => {
                let p = Path::new(arg);
                let label = p
                    .file_stem()
                    .map_or(arg.clone(), |s| s.to_string_lossy().into_owned());
                (label, p.to_path_buf())
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features(c) => {
            let cfg = c.resolve(Mode::Benchmark)?;
            let o = experiment::run_features(&cfg)?;
            println!(
                "{} utterances: {} features computed, {} from cache; split manifest {}",
                o.utterances,
                o.cache.computed,
                o.cache.hits,
                o.manifest.display()
            );
        }
        Command::Pretrain(c) => {
            let cfg = c.resolve(Mode::Rl)?;
            let o = experiment::run_pretrain(&cfg)?;
            if let Some(last) = o.report.epochs.last() {
                println!(
                    "pre-trained {} epochs: train loss {:.4}, validation accuracy {}",
                    o.report.epochs.len(),
                    last.train_loss,
                    last.val_accuracy.map_or("n/a".into(), |a| format!("{:.2}%", a * 100.0))
                );
            }
            println!("checkpoint {}", o.checkpoint.display());
        }
        Command::Benchmark(c) => {
            let cfg = c.resolve(Mode::Benchmark)?;
            let o = experiment::run_benchmark(&cfg)?;
            println!(
                "{} test accuracy {:.2}% after {} epochs (kept epoch {}); checkpoint {}",
                cfg.subset,
                o.test_accuracy * 100.0,
                o.report.epochs.len(),
                o.report.kept_epoch,
                o.checkpoint.display()
            );
        }
        Command::RlTrain { common, pretrained } => {
            let cfg = common.resolve(Mode::Rl)?;
            let o = experiment::run_rl(&cfg, pretrained.as_deref())?;
            if let Some(last) = o.metrics.last() {
                println!(
                    "{} episodes, final rolling accuracy {:.2}%; metrics {}",
                    last.episode,
                    last.rolling_mean * 100.0,
                    o.csv.display()
                );
            }
        }
        Command::Compare(c) => {
            let cfg = c.resolve(Mode::Compare)?;
            let o = experiment::run_compare(&cfg)?;
            print!("{}", o.report.to_text());
            println!("outputs in {}", cfg.out_dir.display());
        }
        Command::Plot { csvs, kind, out } => {
            let inputs = plot_inputs(&csvs);
            let refs: Vec<(String, &Path)> =
                inputs.iter().map(|(l, p)| (l.clone(), p.as_path())).collect();
            let kind = match kind {
                Kind::Accuracy => PlotKind::Accuracy,
                Kind::Stddev => PlotKind::Stddev,
            };
            render_plot(&refs, kind, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Synth {
            out,
            subset,
            speakers,
            takes,
            seed,
        } => {
            if speakers == 0 || takes == 0 {
                bail!("need at least one speaker and one take");
            }
            let words = Subset::from(subset).keywords();
            let cfg = SynthConfig::new(&words, speakers, takes, seed);
            let files = synth::generate(&out, &cfg)?;
            info!("synthetic corpus written to {}", out.display());
            println!("{} files under {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "error": chain.join(": ") }));
            ExitCode::FAILURE
        }
    }
}
