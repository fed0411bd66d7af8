//! Classification as an episodic decision process, and the training loop
//! that regresses the policy onto target-model outputs corrected by the
//! discounted return.
//!
//! An episode draws `eta` distinct labelled states from the pool. At each
//! step the agent picks a class, receives +1 if it matches the label and -1
//! otherwise, and moves to the next drawn state. After the episode, for
//! every step `t` the target model's output for `s_t` has its `a_t` entry
//! replaced by the return `G_t`; the policy output (with dropout) is pulled
//! towards that vector under a Huber loss, and Adam takes one step.

use std::collections::HashMap;
use std::time::Instant;

use log::info;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlkws_nn::{argmax, Graph, Optimizer, Scalar, Tensor};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::metrics::{EpisodeMetrics, RollingStats};
use crate::model::{self, Architecture, ModelError, ModelPair, PolicyParams};
use crate::supervised::{self, FitConfig, FitReport, Sample, TrainError};

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] rlkws_nn::NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid RL configuration: {0}")]
    Config(String),
    #[error("pool has {pool} states but an episode needs {eta} distinct ones")]
    PoolTooSmall { pool: usize, eta: usize },
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("episode history has {len} steps, expected {eta}")]
    IncompleteHistory { len: usize, eta: usize },
    #[error("loss diverged to {loss} at episode {episode} (reward sum {reward_sum}, {syncs} target syncs)")]
    Diverged {
        episode: usize,
        loss: f64,
        reward_sum: f64,
        syncs: usize,
    },
    #[error("metrics sink failed: {0}")]
    Sink(String),
}

pub type Result<T, E = RlError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Most probable class.
    Argmax,
    /// Sample from the policy distribution.
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    /// Steps per episode.
    pub eta: usize,
    pub num_episodes: usize,
    pub gamma: f64,
    /// Episodes between target synchronisations.
    pub sync_interval: usize,
    pub rl_lr: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_val_split: f64,
    pub huber_delta: f64,
    pub seed: u64,
    pub action_mode: ActionMode,
    pub rolling_window: usize,
    /// Write elapsed wall-clock time into the metrics; zero otherwise, which
    /// keeps metric streams byte-reproducible.
    pub record_wall_ms: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            eta: 50,
            num_episodes: 10_000,
            gamma: 0.99,
            sync_interval: 200,
            rl_lr: 1e-4,
            pretrain_lr: 1e-3,
            pretrain_epochs: 10,
            pretrain_batch: 8,
            pretrain_val_split: 0.10,
            huber_delta: 1.0,
            seed: 0,
            action_mode: ActionMode::Argmax,
            rolling_window: 200,
            record_wall_ms: true,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if self.eta == 0 {
            return bad("eta must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if self.sync_interval == 0 {
            return bad("sync_interval must be at least 1");
        }
        if self.rolling_window == 0 {
            return bad("rolling_window must be at least 1");
        }
        if self.pretrain_batch == 0 {
            return bad("pretrain_batch must be at least 1");
        }
        if self.huber_delta.is_nan() || self.huber_delta <= 0.0 {
            return bad("huber_delta must be positive");
        }
        Ok(())
    }

    fn pretrain_fit(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.pretrain_lr,
            batch_size: self.pretrain_batch,
            epochs: self.pretrain_epochs,
            patience: None,
        }
    }
}

/// Independent random streams derived from one seed, so that e.g. the
/// episode draws do not depend on how much dropout randomness was used.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    Pretrain = 2,
    Draws = 3,
    Dropout = 4,
    Actions = 5,
}

pub fn rng_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// +1 for a correct classification, -1 otherwise.
pub fn reward(action: usize, truth: usize) -> f64 {
    if action == truth {
        1.0
    } else {
        -1.0
    }
}

/// `G_t = r_t + gamma * G_{t+1}`, with `G` of the last step equal to its reward.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub reward: f64,
    pub done: bool,
}

/// Walks through `eta` states drawn without replacement from the pool.
pub struct Environment<'a> {
    pool: &'a [Sample],
    eta: usize,
    drawn: Vec<usize>,
    cursor: usize,
}

impl<'a> Environment<'a> {
    pub fn new(pool: &'a [Sample], eta: usize) -> Result<Self> {
        if eta == 0 || pool.len() < eta {
            return Err(RlError::PoolTooSmall {
                pool: pool.len(),
                eta,
            });
        }
        Ok(Self {
            pool,
            eta,
            drawn: Vec::new(),
            cursor: 0,
        })
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.drawn = sample_indices(rng, self.pool.len(), self.eta).into_vec();
        self.cursor = 0;
    }

    pub fn eta(&self) -> usize {
        self.eta
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.drawn.is_empty() || self.cursor >= self.eta
    }

    pub fn pool(&self) -> &'a [Sample] {
        self.pool
    }

    /// Pool indices drawn for the current episode.
    pub fn drawn(&self) -> &[usize] {
        &self.drawn
    }

    /// Pool index and features of the current state.
    pub fn current(&self) -> Option<(usize, &'a FeatureMatrix)> {
        if self.is_done() {
            return None;
        }
        let id = self.drawn[self.cursor];
        Some((id, &self.pool[id].features))
    }

    pub fn step(&mut self, action: usize) -> Result<Step> {
        let Some((id, _)) = self.current() else {
            return Err(RlError::EpisodeDone);
        };
        let r = reward(action, self.pool[id].label);
        self.cursor += 1;
        Ok(Step {
            reward: r,
            done: self.cursor == self.eta,
        })
    }
}

/// States (as pool indices), actions and rewards of one episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeHistory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl EpisodeHistory {
    pub fn push(&mut self, state: usize, action: usize, reward: f64) {
        self.states.push(state);
        self.actions.push(action);
        self.rewards.push(reward);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn reward_sum(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn correct(&self) -> usize {
        self.rewards.iter().filter(|&&r| r > 0.0).count()
    }

    /// Fraction of correct steps.
    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.len() as f64
    }
}

/// Target-model outputs per pool index, valid until the next target sync.
#[derive(Debug, Default)]
pub struct TargetCache<T> {
    enabled: bool,
    sync: usize,
    outputs: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> TargetCache<T> {
    pub fn new() -> Self {
        Self {
            enabled: true,
            sync: 0,
            outputs: HashMap::new(),
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            sync: 0,
            outputs: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    fn get(&mut self, pair: &ModelPair<PolicyParams<T>>, id: usize, state: &FeatureMatrix) -> Result<Vec<T>> {
        if !self.enabled {
            return Ok(model::predict(pair.target(), state)?);
        }
        if self.sync != pair.sync_count() {
            self.outputs.clear();
            self.sync = pair.sync_count();
        }
        if let Some(v) = self.outputs.get(&id) {
            return Ok(v.clone());
        }
        let v = model::predict(pair.target(), state)?;
        self.outputs.insert(id, v.clone());
        Ok(v)
    }
}

/// Mean Huber loss of an episode and its gradient with respect to the policy
/// parameters. Targets come from the target model (via `cache`) with the
/// taken action's entry replaced by the discounted return; the policy runs in
/// training mode, so `rng` drives its dropout masks.
pub fn episode_gradients<T: Scalar, R: Rng + ?Sized>(
    pair: &ModelPair<PolicyParams<T>>,
    pool: &[Sample],
    history: &EpisodeHistory,
    config: &RlConfig,
    rng: &mut R,
    cache: &mut TargetCache<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let eta = config.eta;
    if history.len() != eta || history.actions.len() != eta || history.rewards.len() != eta {
        return Err(RlError::IncompleteHistory {
            len: history.len(),
            eta,
        });
    }
    let returns = discounted_returns(&history.rewards, config.gamma);
    let mut grads = pair.policy.zeros_like();
    let seed = T::of(1.0 / eta as f64);
    let mut loss_sum = 0.0;
    for t in 0..eta {
        let state = &pool[history.states[t]].features;
        let mut y_true = cache.get(pair, history.states[t], state)?;
        y_true[history.actions[t]] = T::of(returns[t]);

        let mut g = Graph::new(pair.policy.tensors());
        let y_pred = model::build(&mut g, pair.policy.arch(), state, true, rng)?;
        let n = y_true.len();
        let y_true = g.input(Tensor::new(vec![n], y_true)?);
        let loss = g.huber(y_pred, y_true, config.huber_delta)?;
        loss_sum += g.value(loss).data()[0].f64();
        g.backward(loss, seed).accumulate_params(&g, &mut grads);
    }
    Ok((loss_sum / eta as f64, grads))
}

/// One Adam step on the policy from a complete episode; returns the mean
/// Huber loss. The target is left untouched, and no step is taken when the
/// loss is not finite.
pub fn train_episode<T: Scalar, R: Rng + ?Sized>(
    pair: &mut ModelPair<PolicyParams<T>>,
    optimizer: &mut Optimizer,
    pool: &[Sample],
    history: &EpisodeHistory,
    config: &RlConfig,
    rng: &mut R,
    cache: &mut TargetCache<T>,
) -> Result<f64> {
    let (loss, grads) = episode_gradients(pair, pool, history, config, rng, cache)?;
    if loss.is_finite() {
        optimizer.step(pair.policy.tensors_mut(), &grads)?;
    }
    Ok(loss)
}

/// Supervised warm start: SGD on cross-entropy with a held-out validation
/// share, keeping the final epoch's parameters.
pub fn pretrain<T: Scalar>(
    params: &mut PolicyParams<T>,
    samples: &[Sample],
    config: &RlConfig,
) -> Result<FitReport> {
    let all: Vec<&Sample> = samples.iter().collect();
    supervised::check_classes(&all, params.arch().num_classes)?;
    let mut rng = rng_stream(config.seed, Stream::Pretrain);
    let (train, val) = supervised::holdout(&all, config.pretrain_val_split, &mut rng);
    Ok(supervised::fit(params, &train, &val, &config.pretrain_fit(), &mut rng)?)
}

/// The acting and learning side of a run.
pub struct Agent {
    pub pair: ModelPair<PolicyParams<f32>>,
    optimizer: Optimizer,
    config: RlConfig,
    dropout_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    cache: TargetCache<f32>,
}

impl Agent {
    pub fn new(policy: PolicyParams<f32>, config: RlConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            pair: ModelPair::new(policy),
            optimizer: Optimizer::adam(config.rl_lr),
            dropout_rng: rng_stream(config.seed, Stream::Dropout),
            action_rng: rng_stream(config.seed, Stream::Actions),
            cache: TargetCache::new(),
            config,
        })
    }

    pub fn config(&self) -> &RlConfig {
        &self.config
    }

    pub fn choose(&mut self, state: &FeatureMatrix) -> Result<usize> {
        let probs = model::predict(&self.pair.policy, state)?;
        Ok(match self.config.action_mode {
            ActionMode::Argmax => argmax(&probs),
            ActionMode::Sample => {
                let u: f64 = self.action_rng.random();
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += *p as f64;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        })
    }

    /// Plays one episode (the environment must have been reset).
    pub fn play_episode(&mut self, env: &mut Environment<'_>) -> Result<EpisodeHistory> {
        let mut history = EpisodeHistory::default();
        while let Some((id, state)) = env.current() {
            let action = self.choose(state)?;
            let step = env.step(action)?;
            history.push(id, action, step.reward);
        }
        Ok(history)
    }

    pub fn train(&mut self, pool: &[Sample], history: &EpisodeHistory) -> Result<f64> {
        train_episode(
            &mut self.pair,
            &mut self.optimizer,
            pool,
            history,
            &self.config,
            &mut self.dropout_rng,
            &mut self.cache,
        )
    }
}

/// How the policy is initialised before the first episode.
pub enum WarmStart<'a> {
    /// Random initialisation only.
    None,
    /// Random initialisation followed by supervised pre-training on these samples.
    Pretrain(&'a [Sample]),
    /// Parameters from a checkpoint; must match the architecture.
    Params(PolicyParams<f32>),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub pretrain: Option<FitReport>,
    pub final_params: PolicyParams<f32>,
    pub episodes: usize,
}

/// Runs the whole loop: initialise (optionally pre-train or load), then
/// `num_episodes` episodes of play and one training step each, syncing the
/// target every `sync_interval` episodes. Each episode's metrics go to
/// `sink` as soon as they exist.
pub fn run<F>(
    config: &RlConfig,
    arch: &Architecture,
    warm_start: WarmStart<'_>,
    pool: &[Sample],
    mut sink: F,
) -> Result<RunOutcome>
where
    F: FnMut(&EpisodeMetrics) -> std::result::Result<(), String>,
{
    config.validate()?;
    let started = Instant::now();
    let mut env = Environment::new(pool, config.eta)?;
    let mut init_rng = rng_stream(config.seed, Stream::Init);
    let mut pretrain_report = None;
    let policy = match warm_start {
        WarmStart::None => PolicyParams::init(arch.clone(), &mut init_rng)?,
        WarmStart::Pretrain(samples) => {
            let mut p = PolicyParams::init(arch.clone(), &mut init_rng)?;
            let report = pretrain(&mut p, samples, config)?;
            info!("pre-training finished after {} epochs", report.epochs.len());
            pretrain_report = Some(report);
            p
        }
        WarmStart::Params(p) => {
            p.ensure_compatible(arch)?;
            p
        }
    };
    let mut agent = Agent::new(policy, config.clone())?;
    let mut draws = rng_stream(config.seed, Stream::Draws);
    let mut rolling = RollingStats::new(config.rolling_window);
    for episode in 1..=config.num_episodes {
        env.reset(&mut draws);
        let history = agent.play_episode(&mut env)?;
        let loss = agent.train(pool, &history)?;
        if !loss.is_finite() {
            return Err(RlError::Diverged {
                episode,
                loss,
                reward_sum: history.reward_sum(),
                syncs: agent.pair.sync_count(),
            });
        }
        if episode % config.sync_interval == 0 {
            agent.pair.sync_target();
        }
        let accuracy = history.accuracy();
        let (rolling_mean, rolling_std) = rolling.push(accuracy);
        let metrics = EpisodeMetrics {
            episode,
            accuracy,
            reward_sum: history.reward_sum(),
            loss,
            rolling_mean,
            rolling_std,
            wall_ms: if config.record_wall_ms {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if episode % 100 == 0 {
            info!("episode {episode}: acc {accuracy:.2} rolling {rolling_mean:.3} loss {loss:.4}");
        }
        sink(&metrics).map_err(RlError::Sink)?;
    }
    Ok(RunOutcome {
        pretrain: pretrain_report,
        final_params: agent.pair.policy,
        episodes: config.num_episodes,
    })
}
