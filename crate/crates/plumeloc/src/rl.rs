//! Q-learning search agent: a DQN moves an agent over a discrete grid toward
//! the source, trained with epsilon-greedy exploration and experience replay.
//! The state is the normalized grid position; the reward is the negative
//! normalized distance to the source after each move.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::estimate::SourceEstimate;
use crate::nn::{init_net, Activation, AdamState, Checkpoint, DenseNet};

/// Q-values above this magnitude mark the run as diverged.
const Q_DIVERGENCE_LIMIT: f64 = 1e6;

/// One of the four cardinal moves. Indices match the network output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(k: usize) -> Result<Action> {
        Action::ALL
            .get(k)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action index {k} out of range")))
    }

    /// Grid displacement (di, dj).
    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

/// Discrete search arena. Cells live in [0, n)^2 and moves clamp at walls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridEnv {
    pub n: usize,
    pub source_cell: (usize, usize),
    pub agent_cell: (usize, usize),
    /// Episode step budget; reaching it ends the episode.
    pub max_steps: usize,
    steps_taken: usize,
}

impl GridEnv {
    pub fn new(
        n: usize,
        source_cell: (usize, usize),
        agent_cell: (usize, usize),
        max_steps: usize,
    ) -> Result<GridEnv> {
        if n == 0 {
            return Err(Error::Config("grid size must be positive".into()));
        }
        for (name, cell) in [("source", source_cell), ("agent", agent_cell)] {
            if cell.0 >= n || cell.1 >= n {
                return Err(Error::Config(format!(
                    "{name} cell ({}, {}) outside the {n}x{n} grid",
                    cell.0, cell.1
                )));
            }
        }
        Ok(GridEnv {
            n,
            source_cell,
            agent_cell,
            max_steps,
            steps_taken: 0,
        })
    }

    /// Agent position scaled into [0, 1)^2.
    pub fn normalized_state(&self) -> [f64; 2] {
        [
            self.agent_cell.0 as f64 / self.n as f64,
            self.agent_cell.1 as f64 / self.n as f64,
        ]
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Moves the agent to a new start cell and clears the step counter.
    pub fn reset(&mut self, agent_cell: (usize, usize)) -> Result<()> {
        if agent_cell.0 >= self.n || agent_cell.1 >= self.n {
            return Err(Error::Config(format!(
                "agent cell ({}, {}) outside the {}x{} grid",
                agent_cell.0, agent_cell.1, self.n, self.n
            )));
        }
        self.agent_cell = agent_cell;
        self.steps_taken = 0;
        Ok(())
    }

    fn distance_to_source(&self) -> f64 {
        let dx = (self.agent_cell.0 as f64 - self.source_cell.0 as f64) / self.n as f64;
        let dy = (self.agent_cell.1 as f64 - self.source_cell.1 as f64) / self.n as f64;
        dx.hypot(dy)
    }
}

/// Applies one move: the agent shifts one cell (clamped at walls), the reward
/// is the negative normalized distance to the source at the new position, and
/// the episode ends on the source or when the step budget runs out.
pub fn env_step(env: &mut GridEnv, action: Action) -> ([f64; 2], f64, bool) {
    let (di, dj) = action.delta();
    let ni = (env.agent_cell.0 as isize + di).clamp(0, env.n as isize - 1) as usize;
    let nj = (env.agent_cell.1 as isize + dj).clamp(0, env.n as isize - 1) as usize;
    env.agent_cell = (ni, nj);
    env.steps_taken += 1;
    let reward = -env.distance_to_source();
    let done = env.agent_cell == env.source_cell || env.steps_taken >= env.max_steps;
    (env.normalized_state(), reward, done)
}

/// One replay entry. `done` marks source arrival, which stops bootstrapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: [f64; 2],
    pub action: usize,
    pub reward: f64,
    pub next_state: [f64; 2],
    pub done: bool,
}

/// Bounded FIFO of transitions with seeded without-replacement sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> ReplayBuffer {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Appends a transition, evicting the oldest one once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
            self.next = (self.next + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Draws `batch` distinct transitions.
    pub fn sample(&mut self, batch: usize) -> Result<Vec<Transition>> {
        if batch > self.items.len() {
            return Err(Error::InvalidArgument(format!(
                "batch {batch} exceeds buffer length {}",
                self.items.len()
            )));
        }
        Ok(
            rand::seq::index::sample(&mut self.rng, self.items.len(), batch)
                .into_iter()
                .map(|k| self.items[k])
                .collect(),
        )
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct DqnConfig {
    pub episodes: usize,
    pub lr: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_min: f64,
    /// Multiplicative decay applied once per episode.
    pub epsilon_decay: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Copy the online net into a frozen target every this many updates;
    /// `None` bootstraps from the online net directly.
    pub target_sync: Option<usize>,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            episodes: 500,
            lr: 1e-3,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_min: 0.05,
            epsilon_decay: 0.995,
            buffer_capacity: 10_000,
            batch_size: 64,
            max_steps: 200,
            target_sync: None,
            seed: 0,
        }
    }
}

/// Per-episode training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_reward: f64,
    pub steps: usize,
    /// Exploration rate in force during the episode.
    pub epsilon: f64,
}

/// Training output. `diverged` means a Q-value exceeded the stability limit
/// and the run stopped early.
#[derive(Debug, Clone)]
pub struct DqnTraining {
    pub net: DenseNet,
    pub log: Vec<EpisodeLog>,
    pub diverged: bool,
}

struct UpdateStats {
    loss: f64,
    max_abs_q: f64,
}

/// One minibatch TD step: target = r + gamma * max_a' Q(s', a') for
/// non-terminal transitions, bare r for terminal ones; squared error on the
/// taken action only.
fn dqn_update(
    net: &mut DenseNet,
    target_net: Option<&DenseNet>,
    opt: &mut AdamState,
    batch: &[Transition],
    gamma: f64,
) -> Result<UpdateStats> {
    let n = batch.len();
    let states = Array2::from_shape_fn((n, 2), |(b, k)| batch[b].state[k]);
    let nexts = Array2::from_shape_fn((n, 2), |(b, k)| batch[b].next_state[k]);
    let tape = net.forward_tape(states.view())?;
    let q = tape.output();
    let qn = match target_net {
        Some(t) => t.forward_batch(nexts.view())?,
        None => net.forward_batch(nexts.view())?,
    };
    let mut max_abs_q = 0.0_f64;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros((n, 4));
    for (b, t) in batch.iter().enumerate() {
        let next_max = qn.row(b).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let tgt = if t.done {
            t.reward
        } else {
            t.reward + gamma * next_max
        };
        let diff = q[[b, t.action]] - tgt;
        loss += diff * diff / n as f64;
        upstream[[b, t.action]] = 2.0 * diff / n as f64;
        for &v in q.row(b).iter().chain(qn.row(b).iter()) {
            max_abs_q = max_abs_q.max(v.abs());
        }
    }
    let (grads, _) = net.backward_tape(&tape, &upstream)?;
    let mut p = net.params_flat();
    opt.apply(&mut p, &grads.flat())?;
    net.set_params_flat(&p)?;
    Ok(UpdateStats { loss, max_abs_q })
}

fn greedy_action(net: &DenseNet, state: [f64; 2]) -> Result<Action> {
    let q = net.forward(&state)?;
    let mut best = 0;
    for k in 1..q.len() {
        if q[k] > q[best] {
            best = k;
        }
    }
    Action::from_index(best)
}

/// Trains a 2-64-64-4 ReLU Q-network with epsilon-greedy exploration,
/// experience replay, and Adam. Each episode starts from a random cell; one
/// minibatch update runs per environment step once the buffer holds a batch.
pub fn train_dqn(template: &GridEnv, cfg: &DqnConfig) -> Result<DqnTraining> {
    if cfg.episodes == 0 {
        return Err(Error::Config("episode count must be positive".into()));
    }
    let net = init_net(
        &[2, 64, 64, 4],
        &[Activation::Relu, Activation::Relu, Activation::Identity],
        cfg.seed,
    )?;
    train_dqn_from(net, template, cfg)
}

/// Same training loop starting from a caller-supplied Q-network.
pub fn train_dqn_from(
    mut net: DenseNet,
    template: &GridEnv,
    cfg: &DqnConfig,
) -> Result<DqnTraining> {
    if net.input_dim() != 2 || net.output_dim() != 4 {
        return Err(Error::Config(format!(
            "Q-network must map 2 inputs to 4 actions, got {} to {}",
            net.input_dim(),
            net.output_dim()
        )));
    }
    if cfg.batch_size == 0 || cfg.max_steps == 0 {
        return Err(Error::Config(
            "batch size and step budget must be positive".into(),
        ));
    }
    let mut opt = AdamState::new(net.param_count(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, derive_seed(cfg.seed, 2));
    let mut target = cfg.target_sync.map(|_| net.clone());
    let mut eps = cfg.epsilon_start;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut diverged = false;
    let mut updates = 0usize;
    'episodes: for episode in 0..cfg.episodes {
        let mut env = template.clone();
        env.max_steps = cfg.max_steps;
        env.reset((rng.gen_range(0..env.n), rng.gen_range(0..env.n)))?;
        let mut total_reward = 0.0;
        let mut steps = 0usize;
        loop {
            if env.agent_cell == env.source_cell || steps >= cfg.max_steps {
                break;
            }
            let state = env.normalized_state();
            let action = if rng.gen::<f64>() < eps {
                Action::ALL[rng.gen_range(0..4)]
            } else {
                greedy_action(&net, state)?
            };
            let (next_state, reward, done) = env_step(&mut env, action);
            buffer.push(Transition {
                state,
                action: action.index(),
                reward,
                next_state,
                // Bootstrapping stops at the source, not at the step budget.
                done: env.agent_cell == env.source_cell,
            });
            total_reward += reward;
            steps += 1;
            if buffer.len() >= cfg.batch_size {
                let batch = buffer.sample(cfg.batch_size)?;
                let stats = dqn_update(&mut net, target.as_ref(), &mut opt, &batch, cfg.gamma)?;
                updates += 1;
                if let Some(k) = cfg.target_sync {
                    if updates % k == 0 {
                        target = Some(net.clone());
                    }
                }
                if stats.max_abs_q > Q_DIVERGENCE_LIMIT || !stats.loss.is_finite() {
                    diverged = true;
                }
            }
            if done || diverged {
                break;
            }
        }
        log.push(EpisodeLog {
            episode,
            total_reward,
            steps,
            epsilon: eps,
        });
        eps = (eps * cfg.epsilon_decay).max(cfg.epsilon_min);
        if diverged {
            break 'episodes;
        }
    }
    Ok(DqnTraining { net, log, diverged })
}

/// Greedy trajectory outcome.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Visited cells, starting cell first.
    pub trajectory: Vec<(usize, usize)>,
    pub final_cell: (usize, usize),
    pub steps: usize,
    pub estimate: SourceEstimate,
}

/// Runs the greedy policy from the environment's current cell and converts
/// the final cell to meters as (i/n, j/n) scaled by the domain size.
pub fn rollout(
    net: &DenseNet,
    env: &mut GridEnv,
    domain_size: (f64, f64),
    max_steps: usize,
) -> Result<RolloutResult> {
    let start = Instant::now();
    let mut trajectory = vec![env.agent_cell];
    for _ in 0..max_steps {
        if env.agent_cell == env.source_cell {
            break;
        }
        let action = greedy_action(net, env.normalized_state())?;
        let (_, _, done) = env_step(env, action);
        trajectory.push(env.agent_cell);
        if done {
            break;
        }
    }
    let final_cell = env.agent_cell;
    let position = (
        final_cell.0 as f64 / env.n as f64 * domain_size.0,
        final_cell.1 as f64 / env.n as f64 * domain_size.1,
    );
    let steps = trajectory.len() - 1;
    let mut estimate = SourceEstimate::new("RL search", position);
    estimate.inference_seconds = start.elapsed().as_secs_f64();
    estimate.notes.push(format!("{steps} greedy steps"));
    Ok(RolloutResult {
        trajectory,
        final_cell,
        steps,
        estimate,
    })
}

/// Writes the per-episode log: `episode,total_reward,steps,epsilon`.
pub fn write_training_log(log: &[EpisodeLog], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "episode,total_reward,steps,epsilon")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{}",
            e.episode, e.total_reward, e.steps, e.epsilon
        )?;
    }
    Ok(())
}

/// Packages the policy net with the grid geometry it was trained on.
pub fn policy_checkpoint(training: &DqnTraining, env: &GridEnv, seed: u64) -> Checkpoint {
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("kind".into(), serde_json::json!("dqn"));
    meta.insert("grid_n".into(), serde_json::json!(env.n));
    meta.insert("source_i".into(), serde_json::json!(env.source_cell.0));
    meta.insert("source_j".into(), serde_json::json!(env.source_cell.1));
    meta.insert("diverged".into(), serde_json::json!(training.diverged));
    training.net.to_checkpoint(seed, meta)
}

/// Restores a policy net, rejecting checkpoints of other kinds.
pub fn load_policy(ck: &Checkpoint) -> Result<DenseNet> {
    if ck.metadata.get("kind").and_then(|v| v.as_str()) != Some("dqn") {
        return Err(Error::Config(
            "checkpoint does not hold a search policy".into(),
        ));
    }
    DenseNet::from_checkpoint(ck)
}
