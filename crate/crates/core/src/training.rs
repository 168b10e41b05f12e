//! Joint end-to-end training of encoder, coordinate network and automaton
//! (or of the goal-conditioned control) with SGD and Nesterov momentum.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goalnca::{self, GoalNcaConfig};
use crate::gridcore::{Bound, NodeId, ParamStore, Tape, Tensor};
use crate::nca::{self, NcaConfig, StepContext};
use crate::prepattern::{self, CoordinateGrid, EncoderConfig, Embedding, SirenConfig, RGBA};
use crate::rng;

const TAG_STEPS: u64 = 0x7157;
const TAG_FIRE: u64 = 0xF12E;
const TAG_EVAL: u64 = 0xE7A1;
const TAG_BATCH: u64 = 0xBA7C;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Prepattern,
    GoalNca,
    /// Coordinate network fitted straight to the target, no automaton.
    Direct,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Prepattern => "prepattern",
            ModelKind::GoalNca => "goalnca",
            ModelKind::Direct => "direct",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthConfig {
    /// Ellipse semi-axis along rows, in coordinate units.
    pub a: f64,
    /// Ellipse semi-axis along columns.
    pub b: f64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig { a: 0.3, b: 0.2 }
    }
}

/// Architecture of one trainable system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub kind: ModelKind,
    pub grid_size: usize,
    /// Unused by the control.
    pub siren: SirenConfig,
    pub encoder: EncoderConfig,
    pub nca: NcaConfig,
    #[serde(default)]
    pub growth: Option<GrowthConfig>,
}

impl SystemConfig {
    /// Pre-patterned system: 3x32 sine network, D = 16, 16 channels,
    /// 128 update units, 16..=32 steps.
    pub fn prepattern(grid_size: usize) -> Self {
        SystemConfig {
            kind: ModelKind::Prepattern,
            grid_size,
            siren: SirenConfig::default(),
            encoder: EncoderConfig::with_dim(16),
            nca: NcaConfig::default(),
            growth: None,
        }
    }

    /// Goal-conditioned control with the enlarged 48..=64 step budget.
    pub fn goalnca(grid_size: usize) -> Self {
        let goal = GoalNcaConfig::default();
        SystemConfig {
            kind: ModelKind::GoalNca,
            nca: goal.nca,
            encoder: EncoderConfig::with_dim(goal.embedding_dim),
            ..Self::prepattern(grid_size)
        }
    }

    /// Coordinate network and encoder of [`SystemConfig::prepattern`] trained
    /// to reproduce the target directly.
    pub fn direct(grid_size: usize) -> Self {
        SystemConfig {
            kind: ModelKind::Direct,
            ..Self::prepattern(grid_size)
        }
    }

    pub fn for_kind(kind: ModelKind, grid_size: usize) -> Self {
        match kind {
            ModelKind::Prepattern => Self::prepattern(grid_size),
            ModelKind::GoalNca => Self::goalnca(grid_size),
            ModelKind::Direct => Self::direct(grid_size),
        }
    }

    /// Reduced-capacity variant: sine width 16 with a single layer, D = 4,
    /// 32 update units, 12 state channels.
    pub fn capacity(kind: ModelKind, grid_size: usize) -> Self {
        let base = Self::for_kind(kind, grid_size);
        SystemConfig {
            siren: SirenConfig {
                layers: 1,
                width: 16,
                omega0: 30.0,
            },
            encoder: EncoderConfig::with_dim(4),
            nca: NcaConfig {
                channels: 12,
                hidden_units: 32,
                ..base.nca.clone()
            },
            ..base
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding_dim
    }

    pub fn goal_config(&self) -> GoalNcaConfig {
        GoalNcaConfig {
            nca: self.nca.clone(),
            embedding_dim: self.embedding_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 3 {
            return Err(Error::Config(format!("grid size {} < 3", self.grid_size)));
        }
        self.encoder.validate()?;
        self.nca.validate()?;
        match self.kind {
            ModelKind::Prepattern | ModelKind::Direct => self.siren.validate()?,
            ModelKind::GoalNca => self.goal_config().validate()?,
        }
        if let Some(g) = &self.growth {
            if self.kind != ModelKind::Prepattern {
                return Err(Error::Config("growth mode applies to the pre-patterned system".into()));
            }
            if !self.nca.growth {
                return Err(Error::Config("growth config requires nca.growth = true".into()));
            }
            nca::ellipse_seed(self.grid_size, self.grid_size, g.a, g.b)?;
        }
        Ok(())
    }
}

/// Gradient preprocessing applied before each optimizer update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GradientRule {
    #[default]
    Plain,
    /// Rescale the joint gradient to L2 norm at most `max_norm`.
    ClipGlobal { max_norm: f64 },
    /// Rescale each entry separately so that its root-mean-square element
    /// is at most `max_rms`.
    ClipRms { max_rms: f64 },
}

impl GradientRule {
    pub fn apply(self, params: &mut ParamStore) {
        match self {
            GradientRule::Plain => {}
            GradientRule::ClipGlobal { max_norm } => {
                let norm = params.grad_norm();
                if norm > max_norm {
                    params.scale_grads(max_norm / norm);
                }
            }
            GradientRule::ClipRms { max_rms } => {
                for (_, e) in params.iter_mut() {
                    let g = e.grad.data_mut();
                    let rms = (g.iter().map(|v| v * v).sum::<f64>() / g.len().max(1) as f64).sqrt();
                    if rms > max_rms {
                        let k = max_rms / rms;
                        g.iter_mut().for_each(|v| *v *= k);
                    }
                }
            }
        }
    }

    fn validate(self) -> Result<()> {
        let bound = match self {
            GradientRule::Plain => return Ok(()),
            GradientRule::ClipGlobal { max_norm } => max_norm,
            GradientRule::ClipRms { max_rms } => max_rms,
        };
        if bound > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("gradient clip bound must be positive".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Optimizer updates.
    pub steps: usize,
    pub fire_rate: f64,
    pub rollout_min: usize,
    pub rollout_max: usize,
    pub seed: u64,
    /// Targets per update; `None` is full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub gradient_rule: GradientRule,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            steps: 5000,
            fire_rate: 1.0,
            rollout_min: 16,
            rollout_max: 32,
            seed: 0,
            batch_size: None,
            gradient_rule: GradientRule::Plain,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainConfig {
    /// Defaults with the rollout range and fire rate taken from the system.
    pub fn for_system(system: &SystemConfig) -> Self {
        TrainConfig {
            fire_rate: system.nca.fire_rate,
            rollout_min: system.nca.steps_min,
            rollout_max: system.nca.steps_max,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return Err(Error::Config(format!("fire rate {} not in (0, 1]", self.fire_rate)));
        }
        if self.rollout_min > self.rollout_max {
            return Err(Error::Config("empty rollout range".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.gradient_rule.validate()
    }
}

/// One Nesterov update of every entry:
/// `v ← μv − lr·g`, `θ ← θ + μv − lr·g`. Gradients are left in place.
pub fn sgd_nesterov_step(params: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    if let Some((name, _)) = params
        .iter()
        .find(|(_, e)| e.grad.data().iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    for (_, e) in params.iter_mut() {
        let g = e.grad.data();
        let v = e.velocity.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = momentum * *vi - lr * gi;
        }
        let v = e.velocity.data();
        let g = e.grad.data().to_vec();
        for ((theta, &vi), gi) in e.value.data_mut().iter_mut().zip(v).zip(g) {
            *theta += momentum * vi - lr * gi;
        }
    }
    Ok(())
}

/// Parameters plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub config: SystemConfig,
    pub params: ParamStore,
}

/// Node handles of one recorded development.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub embedding: NodeId,
    /// `[H, W, 4]` coordinate-network output; `None` for the control. The
    /// direct fit has no automaton, so its initial and final states are this
    /// same node.
    pub prepattern: Option<NodeId>,
    pub initial: NodeId,
    pub final_state: NodeId,
    pub loss: NodeId,
}

/// Values of one development, for analysis and export.
#[derive(Clone, Debug)]
pub struct Development {
    pub embedding: Embedding,
    pub prepattern: Option<Tensor>,
    pub initial: Tensor,
    pub final_state: Tensor,
    pub trajectory: Option<Vec<Tensor>>,
    pub loss: f64,
}

impl System {
    pub fn init(config: SystemConfig, seed: u64) -> Result<System> {
        config.validate()?;
        let mut params = prepattern::init_encoder(&config.encoder, seed)?;
        match config.kind {
            ModelKind::Prepattern => {
                params.extend(prepattern::init_siren(&config.siren, config.embedding_dim(), seed)?);
                params.extend(nca::init_nca(&config.nca, seed)?);
            }
            ModelKind::GoalNca => {
                params.extend(goalnca::init_goalnca(&config.goal_config(), seed)?);
            }
            ModelKind::Direct => {
                params.extend(prepattern::init_siren(&config.siren, config.embedding_dim(), seed)?);
            }
        }
        Ok(System { config, params })
    }

    fn check_target(&self, target: &Tensor) -> Result<()> {
        check_target(&self.config, target)
    }

    /// Records encoder, initial state, rollout and final-state loss.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        target: &Tensor,
        steps: usize,
        fire_rate: f64,
        rng: &mut rng::Rng,
        on_step: Option<&mut dyn FnMut(usize, &Tensor)>,
    ) -> Result<ForwardNodes> {
        record(&self.config, tape, bound, target, steps, fire_rate, rng, on_step)
    }

    /// Runs one development without keeping the tape.
    pub fn develop(
        &self,
        target: &Tensor,
        steps: usize,
        fire_rate: f64,
        rng: &mut rng::Rng,
        keep_trajectory: bool,
    ) -> Result<Development> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut frames = Vec::new();
        let mut record = |_: usize, s: &Tensor| frames.push(s.clone());
        let hook: Option<&mut dyn FnMut(usize, &Tensor)> =
            if keep_trajectory { Some(&mut record) } else { None };
        let nodes = self.record(&mut tape, &bound, target, steps, fire_rate, rng, hook)?;
        Ok(Development {
            embedding: Embedding(tape.value(nodes.embedding).data().to_vec()),
            prepattern: nodes.prepattern.map(|p| tape.value(p).clone()),
            initial: tape.value(nodes.initial).clone(),
            final_state: tape.value(nodes.final_state).clone(),
            trajectory: keep_trajectory.then_some(frames),
            loss: tape.value(nodes.loss).item(),
        })
    }

    pub fn embed(&self, target: &Tensor) -> Result<Embedding> {
        self.check_target(target)?;
        prepattern::encode_target(target, &self.params, &self.config.encoder)
    }

    /// Evaluation rollout length: the top of the configured range.
    pub fn eval_steps(&self) -> usize {
        match self.config.kind {
            ModelKind::Direct => 0,
            _ => self.config.nca.steps_max,
        }
    }
}

/// Records encoder, initial state, rollout and final-state loss for the
/// system described by `cfg`, reading parameters from `bound`.
#[allow(clippy::too_many_arguments)]
pub fn record(
    cfg: &SystemConfig,
    tape: &mut Tape,
    bound: &Bound,
    target: &Tensor,
    steps: usize,
    fire_rate: f64,
    rng: &mut rng::Rng,
    on_step: Option<&mut dyn FnMut(usize, &Tensor)>,
) -> Result<ForwardNodes> {
    check_target(cfg, target)?;
    let n = cfg.grid_size;
    let t = tape.constant(target.clone());
    let embedding = prepattern::encode(tape, bound, &cfg.encoder, t)?;
    let siren = |tape: &mut Tape| -> Result<NodeId> {
        let mods = prepattern::modulations(tape, bound, &cfg.siren, embedding)?;
        let coords = tape.constant(coordinate_grid(n)?.coords);
        let rgba = prepattern::siren(tape, bound, &cfg.siren, coords, &mods)?;
        tape.reshape(rgba, &[n, n, RGBA])
    };
    let (prepattern, initial, conditioning) = match cfg.kind {
        ModelKind::Direct => {
            let rgba = siren(tape)?;
            let loss = tape.mse(rgba, t)?;
            return Ok(ForwardNodes {
                embedding,
                prepattern: Some(rgba),
                initial: rgba,
                final_state: rgba,
                loss,
            });
        }
        ModelKind::Prepattern => {
            let rgba = siren(tape)?;
            let visible = match &cfg.growth {
                Some(g) => {
                    let seed = nca::ellipse_seed(n, n, g.a, g.b)?;
                    seed.apply(tape, rgba, cfg.nca.alive_threshold)?
                }
                None => rgba,
            };
            let s0 = prepattern::assemble_state(tape, visible, cfg.nca.hidden_channels())?;
            (Some(rgba), s0, None)
        }
        ModelKind::GoalNca => {
            let s0 = tape.constant(goalnca::initial_state(n, n, cfg.nca.channels));
            let cond = goalnca::conditioning_node(tape, bound, embedding)?;
            (None, s0, Some(cond))
        }
    };
    let ctx = StepContext {
        params: bound,
        config: &cfg.nca,
        fire_rate,
        conditioning,
    };
    let final_state = nca::rollout_node(tape, &ctx, initial, steps, rng, on_step)?;
    let visible = tape.channels(final_state, 0, RGBA)?;
    let loss = tape.mse(visible, t)?;
    Ok(ForwardNodes {
        embedding,
        prepattern,
        initial,
        final_state,
        loss,
    })
}

fn check_target(cfg: &SystemConfig, target: &Tensor) -> Result<()> {
    let n = cfg.grid_size;
    if target.shape() != [n, n, RGBA] {
        return Err(Error::dim("target", target.shape(), &[n, n, RGBA]));
    }
    Ok(())
}

fn coordinate_grid(n: usize) -> Result<CoordinateGrid> {
    prepattern::make_coordinate_grid(n, n)
}

/// Everything needed to resume training bit-exactly. Per-step randomness is
/// derived from `(train.seed, step)`, so the step counter is the RNG state.
#[derive(Clone, PartialEq)]
pub struct Checkpoint {
    pub system: System,
    pub train: TrainConfig,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("kind", &self.system.config.kind)
            .field("step", &self.step)
            .field("parameters", &self.system.params.element_count())
            .field("last_loss", &self.losses.last())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    system: SystemConfig,
    train: TrainConfig,
    step: usize,
    rng: RngState,
    losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    step: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            system: self.system.config.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: RngState {
                seed: self.train.seed,
                step: self.step,
            },
            losses: self.losses.clone(),
        };
        let mut buf = Vec::new();
        self.system
            .params
            .write_checkpoint(&mut buf, &serde_json::to_value(meta)?)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let (params, meta) = ParamStore::read_checkpoint(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let expected = System::init(meta.system.clone(), 0)?;
        for name in expected.params.names() {
            let want = expected.params.value(name)?.shape();
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter entry `{name}`"))),
                Some(e) if e.value.shape() != want => {
                    return Err(Error::Checkpoint(format!(
                        "entry `{name}` has shape {:?}, expected {want:?}",
                        e.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Checkpoint {
            system: System {
                config: meta.system,
                params,
            },
            train: meta.train,
            step: meta.step,
            losses: meta.losses,
        })
    }

    /// Writes to `path` atomically (temp file then rename), creating missing
    /// parent directories.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            std::io::Write::write_all(&mut w, &self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut BufReader::new(f), &mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Resumable optimisation loop over a fixed target set.
pub struct Trainer<'a> {
    pub system: System,
    pub train: TrainConfig,
    targets: &'a [Tensor],
    step: usize,
    losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(system: System, train: TrainConfig, targets: &'a [Tensor]) -> Result<Self> {
        train.validate()?;
        if targets.is_empty() {
            return Err(Error::Config("training needs at least one target".into()));
        }
        for t in targets {
            system.check_target(t)?;
        }
        Ok(Trainer {
            system,
            train,
            targets,
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn resume(checkpoint: Checkpoint, targets: &'a [Tensor]) -> Result<Self> {
        let mut t = Trainer::new(checkpoint.system, checkpoint.train, targets)?;
        t.step = checkpoint.step;
        t.losses = checkpoint.losses;
        Ok(t)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            system: self.system.clone(),
            train: self.train.clone(),
            step: self.step,
            losses: self.losses.clone(),
        }
    }

    fn batch(&self) -> Vec<usize> {
        let n = self.targets.len();
        let mut idx: Vec<usize> = (0..n).collect();
        match self.train.batch_size {
            Some(b) if b < n => {
                let mut r = rng::stream(self.train.seed, &[TAG_BATCH, self.step as u64]);
                idx.shuffle(&mut r);
                idx.truncate(b);
                idx.sort_unstable();
                idx
            }
            _ => idx,
        }
    }

    /// Mean batch loss and gradients at the current parameters, without
    /// updating them.
    pub fn loss_and_gradients(&mut self) -> Result<f64> {
        let batch = self.batch();
        let tc = &self.train;
        let steps = rng::stream(tc.seed, &[TAG_STEPS, self.step as u64])
            .gen_range(tc.rollout_min..=tc.rollout_max);
        let scale = 1.0 / batch.len() as f64;
        let config = &self.system.config;
        let params = &mut self.system.params;
        params.zero_grads();
        let mut total = 0.0;
        for &i in &batch {
            let mut r = rng::stream(tc.seed, &[TAG_FIRE, i as u64, self.step as u64]);
            let mut tape = Tape::new();
            let bound = tape.bind(params);
            let nodes = record(config, &mut tape, &bound, &self.targets[i], steps, tc.fire_rate, &mut r, None)?;
            total += tape.value(nodes.loss).item() * scale;
            tape.backward_scaled(nodes.loss, params, scale)?;
        }
        Ok(total)
    }

    /// One optimizer update. Returns the batch loss measured before it.
    pub fn step(&mut self) -> Result<f64> {
        let loss = self.loss_and_gradients()?;
        if !loss.is_finite() || loss > self.train.divergence_threshold {
            return Err(Error::Diverged {
                step: self.step,
                loss,
                checkpoint: Some(Box::new(self.checkpoint())),
            });
        }
        self.train.gradient_rule.apply(&mut self.system.params);
        sgd_nesterov_step(&mut self.system.params, self.train.learning_rate, self.train.momentum)?;
        self.system.params.zero_grads();
        self.losses.push(loss);
        self.step += 1;
        Ok(loss)
    }

    /// Steps until `train.steps` updates have been made in total.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.train.steps {
            self.step()?;
        }
        Ok(())
    }

    /// Mean loss over all targets at the current parameters, at a fixed
    /// rollout length and fire rate.
    pub fn current_loss(&self, steps: usize, fire_rate: f64) -> Result<f64> {
        let mut sum = 0.0;
        for (i, t) in self.targets.iter().enumerate() {
            let mut r = rng::stream(self.train.seed, &[TAG_EVAL, i as u64]);
            sum += self.system.develop(t, steps, fire_rate, &mut r, false)?.loss;
        }
        Ok(sum / self.targets.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

fn train_kind(
    kind: ModelKind,
    targets: &[Tensor],
    system: SystemConfig,
    train: TrainConfig,
) -> Result<TrainOutcome> {
    if system.kind != kind {
        return Err(Error::Config(format!(
            "expected a {} system, got {}",
            kind.as_str(),
            system.kind.as_str()
        )));
    }
    let sys = System::init(system, train.seed)?;
    let mut trainer = Trainer::new(sys, train, targets)?;
    trainer.run()?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        losses: checkpoint.losses.clone(),
        checkpoint,
    })
}

/// Trains encoder, coordinate network, modulation and automaton together.
/// Every rollout starts from a freshly generated pre-pattern.
pub fn train_joint(targets: &[Tensor], system: SystemConfig, train: TrainConfig) -> Result<TrainOutcome> {
    train_kind(ModelKind::Prepattern, targets, system, train)
}

/// Trains the goal-conditioned control and its encoder.
pub fn train_goalnca(targets: &[Tensor], system: SystemConfig, train: TrainConfig) -> Result<TrainOutcome> {
    train_kind(ModelKind::GoalNca, targets, system, train)
}

/// Fits the coordinate network and encoder to the targets with no automaton.
pub fn train_direct(targets: &[Tensor], system: SystemConfig, train: TrainConfig) -> Result<TrainOutcome> {
    train_kind(ModelKind::Direct, targets, system, train)
}

/// Dispatches on `system.kind`.
pub fn train(targets: &[Tensor], system: SystemConfig, train: TrainConfig) -> Result<TrainOutcome> {
    train_kind(system.kind, targets, system, train)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetStats {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub values: Vec<f64>,
}

/// Final-state MSE per target over stochastic rollouts, one per seed.
pub fn evaluate(
    checkpoint: &Checkpoint,
    targets: &[Tensor],
    steps: usize,
    fire_rate: f64,
    seeds: &[u64],
) -> Result<Vec<TargetStats>> {
    if !(fire_rate > 0.0 && fire_rate <= 1.0) {
        return Err(Error::Config(format!("fire rate {fire_rate} not in (0, 1]")));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let values = seeds
                .iter()
                .map(|&s| {
                    let mut r = rng::stream(s, &[TAG_EVAL, i as u64]);
                    checkpoint
                        .system
                        .develop(t, steps, fire_rate, &mut r, false)
                        .map(|d| d.loss)
                })
                .collect::<Result<Vec<f64>>>()?;
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Ok(TargetStats {
                mean,
                std: var.sqrt(),
                values,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nesterov_single_step() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0));
        p.get_mut("w").unwrap().grad = Tensor::scalar(2.0);
        sgd_nesterov_step(&mut p, 1e-4, 0.9).unwrap();
        let e = p.get("w").unwrap();
        assert_eq!(e.velocity.item(), -2e-4);
        assert_eq!(e.value.item(), 1.0 + (0.9 * -2e-4 - 2e-4));
        assert!((e.value.item() - (1.0 - 3.8e-4)).abs() < 1e-15);
        assert_eq!(e.grad.item(), 2.0);
    }

    #[test]
    fn nesterov_two_steps_match_recurrence() {
        let (lr, mu, g) = (0.05, 0.9, 1.5);
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(0.3));
        p.get_mut("w").unwrap().grad = Tensor::scalar(g);
        sgd_nesterov_step(&mut p, lr, mu).unwrap();
        sgd_nesterov_step(&mut p, lr, mu).unwrap();
        let v1 = mu * 0.0 - lr * g;
        let t1 = 0.3 + (mu * v1 - lr * g);
        let v2 = mu * v1 - lr * g;
        let t2 = t1 + (mu * v2 - lr * g);
        let e = p.get("w").unwrap();
        assert_eq!(e.velocity.item(), v2);
        assert_eq!(e.value.item(), t2);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5));
        let before = p.clone();
        sgd_nesterov_step(&mut p, 0.1, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(0.0));
        p.insert("b", Tensor::scalar(0.0));
        p.get_mut("b").unwrap().grad = Tensor::scalar(f64::NAN);
        match sgd_nesterov_step(&mut p, 0.1, 0.9) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.value("a").unwrap().item(), 0.0);
    }

    #[test]
    fn capacity_configs_validate() {
        for kind in [ModelKind::Prepattern, ModelKind::GoalNca] {
            SystemConfig::capacity(kind, 16).validate().unwrap();
        }
    }

    #[test]
    fn train_config_rejects_nonpositive() {
        let mut t = TrainConfig::default();
        t.learning_rate = 0.0;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::default();
        t.steps = 0;
        assert!(t.validate().is_err());
    }
}
