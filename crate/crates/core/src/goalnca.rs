//! Purely self-organising control: the target embedding conditions the update
//! rule, and development starts from a spatially uniform state.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridcore::{Bound, NodeId, ParamStore, Tape, Tensor};
use crate::nca::{self, NcaConfig, StepContext};
use crate::prepattern::Embedding;
use crate::rng;

/// Embedding weights of the first update layer.
pub const WE: &str = "nca.we";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalNcaConfig {
    /// Step range here is the enlarged budget of the control.
    pub nca: NcaConfig,
    pub embedding_dim: usize,
}

impl Default for GoalNcaConfig {
    fn default() -> Self {
        GoalNcaConfig {
            nca: NcaConfig {
                steps_min: 48,
                steps_max: 64,
                ..NcaConfig::default()
            },
            embedding_dim: 16,
        }
    }
}

impl GoalNcaConfig {
    pub fn validate(&self) -> Result<()> {
        self.nca.validate()?;
        if self.nca.growth {
            return Err(Error::Config("the goal-conditioned control does not grow".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn init_goalnca(config: &GoalNcaConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = nca::init_nca(&config.nca, seed)?;
    let mut rng = rng::stream(seed, &[0x60A1]);
    // Same scale as the perception rows of the first layer; together they
    // form the weight matrix applied to concat(perception, e).
    let bound = (1.0 / (2 * config.nca.channels) as f64).sqrt();
    store.insert(
        WE,
        Tensor::from_fn(&[config.embedding_dim, config.nca.hidden_units], |_| {
            rng.gen_range(-bound..=bound)
        }),
    );
    Ok(store)
}

/// All-zero state except alpha = 1 everywhere.
pub fn initial_state(height: usize, width: usize, channels: usize) -> Tensor {
    let mut s = Tensor::zeros(&[height, width, channels]);
    for cell in s.data_mut().chunks_exact_mut(channels) {
        cell[nca::ALPHA] = 1.0;
    }
    s
}

/// `e · W_e`, the embedding's contribution to the first update layer. Adding
/// it to `perception · W_1` equals applying the first layer to the
/// concatenation of perception and embedding.
pub fn conditioning_node(tape: &mut Tape, params: &Bound, embedding: NodeId) -> Result<NodeId> {
    tape.affine(embedding, params.get(WE)?, None)
}

pub fn goal_update_step(
    state: &Tensor,
    embedding: &Embedding,
    params: &ParamStore,
    config: &GoalNcaConfig,
    fire_rate: f64,
    rng: &mut rng::Rng,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let e = tape.constant(embedding.to_tensor());
    let cond = conditioning_node(&mut tape, &bound, e)?;
    let ctx = StepContext {
        params: &bound,
        config: &config.nca,
        fire_rate,
        conditioning: Some(cond),
    };
    let s = tape.constant(state.clone());
    let out = nca::update_step_node(&mut tape, &ctx, s, rng)?;
    Ok(tape.value(out).clone())
}

/// Develops from the uniform state for `steps` updates.
pub fn goal_rollout(
    height: usize,
    width: usize,
    embedding: &Embedding,
    params: &ParamStore,
    config: &GoalNcaConfig,
    steps: usize,
    fire_rate: f64,
    rng: &mut rng::Rng,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let e = tape.constant(embedding.to_tensor());
    let cond = conditioning_node(&mut tape, &bound, e)?;
    let ctx = StepContext {
        params: &bound,
        config: &config.nca,
        fire_rate,
        conditioning: Some(cond),
    };
    let s0 = tape.constant(initial_state(height, width, config.nca.channels));
    let out = nca::rollout_node(&mut tape, &ctx, s0, steps, rng, None)?;
    Ok(tape.value(out).clone())
}
