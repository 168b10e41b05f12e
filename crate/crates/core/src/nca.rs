//! Neural cellular automaton: isotropic perception, a per-cell residual MLP,
//! stochastic firing, and optional alive masking for growth from a seed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridcore::{Bound, NodeId, ParamStore, Tape, Tensor};
use crate::prepattern::{CoordinateGrid, RGBA};
use crate::rng;

pub const IDENTITY_KERNEL: [f64; 9] = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

/// Normalized 9-point Laplacian, `[[1,2,1],[2,-12,2],[1,2,1]] / 16`.
pub const LAPLACIAN_KERNEL: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    -12.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

/// Channel carrying the alive signal.
pub const ALPHA: usize = 3;

pub const W1: &str = "nca.w1";
pub const B1: &str = "nca.b1";
pub const W2: &str = "nca.w2";
pub const B2: &str = "nca.b2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcaConfig {
    /// Total state channels: 4 visible plus hidden.
    pub channels: usize,
    /// Hidden units of the update MLP.
    pub hidden_units: usize,
    pub fire_rate: f64,
    pub steps_min: usize,
    pub steps_max: usize,
    pub growth: bool,
    pub alive_threshold: f64,
}

impl Default for NcaConfig {
    fn default() -> Self {
        NcaConfig {
            channels: 16,
            hidden_units: 128,
            fire_rate: 1.0,
            steps_min: 16,
            steps_max: 32,
            growth: false,
            alive_threshold: 0.1,
        }
    }
}

impl NcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return Err(Error::Config(format!("fire rate must lie in (0, 1], got {}", self.fire_rate)));
        }
        if self.steps_min > self.steps_max {
            return Err(Error::Config(format!(
                "step range [{}, {}] is empty",
                self.steps_min, self.steps_max
            )));
        }
        if self.channels < RGBA || self.hidden_units == 0 {
            return Err(Error::Config("nca needs >= 4 channels and >= 1 hidden unit".into()));
        }
        Ok(())
    }

    pub fn hidden_channels(&self) -> usize {
        self.channels - RGBA
    }
}

/// Update-network parameters. The output layer starts at zero so a fresh
/// automaton leaves its state untouched.
pub fn init_nca(config: &NcaConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[0x0CA]);
    let fan_in = 2 * config.channels;
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut store = ParamStore::new();
    store.insert(
        W1,
        Tensor::from_fn(&[fan_in, config.hidden_units], |_| rng.gen_range(-bound..=bound)),
    );
    store.insert(B1, Tensor::zeros(&[config.hidden_units]));
    store.insert(W2, Tensor::zeros(&[config.hidden_units, config.channels]));
    store.insert(B2, Tensor::zeros(&[config.channels]));
    Ok(store)
}

/// Boolean field over the `H x W` cells of a grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl CellMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn and(&self, other: &CellMask) -> CellMask {
        CellMask {
            height: self.height,
            width: self.width,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// Is every cell set in `self` also set in `other`?
    pub fn is_subset_of(&self, other: &CellMask) -> bool {
        self.cells.iter().zip(&other.cells).all(|(a, b)| !*a || *b)
    }

    /// One ring of 8-neighbourhood dilation.
    pub fn dilate(&self) -> CellMask {
        let (h, w) = (self.height, self.width);
        let mut cells = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                cells[i * w + j] = neighbours(h, w, i, j).any(|(a, b)| self.get(a, b));
            }
        }
        CellMask {
            height: h,
            width: w,
            cells,
        }
    }

    /// `[H, W, 1]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width, 1],
            self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }

    /// Cells holding any nonzero channel.
    pub fn nonzero(state: &Tensor) -> CellMask {
        let s = state.shape();
        let c = s[2];
        CellMask {
            height: s[0],
            width: s[1],
            cells: state
                .data()
                .chunks_exact(c)
                .map(|cell| cell.iter().any(|&v| v != 0.0))
                .collect(),
        }
    }
}

/// The 3x3 neighbourhood of `(i, j)` (including itself) clipped to the grid.
fn neighbours(h: usize, w: usize, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = i.saturating_sub(1)..=(i + 1).min(h - 1);
    rows.flat_map(move |a| (j.saturating_sub(1)..=(j + 1).min(w - 1)).map(move |b| (a, b)))
}

/// A cell is alive iff the largest alpha in its 3x3 neighbourhood exceeds
/// `threshold`.
pub fn alive_mask(state: &Tensor, threshold: f64) -> CellMask {
    let s = state.shape();
    let (h, w) = (s[0], s[1]);
    let mut cells = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            cells[i * w + j] = neighbours(h, w, i, j).any(|(a, b)| state.at3(a, b, ALPHA) > threshold);
        }
    }
    CellMask {
        height: h,
        width: w,
        cells,
    }
}

/// Per-cell Bernoulli(`p`) firing mask.
pub fn fire_mask(height: usize, width: usize, p: f64, rng: &mut rng::Rng) -> CellMask {
    CellMask {
        height,
        width,
        cells: (0..height * width).map(|_| rng.gen::<f64>() < p).collect(),
    }
}

/// Records perception: the state itself followed by its Laplacian, giving
/// `[H, W, 2C]`.
pub fn perceive_node(tape: &mut Tape, state: NodeId) -> Result<NodeId> {
    let lap = tape.conv3x3_depthwise(state, LAPLACIAN_KERNEL)?;
    tape.concat(&[state, lap])
}

pub fn perceive(state: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(state.clone());
    let p = perceive_node(&mut tape, s)?;
    Ok(tape.value(p).clone())
}

/// Everything one update step needs besides the state.
pub struct StepContext<'a> {
    pub params: &'a Bound,
    pub config: &'a NcaConfig,
    pub fire_rate: f64,
    /// Row added to the first MLP layer's pre-activation at every cell.
    pub conditioning: Option<NodeId>,
}

/// Records one residual update `s + B ⊙ f(perceive(s))`. Fire and alive
/// masks enter the tape as constants.
pub fn update_step_node(
    tape: &mut Tape,
    ctx: &StepContext<'_>,
    state: NodeId,
    rng: &mut rng::Rng,
) -> Result<NodeId> {
    let s = tape.value(state).shape().to_vec();
    if s.len() != 3 || s[2] != ctx.config.channels {
        return Err(Error::dim("update_step", &s, &[0, 0, ctx.config.channels]));
    }
    let pre_alive = ctx
        .config
        .growth
        .then(|| alive_mask(tape.value(state), ctx.config.alive_threshold));

    let perception = perceive_node(tape, state)?;
    let mut hidden = tape.affine(perception, ctx.params.get(W1)?, Some(ctx.params.get(B1)?))?;
    if let Some(cond) = ctx.conditioning {
        hidden = tape.add(hidden, cond)?;
    }
    let hidden = tape.relu(hidden);
    let mut delta = tape.affine(hidden, ctx.params.get(W2)?, Some(ctx.params.get(B2)?))?;
    if ctx.fire_rate < 1.0 {
        let mask = tape.constant(fire_mask(s[0], s[1], ctx.fire_rate, rng).to_tensor());
        delta = tape.mul(delta, mask)?;
    }
    let mut next = tape.add(state, delta)?;
    if let Some(pre) = pre_alive {
        let post = alive_mask(tape.value(next), ctx.config.alive_threshold);
        let life = tape.constant(pre.and(&post).to_tensor());
        next = tape.mul(next, life)?;
    }
    Ok(next)
}

/// Records `steps` updates from `state`. `on_step` sees the state before the
/// first update (index 0) and after every update.
pub fn rollout_node(
    tape: &mut Tape,
    ctx: &StepContext<'_>,
    state: NodeId,
    steps: usize,
    rng: &mut rng::Rng,
    mut on_step: Option<&mut dyn FnMut(usize, &Tensor)>,
) -> Result<NodeId> {
    let mut s = state;
    if let Some(f) = on_step.as_mut() {
        f(0, tape.value(s));
    }
    for t in 0..steps {
        s = update_step_node(tape, ctx, s, rng)?;
        if let Some(f) = on_step.as_mut() {
            f(t + 1, tape.value(s));
        }
    }
    Ok(s)
}

/// One update of `state` under `params`.
pub fn update_step(
    state: &Tensor,
    params: &ParamStore,
    config: &NcaConfig,
    fire_rate: f64,
    rng: &mut rng::Rng,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let ctx = StepContext {
        params: &bound,
        config,
        fire_rate,
        conditioning: None,
    };
    let s = tape.constant(state.clone());
    let out = update_step_node(&mut tape, &ctx, s, rng)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub final_state: Tensor,
    /// States at steps `0..=T` when requested.
    pub trajectory: Option<Vec<Tensor>>,
}

pub fn rollout(
    initial: &Tensor,
    params: &ParamStore,
    config: &NcaConfig,
    steps: usize,
    fire_rate: f64,
    rng: &mut rng::Rng,
    keep_trajectory: bool,
) -> Result<Rollout> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let ctx = StepContext {
        params: &bound,
        config,
        fire_rate,
        conditioning: None,
    };
    let s0 = tape.constant(initial.clone());
    let mut frames = Vec::new();
    let mut record = |_: usize, s: &Tensor| frames.push(s.clone());
    let hook: Option<&mut dyn FnMut(usize, &Tensor)> =
        if keep_trajectory { Some(&mut record) } else { None };
    let out = rollout_node(&mut tape, &ctx, s0, steps, rng, hook)?;
    let final_state = tape.value(out).clone();
    Ok(Rollout {
        final_state,
        trajectory: keep_trajectory.then_some(frames),
    })
}

/// Elliptic starting substrate for growth runs.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipseSeed {
    pub a: f64,
    pub b: f64,
    pub mask: CellMask,
}

/// Cells whose coordinates satisfy `(x/a)² + (y/b)² <= 1`, with `x` along
/// rows and `y` along columns of the `[-1, 1]²` frame.
pub fn ellipse_seed(height: usize, width: usize, a: f64, b: f64) -> Result<EllipseSeed> {
    if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0) {
        return Err(Error::Config(format!(
            "ellipse semi-axes must lie in (0, 1], got a={a}, b={b}"
        )));
    }
    let grid = crate::prepattern::make_coordinate_grid(height, width)?;
    Ok(EllipseSeed {
        a,
        b,
        mask: ellipse_cells(&grid, a, b),
    })
}

fn ellipse_cells(grid: &CoordinateGrid, a: f64, b: f64) -> CellMask {
    CellMask {
        height: grid.height,
        width: grid.width,
        cells: grid
            .coords
            .data()
            .chunks_exact(2)
            .map(|xy| (xy[0] / a).powi(2) + (xy[1] / b).powi(2) <= 1.0)
            .collect(),
    }
}

impl EllipseSeed {
    /// Writes a `[H, W, 4]` pre-pattern into the substrate: values survive only
    /// inside, where alpha is lifted to `threshold + (1 - threshold) * alpha`
    /// so every seeded cell is alive. Outside, the whole state is zero.
    pub fn apply(&self, tape: &mut Tape, rgba: NodeId, threshold: f64) -> Result<NodeId> {
        let s = tape.value(rgba).shape().to_vec();
        if s != [self.mask.height, self.mask.width, RGBA] {
            return Err(Error::dim("ellipse_seed", &s, &[self.mask.height, self.mask.width, RGBA]));
        }
        let mut gain = Vec::with_capacity(self.mask.cells.len() * RGBA);
        let mut shift = Vec::with_capacity(self.mask.cells.len() * RGBA);
        for &inside in &self.mask.cells {
            if inside {
                gain.extend_from_slice(&[1.0, 1.0, 1.0, 1.0 - threshold]);
                shift.extend_from_slice(&[0.0, 0.0, 0.0, threshold]);
            } else {
                gain.extend_from_slice(&[0.0; RGBA]);
                shift.extend_from_slice(&[0.0; RGBA]);
            }
        }
        let gain = tape.constant(Tensor::new(&s, gain)?);
        let shift = tape.constant(Tensor::new(&s, shift)?);
        let scaled = tape.mul(rgba, gain)?;
        tape.add(scaled, shift)
    }

    /// Eager form of [`EllipseSeed::apply`].
    pub fn apply_to(&self, rgba: &Tensor, threshold: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let r = tape.constant(rgba.clone());
        let out = self.apply(&mut tape, r, threshold)?;
        Ok(tape.value(out).clone())
    }

    /// The `rings`-fold dilation of the seed.
    pub fn dilated(&self, rings: usize) -> CellMask {
        (0..rings).fold(self.mask.clone(), |m, _| m.dilate())
    }
}
