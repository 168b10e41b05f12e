//! Pre-pattern generation: a sinusoidal coordinate network whose hidden units
//! are scaled per target by non-negative modulation vectors derived from a
//! learned embedding of that target.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridcore::{Bound, NodeId, ParamStore, Tape, Tensor};
use crate::rng;

/// Visible channels produced by the coordinate network.
pub const RGBA: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirenConfig {
    /// Number of modulated sine layers.
    pub layers: usize,
    pub width: usize,
    pub omega0: f64,
}

impl Default for SirenConfig {
    fn default() -> Self {
        SirenConfig {
            layers: 3,
            width: 32,
            omega0: 30.0,
        }
    }
}

impl SirenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "siren needs layers >= 1 and width >= 1, got {self:?}"
            )));
        }
        if !(self.omega0 > 0.0) {
            return Err(Error::Config("omega0 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stages: Vec<ConvStage>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_dim(16)
    }
}

impl EncoderConfig {
    /// Three stride-2 stages of 8, 16 and 32 filters.
    pub fn with_dim(embedding_dim: usize) -> Self {
        EncoderConfig {
            stages: [8, 16, 32]
                .into_iter()
                .map(|filters| ConvStage { filters, stride: 2 })
                .collect(),
            embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.stages.is_empty() {
            return Err(Error::Config("encoder needs >= 1 stage and embedding_dim >= 1".into()));
        }
        if self.stages.iter().any(|s| s.filters == 0 || s.stride == 0) {
            return Err(Error::Config("encoder stages need filters and stride >= 1".into()));
        }
        Ok(())
    }
}

/// Pixel-centre coordinates in `[-1, 1]²`, row-major. The first coordinate
/// follows the row axis, the second the column axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub height: usize,
    pub width: usize,
    /// `[(H*W), 2]`
    pub coords: Tensor,
}

fn linspace(n: usize, i: usize) -> f64 {
    // Exact endpoints, and exact mirror symmetry around the centre.
    let half = (n - 1) as f64 / 2.0;
    (i as f64 - half) / half
}

pub fn make_coordinate_grid(height: usize, width: usize) -> Result<CoordinateGrid> {
    if height < 2 || width < 2 {
        return Err(Error::dim("make_coordinate_grid", &[height, width], &[2, 2]));
    }
    let mut data = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        for j in 0..width {
            data.push(linspace(height, i));
            data.push(linspace(width, j));
        }
    }
    Ok(CoordinateGrid {
        height,
        width,
        coords: Tensor::new(&[height * width, 2], data)?,
    })
}

/// Conditioning vector for one target.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.0.len()], self.0.clone()).expect("non-empty embedding")
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn uniform(rng: &mut rng::Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

pub fn siren_layer_names(layer: usize) -> (String, String) {
    (format!("siren.l{layer}.w"), format!("siren.l{layer}.b"))
}

pub fn modulation_name(layer: usize) -> String {
    format!("mod.l{layer}")
}

pub const SIREN_OUT: &str = "siren.out.w";

/// Sine-network initialization: first layer `U(±1/2)`, later layers
/// `U(±sqrt(6/fan_in)/omega0)`, zero biases, modulation `U(±sqrt(1/D))`.
pub fn init_siren(config: &SirenConfig, embedding_dim: usize, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[0x5151]);
    let mut store = ParamStore::new();
    let w = config.width;
    let hidden_bound = (6.0 / w as f64).sqrt() / config.omega0;
    for l in 0..config.layers {
        let (wn, bn) = siren_layer_names(l);
        let (fan_in, bound) = if l == 0 { (2, 0.5) } else { (w, hidden_bound) };
        store.insert(wn, uniform(&mut rng, &[fan_in, w], bound));
        store.insert(bn, Tensor::zeros(&[w]));
    }
    store.insert(SIREN_OUT, uniform(&mut rng, &[w, RGBA], hidden_bound));
    let mod_bound = (1.0 / embedding_dim as f64).sqrt();
    for l in 0..config.layers {
        store.insert(modulation_name(l), uniform(&mut rng, &[embedding_dim, w], mod_bound));
    }
    Ok(store)
}

pub fn encoder_stage_names(stage: usize) -> (String, String) {
    (format!("encoder.c{stage}.w"), format!("encoder.c{stage}.b"))
}

pub const ENCODER_PROJ_W: &str = "encoder.proj.w";
pub const ENCODER_PROJ_B: &str = "encoder.proj.b";

pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[0xE4C0]);
    let mut store = ParamStore::new();
    let mut cin = RGBA;
    for (i, stage) in config.stages.iter().enumerate() {
        let (wn, bn) = encoder_stage_names(i);
        let fan_in = 9 * cin;
        store.insert(wn, uniform(&mut rng, &[fan_in, stage.filters], (6.0 / fan_in as f64).sqrt()));
        store.insert(bn, Tensor::zeros(&[stage.filters]));
        cin = stage.filters;
    }
    let d = config.embedding_dim;
    store.insert(ENCODER_PROJ_W, uniform(&mut rng, &[cin, d], (1.0 / cin as f64).sqrt()));
    store.insert(ENCODER_PROJ_B, Tensor::zeros(&[d]));
    Ok(store)
}

/// Records the encoder on `tape`: `[H, W, 4]` target to `[1, D]` embedding.
pub fn encode(tape: &mut Tape, params: &Bound, config: &EncoderConfig, target: NodeId) -> Result<NodeId> {
    let s = tape.value(target).shape();
    if s.len() != 3 || s[2] != RGBA {
        return Err(Error::dim("encode_target", s, &[0, 0, RGBA]));
    }
    let mut x = target;
    for (i, stage) in config.stages.iter().enumerate() {
        let (wn, bn) = encoder_stage_names(i);
        let p = tape.patches3x3(x, stage.stride)?;
        let y = tape.affine(p, params.get(&wn)?, Some(params.get(&bn)?))?;
        x = tape.relu(y);
    }
    let pooled = tape.mean_rows(x);
    tape.affine(
        pooled,
        params.get(ENCODER_PROJ_W)?,
        Some(params.get(ENCODER_PROJ_B)?),
    )
}

/// `m_l = relu(M_l e)` for every sine layer; each `[1, width]`.
pub fn modulations(
    tape: &mut Tape,
    params: &Bound,
    config: &SirenConfig,
    embedding: NodeId,
) -> Result<Vec<NodeId>> {
    (0..config.layers)
        .map(|l| {
            let m = params.get(&modulation_name(l))?;
            if tape.value(m).shape()[1] != config.width {
                return Err(Error::dim(
                    "modulation_vectors",
                    tape.value(m).shape(),
                    &[tape.value(embedding).cols(), config.width],
                ));
            }
            let z = tape.affine(embedding, m, None)?;
            Ok(tape.relu(z))
        })
        .collect()
}

/// Modulated sine network: `[N, 2]` coordinates to `[N, 4]` values in (0, 1).
/// Each sine layer's output is scaled by its modulation vector; the output
/// layer has no bias and no modulation.
pub fn siren(
    tape: &mut Tape,
    params: &Bound,
    config: &SirenConfig,
    coords: NodeId,
    mods: &[NodeId],
) -> Result<NodeId> {
    if mods.len() != config.layers {
        return Err(Error::dim("siren_forward", &[mods.len()], &[config.layers]));
    }
    let mut h = coords;
    for (l, &m) in mods.iter().enumerate() {
        let (wn, bn) = siren_layer_names(l);
        let pre = tape.affine(h, params.get(&wn)?, Some(params.get(&bn)?))?;
        let pre = tape.scale(pre, config.omega0);
        let act = tape.sin(pre);
        h = tape.mul(act, m)?;
    }
    let logits = tape.affine(h, params.get(SIREN_OUT)?, None)?;
    Ok(tape.sigmoid(logits))
}

/// Appends `hidden` zero channels to an `[H, W, 4]` grid.
pub fn assemble_state(tape: &mut Tape, rgba: NodeId, hidden: usize) -> Result<NodeId> {
    if hidden == 0 {
        return Ok(rgba);
    }
    let s = tape.value(rgba).shape().to_vec();
    let mut zs = s.clone();
    *zs.last_mut().unwrap() = hidden;
    let zeros = tape.constant(Tensor::zeros(&zs));
    tape.concat(&[rgba, zeros])
}

/// Embedding of one target under the given encoder parameters.
pub fn encode_target(target: &Tensor, params: &ParamStore, config: &EncoderConfig) -> Result<Embedding> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let t = tape.constant(target.clone());
    let e = encode(&mut tape, &bound, config, t)?;
    Ok(Embedding(tape.value(e).data().to_vec()))
}

pub fn modulation_vectors(
    embedding: &Embedding,
    params: &ParamStore,
    config: &SirenConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let e = tape.constant(embedding.to_tensor());
    let mods = modulations(&mut tape, &bound, config, e)?;
    Ok(mods.iter().map(|&m| tape.value(m).data().to_vec()).collect())
}

/// Evaluates the modulated network over `grid`, giving `[H, W, 4]`.
pub fn siren_forward(
    grid: &CoordinateGrid,
    embedding: &Embedding,
    params: &ParamStore,
    config: &SirenConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let e = tape.constant(embedding.to_tensor());
    let mods = modulations(&mut tape, &bound, config, e)?;
    let c = tape.constant(grid.coords.clone());
    let out = siren(&mut tape, &bound, config, c, &mods)?;
    tape.value(out).clone().reshape(&[grid.height, grid.width, RGBA])
}

pub fn assemble_initial_state(rgba: &Tensor, hidden: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let r = tape.constant(rgba.clone());
    let s = assemble_state(&mut tape, r, hidden)?;
    Ok(tape.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_corners_and_midpoint() {
        let g = make_coordinate_grid(2, 2).unwrap();
        assert_eq!(g.coords.data(), &[-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
        let g3 = make_coordinate_grid(3, 3).unwrap();
        assert_eq!(&g3.coords.data()[8..10], &[0.0, 0.0]);
        let g64 = make_coordinate_grid(64, 64).unwrap();
        let dx = g64.coords.data()[3] - g64.coords.data()[1];
        assert!((dx - 2.0 / 63.0).abs() < 1e-15);
        assert!(make_coordinate_grid(1, 5).is_err());
    }

    #[test]
    fn corners_are_exact_for_any_size() {
        let g = make_coordinate_grid(7, 5).unwrap();
        let c = g.coords.data();
        let n = 7 * 5;
        assert_eq!(&c[0..2], &[-1.0, -1.0]);
        assert_eq!(&c[(5 - 1) * 2..5 * 2], &[-1.0, 1.0]);
        assert_eq!(&c[(n - 5) * 2..(n - 4) * 2], &[1.0, -1.0]);
        assert_eq!(&c[(n - 1) * 2..], &[1.0, 1.0]);
    }

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let cfg = EncoderConfig::with_dim(5);
        let mut p = init_encoder(&cfg, 1).unwrap();
        for (_, e) in p.iter_mut() {
            e.value.fill(0.0);
        }
        let target = Tensor::from_fn(&[16, 16, 4], |i| (i % 7) as f64 / 7.0);
        assert_eq!(encode_target(&target, &p, &cfg).unwrap(), Embedding::zeros(5));
    }

    #[test]
    fn encoder_rejects_wrong_channel_count() {
        let cfg = EncoderConfig::with_dim(4);
        let p = init_encoder(&cfg, 1).unwrap();
        let target = Tensor::zeros(&[16, 16, 3]);
        assert!(matches!(encode_target(&target, &p, &cfg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = EncoderConfig::with_dim(4);
        let p = init_encoder(&cfg, 3).unwrap();
        let target = Tensor::from_fn(&[16, 16, 4], |i| ((i * 31) % 17) as f64 / 17.0);
        assert_eq!(
            encode_target(&target, &p, &cfg).unwrap(),
            encode_target(&target, &p, &cfg).unwrap()
        );
    }

    #[test]
    fn zero_embedding_gives_half_everywhere() {
        let cfg = SirenConfig::default();
        let p = init_siren(&cfg, 16, 9).unwrap();
        let g = make_coordinate_grid(8, 8).unwrap();
        let out = siren_forward(&g, &Embedding::zeros(16), &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let mods = modulation_vectors(&Embedding::zeros(16), &p, &cfg).unwrap();
        assert_eq!(mods.len(), 3);
        assert!(mods.iter().flatten().all(|&m| m == 0.0));
    }

    #[test]
    fn identity_modulation_passes_embedding() {
        let cfg = SirenConfig {
            layers: 1,
            width: 3,
            omega0: 30.0,
        };
        let mut p = init_siren(&cfg, 3, 0).unwrap();
        *p.value_mut(&modulation_name(0)).unwrap() =
            Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let e = Embedding(vec![0.5, 2.0, 0.25]);
        let mods = modulation_vectors(&e, &p, &cfg).unwrap();
        assert_eq!(mods[0], e.0);
    }

    #[test]
    fn modulation_dimension_mismatch() {
        let cfg = SirenConfig::default();
        let p = init_siren(&cfg, 16, 0).unwrap();
        assert!(matches!(
            modulation_vectors(&Embedding::zeros(4), &p, &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_weights_give_half() {
        let cfg = SirenConfig::default();
        let mut p = init_siren(&cfg, 16, 2).unwrap();
        for (name, e) in p.iter_mut() {
            if name.starts_with("siren.") {
                e.value.fill(0.0);
            }
        }
        let g = make_coordinate_grid(4, 4).unwrap();
        let out = siren_forward(&g, &Embedding(vec![1.0; 16]), &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hidden_bound_formula() {
        let cfg = SirenConfig {
            layers: 2,
            width: 16,
            omega0: 30.0,
        };
        let p = init_siren(&cfg, 4, 5).unwrap();
        let bound = (6.0f64 / 16.0).sqrt() / 30.0;
        assert!((bound - 0.0204).abs() < 1e-4);
        let w1 = p.value("siren.l1.w").unwrap();
        assert!(w1.data().iter().all(|v| v.abs() <= bound));
        let w0 = p.value("siren.l0.w").unwrap();
        assert!(w0.data().iter().all(|v| v.abs() <= 0.5));
        assert!(p.value("siren.l0.b").unwrap().data().iter().all(|&b| b == 0.0));
        assert_eq!(p, init_siren(&cfg, 4, 5).unwrap());
    }

    #[test]
    fn assemble_pads_hidden_channels() {
        let rgba = Tensor::from_fn(&[4, 4, 4], |i| 0.1 + (i % 5) as f64 * 0.1);
        assert_eq!(assemble_initial_state(&rgba, 0).unwrap(), rgba);
        let s = assemble_initial_state(&rgba, 12).unwrap();
        assert_eq!(s.shape(), &[4, 4, 16]);
        assert_eq!(s.channels(0, 4).unwrap(), rgba);
        assert!(s.channels(4, 12).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
