//! Experiment descriptions and their resolution into concrete model and
//! optimizer configurations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Family};
use crate::error::{Error, Result};
use crate::gridcore::Tensor;
use crate::training::{GradientRule, GrowthConfig, ModelKind, SystemConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Infotrade,
    Robustness,
    Capacity,
    Growth,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Infotrade,
        Protocol::Robustness,
        Protocol::Capacity,
        Protocol::Growth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Infotrade => "infotrade",
            Protocol::Robustness => "robustness",
            Protocol::Capacity => "capacity",
            Protocol::Growth => "growth",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol `{s}`")))
    }
}

/// Desk scale is CI-sized; paper scale is the 64x64 / 100000-step setting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// Architecture and optimizer knobs for one model kind. Unset fields keep the
/// protocol's default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub siren_layers: Option<usize>,
    pub siren_width: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub channels: Option<usize>,
    pub hidden_units: Option<usize>,
    pub steps_min: Option<usize>,
    pub steps_max: Option<usize>,
    pub learning_rate: Option<f64>,
    pub gradient_rule: Option<GradientRule>,
}

impl ModelOverrides {
    fn apply_system(&self, cfg: &mut SystemConfig) {
        if let Some(v) = self.siren_layers {
            cfg.siren.layers = v;
        }
        if let Some(v) = self.siren_width {
            cfg.siren.width = v;
        }
        if let Some(v) = self.embedding_dim {
            cfg.encoder.embedding_dim = v;
        }
        if let Some(v) = self.channels {
            cfg.nca.channels = v;
        }
        if let Some(v) = self.hidden_units {
            cfg.nca.hidden_units = v;
        }
        if let Some(v) = self.steps_min {
            cfg.nca.steps_min = v;
        }
        if let Some(v) = self.steps_max {
            cfg.nca.steps_max = v;
        }
    }

    fn apply_train(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.gradient_rule {
            cfg.gradient_rule = v;
        }
    }
}

/// Optimizer knobs shared by every model of an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    /// Training fire rate where the protocol does not sweep it.
    pub fire_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub gradient_rule: Option<GradientRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum TargetSource {
    /// The built-in suite. Without `names`, the first `count` targets of a
    /// family-interleaved ordering are used.
    Suite {
        count: usize,
        #[serde(default)]
        names: Vec<String>,
    },
    /// A directory of equally sized RGBA PNGs.
    Directory {
        path: PathBuf,
        #[serde(default)]
        count: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    pub scale: Scale,
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    /// SIREN depths, training fire rates or pattern counts; unused by growth.
    pub sweep: Vec<f64>,
    /// Robustness evaluation grid.
    pub eval_fire_rates: Vec<f64>,
    /// Stochastic rollouts per evaluation point.
    pub eval_seeds: usize,
    pub out: PathBuf,
    pub grid_size: usize,
    pub targets: TargetSource,
    pub workers: usize,
    pub nmi_bins: usize,
    /// Fail instead of training when a checkpoint is absent.
    pub require_checkpoints: bool,
    /// Write every rollout frame of growth runs.
    pub export_frames: bool,
    /// Optimizer steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub growth: GrowthConfig,
    pub train: TrainOverrides,
    pub prepattern: ModelOverrides,
    pub goalnca: ModelOverrides,
    pub direct: ModelOverrides,
}

/// Robustness evaluation points: 0.25 to 0.75 in steps of 0.05, then 1.
pub fn default_eval_fire_rates() -> Vec<f64> {
    let mut v: Vec<f64> = (5..=15).map(|i| i as f64 / 20.0).collect();
    v.push(1.0);
    v
}

impl ExperimentSpec {
    pub fn defaults(protocol: Protocol, scale: Scale) -> Self {
        let paper = scale == Scale::Paper;
        let (models, sweep, count) = match protocol {
            Protocol::Infotrade => (vec![ModelKind::Prepattern], vec![1.0, 2.0, 3.0, 4.0], 4),
            Protocol::Robustness => (vec![ModelKind::Prepattern, ModelKind::GoalNca], vec![0.75, 1.0], 4),
            Protocol::Capacity => (
                vec![ModelKind::Prepattern, ModelKind::GoalNca],
                vec![1.0, 2.0, 4.0, 8.0, 16.0],
                16,
            ),
            Protocol::Growth => (vec![ModelKind::Prepattern], vec![], 2),
        };
        let count = match (paper, protocol) {
            (true, Protocol::Capacity) => 16,
            (true, _) => 20,
            (false, _) => count,
        };
        let train = if paper {
            TrainOverrides {
                steps: Some(100_000),
                learning_rate: Some(1e-4),
                momentum: Some(0.9),
                ..Default::default()
            }
        } else {
            TrainOverrides {
                steps: Some(5000),
                learning_rate: Some(0.1),
                momentum: Some(0.9),
                ..Default::default()
            }
        };
        ExperimentSpec {
            protocol,
            scale,
            models,
            seeds: vec![0, 1, 2],
            sweep,
            eval_fire_rates: default_eval_fire_rates(),
            eval_seeds: 3,
            out: PathBuf::from("runs").join(protocol.as_str()),
            grid_size: if paper { 64 } else { 32 },
            targets: TargetSource::Suite {
                count,
                names: Vec::new(),
            },
            workers: 1,
            nmi_bins: crate::analysis::DEFAULT_NMI_BINS,
            require_checkpoints: false,
            export_frames: true,
            checkpoint_every: 500,
            growth: GrowthConfig::default(),
            train,
            prepattern: ModelOverrides::default(),
            goalnca: ModelOverrides::default(),
            direct: ModelOverrides::default(),
        }
    }

    /// Protocol defaults overlaid with the TOML document `text`. The document
    /// may name `protocol` and `scale`; `protocol` and `scale` arguments take
    /// precedence when given.
    pub fn from_toml(text: &str, protocol: Option<Protocol>, scale: Option<Scale>) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))?;
        let field = |k: &str| doc.get(k).and_then(|v| v.as_str()).map(str::to_string);
        let protocol = match (protocol, field("protocol")) {
            (Some(p), _) => p,
            (None, Some(p)) => p.parse()?,
            (None, None) => return Err(Error::Config("no protocol given".into())),
        };
        let scale = match (scale, field("scale").as_deref()) {
            (Some(s), _) => s,
            (None, Some("paper")) => Scale::Paper,
            (None, Some("desk") | None) => Scale::Desk,
            (None, Some(other)) => return Err(Error::Config(format!("unknown scale `{other}`"))),
        };
        let base = Self::defaults(protocol, scale);
        let mut merged = match toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        merge(&mut merged, doc);
        merged.insert("protocol".into(), protocol.as_str().into());
        merged.insert(
            "scale".into(),
            match scale {
                Scale::Desk => "desk",
                Scale::Paper => "paper",
            }
            .into(),
        );
        let spec: ExperimentSpec = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path, protocol: Option<Protocol>, scale: Option<Scale>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, protocol, scale)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("an experiment needs models and seeds".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.models.contains(&ModelKind::Direct) {
            return Err(Error::Config("the direct fit is run by the infotrade protocol itself".into()));
        }
        match self.protocol {
            Protocol::Infotrade | Protocol::Growth if self.models != [ModelKind::Prepattern] => {
                return Err(Error::Config(format!(
                    "{} runs the pre-patterned model only",
                    self.protocol.as_str()
                )))
            }
            Protocol::Infotrade | Protocol::Capacity => {
                if self.sweep.is_empty() || self.sweep.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
                    return Err(Error::Config("sweep values must be positive integers".into()));
                }
            }
            Protocol::Robustness => {
                let rates = self.sweep.iter().chain(&self.eval_fire_rates);
                if self.sweep.is_empty() || rates.clone().any(|p| !(*p > 0.0 && *p <= 1.0)) {
                    return Err(Error::Config("fire rates must lie in (0, 1]".into()));
                }
                if self.eval_seeds == 0 {
                    return Err(Error::Config("eval_seeds must be >= 1".into()));
                }
            }
            Protocol::Growth => {}
        }
        for kind in self.models.iter().copied().chain(
            (self.protocol == Protocol::Infotrade).then_some(ModelKind::Direct),
        ) {
            let sys = self.system_config(kind)?;
            self.train_config(&sys, 0, None).validate()?;
        }
        Ok(())
    }

    fn overrides(&self, kind: ModelKind) -> &ModelOverrides {
        match kind {
            ModelKind::Prepattern => &self.prepattern,
            ModelKind::GoalNca => &self.goalnca,
            ModelKind::Direct => &self.direct,
        }
    }

    /// Architecture of `kind` under this experiment.
    pub fn system_config(&self, kind: ModelKind) -> Result<SystemConfig> {
        let mut cfg = match self.protocol {
            Protocol::Capacity => SystemConfig::capacity(kind, self.grid_size),
            _ => SystemConfig::for_kind(kind, self.grid_size),
        };
        if kind == ModelKind::Direct {
            self.prepattern.apply_system(&mut cfg);
        }
        self.overrides(kind).apply_system(&mut cfg);
        if self.protocol == Protocol::Growth {
            cfg.nca.growth = true;
            cfg.growth = Some(self.growth.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Gradient rule when the config names none: per-entry RMS clipping at
    /// desk scale, looser for the control whose longer rollouts carry
    /// smaller per-entry gradients; the plain update at paper scale.
    pub fn default_rule(&self, kind: ModelKind) -> GradientRule {
        match (self.scale, kind) {
            (Scale::Paper, _) => GradientRule::Plain,
            (Scale::Desk, ModelKind::GoalNca) => GradientRule::ClipRms { max_rms: 0.01 },
            (Scale::Desk, _) => GradientRule::ClipRms { max_rms: 0.003 },
        }
    }

    /// Optimizer settings for one training job.
    pub fn train_config(&self, system: &SystemConfig, seed: u64, fire_rate: Option<f64>) -> TrainConfig {
        let mut t = TrainConfig::for_system(system);
        let o = &self.train;
        if let Some(v) = o.steps {
            t.steps = v;
        }
        if let Some(v) = o.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = o.momentum {
            t.momentum = v;
        }
        if let Some(v) = o.fire_rate {
            t.fire_rate = v;
        }
        t.gradient_rule = o.gradient_rule.unwrap_or_else(|| self.default_rule(system.kind));
        t.batch_size = o.batch_size;
        self.overrides(system.kind).apply_train(&mut t);
        if let Some(p) = fire_rate {
            t.fire_rate = p;
        }
        t.seed = seed;
        t
    }

    /// Identity of the results this spec produces: everything except where
    /// and how fast they are computed.
    pub fn fingerprint(&self) -> Result<String> {
        let mut s = self.clone();
        s.out = PathBuf::new();
        s.workers = 1;
        s.require_checkpoints = false;
        s.export_frames = false;
        s.checkpoint_every = 0;
        Ok(serde_json::to_string(&s)?)
    }

    /// Named targets at the configured grid size.
    pub fn load_targets(&self) -> Result<Vec<(String, Tensor)>> {
        let n = self.grid_size;
        let targets = match &self.targets {
            TargetSource::Suite { count, names } => {
                let suite = dataset::default_suite(n)?;
                let chosen = if names.is_empty() {
                    interleave_families(suite).into_iter().take(*count).collect::<Vec<_>>()
                } else {
                    names
                        .iter()
                        .map(|name| {
                            suite
                                .iter()
                                .find(|s| &s.name == name)
                                .cloned()
                                .ok_or_else(|| Error::Config(format!("no suite target named `{name}`")))
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                if chosen.len() < *count && names.is_empty() {
                    return Err(Error::Config(format!("the suite has only {} targets", chosen.len())));
                }
                dataset::render_suite(&chosen)?
            }
            TargetSource::Directory { path, count } => {
                let mut t = dataset::load_targets(path)?;
                if let Some(c) = count {
                    t.truncate(*c);
                }
                if let Some((name, bad)) = t.iter().find(|(_, g)| g.shape() != [n, n, 4]) {
                    return Err(Error::Ingestion(format!(
                        "`{name}` is {:?}, expected {n}x{n} RGBA",
                        bad.shape()
                    )));
                }
                t
            }
        };
        if targets.is_empty() {
            return Err(Error::Config("no targets".into()));
        }
        Ok(targets)
    }
}

/// Suite order with families taken round-robin, so short prefixes mix shapes.
fn interleave_families(specs: Vec<dataset::TargetSpec>) -> Vec<dataset::TargetSpec> {
    let mut groups: Vec<(Family, Vec<dataset::TargetSpec>)> = Vec::new();
    for s in specs {
        match groups.iter_mut().find(|(f, _)| *f == s.family) {
            Some((_, g)) => g.push(s),
            None => groups.push((s.family, vec![s])),
        }
    }
    let longest = groups.iter().map(|(_, g)| g.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..longest {
        for (_, g) in &groups {
            if let Some(s) = g.get(i) {
                out.push(s.clone());
            }
        }
    }
    out
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
