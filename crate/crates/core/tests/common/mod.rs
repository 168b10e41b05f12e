//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use devscaffold::analysis::PatternPair;
use devscaffold::gridcore::{GradCheck, NodeId, ParamStore, Tape, Tensor};
use devscaffold::rng;
use devscaffold::training::{ModelKind, System, SystemConfig};
use devscaffold::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values in `[-hi, -margin] ∪ [margin, hi]`, keeping finite differences
/// clear of the ReLU kink.
pub fn off_kink(r: &mut ChaCha8Rng, shape: &[usize], margin: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = r.gen_range(margin..hi);
        if r.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

type Forward = Box<dyn Fn(&ParamStore) -> Result<(Tape, NodeId)>>;

/// One differentiable primitive with random inputs, reduced to a scalar
/// through an MSE against a random constant.
pub struct PrimitiveCase {
    pub store: ParamStore,
    pub forward: Forward,
}

pub const PRIMITIVES: &[&str] = &[
    "affine",
    "affine_no_bias",
    "sin",
    "sigmoid",
    "relu",
    "scale",
    "conv3x3_depthwise",
    "add",
    "add_row",
    "add_column",
    "mul",
    "mul_row",
    "mul_column",
    "mse",
    "concat",
    "channels",
    "patches3x3_stride1",
    "patches3x3_stride2",
    "mean_rows",
    "reshape",
];

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t);
    }
    s
}

pub fn primitive_case(name: &str, r: &mut ChaCha8Rng) -> PrimitiveCase {
    let u = |r: &mut ChaCha8Rng, shape: &[usize]| uniform(r, shape, -1.0, 1.0);
    let (entries, out_shape, op): (Vec<(&str, Tensor)>, Vec<usize>, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>) =
        match name {
            "affine" => (
                vec![("x", u(r, &[2, 3, 5])), ("w", u(r, &[5, 4])), ("b", u(r, &[1, 4]))],
                vec![2, 3, 4],
                Box::new(|t, p| t.affine(p[0], p[1], Some(p[2]))),
            ),
            "affine_no_bias" => (
                vec![("x", u(r, &[6, 5])), ("w", u(r, &[5, 3]))],
                vec![6, 3],
                Box::new(|t, p| t.affine(p[0], p[1], None)),
            ),
            "sin" => (
                vec![("x", uniform(r, &[4, 5], -3.0, 3.0))],
                vec![4, 5],
                Box::new(|t, p| Ok(t.sin(p[0]))),
            ),
            "sigmoid" => (
                vec![("x", uniform(r, &[4, 5], -4.0, 4.0))],
                vec![4, 5],
                Box::new(|t, p| Ok(t.sigmoid(p[0]))),
            ),
            "relu" => (
                vec![("x", off_kink(r, &[4, 5], 1e-2, 1.0))],
                vec![4, 5],
                Box::new(|t, p| Ok(t.relu(p[0]))),
            ),
            "scale" => {
                let f = r.gen_range(-30.0..30.0);
                (
                    vec![("x", u(r, &[3, 4]))],
                    vec![3, 4],
                    Box::new(move |t, p| Ok(t.scale(p[0], f))),
                )
            }
            "conv3x3_depthwise" => {
                let mut k = [0.0; 9];
                k.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
                (
                    vec![("x", u(r, &[5, 6, 3]))],
                    vec![5, 6, 3],
                    Box::new(move |t, p| t.conv3x3_depthwise(p[0], k)),
                )
            }
            "add" | "mul" => {
                let mul = name == "mul";
                (
                    vec![("a", u(r, &[3, 4, 2])), ("b", u(r, &[3, 4, 2]))],
                    vec![3, 4, 2],
                    Box::new(move |t, p| if mul { t.mul(p[0], p[1]) } else { t.add(p[0], p[1]) }),
                )
            }
            "add_row" | "mul_row" => {
                let mul = name == "mul_row";
                (
                    vec![("a", u(r, &[3, 4, 5])), ("b", u(r, &[1, 5]))],
                    vec![3, 4, 5],
                    Box::new(move |t, p| if mul { t.mul(p[0], p[1]) } else { t.add(p[0], p[1]) }),
                )
            }
            "add_column" | "mul_column" => {
                let mul = name == "mul_column";
                (
                    vec![("a", u(r, &[3, 4, 5])), ("b", u(r, &[3, 4, 1]))],
                    vec![3, 4, 5],
                    Box::new(move |t, p| if mul { t.mul(p[0], p[1]) } else { t.add(p[0], p[1]) }),
                )
            }
            "mse" => {
                // Both operands are parameters; the loss is the primitive itself.
                let s = store(vec![("a", u(r, &[4, 3])), ("b", u(r, &[4, 3]))]);
                return PrimitiveCase {
                    store: s,
                    forward: Box::new(|s| {
                        let mut t = Tape::new();
                        let a = t.param(s, "a")?;
                        let b = t.param(s, "b")?;
                        let l = t.mse(a, b)?;
                        Ok((t, l))
                    }),
                };
            }
            "concat" => (
                vec![("a", u(r, &[4, 4, 2])), ("b", u(r, &[4, 4, 3])), ("c", u(r, &[4, 4, 1]))],
                vec![4, 4, 6],
                Box::new(|t, p| t.concat(p)),
            ),
            "channels" => (
                vec![("x", u(r, &[4, 3, 6]))],
                vec![4, 3, 3],
                Box::new(|t, p| t.channels(p[0], 2, 3)),
            ),
            "patches3x3_stride1" => (
                vec![("x", u(r, &[4, 5, 2]))],
                vec![4, 5, 18],
                Box::new(|t, p| t.patches3x3(p[0], 1)),
            ),
            "patches3x3_stride2" => (
                vec![("x", u(r, &[5, 6, 2]))],
                vec![3, 3, 18],
                Box::new(|t, p| t.patches3x3(p[0], 2)),
            ),
            "mean_rows" => (
                vec![("x", u(r, &[7, 3]))],
                vec![1, 3],
                Box::new(|t, p| Ok(t.mean_rows(p[0]))),
            ),
            "reshape" => (
                vec![("x", u(r, &[2, 3, 4]))],
                vec![6, 4],
                Box::new(|t, p| t.reshape(p[0], &[6, 4])),
            ),
            other => panic!("unknown primitive {other}"),
        };
    let names: Vec<String> = entries.iter().map(|(n, _)| n.to_string()).collect();
    let target = u(r, &out_shape);
    PrimitiveCase {
        store: store(entries),
        forward: Box::new(move |s| {
            let mut t = Tape::new();
            let ps = names.iter().map(|n| t.param(s, n)).collect::<Result<Vec<_>>>()?;
            let out = op(&mut t, &ps)?;
            let c = t.constant(target.clone());
            let l = t.mse(out, c)?;
            Ok((t, l))
        }),
    }
}

/// Worst relative deviation of `name` over `trials` random cases.
pub fn primitive_worst(name: &str, trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let check = GradCheck::new(FD_STEP, FD_TOL);
    (0..trials)
        .map(|_| {
            let case = primitive_case(name, &mut r);
            check.run(&case.store, &case.forward).unwrap().max_rel_error()
        })
        .fold(0.0, f64::max)
}

/// A small system with every parameter moved off its initial value, so the
/// zero-initialised update output does not mask upstream gradients.
pub fn perturbed_system(kind: ModelKind, grid: usize, seed: u64) -> System {
    let mut cfg = SystemConfig::for_kind(kind, grid);
    cfg.siren.layers = 2;
    cfg.siren.width = 8;
    cfg.encoder.stages.iter_mut().for_each(|s| s.filters = 4);
    cfg.encoder.embedding_dim = 4;
    cfg.nca.channels = 8;
    cfg.nca.hidden_units = 8;
    let mut sys = System::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xA5A5);
    for (_, e) in sys.params.iter_mut() {
        e.value.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.05..0.05));
    }
    sys
}

/// Worst error over a batch of checks, with how many elements were compared
/// and how many were skipped for crossing a ReLU kink.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckSummary {
    pub worst: f64,
    pub checked: usize,
    pub kink_crossings: usize,
}

impl CheckSummary {
    fn add(mut self, r: &devscaffold::gridcore::GradCheckReport) -> Self {
        self.worst = self.worst.max(r.max_rel_error());
        self.checked += r.checked;
        self.kink_crossings += r.kink_crossings;
        self
    }

    /// Below tolerance, with at most one element in ten skipped.
    pub fn passed(&self) -> bool {
        self.worst < FD_TOL && self.kink_crossings * 10 <= self.checked + self.kink_crossings
    }
}

/// Encoder → coordinate network → `steps` automaton updates → MSE, with
/// fire masks drawn from a fixed stream so every evaluation sees the same masks.
pub fn composition_check(kind: ModelKind, trials: usize, steps: usize, seed: u64) -> CheckSummary {
    let grid = 12;
    let check = GradCheck::new(FD_STEP, FD_TOL).max_elements(3);
    (0..trials as u64).fold(CheckSummary::default(), |acc, trial| {
        let sys = perturbed_system(kind, grid, seed.wrapping_add(trial));
        let target = uniform(&mut rng(seed ^ trial), &[grid, grid, 4], 0.0, 1.0);
        let cfg = sys.config.clone();
        let forward = |s: &ParamStore| -> Result<(Tape, NodeId)> {
            let mut t = Tape::new();
            let bound = t.bind(s);
            let mut masks = rng::stream(trial, &[0xF00D]);
            let nodes = devscaffold::training::record(&cfg, &mut t, &bound, &target, steps, 0.5, &mut masks, None)?;
            Ok((t, nodes.loss))
        };
        acc.add(&check.run(&sys.params, forward).unwrap())
    })
}

/// The strided convolutional encoder alone, regressed onto a random embedding.
pub fn encoder_check(trials: usize, seed: u64) -> CheckSummary {
    let mut r = rng(seed);
    let cfg = devscaffold::prepattern::EncoderConfig::with_dim(6);
    let check = GradCheck::new(FD_STEP, FD_TOL).max_elements(8);
    (0..trials as u64).fold(CheckSummary::default(), |acc, trial| {
        let params = devscaffold::prepattern::init_encoder(&cfg, seed.wrapping_add(trial)).unwrap();
        let image = uniform(&mut r, &[16, 16, 4], 0.0, 1.0);
        let goal = uniform(&mut r, &[1, 6], -1.0, 1.0);
        let report = check
            .run(&params, |s| {
                let mut t = Tape::new();
                let b = t.bind(s);
                let x = t.constant(image.clone());
                let e = devscaffold::prepattern::encode(&mut t, &b, &cfg, x)?;
                let g = t.constant(goal.clone());
                let l = t.mse(e, g)?;
                Ok((t, l))
            })
            .unwrap();
        acc.add(&report)
    })
}

/// Ordinary least squares through the normal equations `XᵀX β = Xᵀy`,
/// solved by Gauss-Jordan elimination with partial pivoting.
pub fn oracle_r2(pair: &PatternPair) -> f64 {
    let (p, t) = (pair.pattern.data(), pair.target.data());
    let n = p.len() / 4;
    let row = |i: usize| [1.0, p[4 * i], p[4 * i + 1], p[4 * i + 2], p[4 * i + 3]];
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..4 {
        let y: Vec<f64> = (0..n).map(|i| t[4 * i + k]).collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            continue;
        }
        let mut a = [[0.0f64; 6]; 5];
        for (i, &yi) in y.iter().enumerate() {
            let x = row(i);
            for r in 0..5 {
                for c in 0..5 {
                    a[r][c] += x[r] * x[c];
                }
                a[r][5] += x[r] * yi;
            }
        }
        for col in 0..5 {
            let piv = (col..5).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..5 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..6 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..5).map(|r| a[r][5] / a[r][r]).collect();
        let ss_res: f64 = (0..n)
            .map(|i| {
                let x = row(i);
                let fit: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
                (y[i] - fit).powi(2)
            })
            .sum();
        total += 1.0 - ss_res / ss_tot;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

fn gray(rgba: &Tensor) -> Vec<f64> {
    rgba.data()
        .chunks_exact(4)
        .map(|px| (0..3).map(|c| px[c] * px[3] + (1.0 - px[3])).sum::<f64>() / 3.0)
        .collect()
}

/// NMI from an explicit joint histogram, entropies in bits.
pub fn oracle_nmi(pair: &PatternPair, bins: usize) -> f64 {
    let bin = |v: f64| ((v * bins as f64).floor() as usize).min(bins - 1);
    let x: Vec<usize> = gray(&pair.pattern).into_iter().map(bin).collect();
    let y: Vec<usize> = gray(&pair.target).into_iter().map(bin).collect();
    let n = x.len() as f64;
    let mut joint = std::collections::HashMap::new();
    for (&a, &b) in x.iter().zip(&y) {
        *joint.entry((a, b)).or_insert(0usize) += 1;
    }
    let h = |counts: Vec<usize>| -> f64 {
        counts
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    };
    let hist = |v: &[usize]| (0..bins).map(|b| v.iter().filter(|&&x| x == b).count()).collect::<Vec<_>>();
    let (hx, hy) = (h(hist(&x)), h(hist(&y)));
    let hxy = h(joint.into_values().collect());
    if hx == 0.0 && hy == 0.0 {
        return 1.0;
    }
    if hx == 0.0 || hy == 0.0 {
        return 0.0;
    }
    (2.0 * (hx + hy - hxy) / (hx + hy)).clamp(0.0, 1.0)
}

/// SSIM with two-pass window statistics and its own Gaussian window.
pub fn oracle_ssim(pair: &PatternPair) -> f64 {
    let (h, w) = (pair.height(), pair.width());
    let comp = |t: &Tensor| -> Vec<[f64; 3]> {
        t.data()
            .chunks_exact(4)
            .map(|px| [0, 1, 2].map(|c| px[c] * px[3] + (1.0 - px[3])))
            .collect()
    };
    let (x, y) = (comp(&pair.pattern), comp(&pair.target));
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (1e-4, 9e-4);
    let mut per_channel = 0.0;
    for c in 0..3 {
        let mut acc = 0.0;
        for i0 in 0..=h - 11 {
            for j0 in 0..=w - 11 {
                let cells = || (0..11).flat_map(move |a| (0..11).map(move |b| (a, b)));
                let wt = |a: usize, b: usize| g[a] * g[b] / norm;
                let at = |v: &[[f64; 3]], a: usize, b: usize| v[(i0 + a) * w + j0 + b][c];
                let mx: f64 = cells().map(|(a, b)| wt(a, b) * at(&x, a, b)).sum();
                let my: f64 = cells().map(|(a, b)| wt(a, b) * at(&y, a, b)).sum();
                let vx: f64 = cells().map(|(a, b)| wt(a, b) * (at(&x, a, b) - mx).powi(2)).sum();
                let vy: f64 = cells().map(|(a, b)| wt(a, b) * (at(&y, a, b) - my).powi(2)).sum();
                let cov: f64 = cells()
                    .map(|(a, b)| wt(a, b) * (at(&x, a, b) - mx) * (at(&y, a, b) - my))
                    .sum();
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        per_channel += acc / ((h - 10) * (w - 10)) as f64;
    }
    per_channel / 3.0
}

/// A random RGBA pair; alpha is drawn from `[0.2, 1]` so composites vary.
pub fn random_pair(r: &mut ChaCha8Rng, n: usize) -> PatternPair {
    let mk = |r: &mut ChaCha8Rng| {
        Tensor::from_fn(&[n, n, 4], |i| if i % 4 == 3 { r.gen_range(0.2..1.0) } else { r.gen_range(0.0..1.0) })
    };
    let p = mk(r);
    let t = mk(r);
    PatternPair::new(&p, &t).unwrap()
}

/// Largest deviations of r2, nmi and ssim from the oracles over `count`
/// random pairs, and whether every identity pair scored exactly 1.
pub fn metric_oracle_deviations(count: usize, seed: u64) -> ([f64; 3], bool) {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 3];
    let mut identity = true;
    for _ in 0..count {
        let pair = random_pair(&mut r, 16);
        let d = [
            (devscaffold::analysis::linear_probe_r2(&pair) - oracle_r2(&pair)).abs(),
            (devscaffold::analysis::nmi(&pair, 32).unwrap() - oracle_nmi(&pair, 32)).abs(),
            (devscaffold::analysis::ssim(&pair).unwrap() - oracle_ssim(&pair)).abs(),
        ];
        for k in 0..3 {
            worst[k] = worst[k].max(d[k]);
        }
        let same = PatternPair::new(&pair.pattern, &pair.pattern).unwrap();
        let m = devscaffold::analysis::measure(&same, 32).unwrap();
        identity &= m.r2 == 1.0 && m.nmi == 1.0 && m.ssim == 1.0;
    }
    (worst, identity)
}
