//! Measures of how much of a target is already present in a pattern:
//! pixel-wise linear probe R², histogram NMI and SSIM.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dataset;
use crate::error::{Error, Result};
use crate::gridcore::{ParamStore, Tensor};
use crate::prepattern::RGBA;
use crate::rng;

pub const DEFAULT_NMI_BINS: usize = 32;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// A pattern and its target, both reduced to clamped `[H, W, 4]` RGBA.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternPair {
    pub pattern: Tensor,
    pub target: Tensor,
}

/// The four visible channels of a state grid, clamped to `[0, 1]`.
pub fn clamp_visible(grid: &Tensor) -> Result<Tensor> {
    Ok(grid.channels(0, RGBA)?.map(|v| v.clamp(0.0, 1.0)))
}

impl PatternPair {
    pub fn new(pattern: &Tensor, target: &Tensor) -> Result<Self> {
        let (ps, ts) = (pattern.shape(), target.shape());
        if ps.len() != 3 || ts.len() != 3 || ps[..2] != ts[..2] {
            return Err(Error::dim("pattern pair", ps, ts));
        }
        Ok(PatternPair {
            pattern: clamp_visible(pattern)?,
            target: clamp_visible(target)?,
        })
    }

    pub fn height(&self) -> usize {
        self.pattern.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pattern.shape()[1]
    }

    pub fn swapped(&self) -> PatternPair {
        PatternPair {
            pattern: self.target.clone(),
            target: self.pattern.clone(),
        }
    }
}

/// RGB composited over a white background: `c·α + (1 − α)`, as `[H, W, 3]`.
pub fn composite_over_white(rgba: &Tensor) -> Tensor {
    let s = rgba.shape();
    let mut data = Vec::with_capacity(s[0] * s[1] * 3);
    for px in rgba.data().chunks_exact(s[2]) {
        let a = px[3];
        for &c in &px[..3] {
            data.push(c * a + (1.0 - a));
        }
    }
    Tensor::new(&[s[0], s[1], 3], data).expect("composite shape")
}

/// Mean of the composited RGB channels per pixel.
pub fn grayscale(rgba: &Tensor) -> Vec<f64> {
    composite_over_white(rgba)
        .data()
        .chunks_exact(3)
        .map(|c| (c[0] + c[1] + c[2]) / 3.0)
        .collect()
}

fn channel_is_constant(t: &Tensor, k: usize) -> bool {
    let c = t.cols();
    let first = t.data()[k];
    t.data().chunks_exact(c).all(|px| px[k] == first)
}

/// Pixel-wise least-squares probe with intercept from pattern RGBA to target
/// RGBA. Returns the R² averaged over target channels that vary; 0 when the
/// pattern is constant or no target channel varies.
pub fn linear_probe_r2(pair: &PatternPair) -> f64 {
    let (p, t) = (&pair.pattern, &pair.target);
    let n = p.rows();
    if (0..RGBA).all(|k| channel_is_constant(p, k)) {
        return 0.0;
    }
    let varying: Vec<usize> = (0..RGBA).filter(|&k| !channel_is_constant(t, k)).collect();
    if varying.is_empty() {
        return 0.0;
    }
    // The fit is exact; skip the solve so rounding cannot pull it below 1.
    if p == t {
        return 1.0;
    }
    let x = DMatrix::from_fn(n, RGBA + 1, |i, j| if j == 0 { 1.0 } else { p.data()[i * RGBA + j - 1] });
    let y = DMatrix::from_fn(n, varying.len(), |i, j| t.data()[i * RGBA + varying[j]]);
    let svd = x.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1.0);
    let beta = svd.solve(&y, eps).expect("both factors were computed");
    let fitted = &x * beta;
    let r2_sum: f64 = (0..varying.len())
        .map(|j| {
            let col = y.column(j);
            let mean = col.mean();
            let ss_tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = col
                .iter()
                .zip(fitted.column(j).iter())
                .map(|(v, f)| (v - f).powi(2))
                .sum();
            1.0 - ss_res / ss_tot
        })
        .sum();
    r2_sum / varying.len() as f64
}

/// Probe R² after randomly permuting the pattern's pixels: the chance line.
pub fn shuffled_probe_r2(pair: &PatternPair, seed: u64) -> f64 {
    let mut order: Vec<usize> = (0..pair.pattern.rows()).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5AFF]));
    let src = pair.pattern.data();
    let data = order
        .iter()
        .flat_map(|&i| src[i * RGBA..(i + 1) * RGBA].iter().copied())
        .collect();
    let shuffled = PatternPair {
        pattern: Tensor::new(pair.pattern.shape(), data).expect("same shape"),
        target: pair.target.clone(),
    };
    linear_probe_r2(&shuffled)
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// Shannon entropy (nats) of a histogram. Counts are sorted first so the
/// summation order, and therefore the rounding, depends only on the multiset
/// of counts.
fn entropy(counts: impl Iterator<Item = usize>, total: usize) -> f64 {
    let mut c: Vec<usize> = counts.filter(|&c| c > 0).collect();
    c.sort_unstable();
    let n = total as f64;
    c.iter()
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(X;Y) / (H(X) + H(Y))` between the
/// grayscale images of the pair, from equal-width histograms over `[0, 1]`.
/// Both constant gives 1; exactly one constant gives 0.
pub fn nmi(pair: &PatternPair, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Config(format!("nmi needs >= 2 bins, got {bins}")));
    }
    let x: Vec<usize> = grayscale(&pair.pattern).into_iter().map(|v| bin_of(v, bins)).collect();
    let y: Vec<usize> = grayscale(&pair.target).into_iter().map(|v| bin_of(v, bins)).collect();
    let n = x.len();
    let mut hx = vec![0usize; bins];
    let mut hy = vec![0usize; bins];
    let mut hxy = vec![0usize; bins * bins];
    for (&a, &b) in x.iter().zip(&y) {
        hx[a] += 1;
        hy[b] += 1;
        hxy[a * bins + b] += 1;
    }
    let ex = entropy(hx.into_iter(), n);
    let ey = entropy(hy.into_iter(), n);
    match (ex == 0.0, ey == 0.0) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let exy = entropy(hxy.into_iter(), n);
    let mi = ex + ey - exy;
    Ok((2.0 * mi / (ex + ey)).clamp(0.0, 1.0))
}

/// Normalized `size x size` Gaussian window, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let g1: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w: Vec<f64> = (0..size * size).map(|k| g1[k / size] * g1[k % size]).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean SSIM over valid 11x11 Gaussian windows (σ = 1.5), averaged over the
/// RGB channels of both images composited over white.
pub fn ssim(pair: &PatternPair) -> Result<f64> {
    let (h, w) = (pair.height(), pair.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim("ssim", &[h, w], &[SSIM_WINDOW, SSIM_WINDOW]));
    }
    let x = composite_over_white(&pair.pattern);
    let y = composite_over_white(&pair.target);
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        for i0 in 0..oh {
            for j0 in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..SSIM_WINDOW {
                    for b in 0..SSIM_WINDOW {
                        let wt = win[a * SSIM_WINDOW + b];
                        let xv = x.at3(i0 + a, j0 + b, ch);
                        let yv = y.at3(i0 + a, j0 + b, ch);
                        mx += wt * xv;
                        my += wt * yv;
                        xx += wt * (xv * xv);
                        yy += wt * (yv * yv);
                        xy += wt * (xv * yv);
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                sum += num / den;
            }
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

/// All three measures for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMeasures {
    pub r2: f64,
    pub nmi: f64,
    pub ssim: f64,
}

pub fn measure(pair: &PatternPair, bins: usize) -> Result<PairMeasures> {
    Ok(PairMeasures {
        r2: linear_probe_r2(pair),
        nmi: nmi(pair, bins)?,
        ssim: ssim(pair)?,
    })
}

/// Number of scalars in the entries of `stores` whose names pass `include`.
pub fn parameter_count(stores: &[&ParamStore], include: impl Fn(&str) -> bool) -> usize {
    stores
        .iter()
        .flat_map(|s| s.iter())
        .filter(|(name, _)| include(name))
        .map(|(_, e)| e.value.len())
        .sum()
}

/// Strongest non-zero spatial frequency of a 1-D profile, in cycles per
/// cell, and its share of the non-DC power up to Nyquist. A flat profile
/// gives `(0, 0)`.
pub fn dominant_frequency(profile: &[f64]) -> (f64, f64) {
    let n = profile.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mean = profile.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = profile.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = power.iter().sum();
    if total <= 1e-300 {
        return (0.0, 0.0);
    }
    let (k, p) = power
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
    ((k + 1) as f64 / n as f64, p / total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRow {
    pub name: String,
    pub measures: PairMeasures,
}

/// Pairs PNGs with equal file names in `patterns` and `targets` and measures
/// each pair. Files present on one side only are ignored.
pub fn analyze_directories(patterns: &Path, targets: &Path, bins: usize) -> Result<Vec<AnalysisRow>> {
    let pats = dataset::load_targets(patterns)?;
    let tgts = dataset::load_targets(targets)?;
    let mut rows = Vec::new();
    for (name, p) in &pats {
        if let Some((_, t)) = tgts.iter().find(|(n, _)| n == name) {
            let pair = PatternPair::new(p, t)?;
            rows.push(AnalysisRow {
                name: name.clone(),
                measures: measure(&pair, bins)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_analysis_csv(rows: &[AnalysisRow], path: &Path) -> Result<()> {
    let mut out = String::from("name,r2,nmi,ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.name, r.measures.r2, r.measures.nmi, r.measures.ssim
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
