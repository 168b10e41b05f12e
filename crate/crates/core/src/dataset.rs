//! Procedural target morphologies with exact symmetries, and 8-bit RGBA PNG
//! input/output.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridcore::Tensor;
use crate::prepattern::RGBA;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Flower,
    Butterfly,
    Cross,
    Ring,
    Jellyfish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    /// k-fold rotational symmetry; only k = 2 and k = 4 are exact on a grid.
    Radial(u32),
    /// Mirror symmetry about the vertical axis.
    Axial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub family: Family,
    pub symmetry: Symmetry,
    /// Region colours, primary first. Families use up to three.
    pub palette: Vec<[f64; 3]>,
    pub size: usize,
    /// Overall extent as a fraction of the half-width.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Family-specific shape knob in `[0, 1]` (petal depth, ring thickness, ...).
    #[serde(default = "default_detail")]
    pub detail: f64,
}

fn default_scale() -> f64 {
    0.8
}

fn default_detail() -> f64 {
    0.5
}

impl TargetSpec {
    fn colour(&self, i: usize) -> [f64; 3] {
        self.palette[i.min(self.palette.len() - 1)]
    }

    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("target `{}` size {} < 16", self.name, self.size)));
        }
        if self.palette.is_empty() || self.palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("target `{}` needs colours in [0, 1]", self.name)));
        }
        let ok = match (self.family, self.symmetry) {
            (Family::Flower, Symmetry::Radial(k)) => k == 2 || k == 4,
            (Family::Ring, Symmetry::Radial(_)) => true,
            (Family::Flower | Family::Ring, Symmetry::Axial) => false,
            (_, Symmetry::Axial) => true,
            (_, Symmetry::Radial(_)) => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "target `{}`: {:?} does not support {:?}",
                self.name, self.family, self.symmetry
            )));
        }
        Ok(())
    }
}

/// Which palette entry covers the normalized point `(x, y)`, if any.
/// `x` runs down the rows and `y` across the columns, both in `[-1, 1]`.
/// Every family is written in terms of `x²`, `y²` (or `|y|`) so the required
/// symmetries hold bit-exactly on the grid.
fn region(spec: &TargetSpec, x: f64, y: f64) -> Option<usize> {
    let (x2, y2) = (x * x, y * y);
    let r2 = x2 + y2;
    let s = spec.scale;
    let d = spec.detail;
    match spec.family {
        Family::Flower => {
            let k = match spec.symmetry {
                Symmetry::Radial(k) => k,
                Symmetry::Axial => unreachable!("validated"),
            };
            let cos_k = if r2 == 0.0 {
                1.0
            } else if k == 4 {
                (x2 * x2 + y2 * y2 - 6.0 * (x2 * y2)) / (r2 * r2)
            } else {
                (x2 - y2) / r2
            };
            let rho = s * (1.0 - d + d * (0.5 + 0.5 * cos_k));
            if r2 <= (0.3 * s).powi(2) {
                Some(1)
            } else if r2 <= rho * rho {
                Some(0)
            } else {
                None
            }
        }
        Family::Cross => {
            let arm = 0.15 + 0.2 * d;
            let (ax, ay) = (x2.sqrt(), y2.sqrt());
            let inside = (ax <= arm * s && ay <= s) || (ay <= arm * s && ax <= s);
            if ax <= arm * s && ay <= arm * s {
                Some(1)
            } else if inside {
                Some(0)
            } else {
                None
            }
        }
        Family::Ring => {
            let inner = s * (1.0 - 0.5 * d);
            if r2 <= (0.2 * s).powi(2) {
                Some(1)
            } else if r2 <= s * s && r2 >= inner * inner {
                Some(0)
            } else {
                None
            }
        }
        Family::Butterfly => {
            let ay = y2.sqrt();
            if ay <= 0.07 * s && x.abs() <= 0.7 * s {
                return Some(2);
            }
            let upper = ((x + 0.3 * s) / (0.45 * s)).powi(2) + ((ay - 0.45 * s) / (0.45 * s)).powi(2);
            let lower = ((x - 0.4 * s) / (0.35 * s)).powi(2) + ((ay - 0.35 * s) / (0.3 * s)).powi(2);
            let spot = ((x + 0.35 * s) / (0.15 * s)).powi(2) + ((ay - 0.5 * s) / (0.15 * s)).powi(2);
            if upper <= 1.0 && spot <= 1.0 + d {
                Some(1)
            } else if upper <= 1.0 || lower <= 1.0 {
                Some(0)
            } else {
                None
            }
        }
        Family::Jellyfish => {
            let ay = y2.sqrt();
            if x <= 0.0 {
                // Dome over the upper half.
                let dome = (x / (0.6 * s)).powi(2) + (ay / s).powi(2);
                if dome <= 0.35 {
                    Some(1)
                } else if dome <= 1.0 {
                    Some(0)
                } else {
                    None
                }
            } else {
                let stripes = 3.0 + 3.0 * d;
                let phase = (ay / s * stripes).fract();
                (x <= 0.85 * s && ay <= 0.8 * s && phase < 0.4).then_some(2)
            }
        }
    }
}

/// Rasterizes `spec` to `[size, size, 4]`; alpha is 1 on the figure and
/// everything is 0 outside it.
pub fn render_target(spec: &TargetSpec) -> Result<Tensor> {
    spec.validate()?;
    let n = spec.size;
    let half = (n - 1) as f64 / 2.0;
    let mut out = Tensor::zeros(&[n, n, RGBA]);
    for i in 0..n {
        for j in 0..n {
            let x = (i as f64 - half) / half;
            let y = (j as f64 - half) / half;
            if let Some(r) = region(spec, x, y) {
                let [cr, cg, cb] = spec.colour(r);
                for (k, v) in [cr, cg, cb, 1.0].into_iter().enumerate() {
                    out.set3(i, j, k, v);
                }
            }
        }
    }
    Ok(out)
}

const DEFAULT_SUITE: &str = include_str!("../assets/default_suite.json");

/// The versioned 20-target suite, rendered at `size`.
pub fn default_suite(size: usize) -> Result<Vec<TargetSpec>> {
    let mut specs: Vec<TargetSpec> = serde_json::from_str(DEFAULT_SUITE)?;
    for s in &mut specs {
        s.size = size;
    }
    Ok(specs)
}

pub fn read_manifest(path: &Path) -> Result<Vec<TargetSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Renders every spec, keeping its name.
pub fn render_suite(specs: &[TargetSpec]) -> Result<Vec<(String, Tensor)>> {
    specs
        .iter()
        .map(|s| Ok((s.name.clone(), render_target(s)?)))
        .collect()
}

/// Encodes the visible channels of `grid`, clamped to `[0, 1]`, as 8-bit RGBA.
pub fn encode_png(grid: &Tensor) -> Result<Vec<u8>> {
    let s = grid.shape();
    if s.len() != 3 || s[2] < RGBA {
        return Err(Error::dim("export_png", s, &[0, 0, RGBA]));
    }
    let bytes: Vec<u8> = grid
        .data()
        .chunks_exact(s[2])
        .flat_map(|px| px[..RGBA].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, s[1] as u32, s[0] as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(buf)
}

pub fn write_png(grid: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_png(grid)?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    std::io::Write::write_all(&mut BufWriter::new(f), &bytes).map_err(|e| Error::io(path, e))
}

/// Decodes any 8-bit PNG colour type to `[H, W, 4]` in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let to_f = |b: u8| b as f64 / 255.0;
    let data: Vec<f64> = match info.color_type {
        png::ColorType::Rgba => px.iter().map(|&b| to_f(b)).collect(),
        png::ColorType::Rgb => px
            .chunks_exact(3)
            .flat_map(|c| [to_f(c[0]), to_f(c[1]), to_f(c[2]), 1.0])
            .collect(),
        png::ColorType::GrayscaleAlpha => px
            .chunks_exact(2)
            .flat_map(|c| [to_f(c[0]), to_f(c[0]), to_f(c[0]), to_f(c[1])])
            .collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [to_f(g), to_f(g), to_f(g), 1.0]).collect(),
        png::ColorType::Indexed => return Err(Error::Png("palette not expanded".into())),
    };
    Tensor::new(&[h, w, RGBA], data)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut BufReader::new(f), &mut bytes).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Png(m) => Error::Png(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Every `*.png` in `dir`, sorted by file name, named by file stem.
pub fn load_targets(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, read_png(p)?));
    }
    if let Some((_, first)) = out.first() {
        let dims = &first.shape()[..2];
        let odd: Vec<String> = out
            .iter()
            .zip(&paths)
            .filter(|((_, t), _)| &t.shape()[..2] != dims)
            .map(|((_, t), p)| format!("{} ({}x{})", p.display(), t.shape()[0], t.shape()[1]))
            .collect();
        if !odd.is_empty() {
            return Err(Error::Ingestion(format!(
                "expected {}x{} images, but found: {}",
                dims[0],
                dims[1],
                odd.join(", ")
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, symmetry: Symmetry) -> TargetSpec {
        TargetSpec {
            name: "t".into(),
            family,
            symmetry,
            palette: vec![[0.9, 0.2, 0.3], [1.0, 0.8, 0.1], [0.2, 0.2, 0.2]],
            size: 32,
            scale: 0.8,
            detail: 0.5,
        }
    }

    #[test]
    fn cross_mirrors_both_ways() {
        let t = render_target(&spec(Family::Cross, Symmetry::Axial)).unwrap();
        assert_eq!(t, t.flip_columns());
        assert_eq!(t, t.flip_rows());
    }

    #[test]
    fn flower_four_fold() {
        let t = render_target(&spec(Family::Flower, Symmetry::Radial(4))).unwrap();
        assert_eq!(t, t.rot90());
        let t2 = render_target(&spec(Family::Flower, Symmetry::Radial(2))).unwrap();
        assert_eq!(t2, t2.rot90().rot90());
        assert_ne!(t2, t2.rot90());
    }

    #[test]
    fn palette_changes_colour_only() {
        let a = spec(Family::Flower, Symmetry::Radial(4));
        let mut b = a.clone();
        b.palette = vec![[0.1, 0.3, 0.9], [0.9, 0.9, 0.9]];
        let (ta, tb) = (render_target(&a).unwrap(), render_target(&b).unwrap());
        assert_eq!(ta.channels(3, 1).unwrap(), tb.channels(3, 1).unwrap());
        assert_ne!(ta.channels(0, 3).unwrap(), tb.channels(0, 3).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(render_target(&spec(Family::Flower, Symmetry::Radial(5))).is_err());
        assert!(render_target(&spec(Family::Butterfly, Symmetry::Radial(4))).is_err());
        let mut s = spec(Family::Cross, Symmetry::Axial);
        s.size = 8;
        assert!(render_target(&s).is_err());
        assert!(serde_json::from_str::<TargetSpec>(
            r#"{"name":"x","family":"teapot","symmetry":"axial","palette":[[0,0,0]],"size":32}"#
        )
        .is_err());
    }

    #[test]
    fn default_suite_shape() {
        let suite = default_suite(32).unwrap();
        assert_eq!(suite.len(), 20);
        let flowers = suite.iter().filter(|s| s.family == Family::Flower).count();
        let butterflies = suite.iter().filter(|s| s.family == Family::Butterfly).count();
        assert!(flowers >= 2 && butterflies >= 2);
        for s in &suite {
            let t = render_target(s).unwrap();
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(t.channels(3, 1).unwrap().data().iter().any(|&a| a == 1.0), "{}", s.name);
            assert!(t.channels(3, 1).unwrap().data().iter().any(|&a| a == 0.0), "{}", s.name);
        }
        let mut names: Vec<_> = suite.iter().map(|s| &s.name).collect();
        names.dedup();
        assert_eq!(names.len(), 20);
    }
}
