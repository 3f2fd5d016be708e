//! Synthetic (saliency map, caption) pairs and the seeded train/test sampler.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIZE: usize = 64;
pub const DEFAULT_TRAIN: usize = 2000;
pub const DEFAULT_TEST: usize = 500;

/// Ellipses at least this round are captioned as circles.
const CIRCLE_ASPECT: f64 = 0.85;

/// Single-channel map with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::invalid(
                "saliency map",
                format!("{height}x{width} with {} values", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("saliency map", format!("value {v} outside [0, 1]")));
        }
        Ok(SaliencyMap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SaliencyMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob];
}

/// Parameters of one synthetic scene. Fractions are relative to the map size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    /// (row, col) of the object center.
    pub center: (f64, f64),
    /// Diameter (ellipse, blob) or width (rectangle) as a fraction of the map side.
    pub size: f64,
    /// Gaussian blur standard deviation in pixels; 0 disables blurring.
    pub blur: f64,
    /// Drives the aspect ratio and blob outline.
    pub seed: u64,
}

/// Seed-derived details of a scene not given explicitly in its spec.
struct Detail {
    /// Height over width, in [0.5, 1].
    aspect: f64,
    /// Blob outline harmonics (order, amplitude, phase).
    harmonics: [(f64, f64, f64); 2],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.center.0) || !open(self.center.1) {
            return Err(Error::invalid(
                "scene center",
                format!("{:?} must lie in (0, 1)", self.center),
            ));
        }
        if !open(self.size) {
            return Err(Error::invalid("scene size", format!("{} must lie in (0, 1)", self.size)));
        }
        if !(self.blur.is_finite() && self.blur >= 0.0) {
            return Err(Error::invalid("blur radius", format!("{}", self.blur)));
        }
        Ok(())
    }

    fn detail(&self) -> Detail {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let aspect = rng.random_range(0.5..=1.0);
        let mut harmonic = |order: f64| {
            (
                order,
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        let harmonics = [harmonic(2.0), harmonic(3.0)];
        Detail { aspect, harmonics }
    }

    pub fn size_word(&self) -> &'static str {
        if self.size < 1.0 / 3.0 {
            "small"
        } else if self.size < 2.0 / 3.0 {
            "medium"
        } else {
            "large"
        }
    }

    pub fn shape_word(&self) -> &'static str {
        match self.shape {
            ShapeKind::Ellipse if self.detail().aspect >= CIRCLE_ASPECT => "circle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Blob => "blob",
        }
    }

    pub fn position_word(&self) -> &'static str {
        let third = |v: f64| {
            if v < 1.0 / 3.0 {
                0
            } else if v < 2.0 / 3.0 {
                1
            } else {
                2
            }
        };
        const GRID: [[&str; 3]; 3] = [
            ["top left", "top", "top right"],
            ["left", "center", "right"],
            ["bottom left", "bottom", "bottom right"],
        ];
        GRID[third(self.center.0)][third(self.center.1)]
    }

    pub fn caption(&self) -> Caption {
        Caption(format!(
            "a {} {} in the {}",
            self.size_word(),
            self.shape_word(),
            self.position_word()
        ))
    }

    /// Binary object mask sampled at pixel centers.
    fn mask(&self, height: usize, width: usize) -> Vec<f32> {
        let detail = self.detail();
        let (cy, cx) = self.center;
        let half = self.size / 2.0;
        let mut mask = vec![0.0f32; height * width];
        for r in 0..height {
            let y = (r as f64 + 0.5) / height as f64 - cy;
            for c in 0..width {
                let x = (c as f64 + 0.5) / width as f64 - cx;
                let inside = match self.shape {
                    ShapeKind::Ellipse => {
                        let (a, b) = (half, half * detail.aspect);
                        (x / a).powi(2) + (y / b).powi(2) <= 1.0
                    }
                    ShapeKind::Rectangle => x.abs() <= half && y.abs() <= half * detail.aspect,
                    ShapeKind::Blob => {
                        let theta = y.atan2(x);
                        let wobble: f64 = detail
                            .harmonics
                            .iter()
                            .map(|&(k, amp, phase)| amp * (k * theta + phase).cos())
                            .sum();
                        x.hypot(y) <= half * (1.0 + wobble)
                    }
                };
                if inside {
                    mask[r * width + c] = 1.0;
                }
            }
        }
        // the pixel holding the center always belongs to the object
        let r = ((cy * height as f64) as usize).min(height - 1);
        let c = ((cx * width as f64) as usize).min(width - 1);
        mask[r * width + c] = 1.0;
        mask
    }
}

/// Template caption text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption(pub String);

impl Caption {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.split_whitespace()
    }

    pub fn byte_len(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with zero padding outside the map.
fn blur(values: &[f32], height: usize, width: usize, sigma: f64) -> Vec<f32> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| {
        let mut dst = vec![0.0f64; src.len()];
        for r in 0..height {
            for c in 0..width {
                let mut acc = 0.0;
                for (j, &k) in kernel.iter().enumerate() {
                    let off = j as isize - radius;
                    let (rr, cc) = if along_rows {
                        (r as isize, c as isize + off)
                    } else {
                        (r as isize + off, c as isize)
                    };
                    if rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
                        acc += k * src[rr as usize * width + cc as usize];
                    }
                }
                dst[r * width + c] = acc;
            }
        }
        dst
    };
    let src: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let out = pass(&pass(&src, true), false);
    out.into_iter().map(|v| v as f32).collect()
}

/// Renders `spec` at `height`x`width` and derives its caption.
///
/// The blurred map is rescaled so that its peak is 1.
pub fn generate_pair_sized(spec: &SceneSpec, height: usize, width: usize) -> Result<(SaliencyMap, Caption)> {
    spec.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("map size", format!("{height}x{width}")));
    }
    let mut values = spec.mask(height, width);
    if spec.blur > 0.0 {
        values = blur(&values, height, width, spec.blur);
        let peak = values.iter().copied().fold(0.0f32, f32::max);
        for v in &mut values {
            *v = (*v / peak).clamp(0.0, 1.0);
        }
    }
    Ok((SaliencyMap::new(height, width, values)?, spec.caption()))
}

pub fn generate_pair(spec: &SceneSpec) -> Result<(SaliencyMap, Caption)> {
    generate_pair_sized(spec, DEFAULT_SIZE, DEFAULT_SIZE)
}

/// Uniform sampler over the scene ranges.
fn sample_spec(rng: &mut ChaCha8Rng) -> SceneSpec {
    let shape = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
    SceneSpec {
        shape,
        center: (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)),
        size: rng.random_range(0.15..0.85),
        blur: rng.random_range(0.0..2.0),
        seed: rng.next_u64(),
    }
}

/// Draws train and test specs from two independent streams of one seed.
pub fn make_split(n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<SceneSpec>, Vec<SceneSpec>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid(
            "split sizes",
            format!("train {n_train}, test {n_test}; both must be positive"),
        ));
    }
    let draw = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n).map(|_| sample_spec(&mut rng)).collect::<Vec<_>>()
    };
    Ok((draw(0, n_train), draw(1, n_test)))
}

/// Renders every spec at the default size.
pub fn render_all(specs: &[SceneSpec]) -> Result<Vec<(SaliencyMap, Caption)>> {
    specs.iter().map(generate_pair).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: ShapeKind, center: (f64, f64), size: f64, blur: f64) -> SceneSpec {
        SceneSpec {
            shape,
            center,
            size,
            blur,
            seed: 7,
        }
    }

    #[test]
    fn unblurred_ellipse() {
        let (m, _) = generate_pair(&spec(ShapeKind::Ellipse, (0.5, 0.5), 0.2, 0.0)).unwrap();
        assert_eq!(m.get(32, 32), 1.0);
        assert_eq!(m.max(), 1.0);
        for (r, c) in [(0, 0), (0, 63), (63, 0), (63, 63)] {
            assert_eq!(m.get(r, c), 0.0);
        }
    }

    #[test]
    fn template_caption() {
        let (_, cap) = generate_pair(&spec(ShapeKind::Rectangle, (0.15, 0.15), 0.1, 1.5)).unwrap();
        assert_eq!(cap.as_str(), "a small rectangle in the top left");
    }

    #[test]
    fn position_grid() {
        let s = |r, c| spec(ShapeKind::Blob, (r, c), 0.5, 0.0).position_word();
        assert_eq!(s(0.5, 0.5), "center");
        assert_eq!(s(0.2, 0.5), "top");
        assert_eq!(s(0.9, 0.9), "bottom right");
        assert_eq!(s(0.5, 0.1), "left");
    }

    #[test]
    fn invalid_fractions() {
        for bad in [
            spec(ShapeKind::Blob, (0.0, 0.5), 0.5, 0.0),
            spec(ShapeKind::Blob, (0.5, 1.0), 0.5, 0.0),
            spec(ShapeKind::Blob, (0.5, 0.5), 1.2, 0.0),
            spec(ShapeKind::Blob, (0.5, 0.5), 0.3, -1.0),
        ] {
            assert!(matches!(generate_pair(&bad), Err(Error::Validation { .. })));
        }
    }

    #[test]
    fn split_defaults_and_errors() {
        let (train, test) = make_split(DEFAULT_TRAIN, DEFAULT_TEST, 0).unwrap();
        assert_eq!((train.len(), test.len()), (2000, 500));
        assert!(make_split(0, 5, 0).is_err());
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
