//! Local appearance features sampled around each landmark.
//!
//! The default descriptor is a SIFT-style grid of gradient-orientation
//! histograms computed on a fixed-radius patch at the (rounded) landmark
//! position. Pixels outside the image read as zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Shape2D;

const NORM_EPS: f64 = 1e-6;
const CLIP: f64 = 0.2;

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "image buffer has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image intensities must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Intensity at integer pixel `(x, y)`; zero outside the image.
    pub fn get(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value.clamp(0.0, 1.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorKind {
    GradHist,
    RawPatch,
    /// Ground-truth-aware features, available only from the synthetic generator.
    Oracle,
}

impl std::str::FromStr for DescriptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad-hist" => Ok(Self::GradHist),
            "raw-patch" => Ok(Self::RawPatch),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::invalid(format!("unknown descriptor kind `{other}`"))),
        }
    }
}

/// Length of an oracle block: `[du, dv, visible, 1]`.
pub const ORACLE_BLOCK_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSpec {
    pub kind: DescriptorKind,
    pub patch_radius: usize,
    pub cells: usize,
    pub bins: usize,
}

impl Default for DescriptorSpec {
    fn default() -> Self {
        Self {
            kind: DescriptorKind::GradHist,
            patch_radius: 16,
            cells: 4,
            bins: 8,
        }
    }
}

impl DescriptorSpec {
    pub fn with_kind(kind: DescriptorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 {
            return Err(Error::invalid("patch radius must be at least 1"));
        }
        if self.kind == DescriptorKind::GradHist && (self.cells < 1 || self.bins < 1) {
            return Err(Error::invalid("cells and bins must be at least 1"));
        }
        Ok(())
    }

    /// Per-landmark descriptor length `L`.
    pub fn block_len(&self) -> usize {
        match self.kind {
            DescriptorKind::GradHist => self.cells * self.cells * self.bins,
            DescriptorKind::RawPatch => (2 * self.patch_radius + 1).pow(2),
            DescriptorKind::Oracle => ORACLE_BLOCK_LEN,
        }
    }
}

/// Concatenated per-landmark descriptor blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    block_len: usize,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, block_len: usize) -> Result<Self> {
        if block_len == 0 || !values.len().is_multiple_of(block_len) {
            return Err(Error::invalid(format!(
                "feature length {} is not a multiple of block length {}",
                values.len(),
                block_len
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature vector contains non-finite values"));
        }
        Ok(Self { values, block_len })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn n_blocks(&self) -> usize {
        self.values.len() / self.block_len
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.values[k * self.block_len..(k + 1) * self.block_len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = 1.0 / (norm + NORM_EPS);
    v.iter_mut().for_each(|x| *x *= scale);
}

fn rounded_center(center: (f64, f64)) -> Option<(i64, i64)> {
    if center.0.is_finite() && center.1.is_finite() {
        Some((center.0.round() as i64, center.1.round() as i64))
    } else {
        None
    }
}

fn grad_hist(img: &ImageRaster, center: (f64, f64), spec: &DescriptorSpec) -> Vec<f64> {
    let cells = spec.cells;
    let bins = spec.bins;
    let mut hist = vec![0.0; cells * cells * bins];
    let Some((cx, cy)) = rounded_center(center) else {
        return hist;
    };
    let r = spec.patch_radius as i64;
    let rf = r as f64;
    let sigma2 = 2.0 * rf * rf;
    let cell_scale = cells as f64 / (2.0 * rf);
    let bin_scale = bins as f64 / (2.0 * PI);

    // Gradients stay within radius r of the center, so sample at |d| <= r - 1.
    for dy in -(r - 1)..=(r - 1) {
        for dx in -(r - 1)..=(r - 1) {
            let (x, y) = (cx + dx, cy + dy);
            let gx = img.get(x + 1, y) - img.get(x - 1, y);
            let gy = img.get(x, y + 1) - img.get(x, y - 1);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let (fdx, fdy) = (dx as f64, dy as f64);
            let weight = mag * (-(fdx * fdx + fdy * fdy) / sigma2).exp();
            let ori = gy.atan2(gx).rem_euclid(2.0 * PI);

            let fx = (fdx + rf) * cell_scale - 0.5;
            let fy = (fdy + rf) * cell_scale - 0.5;
            let fo = ori * bin_scale;
            let (x0, y0, o0) = (fx.floor(), fy.floor(), fo.floor());
            let (wx1, wy1, wo1) = (fx - x0, fy - y0, fo - o0);
            for (iy, wy) in [(y0 as i64, 1.0 - wy1), (y0 as i64 + 1, wy1)] {
                if iy < 0 || iy >= cells as i64 || wy == 0.0 {
                    continue;
                }
                for (ix, wx) in [(x0 as i64, 1.0 - wx1), (x0 as i64 + 1, wx1)] {
                    if ix < 0 || ix >= cells as i64 || wx == 0.0 {
                        continue;
                    }
                    let base = (iy as usize * cells + ix as usize) * bins;
                    for (io, wo) in [(o0 as i64, 1.0 - wo1), (o0 as i64 + 1, wo1)] {
                        let io = io.rem_euclid(bins as i64) as usize;
                        hist[base + io] += weight * wy * wx * wo;
                    }
                }
            }
        }
    }
    normalize(&mut hist);
    hist.iter_mut().for_each(|v| *v = v.min(CLIP));
    normalize(&mut hist);
    hist
}

fn raw_patch(img: &ImageRaster, center: (f64, f64), spec: &DescriptorSpec) -> Vec<f64> {
    let r = spec.patch_radius as i64;
    let side = (2 * r + 1) as usize;
    let mut out = vec![0.0; side * side];
    let Some((cx, cy)) = rounded_center(center) else {
        return out;
    };
    for dy in -r..=r {
        for dx in -r..=r {
            out[((dy + r) as usize) * side + (dx + r) as usize] = img.get(cx + dx, cy + dy);
        }
    }
    normalize(&mut out);
    out
}

/// Descriptor of the patch centered at `center = (u, v)`.
pub fn extract_patch_descriptor(
    img: &ImageRaster,
    center: (f64, f64),
    spec: &DescriptorSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    match spec.kind {
        DescriptorKind::GradHist => Ok(grad_hist(img, center, spec)),
        DescriptorKind::RawPatch => Ok(raw_patch(img, center, spec)),
        DescriptorKind::Oracle => Err(Error::OracleUnavailable),
    }
}

/// Concatenates the descriptors of all landmarks in landmark order.
pub fn extract_shape_features(
    img: &ImageRaster,
    x: &Shape2D,
    spec: &DescriptorSpec,
) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(x.len() * spec.block_len());
    for p in x.points() {
        values.extend(extract_patch_descriptor(img, (p[0], p[1]), spec)?);
    }
    FeatureVector::new(values, spec.block_len())
}
