//! Seeded synthetic faces: a deformable 3D point layout, sampled poses,
//! rendered rasters with per-landmark texture stamps, occlusion patterns and
//! a ground-truth oracle descriptor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, FaceBox, PoseTruth, TrainingSample};
use crate::deformable::{fit_pca, synthesize_shape, DeformCoeffs, DeformableModel};
use crate::error::{Error, Result};
use crate::features::{
    DescriptorKind, DescriptorSpec, FeatureVector, ImageRaster, ORACLE_BLOCK_LEN,
};
use crate::geometry::{
    pose_from_angles, project_weak_perspective, rotation_from_angles, PoseAngles, Shape2D, Shape3D,
};
use crate::regression::AnnotationMask;

const AXES: [f64; 3] = [1.0, 1.2, 0.8];
const AZIMUTH_SPAN: f64 = 60.0 * PI / 180.0;
const ELEVATION_TOP: f64 = -40.0 * PI / 180.0;
const ELEVATION_BOTTOM: f64 = 50.0 * PI / 180.0;
const BACKGROUND: f64 = 0.5;
const STAMP_AMPLITUDE: f64 = 0.35;
const STAMP_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OcclusionMode {
    None,
    /// Each landmark is covered by a gray rectangle with probability `rate`.
    Random {
        rate: f64,
    },
    /// Landmarks whose rotated surface normal has z below `threshold`.
    #[serde(rename = "self")]
    SelfOcclusion {
        threshold: f64,
    },
}

/// Fill of the rectangles drawn over randomly occluded landmarks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccluderStyle {
    #[default]
    Flat,
    /// Gray fill plus distractor stamps at random orientations.
    Textured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub landmarks: usize,
    pub k_true: usize,
    /// Number of 3D shapes in the family used to fit the deformable model.
    pub n_shapes: usize,
    pub image_size: usize,
    /// `[min, max]` in degrees.
    pub yaw_range: [f64; 2],
    pub pitch_range: [f64; 2],
    pub roll_range: [f64; 2],
    pub occlusion: OcclusionMode,
    pub occluder: OccluderStyle,
    /// Standard deviation of the landmark noise, in pixels.
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_samples: 100,
            landmarks: 20,
            k_true: 4,
            n_shapes: 200,
            image_size: 128,
            yaw_range: [-45.0, 45.0],
            pitch_range: [-15.0, 15.0],
            roll_range: [-15.0, 15.0],
            occlusion: OcclusionMode::None,
            occluder: OccluderStyle::Flat,
            noise_sigma: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.landmarks < 4 {
            return Err(Error::invalid("at least 4 landmarks are required"));
        }
        if self.image_size < 32 {
            return Err(Error::invalid("image_size must be at least 32"));
        }
        if self.k_true > 0 && self.n_shapes <= self.k_true {
            return Err(Error::invalid("n_shapes must exceed k_true"));
        }
        if self.k_true + 7 > 3 * self.landmarks {
            return Err(Error::invalid(
                "too many deformation modes for the landmark count",
            ));
        }
        for (name, r, limit) in [
            ("yaw_range", self.yaw_range, 85.0),
            ("pitch_range", self.pitch_range, 180.0),
            ("roll_range", self.roll_range, 180.0),
        ] {
            if !(r[0] <= r[1] && r[0] >= -limit && r[1] <= limit) {
                return Err(Error::invalid(format!(
                    "{name} must be ordered and within +-{limit} degrees"
                )));
            }
        }
        match self.occlusion {
            OcclusionMode::Random { rate } if !(0.0..=1.0).contains(&rate) => {
                return Err(Error::invalid("occlusion rate must be in [0, 1]"))
            }
            OcclusionMode::SelfOcclusion { threshold } if !(-1.0..=1.0).contains(&threshold) => {
                return Err(Error::invalid(
                    "self-occlusion threshold must be in [-1, 1]",
                ))
            }
            _ => {}
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// Base point layout on the front of an ellipsoid.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceLayout {
    pub points: Shape3D,
    /// Unit outward normals, one per point.
    pub normals: Vec<Vector3<f64>>,
    /// Normalized `(azimuth, elevation)` grid coordinates in `[-1, 1]`.
    pub grid: Vec<(f64, f64)>,
    pub eye_indices: [usize; 2],
}

fn row_sizes(d: usize) -> Vec<usize> {
    let cols = ((1.25 * d as f64).sqrt().ceil() as usize).max(2);
    let mut rows = vec![cols; d / cols];
    if !d.is_multiple_of(cols) {
        rows.push(d % cols);
    }
    rows
}

fn spread(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

pub fn face_layout(landmarks: usize) -> Result<FaceLayout> {
    if landmarks < 4 {
        return Err(Error::invalid("at least 4 landmarks are required"));
    }
    let rows = row_sizes(landmarks);
    let mut pts = Vec::with_capacity(landmarks);
    let mut normals = Vec::with_capacity(landmarks);
    let mut grid = Vec::with_capacity(landmarks);
    let mut eye_indices = [0, 0];
    let mut start = 0;
    for (r, &n) in rows.iter().enumerate() {
        let s_el = spread(r, rows.len());
        let el = ELEVATION_TOP + 0.5 * (s_el + 1.0) * (ELEVATION_BOTTOM - ELEVATION_TOP);
        for c in 0..n {
            let s_az = spread(c, n);
            let az = s_az * AZIMUTH_SPAN;
            let p = Vector3::new(
                AXES[0] * el.cos() * az.sin(),
                AXES[1] * el.sin(),
                AXES[2] * el.cos() * az.cos(),
            );
            let normal = Vector3::new(
                p.x / (AXES[0] * AXES[0]),
                p.y / (AXES[1] * AXES[1]),
                p.z / (AXES[2] * AXES[2]),
            )
            .normalize();
            pts.push(p);
            normals.push(normal);
            grid.push((s_az, s_el));
        }
        if r == 1.min(rows.len() - 1) {
            let off = (n - 1) / 4;
            eye_indices = [start + off, start + n - 1 - off];
        }
        start += n;
    }
    let centroid = pts.iter().sum::<Vector3<f64>>() / landmarks as f64;
    let points = Shape3D::from_points(pts.iter().map(|p| {
        let q = p - centroid;
        [q.x, q.y, q.z]
    }))?;
    Ok(FaceLayout {
        points,
        normals,
        grid,
        eye_indices,
    })
}

/// Orthonormal basis of the infinitesimal similarity motions of `shape`.
fn similarity_basis(shape: &Shape3D) -> DMatrix<f64> {
    let d = shape.len();
    let mut m = DMatrix::zeros(3 * d, 7);
    for (k, p) in shape.points().enumerate() {
        for a in 0..3 {
            m[(3 * k + a, a)] = 1.0;
            let w = Vector3::ith(a, 1.0).cross(&p);
            for b in 0..3 {
                m[(3 * k + b, 3 + a)] = w[b];
            }
            m[(3 * k + a, 6)] = p[a];
        }
    }
    m.qr().q()
}

/// Smooth displacement fields orthonormal to each other and to similarity
/// motions of the layout.
fn deformation_modes(layout: &FaceLayout, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = layout.points.len();
    let mut basis = similarity_basis(&layout.points);
    let mut modes = DMatrix::zeros(3 * d, k);
    let mut j = 0;
    while j < k {
        let mut v = DVector::zeros(3 * d);
        let f: [f64; 3] = std::array::from_fn(|_| rng.random_range(1..=2) as f64);
        let ph: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        for (i, &(s, e)) in layout.grid.iter().enumerate() {
            v[3 * i] = (PI * f[0] * s + ph[0]).sin() * (0.5 * PI * e).cos();
            v[3 * i + 1] = (PI * f[1] * e + ph[1]).sin();
            v[3 * i + 2] = (0.5 * PI * f[2] * (s + e) + ph[2]).sin();
        }
        let proj = &basis * (basis.transpose() * &v);
        v -= proj;
        let norm = v.norm();
        if norm < 1e-6 {
            continue;
        }
        v /= norm;
        modes.set_column(j, &v);
        basis = DMatrix::from_columns(
            &basis
                .column_iter()
                .map(|c| c.into_owned())
                .chain(std::iter::once(v))
                .collect::<Vec<_>>(),
        );
        j += 1;
    }
    modes
}

fn mode_sigma(j: usize) -> f64 {
    0.35 * 0.7f64.powi(j as i32)
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates the 3D shape family and the deformable model fitted to it with
/// all of the energy retained.
pub fn make_shape_family(cfg: &GenConfig) -> Result<(Vec<Shape3D>, DeformableModel)> {
    cfg.validate()?;
    let layout = face_layout(cfg.landmarks)?;
    let mut rng = substream(cfg.seed, 0);
    let modes = deformation_modes(&layout, cfg.k_true, &mut rng);
    let base = DVector::from_column_slice(layout.points.as_slice());
    let n = cfg.n_shapes.max(2);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = base.clone();
        for j in 0..cfg.k_true {
            let z: f64 = rng.sample(StandardNormal);
            s.axpy(z * mode_sigma(j), &modes.column(j), 1.0);
        }
        shapes.push(Shape3D::new(s.as_slice().to_vec())?);
    }
    let model = fit_pca(&shapes, 1.0)?;
    Ok((shapes, model))
}

/// A generated sample with the landmark noise that was added to `x_true`.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub sample: TrainingSample,
    pub noise: Vec<f64>,
}

fn uniform_deg(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Which points of `layout` face the camera under rotation `h`.
pub fn self_visibility(layout: &FaceLayout, h: &PoseAngles, threshold: f64) -> Vec<bool> {
    let r = rotation_from_angles(h);
    layout
        .normals
        .iter()
        .map(|n| (r * n).z >= threshold)
        .collect()
}

/// Pixel rectangle `[x0, x1] x [y0, y1]`, inclusive.
type Rect = [i64; 4];

fn stamp(img: &mut [f64], size: usize, center: [f64; 2], theta: f64, sigma: f64, clip: Rect) {
    let reach = (4.0 * sigma).ceil() as i64;
    let (cx, cy) = (center[0].round() as i64, center[1].round() as i64);
    let (ct, st) = (theta.cos(), theta.sin());
    let last = size as i64 - 1;
    for y in (cy - reach).max(0).max(clip[2])..=(cy + reach).min(last).min(clip[3]) {
        for x in (cx - reach).max(0).max(clip[0])..=(cx + reach).min(last).min(clip[1]) {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            let along = (dx * ct + dy * st) / sigma;
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            img[y as usize * size + x as usize] += STAMP_AMPLITUDE * along * g;
        }
    }
}

fn pixel_rect(size: usize, lo: [f64; 2], hi: [f64; 2]) -> Rect {
    let clip = |v: f64| v.round().clamp(0.0, size as f64 - 1.0) as i64;
    [clip(lo[0]), clip(hi[0]), clip(lo[1]), clip(hi[1])]
}

fn fill_rect(img: &mut [f64], size: usize, r: Rect, value: f64) {
    for y in r[2]..=r[3] {
        for x in r[0]..=r[1] {
            img[y as usize * size + x as usize] = value;
        }
    }
}

fn generate_one(
    cfg: &GenConfig,
    layout: &FaceLayout,
    model: &DeformableModel,
    id: usize,
) -> Result<GeneratedSample> {
    let mut rng = substream(cfg.seed, id as u64 + 1);
    let size = cfg.image_size;
    let sz = size as f64;
    let d = cfg.landmarks;

    let alpha = DeformCoeffs::new(
        model
            .variances()
            .iter()
            .map(|v| truncated_normal(&mut rng, v.sqrt()))
            .collect(),
    );
    let shape = synthesize_shape(model, &alpha)?;
    let h = PoseAngles::from_degrees(
        uniform_deg(&mut rng, cfg.pitch_range),
        uniform_deg(&mut rng, cfg.yaw_range),
        uniform_deg(&mut rng, cfg.roll_range),
    );
    let scale = sz * rng.random_range(0.20..0.26);
    let t = Vector2::new(
        sz * (0.5 + rng.random_range(-0.06..0.06)),
        sz * (0.5 + rng.random_range(-0.06..0.06)),
    );
    let pose = pose_from_angles(&h, scale, t)?;
    let clean = project_weak_perspective(&pose, &shape)?;
    let noise: Vec<f64> = (0..2 * d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * cfg.noise_sigma
        })
        .collect();
    let x_true = clean.add_update(&noise)?;

    let side = 2.0 * scale * rng.random_range(0.97..1.03);
    let centroid = x_true
        .points()
        .fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    let (cu, cv) = (centroid[0] / d as f64, centroid[1] / d as f64);
    let face_box = FaceBox::new(
        cu + side * rng.random_range(-0.02..0.02) - 0.5 * side,
        cv + side * rng.random_range(-0.02..0.02) - 0.5 * side,
        side,
        side,
    )?;

    let (c_true, mask) = match cfg.occlusion {
        OcclusionMode::None => (vec![1.0; d], AnnotationMask::all(d)),
        OcclusionMode::Random { rate } => (
            (0..d)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
                .collect(),
            AnnotationMask::all(d),
        ),
        OcclusionMode::SelfOcclusion { threshold } => {
            let vis = self_visibility(layout, &h, threshold);
            (
                vis.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
                AnnotationMask::from_points(&vis),
            )
        }
    };

    let sigma = STAMP_SIGMA * scale;
    let mut pixels = vec![BACKGROUND; size * size];
    for k in 0..d {
        if mask.is_annotated(k) {
            let theta = 2.0 * PI * k as f64 / d as f64 + h.roll;
            stamp(
                &mut pixels,
                size,
                x_true.point(k),
                theta,
                sigma,
                [0, size as i64, 0, size as i64],
            );
        }
    }
    if matches!(cfg.occlusion, OcclusionMode::Random { .. }) {
        for k in (0..d).filter(|&k| c_true[k] == 0.0) {
            let p = x_true.point(k);
            let half = [
                sigma * rng.random_range(2.0..3.0),
                sigma * rng.random_range(2.0..3.0),
            ];
            let off = [
                sigma * rng.random_range(-0.3..0.3),
                sigma * rng.random_range(-0.3..0.3),
            ];
            let gray = rng.random_range(0.3..0.7);
            let lo = [p[0] + off[0] - half[0], p[1] + off[1] - half[1]];
            let hi = [p[0] + off[0] + half[0], p[1] + off[1] + half[1]];
            let rect = pixel_rect(size, lo, hi);
            fill_rect(&mut pixels, size, rect, gray);
            if cfg.occluder == OccluderStyle::Textured {
                for _ in 0..2 {
                    let at = [
                        rng.random_range(lo[0]..hi[0]),
                        rng.random_range(lo[1]..hi[1]),
                    ];
                    let theta = rng.random_range(0.0..2.0 * PI);
                    stamp(&mut pixels, size, at, theta, sigma, rect);
                }
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    Ok(GeneratedSample {
        sample: TrainingSample {
            id,
            image: ImageRaster::new(size, size, pixels)?,
            face_box,
            x_true,
            c_true,
            mask,
            truth: Some(PoseTruth { h, alpha, pose }),
        },
        noise,
    })
}

/// Generates samples and keeps the per-sample landmark noise.
pub fn generate_with_noise(
    cfg: &GenConfig,
    model: &DeformableModel,
) -> Result<Vec<GeneratedSample>> {
    cfg.validate()?;
    if model.n_points() != cfg.landmarks {
        return Err(Error::invalid(format!(
            "deformable model has {} points, config asks for {}",
            model.n_points(),
            cfg.landmarks
        )));
    }
    let layout = face_layout(cfg.landmarks)?;
    (0..cfg.n_samples)
        .map(|id| generate_one(cfg, &layout, model, id))
        .collect()
}

pub fn generate(cfg: &GenConfig, model: &DeformableModel) -> Result<Vec<TrainingSample>> {
    Ok(generate_with_noise(cfg, model)?
        .into_iter()
        .map(|g| g.sample)
        .collect())
}

/// Shape family plus samples, ready to be written to disk.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    let (shapes3d, model) = make_shape_family(cfg)?;
    let samples = generate(cfg, &model)?;
    Ok(Dataset {
        meta: DatasetMeta {
            landmarks: cfg.landmarks,
            eye_indices: Some(face_layout(cfg.landmarks)?.eye_indices),
        },
        samples,
        shapes3d,
    })
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2);
    h
}

/// Ground-truth descriptor: per landmark `[du/w, dv/h, c_true, 1]` with
/// seeded noise, where `(du, dv)` is the offset to the true position.
pub fn oracle_descriptor(
    sample: &TrainingSample,
    x_current: &Shape2D,
    spec: &DescriptorSpec,
) -> Result<FeatureVector> {
    if spec.kind != DescriptorKind::Oracle {
        return Err(Error::invalid(
            "oracle features need an oracle descriptor spec",
        ));
    }
    let d = sample.landmarks();
    if x_current.len() != d {
        return Err(Error::invalid(format!(
            "shape has {} landmarks, sample has {d}",
            x_current.len()
        )));
    }
    let seed = x_current
        .as_slice()
        .iter()
        .fold(mix(0, sample.id as u64), |h, v| mix(h, v.to_bits()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &sample.face_box;
    let mut values = Vec::with_capacity(d * ORACLE_BLOCK_LEN);
    for k in 0..d {
        let (t, c) = (sample.x_true.point(k), x_current.point(k));
        for v in [
            (t[0] - c[0]) / b.w,
            (t[1] - c[1]) / b.h,
            sample.c_true[k],
            1.0,
        ] {
            let z: f64 = rng.sample(StandardNormal);
            values.push(v + 1e-3 * z);
        }
    }
    FeatureVector::new(values, ORACLE_BLOCK_LEN)
}
