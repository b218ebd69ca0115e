//! Staged training and inference over landmarks, visibility, pose and
//! deformation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FaceBox, TrainingSample};
use crate::deformable::{fit_pca, DeformCoeffs, DeformableModel};
use crate::error::{Error, Result};
use crate::features::{extract_shape_features, DescriptorSpec, FeatureVector, ImageRaster};
use crate::geometry::{PoseAngles, Shape2D, VisibilityVector, WeakPerspectivePose};
use crate::regression::{
    default_lambda, predict_landmark_update, predict_visibility, train_landmark, train_visibility,
    LandmarkRegressor, LandmarkSample, VisibilityRegressor, VisibilitySample,
};
use crate::solver::{solve_pose_deform, SolverConfig};

/// Format tag written into serialized models.
pub const MODEL_VERSION: &str = "facecascade-model/1";

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeStage {
    pub visibility: VisibilityRegressor,
    pub landmark: LandmarkRegressor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub version: String,
    pub stages: Vec<CascadeStage>,
    pub deformable: DeformableModel,
    /// Mean landmark positions in unit-box coordinates.
    pub mean_face_2d: Shape2D,
    pub descriptor: DescriptorSpec,
    pub solver_cfg: SolverConfig,
    pub eye_indices: Option<[usize; 2]>,
}

impl CascadeModel {
    pub fn landmarks(&self) -> usize {
        self.mean_face_2d.len()
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.landmarks() * self.descriptor.block_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.version.clone(),
                expected: MODEL_VERSION.to_string(),
            });
        }
        self.descriptor.validate()?;
        self.solver_cfg.validate()?;
        let (d, l, k) = (
            self.landmarks(),
            self.feature_dim(),
            self.deformable.n_components(),
        );
        if self.deformable.n_points() != d {
            return Err(Error::invalid(format!(
                "deformable model has {} points, mean face has {d}",
                self.deformable.n_points()
            )));
        }
        for (t, s) in self.stages.iter().enumerate() {
            let v = &s.visibility;
            let g = &s.landmark;
            let ok = v.t_a.shape() == (d, l)
                && v.t_h.shape() == (d, 3)
                && g.r_a.shape() == (2 * d, l)
                && g.r_h.shape() == (2 * d, 3)
                && g.r_d.shape() == (2 * d, k);
            if !ok {
                return Err(Error::invalid(format!(
                    "stage {t} dimensions do not match D={d}, L={l}, K={k}"
                )));
            }
        }
        if let Some([a, b]) = self.eye_indices {
            if a >= d || b >= d {
                return Err(Error::invalid("eye index out of range"));
            }
        }
        Ok(())
    }
}

/// Per-instance estimate carried between stages.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceState {
    pub x: Shape2D,
    pub c: VisibilityVector,
    pub h: PoseAngles,
    pub alpha: DeformCoeffs,
    /// `None` until a pose solve has succeeded.
    pub pose: Option<WeakPerspectivePose>,
}

fn place_in_box(mean_face: &Shape2D, b: &FaceBox) -> Result<Shape2D> {
    FaceBox::new(b.u, b.v, b.w, b.h)?;
    Shape2D::from_points(
        mean_face
            .points()
            .map(|p| [p[0] * b.w + b.u, p[1] * b.h + b.v]),
    )
}

fn initial_state(mean_face: &Shape2D, b: &FaceBox, components: usize) -> Result<InstanceState> {
    Ok(InstanceState {
        x: place_in_box(mean_face, b)?,
        c: VisibilityVector::ones(mean_face.len()),
        h: PoseAngles::zero(),
        alpha: DeformCoeffs::zeros(components),
        pose: None,
    })
}

/// Mean face placed in `face_box`, all visible, frontal, undeformed.
pub fn initialize(face_box: &FaceBox, model: &CascadeModel) -> Result<InstanceState> {
    initial_state(
        &model.mean_face_2d,
        face_box,
        model.deformable.n_components(),
    )
}

fn refit_pose(
    state: &mut InstanceState,
    deformable: &DeformableModel,
    cfg: &SolverConfig,
) -> Result<bool> {
    match solve_pose_deform(&state.x, &state.c, deformable, cfg) {
        Ok(fit) => {
            state.h = fit.pose.angles()?;
            state.alpha = fit.alpha;
            state.pose = Some(fit.pose);
            Ok(true)
        }
        Err(e @ Error::InvalidInput(_)) => Err(e),
        Err(e) => {
            log::debug!("pose solve failed, keeping previous pose: {e}");
            Ok(false)
        }
    }
}

/// Applies one stage given the features extracted at `state.x`.
pub fn apply_stage(
    model: &CascadeModel,
    stage: &CascadeStage,
    state: &InstanceState,
    features: &FeatureVector,
) -> Result<InstanceState> {
    Ok(advance(model, stage, state, features)?.0)
}

fn advance(
    model: &CascadeModel,
    stage: &CascadeStage,
    state: &InstanceState,
    features: &FeatureVector,
) -> Result<(InstanceState, bool)> {
    let c = predict_visibility(&stage.visibility, features, &state.h, &state.c)?;
    let x = predict_landmark_update(
        &stage.landmark,
        features,
        &c,
        &state.h,
        &state.alpha,
        &state.x,
    )?;
    let mut next = InstanceState {
        x,
        c,
        h: state.h,
        alpha: state.alpha.clone(),
        pose: state.pose,
    };
    let solved = refit_pose(&mut next, &model.deformable, &model.solver_cfg)?;
    Ok((next, solved))
}

/// Runs all stages with a caller-supplied feature extractor and returns the
/// state after initialization and after every stage.
pub fn predict_with<F>(
    model: &CascadeModel,
    face_box: &FaceBox,
    mut features: F,
) -> Result<Vec<InstanceState>>
where
    F: FnMut(&Shape2D) -> Result<FeatureVector>,
{
    let mut states = vec![initialize(face_box, model)?];
    for stage in &model.stages {
        let prev = states
            .last()
            .expect("trajectory starts with the initial state");
        let phi = features(&prev.x)?;
        let next = apply_stage(model, stage, prev, &phi)?;
        states.push(next);
    }
    Ok(states)
}

/// State after initialization and after every stage.
pub fn predict_trajectory(
    model: &CascadeModel,
    img: &ImageRaster,
    face_box: &FaceBox,
) -> Result<Vec<InstanceState>> {
    predict_with(model, face_box, |x| {
        extract_shape_features(img, x, &model.descriptor)
    })
}

pub fn predict(
    model: &CascadeModel,
    img: &ImageRaster,
    face_box: &FaceBox,
) -> Result<InstanceState> {
    let mut states = predict_trajectory(model, img, face_box)?;
    Ok(states.pop().expect("trajectory is never empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: usize,
    pub descriptor: DescriptorSpec,
    /// Fraction of shape variance kept by the deformable model.
    pub energy: f64,
    /// Ridge weight; `None` uses [`default_lambda`] of the design width.
    pub lambda: Option<f64>,
    pub seed: u64,
    /// Jittered initializations per training sample.
    pub augmentations: usize,
    /// Box scale is drawn from `1 +- scale_jitter`.
    pub scale_jitter: f64,
    /// Box shift per axis is drawn from `+- shift_jitter` box sizes.
    pub shift_jitter: f64,
    pub solver: SolverConfig,
    /// Learn visibility; when off, `c` stays at 1.
    pub use_visibility: bool,
    /// Feed pose and deformation into the landmark regressor.
    pub use_pose_deform: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            descriptor: DescriptorSpec::default(),
            energy: 0.9,
            lambda: None,
            seed: 0,
            augmentations: 8,
            scale_jitter: 0.1,
            shift_jitter: 0.05,
            solver: SolverConfig::default(),
            use_visibility: true,
            use_pose_deform: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        self.solver.validate()?;
        if !(self.energy > 0.0 && self.energy <= 1.0) {
            return Err(Error::invalid("energy must be in (0, 1]"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid("lambda must be finite and nonnegative"));
            }
        }
        if self.augmentations == 0 {
            return Err(Error::invalid("augmentations must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) || !(0.0..0.5).contains(&self.shift_jitter) {
            return Err(Error::invalid("jitter magnitudes out of range"));
        }
        Ok(())
    }
}

/// Training-set diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub n_states: usize,
    /// Mean landmark error over annotated points, after initialization and
    /// after every stage.
    pub mean_error: Vec<f64>,
    /// Pose solves that failed at each stage.
    pub pose_failures: Vec<usize>,
}

/// Mean face in unit-box coordinates over annotated points.
pub fn mean_face_from_samples(samples: &[TrainingSample]) -> Result<Shape2D> {
    let d = samples
        .first()
        .ok_or_else(|| Error::invalid("dataset is empty"))?
        .landmarks();
    let mut sum = vec![[0.0, 0.0]; d];
    let mut count = vec![0usize; d];
    for s in samples {
        let b = &s.face_box;
        for k in (0..d).filter(|&k| s.mask.is_annotated(k)) {
            let p = s.x_true.point(k);
            sum[k][0] += (p[0] - b.u) / b.w;
            sum[k][1] += (p[1] - b.v) / b.h;
            count[k] += 1;
        }
    }
    if let Some(k) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("landmark {k} is never annotated")));
    }
    Shape2D::from_points(
        sum.iter()
            .zip(&count)
            .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64]),
    )
}

/// Mean euclidean error over annotated points, or `None` if none are.
pub fn annotated_error(x: &Shape2D, sample: &TrainingSample) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for k in (0..x.len()).filter(|&k| sample.mask.is_annotated(k)) {
        let (p, q) = (x.point(k), sample.x_true.point(k));
        sum += (p[0] - q[0]).hypot(p[1] - q[1]);
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn mean_state_error(states: &[(usize, InstanceState)], samples: &[TrainingSample]) -> f64 {
    let errs: Vec<f64> = states
        .iter()
        .filter_map(|(i, s)| annotated_error(&s.x, &samples[*i]))
        .collect();
    errs.iter().sum::<f64>() / errs.len().max(1) as f64
}

/// Trains on image features from `cfg.descriptor`.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<CascadeModel> {
    Ok(train_traced(data, cfg)?.0)
}

pub fn train_traced(data: &Dataset, cfg: &TrainConfig) -> Result<(CascadeModel, TrainTrace)> {
    train_with(data, cfg, |i, x| {
        extract_shape_features(&data.samples[i].image, x, &cfg.descriptor)
    })
}

/// Trains with a caller-supplied extractor called as `features(sample_index, x)`.
pub fn train_with<F>(
    data: &Dataset,
    cfg: &TrainConfig,
    mut features: F,
) -> Result<(CascadeModel, TrainTrace)>
where
    F: FnMut(usize, &Shape2D) -> Result<FeatureVector>,
{
    cfg.validate()?;
    data.validate()?;
    let samples = &data.samples;
    let mean_face_2d = mean_face_from_samples(samples)?;
    if data.shapes3d.is_empty() {
        return Err(Error::invalid(
            "dataset has no 3D shapes for the deformable model",
        ));
    }
    let deformable = fit_pca(&data.shapes3d, cfg.energy)?;
    let k = deformable.n_components();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states = Vec::with_capacity(samples.len() * cfg.augmentations);
    for (i, s) in samples.iter().enumerate() {
        for _ in 0..cfg.augmentations {
            let scale = 1.0 + cfg.scale_jitter * rng.random_range(-1.0..=1.0);
            let du = cfg.shift_jitter * rng.random_range(-1.0..=1.0);
            let dv = cfg.shift_jitter * rng.random_range(-1.0..=1.0);
            let b = s.face_box.jittered(scale, du, dv)?;
            states.push((i, initial_state(&mean_face_2d, &b, k)?));
        }
    }

    let mut model = CascadeModel {
        version: MODEL_VERSION.to_string(),
        stages: Vec::with_capacity(cfg.stages),
        deformable,
        mean_face_2d,
        descriptor: cfg.descriptor.clone(),
        solver_cfg: cfg.solver.clone(),
        eye_indices: data.meta.eye_indices,
    };
    let mut trace = TrainTrace {
        n_states: states.len(),
        mean_error: vec![mean_state_error(&states, samples)],
        pose_failures: Vec::with_capacity(cfg.stages),
    };

    for t in 0..cfg.stages {
        let phis: Vec<FeatureVector> = states
            .iter()
            .map(|(i, s)| features(*i, &s.x))
            .collect::<Result<_>>()?;
        let dim = phis[0].len();
        let d = model.landmarks();

        let visibility = if cfg.use_visibility {
            let rows: Vec<VisibilitySample<'_>> = states
                .iter()
                .zip(&phis)
                .map(|((i, s), phi)| VisibilitySample {
                    features: phi,
                    h_prev: s.h,
                    c_prev: &s.c,
                    c_true: &samples[*i].c_true,
                })
                .collect();
            train_visibility(&rows, cfg.lambda.unwrap_or_else(|| default_lambda(dim + 3)))?
        } else {
            VisibilityRegressor::zeros(d, dim)
        };
        let c_now: Vec<VisibilityVector> = states
            .iter()
            .zip(&phis)
            .map(|((_, s), phi)| predict_visibility(&visibility, phi, &s.h, &s.c))
            .collect::<Result<_>>()?;

        let extra = if cfg.use_pose_deform { 3 + k } else { 0 };
        let rows: Vec<LandmarkSample<'_>> = states
            .iter()
            .zip(&phis)
            .zip(&c_now)
            .map(|(((i, s), phi), c)| LandmarkSample {
                features: phi,
                c_now: c,
                h_prev: s.h,
                alpha_prev: &s.alpha,
                x_prev: &s.x,
                x_true: &samples[*i].x_true,
                mask: &samples[*i].mask,
            })
            .collect();
        let landmark = train_landmark(
            &rows,
            cfg.lambda.unwrap_or_else(|| default_lambda(dim + extra)),
            cfg.use_pose_deform,
        )?;
        drop(rows);

        let stage = CascadeStage {
            visibility,
            landmark,
        };
        let mut failures = 0;
        for ((_, s), phi) in states.iter_mut().zip(&phis) {
            let (next, solved) = advance(&model, &stage, s, phi)?;
            failures += usize::from(!solved);
            *s = next;
        }
        model.stages.push(stage);
        let err = mean_state_error(&states, samples);
        log::info!(
            "stage {}: mean training error {err:.4} px, {failures} pose failures",
            t + 1
        );
        trace.mean_error.push(err);
        trace.pose_failures.push(failures);
    }
    model.validate()?;
    Ok((model, trace))
}
