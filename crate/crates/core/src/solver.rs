//! Weighted alternating fit of a weak-perspective pose and deformation
//! coefficients to 2D landmarks.
//!
//! The objective is `sum_k w_k |x_k - M (mean_k + B_k alpha) - t|^2`. With
//! `alpha` fixed it is linear least squares in `(M, t)`; with the pose fixed
//! it is linear least squares in `alpha`. The two blocks are solved in turn,
//! starting from `alpha = 0`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::deformable::{clamp_coeffs, synthesize_shape, DeformCoeffs, DeformableModel};
use crate::error::{Error, Result};
use crate::geometry::{Shape2D, Shape3D, VisibilityVector, WeakPerspectivePose};

/// Weights at or below this value do not count as constraints.
pub const EFFECTIVE_WEIGHT: f64 = 1e-6;

/// Smallest eigenvalue ratio of the pose normal matrix considered solvable.
const POSE_CONDITION: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub min_effective_points: usize,
    /// Ridge on `alpha` as a multiple of the model's mean retained variance
    /// (scaled by the mean point weight).
    pub ridge_factor: f64,
    /// Clamp `alpha` to +-3 standard deviations after every deformation step.
    pub clamp: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-6,
            min_effective_points: 4,
            ridge_factor: 1e-3,
            clamp: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::invalid("solver max_iters must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("solver rel_tol must be positive"));
        }
        if !(self.ridge_factor >= 0.0) {
            return Err(Error::invalid("solver ridge_factor must be nonnegative"));
        }
        Ok(())
    }
}

/// Outcome of [`solve_pose_deform`].
#[derive(Clone, Debug)]
pub struct PoseDeformFit {
    pub pose: WeakPerspectivePose,
    pub alpha: DeformCoeffs,
    /// Final weighted squared reprojection error.
    pub residual: f64,
    pub iterations: usize,
    /// Residual after the initial pose fit and after every half-step.
    pub history: Vec<f64>,
}

fn check_inputs(x2d: &Shape2D, weights: &VisibilityVector, points: usize) -> Result<()> {
    if x2d.len() != points || weights.len() != points {
        return Err(Error::invalid(format!(
            "landmark count mismatch: 2D shape {}, weights {}, model {}",
            x2d.len(),
            weights.len(),
            points
        )));
    }
    Ok(())
}

fn effective_points(weights: &VisibilityVector) -> usize {
    weights
        .as_slice()
        .iter()
        .filter(|w| **w > EFFECTIVE_WEIGHT)
        .count()
}

fn require_effective(weights: &VisibilityVector, required: usize) -> Result<usize> {
    let effective = effective_points(weights);
    if effective < required {
        return Err(Error::InsufficientConstraints {
            effective,
            required,
        });
    }
    Ok(effective)
}

/// `sum_k w_k |x_k - M p_k - t|^2`.
pub fn weighted_residual(
    x2d: &Shape2D,
    weights: &VisibilityVector,
    pose: &WeakPerspectivePose,
    shape3d: &Shape3D,
) -> f64 {
    x2d.points()
        .zip(shape3d.points())
        .zip(weights.as_slice())
        .map(|((x, p), w)| {
            let q = pose.project_point(&p);
            w * ((x[0] - q.x).powi(2) + (x[1] - q.y).powi(2))
        })
        .sum()
}

/// Closed-form weighted affine fit of `(M, t)`, projected onto a scaled
/// rotation. The translation is re-fit for the projected `M`.
pub fn solve_pose_given_deform(
    x2d: &Shape2D,
    weights: &VisibilityVector,
    shape3d: &Shape3D,
    cfg: &SolverConfig,
) -> Result<WeakPerspectivePose> {
    check_inputs(x2d, weights, shape3d.len())?;
    require_effective(weights, cfg.min_effective_points.max(1))?;

    let mut normal = Matrix4::<f64>::zeros();
    let mut rhs_u = Vector4::<f64>::zeros();
    let mut rhs_v = Vector4::<f64>::zeros();
    for ((x, p), &w) in x2d.points().zip(shape3d.points()).zip(weights.as_slice()) {
        if w <= 0.0 {
            continue;
        }
        let h = Vector4::new(p.x, p.y, p.z, 1.0);
        normal += w * h * h.transpose();
        rhs_u += w * x[0] * h;
        rhs_v += w * x[1] * h;
    }
    let eig = normal.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= hi * POSE_CONDITION {
        return Err(Error::DegenerateGeometry(format!(
            "pose normal matrix is singular (eigenvalues {lo:e} .. {hi:e})"
        )));
    }
    let chol = normal.cholesky().ok_or_else(|| {
        Error::DegenerateGeometry("pose normal matrix is not positive definite".into())
    })?;
    let row_u = chol.solve(&rhs_u);
    let row_v = chol.solve(&rhs_v);
    let m = Matrix2x3::new(row_u[0], row_u[1], row_u[2], row_v[0], row_v[1], row_v[2]);
    let canonical = WeakPerspectivePose::canonical(m, Vector2::zeros())?;

    let mut wsum = 0.0;
    let mut t = Vector2::zeros();
    for ((x, p), &w) in x2d.points().zip(shape3d.points()).zip(weights.as_slice()) {
        if w <= 0.0 {
            continue;
        }
        let q = canonical.m * p;
        t += w * Vector2::new(x[0] - q.x, x[1] - q.y);
        wsum += w;
    }
    t /= wsum;
    Ok(WeakPerspectivePose { t, ..canonical })
}

/// Ridge-regularized weighted least squares for `alpha` with the pose fixed,
/// followed by optional clamping.
pub fn solve_deform_given_pose(
    x2d: &Shape2D,
    weights: &VisibilityVector,
    pose: &WeakPerspectivePose,
    model: &DeformableModel,
    cfg: &SolverConfig,
) -> Result<DeformCoeffs> {
    check_inputs(x2d, weights, model.n_points())?;
    let k = model.n_components();
    if k == 0 {
        return Ok(DeformCoeffs::zeros(0));
    }
    let effective = require_effective(weights, cfg.min_effective_points.max(1))?;
    if k > 2 * effective {
        return Err(Error::InsufficientConstraints {
            effective,
            required: k.div_ceil(2),
        });
    }

    let basis = model.basis();
    let mean = model.mean_shape();
    let mut normal = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut a_k = DMatrix::<f64>::zeros(2, k);
    for (idx, (x, &w)) in x2d.points().zip(weights.as_slice()).enumerate() {
        if w <= 0.0 {
            continue;
        }
        let b_rows = basis.rows(3 * idx, 3);
        a_k.copy_from(&(pose.m * b_rows));
        let q = pose.project_point(&mean.point(idx));
        let r = Vector2::new(x[0] - q.x, x[1] - q.y);
        normal += w * a_k.transpose() * &a_k;
        rhs += w * a_k.transpose() * r;
    }
    // The ridge follows the mean weight so uniform rescaling of the weights
    // leaves the minimizer unchanged.
    let mean_weight = weights.as_slice().iter().sum::<f64>() / weights.len() as f64;
    let lambda = cfg.ridge_factor * model.mean_variance() * mean_weight;
    for i in 0..k {
        normal[(i, i)] += lambda;
    }
    let chol = normal.cholesky().ok_or_else(|| {
        Error::Numeric(format!(
            "deformation normal matrix is singular (ridge {lambda:e})"
        ))
    })?;
    let alpha = DeformCoeffs::new(chol.solve(&rhs).as_slice().to_vec());
    if alpha.alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("non-finite deformation coefficients".into()));
    }
    if cfg.clamp {
        clamp_coeffs(model, &alpha)
    } else {
        Ok(alpha)
    }
}

/// Alternates pose and deformation solves until the weighted residual
/// settles or `max_iters` alternations have run.
pub fn solve_pose_deform(
    x2d: &Shape2D,
    weights: &VisibilityVector,
    model: &DeformableModel,
    cfg: &SolverConfig,
) -> Result<PoseDeformFit> {
    cfg.validate()?;
    check_inputs(x2d, weights, model.n_points())?;
    let wsum: f64 = weights.as_slice().iter().sum();

    let mut alpha = DeformCoeffs::zeros(model.n_components());
    let mut shape = synthesize_shape(model, &alpha)?;
    let mut pose = solve_pose_given_deform(x2d, weights, &shape, cfg)?;
    let mut residual = weighted_residual(x2d, weights, &pose, &shape);
    let mut history = vec![residual];
    let mut iterations = 0;

    if model.n_components() > 0 {
        for _ in 0..cfg.max_iters {
            iterations += 1;
            let prev = residual;

            alpha = solve_deform_given_pose(x2d, weights, &pose, model, cfg)?;
            shape = synthesize_shape(model, &alpha)?;
            residual = weighted_residual(x2d, weights, &pose, &shape);
            history.push(residual);

            let candidate = solve_pose_given_deform(x2d, weights, &shape, cfg)?;
            let cand_residual = weighted_residual(x2d, weights, &candidate, &shape);
            // The rotation projection can overshoot the affine optimum; never
            // accept a pose that is worse than the current one.
            if cand_residual <= residual {
                pose = candidate;
                residual = cand_residual;
            }
            history.push(residual);

            let floor = 1e-20 * wsum * pose.scale * pose.scale;
            if residual <= floor || (prev - residual).abs() <= cfg.rel_tol * prev {
                break;
            }
        }
    }

    Ok(PoseDeformFit {
        pose,
        alpha,
        residual,
        iterations,
        history,
    })
}
