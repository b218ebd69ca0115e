//! Weighted ridge least squares and the two per-stage linear regressors.
//!
//! Visibility update: `dc = T_a·phi + T_h·h`, added to the previous
//! probabilities and clamped to `[0, 1]`.
//!
//! Landmark update: `dx = R_a·(sqrt(c) ∘ phi) + R_h·h + R_d·alpha`, where
//! `sqrt(c_k)` scales landmark `k`'s whole descriptor block.

use nalgebra::{DMatrix, DVector};

use crate::deformable::DeformCoeffs;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::geometry::{PoseAngles, Shape2D, VisibilityVector};

/// Relative pivot size below which an unregularized system counts as singular.
const PIVOT_TOL: f64 = 1e-13;

/// Default ridge strength for a design with `dim` feature columns.
pub fn default_lambda(dim: usize) -> f64 {
    1e-3 * dim as f64
}

/// One observation for [`solve_weighted_ridge_ls`].
#[derive(Clone, Debug)]
pub struct WeightedRow {
    pub target: Vec<f64>,
    pub features: Vec<f64>,
    pub weight: f64,
}

/// Solves `argmin_W sum_i w_i |y_i - W f_i|^2 + lambda |W|_F^2`.
///
/// Returns `W` with one row per target component.
pub fn solve_weighted_ridge_ls(rows: &[WeightedRow], lambda: f64) -> Result<DMatrix<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("least squares needs at least one row"))?;
    let (p, q) = (first.features.len(), first.target.len());
    if rows
        .iter()
        .any(|r| r.features.len() != p || r.target.len() != q)
    {
        return Err(Error::invalid("rows have inconsistent dimensions"));
    }
    let n = rows.len();
    let features = DMatrix::from_fn(n, p, |i, j| rows[i].features[j]);
    let targets = DMatrix::from_fn(n, q, |i, j| rows[i].target[j]);
    let weights = DMatrix::from_fn(n, q, |i, _| rows[i].weight);
    solve_masked_ridge_ls(&features, &targets, &weights, lambda)
}

/// Ridge least squares where every target entry carries its own weight.
///
/// `features` is `n x p`, `targets` and `weights` are `n x q`. Output columns
/// whose weight columns are identical share one factorization.
pub fn solve_masked_ridge_ls(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let (n, p) = features.shape();
    let q = targets.ncols();
    if n == 0 {
        return Err(Error::invalid("least squares needs at least one row"));
    }
    if targets.nrows() != n || weights.shape() != (n, q) {
        return Err(Error::invalid(
            "target/weight matrices do not match the design",
        ));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "ridge strength {lambda} must be >= 0"
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("row weights must be finite and nonnegative"));
    }

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for j in 0..q {
        match groups
            .iter_mut()
            .find(|(rep, _)| weights.column(*rep) == weights.column(j))
        {
            Some((_, members)) => members.push(j),
            None => groups.push((j, vec![j])),
        }
    }

    let mut out = DMatrix::zeros(q, p);
    for (rep, members) in groups {
        let w = weights.column(rep);
        let mut scaled = features.clone();
        for i in 0..n {
            let s = w[i].sqrt();
            if s != 1.0 {
                scaled.row_mut(i).scale_mut(s);
            }
        }
        let scaled_t = scaled.transpose();
        let mut gram = &scaled_t * &scaled;
        for d in 0..p {
            gram[(d, d)] += lambda;
        }
        let mut rhs = DMatrix::zeros(n, members.len());
        for (c, &j) in members.iter().enumerate() {
            for i in 0..n {
                rhs[(i, c)] = w[i].sqrt() * targets[(i, j)];
            }
        }
        let rhs = &scaled_t * rhs;
        let solution = solve_spd(gram, &rhs, lambda)?;
        for (c, &j) in members.iter().enumerate() {
            out.row_mut(j).copy_from(&solution.column(c).transpose());
        }
    }
    Ok(out)
}

fn solve_spd(gram: DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let max_diag = gram.diagonal().max();
    let chol = match gram.cholesky() {
        Some(c) => c,
        None if lambda == 0.0 => return Err(Error::RankDeficient),
        None => {
            return Err(Error::Numeric(
                "ridge normal matrix is not positive definite".into(),
            ))
        }
    };
    if lambda == 0.0 {
        let l = chol.l_dirty();
        let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        if min_pivot <= PIVOT_TOL * max_diag {
            return Err(Error::RankDeficient);
        }
    }
    Ok(chol.solve(rhs))
}

/// Per-coordinate annotation weights: 1 for annotated points, 0 otherwise.
/// Both coordinates of a point share one flag.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationMask {
    diag: Vec<f64>,
}

impl AnnotationMask {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if !diag.len().is_multiple_of(2) {
            return Err(Error::invalid("mask length must be even"));
        }
        if diag.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        if diag.chunks_exact(2).any(|c| c[0] != c[1]) {
            return Err(Error::invalid(
                "u and v of a point must share one mask flag",
            ));
        }
        Ok(Self { diag })
    }

    pub fn from_points(annotated: &[bool]) -> Self {
        Self {
            diag: annotated
                .iter()
                .flat_map(|a| {
                    let v = if *a { 1.0 } else { 0.0 };
                    [v, v]
                })
                .collect(),
        }
    }

    pub fn all(landmarks: usize) -> Self {
        Self {
            diag: vec![1.0; 2 * landmarks],
        }
    }

    pub fn n_points(&self) -> usize {
        self.diag.len() / 2
    }

    pub fn is_annotated(&self, k: usize) -> bool {
        self.diag[2 * k] == 1.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.diag
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityRegressor {
    /// `D x (D·L)`.
    pub t_a: DMatrix<f64>,
    /// `D x 3`.
    pub t_h: DMatrix<f64>,
}

impl VisibilityRegressor {
    pub fn zeros(landmarks: usize, feature_dim: usize) -> Self {
        Self {
            t_a: DMatrix::zeros(landmarks, feature_dim),
            t_h: DMatrix::zeros(landmarks, 3),
        }
    }

    pub fn landmarks(&self) -> usize {
        self.t_a.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.t_a.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkRegressor {
    /// `2D x (D·L)`.
    pub r_a: DMatrix<f64>,
    /// `2D x 3`.
    pub r_h: DMatrix<f64>,
    /// `2D x K`.
    pub r_d: DMatrix<f64>,
}

impl LandmarkRegressor {
    pub fn zeros(landmarks: usize, feature_dim: usize, components: usize) -> Self {
        Self {
            r_a: DMatrix::zeros(2 * landmarks, feature_dim),
            r_h: DMatrix::zeros(2 * landmarks, 3),
            r_d: DMatrix::zeros(2 * landmarks, components),
        }
    }

    pub fn landmarks(&self) -> usize {
        self.r_a.nrows() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.r_a.ncols()
    }

    pub fn components(&self) -> usize {
        self.r_d.ncols()
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

pub fn predict_visibility(
    reg: &VisibilityRegressor,
    features: &FeatureVector,
    h_prev: &PoseAngles,
    c_prev: &VisibilityVector,
) -> Result<VisibilityVector> {
    check_len("feature vector", features.len(), reg.feature_dim())?;
    check_len("visibility vector", c_prev.len(), reg.landmarks())?;
    let phi = DVector::from_column_slice(features.as_slice());
    let h = DVector::from_column_slice(&h_prev.as_array());
    let delta = &reg.t_a * phi + &reg.t_h * h;
    Ok(VisibilityVector::clamped(
        c_prev
            .as_slice()
            .iter()
            .zip(delta.iter())
            .map(|(c, d)| c + d)
            .collect(),
    ))
}

/// Training record for one state of the visibility stage.
#[derive(Clone, Debug)]
pub struct VisibilitySample<'a> {
    pub features: &'a FeatureVector,
    pub h_prev: PoseAngles,
    pub c_prev: &'a VisibilityVector,
    /// Ground-truth visibility, 1 visible and 0 occluded.
    pub c_true: &'a [f64],
}

/// Joint design row `[phi; h]`.
fn visibility_design(s: &VisibilitySample<'_>, out: &mut [f64]) {
    let n = s.features.len();
    out[..n].copy_from_slice(s.features.as_slice());
    out[n..n + 3].copy_from_slice(&s.h_prev.as_array());
}

pub fn train_visibility(
    samples: &[VisibilitySample<'_>],
    lambda: f64,
) -> Result<VisibilityRegressor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("visibility training needs at least one sample"))?;
    let dim = first.features.len();
    let d = first.c_prev.len();
    for s in samples {
        check_len("feature vector", s.features.len(), dim)?;
        check_len("visibility vector", s.c_prev.len(), d)?;
        check_len("ground-truth visibility", s.c_true.len(), d)?;
    }
    let n = samples.len();
    let p = dim + 3;
    let mut design = DMatrix::zeros(n, p);
    let mut targets = DMatrix::zeros(n, d);
    let mut row = vec![0.0; p];
    for (i, s) in samples.iter().enumerate() {
        visibility_design(s, &mut row);
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
        for k in 0..d {
            targets[(i, k)] = s.c_true[k] - s.c_prev.as_slice()[k];
        }
    }
    let weights = DMatrix::from_element(n, d, 1.0);
    let w = solve_masked_ridge_ls(&design, &targets, &weights, lambda)?;
    Ok(VisibilityRegressor {
        t_a: w.columns(0, dim).into_owned(),
        t_h: w.columns(dim, 3).into_owned(),
    })
}

/// Applies `sqrt(c_k)` to every entry of landmark `k`'s block.
pub fn visibility_weighted(features: &FeatureVector, c: &VisibilityVector) -> Result<Vec<f64>> {
    check_len("visibility vector", c.len(), features.n_blocks())?;
    let l = features.block_len();
    Ok(features
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, v)| v * c.as_slice()[i / l].sqrt())
        .collect())
}

pub fn predict_landmark_update(
    reg: &LandmarkRegressor,
    features: &FeatureVector,
    c_now: &VisibilityVector,
    h_prev: &PoseAngles,
    alpha_prev: &DeformCoeffs,
    x_prev: &Shape2D,
) -> Result<Shape2D> {
    check_len("feature vector", features.len(), reg.feature_dim())?;
    check_len(
        "deformation coefficients",
        alpha_prev.len(),
        reg.components(),
    )?;
    check_len("2D shape", x_prev.len(), reg.landmarks())?;
    let weighted = DVector::from_vec(visibility_weighted(features, c_now)?);
    let h = DVector::from_column_slice(&h_prev.as_array());
    let mut delta = &reg.r_a * weighted + &reg.r_h * h;
    if !alpha_prev.is_empty() {
        delta += &reg.r_d * DVector::from_column_slice(alpha_prev.as_slice());
    }
    x_prev.add_update(delta.as_slice())
}

/// Training record for one state of the landmark stage.
#[derive(Clone, Debug)]
pub struct LandmarkSample<'a> {
    pub features: &'a FeatureVector,
    pub c_now: &'a VisibilityVector,
    pub h_prev: PoseAngles,
    pub alpha_prev: &'a DeformCoeffs,
    pub x_prev: &'a Shape2D,
    pub x_true: &'a Shape2D,
    pub mask: &'a AnnotationMask,
}

/// Learns `R_a`, `R_h`, `R_d` from mask-weighted shape residuals.
///
/// With `with_pose_deform = false` the pose and deformation columns are left
/// out of the design and `R_h`, `R_d` stay zero.
pub fn train_landmark(
    samples: &[LandmarkSample<'_>],
    lambda: f64,
    with_pose_deform: bool,
) -> Result<LandmarkRegressor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("landmark training needs at least one sample"))?;
    let dim = first.features.len();
    let d = first.x_prev.len();
    let k = first.alpha_prev.len();
    for s in samples {
        check_len("feature vector", s.features.len(), dim)?;
        check_len("visibility vector", s.c_now.len(), d)?;
        check_len("2D shape", s.x_prev.len(), d)?;
        check_len("ground-truth shape", s.x_true.len(), d)?;
        check_len("annotation mask", s.mask.n_points(), d)?;
        check_len("deformation coefficients", s.alpha_prev.len(), k)?;
    }
    let n = samples.len();
    let extra = if with_pose_deform { 3 + k } else { 0 };
    let p = dim + extra;
    let mut design = DMatrix::zeros(n, p);
    let mut targets = DMatrix::zeros(n, 2 * d);
    let mut weights = DMatrix::zeros(n, 2 * d);
    for (i, s) in samples.iter().enumerate() {
        let weighted = visibility_weighted(s.features, s.c_now)?;
        for (j, v) in weighted.iter().enumerate() {
            design[(i, j)] = *v;
        }
        if with_pose_deform {
            for (j, v) in s.h_prev.as_array().iter().enumerate() {
                design[(i, dim + j)] = *v;
            }
            for (j, v) in s.alpha_prev.as_slice().iter().enumerate() {
                design[(i, dim + 3 + j)] = *v;
            }
        }
        let (xt, xp) = (s.x_true.as_slice(), s.x_prev.as_slice());
        for c in 0..2 * d {
            let w = s.mask.as_slice()[c];
            weights[(i, c)] = w;
            // Unannotated coordinates carry no usable target.
            targets[(i, c)] = if w == 0.0 { 0.0 } else { xt[c] - xp[c] };
        }
    }
    let w = solve_masked_ridge_ls(&design, &targets, &weights, lambda)?;
    let mut reg = LandmarkRegressor::zeros(d, dim, k);
    reg.r_a.copy_from(&w.columns(0, dim));
    if with_pose_deform {
        reg.r_h.copy_from(&w.columns(dim, 3));
        if k > 0 {
            reg.r_d.copy_from(&w.columns(dim + 3, k));
        }
    }
    Ok(reg)
}
