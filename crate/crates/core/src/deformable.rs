//! Linear 3D deformable shape model `s = mean + B·alpha` learned by PCA.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::Shape3D;

/// Relative eigenvalue cutoff below which a component is numerically zero.
const RANK_TOL: f64 = 1e-10;
const ABS_RANK_TOL: f64 = 1e-20;

/// Mean 3D shape plus an orthonormal basis of deformation modes.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableModel {
    mean_shape: Shape3D,
    /// `3D x K`, orthonormal columns.
    basis: DMatrix<f64>,
    /// Component variances, nonincreasing.
    variances: Vec<f64>,
}

/// Deformation coefficients `alpha`, one per basis column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeformCoeffs {
    pub alpha: Vec<f64>,
}

impl DeformCoeffs {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self { alpha }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            alpha: vec![0.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }
}

impl DeformableModel {
    /// Assembles a model from stored parts, checking the basis invariants.
    pub fn from_parts(
        mean_shape: Shape3D,
        basis: DMatrix<f64>,
        variances: Vec<f64>,
    ) -> Result<Self> {
        if basis.nrows() != mean_shape.as_slice().len() {
            return Err(Error::invalid(format!(
                "basis has {} rows but the mean shape has {} coordinates",
                basis.nrows(),
                mean_shape.as_slice().len()
            )));
        }
        if basis.ncols() != variances.len() {
            return Err(Error::invalid(
                "basis column count differs from variance count",
            ));
        }
        if variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
            || variances.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::invalid(
                "variances must be finite, nonnegative and nonincreasing",
            ));
        }
        let gram = basis.transpose() * &basis;
        let k = basis.ncols();
        if (gram - DMatrix::identity(k, k)).abs().max() > 1e-8 {
            return Err(Error::invalid("basis columns are not orthonormal"));
        }
        Ok(Self {
            mean_shape,
            basis,
            variances,
        })
    }

    pub fn mean_shape(&self) -> &Shape3D {
        &self.mean_shape
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Number of retained components `K`.
    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    /// Number of 3D points `D`.
    pub fn n_points(&self) -> usize {
        self.mean_shape.len()
    }

    /// Mean of the retained variances, 0 when `K = 0`.
    pub fn mean_variance(&self) -> f64 {
        if self.variances.is_empty() {
            0.0
        } else {
            self.variances.iter().sum::<f64>() / self.variances.len() as f64
        }
    }
}

/// Smallest number of leading components whose cumulative share of the total
/// reaches `energy`. `eigenvalues` must be sorted in descending order.
pub fn components_for_energy(eigenvalues: &[f64], energy: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let target = energy * total * (1.0 - 1e-12);
    let positive = eigenvalues.iter().take_while(|v| **v > 0.0).count();
    let mut cum = 0.0;
    for (k, v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum >= target {
            return (k + 1).min(positive);
        }
    }
    positive
}

/// Fits the mean shape and the principal deformation modes.
///
/// The covariance uses the `N - 1` divisor; a single shape yields `K = 0`.
pub fn fit_pca(shapes: &[Shape3D], energy: f64) -> Result<DeformableModel> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::invalid("PCA needs at least one shape"))?;
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::invalid(format!("energy {energy} outside (0, 1]")));
    }
    let dim = first.as_slice().len();
    if dim == 0 {
        return Err(Error::invalid("shapes have no points"));
    }
    if let Some(bad) = shapes.iter().find(|s| s.as_slice().len() != dim) {
        return Err(Error::invalid(format!(
            "inconsistent shape sizes: {} vs {}",
            bad.as_slice().len(),
            dim
        )));
    }
    let n = shapes.len();
    let mut mean = DVector::<f64>::zeros(dim);
    for s in shapes {
        mean += DVector::from_column_slice(s.as_slice());
    }
    mean /= n as f64;
    let mean_shape = Shape3D::new(mean.as_slice().to_vec())?;

    if n < 2 {
        return DeformableModel::from_parts(mean_shape, DMatrix::zeros(dim, 0), Vec::new());
    }

    let centered = DMatrix::from_fn(n, dim, |i, j| shapes[i].as_slice()[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    // Stable sort keeps the decomposition's order among equal eigenvalues.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    // Round-off floor for identical shapes, relative to the coordinate magnitude.
    let floor = (top * RANK_TOL).max(ABS_RANK_TOL * mean.norm_squared() / dim as f64);
    let sorted: Vec<f64> = order
        .iter()
        .map(|&i| {
            let v = eig.eigenvalues[i];
            if v <= floor {
                0.0
            } else {
                v
            }
        })
        .collect();
    let k = components_for_energy(&sorted, energy);

    let mut basis = DMatrix::zeros(dim, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        col /= col.norm();
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col = -col;
        }
        basis.set_column(c, &col);
    }
    DeformableModel::from_parts(mean_shape, basis, sorted[..k].to_vec())
}

/// `mean + B·alpha`.
pub fn synthesize_shape(model: &DeformableModel, alpha: &DeformCoeffs) -> Result<Shape3D> {
    if alpha.len() != model.n_components() {
        return Err(Error::invalid(format!(
            "expected {} coefficients, got {}",
            model.n_components(),
            alpha.len()
        )));
    }
    let mut s = DVector::from_column_slice(model.mean_shape.as_slice());
    if !alpha.is_empty() {
        s += &model.basis * DVector::from_column_slice(&alpha.alpha);
    }
    Shape3D::new(s.as_slice().to_vec())
}

/// Least-squares coefficients `B^T (s - mean)`.
pub fn project_coeffs(model: &DeformableModel, shape: &Shape3D) -> Result<DeformCoeffs> {
    if shape.as_slice().len() != model.mean_shape.as_slice().len() {
        return Err(Error::invalid(format!(
            "shape has {} coordinates, model expects {}",
            shape.as_slice().len(),
            model.mean_shape.as_slice().len()
        )));
    }
    let diff = DVector::from_column_slice(shape.as_slice())
        - DVector::from_column_slice(model.mean_shape.as_slice());
    let alpha = model.basis.transpose() * diff;
    Ok(DeformCoeffs::new(alpha.as_slice().to_vec()))
}

/// Clamps each coefficient to three standard deviations of its component.
pub fn clamp_coeffs(model: &DeformableModel, alpha: &DeformCoeffs) -> Result<DeformCoeffs> {
    if alpha.len() != model.n_components() {
        return Err(Error::invalid("coefficient count does not match the model"));
    }
    Ok(DeformCoeffs::new(
        alpha
            .alpha
            .iter()
            .zip(&model.variances)
            .map(|(a, var)| {
                let bound = 3.0 * var.sqrt();
                a.clamp(-bound, bound)
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_shapes(seed: u64, n: usize, points: usize, modes: usize) -> Vec<Shape3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..3 * points)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let dirs: Vec<Vec<f64>> = (0..modes)
            .map(|_| {
                (0..3 * points)
                    .map(|_| rng.random_range(-0.3..0.3))
                    .collect()
            })
            .collect();
        (0..n)
            .map(|_| {
                let mut s = base.clone();
                for d in &dirs {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    for (x, dx) in s.iter_mut().zip(d) {
                        *x += z * dx;
                    }
                }
                Shape3D::new(s).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_shapes_have_no_modes() {
        let s = Shape3D::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let model = fit_pca(&vec![s.clone(); 5], 0.9).unwrap();
        assert_eq!(model.mean_shape(), &s);
        assert_eq!(model.n_components(), 0);
    }

    #[test]
    fn single_shape_has_no_modes() {
        let s = Shape3D::new(vec![1.0, 2.0, 3.0]).unwrap();
        let model = fit_pca(&[s], 1.0).unwrap();
        assert_eq!(model.n_components(), 0);
    }

    #[test]
    fn two_shapes_give_one_mode_along_their_difference() {
        let s1 = Shape3D::new(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s2 = Shape3D::new(vec![0.5, -1.0, 2.0, 1.0, 3.0, 0.0]).unwrap();
        let model = fit_pca(&[s1.clone(), s2.clone()], 1.0).unwrap();
        assert_eq!(model.n_components(), 1);
        let d = DVector::from_iterator(
            6,
            s2.as_slice().iter().zip(s1.as_slice()).map(|(a, b)| a - b),
        );
        let col = model.basis().column(0);
        let cos = col.dot(&d) / d.norm();
        assert_abs_diff_eq!(cos.abs(), 1.0, epsilon = 1e-12);
        // Deviations are +-d/2 with divisor N - 1 = 1.
        assert_abs_diff_eq!(
            model.variances()[0],
            d.norm_squared() / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn energy_rule_on_known_spectrum() {
        assert_eq!(components_for_energy(&[5.0, 3.0, 1.0, 1.0], 0.9), 3);
        assert_eq!(components_for_energy(&[5.0, 3.0, 1.0, 1.0], 0.5), 1);
        assert_eq!(components_for_energy(&[5.0, 3.0, 1.0, 1.0], 0.51), 2);
        assert_eq!(components_for_energy(&[5.0, 3.0, 1.0, 1.0], 1.0), 4);
        assert_eq!(components_for_energy(&[0.0, 0.0], 0.9), 0);
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let a = Shape3D::new(vec![0.0; 3]).unwrap();
        let b = Shape3D::new(vec![0.0; 6]).unwrap();
        assert!(matches!(fit_pca(&[a, b], 0.9), Err(Error::InvalidInput(_))));
        assert!(fit_pca(&[], 0.9).is_err());
    }

    #[test]
    fn full_energy_reconstructs_training_shapes() {
        let shapes = random_shapes(1, 40, 12, 5);
        let model = fit_pca(&shapes, 1.0).unwrap();
        assert_eq!(model.n_components(), 5);
        for s in &shapes {
            let back = synthesize_shape(&model, &project_coeffs(&model, s).unwrap()).unwrap();
            let err = DVector::from_column_slice(back.as_slice())
                - DVector::from_column_slice(s.as_slice());
            let rel = err.norm() / DVector::from_column_slice(s.as_slice()).norm();
            assert!(rel <= 1e-6, "relative error {rel}");
        }
    }

    #[test]
    fn retained_energy_is_minimal() {
        let shapes = random_shapes(2, 60, 10, 8);
        for energy in [0.5, 0.8, 0.9, 0.99] {
            let model = fit_pca(&shapes, energy).unwrap();
            let full = fit_pca(&shapes, 1.0).unwrap();
            let total: f64 = full.variances().iter().sum();
            let kept: f64 = model.variances().iter().sum();
            assert!(kept >= energy * total * (1.0 - 1e-12));
            let k = model.n_components();
            assert!(k >= 1);
            let without_last: f64 = model.variances()[..k - 1].iter().sum();
            assert!(without_last < energy * total);
        }
    }

    #[test]
    fn zero_coefficients_give_mean_and_unit_coefficient_gives_column() {
        let model = fit_pca(&random_shapes(3, 20, 6, 3), 1.0).unwrap();
        let k = model.n_components();
        let s = synthesize_shape(&model, &DeformCoeffs::zeros(k)).unwrap();
        assert_eq!(&s, model.mean_shape());
        let mut e = vec![0.0; k];
        e[1] = 1.0;
        let s = synthesize_shape(&model, &DeformCoeffs::new(e)).unwrap();
        for i in 0..s.as_slice().len() {
            assert_abs_diff_eq!(
                s.as_slice()[i],
                model.mean_shape().as_slice()[i] + model.basis()[(i, 1)],
                epsilon = 1e-15
            );
        }
        assert!(synthesize_shape(&model, &DeformCoeffs::zeros(k + 1)).is_err());
    }

    #[test]
    fn projection_of_mean_and_scaled_column() {
        let model = fit_pca(&random_shapes(4, 20, 6, 3), 1.0).unwrap();
        let zero = project_coeffs(&model, model.mean_shape()).unwrap();
        assert!(zero.alpha.iter().all(|a| a.abs() < 1e-14));
        let shifted: Vec<f64> = model
            .mean_shape()
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, m)| m + 2.0 * model.basis()[(i, 0)])
            .collect();
        let alpha = project_coeffs(&model, &Shape3D::new(shifted).unwrap()).unwrap();
        assert_abs_diff_eq!(alpha.alpha[0], 2.0, epsilon = 1e-12);
        assert!(alpha.alpha[1..].iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn residual_outside_span_is_orthogonal_to_basis() {
        let model = fit_pca(&random_shapes(5, 20, 8, 3), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
            let shape = Shape3D::new(s).unwrap();
            let alpha = project_coeffs(&model, &shape).unwrap();
            let recon = synthesize_shape(&model, &alpha).unwrap();
            let resid = DVector::from_column_slice(shape.as_slice())
                - DVector::from_column_slice(recon.as_slice());
            for c in 0..model.n_components() {
                assert!(model.basis().column(c).dot(&resid).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn clamping_bounds() {
        let mean = Shape3D::new(vec![0.0; 6]).unwrap();
        let mut basis = DMatrix::zeros(6, 3);
        basis[(0, 0)] = 1.0;
        basis[(1, 1)] = 1.0;
        basis[(2, 2)] = 1.0;
        let model = DeformableModel::from_parts(mean, basis, vec![4.0, 1.0, 0.0]).unwrap();
        let inside = DeformCoeffs::new(vec![-5.9, 2.9, 0.0]);
        assert_eq!(clamp_coeffs(&model, &inside).unwrap(), inside);
        let out = clamp_coeffs(&model, &DeformCoeffs::new(vec![7.0, 5.0, 0.3])).unwrap();
        assert_eq!(out.alpha, vec![6.0, 3.0, 0.0]);
    }

    #[test]
    fn from_parts_rejects_non_orthonormal_basis() {
        let mean = Shape3D::new(vec![0.0; 3]).unwrap();
        let basis = DMatrix::from_element(3, 1, 1.0);
        assert!(DeformableModel::from_parts(mean, basis, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn synthesize_then_project_is_identity(seed in any::<u64>()) {
            let model = fit_pca(&random_shapes(6, 30, 7, 4), 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alpha = DeformCoeffs::new(
                (0..model.n_components()).map(|_| rng.random_range(-3.0..3.0)).collect(),
            );
            let back = project_coeffs(&model, &synthesize_shape(&model, &alpha).unwrap()).unwrap();
            for (a, b) in alpha.alpha.iter().zip(&back.alpha) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
