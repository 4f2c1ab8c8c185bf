//! PCA and ridge regression for linear probing.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Result, SealError};
use seal_autodiff::Mat;

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Mat {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `c × d`, orthonormal rows.
    pub components: Mat,
    pub explained_variance: Vec<f64>,
}

/// Principal axes from the eigendecomposition of the sample covariance.
///
/// Components are ordered by decreasing eigenvalue; each is signed so that
/// its largest-magnitude loading is positive.
pub fn pca_fit(x: &Mat, n_components: usize) -> Result<Pca> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(SealError::Empty("pca_fit on an empty matrix".into()));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(SealError::InvalidArgument(format!(
            "n_components {n_components} must be in 1..={}",
            n.min(d)
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let xc = x - &mean;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = xc.t().dot(&xc) / denom;
    let eig = SymmetricEigen::new(to_na(&cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Array2::zeros((n_components, d));
    let mut explained = Vec::with_capacity(n_components);
    for (c, &k) in order.iter().take(n_components).enumerate() {
        let v = eig.eigenvectors.column(k);
        let lead = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("d > 0");
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[c, j]] = sign * v[j];
        }
        explained.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(Pca {
        mean,
        components,
        explained_variance: explained,
    })
}

pub fn pca_transform(x: &Mat, p: &Pca) -> Result<Mat> {
    if x.ncols() != p.mean.len() {
        return Err(SealError::DimensionMismatch(format!(
            "pca fitted on {} columns, got {}",
            p.mean.len(),
            x.ncols()
        )));
    }
    Ok((x - &p.mean).dot(&p.components.t()))
}

impl Pca {
    pub fn inverse_transform(&self, z: &Mat) -> Mat {
        z.dot(&self.components) + &self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ridge {
    /// `c × G`
    pub coef: Mat,
    pub intercept: Array1<f64>,
    pub alpha: f64,
}

/// Solves `(Z₁ᵀZ₁ + αP)W = Z₁ᵀY` where `Z₁ = [Z, 1]` and `P` penalizes every
/// column except the intercept.
pub fn ridge_fit(z: &Mat, y: &Mat, alpha: f64) -> Result<Ridge> {
    if !(alpha >= 0.0) {
        return Err(SealError::InvalidArgument(format!("ridge alpha {alpha} must be non-negative")));
    }
    let (n, c) = z.dim();
    if n != y.nrows() {
        return Err(SealError::DimensionMismatch(format!("{n} inputs for {} targets", y.nrows())));
    }
    if n == 0 {
        return Err(SealError::Empty("ridge_fit with no rows".into()));
    }
    let mut za = DMatrix::from_element(n, c + 1, 1.0);
    for i in 0..n {
        for j in 0..c {
            za[(i, j)] = z[[i, j]];
        }
    }
    let mut lhs = za.transpose() * &za;
    for j in 0..c {
        lhs[(j, j)] += alpha;
    }
    let rhs = za.transpose() * to_na(y);
    let eig = SymmetricEigen::new(lhs.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(min > max * 1e-12) {
        return Err(SealError::Numerical(format!(
            "ridge system is singular (eigenvalues {min:e}..{max:e}); use alpha > 0"
        )));
    }
    let w = lhs
        .cholesky()
        .ok_or_else(|| SealError::Numerical("ridge system not positive definite".into()))?
        .solve(&rhs);
    let w = from_na(&w);
    Ok(Ridge {
        coef: w.slice(ndarray::s![..c, ..]).to_owned(),
        intercept: w.row(c).to_owned(),
        alpha,
    })
}

pub fn ridge_predict(z: &Mat, r: &Ridge) -> Result<Mat> {
    if z.ncols() != r.coef.nrows() {
        return Err(SealError::DimensionMismatch(format!(
            "ridge fitted on {} features, got {}",
            r.coef.nrows(),
            z.ncols()
        )));
    }
    Ok(z.dot(&r.coef) + &r.intercept)
}
