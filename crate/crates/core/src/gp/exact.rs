use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{clamp_variance, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::kernels::Kernel;

/// Exact GP posterior, one independent GP per output dimension, all sharing
/// the kernel and the inputs.
///
/// Holds the lower Cholesky factor of `C_n + σ² I` and the weights
/// `(C_n + σ² I)^{-1} y_{n,i}` for every output `i`.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    kernel: Kernel,
    data: Dataset,
    chol: DMatrix<f64>,
    alpha: DMatrix<f64>,
}

pub(crate) fn cholesky_lower(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m)
        .map(|c| c.unpack())
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

impl GpPosterior {
    pub fn new(kernel: Kernel, data: Dataset) -> Result<Self> {
        check_dim(kernel.input_dim(), data.input_dim())?;
        let chol = if data.is_empty() {
            DMatrix::zeros(0, 0)
        } else {
            let mut k = kernel.gram(data.inputs())?;
            for i in 0..k.nrows() {
                k[(i, i)] += data.noise_variance();
            }
            cholesky_lower(k)?
        };
        let mut gp = Self {
            kernel,
            data,
            chol,
            alpha: DMatrix::zeros(0, 0),
        };
        gp.refresh_alpha();
        Ok(gp)
    }

    pub fn prior(kernel: Kernel, output_dim: usize, noise_variance: f64) -> Result<Self> {
        let data = Dataset::new(kernel.input_dim(), output_dim, noise_variance)?;
        Self::new(kernel, data)
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    fn refresh_alpha(&mut self) {
        let n = self.data.len();
        let k = self.data.output_dim();
        let mut y = DMatrix::zeros(n, k);
        for (r, t) in self.data.targets().iter().enumerate() {
            for (c, v) in t.iter().enumerate() {
                y[(r, c)] = *v;
            }
        }
        if n > 0 && k > 0 {
            self.chol.solve_lower_triangular_mut(&mut y);
            self.chol.tr_solve_lower_triangular_mut(&mut y);
        }
        self.alpha = y;
    }

    /// Conditions on additional observations. The factor is extended block-wise
    /// rather than recomputed; the result matches a fit on the concatenated
    /// data.
    pub fn append(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let mut next = self.clone();
        next.append_mut(inputs, targets)?;
        Ok(next)
    }

    pub fn append_mut(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
        if inputs.is_empty() && targets.is_empty() {
            return Ok(());
        }
        let old = self.data.len();
        self.data.extend(inputs, targets)?;
        let k = inputs.len();
        let noise = self.data.noise_variance();

        let mut k22 = self.kernel.gram(inputs)?;
        for i in 0..k {
            k22[(i, i)] += noise;
        }
        let mut l = DMatrix::zeros(old + k, old + k);
        if old == 0 {
            l.copy_from(&cholesky_lower(k22)?);
        } else {
            let mut b = self.kernel.cross(&self.data.inputs()[..old], inputs)?;
            self.chol.solve_lower_triangular_mut(&mut b);
            let schur = k22 - b.transpose() * &b;
            let l22 = cholesky_lower(schur)?;
            l.view_mut((0, 0), (old, old)).copy_from(&self.chol);
            l.view_mut((old, 0), (k, old)).copy_from(&b.transpose());
            l.view_mut((old, old), (k, k)).copy_from(&l22);
        }
        self.chol = l;
        self.refresh_alpha();
        Ok(())
    }

    fn cross_vector(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.kernel.input_dim(), x.len())?;
        Ok(DVector::from_iterator(
            self.data.len(),
            self.data.inputs().iter().map(|p| self.kernel.eval_unchecked(x, p)),
        ))
    }

    /// Posterior mean `μ_{n,i}(x) = c_n(x)^T (C_n + σ² I)^{-1} y_{n,i}` for
    /// every output `i`.
    pub fn mean(&self, x: &[f64]) -> Result<DVector<f64>> {
        let c = self.cross_vector(x)?;
        if self.data.is_empty() {
            return Ok(DVector::zeros(self.data.output_dim()));
        }
        Ok(self.alpha.tr_mul(&c))
    }

    /// Posterior covariance `c_n(x, y)`.
    pub fn covariance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let prior = self.kernel.eval(x, y)?;
        if self.data.is_empty() {
            return Ok(prior);
        }
        let mut cx = self.cross_vector(x)?;
        let mut cy = self.cross_vector(y)?;
        self.chol.solve_lower_triangular_mut(&mut cx);
        self.chol.solve_lower_triangular_mut(&mut cy);
        Ok(prior - cx.dot(&cy))
    }

    /// Posterior predictive variance `σ_n²(x) = c_n(x, x)`.
    pub fn variance(&self, x: &[f64]) -> Result<f64> {
        let prior = self.kernel.eval(x, x)?;
        if self.data.is_empty() {
            return Ok(prior);
        }
        let mut c = self.cross_vector(x)?;
        self.chol.solve_lower_triangular_mut(&mut c);
        clamp_variance(prior - c.norm_squared())
    }

    /// Posterior variances at several points with one batched solve.
    pub fn variances(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        let prior: Vec<f64> = points
            .iter()
            .map(|p| self.kernel.eval(p, p))
            .collect::<Result<_>>()?;
        if self.data.is_empty() || points.is_empty() {
            return Ok(prior);
        }
        let mut v = self.kernel.cross(self.data.inputs(), points)?;
        self.chol.solve_lower_triangular_mut(&mut v);
        prior
            .iter()
            .zip(v.column_iter())
            .map(|(p, col)| clamp_variance(p - col.norm_squared()))
            .collect()
    }

    /// Posterior means at several points, one row per point.
    pub fn mean_matrix(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let k = self.data.output_dim();
        if self.data.is_empty() {
            return Ok(DMatrix::zeros(points.len(), k));
        }
        let cross = self.kernel.cross(points, self.data.inputs())?;
        Ok(cross * &self.alpha)
    }

    /// Joint posterior covariance over a finite point set.
    pub fn covariance_matrix(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let prior = self.kernel.gram(points)?;
        if self.data.is_empty() {
            return Ok(prior);
        }
        let mut v = self.kernel.cross(self.data.inputs(), points)?;
        self.chol.solve_lower_triangular_mut(&mut v);
        Ok(prior - v.transpose() * v)
    }
}

/// Exact sampler for a multivariate normal given its covariance matrix.
///
/// The factor comes from a symmetric eigendecomposition with negative
/// eigenvalues clipped, so rank-deficient Gram matrices are fine.
#[derive(Clone, Debug)]
pub struct FiniteGpSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl FiniteGpSampler {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(covariance.nrows(), covariance.ncols())?;
        check_dim(covariance.nrows(), mean.len())?;
        let eig = SymmetricEigen::new(covariance);
        let scale = eig.eigenvalues.abs().max().max(1.0);
        if eig.eigenvalues.min() < -1e-8 * scale {
            return Err(Error::Numerical(format!(
                "covariance has eigenvalue {}",
                eig.eigenvalues.min()
            )));
        }
        let mut factor = eig.eigenvectors;
        for (j, lambda) in eig.eigenvalues.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(s);
        }
        Ok(Self { mean, factor })
    }

    pub fn centered(covariance: DMatrix<f64>) -> Result<Self> {
        let n = covariance.nrows();
        Self::new(DVector::zeros(n), covariance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.factor.ncols(),
            (0..self.factor.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        &self.mean + &self.factor * z
    }
}
