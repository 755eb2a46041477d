use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{clamp_variance, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::kernels::Kernel;

/// Random Fourier feature map `φ_j(x) = sqrt(2C/m) cos(ω_j·x + b_j)` with
/// `ω_j` from the kernel's spectral density and `b_j ~ U[0, 2π)`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    kernel: Kernel,
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
    scale: f64,
}

impl FeatureMap {
    pub fn sample<R: Rng + ?Sized>(kernel: &Kernel, num_features: usize, rng: &mut R) -> Result<Self> {
        let freqs = kernel.spectral_sample(num_features, rng)?;
        let d = kernel.input_dim();
        let frequencies = DMatrix::from_fn(num_features, d, |j, i| freqs[j][i]);
        let phases = DVector::from_iterator(
            num_features,
            (0..num_features).map(|_| rng.random_range(0.0..2.0 * PI)),
        );
        Ok(Self {
            kernel: kernel.clone(),
            frequencies,
            phases,
            scale: (2.0 * kernel.variance() / num_features as f64).sqrt(),
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn num_features(&self) -> usize {
        self.phases.len()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let x = DVector::from_column_slice(x);
        let mut z = &self.frequencies * x + &self.phases;
        z.apply(|v| *v = self.scale * v.cos());
        Ok(z)
    }

    /// `φ(x)·φ(y)`, the kernel this feature map actually represents.
    pub fn approx_kernel(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.features(x)?.dot(&self.features(y)?))
    }
}

/// Bayesian linear regression in random-feature space.
///
/// Weights have prior `N(0, I)` for each output dimension; observations are
/// `y = φ(x)·w + ε` with `ε ~ N(0, σ²)`. The posterior precision
/// `A = I + ΦᵀΦ/σ²` is shared across outputs and kept as a Cholesky factor
/// that is updated one observation at a time.
#[derive(Clone, Debug)]
pub struct RffModel {
    features: Arc<FeatureMap>,
    noise_variance: f64,
    output_dim: usize,
    precision: Cholesky<f64, Dyn>,
    rhs: DMatrix<f64>,
    mean: DMatrix<f64>,
    count: usize,
}

impl RffModel {
    pub fn prior(features: Arc<FeatureMap>, output_dim: usize, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(
                "noise_variance",
                format!("must be positive, got {noise_variance}"),
            ));
        }
        let m = features.num_features();
        let precision = Cholesky::new(DMatrix::identity(m, m))
            .ok_or_else(|| Error::Numerical("identity factorization".into()))?;
        Ok(Self {
            features,
            noise_variance,
            output_dim,
            precision,
            rhs: DMatrix::zeros(m, output_dim),
            mean: DMatrix::zeros(m, output_dim),
            count: 0,
        })
    }

    /// Conditions a fresh model on every row of `data`.
    pub fn fit(features: Arc<FeatureMap>, data: &Dataset) -> Result<Self> {
        check_dim(features.input_dim(), data.input_dim())?;
        let mut model = Self::prior(features, data.output_dim(), data.noise_variance())?;
        model.append_mut(data.inputs(), data.targets())?;
        Ok(model)
    }

    pub fn features(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Number of observations conditioned on so far.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn weight_mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn append(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let mut next = self.clone();
        next.append_mut(inputs, targets)?;
        Ok(next)
    }

    pub fn append_mut(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
        check_dim(inputs.len(), targets.len())?;
        if inputs.is_empty() {
            return Ok(());
        }
        let phis = inputs
            .iter()
            .zip(targets)
            .map(|(x, y)| {
                check_dim(self.output_dim, y.len())?;
                self.features.features(x)
            })
            .collect::<Result<Vec<_>>>()?;
        let inv_noise = 1.0 / self.noise_variance;
        for (phi, y) in phis.iter().zip(targets) {
            self.precision.rank_one_update(phi, inv_noise);
            for (i, yi) in y.iter().enumerate() {
                self.rhs.column_mut(i).axpy(yi * inv_noise, phi, 1.0);
            }
        }
        self.mean = self.precision.solve(&self.rhs);
        self.count += inputs.len();
        Ok(())
    }

    pub fn predictive_mean(&self, x: &[f64]) -> Result<DVector<f64>> {
        let phi = self.features.features(x)?;
        Ok(self.mean.tr_mul(&phi))
    }

    /// Variance of the latent function value, `φ(x)ᵀ A⁻¹ φ(x)`.
    pub fn predictive_variance(&self, x: &[f64]) -> Result<f64> {
        let mut phi = self.features.features(x)?;
        self.precision.l_dirty().solve_lower_triangular_mut(&mut phi);
        clamp_variance(phi.norm_squared())
    }

    /// Draws one weight vector per output dimension from the posterior.
    pub fn sample_function<R: Rng + ?Sized>(&self, rng: &mut R) -> FunctionSample {
        let m = self.features.num_features();
        let mut z = DMatrix::from_fn(m, self.output_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        // A = L Lᵀ, so L⁻ᵀ z has covariance A⁻¹.
        self.precision.l_dirty().tr_solve_lower_triangular_mut(&mut z);
        FunctionSample {
            features: Arc::clone(&self.features),
            weights: &self.mean + z,
        }
    }
}

/// Samples fresh features for `kernel` and fits them to `data`.
pub fn fit_rff<R: Rng + ?Sized>(data: &Dataset, kernel: &Kernel, num_features: usize, rng: &mut R) -> Result<RffModel> {
    let features = Arc::new(FeatureMap::sample(kernel, num_features, rng)?);
    RffModel::fit(features, data)
}

/// One explicit function `f(x) = Wᵀ φ(x)`, fixed once drawn.
#[derive(Clone, Debug)]
pub struct FunctionSample {
    features: Arc<FeatureMap>,
    weights: DMatrix<f64>,
}

impl FunctionSample {
    pub fn from_weights(features: Arc<FeatureMap>, weights: DMatrix<f64>) -> Result<Self> {
        check_dim(features.num_features(), weights.nrows())?;
        Ok(Self { features, weights })
    }

    pub fn features(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn input_dim(&self) -> usize {
        self.features.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let phi = self.features.features(x)?;
        Ok(self.weights.tr_mul(&phi).iter().copied().collect())
    }
}

/// Precomputed features over a product of state points and action points,
/// for evaluating many function samples on the same grid.
///
/// With inputs `x = (s, a)` the argument of each cosine splits as
/// `ω_s·s + (ω_a·a + b)`, so the full `S × A` table for a weight vector is two
/// matrix products of the per-state and per-action cosine/sine tables.
#[derive(Clone, Debug)]
pub struct ProductFeatureCache {
    features: Arc<FeatureMap>,
    cos_s: DMatrix<f64>,
    sin_s: DMatrix<f64>,
    cos_a: DMatrix<f64>,
    sin_a: DMatrix<f64>,
}

impl ProductFeatureCache {
    pub fn new(features: Arc<FeatureMap>, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Self> {
        let (Some(s0), Some(a0)) = (states.first(), actions.first()) else {
            return Err(Error::Empty("state or action list"));
        };
        let ds = s0.len();
        check_dim(features.input_dim(), ds + a0.len())?;
        let m = features.num_features();
        let w = &features.frequencies;
        let state_arg = |i: usize, j: usize| -> f64 {
            (0..ds).map(|k| w[(j, k)] * states[i][k]).sum()
        };
        let action_arg = |i: usize, j: usize| -> f64 {
            (ds..w.ncols()).map(|k| w[(j, k)] * actions[i][k - ds]).sum::<f64>() + features.phases[j]
        };
        for s in states {
            check_dim(ds, s.len())?;
        }
        for a in actions {
            check_dim(a0.len(), a.len())?;
        }
        let arg_s = DMatrix::from_fn(states.len(), m, state_arg);
        let arg_a = DMatrix::from_fn(actions.len(), m, action_arg);
        Ok(Self {
            cos_s: arg_s.map(f64::cos),
            sin_s: arg_s.map(f64::sin),
            cos_a: arg_a.map(f64::cos),
            sin_a: arg_a.map(f64::sin),
            features,
        })
    }

    pub fn num_states(&self) -> usize {
        self.cos_s.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.cos_a.nrows()
    }

    /// One `S × A` table of `f_i(s, a)` per output dimension `i`.
    pub fn tabulate(&self, sample: &FunctionSample) -> Result<Vec<DMatrix<f64>>> {
        if !Arc::ptr_eq(&self.features, &sample.features) {
            return Err(Error::invalid("sample", "drawn from a different feature map"));
        }
        let scale = self.features.scale;
        let mut out = Vec::with_capacity(sample.output_dim());
        for col in sample.weights.column_iter() {
            let mut ca = self.cos_a.clone();
            let mut sa = self.sin_a.clone();
            for (j, wj) in col.iter().enumerate() {
                ca.column_mut(j).scale_mut(*wj);
                sa.column_mut(j).scale_mut(*wj);
            }
            let mut table = &self.cos_s * ca.transpose();
            table.gemm(-1.0, &self.sin_s, &sa.transpose(), 1.0);
            table.scale_mut(scale);
            out.push(table);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpPosterior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn points(rng: &mut ChaCha8Rng, n: usize, d: usize, half: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-half..half)).collect())
            .collect()
    }

    #[test]
    fn prior_model_predicts_zero_with_kernel_variance_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Kernel::squared_exponential(1.0, 0.5, 2).unwrap();
        let data = Dataset::new(2, 2, 0.01).unwrap();
        let model = fit_rff(&data, &k, 200, &mut rng).unwrap();
        assert!(model.is_empty());
        assert_eq!(model.predictive_mean(&[0.3, 0.4]).unwrap(), DVector::zeros(2));
        assert_eq!(*model.weight_mean(), DMatrix::zeros(200, 2));
    }

    #[test]
    fn append_matches_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = Kernel::squared_exponential(1.0, 0.5, 3).unwrap();
        let fm = Arc::new(FeatureMap::sample(&k, 300, &mut rng).unwrap());
        let xs = points(&mut rng, 40, 3, 2.0);
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0].sin(), x[1] * x[2]]).collect();
        let mut model = RffModel::prior(Arc::clone(&fm), 2, 0.05).unwrap();
        for c in 0..4 {
            model = model.append(&xs[c * 10..(c + 1) * 10], &ys[c * 10..(c + 1) * 10]).unwrap();
        }
        let refit = RffModel::fit(fm, &Dataset::from_rows(3, 2, 0.05, xs, ys).unwrap()).unwrap();
        assert_eq!(model.len(), 40);
        for q in points(&mut rng, 20, 3, 2.0) {
            let gap = (model.predictive_mean(&q).unwrap() - refit.predictive_mean(&q).unwrap()).amax();
            assert!(gap <= 1e-9, "{gap}");
            let vgap = (model.predictive_variance(&q).unwrap() - refit.predictive_variance(&q).unwrap()).abs();
            assert!(vgap <= 1e-9, "{vgap}");
        }
        let unchanged = model.append(&[], &[]).unwrap();
        assert_eq!(unchanged.weight_mean(), model.weight_mean());
    }

    #[test]
    fn samples_are_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Kernel::squared_exponential(1.0, 0.5, 2).unwrap();
        let model = RffModel::prior(Arc::new(FeatureMap::sample(&k, 50, &mut rng).unwrap()), 2, 0.1).unwrap();
        let a = model.sample_function(&mut ChaCha8Rng::seed_from_u64(11));
        let b = model.sample_function(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.eval(&[0.1, 0.2]).unwrap(), b.eval(&[0.1, 0.2]).unwrap());
    }

    #[test]
    fn prior_samples_have_kernel_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 1.0;
        let k = Kernel::squared_exponential(c, 0.5, 2).unwrap();
        let model = RffModel::prior(Arc::new(FeatureMap::sample(&k, 1000, &mut rng).unwrap()), 1, 0.1).unwrap();
        let x = [0.3, -0.7];
        let n = 10_000;
        let vals: Vec<f64> = (0..n).map(|_| model.sample_function(&mut rng).eval(&x).unwrap()[0]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 * (c / n as f64).sqrt(), "mean {mean}");
        // Var f(x) = ‖φ(x)‖², which fluctuates around C with the feature draw.
        let phi2 = model.features().features(&x).unwrap().norm_squared();
        assert!((var - phi2).abs() <= 0.05 * phi2, "var {var} vs {phi2}");
        assert!((var - c).abs() <= 0.05 * c, "var {var}");
    }

    #[test]
    fn repeated_observation_concentrates_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Kernel::squared_exponential(1.0, 0.5, 2).unwrap();
        let sigma = 0.1;
        let x = vec![0.2, 0.1];
        let xs = vec![x.clone(); 200];
        let ys: Vec<Vec<f64>> = (0..200).map(|_| vec![0.7 + sigma * rng.sample::<f64, _>(StandardNormal)]).collect();
        let model = fit_rff(&Dataset::from_rows(2, 1, sigma * sigma, xs, ys).unwrap(), &k, 500, &mut rng).unwrap();
        let vals: Vec<f64> = (0..2000).map(|_| model.sample_function(&mut rng).eval(&x).unwrap()[0]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(sd <= 2f64.sqrt() * sigma, "{sd}");
    }

    #[test]
    fn product_cache_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = Kernel::matern(crate::kernels::Smoothness::ThreeHalves, 1.0, 0.5, 4).unwrap();
        let fm = Arc::new(FeatureMap::sample(&k, 120, &mut rng).unwrap());
        let model = RffModel::prior(Arc::clone(&fm), 2, 0.1).unwrap();
        let f = model.sample_function(&mut rng);
        let states = points(&mut rng, 7, 2, 2.0);
        let actions = points(&mut rng, 5, 2, 1.0);
        let cache = ProductFeatureCache::new(fm, &states, &actions).unwrap();
        let tables = cache.tabulate(&f).unwrap();
        for (i, s) in states.iter().enumerate() {
            for (j, a) in actions.iter().enumerate() {
                let x: Vec<f64> = s.iter().chain(a).copied().collect();
                let v = f.eval(&x).unwrap();
                for d in 0..2 {
                    assert!((tables[d][(i, j)] - v[d]).abs() < 1e-10);
                }
            }
        }
        let other = RffModel::prior(Arc::new(FeatureMap::sample(&k, 120, &mut rng).unwrap()), 2, 0.1)
            .unwrap()
            .sample_function(&mut rng);
        assert!(cache.tabulate(&other).is_err());
    }

    #[test]
    fn tracks_exact_posterior_on_small_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = Kernel::squared_exponential(1.0, 0.5, 2).unwrap();
        let xs = points(&mut rng, 50, 2, 2.0);
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![(2.0 * x[0]).sin() * x[1].cos()]).collect();
        let data = Dataset::from_rows(2, 1, 0.01, xs, ys).unwrap();
        let exact = GpPosterior::new(k.clone(), data.clone()).unwrap();
        let rff = fit_rff(&data, &k, 1000, &mut rng).unwrap();
        for q in points(&mut rng, 100, 2, 2.0) {
            assert!((exact.mean(&q).unwrap()[0] - rff.predictive_mean(&q).unwrap()[0]).abs() <= 0.1);
            assert!((exact.variance(&q).unwrap() - rff.predictive_variance(&q).unwrap()).abs() <= 0.1);
        }
    }
}
