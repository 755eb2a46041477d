//! Stationary covariance kernels.
//!
//! Every kernel here is isotropic: `c(x, y) = variance * k(‖x - y‖ / lengthscale)`.
//! The families are the squared exponential and the Matérn kernels with
//! half-integer smoothness 1/2, 3/2 and 5/2, all of which have closed forms.
//!
//! Besides pointwise evaluation the module exposes what the rest of the crate
//! needs from a kernel: Gram matrices, the natural distance
//! `d_c(x, y) = sqrt(c(x,x) - 2c(x,y) + c(y,y))`, Hölder constants, and
//! frequency draws from the normalized spectral density for random features.

use std::f64::consts::{E, SQRT_2};
use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Matérn smoothness parameter. Only half-integer values are supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Smoothness {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/2")]
    ThreeHalves,
    #[serde(rename = "5/2")]
    FiveHalves,
}

impl Smoothness {
    pub fn nu(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    pub fn all() -> [Smoothness; 3] {
        [
            Smoothness::Half,
            Smoothness::ThreeHalves,
            Smoothness::FiveHalves,
        ]
    }
}

impl fmt::Display for Smoothness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Smoothness::Half => "1/2",
            Smoothness::ThreeHalves => "3/2",
            Smoothness::FiveHalves => "5/2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    SquaredExponential,
    Matern(Smoothness),
}

impl KernelFamily {
    /// Short stable label used in CSV output (`se`, `matern12`, ...).
    pub fn label(self) -> &'static str {
        match self {
            KernelFamily::SquaredExponential => "se",
            KernelFamily::Matern(Smoothness::Half) => "matern12",
            KernelFamily::Matern(Smoothness::ThreeHalves) => "matern32",
            KernelFamily::Matern(Smoothness::FiveHalves) => "matern52",
        }
    }
}

/// A stationary kernel with fixed hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    family: KernelFamily,
    variance: f64,
    lengthscale: f64,
    input_dim: usize,
}

impl Kernel {
    pub fn new(
        family: KernelFamily,
        variance: f64,
        lengthscale: f64,
        input_dim: usize,
    ) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid("variance", format!("must be positive, got {variance}")));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::invalid(
                "lengthscale",
                format!("must be positive, got {lengthscale}"),
            ));
        }
        if input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be at least 1"));
        }
        Ok(Self {
            family,
            variance,
            lengthscale,
            input_dim,
        })
    }

    pub fn squared_exponential(variance: f64, lengthscale: f64, input_dim: usize) -> Result<Self> {
        Self::new(KernelFamily::SquaredExponential, variance, lengthscale, input_dim)
    }

    pub fn matern(
        nu: Smoothness,
        variance: f64,
        lengthscale: f64,
        input_dim: usize,
    ) -> Result<Self> {
        Self::new(KernelFamily::Matern(nu), variance, lengthscale, input_dim)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    /// The uniform bound `C` on `c(x, x)`.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn label(&self) -> &'static str {
        self.family.label()
    }

    /// Same kernel on a different input dimension.
    pub fn with_input_dim(&self, input_dim: usize) -> Result<Self> {
        Self::new(self.family, self.variance, self.lengthscale, input_dim)
    }

    /// Kernel value as a function of the Euclidean distance `r`.
    pub fn at_distance(&self, r: f64) -> f64 {
        let t = r / self.lengthscale;
        let shape = match self.family {
            KernelFamily::SquaredExponential => (-0.5 * t * t).exp(),
            KernelFamily::Matern(Smoothness::Half) => (-t).exp(),
            KernelFamily::Matern(Smoothness::ThreeHalves) => {
                let s = 3f64.sqrt() * t;
                (1.0 + s) * (-s).exp()
            }
            KernelFamily::Matern(Smoothness::FiveHalves) => {
                let s = 5f64.sqrt() * t;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        };
        self.variance * shape
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.input_dim, x.len())?;
        check_dim(self.input_dim, y.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.at_distance(r2.sqrt())
    }

    /// Gram matrix over `points`; the diagonal is exactly `variance`.
    pub fn gram(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        if points.is_empty() {
            return Err(Error::Empty("point list"));
        }
        for p in points {
            check_dim(self.input_dim, p.len())?;
        }
        let n = points.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.variance;
            for j in 0..i {
                let v = self.eval_unchecked(&points[i], &points[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Cross-covariance matrix `K[i, j] = c(a_i, b_j)`.
    pub fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        for p in a.iter().chain(b) {
            check_dim(self.input_dim, p.len())?;
        }
        Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.eval_unchecked(&a[i], &b[j])
        }))
    }

    /// The natural distance `d_c(x, y)`.
    ///
    /// Tiny negative radicands from cancellation are clamped to zero; anything
    /// below `-1e-12` is reported as a numerical error.
    pub fn natural_distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let radicand = self.eval(x, x)? - 2.0 * self.eval(x, y)? + self.eval(y, y)?;
        if radicand < -1e-12 {
            return Err(Error::Numerical(format!(
                "negative natural-distance radicand {radicand}"
            )));
        }
        Ok(radicand.max(0.0).sqrt())
    }

    /// Hölder exponent `α` with `|c(x,y) - c(x,z)| <= L ‖y - z‖^α`.
    ///
    /// Matérn 1/2 uses the conservative `α = 1/2`.
    pub fn holder_exponent(&self) -> f64 {
        match self.family {
            KernelFamily::Matern(Smoothness::Half) => 0.5,
            _ => 1.0,
        }
    }

    /// Hölder constant `L` matching [`Kernel::holder_exponent`].
    ///
    /// For `α = 1` this is the largest slope of the radial profile. For
    /// Matérn 1/2, `min(C, C δ/ℓ) <= C sqrt(δ/ℓ)` gives `L = C / sqrt(ℓ)`.
    pub fn holder_constant(&self) -> f64 {
        let c = self.variance;
        let l = self.lengthscale;
        match self.family {
            // max_t t exp(-t^2/2) at t = 1
            KernelFamily::SquaredExponential => c * E.powf(-0.5) / l,
            KernelFamily::Matern(Smoothness::Half) => c / l.sqrt(),
            // d/dt (1 + √3 t) e^{-√3 t} = -3 t e^{-√3 t}, maximal at t = 1/√3
            KernelFamily::Matern(Smoothness::ThreeHalves) => c * 3f64.sqrt() / E / l,
            // d/dt = -(5/3) t (1 + √5 t) e^{-√5 t}, maximal at t = (5 + √5)/10
            KernelFamily::Matern(Smoothness::FiveHalves) => {
                let s5 = 5f64.sqrt();
                let t = (5.0 + s5) / 10.0;
                c * (5.0 / 3.0) * t * (1.0 + s5 * t) * (-s5 * t).exp() / l
            }
        }
    }

    /// Draws `num_features` frequency vectors from the normalized spectral
    /// density. SE gives `N(0, I/ℓ²)`; Matérn ν gives a multivariate Student-t
    /// with `2ν` degrees of freedom scaled by `1/ℓ`.
    pub fn spectral_sample<R: Rng + ?Sized>(
        &self,
        num_features: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        if num_features == 0 {
            return Err(Error::invalid("num_features", "must be at least 1"));
        }
        let chi = match self.family {
            KernelFamily::SquaredExponential => None,
            KernelFamily::Matern(nu) => Some(
                ChiSquared::new(2.0 * nu.nu())
                    .map_err(|e| Error::Numerical(format!("chi-squared: {e}")))?,
            ),
        };
        let mut out = Vec::with_capacity(num_features);
        for _ in 0..num_features {
            let mut w: Vec<f64> = (0..self.input_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect::<Vec<f64>>();
            let scale = match (&chi, self.family) {
                (Some(chi), KernelFamily::Matern(nu)) => {
                    let u: f64 = chi.sample(rng);
                    (2.0 * nu.nu() / u).sqrt() / self.lengthscale
                }
                _ => 1.0 / self.lengthscale,
            };
            w.iter_mut().for_each(|v| *v *= scale);
            out.push(w);
        }
        Ok(out)
    }

    /// Largest possible natural distance, `2 sqrt(C)`.
    pub fn natural_diameter_bound(&self) -> f64 {
        2.0 * self.variance.sqrt()
    }

    /// `d_c` between two points infinitely far apart: `sqrt(2C)`.
    pub fn natural_distance_limit(&self) -> f64 {
        SQRT_2 * self.variance.sqrt()
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            KernelFamily::SquaredExponential => write!(f, "SE")?,
            KernelFamily::Matern(nu) => write!(f, "Matern-{nu}")?,
        }
        write!(
            f,
            "(C={}, l={}, d={})",
            self.variance, self.lengthscale, self.input_dim
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn se() -> Kernel {
        Kernel::squared_exponential(1.0, 0.5, 2).unwrap()
    }

    fn all_kernels(d: usize) -> Vec<Kernel> {
        let mut ks = vec![Kernel::squared_exponential(1.3, 0.7, d).unwrap()];
        for nu in Smoothness::all() {
            ks.push(Kernel::matern(nu, 1.3, 0.7, d).unwrap());
        }
        ks
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Kernel::squared_exponential(0.0, 1.0, 2).is_err());
        assert!(Kernel::squared_exponential(1.0, -1.0, 2).is_err());
        assert!(Kernel::squared_exponential(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn closed_form_values() {
        let k = se();
        assert_eq!(k.eval(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            k.eval(&[0.0, 0.0], &[0.5, 0.0]).unwrap(),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(k.eval(&[0.0, 0.0], &[0.5, 0.0]).unwrap(), 0.60653, epsilon = 1e-5);
        let m = Kernel::matern(Smoothness::Half, 1.0, 0.5, 2).unwrap();
        assert_abs_diff_eq!(m.eval(&[0.0, 0.0], &[0.0, 0.5]).unwrap(), 0.36788, epsilon = 1e-5);
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        assert_eq!(
            se().eval(&[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn gram_edge_cases() {
        let k = se();
        let g = k.gram(&[vec![0.2, 0.3]]).unwrap();
        assert_eq!(g, DMatrix::from_element(1, 1, 1.0));
        let g = k.gram(&[vec![0.2, 0.3], vec![0.2, 0.3]]).unwrap();
        assert_eq!(g, DMatrix::from_element(2, 2, 1.0));
        assert_eq!(g.rank(1e-12), 1);
        assert!(k.gram(&[]).is_err());
    }

    #[test]
    fn natural_distance_values() {
        let k = se();
        assert_eq!(k.natural_distance(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        let d = k.natural_distance(&[0.0, 0.0], &[0.5, 0.0]).unwrap();
        assert_abs_diff_eq!(d, (2.0 - 2.0 * (-0.5f64).exp()).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 0.887096, epsilon = 1e-6);
        let far = k.natural_distance(&[0.0, 0.0], &[100.0, 0.0]).unwrap();
        assert_abs_diff_eq!(far, k.natural_distance_limit(), epsilon = 1e-12);
    }

    #[test]
    fn holder_constants_bound_finite_differences() {
        for k in all_kernels(1) {
            let alpha = k.holder_exponent();
            let l = k.holder_constant();
            let mut worst: f64 = 0.0;
            for i in 0..4000 {
                let y = i as f64 * 1e-3;
                for dz in [1e-4, 1e-3, 1e-2, 0.1, 0.5, 2.0] {
                    let z = y + dz;
                    let lhs = (k.at_distance(y) - k.at_distance(z)).abs();
                    worst = worst.max(lhs / dz.powf(alpha));
                }
            }
            assert!(worst <= l * (1.0 + 1e-9), "{k}: {worst} > {l}");
            // α = 1 constants are attained, so they should be nearly tight.
            if alpha == 1.0 {
                assert!(worst > 0.99 * l, "{k}: {worst} vs {l}");
            }
        }
    }

    #[test]
    fn spectral_shapes_and_moments() {
        let k = se();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let one = k.spectral_sample(1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 2);
        assert!(k.spectral_sample(0, &mut rng).is_err());

        let n = 100_000;
        let w = k.spectral_sample(n, &mut rng).unwrap();
        for d in 0..2 {
            let mean = w.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            let var = w.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 4.0).abs() < 0.1, "variance {var}");
        }

        let excess_kurtosis = |xs: &[f64]| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
            m4 / (m2 * m2) - 3.0
        };
        let gauss: Vec<f64> = w.iter().map(|v| v[0]).collect();
        assert!(excess_kurtosis(&gauss).abs() < 0.2);
        let m = Kernel::matern(Smoothness::Half, 1.0, 0.5, 2).unwrap();
        let heavy: Vec<f64> = m
            .spectral_sample(n, &mut rng)
            .unwrap()
            .iter()
            .map(|v| v[0])
            .collect();
        assert!(excess_kurtosis(&heavy) > 1.0);
    }

    fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, d)
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_stationary(x in point(3), y in point(3)) {
            for k in all_kernels(3) {
                let kxy = k.eval(&x, &y).unwrap();
                let kyx = k.eval(&y, &x).unwrap();
                prop_assert!((kxy - kyx).abs() <= 1e-12);
                prop_assert!(kxy.abs() <= k.variance());
                prop_assert_eq!(k.eval(&x, &x).unwrap(), k.variance());
                let d = k.natural_distance(&x, &y).unwrap();
                prop_assert!((0.0..=k.natural_diameter_bound()).contains(&d));
            }
        }

        #[test]
        fn natural_distance_triangle(x in point(2), y in point(2), z in point(2)) {
            for k in all_kernels(2) {
                let xy = k.natural_distance(&x, &y).unwrap();
                let yz = k.natural_distance(&y, &z).unwrap();
                let xz = k.natural_distance(&x, &z).unwrap();
                prop_assert!(xz <= xy + yz + 1e-10);
            }
        }

        #[test]
        fn gram_is_psd(points in prop::collection::vec(point(2), 1..50)) {
            for k in all_kernels(2) {
                let g = k.gram(&points).unwrap();
                let min = g.symmetric_eigenvalues().min();
                prop_assert!(min >= -1e-8 * k.variance(), "{} min eig {}", k, min);
            }
        }
    }
}
