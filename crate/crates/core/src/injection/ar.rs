//! Autoregressive models of the fast-timescale injection process and the
//! conversion of slow-timescale (aggregated) mixture parameters to fast ones.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GaussianMixture, LearnError};

/// `X_n = Σ α_k X_{n-k} + ε_n`, `ε_n ~ N(μ_ε, σ_ε²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ARModel {
    pub coefficients: Vec<f64>,
    pub innovation_variance: f64,
    #[serde(default)]
    pub innovation_mean: f64,
}

impl ARModel {
    pub fn new(coefficients: Vec<f64>, innovation_variance: f64) -> Result<Self, LearnError> {
        let m = Self { coefficients, innovation_variance, innovation_mean: 0.0 };
        m.validate()?;
        Ok(m)
    }

    /// IID process (order 0).
    pub fn white(innovation_variance: f64) -> Self {
        Self { coefficients: Vec::new(), innovation_variance, innovation_mean: 0.0 }
    }

    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.innovation_variance > 0.0) {
            return Err(LearnError::InvalidInput("innovation variance must be positive".into()));
        }
        let rho = self.spectral_radius();
        if !(rho < 1.0) {
            return Err(LearnError::NonStationary { spectral_radius: rho });
        }
        Ok(())
    }

    /// Spectral radius of the companion matrix.
    pub fn spectral_radius(&self) -> f64 {
        let p = self.order();
        if p == 0 {
            return 0.0;
        }
        if self.coefficients.iter().any(|a| !a.is_finite()) {
            return f64::INFINITY;
        }
        let mut companion = DMatrix::zeros(p, p);
        for (k, &a) in self.coefficients.iter().enumerate() {
            companion[(0, k)] = a;
        }
        for i in 1..p {
            companion[(i, i - 1)] = 1.0;
        }
        companion
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Process mean `μ_ε / (1 - Σα)`.
    pub fn process_mean(&self) -> f64 {
        self.innovation_mean / (1.0 - self.coefficients.iter().sum::<f64>())
    }

    /// Simulate `len` steps after `burn_in` discarded steps, starting at the process mean.
    pub fn simulate<R: Rng + ?Sized>(&self, len: usize, burn_in: usize, rng: &mut R) -> Vec<f64> {
        let p = self.order();
        let sd = self.innovation_variance.sqrt();
        let mean = self.process_mean();
        let mut hist = vec![mean; p];
        let mut out = Vec::with_capacity(len);
        for step in 0..(burn_in + len) {
            let z: f64 = StandardNormal.sample(rng);
            let mut x = self.innovation_mean + sd * z;
            for k in 0..p {
                x += self.coefficients[k] * hist[p - 1 - k];
            }
            if p > 0 {
                hist.remove(0);
                hist.push(x);
            }
            if step >= burn_in {
                out.push(x);
            }
        }
        out
    }
}

/// Least-squares AR fit with an intercept (the innovation mean).
pub fn fit_ar_ls(trace: &[f64], order: usize) -> Result<ARModel, LearnError> {
    if trace.len() < 2 || trace.len() <= 10 * order {
        return Err(LearnError::TooFewSamples { samples: trace.len(), required: (10 * order + 1).max(2) });
    }
    if trace.iter().any(|x| !x.is_finite()) {
        return Err(LearnError::InvalidInput("trace must be finite".into()));
    }
    if order == 0 {
        let n = trace.len() as f64;
        let mean = trace.iter().sum::<f64>() / n;
        let var = trace.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(LearnError::IllConditioned("constant trace".into()));
        }
        return Ok(ARModel { coefficients: Vec::new(), innovation_variance: var, innovation_mean: mean });
    }

    let rows = trace.len() - order;
    let cols = order + 1;
    let mut gram = DMatrix::<f64>::zeros(cols, cols);
    let mut rhs = DVector::<f64>::zeros(cols);
    let mut reg = vec![0.0; cols];
    for n in order..trace.len() {
        reg[0] = 1.0;
        for k in 1..=order {
            reg[k] = trace[n - k];
        }
        for i in 0..cols {
            rhs[i] += reg[i] * trace[n];
            for j in 0..cols {
                gram[(i, j)] += reg[i] * reg[j];
            }
        }
    }
    let sv = gram.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-12 * smax) {
        return Err(LearnError::IllConditioned(format!(
            "normal equations have condition number {:.3e}",
            smax / smin
        )));
    }
    let beta = gram
        .cholesky()
        .ok_or_else(|| LearnError::IllConditioned("normal equations not positive definite".into()))?
        .solve(&rhs);

    let mut sse = 0.0;
    for n in order..trace.len() {
        let mut pred = beta[0];
        for k in 1..=order {
            pred += beta[k] * trace[n - k];
        }
        sse += (trace[n] - pred).powi(2);
    }
    let model = ARModel {
        coefficients: beta.iter().skip(1).cloned().collect(),
        innovation_variance: sse / rows as f64,
        innovation_mean: beta[0],
    };
    model.validate()?;
    Ok(model)
}

/// `A_α` with `c = A_α c + σ_ε² e₁`, `c = [C(0), …, C(T-1)]`.
///
/// Row `m` holds the Yule-Walker recursion `C(m) = Σ_k α_k C(m-k)` with
/// `C(-j) = C(j)`: entry `(m, |m-k|)` accumulates `α_k`.
pub fn build_autocovariance_system(ar: &ARModel, t: usize) -> Result<DMatrix<f64>, LearnError> {
    if t == 0 {
        return Err(LearnError::InvalidInput("aggregation factor must be at least 1".into()));
    }
    if ar.order() >= t && ar.order() > 0 {
        return Err(LearnError::InvalidInput(format!(
            "AR order {} must be below the aggregation factor {t}",
            ar.order()
        )));
    }
    let mut a = DMatrix::zeros(t, t);
    for m in 0..t {
        for (k, &alpha) in ar.coefficients.iter().enumerate() {
            let lag = (m as isize - (k as isize + 1)).unsigned_abs();
            a[(m, lag)] += alpha;
        }
    }
    Ok(a)
}

/// `γ = [T, 2(T-1), …, 2]`.
fn gamma(t: usize) -> DVector<f64> {
    DVector::from_fn(t, |i, _| if i == 0 { t as f64 } else { 2.0 * (t - i) as f64 })
}

/// Fast-timescale variance from the variance `v2` of the T-interval sum:
/// `σ² = e₁ᵀ(I-A)⁻¹e₁ / γᵀ(I-A)⁻¹e₁ · V²`.
pub fn downscale_variance(ar: &ARModel, t: usize, v2: f64) -> Result<f64, LearnError> {
    if !(v2 > 0.0) {
        return Err(LearnError::InvalidInput(format!("slow variance {v2} must be positive")));
    }
    let a = build_autocovariance_system(ar, t)?;
    let lhs = DMatrix::identity(t, t) - a;
    let mut e1 = DVector::zeros(t);
    e1[0] = 1.0;
    let c = lhs.lu().solve(&e1).ok_or(LearnError::Singular { component: None })?;
    let denom = gamma(t).dot(&c);
    let sigma2 = c[0] / denom * v2;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(LearnError::NonPositiveVariance { component: None, value: sigma2 });
    }
    Ok(sigma2)
}

/// Convert a slow (meter) mixture to the fast-interval mixture. `ars` holds one
/// model per component or a single shared model.
pub fn downscale_mixture(
    slow: &GaussianMixture,
    ars: &[ARModel],
    t: usize,
) -> Result<GaussianMixture, LearnError> {
    let k = slow.component_count();
    if ars.len() != k && ars.len() != 1 {
        return Err(LearnError::InvalidInput(format!(
            "{} AR models for {k} mixture components",
            ars.len()
        )));
    }
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for i in 0..k {
        let ar = if ars.len() == 1 { &ars[0] } else { &ars[i] };
        means.push(slow.means[i] / t as f64);
        let v = downscale_variance(ar, t, slow.variances[i]).map_err(|e| e.for_component(i))?;
        variances.push(v);
    }
    Ok(GaussianMixture { weights: slow.weights.clone(), means, variances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ar1_system_written_out() {
        let ar = ARModel::new(vec![0.5], 1.0).unwrap();
        let a = build_autocovariance_system(&ar, 2).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]));
    }

    #[test]
    fn order_zero_system_is_zero() {
        let a = build_autocovariance_system(&ARModel::white(1.0), 5).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn order_must_be_below_t() {
        let ar = ARModel::new(vec![0.2, 0.1], 1.0).unwrap();
        assert!(build_autocovariance_system(&ar, 2).is_err());
    }

    #[test]
    fn iid_variance_divides_by_t() {
        assert_eq!(downscale_variance(&ARModel::white(1.0), 4, 8.0).unwrap(), 2.0);
    }

    #[test]
    fn ar1_worked_values() {
        // V² = 2C(0)(1+α) for T = 2
        let ar = ARModel::new(vec![0.5], 1.0).unwrap();
        assert!((downscale_variance(&ar, 2, 3.0).unwrap() - 1.0).abs() < 1e-12);
        // V²/σ² = 3 + 2(2·0.9 + 0.81) = 8.22
        let ar = ARModel::new(vec![0.9], 1.0).unwrap();
        assert!((downscale_variance(&ar, 3, 8.22).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_slow_variance_rejected() {
        assert!(downscale_variance(&ARModel::white(1.0), 3, 0.0).is_err());
    }

    #[test]
    fn mixture_conversion_keeps_weights() {
        let slow = GaussianMixture::new(vec![0.25, 0.75], vec![8.0, 40.0], vec![8.0, 16.0]).unwrap();
        let fast = downscale_mixture(&slow, &[ARModel::white(1.0)], 4).unwrap();
        assert_eq!(fast.weights, slow.weights);
        assert_eq!(fast.means, vec![2.0, 10.0]);
        assert_eq!(fast.variances, vec![2.0, 4.0]);
        assert!(downscale_mixture(&slow, &vec![ARModel::white(1.0); 3], 4).is_err());
    }

    #[test]
    fn nonstationary_rejected() {
        assert!(matches!(ARModel::new(vec![1.1], 1.0), Err(LearnError::NonStationary { .. })));
        assert!(matches!(ARModel::new(vec![0.5, 0.6], 1.0), Err(LearnError::NonStationary { .. })));
        let walk: Vec<f64> = (0..500).map(|i| i as f64).collect();
        assert!(fit_ar_ls(&walk, 1).is_err());
    }

    #[test]
    fn order_zero_fit_is_the_variance() {
        let xs = [1.0, 3.0, 2.0, 6.0];
        let m = fit_ar_ls(&xs, 0).unwrap();
        assert!(m.coefficients.is_empty());
        assert_eq!(m.innovation_mean, 3.0);
        assert_eq!(m.innovation_variance, 3.5);
    }

    #[test]
    fn short_trace_rejected() {
        assert!(matches!(fit_ar_ls(&[1.0; 20], 2), Err(LearnError::TooFewSamples { .. })));
    }

    #[test]
    fn white_noise_fit_has_small_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = ARModel::white(1.0).simulate(10_000, 0, &mut rng);
        let m = fit_ar_ls(&xs, 1).unwrap();
        assert!(m.coefficients[0].abs() < 0.05, "{:?}", m.coefficients);
    }

    #[test]
    fn ar1_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = ARModel::new(vec![0.8], 1.0).unwrap().simulate(100_000, 500, &mut rng);
        let m = fit_ar_ls(&xs, 1).unwrap();
        assert!((0.78..=0.82).contains(&m.coefficients[0]), "{:?}", m.coefficients);
        assert!((m.innovation_variance - 1.0).abs() < 0.02);
    }
}
