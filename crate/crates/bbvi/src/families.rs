//! Variational factor distributions: sampling, log-density, and score
//! function with respect to unconstrained parameters, composed into a
//! fully factorized mean-field family.
//!
//! Positive parameters are stored as logs so one optimizer serves every
//! factor kind. Scores are chain-ruled into the unconstrained coordinates.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Support of a scalar latent variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Real,
    Positive,
}

impl Support {
    pub fn contains(&self, z: f64) -> bool {
        match self {
            Support::Real => z.is_finite(),
            Support::Positive => z.is_finite() && z > 0.0,
        }
    }
}

/// A variational factor over `dim` independent scalar latents.
///
/// Every kind carries `2 * dim` unconstrained parameters laid out as
/// `[location_0 .. location_{d-1}, spread_0 .. spread_{d-1}]`:
///
/// - `GaussianMeanLogStd`: (mean, log-std), support = reals
/// - `GammaShapeRate`: (log-shape, log-rate), support = positive reals
/// - `GammaMeanVar`: (log-mean, log-variance), support = positive reals
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    GaussianMeanLogStd { dim: usize },
    GammaShapeRate { dim: usize },
    GammaMeanVar { dim: usize },
}

impl FactorKind {
    pub fn dim(&self) -> usize {
        match *self {
            FactorKind::GaussianMeanLogStd { dim }
            | FactorKind::GammaShapeRate { dim }
            | FactorKind::GammaMeanVar { dim } => dim,
        }
    }

    pub fn param_len(&self) -> usize {
        2 * self.dim()
    }

    pub fn support(&self) -> Support {
        match self {
            FactorKind::GaussianMeanLogStd { .. } => Support::Real,
            FactorKind::GammaShapeRate { .. } | FactorKind::GammaMeanVar { .. } => {
                Support::Positive
            }
        }
    }

    pub fn in_support(&self, z: &[f64]) -> bool {
        let support = self.support();
        z.iter().all(|&v| support.contains(v))
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite factor parameter".into(),
            ));
        }
        Ok(())
    }

    /// Draw one value per scalar latent.
    pub fn sample<R: Rng + ?Sized>(&self, params: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let d = self.dim();
        let mut out = Vec::with_capacity(d);
        for j in 0..d {
            let (p1, p2) = (params[j], params[d + j]);
            let v = match self {
                FactorKind::GaussianMeanLogStd { .. } => {
                    let eps: f64 = StandardNormal.sample(rng);
                    p1 + p2.exp() * eps
                }
                FactorKind::GammaShapeRate { .. } => {
                    sample_gamma(p1.exp(), p2.exp(), rng)?
                }
                FactorKind::GammaMeanVar { .. } => {
                    let (shape, rate) = gammae_to_shape_rate(p1.exp(), p2.exp())?;
                    sample_gamma(shape, rate, rng)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Log-density at `z`, summed over coordinates in ascending index order.
    ///
    /// Values outside the support yield the explicit `-inf` sentinel.
    pub fn log_pdf(&self, params: &[f64], z: &[f64]) -> Result<f64> {
        self.check_params(params)?;
        if z.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "expected {} values, got {}",
                self.dim(),
                z.len()
            )));
        }
        if !self.in_support(z) {
            return Ok(f64::NEG_INFINITY);
        }
        let d = self.dim();
        let mut total = 0.0;
        for j in 0..d {
            let (p1, p2) = (params[j], params[d + j]);
            total += match self {
                FactorKind::GaussianMeanLogStd { .. } => normal_log_pdf(p1, p2.exp(), z[j]),
                FactorKind::GammaShapeRate { .. } => gamma_log_pdf(p1.exp(), p2.exp(), z[j]),
                FactorKind::GammaMeanVar { .. } => {
                    let (shape, rate) = gammae_to_shape_rate(p1.exp(), p2.exp())?;
                    gamma_log_pdf(shape, rate, z[j])
                }
            };
        }
        Ok(total)
    }

    /// Gradient of `log_pdf` with respect to the unconstrained parameters.
    ///
    /// Unlike `log_pdf`, out-of-support values are an error: the score is
    /// undefined there.
    pub fn score(&self, params: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if z.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "expected {} values, got {}",
                self.dim(),
                z.len()
            )));
        }
        if !self.in_support(z) {
            return Err(Error::OutOfSupport(format!("{z:?} for {self:?}")));
        }
        let d = self.dim();
        let mut out = vec![0.0; 2 * d];
        for j in 0..d {
            let (p1, p2) = (params[j], params[d + j]);
            let (g1, g2) = match self {
                FactorKind::GaussianMeanLogStd { .. } => {
                    let sigma = p2.exp();
                    let u = (z[j] - p1) / sigma;
                    (u / sigma, u * u - 1.0)
                }
                FactorKind::GammaShapeRate { .. } => {
                    let (shape, rate) = (p1.exp(), p2.exp());
                    let d_shape = p2 - digamma(shape) + z[j].ln();
                    let d_rate = shape / rate - z[j];
                    (shape * d_shape, rate * d_rate)
                }
                FactorKind::GammaMeanVar { .. } => {
                    let (mean, var) = (p1.exp(), p2.exp());
                    let (shape, rate) = gammae_to_shape_rate(mean, var)?;
                    let d_shape = rate.ln() - digamma(shape) + z[j].ln();
                    let d_rate = shape / rate - z[j];
                    // shape = mean^2/var, rate = mean/var:
                    // d shape/d log mean = 2 shape, d rate/d log mean = rate,
                    // d shape/d log var = -shape, d rate/d log var = -rate.
                    (
                        d_shape * 2.0 * shape + d_rate * rate,
                        -(d_shape * shape + d_rate * rate),
                    )
                }
            };
            out[j] = g1;
            out[d + j] = g2;
        }
        Ok(out)
    }
}

fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let dist = GammaDist::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidParameter(format!("gamma({shape}, {rate}): {e}")))?;
    // The shape<1 sampler can return exactly 0 at the edge of f64; nudge back
    // into the open support.
    let v: f64 = dist.sample(rng);
    Ok(v.max(f64::MIN_POSITIVE))
}

/// Log-density of Normal(mu, sigma) at z.
pub fn normal_log_pdf(mu: f64, sigma: f64, z: f64) -> f64 {
    let u = (z - mu) / sigma;
    -0.5 * LN_2PI - sigma.ln() - 0.5 * u * u
}

/// Log-density of Gamma(shape, rate) at z; `-inf` for z outside (0, inf).
pub fn gamma_log_pdf(shape: f64, rate: f64, z: f64) -> f64 {
    if !(z > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * z.ln() - rate * z
}

/// Map the expectation/variance gamma parameterization to shape and rate:
/// shape = mean^2 / variance, rate = mean / variance.
pub fn gammae_to_shape_rate(mean: f64, variance: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0 && mean.is_finite()) || !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "GammaE requires positive mean and variance, got ({mean}, {variance})"
        )));
    }
    Ok((mean * mean / variance, mean / variance))
}

/// Fully factorized variational family: one factor per latent variable,
/// in a fixed order, over a flat unconstrained parameter vector.
#[derive(Clone, Debug)]
pub struct MeanFieldFamily {
    factors: Vec<FactorKind>,
    param_offsets: Vec<usize>,
    value_offsets: Vec<usize>,
    n_params: usize,
    n_values: usize,
}

impl MeanFieldFamily {
    pub fn new(factors: Vec<FactorKind>) -> Self {
        let mut param_offsets = Vec::with_capacity(factors.len());
        let mut value_offsets = Vec::with_capacity(factors.len());
        let (mut p, mut v) = (0, 0);
        for f in &factors {
            param_offsets.push(p);
            value_offsets.push(v);
            p += f.param_len();
            v += f.dim();
        }
        MeanFieldFamily {
            factors,
            param_offsets,
            value_offsets,
            n_params: p,
            n_values: v,
        }
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, i: usize) -> &FactorKind {
        &self.factors[i]
    }

    pub fn factors(&self) -> &[FactorKind] {
        &self.factors
    }

    /// Total length of the unconstrained parameter vector.
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Total number of scalar latents.
    pub fn n_values(&self) -> usize {
        self.n_values
    }

    pub fn param_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.param_offsets[i];
        start..start + self.factors[i].param_len()
    }

    pub fn value_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.value_offsets[i];
        start..start + self.factors[i].dim()
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.n_params {
            return Err(Error::InvalidParameter(format!(
                "expected {} family parameters, got {}",
                self.n_params,
                lambda.len()
            )));
        }
        Ok(())
    }

    /// Draw one joint latent assignment z ~ q(z | lambda).
    pub fn sample<R: Rng + ?Sized>(&self, lambda: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check_lambda(lambda)?;
        let mut z = Vec::with_capacity(self.n_values);
        for (i, f) in self.factors.iter().enumerate() {
            z.extend(f.sample(&lambda[self.param_range(i)], rng)?);
        }
        Ok(z)
    }

    /// log q(z | lambda) = sum of factor log-densities, in factor order.
    pub fn log_pdf(&self, lambda: &[f64], z: &[f64]) -> Result<f64> {
        self.check_lambda(lambda)?;
        let mut total = 0.0;
        for i in 0..self.factors.len() {
            total += self.factor_log_pdf(i, lambda, z)?;
        }
        Ok(total)
    }

    pub fn factor_log_pdf(&self, i: usize, lambda: &[f64], z: &[f64]) -> Result<f64> {
        self.factors[i].log_pdf(&lambda[self.param_range(i)], &z[self.value_range(i)])
    }

    pub fn factor_score(&self, i: usize, lambda: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.factors[i].score(&lambda[self.param_range(i)], &z[self.value_range(i)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gaussian_degenerate_width_concentrates_at_mean() {
        let f = FactorKind::GaussianMeanLogStd { dim: 1 };
        let mut r = rng(1);
        for _ in 0..1000 {
            let z = f.sample(&[0.0, -10.0], &mut r).unwrap();
            assert!(z[0].abs() < 1e-3);
        }
    }

    #[test]
    fn gammae_sample_mean_matches_mean_parameter() {
        let f = FactorKind::GammaMeanVar { dim: 1 };
        let mut r = rng(2);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += f.sample(&[0.0, 0.0], &mut r).unwrap()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn gamma_unit_shape_rate_matches_exponential_cdf() {
        // Gamma(1,1) is Exp(1); KS statistic against the closed-form CDF.
        let f = FactorKind::GammaShapeRate { dim: 1 };
        let mut r = rng(3);
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n).map(|_| f.sample(&[0.0, 0.0], &mut r).unwrap()[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let cdf = 1.0 - (-x).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn standard_normal_log_pdf_at_mode() {
        let f = FactorKind::GaussianMeanLogStd { dim: 1 };
        assert_relative_eq!(
            f.log_pdf(&[0.0, 0.0], &[0.0]).unwrap(),
            -0.9189385332046727,
            epsilon = 1e-12
        );
    }

    #[test]
    fn unit_gamma_log_pdf_is_exponential() {
        let f = FactorKind::GammaShapeRate { dim: 1 };
        assert_relative_eq!(f.log_pdf(&[0.0, 0.0], &[0.5]).unwrap(), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn gammae_log_pdf_matches_mapped_shape_rate() {
        let mv = FactorKind::GammaMeanVar { dim: 1 };
        let sr = FactorKind::GammaShapeRate { dim: 1 };
        // (mean=2, var=4) maps to (shape=1, rate=0.5).
        let mv_params = [2f64.ln(), 4f64.ln()];
        let sr_params = [0f64, 0.5f64.ln()];
        let mut r = rng(4);
        for _ in 0..20 {
            let z = sr.sample(&[0.0, 0.0], &mut r).unwrap();
            assert_relative_eq!(
                mv.log_pdf(&mv_params, &z).unwrap(),
                sr.log_pdf(&sr_params, &z).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn out_of_support_log_pdf_is_neg_infinity_and_score_errors() {
        let f = FactorKind::GammaShapeRate { dim: 1 };
        assert_eq!(f.log_pdf(&[0.0, 0.0], &[-1.0]).unwrap(), f64::NEG_INFINITY);
        assert!(f.score(&[0.0, 0.0], &[-1.0]).is_err());
    }

    #[test]
    fn non_finite_params_rejected() {
        let f = FactorKind::GaussianMeanLogStd { dim: 1 };
        let mut r = rng(5);
        assert!(f.sample(&[f64::NAN, 0.0], &mut r).is_err());
        assert!(f.log_pdf(&[0.0, f64::INFINITY], &[0.0]).is_err());
    }

    #[test]
    fn gaussian_score_zero_at_mean() {
        let f = FactorKind::GaussianMeanLogStd { dim: 1 };
        let s = f.score(&[1.5, -0.3], &[1.5]).unwrap();
        assert_relative_eq!(s[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_score_at_unit_point_is_euler_mascheroni() {
        // alpha=1, beta=1, z=1: d/d alpha = log beta - psi(alpha) + log z
        // = -psi(1) = gamma_E; the log-shape chain rule multiplies by alpha=1.
        let f = FactorKind::GammaShapeRate { dim: 1 };
        let s = f.score(&[0.0, 0.0], &[1.0]).unwrap();
        assert_relative_eq!(s[0], 0.5772156649015329, epsilon = 1e-10);
    }

    fn finite_difference_check(f: FactorKind, params: &[f64], z: &[f64]) {
        let score = f.score(params, z).unwrap();
        let eps = 1e-5;
        for k in 0..params.len() {
            let mut up = params.to_vec();
            let mut dn = params.to_vec();
            up[k] += eps;
            dn[k] -= eps;
            let fd = (f.log_pdf(&up, z).unwrap() - f.log_pdf(&dn, z).unwrap()) / (2.0 * eps);
            let scale = fd.abs().max(1.0);
            assert!(
                (score[k] - fd).abs() / scale < 1e-5,
                "{f:?} coord {k}: score {} vs fd {}",
                score[k],
                fd
            );
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let kinds = [
            FactorKind::GaussianMeanLogStd { dim: 2 },
            FactorKind::GammaShapeRate { dim: 2 },
            FactorKind::GammaMeanVar { dim: 2 },
        ];
        let mut r = rng(6);
        for f in kinds {
            for _ in 0..25 {
                let params: Vec<f64> = (0..f.param_len())
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut r);
                        0.5 * e
                    })
                    .collect();
                let z = f.sample(&params, &mut r).unwrap();
                finite_difference_check(f, &params, &z);
            }
        }
    }

    #[test]
    fn score_has_expectation_zero() {
        // Monte Carlo check of the expected-score identity per factor kind.
        let kinds = [
            FactorKind::GaussianMeanLogStd { dim: 1 },
            FactorKind::GammaShapeRate { dim: 1 },
            FactorKind::GammaMeanVar { dim: 1 },
        ];
        let mut r = rng(7);
        let n = 100_000;
        for f in kinds {
            let params = [0.3, -0.2];
            let mut sums = vec![0.0; 2];
            let mut sq = vec![0.0; 2];
            for _ in 0..n {
                let z = f.sample(&params, &mut r).unwrap();
                let s = f.score(&params, &z).unwrap();
                for k in 0..2 {
                    sums[k] += s[k];
                    sq[k] += s[k] * s[k];
                }
            }
            for k in 0..2 {
                let mean = sums[k] / n as f64;
                let var = sq[k] / n as f64 - mean * mean;
                let se = (var / n as f64).sqrt();
                assert!(
                    mean.abs() < 4.0 * se,
                    "{f:?} coord {k}: score mean {mean} exceeds 4 se {se}"
                );
            }
        }
    }

    #[test]
    fn gammae_to_shape_rate_round_trips() {
        assert_eq!(gammae_to_shape_rate(2.0, 4.0).unwrap(), (1.0, 0.5));
        assert_eq!(gammae_to_shape_rate(1.0, 1.0).unwrap(), (1.0, 1.0));
        assert!(gammae_to_shape_rate(-1.0, 1.0).is_err());
        assert!(gammae_to_shape_rate(1.0, 0.0).is_err());
        let mut r = rng(8);
        for _ in 0..100 {
            let mean = r.random_range(0.01..10.0);
            let var = r.random_range(0.01..10.0);
            let (shape, rate) = gammae_to_shape_rate(mean, var).unwrap();
            assert_relative_eq!(shape / rate, mean, max_relative = 1e-12);
            assert_relative_eq!(shape / (rate * rate), var, max_relative = 1e-12);
        }
    }

    #[test]
    fn family_log_pdf_is_sum_of_factor_log_pdfs() {
        let fam = MeanFieldFamily::new(vec![
            FactorKind::GaussianMeanLogStd { dim: 2 },
            FactorKind::GammaShapeRate { dim: 1 },
            FactorKind::GammaMeanVar { dim: 3 },
        ]);
        assert_eq!(fam.n_params(), 12);
        assert_eq!(fam.n_values(), 6);
        let mut r = rng(9);
        let lambda: Vec<f64> = (0..fam.n_params())
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut r);
                0.3 * e
            })
            .collect();
        let z = fam.sample(&lambda, &mut r).unwrap();
        let total = fam.log_pdf(&lambda, &z).unwrap();
        let mut by_factor = 0.0;
        for i in 0..fam.n_factors() {
            by_factor += fam.factor_log_pdf(i, &lambda, &z).unwrap();
        }
        assert_eq!(total, by_factor);
    }

    #[test]
    fn sampling_matches_analytic_moments() {
        // Empirical mean/variance of 1e5 draws within 4 standard errors.
        struct Case {
            kind: FactorKind,
            params: [f64; 2],
            mean: f64,
            var: f64,
        }
        let cases = [
            Case {
                kind: FactorKind::GaussianMeanLogStd { dim: 1 },
                params: [0.7, -0.5],
                mean: 0.7,
                var: (-1.0f64).exp(),
            },
            Case {
                kind: FactorKind::GammaShapeRate { dim: 1 },
                params: [0.8, 0.2],
                mean: (0.8f64).exp() / (0.2f64).exp(),
                var: (0.8f64).exp() / (0.4f64).exp(),
            },
            Case {
                kind: FactorKind::GammaMeanVar { dim: 1 },
                params: [0.4, -0.3],
                mean: (0.4f64).exp(),
                var: (-0.3f64).exp(),
            },
        ];
        let mut r = rng(10);
        let n = 100_000usize;
        for c in cases {
            let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let z = c.kind.sample(&c.params, &mut r).unwrap()[0];
                s1 += z;
                s2 += z * z;
                s3 += z * z * z;
                s4 += z * z * z * z;
            }
            let nf = n as f64;
            let m = s1 / nf;
            let v = s2 / nf - m * m;
            // standard errors of mean and variance from sample moments
            let se_mean = (v / nf).sqrt();
            let mu4 = s4 / nf - 4.0 * m * s3 / nf + 6.0 * m * m * s2 / nf - 3.0 * m.powi(4);
            let se_var = ((mu4 - v * v).max(0.0) / nf).sqrt();
            assert!(
                (m - c.mean).abs() < 4.0 * se_mean,
                "{:?}: mean {m} vs {}",
                c.kind,
                c.mean
            );
            assert!(
                (v - c.var).abs() < 4.0 * se_var,
                "{:?}: var {v} vs {}",
                c.kind,
                c.var
            );
        }
    }
}
