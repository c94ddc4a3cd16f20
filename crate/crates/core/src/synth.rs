//! Synthetic regression families with exact conditional score laws.
//!
//! In every family `y = f*(x) + sigma(x) Z` with `Z` standard normal, so the
//! absolute residual against the true regression function is folded normal
//! with scale `sigma(x)`. The [`OracleSpec`] of a family exposes that law:
//! conditional CDF, conditional quantiles, the density bound, and the
//! variance of the conditional quantile over `X`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::score::{LabeledSample, Predictor};

/// Binary coordinates in the high-dimensional family.
pub const HIGHDIM_BITS: usize = 10;
/// Gaussian coordinates in the high-dimensional family.
pub const HIGHDIM_GAUSS: usize = 90;

const BISECTION_TOL: f64 = 1e-12;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverts a nondecreasing `cdf` at `level` by bisection on `[lo, hi]`.
pub fn invert_cdf(cdf: impl Fn(f64) -> f64, level: f64, mut lo: f64, mut hi: f64) -> f64 {
    while cdf(hi) < level {
        hi *= 2.0;
    }
    while hi - lo > BISECTION_TOL * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    invert_cdf(normal_cdf, p, -40.0, 40.0)
}

/// `P(|sigma Z| <= t)`.
pub fn folded_normal_cdf(t: f64, sigma: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t.is_infinite() {
        1.0
    } else {
        erf::erf(t / (sigma * std::f64::consts::SQRT_2))
    }
}

/// Level-`beta` quantile of `|sigma Z|`.
pub fn folded_normal_quantile(beta: f64, sigma: f64) -> f64 {
    if beta <= 0.0 {
        return 0.0;
    }
    if beta >= 1.0 {
        return f64::INFINITY;
    }
    sigma * invert_cdf(|t| folded_normal_cdf(t, 1.0), beta, 0.0, 8.0)
}

/// Scale of the noise as a function of the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NoiseScale {
    /// `sigma = 1` for `x < 0`, `high` for `x >= 0`.
    Step { high: f64 },
    /// `sigma = intercept + slope * x_0`.
    Linear { intercept: f64, slope: f64 },
    /// `sigma = sqrt(sigma_x^2 + sum_{i=1..10} i * x_i)`.
    BinaryVariance { sigma_x: f64 },
}

impl NoiseScale {
    pub fn sigma(&self, x: &[f64]) -> f64 {
        match self {
            NoiseScale::Step { high } => {
                if x[0] < 0.0 {
                    1.0
                } else {
                    *high
                }
            }
            NoiseScale::Linear { intercept, slope } => intercept + slope * x[0],
            NoiseScale::BinaryVariance { sigma_x } => {
                let extra: f64 = x[..HIGHDIM_BITS]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b * (i + 1) as f64)
                    .sum();
                (sigma_x * sigma_x + extra).sqrt()
            }
        }
    }
}

/// Analytic conditional law of the absolute-residual score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub scale: NoiseScale,
    /// Upper bound on the conditional score density.
    pub lipschitz_l: f64,
    /// Level `1 - alpha` the variance below refers to.
    pub level: f64,
    /// `var(q_level(S | X))` over the covariate distribution.
    pub quantile_variance: f64,
}

impl OracleSpec {
    pub fn cond_cdf(&self, x: &[f64], t: f64) -> f64 {
        folded_normal_cdf(t, self.scale.sigma(x))
    }

    pub fn cond_quantile(&self, x: &[f64], level: f64) -> f64 {
        folded_normal_quantile(level, self.scale.sigma(x))
    }

    /// Draws a score from the conditional law at `x`.
    pub fn sample_score(&self, x: &[f64], rng: &mut Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.scale.sigma(x) * z).abs()
    }
}

/// `2 phi(0) / sigma_min`, the peak density of a folded normal.
fn folded_density_bound(sigma_min: f64) -> f64 {
    2.0 * normal_pdf(0.0) / sigma_min
}

/// A synthetic regression family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SynthFamily {
    /// `x ~ U[-1, 1]`, `y = x + sigma(x) Z` with a noise step at zero.
    Intro {
        /// Read the high-noise law as variance 2 (`sigma = sqrt 2`); otherwise
        /// as standard deviation 2.
        #[serde(default = "yes")]
        variance_reading: bool,
    },
    /// `x ~ U[0, 1]`, `y = x + (intercept + slope x) Z`.
    LinearScale { intercept: f64, slope: f64 },
    /// 10 fair bits then 90 `N(0, sigma_x^2)` coordinates,
    /// `y = <theta, x> + N(0, sigma_x^2 + sum_i i x_i)`.
    HighDim {
        sigma_x: f64,
        #[serde(default = "ones")]
        theta: Vec<f64>,
    },
}

fn yes() -> bool {
    true
}

fn ones() -> Vec<f64> {
    vec![1.0; HIGHDIM_BITS + HIGHDIM_GAUSS]
}

impl SynthFamily {
    pub fn intro() -> Self {
        SynthFamily::Intro { variance_reading: true }
    }

    pub fn highdim_default() -> Self {
        SynthFamily::HighDim {
            sigma_x: 1.0,
            theta: ones(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SynthFamily::Intro { .. } | SynthFamily::LinearScale { .. } => 1,
            SynthFamily::HighDim { .. } => HIGHDIM_BITS + HIGHDIM_GAUSS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SynthFamily::Intro { .. } => Ok(()),
            SynthFamily::LinearScale { intercept, slope } => {
                if *intercept > 0.0 && intercept + slope > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config("noise scale must be positive on [0, 1]".into()))
                }
            }
            SynthFamily::HighDim { sigma_x, theta } => {
                if theta.len() != HIGHDIM_BITS + HIGHDIM_GAUSS {
                    return Err(Error::Config(format!(
                        "theta must have {} components, got {}",
                        HIGHDIM_BITS + HIGHDIM_GAUSS,
                        theta.len()
                    )));
                }
                if !(*sigma_x > 0.0) {
                    return Err(Error::Config("sigma_x must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn noise_scale(&self) -> NoiseScale {
        match self {
            SynthFamily::Intro { variance_reading } => NoiseScale::Step {
                high: if *variance_reading { std::f64::consts::SQRT_2 } else { 2.0 },
            },
            SynthFamily::LinearScale { intercept, slope } => NoiseScale::Linear {
                intercept: *intercept,
                slope: *slope,
            },
            SynthFamily::HighDim { sigma_x, .. } => NoiseScale::BinaryVariance { sigma_x: *sigma_x },
        }
    }

    /// The true regression function as a predictor.
    pub fn true_predictor(&self) -> Predictor {
        match self {
            SynthFamily::Intro { .. } | SynthFamily::LinearScale { .. } => Predictor::Linear {
                coef: vec![1.0],
                intercept: 0.0,
            },
            SynthFamily::HighDim { theta, .. } => Predictor::Linear {
                coef: theta.clone(),
                intercept: 0.0,
            },
        }
    }

    /// Draws covariates only.
    pub fn sample_x(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            SynthFamily::Intro { .. } => vec![rng.random_range(-1.0..=1.0)],
            SynthFamily::LinearScale { .. } => vec![rng.random_range(0.0..=1.0)],
            SynthFamily::HighDim { sigma_x, .. } => {
                let mut x = Vec::with_capacity(HIGHDIM_BITS + HIGHDIM_GAUSS);
                for _ in 0..HIGHDIM_BITS {
                    x.push(if rng.random_bool(0.5) { 1.0 } else { 0.0 });
                }
                for _ in 0..HIGHDIM_GAUSS {
                    let z: f64 = rng.sample(StandardNormal);
                    x.push(sigma_x * z);
                }
                x
            }
        }
    }

    /// Draws a label at `x`.
    pub fn sample_y(&self, x: &[f64], rng: &mut Rng) -> f64 {
        let mean = match self.true_predictor() {
            Predictor::Linear { coef, intercept } => coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + intercept,
        };
        let z: f64 = rng.sample(StandardNormal);
        mean + self.noise_scale().sigma(x) * z
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
        self.validate()?;
        let mut rng = rng::seeded(seed);
        Ok((0..n)
            .map(|_| {
                let x = self.sample_x(&mut rng);
                let y = self.sample_y(&x, &mut rng);
                LabeledSample::regression(x, y)
            })
            .collect())
    }

    /// Oracle for the absolute residual against [`Self::true_predictor`].
    pub fn oracle(&self, alpha: f64) -> Result<OracleSpec> {
        self.validate()?;
        crate::error::check_alpha(alpha)?;
        let level = 1.0 - alpha;
        let scale = self.noise_scale();
        let unit_q = folded_normal_quantile(level, 1.0);
        let (sigma_min, quantile_variance) = match &scale {
            NoiseScale::Step { high } => {
                let spread = unit_q * (high - 1.0);
                (high.min(1.0), spread * spread / 4.0)
            }
            NoiseScale::Linear { intercept, slope } => {
                let lo = intercept.min(intercept + slope);
                (lo, unit_q * unit_q * slope * slope / 12.0)
            }
            NoiseScale::BinaryVariance { sigma_x } => {
                let sigmas = binary_pattern_sigmas(*sigma_x);
                let qs: Vec<f64> = sigmas.iter().map(|s| unit_q * s).collect();
                let mean = qs.iter().sum::<f64>() / qs.len() as f64;
                let var = qs.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / qs.len() as f64;
                (*sigma_x, var)
            }
        };
        Ok(OracleSpec {
            scale,
            lipschitz_l: folded_density_bound(sigma_min),
            level,
            quantile_variance,
        })
    }
}

/// Noise scale for each of the `2^10` equiprobable binary patterns.
pub fn binary_pattern_sigmas(sigma_x: f64) -> Vec<f64> {
    (0u32..1 << HIGHDIM_BITS)
        .map(|pattern| {
            let extra: u32 = (0..HIGHDIM_BITS as u32)
                .filter(|b| pattern >> b & 1 == 1)
                .map(|b| b + 1)
                .sum();
            (sigma_x * sigma_x + extra as f64).sqrt()
        })
        .collect()
}

pub fn gen_intro(n: usize, seed: u64) -> Vec<LabeledSample> {
    SynthFamily::intro().generate(n, seed).expect("intro family is always valid")
}

pub fn intro_oracle(alpha: f64) -> Result<OracleSpec> {
    SynthFamily::intro().oracle(alpha)
}

pub fn gen_highdim(n: usize, sigma_x: f64, theta: Vec<f64>, seed: u64) -> Result<Vec<LabeledSample>> {
    SynthFamily::HighDim { sigma_x, theta }.generate(n, seed)
}

pub fn highdim_oracle(sigma_x: f64, theta: Vec<f64>, alpha: f64) -> Result<OracleSpec> {
    SynthFamily::HighDim { sigma_x, theta }.oracle(alpha)
}

/// Ridge penalty used when the normal equations are singular.
pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Least-squares fit of `y ~ <coef, x> + intercept`.
pub fn ols_fit(train: &[LabeledSample]) -> Result<Predictor> {
    let d = train.first().ok_or(Error::Empty("training data"))?.x.len();
    let n = train.len();
    if n < d + 1 {
        return Err(Error::Data(format!("least squares needs at least {} samples, got {n}", d + 1)));
    }
    let mut ys = Vec::with_capacity(n);
    for smp in train {
        if smp.x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: smp.x.len() });
        }
        match smp.y {
            crate::score::Label::Real(y) => ys.push(y),
            crate::score::Label::Class(_) => return Err(Error::LabelKind("least squares")),
        }
    }
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    if d == 0 {
        return Ok(Predictor::Linear {
            coef: Vec::new(),
            intercept: y_mean,
        });
    }
    let mut x_mean = vec![0.0; d];
    for smp in train {
        for (m, v) in x_mean.iter_mut().zip(&smp.x) {
            *m += v;
        }
    }
    for m in &mut x_mean {
        *m /= n as f64;
    }
    let xc = DMatrix::from_fn(n, d, |i, j| train[i].x[j] - x_mean[j]);
    let yc = DVector::from_iterator(n, ys.iter().map(|y| y - y_mean));
    let gram = xc.tr_mul(&xc);
    let rhs = xc.tr_mul(&yc);

    let scale = gram.diagonal().max().max(1.0);
    let solve = |penalty: f64| {
        let mut a = gram.clone();
        for i in 0..d {
            a[(i, i)] += penalty * scale;
        }
        let chol = a.clone().cholesky()?;
        let l = chol.l();
        let min_pivot = l.diagonal().min();
        if penalty == 0.0 && min_pivot * min_pivot < 1e-12 * scale {
            return None;
        }
        let mut coef = chol.solve(&rhs);
        // one step of iterative refinement
        let resid = &rhs - &a * &coef;
        coef += chol.solve(&resid);
        Some(coef)
    };
    let coef = match solve(0.0) {
        Some(c) => c,
        None => {
            log::info!("normal equations singular; using ridge penalty {RIDGE_FALLBACK}");
            solve(RIDGE_FALLBACK).ok_or_else(|| Error::Numeric("least squares failed".into()))?
        }
    };
    let intercept = y_mean - coef.iter().zip(&x_mean).map(|(c, m)| c * m).sum::<f64>();
    Ok(Predictor::Linear {
        coef: coef.iter().copied().collect(),
        intercept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_reference_values() {
        let p = normal_cdf(1.959963984540054);
        assert!((p - 0.975).abs() < 1e-10, "{p:e}");
        assert!((normal_quantile(0.95) - 1.6448536269514722).abs() < 1e-10);
        assert!((normal_quantile(0.5)).abs() < 1e-11);
    }

    #[test]
    fn intro_oracle_values() {
        let oracle = intro_oracle(0.1).unwrap();
        let lo = oracle.cond_quantile(&[-0.5], 0.9);
        let hi = oracle.cond_quantile(&[0.5], 0.9);
        assert!((lo - 1.6449).abs() < 1e-4);
        assert!((hi - 2.3262).abs() < 1e-4);
        assert!((hi - lo * std::f64::consts::SQRT_2).abs() < 1e-9);
        assert_eq!(oracle.cond_cdf(&[0.3], 0.0), 0.0);
        assert!((oracle.lipschitz_l - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((oracle.lipschitz_l - 0.7979).abs() < 1e-4);
        let var = ((hi - lo) / 2.0).powi(2);
        assert!((oracle.quantile_variance - var).abs() < 1e-9);
    }

    #[test]
    fn cdf_inverts_quantile() {
        let families = [
            SynthFamily::intro(),
            SynthFamily::LinearScale { intercept: 0.5, slope: 2.0 },
            SynthFamily::highdim_default(),
        ];
        let mut rng = rng::seeded(5);
        for fam in &families {
            let oracle = fam.oracle(0.1).unwrap();
            for _ in 0..20 {
                let x = fam.sample_x(&mut rng);
                for beta in [0.5, 0.9, 0.95] {
                    let q = oracle.cond_quantile(&x, beta);
                    assert!((oracle.cond_cdf(&x, q) - beta).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn highdim_oracle_values() {
        let oracle = highdim_oracle(1.0, ones(), 0.1).unwrap();
        let mut x = vec![0.0; 100];
        assert!((oracle.cond_quantile(&x, 0.9) - 1.6449).abs() < 1e-4);
        x[0] = 1.0;
        let expected = folded_normal_quantile(0.9, 1.0) * std::f64::consts::SQRT_2;
        assert!((oracle.cond_quantile(&x, 0.9) - expected).abs() < 1e-9);

        // enumerate the 1024 patterns directly
        let unit = folded_normal_quantile(0.9, 1.0);
        let mut qs = Vec::new();
        for p in 0..1024u32 {
            let mut v = 1.0;
            for i in 0..10 {
                if p & (1 << i) != 0 {
                    v += (i + 1) as f64;
                }
            }
            qs.push(unit * f64::sqrt(v));
        }
        let mean = qs.iter().sum::<f64>() / 1024.0;
        let var = qs.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / 1024.0;
        assert!((oracle.quantile_variance - var).abs() < 1e-9);
    }

    #[test]
    fn shared_folded_normal_path() {
        // intro x >= 0 and highdim with only X_1 set both have sigma = sqrt 2
        let a = intro_oracle(0.1).unwrap();
        let b = highdim_oracle(1.0, ones(), 0.1).unwrap();
        let mut x = vec![0.0; 100];
        x[0] = 1.0;
        for t in [0.1, 1.0, 2.5] {
            assert_eq!(a.cond_cdf(&[0.2], t), b.cond_cdf(&x, t));
        }
    }

    #[test]
    fn intro_generator_moments() {
        let data = gen_intro(1_000_000, 42);
        let n = data.len() as f64;
        let resid: Vec<(f64, f64)> = data
            .iter()
            .map(|s| match s.y {
                crate::score::Label::Real(y) => (s.x[0], y - s.x[0]),
                _ => unreachable!(),
            })
            .collect();
        let mean = resid.iter().map(|r| r.1).sum::<f64>() / n;
        assert!(mean.abs() < 0.005, "mean {mean}");
        let neg: Vec<f64> = resid.iter().filter(|r| r.0 < 0.0).map(|r| r.1).collect();
        let var = neg.iter().map(|r| r * r).sum::<f64>() / neg.len() as f64;
        assert!((var - 1.0).abs() < 0.01, "var {var}");
        let frac = resid.iter().filter(|r| r.0 >= 0.0).count() as f64 / n;
        assert!((frac - 0.5).abs() < 0.005);

        // empirical conditional quantile vs oracle within 3 order-statistic sd
        let mut pos: Vec<f64> = resid.iter().filter(|r| r.0 >= 0.0).map(|r| r.1.abs()).collect();
        pos.sort_by(f64::total_cmp);
        let k = (0.9 * pos.len() as f64).ceil() as usize - 1;
        let oracle = intro_oracle(0.1).unwrap();
        let q = oracle.cond_quantile(&[0.5], 0.9);
        let density = 2.0 * normal_pdf(q / std::f64::consts::SQRT_2) / std::f64::consts::SQRT_2;
        let sd = (0.9 * 0.1 / pos.len() as f64).sqrt() / density;
        assert!((pos[k] - q).abs() < 3.0 * sd, "{} vs {q}", pos[k]);
    }

    #[test]
    fn highdim_generator_moments() {
        let fam = SynthFamily::highdim_default();
        let data = fam.generate(20_000, 3).unwrap();
        for i in 0..10 {
            let mean = data.iter().map(|s| s.x[i]).sum::<f64>() / data.len() as f64;
            assert!((mean - 0.5).abs() < 0.015, "bit {i} mean {mean}");
        }
        // forced bit patterns
        let mut rng = rng::seeded(8);
        for (bit, expected) in [(0.0, 1.0), (1.0, 56.0)] {
            let n = 200_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let mut x = fam.sample_x(&mut rng);
                x[..10].fill(bit);
                let y = fam.sample_y(&x, &mut rng);
                let r = y - x.iter().sum::<f64>();
                acc += r * r;
            }
            let var = acc / n as f64;
            // sd of a sample variance is about var * sqrt(2/n)
            assert!((var - expected).abs() < 4.0 * expected * (2.0 / n as f64).sqrt(), "var {var}");
        }
    }

    #[test]
    fn ols_recovers_noiseless_coefficients() {
        let mut rng = rng::seeded(1);
        let theta = [1.5, -2.0, 0.25];
        let data: Vec<_> = (0..50)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = theta.iter().zip(&x).map(|(t, v)| t * v).sum::<f64>() + 0.7;
                LabeledSample::regression(x, y)
            })
            .collect();
        let Predictor::Linear { coef, intercept } = ols_fit(&data).unwrap();
        for (c, t) in coef.iter().zip(theta) {
            assert!((c - t).abs() < 1e-6);
        }
        assert!((intercept - 0.7).abs() < 1e-6);

        let mut shuffled = data.clone();
        shuffled.reverse();
        let Predictor::Linear { coef: c2, .. } = ols_fit(&shuffled).unwrap();
        for (a, b) in coef.iter().zip(&c2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ols_intercept_only_and_rank_deficient() {
        let data: Vec<_> = [1.0, 2.0, 6.0].iter().map(|&y| LabeledSample::regression(vec![], y)).collect();
        let Predictor::Linear { coef, intercept } = ols_fit(&data).unwrap();
        assert!(coef.is_empty());
        assert_eq!(intercept, 3.0);

        // duplicated column
        let data: Vec<_> = (0..10)
            .map(|k| {
                let v = k as f64;
                LabeledSample::regression(vec![v, v], 2.0 * v + 1.0)
            })
            .collect();
        let p = ols_fit(&data).unwrap();
        for smp in &data {
            let crate::score::Label::Real(y) = smp.y else { unreachable!() };
            assert!((p.predict(&smp.x).unwrap() - y).abs() < 1e-5);
        }
        assert!(ols_fit(&data[..2]).is_err());
    }

    #[test]
    fn ols_normal_equations_residual() {
        let data = SynthFamily::highdim_default().generate(2_000, 4).unwrap();
        let Predictor::Linear { coef, intercept } = ols_fit(&data).unwrap();
        // gradient of the squared loss, relative to X^T y
        let mut grad = vec![0.0; 101];
        let mut scale = vec![0.0; 101];
        for smp in &data {
            let crate::score::Label::Real(y) = smp.y else { unreachable!() };
            let r = coef.iter().zip(&smp.x).map(|(c, v)| c * v).sum::<f64>() + intercept - y;
            for j in 0..100 {
                grad[j] += r * smp.x[j];
                scale[j] += (y * smp.x[j]).abs();
            }
            grad[100] += r;
            scale[100] += y.abs();
        }
        let g: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s: f64 = scale.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(g / s < 1e-8, "relative gradient {}", g / s);
    }
}
