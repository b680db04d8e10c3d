//! Continuous distributions exposing CDF, PDF, quantile function (QF) and
//! quantile density function (QDF).
//!
//! Families with closed-form CDFs (normal, exponential, logistic, extreme
//! value, Laplace, normal mixtures) sit alongside quantile-defined families
//! (Tukey lambda, generalized lambda, three-term metalog) whose CDF is only
//! available by inverting the QF numerically.
//!
//! | Family | Parameters | Quantile function |
//! |---|---|---|
//! | [`Family::Normal`] | μ, σ | μ + σΦ⁻¹(p) |
//! | [`Family::Exponential`] | rate | −ln(1−p)/rate |
//! | [`Family::Logistic`] | μ, σ | μ + σ·ln(p/(1−p)) |
//! | [`Family::ExtremeValue`] | μ, σ | μ − σ·ln(−ln p) (Gumbel, maximum) |
//! | [`Family::Laplace`] | μ, σ | μ + σ·ln(2p) for p < ½, μ − σ·ln(2−2p) otherwise |
//! | [`Family::NormalMixture`] | w, μ, σ per component | numeric inversion of Σ w_c Φ((x−μ_c)/σ_c) |
//! | [`Family::TukeyLambda`] | λ | (p^λ − (1−p)^λ)/λ, or ln(p/(1−p)) at λ = 0 |
//! | [`Family::GeneralizedLambda`] | λ₁..λ₄ | λ₁ + (p^λ₃ − (1−p)^λ₄)/λ₂ |
//! | [`Family::Metalog3`] | a₁, a₂, a₃ | a₁ + a₃(p − ½) + a₂·ln(p/(1−p)) |

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::special::{self, logistic, logit, norm_cdf, norm_ln_pdf, norm_pdf, norm_ppf};

const MAX_ITER: usize = 200;
const P_TOL: f64 = 1e-12;
const MIXTURE_BRACKET_SDS: f64 = 40.0;

thread_local! {
    static CDF_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`DistributionSpec`] CDF evaluations performed on the current
/// thread (closed-form and numeric alike, including PDFs of quantile-defined
/// families, which go through the CDF).
pub fn cdf_evaluations() -> u64 {
    CDF_EVALUATIONS.with(Cell::get)
}

fn count_cdf() {
    CDF_EVALUATIONS.with(|c| c.set(c.get() + 1));
}

/// Evaluation contract shared by parametric families, location-scale
/// wrappers and nonparametric fits.
pub trait ContinuousDistribution: Send + Sync {
    fn cdf(&self, x: f64) -> Result<f64>;

    /// Survival function `1 − F(x)`. Implementors with a more accurate upper
    /// tail should override.
    fn sf(&self, x: f64) -> Result<f64> {
        Ok(1.0 - self.cdf(x)?)
    }

    fn pdf(&self, x: f64) -> Result<f64>;

    fn ln_pdf(&self, x: f64) -> Result<f64> {
        Ok(self.pdf(x)?.ln())
    }

    /// Left-continuous inverse of the CDF on the open interval (0, 1).
    fn quantile(&self, p: f64) -> Result<f64>;

    /// Derivative of the quantile function.
    fn qdf(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        let f = self.pdf(self.quantile(p)?)?;
        if f > 0.0 {
            Ok(1.0 / f)
        } else {
            Ok(f64::INFINITY)
        }
    }

    /// Probability-integral-transform sampling: `quantile(U)` for `U ~ Uniform(0, 1)`.
    fn sample_with(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        (0..count)
            .map(|_| {
                let u: f64 = rng.sample(Open01);
                self.quantile(u)
            })
            .collect()
    }
}

pub(crate) fn check_prob(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability {p} outside (0, 1)")))
    }
}

/// Family tag of a [`DistributionSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Normal,
    Exponential,
    Logistic,
    ExtremeValue,
    Laplace,
    NormalMixture,
    TukeyLambda,
    GeneralizedLambda,
    Metalog3,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Normal,
        Family::Exponential,
        Family::Logistic,
        Family::ExtremeValue,
        Family::Laplace,
        Family::NormalMixture,
        Family::TukeyLambda,
        Family::GeneralizedLambda,
        Family::Metalog3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Exponential => "exponential",
            Family::Logistic => "logistic",
            Family::ExtremeValue => "extreme_value",
            Family::Laplace => "laplace",
            Family::NormalMixture => "normal_mixture",
            Family::TukeyLambda => "tukey_lambda",
            Family::GeneralizedLambda => "generalized_lambda",
            Family::Metalog3 => "metalog3",
        }
    }

    /// Families whose CDF is obtained by numerically inverting the QF.
    pub fn is_quantile_defined(self) -> bool {
        matches!(
            self,
            Family::TukeyLambda | Family::GeneralizedLambda | Family::Metalog3
        )
    }

    /// Families of the form μ + σ·Q₀(p).
    pub fn is_location_scale(self) -> bool {
        matches!(
            self,
            Family::Normal | Family::Logistic | Family::ExtremeValue | Family::Laplace
        )
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let fam = match norm.as_str() {
            "normal" | "gaussian" => Family::Normal,
            "exponential" | "exp" => Family::Exponential,
            "logistic" => Family::Logistic,
            "extreme_value" | "ev" | "gumbel" => Family::ExtremeValue,
            "laplace" | "la" => Family::Laplace,
            "normal_mixture" | "mixture" | "mix" => Family::NormalMixture,
            "tukey_lambda" | "tukey" | "tld" => Family::TukeyLambda,
            "generalized_lambda" | "gld" => Family::GeneralizedLambda,
            "metalog3" | "metalog" => Family::Metalog3,
            _ => return Err(Error::Format(format!("unknown distribution family `{s}`"))),
        };
        Ok(fam)
    }
}

/// Finite mixture of normal components, Σ w_c N(μ_c, σ_c²).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl NormalMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.len() != c || sds.len() != c {
            return Err(Error::InvalidParameters(format!(
                "normal mixture needs C >= 1 equal-length weights/means/sds, got {}/{}/{}",
                c,
                means.len(),
                sds.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameters("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameters(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameters("mixture means must be finite".into()));
        }
        if sds.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidParameters("mixture scales must be positive".into()));
        }
        Ok(Self { weights, means, sds })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sds(&self) -> &[f64] {
        &self.sds
    }

    fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((&w, &m), &s)| (w, m, s))
    }

    fn cdf(&self, x: f64) -> f64 {
        self.iter().map(|(w, m, s)| w * norm_cdf((x - m) / s)).sum()
    }

    fn sf(&self, x: f64) -> f64 {
        self.iter().map(|(w, m, s)| w * norm_cdf((m - x) / s)).sum()
    }

    fn pdf(&self, x: f64) -> f64 {
        self.iter().map(|(w, m, s)| w * norm_pdf((x - m) / s) / s).sum()
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        // log-sum-exp keeps far-tail densities finite
        let terms: Vec<f64> = self
            .iter()
            .filter(|(w, _, _)| *w > 0.0)
            .map(|(w, m, s)| w.ln() + norm_ln_pdf((x - m) / s) - s.ln())
            .collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return top;
        }
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }

    /// Safeguarded Newton on F(x) = p inside a ±40σ bracket.
    fn quantile(&self, p: f64) -> Result<f64> {
        let mut lo = self
            .iter()
            .map(|(_, m, s)| m - MIXTURE_BRACKET_SDS * s)
            .fold(f64::INFINITY, f64::min);
        let mut hi = self
            .iter()
            .map(|(_, m, s)| m + MIXTURE_BRACKET_SDS * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let upper = p > 0.5;
        // residual is increasing in x in both branches
        let resid = |x: f64| {
            if upper {
                (1.0 - p) - self.sf(x)
            } else {
                self.cdf(x) - p
            }
        };
        if resid(lo) > 0.0 || resid(hi) < 0.0 {
            return Err(Error::convergence(
                "normal_mixture quantile",
                format!("p = {p} not bracketed by [{lo}, {hi}]"),
            ));
        }
        let z = norm_ppf(p);
        let mut x = self.iter().map(|(w, m, s)| w * (m + s * z)).sum::<f64>();
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let mut width = hi - lo;
        for iter in 0..MAX_ITER {
            let r = resid(x);
            if r == 0.0 {
                return Ok(x);
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = self.pdf(x);
            let mut next = x - r / d;
            // bisect when Newton leaves the bracket or fails to halve it in two steps
            let stalled = iter % 2 == 1 && hi - lo > 0.5 * width;
            if iter % 2 == 1 {
                width = hi - lo;
            }
            if stalled || !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let tol = 1e-13 * (1.0 + x.abs());
            if (next - x).abs() <= tol || hi - lo <= tol {
                return Ok(next);
            }
            x = next;
        }
        Err(Error::convergence(
            "normal_mixture quantile",
            format!("no convergence for p = {p} after {MAX_ITER} iterations"),
        ))
    }
}

/// A distribution family tag together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionSpec {
    Normal { mu: f64, sigma: f64 },
    Exponential { rate: f64 },
    Logistic { mu: f64, sigma: f64 },
    /// Gumbel (maximum) distribution.
    ExtremeValue { mu: f64, sigma: f64 },
    Laplace { mu: f64, sigma: f64 },
    NormalMixture(NormalMixture),
    TukeyLambda { lambda: f64 },
    /// Ramberg–Schmeiser parameterization.
    GeneralizedLambda { l1: f64, l2: f64, l3: f64, l4: f64 },
    Metalog3 { a1: f64, a2: f64, a3: f64 },
}

impl DistributionSpec {
    pub fn normal(mu: f64, sigma: f64) -> Result<Self> {
        Self::Normal { mu, sigma }.validated()
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Self::Exponential { rate }.validated()
    }

    pub fn logistic(mu: f64, sigma: f64) -> Result<Self> {
        Self::Logistic { mu, sigma }.validated()
    }

    pub fn extreme_value(mu: f64, sigma: f64) -> Result<Self> {
        Self::ExtremeValue { mu, sigma }.validated()
    }

    pub fn laplace(mu: f64, sigma: f64) -> Result<Self> {
        Self::Laplace { mu, sigma }.validated()
    }

    pub fn normal_mixture(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        Ok(Self::NormalMixture(NormalMixture::new(weights, means, sds)?))
    }

    pub fn tukey_lambda(lambda: f64) -> Result<Self> {
        Self::TukeyLambda { lambda }.validated()
    }

    pub fn generalized_lambda(l1: f64, l2: f64, l3: f64, l4: f64) -> Result<Self> {
        Self::GeneralizedLambda { l1, l2, l3, l4 }.validated()
    }

    pub fn metalog3(a1: f64, a2: f64, a3: f64) -> Result<Self> {
        Self::Metalog3 { a1, a2, a3 }.validated()
    }

    /// The standard (location 0, scale 1) member of a location-scale family.
    pub fn standard(family: Family) -> Result<Self> {
        match family {
            Family::Normal => Self::normal(0.0, 1.0),
            Family::Logistic => Self::logistic(0.0, 1.0),
            Family::ExtremeValue => Self::extreme_value(0.0, 1.0),
            Family::Laplace => Self::laplace(0.0, 1.0),
            other => Err(Error::InvalidParameters(format!(
                "{other} is not a location-scale family"
            ))),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Self::Normal { .. } => Family::Normal,
            Self::Exponential { .. } => Family::Exponential,
            Self::Logistic { .. } => Family::Logistic,
            Self::ExtremeValue { .. } => Family::ExtremeValue,
            Self::Laplace { .. } => Family::Laplace,
            Self::NormalMixture(_) => Family::NormalMixture,
            Self::TukeyLambda { .. } => Family::TukeyLambda,
            Self::GeneralizedLambda { .. } => Family::GeneralizedLambda,
            Self::Metalog3 { .. } => Family::Metalog3,
        }
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    /// Check the parameter invariants of the family.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameters(msg));
        match *self {
            Self::Normal { mu, sigma }
            | Self::Logistic { mu, sigma }
            | Self::ExtremeValue { mu, sigma }
            | Self::Laplace { mu, sigma } => {
                if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
                    return bad(format!(
                        "{}: need finite mu and sigma > 0, got mu={mu}, sigma={sigma}",
                        self.family()
                    ));
                }
            }
            Self::Exponential { rate } => {
                if !rate.is_finite() || rate <= 0.0 {
                    return bad(format!("exponential: rate must be positive, got {rate}"));
                }
            }
            Self::NormalMixture(ref m) => {
                NormalMixture::new(m.weights.clone(), m.means.clone(), m.sds.clone())?;
            }
            Self::TukeyLambda { lambda } => {
                if !lambda.is_finite() {
                    return bad(format!("tukey_lambda: lambda must be finite, got {lambda}"));
                }
            }
            Self::GeneralizedLambda { l1, l2, l3, l4 } => {
                if ![l1, l2, l3, l4].iter().all(|v| v.is_finite()) || l2 == 0.0 {
                    return bad("generalized_lambda: parameters must be finite with l2 != 0".into());
                }
                if !gld_valid(l2, l3, l4) {
                    return bad(format!(
                        "generalized_lambda: ({l1}, {l2}, {l3}, {l4}) is outside the valid regions"
                    ));
                }
            }
            Self::Metalog3 { a1, a2, a3 } => {
                if ![a1, a2, a3].iter().all(|v| v.is_finite()) || a2 <= 0.0 {
                    return bad(format!("metalog3: need a2 > 0, got a2={a2}"));
                }
                // qdf = a3 + a2/(p(1-p)) has minimum a3 + 4 a2 at p = 1/2
                if a3 <= -4.0 * a2 {
                    return bad(format!(
                        "metalog3: a3 = {a3} makes the quantile function decreasing (need a3 > -4 a2)"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Flat parameter vector in the order of [`Self::param_names`].
    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Normal { mu, sigma }
            | Self::Logistic { mu, sigma }
            | Self::ExtremeValue { mu, sigma }
            | Self::Laplace { mu, sigma } => vec![*mu, *sigma],
            Self::Exponential { rate } => vec![*rate],
            Self::NormalMixture(m) => m
                .weights
                .iter()
                .chain(&m.means)
                .chain(&m.sds)
                .copied()
                .collect(),
            Self::TukeyLambda { lambda } => vec![*lambda],
            Self::GeneralizedLambda { l1, l2, l3, l4 } => vec![*l1, *l2, *l3, *l4],
            Self::Metalog3 { a1, a2, a3 } => vec![*a1, *a2, *a3],
        }
    }

    /// Parameter names; mixtures use `w[c]`, `mu[c]`, `sigma[c]` with 1-based `c`.
    pub fn param_names(&self) -> Vec<String> {
        family_param_names(self.family(), self.mixture_components())
    }

    fn mixture_components(&self) -> usize {
        match self {
            Self::NormalMixture(m) => m.components(),
            _ => 0,
        }
    }

    /// Inverse of [`Self::params`]. `components` is only read for mixtures.
    pub fn from_params(family: Family, components: usize, params: &[f64]) -> Result<Self> {
        let need = match family {
            Family::NormalMixture => 3 * components,
            Family::Exponential | Family::TukeyLambda => 1,
            Family::Metalog3 => 3,
            Family::GeneralizedLambda => 4,
            _ => 2,
        };
        if params.len() != need {
            return Err(Error::InvalidParameters(format!(
                "{family} expects {need} parameters, got {}",
                params.len()
            )));
        }
        let p = params;
        let spec = match family {
            Family::Normal => Self::Normal { mu: p[0], sigma: p[1] },
            Family::Exponential => Self::Exponential { rate: p[0] },
            Family::Logistic => Self::Logistic { mu: p[0], sigma: p[1] },
            Family::ExtremeValue => Self::ExtremeValue { mu: p[0], sigma: p[1] },
            Family::Laplace => Self::Laplace { mu: p[0], sigma: p[1] },
            Family::NormalMixture => {
                let c = components;
                return Self::normal_mixture(p[..c].to_vec(), p[c..2 * c].to_vec(), p[2 * c..].to_vec());
            }
            Family::TukeyLambda => Self::TukeyLambda { lambda: p[0] },
            Family::GeneralizedLambda => Self::GeneralizedLambda {
                l1: p[0],
                l2: p[1],
                l3: p[2],
                l4: p[3],
            },
            Family::Metalog3 => Self::Metalog3 {
                a1: p[0],
                a2: p[1],
                a3: p[2],
            },
        };
        spec.validated()
    }

    /// Quantile-function evaluation without the domain check; p = 0 and p = 1
    /// return the support endpoints (possibly infinite).
    fn quantile_raw(&self, p: f64) -> f64 {
        match *self {
            Self::Normal { mu, sigma } => mu + sigma * norm_ppf(p),
            Self::Exponential { rate } => -(-p).ln_1p() / rate,
            Self::Logistic { mu, sigma } => mu + sigma * logit(p),
            Self::ExtremeValue { mu, sigma } => mu + sigma * -(-p.ln()).ln(),
            Self::Laplace { mu, sigma } => {
                let z = if p < 0.5 {
                    (2.0 * p).ln()
                } else {
                    -(2.0 - 2.0 * p).ln()
                };
                mu + sigma * z
            }
            Self::NormalMixture(ref m) => {
                if p <= 0.0 {
                    f64::NEG_INFINITY
                } else if p >= 1.0 {
                    f64::INFINITY
                } else {
                    m.quantile(p).unwrap_or(f64::NAN)
                }
            }
            Self::TukeyLambda { lambda } => tukey_quantile(lambda, p),
            Self::GeneralizedLambda { l1, l2, l3, l4 } => {
                l1 + (p.powf(l3) - (1.0 - p).powf(l4)) / l2
            }
            Self::Metalog3 { a1, a2, a3 } => a1 + a3 * (p - 0.5) + a2 * logit(p),
        }
    }

    fn qdf_closed(&self, p: f64) -> Option<f64> {
        let q = match *self {
            Self::Normal { sigma, .. } => sigma / norm_pdf(norm_ppf(p)),
            Self::Exponential { rate } => 1.0 / (rate * (1.0 - p)),
            Self::Logistic { sigma, .. } => sigma / (p * (1.0 - p)),
            Self::ExtremeValue { sigma, .. } => sigma / (p * -p.ln()),
            Self::Laplace { sigma, .. } => sigma / p.min(1.0 - p),
            Self::NormalMixture(_) => return None,
            Self::TukeyLambda { lambda } => p.powf(lambda - 1.0) + (1.0 - p).powf(lambda - 1.0),
            Self::GeneralizedLambda { l2, l3, l4, .. } => {
                (l3 * p.powf(l3 - 1.0) + l4 * (1.0 - p).powf(l4 - 1.0)) / l2
            }
            Self::Metalog3 { a2, a3, .. } => a3 + a2 / (p * (1.0 - p)),
        };
        Some(q)
    }
}

fn tukey_quantile(lambda: f64, p: f64) -> f64 {
    if lambda.abs() < 1e-12 {
        return logit(p);
    }
    // expm1 keeps (p^λ − (1−p)^λ)/λ accurate as λ → 0
    let a = (lambda * p.ln()).exp_m1();
    let b = (lambda * (-p).ln_1p()).exp_m1();
    (a - b) / lambda
}

/// Ramberg–Schmeiser validity regions 1–4.
fn gld_valid(l2: f64, l3: f64, l4: f64) -> bool {
    let region1 = l3 <= -1.0 && l4 >= 1.0 && l2 < 0.0;
    let region2 = l3 >= 1.0 && l4 <= -1.0 && l2 < 0.0;
    let region3 = l3 >= 0.0 && l4 >= 0.0 && !(l3 == 0.0 && l4 == 0.0) && l2 > 0.0;
    let region4 = l3 <= 0.0 && l4 <= 0.0 && !(l3 == 0.0 && l4 == 0.0) && l2 < 0.0;
    region1 || region2 || region3 || region4
}

pub(crate) fn family_param_names(family: Family, components: usize) -> Vec<String> {
    let fixed: &[&str] = match family {
        Family::Normal | Family::Logistic | Family::ExtremeValue | Family::Laplace => &["mu", "sigma"],
        Family::Exponential => &["rate"],
        Family::TukeyLambda => &["lambda"],
        Family::GeneralizedLambda => &["l1", "l2", "l3", "l4"],
        Family::Metalog3 => &["a1", "a2", "a3"],
        Family::NormalMixture => {
            let mut names = Vec::with_capacity(3 * components);
            for prefix in ["w", "mu", "sigma"] {
                for c in 1..=components {
                    names.push(format!("{prefix}[{c}]"));
                }
            }
            return names;
        }
    };
    fixed.iter().map(|s| s.to_string()).collect()
}

/// Solve Q(p) = x for p by bracketed Newton iteration on (0, 1), using the
/// QDF as the derivative. Values outside the support image clamp to 0 or 1.
pub fn cdf_numeric(dist: &DistributionSpec, x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("cdf evaluated at NaN".into()));
    }
    let lower = dist.quantile_raw(0.0);
    let upper = dist.quantile_raw(1.0);
    if x <= lower {
        return Ok(0.0);
    }
    if x >= upper {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut p = 0.5;
    for _ in 0..MAX_ITER {
        let r = dist.quantile_raw(p) - x;
        if r == 0.0 {
            return Ok(p);
        }
        if r > 0.0 {
            hi = p;
        } else {
            lo = p;
        }
        let slope = dist
            .qdf_closed(p)
            .ok_or_else(|| Error::convergence("cdf_numeric", "family exposes no analytic qdf"))?;
        let mut next = p - r / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let tol = P_TOL * next.min(1.0 - next).min(1e-3) + f64::MIN_POSITIVE;
        if (next - p).abs() <= tol || hi - lo <= tol {
            return Ok(next);
        }
        p = next;
    }
    Err(Error::convergence(
        format!("{} cdf_numeric", dist.family()),
        format!("x = {x} after {MAX_ITER} iterations"),
    ))
}

impl ContinuousDistribution for DistributionSpec {
    fn cdf(&self, x: f64) -> Result<f64> {
        count_cdf();
        let v = match *self {
            Self::Normal { mu, sigma } => norm_cdf((x - mu) / sigma),
            Self::Exponential { rate } => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-rate * x).exp_m1()
                }
            }
            Self::Logistic { mu, sigma } => logistic((x - mu) / sigma),
            Self::ExtremeValue { mu, sigma } => (-(-(x - mu) / sigma).exp()).exp(),
            Self::Laplace { mu, sigma } => {
                let z = (x - mu) / sigma;
                if z < 0.0 {
                    0.5 * z.exp()
                } else {
                    1.0 - 0.5 * (-z).exp()
                }
            }
            Self::NormalMixture(ref m) => m.cdf(x),
            _ => return cdf_numeric(self, x),
        };
        Ok(v)
    }

    fn sf(&self, x: f64) -> Result<f64> {
        let v = match *self {
            Self::Normal { mu, sigma } => {
                count_cdf();
                norm_cdf((mu - x) / sigma)
            }
            Self::Exponential { rate } => {
                count_cdf();
                if x <= 0.0 {
                    1.0
                } else {
                    (-rate * x).exp()
                }
            }
            Self::Logistic { mu, sigma } => {
                count_cdf();
                logistic(-(x - mu) / sigma)
            }
            Self::ExtremeValue { mu, sigma } => {
                count_cdf();
                -(-(-(x - mu) / sigma).exp()).exp_m1()
            }
            Self::Laplace { mu, sigma } => {
                count_cdf();
                let z = (x - mu) / sigma;
                if z > 0.0 {
                    0.5 * (-z).exp()
                } else {
                    1.0 - 0.5 * z.exp()
                }
            }
            Self::NormalMixture(ref m) => {
                count_cdf();
                m.sf(x)
            }
            _ => 1.0 - self.cdf(x)?,
        };
        Ok(v)
    }

    fn pdf(&self, x: f64) -> Result<f64> {
        let v = match *self {
            Self::Normal { mu, sigma } => norm_pdf((x - mu) / sigma) / sigma,
            Self::Exponential { rate } => {
                if x < 0.0 {
                    0.0
                } else {
                    rate * (-rate * x).exp()
                }
            }
            Self::Logistic { mu, sigma } => {
                let l = logistic((x - mu) / sigma);
                l * (1.0 - l) / sigma
            }
            Self::ExtremeValue { mu, sigma } => {
                let z = (x - mu) / sigma;
                (-(z + (-z).exp())).exp() / sigma
            }
            Self::Laplace { mu, sigma } => (-((x - mu) / sigma).abs()).exp() / (2.0 * sigma),
            Self::NormalMixture(ref m) => m.pdf(x),
            _ => {
                let p = self.cdf(x)?;
                if p <= 0.0 || p >= 1.0 {
                    0.0
                } else {
                    1.0 / self.qdf_closed(p).unwrap_or(f64::INFINITY)
                }
            }
        };
        Ok(v)
    }

    fn ln_pdf(&self, x: f64) -> Result<f64> {
        match *self {
            Self::Normal { mu, sigma } => Ok(norm_ln_pdf((x - mu) / sigma) - sigma.ln()),
            Self::ExtremeValue { mu, sigma } => {
                let z = (x - mu) / sigma;
                Ok(-(z + (-z).exp()) - sigma.ln())
            }
            Self::Laplace { mu, sigma } => Ok(-((x - mu) / sigma).abs() - (2.0 * sigma).ln()),
            Self::NormalMixture(ref m) => Ok(m.ln_pdf(x)),
            _ => Ok(self.pdf(x)?.ln()),
        }
    }

    fn quantile(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        match self {
            Self::NormalMixture(m) => m.quantile(p),
            _ => Ok(self.quantile_raw(p)),
        }
    }

    fn qdf(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        match self.qdf_closed(p) {
            Some(q) => Ok(q),
            None => {
                let f = self.pdf(self.quantile(p)?)?;
                Ok(if f > 0.0 { 1.0 / f } else { f64::INFINITY })
            }
        }
    }
}

impl DistributionSpec {
    /// Serialize to the flat key-value representation.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("family", self.family().name());
        match self {
            Self::NormalMixture(m) => {
                kv.insert_list("weights", &m.weights);
                kv.insert_list("means", &m.means);
                kv.insert_list("sds", &m.sds);
            }
            _ => {
                for (name, value) in self.param_names().iter().zip(self.params()) {
                    kv.insert(name.clone(), value);
                }
            }
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let family: Family = kv.require("family")?.parse()?;
        match family {
            Family::NormalMixture => {
                Self::normal_mixture(kv.list("weights")?, kv.list("means")?, kv.list("sds")?)
            }
            _ => {
                let names = family_param_names(family, 0);
                let params = names
                    .iter()
                    .map(|n| kv.f64(n))
                    .collect::<Result<Vec<_>>>()?;
                Self::from_params(family, 0, &params)
            }
        }
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_kv())
    }
}

impl FromStr for DistributionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(s)?)
    }
}

/// `loc + scale · X` for a base distribution `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationScale<D> {
    pub base: D,
    pub loc: f64,
    pub scale: f64,
}

impl<D: ContinuousDistribution> LocationScale<D> {
    pub fn new(base: D, loc: f64, scale: f64) -> Result<Self> {
        if !loc.is_finite() || !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidParameters(format!(
                "location-scale wrapper needs finite loc and scale > 0, got loc={loc}, scale={scale}"
            )));
        }
        Ok(Self { base, loc, scale })
    }
}

impl<D: ContinuousDistribution> ContinuousDistribution for LocationScale<D> {
    fn cdf(&self, x: f64) -> Result<f64> {
        self.base.cdf((x - self.loc) / self.scale)
    }

    fn sf(&self, x: f64) -> Result<f64> {
        self.base.sf((x - self.loc) / self.scale)
    }

    fn pdf(&self, x: f64) -> Result<f64> {
        Ok(self.base.pdf((x - self.loc) / self.scale)? / self.scale)
    }

    fn ln_pdf(&self, x: f64) -> Result<f64> {
        Ok(self.base.ln_pdf((x - self.loc) / self.scale)? - self.scale.ln())
    }

    fn quantile(&self, p: f64) -> Result<f64> {
        Ok(self.loc + self.scale * self.base.quantile(p)?)
    }

    fn qdf(&self, p: f64) -> Result<f64> {
        Ok(self.scale * self.base.qdf(p)?)
    }
}

/// Seeded PIT sampling of `count` values.
pub fn sample(dist: &dyn ContinuousDistribution, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Precondition("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dist.sample_with(count, &mut rng)
}

/// `ln Γ` re-export for callers that build their own densities.
pub fn ln_gamma(x: f64) -> f64 {
    special::ln_gamma(x)
}
