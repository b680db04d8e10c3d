//! Log-likelihoods of the quantile-matching models and their priors.
//!
//! Every model scores a [`QuantileSet`] against a parametric distribution:
//!
//! * [`ModelKind::QgpQf`]: `Q̂ ~ N(Q_θ(p), Γ∘qqᵀ/n)` with `q` the QDF of `F_θ`.
//! * [`ModelKind::QgpPit`]: `F_θ(Q̂) ~ N(p, Γ/n)`.
//! * [`ModelKind::QgpNormal`]: `Q̂ ~ N(μ + σΦ⁻¹(p), σ²Ψ/n)`.
//! * [`ModelKind::Ind`]: `F_θ(Q̂_k) ~ N(p_k, σ_ρ²)` independently, `σ_ρ = 1/ν`.
//! * [`ModelKind::Ord`]: joint density of the order statistics the quantiles
//!   stand in for.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::distributions::{ContinuousDistribution, DistributionSpec, Family, LocationScale};
use crate::empirical::{brownian_bridge_cov, ProbabilityGrid, QuantileSet};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::linalg::CholeskyFactor;
use crate::special::{ln_factorial, ln_gamma, norm_ln_pdf, norm_pdf, norm_ppf, LN_SQRT_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    QgpQf,
    QgpPit,
    QgpNormal,
    Ind,
    Ord,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::QgpQf => "qgp_qf",
            ModelKind::QgpPit => "qgp_pit",
            ModelKind::QgpNormal => "qgp_normal",
            ModelKind::Ind => "ind",
            ModelKind::Ord => "ord",
        }
    }

    /// Whether the model has a sample-size parameter.
    pub fn uses_n(self) -> bool {
        !matches!(self, ModelKind::Ind)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "qgp_qf" | "qf" => Ok(ModelKind::QgpQf),
            "qgp_pit" | "qgp" | "pit" => Ok(ModelKind::QgpPit),
            "qgp_normal" | "normal_qgp" => Ok(ModelKind::QgpNormal),
            "ind" => Ok(ModelKind::Ind),
            "ord" => Ok(ModelKind::Ord),
            _ => Err(Error::Format(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Prior on one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    /// Normal(0, sd²) truncated to the positive half-line.
    HalfNormal { sd: f64 },
    /// Symmetric Dirichlet on a simplex block.
    Dirichlet { alpha: f64 },
}

impl Prior {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            Prior::HalfNormal { sd } => sd.is_finite() && sd > 0.0,
            Prior::Dirichlet { alpha } => alpha.is_finite() && alpha > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameters(format!("invalid prior {self}")))
        }
    }

    /// Log density of a scalar; `−∞` outside the support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => norm_ln_pdf((x - mean) / sd) - sd.ln(),
            Prior::HalfNormal { sd } => {
                if x > 0.0 {
                    std::f64::consts::LN_2 + norm_ln_pdf(x / sd) - sd.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Dirichlet { .. } => f64::NEG_INFINITY,
        }
    }

    /// Log density of a block of values: Dirichlet for simplexes, otherwise a
    /// product of independent scalar priors.
    pub fn ln_pdf_block(&self, xs: &[f64]) -> f64 {
        match *self {
            Prior::Dirichlet { alpha } => {
                if xs.iter().any(|w| *w < 0.0) || (xs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return f64::NEG_INFINITY;
                }
                let c = xs.len() as f64;
                let mut acc = ln_gamma(alpha * c) - c * ln_gamma(alpha);
                if alpha != 1.0 {
                    acc += (alpha - 1.0) * xs.iter().map(|w| w.ln()).sum::<f64>();
                }
                acc
            }
            _ => xs.iter().map(|&x| self.ln_pdf(x)).sum(),
        }
    }
}

impl fmt::Display for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prior::Normal { mean, sd } => write!(f, "normal({mean},{sd})"),
            Prior::HalfNormal { sd } => write!(f, "half_normal({sd})"),
            Prior::Dirichlet { alpha } => write!(f, "dirichlet({alpha})"),
        }
    }
}

impl FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("cannot parse prior `{s}`"));
        let s = s.trim();
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let prior = match (name.trim().to_ascii_lowercase().as_str(), nums.as_slice()) {
            ("normal", [m, sd]) => Prior::Normal { mean: *m, sd: *sd },
            ("half_normal" | "halfnormal", [sd]) => Prior::HalfNormal { sd: *sd },
            ("dirichlet", [a]) => Prior::Dirichlet { alpha: *a },
            _ => return Err(bad()),
        };
        prior.validate()?;
        Ok(prior)
    }
}

/// Priors keyed by parameter block name (`mu`, `sigma`, `w`, `n`, ...).
/// Mixture blocks share one prior across components.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    priors: BTreeMap<String, Prior>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        let entries = [
            ("mu", Prior::Normal { mean: 5.0, sd: 7.0 }),
            ("sigma", Prior::HalfNormal { sd: 6.0 }),
            ("n", Prior::HalfNormal { sd: 3000.0 }),
            ("nu", Prior::HalfNormal { sd: 3000.0 }),
            ("w", Prior::Dirichlet { alpha: 1.0 }),
            ("rate", Prior::HalfNormal { sd: 6.0 }),
            ("lambda", Prior::Normal { mean: 0.0, sd: 2.0 }),
            ("l1", Prior::Normal { mean: 5.0, sd: 7.0 }),
            ("l2", Prior::HalfNormal { sd: 6.0 }),
            ("l3", Prior::HalfNormal { sd: 2.0 }),
            ("l4", Prior::HalfNormal { sd: 2.0 }),
            ("a1", Prior::Normal { mean: 5.0, sd: 7.0 }),
            ("a2", Prior::HalfNormal { sd: 6.0 }),
            ("a3", Prior::Normal { mean: 0.0, sd: 7.0 }),
        ];
        Self {
            priors: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl PriorSpec {
    pub fn get(&self, block: &str) -> Result<&Prior> {
        self.priors
            .get(block)
            .ok_or_else(|| Error::Lookup(format!("no prior for parameter `{block}`")))
    }

    pub fn set(&mut self, block: impl Into<String>, prior: Prior) -> Result<()> {
        prior.validate()?;
        self.priors.insert(block.into(), prior);
        Ok(())
    }

    /// Defaults overridden by every `key = prior(...)` entry of `kv`.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut spec = Self::default();
        for key in kv.keys() {
            spec.set(key, kv.require(key)?.parse()?)?;
        }
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        for (k, v) in &self.priors {
            kv.insert(k.clone(), v);
        }
        kv
    }
}

/// Support constraint of a parameter block, which decides the unconstrained
/// reparameterization used by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Real,
    Positive,
    /// Nonnegative entries summing to 1.
    Simplex,
    /// Strictly increasing reals (mixture means, to pin the component labels).
    Ordered,
    /// Metalog `a3 > −4·a2`, where `a2` is the preceding block.
    MetalogSlope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub len: usize,
    pub constraint: Constraint,
}

impl ParamBlock {
    pub fn scalar(name: &str, constraint: Constraint) -> Self {
        Self {
            name: name.to_string(),
            len: 1,
            constraint,
        }
    }
}

/// Which likelihood, which family, whether `n` is known, and the priors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub family: Family,
    /// Mixture component count; ignored for other families.
    pub components: usize,
    pub n_known: bool,
    pub priors: PriorSpec,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, family: Family) -> Self {
        Self {
            kind,
            family,
            components: if family == Family::NormalMixture { 2 } else { 1 },
            n_known: false,
            priors: PriorSpec::default(),
        }
    }

    pub fn mixture(kind: ModelKind, components: usize) -> Self {
        Self {
            components,
            ..Self::new(kind, Family::NormalMixture)
        }
    }

    pub fn with_n_known(mut self, known: bool) -> Self {
        self.n_known = known;
        self
    }

    /// Short label such as `qgp_pit-n` used in study output.
    pub fn label(&self) -> String {
        let mut s = self.kind.name().to_string();
        if self.family == Family::NormalMixture {
            s.push_str(&format!("-c{}", self.components));
        }
        if self.n_known && self.kind.uses_n() {
            s.push_str("-n");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameters(m));
        if self.family == Family::NormalMixture && self.components == 0 {
            return bad("mixture models need at least one component".into());
        }
        match self.kind {
            ModelKind::QgpNormal if self.family != Family::Normal => {
                bad(format!("qgp_normal requires the normal family, got {}", self.family))
            }
            ModelKind::QgpQf if self.family == Family::NormalMixture => {
                bad("qgp_qf requires a family with an analytic quantile function".into())
            }
            _ => Ok(()),
        }
    }

    /// Parameter blocks in vector order: distribution parameters, then `n`
    /// (QGP/ORD with unknown n) or `nu = 1/σ_ρ` (IND).
    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut blocks = family_layout(self.family, self.components);
        match self.kind {
            ModelKind::Ind => blocks.push(ParamBlock::scalar("nu", Constraint::Positive)),
            _ if !self.n_known => blocks.push(ParamBlock::scalar("n", Constraint::Positive)),
            _ => {}
        }
        blocks
    }

    pub fn param_names(&self) -> Vec<String> {
        block_names(&self.layout(), self.family)
    }

    pub fn dim(&self) -> usize {
        self.layout().iter().map(|b| b.len).sum()
    }

    /// Number of leading entries of the parameter vector describing `F_θ`.
    pub fn dist_dim(&self) -> usize {
        let extra = if self.kind == ModelKind::Ind || !self.n_known { 1 } else { 0 };
        self.dim() - extra
    }

    /// The distribution `F_θ` encoded by the leading entries of `params`.
    pub fn distribution(&self, params: &[f64]) -> Result<ModelDistribution> {
        build_distribution(self.family, self.components, &params[..self.dist_dim()])
    }

    /// Inverse of [`Self::distribution`] for the distribution part.
    pub fn dist_params(&self, dist: &ModelDistribution) -> Vec<f64> {
        match dist {
            ModelDistribution::Spec(s) => s.params(),
            ModelDistribution::Scaled(ls) => {
                let mut v = vec![ls.loc, ls.scale];
                v.extend(ls.base.params());
                v
            }
        }
    }

    /// Sample size implied by `params` (or by the data when `n` is known).
    pub fn sample_size(&self, params: &[f64], qs: &QuantileSet) -> Result<f64> {
        if self.n_known {
            qs.sample_size()
                .map(|n| n as f64)
                .ok_or_else(|| Error::Precondition("model assumes known n but the data carry none".into()))
        } else {
            Ok(params[self.dim() - 1])
        }
    }

    pub fn log_prior(&self, params: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut at = 0;
        for b in self.layout() {
            let Ok(prior) = self.priors.get(&b.name) else {
                return f64::NEG_INFINITY;
            };
            acc += prior.ln_pdf_block(&params[at..at + b.len]);
            at += b.len;
        }
        acc
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("model", self.kind);
        kv.insert("family", self.family);
        if self.family == Family::NormalMixture {
            kv.insert("components", self.components);
        }
        kv.insert("n_known", self.n_known);
        kv.extend_prefixed("prior", &self.priors.to_kv());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let kind: ModelKind = kv.require("model")?.parse()?;
        let family: Family = kv.require("family")?.parse()?;
        let mut spec = Self::new(kind, family);
        if let Some(c) = kv.opt::<usize>("components")? {
            spec.components = c;
        }
        spec.n_known = kv.opt::<bool>("n_known")?.unwrap_or(false);
        spec.priors = PriorSpec::from_kv(&kv.section("prior"))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Parameter blocks describing `F_θ` for a family. Tukey lambda carries a
/// location and scale in front of its shape.
pub fn family_layout(family: Family, components: usize) -> Vec<ParamBlock> {
    use Constraint::*;
    match family {
        Family::Normal | Family::Logistic | Family::ExtremeValue | Family::Laplace => vec![
            ParamBlock::scalar("mu", Real),
            ParamBlock::scalar("sigma", Positive),
        ],
        Family::Exponential => vec![ParamBlock::scalar("rate", Positive)],
        Family::TukeyLambda => vec![
            ParamBlock::scalar("mu", Real),
            ParamBlock::scalar("sigma", Positive),
            ParamBlock::scalar("lambda", Real),
        ],
        // restricted to the l3, l4 >= 0 region
        Family::GeneralizedLambda => vec![
            ParamBlock::scalar("l1", Real),
            ParamBlock::scalar("l2", Positive),
            ParamBlock::scalar("l3", Positive),
            ParamBlock::scalar("l4", Positive),
        ],
        Family::Metalog3 => vec![
            ParamBlock::scalar("a1", Real),
            ParamBlock::scalar("a2", Positive),
            ParamBlock::scalar("a3", MetalogSlope),
        ],
        Family::NormalMixture => vec![
            ParamBlock { name: "w".into(), len: components, constraint: Simplex },
            ParamBlock { name: "mu".into(), len: components, constraint: Ordered },
            ParamBlock { name: "sigma".into(), len: components, constraint: Positive },
        ],
    }
}

/// Flat parameter names; mixture blocks are indexed `mu[1]`, `mu[2]`, ...
pub fn block_names(blocks: &[ParamBlock], family: Family) -> Vec<String> {
    let mut names = Vec::new();
    for b in blocks {
        let indexed = family == Family::NormalMixture && !matches!(b.name.as_str(), "n" | "nu");
        if indexed {
            names.extend((1..=b.len).map(|c| format!("{}[{c}]", b.name)));
        } else {
            names.push(b.name.clone());
        }
    }
    names
}

/// Build `F_θ` from the family parameter vector laid out by [`family_layout`].
pub fn build_distribution(family: Family, components: usize, params: &[f64]) -> Result<ModelDistribution> {
    match family {
        Family::TukeyLambda => {
            if params.len() != 3 {
                return Err(Error::InvalidParameters(format!(
                    "tukey_lambda model expects (mu, sigma, lambda), got {} values",
                    params.len()
                )));
            }
            let base = DistributionSpec::tukey_lambda(params[2])?;
            Ok(ModelDistribution::Scaled(LocationScale::new(base, params[0], params[1])?))
        }
        fam => Ok(ModelDistribution::Spec(DistributionSpec::from_params(fam, components, params)?)),
    }
}

/// A fitted parametric distribution: a [`DistributionSpec`] or, for the Tukey
/// lambda family, its location-scale extension.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelDistribution {
    Spec(DistributionSpec),
    Scaled(LocationScale<DistributionSpec>),
}

impl ModelDistribution {
    fn inner(&self) -> &dyn ContinuousDistribution {
        match self {
            ModelDistribution::Spec(s) => s,
            ModelDistribution::Scaled(s) => s,
        }
    }
}

impl ContinuousDistribution for ModelDistribution {
    fn cdf(&self, x: f64) -> Result<f64> {
        self.inner().cdf(x)
    }
    fn sf(&self, x: f64) -> Result<f64> {
        self.inner().sf(x)
    }
    fn pdf(&self, x: f64) -> Result<f64> {
        self.inner().pdf(x)
    }
    fn ln_pdf(&self, x: f64) -> Result<f64> {
        self.inner().ln_pdf(x)
    }
    fn quantile(&self, p: f64) -> Result<f64> {
        self.inner().quantile(p)
    }
    fn qdf(&self, p: f64) -> Result<f64> {
        self.inner().qdf(p)
    }
}

/// `Ψ_ij = (p_i∧p_j − p_i p_j)/(φ(Φ⁻¹(p_i)) φ(Φ⁻¹(p_j)))`.
pub fn psi_matrix(grid: &ProbabilityGrid) -> DMatrix<f64> {
    let q: Vec<f64> = grid.probs().iter().map(|&p| 1.0 / norm_pdf(norm_ppf(p))).collect();
    let gamma = brownian_bridge_cov(grid);
    DMatrix::from_fn(q.len(), q.len(), |i, j| gamma[(i, j)] * (q[i] * q[j]))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Grid-dependent factorizations shared by every evaluation on one data set.
#[derive(Debug, Clone)]
pub struct GridCache {
    gamma: CholeskyFactor,
    psi: CholeskyFactor,
    z: Vec<f64>,
}

impl GridCache {
    pub fn new(grid: &ProbabilityGrid) -> Result<Self> {
        Ok(Self {
            gamma: CholeskyFactor::new(&brownian_bridge_cov(grid))?,
            psi: CholeskyFactor::new(&psi_matrix(grid))?,
            z: grid.probs().iter().map(|&p| norm_ppf(p)).collect(),
        })
    }

    pub fn qgp_normal(&self, mu: f64, sigma: f64, n: f64, y: &[f64]) -> Result<f64> {
        check_positive("sigma", sigma)?;
        check_positive("n", n)?;
        let k = y.len() as f64;
        let r: Vec<f64> = y.iter().zip(&self.z).map(|(v, z)| v - mu - sigma * z).collect();
        let scale = sigma * sigma / n;
        Ok(-k * LN_SQRT_2PI
            - 0.5 * (k * scale.ln() + self.psi.log_det())
            - 0.5 * self.psi.mahalanobis(&r) / scale)
    }

    pub fn qgp_qf(&self, dist: &dyn ContinuousDistribution, n: f64, qs: &QuantileSet) -> Result<f64> {
        check_positive("n", n)?;
        let k = qs.len();
        let mut z = Vec::with_capacity(k);
        let mut log_q = 0.0;
        for (&p, &y) in qs.probs().iter().zip(qs.values()) {
            let q = dist.qdf(p)?;
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::Numeric(format!("quantile density {q} at p = {p}")));
            }
            z.push((y - dist.quantile(p)?) / q);
            log_q += q.ln();
        }
        let kf = k as f64;
        Ok(-kf * LN_SQRT_2PI
            - 0.5 * (-kf * n.ln() + 2.0 * log_q + self.gamma.log_det())
            - 0.5 * n * self.gamma.mahalanobis(&z))
    }

    pub fn qgp_pit(&self, dist: &dyn ContinuousDistribution, n: f64, qs: &QuantileSet) -> Result<f64> {
        check_positive("n", n)?;
        let u = pit_values(dist, qs)?;
        let r: Vec<f64> = u.iter().zip(qs.probs()).map(|(u, p)| u - p).collect();
        let k = qs.len() as f64;
        Ok(-k * LN_SQRT_2PI
            - 0.5 * (-k * n.ln() + self.gamma.log_det())
            - 0.5 * n * self.gamma.mahalanobis(&r))
    }
}

fn pit_values(dist: &dyn ContinuousDistribution, qs: &QuantileSet) -> Result<Vec<f64>> {
    crate::empirical::pit_transform(dist, qs)
}

/// Multivariate normal log density of the normal QGP.
pub fn loglik_qgp_normal(mu: f64, sigma: f64, n: f64, qs: &QuantileSet) -> Result<f64> {
    check_positive("sigma", sigma)?;
    GridCache::new(qs.grid())?.qgp_normal(mu, sigma, n, qs.values())
}

/// PIT-form QGP log density.
pub fn loglik_qgp_pit(dist: &dyn ContinuousDistribution, n: f64, qs: &QuantileSet) -> Result<f64> {
    GridCache::new(qs.grid())?.qgp_pit(dist, n, qs)
}

/// QF-form QGP log density; touches only the quantile and quantile-density
/// functions of `dist`.
pub fn loglik_qgp_qf(dist: &dyn ContinuousDistribution, n: f64, qs: &QuantileSet) -> Result<f64> {
    GridCache::new(qs.grid())?.qgp_qf(dist, n, qs)
}

/// Independent-normal PIT model.
pub fn loglik_ind(dist: &dyn ContinuousDistribution, sigma_rho: f64, qs: &QuantileSet) -> Result<f64> {
    check_positive("sigma_rho", sigma_rho)?;
    let u = pit_values(dist, qs)?;
    Ok(u.iter()
        .zip(qs.probs())
        .map(|(u, p)| norm_ln_pdf((u - p) / sigma_rho) - sigma_rho.ln())
        .sum())
}

/// Order-statistic indices `j_k = round(p_k (n − 1)) + 1`.
pub fn order_indices(probs: &[f64], n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    let j: Vec<u64> = probs
        .iter()
        .map(|&p| (p * (n - 1) as f64).round() as u64 + 1)
        .collect();
    if let Some(i) = j.windows(2).position(|w| w[0] >= w[1]) {
        return Err(Error::Precondition(format!(
            "levels {} and {} map to the same order statistic {} at n = {n}",
            probs[i],
            probs[i + 1],
            j[i]
        )));
    }
    Ok(j)
}

/// Log joint density of the order statistics `Y(j_1) < ... < Y(j_K)` of a
/// sample of size `n` from `dist`.
pub fn loglik_ord(dist: &dyn ContinuousDistribution, n: u64, qs: &QuantileSet) -> Result<f64> {
    let j = order_indices(qs.probs(), n)?;
    ord_with_indices(dist, n, &j, qs.values())
}

fn ord_with_indices(dist: &dyn ContinuousDistribution, n: u64, j: &[u64], y: &[f64]) -> Result<f64> {
    if let Some(i) = y.windows(2).position(|w| w[0] >= w[1]) {
        return Err(Error::Domain(format!(
            "order statistics must be strictly increasing; values {} and {} at positions {} and {}",
            y[i],
            y[i + 1],
            i,
            i + 1
        )));
    }
    let mut acc = ln_factorial(n);
    let (mut prev_j, mut prev_f) = (0u64, 0.0);
    for (&jk, &yk) in j.iter().zip(y) {
        let f = dist.cdf(yk)?;
        let gap = jk - prev_j - 1;
        if gap > 0 {
            acc += gap as f64 * (f - prev_f).ln() - ln_factorial(gap);
        }
        acc += dist.ln_pdf(yk)?;
        prev_j = jk;
        prev_f = f;
    }
    let last = *j.last().unwrap_or(&0);
    let gap = n - last;
    if gap > 0 {
        let s = dist.sf(*y.last().unwrap())?;
        acc += gap as f64 * s.ln() - ln_factorial(gap);
    }
    Ok(acc)
}

/// A model bound to one data set, with grid factorizations cached.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    spec: ModelSpec,
    qs: QuantileSet,
    cache: GridCache,
    known_n: Option<f64>,
    ord_known: Option<Vec<u64>>,
}

impl PreparedModel {
    pub fn new(spec: ModelSpec, qs: QuantileSet) -> Result<Self> {
        spec.validate()?;
        if qs.len() < 2 && spec.family == Family::NormalMixture {
            return Err(Error::Precondition("mixture fits need at least 2 quantiles".into()));
        }
        let known_n = if spec.n_known && spec.kind.uses_n() {
            Some(spec.sample_size(&[], &qs)?)
        } else {
            None
        };
        let mut ord_known = None;
        if spec.kind == ModelKind::Ord {
            if !qs.is_strictly_increasing() {
                return Err(Error::Domain("ORD requires strictly increasing quantile values".into()));
            }
            if let Some(n) = known_n {
                ord_known = Some(order_indices(qs.probs(), n as u64)?);
            }
        }
        let cache = GridCache::new(qs.grid())?;
        Ok(Self {
            spec,
            qs,
            cache,
            known_n,
            ord_known,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &QuantileSet {
        &self.qs
    }

    pub fn log_likelihood(&self, params: &[f64]) -> Result<f64> {
        let spec = &self.spec;
        if params.len() != spec.dim() {
            return Err(Error::Precondition(format!(
                "{} parameters for a {}-dimensional model",
                params.len(),
                spec.dim()
            )));
        }
        let last = params[params.len() - 1];
        let n = self.known_n.unwrap_or(last);
        match spec.kind {
            ModelKind::QgpNormal => self.cache.qgp_normal(params[0], params[1], n, self.qs.values()),
            ModelKind::QgpQf => self.cache.qgp_qf(&spec.distribution(params)?, n, &self.qs),
            ModelKind::QgpPit => self.cache.qgp_pit(&spec.distribution(params)?, n, &self.qs),
            ModelKind::Ind => loglik_ind(&spec.distribution(params)?, 1.0 / last, &self.qs),
            ModelKind::Ord => {
                let dist = spec.distribution(params)?;
                match &self.ord_known {
                    Some(j) => ord_with_indices(&dist, n as u64, j, self.qs.values()),
                    None => {
                        check_positive("n", n)?;
                        let n = n.round() as u64;
                        loglik_ord(&dist, n, &self.qs)
                    }
                }
            }
        }
    }

    pub fn log_prior(&self, params: &[f64]) -> f64 {
        self.spec.log_prior(params)
    }

    /// Unnormalized log posterior; any evaluation error maps to `−∞`.
    pub fn log_posterior(&self, params: &[f64]) -> f64 {
        let lp = self.log_prior(params);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match self.log_likelihood(params) {
            Ok(ll) if !ll.is_nan() => lp + ll,
            _ => f64::NEG_INFINITY,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::cdf_evaluations;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(p: &[f64]) -> ProbabilityGrid {
        ProbabilityGrid::new(p.to_vec()).unwrap()
    }

    /// Dense oracle: invert the covariance and take the determinant directly.
    fn dense_mvn(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
        let k = x.len();
        let r = nalgebra::DVector::from_iterator(k, x.iter().zip(mean).map(|(a, b)| a - b));
        let inv = cov.clone().try_inverse().unwrap();
        -0.5 * k as f64 * (2.0 * PI).ln() - 0.5 * cov.determinant().ln() - 0.5 * (r.transpose() * inv * &r)[(0, 0)]
    }

    fn normal_data() -> QuantileSet {
        let g = grid(&[0.1, 0.25, 0.5, 0.75, 0.9]);
        QuantileSet::new(g, vec![-0.9, 2.1, 4.3, 6.0, 8.8], Some(200)).unwrap()
    }

    #[test]
    fn psi_examples() {
        assert_abs_diff_eq!(psi_matrix(&grid(&[0.5]))[(0, 0)], PI / 2.0, epsilon = 1e-12);
        let p = psi_matrix(&grid(&[0.25, 0.75]));
        let z = 0.674_489_750_196_081_7_f64;
        let oracle = 2.0 * PI * 0.0625 / (-z * z).exp();
        assert_abs_diff_eq!(p[(0, 1)], oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(0, 1)], 0.6190, epsilon = 1e-4);
        let g = ProbabilityGrid::flusight();
        let k = crate::empirical::qclt_cov(&DistributionSpec::normal(0.0, 1.0).unwrap(), &g).unwrap();
        let psi = psi_matrix(&g);
        for (a, b) in psi.iter().zip(k.iter()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn qgp_normal_examples() {
        let qs = QuantileSet::new(grid(&[0.5]), vec![3.0], None).unwrap();
        let (sigma, n) = (2.0, 50.0);
        let expect = -0.5 * (2.0 * PI * sigma * sigma * (PI / 2.0) / n).ln();
        assert_abs_diff_eq!(loglik_qgp_normal(3.0, sigma, n, &qs).unwrap(), expect, epsilon = 1e-12);
        assert!(loglik_qgp_normal(3.0, -1.0, n, &qs).is_err());
        assert!(loglik_qgp_normal(3.0, 0.0, n, &qs).is_err());
    }

    #[test]
    fn qgp_normal_matches_dense_oracle() {
        let qs = normal_data();
        let psi = psi_matrix(qs.grid());
        let oracle = |mu: f64, sigma: f64, n: f64| {
            let mean: Vec<f64> = qs.probs().iter().map(|&p| mu + sigma * norm_ppf(p)).collect();
            dense_mvn(qs.values(), &mean, &(psi.clone() * (sigma * sigma / n)))
        };
        let a = loglik_qgp_normal(4.0, 3.5, 200.0, &qs).unwrap();
        let b = loglik_qgp_normal(3.7, 3.2, 90.0, &qs).unwrap();
        assert_abs_diff_eq!(a - b, oracle(4.0, 3.5, 200.0) - oracle(3.7, 3.2, 90.0), epsilon = 1e-9);
        assert_abs_diff_eq!(a, oracle(4.0, 3.5, 200.0), epsilon = 1e-9);
    }

    #[test]
    fn qgp_qf_normal_agrees_with_qgp_normal() {
        let qs = normal_data();
        for &(mu, sigma, n) in &[(4.0, 3.5, 200.0), (0.0, 1.0, 5.0), (5.5, 0.7, 1e4)] {
            let d = DistributionSpec::normal(mu, sigma).unwrap();
            let a = loglik_qgp_qf(&d, n, &qs).unwrap();
            let b = loglik_qgp_normal(mu, sigma, n, &qs).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn qgp_qf_tukey_exact_quantiles_and_dense_oracle() {
        let g = ProbabilityGrid::flusight();
        let base = DistributionSpec::tukey_lambda(0.14).unwrap();
        let d = LocationScale::new(base.clone(), 0.0, 1.0).unwrap();
        let qs = QuantileSet::from_distribution(&d, &g, Some(1000)).unwrap();
        let gamma = brownian_bridge_cov(&g);
        let oracle = |dist: &dyn ContinuousDistribution, n: f64| {
            let q: Vec<f64> = g.probs().iter().map(|&p| dist.qdf(p).unwrap()).collect();
            let cov = DMatrix::from_fn(q.len(), q.len(), |i, j| gamma[(i, j)] * q[i] * q[j] / n);
            let mean: Vec<f64> = g.probs().iter().map(|&p| dist.quantile(p).unwrap()).collect();
            dense_mvn(qs.values(), &mean, &cov)
        };
        // zero residual: only the normalizing term remains
        let q: Vec<f64> = g.probs().iter().map(|&p| base.qdf(p).unwrap()).collect();
        let cov = DMatrix::from_fn(23, 23, |i, j| gamma[(i, j)] * q[i] * q[j] / 1000.0);
        let norm_only = -11.5 * (2.0 * PI).ln() - 0.5 * cov.determinant().ln();
        let before = cdf_evaluations();
        let at_truth = loglik_qgp_qf(&d, 1000.0, &qs).unwrap();
        assert_eq!(cdf_evaluations(), before);
        assert_abs_diff_eq!(at_truth, norm_only, epsilon = 1e-6 * norm_only.abs());
        let other = LocationScale::new(DistributionSpec::tukey_lambda(0.2).unwrap(), 0.05, 1.1).unwrap();
        let diff = at_truth - loglik_qgp_qf(&other, 700.0, &qs).unwrap();
        let odiff = oracle(&d, 1000.0) - oracle(&other, 700.0);
        assert!((diff - odiff).abs() < 1e-9 * odiff.abs().max(1.0), "{diff} vs {odiff}");
    }

    #[test]
    fn qgp_pit_examples() {
        let d = DistributionSpec::logistic(1.0, 2.0).unwrap();
        let qs = QuantileSet::new(grid(&[0.5]), vec![1.0], None).unwrap();
        let n = 40.0;
        assert_abs_diff_eq!(
            loglik_qgp_pit(&d, n, &qs).unwrap(),
            -0.5 * (2.0 * PI * 0.25 / n).ln(),
            epsilon = 1e-12
        );
        let a = DistributionSpec::normal_mixture(vec![0.35, 0.65], vec![-1.0, 1.2], vec![0.9, 0.6]).unwrap();
        let b = DistributionSpec::normal_mixture(vec![0.65, 0.35], vec![1.2, -1.0], vec![0.6, 0.9]).unwrap();
        let qs = QuantileSet::from_distribution(&a, &ProbabilityGrid::flusight(), None).unwrap();
        let qs = QuantileSet::new(
            qs.grid().clone(),
            qs.values().iter().enumerate().map(|(i, v)| v + 0.01 * (i as f64).sin()).collect(),
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(
            loglik_qgp_pit(&a, 1000.0, &qs).unwrap(),
            loglik_qgp_pit(&b, 1000.0, &qs).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn qgp_pit_truth_is_local_max() {
        let g = ProbabilityGrid::flusight();
        let truth = DistributionSpec::laplace(0.3, 1.4).unwrap();
        let qs = QuantileSet::from_distribution(&truth, &g, None).unwrap();
        let at = |mu: f64, s: f64| {
            loglik_qgp_pit(&DistributionSpec::laplace(mu, s).unwrap(), 500.0, &qs).unwrap()
        };
        let best = at(0.3, 1.4);
        for dm in [-0.01, 0.0, 0.01] {
            for ds in [-0.01, 0.0, 0.01] {
                if dm != 0.0 || ds != 0.0 {
                    assert!(at(0.3 + dm, 1.4 + ds) < best);
                }
            }
        }
    }

    #[test]
    fn ind_examples() {
        let d = DistributionSpec::extreme_value(0.0, 1.0).unwrap();
        let g = ProbabilityGrid::uniform(9).unwrap();
        let qs = QuantileSet::from_distribution(&d, &g, None).unwrap();
        let s = 0.02;
        assert_abs_diff_eq!(
            loglik_ind(&d, s, &qs).unwrap(),
            -4.5 * (2.0 * PI * s * s).ln(),
            epsilon = 1e-9
        );
        let shifted = DistributionSpec::extreme_value(0.1, 1.2).unwrap();
        let hand: f64 = qs
            .values()
            .iter()
            .zip(g.probs())
            .map(|(&y, &p)| {
                let u = (-(-(y - 0.1) / 1.2f64).exp()).exp();
                -0.5 * ((u - p) / s).powi(2) - (s * (2.0 * PI).sqrt()).ln()
            })
            .sum();
        assert_abs_diff_eq!(loglik_ind(&shifted, s, &qs).unwrap(), hand, epsilon = 1e-12 * hand.abs());
    }

    #[test]
    fn ord_examples() {
        let n01 = DistributionSpec::normal(0.0, 1.0).unwrap();
        let qs = QuantileSet::new(grid(&[0.5]), vec![0.0], Some(3)).unwrap();
        let expect = (6.0 * 0.25 * norm_pdf(0.0)).ln();
        assert_abs_diff_eq!(loglik_ord(&n01, 3, &qs).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, -0.51348, epsilon = 1e-5);

        let qs = QuantileSet::new(grid(&[1.0 / 3.0, 2.0 / 3.0]), vec![-0.4, 0.7], Some(2)).unwrap();
        let expect = (2.0 * norm_pdf(-0.4) * norm_pdf(0.7)).ln();
        assert_abs_diff_eq!(loglik_ord(&n01, 2, &qs).unwrap(), expect, epsilon = 1e-12);

        // K = n: full sample
        let g = grid(&[0.1, 0.3, 0.5, 0.7, 0.9]);
        let ys = vec![-1.0, -0.2, 0.1, 0.5, 1.9];
        let qs = QuantileSet::new(g, ys.clone(), Some(5)).unwrap();
        let full = ln_factorial(5) + ys.iter().map(|&y| norm_ln_pdf(y)).sum::<f64>();
        assert_abs_diff_eq!(loglik_ord(&n01, 5, &qs).unwrap(), full, epsilon = 1e-12);
    }

    #[test]
    fn ord_rejects_bad_inputs() {
        let n01 = DistributionSpec::normal(0.0, 1.0).unwrap();
        let qs = QuantileSet::new(grid(&[0.4, 0.45]), vec![0.0, 0.1], None).unwrap();
        assert!(matches!(loglik_ord(&n01, 3, &qs), Err(Error::Precondition(_))));
        let tied = QuantileSet::new(grid(&[0.25, 0.75]), vec![0.5, 0.5], None).unwrap();
        assert!(matches!(loglik_ord(&n01, 100, &tied), Err(Error::Domain(_))));
    }

    #[test]
    fn prior_examples() {
        let p = Prior::Normal { mean: 5.0, sd: 7.0 };
        assert_abs_diff_eq!(p.ln_pdf(5.0), -(7.0 * (2.0 * PI).sqrt()).ln(), epsilon = 1e-12);
        assert_eq!(Prior::HalfNormal { sd: 6.0 }.ln_pdf(-1.0), f64::NEG_INFINITY);
        let d = Prior::Dirichlet { alpha: 1.0 };
        assert_abs_diff_eq!(d.ln_pdf_block(&[0.1, 0.2, 0.3, 0.4]), 6f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.ln_pdf_block(&[0.7, 0.1, 0.1, 0.1]), 6f64.ln(), epsilon = 1e-12);
        let hn = Prior::HalfNormal { sd: 6.0 };
        let hand = 2f64.ln() - 0.5 / 36.0 - (6.0 * (2.0 * PI).sqrt()).ln();
        assert_abs_diff_eq!(hn.ln_pdf(1.0), hand, epsilon = 1e-12);
        assert_eq!("half_normal(3000)".parse::<Prior>().unwrap(), Prior::HalfNormal { sd: 3000.0 });
        assert!("normal(0,-1)".parse::<Prior>().is_err());
    }

    #[test]
    fn layouts_and_names() {
        let m = ModelSpec::mixture(ModelKind::QgpPit, 2);
        assert_eq!(
            m.param_names(),
            vec!["w[1]", "w[2]", "mu[1]", "mu[2]", "sigma[1]", "sigma[2]", "n"]
        );
        let m = ModelSpec::new(ModelKind::Ind, Family::Normal).with_n_known(true);
        assert_eq!(m.param_names(), vec!["mu", "sigma", "nu"]);
        let m = ModelSpec::new(ModelKind::QgpQf, Family::TukeyLambda).with_n_known(true);
        assert_eq!(m.param_names(), vec!["mu", "sigma", "lambda"]);
        assert!(ModelSpec::new(ModelKind::QgpNormal, Family::Logistic).validate().is_err());
        assert!(ModelSpec::mixture(ModelKind::QgpQf, 2).validate().is_err());
    }

    #[test]
    fn model_spec_kv_round_trip() {
        let mut m = ModelSpec::mixture(ModelKind::QgpPit, 4).with_n_known(true);
        m.priors.set("mu", Prior::Normal { mean: 0.0, sd: 3.0 }).unwrap();
        let back = ModelSpec::from_kv(&KvMap::parse(&m.to_kv().to_config_string()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn prepared_model_matches_free_functions() {
        let qs = normal_data();
        let cases = [
            (ModelKind::QgpNormal, vec![4.0, 3.5, 150.0]),
            (ModelKind::QgpPit, vec![4.0, 3.5, 150.0]),
            (ModelKind::QgpQf, vec![4.0, 3.5, 150.0]),
            (ModelKind::Ind, vec![4.0, 3.5, 50.0]),
            (ModelKind::Ord, vec![4.0, 3.5, 150.2]),
        ];
        let d = DistributionSpec::normal(4.0, 3.5).unwrap();
        for (kind, params) in cases {
            let pm = PreparedModel::new(ModelSpec::new(kind, Family::Normal), qs.clone()).unwrap();
            let got = pm.log_likelihood(&params).unwrap();
            let expect = match kind {
                ModelKind::QgpNormal => loglik_qgp_normal(4.0, 3.5, 150.0, &qs).unwrap(),
                ModelKind::QgpPit => loglik_qgp_pit(&d, 150.0, &qs).unwrap(),
                ModelKind::QgpQf => loglik_qgp_qf(&d, 150.0, &qs).unwrap(),
                ModelKind::Ind => loglik_ind(&d, 1.0 / 50.0, &qs).unwrap(),
                ModelKind::Ord => loglik_ord(&d, 150, &qs).unwrap(),
            };
            assert_abs_diff_eq!(got, expect, epsilon = 1e-12 * expect.abs().max(1.0));
            let lp = pm.log_posterior(&params);
            assert_abs_diff_eq!(lp, got + pm.log_prior(&params), epsilon = 1e-9);
        }
        let known = PreparedModel::new(
            ModelSpec::new(ModelKind::Ord, Family::Normal).with_n_known(true),
            qs.clone(),
        )
        .unwrap();
        assert_abs_diff_eq!(
            known.log_likelihood(&[4.0, 3.5]).unwrap(),
            loglik_ord(&d, 200, &qs).unwrap(),
            epsilon = 1e-12
        );
    }

    proptest! {
        #[test]
        fn qgp_normal_location_scale_equivariance(
            a in 0.1f64..10.0, b in -20.0f64..20.0, mu in -3.0f64..3.0, sigma in 0.3f64..3.0, n in 10.0f64..5000.0
        ) {
            let qs = normal_data();
            let moved = QuantileSet::new(
                qs.grid().clone(),
                qs.values().iter().map(|y| a * y + b).collect(),
                None,
            ).unwrap();
            let lhs = loglik_qgp_normal(mu, sigma, n, &qs).unwrap();
            let rhs = loglik_qgp_normal(a * mu + b, a * sigma, n, &moved).unwrap() + 5.0 * a.ln();
            prop_assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0));
        }

        #[test]
        fn likelihoods_decrease_along_mean_ray(t1 in 0.01f64..1.0, dt in 0.01f64..1.0) {
            let g = ProbabilityGrid::flusight();
            let d = DistributionSpec::normal(4.0, 3.5).unwrap();
            let exact = QuantileSet::from_distribution(&d, &g, Some(1000)).unwrap();
            let shift = |t: f64| QuantileSet::new(g.clone(), exact.values().iter().map(|v| v + t).collect(), None).unwrap();
            let (a, b) = (shift(t1), shift(t1 + dt));
            prop_assert!(loglik_qgp_normal(4.0, 3.5, 1000.0, &a).unwrap() > loglik_qgp_normal(4.0, 3.5, 1000.0, &b).unwrap());
            prop_assert!(loglik_qgp_pit(&d, 1000.0, &a).unwrap() > loglik_qgp_pit(&d, 1000.0, &b).unwrap());
            prop_assert!(loglik_ind(&d, 0.01, &a).unwrap() > loglik_ind(&d, 0.01, &b).unwrap());
        }
    }
}
