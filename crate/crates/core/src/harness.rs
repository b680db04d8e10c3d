//! Simulation studies, hub scoring and fit-fidelity checks.
//!
//! A study draws `replicates` samples of each size from a known truth,
//! reduces each to `k` sample quantiles, fits every method and records
//! parameter coverage and distances to the truth. Replicate `r` at sample
//! size index `i` uses ChaCha stream `(i << 32) | r` of the study seed, so
//! any replicate can be rerun on its own and results do not depend on the
//! thread count.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distributions::{ContinuousDistribution, DistributionSpec, Family};
use crate::empirical::{sample_quantiles, ProbabilityGrid, QuantileSet};
use crate::error::{Error, Result};
use crate::hub_io::{log_scale, preprocess, ForecastKey, HubForecast, TruthSeries};
use crate::inference::{fit_mcmc, posterior_predictive, McmcConfig, PosteriorSamples};
use crate::kv::KvMap;
use crate::likelihoods::{ModelKind, ModelSpec, PriorSpec};
use crate::metrics::{crps_sample, kld_mc, total_variation, uwd1, wis_breakdown, ScoreRecord};
use crate::nonparametric::{kde_fit, spl_fit, MatchedDistribution, TailFamily};

/// How a method turns quantiles into a distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Fit {
    Model(ModelSpec),
    Spl(TailFamily),
    Kde(Option<f64>),
}

/// A named fitting method.
#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub label: String,
    pub fit: Fit,
}

fn qgp_kind(family: Family) -> ModelKind {
    if family == Family::Normal {
        ModelKind::QgpNormal
    } else if family.is_quantile_defined() {
        ModelKind::QgpQf
    } else {
        ModelKind::QgpPit
    }
}

impl Method {
    /// Parse a method token. Model tokens are `qgp`, `qgp_pit`, `qgp_qf`,
    /// `qgp_normal`, `ord` or `ind`, with a `-n` suffix for known sample
    /// size; `qgp` picks the QGP form suited to `family`. Nonparametric
    /// tokens are `spl`, `spl-exp` and `kde`.
    pub fn parse(token: &str, family: Family, components: usize, priors: &PriorSpec) -> Result<Self> {
        let token = token.trim().to_ascii_lowercase();
        let fit = match token.as_str() {
            "spl" => Fit::Spl(TailFamily::NormalTails),
            "spl-exp" => Fit::Spl(TailFamily::ExponentialTails),
            "kde" => Fit::Kde(None),
            _ => {
                let (base, n_known) = match token.strip_suffix("-n") {
                    Some(b) => (b, true),
                    None => (token.as_str(), false),
                };
                let kind = if base == "qgp" { qgp_kind(family) } else { base.parse()? };
                let mut spec = if family == Family::NormalMixture {
                    ModelSpec::mixture(kind, components)
                } else {
                    ModelSpec::new(kind, family)
                };
                spec.n_known = n_known;
                spec.priors = priors.clone();
                spec.validate()?;
                Fit::Model(spec)
            }
        };
        let label = if family == Family::NormalMixture && matches!(fit, Fit::Model(_)) {
            format!("{token}-c{components}")
        } else {
            token
        };
        Ok(Self { label, fit })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

/// Result of fitting one method to one quantile set.
#[derive(Debug, Clone)]
pub enum Fitted {
    Posterior { model: ModelSpec, samples: PosteriorSamples },
    Matched(MatchedDistribution),
}

impl Fitted {
    /// Plug-in distribution: posterior-mean parameters for Bayesian fits.
    pub fn point_distribution(&self) -> Result<Box<dyn ContinuousDistribution>> {
        match self {
            Fitted::Posterior { model, samples } => Ok(Box::new(model.distribution(&samples.means())?)),
            Fitted::Matched(m) => Ok(Box::new(m.clone())),
        }
    }

    /// Draws from the posterior predictive, or from the matched distribution.
    pub fn predictive(&self, count: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            Fitted::Posterior { model, samples } => posterior_predictive(samples, model, count, seed),
            Fitted::Matched(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                m.sample_with(count, &mut rng)
            }
        }
    }

    /// Fitted quantiles at `probs`; posterior means of `Q_θ(p)` for Bayesian
    /// fits, using at most 1000 evenly spaced draws.
    pub fn quantiles(&self, probs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Fitted::Posterior { model, samples } => {
                let step = samples.len().div_ceil(1000).max(1);
                let rows: Vec<usize> = (0..samples.len()).step_by(step).collect();
                let mut acc = vec![0.0; probs.len()];
                for &i in &rows {
                    let d = model.distribution(samples.row(i))?;
                    for (a, &p) in acc.iter_mut().zip(probs) {
                        *a += d.quantile(p)?;
                    }
                }
                Ok(acc.into_iter().map(|a| a / rows.len() as f64).collect())
            }
            Fitted::Matched(m) => probs.iter().map(|&p| m.quantile(p)).collect(),
        }
    }
}

pub fn fit_method(method: &Method, qs: &QuantileSet, mcmc: &McmcConfig) -> Result<Fitted> {
    match &method.fit {
        Fit::Model(spec) => Ok(Fitted::Posterior {
            model: spec.clone(),
            samples: fit_mcmc(spec, qs, mcmc)?,
        }),
        Fit::Spl(tails) => Ok(Fitted::Matched(spl_fit(qs, *tails)?)),
        Fit::Kde(h) => Ok(Fitted::Matched(kde_fit(qs, *h)?)),
    }
}

/// Mean absolute and mean squared difference between fitted and original
/// quantiles at the original levels.
pub fn fidelity_check(fit: &dyn ContinuousDistribution, original: &QuantileSet) -> Result<(f64, f64)> {
    let fitted = original
        .probs()
        .iter()
        .map(|&p| fit.quantile(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(fidelity_from_quantiles(&fitted, original.values()))
}

pub fn fidelity_from_quantiles(fitted: &[f64], original: &[f64]) -> (f64, f64) {
    let k = original.len() as f64;
    let (mut mae, mut mse) = (0.0, 0.0);
    for (a, b) in fitted.iter().zip(original) {
        mae += (a - b).abs();
        mse += (a - b).powi(2);
    }
    (mae / k, mse / k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyMetric {
    Coverage,
    Uwd1,
    Tv,
    Kld,
}

impl std::str::FromStr for StudyMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "coverage" => Ok(Self::Coverage),
            "uwd1" => Ok(Self::Uwd1),
            "tv" => Ok(Self::Tv),
            "kld" => Ok(Self::Kld),
            other => Err(Error::Format(format!("unknown study metric `{other}`"))),
        }
    }
}

/// Everything needed to run a simulation study.
#[derive(Debug, Clone)]
pub struct StudySpec {
    pub name: String,
    pub truth: DistributionSpec,
    pub sample_sizes: Vec<u64>,
    pub k: usize,
    pub replicates: usize,
    /// Method tokens, see [`Method::parse`].
    pub methods: Vec<String>,
    /// Family fitted by the model-based methods.
    pub fit_family: Family,
    pub components: usize,
    /// Mixture component counts for [`run_components_study`].
    pub component_counts: Vec<usize>,
    pub priors: PriorSpec,
    pub seed: u64,
    pub metrics: Vec<StudyMetric>,
    pub mcmc: McmcConfig,
    /// Chain settings for mixture fits.
    pub mixture_mcmc: McmcConfig,
    pub level: f64,
    pub predictive_draws: usize,
    pub kld_draws: usize,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl StudySpec {
    pub fn new(name: &str, truth: DistributionSpec) -> Self {
        let fit_family = truth.family();
        Self {
            name: name.to_string(),
            truth,
            sample_sizes: vec![1000],
            k: 23,
            replicates: 200,
            methods: vec!["qgp".into()],
            fit_family,
            components: 4,
            component_counts: Vec::new(),
            priors: PriorSpec::default(),
            seed: 1,
            metrics: vec![StudyMetric::Coverage, StudyMetric::Uwd1, StudyMetric::Tv, StudyMetric::Kld],
            mcmc: McmcConfig::default().with_lengths(20_000, 5_000),
            mixture_mcmc: McmcConfig::mixture(),
            level: 0.9,
            predictive_draws: 50_000,
            kld_draws: 20_000,
            threads: None,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Precondition("a study needs at least one replicate".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Precondition("a study needs at least one method".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n < 2) {
            return Err(Error::Precondition("sample sizes must be at least 2".into()));
        }
        if self.k == 0 {
            return Err(Error::Precondition("k must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Precondition(format!("credible level {} outside (0, 1)", self.level)));
        }
        if self.predictive_draws == 0 || self.kld_draws < 2 {
            return Err(Error::Precondition("predictive_draws and kld_draws must be positive".into()));
        }
        self.truth.validate()?;
        self.mcmc.validate()?;
        self.mixture_mcmc.validate()
    }

    /// Read a study from key-value text. Keys: `name`, `truth.*` (a
    /// distribution), `sample_sizes`, `k`, `replicates`, `methods`,
    /// `fit_family`, `components`, `component_counts`, `seed`, `metrics`,
    /// `draws`, `burn_in`, `thin`, `mixture_draws`, `mixture_burn_in`,
    /// `level`, `predictive_draws`, `kld_draws`, `threads`, `output_dir` and
    /// `prior.<block>`.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let truth = DistributionSpec::from_kv(&kv.section("truth"))?;
        let mut s = Self::new(kv.get("name").unwrap_or("study"), truth);
        if kv.get("sample_sizes").is_some() {
            s.sample_sizes = kv.list("sample_sizes")?.into_iter().map(|v| v as u64).collect();
        }
        if let Some(v) = kv.opt("k")? {
            s.k = v;
        }
        if let Some(v) = kv.opt("replicates")? {
            s.replicates = v;
        }
        if let Some(m) = kv.str_list("methods") {
            s.methods = m;
        }
        if let Some(f) = kv.opt::<Family>("fit_family")? {
            s.fit_family = f;
        }
        if let Some(v) = kv.opt("components")? {
            s.components = v;
        }
        if kv.get("component_counts").is_some() {
            s.component_counts = kv.list("component_counts")?.into_iter().map(|v| v as usize).collect();
        }
        if let Some(v) = kv.opt("seed")? {
            s.seed = v;
        }
        if let Some(m) = kv.str_list("metrics") {
            s.metrics = m.iter().map(|t| t.parse()).collect::<Result<_>>()?;
        }
        let draws = kv.opt("draws")?.unwrap_or(s.mcmc.total_draws);
        let burn = kv.opt("burn_in")?.unwrap_or(s.mcmc.burn_in);
        let thin = kv.opt("thin")?.unwrap_or(1);
        s.mcmc = s.mcmc.clone().with_lengths(draws, burn).with_thin(thin);
        let mdraws = kv.opt("mixture_draws")?.unwrap_or(s.mixture_mcmc.total_draws);
        let mburn = kv.opt("mixture_burn_in")?.unwrap_or(s.mixture_mcmc.burn_in);
        s.mixture_mcmc = s.mixture_mcmc.clone().with_lengths(mdraws, mburn).with_thin(thin);
        s.level = kv.f64_or("level", s.level)?;
        if let Some(v) = kv.opt("predictive_draws")? {
            s.predictive_draws = v;
        }
        if let Some(v) = kv.opt("kld_draws")? {
            s.kld_draws = v;
        }
        s.threads = kv.opt("threads")?;
        s.output_dir = kv.get("output_dir").map(PathBuf::from);
        let prior_kv = kv.section("prior");
        if !prior_kv.is_empty() {
            let mut priors = PriorSpec::default();
            for key in prior_kv.keys() {
                priors.set(key, prior_kv.require(key)?.parse()?)?;
            }
            s.priors = priors;
        }
        s.validate()?;
        Ok(s)
    }

    fn resolved_methods(&self, components: Option<&[usize]>) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for token in &self.methods {
            match components {
                Some(counts) => {
                    for &c in counts {
                        out.push(Method::parse(token, Family::NormalMixture, c, &self.priors)?);
                    }
                }
                None => out.push(Method::parse(token, self.fit_family, self.components, &self.priors)?),
            }
        }
        Ok(out)
    }
}

/// Posterior summary of one parameter with the true value when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub name: String,
    pub truth: Option<f64>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ParamEstimate {
    pub fn covered(&self) -> Option<bool> {
        self.truth.map(|t| self.lower <= t && t <= self.upper)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub method: String,
    pub n: u64,
    pub k: usize,
    pub replicate: usize,
    pub params: Vec<ParamEstimate>,
    pub uwd1: Option<f64>,
    pub tv: Option<f64>,
    pub kld: Option<f64>,
    pub acceptance: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub method: String,
    pub n: u64,
    pub replicate: usize,
    pub error: String,
}

/// One aggregate statistic for a (method, n) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub n: u64,
    pub k: usize,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub name: String,
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<FailureRecord>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

impl StudyResult {
    /// Cells in order of first appearance.
    fn cells(&self) -> Vec<(String, u64, usize)> {
        let mut cells: Vec<(String, u64, usize)> = Vec::new();
        for r in &self.records {
            if !cells.iter().any(|c| c.0 == r.method && c.1 == r.n) {
                cells.push((r.method.clone(), r.n, r.k));
            }
        }
        for f in &self.failures {
            if !cells.iter().any(|c| c.0 == f.method && c.1 == f.n) {
                cells.push((f.method.clone(), f.n, 0));
            }
        }
        cells
    }

    /// Coverage rates, posterior means, distance means and failure counts per
    /// (method, n). Timings are left out so the table is reproducible.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut rows = Vec::new();
        for (method, n, k) in self.cells() {
            let recs: Vec<&ReplicateRecord> = self.records.iter().filter(|r| r.method == method && r.n == n).collect();
            let mut push = |metric: String, xs: &[f64]| {
                let (mean, se) = mean_se(xs);
                rows.push(AggregateRow {
                    method: method.clone(),
                    n,
                    k,
                    metric,
                    mean,
                    se,
                    count: xs.len(),
                });
            };
            let mut names: Vec<String> = Vec::new();
            for r in &recs {
                for p in &r.params {
                    if !names.contains(&p.name) {
                        names.push(p.name.clone());
                    }
                }
            }
            for name in &names {
                let est: Vec<&ParamEstimate> = recs.iter().flat_map(|r| r.params.iter().filter(|p| &p.name == name)).collect();
                let cov: Vec<f64> = est.iter().filter_map(|p| p.covered()).map(|c| if c { 1.0 } else { 0.0 }).collect();
                if !cov.is_empty() {
                    push(format!("coverage:{name}"), &cov);
                }
                let means: Vec<f64> = est.iter().map(|p| p.mean).collect();
                push(format!("mean:{name}"), &means);
            }
            for (label, get) in [
                ("uwd1", (|r: &ReplicateRecord| r.uwd1) as fn(&ReplicateRecord) -> Option<f64>),
                ("tv", |r| r.tv),
                ("kld", |r| r.kld),
            ] {
                let all: Vec<f64> = recs.iter().filter_map(|r| get(r)).collect();
                if all.is_empty() {
                    continue;
                }
                let finite: Vec<f64> = all.iter().copied().filter(|v| v.is_finite()).collect();
                push(label.to_string(), &finite);
                if finite.len() < all.len() {
                    let inf = (all.len() - finite.len()) as f64;
                    push(format!("{label}_infinite"), &[inf]);
                }
            }
            let failed = self.failures.iter().filter(|f| f.method == method && f.n == n).count();
            push("failures".into(), &[failed as f64]);
        }
        rows
    }

    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "n", "k", "metric", "mean", "se", "count"])?;
        for r in self.aggregate() {
            out.write_record([
                r.method.clone(),
                r.n.to_string(),
                r.k.to_string(),
                r.metric.clone(),
                r.mean.to_string(),
                r.se.to_string(),
                r.count.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long format, one row per (replicate, quantity), including fit times.
    pub fn write_replicates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "n", "k", "replicate", "quantity", "value"])?;
        for r in &self.records {
            let mut row = |q: String, v: String| {
                out.write_record([r.method.clone(), r.n.to_string(), r.k.to_string(), r.replicate.to_string(), q, v])
            };
            for p in &r.params {
                row(format!("mean:{}", p.name), p.mean.to_string())?;
                row(format!("lower:{}", p.name), p.lower.to_string())?;
                row(format!("upper:{}", p.name), p.upper.to_string())?;
                if let Some(c) = p.covered() {
                    row(format!("covered:{}", p.name), u8::from(c).to_string())?;
                }
            }
            for (q, v) in [("uwd1", r.uwd1), ("tv", r.tv), ("kld", r.kld), ("acceptance", r.acceptance)] {
                if let Some(v) = v {
                    row(q.to_string(), v.to_string())?;
                }
            }
            row("seconds".into(), format!("{:.6}", r.seconds))?;
        }
        for f in &self.failures {
            out.write_record([f.method.clone(), f.n.to_string(), String::new(), f.replicate.to_string(), "error".into(), f.error.clone()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Aggregates with 95% normal bands, ready for external plotting.
    pub fn write_plot_data_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["study", "method", "n", "k", "metric", "estimate", "lower", "upper"])?;
        for r in self.aggregate() {
            let half = if r.se.is_finite() { 1.96 * r.se } else { 0.0 };
            out.write_record([
                self.name.clone(),
                r.method.clone(),
                r.n.to_string(),
                r.k.to_string(),
                r.metric.clone(),
                r.mean.to_string(),
                (r.mean - half).to_string(),
                (r.mean + half).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Write `replicates.csv`, `aggregate.csv` and `plot_data.csv` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| std::fs::File::create(dir.join(name)).map(std::io::BufWriter::new);
        self.write_replicates_csv(create("replicates.csv")?)?;
        self.write_aggregate_csv(create("aggregate.csv")?)?;
        self.write_plot_data_csv(create("plot_data.csv")?)?;
        Ok(())
    }

    /// Mean of `metric` for `method` at sample size `n`.
    pub fn summary(&self, method: &str, n: u64, metric: &str) -> Option<AggregateRow> {
        self.aggregate()
            .into_iter()
            .find(|r| r.method == method && r.n == n && r.metric == metric)
    }
}

/// True values of the model's distribution parameters when the model family
/// can represent the truth exactly.
pub fn true_parameters(model: &ModelSpec, truth: &DistributionSpec) -> Option<Vec<f64>> {
    if model.family != truth.family() {
        return None;
    }
    match truth {
        DistributionSpec::TukeyLambda { lambda } => Some(vec![0.0, 1.0, *lambda]),
        DistributionSpec::NormalMixture(m) => {
            let sorted = m.means().windows(2).all(|w| w[0] < w[1]);
            (m.components() == model.components && sorted).then(|| truth.params())
        }
        _ => Some(truth.params()),
    }
}

struct Job {
    size_index: usize,
    n: u64,
    replicate: usize,
}

type ReplicateOutcome = Vec<std::result::Result<ReplicateRecord, FailureRecord>>;

fn run_replicate(spec: &StudySpec, methods: &[Method], grid: &ProbabilityGrid, job: &Job) -> ReplicateOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((job.size_index as u64) << 32) | job.replicate as u64);
    let fail = |method: &str, e: Error| FailureRecord {
        method: method.to_string(),
        n: job.n,
        replicate: job.replicate,
        error: e.to_string(),
    };
    let qs = match spec
        .truth
        .sample_with(job.n as usize, &mut rng)
        .and_then(|data| sample_quantiles(&data, grid))
    {
        Ok(q) => q,
        Err(e) => return methods.iter().map(|m| Err(fail(&m.label, e.clone()))).collect(),
    };
    let seeds: Vec<[u64; 3]> = methods
        .iter()
        .map(|_| [rng.next_u64(), rng.next_u64(), rng.next_u64()])
        .collect();
    methods
        .iter()
        .zip(seeds)
        .map(|(m, [fit_seed, pred_seed, kld_seed])| {
            evaluate_method(spec, m, &qs, job, fit_seed, pred_seed, kld_seed).map_err(|e| fail(&m.label, e))
        })
        .collect()
}

fn evaluate_method(
    spec: &StudySpec,
    method: &Method,
    qs: &QuantileSet,
    job: &Job,
    fit_seed: u64,
    pred_seed: u64,
    kld_seed: u64,
) -> Result<ReplicateRecord> {
    let wants = |m: StudyMetric| spec.metrics.contains(&m);
    let cfg = match &method.fit {
        Fit::Model(ms) if ms.family == Family::NormalMixture => spec.mixture_mcmc.clone(),
        _ => spec.mcmc.clone(),
    }
    .with_seed(fit_seed);
    let start = Instant::now();
    let fitted = fit_method(method, qs, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut params = Vec::new();
    let mut acceptance = None;
    if let Fitted::Posterior { model, samples } = &fitted {
        acceptance = Some(samples.acceptance_rate());
        let truth = if wants(StudyMetric::Coverage) {
            true_parameters(model, &spec.truth)
        } else {
            None
        };
        for (j, name) in samples.names().iter().enumerate().take(model.dist_dim()) {
            let (lower, upper) = samples.credible_interval(name, spec.level)?;
            let col = samples.column_at(j);
            params.push(ParamEstimate {
                name: name.clone(),
                truth: truth.as_ref().map(|t| t[j]),
                mean: col.iter().sum::<f64>() / col.len() as f64,
                lower,
                upper,
            });
        }
    }

    let uwd = if wants(StudyMetric::Uwd1) {
        let draws = fitted.predictive(spec.predictive_draws, pred_seed)?;
        let pit = draws.iter().map(|&x| spec.truth.cdf(x)).collect::<Result<Vec<_>>>()?;
        Some(uwd1(&pit)?)
    } else {
        None
    };
    let (tv, kld) = if wants(StudyMetric::Tv) || wants(StudyMetric::Kld) {
        let point = fitted.point_distribution()?;
        let tv = if wants(StudyMetric::Tv) {
            let support = (spec.truth.quantile(1e-4)?, spec.truth.quantile(1.0 - 1e-4)?);
            Some(total_variation(&spec.truth, point.as_ref(), support)?)
        } else {
            None
        };
        let kld = if wants(StudyMetric::Kld) {
            Some(kld_mc(&spec.truth, point.as_ref(), spec.kld_draws, kld_seed)?.value)
        } else {
            None
        };
        (tv, kld)
    } else {
        (None, None)
    };
    Ok(ReplicateRecord {
        method: method.label.clone(),
        n: job.n,
        k: qs.len(),
        replicate: job.replicate,
        params,
        uwd1: uwd,
        tv,
        kld,
        acceptance,
        seconds,
    })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Precondition(format!("cannot build a {t}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn run_with_methods(spec: &StudySpec, methods: &[Method]) -> Result<StudyResult> {
    spec.validate()?;
    let grid = ProbabilityGrid::for_study(spec.k)?;
    let jobs: Vec<Job> = spec
        .sample_sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..spec.replicates).map(move |r| Job { size_index: i, n, replicate: r }))
        .collect();
    let outcomes: Vec<ReplicateOutcome> =
        with_threads(spec.threads, || jobs.par_iter().map(|j| run_replicate(spec, methods, &grid, j)).collect())?;
    let mut result = StudyResult {
        name: spec.name.clone(),
        records: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes.into_iter().flatten() {
        match o {
            Ok(r) => result.records.push(r),
            Err(f) => {
                log::warn!("{} n={} replicate {} failed: {}", f.method, f.n, f.replicate, f.error);
                result.failures.push(f);
            }
        }
    }
    let attempted = result.records.len() + result.failures.len();
    if result.failures.len() * 10 > attempted {
        return Err(Error::Precondition(format!(
            "study `{}`: {} of {} fits failed (first: {})",
            spec.name,
            result.failures.len(),
            attempted,
            result.failures[0].error
        )));
    }
    Ok(result)
}

/// Run every method on every replicate at every sample size.
pub fn run_study(spec: &StudySpec) -> Result<StudyResult> {
    run_with_methods(spec, &spec.resolved_methods(None)?)
}

/// Fit normal mixtures with each of `spec.component_counts` components; the
/// method labels carry a `-c<C>` suffix.
pub fn run_components_study(spec: &StudySpec) -> Result<StudyResult> {
    if spec.component_counts.is_empty() || spec.component_counts.contains(&0) {
        return Err(Error::Precondition("component counts must be nonempty and positive".into()));
    }
    let methods = spec.resolved_methods(Some(&spec.component_counts))?;
    let result = run_with_methods(spec, &methods)?;
    for token in &spec.methods {
        let uwd = |c: usize| {
            let label = format!("{}-c{c}", token.to_ascii_lowercase());
            result.summary(&label, spec.sample_sizes[0], "uwd1").map(|r| r.mean)
        };
        if let (Some(a), Some(b)) = (uwd(4), uwd(5)) {
            log::info!("{token}: mean UWD1 with 4 components {a:.4}, with 5 components {b:.4}");
        }
    }
    Ok(result)
}

/// Settings for scoring hub forecasts.
#[derive(Debug, Clone)]
pub struct HubScoreConfig {
    pub mcmc: McmcConfig,
    pub predictive_draws: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for HubScoreConfig {
    fn default() -> Self {
        Self {
            mcmc: McmcConfig::mixture(),
            predictive_draws: 10_000,
            seed: 1,
            threads: None,
        }
    }
}

/// Score every forecast that has an observed truth with every method.
///
/// Score records plus the forecasts that were skipped, with reasons.
pub type HubScores = (Vec<ScoreRecord>, Vec<(ForecastKey, String)>);

/// WIS is computed on the submitted quantiles and CRPS on predictive draws
/// of the fit, both on the `ln(v + 1)` scale; MAE and MSE compare fitted and
/// preprocessed quantiles. Forecasts without truth or usable quantiles are
/// returned as skipped with the reason.
pub fn score_hub(
    forecasts: &[HubForecast],
    truth: &TruthSeries,
    methods: &[Method],
    cfg: &HubScoreConfig,
) -> Result<HubScores> {
    let outcomes: Vec<std::result::Result<Vec<ScoreRecord>, String>> = with_threads(cfg.threads, || {
        forecasts
            .par_iter()
            .enumerate()
            .map(|(i, f)| score_forecast(f, i, truth, methods, cfg).map_err(|e| e.to_string()))
            .collect()
    })?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (f, o) in forecasts.iter().zip(outcomes) {
        match o {
            Ok(r) => records.extend(r),
            Err(reason) => {
                log::warn!("skipping forecast {}: {reason}", f.key);
                skipped.push((f.key.clone(), reason));
            }
        }
    }
    Ok((records, skipped))
}

fn score_forecast(
    f: &HubForecast,
    index: usize,
    truth: &TruthSeries,
    methods: &[Method],
    cfg: &HubScoreConfig,
) -> Result<Vec<ScoreRecord>> {
    let observed = truth
        .get(&f.key.location, &f.key.target_end_date)
        .ok_or_else(|| Error::Lookup(format!("no truth for {} on {}", f.key.location, f.key.target_end_date)))?;
    let y = (observed as f64).ln_1p();
    let qs = preprocess(f)?;
    let (wis, intervals) = match log_scale(f).and_then(|q| wis_breakdown(&q, y)) {
        Ok(b) => (b.wis, b.alphas.into_iter().zip(b.interval_scores).collect()),
        Err(e) => {
            log::warn!("forecast {}: WIS unavailable: {e}", f.key);
            (f64::NAN, Vec::new())
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut out = Vec::new();
    for m in methods {
        let (fit_seed, pred_seed) = (rng.next_u64(), rng.next_u64());
        let fitted = match fit_method(m, &qs, &cfg.mcmc.clone().with_seed(fit_seed)) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("forecast {}: {} fit failed: {e}", f.key, m.label);
                continue;
            }
        };
        let draws = fitted.predictive(cfg.predictive_draws, pred_seed)?;
        let (mae, mse) = fidelity_from_quantiles(&fitted.quantiles(qs.probs())?, qs.values());
        out.push(ScoreRecord {
            key: f.key.fields(),
            method: m.label.clone(),
            wis,
            crps: crps_sample(&draws, y)?,
            mae,
            mse,
            intervals: intervals.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_truth() -> DistributionSpec {
        DistributionSpec::normal(4.0, 3.5).unwrap()
    }

    fn small_spec() -> StudySpec {
        let mut s = StudySpec::new("t", normal_truth());
        s.replicates = 3;
        s.sample_sizes = vec![200];
        s.methods = vec!["qgp-n".into(), "spl".into(), "kde".into()];
        s.mcmc = McmcConfig::default().with_lengths(2_000, 500);
        s.predictive_draws = 2_000;
        s.kld_draws = 2_000;
        s
    }

    #[test]
    fn method_tokens() {
        let p = PriorSpec::default();
        let m = Method::parse("qgp-n", Family::Normal, 1, &p).unwrap();
        assert!(matches!(&m.fit, Fit::Model(s) if s.kind == ModelKind::QgpNormal && s.n_known));
        let m = Method::parse("qgp", Family::TukeyLambda, 1, &p).unwrap();
        assert!(matches!(&m.fit, Fit::Model(s) if s.kind == ModelKind::QgpQf));
        let m = Method::parse("qgp", Family::NormalMixture, 4, &p).unwrap();
        assert_eq!(m.label, "qgp-c4");
        assert!(matches!(&m.fit, Fit::Model(s) if s.kind == ModelKind::QgpPit && s.components == 4));
        assert!(matches!(Method::parse("spl-exp", Family::Normal, 1, &p).unwrap().fit, Fit::Spl(TailFamily::ExponentialTails)));
        assert!(Method::parse("bogus", Family::Normal, 1, &p).is_err());
        assert!(Method::parse("qgp_normal", Family::Laplace, 1, &p).is_err());
    }

    #[test]
    fn fidelity_examples() {
        let g = ProbabilityGrid::flusight();
        let d = normal_truth();
        let qs = QuantileSet::from_distribution(&d, &g, None).unwrap();
        assert_eq!(fidelity_check(&d, &qs).unwrap(), (0.0, 0.0));
        let shifted = DistributionSpec::normal(4.5, 3.5).unwrap();
        let (mae, mse) = fidelity_check(&shifted, &qs).unwrap();
        assert!((mae - 0.5).abs() < 1e-12 && (mse - 0.25).abs() < 1e-12);
        let spl = spl_fit(&qs, TailFamily::NormalTails).unwrap();
        let (mae, mse) = fidelity_check(&spl, &qs).unwrap();
        assert!(mae < 1e-12 && mse < 1e-24);
    }

    #[test]
    fn study_is_deterministic_and_thread_independent() {
        let mut spec = small_spec();
        let a = run_study(&spec).unwrap();
        spec.threads = Some(2);
        let b = run_study(&spec).unwrap();
        let csv = |r: &StudyResult| {
            let mut buf = Vec::new();
            r.write_aggregate_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        assert_eq!(csv(&a), csv(&b));
        assert_eq!(a.records.len(), 9);
        let cov = a.summary("qgp-n", 200, "coverage:mu").unwrap();
        assert_eq!(cov.count, 3);
        assert!(a.summary("spl", 200, "coverage:mu").is_none());
        assert!(a.summary("kde", 200, "uwd1").unwrap().mean < 0.5);
    }

    #[test]
    fn replicate_is_reproducible_in_isolation() {
        let spec = small_spec();
        let methods = spec.resolved_methods(None).unwrap();
        let grid = ProbabilityGrid::for_study(spec.k).unwrap();
        let job = Job { size_index: 0, n: 200, replicate: 2 };
        let full = run_study(&spec).unwrap();
        let alone = run_replicate(&spec, &methods, &grid, &job);
        let from_full: Vec<&ReplicateRecord> = full.records.iter().filter(|r| r.replicate == 2).collect();
        for (a, b) in alone.iter().zip(from_full) {
            let a = a.as_ref().unwrap();
            assert_eq!(a.params, b.params);
            assert_eq!(a.uwd1, b.uwd1);
        }
    }

    #[test]
    fn study_preconditions() {
        let mut spec = small_spec();
        spec.replicates = 0;
        assert!(matches!(run_study(&spec), Err(Error::Precondition(_))));
        let mut spec = small_spec();
        spec.component_counts = vec![0, 1];
        assert!(run_components_study(&spec).is_err());
    }

    #[test]
    fn spec_from_kv() {
        let kv = KvMap::parse(
            "name = ev\ntruth.family = extreme_value\ntruth.mu = 0\ntruth.sigma = 1\nsample_sizes = [150, 1000]\n\
             methods = [qgp, spl]\nfit_family = normal_mixture\ncomponents = 3\nreplicates = 5\ndraws = 4000\nburn_in = 1000\n\
             metrics = [uwd1]\nprior.sigma = half_normal(2)\n",
        )
        .unwrap();
        let s = StudySpec::from_kv(&kv).unwrap();
        assert_eq!(s.sample_sizes, vec![150, 1000]);
        assert_eq!(s.fit_family, Family::NormalMixture);
        assert_eq!(s.mcmc.total_draws, 4000);
        assert_eq!(s.metrics, vec![StudyMetric::Uwd1]);
        let m = s.resolved_methods(None).unwrap();
        assert_eq!(m[0].label, "qgp-c3");
        let bad = KvMap::parse("truth.family = normal\ntruth.mu = 0\ntruth.sigma = 1\nreplicates = 0\n").unwrap();
        assert!(StudySpec::from_kv(&bad).is_err());
    }

    #[test]
    fn true_parameter_mapping() {
        let tl = DistributionSpec::tukey_lambda(0.14).unwrap();
        let m = ModelSpec::new(ModelKind::QgpQf, Family::TukeyLambda);
        assert_eq!(true_parameters(&m, &tl), Some(vec![0.0, 1.0, 0.14]));
        let m = ModelSpec::new(ModelKind::QgpPit, Family::Logistic);
        assert_eq!(true_parameters(&m, &normal_truth()), None);
    }
}
