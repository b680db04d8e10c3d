//! Posterior sampling, least-squares quantile fits and posterior summaries.
//!
//! The sampler is an adaptive random-walk Metropolis chain run in an
//! unconstrained reparameterization of the model parameters. During burn-in
//! the proposal covariance is re-estimated at the end of each (doubling)
//! adaptation window and the proposal scale follows a Robbins–Monro
//! recursion toward the target acceptance rate; both are frozen afterwards.

use std::io::Write;

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::distributions::{ContinuousDistribution, Family};
use crate::empirical::{sorted_quantile, QuantileSet, QuantileType};
use crate::error::{Error, Result};
use crate::likelihoods::{
    block_names, build_distribution, family_layout, Constraint, ModelSpec, ParamBlock, PreparedModel,
};
use crate::optimize::{nelder_mead, NelderMeadOptions};
use crate::special::{logistic, logit};

/// Map between constrained model parameters `θ` and unconstrained `y`.
#[derive(Debug, Clone)]
pub struct Transform {
    blocks: Vec<ParamBlock>,
    dim: usize,
    free_dim: usize,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Transform {
    pub fn new(blocks: &[ParamBlock]) -> Self {
        let dim = blocks.iter().map(|b| b.len).sum();
        let free_dim = blocks
            .iter()
            .map(|b| match b.constraint {
                Constraint::Simplex => b.len.saturating_sub(1),
                _ => b.len,
            })
            .sum();
        Self {
            blocks: blocks.to_vec(),
            dim,
            free_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn free_dim(&self) -> usize {
        self.free_dim
    }

    /// Write `θ(y)` into `theta` and return `ln |dθ/dy|`.
    pub fn forward(&self, y: &[f64], theta: &mut Vec<f64>) -> f64 {
        theta.clear();
        let mut log_j = 0.0;
        let mut at = 0;
        for b in &self.blocks {
            match b.constraint {
                Constraint::Real => {
                    theta.extend_from_slice(&y[at..at + b.len]);
                    at += b.len;
                }
                Constraint::Positive => {
                    for &v in &y[at..at + b.len] {
                        theta.push(v.exp());
                        log_j += v;
                    }
                    at += b.len;
                }
                Constraint::Simplex => {
                    let c = b.len;
                    let mut remaining = 1.0;
                    for k in 0..c.saturating_sub(1) {
                        let x = y[at + k] - ((c - 1 - k) as f64).ln();
                        let z = logistic(x);
                        let w = remaining * z;
                        log_j += -softplus(-x) - softplus(x) + remaining.ln();
                        theta.push(w);
                        remaining -= w;
                    }
                    theta.push(remaining.max(0.0));
                    at += c.saturating_sub(1);
                }
                Constraint::Ordered => {
                    let mut prev = 0.0;
                    for k in 0..b.len {
                        let v = if k == 0 {
                            y[at]
                        } else {
                            log_j += y[at + k];
                            prev + y[at + k].exp()
                        };
                        theta.push(v);
                        prev = v;
                    }
                    at += b.len;
                }
                Constraint::MetalogSlope => {
                    let a2 = *theta.last().unwrap_or(&1.0);
                    theta.push(a2 * (y[at].exp() - 4.0));
                    log_j += a2.ln() + y[at];
                    at += 1;
                }
            }
        }
        log_j
    }

    /// `y(θ)`; fails if `θ` violates a constraint.
    pub fn inverse(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim {
            return Err(Error::Precondition(format!(
                "{} values for {} parameters",
                theta.len(),
                self.dim
            )));
        }
        let bad = |name: &str| Error::InvalidParameters(format!("initial value violates the `{name}` constraint"));
        let mut y = Vec::with_capacity(self.free_dim);
        let mut at = 0;
        for b in &self.blocks {
            let vals = &theta[at..at + b.len];
            match b.constraint {
                Constraint::Real => y.extend_from_slice(vals),
                Constraint::Positive => {
                    for &v in vals {
                        if !(v > 0.0) {
                            return Err(bad(&b.name));
                        }
                        y.push(v.ln());
                    }
                }
                Constraint::Simplex => {
                    let c = b.len;
                    let mut remaining = 1.0;
                    for (k, &w) in vals.iter().enumerate().take(c.saturating_sub(1)) {
                        let z = w / remaining;
                        if !(z > 0.0 && z < 1.0) {
                            return Err(bad(&b.name));
                        }
                        y.push(logit(z) + ((c - 1 - k) as f64).ln());
                        remaining -= w;
                    }
                }
                Constraint::Ordered => {
                    for k in 0..b.len {
                        if k == 0 {
                            y.push(vals[0]);
                        } else {
                            let gap = vals[k] - vals[k - 1];
                            if !(gap > 0.0) {
                                return Err(bad(&b.name));
                            }
                            y.push(gap.ln());
                        }
                    }
                }
                Constraint::MetalogSlope => {
                    let a2 = theta[at - 1];
                    let r = vals[0] / a2 + 4.0;
                    if !(r > 0.0) {
                        return Err(bad(&b.name));
                    }
                    y.push(r.ln());
                }
            }
            at += b.len;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub total_draws: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: usize,
    pub seed: u64,
    /// Length of the first adaptation window; later windows double.
    pub adapt_window: usize,
    /// Defaults to 0.234 above four free dimensions and 0.44 otherwise.
    pub target_accept: Option<f64>,
    pub init_retries: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            total_draws: 60_000,
            burn_in: 10_000,
            thin: 1,
            seed: 0,
            adapt_window: 100,
            target_accept: None,
            init_retries: 20,
        }
    }
}

impl McmcConfig {
    /// Run lengths used for mixture fits.
    pub fn mixture() -> Self {
        Self {
            total_draws: 80_000,
            burn_in: 20_000,
            ..Self::default()
        }
    }

    pub fn with_lengths(mut self, total: usize, burn_in: usize) -> Self {
        self.total_draws = total;
        self.burn_in = burn_in;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_draws == 0 || self.burn_in >= self.total_draws {
            return Err(Error::Precondition(format!(
                "need 0 <= burn_in < total_draws, got burn_in={} total={}",
                self.burn_in, self.total_draws
            )));
        }
        if self.thin == 0 || self.adapt_window == 0 {
            return Err(Error::Precondition("thin and adapt_window must be positive".into()));
        }
        if let Some(t) = self.target_accept {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Precondition(format!("target acceptance {t} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-parameter chain diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDiagnostics {
    /// Split-chain potential scale reduction over four segments.
    pub rhat: f64,
    /// Effective sample size by Geyer's initial positive sequence.
    pub ess: f64,
    /// The chain never moved (zero variance).
    pub degenerate: bool,
}

/// Retained posterior draws (rows) by parameter (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    names: Vec<String>,
    draws: Vec<f64>,
    acceptance_rate: f64,
    diagnostics: Vec<ParamDiagnostics>,
}

impl PosteriorSamples {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>, acceptance_rate: f64) -> Result<Self> {
        let ncol = names.len();
        if rows.is_empty() {
            return Err(Error::Precondition("posterior has no draws".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != ncol) {
            return Err(Error::Precondition(format!(
                "draw of length {} for {ncol} parameters",
                r.len()
            )));
        }
        let mut s = Self {
            names,
            draws: rows.into_iter().flatten().collect(),
            acceptance_rate,
            diagnostics: Vec::new(),
        };
        if s.len() >= 8 {
            s.diagnostics = diagnostics(&s)?;
        }
        Ok(s)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.draws.len() / self.names.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance_rate
    }

    pub fn diagnostics(&self) -> &[ParamDiagnostics] {
        &self.diagnostics
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.names.len();
        &self.draws[i * c..(i + 1) * c]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))
    }

    pub fn column_at(&self, j: usize) -> Vec<f64> {
        let c = self.names.len();
        self.draws.iter().skip(j).step_by(c).copied().collect()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.column_at(self.index_of(name)?))
    }

    /// Marginal posterior means in parameter order.
    pub fn means(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.names.len())
            .map(|j| self.column_at(j).iter().sum::<f64>() / n)
            .collect()
    }

    pub fn mean(&self, name: &str) -> Result<f64> {
        let col = self.column(name)?;
        Ok(col.iter().sum::<f64>() / col.len() as f64)
    }

    pub fn credible_interval(&self, name: &str, level: f64) -> Result<(f64, f64)> {
        credible_interval(self, name, level)
    }

    /// One column per parameter, one row per retained draw.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.names)?;
        for i in 0..self.len() {
            out.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Sidecar summary: mean, sd, 90% interval, median, R̂ and ESS per parameter.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["param", "mean", "sd", "q05", "q50", "q95", "rhat", "ess", "acceptance"])?;
        for (j, name) in self.names.iter().enumerate() {
            let mut col = self.column_at(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            col.sort_by(f64::total_cmp);
            let q = |p| sorted_quantile(&col, p, QuantileType::Type7);
            let (rhat, ess) = self
                .diagnostics
                .get(j)
                .map_or((f64::NAN, f64::NAN), |d| (d.rhat, d.ess));
            out.write_record([
                name.clone(),
                mean.to_string(),
                sd.to_string(),
                q(0.05).to_string(),
                q(0.5).to_string(),
                q(0.95).to_string(),
                rhat.to_string(),
                ess.to_string(),
                self.acceptance_rate.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Equal-tailed interval at `((1 − level)/2, 1 − (1 − level)/2)`.
pub fn credible_interval(samples: &PosteriorSamples, name: &str, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Precondition(format!("credible level {level} outside (0, 1)")));
    }
    let mut col = samples.column(name)?;
    col.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok((
        sorted_quantile(&col, a, QuantileType::Type7),
        sorted_quantile(&col, 1.0 - a, QuantileType::Type7),
    ))
}

/// Split-R̂ over four segments and ESS for every parameter.
pub fn diagnostics(samples: &PosteriorSamples) -> Result<Vec<ParamDiagnostics>> {
    if samples.len() < 8 {
        return Err(Error::Precondition(format!(
            "diagnostics need at least 8 draws (4 segments of 2), got {}",
            samples.len()
        )));
    }
    Ok((0..samples.names().len())
        .map(|j| chain_diagnostics(&samples.column_at(j)))
        .collect())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub(crate) fn chain_diagnostics(x: &[f64]) -> ParamDiagnostics {
    let (_, total_var) = mean_var(x);
    if !(total_var > 0.0) {
        return ParamDiagnostics {
            rhat: f64::NAN,
            ess: 0.0,
            degenerate: true,
        };
    }
    let m = 4;
    let seg = x.len() / m;
    let start = x.len() - seg * m;
    let stats: Vec<(f64, f64)> = (0..m)
        .map(|i| mean_var(&x[start + i * seg..start + (i + 1) * seg]))
        .collect();
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m as f64;
    let n = seg as f64;
    let b = n / (m - 1) as f64 * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    let rhat = if w > 0.0 {
        (((n - 1.0) / n * w + b / n) / w).sqrt()
    } else {
        f64::INFINITY
    };
    ParamDiagnostics {
        rhat,
        ess: geyer_ess(x),
        degenerate: false,
    }
}

/// Effective sample size from the initial monotone positive sequence of
/// autocorrelation pair sums.
fn geyer_ess(x: &[f64]) -> f64 {
    let n = x.len();
    let acov = autocovariance(x);
    let c0 = acov[0];
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (acov[lag] + acov[lag + 1]) / c0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / (n as f64).log10().max(1.0));
    n as f64 / tau
}

/// Biased (divide by n) autocovariance at every lag, via zero-padded FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(len, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for z in &mut buf {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf[..n].iter().map(|z| z.re / (len * n) as f64).collect()
}

/// Run the adaptive Metropolis chain on an arbitrary log density over the
/// constrained parameters described by `blocks`.
pub fn sample_density<F: Fn(&[f64]) -> f64>(
    blocks: &[ParamBlock],
    names: Vec<String>,
    log_density: F,
    init: &[f64],
    cfg: &McmcConfig,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let tr = Transform::new(blocks);
    let d = tr.free_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = Vec::with_capacity(tr.dim());
    let target = |y: &[f64], theta: &mut Vec<f64>| {
        let lj = tr.forward(y, theta);
        let ld = log_density(theta);
        if ld.is_finite() && lj.is_finite() {
            ld + lj
        } else {
            f64::NEG_INFINITY
        }
    };

    let y0 = tr.inverse(init)?;
    let mut y = y0.clone();
    let mut cur = target(&y, &mut theta);
    let mut retry = 0;
    while !cur.is_finite() {
        if retry >= cfg.init_retries {
            return Err(Error::Initialization(format!(
                "log density not finite at the initial point or any of {} jittered restarts; \
                 the data may be incompatible with the model",
                cfg.init_retries
            )));
        }
        retry += 1;
        let sd = 0.1 * retry as f64;
        for (yi, y0i) in y.iter_mut().zip(&y0) {
            let z: f64 = rng.sample(StandardNormal);
            *yi = y0i + sd * z;
        }
        cur = target(&y, &mut theta);
    }
    let mut cur_theta = theta.clone();

    let target_accept = cfg
        .target_accept
        .unwrap_or(if d > 4 { 0.234 } else { 0.44 });
    let base_log_scale = (2.38 / (d.max(1) as f64).sqrt()).ln();
    let mut log_scale = base_log_scale;
    let mut chol = DMatrix::<f64>::identity(d, d) * 0.1;

    let mut window_len = cfg.adapt_window;
    let mut window_start = 0usize;
    let mut acc_n = 0usize;
    let mut acc_mean = vec![0.0; d];
    let mut acc_m2 = DMatrix::<f64>::zeros(d, d);

    let kept = (cfg.total_draws - cfg.burn_in).div_ceil(cfg.thin);
    let mut rows = Vec::with_capacity(kept);
    let mut accepted_after = 0usize;
    let mut z = vec![0.0; d];
    let mut prop = vec![0.0; d];
    let mut delta = vec![0.0; d];

    for iter in 0..cfg.total_draws {
        if d > 0 {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let s = log_scale.exp();
            for i in 0..d {
                let mut step = 0.0;
                for j in 0..=i {
                    step += chol[(i, j)] * z[j];
                }
                prop[i] = y[i] + s * step;
            }
            let cand = target(&prop, &mut theta);
            let log_alpha = cand - cur;
            let alpha = if log_alpha >= 0.0 { 1.0 } else { log_alpha.exp() };
            let u: f64 = rng.sample(Open01);
            if u.ln() < log_alpha {
                y.copy_from_slice(&prop);
                cur = cand;
                std::mem::swap(&mut cur_theta, &mut theta);
                if iter >= cfg.burn_in {
                    accepted_after += 1;
                }
            }

            if iter < cfg.burn_in {
                let t = (iter - window_start + 1) as f64;
                log_scale += (alpha - target_accept) * t.powf(-0.6);
                log_scale = log_scale.clamp(base_log_scale - 12.0, base_log_scale + 5.0);

                acc_n += 1;
                for i in 0..d {
                    delta[i] = y[i] - acc_mean[i];
                    acc_mean[i] += delta[i] / acc_n as f64;
                }
                for i in 0..d {
                    for j in 0..=i {
                        acc_m2[(i, j)] += delta[i] * (y[j] - acc_mean[j]);
                    }
                }
                let window_end = iter + 1 == window_start + window_len;
                if window_end || iter + 1 == cfg.burn_in {
                    if acc_n > d + 1 {
                        let n = acc_n as f64;
                        let cov = DMatrix::from_fn(d, d, |i, j| {
                            let m2 = if i >= j { acc_m2[(i, j)] } else { acc_m2[(j, i)] };
                            let v = m2 / (n - 1.0) * n / (n + 5.0);
                            if i == j {
                                v + 1e-3 * 5.0 / (n + 5.0)
                            } else {
                                v
                            }
                        });
                        if let Some(c) = cov.cholesky() {
                            chol = c.unpack();
                            log_scale = base_log_scale;
                        }
                    }
                    window_start = iter + 1;
                    let remaining = cfg.burn_in - window_start;
                    window_len *= 2;
                    // fold a short tail into the current final window
                    if remaining < 2 * window_len {
                        window_len = remaining.max(1);
                    }
                    acc_n = 0;
                    acc_mean.iter_mut().for_each(|v| *v = 0.0);
                    acc_m2.fill(0.0);
                }
            }
        }
        if iter >= cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0 {
            rows.push(cur_theta.clone());
        }
    }
    let post = cfg.total_draws - cfg.burn_in;
    PosteriorSamples::new(names, rows, accepted_after as f64 / post as f64)
}

/// Result of a least-squares quantile fit.
#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub params: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    /// `false` when the simplex search hit its evaluation cap.
    pub converged: bool,
}

fn ls_objective(family: Family, components: usize, qs: &QuantileSet, theta: &[f64]) -> f64 {
    let Ok(dist) = build_distribution(family, components, theta) else {
        return f64::INFINITY;
    };
    let mut acc = 0.0;
    for (&p, &q) in qs.probs().iter().zip(qs.values()) {
        match dist.quantile(p) {
            Ok(v) => acc += (v - q).powi(2),
            Err(_) => return f64::INFINITY,
        }
    }
    acc
}

/// Minimize `Σ_k (Q_θ(p_k) − q̂_k)²` by Nelder–Mead in the unconstrained
/// parameterization. For mixtures the component count is `init.len() / 3`.
pub fn fit_least_squares(family: Family, qs: &QuantileSet, init: &[f64]) -> Result<LeastSquaresFit> {
    let components = if family == Family::NormalMixture { init.len() / 3 } else { 1 };
    let blocks = family_layout(family, components);
    let tr = Transform::new(&blocks);
    let y0 = tr.inverse(init)?;
    let initial_objective = ls_objective(family, components, qs, init);
    let mut theta = Vec::new();
    let mut objective = |y: &[f64]| {
        tr.forward(y, &mut theta);
        ls_objective(family, components, qs, &theta)
    };
    let opts = NelderMeadOptions {
        max_evals: 2000 * (tr.free_dim() + 1),
        ..Default::default()
    };
    let min = nelder_mead(&mut objective, &y0, opts);
    let mut params = Vec::new();
    tr.forward(&min.x, &mut params);
    let (params, objective) = if min.value <= initial_objective {
        (params, min.value)
    } else {
        (init.to_vec(), initial_objective)
    };
    if !min.converged {
        log::warn!("least-squares fit of {family} stopped at the evaluation cap");
    }
    Ok(LeastSquaresFit {
        params,
        objective,
        initial_objective,
        converged: min.converged,
    })
}

fn interp_quantile(qs: &QuantileSet, p: f64) -> f64 {
    let (ps, vs) = (qs.probs(), qs.values());
    if p <= ps[0] {
        return vs[0];
    }
    for k in 1..ps.len() {
        if p <= ps[k] {
            let t = (p - ps[k - 1]) / (ps[k] - ps[k - 1]);
            return vs[k - 1] + t * (vs[k] - vs[k - 1]);
        }
    }
    vs[vs.len() - 1]
}

/// Heuristic starting point for the family parameters, read off the data.
pub fn initial_guess(family: Family, components: usize, qs: &QuantileSet) -> Vec<f64> {
    let (ps, vs) = (qs.probs(), qs.values());
    let k = vs.len();
    let median = interp_quantile(qs, 0.5);
    let spread = (vs[k - 1] - vs[0]).max(1e-6 * (1.0 + median.abs()));
    // spread of a standard member across the grid's outer levels
    let std_spread = |q0: &dyn Fn(f64) -> f64| {
        let s = if k > 1 { q0(ps[k - 1]) - q0(ps[0]) } else { 0.0 };
        if s > 0.0 {
            spread / s
        } else {
            spread.max(1.0)
        }
    };
    match family {
        Family::Normal | Family::Logistic | Family::ExtremeValue | Family::Laplace => {
            let std = crate::distributions::DistributionSpec::standard(family).expect("location-scale");
            let scale = std_spread(&|p| std.quantile(p).unwrap_or(0.0));
            let loc = median - scale * std.quantile(0.5).unwrap_or(0.0);
            vec![loc, scale]
        }
        Family::Exponential => {
            let m = if median > 0.0 { median } else { spread };
            vec![std::f64::consts::LN_2 / m]
        }
        Family::TukeyLambda => vec![median, std_spread(&logit), 0.1],
        Family::GeneralizedLambda => {
            let l = 0.1;
            let s = std_spread(&|p: f64| p.powf(l) - (1.0 - p).powf(l));
            vec![median, 1.0 / s, l, l]
        }
        Family::Metalog3 => vec![median, std_spread(&logit), 0.0],
        Family::NormalMixture => {
            let c = components.max(1);
            let mut means: Vec<f64> = (0..c)
                .map(|i| interp_quantile(qs, (i as f64 + 0.5) / c as f64))
                .collect();
            let min_gap = 1e-3 * spread;
            for i in 1..c {
                if means[i] - means[i - 1] < min_gap {
                    means[i] = means[i - 1] + min_gap;
                }
            }
            let sd = spread / (2.0 * c as f64).max(2.0);
            let mut v = vec![1.0 / c as f64; c];
            v.extend(means);
            v.extend(std::iter::repeat(sd).take(c));
            v
        }
    }
}

/// Starting point for a full model: least-squares family parameters (spread
/// heuristics for mixtures), then `n = 100` or `ν = 100`.
pub fn initial_point(model: &ModelSpec, qs: &QuantileSet) -> Vec<f64> {
    let guess = initial_guess(model.family, model.components, qs);
    let mut theta = if model.family == Family::NormalMixture {
        guess
    } else {
        match fit_least_squares(model.family, qs, &guess) {
            Ok(fit) if fit.objective.is_finite() => fit.params,
            _ => guess,
        }
    };
    if model.dim() > theta.len() {
        theta.push(100.0);
    }
    theta
}

/// Fit `model` to `qs` by adaptive Metropolis. The chain starts from the
/// posterior mode found by a Nelder–Mead search seeded at [`initial_point`].
pub fn fit_mcmc(model: &ModelSpec, qs: &QuantileSet, cfg: &McmcConfig) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let prepared = PreparedModel::new(model.clone(), qs.clone())?;
    let blocks = model.layout();
    let names = block_names(&blocks, model.family);
    let init = initial_point(model, qs);
    let tr = Transform::new(&blocks);
    let start = match tr.inverse(&init) {
        Ok(y0) => {
            let mut theta = Vec::new();
            let mut neg = |y: &[f64]| {
                let lj = tr.forward(y, &mut theta);
                -(prepared.log_posterior(&theta) + lj)
            };
            if neg(&y0).is_finite() {
                let opts = NelderMeadOptions {
                    max_evals: 300 * (tr.free_dim() + 1),
                    f_tol: 1e-10,
                    x_tol: 1e-6,
                    ..Default::default()
                };
                let m = nelder_mead(&mut neg, &y0, opts);
                let mut t = Vec::new();
                tr.forward(&m.x, &mut t);
                t
            } else {
                init
            }
        }
        Err(_) => init,
    };
    sample_density(&blocks, names, |th| prepared.log_posterior(th), &start, cfg)
}

/// `count` draws from the posterior predictive: pick a retained draw
/// uniformly, then draw from `F_θ` by inversion.
pub fn posterior_predictive(
    samples: &PosteriorSamples,
    model: &ModelSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Precondition("predictive sample count must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::Precondition("posterior has no draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists = (0..samples.len())
        .map(|i| model.distribution(samples.row(i)))
        .collect::<Result<Vec<_>>>()?;
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..dists.len());
            let u: f64 = rng.sample(Open01);
            dists[i].quantile(u)
        })
        .collect()
}
