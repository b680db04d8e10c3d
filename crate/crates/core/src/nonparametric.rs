//! Nonparametric quantile matching: a monotone cubic spline through the
//! (value, level) pairs with parametric tails, and a Gaussian kernel density
//! centred on the quantile values.

use std::fmt;
use std::str::FromStr;

use crate::distributions::{check_prob, ContinuousDistribution};
use crate::empirical::{sorted_quantile, QuantileSet, QuantileType};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::special::{norm_cdf, norm_pdf, norm_ppf};

/// Tail rule beyond the outermost knots of a spline fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailFamily {
    /// Normal tails through the two outermost pairs on each side.
    #[default]
    NormalTails,
    /// Log-linear CDF (lower) and survival function (upper) through the two
    /// outermost pairs on each side.
    ExponentialTails,
}

impl TailFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::NormalTails => "normal",
            Self::ExponentialTails => "exponential",
        }
    }
}

impl FromStr for TailFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "normal_tails" => Ok(Self::NormalTails),
            "exponential" | "exp" | "exponential_tails" => Ok(Self::ExponentialTails),
            other => Err(Error::Format(format!("unknown tail family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tail {
    /// `Φ((x − mu)/sigma)`
    Normal { mu: f64, sigma: f64 },
    /// Lower: `p₀·exp(rate·(x − x₀))`; upper: `1 − (1 − p₀)·exp(−rate·(x − x₀))`.
    Exponential { x0: f64, p0: f64, rate: f64 },
}

fn normal_tail(x1: f64, p1: f64, x2: f64, p2: f64) -> Tail {
    let (z1, z2) = (norm_ppf(p1), norm_ppf(p2));
    let sigma = (x2 - x1) / (z2 - z1);
    Tail::Normal { mu: x1 - sigma * z1, sigma }
}

/// Monotone piecewise-cubic Hermite CDF with Fritsch–Carlson tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCdf {
    x: Vec<f64>,
    p: Vec<f64>,
    slopes: Vec<f64>,
    tails: TailFamily,
    lower: Tail,
    upper: Tail,
}

impl SplineCdf {
    /// Interpolate strictly increasing knots `x` with strictly increasing
    /// levels `p` in (0, 1).
    pub fn new(x: Vec<f64>, p: Vec<f64>, tails: TailFamily) -> Result<Self> {
        let k = x.len();
        if k < 2 || p.len() != k {
            return Err(Error::Precondition(format!(
                "spline needs at least 2 distinct knots with matching levels, got {k} values and {} levels",
                p.len()
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || p.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Precondition("spline knots and levels must be strictly increasing".into()));
        }
        if !(p[0] > 0.0 && p[k - 1] < 1.0) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("spline levels must lie in (0, 1) and values be finite".into()));
        }
        let delta: Vec<f64> = (0..k - 1).map(|i| (p[i + 1] - p[i]) / (x[i + 1] - x[i])).collect();
        let mut m = vec![0.0; k];
        m[0] = delta[0];
        m[k - 1] = delta[k - 2];
        for i in 1..k - 1 {
            m[i] = 0.5 * (delta[i - 1] + delta[i]);
        }
        for i in 0..k - 1 {
            let (a, b) = (m[i] / delta[i], m[i + 1] / delta[i]);
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                m[i] = t * a * delta[i];
                m[i + 1] = t * b * delta[i];
            }
        }
        let (lower, upper) = match tails {
            TailFamily::NormalTails => (
                normal_tail(x[0], p[0], x[1], p[1]),
                normal_tail(x[k - 2], p[k - 2], x[k - 1], p[k - 1]),
            ),
            TailFamily::ExponentialTails => (
                Tail::Exponential {
                    x0: x[0],
                    p0: p[0],
                    rate: (p[1] / p[0]).ln() / (x[1] - x[0]),
                },
                Tail::Exponential {
                    x0: x[k - 1],
                    p0: p[k - 1],
                    rate: ((1.0 - p[k - 2]) / (1.0 - p[k - 1])).ln() / (x[k - 1] - x[k - 2]),
                },
            ),
        };
        Ok(Self {
            x,
            p,
            slopes: m,
            tails,
            lower,
            upper,
        })
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.p)
    }

    pub fn tails(&self) -> TailFamily {
        self.tails
    }

    fn segment(&self, x: f64) -> usize {
        self.x.partition_point(|&v| v <= x).saturating_sub(1).min(self.x.len() - 2)
    }

    fn hermite(&self, i: usize, x: f64) -> (f64, f64) {
        let h = self.x[i + 1] - self.x[i];
        let t = (x - self.x[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let (y0, y1, m0, m1) = (self.p[i], self.p[i + 1], self.slopes[i], self.slopes[i + 1]);
        let f = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * h * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * h * m1;
        let d = (6.0 * t2 - 6.0 * t) * (y0 - y1) / h + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (3.0 * t2 - 2.0 * t) * m1;
        (f, d.max(0.0))
    }

    fn cdf_pdf(&self, x: f64) -> (f64, f64) {
        let k = self.x.len();
        if x < self.x[0] {
            match self.lower {
                Tail::Normal { mu, sigma } => {
                    let z = (x - mu) / sigma;
                    (norm_cdf(z), norm_pdf(z) / sigma)
                }
                Tail::Exponential { x0, p0, rate } => {
                    let f = p0 * (rate * (x - x0)).exp();
                    (f, rate * f)
                }
            }
        } else if x > self.x[k - 1] {
            match self.upper {
                Tail::Normal { mu, sigma } => {
                    let z = (x - mu) / sigma;
                    (norm_cdf(z), norm_pdf(z) / sigma)
                }
                Tail::Exponential { x0, p0, rate } => {
                    let s = (1.0 - p0) * (-rate * (x - x0)).exp();
                    (1.0 - s, rate * s)
                }
            }
        } else if x == self.x[k - 1] {
            (self.p[k - 1], self.slopes[k - 1])
        } else {
            self.hermite(self.segment(x), x)
        }
    }
}

/// Gaussian kernel density with one bandwidth shared by all centres.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDensity {
    centers: Vec<f64>,
    bandwidth: f64,
}

impl KernelDensity {
    pub fn new(centers: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if centers.is_empty() || centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Precondition("kernel density needs finite centres".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Precondition(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { centers, bandwidth })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn cdf_pdf(&self, x: f64) -> (f64, f64) {
        let h = self.bandwidth;
        let n = self.centers.len() as f64;
        let (c, d) = self.centers.iter().fold((0.0, 0.0), |(c, d), m| {
            let z = (x - m) / h;
            (c + norm_cdf(z), d + norm_pdf(z))
        });
        (c / n, d / (n * h))
    }
}

/// Silverman's rule of thumb, `0.9·min(sd, IQR/1.34)·n^(−1/5)`, with R's
/// fallbacks when the spread estimate is zero.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = sorted_quantile(&sorted, 0.75, QuantileType::Type7) - sorted_quantile(&sorted, 0.25, QuantileType::Type7);
    let mut lo = sd.min(iqr / 1.34);
    if !(lo > 0.0) {
        lo = if sd > 0.0 {
            sd
        } else if sorted[0] != 0.0 {
            sorted[0].abs()
        } else {
            1.0
        };
    }
    0.9 * lo * n.powf(-0.2)
}

/// A distribution recovered from quantiles without a parametric model.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchedDistribution {
    Spl(SplineCdf),
    Kde(KernelDensity),
}

impl MatchedDistribution {
    pub fn method(&self) -> &'static str {
        match self {
            Self::Spl(_) => "spl",
            Self::Kde(_) => "kde",
        }
    }

    fn cdf_pdf(&self, x: f64) -> (f64, f64) {
        match self {
            Self::Spl(s) => s.cdf_pdf(x),
            Self::Kde(k) => k.cdf_pdf(x),
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("method", self.method());
        match self {
            Self::Spl(s) => {
                kv.insert("tails", s.tails.name());
                kv.insert_list("x", &s.x);
                kv.insert_list("p", &s.p);
            }
            Self::Kde(k) => {
                kv.insert("bandwidth", k.bandwidth);
                kv.insert_list("centers", &k.centers);
            }
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        match kv.require("method")? {
            "spl" => Ok(Self::Spl(SplineCdf::new(
                kv.list("x")?,
                kv.list("p")?,
                kv.opt::<TailFamily>("tails")?.unwrap_or_default(),
            )?)),
            "kde" => Ok(Self::Kde(KernelDensity::new(kv.list("centers")?, kv.f64("bandwidth")?)?)),
            other => Err(Error::Format(format!("unknown nonparametric method `{other}`"))),
        }
    }
}

impl fmt::Display for MatchedDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_kv())
    }
}

impl FromStr for MatchedDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(s)?)
    }
}

/// Safeguarded Newton solve of `F(x) = p` inside a bracket.
fn invert<F: Fn(f64) -> (f64, f64)>(f: F, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (c, d) = f(x);
        if c == p {
            return x;
        }
        if c < p {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - (c - p) / d;
        let next = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

impl ContinuousDistribution for MatchedDistribution {
    fn cdf(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::Domain("cdf at NaN".into()));
        }
        Ok(self.cdf_pdf(x).0.clamp(0.0, 1.0))
    }

    fn pdf(&self, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::Domain("pdf at NaN".into()));
        }
        Ok(self.cdf_pdf(x).1)
    }

    fn quantile(&self, p: f64) -> Result<f64> {
        check_prob(p)?;
        Ok(match self {
            Self::Spl(s) => {
                let k = s.x.len();
                if let Ok(i) = s.p.binary_search_by(|v| v.total_cmp(&p)) {
                    return Ok(s.x[i]);
                }
                if p < s.p[0] {
                    match s.lower {
                        Tail::Normal { mu, sigma } => mu + sigma * norm_ppf(p),
                        Tail::Exponential { x0, p0, rate } => x0 + (p / p0).ln() / rate,
                    }
                } else if p > s.p[k - 1] {
                    match s.upper {
                        Tail::Normal { mu, sigma } => mu + sigma * norm_ppf(p),
                        Tail::Exponential { x0, p0, rate } => x0 - ((1.0 - p) / (1.0 - p0)).ln() / rate,
                    }
                } else {
                    let i = s.p.partition_point(|&v| v < p) - 1;
                    invert(|x| s.hermite(i, x), p, s.x[i], s.x[i + 1])
                }
            }
            Self::Kde(kd) => {
                let h = kd.bandwidth;
                let (mut lo, mut hi) = kd
                    .centers
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| (a.min(c), b.max(c)));
                let z = norm_ppf(p).abs() + 1.0;
                lo -= z * h;
                hi += z * h;
                invert(|x| kd.cdf_pdf(x), p, lo, hi)
            }
        })
    }
}

/// Merge runs of equal values into one knot at their mean level.
fn collapse_ties(qs: &QuantileSet) -> (Vec<f64>, Vec<f64>) {
    let (ps, vs) = (qs.probs(), qs.values());
    let (mut x, mut p) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < vs.len() {
        let mut j = i + 1;
        while j < vs.len() && vs[j] == vs[i] {
            j += 1;
        }
        if j - i > 1 {
            log::warn!("{} quantiles share the value {}; collapsed to one knot", j - i, vs[i]);
        }
        x.push(vs[i]);
        p.push(ps[i..j].iter().sum::<f64>() / (j - i) as f64);
        i = j;
    }
    (x, p)
}

/// Monotone spline CDF through the quantile pairs, with parametric tails.
pub fn spl_fit(qs: &QuantileSet, tails: TailFamily) -> Result<MatchedDistribution> {
    let (x, p) = collapse_ties(qs);
    if x.len() < 2 {
        return Err(Error::Precondition(format!(
            "spline fit needs at least 2 distinct quantile values, got {}",
            x.len()
        )));
    }
    Ok(MatchedDistribution::Spl(SplineCdf::new(x, p, tails)?))
}

/// Gaussian kernel density treating the quantile values as a sample.
pub fn kde_fit(qs: &QuantileSet, bandwidth: Option<f64>) -> Result<MatchedDistribution> {
    if qs.len() < 2 {
        return Err(Error::Precondition(format!(
            "kernel density fit needs at least 2 quantiles, got {}",
            qs.len()
        )));
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(qs.values()));
    Ok(MatchedDistribution::Kde(KernelDensity::new(qs.values().to_vec(), h)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DistributionSpec;
    use crate::empirical::ProbabilityGrid;
    use crate::quadrature::{integrate_pieces, QuadOptions};
    use proptest::prelude::*;

    fn ev_quantiles() -> QuantileSet {
        let ev = DistributionSpec::extreme_value(0.0, 1.0).unwrap();
        QuantileSet::from_distribution(&ev, &ProbabilityGrid::flusight(), Some(1000)).unwrap()
    }

    fn pdf_mass(d: &MatchedDistribution, lo: f64, hi: f64) -> f64 {
        let mut pts: Vec<f64> = (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect();
        if let MatchedDistribution::Spl(s) = d {
            pts.extend_from_slice(&s.x);
            pts.sort_by(f64::total_cmp);
        }
        integrate_pieces(|x| d.pdf(x).unwrap(), &pts, QuadOptions::default()).unwrap().value
            + d.cdf(lo).unwrap()
            + (1.0 - d.cdf(hi).unwrap())
    }

    #[test]
    fn spl_interpolates_exactly() {
        let qs = ev_quantiles();
        for tails in [TailFamily::NormalTails, TailFamily::ExponentialTails] {
            let d = spl_fit(&qs, tails).unwrap();
            for (&p, &q) in qs.probs().iter().zip(qs.values()) {
                assert!((d.cdf(q).unwrap() - p).abs() <= 1e-12);
                assert!((d.quantile(p).unwrap() - q).abs() <= 1e-9);
            }
            assert!((pdf_mass(&d, -30.0, 40.0) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn spl_two_point_symmetry_and_errors() {
        let g = ProbabilityGrid::new(vec![0.25, 0.75]).unwrap();
        let qs = QuantileSet::new(g.clone(), vec![0.0, 1.0], None).unwrap();
        let d = spl_fit(&qs, TailFamily::NormalTails).unwrap();
        assert!((d.cdf(0.5).unwrap() - 0.5).abs() < 1e-15);
        let flat = QuantileSet::new(g, vec![1.0, 1.0], None).unwrap();
        assert!(matches!(spl_fit(&flat, TailFamily::NormalTails), Err(Error::Precondition(_))));
        assert!(SplineCdf::new(vec![0.0, 2.0, 1.0], vec![0.1, 0.5, 0.9], TailFamily::NormalTails).is_err());
    }

    #[test]
    fn spl_collapses_ties_to_mean_level() {
        let g = ProbabilityGrid::new(vec![0.1, 0.3, 0.5, 0.9]).unwrap();
        let qs = QuantileSet::new(g, vec![0.0, 2.0, 2.0, 5.0], None).unwrap();
        let MatchedDistribution::Spl(s) = spl_fit(&qs, TailFamily::NormalTails).unwrap() else {
            panic!("expected a spline");
        };
        assert_eq!(s.knots().0, &[0.0, 2.0, 5.0]);
        assert!((s.knots().1[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn spl_is_monotone_on_a_fine_grid() {
        let vals = [0.0, 0.1, 3.0, 3.05, 3.1, 9.0, 9.5];
        let g = ProbabilityGrid::new(vec![0.05, 0.1, 0.3, 0.5, 0.55, 0.9, 0.95]).unwrap();
        let qs = QuantileSet::new(g, vals.to_vec(), None).unwrap();
        let d = spl_fit(&qs, TailFamily::NormalTails).unwrap();
        let mut prev = 0.0;
        for i in 0..10_000 {
            let x = -1.0 + 11.0 * i as f64 / 9999.0;
            assert!(d.pdf(x).unwrap() >= 0.0);
            let c = d.cdf(x).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn kde_examples() {
        let qs = ev_quantiles();
        let d = kde_fit(&qs, None).unwrap();
        assert!((pdf_mass(&d, -20.0, 30.0) - 1.0).abs() < 1e-6);
        // tails too light: the 0.999 point of EV(0,1) gets too little density
        let x = -(-(0.999f64).ln()).ln();
        let truth = (-x - (-x).exp()).exp();
        assert!(d.pdf(x).unwrap() < truth, "{} vs {truth}", d.pdf(x).unwrap());

        let one = QuantileSet::new(ProbabilityGrid::new(vec![0.5]).unwrap(), vec![1.0], None).unwrap();
        assert!(kde_fit(&one, None).is_err());
        assert!(kde_fit(&qs, Some(0.0)).is_err());
        assert!(kde_fit(&qs, Some(-1.0)).is_err());
    }

    #[test]
    fn silverman_matches_hand_value() {
        // sd = 1.5811, IQR = 2 → min(1.5811, 1.4925)
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((h - 0.9 * (2.0 / 1.34) * 5f64.powf(-0.2)).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let qs = ev_quantiles();
        for d in [spl_fit(&qs, TailFamily::ExponentialTails).unwrap(), kde_fit(&qs, Some(0.3)).unwrap()] {
            let back: MatchedDistribution = d.to_string().parse().unwrap();
            assert_eq!(back.method(), d.method());
            for x in [-3.0, 0.0, 0.7, 5.0] {
                assert!((back.cdf(x).unwrap() - d.cdf(x).unwrap()).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn kde_median_of_symmetric_set(c in -50.0f64..50.0, half in prop::collection::vec(0.01f64..5.0, 1..8)) {
            let mut offs: Vec<f64> = half.iter().scan(0.0, |s, d| { *s += d; Some(*s) }).collect();
            let mut vals: Vec<f64> = offs.iter().rev().map(|o| c - o).collect();
            vals.push(c);
            vals.extend(offs.drain(..).map(|o| c + o));
            let k = vals.len();
            let g = ProbabilityGrid::uniform(k).unwrap();
            let qs = QuantileSet::new(g, vals, None).unwrap();
            let d = kde_fit(&qs, None).unwrap();
            prop_assert!((d.quantile(0.5).unwrap() - c).abs() < 1e-9);
        }

        #[test]
        fn quantile_inverts_cdf(p in 0.001f64..0.999) {
            let qs = ev_quantiles();
            for d in [spl_fit(&qs, TailFamily::NormalTails).unwrap(), kde_fit(&qs, None).unwrap()] {
                let x = d.quantile(p).unwrap();
                prop_assert!((d.cdf(x).unwrap() - p).abs() < 1e-12);
            }
        }
    }
}
