//! Distances between distributions and scores for probabilistic forecasts.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distributions::ContinuousDistribution;
use crate::empirical::QuantileSet;
use crate::error::{Error, Result};
use crate::quadrature::{integrate_pieces, QuadOptions};

/// Probability mass cut from each end of (0, 1) by [`wasserstein_p`].
pub const WASSERSTEIN_EPS: f64 = 1e-6;

/// A quadrature-based distance with an estimate of the mass left out by
/// truncating the integration range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distance {
    pub value: f64,
    pub truncation: f64,
}

/// `(∫₀¹ |Q_a(t) − Q_b(t)|^p dt)^(1/p)` over `(ε, 1 − ε)`.
///
/// `truncation` is `ε·(|ΔQ(ε)|^p + |ΔQ(1−ε)|^p)`, the contribution of the cut
/// ends if the gap stayed at its boundary value.
pub fn wasserstein_p(a: &dyn ContinuousDistribution, b: &dyn ContinuousDistribution, p: f64) -> Result<Distance> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::Precondition(format!("Wasserstein order must be >= 1, got {p}")));
    }
    let eps = WASSERSTEIN_EPS;
    let gap = |t: f64| -> f64 {
        match (a.quantile(t), b.quantile(t)) {
            (Ok(x), Ok(y)) => (x - y).abs().powf(p),
            _ => f64::NAN,
        }
    };
    let mut points = vec![eps, 1e-4, 1e-3, 1e-2, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999, 0.9999, 1.0 - eps];
    points.dedup();
    let integral = integrate_pieces(gap, &points, QuadOptions::default())?;
    let truncation = eps * (gap(eps) + gap(1.0 - eps));
    Ok(Distance {
        value: integral.value.max(0.0).powf(1.0 / p),
        truncation,
    })
}

/// Twice the L1 distance between the empirical CDF of `pit` and the uniform
/// CDF on [0, 1], integrated exactly between order statistics.
pub fn uwd1(pit: &[f64]) -> Result<f64> {
    if pit.is_empty() {
        return Err(Error::Precondition("uwd1 needs a nonempty sample".into()));
    }
    if let Some(v) = pit.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("PIT value {v} outside [0, 1]")));
    }
    let mut u = pit.to_vec();
    u.sort_by(f64::total_cmp);
    let m = u.len() as f64;
    // ∫_a^b |c − t| dt for a constant c
    let piece = |c: f64, a: f64, b: f64| -> f64 {
        if c <= a {
            0.5 * ((b - c).powi(2) - (a - c).powi(2))
        } else if c >= b {
            0.5 * ((c - a).powi(2) - (c - b).powi(2))
        } else {
            0.5 * ((c - a).powi(2) + (b - c).powi(2))
        }
    };
    let mut total = piece(0.0, 0.0, u[0]);
    for i in 0..u.len() {
        let next = if i + 1 < u.len() { u[i + 1] } else { 1.0 };
        total += piece((i + 1) as f64 / m, u[i], next);
    }
    Ok(2.0 * total)
}

/// `½∫|f − g|`, integrated over `support` and widened until the mass outside
/// the range is below 1e-6.
pub fn total_variation(
    f: &dyn ContinuousDistribution,
    g: &dyn ContinuousDistribution,
    support: (f64, f64),
) -> Result<f64> {
    let (mut lo, mut hi) = support;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Precondition(format!("support hint [{lo}, {hi}] is not a finite interval")));
    }
    let outside = |lo: f64, hi: f64| -> Result<f64> {
        Ok(f.cdf(lo)? + g.cdf(lo)? + f.sf(hi)? + g.sf(hi)?)
    };
    let mut widenings = 0;
    while outside(lo, hi)? >= 1e-6 {
        widenings += 1;
        if widenings > 60 {
            return Err(Error::convergence("total variation", "tails never dropped below 1e-6"));
        }
        let span = hi - lo;
        lo -= span;
        hi += span;
    }
    let pieces = 64;
    let points: Vec<f64> = (0..=pieces).map(|i| lo + (hi - lo) * i as f64 / pieces as f64).collect();
    let diff = |x: f64| match (f.pdf(x), g.pdf(x)) {
        (Ok(a), Ok(b)) => (a - b).abs(),
        _ => f64::NAN,
    };
    let r = integrate_pieces(diff, &points, QuadOptions::default())?;
    Ok((0.5 * r.value).clamp(0.0, 1.0))
}

/// Monte-Carlo estimate of `KL(g ‖ f)` from draws of `g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KldEstimate {
    /// `+∞` when any draw had a non-finite log ratio.
    pub value: f64,
    pub std_error: f64,
    /// Draws whose log ratio was not finite.
    pub nonfinite: usize,
}

pub fn kld_mc(
    g: &dyn ContinuousDistribution,
    f: &dyn ContinuousDistribution,
    draws: usize,
    seed: u64,
) -> Result<KldEstimate> {
    if draws < 2 {
        return Err(Error::Precondition("KLD estimate needs at least 2 draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys = g.sample_with(draws, &mut rng)?;
    let mut ratios = Vec::with_capacity(draws);
    let mut nonfinite = 0;
    for y in ys {
        let r = g.ln_pdf(y)? - f.ln_pdf(y)?;
        if r.is_finite() {
            ratios.push(r);
        } else {
            nonfinite += 1;
        }
    }
    if nonfinite > 0 {
        return Ok(KldEstimate {
            value: f64::INFINITY,
            std_error: f64::NAN,
            nonfinite,
        });
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(KldEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        nonfinite,
    })
}

/// Interval score of the central `(1 − α)` interval `[l, r]`.
pub fn interval_score(l: f64, r: f64, alpha: f64, y: f64) -> Result<f64> {
    if l > r {
        return Err(Error::Precondition(format!("interval lower bound {l} exceeds upper bound {r}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Precondition(format!("interval level α = {alpha} outside (0, 1)")));
    }
    let mut s = r - l;
    if y < l {
        s += 2.0 / alpha * (l - y);
    }
    if y > r {
        s += 2.0 / alpha * (y - r);
    }
    Ok(s)
}

/// WIS with its pieces: the weighted median term and one interval score per
/// central interval, ordered from the widest interval inward.
#[derive(Debug, Clone, PartialEq)]
pub struct WisBreakdown {
    pub wis: f64,
    pub median_error: f64,
    pub alphas: Vec<f64>,
    pub interval_scores: Vec<f64>,
}

/// Weighted interval score with `w₀ = ½` and `w_r = α_r/2`.
pub fn wis_breakdown(forecast: &QuantileSet, y: f64) -> Result<WisBreakdown> {
    let (ps, vs) = (forecast.probs(), forecast.values());
    let find = |p: f64| ps.iter().position(|&q| (q - p).abs() <= 1e-9);
    let Some(mid) = find(0.5) else {
        return Err(Error::Precondition("WIS needs the median level 0.5".into()));
    };
    let mut alphas = Vec::new();
    let mut scores = Vec::new();
    let mut acc = 0.5 * (y - vs[mid]).abs();
    for (i, &p) in ps.iter().enumerate().filter(|(_, p)| **p < 0.5 - 1e-9) {
        let Some(j) = find(1.0 - p) else {
            return Err(Error::Precondition(format!("level {p} has no matching upper level {}", 1.0 - p)));
        };
        let alpha = 2.0 * p;
        let is = interval_score(vs[i], vs[j], alpha, y)?;
        acc += 0.5 * alpha * is;
        alphas.push(alpha);
        scores.push(is);
    }
    if let Some(&p) = ps.iter().find(|&&p| p > 0.5 + 1e-9 && find(1.0 - p).is_none()) {
        return Err(Error::Precondition(format!("level {p} has no matching lower level {}", 1.0 - p)));
    }
    let r = alphas.len() as f64;
    Ok(WisBreakdown {
        wis: acc / (r + 0.5),
        median_error: (y - vs[mid]).abs(),
        alphas,
        interval_scores: scores,
    })
}

pub fn wis(forecast: &QuantileSet, y: f64) -> Result<f64> {
    Ok(wis_breakdown(forecast, y)?.wis)
}

/// Sample CRPS, `E|X − y| − ½E|X − X'|`, from the sorted draws.
pub fn crps_sample(draws: &[f64], y: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Precondition("CRPS needs at least one draw".into()));
    }
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let m = x.len() as f64;
    let abs_err = x.iter().map(|v| (v - y).abs()).sum::<f64>() / m;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − m − 1) x_(i)
    let spread = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i + 1) as f64 - m - 1.0) * v)
        .sum::<f64>()
        * 2.0
        / (m * m);
    Ok((abs_err - 0.5 * spread).max(0.0))
}

/// Scores of one forecast under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    /// Values of the key columns, in [`write_scores_csv`] header order.
    pub key: Vec<String>,
    pub method: String,
    pub wis: f64,
    pub crps: f64,
    pub mae: f64,
    pub mse: f64,
    /// Interval scores keyed by their nominal level α.
    pub intervals: Vec<(f64, f64)>,
}

/// Write score records; interval columns are named `is_<α>` and come from
/// the union of levels seen, blank where a record lacks one.
pub fn write_scores_csv<W: Write>(key_names: &[&str], records: &[ScoreRecord], w: W) -> Result<()> {
    let mut levels: Vec<f64> = records.iter().flat_map(|r| r.intervals.iter().map(|x| x.0)).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = key_names.iter().map(|s| s.to_string()).collect();
    header.extend(["method", "wis", "crps", "mae", "mse"].map(String::from));
    header.extend(levels.iter().map(|a| format!("is_{a}")));
    out.write_record(&header)?;
    for r in records {
        if r.key.len() != key_names.len() {
            return Err(Error::Precondition(format!(
                "score record has {} key fields, header has {}",
                r.key.len(),
                key_names.len()
            )));
        }
        let mut row = r.key.clone();
        row.push(r.method.clone());
        row.extend([r.wis, r.crps, r.mae, r.mse].map(|v| v.to_string()));
        for a in &levels {
            let v = r.intervals.iter().find(|x| (x.0 - a).abs() < 1e-12);
            row.push(v.map_or(String::new(), |x| x.1.to_string()));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{sample, DistributionSpec};
    use crate::empirical::ProbabilityGrid;
    use crate::special::{norm_cdf, norm_pdf};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn n(mu: f64, s: f64) -> DistributionSpec {
        DistributionSpec::normal(mu, s).unwrap()
    }

    #[test]
    fn wasserstein_examples() {
        assert!(wasserstein_p(&n(0.0, 1.0), &n(0.0, 1.0), 1.0).unwrap().value.abs() < 1e-12);
        let d = wasserstein_p(&n(0.0, 1.0), &n(1.0, 1.0), 1.0).unwrap();
        // the cut ends carry 2ε of the unit gap
        assert!((d.value - (1.0 - 2.0 * WASSERSTEIN_EPS)).abs() < 1e-8);
        assert!((d.truncation - 2.0 * WASSERSTEIN_EPS).abs() < 1e-15);
        let d = wasserstein_p(&n(0.0, 1.0), &n(0.0, 2.0), 2.0).unwrap();
        assert!((d.value - 1.0).abs() < 1e-4);
        assert!(wasserstein_p(&n(0.0, 1.0), &n(0.0, 2.0), 0.5).is_err());
    }

    #[test]
    fn uwd1_examples() {
        assert!((uwd1(&[0.5; 7]).unwrap() - 0.5).abs() < 1e-15);
        let m = 1000;
        let grid: Vec<f64> = (0..m).map(|k| (k as f64 + 0.5) / m as f64).collect();
        // exactly m triangles of base 1/m and height 1/(2m)
        assert!((uwd1(&grid).unwrap() - 1.0 / (2.0 * m as f64)).abs() < 1e-12);
        let u = sample(&DistributionSpec::exponential(1.0).unwrap(), 50_000, 3)
            .unwrap()
            .into_iter()
            .map(|x| 1.0 - (-x).exp())
            .collect::<Vec<_>>();
        assert!(uwd1(&u).unwrap() < 0.02);
        assert!(matches!(uwd1(&[0.2, 1.5]), Err(Error::Domain(_))));
        assert!(uwd1(&[]).is_err());
    }

    #[test]
    fn uwd1_matches_numeric_integral() {
        let pit = [0.05, 0.3, 0.31, 0.8, 0.95, 0.97];
        let mut s = pit.to_vec();
        s.sort_by(f64::total_cmp);
        let ecdf = |u: f64| s.iter().filter(|v| **v <= u).count() as f64 / s.len() as f64;
        let mut pts = vec![0.0];
        pts.extend_from_slice(&s);
        pts.push(1.0);
        let r = integrate_pieces(|u| (ecdf(u) - u).abs(), &pts, QuadOptions::default()).unwrap();
        assert!((uwd1(&pit).unwrap() - 2.0 * r.value).abs() < 1e-9);
    }

    #[test]
    fn total_variation_examples() {
        assert!(total_variation(&n(0.0, 1.0), &n(0.0, 1.0), (-5.0, 5.0)).unwrap() < 1e-12);
        let tv = total_variation(&n(0.0, 1.0), &n(1.0, 1.0), (-1.0, 2.0)).unwrap();
        assert!((tv - (2.0 * norm_cdf(0.5) - 1.0)).abs() < 1e-7);
        let tv = total_variation(&n(0.0, 1.0), &n(100.0, 1.0), (-5.0, 105.0)).unwrap();
        assert!((tv - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kld_examples() {
        let same = kld_mc(&n(0.0, 1.0), &n(0.0, 1.0), 100_000, 1).unwrap();
        assert!(same.value.abs() <= 3.0 * same.std_error.max(1e-12));
        let k = kld_mc(&n(0.0, 1.0), &n(1.0, 1.0), 100_000, 2).unwrap();
        assert!((k.value - 0.5).abs() < 3.0 * k.std_error, "{k:?}");
        // lighter-tailed reference: KL(N(0, 2²) ‖ N(0, 1)) = ln(1/2) + (4 − 1)/2
        let k = kld_mc(&n(0.0, 2.0), &n(0.0, 1.0), 200_000, 3).unwrap();
        assert!((k.value - (0.5f64.ln() + 1.5)).abs() < 3.0 * k.std_error, "{k:?}");
        let expo = DistributionSpec::exponential(1.0).unwrap();
        let k = kld_mc(&n(0.0, 1.0), &expo, 1000, 4).unwrap();
        assert!(k.value.is_infinite() && k.nonfinite > 0);
    }

    #[test]
    fn interval_score_examples() {
        assert_eq!(interval_score(0.0, 2.0, 0.5, 1.0).unwrap(), 2.0);
        assert!((interval_score(1.0, 3.0, 0.2, 4.0).unwrap() - 12.0).abs() < 1e-12);
        assert_eq!(interval_score(1.0, 3.0, 0.2, 1.0).unwrap(), 2.0);
        assert!(interval_score(3.0, 1.0, 0.2, 1.0).is_err());
    }

    #[test]
    fn wis_examples() {
        let g = ProbabilityGrid::new(vec![0.1, 0.5, 0.9]).unwrap();
        let qs = QuantileSet::new(g, vec![1.0, 2.0, 3.0], None).unwrap();
        assert!((wis(&qs, 4.0).unwrap() - 2.2 / 1.5).abs() < 1e-12);

        let flu = ProbabilityGrid::flusight();
        let point = QuantileSet::new(flu.clone(), vec![7.0; 23], None).unwrap();
        let b = wis_breakdown(&point, 7.0).unwrap();
        assert_eq!(b.wis, 0.0);
        assert_eq!(b.interval_scores.len(), 11);

        let asym = ProbabilityGrid::new(vec![0.1, 0.5, 0.8]).unwrap();
        let qs = QuantileSet::new(asym, vec![1.0, 2.0, 3.0], None).unwrap();
        let err = wis(&qs, 1.0).unwrap_err().to_string();
        assert!(err.contains("0.1"), "{err}");
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_sample(&[3.0; 5], 3.0).unwrap(), 0.0);
        assert!((crps_sample(&[0.0, 2.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        let draws = sample(&n(0.0, 1.0), 1_000_000, 5).unwrap();
        let oracle = 2.0 * norm_pdf(0.0) - 1.0 / PI.sqrt();
        assert!((crps_sample(&draws, 0.0).unwrap() - oracle).abs() < 0.002);
        assert!(crps_sample(&[], 0.0).is_err());
    }

    #[test]
    fn wis_approximates_crps_for_dense_grids() {
        let (mu, s) = (1.0, 2.0);
        let d = n(mu, s);
        let grid = ProbabilityGrid::uniform(99).unwrap();
        let qs = QuantileSet::from_distribution(&d, &grid, None).unwrap();
        let draws = sample(&d, 400_000, 6).unwrap();
        for k in -2..=2 {
            let y = mu + k as f64 * s;
            let (w, c) = (wis(&qs, y).unwrap(), crps_sample(&draws, y).unwrap());
            assert!((w - c).abs() / c < 0.03, "y={y}: wis {w} crps {c}");
        }
    }

    #[test]
    fn score_csv_layout() {
        let rec = |m: &str, iv: Vec<(f64, f64)>| ScoreRecord {
            key: vec!["US".into()],
            method: m.into(),
            wis: 1.0,
            crps: 0.5,
            mae: 0.0,
            mse: 0.0,
            intervals: iv,
        };
        let mut buf = Vec::new();
        write_scores_csv(&["location"], &[rec("spl", vec![(0.2, 3.0)]), rec("kde", vec![(0.5, 1.0)])], &mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "location,method,wis,crps,mae,mse,is_0.2,is_0.5");
        assert_eq!(lines[1], "US,spl,1,0.5,0,0,3,");
    }

    proptest! {
        #[test]
        fn interval_score_translation(l in -5.0f64..5.0, w in 0.0f64..3.0, a in 0.01f64..0.99, y in -10.0f64..10.0, c in -100.0f64..100.0) {
            let base = interval_score(l, l + w, a, y).unwrap();
            let moved = interval_score(l + c, l + w + c, a, y + c).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
        }

        #[test]
        fn uwd1_invariant_under_monotone_maps(seed in 0u64..1000) {
            // PIT of draws from N(1, 2²) against its own CDF equals PIT of the exp-transformed draws against the lognormal CDF
            let xs = sample(&n(1.0, 2.0), 200, seed).unwrap();
            let direct: Vec<f64> = xs.iter().map(|x| norm_cdf((x - 1.0) / 2.0)).collect();
            let mapped: Vec<f64> = xs.iter().map(|x| x.exp()).map(|e| norm_cdf((e.ln() - 1.0) / 2.0)).collect();
            prop_assert!((uwd1(&direct).unwrap() - uwd1(&mapped).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn crps_matches_pairwise_definition(xs in prop::collection::vec(-10.0f64..10.0, 1..30), y in -10.0f64..10.0) {
            let m = xs.len() as f64;
            let a = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
            let b = xs.iter().flat_map(|x| xs.iter().map(move |z| (x - z).abs())).sum::<f64>() / (m * m);
            prop_assert!((crps_sample(&xs, y).unwrap() - (a - 0.5 * b)).abs() < 1e-9);
        }
    }
}
