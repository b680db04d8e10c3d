//! Probability grids, sample quantiles, PIT transforms and the asymptotic
//! covariance of sample quantiles.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::distributions::{check_prob, ContinuousDistribution};
use crate::error::{Error, Result};

/// The 23 probability levels of FluSight quantile forecasts.
pub const FLUSIGHT_LEVELS: [f64; 23] = [
    0.01, 0.025, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65,
    0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.975, 0.99,
];

/// Strictly increasing probabilities in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    probs: Vec<f64>,
}

impl ProbabilityGrid {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Precondition("probability grid is empty".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!("grid level {i} = {p} outside (0, 1)")));
            }
        }
        if let Some(i) = probs.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Precondition(format!(
                "grid not strictly increasing at index {}: {} >= {}",
                i + 1,
                probs[i],
                probs[i + 1]
            )));
        }
        Ok(Self { probs })
    }

    /// `k/(K+1)` for `k = 1..=K`.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Precondition("grid size K must be at least 1".into()));
        }
        Self::new((1..=k).map(|i| i as f64 / (k + 1) as f64).collect())
    }

    pub fn flusight() -> Self {
        Self {
            probs: FLUSIGHT_LEVELS.to_vec(),
        }
    }

    /// Grid used by the simulation studies: the FluSight levels when `k = 23`,
    /// otherwise [`Self::uniform`].
    pub fn for_study(k: usize) -> Result<Self> {
        if k == 23 {
            Ok(Self::flusight())
        } else {
            Self::uniform(k)
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Whether every level `p` has a partner `1 − p` (within 1e-9).
    pub fn is_symmetric(&self) -> bool {
        let k = self.probs.len();
        (0..k).all(|i| (self.probs[i] + self.probs[k - 1 - i] - 1.0).abs() < 1e-9)
    }

    pub fn contains(&self, p: f64) -> bool {
        self.probs.iter().any(|&q| (q - p).abs() < 1e-9)
    }
}

/// Hyndman–Fan sample-quantile definitions of the continuous
/// `(1 − γ)·Y(j) + γ·Y(j+1)` family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantileType {
    Type4,
    Type5,
    Type6,
    #[default]
    Type7,
    Type8,
    Type9,
}

impl QuantileType {
    /// The offset `m` in `j = ⌊pn + m⌋`.
    fn offset(self, p: f64) -> f64 {
        match self {
            QuantileType::Type4 => 0.0,
            QuantileType::Type5 => 0.5,
            QuantileType::Type6 => p,
            QuantileType::Type7 => 1.0 - p,
            QuantileType::Type8 => (p + 1.0) / 3.0,
            QuantileType::Type9 => p / 4.0 + 3.0 / 8.0,
        }
    }
}

impl FromStr for QuantileType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches("type") {
            "4" => Ok(Self::Type4),
            "5" => Ok(Self::Type5),
            "6" => Ok(Self::Type6),
            "7" => Ok(Self::Type7),
            "8" => Ok(Self::Type8),
            "9" => Ok(Self::Type9),
            _ => Err(Error::Format(format!("unknown sample quantile type `{s}`"))),
        }
    }
}

/// Probability grid paired with nondecreasing quantile estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSet {
    grid: ProbabilityGrid,
    values: Vec<f64>,
    sample_size: Option<u64>,
}

impl QuantileSet {
    pub fn new(grid: ProbabilityGrid, values: Vec<f64>, sample_size: Option<u64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Precondition(format!(
                "{} quantile values for a grid of {} levels",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("quantile value {i} is not finite")));
        }
        if let Some(i) = values.windows(2).position(|w| w[0] > w[1]) {
            return Err(Error::Domain(format!(
                "quantile values decrease at index {}: {} > {}",
                i + 1,
                values[i],
                values[i + 1]
            )));
        }
        if sample_size == Some(0) {
            return Err(Error::Precondition("sample size must be positive".into()));
        }
        Ok(Self {
            grid,
            values,
            sample_size,
        })
    }

    /// Exact quantiles of `dist` on `grid`.
    pub fn from_distribution(
        dist: &dyn ContinuousDistribution,
        grid: &ProbabilityGrid,
        sample_size: Option<u64>,
    ) -> Result<Self> {
        let values = grid
            .probs()
            .iter()
            .map(|&p| dist.quantile(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid.clone(), values, sample_size)
    }

    pub fn grid(&self) -> &ProbabilityGrid {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        self.grid.probs()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_size(&self) -> Option<u64> {
        self.sample_size
    }

    pub fn with_sample_size(mut self, n: Option<u64>) -> Self {
        self.sample_size = n;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] < w[1])
    }

    /// Value at level `p`, if `p` is on the grid.
    pub fn value_at(&self, p: f64) -> Option<f64> {
        self.probs()
            .iter()
            .position(|&q| (q - p).abs() < 1e-9)
            .map(|i| self.values[i])
    }

    /// Parse the two-column `p,q` CSV. A header row is optional; a leading
    /// comment line `# n = 1000` sets the sample size.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut text = String::new();
        let mut reader = reader;
        reader.read_to_string(&mut text)?;
        let mut sample_size = None;
        let mut probs = Vec::new();
        let mut values = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once('=') {
                    if k.trim() == "n" {
                        sample_size = Some(v.trim().parse::<u64>().map_err(|_| {
                            Error::Format(format!("line {}: bad sample size `{}`", lineno + 1, v.trim()))
                        })?);
                    }
                }
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Format(format!(
                    "line {}: expected two columns, got `{line}`",
                    lineno + 1
                )));
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(p), Ok(q)) => {
                    probs.push(p);
                    values.push(q);
                }
                _ if probs.is_empty() && a.eq_ignore_ascii_case("p") => continue,
                _ => {
                    return Err(Error::Format(format!(
                        "line {}: cannot parse `{line}` as numbers",
                        lineno + 1
                    )))
                }
            }
        }
        if probs.is_empty() {
            return Err(Error::Format("quantile file has no rows".into()));
        }
        Self::new(ProbabilityGrid::new(probs)?, values, sample_size)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if let Some(n) = self.sample_size {
            writeln!(w, "# n = {n}")?;
        }
        writeln!(w, "p,q")?;
        for (p, q) in self.probs().iter().zip(&self.values) {
            writeln!(w, "{p},{q}")?;
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

impl fmt::Display for QuantileSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|_| fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

/// Type-7 sample quantiles of `data` on `grid`.
pub fn sample_quantiles(data: &[f64], grid: &ProbabilityGrid) -> Result<QuantileSet> {
    sample_quantiles_with(data, grid, QuantileType::Type7)
}

pub fn sample_quantiles_with(
    data: &[f64],
    grid: &ProbabilityGrid,
    kind: QuantileType,
) -> Result<QuantileSet> {
    if data.len() < 2 {
        return Err(Error::Precondition(format!(
            "sample quantiles need at least 2 observations, got {}",
            data.len()
        )));
    }
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("data contain NaN".into()));
    }
    let mut sorted = data.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let values = grid
        .probs()
        .iter()
        .map(|&p| sorted_quantile(&sorted, p, kind))
        .collect();
    QuantileSet::new(grid.clone(), values, Some(data.len() as u64))
}

/// Sample quantile of already sorted data.
pub fn sorted_quantile(sorted: &[f64], p: f64, kind: QuantileType) -> f64 {
    let n = sorted.len();
    let h = p * n as f64 + kind.offset(p);
    let j = h.floor();
    let g = h - j;
    // j is 1-based
    let at = |i: f64| sorted[(i.max(1.0).min(n as f64) as usize) - 1];
    let lo = at(j);
    let hi = at(j + 1.0);
    if g == 0.0 {
        lo
    } else {
        (1.0 - g) * lo + g * hi
    }
}

/// `F_θ(Q̂(p_k))` for every level; each value must fall strictly inside (0, 1).
pub fn pit_transform(dist: &dyn ContinuousDistribution, qs: &QuantileSet) -> Result<Vec<f64>> {
    qs.values()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let u = dist.cdf(x)?;
            if u > 0.0 && u < 1.0 {
                Ok(u)
            } else {
                Err(Error::Domain(format!(
                    "quantile {i} (value {x}) lies on or outside the support boundary"
                )))
            }
        })
        .collect()
}

/// `Γ_ij = min(p_i, p_j) − p_i p_j`.
pub fn brownian_bridge_cov(grid: &ProbabilityGrid) -> DMatrix<f64> {
    let p = grid.probs();
    DMatrix::from_fn(p.len(), p.len(), |i, j| p[i].min(p[j]) - p[i] * p[j])
}

/// Asymptotic covariance of `√n (Q̂_n − Q)`: `Γ_ij · q(p_i) · q(p_j)`.
pub fn qclt_cov(dist: &dyn ContinuousDistribution, grid: &ProbabilityGrid) -> Result<DMatrix<f64>> {
    let q = grid
        .probs()
        .iter()
        .map(|&p| {
            check_prob(p)?;
            dist.qdf(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma = brownian_bridge_cov(grid);
    Ok(DMatrix::from_fn(q.len(), q.len(), |i, j| gamma[(i, j)] * (q[i] * q[j])))
}
