//! Forecast-hub quantile submissions and observed truth series.
//!
//! Submissions are long-format CSV with one row per (forecast, level):
//!
//! ```text
//! reference_date,horizon,target_end_date,location,output_type,output_type_id,value
//! 2024-01-06,1,2024-01-13,US,quantile,0.01,5120
//! ```
//!
//! An optional `model_id` (or `team`) column names the submitting team; when
//! absent the team is taken from the file name. An optional `target` column
//! is carried into the forecast key.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::empirical::{ProbabilityGrid, QuantileSet};
use crate::error::{Error, Result};

const REQUIRED: [&str; 7] = [
    "reference_date",
    "horizon",
    "target_end_date",
    "location",
    "output_type",
    "output_type_id",
    "value",
];

/// The 23 FluSight quantile levels.
pub fn canonical_grid() -> ProbabilityGrid {
    ProbabilityGrid::flusight()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ForecastKey {
    pub team: String,
    pub location: String,
    pub reference_date: String,
    pub horizon: i32,
    pub target_end_date: String,
    pub target: String,
}

impl ForecastKey {
    pub const COLUMNS: [&'static str; 6] = ["team", "location", "reference_date", "horizon", "target_end_date", "target"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.team.clone(),
            self.location.clone(),
            self.reference_date.clone(),
            self.horizon.to_string(),
            self.target_end_date.clone(),
            self.target.clone(),
        ]
    }
}

impl fmt::Display for ForecastKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/h{}",
            self.team, self.location, self.reference_date, self.horizon
        )?;
        if !self.target.is_empty() {
            write!(f, "/{}", self.target)?;
        }
        Ok(())
    }
}

/// One submitted quantile forecast, as submitted: levels ascending, values
/// nonnegative but not yet checked for monotonicity.
#[derive(Debug, Clone, PartialEq)]
pub struct HubForecast {
    pub key: ForecastKey,
    pub levels: Vec<f64>,
    pub values: Vec<f64>,
}

impl HubForecast {
    /// The raw forecast as a quantile set; fails if values decrease.
    pub fn quantile_set(&self) -> Result<QuantileSet> {
        QuantileSet::new(ProbabilityGrid::new(self.levels.clone())?, self.values.clone(), None)
    }
}

/// A row that could not be used, with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HubParse {
    pub forecasts: Vec<HubForecast>,
    pub rejects: Vec<Reject>,
    /// Rows with an output type other than `quantile`.
    pub skipped: usize,
}

fn team_from_path(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown");
    // hub files are named `YYYY-MM-DD-team-model.csv`
    let b = stem.as_bytes();
    if b.len() > 11 && b[4] == b'-' && b[7] == b'-' && b[10] == b'-' && stem[..4].bytes().all(|c| c.is_ascii_digit()) {
        stem[11..].to_string()
    } else {
        stem.to_string()
    }
}

pub fn parse_hub_csv(path: impl AsRef<Path>) -> Result<HubParse> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_hub_reader(file, &team_from_path(path))
}

/// Parse hub CSV text; `default_team` is used when no team column exists.
pub fn parse_hub_reader<R: Read>(reader: R, default_team: &str) -> Result<HubParse> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Format("hub file is empty".into()));
    }
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| Error::Format(format!("hub file is missing the `{name}` column")))?;
    }
    let [ref_i, hor_i, end_i, loc_i, type_i, id_i, val_i] = idx;
    let team_i = col("model_id").or_else(|| col("team"));
    let target_i = col("target");
    let canon = canonical_grid();

    let mut groups: BTreeMap<ForecastKey, Vec<(f64, f64)>> = BTreeMap::new();
    let mut out = HubParse::default();
    let mut rows = 0;
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(Reject { line, reason: e.to_string() });
                continue;
            }
        };
        rows += 1;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        if field(type_i) != "quantile" {
            out.skipped += 1;
            continue;
        }
        let mut reject = |reason: String| out.rejects.push(Reject { line, reason });
        let Ok(horizon) = field(hor_i).parse::<i32>() else {
            reject(format!("horizon `{}` is not an integer", field(hor_i)));
            continue;
        };
        let level = match field(id_i).parse::<f64>() {
            Ok(p) if canon.contains(p) => p,
            _ => {
                reject(format!("quantile level `{}` is not a canonical level", field(id_i)));
                continue;
            }
        };
        let value = match field(val_i).parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => v,
            _ => {
                reject(format!("value `{}` is not a nonnegative number", field(val_i)));
                continue;
            }
        };
        if field(loc_i).is_empty() || field(ref_i).is_empty() {
            reject("empty location or reference date".into());
            continue;
        }
        let key = ForecastKey {
            team: team_i.map_or(default_team.to_string(), |i| field(i).to_string()),
            location: field(loc_i).to_string(),
            reference_date: field(ref_i).to_string(),
            horizon,
            target_end_date: field(end_i).to_string(),
            target: target_i.map_or(String::new(), |i| field(i).to_string()),
        };
        groups.entry(key).or_default().push((level, value));
    }
    if rows == 0 {
        return Err(Error::Format("hub file has no data rows".into()));
    }
    for (key, mut pairs) in groups {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| (w[0].0 - w[1].0).abs() < 1e-9) {
            return Err(Error::Format(format!("duplicate quantile level in forecast {key}")));
        }
        if !pairs.iter().any(|p| (p.0 - 0.5).abs() < 1e-9) {
            log::warn!("forecast {key} has no median; WIS will not be available");
        }
        out.forecasts.push(HubForecast {
            key,
            levels: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        });
    }
    Ok(out)
}

/// Write forecasts back in hub format, one row per level.
pub fn write_hub_csv<W: Write>(forecasts: &[HubForecast], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "model_id",
        "reference_date",
        "target",
        "horizon",
        "target_end_date",
        "location",
        "output_type",
        "output_type_id",
        "value",
    ])?;
    for f in forecasts {
        let k = &f.key;
        for (p, v) in f.levels.iter().zip(&f.values) {
            out.write_record([
                k.team.as_str(),
                &k.reference_date,
                &k.target,
                &k.horizon.to_string(),
                &k.target_end_date,
                &k.location,
                "quantile",
                &p.to_string(),
                &v.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Fitting input for a forecast: zero-valued levels removed, values mapped
/// to `ln(v + 1)`, decreases of at most 1e-9 flattened.
pub fn preprocess(f: &HubForecast) -> Result<QuantileSet> {
    let unusable = |reason: String| Error::UnusableForecast {
        key: f.key.to_string(),
        reason,
    };
    let (mut levels, mut values) = (Vec::new(), Vec::new());
    for (&p, &v) in f.levels.iter().zip(&f.values) {
        if v != 0.0 {
            levels.push(p);
            values.push(v.ln_1p());
        }
    }
    if values.len() < 2 {
        return Err(unusable(format!("{} nonzero quantiles, need at least 2", values.len())));
    }
    for i in 1..values.len() {
        if values[i] < values[i - 1] {
            if values[i - 1] - values[i] <= 1e-9 {
                values[i] = values[i - 1];
            } else {
                return Err(unusable(format!(
                    "quantile at level {} is below the one at level {}",
                    levels[i],
                    levels[i - 1]
                )));
            }
        }
    }
    QuantileSet::new(ProbabilityGrid::new(levels)?, values, None)
}

/// The forecast's full level set on the `ln(v + 1)` scale, zeros included;
/// this is what WIS is computed on.
pub fn log_scale(f: &HubForecast) -> Result<QuantileSet> {
    let values: Vec<f64> = f.values.iter().map(|v| v.ln_1p()).collect();
    QuantileSet::new(ProbabilityGrid::new(f.levels.clone())?, values, None).map_err(|e| Error::UnusableForecast {
        key: f.key.to_string(),
        reason: e.to_string(),
    })
}

/// Observed weekly counts by location and date.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruthSeries {
    series: BTreeMap<String, BTreeMap<String, u64>>,
}

impl TruthSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, location: &str, date: &str, count: u64) {
        self.series
            .entry(location.to_string())
            .or_default()
            .insert(date.to_string(), count);
    }

    pub fn get(&self, location: &str, date: &str) -> Option<u64> {
        self.series.get(location)?.get(date).copied()
    }

    pub fn len(&self) -> usize {
        self.series.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Read `date` (or `target_end_date`), `location`, `value` columns.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let date_i = col("date")
            .or_else(|| col("target_end_date"))
            .ok_or_else(|| Error::Format("truth file is missing the `date` column".into()))?;
        let loc_i = col("location").ok_or_else(|| Error::Format("truth file is missing the `location` column".into()))?;
        let val_i = col("value").ok_or_else(|| Error::Format("truth file is missing the `value` column".into()))?;
        let mut out = Self::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let raw = rec.get(val_i).unwrap_or("").trim();
            if raw.is_empty() || raw == "NA" {
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Format(format!("truth line {}: value `{raw}` is not a number", n + 2)))?;
            if !(v >= 0.0 && v.fract() == 0.0) {
                return Err(Error::Format(format!(
                    "truth line {}: count {v} is not a nonnegative integer",
                    n + 2
                )));
            }
            out.insert(rec.get(loc_i).unwrap_or("").trim(), rec.get(date_i).unwrap_or("").trim(), v as u64);
        }
        Ok(out)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["date", "location", "value"])?;
        for (loc, s) in &self.series {
            for (date, v) in s {
                out.write_record([date.as_str(), loc, &v.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
