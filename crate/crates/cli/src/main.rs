use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use quantmatch_core::distributions::ContinuousDistribution;
use quantmatch_core::harness::{fidelity_from_quantiles, Fit};
use quantmatch_core::hub_io::parse_hub_csv;
use quantmatch_core::metrics::{kld_mc, total_variation, uwd1, wasserstein_p, write_scores_csv};
use quantmatch_core::{
    fit_method, run_components_study, run_study, score_hub, DistributionSpec, Family, Fitted, HubScoreConfig, KvMap,
    LocationScale, MatchedDistribution, McmcConfig, Method, ModelSpec, ProbabilityGrid, QuantileSet, StudySpec,
    TruthSeries,
};

#[derive(Parser)]
#[command(name = "quantmatch", version, about = "Fit continuous distributions to reported quantiles")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Random seed (overrides any seed in a config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for studies and hub scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one quantile set with a model or nonparametric method.
    Fit {
        /// Quantile CSV (`p,q` rows; optional `# n = N` comment).
        #[arg(long)]
        data: PathBuf,
        /// Key-value config: a model spec, or `method = spl | spl-exp | kde`.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a simulation study from a key-value config.
    SimulateStudy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit and score hub forecasts against observed truth.
    ScoreHub {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated method tokens.
        #[arg(long, default_value = "qgp")]
        methods: String,
        #[arg(long, default_value = "normal_mixture")]
        family: String,
        #[arg(long, default_value_t = 4)]
        components: usize,
        #[arg(long, default_value_t = 80_000)]
        draws: usize,
        #[arg(long, default_value_t = 20_000)]
        burn_in: usize,
        #[arg(long, default_value_t = 10_000)]
        predictive_draws: usize,
    },
    /// Distances between two distributions (fit files or inline specs).
    Distance {
        a: String,
        b: String,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Tabulate quantile, CDF and PDF of a fitted distribution.
    Evaluate {
        /// Fit file or inline spec such as `family=normal mu=0 sigma=1`.
        fit: String,
        /// Probability levels; defaults to 99 equally spaced levels.
        #[arg(long, value_delimiter = ',')]
        probs: Vec<f64>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    match cli.command {
        Command::Fit { data, config } => fit(&g, &data, &config),
        Command::SimulateStudy { config } => simulate(&g, &config),
        Command::ScoreHub {
            forecasts,
            truth,
            methods,
            family,
            components,
            draws,
            burn_in,
            predictive_draws,
        } => {
            let family: Family = family.parse()?;
            let methods = methods
                .split(',')
                .map(|t| Method::parse(t, family, components, &Default::default()))
                .collect::<quantmatch_core::Result<Vec<_>>>()?;
            let cfg = HubScoreConfig {
                mcmc: McmcConfig::default().with_lengths(draws, burn_in),
                predictive_draws,
                seed: g.seed.unwrap_or(1),
                threads: g.threads,
            };
            score(&g, &forecasts, &truth, &methods, &cfg)
        }
        Command::Distance { a, b, draws } => distance(&g, &a, &b, draws),
        Command::Evaluate { fit, probs } => evaluate(&g, &fit, probs),
    }
}

fn read_kv(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KvMap::parse(&text)?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

/// Plug-in fit as portable text: a distribution spec, optionally with `loc`
/// and `scale` for location-scale extensions.
fn fit_text(fitted: &Fitted) -> Result<KvMap> {
    Ok(match fitted {
        Fitted::Matched(m) => m.to_kv(),
        Fitted::Posterior { model, samples } => {
            let means = samples.means();
            match model.distribution(&means)? {
                quantmatch_core::likelihoods::ModelDistribution::Spec(s) => s.to_kv(),
                quantmatch_core::likelihoods::ModelDistribution::Scaled(ls) => {
                    let mut kv = ls.base.to_kv();
                    kv.insert("loc", ls.loc);
                    kv.insert("scale", ls.scale);
                    kv
                }
            }
        }
    })
}

fn load_distribution(arg: &str) -> Result<Box<dyn ContinuousDistribution>> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    } else {
        arg.to_string()
    };
    let kv = KvMap::parse(&text)?;
    if kv.get("method").is_some() {
        return Ok(Box::new(MatchedDistribution::from_kv(&kv)?));
    }
    let (loc, scale) = (kv.opt::<f64>("loc")?, kv.opt::<f64>("scale")?);
    let mut base = KvMap::new();
    for k in kv.keys().filter(|k| *k != "loc" && *k != "scale") {
        base.insert(k, kv.require(k)?);
    }
    let spec = DistributionSpec::from_kv(&base)?;
    Ok(match (loc, scale) {
        (None, None) => Box::new(spec),
        (l, s) => Box::new(LocationScale::new(spec, l.unwrap_or(0.0), s.unwrap_or(1.0))?),
    })
}

fn fit(g: &Global, data: &Path, config: &Path) -> Result<()> {
    let qs = QuantileSet::read_csv_path(data)?;
    let kv = read_kv(config)?;
    let method = match kv.get("method") {
        Some(token) => Method::parse(token, Family::Normal, 1, &Default::default())?,
        None => {
            let spec = ModelSpec::from_kv(&kv)?;
            Method {
                label: spec.label(),
                fit: Fit::Model(spec),
            }
        }
    };
    let base = match &method.fit {
        Fit::Model(s) if s.family == Family::NormalMixture => McmcConfig::mixture(),
        _ => McmcConfig::default(),
    };
    let cfg = base
        .clone()
        .with_lengths(kv.opt("draws")?.unwrap_or(base.total_draws), kv.opt("burn_in")?.unwrap_or(base.burn_in))
        .with_thin(kv.opt("thin")?.unwrap_or(1))
        .with_seed(g.seed.or(kv.opt("seed")?).unwrap_or(0));
    let fitted = fit_method(&method, &qs, &cfg)?;
    let (mae, mse) = fidelity_from_quantiles(&fitted.quantiles(qs.probs())?, qs.values());
    if let Fitted::Posterior { samples, .. } = &fitted {
        samples.write_csv(create(&g.out, "posterior.csv")?)?;
        samples.write_summary_csv(create(&g.out, "summary.csv")?)?;
    }
    let mut w = csv::Writer::from_writer(create(&g.out, "fit_summary.csv")?);
    w.write_record(["method", "k", "mae", "mse"])?;
    w.write_record([method.label.clone(), qs.len().to_string(), mae.to_string(), mse.to_string()])?;
    w.flush()?;
    fs::write(g.out.join("fit.txt"), fit_text(&fitted)?.to_config_string())?;
    println!("{}: MAE {mae:.6} MSE {mse:.6}; outputs in {}", method.label, g.out.display());
    Ok(())
}

fn simulate(g: &Global, config: &Path) -> Result<()> {
    let mut spec = StudySpec::from_kv(&read_kv(config)?)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    if g.threads.is_some() {
        spec.threads = g.threads;
    }
    let result = if spec.component_counts.is_empty() {
        run_study(&spec)?
    } else {
        run_components_study(&spec)?
    };
    result.write_all(&g.out)?;
    println!(
        "{}: {} fits, {} failures; outputs in {}",
        spec.name,
        result.records.len(),
        result.failures.len(),
        g.out.display()
    );
    Ok(())
}

fn score(g: &Global, forecasts: &Path, truth: &Path, methods: &[Method], cfg: &HubScoreConfig) -> Result<()> {
    let parsed = parse_hub_csv(forecasts)?;
    for r in &parsed.rejects {
        log::warn!("{} line {}: {}", forecasts.display(), r.line, r.reason);
    }
    let truth = TruthSeries::read_csv_path(truth)?;
    let (records, skipped) = score_hub(&parsed.forecasts, &truth, methods, cfg)?;
    let keys = quantmatch_core::hub_io::ForecastKey::COLUMNS;
    write_scores_csv(&keys, &records, create(&g.out, "scores.csv")?)?;
    let mut w = csv::Writer::from_writer(create(&g.out, "skipped.csv")?);
    w.write_record(["key", "line", "reason"])?;
    for r in &parsed.rejects {
        w.write_record(["", &r.line.to_string(), &r.reason])?;
    }
    for (k, reason) in &skipped {
        w.write_record([k.to_string().as_str(), "", reason])?;
    }
    w.flush()?;
    println!(
        "scored {} forecast-method pairs; {} rows rejected, {} forecasts skipped",
        records.len(),
        parsed.rejects.len(),
        skipped.len()
    );
    Ok(())
}

fn distance(g: &Global, a: &str, b: &str, draws: usize) -> Result<()> {
    let (da, db) = (load_distribution(a)?, load_distribution(b)?);
    let seed = g.seed.unwrap_or(1);
    let support = (
        da.quantile(1e-4)?.min(db.quantile(1e-4)?),
        da.quantile(1.0 - 1e-4)?.max(db.quantile(1.0 - 1e-4)?),
    );
    let kld = kld_mc(da.as_ref(), db.as_ref(), draws, seed)?;
    let mut rng_draws = {
        use quantmatch_core::distributions::sample;
        sample(db.as_ref(), draws, seed.wrapping_add(1))?
    };
    for x in &mut rng_draws {
        *x = da.cdf(*x)?;
    }
    let rows = [
        ("wd1", wasserstein_p(da.as_ref(), db.as_ref(), 1.0)?.value, f64::NAN),
        ("wd2", wasserstein_p(da.as_ref(), db.as_ref(), 2.0)?.value, f64::NAN),
        ("tv", total_variation(da.as_ref(), db.as_ref(), support)?, f64::NAN),
        ("kld", kld.value, kld.std_error),
        ("uwd1", uwd1(&rng_draws)?, f64::NAN),
    ];
    let mut w = csv::Writer::from_writer(create(&g.out, "distance.csv")?);
    w.write_record(["metric", "value", "std_error"])?;
    for (m, v, se) in rows {
        w.write_record([m, &v.to_string(), &se.to_string()])?;
        println!("{m}\t{v:.6}");
    }
    w.flush()?;
    Ok(())
}

fn evaluate(g: &Global, fit: &str, probs: Vec<f64>) -> Result<()> {
    let d = load_distribution(fit)?;
    let grid = if probs.is_empty() {
        ProbabilityGrid::uniform(99)?
    } else {
        ProbabilityGrid::new(probs)?
    };
    let mut w = csv::Writer::from_writer(create(&g.out, "evaluate.csv")?);
    w.write_record(["p", "x", "cdf", "pdf"])?;
    for &p in grid.probs() {
        let x = d.quantile(p)?;
        if !x.is_finite() {
            bail!("quantile at {p} is not finite");
        }
        w.write_record([p.to_string(), x.to_string(), d.cdf(x)?.to_string(), d.pdf(x)?.to_string()])?;
    }
    w.flush()?;
    println!("{} rows written to {}", grid.len(), g.out.join("evaluate.csv").display());
    Ok(())
}
