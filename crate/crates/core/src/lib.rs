//! Bayesian and nonparametric quantile matching: recover a continuous
//! distribution from a handful of reported quantiles.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributions;
pub mod empirical;
pub mod error;
pub mod harness;
pub mod hub_io;
pub mod inference;
pub mod kv;
pub mod likelihoods;
pub mod linalg;
pub mod metrics;
pub mod nonparametric;
pub mod optimize;
pub mod quadrature;
pub mod special;

pub use distributions::{ContinuousDistribution, DistributionSpec, Family, LocationScale, NormalMixture};
pub use empirical::{ProbabilityGrid, QuantileSet, QuantileType};
pub use error::{Error, Result};
pub use harness::{
    fidelity_check, fit_method, run_components_study, run_study, score_hub, Fitted, HubScoreConfig, Method,
    StudyResult, StudySpec,
};
pub use hub_io::{canonical_grid, parse_hub_csv, preprocess, HubForecast, TruthSeries};
pub use inference::{credible_interval, fit_least_squares, fit_mcmc, posterior_predictive, McmcConfig, PosteriorSamples};
pub use kv::KvMap;
pub use likelihoods::{ModelKind, ModelSpec, Prior, PriorSpec};
pub use metrics::{crps_sample, interval_score, kld_mc, total_variation, uwd1, wasserstein_p, wis, ScoreRecord};
pub use nonparametric::{kde_fit, spl_fit, MatchedDistribution, TailFamily};
