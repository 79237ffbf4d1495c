use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use ineq_anova::classical::{lr_test_equal_treatments, oneway_f_test};
use ineq_anova::constraints::{parse_constraints, ConstraintSet};
use ineq_anova::designs::{
    load_csv, make_latin_square, make_nested_design, simulate_latin, simulate_nested, write_csv_to, Dataset,
    Schema, SimulationTruth,
};
use ineq_anova::evidence::{
    lindley_sensitivity, order_model_evidence, posterior_model_probs, standard_variance_models,
    variance_model_evidence, LindleyOptions, ModelEvidence, OrderMethod, VarianceModelSpec,
};
use ineq_anova::hierarchical::{
    anova_display, gibbs_latin, gibbs_three_level, gibbs_two_level_dummies, HierConfig,
};
use ineq_anova::rng::derive_seed;
use ineq_anova::samplers::{ChainConfig, OneWayData, PriorSpec, ScalePrior};

use crate::RunConfig;

/// A configuration problem detected by the CLI itself (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub struct Output {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Output {
    fn new(name: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        Self { name: name.into(), bytes: bytes.into() }
    }
}

pub fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// `{"config": ..., "result": ...}`
fn result_json<T: Serialize>(config: &RunConfig, result: &T) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        config: &'a RunConfig,
        result: &'a T,
    }
    pretty_json(&Envelope { config, result })
}

fn load(path: &PathBuf) -> Result<Dataset> {
    load_csv(path).with_context(|| format!("loading {}", path.display()))
}

fn seed_line(seed: u64) -> String {
    format!("seed: {seed}\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    Latin,
    Nested,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub design: DesignKind,
    /// JSON with grand_mean, effect_sds, residual_sd and optional fixed_effects.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params: Option<PathBuf>,
    /// Latin square order.
    #[arg(long, default_value_t = 5)]
    pub order: usize,
    #[arg(long, default_value_t = 20)]
    pub machines: usize,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 6)]
    pub measures: usize,
    #[arg(long)]
    pub seed: u64,
    /// Base name of the CSV and truth files.
    #[arg(long, default_value = "data")]
    pub name: String,
    /// Resolved generative parameters (filled from `--params` or defaults).
    #[arg(skip)]
    pub truth: Option<SimulationTruth>,
}

impl SimulateArgs {
    fn default_truth(design: DesignKind) -> SimulationTruth {
        let names: &[&str] = match design {
            DesignKind::Latin => &["row", "col", "treatment"],
            DesignKind::Nested => &["treatment", "machine"],
        };
        SimulationTruth {
            grand_mean: 0.0,
            effect_sds: names.iter().map(|n| (n.to_string(), 1.0)).collect(),
            residual_sd: 1.0,
            fixed_effects: None,
        }
    }

    pub fn resolve(mut self) -> Result<Self> {
        if self.truth.is_none() {
            self.truth = Some(match &self.params {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text)
                        .map_err(|e| UsageError(format!("bad simulation params in {}: {e}", path.display())))?
                }
                None => Self::default_truth(self.design),
            });
        }
        Ok(self)
    }

    pub fn run(&self, _config: &RunConfig) -> Result<Vec<Output>> {
        let truth = self.truth.clone().unwrap_or_else(|| Self::default_truth(self.design));
        let sim = match self.design {
            DesignKind::Latin => {
                let square = make_latin_square(self.order, derive_seed(self.seed, "design", 0))?;
                simulate_latin(&square, &truth, derive_seed(self.seed, "simulate", 0))?
            }
            DesignKind::Nested => {
                let design =
                    make_nested_design(self.machines, self.groups, self.measures, derive_seed(self.seed, "design", 0))?;
                simulate_nested(&design, &truth, derive_seed(self.seed, "simulate", 0))?
            }
        };
        let mut csv = Vec::new();
        write_csv_to(&sim.dataset, &mut csv)?;
        Ok(vec![
            Output::new(format!("{}.csv", self.name), csv),
            Output::new(format!("{}.truth.json", self.name), pretty_json(&sim.truth)?),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    Latin,
    TwoLevel,
    ThreeLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPrior {
    pub batch: String,
    pub prior: ScalePrior,
}

impl std::str::FromStr for BatchPrior {
    type Err = String;

    /// `name=family:params`, e.g. `row=half-normal:2`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (batch, prior) = s.split_once('=').ok_or_else(|| format!("expected name=prior, got {s:?}"))?;
        Ok(Self { batch: batch.trim().to_string(), prior: prior.parse().map_err(|e: ineq_anova::Error| e.to_string())? })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ChainArgs {
    #[arg(long, default_value_t = 15_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
}

impl ChainArgs {
    fn config(&self, seed: u64) -> ChainConfig {
        ChainConfig { iterations: self.iterations, burn_in: self.burn_in, thin: self.thin, seed }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub model: FitModel,
    /// Prior for every batch sd (default half-normal with scale 2 sd(y)),
    /// as half-normal:S, uniform:U or inv-chisq:NU,S2.
    #[arg(long)]
    pub sd_prior: Option<ScalePrior>,
    /// Per-batch override, e.g. --batch-prior row=half-normal:1 (repeatable).
    #[arg(long)]
    pub batch_prior: Vec<BatchPrior>,
    /// Prior for the residual sd (default inv-chisq:1,var(y) on the variance).
    #[arg(long)]
    pub residual_prior: Option<ScalePrior>,
    /// Nested models: add a batch for the outcome measures.
    #[arg(long)]
    pub measure_batch: bool,
    /// Nested models: drop the machine batch.
    #[arg(long)]
    pub no_machine_batch: bool,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long)]
    pub seed: u64,
}

impl FitArgs {
    pub fn run(&self, config: &RunConfig) -> Result<Vec<Output>> {
        let data = load(&self.data)?;
        let mut hier = HierConfig::new(self.chain.config(derive_seed(self.seed, "chain", 0)));
        hier.default_sd_prior = self.sd_prior;
        hier.residual_prior = self.residual_prior;
        hier.measure_batch = self.measure_batch;
        hier.no_machine_batch = self.no_machine_batch;
        for bp in &self.batch_prior {
            hier.sd_priors.insert(bp.batch.clone(), bp.prior);
        }
        let draws = match self.model {
            FitModel::Latin => gibbs_latin(&data, &hier)?,
            FitModel::TwoLevel => gibbs_two_level_dummies(&data, &hier)?,
            FitModel::ThreeLevel => gibbs_three_level(&data, &hier)?,
        };
        let (summary, table) = anova_display(&draws)?;
        let mut csv = Vec::new();
        draws.write_csv_to(&mut csv)?;
        Ok(vec![
            Output::new("draws.csv", csv),
            Output::new("summary.json", result_json(config, &summary)?),
            Output::new("summary.txt", seed_line(self.seed) + &table),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareKind {
    /// Order constraints on treatment effects (one-way reading).
    Order,
    /// The three variance-structure models of a Latin square.
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Encompassing,
    Direct,
}

/// One entry of a models file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub constraint: Option<String>,
    pub prior_model_prob: f64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = CompareKind::Order)]
    pub kind: CompareKind,
    /// JSON list of {"name", "constraint", "prior_model_prob"} (order kind).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub models: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodKind::Encompassing)]
    pub method: MethodKind,
    /// Prior draws per model (direct method and variance models).
    #[arg(long, default_value_t = 1_000_000)]
    pub draws: u64,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub beta_mean: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub beta_var: f64,
    #[arg(long, default_value_t = 1.0)]
    pub nu0: f64,
    #[arg(long, default_value_t = 10.0)]
    pub s0sq: f64,
    /// Variance kind: prior for every free batch sd (required).
    #[arg(long)]
    pub sd_prior: Option<ScalePrior>,
    /// Variance kind: prior for the residual sd (required).
    #[arg(long)]
    pub residual_prior: Option<ScalePrior>,
    /// Variance kind: prior variance of the grand mean.
    #[arg(long, default_value_t = 1000.0)]
    pub mean_prior_var: f64,
    /// Resolved models (filled from `--models`).
    #[arg(skip)]
    pub resolved_models: Option<Vec<ModelEntry>>,
}

#[derive(Serialize)]
struct CompareResult {
    comparison: ineq_anova::evidence::ModelComparison,
    evidence: Vec<ModelEvidence>,
}

impl CompareArgs {
    pub fn resolve(mut self) -> Result<Self> {
        if self.kind == CompareKind::Order && self.resolved_models.is_none() {
            let path = self.models.as_ref().ok_or_else(|| UsageError("--models is required for --kind order".into()))?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let models: Vec<ModelEntry> = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("bad models file {}: {e}", path.display())))?;
            self.resolved_models = Some(models);
        }
        Ok(self)
    }

    fn prior(&self) -> PriorSpec {
        PriorSpec { beta_mean: self.beta_mean, beta_var: self.beta_var, nu0: self.nu0, s0sq: self.s0sq, fixed_sigma2: None }
    }

    pub fn run(&self, config: &RunConfig) -> Result<Vec<Output>> {
        let data = load(&self.data)?;
        let (labels, priors, evidence) = match self.kind {
            CompareKind::Order => self.order_evidence(&data)?,
            CompareKind::Variance => self.variance_evidence(&data)?,
        };
        let comparison = posterior_model_probs(&labels, &evidence, &priors)?;
        let mut table = seed_line(self.seed) + &comparison.render_table();
        for (label, e) in labels.iter().zip(&evidence) {
            if let Some(w) = &e.warning {
                table += &format!("warning ({label}): {w}\n");
            }
        }
        Ok(vec![
            Output::new("comparison.json", result_json(config, &CompareResult { comparison, evidence })?),
            Output::new("comparison.txt", table),
        ])
    }

    fn order_evidence(&self, data: &Dataset) -> Result<(Vec<String>, Vec<f64>, Vec<ModelEvidence>)> {
        let models = self.resolved_models.as_ref().ok_or_else(|| UsageError("no models given".into()))?;
        if models.is_empty() {
            bail!(UsageError("the models file lists no models".into()));
        }
        let k = data.n_treatments();
        let sets = models
            .iter()
            .map(|m| match &m.constraint {
                None => Ok(ConstraintSet::unconstrained(k)),
                Some(text) => parse_constraints(text, k)
                    .map_err(ineq_anova::Error::from)
                    .with_context(|| format!("model {}", m.name)),
            })
            .collect::<Result<Vec<_>>>()?;
        let method = match self.method {
            MethodKind::Encompassing => {
                OrderMethod::Encompassing { chain: self.chain.config(derive_seed(self.seed, "chain", 0)) }
            }
            MethodKind::Direct => OrderMethod::Direct { draws: self.draws, seed: derive_seed(self.seed, "evidence", 0) },
        };
        let evidence = order_model_evidence(&OneWayData::from_dataset(data), &self.prior(), &sets, &method)?;
        Ok((
            models.iter().map(|m| m.name.clone()).collect(),
            models.iter().map(|m| m.prior_model_prob).collect(),
            evidence,
        ))
    }

    fn variance_evidence(&self, data: &Dataset) -> Result<(Vec<String>, Vec<f64>, Vec<ModelEvidence>)> {
        if data.schema() != Schema::Latin {
            bail!(UsageError("--kind variance needs a y,row,col,treatment dataset".into()));
        }
        let (Some(sd_prior), Some(residual_prior)) = (self.sd_prior, self.residual_prior) else {
            bail!(UsageError("--kind variance needs explicit --sd-prior and --residual-prior".into()));
        };
        let specs: Vec<VarianceModelSpec> = standard_variance_models(sd_prior, residual_prior, self.mean_prior_var);
        let evidence = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| variance_model_evidence(data, spec, self.draws, derive_seed(self.seed, "evidence", i as u64)))
            .collect::<ineq_anova::Result<Vec<_>>>()?;
        let m = specs.len() as f64;
        Ok((specs.iter().map(|s| s.name.clone()).collect(), vec![1.0 / m; specs.len()], evidence))
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct LindleyArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Batch whose variance is zero in one model and free in the other.
    #[arg(long)]
    pub batch: String,
    /// Half-normal prior scales for the batch sd, e.g. 10,100,1000.
    #[arg(long, value_delimiter = ',', required = true)]
    pub scales: Vec<f64>,
    /// Prior for the other batch sds.
    #[arg(long)]
    pub sd_prior: ScalePrior,
    /// Prior for the residual sd.
    #[arg(long)]
    pub residual_prior: ScalePrior,
    #[arg(long, default_value_t = 1000.0)]
    pub mean_prior_var: f64,
    #[arg(long, default_value_t = 20_000)]
    pub draws: u64,
    /// Double the draws until every log marginal has at most this MC se.
    #[arg(long)]
    pub target_se: Option<f64>,
    #[arg(long, default_value_t = 2_000_000)]
    pub max_draws: u64,
    #[arg(long)]
    pub seed: u64,
}

impl LindleyArgs {
    pub fn run(&self, config: &RunConfig) -> Result<Vec<Output>> {
        if self.scales.len() < 2 {
            bail!(UsageError(format!("--scales needs at least two values, got {}", self.scales.len())));
        }
        let data = load(&self.data)?;
        let batches: Vec<&str> = match data.schema() {
            Schema::Latin => vec!["row", "col", "treatment"],
            Schema::Nested => vec!["treatment", "machine"],
        };
        if !batches.contains(&self.batch.as_str()) {
            bail!(UsageError(format!("batch must be one of {}, got {:?}", batches.join(", "), self.batch)));
        }
        let base = VarianceModelSpec {
            name: "base".into(),
            zero_components: Default::default(),
            sd_priors: batches.iter().filter(|&&b| b != self.batch).map(|b| (b.to_string(), self.sd_prior)).collect(),
            sd_order: None,
            residual_prior: self.residual_prior,
            mean_prior_var: self.mean_prior_var,
        };
        let opts = LindleyOptions {
            draws: self.draws,
            seed: derive_seed(self.seed, "evidence", 0),
            target_se: self.target_se,
            max_draws: self.max_draws,
        };
        let table = lindley_sensitivity(&data, &base, &self.batch, &self.scales, &opts)?;
        Ok(vec![
            Output::new("lindley.json", result_json(config, &table)?),
            Output::new("lindley.txt", seed_line(self.seed) + &table.render_table()),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    F,
    Lr,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassicalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub test: TestKind,
    /// EM convergence tolerance on the log-likelihood gain.
    #[arg(long, default_value_t = ineq_anova::classical::DEFAULT_EM_TOL)]
    pub tol: f64,
}

impl ClassicalArgs {
    pub fn run(&self, config: &RunConfig) -> Result<Vec<Output>> {
        let data = load(&self.data)?;
        let (json, table) = match self.test {
            TestKind::F => {
                let r = oneway_f_test(&data.by_treatment())?;
                (result_json(config, &r)?, r.render_table())
            }
            TestKind::Lr => {
                let r = lr_test_equal_treatments(&data, self.tol)?;
                (result_json(config, &r)?, r.render_table())
            }
        };
        Ok(vec![Output::new("classical.json", json), Output::new("classical.txt", table)])
    }
}
