//! Gibbs samplers for batched-effects models and the variance-component
//! display.
//!
//! All three models share one linear predictor,
//!
//! ```text
//! y_i = mu + sum_f delta_f x_if + sum_b alpha_b[l_b(i)] + e_i,
//! alpha_b[j] ~ N(0, sd_b^2),   e_i ~ N(0, sd_e^2)
//! ```
//!
//! and one sampler: every location parameter is drawn jointly from its
//! Gaussian full conditional, then each sd given the current effects.
//! Batches are centred only when draws are stored, with the removed mean
//! folded into `mu`; the sampled chain itself is the uncentred model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::designs::{Dataset, LatinSquareDesign, Schema};
use crate::error::{Error, Result};
use crate::numeric::{fmt_sig, mean, quantile_sorted, round_sig, sample_var};
use crate::rng::{self, Rng};
use crate::samplers::{nu_s2_over_chisq, ChainConfig, ScalePrior};

/// Floor on sds entering a precision, so that a chain drifting toward a
/// zero variance cannot overflow the location update.
const MIN_SD: f64 = 1e-100;

/// Prior variance of the mean and the treatment dummies in the two-level model.
pub const DUMMY_PRIOR_VAR: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HierModel {
    Latin,
    TwoLevel,
    ThreeLevel,
}

impl std::fmt::Display for HierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HierModel::Latin => "latin",
            HierModel::TwoLevel => "two-level",
            HierModel::ThreeLevel => "three-level",
        })
    }
}

/// One batch of exchangeable effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub name: String,
    pub levels: usize,
    pub sd_prior: ScalePrior,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument(format!("batch {} needs at least one level", self.name)));
        }
        self.sd_prior.validate()
    }
}

/// Prior and chain settings for the hierarchical samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierConfig {
    pub chain: ChainConfig,
    /// Per-batch sd priors; batches not listed use `default_sd_prior`.
    #[serde(default)]
    pub sd_priors: BTreeMap<String, ScalePrior>,
    /// Defaults to half-normal with scale `2 * sd(y)`.
    #[serde(default)]
    pub default_sd_prior: Option<ScalePrior>,
    /// Defaults to `Inv-chi2(1, var(y))` on the residual variance.
    #[serde(default)]
    pub residual_prior: Option<ScalePrior>,
    /// Nested models only: add a batch for the outcome measures.
    #[serde(default)]
    pub measure_batch: bool,
    /// Nested models only: drop the machine batch.
    #[serde(default)]
    pub no_machine_batch: bool,
}

impl HierConfig {
    pub fn new(chain: ChainConfig) -> Self {
        Self {
            chain,
            sd_priors: BTreeMap::new(),
            default_sd_prior: None,
            residual_prior: None,
            measure_batch: false,
            no_machine_batch: false,
        }
    }
}

/// Draws of one batch: its sd and its (centred) effect vector per draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDraws {
    pub name: String,
    pub levels: usize,
    pub sd: Vec<f64>,
    pub effects: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierDraws {
    pub model: HierModel,
    pub mu: Vec<f64>,
    /// Batches in model declaration order.
    pub batches: Vec<BatchDraws>,
    /// Two-level model only: `delta_1..delta_T` per draw, `delta_1 = 0`.
    pub contrasts: Option<Vec<Vec<f64>>>,
    pub residual_sd: Vec<f64>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl HierDraws {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn batch(&self, name: &str) -> Option<&BatchDraws> {
        self.batches.iter().find(|b| b.name == name)
    }

    /// Posterior mean of each contrast (two-level model).
    pub fn contrast_means(&self) -> Option<Vec<f64>> {
        let c = self.contrasts.as_ref()?;
        let t = c.first()?.len();
        Some((0..t).map(|j| c.iter().map(|d| d[j]).sum::<f64>() / c.len() as f64).collect())
    }

    /// Posterior mean of each effect in the named batch.
    pub fn effect_means(&self, name: &str) -> Option<Vec<f64>> {
        let b = self.batch(name)?;
        Some((0..b.levels).map(|j| b.effects.iter().map(|e| e[j]).sum::<f64>() / b.effects.len() as f64).collect())
    }

    /// One row per draw: `mu`, contrasts, each batch's sd and effects, residual sd.
    pub fn write_csv_to(&self, out: &mut impl Write) -> Result<()> {
        let mut header = vec!["mu".to_string()];
        let n_contrasts = self.contrasts.as_ref().and_then(|c| c.first()).map_or(0, Vec::len);
        header.extend((1..=n_contrasts).map(|t| format!("delta_{t}")));
        for b in &self.batches {
            header.push(format!("sd_{}", b.name));
            header.extend((1..=b.levels).map(|j| format!("{}_{j}", b.name)));
        }
        header.push("sd_residual".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![format!("{:?}", self.mu[i])];
            if let Some(c) = &self.contrasts {
                row.extend(c[i].iter().map(|v| format!("{v:?}")));
            }
            for b in &self.batches {
                row.push(format!("{:?}", b.sd[i]));
                row.extend(b.effects[i].iter().map(|v| format!("{v:?}")));
            }
            row.push(format!("{:?}", self.residual_sd[i]));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

/// Latin-square model with row, column and treatment batches.
pub fn gibbs_latin(data: &Dataset, config: &HierConfig) -> Result<HierDraws> {
    if data.schema() != Schema::Latin {
        return Err(Error::Validation("the latin model needs a y,row,col,treatment dataset".into()));
    }
    LatinSquareDesign::from_dataset(data)?;
    let defaults = Defaults::from(data);
    let batches = ["row", "col", "treatment"]
        .iter()
        .map(|&name| batch_term(data, name, config, &defaults))
        .collect::<Result<Vec<_>>>()?;
    let model = Model::new(data, MuPrior::Flat, Vec::new(), batches);
    run(HierModel::Latin, &model, defaults.residual(config), &config.chain)
}

/// Two-level model: treatment dummies (first treatment as reference) at the
/// machine level, machine effects as a batch.
pub fn gibbs_two_level_dummies(data: &Dataset, config: &HierConfig) -> Result<HierDraws> {
    check_nested(data, 1)?;
    let defaults = Defaults::from(data);
    let treatments = data.labels("treatment").expect("nested schema");
    let dummies = (1..data.n_treatments())
        .map(|t| treatments.iter().map(|&l| l == t).collect())
        .collect();
    let model = Model::new(data, MuPrior::Normal(DUMMY_PRIOR_VAR), dummies, nested_batches(data, config, &defaults, false)?);
    run(HierModel::TwoLevel, &model, defaults.residual(config), &config.chain)
}

/// Three-level model: treatments become a batch with their own sd.
pub fn gibbs_three_level(data: &Dataset, config: &HierConfig) -> Result<HierDraws> {
    check_nested(data, 2)?;
    let defaults = Defaults::from(data);
    let model = Model::new(data, MuPrior::Flat, Vec::new(), nested_batches(data, config, &defaults, true)?);
    run(HierModel::ThreeLevel, &model, defaults.residual(config), &config.chain)
}

fn check_nested(data: &Dataset, min_treatments: usize) -> Result<()> {
    if data.schema() != Schema::Nested {
        return Err(Error::Validation("this model needs a y,machine,treatment,measure dataset".into()));
    }
    if let Some(t) = data.by_treatment().iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("treatment {} has no machines", t + 1)));
    }
    if data.n_treatments() < min_treatments {
        return Err(Error::Validation(format!(
            "need at least {min_treatments} treatments to estimate a treatment sd, found {}",
            data.n_treatments()
        )));
    }
    Ok(())
}

fn nested_batches(data: &Dataset, config: &HierConfig, defaults: &Defaults, treatment: bool) -> Result<Vec<Term>> {
    let mut names = Vec::new();
    if treatment {
        names.push("treatment");
    }
    if !config.no_machine_batch {
        names.push("machine");
    }
    if config.measure_batch {
        names.push("measure");
    }
    names.iter().map(|&name| batch_term(data, name, config, defaults)).collect()
}

/// Data-scaled default priors.
struct Defaults {
    sd_y: f64,
}

impl Defaults {
    fn from(data: &Dataset) -> Self {
        let y = data.y();
        let sd = if y.len() > 1 { sample_var(&y).sqrt() } else { 0.0 };
        Self { sd_y: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 } }
    }

    fn sd_prior(&self, config: &HierConfig, name: &str) -> ScalePrior {
        config
            .sd_priors
            .get(name)
            .or(config.default_sd_prior.as_ref())
            .copied()
            .unwrap_or(ScalePrior::HalfNormal { scale: 2.0 * self.sd_y })
    }

    fn residual(&self, config: &HierConfig) -> ScalePrior {
        config.residual_prior.unwrap_or(ScalePrior::InvChiSquare { nu: 1.0, s2: self.sd_y * self.sd_y })
    }
}

fn batch_term(data: &Dataset, name: &str, config: &HierConfig, defaults: &Defaults) -> Result<Term> {
    let spec = BatchSpec {
        name: name.to_string(),
        levels: data.levels(name).expect("factor belongs to the schema"),
        sd_prior: defaults.sd_prior(config, name),
    };
    spec.validate()?;
    Ok(Term { labels: data.labels(name).expect("factor belongs to the schema"), spec })
}

struct Term {
    spec: BatchSpec,
    labels: Vec<usize>,
}

#[derive(Clone, Copy)]
enum MuPrior {
    Flat,
    Normal(f64),
}

/// Incidence structure of the linear predictor. Columns are laid out as
/// `[mu, dummies..., batch_1 levels..., batch_2 levels..., ...]`.
struct Model {
    y: Vec<f64>,
    mu_prior: MuPrior,
    n_dummies: usize,
    batches: Vec<Term>,
    offsets: Vec<usize>,
    /// Columns hit by each observation.
    columns: Vec<Vec<usize>>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

impl Model {
    fn new(data: &Dataset, mu_prior: MuPrior, dummies: Vec<Vec<bool>>, batches: Vec<Term>) -> Self {
        let y = data.y();
        let n_dummies = dummies.len();
        let mut offsets = Vec::with_capacity(batches.len());
        let mut p = 1 + n_dummies;
        for b in &batches {
            offsets.push(p);
            p += b.spec.levels;
        }
        let columns: Vec<Vec<usize>> = (0..y.len())
            .map(|i| {
                let mut cols = vec![0];
                cols.extend((0..n_dummies).filter(|&f| dummies[f][i]).map(|f| 1 + f));
                cols.extend(batches.iter().zip(&offsets).map(|(b, &o)| o + b.labels[i]));
                cols
            })
            .collect();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        for (cols, &yi) in columns.iter().zip(&y) {
            for &a in cols {
                xty[a] += yi;
                for &b in cols {
                    xtx[(a, b)] += 1.0;
                }
            }
        }
        Self { y, mu_prior, n_dummies, batches, offsets, columns, xtx, xty }
    }

    fn dim(&self) -> usize {
        self.xty.len()
    }

    fn rss(&self, theta: &DVector<f64>) -> f64 {
        self.columns
            .iter()
            .zip(&self.y)
            .map(|(cols, yi)| (yi - cols.iter().map(|&c| theta[c]).sum::<f64>()).powi(2))
            .sum()
    }

    fn effects<'a>(&self, theta: &'a DVector<f64>, b: usize) -> &'a [f64] {
        let o = self.offsets[b];
        &theta.as_slice()[o..o + self.batches[b].spec.levels]
    }
}

fn run(kind: HierModel, model: &Model, residual_prior: ScalePrior, chain: &ChainConfig) -> Result<HierDraws> {
    chain.validate()?;
    residual_prior.validate()?;
    let mut rng = rng::stream(chain.seed, "gibbs-hier", 0);
    let p = model.dim();
    let n = model.y.len();
    let y_sd = if n > 1 { sample_var(&model.y).sqrt() } else { 0.0 };
    let start = if y_sd > 0.0 { y_sd } else { 1.0 };
    let mut residual_sd = start;
    let mut sds = vec![start; model.batches.len()];

    let kept = chain.kept();
    let mut out = HierDraws {
        model: kind,
        mu: Vec::with_capacity(kept),
        batches: model
            .batches
            .iter()
            .map(|b| BatchDraws { name: b.spec.name.clone(), levels: b.spec.levels, sd: Vec::new(), effects: Vec::new() })
            .collect(),
        contrasts: (kind == HierModel::TwoLevel).then(Vec::new),
        residual_sd: Vec::with_capacity(kept),
        iterations: chain.iterations,
        burn_in: chain.burn_in,
        thin: chain.thin,
        seed: chain.seed,
    };

    for it in 0..chain.iterations {
        // locations | sds
        let inv_res = 1.0 / residual_sd.max(MIN_SD).powi(2);
        let mut q = &model.xtx * inv_res;
        if let MuPrior::Normal(v) = model.mu_prior {
            q[(0, 0)] += 1.0 / v;
        }
        for f in 0..model.n_dummies {
            q[(1 + f, 1 + f)] += 1.0 / DUMMY_PRIOR_VAR;
        }
        for (b, &o) in model.offsets.iter().enumerate() {
            let prec = 1.0 / sds[b].max(MIN_SD).powi(2);
            for j in o..o + model.batches[b].spec.levels {
                q[(j, j)] += prec;
            }
        }
        let chol = q
            .cholesky()
            .ok_or_else(|| Error::Numeric("location precision matrix is not positive definite".into()))?;
        let center = chol.solve(&(&model.xty * inv_res));
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        let theta = center + noise;

        // sds | locations
        for (b, sd) in sds.iter_mut().enumerate() {
            let effects = model.effects(&theta, b);
            let ss: f64 = effects.iter().map(|a| a * a).sum();
            *sd = sample_sd(&model.batches[b].spec.sd_prior, effects.len(), ss, *sd, &mut rng);
        }
        residual_sd = sample_sd(&residual_prior, n, model.rss(&theta), residual_sd, &mut rng);

        if chain.keeps(it) {
            let mut mu = theta[0];
            for (b, draws) in out.batches.iter_mut().enumerate() {
                let effects = model.effects(&theta, b);
                let m = mean(effects);
                mu += m;
                draws.effects.push(effects.iter().map(|a| a - m).collect());
                draws.sd.push(sds[b]);
            }
            if let Some(c) = out.contrasts.as_mut() {
                let mut delta = vec![0.0];
                delta.extend((0..model.n_dummies).map(|f| theta[1 + f]));
                c.push(delta);
            }
            out.mu.push(mu);
            out.residual_sd.push(residual_sd);
        }
    }
    Ok(out)
}

/// Draw an sd given `count` zero-mean normal values with sum of squares `ss`.
fn sample_sd(prior: &ScalePrior, count: usize, ss: f64, current: f64, rng: &mut Rng) -> f64 {
    let k = count as f64;
    match *prior {
        ScalePrior::InvChiSquare { nu, s2 } => nu_s2_over_chisq(nu + k, (nu * s2 + ss) / (nu + k), rng).sqrt(),
        ScalePrior::Uniform { upper } if count > 1 && ss > 0.0 => {
            // flat on sd gives Inv-chi2(k - 1, ss / (k - 1)) on the variance,
            // truncated at upper^2
            for _ in 0..100 {
                let v = nu_s2_over_chisq(k - 1.0, ss / (k - 1.0), rng);
                if v < upper * upper {
                    return v.sqrt();
                }
            }
            slice_log_sd(prior, k, ss, current, rng)
        }
        _ => slice_log_sd(prior, k, ss, current, rng),
    }
}

/// One slice-sampling update of `u = ln sd` with stepping out and shrinkage.
fn slice_log_sd(prior: &ScalePrior, k: f64, ss: f64, current: f64, rng: &mut Rng) -> f64 {
    let log_target = |u: f64| -> f64 {
        let sd = u.exp();
        -k * u - ss / (2.0 * sd * sd) + prior.log_density_sd(sd) + u
    };
    const WIDTH: f64 = 1.0;
    const MAX_STEPS: usize = 50;
    let u0 = current.ln();
    let level = log_target(u0) + rng.gen::<f64>().ln();
    let mut lo = u0 - WIDTH * rng.gen::<f64>();
    let mut hi = lo + WIDTH;
    let mut j = (MAX_STEPS as f64 * rng.gen::<f64>()) as usize;
    let mut m = MAX_STEPS - 1 - j;
    while j > 0 && log_target(lo) > level {
        lo -= WIDTH;
        j -= 1;
    }
    while m > 0 && log_target(hi) > level {
        hi += WIDTH;
        m -= 1;
    }
    loop {
        let u = lo + (hi - lo) * rng.gen::<f64>();
        if log_target(u) > level {
            return u.exp();
        }
        if u < u0 {
            lo = u;
        } else {
            hi = u;
        }
        if hi - lo < 1e-12 {
            return current;
        }
    }
}

/// Per-draw sd of the realized effects, denominator `levels - 1`.
pub fn finite_pop_sd(effect_draws: &[Vec<f64>]) -> Result<Vec<f64>> {
    effect_draws
        .iter()
        .map(|e| {
            if e.len() < 2 {
                Err(Error::InvalidArgument("finite-population sd needs at least 2 levels".into()))
            } else {
                Ok(sample_var(e).sqrt())
            }
        })
        .collect()
}

/// Median and central 50% / 95% intervals, rounded to 4 significant digits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub median: f64,
    pub q025: f64,
    pub q25: f64,
    pub q75: f64,
    pub q975: f64,
}

impl SummaryRow {
    pub fn from_series(name: &str, series: &[f64]) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::InvalidArgument(format!("no draws to summarize for {name}")));
        }
        let mut sorted = series.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p| round_sig(quantile_sorted(&sorted, p), 4);
        Ok(Self { name: name.to_string(), median: q(0.5), q025: q(0.025), q25: q(0.25), q75: q(0.75), q975: q(0.975) })
    }
}

/// Finite-population sds per batch and the residual sd; treatment
/// contrasts for the two-level model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarCompSummary {
    pub model: HierModel,
    pub draws: usize,
    pub sds: Vec<SummaryRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contrasts: Vec<SummaryRow>,
}

impl VarCompSummary {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model: {}  draws: {}", self.model, self.draws);
        let section = |s: &mut String, title: &str, rows: &[SummaryRow]| {
            let _ = writeln!(
                s,
                "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
                title, "median", "2.5%", "25%", "75%", "97.5%"
            );
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
                    r.name,
                    fmt_sig(r.median, 4),
                    fmt_sig(r.q025, 4),
                    fmt_sig(r.q25, 4),
                    fmt_sig(r.q75, 4),
                    fmt_sig(r.q975, 4)
                );
            }
        };
        section(&mut s, "sd", &self.sds);
        if !self.contrasts.is_empty() {
            s.push('\n');
            section(&mut s, "contrast", &self.contrasts);
        }
        s
    }
}

/// Summarize draws and render them as a fixed-width table.
pub fn anova_display(draws: &HierDraws) -> Result<(VarCompSummary, String)> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no draws to display".into()));
    }
    let mut sds = Vec::with_capacity(draws.batches.len() + 1);
    for b in &draws.batches {
        let series = if b.levels >= 2 { finite_pop_sd(&b.effects)? } else { b.sd.clone() };
        sds.push(SummaryRow::from_series(&b.name, &series)?);
    }
    sds.push(SummaryRow::from_series("residual", &draws.residual_sd)?);
    let mut contrasts = Vec::new();
    if let Some(c) = &draws.contrasts {
        for t in 1..c[0].len() {
            let series: Vec<f64> = c.iter().map(|d| d[t]).collect();
            contrasts.push(SummaryRow::from_series(&format!("delta_{}", t + 1), &series)?);
        }
    }
    let summary = VarCompSummary { model: draws.model, draws: draws.len(), sds, contrasts };
    let table = summary.render_table();
    Ok((summary, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::{make_latin_square, make_nested_design, simulate_latin, simulate_nested, SimulationTruth};

    fn chain(seed: u64) -> ChainConfig {
        ChainConfig { iterations: 4000, burn_in: 1000, thin: 1, seed }
    }

    fn latin_data(sd_row: f64, sd_treat: f64, seed: u64) -> Dataset {
        let design = make_latin_square(5, seed).unwrap();
        let truth = SimulationTruth {
            grand_mean: 10.0,
            effect_sds: [("row", sd_row), ("col", sd_row), ("treatment", sd_treat)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            residual_sd: 1.0,
            fixed_effects: None,
        };
        simulate_latin(&design, &truth, seed).unwrap().dataset
    }

    fn nested_data(seed: u64) -> Dataset {
        let design = make_nested_design(20, 4, 6, seed).unwrap();
        let truth = SimulationTruth {
            grand_mean: 0.0,
            effect_sds: [("machine".to_string(), 0.01)].into_iter().collect(),
            residual_sd: 0.1,
            fixed_effects: Some(vec![0.0, 1.0, 2.0, 3.0]),
        };
        simulate_nested(&design, &truth, seed).unwrap().dataset
    }

    fn median(xs: &[f64]) -> f64 {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        quantile_sorted(&s, 0.5)
    }

    #[test]
    fn finite_pop_sd_formula() {
        assert_eq!(finite_pop_sd(&[vec![3.0; 4]]).unwrap(), vec![0.0]);
        assert!((finite_pop_sd(&[vec![-1.0, 1.0]]).unwrap()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((finite_pop_sd(&[vec![0.0, 1.0, 2.0, 3.0]]).unwrap()[0] - 1.2909944487358056).abs() < 1e-12);
        assert!(finite_pop_sd(&[vec![1.0]]).is_err());
    }

    #[test]
    fn latin_draws_have_declared_shape() {
        let data = latin_data(1.0, 3.0, 1);
        let d = gibbs_latin(&data, &HierConfig::new(chain(2))).unwrap();
        assert_eq!(d.len(), 3000);
        let names: Vec<_> = d.batches.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names, ["row", "col", "treatment"]);
        for b in &d.batches {
            assert!(b.effects.iter().all(|e| e.len() == 5 && mean(e).abs() < 1e-9));
            assert!(b.sd.iter().all(|&s| s > 0.0));
        }
        assert!(d.residual_sd.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn latin_recovers_dominant_treatment_sd() {
        let data = latin_data(0.1, 5.0, 3);
        let d = gibbs_latin(&data, &HierConfig::new(chain(4))).unwrap();
        let m = |n: &str| median(&d.batch(n).unwrap().sd);
        assert!(m("treatment") > m("row") && m("treatment") > m("col"));
    }

    #[test]
    fn latin_rejects_non_latin_data() {
        let data = nested_data(1);
        assert!(matches!(gibbs_latin(&data, &HierConfig::new(chain(1))), Err(Error::Validation(_))));
    }

    #[test]
    fn deterministic_by_seed() {
        let data = latin_data(1.0, 2.0, 5);
        let a = gibbs_latin(&data, &HierConfig::new(chain(9))).unwrap();
        let b = gibbs_latin(&data, &HierConfig::new(chain(9))).unwrap();
        assert_eq!(a, b);
        let nested = nested_data(2);
        let c = gibbs_three_level(&nested, &HierConfig::new(chain(9))).unwrap();
        assert_eq!(c, gibbs_three_level(&nested, &HierConfig::new(chain(9))).unwrap());
    }

    #[test]
    fn constant_data_has_no_batch_variation() {
        let data = latin_data(1.0, 1.0, 6).map_y(|_| 4.0).unwrap();
        let mut config = HierConfig::new(chain(7));
        config.default_sd_prior = Some(ScalePrior::HalfNormal { scale: 1.0 });
        config.residual_prior = Some(ScalePrior::InvChiSquare { nu: 1.0, s2: 1.0 });
        let d = gibbs_latin(&data, &config).unwrap();
        let (summary, _) = anova_display(&d).unwrap();
        for row in summary.sds.iter().filter(|r| r.name != "residual") {
            assert!(row.median < 0.1, "{} median {}", row.name, row.median);
        }
    }

    #[test]
    fn two_level_recovers_contrasts() {
        let data = nested_data(3);
        let d = gibbs_two_level_dummies(&data, &HierConfig::new(chain(5))).unwrap();
        assert!(d.contrasts.as_ref().unwrap().iter().all(|c| c[0] == 0.0));
        let means = d.contrast_means().unwrap();
        for (m, truth) in means[1..].iter().zip([1.0, 2.0, 3.0]) {
            assert!((m - truth).abs() < 0.2, "{means:?}");
        }
        let (summary, table) = anova_display(&d).unwrap();
        assert_eq!(summary.contrasts.len(), 3);
        assert!(summary.sds.iter().all(|r| r.name != "treatment"));
        assert!(table.contains("delta_2"));
    }

    #[test]
    fn two_level_needs_every_treatment() {
        let data = nested_data(4);
        let rows = data.rows().iter().filter(|o| o.factors[1] != 1).copied().collect();
        let gap = Dataset::new(Schema::Nested, rows).unwrap();
        assert!(matches!(gibbs_two_level_dummies(&gap, &HierConfig::new(chain(1))), Err(Error::Validation(_))));
    }

    #[test]
    fn three_level_needs_two_treatments() {
        let data = nested_data(4);
        let rows = data.rows().iter().filter(|o| o.factors[1] == 0).copied().collect();
        let single = Dataset::new(Schema::Nested, rows).unwrap();
        assert!(matches!(gibbs_three_level(&single, &HierConfig::new(chain(1))), Err(Error::Validation(_))));
    }

    #[test]
    fn three_level_treatment_sd_in_range() {
        let data = nested_data(5);
        let d = gibbs_three_level(&data, &HierConfig::new(chain(6))).unwrap();
        let fp = finite_pop_sd(&d.batch("treatment").unwrap().effects).unwrap();
        let med = median(&fp);
        assert!(med > 0.5 && med < 3.0, "{med}");
    }

    #[test]
    fn constant_sd_series_summary() {
        let row = SummaryRow::from_series("x", &[2.0; 50]).unwrap();
        assert_eq!((row.median, row.q025, row.q25, row.q75, row.q975), (2.0, 2.0, 2.0, 2.0, 2.0));
    }

    #[test]
    fn table_and_json_agree() {
        let data = latin_data(1.0, 2.0, 8);
        let d = gibbs_latin(&data, &HierConfig::new(chain(8))).unwrap();
        let (summary, table) = anova_display(&d).unwrap();
        let json: VarCompSummary = serde_json::from_str(&serde_json::to_string(&summary).unwrap()).unwrap();
        for r in &json.sds {
            assert!(r.q025 <= r.q25 && r.q25 <= r.median && r.median <= r.q75 && r.q75 <= r.q975);
            let line = table.lines().find(|l| l.split_whitespace().next() == Some(r.name.as_str())).unwrap();
            let cells: Vec<f64> = line.split_whitespace().skip(1).map(|c| c.parse().unwrap()).collect();
            assert_eq!(cells, vec![r.median, r.q025, r.q25, r.q75, r.q975]);
        }
    }

    #[test]
    fn uniform_and_conjugate_sd_priors_run() {
        let data = latin_data(1.0, 2.0, 9);
        for prior in [ScalePrior::Uniform { upper: 50.0 }, ScalePrior::InvChiSquare { nu: 1.0, s2: 1.0 }] {
            let mut config = HierConfig::new(chain(3));
            config.default_sd_prior = Some(prior);
            let d = gibbs_latin(&data, &config).unwrap();
            assert!(d.batches.iter().all(|b| b.sd.iter().all(|&s| s > 0.0 && s < 1e3)));
            if let ScalePrior::Uniform { upper } = prior {
                assert!(d.batches.iter().all(|b| b.sd.iter().all(|&s| s < upper)));
            }
        }
    }
}
