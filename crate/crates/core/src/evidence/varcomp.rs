//! Evidence for variance-structure models of batched effects.
//!
//! Conditional on the variance components every effect is Gaussian, so the
//! effects integrate out exactly:
//!
//! ```text
//! y ~ N(0, sigma2 I + v_mu J + sum_b sigma_b^2 Z_b Z_b')
//! ```
//!
//! Only the scale parameters are averaged over by Monte Carlo. A component
//! listed as zero is removed from the model, not given a tiny variance.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{EvidenceMethod, ModelEvidence};
use crate::constraints::ConstraintSet;
use crate::designs::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{fmt_sig, LogMeanAccumulator};
use crate::rng;
use crate::samplers::ScalePrior;

const BLOCK: u64 = 4096;

fn batch_labels(data: &Dataset, name: &str) -> Result<Vec<usize>> {
    data.labels(name).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "batch {name:?} is not a factor of this dataset (factors: {})",
            data.schema().factor_names().join(", ")
        ))
    })
}

fn dense_covariance(data: &Dataset, varcomps: &BTreeMap<String, f64>, residual: f64, mean_prior_var: f64) -> Result<DMatrix<f64>> {
    if !(residual > 0.0) || !(mean_prior_var >= 0.0) {
        return Err(Error::InvalidArgument("residual variance must be positive and mean prior variance nonnegative".into()));
    }
    let n = data.len();
    let mut cov = DMatrix::from_element(n, n, mean_prior_var);
    for i in 0..n {
        cov[(i, i)] += residual;
    }
    for (name, &var) in varcomps {
        if !(var >= 0.0) {
            return Err(Error::InvalidArgument(format!("variance of {name} must be nonnegative")));
        }
        let labels = batch_labels(data, name)?;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    cov[(i, j)] += var;
                }
            }
        }
    }
    Ok(cov)
}

fn cholesky_with_jitter(cov: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch);
    }
    let jitter = 1e-10 * cov.diagonal().max();
    let n = cov.nrows();
    (cov + DMatrix::identity(n, n) * jitter)
        .cholesky()
        .ok_or_else(|| Error::Numeric("marginal covariance is not positive definite".into()))
}

/// Exact log density of `y` with all Gaussian effects integrated out.
/// `varcomps` maps batch names to variances; absent batches have none.
pub fn integrated_likelihood_varcomps(
    data: &Dataset,
    varcomps: &BTreeMap<String, f64>,
    residual: f64,
    mean_prior_var: f64,
) -> Result<f64> {
    let cov = dense_covariance(data, varcomps, residual, mean_prior_var)?;
    let n = cov.nrows();
    let ch = cholesky_with_jitter(cov)?;
    let y = DVector::from_vec(data.y());
    let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let alpha = ch.solve(&y);
    Ok(-0.5 * (n as f64 * (2.0 * PI).ln() + logdet + y.dot(&alpha)))
}

/// Gradient of [`integrated_likelihood_varcomps`] with respect to each batch
/// variance and the residual variance (key `"residual"`):
/// `0.5 * (a' Z Z' a - tr(V^-1 Z Z'))` with `a = V^-1 y`.
pub fn integrated_likelihood_gradient(
    data: &Dataset,
    varcomps: &BTreeMap<String, f64>,
    residual: f64,
    mean_prior_var: f64,
) -> Result<BTreeMap<String, f64>> {
    let cov = dense_covariance(data, varcomps, residual, mean_prior_var)?;
    let n = cov.nrows();
    let ch = cholesky_with_jitter(cov)?;
    let inv = ch.inverse();
    let alpha = &inv * DVector::from_vec(data.y());
    let mut grad = BTreeMap::new();
    for name in varcomps.keys() {
        let labels = batch_labels(data, name)?;
        let levels = labels.iter().max().map_or(0, |m| m + 1);
        // Z'a and tr(V^-1 Z Z') = sum over levels of the block sums of V^-1.
        let mut za = vec![0.0; levels];
        for i in 0..n {
            za[labels[i]] += alpha[i];
        }
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    trace += inv[(i, j)];
                }
            }
        }
        grad.insert(name.clone(), 0.5 * (za.iter().map(|v| v * v).sum::<f64>() - trace));
    }
    grad.insert("residual".into(), 0.5 * (alpha.dot(&alpha) - inv.trace()));
    Ok(grad)
}

/// Low-rank evaluator of the same density: with `V = s2 I + U D U'`,
///
/// ```text
/// log|V|   = (n - q) log s2 + sum log d + log|s2 D^-1 + U'U|
/// y'V^-1 y = (y'y - (U'y)' (s2 D^-1 + U'U)^-1 U'y) / s2
/// ```
///
/// so each evaluation costs a `q x q` Cholesky with `q` the number of
/// effect levels.
pub(crate) struct MarginalKernel {
    n: usize,
    yty: f64,
    utu: Vec<f64>,
    uty: Vec<f64>,
    q: usize,
    /// Column ranges of each batch; the mean column is 0.
    blocks: Vec<std::ops::Range<usize>>,
    scratch: Vec<f64>,
    rhs: Vec<f64>,
    active: Vec<(usize, f64)>,
}

impl MarginalKernel {
    pub(crate) fn new(data: &Dataset, batches: &[String]) -> Result<Self> {
        let n = data.len();
        let mut cols_per_obs: Vec<Vec<usize>> = vec![vec![0]; n];
        let mut blocks = Vec::new();
        let mut q = 1;
        for name in batches {
            let labels = batch_labels(data, name)?;
            let levels = labels.iter().max().map_or(0, |m| m + 1);
            for (i, &l) in labels.iter().enumerate() {
                cols_per_obs[i].push(q + l);
            }
            blocks.push(q..q + levels);
            q += levels;
        }
        let y = data.y();
        let mut utu = vec![0.0; q * q];
        let mut uty = vec![0.0; q];
        for (i, cols) in cols_per_obs.iter().enumerate() {
            for &a in cols {
                uty[a] += y[i];
                for &b in cols {
                    utu[a * q + b] += 1.0;
                }
            }
        }
        Ok(Self {
            n,
            yty: y.iter().map(|v| v * v).sum(),
            utu,
            uty,
            q,
            blocks,
            scratch: Vec::with_capacity(q * q),
            rhs: Vec::with_capacity(q),
            active: Vec::with_capacity(q),
        })
    }

    /// Log density for the given mean-prior variance, per-batch variances
    /// (in the constructor's order; 0 removes the batch) and residual.
    pub(crate) fn log_lik(&mut self, mean_var: f64, batch_vars: &[f64], residual: f64) -> f64 {
        self.active.clear();
        if mean_var > 0.0 {
            self.active.push((0, mean_var));
        }
        for (range, &v) in self.blocks.iter().zip(batch_vars) {
            if v > 0.0 {
                self.active.extend(range.clone().map(|c| (c, v)));
            }
        }
        let m = self.active.len();
        self.scratch.clear();
        self.rhs.clear();
        let mut log_d = 0.0;
        for &(a, da) in &self.active {
            log_d += da.ln();
            self.rhs.push(self.uty[a]);
            for &(b, _) in &self.active {
                self.scratch.push(self.utu[a * self.q + b]);
            }
        }
        for (i, &(_, d)) in self.active.iter().enumerate() {
            self.scratch[i * m + i] += residual / d;
        }
        let Some(logdet_m) = cholesky_in_place(&mut self.scratch, m) else {
            return f64::NEG_INFINITY;
        };
        forward_solve(&self.scratch, m, &mut self.rhs);
        let quad_u: f64 = self.rhs.iter().map(|v| v * v).sum();
        let n = self.n as f64;
        let logdet_v = (n - m as f64) * residual.ln() + log_d + logdet_m;
        let quad = (self.yty - quad_u).max(0.0) / residual;
        -0.5 * (n * (2.0 * PI).ln() + logdet_v + quad)
    }
}

/// Lower Cholesky factor in place (row-major); returns `log|A|`.
fn cholesky_in_place(a: &mut [f64], m: usize) -> Option<f64> {
    let mut logdet = 0.0;
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        logdet += 2.0 * d.ln();
        for i in (j + 1)..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = s / d;
        }
    }
    Some(logdet)
}

fn forward_solve(l: &[f64], m: usize, b: &mut [f64]) {
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * m + k] * b[k];
        }
        b[i] = s / l[i * m + i];
    }
}

/// A variance-structure model: which batches exist, which are pinned at
/// zero, the priors on the free sds and an optional sd ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModelSpec {
    pub name: String,
    #[serde(default)]
    pub zero_components: BTreeSet<String>,
    /// Priors of the free batch sds.
    pub sd_priors: BTreeMap<String, ScalePrior>,
    /// Chain of groups of batch names ordered by sd, e.g. `[[row, col], [treatment]]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd_order: Option<Vec<Vec<String>>>,
    pub residual_prior: ScalePrior,
    pub mean_prior_var: f64,
}

impl VarianceModelSpec {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        for name in self.zero_components.iter().chain(self.sd_priors.keys()) {
            batch_labels(data, name)?;
        }
        if let Some(name) = self.zero_components.iter().find(|n| self.sd_priors.contains_key(*n)) {
            return Err(Error::InvalidArgument(format!("{name} is both pinned at zero and given a prior")));
        }
        for p in self.sd_priors.values().chain([&self.residual_prior]) {
            p.validate()?;
        }
        if !(self.mean_prior_var > 0.0 && self.mean_prior_var.is_finite()) {
            return Err(Error::InvalidArgument("mean_prior_var must be positive".into()));
        }
        if let Some(chain) = &self.sd_order {
            let mut seen = BTreeSet::new();
            for name in chain.iter().flatten() {
                if !self.sd_priors.contains_key(name) {
                    return Err(Error::InvalidArgument(format!(
                        "ordered component {name} must be free (zero components cannot be ordered)"
                    )));
                }
                if !seen.insert(name) {
                    return Err(Error::InvalidArgument(format!("{name} appears twice in the sd ordering")));
                }
            }
        }
        Ok(())
    }

    /// Free batches in sampling order.
    fn free(&self) -> Vec<String> {
        self.sd_priors.keys().cloned().collect()
    }

    /// The ordering as index groups into [`free`](Self::free).
    fn order_indices(&self) -> Option<Vec<Vec<usize>>> {
        let free = self.free();
        self.sd_order.as_ref().filter(|c| c.len() >= 2).map(|chain| {
            chain
                .iter()
                .map(|g| g.iter().map(|n| free.iter().position(|f| f == n).expect("validated")).collect())
                .collect()
        })
    }

    /// Exact prior probability of the ordering when every ordered sd has the
    /// same prior; `None` when it must be estimated.
    fn exact_order_proportion(&self) -> Option<f64> {
        let chain = self.sd_order.as_ref().filter(|c| c.len() >= 2)?;
        let mut priors = chain.iter().flatten().map(|n| self.sd_priors[n]);
        let first = priors.next()?;
        if !priors.all(|p| p == first) {
            return None;
        }
        let mut idx = 0;
        let groups: Vec<Vec<usize>> = chain
            .iter()
            .map(|g| {
                g.iter()
                    .map(|_| {
                        idx += 1;
                        idx - 1
                    })
                    .collect()
            })
            .collect();
        ConstraintSet::new(idx, groups).ok().map(|cs| cs.prior_proportion())
    }
}

fn order_holds(chain: &[Vec<usize>], sds: &[f64]) -> bool {
    chain.windows(2).all(|w| {
        let lower = w[0].iter().map(|&i| sds[i]).fold(f64::NEG_INFINITY, f64::max);
        let upper = w[1].iter().map(|&i| sds[i]).fold(f64::INFINITY, f64::min);
        lower < upper
    })
}

/// Prior Monte Carlo estimate of `log p(y | spec)`.
///
/// When the ordered sds have different priors the ordering's prior
/// probability is estimated from the same draws and its error is added to
/// the reported standard error.
pub fn variance_model_evidence(data: &Dataset, spec: &VarianceModelSpec, n: u64, seed: u64) -> Result<ModelEvidence> {
    spec.validate(data)?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one prior draw".into()));
    }
    let free = spec.free();
    let priors: Vec<ScalePrior> = free.iter().map(|n| spec.sd_priors[n]).collect();
    let chain = spec.order_indices();
    let mut kernel = MarginalKernel::new(data, &free)?;
    let mut acc = LogMeanAccumulator::new();
    let mut inside_count = 0u64;
    let mut vars = vec![0.0; free.len()];
    let mut sds = vec![0.0; free.len()];
    for b in 0..n.div_ceil(BLOCK) {
        let mut rng = rng::stream(seed, "variance-evidence", b);
        for _ in (b * BLOCK)..((b + 1) * BLOCK).min(n) {
            for ((v, s), p) in vars.iter_mut().zip(sds.iter_mut()).zip(&priors) {
                *v = p.sample_variance(&mut rng);
                *s = v.sqrt();
            }
            let residual = spec.residual_prior.sample_variance(&mut rng);
            let inside = chain.as_ref().map_or(true, |c| order_holds(c, &sds));
            if inside && residual > 0.0 {
                inside_count += 1;
                acc.push(kernel.log_lik(spec.mean_prior_var, &vars, residual));
            } else {
                acc.push(f64::NEG_INFINITY);
            }
        }
    }
    let est = acc.finish();
    if est.n_nonzero == 0 || !est.log_mean.is_finite() {
        return Err(Error::Degenerate(format!(
            "no usable prior draw for model {:?} out of {n}; increase the number of draws",
            spec.name
        )));
    }
    let (log_c, se_c) = match (&chain, spec.exact_order_proportion()) {
        (None, _) => (0.0, 0.0),
        (Some(_), Some(c)) => (c.ln(), 0.0),
        (Some(_), None) => {
            let p = inside_count as f64 / n as f64;
            (p.ln(), ((1.0 - p) / (p * n as f64)).sqrt())
        }
    };
    Ok(ModelEvidence {
        log_marginal: est.log_mean - log_c,
        mc_se_log: est.se_log.hypot(se_c),
        n_draws: n,
        method: EvidenceMethod::DirectPriorMc,
        warning: None,
    })
}

/// The three Latin-square variance structures: row and column variance zero;
/// row and column sds below the treatment sd; treatment variance zero.
pub fn standard_variance_models(sd_prior: ScalePrior, residual_prior: ScalePrior, mean_prior_var: f64) -> Vec<VarianceModelSpec> {
    let names = |xs: &[&str]| -> BTreeSet<String> { xs.iter().map(|s| s.to_string()).collect() };
    let priors = |xs: &[&str]| -> BTreeMap<String, ScalePrior> { xs.iter().map(|s| (s.to_string(), sd_prior)).collect() };
    vec![
        VarianceModelSpec {
            name: "rowcol-zero".into(),
            zero_components: names(&["row", "col"]),
            sd_priors: priors(&["treatment"]),
            sd_order: None,
            residual_prior,
            mean_prior_var,
        },
        VarianceModelSpec {
            name: "rowcol-below-treatment".into(),
            zero_components: BTreeSet::new(),
            sd_priors: priors(&["row", "col", "treatment"]),
            sd_order: Some(vec![vec!["row".into(), "col".into()], vec!["treatment".into()]]),
            residual_prior,
            mean_prior_var,
        },
        VarianceModelSpec {
            name: "treatment-zero".into(),
            zero_components: names(&["treatment"]),
            sd_priors: priors(&["row", "col"]),
            sd_order: None,
            residual_prior,
            mean_prior_var,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LindleyOptions {
    pub draws: u64,
    pub seed: u64,
    /// Keep doubling the draws until every log marginal has at most this
    /// standard error, up to `max_draws`.
    pub target_se: Option<f64>,
    pub max_draws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LindleyRow {
    pub scale: f64,
    /// `log p(y | batch variance 0) - log p(y | batch sd ~ half-normal(scale))`.
    pub log_bf_zero_vs_free: f64,
    pub mc_se: f64,
    pub log_marginal_free: f64,
    pub draws_free: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LindleyTable {
    pub batch: String,
    pub log_marginal_zero: f64,
    pub mc_se_zero: f64,
    pub draws_zero: u64,
    pub rows: Vec<LindleyRow>,
}

impl LindleyTable {
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "batch {}: log p(y | zero variance) = {} (mc se {})\n{:>12}  {:>14}  {:>10}  {:>14}\n",
            self.batch,
            fmt_sig(self.log_marginal_zero, 6),
            fmt_sig(self.mc_se_zero, 3),
            "prior scale",
            "log BF(0:free)",
            "mc se",
            "log p(y|free)"
        );
        for r in &self.rows {
            out += &format!(
                "{:>12}  {:>14}  {:>10}  {:>14}\n",
                fmt_sig(r.scale, 4),
                fmt_sig(r.log_bf_zero_vs_free, 5),
                fmt_sig(r.mc_se, 3),
                fmt_sig(r.log_marginal_free, 6)
            );
        }
        out
    }
}

fn evidence_to_target(data: &Dataset, spec: &VarianceModelSpec, opts: &LindleyOptions, seed: u64) -> Result<ModelEvidence> {
    let mut n = opts.draws;
    loop {
        let e = variance_model_evidence(data, spec, n, seed)?;
        let done = opts.target_se.map_or(true, |t| e.mc_se_log <= t);
        if done || n >= opts.max_draws {
            return Ok(e);
        }
        n = (n * 2).min(opts.max_draws);
    }
}

/// Log Bayes factor of "batch variance is zero" against "batch sd has a
/// half-normal prior with scale s", for each scale.
///
/// All free models share one seed, so the rows use common random numbers
/// and identical scales give identical rows.
pub fn lindley_sensitivity(
    data: &Dataset,
    base: &VarianceModelSpec,
    batch: &str,
    scales: &[f64],
    opts: &LindleyOptions,
) -> Result<LindleyTable> {
    if scales.len() < 2 {
        return Err(Error::InvalidArgument("need at least two prior scales".into()));
    }
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) || scales.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("prior scales must be positive and in increasing order".into()));
    }
    batch_labels(data, batch)?;
    if base.sd_order.iter().flatten().flatten().any(|n| n == batch) {
        return Err(Error::InvalidArgument(format!("{batch} cannot be part of the base model's sd ordering")));
    }
    let mut zero = base.clone();
    zero.name = format!("{batch}-zero");
    zero.sd_priors.remove(batch);
    zero.zero_components.insert(batch.to_string());
    let z = evidence_to_target(data, &zero, opts, rng::derive_seed(opts.seed, "lindley-zero", 0))?;

    let free_seed = rng::derive_seed(opts.seed, "lindley-free", 0);
    let mut rows = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut free = base.clone();
        free.name = format!("{batch}-free-{scale}");
        free.zero_components.remove(batch);
        free.sd_priors.insert(batch.to_string(), ScalePrior::HalfNormal { scale });
        let f = evidence_to_target(data, &free, opts, free_seed)?;
        rows.push(LindleyRow {
            scale,
            log_bf_zero_vs_free: z.log_marginal - f.log_marginal,
            mc_se: z.mc_se_log.hypot(f.mc_se_log),
            log_marginal_free: f.log_marginal,
            draws_free: f.n_draws,
        });
    }
    Ok(LindleyTable {
        batch: batch.to_string(),
        log_marginal_zero: z.log_marginal,
        mc_se_zero: z.mc_se_log,
        draws_zero: z.n_draws,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::{make_latin_square, simulate_latin, SimulationTruth};
    use crate::samplers::log_normal_density;

    fn latin(seed: u64, sds: [f64; 3], residual_sd: f64) -> Dataset {
        let sq = make_latin_square(5, seed).unwrap();
        let truth = SimulationTruth {
            grand_mean: 3.0,
            effect_sds: [("row", sds[0]), ("col", sds[1]), ("treatment", sds[2])]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            residual_sd,
            fixed_effects: None,
        };
        simulate_latin(&sq, &truth, seed).unwrap().dataset
    }

    fn comps(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn reduces_to_iid_normal() {
        let data = latin(1, [1.0, 1.0, 1.0], 1.0);
        let direct: f64 = data.y().iter().map(|&y| log_normal_density(y, 0.0, 1.0)).sum();
        let v = integrated_likelihood_varcomps(&data, &BTreeMap::new(), 1.0, 0.0).unwrap();
        assert!((v - direct).abs() < 1e-10);
    }

    #[test]
    fn permutation_invariance() {
        let data = latin(2, [1.0, 2.0, 3.0], 1.0);
        let mut rows = data.rows().to_vec();
        rows.reverse();
        rows.swap(3, 17);
        let shuffled = Dataset::new(data.schema(), rows).unwrap();
        let vc = comps(&[("row", 0.7), ("col", 1.3), ("treatment", 2.0)]);
        let a = integrated_likelihood_varcomps(&data, &vc, 1.1, 50.0).unwrap();
        let b = integrated_likelihood_varcomps(&shuffled, &vc, 1.1, 50.0).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn kernel_matches_dense_evaluation() {
        let data = latin(3, [1.0, 0.5, 3.0], 1.0);
        let names: Vec<String> = ["col", "row", "treatment"].iter().map(|s| s.to_string()).collect();
        let mut kernel = MarginalKernel::new(&data, &names).unwrap();
        for (vars, residual, mean_var) in [
            ([0.3, 1.2, 4.0], 0.8, 1000.0),
            ([0.0, 0.0, 9.0], 2.0, 10.0),
            ([0.0, 0.0, 0.0], 1.5, 1000.0),
            ([1e-6, 50.0, 0.1], 1e-2, 1.0),
        ] {
            let vc: BTreeMap<String, f64> = names.iter().cloned().zip(vars).filter(|(_, v)| *v > 0.0).collect();
            let dense = integrated_likelihood_varcomps(&data, &vc, residual, mean_var).unwrap();
            let fast = kernel.log_lik(mean_var, &vars, residual);
            assert!((dense - fast).abs() < 1e-7 * dense.abs().max(1.0), "{dense} vs {fast}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = latin(4, [1.0, 0.5, 2.0], 1.0);
        let vc = comps(&[("row", 0.8), ("col", 0.4), ("treatment", 2.5)]);
        let residual = 1.3;
        let grad = integrated_likelihood_gradient(&data, &vc, residual, 100.0).unwrap();
        for name in ["row", "col", "treatment", "residual"] {
            let base = if name == "residual" { residual } else { vc[name] };
            let h = 1e-4 * base;
            let eval = |delta: f64| {
                if name == "residual" {
                    integrated_likelihood_varcomps(&data, &vc, residual + delta, 100.0).unwrap()
                } else {
                    let mut v = vc.clone();
                    *v.get_mut(name).unwrap() += delta;
                    integrated_likelihood_varcomps(&data, &v, residual, 100.0).unwrap()
                }
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (grad[name] - fd).abs() / grad[name].abs().max(1e-8);
            assert!(rel < 1e-5, "{name}: analytic {} vs fd {fd}", grad[name]);
        }
    }

    #[test]
    fn unknown_batch_is_rejected() {
        let data = latin(1, [1.0, 1.0, 1.0], 1.0);
        assert!(integrated_likelihood_varcomps(&data, &comps(&[("machine", 1.0)]), 1.0, 1.0).is_err());
    }

    #[test]
    fn spec_validation() {
        let data = latin(1, [1.0, 1.0, 1.0], 1.0);
        let hn = ScalePrior::HalfNormal { scale: 1.0 };
        let mut specs = standard_variance_models(hn, ScalePrior::InvChiSquare { nu: 1.0, s2: 10.0 }, 1000.0);
        for s in &specs {
            s.validate(&data).unwrap();
        }
        specs[0].sd_priors.insert("row".into(), hn);
        assert!(specs[0].validate(&data).is_err());
        specs[2].sd_order = Some(vec![vec!["row".into()], vec!["treatment".into()]]);
        assert!(specs[2].validate(&data).is_err());
    }

    #[test]
    fn exact_order_proportion_for_exchangeable_priors() {
        let hn = ScalePrior::HalfNormal { scale: 1.0 };
        let specs = standard_variance_models(hn, hn, 1000.0);
        assert!((specs[1].exact_order_proportion().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let mut uneven = specs[1].clone();
        uneven.sd_priors.insert("treatment".into(), ScalePrior::HalfNormal { scale: 2.0 });
        assert!(uneven.exact_order_proportion().is_none());
    }

    #[test]
    fn lindley_rejects_bad_scales() {
        let data = latin(1, [1.0, 1.0, 1.0], 1.0);
        let hn = ScalePrior::HalfNormal { scale: 1.0 };
        let base = standard_variance_models(hn, hn, 1000.0)[1].clone();
        let opts = LindleyOptions { draws: 1000, seed: 1, target_se: None, max_draws: 1000 };
        assert!(lindley_sensitivity(&data, &base, "row", &[1.0], &opts).is_err());
        assert!(lindley_sensitivity(&data, &base, "row", &[10.0, 1.0], &opts).is_err());
        assert!(lindley_sensitivity(&data, &base, "row", &[1.0, 10.0], &opts).is_err());
    }
}
