//! Evidence for order-constrained cell-means models.
//!
//! The constrained prior is the encompassing prior truncated to the
//! constraint and renormalised by its exact prior proportion `c`. Hence
//!
//! ```text
//! p(y | M) = E_prior[ L(theta) I(theta) ] / c                (direct)
//! p(y | M) = p(y | M_0) * P(I = 1 | y, M_0) / c               (encompassing)
//! ```
//!
//! where `M_0` is the unconstrained model. The direct route only touches
//! prior draws, the encompassing route only posterior draws, so each checks
//! the other.

use std::ops::Range;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{EvidenceMethod, ModelEvidence};
use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::numeric::{log_trapezoid, LogMeanAccumulator};
use crate::rng;
use crate::samplers::{
    effective_sample_size, gibbs_oneway, gibbs_prior_only, log_normal_density, log_scaled_inv_chisq_density,
    ChainConfig, OneWayData, PosteriorDraws, PriorSpec,
};

/// Prior draws per independently seeded block.
pub const BLOCK: u64 = 8192;

/// Exact log marginal likelihood of the unconstrained model.
///
/// Given `sigma2` the effects integrate out in closed form; the remaining
/// one-dimensional integral over `log sigma2` is done by the trapezoid rule.
pub fn log_marginal_unconstrained(data: &OneWayData, prior: &PriorSpec) -> Result<f64> {
    prior.validate()?;
    let conditional = |sigma2: f64| -> f64 {
        data.groups()
            .iter()
            .filter(|g| g.n > 0)
            .map(|g| {
                let n = g.n as f64;
                -0.5 * (n - 1.0) * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * n.ln() - g.ss / (2.0 * sigma2)
                    + log_normal_density(g.mean, prior.beta_mean, sigma2 / n + prior.beta_var)
            })
            .sum()
    };
    if let Some(s) = prior.fixed_sigma2 {
        return Ok(conditional(s));
    }
    let centre = prior.s0sq.ln();
    let integrand = |t: f64| {
        let v = t.exp();
        conditional(v) + log_scaled_inv_chisq_density(v, prior.nu0, prior.s0sq) + t
    };
    Ok(log_trapezoid(integrand, centre - 60.0, centre + 90.0, 60_000))
}

/// `log ∫ L(beta, sigma2) Inv-chi2(sigma2 | nu0, s0sq) dsigma2` for a fixed
/// `beta`, which depends on `beta` only through the residual sum of squares.
struct CollapsedVariance {
    n: f64,
    constant: f64,
    prior_ss: f64,
    post_shape: f64,
}

impl CollapsedVariance {
    fn new(n_total: usize, prior: &PriorSpec) -> Self {
        let n = n_total as f64;
        let (nu0, s0sq) = (prior.nu0, prior.s0sq);
        let post_shape = (nu0 + n) / 2.0;
        let constant = -0.5 * n * (2.0 * std::f64::consts::PI).ln() + ln_gamma(post_shape) - ln_gamma(nu0 / 2.0)
            + (nu0 / 2.0) * (nu0 * s0sq / 2.0).ln();
        Self { n, constant, prior_ss: nu0 * s0sq, post_shape }
    }

    fn log_lik(&self, rss: f64) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        self.constant - self.post_shape * ((self.prior_ss + rss) / 2.0).ln()
    }
}

/// Accumulate `p(y | beta) I(beta)` over the prior draws of `beta` in
/// `blocks`. The residual variance is integrated out exactly given `beta`
/// (or held at its fixed value in test mode).
///
/// Block `b` always uses stream `b` of `seed`, so any partition of the block
/// range reproduces the sequential draws.
pub fn direct_marginal_blocks(
    data: &OneWayData,
    prior: &PriorSpec,
    cs: Option<&ConstraintSet>,
    n: u64,
    seed: u64,
    blocks: Range<u64>,
) -> LogMeanAccumulator {
    let k = data.k();
    let sd = prior.beta_var.sqrt();
    let mut acc = LogMeanAccumulator::new();
    let collapsed = CollapsedVariance::new(data.n_total(), prior);
    let mut beta = vec![0.0; k];
    for b in blocks {
        let mut rng = rng::stream(seed, "direct-marginal", b);
        let end = ((b + 1) * BLOCK).min(n);
        for _ in (b * BLOCK)..end {
            for x in beta.iter_mut() {
                *x = prior.beta_mean + sd * rng.sample::<f64, _>(StandardNormal);
            }
            if !cs.map_or(true, |cs| cs.holds(&beta)) {
                acc.push(f64::NEG_INFINITY);
                continue;
            }
            acc.push(match prior.fixed_sigma2 {
                Some(sigma2) => data.log_lik(&beta, sigma2),
                None => collapsed.log_lik(data.rss(&beta)),
            });
        }
    }
    acc
}

/// Prior Monte Carlo estimate of `log p(y | M)`: the average of
/// `p(y | beta) I(beta) / c` over draws of `beta` from the unconstrained prior.
///
/// With no observations the likelihood is taken as 1, so the estimate is
/// exactly 0 for an unconstrained model.
pub fn direct_marginal(
    data: &OneWayData,
    prior: &PriorSpec,
    cs: Option<&ConstraintSet>,
    n: u64,
    seed: u64,
) -> Result<ModelEvidence> {
    prior.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one prior draw".into()));
    }
    if let Some(cs) = cs {
        if cs.k() != data.k() {
            return Err(Error::InvalidArgument(format!(
                "constraint covers {} effects but the data has {} groups",
                cs.k(),
                data.k()
            )));
        }
    }
    let est = direct_marginal_blocks(data, prior, cs, n, seed, 0..n.div_ceil(BLOCK)).finish();
    if est.n_nonzero == 0 {
        return Err(Error::Degenerate(format!(
            "none of the {n} prior draws satisfied the constraint; increase the number of draws"
        )));
    }
    let log_c = cs.map_or(0.0, |cs| cs.prior_proportion().ln());
    Ok(ModelEvidence {
        log_marginal: est.log_mean - log_c,
        mc_se_log: est.se_log,
        n_draws: n,
        method: EvidenceMethod::DirectPriorMc,
        warning: None,
    })
}

/// Bayes factor of a constrained model against the encompassing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncompassingBf {
    pub bf: f64,
    pub se: f64,
    /// Posterior draws satisfying the constraint.
    pub hits: usize,
    pub kept: usize,
    /// Effective sample size of the indicator series.
    pub ess: f64,
    /// No posterior draw satisfied the constraint; `bf = 0` only says the
    /// true value is small relative to `1 / (kept * c)`.
    pub no_hits: bool,
}

/// `bf = (share of posterior draws satisfying cs) / c`, with the binomial
/// standard error of the numerator computed from the indicator's effective
/// sample size.
pub fn encompassing_bf_from_draws(draws: &PosteriorDraws, cs: &ConstraintSet) -> EncompassingBf {
    let kept = draws.draws.len();
    if cs.is_unconstrained() {
        return EncompassingBf { bf: 1.0, se: 0.0, hits: kept, kept, ess: kept as f64, no_hits: false };
    }
    let ind: Vec<f64> = draws.draws.iter().map(|t| f64::from(u8::from(cs.holds(&t.beta)))).collect();
    let hits = ind.iter().filter(|&&v| v > 0.0).count();
    let share = hits as f64 / kept as f64;
    let ess = if hits == 0 || hits == kept { kept as f64 } else { effective_sample_size(&ind) };
    let c = cs.prior_proportion();
    EncompassingBf {
        bf: share / c,
        se: (share * (1.0 - share) / ess).sqrt() / c,
        hits,
        kept,
        ess,
        no_hits: hits == 0,
    }
}

/// Run the unconstrained Gibbs chain and evaluate `cs` on it. Data with no
/// observations runs the prior-only chain.
pub fn encompassing_bf(
    data: &OneWayData,
    prior: &PriorSpec,
    cs: &ConstraintSet,
    config: &ChainConfig,
) -> Result<EncompassingBf> {
    let draws = if data.n_total() == 0 {
        gibbs_prior_only(data.k(), prior, config)?
    } else {
        gibbs_oneway(data, prior, config)?
    };
    Ok(encompassing_bf_from_draws(&draws, cs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum OrderMethod {
    /// One unconstrained chain shared by every model.
    Encompassing { chain: ChainConfig },
    /// Independent prior draws per model.
    Direct { draws: u64, seed: u64 },
}

/// Evidence for each model in `models` on the same data.
pub fn order_model_evidence(
    data: &OneWayData,
    prior: &PriorSpec,
    models: &[ConstraintSet],
    method: &OrderMethod,
) -> Result<Vec<ModelEvidence>> {
    if let Some(cs) = models.iter().find(|cs| cs.k() != data.k()) {
        return Err(Error::InvalidArgument(format!(
            "constraint {cs} covers {} effects but the data has {} groups",
            cs.k(),
            data.k()
        )));
    }
    match *method {
        OrderMethod::Direct { draws, seed } => models
            .iter()
            .enumerate()
            .map(|(i, cs)| direct_marginal(data, prior, Some(cs), draws, rng::derive_seed(seed, "model", i as u64)))
            .collect(),
        OrderMethod::Encompassing { chain } => {
            let log_m0 = log_marginal_unconstrained(data, prior)?;
            let draws = if data.n_total() == 0 {
                gibbs_prior_only(data.k(), prior, &chain)?
            } else {
                gibbs_oneway(data, prior, &chain)?
            };
            Ok(models
                .iter()
                .map(|cs| {
                    let e = encompassing_bf_from_draws(&draws, cs);
                    ModelEvidence {
                        log_marginal: log_m0 + e.bf.ln(),
                        mc_se_log: if e.no_hits { 0.0 } else { e.se / e.bf },
                        n_draws: e.kept as u64,
                        method: EvidenceMethod::Encompassing,
                        warning: e.no_hits.then(|| {
                            format!(
                                "no posterior draw satisfied {cs}; the Bayes factor is below roughly {:.3e}",
                                1.0 / (e.kept as f64 * cs.prior_proportion())
                            )
                        }),
                    }
                })
                .collect())
        }
    }
}
