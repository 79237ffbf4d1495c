//! Marginal likelihoods, Bayes factors and posterior model probabilities.
//!
//! Two families of models are compared here:
//!
//! * order-constrained cell-means models (see [`order`]), whose evidence is
//!   estimated either by averaging the likelihood over prior draws or by the
//!   encompassing-prior identity `BF = posterior share / prior share`;
//! * variance-structure models for batched effects (see [`varcomp`]), whose
//!   Gaussian effects are integrated out exactly.

pub mod order;
pub mod varcomp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{fmt_sig, log_sum_exp};

pub use order::{
    direct_marginal, encompassing_bf, encompassing_bf_from_draws, log_marginal_unconstrained, order_model_evidence,
    EncompassingBf, OrderMethod,
};
pub use varcomp::{
    integrated_likelihood_gradient, integrated_likelihood_varcomps, lindley_sensitivity, standard_variance_models,
    variance_model_evidence, LindleyOptions, LindleyRow, LindleyTable, VarianceModelSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceMethod {
    DirectPriorMc,
    Encompassing,
}

/// Estimated log marginal likelihood of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvidence {
    pub log_marginal: f64,
    pub mc_se_log: f64,
    pub n_draws: u64,
    pub method: EvidenceMethod,
    /// Set when the estimate sits on a boundary, e.g. no posterior draw
    /// satisfied the constraint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Posterior model probabilities and pairwise Bayes factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub labels: Vec<String>,
    pub log_marginals: Vec<f64>,
    pub mc_se_log: Vec<f64>,
    pub prior_probs: Vec<f64>,
    pub posterior_probs: Vec<f64>,
    /// `bayes_factors[i][j] = p(y | M_i) / p(y | M_j)`.
    pub bayes_factors: Vec<Vec<f64>>,
}

/// `P(M_m | y) ∝ p(y | M_m) P(M_m)`, normalised in log space.
pub fn posterior_model_probs(
    labels: &[String],
    evidences: &[ModelEvidence],
    prior_model_probs: &[f64],
) -> Result<ModelComparison> {
    let m = evidences.len();
    if m == 0 || labels.len() != m || prior_model_probs.len() != m {
        return Err(Error::InvalidArgument(format!(
            "need matching, nonempty lists: {} labels, {} evidences, {} prior probabilities",
            labels.len(),
            m,
            prior_model_probs.len()
        )));
    }
    let total: f64 = prior_model_probs.iter().sum();
    if prior_model_probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "prior model probabilities must be nonnegative and sum to 1 (sum is {total})"
        )));
    }
    let log_marginals: Vec<f64> = evidences.iter().map(|e| e.log_marginal).collect();
    let unnorm: Vec<f64> = log_marginals
        .iter()
        .zip(prior_model_probs)
        .map(|(l, p)| if *p == 0.0 { f64::NEG_INFINITY } else { l + p.ln() })
        .collect();
    let log_total = log_sum_exp(&unnorm);
    if !log_total.is_finite() {
        return Err(Error::Numeric("every model has zero posterior weight".into()));
    }
    let posterior_probs = unnorm.iter().map(|u| (u - log_total).exp()).collect();
    let bayes_factors = log_marginals
        .iter()
        .map(|li| log_marginals.iter().map(|lj| if li == lj { 1.0 } else { (li - lj).exp() }).collect())
        .collect();
    Ok(ModelComparison {
        labels: labels.to_vec(),
        log_marginals,
        mc_se_log: evidences.iter().map(|e| e.mc_se_log).collect(),
        prior_probs: prior_model_probs.to_vec(),
        posterior_probs,
        bayes_factors,
    })
}

impl ModelComparison {
    /// Aligned text table of the comparison plus the Bayes factor matrix.
    pub fn render_table(&self) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$}  {:>12}  {:>10}  {:>10}  {:>10}\n",
            "model", "log p(y|M)", "mc se", "prior", "posterior"
        );
        for i in 0..self.labels.len() {
            out += &format!(
                "{:<width$}  {:>12}  {:>10}  {:>10}  {:>10}\n",
                self.labels[i],
                fmt_sig(self.log_marginals[i], 6),
                fmt_sig(self.mc_se_log[i], 3),
                fmt_sig(self.prior_probs[i], 4),
                fmt_sig(self.posterior_probs[i], 4)
            );
        }
        out += "\nBayes factors (row vs column)\n";
        out += &format!("{:<width$}", "");
        let cols: Vec<usize> = self.labels.iter().map(|l| l.len().max(12)).collect();
        for (l, w) in self.labels.iter().zip(&cols) {
            out += &format!("  {l:>w$}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.bayes_factors) {
            out += &format!("{l:<width$}");
            for (bf, w) in row.iter().zip(&cols) {
                out += &format!("  {:>w$}", fmt_sig(*bf, 4));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(l: f64) -> ModelEvidence {
        ModelEvidence { log_marginal: l, mc_se_log: 0.0, n_draws: 1, method: EvidenceMethod::DirectPriorMc, warning: None }
    }

    fn labels(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("M{i}")).collect()
    }

    #[test]
    fn equal_evidence_equal_priors() {
        let c = posterior_model_probs(&labels(2), &[ev(-3.0), ev(-3.0)], &[0.5, 0.5]).unwrap();
        for p in &c.posterior_probs {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn one_to_three_odds() {
        let c = posterior_model_probs(&labels(2), &[ev(0.0), ev(3f64.ln())], &[0.5, 0.5]).unwrap();
        assert!((c.posterior_probs[0] - 0.25).abs() < 1e-12);
        assert!((c.posterior_probs[1] - 0.75).abs() < 1e-12);
        assert!((c.bayes_factors[1][0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn flat_evidence_returns_prior() {
        let c = posterior_model_probs(&labels(3), &[ev(0.0), ev(0.0), ev(0.0)], &[0.5, 0.25, 0.25]).unwrap();
        for (a, b) in c.posterior_probs.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance_and_reciprocity() {
        let ls = [-10.0, -12.5, -9.0];
        let a = posterior_model_probs(&labels(3), &ls.map(ev), &[0.2, 0.3, 0.5]).unwrap();
        let b = posterior_model_probs(&labels(3), &ls.map(|l| ev(l + 700.0)), &[0.2, 0.3, 0.5]).unwrap();
        for (x, y) in a.posterior_probs.iter().zip(&b.posterior_probs) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.posterior_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.bayes_factors[i][j] * a.bayes_factors[j][i] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(posterior_model_probs(&labels(2), &[ev(0.0)], &[1.0]).is_err());
        assert!(posterior_model_probs(&labels(2), &[ev(0.0), ev(0.0)], &[0.7, 0.7]).is_err());
        let dead = [ev(f64::NEG_INFINITY), ev(f64::NEG_INFINITY)];
        assert!(matches!(posterior_model_probs(&labels(2), &dead, &[0.5, 0.5]), Err(Error::Numeric(_))));
    }

    #[test]
    fn table_lists_every_model() {
        let c = posterior_model_probs(&labels(2), &[ev(-1.0), ev(-2.0)], &[0.5, 0.5]).unwrap();
        let t = c.render_table();
        assert!(t.contains("M1") && t.contains("M2") && t.contains("Bayes factors"));
    }
}
