//! Conjugate prior, one-way likelihood and the Gibbs sampler for the
//! unconstrained cell-means model
//!
//! ```text
//! y_ij | beta, sigma2 ~ N(beta_i, sigma2)
//! beta_i              ~ N(beta_mean, beta_var)
//! sigma2              ~ Inv-chi2(nu0, s0sq)     (nu0 * s0sq / sigma2 ~ chi2_nu0)
//! ```

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::constraints::ConstraintSet;
use crate::designs::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Hyperparameters of the encompassing prior. Defaults are
/// `N(0, 1000)` per effect and `Inv-chi2(1, 10)` for the residual variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub beta_mean: f64,
    pub beta_var: f64,
    pub nu0: f64,
    pub s0sq: f64,
    /// Pins sigma2 to this value instead of sampling it. Test mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_sigma2: Option<f64>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { beta_mean: 0.0, beta_var: 1000.0, nu0: 1.0, s0sq: 10.0, fixed_sigma2: None }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        if !self.beta_mean.is_finite() {
            return Err(Error::InvalidArgument("beta_mean must be finite".into()));
        }
        positive("beta_var", self.beta_var)?;
        positive("nu0", self.nu0)?;
        positive("s0sq", self.s0sq)?;
        if let Some(s) = self.fixed_sigma2 {
            positive("fixed_sigma2", s)?;
        }
        Ok(())
    }

    pub(crate) fn draw_sigma2(&self, rng: &mut Rng) -> f64 {
        match self.fixed_sigma2 {
            Some(s) => s,
            None => nu_s2_over_chisq(self.nu0, self.s0sq, rng),
        }
    }
}

/// One parameter vector of the cell-means model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { iterations: 15_000, burn_in: 5_000, thin: 1, seed: 0 }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::InvalidArgument("iterations must exceed burn_in".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidArgument("thin must be at least 1".into()));
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    /// Whether iteration `it` (0-based) is stored.
    pub(crate) fn keeps(&self, it: usize) -> bool {
        it >= self.burn_in && (it - self.burn_in + 1) % self.thin == 0
    }
}

/// Retained draws of a Gibbs run. Immutable once produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub draws: Vec<Theta>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Share of accepted proposals; exact Gibbs updates always accept.
    pub acceptance_rate: f64,
}

impl PosteriorDraws {
    pub fn beta(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|t| t.beta[i]).collect()
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.draws.iter().map(|t| t.sigma2).collect()
    }

    /// One row per draw: `beta_1..beta_k,sigma2`.
    pub fn write_csv_to(&self, out: &mut impl Write) -> Result<()> {
        let k = self.draws.first().map_or(0, |t| t.beta.len());
        let mut header: Vec<String> = (1..=k).map(|i| format!("beta_{i}")).collect();
        header.push("sigma2".into());
        writeln!(out, "{}", header.join(","))?;
        for t in &self.draws {
            let mut fields: Vec<String> = t.beta.iter().map(|b| format!("{b:?}")).collect();
            fields.push(format!("{:?}", t.sigma2));
            writeln!(out, "{}", fields.join(","))?;
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

pub(crate) fn nu_s2_over_chisq(nu: f64, s2: f64, rng: &mut Rng) -> f64 {
    let x = ChiSquared::new(nu).expect("positive degrees of freedom").sample(rng);
    nu * s2 / x
}

/// Draw from the scaled inverse chi-square `Inv-chi2(nu, s2)`, i.e.
/// `nu * s2 / X` with `X ~ chi2_nu`.
pub fn scaled_inv_chisq_sample(nu: f64, s2: f64, rng: &mut Rng) -> Result<f64> {
    if !(nu > 0.0 && s2 > 0.0 && nu.is_finite() && s2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scaled inverse chi-square needs positive parameters, got nu={nu}, s2={s2}"
        )));
    }
    Ok(nu_s2_over_chisq(nu, s2, rng))
}

/// Log density of `Inv-chi2(nu, s2)` at `v`.
pub fn log_scaled_inv_chisq_density(v: f64, nu: f64, s2: f64) -> f64 {
    if v <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let half = nu / 2.0;
    half * half.ln() - ln_gamma(half) + half * s2.ln() - (1.0 + half) * v.ln() - nu * s2 / (2.0 * v)
}

pub fn log_normal_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// Prior on a scale parameter (a batch sd or the residual sd).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ScalePrior {
    /// `sd ~ |N(0, scale^2)|`
    HalfNormal { scale: f64 },
    /// `sd ~ U(0, upper)`
    Uniform { upper: f64 },
    /// `variance ~ Inv-chi2(nu, s2)`
    InvChiSquare { nu: f64, s2: f64 },
}

impl ScalePrior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalePrior::HalfNormal { scale } => scale > 0.0 && scale.is_finite(),
            ScalePrior::Uniform { upper } => upper > 0.0 && upper.is_finite(),
            ScalePrior::InvChiSquare { nu, s2 } => nu > 0.0 && s2 > 0.0 && nu.is_finite() && s2.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("scale prior hyperparameters must be positive: {self}")))
        }
    }

    /// Draw a variance.
    pub fn sample_variance(&self, rng: &mut Rng) -> f64 {
        match *self {
            ScalePrior::HalfNormal { scale } => (scale * rng.sample::<f64, _>(StandardNormal)).powi(2),
            ScalePrior::Uniform { upper } => (upper * rng.gen::<f64>()).powi(2),
            ScalePrior::InvChiSquare { nu, s2 } => nu_s2_over_chisq(nu, s2, rng),
        }
    }

    /// Log prior density of the sd, up to a constant.
    pub fn log_density_sd(&self, sd: f64) -> f64 {
        if sd <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            ScalePrior::HalfNormal { scale } => -0.5 * (sd / scale).powi(2),
            ScalePrior::Uniform { upper } => {
                if sd < upper {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            // density of v = sd^2 times the Jacobian 2 sd
            ScalePrior::InvChiSquare { nu, s2 } => log_scaled_inv_chisq_density(sd * sd, nu, s2) + sd.ln(),
        }
    }

    /// The same family with its scale multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Self {
        match *self {
            ScalePrior::HalfNormal { scale } => ScalePrior::HalfNormal { scale: scale * factor },
            ScalePrior::Uniform { upper } => ScalePrior::Uniform { upper: upper * factor },
            ScalePrior::InvChiSquare { nu, s2 } => ScalePrior::InvChiSquare { nu, s2: s2 * factor * factor },
        }
    }
}

impl std::fmt::Display for ScalePrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalePrior::HalfNormal { scale } => write!(f, "half-normal:{scale}"),
            ScalePrior::Uniform { upper } => write!(f, "uniform:{upper}"),
            ScalePrior::InvChiSquare { nu, s2 } => write!(f, "inv-chisq:{nu},{s2}"),
        }
    }
}

impl std::str::FromStr for ScalePrior {
    type Err = Error;

    /// `half-normal:S`, `uniform:U` or `inv-chisq:NU,S2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse scale prior {s:?}; use half-normal:S, uniform:U or inv-chisq:NU,S2"));
        let (family, params) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = params.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let prior = match (family.trim(), nums.as_slice()) {
            ("half-normal", [scale]) => ScalePrior::HalfNormal { scale: *scale },
            ("uniform", [upper]) => ScalePrior::Uniform { upper: *upper },
            ("inv-chisq", [nu, s2]) => ScalePrior::InvChiSquare { nu: *nu, s2: *s2 },
            _ => return Err(bad()),
        };
        prior.validate()?;
        Ok(prior)
    }
}

/// Sufficient statistics of one treatment group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    /// Sum of squared deviations from the group mean.
    pub ss: f64,
}

/// One-way layout: observations grouped by treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct OneWayData {
    groups: Vec<GroupStats>,
}

impl OneWayData {
    pub fn from_groups(groups: &[Vec<f64>]) -> Self {
        let groups = groups
            .iter()
            .map(|ys| {
                let n = ys.len();
                let mean = if n == 0 { 0.0 } else { ys.iter().sum::<f64>() / n as f64 };
                let ss = ys.iter().map(|y| (y - mean).powi(2)).sum();
                GroupStats { n, mean, ss }
            })
            .collect();
        Self { groups }
    }

    /// Group by the dataset's treatment factor, ignoring rows and columns.
    pub fn from_dataset(data: &Dataset) -> Self {
        Self::from_groups(&data.by_treatment())
    }

    /// `k` groups without observations; the likelihood is identically 1.
    pub fn empty(k: usize) -> Self {
        Self { groups: vec![GroupStats { n: 0, mean: 0.0, ss: 0.0 }; k] }
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn n_total(&self) -> usize {
        self.groups.iter().map(|g| g.n).sum()
    }

    pub fn groups(&self) -> &[GroupStats] {
        &self.groups
    }

    /// Residual sum of squares around `beta`.
    pub(crate) fn rss(&self, beta: &[f64]) -> f64 {
        self.groups.iter().zip(beta).map(|(g, b)| g.ss + g.n as f64 * (g.mean - b).powi(2)).sum()
    }

    /// Log-likelihood; 0 when there are no observations.
    pub(crate) fn log_lik(&self, beta: &[f64], sigma2: f64) -> f64 {
        let mut rss = 0.0;
        for (g, b) in self.groups.iter().zip(beta) {
            rss += g.ss + g.n as f64 * (g.mean - b).powi(2);
        }
        let n = self.n_total() as f64;
        -0.5 * (n * (2.0 * PI * sigma2).ln() + rss / sigma2)
    }
}

/// `sum_ij log N(y_ij | beta_i, sigma2)`.
pub fn log_likelihood(theta: &Theta, data: &OneWayData) -> Result<f64> {
    if data.n_total() == 0 {
        return Err(Error::InvalidArgument("dataset has no observations".into()));
    }
    if theta.beta.len() != data.k() {
        return Err(Error::InvalidArgument(format!(
            "theta has {} effects but the data has {} groups",
            theta.beta.len(),
            data.k()
        )));
    }
    Ok(data.log_lik(&theta.beta, theta.sigma2))
}

/// Log prior density. With a constraint, the encompassing prior is truncated
/// to the constrained region and renormalised by its exact prior proportion.
pub fn log_prior_density(theta: &Theta, prior: &PriorSpec, cs: Option<&ConstraintSet>) -> f64 {
    if let Some(cs) = cs {
        if !cs.holds(&theta.beta) {
            return f64::NEG_INFINITY;
        }
    }
    let beta: f64 = theta.beta.iter().map(|&b| log_normal_density(b, prior.beta_mean, prior.beta_var)).sum();
    let sigma = match prior.fixed_sigma2 {
        Some(_) => 0.0,
        None => log_scaled_inv_chisq_density(theta.sigma2, prior.nu0, prior.s0sq),
    };
    let norm = cs.map_or(0.0, |cs| cs.prior_proportion().ln());
    beta + sigma - norm
}

/// `n` i.i.d. draws from the unconstrained prior over `k` effects.
pub fn sample_prior(prior: &PriorSpec, k: usize, n: usize, seed: u64) -> Result<Vec<Theta>> {
    prior.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let mut rng = rng::stream(seed, "prior", 0);
    let sd = prior.beta_var.sqrt();
    Ok((0..n)
        .map(|_| {
            let beta = (0..k).map(|_| prior.beta_mean + sd * rng.sample::<f64, _>(StandardNormal)).collect();
            Theta { beta, sigma2: prior.draw_sigma2(&mut rng) }
        })
        .collect())
}

/// Gibbs sampler for the unconstrained cell-means model. Every group must
/// hold at least one observation.
pub fn gibbs_oneway(data: &OneWayData, prior: &PriorSpec, config: &ChainConfig) -> Result<PosteriorDraws> {
    if let Some(i) = data.groups().iter().position(|g| g.n == 0) {
        return Err(Error::InvalidArgument(format!("treatment group {} is empty", i + 1)));
    }
    run_gibbs(data, prior, config)
}

/// The same chain with no data: its stationary law is the prior.
pub fn gibbs_prior_only(k: usize, prior: &PriorSpec, config: &ChainConfig) -> Result<PosteriorDraws> {
    run_gibbs(&OneWayData::empty(k), prior, config)
}

fn run_gibbs(data: &OneWayData, prior: &PriorSpec, config: &ChainConfig) -> Result<PosteriorDraws> {
    prior.validate()?;
    config.validate()?;
    let mut rng = rng::stream(config.seed, "gibbs-oneway", 0);
    let groups = data.groups();
    let mut beta: Vec<f64> = groups.iter().map(|g| if g.n > 0 { g.mean } else { prior.beta_mean }).collect();
    let mut sigma2 = prior.fixed_sigma2.unwrap_or(prior.s0sq);
    let n_total = data.n_total() as f64;
    let mut draws = Vec::with_capacity(config.kept());

    for it in 0..config.iterations {
        for (b, g) in beta.iter_mut().zip(groups) {
            let n = g.n as f64;
            let var = 1.0 / (n / sigma2 + 1.0 / prior.beta_var);
            let mean = var * (n * g.mean / sigma2 + prior.beta_mean / prior.beta_var);
            *b = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        if prior.fixed_sigma2.is_none() {
            let rss: f64 = groups.iter().zip(&beta).map(|(g, b)| g.ss + g.n as f64 * (g.mean - b).powi(2)).sum();
            let nu = prior.nu0 + n_total;
            sigma2 = nu_s2_over_chisq(nu, (prior.nu0 * prior.s0sq + rss) / nu, &mut rng);
        }
        if config.keeps(it) {
            draws.push(Theta { beta: beta.clone(), sigma2 });
        }
    }
    Ok(PosteriorDraws {
        draws,
        iterations: config.iterations,
        burn_in: config.burn_in,
        thin: config.thin,
        seed: config.seed,
        acceptance_rate: 1.0,
    })
}

/// Effective sample size by Geyer's initial monotone positive sequence.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let gamma0 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if gamma0 == 0.0 {
        return n as f64;
    }
    let autocov = |lag: usize| centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;

    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let g0 = if lag == 0 { gamma0 } else { autocov(lag) };
        let pair = g0 + autocov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = (2.0 * sum_pairs - gamma0) / gamma0;
    (n as f64 / tau.max(1e-12)).min(n as f64 * n.ilog2() as f64)
}

/// Monte Carlo standard error of the mean of an autocorrelated series.
pub fn mc_se(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / effective_sample_size(series)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::parse_constraints;
    use crate::numeric::{mean, sample_var};

    #[test]
    fn inv_chisq_mode_and_mean() {
        // Mode of Inv-chi2(nu, s2) is nu*s2/(nu+2): check the density peaks there.
        let mode = 10.0 / 3.0;
        let at = |v| log_scaled_inv_chisq_density(v, 1.0, 10.0);
        assert!(at(mode) > at(mode * 0.99) && at(mode) > at(mode * 1.01));

        let mut rng = rng::stream(3, "test", 0);
        let draws: Vec<f64> = (0..1_000_000).map(|_| scaled_inv_chisq_sample(4.0, 1.0, &mut rng).unwrap()).collect();
        let m = mean(&draws);
        // nu*s2/(nu-2) = 2; variance 2 nu^2 s2^2 / ((nu-2)^2 (nu-4)) is infinite at
        // nu = 4, so use the empirical sd as a guide rather than a formula.
        let se = (sample_var(&draws) / draws.len() as f64).sqrt();
        assert!((m - 2.0).abs() < 4.0 * se, "{m} ± {se}");
    }

    #[test]
    fn inv_chisq_cdf_matches_chisq_oracle() {
        use statrs::distribution::{ChiSquared as Chi, ContinuousCDF};
        let mut rng = rng::stream(4, "test", 0);
        let n = 1_000_000;
        let below = (0..n).filter(|_| scaled_inv_chisq_sample(1.0, 10.0, &mut rng).unwrap() <= 10.0).count();
        // P(V <= v) = P(X >= nu*s2/v) for X ~ chi2_nu.
        let exact = 1.0 - Chi::new(1.0).unwrap().cdf(1.0 * 10.0 / 10.0);
        assert!((below as f64 / n as f64 - exact).abs() < 0.005);
    }

    #[test]
    fn inv_chisq_rejects_bad_parameters() {
        let mut rng = rng::stream(4, "test", 0);
        assert!(scaled_inv_chisq_sample(0.0, 1.0, &mut rng).is_err());
        assert!(scaled_inv_chisq_sample(1.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let theta = Theta { beta: vec![0.0], sigma2: 1.0 };
        let one = OneWayData::from_groups(&[vec![0.0]]);
        let single = log_likelihood(&theta, &one).unwrap();
        assert!((single + 0.918_938_533_204_672_7).abs() < 1e-12);
        let two = OneWayData::from_groups(&[vec![0.0, 0.0]]);
        assert!((log_likelihood(&theta, &two).unwrap() - 2.0 * single).abs() < 1e-12);
        let hand = OneWayData::from_groups(&[vec![1.0], vec![3.0]]);
        let t2 = Theta { beta: vec![1.0, 3.0], sigma2: 1.0 };
        assert!((log_likelihood(&t2, &hand).unwrap() - 2.0 * single).abs() < 1e-12);
        assert!(log_likelihood(&theta, &OneWayData::empty(1)).is_err());
    }

    #[test]
    fn likelihood_matches_pointwise_sum() {
        let groups = vec![vec![0.3, -1.2, 2.0], vec![4.0, 5.5]];
        let data = OneWayData::from_groups(&groups);
        let theta = Theta { beta: vec![0.1, 4.7], sigma2: 1.7 };
        let direct: f64 = groups
            .iter()
            .zip(&theta.beta)
            .flat_map(|(ys, &b)| ys.iter().map(move |&y| log_normal_density(y, b, 1.7)))
            .sum();
        assert!((log_likelihood(&theta, &data).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn prior_density_closed_form() {
        let prior = PriorSpec::default();
        let theta = Theta { beta: vec![0.0; 5], sigma2: 10.0 };
        // Inv-chi2(10 | 1, 10) = (1/2)^(1/2) / Gamma(1/2) * 10^(1/2) * 10^(-3/2) * exp(-1/2)
        let inv = 0.5f64.sqrt() / PI.sqrt() * 10f64.powf(0.5) * 10f64.powf(-1.5) * (-0.5f64).exp();
        let normal = 1.0 / (2.0 * PI * 1000.0).sqrt();
        let expected = 5.0 * normal.ln() + inv.ln();
        assert!((log_prior_density(&theta, &prior, None) - expected).abs() < 1e-12);
    }

    #[test]
    fn constrained_prior_density() {
        let prior = PriorSpec::default();
        let m_a = parse_constraints("b1<b2<b3<b4<b5", 5).unwrap();
        let bad = Theta { beta: vec![2.0, 1.0, 3.0, 4.0, 5.0], sigma2: 1.0 };
        assert_eq!(log_prior_density(&bad, &prior, Some(&m_a)), f64::NEG_INFINITY);
        let good = Theta { beta: vec![1.0, 2.0, 3.0, 4.0, 5.0], sigma2: 1.0 };
        let diff = log_prior_density(&good, &prior, Some(&m_a)) - log_prior_density(&good, &prior, None);
        assert!((diff - 120f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constrained_prior_integrates_to_one() {
        // E_unconstrained[ I(theta) / proportion ] = 1
        let prior = PriorSpec::default();
        let cs = parse_constraints("{b1,b4}<{b2,b3,b5}", 5).unwrap();
        let draws = sample_prior(&prior, 5, 200_000, 8).unwrap();
        let w: Vec<f64> = draws.iter().map(|t| f64::from(u8::from(cs.holds(&t.beta))) / 0.1).collect();
        let m = mean(&w);
        let se = (sample_var(&w) / w.len() as f64).sqrt();
        assert!((m - 1.0).abs() < 4.0 * se, "{m} ± {se}");
    }

    #[test]
    fn prior_draw_moments() {
        let prior = PriorSpec::default();
        let draws = sample_prior(&prior, 1, 1_000_000, 5).unwrap();
        let b: Vec<f64> = draws.iter().map(|t| t.beta[0]).collect();
        assert!(mean(&b).abs() < 4.0 * (1000.0f64 / 1e6).sqrt());
        assert!((sample_var(&b) / 1000.0 - 1.0).abs() < 0.02);
        assert!(draws.iter().all(|t| t.sigma2 > 0.0));
        assert_eq!(draws, sample_prior(&prior, 1, 1_000_000, 5).unwrap());
    }

    #[test]
    fn sigma2_below_mode_fraction_is_stable() {
        let prior = PriorSpec::default();
        let frac = |seed| {
            let d = sample_prior(&prior, 1, 200_000, seed).unwrap();
            d.iter().filter(|t| t.sigma2 < 10.0 / 3.0).count() as f64 / d.len() as f64
        };
        let (a, b) = (frac(1), frac(2));
        let se = (a * (1.0 - a) / 200_000.0).sqrt();
        assert!(a > 0.0 && (a - b).abs() < 4.0 * se * 2f64.sqrt());
    }

    #[test]
    fn gibbs_known_variance_matches_conjugate_posterior() {
        let ys = vec![1.0, 3.0, 2.0, 2.5, 1.5, 2.0];
        let data = OneWayData::from_groups(&[ys]);
        let prior = PriorSpec { fixed_sigma2: Some(1.0), ..PriorSpec::default() };
        let cfg = ChainConfig { iterations: 60_000, burn_in: 10_000, thin: 1, seed: 3 };
        let draws = gibbs_oneway(&data, &prior, &cfg).unwrap();
        let b = draws.beta(0);
        let post_mean = 6.0 * 2.0 / (6.0 + 0.001);
        let post_var = 1.0 / (6.0 + 0.001);
        assert!((mean(&b) - post_mean).abs() < 4.0 * mc_se(&b));
        assert!((post_mean - 1.99967).abs() < 1e-5);
        let var_se = post_var * (2.0 / (b.len() as f64 - 1.0)).sqrt();
        assert!((sample_var(&b) - post_var).abs() < 4.0 * var_se);
    }

    #[test]
    fn prior_only_chain_reproduces_prior() {
        let prior = PriorSpec::default();
        let cfg = ChainConfig { iterations: 60_000, burn_in: 1_000, thin: 1, seed: 9 };
        let draws = gibbs_prior_only(2, &prior, &cfg).unwrap();
        let b = draws.beta(1);
        assert!(mean(&b).abs() < 4.0 * mc_se(&b));
        let var_se = 1000.0 * (2.0 / b.len() as f64).sqrt();
        assert!((sample_var(&b) - 1000.0).abs() < 5.0 * var_se);
    }

    #[test]
    fn gibbs_is_deterministic_and_validated() {
        let data = OneWayData::from_groups(&[vec![1.0, 2.0], vec![3.0]]);
        let cfg = ChainConfig { iterations: 500, burn_in: 100, thin: 4, seed: 1 };
        let a = gibbs_oneway(&data, &PriorSpec::default(), &cfg).unwrap();
        assert_eq!(a.draws.len(), 100);
        assert_eq!(a, gibbs_oneway(&data, &PriorSpec::default(), &cfg).unwrap());
        assert!(a.draws.iter().all(|t| t.sigma2 > 0.0));

        let empty_group = OneWayData::from_groups(&[vec![1.0], vec![]]);
        assert!(matches!(gibbs_oneway(&empty_group, &PriorSpec::default(), &cfg), Err(Error::InvalidArgument(_))));
        let bad = ChainConfig { iterations: 10, burn_in: 10, thin: 1, seed: 0 };
        assert!(gibbs_oneway(&data, &PriorSpec::default(), &bad).is_err());
    }

    #[test]
    fn draws_csv_header() {
        let data = OneWayData::from_groups(&[vec![1.0, 2.0], vec![3.0, 3.5]]);
        let cfg = ChainConfig { iterations: 20, burn_in: 10, thin: 1, seed: 1 };
        let d = gibbs_oneway(&data, &PriorSpec::default(), &cfg).unwrap();
        let mut buf = Vec::new();
        d.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("beta_1,beta_2,sigma2\n"));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn scale_prior_strings() {
        for text in ["half-normal:2.5", "uniform:10", "inv-chisq:1,10"] {
            let p: ScalePrior = text.parse().unwrap();
            assert_eq!(p.to_string(), text);
        }
        assert!("half-normal:-1".parse::<ScalePrior>().is_err());
        assert!("cauchy:1".parse::<ScalePrior>().is_err());
    }

    #[test]
    fn half_normal_variance_draws() {
        let mut rng = rng::stream(2, "test", 0);
        let p = ScalePrior::HalfNormal { scale: 3.0 };
        let v: Vec<f64> = (0..400_000).map(|_| p.sample_variance(&mut rng)).collect();
        // E[sd^2] = scale^2, Var[sd^2] = 2 scale^4
        let se = (2.0f64).sqrt() * 9.0 / (v.len() as f64).sqrt();
        assert!((mean(&v) - 9.0).abs() < 4.0 * se);
    }

    #[test]
    fn ess_of_iid_and_ar1() {
        let mut rng = rng::stream(1, "test", 0);
        let iid: Vec<f64> = (0..20_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 15_000.0 && ess < 25_000.0, "{ess}");

        // AR(1) with rho = 0.9 has integrated autocorrelation time 19.
        let mut x = 0.0;
        let ar: Vec<f64> = (0..200_000)
            .map(|_| {
                x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let ratio = ar.len() as f64 / effective_sample_size(&ar);
        assert!((ratio - 19.0).abs() < 3.0, "{ratio}");
    }
}
