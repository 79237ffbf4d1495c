//! Frequentist baselines: the one-way F test and a likelihood-ratio test for
//! equal treatment effects in a random-intercept model fitted by EM.
//!
//! Maximum likelihood is not attractive at these sample sizes; the LR test
//! reproduces the classical procedure for comparison, nothing more.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::beta::beta_reg;

use crate::designs::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::numeric::fmt_sig;

pub const DEFAULT_EM_TOL: f64 = 1e-8;
pub const MAX_EM_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FTestResult {
    pub f_stat: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
    pub ss_between: f64,
    pub ss_within: f64,
    /// No within-group variation at all; `f_stat` is infinite (or 0 when the
    /// means also coincide) and `p_value` is set by convention.
    pub degenerate: bool,
}

impl FTestResult {
    pub fn render_table(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>6} {:>6} {:>12}\n", "test", "F", "df1", "df2", "p");
        s += &format!(
            "{:<10} {:>12} {:>6} {:>6} {:>12}\n",
            "one-way",
            fmt_sig(self.f_stat, 6),
            self.df1,
            self.df2,
            fmt_sig(self.p_value, 6)
        );
        if self.degenerate {
            s += "warning: zero within-group variance\n";
        }
        s
    }
}

/// Upper tail of `F(df1, df2)` at `f`.
pub fn f_upper_tail(f: f64, df1: f64, df2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f == f64::INFINITY {
        return 0.0;
    }
    beta_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))
}

/// Between/within mean-square ratio for `groups`.
pub fn oneway_f_test(groups: &[Vec<f64>]) -> Result<FTestResult> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("the F test needs at least 2 groups, got {k}")));
    }
    if let Some(g) = groups.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("group {} is empty", g + 1)));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    if n <= k {
        return Err(Error::InvalidArgument(format!("need more observations ({n}) than groups ({k})")));
    }
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|y| (y - m).powi(2)).sum::<f64>();
    }
    let (df1, df2) = (k - 1, n - k);
    let degenerate = ss_within == 0.0;
    let f_stat = if degenerate {
        if ss_between > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (ss_between / df1 as f64) / (ss_within / df2 as f64)
    };
    Ok(FTestResult {
        f_stat,
        df1,
        df2,
        p_value: f_upper_tail(f_stat, df1 as f64, df2 as f64),
        ss_between,
        ss_within,
        degenerate,
    })
}

/// ML fit of `y = X beta + u_cluster + e`, `u ~ N(0, tau2)`, `e ~ N(0, sigma2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInterceptFit {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    pub loglik: f64,
    pub iterations: usize,
    /// `tau2` held at 0 because the likelihood increases toward negative values.
    pub pinned: bool,
    /// Log-likelihood after every EM iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Observations grouped by cluster with their design rows.
struct Clusters {
    y: Vec<Vec<f64>>,
    x: Vec<Vec<Vec<f64>>>,
    n: usize,
    p: usize,
}

impl Clusters {
    fn new(y: &[f64], x: &[Vec<f64>], cluster: &[usize]) -> Self {
        let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
        let mut cy: Vec<Vec<f64>> = Vec::new();
        let mut cx: Vec<Vec<Vec<f64>>> = Vec::new();
        for ((&yi, xi), &c) in y.iter().zip(x).zip(cluster) {
            let next = ids.len();
            let id = *ids.entry(c).or_insert(next);
            if id == cy.len() {
                cy.push(Vec::new());
                cx.push(Vec::new());
            }
            cy[id].push(yi);
            cx[id].push(xi.clone());
        }
        Self { y: cy, x: cx, n: y.len(), p: x.first().map_or(0, Vec::len) }
    }

    fn residual_sums(&self, beta: &DVector<f64>) -> Vec<(f64, f64, f64)> {
        // (n_m, sum r, sum r^2) per cluster
        self.y
            .iter()
            .zip(&self.x)
            .map(|(ys, xs)| {
                let mut s = 0.0;
                let mut ss = 0.0;
                for (y, x) in ys.iter().zip(xs) {
                    let r = y - x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
                    s += r;
                    ss += r * r;
                }
                (ys.len() as f64, s, ss)
            })
            .collect()
    }

    fn loglik(&self, beta: &DVector<f64>, sigma2: f64, tau2: f64) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.residual_sums(beta)
            .iter()
            .map(|&(n, s, ss)| {
                let d = sigma2 + n * tau2;
                let logdet = (n - 1.0) * sigma2.ln() + d.ln();
                let quad = (ss - tau2 / d * s * s) / sigma2;
                -0.5 * (n * ln2pi + logdet + quad)
            })
            .sum()
    }

    /// Least squares of `y - offset_cluster` on X.
    fn least_squares(&self, offsets: &[f64]) -> Result<DVector<f64>> {
        let mut xtx = DMatrix::zeros(self.p, self.p);
        let mut xty = DVector::zeros(self.p);
        for ((ys, xs), off) in self.y.iter().zip(&self.x).zip(offsets) {
            for (y, x) in ys.iter().zip(xs) {
                for a in 0..self.p {
                    xty[a] += x[a] * (y - off);
                    for b in 0..self.p {
                        xtx[(a, b)] += x[a] * x[b];
                    }
                }
            }
        }
        xtx.cholesky()
            .map(|c| c.solve(&xty))
            .ok_or_else(|| Error::Degenerate("fixed-effect design matrix is rank deficient".into()))
    }
}

/// Fit by EM, with `tau2` pinned at 0 whenever the boundary fit wins.
pub fn fit_random_intercept(y: &[f64], x: &[Vec<f64>], cluster: &[usize], tol: f64) -> Result<RandomInterceptFit> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("EM tolerance must be positive, got {tol}")));
    }
    let cl = Clusters::new(y, x, cluster);
    if cl.n <= cl.p {
        return Err(Error::InvalidArgument("need more observations than fixed effects".into()));
    }
    let n = cl.n as f64;
    let m = cl.y.len() as f64;

    // boundary fit: ordinary least squares
    let beta0 = cl.least_squares(&vec![0.0; cl.y.len()])?;
    let sums0 = cl.residual_sums(&beta0);
    let sigma2_0 = sums0.iter().map(|s| s.2).sum::<f64>() / n;
    if sigma2_0 <= 0.0 {
        return Err(Error::Degenerate("the fixed effects fit the data exactly".into()));
    }
    let pinned = RandomInterceptFit {
        beta: beta0.iter().copied().collect(),
        sigma2: sigma2_0,
        tau2: 0.0,
        loglik: cl.loglik(&beta0, sigma2_0, 0.0),
        iterations: 0,
        pinned: true,
        trace: Vec::new(),
    };
    // score for tau2 at the boundary
    let score: f64 = sums0.iter().map(|&(nm, s, _)| s * s / (sigma2_0 * sigma2_0) - nm / sigma2_0).sum();
    if score <= 0.0 {
        return Ok(pinned);
    }

    let mut beta = beta0;
    let mut sigma2 = sigma2_0 / 2.0;
    let mut tau2 = sigma2_0 / 2.0;
    let mut loglik = cl.loglik(&beta, sigma2, tau2);
    let mut trace = vec![loglik];
    for it in 1..=MAX_EM_ITERATIONS {
        // E-step: posterior of each cluster intercept
        let post: Vec<(f64, f64)> = cl
            .residual_sums(&beta)
            .iter()
            .map(|&(nm, s, _)| {
                let v = 1.0 / (nm / sigma2 + 1.0 / tau2);
                (v * s / sigma2, v)
            })
            .collect();
        // M-step
        let u_hat: Vec<f64> = post.iter().map(|p| p.0).collect();
        beta = cl.least_squares(&u_hat)?;
        let sums = cl.residual_sums(&beta);
        let mut rss = 0.0;
        for (&(nm, s, ss), &(u, v)) in sums.iter().zip(&post) {
            rss += ss - 2.0 * u * s + nm * (u * u + v);
        }
        sigma2 = rss / n;
        tau2 = post.iter().map(|(u, v)| u * u + v).sum::<f64>() / m;
        let next = cl.loglik(&beta, sigma2, tau2);
        trace.push(next);
        let gain = next - loglik;
        loglik = next;
        if gain < tol {
            let fit = RandomInterceptFit {
                beta: beta.iter().copied().collect(),
                sigma2,
                tau2,
                loglik,
                iterations: it,
                pinned: false,
                trace,
            };
            return Ok(if pinned.loglik > fit.loglik { RandomInterceptFit { trace: fit.trace, ..pinned } } else { fit });
        }
    }
    Err(Error::NonConvergence { iterations: MAX_EM_ITERATIONS, last_loglik: loglik })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LRTestResult {
    pub loglik_full: f64,
    pub loglik_null: f64,
    pub lr_stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub full: RandomInterceptFit,
    pub null: RandomInterceptFit,
}

impl LRTestResult {
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>14} {:>14} {:>12} {:>4} {:>12}\n",
            "test", "loglik full", "loglik null", "LR", "df", "p"
        );
        s += &format!(
            "{:<10} {:>14} {:>14} {:>12} {:>4} {:>12}\n",
            "lr",
            fmt_sig(self.loglik_full, 8),
            fmt_sig(self.loglik_null, 8),
            fmt_sig(self.lr_stat, 6),
            self.df,
            fmt_sig(self.p_value, 6)
        );
        for (name, fit) in [("full", &self.full), ("null", &self.null)] {
            s += &format!(
                "{name}: machine var {}, residual var {}{}\n",
                fmt_sig(fit.tau2, 6),
                fmt_sig(fit.sigma2, 6),
                if fit.pinned { " (machine variance pinned at 0)" } else { "" }
            );
        }
        s
    }
}

/// LR test of equal treatment effects, machines as random intercepts and
/// measures as replicates.
pub fn lr_test_equal_treatments(data: &Dataset, tol: f64) -> Result<LRTestResult> {
    if data.schema() != Schema::Nested {
        return Err(Error::Validation("the LR test needs a y,machine,treatment,measure dataset".into()));
    }
    let t = data.n_treatments();
    if t < 2 {
        return Err(Error::Validation(format!("need at least 2 treatments, found {t}")));
    }
    if let Some(g) = data.by_treatment().iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("treatment {} has no observations", g + 1)));
    }
    let y = data.y();
    let machines = data.labels("machine").expect("nested schema");
    let treatments = data.labels("treatment").expect("nested schema");
    let x_full: Vec<Vec<f64>> = treatments
        .iter()
        .map(|&l| (0..t).map(|j| if j == 0 || j == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let x_null = vec![vec![1.0]; y.len()];
    let full = fit_random_intercept(&y, &x_full, &machines, tol)?;
    let null = fit_random_intercept(&y, &x_null, &machines, tol)?;
    let lr_stat = (2.0 * (full.loglik - null.loglik)).max(0.0);
    let df = t - 1;
    let chi2 = ChiSquared::new(df as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(LRTestResult { loglik_full: full.loglik, loglik_null: null.loglik, lr_stat, df, p_value: chi2.sf(lr_stat), full, null })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::{make_nested_design, simulate_nested, SimulationTruth};
    use statrs::function::gamma::ln_gamma;

    #[test]
    fn hand_computed_fixture() {
        let r = oneway_f_test(&[vec![1.0, 2.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!((r.ss_between, r.ss_within), (1.0, 1.0));
        assert_eq!(r.f_stat, 2.0);
        assert_eq!((r.df1, r.df2), (1, 2));
        assert!(!r.degenerate);
    }

    #[test]
    fn identical_groups_give_p_one() {
        let r = oneway_f_test(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(r.f_stat, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn zero_within_variance_is_flagged() {
        let r = oneway_f_test(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!((r.ss_between, r.ss_within), (1.0, 0.0));
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn f_test_rejects_bad_input() {
        assert!(oneway_f_test(&[vec![1.0, 2.0]]).is_err());
        assert!(oneway_f_test(&[vec![1.0], vec![]]).is_err());
        assert!(oneway_f_test(&[vec![1.0], vec![2.0]]).is_err());
    }

    /// Brute-force oracle: compare residual sums of squares of the
    /// intercept-only and cell-means regressions.
    #[test]
    fn matches_regression_oracle() {
        let groups = vec![vec![1.3, 2.2, 0.4], vec![3.1, 2.9], vec![0.2, -1.0, 0.7, 1.1]];
        let y: Vec<f64> = groups.iter().flatten().copied().collect();
        let labels: Vec<usize> = groups.iter().enumerate().flat_map(|(g, v)| vec![g; v.len()]).collect();
        let rss = |x: DMatrix<f64>| {
            let yv = DVector::from_vec(y.clone());
            let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &yv));
            (yv - x * beta).norm_squared()
        };
        let rss0 = rss(DMatrix::from_element(y.len(), 1, 1.0));
        let rss1 = rss(DMatrix::from_fn(y.len(), 3, |i, j| if labels[i] == j { 1.0 } else { 0.0 }));
        let f = ((rss0 - rss1) / 2.0) / (rss1 / (y.len() - 3) as f64);
        let r = oneway_f_test(&groups).unwrap();
        assert!((r.f_stat - f).abs() < 1e-12 * f);
    }

    fn log_f_density(x: f64, d1: f64, d2: f64) -> f64 {
        ln_gamma((d1 + d2) / 2.0) - ln_gamma(d1 / 2.0) - ln_gamma(d2 / 2.0) + (d1 / 2.0) * (d1 / d2).ln()
            + (d1 / 2.0 - 1.0) * x.ln()
            - ((d1 + d2) / 2.0) * (1.0 + d1 * x / d2).ln()
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    #[test]
    fn p_value_matches_density_integration() {
        let triples = [
            (0.5, 2, 2), (1.0, 2, 5), (2.0, 3, 10), (4.0, 4, 20), (0.1, 5, 7), (3.3, 2, 12), (1.7, 6, 6),
            (8.0, 3, 4), (0.9, 4, 30), (2.5, 10, 10), (5.0, 2, 3), (1.2, 8, 16), (0.3, 3, 9), (6.1, 5, 25),
            (2.2, 7, 11), (1.0, 12, 4), (3.0, 2, 40), (0.7, 6, 14), (10.0, 4, 8), (1.5, 3, 3),
        ];
        for (f, d1, d2) in triples {
            let (d1, d2) = (d1 as f64, d2 as f64);
            // map [f, inf) onto [0, 1) with x = f + t / (1 - t)
            let g = |t: f64| {
                if t >= 1.0 {
                    return 0.0;
                }
                let x = f + t / (1.0 - t);
                (log_f_density(x, d1, d2)).exp() / (1.0 - t).powi(2)
            };
            let oracle = adaptive_simpson(&g, 0.0, 1.0, 1e-13);
            let p = f_upper_tail(f, d1, d2);
            assert!((p - oracle).abs() < 1e-8, "F({d1},{d2}) at {f}: {p} vs {oracle}");
        }
    }

    #[test]
    fn f_is_location_scale_invariant() {
        let groups = vec![vec![1.3, 2.2, 0.4], vec![3.1, 2.9], vec![0.2, -1.0, 0.7, 1.1]];
        let base = oneway_f_test(&groups).unwrap().f_stat;
        let moved: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|y| 3.5 * y - 20.0).collect()).collect();
        assert!((oneway_f_test(&moved).unwrap().f_stat - base).abs() < 1e-10 * base);
    }

    fn nested(effects: Vec<f64>, machine_sd: f64, seed: u64) -> Dataset {
        let design = make_nested_design(20, 4, 6, seed).unwrap();
        let truth = SimulationTruth {
            grand_mean: 5.0,
            effect_sds: [("machine".to_string(), machine_sd)].into_iter().collect(),
            residual_sd: 1.0,
            fixed_effects: Some(effects),
        };
        simulate_nested(&design, &truth, seed).unwrap().dataset
    }

    #[test]
    fn em_is_monotone_and_nests() {
        for seed in 0..10 {
            let data = nested(vec![0.0, 0.5, 1.0, 0.0], 0.8, seed);
            let r = lr_test_equal_treatments(&data, DEFAULT_EM_TOL).unwrap();
            for fit in [&r.full, &r.null] {
                for w in fit.trace.windows(2) {
                    assert!(w[1] >= w[0] - 1e-8, "EM decreased: {} -> {}", w[0], w[1]);
                }
                assert!(fit.tau2 >= 0.0 && fit.sigma2 > 0.0);
            }
            assert!(r.loglik_full >= r.loglik_null - 1e-8);
            assert!(r.lr_stat >= 0.0 && (0.0..=1.0).contains(&r.p_value));
        }
    }

    #[test]
    fn em_matches_balanced_closed_form() {
        // balanced one-way random effects: the ML estimates are explicit
        let data = nested(vec![0.0; 4], 1.0, 3);
        let r = lr_test_equal_treatments(&data, 1e-12).unwrap();
        let y = data.y();
        let machines = data.labels("machine").unwrap();
        let mut sums = [0.0; 20];
        for (yi, &m) in y.iter().zip(&machines) {
            sums[m] += yi;
        }
        let means: Vec<f64> = sums.iter().map(|s| s / 6.0).collect();
        let grand = y.iter().sum::<f64>() / 120.0;
        let ssw: f64 = y.iter().zip(&machines).map(|(yi, &m)| (yi - means[m]).powi(2)).sum();
        let ssb: f64 = means.iter().map(|m| 6.0 * (m - grand).powi(2)).sum();
        let sigma2 = ssw / 100.0;
        let tau2 = (ssb / 20.0 - sigma2) / 6.0;
        assert!(tau2 > 0.0);
        assert!((r.null.sigma2 - sigma2).abs() < 1e-4 * sigma2, "{} vs {sigma2}", r.null.sigma2);
        assert!((r.null.tau2 - tau2).abs() < 1e-3 * tau2, "{} vs {tau2}", r.null.tau2);
    }

    #[test]
    fn zero_machine_variance_pins_to_boundary() {
        // identical machine means: the tau2 score at 0 is negative
        let mut rows = Vec::new();
        for m in 0..8 {
            for (j, e) in [-1.0, 1.0, -0.5, 0.5].iter().enumerate() {
                rows.push(crate::designs::Observation { y: 2.0 + e, factors: [m, m % 2, j] });
            }
        }
        let data = Dataset::new(Schema::Nested, rows).unwrap();
        let r = lr_test_equal_treatments(&data, DEFAULT_EM_TOL).unwrap();
        assert!(r.null.pinned && r.null.tau2 == 0.0);
    }

    #[test]
    fn huge_effects_are_detected() {
        for seed in 0..5 {
            let data = nested(vec![0.0, 10.0, 20.0, 30.0], 1.0, seed);
            assert!(lr_test_equal_treatments(&data, DEFAULT_EM_TOL).unwrap().p_value < 0.001);
        }
    }
}
