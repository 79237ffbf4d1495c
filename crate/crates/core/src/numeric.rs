//! Small numerical helpers shared by the estimators.

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Streaming estimate of `log(mean(exp(l_j)))` with a max-shift so that
/// no weight is ever exponentiated at its raw scale.
#[derive(Debug, Clone)]
pub struct LogMeanAccumulator {
    shift: f64,
    sum: f64,
    sum_sq: f64,
    n: u64,
    n_nonzero: u64,
}

/// Result of a [`LogMeanAccumulator`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMeanEstimate {
    pub log_mean: f64,
    /// Delta-method standard error of `log_mean`.
    pub se_log: f64,
    pub n: u64,
    pub n_nonzero: u64,
}

impl Default for LogMeanAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMeanAccumulator {
    pub fn new() -> Self {
        Self {
            shift: f64::NEG_INFINITY,
            sum: 0.0,
            sum_sq: 0.0,
            n: 0,
            n_nonzero: 0,
        }
    }

    pub fn push(&mut self, log_weight: f64) {
        self.n += 1;
        if log_weight == f64::NEG_INFINITY {
            return;
        }
        self.n_nonzero += 1;
        if log_weight > self.shift {
            let r = (self.shift - log_weight).exp();
            self.sum *= r;
            self.sum_sq *= r * r;
            self.shift = log_weight;
        }
        let w = (log_weight - self.shift).exp();
        self.sum += w;
        self.sum_sq += w * w;
    }

    /// Fold in another accumulator's draws.
    pub fn merge(&mut self, other: &LogMeanAccumulator) {
        self.n += other.n;
        self.n_nonzero += other.n_nonzero;
        if other.shift == f64::NEG_INFINITY {
            return;
        }
        if other.shift > self.shift {
            let r = (self.shift - other.shift).exp();
            self.sum = self.sum * r + other.sum;
            self.sum_sq = self.sum_sq * r * r + other.sum_sq;
            self.shift = other.shift;
        } else {
            let r = (other.shift - self.shift).exp();
            self.sum += other.sum * r;
            self.sum_sq += other.sum_sq * r * r;
        }
    }

    pub fn finish(&self) -> LogMeanEstimate {
        if self.n_nonzero == 0 {
            return LogMeanEstimate {
                log_mean: f64::NEG_INFINITY,
                se_log: f64::INFINITY,
                n: self.n,
                n_nonzero: 0,
            };
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
        LogMeanEstimate {
            log_mean: self.shift + mean.ln(),
            se_log: (var / n).sqrt() / mean,
            n: self.n,
            n_nonzero: self.n_nonzero,
        }
    }
}

/// `log ∫ exp(log_f(x)) dx` over `[lo, hi]` by the trapezoid rule on `n`
/// intervals. Accurate for smooth integrands that decay at both ends.
pub fn log_trapezoid(log_f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n)
        .map(|i| {
            let v = log_f(lo + i as f64 * h);
            if i == 0 || i == n {
                v - std::f64::consts::LN_2
            } else {
                v
            }
        })
        .collect();
    log_sum_exp(&vals) + h.ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with denominator `n - 1`.
pub fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Quantile with linear interpolation between order statistics (R type 7).
/// `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Render with `digits` significant digits.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{:.*e}", digits - 1, x);
    }
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// `x` rounded to `digits` significant digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    fmt_sig(x, digits).parse().unwrap_or(x)
}
