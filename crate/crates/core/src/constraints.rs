//! Order constraints on treatment effects.
//!
//! A constraint is a chain of disjoint groups, `G1 < G2 < ... < Gr`, meaning
//! every effect in `G_i` is strictly below every effect in `G_{i+1}`. Text
//! form: `b1<b2<b3` or `{b1,b4}<{b2,b3,b5}`; indices are 1-based.

use std::fmt;

use num_rational::Ratio;
use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng;
use crate::samplers::PriorSpec;

/// Largest parameter count whose exact proportion fits in `u128`.
pub const MAX_PARAMETERS: usize = 33;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConstraintError {
    #[error("parse error at position {position}: {message} (grammar: term ('<' term)*, term := bN | '{{' bN (',' bN)* '}}')")]
    Parse { position: usize, message: String },
    #[error("index b{index} is outside 1..={k}")]
    Range { index: usize, k: usize },
    #[error("index b{index} appears more than once; the chain would contradict itself")]
    Conflict { index: usize },
    #[error("at most {MAX_PARAMETERS} parameters are supported, got {0}")]
    TooManyParameters(usize),
}

/// A chain of disjoint, nonempty groups of 0-based parameter indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConstraintSet {
    k: usize,
    chain: Vec<Vec<usize>>,
}

impl ConstraintSet {
    pub fn new(k: usize, chain: Vec<Vec<usize>>) -> Result<Self, ConstraintError> {
        if k > MAX_PARAMETERS {
            return Err(ConstraintError::TooManyParameters(k));
        }
        let mut seen = vec![false; k];
        for group in &chain {
            if group.is_empty() {
                return Err(ConstraintError::Parse { position: 0, message: "empty group".into() });
            }
            for &i in group {
                if i >= k {
                    return Err(ConstraintError::Range { index: i + 1, k });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(ConstraintError::Conflict { index: i + 1 });
                }
            }
        }
        Ok(Self { k, chain })
    }

    /// The constraint that every parameter vector satisfies.
    pub fn unconstrained(k: usize) -> Self {
        Self { k, chain: Vec::new() }
    }

    /// Full ordering `b1 < b2 < ... < bk`.
    pub fn full_order(k: usize) -> Self {
        Self { k, chain: (0..k).map(|i| vec![i]).collect() }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn chain(&self) -> &[Vec<usize>] {
        &self.chain
    }

    /// A chain with fewer than two groups constrains nothing.
    pub fn is_unconstrained(&self) -> bool {
        self.chain.len() < 2
    }

    /// 1 if `beta` satisfies every strict inequality of the chain, else 0.
    /// Ties at a group boundary count as violations.
    pub fn indicator(&self, beta: &[f64]) -> Result<u8> {
        if beta.len() != self.k {
            return Err(Error::InvalidArgument(format!(
                "constraint over {} parameters applied to a vector of length {}",
                self.k,
                beta.len()
            )));
        }
        Ok(u8::from(self.holds(beta)))
    }

    /// Unchecked [`indicator`](Self::indicator) for hot loops.
    pub(crate) fn holds(&self, beta: &[f64]) -> bool {
        self.chain.windows(2).all(|w| {
            let lower = w[0].iter().map(|&i| beta[i]).fold(f64::NEG_INFINITY, f64::max);
            let upper = w[1].iter().map(|&i| beta[i]).fold(f64::INFINITY, f64::min);
            lower < upper
        })
    }

    /// Prior probability of the constraint under any exchangeable continuous
    /// prior: the share of orderings of the covered indices consistent with
    /// the chain, `prod |g_i|! / m!`. Indices outside the chain do not matter.
    pub fn exact_prior_proportion(&self) -> Ratio<u128> {
        // 1 / multinomial(m; |g_1|, ..., |g_r|), built as a product of
        // binomials so intermediate values stay small.
        let mut denom: u128 = 1;
        let mut placed: u128 = 0;
        for group in &self.chain {
            for j in 1..=group.len() as u128 {
                placed += 1;
                denom = denom * placed / j;
            }
        }
        Ratio::new(1, denom)
    }

    /// `exact_prior_proportion` as `f64`.
    pub fn prior_proportion(&self) -> f64 {
        let r = self.exact_prior_proportion();
        *r.numer() as f64 / *r.denom() as f64
    }
}

impl fmt::Display for ConstraintSet {
    /// Canonical form: singletons bare, groups braced, no whitespace.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, group) in self.chain.iter().enumerate() {
            if n > 0 {
                f.write_str("<")?;
            }
            let ids: Vec<String> = group.iter().map(|i| format!("b{}", i + 1)).collect();
            if ids.len() == 1 {
                f.write_str(&ids[0])?;
            } else {
                write!(f, "{{{}}}", ids.join(","))?;
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.src.get(self.pos).is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn err(&self, message: impl Into<String>) -> ConstraintError {
        ConstraintError::Parse { position: self.pos, message: message.into() }
    }

    fn expect(&mut self, byte: u8) -> Result<(), ConstraintError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", byte as char)))
        }
    }

    fn id(&mut self) -> Result<usize, ConstraintError> {
        if !matches!(self.peek(), Some(b'b' | b'B')) {
            return Err(self.err("expected a parameter like b1"));
        }
        self.pos += 1;
        let start = self.pos;
        while self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected digits after 'b'"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("index too large"))
    }

    fn term(&mut self) -> Result<Vec<usize>, ConstraintError> {
        if self.peek() == Some(b'{') {
            self.pos += 1;
            let mut ids = vec![self.id()?];
            while self.peek() == Some(b',') {
                self.pos += 1;
                ids.push(self.id()?);
            }
            self.expect(b'}')?;
            Ok(ids)
        } else {
            Ok(vec![self.id()?])
        }
    }
}

/// Parse `text` into a chain over `k` parameters.
pub fn parse_constraints(text: &str, k: usize) -> Result<ConstraintSet, ConstraintError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let mut chain = vec![p.term()?];
    while p.peek() == Some(b'<') {
        p.pos += 1;
        chain.push(p.term()?);
    }
    if p.peek().is_some() {
        return Err(p.err("unexpected trailing input"));
    }
    for group in &mut chain {
        for index in group.iter_mut() {
            if *index == 0 || *index > k {
                return Err(ConstraintError::Range { index: *index, k });
            }
            *index -= 1;
        }
    }
    ConstraintSet::new(k, chain)
}

/// Share of `n` unconstrained prior draws satisfying `cs`, with its binomial
/// standard error.
pub fn mc_prior_proportion(cs: &ConstraintSet, prior: &PriorSpec, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 draws, got {n}")));
    }
    if cs.is_unconstrained() {
        return Ok((1.0, 0.0));
    }
    let mut rng = rng::stream(seed, "prior-proportion", 0);
    let sd = prior.beta_var.sqrt();
    let mut beta = vec![0.0; cs.k()];
    let mut hits = 0usize;
    for _ in 0..n {
        for b in beta.iter_mut() {
            *b = prior.beta_mean + sd * rng.sample::<f64, _>(StandardNormal);
        }
        hits += usize::from(cs.holds(&beta));
    }
    let p = hits as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}
