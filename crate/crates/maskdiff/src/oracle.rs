//! Exactly enumerable reference distributions with closed-form access to
//! every quantity the losses and estimators are checked against: joint
//! log-probabilities, conditionals given a partially masked sequence,
//! diffused marginals, true score ratios, KL divergences, and mutual
//! information.
//!
//! Two concrete families are provided. [`ExplicitCategorical`] stores its
//! whole support as `(sequence, probability)` pairs and answers every query
//! by scanning it. [`MarkovChainModel`] is a k-th-order chain whose
//! length-`L` window distribution is queried through an exact
//! forward–backward sweep over packed k-gram states; a brute-force
//! completion enumeration is kept alongside as a cross-check at tiny sizes.
//! All support accumulations run in the log domain with compensated sums,
//! because softmax-built supports span several orders of magnitude.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernel::log_mask_pattern_probability;
use crate::numerics::{KahanSum, LogSumExp};
use crate::types::{MaskedSequence, Sequence};

/// Exact log-probability of a sequence, with off-support queries flagged
/// rather than erroring: out-of-distribution evaluations are legitimate,
/// but estimators must decide explicitly how to treat them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogProb {
    Finite(f64),
    OffSupport,
}

impl LogProb {
    /// The log-probability, `−∞` when off-support.
    pub fn value(self) -> f64 {
        match self {
            LogProb::Finite(v) => v,
            LogProb::OffSupport => f64::NEG_INFINITY,
        }
    }

    pub fn is_off_support(self) -> bool {
        matches!(self, LogProb::OffSupport)
    }

    /// `Some(log p)` on support, `None` off it.
    pub fn finite(self) -> Option<f64> {
        match self {
            LogProb::Finite(v) => Some(v),
            LogProb::OffSupport => None,
        }
    }
}

/// Sequence length above which 2^L mask-pattern enumerations are refused.
pub const PATTERN_ENUMERATION_CAP: usize = 16;
/// Largest `N^L` state space enumerated for uniform-kernel KL.
pub const UNIFORM_KL_STATE_CAP: u128 = 4096;
/// Largest support size enumerated for entropy / mutual information on
/// implicit distributions.
pub const SUPPORT_ENUMERATION_CAP: u128 = 1 << 16;
/// Largest completion count the brute-force Markov conditional will visit.
pub const COMPLETION_ENUMERATION_CAP: u128 = 1 << 20;

/// A distribution over length-`L` sequences given by its explicit support.
#[derive(Debug, Clone)]
pub struct ExplicitCategorical {
    support: Vec<(Sequence, f64)>,
    log_probs: Vec<f64>,
    index: HashMap<Vec<u16>, usize>,
    len: usize,
    n: u16,
}

impl ExplicitCategorical {
    /// Builds from `(sequence, probability)` pairs.
    ///
    /// Probabilities must be strictly positive and sum to 1 within 1e−12;
    /// sequences must be distinct and share one length and alphabet size.
    pub fn new(support: Vec<(Sequence, f64)>) -> Result<Self> {
        let (first, _) = support.first().ok_or_else(|| {
            Error::InvalidArgument("categorical support must be non-empty".into())
        })?;
        let len = first.len();
        let n = first.alphabet_size();
        let mut index = HashMap::with_capacity(support.len());
        let mut total = KahanSum::new();
        for (pos, (x, p)) in support.iter().enumerate() {
            if x.len() != len || x.alphabet_size() != n {
                return Err(Error::InvalidArgument(format!(
                    "support atom {pos} has shape ({}, {}), expected ({len}, {n})",
                    x.len(),
                    x.alphabet_size()
                )));
            }
            if !(*p > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "support atom {pos} has non-positive probability {p}"
                )));
            }
            if index.insert(x.tokens().to_vec(), pos).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "support atom {pos} duplicates an earlier sequence"
                )));
            }
            total.add(*p);
        }
        let sum = total.value();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "support probabilities sum to {sum}, not 1"
            )));
        }
        let log_probs = support.iter().map(|(_, p)| p.ln()).collect();
        Ok(Self {
            support,
            log_probs,
            index,
            len,
            n,
        })
    }

    /// Builds from unnormalized positive weights.
    pub fn from_weights(sequences: Vec<Sequence>, weights: Vec<f64>) -> Result<Self> {
        if sequences.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sequences but {} weights",
                sequences.len(),
                weights.len()
            )));
        }
        let mut total = KahanSum::new();
        for &w in &weights {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "weights must be positive and finite, got {w}"
                )));
            }
            total.add(w);
        }
        let z = total.value();
        // Renormalize with one compensated pass so the constructor's
        // sum-to-1 check passes exactly.
        let mut probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let drift = kahan_total(&probs) - 1.0;
        if let Some(p) = probs.last_mut() {
            *p -= drift;
        }
        Self::new(sequences.into_iter().zip(probs).collect())
    }

    /// Product distribution with an independent marginal per position.
    pub fn from_independent_marginals(marginals: &[Vec<f64>]) -> Result<Self> {
        let len = marginals.len();
        if len == 0 {
            return Err(Error::InvalidArgument("no marginals given".into()));
        }
        let n = marginals[0].len();
        if n < 2 || n > usize::from(u16::MAX - 1) {
            return Err(Error::InvalidArgument(format!(
                "alphabet size {n} out of range"
            )));
        }
        for (i, row) in marginals.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "marginal {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(p >= 0.0)) || (kahan_total(row) - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "marginal {i} is not a probability vector"
                )));
            }
        }
        let states = (n as u128).checked_pow(len as u32).filter(|&s| s <= SUPPORT_ENUMERATION_CAP);
        let Some(_) = states else {
            return Err(Error::CapExceeded {
                what: "product-distribution support",
                needed: (n as u128).checked_pow(len as u32).unwrap_or(u128::MAX),
                cap: SUPPORT_ENUMERATION_CAP,
            });
        };
        let mut support = Vec::new();
        let mut tokens = vec![0u16; len];
        loop {
            let p: f64 = tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| marginals[i][usize::from(t)])
                .product();
            if p > 0.0 {
                support.push((Sequence::new(tokens.clone(), n as u16)?, p));
            }
            // Odometer over all N^L token tuples.
            let mut pos = len;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                tokens[pos] += 1;
                if usize::from(tokens[pos]) < n {
                    break;
                }
                tokens[pos] = 0;
            }
            if tokens.iter().all(|&t| t == 0) {
                break;
            }
        }
        // Positive rows were verified above, so the products sum to 1 up to
        // rounding; shave the drift onto the largest atom.
        let drift = kahan_total(&support.iter().map(|(_, p)| *p).collect::<Vec<_>>()) - 1.0;
        if let Some((_, p)) = support
            .iter_mut()
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite probabilities"))
        {
            *p -= drift;
        }
        Self::new(support)
    }

    /// Uniform distribution over all `N^L` sequences.
    pub fn uniform(n: u16, len: usize) -> Result<Self> {
        let row = vec![1.0 / f64::from(n); usize::from(n)];
        Self::from_independent_marginals(&vec![row; len])
    }

    pub fn support(&self) -> &[(Sequence, f64)] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alphabet_size(&self) -> u16 {
        self.n
    }

    /// Versioned text form: header, `N L`, then one `tokens… probability`
    /// row per atom.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("explicit-categorical v1\n");
        let _ = writeln!(out, "{} {}", self.n, self.len);
        for (x, p) in &self.support {
            for &t in x.tokens() {
                let _ = write!(out, "{t} ");
            }
            let _ = writeln!(out, "{p}");
        }
        out
    }

    /// Parses the [`to_text`](Self::to_text) form.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "explicit-categorical v1" {
            return Err(Error::Format(format!(
                "unexpected categorical header {header:?}"
            )));
        }
        let shape = lines
            .next()
            .ok_or_else(|| Error::Format("missing shape line".into()))?;
        let mut it = shape.split_whitespace();
        let n: u16 = parse_field(it.next(), "alphabet size")?;
        let len: usize = parse_field(it.next(), "sequence length")?;
        let mut support = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != len + 1 {
                return Err(Error::Format(format!(
                    "support row {row} has {} fields, expected {}",
                    fields.len(),
                    len + 1
                )));
            }
            let tokens = fields[..len]
                .iter()
                .map(|f| {
                    f.parse::<u16>()
                        .map_err(|e| Error::Format(format!("support row {row}: {e}")))
                })
                .collect::<Result<Vec<u16>>>()?;
            let p: f64 = fields[len]
                .parse()
                .map_err(|e| Error::Format(format!("support row {row}: {e}")))?;
            support.push((Sequence::new(tokens, n)?, p));
        }
        Self::new(support)
    }
}

fn kahan_total(values: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .ok_or_else(|| Error::Format(format!("missing {what}")))?
        .parse()
        .map_err(|e| Error::Format(format!("bad {what}: {e}")))
}

/// A k-th-order Markov chain over an alphabet of size `N`.
///
/// Contexts are k-grams packed big-endian (`ctx = Σ token·N^{k−1−j}`), the
/// transition table holds one probability row per context, and `initial`
/// is the distribution of the first k tokens of a window.
#[derive(Debug, Clone)]
pub struct MarkovChainModel {
    order: usize,
    n: u16,
    transitions: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

impl MarkovChainModel {
    pub fn new(
        order: usize,
        n: u16,
        transitions: Vec<Vec<f64>>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "alphabet size {n} too small"
            )));
        }
        let contexts = (usize::from(n))
            .checked_pow(order as u32)
            .ok_or_else(|| Error::InvalidArgument(format!("order {order} overflows")))?;
        if transitions.len() != contexts {
            return Err(Error::InvalidArgument(format!(
                "{} transition rows, expected {contexts}",
                transitions.len()
            )));
        }
        for (c, row) in transitions.iter().enumerate() {
            check_probability_row(row, usize::from(n), &format!("transition row {c}"))?;
        }
        if initial.len() != contexts {
            return Err(Error::InvalidArgument(format!(
                "initial distribution has {} entries, expected {contexts}",
                initial.len()
            )));
        }
        check_probability_row(&initial, contexts, "initial distribution")?;
        Ok(Self {
            order,
            n,
            transitions,
            initial,
        })
    }

    /// Builds with the stationary k-gram distribution as `initial`,
    /// matching windows drawn far from the start of a long realization.
    pub fn with_stationary_initial(
        order: usize,
        n: u16,
        transitions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let contexts = (usize::from(n))
            .checked_pow(order as u32)
            .ok_or_else(|| Error::InvalidArgument(format!("order {order} overflows")))?;
        let uniform = vec![1.0 / contexts as f64; contexts];
        let mut model = Self::new(order, n, transitions, uniform)?;
        let mut pi = model.initial.clone();
        let mut next = vec![0.0f64; contexts];
        for _ in 0..200_000 {
            next.iter_mut().for_each(|v| *v = 0.0);
            for (c, &mass) in pi.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let row = &model.transitions[c];
                for b in 0..usize::from(n) {
                    next[model.shift(c, b as u16)] += mass * row[b];
                }
            }
            let delta = pi
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            std::mem::swap(&mut pi, &mut next);
            if delta < 1e-15 {
                break;
            }
        }
        let z = kahan_total(&pi);
        pi.iter_mut().for_each(|v| *v /= z);
        model.initial = pi;
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet_size(&self) -> u16 {
        self.n
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn context_count(&self) -> usize {
        self.transitions.len()
    }

    /// Packed context after consuming token `b`: drop the oldest symbol,
    /// append the new one.
    pub fn shift(&self, ctx: usize, b: u16) -> usize {
        if self.order == 0 {
            return 0;
        }
        let stride = self.context_count() / usize::from(self.n);
        (ctx % stride) * usize::from(self.n) + usize::from(b)
    }

    /// Token at offset `j` (0 = oldest) of a packed context.
    pub fn context_token(&self, ctx: usize, j: usize) -> u16 {
        debug_assert!(j < self.order);
        let stride = usize::from(self.n).pow((self.order - 1 - j) as u32);
        ((ctx / stride) % usize::from(self.n)) as u16
    }

    /// Packs the first `k` tokens of a slice into a context index.
    pub fn pack(&self, tokens: &[u16]) -> usize {
        debug_assert!(tokens.len() >= self.order);
        tokens[..self.order]
            .iter()
            .fold(0usize, |acc, &t| acc * usize::from(self.n) + usize::from(t))
    }

    /// Versioned text form: header, `k N`, the initial distribution (one
    /// value per line), then one transition row per context.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("markov-chain v1\n");
        let _ = writeln!(out, "{} {}", self.order, self.n);
        out.push_str("initial\n");
        for p in &self.initial {
            let _ = writeln!(out, "{p}");
        }
        out.push_str("transitions\n");
        for row in &self.transitions {
            let mut first = true;
            for p in row {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{p}");
                first = false;
            }
            out.push('\n');
        }
        out
    }

    /// Parses the [`to_text`](Self::to_text) form.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "markov-chain v1" {
            return Err(Error::Format(format!("unexpected markov header {header:?}")));
        }
        let shape = lines
            .next()
            .ok_or_else(|| Error::Format("missing shape line".into()))?;
        let mut it = shape.split_whitespace();
        let order: usize = parse_field(it.next(), "order")?;
        let n: u16 = parse_field(it.next(), "alphabet size")?;
        let contexts = usize::from(n)
            .checked_pow(order as u32)
            .ok_or_else(|| Error::Format(format!("order {order} overflows")))?;
        if lines.next() != Some("initial") {
            return Err(Error::Format("missing `initial` marker".into()));
        }
        let mut initial = Vec::with_capacity(contexts);
        for _ in 0..contexts {
            initial.push(parse_field(lines.next(), "initial entry")?);
        }
        if lines.next() != Some("transitions") {
            return Err(Error::Format("missing `transitions` marker".into()));
        }
        let mut transitions = Vec::with_capacity(contexts);
        for c in 0..contexts {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing transition row {c}")))?;
            let row = line
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Format(format!("transition row {c}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            transitions.push(row);
        }
        Self::new(order, n, transitions, initial)
    }
}

fn check_probability_row(row: &[f64], expected_len: usize, what: &str) -> Result<()> {
    if row.len() != expected_len {
        return Err(Error::InvalidArgument(format!(
            "{what} has {} entries, expected {expected_len}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let sum = kahan_total(row);
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "{what} sums to {sum}, not 1"
        )));
    }
    Ok(())
}

/// A reference distribution: explicit support, or a Markov chain restricted
/// to length-`len` windows.
#[derive(Debug, Clone)]
pub enum OracleDistribution {
    Categorical(ExplicitCategorical),
    MarkovWindow { model: MarkovChainModel, len: usize },
}

impl OracleDistribution {
    pub fn markov_window(model: MarkovChainModel, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("window length must be ≥ 1".into()));
        }
        Ok(Self::MarkovWindow { model, len })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Categorical(c) => c.len(),
            Self::MarkovWindow { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alphabet_size(&self) -> u16 {
        match self {
            Self::Categorical(c) => c.alphabet_size(),
            Self::MarkovWindow { model, .. } => model.alphabet_size(),
        }
    }

    fn check_shape(&self, len: usize, n: u16) -> Result<()> {
        if len != self.len() || n != self.alphabet_size() {
            return Err(Error::InvalidArgument(format!(
                "query shape ({len}, {n}) does not match distribution ({}, {})",
                self.len(),
                self.alphabet_size()
            )));
        }
        Ok(())
    }

    /// Exact `log p₀(x)`; off-support sequences are flagged, not errors.
    pub fn log_prob(&self, x: &Sequence) -> Result<LogProb> {
        self.check_shape(x.len(), x.alphabet_size())?;
        match self {
            Self::Categorical(c) => Ok(match c.index.get(x.tokens()) {
                Some(&i) => LogProb::Finite(c.log_probs[i]),
                None => LogProb::OffSupport,
            }),
            Self::MarkovWindow { model, len } => {
                let tokens = x.tokens();
                let k = model.order();
                let mut log_p = 0.0f64;
                if *len <= k {
                    // Marginal of the initial k-gram distribution over the
                    // first `len` coordinates.
                    let mut acc = KahanSum::new();
                    for (ctx, &p) in model.initial.iter().enumerate() {
                        if (0..*len).all(|j| model.context_token(ctx, j) == tokens[j]) {
                            acc.add(p);
                        }
                    }
                    let total = acc.value();
                    return Ok(if total > 0.0 {
                        LogProb::Finite(total.ln())
                    } else {
                        LogProb::OffSupport
                    });
                }
                let head = model.initial[model.pack(tokens)];
                if head == 0.0 {
                    return Ok(LogProb::OffSupport);
                }
                log_p += head.ln();
                let mut ctx = model.pack(tokens);
                for &b in &tokens[k..] {
                    let p = model.transitions[ctx][usize::from(b)];
                    if p == 0.0 {
                        return Ok(LogProb::OffSupport);
                    }
                    log_p += p.ln();
                    ctx = model.shift(ctx, b);
                }
                Ok(LogProb::Finite(log_p))
            }
        }
    }

    /// `ln P₀(x^UM)` — log-probability that the unmasked positions take the
    /// observed values, masked positions free. `−∞` when the event is null.
    pub fn log_marginal_unmasked(&self, x: &MaskedSequence) -> Result<f64> {
        self.check_shape(x.len(), x.alphabet_size())?;
        match self {
            Self::Categorical(c) => {
                let mut acc = LogSumExp::new();
                for (atom, lp) in c.support.iter().zip(&c.log_probs) {
                    if x.consistent_with(&atom.0) {
                        acc.add(*lp);
                    }
                }
                Ok(acc.value())
            }
            Self::MarkovWindow { model, len } => {
                let obs: Vec<Option<u16>> = (0..*len)
                    .map(|i| if x.is_masked(i) { None } else { Some(x.token(i)) })
                    .collect();
                Ok(markov_log_marginal(model, &obs))
            }
        }
    }

    /// Exact conditional `p₀(· | x^UM)` at masked position `i`.
    pub fn conditional(&self, x: &MaskedSequence, i: usize) -> Result<Vec<f64>> {
        if i >= x.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: x.len(),
            });
        }
        if !x.is_masked(i) {
            return Err(Error::InvalidArgument(format!(
                "position {i} is not masked"
            )));
        }
        self.check_shape(x.len(), x.alphabet_size())?;
        match self {
            Self::Categorical(c) => {
                let n = usize::from(c.alphabet_size());
                let mut per_token = vec![LogSumExp::new(); n];
                for (atom, lp) in c.support.iter().zip(&c.log_probs) {
                    if x.consistent_with(&atom.0) {
                        per_token[usize::from(atom.0.token(i))].add(*lp);
                    }
                }
                normalize_log_weights(&per_token, i)
            }
            Self::MarkovWindow { model, len } => {
                let obs: Vec<Option<u16>> = (0..*len)
                    .map(|j| if x.is_masked(j) { None } else { Some(x.token(j)) })
                    .collect();
                let sweep = MarkovSweep::run(model, &obs);
                sweep.conditional(model, &obs, i)
            }
        }
    }

    /// Conditionals at every masked position in one pass.
    ///
    /// Equivalent to calling [`conditional`](Self::conditional) per
    /// position, but the support scan / forward–backward sweep is shared.
    pub fn masked_conditionals(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>> {
        self.check_shape(x.len(), x.alphabet_size())?;
        let masked = x.masked_indices();
        if masked.is_empty() {
            return Ok(Vec::new());
        }
        match self {
            Self::Categorical(c) => {
                let n = usize::from(c.alphabet_size());
                let mut weights = vec![vec![LogSumExp::new(); n]; masked.len()];
                for (atom, lp) in c.support.iter().zip(&c.log_probs) {
                    if x.consistent_with(&atom.0) {
                        for (slot, &i) in masked.iter().enumerate() {
                            weights[slot][usize::from(atom.0.token(i))].add(*lp);
                        }
                    }
                }
                masked
                    .into_iter()
                    .zip(weights)
                    .map(|(i, w)| Ok((i, normalize_log_weights(&w, i)?)))
                    .collect()
            }
            Self::MarkovWindow { model, len } => {
                let obs: Vec<Option<u16>> = (0..*len)
                    .map(|j| if x.is_masked(j) { None } else { Some(x.token(j)) })
                    .collect();
                let sweep = MarkovSweep::run(model, &obs);
                masked
                    .into_iter()
                    .map(|i| Ok((i, sweep.conditional(model, &obs, i)?)))
                    .collect()
            }
        }
    }

    /// `log p_λ(x)` — log-probability of a masked state under the absorbing
    /// forward process at mask level `λ`.
    pub fn log_diffused_marginal(&self, x: &MaskedSequence, lambda: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Domain(format!("mask level {lambda} outside [0, 1]")));
        }
        let m = x.masked_count();
        let u = x.len() - m;
        let pattern = log_mask_pattern_probability(m, u, lambda);
        if pattern == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(pattern + self.log_marginal_unmasked(x)?)
    }

    /// `p_λ(x) = Σ_{x₀} p₀(x₀)·P(pattern | x₀, λ)`, exact.
    pub fn diffused_marginal(&self, x: &MaskedSequence, lambda: f64) -> Result<f64> {
        Ok(self.log_diffused_marginal(x, lambda)?.exp())
    }

    /// True score `p_λ(y)/p_λ(x)` for states differing at exactly one
    /// position (absorbing state space).
    pub fn true_score(
        &self,
        x: &MaskedSequence,
        y: &MaskedSequence,
        lambda: f64,
    ) -> Result<f64> {
        if x.len() != y.len() || x.alphabet_size() != y.alphabet_size() {
            return Err(Error::InvalidArgument(
                "score states must share shape".into(),
            ));
        }
        let differing = x
            .tokens()
            .iter()
            .zip(y.tokens())
            .filter(|(a, b)| a != b)
            .count();
        if differing != 1 {
            return Err(Error::InvalidArgument(format!(
                "score states must differ at exactly one position, found {differing}"
            )));
        }
        let log_px = self.log_diffused_marginal(x, lambda)?;
        if log_px == f64::NEG_INFINITY {
            return Err(Error::ZeroDenominator);
        }
        let log_py = self.log_diffused_marginal(y, lambda)?;
        Ok((log_py - log_px).exp())
    }

    /// Time-free form of the unmask-move score: `((1−λ)/λ)·p₀(v | x^UM)`
    /// for `y = x` with masked position `i` set to `v`.
    ///
    /// Must agree with [`true_score`](Self::true_score) on the same move —
    /// the pair is kept as a cross-check of the marginal computations.
    pub fn true_score_unmask(
        &self,
        x: &MaskedSequence,
        i: usize,
        v: u16,
        lambda: f64,
    ) -> Result<f64> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Domain(format!(
                "unmask score needs λ ∈ (0, 1], got {lambda}"
            )));
        }
        if v >= x.alphabet_size() {
            return Err(Error::InvalidArgument(format!(
                "token {v} out of range for alphabet size {}",
                x.alphabet_size()
            )));
        }
        let conditional = self.conditional(x, i)?;
        Ok((1.0 - lambda) / lambda * conditional[usize::from(v)])
    }

    /// Exact `D_KL(p_{λ|0}(· | x₀) ‖ p_λ)` by enumerating all 2^L mask
    /// patterns of `x₀`.
    ///
    /// Defined on λ ∈ [0, 1]; the endpoints reproduce the decomposition
    /// limits (−log p₀(x₀) at λ=0, zero at λ=1). Returns `+∞` when `x₀` is
    /// off-support (absolute continuity fails).
    pub fn kl_conditional_vs_marginal(&self, x0: &Sequence, lambda: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Domain(format!("mask level {lambda} outside [0, 1]")));
        }
        self.check_shape(x0.len(), x0.alphabet_size())?;
        let l = x0.len();
        if l > PATTERN_ENUMERATION_CAP {
            return Err(Error::CapExceeded {
                what: "mask-pattern enumeration",
                needed: 1u128 << l,
                cap: 1u128 << PATTERN_ENUMERATION_CAP,
            });
        }
        let n = x0.alphabet_size();
        let mask = crate::types::mask_token(n);
        let mut kl = KahanSum::new();
        for pattern in 0u32..(1u32 << l) {
            // Bit set ⇒ position masked.
            let m = pattern.count_ones() as usize;
            let log_q = log_mask_pattern_probability(m, l - m, lambda);
            if log_q == f64::NEG_INFINITY {
                continue;
            }
            let tokens: Vec<u16> = (0..l)
                .map(|i| {
                    if pattern & (1 << i) != 0 {
                        mask
                    } else {
                        x0.token(i)
                    }
                })
                .collect();
            let state = MaskedSequence::new(tokens, n)?;
            let log_p = self.log_diffused_marginal(&state, lambda)?;
            if log_p == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            kl.add(log_q.exp() * (log_q - log_p));
        }
        Ok(kl.value())
    }

    /// Exact mutual information `I(x₀; x_λ) = E_{p₀}[D_KL(p_{λ|0} ‖ p_λ)]`.
    pub fn mutual_information(&self, lambda: f64) -> Result<f64> {
        let mut acc = KahanSum::new();
        for (x0, p) in self.enumerate_support()? {
            acc.add(p * self.kl_conditional_vs_marginal(&x0, lambda)?);
        }
        Ok(acc.value())
    }

    /// Shannon entropy `H(p₀)` in nats.
    pub fn entropy(&self) -> Result<f64> {
        let mut acc = KahanSum::new();
        for (_, p) in self.enumerate_support()? {
            acc.add(-p * p.ln());
        }
        Ok(acc.value())
    }

    /// The positive-probability outcomes. Explicit for the categorical;
    /// enumerated (capped) for Markov windows.
    pub fn enumerate_support(&self) -> Result<Vec<(Sequence, f64)>> {
        match self {
            Self::Categorical(c) => Ok(c.support.clone()),
            Self::MarkovWindow { model, len } => {
                let n = usize::from(model.alphabet_size());
                let states = (n as u128).checked_pow(*len as u32).unwrap_or(u128::MAX);
                if states > SUPPORT_ENUMERATION_CAP {
                    return Err(Error::CapExceeded {
                        what: "window support enumeration",
                        needed: states,
                        cap: SUPPORT_ENUMERATION_CAP,
                    });
                }
                let mut out = Vec::new();
                let mut tokens = vec![0u16; *len];
                loop {
                    let x = Sequence::new(tokens.clone(), model.alphabet_size())?;
                    if let LogProb::Finite(lp) = self.log_prob(&x)? {
                        out.push((x, lp.exp()));
                    }
                    let mut pos = *len;
                    loop {
                        if pos == 0 {
                            break;
                        }
                        pos -= 1;
                        tokens[pos] += 1;
                        if usize::from(tokens[pos]) < n {
                            break;
                        }
                        tokens[pos] = 0;
                    }
                    if tokens.iter().all(|&t| t == 0) {
                        break;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Diffused marginal under the uniform token kernel at noise load `σ̄`:
    /// `p(x) = Σ_{x₀} p₀(x₀)·Π_i P_σ̄(xⁱ | x₀ⁱ)` with no mask state.
    pub fn diffused_marginal_uniform(&self, x: &Sequence, sigma_bar: f64) -> Result<f64> {
        if sigma_bar < 0.0 {
            return Err(Error::Domain(format!("negative noise load {sigma_bar}")));
        }
        self.check_shape(x.len(), x.alphabet_size())?;
        let n = f64::from(x.alphabet_size());
        let decay = (-sigma_bar).exp();
        let p_same = (1.0 + (n - 1.0) * decay) / n;
        let p_other = (1.0 - decay) / n;
        let mut acc = LogSumExp::new();
        for (x0, p) in self.enumerate_support()? {
            let matches = x
                .tokens()
                .iter()
                .zip(x0.tokens())
                .filter(|(a, b)| a == b)
                .count();
            let mismatches = x.len() - matches;
            // Zero counts contribute a factor of 1 even when the base
            // probability is 0 (σ̄ = 0 makes p_other vanish).
            let log_pow = |p: f64, c: usize| if c == 0 { 0.0 } else { p.ln() * c as f64 };
            acc.add(p.ln() + log_pow(p_same, matches) + log_pow(p_other, mismatches));
        }
        Ok(acc.value().exp())
    }

    /// `KL(p_{σ̄|0}(·|x₀) ‖ p_σ̄)` under the uniform token kernel, by
    /// enumerating every one of the `N^L` diffused states.
    ///
    /// At `σ̄ = 0` this is `−ln p₀(x₀)` (the conditional is a point mass);
    /// it decays to 0 as the kernel forgets the starting point.
    pub fn kl_uniform_conditional_vs_marginal(
        &self,
        x0: &Sequence,
        sigma_bar: f64,
    ) -> Result<f64> {
        if sigma_bar < 0.0 {
            return Err(Error::Domain(format!("negative noise load {sigma_bar}")));
        }
        self.check_shape(x0.len(), x0.alphabet_size())?;
        let n = x0.alphabet_size();
        let l = x0.len();
        let states = u128::from(n).checked_pow(l as u32).unwrap_or(u128::MAX);
        if states > UNIFORM_KL_STATE_CAP {
            return Err(Error::CapExceeded {
                what: "uniform-kernel state enumeration",
                needed: states,
                cap: UNIFORM_KL_STATE_CAP,
            });
        }
        let q = crate::kernel::TokenRateMatrix::Uniform { n };
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|a| crate::kernel::transition_at_sigma_bar(&q, sigma_bar, a))
            .collect();
        let mut kl = KahanSum::new();
        let mut tokens = vec![0u16; l];
        loop {
            let cond: f64 = tokens
                .iter()
                .enumerate()
                .map(|(i, &v)| rows[usize::from(x0.token(i))][usize::from(v)])
                .product();
            if cond > 0.0 {
                let x = Sequence::new(tokens.clone(), n)?;
                let marginal = self.diffused_marginal_uniform(&x, sigma_bar)?;
                if marginal == 0.0 {
                    return Ok(f64::INFINITY);
                }
                kl.add(cond * (cond.ln() - marginal.ln()));
            }
            let mut pos = l;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                tokens[pos] += 1;
                if tokens[pos] < n {
                    break;
                }
                tokens[pos] = 0;
            }
            if tokens.iter().all(|&t| t == 0) {
                break;
            }
        }
        Ok(kl.value())
    }

    /// Brute-force Markov conditional by enumerating completions of the
    /// other masked positions; exists purely to cross-check the
    /// forward–backward sweep at tiny sizes.
    pub fn conditional_by_enumeration(&self, x: &MaskedSequence, i: usize) -> Result<Vec<f64>> {
        let Self::MarkovWindow { model, .. } = self else {
            return self.conditional(x, i);
        };
        if !x.is_masked(i) {
            return Err(Error::InvalidArgument(format!(
                "position {i} is not masked"
            )));
        }
        let others: Vec<usize> = x.masked_indices().into_iter().filter(|&j| j != i).collect();
        let n = usize::from(model.alphabet_size());
        let completions = (n as u128)
            .checked_pow(others.len() as u32 + 1)
            .unwrap_or(u128::MAX);
        if completions > COMPLETION_ENUMERATION_CAP {
            return Err(Error::CapExceeded {
                what: "completion enumeration",
                needed: completions,
                cap: COMPLETION_ENUMERATION_CAP,
            });
        }
        let mut weights = vec![LogSumExp::new(); n];
        let mut tokens: Vec<u16> = x
            .tokens()
            .iter()
            .map(|&t| if t == crate::types::mask_token(x.alphabet_size()) { 0 } else { t })
            .collect();
        let slots: Vec<usize> = others.iter().copied().chain(std::iter::once(i)).collect();
        let mut counters = vec![0usize; slots.len()];
        loop {
            for (slot, &c) in slots.iter().zip(&counters) {
                tokens[*slot] = c as u16;
            }
            let full = Sequence::new(tokens.clone(), x.alphabet_size())?;
            if let LogProb::Finite(lp) = self.log_prob(&full)? {
                weights[usize::from(full.token(i))].add(lp);
            }
            let mut pos = counters.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                counters[pos] += 1;
                if counters[pos] < n {
                    break;
                }
                counters[pos] = 0;
            }
            if counters.iter().all(|&c| c == 0) {
                break;
            }
        }
        normalize_log_weights(&weights, i)
    }
}

/// Normalizes per-token log-weight accumulators into a probability vector.
fn normalize_log_weights(weights: &[LogSumExp], position: usize) -> Result<Vec<f64>> {
    let logs: Vec<f64> = weights.iter().map(|w| w.value()).collect();
    let total = crate::numerics::log_sum_exp(&logs);
    if total == f64::NEG_INFINITY {
        return Err(Error::ZeroConditioningEvent { position });
    }
    Ok(logs.iter().map(|&l| (l - total).exp()).collect())
}

/// Forward–backward sweep over packed k-gram states for one observation
/// pattern.
///
/// `alpha[j][c]`: probability of emitting positions `0..=j+k−1` consistent
/// with the observations, ending in packed context `c`. `beta[j][c]`:
/// probability of emitting the remaining positions given context `c`.
/// Per-position conditionals normalize the product, so the occasional
/// rescaling applied against underflow cancels and needs no bookkeeping
/// there; only the marginal tracks the accumulated log-scale.
struct MarkovSweep {
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
}

const RESCALE_FLOOR: f64 = 1e-280;

impl MarkovSweep {
    fn run(model: &MarkovChainModel, obs: &[Option<u16>]) -> Self {
        let l = obs.len();
        let k = model.order();
        let n = usize::from(model.alphabet_size());
        let contexts = model.context_count();
        if l < k {
            // Degenerate short window: conditionals read the initial
            // distribution directly, no sweep needed.
            return Self {
                alpha: Vec::new(),
                beta: Vec::new(),
            };
        }
        let steps = l - k + 1;
        let mut alpha = Vec::with_capacity(steps);
        let mut head = vec![0.0f64; contexts];
        for (ctx, &p) in model.initial().iter().enumerate() {
            if context_consistent(model, ctx, obs) {
                head[ctx] = p;
            }
        }
        alpha.push(head);
        for j in k..l {
            let prev = alpha.last().expect("non-empty");
            let mut next = vec![0.0f64; contexts];
            for (ctx, &a) in prev.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &model.transitions()[ctx];
                match obs[j] {
                    Some(b) => next[model.shift(ctx, b)] += a * row[usize::from(b)],
                    None => {
                        for (b, &t) in row.iter().enumerate().take(n) {
                            next[model.shift(ctx, b as u16)] += a * t;
                        }
                    }
                }
            }
            rescale(&mut next);
            alpha.push(next);
        }

        let mut beta = vec![vec![1.0f64; contexts]];
        for j in (k..l).rev() {
            let succ = beta.last().expect("non-empty");
            let mut prev = vec![0.0f64; contexts];
            for (ctx, slot) in prev.iter_mut().enumerate() {
                let row = &model.transitions()[ctx];
                let mut acc = 0.0;
                match obs[j] {
                    Some(b) => acc += row[usize::from(b)] * succ[model.shift(ctx, b)],
                    None => {
                        for (b, &t) in row.iter().enumerate().take(n) {
                            acc += t * succ[model.shift(ctx, b as u16)];
                        }
                    }
                }
                *slot = acc;
            }
            rescale(&mut prev);
            beta.push(prev);
        }
        beta.reverse(); // beta[j] now pairs with alpha[j]
        Self { alpha, beta }
    }

    /// Conditional over tokens at masked position `i`.
    fn conditional(
        &self,
        model: &MarkovChainModel,
        obs: &[Option<u16>],
        i: usize,
    ) -> Result<Vec<f64>> {
        let l = obs.len();
        let k = model.order();
        let n = usize::from(model.alphabet_size());
        let mut weights = vec![0.0f64; n];
        if l < k {
            for (ctx, &p) in model.initial().iter().enumerate() {
                if p > 0.0 && context_consistent_prefix(model, ctx, obs) {
                    weights[usize::from(model.context_token(ctx, i))] += p;
                }
            }
        } else if i < k {
            // Within the initial k-gram: combine the consistency-restricted
            // initial mass with the downstream continuation.
            let head = &self.alpha[0];
            let tail = &self.beta[0];
            for ctx in 0..model.context_count() {
                let w = head[ctx] * tail[ctx];
                if w > 0.0 {
                    weights[usize::from(model.context_token(ctx, i))] += w;
                }
            }
        } else {
            let before = &self.alpha[i - k]; // contexts after position i−1
            let after = &self.beta[i - k + 1]; // continuations from position i+1
            for (ctx, &a) in before.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &model.transitions()[ctx];
                for b in 0..n {
                    let w = a * row[b] * after[model.shift(ctx, b as u16)];
                    weights[b] += w;
                }
            }
        }
        let total = kahan_total(&weights);
        if total <= 0.0 {
            return Err(Error::ZeroConditioningEvent { position: i });
        }
        Ok(weights.iter().map(|&w| w / total).collect())
    }
}

fn rescale(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 && max < RESCALE_FLOOR {
        // Pure underflow protection; callers renormalize, so the factor
        // never needs to be undone for conditionals.
        values.iter_mut().for_each(|v| *v /= max);
    }
}

/// Does packed context `ctx` agree with the observed (unmasked) tokens
/// among the first k positions?
fn context_consistent(model: &MarkovChainModel, ctx: usize, obs: &[Option<u16>]) -> bool {
    (0..model.order()).all(|j| match obs[j] {
        Some(b) => model.context_token(ctx, j) == b,
        None => true,
    })
}

/// Same check for windows shorter than the order.
fn context_consistent_prefix(model: &MarkovChainModel, ctx: usize, obs: &[Option<u16>]) -> bool {
    obs.iter().enumerate().all(|(j, o)| match o {
        Some(b) => model.context_token(ctx, j) == *b,
        None => true,
    })
}

/// `ln P(observations)` for a Markov window via the forward recursion.
fn markov_log_marginal(model: &MarkovChainModel, obs: &[Option<u16>]) -> f64 {
    let l = obs.len();
    let k = model.order();
    let n = usize::from(model.alphabet_size());
    if l < k {
        let mut acc = KahanSum::new();
        for (ctx, &p) in model.initial().iter().enumerate() {
            if context_consistent_prefix(model, ctx, obs) {
                acc.add(p);
            }
        }
        let total = acc.value();
        return if total > 0.0 {
            total.ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    let contexts = model.context_count();
    let mut alpha = vec![0.0f64; contexts];
    for (ctx, &p) in model.initial().iter().enumerate() {
        if context_consistent(model, ctx, obs) {
            alpha[ctx] = p;
        }
    }
    let mut log_scale = 0.0f64;
    for j in k..l {
        let mut next = vec![0.0f64; contexts];
        for (ctx, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &model.transitions()[ctx];
            match obs[j] {
                Some(b) => next[model.shift(ctx, b)] += a * row[usize::from(b)],
                None => {
                    for (b, &t) in row.iter().enumerate().take(n) {
                        next[model.shift(ctx, b as u16)] += a * t;
                    }
                }
            }
        }
        let max = next.iter().copied().fold(0.0f64, f64::max);
        if max == 0.0 {
            return f64::NEG_INFINITY;
        }
        if max < RESCALE_FLOOR {
            next.iter_mut().for_each(|v| *v /= max);
            log_scale += max.ln();
        }
        alpha = next;
    }
    let total = kahan_total(&alpha);
    if total > 0.0 {
        total.ln() + log_scale
    } else {
        f64::NEG_INFINITY
    }
}
