//! Conditional predictors: the `c(x)_{i,v}` abstraction, an oracle-backed
//! implementation, and two small trainable heads with hand-derived
//! gradients.
//!
//! A predictor maps a partially masked sequence to a probability vector
//! over tokens at every masked position. By construction the prediction at
//! position `i` never depends on a "current value" there: masked slots
//! carry only the mask sentinel, which selects a dedicated mask embedding
//! (learned heads) or is excluded from the conditioning event (oracle).
//!
//! Two learned heads share the same plumbing (flat parameter vector,
//! closed-form backward pass, checkpoint format):
//!
//! * [`HeadKind::Mlp`] — per-position token embeddings, mean-pooled
//!   context, and a two-layer ReLU head with per-position readout weights.
//! * [`HeadKind::Mixture`] — a bank of product distributions (per-position
//!   token tables) combined by a softmax gate over summed evidence from
//!   the unmasked positions. The table bank doubles as the embedding
//!   matrix; the gate-then-readout pair is the two-layer head. This head
//!   can represent sharply non-factorized conditionals that the pooled
//!   MLP smooths over, which matters for bias-critical evaluations on
//!   small explicit distributions.
//!
//! Gradients are written out by hand and verified against central finite
//! differences in the tests.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;
use crate::oracle::OracleDistribution;
use crate::rng::standard_normal;
use crate::types::{MaskedSequence, Sequence};

/// Distribution over tokens at each masked position of the input.
pub trait ConditionalPredictor: Send + Sync {
    /// `(position, probability vector)` for every masked position,
    /// positions ascending. Each vector is normalized within 1e−9.
    fn predict(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>>;

    /// Log-domain variant; learned heads override this with their native
    /// log-softmax output for stability.
    fn log_predict(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>> {
        Ok(self
            .predict(x)?
            .into_iter()
            .map(|(i, row)| (i, row.iter().map(|&p| p.ln()).collect()))
            .collect())
    }
}

/// The data-induced predictor: delegates to the oracle's exact
/// conditionals, so it is the pointwise minimizer of the masked
/// cross-entropy loss.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    dist: OracleDistribution,
}

impl OraclePredictor {
    pub fn new(dist: OracleDistribution) -> Self {
        Self { dist }
    }

    pub fn distribution(&self) -> &OracleDistribution {
        &self.dist
    }
}

impl ConditionalPredictor for OraclePredictor {
    fn predict(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>> {
        self.dist.masked_conditionals(x)
    }
}

/// Which trainable head a [`LearnedPredictor`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Mixture,
    Mlp,
}

impl HeadKind {
    fn tag(self) -> &'static str {
        match self {
            HeadKind::Mixture => "mixture",
            HeadKind::Mlp => "mlp",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "mixture" => Ok(HeadKind::Mixture),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(Error::Format(format!("unknown head kind {other:?}"))),
        }
    }
}

/// One training example: the clean sequence, a masked corruption of it,
/// and an importance weight.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub clean: Sequence,
    pub masked: MaskedSequence,
    pub weight: f64,
}

const CHECKPOINT_HEADER: &str = "maskdiff-predictor v1";

/// A trainable conditional predictor with a flat `f64` parameter vector.
#[derive(Debug, Clone)]
pub struct LearnedPredictor {
    n: u16,
    len: usize,
    seed: u64,
    kind: HeadKind,
    /// Mixture: component count H. Mlp: embedding dimension.
    dim: usize,
    /// Mlp hidden width; 0 for the mixture head.
    hidden: usize,
    params: Vec<f64>,
}

impl LearnedPredictor {
    /// Mixture head with `components` product-distribution components.
    ///
    /// Tables start as small Gaussian noise (σ = 0.05) and the gate prior
    /// is flat; see [`init_mixture_from_data`](Self::init_mixture_from_data)
    /// for the data-driven warm start.
    pub fn new_mixture(n: u16, len: usize, components: usize, seed: u64) -> Result<Self> {
        if components == 0 || len == 0 || n < 2 {
            return Err(Error::InvalidArgument(format!(
                "mixture shape ({components} components, L={len}, N={n}) invalid"
            )));
        }
        let table_len = components * len * usize::from(n);
        let mut rng = crate::rng::substream(seed, 0);
        let mut params = Vec::with_capacity(table_len + components);
        for _ in 0..table_len {
            params.push(0.05 * standard_normal(&mut rng));
        }
        params.extend(std::iter::repeat_n(0.0, components));
        Ok(Self {
            n,
            len,
            seed,
            kind: HeadKind::Mixture,
            dim: components,
            hidden: 0,
            params,
        })
    }

    /// Two-layer MLP head over a mean-pooled bag of per-position token
    /// embeddings (mask sentinel has its own embedding row).
    pub fn new_mlp(n: u16, len: usize, embed_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 || len == 0 || n < 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp shape (d={embed_dim}, hidden={hidden}, L={len}, N={n}) invalid"
            )));
        }
        let nn = usize::from(n);
        let emb = len * (nn + 1) * embed_dim;
        let w1 = hidden * embed_dim;
        let readout = len * nn * hidden;
        let rbias = len * nn;
        let mut rng = crate::rng::substream(seed, 0);
        let mut params = vec![0.0f64; emb + w1 + hidden + readout + rbias];
        for p in params[..emb].iter_mut() {
            *p = 0.02 * standard_normal(&mut rng);
        }
        let w1_scale = (2.0 / embed_dim as f64).sqrt();
        for p in params[emb..emb + w1].iter_mut() {
            *p = w1_scale * standard_normal(&mut rng);
        }
        let r_scale = (1.0 / hidden as f64).sqrt();
        for p in params[emb + w1 + hidden..emb + w1 + hidden + readout].iter_mut() {
            *p = r_scale * standard_normal(&mut rng);
        }
        Ok(Self {
            n,
            len,
            seed,
            kind: HeadKind::Mlp,
            dim: embed_dim,
            hidden,
            params,
        })
    }

    pub fn alphabet_size(&self) -> u16 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    /// Component count (mixture) or embedding dimension (MLP).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Warm-starts the mixture head from data: the first `H` distinct
    /// sequences become sharpened component modes, and the gate prior is
    /// set to their empirical log-frequencies.
    ///
    /// Components left unfilled (fewer distinct sequences than components)
    /// keep their noise tables and get prior `ln(1/stream_len)`, so they
    /// start negligible but reachable.
    pub fn init_mixture_from_data(&mut self, data: &[Sequence], sharpening: f64) -> Result<()> {
        if self.kind != HeadKind::Mixture {
            return Err(Error::InvalidArgument(
                "data warm start only applies to the mixture head".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty warm-start stream".into()));
        }
        let h = self.dim;
        let total = data.len() as f64;
        // First-appearance order; counts over the whole stream.
        let mut order: Vec<&Sequence> = Vec::new();
        let mut counts: std::collections::HashMap<&[u16], (usize, u64)> =
            std::collections::HashMap::new();
        for x in data {
            if x.len() != self.len || x.alphabet_size() != self.n {
                return Err(Error::InvalidArgument(
                    "warm-start sequence shape mismatch".into(),
                ));
            }
            let entry = counts.entry(x.tokens()).or_insert_with(|| {
                order.push(x);
                (order.len() - 1, 0)
            });
            entry.1 += 1;
        }
        let floor_prior = (1.0 / total).ln();
        for slot in 0..h {
            let prior = match order.get(slot) {
                Some(x) => {
                    let (_, count) = counts[x.tokens()];
                    for (i, &v) in x.tokens().iter().enumerate() {
                        let idx = self.mix_table_idx(slot, i, v);
                        self.params[idx] += sharpening;
                    }
                    (count as f64 / total).ln()
                }
                None => floor_prior,
            };
            let idx = self.mix_prior_idx(slot);
            self.params[idx] = prior;
        }
        Ok(())
    }

    // Flat-layout offsets.
    fn mix_table_idx(&self, h: usize, i: usize, v: u16) -> usize {
        (h * self.len + i) * usize::from(self.n) + usize::from(v)
    }

    fn mix_prior_idx(&self, h: usize) -> usize {
        self.dim * self.len * usize::from(self.n) + h
    }

    fn mlp_offsets(&self) -> MlpOffsets {
        let nn = usize::from(self.n);
        let emb = self.len * (nn + 1) * self.dim;
        let w1 = emb + self.hidden * self.dim;
        let b1 = w1 + self.hidden;
        let readout = b1 + self.len * nn * self.hidden;
        MlpOffsets {
            w1: emb,
            b1: w1,
            readout: b1,
            rbias: readout,
        }
    }

    fn check_input(&self, x: &MaskedSequence) -> Result<()> {
        if x.len() != self.len || x.alphabet_size() != self.n {
            return Err(Error::InvalidArgument(format!(
                "input shape ({}, {}) does not match predictor ({}, {})",
                x.len(),
                x.alphabet_size(),
                self.len,
                self.n
            )));
        }
        Ok(())
    }

    /// Log-probability vectors at the masked positions.
    pub fn log_conditionals(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>> {
        self.check_input(x)?;
        match self.kind {
            HeadKind::Mixture => {
                let ctx = MixtureContext::new(self);
                Ok(ctx.forward(self, x))
            }
            HeadKind::Mlp => Ok(self.mlp_forward(x).1),
        }
    }

    /// Average weighted masked cross-entropy over a batch, with the
    /// gradient as a flat vector aligned with [`params`](Self::params).
    ///
    /// Loss = (1/B)·Σ_b weight_b · Σ_{masked i} −log c(x_b)_{i, clean_bⁱ}.
    pub fn loss_and_grad(&self, batch: &[TrainingItem]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for item in batch {
            self.check_input(&item.masked)?;
            if !item.masked.consistent_with(&item.clean) {
                return Err(Error::InvalidArgument(
                    "masked input disagrees with its clean sequence".into(),
                ));
            }
        }
        match self.kind {
            HeadKind::Mixture => self.mixture_loss_and_grad(batch),
            HeadKind::Mlp => self.mlp_loss_and_grad(batch),
        }
    }

    fn mixture_loss_and_grad(&self, batch: &[TrainingItem]) -> Result<(f64, Vec<f64>)> {
        let h = self.dim;
        let nn = usize::from(self.n);
        let ctx = MixtureContext::new(self);
        let mut d_log_s = vec![0.0f64; h * self.len * nn];
        let mut grad = vec![0.0f64; self.params.len()];
        let mut loss = 0.0f64;

        let mut evidence = vec![0.0f64; h];
        let mut z = vec![0.0f64; h];
        let mut d_log_q = vec![0.0f64; h];
        for item in batch {
            let w = item.weight;
            let x = &item.masked;
            // Gate: prior + summed evidence over unmasked positions.
            for hh in 0..h {
                let mut ev = self.params[self.mix_prior_idx(hh)];
                for i in 0..self.len {
                    if !x.is_masked(i) {
                        ev += ctx.log_s[self.mix_table_idx(hh, i, x.token(i))];
                    }
                }
                evidence[hh] = ev;
            }
            let log_norm = log_sum_exp(&evidence);
            d_log_q.iter_mut().for_each(|v| *v = 0.0);
            for &i in &x.masked_indices() {
                let y = item.clean.token(i);
                for hh in 0..h {
                    z[hh] = (evidence[hh] - log_norm) + ctx.log_s[self.mix_table_idx(hh, i, y)];
                }
                let log_c = log_sum_exp(&z);
                loss -= w * log_c;
                // Responsibility of each component for the correct token.
                for hh in 0..h {
                    let resp = (z[hh] - log_c).exp();
                    d_log_s[self.mix_table_idx(hh, i, y)] -= w * resp;
                    d_log_q[hh] -= w * resp;
                }
            }
            // Softmax-gate backward: dg = dlogq − q·Σ dlogq.
            let total_dq: f64 = d_log_q.iter().sum();
            for hh in 0..h {
                let q = (evidence[hh] - log_norm).exp();
                let dg = d_log_q[hh] - q * total_dq;
                if dg == 0.0 {
                    continue;
                }
                grad[self.mix_prior_idx(hh)] += dg;
                for i in 0..self.len {
                    if !x.is_masked(i) {
                        d_log_s[self.mix_table_idx(hh, i, x.token(i))] += dg;
                    }
                }
            }
        }

        // Shared log-softmax backward: dT = dlogS − S·Σ_v dlogS.
        for hh in 0..h {
            for i in 0..self.len {
                let base = self.mix_table_idx(hh, i, 0);
                let row_total: f64 = d_log_s[base..base + nn].iter().sum();
                for v in 0..nn {
                    let s = ctx.log_s[base + v].exp();
                    grad[base + v] += d_log_s[base + v] - s * row_total;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    fn mlp_forward(&self, x: &MaskedSequence) -> (MlpTrace, Vec<(usize, Vec<f64>)>) {
        let off = self.mlp_offsets();
        let d = self.dim;
        let nn = usize::from(self.n);
        let mut pooled = vec![0.0f64; d];
        for i in 0..self.len {
            let tok = usize::from(x.token(i).min(self.n)); // mask sentinel → row N
            let base = (i * (nn + 1) + tok) * d;
            for (p, e) in pooled.iter_mut().zip(&self.params[base..base + d]) {
                *p += e;
            }
        }
        let inv_len = 1.0 / self.len as f64;
        pooled.iter_mut().for_each(|p| *p *= inv_len);

        let mut pre = vec![0.0f64; self.hidden];
        for (j, slot) in pre.iter_mut().enumerate() {
            let row = &self.params[off.w1 + j * d..off.w1 + (j + 1) * d];
            *slot = self.params[off.b1 + j]
                + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        }
        let hid: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();

        let mut out = Vec::new();
        for i in x.masked_indices() {
            let mut logits = vec![0.0f64; nn];
            for (v, logit) in logits.iter_mut().enumerate() {
                let base = off.readout + (i * nn + v) * self.hidden;
                *logit = self.params[off.rbias + i * nn + v]
                    + self.params[base..base + self.hidden]
                        .iter()
                        .zip(&hid)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
            }
            let norm = log_sum_exp(&logits);
            out.push((i, logits.iter().map(|&l| l - norm).collect()));
        }
        (MlpTrace { pooled, pre, hid }, out)
    }

    fn mlp_loss_and_grad(&self, batch: &[TrainingItem]) -> Result<(f64, Vec<f64>)> {
        let off = self.mlp_offsets();
        let d = self.dim;
        let nn = usize::from(self.n);
        let mut grad = vec![0.0f64; self.params.len()];
        let mut loss = 0.0f64;
        for item in batch {
            let w = item.weight;
            let x = &item.masked;
            let (trace, log_c) = self.mlp_forward(x);
            let mut d_hid = vec![0.0f64; self.hidden];
            for (i, row) in &log_c {
                let y = usize::from(item.clean.token(*i));
                loss -= w * row[y];
                for v in 0..nn {
                    let d_logit = w * (row[v].exp() - f64::from(u8::from(v == y)));
                    if d_logit == 0.0 {
                        continue;
                    }
                    grad[off.rbias + i * nn + v] += d_logit;
                    let base = off.readout + (i * nn + v) * self.hidden;
                    for k in 0..self.hidden {
                        grad[base + k] += d_logit * trace.hid[k];
                        d_hid[k] += d_logit * self.params[base + k];
                    }
                }
            }
            let mut d_pooled = vec![0.0f64; d];
            for j in 0..self.hidden {
                if trace.pre[j] <= 0.0 || d_hid[j] == 0.0 {
                    continue;
                }
                let dj = d_hid[j];
                grad[off.b1 + j] += dj;
                let base = off.w1 + j * d;
                for k in 0..d {
                    grad[base + k] += dj * trace.pooled[k];
                    d_pooled[k] += dj * self.params[base + k];
                }
            }
            let inv_len = 1.0 / self.len as f64;
            for i in 0..self.len {
                let tok = usize::from(x.token(i).min(self.n));
                let base = (i * (nn + 1) + tok) * d;
                for k in 0..d {
                    grad[base + k] += d_pooled[k] * inv_len;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// Writes the checkpoint: one ASCII header line
    /// `maskdiff-predictor v1 <kind> N L dim hidden seed`, then the flat
    /// parameter vector as little-endian 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(
            file,
            "{CHECKPOINT_HEADER} {} {} {} {} {} {}",
            self.kind.tag(),
            self.n,
            self.len,
            self.dim,
            self.hidden,
            self.seed
        )?;
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for &p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a [`save`](Self::save)d checkpoint, validating the header and
    /// the parameter block length.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 8 || fields[0] != "maskdiff-predictor" || fields[1] != "v1" {
            return Err(Error::Format(format!("unexpected header {header:?}")));
        }
        let kind = HeadKind::from_tag(fields[2])?;
        let n: u16 = parse_header_field(fields[3], "alphabet size")?;
        let len: usize = parse_header_field(fields[4], "length")?;
        let dim: usize = parse_header_field(fields[5], "dimension")?;
        let hidden: usize = parse_header_field(fields[6], "hidden width")?;
        let seed: u64 = parse_header_field(fields[7], "seed")?;
        let template = match kind {
            HeadKind::Mixture => {
                if hidden != 0 {
                    return Err(Error::Format(
                        "mixture checkpoint with nonzero hidden width".into(),
                    ));
                }
                Self::new_mixture(n, len, dim, seed)?
            }
            HeadKind::Mlp => Self::new_mlp(n, len, dim, hidden.max(1), seed)?,
        };
        if hidden != template.hidden && kind == HeadKind::Mlp {
            return Err(Error::Format("zero hidden width in mlp checkpoint".into()));
        }
        let body = &bytes[newline + 1..];
        if body.len() != template.params.len() * 8 {
            return Err(Error::Format(format!(
                "parameter block is {} bytes, expected {}",
                body.len(),
                template.params.len() * 8
            )));
        }
        let mut params = Vec::with_capacity(template.params.len());
        for chunk in body.chunks_exact(8) {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(chunk);
            params.push(f64::from_le_bytes(raw));
        }
        Ok(Self {
            params,
            ..template
        })
    }
}

fn parse_header_field<T: std::str::FromStr>(field: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .parse()
        .map_err(|e| Error::Format(format!("bad {what} in checkpoint header: {e}")))
}

struct MlpOffsets {
    w1: usize,
    b1: usize,
    readout: usize,
    rbias: usize,
}

struct MlpTrace {
    pooled: Vec<f64>,
    pre: Vec<f64>,
    hid: Vec<f64>,
}

/// Per-step cache for the mixture head: the log-softmaxed tables, shared
/// by every sequence evaluated under the same parameters.
struct MixtureContext {
    log_s: Vec<f64>,
}

impl MixtureContext {
    fn new(p: &LearnedPredictor) -> Self {
        let nn = usize::from(p.n);
        let mut log_s = vec![0.0f64; p.dim * p.len * nn];
        for h in 0..p.dim {
            for i in 0..p.len {
                let base = p.mix_table_idx(h, i, 0);
                let row = &p.params[base..base + nn];
                let norm = log_sum_exp(row);
                for v in 0..nn {
                    log_s[base + v] = row[v] - norm;
                }
            }
        }
        Self { log_s }
    }

    fn forward(&self, p: &LearnedPredictor, x: &MaskedSequence) -> Vec<(usize, Vec<f64>)> {
        let h = p.dim;
        let nn = usize::from(p.n);
        let mut gate = vec![0.0f64; h];
        for (hh, slot) in gate.iter_mut().enumerate() {
            let mut ev = p.params[p.mix_prior_idx(hh)];
            for i in 0..p.len {
                if !x.is_masked(i) {
                    ev += self.log_s[p.mix_table_idx(hh, i, x.token(i))];
                }
            }
            *slot = ev;
        }
        let norm = log_sum_exp(&gate);
        gate.iter_mut().for_each(|g| *g -= norm);

        let mut out = Vec::new();
        let mut z = vec![0.0f64; h];
        for i in x.masked_indices() {
            let mut row = Vec::with_capacity(nn);
            for v in 0..nn {
                for hh in 0..h {
                    z[hh] = gate[hh] + self.log_s[p.mix_table_idx(hh, i, v as u16)];
                }
                row.push(log_sum_exp(&z));
            }
            out.push((i, row));
        }
        out
    }
}

impl ConditionalPredictor for LearnedPredictor {
    fn predict(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>> {
        Ok(self
            .log_predict(x)?
            .into_iter()
            .map(|(i, row)| (i, row.iter().map(|&l| l.exp()).collect()))
            .collect())
    }

    fn log_predict(&self, x: &MaskedSequence) -> Result<Vec<(usize, Vec<f64>)>> {
        self.log_conditionals(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::ExplicitCategorical;
    use crate::types::mask_token;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn seq(tokens: &[u16], n: u16) -> Sequence {
        Sequence::new(tokens.to_vec(), n).unwrap()
    }

    fn masked(tokens: &[u16], n: u16) -> MaskedSequence {
        MaskedSequence::new(tokens.to_vec(), n).unwrap()
    }

    fn toy_oracle() -> OracleDistribution {
        OracleDistribution::Categorical(
            ExplicitCategorical::new(vec![
                (seq(&[0, 0], 2), 0.5),
                (seq(&[0, 1], 2), 0.25),
                (seq(&[1, 1], 2), 0.25),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn oracle_predictor_delegates_bit_exactly() {
        let dist = toy_oracle();
        let pred = OraclePredictor::new(dist.clone());
        let m = mask_token(2);
        for x in [masked(&[0, m], 2), masked(&[m, m], 2), masked(&[m, 1], 2)] {
            let via_pred = pred.predict(&x).unwrap();
            let via_oracle = dist.masked_conditionals(&x).unwrap();
            assert_eq!(via_pred.len(), via_oracle.len());
            for ((ia, ra), (ib, rb)) in via_pred.iter().zip(&via_oracle) {
                assert_eq!(ia, ib);
                assert_eq!(ra, rb); // no arithmetic in between
            }
        }
    }

    #[test]
    fn learned_outputs_are_normalized_and_cover_masked_positions() {
        let m = mask_token(4);
        let x = masked(&[m, 2, m, 0, m], 4);
        let heads = [
            LearnedPredictor::new_mixture(4, 5, 7, 3).unwrap(),
            LearnedPredictor::new_mlp(4, 5, 6, 9, 3).unwrap(),
        ];
        for head in &heads {
            let out = head.predict(&x).unwrap();
            let positions: Vec<usize> = out.iter().map(|(i, _)| *i).collect();
            assert_eq!(positions, x.masked_indices());
            for (_, row) in &out {
                assert_eq!(row.len(), 4);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let head = LearnedPredictor::new_mixture(4, 5, 3, 0).unwrap();
        let m = mask_token(3);
        assert!(head.predict(&masked(&[m, 0, 1, 2, 0], 3)).is_err());
        let short = MaskedSequence::fully_masked(3, 4).unwrap();
        assert!(head.predict(&short).is_err());
    }

    fn gradient_check(head: &LearnedPredictor, batch: &[TrainingItem]) {
        let (_, analytic) = head.loss_and_grad(batch).unwrap();
        let mut probe = head.clone();
        let step = 1e-5;
        for j in 0..probe.params().len() {
            let original = probe.params()[j];
            probe.params_mut()[j] = original + step;
            let (up, _) = probe.loss_and_grad(batch).unwrap();
            probe.params_mut()[j] = original - step;
            let (down, _) = probe.loss_and_grad(batch).unwrap();
            probe.params_mut()[j] = original;
            let numeric = (up - down) / (2.0 * step);
            let scale = analytic[j].abs().max(numeric.abs());
            if scale > 1e-6 {
                let rel = (analytic[j] - numeric).abs() / scale;
                assert!(
                    rel < 1e-5,
                    "param {j}: analytic {} vs numeric {numeric} (rel {rel})",
                    analytic[j]
                );
            } else {
                assert!(
                    (analytic[j] - numeric).abs() < 1e-7,
                    "param {j}: analytic {} vs numeric {numeric}",
                    analytic[j]
                );
            }
        }
    }

    fn small_batch(n: u16, len: usize) -> Vec<TrainingItem> {
        let m = mask_token(n);
        let mut rng = crate::rng::substream(11, 2);
        (0..3)
            .map(|_| {
                let clean_tokens: Vec<u16> = (0..len).map(|_| rng.random_range(0..n)).collect();
                let clean = Sequence::new(clean_tokens.clone(), n).unwrap();
                let mut tokens = clean_tokens;
                let mut any = false;
                for t in tokens.iter_mut() {
                    if rng.random::<f64>() < 0.5 {
                        *t = m;
                        any = true;
                    }
                }
                if !any {
                    tokens[0] = m;
                }
                TrainingItem {
                    clean,
                    masked: MaskedSequence::new(tokens, n).unwrap(),
                    weight: 0.5 + rng.random::<f64>(),
                }
            })
            .collect()
    }

    #[test]
    fn mixture_gradients_match_finite_differences() {
        let head = LearnedPredictor::new_mixture(3, 3, 4, 5).unwrap();
        gradient_check(&head, &small_batch(3, 3));
    }

    #[test]
    fn mixture_gradients_after_warm_start() {
        let mut head = LearnedPredictor::new_mixture(3, 3, 4, 5).unwrap();
        let data: Vec<Sequence> = [
            [0u16, 1, 2],
            [0, 1, 2],
            [2, 1, 0],
            [1, 1, 1],
            [0, 1, 2],
        ]
        .iter()
        .map(|t| seq(t, 3))
        .collect();
        head.init_mixture_from_data(&data, 4.0).unwrap();
        gradient_check(&head, &small_batch(3, 3));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let head = LearnedPredictor::new_mlp(3, 3, 4, 5, 7).unwrap();
        gradient_check(&head, &small_batch(3, 3));
    }

    #[test]
    fn warm_start_concentrates_on_seen_sequences() {
        let mut head = LearnedPredictor::new_mixture(2, 2, 2, 1).unwrap();
        let data: Vec<Sequence> = std::iter::repeat_n(seq(&[0, 1], 2), 9)
            .chain(std::iter::once(seq(&[1, 0], 2)))
            .collect();
        head.init_mixture_from_data(&data, 9.0).unwrap();
        let m = mask_token(2);
        // Observing the first token selects the matching component.
        let out = head.predict(&masked(&[0, m], 2)).unwrap();
        assert!(out[0].1[1] > 0.95, "p = {:?}", out[0].1);
        let out = head.predict(&masked(&[1, m], 2)).unwrap();
        assert!(out[0].1[0] > 0.95, "p = {:?}", out[0].1);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for head in [
            LearnedPredictor::new_mixture(4, 6, 5, 13).unwrap(),
            LearnedPredictor::new_mlp(4, 6, 8, 10, 13).unwrap(),
        ] {
            let path = dir.path().join(format!("{}.ckpt", head.kind().tag()));
            head.save(&path).unwrap();
            let back = LearnedPredictor::load(&path).unwrap();
            assert_eq!(back.kind(), head.kind());
            assert_eq!(back.alphabet_size(), head.alphabet_size());
            assert_eq!(back.len(), head.len());
            assert_eq!(back.seed(), head.seed());
            // Parameters and therefore predictions are identical bits.
            assert_eq!(back.params(), head.params());
            let x = MaskedSequence::fully_masked(6, 4).unwrap();
            let a = head.predict(&x).unwrap();
            let b = back.predict(&x).unwrap();
            for ((_, ra), (_, rb)) in a.iter().zip(&b) {
                assert_eq!(ra, rb);
            }
            // Normalization survives the round trip well inside 1e−12.
            for (_, row) in &b {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let head = LearnedPredictor::new_mixture(3, 2, 2, 0).unwrap();
        let path = dir.path().join("good.ckpt");
        head.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            LearnedPredictor::load(&truncated),
            Err(Error::Format(_))
        ));

        let wrong = dir.path().join("wrong.ckpt");
        std::fs::write(&wrong, b"not-a-checkpoint v9 mixture 3 2 2 0 0\n").unwrap();
        assert!(matches!(LearnedPredictor::load(&wrong), Err(Error::Format(_))));
    }
}
