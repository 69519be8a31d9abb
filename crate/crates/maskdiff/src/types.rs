//! Shared domain vocabulary: alphabets, sequences, masked sequences, and
//! index sets.
//!
//! All positions are 0-based internally; textual interfaces (sequence files,
//! reports) convert to 1-based at the boundary. The mask is encoded as the
//! sentinel index `N` (one past the alphabet), never as an alphabet member,
//! so predictor outputs stay exactly `N`-dimensional per position.

use crate::error::{Error, Result};
use std::fmt;

/// Sentinel-returning helper: the mask index for an alphabet of size `n`.
#[inline]
pub fn mask_token(n: u16) -> u16 {
    n
}

/// An ordered finite alphabet of distinct single-character symbols.
///
/// Token indices are stable: symbol `i` always maps to index `i`. The mask
/// symbol is not part of the alphabet; it is rendered as `?` in debug dumps
/// only and never appears in sequence files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    /// Builds an alphabet from its symbol string, e.g. `"ATGC"`.
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "alphabet needs at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        for (i, a) in symbols.iter().enumerate() {
            if *a == '?' {
                return Err(Error::InvalidArgument(
                    "'?' is reserved for mask rendering".into(),
                ));
            }
            if symbols[..i].contains(a) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate symbol {a:?} in alphabet"
                )));
            }
        }
        Ok(Self { symbols })
    }

    /// The DNA alphabet `ATGC` used by the toy datasets.
    pub fn dna() -> Self {
        Self::new("ATGC").expect("static alphabet")
    }

    /// Number of symbols `N`.
    pub fn len(&self) -> u16 {
        self.symbols.len() as u16
    }

    /// Always false by construction (`N >= 2`).
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Symbol at token index `i`.
    pub fn symbol(&self, i: u16) -> Option<char> {
        self.symbols.get(usize::from(i)).copied()
    }

    /// Token index of `symbol`, if present.
    pub fn index_of(&self, symbol: char) -> Option<u16> {
        self.symbols.iter().position(|&s| s == symbol).map(|i| i as u16)
    }

    /// Parses one line of the plain-text sequence format.
    pub fn parse_sequence(&self, line: &str) -> Result<Sequence> {
        let mut tokens = Vec::with_capacity(line.len());
        for ch in line.chars() {
            let tok = self.index_of(ch).ok_or_else(|| {
                Error::InvalidArgument(format!("symbol {ch:?} not in alphabet"))
            })?;
            tokens.push(tok);
        }
        Sequence::new(tokens, self.len())
    }

    /// Renders a clean sequence in the plain-text format.
    pub fn render_sequence(&self, x: &Sequence) -> String {
        x.tokens()
            .iter()
            .map(|&t| self.symbol(t).expect("token within alphabet"))
            .collect()
    }

    /// Renders a masked sequence for debug output; masks become `?`.
    pub fn render_masked(&self, x: &MaskedSequence) -> String {
        x.tokens()
            .iter()
            .map(|&t| self.symbol(t).unwrap_or('?'))
            .collect()
    }
}

/// A clean (mask-free) token sequence over an alphabet of size `n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    tokens: Vec<u16>,
    n: u16,
}

impl Sequence {
    /// Validates `1 <= L` and every token `< n`.
    pub fn new(tokens: Vec<u16>, n: u16) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "alphabet size must be at least 2, got {n}"
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} out of range for alphabet size {n}"
            )));
        }
        Ok(Self { tokens, n })
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Alphabet size `N`.
    pub fn alphabet_size(&self) -> u16 {
        self.n
    }

    /// Token at position `i` (0-based).
    pub fn token(&self, i: usize) -> u16 {
        self.tokens[i]
    }
}

/// A sequence in which some positions carry the mask sentinel `N`.
///
/// The set of unmasked indices is always derived from the tokens, never
/// stored, so it cannot go stale.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedSequence {
    tokens: Vec<u16>,
    n: u16,
}

impl MaskedSequence {
    /// Validates every token `<= n` (with `n` itself meaning MASK).
    pub fn new(tokens: Vec<u16>, n: u16) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > n) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} out of range for alphabet size {n} plus mask"
            )));
        }
        Ok(Self { tokens, n })
    }

    /// The fully masked sequence of length `l`.
    pub fn fully_masked(l: usize, n: u16) -> Result<Self> {
        Self::new(vec![mask_token(n); l], n)
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alphabet_size(&self) -> u16 {
        self.n
    }

    pub fn token(&self, i: usize) -> u16 {
        self.tokens[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == mask_token(self.n)
    }

    /// Positions currently masked, in increasing order.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    /// Number of masked positions.
    pub fn masked_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|&&t| t == mask_token(self.n))
            .count()
    }

    /// The derived unmasked index set `UM`.
    pub fn unmasked_indices(&self) -> IndexSet {
        IndexSet::from_sorted(
            (0..self.len()).filter(|&i| !self.is_masked(i)).collect(),
            self.len(),
        )
        .expect("derived set is sorted and in bounds")
    }

    /// Checks that every unmasked token agrees with the clean sequence.
    pub fn consistent_with(&self, x0: &Sequence) -> bool {
        self.len() == x0.len()
            && (0..self.len()).all(|i| self.is_masked(i) || self.token(i) == x0.token(i))
    }

    /// Returns a copy with position `i` set to clean token `v`.
    pub fn with_token(&self, i: usize, v: u16) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        if v >= self.n {
            return Err(Error::InvalidArgument(format!(
                "token {v} out of range for alphabet size {}",
                self.n
            )));
        }
        let mut tokens = self.tokens.clone();
        tokens[i] = v;
        Self::new(tokens, self.n)
    }

    /// Reinterprets as a clean sequence; fails if any mask remains.
    pub fn into_sequence(self) -> Result<Sequence> {
        if self.masked_count() > 0 {
            return Err(Error::InvalidArgument(
                "sequence still contains masked positions".into(),
            ));
        }
        Sequence::new(self.tokens, self.n)
    }
}

impl fmt::Display for MaskedSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &t in &self.tokens {
            if t == mask_token(self.n) {
                write!(f, "?")?;
            } else {
                write!(f, "{t}")?;
            }
        }
        Ok(())
    }
}

/// A strictly increasing subset of `{0..L-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexSet {
    indices: Vec<usize>,
    len_bound: usize,
}

impl IndexSet {
    /// Builds from already-sorted, duplicate-free indices below `len_bound`.
    pub fn from_sorted(indices: Vec<usize>, len_bound: usize) -> Result<Self> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(
                    "index set must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= len_bound {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: len_bound,
                });
            }
        }
        Ok(Self { indices, len_bound })
    }

    /// Builds from arbitrary indices; sorts and rejects duplicates.
    pub fn from_unsorted(mut indices: Vec<usize>, len_bound: usize) -> Result<Self> {
        indices.sort_unstable();
        for w in indices.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidArgument(format!(
                    "duplicate index {} in index set",
                    w[0]
                )));
            }
        }
        Self::from_sorted(indices, len_bound)
    }

    /// The empty subset of `{0..len_bound-1}`.
    pub fn empty(len_bound: usize) -> Self {
        Self {
            indices: Vec::new(),
            len_bound,
        }
    }

    /// The full set `{0..len_bound-1}`.
    pub fn full(len_bound: usize) -> Self {
        Self {
            indices: (0..len_bound).collect(),
            len_bound,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Upper bound `L` the indices live under.
    pub fn len_bound(&self) -> usize {
        self.len_bound
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Complement within `{0..len_bound-1}`.
    pub fn complement(&self) -> Self {
        Self {
            indices: (0..self.len_bound).filter(|i| !self.contains(*i)).collect(),
            len_bound: self.len_bound,
        }
    }

    /// True if `self` and `other` share no index.
    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.indices.iter().all(|i| !other.contains(*i))
    }

    /// Sorted union of the two sets (bounds must agree).
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.len_bound != other.len_bound {
            return Err(Error::InvalidArgument(
                "index sets have different bounds".into(),
            ));
        }
        let mut all: Vec<usize> = self.indices.iter().chain(&other.indices).copied().collect();
        all.sort_unstable();
        all.dedup();
        Self::from_sorted(all, self.len_bound)
    }
}

/// Masks every position of `x` not listed in `keep`.
///
/// The result's unmasked set is exactly `keep`, and unmasked tokens equal
/// `x`'s tokens.
pub fn apply_mask(x: &Sequence, keep: &IndexSet) -> Result<MaskedSequence> {
    if keep.len_bound() != x.len() {
        if let Some(&bad) = keep.indices().iter().find(|&&i| i >= x.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: x.len(),
            });
        }
    }
    let n = x.alphabet_size();
    let tokens = (0..x.len())
        .map(|i| if keep.contains(i) { x.token(i) } else { mask_token(n) })
        .collect();
    MaskedSequence::new(tokens, n)
}

/// Returns the unmasked index set and the tokens at those positions.
pub fn unmasked_subsequence(x: &MaskedSequence) -> (IndexSet, Vec<u16>) {
    let um = x.unmasked_indices();
    let toks = um.indices().iter().map(|&i| x.token(i)).collect();
    (um, toks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atgc(s: &str) -> Sequence {
        Alphabet::dna().parse_sequence(s).unwrap()
    }

    #[test]
    fn apply_mask_keep_all_is_identity() {
        let x = atgc("ATGC");
        let masked = apply_mask(&x, &IndexSet::full(4)).unwrap();
        assert_eq!(masked.tokens(), x.tokens());
        assert_eq!(masked.masked_count(), 0);
    }

    #[test]
    fn apply_mask_keep_none_masks_everything() {
        let x = atgc("ATGC");
        let masked = apply_mask(&x, &IndexSet::empty(4)).unwrap();
        assert_eq!(masked.masked_count(), 4);
        assert_eq!(Alphabet::dna().render_masked(&masked), "????");
    }

    #[test]
    fn apply_mask_partial_keeps_selected() {
        // keep positions {2, 4} in 1-based notation = {1, 3} internally.
        let x = atgc("ATGC");
        let keep = IndexSet::from_sorted(vec![1, 3], 4).unwrap();
        let masked = apply_mask(&x, &keep).unwrap();
        assert_eq!(Alphabet::dna().render_masked(&masked), "?T?C");
        assert_eq!(masked.unmasked_indices(), keep);
    }

    #[test]
    fn unmasked_subsequence_reports_positions_and_tokens() {
        let x = atgc("ATGC");
        let keep = IndexSet::from_sorted(vec![1, 3], 4).unwrap();
        let masked = apply_mask(&x, &keep).unwrap();
        let (um, toks) = unmasked_subsequence(&masked);
        assert_eq!(um.indices(), &[1, 3]);
        assert_eq!(toks, vec![1, 3]); // T=1, C=3 in ATGC
    }

    #[test]
    fn unmasked_subsequence_of_clean_and_blank() {
        let x = atgc("ATGC");
        let all = apply_mask(&x, &IndexSet::full(4)).unwrap();
        let (um, toks) = unmasked_subsequence(&all);
        assert_eq!(um.len(), 4);
        assert_eq!(toks, x.tokens());

        let blank = MaskedSequence::fully_masked(2, 4).unwrap();
        let (um, toks) = unmasked_subsequence(&blank);
        assert!(um.is_empty());
        assert!(toks.is_empty());
    }

    #[test]
    fn out_of_range_keep_index_is_rejected() {
        let x = atgc("AT");
        let keep = IndexSet::from_sorted(vec![5], 6).unwrap();
        assert!(matches!(
            apply_mask(&x, &keep),
            Err(Error::IndexOutOfRange { index: 5, len: 2 })
        ));
    }

    #[test]
    fn alphabet_rejects_duplicates_and_reserved() {
        assert!(Alphabet::new("AA").is_err());
        assert!(Alphabet::new("A?").is_err());
        assert!(Alphabet::new("A").is_err());
    }

    #[test]
    fn sequence_rejects_out_of_alphabet_tokens() {
        assert!(Sequence::new(vec![0, 4], 4).is_err());
        assert!(MaskedSequence::new(vec![0, 4], 4).is_ok()); // 4 is MASK
        assert!(MaskedSequence::new(vec![0, 5], 4).is_err());
    }

    #[test]
    fn index_set_invariants() {
        assert!(IndexSet::from_sorted(vec![0, 0], 4).is_err());
        assert!(IndexSet::from_sorted(vec![1, 0], 4).is_err());
        assert!(IndexSet::from_unsorted(vec![3, 1], 4).is_ok());
        assert!(IndexSet::from_unsorted(vec![3, 3], 4).is_err());
        let s = IndexSet::from_sorted(vec![0, 2], 4).unwrap();
        assert_eq!(s.complement().indices(), &[1, 3]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_seq_and_keep() -> impl Strategy<Value = (Sequence, IndexSet)> {
            (2u16..6, 1usize..12).prop_flat_map(|(n, l)| {
                (
                    proptest::collection::vec(0..n, l),
                    proptest::collection::vec(proptest::bool::ANY, l),
                )
                    .prop_map(move |(tokens, keep_flags)| {
                        let x = Sequence::new(tokens, n).unwrap();
                        let keep = IndexSet::from_sorted(
                            keep_flags
                                .iter()
                                .enumerate()
                                .filter_map(|(i, &k)| k.then_some(i))
                                .collect(),
                            l,
                        )
                        .unwrap();
                        (x, keep)
                    })
            })
        }

        proptest! {
            #[test]
            fn mask_roundtrip_recovers_kept_tokens((x, keep) in arb_seq_and_keep()) {
                let masked = apply_mask(&x, &keep).unwrap();
                let (um, toks) = unmasked_subsequence(&masked);
                prop_assert_eq!(&um, &keep);
                let expect: Vec<u16> =
                    keep.indices().iter().map(|&i| x.token(i)).collect();
                prop_assert_eq!(toks, expect);
                prop_assert!(masked.consistent_with(&x));
            }

            #[test]
            fn remasking_with_same_keep_is_noop((x, keep) in arb_seq_and_keep()) {
                let once = apply_mask(&x, &keep).unwrap();
                // Re-masking the unmasked projection with the same keep set
                // changes nothing.
                let tokens: Vec<u16> = once.tokens().to_vec();
                let n = once.alphabet_size();
                let again: Vec<u16> = (0..once.len())
                    .map(|i| if keep.contains(i) { tokens[i] } else { mask_token(n) })
                    .collect();
                prop_assert_eq!(tokens, again);
            }
        }
    }
}
