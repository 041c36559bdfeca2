//! Word error rate with a substitution/deletion/insertion breakdown.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference length N.
    pub ref_len: usize,
}

impl AlignmentCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`; `None` for an empty reference.
    pub fn wer(&self) -> Option<f64> {
        (self.ref_len > 0).then(|| self.errors() as f64 / self.ref_len as f64)
    }
}

impl Add for AlignmentCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl AddAssign for AlignmentCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for AlignmentCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Unit-cost Levenshtein alignment. Among minimal-cost alignments the one
/// with fewest insertions, then fewest deletions, is reported.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentCounts {
    // Cell = (cost, insertions, deletions), compared lexicographically.
    type Cell = (usize, usize, usize);
    let m = hypothesis.len();
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, j, 0)).collect();
    let mut cur: Vec<Cell> = vec![(0, 0, 0); m + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = (i + 1, 0, i + 1);
        for j in 1..=m {
            let (c, ins, del) = prev[j - 1];
            let diag = if *r == hypothesis[j - 1] { (c, ins, del) } else { (c + 1, ins, del) };
            let (c, ins, del) = prev[j];
            let deletion = (c + 1, ins, del + 1);
            let (c, ins, del) = cur[j - 1];
            let insertion = (c + 1, ins + 1, del);
            cur[j] = diag.min(deletion).min(insertion);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, insertions, deletions) = prev[m];
    AlignmentCounts {
        substitutions: cost - insertions - deletions,
        deletions,
        insertions,
        ref_len: reference.len(),
    }
}

/// Pooled counts over `(reference, hypothesis)` word sequences.
pub fn corpus_wer<'a, I, T>(pairs: I) -> Result<AlignmentCounts>
where
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
    T: PartialEq + 'a,
{
    let total: AlignmentCounts = pairs.into_iter().map(|(r, h)| align(r, h)).sum();
    if total.ref_len == 0 {
        return Err(Error::arg("reference corpus has no words"));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NormalizeMode {
    #[default]
    None,
    /// Lowercase and collapse whitespace runs to single spaces.
    Lowercase,
}

impl std::str::FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "lowercase" => Ok(Self::Lowercase),
            other => Err(Error::arg(format!("unknown normalization mode {other:?}"))),
        }
    }
}

pub fn normalize_text(s: &str, mode: NormalizeMode) -> String {
    match mode {
        NormalizeMode::None => s.to_owned(),
        NormalizeMode::Lowercase => s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" "),
    }
}

/// Whitespace word split used for WER.
pub fn split_words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// WER counts between two texts after normalization.
pub fn text_alignment(reference: &str, hypothesis: &str, mode: NormalizeMode) -> AlignmentCounts {
    let r = normalize_text(reference, mode);
    let h = normalize_text(hypothesis, mode);
    align(&split_words(&r), &split_words(&h))
}
