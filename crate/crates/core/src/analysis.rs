//! Ciphertext statistics used both by the classical estimators and as
//! classifier inputs.
//!
//! Letter counts are kept as integers for as long as possible: the twist of
//! a coset is `(top-13 count sum - bottom-13 count sum) / coset length`, so a
//! coset with at most 13 distinct letters has a twist of exactly 1 and the
//! twist index saturates at exactly 100 once `m` exceeds `N / 12`.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CleanText;

/// Index of coincidence of English plaintext.
pub const ENGLISH_IC: f64 = 0.066;
/// Index of coincidence of uniformly random letters, as used by the key-length formula.
pub const RANDOM_IC: f64 = 0.038;
/// Largest `m` for which twist, twist⁺ and twist⁺⁺ features are emitted.
pub const FEATURE_MAX_M: usize = 25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("text has {len} letters, at least {needed} required")]
    TooShort { len: usize, needed: usize },
    #[error("m = {m} outside the valid range [{min}, {max}]")]
    BadM { m: usize, min: usize, max: usize },
    #[error("key-length estimate undefined: denominator {0} is not positive")]
    NonPositiveDenominator(f64),
    #[error("unknown feature schema {0:?}")]
    UnknownSchema(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

fn need(text: &CleanText, needed: usize) -> Result<()> {
    if text.len() < needed {
        return Err(AnalysisError::TooShort { len: text.len(), needed });
    }
    Ok(())
}

fn check_m(m: usize, min: usize, max: usize) -> Result<()> {
    if m < min || m > max {
        return Err(AnalysisError::BadM { m, min, max });
    }
    Ok(())
}

/// Letter counts, `counts[0]` for `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LetterFrequencies {
    pub counts: [u32; 26],
    pub total: usize,
}

impl LetterFrequencies {
    fn from_indices<I: IntoIterator<Item = u8>>(letters: I) -> Self {
        let mut counts = [0u32; 26];
        let mut total = 0;
        for i in letters {
            counts[i as usize] += 1;
            total += 1;
        }
        LetterFrequencies { counts, total }
    }

    /// Σ fᵢ(fᵢ−1) / (N(N−1)); `None` below two letters.
    fn ic(&self) -> Option<f64> {
        if self.total < 2 {
            return None;
        }
        let pairs: u64 = self.counts.iter().map(|&f| f as u64 * (f as u64).saturating_sub(1)).sum();
        let n = self.total as u64;
        Some(pairs as f64 / (n * (n - 1)) as f64)
    }

    fn sorted_counts(&self) -> [u32; 26] {
        let mut c = self.counts;
        c.sort_unstable();
        c
    }

    /// Twist of this coset's signature, computed on integer counts.
    fn twist(&self) -> f64 {
        let c = self.sorted_counts();
        let bottom: u64 = c[..13].iter().map(|&x| x as u64).sum();
        let top: u64 = c[13..].iter().map(|&x| x as u64).sum();
        (top - bottom) as f64 / self.total as f64
    }
}

pub fn frequencies(text: &CleanText) -> LetterFrequencies {
    LetterFrequencies::from_indices(text.indices())
}

/// Probability that two letters drawn without replacement are equal.
pub fn index_of_coincidence(text: &CleanText) -> Result<f64> {
    need(text, 2)?;
    Ok(frequencies(text).ic().expect("length checked"))
}

/// Key-length estimate `0.028 N / (IC (N−1) − 0.038 N + 0.066)`.
pub fn ic_key_estimate(text: &CleanText) -> Result<f64> {
    let ic = index_of_coincidence(text)?;
    ic_key_estimate_from(ic, text.len())
}

/// The same estimate from a precomputed IC and text length.
pub fn ic_key_estimate_from(ic: f64, n: usize) -> Result<f64> {
    let n = n as f64;
    let denom = ic * (n - 1.0) - RANDOM_IC * n + ENGLISH_IC;
    if denom <= 0.0 {
        return Err(AnalysisError::NonPositiveDenominator(denom));
    }
    Ok(0.028 * n / denom)
}

/// Splits `text` into `m` cosets; coset `j` holds positions `j, j+m, j+2m, …`.
pub fn cosets(text: &CleanText, m: usize) -> Result<Vec<CleanText>> {
    check_m(m, 1, text.len())?;
    let bytes = text.as_bytes();
    Ok((0..m)
        .map(|j| {
            let letters = bytes[j..].iter().step_by(m).copied().collect();
            CleanText::from_bytes(letters).expect("cosets of clean text are clean")
        })
        .collect())
}

fn coset_frequencies(text: &CleanText, m: usize) -> Vec<LetterFrequencies> {
    let mut out = vec![LetterFrequencies { counts: [0; 26], total: 0 }; m];
    for (i, l) in text.indices().enumerate() {
        let f = &mut out[i % m];
        f.counts[l as usize] += 1;
        f.total += 1;
    }
    out
}

/// Mean index of coincidence of the `m` cosets. Every coset needs two letters.
pub fn avg_coset_ic(text: &CleanText, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(AnalysisError::BadM { m, min: 1, max: text.len() / 2 });
    }
    need(text, 2 * m)?;
    Ok(avg_coset_ic_or_zero(text, m))
}

/// As [`avg_coset_ic`], counting a coset with fewer than two letters as IC 0.
fn avg_coset_ic_or_zero(text: &CleanText, m: usize) -> f64 {
    let sum: f64 = coset_frequencies(text, m).iter().map(|f| f.ic().unwrap_or(0.0)).sum();
    sum / m as f64
}

/// Relative letter frequencies sorted ascending: `c[0]` is the rarest letter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSignature(pub [f64; 26]);

pub fn signature(text: &CleanText) -> Result<SampleSignature> {
    need(text, 1)?;
    let f = frequencies(text);
    let n = f.total as f64;
    let mut c = f.counts.map(|x| x as f64 / n);
    c.sort_by(f64::total_cmp);
    Ok(SampleSignature(c))
}

/// Sum of the 13 largest signature entries minus the sum of the 13 smallest.
pub fn twist(sig: &SampleSignature) -> f64 {
    let bottom: f64 = sig.0[..13].iter().sum();
    let top: f64 = sig.0[13..].iter().sum();
    top - bottom
}

/// Twist index `T(M, m) = (100/m) Σⱼ twist(Cⱼ)`, in `[0, 100]`.
pub fn twist_index(text: &CleanText, m: usize) -> Result<f64> {
    check_m(m, 1, text.len())?;
    Ok(twist_index_unchecked(text, m))
}

fn twist_index_unchecked(text: &CleanText, m: usize) -> f64 {
    let sum: f64 = coset_frequencies(text, m).iter().map(LetterFrequencies::twist).sum();
    // 100·Σ/m rather than (100/m)·Σ keeps the saturated value exactly 100
    100.0 * sum / m as f64
}

/// `T⁺(M, m) = T(M, m) − mean(T(M, 1..m))`, for `m ≥ 2`.
pub fn twist_plus_index(text: &CleanText, m: usize) -> Result<f64> {
    check_m(m, 2, text.len())?;
    TwistProfile::new(text, m).plus(m)
}

/// `T⁺⁺(M, m) = T(M, m) − (T(M, m−1) + T(M, m+1)) / 2`, for `2 ≤ m < N`.
pub fn twist_plus_plus_index(text: &CleanText, m: usize) -> Result<f64> {
    check_m(m, 2, text.len().saturating_sub(1))?;
    TwistProfile::new(text, m + 1).plus_plus(m)
}

/// Twist indices `T(M, 1..=max_m)` of one text, computed once and shared by
/// the twist⁺ and twist⁺⁺ formulas. Entries with `m > N` are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistProfile {
    values: Vec<f64>,
}

impl TwistProfile {
    pub fn new(text: &CleanText, max_m: usize) -> Self {
        let values = (1..=max_m.min(text.len())).map(|m| twist_index_unchecked(text, m)).collect();
        TwistProfile { values }
    }

    /// A profile from precomputed `T(M, 1), T(M, 2), …`.
    pub fn from_values(values: Vec<f64>) -> Self {
        TwistProfile { values }
    }

    /// Largest `m` with a twist index in this profile.
    pub fn max_m(&self) -> usize {
        self.values.len()
    }

    pub fn t(&self, m: usize) -> Result<f64> {
        check_m(m, 1, self.max_m())?;
        Ok(self.values[m - 1])
    }

    pub fn plus(&self, m: usize) -> Result<f64> {
        check_m(m, 2, self.max_m())?;
        let mean: f64 = self.values[..m - 1].iter().sum::<f64>() / (m - 1) as f64;
        Ok(self.values[m - 1] - mean)
    }

    pub fn plus_plus(&self, m: usize) -> Result<f64> {
        check_m(m, 2, self.max_m().saturating_sub(1))?;
        Ok(self.values[m - 1] - 0.5 * (self.values[m - 2] + self.values[m]))
    }
}

/// Number of Kasiski distances (and counts) reported.
pub const KASISKI_TOP: usize = 5;

/// The most frequent distances between repeated 3- and 4-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KasiskiSummary {
    pub top_distances: [usize; KASISKI_TOP],
    pub top_counts: [usize; KASISKI_TOP],
    pub has_repeats: bool,
}

/// Tallies every pairwise distance between occurrences of each repeated
/// trigram and quadgram (both lengths in one tally) and keeps the five most
/// frequent distances, ties going to the smaller distance.
pub fn kasiski(text: &CleanText) -> KasiskiSummary {
    let letters: Vec<u8> = text.indices().collect();
    let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
    let mut has_repeats = false;
    for n in [3usize, 4] {
        if letters.len() < n {
            continue;
        }
        let mut positions: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, w) in letters.windows(n).enumerate() {
            let code = w.iter().fold(0u32, |acc, &l| acc * 26 + l as u32);
            positions.entry(code).or_default().push(i);
        }
        for occ in positions.values().filter(|p| p.len() >= 2) {
            has_repeats = true;
            for (a, &i) in occ.iter().enumerate() {
                for &j in &occ[a + 1..] {
                    *tally.entry(j - i).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = tally.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut summary = KasiskiSummary { has_repeats, ..Default::default() };
    for (slot, (d, c)) in ranked.into_iter().take(KASISKI_TOP).enumerate() {
        summary.top_distances[slot] = d;
        summary.top_counts[slot] = c;
    }
    summary
}

/// Percentage frequencies ranked most to least common, ties alphabetical.
fn ranked_percentages(text: &CleanText) -> Result<Vec<f64>> {
    need(text, 1)?;
    let f = frequencies(text);
    let mut order: Vec<usize> = (0..26).collect();
    order.sort_by(|&a, &b| f.counts[b].cmp(&f.counts[a]).then(a.cmp(&b)));
    let n = f.total as f64;
    Ok(order.into_iter().map(|i| 100.0 * f.counts[i] as f64 / n).collect())
}

/// Matthews H: summed percentage frequency of the seven most common letters.
pub fn h7(text: &CleanText) -> Result<f64> {
    Ok(ranked_percentages(text)?[..7].iter().sum())
}

/// Matthews Δ: H minus the summed percentage frequency of the seven least common letters.
pub fn delta7(text: &CleanText) -> Result<f64> {
    let p = ranked_percentages(text)?;
    Ok(p[..7].iter().sum::<f64>() - p[19..].iter().sum::<f64>())
}

/// First-order Shannon entropy in bits, with `0·log 0 = 0`.
pub fn entropy1(text: &CleanText) -> Result<f64> {
    need(text, 1)?;
    let f = frequencies(text);
    let n = f.total as f64;
    Ok(-f
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>())
}

/// `N = 12q + r` with `0 ≤ r < 12`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuotientBound {
    pub q: usize,
    pub r: usize,
}

pub fn quotient_bound(len: usize) -> QuotientBound {
    QuotientBound { q: len / 12, r: len % 12 }
}

/// The fourteen candidate feature groups, numbered from 1 in the order they
/// appear in the full vector. Each entry is `(name, width)`.
pub const FEATURE_GROUPS: [(&str, usize); 14] = [
    ("length", 1),
    ("has_repeats", 1),
    ("ic", 1),
    ("ic_english", 1),
    ("quotient", 1),
    ("twist", 25),
    ("twist_plus", 24),
    ("twist_plus_plus", 24),
    ("avg_coset_ic", 23),
    ("kasiski_distance", 5),
    ("kasiski_count", 5),
    ("h7", 1),
    ("delta7", 1),
    ("entropy1", 1),
];

/// Index range of feature group `item` (1-based) within the full vector.
pub fn group_range(item: usize) -> Range<usize> {
    assert!((1..=FEATURE_GROUPS.len()).contains(&item), "feature group {item} out of range");
    let start: usize = FEATURE_GROUPS[..item - 1].iter().map(|g| g.1).sum();
    start..start + FEATURE_GROUPS[item - 1].1
}

/// Groups kept by the 77-feature schema.
pub const FINAL_GROUPS: [usize; 9] = [1, 2, 3, 4, 7, 8, 9, 12, 13];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSchema {
    #[serde(rename = "ALL114")]
    All114,
    #[serde(rename = "FINAL77")]
    Final77,
}

impl FeatureSchema {
    pub fn id(self) -> &'static str {
        match self {
            FeatureSchema::All114 => "ALL114",
            FeatureSchema::Final77 => "FINAL77",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "ALL114" => Ok(FeatureSchema::All114),
            "FINAL77" => Ok(FeatureSchema::Final77),
            other => Err(AnalysisError::UnknownSchema(other.to_string())),
        }
    }

    /// Positions of this schema's features inside the full 114-vector.
    pub fn indices(self) -> Vec<usize> {
        match self {
            FeatureSchema::All114 => (0..full_width()).collect(),
            FeatureSchema::Final77 => FINAL_GROUPS.iter().flat_map(|&g| group_range(g)).collect(),
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        self.indices().len()
    }
}

fn full_width() -> usize {
    FEATURE_GROUPS.iter().map(|g| g.1).sum()
}

/// Column name of feature `index` in the full vector.
pub fn feature_name(index: usize) -> String {
    let mut start = 0;
    for (item, &(name, width)) in FEATURE_GROUPS.iter().enumerate() {
        if index < start + width {
            let offset = index - start;
            return match item + 1 {
                6 => format!("{name}_{}", offset + 1),
                7 | 8 => format!("{name}_{}", offset + 2),
                9 => format!("{name}_{}", offset + 3),
                10 | 11 => format!("{name}_{}", offset + 1),
                _ => name.to_string(),
            };
        }
        start += width;
    }
    panic!("feature index {index} out of range");
}

/// Feature group (1-based) containing full-vector index `index`.
pub fn feature_group(index: usize) -> usize {
    (1..=FEATURE_GROUPS.len()).find(|&g| group_range(g).contains(&index)).expect("index in range")
}

/// An ordered feature vector tagged with the schema (or mask) that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub schema_id: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The full 114-value feature vector. Undefined components become 0.
fn full_features(text: &CleanText) -> Vec<f64> {
    let n = text.len();
    let freq = frequencies(text);
    let kas = kasiski(text);
    let profile = TwistProfile::new(text, FEATURE_MAX_M + 1);

    let mut v = Vec::with_capacity(full_width());
    v.push(n as f64);
    v.push(if kas.has_repeats { 1.0 } else { 0.0 });
    v.push(freq.ic().unwrap_or(0.0));
    v.push(ENGLISH_IC);
    v.push(quotient_bound(n).q as f64);
    v.extend((1..=FEATURE_MAX_M).map(|m| profile.t(m).unwrap_or(0.0)));
    v.extend((2..=FEATURE_MAX_M).map(|m| profile.plus(m).unwrap_or(0.0)));
    v.extend((2..=FEATURE_MAX_M).map(|m| profile.plus_plus(m).unwrap_or(0.0)));
    v.extend((3..=FEATURE_MAX_M).map(|m| if m <= n { avg_coset_ic_or_zero(text, m) } else { 0.0 }));
    v.extend(kas.top_distances.iter().map(|&d| d as f64));
    v.extend(kas.top_counts.iter().map(|&c| c as f64));
    v.push(h7(text).unwrap_or(0.0));
    v.push(delta7(text).unwrap_or(0.0));
    v.push(entropy1(text).unwrap_or(0.0));
    debug_assert_eq!(v.len(), full_width());
    v
}

/// Assembles the features of `cipher` in `schema` order. Needs two letters;
/// any statistic undefined for the text contributes 0.
pub fn feature_vector(cipher: &CleanText, schema: FeatureSchema) -> Result<FeatureVector> {
    need(cipher, 2)?;
    let full = full_features(cipher);
    let values = match schema {
        FeatureSchema::All114 => full,
        FeatureSchema::Final77 => schema.indices().into_iter().map(|i| full[i]).collect(),
    };
    Ok(FeatureVector { schema_id: schema.id().to_string(), values })
}

/// One column of a [`SchemaDescriptor`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub index: usize,
    pub name: String,
    pub group: usize,
    pub source_index: usize,
}

/// Machine-readable column layout written next to every dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub schema_id: String,
    pub n_features: usize,
    pub columns: Vec<FeatureColumn>,
}

/// Describes the columns at `indices` of the full vector under `schema_id`.
pub fn describe_columns(schema_id: &str, indices: &[usize]) -> SchemaDescriptor {
    SchemaDescriptor {
        schema_id: schema_id.to_string(),
        n_features: indices.len(),
        columns: indices
            .iter()
            .enumerate()
            .map(|(index, &src)| FeatureColumn {
                index,
                name: feature_name(src),
                group: feature_group(src),
                source_index: src,
            })
            .collect(),
    }
}

pub fn describe(schema: FeatureSchema) -> SchemaDescriptor {
    describe_columns(schema.id(), &schema.indices())
}
