//! Plaintext ingestion: loading documents, cleaning to A–Z and cutting
//! non-overlapping fixed-length samples.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

/// Shortest sample length produced by segmentation.
pub const MIN_SAMPLE_LEN: usize = 200;
/// Longest sample length produced by segmentation.
pub const MAX_SAMPLE_LEN: usize = 500;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus directory {0} does not exist or is not a directory")]
    MissingDirectory(PathBuf),
    #[error("failed to list {path}: {source}")]
    List { path: PathBuf, source: io::Error },
    #[error("failed to read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("invalid segmentation plan: {0}")]
    InvalidPlan(String),
    #[error("text contains non A-Z character {0:?}")]
    NotClean(char),
}

/// One source document, identified by its file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub id: String,
    pub body: String,
}

/// Text over the alphabet `A..=Z` only, stored as ASCII bytes.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct CleanText(Vec<u8>);

impl CleanText {
    /// Wraps an already-clean string; rejects anything outside `A..=Z`.
    pub fn new(s: &str) -> Result<Self, CorpusError> {
        Self::from_bytes(s.as_bytes().to_vec())
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CorpusError> {
        if let Some(&b) = bytes.iter().find(|b| !b.is_ascii_uppercase()) {
            return Err(CorpusError::NotClean(b as char));
        }
        Ok(CleanText(bytes))
    }

    /// Builds from letter indices (`A` = 0 .. `Z` = 25). Values are reduced mod 26.
    pub fn from_indices<I: IntoIterator<Item = u8>>(indices: I) -> Self {
        CleanText(indices.into_iter().map(|i| b'A' + i % 26).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_str(&self) -> &str {
        // only ASCII uppercase is ever stored
        std::str::from_utf8(&self.0).expect("CleanText holds ASCII")
    }

    /// Letter indices, `A` = 0 .. `Z` = 25.
    pub fn indices(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().map(|b| b - b'A')
    }

    pub fn slice(&self, start: usize, end: usize) -> CleanText {
        CleanText(self.0[start..end].to_vec())
    }
}

impl fmt::Display for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CleanText({:?})", self.as_str())
    }
}

/// Keeps the ASCII letters of `raw`, upper-cased, in order. Everything else,
/// including accented letters, is dropped.
pub fn clean_text(raw: &str) -> CleanText {
    CleanText(raw.bytes().filter(u8::is_ascii_alphabetic).map(|b| b.to_ascii_uppercase()).collect())
}

/// A contiguous plaintext segment of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainSample {
    pub doc_id: String,
    pub start: usize,
    pub letters: CleanText,
}

impl PlainSample {
    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn end(&self) -> usize {
        self.start + self.letters.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentationPlan {
    pub min_len: usize,
    pub max_len: usize,
    /// Target number of samples per length value, enforced across the corpus.
    pub quota_per_length: usize,
    pub seed: u64,
}

impl Default for SegmentationPlan {
    fn default() -> Self {
        SegmentationPlan { min_len: MIN_SAMPLE_LEN, max_len: MAX_SAMPLE_LEN, quota_per_length: 1300, seed: 0 }
    }
}

impl SegmentationPlan {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_len < MIN_SAMPLE_LEN || self.max_len > MAX_SAMPLE_LEN {
            return Err(CorpusError::InvalidPlan(format!(
                "lengths must lie within [{MIN_SAMPLE_LEN}, {MAX_SAMPLE_LEN}], got [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.min_len > self.max_len {
            return Err(CorpusError::InvalidPlan(format!("min_len {} exceeds max_len {}", self.min_len, self.max_len)));
        }
        Ok(())
    }

    /// Number of distinct sample lengths the plan can emit.
    pub fn length_count(&self) -> usize {
        self.max_len - self.min_len + 1
    }
}

/// Cuts `doc` left to right into non-overlapping samples.
///
/// Each sample length is drawn uniformly from the lengths in
/// `[min_len, max_len]` that still fit in the remaining text. A tail shorter
/// than `min_len` is discarded. Quotas are not applied here; the pipeline
/// balances them over the whole corpus.
pub fn segment<R: Rng + ?Sized>(
    doc_id: &str,
    doc: &CleanText,
    plan: &SegmentationPlan,
    rng: &mut R,
) -> Result<Vec<PlainSample>, CorpusError> {
    plan.validate()?;
    let mut samples = Vec::new();
    let mut pos = 0;
    while doc.len() - pos >= plan.min_len {
        let hi = plan.max_len.min(doc.len() - pos);
        let len = rng.gen_range(plan.min_len..=hi);
        samples.push(PlainSample { doc_id: doc_id.to_string(), start: pos, letters: doc.slice(pos, pos + len) });
        pos += len;
    }
    Ok(samples)
}

/// Result of reading one directory entry.
pub type DocumentResult = Result<RawDocument, CorpusError>;

/// Lists the regular files of `dir` in lexicographic file-name order and
/// yields each as a lossily UTF-8 decoded [`RawDocument`].
///
/// A file that cannot be read yields an `Err` item and iteration continues.
pub fn load_corpus(dir: &Path) -> Result<impl Iterator<Item = DocumentResult>, CorpusError> {
    if !dir.is_dir() {
        return Err(CorpusError::MissingDirectory(dir.to_path_buf()));
    }
    let list_err = |source| CorpusError::List { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(list_err)? {
        let entry = entry.map_err(list_err)?;
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    Ok(files.into_iter().map(|path| {
        let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match fs::read(&path) {
            Ok(bytes) => Ok(RawDocument { id, body: String::from_utf8_lossy(&bytes).into_owned() }),
            Err(source) => Err(CorpusError::Read { path, source }),
        }
    }))
}

/// Writes samples as `doc_id,start_offset,length,letters` records with a header row.
pub fn write_samples<W: io::Write>(out: W, samples: &[PlainSample]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["doc_id", "start_offset", "length", "letters"])?;
    for s in samples {
        w.write_record([s.doc_id.as_str(), &s.start.to_string(), &s.len().to_string(), s.letters.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
