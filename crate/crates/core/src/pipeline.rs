//! Dataset generation, feature masks, training runs and method comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, describe, describe_columns, group_range, AnalysisError, FeatureSchema, FeatureVector, FEATURE_GROUPS,
};
use crate::cipher::{self, encrypt, generate_key, CipherError, CipherSample, KeyMode, Lexicon};
use crate::corpus::{self, clean_text, load_corpus, segment, CleanText, CorpusError, PlainSample, SegmentationPlan};
use crate::estimators::{DomainSpec, EstimatorError, IndexTable, Method};
use crate::nn::{self, class_of, LabeledSet, NetworkModel, NnError, TrainConfig, TrainHistory};
use crate::{stream_rng, MAX_KEY_LEN, MIN_KEY_LEN, NUM_CLASSES};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Text-length buckets of the comparison table.
pub const BUCKETS: [(&str, usize, usize); 3] = [("200-299", 200, 299), ("300-399", 300, 399), ("400-500", 400, 500)];
pub const OVERALL_LABEL: &str = "200-500 (Overall accuracy)";

// RNG stream families derived from the master seed
const STREAM_SEGMENT: u64 = 1 << 56;
const STREAM_SELECT: u64 = 2 << 56;
const STREAM_SPLIT: u64 = 3 << 56;
const STREAM_SAMPLE: u64 = 4 << 56;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unknown feature mask {0:?} (expected MODEL_1..MODEL_11 or FINAL)")]
    UnknownMask(String),
    #[error("feature mask selects no features")]
    EmptyMask,
    #[error("feature mask {mask} needs column f{missing}, which the dataset lacks")]
    MaskMismatch { mask: String, missing: usize },
    #[error("model input width {model} does not match mask {mask} with {mask_len} features")]
    ModelMask { mask: String, mask_len: usize, model: usize },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("text length {0} lies outside every bucket (200..=500)")]
    OutsideBuckets(usize),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// A named subset of the 114 full-vector features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    name: String,
    indices: Vec<usize>,
}

/// Feature groups dropped by each named mask.
const MASK_EXCLUSIONS: [(&str, &[usize]); 12] = [
    ("MODEL_1", &[]),
    ("MODEL_2", &[12, 13]),
    ("MODEL_3", &[14]),
    ("MODEL_4", &[2, 14]),
    ("MODEL_5", &[14, 3, 4]),
    ("MODEL_6", &[14, 5]),
    ("MODEL_7", &[14, 5, 10, 11]),
    ("MODEL_8", &[14, 5, 10, 11, 9]),
    ("MODEL_9", &[14, 5, 9, 10, 11, 6]),
    ("MODEL_10", &[14, 5, 9, 10, 11, 6, 7]),
    ("MODEL_11", &[14, 5, 9, 10, 11, 6, 8]),
    ("FINAL", &[14, 5, 10, 11, 6]),
];

fn full_width() -> usize {
    FeatureSchema::All114.len()
}

impl FeatureMask {
    pub fn names() -> impl Iterator<Item = &'static str> {
        MASK_EXCLUSIONS.iter().map(|m| m.0)
    }

    /// One of `MODEL_1`..`MODEL_11` or `FINAL` (case-insensitive).
    pub fn named(name: &str) -> Result<Self> {
        let upper = name.to_ascii_uppercase();
        let (name, excluded) = MASK_EXCLUSIONS
            .iter()
            .find(|m| m.0 == upper)
            .ok_or_else(|| PipelineError::UnknownMask(name.to_string()))?;
        let indices = (1..=FEATURE_GROUPS.len()).filter(|g| !excluded.contains(g)).flat_map(group_range).collect();
        Ok(FeatureMask { name: name.to_string(), indices })
    }

    /// Inverse of [`FeatureMask::schema_id`].
    pub fn for_schema_id(id: &str) -> Result<Self> {
        match id {
            "ALL114" => Self::named("MODEL_1"),
            "FINAL77" => Self::named("FINAL"),
            other => Self::named(other),
        }
    }

    /// An arbitrary selection of full-vector indices, kept in the given order.
    pub fn custom(name: &str, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(PipelineError::EmptyMask);
        }
        let mut seen = BTreeSet::new();
        for &i in &indices {
            if i >= full_width() || !seen.insert(i) {
                return Err(PipelineError::Config(format!("mask index {i} is out of range or repeated")));
            }
        }
        Ok(FeatureMask { name: name.to_string(), indices })
    }

    pub fn name(&self) -> &str {
        &self.name
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

    /// Schema tag of vectors produced by this mask; the two fixed schemas keep their own ids.
    pub fn schema_id(&self) -> String {
        match self.name.as_str() {
            "MODEL_1" => FeatureSchema::All114.id().to_string(),
            "FINAL" => FeatureSchema::Final77.id().to_string(),
            other => other.to_string(),
        }
    }

    pub fn project(&self, full: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| full[i]).collect()
    }

    /// Masked features of a ciphertext.
    pub fn features(&self, cipher: &CleanText) -> Result<FeatureVector> {
        let full = analysis::feature_vector(cipher, FeatureSchema::All114)?;
        Ok(FeatureVector { schema_id: self.schema_id(), values: self.project(&full.values) })
    }
}

/// Labelled feature rows; `columns[j]` is the full-vector index of column `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub columns: Vec<usize>,
    pub labels: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// True when the columns are exactly the 114 full-vector features in order.
    pub fn is_full(&self) -> bool {
        self.columns.len() == full_width() && self.columns.iter().enumerate().all(|(j, &c)| j == c)
    }

    /// Labels as class indices for training.
    pub fn to_labeled(&self) -> Result<LabeledSet> {
        let labels = self.labels.iter().map(|&k| class_of(k)).collect::<std::result::Result<_, _>>()?;
        Ok(LabeledSet { rows: self.rows.clone(), labels })
    }

    /// Reads a `label,f<i>,...` CSV.
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(file).map_err(|e| match e {
            PipelineError::Dataset(msg) => PipelineError::Dataset(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn read_from<R: io::Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers()?.clone();
        if header.get(0) != Some("label") {
            return Err(PipelineError::Dataset("first column must be `label`".into()));
        }
        let columns = header
            .iter()
            .skip(1)
            .map(|h| {
                h.strip_prefix('f')
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&i| i < full_width())
                    .ok_or_else(|| PipelineError::Dataset(format!("bad column name {h:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if columns.is_empty() {
            return Err(PipelineError::Dataset("no feature columns".into()));
        }
        let mut data = Dataset { columns, ..Default::default() };
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let row_no = line + 2;
            let label = record[0]
                .parse::<usize>()
                .ok()
                .filter(|k| (MIN_KEY_LEN..=MAX_KEY_LEN).contains(k))
                .ok_or_else(|| PipelineError::Dataset(format!("row {row_no}: bad label {:?}", &record[0])))?;
            let row = record
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| PipelineError::Dataset(format!("row {row_no}: bad feature value")))?;
            data.labels.push(label);
            data.rows.push(row);
        }
        Ok(data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        self.write_to(io::BufWriter::new(file))
    }

    /// Floats use the shortest representation that parses back to the same value.
    pub fn write_to<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> =
            std::iter::once("label".to_string()).chain(self.columns.iter().map(|c| format!("f{c}"))).collect();
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.width() + 1);
        for (label, row) in self.labels.iter().zip(&self.rows) {
            record.clear();
            record.push(label.to_string());
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| PipelineError::Csv(e.into()))?;
        Ok(())
    }
}

/// Projects `data` onto `mask`; every masked feature must be a column of `data`.
pub fn apply_mask(data: &Dataset, mask: &FeatureMask) -> Result<Dataset> {
    if mask.is_empty() {
        return Err(PipelineError::EmptyMask);
    }
    let position: BTreeMap<usize, usize> = data.columns.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let picks = mask
        .indices()
        .iter()
        .map(|i| {
            position.get(i).copied().ok_or(PipelineError::MaskMismatch { mask: mask.name().to_string(), missing: *i })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        columns: mask.indices().to_vec(),
        labels: data.labels.clone(),
        rows: data.rows.iter().map(|r| picks.iter().map(|&j| r[j]).collect()).collect(),
    })
}

/// Settings for [`build_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub quota_per_length: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Share of keys built from the wordlist; the rest are random letters.
    pub key_mode_ratio: f64,
    pub wordlist: Option<PathBuf>,
    /// Target share of samples whose documents go to the test split.
    pub test_fraction: f64,
    pub seed: u64,
    /// Also write plaintext and ciphertext CSVs aligned with the dataset rows.
    pub write_samples: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            quota_per_length: 1300,
            min_len: corpus::MIN_SAMPLE_LEN,
            max_len: corpus::MAX_SAMPLE_LEN,
            key_mode_ratio: 0.5,
            wordlist: None,
            test_fraction: 0.15,
            seed: 0,
            write_samples: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyModeCounts {
    pub random: usize,
    pub wordlist: usize,
    /// Wordlist draws that fell back to a random key.
    pub fallback: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub samples: usize,
    pub documents: Vec<String>,
    pub key_length_counts: BTreeMap<usize, usize>,
    pub text_length_counts: BTreeMap<usize, usize>,
}

/// Everything needed to audit and regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub schema_id: String,
    pub corpus_dir: String,
    pub documents_read: usize,
    pub documents_failed: usize,
    pub seed: u64,
    pub quota_per_length: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub key_mode_ratio: f64,
    pub effective_key_mode_ratio: f64,
    pub wordlist: Option<String>,
    pub test_fraction: f64,
    pub total_samples: usize,
    pub key_length_counts: BTreeMap<usize, usize>,
    pub text_length_counts: BTreeMap<usize, usize>,
    pub key_modes: KeyModeCounts,
    pub train: SplitSummary,
    pub test: SplitSummary,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(io_err(path))?)?)
    }
}

struct Generated {
    doc: usize,
    plain: PlainSample,
    cipher: CleanText,
    key_length: usize,
    mode: KeyMode,
    fallback: bool,
    features: Vec<f64>,
}

fn summarize(samples: &[&Generated], doc_ids: &[String]) -> SplitSummary {
    let mut s = SplitSummary { samples: samples.len(), ..Default::default() };
    let mut docs = BTreeSet::new();
    for g in samples {
        docs.insert(g.doc);
        *s.key_length_counts.entry(g.key_length).or_default() += 1;
        *s.text_length_counts.entry(g.plain.len()).or_default() += 1;
    }
    s.documents = docs.into_iter().map(|d| doc_ids[d].clone()).collect();
    s
}

fn write_split(out_dir: &Path, stem: &str, samples: &[&Generated], write_samples: bool) -> Result<()> {
    let data = Dataset {
        columns: (0..full_width()).collect(),
        labels: samples.iter().map(|g| g.key_length).collect(),
        rows: samples.iter().map(|g| g.features.clone()).collect(),
    };
    data.write(&out_dir.join(format!("{stem}.csv")))?;
    if write_samples {
        let path = out_dir.join(format!("{stem}_samples.csv"));
        let plains: Vec<PlainSample> = samples.iter().map(|g| g.plain.clone()).collect();
        corpus::write_samples(io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?), &plains)?;
        let path = out_dir.join(format!("{stem}_ciphers.csv"));
        let ciphers: Vec<CipherSample> = samples
            .iter()
            .map(|g| CipherSample { ciphertext: g.cipher.clone(), true_key_length: g.key_length })
            .collect();
        cipher::write_cipher_samples(io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?), &ciphers)?;
    }
    Ok(())
}

/// Cleans, segments, encrypts and featurises a corpus into `train.csv` and
/// `test.csv` under `out_dir`, with `schema.json` and `manifest.json`.
///
/// Each document is segmented on its own RNG stream. For every text length
/// the pipeline keeps a seeded random `quota_per_length` of the candidate
/// segments; lengths with fewer candidates keep them all and are reported as
/// warnings. Whole documents are then assigned to the test split in seeded
/// random order until it holds `test_fraction` of the samples. Key lengths
/// are uniform over 3..=25.
pub fn build_dataset(corpus_dir: &Path, out_dir: &Path, config: &DatasetConfig) -> Result<DatasetManifest> {
    let plan = SegmentationPlan {
        min_len: config.min_len,
        max_len: config.max_len,
        quota_per_length: config.quota_per_length,
        seed: config.seed,
    };
    plan.validate()?;
    if !(0.0..=1.0).contains(&config.key_mode_ratio) {
        return Err(PipelineError::Config(format!("key_mode_ratio {} not in [0, 1]", config.key_mode_ratio)));
    }
    if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
        return Err(PipelineError::Config(format!("test_fraction {} not in (0, 1)", config.test_fraction)));
    }
    let mut warnings = Vec::new();
    let lexicon = config.wordlist.as_deref().map(Lexicon::load).transpose()?;
    let ratio = match &lexicon {
        Some(lex) if lex.is_empty() => {
            warnings.push("wordlist is empty; every key is random".to_string());
            0.0
        }
        Some(_) => config.key_mode_ratio,
        None if config.key_mode_ratio > 0.0 => {
            warnings.push("no wordlist given; every key is random".to_string());
            0.0
        }
        None => 0.0,
    };

    let mut docs = Vec::new();
    let mut failed = 0;
    for doc in load_corpus(corpus_dir)? {
        match doc {
            Ok(d) => docs.push(d),
            Err(e) => {
                failed += 1;
                log::warn!("{e}");
                warnings.push(e.to_string());
            }
        }
    }
    let doc_ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();

    let segments: Vec<Vec<PlainSample>> = docs
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            segment(&d.id, &clean_text(&d.body), &plan, &mut stream_rng(config.seed, STREAM_SEGMENT | i as u64))
        })
        .collect::<std::result::Result<_, _>>()?;
    drop(docs);

    // global quota per text length
    let mut by_length: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (d, segs) in segments.iter().enumerate() {
        for (s, seg) in segs.iter().enumerate() {
            by_length.entry(seg.len()).or_default().push((d, s));
        }
    }
    let mut selected = Vec::new();
    let mut short = Vec::new();
    for len in plan.min_len..=plan.max_len {
        let mut pool = by_length.remove(&len).unwrap_or_default();
        if pool.len() < config.quota_per_length {
            short.push((len, pool.len()));
        }
        pool.shuffle(&mut stream_rng(config.seed, STREAM_SELECT | len as u64));
        pool.truncate(config.quota_per_length);
        selected.extend(pool);
    }
    selected.sort_unstable();
    if !short.is_empty() {
        let worst = short.iter().min_by_key(|s| s.1).expect("non-empty");
        warnings.push(format!(
            "{} of {} text lengths have fewer than {} samples (smallest: length {} with {})",
            short.len(),
            plan.length_count(),
            config.quota_per_length,
            worst.0,
            worst.1
        ));
    }

    let generated: Vec<Generated> = selected
        .par_iter()
        .map(|&(d, s)| -> Result<Generated> {
            let plain = segments[d][s].clone();
            let mut rng = stream_rng(config.seed, STREAM_SAMPLE | (d as u64) << 28 | s as u64);
            let key_length = rng.gen_range(MIN_KEY_LEN..=MAX_KEY_LEN);
            let mode = if ratio > 0.0 && rng.gen_bool(ratio) { KeyMode::Wordlist } else { KeyMode::Random };
            let (key, fallback) = generate_key(&mut rng, key_length, mode, lexicon.as_ref())?;
            let cipher = encrypt(&plain.letters, &key);
            let features = analysis::feature_vector(&cipher, FeatureSchema::All114)?.values;
            Ok(Generated { doc: d, plain, cipher, key_length, mode, fallback: fallback.is_some(), features })
        })
        .collect::<Result<_>>()?;
    drop(segments);

    // document-level split
    let mut per_doc: BTreeMap<usize, usize> = BTreeMap::new();
    for g in &generated {
        *per_doc.entry(g.doc).or_default() += 1;
    }
    let mut doc_order: Vec<usize> = per_doc.keys().copied().collect();
    doc_order.shuffle(&mut stream_rng(config.seed, STREAM_SPLIT));
    let target = (generated.len() as f64 * config.test_fraction).round() as usize;
    let mut test_docs = BTreeSet::new();
    let mut in_test = 0;
    for &d in &doc_order {
        if in_test >= target || test_docs.len() + 1 >= doc_order.len() {
            break;
        }
        test_docs.insert(d);
        in_test += per_doc[&d];
    }
    if doc_order.len() < 2 {
        warnings.push("fewer than two documents produced samples; the test split is empty".to_string());
    }
    if generated.is_empty() {
        warnings.push("corpus produced no samples".to_string());
    }
    let (test, train): (Vec<&Generated>, Vec<&Generated>) = generated.iter().partition(|g| test_docs.contains(&g.doc));

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_split(out_dir, "train", &train, config.write_samples)?;
    write_split(out_dir, "test", &test, config.write_samples)?;
    let schema_path = out_dir.join(SCHEMA_FILE);
    fs::write(&schema_path, serde_json::to_string_pretty(&describe(FeatureSchema::All114))?)
        .map_err(io_err(&schema_path))?;

    let mut key_modes = KeyModeCounts::default();
    let mut key_length_counts = BTreeMap::new();
    let mut text_length_counts = BTreeMap::new();
    for g in &generated {
        match g.mode {
            KeyMode::Random => key_modes.random += 1,
            KeyMode::Wordlist => key_modes.wordlist += 1,
        }
        key_modes.fallback += g.fallback as usize;
        *key_length_counts.entry(g.key_length).or_default() += 1;
        *text_length_counts.entry(g.plain.len()).or_default() += 1;
    }
    if key_modes.fallback > 0 {
        warnings.push(format!("{} wordlist keys fell back to random keys", key_modes.fallback));
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        schema_id: FeatureSchema::All114.id().to_string(),
        corpus_dir: corpus_dir.display().to_string(),
        documents_read: doc_ids.len(),
        documents_failed: failed,
        seed: config.seed,
        quota_per_length: config.quota_per_length,
        min_len: config.min_len,
        max_len: config.max_len,
        key_mode_ratio: config.key_mode_ratio,
        effective_key_mode_ratio: ratio,
        wordlist: config.wordlist.as_ref().map(|p| p.display().to_string()),
        test_fraction: config.test_fraction,
        total_samples: generated.len(),
        key_length_counts,
        text_length_counts,
        key_modes,
        train: summarize(&train, &doc_ids),
        test: summarize(&test, &doc_ids),
        warnings,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Trains a classifier on the `mask` columns of `train`.
pub fn train_model(train: &Dataset, mask: &FeatureMask, config: &TrainConfig) -> Result<(NetworkModel, TrainHistory)> {
    let masked = apply_mask(train, mask)?;
    Ok(nn::train(&masked.to_labeled()?, &mask.schema_id(), config)?)
}

/// Accuracy counts for one key length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyLengthAccuracy {
    pub key_length: usize,
    pub samples: usize,
    pub correct: usize,
    /// `None` when no test sample has this key length.
    pub accuracy: Option<f64>,
}

/// Accuracy over a set of samples, overall and per key length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub samples: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub per_key_length: Vec<KeyLengthAccuracy>,
}

fn ratio(correct: usize, samples: usize) -> Option<f64> {
    (samples > 0).then(|| correct as f64 / samples as f64)
}

impl Accuracy {
    fn tally<I: IntoIterator<Item = (usize, bool)>>(outcomes: I) -> Self {
        let mut per = vec![(0usize, 0usize); NUM_CLASSES];
        for (k, ok) in outcomes {
            let slot = &mut per[k - MIN_KEY_LEN];
            slot.0 += 1;
            slot.1 += ok as usize;
        }
        let samples = per.iter().map(|p| p.0).sum();
        let correct = per.iter().map(|p| p.1).sum();
        Accuracy {
            samples,
            correct,
            accuracy: ratio(correct, samples),
            per_key_length: per
                .iter()
                .enumerate()
                .map(|(i, &(n, c))| KeyLengthAccuracy {
                    key_length: i + MIN_KEY_LEN,
                    samples: n,
                    correct: c,
                    accuracy: ratio(c, n),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub name: String,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(flatten)]
    pub accuracy: Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub overall: Accuracy,
    pub buckets: Vec<BucketReport>,
}

/// Accuracy of the network and the four classical estimators on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_id: String,
    pub test_samples: usize,
    pub bucket_samples: Vec<usize>,
    /// In table column order: IC, twist, T⁺, T⁺⁺, network.
    pub methods: Vec<MethodReport>,
}

impl EvaluationReport {
    pub fn method(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Overall accuracy of `method`, 0 if absent or empty.
    pub fn overall(&self, method: Method) -> f64 {
        self.method(method).and_then(|m| m.overall.accuracy).unwrap_or(0.0)
    }

    /// Per-bucket accuracies of `method` in bucket order.
    pub fn bucket_accuracies(&self, method: Method) -> Vec<Option<f64>> {
        self.method(method).map(|m| m.buckets.iter().map(|b| b.accuracy.accuracy).collect()).unwrap_or_default()
    }
}

pub fn bucket_of(text_len: usize) -> Result<usize> {
    BUCKETS.iter().position(|&(_, lo, hi)| (lo..=hi).contains(&text_len)).ok_or(PipelineError::OutsideBuckets(text_len))
}

/// Predicted key length of every test sample for each method, in [`Method::ALL`] order.
pub fn predict_all(model: &NetworkModel, test: &Dataset) -> Result<Vec<[Option<usize>; 5]>> {
    if !test.is_full() {
        return Err(PipelineError::Dataset("baselines need the full 114-column test set".into()));
    }
    let mask = FeatureMask::for_schema_id(&model.schema_id)?;
    if mask.len() != model.input_dim() {
        return Err(PipelineError::ModelMask {
            mask: mask.name().to_string(),
            mask_len: mask.len(),
            model: model.input_dim(),
        });
    }
    let domain = DomainSpec::default();
    test.rows
        .par_iter()
        .map(|row| -> Result<[Option<usize>; 5]> {
            let [ic, tw, tp, tpp] = IndexTable::from_features(row)?.baselines(&domain)?;
            let nn = model.predict_row(&mask.project(row))?;
            Ok([ic.predicted_k, tw.predicted_k, tp.predicted_k, tpp.predicted_k, Some(nn)])
        })
        .collect()
}

/// Scores `model` and the classical estimators on a full 114-column test set.
pub fn evaluate_model(model: &NetworkModel, test: &Dataset) -> Result<EvaluationReport> {
    let predictions = predict_all(model, test)?;
    let len_col = group_range(1).start;
    let buckets = test.rows.iter().map(|r| bucket_of(r[len_col] as usize)).collect::<Result<Vec<_>>>()?;
    let methods = Method::ALL
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let outcomes: Vec<(usize, bool, usize)> = predictions
                .iter()
                .zip(&test.labels)
                .zip(&buckets)
                .map(|((p, &k), &b)| (k, p[mi] == Some(k), b))
                .collect();
            MethodReport {
                method,
                overall: Accuracy::tally(outcomes.iter().map(|o| (o.0, o.1))),
                buckets: BUCKETS
                    .iter()
                    .enumerate()
                    .map(|(bi, &(name, lo, hi))| BucketReport {
                        name: name.to_string(),
                        min_len: lo,
                        max_len: hi,
                        accuracy: Accuracy::tally(outcomes.iter().filter(|o| o.2 == bi).map(|o| (o.0, o.1))),
                    })
                    .collect(),
            }
        })
        .collect();
    let bucket_samples = (0..BUCKETS.len()).map(|b| buckets.iter().filter(|&&x| x == b).count()).collect();
    Ok(EvaluationReport { schema_id: model.schema_id.clone(), test_samples: test.len(), bucket_samples, methods })
}

/// Trains on the masked training set and evaluates every method on the test set.
pub fn run_experiment(
    train: &Dataset,
    test: &Dataset,
    mask: &FeatureMask,
    config: &TrainConfig,
) -> Result<(EvaluationReport, NetworkModel, TrainHistory)> {
    apply_mask(test, mask)?;
    let (model, history) = train_model(train, mask, config)?;
    let report = evaluate_model(&model, test)?;
    Ok((report, model, history))
}

/// The comparison table: rows are the overall figure and the three buckets,
/// columns are the five methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub methods: Vec<Method>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

pub fn compare_methods(report: &EvaluationReport) -> ComparisonTable {
    let methods: Vec<Method> = report.methods.iter().map(|m| m.method).collect();
    let mut rows = vec![(OVERALL_LABEL.to_string(), report.methods.iter().map(|m| m.overall.accuracy).collect())];
    for (bi, &(name, _, _)) in BUCKETS.iter().enumerate() {
        rows.push((name.to_string(), report.methods.iter().map(|m| m.buckets[bi].accuracy.accuracy).collect()));
    }
    ComparisonTable { methods, rows }
}

fn percent(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |a| format!("{:.1}%", a * 100.0))
}

impl ComparisonTable {
    /// Plain-text table with accuracies rounded to 0.1%.
    pub fn render(&self) -> String {
        let mut header = vec!["Text-Length/Method".to_string()];
        header.extend(self.methods.iter().map(|m| m.heading().to_string()));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(label, vals)| std::iter::once(label.clone()).chain(vals.iter().map(|&v| percent(v))).collect())
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| std::iter::once(&header).chain(&body).map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(
                    |(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) },
                )
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    /// `bucket,<method ids...>` with full-precision accuracies.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<&str> = std::iter::once("bucket").chain(self.methods.iter().map(|m| m.id())).collect();
        w.write_record(&header)?;
        for (label, vals) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(vals.iter().map(|v| v.map(|a| a.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| PipelineError::Csv(e.into()))?;
        Ok(())
    }
}

/// Per-key-length curves: 23 rows per method for the overall set and each bucket.
pub fn write_key_length_curves<W: io::Write>(report: &EvaluationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "bucket", "key_length", "samples", "correct", "accuracy"])?;
    for m in &report.methods {
        let groups =
            std::iter::once(("overall", &m.overall)).chain(m.buckets.iter().map(|b| (b.name.as_str(), &b.accuracy)));
        for (bucket, acc) in groups {
            for k in &acc.per_key_length {
                w.write_record([
                    m.method.id().to_string(),
                    bucket.to_string(),
                    k.key_length.to_string(),
                    k.samples.to_string(),
                    k.correct.to_string(),
                    k.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| PipelineError::Csv(e.into()))?;
    Ok(())
}

/// Writes `<stem>.json`, `<stem>_summary.csv` and `<stem>_by_key_length.csv` next to `report_path`.
pub fn write_report(report: &EvaluationReport, report_path: &Path) -> Result<Vec<PathBuf>> {
    let stem = report_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    let dir = report_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::write(report_path, serde_json::to_string_pretty(report)?).map_err(io_err(report_path))?;
    let summary = dir.join(format!("{stem}_summary.csv"));
    compare_methods(report).write_csv(io::BufWriter::new(fs::File::create(&summary).map_err(io_err(&summary))?))?;
    let curves = dir.join(format!("{stem}_by_key_length.csv"));
    write_key_length_curves(report, io::BufWriter::new(fs::File::create(&curves).map_err(io_err(&curves))?))?;
    Ok(vec![report_path.to_path_buf(), summary, curves])
}

/// Column layout of a masked dataset.
pub fn mask_descriptor(mask: &FeatureMask) -> analysis::SchemaDescriptor {
    describe_columns(&mask.schema_id(), mask.indices())
}
