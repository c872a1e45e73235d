//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ...: PASS|FAIL` line straight to stdout so the summary shows
//! up without `--nocapture`.
//!
//! Criterion 6 needs an English corpus of at least 20 MB: `VIGKEY_CORPUS`, or
//! `data/corpus` at the workspace root (see `scripts/fetch_corpus.py`). An
//! optional word list is read from `VIGKEY_WORDLIST` or `data/wordlist.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vigkey::analysis::{self, FeatureSchema};
use vigkey::estimators::Method;
use vigkey::nn::{self, Mlp, TrainConfig};
use vigkey::pipeline::{self, apply_mask, build_dataset, evaluate_model, Dataset, DatasetConfig, FeatureMask};
use vigkey::{stream_rng, CleanText};

const FIXTURE: &str = include_str!("fixtures/areopagitica.txt");

fn report(id: u32, name: &str, outcome: Result<String, String>, elapsed: Duration) {
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    let line = format!("criterion {id} ({name}): {status} [{:.1}s] {detail}\n", elapsed.as_secs_f64());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    if let Err(d) = outcome {
        panic!("criterion {id} failed: {d}");
    }
}

fn run(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let mut outcome = f();
    let elapsed = start.elapsed();
    if let (Ok(detail), Some(limit)) = (&outcome, limit) {
        if elapsed > limit {
            outcome = Err(format!("{detail}; took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()));
        }
    }
    report(id, name, outcome, elapsed);
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- independent oracles -------------------------------------------------

/// Letters of `s` as 0..26, dropping everything else.
fn oracle_letters(s: &str) -> Vec<u8> {
    s.bytes().filter(u8::is_ascii_alphabetic).map(|b| b.to_ascii_uppercase() - b'A').collect()
}

fn oracle_encrypt(plain: &[u8], key: &[u8]) -> Vec<u8> {
    plain.iter().enumerate().map(|(i, p)| (p + key[i % key.len()]) % 26).collect()
}

/// IC as the share of equal-letter pairs among all unordered pairs.
fn oracle_ic(t: &[u8]) -> f64 {
    let n = t.len();
    let mut equal = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            equal += (t[i] == t[j]) as u64;
        }
    }
    (2 * equal) as f64 / (n * (n - 1)) as f64
}

/// T(M, m) straight from the definition: relative frequencies of each coset,
/// sorted ascending, top half minus bottom half, averaged and scaled by 100.
fn oracle_t(t: &[u8], m: usize) -> f64 {
    let mut sum = 0.0;
    for j in 0..m {
        let coset: Vec<u8> = t.iter().skip(j).step_by(m).copied().collect();
        let mut freq = [0.0f64; 26];
        for &c in &coset {
            freq[c as usize] += 1.0;
        }
        for f in &mut freq {
            *f /= coset.len() as f64;
        }
        freq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let bottom: f64 = freq[..13].iter().sum();
        let top: f64 = freq[13..].iter().sum();
        sum += top - bottom;
    }
    100.0 * sum / m as f64
}

fn oracle_t_plus(t: &[u8], m: usize) -> f64 {
    let prev: f64 = (1..m).map(|i| oracle_t(t, i)).sum::<f64>() / (m - 1) as f64;
    oracle_t(t, m) - prev
}

fn oracle_t_plus_plus(t: &[u8], m: usize) -> f64 {
    oracle_t(t, m) - 0.5 * (oracle_t(t, m - 1) + oracle_t(t, m + 1))
}

/// Every pair of equal 3-grams and 4-grams adds one to the tally of its distance.
fn oracle_kasiski(t: &[u8]) -> ([usize; 5], [usize; 5], bool) {
    let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
    for n in [3, 4] {
        if t.len() < n {
            continue;
        }
        for i in 0..=t.len() - n {
            for j in i + 1..=t.len() - n {
                if t[i..i + n] == t[j..j + n] {
                    *tally.entry(j - i).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = tally.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut d = [0; 5];
    let mut c = [0; 5];
    for (i, (dist, count)) in ranked.iter().take(5).enumerate() {
        d[i] = *dist;
        c[i] = *count;
    }
    (d, c, !ranked.is_empty())
}

// ---- sample sources ---------------------------------------------------------

struct Sample {
    cipher: Vec<u8>,
    key_len: usize,
}

impl Sample {
    fn text(&self) -> CleanText {
        CleanText::from_indices(self.cipher.iter().copied())
    }
}

/// English plaintext from the fixture at a random offset, encrypted with a random key.
fn english_sample(rng: &mut ChaCha8Rng, plain: &[u8], lens: (usize, usize), keys: (usize, usize)) -> Sample {
    let n = rng.gen_range(lens.0..=lens.1);
    let start = rng.gen_range(0..plain.len() - n);
    let key_len = rng.gen_range(keys.0..=keys.1);
    let key: Vec<u8> = (0..key_len).map(|_| rng.gen_range(0..26)).collect();
    Sample { cipher: oracle_encrypt(&plain[start..start + n], &key), key_len }
}

fn random_text(rng: &mut ChaCha8Rng, len: usize, alphabet: u8) -> Vec<u8> {
    (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---- criteria ---------------------------------------------------------------

#[test]
fn criterion_1_oracle_equivalence() {
    run(1, "oracle equivalence", Some(Duration::from_secs(60)), || {
        let mut rng = stream_rng(101, 0);
        for i in 0..1000 {
            let n = rng.gen_range(2..=50);
            let alphabet = rng.gen_range(1..=26);
            let t = random_text(&mut rng, n, alphabet);
            let got = analysis::index_of_coincidence(&CleanText::from_indices(t.iter().copied()))
                .map_err(|e| e.to_string())?;
            let want = oracle_ic(&t);
            check(got == want, || format!("IC text {i}: {got} vs oracle {want}"))?;
        }

        let plain = oracle_letters(FIXTURE);
        let mut worst: f64 = 0.0;
        for s in 0..200 {
            let sample = english_sample(&mut rng, &plain, (200, 500), (3, 25));
            let text = sample.text();
            for m in 1..=25 {
                let got = analysis::twist_index(&text, m).map_err(|e| e.to_string())?;
                worst = worst.max((got - oracle_t(&sample.cipher, m)).abs());
                if m >= 2 {
                    let got = analysis::twist_plus_index(&text, m).map_err(|e| e.to_string())?;
                    worst = worst.max((got - oracle_t_plus(&sample.cipher, m)).abs());
                    let got = analysis::twist_plus_plus_index(&text, m).map_err(|e| e.to_string())?;
                    worst = worst.max((got - oracle_t_plus_plus(&sample.cipher, m)).abs());
                }
            }
            check(worst <= 1e-9, || format!("twist family sample {s}: deviation {worst:e}"))?;
        }

        for i in 0..200 {
            let n = rng.gen_range(0..=200);
            let alphabet = rng.gen_range(2..=26);
            let t = random_text(&mut rng, n, alphabet);
            let k = analysis::kasiski(&CleanText::from_indices(t.iter().copied()));
            let (d, c, any) = oracle_kasiski(&t);
            check(k.top_distances == d && k.top_counts == c && k.has_repeats == any, || {
                format!("Kasiski text {i}: {k:?} vs oracle {d:?} {c:?} {any}")
            })?;
        }
        Ok(format!("1000 IC texts exact, 200 twist samples max deviation {worst:.1e}, 200 Kasiski texts exact"))
    });
}

#[test]
fn criterion_2_plateau() {
    run(2, "plateau above q", Some(Duration::from_secs(60)), || {
        let plain = oracle_letters(FIXTURE);
        let mut rng = stream_rng(102, 0);
        let mut checked = 0usize;
        for s in 0..500 {
            let sample = english_sample(&mut rng, &plain, (200, 500), (3, 25));
            let text = sample.text();
            let q = analysis::quotient_bound(text.len()).q;
            for m in q + 1..=text.len() {
                let t = analysis::twist_index(&text, m).map_err(|e| e.to_string())?;
                check(t == 100.0, || format!("sample {s} (N={}, q={q}): T({m}) = {t}", text.len()))?;
                checked += 1;
            }
        }
        Ok(format!("T(M, m) = 100 exactly for all {checked} (sample, m > q) pairs over 500 samples"))
    });
}

#[test]
fn criterion_3_monotonicity() {
    run(3, "statistical monotonicity", None, || {
        let plain = oracle_letters(FIXTURE);
        let mut rng = stream_rng(103, 0);
        let mut holds = 0;
        for _ in 0..500 {
            let sample = english_sample(&mut rng, &plain, (300, 500), (3, 8));
            let text = sample.text();
            let k = sample.key_len;
            let a = analysis::twist_index(&text, k).map_err(|e| e.to_string())?;
            let b = analysis::twist_index(&text, 2 * k).map_err(|e| e.to_string())?;
            holds += (a <= b) as usize;
        }
        let rate = holds as f64 / 500.0;
        check(rate >= 0.95, || format!("T(k) <= T(2k) in {:.1}% of samples, need 95%", rate * 100.0))?;
        Ok(format!("T(k) <= T(2k) in {holds}/500 samples ({:.1}%)", rate * 100.0))
    });
}

#[test]
fn criterion_4_gradients() {
    run(4, "gradient correctness", Some(Duration::from_secs(60)), || {
        let shapes: [&[usize]; 4] = [&[5, 4, 4, 3], &[3, 6, 2], &[4, 3, 3, 3, 5], &[6, 5, 23]];
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut params = 0usize;
        for point in 0..24u64 {
            let dims = shapes[point as usize % shapes.len()];
            let mut rng = stream_rng(104, point);
            let mut mlp = Mlp::glorot(dims, &mut rng).map_err(|e| e.to_string())?;
            for layer in &mut mlp.layers {
                layer.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            }
            let batch: Vec<(Vec<f64>, usize)> = (0..6)
                .map(|_| {
                    ((0..dims[0]).map(|_| rng.gen_range(-2.0..2.0)).collect(), rng.gen_range(0..*dims.last().unwrap()))
                })
                .collect();
            let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
            let (grads, _) = mlp.gradients(&refs).map_err(|e| e.to_string())?;
            let mean_loss = |m: &Mlp| -> f64 {
                batch.iter().map(|(x, y)| nn::loss(&m.forward(x).unwrap(), *y)).sum::<f64>() / batch.len() as f64
            };
            for li in 0..mlp.layers.len() {
                let n_w = mlp.layers[li].weights.len();
                let n_b = mlp.layers[li].biases.len();
                for pi in 0..n_w + n_b {
                    let nudge = |m: &mut Mlp, d: f64| {
                        if pi < n_w {
                            m.layers[li].weights[pi] += d
                        } else {
                            m.layers[li].biases[pi - n_w] += d
                        }
                    };
                    let mut plus = mlp.clone();
                    nudge(&mut plus, h);
                    let mut minus = mlp.clone();
                    nudge(&mut minus, -h);
                    let fd = (mean_loss(&plus) - mean_loss(&minus)) / (2.0 * h);
                    let an = if pi < n_w { grads.weights[li][pi] } else { grads.biases[li][pi - n_w] };
                    worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                    params += 1;
                }
            }
        }
        check(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
        Ok(format!("24 random parameter points, {params} partial derivatives, max relative error {worst:.1e}"))
    });
}

/// Splits the fixture into `parts` documents inside `dir`.
fn fixture_corpus(dir: &Path, parts: usize) {
    let lines: Vec<&str> = FIXTURE.lines().collect();
    let per = lines.len().div_ceil(parts);
    for (i, chunk) in lines.chunks(per).enumerate() {
        fs::write(dir.join(format!("part{i:02}.txt")), chunk.join("\n")).unwrap();
    }
}

#[test]
fn criterion_5_determinism() {
    run(5, "determinism", None, || {
        let corpus = tempfile::tempdir().map_err(|e| e.to_string())?;
        fixture_corpus(corpus.path(), 8);
        let config = DatasetConfig {
            quota_per_length: 2,
            test_fraction: 0.25,
            seed: 55,
            write_samples: true,
            ..Default::default()
        };
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        build_dataset(corpus.path(), a.path(), &config).map_err(|e| e.to_string())?;
        build_dataset(corpus.path(), b.path(), &config).map_err(|e| e.to_string())?;
        let files = ["train.csv", "test.csv", "manifest.json", "schema.json", "train_ciphers.csv", "test_ciphers.csv"];
        for f in files {
            let x = fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
            let y = fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
            check(x == y, || format!("{f} differs between runs"))?;
        }

        let train = Dataset::read(&a.path().join(pipeline::TRAIN_FILE)).map_err(|e| e.to_string())?;
        let test = Dataset::read(&a.path().join(pipeline::TEST_FILE)).map_err(|e| e.to_string())?;
        let mask = FeatureMask::named("FINAL").map_err(|e| e.to_string())?;
        let tc = TrainConfig { seed: 77, ..Default::default() };
        let (m1, _) = pipeline::train_model(&train, &mask, &tc).map_err(|e| e.to_string())?;
        let (m2, _) = pipeline::train_model(&train, &mask, &tc).map_err(|e| e.to_string())?;
        check(m1.to_json().unwrap() == m2.to_json().unwrap(), || "retrained model files differ".into())?;
        let p1 = pipeline::predict_all(&m1, &test).map_err(|e| e.to_string())?;
        let p2 = pipeline::predict_all(&m2, &test).map_err(|e| e.to_string())?;
        check(p1 == p2, || "predictions differ".into())?;
        check(!test.is_empty(), || "empty test split".into())?;
        Ok(format!(
            "{} files byte-identical; retrained model identical, {} test predictions match",
            files.len(),
            test.len()
        ))
    });
}

fn corpus_dir() -> PathBuf {
    std::env::var_os("VIGKEY_CORPUS").map(PathBuf::from).unwrap_or_else(|| workspace_root().join("data/corpus"))
}

fn wordlist() -> Option<PathBuf> {
    std::env::var_os("VIGKEY_WORDLIST")
        .map(PathBuf::from)
        .or_else(|| Some(workspace_root().join("data/wordlist.txt")))
        .filter(|p| p.is_file())
}

fn corpus_bytes(dir: &Path) -> u64 {
    fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok()).filter_map(|e| e.metadata().ok()).filter(|m| m.is_file()).map(|m| m.len()).sum()
        })
        .unwrap_or(0)
}

#[test]
fn criterion_6_desk_scale_reproduction() {
    run(6, "desk-scale ordering and trends", Some(Duration::from_secs(30 * 60)), || {
        let dir = corpus_dir();
        let bytes = corpus_bytes(&dir);
        check(bytes >= 20_000_000, || {
            format!(
                "corpus {} has {bytes} bytes, need 20 MB (run scripts/fetch_corpus.py or set VIGKEY_CORPUS)",
                dir.display()
            )
        })?;
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = DatasetConfig { quota_per_length: 130, seed: 2024, wordlist: wordlist(), ..Default::default() };
        let manifest = build_dataset(&dir, out.path(), &config).map_err(|e| e.to_string())?;
        check(manifest.train.samples >= 30_000 && manifest.test.samples >= 5_000, || {
            format!("only {} train / {} test samples", manifest.train.samples, manifest.test.samples)
        })?;
        let train = Dataset::read(&out.path().join(pipeline::TRAIN_FILE)).map_err(|e| e.to_string())?;
        let test = Dataset::read(&out.path().join(pipeline::TEST_FILE)).map_err(|e| e.to_string())?;
        let mask = FeatureMask::named("FINAL").map_err(|e| e.to_string())?;
        let (model, _) = pipeline::train_model(&train, &mask, &TrainConfig { seed: 2024, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let r = evaluate_model(&model, &test).map_err(|e| e.to_string())?;

        let nn = r.overall(Method::Nn);
        let pct = |v: f64| format!("{:.1}%", v * 100.0);
        let mut failures = Vec::new();
        for m in Method::BASELINES {
            if nn <= r.overall(m) {
                failures.push(format!("NN {} does not exceed {} {}", pct(nn), m.id(), pct(r.overall(m))));
            }
        }
        if nn < 0.75 {
            failures.push(format!("NN overall {} below 75%", pct(nn)));
        }
        let buckets: Vec<f64> = r.bucket_accuracies(Method::Nn).into_iter().map(|a| a.unwrap_or(0.0)).collect();
        if !(buckets[0] < buckets[1] && buckets[1] < buckets[2]) {
            failures.push(format!("NN buckets not increasing: {buckets:?}"));
        }
        let bands = [
            (Method::Ic, 0.02, 0.15),
            (Method::Twist, 0.10, 0.35),
            (Method::TwistPlus, 0.50, 0.80),
            (Method::TwistPlusPlus, 0.45, 0.80),
        ];
        for (m, lo, hi) in bands {
            let v = r.overall(m);
            if !(lo..=hi).contains(&v) {
                failures.push(format!("{} {} outside [{}, {}]", m.id(), pct(v), pct(lo), pct(hi)));
            }
        }
        let summary = format!(
            "{} train / {} test; overall IC {} twist {} T+ {} T++ {} NN {}; NN buckets {} -> {} -> {}",
            train.len(),
            test.len(),
            pct(r.overall(Method::Ic)),
            pct(r.overall(Method::Twist)),
            pct(r.overall(Method::TwistPlus)),
            pct(r.overall(Method::TwistPlusPlus)),
            pct(nn),
            pct(buckets[0]),
            pct(buckets[1]),
            pct(buckets[2])
        );
        if failures.is_empty() {
            Ok(summary)
        } else {
            Err(format!("{}; {summary}", failures.join("; ")))
        }
    });
}

#[test]
fn criterion_7_feature_counts() {
    run(7, "feature-count contracts", None, || {
        let plain = oracle_letters(FIXTURE);
        let mut rng = stream_rng(107, 0);
        let final_mask = FeatureMask::named("FINAL").map_err(|e| e.to_string())?;
        let all_mask = FeatureMask::named("MODEL_1").map_err(|e| e.to_string())?;
        for s in 0..500 {
            let text = english_sample(&mut rng, &plain, (200, 500), (3, 25)).text();
            let full = analysis::feature_vector(&text, FeatureSchema::All114).map_err(|e| e.to_string())?;
            let fin = analysis::feature_vector(&text, FeatureSchema::Final77).map_err(|e| e.to_string())?;
            check(full.len() == 114 && fin.len() == 77, || format!("sample {s}: {} / {}", full.len(), fin.len()))?;
            check(final_mask.features(&text).map_err(|e| e.to_string())?.len() == 77, || {
                format!("sample {s}: FINAL mask")
            })?;
            check(all_mask.features(&text).map_err(|e| e.to_string())?.len() == 114, || {
                format!("sample {s}: MODEL_1 mask")
            })?;
        }

        let corpus = tempfile::tempdir().map_err(|e| e.to_string())?;
        fixture_corpus(corpus.path(), 6);
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = DatasetConfig { quota_per_length: 1, test_fraction: 0.3, seed: 7, ..Default::default() };
        build_dataset(corpus.path(), out.path(), &config).map_err(|e| e.to_string())?;
        let mut rows = 0;
        for f in [pipeline::TRAIN_FILE, pipeline::TEST_FILE] {
            let data = Dataset::read(&out.path().join(f)).map_err(|e| e.to_string())?;
            check(data.rows.iter().all(|r| r.len() == 114), || format!("{f}: row width"))?;
            let masked = apply_mask(&data, &final_mask).map_err(|e| e.to_string())?;
            check(masked.rows.iter().all(|r| r.len() == 77), || format!("{f}: FINAL width"))?;
            rows += data.len();
        }
        Ok(format!("500 ciphertexts and {rows} dataset rows: FINAL = 77, MODEL_1 = 114"))
    });
}

#[test]
fn criterion_8_softmax_and_loss_floor() {
    run(8, "softmax normalisation and loss floor", None, || {
        let mut rng = stream_rng(108, 0);
        let mlp = Mlp::glorot(&[77, 128, 128, 23], &mut rng).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for i in 0..10_000 {
            let scale = [1.0, 10.0, 1e3, 1e6][i % 4];
            let x: Vec<f64> = (0..77).map(|_| rng.gen_range(-scale..scale)).collect();
            let p = mlp.forward(&x).map_err(|e| e.to_string())?;
            check(p.len() == 23 && p.iter().all(|v| v.is_finite() && *v >= 0.0), || format!("input {i}: bad output"))?;
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        }
        check(worst <= 1e-9, || format!("softmax sum deviates by {worst:e}"))?;

        let mut one_hot = vec![0.0; 23];
        one_hot[0] = 1.0;
        let degenerate = [one_hot.clone(), vec![0.0; 23], vec![f64::MIN_POSITIVE; 23]];
        for (j, probs) in degenerate.iter().enumerate() {
            for label in [0, 5, 22] {
                let l = nn::loss(probs, label);
                check(l.is_finite() && l >= 0.0, || format!("degenerate vector {j}, label {label}: loss {l}"))?;
            }
        }
        check(nn::loss(&one_hot, 1) <= -(nn::PROB_FLOOR.ln()) + 1e-9, || "loss exceeds the floor bound".into())?;
        Ok(format!("10000 inputs, max |sum - 1| = {worst:.1e}; loss finite on degenerate vectors"))
    });
}
