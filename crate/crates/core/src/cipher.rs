//! Vigenère encryption and generation of labelled keys.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{clean_text, CleanText};
use crate::{MAX_KEY_LEN, MIN_KEY_LEN};

/// Attempts at building a wordlist key before falling back to a random one.
const WORDLIST_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum CipherError {
    #[error("key length {0} outside [{MIN_KEY_LEN}, {MAX_KEY_LEN}]")]
    KeyLength(usize),
    #[error("key {key:?} has minimal period {period}, shorter than its length")]
    Periodic { key: String, period: usize },
    #[error("key must consist of letters A-Z")]
    NotLetters,
    #[error("wordlist mode requires a lexicon")]
    MissingLexicon,
    #[error("failed to read lexicon {path}: {source}")]
    Lexicon { path: String, source: io::Error },
}

/// Length of the shortest prefix that generates `s` by repetition.
///
/// The period always divides `s.len()`; e.g. `"ABAB"` has period 2 and
/// `"ABA"` has period 3.
pub fn minimal_period<T: PartialEq>(s: &[T]) -> usize {
    let n = s.len();
    (1..=n).find(|&p| n.is_multiple_of(p) && (p..n).all(|i| s[i] == s[i - p])).unwrap_or(0)
}

/// A Vigenère key whose minimal period equals its length.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Key(CleanText);

impl Key {
    pub fn new(letters: &str) -> Result<Self, CipherError> {
        let text = CleanText::new(letters).map_err(|_| CipherError::NotLetters)?;
        Self::from_clean(text)
    }

    pub fn from_clean(text: CleanText) -> Result<Self, CipherError> {
        let k = text.len();
        if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&k) {
            return Err(CipherError::KeyLength(k));
        }
        let period = minimal_period(text.as_bytes());
        if period != k {
            return Err(CipherError::Periodic { key: text.to_string(), period });
        }
        Ok(Key(text))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    fn shifts(&self) -> Vec<u8> {
        self.0.indices().collect()
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({:?})", self.as_str())
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn shift_by(text: &CleanText, shifts: &[u8], forward: bool) -> CleanText {
    let k = shifts.len();
    CleanText::from_indices(text.indices().enumerate().map(|(i, p)| {
        let s = shifts[i % k];
        if forward {
            (p + s) % 26
        } else {
            (p + 26 - s) % 26
        }
    }))
}

/// `c[i] = (p[i] + key[i mod k]) mod 26` with `A` = 0.
pub fn encrypt(plain: &CleanText, key: &Key) -> CleanText {
    shift_by(plain, &key.shifts(), true)
}

pub fn decrypt(cipher: &CleanText, key: &Key) -> CleanText {
    shift_by(cipher, &key.shifts(), false)
}

/// Words available for building keys, letters only and upper-cased.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    words: Vec<String>,
}

impl Lexicon {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words = words.into_iter().map(|w| clean_text(w.as_ref()).to_string()).filter(|w| !w.is_empty()).collect();
        Lexicon { words }
    }

    /// One word per line; non-alphabetic characters are stripped.
    pub fn load(path: &Path) -> Result<Self, CipherError> {
        let body =
            fs::read(path).map_err(|source| CipherError::Lexicon { path: path.display().to_string(), source })?;
        Ok(Self::from_words(String::from_utf8_lossy(&body).lines()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    Random,
    Wordlist,
}

/// Emitted when a wordlist key could not be built and a random key was used instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFallback {
    pub length: usize,
}

fn random_key<R: Rng + ?Sized>(rng: &mut R, length: usize) -> Key {
    loop {
        let text = CleanText::from_indices((0..length).map(|_| rng.gen_range(0..26u8)));
        if let Ok(key) = Key::from_clean(text) {
            return key;
        }
    }
}

fn wordlist_key<R: Rng + ?Sized>(rng: &mut R, length: usize, lexicon: &Lexicon) -> Option<Key> {
    if lexicon.is_empty() {
        return None;
    }
    for _ in 0..WORDLIST_ATTEMPTS {
        let mut s = String::with_capacity(length + 16);
        while s.len() < length {
            s.push_str(lexicon.words.choose(rng)?);
        }
        s.truncate(length);
        if let Ok(key) = Key::new(&s) {
            return Some(key);
        }
    }
    None
}

/// Draws a key of exactly `length` letters whose minimal period is `length`.
///
/// Wordlist keys concatenate randomly chosen lexicon words and truncate to
/// the target length; when that keeps failing the period check the key is
/// drawn at random and a [`KeyFallback`] is returned alongside it.
pub fn generate_key<R: Rng + ?Sized>(
    rng: &mut R,
    length: usize,
    mode: KeyMode,
    lexicon: Option<&Lexicon>,
) -> Result<(Key, Option<KeyFallback>), CipherError> {
    if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&length) {
        return Err(CipherError::KeyLength(length));
    }
    match mode {
        KeyMode::Random => Ok((random_key(rng, length), None)),
        KeyMode::Wordlist => {
            let lexicon = lexicon.ok_or(CipherError::MissingLexicon)?;
            match wordlist_key(rng, length, lexicon) {
                Some(key) => Ok((key, None)),
                None => {
                    log::warn!("wordlist key of length {length} unavailable; using a random key");
                    Ok((random_key(rng, length), Some(KeyFallback { length })))
                }
            }
        }
    }
}

/// A labelled ciphertext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherSample {
    pub ciphertext: CleanText,
    pub true_key_length: usize,
}

impl CipherSample {
    pub fn text_length(&self) -> usize {
        self.ciphertext.len()
    }
}

/// Writes `ciphertext,true_key_length` rows with a header.
pub fn write_cipher_samples<W: io::Write>(out: W, samples: &[CipherSample]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ciphertext", "true_key_length"])?;
    for s in samples {
        w.write_record([s.ciphertext.as_str(), &s.true_key_length.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
