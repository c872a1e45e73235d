//! Classical key-length predictors: the IC formula and the argmax of the
//! twist, twist⁺ and twist⁺⁺ indices over a domain of candidate lengths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, group_range, quotient_bound, TwistProfile};
use crate::corpus::CleanText;
use crate::{MAX_KEY_LEN, MIN_KEY_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EstimatorError {
    #[error("invalid domain [{0}, {1}]: need 2 <= m_min <= m_max")]
    Domain(usize, usize),
    #[error("unknown method {0:?} (expected ic, twist, tplus, tplusplus)")]
    UnknownMethod(String),
    #[error("feature row has {0} values, expected the 114-value layout")]
    FeatureWidth(usize),
    #[error("domain upper bound {0} exceeds the {max} indices stored in a feature row", max = analysis::FEATURE_MAX_M)]
    DomainBeyondFeatures(usize),
}

/// Candidate key lengths `[m_min, m_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub m_min: usize,
    pub m_max: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec { m_min: MIN_KEY_LEN, m_max: MAX_KEY_LEN }
    }
}

impl DomainSpec {
    pub fn new(m_min: usize, m_max: usize) -> Result<Self, EstimatorError> {
        if m_min < 2 || m_min > m_max {
            return Err(EstimatorError::Domain(m_min, m_max));
        }
        Ok(DomainSpec { m_min, m_max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "IC")]
    Ic,
    #[serde(rename = "TWIST")]
    Twist,
    #[serde(rename = "TWIST_PLUS")]
    TwistPlus,
    #[serde(rename = "TWIST_PLUS_PLUS")]
    TwistPlusPlus,
    #[serde(rename = "NN")]
    Nn,
}

impl Method {
    /// The four classical baselines, in report column order.
    pub const BASELINES: [Method; 4] = [Method::Ic, Method::Twist, Method::TwistPlus, Method::TwistPlusPlus];
    /// Every method in report column order.
    pub const ALL: [Method; 5] = [Method::Ic, Method::Twist, Method::TwistPlus, Method::TwistPlusPlus, Method::Nn];

    pub fn id(self) -> &'static str {
        match self {
            Method::Ic => "IC",
            Method::Twist => "TWIST",
            Method::TwistPlus => "TWIST_PLUS",
            Method::TwistPlusPlus => "TWIST_PLUS_PLUS",
            Method::Nn => "NN",
        }
    }

    /// Column heading used in the comparison table.
    pub fn heading(self) -> &'static str {
        match self {
            Method::Ic => "IC",
            Method::Twist => "Twist Index",
            Method::TwistPlus => "T+",
            Method::TwistPlusPlus => "T++",
            Method::Nn => "Neural Network",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ic" => Ok(Method::Ic),
            "twist" => Ok(Method::Twist),
            "tplus" | "twist_plus" => Ok(Method::TwistPlus),
            "tplusplus" | "twist_plus_plus" => Ok(Method::TwistPlusPlus),
            "nn" => Ok(Method::Nn),
            _ => Err(EstimatorError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub method: Method,
    pub predicted_k: Option<usize>,
    pub score: Option<f64>,
}

impl Prediction {
    fn none(method: Method) -> Self {
        Prediction { method, predicted_k: None, score: None }
    }

    pub fn is_correct(&self, true_k: usize) -> bool {
        self.predicted_k == Some(true_k)
    }
}

/// Everything the baselines read from one ciphertext: its length, IC and
/// the twist family indexed by `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTable {
    len: usize,
    ic: Option<f64>,
    twist: TwistProfile,
    plus: Vec<Option<f64>>,
    plus_plus: Vec<Option<f64>>,
}

impl IndexTable {
    /// Computes the indices needed for candidate lengths up to `max_m`.
    pub fn from_text(text: &CleanText, max_m: usize) -> Self {
        let profile = TwistProfile::new(text, max_m + 1);
        Self::from_profile(text.len(), analysis::index_of_coincidence(text).ok(), profile, max_m)
    }

    fn from_profile(len: usize, ic: Option<f64>, twist: TwistProfile, max_m: usize) -> Self {
        let plus = (0..=max_m).map(|m| twist.plus(m).ok()).collect();
        let plus_plus = (0..=max_m).map(|m| twist.plus_plus(m).ok()).collect();
        IndexTable { len, ic, twist, plus, plus_plus }
    }

    /// Reads the same quantities back out of a 114-value feature row.
    pub fn from_features(row: &[f64]) -> Result<Self, EstimatorError> {
        if row.len() != analysis::FeatureSchema::All114.len() {
            return Err(EstimatorError::FeatureWidth(row.len()));
        }
        let len = row[group_range(1).start] as usize;
        let ic = (len >= 2).then(|| row[group_range(3).start]);
        let twist_cols = &row[group_range(6)];
        let defined = twist_cols.len().min(len);
        let twist = TwistProfile::from_values(twist_cols[..defined].to_vec());
        let column = |group: usize, first_m: usize| -> Vec<Option<f64>> {
            let cols = &row[group_range(group)];
            (0..=analysis::FEATURE_MAX_M).map(|m| m.checked_sub(first_m).and_then(|i| cols.get(i).copied())).collect()
        };
        let mut plus = column(7, 2);
        let mut plus_plus = column(8, 2);
        // indices needing T(M, m) with m > N were stored as 0 sentinels
        for m in 0..plus.len() {
            if m > len {
                plus[m] = None;
            }
            if m + 1 > len {
                plus_plus[m] = None;
            }
        }
        Ok(IndexTable { len, ic, twist, plus, plus_plus })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn max_m(&self) -> usize {
        self.plus.len() - 1
    }

    pub fn predict(&self, method: Method, domain: &DomainSpec) -> Result<Prediction, EstimatorError> {
        match method {
            Method::Ic => Ok(self.predict_ic()),
            Method::Nn => Err(EstimatorError::UnknownMethod("nn".into())),
            _ if domain.m_max > self.max_m() => Err(EstimatorError::DomainBeyondFeatures(domain.m_max)),
            Method::Twist => {
                let scores = (domain.m_min..=domain.m_max).map(|m| (m, self.twist.t(m).ok()));
                Ok(argmax(method, scores))
            }
            Method::TwistPlus => {
                let lo = domain.m_min.max(2);
                let scores = (lo..=domain.m_max).map(|m| (m, self.plus[m]));
                Ok(argmax(method, scores))
            }
            Method::TwistPlusPlus => {
                let lo = domain.m_min.max(2);
                let hi = domain.m_max.min(quotient_bound(self.len).q);
                let scores = (lo..=hi).map(|m| (m, self.plus_plus[m]));
                Ok(argmax(method, scores))
            }
        }
    }

    fn predict_ic(&self) -> Prediction {
        let estimate = self.ic.and_then(|ic| analysis::ic_key_estimate_from(ic, self.len).ok());
        match estimate {
            Some(e) => Prediction { method: Method::Ic, predicted_k: Some(round_and_clamp(e)), score: Some(e) },
            None => Prediction::none(Method::Ic),
        }
    }

    /// Predictions of all four baselines.
    pub fn baselines(&self, domain: &DomainSpec) -> Result<[Prediction; 4], EstimatorError> {
        let mut out = [Prediction::none(Method::Ic); 4];
        for (slot, method) in out.iter_mut().zip(Method::BASELINES) {
            *slot = self.predict(method, domain)?;
        }
        Ok(out)
    }
}

/// Rounds half away from zero and clamps into `[3, 25]`.
pub fn round_and_clamp(estimate: f64) -> usize {
    let r = estimate.round();
    if r <= MIN_KEY_LEN as f64 {
        MIN_KEY_LEN
    } else if r >= MAX_KEY_LEN as f64 {
        MAX_KEY_LEN
    } else {
        r as usize
    }
}

/// First `m` attaining the maximum score; undefined scores are skipped.
fn argmax<I: Iterator<Item = (usize, Option<f64>)>>(method: Method, scores: I) -> Prediction {
    let mut best: Option<(usize, f64)> = None;
    for (m, s) in scores {
        let Some(s) = s else { continue };
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((m, s));
        }
    }
    match best {
        Some((m, s)) => Prediction { method, predicted_k: Some(m), score: Some(s) },
        None => Prediction::none(method),
    }
}

/// Key length from the IC formula; `None` when the formula is undefined.
pub fn estimate_ic(text: &CleanText) -> Prediction {
    IndexTable::from_text(text, 2).predict_ic()
}

pub fn estimate_twist(text: &CleanText, domain: &DomainSpec) -> Prediction {
    IndexTable::from_text(text, domain.m_max).predict(Method::Twist, domain).expect("table covers domain")
}

pub fn estimate_twist_plus(text: &CleanText, domain: &DomainSpec) -> Prediction {
    IndexTable::from_text(text, domain.m_max).predict(Method::TwistPlus, domain).expect("table covers domain")
}

/// Argmax of T⁺⁺ over `[max(2, m_min), min(m_max, q)]` with `q = ⌊N/12⌋`.
pub fn estimate_twist_plus_plus(text: &CleanText, domain: &DomainSpec) -> Prediction {
    IndexTable::from_text(text, domain.m_max).predict(Method::TwistPlusPlus, domain).expect("table covers domain")
}

/// Writes `sample_id,method,predicted_k,true_k,score`; missing values are empty fields.
pub fn write_predictions<W: std::io::Write>(out: W, rows: &[(String, Prediction, Option<usize>)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "method", "predicted_k", "true_k", "score"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for (id, p, true_k) in rows {
        w.write_record([
            id.clone(),
            p.method.id().to_string(),
            opt(p.predicted_k.map(|k| k.to_string())),
            opt(true_k.map(|k| k.to_string())),
            opt(p.score.map(|s| s.to_string())),
        ])?;
    }
    w.flush()?;
    Ok(())
}
