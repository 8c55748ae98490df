//! Retrieval scoring: the position-weighted IRMA code error and classification
//! accuracy, plus the CSV report written by `evaluate`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const CODE_LEN: usize = 13;
pub const WILDCARD: u8 = b'*';

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("malformed IRMA code {code:?}: {reason}")]
    MalformedCode { code: String, reason: String },
    #[error("cannot derive alphabets from an empty corpus")]
    EmptyCorpus,
    #[error("prediction and truth lists differ in length ({predicted} vs {truth})")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("accuracy of an empty list is undefined")]
    Empty,
}

/// 13-character hierarchical code `TTTT-DDD-AAA-BBB`, stored without dashes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IrmaCode([u8; CODE_LEN]);

impl IrmaCode {
    /// Accepts the code with or without its dashes.
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        let malformed = |reason: String| EvalError::MalformedCode {
            code: s.to_owned(),
            reason,
        };
        let chars: Vec<u8> = s.bytes().filter(|&b| b != b'-').collect();
        if chars.len() != CODE_LEN {
            return Err(malformed(format!(
                "expected {CODE_LEN} characters without dashes, found {}",
                chars.len()
            )));
        }
        if let Some(&b) = chars.iter().find(|b| !(b.is_ascii_alphanumeric() || **b == WILDCARD)) {
            return Err(malformed(format!("invalid character {:?}", b as char)));
        }
        let mut out = [0u8; CODE_LEN];
        out.copy_from_slice(&chars);
        Ok(Self(out))
    }

    pub fn from_bytes(bytes: [u8; CODE_LEN]) -> Result<Self, EvalError> {
        Self::parse(&String::from_utf8_lossy(&bytes))
    }

    pub fn as_bytes(&self) -> &[u8; CODE_LEN] {
        &self.0
    }

    /// Character at 1-based position `i`.
    pub fn position(&self, i: usize) -> u8 {
        self.0[i - 1]
    }
}

impl FromStr for IrmaCode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for IrmaCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = std::str::from_utf8(&self.0).expect("ASCII by construction");
        write!(f, "{}-{}-{}-{}", &s[..4], &s[4..7], &s[7..10], &s[10..])
    }
}

/// Number of distinct labels observed at each code position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisAlphabets(pub [u32; CODE_LEN]);

impl AxisAlphabets {
    /// `b_i` for 1-based position `i`.
    pub fn count(&self, i: usize) -> u32 {
        self.0[i - 1]
    }

    /// Largest possible error: every position mismatched.
    pub fn max_error(&self) -> f64 {
        (1..=CODE_LEN)
            .map(|i| 1.0 / (f64::from(self.count(i)) * i as f64))
            .fold(0.0, |acc, w| acc + w)
    }
}

/// Distinct non-wildcard characters per position, at least 1.
pub fn compute_alphabets(corpus: &[IrmaCode]) -> Result<AxisAlphabets, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut counts = [0u32; CODE_LEN];
    for (p, count) in counts.iter_mut().enumerate() {
        let mut seen = [false; 256];
        for code in corpus {
            let b = code.0[p];
            if b != WILDCARD && !seen[b as usize] {
                seen[b as usize] = true;
                *count += 1;
            }
        }
        *count = (*count).max(1);
    }
    Ok(AxisAlphabets(counts))
}

/// `Σ_{i=1..13} (1/b_i)(1/i) δ(l_i, l̂_i)`. A wildcard in `truth` matches anything.
pub fn irma_error(truth: &IrmaCode, predicted: &IrmaCode, alphabets: &AxisAlphabets) -> f64 {
    (1..=CODE_LEN)
        .filter(|&i| {
            let t = truth.position(i);
            t != WILDCARD && t != predicted.position(i)
        })
        .map(|i| 1.0 / (f64::from(alphabets.count(i)) * i as f64))
        // an empty f64 sum is -0.0, which would print as "-0"
        .fold(0.0, |acc, w| acc + w)
}

/// Percentage of positions where `predicted[i] == truth[i]`.
pub fn classification_accuracy<A, B>(predicted: &[A], truth: &[B]) -> Result<f64, EvalError>
where
    A: AsRef<str>,
    B: AsRef<str>,
{
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.as_ref() == t.as_ref())
        .count();
    Ok(100.0 * correct as f64 / predicted.len() as f64)
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRow {
    pub query_id: String,
    pub true_class: String,
    pub true_code: Option<IrmaCode>,
    pub predicted_class: String,
    pub top1_id: Option<String>,
    pub top1_code: Option<IrmaCode>,
    /// Present only when both the query and its top-1 match carry codes.
    pub error: Option<f64>,
}

/// Sum of per-query errors over the scored rows.
pub fn total_error(rows: &[RetrievalRow]) -> f64 {
    rows.iter().filter_map(|r| r.error).fold(0.0, |acc, e| acc + e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub rows: Vec<RetrievalRow>,
    pub total_error: f64,
    pub accuracy: f64,
}

impl RetrievalReport {
    pub fn from_rows(rows: Vec<RetrievalRow>) -> Result<Self, EvalError> {
        let predicted: Vec<&str> = rows.iter().map(|r| r.predicted_class.as_str()).collect();
        let truth: Vec<&str> = rows.iter().map(|r| r.true_class.as_str()).collect();
        let accuracy = classification_accuracy(&predicted, &truth)?;
        Ok(Self {
            total_error: total_error(&rows),
            rows,
            accuracy,
        })
    }

    pub fn scored_queries(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// CSV with header `query_id,true_code,predicted_class,top1_id,top1_code,error`
    /// followed by `total_error,<v>` and `accuracy,<v>` summary lines.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let code = |c: &Option<IrmaCode>| c.map(|c| c.to_string()).unwrap_or_default();
        w.write_record(["query_id", "true_code", "predicted_class", "top1_id", "top1_code", "error"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.query_id.clone(),
                code(&r.true_code),
                r.predicted_class.clone(),
                r.top1_id.clone().unwrap_or_default(),
                code(&r.top1_code),
                r.error.map(|e| e.to_string()).unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        w.write_record(["total_error".to_string(), self.total_error.to_string()])
            .expect("in-memory write");
        w.write_record(["accuracy".to_string(), self.accuracy.to_string()])
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
    }
}

/// Distinct-label count per position via hash sets; used to cross-check
/// [`compute_alphabets`].
#[doc(hidden)]
pub fn alphabets_by_sets(corpus: &[IrmaCode]) -> [usize; CODE_LEN] {
    let mut out = [0; CODE_LEN];
    for (p, o) in out.iter_mut().enumerate() {
        let set: HashSet<u8> = corpus.iter().map(|c| c.0[p]).filter(|&b| b != WILDCARD).collect();
        *o = set.len().max(1);
    }
    out
}
