//! Soft-margin RBF support vector machines.
//!
//! Binary machines are trained on the dual problem
//!
//! ```text
//! max  Σ α_i − ½ Σ_i Σ_j α_i α_j y_i y_j k(x_i, x_j)
//! s.t. 0 ≤ α_i ≤ C,  Σ α_i y_i = 0
//! ```
//!
//! with sequential minimal optimization. The working pair is the maximal
//! violating pair: the first index is the largest KKT violator on the "up"
//! side, the second maximizes the error gap `E_j − E_i` on the "low" side.
//! Ties go to the lowest index, so training is reproducible bit for bit.
//!
//! Multi-class prediction combines `K(K−1)/2` pairwise machines by
//! one-against-one voting.

use std::borrow::Cow;

use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::imaging::RadonConfig;

/// Kernel width reported for the original experiments.
pub const DEFAULT_GAMMA: f64 = 0.0359;
/// Soft-margin penalty reported for the original experiments.
pub const DEFAULT_C: f64 = 16.0;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Problems up to this many samples keep the whole Gram matrix in memory.
pub const DENSE_GRAM_LIMIT: usize = 8192;

const MODEL_MAGIC: &[u8; 4] = b"RSVM";
const MODEL_VERSION: u8 = 1;
const MIN_CURVATURE: f64 = 1e-12;
const BOUND_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("invalid hyperparameters: {0}")]
    Params(String),
    #[error("vector dimension {actual} does not match expected {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("{samples} samples but {labels} labels")]
    LengthMismatch { samples: usize, labels: usize },
    #[error("label {0} is not ±1")]
    Label(i8),
    #[error("training needs samples of both labels")]
    SingleClass,
    #[error("training needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("empty class label at sample {0}")]
    EmptyLabel(usize),
    #[error("malformed model file: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
    /// Stop once the maximal violating pair's gap drops to this value.
    pub tolerance: f64,
    /// Budget in passes, one pass being `n` pair updates. `None` means `10·n` passes.
    pub max_passes: Option<u32>,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            gamma: DEFAULT_GAMMA,
            tolerance: DEFAULT_TOLERANCE,
            max_passes: None,
        }
    }
}

impl SvmParams {
    pub fn new(c: f64, gamma: f64) -> Self {
        Self {
            c,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SvmError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.c) {
            return Err(SvmError::Params(format!("C must be positive, got {}", self.c)));
        }
        if !positive(self.gamma) {
            return Err(SvmError::Params(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !positive(self.tolerance) {
            return Err(SvmError::Params(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_passes == Some(0) {
            return Err(SvmError::Params("max_passes must be positive".into()));
        }
        Ok(())
    }

    fn update_budget(&self, n: usize) -> u64 {
        let passes = self.max_passes.map_or(10 * n as u64, u64::from);
        passes.saturating_mul(n as u64)
    }
}

#[inline]
fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

#[inline]
fn kernel_unchecked(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    (-gamma * squared_distance(x, y)).exp()
}

/// `exp(−γ‖x − y‖²)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64, SvmError> {
    if x.len() != y.len() {
        return Err(SvmError::Dimension {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok(kernel_unchecked(x, y, gamma))
}

/// Kernel rows for one training problem.
struct Gram<'a, S> {
    samples: &'a [S],
    gamma: f64,
    dense: Option<Vec<f64>>,
}

impl<'a, S: AsRef<[f64]> + Sync> Gram<'a, S> {
    fn new(samples: &'a [S], gamma: f64) -> Self {
        let n = samples.len();
        let dense = (n <= DENSE_GRAM_LIMIT).then(|| {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                k[i * n + i] = 1.0;
                for j in 0..i {
                    let v = kernel_unchecked(samples[i].as_ref(), samples[j].as_ref(), gamma);
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
            k
        });
        Self {
            samples,
            gamma,
            dense,
        }
    }

    fn row(&self, i: usize) -> Cow<'_, [f64]> {
        let n = self.samples.len();
        match &self.dense {
            Some(k) => Cow::Borrowed(&k[i * n..(i + 1) * n]),
            None => {
                let xi = self.samples[i].as_ref();
                Cow::Owned(
                    self.samples
                        .iter()
                        .enumerate()
                        .map(|(j, xj)| {
                            if i == j {
                                1.0
                            } else {
                                kernel_unchecked(xi, xj.as_ref(), self.gamma)
                            }
                        })
                        .collect(),
                )
            }
        }
    }
}

/// Working state of the SMO loop.
struct SmoState {
    alphas: Vec<f64>,
    /// `u_i − y_i`, the decision error without the bias.
    errors: Vec<f64>,
    updates: u64,
}

/// Raw dual solution, exposed for inspection and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    pub bias: f64,
    /// Dual objective `Σα − ½ αᵀQα` at the returned point.
    pub objective: f64,
    /// Pair updates performed.
    pub updates: u64,
    /// Final maximal violation gap.
    pub gap: f64,
    pub converged: bool,
}

fn in_up(alpha: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && alpha < c) || (y < 0.0 && alpha > 0.0)
}

fn in_low(alpha: f64, y: f64, c: f64) -> bool {
    (y < 0.0 && alpha < c) || (y > 0.0 && alpha > 0.0)
}

fn check_binary_input<S: AsRef<[f64]>>(samples: &[S], labels: &[i8]) -> Result<usize, SvmError> {
    if samples.len() != labels.len() {
        return Err(SvmError::LengthMismatch {
            samples: samples.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
        return Err(SvmError::Label(bad));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(SvmError::SingleClass);
    }
    let dim = samples[0].as_ref().len();
    if let Some(s) = samples.iter().find(|s| s.as_ref().len() != dim) {
        return Err(SvmError::Dimension {
            expected: dim,
            actual: s.as_ref().len(),
        });
    }
    Ok(dim)
}

/// Solves the dual for one binary problem.
pub fn smo_solve<S: AsRef<[f64]> + Sync>(
    samples: &[S],
    labels: &[i8],
    params: &SvmParams,
) -> Result<DualSolution, SvmError> {
    params.validate()?;
    check_binary_input(samples, labels)?;
    let n = samples.len();
    let c = params.c;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let gram = Gram::new(samples, params.gamma);
    let budget = params.update_budget(n);

    let mut state = SmoState {
        alphas: vec![0.0; n],
        errors: y.iter().map(|v| -v).collect(),
        updates: 0,
    };

    let (converged, gap) = loop {
        let mut up: Option<usize> = None;
        let mut low: Option<usize> = None;
        for (t, ((&a, &e), &yt)) in state.alphas.iter().zip(&state.errors).zip(&y).enumerate() {
            if in_up(a, yt, c) && up.is_none_or(|i| e < state.errors[i]) {
                up = Some(t);
            }
            if in_low(a, yt, c) && low.is_none_or(|j| e > state.errors[j]) {
                low = Some(t);
            }
        }
        let (Some(i), Some(j)) = (up, low) else {
            break (true, 0.0);
        };
        let gap = state.errors[j] - state.errors[i];
        if gap <= params.tolerance {
            break (true, gap.max(0.0));
        }
        if state.updates >= budget {
            break (false, gap);
        }

        let row_i = gram.row(i);
        let row_j = gram.row(j);
        let eta = (row_i[i] + row_j[j] - 2.0 * row_i[j]).max(MIN_CURVATURE);
        let (ai, aj) = (state.alphas[i], state.alphas[j]);
        let s = y[i] * y[j];
        let (lo, hi) = if s < 0.0 {
            ((aj - ai).max(0.0), (c + aj - ai).min(c))
        } else {
            ((ai + aj - c).max(0.0), (ai + aj).min(c))
        };
        let aj_new = (aj + y[j] * (state.errors[i] - state.errors[j]) / eta).clamp(lo, hi);
        let ai_new = (ai + s * (aj - aj_new)).clamp(0.0, c);
        let (ai_new, aj_new) = (snap_to_bounds(ai_new, c), snap_to_bounds(aj_new, c));
        let (di, dj) = ((ai_new - ai) * y[i], (aj_new - aj) * y[j]);
        state.alphas[i] = ai_new;
        state.alphas[j] = aj_new;
        for (t, e) in state.errors.iter_mut().enumerate() {
            *e += di * row_i[t] + dj * row_j[t];
        }
        state.updates += 1;
    };

    let bias = compute_bias(&state.alphas, &state.errors, &y, c);
    let objective = state
        .alphas
        .iter()
        .zip(&state.errors)
        .zip(&y)
        .map(|((a, e), yy)| 0.5 * a - 0.5 * a * yy * e)
        .sum();
    Ok(DualSolution {
        alphas: state.alphas,
        bias,
        objective,
        updates: state.updates,
        gap,
        converged,
    })
}

/// Rounding leaves multipliers a few ulps inside the box, which would keep
/// them in the working set with no room to move.
fn snap_to_bounds(alpha: f64, c: f64) -> f64 {
    let eps = c * BOUND_EPS;
    if alpha <= eps {
        0.0
    } else if alpha >= c - eps {
        c
    } else {
        alpha
    }
}

/// Average of `y_i − u_i` over free multipliers, or the midpoint of the
/// feasible interval when every multiplier sits at a bound.
fn compute_bias(alphas: &[f64], errors: &[f64], y: &[f64], c: f64) -> f64 {
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for ((&a, &e), &yy) in alphas.iter().zip(errors).zip(y) {
        let candidate = -e;
        if a > 0.0 && a < c {
            free_sum += candidate;
            free_count += 1;
        } else if (a == 0.0) == (yy > 0.0) {
            // α = 0 with y = +1, or α = C with y = −1
            lower = lower.max(candidate);
        } else {
            upper = upper.min(candidate);
        }
    }
    if free_count > 0 {
        free_sum / free_count as f64
    } else if lower.is_finite() && upper.is_finite() {
        (lower + upper) / 2.0
    } else if lower.is_finite() {
        lower
    } else {
        upper
    }
}

/// A trained two-class machine: `f(x) = b + Σ coef_i k(sv_i, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    support_vectors: Vec<Vec<f64>>,
    coefficients: Vec<f64>,
    bias: f64,
    gamma: f64,
    dim: usize,
    converged: bool,
}

impl BinarySvm {
    pub fn new(
        support_vectors: Vec<Vec<f64>>,
        coefficients: Vec<f64>,
        bias: f64,
        gamma: f64,
        dim: usize,
    ) -> Result<Self, SvmError> {
        if support_vectors.len() != coefficients.len() {
            return Err(SvmError::LengthMismatch {
                samples: support_vectors.len(),
                labels: coefficients.len(),
            });
        }
        if let Some(sv) = support_vectors.iter().find(|sv| sv.len() != dim) {
            return Err(SvmError::Dimension {
                expected: dim,
                actual: sv.len(),
            });
        }
        Ok(Self {
            support_vectors,
            coefficients,
            bias,
            gamma,
            dim,
            converged: true,
        })
    }

    pub fn support_vectors(&self) -> &[Vec<f64>] {
        &self.support_vectors
    }

    /// `α_i y_i` for each support vector.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// False when training hit its update budget before meeting the tolerance.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        if x.len() != self.dim {
            return Err(SvmError::Dimension {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let sum: f64 = self
            .support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(sv, coef)| coef * kernel_unchecked(sv, x, self.gamma))
            .sum();
        Ok(self.bias + sum)
    }

    /// Sign of the decision value, with `sign(0) = +1`.
    pub fn predict(&self, x: &[f64]) -> Result<i8, SvmError> {
        Ok(if self.decision_value(x)? >= 0.0 { 1 } else { -1 })
    }
}

/// Trains one binary machine. Support vectors keep their input order.
pub fn smo_train<S: AsRef<[f64]> + Sync>(
    samples: &[S],
    labels: &[i8],
    params: &SvmParams,
) -> Result<BinarySvm, SvmError> {
    let solution = smo_solve(samples, labels, params)?;
    let dim = samples[0].as_ref().len();
    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for ((sample, &a), &l) in samples.iter().zip(&solution.alphas).zip(labels) {
        if a > 0.0 {
            support_vectors.push(sample.as_ref().to_vec());
            coefficients.push(a * f64::from(l));
        }
    }
    Ok(BinarySvm {
        support_vectors,
        coefficients,
        bias: solution.bias,
        gamma: params.gamma,
        dim,
        converged: solution.converged,
    })
}

/// One pairwise machine of a [`MulticlassSvm`]. Support vectors are stored
/// as indices into the model's shared vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMachine {
    /// Class index receiving `+1` (the lower-ordered label).
    pub positive: usize,
    pub negative: usize,
    pub bias: f64,
    pub support: Vec<(usize, f64)>,
    pub converged: bool,
}

/// One-against-one ensemble over `K` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassSvm {
    labels: Vec<String>,
    machines: Vec<PairMachine>,
    vectors: Vec<Vec<f64>>,
    params: SvmParams,
    dim: usize,
}

/// Per-class vote tally behind a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub label: usize,
    pub votes: Vec<u32>,
    /// Sum of `|decision value|` over the machines each class won.
    pub confidence: Vec<f64>,
}

/// Trains `K(K−1)/2` machines, one per label pair `(i, j)` with `i < j` in
/// sorted label order. Pairs are trained on the ambient rayon pool; results do
/// not depend on the number of threads.
pub fn train_multiclass<S, L>(
    features: &[S],
    class_labels: &[L],
    params: &SvmParams,
) -> Result<MulticlassSvm, SvmError>
where
    S: AsRef<[f64]> + Sync,
    L: AsRef<str>,
{
    params.validate()?;
    if features.len() != class_labels.len() {
        return Err(SvmError::LengthMismatch {
            samples: features.len(),
            labels: class_labels.len(),
        });
    }
    if let Some(i) = class_labels.iter().position(|l| l.as_ref().is_empty()) {
        return Err(SvmError::EmptyLabel(i));
    }
    let mut labels: Vec<String> = class_labels.iter().map(|l| l.as_ref().to_owned()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(SvmError::TooFewClasses(labels.len()));
    }
    let dim = features[0].as_ref().len();
    if let Some(f) = features.iter().find(|f| f.as_ref().len() != dim) {
        return Err(SvmError::Dimension {
            expected: dim,
            actual: f.as_ref().len(),
        });
    }
    let class_of: Vec<usize> = class_labels
        .iter()
        .map(|l| labels.binary_search_by(|p| p.as_str().cmp(l.as_ref())).unwrap())
        .collect();

    let k = labels.len();
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
        .collect();

    let trained: Vec<(PairMachine, Vec<usize>)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let members: Vec<usize> = (0..features.len())
                .filter(|&i| class_of[i] == a || class_of[i] == b)
                .collect();
            let xs: Vec<&[f64]> = members.iter().map(|&i| features[i].as_ref()).collect();
            let ys: Vec<i8> = members
                .iter()
                .map(|&i| if class_of[i] == a { 1 } else { -1 })
                .collect();
            let sol = smo_solve(&xs, &ys, params)?;
            let support: Vec<(usize, f64)> = members
                .iter()
                .zip(&sol.alphas)
                .zip(&ys)
                .filter(|((_, &alpha), _)| alpha > 0.0)
                .map(|((&global, &alpha), &yy)| (global, alpha * f64::from(yy)))
                .collect();
            let used = support.iter().map(|&(g, _)| g).collect();
            Ok((
                PairMachine {
                    positive: a,
                    negative: b,
                    bias: sol.bias,
                    support,
                    converged: sol.converged,
                },
                used,
            ))
        })
        .collect::<Result<_, SvmError>>()?;

    // compact the support vectors into one shared table, in sample order
    let mut used = vec![false; features.len()];
    for (_, members) in &trained {
        for &g in members {
            used[g] = true;
        }
    }
    let mut remap = vec![usize::MAX; features.len()];
    let mut vectors = Vec::new();
    for (g, _) in used.iter().enumerate().filter(|(_, u)| **u) {
        remap[g] = vectors.len();
        vectors.push(features[g].as_ref().to_vec());
    }
    let machines = trained
        .into_iter()
        .map(|(mut m, _)| {
            for s in &mut m.support {
                s.0 = remap[s.0];
            }
            m
        })
        .collect();

    Ok(MulticlassSvm {
        labels,
        machines,
        vectors,
        params: *params,
        dim,
    })
}

impl MulticlassSvm {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn machines(&self) -> &[PairMachine] {
        &self.machines
    }

    pub fn params(&self) -> &SvmParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of distinct training vectors referenced by any machine.
    pub fn support_vector_count(&self) -> usize {
        self.vectors.len()
    }

    pub fn all_converged(&self) -> bool {
        self.machines.iter().all(|m| m.converged)
    }

    /// Materializes one pairwise machine as a standalone [`BinarySvm`].
    pub fn binary_machine(&self, index: usize) -> BinarySvm {
        let m = &self.machines[index];
        BinarySvm {
            support_vectors: m.support.iter().map(|&(v, _)| self.vectors[v].clone()).collect(),
            coefficients: m.support.iter().map(|&(_, c)| c).collect(),
            bias: m.bias,
            gamma: self.params.gamma,
            dim: self.dim,
            converged: m.converged,
        }
    }

    /// Decision value of every pairwise machine, in machine order.
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>, SvmError> {
        if x.len() != self.dim {
            return Err(SvmError::Dimension {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let kernel: Vec<f64> = self
            .vectors
            .iter()
            .map(|v| kernel_unchecked(v, x, self.params.gamma))
            .collect();
        Ok(self
            .machines
            .iter()
            .map(|m| m.bias + m.support.iter().map(|&(v, c)| c * kernel[v]).sum::<f64>())
            .collect())
    }

    /// Majority vote. Ties go to the larger summed `|decision value|` over the
    /// machines each tied class won, then to the lower label.
    pub fn vote(&self, x: &[f64]) -> Result<Vote, SvmError> {
        let values = self.decision_values(x)?;
        let k = self.labels.len();
        let mut votes = vec![0u32; k];
        let mut confidence = vec![0.0; k];
        for (m, &v) in self.machines.iter().zip(&values) {
            let winner = if v >= 0.0 { m.positive } else { m.negative };
            votes[winner] += 1;
            confidence[winner] += v.abs();
        }
        let mut label = 0;
        for c in 1..k {
            if votes[c] > votes[label] || (votes[c] == votes[label] && confidence[c] > confidence[label]) {
                label = c;
            }
        }
        Ok(Vote {
            label,
            votes,
            confidence,
        })
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<&str, SvmError> {
        let vote = self.vote(x)?;
        Ok(&self.labels[vote.label])
    }

    /// Serializes the model together with the Radon layout its features use.
    ///
    /// Layout (little-endian): `"RSVM"`, version `u8`, `n_p u16`, `N u16`,
    /// `C f64`, `gamma f64`, `tolerance f64`, `max_passes u32` (0 = default),
    /// `dim u32`, label count `u32` then `u16`-prefixed UTF-8 labels, vector
    /// count `u32` then `dim` f64 per vector, machine count `u32` then per
    /// machine `positive u32`, `negative u32`, `converged u8`, `bias f64`,
    /// support count `u32`, and `(vector index u32, coefficient f64)` pairs.
    pub fn to_bytes(&self, layout: &RadonConfig) -> Result<Vec<u8>, SvmError> {
        if layout.feature_len() != self.dim {
            return Err(SvmError::Dimension {
                expected: self.dim,
                actual: layout.feature_len(),
            });
        }
        if let Some(l) = self.labels.iter().find(|l| l.len() > u16::MAX as usize) {
            return Err(SvmError::Params(format!("class label too long: {} bytes", l.len())));
        }
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        w.u8(MODEL_VERSION);
        w.u16(layout.projections() as u16);
        w.u16(layout.side() as u16);
        w.f64(self.params.c);
        w.f64(self.params.gamma);
        w.f64(self.params.tolerance);
        w.u32(self.params.max_passes.unwrap_or(0));
        w.u32(self.dim as u32);
        w.u32(self.labels.len() as u32);
        for l in &self.labels {
            w.string(l);
        }
        w.u32(self.vectors.len() as u32);
        for v in &self.vectors {
            for &x in v {
                w.f64(x);
            }
        }
        w.u32(self.machines.len() as u32);
        for m in &self.machines {
            w.u32(m.positive as u32);
            w.u32(m.negative as u32);
            w.u8(u8::from(m.converged));
            w.f64(m.bias);
            w.u32(m.support.len() as u32);
            for &(v, c) in &m.support {
                w.u32(v as u32);
                w.f64(c);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, RadonConfig), SvmError> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let at = r.offset();
        let projections = r.u16("projection count")? as usize;
        let side = r.u16("side")? as usize;
        let layout = RadonConfig::new(projections, side)
            .map_err(|e| r.invalid(at, "Radon layout", e.to_string()))?;
        let at = r.offset();
        let max_passes_raw;
        let params = SvmParams {
            c: r.f64("C")?,
            gamma: r.f64("gamma")?,
            tolerance: r.f64("tolerance")?,
            max_passes: {
                max_passes_raw = r.u32("max passes")?;
                (max_passes_raw != 0).then_some(max_passes_raw)
            },
        };
        params
            .validate()
            .map_err(|e| r.invalid(at, "hyperparameters", e.to_string()))?;
        let at = r.offset();
        let dim = r.u32("dimension")? as usize;
        if dim != layout.feature_len() {
            return Err(r
                .invalid(at, "dimension", format!("{dim} does not match {layout}"))
                .into());
        }
        let at = r.offset();
        let k = r.u32("label count")? as usize;
        if k < 2 {
            return Err(r.invalid(at, "label count", format!("{k} < 2")).into());
        }
        let mut labels = Vec::with_capacity(k.min(4096));
        for _ in 0..k {
            labels.push(r.string("class label")?);
        }
        if labels.windows(2).any(|p| p[0] >= p[1]) {
            return Err(r.invalid(at, "label table", "labels not strictly sorted").into());
        }
        let nv = r.u32("vector count")? as usize;
        let mut vectors = Vec::with_capacity(nv.min(1 << 16));
        for _ in 0..nv {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.f64("support vector")?);
            }
            vectors.push(v);
        }
        let at = r.offset();
        let nm = r.u32("machine count")? as usize;
        if nm != k * (k - 1) / 2 {
            return Err(r
                .invalid(at, "machine count", format!("{nm} machines for {k} classes"))
                .into());
        }
        let mut machines = Vec::with_capacity(nm);
        for a in 0..k {
            for b in a + 1..k {
                let at = r.offset();
                let positive = r.u32("machine pair")? as usize;
                let negative = r.u32("machine pair")? as usize;
                if (positive, negative) != (a, b) {
                    return Err(r
                        .invalid(at, "machine pair", format!("expected ({a}, {b}), found ({positive}, {negative})"))
                        .into());
                }
                let converged = r.u8("convergence flag")? != 0;
                let bias = r.f64("bias")?;
                let ns = r.u32("support count")? as usize;
                let mut support = Vec::with_capacity(ns.min(nv));
                for _ in 0..ns {
                    let at = r.offset();
                    let v = r.u32("support index")? as usize;
                    if v >= nv {
                        return Err(r.invalid(at, "support index", format!("{v} >= {nv}")).into());
                    }
                    support.push((v, r.f64("coefficient")?));
                }
                machines.push(PairMachine {
                    positive,
                    negative,
                    bias,
                    support,
                    converged,
                });
            }
        }
        r.finish()?;
        Ok((
            Self {
                labels,
                machines,
                vectors,
                params,
                dim,
            },
            layout,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn tight() -> SvmParams {
        SvmParams {
            tolerance: 1e-9,
            ..SvmParams::new(16.0, 0.5)
        }
    }

    #[test]
    fn kernel_values() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(rbf_kernel(&x, &x, 0.7).unwrap(), 1.0);
        let y = [1.0, 0.0, 2.0];
        assert_eq!(rbf_kernel(&x, &y, 0.7).unwrap(), rbf_kernel(&y, &x, 0.7).unwrap());
        let k = rbf_kernel(&[0.0], &[1.0], DEFAULT_GAMMA).unwrap();
        assert!((k - 0.964737).abs() < 1e-6);
        assert_eq!(k, (-0.0359_f64).exp());
        assert!(matches!(
            rbf_kernel(&[0.0], &[1.0, 2.0], 1.0),
            Err(SvmError::Dimension { .. })
        ));
    }

    #[test]
    fn params_are_validated() {
        assert!(SvmParams::new(0.0, 1.0).validate().is_err());
        assert!(SvmParams::new(1.0, -1.0).validate().is_err());
        let p = SvmParams {
            max_passes: Some(0),
            ..SvmParams::default()
        };
        assert!(p.validate().is_err());
        assert!(SvmParams::default().validate().is_ok());
    }

    #[test]
    fn symmetric_two_point_problem() {
        let xs = [[-1.0], [1.0]];
        let m = smo_train(&xs, &[-1, 1], &SvmParams::new(1e6, 0.5)).unwrap();
        assert!(m.decision_value(&[0.0]).unwrap().abs() < 1e-12);
        assert_eq!(m.predict(&[0.3]).unwrap(), 1);
        assert_eq!(m.predict(&[-0.3]).unwrap(), -1);
        assert!(m.decision_value(&[1.0]).unwrap() > 0.0);
        // sign(0) = +1
        assert_eq!(m.predict(&[0.0]).unwrap(), 1);
        assert!(m.converged());
    }

    #[test]
    fn empty_machine_is_its_bias() {
        let m = BinarySvm::new(vec![], vec![], 0.5, 1.0, 3).unwrap();
        assert_eq!(m.decision_value(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert!(m.decision_value(&[1.0]).is_err());
    }

    #[test]
    fn decision_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let svs: Vec<Vec<f64>> = (0..7).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let coefs: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = BinarySvm::new(svs.clone(), coefs.clone(), -0.25, 0.3, 4).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut acc = -0.25;
            for i in 0..7 {
                let mut d = 0.0;
                for t in 0..4 {
                    d += (svs[i][t] - x[t]) * (svs[i][t] - x[t]);
                }
                acc += coefs[i] * (-0.3 * d).exp();
            }
            assert!((m.decision_value(&x).unwrap() - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn training_errors() {
        let xs = [[0.0], [1.0]];
        assert!(matches!(smo_train(&xs, &[1, 1], &SvmParams::default()), Err(SvmError::SingleClass)));
        assert!(matches!(smo_train(&xs, &[1, 0], &SvmParams::default()), Err(SvmError::Label(0))));
        assert!(matches!(smo_train(&xs, &[1], &SvmParams::default()), Err(SvmError::LengthMismatch { .. })));
        let ragged: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0, 2.0]];
        assert!(matches!(smo_train(&ragged, &[1, -1], &SvmParams::default()), Err(SvmError::Dimension { .. })));
    }

    fn noisy_problem(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<i8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let label: i8 = if i % 2 == 0 { 1 } else { -1 };
            let shift = f64::from(label) * 0.6;
            xs.push(vec![rng.random_range(-1.0..1.0) + shift, rng.random_range(-1.0..1.0)]);
            ys.push(label);
        }
        (xs, ys)
    }

    #[test]
    fn flipping_labels_negates_decisions() {
        let (xs, ys) = noisy_problem(4, 30);
        let flipped: Vec<i8> = ys.iter().map(|y| -y).collect();
        let a = smo_train(&xs, &ys, &tight()).unwrap();
        let b = smo_train(&xs, &flipped, &tight()).unwrap();
        for x in &xs {
            let (va, vb) = (a.decision_value(x).unwrap(), b.decision_value(x).unwrap());
            assert!((va + vb).abs() < 1e-6, "{va} vs {vb}");
        }
    }

    #[test]
    fn dual_feasibility_and_kkt() {
        for seed in 0..10 {
            let (xs, ys) = noisy_problem(seed, 40);
            let params = SvmParams::new(2.0, 0.8);
            let sol = smo_solve(&xs, &ys, &params).unwrap();
            assert!(sol.converged, "seed {seed}: gap {} after {} updates", sol.gap, sol.updates);
            let balance: f64 = sol.alphas.iter().zip(&ys).map(|(a, &y)| a * f64::from(y)).sum();
            assert!(balance.abs() <= 1e-9, "Σαy = {balance}");
            let m = smo_train(&xs, &ys, &params).unwrap();
            for ((x, &y), &a) in xs.iter().zip(&ys).zip(&sol.alphas) {
                assert!((0.0..=params.c).contains(&a));
                let margin = f64::from(y) * m.decision_value(x).unwrap();
                if a == 0.0 {
                    assert!(margin >= 1.0 - params.tolerance, "seed {seed}: margin {margin}");
                }
                if margin < 1.0 - params.tolerance {
                    assert_eq!(a, params.c);
                }
                if a > 0.0 && a < params.c {
                    assert!((margin - 1.0).abs() <= params.tolerance);
                }
            }
        }
    }

    #[test]
    fn duplicating_samples_with_half_c_keeps_decisions() {
        let (xs, ys) = noisy_problem(21, 16);
        let params = SvmParams {
            tolerance: 1e-10,
            ..SvmParams::new(4.0, 0.7)
        };
        let single = smo_train(&xs, &ys, &params).unwrap();
        let doubled_x: Vec<Vec<f64>> = xs.iter().chain(&xs).cloned().collect();
        let doubled_y: Vec<i8> = ys.iter().chain(&ys).copied().collect();
        let halved = SvmParams { c: 2.0, ..params };
        let double = smo_train(&doubled_x, &doubled_y, &halved).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (a, b) = (single.decision_value(&x).unwrap(), double.decision_value(&x).unwrap());
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let (xs, ys) = noisy_problem(2, 40);
        let params = SvmParams {
            max_passes: Some(1),
            tolerance: 1e-12,
            ..SvmParams::new(100.0, 2.0)
        };
        let sol = smo_solve(&xs, &ys, &params).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.updates, 40);
        assert!(!smo_train(&xs, &ys, &params).unwrap().converged());
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = noisy_problem(8, 50);
        let a = smo_solve(&xs, &ys, &SvmParams::default()).unwrap();
        let b = smo_solve(&xs, &ys, &SvmParams::default()).unwrap();
        assert_eq!(a, b);
    }

    fn blobs(seed: u64, k: usize, per_class: usize, sigma: f64) -> (Vec<Vec<f64>>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut xs = Vec::new();
        let mut ls = Vec::new();
        for c in 0..k {
            let angle = c as f64 * std::f64::consts::TAU / k as f64;
            let center = [4.0 * angle.cos(), 4.0 * angle.sin()];
            for _ in 0..per_class {
                xs.push(vec![center[0] + noise.sample(&mut rng), center[1] + noise.sample(&mut rng)]);
                ls.push(format!("class-{c}"));
            }
        }
        (xs, ls)
    }

    #[test]
    fn pair_counts() {
        let (xs, ls) = blobs(1, 2, 5, 0.3);
        assert_eq!(train_multiclass(&xs, &ls, &SvmParams::default()).unwrap().machines().len(), 1);
        let k = 57usize;
        assert_eq!(k * (k - 1) / 2, 1596);
        let (xs, ls) = blobs(2, 5, 4, 0.3);
        let m = train_multiclass(&xs, &ls, &SvmParams::default()).unwrap();
        assert_eq!(m.machines().len(), 10);
        let pairs: Vec<(usize, usize)> = m.machines().iter().map(|p| (p.positive, p.negative)).collect();
        assert_eq!(pairs[..4], [(0, 1), (0, 2), (0, 3), (0, 4)]);
    }

    #[test]
    fn three_blobs_are_learned() {
        let (xs, ls) = blobs(3, 3, 50, 0.7);
        let m = train_multiclass(&xs, &ls, &SvmParams::new(16.0, 0.5)).unwrap();
        let correct = xs
            .iter()
            .zip(&ls)
            .filter(|(x, l)| m.predict_class(x).unwrap() == l.as_str())
            .count();
        assert_eq!(correct, 150);
        let (tx, tl) = blobs(33, 3, 50, 0.7);
        let correct = tx
            .iter()
            .zip(&tl)
            .filter(|(x, l)| m.predict_class(x).unwrap() == l.as_str())
            .count();
        assert!(correct as f64 / 150.0 >= 0.95, "{correct}/150");
    }

    #[test]
    fn two_class_prediction_is_the_machine_sign() {
        let (xs, ls) = blobs(5, 2, 20, 1.5);
        let m = train_multiclass(&xs, &ls, &SvmParams::new(16.0, 0.5)).unwrap();
        let binary = m.binary_machine(0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            let expected = if binary.predict(&x).unwrap() > 0 { "class-0" } else { "class-1" };
            assert_eq!(m.predict_class(&x).unwrap(), expected);
            assert_eq!(m.decision_values(&x).unwrap()[0], binary.decision_value(&x).unwrap());
        }
    }

    #[test]
    fn unanimous_vote_wins() {
        let (xs, ls) = blobs(7, 4, 15, 0.3);
        let m = train_multiclass(&xs, &ls, &SvmParams::new(16.0, 0.5)).unwrap();
        let vote = m.vote(&xs[20]).unwrap();
        assert_eq!(vote.votes[vote.label], 3);
        assert_eq!(m.labels()[vote.label], ls[20]);
    }

    #[test]
    fn vote_ties_break_on_confidence_then_order() {
        // three machines voting in a cycle: every class gets one vote
        let model = MulticlassSvm {
            labels: vec!["a".into(), "b".into(), "c".into()],
            machines: vec![
                PairMachine { positive: 0, negative: 1, bias: 0.5, support: vec![], converged: true },
                PairMachine { positive: 0, negative: 2, bias: -2.0, support: vec![], converged: true },
                PairMachine { positive: 1, negative: 2, bias: 1.0, support: vec![], converged: true },
            ],
            vectors: vec![],
            params: SvmParams::default(),
            dim: 1,
        };
        let vote = model.vote(&[0.0]).unwrap();
        assert_eq!(vote.votes, vec![1, 1, 1]);
        assert_eq!(vote.label, 2);
        let mut even = model.clone();
        even.machines[1].bias = -1.0;
        even.machines[0].bias = 1.0;
        // a: 1.0, b: 1.0, c: 1.0 -> label order
        assert_eq!(even.vote(&[0.0]).unwrap().label, 0);
    }

    #[test]
    fn multiclass_errors() {
        let xs = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            train_multiclass(&xs, &["a", "a"], &SvmParams::default()),
            Err(SvmError::TooFewClasses(1))
        ));
        assert!(matches!(
            train_multiclass(&xs, &["a", ""], &SvmParams::default()),
            Err(SvmError::EmptyLabel(1))
        ));
        let m = train_multiclass(&xs, &["a", "b"], &SvmParams::default()).unwrap();
        assert!(matches!(m.predict_class(&[0.0, 1.0]), Err(SvmError::Dimension { .. })));
    }

    #[test]
    fn training_ignores_thread_count() {
        let (xs, ls) = blobs(8, 5, 20, 1.0);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train_multiclass(&xs, &ls, &SvmParams::new(16.0, 0.5)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn model_round_trip_and_corruption() {
        let (xs, ls) = blobs(9, 3, 6, 0.5);
        let xs: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0], x[1], 0.0, 1.0]).collect();
        let m = train_multiclass(&xs, &ls, &SvmParams::default()).unwrap();
        let layout = RadonConfig::new(2, 2).unwrap();
        let bytes = m.to_bytes(&layout).unwrap();
        assert_eq!(&bytes[..4], b"RSVM");
        assert_eq!(bytes[4], 1);
        let (back, back_layout) = MulticlassSvm::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_layout, layout);

        for cut in [0, 3, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(MulticlassSvm::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            MulticlassSvm::from_bytes(&bad),
            Err(SvmError::Decode(DecodeError::Magic { .. }))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            MulticlassSvm::from_bytes(&bad),
            Err(SvmError::Decode(DecodeError::Version { offset: 4, found: 9, .. }))
        ));
        assert!(m.to_bytes(&RadonConfig::new(3, 2).unwrap()).is_err());
    }
}
