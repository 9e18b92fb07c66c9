//! Expected embedding objectives under independent label noise.
//!
//! Every sample `i` carries a true set `A_c`. Its observed label is `c` with
//! probability `p` and each of the other `t − 1` labels with probability
//! `q' = (1 − p)/(t − 1)`, independently of the other samples. Because of the
//! independence, all expectations factor into per-class sums of products of
//! the per-sample probabilities; [`enumerate_expected_objective`] computes the
//! same quantities by brute force over every label assignment.
//!
//! Sums run over distinct indices only (`i ≠ j`, and `k ∉ {i, j}` for
//! triplets).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{neighbor_order, pairwise_sq_dist, DistanceMatrix, EmbeddingSet, NeighborOrder};
use crate::losses::hinge;
use crate::par;

/// Largest label-assignment space the enumeration oracle accepts.
pub const MAX_ENUMERATION_STATES: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyLabelModel {
    partition: Vec<usize>,
    t: usize,
    p: f64,
}

impl NoisyLabelModel {
    /// Model over `partition` (sample → true set) with equal set sizes.
    pub fn new(partition: Vec<usize>, t: usize, p: f64) -> Result<Self> {
        let model = Self::from_assignment(partition, t, p)?;
        let n = model.n();
        if n % t != 0 {
            return Err(Error::precondition(format!("t = {t} does not divide n = {n}")));
        }
        for c in 0..t {
            let size = model.partition.iter().filter(|&&a| a == c).count();
            if size != n / t {
                return Err(Error::precondition(format!("set A_{c} has {size} samples, expected {}", n / t)));
            }
        }
        Ok(model)
    }

    /// Model over an arbitrary assignment; set sizes may differ.
    pub fn from_assignment(partition: Vec<usize>, t: usize, p: f64) -> Result<Self> {
        if t < 2 {
            return Err(Error::precondition(format!("need at least two classes, got {t}")));
        }
        if partition.len() < 2 {
            return Err(Error::precondition("need at least two samples"));
        }
        if let Some(&c) = partition.iter().find(|&&c| c >= t) {
            return Err(Error::invalid(format!("set index {c} out of range for t = {t}")));
        }
        // p = 1 is the clean limit and is accepted.
        if !(p > 0.5 && p <= 1.0) {
            return Err(Error::invalid(format!("confidence p must lie in (0.5, 1], got {p}")));
        }
        Ok(Self { partition, t, p })
    }

    /// `n/t` consecutive samples per set: sample `i` belongs to `A_{i / (n/t)}`.
    pub fn contiguous(n: usize, t: usize, p: f64) -> Result<Self> {
        if t == 0 || !n.is_multiple_of(t) {
            return Err(Error::precondition(format!("t = {t} does not divide n = {n}")));
        }
        Self::new((0..n).map(|i| i / (n / t)).collect(), t, p)
    }

    pub fn n(&self) -> usize {
        self.partition.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `q' = (1 − p)/(t − 1)`.
    pub fn q(&self) -> f64 {
        (1.0 - self.p) / (self.t - 1) as f64
    }

    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    /// `P(Y_i = c)`.
    #[inline]
    pub fn prob(&self, i: usize, c: usize) -> f64 {
        if self.partition[i] == c {
            self.p
        } else {
            self.q()
        }
    }

    fn check(&self, idx: &[usize]) -> Result<()> {
        for &i in idx {
            if i >= self.n() {
                return Err(Error::IndexOutOfRange { index: i, len: self.n() });
            }
        }
        for (a, i) in idx.iter().enumerate() {
            if idx[a + 1..].contains(i) {
                return Err(Error::DuplicateIndex(idx.to_vec()));
            }
        }
        Ok(())
    }
}

/// `P(Y_i = Y_j) = Σ_c P_i(c) P_j(c)`.
pub fn pair_same_prob(model: &NoisyLabelModel, i: usize, j: usize) -> Result<f64> {
    model.check(&[i, j])?;
    Ok(same_prob(model, i, j))
}

fn same_prob(model: &NoisyLabelModel, i: usize, j: usize) -> f64 {
    (0..model.t).map(|c| model.prob(i, c) * model.prob(j, c)).sum()
}

/// `E[δ(Y_i, Y_j)·(1 − δ(Y_i, Y_k))] = Σ_c P_i(c) P_j(c) (1 − P_k(c))`.
pub fn triplet_coeff(model: &NoisyLabelModel, i: usize, j: usize, k: usize) -> Result<f64> {
    model.check(&[i, j, k])?;
    Ok(trip_coeff(model, i, j, k))
}

fn trip_coeff(model: &NoisyLabelModel, i: usize, j: usize, k: usize) -> f64 {
    (0..model.t).map(|c| model.prob(i, c) * model.prob(j, c) * (1.0 - model.prob(k, c))).sum()
}

/// Probability that `j` is the easy positive of anchor `i` (same label as
/// `i`, and no sample ranked before `j` shares it). With `k`, additionally
/// requires `Y_k ≠ Y_i`; when `k` is itself ranked before `j` that event is
/// already implied.
pub fn eps_coeff(model: &NoisyLabelModel, order: &NeighborOrder, i: usize, j: usize, k: Option<usize>) -> Result<f64> {
    match k {
        Some(k) => model.check(&[i, j, k])?,
        None => model.check(&[i, j])?,
    }
    if order.len() != model.n() {
        return Err(Error::Shape {
            expected: format!("order over {} samples", model.n()),
            actual: order.len().to_string(),
        });
    }
    let closer = order.closer(i, j);
    let k_in_closer = k.is_some_and(|k| order.rank(i, k) < order.rank(i, j));
    let mut total = 0.0;
    for c in 0..model.t {
        let mut term = model.prob(i, c) * model.prob(j, c);
        for &s in closer {
            term *= 1.0 - model.prob(s, c);
        }
        if let (Some(k), false) = (k, k_in_closer) {
            term *= 1.0 - model.prob(k, c);
        }
        total += term;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Trip,
    Margin,
    EpsTrip,
    EpsMargin,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Trip, Objective::Margin, Objective::EpsTrip, Objective::EpsMargin];

    pub fn is_eps(self) -> bool {
        matches!(self, Objective::EpsTrip | Objective::EpsMargin)
    }

    pub fn uses_beta(self) -> bool {
        matches!(self, Objective::Margin | Objective::EpsMargin)
    }

    /// Normalising constant applied to the raw sum: `1/n³`, `1/n²` or `1/n`.
    pub fn scale(self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            Objective::Trip => 1.0 / (n * n * n),
            Objective::Margin => 1.0 / (n * n),
            Objective::EpsTrip | Objective::EpsMargin => 1.0 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedObjectiveSpec {
    pub objective: Objective,
    pub alpha: f64,
    /// Per-sample margin boundaries; ignored by the triplet objectives.
    pub beta: Vec<f64>,
}

impl ExpectedObjectiveSpec {
    /// Spec with every boundary set to `beta`.
    pub fn new(objective: Objective, alpha: f64, beta: f64, n: usize) -> Self {
        Self { objective, alpha, beta: vec![beta; n] }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.objective.uses_beta() && self.beta.len() != n {
            return Err(Error::Shape { expected: format!("{n} betas"), actual: self.beta.len().to_string() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub value: f64,
    pub grad: Array2<f64>,
    pub beta_grad: Vec<f64>,
}

/// Per-anchor contribution: value, `∂/∂D_ij` weights and `∂/∂β_i`.
struct AnchorTerms {
    value: f64,
    dd: Vec<f64>,
    dbeta: f64,
}

struct Prepared<'a> {
    model: &'a NoisyLabelModel,
    spec: &'a ExpectedObjectiveSpec,
    dm: DistanceMatrix,
    order: Option<NeighborOrder>,
    tau: f64,
}

/// Hinge value and slope. With `tau > 0` the kink is replaced by the
/// quadratic `(x + τ)²/(4τ)` on `|x| < τ`.
#[inline]
fn hinge_parts(x: f64, tau: f64) -> (f64, f64) {
    if tau > 0.0 && x.abs() < tau {
        ((x + tau) * (x + tau) / (4.0 * tau), (x + tau) / (2.0 * tau))
    } else if x > 0.0 {
        (x, 1.0)
    } else {
        (0.0, 0.0)
    }
}

fn prepare<'a>(
    emb: &EmbeddingSet,
    model: &'a NoisyLabelModel,
    spec: &'a ExpectedObjectiveSpec,
) -> Result<Prepared<'a>> {
    if emb.len() != model.n() {
        return Err(Error::Shape { expected: format!("{} samples", model.n()), actual: emb.len().to_string() });
    }
    spec.validate(model.n())?;
    let dm = pairwise_sq_dist(emb)?;
    let order = spec.objective.is_eps().then(|| neighbor_order(&dm));
    Ok(Prepared { model, spec, dm, order, tau: 0.0 })
}

impl Prepared<'_> {
    fn anchor(&self, i: usize) -> AnchorTerms {
        let n = self.model.n();
        let t = self.model.t;
        let alpha = self.spec.alpha;
        let d = |a: usize, b: usize| self.dm.get(a, b);
        let mut out = AnchorTerms { value: 0.0, dd: vec![0.0; n], dbeta: 0.0 };
        match self.spec.objective {
            Objective::Trip => {
                for j in (0..n).filter(|&j| j != i) {
                    for k in (0..n).filter(|&k| k != i && k != j) {
                        let (h, slope) = hinge_parts(d(i, j) - d(i, k) + alpha, self.tau);
                        if slope > 0.0 {
                            let c = trip_coeff(self.model, i, j, k);
                            out.value += c * h;
                            out.dd[j] += c * slope;
                            out.dd[k] -= c * slope;
                        }
                    }
                }
            }
            Objective::Margin => {
                let beta = self.spec.beta[i];
                for j in (0..n).filter(|&j| j != i) {
                    let s = same_prob(self.model, i, j);
                    self.margin_pair(&mut out, i, j, s, 1.0 - s, beta);
                }
            }
            Objective::EpsTrip | Objective::EpsMargin => {
                let order = self.order.as_ref().expect("eps objectives carry an order");
                let seq = order.of(i);
                // prefix[c] = Π over samples ranked before the current j of (1 − P_s(c)).
                let mut prefix = vec![1.0; t];
                let mut base = vec![vec![0.0; t]; n];
                for &j in seq {
                    for c in 0..t {
                        base[j][c] = self.model.prob(i, c) * self.model.prob(j, c) * prefix[c];
                        prefix[c] *= 1.0 - self.model.prob(j, c);
                    }
                }
                if self.spec.objective == Objective::EpsTrip {
                    for &j in seq {
                        let rj = order.rank(i, j);
                        for &k in seq {
                            if k == j {
                                continue;
                            }
                            let (h, slope) = hinge_parts(d(i, j) - d(i, k) + alpha, self.tau);
                            if slope == 0.0 {
                                continue;
                            }
                            let c: f64 = if order.rank(i, k) < rj {
                                base[j].iter().sum()
                            } else {
                                (0..t).map(|c| base[j][c] * (1.0 - self.model.prob(k, c))).sum()
                            };
                            out.value += c * h;
                            out.dd[j] += c * slope;
                            out.dd[k] -= c * slope;
                        }
                    }
                } else {
                    let beta = self.spec.beta[i];
                    for &j in seq {
                        let pos: f64 = base[j].iter().sum();
                        let neg = 1.0 - same_prob(self.model, i, j);
                        self.margin_pair(&mut out, i, j, pos, neg, beta);
                    }
                }
            }
        }
        out
    }

    fn margin_pair(&self, out: &mut AnchorTerms, i: usize, j: usize, pos: f64, neg: f64, beta: f64) {
        let alpha = self.spec.alpha;
        let i_dist = self.dm.get(i, j);
        let (h, slope) = hinge_parts(i_dist - beta + alpha, self.tau);
        if slope > 0.0 {
            out.value += pos * h;
            out.dd[j] += pos * slope;
            out.dbeta -= pos * slope;
        }
        let (h, slope) = hinge_parts(beta - i_dist + alpha, self.tau);
        if slope > 0.0 {
            out.value += neg * h;
            out.dd[j] -= neg * slope;
            out.dbeta += neg * slope;
        }
    }
}

fn anchor_terms(prep: &Prepared<'_>) -> Vec<AnchorTerms> {
    par::map_range(prep.model.n(), |i| prep.anchor(i))
}

/// Closed-form expected objective.
pub fn expected_objective(emb: &EmbeddingSet, model: &NoisyLabelModel, spec: &ExpectedObjectiveSpec) -> Result<f64> {
    let prep = prepare(emb, model, spec)?;
    let raw: f64 = anchor_terms(&prep).iter().map(|a| a.value).sum();
    Ok(raw * spec.objective.scale(model.n()))
}

/// Expected objective with its gradient w.r.t. coordinates and β. For the
/// easy-positive objectives the neighbor order is held fixed, which is exact
/// away from distance ties.
pub fn expected_objective_grad(
    emb: &EmbeddingSet,
    model: &NoisyLabelModel,
    spec: &ExpectedObjectiveSpec,
) -> Result<ObjectiveGrad> {
    smoothed_objective_grad(emb, model, spec, 0.0)
}

/// Same as [`expected_objective_grad`] with every hinge smoothed over a
/// window of half-width `tau` around its kink; `tau = 0` is the exact
/// objective. Optimizers use it for search directions near kinks.
pub fn smoothed_objective_grad(
    emb: &EmbeddingSet,
    model: &NoisyLabelModel,
    spec: &ExpectedObjectiveSpec,
    tau: f64,
) -> Result<ObjectiveGrad> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("smoothing width must be non-negative, got {tau}")));
    }
    let mut prep = prepare(emb, model, spec)?;
    prep.tau = tau;
    let terms = anchor_terms(&prep);
    let scale = spec.objective.scale(model.n());
    let (n, m) = (emb.len(), emb.dim());
    let mut grad = Array2::zeros((n, m));
    let mut beta_grad = vec![0.0; n];
    let mut value = 0.0;
    for (i, a) in terms.iter().enumerate() {
        value += a.value;
        beta_grad[i] = a.dbeta * scale;
        for (j, &w) in a.dd.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for k in 0..m {
                let g = 2.0 * w * scale * (emb.row(i)[k] - emb.row(j)[k]);
                grad[[i, k]] += g;
                grad[[j, k]] -= g;
            }
        }
    }
    Ok(ObjectiveGrad { value: value * scale, grad, beta_grad })
}

/// Brute-force expectation: sums the literal objective over all `t^n` label
/// assignments weighted by their probability.
pub fn enumerate_expected_objective(
    emb: &EmbeddingSet,
    model: &NoisyLabelModel,
    spec: &ExpectedObjectiveSpec,
) -> Result<f64> {
    let (n, t) = (model.n(), model.t);
    let states_f = (t as f64).powi(n as i32);
    if states_f > MAX_ENUMERATION_STATES {
        return Err(Error::StateSpaceTooLarge { states: states_f, limit: MAX_ENUMERATION_STATES });
    }
    let prep = prepare(emb, model, spec)?;
    let states = states_f as usize;
    let alpha = spec.alpha;
    let d = |a: usize, b: usize| prep.dm.get(a, b);

    let chunks = states.min(64);
    let per_chunk = states.div_ceil(chunks);
    let partials = par::map_range(chunks, |chunk| {
        let mut y = vec![0usize; n];
        let mut acc = 0.0;
        for s in chunk * per_chunk..((chunk + 1) * per_chunk).min(states) {
            let mut rest = s;
            let mut w = 1.0;
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = rest % t;
                rest /= t;
                w *= model.prob(i, *yi);
            }
            if w == 0.0 {
                continue;
            }
            acc += w * literal_objective(&y, &prep, alpha, &d);
        }
        acc
    });
    Ok(partials.iter().sum::<f64>() * spec.objective.scale(n))
}

fn literal_objective(y: &[usize], prep: &Prepared<'_>, alpha: f64, d: &impl Fn(usize, usize) -> f64) -> f64 {
    let n = y.len();
    let mut v = 0.0;
    match prep.spec.objective {
        Objective::Trip => {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i && y[j] == y[i]) {
                    for k in (0..n).filter(|&k| k != i && k != j && y[k] != y[i]) {
                        v += hinge(d(i, j) - d(i, k) + alpha);
                    }
                }
            }
        }
        Objective::Margin => {
            for i in 0..n {
                let b = prep.spec.beta[i];
                for j in (0..n).filter(|&j| j != i) {
                    v += if y[i] == y[j] { hinge(d(i, j) - b + alpha) } else { hinge(b - d(i, j) + alpha) };
                }
            }
        }
        Objective::EpsTrip | Objective::EpsMargin => {
            let order = prep.order.as_ref().unwrap();
            for i in 0..n {
                // The easy positive is the first sample in i's order sharing its label.
                let easy = order.of(i).iter().copied().find(|&j| y[j] == y[i]);
                if prep.spec.objective == Objective::EpsTrip {
                    if let Some(j) = easy {
                        for k in (0..n).filter(|&k| k != i && k != j && y[k] != y[i]) {
                            v += hinge(d(i, j) - d(i, k) + alpha);
                        }
                    }
                } else {
                    let b = prep.spec.beta[i];
                    if let Some(j) = easy {
                        v += hinge(d(i, j) - b + alpha);
                    }
                    for j in (0..n).filter(|&j| j != i && y[j] != y[i]) {
                        v += hinge(b - d(i, j) + alpha);
                    }
                }
            }
        }
    }
    v
}

/// Collapsed (`f1`) and two-mode (`f2`) reference embeddings in `R²` for
/// `t = 2` contiguous sets.
///
/// `f1` places each set on one cluster, the clusters at squared distance
/// `α`. `f2` additionally splits the first set at `n/(2t)` into two
/// half-clusters; the three clusters sit on a triangle with squared sides
/// close to `α`, the two halves slightly closer to each other (side
/// `√α − jitter`) so they rank before the other class. Inside a cluster,
/// sample `k` of `s` is offset by `(jitter/16)·(u, u²)` with `u = (k+1)/s`,
/// which makes every within-cluster distance smaller than every
/// cross-cluster one.
pub fn reference_embeddings(n: usize, t: usize, alpha: f64, jitter: f64) -> Result<(EmbeddingSet, EmbeddingSet)> {
    if t != 2 {
        return Err(Error::precondition(format!("reference embeddings are defined for t = 2, got {t}")));
    }
    if n == 0 || !n.is_multiple_of(2 * t) {
        return Err(Error::precondition(format!("n = {n} must be a positive multiple of 2t = {}", 2 * t)));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let side = alpha.sqrt();
    if !(jitter > 0.0 && jitter < side / 5.0) {
        return Err(Error::precondition(format!("jitter must lie in (0, √α/5) = (0, {}), got {jitter}", side / 5.0)));
    }
    let set = n / t;
    let half = n / (2 * t);
    let offset = |k: usize, s: usize| {
        let u = (k + 1) as f64 / s as f64;
        [jitter / 16.0 * u, jitter / 16.0 * u * u]
    };

    let mut f1 = Vec::with_capacity(n);
    for i in 0..n {
        let (center, k) = if i < set { ([0.0, 0.0], i) } else { ([side, 0.0], i - set) };
        let o = offset(k, set);
        f1.push(vec![center[0] + o[0], center[1] + o[1]]);
    }

    let ab = side - jitter;
    let a = [0.0, 0.0];
    let b = [ab, 0.0];
    let c = [ab / 2.0, (alpha - ab * ab / 4.0).sqrt()];
    let mut f2 = Vec::with_capacity(n);
    for i in 0..n {
        let (center, k, s) = if i < half {
            (a, i, half)
        } else if i < set {
            (b, i - half, half)
        } else {
            (c, i - set, set)
        };
        let o = offset(k, s);
        f2.push(vec![center[0] + o[0], center[1] + o[1]]);
    }
    Ok((EmbeddingSet::from_rows(&f1)?, EmbeddingSet::from_rows(&f2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model2() -> NoisyLabelModel {
        NoisyLabelModel::from_assignment(vec![0, 0, 1], 2, 0.9).unwrap()
    }

    #[test]
    fn pair_probabilities() {
        let m = NoisyLabelModel::contiguous(4, 2, 0.9).unwrap();
        assert_abs_diff_eq!(pair_same_prob(&m, 0, 1).unwrap(), 0.82, epsilon = 1e-15);
        assert_abs_diff_eq!(pair_same_prob(&m, 0, 2).unwrap(), 0.18, epsilon = 1e-15);
        let clean = NoisyLabelModel::contiguous(4, 2, 1.0).unwrap();
        assert_eq!(pair_same_prob(&clean, 0, 1).unwrap(), 1.0);
        assert!(pair_same_prob(&m, 1, 1).is_err());
    }

    #[test]
    fn triplet_coefficients() {
        let m = model2();
        assert_abs_diff_eq!(triplet_coeff(&m, 0, 1, 2).unwrap(), 0.730, epsilon = 1e-15);
        let all_one = NoisyLabelModel::from_assignment(vec![0, 0, 0], 2, 0.9).unwrap();
        assert_abs_diff_eq!(triplet_coeff(&all_one, 0, 1, 2).unwrap(), 0.090, epsilon = 1e-15);
        assert!(triplet_coeff(&m, 0, 1, 1).is_err());
    }

    #[test]
    fn total_probability_split() {
        let m = NoisyLabelModel::contiguous(6, 3, 0.7).unwrap();
        for (i, j, k) in [(0, 1, 2), (0, 2, 4), (5, 4, 0), (3, 0, 1)] {
            let all_same: f64 = (0..3).map(|c| m.prob(i, c) * m.prob(j, c) * m.prob(k, c)).sum();
            let total = triplet_coeff(&m, i, j, k).unwrap() + all_same;
            assert_abs_diff_eq!(total, pair_same_prob(&m, i, j).unwrap(), epsilon = 1e-15);
        }
    }

    fn line(xs: &[f64]) -> EmbeddingSet {
        EmbeddingSet::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn eps_coefficient_examples() {
        let m = model2();
        let e = line(&[0.0, 1.0, 2.0]);
        let order = neighbor_order(&pairwise_sq_dist(&e).unwrap());
        assert_eq!(order.of(0), &[1, 2]);
        assert_abs_diff_eq!(
            eps_coeff(&m, &order, 0, 1, None).unwrap(),
            pair_same_prob(&m, 0, 1).unwrap(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(eps_coeff(&m, &order, 0, 1, Some(2)).unwrap(), 0.730, epsilon = 1e-15);
        assert_abs_diff_eq!(eps_coeff(&m, &order, 0, 2, Some(1)).unwrap(), 0.090, epsilon = 1e-15);
    }

    #[test]
    fn eps_coefficient_matches_enumeration() {
        // Same setup as above, checked by direct summation over the 8 label
        // assignments of the event {Y0 = Y2, Y1 ≠ Y0}.
        let m = model2();
        let mut brute = 0.0;
        for s in 0..8usize {
            let y = [s & 1, (s >> 1) & 1, (s >> 2) & 1];
            let w: f64 = (0..3).map(|i| m.prob(i, y[i])).product();
            if y[0] == y[2] && y[1] != y[0] {
                brute += w;
            }
        }
        let order = neighbor_order(&pairwise_sq_dist(&line(&[0.0, 1.0, 2.0])).unwrap());
        assert_abs_diff_eq!(eps_coeff(&m, &order, 0, 2, Some(1)).unwrap(), brute, epsilon = 1e-15);
    }

    #[test]
    fn margin_two_sample_hand_expansion() {
        // n = 2, t = 2, sets {0}, {1}, p = 0.9, D = 0.3, α = 0.2, β = 0.25.
        let m = NoisyLabelModel::contiguous(2, 2, 0.9).unwrap();
        let e = line(&[0.0, 0.3f64.sqrt()]);
        let spec = ExpectedObjectiveSpec::new(Objective::Margin, 0.2, 0.25, 2);
        let d: f64 = 0.3;
        let same = (d - 0.25 + 0.2).max(0.0);
        let diff = (0.25 - d + 0.2).max(0.0);
        // Assignments (y0, y1): (0,0) 0.9·0.1, (0,1) 0.9·0.9, (1,0) 0.1·0.1, (1,1) 0.1·0.9.
        let hand = (0.09 * 2.0 * same + 0.81 * 2.0 * diff + 0.01 * 2.0 * diff + 0.09 * 2.0 * same) / 4.0;
        assert_abs_diff_eq!(enumerate_expected_objective(&e, &m, &spec).unwrap(), hand, epsilon = 1e-15);
        assert_abs_diff_eq!(expected_objective(&e, &m, &spec).unwrap(), hand, epsilon = 1e-15);
    }

    #[test]
    fn coincident_points() {
        let m = NoisyLabelModel::contiguous(6, 2, 0.9).unwrap();
        let e = EmbeddingSet::new(Array2::zeros((6, 2))).unwrap();
        let alpha = 0.2;
        let spec = ExpectedObjectiveSpec::new(Objective::Margin, alpha, alpha, 6);
        let closed = expected_objective(&e, &m, &spec).unwrap();
        let brute = enumerate_expected_objective(&e, &m, &spec).unwrap();
        assert_abs_diff_eq!(closed, brute, epsilon = 1e-12);
        let expect: f64 = (0..6)
            .flat_map(|i| (0..6).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| (1.0 - pair_same_prob(&m, i, j).unwrap()) * 2.0 * alpha)
            .sum::<f64>()
            / 36.0;
        assert_abs_diff_eq!(closed, expect, epsilon = 1e-15);

        let tiny = ExpectedObjectiveSpec::new(Objective::Trip, 1e-12, 1e-12, 6);
        assert!(expected_objective(&e, &m, &tiny).unwrap() < 1e-12);
    }

    #[test]
    fn reference_embedding_layout() {
        let alpha = 0.2;
        let (f1, f2) = reference_embeddings(12, 2, alpha, 1e-3).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                if i == j {
                    continue;
                }
                let d1 = f1.sq_dist(i, j);
                if (i < 6) == (j < 6) {
                    assert!(d1 < 1e-6);
                } else {
                    assert!((d1 - alpha).abs() < 1e-3);
                }
                let d2 = f2.sq_dist(i, j);
                let cluster = |x: usize| {
                    if x < 3 {
                        0
                    } else if x < 6 {
                        1
                    } else {
                        2
                    }
                };
                if cluster(i) == cluster(j) {
                    assert!(d2 < 1e-6);
                } else {
                    assert!((d2 - alpha).abs() < 2e-3);
                }
            }
        }
        // Class-1 anchors rank their other half before the other class.
        let order = neighbor_order(&pairwise_sq_dist(&f2).unwrap());
        assert_eq!(&order.of(0)[..5], &[1, 2, 3, 4, 5]);
        assert!(reference_embeddings(12, 2, alpha, 0.0).is_err());
        assert!(reference_embeddings(10, 2, alpha, 1e-3).is_err());
        assert!(reference_embeddings(12, 3, alpha, 1e-3).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = NoisyLabelModel::contiguous(6, 2, 0.8).unwrap();
        let pts: Vec<Vec<f64>> =
            (0..6).map(|i| vec![(i as f64 * 1.7).sin() * 0.4, (i as f64 * 0.9).cos() * 0.3]).collect();
        let e = EmbeddingSet::from_rows(&pts).unwrap();
        for obj in Objective::ALL {
            let spec = ExpectedObjectiveSpec::new(obj, 0.2, 0.15, 6);
            let g = expected_objective_grad(&e, &m, &spec).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                for k in 0..2 {
                    let mut plus = pts.clone();
                    plus[i][k] += h;
                    let mut minus = pts.clone();
                    minus[i][k] -= h;
                    let fp = expected_objective(&EmbeddingSet::from_rows(&plus).unwrap(), &m, &spec).unwrap();
                    let fm = expected_objective(&EmbeddingSet::from_rows(&minus).unwrap(), &m, &spec).unwrap();
                    assert_abs_diff_eq!(g.grad[[i, k]], (fp - fm) / (2.0 * h), epsilon = 1e-7);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn closed_form_equals_enumeration(
            n_half in 2usize..=4,
            t in 2usize..=3,
            p in 0.55f64..0.98,
            alpha in 0.05f64..0.5,
            beta in 0.0f64..0.6,
            seed in prop::collection::vec(-1.0f64..1.0, 16),
        ) {
            let n = if t == 2 { 2 * n_half } else { 6 };
            let m = NoisyLabelModel::contiguous(n, t, p).unwrap();
            let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![seed[2 * i] * 0.6, seed[2 * i + 1] * 0.6]).collect();
            let e = EmbeddingSet::from_rows(&pts).unwrap();
            for obj in Objective::ALL {
                let spec = ExpectedObjectiveSpec::new(obj, alpha, beta, n);
                let a = expected_objective(&e, &m, &spec).unwrap();
                let b = enumerate_expected_objective(&e, &m, &spec).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300), "{obj:?}: {a} vs {b}");
            }
        }

        #[test]
        fn eps_coefficient_bounds(p in 0.55f64..0.99, seed in prop::collection::vec(-1.0f64..1.0, 16)) {
            let n = 8;
            let m = NoisyLabelModel::contiguous(n, 2, p).unwrap();
            let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![seed[2 * i], seed[2 * i + 1]]).collect();
            let order = neighbor_order(&pairwise_sq_dist(&EmbeddingSet::from_rows(&pts).unwrap()).unwrap());
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let e = eps_coeff(&m, &order, i, j, None).unwrap();
                    prop_assert!(e <= pair_same_prob(&m, i, j).unwrap() + 1e-15);
                    for k in (0..n).filter(|&k| k != i && k != j) {
                        let c = triplet_coeff(&m, i, j, k).unwrap();
                        prop_assert!(c > 0.0 && c < 1.0);
                    }
                }
                // For a fixed class of j, coefficients do not grow with rank.
                for class in 0..2 {
                    let seq: Vec<f64> = order.of(i).iter().filter(|&&j| m.partition()[j] == class)
                        .map(|&j| eps_coeff(&m, &order, i, j, None).unwrap()).collect();
                    for w in seq.windows(2) {
                        prop_assert!(w[1] <= w[0]);
                    }
                }
            }
        }
    }
}
