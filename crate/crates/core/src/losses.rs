//! Contrastive, triplet, margin and multi-similarity losses with analytic
//! gradients.
//!
//! Hinges use the strict convention: a term is active only when its argument
//! is strictly positive, so the subgradient at the kink is zero.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingSet;
use crate::mining::{Batch, Tuple};
use crate::par;

/// Max allowed deviation of a row norm from 1 for multi-similarity inputs.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Contrastive,
    Triplet,
    Margin,
    MultiSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Margin in squared-distance units (contrastive, triplet, margin).
    pub alpha: f64,
    /// Initial per-sample boundary of the margin loss.
    pub beta_init: f64,
    pub ms_alpha: f64,
    pub ms_beta: f64,
    pub ms_lambda: f64,
    /// Fraction of highest-loss tuples dropped from each batch.
    pub trim_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Triplet,
            alpha: 0.2,
            beta_init: 1.2,
            ms_alpha: 2.0,
            ms_beta: 50.0,
            ms_lambda: 1.0,
            trim_fraction: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta_init", self.beta_init),
            ("ms_alpha", self.ms_alpha),
            ("ms_beta", self.ms_beta),
            ("ms_lambda", self.ms_lambda),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("loss.{name} must be a positive finite number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.trim_fraction) {
            return Err(Error::invalid(format!("loss.trim_fraction must lie in [0, 1), got {}", self.trim_fraction)));
        }
        Ok(())
    }

    pub fn ms_params(&self) -> MsParams {
        MsParams { alpha: self.ms_alpha, beta: self.ms_beta, lambda: self.ms_lambda }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 50.0, lambda: 1.0 }
    }
}

/// Learnable per-sample boundaries of the margin loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaStore(Vec<f64>);

impl BetaStore {
    pub fn new(n: usize, init: f64) -> Self {
        Self(vec![init; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("beta[{i}] = {v} must be finite and non-negative")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.0[i]).collect()
    }

    pub fn clamp_non_negative(&mut self) {
        for b in &mut self.0 {
            *b = b.max(0.0);
        }
    }
}

/// Loss value with gradients w.r.t. every embedding row and every β entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// `dL/dβ`, indexed like the embedding rows; all zero for β-free losses.
    pub beta_grad: Vec<f64>,
}

impl LossGrad {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { loss: 0.0, grad: Array2::zeros((n, m)), beta_grad: vec![0.0; n] }
    }

    fn add_term(&mut self, term: &Term, weight: f64) {
        self.loss += weight * term.loss;
        for (i, g) in &term.rows {
            for (dst, v) in self.grad.row_mut(*i).iter_mut().zip(g) {
                *dst += weight * v;
            }
        }
        if let Some((t, g)) = term.beta {
            self.beta_grad[t] += weight * g;
        }
    }
}

/// Contribution of one tuple: its loss and the non-zero gradient rows.
#[derive(Debug, Clone, Default)]
struct Term {
    loss: f64,
    rows: Vec<(usize, Vec<f64>)>,
    beta: Option<(usize, f64)>,
}

impl Term {
    fn into_grad(self, n: usize, m: usize) -> LossGrad {
        let mut out = LossGrad::zeros(n, m);
        out.add_term(&self, 1.0);
        out
    }
}

#[inline]
pub(crate) fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `(x_i − x_j)` scaled by `s`.
fn scaled_diff(emb: &EmbeddingSet, i: usize, j: usize, s: f64) -> Vec<f64> {
    emb.row(i).iter().zip(emb.row(j).iter()).map(|(a, b)| s * (a - b)).collect()
}

fn distinct(idx: &[usize], emb: &EmbeddingSet) -> Result<()> {
    for &i in idx {
        emb.check_index(i)?;
    }
    for (k, i) in idx.iter().enumerate() {
        if idx[k + 1..].contains(i) {
            return Err(Error::DuplicateIndex(idx.to_vec()));
        }
    }
    Ok(())
}

/// Adds `s · dD_ij` to the rows of `i` and `j`.
fn push_dist_grad(rows: &mut Vec<(usize, Vec<f64>)>, emb: &EmbeddingSet, i: usize, j: usize, s: f64) {
    let g = scaled_diff(emb, i, j, 2.0 * s);
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    rows.push((i, g));
    rows.push((j, neg));
}

fn contrastive_term(emb: &EmbeddingSet, i: usize, j: usize, same_class: bool, alpha: f64) -> Term {
    let d = emb.sq_dist(i, j);
    let mut t = Term::default();
    if same_class {
        t.loss = d;
        push_dist_grad(&mut t.rows, emb, i, j, 1.0);
    } else {
        let arg = alpha - d;
        if arg > 0.0 {
            t.loss = arg;
            push_dist_grad(&mut t.rows, emb, i, j, -1.0);
        }
    }
    t
}

fn triplet_term(emb: &EmbeddingSet, a: usize, p: usize, n: usize, alpha: f64) -> Term {
    let arg = emb.sq_dist(a, p) - emb.sq_dist(a, n) + alpha;
    let mut t = Term::default();
    if arg > 0.0 {
        t.loss = arg;
        push_dist_grad(&mut t.rows, emb, a, p, 1.0);
        push_dist_grad(&mut t.rows, emb, a, n, -1.0);
    }
    t
}

fn margin_term(emb: &EmbeddingSet, beta: &[f64], t_idx: usize, x: usize, same_class: bool, alpha: f64) -> Term {
    let d = emb.sq_dist(t_idx, x);
    let b = beta[t_idx];
    let (arg, sign) = if same_class { (d - b + alpha, 1.0) } else { (b - d + alpha, -1.0) };
    let mut t = Term::default();
    if arg > 0.0 {
        t.loss = arg;
        push_dist_grad(&mut t.rows, emb, t_idx, x, sign);
        t.beta = Some((t_idx, -sign));
    }
    t
}

/// `ln(1 + Σ e^{z})` and the softmax-style weights `e^{z_j} / (1 + Σ e^{z})`.
fn log1p_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(0.0f64, f64::max);
    let base = (-m).exp();
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let denom = base + e.iter().sum::<f64>();
    (m + denom.ln(), e.iter().map(|v| v / denom).collect())
}

fn ms_term(emb: &EmbeddingSet, anchor: usize, pos: &[usize], neg: &[usize], ms: MsParams) -> Term {
    let sim = |j: usize| emb.row(anchor).dot(&emb.row(j));
    let zp: Vec<f64> = pos.iter().map(|&j| -ms.alpha * (sim(j) - ms.lambda)).collect();
    let zn: Vec<f64> = neg.iter().map(|&j| ms.beta * (sim(j) - ms.lambda)).collect();
    let (lp, wp) = log1p_sum_exp(&zp);
    let (ln_, wn) = log1p_sum_exp(&zn);
    // dL/dS_j: −w_j for positives, +w_j for negatives.
    let ds: Vec<(usize, f64)> =
        pos.iter().zip(&wp).map(|(&j, &w)| (j, -w)).chain(neg.iter().zip(&wn).map(|(&j, &w)| (j, w))).collect();
    let m = emb.dim();
    let mut ga = vec![0.0; m];
    let mut rows = Vec::with_capacity(ds.len() + 1);
    for &(j, g) in &ds {
        for (dst, v) in ga.iter_mut().zip(emb.row(j).iter()) {
            *dst += g * v;
        }
        rows.push((j, emb.row(anchor).iter().map(|v| g * v).collect()));
    }
    rows.push((anchor, ga));
    Term { loss: lp / ms.alpha + ln_ / ms.beta, rows, beta: None }
}

/// Contrastive loss of one pair: `D` for same-class pairs, `(α − D)_+` otherwise.
pub fn contrastive_pair(emb: &EmbeddingSet, i: usize, j: usize, same_class: bool, alpha: f64) -> Result<LossGrad> {
    distinct(&[i, j], emb)?;
    Ok(contrastive_term(emb, i, j, same_class, alpha).into_grad(emb.len(), emb.dim()))
}

/// Anchor-based triplet loss `(D_ap − D_an + α)_+`.
pub fn triplet(emb: &EmbeddingSet, a: usize, p: usize, n: usize, alpha: f64) -> Result<LossGrad> {
    distinct(&[a, p, n], emb)?;
    Ok(triplet_term(emb, a, p, n, alpha).into_grad(emb.len(), emb.dim()))
}

/// Margin loss of the pair `(t, x)` with boundary `β_t`.
pub fn margin_pair(
    emb: &EmbeddingSet,
    beta: &BetaStore,
    t: usize,
    x: usize,
    same_class: bool,
    alpha: f64,
) -> Result<LossGrad> {
    distinct(&[t, x], emb)?;
    if beta.len() != emb.len() {
        return Err(Error::Shape { expected: format!("{} betas", emb.len()), actual: beta.len().to_string() });
    }
    Ok(margin_term(emb, beta.as_slice(), t, x, same_class, alpha).into_grad(emb.len(), emb.dim()))
}

/// Multi-similarity loss of one anchor on unit-norm embeddings. The
/// gradient is w.r.t. the normalized coordinates.
pub fn multi_similarity_anchor(
    emb_normalized: &EmbeddingSet,
    anchor: usize,
    pos_set: &[usize],
    neg_set: &[usize],
    ms: MsParams,
) -> Result<LossGrad> {
    check_ms_sets(emb_normalized, anchor, pos_set, neg_set)?;
    for &i in std::iter::once(&anchor).chain(pos_set).chain(neg_set) {
        let norm = emb_normalized.row(i).dot(&emb_normalized.row(i)).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!("row {i} has norm {norm}; multi-similarity needs unit vectors")));
        }
    }
    Ok(ms_term(emb_normalized, anchor, pos_set, neg_set, ms).into_grad(emb_normalized.len(), emb_normalized.dim()))
}

fn check_ms_sets(emb: &EmbeddingSet, anchor: usize, pos: &[usize], neg: &[usize]) -> Result<()> {
    if pos.is_empty() {
        return Err(Error::Empty("multi-similarity positive set"));
    }
    if neg.is_empty() {
        return Err(Error::Empty("multi-similarity negative set"));
    }
    emb.check_index(anchor)?;
    for &i in pos.iter().chain(neg) {
        emb.check_index(i)?;
        if i == anchor {
            return Err(Error::DuplicateIndex(vec![anchor]));
        }
    }
    if let Some(&d) = pos.iter().find(|i| neg.contains(i)) {
        return Err(Error::DuplicateIndex(vec![d]));
    }
    Ok(())
}

/// Mean loss over the batch tuples. With `trim_fraction > 0` only the
/// `⌈(1 − trim)·T⌉` lowest-loss tuples contribute, and the mean is taken over
/// those.
///
/// `beta` is indexed like the embedding rows and is only read by the margin
/// loss. Multi-similarity tuples are evaluated on normalized copies and the
/// gradient is mapped back through the normalization.
pub fn batch_loss(emb: &EmbeddingSet, batch: &Batch, config: &LossConfig, beta: &BetaStore) -> Result<LossGrad> {
    config.validate()?;
    let tuples = batch.tuples();
    if tuples.is_empty() {
        return Err(Error::Empty("batch has no tuples"));
    }
    if config.variant == LossVariant::Margin && beta.len() != emb.len() {
        return Err(Error::Shape { expected: format!("{} betas", emb.len()), actual: beta.len().to_string() });
    }
    let normalized;
    let work = if config.variant == LossVariant::MultiSimilarity {
        if let Some(i) = (0..emb.len()).find(|&i| emb.row(i).dot(&emb.row(i)) == 0.0) {
            return Err(Error::invalid(format!("row {i} has zero norm and cannot be normalized")));
        }
        normalized = emb.normalized();
        &normalized
    } else {
        emb
    };

    for t in tuples {
        validate_tuple(work, t, config.variant)?;
    }
    let ms = config.ms_params();
    let terms = par::map_slice(tuples, |t| match *t {
        Tuple::Triplet { anchor, positive, negative } => triplet_term(work, anchor, positive, negative, config.alpha),
        Tuple::Pair { anchor, other, same } => match config.variant {
            LossVariant::Contrastive => contrastive_term(work, anchor, other, same, config.alpha),
            _ => margin_term(work, beta.as_slice(), anchor, other, same, config.alpha),
        },
        Tuple::Anchor { anchor, ref positives, ref negatives } => ms_term(work, anchor, positives, negatives, ms),
    });

    let kept = kept_tuples(&terms.iter().map(|t| t.loss).collect::<Vec<_>>(), config.trim_fraction);
    let mut out = LossGrad::zeros(emb.len(), emb.dim());
    let w = 1.0 / kept.len() as f64;
    for (term, keep) in terms.iter().zip(&kept_mask(terms.len(), &kept)) {
        if *keep {
            out.add_term(term, w);
        }
    }
    if config.variant == LossVariant::MultiSimilarity {
        out.grad = normalize_backward(emb, &out.grad);
    }
    Ok(out)
}

/// Indices of the `⌈(1 − trim)·T⌉` lowest losses, ties by index.
pub fn kept_tuples(losses: &[f64], trim_fraction: f64) -> Vec<usize> {
    let t = losses.len();
    if trim_fraction <= 0.0 {
        return (0..t).collect();
    }
    let keep = (((1.0 - trim_fraction) * t as f64).ceil() as usize).clamp(1, t);
    let mut idx: Vec<usize> = (0..t).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

fn kept_mask(t: usize, kept: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; t];
    for &i in kept {
        mask[i] = true;
    }
    mask
}

/// Chain rule through `u = x / |x|`: `dL/dx = (g − (u·g) u) / |x|`.
fn normalize_backward(emb: &EmbeddingSet, grad_u: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_u.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let x = emb.row(i);
        let norm = x.dot(&x).sqrt();
        let u = x.mapv(|v| v / norm);
        let ug = u.dot(&row);
        for (k, g) in row.iter_mut().enumerate() {
            *g = (*g - ug * u[k]) / norm;
        }
    }
    out
}

fn validate_tuple(emb: &EmbeddingSet, t: &Tuple, variant: LossVariant) -> Result<()> {
    match (t, variant) {
        (Tuple::Triplet { anchor, positive, negative }, LossVariant::Triplet) => {
            distinct(&[*anchor, *positive, *negative], emb)
        }
        (Tuple::Pair { anchor, other, .. }, LossVariant::Contrastive | LossVariant::Margin) => {
            distinct(&[*anchor, *other], emb)
        }
        (Tuple::Anchor { anchor, positives, negatives }, LossVariant::MultiSimilarity) => {
            check_ms_sets(emb, *anchor, positives, negatives)
        }
        _ => Err(Error::invalid(format!("tuple {t:?} does not fit the {variant:?} loss"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::Provenance;
    use approx::assert_abs_diff_eq;

    fn emb(rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn contrastive_examples() {
        let e = emb(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let g = contrastive_pair(&e, 0, 1, true, 0.2).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|v| *v == 0.0));

        let e = emb(&[&[0.0, 0.0], &[0.5, 0.0]]);
        assert_eq!(contrastive_pair(&e, 0, 1, false, 0.2).unwrap().loss, 0.0);

        let e = emb(&[&[0.0, 0.0], &[0.1, 0.0]]);
        assert_abs_diff_eq!(contrastive_pair(&e, 0, 1, false, 0.2).unwrap().loss, 0.19, epsilon = 1e-15);
        assert!(contrastive_pair(&e, 1, 1, false, 0.2).is_err());
    }

    #[test]
    fn triplet_examples() {
        let e = emb(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]);
        let g = triplet(&e, 0, 1, 2, 0.2).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|v| *v == 0.0));

        let e = emb(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.5f64.sqrt()]]);
        assert_abs_diff_eq!(triplet(&e, 0, 1, 2, 0.2).unwrap().loss, 0.7, epsilon = 1e-12);

        let e = emb(&[&[0.3, -0.2], &[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(triplet(&e, 0, 1, 2, 0.2).unwrap().loss, 0.2);

        assert!(triplet(&e, 0, 1, 1, 0.2).is_err());
    }

    #[test]
    fn triplet_active_gradient_formula() {
        let e = emb(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.5]]);
        let g = triplet(&e, 0, 1, 2, 0.2).unwrap();
        // d/da = 2(a−p) − 2(a−n), d/dp = −2(a−p), d/dn = 2(a−n)
        assert_eq!(g.grad.row(0).to_vec(), vec![-2.0, 1.0]);
        assert_eq!(g.grad.row(1).to_vec(), vec![2.0, 0.0]);
        assert_eq!(g.grad.row(2).to_vec(), vec![0.0, -1.0]);
    }

    #[test]
    fn margin_examples() {
        let alpha = 0.2;
        let beta = BetaStore::new(2, 1.2);
        let e = emb(&[&[0.0], &[1.0]]);
        assert!(margin_pair(&e, &beta, 0, 1, true, alpha).unwrap().loss.abs() < 1e-12);

        let e = emb(&[&[0.0], &[1.4f64.sqrt()]]);
        let g = margin_pair(&e, &beta, 0, 1, false, alpha).unwrap();
        assert!(g.loss.abs() < 1e-12);

        let e = emb(&[&[0.0], &[1.2f64.sqrt()]]);
        let g = margin_pair(&e, &beta, 0, 1, true, alpha).unwrap();
        assert_abs_diff_eq!(g.loss, 0.2, epsilon = 1e-12);
        assert_eq!(g.beta_grad, vec![-1.0, 0.0]);

        let g = margin_pair(&e, &beta, 0, 1, false, alpha).unwrap();
        assert_abs_diff_eq!(g.loss, 0.2, epsilon = 1e-12);
        assert_eq!(g.beta_grad, vec![1.0, 0.0]);
    }

    #[test]
    fn margin_piecewise_linear_slopes() {
        let beta = BetaStore::new(2, 1.2);
        for same in [true, false] {
            let mut prev: Option<f64> = None;
            let step = 0.01;
            for k in 0..300 {
                let d = 0.005 + k as f64 * step;
                let e = emb(&[&[0.0], &[d.sqrt()]]);
                let l = margin_pair(&e, &beta, 0, 1, same, 0.2).unwrap().loss;
                if let Some(p) = prev {
                    let slope = ((l - p) / step * 1e6).round() / 1e6;
                    assert!(
                        [-1.0, 0.0, 1.0].iter().any(|s| (slope - s).abs() < 1e-6)
                            || (d - 1.0).abs() < 0.02
                            || (d - 1.4).abs() < 0.02,
                        "slope {slope} at {d}"
                    );
                }
                prev = Some(l);
            }
        }
    }

    #[test]
    fn ms_examples() {
        let ms = MsParams::default();
        // Positive and negative both at S = λ = 1 → exponents vanish.
        let e = emb(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let g = multi_similarity_anchor(&e, 0, &[1], &[2], ms).unwrap();
        assert_abs_diff_eq!(g.loss, 2f64.ln() / 2.0 + 2f64.ln() / 50.0, epsilon = 1e-14);

        let e = emb(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let g = multi_similarity_anchor(&e, 0, &[1], &[2], ms).unwrap();
        assert_abs_diff_eq!(g.loss, 2f64.ln() / 2.0 + (1.0 + (-50f64).exp()).ln() / 50.0, epsilon = 1e-15);

        assert!(multi_similarity_anchor(&e, 0, &[], &[2], ms).is_err());
        assert!(multi_similarity_anchor(&e, 0, &[1], &[], ms).is_err());
        let raw = emb(&[&[2.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!(multi_similarity_anchor(&raw, 0, &[1], &[2], ms).is_err());
    }

    fn triplet_batch(tuples: &[(usize, usize, usize)]) -> Batch {
        Batch::new(
            (0..4).collect(),
            tuples.iter().map(|&(a, p, n)| Tuple::Triplet { anchor: a, positive: p, negative: n }).collect(),
            vec![Provenance::default(); tuples.len()],
        )
    }

    #[test]
    fn batch_loss_mean_and_trim() {
        // Losses per tuple: (0,1,2) → 0.2 − 0.25 + ... build a known set instead.
        let e = emb(&[&[0.0], &[1.0], &[2.0], &[10.0]]);
        let cfg = LossConfig { alpha: 0.5, ..Default::default() };
        let beta = BetaStore::new(4, 1.2);
        let b = triplet_batch(&[(0, 1, 3), (1, 0, 2), (0, 2, 1)]);
        let losses: Vec<f64> = [(0, 1, 3), (1, 0, 2), (0, 2, 1)]
            .iter()
            .map(|&(a, p, n)| triplet(&e, a, p, n, 0.5).unwrap().loss)
            .collect();
        let g = batch_loss(&e, &b, &cfg, &beta).unwrap();
        assert_abs_diff_eq!(g.loss, losses.iter().sum::<f64>() / 3.0, epsilon = 1e-15);

        let all_inactive = triplet_batch(&[(0, 1, 3)]);
        let g = batch_loss(&e, &all_inactive, &cfg, &beta).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|v| *v == 0.0));

        assert!(batch_loss(&e, &triplet_batch(&[]), &cfg, &beta).is_err());
    }

    #[test]
    fn trimming_keeps_lowest() {
        assert_eq!(kept_tuples(&[3.0, 0.0, 1.0, 0.0], 0.5), vec![1, 3]);
        assert_eq!(kept_tuples(&[3.0, 0.0, 1.0, 0.0], 0.0), vec![0, 1, 2, 3]);
        // keep ⌈(1 − 0.75)·4⌉ = 1
        assert_eq!(kept_tuples(&[3.0, 0.5, 1.0, 2.0], 0.75), vec![1]);

        let e = emb(&[&[0.0], &[1.0], &[2.0], &[10.0]]);
        let cfg = LossConfig { alpha: 0.5, trim_fraction: 0.5, ..Default::default() };
        let b = triplet_batch(&[(0, 1, 3), (1, 0, 2), (0, 2, 1), (2, 3, 1)]);
        let g = batch_loss(&e, &b, &cfg, &BetaStore::new(4, 1.2)).unwrap();
        // tuple losses: 0, 0.5, 3.5, 63.5 → the lowest two are kept.
        assert_abs_diff_eq!(g.loss, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn variant_mismatch_rejected() {
        let e = emb(&[&[0.0], &[1.0], &[2.0], &[10.0]]);
        let cfg = LossConfig { variant: LossVariant::Margin, ..Default::default() };
        let b = triplet_batch(&[(0, 1, 3)]);
        assert!(batch_loss(&e, &b, &cfg, &BetaStore::new(4, 1.2)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { trim_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(BetaStore::from_vec(vec![1.0, -0.1]).is_err());
    }
}
