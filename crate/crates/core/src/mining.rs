//! P×K batch construction and tuple mining.
//!
//! Indices passed to the selectors are rows of the embedding and positions
//! in `labels`; `members` restricts the search to the current batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingSet;
use crate::losses::LossVariant;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveStrategy {
    #[default]
    Random,
    AllPairs,
    EasyPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    #[default]
    Random,
    SemiHard,
    DistanceWeighted,
    MsMining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinerConfig {
    pub positive_strategy: PositiveStrategy,
    pub negative_strategy: NegativeStrategy,
    /// P: classes drawn per batch.
    pub classes_per_batch: usize,
    /// K: samples drawn per class.
    pub samples_per_class: usize,
    /// Upper bound on distance-weighted sampling weights.
    pub dw_clip: f64,
    pub ms_epsilon: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            positive_strategy: PositiveStrategy::Random,
            negative_strategy: NegativeStrategy::Random,
            classes_per_batch: 2,
            samples_per_class: 32,
            dw_clip: 100.0,
            ms_epsilon: 0.1,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 {
            return Err(Error::invalid(format!(
                "miner.classes_per_batch must be >= 2, got {}",
                self.classes_per_batch
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid(format!(
                "miner.samples_per_class must be >= 2, got {}",
                self.samples_per_class
            )));
        }
        if !(self.dw_clip > 0.0 && self.dw_clip.is_finite()) {
            return Err(Error::invalid(format!("miner.dw_clip must be positive, got {}", self.dw_clip)));
        }
        if !(self.ms_epsilon >= 0.0 && self.ms_epsilon.is_finite()) {
            return Err(Error::invalid(format!("miner.ms_epsilon must be non-negative, got {}", self.ms_epsilon)));
        }
        Ok(())
    }
}

/// Which strategies produced a tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub positive: PositiveStrategy,
    pub negative: NegativeStrategy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tuple {
    Triplet {
        anchor: usize,
        positive: usize,
        negative: usize,
    },
    /// Pair for contrastive and margin losses.
    Pair {
        anchor: usize,
        other: usize,
        same: bool,
    },
    /// Per-anchor sets for the multi-similarity loss.
    Anchor {
        anchor: usize,
        positives: Vec<usize>,
        negatives: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    members: Vec<usize>,
    tuples: Vec<Tuple>,
    provenance: Vec<Provenance>,
}

impl Batch {
    pub fn new(members: Vec<usize>, tuples: Vec<Tuple>, provenance: Vec<Provenance>) -> Self {
        assert_eq!(tuples.len(), provenance.len(), "one provenance entry per tuple");
        Self { members, tuples, provenance }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn tuples(&self) -> &[Tuple] {
        &self.tuples
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Draws `P` distinct classes uniformly among those with at least `K`
/// samples, then `K` distinct samples of each class.
pub fn build_pk_batch(labels: &[usize], p: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::invalid("P and K must be positive"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let eligible: Vec<usize> = (0..n_classes).filter(|&c| by_class[c].len() >= k).collect();
    if eligible.len() < p {
        return Err(Error::precondition(format!(
            "need {p} classes with at least {k} samples, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rand::seq::index::sample(&mut rng, eligible.len(), p);
    let mut out = Vec::with_capacity(p * k);
    for ci in classes.iter() {
        let pool = &by_class[eligible[ci]];
        for s in rand::seq::index::sample(&mut rng, pool.len(), k).iter() {
            out.push(pool[s]);
        }
    }
    Ok(out)
}

fn same_class_candidates(members: &[usize], labels: &[usize], anchor: usize) -> Vec<usize> {
    members.iter().copied().filter(|&j| j != anchor && labels[j] == labels[anchor]).collect()
}

fn negatives_of(members: &[usize], labels: &[usize], anchor: usize) -> Vec<usize> {
    members.iter().copied().filter(|&j| labels[j] != labels[anchor]).collect()
}

fn check_inputs(emb: &EmbeddingSet, members: &[usize], labels: &[usize], anchor: usize) -> Result<()> {
    if labels.len() != emb.len() {
        return Err(Error::Shape { expected: format!("{} labels", emb.len()), actual: labels.len().to_string() });
    }
    emb.check_index(anchor)?;
    for &m in members {
        emb.check_index(m)?;
    }
    Ok(())
}

/// Index with the smallest `key`, ties broken by the smaller index.
fn argmin_by_key(cands: &[usize], key: impl Fn(usize) -> f64) -> Option<usize> {
    cands.iter().copied().min_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)))
}

pub fn select_positive(
    emb: &EmbeddingSet,
    members: &[usize],
    labels: &[usize],
    anchor: usize,
    strategy: PositiveStrategy,
    rng: &mut impl Rng,
) -> Result<usize> {
    check_inputs(emb, members, labels, anchor)?;
    let cands = same_class_candidates(members, labels, anchor);
    if cands.is_empty() {
        return Err(Error::precondition(format!("anchor {anchor} is the only member of its class in the batch")));
    }
    match strategy {
        PositiveStrategy::EasyPositive => Ok(argmin_by_key(&cands, |j| emb.sq_dist(anchor, j)).unwrap()),
        PositiveStrategy::Random => Ok(cands[rng.random_range(0..cands.len())]),
        PositiveStrategy::AllPairs => Err(Error::invalid("all_pairs positives are produced by expand_tuples")),
    }
}

/// Distance-weighted sampling weights `min(clip, 1/q(d))` with
/// `q(d) ∝ d^{m−2} (1 − d²/4)^{(m−3)/2}`, the density of pairwise distances
/// between uniform points on the unit sphere in `R^m`.
pub fn distance_weights(dists: &[f64], dim: usize, clip: f64) -> Vec<f64> {
    log_distance_weights(dists, dim, clip).into_iter().map(|lw| lw.exp().clamp(f64::MIN_POSITIVE, clip)).collect()
}

fn log_distance_weights(dists: &[f64], dim: usize, clip: f64) -> Vec<f64> {
    let a = dim as f64 - 2.0;
    let b = (dim as f64 - 3.0) / 2.0;
    let log_clip = clip.ln();
    dists
        .iter()
        .map(|&d| {
            let t1 = if a == 0.0 { 0.0 } else { a * d.max(f64::MIN_POSITIVE).ln() };
            let t2 = if b == 0.0 { 0.0 } else { b * (1.0 - d * d / 4.0).max(f64::MIN_POSITIVE).ln() };
            (-(t1 + t2)).min(log_clip)
        })
        .collect()
}

fn categorical(log_w: &[f64], rng: &mut impl Rng) -> usize {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

fn unit_sim(emb: &EmbeddingSet, a: usize, b: usize) -> f64 {
    let (ra, rb) = (emb.row(a), emb.row(b));
    let na = ra.dot(&ra).sqrt();
    let nb = rb.dot(&rb).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ra.dot(&rb) / (na * nb)
    }
}

fn unit_dist(emb: &EmbeddingSet, a: usize, b: usize) -> f64 {
    (2.0 - 2.0 * unit_sim(emb, a, b)).max(0.0).sqrt()
}

#[allow(clippy::too_many_arguments)]
pub fn select_negative(
    emb: &EmbeddingSet,
    members: &[usize],
    labels: &[usize],
    anchor: usize,
    positive: usize,
    strategy: NegativeStrategy,
    alpha: f64,
    config: &MinerConfig,
    rng: &mut impl Rng,
) -> Result<usize> {
    check_inputs(emb, members, labels, anchor)?;
    emb.check_index(positive)?;
    let negs = negatives_of(members, labels, anchor);
    if negs.is_empty() {
        return Err(Error::precondition(format!("no negatives for anchor {anchor} in the batch")));
    }
    if negs.len() == 1 {
        return Ok(negs[0]);
    }
    match strategy {
        NegativeStrategy::Random => Ok(negs[rng.random_range(0..negs.len())]),
        NegativeStrategy::SemiHard => {
            let d_ap = emb.sq_dist(anchor, positive);
            let d = |j: usize| emb.sq_dist(anchor, j);
            let band: Vec<usize> = negs.iter().copied().filter(|&j| d(j) > d_ap && d(j) < d_ap + alpha).collect();
            if !band.is_empty() {
                return Ok(band[rng.random_range(0..band.len())]);
            }
            let farther: Vec<usize> = negs.iter().copied().filter(|&j| d(j) > d_ap).collect();
            if let Some(j) = argmin_by_key(&farther, d) {
                return Ok(j);
            }
            Ok(argmin_by_key(&negs, |j| -d(j)).unwrap())
        }
        NegativeStrategy::DistanceWeighted => {
            let dists: Vec<f64> = negs.iter().map(|&j| unit_dist(emb, anchor, j)).collect();
            let lw = log_distance_weights(&dists, emb.dim(), config.dw_clip);
            Ok(negs[categorical(&lw, rng)])
        }
        NegativeStrategy::MsMining => {
            let s_ap = unit_sim(emb, anchor, positive);
            let s = |j: usize| unit_sim(emb, anchor, j);
            let mined: Vec<usize> = negs.iter().copied().filter(|&j| s(j) > s_ap - config.ms_epsilon).collect();
            let pool = if mined.is_empty() { &negs } else { &mined };
            Ok(argmin_by_key(pool, |j| -s(j)).unwrap())
        }
    }
}

/// Positive and negative sets of one anchor for the multi-similarity loss.
///
/// With easy positive sampling the positive set is the single most similar
/// classmate; otherwise classmates are kept when `S_ap < max S_an + ε`.
/// Negatives are kept when `S_an > min_{p∈P} S_ap − ε`. An empty mined set
/// falls back to its hardest member.
#[allow(clippy::too_many_arguments)]
pub fn ms_sets(
    emb: &EmbeddingSet,
    members: &[usize],
    labels: &[usize],
    anchor: usize,
    positive_strategy: PositiveStrategy,
    negative_strategy: NegativeStrategy,
    alpha: f64,
    config: &MinerConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_inputs(emb, members, labels, anchor)?;
    let cands = same_class_candidates(members, labels, anchor);
    let negs = negatives_of(members, labels, anchor);
    if cands.is_empty() {
        return Err(Error::precondition(format!("anchor {anchor} is the only member of its class in the batch")));
    }
    if negs.is_empty() {
        return Err(Error::precondition(format!("no negatives for anchor {anchor} in the batch")));
    }
    let s = |j: usize| unit_sim(emb, anchor, j);
    let eps = config.ms_epsilon;
    let positives = match positive_strategy {
        PositiveStrategy::EasyPositive => vec![argmin_by_key(&cands, |j| -s(j)).unwrap()],
        PositiveStrategy::Random => vec![cands[rng.random_range(0..cands.len())]],
        PositiveStrategy::AllPairs => {
            let hardest_neg = negs.iter().map(|&j| s(j)).fold(f64::NEG_INFINITY, f64::max);
            let mined: Vec<usize> = cands.iter().copied().filter(|&j| s(j) < hardest_neg + eps).collect();
            if mined.is_empty() {
                vec![argmin_by_key(&cands, s).unwrap()]
            } else {
                mined
            }
        }
    };
    let negatives = if negative_strategy == NegativeStrategy::MsMining {
        let easiest_pos = positives.iter().map(|&j| s(j)).fold(f64::INFINITY, f64::min);
        let mined: Vec<usize> = negs.iter().copied().filter(|&j| s(j) > easiest_pos - eps).collect();
        if mined.is_empty() {
            vec![argmin_by_key(&negs, |j| -s(j)).unwrap()]
        } else {
            mined
        }
    } else {
        vec![select_negative(emb, members, labels, anchor, positives[0], negative_strategy, alpha, config, rng)?]
    };
    Ok((positives, negatives))
}

/// Expands a batch into loss tuples, one anchor per member.
///
/// Each anchor draws from its own ChaCha stream (seeded once from `rng`,
/// stream id = anchor position), so the result does not depend on how the
/// anchors are scheduled.
pub fn expand_tuples(
    emb: &EmbeddingSet,
    members: &[usize],
    labels: &[usize],
    miner: &MinerConfig,
    variant: LossVariant,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Batch> {
    miner.validate()?;
    if members.is_empty() {
        return Err(Error::Empty("batch has no members"));
    }
    let base = rng.next_u64();
    let prov = Provenance { positive: miner.positive_strategy, negative: miner.negative_strategy };
    let per_anchor = par::try_map_range(members.len(), |pos| -> Result<Vec<Tuple>> {
        let mut r = ChaCha8Rng::seed_from_u64(base);
        r.set_stream(pos as u64);
        let anchor = members[pos];
        if variant == LossVariant::MultiSimilarity {
            let (positives, negatives) = ms_sets(
                emb,
                members,
                labels,
                anchor,
                miner.positive_strategy,
                miner.negative_strategy,
                alpha,
                miner,
                &mut r,
            )?;
            return Ok(vec![Tuple::Anchor { anchor, positives, negatives }]);
        }
        let positives = match miner.positive_strategy {
            PositiveStrategy::AllPairs => {
                let c = same_class_candidates(members, labels, anchor);
                if c.is_empty() {
                    return Err(Error::precondition(format!(
                        "anchor {anchor} is the only member of its class in the batch"
                    )));
                }
                c
            }
            s => vec![select_positive(emb, members, labels, anchor, s, &mut r)?],
        };
        let mut out = Vec::with_capacity(positives.len() * 2);
        for positive in positives {
            let negative =
                select_negative(emb, members, labels, anchor, positive, miner.negative_strategy, alpha, miner, &mut r)?;
            match variant {
                LossVariant::Triplet => out.push(Tuple::Triplet { anchor, positive, negative }),
                _ => {
                    out.push(Tuple::Pair { anchor, other: positive, same: true });
                    out.push(Tuple::Pair { anchor, other: negative, same: false });
                }
            }
        }
        Ok(out)
    })?;
    let tuples: Vec<Tuple> = per_anchor.into_iter().flatten().collect();
    let provenance = vec![prov; tuples.len()];
    Ok(Batch::new(members.to_vec(), tuples, provenance))
}
