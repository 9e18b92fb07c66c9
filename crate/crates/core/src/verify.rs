//! Numerical checks of the collapse results for the plain expected objectives
//! and the non-collapse results for their easy-positive counterparts.
//!
//! Every check returns a [`VerifyReport`] listing the measured quantities and
//! a pass/fail verdict per tolerance.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{neighbor_order, pairwise_sq_dist, EmbeddingSet};
use crate::noisy::{
    eps_coeff, expected_objective, pair_same_prob, reference_embeddings, ExpectedObjectiveSpec, NoisyLabelModel,
    Objective,
};
use crate::trainer::{random_inits, train_exact, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    Thm1,
    Thm2,
    Claim1,
    Claim2,
    Claim3,
    Claim4,
}

impl Claim {
    pub const ALL: [Claim; 6] = [Claim::Thm1, Claim::Thm2, Claim::Claim1, Claim::Claim2, Claim::Claim3, Claim::Claim4];

    pub fn id(self) -> &'static str {
        match self {
            Claim::Thm1 => "thm1",
            Claim::Thm2 => "thm2",
            Claim::Claim1 => "claim1",
            Claim::Claim2 => "claim2",
            Claim::Claim3 => "claim3",
            Claim::Claim4 => "claim4",
        }
    }
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Claim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Claim::ALL.into_iter().find(|c| c.id() == s).ok_or_else(|| {
            Error::invalid(format!("unknown claim '{s}', expected one of thm1, thm2, claim1, claim2, claim3, claim4"))
        })
    }
}

/// Parameters shared by all checks. `None` fields take a per-claim default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyParams {
    pub n: usize,
    pub t: usize,
    pub p: f64,
    pub alpha: f64,
    /// Embedding dimension for the descent checks.
    pub dim: usize,
    pub restarts: usize,
    pub seed: u64,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub smoothing: Option<f64>,
    /// Margin boundary; defaults to `alpha`.
    pub beta: Option<f64>,
    /// Within-cluster spread of the reference embeddings.
    pub jitter: f64,
    /// Sample counts for the crossover sweep.
    pub sweep_n: Vec<usize>,
    pub grid_step: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            n: 12,
            t: 2,
            p: 0.9,
            alpha: 0.2,
            dim: 2,
            restarts: 8,
            seed: 0,
            steps: None,
            learning_rate: None,
            smoothing: None,
            beta: None,
            jitter: 1e-3,
            sweep_n: vec![4, 8, 12, 16, 20, 24],
            grid_step: 1e-3,
        }
    }
}

impl VerifyParams {
    /// Copy with every per-claim default filled in.
    pub fn resolved(&self, claim: Claim) -> Self {
        let (steps, lr, smoothing) = match claim {
            Claim::Thm1 => (4000, 100.0, 1e-2),
            _ => (4000, 10.0, 1e-2),
        };
        Self {
            steps: Some(self.steps.unwrap_or(steps)),
            learning_rate: Some(self.learning_rate.unwrap_or(lr)),
            smoothing: Some(self.smoothing.unwrap_or(smoothing)),
            beta: Some(self.beta.unwrap_or(self.alpha)),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t != 2 {
            return Err(Error::precondition(format!("claims are checked at t = 2, got {}", self.t)));
        }
        if self.n > 24 {
            return Err(Error::precondition(format!("n = {} exceeds 24", self.n)));
        }
        if let Some(&big) = self.sweep_n.iter().find(|&&n| n > 24) {
            return Err(Error::precondition(format!("sweep n = {big} exceeds 24")));
        }
        if self.sweep_n.is_empty() {
            return Err(Error::Empty("sweep_n"));
        }
        if !(self.grid_step > 0.0) {
            return Err(Error::invalid(format!("grid_step must be positive, got {}", self.grid_step)));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value <= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaFamilyPoint {
    pub beta: f64,
    pub within_d: f64,
    pub cross_d: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub f1: f64,
    pub f2: f64,
    pub f2_lower: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Details {
    Descent {
        objective: Objective,
        best_restart: usize,
        final_values: Vec<f64>,
        best_value: f64,
        /// Exactly collapsed configuration with the target cross-class distance.
        collapsed_value: f64,
        f1_value: f64,
        f2_value: f64,
        max_within_d: f64,
        min_cross_d: f64,
        max_cross_d: f64,
        /// Margin only: objective along `D_within = β−α, D_cross = β+α`.
        beta_family: Vec<BetaFamilyPoint>,
    },
    Crossover {
        objective: Objective,
        rows: Vec<SweepRow>,
        /// Smallest tested n from which f2 stays below f1.
        crossover_n: Option<usize>,
    },
    PairSweep {
        anchor: usize,
        moved: usize,
        /// Claim 4 only: the anchor's nearest sample and its distance.
        near: Option<(usize, f64)>,
        target: f64,
        argmin: f64,
        min_value: f64,
        curve: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub claim: Claim,
    pub params: VerifyParams,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub details: Details,
}

pub fn verify_claim(claim: Claim, params: &VerifyParams) -> Result<VerifyReport> {
    let params = params.resolved(claim);
    params.validate()?;
    let (checks, details) = match claim {
        Claim::Thm1 => descent(Objective::Trip, &params)?,
        Claim::Thm2 => descent(Objective::Margin, &params)?,
        Claim::Claim1 => crossover(Objective::EpsTrip, &params)?,
        Claim::Claim2 => crossover(Objective::EpsMargin, &params)?,
        Claim::Claim3 => pair_sweep(false, &params)?,
        Claim::Claim4 => pair_sweep(true, &params)?,
    };
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { claim, params, passed, checks, details })
}

/// Embedding with every within-class squared distance `within` and every
/// cross-class one `cross` (`cross ≥ within`), in `n + t` dimensions.
pub fn two_level_embedding(partition: &[usize], t: usize, within: f64, cross: f64) -> Result<EmbeddingSet> {
    if !(within >= 0.0 && cross >= within) {
        return Err(Error::invalid(format!("need 0 ≤ within ≤ cross, got {within} and {cross}")));
    }
    let n = partition.len();
    let s = (within / 2.0).sqrt();
    let h = ((cross - within) / 2.0).sqrt();
    let mut coords = Array2::zeros((n, n + t));
    for (i, &c) in partition.iter().enumerate() {
        if c >= t {
            return Err(Error::IndexOutOfRange { index: c, len: t });
        }
        coords[[i, i]] = s;
        coords[[i, n + c]] = h;
    }
    EmbeddingSet::new(coords)
}

fn class_distance_range(emb: &EmbeddingSet, partition: &[usize]) -> Result<(f64, f64, f64)> {
    let dm = pairwise_sq_dist(emb)?;
    let (mut within, mut cross_lo, mut cross_hi) = (0.0f64, f64::INFINITY, 0.0f64);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let d = dm.get(i, j);
            if partition[i] == partition[j] {
                within = within.max(d);
            } else {
                cross_lo = cross_lo.min(d);
                cross_hi = cross_hi.max(d);
            }
        }
    }
    Ok((within, cross_lo, cross_hi))
}

fn descent(objective: Objective, params: &VerifyParams) -> Result<(Vec<Check>, Details)> {
    let (n, alpha) = (params.n, params.alpha);
    let beta = params.beta.unwrap();
    let model = NoisyLabelModel::contiguous(n, params.t, params.p)?;
    let spec = ExpectedObjectiveSpec::new(objective, alpha, beta, n);
    let config = TrainConfig {
        mode: TrainMode::ExactExpected,
        learning_rate: params.learning_rate.unwrap(),
        steps: params.steps.unwrap(),
        smoothing: params.smoothing.unwrap(),
        restarts: params.restarts,
        seed: params.seed,
        learn_beta: false,
        ..TrainConfig::default()
    };
    let inits = random_inits(n, params.dim, params.restarts, params.seed)?;
    let outcome = train_exact(&inits, &model, &spec, &config)?;
    let best = outcome.best_run();
    let (max_within_d, min_cross_d, max_cross_d) = class_distance_range(&best.emb, model.partition())?;

    let target_cross = match objective {
        Objective::Margin => beta + alpha,
        _ => alpha,
    };
    let collapsed = two_level_embedding(model.partition(), params.t, 0.0, target_cross)?;
    let collapsed_value = expected_objective(&collapsed, &model, &spec)?;
    let (f1, f2) = reference_embeddings(n, params.t, alpha, params.jitter)?;
    let f1_value = expected_objective(&f1, &model, &spec)?;
    let f2_value = expected_objective(&f2, &model, &spec)?;

    let mut beta_family = Vec::new();
    if objective == Objective::Margin {
        for mult in [1.0, 2.0, 3.0] {
            let b = mult * alpha;
            let emb = two_level_embedding(model.partition(), params.t, b - alpha, b + alpha)?;
            let value = expected_objective(&emb, &model, &ExpectedObjectiveSpec::new(objective, alpha, b, n))?;
            beta_family.push(BetaFamilyPoint { beta: b, within_d: b - alpha, cross_d: b + alpha, value });
        }
    }

    let mut checks = vec![Check::at_most("max_within_d", max_within_d, 1e-3 * alpha)];
    match objective {
        Objective::Margin => {
            let dev = (min_cross_d - target_cross).abs().max((max_cross_d - target_cross).abs()) / target_cross;
            checks.push(Check::at_most("cross_d_relative_deviation", dev, 0.02));
        }
        _ => checks.push(Check::at_most("best_value_minus_f2", best.final_value - f2_value, -1e-6)),
    }
    let details = Details::Descent {
        objective,
        best_restart: outcome.best,
        final_values: outcome.runs.iter().map(|r| r.final_value).collect(),
        best_value: best.final_value,
        collapsed_value,
        f1_value,
        f2_value,
        max_within_d,
        min_cross_d,
        max_cross_d,
        beta_family,
    };
    Ok((checks, details))
}

fn crossover(objective: Objective, params: &VerifyParams) -> Result<(Vec<Check>, Details)> {
    let mut ns = params.sweep_n.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut rows = Vec::with_capacity(ns.len());
    for &n in &ns {
        let model = NoisyLabelModel::contiguous(n, params.t, params.p)?;
        let spec = ExpectedObjectiveSpec::new(objective, params.alpha, params.beta.unwrap(), n);
        let (f1, f2) = reference_embeddings(n, params.t, params.alpha, params.jitter)?;
        let f1 = expected_objective(&f1, &model, &spec)?;
        let f2 = expected_objective(&f2, &model, &spec)?;
        rows.push(SweepRow { n, f1, f2, f2_lower: f2 < f1 });
    }
    let tail = rows.iter().rev().take_while(|r| r.f2_lower).count();
    let crossover_n = (tail > 0).then(|| rows[rows.len() - tail].n);
    let last = rows.last().unwrap();
    let checks = vec![
        Check::at_most("crossover_found", if crossover_n.is_some() { 0.0 } else { 1.0 }, 0.0),
        Check::at_most("largest_n_f2_minus_f1", last.f2 - last.f1, 0.0),
    ];
    Ok((checks, Details::Crossover { objective, rows, crossover_n }))
}

/// Moves the anchor's farthest-ranked sample along its ray and scans the
/// per-pair easy-positive contribution over a grid of squared distances.
fn pair_sweep(triplet: bool, params: &VerifyParams) -> Result<(Vec<Check>, Details)> {
    let (n, alpha) = (params.n, params.alpha);
    let beta = params.beta.unwrap();
    let model = NoisyLabelModel::contiguous(n, params.t, params.p)?;
    let (base, _) = reference_embeddings(n, params.t, alpha, params.jitter)?;
    let anchor = 0;
    let order = neighbor_order(&pairwise_sq_dist(&base)?);
    let moved = *order.of(anchor).last().unwrap();
    let near = order.of(anchor)[0];
    let d_near = base.sq_dist(anchor, near);
    let target = if triplet { d_near + alpha } else { beta + alpha };

    let origin = base.row(anchor).to_owned();
    let dir = &base.row(moved) - &origin;
    let dir = &dir / dir.dot(&dir).sqrt();
    let s_pair = pair_same_prob(&model, anchor, moved)?;
    let steps = (2.0 * target / params.grid_step).ceil() as usize;
    let mut curve = Vec::with_capacity(steps + 1);
    let mut coords = base.coords().to_owned();
    for g in 0..=steps {
        let d = g as f64 * params.grid_step;
        coords.row_mut(moved).assign(&(&origin + &(&dir * d.sqrt())));
        let emb = EmbeddingSet::new(coords.clone())?;
        let order = neighbor_order(&pairwise_sq_dist(&emb)?);
        let value = if triplet {
            let c_near = eps_coeff(&model, &order, anchor, near, Some(moved))?;
            let c_far = eps_coeff(&model, &order, anchor, moved, Some(near))?;
            c_near * (d_near - d + alpha).max(0.0) + c_far * (d - d_near + alpha).max(0.0)
        } else {
            let c_pos = eps_coeff(&model, &order, anchor, moved, None)?;
            c_pos * (d - beta + alpha).max(0.0) + (1.0 - s_pair) * (beta - d + alpha).max(0.0)
        };
        curve.push((d, value));
    }
    let &(argmin, min_value) = curve.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let checks =
        vec![Check::at_most("argmin_distance_to_target", (argmin - target).abs(), params.grid_step * (1.0 + 1e-9))];
    let near = triplet.then_some((near, d_near));
    Ok((checks, Details::PairSweep { anchor, moved, near, target, argmin, min_value, curve }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn claim_ids_round_trip() {
        for c in Claim::ALL {
            assert_eq!(c.id().parse::<Claim>().unwrap(), c);
        }
        assert!("thm3".parse::<Claim>().is_err());
    }

    #[test]
    fn two_level_distances() {
        let part = [0, 0, 1, 1, 1];
        let emb = two_level_embedding(&part, 2, 0.3, 0.7).unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                let want = if part[i] == part[j] { 0.3 } else { 0.7 };
                assert_abs_diff_eq!(emb.sq_dist(i, j), want, epsilon = 1e-15);
            }
        }
        assert!(two_level_embedding(&part, 2, 0.5, 0.4).is_err());
    }

    #[test]
    fn margin_family_is_flat() {
        // Within β−α, cross β+α: every hinge sits at 0 or 2α whatever β is.
        let model = NoisyLabelModel::contiguous(8, 2, 0.9).unwrap();
        let vals: Vec<f64> = [0.2, 0.4, 0.6]
            .iter()
            .map(|&b| {
                let emb = two_level_embedding(model.partition(), 2, b - 0.2, b + 0.2).unwrap();
                expected_objective(&emb, &model, &ExpectedObjectiveSpec::new(Objective::Margin, 0.2, b, 8)).unwrap()
            })
            .collect();
        assert_abs_diff_eq!(vals[0], vals[1], epsilon = 1e-12);
        assert_abs_diff_eq!(vals[0], vals[2], epsilon = 1e-12);
    }

    #[test]
    fn sweeps_and_pair_claims() {
        let params = VerifyParams::default();
        for claim in [Claim::Claim1, Claim::Claim2, Claim::Claim3, Claim::Claim4] {
            let r = verify_claim(claim, &params).unwrap();
            assert!(r.passed, "{claim}: {:?}", r.checks);
        }
        let r = verify_claim(Claim::Claim2, &params).unwrap();
        let Details::Crossover { crossover_n, rows, .. } = r.details else { panic!() };
        assert_eq!(crossover_n, Some(8));
        assert!(!rows[0].f2_lower);
    }

    #[test]
    fn rejects_oversized_params() {
        let params = VerifyParams { n: 28, ..VerifyParams::default() };
        assert!(verify_claim(Claim::Thm1, &params).is_err());
        let params = VerifyParams { t: 3, ..VerifyParams::default() };
        assert!(verify_claim(Claim::Claim1, &params).is_err());
    }
}
