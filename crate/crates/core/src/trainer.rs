//! Optimization: full-batch descent on the exact expected objectives and
//! stochastic P×K training of an encoder with a miner and a batch loss.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{backward, embed, forward, EncoderParams, EncoderVariant, Inputs};
use crate::error::{Error, Result};
use crate::geometry::EmbeddingSet;
use crate::losses::{batch_loss, BetaStore, LossConfig, LossVariant};
use crate::metrics::{collapse_diagnostics, kmeans, nmi, recall_at_k};
use crate::mining::{build_pk_batch, expand_tuples, MinerConfig};
use crate::noisy::{expected_objective, smoothed_objective_grad, ExpectedObjectiveSpec, NoisyLabelModel};
use crate::par;

/// Halvings tried before an exact-mode step is given up.
pub const MAX_BACKTRACK: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    ExactExpected,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Step size for β; defaults to `learning_rate`.
    pub beta_learning_rate: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Exact mode: descent steps per restart.
    pub steps: usize,
    /// Stochastic mode: passes over the training split.
    pub epochs: usize,
    /// Stochastic mode: batches per epoch; defaults to `⌈n_train / (P·K)⌉`.
    pub batches_per_epoch: Option<usize>,
    pub restarts: usize,
    pub seed: u64,
    /// Update β in exact mode and for the margin loss.
    pub learn_beta: bool,
    /// Exact mode: initial hinge smoothing width for search directions.
    pub smoothing: f64,
    pub loss: LossConfig,
    pub miner: MinerConfig,
    /// Evaluate every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub eval_ks: Vec<usize>,
    /// Cluster count multiplier for NMI+.
    pub nmi_plus_multiplier: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Stochastic,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-5,
            beta_learning_rate: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            epochs: 10,
            batches_per_epoch: None,
            restarts: 8,
            seed: 0,
            learn_beta: true,
            smoothing: 0.0,
            loss: LossConfig::default(),
            miner: MinerConfig::default(),
            eval_every: 0,
            eval_ks: vec![1, 2, 4, 8],
            nmi_plus_multiplier: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if let Some(b) = self.beta_learning_rate {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::invalid(format!("beta_learning_rate must be non-negative, got {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam parameters need β1, β2 ∈ [0, 1) and ε > 0"));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::invalid(format!("smoothing must be non-negative, got {}", self.smoothing)));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::invalid("eval_ks must be non-empty and positive"));
        }
        if self.nmi_plus_multiplier == 0 {
            return Err(Error::invalid("nmi_plus_multiplier must be at least 1"));
        }
        self.loss.validate()?;
        self.miner.validate()
    }

    fn optimizer(&self, lr: f64) -> OptimizerState {
        OptimizerState::new(self.optimizer, lr, self.adam_beta1, self.adam_beta2, self.adam_eps)
    }
}

/// Per-tensor optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { kind, lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.9, 0.999, 1e-8)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over a list of parameter tensors. A non-finite
/// gradient rejects the whole step and leaves parameters and state intact.
pub fn update_params(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            expected: format!("{} gradient tensors", params.len()),
            actual: grads.len().to_string(),
        });
    }
    for (t, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape {
                expected: format!("tensor {t} of length {}", p.len()),
                actual: g.len().to_string(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(t));
        }
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (pv, gv) in p.iter_mut().zip(g.iter()) {
                    *pv -= state.lr * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                state.v = state.m.clone();
            }
            let (b1, b2) = (state.beta1, state.beta2);
            let c1 = 1.0 - b1.powi(state.step as i32);
            let c2 = 1.0 - b2.powi(state.step as i32);
            for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let (m, v) = (&mut state.m[t], &mut state.v[t]);
                for k in 0..p.len() {
                    m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                    v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                    p[k] -= state.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
                }
            }
        }
    }
    Ok(())
}

fn slices_mut(ts: &mut [Array2<f64>]) -> Vec<&mut [f64]> {
    ts.iter_mut().map(|t| t.as_slice_mut().expect("standard layout")).collect()
}

fn slices(ts: &[Array2<f64>]) -> Vec<&[f64]> {
    ts.iter().map(|t| t.as_slice().expect("standard layout")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactRun {
    pub initial_value: f64,
    pub final_value: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub trajectory: Vec<f64>,
    #[serde(skip)]
    pub emb: EmbeddingSet,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactOutcome {
    /// Index of the run with the lowest final objective.
    pub best: usize,
    pub runs: Vec<ExactRun>,
}

impl ExactOutcome {
    pub fn best_run(&self) -> &ExactRun {
        &self.runs[self.best]
    }
}

/// `count` free-point configurations with `N(0, 1)·0.1` coordinates, one
/// ChaCha stream per configuration.
pub fn random_inits(n: usize, m: usize, count: usize, seed: u64) -> Result<Vec<EmbeddingSet>> {
    (0..count)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let p = crate::encoder::init_params(EncoderVariant::FreeTable, &[n, m], rng.next_u64())?;
            EmbeddingSet::new(p.tensors()[0].clone())
        })
        .collect()
}

/// Gradient descent on an expected objective from each initial
/// configuration.
///
/// Every step starts from twice the previous accepted step size (capped at
/// `config.learning_rate`) and halves it on an increase, up to
/// [`MAX_BACKTRACK`] times. With `config.smoothing = τ > 0` the descent runs
/// in stages on hinge-smoothed objectives of width `τ, τ/10, …` down to
/// [`MIN_SMOOTHING`], followed by a stage on the exact objective; each stage
/// gets an equal share of `config.steps` and ends early when no step size
/// decreases its objective. Easy-positive objectives accept every step
/// because their coefficients change with the neighbor order.
pub fn train_exact(
    inits: &[EmbeddingSet],
    model: &NoisyLabelModel,
    spec: &ExpectedObjectiveSpec,
    config: &TrainConfig,
) -> Result<ExactOutcome> {
    config.validate()?;
    if inits.is_empty() {
        return Err(Error::Empty("train_exact needs at least one initial configuration"));
    }
    let runs = par::try_map_range(inits.len(), |r| descend(&inits[r], model, spec, config))?;
    let best =
        (0..runs.len()).min_by(|&a, &b| runs[a].final_value.total_cmp(&runs[b].final_value).then(a.cmp(&b))).unwrap();
    Ok(ExactOutcome { best, runs })
}

/// Narrowest smoothing stage of exact-mode descent.
pub const MIN_SMOOTHING: f64 = 1e-6;

fn smoothing_schedule(tau0: f64) -> Vec<f64> {
    let mut taus = Vec::new();
    let mut tau = tau0;
    while tau >= MIN_SMOOTHING {
        taus.push(tau);
        tau /= 10.0;
    }
    taus.push(0.0);
    taus
}

fn descend(
    init: &EmbeddingSet,
    model: &NoisyLabelModel,
    spec: &ExpectedObjectiveSpec,
    config: &TrainConfig,
) -> Result<ExactRun> {
    let learn_beta = config.learn_beta && spec.objective.uses_beta();
    let beta_lr_scale = config.beta_learning_rate.map_or(1.0, |b| b / config.learning_rate.max(f64::MIN_POSITIVE));
    let taus = smoothing_schedule(config.smoothing);
    let per_stage = config.steps.div_ceil(taus.len());
    let mut remaining = config.steps;
    let mut x = init.clone();
    let mut cur = spec.clone();
    let mut trajectory = vec![expected_objective(&x, model, &cur)?];
    for &tau in &taus {
        let mut g = smoothed_objective_grad(&x, model, &cur, tau)?;
        let mut lr = config.learning_rate;
        for _ in 0..per_stage.min(remaining) {
            let norm2: f64 = g.grad.iter().map(|v| v * v).sum::<f64>()
                + if learn_beta { g.beta_grad.iter().map(|v| v * v).sum::<f64>() } else { 0.0 };
            if norm2 == 0.0 || !norm2.is_finite() {
                break;
            }
            lr = (2.0 * lr).min(config.learning_rate);
            let mut accepted = None;
            for _ in 0..=MAX_BACKTRACK {
                let coords = x.coords().to_owned() - &(&g.grad * lr);
                if let Ok(cand) = EmbeddingSet::new(coords) {
                    let mut cand_spec = cur.clone();
                    if learn_beta {
                        for (b, d) in cand_spec.beta.iter_mut().zip(&g.beta_grad) {
                            *b = (*b - lr * beta_lr_scale * d).max(0.0);
                        }
                    }
                    let cg = smoothed_objective_grad(&cand, model, &cand_spec, tau)?;
                    if spec.objective.is_eps() || cg.value <= g.value {
                        accepted = Some((cand, cand_spec, cg));
                        break;
                    }
                }
                lr *= 0.5;
            }
            let Some((nx, ns, ng)) = accepted else { break };
            x = nx;
            cur = ns;
            g = ng;
            remaining -= 1;
            trajectory.push(if tau == 0.0 { g.value } else { expected_objective(&x, model, &cur)? });
        }
    }
    let final_value = *trajectory.last().unwrap();
    Ok(ExactRun { initial_value: trajectory[0], final_value, trajectory, emb: x, beta: cur.beta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub samples: usize,
    /// Recall@k with class labels, one entry per `eval_ks`.
    pub recall_class: Vec<f64>,
    /// Recall@k with mode labels.
    pub recall_mode: Vec<f64>,
    /// NMI of k-means with `#classes` clusters against class labels.
    pub nmi_class: f64,
    /// NMI of k-means with `multiplier × #classes` clusters against class labels.
    pub nmi_plus_class: f64,
    /// The same clustering scored against mode labels.
    pub nmi_plus_mode: f64,
    pub collapse_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub train: SplitMetrics,
    pub test: Option<SplitMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub tuples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Steps dropped because of a non-finite gradient.
    pub skipped_steps: usize,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

fn distinct(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Embeds the given dataset rows with the encoder.
pub fn embed_rows(params: &EncoderParams, ds: &Dataset, rows: &[usize]) -> Result<EmbeddingSet> {
    match params.variant() {
        EncoderVariant::FreeTable => embed(params, Inputs::Indices(rows)),
        EncoderVariant::Mlp => {
            let x = ds.features.select(ndarray::Axis(0), rows);
            embed(params, Inputs::Features(x.view()))
        }
    }
}

/// Retrieval and clustering metrics of `rows` under the current encoder.
pub fn evaluate_split(
    params: &EncoderParams,
    ds: &Dataset,
    rows: &[usize],
    config: &TrainConfig,
) -> Result<SplitMetrics> {
    let mut emb = embed_rows(params, ds, rows)?;
    if config.loss.variant == LossVariant::MultiSimilarity {
        emb = emb.normalized();
    }
    let classes: Vec<usize> = rows.iter().map(|&i| ds.class_labels[i]).collect();
    let modes: Vec<usize> = rows.iter().map(|&i| ds.modes()[i]).collect();
    let n = rows.len();
    let ks: Vec<usize> = config.eval_ks.iter().copied().filter(|&k| k < n).collect();
    let kc = distinct(&classes);
    let seed = config.seed;
    let nmi_class = nmi(&kmeans(&emb, kc.min(n), seed)?, &classes)?;
    let plus = kmeans(&emb, (config.nmi_plus_multiplier * kc).min(n), seed)?;
    let collapse_score = if kc >= 2 { Some(collapse_diagnostics(&emb, &classes)?.collapse_score) } else { None };
    Ok(SplitMetrics {
        samples: n,
        recall_class: recall_at_k(&emb, &classes, &ks)?,
        recall_mode: recall_at_k(&emb, &modes, &ks)?,
        nmi_class,
        nmi_plus_class: nmi(&plus, &classes)?,
        nmi_plus_mode: nmi(&plus, &modes)?,
        collapse_score: collapse_score.filter(|v| v.is_finite()),
    })
}

/// Mini-batch training: every step draws a P×K batch from the train split,
/// mines tuples on the batch embedding, and takes one optimizer step on the
/// encoder (and on β for the margin loss).
pub fn train_stochastic(
    ds: &Dataset,
    mut params: EncoderParams,
    config: &TrainConfig,
) -> Result<(EncoderParams, BetaStore, TrainReport)> {
    config.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Empty("train split is empty"));
    }
    if params.variant() == EncoderVariant::FreeTable && params.dims()[0] != ds.len() {
        return Err(Error::Shape {
            expected: format!("free table with {} rows", ds.len()),
            actual: params.dims()[0].to_string(),
        });
    }
    let train_labels: Vec<usize> = ds.train.iter().map(|&i| ds.class_labels[i]).collect();
    let (p, k) = (config.miner.classes_per_batch, config.miner.samples_per_class);
    let per_epoch = config.batches_per_epoch.unwrap_or_else(|| ds.train.len().div_ceil(p * k)).max(1);
    let mut beta = BetaStore::new(ds.len(), config.loss.beta_init);
    let mut opt = config.optimizer(config.learning_rate);
    let mut beta_opt = config.optimizer(config.beta_learning_rate.unwrap_or(config.learning_rate));
    let uses_beta = config.loss.variant == LossVariant::Margin && config.learn_beta;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport { steps: Vec::new(), evals: Vec::new(), skipped_steps: 0 };
    let mut step = 0;

    let eval = |params: &EncoderParams, epoch: usize, step: usize| -> Result<EvalRecord> {
        let train = evaluate_split(params, ds, &ds.train, config)?;
        let test = if ds.test != ds.train && ds.test.len() >= 2 {
            Some(evaluate_split(params, ds, &ds.test, config)?)
        } else {
            None
        };
        Ok(EvalRecord { epoch, step, train, test })
    };

    for epoch in 0..config.epochs {
        for _ in 0..per_epoch {
            let picked = build_pk_batch(&train_labels, p, k, rng.next_u64())?;
            let rows: Vec<usize> = picked.iter().map(|&i| ds.train[i]).collect();
            let labels: Vec<usize> = rows.iter().map(|&i| ds.class_labels[i]).collect();
            let x;
            let inputs = match params.variant() {
                EncoderVariant::FreeTable => Inputs::Indices(&rows),
                EncoderVariant::Mlp => {
                    x = ds.features.select(ndarray::Axis(0), &rows);
                    Inputs::Features(x.view())
                }
            };
            let (emb, cache) = forward(&params, inputs)?;
            let members: Vec<usize> = (0..rows.len()).collect();
            let batch = expand_tuples(
                &emb,
                &members,
                &labels,
                &config.miner,
                config.loss.variant,
                config.loss.alpha,
                &mut rng,
            )?;
            let beta_b = BetaStore::from_vec(beta.gather(&rows))?;
            let lg = batch_loss(&emb, &batch, &config.loss, &beta_b)?;
            let grads = backward(&params, &cache, &lg.grad)?;
            report.steps.push(StepRecord { step, epoch, loss: lg.loss, tuples: batch.len() });
            step += 1;
            match update_params(&mut slices_mut(params.tensors_mut()), &slices(&grads), &mut opt) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => {
                    report.skipped_steps += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            if uses_beta {
                let mut full = vec![0.0; ds.len()];
                for (r, &i) in rows.iter().enumerate() {
                    full[i] += lg.beta_grad[r];
                }
                update_params(&mut [beta.as_mut_slice()], &[&full], &mut beta_opt)?;
                beta.clamp_non_negative();
            }
        }
        let last = epoch + 1 == config.epochs;
        if last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) {
            report.evals.push(eval(&params, epoch + 1, step)?);
        }
    }
    if config.epochs == 0 {
        report.evals.push(eval(&params, 0, 0)?);
    }
    Ok((params, beta, report))
}
