//! Pair sampling, padded batches, Adam, and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agnn::{checkpoint, forward_on_graph, register, ModelDims, ModelParams, SubgraphTensor};
use crate::error::{PgatError, Result};
pub use crate::numerics::stream_rng;
use crate::numerics::{Graph, Matrix};
use crate::objective::{similarity_on_graph, BceLoss};
use crate::pose_graph::{build_subgraphs, has_positive_pair, pair_labels, KeynodeSet, LabelBands, PairLabels, Subgraph, Trajectory};

/// Training hyperparameters. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability that a drawn pair is forced to contain a positive keynode pair.
    pub positive_rate: f64,
    pub d_pos: f64,
    pub d_neg: f64,
    /// Travel distance that bounds one subgraph, meters.
    pub distance_threshold: f64,
    pub descriptor_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Divide the batch loss (and its gradient) by the active pair count.
    pub normalize_loss: bool,
    /// Only "f64" is supported.
    pub precision: String,
    /// Write a zero wall-time column so metrics logs are byte-reproducible.
    pub deterministic: bool,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 1500,
            positive_rate: 0.30,
            d_pos: 10.0,
            d_neg: 50.0,
            distance_threshold: 200.0,
            descriptor_dim: 256,
            layers: 9,
            heads: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            normalize_loss: true,
            precision: "f64".into(),
            deterministic: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(PgatError::Config(format!(
                "positive_rate {} outside [0, 1]",
                self.positive_rate
            )));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(PgatError::Config("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(PgatError::Config("batch_size must be positive".into()));
        }
        if !(self.distance_threshold > 0.0) {
            return Err(PgatError::Config("distance_threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(PgatError::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.precision != "f64" {
            return Err(PgatError::Config(format!(
                "precision `{}` is not supported; use f64",
                self.precision
            )));
        }
        self.bands().validate()?;
        self.dims().validate()
    }

    pub fn bands(&self) -> LabelBands {
        LabelBands {
            d_pos: self.d_pos,
            d_neg: self.d_neg,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            descriptor_dim: self.descriptor_dim,
            layers: self.layers,
            heads: self.heads,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Parses the flat `key = value` config format.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| PgatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PgatError::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// Keynodes plus every subgraph cut from the training trajectories.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub keynodes: KeynodeSet,
    pub subgraphs: Vec<Subgraph>,
}

impl TrainingSet {
    pub fn from_trajectories(trajectories: &[Trajectory], distance_threshold: f64) -> Result<Self> {
        let keynodes = KeynodeSet::from_trajectories(trajectories)?;
        let mut subgraphs = Vec::new();
        for t in trajectories {
            subgraphs.extend(build_subgraphs(t, distance_threshold)?);
        }
        if subgraphs.is_empty() {
            return Err(PgatError::Dataset("no subgraph has two or more keynodes".into()));
        }
        Ok(TrainingSet { keynodes, subgraphs })
    }
}

/// One sampled pair of subgraph indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairDraw {
    pub a: usize,
    pub b: usize,
    /// Drawn from the positive index rather than uniformly.
    pub forced_positive: bool,
}

/// Draws subgraph pairs at a controlled positive rate.
#[derive(Clone, Debug)]
pub struct PairSampler {
    count: usize,
    positives: Vec<(usize, usize)>,
}

impl PairSampler {
    /// Indexes every ordered pair `(a, b)`, `a != b`, that shares at least one
    /// keynode pair closer than `d_pos`.
    pub fn new(subgraphs: &[Subgraph], keynodes: &KeynodeSet, d_pos: f64) -> Result<Self> {
        if subgraphs.is_empty() {
            return Err(PgatError::Sampling("no subgraphs to sample from".into()));
        }
        let mut positives = Vec::new();
        for i in 0..subgraphs.len() {
            for j in i + 1..subgraphs.len() {
                if has_positive_pair(&subgraphs[i], &subgraphs[j], keynodes, d_pos)? {
                    positives.push((i, j));
                    positives.push((j, i));
                }
            }
        }
        positives.sort_unstable();
        Ok(PairSampler {
            count: subgraphs.len(),
            positives,
        })
    }

    pub fn positive_pairs(&self) -> &[(usize, usize)] {
        &self.positives
    }

    pub fn subgraph_count(&self) -> usize {
        self.count
    }

    /// With probability `positive_rate` draw from the positive index,
    /// otherwise draw two distinct subgraphs uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, positive_rate: f64, rng: &mut R) -> Result<PairDraw> {
        if rng.random_bool(positive_rate.clamp(0.0, 1.0)) {
            if self.positives.is_empty() {
                return Err(PgatError::Sampling(
                    "a positive pair was requested but no subgraph pair overlaps".into(),
                ));
            }
            let (a, b) = self.positives[rng.random_range(0..self.positives.len())];
            return Ok(PairDraw {
                a,
                b,
                forced_positive: true,
            });
        }
        let a = rng.random_range(0..self.count);
        let b = if self.count > 1 {
            let k = rng.random_range(0..self.count - 1);
            if k >= a {
                k + 1
            } else {
                k
            }
        } else {
            a
        };
        Ok(PairDraw {
            a,
            b,
            forced_positive: false,
        })
    }
}

/// Padded tensors and labels for a batch of subgraph pairs.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub a: Vec<SubgraphTensor>,
    pub b: Vec<SubgraphTensor>,
    /// Unpadded N×M labels per pair.
    pub labels: Vec<PairLabels>,
    /// Column count every tensor was padded to.
    pub width: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pads every subgraph to the largest node count in the batch and labels each pair.
pub fn make_batch(pairs: &[(&Subgraph, &Subgraph)], keynodes: &KeynodeSet, bands: LabelBands) -> Result<PairBatch> {
    make_batch_padded(pairs, keynodes, bands, 0)
}

/// [`make_batch`] with a lower bound on the padded width.
pub fn make_batch_padded(
    pairs: &[(&Subgraph, &Subgraph)],
    keynodes: &KeynodeSet,
    bands: LabelBands,
    min_width: usize,
) -> Result<PairBatch> {
    if pairs.is_empty() {
        return Err(PgatError::Input("a batch needs at least one pair".into()));
    }
    let width = pairs
        .iter()
        .map(|(a, b)| a.len().max(b.len()))
        .max()
        .unwrap_or(0)
        .max(min_width);
    let mut batch = PairBatch {
        a: Vec::with_capacity(pairs.len()),
        b: Vec::with_capacity(pairs.len()),
        labels: Vec::with_capacity(pairs.len()),
        width,
    };
    let dim = keynodes.descriptor_dim();
    for (a, b) in pairs {
        let ta = SubgraphTensor::from_subgraph(a, keynodes, width)?;
        let tb = SubgraphTensor::from_subgraph(b, keynodes, width)?;
        if ta.descriptors.rows() != dim || tb.descriptors.rows() != dim {
            return Err(PgatError::Dataset("descriptor dims differ within a batch".into()));
        }
        batch.labels.push(pair_labels(a, b, keynodes, bands)?);
        batch.a.push(ta);
        batch.b.push(tb);
    }
    Ok(batch)
}

fn check_batch_dims(model: &ModelParams, a: &SubgraphTensor) -> Result<()> {
    if a.descriptors.rows() != model.dims.descriptor_dim {
        return Err(PgatError::Dataset(format!(
            "{}-dim descriptors for a model with E = {}",
            a.descriptors.rows(),
            model.dims.descriptor_dim
        )));
    }
    Ok(())
}

/// Summed loss of one pair and its gradient with respect to every parameter.
pub fn pair_loss_and_grad(
    model: &ModelParams,
    a: &SubgraphTensor,
    b: &SubgraphTensor,
    labels: &PairLabels,
) -> Result<(BceLoss, ModelParams)> {
    check_batch_dims(model, a)?;
    let mut g = Graph::new();
    let mv = register(&mut g, model);
    let (fa, fb) = forward_on_graph(&mut g, &mv, a, b)?;
    let fa = g.select_columns(fa, &a.valid_columns())?;
    let fb = g.select_columns(fb, &b.valid_columns())?;
    let s = similarity_on_graph(&mut g, fa, fb)?;
    let loss = g.weighted_bce(s, &labels.y, &labels.omega)?;
    let value = g.value(loss)[(0, 0)];
    let mut grads = g.backward(loss)?;
    let grad = mv.map(|_, v| {
        grads.take(*v).unwrap_or_else(|| {
            let m = g.value(*v);
            Matrix::zeros(m.rows(), m.cols())
        })
    });
    Ok((
        BceLoss {
            loss: value,
            active_pairs: labels.active_pairs(),
        },
        grad,
    ))
}

/// Forward-only pair loss.
pub fn pair_loss(model: &ModelParams, a: &SubgraphTensor, b: &SubgraphTensor, labels: &PairLabels) -> Result<BceLoss> {
    check_batch_dims(model, a)?;
    let mut g = Graph::new();
    let mv = register(&mut g, model);
    let (fa, fb) = forward_on_graph(&mut g, &mv, a, b)?;
    let fa = g.select_columns(fa, &a.valid_columns())?;
    let fb = g.select_columns(fb, &b.valid_columns())?;
    let s = similarity_on_graph(&mut g, fa, fb)?;
    let loss = g.weighted_bce(s, &labels.y, &labels.omega)?;
    Ok(BceLoss {
        loss: g.value(loss)[(0, 0)],
        active_pairs: labels.active_pairs(),
    })
}

/// Summed batch loss and gradient. Pairs are evaluated in parallel and
/// reduced in batch order, so results do not depend on the thread count.
pub fn batch_loss_and_grad(model: &ModelParams, batch: &PairBatch) -> Result<(BceLoss, ModelParams)> {
    let per_pair: Vec<Result<(BceLoss, ModelParams)>> = (0..batch.len())
        .into_par_iter()
        .map(|k| pair_loss_and_grad(model, &batch.a[k], &batch.b[k], &batch.labels[k]))
        .collect();
    let mut total = BceLoss {
        loss: 0.0,
        active_pairs: 0,
    };
    let mut grad = model.zeros_like();
    for r in per_pair {
        let (l, g) = r?;
        total.loss += l.loss;
        total.active_pairs += l.active_pairs;
        grad.add_assign(&g)?;
    }
    Ok((total, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment estimates shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        AdamState {
            m: model.zeros_like(),
            v: model.zeros_like(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(PgatError::Training {
            param: name,
            msg: "non-finite gradient".into(),
        });
    }
    if params.shapes() != grads.shapes() || params.shapes() != state.m.shapes() {
        return Err(PgatError::dim("parameter, gradient and moment layouts differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);

    let mut g_leaves = Vec::new();
    grads.visit(|_, m| g_leaves.push(m));
    let mut ms = take_leaves(&mut state.m);
    let mut vs = take_leaves(&mut state.v);
    let mut idx = 0;
    params.visit_mut(|_, p| {
        let (ps, gs) = (p.as_mut_slice(), g_leaves[idx].as_slice());
        let (mk, vk) = (ms[idx].as_mut_slice(), vs[idx].as_mut_slice());
        idx += 1;
        for k in 0..ps.len() {
            mk[k] = cfg.beta1 * mk[k] + (1.0 - cfg.beta1) * gs[k];
            vk[k] = cfg.beta2 * vk[k] + (1.0 - cfg.beta2) * gs[k] * gs[k];
            let m_hat = mk[k] / c1;
            let v_hat = vk[k] / c2;
            ps[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    restore_leaves(&mut state.m, ms);
    restore_leaves(&mut state.v, vs);
    Ok(())
}

fn take_leaves(model: &mut ModelParams) -> Vec<Matrix> {
    let mut out = Vec::new();
    model.visit_mut(|_, m| out.push(std::mem::replace(m, Matrix::zeros(0, 0))));
    out
}

fn restore_leaves(model: &mut ModelParams, leaves: Vec<Matrix>) {
    let mut it = leaves.into_iter();
    model.visit_mut(|_, m| *m = it.next().expect("same layout"));
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub mean_active_loss: f64,
    pub active_pairs: usize,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,mean_active_loss,active_pairs,wall_time_s";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9},{},{:.3}\n",
            r.epoch, r.step, r.mean_active_loss, r.active_pairs, r.wall_time_s
        ));
    }
    out
}

/// Statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: BceLoss,
}

/// Model, optimizer state and sampler for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelParams,
    pub adam: AdamState,
    pub steps: usize,
}

impl Trainer {
    /// Fresh model initialized from stream 0 of the root seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let model = ModelParams::init(config.dims(), &mut rng)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: ModelParams) -> Self {
        let adam = AdamState::new(&model);
        Trainer {
            config,
            model,
            adam,
            steps: 0,
        }
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step(&mut self, batch: &PairBatch) -> Result<StepStats> {
        let (loss, mut grad) = batch_loss_and_grad(&self.model, batch)?;
        if self.config.normalize_loss && loss.active_pairs > 0 {
            grad.scale_in_place(1.0 / loss.active_pairs as f64);
        }
        adam_step(&mut self.model, &grad, &mut self.adam, &self.config.adam())?;
        self.steps += 1;
        Ok(StepStats { loss })
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.steps < m)
    }

    /// Runs the configured epochs over `data`.
    ///
    /// One epoch draws `ceil(#subgraphs / batch_size)` batches. When
    /// `out_dir` is given, `init.pgat` is written before the first step and
    /// `last.pgat` / `best.pgat` after every epoch.
    pub fn train(&mut self, data: &TrainingSet, out_dir: Option<&Path>) -> Result<Vec<MetricsRow>> {
        let sampler = PairSampler::new(&data.subgraphs, &data.keynodes, self.config.d_pos)?;
        if data.keynodes.descriptor_dim() != self.config.descriptor_dim {
            return Err(PgatError::Dataset(format!(
                "data has {}-dim descriptors, config says {}",
                data.keynodes.descriptor_dim(),
                self.config.descriptor_dim
            )));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| PgatError::io(dir, e))?;
            checkpoint::save(&self.model, &dir.join("init.pgat"))?;
        }
        let started = Instant::now();
        let batches_per_epoch = data.subgraphs.len().div_ceil(self.config.batch_size);
        let mut rows = Vec::new();
        let mut best = f64::INFINITY;
        for epoch in 0..self.config.epochs {
            if !self.budget_left() {
                break;
            }
            let mut rng = stream_rng(self.config.seed, epoch as u64 + 1);
            let mut epoch_loss = 0.0;
            let mut epoch_active = 0;
            for _ in 0..batches_per_epoch {
                if !self.budget_left() {
                    break;
                }
                let mut pairs = Vec::with_capacity(self.config.batch_size);
                for _ in 0..self.config.batch_size {
                    let d = sampler.sample(self.config.positive_rate, &mut rng)?;
                    pairs.push((&data.subgraphs[d.a], &data.subgraphs[d.b]));
                }
                let batch = make_batch(&pairs, &data.keynodes, self.config.bands())?;
                let stats = self.step(&batch)?;
                epoch_loss += stats.loss.loss;
                epoch_active += stats.loss.active_pairs;
            }
            let mean = if epoch_active > 0 {
                epoch_loss / epoch_active as f64
            } else {
                0.0
            };
            let wall = if self.config.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            };
            rows.push(MetricsRow {
                epoch,
                step: self.steps,
                mean_active_loss: mean,
                active_pairs: epoch_active,
                wall_time_s: wall,
            });
            if let Some(dir) = out_dir {
                checkpoint::save(&self.model, &dir.join("last.pgat"))?;
                if mean < best {
                    best = mean;
                    checkpoint::save(&self.model, &dir.join("best.pgat"))?;
                }
                write_metrics(&dir.join("metrics.csv"), &rows)?;
            }
        }
        Ok(rows)
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PgatError::io(path, e))?;
    f.write_all(metrics_csv(rows).as_bytes())
        .map_err(|e| PgatError::io(path, e))
}

/// Output locations of a training run.
pub fn checkpoint_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join("init.pgat"), dir.join("last.pgat"), dir.join("best.pgat")]
}
