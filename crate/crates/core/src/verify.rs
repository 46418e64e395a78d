//! Self-checks: gradient agreement, average-scheme oracles and model
//! invariants. Each check returns the measured quantity so callers can
//! apply their own tolerance; [`run_all`] applies the default ones.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::agnn::{pgat_forward, ModelDims, ModelParams, SubgraphTensor};
use crate::error::Result;
use crate::inference::{
    average_scheme_with, rank_all, raw_cosine, retrieve, summarize, GroundTruth, RecallSummary, SimilarityAccumulator,
    DEFAULT_RADIUS_M,
};
use crate::numerics::{
    grad_check, masked_layer_norm, stream_rng, GradCheckReport, Matrix, MaskedNormParams, GRAD_CHECK_EPSILON,
    GRAD_CHECK_TOLERANCE,
};
use crate::objective::{to_probability, similarity_matrix, weighted_bce};
use crate::pose_graph::{build_subgraphs, Keynode, KeynodeSet, PairLabels, Subgraph, Trajectory};
use crate::synthdata::{generate, SynthConfig};
use crate::trainer::{pair_loss, pair_loss_and_grad, PairSampler, TrainConfig, Trainer, TrainingSet};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {}: {}", self.name, self.detail)
    }
}

pub const TINY_DIMS: ModelDims = ModelDims {
    descriptor_dim: 8,
    layers: 2,
    heads: 2,
};

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::random_uniform(rows, cols, 1.0, rng)
}

fn random_tensor<R: Rng + ?Sized>(dim: usize, nodes: usize, width: usize, rng: &mut R) -> SubgraphTensor {
    let mut d = Matrix::zeros(dim, width);
    let mut p = Matrix::zeros(3, width);
    for j in 0..nodes {
        d.set_col(j, &random_matrix(dim, 1, rng).into_vec());
        p.set_col(j, &random_matrix(3, 1, rng).into_vec());
    }
    SubgraphTensor::new(d, p, (0..width).map(|j| j < nodes).collect()).expect("padding is zero")
}

/// Model whose near-zero-initialized layers are re-drawn at full scale, so
/// every parameter carries a non-trivial gradient.
pub fn perturbed_model(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    let mut rng = stream_rng(seed, 0);
    let mut model = ModelParams::init(dims, &mut rng)?;
    model.visit_mut(|name, m| {
        if name.ends_with("bias") || name.ends_with("beta") {
            *m = Matrix::random_uniform(m.rows(), m.cols(), 0.1, &mut rng);
        } else if name.ends_with("gamma") {
            m.as_mut_slice().iter_mut().for_each(|v| *v = 1.0 + rng.random_range(-0.2..0.2));
        } else if name.contains("merge") || name.contains("mlp_out") {
            let bound = 1.0 / (m.cols() as f64).sqrt();
            *m = Matrix::random_uniform(m.rows(), m.cols(), bound, &mut rng);
        }
    });
    Ok(model)
}

/// Subgraphs of 3 and 4 nodes with a mix of positive, negative and ignored pairs.
pub fn tiny_pair(seed: u64) -> (SubgraphTensor, SubgraphTensor, PairLabels) {
    let mut rng = stream_rng(seed, 1);
    let a = random_tensor(TINY_DIMS.descriptor_dim, 3, 3, &mut rng);
    let b = random_tensor(TINY_DIMS.descriptor_dim, 4, 4, &mut rng);
    let y = Matrix::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
    let omega = Matrix::from_rows(&[&[1.0, 1.0, 0.0, 1.0], &[1.0, 1.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 1.0]]);
    (a, b, PairLabels { y, omega })
}

/// Finite-difference check of every parameter of the tiny model on the full pair loss.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let mut model = perturbed_model(TINY_DIMS, seed)?;
    let (a, b, labels) = tiny_pair(seed);
    let x0 = model.flatten();
    grad_check(
        |x| {
            model.assign_flat(x)?;
            let (loss, grad) = pair_loss_and_grad(&model, &a, &b, &labels)?;
            Ok((loss.loss, grad.flatten()))
        },
        &x0,
        GRAD_CHECK_EPSILON,
    )
}

/// Per-(query id, database id) mean of every score a subgraph pair produced,
/// enumerated one entry at a time.
pub fn brute_force_average(query: &[Subgraph], db: &[Subgraph], scores: &[Vec<Matrix>]) -> BTreeMap<(u64, u64), f64> {
    let mut seen: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for (qi, q) in query.iter().enumerate() {
        for (di, d) in db.iter().enumerate() {
            for (i, qid) in q.keynode_ids.iter().enumerate() {
                for (j, did) in d.keynode_ids.iter().enumerate() {
                    seen.entry((*qid, *did)).or_default().push(scores[qi][di][(i, j)]);
                }
            }
        }
    }
    seen.into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

/// Literal stride-1 accumulation for one query subgraph: window `l`
/// contributes its column `j` to database column `d = j + l` (0-based).
pub fn index_map_average(query_len: usize, db_len: usize, windows: &[(usize, Matrix)]) -> Matrix {
    let mut sum = Matrix::zeros(query_len, db_len);
    let mut count = Matrix::zeros(query_len, db_len);
    for (l, s) in windows {
        for j in 0..s.cols() {
            let d = j + l;
            for i in 0..query_len {
                sum[(i, d)] += s[(i, j)];
                count[(i, d)] += 1.0;
            }
        }
    }
    for i in 0..query_len {
        for d in 0..db_len {
            sum[(i, d)] = if count[(i, d)] > 0.0 {
                sum[(i, d)] / count[(i, d)]
            } else {
                f64::NAN
            };
        }
    }
    sum
}

fn line_run(run_id: u32, first_id: u64, len: usize, spacing: f64) -> Trajectory {
    let nodes = (0..len)
        .map(|k| Keynode {
            global_id: first_id + k as u64,
            run_id,
            position: [k as f64 * spacing, 0.0, 0.0],
            descriptor: vec![0.0],
        })
        .collect();
    Trajectory::new(run_id, nodes).expect("single run")
}

/// Query subgraphs, database subgraphs and one score matrix per pair.
pub type ScoringConfig = (Vec<Subgraph>, Vec<Subgraph>, Vec<Vec<Matrix>>);

/// Random overlapping query/database windows with random scores per pair.
pub fn random_scoring_config(seed: u64) -> Result<ScoringConfig> {
    let mut rng = stream_rng(seed, 2);
    let spacing = 10.0;
    let mut db = Vec::new();
    let mut next_id = 0;
    for run in 0..rng.random_range(1..=3u32) {
        let len = rng.random_range(3..12);
        let t = line_run(run, next_id, len, spacing);
        next_id += len as u64 + rng.random_range(0..5);
        let mut subs = build_subgraphs(&t, spacing * rng.random_range(1..5) as f64)?;
        subs.shuffle(&mut rng);
        subs.truncate(rng.random_range(1..=subs.len()));
        db.extend(subs);
    }
    let q_run = line_run(99, next_id + 100, rng.random_range(3..10), spacing);
    let mut query = build_subgraphs(&q_run, spacing * rng.random_range(1..4) as f64)?;
    query.truncate(rng.random_range(1..=query.len()));
    let scores = query
        .iter()
        .map(|q| {
            db.iter()
                .map(|d| random_matrix(q.len(), d.len(), &mut rng))
                .collect()
        })
        .collect();
    Ok((query, db, scores))
}

/// Largest deviation between the accumulator and the brute-force oracle on
/// `configs` random configurations.
pub fn average_scheme_oracle(configs: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in 0..configs {
        let (query, db, scores) = random_scoring_config(seed.wrapping_add(c as u64))?;
        let acc = average_scheme_with(&query, &db, |qi, di| Ok(scores[qi][di].clone()))?;
        let oracle = brute_force_average(&query, &db, &scores);
        let mut covered = 0;
        for q in acc.query_ids() {
            for d in acc.db_ids() {
                match (acc.averaged(*q, *d)?, oracle.get(&(*q, *d))) {
                    (Some(a), Some(b)) => {
                        worst = worst.max((a - b).abs());
                        covered += 1;
                    }
                    (None, None) => {}
                    _ => return Ok(f64::INFINITY),
                }
            }
        }
        if covered != oracle.len() {
            return Ok(f64::INFINITY);
        }
    }
    Ok(worst)
}

/// Whether the id-keyed accumulator matches the `d = j + l` index map
/// entry for entry on contiguous stride-1 windows with dense ids from 0.
pub fn index_map_equivalence(seed: u64) -> Result<bool> {
    let mut rng = stream_rng(seed, 3);
    let db_len = rng.random_range(8..20);
    let db_run = line_run(0, 0, db_len, 10.0);
    let db = build_subgraphs(&db_run, 10.0 * rng.random_range(2..6) as f64)?;
    let q_run = line_run(1, db_len as u64, rng.random_range(3..8), 10.0);
    let query = vec![build_subgraphs(&q_run, 1e6)?.remove(0)];
    let scores: Vec<Matrix> = db
        .iter()
        .map(|d| random_matrix(query[0].len(), d.len(), &mut rng))
        .collect();
    let acc: SimilarityAccumulator = average_scheme_with(&query, &db, |_, di| Ok(scores[di].clone()))?;
    let windows: Vec<(usize, Matrix)> = db.iter().map(|d| d.index).zip(scores).collect();
    let reference = index_map_average(query[0].len(), db_len, &windows);
    for (i, qid) in query[0].keynode_ids.iter().enumerate() {
        for d in 0..db_len {
            let got = acc.averaged(*qid, d as u64)?;
            let want = reference[(i, d)];
            let same = match got {
                Some(v) => v == want,
                None => want.is_nan(),
            };
            if !same {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Largest change of any valid output when padding columns are appended.
pub fn padding_invariance(seed: u64) -> Result<f64> {
    let model = perturbed_model(TINY_DIMS, seed)?;
    let mut rng = stream_rng(seed, 4);
    let (na, nb) = (rng.random_range(2..6), rng.random_range(2..6));
    let a = random_tensor(TINY_DIMS.descriptor_dim, na, na, &mut rng);
    let b = random_tensor(TINY_DIMS.descriptor_dim, nb, nb, &mut rng);
    let pad = |t: &SubgraphTensor, extra: usize| -> Result<SubgraphTensor> {
        let w = t.width() + extra;
        let mut d = Matrix::zeros(t.descriptors.rows(), w);
        let mut p = Matrix::zeros(3, w);
        for j in 0..t.width() {
            d.set_col(j, &t.descriptors.col(j));
            p.set_col(j, &t.positions.col(j));
        }
        SubgraphTensor::new(d, p, (0..w).map(|j| j < t.width()).collect())
    };
    let (fa, fb) = pgat_forward(&a, &b, &model)?;
    let (ga, gb) = pgat_forward(&pad(&a, 3)?, &pad(&b, 1)?, &model)?;
    Ok(fa.max_abs_diff(&ga).max(fb.max_abs_diff(&gb)))
}

/// Largest deviation between permuted outputs and outputs of permuted inputs.
pub fn permutation_equivariance(seed: u64) -> Result<f64> {
    let model = perturbed_model(TINY_DIMS, seed)?;
    let mut rng = stream_rng(seed, 5);
    let (na, nb) = (rng.random_range(2..7), rng.random_range(2..7));
    let a = random_tensor(TINY_DIMS.descriptor_dim, na, na, &mut rng);
    let b = random_tensor(TINY_DIMS.descriptor_dim, nb, nb, &mut rng);
    let mut perm: Vec<usize> = (0..na).collect();
    perm.shuffle(&mut rng);
    let permuted = SubgraphTensor::new(
        a.descriptors.select_columns(&perm),
        a.positions.select_columns(&perm),
        vec![true; na],
    )?;
    let (fa, fb) = pgat_forward(&a, &b, &model)?;
    let (pa, pb) = pgat_forward(&permuted, &b, &model)?;
    Ok(fa.select_columns(&perm).max_abs_diff(&pa).max(fb.max_abs_diff(&pb)))
}

/// Largest change of valid norm outputs when padding columns hold garbage.
pub fn masked_norm_garbage(seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 6);
    let (rows, width) = (rng.random_range(2..10), rng.random_range(3..10));
    let mask: Vec<bool> = (0..width).map(|j| j == 0 || rng.random_bool(0.6)).collect();
    let params = MaskedNormParams {
        gamma: random_matrix(rows, 1, &mut rng),
        beta: random_matrix(rows, 1, &mut rng),
        epsilon: crate::numerics::NORM_EPSILON,
    };
    let x = random_matrix(rows, width, &mut rng);
    let mut garbage = x.clone();
    for (j, valid) in mask.iter().enumerate() {
        if !valid {
            let junk: Vec<f64> = (0..rows).map(|_| rng.random_range(-1e6..1e6)).collect();
            garbage.set_col(j, &junk);
        }
    }
    let clean = masked_layer_norm(&x, &mask, &params)?;
    let dirty = masked_layer_norm(&garbage, &mask, &params)?;
    let valid: Vec<usize> = (0..width).filter(|j| mask[*j]).collect();
    Ok(clean.select_columns(&valid).max_abs_diff(&dirty.select_columns(&valid)))
}

/// Forced-positive fraction over `draws` samples on a synthetic training set.
pub fn sampler_positive_fraction(rate: f64, draws: usize, seed: u64) -> Result<f64> {
    let data = generate(&SynthConfig {
        descriptor_dim: 4,
        seed,
        ..SynthConfig::toy()
    })?;
    let set = TrainingSet::from_trajectories(data.database(), 100.0)?;
    let sampler = PairSampler::new(&set.subgraphs, &set.keynodes, 10.0)?;
    let mut rng = stream_rng(seed, 7);
    let mut forced = 0;
    for _ in 0..draws {
        if sampler.sample(rate, &mut rng)?.forced_positive {
            forced += 1;
        }
    }
    Ok(forced as f64 / draws as f64)
}

/// Forward-only loss agrees with the explicit similarity / probability / BCE chain.
pub fn loss_chain_consistency(seed: u64) -> Result<f64> {
    let model = perturbed_model(TINY_DIMS, seed)?;
    let (a, b, labels) = tiny_pair(seed);
    let (fa, fb) = pgat_forward(&a, &b, &model)?;
    let explicit = weighted_bce(&to_probability(&similarity_matrix(&fa, &fb)?), &labels)?;
    Ok((explicit.loss - pair_loss(&model, &a, &b, &labels)?.loss).abs())
}

/// Extra traversals of the toy course added to the toy benchmark's training set.
pub const TOY_EXTRA_RUNS: usize = 8;

/// Toy model (E = 32, L = 3, h = 4) training settings for the toy benchmark.
pub fn toy_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        descriptor_dim: 32,
        layers: 3,
        heads: 4,
        learning_rate: 3e-4,
        batch_size: 32,
        distance_threshold: 100.0,
        d_pos: 25.0,
        d_neg: 50.0,
        epochs: usize::MAX,
        max_steps: Some(steps),
        seed: 1,
        deterministic: true,
        ..TrainConfig::default()
    }
}

/// Training runs of the toy benchmark: the toy database runs plus
/// [`TOY_EXTRA_RUNS`] further traversals of the same course. The toy query
/// run is excluded.
pub fn toy_training_runs() -> Result<Vec<Trajectory>> {
    let base = SynthConfig::toy();
    let query_run = base.num_runs as u32 - 1;
    let all = generate(&SynthConfig {
        num_runs: base.num_runs + TOY_EXTRA_RUNS,
        ..base
    })?;
    Ok(all.trajectories.into_iter().filter(|t| t.run_id != query_run).collect())
}

/// Raw-descriptor and trained-model recall on the toy query run.
#[derive(Clone, Debug)]
pub struct ToyComparison {
    pub raw: RecallSummary,
    pub trained: RecallSummary,
    pub final_loss: f64,
}

/// Trains the toy model for `steps` optimizer steps and evaluates it against
/// raw cosine retrieval on the toy split at [`DEFAULT_RADIUS_M`].
pub fn toy_comparison(steps: usize) -> Result<ToyComparison> {
    let cfg = toy_train_config(steps);
    let data = generate(&SynthConfig::toy())?;
    let keynodes = KeynodeSet::from_trajectories(&data.trajectories)?;
    let query_ids: Vec<u64> = data.query().nodes.iter().map(|n| n.global_id).collect();
    let db_ids: Vec<u64> = data
        .database()
        .iter()
        .flat_map(|t| t.nodes.iter().map(|n| n.global_id))
        .collect();
    let truth = GroundTruth {
        positions: keynodes.iter().map(|n| (n.global_id, n.position)).collect(),
        db_ids: db_ids.clone(),
    };
    let raw = summarize(&rank_all(&raw_cosine(&query_ids, &db_ids, &keynodes)?, 25)?, &truth, DEFAULT_RADIUS_M)?;

    let train = TrainingSet::from_trajectories(&toy_training_runs()?, cfg.distance_threshold)?;
    let mut trainer = Trainer::new(cfg)?;
    let rows = trainer.train(&train, None)?;
    let (results, _) = retrieve(
        std::slice::from_ref(data.query()),
        data.database(),
        &trainer.model,
        trainer.config.distance_threshold,
        25,
    )?;
    Ok(ToyComparison {
        raw,
        trained: summarize(&results, &truth, DEFAULT_RADIUS_M)?,
        final_loss: rows.last().map_or(f64::NAN, |r| r.mean_active_loss),
    })
}

/// Runs every check with the default tolerances.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name, result: Result<(bool, String)>| {
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        out.push(CheckResult { name, passed, detail });
    };
    let n = crate::agnn::expected_shapes(ModelDims::DEFAULT)
        .iter()
        .map(|(_, (r, c))| r * c)
        .sum::<usize>();
    let dev = (n as f64 - 12e6).abs() / 12e6;
    push(
        "parameter count",
        Ok((dev < 0.05, format!("{n} parameters, {:.2}% from 12M", dev * 100.0))),
    );
    push(
        "gradient check",
        gradient_check(seed).map(|r| {
            (
                r.passes(GRAD_CHECK_TOLERANCE),
                format!(
                    "{} parameters, max relative error {:.2e} (< {GRAD_CHECK_TOLERANCE:e})",
                    r.analytic.len(),
                    r.max_relative_error
                ),
            )
        }),
    );
    push(
        "average scheme oracle",
        average_scheme_oracle(20, seed).map(|d| (d <= 1e-12, format!("20 configurations, max diff {d:.2e}"))),
    );
    push(
        "index map equivalence",
        (0..5)
            .map(|k| index_map_equivalence(seed + k))
            .collect::<Result<Vec<bool>>>()
            .map(|v| (v.iter().all(|x| *x), "d = j + l, entry for entry".to_string())),
    );
    push(
        "padding invariance",
        padding_invariance(seed).map(|d| (d <= 1e-9, format!("max diff {d:.2e}"))),
    );
    push(
        "permutation equivariance",
        permutation_equivariance(seed).map(|d| (d <= 1e-9, format!("max diff {d:.2e}"))),
    );
    push(
        "masked norm ignores padding",
        masked_norm_garbage(seed).map(|d| (d == 0.0, format!("max diff {d:.2e}"))),
    );
    push(
        "sampler positive rate",
        sampler_positive_fraction(0.30, 10_000, seed).map(|f| {
            let sigma = (0.3f64 * 0.7 / 10_000.0).sqrt();
            ((f - 0.3).abs() <= 3.0 * sigma, format!("{f:.4} over 10000 draws"))
        }),
    );
    push(
        "loss chain",
        loss_chain_consistency(seed).map(|d| (d < 1e-12, format!("diff {d:.2e}"))),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_map_average_handles_uncovered_columns() {
        let m = index_map_average(1, 3, &[(0, Matrix::from_rows(&[&[2.0]])), (0, Matrix::from_rows(&[&[4.0]]))]);
        assert_eq!(m[(0, 0)], 3.0);
        assert!(m[(0, 1)].is_nan());
    }

    #[test]
    fn random_configs_are_valid() {
        for s in 0..10 {
            let (q, d, scores) = random_scoring_config(s).unwrap();
            assert!(!q.is_empty() && !d.is_empty());
            assert_eq!(scores.len(), q.len());
        }
    }
}
