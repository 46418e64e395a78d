//! Average-scheme scoring, top-K retrieval and recall evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agnn::{pgat_forward, ModelParams, SubgraphTensor};
use crate::error::{PgatError, Result};
use crate::numerics::Matrix;
use crate::objective::similarity_matrix;
use crate::io::PositionRecord;
use crate::pose_graph::{build_subgraphs, euclidean, KeynodeSet, Position, Subgraph, Trajectory};

pub const DEFAULT_RADIUS_M: f64 = 25.0;

/// Query subgraphs scored per parallel chunk before folding into the accumulator.
const SCORE_CHUNK: usize = 16;

/// Running sums and counts of similarity scores keyed by
/// (query global id, database global id).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityAccumulator {
    query_ids: Vec<u64>,
    db_ids: Vec<u64>,
    query_index: HashMap<u64, usize>,
    db_index: HashMap<u64, usize>,
    sum: Matrix,
    count: Vec<u32>,
}

impl SimilarityAccumulator {
    /// Ids must be unique within each side and the two sides disjoint.
    pub fn new(query_ids: Vec<u64>, db_ids: Vec<u64>) -> Result<Self> {
        let query_index = index_of(&query_ids, "query")?;
        let db_index = index_of(&db_ids, "database")?;
        if let Some(id) = query_ids.iter().find(|id| db_index.contains_key(id)) {
            return Err(PgatError::Dataset(format!(
                "keynode {id} appears in both the query and the database"
            )));
        }
        let (m, n) = (query_ids.len(), db_ids.len());
        Ok(SimilarityAccumulator {
            query_ids,
            db_ids,
            query_index,
            db_index,
            sum: Matrix::zeros(m, n),
            count: vec![0; m * n],
        })
    }

    /// Accumulator over every id covered by the given subgraphs, each side sorted.
    pub fn for_subgraphs(query: &[Subgraph], db: &[Subgraph]) -> Result<Self> {
        Self::new(covered_ids(query)?, covered_ids(db)?)
    }

    pub fn query_ids(&self) -> &[u64] {
        &self.query_ids
    }

    pub fn db_ids(&self) -> &[u64] {
        &self.db_ids
    }

    /// Adds `scores[i][j]` into the entry for `(query[i], db[j])`.
    pub fn add(&mut self, query: &[u64], db: &[u64], scores: &Matrix) -> Result<()> {
        if scores.shape() != (query.len(), db.len()) {
            return Err(PgatError::dim(format!(
                "scores {:?} for {} x {} ids",
                scores.shape(),
                query.len(),
                db.len()
            )));
        }
        let rows = query.iter().map(|id| self.q(*id)).collect::<Result<Vec<_>>>()?;
        let cols = db.iter().map(|id| self.d(*id)).collect::<Result<Vec<_>>>()?;
        let n = self.db_ids.len();
        for (i, r) in rows.iter().enumerate() {
            for (j, c) in cols.iter().enumerate() {
                self.sum.as_mut_slice()[r * n + c] += scores[(i, j)];
                self.count[r * n + c] += 1;
            }
        }
        Ok(())
    }

    fn q(&self, id: u64) -> Result<usize> {
        self.query_index.get(&id).copied().ok_or(PgatError::Lookup(id))
    }

    fn d(&self, id: u64) -> Result<usize> {
        self.db_index.get(&id).copied().ok_or(PgatError::Lookup(id))
    }

    pub fn count(&self, query: u64, db: u64) -> Result<u32> {
        Ok(self.count[self.q(query)? * self.db_ids.len() + self.d(db)?])
    }

    /// Averaged score, `None` where nothing was accumulated.
    pub fn averaged(&self, query: u64, db: u64) -> Result<Option<f64>> {
        let k = self.q(query)? * self.db_ids.len() + self.d(db)?;
        Ok((self.count[k] > 0).then(|| self.sum.as_slice()[k] / self.count[k] as f64))
    }

    /// Averaged scores of one query against every database id it was compared with.
    pub fn scores_for(&self, query: u64) -> Result<Vec<(u64, f64)>> {
        let r = self.q(query)?;
        let n = self.db_ids.len();
        Ok((0..n)
            .filter(|c| self.count[r * n + c] > 0)
            .map(|c| (self.db_ids[c], self.sum.as_slice()[r * n + c] / self.count[r * n + c] as f64))
            .collect())
    }

    /// Dense averaged matrix with `NaN` where the count is zero.
    pub fn averaged_matrix(&self) -> Matrix {
        let mut out = self.sum.clone();
        for (v, c) in out.as_mut_slice().iter_mut().zip(&self.count) {
            *v = if *c > 0 { *v / *c as f64 } else { f64::NAN };
        }
        out
    }
}

fn index_of(ids: &[u64], side: &str) -> Result<HashMap<u64, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (k, id) in ids.iter().enumerate() {
        if index.insert(*id, k).is_some() {
            return Err(PgatError::Dataset(format!("duplicate {side} keynode id {id}")));
        }
    }
    Ok(index)
}

/// Sorted ids covered by `subgraphs`; an id claimed by two runs is a collision.
fn covered_ids(subgraphs: &[Subgraph]) -> Result<Vec<u64>> {
    let mut owner: BTreeMap<u64, u32> = BTreeMap::new();
    for s in subgraphs {
        for id in &s.keynode_ids {
            match owner.insert(*id, s.run_id) {
                Some(run) if run != s.run_id => {
                    return Err(PgatError::Dataset(format!(
                        "keynode id {id} used by runs {run} and {}",
                        s.run_id
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(owner.into_keys().collect())
}

/// Accumulates `scorer(q, d)` for every (query, database) subgraph pair.
///
/// Pairs are scored in parallel a chunk of query subgraphs at a time and
/// folded in (query, database) order, so the sums do not depend on the
/// number of worker threads.
pub fn average_scheme_with<F>(query: &[Subgraph], db: &[Subgraph], scorer: F) -> Result<SimilarityAccumulator>
where
    F: Fn(usize, usize) -> Result<Matrix> + Sync,
{
    let mut acc = SimilarityAccumulator::for_subgraphs(query, db)?;
    for chunk_start in (0..query.len()).step_by(SCORE_CHUNK) {
        let chunk_end = (chunk_start + SCORE_CHUNK).min(query.len());
        let scored: Vec<Result<Vec<Matrix>>> = (chunk_start..chunk_end)
            .into_par_iter()
            .map(|qi| (0..db.len()).map(|di| scorer(qi, di)).collect())
            .collect();
        for (offset, row) in scored.into_iter().enumerate() {
            let q = &query[chunk_start + offset];
            for (di, s) in row?.into_iter().enumerate() {
                acc.add(&q.keynode_ids, &db[di].keynode_ids, &s)?;
            }
        }
    }
    Ok(acc)
}

/// Averages the model's pairwise similarities over every overlapping
/// (query subgraph, database subgraph) pair.
pub fn average_scheme(
    query: &[Subgraph],
    db: &[Subgraph],
    keynodes: &KeynodeSet,
    model: &ModelParams,
) -> Result<SimilarityAccumulator> {
    let tensors = |subs: &[Subgraph]| -> Result<Vec<SubgraphTensor>> {
        subs.iter()
            .map(|s| SubgraphTensor::from_subgraph(s, keynodes, s.len()))
            .collect()
    };
    let (tq, td) = (tensors(query)?, tensors(db)?);
    average_scheme_with(query, db, |qi, di| {
        let (fa, fb) = pgat_forward(&tq[qi], &td[di], model)?;
        Ok(similarity_matrix(&fa, &fb)?.0)
    })
}

/// Model retrieval of every query keynode against the database runs:
/// both sides are cut into subgraphs, scored with [`average_scheme`] and
/// ranked to depth `k`.
pub fn retrieve(
    query: &[Trajectory],
    db: &[Trajectory],
    model: &ModelParams,
    distance_threshold: f64,
    k: usize,
) -> Result<(Vec<QueryResult>, KeynodeSet)> {
    let keynodes = KeynodeSet::from_trajectories(query.iter().chain(db))?;
    if keynodes.descriptor_dim() != model.dims.descriptor_dim {
        return Err(PgatError::dim(format!(
            "{}-dim descriptors for a model with E = {}",
            keynodes.descriptor_dim(),
            model.dims.descriptor_dim
        )));
    }
    let cut = |runs: &[Trajectory]| -> Result<Vec<Subgraph>> {
        let mut out = Vec::new();
        for t in runs {
            out.extend(build_subgraphs(t, distance_threshold)?);
        }
        Ok(out)
    };
    let acc = average_scheme(&cut(query)?, &cut(db)?, &keynodes, model)?;
    Ok((rank_all(&acc, k)?, keynodes))
}

/// Cosine similarity of raw descriptors for every (query, database) id pair.
pub fn raw_cosine(query_ids: &[u64], db_ids: &[u64], keynodes: &KeynodeSet) -> Result<SimilarityAccumulator> {
    let gather = |ids: &[u64]| -> Result<Matrix> {
        let cols = ids
            .iter()
            .map(|id| Ok(keynodes.get(*id)?.descriptor.clone()))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_columns(keynodes.descriptor_dim(), &cols)
    };
    let s = similarity_matrix(&gather(query_ids)?, &gather(db_ids)?)?;
    let mut acc = SimilarityAccumulator::new(query_ids.to_vec(), db_ids.to_vec())?;
    acc.add(query_ids, db_ids, &s.0)?;
    Ok(acc)
}

/// Highest `k` scores, ties broken by ascending id.
pub fn top_k(scores: &[(u64, f64)], k: usize) -> Vec<(u64, f64)> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.truncate(k);
    sorted
}

/// Ranked candidates of one query keynode.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query_id: u64,
    /// Descending score order.
    pub candidates: Vec<(u64, f64)>,
}

/// Top-`k` candidates for every query id of the accumulator.
pub fn rank_all(acc: &SimilarityAccumulator, k: usize) -> Result<Vec<QueryResult>> {
    acc.query_ids()
        .iter()
        .map(|q| {
            Ok(QueryResult {
                query_id: *q,
                candidates: top_k(&acc.scores_for(*q)?, k),
            })
        })
        .collect()
}

/// `ceil(0.01 × database size)`, at least 1.
pub fn one_percent_n(db_size: usize) -> usize {
    db_size.div_ceil(100).max(1)
}

/// Ground truth for recall: positions of every keynode and the database membership.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub positions: HashMap<u64, Position>,
    pub db_ids: Vec<u64>,
}

impl GroundTruth {
    /// Every recorded keynode that is not a query is a database keynode.
    pub fn from_positions(records: &[PositionRecord], query_ids: &[u64]) -> Self {
        let queries: HashSet<u64> = query_ids.iter().copied().collect();
        GroundTruth {
            positions: records.iter().map(|r| (r.global_id, r.position)).collect(),
            db_ids: records
                .iter()
                .map(|r| r.global_id)
                .filter(|id| !queries.contains(id))
                .collect(),
        }
    }

    fn position(&self, id: u64) -> Result<Position> {
        self.positions.get(&id).copied().ok_or(PgatError::Lookup(id))
    }

    /// Whether any database keynode lies within `radius` of `query`.
    pub fn has_true_match(&self, query: u64, radius: f64) -> Result<bool> {
        let p = self.position(query)?;
        for d in &self.db_ids {
            if euclidean(&p, &self.position(*d)?) <= radius {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Fraction of queries (with at least one true match) whose top `n`
/// candidates contain a keynode within `radius` meters. Returns 0 when no
/// query has a true match.
pub fn recall_at_n(results: &[QueryResult], truth: &GroundTruth, radius: f64, n: usize) -> Result<f64> {
    Ok(recall_curve(results, truth, radius, n)?
        .last()
        .map(|p| p.1)
        .unwrap_or(0.0))
}

/// `(N, AR@N)` for `N = 1..=max_n`.
pub fn recall_curve(results: &[QueryResult], truth: &GroundTruth, radius: f64, max_n: usize) -> Result<Vec<(usize, f64)>> {
    if !(radius > 0.0) {
        return Err(PgatError::Input(format!("radius {radius} must be positive")));
    }
    // first_hit[k] = number of evaluated queries whose first hit is at rank k+1
    let mut first_hit = vec![0usize; max_n];
    let mut evaluated = 0usize;
    for r in results {
        if !truth.has_true_match(r.query_id, radius)? {
            continue;
        }
        evaluated += 1;
        let q = truth.position(r.query_id)?;
        for (rank, (c, _)) in r.candidates.iter().take(max_n).enumerate() {
            if euclidean(&q, &truth.position(*c)?) <= radius {
                first_hit[rank] += 1;
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(max_n);
    let mut hits = 0;
    for (k, h) in first_hit.iter().enumerate() {
        hits += h;
        let recall = if evaluated == 0 {
            0.0
        } else {
            hits as f64 / evaluated as f64
        };
        out.push((k + 1, recall));
    }
    Ok(out)
}

/// AR@1, AR@1% and the recall curve of a retrieval run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub radius_m: f64,
    pub queries: usize,
    pub evaluated_queries: usize,
    pub db_size: usize,
    pub ar1: f64,
    pub ar1_percent: f64,
    pub one_percent_n: usize,
    pub curve: Vec<(usize, f64)>,
}

impl RecallSummary {
    pub fn text(&self) -> String {
        let mut out = format!(
            "AR@1={:.3}\nAR@1%={:.3} (N={})\nqueries={} evaluated={} database={} radius_m={}\n",
            self.ar1, self.ar1_percent, self.one_percent_n, self.queries, self.evaluated_queries, self.db_size, self.radius_m
        );
        for (n, r) in self.curve.iter().filter(|(n, _)| [5, 10, 25].contains(n)) {
            out.push_str(&format!("AR@{n}={r:.3}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("plain data serializes");
        out.push('\n');
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("N,recall\n");
        for (n, r) in &self.curve {
            out.push_str(&format!("{n},{r:.6}\n"));
        }
        out
    }
}

/// Evaluates ranked results; the curve extends to the longest candidate list.
pub fn summarize(results: &[QueryResult], truth: &GroundTruth, radius: f64) -> Result<RecallSummary> {
    let depth = results.iter().map(|r| r.candidates.len()).max().unwrap_or(0).max(1);
    let n1 = one_percent_n(truth.db_ids.len());
    let curve = recall_curve(results, truth, radius, depth.max(n1))?;
    let mut evaluated = 0;
    for r in results {
        if truth.has_true_match(r.query_id, radius)? {
            evaluated += 1;
        }
    }
    Ok(RecallSummary {
        radius_m: radius,
        queries: results.len(),
        evaluated_queries: evaluated,
        db_size: truth.db_ids.len(),
        ar1: curve[0].1,
        ar1_percent: curve[n1 - 1].1,
        one_percent_n: n1,
        curve: curve.into_iter().take(depth).collect(),
    })
}

pub const REPORT_HEADER: &str = "query_id,rank,candidate_id,score,distance_m,hit";

/// Report CSV; `distance_m` and `hit` use `radius` and the keynode positions.
pub fn report_csv(results: &[QueryResult], keynodes: &KeynodeSet, radius: f64) -> Result<String> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in results {
        let q = keynodes.position(r.query_id)?;
        for (rank, (c, score)) in r.candidates.iter().enumerate() {
            let dist = euclidean(&q, &keynodes.position(*c)?);
            out.push_str(&format!(
                "{},{},{},{:.12},{:.3},{}\n",
                r.query_id,
                rank + 1,
                c,
                score,
                dist,
                u8::from(dist <= radius)
            ));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ReportRow {
    query_id: u64,
    rank: usize,
    candidate_id: u64,
    score: f64,
}

/// Reads a report CSV back into ranked results (in file order of queries).
pub fn read_report(path: &Path) -> Result<Vec<QueryResult>> {
    let text = fs::read_to_string(path).map_err(|e| PgatError::io(path, e))?;
    parse_report(&text, path)
}

pub fn parse_report(text: &str, path: &Path) -> Result<Vec<QueryResult>> {
    let parse_err = |line: u64, msg: String| PgatError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
        return Err(parse_err(1, format!("expected header `{REPORT_HEADER}`")));
    }
    let mut results: Vec<QueryResult> = Vec::new();
    let mut seen = HashSet::new();
    for rec in reader.deserialize::<ReportRow>() {
        let line = rec.as_ref().err().and_then(|e| e.position()).map(|p| p.line());
        let row = rec.map_err(|e| parse_err(line.unwrap_or(0), e.to_string()))?;
        match results.last_mut() {
            Some(last) if last.query_id == row.query_id => {
                if row.rank != last.candidates.len() + 1 {
                    return Err(parse_err(0, format!("rank {} out of order for query {}", row.rank, row.query_id)));
                }
                last.candidates.push((row.candidate_id, row.score));
            }
            _ => {
                if !seen.insert(row.query_id) || row.rank != 1 {
                    return Err(parse_err(0, format!("query {} rows are not contiguous from rank 1", row.query_id)));
                }
                results.push(QueryResult {
                    query_id: row.query_id,
                    candidates: vec![(row.candidate_id, row.score)],
                });
            }
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sub(run_id: u32, ids: &[u64]) -> Subgraph {
        Subgraph {
            index: 0,
            run_id,
            keynode_ids: ids.to_vec(),
            positions: vec![[0.0; 3]; ids.len()],
            centroid: [0.0; 3],
            sigma: 1.0,
        }
    }

    #[test]
    fn single_pair_keeps_raw_scores() {
        let q = [sub(1, &[10, 11])];
        let d = [sub(0, &[0, 1, 2])];
        let s = Matrix::from_rows(&[&[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6]]);
        let acc = average_scheme_with(&q, &d, |_, _| Ok(s.clone())).unwrap();
        assert_eq!(acc.averaged(11, 2).unwrap(), Some(0.6));
        assert_eq!(acc.count(10, 0).unwrap(), 1);
    }

    #[test]
    fn two_windows_average() {
        let q = [sub(1, &[10])];
        let d = [sub(0, &[0, 1]), sub(0, &[1, 2])];
        let acc = average_scheme_with(&q, &d, |_, di| {
            Ok(Matrix::from_rows(&[if di == 0 { &[0.0, 0.2] } else { &[0.6, 0.0] }]))
        })
        .unwrap();
        assert!((acc.averaged(10, 1).unwrap().unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(acc.count(10, 1).unwrap(), 2);
    }

    #[test]
    fn id_collisions_are_dataset_errors() {
        let q = [sub(1, &[5])];
        let d = [sub(0, &[5])];
        assert!(matches!(
            SimilarityAccumulator::for_subgraphs(&q, &d),
            Err(PgatError::Dataset(_))
        ));
        let d = [sub(0, &[1]), sub(2, &[1])];
        assert!(matches!(
            SimilarityAccumulator::for_subgraphs(&q, &d),
            Err(PgatError::Dataset(_))
        ));
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        assert_eq!(top_k(&[(1, 0.9), (2, 0.1)], 1), vec![(1, 0.9)]);
        assert_eq!(top_k(&[(7, 0.5), (3, 0.5)], 2), vec![(3, 0.5), (7, 0.5)]);
        assert_eq!(top_k(&[(7, 0.5)], 4).len(), 1);
    }

    fn truth(points: &[(u64, f64)], db: &[u64]) -> GroundTruth {
        GroundTruth {
            positions: points.iter().map(|(id, x)| (*id, [*x, 0.0, 0.0])).collect(),
            db_ids: db.to_vec(),
        }
    }

    #[test]
    fn recall_counts_hits_and_skips_unmatched_queries() {
        // db at 0 and 100; queries at 5 (match 0), 95 (match 100), 300 (no match)
        let gt = truth(&[(0, 0.0), (1, 100.0), (10, 5.0), (11, 95.0), (12, 300.0)], &[0, 1]);
        let results = vec![
            QueryResult {
                query_id: 10,
                candidates: vec![(1, 0.9), (0, 0.8)],
            },
            QueryResult {
                query_id: 11,
                candidates: vec![(1, 0.9), (0, 0.1)],
            },
            QueryResult {
                query_id: 12,
                candidates: vec![(0, 0.9), (1, 0.1)],
            },
        ];
        assert_eq!(recall_at_n(&results, &gt, 25.0, 1).unwrap(), 0.5);
        assert_eq!(recall_at_n(&results, &gt, 25.0, 2).unwrap(), 1.0);
        assert_eq!(one_percent_n(2), 1);
        assert_eq!(one_percent_n(101), 2);
    }

    #[test]
    fn report_round_trips() {
        let mut set = KeynodeSet::default();
        for (id, x) in [(0u64, 0.0), (1, 30.0), (5, 1.0)] {
            set.insert(crate::pose_graph::Keynode {
                global_id: id,
                run_id: u32::from(id == 5),
                position: [x, 0.0, 0.0],
                descriptor: vec![1.0, 0.0],
            })
            .unwrap();
        }
        let results = vec![QueryResult {
            query_id: 5,
            candidates: vec![(0, 0.75), (1, 0.25)],
        }];
        let text = report_csv(&results, &set, 25.0).unwrap();
        assert!(text.contains("5,1,0,0.750000000000,1.000,1"));
        assert!(text.contains("5,2,1,0.250000000000,29.000,0"));
        assert_eq!(parse_report(&text, Path::new("r.csv")).unwrap(), results);
        assert!(parse_report("a,b\n", Path::new("r.csv")).is_err());
    }

    proptest! {
        #[test]
        fn top_k_is_sorted_prefix(scores in prop::collection::vec(-1.0f64..1.0, 1..100), k in 1usize..20) {
            let items: Vec<(u64, f64)> = scores.iter().enumerate().map(|(i, s)| (i as u64, *s)).collect();
            let mut full = items.clone();
            full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            prop_assert_eq!(top_k(&items, k), full.into_iter().take(k).collect::<Vec<_>>());
        }
    }
}
