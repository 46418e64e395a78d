//! Keynode trajectories, stride-1 subgraph windows and pair supervision.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{PgatError, Result};
use crate::numerics::Matrix;

pub type Position = [f64; 3];

/// Scatter below this is treated as a single point and replaced by 1.
pub const MIN_SCATTER: f64 = 1e-9;

/// A selected pose and its global descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keynode {
    pub global_id: u64,
    pub run_id: u32,
    /// Global position in meters.
    pub position: Position,
    pub descriptor: Vec<f64>,
}

/// The keynodes of one run in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub run_id: u32,
    pub nodes: Vec<Keynode>,
}

impl Trajectory {
    pub fn new(run_id: u32, nodes: Vec<Keynode>) -> Result<Self> {
        if let Some(bad) = nodes.iter().find(|n| n.run_id != run_id) {
            return Err(PgatError::Dataset(format!(
                "keynode {} belongs to run {} not {run_id}",
                bad.global_id, bad.run_id
            )));
        }
        Ok(Trajectory { run_id, nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Id-indexed view over the keynodes of one or more trajectories.
#[derive(Clone, Debug, Default)]
pub struct KeynodeSet {
    nodes: Vec<Keynode>,
    by_id: HashMap<u64, usize>,
    descriptor_dim: usize,
}

impl KeynodeSet {
    /// Rejects duplicate global ids and inconsistent descriptor lengths.
    pub fn from_trajectories<'t>(trajectories: impl IntoIterator<Item = &'t Trajectory>) -> Result<Self> {
        let mut set = KeynodeSet::default();
        for traj in trajectories {
            for node in &traj.nodes {
                set.insert(node.clone())?;
            }
        }
        Ok(set)
    }

    pub fn insert(&mut self, node: Keynode) -> Result<()> {
        if self.nodes.is_empty() {
            self.descriptor_dim = node.descriptor.len();
        } else if node.descriptor.len() != self.descriptor_dim {
            return Err(PgatError::Dataset(format!(
                "keynode {} has a {}-dim descriptor, expected {}",
                node.global_id,
                node.descriptor.len(),
                self.descriptor_dim
            )));
        }
        if self.by_id.contains_key(&node.global_id) {
            return Err(PgatError::Dataset(format!(
                "global id {} appears more than once",
                node.global_id
            )));
        }
        self.by_id.insert(node.global_id, self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Result<&Keynode> {
        self.by_id
            .get(&id)
            .map(|i| &self.nodes[*i])
            .ok_or(PgatError::Lookup(id))
    }

    pub fn position(&self, id: u64) -> Result<Position> {
        self.get(id).map(|n| n.position)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keynode> {
        self.nodes.iter()
    }
}

/// A contiguous window of keynodes with positions normalized inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    /// Index of the first node in the source trajectory; windows are
    /// generated at stride one, so this is also the window's sequence index.
    pub index: usize,
    pub run_id: u32,
    pub keynode_ids: Vec<u64>,
    /// Normalized positions `(t − c) / σ`, one per keynode.
    pub positions: Vec<Position>,
    pub centroid: Position,
    pub sigma: f64,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.keynode_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keynode_ids.is_empty()
    }

    /// Builds a window from explicit keynodes, normalizing their positions.
    pub fn from_keynodes(index: usize, nodes: &[&Keynode]) -> Result<Self> {
        let first = nodes
            .first()
            .ok_or_else(|| PgatError::Input("subgraph with no keynodes".into()))?;
        let raw: Vec<Position> = nodes.iter().map(|n| n.position).collect();
        let (positions, centroid, sigma) = normalize_positions(&raw)?;
        Ok(Subgraph {
            index,
            run_id: first.run_id,
            keynode_ids: nodes.iter().map(|n| n.global_id).collect(),
            positions,
            centroid,
            sigma,
        })
    }
}

fn distance(a: &Position, b: &Position) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Cuts a trajectory into stride-1 windows by travelled distance.
///
/// Window `l` starts at node `l` and keeps appending nodes while the
/// along-path distance from its first node stays `<= distance_threshold`.
/// Windows with fewer than two nodes are dropped.
pub fn build_subgraphs(traj: &Trajectory, distance_threshold: f64) -> Result<Vec<Subgraph>> {
    if traj.is_empty() {
        return Err(PgatError::Input(format!("run {} has no keynodes", traj.run_id)));
    }
    if !(distance_threshold > 0.0) {
        return Err(PgatError::Input(format!(
            "distance threshold must be positive, got {distance_threshold}"
        )));
    }
    let nodes = &traj.nodes;
    let steps: Vec<f64> = nodes
        .windows(2)
        .map(|w| distance(&w[0].position, &w[1].position))
        .collect();
    let mut out = Vec::new();
    for start in 0..nodes.len() {
        let mut end = start;
        let mut travelled = 0.0;
        while end + 1 < nodes.len() && travelled + steps[end] <= distance_threshold {
            travelled += steps[end];
            end += 1;
        }
        if end > start {
            let members: Vec<&Keynode> = nodes[start..=end].iter().collect();
            out.push(Subgraph::from_keynodes(start, &members)?);
        }
    }
    Ok(out)
}

/// Centroid, RMS scatter and normalized positions of a set of points.
///
/// A scatter below [`MIN_SCATTER`] falls back to 1.
pub fn normalize_positions(points: &[Position]) -> Result<(Vec<Position>, Position, f64)> {
    if points.is_empty() {
        return Err(PgatError::Input("cannot normalize an empty point set".into()));
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let mean_sq = points
        .iter()
        .map(|p| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let mut sigma = mean_sq.sqrt();
    if sigma < MIN_SCATTER {
        sigma = 1.0;
    }
    let normalized = points
        .iter()
        .map(|p| [(p[0] - c[0]) / sigma, (p[1] - c[1]) / sigma, (p[2] - c[2]) / sigma])
        .collect();
    Ok((normalized, c, sigma))
}

/// Ground truth for every keynode pair of two subgraphs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLabels {
    /// 1 where the pair is the same place.
    pub y: Matrix,
    /// 1 where the pair contributes to the loss.
    pub omega: Matrix,
}

impl PairLabels {
    pub fn active_pairs(&self) -> usize {
        self.omega.as_slice().iter().filter(|w| **w > 0.0).count()
    }

    pub fn positive_pairs(&self) -> usize {
        self.y
            .as_slice()
            .iter()
            .zip(self.omega.as_slice())
            .filter(|(y, w)| **y > 0.0 && **w > 0.0)
            .count()
    }
}

/// Distance bands used to label keynode pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelBands {
    /// Pairs closer than this are positives.
    pub d_pos: f64,
    /// Pairs at least this far apart are negatives; in between is ignored.
    pub d_neg: f64,
}

impl Default for LabelBands {
    fn default() -> Self {
        LabelBands {
            d_pos: 10.0,
            d_neg: 50.0,
        }
    }
}

impl LabelBands {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_pos > 0.0) || !(self.d_pos <= self.d_neg) {
            return Err(PgatError::Config(format!(
                "label bands need 0 < d_pos <= d_neg, got {} / {}",
                self.d_pos, self.d_neg
            )));
        }
        Ok(())
    }
}

/// Labels every (a, b) keynode pair by global distance.
pub fn pair_labels(a: &Subgraph, b: &Subgraph, keynodes: &KeynodeSet, bands: LabelBands) -> Result<PairLabels> {
    bands.validate()?;
    let pa: Vec<Position> = a.keynode_ids.iter().map(|id| keynodes.position(*id)).collect::<Result<_>>()?;
    let pb: Vec<Position> = b.keynode_ids.iter().map(|id| keynodes.position(*id)).collect::<Result<_>>()?;
    let mut y = Matrix::zeros(pa.len(), pb.len());
    let mut omega = Matrix::zeros(pa.len(), pb.len());
    for (i, ta) in pa.iter().enumerate() {
        for (j, tb) in pb.iter().enumerate() {
            let same = a.keynode_ids[i] == b.keynode_ids[j];
            let d = distance(ta, tb);
            if same || d < bands.d_pos {
                y[(i, j)] = 1.0;
                omega[(i, j)] = 1.0;
            } else if d >= bands.d_neg {
                omega[(i, j)] = 1.0;
            }
        }
    }
    Ok(PairLabels { y, omega })
}

/// Whether two subgraphs share at least one keynode pair closer than `d_pos`.
pub fn has_positive_pair(a: &Subgraph, b: &Subgraph, keynodes: &KeynodeSet, d_pos: f64) -> Result<bool> {
    for ia in &a.keynode_ids {
        let ta = keynodes.position(*ia)?;
        for ib in &b.keynode_ids {
            if ia == ib || distance(&ta, &keynodes.position(*ib)?) < d_pos {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

pub fn euclidean(a: &Position, b: &Position) -> f64 {
    distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize, spacing: f64) -> Trajectory {
        let nodes = (0..n)
            .map(|i| Keynode {
                global_id: i as u64,
                run_id: 0,
                position: [i as f64 * spacing, 0.0, 0.0],
                descriptor: vec![0.0; 4],
            })
            .collect();
        Trajectory::new(0, nodes).unwrap()
    }

    #[test]
    fn twenty_meter_line_gives_eleven_node_windows() {
        let subs = build_subgraphs(&line(30, 20.0), 200.0).unwrap();
        // 200 m fits exactly at +10 nodes
        assert_eq!(subs[0].len(), 11);
        for s in subs.iter().filter(|s| s.index + 11 <= 30) {
            assert_eq!(s.len(), 11);
        }
        // trailing windows shrink down to two nodes
        assert_eq!(subs.last().unwrap().len(), 2);
        assert_eq!(subs.len(), 29);
    }

    #[test]
    fn sparse_trajectory_has_no_windows() {
        assert!(build_subgraphs(&line(3, 300.0), 200.0).unwrap().is_empty());
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        let t = Trajectory::new(0, vec![]).unwrap();
        assert!(matches!(build_subgraphs(&t, 10.0), Err(PgatError::Input(_))));
    }

    #[test]
    fn stride_is_one_and_every_node_is_covered() {
        let t = line(15, 7.0);
        let subs = build_subgraphs(&t, 30.0).unwrap();
        for (l, s) in subs.iter().enumerate() {
            assert_eq!(s.index, l);
            assert_eq!(s.keynode_ids[0], l as u64);
        }
        for node in &t.nodes {
            assert!(subs.iter().any(|s| s.keynode_ids.contains(&node.global_id)));
        }
    }

    #[test]
    fn normalization_examples() {
        let (p, c, s) = normalize_positions(&[[5.0, -3.0, 2.0]]).unwrap();
        assert_eq!(p, vec![[0.0, 0.0, 0.0]]);
        assert_eq!(c, [5.0, -3.0, 2.0]);
        assert_eq!(s, 1.0);

        let (p, c, s) = normalize_positions(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(c, [1.0, 0.0, 0.0]);
        assert_eq!(s, 1.0);
        assert_eq!(p, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalized_cloud_is_centered_with_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Position> = (0..8)
            .map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0)])
            .collect();
        let (p, _, _) = normalize_positions(&pts).unwrap();
        for k in 0..3 {
            let mean: f64 = p.iter().map(|q| q[k]).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
        }
        let ms: f64 = p.iter().map(|q| q.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 8.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }

    fn two_node_set(dist: f64) -> (KeynodeSet, Subgraph, Subgraph) {
        let a = Keynode {
            global_id: 1,
            run_id: 0,
            position: [0.0, 0.0, 0.0],
            descriptor: vec![1.0],
        };
        let b = Keynode {
            global_id: 2,
            run_id: 1,
            position: [dist, 0.0, 0.0],
            descriptor: vec![1.0],
        };
        let sa = Subgraph::from_keynodes(0, &[&a]).unwrap();
        let sb = Subgraph::from_keynodes(0, &[&b]).unwrap();
        let mut set = KeynodeSet::default();
        set.insert(a).unwrap();
        set.insert(b).unwrap();
        (set, sa, sb)
    }

    #[test]
    fn label_bands() {
        let bands = LabelBands {
            d_pos: 10.0,
            d_neg: 50.0,
        };
        let (set, a, b) = two_node_set(100.0);
        let l = pair_labels(&a, &b, &set, bands).unwrap();
        assert_eq!((l.y[(0, 0)], l.omega[(0, 0)]), (0.0, 1.0));

        let (set, a, b) = two_node_set(25.0);
        let l = pair_labels(&a, &b, &set, bands).unwrap();
        assert_eq!(l.omega[(0, 0)], 0.0);

        let l = pair_labels(&a, &a, &set, bands).unwrap();
        assert_eq!((l.y[(0, 0)], l.omega[(0, 0)]), (1.0, 1.0));
    }

    #[test]
    fn unknown_id_is_a_lookup_error() {
        let (set, a, _) = two_node_set(5.0);
        let mut ghost = a.clone();
        ghost.keynode_ids[0] = 99;
        assert!(matches!(
            pair_labels(&ghost, &a, &set, LabelBands::default()),
            Err(PgatError::Lookup(99))
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let t = line(3, 1.0);
        assert!(KeynodeSet::from_trajectories([&t, &t]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_is_translation_and_scale_invariant(
            seed in 0u64..10_000,
            shift in proptest::array::uniform3(-1e3f64..1e3),
            k in 0.1f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Position> = (0..6)
                .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0)])
                .collect();
            let (p0, _, _) = normalize_positions(&pts).unwrap();
            let moved: Vec<Position> = pts.iter().map(|q| [q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]]).collect();
            let scaled: Vec<Position> = pts.iter().map(|q| [q[0] * k, q[1] * k, q[2] * k]).collect();
            let (p1, _, _) = normalize_positions(&moved).unwrap();
            let (p2, _, _) = normalize_positions(&scaled).unwrap();
            for i in 0..6 {
                for c in 0..3 {
                    prop_assert!((p0[i][c] - p1[i][c]).abs() < 1e-12);
                    prop_assert!((p0[i][c] - p2[i][c]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn labels_are_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set = KeynodeSet::default();
            let mut nodes = Vec::new();
            for id in 0..9u64 {
                let n = Keynode {
                    global_id: id,
                    run_id: 0,
                    position: [rng.random_range(0.0..80.0), rng.random_range(0.0..80.0), 0.0],
                    descriptor: vec![0.0],
                };
                set.insert(n.clone()).unwrap();
                nodes.push(n);
            }
            let a = Subgraph::from_keynodes(0, &nodes[..5].iter().collect::<Vec<_>>()).unwrap();
            let b = Subgraph::from_keynodes(3, &nodes[3..].iter().collect::<Vec<_>>()).unwrap();
            let ab = pair_labels(&a, &b, &set, LabelBands::default()).unwrap();
            let ba = pair_labels(&b, &a, &set, LabelBands::default()).unwrap();
            prop_assert_eq!(ab.y.transpose(), ba.y);
            prop_assert_eq!(ab.omega.transpose(), ba.omega);
        }
    }
}
