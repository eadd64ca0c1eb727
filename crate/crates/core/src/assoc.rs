//! VO validation of raw place-recognition matches, the experience
//! association graph and training-pair sampling.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Transform;
use crate::placerec::{align, RawMatch, SeqSlamParams};
use crate::simworld::{Dataset, Experience};
use crate::table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStatus {
    Validated,
    Replaced,
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub query_frame: usize,
    pub ref_frame: usize,
    pub status: MatchStatus,
    /// VO-predicted squared distance between the two frames (m²).
    pub sq_distance: f64,
}

pub const CORRESPONDENCE_HEADER: [&str; 4] = ["query_frame", "ref_frame", "status", "sq_distance"];

/// One entry per query frame, mapping it into the reference experience.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub query_id: u32,
    pub ref_id: u32,
    pub entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn count(&self, status: MatchStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        table::to_csv_bytes(&self.entries, &CORRESPONDENCE_HEADER)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        table::write_csv(path, &self.entries, &CORRESPONDENCE_HEADER)
    }

    pub fn read_csv(path: &Path, query_id: u32, ref_id: u32) -> Result<Self> {
        let entries: Vec<Correspondence> = table::read_csv(path, &CORRESPONDENCE_HEADER)?;
        for (k, e) in entries.iter().enumerate() {
            if e.query_frame != k || !(e.sq_distance >= 0.0) {
                return Err(Error::corrupt(path, format!("bad entry on row {}", k + 1)));
            }
        }
        Ok(Self {
            query_id,
            ref_id,
            entries,
        })
    }
}

/// Parameters of VO validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationParams {
    /// Squared distance threshold (m²).
    pub e_sq: f64,
    /// Replacement search half-window (frames).
    pub window: usize,
}

impl Default for ValidationParams {
    fn default() -> Self {
        Self { e_sq: 0.25, window: 10 }
    }
}

impl ValidationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_sq >= 0.0) || !self.e_sq.is_finite() {
            return Err(Error::InvalidConfig(format!("e_sq must be finite and non-negative, got {}", self.e_sq)));
        }
        Ok(())
    }
}

fn vo_edges(exp: &Experience) -> Result<Vec<Transform>> {
    exp.frames
        .iter()
        .skip(1)
        .map(|f| {
            f.vo_edge.ok_or(Error::MissingVo {
                experience: exp.id,
                frame: f.index,
            })
        })
        .collect()
}

/// `T_{to,from}` from the VO chain between two frames of one experience.
/// `edges[n-1]` maps frame `n-1` into frame `n`.
fn chain(edges: &[Transform], from: usize, to: usize) -> Transform {
    let (lo, hi) = (from.min(to), from.max(to));
    let mut t = Transform::identity();
    for e in &edges[lo..hi] {
        t = e.compose(&t);
    }
    if to >= from {
        t
    } else {
        t.inverse()
    }
}

/// Validation outcome with the VO chain lengths used per query frame.
pub(crate) struct ValidationTrace {
    pub set: CorrespondenceSet,
    /// Query-side chain length (frames since the last validated match).
    #[cfg_attr(not(test), allow(dead_code))]
    pub chain_len: Vec<usize>,
}

pub(crate) fn validate_traced(
    query: &Experience,
    reference: &Experience,
    raw: &[RawMatch],
    params: &ValidationParams,
) -> Result<ValidationTrace> {
    params.validate()?;
    let qe = vo_edges(query)?;
    let re = vo_edges(reference)?;
    if raw.len() != query.len() || raw.iter().enumerate().any(|(k, m)| m.query_frame != k) {
        return Err(Error::InvalidConfig(format!(
            "raw matches must list query frames 0..{} in order",
            query.len()
        )));
    }
    if let Some(m) = raw.iter().find(|m| m.ref_frame >= reference.len()) {
        return Err(Error::InvalidConfig(format!(
            "raw match references frame {} of a {}-frame experience",
            m.ref_frame,
            reference.len()
        )));
    }

    // both traversals start at the same place
    let (mut q0, mut r0) = (0usize, 0usize);
    let mut entries = vec![Correspondence {
        query_frame: 0,
        ref_frame: 0,
        status: MatchStatus::Validated,
        sq_distance: 0.0,
    }];
    let mut chain_len = vec![0];
    for m in &raw[1..] {
        let q1 = m.query_frame;
        let t_q = chain(&qe, q0, q1);
        let t_q_inv = t_q.inverse();
        let predicted = |r: usize| chain(&re, r0, r).compose(&t_q_inv).sq_translation_distance();
        chain_len.push(q1 - q0);
        let d = predicted(m.ref_frame);
        if d <= params.e_sq {
            entries.push(Correspondence {
                query_frame: q1,
                ref_frame: m.ref_frame,
                status: MatchStatus::Validated,
                sq_distance: d,
            });
            q0 = q1;
            r0 = m.ref_frame;
            continue;
        }
        let lo = m.ref_frame.saturating_sub(params.window);
        let hi = (m.ref_frame + params.window).min(reference.len() - 1);
        let best = (lo..=hi)
            .map(|r| (r, predicted(r)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)))
            .expect("window is non-empty");
        entries.push(if best.1 <= params.e_sq {
            Correspondence {
                query_frame: q1,
                ref_frame: best.0,
                status: MatchStatus::Replaced,
                sq_distance: best.1,
            }
        } else {
            Correspondence {
                query_frame: q1,
                ref_frame: m.ref_frame,
                status: MatchStatus::Rejected,
                sq_distance: d,
            }
        });
    }
    Ok(ValidationTrace {
        set: CorrespondenceSet {
            query_id: query.id,
            ref_id: reference.id,
            entries,
        },
        chain_len,
    })
}

/// Checks each raw match against the VO chains since the last validated
/// match, replacing or rejecting inconsistent ones.
pub fn validate_matches(
    query: &Experience,
    reference: &Experience,
    raw: &[RawMatch],
    params: &ValidationParams,
) -> Result<CorrespondenceSet> {
    validate_traced(query, reference, raw, params).map(|t| t.set)
}

/// Fraction of entries whose place-recognition candidate failed validation.
pub fn edge_cost(cs: &CorrespondenceSet) -> f64 {
    if cs.entries.is_empty() {
        return 0.0;
    }
    let bad = cs.entries.iter().filter(|e| e.status != MatchStatus::Validated).count();
    bad as f64 / cs.entries.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphEdge {
    /// Query experience (the newer one).
    pub query: u32,
    pub reference: u32,
    pub cost: f64,
    /// Correspondence CSV, relative to the graph file.
    pub matches: PathBuf,
    #[serde(skip)]
    pub correspondences: CorrespondenceSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperienceGraph {
    pub vertices: Vec<u32>,
    pub edges: Vec<GraphEdge>,
}

pub fn match_file_name(query: u32, reference: u32) -> PathBuf {
    PathBuf::from(format!("matches_{query}_{reference}.csv"))
}

impl ExperienceGraph {
    /// Writes `graph.json` and one correspondence CSV per edge into `dir`.
    pub fn save(&self, graph_path: &Path) -> Result<()> {
        let dir = graph_path.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for e in &self.edges {
            e.correspondences.write_csv(&dir.join(&e.matches))?;
        }
        let json = serde_json::to_string_pretty(self).expect("graph serializes");
        std::fs::write(graph_path, json).map_err(|e| Error::io(graph_path, e))
    }

    pub fn load(graph_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(graph_path).map_err(|e| Error::corrupt(graph_path, e.to_string()))?;
        let mut g: ExperienceGraph =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(graph_path, e.to_string()))?;
        let dir = graph_path.parent().unwrap_or(Path::new("."));
        for e in &mut g.edges {
            e.correspondences = CorrespondenceSet::read_csv(&dir.join(&e.matches), e.query, e.reference)?;
        }
        Ok(g)
    }

    fn edge_between(&self, a: u32, b: u32) -> Option<&GraphEdge> {
        self.edges
            .iter()
            .find(|e| (e.query == a && e.reference == b) || (e.query == b && e.reference == a))
    }

    /// Sum of edge costs along a path (in path order).
    pub fn path_cost(&self, path: &[u32]) -> Option<f64> {
        let mut c = 0.0;
        for w in path.windows(2) {
            c += self.edge_between(w[0], w[1])?.cost;
        }
        Some(c)
    }
}

/// Index pairs `(i, j)` with `j` among the `k` predecessors of `i`.
pub fn neighbour_jobs(m: usize, k: usize) -> Vec<(usize, usize)> {
    (1..m).flat_map(|i| (i.saturating_sub(k)..i).rev().map(move |j| (i, j))).collect()
}

impl ExperienceGraph {
    /// One edge per correspondence set, costed by its rejection rate.
    pub fn from_sets(vertices: Vec<u32>, sets: Vec<CorrespondenceSet>) -> Self {
        let edges = sets
            .into_iter()
            .map(|cs| GraphEdge {
                query: cs.query_id,
                reference: cs.ref_id,
                cost: edge_cost(&cs),
                matches: match_file_name(cs.query_id, cs.ref_id),
                correspondences: cs,
            })
            .collect();
        Self { vertices, edges }
    }
}

/// Matches every experience against its `k` predecessors.
pub fn build_graph(
    dataset: &Dataset,
    k: usize,
    seqslam: &SeqSlamParams,
    validation: &ValidationParams,
) -> Result<ExperienceGraph> {
    let m = dataset.experiences.len();
    if m < 2 || k < 1 {
        return Err(Error::InvalidConfig(format!("graph needs M >= 2 and k >= 1, got M={m}, k={k}")));
    }
    let sets = neighbour_jobs(m, k)
        .par_iter()
        .map(|&(i, j)| {
            let (q, r) = (&dataset.experiences[i], &dataset.experiences[j]);
            align(q, r, seqslam)
                .and_then(|(_, raw)| validate_matches(q, r, &raw, validation))
                .map_err(|e| Error::Edge {
                    query: q.id,
                    reference: r.id,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperienceGraph::from_sets(
        dataset.experiences.iter().map(|e| e.id).collect(),
        sets,
    ))
}

#[derive(Clone, Debug, PartialEq)]
struct Label {
    cost: f64,
    path: Vec<u32>,
}

impl Label {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.path.len().cmp(&other.path.len()))
            .then_with(|| self.path.cmp(&other.path))
    }
}

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.cmp_key(self)
    }
}

/// Minimum-cost path over undirected edges. Ties go to fewer edges, then
/// to the lexicographically smaller vertex sequence.
pub fn min_cost_path(g: &ExperienceGraph, src: u32, dst: u32) -> Result<Vec<u32>> {
    for v in [src, dst] {
        if !g.vertices.contains(&v) {
            return Err(Error::InvalidConfig(format!("experience {v} is not in the graph")));
        }
    }
    let mut adj: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
    for e in &g.edges {
        adj.entry(e.query).or_default().push((e.reference, e.cost));
        adj.entry(e.reference).or_default().push((e.query, e.cost));
    }
    let mut settled: HashMap<u32, ()> = HashMap::new();
    let mut heap = BinaryHeap::new();
    heap.push(Label {
        cost: 0.0,
        path: vec![src],
    });
    while let Some(label) = heap.pop() {
        let v = *label.path.last().unwrap();
        if settled.insert(v, ()).is_some() {
            continue;
        }
        if v == dst {
            return Ok(label.path);
        }
        for &(w, c) in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if settled.contains_key(&w) {
                continue;
            }
            let mut path = label.path.clone();
            path.push(w);
            heap.push(Label {
                cost: label.cost + c,
                path,
            });
        }
    }
    Err(Error::NoPath { src, dst })
}

/// A set's map read backwards: for each reference frame, the entry whose
/// reference frame is nearest (within one frame), with roles swapped.
fn invert(cs: &CorrespondenceSet, ref_len: usize) -> CorrespondenceSet {
    let entries = (0..ref_len)
        .map(|f| {
            let best = cs
                .entries
                .iter()
                .filter(|e| e.status != MatchStatus::Rejected)
                .min_by_key(|e| (e.ref_frame.abs_diff(f), e.query_frame));
            match best {
                Some(e) if e.ref_frame.abs_diff(f) <= 1 => Correspondence {
                    query_frame: f,
                    ref_frame: e.query_frame,
                    status: e.status,
                    sq_distance: e.sq_distance,
                },
                other => Correspondence {
                    query_frame: f,
                    ref_frame: other.map_or(0, |e| e.query_frame),
                    status: MatchStatus::Rejected,
                    sq_distance: other.map_or(0.0, |e| e.sq_distance),
                },
            }
        })
        .collect();
    CorrespondenceSet {
        query_id: cs.ref_id,
        ref_id: cs.query_id,
        entries,
    }
}

fn frame_count(g: &ExperienceGraph, id: u32) -> usize {
    g.edges
        .iter()
        .map(|e| {
            if e.query == id {
                e.correspondences.entries.len()
            } else if e.reference == id {
                e.correspondences.entries.iter().map(|c| c.ref_frame + 1).max().unwrap_or(0)
            } else {
                0
            }
        })
        .max()
        .unwrap_or(0)
}

fn worse(a: MatchStatus, b: MatchStatus) -> MatchStatus {
    use MatchStatus::*;
    match (a, b) {
        (Rejected, _) | (_, Rejected) => Rejected,
        (Replaced, _) | (_, Replaced) => Replaced,
        _ => Validated,
    }
}

/// Chains frame maps along `path`, giving indirect correspondences from the
/// first experience to the last.
pub fn compose_correspondences(g: &ExperienceGraph, path: &[u32]) -> Result<CorrespondenceSet> {
    let (&src, &dst) = match (path.first(), path.last()) {
        (Some(s), Some(d)) => (s, d),
        _ => return Err(Error::InvalidConfig("empty path".into())),
    };
    let mut hops = Vec::with_capacity(path.len().saturating_sub(1));
    for w in path.windows(2) {
        let e = g
            .edge_between(w[0], w[1])
            .ok_or(Error::NoPath { src: w[0], dst: w[1] })?;
        hops.push(if e.query == w[0] {
            e.correspondences.clone()
        } else {
            invert(&e.correspondences, frame_count(g, w[0]))
        });
    }
    if hops.len() == 1 {
        return Ok(hops.pop().unwrap());
    }
    let n = frame_count(g, src);
    let mut entries: Vec<Correspondence> = (0..n)
        .map(|f| Correspondence {
            query_frame: f,
            ref_frame: f,
            status: MatchStatus::Validated,
            sq_distance: 0.0,
        })
        .collect();
    for hop in &hops {
        for c in &mut entries {
            match hop.entries.get(c.ref_frame) {
                Some(h) => {
                    c.ref_frame = h.ref_frame;
                    c.status = worse(c.status, h.status);
                    c.sq_distance = c.sq_distance.max(h.sq_distance);
                }
                None => c.status = MatchStatus::Rejected,
            }
        }
    }
    Ok(CorrespondenceSet {
        query_id: src,
        ref_id: dst,
        entries,
    })
}

/// Correspondences between every pair of experiences `a < b` (query `b`),
/// composed along the minimum-cost path.
pub fn indirect_sets(g: &ExperienceGraph) -> Result<Vec<CorrespondenceSet>> {
    let mut ids = g.vertices.clone();
    ids.sort_unstable();
    let jobs: Vec<(u32, u32)> = ids
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| ids[i + 1..].iter().map(move |&b| (b, a)))
        .collect();
    jobs.par_iter()
        .map(|&(q, r)| compose_correspondences(g, &min_cost_path(g, q, r)?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampledPair {
    pub exp_a: u32,
    pub frame_a: usize,
    pub exp_b: u32,
    pub frame_b: usize,
}

pub const PAIR_HEADER: [&str; 4] = ["exp_a", "frame_a", "exp_b", "frame_b"];

pub fn write_pairs(path: &Path, pairs: &[SampledPair]) -> Result<()> {
    table::write_csv(path, pairs, &PAIR_HEADER)
}

pub fn read_pairs(path: &Path) -> Result<Vec<SampledPair>> {
    table::read_csv(path, &PAIR_HEADER)
}

/// Uniform sampling with replacement over the non-rejected entries of all
/// given sets.
pub fn sample_pairs(sets: &[CorrespondenceSet], n: usize, seed: u64) -> Result<Vec<SampledPair>> {
    let pool: Vec<SampledPair> = sets
        .iter()
        .flat_map(|cs| {
            cs.entries
                .iter()
                .filter(|e| e.status != MatchStatus::Rejected)
                .map(|e| SampledPair {
                    exp_a: cs.query_id,
                    frame_a: e.query_frame,
                    exp_b: cs.ref_id,
                    frame_b: e.ref_frame,
                })
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyCorrespondences);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
}

/// `n` distinct pairs drawn like [`sample_pairs`], none of them in `exclude`.
/// Used for held-out sets.
pub fn sample_disjoint_pairs(
    sets: &[CorrespondenceSet],
    n: usize,
    seed: u64,
    exclude: &[SampledPair],
) -> Result<Vec<SampledPair>> {
    let taken: BTreeSet<SampledPair> = exclude.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let picked: Vec<SampledPair> = sample_pairs(sets, 16 * n + 64, seed ^ 0x4845_4C44_4F55_5400)?
        .into_iter()
        .filter(|p| !taken.contains(p) && seen.insert(*p))
        .take(n)
        .collect();
    if picked.len() < n {
        return Err(Error::InvalidConfig(format!(
            "only {} pairs disjoint from the excluded ones, wanted {n}",
            picked.len()
        )));
    }
    Ok(picked)
}
