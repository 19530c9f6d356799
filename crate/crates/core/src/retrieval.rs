//! Vector retrieval, score-volume scoring, reranking, pose estimates and
//! evaluation metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::geometry::{Pose2, PoseGrid};
use crate::matcher::ScoreVolume;
use crate::math::{self, TAU};
use crate::{Error, Result, Tensor};

/// Unit-norm embeddings of the references with their ids and metric
/// locations. Search is an exhaustive cosine scan.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u32>,
    vectors: Tensor,
    locations: Vec<(f64, f64)>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<u32>, vectors: Vec<Vec<f32>>, locations: Vec<(f64, f64)>) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Empty { op: "embedding_index" });
        }
        if vectors.len() != n || locations.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: vectors.len().min(locations.len()),
            });
        }
        let e = vectors[0].len();
        let mut seen = BTreeSet::new();
        let mut data = Vec::with_capacity(n * e);
        for (id, v) in ids.iter().zip(&vectors) {
            if !seen.insert(*id) {
                return Err(Error::InvalidConfig(format!("duplicate reference id {id}")));
            }
            if v.len() != e {
                return Err(Error::LengthMismatch { expected: e, got: v.len() });
            }
            let norm = math::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum());
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidConfig(format!(
                    "embedding of reference {id} has norm {norm}, expected 1"
                )));
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            ids,
            vectors: Tensor::new([n, e], data)?,
            locations,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        let e = self.dim();
        &self.vectors.data()[i * e..(i + 1) * e]
    }

    pub fn locations(&self) -> &[(f64, f64)] {
        &self.locations
    }

    pub fn position_of(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Cosine similarity of `query` to every reference, in index order.
    pub fn similarities(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        Ok((0..self.len())
            .map(|i| {
                self.vector(i)
                    .iter()
                    .zip(query)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum()
            })
            .collect())
    }
}

/// One candidate reference of a query.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub reference_id: u32,
    /// Stage-1 logit (cosine similarity over the prior temperature).
    pub prior_logit: f64,
    pub bev_score: Option<f64>,
    pub combined: Option<f64>,
}

impl Candidate {
    /// Score the set is ordered by: the combined score once reranked.
    pub fn active_score(&self) -> f64 {
        self.combined.unwrap_or(self.prior_logit)
    }
}

/// Ranked candidates of one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub query_id: u32,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn ranked_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|c| c.reference_id).collect()
    }

    /// Rank (0-based) of `id`, if present.
    pub fn rank_of(&self, id: u32) -> Option<usize> {
        self.entries.iter().position(|c| c.reference_id == id)
    }
}

/// The `k` most similar references; ties are broken by ascending id.
pub fn topk(index: &EmbeddingIndex, query_id: u32, query: &[f32], k: usize, prior_temperature: f64) -> Result<CandidateSet> {
    if index.is_empty() {
        return Err(Error::Empty { op: "topk" });
    }
    if k == 0 || k > index.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be in 1..={}",
            index.len()
        )));
    }
    if !(prior_temperature > 0.0) {
        return Err(Error::InvalidConfig("prior temperature must be positive".into()));
    }
    let sims = index.similarities(query)?;
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .total_cmp(&sims[a])
            .then(index.ids[a].cmp(&index.ids[b]))
    });
    let entries = order
        .into_iter()
        .take(k)
        .map(|i| Candidate {
            reference_id: index.ids[i],
            prior_logit: sims[i] / prior_temperature,
            bev_score: None,
            combined: None,
        })
        .collect();
    Ok(CandidateSet { query_id, entries })
}

/// Retrieval logit of a score volume: log-sum-exp over every hypothesis.
pub fn retrieval_score(volume: &ScoreVolume) -> f64 {
    lse_values(volume.values().data())
}

fn lse_values(values: &[f32]) -> f64 {
    math::logsumexp(values.iter().map(|&v| v as f64))
}

/// Softmax over the whole volume.
pub fn pose_posterior(volume: &ScoreVolume) -> Tensor {
    let v = volume.values();
    let lse = lse_values(v.data());
    let data = v.data().iter().map(|&x| math::exp(x as f64 - lse) as f32).collect();
    Tensor::new(v.shape().to_vec(), data).expect("same shape")
}

/// Posterior-weighted pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Metres east of the aerial centre.
    pub x: f64,
    /// Metres north of the aerial centre.
    pub y: f64,
    pub theta: f64,
    pub posterior: Tensor,
}

impl PoseEstimate {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.theta)
    }
}

/// Probability-weighted mean translation and circular-mean heading.
pub fn estimate_pose(posterior: &Tensor, grid: &PoseGrid) -> Result<PoseEstimate> {
    let s = grid.spec();
    if posterior.shape() != [s.n_t, s.n_t, s.n_theta] {
        return Err(Error::dim(
            "estimate_pose",
            format!("posterior {:?} does not match the grid", posterior.shape()),
        ));
    }
    let p = posterior.data();
    let total: f64 = p.iter().map(|&v| v as f64).sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidConfig(format!("posterior sums to {total}, expected 1")));
    }
    let (mut x, mut y, mut cs, mut sn) = (0.0, 0.0, 0.0, 0.0);
    for (i, pose) in grid.poses().iter().enumerate() {
        let w = p[i] as f64 / total;
        x += w * pose.x;
        y += w * pose.y;
        cs += w * math::cos(pose.theta);
        sn += w * math::sin(pose.theta);
    }
    let theta = if math::sqrt(cs * cs + sn * sn) < 1e-9 {
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        grid.poses()[best].theta
    } else {
        math::wrap_angle(math::atan2(sn, cs))
    };
    Ok(PoseEstimate {
        x,
        y,
        theta,
        posterior: posterior.clone(),
    })
}

/// Relative weights of the two stages when fusing logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub prior: f64,
    pub bev: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { prior: 1.0, bev: 1.0 }
    }
}

impl FusionWeights {
    /// Ranking by BEV scores alone.
    pub fn without_prior() -> Self {
        Self { prior: 0.0, bev: 1.0 }
    }
}

/// Adds BEV logits to the prior logits and re-sorts (stable on ties).
pub fn rerank(candidates: &CandidateSet, bev_scores: &[f64], weights: FusionWeights) -> Result<CandidateSet> {
    if bev_scores.len() != candidates.entries.len() {
        return Err(Error::LengthMismatch {
            expected: candidates.entries.len(),
            got: bev_scores.len(),
        });
    }
    let mut entries: Vec<Candidate> = candidates
        .entries
        .iter()
        .zip(bev_scores)
        .map(|(c, &b)| Candidate {
            combined: Some(weights.prior * c.prior_logit + weights.bev * b),
            bev_score: Some(b),
            ..c.clone()
        })
        .collect();
    entries.sort_by(|a, b| b.active_score().total_cmp(&a.active_score()));
    Ok(CandidateSet {
        query_id: candidates.query_id,
        entries,
    })
}

/// Fraction of queries whose true reference is within the top `k`, for each
/// `k` in `ks`.
pub fn recall_at_k(results: &[CandidateSet], groundtruth: &BTreeMap<u32, u32>, ks: &[usize]) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::Empty { op: "recall_at_k" });
    }
    let mut ranks = Vec::with_capacity(results.len());
    for r in results {
        let truth = groundtruth
            .get(&r.query_id)
            .ok_or(Error::MissingGroundtruth(r.query_id))?;
        ranks.push(r.rank_of(*truth));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(x) if *x < k)).count();
            hits as f64 / results.len() as f64
        })
        .collect())
}

/// Translation (metres) and orientation (degrees) error summaries.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseMetrics {
    pub count: usize,
    pub mean_t_err_m: f64,
    pub median_t_err_m: f64,
    pub mean_r_err_deg: f64,
    pub median_r_err_deg: f64,
}

/// Smallest absolute difference between two headings, in degrees.
pub fn angle_error_deg(a: f64, b: f64) -> f64 {
    let d = math::wrap_angle(a - b);
    d.min(TAU - d).to_degrees()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Errors of matched estimate/groundtruth pairs.
pub fn pose_metrics(estimates: &[Pose2], groundtruth: &[Pose2]) -> Result<PoseMetrics> {
    if estimates.len() != groundtruth.len() {
        return Err(Error::LengthMismatch {
            expected: groundtruth.len(),
            got: estimates.len(),
        });
    }
    let n = estimates.len();
    if n == 0 {
        return Ok(PoseMetrics::default());
    }
    let t: Vec<f64> = estimates
        .iter()
        .zip(groundtruth)
        .map(|(e, g)| math::sqrt((e.x - g.x) * (e.x - g.x) + (e.y - g.y) * (e.y - g.y)))
        .collect();
    let r: Vec<f64> = estimates
        .iter()
        .zip(groundtruth)
        .map(|(e, g)| angle_error_deg(e.theta, g.theta))
        .collect();
    Ok(PoseMetrics {
        count: n,
        mean_t_err_m: t.iter().sum::<f64>() / n as f64,
        median_t_err_m: median(&t),
        mean_r_err_deg: r.iter().sum::<f64>() / n as f64,
        median_r_err_deg: median(&r),
    })
}
