//! Two-stage retrieval over a dataset: vector top-k, then BEV reranking
//! and pose estimation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::encoder::{embed_query, embed_reference, encode_aerial, encode_panorama, BevGeometry, EncoderParams};
use crate::geometry::{build_pose_grid, GridSpec, Pose2};
use crate::matcher::{volume_raw, AerialSpectrum, Backend, MatchContext, ScoreVolume};
use crate::retrieval::{
    estimate_pose, pose_metrics, pose_posterior, recall_at_k, rerank, retrieval_score, topk, CandidateSet,
    EmbeddingIndex, FusionWeights, PoseEstimate, PoseMetrics,
};
use crate::synth::{Dataset, Split, SyntheticSample};
use crate::util::par_map;
use crate::{Error, Result, Tensor};

/// Recall cut-offs reported by [`evaluate`].
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Settings of a two-stage evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// Candidates kept from stage one; clamped to the number of references.
    pub k: usize,
    /// Divides cosine similarities into prior logits.
    pub prior_temperature: f64,
    /// Divides raw score volumes into pose logits.
    pub match_temperature: f64,
    pub fusion: FusionWeights,
    pub backend: Backend,
    pub grid: GridSpec,
}

impl PipelineConfig {
    pub fn desk_default() -> Self {
        Self {
            k: 100,
            prior_temperature: 0.01,
            match_temperature: 0.01,
            fusion: FusionWeights::default(),
            backend: Backend::Fft,
            grid: GridSpec::desk_default(),
        }
    }
}

/// Everything computed for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: u32,
    pub true_reference: u32,
    /// Stage-one ranking.
    pub stage1: CandidateSet,
    /// Stage-two ranking after fusion.
    pub reranked: CandidateSet,
    /// Pose on the top-ranked reference, relative to its centre.
    pub top_pose: PoseEstimate,
    /// Pose estimated on the matching reference.
    pub matching_pose: Pose2,
    pub truth: Pose2,
}

/// Results and summary metrics of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<QueryResult>,
    /// Candidate count actually used.
    pub k: usize,
    /// Recall at [`RECALL_KS`] of the stage-one ranking.
    pub stage1_recall: Vec<f64>,
    /// Recall at [`RECALL_KS`] of the reranked list.
    pub stage2_recall: Vec<f64>,
    /// Pose errors on matching pairs.
    pub pose: PoseMetrics,
}

/// Encoded reference side: embedding index plus cached aerial spectra.
pub struct ReferenceSet {
    index: EmbeddingIndex,
    aerials: BTreeMap<u32, (Tensor, AerialSpectrum)>,
}

impl ReferenceSet {
    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }
}

/// Embeds and encodes the worlds hosting samples of `split`.
pub fn encode_references(
    dataset: &Dataset,
    split: Split,
    params: &EncoderParams,
    ctx: &MatchContext,
) -> Result<ReferenceSet> {
    let hosts: alloc::collections::BTreeSet<u32> = dataset.samples_in(split).map(|s| s.world_id).collect();
    let worlds: Vec<_> = dataset.worlds.iter().filter(|w| hosts.contains(&w.id)).collect();
    let encoded = par_map(worlds.len(), |i| -> Result<_> {
        let w = worlds[i];
        let e = embed_reference(&w.field, params)?;
        let a = encode_aerial(&w.field, params)?;
        let spec = ctx.aerial_spectrum(a.tensor.data(), a.tensor.shape()[2]);
        Ok((w.id, w.origin, e, a.tensor, spec))
    });
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut locations = Vec::new();
    let mut aerials = BTreeMap::new();
    for item in encoded {
        let (id, origin, e, a, spec) = item?;
        ids.push(id);
        vectors.push(e);
        locations.push(origin);
        aerials.insert(id, (a, spec));
    }
    Ok(ReferenceSet {
        index: EmbeddingIndex::new(ids, vectors, locations)?,
        aerials,
    })
}

/// Runs both stages for one query sample.
pub fn process_query(
    sample: &SyntheticSample,
    refs: &ReferenceSet,
    params: &EncoderParams,
    geom: &BevGeometry,
    ctx: &MatchContext,
    config: &PipelineConfig,
    k: usize,
) -> Result<QueryResult> {
    let grid = ctx.grid().clone();
    let q = embed_query(&sample.pano, params)?;
    let stage1 = topk(&refs.index, sample.id, &q, k, config.prior_temperature)?;
    let bev = encode_panorama(&sample.pano, params, geom)?;
    let c = bev.tensor.shape()[2];
    let bev_spec = match config.backend {
        Backend::Fft => Some(ctx.bev_spectrum(bev.tensor.data(), c)),
        Backend::BruteForce => None,
    };
    let volume = |reference: u32| -> Result<ScoreVolume> {
        let (aerial, spectrum) = refs
            .aerials
            .get(&reference)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown reference {reference}")))?;
        let raw = match &bev_spec {
            Some(b) => ctx.volume_from_spectra(b, spectrum),
            None => volume_raw(bev.tensor.data(), aerial.data(), c, ctx, Backend::BruteForce),
        };
        let s = grid.spec();
        let t = Tensor::new([s.n_t, s.n_t, s.n_theta], raw.into_iter().map(|v| v as f32).collect())?;
        Ok(ScoreVolume::new(t, grid.clone())?.scaled(1.0 / config.match_temperature))
    };
    let mut volumes = BTreeMap::new();
    let mut bev_scores = Vec::with_capacity(stage1.entries.len());
    for cand in &stage1.entries {
        let v = volume(cand.reference_id)?;
        bev_scores.push(retrieval_score(&v));
        volumes.insert(cand.reference_id, v);
    }
    let reranked = rerank(&stage1, &bev_scores, config.fusion)?;
    let top = reranked.entries[0].reference_id;
    let top_pose = estimate_pose(&pose_posterior(&volumes[&top]), &grid)?;
    let matching = match volumes.get(&sample.world_id) {
        Some(v) => estimate_pose(&pose_posterior(v), &grid)?,
        None => estimate_pose(&pose_posterior(&volume(sample.world_id)?), &grid)?,
    };
    Ok(QueryResult {
        query_id: sample.id,
        true_reference: sample.world_id,
        stage1,
        reranked,
        top_pose,
        matching_pose: matching.pose(),
        truth: sample.pose,
    })
}

/// Evaluates every sample of `split` against the worlds hosting that split.
pub fn evaluate(dataset: &Dataset, split: Split, params: &EncoderParams, config: &PipelineConfig) -> Result<Evaluation> {
    let ctx = MatchContext::new(build_pose_grid(config.grid)?)?;
    let geom = BevGeometry::from_config(params.config())?;
    let refs = encode_references(dataset, split, params, &ctx)?;
    let k = config.k.clamp(1, refs.index.len());
    let queries: Vec<&SyntheticSample> = dataset.samples_in(split).collect();
    if queries.is_empty() {
        return Err(Error::Empty { op: "evaluate" });
    }
    let results = par_map(queries.len(), |i| process_query(queries[i], &refs, params, &geom, &ctx, config, k))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let truth: BTreeMap<u32, u32> = results.iter().map(|r| (r.query_id, r.true_reference)).collect();
    let s1: Vec<CandidateSet> = results.iter().map(|r| r.stage1.clone()).collect();
    let s2: Vec<CandidateSet> = results.iter().map(|r| r.reranked.clone()).collect();
    let est: Vec<Pose2> = results.iter().map(|r| r.matching_pose).collect();
    let gt: Vec<Pose2> = results.iter().map(|r| r.truth).collect();
    Ok(Evaluation {
        k,
        stage1_recall: recall_at_k(&s1, &truth, &RECALL_KS)?,
        stage2_recall: recall_at_k(&s2, &truth, &RECALL_KS)?,
        pose: pose_metrics(&est, &gt)?,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{build_dataset, DatasetConfig, PanoramaSpec};

    fn toy() -> (Dataset, EncoderParams, PipelineConfig) {
        let mut c = DatasetConfig::desk_default();
        c.n_worlds = 6;
        c.world_size = 20;
        c.c_in = 2;
        c.pano = PanoramaSpec {
            height: 5,
            width: 16,
            max_range: 4.0,
        };
        c.search_extent = 8.0;
        let ds = build_dataset(&c).unwrap();
        let enc = EncoderConfig {
            c_in: 2,
            hidden: 6,
            pano_channels: 6,
            channels: 4,
            depth_bins: 4,
            pano_height: 5,
            pano_width: 16,
            embed_dim: 8,
            kernel: 3,
            bev_side: 7,
            pixel_size: 1.0,
            search_extent: 8.0,
        };
        let params = EncoderParams::init(enc, 0).unwrap();
        let cfg = PipelineConfig {
            k: 100,
            prior_temperature: 0.01,
            match_temperature: 0.01,
            fusion: FusionWeights::default(),
            backend: Backend::Fft,
            grid: GridSpec {
                n_t: 8,
                n_theta: 4,
                search_extent: 8.0,
                pixel_size: 1.0,
                l_a: 20,
                l_b: 7,
            },
        };
        (ds, params, cfg)
    }

    #[test]
    fn clamps_k_and_reports_all_queries() {
        let (ds, params, cfg) = toy();
        let ev = evaluate(&ds, Split::Test, &params, &cfg).unwrap();
        assert_eq!(ev.k, 6);
        assert_eq!(ev.results.len(), 6);
        assert!(ev.results.iter().all(|r| r.reranked.entries.len() == 6));
        assert!(ev.stage1_recall[2] == 1.0 && ev.stage2_recall[2] == 1.0);
    }

    #[test]
    fn backends_rank_identically() {
        let (ds, params, cfg) = toy();
        let a = evaluate(&ds, Split::Test, &params, &cfg).unwrap();
        let b = evaluate(&ds, Split::Test, &params, &PipelineConfig { backend: Backend::BruteForce, ..cfg }).unwrap();
        for (x, y) in a.results.iter().zip(&b.results) {
            assert_eq!(x.reranked.ranked_ids(), y.reranked.ranked_ids());
        }
    }

    #[test]
    fn without_prior_changes_only_combined_scores() {
        let (ds, params, cfg) = toy();
        let a = evaluate(&ds, Split::Test, &params, &cfg).unwrap();
        let b = evaluate(&ds, Split::Test, &params, &PipelineConfig { fusion: FusionWeights::without_prior(), ..cfg }).unwrap();
        for (x, y) in a.results.iter().zip(&b.results) {
            assert_eq!(x.stage1, y.stage1);
            for c in &y.reranked.entries {
                let same = x.reranked.entries.iter().find(|e| e.reference_id == c.reference_id).unwrap();
                assert_eq!(c.bev_score, same.bev_score);
                assert_eq!(c.combined, c.bev_score);
            }
        }
    }
}
