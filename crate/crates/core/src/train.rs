//! Contrastive training of the vector-embedding stage and the BEV stage.
//!
//! Batches are one-to-one: every panorama in a batch has exactly one aerial
//! partner in the batch, and all other aerials act as its negatives. Batches
//! are assembled around one anchor panorama from its hardest negatives.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{infonce_forward, Padding, Tape, Var};
use crate::encoder::{
    aerial_forward, embed_forward, embed_query, embed_reference, panorama_forward, BevGeometry, EncoderConfig,
    EncoderParams, ParamGroup,
};
use crate::geometry::{build_pose_grid, GridSpec};
use crate::math;
use crate::matcher::MatchContext;
use crate::synth::{Dataset, Split};
use crate::tensor::{flip_horizontal, mirror_columns, roll_columns, rotate_quarter_turns};
use crate::util::par_map;
use crate::{Error, Result, Tensor};

/// Which of the two separately trained models a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Vector embeddings; produces candidates and priors.
    One,
    /// BEV encoders; reranks and estimates pose.
    Two,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "one",
            Stage::Two => "two",
        }
    }

    fn group(self) -> ParamGroup {
        match self {
            Stage::One => ParamGroup::Embedding,
            Stage::Two => ParamGroup::Bev,
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub temperature: f64,
    pub label_smoothing: f64,
    /// Embeddings used for mining are recomputed every this many epochs;
    /// before the first refresh negatives are chosen by distance.
    pub mining_refresh_epochs: usize,
    /// Negatives strictly closer than this to a batch query are never used.
    pub min_negative_distance: f64,
    /// Headings are known: train with joint right-angle rotations instead
    /// of random panorama rolls.
    pub orientation_known: bool,
    /// Also rotate aerials by random quarter turns when the orientation is
    /// unknown, and mirror pairs in both stages.
    pub dihedral_augmentation: bool,
    pub grid: GridSpec,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default(stage: Stage) -> Self {
        let encoder = EncoderConfig::desk_default();
        Self {
            stage,
            batch_size: 8,
            epochs: 20,
            learning_rate: match stage {
                Stage::One => 1e-3,
                Stage::Two => 1e-4,
            },
            weight_decay: 0.01,
            temperature: 0.01,
            label_smoothing: 0.1,
            mining_refresh_epochs: 2,
            min_negative_distance: 0.0,
            orientation_known: false,
            dihedral_augmentation: false,
            grid: GridSpec {
                n_t: 28,
                n_theta: 32,
                search_extent: encoder.search_extent,
                pixel_size: encoder.pixel_size,
                l_a: 48,
                l_b: encoder.bev_side,
            },
            encoder,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 || self.mining_refresh_epochs == 0 {
            return Err(Error::InvalidConfig("epochs and mining_refresh_epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.min_negative_distance >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate, weight_decay and min_negative_distance must be non-negative".into(),
            ));
        }
        self.encoder.validate()?;
        if self.grid.l_b != self.encoder.bev_side || self.grid.pixel_size != self.encoder.pixel_size {
            return Err(Error::InvalidConfig("grid and encoder disagree on l_B or pixel size".into()));
        }
        self.grid.check_fit_constraint()
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    /// Mean loss over the epoch's steps.
    pub loss: f64,
    /// Share of batch panoramas whose highest logit is their own aerial.
    pub accuracy_in_batch: f64,
    /// Street-view → aerial (row-wise) component.
    pub s2a_loss: f64,
    /// Aerial → street-view (column-wise) component.
    pub a2s_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// Smallest value the smoothed loss can take on an `n × n` batch: the
/// entropy of the smoothed target row.
pub fn smoothing_floor(n: usize, smoothing: f64) -> f64 {
    if n < 2 || smoothing <= 0.0 {
        return 0.0;
    }
    let off = smoothing / (n - 1) as f64;
    -(1.0 - smoothing) * math::ln(1.0 - smoothing) - smoothing * math::ln(off)
}

/// Loss value and its two directional components for `[n, n]` logits.
pub fn infonce_components(logits: &Tensor, tau: f64, smoothing: f64) -> Result<(f64, f64, f64)> {
    let n = square_side(logits)?;
    let f = infonce_forward(logits.data(), n, tau, smoothing);
    Ok((f.loss, f.row_loss, f.col_loss))
}

fn square_side(logits: &Tensor) -> Result<usize> {
    match logits.shape() {
        &[n, m] if n == m && n >= 2 => Ok(n),
        s => Err(Error::dim("symmetric_infonce", format!("need a square matrix with n ≥ 2, got {s:?}"))),
    }
}

/// Share of rows whose maximum lies on the diagonal.
pub fn diagonal_accuracy(logits: &Tensor) -> Result<f64> {
    let n = square_side(logits)?;
    let d = logits.data();
    let hits = (0..n)
        .filter(|&i| {
            let row = &d[i * n..(i + 1) * n];
            (0..n).all(|j| j == i || row[j] < row[i])
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Stored embeddings and locations used to choose hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MinerState {
    query_world: BTreeMap<u32, u32>,
    query_locations: BTreeMap<u32, (f64, f64)>,
    reference_locations: BTreeMap<u32, (f64, f64)>,
    query_embeddings: BTreeMap<u32, Vec<f32>>,
    reference_embeddings: BTreeMap<u32, Vec<f32>>,
    last_refresh: Option<usize>,
    refresh_epochs: usize,
    min_negative_distance: f64,
}

impl MinerState {
    /// `queries` are `(sample id, world id, location)`; `references` are
    /// `(world id, location)`.
    pub fn new(
        queries: &[(u32, u32, (f64, f64))],
        references: &[(u32, (f64, f64))],
        refresh_epochs: usize,
        min_negative_distance: f64,
    ) -> Self {
        Self {
            query_world: queries.iter().map(|&(s, w, _)| (s, w)).collect(),
            query_locations: queries.iter().map(|&(s, _, l)| (s, l)).collect(),
            reference_locations: references.iter().copied().collect(),
            query_embeddings: BTreeMap::new(),
            reference_embeddings: BTreeMap::new(),
            last_refresh: None,
            refresh_epochs: refresh_epochs.max(1),
            min_negative_distance,
        }
    }

    /// Training queries and references of `dataset`.
    pub fn from_dataset(dataset: &Dataset, refresh_epochs: usize, min_negative_distance: f64) -> Self {
        let queries: Vec<_> = dataset
            .samples_in(Split::Train)
            .map(|s| (s.id, s.world_id, dataset.sample_location(s)))
            .collect();
        let references: Vec<_> = dataset.worlds.iter().map(|w| (w.id, w.origin)).collect();
        Self::new(&queries, &references, refresh_epochs, min_negative_distance)
    }

    pub fn min_negative_distance(&self) -> f64 {
        self.min_negative_distance
    }

    pub fn last_refresh(&self) -> Option<usize> {
        self.last_refresh
    }

    /// Whether embeddings should be recomputed at the start of `epoch`.
    pub fn needs_refresh(&self, epoch: usize) -> bool {
        if epoch < self.refresh_epochs {
            return false;
        }
        match self.last_refresh {
            None => true,
            Some(last) => epoch - last >= self.refresh_epochs,
        }
    }

    /// Replaces the stored embeddings.
    pub fn set_embeddings(
        &mut self,
        queries: BTreeMap<u32, Vec<f32>>,
        references: BTreeMap<u32, Vec<f32>>,
        epoch: usize,
    ) {
        self.query_embeddings = queries;
        self.reference_embeddings = references;
        self.last_refresh = Some(epoch);
    }

    pub fn has_embeddings(&self) -> bool {
        !self.query_embeddings.is_empty()
    }

    pub fn world_of(&self, query: u32) -> Option<u32> {
        self.query_world.get(&query).copied()
    }

    /// Planar distance between a query and a reference centre.
    pub fn distance(&self, query: u32, reference: u32) -> Result<f64> {
        let q = self
            .query_locations
            .get(&query)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown query {query}")))?;
        let r = self
            .reference_locations
            .get(&reference)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown reference {reference}")))?;
        Ok(math::sqrt((q.0 - r.0) * (q.0 - r.0) + (q.1 - r.1) * (q.1 - r.1)))
    }

    fn similarity(&self, query: u32, reference: u32) -> Result<f64> {
        let (q, r) = match (self.query_embeddings.get(&query), self.reference_embeddings.get(&reference)) {
            (Some(q), Some(r)) => (q, r),
            _ => return Err(Error::InvalidConfig(format!("no stored embedding for query {query} or reference {reference}"))),
        };
        Ok(q.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum())
    }

    /// Every admissible negative for `anchor` from `pool`, hardest first.
    fn ranked_negatives(&self, anchor: u32, pool: &[u32], stage: Stage, epoch: usize) -> Result<Vec<u32>> {
        let truth = self
            .world_of(anchor)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown query {anchor}")))?;
        let by_distance = stage == Stage::One && (epoch < self.refresh_epochs || !self.has_embeddings());
        let mut scored = Vec::with_capacity(pool.len());
        for &r in pool {
            if r == truth {
                continue;
            }
            let d = self.distance(anchor, r)?;
            if d < self.min_negative_distance {
                continue;
            }
            let key = if by_distance { d } else { -self.similarity(anchor, r)? };
            scored.push((key, r));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().map(|(_, r)| r).collect())
    }
}

/// The `count` hardest negatives for query `anchor` among `pool`.
///
/// The true reference and references strictly closer than the minimum
/// negative distance are excluded. In stage one, negatives are the nearest
/// references by distance until the first embedding refresh and the most
/// similar by stored embedding afterwards; stage two always uses the stored
/// (frozen stage-one) embeddings.
pub fn mine_hard_negatives(
    state: &MinerState,
    anchor: u32,
    pool: &[u32],
    count: usize,
    stage: Stage,
    epoch: usize,
) -> Result<Vec<u32>> {
    let mut ranked = state.ranked_negatives(anchor, pool, stage, epoch)?;
    if ranked.len() < count {
        return Err(Error::PoolTooSmall {
            needed: count,
            available: ranked.len(),
        });
    }
    ranked.truncate(count);
    Ok(ranked)
}

/// Independent check of the minimum-distance rule over assembled batches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MiningAudit {
    pub batches: usize,
    /// Off-diagonal (query, reference) pairs inspected.
    pub pairs_checked: usize,
    /// Pairs strictly closer than the minimum negative distance.
    pub violations: usize,
    /// Closest off-diagonal pair seen, in metres.
    pub min_pair_distance: Option<f64>,
}

impl MiningAudit {
    /// Records every off-diagonal pair of `batch`, given as
    /// `(query, reference)` positives.
    pub fn record(&mut self, state: &MinerState, batch: &[(u32, u32)]) -> Result<()> {
        self.batches += 1;
        for (i, &(q, _)) in batch.iter().enumerate() {
            for (j, &(_, r)) in batch.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = state.distance(q, r)?;
                self.pairs_checked += 1;
                if d < state.min_negative_distance() {
                    self.violations += 1;
                }
                self.min_pair_distance = Some(self.min_pair_distance.map_or(d, |m| m.min(d)));
            }
        }
        Ok(())
    }
}

/// Builds a one-to-one batch around `anchor`: the anchor's pair followed by
/// the hardest admissible negatives, each with one of its own training
/// queries. A candidate joins only if it keeps every off-diagonal pair of
/// the batch at or beyond the minimum negative distance.
pub fn assemble_batch(
    state: &MinerState,
    anchor: u32,
    queries_of: &BTreeMap<u32, Vec<u32>>,
    batch_size: usize,
    stage: Stage,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(u32, u32)>> {
    let truth = state
        .world_of(anchor)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown query {anchor}")))?;
    let pool: Vec<u32> = queries_of.keys().copied().collect();
    let ranked = state.ranked_negatives(anchor, &pool, stage, epoch)?;
    let min_d = state.min_negative_distance();
    let mut batch = alloc::vec![(anchor, truth)];
    for r in ranked {
        if batch.len() == batch_size {
            break;
        }
        let options = &queries_of[&r];
        let q = options[rng.random_range(0..options.len())];
        let mut ok = true;
        for &(bq, br) in &batch {
            if state.distance(bq, r)? < min_d || state.distance(q, br)? < min_d {
                ok = false;
                break;
            }
        }
        if ok {
            batch.push((q, r));
        }
    }
    if batch.len() < batch_size {
        return Err(Error::PoolTooSmall {
            needed: batch_size - 1,
            available: batch.len() - 1,
        });
    }
    Ok(batch)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter named in `grads`. Biases are not
    /// decayed.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - math::pow(self.beta1, t as f64);
        let c2 = 1.0 - math::pow(self.beta2, t as f64);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if g.len() != p.numel() {
                return Err(Error::LengthMismatch {
                    expected: p.numel(),
                    got: g.len(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (alloc::vec![0.0; g.len()], alloc::vec![0.0; g.len()]));
            let decay = if name.ends_with(".b") || name.ends_with("row_bias") {
                0.0
            } else {
                self.weight_decay
            };
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / (math::sqrt(*vi / c2) + self.eps) + decay * *x as f64;
                *x = (*x as f64 - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based): linear warmup over
/// the first `warmup` steps, then cosine decay to zero at `total`.
pub fn learning_rate_at(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + math::cos(math::PI * progress.min(1.0)))
}

/// Augments one (panorama, aerial) pair.
///
/// Unknown orientation rolls the panorama by a random number of columns.
/// Known orientation rotates the aerial clockwise by a random number of
/// quarter turns and rolls the panorama to match. Stage one additionally
/// mirrors both with probability one half. With `dihedral`, the quarter
/// turns are applied in either case and mirroring in both stages.
pub fn augment_pair(
    pano: &Tensor,
    aerial: &Tensor,
    stage: Stage,
    orientation_known: bool,
    dihedral: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let (_, w, _) = pano.hwc("augment_pair")?;
    let (mut p, mut a) = if orientation_known || dihedral {
        let q = rng.random_range(0..4usize);
        let shift = (w - (q * w / 4) % w) % w;
        (roll_columns(pano, shift)?, rotate_quarter_turns(aerial, q)?)
    } else {
        (pano.clone(), aerial.clone())
    };
    if !orientation_known {
        p = roll_columns(&p, rng.random_range(0..w))?;
    }
    if (stage == Stage::One || dihedral) && rng.random::<bool>() {
        p = mirror_columns(&p)?;
        a = flip_horizontal(&a)?;
    }
    Ok((p, a))
}

/// `[n, n]` cosine matrix between query and reference embeddings.
pub fn stage1_logits(queries: &[Vec<f32>], references: &[Vec<f32>]) -> Result<Tensor> {
    let n = queries.len();
    if n == 0 || references.len() != n {
        return Err(Error::LengthMismatch {
            expected: n.max(1),
            got: references.len(),
        });
    }
    let mut out = Vec::with_capacity(n * n);
    for q in queries {
        for r in references {
            out.push(q.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32);
        }
    }
    Tensor::new([n, n], out)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<LossReport>,
    pub audit: MiningAudit,
}

/// Builds the loss for one batch on `tape`. Returns the loss and logits.
fn batch_loss(
    tape: &mut Tape,
    config: &TrainConfig,
    params: &EncoderParams,
    geom: &BevGeometry,
    ctx: &Arc<MatchContext>,
    pairs: &[(Tensor, Tensor)],
) -> Result<(Var, Var, BTreeMap<String, Var>)> {
    let group = config.stage.group();
    let p = params.bind(tape, |name| group.contains(name));
    let trainable: BTreeMap<String, Var> = p
        .iter()
        .filter(|(name, _)| group.contains(name))
        .map(|(n, v)| (n.clone(), *v))
        .collect();
    let logits = match config.stage {
        Stage::One => {
            let mut qs = Vec::with_capacity(pairs.len());
            let mut rs = Vec::with_capacity(pairs.len());
            for (pano, aerial) in pairs {
                let x = tape.constant(pano.clone());
                qs.push(embed_forward(tape, &p, "embed.query", x, Padding::WrapColumns)?);
                let y = tape.constant(aerial.clone());
                rs.push(embed_forward(tape, &p, "embed.ref", y, Padding::Zero)?);
            }
            let q = tape.concat_rows(&qs)?;
            let r = tape.concat_rows(&rs)?;
            tape.matmul_t(q, r)?
        }
        Stage::Two => {
            let mut bevs = Vec::with_capacity(pairs.len());
            let mut aers = Vec::with_capacity(pairs.len());
            for (pano, aerial) in pairs {
                let x = tape.constant(pano.clone());
                bevs.push(panorama_forward(tape, &p, geom, x)?);
                let y = tape.constant(aerial.clone());
                aers.push(aerial_forward(tape, &p, y)?);
            }
            tape.pairwise_scores(&bevs, &aers, ctx.clone(), config.temperature)?
        }
    };
    let loss = tape.symmetric_infonce(logits, config.temperature, config.label_smoothing)?;
    Ok((loss, logits, trainable))
}

/// Embeddings of every training query and every reference world.
fn stored_embeddings(
    dataset: &Dataset,
    params: &EncoderParams,
) -> Result<(BTreeMap<u32, Vec<f32>>, BTreeMap<u32, Vec<f32>>)> {
    let train: Vec<_> = dataset.samples_in(Split::Train).collect();
    let q = par_map(train.len(), |i| embed_query(&train[i].pano, params).map(|e| (train[i].id, e)));
    let r = par_map(dataset.worlds.len(), |i| {
        embed_reference(&dataset.worlds[i].field, params).map(|e| (dataset.worlds[i].id, e))
    });
    Ok((q.into_iter().collect::<Result<_>>()?, r.into_iter().collect::<Result<_>>()?))
}

/// Trains one stage.
///
/// Stage one starts from `start` if given, else from a fresh
/// initialization. Stage two requires `start` to hold trained stage-one
/// embeddings, which stay frozen and drive its mining. Deterministic in
/// `config.seed`.
pub fn train(config: &TrainConfig, dataset: &Dataset, start: Option<&EncoderParams>) -> Result<TrainOutcome> {
    train_with(config, dataset, start, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    start: Option<&EncoderParams>,
    on_epoch: &mut dyn FnMut(&LossReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = match (config.stage, start) {
        (_, Some(p)) => {
            if *p.config() != config.encoder {
                return Err(Error::InvalidConfig("starting parameters use a different encoder configuration".into()));
            }
            p.clone()
        }
        (Stage::One, None) => EncoderParams::init(config.encoder, config.seed)?,
        (Stage::Two, None) => {
            return Err(Error::InvalidConfig(
                "stage two needs the stage-one parameters: its negatives are mined from stage-one embeddings".into(),
            ))
        }
    };
    let train_queries: Vec<_> = dataset.samples_in(Split::Train).collect();
    let mut queries_of: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for s in &train_queries {
        queries_of.entry(s.world_id).or_default().push(s.id);
    }
    if queries_of.len() < config.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{} training references cannot fill a batch of {}",
            queries_of.len(),
            config.batch_size
        )));
    }
    let samples: BTreeMap<u32, &Tensor> = train_queries.iter().map(|s| (s.id, &s.pano)).collect();
    let mut miner = MinerState::from_dataset(dataset, config.mining_refresh_epochs, config.min_negative_distance);
    if config.stage == Stage::Two {
        let (q, r) = stored_embeddings(dataset, &params)?;
        miner.set_embeddings(q, r, 0);
    }

    let geom = BevGeometry::from_config(&config.encoder)?;
    let ctx = Arc::new(MatchContext::new(build_pose_grid(config.grid)?)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<u32> = train_queries.iter().map(|s| s.id).collect();
    order.shuffle(&mut rng);
    let steps_per_epoch = (order.len() / config.batch_size).max(1);
    let total_steps = steps_per_epoch * config.epochs;
    let mut opt = AdamW::new(config.weight_decay);
    let mut audit = MiningAudit::default();
    let mut log = Vec::with_capacity(config.epochs);
    let mut cursor = 0;
    let mut global_step = 0;

    for epoch in 0..config.epochs {
        if config.stage == Stage::One && miner.needs_refresh(epoch) {
            let (q, r) = stored_embeddings(dataset, &params)?;
            miner.set_embeddings(q, r, epoch);
        }
        let (mut loss_sum, mut acc_sum, mut row_sum, mut col_sum, mut lr) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for step in 0..steps_per_epoch {
            let anchor = order[cursor % order.len()];
            cursor += 1;
            let batch = assemble_batch(&miner, anchor, &queries_of, config.batch_size, config.stage, epoch, &mut rng)?;
            audit.record(&miner, &batch)?;
            let mut pairs = Vec::with_capacity(batch.len());
            for &(q, r) in &batch {
                let world = dataset
                    .world(r)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown world {r}")))?;
                pairs.push(augment_pair(
                    samples[&q],
                    &world.field,
                    config.stage,
                    config.orientation_known,
                    config.dihedral_augmentation,
                    &mut rng,
                )?);
            }
            let mut tape = Tape::new();
            let (loss, logits, trainable) = batch_loss(&mut tape, config, &params, &geom, &ctx, &pairs)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            let grads = tape.backward(loss)?;
            let mut by_name = BTreeMap::new();
            for (name, var) in &trainable {
                if let Some(g) = grads.get(*var) {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Diverged { epoch, step });
                    }
                    by_name.insert(name.clone(), g.to_vec());
                }
            }
            lr = learning_rate_at(config.learning_rate, global_step, steps_per_epoch, total_steps);
            opt.step(&mut params, &by_name, lr)?;
            global_step += 1;

            let (_, row, col) = infonce_components(tape.value(logits), config.temperature, config.label_smoothing)?;
            loss_sum += loss_value;
            row_sum += row;
            col_sum += col;
            acc_sum += diagonal_accuracy(tape.value(logits))?;
        }
        let k = steps_per_epoch as f64;
        let report = LossReport {
            epoch,
            loss: loss_sum / k,
            accuracy_in_batch: acc_sum / k,
            s2a_loss: row_sum / k,
            a2s_loss: col_sum / k,
            lr,
        };
        on_epoch(&report);
        log.push(report);
    }
    Ok(TrainOutcome { params, log, audit })
}
