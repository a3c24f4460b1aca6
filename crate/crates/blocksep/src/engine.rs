//! Block-online control loop: per-block iterative source extraction,
//! residual-mask recursion, stopping criterion, speaker-slot tracking and
//! new-speaker discovery.
//!
//! Each block first runs one guided extraction per known speaker slot (in
//! slot order, with that slot's embedding as adaptation input), then keeps
//! running blind extractions on the leftover signal until the residual mask
//! is virtually empty. Slots persist for the whole session, so a speaker
//! stays at the same output position even through long silences.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masknet::{
    forward, zero_embedding, Embedding, ModelParams, NetInput, NetOutput,
};
use crate::signal::{Mask, Spectrogram};

/// Thresholds and bounds for the per-block loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Stop extracting when the mean residual falls below this.
    pub t_res_mask: f64,
    /// A mask with mean below this marks its slot silent for the block.
    pub t_active: f64,
    /// Upper bound on extraction iterations per block.
    pub max_iterations_per_block: usize,
    /// Frames per 2.5 s block (used by callers to segment sessions).
    pub frames_per_block: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            t_res_mask: 0.1,
            t_active: 0.05,
            max_iterations_per_block: 4,
            frames_per_block: 150,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_res_mask && self.t_res_mask < 1.0) {
            return Err(Error::InvalidConfig(
                "t_res_mask must lie in (0, 1)".into(),
            ));
        }
        if self.max_iterations_per_block == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations_per_block must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A persistent output channel bound to one speaker.
#[derive(Debug, Clone)]
pub struct SpeakerSlot {
    /// Stable ordinal; never changes after creation.
    pub slot_index: usize,
    pub embedding: Embedding,
    /// Block index in which the slot was discovered.
    pub created_block: usize,
    pub last_active_block: Option<usize>,
    /// Activity flag per processed block (false before creation).
    pub active_blocks: Vec<bool>,
}

/// Eq. result of one block: per-slot masks, activities and embeddings.
#[derive(Debug, Clone)]
pub struct BlockResult {
    pub block_index: usize,
    pub n_frames: usize,
    /// Mask per slot index; `None` for slots created in later blocks.
    pub masks: Vec<Option<Mask>>,
    pub active: Vec<bool>,
    pub embeddings: Vec<Option<Embedding>>,
    pub gate_values: Vec<Option<f64>>,
    pub n_iterations_run: usize,
    /// Mean residual after each iteration.
    pub residual_trace: Vec<f64>,
    /// Set when max_iterations was reached before the stop criterion.
    pub overflow: bool,
}

impl BlockResult {
    /// Number of slots marked active in this block.
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Aggregated output of a whole session.
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub blocks: Vec<BlockResult>,
    pub slots: Vec<SpeakerSlot>,
    /// Estimated number of active speakers per block.
    pub counts: Vec<usize>,
}

impl SessionResult {
    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    /// Per-slot per-frame activity over the concatenated session, derived
    /// from the per-frame mask means at the given threshold.
    pub fn frame_activity(&self, t_active: f64) -> Array2<bool> {
        let total: usize = self.blocks.iter().map(|b| b.n_frames).sum();
        let mut act = Array2::from_elem((self.slots.len(), total), false);
        let mut offset = 0;
        for block in &self.blocks {
            for (slot, mask) in block.masks.iter().enumerate() {
                if let Some(mask) = mask {
                    for (t, m) in mask.frame_means().iter().enumerate() {
                        act[[slot, offset + t]] = *m > t_active;
                    }
                }
            }
            offset += block.n_frames;
        }
        act
    }

    /// Concatenates each slot's per-block masks into session-length masks.
    /// Frames before a slot's creation get zero masks.
    pub fn slot_masks(&self) -> Vec<Mask> {
        let total: usize = self.blocks.iter().map(|b| b.n_frames).sum();
        let n_bins = self
            .blocks
            .first()
            .and_then(|b| b.masks.iter().flatten().next())
            .map(|m| m.n_bins())
            .unwrap_or(0);
        let mut out = vec![Mask::zeros(total, n_bins); self.slots.len()];
        let mut offset = 0;
        for block in &self.blocks {
            for (slot, mask) in block.masks.iter().enumerate() {
                if let Some(mask) = mask {
                    out[slot]
                        .values
                        .slice_mut(ndarray::s![offset..offset + block.n_frames, ..])
                        .assign(&mask.values);
                }
            }
            offset += block.n_frames;
        }
        out
    }
}

/// Residual-mask update: subtract the extraction mask and clip to [0, 1].
pub fn residual_update(r_prev: &Mask, m: &Mask) -> Result<Mask> {
    if r_prev.values.dim() != m.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "residual {:?} vs mask {:?}",
            r_prev.values.dim(),
            m.values.dim()
        )));
    }
    let mut out = r_prev.values.clone();
    out.zip_mut_with(&m.values, |r, &m| *r = (*r - m).max(0.0));
    Ok(Mask::from_unchecked(out))
}

/// True when the mean over all T·F residual entries falls below the threshold.
pub fn should_stop(r: &Mask, t_res_mask: f64) -> bool {
    r.mean() < t_res_mask
}

/// Context handed to a [`MaskEstimator`] for one extraction iteration.
pub struct EstimateContext {
    pub block_index: usize,
    /// `Some(slot_index)` for guided extraction, `None` for blind discovery.
    pub slot: Option<usize>,
    /// Adaptation input: the slot embedding, or zero for blind extraction.
    pub adaptation: Embedding,
    pub prev_embedding: Embedding,
}

/// Output of one extraction iteration.
pub struct EstimateOutput {
    pub mask: Mask,
    /// Fresh per-block embedding estimate (pre-gate).
    pub fresh_embedding: Embedding,
    /// Embedding to store in the slot (post-gate).
    pub embedding: Embedding,
    pub gate_value: f64,
}

/// One extraction step. Implemented by the trained network and by test
/// oracles, so the control loop can be validated independently of the model.
pub trait MaskEstimator {
    fn embedding_dim(&self) -> usize;

    fn estimate(
        &self,
        ctx: &EstimateContext,
        mag: &Array2<f64>,
        residual: &Mask,
    ) -> Result<EstimateOutput>;
}

/// The trained mask network as an estimator.
pub struct NetEstimator<'a> {
    pub params: &'a ModelParams,
}

impl MaskEstimator for NetEstimator<'_> {
    fn embedding_dim(&self) -> usize {
        self.params.cfg.emb_dim
    }

    fn estimate(
        &self,
        ctx: &EstimateContext,
        mag: &Array2<f64>,
        residual: &Mask,
    ) -> Result<EstimateOutput> {
        // The gate only applies to guided extractions: a new slot has no
        // previous embedding to protect.
        let use_gate = self.params.cfg.use_gate && ctx.slot.is_some();
        let out: NetOutput = forward(
            self.params,
            &NetInput {
                mag,
                residual,
                adaptation: &ctx.adaptation,
            },
            &ctx.prev_embedding,
            use_gate,
            None,
        )?;
        Ok(EstimateOutput {
            mask: out.mask,
            fresh_embedding: out.fresh_embedding,
            embedding: out.embedding,
            gate_value: out.gate_value,
        })
    }
}

/// Wrapper that forces the gate to a fixed value. `0.0` keeps the previous
/// embedding bit-exactly, `1.0` takes the fresh estimate.
pub struct ForcedGateEstimator<E: MaskEstimator> {
    pub inner: E,
    pub gate: f64,
}

impl<E: MaskEstimator> MaskEstimator for ForcedGateEstimator<E> {
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    fn estimate(
        &self,
        ctx: &EstimateContext,
        mag: &Array2<f64>,
        residual: &Mask,
    ) -> Result<EstimateOutput> {
        let out = self.inner.estimate(ctx, mag, residual)?;
        if ctx.slot.is_none() {
            return Ok(out);
        }
        let g = self.gate;
        let embedding = if g == 0.0 {
            ctx.prev_embedding.clone()
        } else if g == 1.0 {
            out.fresh_embedding.clone()
        } else {
            out.fresh_embedding.mapv(|x| x * g) + ctx.prev_embedding.mapv(|x| x * (1.0 - g))
        };
        Ok(EstimateOutput {
            mask: out.mask,
            fresh_embedding: out.fresh_embedding,
            embedding,
            gate_value: g,
        })
    }
}

/// Mutable slot table threaded through a session.
#[derive(Debug, Clone, Default)]
pub struct SlotTable {
    pub slots: Vec<SpeakerSlot>,
}

/// Processes one block: guided extraction for every known slot, then blind
/// discovery until the residual is empty. Returns the block result and
/// updates the slot table in place.
pub fn process_block(
    state: &mut SlotTable,
    block: &Spectrogram,
    estimator: &dyn MaskEstimator,
    cfg: &EngineConfig,
    block_index: usize,
) -> Result<BlockResult> {
    cfg.validate()?;
    let t_len = block.n_frames();
    let f = block.n_bins();
    let mag = block.magnitude();
    let dim = estimator.embedding_dim();

    let mut residual = Mask::ones(t_len, f);
    let mut trace = Vec::new();
    let mut iterations = 0usize;

    let n_existing = state.slots.len();
    let mut masks: Vec<Option<Mask>> = vec![None; n_existing];
    let mut active: Vec<bool> = vec![false; n_existing];
    let mut embeddings: Vec<Option<Embedding>> = vec![None; n_existing];
    let mut gate_values: Vec<Option<f64>> = vec![None; n_existing];

    // Guided extraction, in stable slot order.
    for slot_idx in 0..n_existing {
        let ctx = EstimateContext {
            block_index,
            slot: Some(slot_idx),
            adaptation: state.slots[slot_idx].embedding.clone(),
            prev_embedding: state.slots[slot_idx].embedding.clone(),
        };
        let out = estimator.estimate(&ctx, &mag, &residual)?;
        iterations += 1;
        let is_active = out.mask.mean() >= cfg.t_active;
        if is_active {
            residual = residual_update(&residual, &out.mask)?;
            masks[slot_idx] = Some(out.mask);
        } else {
            // Silent speaker: zero mask, residual left unmodified.
            masks[slot_idx] = Some(Mask::zeros(t_len, f));
        }
        active[slot_idx] = is_active;
        embeddings[slot_idx] = Some(out.embedding.clone());
        gate_values[slot_idx] = Some(out.gate_value);
        trace.push(residual.mean());

        let slot = &mut state.slots[slot_idx];
        slot.embedding = out.embedding;
        slot.active_blocks.push(is_active);
        if is_active {
            slot.last_active_block = Some(block_index);
        }
    }

    // Blind discovery on the leftover signal.
    let mut overflow = false;
    loop {
        if should_stop(&residual, cfg.t_res_mask) {
            break;
        }
        if iterations >= cfg.max_iterations_per_block {
            overflow = true;
            break;
        }
        let ctx = EstimateContext {
            block_index,
            slot: None,
            adaptation: zero_embedding(dim),
            prev_embedding: zero_embedding(dim),
        };
        let out = estimator.estimate(&ctx, &mag, &residual)?;
        iterations += 1;
        if out.mask.mean() < cfg.t_active {
            // Nothing left to extract: an inactive blind mask cannot shrink
            // the residual, so running further iterations would only spin.
            trace.push(residual.mean());
            break;
        }
        residual = residual_update(&residual, &out.mask)?;
        trace.push(residual.mean());

        let slot_index = state.slots.len();
        state.slots.push(SpeakerSlot {
            slot_index,
            embedding: out.embedding.clone(),
            created_block: block_index,
            last_active_block: Some(block_index),
            active_blocks: {
                // Slots created now were inactive in all earlier blocks.
                let mut v = vec![false; block_index];
                v.push(true);
                v
            },
        });
        masks.push(Some(out.mask));
        active.push(true);
        embeddings.push(Some(out.embedding));
        gate_values.push(Some(out.gate_value));
    }

    Ok(BlockResult {
        block_index,
        n_frames: t_len,
        masks,
        active,
        embeddings,
        gate_values,
        n_iterations_run: iterations,
        residual_trace: trace,
        overflow,
    })
}

/// Runs the block-online loop over a sequence of blocks, threading the slot
/// table (and with it the speaker embeddings) from block to block.
pub fn run_session(
    blocks: &[Spectrogram],
    estimator: &dyn MaskEstimator,
    cfg: &EngineConfig,
) -> Result<SessionResult> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("empty block list".into()));
    }
    let mut state = SlotTable::default();
    let mut results = Vec::with_capacity(blocks.len());
    for (b, block) in blocks.iter().enumerate() {
        let mut res = process_block(&mut state, block, estimator, cfg, b)?;
        // Backfill result vectors so every block result covers the final
        // slot count (later-created slots simply have no mask here).
        let n = state.slots.len();
        res.masks.resize(n, None);
        res.active.resize(n, false);
        res.embeddings.resize(n, None);
        res.gate_values.resize(n, None);
        results.push(res);
    }
    let n = state.slots.len();
    for res in &mut results {
        res.masks.resize(n, None);
        res.active.resize(n, false);
        res.embeddings.resize(n, None);
        res.gate_values.resize(n, None);
    }
    for slot in &mut state.slots {
        slot.active_blocks.resize(blocks.len(), false);
    }
    let counts = results.iter().map(|r| r.active_count()).collect();
    Ok(SessionResult {
        blocks: results,
        slots: state.slots,
        counts,
    })
}

/// Batch mode: the whole recording as a single block.
pub fn run_batch(
    session: &Spectrogram,
    estimator: &dyn MaskEstimator,
    cfg: &EngineConfig,
) -> Result<SessionResult> {
    if session.n_frames() == 0 {
        return Ok(SessionResult {
            blocks: Vec::new(),
            slots: Vec::new(),
            counts: Vec::new(),
        });
    }
    run_session(std::slice::from_ref(session), estimator, cfg)
}
