//! The three bidirectional transformers.
//!
//! One stack handles both scene/object token prediction and guidance
//! extraction (shared parameters, distinguished by a task-mode embedding;
//! guidance adds `T` frame-index query slots whose output states become the
//! per-frame guidance embeddings). A second, shallower stack models motion
//! tokens conditioned on the guidance embeddings.
//!
//! Position information comes only from per-slot learned embeddings (segment
//! + cell/frame index), never from sequence order, so outputs are
//! permutation-equivariant with respect to slot order.

use crate::error::{Error, Result};
use crate::nn::layers::{Embedding, LayerNorm, Linear, TransformerBlock};
use crate::nn::{Binding, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenModelConfig {
    /// Codebook size; the mask symbol is index `vocab`.
    pub vocab: usize,
    pub t: usize,
    pub scene_grid: (usize, usize),
    pub object_grid: (usize, usize),
    pub motion_grid: (usize, usize),
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    /// Depth of the shared scene/object + guidance stack.
    pub so_blocks: usize,
    /// Depth of the motion stack.
    pub m_blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Trained with conditioning replaced by mask symbols (required for
    /// unconditional generation).
    pub unconditional: bool,
}

impl TokenModelConfig {
    pub fn desk(vocab: usize, t: usize, scene: (usize, usize), object: (usize, usize), motion: (usize, usize)) -> Self {
        Self {
            vocab,
            t,
            scene_grid: scene,
            object_grid: object,
            motion_grid: motion,
            embed_dim: 64,
            hidden_dim: 128,
            intermediate_dim: 256,
            so_blocks: 4,
            m_blocks: 2,
            heads: 8,
            dropout: 0.0,
            unconditional: false,
        }
    }

    pub fn mask_id(&self) -> usize {
        self.vocab
    }

    pub fn scene_len(&self) -> usize {
        self.scene_grid.0 * self.scene_grid.1
    }

    pub fn object_len(&self) -> usize {
        self.object_grid.0 * self.object_grid.1
    }

    /// Motion positions per frame.
    pub fn motion_frame_len(&self) -> usize {
        self.motion_grid.0 * self.motion_grid.1
    }

    pub fn motion_len(&self) -> usize {
        self.t * self.motion_frame_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.t == 0 {
            return Err(Error::InvalidConfig("empty vocab or zero-length clips".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads {} must divide hidden dim {}",
                self.heads, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Task mode for the shared stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SogMode {
    Predict = 0,
    Guide = 1,
}

struct SogModel {
    token_emb: Embedding,
    scene_pos: Embedding,
    object_pos: Embedding,
    segment: Embedding, // scene / object / query
    mode: Embedding,
    frame_query: Embedding,
    in_proj: Linear,
    blocks: Vec<TransformerBlock>,
    out_norm: LayerNorm,
    head: Linear,
}

struct MotionModel {
    token_emb: Embedding,
    site_pos: Embedding,
    frame_emb: Embedding,
    guide_proj: Linear,
    in_proj: Linear,
    blocks: Vec<TransformerBlock>,
    out_norm: LayerNorm,
    head: Linear,
}

/// Stage-two model bundle: shared scene/object+guidance stack and the motion
/// stack, with all parameters in one store.
pub struct TokenPredictor {
    pub cfg: TokenModelConfig,
    pub params: ParamStore,
    sog: SogModel,
    motion: MotionModel,
}

impl TokenPredictor {
    pub fn new(cfg: TokenModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let e = cfg.embed_dim;
        let h = cfg.hidden_dim;
        let sog = SogModel {
            token_emb: Embedding::new(&mut ps, "sog.token", cfg.vocab + 1, e, &mut rng),
            scene_pos: Embedding::new(&mut ps, "sog.scene_pos", cfg.scene_len(), e, &mut rng),
            object_pos: Embedding::new(&mut ps, "sog.object_pos", cfg.object_len(), e, &mut rng),
            segment: Embedding::new(&mut ps, "sog.segment", 3, e, &mut rng),
            mode: Embedding::new(&mut ps, "sog.mode", 2, e, &mut rng),
            frame_query: Embedding::new(&mut ps, "sog.frame_query", cfg.t, e, &mut rng),
            in_proj: Linear::new(&mut ps, "sog.in_proj", e, h, true, &mut rng),
            blocks: (0..cfg.so_blocks)
                .map(|i| {
                    TransformerBlock::new(
                        &mut ps,
                        &format!("sog.block{i}"),
                        h,
                        cfg.heads,
                        cfg.intermediate_dim,
                        &mut rng,
                    )
                })
                .collect(),
            out_norm: LayerNorm::new(&mut ps, "sog.out_norm", h),
            head: Linear::zeroed(&mut ps, "sog.head", h, cfg.vocab, true),
        };
        let motion = MotionModel {
            token_emb: Embedding::new(&mut ps, "motion.token", cfg.vocab + 1, e, &mut rng),
            site_pos: Embedding::new(&mut ps, "motion.site_pos", cfg.motion_frame_len(), e, &mut rng),
            frame_emb: Embedding::new(&mut ps, "motion.frame", cfg.t, e, &mut rng),
            guide_proj: Linear::new(&mut ps, "motion.guide_proj", h, e, true, &mut rng),
            in_proj: Linear::new(&mut ps, "motion.in_proj", e, h, true, &mut rng),
            blocks: (0..cfg.m_blocks)
                .map(|i| {
                    TransformerBlock::new(
                        &mut ps,
                        &format!("motion.block{i}"),
                        h,
                        cfg.heads,
                        cfg.intermediate_dim,
                        &mut rng,
                    )
                })
                .collect(),
            out_norm: LayerNorm::new(&mut ps, "motion.out_norm", h),
            head: Linear::zeroed(&mut ps, "motion.head", h, cfg.vocab + 1, true),
        };
        Ok(Self { cfg, params: ps, sog, motion })
    }

    fn check_ids(&self, ids: &[usize], len: usize, what: &str) -> Result<()> {
        if ids.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {} ids vs expected {len}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i > self.cfg.vocab) {
            return Err(Error::TokenOutOfRange { index: bad, size: self.cfg.vocab + 1 });
        }
        Ok(())
    }

    /// Input embeddings shared by both SOG modes: scene tokens then object
    /// tokens, plus (in guidance mode) the T frame-index query slots.
    fn sog_states(
        &self,
        t: &Tape,
        bind: &Binding,
        scene_ids: &[usize],
        object_ids: &[usize],
        mode: SogMode,
        query_order: &[usize],
        mut drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Var {
        let cfg = &self.cfg;
        let mut ids = Vec::with_capacity(cfg.scene_len() + cfg.object_len());
        ids.extend_from_slice(scene_ids);
        ids.extend_from_slice(object_ids);
        let tok = self.sog.token_emb.forward(t, bind, &ids);

        let scene_pos_ids: Vec<usize> = (0..cfg.scene_len()).collect();
        let object_pos_ids: Vec<usize> = (0..cfg.object_len()).collect();
        let pos = t.concat(
            &[
                self.sog.scene_pos.forward(t, bind, &scene_pos_ids),
                self.sog.object_pos.forward(t, bind, &object_pos_ids),
            ],
            0,
        );
        let seg_ids: Vec<usize> = std::iter::repeat(0)
            .take(cfg.scene_len())
            .chain(std::iter::repeat(1).take(cfg.object_len()))
            .collect();
        let seg = self.sog.segment.forward(t, bind, &seg_ids);
        let mut x = t.add(t.add(tok, pos), seg);

        if mode == SogMode::Guide {
            let q = self.sog.frame_query.forward(t, bind, query_order);
            let q_seg = self.sog.segment.forward(t, bind, &vec![2; cfg.t]);
            let q = t.add(q, q_seg);
            x = t.concat(&[x, q], 0);
        }
        let rows = t.shape(x)[0];
        let mode_row = self.sog.mode.row(t, bind, mode as usize);
        let mode_b = t.broadcast_to(mode_row, &[rows, cfg.embed_dim]);
        x = t.add(x, mode_b);

        let mut h = self.sog.in_proj.forward(t, bind, x);
        for block in &self.sog.blocks {
            h = block.forward(t, bind, h, drop.as_mut().map(|(p, r)| (*p, &mut **r)));
        }
        self.sog.out_norm.forward(t, bind, h)
    }

    /// Logits over target scene+object tokens given the conditioning bundle
    /// (pseudo-video tokens, or all-mask for unconditional training).
    /// Rows align with `[scene cells, object cells]`.
    pub fn so_logits(
        &self,
        t: &Tape,
        bind: &Binding,
        cond_scene: &[usize],
        cond_object: &[usize],
        drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        self.check_ids(cond_scene, self.cfg.scene_len(), "scene condition")?;
        self.check_ids(cond_object, self.cfg.object_len(), "object condition")?;
        let states = self.sog_states(t, bind, cond_scene, cond_object, SogMode::Predict, &[], drop);
        Ok(self.sog.head.forward(t, bind, states))
    }

    /// Guidance embeddings `h_1..h_T` from (target or sampled) scene/object
    /// tokens: the output states at the T frame-index query slots.
    pub fn guidance(
        &self,
        t: &Tape,
        bind: &Binding,
        scene_ids: &[usize],
        object_ids: &[usize],
        drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let order: Vec<usize> = (0..self.cfg.t).collect();
        self.guidance_with_query_order(t, bind, scene_ids, object_ids, &order, drop)
    }

    /// Guidance with an explicit query-slot order. Position information
    /// comes only from the per-slot embeddings, so output row i is always
    /// the embedding for frame `order[i]`; permuting the order permutes the
    /// outputs correspondingly.
    pub fn guidance_with_query_order(
        &self,
        t: &Tape,
        bind: &Binding,
        scene_ids: &[usize],
        object_ids: &[usize],
        order: &[usize],
        drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        self.check_ids(scene_ids, self.cfg.scene_len(), "scene tokens")?;
        self.check_ids(object_ids, self.cfg.object_len(), "object tokens")?;
        if order.len() != self.cfg.t || order.iter().any(|&f| f >= self.cfg.t) {
            return Err(Error::InvalidParam("query order must list each frame index".into()));
        }
        let states =
            self.sog_states(t, bind, scene_ids, object_ids, SogMode::Guide, order, drop);
        let start = self.cfg.scene_len() + self.cfg.object_len();
        Ok(t.slice_axis(states, 0, start, self.cfg.t))
    }

    /// Logits over motion tokens (vocab + mask symbol) at every motion
    /// position, conditioned on the per-frame guidance embeddings.
    /// `motion_ids` is the full `(T * h_m * w_m)`-length sequence in frame-
    /// major order with `mask_id()` at masked positions.
    pub fn motion_logits(
        &self,
        t: &Tape,
        bind: &Binding,
        motion_ids: &[usize],
        guidance: Var,
        mut drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        self.check_ids(motion_ids, cfg.motion_len(), "motion tokens")?;
        let gshape = t.shape(guidance);
        if gshape != vec![cfg.t, cfg.hidden_dim] {
            return Err(Error::ShapeMismatch(format!(
                "guidance {gshape:?} vs ({}, {})",
                cfg.t, cfg.hidden_dim
            )));
        }
        let tok = self.motion.token_emb.forward(t, bind, motion_ids);
        let frame_len = cfg.motion_frame_len();
        let site_ids: Vec<usize> = (0..cfg.motion_len()).map(|i| i % frame_len).collect();
        let frame_ids: Vec<usize> = (0..cfg.motion_len()).map(|i| i / frame_len).collect();
        let pos = self.motion.site_pos.forward(t, bind, &site_ids);
        let frm = self.motion.frame_emb.forward(t, bind, &frame_ids);
        let guide = self.motion.guide_proj.forward(t, bind, guidance); // (T, e)
        let guide_rows = t.select_rows(guide, &frame_ids);
        let x = t.add(t.add(t.add(tok, pos), frm), guide_rows);
        let mut h = self.motion.in_proj.forward(t, bind, x);
        for block in &self.motion.blocks {
            h = block.forward(t, bind, h, drop.as_mut().map(|(p, r)| (*p, &mut **r)));
        }
        let h = self.motion.out_norm.forward(t, bind, h);
        Ok(self.motion.head.forward(t, bind, h))
    }
}
