//! Masked-token training for the stage-two transformers.
//!
//! Scene/object prediction is per-position cross-entropy against the target
//! tokens given the pseudo-video tokens. Motion training masks a
//! schedule-chosen fraction of the predictable motion positions and scores
//! only those, conditioned on unmasked motion tokens, the conditioning
//! frames' tokens and the guidance embeddings.

use super::model::TokenPredictor;
use super::{make_pseudo, MaskSchedule, PoolPartition};
use crate::clip::VideoClip;
use crate::codebook::TokenBundle;
use crate::error::{Error, Result};
use crate::nn::{Adam, Binding, LrSchedule, Tape, Var};
use crate::vqvae::{ContentInput, VqVae};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One training example: the tokenized pseudo video (conditioning) and the
/// tokenized target video.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub pseudo: TokenBundle,
    pub target: TokenBundle,
}

/// Tokenizes a clip and its pseudo video under the `(K, c)` partition.
pub fn example_from_clip(
    vqvae: &VqVae,
    clip: &VideoClip,
    k: usize,
    c: usize,
    content: ContentInput,
) -> Result<TrainExample> {
    let part = PoolPartition::new(clip.t(), k, c)?;
    let target = vqvae.tokenize_with_pools(clip, content, part.n_t())?;
    let pseudo_clip = make_pseudo(&clip.slice_frames(0, k)?, clip.t())?;
    let pseudo = vqvae.tokenize_with_pools(&pseudo_clip, content, part.n_t())?;
    Ok(TrainExample { pseudo, target })
}

/// Uniformly selects exactly `schedule.mask_count(len, r)` positions out of
/// `0..len` (partial Fisher-Yates, driven by `rng`).
pub fn mask_for_training(
    schedule: &MaskSchedule,
    len: usize,
    r: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let count = schedule.mask_count(len, r);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.gen_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Cross-entropy of the scene/object head against the target tokens.
pub fn so_cross_entropy(
    t: &Tape,
    model: &TokenPredictor,
    bind: &Binding,
    cond_scene: &[usize],
    cond_object: &[usize],
    target_scene: &[usize],
    target_object: &[usize],
    drop: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let logits = model.so_logits(t, bind, cond_scene, cond_object, drop)?;
    let mut targets = Vec::with_capacity(target_scene.len() + target_object.len());
    targets.extend_from_slice(target_scene);
    targets.extend_from_slice(target_object);
    if let Some(&bad) = targets.iter().find(|&&i| i >= model.cfg.vocab) {
        return Err(Error::TokenOutOfRange { index: bad, size: model.cfg.vocab });
    }
    let log_probs = t.log_softmax_lastdim(logits);
    let picked = t.pick_per_row(log_probs, &targets);
    Ok(t.neg(t.mean_all(picked)))
}

/// Cross-entropy of the motion head over `masked_positions` only. Returns
/// `None` when nothing is masked (the batch entry is skipped).
#[allow(clippy::too_many_arguments)]
pub fn masked_motion_loss(
    t: &Tape,
    model: &TokenPredictor,
    bind: &Binding,
    input_ids: &[usize],
    target_ids: &[usize],
    masked_positions: &[usize],
    guidance: Var,
    drop: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Option<Var>> {
    if masked_positions.is_empty() {
        return Ok(None);
    }
    let logits = model.motion_logits(t, bind, input_ids, guidance, drop)?;
    let masked_logits = t.select_rows(logits, masked_positions);
    let targets: Vec<usize> = masked_positions.iter().map(|&p| target_ids[p]).collect();
    if let Some(&bad) = targets.iter().find(|&&i| i >= model.cfg.vocab) {
        return Err(Error::TokenOutOfRange { index: bad, size: model.cfg.vocab });
    }
    let log_probs = t.log_softmax_lastdim(masked_logits);
    let picked = t.pick_per_row(log_probs, &targets);
    Ok(Some(t.neg(t.mean_all(picked))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2TrainConfig {
    pub learning_rate: f64,
    #[serde(rename = "training_steps")]
    pub total_steps: usize,
    pub batch_size: usize,
    /// Conditioning frames.
    pub k: usize,
    /// Working-pool constant (pools = c*T/K).
    pub c: usize,
    pub dropout: f64,
    pub unconditional: bool,
    pub schedule: MaskSchedule,
    #[serde(rename = "scheduler")]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            total_steps: 2000,
            batch_size: 8,
            k: 4,
            c: 1,
            dropout: 0.0,
            unconditional: false,
            schedule: MaskSchedule::default(),
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2LossReport {
    pub so_loss: f64,
    pub m_loss: f64,
    pub total: f64,
    /// Fraction of batch entries that contributed a motion term.
    pub m_coverage: f64,
}

impl Stage2LossReport {
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} so_loss={:.6e} m_loss={:.6e} total={:.6e} m_coverage={:.3}",
            self.so_loss, self.m_loss, self.total, self.m_coverage
        )
    }
}

pub struct Stage2Trainer {
    pub model: TokenPredictor,
    pub cfg: Stage2TrainConfig,
    pub opt: Adam,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Stage2Trainer {
    pub fn new(model: TokenPredictor, cfg: Stage2TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("bad batch size or learning rate".into()));
        }
        cfg.schedule.validate()?;
        if !cfg.unconditional {
            PoolPartition::new(model.cfg.t, cfg.k, cfg.c)?;
            if cfg.k >= model.cfg.t {
                return Err(Error::InvalidConfig(
                    "conditioning length K must be < T for conditional training".into(),
                ));
            }
        }
        if model.cfg.unconditional != cfg.unconditional {
            return Err(Error::InvalidConfig(
                "model and trainer disagree about the unconditional flag".into(),
            ));
        }
        let opt = Adam::new(cfg.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { model, cfg, opt, step: 0, rng })
    }

    /// One optimizer step over a batch of tokenized examples.
    pub fn train_step(&mut self, batch: &[TrainExample]) -> Result<Stage2LossReport> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        // Pre-draw per-example randomness so workers are deterministic.
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.gen()).collect();
        let passes: Vec<Result<(HashMap<String, ArrayD<f64>>, f64, Option<f64>)>> = batch
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(example, &seed)| self.example_pass(example, seed))
            .collect();

        let mut grads: HashMap<String, ArrayD<f64>> = HashMap::new();
        let mut so_sum = 0.0;
        let mut m_sum = 0.0;
        let mut m_hits = 0usize;
        let mut count = 0usize;
        for pass in passes {
            let (named, so, m) = pass?;
            for (name, g) in named {
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
            so_sum += so;
            if let Some(m) = m {
                m_sum += m;
                m_hits += 1;
            }
            count += 1;
        }
        let scale = 1.0 / count as f64;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        let lr_scale = self.cfg.lr_schedule.scale(self.step, self.cfg.total_steps);
        self.opt.step(&mut self.model.params, &grads, lr_scale);
        self.step += 1;
        let so_loss = so_sum * scale;
        let m_loss = if m_hits > 0 { m_sum / m_hits as f64 } else { 0.0 };
        Ok(Stage2LossReport {
            so_loss,
            m_loss,
            total: so_loss + m_loss,
            m_coverage: m_hits as f64 / count as f64,
        })
    }

    fn example_pass(
        &self,
        example: &TrainExample,
        seed: u64,
    ) -> Result<(HashMap<String, ArrayD<f64>>, f64, Option<f64>)> {
        let cfg = &self.cfg;
        let model = &self.model;
        let mcfg = &model.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tape::new();
        let bind = model.params.bind(&t, true);

        let mask_id = mcfg.mask_id();
        let (cond_scene, cond_object) = if cfg.unconditional {
            (vec![mask_id; mcfg.scene_len()], vec![mask_id; mcfg.object_len()])
        } else {
            (example.pseudo.scene.flat(), example.pseudo.object.flat())
        };
        let target_scene = example.target.scene.flat();
        let target_object = example.target.object.flat();
        let drop = (cfg.dropout > 0.0).then_some(cfg.dropout);

        let so = so_cross_entropy(
            &t,
            model,
            &bind,
            &cond_scene,
            &cond_object,
            &target_scene,
            &target_object,
            drop.map(|p| (p, &mut rng)).map(|(p, r)| (p, &mut *r)),
        )?;

        // Teacher forcing: guidance from the target's scene/object tokens.
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234_5678);
        let guidance = model.guidance(
            &t,
            &bind,
            &target_scene,
            &target_object,
            drop.map(|p| (p, &mut drop_rng)),
        )?;

        // Motion inputs: conditioning frames (from the pseudo video) stay
        // visible; a schedule-chosen subset of the rest becomes the mask
        // symbol.
        let frame_len = mcfg.motion_frame_len();
        let cond_frames = if cfg.unconditional { 0 } else { cfg.k };
        let cond_positions = cond_frames * frame_len;
        let target_motion = example.target.motion.flat();
        let pseudo_motion = example.pseudo.motion.flat();
        let mut input_ids = target_motion.clone();
        input_ids[..cond_positions].copy_from_slice(&pseudo_motion[..cond_positions]);

        let maskable = mcfg.motion_len() - cond_positions;
        let r: f64 = rng.gen_range(0.0..1.0);
        let chosen = mask_for_training(&cfg.schedule, maskable, r, &mut rng);
        let masked_positions: Vec<usize> = chosen.iter().map(|&p| p + cond_positions).collect();
        for &p in &masked_positions {
            input_ids[p] = mask_id;
        }

        let mut drop_rng_m = ChaCha8Rng::seed_from_u64(seed ^ 0x9abc_def0);
        let m = masked_motion_loss(
            &t,
            model,
            &bind,
            &input_ids,
            &target_motion,
            &masked_positions,
            guidance,
            drop.map(|p| (p, &mut drop_rng_m)),
        )?;

        let (total, m_val) = match m {
            Some(m_var) => (t.add(so, m_var), Some(t.value(m_var)[[]])),
            None => (so, None),
        };
        let so_val = t.value(so)[[]];
        let total_val = t.value(total)[[]];
        if !total_val.is_finite() {
            return Err(Error::Training(format!(
                "non-finite stage-two loss at step {}",
                self.step
            )));
        }
        let mut grads = t.backward(total);
        Ok((bind.collect_grads(&mut grads), so_val, m_val))
    }
}
