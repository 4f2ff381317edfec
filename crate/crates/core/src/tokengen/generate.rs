//! Iterative masked-token generation and the downstream tasks: prediction,
//! long-horizon rollout, unconditional generation, interpolation and
//! manipulation.

use super::model::TokenPredictor;
use super::{make_pseudo, MaskSchedule, PoolPartition};
use crate::clip::VideoClip;
use crate::codebook::{TokenBundle, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::Tape;
use crate::vqvae::{ContentInput, VqVae};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub schedule: MaskSchedule,
    /// Sampling temperature for scene/object and motion tokens; 0 is greedy.
    pub temperature: f64,
    pub seed: u64,
    /// What the tokenizer's scene/object encoders are fed (after the
    /// preprocessing handoff this is raw frames).
    pub content: ContentInput,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            schedule: MaskSchedule::default(),
            temperature: 1.0,
            seed: 0,
            content: ContentInput::RawFrames,
        }
    }
}

/// Masked-token state across generation iterations.
pub struct GenerationState {
    /// Full motion sequence, `mask_id` at [M] positions.
    pub ids: Vec<usize>,
    /// Conditioning positions: never masked, never resampled.
    pub fixed: Vec<bool>,
    /// Positions sampled in earlier iterations and kept.
    pub locked: Vec<bool>,
    pub iteration: usize,
}

impl GenerationState {
    /// All-masked template over the non-fixed positions.
    pub fn from_conditioning(ids: Vec<usize>, fixed: Vec<bool>, mask_id: usize) -> Self {
        let mut ids = ids;
        for (id, &f) in ids.iter_mut().zip(fixed.iter()) {
            if !f {
                *id = mask_id;
            }
        }
        let locked = vec![false; fixed.len()];
        Self { ids, fixed, locked, iteration: 0 }
    }

    pub fn masked_count(&self, mask_id: usize) -> usize {
        self.ids.iter().filter(|&&i| i == mask_id).count()
    }
}

/// Samples an index from `logits[..limit]` at the given temperature.
fn sample_logits(logits: &[f64], limit: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let slice = &logits[..limit];
    if temperature <= 0.0 {
        return slice
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
    }
    let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = slice.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..1.0) * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    limit - 1
}

/// Iterative parallel decoding of motion tokens.
///
/// Starting from an all-[M] template over non-fixed positions, each of the
/// `S` iterations (1) samples every currently masked position from the
/// model's output distribution and (2) re-masks `round(gamma(s/S) * L)` of
/// the freshly sampled positions uniformly at random, locking the rest.
/// Fixed conditioning positions are never touched. After iteration `S` no
/// mask symbols remain.
pub fn generate_motion(
    model: &TokenPredictor,
    guidance: &Array2<f64>,
    init_ids: Vec<usize>,
    fixed: Vec<bool>,
    schedule: &MaskSchedule,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    generate_motion_with_trace(model, guidance, init_ids, fixed, schedule, temperature, rng)
        .map(|(ids, _)| ids)
}

/// As [`generate_motion`], additionally returning the number of masked
/// positions after each iteration.
#[allow(clippy::too_many_arguments)]
pub fn generate_motion_with_trace(
    model: &TokenPredictor,
    guidance: &Array2<f64>,
    init_ids: Vec<usize>,
    fixed: Vec<bool>,
    schedule: &MaskSchedule,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    schedule.validate()?;
    let cfg = &model.cfg;
    let mask_id = cfg.mask_id();
    if init_ids.len() != cfg.motion_len() || fixed.len() != cfg.motion_len() {
        return Err(Error::ShapeMismatch(format!(
            "motion template length {} vs {}",
            init_ids.len(),
            cfg.motion_len()
        )));
    }
    let maskable_total = fixed.iter().filter(|&&f| !f).count();
    let mut state = GenerationState::from_conditioning(init_ids, fixed, mask_id);
    let mut trace = Vec::with_capacity(schedule.s);
    let s_total = schedule.s;
    for s in 1..=s_total {
        // (1) Sample all currently masked positions in one parallel pass.
        let t = Tape::new();
        let bind = model.params.bind(&t, false);
        let guide = t.constant(
            guidance
                .clone()
                .into_shape_with_order(IxDyn(&[cfg.t, cfg.hidden_dim]))
                .expect("guidance shape")
                .into_dyn(),
        );
        let logits = model.motion_logits(&t, &bind, &state.ids, guide, None)?;
        let logits = t.value(logits);
        let logits2 = logits
            .into_dimensionality::<ndarray::Ix2>()
            .expect("logit matrix");
        let mut just_sampled = Vec::new();
        for p in 0..state.ids.len() {
            if state.ids[p] == mask_id {
                let row = logits2.row(p);
                let row_slice: Vec<f64> = row.iter().cloned().collect();
                // The mask symbol is excluded from sampling.
                state.ids[p] = sample_logits(&row_slice, cfg.vocab, temperature, rng);
                just_sampled.push(p);
            }
        }
        // (2) Re-mask a schedule fraction of the fresh samples; previously
        // locked tokens stay fixed.
        let keep_masked = schedule.mask_count(maskable_total, s as f64 / s_total as f64);
        let keep_masked = keep_masked.min(just_sampled.len());
        for i in 0..keep_masked {
            let j = rng.gen_range(i..just_sampled.len());
            just_sampled.swap(i, j);
        }
        for (i, &p) in just_sampled.iter().enumerate() {
            if i < keep_masked {
                state.ids[p] = mask_id;
            } else {
                state.locked[p] = true;
            }
        }
        state.iteration = s;
        trace.push(state.masked_count(mask_id));
    }
    if state.ids.iter().any(|&i| i == mask_id) {
        return Err(Error::Generation("mask symbols survived the schedule".into()));
    }
    Ok((state.ids, trace))
}

/// Samples scene/object tokens in one parallel pass from the conditioning
/// tokens, then derives guidance embeddings from the samples.
fn sample_scene_object(
    model: &TokenPredictor,
    cond_scene: &[usize],
    cond_object: &[usize],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>, Array2<f64>)> {
    let cfg = &model.cfg;
    let t = Tape::new();
    let bind = model.params.bind(&t, false);
    let logits = model.so_logits(&t, &bind, cond_scene, cond_object, None)?;
    let logits = t
        .value(logits)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logit matrix");
    let mut scene = Vec::with_capacity(cfg.scene_len());
    let mut object = Vec::with_capacity(cfg.object_len());
    for p in 0..cfg.scene_len() + cfg.object_len() {
        let row: Vec<f64> = logits.row(p).iter().cloned().collect();
        let tok = sample_logits(&row, cfg.vocab, temperature, rng);
        if p < cfg.scene_len() {
            scene.push(tok);
        } else {
            object.push(tok);
        }
    }
    let guide = model.guidance(&t, &bind, &scene, &object, None)?;
    let guide = t
        .value(guide)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("guidance matrix");
    Ok((scene, object, guide))
}

fn motion_grid_from_ids(model: &TokenPredictor, ids: Vec<usize>) -> TokenGrid {
    let cfg = &model.cfg;
    let (hm, wm) = cfg.motion_grid;
    TokenGrid {
        indices: ArrayD::from_shape_vec(IxDyn(&[cfg.t, hm, wm]), ids).expect("motion grid"),
        vocab: cfg.vocab,
    }
}

/// Predicts frames `K+1..T` from the first `K` frames. Returns the predicted
/// suffix (length `T - K`).
pub fn predict(
    vqvae: &VqVae,
    model: &TokenPredictor,
    previous: &VideoClip,
    c: usize,
    options: &GenerateOptions,
) -> Result<VideoClip> {
    let (clip, _) = predict_with_tokens(vqvae, model, previous, c, options)?;
    Ok(clip)
}

/// As [`predict`] but also returns the generated token bundle.
pub fn predict_with_tokens(
    vqvae: &VqVae,
    model: &TokenPredictor,
    previous: &VideoClip,
    c: usize,
    options: &GenerateOptions,
) -> Result<(VideoClip, TokenBundle)> {
    let t_len = vqvae.cfg.t;
    let k = previous.t();
    if k >= t_len {
        return Err(Error::InvalidParam(format!(
            "need 1 <= K < T; got K = {k}, T = {t_len} (nothing to predict)"
        )));
    }
    let part = PoolPartition::new(t_len, k, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let pseudo = make_pseudo(previous, t_len)?;
    let pseudo_tokens = vqvae.tokenize_with_pools(&pseudo, options.content, part.n_t())?;

    let (scene, object, guide) = sample_scene_object(
        model,
        &pseudo_tokens.scene.flat(),
        &pseudo_tokens.object.flat(),
        options.temperature,
        &mut rng,
    )?;

    let frame_len = model.cfg.motion_frame_len();
    let init_ids = pseudo_tokens.motion.flat();
    let fixed: Vec<bool> = (0..model.cfg.motion_len()).map(|p| p / frame_len < k).collect();
    let motion_ids = generate_motion(
        model,
        &guide,
        init_ids,
        fixed,
        &options.schedule,
        options.temperature,
        &mut rng,
    )?;

    let (hs, ws) = model.cfg.scene_grid;
    let (ho, wo) = model.cfg.object_grid;
    let bundle = TokenBundle {
        scene: TokenGrid {
            indices: ArrayD::from_shape_vec(IxDyn(&[hs, ws]), scene).expect("scene grid"),
            vocab: model.cfg.vocab,
        },
        object: TokenGrid {
            indices: ArrayD::from_shape_vec(IxDyn(&[ho, wo]), object).expect("object grid"),
            vocab: model.cfg.vocab,
        },
        motion: motion_grid_from_ids(model, motion_ids),
    };
    let decoded = vqvae.decode_bundle(&bundle)?;
    Ok((decoded.slice_frames(k, t_len)?, bundle))
}

/// Long-horizon rollout: repeatedly predicts `T - K` new frames, feeding the
/// last `K` frames of the growing video forward. Output length is
/// `K + n_clips * (T - K)`.
pub fn predict_long(
    vqvae: &VqVae,
    model: &TokenPredictor,
    previous: &VideoClip,
    c: usize,
    n_clips: usize,
    options: &GenerateOptions,
) -> Result<VideoClip> {
    if n_clips == 0 {
        return Err(Error::InvalidParam("n_clips must be >= 1".into()));
    }
    let k = previous.t();
    let mut video = previous.clone();
    let mut opts = *options;
    for i in 0..n_clips {
        // Derive a fresh seed per clip so rollouts do not repeat samples.
        opts.seed = options.seed.wrapping_add(i as u64);
        let tail = video.slice_frames(video.t() - k, video.t())?;
        let next = predict(vqvae, model, &tail, c, &opts)?;
        video = VideoClip::concat_time(&[&video, &next])?;
    }
    Ok(video)
}

/// Unconditional generation: scene/object tokens sampled from an all-mask
/// condition, then all motion tokens generated with no fixed positions.
/// Requires a model trained with the unconditional variant.
pub fn generate_unconditional(
    vqvae: &VqVae,
    model: &TokenPredictor,
    options: &GenerateOptions,
) -> Result<(VideoClip, TokenBundle)> {
    if !model.cfg.unconditional {
        return Err(Error::Generation(
            "model was trained conditionally; unconditional generation unavailable".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let cfg = &model.cfg;
    let mask_id = cfg.mask_id();
    let cond_scene = vec![mask_id; cfg.scene_len()];
    let cond_object = vec![mask_id; cfg.object_len()];
    let (scene, object, guide) =
        sample_scene_object(model, &cond_scene, &cond_object, options.temperature, &mut rng)?;
    let init_ids = vec![mask_id; cfg.motion_len()];
    let fixed = vec![false; cfg.motion_len()];
    let motion_ids = generate_motion(
        model,
        &guide,
        init_ids,
        fixed,
        &options.schedule,
        options.temperature,
        &mut rng,
    )?;
    let (hs, ws) = cfg.scene_grid;
    let (ho, wo) = cfg.object_grid;
    let bundle = TokenBundle {
        scene: TokenGrid {
            indices: ArrayD::from_shape_vec(IxDyn(&[hs, ws]), scene).expect("scene grid"),
            vocab: cfg.vocab,
        },
        object: TokenGrid {
            indices: ArrayD::from_shape_vec(IxDyn(&[ho, wo]), object).expect("object grid"),
            vocab: cfg.vocab,
        },
        motion: motion_grid_from_ids(model, motion_ids),
    };
    let clip = vqvae.decode_bundle(&bundle)?;
    Ok((clip, bundle))
}

/// Fills motion tokens of gap frames given known frames at
/// `known_positions`. Known frames' motion tokens stay fixed; scene/object
/// tokens come from the known content (gaps hold-filled before encoding).
/// Returns the decoded clip and its token bundle.
pub fn interpolate(
    vqvae: &VqVae,
    model: &TokenPredictor,
    known_positions: &[usize],
    known_frames: &VideoClip,
    options: &GenerateOptions,
) -> Result<(VideoClip, TokenBundle)> {
    let t_len = vqvae.cfg.t;
    if known_positions.is_empty() || known_positions.len() != known_frames.t() {
        return Err(Error::InvalidParam(
            "known positions and frames must be non-empty and aligned".into(),
        ));
    }
    if known_positions.windows(2).any(|w| w[0] >= w[1])
        || *known_positions.last().unwrap() >= t_len
    {
        return Err(Error::InvalidParam(
            "known positions must be strictly increasing and within the clip".into(),
        ));
    }
    // Scaffold: every gap frame holds the nearest earlier known frame
    // (frames before the first known one take it instead).
    let mut scaffold_frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let idx = match known_positions.iter().rposition(|&p| p <= t) {
            Some(i) => i,
            None => 0,
        };
        scaffold_frames.push(known_frames.slice_frames(idx, idx + 1)?);
    }
    let refs: Vec<&VideoClip> = scaffold_frames.iter().collect();
    let scaffold = VideoClip::concat_time(&refs)?;
    let bundle = vqvae.tokenize(&scaffold, options.content)?;

    let known_set: Vec<bool> = (0..t_len).map(|t| known_positions.contains(&t)).collect();
    if known_set.iter().all(|&k| k) {
        // No gaps: identity on the tokens.
        let clip = vqvae.decode_bundle(&bundle)?;
        return Ok((clip, bundle));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let t = Tape::new();
    let bind = model.params.bind(&t, false);
    let guide = model.guidance(&t, &bind, &bundle.scene.flat(), &bundle.object.flat(), None)?;
    let guide = t
        .value(guide)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("guidance matrix");

    let frame_len = model.cfg.motion_frame_len();
    let fixed: Vec<bool> = (0..model.cfg.motion_len())
        .map(|p| known_set[p / frame_len])
        .collect();
    let motion_ids = generate_motion(
        model,
        &guide,
        bundle.motion.flat(),
        fixed,
        &options.schedule,
        options.temperature,
        &mut rng,
    )?;
    let out_bundle = TokenBundle {
        scene: bundle.scene.clone(),
        object: bundle.object.clone(),
        motion: motion_grid_from_ids(model, motion_ids),
    };
    let clip = vqvae.decode_bundle(&out_bundle)?;
    Ok((clip, out_bundle))
}

/// Decodes a video with objects and motion from `bundle_x` and the scene
/// from `bundle_y`.
pub fn manipulate(
    vqvae: &VqVae,
    bundle_x: &TokenBundle,
    bundle_y: &TokenBundle,
) -> Result<VideoClip> {
    vqvae.decode_manipulated(bundle_x, bundle_y)
}
