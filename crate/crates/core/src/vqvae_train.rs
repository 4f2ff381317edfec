//! Stage-one training: reconstruction + commitment losses, optional
//! adversarial and negative-SSIM terms, EMA codebook updates and the
//! preprocessing handoff.
//!
//! Codebook entries are updated only by the EMA pass, never by the
//! optimizer. The handoff step switches what the scene/object encoders are
//! fed (component videos before, raw frames after); the motion pipeline is
//! unaffected by it.

use crate::clip::VideoClip;
use crate::codebook::{CodebookSet, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::layers::{silu, Conv2d};
use crate::nn::{Adam, Binding, LrSchedule, ParamStore, Tape, Var};
use crate::vqvae::{to_net, CommitTerm, ContentInput, VqVae};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqvaeTrainConfig {
    pub learning_rate: f64,
    #[serde(rename = "training_steps")]
    pub total_steps: usize,
    pub batch_size: usize,
    /// Step at which scene/object encoders switch from component videos to
    /// raw frames.
    pub preproc_handoff_step: usize,
    pub disc_start_step: usize,
    /// Commitment weight (beta).
    pub commit_weight: f64,
    /// Per-component scaling of the summed commitment terms
    /// (scene, object, motion).
    pub commit_component_weights: [f64; 3],
    pub perceptual_weight: f64,
    pub adv_weight: f64,
    pub use_video_disc: bool,
    pub use_image_disc: bool,
    pub use_neg_ssim: bool,
    pub neg_ssim_weight: f64,
    #[serde(rename = "scheduler")]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for VqvaeTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            total_steps: 10_000,
            batch_size: 4,
            preproc_handoff_step: 2_000,
            disc_start_step: 2_000,
            commit_weight: 0.25,
            commit_component_weights: [1.0, 1.0, 1.0],
            perceptual_weight: 1.0,
            adv_weight: 0.1,
            use_video_disc: false,
            use_image_disc: false,
            use_neg_ssim: false,
            neg_ssim_weight: 1.0,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl VqvaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.commit_weight,
            self.perceptual_weight,
            self.adv_weight,
            self.neg_ssim_weight,
            self.commit_component_weights[0],
            self.commit_component_weights[1],
            self.commit_component_weights[2],
        ];
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.preproc_handoff_step > self.total_steps || self.disc_start_step > self.total_steps
        {
            return Err(Error::InvalidConfig(
                "handoff and discriminator start steps must not exceed total_steps".into(),
            ));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss breakdown. `total` is the generator objective:
/// `l2 + perceptual_weight*perceptual + commit_weight*commit
///  + neg_ssim_weight*neg_ssim + adv_weight*adv_g`
/// (disabled terms enter as zero). `adv_d` is the discriminator's own loss
/// and is not part of `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l2: f64,
    pub perceptual: f64,
    pub commit: f64,
    pub neg_ssim: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total: f64,
}

impl LossReport {
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} l2={:.6e} perceptual={:.6e} commit={:.6e} neg_ssim={:.6e} adv_g={:.6e} adv_d={:.6e} total={:.6e}",
            self.l2, self.perceptual, self.commit, self.neg_ssim, self.adv_g, self.adv_d, self.total
        )
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared error over all pixels and frames.
pub fn l2_loss(t: &Tape, recon: Var, target: &ArrayD<f64>) -> Var {
    let diff = t.sub(recon, t.constant(target.clone()));
    t.mean_all(t.square(diff))
}

/// Commitment loss: per component, the weighted sum over all sites of
/// `||z - sg(quantized)||^2`; components are summed.
pub fn commitment_loss(t: &Tape, terms: &[(&CommitTerm, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for (term, weight) in terms {
        let diff = t.sub(term.raw, t.constant(term.quantized.clone()));
        let part = t.mul_scalar(t.sum_all(t.square(diff)), *weight);
        acc = Some(match acc {
            Some(a) => t.add(a, part),
            None => part,
        });
    }
    acc.expect("at least one commitment term")
}

/// Frozen randomly initialized convolutional pyramid used as the perceptual
/// feature extractor. Parameters are fixed at construction (seeded) and are
/// never trained; gradients still flow through to the input frames.
pub struct RandomPyramid {
    params: ParamStore,
    convs: Vec<Conv2d>,
}

impl RandomPyramid {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [8usize, 16, 24];
        let mut convs = Vec::new();
        let mut ch = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("pyr{i}"), ch, w, 3, 2, 1, &mut rng));
            ch = w;
        }
        Self { params, convs }
    }

    /// Multi-scale activations of a `(N, C, H, W)` batch.
    pub fn features(&self, t: &Tape, frames: Var) -> Vec<Var> {
        let bind = self.params.bind(t, false);
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut x = frames;
        for conv in &self.convs {
            x = silu(t, conv.forward(t, &bind, x));
            acts.push(x);
        }
        acts
    }
}

/// Perceptual distance: mean squared difference of pyramid activations,
/// averaged over levels.
pub fn perceptual_loss(t: &Tape, pyramid: &RandomPyramid, recon: Var, target: &ArrayD<f64>) -> Var {
    let recon_feats = pyramid.features(t, recon);
    let target_feats = pyramid.features(t, t.constant(target.clone()));
    let mut acc: Option<Var> = None;
    let levels = recon_feats.len() as f64;
    for (r, g) in recon_feats.into_iter().zip(target_feats) {
        let d = t.mean_all(t.square(t.sub(r, g)));
        acc = Some(match acc {
            Some(a) => t.add(a, d),
            None => d,
        });
    }
    t.mul_scalar(acc.expect("pyramid has levels"), 1.0 / levels)
}

/// Gaussian window for the SSIM loss (11x11, sigma 1.5), normalized.
fn gaussian_window(k: usize, sigma: f64) -> Array2<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let mut w = Array2::from_shape_fn((k, k), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let s = w.sum();
    w.mapv_inplace(|v| v / s);
    w
}

/// Differentiable mean SSIM between a reconstruction and a target, both
/// `(N, C, H, W)` in [0, 1]. Windows are 11x11 Gaussian, valid-positioned.
/// Returns the mean SSIM as a Var (maximize toward 1).
pub fn ssim_mean(t: &Tape, recon: Var, target: &ArrayD<f64>) -> Var {
    let shape = t.shape(recon);
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = 11usize;
    assert!(h >= k && w >= k, "frame smaller than SSIM window");
    let window = gaussian_window(k, 1.5);
    let w_arr = window
        .into_shape_with_order(IxDyn(&[1, 1, k, k]))
        .expect("window shape");
    let w_const = t.constant(w_arr);
    let zero_bias = t.constant(ArrayD::zeros(IxDyn(&[1])));
    // Per-channel processing as a (N*C, 1, H, W) batch.
    let x = t.reshape(recon, &[n * c, 1, h, w]);
    let y = t.constant(
        target
            .clone()
            .into_shape_with_order(IxDyn(&[n * c, 1, h, w]))
            .expect("target shape"),
    );
    let conv = |v: Var| t.conv2d(v, w_const, zero_bias, 1, 0);
    let mu_x = conv(x);
    let mu_y = conv(y);
    let mu_x2 = t.square(mu_x);
    let mu_y2 = t.square(mu_y);
    let mu_xy = t.mul(mu_x, mu_y);
    let sigma_x = t.sub(conv(t.square(x)), mu_x2);
    let sigma_y = t.sub(conv(t.square(y)), mu_y2);
    let sigma_xy = t.sub(conv(t.mul(x, y)), mu_xy);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let lum_num = t.add_scalar(t.mul_scalar(mu_xy, 2.0), c1);
    let lum_den = t.add_scalar(t.add(mu_x2, mu_y2), c1);
    let con_num = t.add_scalar(t.mul_scalar(sigma_xy, 2.0), c2);
    let con_den = t.add_scalar(t.add(sigma_x, sigma_y), c2);
    let ssim_map = t.div(t.mul(lum_num, con_num), t.mul(lum_den, con_den));
    t.mean_all(ssim_map)
}

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

/// Clip-level discriminator: frames stacked into channels, strided convs,
/// spatial mean score. The image variant scores frames independently.
pub struct Discriminator {
    pub params: ParamStore,
    convs: Vec<Conv2d>,
    to_score: Conv2d,
    /// Channels seen by the first conv (T*C for the video variant, C for the
    /// image variant).
    in_channels: usize,
    per_frame: bool,
}

impl Discriminator {
    pub fn video(t_len: usize, c: usize, seed: u64) -> Self {
        Self::build(t_len * c, false, seed)
    }

    pub fn image(c: usize, seed: u64) -> Self {
        Self::build(c, true, seed)
    }

    fn build(in_channels: usize, per_frame: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [16usize, 32, 32];
        let mut convs = Vec::new();
        let mut ch = in_channels;
        for (i, &width) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("disc{i}"), ch, width, 3, 2, 1, &mut rng));
            ch = width;
        }
        let to_score = Conv2d::new(&mut params, "disc_out", ch, 1, 3, 1, 1, &mut rng);
        Self { params, convs, to_score, in_channels, per_frame }
    }

    /// Scalar realness score of a `(T, C, H, W)` clip.
    pub fn score(&self, t: &Tape, bind: &Binding, frames: Var) -> Var {
        let shape = t.shape(frames);
        let (tt, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut x = if self.per_frame {
            frames
        } else {
            assert_eq!(tt * c, self.in_channels, "clip length mismatch");
            t.reshape(frames, &[1, tt * c, h, w])
        };
        for conv in &self.convs {
            x = silu(t, conv.forward(t, bind, x));
        }
        t.mean_all(self.to_score.forward(t, bind, x))
    }
}

/// Hinge losses for one (real, fake) score pair:
/// `adv_d = relu(1 - real) + relu(1 + fake)`, `adv_g = -fake`.
pub fn hinge_losses(real_score: f64, fake_score: f64) -> (f64, f64) {
    let adv_d = (1.0 - real_score).max(0.0) + (1.0 + fake_score).max(0.0);
    let adv_g = -fake_score;
    (adv_g, adv_d)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct ClipPass {
    grads: HashMap<String, ArrayD<f64>>,
    report: LossReport,
    ema_scene: ArrayD<f64>,
    ema_object: ArrayD<f64>,
    ema_motion: ArrayD<f64>,
    tok_scene: Vec<usize>,
    tok_object: Vec<usize>,
    tok_motion: Vec<usize>,
    recon_value: ArrayD<f64>,
}

pub struct VqvaeTrainer {
    pub model: VqVae,
    pub cfg: VqvaeTrainConfig,
    pub opt: Adam,
    pub perceptual: RandomPyramid,
    pub video_disc: Option<(Discriminator, Adam)>,
    pub image_disc: Option<(Discriminator, Adam)>,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl VqvaeTrainer {
    pub fn new(model: VqVae, cfg: VqvaeTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let perceptual = RandomPyramid::new(model.cfg.c, cfg.seed ^ 0x9e3779b97f4a7c15);
        let video_disc = cfg
            .use_video_disc
            .then(|| {
                (
                    Discriminator::video(model.cfg.t, model.cfg.c, cfg.seed ^ 0x5bd1),
                    Adam::new(cfg.learning_rate),
                )
            });
        let image_disc = cfg
            .use_image_disc
            .then(|| (Discriminator::image(model.cfg.c, cfg.seed ^ 0xa5a5), Adam::new(cfg.learning_rate)));
        let opt = Adam::new(cfg.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { model, cfg, opt, perceptual, video_disc, image_disc, step: 0, rng })
    }

    /// Input mode for the scene/object encoders at the current step.
    pub fn content_input(&self) -> ContentInput {
        if self.step < self.cfg.preproc_handoff_step {
            ContentInput::Components
        } else {
            ContentInput::RawFrames
        }
    }

    fn adversarial_active(&self) -> bool {
        (self.video_disc.is_some() || self.image_disc.is_some())
            && self.step >= self.cfg.disc_start_step
    }

    /// Generator-side forward and backward for one clip.
    fn clip_pass(&self, clip: &VideoClip, content: ContentInput, adv: bool) -> Result<ClipPass> {
        let t = Tape::new();
        let bind = self.model.params.bind(&t, true);
        let fwd = self.model.forward_train(&t, &bind, clip, content)?;
        let target = to_net(clip.frames());

        let l2 = l2_loss(&t, fwd.recon, &target);
        let perceptual = perceptual_loss(&t, &self.perceptual, fwd.recon, &target);
        let [ws, wo, wm] = self.cfg.commit_component_weights;
        let commit = commitment_loss(
            &t,
            &[(&fwd.commit_scene, ws), (&fwd.commit_object, wo), (&fwd.commit_motion, wm)],
        );

        let mut total = t.add(l2, t.mul_scalar(perceptual, self.cfg.perceptual_weight));
        total = t.add(total, t.mul_scalar(commit, self.cfg.commit_weight));

        let mut neg_ssim_val = 0.0;
        if self.cfg.use_neg_ssim {
            let ssim = ssim_mean(&t, fwd.recon, &target);
            let neg = t.neg(ssim);
            neg_ssim_val = t.value(neg)[[]];
            total = t.add(total, t.mul_scalar(neg, self.cfg.neg_ssim_weight));
        }

        let mut adv_g_val = 0.0;
        if adv {
            let mut adv_g_acc: Option<Var> = None;
            if let Some((disc, _)) = &self.video_disc {
                let dbind = disc.params.bind(&t, false);
                let fake_score = disc.score(&t, &dbind, fwd.recon);
                let g = t.neg(fake_score);
                adv_g_acc = Some(g);
            }
            if let Some((disc, _)) = &self.image_disc {
                let dbind = disc.params.bind(&t, false);
                let fake_score = disc.score(&t, &dbind, fwd.recon);
                let g = t.neg(fake_score);
                adv_g_acc = Some(match adv_g_acc {
                    Some(a) => t.add(a, g),
                    None => g,
                });
            }
            if let Some(g) = adv_g_acc {
                adv_g_val = t.value(g)[[]];
                total = t.add(total, t.mul_scalar(g, self.cfg.adv_weight));
            }
        }

        let total_val = t.value(total)[[]];
        if !total_val.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {}: l2={} perceptual={} commit={}",
                self.step,
                t.value(l2)[[]],
                t.value(perceptual)[[]],
                t.value(commit)[[]]
            )));
        }

        let report = LossReport {
            l2: t.value(l2)[[]],
            perceptual: t.value(perceptual)[[]],
            commit: t.value(commit)[[]],
            neg_ssim: neg_ssim_val,
            adv_g: adv_g_val,
            adv_d: 0.0,
            total: total_val,
        };

        let recon_value = t.value(fwd.recon);
        let mut grads = t.backward(total);
        let named = bind.collect_grads(&mut grads);
        Ok(ClipPass {
            grads: named,
            report,
            ema_scene: fwd.ema_scene,
            ema_object: fwd.ema_object,
            ema_motion: fwd.ema_motion,
            tok_scene: fwd.tokens.scene.flat(),
            tok_object: fwd.tokens.object.flat(),
            tok_motion: fwd.tokens.motion.flat(),
            recon_value,
        })
    }

    /// One optimizer step over a batch of clips. Returns the batch-mean loss
    /// report.
    pub fn train_step(&mut self, batch: &[VideoClip]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let content = self.content_input();
        let adv = self.adversarial_active();
        let passes: Vec<Result<ClipPass>> = batch
            .par_iter()
            .map(|clip| self.clip_pass(clip, content, adv))
            .collect();
        let mut collected = Vec::with_capacity(passes.len());
        for p in passes {
            collected.push(p?);
        }

        // Average gradients across the batch (deterministic order).
        let scale = 1.0 / collected.len() as f64;
        let mut grads: HashMap<String, ArrayD<f64>> = HashMap::new();
        for pass in &collected {
            for (name, g) in &pass.grads {
                match grads.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        let lr_scale = self.cfg.lr_schedule.scale(self.step, self.cfg.total_steps);
        self.opt.step(&mut self.model.params, &grads, lr_scale);

        // EMA codebook update from the whole batch.
        self.apply_ema(&collected)?;

        // Discriminator updates on detached reconstructions.
        let mut adv_d_total = 0.0;
        let mut adv_g_total: f64 = collected.iter().map(|p| p.report.adv_g).sum();
        adv_g_total *= scale;
        if adv {
            adv_d_total = self.train_discriminators(batch, &collected)?;
        }

        let mut report = LossReport::default();
        for pass in &collected {
            report.l2 += pass.report.l2 * scale;
            report.perceptual += pass.report.perceptual * scale;
            report.commit += pass.report.commit * scale;
            report.neg_ssim += pass.report.neg_ssim * scale;
            report.total += pass.report.total * scale;
        }
        report.adv_g = adv_g_total;
        report.adv_d = adv_d_total;
        self.step += 1;
        Ok(report)
    }

    fn apply_ema(&mut self, passes: &[ClipPass]) -> Result<()> {
        let d = self.model.cfg.d;
        let concat = |grab: &dyn Fn(&ClipPass) -> (&ArrayD<f64>, &Vec<usize>)| {
            let mut rows = Vec::new();
            let mut toks = Vec::new();
            for p in passes {
                let (f, tk) = grab(p);
                rows.push(f.view());
                toks.extend_from_slice(tk);
            }
            let feats = ndarray::concatenate(Axis(0), &rows).expect("ema concat");
            (feats, toks)
        };
        let (scene_f, scene_t) = concat(&|p| (&p.ema_scene, &p.tok_scene));
        let (object_f, object_t) = concat(&|p| (&p.ema_object, &p.tok_object));
        let (motion_f, motion_t) = concat(&|p| (&p.ema_motion, &p.tok_motion));
        let n = self.model.cfg.n;
        let grid = |toks: Vec<usize>| TokenGrid {
            indices: ArrayD::from_shape_vec(IxDyn(&[toks.len()]), toks).expect("token vec"),
            vocab: n,
        };
        match &mut self.model.books {
            CodebookSet::Shared(book) => {
                let all = ndarray::concatenate(
                    Axis(0),
                    &[scene_f.view(), object_f.view(), motion_f.view()],
                )
                .expect("shared ema concat");
                let mut toks = scene_t;
                toks.extend(object_t);
                toks.extend(motion_t);
                book.ema_update(&all, &grid(toks))?;
                if self.model.cfg.dead_entry_patience > 0 {
                    book.refresh_dead_entries(
                        &all,
                        self.model.cfg.dead_entry_patience,
                        &mut self.rng,
                    )?;
                }
            }
            CodebookSet::PerComponent { scene, object, motion } => {
                scene.ema_update(&scene_f, &grid(scene_t))?;
                object.ema_update(&object_f, &grid(object_t))?;
                motion.ema_update(&motion_f, &grid(motion_t))?;
                if self.model.cfg.dead_entry_patience > 0 {
                    let patience = self.model.cfg.dead_entry_patience;
                    scene.refresh_dead_entries(&scene_f, patience, &mut self.rng)?;
                    object.refresh_dead_entries(&object_f, patience, &mut self.rng)?;
                    motion.refresh_dead_entries(&motion_f, patience, &mut self.rng)?;
                }
            }
        }
        let _ = d;
        Ok(())
    }

    /// Hinge-loss discriminator updates; reconstructions are detached.
    /// Returns the mean discriminator loss.
    fn train_discriminators(&mut self, batch: &[VideoClip], passes: &[ClipPass]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0.0;
        let lr_scale = self.cfg.lr_schedule.scale(self.step, self.cfg.total_steps);
        for which in ["video", "image"] {
            let disc_opt = match which {
                "video" => &mut self.video_disc,
                _ => &mut self.image_disc,
            };
            let Some((disc, opt)) = disc_opt.as_mut() else { continue };
            let t = Tape::new();
            let bind = disc.params.bind(&t, true);
            let mut loss_acc: Option<Var> = None;
            for (clip, pass) in batch.iter().zip(passes.iter()) {
                let real = t.constant(to_net(clip.frames()));
                let fake = t.constant(pass.recon_value.clone());
                let real_score = disc.score(&t, &bind, real);
                let fake_score = disc.score(&t, &bind, fake);
                // relu(1 - real) + relu(1 + fake)
                let one = t.scalar(1.0);
                let d_real = t.relu(t.sub(one, real_score));
                let d_fake = t.relu(t.add_scalar(fake_score, 1.0));
                let pair = t.add(d_real, d_fake);
                loss_acc = Some(match loss_acc {
                    Some(a) => t.add(a, pair),
                    None => pair,
                });
            }
            let loss = t.mul_scalar(loss_acc.expect("non-empty batch"), 1.0 / batch.len() as f64);
            total += t.value(loss)[[]];
            count += 1.0;
            let mut grads = t.backward(loss);
            let named = bind.collect_grads(&mut grads);
            opt.step(&mut disc.params, &named, lr_scale);
        }
        Ok(if count > 0.0 { total / count } else { 0.0 })
    }
}
