//! The three-component video tokenizer: decomposition-fed encoders, shared
//! vector-quantized codebook, merge module and time-independent decoder.
//!
//! Layouts: clips are `(T, H, W, C)`, network tensors are `(T, C, H, W)`,
//! content features are `(1, D, h, w)`, motion features `(T, D, h_m, w_m)`,
//! motion tokens `(T, h_m, w_m)`. The motion encoder always consumes the
//! causal frame difference, so motion tokens of a shared prefix are
//! identical across videos sharing that prefix whenever the working pools
//! keep the prefix separate.

use crate::clip::VideoClip;
use crate::codebook::{
    lookup, quantize, Codebook, CodebookSet, Component, TokenBundle, TokenGrid,
};
use crate::decoder::{ComponentSelect, FrameDecoder, MergeModule};
use crate::decompose::{backward_difference, decompose, DecomposeParams};
use crate::encoders::{ContentEncoder, EncoderConfig, MotionEncoder};
use crate::error::{Error, Result};
use crate::nn::{Binding, ParamStore, Tape, Var};
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqvaeConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub f_s: usize,
    pub f_o: usize,
    pub f_m: usize,
    /// Feature and codebook entry dimension.
    pub d: usize,
    /// Codebook size.
    pub n: usize,
    pub n_t: usize,
    pub base_channels: usize,
    pub residual_depth: usize,
    pub shared_codebook: bool,
    pub ema_decay: f64,
    pub smoothing_eps: f64,
    /// Updates a starving entry may sit below the dead threshold before it is
    /// reseeded from batch features; 0 disables reseeding.
    pub dead_entry_patience: u32,
    pub c_lb: f64,
    pub c_ub: f64,
}

impl VqvaeConfig {
    /// Small configuration for 32x32, T=8 clips.
    pub fn desk32() -> Self {
        Self {
            t: 8,
            h: 32,
            w: 32,
            c: 3,
            f_s: 4,
            f_o: 4,
            f_m: 8,
            d: 32,
            n: 512,
            n_t: 2,
            base_channels: 16,
            residual_depth: 2,
            shared_codebook: true,
            ema_decay: 0.99,
            smoothing_eps: 1e-5,
            dead_entry_patience: 25,
            c_lb: 0.1,
            c_ub: 0.9,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            f_s: self.f_s,
            f_o: self.f_o,
            f_m: self.f_m,
            d: self.d,
            residual_depth: self.residual_depth,
            n_t: self.n_t,
            base_channels: self.base_channels,
            in_channels: self.c,
        }
    }

    /// Grid the merge module works on: the finest of the scene/object grids.
    pub fn merge_factor(&self) -> usize {
        self.f_s.min(self.f_o)
    }

    pub fn scene_grid(&self) -> (usize, usize) {
        (self.h / self.f_s, self.w / self.f_s)
    }

    pub fn object_grid(&self) -> (usize, usize) {
        (self.h / self.f_o, self.w / self.f_o)
    }

    pub fn motion_grid(&self) -> (usize, usize) {
        (self.h / self.f_m, self.w / self.f_m)
    }

    /// Token counts (scene, object, motion) for one clip.
    pub fn token_counts(&self) -> (usize, usize, usize) {
        let (hs, ws) = self.scene_grid();
        let (ho, wo) = self.object_grid();
        let (hm, wm) = self.motion_grid();
        (hs * ws, ho * wo, self.t * hm * wm)
    }

    pub fn total_tokens(&self) -> usize {
        let (s, o, m) = self.token_counts();
        s + o + m
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate(self.t, self.h, self.w)?;
        let mf = self.merge_factor();
        if (self.h / mf) % 4 != 0 || (self.w / mf) % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "merge grid {}x{} must be divisible by 4",
                self.h / mf,
                self.w / mf
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("codebook size must be >= 1".into()));
        }
        DecomposeParams::new(self.c_lb, self.c_ub)?;
        Ok(())
    }
}

/// What the scene/object encoders are fed. The motion encoder always takes
/// the causal frame difference, regardless of this choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContentInput {
    /// Decomposed component videos (used before the preprocessing handoff).
    Components,
    /// Raw frames (used after the handoff).
    RawFrames,
}

/// Raw-vs-quantized pair for the commitment loss of one component.
pub struct CommitTerm {
    pub raw: Var,
    pub quantized: ArrayD<f64>,
}

/// Everything the trainer needs from one clip's forward pass.
pub struct TrainForward {
    /// Reconstruction, `(T, C, H, W)`, values in [0, 1].
    pub recon: Var,
    pub tokens: TokenBundle,
    pub commit_scene: CommitTerm,
    pub commit_object: CommitTerm,
    pub commit_motion: CommitTerm,
    /// Site-major `(P, D)` encoder outputs per component, for EMA updates.
    pub ema_scene: ArrayD<f64>,
    pub ema_object: ArrayD<f64>,
    pub ema_motion: ArrayD<f64>,
}

pub struct VqVae {
    pub cfg: VqvaeConfig,
    pub params: ParamStore,
    pub books: CodebookSet,
    scene_enc: ContentEncoder,
    object_enc: ContentEncoder,
    motion_enc: MotionEncoder,
    merge: MergeModule,
    frame_dec: FrameDecoder,
}

impl VqVae {
    pub fn new(cfg: VqvaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc_cfg = cfg.encoder_config();
        let scene_enc = ContentEncoder::new(&mut params, "scene", &enc_cfg, cfg.f_s, cfg.t, &mut rng);
        let object_enc =
            ContentEncoder::new(&mut params, "object", &enc_cfg, cfg.f_o, cfg.t, &mut rng);
        let motion_enc = MotionEncoder::new(&mut params, "motion", &enc_cfg, &mut rng);
        let merge = MergeModule::new(&mut params, "merge", cfg.d, &mut rng);
        let frame_dec = FrameDecoder::new(
            &mut params,
            "decoder",
            cfg.d,
            cfg.c,
            cfg.merge_factor(),
            cfg.residual_depth,
            &mut rng,
        );
        let mk_book = |rng: &mut ChaCha8Rng| {
            Codebook::new(cfg.n, cfg.d, cfg.ema_decay, cfg.smoothing_eps, rng)
        };
        let books = if cfg.shared_codebook {
            CodebookSet::shared(mk_book(&mut rng))
        } else {
            CodebookSet::separate(mk_book(&mut rng), mk_book(&mut rng), mk_book(&mut rng))
        };
        Ok(Self { cfg, params, books, scene_enc, object_enc, motion_enc, merge, frame_dec })
    }

    fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let (t, h, w, c) = clip.shape();
        if (t, h, w, c) != (self.cfg.t, self.cfg.h, self.cfg.w, self.cfg.c) {
            return Err(Error::ShapeMismatch(format!(
                "clip ({t}, {h}, {w}, {c}) vs configured ({}, {}, {}, {})",
                self.cfg.t, self.cfg.h, self.cfg.w, self.cfg.c
            )));
        }
        Ok(())
    }

    /// Encoder inputs for one clip under the given content-input mode.
    fn encoder_inputs(
        &self,
        clip: &VideoClip,
        content: ContentInput,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>, ArrayD<f64>)> {
        let (scene_in, object_in) = match content {
            ContentInput::Components => {
                let params = DecomposeParams::new(self.cfg.c_lb, self.cfg.c_ub)?;
                let comps = decompose(clip, &params)?;
                (to_net(&comps.scene), to_net(&comps.object))
            }
            ContentInput::RawFrames => (to_net(clip.frames()), to_net(clip.frames())),
        };
        let motion_in = to_net(&backward_difference(clip));
        Ok((scene_in, object_in, motion_in))
    }

    /// Quantizes a `(N, D, h, w)` feature Var against `book`. Returns the
    /// straight-through Var, the tokens `(N, h, w)`, the site-major raw
    /// features and the quantized array in feature layout.
    fn quantize_feature(
        &self,
        t: &Tape,
        feature: Var,
        book: &Codebook,
    ) -> Result<(Var, TokenGrid, ArrayD<f64>, ArrayD<f64>)> {
        let shape = t.shape(feature);
        let (n, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let value = t.value(feature);
        let sites = value
            .permuted_axes(IxDyn(&[0, 2, 3, 1]))
            .as_standard_layout()
            .to_owned(); // (N, h, w, D)
        let flat = sites
            .into_shape_with_order(IxDyn(&[n * h * w, d]))
            .expect("site-major reshape");
        let (q_flat, tokens_flat) = quantize(&flat, book)?;
        let tokens = TokenGrid {
            indices: tokens_flat
                .indices
                .into_shape_with_order(IxDyn(&[n, h, w]))
                .expect("token shape"),
            vocab: tokens_flat.vocab,
        };
        let q_layout = q_flat
            .clone()
            .into_shape_with_order(IxDyn(&[n, h, w, d]))
            .expect("quantized shape")
            .permuted_axes(IxDyn(&[0, 3, 1, 2]))
            .as_standard_layout()
            .to_owned();
        let st = t.straight_through(feature, &q_layout);
        Ok((st, tokens, flat, q_layout))
    }

    /// Full training-path forward for one clip on an existing tape/binding.
    pub fn forward_train(
        &self,
        t: &Tape,
        bind: &Binding,
        clip: &VideoClip,
        content: ContentInput,
    ) -> Result<TrainForward> {
        self.check_clip(clip)?;
        let (scene_in, object_in, motion_in) = self.encoder_inputs(clip, content)?;
        let z_s = self.scene_enc.forward(t, bind, t.constant(scene_in));
        let z_o = self.object_enc.forward(t, bind, t.constant(object_in));
        let z_m = self
            .motion_enc
            .forward(t, bind, t.constant(motion_in), self.cfg.n_t);

        let (st_s, tok_s, ema_s, q_s) = self.quantize_feature(t, z_s, self.books.book(Component::Scene))?;
        let (st_o, tok_o, ema_o, q_o) =
            self.quantize_feature(t, z_o, self.books.book(Component::Object))?;
        let (st_m, tok_m, ema_m, q_m) =
            self.quantize_feature(t, z_m, self.books.book(Component::Motion))?;

        let recon = self.decode_features(t, bind, st_s, st_o, st_m);

        let scene_tokens = TokenGrid {
            indices: squeeze_first(&tok_s.indices),
            vocab: tok_s.vocab,
        };
        let object_tokens = TokenGrid {
            indices: squeeze_first(&tok_o.indices),
            vocab: tok_o.vocab,
        };
        Ok(TrainForward {
            recon,
            tokens: TokenBundle { scene: scene_tokens, object: object_tokens, motion: tok_m },
            commit_scene: CommitTerm { raw: z_s, quantized: q_s },
            commit_object: CommitTerm { raw: z_o, quantized: q_o },
            commit_motion: CommitTerm { raw: z_m, quantized: q_m },
            ema_scene: ema_s,
            ema_object: ema_o,
            ema_motion: ema_m,
        })
    }

    /// Merge + decode every frame from (straight-through or looked-up)
    /// feature Vars. `motion` is `(T, D, h_m, w_m)`.
    fn decode_features(&self, t: &Tape, bind: &Binding, scene: Var, object: Var, motion: Var) -> Var {
        let mf = self.cfg.merge_factor();
        let scene_up = t.upsample_nearest2d(scene, self.cfg.f_s / mf);
        let object_up = t.upsample_nearest2d(object, self.cfg.f_o / mf);
        let t_len = t.shape(motion)[0];
        let mut frames = Vec::with_capacity(t_len);
        for ti in 0..t_len {
            frames.push(self.decode_single(t, bind, scene_up, object_up, motion, ti));
        }
        t.concat(&frames, 0)
    }

    /// Decodes frame `ti` given already-upsampled scene/object features and
    /// the full motion feature grid.
    fn decode_single(
        &self,
        t: &Tape,
        bind: &Binding,
        scene_up: Var,
        object_up: Var,
        motion: Var,
        ti: usize,
    ) -> Var {
        let mf = self.cfg.merge_factor();
        let m_t = t.slice_axis(motion, 0, ti, 1);
        let m_up = t.upsample_nearest2d(m_t, self.cfg.f_m / mf);
        let merged = self.merge.forward(t, bind, scene_up, object_up, m_up);
        self.frame_dec.forward(t, bind, merged.frame_feature)
    }

    /// Tokenizes a clip (inference path, no gradients).
    pub fn tokenize(&self, clip: &VideoClip, content: ContentInput) -> Result<TokenBundle> {
        self.tokenize_with_pools(clip, content, self.cfg.n_t)
    }

    /// Tokenizes with an explicit number of motion working pools (the
    /// prediction pipeline chooses pools from the conditioning length).
    pub fn tokenize_with_pools(
        &self,
        clip: &VideoClip,
        content: ContentInput,
        n_t: usize,
    ) -> Result<TokenBundle> {
        self.check_clip(clip)?;
        if n_t == 0 || self.cfg.t % n_t != 0 {
            return Err(Error::InvalidConfig(format!(
                "T = {} not divisible by N_t = {n_t}",
                self.cfg.t
            )));
        }
        let (scene_in, object_in, motion_in) = self.encoder_inputs(clip, content)?;
        let t = Tape::new();
        let bind = self.params.bind(&t, false);
        let z_s = self.scene_enc.forward(&t, &bind, t.constant(scene_in));
        let z_o = self.object_enc.forward(&t, &bind, t.constant(object_in));
        let z_m = self.motion_enc.forward(&t, &bind, t.constant(motion_in), n_t);
        let (_, tok_s, _, _) = self.quantize_feature(&t, z_s, self.books.book(Component::Scene))?;
        let (_, tok_o, _, _) = self.quantize_feature(&t, z_o, self.books.book(Component::Object))?;
        let (_, tok_m, _, _) = self.quantize_feature(&t, z_m, self.books.book(Component::Motion))?;
        Ok(TokenBundle {
            scene: TokenGrid { indices: squeeze_first(&tok_s.indices), vocab: tok_s.vocab },
            object: TokenGrid { indices: squeeze_first(&tok_o.indices), vocab: tok_o.vocab },
            motion: tok_m,
        })
    }

    /// Encode-quantize-decode round trip (inference path).
    pub fn reconstruct(&self, clip: &VideoClip, content: ContentInput) -> Result<VideoClip> {
        self.check_clip(clip)?;
        let t = Tape::new();
        let bind = self.params.bind(&t, false);
        let fwd = self.forward_train(&t, &bind, clip, content)?;
        Ok(VideoClip::from_unchecked(from_net(&t.value(fwd.recon))))
    }

    fn bundle_features(
        &self,
        bundle: &TokenBundle,
    ) -> Result<(ArrayD<f64>, ArrayD<f64>, ArrayD<f64>)> {
        let (hs, ws) = self.cfg.scene_grid();
        let (ho, wo) = self.cfg.object_grid();
        let (hm, wm) = self.cfg.motion_grid();
        if bundle.scene.indices.shape() != [hs, ws] {
            return Err(Error::ShapeMismatch(format!(
                "scene tokens {:?} vs grid ({hs}, {ws})",
                bundle.scene.indices.shape()
            )));
        }
        if bundle.object.indices.shape() != [ho, wo] {
            return Err(Error::ShapeMismatch(format!(
                "object tokens {:?} vs grid ({ho}, {wo})",
                bundle.object.indices.shape()
            )));
        }
        if bundle.motion.indices.shape() != [self.cfg.t, hm, wm] {
            return Err(Error::ShapeMismatch(format!(
                "motion tokens {:?} vs grid ({}, {hm}, {wm})",
                bundle.motion.indices.shape(),
                self.cfg.t
            )));
        }
        let scene = lookup(&bundle.scene, self.books.book(Component::Scene))?; // (hs, ws, d)
        let object = lookup(&bundle.object, self.books.book(Component::Object))?;
        let motion = lookup(&bundle.motion, self.books.book(Component::Motion))?; // (T, hm, wm, d)
        let scene = sites_to_chw(&scene, 1, hs, ws, self.cfg.d);
        let object = sites_to_chw(&object, 1, ho, wo, self.cfg.d);
        let motion = sites_to_chw(&motion, self.cfg.t, hm, wm, self.cfg.d);
        Ok((scene, object, motion))
    }

    /// Decodes a token bundle to a clip.
    pub fn decode_bundle(&self, bundle: &TokenBundle) -> Result<VideoClip> {
        let (scene, object, motion) = self.bundle_features(bundle)?;
        Ok(self.decode_feature_arrays(scene, object, motion))
    }

    /// Decodes only frame `ti` of a token bundle.
    pub fn decode_bundle_frame(&self, bundle: &TokenBundle, ti: usize) -> Result<VideoClip> {
        if ti >= self.cfg.t {
            return Err(Error::InvalidParam(format!("frame {ti} out of range")));
        }
        let (scene, object, motion) = self.bundle_features(bundle)?;
        let t = Tape::new();
        let bind = self.params.bind(&t, false);
        let mf = self.cfg.merge_factor();
        let scene_up = t.upsample_nearest2d(t.constant(scene), self.cfg.f_s / mf);
        let object_up = t.upsample_nearest2d(t.constant(object), self.cfg.f_o / mf);
        let frame = self.decode_single(&t, &bind, scene_up, object_up, t.constant(motion), ti);
        Ok(VideoClip::from_unchecked(from_net(&t.value(frame))))
    }

    fn decode_feature_arrays(
        &self,
        scene: ArrayD<f64>,
        object: ArrayD<f64>,
        motion: ArrayD<f64>,
    ) -> VideoClip {
        let t = Tape::new();
        let bind = self.params.bind(&t, false);
        let out = self.decode_features(
            &t,
            &bind,
            t.constant(scene),
            t.constant(object),
            t.constant(motion),
        );
        VideoClip::from_unchecked(from_net(&t.value(out)))
    }

    /// Renders a component subset by zeroing the features of everything not
    /// selected (zeroed motion makes all frames identical by construction).
    pub fn decode_component(
        &self,
        bundle: &TokenBundle,
        select: ComponentSelect,
    ) -> Result<VideoClip> {
        let (scene, object, motion) = self.bundle_features(bundle)?;
        let zeros_like = |a: &ArrayD<f64>| ArrayD::zeros(a.raw_dim());
        let scene = if select.keeps_scene() { scene } else { zeros_like(&scene) };
        let object = if select.keeps_object() { object } else { zeros_like(&object) };
        let motion = if select.keeps_motion() { motion } else { zeros_like(&motion) };
        Ok(self.decode_feature_arrays(scene, object, motion))
    }

    /// Renders a mixed bundle: scene tokens from one clip, object and motion
    /// tokens from another.
    pub fn decode_manipulated(
        &self,
        object_motion_from: &TokenBundle,
        scene_from: &TokenBundle,
    ) -> Result<VideoClip> {
        let mixed = TokenBundle {
            scene: scene_from.scene.clone(),
            object: object_motion_from.object.clone(),
            motion: object_motion_from.motion.clone(),
        };
        self.decode_bundle(&mixed)
    }
}

/// `(T, H, W, C)` clip frames to `(T, C, H, W)` network layout.
pub fn to_net(frames: &Array4<f64>) -> ArrayD<f64> {
    frames
        .view()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
        .into_dyn()
}

/// `(T, C, H, W)` network layout back to `(T, H, W, C)` clip frames.
pub fn from_net(arr: &ArrayD<f64>) -> Array4<f64> {
    arr.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 network tensor")
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
}

/// `(N, h, w, D)`-ordered lookup output to `(N, D, h, w)` feature layout.
fn sites_to_chw(a: &ArrayD<f64>, n: usize, h: usize, w: usize, d: usize) -> ArrayD<f64> {
    a.view()
        .into_shape_with_order(IxDyn(&[n, h, w, d]))
        .expect("site grid shape")
        .permuted_axes(IxDyn(&[0, 3, 1, 2]))
        .as_standard_layout()
        .to_owned()
}

fn squeeze_first(a: &ArrayD<usize>) -> ArrayD<usize> {
    a.index_axis(Axis(0), 0).to_owned()
}

/// Site-major flattening of a value in `(N, D, h, w)` layout, for loss code
/// that wants `(P, D)` rows.
pub fn feature_sites(value: &ArrayD<f64>) -> Array2<f64> {
    let s = value.shape().to_vec();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    value
        .view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * h * w, d))
        .expect("feature sites")
}
