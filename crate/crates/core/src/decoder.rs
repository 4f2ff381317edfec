//! The merge module and the time-independent frame decoder.
//!
//! The merge module computes a per-position convex weight in (0, 1) from the
//! scene, object and current-frame motion features at three spatial scales,
//! then blends scene and object features under it. The frame decoder maps
//! one merged feature grid back to a full-resolution frame; it sees nothing
//! from any other frame, so frames can be decoded independently and in any
//! order.

use crate::nn::layers::{silu, Conv2d, ConvTranspose2d, Linear, ResBlock, ResStack};
use crate::nn::{Binding, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Applies a linear map per spatial position of a `(1, C, H, W)` feature.
fn linear_per_site(t: &Tape, lin: &Linear, bind: &Binding, x: Var) -> Var {
    let shape = t.shape(x);
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let flat = t.reshape(x, &[c, h * w]);
    let site_major = t.permute(flat, &[1, 0]); // (h*w, c)
    let mapped = lin.forward(t, bind, site_major); // (h*w, c')
    let c_out = lin.out_dim;
    let back = t.permute(mapped, &[1, 0]);
    t.reshape(back, &[1, c_out, h, w])
}

/// Multi-scale merge gate. `F1`, `F2`, `F3` are linear maps `3D -> D` at
/// full, half and quarter resolution; `down2`/`down4` are shared stride-2
/// reducers applied to each component; `up2` is bilinear; the final weight
/// is `sigmoid(F(w1 + up2(w2 + up2(w3))))`.
#[derive(Clone)]
pub struct MergeModule {
    f1: Linear,
    f2: Linear,
    f3: Linear,
    f: Linear,
    down2: Conv2d,
    down4_a: Conv2d,
    down4_b: Conv2d,
    pub d: usize,
}

/// Merge output: the frame feature and the gate weights (both `(1, D, h, w)`).
pub struct MergeOut {
    pub frame_feature: Var,
    pub weights: Var,
}

impl MergeModule {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            f1: Linear::new(ps, &format!("{name}.f1"), 3 * d, d, true, rng),
            f2: Linear::new(ps, &format!("{name}.f2"), 3 * d, d, true, rng),
            f3: Linear::new(ps, &format!("{name}.f3"), 3 * d, d, true, rng),
            f: Linear::new(ps, &format!("{name}.f"), d, d, true, rng),
            down2: Conv2d::new(ps, &format!("{name}.down2"), d, d, 3, 2, 1, rng),
            down4_a: Conv2d::new(ps, &format!("{name}.down4a"), d, d, 3, 2, 1, rng),
            down4_b: Conv2d::new(ps, &format!("{name}.down4b"), d, d, 3, 2, 1, rng),
            d,
        }
    }

    /// Blends `scene` and `object` under the gate driven by `motion_t`.
    /// All inputs are `(1, D, h, w)` on the same grid; `h` and `w` must be
    /// divisible by 4.
    pub fn forward(&self, t: &Tape, bind: &Binding, scene: Var, object: Var, motion_t: Var) -> MergeOut {
        let shape = t.shape(scene);
        assert_eq!(shape, t.shape(object), "merge: scene/object misaligned");
        assert_eq!(shape, t.shape(motion_t), "merge: scene/motion misaligned");
        let (h, w) = (shape[2], shape[3]);
        assert!(h % 4 == 0 && w % 4 == 0, "merge grid must be divisible by 4");

        let cat = |t: &Tape, o: Var, s: Var, m: Var| t.concat(&[o, s, m], 1);
        let w1 = linear_per_site(t, &self.f1, bind, cat(t, object, scene, motion_t));

        let d2 = |x: Var| self.down2.forward(t, bind, x);
        let w2 = linear_per_site(
            t,
            &self.f2,
            bind,
            cat(t, d2(object), d2(scene), d2(motion_t)),
        );

        let d4 = |x: Var| self.down4_b.forward(t, bind, self.down4_a.forward(t, bind, x));
        let w3 = linear_per_site(
            t,
            &self.f3,
            bind,
            cat(t, d4(object), d4(scene), d4(motion_t)),
        );

        let w4 = t.add(w2, t.upsample_bilinear2x(w3));
        let pre = linear_per_site(t, &self.f, bind, t.add(w1, t.upsample_bilinear2x(w4)));
        let weights = t.sigmoid(pre);

        let ones = t.constant(ndarray::ArrayD::from_elem(
            ndarray::IxDyn(&t.shape(weights)),
            1.0,
        ));
        let inv = t.sub(ones, weights);
        let frame_feature = t.add(t.mul(scene, weights), t.mul(object, inv));
        MergeOut { frame_feature, weights }
    }
}

/// Decodes one merged frame feature to a `(1, C, H, W)` frame in `[0, 1]`:
/// residual stack, stride-2 transposed convolutions with a residual block
/// after each upsampling, bounded output.
#[derive(Clone)]
pub struct FrameDecoder {
    res: ResStack,
    ups: Vec<(ConvTranspose2d, ResBlock)>,
    to_out: Conv2d,
}

impl FrameDecoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        out_channels: usize,
        factor: usize,
        residual_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(factor.is_power_of_two() && factor >= 2);
        let res = ResStack::new(ps, &format!("{name}.res"), d, residual_depth, rng);
        let stages = factor.trailing_zeros() as usize;
        let mut ups = Vec::with_capacity(stages);
        let mut ch = d;
        for i in 0..stages {
            let out = (ch / 2).max(8);
            let up = ConvTranspose2d::new(ps, &format!("{name}.up{i}"), ch, out, 4, 2, 1, rng);
            let refine = ResBlock::new(ps, &format!("{name}.refine{i}"), out, rng);
            ups.push((up, refine));
            ch = out;
        }
        let to_out = Conv2d::new(ps, &format!("{name}.to_out"), ch, out_channels, 3, 1, 1, rng);
        Self { res, ups, to_out }
    }

    pub fn forward(&self, t: &Tape, bind: &Binding, feature: Var) -> Var {
        let mut x = self.res.forward(t, bind, feature);
        for (up, refine) in &self.ups {
            x = silu(t, up.forward(t, bind, x));
            x = refine.forward(t, bind, x);
        }
        let out = self.to_out.forward(t, bind, x);
        // Bounded map onto [0, 1]; the clamp is a no-op mathematically but
        // pins the contract at the boundary.
        t.clamp(t.sigmoid(out), 0.0, 1.0)
    }
}

/// Component subsets that can be rendered in isolation by zeroing the
/// features of everything unselected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentSelect {
    Scene,
    Object,
    ObjectMotion,
    SceneMotion,
}

impl std::str::FromStr for ComponentSelect {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "scene" => Ok(Self::Scene),
            "object" => Ok(Self::Object),
            "object+motion" => Ok(Self::ObjectMotion),
            "scene+motion" => Ok(Self::SceneMotion),
            other => Err(crate::error::Error::InvalidSelector(format!(
                "unknown component selector {other:?} (expected scene, object, object+motion or scene+motion)"
            ))),
        }
    }
}

impl ComponentSelect {
    pub fn keeps_scene(&self) -> bool {
        matches!(self, Self::Scene | Self::SceneMotion)
    }

    pub fn keeps_object(&self) -> bool {
        matches!(self, Self::Object | Self::ObjectMotion)
    }

    pub fn keeps_motion(&self) -> bool {
        matches!(self, Self::ObjectMotion | Self::SceneMotion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn feature(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[1, d, h, w]), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zeroed_gate_gives_half_half_mix() {
        // With every merge parameter zero, the pre-sigmoid output is 0, so
        // w = 0.5 and z = (s + o) / 2.
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let merge = MergeModule::new(&mut ps, "merge", 4, &mut rng);
        for name in ps.names().cloned().collect::<Vec<_>>() {
            ps.get_mut(&name).fill(0.0);
        }
        let t = Tape::new();
        let bind = ps.bind(&t, false);
        let s_arr = feature(&mut rng, 4, 8, 8);
        let o_arr = feature(&mut rng, 4, 8, 8);
        let m_arr = feature(&mut rng, 4, 8, 8);
        let out = merge.forward(
            &t,
            &bind,
            t.constant(s_arr.clone()),
            t.constant(o_arr.clone()),
            t.constant(m_arr),
        );
        let wv = t.value(out.weights);
        assert!(wv.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let z = t.value(out.frame_feature);
        let expect = (&s_arr + &o_arr) * 0.5;
        for (a, b) in z.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_scene_object_passes_through() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let merge = MergeModule::new(&mut ps, "merge", 4, &mut rng);
        let t = Tape::new();
        let bind = ps.bind(&t, false);
        let s_arr = feature(&mut rng, 4, 8, 8);
        let m_arr = feature(&mut rng, 4, 8, 8);
        let out = merge.forward(
            &t,
            &bind,
            t.constant(s_arr.clone()),
            t.constant(s_arr.clone()),
            t.constant(m_arr),
        );
        let z = t.value(out.frame_feature);
        for (a, b) in z.iter().zip(s_arr.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_lie_strictly_inside_unit_interval() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let merge = MergeModule::new(&mut ps, "merge", 6, &mut rng);
        let t = Tape::new();
        let bind = ps.bind(&t, false);
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let out = merge.forward(
                &t,
                &bind,
                t.constant(feature(&mut r, 6, 8, 8)),
                t.constant(feature(&mut r, 6, 8, 8)),
                t.constant(feature(&mut r, 6, 8, 8)),
            );
            let wv = t.value(out.weights);
            assert!(wv.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn output_is_convex_combination() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let merge = MergeModule::new(&mut ps, "merge", 4, &mut rng);
        let t = Tape::new();
        let bind = ps.bind(&t, false);
        let s_arr = feature(&mut rng, 4, 8, 8);
        let o_arr = feature(&mut rng, 4, 8, 8);
        let out = merge.forward(
            &t,
            &bind,
            t.constant(s_arr.clone()),
            t.constant(o_arr.clone()),
            t.constant(feature(&mut rng, 4, 8, 8)),
        );
        let z = t.value(out.frame_feature);
        for ((zv, sv), ov) in z.iter().zip(s_arr.iter()).zip(o_arr.iter()) {
            let (lo, hi) = (sv.min(*ov), sv.max(*ov));
            assert!(*zv >= lo - 1e-12 && *zv <= hi + 1e-12);
        }
    }

    #[test]
    fn frame_decoder_shape_and_range() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = FrameDecoder::new(&mut ps, "dec", 8, 3, 4, 1, &mut rng);
        let t = Tape::new();
        let bind = ps.bind(&t, false);
        let x = t.constant(feature(&mut rng, 8, 4, 4));
        let y = t.value(dec.forward(&t, &bind, x));
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Determinism.
        let y2 = t.value(dec.forward(&t, &bind, x));
        assert_eq!(y, y2);
    }

    #[test]
    fn selector_parsing() {
        use std::str::FromStr;
        assert_eq!(ComponentSelect::from_str("scene").unwrap(), ComponentSelect::Scene);
        assert_eq!(
            ComponentSelect::from_str("object+motion").unwrap(),
            ComponentSelect::ObjectMotion
        );
        assert!(ComponentSelect::from_str("background").is_err());
    }
}
