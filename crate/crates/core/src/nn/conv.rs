//! 2-D convolution, transposed convolution and spatial resampling ops.
//!
//! Convolutions run as im2col + GEMM. `im2col` gathers k×k patches at a grid
//! of strided positions; `col2im` is its adjoint (scatter-add). A stride-2
//! convolution and a stride-2 transposed convolution are adjoints of each
//! other through the same two helpers with the roles of the position grid and
//! the image swapped.

use super::tape::{Tape, Var};
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};

pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub(crate) fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

/// Gathers k×k patches of `img` (C, Hi, Wi) at `ph`×`pw` strided positions
/// into a `(C*k*k, ph*pw)` matrix. Out-of-bounds samples are zero.
fn im2col(
    img: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ph: usize,
    pw: usize,
) -> Array2<f64> {
    let (c, hi, wi) = img.dim();
    let mut col = Array2::<f64>::zeros((c * k * k, ph * pw));
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let mut out_row = col.row_mut(row);
                for oh in 0..ph {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= hi as isize {
                        continue;
                    }
                    for ow in 0..pw {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= wi as isize {
                            continue;
                        }
                        out_row[oh * pw + ow] = img[[ci, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds a `(C*k*k, ph*pw)` matrix back into a
/// `(C, Hi, Wi)` image.
fn col2im(
    col: &ArrayView2<f64>,
    c: usize,
    hi: usize,
    wi: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ph: usize,
    pw: usize,
) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((c, hi, wi));
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let col_row = col.row(row);
                for oh in 0..ph {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= hi as isize {
                        continue;
                    }
                    for ow in 0..pw {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= wi as isize {
                            continue;
                        }
                        img[[ci, ih as usize, iw as usize]] += col_row[oh * pw + ow];
                    }
                }
            }
        }
    }
    img
}

fn view3<S: ndarray::Data<Elem = f64>>(
    v: &ndarray::ArrayBase<S, ndarray::IxDyn>,
    n: usize,
) -> ArrayView3<'_, f64> {
    v.index_axis(Axis(0), n).into_dimensionality().unwrap()
}

impl Tape {
    /// `x (N, C, H, W)` ∗ `w (O, C, k, k)` + `b (O)`, stride `s`, zero pad `p`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.shared(x), self.shared(w), self.shared(b));
        let (n, c, h, wid) = {
            let s = vx.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (o, cw, k) = {
            let s = vw.shape();
            (s[0], s[1], s[2])
        };
        assert_eq!(c, cw, "conv2d channel mismatch");
        let (oh, ow) = (conv_out_size(h, k, stride, pad), conv_out_size(wid, k, stride, pad));
        let w_mat = vw
            .view()
            .into_shape_with_order((o, c * k * k))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
        for i in 0..n {
            let col = im2col(&view3(&vx, i), k, stride, pad, oh, ow);
            let mut y = w_mat.dot(&col);
            for (ci, mut row) in y.outer_iter_mut().enumerate() {
                row += vb[[ci]];
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((o, oh, ow)).unwrap().into_dyn());
        }
        self.op(
            &[x, w, b],
            out,
            Box::new(move |g| {
                let wt = w_mat.t();
                let mut dx = ArrayD::zeros(vx.raw_dim());
                let mut dw = Array2::<f64>::zeros((o, c * k * k));
                let mut db = ndarray::Array1::<f64>::zeros(o);
                for i in 0..n {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((o, oh * ow))
                        .unwrap()
                        .to_owned();
                    let col = im2col(&view3(&vx, i), k, stride, pad, oh, ow);
                    dw += &gi.dot(&col.t());
                    db += &gi.sum_axis(Axis(1));
                    let dcol = wt.dot(&gi);
                    let dxi = col2im(&dcol.view(), c, h, wid, k, stride, pad, oh, ow);
                    dx.index_axis_mut(Axis(0), i).assign(&dxi.into_dyn());
                }
                vec![
                    (x, dx),
                    (w, dw.into_shape_with_order((o, c, k, k)).unwrap().into_dyn()),
                    (b, db.into_dyn()),
                ]
            }),
        )
    }

    /// Transposed convolution: `x (N, C, H, W)`, `w (C, O, k, k)`, `b (O)`.
    /// Output is `(N, O, (H-1)s - 2p + k, ...)`; with k=4, s=2, p=1 this
    /// doubles the spatial size.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.shared(x), self.shared(w), self.shared(b));
        let (n, c, h, wid) = {
            let s = vx.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (cw, o, k) = {
            let s = vw.shape();
            (s[0], s[1], s[2])
        };
        assert_eq!(c, cw, "conv_transpose2d channel mismatch");
        let oh = conv_transpose_out_size(h, k, stride, pad);
        let ow = conv_transpose_out_size(wid, k, stride, pad);
        let w_mat = vw
            .view()
            .into_shape_with_order((c, o * k * k))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
        for i in 0..n {
            let x_mat = vx
                .index_axis(Axis(0), i)
                .into_shape_with_order((c, h * wid))
                .unwrap()
                .to_owned();
            let col = w_mat.t().dot(&x_mat);
            let mut y = col2im(&col.view(), o, oh, ow, k, stride, pad, h, wid);
            for (ci, mut plane) in y.outer_iter_mut().enumerate() {
                plane += vb[[ci]];
            }
            out.index_axis_mut(Axis(0), i).assign(&y.into_dyn());
        }
        self.op(
            &[x, w, b],
            out,
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(vx.raw_dim());
                let mut dw = Array2::<f64>::zeros((c, o * k * k));
                let mut db = ndarray::Array1::<f64>::zeros(o);
                for i in 0..n {
                    let gi3 = view3(g, i);
                    let dcol = im2col(&gi3, k, stride, pad, h, wid);
                    let x_mat = vx
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((c, h * wid))
                        .unwrap()
                        .to_owned();
                    dx.index_axis_mut(Axis(0), i).assign(
                        &w_mat
                            .dot(&dcol)
                            .into_shape_with_order((c, h, wid))
                            .unwrap()
                            .into_dyn(),
                    );
                    dw += &x_mat.dot(&dcol.t());
                    for (ci, plane) in gi3.outer_iter().enumerate() {
                        db[ci] += plane.sum();
                    }
                }
                vec![
                    (x, dx),
                    (w, dw.into_shape_with_order((c, o, k, k)).unwrap().into_dyn()),
                    (b, db.into_dyn()),
                ]
            }),
        )
    }

    /// Nearest-neighbor upsampling of `(N, C, H, W)` by integer factor `f`.
    pub fn upsample_nearest2d(&self, x: Var, f: usize) -> Var {
        assert!(f >= 1);
        if f == 1 {
            return x;
        }
        let vx = self.shared(x);
        let (n, c, h, w) = {
            let s = vx.shape();
            (s[0], s[1], s[2], s[3])
        };
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h * f, w * f]));
        for i in 0..n {
            for ci in 0..c {
                for oh in 0..h * f {
                    for ow in 0..w * f {
                        out[[i, ci, oh, ow]] = vx[[i, ci, oh / f, ow / f]];
                    }
                }
            }
        }
        self.op(
            &[x],
            out,
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(vx.raw_dim());
                for i in 0..n {
                    for ci in 0..c {
                        for oh in 0..h * f {
                            for ow in 0..w * f {
                                dx[[i, ci, oh / f, ow / f]] += g[[i, ci, oh, ow]];
                            }
                        }
                    }
                }
                vec![(x, dx)]
            }),
        )
    }

    /// Bilinear 2x upsampling of `(N, C, H, W)` with half-pixel sample
    /// centers: source coordinate of output index `o` is `(o + 0.5)/2 - 0.5`,
    /// with edge clamping.
    pub fn upsample_bilinear2x(&self, x: Var) -> Var {
        let vx = self.shared(x);
        let (n, c, h, w) = {
            let s = vx.shape();
            (s[0], s[1], s[2], s[3])
        };
        let row_tab = bilinear_axis_table(h);
        let col_tab = bilinear_axis_table(w);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for i in 0..n {
            for ci in 0..c {
                for (oh, &(r0, r1, tr)) in row_tab.iter().enumerate() {
                    for (ow, &(c0, c1, tc)) in col_tab.iter().enumerate() {
                        let v00 = vx[[i, ci, r0, c0]];
                        let v01 = vx[[i, ci, r0, c1]];
                        let v10 = vx[[i, ci, r1, c0]];
                        let v11 = vx[[i, ci, r1, c1]];
                        out[[i, ci, oh, ow]] = (1.0 - tr) * ((1.0 - tc) * v00 + tc * v01)
                            + tr * ((1.0 - tc) * v10 + tc * v11);
                    }
                }
            }
        }
        let (rt, ct) = (row_tab.clone(), col_tab.clone());
        self.op(
            &[x],
            out,
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(vx.raw_dim());
                for i in 0..n {
                    for ci in 0..c {
                        for (oh, &(r0, r1, tr)) in rt.iter().enumerate() {
                            for (ow, &(c0, c1, tc)) in ct.iter().enumerate() {
                                let gv = g[[i, ci, oh, ow]];
                                dx[[i, ci, r0, c0]] += (1.0 - tr) * (1.0 - tc) * gv;
                                dx[[i, ci, r0, c1]] += (1.0 - tr) * tc * gv;
                                dx[[i, ci, r1, c0]] += tr * (1.0 - tc) * gv;
                                dx[[i, ci, r1, c1]] += tr * tc * gv;
                            }
                        }
                    }
                }
                vec![(x, dx)]
            }),
        )
    }
}

/// For each output index of a 2x bilinear upsample along one axis of length
/// `len`, the two source indices and the interpolation weight of the second.
pub(crate) fn bilinear_axis_table(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let s0 = src.floor();
            let t = src - s0;
            let i0 = (s0.max(0.0) as usize).min(len - 1);
            let i1 = ((s0 + 1.0).max(0.0) as usize).min(len - 1);
            (i0, i1, t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::grad_check;
    use ndarray::Array4;

    #[test]
    fn conv_output_shapes() {
        let t = Tape::new();
        let x = t.constant(Array4::<f64>::zeros((2, 3, 8, 8)).into_dyn());
        let w = t.constant(Array4::<f64>::zeros((5, 3, 3, 3)).into_dyn());
        let b = t.constant(ndarray::Array1::<f64>::zeros(5).into_dyn());
        assert_eq!(t.shape(t.conv2d(x, w, b, 1, 1)), vec![2, 5, 8, 8]);
        assert_eq!(t.shape(t.conv2d(x, w, b, 2, 1)), vec![2, 5, 4, 4]);
        let wt = t.constant(Array4::<f64>::zeros((3, 5, 4, 4)).into_dyn());
        let bt = t.constant(ndarray::Array1::<f64>::zeros(5).into_dyn());
        assert_eq!(t.shape(t.conv_transpose2d(x, wt, bt, 2, 1)), vec![2, 5, 16, 16]);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        // 1x1 batch, stride 2: compare one output element against the naive sum.
        let t = Tape::new();
        let x_arr = Array4::from_shape_fn((1, 2, 5, 5), |(_, c, i, j)| {
            (c as f64 + 1.0) * (i as f64 * 5.0 + j as f64) * 0.01
        });
        let w_arr = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| {
            0.1 * (c as f64 - 0.5) + 0.01 * (i as f64 - j as f64)
        });
        let x = t.constant(x_arr.clone().into_dyn());
        let w = t.constant(w_arr.clone().into_dyn());
        let b = t.constant(ndarray::arr1(&[0.25]).into_dyn());
        let y = t.value(t.conv2d(x, w, b, 2, 1));
        // Output position (1, 1) reads input rows/cols 1..4.
        let mut expect = 0.25;
        for c in 0..2 {
            for kh in 0..3 {
                for kw in 0..3 {
                    expect += x_arr[[0, c, 2 + kh - 1, 2 + kw - 1]] * w_arr[[0, c, kh, kw]];
                }
            }
        }
        assert!((y[[0, 0, 1, 1]] - expect).abs() < 1e-12);
    }

    #[test]
    fn conv_grads() {
        grad_check("conv2d", &[vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |t, xs| {
            let y = t.conv2d(xs[0], xs[1], xs[2], 2, 1);
            t.sum_all(t.square(y))
        });
        grad_check(
            "conv_transpose2d",
            &[vec![1, 3, 4, 4], vec![3, 2, 4, 4], vec![2]],
            |t, xs| {
                let y = t.conv_transpose2d(xs[0], xs[1], xs[2], 2, 1);
                t.sum_all(t.square(y))
            },
        );
    }

    #[test]
    fn upsample_grads() {
        grad_check("nearest", &[vec![1, 2, 3, 3]], |t, xs| {
            let y = t.upsample_nearest2d(xs[0], 2);
            t.sum_all(t.square(y))
        });
        grad_check("bilinear", &[vec![1, 2, 4, 4]], |t, xs| {
            let y = t.upsample_bilinear2x(xs[0]);
            t.sum_all(t.square(y))
        });
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let t = Tape::new();
        let x = t.constant(
            Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (2 * i + j) as f64).into_dyn(),
        );
        let y = t.value(t.upsample_nearest2d(x, 2));
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 0, 1]], 0.0);
        assert_eq!(y[[0, 0, 1, 0]], 0.0);
        assert_eq!(y[[0, 0, 2, 3]], 3.0);
    }

    #[test]
    fn bilinear_preserves_constant_and_edges() {
        let t = Tape::new();
        let x = t.constant(Array4::from_elem((1, 1, 3, 3), 0.7).into_dyn());
        let y = t.value(t.upsample_bilinear2x(x));
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        // Corners map to corners under half-pixel centers.
        let x2 = t.constant(
            Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (2 * i + j) as f64).into_dyn(),
        );
        let y2 = t.value(t.upsample_bilinear2x(x2));
        assert_eq!(y2[[0, 0, 0, 0]], 0.0);
        assert_eq!(y2[[0, 0, 3, 3]], 3.0);
    }
}
