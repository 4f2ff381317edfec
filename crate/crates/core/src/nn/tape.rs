//! Reverse-mode automatic differentiation over dynamically shaped `f64`
//! arrays.
//!
//! A [`Tape`] records a computation as it runs. Every op returns a [`Var`]
//! handle; calling [`Tape::backward`] on a scalar result walks the recorded
//! ops in reverse and accumulates gradients for every node that requires
//! them. Values are stored as shared arrays so backward closures can capture
//! what they need without copying.

use ndarray::{ArcArray, Array2, ArrayD, Axis, IxDyn};
use std::cell::RefCell;

pub type Shared = ArcArray<f64, IxDyn>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(Var, ArrayD<f64>)>>;

struct Node {
    value: Shared,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Owned copy of a node's value.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.to_owned()
    }

    /// Shared handle to a node's value (cheap clone).
    pub fn shared(&self, v: Var) -> Shared {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: ArrayD<f64>, needs_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: value.into_shared(), needs_grad, backward });
        Var(nodes.len() - 1)
    }

    /// Value that takes no gradient.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Differentiable input (parameter or tensor we want gradients for).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Registers `value` as the output of an op over `parents`.
    ///
    /// `backward` maps the incoming gradient to per-parent contributions; it
    /// is only retained when at least one parent requires gradients.
    pub(crate) fn op(&self, parents: &[Var], value: ArrayD<f64>, backward: BackwardFn) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push(value, needs, if needs { Some(backward) } else { None })
    }

    /// Backpropagates from `root`, seeding with an all-ones gradient.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(f) = nodes[id].backward.as_ref() {
                let g = grads[id].take().expect("gradient present");
                for (parent, contribution) in f(&g) {
                    if !nodes[parent.0].needs_grad {
                        continue;
                    }
                    match &mut grads[parent.0] {
                        Some(acc) => *acc += &contribution,
                        slot => *slot = Some(contribution),
                    }
                }
                // Interior gradients are dropped once consumed; only leaves
                // (no backward fn) keep theirs for extraction.
            }
        }
        Gradients { grads }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

impl Tape {
    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: shape {sa:?} vs {sb:?}");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = &va + &vb;
        self.op(&[a, b], out, Box::new(move |g| vec![(a, g.clone()), (b, g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = &va - &vb;
        self.op(&[a, b], out, Box::new(move |g| vec![(a, g.clone()), (b, -g)]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = &va * &vb;
        self.op(
            &[a, b],
            out,
            Box::new(move |g| vec![(a, g * &vb), (b, g * &va)]),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = &va / &vb;
        let y = out.to_shared();
        self.op(
            &[a, b],
            out,
            Box::new(move |g| {
                let da = g / &vb;
                let mut db = g.to_owned();
                ndarray::Zip::from(&mut db).and(&y).and(&vb).for_each(|d, &q, &bv| {
                    *d *= -q / bv;
                });
                vec![(a, da), (b, db)]
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let va = self.shared(a);
        let out = -&va;
        self.op(&[a], out, Box::new(move |g| vec![(a, -g)]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let va = self.shared(a);
        let out = &va + s;
        self.op(&[a], out, Box::new(move |g| vec![(a, g.clone())]))
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let va = self.shared(a);
        let out = &va * s;
        self.op(&[a], out, Box::new(move |g| vec![(a, g * s)]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x.max(0.0));
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![(a, dx)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.shared(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let y = out.to_shared();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &s| *d *= s * (1.0 - s));
                vec![(a, dx)]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.shared(a).mapv(f64::tanh);
        let y = out.to_shared();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &t| *d *= 1.0 - t * t);
                vec![(a, dx)]
            }),
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let va = self.shared(a);
        let out = va.mapv(|x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()));
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    let u = C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                    *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                vec![(a, dx)]
            }),
        )
    }

    /// `1 / sqrt(a + eps)`, elementwise.
    pub fn rsqrt(&self, a: Var, eps: f64) -> Var {
        let out = self.shared(a).mapv(|x| 1.0 / (x + eps).sqrt());
        let y = out.to_shared();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &r| *d *= -0.5 * r * r * r);
                vec![(a, dx)]
            }),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x * x);
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| *d *= 2.0 * x);
                vec![(a, dx)]
            }),
        )
    }

    /// Clamps values to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x.clamp(lo, hi));
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x < lo || x > hi {
                        *d = 0.0;
                    }
                });
                vec![(a, dx)]
            }),
        )
    }

    /// Forward value of `quantized`; gradients flow to `raw` unchanged.
    ///
    /// Equivalent to `raw + stop_gradient(quantized - raw)`.
    pub fn straight_through(&self, raw: Var, quantized: &ArrayD<f64>) -> Var {
        assert_eq!(self.shape(raw), quantized.shape(), "straight_through shapes");
        self.op(
            &[raw],
            quantized.clone(),
            Box::new(move |g| vec![(raw, g.clone())]),
        )
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl Tape {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.shared(a);
        let old_shape: Vec<usize> = va.shape().to_vec();
        let out = va
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {old_shape:?} -> {shape:?}"));
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let dg = g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward");
                vec![(a, dg)]
            }),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let va = self.shared(a);
        let out = va
            .to_owned()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        // Inverse permutation for the gradient.
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let dg = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                vec![(a, dg)]
            }),
        )
    }

    pub fn slice_axis(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.shared(a);
        let full = va.shape().to_vec();
        let out = va
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&full));
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![(a, dx)]
            }),
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Shared> = parts.iter().map(|&p| self.shared(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let parents: Vec<Var> = parts.to_vec();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.op(
            &parents.clone(),
            out,
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(parents.len());
                let mut offset = 0;
                for (&p, &len) in parents.iter().zip(lens.iter()) {
                    let piece = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    grads.push((p, piece));
                    offset += len;
                }
                grads
            }),
        )
    }

    /// Broadcasts `a` to `shape`. Ranks must match; each axis is either equal
    /// or 1 in `a`.
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.shared(a);
        let src_shape = va.shape().to_vec();
        assert_eq!(src_shape.len(), shape.len(), "broadcast rank mismatch");
        let expanded: Vec<usize> = src_shape
            .iter()
            .zip(shape.iter())
            .enumerate()
            .filter_map(|(i, (&s, &d))| {
                assert!(s == d || s == 1, "cannot broadcast axis {i}: {s} -> {d}");
                (s == 1 && d != 1).then_some(i)
            })
            .collect();
        let out = va.broadcast(IxDyn(shape)).expect("broadcast").to_owned();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dg = g.clone();
                for &ax in &expanded {
                    dg = dg.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                }
                vec![(a, dg)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl Tape {
    /// Sum over all elements, yielding a 0-d array.
    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.shared(a);
        let shape = va.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), va.sum());
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let scale = g[[]];
                vec![(a, ArrayD::from_elem(IxDyn(&shape), scale))]
            }),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.shape(a).iter().product::<usize>() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums along `axis`, keeping the axis with length 1.
    pub fn sum_axis_keep(&self, a: Var, axis: usize) -> Var {
        let va = self.shared(a);
        let full = va.shape().to_vec();
        let out = va.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let dg = g.broadcast(IxDyn(&full)).expect("sum backward").to_owned();
                vec![(a, dg)]
            }),
        )
    }

    pub fn mean_axis_keep(&self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis_keep(a, axis);
        self.mul_scalar(s, 1.0 / n)
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

fn as2(v: &Shared) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("2-d array")
}

impl Tape {
    /// `(M, K) x (K, N) -> (M, N)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = as2(&va).dot(&as2(&vb)).into_dyn();
        self.op(
            &[a, b],
            out,
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let da = g2.dot(&as2(&vb).t()).into_dyn();
                let db = as2(&va).t().dot(&g2).into_dyn();
                vec![(a, da), (b, db)]
            }),
        )
    }

    /// Batched matmul: `(B, M, K) x (B, K, N) -> (B, M, N)`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        assert_eq!(sa.len(), 3, "bmm lhs rank");
        assert_eq!(sb.len(), 3, "bmm rhs rank");
        assert_eq!(sa[0], sb[0], "bmm batch");
        assert_eq!(sa[2], sb[1], "bmm inner dim");
        let (batch, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
        for i in 0..batch {
            let ai = va.index_axis(Axis(0), i);
            let bi = vb.index_axis(Axis(0), i);
            let a2: ndarray::ArrayView2<f64> = ai.into_dimensionality().unwrap();
            let b2: ndarray::ArrayView2<f64> = bi.into_dimensionality().unwrap();
            out.index_axis_mut(Axis(0), i)
                .assign(&a2.dot(&b2).into_dyn());
        }
        self.op(
            &[a, b],
            out,
            Box::new(move |g| {
                let mut da = ArrayD::zeros(va.raw_dim());
                let mut db = ArrayD::zeros(vb.raw_dim());
                for i in 0..batch {
                    let gi: ndarray::ArrayView2<f64> = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality()
                        .unwrap();
                    let ai: ndarray::ArrayView2<f64> =
                        va.index_axis(Axis(0), i).into_dimensionality().unwrap();
                    let bi: ndarray::ArrayView2<f64> =
                        vb.index_axis(Axis(0), i).into_dimensionality().unwrap();
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bi.t()).into_dyn());
                    db.index_axis_mut(Axis(0), i)
                        .assign(&ai.t().dot(&gi).into_dyn());
                }
                vec![(a, da), (b, db)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Softmax family and indexing
// ---------------------------------------------------------------------------

/// Applies `f` to each final-axis lane of a copy of `v`.
fn map_lanes(v: &Shared, f: impl Fn(&mut [f64])) -> ArrayD<f64> {
    let mut out = v.to_owned();
    let last = out.ndim() - 1;
    for mut lane in out.lanes_mut(Axis(last)) {
        f(lane.as_slice_mut().expect("contiguous lane"));
    }
    out
}

impl Tape {
    /// Numerically stable softmax along the last axis.
    pub fn softmax_lastdim(&self, a: Var) -> Var {
        let va = self.shared(a);
        let out = map_lanes(&va, |lane| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in lane.iter_mut() {
                *x /= z;
            }
        });
        let y = out.to_shared();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                // dx = y * (g - sum(g * y, last))
                let last = y.ndim() - 1;
                let mut dx = g.clone();
                let y_owned = y.to_owned();
                let dot = (&dx * &y_owned).sum_axis(Axis(last)).insert_axis(Axis(last));
                dx -= &dot.broadcast(y.raw_dim()).unwrap().to_owned();
                dx *= &y_owned;
                vec![(a, dx)]
            }),
        )
    }

    /// Numerically stable log-softmax along the last axis.
    pub fn log_softmax_lastdim(&self, a: Var) -> Var {
        let va = self.shared(a);
        let out = map_lanes(&va, |lane| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in lane.iter_mut() {
                *x -= lse;
            }
        });
        let y = out.to_shared();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                // dx = g - softmax * sum(g, last)
                let last = y.ndim() - 1;
                let softmax = y.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(last)).insert_axis(Axis(last));
                let dx = g - &(softmax * &gsum.broadcast(y.raw_dim()).unwrap());
                vec![(a, dx)]
            }),
        )
    }

    /// Selects rows of a `(R, ...)` array: `out[i] = a[ids[i]]`.
    /// Backward scatter-adds, so repeated ids accumulate.
    pub fn select_rows(&self, a: Var, ids: &[usize]) -> Var {
        let va = self.shared(a);
        let rows = va.shape()[0];
        for &id in ids {
            assert!(id < rows, "row index {id} out of range {rows}");
        }
        let mut shape = va.shape().to_vec();
        shape[0] = ids.len();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (i, &id) in ids.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&va.index_axis(Axis(0), id));
        }
        let ids = ids.to_vec();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(va.raw_dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dx.index_axis_mut(Axis(0), id);
                    row += &g.index_axis(Axis(0), i);
                }
                vec![(a, dx)]
            }),
        )
    }

    /// Picks one value per row of a `(L, V)` array: `out[i] = a[i, ids[i]]`.
    pub fn pick_per_row(&self, a: Var, ids: &[usize]) -> Var {
        let va = self.shared(a);
        let v2 = as2(&va);
        let (l, v) = v2.dim();
        assert_eq!(ids.len(), l, "one index per row");
        let mut out = ArrayD::zeros(IxDyn(&[l]));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "class index {id} out of range {v}");
            out[[i]] = v2[[i, id]];
        }
        let ids = ids.to_vec();
        self.op(
            &[a],
            out,
            Box::new(move |g| {
                let mut dx = Array2::<f64>::zeros((l, v));
                for (i, &id) in ids.iter().enumerate() {
                    dx[[i, id]] = g[[i]];
                }
                vec![(a, dx.into_dyn())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::grad_check;
    use ndarray::{Array1, Array3};

    #[test]
    fn add_mul_grads() {
        grad_check("add", &[vec![2, 3], vec![2, 3]], |t, xs| {
            let s = t.add(xs[0], xs[1]);
            t.sum_all(s)
        });
        grad_check("mul", &[vec![2, 3], vec![2, 3]], |t, xs| {
            let s = t.mul(xs[0], xs[1]);
            t.sum_all(s)
        });
        grad_check("div", &[vec![2, 3], vec![2, 3]], |t, xs| {
            let denom = t.add_scalar(t.square(xs[1]), 1.5);
            let s = t.div(xs[0], denom);
            t.sum_all(s)
        });
    }

    #[test]
    fn activation_grads() {
        grad_check("sigmoid", &[vec![3, 4]], |t, xs| {
            let y = t.sigmoid(xs[0]);
            t.sum_all(t.square(y))
        });
        grad_check("tanh", &[vec![3, 4]], |t, xs| {
            let y = t.tanh(xs[0]);
            t.sum_all(t.square(y))
        });
        grad_check("gelu", &[vec![3, 4]], |t, xs| {
            let y = t.gelu(xs[0]);
            t.sum_all(t.square(y))
        });
        grad_check("rsqrt", &[vec![5]], |t, xs| {
            let sq = t.square(xs[0]);
            let y = t.rsqrt(sq, 1e-3);
            t.sum_all(y)
        });
    }

    #[test]
    fn matmul_grads() {
        grad_check("matmul", &[vec![3, 4], vec![4, 2]], |t, xs| {
            let y = t.matmul(xs[0], xs[1]);
            t.sum_all(t.square(y))
        });
        grad_check("bmm", &[vec![2, 3, 4], vec![2, 4, 2]], |t, xs| {
            let y = t.bmm(xs[0], xs[1]);
            t.sum_all(t.square(y))
        });
    }

    #[test]
    fn shape_op_grads() {
        grad_check("permute", &[vec![2, 3, 4]], |t, xs| {
            let y = t.permute(xs[0], &[2, 0, 1]);
            t.sum_all(t.square(y))
        });
        grad_check("slice", &[vec![4, 5]], |t, xs| {
            let y = t.slice_axis(xs[0], 1, 1, 3);
            t.sum_all(t.square(y))
        });
        grad_check("concat", &[vec![2, 3], vec![2, 2]], |t, xs| {
            let y = t.concat(&[xs[0], xs[1]], 1);
            t.sum_all(t.square(y))
        });
        grad_check("broadcast", &[vec![1, 3, 1]], |t, xs| {
            let y = t.broadcast_to(xs[0], &[4, 3, 2]);
            t.sum_all(t.square(y))
        });
        grad_check("sum_axis", &[vec![3, 4]], |t, xs| {
            let y = t.sum_axis_keep(xs[0], 0);
            t.sum_all(t.square(y))
        });
    }

    #[test]
    fn softmax_grads() {
        grad_check("softmax", &[vec![3, 5]], |t, xs| {
            let y = t.softmax_lastdim(xs[0]);
            t.sum_all(t.square(y))
        });
        grad_check("log_softmax", &[vec![3, 5]], |t, xs| {
            let y = t.log_softmax_lastdim(xs[0]);
            t.sum_all(t.square(y))
        });
    }

    #[test]
    fn indexing_grads() {
        grad_check("select_rows", &[vec![5, 3]], |t, xs| {
            let y = t.select_rows(xs[0], &[0, 2, 2, 4]);
            t.sum_all(t.square(y))
        });
        grad_check("pick_per_row", &[vec![4, 6]], |t, xs| {
            let y = t.pick_per_row(xs[0], &[1, 0, 5, 3]);
            t.sum_all(t.square(y))
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::new();
        let x = t.constant(
            Array3::from_shape_fn((2, 3, 7), |(a, b, c)| (a + 2 * b + 3 * c) as f64 * 0.3 - 1.0)
                .into_dyn(),
        );
        let y = t.value(t.softmax_lastdim(x));
        for lane in y.lanes(Axis(2)) {
            assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let t = Tape::new();
        let raw = t.leaf(Array1::from_vec(vec![0.3, -0.7, 2.0]).into_dyn());
        let q = Array1::from_vec(vec![0.0, -1.0, 2.0]).into_dyn();
        let st = t.straight_through(raw, &q);
        assert_eq!(t.value(st), q);
        let loss = t.sum_all(st);
        let grads = t.backward(loss);
        let g = grads.get(raw).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
