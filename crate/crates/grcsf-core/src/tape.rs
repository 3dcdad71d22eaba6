//! Tape-based reverse-mode automatic differentiation over dynamic-rank
//! `ndarray` arrays.
//!
//! The engine is deliberately small: a [`Tape`] owns an append-only list of
//! nodes, each holding its value and a boxed backward closure that maps the
//! node's output gradient to gradients for its parents. Because nodes are
//! appended in topological order, [`Tape::backward`] is a single reverse scan.
//!
//! Everything is generic over [`Elem`] (`f32` or `f64`): training runs in
//! `f32` for speed, gradient checks instantiate the exact same graph in `f64`.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Ix1, Ix2, Ix3, IxDyn};
use num_traits::FromPrimitive;

use crate::kernels;

/// Element type for all tensor math: `f32` or `f64`.
pub trait Elem: ndarray::NdFloat + FromPrimitive + std::iter::Sum + Send + Sync + 'static {}

impl Elem for f32 {}
impl Elem for f64 {}

/// Channel vectors with norm below this produce cosine similarity 0.
pub const COSINE_NORM_EPS: f64 = 1e-8;

/// Casts an `f64` literal into the active element type.
#[inline]
pub fn c<T: Elem>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

struct Node<T: Elem> {
    value: Arc<ArrayD<T>>,
    parents: Vec<VarId>,
    back: Option<BackFn<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
/// Only leaf nodes retain gradients; interior gradients are dropped once
/// consumed to bound memory.
pub struct Gradients<T: Elem> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&ArrayD<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Removes and returns the gradient for `id` (leaf nodes only).
    pub fn take(&mut self, id: VarId) -> Option<ArrayD<T>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// Reverse-mode autodiff tape.
pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, parents: Vec<VarId>, back: Option<BackFn<T>>) -> VarId {
        for p in &parents {
            assert!(p.0 < self.nodes.len(), "parent from another tape");
        }
        self.nodes.push(Node { value: Arc::new(value), parents, back });
        VarId(self.nodes.len() - 1)
    }

    /// Registers an input node (parameter or constant). Leaves retain their
    /// gradients after [`Tape::backward`].
    pub fn leaf(&mut self, value: ArrayD<T>) -> VarId {
        self.push(value, vec![], None)
    }

    pub fn leaf2(&mut self, value: Array2<T>) -> VarId {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, id: VarId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    fn arc(&self, id: VarId) -> Arc<ArrayD<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: VarId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    /// Runs reverse-mode accumulation from scalar node `root`.
    pub fn backward(&self, root: VarId) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut slots: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.back {
                Some(back) => {
                    debug_assert_eq!(g.shape(), node.value.shape(), "grad shape mismatch at node {i}");
                    let parent_grads = back(&g);
                    assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        // Closures may hand back non-C-order arrays (e.g.
                        // transposes); normalize so downstream flattens hold.
                        let pg = if pg.is_standard_layout() {
                            pg
                        } else {
                            pg.as_standard_layout().into_owned()
                        };
                        match &mut slots[p.0] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => slots[i] = Some(g), // leaf: keep
            }
        }
        Gradients { slots }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = &*av + &*bv;
        self.push(out, vec![a, b], Some(Box::new(move |g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let out = &*av - &*bv;
        self.push(out, vec![a, b], Some(Box::new(move |g| vec![g.clone(), g.mapv(|x| -x)])))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = &*av * &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g * &*bv, g * &*av])),
        )
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.shape(), bv.shape(), "div shape mismatch");
        let out = &*av / &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = g / &*bv;
                let db = -(g * &*av) / (&*bv * &*bv);
                vec![da, db]
            })),
        )
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        self.push(av.mapv(|x| -x), vec![a], Some(Box::new(move |g| vec![g.mapv(|x| -x)])))
    }

    pub fn add_scalar(&mut self, a: VarId, s: T) -> VarId {
        let av = self.arc(a);
        self.push(av.mapv(|x| x + s), vec![a], Some(Box::new(move |g| vec![g.clone()])))
    }

    pub fn mul_scalar(&mut self, a: VarId, s: T) -> VarId {
        let av = self.arc(a);
        self.push(av.mapv(|x| x * s), vec![a], Some(Box::new(move |g| vec![g.mapv(|x| x * s)])))
    }

    /// Elementwise power with a constant exponent.
    pub fn powf_const(&mut self, a: VarId, p: f64) -> VarId {
        let av = self.arc(a);
        let pt = c::<T>(p);
        let out = av.mapv(|x| x.powf(pt));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let pm1 = c::<T>(p - 1.0);
                vec![g * &av.mapv(|x| pt * x.powf(pm1))]
            })),
        )
    }

    /// Natural logarithm; caller guarantees strictly positive inputs
    /// (clamp first when in doubt).
    pub fn ln(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let out = av.mapv(|x| x.ln());
        self.push(out, vec![a], Some(Box::new(move |g| vec![g / &*av])))
    }

    /// Clamp to `[lo, hi]`; gradient passes only through the interior.
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        let av = self.arc(a);
        let (lo, hi) = (c::<T>(lo), c::<T>(hi));
        let out = av.mapv(|x| x.max(lo).min(hi));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dg = g.clone();
                ndarray::Zip::from(&mut dg).and(&*av).for_each(|d, &x| {
                    if x < lo || x > hi {
                        *d = T::zero();
                    }
                });
                vec![dg]
            })),
        )
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let out = av.mapv(|x| x.max(T::zero()));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dg = g.clone();
                ndarray::Zip::from(&mut dg).and(&*av).for_each(|d, &x| {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                });
                vec![dg]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let one = T::one();
        let y = av.mapv(|x| one / (one + (-x).exp()));
        let yc = Arc::new(y.clone());
        self.push(
            y,
            vec![a],
            Some(Box::new(move |g| vec![g * &yc.mapv(|s| s * (one - s))])),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let (k, b) = (c::<T>(0.7978845608028654), c::<T>(0.044715));
        let half = c::<T>(0.5);
        let one = T::one();
        let out = av.mapv(|x| half * x * (one + (k * (x + b * x * x * x)).tanh()));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let three_b = c::<T>(3.0 * 0.044715);
                let dg = av.mapv(|x| {
                    let t = (k * (x + b * x * x * x)).tanh();
                    half * (one + t) + half * x * (one - t * t) * k * (one + three_b * x * x)
                });
                vec![g * &dg]
            })),
        )
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let av = self.arc(a);
        assert_eq!(av.len(), shape.iter().product::<usize>(), "reshape length mismatch");
        let out = ArrayD::from_shape_vec(IxDyn(shape), av.iter().copied().collect())
            .expect("reshape");
        let old_shape: Vec<usize> = av.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![ArrayD::from_shape_vec(IxDyn(&old_shape), g.iter().copied().collect())
                    .expect("reshape grad")]
            })),
        )
    }

    /// Concatenates tensors of equal rank along their last axis; all leading
    /// dimensions must match.
    pub fn concat_last(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<Arc<ArrayD<T>>> = parts.iter().map(|&p| self.arc(p)).collect();
        let ndim = views[0].ndim();
        let lead: Vec<usize> = views[0].shape()[..ndim - 1].to_vec();
        for v in &views {
            assert_eq!(v.ndim(), ndim, "concat rank mismatch");
            assert_eq!(&v.shape()[..ndim - 1], &lead[..], "concat leading dims mismatch");
        }
        let axis = Axis(ndim - 1);
        let widths: Vec<usize> = views.iter().map(|v| v.shape()[ndim - 1]).collect();
        let vviews: Vec<_> = views.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(axis, &vviews).expect("concat");
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&cw| {
                        let part = g
                            .slice_axis(axis, ndarray::Slice::from(offset..offset + cw))
                            .to_owned();
                        offset += cw;
                        part
                    })
                    .collect()
            })),
        )
    }

    /// Column slice of a `(M, C)` matrix: columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let av = self.arc(a);
        let m2 = av.view().into_dimensionality::<Ix2>().expect("slice_cols wants rank 2");
        let (rows, cols) = m2.dim();
        assert!(start + len <= cols, "column slice out of range");
        let out = m2.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad rank");
                let mut dx = Array2::<T>::zeros((rows, cols));
                dx.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Transpose of a rank-2 matrix.
    pub fn transpose2(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let m2 = av.view().into_dimensionality::<Ix2>().expect("transpose2 wants rank 2");
        // `as_standard_layout` keeps owned arrays C-ordered so slice-based
        // consumers never see reversed strides.
        let out = m2.t().as_standard_layout().into_owned();
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad rank");
                vec![g2.t().as_standard_layout().into_owned().into_dyn()]
            })),
        )
    }

    /// Selects rows `idx` of a `(R, C)` matrix; repeated indices allowed.
    pub fn gather_rows(&mut self, a: VarId, idx: Vec<usize>) -> VarId {
        let av = self.arc(a);
        let m = av.view().into_dimensionality::<Ix2>().expect("gather_rows wants rank 2");
        let (r, cdim) = m.dim();
        for &i in &idx {
            assert!(i < r, "gather index out of range");
        }
        let mut out = Array2::<T>::zeros((idx.len(), cdim));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&m.row(i));
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad rank");
                let mut dx = Array2::<T>::zeros((r, cdim));
                for (o, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(o);
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Builds a full `(n, D)` token matrix by placing `visible` rows at
    /// `vis_idx` and broadcasting the learned `mask_token` row at `mask_idx`.
    /// The two index sets must partition `0..n`.
    pub fn assemble_tokens(
        &mut self,
        visible: VarId,
        mask_token: VarId,
        vis_idx: Vec<usize>,
        mask_idx: Vec<usize>,
    ) -> VarId {
        let vv = self.arc(visible);
        let mv = self.arc(mask_token);
        let v2 = vv.view().into_dimensionality::<Ix2>().expect("visible rank 2");
        let mt = mv.view().into_dimensionality::<Ix1>().expect("mask token rank 1");
        let d = v2.dim().1;
        assert_eq!(mt.len(), d, "mask token width mismatch");
        assert_eq!(v2.dim().0, vis_idx.len(), "visible rows vs indices");
        let n = vis_idx.len() + mask_idx.len();
        let mut seen = vec![false; n];
        for &i in vis_idx.iter().chain(mask_idx.iter()) {
            assert!(i < n && !seen[i], "indices must partition 0..n");
            seen[i] = true;
        }
        let mut out = Array2::<T>::zeros((n, d));
        for (r, &i) in vis_idx.iter().enumerate() {
            out.row_mut(i).assign(&v2.row(r));
        }
        for &i in &mask_idx {
            out.row_mut(i).assign(&mt);
        }
        self.push(
            out.into_dyn(),
            vec![visible, mask_token],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad rank");
                let mut dv = Array2::<T>::zeros((vis_idx.len(), d));
                for (r, &i) in vis_idx.iter().enumerate() {
                    dv.row_mut(r).assign(&g2.row(i));
                }
                let mut dm = Array1::<T>::zeros(d);
                for &i in &mask_idx {
                    dm += &g2.row(i);
                }
                vec![dv.into_dyn(), dm.into_dyn()]
            })),
        )
    }

    /// Splits `(H, W, C)` into non-overlapping `p x p` patches:
    /// output `(N, p*p, C)` with patches in raster order.
    pub fn patchify(&mut self, a: VarId, p: usize) -> VarId {
        let av = self.arc(a);
        let x = av.view().into_dimensionality::<Ix3>().expect("patchify wants rank 3");
        let (h, w, ch) = x.dim();
        assert!(p > 0 && h % p == 0 && w % p == 0, "patch size must divide spatial dims");
        let (gh, gw) = (h / p, w / p);
        let out = patchify_fwd(&x, p);
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let mut dx = ndarray::Array3::<T>::zeros((h, w, ch));
                for gy in 0..gh {
                    for gx in 0..gw {
                        let n = gy * gw + gx;
                        for py in 0..p {
                            for px in 0..p {
                                for cc in 0..ch {
                                    dx[[gy * p + py, gx * p + px, cc]] = g3[[n, py * p + px, cc]];
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Inverse of [`Tape::patchify`] for a `(gh*gw, p*p, C)` patch tensor.
    pub fn unpatchify(&mut self, a: VarId, grid: (usize, usize)) -> VarId {
        let av = self.arc(a);
        let x = av.view().into_dimensionality::<Ix3>().expect("unpatchify wants rank 3");
        let (n, pp, ch) = x.dim();
        let (gh, gw) = grid;
        assert_eq!(n, gh * gw, "patch count vs grid");
        let p = (pp as f64).sqrt() as usize;
        assert_eq!(p * p, pp, "patch payload must be square");
        let mut out = ndarray::Array3::<T>::zeros((gh * p, gw * p, ch));
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for py in 0..p {
                    for px in 0..p {
                        for cc in 0..ch {
                            out[[gy * p + py, gx * p + px, cc]] = x[[t, py * p + px, cc]];
                        }
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let mut dx = ndarray::Array3::<T>::zeros((n, pp, ch));
                for gy in 0..gh {
                    for gx in 0..gw {
                        let t = gy * gw + gx;
                        for py in 0..p {
                            for px in 0..p {
                                for cc in 0..ch {
                                    dx[[t, py * p + px, cc]] = g3[[gy * p + py, gx * p + px, cc]];
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    // ---- reductions & broadcasts ------------------------------------------

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let s = av.iter().copied().sum::<T>();
        let shape: Vec<usize> = av.shape().to_vec();
        self.push(
            ndarray::arr0(s).into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gs)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, T::one() / c::<T>(n as f64))
    }

    /// Global average pool `(H, W, C) -> (C,)`.
    pub fn global_avg_hw(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let x = av.view().into_dimensionality::<Ix3>().expect("global_avg_hw wants rank 3");
        let (h, w, ch) = x.dim();
        let inv = T::one() / c::<T>((h * w) as f64);
        let mut out = Array1::<T>::zeros(ch);
        for cc in 0..ch {
            out[cc] = x.index_axis(Axis(2), cc).iter().copied().sum::<T>() * inv;
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("grad rank");
                let mut dx = ndarray::Array3::<T>::zeros((h, w, ch));
                for cc in 0..ch {
                    dx.index_axis_mut(Axis(2), cc).fill(g1[cc] * inv);
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Mean over the middle axis: `(N, M, C) -> (N, C)`.
    pub fn mean_mid3(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let x = av.view().into_dimensionality::<Ix3>().expect("mean_mid3 wants rank 3");
        let (n, m, ch) = x.dim();
        let inv = T::one() / c::<T>(m as f64);
        let out = x.sum_axis(Axis(1)) * inv;
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad rank");
                let mut dx = ndarray::Array3::<T>::zeros((n, m, ch));
                for i in 0..n {
                    for j in 0..m {
                        for cc in 0..ch {
                            dx[[i, j, cc]] = g2[[i, cc]] * inv;
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Adds a `(C,)` bias to the last axis of a rank-2 or rank-3 tensor.
    pub fn add_bias(&mut self, x: VarId, b: VarId) -> VarId {
        let xv = self.arc(x);
        let bv = self.arc(b);
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias rank 1");
        let ch = b1.len();
        assert_eq!(*xv.shape().last().unwrap(), ch, "bias width mismatch");
        let lead: usize = xv.len() / ch;
        let mut out = (*xv).clone();
        {
            let mut flat = out.view_mut().into_shape_with_order((lead, ch)).expect("flatten");
            flat += &b1;
        }
        self.push(
            out,
            vec![x, b],
            Some(Box::new(move |g| {
                let gf = g.view().into_shape_with_order((lead, ch)).expect("flatten grad");
                vec![g.clone(), gf.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Channel gate: `(H, W, C) * (C,)` broadcast over pixels.
    pub fn mul_gate(&mut self, x: VarId, gate: VarId) -> VarId {
        let xv = self.arc(x);
        let gv = self.arc(gate);
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("mul_gate wants rank 3");
        let g1 = gv.view().into_dimensionality::<Ix1>().expect("gate rank 1");
        let (h, w, ch) = x3.dim();
        assert_eq!(g1.len(), ch, "gate width mismatch");
        let out = &x3 * &g1.view().insert_axis(Axis(0)).insert_axis(Axis(0));
        self.push(
            out.into_dyn(),
            vec![x, gate],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let gate1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                let dx = &g3 * &gate1.view().insert_axis(Axis(0)).insert_axis(Axis(0));
                let mut dgate = Array1::<T>::zeros(ch);
                for cc in 0..ch {
                    let mut acc = T::zero();
                    for y in 0..h {
                        for xx in 0..w {
                            acc += g3[[y, xx, cc]] * x3[[y, xx, cc]];
                        }
                    }
                    dgate[cc] = acc;
                }
                vec![dx.into_dyn(), dgate.into_dyn()]
            })),
        )
    }

    /// Spatial gate: `(H, W, C) * (H, W, 1)` broadcast over channels.
    pub fn mul_spatial(&mut self, x: VarId, m: VarId) -> VarId {
        let xv = self.arc(x);
        let mv = self.arc(m);
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("mul_spatial wants rank 3");
        let m3 = mv.view().into_dimensionality::<Ix3>().expect("mask rank 3");
        let (h, w, ch) = x3.dim();
        assert_eq!(m3.dim(), (h, w, 1), "spatial mask shape");
        let out = &x3 * &m3;
        self.push(
            out.into_dyn(),
            vec![x, m],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let m3 = mv.view().into_dimensionality::<Ix3>().unwrap();
                let dx = &g3 * &m3;
                let mut dm = ndarray::Array3::<T>::zeros((h, w, 1));
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = T::zero();
                        for cc in 0..ch {
                            acc += g3[[y, xx, cc]] * x3[[y, xx, cc]];
                        }
                        dm[[y, xx, 0]] = acc;
                    }
                }
                vec![dx.into_dyn(), dm.into_dyn()]
            })),
        )
    }

    /// Row gate: `(N, M, C) * (N,)` broadcast over each row's tokens.
    pub fn mul_rows3(&mut self, x: VarId, s: VarId) -> VarId {
        let xv = self.arc(x);
        let sv = self.arc(s);
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("mul_rows3 wants rank 3");
        let s1 = sv.view().into_dimensionality::<Ix1>().expect("scores rank 1");
        let (n, m, ch) = x3.dim();
        assert_eq!(s1.len(), n, "score count mismatch");
        let mut out = x3.to_owned();
        for i in 0..n {
            let f = s1[i];
            out.index_axis_mut(Axis(0), i).mapv_inplace(|v| v * f);
        }
        self.push(
            out.into_dyn(),
            vec![x, s],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
                let s1 = sv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = g3.to_owned();
                let mut ds = Array1::<T>::zeros(n);
                for i in 0..n {
                    let f = s1[i];
                    dx.index_axis_mut(Axis(0), i).mapv_inplace(|v| v * f);
                    let mut acc = T::zero();
                    for j in 0..m {
                        for cc in 0..ch {
                            acc += g3[[i, j, cc]] * x3[[i, j, cc]];
                        }
                    }
                    ds[i] = acc;
                }
                vec![dx.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// Scales a tensor by a 0-d (scalar) variable.
    pub fn scale_by(&mut self, x: VarId, s: VarId) -> VarId {
        let xv = self.arc(x);
        let sv = self.arc(s);
        assert_eq!(sv.len(), 1, "scale_by wants a scalar variable");
        let sval = *sv.iter().next().unwrap();
        let out = xv.mapv(|v| v * sval);
        self.push(
            out,
            vec![x, s],
            Some(Box::new(move |g| {
                let dx = g.mapv(|v| v * sval);
                let ds = g.iter().zip(xv.iter()).map(|(a, b)| *a * *b).sum::<T>();
                vec![dx, ArrayD::from_elem(sv.raw_dim(), ds)]
            })),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    /// `(M, K) x (K, N) -> (M, N)`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.arc(a);
        let bv = self.arc(b);
        let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs rank 2");
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs rank 2");
        assert_eq!(a2.dim().1, b2.dim().0, "matmul inner dim");
        let out = a2.dot(&b2);
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad rank");
                let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Batched `(B, M, K) x (B, K, N) -> (B, M, N)`.
    pub fn bmm(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.arc(a);
        let bv = self.arc(b);
        let a3 = av.view().into_dimensionality::<Ix3>().expect("bmm lhs rank 3");
        let b3 = bv.view().into_dimensionality::<Ix3>().expect("bmm rhs rank 3");
        let (ba, m, k) = a3.dim();
        let (bb, k2, n) = b3.dim();
        assert_eq!(ba, bb, "bmm batch");
        assert_eq!(k, k2, "bmm inner dim");
        let mut out = ndarray::Array3::<T>::zeros((ba, m, n));
        for i in 0..ba {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<T>::zeros((ba, m, k));
                let mut db = ndarray::Array3::<T>::zeros((ba, k, n));
                for i in 0..ba {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Batched product with transposed rhs: `(B, M, K) x (B, N, K) -> (B, M, N)`.
    pub fn bmm_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.arc(a);
        let bv = self.arc(b);
        let a3 = av.view().into_dimensionality::<Ix3>().expect("bmm_nt lhs rank 3");
        let b3 = bv.view().into_dimensionality::<Ix3>().expect("bmm_nt rhs rank 3");
        let (ba, m, k) = a3.dim();
        let (bb, n, k2) = b3.dim();
        assert_eq!(ba, bb, "bmm_nt batch");
        assert_eq!(k, k2, "bmm_nt inner dim");
        let mut out = ndarray::Array3::<T>::zeros((ba, m, n));
        for i in 0..ba {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i).t()));
        }
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<T>::zeros((ba, m, k));
                let mut db = ndarray::Array3::<T>::zeros((ba, n, k));
                for i in 0..ba {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i)));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&a3.index_axis(Axis(0), i)));
                }
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Softmax along the last axis of any rank >= 1 tensor.
    pub fn softmax_last(&mut self, a: VarId) -> VarId {
        let av = self.arc(a);
        let last = Axis(av.ndim() - 1);
        let mut y = (*av).clone();
        for mut lane in y.lanes_mut(last).into_iter() {
            let mx = lane.iter().copied().fold(T::neg_infinity(), |m, v| m.max(v));
            lane.mapv_inplace(|v| (v - mx).exp());
            let s = lane.iter().copied().sum::<T>();
            lane.mapv_inplace(|v| v / s);
        }
        let yc = Arc::new(y.clone());
        self.push(
            y,
            vec![a],
            Some(Box::new(move |g| {
                let last = Axis(yc.ndim() - 1);
                let mut dx = g.clone();
                let ylanes = yc.lanes(last);
                for (mut dlane, ylane) in dx.lanes_mut(last).into_iter().zip(ylanes) {
                    let dot = dlane
                        .iter()
                        .zip(ylane.iter())
                        .map(|(d, y)| *d * *y)
                        .sum::<T>();
                    for (d, y) in dlane.iter_mut().zip(ylane.iter()) {
                        *d = *y * (*d - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let xv = self.arc(x);
        let gv = self.arc(gamma);
        let bv = self.arc(beta);
        let ch = *xv.shape().last().expect("layer_norm rank >= 1");
        let g1 = gv.view().into_dimensionality::<Ix1>().expect("gamma rank 1");
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("beta rank 1");
        assert_eq!(g1.len(), ch);
        assert_eq!(b1.len(), ch);
        let last = Axis(xv.ndim() - 1);
        let epst = c::<T>(eps);
        let inv_n = T::one() / c::<T>(ch as f64);
        let mut xhat = (*xv).clone();
        let lanes = xhat.lanes_mut(last).into_iter().len();
        let mut istd = Vec::with_capacity(lanes);
        for mut lane in xhat.lanes_mut(last).into_iter() {
            let mu = lane.iter().copied().sum::<T>() * inv_n;
            let var = lane.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() * inv_n;
            let is = T::one() / (var + epst).sqrt();
            istd.push(is);
            lane.mapv_inplace(|v| (v - mu) * is);
        }
        let xhat = Arc::new(xhat);
        let mut out = (*xhat).clone();
        for mut lane in out.lanes_mut(last).into_iter() {
            for (v, (g, b)) in lane.iter_mut().zip(g1.iter().zip(b1.iter())) {
                *v = *v * *g + *b;
            }
        }
        let xhat_b = Arc::clone(&xhat);
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let last = Axis(xhat_b.ndim() - 1);
                let gamma1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = g.clone();
                let mut dgamma = Array1::<T>::zeros(ch);
                let mut dbeta = Array1::<T>::zeros(ch);
                for ((mut glane, xlane), &is) in dx
                    .lanes_mut(last)
                    .into_iter()
                    .zip(xhat_b.lanes(last))
                    .zip(istd.iter())
                {
                    let mut m1 = T::zero(); // mean of gy
                    let mut m2 = T::zero(); // mean of gy * xhat
                    for (k, (g, xh)) in glane.iter().zip(xlane.iter()).enumerate() {
                        let gy = *g * gamma1[k];
                        dgamma[k] += *g * *xh;
                        dbeta[k] += *g;
                        m1 += gy;
                        m2 += gy * *xh;
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for (k, (g, xh)) in glane.iter_mut().zip(xlane.iter()).enumerate() {
                        let gy = *g * gamma1[k];
                        *g = is * (gy - m1 - *xh * m2);
                    }
                }
                vec![dx, dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    // ---- nn ops ------------------------------------------------------------

    /// Stride-1 same-padding conv: `x (H, W, Cin)`, `w (kh, kw, Cin, Cout)`,
    /// `b (Cout,)`.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let xv = self.arc(x);
        let wv = self.arc(w);
        let bv = self.arc(b);
        let x3 = view3(&xv);
        let w4 = view4(&wv);
        let b1 = view1(&bv);
        let out = kernels::conv2d_same(&x3, &w4, Some(&b1));
        self.push(
            out.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let (dx, dw, db) = kernels::conv2d_backward(&view3(&xv), &view4(&wv), &g3);
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2(&mut self, x: VarId) -> VarId {
        let xv = self.arc(x);
        let x3 = view3(&xv);
        let (h, w, ch) = x3.dim();
        let (out, argmax) = kernels::maxpool2(&x3);
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                vec![kernels::maxpool2_backward(&g3, &argmax, h, w, ch).into_dyn()]
            })),
        )
    }

    /// Align-corners bilinear resize of `(H, W, C)` to `(th, tw, C)`.
    pub fn upsample_bilinear(&mut self, x: VarId, th: usize, tw: usize) -> VarId {
        let xv = self.arc(x);
        let x3 = view3(&xv);
        let (h, w, _) = x3.dim();
        let out = kernels::resize_bilinear(&x3, th, tw);
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                vec![kernels::resize_bilinear_backward(&g3, h, w).into_dyn()]
            })),
        )
    }

    /// Per-pixel cosine similarity of two `(H, W, C)` maps -> `(H, W, 1)`.
    /// Pixels where either vector's norm falls below 1e-8 produce similarity
    /// 0 with zero gradient.
    pub fn pixelwise_cosine(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.arc(a);
        let bv = self.arc(b);
        let a3 = view3(&av);
        let b3 = view3(&bv);
        assert_eq!(a3.dim(), b3.dim(), "cosine operand shapes");
        let (h, w, ch) = a3.dim();
        let eps = c::<T>(COSINE_NORM_EPS);
        let mut out = ndarray::Array3::<T>::zeros((h, w, 1));
        for y in 0..h {
            for xx in 0..w {
                let mut dot = T::zero();
                let mut na2 = T::zero();
                let mut nb2 = T::zero();
                for cc in 0..ch {
                    let (pa, pb) = (a3[[y, xx, cc]], b3[[y, xx, cc]]);
                    dot += pa * pb;
                    na2 += pa * pa;
                    nb2 += pb * pb;
                }
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                out[[y, xx, 0]] = if na < eps || nb < eps { T::zero() } else { dot / (na * nb) };
            }
        }
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank");
                let a3 = view3(&av);
                let b3 = view3(&bv);
                let mut da = ndarray::Array3::<T>::zeros((h, w, ch));
                let mut db = ndarray::Array3::<T>::zeros((h, w, ch));
                for y in 0..h {
                    for xx in 0..w {
                        let mut dot = T::zero();
                        let mut na2 = T::zero();
                        let mut nb2 = T::zero();
                        for cc in 0..ch {
                            let (pa, pb) = (a3[[y, xx, cc]], b3[[y, xx, cc]]);
                            dot += pa * pb;
                            na2 += pa * pa;
                            nb2 += pb * pb;
                        }
                        let (na, nb) = (na2.sqrt(), nb2.sqrt());
                        if na < eps || nb < eps {
                            continue;
                        }
                        let denom = na * nb;
                        let cos = dot / denom;
                        let gy = g3[[y, xx, 0]];
                        for cc in 0..ch {
                            let (pa, pb) = (a3[[y, xx, cc]], b3[[y, xx, cc]]);
                            da[[y, xx, cc]] = gy * (pb / denom - cos * pa / na2);
                            db[[y, xx, cc]] = gy * (pa / denom - cos * pb / nb2);
                        }
                    }
                }
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }
}

fn view1<T: Elem>(a: &ArrayD<T>) -> ArrayView1<'_, T> {
    a.view().into_dimensionality().expect("expected rank 1")
}

fn view3<T: Elem>(a: &ArrayD<T>) -> ArrayView3<'_, T> {
    a.view().into_dimensionality().expect("expected rank 3")
}

fn view4<T: Elem>(a: &ArrayD<T>) -> ArrayView4<'_, T> {
    a.view().into_dimensionality().expect("expected rank 4")
}

fn view2<T: Elem>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality().expect("expected rank 2")
}

pub(crate) fn patchify_fwd<T: Elem>(x: &ArrayView3<T>, p: usize) -> ndarray::Array3<T> {
    let (h, w, ch) = x.dim();
    let (gh, gw) = (h / p, w / p);
    let mut out = ndarray::Array3::<T>::zeros((gh * gw, p * p, ch));
    for gy in 0..gh {
        for gx in 0..gw {
            let n = gy * gw + gx;
            for py in 0..p {
                for px in 0..p {
                    for cc in 0..ch {
                        out[[n, py * p + px, cc]] = x[[gy * p + py, gx * p + px, cc]];
                    }
                }
            }
        }
    }
    out
}

#[allow(unused)]
fn _silence(a: &ArrayD<f32>) {
    let _ = view2(a);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_all, weighted_scalar};
    use ndarray::{ArrayD, IxDyn};

    fn fixture(shape: &[usize], phase: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n)
                .map(|i| (0.9 * (i as f64 * 0.713 + phase)).sin() * 0.8 + 0.1)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn backward_through_shared_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ndarray::arr1(&[3.0]).into_dyn());
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap()[[0]], 7.0);
    }

    #[test]
    fn elementwise_ops_pass_gradcheck() {
        let a = fixture(&[3, 4], 0.0);
        let b = fixture(&[3, 4], 1.3);
        check_all(&[a.clone(), b.clone()], |t, v| {
            let x = t.add(v[0], v[1]);
            let y = t.mul(x, v[0]);
            let z = t.sub(y, v[1]);
            weighted_scalar(t, z, 17)
        });
        check_all(&[a.clone(), b.mapv(|x| x + 2.0)], |t, v| {
            let d = t.div(v[0], v[1]);
            weighted_scalar(t, d, 3)
        });
        check_all(&[a.clone()], |t, v| {
            let s = t.sigmoid(v[0]);
            let r = t.gelu(s);
            weighted_scalar(t, r, 5)
        });
        check_all(&[a.mapv(|x| x.abs() + 0.2)], |t, v| {
            let l = t.ln(v[0]);
            let p = t.powf_const(l, 2.0);
            weighted_scalar(t, p, 7)
        });
        check_all(&[a.clone()], |t, v| {
            let n = t.neg(v[0]);
            let s = t.add_scalar(n, 0.7);
            let m = t.mul_scalar(s, 1.9);
            weighted_scalar(t, m, 11)
        });
    }

    #[test]
    fn relu_and_clamp_gate_gradients() {
        // Keep inputs away from the kink so the numeric check is valid.
        let a = fixture(&[4, 3], 0.4).mapv(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
        check_all(&[a.clone()], |t, v| {
            let r = t.relu(v[0]);
            weighted_scalar(t, r, 13)
        });
        check_all(&[a], |t, v| {
            let r = t.clamp(v[0], -0.5, 0.5);
            weighted_scalar(t, r, 19)
        });
    }

    #[test]
    fn reductions_and_broadcasts_pass_gradcheck() {
        let x = fixture(&[3, 4, 2], 0.2);
        let b = fixture(&[2], 2.2);
        check_all(&[x.clone(), b.clone()], |t, v| {
            let y = t.add_bias(v[0], v[1]);
            weighted_scalar(t, y, 23)
        });
        check_all(&[x.clone(), b.clone()], |t, v| {
            let y = t.mul_gate(v[0], v[1]);
            weighted_scalar(t, y, 29)
        });
        let m = fixture(&[3, 4, 1], 0.9);
        check_all(&[x.clone(), m], |t, v| {
            let y = t.mul_spatial(v[0], v[1]);
            weighted_scalar(t, y, 31)
        });
        let s = fixture(&[3], 1.7);
        check_all(&[x.clone(), s], |t, v| {
            let y = t.mul_rows3(v[0], v[1]);
            weighted_scalar(t, y, 37)
        });
        check_all(&[x.clone()], |t, v| {
            let y = t.global_avg_hw(v[0]);
            weighted_scalar(t, y, 41)
        });
        check_all(&[x.clone()], |t, v| {
            let y = t.mean_mid3(v[0]);
            weighted_scalar(t, y, 43)
        });
        let sc = fixture(&[], 0.3);
        check_all(&[x, sc], |t, v| {
            let y = t.scale_by(v[0], v[1]);
            weighted_scalar(t, y, 47)
        });
    }

    #[test]
    fn linalg_ops_pass_gradcheck() {
        let a = fixture(&[3, 4], 0.1);
        let b = fixture(&[4, 2], 0.8);
        check_all(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1]);
            weighted_scalar(t, y, 53)
        });
        let ba = fixture(&[2, 3, 4], 0.5);
        let bb = fixture(&[2, 4, 2], 1.1);
        check_all(&[ba.clone(), bb], |t, v| {
            let y = t.bmm(v[0], v[1]);
            weighted_scalar(t, y, 59)
        });
        let bc = fixture(&[2, 5, 4], 1.9);
        check_all(&[ba, bc], |t, v| {
            let y = t.bmm_nt(v[0], v[1]);
            weighted_scalar(t, y, 61)
        });
        let sm = fixture(&[2, 3, 5], 0.6);
        check_all(&[sm], |t, v| {
            let y = t.softmax_last(v[0]);
            weighted_scalar(t, y, 67)
        });
        let x = fixture(&[4, 6], 0.25);
        let gamma = fixture(&[6], 1.4).mapv(|v| v + 1.5);
        let beta = fixture(&[6], 2.6);
        check_all(&[x, gamma, beta], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            weighted_scalar(t, y, 71)
        });
    }

    #[test]
    fn structural_ops_pass_gradcheck() {
        let x = fixture(&[4, 4, 3], 0.45);
        check_all(&[x.clone()], |t, v| {
            let p = t.patchify(v[0], 2);
            weighted_scalar(t, p, 73)
        });
        let patches = fixture(&[4, 4, 3], 0.7); // (N=4, p*p=4, C=3)
        check_all(&[patches], |t, v| {
            let u = t.unpatchify(v[0], (2, 2));
            weighted_scalar(t, u, 79)
        });
        let a = fixture(&[3, 3, 2], 0.15);
        let b = fixture(&[3, 3, 1], 0.85);
        check_all(&[a.clone(), b.clone()], |t, v| {
            let y = t.concat_last(&[v[0], v[1]]);
            weighted_scalar(t, y, 83)
        });
        let c2a = fixture(&[4, 3], 0.05);
        let c2b = fixture(&[4, 2], 0.95);
        check_all(&[c2a, c2b], |t, v| {
            let y = t.concat_last(&[v[0], v[1]]);
            weighted_scalar(t, y, 127)
        });
        let sc = fixture(&[4, 6], 0.42);
        check_all(&[sc.clone()], |t, v| {
            let y = t.slice_cols(v[0], 1, 3);
            weighted_scalar(t, y, 131)
        });
        check_all(&[sc], |t, v| {
            let y = t.transpose2(v[0]);
            weighted_scalar(t, y, 137)
        });
        let m = fixture(&[5, 3], 0.35);
        check_all(&[m], |t, v| {
            let y = t.gather_rows(v[0], vec![0, 2, 2, 4]);
            weighted_scalar(t, y, 89)
        });
        let vis = fixture(&[2, 3], 0.55);
        let tok = fixture(&[3], 1.25);
        check_all(&[vis, tok], |t, v| {
            let y = t.assemble_tokens(v[0], v[1], vec![1, 3], vec![0, 2]);
            weighted_scalar(t, y, 97)
        });
        check_all(&[x], |t, v| {
            let r = t.reshape(v[0], &[4, 12]);
            weighted_scalar(t, r, 101)
        });
    }

    #[test]
    fn nn_ops_pass_gradcheck() {
        let x = fixture(&[4, 4, 2], 0.05);
        let w = fixture(&[3, 3, 2, 3], 0.65).mapv(|v| v * 0.3);
        let b = fixture(&[3], 1.05);
        check_all(&[x.clone(), w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]);
            weighted_scalar(t, y, 103)
        });
        // Perturb away from ties so maxpool's argmax is stable under the step.
        let xp = fixture(&[4, 4, 2], 0.33).mapv(|v| v * 1.7);
        check_all(&[xp], |t, v| {
            let y = t.maxpool2(v[0]);
            weighted_scalar(t, y, 107)
        });
        check_all(&[x.clone()], |t, v| {
            let y = t.upsample_bilinear(v[0], 7, 6);
            weighted_scalar(t, y, 109)
        });
        let a = fixture(&[3, 3, 4], 0.12).mapv(|v| v + 0.3);
        let bb = fixture(&[3, 3, 4], 0.92).mapv(|v| v + 0.4);
        check_all(&[a, bb], |t, v| {
            let y = t.pixelwise_cosine(v[0], v[1]);
            weighted_scalar(t, y, 113)
        });
    }

    #[test]
    fn cosine_of_zero_vector_is_zero_with_zero_grad() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(ArrayD::zeros(IxDyn(&[2, 2, 3])));
        let b = t.leaf(fixture(&[2, 2, 3], 0.4));
        let cosv = t.pixelwise_cosine(a, b);
        assert!(t.value(cosv).iter().all(|&v| v == 0.0));
        let s = t.sum_all(cosv);
        let g = t.backward(s);
        assert!(g.get(a).unwrap().iter().all(|&v| v == 0.0));
        assert!(g.get(b).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f32_and_f64_graphs_agree_to_single_precision() {
        let x64 = fixture(&[4, 4, 2], 0.21);
        let w64 = fixture(&[3, 3, 2, 2], 0.8).mapv(|v| v * 0.4);
        let b64 = fixture(&[2], 1.6);
        let run64 = {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(x64.clone());
            let w = t.leaf(w64.clone());
            let b = t.leaf(b64.clone());
            let y = t.conv2d(x, w, b);
            let y = t.sigmoid(y);
            let s = t.mean_all(y);
            t.scalar(s)
        };
        let run32 = {
            let mut t = Tape::<f32>::new();
            let x = t.leaf(x64.mapv(|v| v as f32));
            let w = t.leaf(w64.mapv(|v| v as f32));
            let b = t.leaf(b64.mapv(|v| v as f32));
            let y = t.conv2d(x, w, b);
            let y = t.sigmoid(y);
            let s = t.mean_all(y);
            t.scalar(s) as f64
        };
        assert!((run64 - run32).abs() < 1e-5, "{run64} vs {run32}");
    }
}
