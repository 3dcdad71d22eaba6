//! Regional Compensation Unit: patch-based cross-attention between decoder
//! features and residual maps, patch importance scoring, and learnable-weight
//! fusion.
//!
//! The decoder feature `U` is cut into non-overlapping `P x P` patches; each
//! patch's `P^2` positions attend (single head, patch-local) to the same
//! patch of a residual map, queries from `U`, keys/values lifted from the
//! single-channel residual tokens. A shared scoring head `phi` rates each
//! patch's lesion likelihood in (0, 1) and scales the attended patches before
//! reassembly:
//!
//! ```text
//! M = unpatch(attn(U', RM1') * phi(U')) * w1
//!   + unpatch(attn(U', RM2') * phi(U')) * w2
//!   + U
//! ```
//!
//! `w1`, `w2` start at zero, so an untrained RCU is exactly the identity.
//! As in [`crate::gcu`], every operation has an array-level scalar
//! implementation (the oracle) and a tape twin (`*_t`).

use ndarray::{Array1, Array2, Array3};

use crate::kernels;
use crate::params::{Binding, Init, ParamSet};
use crate::tape::{c, Elem, Tape, VarId};
use crate::{bail_validation, Result};

/// Non-overlapping patch decomposition of an `(H, W, C)` map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T: Elem> {
    /// `(N, P*P, C)`, patches in row-major grid order.
    pub patches: Array3<T>,
    pub patch_size: usize,
    pub grid_dims: (usize, usize),
    pub source_shape: (usize, usize, usize),
}

impl<T: Elem> PatchGrid<T> {
    fn check(&self) -> Result<()> {
        let (h, w, ch) = self.source_shape;
        let p = self.patch_size;
        let ok = p > 0
            && h == self.grid_dims.0 * p
            && w == self.grid_dims.1 * p
            && self.patches.dim() == (self.grid_dims.0 * self.grid_dims.1, p * p, ch);
        if !ok {
            bail_validation!(
                "inconsistent patch grid: patches {:?}, P={p}, grid {:?}, source {:?}",
                self.patches.dim(),
                self.grid_dims,
                self.source_shape
            );
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid_dims.0 * self.grid_dims.1
    }
}

/// Splits `x` into `P x P` patches (row-major grid order); lossless.
pub fn patchify<T: Elem>(x: &Array3<T>, p: usize) -> Result<PatchGrid<T>> {
    let (h, w, ch) = x.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        bail_validation!("patch size {p} must divide spatial dims {h}x{w}");
    }
    let (gh, gw) = (h / p, w / p);
    let mut patches = Array3::<T>::zeros((gh * gw, p * p, ch));
    for gy in 0..gh {
        for gx in 0..gw {
            let n = gy * gw + gx;
            for py in 0..p {
                for px in 0..p {
                    for cc in 0..ch {
                        patches[[n, py * p + px, cc]] = x[[gy * p + py, gx * p + px, cc]];
                    }
                }
            }
        }
    }
    Ok(PatchGrid { patches, patch_size: p, grid_dims: (gh, gw), source_shape: (h, w, ch) })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Elem>(grid: &PatchGrid<T>) -> Result<Array3<T>> {
    grid.check()?;
    let (h, w, ch) = grid.source_shape;
    let p = grid.patch_size;
    let gw = grid.grid_dims.1;
    let mut out = Array3::<T>::zeros((h, w, ch));
    for gy in 0..grid.grid_dims.0 {
        for gx in 0..gw {
            let n = gy * gw + gx;
            for py in 0..p {
                for px in 0..p {
                    for cc in 0..ch {
                        out[[gy * p + py, gx * p + px, cc]] = grid.patches[[n, py * p + px, cc]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinearly resizes a single-channel residual map to `target_hw` and cuts
/// it into `P x P` patches; key/value projections lift the single channel to
/// the attention width later.
pub fn resize_rm_to_scale<T: Elem>(
    rm: &Array2<T>,
    target_hw: (usize, usize),
    p: usize,
) -> Result<PatchGrid<T>> {
    let (th, tw) = target_hw;
    if p == 0 || th % p != 0 || tw % p != 0 {
        bail_validation!("patch size {p} must divide target dims {th}x{tw}");
    }
    let (h, w) = rm.dim();
    let lifted = rm.clone().insert_axis(ndarray::Axis(2));
    let resized = if (h, w) == (th, tw) {
        lifted
    } else {
        kernels::resize_bilinear(&lifted.view(), th, tw)
    };
    patchify(&resized, p)
}

/// Hidden widths of the importance head: `C -> C/2 -> C/4 -> 1`, floored at 8.
pub fn phi_widths(channels: usize) -> (usize, usize) {
    ((channels / 2).max(8), (channels / 4).max(8))
}

/// RCU weights: shared single-head attention projections (queries from the
/// decoder patches, keys/values lifting the 1-channel residual tokens), the
/// importance head, and the two fusion scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct RcuWeights<T: Elem> {
    pub wq: Array2<T>,      // (C, C)
    pub wk: Array2<T>,      // (1, C)
    pub wv: Array2<T>,      // (1, C)
    pub wo: Array2<T>,      // (C, C)
    pub conv_w: Array2<T>,  // 1x1 conv of the scoring head, (C, C)
    pub conv_b: Array1<T>,
    pub fc1_w: Array2<T>,
    pub fc1_b: Array1<T>,
    pub fc2_w: Array2<T>,
    pub fc2_b: Array1<T>,
    pub fc3_w: Array2<T>,   // (h2, 1)
    pub fc3_b: Array1<T>,
    pub w1: T,
    pub w2: T,
}

impl<T: Elem> RcuWeights<T> {
    /// He-initialized projections, zero biases, fusion scalars at zero (so a
    /// fresh RCU is the identity).
    pub fn init(init: &mut Init, channels: usize) -> Self {
        let (h1, h2) = phi_widths(channels);
        let two = |a: ndarray::ArrayD<T>| a.into_dimensionality::<ndarray::Ix2>().unwrap();
        let one = |a: ndarray::ArrayD<T>| a.into_dimensionality::<ndarray::Ix1>().unwrap();
        RcuWeights {
            wq: two(init.he(&[channels, channels], channels)),
            wk: two(init.he(&[1, channels], 1)),
            wv: two(init.he(&[1, channels], 1)),
            wo: two(init.he(&[channels, channels], channels)),
            conv_w: two(init.he(&[channels, channels], channels)),
            conv_b: one(init.zeros(&[channels])),
            fc1_w: two(init.he(&[channels, h1], channels)),
            fc1_b: one(init.zeros(&[h1])),
            fc2_w: two(init.he(&[h1, h2], h1)),
            fc2_b: one(init.zeros(&[h2])),
            fc3_w: two(init.he(&[h2, 1], h2)),
            fc3_b: one(init.zeros(&[1])),
            w1: T::zero(),
            w2: T::zero(),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.dim().0
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let (h1, h2) = phi_widths(channels);
        let ok = self.wq.dim() == (channels, channels)
            && self.wk.dim() == (1, channels)
            && self.wv.dim() == (1, channels)
            && self.wo.dim() == (channels, channels)
            && self.conv_w.dim() == (channels, channels)
            && self.conv_b.len() == channels
            && self.fc1_w.dim() == (channels, h1)
            && self.fc1_b.len() == h1
            && self.fc2_w.dim() == (h1, h2)
            && self.fc2_b.len() == h2
            && self.fc3_w.dim() == (h2, 1)
            && self.fc3_b.len() == 1;
        if !ok {
            bail_validation!("RCU weights do not fit {channels} channels");
        }
        Ok(())
    }

    /// Registers every array under `{prefix}.attn.*` / `{prefix}.phi.*` /
    /// `{prefix}.w1|w2`; fusion scalars are stored as 0-d arrays.
    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(format!("{prefix}.attn.wq"), self.wq.clone().into_dyn());
        params.insert(format!("{prefix}.attn.wk"), self.wk.clone().into_dyn());
        params.insert(format!("{prefix}.attn.wv"), self.wv.clone().into_dyn());
        params.insert(format!("{prefix}.attn.wo"), self.wo.clone().into_dyn());
        params.insert(format!("{prefix}.phi.conv.w"), self.conv_w.clone().into_dyn());
        params.insert(format!("{prefix}.phi.conv.b"), self.conv_b.clone().into_dyn());
        params.insert(format!("{prefix}.phi.fc1.w"), self.fc1_w.clone().into_dyn());
        params.insert(format!("{prefix}.phi.fc1.b"), self.fc1_b.clone().into_dyn());
        params.insert(format!("{prefix}.phi.fc2.w"), self.fc2_w.clone().into_dyn());
        params.insert(format!("{prefix}.phi.fc2.b"), self.fc2_b.clone().into_dyn());
        params.insert(format!("{prefix}.phi.fc3.w"), self.fc3_w.clone().into_dyn());
        params.insert(format!("{prefix}.phi.fc3.b"), self.fc3_b.clone().into_dyn());
        let scalar = |v: T| ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), v);
        params.insert(format!("{prefix}.w1"), scalar(self.w1));
        params.insert(format!("{prefix}.w2"), scalar(self.w2));
    }
}

/// Patch-local single-head cross-attention: queries from `u_patches`,
/// keys/values from `rm_patches`; no cross-patch mixing.
pub fn cross_attention<T: Elem>(
    u_patches: &PatchGrid<T>,
    rm_patches: &PatchGrid<T>,
    w: &RcuWeights<T>,
) -> Result<PatchGrid<T>> {
    u_patches.check()?;
    rm_patches.check()?;
    if u_patches.n_patches() != rm_patches.n_patches()
        || u_patches.patch_size != rm_patches.patch_size
    {
        bail_validation!(
            "attention operands disagree: U has {} patches of P={}, RM has {} of P={}",
            u_patches.n_patches(),
            u_patches.patch_size,
            rm_patches.n_patches(),
            rm_patches.patch_size
        );
    }
    if rm_patches.source_shape.2 != 1 {
        bail_validation!("residual patches must be single-channel");
    }
    let (n, pp, ch) = u_patches.patches.dim();
    w.validate(ch)?;
    let scale = T::one() / c::<T>(ch as f64).sqrt();
    let mut out = Array3::<T>::zeros((n, pp, ch));
    for pi in 0..n {
        // projections for this patch
        let mut q = Array2::<T>::zeros((pp, ch));
        let mut k = Array2::<T>::zeros((pp, ch));
        let mut v = Array2::<T>::zeros((pp, ch));
        for tok in 0..pp {
            for j in 0..ch {
                let mut acc = T::zero();
                for i in 0..ch {
                    acc += u_patches.patches[[pi, tok, i]] * w.wq[[i, j]];
                }
                q[[tok, j]] = acc;
                let r = rm_patches.patches[[pi, tok, 0]];
                k[[tok, j]] = r * w.wk[[0, j]];
                v[[tok, j]] = r * w.wv[[0, j]];
            }
        }
        // softmax(QK^T / sqrt(C)) V, row by row
        for tq in 0..pp {
            let mut logits = vec![T::zero(); pp];
            let mut maxv = T::neg_infinity();
            for (tk, l) in logits.iter_mut().enumerate() {
                let mut acc = T::zero();
                for j in 0..ch {
                    acc += q[[tq, j]] * k[[tk, j]];
                }
                *l = acc * scale;
                maxv = maxv.max(*l);
            }
            let mut denom = T::zero();
            for l in logits.iter_mut() {
                *l = (*l - maxv).exp();
                denom += *l;
            }
            let mut attended = vec![T::zero(); ch];
            for (tk, &a) in logits.iter().enumerate() {
                let a = a / denom;
                for (av, vv) in attended.iter_mut().zip(v.row(tk)) {
                    *av += a * *vv;
                }
            }
            // output projection back to C channels
            for j in 0..ch {
                let mut acc = T::zero();
                for (i, &av) in attended.iter().enumerate() {
                    acc += av * w.wo[[i, j]];
                }
                out[[pi, tq, j]] = acc;
            }
        }
    }
    Ok(PatchGrid { patches: out, ..u_patches.clone() })
}

/// Per-patch lesion likelihood in (0, 1): 1x1 conv, position average, three
/// FC stages (ReLU, ReLU, none), sigmoid. Sigmoid rather than softmax — any
/// number of patches may contain lesions.
pub fn importance_scores<T: Elem>(
    u_patches: &PatchGrid<T>,
    w: &RcuWeights<T>,
) -> Result<Array1<T>> {
    u_patches.check()?;
    let (n, pp, ch) = u_patches.patches.dim();
    w.validate(ch)?;
    let (h1, h2) = phi_widths(ch);
    let inv = T::one() / c::<T>(pp as f64);
    let mut scores = Array1::<T>::zeros(n);
    for pi in 0..n {
        // 1x1 conv across positions, then position average
        let mut avg = vec![T::zero(); ch];
        for tok in 0..pp {
            for j in 0..ch {
                let mut acc = w.conv_b[j];
                for i in 0..ch {
                    acc += u_patches.patches[[pi, tok, i]] * w.conv_w[[i, j]];
                }
                avg[j] += acc * inv;
            }
        }
        let mut a1 = vec![T::zero(); h1];
        for (j, a) in a1.iter_mut().enumerate() {
            let mut acc = w.fc1_b[j];
            for (i, &x) in avg.iter().enumerate() {
                acc += x * w.fc1_w[[i, j]];
            }
            *a = acc.max(T::zero());
        }
        let mut a2 = vec![T::zero(); h2];
        for (j, a) in a2.iter_mut().enumerate() {
            let mut acc = w.fc2_b[j];
            for (i, &x) in a1.iter().enumerate() {
                acc += x * w.fc2_w[[i, j]];
            }
            *a = acc.max(T::zero());
        }
        let mut logit = w.fc3_b[0];
        for (i, &x) in a2.iter().enumerate() {
            logit += x * w.fc3_w[[i, 0]];
        }
        scores[pi] = T::one() / (T::one() + (-logit).exp());
    }
    Ok(scores)
}

/// Full unit. `rm1`/`rm2` may be at any resolution; they are resized to `U`'s
/// scale internally. With `use_importance = false` the per-patch scaling is
/// skipped (ablation switch); with `w1 = w2 = 0` the result is exactly `U`.
pub fn rcu_forward<T: Elem>(
    u: &Array3<T>,
    rm1: &Array2<T>,
    rm2: &Array2<T>,
    p: usize,
    w: &RcuWeights<T>,
    use_importance: bool,
) -> Result<Array3<T>> {
    let (h, wid, _) = u.dim();
    let u_patches = patchify(u, p)?;
    let phi = if use_importance { Some(importance_scores(&u_patches, w)?) } else { None };
    let mut out = u.clone();
    for (rm, fuse) in [(rm1, w.w1), (rm2, w.w2)] {
        let rm_patches = resize_rm_to_scale(rm, (h, wid), p)?;
        let mut att = cross_attention(&u_patches, &rm_patches, w)?;
        if let Some(phi) = &phi {
            for (pi, &s) in phi.iter().enumerate() {
                att.patches
                    .index_axis_mut(ndarray::Axis(0), pi)
                    .mapv_inplace(|v| v * s);
            }
        }
        let branch = unpatchify(&att)?;
        out.zip_mut_with(&branch, |o, &b| *o = *o + fuse * b);
    }
    Ok(out)
}

// ---- tape versions ---------------------------------------------------------

/// RCU weight nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct RcuVars {
    pub wq: VarId,
    pub wk: VarId,
    pub wv: VarId,
    pub wo: VarId,
    pub conv_w: VarId,
    pub conv_b: VarId,
    pub fc1_w: VarId,
    pub fc1_b: VarId,
    pub fc2_w: VarId,
    pub fc2_b: VarId,
    pub fc3_w: VarId,
    pub fc3_b: VarId,
    pub w1: VarId,
    pub w2: VarId,
}

impl RcuVars {
    pub fn bound(b: &Binding, prefix: &str) -> Self {
        let id = |suffix: &str| b.id(&format!("{prefix}.{suffix}"));
        RcuVars {
            wq: id("attn.wq"),
            wk: id("attn.wk"),
            wv: id("attn.wv"),
            wo: id("attn.wo"),
            conv_w: id("phi.conv.w"),
            conv_b: id("phi.conv.b"),
            fc1_w: id("phi.fc1.w"),
            fc1_b: id("phi.fc1.b"),
            fc2_w: id("phi.fc2.w"),
            fc2_b: id("phi.fc2.b"),
            fc3_w: id("phi.fc3.w"),
            fc3_b: id("phi.fc3.b"),
            w1: id("w1"),
            w2: id("w2"),
        }
    }
}

/// Applies a shared `(I, O)` projection to every token of `(N, M, I)`.
fn project_tokens<T: Elem>(t: &mut Tape<T>, x: VarId, w: VarId) -> VarId {
    let (n, m, i) = {
        let s = t.value(x).shape().to_vec();
        (s[0], s[1], s[2])
    };
    let o = t.value(w).shape()[1];
    let flat = t.reshape(x, &[n * m, i]);
    let proj = t.matmul(flat, w);
    t.reshape(proj, &[n, m, o])
}

/// Tape translation of [`cross_attention`].
pub fn cross_attention_t<T: Elem>(
    t: &mut Tape<T>,
    u_patches: VarId,
    rm_patches: VarId,
    v: &RcuVars,
) -> VarId {
    let ch = t.value(u_patches).shape()[2];
    let q = project_tokens(t, u_patches, v.wq);
    let k = project_tokens(t, rm_patches, v.wk);
    let val = project_tokens(t, rm_patches, v.wv);
    let scores = t.bmm_nt(q, k);
    let scores = t.mul_scalar(scores, T::one() / c::<T>(ch as f64).sqrt());
    let attn = t.softmax_last(scores);
    let mixed = t.bmm(attn, val);
    project_tokens(t, mixed, v.wo)
}

/// Tape translation of [`importance_scores`]; returns `(N,)` scores.
pub fn importance_scores_t<T: Elem>(t: &mut Tape<T>, u_patches: VarId, v: &RcuVars) -> VarId {
    let n = t.value(u_patches).shape()[0];
    let conv = project_tokens(t, u_patches, v.conv_w);
    let conv = t.add_bias(conv, v.conv_b);
    let avg = t.mean_mid3(conv);
    let a1 = t.matmul(avg, v.fc1_w);
    let a1 = t.add_bias(a1, v.fc1_b);
    let a1 = t.relu(a1);
    let a2 = t.matmul(a1, v.fc2_w);
    let a2 = t.add_bias(a2, v.fc2_b);
    let a2 = t.relu(a2);
    let logit = t.matmul(a2, v.fc3_w);
    let logit = t.add_bias(logit, v.fc3_b);
    let s = t.sigmoid(logit);
    t.reshape(s, &[n])
}

/// Tape translation of [`rcu_forward`]. `rm1`/`rm2` are `(Hr, Wr, 1)` nodes,
/// resized internally to `U`'s scale.
pub fn rcu_forward_t<T: Elem>(
    t: &mut Tape<T>,
    u: VarId,
    rm1: VarId,
    rm2: VarId,
    p: usize,
    v: &RcuVars,
    use_importance: bool,
) -> VarId {
    let (h, w) = {
        let s = t.value(u).shape().to_vec();
        (s[0], s[1])
    };
    assert!(p > 0 && h % p == 0 && w % p == 0, "patch size must divide feature dims");
    let grid = (h / p, w / p);
    let u_patches = t.patchify(u, p);
    let phi = if use_importance { Some(importance_scores_t(t, u_patches, v)) } else { None };
    let mut out = u;
    for (rm, fuse) in [(rm1, v.w1), (rm2, v.w2)] {
        let resized = t.upsample_bilinear(rm, h, w);
        let rm_patches = t.patchify(resized, p);
        let mut att = cross_attention_t(t, u_patches, rm_patches, v);
        if let Some(phi) = phi {
            att = t.mul_rows3(att, phi);
        }
        let branch = t.unpatchify(att, grid);
        let weighted = t.scale_by(branch, fuse);
        out = t.add(out, weighted);
    }
    out
}
