//! Global Compensation Unit: SE-gated, cosine-similarity recovery of detail
//! lost during downsampling, applied along nested skip pathways.
//!
//! Given the skip feature `F`, the next-coarser downsampled map `S`, and the
//! decoder's upsampled feature `U` (all with `C` channels), the unit computes
//!
//! ```text
//! RU = re_upsample(S, size of F)
//! R  = pixelwise_cosine(RU * se_gate(U), se_gate(F))   (H x W map)
//! C  = R * F + F                                       (R broadcast over channels)
//! ```
//!
//! `C` replaces the skip feature; `R` is propagated to later nodes in the
//! same row via [`propagate_residual`].
//!
//! Every operation exists twice: an array-level scalar implementation (used
//! directly and as the oracle in tests) and a tape version (`*_t`) the model
//! differentiates through.

use ndarray::{Array1, Array2, Array3};

use crate::kernels;
use crate::params::{Binding, Init, ParamSet};
use crate::tape::{c, Elem, Tape, VarId, COSINE_NORM_EPS};
use crate::{bail_validation, Result};

/// Default squeeze-and-excitation bottleneck ratio at desk scale.
pub const SE_REDUCTION: usize = 4;

/// Squeeze-and-excitation weights: `C -> max(C/reduction, 1) -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeWeights<T: Elem> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Elem> SeWeights<T> {
    pub fn reduced_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(1)
    }

    /// He-initialized FC stages, zero biases.
    pub fn init(init: &mut Init, channels: usize, reduction: usize) -> Self {
        let r = Self::reduced_width(channels, reduction);
        let two = |a: ndarray::ArrayD<T>| a.into_dimensionality::<ndarray::Ix2>().unwrap();
        let one = |a: ndarray::ArrayD<T>| a.into_dimensionality::<ndarray::Ix1>().unwrap();
        SeWeights {
            w1: two(init.he(&[channels, r], channels)),
            b1: one(init.zeros(&[r])),
            w2: two(init.he(&[r, channels], r)),
            b2: one(init.zeros(&[channels])),
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let r = Self::reduced_width(channels, reduction);
        SeWeights {
            w1: Array2::zeros((channels, r)),
            b1: Array1::zeros(r),
            w2: Array2::zeros((r, channels)),
            b2: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.dim().0
    }

    fn validate(&self, channels: usize, operand: &str) -> Result<()> {
        let r = self.w1.dim().1;
        if self.w1.dim().0 != channels
            || self.b1.len() != r
            || self.w2.dim() != (r, channels)
            || self.b2.len() != channels
        {
            bail_validation!(
                "SE block for {operand} expects {channels} channels, got w1 {:?}, w2 {:?}",
                self.w1.dim(),
                self.w2.dim()
            );
        }
        Ok(())
    }

    /// Registers the four arrays under `{prefix}.fc1.w` etc.
    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(format!("{prefix}.fc1.w"), self.w1.clone().into_dyn());
        params.insert(format!("{prefix}.fc1.b"), self.b1.clone().into_dyn());
        params.insert(format!("{prefix}.fc2.w"), self.w2.clone().into_dyn());
        params.insert(format!("{prefix}.fc2.b"), self.b2.clone().into_dyn());
    }
}

/// GCU output: the residual map `R` and the updated skip features `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcuOutput<T: Elem> {
    pub residual: Array2<T>,
    pub updated_skip: Array3<T>,
}

/// Per-channel SE gates for a feature map: global average pool, FC, ReLU,
/// FC, sigmoid. Gates lie strictly in (0, 1).
pub fn se_gains<T: Elem>(x: &Array3<T>, se: &SeWeights<T>) -> Result<Array1<T>> {
    let (h, w, ch) = x.dim();
    se.validate(ch, "input")?;
    let r = se.b1.len();
    let denom = c::<T>((h * w) as f64);
    let mut gap = Array1::<T>::zeros(ch);
    for y in 0..h {
        for xx in 0..w {
            for cc in 0..ch {
                gap[cc] += x[[y, xx, cc]];
            }
        }
    }
    gap.mapv_inplace(|v| v / denom);
    let mut hid = Array1::<T>::zeros(r);
    for j in 0..r {
        let mut acc = se.b1[j];
        for i in 0..ch {
            acc += gap[i] * se.w1[[i, j]];
        }
        hid[j] = acc.max(T::zero());
    }
    let mut gate = Array1::<T>::zeros(ch);
    for j in 0..ch {
        let mut acc = se.b2[j];
        for i in 0..r {
            acc += hid[i] * se.w2[[i, j]];
        }
        gate[j] = T::one() / (T::one() + (-acc).exp());
    }
    Ok(gate)
}

/// SE recalibration: `x` scaled per channel by its gates.
pub fn se_gate<T: Elem>(x: &Array3<T>, se: &SeWeights<T>) -> Result<Array3<T>> {
    let gate = se_gains(x, se)?;
    let mut out = x.clone();
    for mut lane in out.lanes_mut(ndarray::Axis(2)) {
        for (v, &g) in lane.iter_mut().zip(gate.iter()) {
            *v = *v * g;
        }
    }
    Ok(out)
}

/// Bilinear upsampling of the coarser map `s` to `target_hw`; channels
/// unchanged. Target must not be smaller than the source.
pub fn re_upsample<T: Elem>(s: &Array3<T>, target_hw: (usize, usize)) -> Result<Array3<T>> {
    let (h, w, _) = s.dim();
    let (th, tw) = target_hw;
    if th < h || tw < w {
        bail_validation!("re_upsample target {th}x{tw} smaller than source {h}x{w}");
    }
    Ok(kernels::resize_bilinear(&s.view(), th, tw))
}

/// Cosine similarity of the two channel vectors at every pixel; pixels where
/// either norm falls below 1e-8 map to 0.
pub fn pixelwise_cosine<T: Elem>(a: &Array3<T>, b: &Array3<T>) -> Result<Array2<T>> {
    if a.dim() != b.dim() {
        bail_validation!("cosine operands differ: {:?} vs {:?}", a.dim(), b.dim());
    }
    let (h, w, ch) = a.dim();
    let eps = c::<T>(COSINE_NORM_EPS);
    let mut out = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = T::zero();
            let mut na2 = T::zero();
            let mut nb2 = T::zero();
            for cc in 0..ch {
                let (pa, pb) = (a[[y, x, cc]], b[[y, x, cc]]);
                dot += pa * pb;
                na2 += pa * pa;
                nb2 += pb * pb;
            }
            let (na, nb) = (na2.sqrt(), nb2.sqrt());
            out[[y, x]] = if na < eps || nb < eps { T::zero() } else { dot / (na * nb) };
        }
    }
    Ok(out)
}

/// Full unit: `R = cos(RU * SE(U), SE(F))`, `C = R * F + F`.
pub fn gcu_forward<T: Elem>(
    f: &Array3<T>,
    s: &Array3<T>,
    u: &Array3<T>,
    se_f: &SeWeights<T>,
    se_u: &SeWeights<T>,
) -> Result<GcuOutput<T>> {
    let (h, w, ch) = f.dim();
    if u.dim() != (h, w, ch) {
        bail_validation!("U must match F: F is {:?}, U is {:?}", f.dim(), u.dim());
    }
    if s.dim().2 != ch {
        bail_validation!("S must carry {ch} channels like F, got {:?}", s.dim());
    }
    se_f.validate(ch, "F")?;
    se_u.validate(ch, "U")?;
    let ru = re_upsample(s, (h, w))?;
    let gated_u = se_gate(u, se_u)?;
    let gated_f = se_gate(f, se_f)?;
    let residual = pixelwise_cosine(&(&ru * &gated_u), &gated_f)?;
    let updated_skip = propagate_residual(&residual, f)?;
    Ok(GcuOutput { residual, updated_skip })
}

/// Residual fusion `X' = R * X + X` with `R` broadcast across channels; used
/// both for the skip update itself and for later same-row nodes.
pub fn propagate_residual<T: Elem>(r: &Array2<T>, x: &Array3<T>) -> Result<Array3<T>> {
    let (h, w, ch) = x.dim();
    if r.dim() != (h, w) {
        bail_validation!("residual {:?} does not match feature map {:?}", r.dim(), x.dim());
    }
    let mut out = x.clone();
    for y in 0..h {
        for xx in 0..w {
            let rv = r[[y, xx]];
            for cc in 0..ch {
                out[[y, xx, cc]] = rv * x[[y, xx, cc]] + x[[y, xx, cc]];
            }
        }
    }
    Ok(out)
}

// ---- tape versions ---------------------------------------------------------

/// SE weight nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl SeVars {
    /// Looks up `{prefix}.fc1.w` etc. in a parameter binding.
    pub fn bound(b: &Binding, prefix: &str) -> Self {
        SeVars {
            w1: b.id(&format!("{prefix}.fc1.w")),
            b1: b.id(&format!("{prefix}.fc1.b")),
            w2: b.id(&format!("{prefix}.fc2.w")),
            b2: b.id(&format!("{prefix}.fc2.b")),
        }
    }
}

/// Tape translation of [`se_gate`].
pub fn se_gate_t<T: Elem>(t: &mut Tape<T>, x: VarId, se: &SeVars) -> VarId {
    let ch = t.value(x).shape()[2];
    let gap = t.global_avg_hw(x);
    let row = t.reshape(gap, &[1, ch]);
    let h1 = t.matmul(row, se.w1);
    let h1 = t.add_bias(h1, se.b1);
    let h1 = t.relu(h1);
    let h2 = t.matmul(h1, se.w2);
    let h2 = t.add_bias(h2, se.b2);
    let gate = t.sigmoid(h2);
    let gate = t.reshape(gate, &[ch]);
    t.mul_gate(x, gate)
}

/// Tape translation of [`gcu_forward`]; returns `(R, C)` with `R` shaped
/// `(H, W, 1)`.
pub fn gcu_forward_t<T: Elem>(
    t: &mut Tape<T>,
    f: VarId,
    s: VarId,
    u: VarId,
    se_f: &SeVars,
    se_u: &SeVars,
) -> (VarId, VarId) {
    let (h, w) = {
        let shape = t.value(f).shape();
        (shape[0], shape[1])
    };
    let ru = t.upsample_bilinear(s, h, w);
    let gated_u = se_gate_t(t, u, se_u);
    let gated_f = se_gate_t(t, f, se_f);
    let lhs = t.mul(ru, gated_u);
    let r = t.pixelwise_cosine(lhs, gated_f);
    let c = propagate_residual_t(t, r, f);
    (r, c)
}

/// Tape translation of [`propagate_residual`]: `R * X + X` with `R` shaped
/// `(H, W, 1)`.
pub fn propagate_residual_t<T: Elem>(t: &mut Tape<T>, r: VarId, x: VarId) -> VarId {
    let rx = t.mul_spatial(x, r);
    t.add(rx, x)
}
