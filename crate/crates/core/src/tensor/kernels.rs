//! Numeric kernels shared by the tape primitives. All loops run in a fixed
//! order so results are bitwise reproducible.

use super::Scalar;

/// Broadcast result shape under right-aligned (numpy) rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `operand` when viewed in the index space of `out` (0 along
/// broadcast axes).
fn broadcast_strides(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - operand.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..operand.len()).rev() {
        strides[i + offset] = if operand[i] == 1 { 0 } else { acc };
        acc *= operand[i];
    }
    strides
}

/// Iteration plan over an output index space with two (possibly broadcast)
/// operands. Adjacent axes are merged where both operands allow it so the
/// inner loop runs over long contiguous spans.
pub(crate) struct Plan {
    dims: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Plan {
    pub(crate) fn new(out: &[usize], a: &[usize], b: &[usize]) -> Self {
        let sa_full = broadcast_strides(a, out);
        let sb_full = broadcast_strides(b, out);
        let mut dims: Vec<usize> = Vec::new();
        let mut sa: Vec<usize> = Vec::new();
        let mut sb: Vec<usize> = Vec::new();
        for i in 0..out.len() {
            if out[i] == 1 {
                continue;
            }
            if let Some(last) = dims.len().checked_sub(1) {
                let merge_a = sa[last] == sa_full[i] * out[i];
                let merge_b = sb[last] == sb_full[i] * out[i];
                if merge_a && merge_b {
                    dims[last] *= out[i];
                    sa[last] = sa_full[i];
                    sb[last] = sb_full[i];
                    continue;
                }
            }
            dims.push(out[i]);
            sa.push(sa_full[i]);
            sb.push(sb_full[i]);
        }
        if dims.is_empty() {
            dims.push(1);
            sa.push(0);
            sb.push(0);
        }
        Self { dims, sa, sb }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in
    /// row-major order.
    #[inline]
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.dims.len();
        let inner = self.dims[rank - 1];
        let (ia_step, ib_step) = (self.sa[rank - 1], self.sb[rank - 1]);
        let outer: usize = self.dims[..rank - 1].iter().product();
        let mut counter = vec![0usize; rank - 1];
        let (mut base_a, mut base_b) = (0usize, 0usize);
        let mut out = 0;
        for _ in 0..outer {
            let (mut ia, mut ib) = (base_a, base_b);
            for _ in 0..inner {
                f(out, ia, ib);
                out += 1;
                ia += ia_step;
                ib += ib_step;
            }
            for d in (0..rank - 1).rev() {
                counter[d] += 1;
                base_a += self.sa[d];
                base_b += self.sb[d];
                if counter[d] < self.dims[d] {
                    break;
                }
                base_a -= self.sa[d] * self.dims[d];
                base_b -= self.sb[d] * self.dims[d];
                counter[d] = 0;
            }
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` shape, the reverse of a
/// broadcast.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); super::numel(target)];
    Plan::new(out, out, target).for_each(|o, _, t| acc[t] += grad[o]);
    acc
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub(crate) fn new(input: &[usize], k: usize, stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub(crate) fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if it
    /// falls inside the (unpadded) image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = o * self.stride + t;
        if pos < self.pad || pos - self.pad >= extent {
            None
        } else {
            Some(pos - self.pad)
        }
    }
}

/// Unfolds `x` (N,C,H,W) into columns laid out as (C*k*k, N*Ho*Wo).
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Window) -> Vec<T> {
    let np = g.n * g.out_plane();
    let mut cols = vec![T::zero(); g.c * g.k * g.k * np];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let base = ni * g.out_plane();
                    for oh in 0..g.ho {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        let src_row = &plane[ih * g.w..(ih + 1) * g.w];
                        let out_row = &mut dst[base + oh * g.wo..base + (oh + 1) * g.wo];
                        for (ow, slot) in out_row.iter_mut().enumerate() {
                            if let Some(iw) = g.src(ow, kj, g.w) {
                                *slot = src_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto (N,C,H,W).
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window) -> Vec<T> {
    let np = g.n * g.out_plane();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let plane_off = (ni * g.c + ci) * g.h * g.w;
                    let base = ni * g.out_plane();
                    for oh in 0..g.ho {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        for ow in 0..g.wo {
                            if let Some(iw) = g.src(ow, kj, g.w) {
                                x[plane_off + ih * g.w + iw] += src[base + oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Max pooling over (N,C,H,W); padding never wins. Returns the pooled values
/// and, per output, the flat input index of the winner, plus the number of
/// windows whose maximum is attained more than once.
pub(crate) fn max_pool<T: Scalar>(x: &[T], g: &Window) -> (Vec<T>, Vec<usize>, usize) {
    let total = g.n * g.c * g.out_plane();
    let mut out = Vec::with_capacity(total);
    let mut argmax = Vec::with_capacity(total);
    let mut ties = 0;
    for plane in 0..g.n * g.c {
        let off = plane * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                let mut tied = false;
                for ki in 0..g.k {
                    let Some(ih) = g.src(oh, ki, g.h) else { continue };
                    for kj in 0..g.k {
                        let Some(iw) = g.src(ow, kj, g.w) else { continue };
                        let idx = off + ih * g.w + iw;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                            tied = false;
                        } else if x[idx] == best {
                            tied = true;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
                ties += usize::from(tied);
            }
        }
    }
    (out, argmax, ties)
}

/// Layout of a grouped standardization: the tensor is viewed as
/// (outer, groups, inner) and every group is normalized over its
/// `outer * inner` elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub outer: usize,
    pub groups: usize,
    pub inner: usize,
}

impl GroupLayout {
    pub fn group_size(&self) -> usize {
        self.outer * self.inner
    }

    pub fn numel(&self) -> usize {
        self.outer * self.groups * self.inner
    }

    /// Visits the flat indices of group `g`.
    #[inline]
    pub(crate) fn for_group(&self, g: usize, mut f: impl FnMut(usize)) {
        for a in 0..self.outer {
            let base = (a * self.groups + g) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

/// Per-group mean and population variance.
pub(crate) fn group_moments<T: Scalar>(x: &[T], layout: &GroupLayout) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(layout.group_size()).unwrap();
    let mut means = Vec::with_capacity(layout.groups);
    let mut vars = Vec::with_capacity(layout.groups);
    for g in 0..layout.groups {
        let mut sum = T::zero();
        layout.for_group(g, |i| sum += x[i]);
        let mean = sum / count;
        let mut sq = T::zero();
        layout.for_group(g, |i| {
            let d = x[i] - mean;
            sq += d * d;
        });
        means.push(mean);
        vars.push(sq / count);
    }
    (means, vars)
}
