//! Strided 3D cross-correlation over `[b, t, h, w, c]` tensors and its exact
//! adjoint.
//!
//! Both operators work on the valid region only: an output site exists
//! wherever the whole kernel fits, and callers pad explicitly (see [`pad`]).
//! The input extent along every axis must tile exactly, i.e.
//! `(in - k) % stride == 0`, so that [`reconstruct`] can recover the input
//! dims from the activation dims.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AxisRole, Tensor};

/// Kernel weights `[features, kt, kh, kw, cin]` plus a `(st, sh, sw)` stride.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    weights: Tensor,
    stride: [usize; 3],
}

/// Padding `(before, after)` along time, height and width.
pub type Pads = [[usize; 2]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub features: usize,
    pub extent: [usize; 3],
    pub in_channels: usize,
    pub stride: [usize; 3],
}

impl Geometry {
    pub fn weight_dims(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.extent;
        [self.features, kt, kh, kw, self.in_channels]
    }
}

impl KernelStack {
    pub fn new(weights: Tensor, stride: [usize; 3]) -> Result<Self> {
        if weights.ndim() != 5 {
            return Err(Error::shape("KernelStack::new", weights.dims(), &[0; 5]));
        }
        if weights.dims().iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!(
                "kernel dims must be positive, got {:?}",
                weights.dims()
            )));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Domain(format!("stride must be positive, got {stride:?}")));
        }
        Ok(KernelStack { weights, stride })
    }

    pub fn zeros(geom: Geometry) -> Result<Self> {
        Self::new(Tensor::zeros(&geom.weight_dims()), geom.stride)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            features: self.features(),
            extent: self.extent(),
            in_channels: self.in_channels(),
            stride: self.stride,
        }
    }

    pub fn features(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn extent(&self) -> [usize; 3] {
        let d = self.weights.dims();
        [d[1], d[2], d[3]]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[4]
    }

    pub fn stride(&self) -> [usize; 3] {
        self.stride
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    /// Number of weights in one feature's kernel.
    pub fn atom_len(&self) -> usize {
        self.weights.len() / self.features()
    }

    pub fn atom(&self, f: usize) -> &[f32] {
        let n = self.atom_len();
        &self.weights.data()[f * n..(f + 1) * n]
    }

    pub fn atom_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.atom_len();
        &mut self.weights.data_mut()[f * n..(f + 1) * n]
    }
}

/// Activation dims produced by correlating an input of `input` dims with `k`.
pub fn output_dims(input: &[usize], k: &KernelStack) -> Result<[usize; 5]> {
    let &[b, t, h, w, c] = input else {
        return Err(Error::shape("correlate", input, k.weights.dims()));
    };
    if c != k.in_channels() {
        return Err(Error::shape("correlate", input, k.weights.dims()));
    }
    let mut out = [b, 0, 0, 0, k.features()];
    for (axis, (&n, (&kk, &s))) in [t, h, w]
        .iter()
        .zip(k.extent().iter().zip(&k.stride))
        .enumerate()
    {
        if kk > n || (n - kk) % s != 0 {
            return Err(Error::shape("correlate", input, k.weights.dims()));
        }
        out[axis + 1] = (n - kk) / s + 1;
    }
    Ok(out)
}

/// Input dims whose correlation with `k` has `acts` dims.
pub fn input_dims(acts: &[usize], k: &KernelStack) -> Result<[usize; 5]> {
    let &[b, t, h, w, f] = acts else {
        return Err(Error::shape("reconstruct", acts, k.weights.dims()));
    };
    if f != k.features() || [t, h, w].contains(&0) {
        return Err(Error::shape("reconstruct", acts, k.weights.dims()));
    }
    let [kt, kh, kw] = k.extent();
    let [st, sh, sw] = k.stride;
    Ok([
        b,
        (t - 1) * st + kt,
        (h - 1) * sh + kh,
        (w - 1) * sw + kw,
        k.in_channels(),
    ])
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Walks every (batch, output site) pair, handing the caller the flat output
/// site index and, for each `(dt, dh)` kernel row, the flat offset of the
/// matching contiguous `kw * cin` input row and kernel row.
struct SiteWalk {
    in_dims: [usize; 5],
    out_dims: [usize; 5],
    extent: [usize; 3],
    stride: [usize; 3],
}

impl SiteWalk {
    fn new(in_dims: [usize; 5], out_dims: [usize; 5], k: &KernelStack) -> Self {
        SiteWalk {
            in_dims,
            out_dims,
            extent: k.extent(),
            stride: k.stride,
        }
    }

    fn row_len(&self) -> usize {
        self.extent[2] * self.in_dims[4]
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, &[(usize, usize)])) {
        let [b, t, h, w, c] = self.in_dims;
        let [_, ot, oh, ow, _] = self.out_dims;
        let [kt, kh, kw] = self.extent;
        let [st, sh, sw] = self.stride;
        let row_len = kw * c;
        let mut rows = Vec::with_capacity(kt * kh);
        let mut site = 0;
        for bi in 0..b {
            for ti in 0..ot {
                for hi in 0..oh {
                    for wi in 0..ow {
                        rows.clear();
                        for dt in 0..kt {
                            for dh in 0..kh {
                                let y = ((bi * t + ti * st + dt) * h + hi * sh + dh) * w + wi * sw;
                                rows.push((y * c, (dt * kh + dh) * row_len));
                            }
                        }
                        f(site, &rows);
                        site += 1;
                    }
                }
            }
        }
    }
}

/// Strided valid cross-correlation (no kernel flip).
///
/// `output[b, t', h', w', f] = sum_{dt,dh,dw,c} input[b, t'*st+dt, h'*sh+dh, w'*sw+dw, c] * k[f, dt, dh, dw, c]`
pub fn correlate(input: &Tensor, k: &KernelStack) -> Result<Tensor> {
    let out_dims = output_dims(input.dims(), k)?;
    let in_dims: [usize; 5] = input.dims().try_into().expect("checked 5-D");
    let walk = SiteWalk::new(in_dims, out_dims, k);
    let nf = k.features();
    let row_len = walk.row_len();
    let atom_len = k.atom_len();
    let x = input.data();
    let wts = k.weights.data();
    let mut out = vec![0.0f32; out_dims.iter().product()];
    walk.for_each(|site, rows| {
        let dst = &mut out[site * nf..(site + 1) * nf];
        for &(xo, ko) in rows {
            let xr = &x[xo..xo + row_len];
            for (f, d) in dst.iter_mut().enumerate() {
                let base = f * atom_len + ko;
                *d += dot(xr, &wts[base..base + row_len]);
            }
        }
    });
    Tensor::new(&out_dims, out)?.with_roles(&AxisRole::VIDEO)
}

/// Transposed correlation: the exact adjoint of [`correlate`] for the same
/// kernel stack. Every activation stamps its scaled kernel at its receptive
/// field; zero activations are skipped.
pub fn reconstruct(acts: &Tensor, k: &KernelStack) -> Result<Tensor> {
    let in_dims = input_dims(acts.dims(), k)?;
    let out_dims: [usize; 5] = acts.dims().try_into().expect("checked 5-D");
    let walk = SiteWalk::new(in_dims, out_dims, k);
    let nf = k.features();
    let row_len = walk.row_len();
    let atom_len = k.atom_len();
    let a = acts.data();
    let wts = k.weights.data();
    let mut out = vec![0.0f32; in_dims.iter().product()];
    walk.for_each(|site, rows| {
        let src = &a[site * nf..(site + 1) * nf];
        if src.iter().all(|&v| v == 0.0) {
            return;
        }
        for &(xo, ko) in rows {
            let dst = &mut out[xo..xo + row_len];
            for (f, &av) in src.iter().enumerate() {
                if av != 0.0 {
                    let base = f * atom_len + ko;
                    axpy(av, &wts[base..base + row_len], dst);
                }
            }
        }
    });
    Tensor::new(&in_dims, out)?.with_roles(&AxisRole::VIDEO)
}

/// Gradient of `<correlate(input, W), grad_out>` with respect to `W`, i.e.
/// `G[f, o] = sum_{b,s} grad_out[b, s, f] * input[b, s*stride + o]`.
/// Returned with the dims of `k`'s weights; `k` supplies geometry only.
pub fn kernel_gradient(input: &Tensor, grad_out: &Tensor, k: &KernelStack) -> Result<Tensor> {
    let out_dims = output_dims(input.dims(), k)?;
    if grad_out.dims() != out_dims {
        return Err(Error::shape("kernel_gradient", grad_out.dims(), &out_dims));
    }
    let in_dims: [usize; 5] = input.dims().try_into().expect("checked 5-D");
    let walk = SiteWalk::new(in_dims, out_dims, k);
    let nf = k.features();
    let row_len = walk.row_len();
    let atom_len = k.atom_len();
    let x = input.data();
    let g = grad_out.data();
    let mut grad = vec![0.0f32; k.weights.len()];
    walk.for_each(|site, rows| {
        let src = &g[site * nf..(site + 1) * nf];
        for (f, &gv) in src.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for &(xo, ko) in rows {
                let base = f * atom_len + ko;
                axpy(gv, &x[xo..xo + row_len], &mut grad[base..base + row_len]);
            }
        }
    });
    Tensor::new(k.weights.dims(), grad)
}

/// Zero-pad the time/height/width axes of a 5-D tensor.
pub fn pad(x: &Tensor, pads: Pads) -> Result<Tensor> {
    let &[b, t, h, w, c] = x.dims() else {
        return Err(Error::shape("pad", x.dims(), &[0; 5]));
    };
    if pads == [[0; 2]; 3] {
        return Ok(x.clone());
    }
    let (nt, nh, nw) = (
        t + pads[0][0] + pads[0][1],
        h + pads[1][0] + pads[1][1],
        w + pads[2][0] + pads[2][1],
    );
    let mut out = Tensor::zeros(&[b, nt, nh, nw, c]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let s = ((bi * t + ti) * h + hi) * w * c;
                let d = (((bi * nt + ti + pads[0][0]) * nh + hi + pads[1][0]) * nw + pads[2][0]) * c;
                dst[d..d + w * c].copy_from_slice(&src[s..s + w * c]);
            }
        }
    }
    out.with_roles(&AxisRole::VIDEO)
}

/// Remove padding added by [`pad`]; this is also `pad`'s adjoint.
pub fn crop(x: &Tensor, pads: Pads) -> Result<Tensor> {
    let &[b, nt, nh, nw, c] = x.dims() else {
        return Err(Error::shape("crop", x.dims(), &[0; 5]));
    };
    if pads == [[0; 2]; 3] {
        return Ok(x.clone());
    }
    let sum = |a: usize| pads[a][0] + pads[a][1];
    if sum(0) >= nt || sum(1) >= nh || sum(2) >= nw {
        return Err(Error::shape("crop", x.dims(), &[sum(0), sum(1), sum(2)]));
    }
    let (t, h, w) = (nt - sum(0), nh - sum(1), nw - sum(2));
    let mut out = Tensor::zeros(&[b, t, h, w, c]);
    let src = x.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let d = ((bi * t + ti) * h + hi) * w * c;
                let s = (((bi * nt + ti + pads[0][0]) * nh + hi + pads[1][0]) * nw + pads[2][0]) * c;
                dst[d..d + w * c].copy_from_slice(&src[s..s + w * c]);
            }
        }
    }
    out.with_roles(&AxisRole::VIDEO)
}

/// Padding that makes a valid correlation along one axis produce exactly
/// `out` sites: total `(out - 1) * stride + k - n`, split with the smaller
/// half first.
pub fn pad_for_output(n: usize, k: usize, stride: usize, out: usize) -> Result<[usize; 2]> {
    let need = (out - 1) * stride + k;
    if need < n {
        return Err(Error::Config(format!(
            "extent {n} with kernel {k} stride {stride} cannot yield {out} sites without cropping"
        )));
    }
    let total = need - n;
    Ok([total / 2, total - total / 2])
}

/// Interaction kernel `Phi^T Phi` of a convolutional dictionary, restricted
/// to the offsets at which two atoms overlap.
///
/// `correlate(reconstruct(a, k), k)` equals [`Gram::apply`] of `a` exactly
/// in real arithmetic; the gram route costs `O(nnz(a) * offsets * features)`
/// instead of two dense passes over the input.
#[derive(Debug, Clone)]
pub struct Gram {
    features: usize,
    /// Per axis, the largest site offset at which atoms still overlap.
    reach: [usize; 3],
    /// `[offset][g][f]`, offsets enumerated row-major over `[-reach, reach]^3`.
    table: Vec<f32>,
}

impl Gram {
    pub fn new(k: &KernelStack) -> Self {
        let nf = k.features();
        let ext = k.extent();
        let stride = k.stride;
        let reach = [0, 1, 2].map(|a| (ext[a] - 1) / stride[a]);
        let span = reach.map(|r| 2 * r + 1);
        let n_off = span.iter().product::<usize>();
        let c = k.in_channels();
        let mut table = vec![0.0f32; n_off * nf * nf];
        let mut oi = 0;
        for dt in -(reach[0] as isize)..=reach[0] as isize {
            for dh in -(reach[1] as isize)..=reach[1] as isize {
                for dw in -(reach[2] as isize)..=reach[2] as isize {
                    let shift = [
                        dt * stride[0] as isize,
                        dh * stride[1] as isize,
                        dw * stride[2] as isize,
                    ];
                    // Overlap of [0, k) with [shift, shift + k) per axis.
                    let lo = [0, 1, 2].map(|a| shift[a].max(0) as usize);
                    let hi = [0, 1, 2].map(|a| (ext[a] as isize).min(ext[a] as isize + shift[a]) as usize);
                    for g in 0..nf {
                        let ag = k.atom(g);
                        for f in 0..nf {
                            let af = k.atom(f);
                            // G[D][f][g] = sum_o phi_f[o] * phi_g[o + D*stride]
                            let mut acc = 0.0f64;
                            for t in lo[0]..hi[0] {
                                for h in lo[1]..hi[1] {
                                    let w0 = lo[2];
                                    let w1 = hi[2];
                                    if w1 <= w0 {
                                        continue;
                                    }
                                    let tf = (t as isize - shift[0]) as usize;
                                    let hf = (h as isize - shift[1]) as usize;
                                    let wf = (w0 as isize - shift[2]) as usize;
                                    let pf = ((tf * ext[1] + hf) * ext[2] + wf) * c;
                                    let pg = ((t * ext[1] + h) * ext[2] + w0) * c;
                                    let len = (w1 - w0) * c;
                                    acc += af[pf..pf + len]
                                        .iter()
                                        .zip(&ag[pg..pg + len])
                                        .map(|(&x, &y)| x as f64 * y as f64)
                                        .sum::<f64>();
                                }
                            }
                            table[(oi * nf + g) * nf + f] = acc as f32;
                        }
                    }
                    oi += 1;
                }
            }
        }
        Gram {
            features: nf,
            reach,
            table,
        }
    }

    /// Accumulate `correlate(reconstruct(a))` into `out` (same layout as
    /// `a`, `[b, t', h', w', f]`), in `f64`.
    pub fn apply(&self, act_dims: &[usize], a: &[f32], out: &mut [f64]) {
        let [b, t, h, w, nf] = act_dims.try_into().expect("5-D activation dims");
        debug_assert_eq!(nf, self.features);
        let r = self.reach.map(|v| v as isize);
        let span = self.reach.map(|v| 2 * v + 1);
        let size = [t as isize, h as isize, w as isize];
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let s = (((bi * t + ti) * h + hi) * w + wi) * nf;
                        let src = &a[s..s + nf];
                        for (g, &av) in src.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let av = av as f64;
                            for dt in -r[0]..=r[0] {
                                let tt = ti as isize + dt;
                                if tt < 0 || tt >= size[0] {
                                    continue;
                                }
                                for dh in -r[1]..=r[1] {
                                    let hh = hi as isize + dh;
                                    if hh < 0 || hh >= size[1] {
                                        continue;
                                    }
                                    for dw in -r[2]..=r[2] {
                                        let ww = wi as isize + dw;
                                        if ww < 0 || ww >= size[2] {
                                            continue;
                                        }
                                        let oi = (((dt + r[0]) as usize * span[1]
                                            + (dh + r[1]) as usize)
                                            * span[2])
                                            + (dw + r[2]) as usize;
                                        let row = &self.table[(oi * nf + g) * nf..(oi * nf + g + 1) * nf];
                                        let d = ((((bi * t) + tt as usize) * h + hh as usize) * w
                                            + ww as usize)
                                            * nf;
                                        for (o, &gv) in out[d..d + nf].iter_mut().zip(row) {
                                            *o += gv as f64 * av;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(dims: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn hand_sum_example() {
        let x = Tensor::new(&[1, 1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = KernelStack::new(Tensor::new(&[1, 1, 1, 2, 1], vec![1.0, 1.0]).unwrap(), [1, 1, 1]).unwrap();
        assert_eq!(correlate(&x, &k).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn delta_kernel_is_identity_window() {
        let mut rng = crate::rng::seeded(5);
        let x = random(&[1, 2, 4, 5, 2], &mut rng);
        let mut w = Tensor::zeros(&[2, 1, 1, 1, 2]);
        w.set(&[0, 0, 0, 0, 0], 1.0);
        w.set(&[1, 0, 0, 0, 1], 1.0);
        let k = KernelStack::new(w, [1, 1, 1]).unwrap();
        let y = correlate(&x, &k).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn single_atom_stamp() {
        let k = KernelStack::new(Tensor::new(&[1, 1, 1, 2, 1], vec![1.0, 1.0]).unwrap(), [1, 1, 1]).unwrap();
        let mut a = Tensor::zeros(&[1, 1, 1, 3, 1]);
        a.set(&[0, 0, 0, 1, 0], 1.0);
        assert_eq!(reconstruct(&a, &k).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        let zero = reconstruct(&Tensor::zeros(&[1, 1, 1, 3, 1]), &k).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_channels_name_both_shapes() {
        let x = Tensor::zeros(&[1, 1, 4, 4, 3]);
        let k = KernelStack::new(Tensor::zeros(&[2, 1, 2, 2, 2]), [1, 1, 1]).unwrap();
        let err = correlate(&x, &k).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 1, 4, 4, 3]") && msg.contains("[2, 1, 2, 2, 2]"), "{msg}");
    }

    #[test]
    fn non_tiling_extent_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 5, 5, 1]);
        let k = KernelStack::new(Tensor::zeros(&[1, 1, 2, 2, 1]), [1, 2, 2]).unwrap();
        assert!(matches!(correlate(&x, &k), Err(Error::Shape { .. })));
        let k = KernelStack::new(Tensor::zeros(&[1, 1, 6, 2, 1]), [1, 1, 1]).unwrap();
        assert!(matches!(correlate(&x, &k), Err(Error::Shape { .. })));
    }

    #[test]
    fn pad_crop_are_adjoint() {
        let mut rng = crate::rng::seeded(8);
        let pads = [[0, 1], [2, 1], [1, 3]];
        let x = random(&[2, 2, 3, 4, 2], &mut rng);
        let px = pad(&x, pads).unwrap();
        assert_eq!(px.dims(), &[2, 3, 6, 8, 2]);
        let y = random(px.dims(), &mut rng);
        let lhs = px.dot(&y).unwrap();
        let rhs = x.dot(&crop(&y, pads).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
        assert_eq!(crop(&px, pads).unwrap(), x);
    }

    #[test]
    fn gram_matches_two_pass_route() {
        let mut rng = crate::rng::seeded(21);
        for (dims, kdims, stride) in [
            ([1, 3, 12, 16, 2], [3, 3, 4, 4, 2], [1, 2, 2]),
            ([2, 1, 9, 9, 1], [4, 1, 3, 3, 1], [1, 1, 1]),
            ([1, 3, 16, 16, 3], [5, 3, 8, 8, 3], [1, 4, 4]),
        ] {
            let k = KernelStack::new(random(&kdims, &mut rng), stride).unwrap();
            let od = output_dims(&dims, &k).unwrap();
            let a = Tensor::from_fn(&od, |_| {
                if rng.random_bool(0.3) {
                    rng.random_range(-1.0f32..1.0)
                } else {
                    0.0
                }
            });
            let two_pass = correlate(&reconstruct(&a, &k).unwrap(), &k).unwrap();
            let mut out = vec![0.0f64; a.len()];
            Gram::new(&k).apply(&od, a.data(), &mut out);
            for (x, y) in two_pass.data().iter().zip(&out) {
                assert!((*x as f64 - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }
}
