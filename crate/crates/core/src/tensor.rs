//! Dense row-major tensors of `f32`.
//!
//! Layout is always channels-last: a 5-D activation or image tensor is
//! `[batch, time, height, width, channel]` and the last axis varies fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisRole {
    Batch,
    Time,
    Height,
    Width,
    Channel,
}

impl AxisRole {
    /// Roles of the canonical 5-D video layout.
    pub const VIDEO: [AxisRole; 5] = [
        AxisRole::Batch,
        AxisRole::Time,
        AxisRole::Height,
        AxisRole::Width,
        AxisRole::Channel,
    ];
}

/// Equality compares dims and values; axis roles are metadata.
#[derive(Debug, Clone)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    roles: Option<Vec<AxisRole>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", dims, &[data.len()]));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            roles: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
            roles: None,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            roles: None,
        }
    }

    pub fn with_roles(mut self, roles: &[AxisRole]) -> Result<Self> {
        if roles.len() != self.dims.len() {
            return Err(Error::shape("Tensor::with_roles", &self.dims, &[roles.len()]));
        }
        self.roles = Some(roles.to_vec());
        Ok(self)
    }

    pub fn roles(&self) -> Option<&[AxisRole]> {
        self.roles.as_deref()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the same data under new dims. Roles are dropped.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("Tensor::reshape", &self.dims, dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data,
            roles: None,
        })
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn same_dims(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(())
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64).abs()).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f32, other: &Tensor) -> Result<()> {
        self.same_dims(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_dims(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
            roles: self.roles.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            roles: self.roles.clone(),
        }
    }
}

/// Mean and population standard deviation over all elements.
pub fn stats(x: &Tensor) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::Domain("stats of an empty tensor".into()));
    }
    // Welford's single-pass update.
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, &v) in x.data().iter().enumerate() {
        let v = v as f64;
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = (m2 / x.len() as f64).max(0.0);
    Ok((mean, var.sqrt()))
}

/// Per-axis overlap weights of an area-average resize from `src` to `dst`
/// samples. Entry `i` lists `(source index, overlap length)` for output `i`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let w = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (w > 1e-12).then_some((j, w))
                })
                .collect()
        })
        .collect()
}

/// Area-average downsampling of the height/width axes of a
/// `[b, t, h, w, c]` tensor to `target = (H, W)`.
pub fn downsample_area(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let &[b, t, h, w, c] = x.dims() else {
        return Err(Error::shape("downsample_area", x.dims(), &[0; 5]));
    };
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(Error::Domain(format!(
            "downsample_area cannot resize {h}x{w} to {th}x{tw}"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(x.clone());
    }
    let wy = area_weights(h, th);
    let wx = area_weights(w, tw);
    let norm = (h as f64 / th as f64) * (w as f64 / tw as f64);
    let src = x.data();
    let mut out = Tensor::zeros(&[b, t, th, tw, c]);
    let mut acc = vec![0.0f64; c];
    let frame_in = h * w * c;
    let frame_out = th * tw * c;
    for frame in 0..b * t {
        let base_in = frame * frame_in;
        let base_out = frame * frame_out;
        for (oy, ys) in wy.iter().enumerate() {
            for (ox, xs) in wx.iter().enumerate() {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &(iy, fy) in ys {
                    for &(ix, fx) in xs {
                        let f = fy * fx;
                        let p = base_in + (iy * w + ix) * c;
                        for ch in 0..c {
                            acc[ch] += f * src[p + ch] as f64;
                        }
                    }
                }
                let q = base_out + (oy * tw + ox) * c;
                for ch in 0..c {
                    out.data_mut()[q + ch] = (acc[ch] / norm) as f32;
                }
            }
        }
    }
    Ok(out.with_roles(&AxisRole::VIDEO)?)
}
