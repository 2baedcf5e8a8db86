//! First-layer activation analysis: sparsity-matched thresholding, overlay
//! images and the disparity selectivity index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::Pads;
use crate::data::image::{write_ppm, RgbImage};
use crate::error::{Error, Result};
use crate::net::LayerPlan;
use crate::tensor::Tensor;

/// Magnitude threshold `t` such that `count(|a| > t)` over all `acts` is the
/// largest count not exceeding `target_nnz`. Magnitudes tied at the cut are
/// all suppressed. `target_nnz == 0` gives `+inf`; a target covering every
/// value gives a negative threshold so that zeros survive too.
pub fn sparsity_match_threshold<'a>(acts: impl IntoIterator<Item = &'a Tensor>, target_nnz: usize) -> Result<f32> {
    let mut mags: Vec<f32> = acts.into_iter().flat_map(|t| t.data().iter().map(|v| v.abs())).collect();
    if let Some(v) = mags.iter().find(|v| v.is_nan()) {
        return Err(Error::Domain(format!("activation {v} is not comparable")));
    }
    if target_nnz == 0 {
        return Ok(f32::INFINITY);
    }
    if target_nnz >= mags.len() {
        return Ok(-f32::MIN_POSITIVE);
    }
    // Descending; the (target+1)-th largest magnitude is the cut.
    let (_, cut, _) = mags.select_nth_unstable_by(target_nnz, |a, b| b.total_cmp(a));
    Ok(*cut)
}

/// Zero every activation with `|a| <= t`.
pub fn apply_threshold(acts: &Tensor, t: f32) -> Tensor {
    acts.map(|v| if v.abs() > t { v } else { 0.0 })
}

/// Where a first-layer activation grid sits on the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteGeometry {
    /// Receptive field `(kh, kw)`.
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    /// `[[top, bottom], [left, right]]` zero padding.
    pub pads: [[usize; 2]; 2],
}

impl SiteGeometry {
    pub fn from_plan(plan: &LayerPlan) -> Self {
        let g = &plan.geometry;
        let p: Pads = plan.pads;
        SiteGeometry {
            kernel: [g.extent[1], g.extent[2]],
            stride: [g.stride[1], g.stride[2]],
            pads: [p[1], p[2]],
        }
    }

    /// Activation grid dims for a `(height, width)` frame.
    pub fn grid(&self, frame: (usize, usize)) -> Option<(usize, usize)> {
        let n = |len: usize, a: usize| {
            let padded = len + self.pads[a][0] + self.pads[a][1];
            (padded >= self.kernel[a] && (padded - self.kernel[a]) % self.stride[a] == 0)
                .then(|| (padded - self.kernel[a]) / self.stride[a] + 1)
        };
        Some((n(frame.0, 0)?, n(frame.1, 1)?))
    }

    /// Frame rows (or columns) `[lo, hi)` covered by site `i` along `axis`.
    pub fn span(&self, axis: usize, i: usize, len: usize) -> (usize, usize) {
        let start = (i * self.stride[axis]) as isize - self.pads[axis][0] as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel[axis] as isize).max(0) as usize).min(len);
        (lo, hi)
    }

    /// Frame pixel at the centre of site `i`'s receptive field, if inside.
    pub fn center(&self, axis: usize, i: usize, len: usize) -> Option<usize> {
        let c = (i * self.stride[axis] + self.kernel[axis] / 2) as isize - self.pads[axis][0] as isize;
        (c >= 0 && (c as usize) < len).then_some(c as usize)
    }
}

/// Magnitudes of feature `f` from a `[1, 1, h, w, F]` activation tensor, as
/// an `[h, w]` map.
pub fn feature_map(acts: &Tensor, f: usize) -> Result<Tensor> {
    let &[1, 1, h, w, nf] = acts.dims() else {
        return Err(Error::shape("feature_map", acts.dims(), &[1, 1, 0, 0, 0]));
    };
    if f >= nf {
        return Err(Error::Domain(format!("feature {f} out of {nf}")));
    }
    let data = acts.data().chunks_exact(nf).map(|s| s[f].abs()).collect();
    Tensor::new(&[h, w], data)
}

/// Grey-scale copy of `frame` with the green channel replaced, over every
/// receptive field of a nonzero activation, by the largest covering
/// `|activation|` scaled so the map's maximum is 255.
pub fn activation_overlay(frame: &RgbImage, map: &Tensor, geom: &SiteGeometry, out: Option<&Path>) -> Result<RgbImage> {
    let (fh, fw) = (frame.height, frame.width);
    let Some((gh, gw)) = geom.grid((fh, fw)) else {
        return Err(Error::shape("activation_overlay", &[fh, fw], map.dims()));
    };
    if map.dims() != [gh, gw] {
        return Err(Error::shape("activation_overlay", map.dims(), &[gh, gw]));
    }
    let peak = map.max_abs();
    let mut green = vec![0.0f32; fh * fw];
    if peak > 0.0 {
        for i in 0..gh {
            for j in 0..gw {
                let v = map.get(&[i, j]).abs() / peak * 255.0;
                if v == 0.0 {
                    continue;
                }
                let (y0, y1) = geom.span(0, i, fh);
                let (x0, x1) = geom.span(1, j, fw);
                for y in y0..y1 {
                    for g in &mut green[y * fw + x0..y * fw + x1] {
                        *g = g.max(v);
                    }
                }
            }
        }
    }
    let mut img = RgbImage::new(fw, fh);
    for y in 0..fh {
        for x in 0..fw {
            let [r, g, b] = frame.pixel(x, y);
            let grey = (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32).round() as u8;
            let gv = green[y * fw + x];
            let gch = if gv > 0.0 { gv.round().clamp(1.0, 255.0) as u8 } else { grey };
            img.set_pixel(x, y, [grey, gch, grey]);
        }
    }
    if let Some(p) = out {
        write_ppm(p, &img)?;
    }
    Ok(img)
}

/// `max(mass) / sum(mass)`; `None` when the feature never fires.
pub fn selectivity_index(mass: &[f64]) -> Option<f64> {
    let total: f64 = mass.iter().sum();
    (total > 0.0).then(|| mass.iter().cloned().fold(0.0, f64::max) / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    /// Disparity value of each bin.
    pub bins: Vec<f32>,
    /// `mass[feature][bin]`: summed `|activation|` attributed to the bin.
    pub mass: Vec<Vec<f64>>,
    pub index: Vec<Option<f64>>,
    /// Mean index over the features that fired at all.
    pub mean_index: Option<f64>,
    pub active_features: usize,
}

impl SelectivityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,index");
        for b in &self.bins {
            s.push_str(&format!(",mass_d{b}"));
        }
        s.push('\n');
        for (f, (m, idx)) in self.mass.iter().zip(&self.index).enumerate() {
            s.push_str(&format!("{f},{}", idx.map_or(String::new(), |v| format!("{v:.6}"))));
            for v in m {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Attribute each activation to the frame pixel at its receptive-field
/// centre and accumulate `|a|` into that pixel's planted-disparity bin.
/// Pixels without a planted disparity (background) are ignored; a disparity
/// goes to the nearest bin.
///
/// `acts[i]` is `[1, 1, h, w, F]`; `disparity[i]` is row-major over the
/// `frame` (height, width).
pub fn depth_selectivity(
    acts: &[Tensor],
    disparity: &[Vec<Option<f32>>],
    frame: (usize, usize),
    geom: &SiteGeometry,
    bins: &[f32],
) -> Result<SelectivityReport> {
    if acts.len() != disparity.len() {
        return Err(Error::shape("depth_selectivity", &[acts.len()], &[disparity.len()]));
    }
    if bins.is_empty() {
        return Err(Error::Domain("no disparity bins".into()));
    }
    let (fh, fw) = frame;
    let grid = geom
        .grid(frame)
        .ok_or_else(|| Error::Domain(format!("geometry {geom:?} does not tile a {fh}x{fw} frame")))?;
    let nf = acts.first().map_or(0, |a| a.dims().last().copied().unwrap_or(0));
    let mut mass = vec![vec![0.0f64; bins.len()]; nf];
    for (a, d) in acts.iter().zip(disparity) {
        if a.dims() != [1, 1, grid.0, grid.1, nf] {
            return Err(Error::shape("depth_selectivity", a.dims(), &[1, 1, grid.0, grid.1, nf]));
        }
        if d.len() != fh * fw {
            return Err(Error::shape("depth_selectivity", &[d.len()], &[fh * fw]));
        }
        for i in 0..grid.0 {
            let Some(y) = geom.center(0, i, fh) else { continue };
            for j in 0..grid.1 {
                let Some(x) = geom.center(1, j, fw) else { continue };
                let Some(dv) = d[y * fw + x] else { continue };
                let bin = (0..bins.len())
                    .min_by(|&p, &q| (bins[p] - dv).abs().total_cmp(&(bins[q] - dv).abs()))
                    .expect("bins nonempty");
                let site = (i * grid.1 + j) * nf;
                for (f, &v) in a.data()[site..site + nf].iter().enumerate() {
                    mass[f][bin] += v.abs() as f64;
                }
            }
        }
    }
    let index: Vec<Option<f64>> = mass.iter().map(|m| selectivity_index(m)).collect();
    let active: Vec<f64> = index.iter().flatten().copied().collect();
    let mean_index = (!active.is_empty()).then(|| active.iter().sum::<f64>() / active.len() as f64);
    Ok(SelectivityReport {
        bins: bins.to_vec(),
        mass,
        index,
        mean_index,
        active_features: active.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let a = t(&[3.0, 1.0, 2.0]);
        assert_eq!(sparsity_match_threshold([&a], 2).unwrap(), 1.0);
        assert_eq!(sparsity_match_threshold([&a], 0).unwrap(), f32::INFINITY);
        let all = sparsity_match_threshold([&a], 3).unwrap();
        assert!(all < 0.0);
        assert_eq!(apply_threshold(&t(&[0.0, 1.0]), all).count_nonzero(), 1);
        // Ties at the cut are dropped together.
        let tied = t(&[5.0, 2.0, 2.0, 2.0, 1.0]);
        let th = sparsity_match_threshold([&tied], 3).unwrap();
        assert_eq!(apply_threshold(&tied, th).count_nonzero(), 1);
    }

    #[test]
    fn threshold_matches_sort_oracle() {
        let mut rng = crate::rng::seeded(5);
        for _ in 0..200 {
            let n = rng.random_range(1..60);
            let v: Vec<f32> = (0..n)
                .map(|_| (rng.random_range(-4i32..5) as f32) * if rng.random_bool(0.3) { 0.0 } else { 1.0 })
                .collect();
            let parts = [t(&v[..n / 2]), t(&v[n / 2..])];
            let target = rng.random_range(0..=n);
            let th = sparsity_match_threshold(parts.iter(), target).unwrap();
            let survivors = v.iter().filter(|x| x.abs() > th).count();
            // Oracle: best achievable count over every candidate cut.
            let mut cuts: Vec<f32> = v.iter().map(|x| x.abs()).collect();
            cuts.push(-1.0);
            let best = cuts
                .iter()
                .map(|&c| v.iter().filter(|x| x.abs() > c).count())
                .filter(|&k| k <= target)
                .max()
                .unwrap();
            assert!(survivors <= target);
            assert_eq!(survivors, best);
        }
    }

    fn geom() -> SiteGeometry {
        SiteGeometry {
            kernel: [4, 4],
            stride: [2, 2],
            pads: [[1, 1], [1, 1]],
        }
    }

    fn frame() -> RgbImage {
        let mut f = RgbImage::new(16, 8);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = (i * 37 % 251) as u8;
        }
        f
    }

    #[test]
    fn zero_activations_give_greyscale() {
        let img = activation_overlay(&frame(), &Tensor::zeros(&[4, 8]), &geom(), None).unwrap();
        assert!(img.data.chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        assert!(activation_overlay(&frame(), &Tensor::zeros(&[4, 7]), &geom(), None).is_err());
    }

    #[test]
    fn single_activation_marks_its_receptive_field() {
        let mut map = Tensor::zeros(&[4, 8]);
        map.set(&[1, 3], -2.0);
        let img = activation_overlay(&frame(), &map, &geom(), None).unwrap();
        // Site (1, 3): rows 2*1-1 .. +4 = [1, 5), cols 2*3-1 .. +4 = [5, 9).
        for y in 0..8 {
            for x in 0..16 {
                let [r, g, _] = img.pixel(x, y);
                let inside = (1..5).contains(&y) && (5..9).contains(&x);
                assert_eq!(g == 255, inside, "({x},{y})");
                if !inside {
                    assert_eq!(r, g);
                }
            }
        }
    }

    #[test]
    fn selectivity_index_cases() {
        assert_eq!(selectivity_index(&[0.0, 3.0, 0.0]), Some(1.0));
        assert_eq!(selectivity_index(&[1.0; 4]), Some(0.25));
        assert_eq!(selectivity_index(&[0.0; 2]), None);
    }

    #[test]
    fn selectivity_attributes_to_centres() {
        let g = geom();
        // Left half of the frame at disparity 1, right half at 5.
        let disp: Vec<Option<f32>> = (0..8 * 16).map(|i| Some(if i % 16 < 8 { 1.0 } else { 5.0 })).collect();
        let mut a = Tensor::zeros(&[1, 1, 4, 8, 2]);
        // Feature 0 fires only on the left, feature 1 everywhere.
        for i in 0..4 {
            for j in 0..8 {
                if j < 4 {
                    a.set(&[0, 0, i, j, 0], 1.0);
                }
                a.set(&[0, 0, i, j, 1], 1.0);
            }
        }
        let r = depth_selectivity(&[a], &[disp], (8, 16), &g, &[1.0, 5.0]).unwrap();
        assert_eq!(r.index[0], Some(1.0));
        assert_eq!(r.index[1], Some(0.5));
        assert_eq!(r.mean_index, Some(0.75));
    }
}
