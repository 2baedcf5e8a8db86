//! Stereo clip to network input, and boxes to the window label grid.

use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::kitti::BoundingBox;
use super::{CHANNELS, FRAMES, FRAME_H, FRAME_W, GRID_COLS, GRID_ROWS, WINDOW_H, WINDOW_W};
use crate::error::{Error, Result};
use crate::tensor::{self, AxisRole, Tensor};

/// Three left and three right frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoClip {
    pub left: Vec<RgbImage>,
    pub right: Vec<RgbImage>,
}

impl StereoClip {
    pub fn new(left: Vec<RgbImage>, right: Vec<RgbImage>) -> Result<Self> {
        if left.len() != FRAMES || right.len() != FRAMES {
            return Err(Error::Domain(format!(
                "a clip needs {FRAMES} left and {FRAMES} right frames, got {} and {}",
                left.len(),
                right.len()
            )));
        }
        let (w, h) = (left[0].width, left[0].height);
        if left.iter().chain(&right).any(|f| (f.width, f.height) != (w, h)) {
            return Err(Error::Domain("all frames of a clip must share dimensions".into()));
        }
        Ok(StereoClip { left, right })
    }

    pub fn width(&self) -> usize {
        self.left[0].width
    }

    pub fn height(&self) -> usize {
        self.left[0].height
    }

    /// The left camera's newest frame, on which labels are defined.
    pub fn reference_frame(&self) -> &RgbImage {
        &self.left[FRAMES - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub source_id: String,
    /// Horizontal and vertical factors from source pixels to frame pixels.
    pub scale: (f32, f32),
    /// The clip had zero variance; it was centred but not rescaled.
    pub degenerate_std: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[3, 64, 256, 6]`: channels 0..3 left RGB, 3..6 right RGB.
    pub input: Tensor,
    /// `[4, 8]` in {0, 1}.
    pub labels: Tensor,
    pub meta: ExampleMeta,
}

impl Example {
    /// The input with a leading batch axis, `[1, 3, 64, 256, 6]`.
    pub fn batched_input(&self) -> Tensor {
        let mut dims = vec![1];
        dims.extend_from_slice(self.input.dims());
        self.input
            .clone()
            .reshape(&dims)
            .and_then(|t| t.with_roles(&AxisRole::VIDEO))
            .expect("example input is 4-D")
    }

    pub fn positive_windows(&self) -> usize {
        self.labels.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// Raw `[1, 3, h, w, 6]` tensor in 0..255 units.
fn clip_tensor(clip: &StereoClip) -> Tensor {
    let (h, w) = (clip.height(), clip.width());
    let mut t = Tensor::zeros(&[1, FRAMES, h, w, CHANNELS]);
    let data = t.data_mut();
    for f in 0..FRAMES {
        for (view, img) in [&clip.left[f], &clip.right[f]].into_iter().enumerate() {
            for p in 0..h * w {
                let dst = (f * h * w + p) * CHANNELS + view * 3;
                for c in 0..3 {
                    data[dst + c] = img.data[p * 3 + c] as f32;
                }
            }
        }
    }
    t
}

/// Downsample every frame to 64 x 256, stack the views into six channels,
/// normalise globally to zero mean and unit standard deviation, and build
/// the window label grid from the rescaled boxes.
pub fn preprocess(clip: &StereoClip, boxes: &[BoundingBox], source_id: &str) -> Result<Example> {
    let raw = clip_tensor(clip);
    let small = tensor::downsample_area(&raw, (FRAME_H, FRAME_W))?;
    let (mean, std) = tensor::stats(&small)?;
    let degenerate_std = !(std > 1e-6);
    let scale = if degenerate_std { 1.0 } else { std };
    let mut input = small.map(|v| ((v as f64 - mean) / scale) as f32);
    if !degenerate_std {
        // One refinement pass removes the rounding left by the f32 cast.
        let (m2, s2) = tensor::stats(&input)?;
        input = input.map(|v| ((v as f64 - m2) / s2) as f32);
    }
    let input = input
        .reshape(&[FRAMES, FRAME_H, FRAME_W, CHANNELS])?
        .with_roles(&[AxisRole::Time, AxisRole::Height, AxisRole::Width, AxisRole::Channel])?;

    let sx = FRAME_W as f32 / clip.width() as f32;
    let sy = FRAME_H as f32 / clip.height() as f32;
    let scaled: Vec<BoundingBox> = boxes.iter().map(|b| b.scaled(sx, sy)).collect();
    Ok(Example {
        input,
        labels: window_labels(&scaled),
        meta: ExampleMeta {
            source_id: source_id.to_string(),
            scale: (sx, sy),
            degenerate_std,
        },
    })
}

/// Label window `(r, c)`, covering rows `[16r, 16r+16)` and columns
/// `[32c, 32c+32)`, positive iff some box intersects it with positive area.
/// Boxes are in 256 x 64 frame coordinates and are clamped to the frame.
pub fn window_labels(boxes: &[BoundingBox]) -> Tensor {
    let mut grid = Tensor::zeros(&[GRID_ROWS, GRID_COLS]);
    for b in boxes {
        let b = b.clamped(FRAME_W as f32, FRAME_H as f32);
        for r in 0..GRID_ROWS {
            let (y0, y1) = ((r * WINDOW_H) as f32, ((r + 1) * WINDOW_H) as f32);
            if b.bottom.min(y1) - b.top.max(y0) <= 0.0 {
                continue;
            }
            for c in 0..GRID_COLS {
                let (x0, x1) = ((c * WINDOW_W) as f32, ((c + 1) * WINDOW_W) as f32);
                if b.right.min(x1) - b.left.max(x0) > 0.0 {
                    grid.set(&[r, c], 1.0);
                }
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn positives(g: &Tensor) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                if g.get(&[r, c]) == 1.0 {
                    v.push((r, c));
                }
            }
        }
        v
    }

    #[test]
    fn window_examples() {
        assert!(positives(&window_labels(&[])).is_empty());
        let exact = BoundingBox::new("Car", 0.0, 0.0, 32.0, 16.0);
        assert_eq!(positives(&window_labels(&[exact])), vec![(0, 0)]);
        let b = BoundingBox::new("Car", 30.0, 10.0, 40.0, 20.0);
        assert_eq!(positives(&window_labels(&[b])), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn clamping_is_idempotent() {
        let mut rng = crate::rng::seeded(1);
        for _ in 0..200 {
            let l = rng.random_range(-50.0f32..300.0);
            let t = rng.random_range(-30.0f32..90.0);
            let b = BoundingBox::new("Van", l, t, l + rng.random_range(0.1f32..80.0), t + rng.random_range(0.1f32..40.0));
            let c = b.clamped(FRAME_W as f32, FRAME_H as f32);
            assert_eq!(window_labels(&[b]), window_labels(&[c]));
        }
    }

    fn solid(w: usize, h: usize, rgb: [u8; 3]) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, rgb);
            }
        }
        img
    }

    #[test]
    fn constant_clip_is_flagged() {
        let f = solid(512, 128, [90, 90, 90]);
        let clip = StereoClip::new(vec![f.clone(); 3], vec![f; 3]).unwrap();
        let ex = preprocess(&clip, &[], "gray").unwrap();
        assert!(ex.meta.degenerate_std);
        assert!(ex.input.data().iter().all(|&v| v == 0.0));
        assert_eq!(ex.input.dims(), &[3, 64, 256, 6]);
    }

    #[test]
    fn random_clip_is_normalised_and_boxes_scale() {
        let mut rng = crate::rng::seeded(2);
        let mut frame = || {
            let mut img = RgbImage::new(400, 100);
            img.data.iter_mut().for_each(|v| *v = rng.random());
            img
        };
        let clip = StereoClip::new(vec![frame(), frame(), frame()], vec![frame(), frame(), frame()]).unwrap();
        let half = BoundingBox::new("Car", 0.0, 0.0, 200.0, 50.0);
        let ex = preprocess(&clip, &[half], "r").unwrap();
        let (m, s) = tensor::stats(&ex.input).unwrap();
        assert!(m.abs() <= 1e-4 && (s - 1.0).abs() <= 1e-3, "{m} {s}");
        // Left half, top half of the frame: rows 0-1, columns 0-3.
        let pos = positives(&ex.labels);
        assert_eq!(pos.len(), 8);
        assert!(pos.iter().all(|&(r, c)| r < 2 && c < 4));
    }

    /// An object drawn only in the left view raises channels 0-2 at its site
    /// relative to the right view's channels.
    #[test]
    fn channel_convention() {
        let mut left = solid(256, 64, [20, 20, 20]);
        for y in 10..20 {
            for x in 100..120 {
                left.set_pixel(x, y, [250, 250, 250]);
            }
        }
        let right = solid(256, 64, [20, 20, 20]);
        let clip = StereoClip::new(vec![left; 3], vec![right; 3]).unwrap();
        let ex = preprocess(&clip, &[], "probe").unwrap();
        let at = |c: usize| ex.input.get(&[2, 15, 110, c]);
        for c in 0..3 {
            assert!(at(c) > at(c + 3) + 1.0);
        }
        let bg = |c: usize| ex.input.get(&[2, 40, 10, c]);
        for c in 0..6 {
            assert!((bg(c) - bg(0)).abs() < 1e-6);
        }
    }
}
