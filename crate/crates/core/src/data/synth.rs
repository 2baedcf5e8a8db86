//! Synthetic stereo-video scenes: textured rectangles ("vehicles") over a
//! static textured background.
//!
//! The background sits at zero disparity and does not move. Each object has
//! an integer disparity `d`; the right view shows it `d` pixels further left.
//! Objects also translate horizontally between frames with a speed that
//! grows with disparity, so nearer objects move faster in image space.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::kitti::BoundingBox;
use super::preprocess::StereoClip;
use super::FRAMES;
use crate::error::{Error, Result};
use crate::rng;

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of the object count.
    pub n_objects: (usize, usize),
    /// Inclusive integer disparity range in pixels.
    pub disparity: (u32, u32),
    /// When non-empty, disparities are drawn from this set instead.
    pub disparity_levels: Vec<u32>,
    /// Speed in pixels per frame at the smallest and largest disparity;
    /// linear in between, rounded, random direction.
    pub velocity: (f32, f32),
    /// Standard deviation of per-frame sensor noise, in 8-bit units.
    pub noise: f32,
    pub object_width: (usize, usize),
    pub object_height: (usize, usize),
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 256,
            height: 64,
            n_objects: (1, 3),
            disparity: (1, 6),
            disparity_levels: Vec::new(),
            velocity: (0.0, 3.0),
            noise: 2.0,
            object_width: (20, 48),
            object_height: (10, 24),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pattern {
    base: [f32; 3],
    accent: [f32; 3],
    period: usize,
    orientation: u8,
}

impl Pattern {
    fn color(&self, u: usize, v: usize, w: usize, h: usize) -> [f32; 3] {
        if u < 2 || v < 2 || u + 2 >= w || v + 2 >= h {
            return [15.0, 15.0, 15.0];
        }
        let phase = match self.orientation {
            0 => u,
            1 => v,
            2 => u + v,
            _ => u + 2 * h - v,
        };
        if (phase / self.period) % 2 == 0 {
            self.base
        } else {
            self.accent
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    /// Left edge in the newest left frame.
    pub x: i64,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub disparity: u32,
    /// Signed horizontal speed, pixels per frame.
    pub velocity: i64,
    pattern: Pattern,
}

impl PlacedObject {
    /// Left edge in frame `t` (0 = oldest) of the given view.
    pub fn column(&self, t: usize, right_view: bool) -> i64 {
        let back = (FRAMES - 1 - t) as i64;
        let x = self.x - self.velocity * back;
        if right_view {
            x - self.disparity as i64
        } else {
            x
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub clip: StereoClip,
    /// Object rectangles in the newest left frame.
    pub boxes: Vec<BoundingBox>,
    pub objects: Vec<PlacedObject>,
    /// Planted disparity per pixel of the newest left frame; `None` on
    /// background.
    pub disparity: Vec<Option<f32>>,
}

struct Background {
    width: usize,
    base: Vec<[f32; 3]>,
}

impl Background {
    fn new(p: &SynthParams, rng: &mut rng::Rng) -> Self {
        let (w, h) = (p.width, p.height);
        let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));
        let level = rng.random_range(90.0..140.0);
        let waves: Vec<(f32, f32, f32, f32)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.005..0.04),
                    rng.random_range(0.01..0.08),
                    rng.random_range(0.0..std::f32::consts::TAU),
                    rng.random_range(6.0..16.0),
                )
            })
            .collect();
        let mut base = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut v = level;
                for &(fx, fy, ph, amp) in &waves {
                    v += amp * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + ph).sin();
                }
                let grain = rng.random_range(-4.0..4.0);
                base.push(std::array::from_fn(|c| v + tint[c] + grain));
            }
        }
        Background { width: w, base }
    }

    fn at(&self, x: usize, y: usize) -> [f32; 3] {
        self.base[y * self.width + x]
    }
}

fn pick_range(rng: &mut rng::Rng, (lo, hi): (usize, usize)) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn speed_for(p: &SynthParams, d: u32) -> f32 {
    let (lo, hi) = match p.disparity_levels.iter().min().zip(p.disparity_levels.iter().max()) {
        Some((&a, &b)) => (a, b),
        None => p.disparity,
    };
    let frac = if hi > lo {
        (d.saturating_sub(lo)) as f32 / (hi - lo) as f32
    } else {
        0.0
    };
    p.velocity.0 + (p.velocity.1 - p.velocity.0) * frac
}

fn place(p: &SynthParams, rng: &mut rng::Rng) -> Result<PlacedObject> {
    let width = pick_range(rng, p.object_width);
    let height = pick_range(rng, p.object_height);
    if width < 5 || height < 5 || width > p.width || height > p.height {
        return Err(Error::Generation(format!(
            "object {width}x{height} does not fit a {}x{} frame",
            p.width, p.height
        )));
    }
    let disparity = match p.disparity_levels.choose(rng) {
        Some(&d) => d,
        None => rng.random_range(p.disparity.0..=p.disparity.1.max(p.disparity.0)),
    };
    let speed = speed_for(p, disparity).round() as i64;
    let velocity = if rng.random_bool(0.5) { speed } else { -speed };
    let pattern = Pattern {
        base: std::array::from_fn(|_| rng.random_range(0.0..255.0)),
        accent: std::array::from_fn(|_| rng.random_range(0.0..255.0)),
        period: rng.random_range(2..=5),
        orientation: rng.random_range(0..4),
    };
    for _ in 0..PLACEMENT_ATTEMPTS {
        let x = rng.random_range(0..=(p.width - width) as i64);
        let y = rng.random_range(0..=p.height - height);
        let obj = PlacedObject {
            x,
            y,
            width,
            height,
            disparity,
            velocity,
            pattern,
        };
        let fits = (0..FRAMES).all(|t| {
            [false, true].iter().all(|&r| {
                let c = obj.column(t, r);
                c >= 0 && c + width as i64 <= p.width as i64
            })
        });
        if fits {
            return Ok(obj);
        }
    }
    Err(Error::Generation(format!(
        "could not place a {width}x{height} object with disparity {disparity} and speed {speed} after {PLACEMENT_ATTEMPTS} attempts"
    )))
}

fn render(
    p: &SynthParams,
    bg: &Background,
    objects: &[PlacedObject],
    t: usize,
    right_view: bool,
    noise: &Normal<f32>,
    rng: &mut rng::Rng,
) -> RgbImage {
    let mut px: Vec<[f32; 3]> = (0..p.height)
        .flat_map(|y| (0..p.width).map(move |x| (x, y)))
        .map(|(x, y)| bg.at(x, y))
        .collect();
    for o in objects {
        let x0 = o.column(t, right_view) as usize;
        for v in 0..o.height {
            for u in 0..o.width {
                px[(o.y + v) * p.width + x0 + u] = o.pattern.color(u, v, o.width, o.height);
            }
        }
    }
    let mut img = RgbImage::new(p.width, p.height);
    for (i, rgb) in px.iter().enumerate() {
        for c in 0..3 {
            let n = if p.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            img.data[i * 3 + c] = (rgb[c] + n).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Render one scene, fully determined by `seed` and `params`.
pub fn synth_scene(seed: u64, params: &SynthParams) -> Result<SynthScene> {
    if params.width == 0 || params.height == 0 {
        return Err(Error::Generation("frame must be non-empty".into()));
    }
    let mut rng = rng::seeded(seed);
    let bg = Background::new(params, &mut rng);
    let count = pick_range(&mut rng, params.n_objects);
    let mut objects = (0..count)
        .map(|_| place(params, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    // Paint far to near so nearer objects occlude.
    objects.sort_by_key(|o| o.disparity);

    let noise = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;
    let mut left = Vec::with_capacity(FRAMES);
    let mut right = Vec::with_capacity(FRAMES);
    for t in 0..FRAMES {
        left.push(render(params, &bg, &objects, t, false, &noise, &mut rng));
        right.push(render(params, &bg, &objects, t, true, &noise, &mut rng));
    }

    let mut disparity = vec![None; params.width * params.height];
    for o in &objects {
        let x0 = o.column(FRAMES - 1, false) as usize;
        for v in 0..o.height {
            for u in 0..o.width {
                disparity[(o.y + v) * params.width + x0 + u] = Some(o.disparity as f32);
            }
        }
    }
    let boxes = objects
        .iter()
        .map(|o| {
            BoundingBox::new(
                "Car",
                o.x as f32,
                o.y as f32,
                (o.x as usize + o.width) as f32,
                (o.y + o.height) as f32,
            )
        })
        .collect();
    Ok(SynthScene {
        clip: StereoClip::new(left, right)?,
        boxes,
        objects,
        disparity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        let p = SynthParams { n_objects: (0, 0), ..Default::default() };
        let s = synth_scene(3, &p).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.disparity.iter().all(Option::is_none));
    }

    #[test]
    fn deterministic_per_seed() {
        let p = SynthParams::default();
        assert_eq!(synth_scene(42, &p).unwrap(), synth_scene(42, &p).unwrap());
        assert_ne!(synth_scene(42, &p).unwrap().clip, synth_scene(43, &p).unwrap().clip);
    }

    #[test]
    fn right_view_is_shifted_by_disparity() {
        let p = SynthParams {
            n_objects: (1, 1),
            disparity_levels: vec![5],
            noise: 0.0,
            ..Default::default()
        };
        let s = synth_scene(9, &p).unwrap();
        let o = &s.objects[0];
        assert_eq!(o.column(2, true), o.column(2, false) - 5);
        // Pixel content agrees: the object's interior in the left view shows
        // up d pixels to the left in the right view.
        let (l, r) = (&s.clip.left[2], &s.clip.right[2]);
        let y = o.y + o.height / 2;
        for u in 2..o.width - 2 {
            let xl = o.x as usize + u;
            assert_eq!(l.pixel(xl, y), r.pixel(xl - 5, y));
        }
    }

    #[test]
    fn near_objects_move_faster() {
        let p = SynthParams::default();
        assert!(speed_for(&p, 6) > speed_for(&p, 1));
    }

    #[test]
    fn impossible_placement_is_an_error() {
        let p = SynthParams {
            n_objects: (1, 1),
            object_width: (250, 250),
            disparity_levels: vec![6],
            velocity: (3.0, 3.0),
            ..Default::default()
        };
        assert!(matches!(synth_scene(1, &p), Err(Error::Generation(_))));
    }
}
