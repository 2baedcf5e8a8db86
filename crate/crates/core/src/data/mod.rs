//! Ingestion and ground truth: images and labels in, normalised
//! `[3, 64, 256, 6]` stereo-video tensors and `4 x 8` window labels out.

pub mod image;
pub mod kitti;
pub mod manifest;
pub mod preprocess;
pub mod synth;

pub use image::{parse_ppm, write_ppm, RgbImage};
pub use kitti::{parse_kitti_labels, BoundingBox};
pub use manifest::{Dataset, Manifest, ManifestEntry};
pub use preprocess::{preprocess, window_labels, Example, ExampleMeta, StereoClip};
pub use synth::{synth_scene, SynthParams, SynthScene};

/// Frame geometry the detector works at.
pub const FRAME_H: usize = 64;
pub const FRAME_W: usize = 256;
pub const FRAMES: usize = 3;
pub const CHANNELS: usize = 6;
/// Non-overlapping window extent (height, width) in frame pixels.
pub const WINDOW_H: usize = 16;
pub const WINDOW_W: usize = 32;
pub const GRID_ROWS: usize = FRAME_H / WINDOW_H;
pub const GRID_COLS: usize = FRAME_W / WINDOW_W;
