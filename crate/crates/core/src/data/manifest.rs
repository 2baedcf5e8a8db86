//! JSON-lines dataset manifests.
//!
//! One object per line:
//!
//! ```text
//! {"id": "000123", "input": "x/000123.sten", "labels": "y/000123.sten", "split": "train"}
//! {"id": "s7", "input": {"synth": {"seed": 7}}, "split": "test"}
//! {"id": "s8", "input": "x/s8.sten", "labels": [[0,0,1,0,0,0,0,0], ...]}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Synthetic
//! entries without labels take them from the generated boxes.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preprocess::{preprocess, window_labels, Example, ExampleMeta};
use super::synth::{synth_scene, SynthParams};
use super::{GRID_COLS, GRID_ROWS};
use crate::error::{Error, Result};
use crate::rng;
use crate::sten;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(default)]
    pub params: SynthParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputSource {
    Sten(PathBuf),
    Synth { synth: SynthSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSource {
    Sten(PathBuf),
    Inline(Vec<Vec<f32>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub input: InputSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::ParseLine {
                line: i + 1,
                msg: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Manifest {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose `split` equals `name`; `None` selects every entry.
    pub fn split(&self, name: Option<&str>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| name.is_none() || e.split.as_deref() == name)
            .collect()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn materialize_entry(&self, entry: &ManifestEntry) -> Result<Example> {
        let (input, synth_labels, meta) = match &entry.input {
            InputSource::Sten(p) => {
                let t = sten::load(self.resolve(p))?;
                let t = match t.dims() {
                    [1, rest @ ..] if rest.len() == 4 => t.clone().reshape(rest)?,
                    _ => t,
                };
                let meta = ExampleMeta {
                    source_id: entry.id.clone(),
                    scale: (1.0, 1.0),
                    degenerate_std: false,
                };
                (t, None, meta)
            }
            InputSource::Synth { synth } => {
                let scene = synth_scene(synth.seed, &synth.params)?;
                let ex = preprocess(&scene.clip, &scene.boxes, &entry.id)?;
                (ex.input, Some(ex.labels), ex.meta)
            }
        };
        let labels = match (&entry.labels, synth_labels) {
            (Some(LabelSource::Sten(p)), _) => sten::load(self.resolve(p))?,
            (Some(LabelSource::Inline(rows)), _) => {
                let flat: Vec<f32> = rows.iter().flatten().copied().collect();
                Tensor::new(&[rows.len(), rows.first().map_or(0, Vec::len)], flat)?
            }
            (None, Some(l)) => l,
            (None, None) => {
                return Err(Error::Config(format!("entry {:?} has no labels", entry.id)));
            }
        };
        if labels.dims() != [GRID_ROWS, GRID_COLS] {
            return Err(Error::shape("manifest labels", labels.dims(), &[GRID_ROWS, GRID_COLS]));
        }
        Ok(Example { input, labels, meta })
    }

    /// Load every selected entry; order is preserved.
    pub fn materialize(&self, split: Option<&str>) -> Result<Dataset> {
        let examples = self
            .split(split)
            .par_iter()
            .map(|e| self.materialize_entry(e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { examples })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    /// `n` synthetic examples with consecutive seeds starting at `first_seed`.
    pub fn synthetic(n: usize, first_seed: u64, params: &SynthParams) -> Result<Self> {
        let examples = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let seed = first_seed + i;
                let scene = synth_scene(seed, params)?;
                preprocess(&scene.clip, &scene.boxes, &format!("synth-{seed}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// A seeded permutation of `0..len`.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::derived(seed, 0x5f1e));
        idx
    }

    pub fn positive_fraction(&self) -> f64 {
        let total: usize = self.examples.iter().map(|e| e.labels.len()).sum();
        let pos: usize = self.examples.iter().map(Example::positive_windows).sum();
        if total == 0 {
            0.0
        } else {
            pos as f64 / total as f64
        }
    }
}

/// Write `n` synthetic examples as STEN input/label files plus a manifest.
/// The last `n_test` entries are marked `test`, the rest `train`.
pub fn write_synthetic(dir: &Path, n: usize, n_test: usize, seed: u64, params: &SynthParams) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("inputs")).map_err(|e| Error::file(dir, e))?;
    std::fs::create_dir_all(dir.join("labels")).map_err(|e| Error::file(dir, e))?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let id = format!("{i:06}");
            let scene = synth_scene(s, params)?;
            let ex = preprocess(&scene.clip, &scene.boxes, &id)?;
            let input = PathBuf::from("inputs").join(format!("{id}.sten"));
            let labels = PathBuf::from("labels").join(format!("{id}.sten"));
            sten::save(dir.join(&input), &ex.input)?;
            sten::save(dir.join(&labels), &ex.labels)?;
            debug_assert_eq!(ex.labels, window_labels(&scene.boxes));
            Ok(ManifestEntry {
                id,
                input: InputSource::Sten(input),
                labels: Some(LabelSource::Sten(labels)),
                split: Some(if i + n_test >= n { "test" } else { "train" }.into()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        entries,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest.to_jsonl()?).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}
