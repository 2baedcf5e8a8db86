//! The variants x depths x training sizes x seeds experiment matrix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pr::pr_auc;
use crate::conv::KernelStack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{self, NetworkSpec, Sample, TrainConfig, VariantKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    pub variants: Vec<VariantKind>,
    pub depths: Vec<usize>,
    /// Training subset sizes; empty means the whole training set.
    pub n_train: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template for every cell; `variant` and `depth` are overwritten.
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            variants: VariantKind::ALL.to_vec(),
            depths: vec![2, 3, 4],
            n_train: Vec::new(),
            seeds: (1..=6).collect(),
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: VariantKind,
    pub depth: usize,
    pub n_train: usize,
    pub seed: u64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: VariantKind,
    pub depth: usize,
    pub n_train: usize,
    pub median: f64,
    /// Max minus min AUC over the seeds run.
    pub range: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub runs: Vec<RunRecord>,
    /// Positive fraction of the test windows, the AUC of a constant scorer.
    pub chance: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl RunReport {
    /// One summary per `(variant, depth, n_train)`, in first-seen order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut order = Vec::new();
        let mut cells: BTreeMap<(VariantKind, usize, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.runs {
            let key = (r.variant, r.depth, r.n_train);
            if !cells.contains_key(&key) {
                order.push(key);
            }
            cells.entry(key).or_default().push(r.auc);
        }
        order
            .into_iter()
            .map(|key| {
                let v = &cells[&key];
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
                CellSummary {
                    variant: key.0,
                    depth: key.1,
                    n_train: key.2,
                    median: median(v),
                    range: max - min,
                    runs: v.len(),
                }
            })
            .collect()
    }

    pub fn cell(&self, variant: VariantKind, depth: usize, n_train: usize) -> Option<CellSummary> {
        self.summary()
            .into_iter()
            .find(|c| c.variant == variant && c.depth == depth && c.n_train == n_train)
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from("variant,depth,n_train,seed,auc\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{},{},{:.6}\n", r.variant, r.depth, r.n_train, r.seed, r.auc));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,depth,n_train,median,range,runs\n");
        for c in self.summary() {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                c.variant, c.depth, c.n_train, c.median, c.range, c.runs
            ));
        }
        s
    }

    /// Median and range per variant (rows) and depth (column pairs) at the
    /// largest training size, as plain text.
    pub fn table(&self) -> String {
        let summary = self.summary();
        let Some(n) = summary.iter().map(|c| c.n_train).max() else {
            return String::new();
        };
        let mut depths: Vec<usize> = summary.iter().map(|c| c.depth).collect();
        depths.sort();
        depths.dedup();
        let mut variants: Vec<VariantKind> = Vec::new();
        for c in &summary {
            if !variants.contains(&c.variant) {
                variants.push(c.variant);
            }
        }
        let mut s = format!("{:<14}", "model");
        for d in &depths {
            s.push_str(&format!(" | {:>8} {:>7}", format!("{d} layers"), "range"));
        }
        s.push('\n');
        for v in variants {
            s.push_str(&format!("{:<14}", v.name()));
            for &d in &depths {
                match summary.iter().find(|c| c.variant == v && c.depth == d && c.n_train == n) {
                    Some(c) => s.push_str(&format!(" | {:>8.3} {:>7.3}", c.median, c.range)),
                    None => s.push_str(&format!(" | {:>8} {:>7}", "-", "-")),
                }
            }
            s.push('\n');
        }
        s.push_str(&format!("chance {:.3}, n_train {n}\n", self.chance));
        s
    }

    /// Write `results.csv`, `summary.csv` and `table.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        for (name, body) in [
            ("results.csv", self.results_csv()),
            ("summary.csv", self.summary_csv()),
            ("table.txt", self.table()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::file(&p, e))?;
        }
        Ok(())
    }
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    for d in t.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}

/// Content hash of a dataset's inputs and labels.
pub fn dataset_fingerprint(data: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((data.len() as u64).to_le_bytes());
    for e in &data.examples {
        hash_tensor(&mut h, &e.input);
        hash_tensor(&mut h, &e.labels);
    }
    hex::encode(h.finalize())
}

fn dict_fingerprint(dict: Option<&KernelStack>) -> String {
    let mut h = Sha256::new();
    if let Some(d) = dict {
        hash_tensor(&mut h, d.weights());
        for s in d.stride() {
            h.update((s as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct CellKey<'a> {
    spec: &'a NetworkSpec,
    train: &'a TrainConfig,
    n_train: usize,
    seed: u64,
    train_data: &'a str,
    test_data: &'a str,
    dict: &'a str,
}

/// Scores and labels of every test window, flattened in example order.
pub fn evaluate(
    params: &net::NetworkParams,
    spec: &NetworkSpec,
    test: &Dataset,
    first_cache: Option<&[Tensor]>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let samples: Vec<Sample> = match first_cache {
        Some(c) => c.iter().map(Sample::Encoded).collect(),
        None => test.examples.iter().map(|e| Sample::Raw(&e.input)).collect(),
    };
    let grids = net::predict_all(params, spec, &samples)?;
    let scores = grids.iter().flat_map(|g| g.probs.data().iter().copied()).collect();
    let labels = test.examples.iter().flat_map(|e| e.labels.data().iter().copied()).collect();
    Ok((scores, labels))
}

/// Train and score every cell. Completed cells are read back from
/// `cache_dir` when given; new results are stored there as they finish.
///
/// The dictionary is shared by every variant that takes one. Variants whose
/// first layer depends only on the dictionary have their first-layer outputs
/// computed once and reused across depths, sizes and seeds.
pub fn run_matrix(
    cfg: &MatrixConfig,
    train: &Dataset,
    test: &Dataset,
    dict: Option<&KernelStack>,
    cache_dir: Option<&Path>,
) -> Result<RunReport> {
    if cfg.variants.iter().any(|v| v.needs_dictionary()) && dict.is_none() {
        return Err(Error::Config("the matrix includes dictionary variants but no dictionary was given".into()));
    }
    if cfg.seeds.is_empty() || cfg.depths.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("variants, depths and seeds must be non-empty".into()));
    }
    let sizes = if cfg.n_train.is_empty() {
        vec![train.len()]
    } else {
        cfg.n_train.clone()
    };
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > train.len()) {
        return Err(Error::Config(format!(
            "n_train {n} is outside 1..={} available examples",
            train.len()
        )));
    }
    let mut specs = Vec::new();
    for &variant in &cfg.variants {
        for &depth in &cfg.depths {
            let spec = NetworkSpec {
                variant,
                depth,
                ..cfg.network.clone()
            };
            spec.plan()?;
            specs.push(spec);
        }
    }
    let chance = {
        let labels: Vec<f32> = test.examples.iter().flat_map(|e| e.labels.data().iter().copied()).collect();
        let pos = labels.iter().filter(|&&y| y > 0.5).count();
        if pos == 0 {
            return Err(Error::Domain("the test set has no positive windows".into()));
        }
        pos as f64 / labels.len() as f64
    };

    let train_fp = dataset_fingerprint(train);
    let test_fp = dataset_fingerprint(test);
    let dict_fp = dict_fingerprint(dict);
    let cells_dir: Option<PathBuf> = cache_dir.map(|d| d.join("cells"));
    if let Some(d) = &cells_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }

    // Dictionary-only first layers, encoded on first use.
    let mut shared: BTreeMap<VariantKind, (Vec<Tensor>, Vec<Tensor>)> = BTreeMap::new();
    let mut runs = Vec::new();
    for spec in &specs {
        let d = if spec.variant.needs_dictionary() { dict } else { None };
        for &n in &sizes {
            for &seed in &cfg.seeds {
                let key = CellKey {
                    spec,
                    train: &cfg.train,
                    n_train: n,
                    seed,
                    train_data: &train_fp,
                    test_data: &test_fp,
                    dict: &dict_fp,
                };
                let hash = hex::encode(Sha256::digest(serde_json::to_vec(&key)?));
                let cached = cells_dir.as_ref().map(|c| c.join(format!("{hash}.json")));
                if let Some(p) = cached.as_ref().filter(|p| p.exists()) {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
                    let rec: RunRecord = serde_json::from_str(&text)?;
                    log::info!("cached {} depth {} n {} seed {}: auc {:.4}", rec.variant, rec.depth, n, seed, rec.auc);
                    runs.push(rec);
                    continue;
                }
                let fixed_first = matches!(spec.variant, VariantKind::SparseUnsup | VariantKind::ConvUnsup);
                if fixed_first && !shared.contains_key(&spec.variant) {
                    let p0 = net::build_network(spec, d, 0)?;
                    let enc = |data: &Dataset| {
                        let xs: Vec<&Tensor> = data.examples.iter().map(|e| &e.input).collect();
                        net::encode_first_layer(&p0, spec, &xs)
                    };
                    log::info!("encoding first layer for {}", spec.variant);
                    shared.insert(spec.variant, (enc(train)?, enc(test)?));
                }
                let (train_cache, test_cache) = match shared.get(&spec.variant) {
                    Some((a, b)) => (Some(a.as_slice()), Some(b.as_slice())),
                    None => (None, None),
                };
                let outcome = net::train_detector(spec, &cfg.train, d, train, n, seed, train_cache)?;
                let (scores, labels) = evaluate(&outcome.params, spec, test, test_cache)?;
                let rec = RunRecord {
                    variant: spec.variant,
                    depth: spec.depth,
                    n_train: n,
                    seed,
                    auc: pr_auc(&scores, &labels)?,
                };
                log::info!(
                    "{} depth {} n {} seed {}: loss {:.4} -> {:.4}, auc {:.4}",
                    rec.variant,
                    rec.depth,
                    n,
                    seed,
                    outcome.initial_loss,
                    outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    rec.auc
                );
                if let Some(p) = &cached {
                    std::fs::write(p, serde_json::to_vec(&rec)?).map_err(|e| Error::file(p, e))?;
                }
                runs.push(rec);
            }
        }
    }
    Ok(RunReport { runs, chance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(variant: VariantKind, depth: usize, seed: u64, auc: f64) -> RunRecord {
        RunRecord {
            variant,
            depth,
            n_train: 10,
            seed,
            auc,
        }
    }

    #[test]
    fn summary_median_and_range() {
        let r = RunReport {
            runs: vec![
                rec(VariantKind::ConvSup, 2, 1, 0.5),
                rec(VariantKind::ConvSup, 2, 2, 0.7),
                rec(VariantKind::ConvSup, 2, 3, 0.6),
                rec(VariantKind::ConvSup, 2, 4, 0.9),
                rec(VariantKind::SparseUnsup, 2, 1, 0.4),
            ],
            chance: 0.25,
        };
        let s = r.summary();
        assert_eq!(s.len(), 2);
        assert!((s[0].median - 0.65).abs() < 1e-12);
        assert!((s[0].range - 0.4).abs() < 1e-12);
        assert_eq!((s[1].median, s[1].range, s[1].runs), (0.4, 0.0, 1));
        assert!(r.results_csv().starts_with("variant,depth,n_train,seed,auc\nconv_sup,2,10,1,0.500000\n"));
        assert!(r.table().contains("sparse_unsup"));
    }

    #[test]
    fn table_has_one_cell_per_variant_and_depth() {
        let mut runs = Vec::new();
        for v in VariantKind::ALL {
            for d in 2..=4 {
                for s in 1..=6 {
                    runs.push(rec(v, d, s, 0.5 + 0.01 * s as f64));
                }
            }
        }
        let r = RunReport { runs, chance: 0.2 };
        assert_eq!(r.summary().len(), 15);
        assert!(r.summary().iter().all(|c| c.runs == 6 && (c.range - 0.05).abs() < 1e-12));
        assert_eq!(r.table().lines().count(), 7);
    }

    #[test]
    fn missing_dictionary_fails_before_training() {
        let cfg = MatrixConfig {
            variants: vec![VariantKind::ConvSup, VariantKind::SparseUnsup],
            ..Default::default()
        };
        let empty = Dataset::default();
        assert!(matches!(run_matrix(&cfg, &empty, &empty, None, None), Err(Error::Config(_))));
    }
}
