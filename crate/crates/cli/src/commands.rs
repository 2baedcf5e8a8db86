//! One function per subcommand, each taking its resolved configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use stereosparse::conv::{self, KernelStack, Pads};
use stereosparse::data::manifest::write_synthetic;
use stereosparse::data::{self, Dataset, Manifest, SynthParams};
use stereosparse::dict::{self, DictTrainConfig};
use stereosparse::eval::{self, MatrixConfig, SiteGeometry};
use stereosparse::lca::{self, Competition, LcaConfig};
use stereosparse::net::{self, FirstLayerSpec, NetworkSpec, TrainConfig, VariantKind};
use stereosparse::{sten, Tensor};

use crate::config::{echo, parent_dir, sibling, usage, Dims3};

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| usage(format!("the following required argument was not provided: {flag}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Split selector: `"all"` takes every entry.
fn split_name(s: &str) -> Option<&str> {
    (s != "all").then_some(s)
}

fn load_split(path: &Path, split: &str) -> Result<Dataset> {
    let m = Manifest::load(path)?;
    let ds = m.materialize(split_name(split))?;
    if ds.is_empty() {
        bail!("{}: no entries in split {split:?}", path.display());
    }
    info!("loaded {} examples from {} (split {split})", ds.len(), path.display());
    Ok(ds)
}

fn lca_config(lambda: f32, iters: usize, dt: f32, stop_tol: f64, competition: Competition) -> LcaConfig {
    LcaConfig {
        lambda,
        dt,
        max_iters: iters,
        stop_tol,
        competition,
        ..LcaConfig::default()
    }
}

fn load_dict(path: &Path, stride: Dims3) -> Result<KernelStack> {
    let w = sten::load(path).with_context(|| format!("loading dictionary {}", path.display()))?;
    Ok(KernelStack::new(w, stride.0)?)
}

/// Spatial padding that makes a stride tile the input exactly.
fn tiling_pads(dims: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Result<Pads> {
    let mut pads = [[0, 0]; 3];
    for a in 1..3 {
        let n = dims[a + 1];
        if n % stride[a] != 0 {
            bail!("stride {} does not divide input extent {n}", stride[a]);
        }
        pads[a] = conv::pad_for_output(n, kernel[a], stride[a], n / stride[a])?;
    }
    Ok(pads)
}

// synth

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub out: Option<PathBuf>,
    /// Total examples, test split included.
    pub n: usize,
    /// Examples marked `test`; defaults to a fifth of `n`.
    pub n_test: Option<usize>,
    pub seed: u64,
    pub disparity_levels: Vec<u32>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            out: None,
            n: 500,
            n_test: None,
            seed: 1,
            disparity_levels: Vec::new(),
        }
    }
}

pub fn synth(mut cfg: SynthConfig) -> Result<()> {
    let out = required(&cfg.out, "--out")?.clone();
    let n_test = *cfg.n_test.get_or_insert(cfg.n / 5);
    if n_test > cfg.n {
        return Err(usage(format!("n_test {n_test} exceeds n {}", cfg.n)));
    }
    echo(&out, &cfg)?;
    let params = SynthParams {
        disparity_levels: cfg.disparity_levels.clone(),
        ..SynthParams::default()
    };
    let m = write_synthetic(&out, cfg.n, n_test, cfg.seed, &params)?;
    info!("wrote {} examples ({n_test} test) to {}", m.len(), out.join("manifest.jsonl").display());
    Ok(())
}

// train-dict

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainDictConfig {
    pub data: Option<PathBuf>,
    pub split: String,
    pub out: Option<PathBuf>,
    pub features: usize,
    pub kernel: Dims3,
    pub stride: Dims3,
    pub lambda: f32,
    pub iters: usize,
    pub dt: f32,
    pub stop_tol: f64,
    pub competition: Competition,
    pub lr: f32,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainDictConfig {
    fn default() -> Self {
        let d = DictTrainConfig::default();
        TrainDictConfig {
            data: None,
            split: "train".into(),
            out: None,
            features: d.features,
            kernel: Dims3(d.kernel),
            stride: Dims3(d.stride),
            lambda: d.lca.lambda,
            iters: d.lca.max_iters,
            dt: d.lca.dt,
            stop_tol: d.lca.stop_tol,
            competition: d.lca.competition,
            lr: d.lr,
            batches: d.batches,
            batch_size: d.batch_size,
            seed: 1,
        }
    }
}

pub fn train_dict(cfg: TrainDictConfig) -> Result<()> {
    let data_path = required(&cfg.data, "--data")?;
    let out = required(&cfg.out, "--out")?;
    echo(&parent_dir(out), &cfg)?;
    let ds = load_split(data_path, &cfg.split)?;
    let tcfg = DictTrainConfig {
        lr: cfg.lr,
        batches: cfg.batches,
        batch_size: cfg.batch_size,
        lca: lca_config(cfg.lambda, cfg.iters, cfg.dt, cfg.stop_tol, cfg.competition),
        seed: cfg.seed,
        features: cfg.features,
        kernel: cfg.kernel.0,
        stride: cfg.stride.0,
    };
    tcfg.validate()?;
    let pads = tiling_pads(ds.examples[0].batched_input().dims(), cfg.kernel.0, cfg.stride.0)?;
    let order = ds.shuffled_indices(cfg.seed);
    let stream = order
        .into_iter()
        .cycle()
        .map(|i| conv::pad(&ds.examples[i].batched_input(), pads).expect("inputs share one shape"));
    let (phi, history) = dict::train_dictionary(stream, None, &tcfg)?;
    sten::save(out, phi.weights())?;
    write_text(&sibling(out, "history.csv"), &history.to_csv())?;
    if let Some(last) = history.batches.last() {
        info!(
            "{} batches; final energy {:.4}, nnz fraction {:.4}; wrote {}",
            history.len(),
            last.total,
            last.nnz_fraction,
            out.display()
        );
    }
    Ok(())
}

// encode

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    pub dict: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub stride: Dims3,
    pub lambda: f32,
    pub iters: usize,
    pub dt: f32,
    pub stop_tol: f64,
    pub competition: Competition,
    /// Pad the input so the stride tiles it, as the detector does.
    pub pad: bool,
    pub seed: u64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        let l = LcaConfig::default();
        EncodeConfig {
            dict: None,
            input: None,
            out: None,
            stride: Dims3([1, 2, 2]),
            lambda: l.lambda,
            iters: l.max_iters,
            dt: l.dt,
            stop_tol: l.stop_tol,
            competition: l.competition,
            pad: false,
            seed: 1,
        }
    }
}

pub fn energy_csv(trace: &[lca::EnergyReport]) -> String {
    let mut s = String::from("iter,recon_err,sparsity,total,nnz\n");
    for (i, e) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.6},{:.6},{:.6},{}", e.recon_err, e.sparsity, e.total, e.nnz);
    }
    s
}

pub fn encode(cfg: EncodeConfig) -> Result<()> {
    let dict_path = required(&cfg.dict, "--dict")?;
    let input_path = required(&cfg.input, "--input")?;
    let out = required(&cfg.out, "--out")?;
    let phi = load_dict(dict_path, cfg.stride)?;
    echo(&parent_dir(out), &cfg)?;
    let mut x = sten::load(input_path).with_context(|| format!("loading {}", input_path.display()))?;
    if x.ndim() == 4 {
        let mut dims = vec![1];
        dims.extend_from_slice(x.dims());
        x = x.reshape(&dims)?;
    }
    if cfg.pad {
        x = conv::pad(&x, tiling_pads(x.dims(), phi.extent(), phi.stride())?)?;
    }
    let lcfg = lca_config(cfg.lambda, cfg.iters, cfg.dt, cfg.stop_tol, cfg.competition);
    let state = lca::lca_encode(&x, &phi, &lcfg)?;
    sten::save(out, &state.a)?;
    write_text(&sibling(out, "energy.csv"), &energy_csv(&state.energy_trace))?;
    let last = state.last_energy().expect("trace is never empty");
    info!(
        "{} iterations, energy {:.4}, {} of {} active; wrote {}",
        state.iterations(),
        last.total,
        last.nnz,
        state.a.len(),
        out.display()
    );
    Ok(())
}

// Network geometry shared by train-net and run-matrix.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetFields {
    /// First-layer feature count; taken from the dictionary when unset.
    pub features: Option<usize>,
    /// First-layer kernel; taken from the dictionary when unset.
    pub kernel: Option<Dims3>,
    pub stride: Dims3,
    pub mid_features: usize,
    pub lambda: f32,
    pub iters: usize,
    pub dt: f32,
    pub stop_tol: f64,
    pub competition: Competition,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for NetFields {
    fn default() -> Self {
        let s = NetworkSpec::default();
        let t = TrainConfig::default();
        NetFields {
            features: None,
            kernel: None,
            stride: Dims3(s.first.stride),
            mid_features: s.mid_features,
            lambda: s.lca.lambda,
            iters: s.lca.max_iters,
            dt: s.lca.dt,
            stop_tol: s.lca.stop_tol,
            competition: s.lca.competition,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

impl NetFields {
    /// Fill the first-layer shape from the dictionary where not given.
    fn settle(&mut self, dict: Option<&KernelStack>) {
        let default = FirstLayerSpec::default();
        self.features
            .get_or_insert(dict.map_or(default.features, KernelStack::features));
        self.kernel
            .get_or_insert(Dims3(dict.map_or(default.kernel, KernelStack::extent)));
    }

    fn spec(&self, variant: VariantKind, depth: usize) -> NetworkSpec {
        let default = FirstLayerSpec::default();
        NetworkSpec {
            variant,
            depth,
            first: FirstLayerSpec {
                features: self.features.unwrap_or(default.features),
                kernel: self.kernel.map_or(default.kernel, |k| k.0),
                stride: self.stride.0,
            },
            mid_features: self.mid_features,
            lca: lca_config(self.lambda, self.iters, self.dt, self.stop_tol, self.competition),
            ..NetworkSpec::default()
        }
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

fn check_dictionary_rule(variant: VariantKind, dict: bool) -> Result<()> {
    match (variant.needs_dictionary(), dict) {
        (true, false) => Err(usage(format!("{variant} requires a dictionary (--dict)"))),
        (false, true) => Err(usage(format!("{variant} forbids a dictionary; drop --dict"))),
        _ => Ok(()),
    }
}

// train-net

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainNetConfig {
    pub variant: Option<VariantKind>,
    pub depth: usize,
    pub dict: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    /// Training subset size; the whole split when unset.
    pub n_train: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub net: NetFields,
}

impl Default for TrainNetConfig {
    fn default() -> Self {
        TrainNetConfig {
            variant: None,
            depth: 3,
            dict: None,
            data: None,
            split: "train".into(),
            n_train: None,
            seed: 1,
            out: None,
            net: NetFields::default(),
        }
    }
}

pub fn train_net(mut cfg: TrainNetConfig) -> Result<()> {
    let variant = *required(&cfg.variant, "--variant")?;
    check_dictionary_rule(variant, cfg.dict.is_some())?;
    let data_path = required(&cfg.data, "--data")?.clone();
    let out = required(&cfg.out, "--out")?.clone();
    let dict = cfg.dict.as_ref().map(|p| load_dict(p, cfg.net.stride)).transpose()?;
    cfg.net.settle(dict.as_ref());
    let spec = cfg.net.spec(variant, cfg.depth);
    spec.plan()?;
    let ds = load_split(&data_path, &cfg.split)?;
    let n = *cfg.n_train.get_or_insert(ds.len());
    echo(&parent_dir(&out), &cfg)?;
    let outcome = net::train_detector(&spec, &cfg.net.train(), dict.as_ref(), &ds, n, cfg.seed, None)?;
    net::save_model(&out, &spec, &outcome.params)?;
    let mut log = String::from("epoch,loss\n");
    let _ = writeln!(log, "0,{:.6}", outcome.initial_loss);
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "{},{l:.6}", e + 1);
    }
    write_text(&sibling(&out, "train.csv"), &log)?;
    info!(
        "trained {variant} depth {} on {n} examples: loss {:.4} -> {:.4}; wrote {}",
        cfg.depth,
        outcome.initial_loss,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

// eval

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    /// Optional directory for `metrics.json` and `scores.csv`.
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: None,
            data: None,
            split: "test".into(),
            out: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize)]
struct Metrics {
    auc: f64,
    chance: f64,
    windows: usize,
    positives: usize,
}

pub fn evaluate(cfg: EvalConfig) -> Result<()> {
    let model_path = required(&cfg.model, "--model")?;
    let data_path = required(&cfg.data, "--data")?;
    let (spec, params) = net::load_model(model_path)?;
    let ds = load_split(data_path, &cfg.split)?;
    let (scores, labels) = eval::evaluate(&params, &spec, &ds, None)?;
    let curve = eval::pr_curve(&scores, &labels)?;
    let m = Metrics {
        auc: eval::auc(&curve),
        chance: curve.positive_fraction(),
        windows: curve.total,
        positives: curve.positives,
    };
    println!("auc {:.6}", m.auc);
    info!("{} windows, {} positive, chance {:.4}", m.windows, m.positives, m.chance);
    if let Some(dir) = &cfg.out {
        echo(dir, &cfg)?;
        write_text(&dir.join("metrics.json"), &(serde_json::to_string_pretty(&m)? + "\n"))?;
        let mut csv = String::from("example,row,col,score,label\n");
        let cols = spec.grid[1];
        let per = spec.grid[0] * cols;
        for (i, (s, y)) in scores.iter().zip(&labels).enumerate() {
            let id = &ds.examples[i / per].meta.source_id;
            let _ = writeln!(csv, "{id},{},{},{s:.6},{y}", (i % per) / cols, i % cols);
        }
        write_text(&dir.join("scores.csv"), &csv)?;
    }
    Ok(())
}

// run-matrix

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixRunConfig {
    pub data: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub dict: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variants: Vec<VariantKind>,
    pub depths: Vec<usize>,
    /// Training subset sizes; the whole training split when empty.
    pub n_train: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Reuse finished cells from `<out>/cache`.
    pub cache: bool,
    #[serde(flatten)]
    pub net: NetFields,
}

impl Default for MatrixRunConfig {
    fn default() -> Self {
        let m = MatrixConfig::default();
        MatrixRunConfig {
            data: None,
            train_split: "train".into(),
            test_split: "test".into(),
            dict: None,
            out: None,
            variants: m.variants,
            depths: m.depths,
            n_train: m.n_train,
            seeds: m.seeds,
            cache: true,
            net: NetFields::default(),
        }
    }
}

pub fn run_matrix(mut cfg: MatrixRunConfig) -> Result<()> {
    let data_path = required(&cfg.data, "--data")?.clone();
    let out = required(&cfg.out, "--out")?.clone();
    if cfg.variants.iter().any(|v| v.needs_dictionary()) && cfg.dict.is_none() {
        return Err(usage("the matrix includes dictionary variants; pass --dict"));
    }
    let dict = cfg.dict.as_ref().map(|p| load_dict(p, cfg.net.stride)).transpose()?;
    cfg.net.settle(dict.as_ref());
    echo(&out, &cfg)?;
    let train = load_split(&data_path, &cfg.train_split)?;
    let test = load_split(&data_path, &cfg.test_split)?;
    let mcfg = MatrixConfig {
        variants: cfg.variants.clone(),
        depths: cfg.depths.clone(),
        n_train: cfg.n_train.clone(),
        seeds: cfg.seeds.clone(),
        network: cfg.net.spec(VariantKind::ConvSup, 3),
        train: cfg.net.train(),
    };
    let cache = cfg.cache.then(|| out.join("cache"));
    let report = eval::run_matrix(&mcfg, &train, &test, dict.as_ref(), cache.as_deref())?;
    report.write(&out)?;
    eprint!("{}", report.table());
    info!("{} runs; wrote results.csv, summary.csv and table.txt to {}", report.runs.len(), out.display());
    Ok(())
}

// analyze

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    /// Model whose first layer is analysed.
    pub model: Option<PathBuf>,
    /// Optional comparison model, thresholded to the first model's sparsity.
    pub control: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Number of synthetic benchmark scenes.
    pub n: usize,
    pub seed: u64,
    /// Planted disparities; also the selectivity bins.
    pub disparity_levels: Vec<u32>,
    /// Overlays written per model, most selective features first.
    pub overlays: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            model: None,
            control: None,
            out: None,
            n: 100,
            seed: 1,
            disparity_levels: vec![1, 6],
            overlays: 4,
        }
    }
}

#[derive(Debug, Serialize)]
struct AnalysisSummary {
    name: String,
    variant: VariantKind,
    nnz: usize,
    threshold: Option<f32>,
    mean_index: Option<f64>,
    active_features: usize,
    overlays: Vec<PathBuf>,
}

pub fn analyze(cfg: AnalyzeConfig) -> Result<()> {
    let out = required(&cfg.out, "--out")?.clone();
    let model_path = required(&cfg.model, "--model")?.clone();
    if cfg.disparity_levels.is_empty() {
        return Err(usage("disparity_levels must not be empty"));
    }
    echo(&out, &cfg)?;
    let params = SynthParams {
        disparity_levels: cfg.disparity_levels.clone(),
        ..SynthParams::default()
    };
    let mut scenes = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        scenes.push(data::synth_scene(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), &params)?);
    }
    let examples = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| data::preprocess(&s.clip, &s.boxes, &format!("{i:06}")))
        .collect::<stereosparse::Result<Vec<_>>>()?;
    let inputs: Vec<&Tensor> = examples.iter().map(|e| &e.input).collect();
    let disparity: Vec<Vec<Option<f32>>> = scenes.iter().map(|s| s.disparity.clone()).collect();
    let bins: Vec<f32> = cfg.disparity_levels.iter().map(|&d| d as f32).collect();
    let frame = (data::FRAME_H, data::FRAME_W);

    let mut models = vec![("model", model_path)];
    if let Some(c) = &cfg.control {
        models.push(("control", c.clone()));
    }
    let mut target_nnz = None;
    let mut summaries = Vec::new();
    for (name, path) in models {
        let (spec, p) = net::load_model(&path)?;
        let plan = spec.plan()?;
        let geom = SiteGeometry::from_plan(&plan[0]);
        let mut acts = net::encode_first_layer(&p, &spec, &inputs)?;
        let mut threshold = None;
        if let Some(target) = target_nnz {
            let t = eval::sparsity_match_threshold(acts.iter(), target)?;
            acts = acts.iter().map(|a| eval::apply_threshold(a, t)).collect();
            threshold = Some(t);
        }
        let nnz: usize = acts.iter().map(Tensor::count_nonzero).sum();
        target_nnz.get_or_insert(nnz);
        let report = eval::depth_selectivity(&acts, &disparity, frame, &geom, &bins)?;
        write_text(&out.join(format!("selectivity_{name}.csv")), &report.to_csv())?;

        let mut ranked: Vec<usize> = (0..report.index.len()).filter(|&f| report.index[f].is_some()).collect();
        ranked.sort_by(|&a, &b| report.index[b].partial_cmp(&report.index[a]).expect("finite index"));
        let mut overlays = Vec::new();
        for &f in ranked.iter().take(cfg.overlays) {
            let file = out.join(format!("overlay_{name}_f{f:03}.ppm"));
            let map = eval::feature_map(&acts[0], f)?;
            eval::activation_overlay(scenes[0].clip.reference_frame(), &map, &geom, Some(&file))?;
            overlays.push(file);
        }
        info!(
            "{name} ({}): mean selectivity {:.4} over {} active features, {nnz} nonzeros",
            spec.variant,
            report.mean_index.unwrap_or(f64::NAN),
            report.active_features
        );
        summaries.push(AnalysisSummary {
            name: name.into(),
            variant: spec.variant,
            nnz,
            threshold,
            mean_index: report.mean_index,
            active_features: report.active_features,
            overlays,
        });
    }
    write_text(&out.join("selectivity.json"), &(serde_json::to_string_pretty(&summaries)? + "\n"))?;
    Ok(())
}
