use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NetworkSpec;
use crate::conv::KernelStack;
use crate::error::{Error, Result};
use crate::rng;
use crate::sten;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kernel: KernelStack,
    pub bias: Vec<f32>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn first(&self) -> &Layer {
        &self.layers[0]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.weights().len() + l.bias.len()).sum()
    }
}

fn gaussian(kernel: &mut KernelStack, std: f32, rng: &mut rng::Rng) {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    kernel.weights_mut().data_mut().iter_mut().for_each(|w| *w = normal.sample(rng));
}

/// Initialise parameters for `spec`.
///
/// Dictionary variants copy `dict` into the first layer; the others draw it
/// from a fan-in scaled Gaussian. Every later layer is Gaussian with zero
/// bias. All draws come from `seed`.
pub fn build_network(spec: &NetworkSpec, dict: Option<&KernelStack>, seed: u64) -> Result<NetworkParams> {
    let plan = spec.plan()?;
    match (spec.variant.needs_dictionary(), dict) {
        (true, None) => {
            return Err(Error::Config(format!("variant {} requires a dictionary", spec.variant)));
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!("variant {} does not take a dictionary", spec.variant)));
        }
        _ => {}
    }
    let mut layers = Vec::with_capacity(plan.len());
    for (i, lp) in plan.iter().enumerate() {
        let g = lp.geometry;
        let mut kernel = KernelStack::zeros(g)?;
        let is_head = i + 1 == plan.len();
        if i == 0 && spec.variant.needs_dictionary() {
            let d = dict.expect("checked above");
            if d.geometry() != g {
                return Err(Error::Config(format!(
                    "dictionary geometry {:?} does not match the first layer {:?}",
                    d.geometry(),
                    g
                )));
            }
            kernel = d.clone();
        } else {
            let fan_in = (g.extent.iter().product::<usize>() * g.in_channels) as f32;
            let gain = if is_head { 1.0 } else { 2.0 };
            let mut r = rng::derived(seed, 0x1a7e_0000 + i as u64);
            gaussian(&mut kernel, (gain / fan_in).sqrt(), &mut r);
        }
        let trainable = i > 0 || spec.variant.first_layer_trainable();
        layers.push(Layer {
            kernel,
            bias: vec![0.0; g.features],
            trainable,
        });
    }
    Ok(NetworkParams { layers })
}

const MODEL_MAGIC: &[u8; 4] = b"SSNM";
const MODEL_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    stride: [usize; 3],
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelIndex {
    spec: NetworkSpec,
    layers: Vec<LayerEntry>,
    /// Offsets are relative to the first byte after the header.
    tensors: Vec<TensorEntry>,
}

/// Model file: `"SSNM" | u8 version | u32 LE header length | JSON index |
/// STEN tensors`, two tensors (weights, bias) per layer.
pub fn save_model(path: impl AsRef<Path>, spec: &NetworkSpec, params: &NetworkParams) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        let bias = Tensor::new(&[l.bias.len()], l.bias.clone())?;
        for (name, t) in [("weights", l.kernel.weights()), ("bias", &bias)] {
            let offset = body.len();
            sten::write_tensor(&mut body, t)?;
            tensors.push(TensorEntry {
                name: format!("layer{i}.{name}"),
                offset,
                bytes: body.len() - offset,
            });
        }
    }
    let index = ModelIndex {
        spec: spec.clone(),
        layers: params
            .layers
            .iter()
            .map(|l| LayerEntry {
                stride: l.kernel.stride(),
                trainable: l.trainable,
            })
            .collect(),
        tensors,
    };
    let header = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(9 + header.len() + body.len());
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&[MODEL_VERSION])?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&body)?;
    std::fs::write(path, out).map_err(|e| Error::file(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NetworkSpec, NetworkParams)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let bad = |offset: usize, msg: &str| Error::ParseAt {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 9 || &bytes[..4] != MODEL_MAGIC {
        return Err(bad(0, "not a model file"));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(bad(4, &format!("unsupported model version {}", bytes[4])));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body_start = 9 + hlen;
    if bytes.len() < body_start {
        return Err(bad(9, "truncated header"));
    }
    let index: ModelIndex = serde_json::from_slice(&bytes[9..body_start])?;
    let body = &bytes[body_start..];
    let read = |name: String| -> Result<Tensor> {
        let e = index
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(9, &format!("missing tensor {name}")))?;
        let slice = body
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| bad(body_start + e.offset, &format!("tensor {name} out of range")))?;
        let mut r: &[u8] = slice;
        let t = sten::read_tensor(&mut r)?;
        if !r.is_empty() {
            return Err(bad(body_start + e.offset, &format!("trailing bytes in {name}")));
        }
        Ok(t)
    };
    let mut layers = Vec::with_capacity(index.layers.len());
    for (i, le) in index.layers.iter().enumerate() {
        let kernel = KernelStack::new(read(format!("layer{i}.weights"))?, le.stride)?;
        let bias = read(format!("layer{i}.bias"))?.into_data();
        if bias.len() != kernel.features() {
            return Err(Error::shape("load_model", &[bias.len()], &[kernel.features()]));
        }
        layers.push(Layer {
            kernel,
            bias,
            trainable: le.trainable,
        });
    }
    let params = NetworkParams { layers };
    let plan = index.spec.plan()?;
    if plan.len() != params.len() || plan.iter().zip(&params.layers).any(|(p, l)| p.geometry != l.kernel.geometry()) {
        return Err(Error::Config("model parameters do not match the stored spec".into()));
    }
    Ok((index.spec, params))
}
