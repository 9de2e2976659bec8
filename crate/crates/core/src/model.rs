//! Toy detector: a three-layer strided conv encoder whose 4×4 output grid is
//! projected to 16 tokens of width [`D_MODEL`], one single-head
//! self-attention block with a residual connection, and two linear heads
//! (true/fake and compressed/raw) on the pooled attention output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synth::IMAGE_SIZE;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const D_MODEL: usize = 64;
pub const CHANNELS: [usize; 4] = [1, 8, 16, 32];
pub const GRID: usize = 4;
pub const TOKENS: usize = GRID * GRID;
pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FSCKPT01";

/// Canonical parameter order. Checkpoints and flattened gradient vectors
/// both follow it.
pub const PARAM_NAMES: [&str; 16] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "proj.weight",
    "proj.bias",
    "attn.query",
    "attn.key",
    "attn.value",
    "attn.output",
    "head_tf.weight",
    "head_tf.bias",
    "head_cmp.weight",
    "head_cmp.bias",
];

/// Parameters shared by the encoder and the attention block; these are the
/// ones that receive the corrected gradient.
pub const ENCODER_PARAMS: [&str; 12] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "proj.weight",
    "proj.bias",
    "attn.query",
    "attn.key",
    "attn.value",
    "attn.output",
];

pub const HEAD_TF_PARAMS: [&str; 2] = ["head_tf.weight", "head_tf.bias"];
pub const HEAD_CMP_PARAMS: [&str; 2] = ["head_cmp.weight", "head_cmp.bias"];

fn param_shape(name: &str) -> (Vec<usize>, usize) {
    let conv = |i: usize| {
        (
            vec![CHANNELS[i + 1], CHANNELS[i], KERNEL, KERNEL],
            CHANNELS[i] * KERNEL * KERNEL,
        )
    };
    match name {
        "conv1.weight" => conv(0),
        "conv2.weight" => conv(1),
        "conv3.weight" => conv(2),
        "conv1.bias" => (vec![CHANNELS[1]], conv(0).1),
        "conv2.bias" => (vec![CHANNELS[2]], conv(1).1),
        "conv3.bias" => (vec![CHANNELS[3]], conv(2).1),
        "proj.weight" => (vec![CHANNELS[3], D_MODEL], CHANNELS[3]),
        "proj.bias" => (vec![D_MODEL], CHANNELS[3]),
        "attn.query" | "attn.key" | "attn.value" | "attn.output" => {
            (vec![D_MODEL, D_MODEL], D_MODEL)
        }
        "head_tf.weight" | "head_cmp.weight" => (vec![D_MODEL, 1], D_MODEL),
        "head_tf.bias" | "head_cmp.bias" => (vec![1], D_MODEL),
        other => unreachable!("unknown parameter {other}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for name in PARAM_NAMES {
            let (shape, fan_in) = param_shape(name);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.insert(name.to_string(), Tensor::new(shape, data).expect("fixed shapes"));
        }
        ModelParams { tensors }
    }

    pub fn zeros() -> Self {
        let tensors = PARAM_NAMES
            .iter()
            .map(|&n| (n.to_string(), Tensor::zeros(&param_shape(n).0)))
            .collect();
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Parameters in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().map(move |&n| (n, &self.tensors[n]))
    }

    pub fn count(names: &[&str]) -> usize {
        names
            .iter()
            .map(|n| param_shape(n).0.iter().product::<usize>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Concatenates the named parameters in the given order.
    pub fn flatten(&self, names: &[&str]) -> Vec<f64> {
        names
            .iter()
            .flat_map(|n| self.tensors[*n].data().iter().copied())
            .collect()
    }

    pub fn zero_biases(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Registers every parameter on `tape`, as trainable leaves or as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = PARAM_NAMES
            .iter()
            .map(|&n| {
                let t = self.tensors[n].clone();
                let v = if trainable { tape.param(n, t) } else { tape.constant(t) };
                (n, v)
            })
            .collect();
        BoundModel { vars }
    }

    pub fn save(&self, path: &Path, header: &CheckpointInfo) -> Result<()> {
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        for (name, t) in self.iter() {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let head = CheckpointHeader {
            format: "fakescope-checkpoint".into(),
            version: 1,
            image_size: IMAGE_SIZE,
            channels: CHANNELS.to_vec(),
            d_model: D_MODEL,
            tokens: TOKENS,
            info: header.clone(),
            params: entries,
        };
        let json = serde_json::to_vec(&head)?;
        let mut bytes = Vec::with_capacity(16 + json.len() + blob.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&blob);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointInfo)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16 + hlen;
        let header: CheckpointHeader = serde_json::from_slice(
            bytes.get(16..hend).ok_or_else(|| Error::format(path, "truncated header"))?,
        )
        .map_err(|e| Error::format(path, e.to_string()))?;
        if header.d_model != D_MODEL || header.channels != CHANNELS || header.tokens != TOKENS {
            return Err(Error::format(path, "architecture constants differ from this build"));
        }
        let blob = &bytes[hend..];
        let mut params = ModelParams::zeros();
        for entry in &header.params {
            let t = params
                .tensors
                .get_mut(&entry.name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {}", entry.name)))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::format(path, format!("shape mismatch for {}", entry.name)));
            }
            let start = entry.offset as usize;
            let raw = blob
                .get(start..start + t.numel() * 8)
                .ok_or_else(|| Error::format(path, format!("blob too short for {}", entry.name)))?;
            for (v, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        if header.params.len() != PARAM_NAMES.len() {
            return Err(Error::format(path, "checkpoint is missing parameters"));
        }
        Ok((params, header.info))
    }
}

/// Free-form provenance stored in a checkpoint header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    image_size: usize,
    channels: Vec<usize>,
    d_model: usize,
    tokens: usize,
    info: CheckpointInfo,
    params: Vec<ParamEntry>,
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: BTreeMap<&'static str, Var>,
}

/// Handles produced by [`BoundModel::attend`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[B×16×16]` softmax weights.
    pub weights: Var,
    /// `[B×16×D]` per-token output after the residual add.
    pub outputs: Var,
    /// `[B×D]` mean-pooled output.
    pub pooled: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B×16×D]`
    pub tokens: Var,
    /// `[B×D]`, pooled encoder features.
    pub h_e: Var,
    /// `[B×D]`, pooled attention features.
    pub h_h: Var,
    /// `[B×1]`
    pub logit_tf: Var,
    /// `[B×1]`
    pub logit_cmp: Var,
}

/// Per-sample values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub h_e: Vec<f64>,
    pub h_h: Vec<f64>,
    pub logit_tf: f64,
    pub logit_cmp: f64,
}

impl BoundModel {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Encodes `[B×1×32×32]` images (already scaled to `[0,1]`).
    pub fn encode(&self, tape: &mut Tape, images: Var) -> Result<(Var, Var)> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIZE || s[3] != IMAGE_SIZE {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("expected [B, 1, {IMAGE_SIZE}, {IMAGE_SIZE}]"),
            });
        }
        let b = s[0];
        let mut x = images;
        for layer in ["conv1", "conv2", "conv3"] {
            let w = self.vars[format!("{layer}.weight").as_str()];
            let bias = self.vars[format!("{layer}.bias").as_str()];
            x = tape.conv2d(x, w, STRIDE, PAD)?;
            x = tape.add_bias(x, bias, 1)?;
            x = tape.relu(x)?;
        }
        let x = tape.reshape(x, &[b, CHANNELS[3], TOKENS])?;
        let x = tape.transpose(x)?;
        let x = tape.reshape(x, &[b * TOKENS, CHANNELS[3]])?;
        let x = tape.matmul(x, self.vars["proj.weight"])?;
        let x = tape.add_bias(x, self.vars["proj.bias"], 1)?;
        let tokens = tape.reshape(x, &[b, TOKENS, D_MODEL])?;
        let h_e = tape.mean(tokens, Some(1))?;
        Ok((tokens, h_e))
    }

    /// Single-head scaled dot-product self-attention over `[B×n×D]` tokens.
    pub fn attend(&self, tape: &mut Tape, tokens: Var) -> Result<Attention> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != D_MODEL {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("expected [B, n, {D_MODEL}] tokens"),
            });
        }
        let (b, n) = (s[0], s[1]);
        let flat = tape.reshape(tokens, &[b * n, D_MODEL])?;
        let project = |tape: &mut Tape, name: &str| -> Result<Var> {
            let p = tape.matmul(flat, self.vars[name])?;
            tape.reshape(p, &[b, n, D_MODEL])
        };
        let q = project(tape, "attn.query")?;
        let k = project(tape, "attn.key")?;
        let v = project(tape, "attn.value")?;
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (D_MODEL as f64).sqrt());
        let weights = tape.softmax(scores)?;
        let mixed = tape.bmm(weights, v)?;
        let mixed = tape.reshape(mixed, &[b * n, D_MODEL])?;
        let out = tape.matmul(mixed, self.vars["attn.output"])?;
        let out = tape.reshape(out, &[b, n, D_MODEL])?;
        let outputs = tape.add(out, tokens)?;
        let pooled = tape.mean(outputs, Some(1))?;
        Ok(Attention {
            weights,
            outputs,
            pooled,
        })
    }

    /// Applies the named head (`"head_tf"` or `"head_cmp"`) to `[k×D]`
    /// features.
    pub fn head(&self, tape: &mut Tape, head: &str, features: Var) -> Result<Var> {
        let w = self.vars[format!("{head}.weight").as_str()];
        let b = self.vars[format!("{head}.bias").as_str()];
        let z = tape.matmul(features, w)?;
        tape.add_bias(z, b, 1)
    }

    /// Full forward pass. With `reverse_cmp`, a gradient-reversal boundary
    /// sits between the pooled features and the compression head.
    pub fn forward(&self, tape: &mut Tape, images: Var, reverse_cmp: bool) -> Result<ForwardVars> {
        let (tokens, h_e) = self.encode(tape, images)?;
        let att = self.attend(tape, tokens)?;
        let h_h = att.pooled;
        let logit_tf = self.head(tape, "head_tf", h_h)?;
        let cmp_in = if reverse_cmp { tape.grad_reverse(h_h) } else { h_h };
        let logit_cmp = self.head(tape, "head_cmp", cmp_in)?;
        Ok(ForwardVars {
            tokens,
            h_e,
            h_h,
            logit_tf,
            logit_cmp,
        })
    }
}

/// Stacks images into a `[B×1×H×W]` tensor scaled to `[0,1]`.
pub fn images_tensor<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    for img in images {
        if img.width() != IMAGE_SIZE || img.height() != IMAGE_SIZE {
            return Err(Error::InvalidShape {
                shape: vec![img.height(), img.width()],
                reason: format!("detector expects {IMAGE_SIZE}x{IMAGE_SIZE} images"),
            });
        }
        data.extend(img.pixels().iter().map(|p| p / 255.0));
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no images supplied".into()));
    }
    Tensor::new(vec![count, 1, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Gradient-free forward pass over a set of images.
pub fn forward_full<'a>(
    params: &ModelParams,
    images: impl IntoIterator<Item = &'a GrayImage>,
) -> Result<Vec<ModelOutput>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images_tensor(images)?);
    let f = bound.forward(&mut tape, x, false)?;
    let h_e = tape.value(f.h_e);
    let h_h = tape.value(f.h_h);
    let lt = tape.value(f.logit_tf).data();
    let lc = tape.value(f.logit_cmp).data();
    Ok((0..lt.len())
        .map(|i| ModelOutput {
            h_e: h_e.row(i).to_vec(),
            h_h: h_h.row(i).to_vec(),
            logit_tf: lt[i],
            logit_cmp: lc[i],
        })
        .collect())
}
