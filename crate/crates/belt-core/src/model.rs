//! The desk-scale classifier: a stack of strided conv+ReLU blocks (the
//! feature extractor `A`), global average pooling, and a linear head (`B`),
//! so `forward(x) = head(features(x))` with the split at the last
//! convolutional layer. Includes a versioned binary checkpoint container.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{check_same_shape, Error, Result};
use crate::nn::{
    argmax, global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv2d, Linear,
};
use crate::seed::{rng_from, substream};
use crate::Image;

const CHECKPOINT_MAGIC: &[u8; 8] = b"BELTCKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub conv_blocks: Vec<ConvSpec>,
    /// Dimension of the pooled feature vector; must equal the channel count
    /// of the final conv block.
    pub feature_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk architecture: 32/64/128-channel 3x3 stride-2 blocks.
    pub fn desk(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Self {
        let conv_blocks = [32, 64, 128]
            .into_iter()
            .map(|out_channels| ConvSpec {
                out_channels,
                kernel: 3,
                stride: 2,
            })
            .collect();
        Self {
            input_shape,
            num_classes,
            conv_blocks,
            feature_dim: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("num_classes must be >= 2"));
        }
        let last = self
            .conv_blocks
            .last()
            .ok_or_else(|| Error::contract("at least one conv block required"))?;
        if last.out_channels != self.feature_dim {
            return Err(Error::contract(format!(
                "feature_dim {} must equal final conv channels {}",
                self.feature_dim, last.out_channels
            )));
        }
        let (_, mut h, mut w) = self.input_shape;
        for (i, block) in self.conv_blocks.iter().enumerate() {
            if block.kernel == 0 || block.stride == 0 {
                return Err(Error::contract(format!("block {i}: zero kernel or stride")));
            }
            let pad = (block.kernel - 1) / 2;
            if h + 2 * pad < block.kernel || w + 2 * pad < block.kernel {
                return Err(Error::contract(format!(
                    "block {i}: spatial size {h}x{w} too small for kernel {}",
                    block.kernel
                )));
            }
            h = (h + 2 * pad - block.kernel) / block.stride + 1;
            w = (w + 2 * pad - block.kernel) / block.stride + 1;
        }
        if h == 0 || w == 0 {
            return Err(Error::contract("conv stack collapses spatial dims to zero"));
        }
        Ok(())
    }
}

/// Cached activations of one forward pass; holds everything the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input_dims: Vec<(usize, usize, usize)>,
    pub cols: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array3<f64>>,
    pub feature: Array1<f64>,
    pub logits: Array1<f64>,
}

/// Parameter gradients, mirroring the model layout.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub blocks: Vec<(Array2<f64>, Array1<f64>)>,
    pub head: (Array2<f64>, Array1<f64>),
}

impl ParamGrads {
    pub fn zeros_like(model: &FeatureSplitClassifier) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| (Array2::zeros(b.weight.dim()), Array1::zeros(b.bias.len())))
                .collect(),
            head: (
                Array2::zeros(model.head.weight.dim()),
                Array1::zeros(model.head.bias.len()),
            ),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            *w += ow;
            *b += ob;
        }
        self.head.0 += &other.head.0;
        self.head.1 += &other.head.1;
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in self.blocks.iter_mut() {
            *w *= factor;
            *b *= factor;
        }
        self.head.0 *= factor;
        self.head.1 *= factor;
    }
}

/// Classifier decomposed as `head(features(x))`.
#[derive(Debug, Clone)]
pub struct FeatureSplitClassifier {
    pub config: ModelConfig,
    pub blocks: Vec<Conv2d>,
    pub head: Linear,
}

impl FeatureSplitClassifier {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(substream(config.seed, "model-init"));
        let mut in_channels = config.input_shape.0;
        let mut blocks = Vec::with_capacity(config.conv_blocks.len());
        for spec in &config.conv_blocks {
            blocks.push(Conv2d::init(
                in_channels,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                &mut rng,
            ));
            in_channels = spec.out_channels;
        }
        let head = Linear::init(config.feature_dim, config.num_classes, &mut rng);
        Ok(Self {
            config,
            blocks,
            head,
        })
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        let (c, h, w) = self.config.input_shape;
        check_same_shape("model input", &[c, h, w], x.shape())
    }

    /// Full forward pass with cached intermediates.
    pub fn forward_trace(&self, x: &Image) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut input_dims = Vec::with_capacity(self.blocks.len());
        let mut cols = Vec::with_capacity(self.blocks.len());
        let mut pre_activations = Vec::with_capacity(self.blocks.len());
        let mut current = x.clone();
        for block in &self.blocks {
            input_dims.push(current.dim());
            let (block_cols, pre) = block.forward(&current)?;
            current = relu(&pre);
            cols.push(block_cols);
            pre_activations.push(pre);
        }
        let feature = global_avg_pool(&current);
        let logits = self.head.forward(&feature);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("non-finite logits".into()));
        }
        Ok(ForwardTrace {
            input_dims,
            cols,
            pre_activations,
            feature,
            logits,
        })
    }

    /// `A(x)`: pooled activation of the last conv block.
    pub fn features(&self, x: &Image) -> Result<Array1<f64>> {
        Ok(self.forward_trace(x)?.feature)
    }

    /// `B(A(x))`: class logits.
    pub fn forward(&self, x: &Image) -> Result<Array1<f64>> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// Argmax class, ties toward the lowest index.
    pub fn predict(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Backpropagates `d_logits` (plus an optional gradient injected
    /// directly on the pooled feature vector) through the network. Returns
    /// parameter gradients and the gradient w.r.t. the input tensor.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: &Array1<f64>,
        d_feature_extra: Option<&Array1<f64>>,
    ) -> (ParamGrads, Image) {
        let (d_head_w, d_head_b, mut d_feature) = self.head.backward(d_logits, &trace.feature);
        if let Some(extra) = d_feature_extra {
            d_feature += extra;
        }
        let last_pre = trace
            .pre_activations
            .last()
            .expect("model has at least one block");
        let mut d_current = global_avg_pool_backward(&d_feature, last_pre.dim());

        let mut block_grads = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); self.blocks.len()];
        for i in (0..self.blocks.len()).rev() {
            let d_pre = relu_backward(&d_current, &trace.pre_activations[i]);
            let (dw, db, dx) =
                self.blocks[i].backward(&d_pre, &trace.cols[i], trace.input_dims[i]);
            block_grads[i] = (dw, db);
            d_current = dx;
        }
        (
            ParamGrads {
                blocks: block_grads,
                head: (d_head_w, d_head_b),
            },
            d_current,
        )
    }

    /// Gradient of the logits loss w.r.t. the input only (skips the weight
    /// gradients' GEMMs).
    pub fn input_gradient(&self, trace: &ForwardTrace, d_logits: &Array1<f64>) -> Image {
        let d_feature = self.head.weight.t().dot(d_logits);
        let last_pre = trace
            .pre_activations
            .last()
            .expect("model has at least one block");
        let mut d_current = global_avg_pool_backward(&d_feature, last_pre.dim());
        for i in (0..self.blocks.len()).rev() {
            let d_pre = relu_backward(&d_current, &trace.pre_activations[i]);
            let d_mat = d_pre
                .view()
                .into_shape_with_order((d_pre.dim().0, d_pre.dim().1 * d_pre.dim().2))
                .expect("grad reshape");
            let d_cols = self.blocks[i].weight.t().dot(&d_mat);
            d_current = self.blocks[i].col2im(&d_cols, trace.input_dims[i]);
        }
        d_current
    }

    /// SGD step: `θ ← θ − lr · g`.
    pub fn apply_sgd(&mut self, grads: &ParamGrads, learning_rate: f64) {
        for (block, (dw, db)) in self.blocks.iter_mut().zip(grads.blocks.iter()) {
            block.weight.scaled_add(-learning_rate, dw);
            block.bias.scaled_add(-learning_rate, db);
        }
        self.head.weight.scaled_add(-learning_rate, &grads.head.0);
        self.head.bias.scaled_add(-learning_rate, &grads.head.1);
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.len() + b.bias.len())
            .sum::<usize>()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    /// Parameters flattened in canonical order (blocks' weight then bias,
    /// then head weight, head bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for block in &self.blocks {
            out.extend(block.weight.iter());
            out.extend(block.bias.iter());
        }
        out.extend(self.head.weight.iter());
        out.extend(self.head.bias.iter());
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::contract(format!(
                "parameter count mismatch: model has {}, given {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for block in &mut self.blocks {
            for v in block.weight.iter_mut() {
                *v = it.next().expect("length checked");
            }
            for v in block.bias.iter_mut() {
                *v = it.next().expect("length checked");
            }
        }
        for v in self.head.weight.iter_mut() {
            *v = it.next().expect("length checked");
        }
        for v in self.head.bias.iter_mut() {
            *v = it.next().expect("length checked");
        }
        Ok(())
    }

    /// Gradients flattened in the same canonical order as [`params_flat`].
    ///
    /// [`params_flat`]: Self::params_flat
    pub fn grads_flat(grads: &ParamGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &grads.blocks {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(grads.head.0.iter());
        out.extend(grads.head.1.iter());
        out
    }
}

/// Free-form training metadata stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
}

/// Checkpoint layout: magic `BELTCKP1`, u64 LE header length, JSON header
/// (format version, architecture config, metadata), u64 LE parameter count,
/// parameters as f64 LE in canonical order.
pub fn save_checkpoint(
    model: &FeatureSplitClassifier,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        format_version: 1,
        config: model.config.clone(),
        meta: meta.clone(),
    })
    .map_err(|e| Error::contract(format!("checkpoint header encode: {e}")))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u64::<LittleEndian>(header.len() as u64)?;
    out.write_all(&header)?;
    let params = model.params_flat();
    out.write_u64::<LittleEndian>(params.len() as u64)?;
    for v in params {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.flush()?;
    Ok(())
}

use std::fs::File;

pub fn load_checkpoint(path: &Path) -> Result<(FeatureSplitClassifier, CheckpointMeta)> {
    let load_err = |offset: u64, detail: String| Error::Load {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    let mut file =
        BufReader::new(File::open(path).map_err(|e| load_err(0, e.to_string()))?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| load_err(0, e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(load_err(0, "bad magic, not a checkpoint file".into()));
    }
    let header_len = file
        .read_u64::<LittleEndian>()
        .map_err(|e| load_err(8, e.to_string()))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| load_err(16, e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| load_err(16, format!("header decode: {e}")))?;
    if header.format_version != 1 {
        return Err(load_err(
            16,
            format!("unsupported checkpoint version {}", header.format_version),
        ));
    }
    let params_offset = 16 + header_len as u64;
    let n_params = file
        .read_u64::<LittleEndian>()
        .map_err(|e| load_err(params_offset, e.to_string()))? as usize;
    let mut model = FeatureSplitClassifier::init(header.config)?;
    if n_params != model.num_params() {
        return Err(load_err(
            params_offset,
            format!(
                "parameter count {} does not match architecture ({})",
                n_params,
                model.num_params()
            ),
        ));
    }
    let mut params = vec![0f64; n_params];
    file.read_f64_into::<LittleEndian>(&mut params)
        .map_err(|e| load_err(params_offset + 8, e.to_string()))?;
    model.set_params_flat(&params)?;
    Ok((model, header.meta))
}
