//! Classifier definition, weight bundles, and the head/tail split at the last
//! convolutional layer.
//!
//! A model is described by a TOML document listing its input shape and an
//! ordered layer list. Weights live in a separate binary bundle (see
//! `FORMATS.md` at the repository root for the byte layout).

use std::fmt::Write as _;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"SCAMWT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool {
        window: usize,
        stride: usize,
    },
    Gap,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    /// Weight tensor shape for parameterized layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerKind::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Input tensor shape, channels × height × width.
    pub input: [usize; 3],
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("model spec", e))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    /// Propagates shapes through the layer list, returning the output shape
    /// of every layer.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.to_vec();
        if shape.contains(&0) {
            return Err(Error::layer("input", format!("degenerate input shape {shape:?}")));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let bad = |detail: String| Error::layer(&layer.name, detail);
            shape = match (&layer.kind, shape.as_slice()) {
                (
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    &[c, h, w],
                ) => {
                    if c != *in_channels {
                        return Err(bad(format!("expects {in_channels} input channels, receives {c}")));
                    }
                    if *stride == 0 || *kernel == 0 || *out_channels == 0 {
                        return Err(bad("kernel, stride and out_channels must be positive".into()));
                    }
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(bad(format!("kernel {kernel} exceeds padded input {h}x{w}")));
                    }
                    vec![
                        *out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ]
                }
                (LayerKind::Relu, s) => s.to_vec(),
                (LayerKind::Maxpool { window, stride }, &[c, h, w]) => {
                    if *window == 0 || *stride == 0 || *window > h || *window > w {
                        return Err(bad(format!("window {window} invalid for {h}x{w}")));
                    }
                    vec![c, (h - window) / stride + 1, (w - window) / stride + 1]
                }
                (LayerKind::Gap, &[c, _, _]) => vec![c],
                (LayerKind::Dense { inputs, outputs }, &[d]) => {
                    if d != *inputs {
                        return Err(bad(format!("expects {inputs} inputs, receives {d}")));
                    }
                    if *outputs == 0 {
                        return Err(bad("outputs must be positive".into()));
                    }
                    vec![*outputs]
                }
                (LayerKind::Softmax, &[d]) => vec![d],
                (_, s) => return Err(bad(format!("incompatible input shape {s:?}"))),
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Index of the first tail layer: right after the last convolution and
    /// its activation, if one follows.
    pub fn split_index(&self) -> Result<usize> {
        let last_conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .ok_or_else(|| Error::layer(&self.name, "model has no convolutional layer"))?;
        let mut split = last_conv + 1;
        if matches!(self.layers.get(split).map(|l| &l.kind), Some(LayerKind::Relu)) {
            split += 1;
        }
        Ok(split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Weight tensor shape. The bias (one value per output row/channel,
    /// i.e. `shape[0]` values) follows the weights in the same byte span.
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

impl ManifestEntry {
    fn expected_length(shape: &[usize]) -> u64 {
        let weights: usize = shape.iter().product();
        4 * (weights + shape.first().copied().unwrap_or(0)) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(rename = "entry", default)]
    entries: Vec<ManifestEntry>,
}

/// `(name, weight shape, weights, bias)` for one layer.
pub type LayerArrays = (String, Vec<usize>, Vec<f32>, Vec<f32>);

/// Named f32 weight blobs, one entry per conv or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    entries: Vec<ManifestEntry>,
    blob: Vec<u8>,
}

impl WeightBundle {
    /// Packs per-layer `(name, weight shape, weights, bias)` arrays.
    pub fn from_arrays(layers: &[LayerArrays]) -> Result<Self> {
        let mut entries = Vec::with_capacity(layers.len());
        let mut blob = Vec::new();
        for (name, shape, weights, bias) in layers {
            let count: usize = shape.iter().product();
            if weights.len() != count || bias.len() != shape.first().copied().unwrap_or(0) {
                return Err(Error::layer(name, "array lengths disagree with shape"));
            }
            let offset = blob.len() as u64;
            for v in weights.iter().chain(bias) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        Ok(Self { entries, blob })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "weight file";
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(Error::parse(what, "missing SCAMWT01 magic"));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < manifest_len {
            return Err(Error::parse(what, "manifest truncated"));
        }
        let text = std::str::from_utf8(&body[..manifest_len])
            .map_err(|e| Error::parse(what, format!("manifest is not UTF-8: {e}")))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| Error::parse("weight manifest", e))?;
        let blob = body[manifest_len..].to_vec();

        let mut total = 0u64;
        for entry in &manifest.entries {
            if entry.length != ManifestEntry::expected_length(&entry.shape) {
                return Err(Error::layer(
                    &entry.name,
                    format!("entry length {} inconsistent with shape {:?}", entry.length, entry.shape),
                ));
            }
            if entry.offset + entry.length > blob.len() as u64 {
                return Err(Error::layer(&entry.name, "weight blob truncated"));
            }
            total += entry.length;
        }
        if total != blob.len() as u64 {
            return Err(Error::parse(
                what,
                format!("blob holds {} bytes, manifest accounts for {total}", blob.len()),
            ));
        }
        Ok(Self {
            entries: manifest.entries,
            blob,
        })
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = toml::to_string(&Manifest {
            entries: self.entries.clone(),
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + self.blob.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&self.blob);
        out
    }

    /// Decodes one layer into widened `(weights, bias)`.
    fn layer_arrays(&self, name: &str) -> Option<(&ManifestEntry, Vec<f64>)> {
        let entry = self.entries.iter().find(|e| e.name == name)?;
        let span = &self.blob[entry.offset as usize..(entry.offset + entry.length) as usize];
        let values = span
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Some((entry, values))
    }
}

#[derive(Debug, Clone)]
pub enum LayerOp {
    Conv {
        weights: Tensor,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool {
        window: usize,
        stride: usize,
    },
    Gap,
    Dense {
        weights: Tensor,
        bias: Vec<f64>,
    },
    Softmax,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
}

impl Layer {
    fn apply(&self, x: Tensor) -> Result<Tensor> {
        Ok(match &self.op {
            LayerOp::Conv {
                weights,
                bias,
                stride,
                padding,
            } => tensor::conv2d(&x, weights, bias, *stride, *padding)?,
            LayerOp::Relu => tensor::relu(&x),
            LayerOp::Maxpool { window, stride } => tensor::maxpool2d(&x, *window, *stride)?,
            LayerOp::Gap => Tensor::from_vec(tensor::global_average_pool(&x)?)?,
            LayerOp::Dense { weights, bias } => Tensor::from_vec(tensor::dense(x.data(), weights, bias)?)?,
            LayerOp::Softmax => Tensor::from_vec(tensor::softmax(x.data()))?,
        })
    }
}

fn run(layers: &[Layer], x: Tensor) -> Result<Tensor> {
    layers.iter().try_fold(x, |acc, layer| layer.apply(acc))
}

/// A validated classifier cut after the last convolution's activation.
///
/// The head maps an image to the feature map `A`; the tail maps `A` to class
/// probabilities.
#[derive(Debug, Clone)]
pub struct NetworkSplit {
    spec: ModelSpec,
    head: Vec<Layer>,
    tail: Vec<Layer>,
    split_index: usize,
    feature_shape: Vec<usize>,
    num_classes: usize,
}

/// Parses a model document and its weight file into a split network.
pub fn load_model(spec_document: &str, weight_file: &[u8]) -> Result<NetworkSplit> {
    let spec = ModelSpec::parse(spec_document)?;
    let bundle = WeightBundle::from_bytes(weight_file)?;
    NetworkSplit::new(spec, &bundle)
}

impl NetworkSplit {
    pub fn new(spec: ModelSpec, bundle: &WeightBundle) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let split_index = spec.split_index()?;

        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut used = 0usize;
        for layer in &spec.layers {
            let op = match &layer.kind {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                    let expected = layer.weight_shape().unwrap();
                    let (entry, values) = bundle
                        .layer_arrays(&layer.name)
                        .ok_or_else(|| Error::layer(&layer.name, "no entry in weight manifest"))?;
                    if entry.shape != expected {
                        return Err(Error::layer(
                            &layer.name,
                            format!("manifest shape {:?} != spec shape {expected:?}", entry.shape),
                        ));
                    }
                    used += 1;
                    let count: usize = expected.iter().product();
                    let weights = Tensor::new(expected, values[..count].to_vec())
                        .map_err(|e| Error::layer(&layer.name, e.to_string()))?;
                    let bias = values[count..].to_vec();
                    match layer.kind {
                        LayerKind::Conv { stride, padding, .. } => LayerOp::Conv {
                            weights,
                            bias,
                            stride,
                            padding,
                        },
                        _ => LayerOp::Dense { weights, bias },
                    }
                }
                LayerKind::Relu => LayerOp::Relu,
                LayerKind::Maxpool { window, stride } => LayerOp::Maxpool {
                    window: *window,
                    stride: *stride,
                },
                LayerKind::Gap => LayerOp::Gap,
                LayerKind::Softmax => LayerOp::Softmax,
            };
            layers.push(Layer {
                name: layer.name.clone(),
                op,
            });
        }
        if used != bundle.entries.len() {
            let extra: Vec<&str> = bundle
                .entries
                .iter()
                .filter(|e| spec.layers.iter().all(|l| l.name != e.name || l.weight_shape().is_none()))
                .map(|e| e.name.as_str())
                .collect();
            return Err(Error::layer(
                extra.first().copied().unwrap_or("manifest"),
                "manifest entry does not correspond to a conv or dense layer",
            ));
        }

        let head_shape = shapes[split_index - 1].clone();
        if split_index == layers.len() {
            return Err(Error::layer(&spec.name, "no layers after the last convolution"));
        }
        if !matches!(layers.last().map(|l| &l.op), Some(LayerOp::Softmax)) {
            return Err(Error::layer(&layers.last().unwrap().name, "network must end in softmax"));
        }
        let num_classes = shapes.last().unwrap()[0];
        let tail = layers.split_off(split_index);
        Ok(Self {
            spec,
            head: layers,
            tail,
            split_index,
            feature_shape: head_shape,
            num_classes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    /// Feature-map shape produced by the head, `[C, h, w]`.
    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn head(&self) -> &[Layer] {
        &self.head
    }

    pub fn tail(&self) -> &[Layer] {
        &self.tail
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.input {
            return Err(Error::shape(
                "forward",
                format!("image shape {:?} != model input {:?}", image.shape(), self.spec.input),
            ));
        }
        Ok(())
    }

    pub fn forward_head(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        run(&self.head, image.clone())
    }

    pub fn forward_tail(&self, feature_map: &Tensor) -> Result<Vec<f64>> {
        if feature_map.shape() != self.feature_shape.as_slice() {
            return Err(Error::shape(
                "forward_tail",
                format!(
                    "feature map shape {:?} != tail input {:?}",
                    feature_map.shape(),
                    self.feature_shape
                ),
            ));
        }
        Ok(run(&self.tail, feature_map.clone())?.into_data())
    }

    /// Evaluates the tail on many maps; results are returned in input order.
    pub fn forward_tail_batch(&self, feature_maps: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        feature_maps
            .par_iter()
            .map(|m| self.forward_tail(m))
            .collect()
    }

    /// The unsplit network: every layer in order.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let x = run(&self.head, image.clone())?;
        Ok(run(&self.tail, x)?.into_data())
    }

    pub fn forward_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|x| self.forward(x)).collect()
    }

    /// Repacks the loaded weights (narrowed back to f32) into a bundle.
    pub fn to_bundle(&self) -> WeightBundle {
        let arrays: Vec<_> = self
            .head
            .iter()
            .chain(&self.tail)
            .filter_map(|layer| match &layer.op {
                LayerOp::Conv { weights, bias, .. } | LayerOp::Dense { weights, bias } => Some((
                    layer.name.clone(),
                    weights.shape().to_vec(),
                    weights.data().iter().map(|&v| v as f32).collect(),
                    bias.iter().map(|&v| v as f32).collect(),
                )),
                _ => None,
            })
            .collect();
        WeightBundle::from_arrays(&arrays).expect("loaded layers are consistent")
    }

    /// One-line-per-layer summary.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let shapes = self.spec.infer_shapes().unwrap_or_default();
        for (i, (layer, shape)) in self.spec.layers.iter().zip(&shapes).enumerate() {
            let marker = if i == self.split_index { "-- split --\n" } else { "" };
            let _ = writeln!(out, "{marker}{:<10} {:?} -> {shape:?}", layer.name, layer.kind);
        }
        out
    }
}
