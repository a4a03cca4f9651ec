//! Dense row-major `f64` tensors and the forward-only kernels the network
//! and the attribution methods are built from.
//!
//! Every kernel is a pure function of its arguments. Spatial tensors are laid
//! out channels × height × width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape is non-degenerate, matches
    /// the payload length, and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("dimensions must be >= 1, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as channels × height × width.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape("chw", format!("expected a 3-D tensor, got {other:?}"))),
        }
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Extracts channel `k` of a CHW tensor as a 1×H×W tensor.
    pub fn channel(&self, k: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if k >= c {
            return Err(Error::shape("channel", format!("channel {k} of {c}")));
        }
        let plane = self.data[k * h * w..(k + 1) * h * w].to_vec();
        Ok(Tensor {
            shape: vec![1, h, w],
            data: plane,
        })
    }
}

/// Zero-padded 2-D cross-correlation.
///
/// `weights` is OutC × InC × Kh × Kw and `bias` has one entry per output
/// channel.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (in_c, h, w) = input.chw()?;
    let (out_c, w_in_c, kh, kw) = match weights.shape() {
        &[a, b, c, d] => (a, b, c, d),
        other => {
            return Err(Error::shape(
                "conv2d",
                format!("weights must be OutC x InC x Kh x Kw, got {other:?}"),
            ))
        }
    };
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if w_in_c != in_c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {in_c} channels but weights expect {w_in_c}"),
        ));
    }
    if bias.len() != out_c {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != output channels {out_c}", bias.len()),
        ));
    }
    let padded_h = h + 2 * padding;
    let padded_w = w + 2 * padding;
    if padded_h < kh || padded_w < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"),
        ));
    }
    let out_h = (padded_h - kh) / stride + 1;
    let out_w = (padded_w - kw) / stride + 1;

    let x = input.data();
    let k = weights.data();
    let mut out = vec![0.0; out_c * out_h * out_w];
    for oc in 0..out_c {
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    for ki in 0..kh {
                        let si = (oi * stride + ki) as isize - padding as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let row = (ic * h + si as usize) * w;
                        let krow = ((oc * in_c + ic) * kh + ki) * kw;
                        for kj in 0..kw {
                            let sj = (oj * stride + kj) as isize - padding as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            acc += x[row + sj as usize] * k[krow + kj];
                        }
                    }
                }
                out[(oc * out_h + oi) * out_w + oj] = acc;
            }
        }
    }
    Ok(Tensor {
        shape: vec![out_c, out_h, out_w],
        data: out,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("maxpool2d", "window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {window} larger than spatial dims {h}x{w}"),
        ));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                for di in 0..window {
                    let row = (ch * h + oi * stride + di) * w + oj * stride;
                    for v in &x[row..row + window] {
                        best = best.max(*v);
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, out_h, out_w],
        data: out,
    })
}

/// Fully connected layer: `weights` is K × D.
pub fn dense(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (k, d) = match weights.shape() {
        &[k, d] => (k, d),
        other => return Err(Error::shape("dense", format!("weights must be K x D, got {other:?}"))),
    };
    if input.len() != d {
        return Err(Error::shape(
            "dense",
            format!("input length {} != weight columns {d}", input.len()),
        ));
    }
    if bias.len() != k {
        return Err(Error::shape("dense", format!("bias length {} != rows {k}", bias.len())));
    }
    Ok(weights
        .data()
        .chunks_exact(d)
        .zip(bias)
        .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect())
}

pub fn global_average_pool(input: &Tensor) -> Result<Vec<f64>> {
    let (_, h, w) = input.chw()?;
    let area = (h * w) as f64;
    Ok(input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
///
/// Source coordinate for destination index `d` is
/// `(d + 0.5) * (src / dst) - 0.5`, clamped to `[0, src - 1]`.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "output size must be positive"));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let rows = sample_positions(h, out_h);
    let cols = sample_positions(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = lerp(plane[r0 * w + c0], plane[r0 * w + c1], fc);
                let bottom = lerp(plane[r1 * w + c0], plane[r1 * w + c1], fc);
                out.push(lerp(top, bottom, fr));
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, out_h, out_w],
        data: out,
    })
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

// a + (b - a) * t returns `a` exactly when a == b, which keeps constant maps exact.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}
