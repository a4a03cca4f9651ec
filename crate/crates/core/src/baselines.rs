//! Forward-only comparison methods: Score-CAM, RISE and a random control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkSplit;
use crate::shapley::{Method, SaliencyMap};
use crate::tensor::{bilinear_resize, Tensor};
use crate::worth::{NetworkOracle, ScoreOracle};

/// Masks scored per oracle batch; bounds memory for large inputs.
const RISE_CHUNK: usize = 128;

/// Score-CAM through an in-process network.
pub fn score_cam(net: &NetworkSplit, image: &Tensor, target_class: usize) -> Result<SaliencyMap> {
    let feature_map = net.forward_head(image)?;
    score_cam_from(&NetworkOracle(net), image, &feature_map, target_class)
}

/// Score-CAM from a precomputed feature map.
///
/// `oracle` scores whole images. Each channel is upsampled to the image
/// size, min-max normalized and multiplied into the image; the target-class
/// probability of that image is the channel weight. Constant channels get
/// weight 0. The grid is `ReLU(Σ_k w_k A^k)` at feature resolution.
pub fn score_cam_from(
    oracle: &dyn ScoreOracle,
    image: &Tensor,
    feature_map: &Tensor,
    target_class: usize,
) -> Result<SaliencyMap> {
    let (channels, h, w) = feature_map.chw()?;
    let (ic, ih, iw) = image.chw()?;
    let mut masked = Vec::new();
    let mut scored = Vec::new();
    for k in 0..channels {
        let up = bilinear_resize(&feature_map.channel(k)?, ih, iw)?;
        let (lo, hi) = up
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi - lo <= 0.0 {
            continue;
        }
        let norm: Vec<f64> = up.data().iter().map(|v| (v - lo) / (hi - lo)).collect();
        let mut x = image.clone();
        for (idx, v) in x.data_mut().iter_mut().enumerate() {
            *v *= norm[idx % (ih * iw)];
        }
        debug_assert_eq!(x.len(), ic * ih * iw);
        masked.push(x);
        scored.push(k);
    }
    let probs = if masked.is_empty() {
        vec![]
    } else {
        oracle.score_batch(&masked, target_class)?
    };
    let mut weights = vec![0.0; channels];
    for (&k, p) in scored.iter().zip(probs) {
        weights[k] = p;
    }
    let x = feature_map.data();
    let mut grid = vec![0.0; h * w];
    for (k, &wk) in weights.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        for (g, a) in grid.iter_mut().zip(&x[k * h * w..(k + 1) * h * w]) {
            *g += wk * a;
        }
    }
    for g in &mut grid {
        *g = g.max(0.0);
    }
    let mut map = SaliencyMap::new(h, w, grid, Method::ScoreCam, target_class)?;
    map.meta.channel_weights = Some(weights);
    map.meta.settings = Some(serde_json::json!({
        "normalization": "per-channel min-max after bilinear upsampling",
        "channels": "all",
    }));
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiseConfig {
    pub masks: usize,
    /// Cells per side of the coarse mask grid.
    pub grid: usize,
    pub keep_prob: f64,
    pub seed: u64,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            masks: 4000,
            grid: 7,
            keep_prob: 0.5,
            seed: 0,
        }
    }
}

/// The `index`-th RISE mask at `height × width`: a Bernoulli(`keep_prob`)
/// cell grid, bilinearly upsampled. Stream `index` of ChaCha8 seeded by
/// `seed`, cells drawn row-major.
pub fn rise_mask(config: &RiseConfig, index: u64, height: usize, width: usize) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let cells: Vec<f64> = (0..config.grid * config.grid)
        .map(|_| if rng.gen::<f64>() < config.keep_prob { 1.0 } else { 0.0 })
        .collect();
    let coarse = Tensor::new(vec![1, config.grid, config.grid], cells)?;
    Ok(bilinear_resize(&coarse, height, width)?.into_data())
}

/// RISE saliency at image resolution: `Σ_r p_r M_r / (N · keep_prob)`.
///
/// `oracle` scores whole images. Masks are scored in chunks and accumulated
/// in mask order.
pub fn rise(oracle: &dyn ScoreOracle, image: &Tensor, target_class: usize, config: &RiseConfig) -> Result<SaliencyMap> {
    if config.masks == 0 {
        return Err(Error::InvalidValue("rise needs at least one mask".into()));
    }
    if config.grid == 0 {
        return Err(Error::InvalidValue("rise cell grid must be positive".into()));
    }
    if !(config.keep_prob > 0.0 && config.keep_prob <= 1.0) {
        return Err(Error::InvalidValue(format!("keep_prob {} not in (0, 1]", config.keep_prob)));
    }
    let (_, h, w) = image.chw()?;
    let area = h * w;
    let mut acc = vec![0.0; area];
    let mut start = 0;
    while start < config.masks {
        let end = (start + RISE_CHUNK).min(config.masks);
        let masks: Vec<Vec<f64>> = (start..end)
            .map(|r| rise_mask(config, r as u64, h, w))
            .collect::<Result<_>>()?;
        let inputs: Vec<Tensor> = masks
            .iter()
            .map(|m| {
                let mut x = image.clone();
                for (idx, v) in x.data_mut().iter_mut().enumerate() {
                    *v *= m[idx % area];
                }
                x
            })
            .collect();
        let probs = oracle.score_batch(&inputs, target_class).map_err(|e| match e {
            Error::Batch { index, source } => Error::Batch {
                index: start + index,
                source,
            },
            other => other,
        })?;
        for (m, p) in masks.iter().zip(probs) {
            for (a, v) in acc.iter_mut().zip(m) {
                *a += p * v;
            }
        }
        start = end;
    }
    let scale = 1.0 / (config.masks as f64 * config.keep_prob);
    for a in &mut acc {
        *a *= scale;
    }
    let mut map = SaliencyMap::new(h, w, acc, Method::Rise, target_class)?;
    map.meta.seed = Some(config.seed);
    map.meta.samples = Some(config.masks);
    map.meta.settings = Some(serde_json::to_value(config).expect("config serializes"));
    Ok(map)
}

/// I.i.d. uniform `[0, 1)` grid.
pub fn random_saliency(height: usize, width: usize, seed: u64) -> Result<SaliencyMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..height * width).map(|_| rng.gen::<f64>()).collect();
    let mut map = SaliencyMap::new(height, width, values, Method::Random, 0)?;
    map.meta.seed = Some(seed);
    Ok(map)
}
