//! The bundled toy classifier and the planted-patch synthetic dataset.
//!
//! Toynet takes a 3×24×24 image through two conv blocks to a 64×3×3 feature
//! map, then GAP, a 10-way dense layer and softmax (20,042 parameters).
//! Weights are He-uniform draws from ChaCha8 seeded with [`SEED`]; conv
//! biases are zero and the dense layer's bound is scaled by [`DENSE_GAIN`]
//! so the softmax is not flat.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::BBox;
use crate::model::{LayerKind, LayerSpec, ModelSpec, NetworkSplit, WeightBundle};
use crate::tensor::Tensor;

pub const SEED: u64 = 42;
pub const INPUT: [usize; 3] = [3, 24, 24];
pub const CLASSES: usize = 10;
pub const PATCH: usize = 8;
pub const DENSE_GAIN: f64 = 4.0;

/// Shipped copies of the generated model files (checked against the
/// generator in tests).
pub const SPEC_TOML: &str = include_str!("../assets/toynet.toml");
pub const WEIGHTS: &[u8] = include_bytes!("../assets/toynet.weights");

pub fn spec() -> ModelSpec {
    let layer = |name: &str, kind| LayerSpec {
        name: name.to_string(),
        kind,
    };
    ModelSpec {
        name: "toynet".into(),
        input: INPUT,
        layers: vec![
            layer(
                "conv1",
                LayerKind::Conv {
                    in_channels: 3,
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ),
            layer("relu1", LayerKind::Relu),
            layer("pool1", LayerKind::Maxpool { window: 2, stride: 2 }),
            layer(
                "conv2",
                LayerKind::Conv {
                    in_channels: 32,
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ),
            layer("relu2", LayerKind::Relu),
            layer("gap", LayerKind::Gap),
            layer(
                "fc",
                LayerKind::Dense {
                    inputs: 64,
                    outputs: CLASSES,
                },
            ),
            layer("softmax", LayerKind::Softmax),
        ],
    }
}

/// Deterministic weights for [`spec`] drawn from `seed`.
pub fn bundle(seed: u64) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrays = Vec::new();
    for layer in spec().layers {
        let Some(shape) = layer.weight_shape() else { continue };
        let fan_in: usize = shape[1..].iter().product();
        let dense = matches!(layer.kind, LayerKind::Dense { .. });
        let bound = (6.0 / fan_in as f64).sqrt() * if dense { DENSE_GAIN } else { 1.0 };
        let count: usize = shape.iter().product();
        let weights: Vec<f32> = (0..count).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        let bias: Vec<f32> = if dense {
            (0..shape[0]).map(|_| rng.gen_range(-0.1..0.1) as f32).collect()
        } else {
            vec![0.0; shape[0]]
        };
        arrays.push((layer.name, shape, weights, bias));
    }
    WeightBundle::from_arrays(&arrays).expect("toynet arrays match their shapes")
}

/// Loads the shipped toynet.
pub fn load() -> Result<NetworkSplit> {
    crate::model::load_model(SPEC_TOML, WEIGHTS)
}

/// One synthetic image: low-amplitude noise with a bright textured patch.
#[derive(Debug, Clone)]
pub struct PlantedImage {
    pub image: Tensor,
    /// Patch location in pixel coordinates.
    pub bbox: BBox,
    /// Texture family the patch was drawn from.
    pub texture: usize,
}

/// Texture `family` evaluated at patch pixel `(i, j)` for channel `c`.
fn texture_value(family: usize, c: usize, i: usize, j: usize) -> f64 {
    let phase = (family * 7 + c * 3) as f64;
    let fi = 0.6 + 0.35 * ((family + c) % 4) as f64;
    let fj = 0.5 + 0.45 * ((family * 3 + c) % 5) as f64;
    0.5 + 0.5 * (fi * i as f64 + fj * j as f64 + phase).sin()
}

/// The `index`-th planted-patch image of the dataset seeded by `seed`.
pub fn planted_image(seed: u64, index: u64) -> PlantedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let [c, h, w] = INPUT;
    let texture = rng.gen_range(0..CLASSES);
    let y0 = rng.gen_range(0..=h - PATCH);
    let x0 = rng.gen_range(0..=w - PATCH);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let noise = rng.gen_range(0.0..0.15);
                let inside = (y0..y0 + PATCH).contains(&i) && (x0..x0 + PATCH).contains(&j);
                data.push(if inside {
                    texture_value(texture, ch, i - y0, j - x0)
                } else {
                    noise
                });
            }
        }
    }
    PlantedImage {
        image: Tensor::new(INPUT.to_vec(), data).expect("synthetic image is valid"),
        bbox: BBox {
            x0,
            y0,
            x1: x0 + PATCH,
            y1: y0 + PATCH,
        },
        texture,
    }
}

/// Image used by golden-value tests.
pub fn fixed_image() -> Tensor {
    planted_image(2024, 0).image
}

/// Index of the largest probability.
pub fn top1(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_files_match_generator() {
        assert_eq!(SPEC_TOML, spec().to_text());
        assert_eq!(WEIGHTS, bundle(SEED).to_bytes().as_slice());
    }

    #[test]
    fn architecture() {
        let net = load().unwrap();
        assert_eq!(net.feature_shape(), &[64, 3, 3]);
        assert_eq!(net.num_classes(), CLASSES);
        assert_eq!(net.head().last().unwrap().name, "relu2");
        let params: usize = bundle(SEED)
            .entries()
            .iter()
            .map(|e| e.length as usize / 4)
            .sum();
        assert_eq!(params, 20_042);
    }

    #[test]
    fn planted_images_are_reproducible_and_bounded() {
        let a = planted_image(3, 7);
        let b = planted_image(3, 7);
        assert_eq!(a.image, b.image);
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.bbox.x1 <= 24 && a.bbox.y1 <= 24);
        assert_ne!(planted_image(3, 8).image, a.image);
    }
}
