//! Toynet checked against a loop-by-loop reimplementation that decodes the
//! shipped weight file by hand.

#![allow(clippy::needless_range_loop)]

use shapcam::tensor::Tensor;
use shapcam::worth::{baseline_values, make_game, Coalition, CoalitionGame, TailOracle};
use shapcam::{exact_shapley, toynet};

struct RefLayer {
    shape: Vec<usize>,
    w: Vec<f64>,
    b: Vec<f64>,
}

fn decode_weights() -> Vec<RefLayer> {
    let bytes = toynet::WEIGHTS;
    assert_eq!(&bytes[..8], b"SCAMWT01");
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob = &bytes[16 + mlen..];
    let manifest: toml::Value = toml::from_str(std::str::from_utf8(&bytes[16..16 + mlen]).unwrap()).unwrap();
    manifest["entry"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            let shape: Vec<usize> = e["shape"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_integer().unwrap() as usize)
                .collect();
            let off = e["offset"].as_integer().unwrap() as usize;
            let len = e["length"].as_integer().unwrap() as usize;
            let floats: Vec<f64> = blob[off..off + len]
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let nw: usize = shape.iter().product();
            RefLayer {
                w: floats[..nw].to_vec(),
                b: floats[nw..].to_vec(),
                shape,
            }
        })
        .collect()
}

/// (C, H, W) planes as nested vectors.
type Vol = Vec<Vec<Vec<f64>>>;

fn to_vol(t: &Tensor) -> Vol {
    let (c, h, w) = t.chw().unwrap();
    (0..c)
        .map(|k| (0..h).map(|i| (0..w).map(|j| t.at3(k, i, j)).collect()).collect())
        .collect()
}

fn conv_relu(x: &Vol, l: &RefLayer, stride: usize, pad: usize) -> Vol {
    let (o, ci, k) = (l.shape[0], l.shape[1], l.shape[2]);
    let h = x[0].len();
    let w = x[0][0].len();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; o];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = l.b[oc];
                for c in 0..ci {
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * stride + u) as isize - pad as isize;
                            let xx = (j * stride + v) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += l.w[((oc * ci + c) * k + u) * k + v] * x[c][y as usize][xx as usize];
                            }
                        }
                    }
                }
                out[oc][i][j] = s.max(0.0);
            }
        }
    }
    out
}

fn maxpool(x: &Vol) -> Vol {
    x.iter()
        .map(|p| {
            (0..p.len() / 2)
                .map(|i| {
                    (0..p[0].len() / 2)
                        .map(|j| {
                            p[2 * i][2 * j]
                                .max(p[2 * i][2 * j + 1])
                                .max(p[2 * i + 1][2 * j])
                                .max(p[2 * i + 1][2 * j + 1])
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn reference_head(image: &Tensor, layers: &[RefLayer]) -> Vol {
    let a = conv_relu(&to_vol(image), &layers[0], 2, 1);
    conv_relu(&maxpool(&a), &layers[1], 2, 1)
}

fn reference_tail(fm: &Vol, fc: &RefLayer) -> Vec<f64> {
    let gap: Vec<f64> = fm
        .iter()
        .map(|p| p.iter().flatten().sum::<f64>() / (p.len() * p[0].len()) as f64)
        .collect();
    let logits: Vec<f64> = (0..fc.shape[0])
        .map(|r| fc.b[r] + (0..fc.shape[1]).map(|c| fc.w[r * fc.shape[1] + c] * gap[c]).sum::<f64>())
        .collect();
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn forward_head_and_probabilities_match_reference() {
    let layers = decode_weights();
    let net = toynet::load().unwrap();
    for k in 0..5 {
        let image = toynet::planted_image(11, k).image;
        let fm = net.forward_head(&image).unwrap();
        let want = reference_head(&image, &layers);
        assert_eq!(fm.shape(), &[64, 3, 3]);
        for (a, b) in fm.data().iter().zip(want.iter().flatten().flatten()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let probs = net.forward(&image).unwrap();
        for (a, b) in probs.iter().zip(reference_tail(&want, &layers[2])) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_coalition_worth_matches_reference() {
    let layers = decode_weights();
    let net = toynet::load().unwrap();
    let image = toynet::fixed_image();
    let class = toynet::top1(&net.forward(&image).unwrap());
    let fm = net.forward_head(&image).unwrap();
    let oracle = TailOracle(&net);
    let game = make_game(fm.clone(), class, &oracle).unwrap();
    // every position replaced by its channel mean
    let vol = to_vol(&fm);
    let baseline: Vol = vol
        .iter()
        .map(|p| {
            let mean = p.iter().flatten().sum::<f64>() / 9.0;
            vec![vec![mean; 3]; 3]
        })
        .collect();
    let want = reference_tail(&baseline, &layers[2])[class];
    let got = game.worth(&Coalition::empty(9)).unwrap();
    assert!((got - want).abs() < 1e-12);
    let means = baseline_values(&fm, Default::default()).unwrap();
    for (c, m) in means.iter().enumerate() {
        assert!((m - baseline[c][0][0]).abs() < 1e-12);
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

#[test]
fn game_exact_values_match_subset_oracle() {
    let layers = decode_weights();
    let net = toynet::load().unwrap();
    let image = toynet::fixed_image();
    let class = toynet::top1(&net.forward(&image).unwrap());
    let fm = to_vol(&net.forward_head(&image).unwrap());
    let means: Vec<f64> = fm.iter().map(|p| p.iter().flatten().sum::<f64>() / 9.0).collect();
    let worth = |mask: u32| {
        let masked: Vol = fm
            .iter()
            .enumerate()
            .map(|(c, p)| {
                (0..3)
                    .map(|i| (0..3).map(|j| if mask >> (i * 3 + j) & 1 == 1 { p[i][j] } else { means[c] }).collect())
                    .collect()
            })
            .collect();
        reference_tail(&masked, &layers[2])[class]
    };
    let table: Vec<f64> = (0..512).map(worth).collect();
    let mut want = vec![0.0; 9];
    for (i, w) in want.iter_mut().enumerate() {
        for s in 0..512u32 {
            if s >> i & 1 == 0 {
                let size = s.count_ones() as usize;
                *w += factorial(size) * factorial(8 - size) / factorial(9) * (table[(s | 1 << i) as usize] - table[s as usize]);
            }
        }
    }
    let oracle = TailOracle(&net);
    let game = make_game(net.forward_head(&image).unwrap(), class, &oracle).unwrap();
    let got = exact_shapley(&game).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let residual = got.iter().sum::<f64>() - (table[511] - table[0]);
    assert!(residual.abs() < 1e-9);
}
