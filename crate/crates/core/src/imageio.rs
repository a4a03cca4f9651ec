//! Image decoding, network preprocessing and artifact rendering.
//!
//! Binary PPM (P6, maxval 255) is read and written bit-exactly; PNG goes
//! through the `png` crate. Overlays use the colormap documented on
//! [`colormap`] blended at alpha 0.5.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::shapley::SaliencyMap;
use crate::tensor::{bilinear_resize, Tensor};

pub const PREPROCESS_SIZE: usize = 224;
pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const OVERLAY_ALPHA: f64 = 0.5;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    /// Planar `[0, 1]` tensor, values `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let area = self.width * self.height;
        let mut data = vec![0.0; 3 * area];
        for p in 0..area {
            for c in 0..3 {
                data[c * area + p] = f64::from(self.pixels[3 * p + c]) / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("raster dimensions are positive")
    }

    /// Quantizes a 3×H×W (or 1×H×W, replicated) tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 3 && c != 1 {
            return Err(Error::shape("image", format!("{c} channels; expected 1 or 3")));
        }
        let area = h * w;
        let mut pixels = Vec::with_capacity(3 * area);
        for p in 0..area {
            for ch in 0..3 {
                let v = t.data()[(ch % c) * area + p];
                pixels.push(quantize(v));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PPM {what}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM has zero size".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported; only 8-bit (255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("truncated PPM raster: need {need} bytes")))?;
    Ok(Rgb8 {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<Rgb8> {
    let fmt = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let step = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("png palette not expanded".into())),
    };
    let mut pixels = Vec::with_capacity(width * height * 3);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..width * step].chunks(step) {
            if step < 3 {
                pixels.extend_from_slice(&[px[0]; 3]);
            } else {
                pixels.extend_from_slice(&px[..3]);
            }
        }
    }
    Ok(Rgb8 { width, height, pixels })
}

pub fn encode_png(img: &Rgb8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Decodes PPM or PNG by content.
pub fn decode_image(bytes: &[u8]) -> Result<Rgb8> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(Error::Format("unsupported image format (expected P6 PPM or PNG)".into()))
    }
}

/// RGB image as a 3×H×W tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(decode_image(&fs::read(path)?)?.to_tensor())
}

/// Writes PNG for a `.png` path and PPM otherwise.
pub fn save_rgb(path: &Path, img: &Rgb8) -> Result<()> {
    let bytes = if has_extension(path, "png") {
        encode_png(img)?
    } else {
        encode_ppm(img)
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    save_rgb(path, &Rgb8::from_tensor(image)?)
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Bilinear resize to 224×224 then per-channel `(x − mean) / std`.
pub fn preprocess(image: &Tensor) -> Result<Tensor> {
    let (c, _, _) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("preprocess", format!("{c} channels; expected 3")));
    }
    let mut out = bilinear_resize(image, PREPROCESS_SIZE, PREPROCESS_SIZE)?;
    let area = PREPROCESS_SIZE * PREPROCESS_SIZE;
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let ch = idx / area;
        *v = (*v - MEAN[ch]) / STD[ch];
    }
    Ok(out)
}

/// Jet colormap: `r = clamp(1.5 − |4t − 3|)`, `g = clamp(1.5 − |4t − 2|)`,
/// `b = clamp(1.5 − |4t − 1|)` for `t ∈ [0, 1]`. `colormap(0)` is
/// `(0, 0, 0.5)` and `colormap(1)` is `(0.5, 0, 0)`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |k: f64| (1.5 - (4.0 * t - k).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// ReLU then min-max to `[0, 1]`; a map with no positive range is all zeros.
pub fn display_normalize(values: &[f64]) -> Vec<f64> {
    let hi = values.iter().fold(0.0f64, |m, &v| m.max(v));
    if hi <= 0.0 {
        return vec![0.0; values.len()];
    }
    // after ReLU the minimum is at least 0
    let lo = values.iter().fold(f64::INFINITY, |m, &v| m.min(v.max(0.0)));
    if hi == lo {
        return vec![1.0; values.len()];
    }
    values.iter().map(|&v| (v.max(0.0) - lo) / (hi - lo)).collect()
}

/// Heatmap blend `0.5·image + 0.5·colormap(s)` at image resolution.
pub fn overlay(image: &Tensor, saliency: &SaliencyMap) -> Result<Rgb8> {
    let (_, h, w) = image.chw()?;
    let s = if saliency.height == h && saliency.width == w {
        saliency.clone()
    } else {
        saliency.upsample(h, w)?
    };
    let base = Rgb8::from_tensor(image)?;
    let norm = display_normalize(&s.values);
    let mut pixels = Vec::with_capacity(base.pixels.len());
    for (p, &t) in norm.iter().enumerate() {
        for (c, heat) in colormap(t).into_iter().enumerate() {
            let img = f64::from(base.pixels[3 * p + c]) / 255.0;
            pixels.push(quantize((1.0 - OVERLAY_ALPHA) * img + OVERLAY_ALPHA * heat));
        }
    }
    Ok(Rgb8 {
        width: w,
        height: h,
        pixels,
    })
}

pub fn render_overlay(image: &Tensor, saliency: &SaliencyMap, out_path: &Path) -> Result<()> {
    save_rgb(out_path, &overlay(image, saliency)?)
}

/// Curve points as CSV: a `fraction` column then one column per curve.
pub fn curves_csv(curves: &[(String, Vec<f64>)]) -> Result<String> {
    let Some((_, first)) = curves.first() else {
        return Err(Error::InvalidValue("no curves to render".into()));
    };
    let len = first.len();
    if len < 2 || curves.iter().any(|(_, c)| c.len() != len) {
        return Err(Error::InvalidValue("curves must share a length of at least 2".into()));
    }
    let mut out = String::from("fraction");
    for (name, _) in curves {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..len {
        out.push_str(&format!("{:.2}", i as f64 / (len - 1) as f64));
        for (_, c) in curves {
            out.push_str(&format!(",{}", c[i]));
        }
        out.push('\n');
    }
    Ok(out)
}

const PLOT_W: usize = 320;
const PLOT_H: usize = 240;
const PLOT_MARGIN: usize = 20;

/// Line plot of curves with y in `[0, 1]`, curves colored along the colormap.
pub fn plot_curves(curves: &[(String, Vec<f64>)]) -> Result<Rgb8> {
    if curves.is_empty() {
        return Err(Error::InvalidValue("no curves to render".into()));
    }
    let mut pixels = vec![255u8; PLOT_W * PLOT_H * 3];
    let mut put = |x: usize, y: usize, rgb: [u8; 3]| {
        if x < PLOT_W && y < PLOT_H {
            pixels[3 * (y * PLOT_W + x)..3 * (y * PLOT_W + x) + 3].copy_from_slice(&rgb);
        }
    };
    let (x0, y0) = (PLOT_MARGIN, PLOT_H - PLOT_MARGIN);
    let (pw, ph) = (PLOT_W - 2 * PLOT_MARGIN, PLOT_H - 2 * PLOT_MARGIN);
    for x in x0..=x0 + pw {
        put(x, y0, [0, 0, 0]);
    }
    for y in y0 - ph..=y0 {
        put(x0, y, [0, 0, 0]);
    }
    for (k, (_, c)) in curves.iter().enumerate() {
        let t = if curves.len() == 1 { 0.0 } else { k as f64 / (curves.len() - 1) as f64 };
        let rgb = colormap(t).map(quantize);
        let to_px = |i: usize| {
            let x = x0 as f64 + pw as f64 * i as f64 / (c.len().max(2) - 1) as f64;
            let y = y0 as f64 - ph as f64 * c[i].clamp(0.0, 1.0);
            (x, y)
        };
        for i in 1..c.len() {
            let (ax, ay) = to_px(i - 1);
            let (bx, by) = to_px(i);
            let steps = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                put((ax + (bx - ax) * f).round() as usize, (ay + (by - ay) * f).round() as usize, rgb);
            }
        }
    }
    Ok(Rgb8 {
        width: PLOT_W,
        height: PLOT_H,
        pixels,
    })
}

/// Writes `<out_path>` as CSV and a plot next to it with a `.png` extension.
/// Nothing is written if the curve set is invalid.
pub fn render_curves(curves: &[(String, Vec<f64>)], out_path: &Path) -> Result<PathBuf> {
    let csv = curves_csv(curves)?;
    let plot = plot_curves(curves)?;
    fs::write(out_path, csv)?;
    let plot_path = out_path.with_extension("png");
    save_rgb(&plot_path, &plot)?;
    Ok(plot_path)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::shapley::Method;

    fn ppm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn load_examples() {
        let white = decode_image(&ppm(1, 1, &[255, 255, 255])).unwrap().to_tensor();
        assert_eq!(white.data(), &[1.0, 1.0, 1.0]);
        let black = decode_image(&ppm(1, 1, &[0, 0, 0])).unwrap().to_tensor();
        assert_eq!(black.data(), &[0.0; 3]);
        let two = decode_image(&ppm(2, 1, &[255, 0, 0, 0, 255, 0])).unwrap().to_tensor();
        assert_eq!(two.shape(), &[3, 1, 2]);
        assert_eq!(two.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let with_comment = b"P6 # made by hand\n2 1\n# another\n255\n\x01\x02\x03\x04\x05\x06".to_vec();
        assert_eq!(decode_ppm(&with_comment).unwrap().pixels, vec![1, 2, 3, 4, 5, 6]);
        assert!(matches!(decode_image(&ppm(2, 2, &[0; 5])), Err(Error::Format(_))));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::Format(_))));
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn png_round_trip() {
        let img = Rgb8 {
            width: 3,
            height: 2,
            pixels: (0..18).map(|v| (v * 13) as u8).collect(),
        };
        assert_eq!(decode_image(&encode_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn preprocess_examples() {
        let mut img = Tensor::filled(vec![3, 224, 224], 0.0);
        let area = 224 * 224;
        for v in &mut img.data_mut()[..area] {
            *v = 0.485;
        }
        for v in &mut img.data_mut()[area..2 * area] {
            *v = 1.0;
        }
        let out = preprocess(&img).unwrap();
        assert!(out.data()[..area].iter().all(|&v| v == 0.0));
        let expected = (1.0 - 0.456) / 0.224;
        assert!(out.data()[area..2 * area].iter().all(|&v| (v - expected).abs() < 1e-12));
        assert!((expected - 2.4286).abs() < 1e-4);
        assert_eq!(preprocess(&Tensor::filled(vec![3, 10, 7], 0.5)).unwrap().shape(), &[3, 224, 224]);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(colormap(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(colormap(0.5), [0.5, 1.0, 0.5]);
    }

    #[test]
    fn overlay_examples() {
        let image = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f64 / 11.0).collect()).unwrap();
        let base = Rgb8::from_tensor(&image).unwrap();
        let zero = SaliencyMap::new(2, 2, vec![0.0; 4], Method::Random, 0).unwrap();
        let out = overlay(&image, &zero).unwrap();
        let c0 = colormap(0.0);
        for p in 0..4 {
            for c in 0..3 {
                let want = quantize(0.5 * f64::from(base.pixels[3 * p + c]) / 255.0 + 0.5 * c0[c]);
                assert_eq!(out.pixels[3 * p + c], want);
            }
        }
        let peak = SaliencyMap::new(2, 2, vec![0.1, 0.9, -0.3, 0.2], Method::Random, 0).unwrap();
        let out = overlay(&image, &peak).unwrap();
        let c1 = colormap(1.0);
        for c in 0..3 {
            let want = quantize(0.5 * f64::from(base.pixels[3 + c]) / 255.0 + 0.5 * c1[c]);
            assert_eq!(out.pixels[3 + c], want);
        }
    }

    #[test]
    fn curves_csv_contract() {
        let flat = vec![("deletion".to_string(), vec![0.25; 101])];
        let csv = curves_csv(&flat).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 102);
        assert_eq!(lines[0], "fraction,deletion");
        assert!(lines[1..].iter().all(|l| l.ends_with(",0.25")));
        assert_eq!(lines[101], "1.00,0.25");

        let two = vec![("a".to_string(), vec![0.0; 101]), ("b".to_string(), vec![1.0; 101])];
        assert!(curves_csv(&two).unwrap().starts_with("fraction,a,b\n0.00,0,1\n"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        assert!(render_curves(&[], &path).is_err());
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
        let plot = render_curves(&two, &path).unwrap();
        assert!(path.exists() && plot.exists());
    }
}
