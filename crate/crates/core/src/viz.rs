//! PGM/PPM emitters for first-layer filters, template-layer responses and
//! normal maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{forward, NetworkParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SEPARATOR: u8 = 255;
const FLAT_TILE: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Binary PGM (P5, maxval 255).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (w, h, payload) = parse_pnm(bytes, "P5", 1)?;
        Ok(Self {
            width: w,
            height: h,
            pixels: payload.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// Binary PPM (P6, maxval 255).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (w, h, payload) = parse_pnm(bytes, "P6", 3)?;
        Ok(Self {
            width: w,
            height: h,
            pixels: payload.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Parses a binary netpbm header (no comments) and checks the payload size.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &str, channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("netpbm image", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    if fields[0] != magic {
        return Err(Error::format("netpbm image", format!("expected {}, found {}", magic, fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("netpbm image", format!("bad number {:?}", s)));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::format("netpbm image", "maxval must be 255"));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != w * h * channels {
        return Err(Error::format(
            "netpbm image",
            format!("payload is {} bytes, expected {}", payload.len(), w * h * channels),
        ));
    }
    Ok((w, h, payload))
}

/// Min-max normalisation of a tile to 0..=255; flat tiles become mid-gray.
fn min_max_tile(v: &[f64]) -> Vec<u8> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![FLAT_TILE; v.len()];
    }
    v.iter().map(|&x| (255.0 * (x - lo) / (hi - lo)).round() as u8).collect()
}

/// Scales a non-negative panel by its maximum; any nonzero value stays
/// nonzero so voids remain exactly black.
fn support_preserving_panel(v: &[f64]) -> Vec<u8> {
    let hi = v.iter().copied().fold(0.0, f64::max);
    v.iter()
        .map(|&x| {
            if x > 0.0 && hi > 0.0 {
                ((255.0 * x / hi).round() as u8).max(1)
            } else {
                0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// One tile per kernel, averaged over input channels.
    #[default]
    Averaged,
    /// One tile per (kernel, input channel) pair.
    PerChannel,
}

/// Tiles kernels of convolution `layer` (0-based) into a square grid with
/// 1-pixel separators.
pub fn filter_image<T: Scalar>(params: &NetworkParams<T>, layer: usize, mode: FilterMode) -> Result<GrayImage> {
    let conv = params
        .conv_layer(layer)
        .ok_or_else(|| Error::Config(format!("no convolution layer {}", layer)))?;
    let s = conv.kernels.shape();
    let (o, c, k) = (s[0], s[1], s[2]);
    let plane = k * k;
    let tiles: Vec<Vec<f64>> = match mode {
        FilterMode::Averaged => (0..o)
            .map(|oi| {
                (0..plane)
                    .map(|p| (0..c).map(|ci| conv.kernels.data()[(oi * c + ci) * plane + p].as_f64()).sum::<f64>() / c as f64)
                    .collect()
            })
            .collect(),
        FilterMode::PerChannel => (0..o * c)
            .map(|t| conv.kernels.data()[t * plane..(t + 1) * plane].iter().map(|x| x.as_f64()).collect())
            .collect(),
    };
    let per_row = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(per_row);
    let mut img = GrayImage::filled(per_row * k + per_row + 1, rows * k + rows + 1, SEPARATOR);
    for (t, tile) in tiles.iter().enumerate() {
        let (tr, tc) = (t / per_row, t % per_row);
        let q = min_max_tile(tile);
        for y in 0..k {
            for x in 0..k {
                img.put(1 + tc * (k + 1) + x, 1 + tr * (k + 1) + y, q[y * k + x]);
            }
        }
    }
    Ok(img)
}

pub fn dump_filters<T: Scalar>(params: &NetworkParams<T>, layer: usize, mode: FilterMode, out: &Path) -> Result<GrayImage> {
    let img = filter_image(params, layer, mode)?;
    img.write(out)?;
    Ok(img)
}

/// Rows of `[feature mask | template | rectified product]` panels for the
/// selected template channels, each panel enlarged by `zoom`.
pub fn template_response_image<T: Scalar>(
    params: &NetworkParams<T>,
    input: &Tensor<f32>,
    channels: &[usize],
    zoom: usize,
) -> Result<GrayImage> {
    let maps = params
        .template_maps()
        .ok_or_else(|| Error::Config("network has no template bank".into()))?;
    let trace = forward(params, &input.cast())?;
    let zhat = trace.zhat();
    let m = maps.shape()[0];
    if let Some(&c) = channels.iter().find(|&&c| c >= m) {
        return Err(Error::Config(format!("template channel {} out of range ({} maps)", c, m)));
    }
    let (h, w) = (maps.shape()[1], maps.shape()[2]);
    let zoom = zoom.max(1);
    let (ph, pw) = (h * zoom, w * zoom);
    let mut img = GrayImage::filled(3 * pw + 4, channels.len() * (ph + 1) + 1, SEPARATOR);
    for (row, &c) in channels.iter().enumerate() {
        let zh: Vec<f64> = zhat.channel(c).iter().map(|x| x.as_f64()).collect();
        let t: Vec<f64> = maps.channel(c).iter().map(|x| x.as_f64()).collect();
        // Shown as relu(zhat * T) so the panel matches the layer output with
        // or without the template layer active in the network.
        let z: Vec<f64> = zh.iter().zip(&t).map(|(a, b)| (a * b).max(0.0)).collect();
        for (col, panel) in [zh, t, z].iter().enumerate() {
            let q = support_preserving_panel(panel);
            for y in 0..ph {
                for x in 0..pw {
                    img.put(
                        1 + col * (pw + 1) + x,
                        1 + row * (ph + 1) + y,
                        q[(y / zoom) * w + x / zoom],
                    );
                }
            }
        }
    }
    Ok(img)
}

pub fn dump_template_response<T: Scalar>(
    params: &NetworkParams<T>,
    input: &Tensor<f32>,
    channels: &[usize],
    zoom: usize,
    out: &Path,
) -> Result<GrayImage> {
    let img = template_response_image(params, input, channels, zoom)?;
    img.write(out)?;
    Ok(img)
}

/// Extracts panel `col` of row `row` from a response image.
pub fn response_panel(img: &GrayImage, rows: usize, row: usize, col: usize) -> Vec<u8> {
    let ph = (img.height - 1) / rows - 1;
    let pw = (img.width - 4) / 3;
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        for x in 0..pw {
            out.push(img.at(1 + col * (pw + 1) + x, 1 + row * (ph + 1) + y));
        }
    }
    out
}

/// Normal channels `[3,H,W]` in [0,1] as an RGB image.
pub fn normals_image(normals: &Tensor<f32>) -> Result<RgbImage> {
    if normals.rank() != 3 || normals.shape()[0] != 3 {
        return Err(Error::shape("normals image", "channels", format!("{:?}", normals.shape())));
    }
    let (h, w) = (normals.shape()[1], normals.shape()[2]);
    let n = h * w;
    let d = normals.data();
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            pixels.push((d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchConfig, ConvSpec};

    fn plain(first: ConvSpec) -> NetworkParams<f64> {
        let arch = ArchConfig {
            input_size: 18,
            base: vec![first, ConvSpec::new(4, 3, 2), ConvSpec::new(3, 3, 1)],
            ..ArchConfig::miniature().with_template_layer(false)
        };
        NetworkParams::init(&arch, None, 1).unwrap()
    }

    #[test]
    fn filter_grid_layout() {
        let p = plain(ConvSpec::new(16, 5, 1));
        let img = filter_image(&p, 0, FilterMode::Averaged).unwrap();
        assert_eq!((img.width, img.height), (25, 25));
        let img = filter_image(&p, 0, FilterMode::PerChannel).unwrap();
        // 48 tiles -> 7 per row, 7 rows.
        assert_eq!((img.width, img.height), (7 * 5 + 8, 7 * 5 + 8));
        assert!(filter_image(&p, 9, FilterMode::Averaged).is_err());
    }

    #[test]
    fn flat_kernel_is_mid_gray() {
        assert_eq!(min_max_tile(&[0.3; 9]), vec![FLAT_TILE; 9]);
        assert_eq!(min_max_tile(&[0.0, 1.0]), vec![0, 255]);
    }

    #[test]
    fn pgm_and_ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = plain(ConvSpec::new(16, 5, 1));
        let path = dir.path().join("f.pgm");
        let img = dump_filters(&p, 0, FilterMode::Averaged, &path).unwrap();
        assert_eq!(GrayImage::read(&path).unwrap(), img);
        let rgb = normals_image(&Tensor::from_fn(&[3, 2, 3], |i| i as f32 / 17.0)).unwrap();
        assert_eq!(RgbImage::decode(&rgb.encode()).unwrap(), rgb);
        assert!(GrayImage::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(GrayImage::decode(&rgb.encode()).is_err());
    }

    #[test]
    fn panel_normalisation_keeps_support() {
        let q = support_preserving_panel(&[0.0, 1e-9, 0.5, 1.0]);
        assert_eq!(q, vec![0, 1, 128, 255]);
        assert_eq!(support_preserving_panel(&[0.0; 4]), vec![0; 4]);
    }
}
