//! Exactly invertible image codec: space-to-depth patchify, a fixed
//! orthonormal channel mix, and an affine rescale to the dataset's pixel
//! statistics. Diffusion runs on the resulting latent grid.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gaussian, Rng, Tensor};

/// RGB image with values in `[0, 1]`, stored row-major `[h][w][3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(shape_err!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(clamp01).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb.map(clamp01)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb.map(clamp01));
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut r = BufReader::new(bytes);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("ppm: truncated header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("ppm: unsupported magic {}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("ppm: bad header field {s:?}")))
        };
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("ppm: maxval {maxval} unsupported")));
        }
        let mut raw = vec![0u8; w * h * 3];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format("ppm: truncated pixel data".into()))?;
        Image::new(h, w, raw.into_iter().map(|b| b as f64 / 255.0).collect())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }

    /// Tiles images into a single montage, `cols` per row, separated by a
    /// 1-pixel white gutter.
    pub fn contact_sheet(images: &[Image], cols: usize) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("contact sheet of zero images".into()))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|im| im.height != h || im.width != w) {
            return Err(shape_err!("contact sheet images differ in size"));
        }
        let cols = cols.max(1).min(images.len());
        let rows = images.len().div_ceil(cols);
        let (sh, sw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
        let mut sheet = Image::filled(sh, sw, [1.0, 1.0, 1.0]);
        for (k, im) in images.iter().enumerate() {
            let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
            for y in 0..h {
                for x in 0..w {
                    sheet.set_pixel(oy + y, ox + x, im.pixel(y, x));
                }
            }
        }
        Ok(sheet)
    }
}

fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Latent tensor `[channels, height, width]` tagged with its diffusion
/// timestep (`0` = clean).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub data: Tensor,
    pub t: usize,
}

impl LatentGrid {
    pub fn new(data: Tensor, t: usize) -> Self {
        Self { data, t }
    }

    pub fn clean(data: Tensor) -> Self {
        Self { data, t: 0 }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape().get(1).copied().unwrap_or(1)
    }

    pub fn width(&self) -> usize {
        self.data.shape().get(2).copied().unwrap_or(1)
    }

    /// `[h·w × c]` token view used by the denoiser.
    pub fn to_tokens(&self) -> Tensor {
        chw_to_tokens(&self.data)
    }
}

pub(crate) fn chw_to_tokens(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = t.data()[ch * h * w + p];
        }
    }
    Tensor::from_parts(vec![h * w, c], out)
}

pub(crate) fn tokens_to_chw(t: &Tensor, h: usize, w: usize) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = t.data()[p * c + ch];
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Result of decoding, with clamp diagnostics.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: Image,
    pub clamped_pixels: usize,
    /// The latent carried a nonzero timestep tag.
    pub from_noisy_latent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            image_size: 32,
            seed: 0x5eed_c0dec,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    patch_size: usize,
    /// Orthonormal `[d × d]`, `d = 3·patch²`; latent = mixing · patch.
    mixing: Tensor,
    pixel_mean: f64,
    pixel_std: f64,
}

impl Codec {
    pub fn new(patch_size: usize, seed: u64, pixel_mean: f64, pixel_std: f64) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Config("codec: patch_size must be positive".into()));
        }
        let d = 3 * patch_size * patch_size;
        let mixing = orthonormal(d, &mut Rng::new(seed))?;
        Self::from_parts(patch_size, mixing, pixel_mean, pixel_std)
    }

    pub fn from_parts(patch_size: usize, mixing: Tensor, pixel_mean: f64, pixel_std: f64) -> Result<Self> {
        let d = 3 * patch_size * patch_size;
        if mixing.shape() != [d, d] {
            return Err(shape_err!("codec: mixing must be {d}x{d}, got {:?}", mixing.shape()));
        }
        if !(pixel_std > 0.0) || !pixel_mean.is_finite() {
            return Err(Error::Config("codec: pixel statistics must be finite with std > 0".into()));
        }
        let gram = mixing.transpose()?.matmul(&mixing)?;
        let dev = gram.sub(&Tensor::identity(d))?.max_abs();
        if dev >= 1e-10 {
            return Err(Error::Domain(format!(
                "codec: mixing matrix is not orthonormal (|MᵀM − I|∞ = {dev:e})"
            )));
        }
        Ok(Self {
            patch_size,
            mixing,
            pixel_mean,
            pixel_std,
        })
    }

    /// Codec whose affine rescale uses the pooled statistics of `images`.
    pub fn fitted(patch_size: usize, seed: u64, images: &[Image]) -> Result<Self> {
        let (mean, std) = pixel_stats(images)?;
        Self::new(patch_size, seed, mean, std.max(1e-6))
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mixing(&self) -> &Tensor {
        &self.mixing
    }

    pub fn pixel_mean(&self) -> f64 {
        self.pixel_mean
    }

    pub fn pixel_std(&self) -> f64 {
        self.pixel_std
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(shape_err!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch_size
            ));
        }
        Ok(())
    }

    pub fn encode(&self, img: &Image) -> Result<LatentGrid> {
        self.check_dims(img.height, img.width)?;
        let rescaled: Vec<f64> = img
            .data
            .iter()
            .map(|v| (v - self.pixel_mean) / self.pixel_std)
            .collect();
        Ok(LatentGrid::clean(self.encode_raw(&rescaled, img.height, img.width)))
    }

    /// Mixes already-rescaled pixels `[h][w][3]` into a `[d, h/p, w/p]` latent.
    fn encode_raw(&self, pixels: &[f64], h: usize, w: usize) -> Tensor {
        let p = self.patch_size;
        let d = self.latent_channels();
        let (gh, gw) = (h / p, w / p);
        let mut patches = vec![0.0; gh * gw * d];
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (gy * gw + gx) * d;
                for dy in 0..p {
                    for dx in 0..p {
                        let src = ((gy * p + dy) * w + gx * p + dx) * 3;
                        let dst = base + (dy * p + dx) * 3;
                        patches[dst..dst + 3].copy_from_slice(&pixels[src..src + 3]);
                    }
                }
            }
        }
        // tokens[n × d] = patches[n × d] · Mᵀ
        let pt = Tensor::from_parts(vec![gh * gw, d], patches);
        let tokens = pt
            .matmul(&self.mixing.transpose().expect("square"))
            .expect("codec dims");
        tokens_to_chw(&tokens, gh, gw)
    }

    /// Inverse transform without clamping: returns rescaled-back pixels.
    pub fn decode_raw(&self, z: &LatentGrid) -> Result<(usize, usize, Vec<f64>)> {
        let d = self.latent_channels();
        if z.data.shape().len() != 3 || z.channels() != d {
            return Err(shape_err!(
                "decode: latent {:?} has wrong channel count (want {d})",
                z.data.shape()
            ));
        }
        let p = self.patch_size;
        let (gh, gw) = (z.height(), z.width());
        let tokens = chw_to_tokens(&z.data);
        let patches = tokens.matmul(&self.mixing)?;
        let (h, w) = (gh * p, gw * p);
        let mut px = vec![0.0; h * w * 3];
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (gy * gw + gx) * d;
                for dy in 0..p {
                    for dx in 0..p {
                        let dst = ((gy * p + dy) * w + gx * p + dx) * 3;
                        let src = base + (dy * p + dx) * 3;
                        for c in 0..3 {
                            px[dst + c] =
                                patches.data()[src + c] * self.pixel_std + self.pixel_mean;
                        }
                    }
                }
            }
        }
        Ok((h, w, px))
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Decoded> {
        let (h, w, px) = self.decode_raw(z)?;
        let clamped_pixels = px
            .chunks(3)
            .filter(|rgb| rgb.iter().any(|v| !(0.0..=1.0).contains(v)))
            .count();
        Ok(Decoded {
            image: Image::new(h, w, px)?,
            clamped_pixels,
            from_noisy_latent: z.t != 0,
        })
    }

    /// Encodes unclamped pixel values (used to invert `decode_raw`).
    pub fn encode_raw_pixels(&self, h: usize, w: usize, px: &[f64]) -> Result<LatentGrid> {
        self.check_dims(h, w)?;
        if px.len() != h * w * 3 {
            return Err(shape_err!("pixel buffer size mismatch"));
        }
        let rescaled: Vec<f64> = px
            .iter()
            .map(|v| (v - self.pixel_mean) / self.pixel_std)
            .collect();
        Ok(LatentGrid::clean(self.encode_raw(&rescaled, h, w)))
    }
}

/// Pooled mean and standard deviation over every pixel channel.
pub fn pixel_stats(images: &[Image]) -> Result<(f64, f64)> {
    let n: usize = images.iter().map(|im| im.data.len()).sum();
    if n == 0 {
        return Err(Error::Input("pixel statistics of an empty image set".into()));
    }
    let mean = images.iter().flat_map(|im| &im.data).sum::<f64>() / n as f64;
    let var = images
        .iter()
        .flat_map(|im| &im.data)
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok((mean, var.sqrt()))
}

/// Orthonormal matrix from modified Gram-Schmidt (two passes) on a seeded
/// Gaussian matrix.
fn orthonormal(d: usize, rng: &mut Rng) -> Result<Tensor> {
    let g = gaussian(rng, &[d, d])?;
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| g.get2(i, j)).collect()).collect();
    for j in 0..d {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..d).map(|i| cols[j][i] * cols[k][i]).sum();
                for i in 0..d {
                    cols[j][i] -= dot * cols[k][i];
                }
            }
        }
        let n = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut cols[j] {
            *v /= n;
        }
    }
    let mut m = Tensor::zeros(&[d, d]);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m.set2(i, j, *v);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform;

    fn random_image(rng: &mut Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, uniform(rng, &[h * w * 3], 0.0, 1.0).unwrap().into_data()).unwrap()
    }

    fn codec() -> Codec {
        Codec::new(4, 9, 0.45, 0.3).unwrap()
    }

    #[test]
    fn zero_image_encodes_to_constant_offset() {
        let c = codec();
        let z = c.encode(&Image::filled(32, 32, [0.0; 3])).unwrap();
        assert_eq!(z.data.shape(), &[48, 8, 8]);
        let offset: Vec<f64> = (0..48)
            .map(|k| (0..48).map(|j| c.mixing.get2(k, j)).sum::<f64>() * (-0.45 / 0.3))
            .collect();
        for ch in 0..48 {
            for p in 0..64 {
                assert!((z.data.data()[ch * 64 + p] - offset[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roundtrip_and_isometry() {
        let c = codec();
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let img = random_image(&mut rng, 32, 32);
            let z = c.encode(&img).unwrap();
            let dec = c.decode(&z).unwrap();
            assert_eq!(dec.clamped_pixels, 0);
            let err = img
                .data()
                .iter()
                .zip(dec.image.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-9);

            let rescaled_norm = img
                .data()
                .iter()
                .map(|v| ((v - 0.45) / 0.3).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((z.data.norm() - rescaled_norm).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_after_decode_is_identity_before_clamping() {
        let c = codec();
        let z = LatentGrid::clean(gaussian(&mut Rng::new(4), &[48, 8, 8]).unwrap());
        let (h, w, px) = c.decode_raw(&z).unwrap();
        let z2 = c.encode_raw_pixels(h, w, &px).unwrap();
        assert!(z2.data.sub(&z.data).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn decoding_noise_matches_dataset_mean_and_flags_it() {
        let c = codec();
        let z = LatentGrid::new(gaussian(&mut Rng::new(2), &[48, 8, 8]).unwrap(), 5);
        let (_, _, px) = c.decode_raw(&z).unwrap();
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        assert!((mean - 0.45).abs() < 0.05, "mean {mean}");
        let dec = c.decode(&z).unwrap();
        assert!(dec.from_noisy_latent);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let c = codec();
        assert!(matches!(c.encode(&Image::filled(30, 32, [0.5; 3])), Err(Error::Shape(_))));
        let z = LatentGrid::clean(Tensor::zeros(&[12, 8, 8]));
        assert!(matches!(c.decode(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn mixing_is_orthonormal() {
        let c = codec();
        let g = c.mixing.transpose().unwrap().matmul(&c.mixing).unwrap();
        assert!(g.sub(&Tensor::identity(48)).unwrap().max_abs() < 1e-10);
        assert!(Codec::from_parts(4, Tensor::full(&[48, 48], 0.1), 0.5, 0.2).is_err());
    }

    #[test]
    fn ppm_roundtrip() {
        let mut img = Image::filled(3, 2, [0.2, 0.4, 0.6]);
        img.set_pixel(1, 1, [1.0, 0.0, 0.5]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n2 3\n255\n"));
        let back = Image::from_ppm(&bytes).unwrap();
        assert_eq!(back.to_ppm(), bytes);
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn contact_sheet_layout() {
        let imgs = vec![Image::filled(2, 2, [0.0; 3]); 3];
        let sheet = Image::contact_sheet(&imgs, 2).unwrap();
        assert_eq!((sheet.height(), sheet.width()), (7, 7));
        assert_eq!(sheet.pixel(1, 1), [0.0; 3]);
        assert_eq!(sheet.pixel(0, 0), [1.0; 3]);
    }
}
