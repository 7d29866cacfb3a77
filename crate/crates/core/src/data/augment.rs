//! Image augmentation for `[B × C × H × W]` batches: random resized crops
//! with bounded aspect ratio and horizontal flips for training, resize plus
//! center crop for evaluation, per-channel normalisation in both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Evaluation resizes the shorter side to this before center cropping.
    pub resize_short: usize,
    pub crop_size: usize,
    pub flip_prob: f64,
    /// Crop area as a fraction of the image, sampled uniformly.
    pub scale: (f64, f64),
    /// Width / height, sampled log-uniformly.
    pub aspect_ratio: (f64, f64),
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AugmentationPolicy {
    /// Desk-scale defaults for 32×32 inputs.
    pub fn desk(channels: usize) -> Self {
        AugmentationPolicy {
            resize_short: 32,
            crop_size: 28,
            flip_prob: 0.5,
            scale: (0.5, 1.0),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim("augmentation expects [B, C, H, W]", x.shape(), &[0, 0, 0, 0])),
    }
}

/// Samples a crop of an `h × w` image: area fraction uniform in
/// `policy.scale`, aspect ratio log-uniform in `policy.aspect_ratio`, offset
/// uniform over every valid position.
pub fn sample_crop(h: usize, w: usize, policy: &AugmentationPolicy, rng: &mut Rng) -> CropBox {
    let area = rng.uniform_range(policy.scale.0, policy.scale.1) * (h * w) as f64;
    let (lo, hi) = policy.aspect_ratio;
    let ratio = rng.uniform_range(lo.ln(), hi.ln()).exp();
    let width = ((area * ratio).sqrt().round() as usize).clamp(1, w);
    let height = ((area / ratio).sqrt().round() as usize).clamp(1, h);
    let top = rng.below(h - height + 1);
    let left = rng.below(w - width + 1);
    CropBox {
        top,
        left,
        height,
        width,
    }
}

/// Bilinear resize of one `h × w` plane (align-corners convention).
fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = coord(y, h, oh);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for x in 0..ow {
            let fx = coord(x, w, ow);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - dx) + src[y0 * w + x1] * dx;
            let bottom = src[y1 * w + x0] * (1.0 - dx) + src[y1 * w + x1] * dx;
            out.push(top * (1.0 - dy) + bottom * dy);
        }
    }
    out
}

pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x)?;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("resize to an empty image".into()));
    }
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        out.extend(resize_plane(plane, h, w, oh, ow));
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

fn crop_image(x: &[f64], c: usize, h: usize, w: usize, bx: CropBox) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * bx.height * bx.width);
    for ch in 0..c {
        for y in bx.top..bx.top + bx.height {
            let row = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.extend_from_slice(&row[bx.left..bx.left + bx.width]);
        }
    }
    out
}

pub fn center_crop(x: &Tensor, size: usize) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x)?;
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArgument(format!("crop {size} larger than image {h}x{w}")));
    }
    let bx = CropBox {
        top: (h - size) / 2,
        left: (w - size) / 2,
        height: size,
        width: size,
    };
    let mut out = Vec::with_capacity(b * c * size * size);
    for img in x.data().chunks(c * h * w) {
        out.extend(crop_image(img, c, h, w, bx));
    }
    Tensor::new(vec![b, c, size, size], out)
}

/// Mirrors image `i` left-to-right where `mask[i]` is set.
pub fn flip_horizontal(x: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x)?;
    if mask.len() != b {
        return Err(Error::dim("flip mask", x.shape(), &[mask.len()]));
    }
    let mut out = x.clone();
    for (img, &flip) in out.data_mut().chunks_mut(c * h * w).zip(mask) {
        if flip {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    Ok(out)
}

pub fn normalize(x: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let (_, c, h, w) = dims4(x)?;
    if mean.len() != c || std.len() != c || std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "normalisation needs {c} means and positive stds"
        )));
    }
    let mut out = x.clone();
    for (p, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let ch = p % c;
        plane.iter_mut().for_each(|v| *v = (*v - mean[ch]) / std[ch]);
    }
    Ok(out)
}

/// Training modes: random resized crop to `crop_size` and random flips.
/// Evaluation: resize the short side to `resize_short`, then center crop.
/// Both normalise.
pub fn augment(x: &Tensor, policy: &AugmentationPolicy, rng: &mut Rng, mode: Mode) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x)?;
    let s = policy.crop_size;
    if s == 0 || s > policy.resize_short.max(1) || s > h.max(w) {
        return Err(Error::InvalidArgument(format!(
            "crop {s} larger than image {h}x{w} (resize {})",
            policy.resize_short
        )));
    }
    let out = if mode.is_train() {
        let mut data = Vec::with_capacity(b * c * s * s);
        for img in x.data().chunks(c * h * w) {
            let bx = sample_crop(h, w, policy, rng);
            let crop = crop_image(img, c, h, w, bx);
            for plane in crop.chunks(bx.height * bx.width) {
                data.extend(resize_plane(plane, bx.height, bx.width, s, s));
            }
        }
        let resized = Tensor::new(vec![b, c, s, s], data)?;
        let mask: Vec<bool> = (0..b).map(|_| rng.bernoulli(policy.flip_prob)).collect();
        flip_horizontal(&resized, &mask)?
    } else {
        let short = h.min(w);
        let r = policy.resize_short;
        let (oh, ow) = if h <= w {
            (r, (w * r).div_ceil(short))
        } else {
            ((h * r).div_ceil(short), r)
        };
        let resized = if (oh, ow) == (h, w) {
            x.clone()
        } else {
            resize_bilinear(x, oh, ow)?
        };
        center_crop(&resized, s)?
    };
    normalize(&out, &policy.mean, &policy.std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(seed: u64) -> Tensor {
        Tensor::rand_normal(&mut Rng::new(seed), &[3, 2, 10, 12], 0.0, 1.0).unwrap()
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = images(1);
        let mask = [true, false, true];
        let once = flip_horizontal(&x, &mask).unwrap();
        assert_ne!(once, x);
        assert_eq!(flip_horizontal(&once, &mask).unwrap(), x);
    }

    #[test]
    fn eval_is_deterministic() {
        let x = images(2);
        let p = AugmentationPolicy {
            resize_short: 10,
            crop_size: 8,
            ..AugmentationPolicy::desk(2)
        };
        let a = augment(&x, &p, &mut Rng::new(0), Mode::Eval).unwrap();
        let b = augment(&x, &p, &mut Rng::new(99), Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 2, 8, 8]);
    }

    #[test]
    fn train_output_shape_and_normalisation() {
        let x = Tensor::full(&[4, 2, 10, 12], 3.0);
        let p = AugmentationPolicy {
            resize_short: 10,
            crop_size: 8,
            mean: vec![1.0, 2.0],
            std: vec![2.0, 0.5],
            ..AugmentationPolicy::desk(2)
        };
        let y = augment(&x, &p, &mut Rng::new(3), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[4, 2, 8, 8]);
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 64) % 2;
            let want = if ch == 0 { 1.0 } else { 2.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let p = AugmentationPolicy {
            resize_short: 10,
            crop_size: 11,
            ..AugmentationPolicy::desk(2)
        };
        assert!(augment(&images(0), &p, &mut Rng::new(0), Mode::Eval).is_err());
        assert!(center_crop(&images(0), 11).is_err());
    }

    #[test]
    fn center_crop_takes_the_middle() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(center_crop(&x, 2).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let x = images(4);
        assert_eq!(resize_bilinear(&x, 10, 12).unwrap(), x);
    }

    #[test]
    fn crop_offsets_cover_the_valid_range_uniformly() {
        // Fixed 7×7 crops of a 10×7 image: four equally likely offsets.
        let p = AugmentationPolicy {
            scale: (0.7, 0.7),
            aspect_ratio: (1.0, 1.0),
            ..AugmentationPolicy::desk(1)
        };
        let mut rng = Rng::new(2024);
        let draws = 100_000;
        let mut cells = [0usize; 4];
        for _ in 0..draws {
            let b = sample_crop(10, 7, &p, &mut rng);
            assert_eq!((b.height, b.width, b.left), (7, 7, 0));
            cells[b.top] += 1;
        }
        let expected = draws as f64 / 4.0;
        for c in cells {
            assert!((c as f64 - expected).abs() / expected < 0.02, "{cells:?}");
        }
    }

    #[test]
    fn crop_aspect_ratio_stays_in_bounds() {
        let p = AugmentationPolicy::desk(1);
        let mut rng = Rng::new(5);
        for _ in 0..10_000 {
            let b = sample_crop(64, 64, &p, &mut rng);
            let r = b.width as f64 / b.height as f64;
            assert!(r > 0.7 && r < 1.43, "{b:?}");
            assert!(b.top + b.height <= 64 && b.left + b.width <= 64);
        }
    }
}
