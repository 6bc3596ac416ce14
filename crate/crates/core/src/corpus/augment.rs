use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Pixels added to each side before the random crop.
pub const RESIZE_MARGIN: usize = 4;
pub const FLIP_PROB: f64 = 0.5;
pub const BRIGHTNESS: (f32, f32) = (0.8, 1.2);
pub const MAX_ROTATION_DEG: f32 = 10.0;

/// Random decisions for one augmentation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub crop: (usize, usize),
    pub flip: bool,
    pub brightness: f32,
    pub rotation_deg: f32,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { crop: (RESIZE_MARGIN / 2, RESIZE_MARGIN / 2), flip: false, brightness: 1.0, rotation_deg: 0.0 }
    }

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            crop: (rng.random_range(0..=RESIZE_MARGIN), rng.random_range(0..=RESIZE_MARGIN)),
            flip: rng.random::<f64>() < FLIP_PROB,
            brightness: rng.random_range(BRIGHTNESS.0..=BRIGHTNESS.1),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

fn dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 1] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::Invalid(format!("augment expects an HxWx1 image, got {s:?}"))),
    }
}

/// Bilinear resize of a single-channel plane (align-corners sampling).
pub fn resize(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let mut out = vec![0.0; nh * nw];
    let sy = if nh > 1 { (h - 1) as f32 / (nh - 1) as f32 } else { 0.0 };
    let sx = if nw > 1 { (w - 1) as f32 / (nw - 1) as f32 } else { 0.0 };
    for i in 0..nh {
        let y = i as f32 * sy;
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..nw {
            let x = j as f32 * sx;
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[i * nw + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

pub fn hflip(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = dims(image)?;
    let src = image.data();
    let data = (0..h * w).map(|p| src[(p / w) * w + (w - 1 - p % w)]).collect();
    Ok(Tensor::new(vec![h, w, 1], data)?)
}

/// Nearest-neighbour rotation about the image centre; pixels sampled from
/// outside the frame become 0.
pub fn rotate(src: &[f32], h: usize, w: usize, deg: f32) -> Vec<f32> {
    let (s, c) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f32 - cy, j as f32 - cx);
            let sy = (c * dy + s * dx + cy).round();
            let sx = (-s * dy + c * dx + cx).round();
            if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                out[i * w + j] = src[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Applies resize -> crop -> flip -> brightness -> rotation with explicit parameters.
pub fn augment_with(image: &Tensor<f32>, p: &AugmentParams) -> Result<Tensor<f32>> {
    let (h, w) = dims(image)?;
    let (bh, bw) = (h + RESIZE_MARGIN, w + RESIZE_MARGIN);
    let big = resize(image.data(), h, w, bh, bw);
    let (oy, ox) = (p.crop.0.min(RESIZE_MARGIN), p.crop.1.min(RESIZE_MARGIN));
    let mut img: Vec<f32> = (0..h * w).map(|q| big[(oy + q / w) * bw + ox + q % w]).collect();
    if p.flip {
        img = (0..h * w).map(|q| img[(q / w) * w + (w - 1 - q % w)]).collect();
    }
    img.iter_mut().for_each(|v| *v = (*v * p.brightness).clamp(0.0, 1.0));
    if p.rotation_deg != 0.0 {
        img = rotate(&img, h, w, p.rotation_deg);
    }
    Ok(Tensor::new(vec![h, w, 1], img)?)
}

/// Training-time augmentation, deterministic in `seed`.
pub fn augment(image: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    augment_with(image, &AugmentParams::sample(seed))
}
