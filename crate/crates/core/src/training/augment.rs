use crate::error::{HseError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Resize to `resize`×`resize`, then crop `crop`×`crop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub resize: usize,
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { resize: 64, crop: 56 }
    }
}

impl AugmentConfig {
    /// 512×512 resize with 448×448 crops.
    pub fn full_scale() -> Self {
        AugmentConfig { resize: 512, crop: 448 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(HseError::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

fn dims(img: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(HseError::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Bilinear resize with half-pixel centers; same size is a copy.
pub fn resize(img: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img, "resize")?;
    if h == size && w == size {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = vec![0.0; c * size * size];
    let sample = |o: usize, n: usize| {
        let x = ((o as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 1);
        let j = (i + 1).min(n - 1);
        (i, j, x - i as f64)
    };
    for oy in 0..size {
        let (y0, y1, fy) = sample(oy, h);
        for ox in 0..size {
            let (x0, x1, fx) = sample(ox, w);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * size + oy) * size + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img, "crop")?;
    if top + size > h || left + size > w {
        return Err(HseError::InvalidArgument(format!(
            "crop {size}x{size} at ({top}, {left}) exceeds {h}x{w} image"
        )));
    }
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&img.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(img, "hflip")?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Training mode (an rng is given): random crop plus a fair-coin horizontal
/// flip. Evaluation mode: center crop.
pub fn augment_sample(img: &Tensor, cfg: &AugmentConfig, rng: Option<&mut SplitMix64>) -> Result<Tensor> {
    cfg.validate()?;
    let (_, h, w) = dims(img, "augment_sample")?;
    if h < cfg.crop || w < cfg.crop {
        return Err(HseError::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {}x{} crop",
            cfg.crop, cfg.crop
        )));
    }
    let resized = resize(img, cfg.resize)?;
    let slack = cfg.resize - cfg.crop;
    match rng {
        Some(rng) => {
            let top = rng.below(slack as u64 + 1) as usize;
            let left = rng.below(slack as u64 + 1) as usize;
            let out = crop(&resized, top, left, cfg.crop)?;
            if rng.coin() {
                hflip(&out)
            } else {
                Ok(out)
            }
        }
        None => crop(&resized, slack / 2, slack / 2, cfg.crop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn eval_mode_is_center_crop() {
        let img = ramp(3, 8, 8);
        let cfg = AugmentConfig { resize: 8, crop: 4 };
        let a = augment_sample(&img, &cfg, None).unwrap();
        assert_eq!(a, augment_sample(&img, &cfg, None).unwrap());
        assert_eq!(a, crop(&img, 2, 2, 4).unwrap());
        assert_eq!(a.at(&[0, 0, 0]), 18.0);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(2, 3, 5);
        assert_eq!(hflip(&hflip(&img).unwrap()).unwrap(), img);
        assert_eq!(hflip(&img).unwrap().at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn random_crops_stay_inside() {
        let img = ramp(3, 64, 64);
        let cfg = AugmentConfig::default();
        let mut rng = SplitMix64::new(4);
        let mut flips = 0;
        for _ in 0..50 {
            let out = augment_sample(&img, &cfg, Some(&mut rng)).unwrap();
            assert_eq!(out.shape(), &[3, 56, 56]);
            if out.at(&[0, 0, 0]) > out.at(&[0, 0, 1]) {
                flips += 1;
            }
        }
        assert!(flips > 10 && flips < 40);
    }

    #[test]
    fn resize_examples() {
        let flat = Tensor::full(&[3, 10, 7], 0.25);
        let r = resize(&flat, 16).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // Upsampling keeps the corner values.
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize(&img, 4).unwrap();
        assert_eq!(up.at(&[0, 0, 0]), 1.0);
        assert_eq!(up.at(&[0, 3, 3]), 4.0);
        assert_eq!(resize(&up, 4).unwrap(), up);
    }

    #[test]
    fn full_scale_geometry() {
        let p = AugmentConfig::full_scale();
        assert_eq!((p.resize, p.crop), (512, 448));
        assert_eq!(p.crop * 64, p.resize * 56);
    }

    #[test]
    fn too_small_is_an_error() {
        let img = ramp(3, 20, 20);
        assert!(augment_sample(&img, &AugmentConfig::default(), None).is_err());
        assert!(AugmentConfig { resize: 8, crop: 9 }.validate().is_err());
    }
}
