use rand::Rng;

use crate::tensor::Tensor;

/// Random rotation, translation and zoom about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    /// Shifts as fractions of width and height.
    pub tx: f64,
    pub ty: f64,
    pub zoom: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        angle_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        zoom: 1.0,
    };

    /// Angle in ±15°, shifts in ±10%, zoom in [0.9, 1.1].
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            angle_deg: rng.random_range(-15.0..=15.0),
            tx: rng.random_range(-0.1..=0.1),
            ty: rng.random_range(-0.1..=0.1),
            zoom: rng.random_range(0.9..=1.1),
        }
    }
}

/// Warps an `[h, w, c]` image with bilinear sampling; pixels that map outside
/// the source are zero.
pub fn apply_affine(image: &Tensor, p: &AffineParams) -> Tensor {
    let [h, w, c] = image.shape()[..] else {
        panic!("apply_affine expects [h, w, c], got {:?}", image.shape());
    };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let src = image.data();
    let pixel = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(y as usize * w + x as usize) * c + ch]
        }
    };
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy - p.ty * h as f64;
            let dx = x as f64 - cx - p.tx * w as f64;
            let sx = (cos * dx + sin * dy) / p.zoom + cx;
            let sy = (-sin * dx + cos * dy) / p.zoom + cy;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let top = pixel(y0, x0, ch) * (1.0 - fx) + pixel(y0, x0 + 1, ch) * fx;
                let bottom = pixel(y0 + 1, x0, ch) * (1.0 - fx) + pixel(y0 + 1, x0 + 1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([h, w, c], out).expect("same shape as input")
}

pub fn affine_augment(image: &Tensor, rng: &mut impl Rng) -> Tensor {
    apply_affine(image, &AffineParams::sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform([7, 9, 3], 0.0, 1.0, &mut rng);
        assert_eq!(apply_affine(&img, &AffineParams::IDENTITY), img);
    }

    #[test]
    fn keeps_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform([16, 12, 1], 0.0, 1.0, &mut rng);
        for _ in 0..10 {
            let out = affine_augment(&img, &mut rng);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn half_turn_of_symmetric_pattern() {
        let (h, w) = (6, 8);
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                ((y * (h - 1 - y) + x * (w - 1 - x)) % 5) as f64
            })
            .collect();
        let img = Tensor::new([h, w, 1], data).unwrap();
        let turned = apply_affine(
            &img,
            &AffineParams {
                angle_deg: 180.0,
                ..AffineParams::IDENTITY
            },
        );
        for (a, b) in turned.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn whole_pixel_shift() {
        let img = Tensor::new([1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let shifted = apply_affine(
            &img,
            &AffineParams {
                tx: 0.25,
                ..AffineParams::IDENTITY
            },
        );
        assert_eq!(shifted.data(), &[0.0, 1.0, 2.0, 3.0]);
    }
}
