//! Image quality metrics on `[h, w, 3]` or `[h, w]` images in `[0, 1]`.

use crate::tensor::{Real, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> f64 {
    assert_eq!(pred.shape(), gt.shape(), "metric shape mismatch");
    let n = pred.numel().max(1) as f64;
    pred.data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> f64 {
    let m = mse(pred, gt);
    if m == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Channel-mean grayscale as `(h, w, values)`.
pub fn grayscale<T: Real>(img: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let s = img.shape();
    match s.len() {
        2 => (s[0], s[1], img.to_f64_vec()),
        3 => {
            let c = s[2];
            let v = img
                .data()
                .chunks(c)
                .map(|px| px.iter().map(|x| x.as_f64()).sum::<f64>() / c as f64)
                .collect();
            (s[0], s[1], v)
        }
        _ => panic!("ssim needs [h, w] or [h, w, c], got {s:?}"),
    }
}

/// Normalized 1-D Gaussian of odd length `n`.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n / 2) as f64;
    let g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` image.
fn filter(h: usize, w: usize, x: &[f64], g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| g[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully covered 11x11 Gaussian
/// windows (sigma 1.5) of the grayscale images. Images smaller than the
/// window use the largest odd window that fits.
pub fn ssim<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> f64 {
    assert_eq!(pred.shape(), gt.shape(), "metric shape mismatch");
    let (h, w, x) = grayscale(pred);
    let (_, _, y) = grayscale(gt);
    let mut n = SSIM_WINDOW.min(h).min(w);
    if n % 2 == 0 {
        n -= 1;
    }
    assert!(n >= 1, "empty image");
    let g = gaussian_window(n, SSIM_SIGMA);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter(h, w, &x, &g);
    let my = filter(h, w, &y, &g);
    let exx = filter(h, w, &sq(&x, &x), &g);
    let eyy = filter(h, w, &sq(&y, &y), &g);
    let exy = filter(h, w, &sq(&x, &y), &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = exx[i] - a * a;
            let vy = eyy[i] - b * b;
            let cxy = exy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    total / mx.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn small_images_shrink_the_window() {
        let a = Tensor::<f64>::from_fn(&[6, 8], |i| (i % 5) as f64 / 5.0);
        assert_eq!(ssim(&a, &a), 1.0);
    }
}
