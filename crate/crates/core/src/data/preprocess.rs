use fan_tensor::Tensor;

use super::IMAGE_SIDE;
use crate::error::{FanError, Result};

/// ITU-R BT.601 luma weights for R, G, B.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// `[3, h, w]` → `[1, h, w]` luminance, clamped to `[0, 1]`.
pub fn rgb_to_gray(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(FanError::Data(format!("expected [3,h,w] image, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = img.data();
    let gray = (0..plane)
        .map(|i| (LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i]).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::new(&[1, s[1], s[2]], gray)?)
}

/// Bilinear resize of every channel of a `[C, h, w]` image with
/// corner-aligned sampling (output corners land exactly on input corners).
/// Results are clamped to `[0, 1]`.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(FanError::Data(format!("cannot resize {s:?} to {out_h}x{out_w}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.map(|v| v.clamp(0.0, 1.0)));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = coord(y, out_h, h);
            for x in 0..out_w {
                let (x0, x1, fx) = coord(x, out_w, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(&[c, out_h, out_w], out)?)
}

/// Grayscale conversion (for RGB) followed by resizing to 28×28.
pub fn to_model_input(img: &Tensor) -> Result<Tensor> {
    let gray = match img.shape().first() {
        Some(3) => rgb_to_gray(img)?,
        Some(1) => img.clone(),
        _ => return Err(FanError::Data(format!("unsupported channel layout {:?}", img.shape()))),
    };
    resize_bilinear(&gray, IMAGE_SIDE, IMAGE_SIDE)
}
