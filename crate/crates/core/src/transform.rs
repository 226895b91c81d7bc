//! Spatial resampling: bilinear resize, the center-scaling affine used by the
//! occurrence-map equivariance loss (in both image space and as an exact
//! linear operator on the feature grid), and rotation/scale augmentation.

use ndarray::Array2;

/// Bilinear sample at pixel-center coordinates (row, col); coordinates
/// outside the image interpolate against zero padding.
fn sample_bilinear(img: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (h, w) = (img.shape()[0] as isize, img.shape()[1] as isize);
    let r0 = r.floor() as isize;
    let c0 = c.floor() as isize;
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let mut acc = 0.0;
    for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
            let rr = r0 + dr;
            let cc = c0 + dc;
            if rr >= 0 && rr < h && cc >= 0 && cc < w {
                acc += wr * wc * img[[rr as usize, cc as usize]];
            }
        }
    }
    acc
}

/// Resize to (out_h, out_w) with bilinear interpolation.
pub fn resize_bilinear(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sr = h as f64 / out_h as f64;
    let sc = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let r = ((i as f64 + 0.5) * sr - 0.5).clamp(0.0, h as f64 - 1.0);
        let c = ((j as f64 + 0.5) * sc - 0.5).clamp(0.0, w as f64 - 1.0);
        sample_bilinear(img, r, c)
    })
}

/// Scale an image about its center by `ratio` (< 1 shrinks the content, the
/// border is zero-padded), bilinear sampling.
pub fn scale_about_center(img: &Array2<f64>, ratio: f64) -> Array2<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let r = (i as f64 + 0.5 - cy) / ratio + cy - 0.5;
        let c = (j as f64 + 0.5 - cx) / ratio + cx - 0.5;
        if r < -0.5 || r > h as f64 - 0.5 || c < -0.5 || c > w as f64 - 0.5 {
            0.0
        } else {
            sample_bilinear(img, r, c)
        }
    })
}

/// Rotate by `angle_deg` and scale by `scale` about the center, bilinear
/// sampling with zero padding. Used for training-time augmentation.
pub fn rotate_scale(img: &Array2<f64>, angle_deg: f64, scale: f64) -> Array2<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let a = angle_deg.to_radians();
    let (sin, cos) = a.sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        // inverse transform: rotate by -a, scale by 1/scale
        let r = (cos * dy - sin * dx) / scale + cy;
        let c = (sin * dy + cos * dx) / scale + cx;
        if r < -0.5 || r > h as f64 - 0.5 || c < -0.5 || c > w as f64 - 0.5 {
            0.0
        } else {
            sample_bilinear(img, r, c)
        }
    })
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Exact linear operator on an h x w grid for scaling about the center by
/// `ratio` with zero padding: each output cell averages the input cells its
/// pre-image overlaps, weighted by overlap area. Returns an [h*w, h*w]
/// matrix acting on row-major flattened grids.
pub fn grid_scale_matrix(h: usize, w: usize, ratio: f64) -> Array2<f64> {
    let wy = axis_scale_weights(h, ratio);
    let wx = axis_scale_weights(w, ratio);
    let hw = h * w;
    let mut mat = Array2::<f64>::zeros((hw, hw));
    for oi in 0..h {
        for oj in 0..w {
            for ii in 0..h {
                if wy[[oi, ii]] == 0.0 {
                    continue;
                }
                for ij in 0..w {
                    mat[[oi * w + oj, ii * w + ij]] = wy[[oi, ii]] * wx[[oj, ij]];
                }
            }
        }
    }
    mat
}

/// 1-D weights for the area-exact center scaling: out[o] = sum_i w[o,i]*in[i].
fn axis_scale_weights(n: usize, ratio: f64) -> Array2<f64> {
    let c = n as f64 / 2.0;
    let mut wts = Array2::<f64>::zeros((n, n));
    for o in 0..n {
        // pre-image of output cell [o, o+1)
        let p0 = (o as f64 - c) / ratio + c;
        let p1 = (o as f64 + 1.0 - c) / ratio + c;
        for i in 0..n {
            wts[[o, i]] = ratio * overlap(p0, p1, i as f64, i as f64 + 1.0);
        }
    }
    wts
}

/// Block-average an image down to (gh, gw); image dims must be divisible.
pub fn block_downsample(img: &Array2<f64>, gh: usize, gw: usize) -> Array2<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    assert!(h % gh == 0 && w % gw == 0, "block_downsample: non-integer block");
    let (bh, bw) = (h / gh, w / gw);
    Array2::from_shape_fn((gh, gw), |(i, j)| {
        let mut s = 0.0;
        for r in 0..bh {
            for c in 0..bw {
                s += img[[i * bh + r, j * bw + c]];
            }
        }
        s / (bh * bw) as f64
    })
}
