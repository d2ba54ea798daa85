//! Canny edge detection on a single image plane.

/// Binary edge map: Gaussian blur, Sobel gradients, non-maximum suppression
/// and 8-connected hysteresis. Thresholds apply to the gradient magnitude
/// divided by its maximum over the image; a flat image has no edges.
pub fn canny_plane(plane: &[f64], h: usize, w: usize, sigma: f64, t_low: f64, t_high: f64) -> Vec<f64> {
    let blurred = gaussian_blur(plane, h, w, sigma);
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        blurred[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[i] = gx[i].hypot(gy[i]);
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max < 1e-12 {
        return vec![0.0; h * w];
    }
    for m in &mut mag {
        *m /= max;
    }

    // Non-maximum suppression along the gradient direction quantized to
    // 0°, 45°, 90° or 135°. Ties keep the pixel on the positive side.
    let m_at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let before = m_at(y - dy, x - dx);
            let after = m_at(y + dy, x + dx);
            if m >= before && m > after {
                thin[i] = m;
            }
        }
    }

    // Hysteresis: grow strong pixels through weak 8-neighbours.
    let mut out = vec![0.0; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= t_high).collect();
    for &i in &stack {
        out[i] = 1.0;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= t_low && thin[j] > 0.0 {
                    out[j] = 1.0;
                    stack.push(j);
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with radius ⌈3σ⌉ and replicated borders.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| {
                    let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    kv * plane[y * w + sx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| {
                    let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    kv * tmp[sy * w + x]
                })
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_image_has_no_edges() {
        assert!(canny_plane(&[0.4; 64], 8, 8, 1.0, 0.1, 0.2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_binary() {
        let img: Vec<f64> = (0..100).map(|i| ((i * 31) % 17) as f64 / 16.0).collect();
        let out = canny_plane(&img, 10, 10, 1.0, 0.1, 0.2);
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn blur_preserves_constants() {
        let out = gaussian_blur(&[0.3; 30], 5, 6, 1.0);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-14));
    }
}
