/// Average filter of size `s` (zero padding, same output size) followed by
/// a pixelwise maximum with the input. Odd kernels are centered; even ones
/// put the extra row and column after the anchor pixel, so `s = 2` averages
/// the pixel with its right, lower and lower-right neighbours.
pub fn smooth_plane(plane: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    if s == 1 {
        return plane.to_vec();
    }
    let before = (s - 1) / 2;
    let norm = 1.0 / (s * s) as f64;
    // Zero-padded integral image: sums over any window in O(1).
    let (ph, pw) = (h + s, w + s);
    let mut integral = vec![0.0; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let mut row = 0.0;
        for x in 0..pw {
            let (sy, sx) = (y as isize - before as isize, x as isize - before as isize);
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                row += plane[sy as usize * w + sx as usize];
            }
            integral[(y + 1) * (pw + 1) + x + 1] = integral[y * (pw + 1) + x + 1] + row;
        }
    }
    let at = |y: usize, x: usize| integral[y * (pw + 1) + x];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let sum = at(y + s, x + s) - at(y, x + s) - at(y + s, x) + at(y, x);
            let avg = (sum * norm).clamp(0.0, 1.0);
            out.push(plane[y * w + x].max(avg));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(plane: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
        let before = (s - 1) as isize / 2;
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..s as isize {
                    for dx in 0..s as isize {
                        let (sy, sx) = (y as isize + dy - before, x as isize + dx - before);
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            acc += plane[sy as usize * w + sx as usize];
                        }
                    }
                }
                out[y * w + x] = plane[y * w + x].max(acc / (s * s) as f64);
            }
        }
        out
    }

    #[test]
    fn single_hot_pixel_with_two_by_two_kernel() {
        let mut img = vec![0.0; 16];
        img[4 + 1] = 1.0;
        let out = smooth_plane(&img, 4, 4, 2);
        assert_eq!(out[4 + 1], 1.0);
        assert_eq!(out[0], 0.25);
        assert_eq!(out[1], 0.25);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[4 + 2], 0.0);
    }

    #[test]
    fn matches_direct_window_sums() {
        let img: Vec<f64> = (0..7 * 9).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        for s in 1..=6 {
            let fast = smooth_plane(&img, 7, 9, s);
            let slow = naive(&img, 7, 9, s);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "s={s}");
            }
        }
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = vec![0.6; 25];
        for s in 1..=5 {
            assert!(smooth_plane(&img, 5, 5, s).iter().all(|&v| (v - 0.6).abs() < 1e-15));
        }
    }
}
