//! Residual-map heatmaps: per-map normalization, a hot colormap, and
//! nearest-neighbor upsampling from the patch grid to the query resolution.

use image::{Rgb, RgbImage};
use ndarray::Array2;

/// Map a normalized intensity to the hot colormap (black, red, yellow,
/// white). Brighter means a larger residual.
fn hot(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Render a value grid as a heatmap image. Values are normalized per map;
/// a constant map renders at mid intensity. Cells are replicated
/// (nearest-neighbor) so the output is `resolution x resolution`.
pub fn render_heatmap(values: &Array2<f64>, resolution: u32) -> RgbImage {
    let (h, w) = values.dim();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    RgbImage::from_fn(resolution, resolution, |x, y| {
        let i = (y as usize * h) / resolution as usize;
        let j = (x as usize * w) / resolution as usize;
        let i = i.min(h - 1);
        let j = j.min(w - 1);
        let t = if span < 1e-12 {
            0.5
        } else {
            (values[(i, j)] - min) / span
        };
        hot(t)
    })
}

/// Row-major argmax of a grid; oracle for the heatmap tests.
#[cfg(test)]
pub fn argmax_cell(values: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((i, j), v) in values.indexed_iter() {
        if *v > best_v {
            best_v = *v;
            best = (i, j);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn constant_map_is_uniform() {
        let img = render_heatmap(&arr2(&[[1.0, 1.0], [1.0, 1.0]]), 8);
        let first = img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| p == first));
    }

    #[test]
    fn brightest_block_sits_on_the_argmax_cell() {
        let values = arr2(&[[0.1, 0.9], [0.3, 0.2]]);
        let img = render_heatmap(&values, 8);
        let (ai, aj) = argmax_cell(&values);
        assert_eq!((ai, aj), (0, 1));
        // Center pixel of the argmax block.
        let block = 8 / 2;
        let px = img.get_pixel((aj * block + block / 2) as u32, (ai * block + block / 2) as u32);
        let brightness = |p: &Rgb<u8>| p.0.iter().map(|c| *c as u32).sum::<u32>();
        for (x, y, p) in img.enumerate_pixels() {
            let cell = ((y as usize * 2) / 8, (x as usize * 2) / 8);
            if cell != (ai, aj) {
                assert!(brightness(px) >= brightness(p));
            }
        }
    }

    #[test]
    fn upsampling_replicates_cells() {
        let values = arr2(&[[0.0, 1.0]]);
        let img = render_heatmap(&values, 4);
        // Left half dark, right half bright.
        assert_eq!(img.get_pixel(0, 0), img.get_pixel(1, 3));
        assert_eq!(img.get_pixel(2, 0), img.get_pixel(3, 3));
        assert_ne!(img.get_pixel(0, 0), img.get_pixel(3, 0));
    }
}
