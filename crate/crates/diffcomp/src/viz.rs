//! Self-attention map visualization: row/column means and top PCA
//! components, each reshaped to the spatial grid.
//!
//! PCA treats the map's rows as samples: columns are centered, the
//! covariance is `X^T X / (s - 1)`, and the top eigenvectors come from
//! deterministic power iteration with deflation (the covariance is
//! symmetric PSD, so no shifting is needed).

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::image_io::save_heatmap;

/// Visualization bundle for one self-attention map.
#[derive(Debug, Clone)]
pub struct SaVisualization {
    pub row_mean: Array2<f64>,
    pub col_mean: Array2<f64>,
    /// Top-3 PCA component images, min-max normalized.
    pub pca: Vec<Array2<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue / covariance-trace ratios.
    pub explained: Vec<f64>,
}

fn reshape(v: &Array1<f64>, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(y, x)| v[y * w + x])
}

fn min_max_normalize(m: &Array2<f64>) -> Array2<f64> {
    let min = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span < 1e-15 {
        Array2::from_elem(m.dim(), 0.5)
    } else {
        m.mapv(|v| (v - min) / span)
    }
}

/// Deterministic power iteration for the dominant eigenpair of a symmetric
/// PSD matrix. Returns `(eigenvalue, eigenvector)`; a zero matrix yields
/// eigenvalue 0 and the start vector.
fn dominant_eigenpair(c: &Array2<f64>) -> (f64, Array1<f64>) {
    let s = c.nrows();
    // Generic start direction with nonzero overlap against any fixed
    // eigenspace (an all-ones start can sit exactly in a null space).
    let mut v = Array1::from_shape_fn(s, |i| (0.7 * (i as f64 + 1.0)).sin() + 1.1);
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);
    for _ in 0..500 {
        let w = c.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm < 1e-250 {
            return (0.0, v);
        }
        let next = w.mapv(|x| x / norm);
        let delta = (&next - &v).iter().map(|d| d.abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    let lambda = v.dot(&c.dot(&v));
    (lambda, v)
}

/// Builds the visualization for an `(s, s)` map. `grid` gives the spatial
/// shape `(h, w)` with `h * w = s`; when omitted, `s` must be a perfect
/// square.
pub fn sa_visualize(map: &Array2<f64>, grid: Option<(usize, usize)>) -> Result<SaVisualization> {
    let (s, s2) = map.dim();
    if s != s2 {
        return Err(Error::input(format!("self-attention map must be square, got {s}x{s2}")));
    }
    let (h, w) = match grid {
        Some((h, w)) => {
            if h * w != s {
                return Err(Error::input(format!("grid {h}x{w} does not factor {s} patches")));
            }
            (h, w)
        }
        None => {
            let root = (s as f64).sqrt().round() as usize;
            if root * root != s {
                return Err(Error::input(format!(
                    "map size {s} is not square-factorable; pass an explicit grid"
                )));
            }
            (root, root)
        }
    };

    let row_mean = Array1::from_shape_fn(s, |i| map.row(i).sum() / s as f64);
    let col_mean = Array1::from_shape_fn(s, |j| map.column(j).sum() / s as f64);

    // Column-centered covariance of rows-as-samples.
    let mut centered = map.clone();
    for j in 0..s {
        let mean = col_mean[j];
        for i in 0..s {
            centered[[i, j]] -= mean;
        }
    }
    let denom = if s > 1 { (s - 1) as f64 } else { 1.0 };
    let mut cov = centered.t().dot(&centered) / denom;
    let trace: f64 = (0..s).map(|i| cov[[i, i]]).sum();

    let mut pca = Vec::with_capacity(3);
    let mut eigenvalues = Vec::with_capacity(3);
    let mut explained = Vec::with_capacity(3);
    for _ in 0..3 {
        let (lambda, v) = dominant_eigenpair(&cov);
        eigenvalues.push(lambda);
        explained.push(if trace > 0.0 { lambda / trace } else { 0.0 });
        pca.push(min_max_normalize(&reshape(&v, h, w)));
        // Deflate.
        for i in 0..s {
            for j in 0..s {
                cov[[i, j]] -= lambda * v[i] * v[j];
            }
        }
    }

    Ok(SaVisualization {
        row_mean: reshape(&row_mean, h, w),
        col_mean: reshape(&col_mean, h, w),
        pca,
        eigenvalues,
        explained,
    })
}

/// Writes the five standard PNGs (`row_mean`, `col_mean`, `pca1..3`) into a
/// directory, returning the file names.
pub fn write_visualization(
    viz: &SaVisualization,
    dir: &Path,
    stem: &str,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let targets = [
        (format!("{stem}_row_mean.png"), &viz.row_mean),
        (format!("{stem}_col_mean.png"), &viz.col_mean),
    ];
    for (name, arr) in targets {
        let path = dir.join(name);
        save_heatmap(arr, &path)?;
        written.push(path);
    }
    for (i, comp) in viz.pca.iter().enumerate() {
        let path = dir.join(format!("{stem}_pca{}.png", i + 1));
        save_heatmap(comp, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Minimal line-chart PNG: one polyline per series on a white canvas with
/// axis lines. Enough for eyeballing alignment curves.
pub fn plot_series(series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    use image::{Rgb, RgbImage};
    let (width, height) = (640u32, 480u32);
    let margin = 40i64;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let palette = [
        Rgb([200u8, 40u8, 40u8]),
        Rgb([40, 90, 200]),
        Rgb([30, 150, 60]),
        Rgb([150, 60, 160]),
    ];

    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::input("nothing to plot"));
    }
    let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if (max - min).abs() < 1e-300 { 1.0 } else { max - min };
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(2).max(2);

    let mut put = |x: i64, y: i64, color: Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < width && (y as u32) < height {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    // Axes.
    for x in margin..width as i64 - margin {
        put(x, height as i64 - margin, Rgb([0, 0, 0]));
    }
    for y in margin..height as i64 - margin {
        put(margin, y, Rgb([0, 0, 0]));
    }

    let plot_w = (width as i64 - 2 * margin) as f64;
    let plot_h = (height as i64 - 2 * margin) as f64;
    for (si, (_, values)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in values.iter().enumerate() {
            let x = margin + (i as f64 / (max_len - 1) as f64 * plot_w) as i64;
            let y = height as i64 - margin - (((v - min) / span) * plot_h) as i64;
            if let Some((px, py)) = prev {
                let steps = (x - px).abs().max((y - py).abs()).max(1);
                for t in 0..=steps {
                    let ix = px + (x - px) * t / steps;
                    let iy = py + (y - py) * t / steps;
                    put(ix, iy, color);
                }
            }
            prev = Some((x, y));
        }
    }
    img.save(path)
        .map_err(|e| Error::input(format!("cannot write plot {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_map_gives_constant_means() {
        let s = 16;
        let map = Array2::from_elem((s, s), 1.0 / s as f64);
        let viz = sa_visualize(&map, None).unwrap();
        let first = viz.row_mean[[0, 0]];
        assert!(viz.row_mean.iter().all(|&v| (v - first).abs() < 1e-15));
        assert!(viz.col_mean.iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn identity_map_visualization_is_well_defined() {
        let s = 16;
        let map = Array2::from_shape_fn((s, s), |(i, j)| f64::from(i == j));
        let viz = sa_visualize(&map, None).unwrap();
        for &v in viz.row_mean.iter() {
            assert!((v - 1.0 / s as f64).abs() < 1e-12);
        }
        assert_eq!(viz.pca.len(), 3);
        assert!(viz.eigenvalues.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn rank_one_map_has_single_dominant_component() {
        let s = 25;
        let u = Array1::from_shape_fn(s, |i| (i as f64 * 0.37).sin() + 1.5);
        let v = Array1::from_shape_fn(s, |i| (i as f64 * 0.61).cos() + 2.0);
        let map = Array2::from_shape_fn((s, s), |(i, j)| u[i] * v[j]);
        let viz = sa_visualize(&map, Some((5, 5))).unwrap();
        assert!(viz.explained[0] > 0.99, "explained {:?}", viz.explained);
    }

    #[test]
    fn non_square_factorable_requires_grid() {
        let map = Array2::<f64>::zeros((12, 12));
        assert!(sa_visualize(&map, None).is_err());
        assert!(sa_visualize(&map, Some((3, 4))).is_ok());
        assert!(sa_visualize(&map, Some((5, 2))).is_err());
    }

    #[test]
    fn writes_five_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let map = Array2::from_elem((16, 16), 1.0 / 16.0);
        let viz = sa_visualize(&map, None).unwrap();
        let files = write_visualization(&viz, dir.path(), "t").unwrap();
        assert_eq!(files.len(), 5);
        for f in files {
            assert!(f.exists());
        }
    }
}
