//! Two-dimensional scatter plots of exported embeddings. The projection is
//! plain PCA; any other projection can be applied to the exported CSV
//! outside this crate.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::data::read_embeddings;
use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];
const UNLABELED_COLOR: [u8; 3] = [40, 40, 40];

/// Projection onto the top two principal axes (centered).
pub fn pca_2d(z: &Array2<f64>) -> Array2<f64> {
    let (n, d) = z.dim();
    let mut out = Array2::zeros((n, 2));
    if n == 0 || d == 0 {
        return out;
    }
    let mean = z.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = z - &mean;
    let m = DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
    let cov = m.transpose() * &m / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (k, &axis) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(axis);
        // fix the sign so the largest loading is positive
        let (imax, _) = v.iter().enumerate().fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[[i, k]] = sign * (0..d).map(|j| centered[[i, j]] * v[j]).sum::<f64>();
        }
    }
    out
}

/// Scatter of `points` (n × 2) colored by label.
pub fn render_scatter(points: &Array2<f64>, labels: &[i64], size: u32) -> Result<RgbImage> {
    if points.ncols() != 2 || points.nrows() != labels.len() {
        return Err(Error::shape("render_scatter", format!("{} × 2", labels.len()), format!("{:?}", points.dim())));
    }
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    if points.nrows() == 0 {
        return Ok(img);
    }
    let bounds = |c: usize| {
        let col = points.column(c);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs) = bounds(0);
    let (y0, ys) = bounds(1);
    let margin = 10.0;
    let span = size as f64 - 2.0 * margin - 1.0;
    for (p, &label) in points.rows().into_iter().zip(labels) {
        let px = margin + (p[0] - x0) / xs * span;
        let py = margin + (1.0 - (p[1] - y0) / ys) * span;
        let color = if label < 0 {
            UNLABELED_COLOR
        } else {
            PALETTE[label as usize % PALETTE.len()]
        };
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let x = px.round() as i64 + dx;
                let y = py.round() as i64 + dy;
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
    Ok(img)
}

/// Reads an embeddings CSV and writes a PNG scatter of its PCA projection.
pub fn plot_embeddings(csv: &Path, png: &Path, size: u32) -> Result<()> {
    let e = read_embeddings(csv)?;
    let img = render_scatter(&pca_2d(&e.z), &e.labels, size)?;
    img.save(png).map_err(|err| Error::Format {
        path: png.to_path_buf(),
        msg: err.to_string(),
    })
}
