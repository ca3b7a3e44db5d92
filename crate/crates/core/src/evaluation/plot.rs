use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use super::MetricsReport;
use crate::backbone::NUM_CLASSES;
use crate::error::{Error, Result};

/// Marker color per class index.
pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    super::write_atomic(path, &bytes)
}

fn fill(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, color: [u8; 3]) {
    for y in y0.max(0)..(y0 + h).min(img.height() as i64) {
        for x in x0.max(0)..(x0 + w).min(img.width() as i64) {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
        fill(img, x, y, 1, 1, color);
    }
}

/// Orthographic view of 3-D points (azimuth 35°, elevation 25°), colored by class,
/// with the bounding-box axes and a color key along the top edge.
pub fn render_scatter_3d(coords: &Array2<f64>, labels: &[usize], size: u32, path: &Path) -> Result<()> {
    if coords.ncols() != 3 || coords.nrows() != labels.len() {
        return Err(Error::Shape(format!("scatter needs N×3 coordinates for {} labels", labels.len())));
    }
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let (az, el) = (35f64.to_radians(), 25f64.to_radians());
    let lo: Vec<f64> = (0..3).map(|d| coords.column(d).iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..3).map(|d| coords.column(d).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let norm = |p: [f64; 3]| -> [f64; 3] {
        let mut q = [0.0; 3];
        for d in 0..3 {
            let span = (hi[d] - lo[d]).max(1e-12);
            q[d] = 2.0 * (p[d] - lo[d]) / span - 1.0;
        }
        q
    };
    let project = |q: [f64; 3]| -> (f64, f64, f64) {
        let x = q[0] * az.cos() - q[1] * az.sin();
        let yr = q[0] * az.sin() + q[1] * az.cos();
        let y = q[2] * el.cos() - yr * el.sin();
        let depth = q[2] * el.sin() + yr * el.cos();
        let s = size as f64 * 0.28;
        (size as f64 / 2.0 + s * x, size as f64 / 2.0 - s * y, depth)
    };
    let grey = [170, 170, 170];
    let origin = project([-1.0, -1.0, -1.0]);
    for axis in 0..3 {
        let mut end = [-1.0; 3];
        end[axis] = 1.0;
        let e = project(end);
        line(&mut img, (origin.0, origin.1), (e.0, e.1), grey);
    }
    let mut points: Vec<(f64, f64, f64, usize)> = coords
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, &l)| {
            let (x, y, d) = project(norm([r[0], r[1], r[2]]));
            (x, y, d, l)
        })
        .collect();
    points.sort_by(|a, b| b.2.total_cmp(&a.2));
    for (x, y, _, l) in points {
        let color = CLASS_COLORS[l % NUM_CLASSES];
        fill(&mut img, x.round() as i64 - 2, y.round() as i64 - 2, 5, 5, color);
    }
    for (k, color) in CLASS_COLORS.iter().enumerate() {
        fill(&mut img, 8 + 18 * k as i64, 8, 12, 12, *color);
    }
    save(&img, path)
}

/// Row-normalized confusion matrix; darker cells hold a larger share of the true class.
pub fn render_confusion_heatmap(report: &MetricsReport, cell: u32, path: &Path) -> Result<()> {
    let n = NUM_CLASSES as u32;
    let mut img = RgbImage::from_pixel(n * cell + 2, n * cell + 2, Rgb([255, 255, 255]));
    for (t, row) in report.confusion_matrix.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (p, &count) in row.iter().enumerate() {
            let share = if total == 0 { 0.0 } else { count as f64 / total as f64 };
            let shade = (255.0 * (1.0 - share)).round() as u8;
            let (x, y) = (1 + p as i64 * cell as i64, 1 + t as i64 * cell as i64);
            fill(&mut img, x, y, cell as i64 - 1, cell as i64 - 1, [shade, shade, 255]);
        }
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::compute_metrics;

    #[test]
    fn heatmap_diagonal_is_dark() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<usize> = (0..6).collect();
        let report = compute_metrics(&labels, &labels).unwrap();
        let p = dir.path().join("cm.png");
        render_confusion_heatmap(&report, 10, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (62, 62));
        assert_eq!(img.get_pixel(5, 5).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(15, 5).0, [255, 255, 255]);
    }

    #[test]
    fn scatter_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = Array2::from_shape_fn((12, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let l: Vec<usize> = (0..12).map(|i| i % 6).collect();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_scatter_3d(&c, &l, 200, &a).unwrap();
        render_scatter_3d(&c, &l, 200, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        assert!(render_scatter_3d(&c, &l[..3], 200, &dir.path().join("c.png")).is_err());
    }
}
