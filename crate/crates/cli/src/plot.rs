//! Static SVG scatter plots.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use otflow_core::PointCloud;

use crate::error::CliError;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 24.0;
const START: [f64; 3] = [33.0, 102.0, 172.0];
const END: [f64; 3] = [214.0, 39.0, 40.0];

/// Projects every cloud on the two leading principal axes of their union.
/// Axis signs are fixed so the largest loading is positive.
pub fn pca_2d(clouds: &[PointCloud]) -> Result<Vec<Vec<[f64; 2]>>, CliError> {
    let d = clouds[0].dim();
    if clouds.iter().any(|c| c.dim() != d) {
        return Err(CliError::invalid("all clouds must share one dimension"));
    }
    let n: usize = clouds.iter().map(|c| c.len()).sum();
    let mut mean = vec![0.0; d];
    for c in clouds {
        for i in 0..c.len() {
            for (m, v) in mean.iter_mut().zip(c.point(i)) {
                *m += v / n as f64;
            }
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for c in clouds {
        for i in 0..c.len() {
            let p = c.point(i);
            for a in 0..d {
                for b in 0..=a {
                    cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]) / n as f64;
                }
            }
        }
    }
    cov.fill_upper_triangle_with_lower_triangle();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let s = if lead < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| s * x).collect()
        })
        .collect();
    Ok(clouds
        .iter()
        .map(|c| {
            (0..c.len())
                .map(|i| {
                    let p = c.point(i);
                    let proj = |axis: &[f64]| p.iter().zip(&mean).zip(axis).map(|((x, m), a)| (x - m) * a).sum();
                    [proj(&axes[0]), proj(&axes[1])]
                })
                .collect()
        })
        .collect())
}

fn color(layer: usize, layers: usize) -> String {
    let t = if layers > 1 {
        layer as f64 / (layers - 1) as f64
    } else {
        0.0
    };
    let c: Vec<u8> = (0..3)
        .map(|k| (START[k] + t * (END[k] - START[k])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Scatter plot of 2-D clouds, one layer per cloud, colors running from
/// blue (first) to red (last).
pub fn render_svg(layers: &[Vec<[f64; 2]>]) -> Result<String, CliError> {
    if layers.is_empty() || layers.iter().any(|l| l.is_empty()) {
        return Err(CliError::invalid("cannot plot an empty cloud"));
    }
    let all = layers.iter().flatten();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, layer) in layers.iter().enumerate() {
        let _ = writeln!(out, r#"<g class="layer" fill="{}" fill-opacity="0.7">"#, color(i, layers.len()));
        for p in layer {
            let x = MARGIN + (p[0] - lo[0]) * scale;
            let y = SIZE - MARGIN - (p[1] - lo[1]) * scale;
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.8"/>"#);
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Plots clouds as they are (d = 2) or after PCA.
pub fn plot_clouds(clouds: &[PointCloud], pca: bool) -> Result<String, CliError> {
    if clouds.is_empty() {
        return Err(CliError::invalid("no clouds to plot"));
    }
    let layers = if pca {
        pca_2d(clouds)?
    } else {
        if let Some(c) = clouds.iter().find(|c| c.dim() != 2) {
            return Err(CliError::invalid(format!(
                "cannot plot d={} directly; pass --pca to project on two principal axes",
                c.dim()
            )));
        }
        clouds
            .iter()
            .map(|c| (0..c.len()).map(|i| [c.point(i)[0], c.point(i)[1]]).collect())
            .collect()
    };
    render_svg(&layers)
}

#[cfg(test)]
mod tests {
    use otflow_core::Tensor;

    use super::*;

    fn cloud(rows: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_rows(rows).unwrap()
    }

    #[test]
    fn one_marker_per_point() {
        let c = PointCloud::from_rows(&[[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]]).unwrap();
        let svg = plot_clouds(&[c.clone()], false).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg, plot_clouds(&[c], false).unwrap());
    }

    #[test]
    fn layers_shade_from_first_to_last() {
        let c = PointCloud::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let svg = plot_clouds(&vec![c; 5], false).unwrap();
        assert_eq!(svg.matches(r#"class="layer""#).count(), 5);
        assert!(svg.contains(&color(0, 5)) && svg.contains(&color(4, 5)));
        assert_eq!(color(0, 5), "#2166ac");
        assert_eq!(color(4, 5), "#d62728");
    }

    #[test]
    fn high_dimension_needs_pca() {
        let c = cloud(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!(plot_clouds(&[c.clone()], false).is_err());
        assert!(plot_clouds(&[c], true).is_ok());
    }

    #[test]
    fn pca_keeps_dominant_directions() {
        // Spread along (1, 1, 0) dominates spread along z.
        let rows: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let t = (i / 2) as f64 - 4.5;
                [t, t, if i % 2 == 0 { 0.1 } else { -0.1 }]
            })
            .collect();
        let proj = pca_2d(&[cloud(&rows)]).unwrap();
        for (p, r) in proj[0].iter().zip(&rows) {
            assert!((p[0] - r[0] * 2f64.sqrt()).abs() <= 1e-9);
        }
        let x = PointCloud::new(Tensor::zeros(2, 3)).unwrap();
        assert!(pca_2d(&[x, cloud(&rows)]).is_ok());
    }

    #[test]
    fn empty_layer_is_rejected() {
        assert!(render_svg(&[vec![]]).is_err());
    }
}
