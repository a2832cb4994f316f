//! Item characteristic curve rendering: a small self-contained SVG writer
//! plus a CSV table fallback, both sampling theta on [-4, 4].

use crate::error::Error;
use crate::models::ItemParams;
use crate::Result;
use std::fmt::Write;

pub const THETA_MIN: f64 = -4.0;
pub const THETA_MAX: f64 = 4.0;
pub const DEFAULT_GRID_POINTS: usize = 81;

const PALETTE: [&str; 6] = ["#1f497d", "#c0504d", "#4f8a4f", "#8064a2", "#c07830", "#4bacc6"];

/// Evenly spaced theta grid; an odd count lands exactly on 0.
pub fn theta_grid(n_points: usize) -> Result<Vec<f64>> {
    if n_points < 2 {
        return Err(Error::Contract(format!("need at least 2 grid points, got {n_points}")));
    }
    let span = THETA_MAX - THETA_MIN;
    Ok((0..n_points)
        .map(|k| THETA_MIN + span * k as f64 / (n_points - 1) as f64)
        .collect())
}

/// (item index, theta, probability) rows in grid-major order per item.
pub fn icc_table(
    items: &ItemParams,
    indices: &[usize],
    n_points: usize,
) -> Result<Vec<(usize, f64, f64)>> {
    let grid = theta_grid(n_points)?;
    let mut rows = Vec::with_capacity(indices.len() * n_points);
    for &i in indices {
        if i >= items.len() {
            return Err(Error::Contract(format!(
                "item index {i} out of range for {} items",
                items.len()
            )));
        }
        let curve = items.curve(i);
        for &theta in &grid {
            rows.push((i, theta, curve.prob(theta)));
        }
    }
    Ok(rows)
}

/// CSV with header `item,theta,probability`, one block of rows per item.
pub fn render_csv(
    items: &ItemParams,
    indices: &[usize],
    ids: &[String],
    n_points: usize,
) -> Result<String> {
    let mut out = String::from("item,theta,probability\n");
    for (i, theta, p) in icc_table(items, indices, n_points)? {
        let _ = writeln!(out, "{},{},{}", ids[i], theta, p);
    }
    Ok(out)
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Self-contained SVG: axes, ticks, one polyline per requested item, legend.
pub fn render_svg(
    items: &ItemParams,
    indices: &[usize],
    ids: &[String],
    n_points: usize,
) -> Result<String> {
    let table = icc_table(items, indices, n_points)?;
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (56.0, 20.0, 16.0, 44.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_of = |theta: f64| left + (theta - THETA_MIN) / (THETA_MAX - THETA_MIN) * plot_w;
    let y_of = |p: f64| top + (1.0 - p) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(svg, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");

    // frame and gridlines at p = 0, 0.25, ..., 1
    for k in 0..=4 {
        let p = k as f64 / 4.0;
        let y = y_of(p);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>",
            fmt2(left),
            fmt2(y),
            fmt2(left + plot_w),
            fmt2(y)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            fmt2(left - 6.0),
            fmt2(y + 4.0),
            p
        );
    }
    for theta in [-4.0, -2.0, 0.0, 2.0, 4.0] {
        let x = x_of(theta);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>",
            fmt2(x),
            fmt2(top),
            fmt2(x),
            fmt2(top + plot_h)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{theta}</text>",
            fmt2(x),
            fmt2(top + plot_h + 16.0)
        );
    }
    let _ = writeln!(
        svg,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#555\"/>",
        fmt2(left),
        fmt2(top),
        fmt2(plot_w),
        fmt2(plot_h)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">ability</text>",
        fmt2(left + plot_w / 2.0),
        fmt2(height - 8.0)
    );

    for (slot, &i) in indices.iter().enumerate() {
        let color = PALETTE[slot % PALETTE.len()];
        let points: Vec<String> = table
            .iter()
            .filter(|(idx, _, _)| *idx == i)
            .map(|(_, theta, p)| format!("{},{}", fmt2(x_of(*theta)), fmt2(y_of(*p))))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>",
            points.join(" ")
        );
        let legend_y = top + 16.0 + 16.0 * slot as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            fmt2(left + 10.0),
            fmt2(legend_y - 4.0),
            fmt2(left + 34.0),
            fmt2(legend_y - 4.0)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            fmt2(left + 40.0),
            fmt2(legend_y),
            ids[i]
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("q{i}")).collect()
    }

    #[test]
    fn grid_is_symmetric_and_hits_zero() {
        let grid = theta_grid(DEFAULT_GRID_POINTS).unwrap();
        assert_eq!(grid.len(), 81);
        assert_eq!(grid[0], -4.0);
        assert_eq!(grid[80], 4.0);
        assert_eq!(grid[40], 0.0);
        assert!(theta_grid(1).is_err());
    }

    #[test]
    fn unit_difficulty_curve_passes_through_its_midpoint() {
        let items = ItemParams::one_param(vec![0.0, 2.5, -2.5]).unwrap();
        let table = icc_table(&items, &[0, 1, 2], 81).unwrap();
        // p = 0.5 exactly where theta equals the difficulty
        for (want_theta, i) in [(0.0, 0usize), (2.5, 1), (-2.5, 2)] {
            let hit = table
                .iter()
                .find(|(idx, theta, _)| *idx == i && (*theta - want_theta).abs() < 1e-12)
                .unwrap();
            assert_relative_eq!(hit.2, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_has_one_block_of_rows_per_item() {
        let items = ItemParams::one_param(vec![0.0, 1.0]).unwrap();
        let csv = render_csv(&items, &[0, 1], &ids(2), 81).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "item,theta,probability");
        assert_eq!(lines.len(), 1 + 2 * 81);
        assert_eq!(lines[1].split(',').next(), Some("q0"));
        assert_eq!(lines[1 + 81].split(',').next(), Some("q1"));
    }

    #[test]
    fn svg_draws_one_polyline_per_item() {
        let items =
            ItemParams::three_param(vec![0.0, 1.0], vec![1.0, 2.0], vec![0.2, 0.0]).unwrap();
        let svg = render_svg(&items, &[0, 1], &ids(2), 41).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("q0") && svg.contains("q1"));
    }

    #[test]
    fn out_of_range_item_is_rejected() {
        let items = ItemParams::one_param(vec![0.0]).unwrap();
        assert!(icc_table(&items, &[1], 11).is_err());
    }
}
