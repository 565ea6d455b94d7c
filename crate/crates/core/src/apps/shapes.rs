//! Built-in oriented 2D point clouds: circle, line, triangle, diamond.
//! Samples are uniform in arc length at cell midpoints; normals at polygon
//! vertices (when a sample lands on one) take the angle-bisector direction.

use crate::sparse::OrientedPoint;
use crate::{Error, Result};

/// Signed distance to a circle centred at the origin.
pub fn circle_sdf(radius: f64, p: &[f64]) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).sqrt() - radius
}

/// `n` points on a circle of the given radius, outward normals.
pub fn circle_cloud(n: usize, radius: f64) -> Vec<OrientedPoint> {
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * (i as f64 + 0.5) / n as f64;
            OrientedPoint {
                pos: vec![radius * t.cos(), radius * t.sin()],
                normal: vec![t.cos(), t.sin()],
            }
        })
        .collect()
}

/// `n` points on the horizontal segment `[-half, half] x {0}` with +y
/// normals.
pub fn line_cloud(n: usize, half: f64) -> Vec<OrientedPoint> {
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            OrientedPoint {
                pos: vec![-half + 2.0 * half * t, 0.0],
                normal: vec![0.0, 1.0],
            }
        })
        .collect()
}

/// Uniform arc-length samples over a closed polygon with outward edge
/// normals; vertex hits use the angle bisector of the adjacent normals.
fn polygon_cloud(vertices: &[[f64; 2]], n: usize) -> Vec<OrientedPoint> {
    let k = vertices.len();
    let mut edge_len = Vec::with_capacity(k);
    let mut edge_normal = Vec::with_capacity(k);
    for i in 0..k {
        let a = vertices[i];
        let b = vertices[(i + 1) % k];
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let len = (ex * ex + ey * ey).sqrt();
        edge_len.push(len);
        // Outward for counter-clockwise winding.
        edge_normal.push([ey / len, -ex / len]);
    }
    let perimeter: f64 = edge_len.iter().sum();
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut dist = perimeter * (s as f64 + 0.5) / n as f64;
        let mut edge = 0;
        while dist > edge_len[edge] {
            dist -= edge_len[edge];
            edge += 1;
        }
        let a = vertices[edge];
        let b = vertices[(edge + 1) % k];
        let t = dist / edge_len[edge];
        let pos = vec![a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
        let vertex_eps = 1e-9 * perimeter;
        let normal = if dist < vertex_eps {
            bisector(edge_normal[(edge + k - 1) % k], edge_normal[edge])
        } else if edge_len[edge] - dist < vertex_eps {
            bisector(edge_normal[edge], edge_normal[(edge + 1) % k])
        } else {
            edge_normal[edge].to_vec()
        };
        out.push(OrientedPoint { pos, normal });
    }
    out
}

fn bisector(a: [f64; 2], b: [f64; 2]) -> Vec<f64> {
    let (x, y) = (a[0] + b[0], a[1] + b[1]);
    let len = (x * x + y * y).sqrt().max(1e-12);
    vec![x / len, y / len]
}

/// Equilateral-ish triangle inscribed in the given radius, CCW.
pub fn triangle_cloud(n: usize, radius: f64) -> Vec<OrientedPoint> {
    let vertices: Vec<[f64; 2]> = (0..3)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / 3.0 + std::f64::consts::FRAC_PI_2;
            [radius * t.cos(), radius * t.sin()]
        })
        .collect();
    polygon_cloud(&vertices, n)
}

/// Axis-aligned diamond `|x| + |y| = radius`, CCW.
pub fn diamond_cloud(n: usize, radius: f64) -> Vec<OrientedPoint> {
    let vertices = [
        [radius, 0.0],
        [0.0, radius],
        [-radius, 0.0],
        [0.0, -radius],
    ];
    polygon_cloud(&vertices, n)
}

/// Builds a named built-in cloud.
pub fn shape_cloud(name: &str, n: usize, radius: f64) -> Result<Vec<OrientedPoint>> {
    Ok(match name {
        "circle" => circle_cloud(n, radius),
        "line" => line_cloud(n, radius),
        "triangle" => triangle_cloud(n, radius),
        "diamond" => diamond_cloud(n, radius),
        other => {
            return Err(Error::BadConfig(format!(
                "unknown built-in shape {other:?} (circle, line, triangle, diamond)"
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_normals_are_radial_unit() {
        for p in circle_cloud(16, 0.8) {
            let r = (p.pos[0] * p.pos[0] + p.pos[1] * p.pos[1]).sqrt();
            assert!((r - 0.8).abs() < 1e-12);
            let dot = p.pos[0] * p.normal[0] + p.pos[1] * p.normal[1];
            assert!((dot - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn diamond_normals_point_outward() {
        for p in diamond_cloud(32, 1.0) {
            assert!((p.pos[0].abs() + p.pos[1].abs() - 1.0).abs() < 1e-12);
            let dot = p.pos[0] * p.normal[0] + p.pos[1] * p.normal[1];
            assert!(dot > 0.0, "inward normal at {:?}", p.pos);
            let norm = (p.normal[0] * p.normal[0] + p.normal[1] * p.normal[1]).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn triangle_points_on_perimeter() {
        let cloud = triangle_cloud(30, 1.0);
        assert_eq!(cloud.len(), 30);
        for p in &cloud {
            let norm = (p.normal[0] * p.normal[0] + p.normal[1] * p.normal[1]).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_shape_rejected() {
        assert!(shape_cloud("hexagon", 8, 1.0).is_err());
    }
}
