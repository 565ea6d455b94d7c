//! Marching squares: iso-contour extraction on a uniform 2D grid with the
//! standard 16-case table, linear interpolation along edges, and saddle
//! disambiguation by the cell-center average.

use crate::{Error, Result};

/// Sampled scalar values on a uniform 2D grid, `values[iy * nx + ix]`.
#[derive(Debug, Clone)]
pub struct GridValues2D {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub values: Vec<f64>,
}

impl GridValues2D {
    pub fn new(
        nx: usize,
        ny: usize,
        x0: f64,
        y0: f64,
        dx: f64,
        dy: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::BadConfig("marching grid needs >= 2x2 nodes".into()));
        }
        if values.len() != nx * ny {
            return Err(Error::DimensionMismatch(format!(
                "grid wants {} values, got {}",
                nx * ny,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::BadConfig("marching grid values must be finite".into()));
        }
        Ok(Self { nx, ny, x0, y0, dx, dy, values })
    }

    #[inline]
    fn v(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    #[inline]
    fn x(&self, ix: usize) -> f64 {
        self.x0 + self.dx * ix as f64
    }

    #[inline]
    fn y(&self, iy: usize) -> f64 {
        self.y0 + self.dy * iy as f64
    }
}

type Pt = [f64; 2];

/// Iso-contours of the grid at level `iso`, joined into polylines (closed
/// loops repeat their first point at the end). Cells are scanned in row
/// order, so output is deterministic for identical inputs.
pub fn marching_squares(grid: &GridValues2D, iso: f64) -> Vec<Vec<Pt>> {
    let mut segments: Vec<(Pt, Pt)> = Vec::new();

    // Edge interpolation with a canonical corner order keyed on the grid
    // indices, so shared edges of adjacent cells produce bit-identical
    // crossing points.
    let interp = |ax: usize, ay: usize, bx: usize, by: usize| -> Pt {
        let ((ax, ay), (bx, by)) = if (ay, ax) <= (by, bx) {
            ((ax, ay), (bx, by))
        } else {
            ((bx, by), (ax, ay))
        };
        let va = grid.v(ax, ay);
        let vb = grid.v(bx, by);
        let t = if va == vb { 0.5 } else { (iso - va) / (vb - va) };
        let t = t.clamp(0.0, 1.0);
        [
            grid.x(ax) + (grid.x(bx) - grid.x(ax)) * t,
            grid.y(ay) + (grid.y(by) - grid.y(ay)) * t,
        ]
    };

    for iy in 0..grid.ny - 1 {
        for ix in 0..grid.nx - 1 {
            // Corners: 1 = (ix, iy), 2 = (ix+1, iy), 4 = (ix+1, iy+1),
            // 8 = (ix, iy+1); a bit is set where the value exceeds iso.
            let v00 = grid.v(ix, iy);
            let v10 = grid.v(ix + 1, iy);
            let v11 = grid.v(ix + 1, iy + 1);
            let v01 = grid.v(ix, iy + 1);
            let mut case = 0u8;
            if v00 > iso {
                case |= 1;
            }
            if v10 > iso {
                case |= 2;
            }
            if v11 > iso {
                case |= 4;
            }
            if v01 > iso {
                case |= 8;
            }
            if case == 0 || case == 15 {
                continue;
            }
            // Edge crossings.
            let bottom = || interp(ix, iy, ix + 1, iy);
            let right = || interp(ix + 1, iy, ix + 1, iy + 1);
            let top = || interp(ix, iy + 1, ix + 1, iy + 1);
            let left = || interp(ix, iy, ix, iy + 1);
            match case {
                1 | 14 => segments.push((left(), bottom())),
                2 | 13 => segments.push((bottom(), right())),
                3 | 12 => segments.push((left(), right())),
                4 | 11 => segments.push((right(), top())),
                6 | 9 => segments.push((bottom(), top())),
                7 | 8 => segments.push((left(), top())),
                5 | 10 => {
                    // Saddle: resolve by the cell-center average sign.
                    let center = 0.25 * (v00 + v10 + v11 + v01);
                    let center_high = center > iso;
                    if (case == 5) == center_high {
                        // Corners 1 and 4 connect through the center.
                        segments.push((left(), top()));
                        segments.push((bottom(), right()));
                    } else {
                        segments.push((left(), bottom()));
                        segments.push((right(), top()));
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    join_segments(segments)
}

/// Chains segments into polylines by exact endpoint matching.
fn join_segments(segments: Vec<(Pt, Pt)>) -> Vec<Vec<Pt>> {
    use std::collections::HashMap;
    let key = |p: &Pt| -> (u64, u64) { (p[0].to_bits(), p[1].to_bits()) };

    // endpoint -> list of (segment, which end).
    let mut at: HashMap<(u64, u64), Vec<(usize, bool)>> = HashMap::new();
    for (i, (a, b)) in segments.iter().enumerate() {
        at.entry(key(a)).or_default().push((i, false));
        at.entry(key(b)).or_default().push((i, true));
    }
    let mut used = vec![false; segments.len()];
    let mut polylines = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut chain: std::collections::VecDeque<Pt> = [a, b].into_iter().collect();
        // Extend forward from the back, then backward from the front.
        for forward in [true, false] {
            loop {
                let tip = if forward {
                    *chain.back().unwrap()
                } else {
                    *chain.front().unwrap()
                };
                let Some(cands) = at.get(&key(&tip)) else { break };
                let next = cands.iter().find(|(i, _)| !used[*i]).copied();
                let Some((i, end)) = next else { break };
                used[i] = true;
                let (a, b) = segments[i];
                let other = if end { a } else { b };
                if forward {
                    chain.push_back(other);
                } else {
                    chain.push_front(other);
                }
            }
        }
        polylines.push(chain.into_iter().collect());
    }
    polylines
}
