//! Polygon rasterization and pixel-boundary contour tracing.
//!
//! Coordinates are in pixel units with pixel `(row, col)` covering
//! `[col, col + 1] × [row, row + 1]`; a pixel belongs to a polygon when its
//! centre does (even-odd rule).

use std::collections::BTreeMap;

use super::Mask;
use crate::error::{Error, Result};

/// Closed polygon as `(x, y)` vertices; the closing edge is implicit.
pub type Polygon = Vec<(f64, f64)>;

/// Even-odd test with half-open edge crossings.
pub fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) {
            let xint = xi + (y - yi) * (xj - xi) / (yj - yi);
            if x < xint {
                inside = !inside;
            }
        }
    }
    inside
}

/// Union of the even-odd interiors of `polygons`, sampled at pixel centres.
pub fn rasterize_contours(polygons: &[Polygon], height: usize, width: usize) -> Result<Mask> {
    if let Some(p) = polygons.iter().find(|p| p.len() < 3) {
        return Err(Error::DegeneratePolygon(p.len()));
    }
    let mut mask = Mask::zeros(height, width);
    let mut crossings = Vec::new();
    for poly in polygons {
        let n = poly.len();
        for row in 0..height {
            let y = row as f64 + 0.5;
            crossings.clear();
            for i in 0..n {
                let (xi, yi) = poly[i];
                let (xj, yj) = poly[(i + n - 1) % n];
                if (yi > y) != (yj > y) {
                    crossings.push(xi + (y - yi) * (xj - xi) / (yj - yi));
                }
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            // A centre is inside iff an odd number of crossings lies strictly
            // to its right, i.e. it falls in [c[2k], c[2k+1]) counted from the right.
            let m = crossings.len();
            for col in 0..width {
                let x = col as f64 + 0.5;
                let right = m - crossings.partition_point(|&c| c <= x);
                if right % 2 == 1 {
                    mask.bits[row * width + col] = 1;
                }
            }
        }
    }
    Ok(mask)
}

/// Traces the foreground boundary along pixel edges into closed loops.
///
/// Every boundary edge appears in exactly one loop, so re-rasterizing the
/// loops reproduces any mask without holes; collinear vertices are merged.
pub fn trace_contours(mask: &Mask) -> Vec<Polygon> {
    let (h, w) = (mask.height as i64, mask.width as i64);
    let fg = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && mask.get(r as usize, c as usize) == 1;

    // Directed edges keep the foreground on the right (y axis points down),
    // keyed by start vertex (x, y).
    let mut edges: BTreeMap<(i64, i64), Vec<(i64, i64)>> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            if !fg(r, c) {
                continue;
            }
            if !fg(r - 1, c) {
                edges.entry((c, r)).or_default().push((c + 1, r));
            }
            if !fg(r, c + 1) {
                edges.entry((c + 1, r)).or_default().push((c + 1, r + 1));
            }
            if !fg(r + 1, c) {
                edges.entry((c + 1, r + 1)).or_default().push((c, r + 1));
            }
            if !fg(r, c - 1) {
                edges.entry((c, r + 1)).or_default().push((c, r));
            }
        }
    }

    let mut loops = Vec::new();
    while let Some((&start, _)) = edges.iter().next() {
        let mut path = vec![start];
        let mut cur = start;
        loop {
            let outs = edges.get_mut(&cur).expect("boundary edges form closed loops");
            let next = outs.pop().expect("non-empty outgoing list");
            if outs.is_empty() {
                edges.remove(&cur);
            }
            cur = next;
            if cur == start {
                break;
            }
            path.push(cur);
        }
        loops.push(simplify(&path));
    }
    loops
}

fn simplify(path: &[(i64, i64)]) -> Polygon {
    let n = path.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = path[(i + n - 1) % n];
        let c = path[i];
        let q = path[(i + 1) % n];
        let cross = (c.0 - p.0) * (q.1 - c.1) - (c.1 - p.1) * (q.0 - c.0);
        if cross != 0 {
            out.push((c.0 as f64, c.1 as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(polys: &[Polygon], h: usize, w: usize) -> Mask {
        let mut m = Mask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                if polys.iter().any(|p| point_in_polygon(p, x, y)) {
                    m.bits[r * w + c] = 1;
                }
            }
        }
        m
    }

    #[test]
    fn square_covers_sixteen_pixels() {
        let sq = vec![(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)];
        let m = rasterize_contours(std::slice::from_ref(&sq), 8, 8).unwrap();
        assert_eq!(m.area(), 16);
        assert_eq!(m, brute(&[sq], 8, 8));
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.get(r, c) == 1, (2..6).contains(&r) && (2..6).contains(&c));
            }
        }
    }

    #[test]
    fn empty_polygon_list_gives_empty_mask() {
        assert_eq!(rasterize_contours(&[], 5, 7).unwrap().area(), 0);
    }

    #[test]
    fn degenerate_polygon_is_rejected() {
        let err = rasterize_contours(&[vec![(0.0, 0.0), (3.0, 3.0)]], 4, 4).unwrap_err();
        assert!(matches!(err, Error::DegeneratePolygon(2)));
    }

    #[test]
    fn disjoint_triangles_add_up() {
        let a = vec![(1.0, 1.0), (9.0, 2.0), (3.0, 8.0)];
        let b = vec![(12.0, 3.0), (19.0, 4.0), (15.5, 15.0)];
        let ma = rasterize_contours(std::slice::from_ref(&a), 20, 20).unwrap();
        let mb = rasterize_contours(std::slice::from_ref(&b), 20, 20).unwrap();
        let both = rasterize_contours(&[a.clone(), b.clone()], 20, 20).unwrap();
        assert_eq!(ma, brute(std::slice::from_ref(&a), 20, 20));
        assert_eq!(mb, brute(std::slice::from_ref(&b), 20, 20));
        assert_eq!(both, brute(&[a, b], 20, 20));
        assert_eq!(both.area(), ma.area() + mb.area());
    }

    #[test]
    fn trace_of_square_is_its_four_corners() {
        let sq = vec![(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)];
        let m = rasterize_contours(&[sq], 8, 8).unwrap();
        let loops = trace_contours(&m);
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].len(), 4);
    }

    fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        if pts.len() < 3 {
            return pts;
        }
        let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
        let mut lower: Vec<(f64, f64)> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<(f64, f64)> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        lower
    }

    proptest! {
        #[test]
        fn rasterize_matches_point_oracle(
            pts in prop::collection::vec((0.0f64..24.0, 0.0f64..20.0), 3..9)
        ) {
            let m = rasterize_contours(std::slice::from_ref(&pts), 20, 24).unwrap();
            prop_assert_eq!(m, brute(&[pts], 20, 24));
        }

        #[test]
        fn convex_raster_trace_round_trip(
            pts in prop::collection::vec((0.0f64..32.0, 0.0f64..32.0), 3..10),
            size in 4usize..=32,
        ) {
            let s = size as f64;
            let hull = convex_hull(pts.into_iter().map(|(x, y)| (x * s / 32.0, y * s / 32.0)).collect());
            prop_assume!(hull.len() >= 3);
            let m = rasterize_contours(&[hull], size, size).unwrap();
            let loops = trace_contours(&m);
            let again = rasterize_contours(&loops, size, size).unwrap();
            prop_assert_eq!(again, m);
        }
    }
}
