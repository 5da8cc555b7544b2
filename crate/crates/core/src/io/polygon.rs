use super::{CaseError, RoiMask};

pub type Point = [f64; 2];

/// Signed shoelace area, positive for counter-clockwise in y-up orientation.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// True when no two non-adjacent edges touch. O(n²), fine for hand-drawn outlines.
pub fn polygon_is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Even-odd fill: a pixel is set iff its center lies inside the polygon.
///
/// Each scanline intersects the edges with the half-open rule
/// `(y_i > y) != (y_j > y)`, so vertices on a scanline are counted once.
pub fn rasterize_polygon(poly: &[Point], width: usize, height: usize) -> Result<RoiMask, CaseError> {
    let area = polygon_area(poly).abs();
    if poly.len() < 3 || !(area >= 1.0) {
        return Err(CaseError::DegeneratePolygon { area });
    }
    let mut mask = RoiMask::empty(width, height);
    let n = poly.len();
    let mut crossings = Vec::with_capacity(n);
    for row in 0..height {
        let y = row as f64 + 0.5;
        crossings.clear();
        let mut j = n - 1;
        for i in 0..n {
            let [xi, yi] = poly[i];
            let [xj, yj] = poly[j];
            if (yi > y) != (yj > y) {
                crossings.push((xj - xi) * (y - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        // parity of crossings strictly right of the center
        let mut k = 0;
        for col in 0..width {
            let x = col as f64 + 0.5;
            while k < crossings.len() && crossings[k] <= x {
                k += 1;
            }
            if (crossings.len() - k) % 2 == 1 {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_counts_centers() {
        let rect = [[10.0, 10.0], [20.0, 10.0], [20.0, 20.0], [10.0, 20.0]];
        let m = rasterize_polygon(&rect, 32, 32).unwrap();
        assert_eq!(m.count(), 100);
        assert!(m.get(10, 10) && m.get(19, 19));
        assert!(!m.get(9, 10) && !m.get(20, 19));
    }

    #[test]
    fn collapsed_triangle_is_degenerate() {
        let tri = [[1.0, 1.0], [5.0, 5.0], [5.0, 5.0]];
        assert!(matches!(rasterize_polygon(&tri, 8, 8), Err(CaseError::DegeneratePolygon { .. })));
    }

    #[test]
    fn full_frame_polygon() {
        let full = [[0.0, 0.0], [12.0, 0.0], [12.0, 9.0], [0.0, 9.0]];
        let m = rasterize_polygon(&full, 12, 9).unwrap();
        assert_eq!(m.count(), 12 * 9);
    }

    #[test]
    fn simplicity() {
        assert!(polygon_is_simple(&[[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]]));
        assert!(!polygon_is_simple(&[[0.0, 0.0], [4.0, 4.0], [4.0, 0.0], [0.0, 4.0]]));
        // concave but simple
        assert!(polygon_is_simple(&[[0.0, 0.0], [4.0, 0.0], [2.0, 1.0], [4.0, 4.0], [0.0, 4.0]]));
    }
}
