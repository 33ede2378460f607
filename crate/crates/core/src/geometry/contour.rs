use ndarray::{Array2, ArrayView2};

use super::otsu::{otsu_threshold, DEFAULT_OTSU_BINS};
use super::GeometryError;
use crate::types::{ImageRecord, Point, Polygon};

/// Douglas-Peucker tolerance for machine-generated contours.
pub const DEFAULT_SIMPLIFY_TOLERANCE_PX: f64 = 1.0;

/// Components smaller than this are not turned into contours.
pub const MIN_COMPONENT_AREA_PX: usize = 4;

/// 8-connected component labeling. Label 0 is unset; components are
/// numbered from 1 in raster order of their first pixel.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Array2<u32>,
    /// `areas[k]` is the pixel count of component `k + 1`.
    pub areas: Vec<usize>,
    /// First pixel `(row, col)` of each component in raster order.
    pub seeds: Vec<(usize, usize)>,
}

impl Components {
    pub fn label(mask: ArrayView2<'_, bool>) -> Self {
        let (h, w) = mask.dim();
        let mut labels = Array2::<u32>::zeros((h, w));
        let mut areas = Vec::new();
        let mut seeds = Vec::new();
        let mut stack = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !mask[[r, c]] || labels[[r, c]] != 0 {
                    continue;
                }
                let id = areas.len() as u32 + 1;
                let mut area = 0usize;
                labels[[r, c]] = id;
                stack.push((r, c));
                while let Some((y, x)) = stack.pop() {
                    area += 1;
                    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                                labels[[ny, nx]] = id;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
                areas.push(area);
                seeds.push((r, c));
            }
        }
        Self { labels, areas, seeds }
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    /// Largest component id; the earliest one wins ties.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, usize)> = None;
        for (k, &a) in self.areas.iter().enumerate() {
            if best.is_none_or(|(_, ba)| a > ba) {
                best = Some((k, a));
            }
        }
        best.map(|(k, _)| k as u32 + 1)
    }

    /// Outer boundary of component `id` along pixel edges.
    pub fn outer_boundary(&self, id: u32) -> Vec<Point> {
        let (r, c) = self.seeds[id as usize - 1];
        trace_outer_boundary(&self.labels, id, r, c)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Dir {
    E,
    S,
    W,
    N,
}

impl Dir {
    fn step(self) -> (i64, i64) {
        match self {
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
            Dir::N => (0, -1),
        }
    }

    fn right(self) -> Dir {
        match self {
            Dir::E => Dir::S,
            Dir::S => Dir::W,
            Dir::W => Dir::N,
            Dir::N => Dir::E,
        }
    }

    fn left(self) -> Dir {
        match self {
            Dir::E => Dir::N,
            Dir::N => Dir::W,
            Dir::W => Dir::S,
            Dir::S => Dir::E,
        }
    }

    /// Pixels right and left of the edge leaving corner `(x, y)` in this direction.
    fn flanks(self, x: i64, y: i64) -> ((i64, i64), (i64, i64)) {
        match self {
            Dir::E => ((x, y), (x, y - 1)),
            Dir::S => ((x - 1, y), (x, y)),
            Dir::W => ((x - 1, y - 1), (x - 1, y)),
            Dir::N => ((x, y - 1), (x - 1, y - 1)),
        }
    }
}

/// Moore-neighbourhood boundary following on the pixel-corner lattice,
/// keeping the component on the right-hand side.
///
/// Turning left whenever the ahead-left pixel belongs to the component keeps
/// diagonally touching pixels on one contour (8-connectivity). The returned
/// vertices are the corners where the walk changes direction, so rasterizing
/// the polygon at pixel centers reproduces the component with holes filled.
fn trace_outer_boundary(labels: &Array2<u32>, id: u32, seed_row: usize, seed_col: usize) -> Vec<Point> {
    let (h, w) = labels.dim();
    let inside = |(x, y): (i64, i64)| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && labels[[y as usize, x as usize]] == id
    };
    let start = (seed_col as i64, seed_row as i64);
    let (mut x, mut y) = start;
    let mut dir = Dir::N;
    let mut corners = Vec::new();
    let mut steps = 0usize;
    loop {
        let (ahead_right, ahead_left) = dir.flanks(x, y);
        let next = if inside(ahead_left) {
            dir.left()
        } else if inside(ahead_right) {
            dir
        } else {
            dir.right()
        };
        if steps > 0 && (x, y) == start && next == Dir::E {
            break;
        }
        if next != dir {
            corners.push(Point::new(x as f64, y as f64));
        }
        let (dx, dy) = next.step();
        x += dx;
        y += dy;
        dir = next;
        steps += 1;
    }
    corners
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p.x - a.x).powi(2) + (p.y - a.y).powi(2)).sqrt();
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.x + t * dx, a.y + t * dy);
    ((p.x - qx).powi(2) + (p.y - qy).powi(2)).sqrt()
}

/// Douglas-Peucker on an open chain, keeping both endpoints.
fn simplify_chain(points: &[Point], tolerance: f64, keep: &mut [bool]) {
    let mut stack = vec![(0usize, points.len() - 1)];
    while let Some((first, last)) = stack.pop() {
        keep[first] = true;
        keep[last] = true;
        if last <= first + 1 {
            continue;
        }
        let (mut worst, mut worst_d) = (first, -1.0);
        for i in first + 1..last {
            let d = point_segment_distance(points[i], points[first], points[last]);
            if d > worst_d {
                worst = i;
                worst_d = d;
            }
        }
        if worst_d > tolerance {
            stack.push((first, worst));
            stack.push((worst, last));
        }
    }
}

/// Douglas-Peucker for a closed ring, split at vertex 0 and the vertex farthest from it.
pub fn simplify_closed(vertices: &[Point], tolerance: f64) -> Vec<Point> {
    let n = vertices.len();
    if tolerance <= 0.0 || n <= 3 {
        return vertices.to_vec();
    }
    let origin = vertices[0];
    let far = (1..n)
        .max_by(|&a, &b| {
            let da = (vertices[a].x - origin.x).powi(2) + (vertices[a].y - origin.y).powi(2);
            let db = (vertices[b].x - origin.x).powi(2) + (vertices[b].y - origin.y).powi(2);
            da.total_cmp(&db)
        })
        .unwrap_or(1);
    let mut ring: Vec<Point> = vertices.to_vec();
    ring.push(origin);
    let mut keep = vec![false; n + 1];
    simplify_chain(&ring[..=far], tolerance, &mut keep[..=far]);
    simplify_chain(&ring[far..], tolerance, &mut keep[far..]);
    let out: Vec<Point> = (0..n).filter(|&i| keep[i]).map(|i| vertices[i]).collect();
    if out.len() < 3 {
        vertices.to_vec()
    } else {
        out
    }
}

fn boundary_polygon(components: &Components, id: u32, tolerance: f64) -> Option<Polygon> {
    let corners = components.outer_boundary(id);
    Polygon::from_points_dedup(simplify_closed(&corners, tolerance)).ok()
}

/// One simplified outer contour per 8-connected component of at least
/// `MIN_COMPONENT_AREA_PX` pixels, in raster order of the components.
pub fn extract_contours(mask: ArrayView2<'_, bool>, simplify_tolerance_px: f64) -> Vec<Polygon> {
    let components = Components::label(mask);
    (1..=components.len() as u32)
        .filter(|&id| components.areas[id as usize - 1] >= MIN_COMPONENT_AREA_PX)
        .filter_map(|id| boundary_polygon(&components, id, simplify_tolerance_px))
        .collect()
}

/// Contour of the largest component only, if it reaches the minimum area.
pub fn largest_contour(mask: ArrayView2<'_, bool>, simplify_tolerance_px: f64) -> Option<Polygon> {
    let components = Components::label(mask);
    let id = components.largest()?;
    if components.areas[id as usize - 1] < MIN_COMPONENT_AREA_PX {
        return None;
    }
    boundary_polygon(&components, id, simplify_tolerance_px)
}

/// Breast outline for annotation initialization: Otsu foreground, largest
/// 8-connected component, outer boundary.
pub fn breast_contour_init(record: &ImageRecord) -> Result<Polygon, GeometryError> {
    let threshold = otsu_threshold(record.pixels.view(), DEFAULT_OTSU_BINS)?;
    let mask = record.pixels.mapv(|v| v as f64 > threshold);
    let components = Components::label(mask.view());
    let id = components.largest().ok_or(GeometryError::NoForeground)?;
    boundary_polygon(&components, id, DEFAULT_SIMPLIFY_TOLERANCE_PX).ok_or(GeometryError::NoForeground)
}
