//! Planar geometry shared by the channel model and the simulator: points,
//! axis-aligned rectangles (rooms and cells), and wall segments with a
//! crossing test used to count obstructions on a transmitter-receiver path.

use serde::{Deserialize, Serialize};

/// A position in metres. Serialized as a two-element array `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

/// Axis-aligned rectangle with inclusive bounds. Used for rooms and cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]")]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect { min: Point::new(v[0], v[1]), max: Point::new(v[2], v[3]) }
    }
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Self {
        Rect { min, max }
    }

    /// Overlap test with positive area (shared edges do not count).
    pub fn intersects(&self, other: &Rect) -> bool {
        self.min.x < other.max.x
            && other.min.x < self.max.x
            && self.min.y < other.max.y
            && other.min.y < self.max.y
    }

    pub fn is_valid(&self) -> bool {
        self.min.x < self.max.x && self.min.y < self.max.y
    }

    /// Containment test, inclusive on all edges.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Point {
        Point::new((self.min.x + self.max.x) / 2.0, (self.min.y + self.max.y) / 2.0)
    }
}

/// A wall, modelled as a line segment between two endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallSegment {
    pub a: Point,
    pub b: Point,
}

impl WallSegment {
    pub fn new(a: Point, b: Point) -> Self {
        WallSegment { a, b }
    }

    /// True when the open segment `p..q` properly crosses this wall.
    ///
    /// Endpoint touches and collinear overlaps do not count as crossings;
    /// scenario geometry is expected to keep radio paths away from wall
    /// endpoints so that crossing counts are stable under small numeric
    /// perturbation.
    pub fn crossed_by(&self, p: Point, q: Point) -> bool {
        let d1 = orient(self.a, self.b, p);
        let d2 = orient(self.a, self.b, q);
        let d3 = orient(p, q, self.a);
        let d4 = orient(p, q, self.b);
        ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
            && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    }
}

/// Twice the signed area of triangle `abc`; sign gives the orientation of
/// `c` relative to the directed line `a -> b`.
fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Number of walls properly crossed by the straight path `p..q`.
pub fn wall_crossings(p: Point, q: Point, walls: &[WallSegment]) -> usize {
    walls.iter().filter(|w| w.crossed_by(p, q)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_is_euclidean() {
        let a = Point::new(0.0, 0.0);
        let b = Point::new(3.0, 4.0);
        assert_eq!(a.distance(&b), 5.0);
    }

    #[test]
    fn rect_contains_is_inclusive() {
        let r = Rect::new(Point::new(0.0, 0.0), Point::new(4.0, 4.0));
        assert!(r.contains(Point::new(0.0, 0.0)));
        assert!(r.contains(Point::new(4.0, 4.0)));
        assert!(r.contains(Point::new(2.0, 3.9)));
        assert!(!r.contains(Point::new(4.0001, 2.0)));
    }

    #[test]
    fn crossing_detects_transversal_paths() {
        let wall = WallSegment::new(Point::new(4.0, 0.0), Point::new(4.0, 4.0));
        assert!(wall.crossed_by(Point::new(2.0, 2.0), Point::new(6.0, 2.0)));
        assert!(!wall.crossed_by(Point::new(2.0, 2.0), Point::new(3.0, 3.0)));
        // Path parallel to and left of the wall.
        assert!(!wall.crossed_by(Point::new(3.0, 0.5), Point::new(3.0, 3.5)));
    }

    #[test]
    fn crossing_ignores_endpoint_touch() {
        let wall = WallSegment::new(Point::new(4.0, 0.0), Point::new(4.0, 4.0));
        // Path through the wall's upper endpoint only touches it.
        assert!(!wall.crossed_by(Point::new(3.0, 4.0), Point::new(5.0, 4.0)));
    }

    #[test]
    fn crossing_count_sums_walls() {
        let walls = [
            WallSegment::new(Point::new(4.0, 0.0), Point::new(4.0, 4.2)),
            WallSegment::new(Point::new(0.0, 4.2), Point::new(8.0, 4.2)),
        ];
        assert_eq!(wall_crossings(Point::new(2.0, 2.0), Point::new(7.0, 5.2), &walls), 2);
        assert_eq!(wall_crossings(Point::new(2.0, 2.0), Point::new(1.0, 5.2), &walls), 1);
        assert_eq!(wall_crossings(Point::new(1.0, 1.0), Point::new(3.0, 3.0), &walls), 0);
    }
}
