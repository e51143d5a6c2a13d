//! Intersection geometry: a four-leg junction with three entrance lanes per
//! approach, plus the route naming used by traffic and state encoding.
//!
//! Frame: origin at the junction center, x east, y north, headings
//! counter-clockwise from +x. Traffic keeps right, so an entrance's lanes sit
//! on the right-hand side of its road seen in the travel direction.

use serde::{Deserialize, Serialize};

/// Compass side of the junction. Used both for "vehicles entering from" and
/// "vehicles exiting towards".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Approach {
    North,
    East,
    South,
    West,
}

impl Approach {
    pub const ALL: [Approach; 4] = [
        Approach::North,
        Approach::East,
        Approach::South,
        Approach::West,
    ];

    /// Unit travel direction for vehicles entering from this side.
    pub fn entry_dir(self) -> [f64; 2] {
        match self {
            Approach::North => [0.0, -1.0],
            Approach::East => [-1.0, 0.0],
            Approach::South => [0.0, 1.0],
            Approach::West => [1.0, 0.0],
        }
    }

    /// Unit travel direction for vehicles exiting towards this side.
    pub fn exit_dir(self) -> [f64; 2] {
        let d = self.entry_dir();
        [-d[0], -d[1]]
    }

    /// True for the north/south legs (used by the two-phase signal).
    pub fn is_north_south(self) -> bool {
        matches!(self, Approach::North | Approach::South)
    }
}

/// Movement through the junction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];

    /// Entrance lane index dedicated to this movement (0 = innermost).
    pub fn entry_lane(self) -> usize {
        match self {
            Turn::Left => 0,
            Turn::Straight => 1,
            Turn::Right => 2,
        }
    }
}

/// A route through the junction, named by its entrance side and movement.
/// The exit side follows from the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RouteId {
    pub from: Approach,
    pub turn: Turn,
}

impl RouteId {
    pub fn new(from: Approach, turn: Turn) -> Self {
        RouteId { from, turn }
    }

    /// Side of the junction this route exits towards.
    pub fn exit(self) -> Approach {
        use Approach::*;
        match (self.from, self.turn) {
            (South, Turn::Left) => West,
            (South, Turn::Straight) => North,
            (South, Turn::Right) => East,
            (North, Turn::Left) => East,
            (North, Turn::Straight) => South,
            (North, Turn::Right) => West,
            (East, Turn::Left) => South,
            (East, Turn::Straight) => West,
            (East, Turn::Right) => North,
            (West, Turn::Left) => North,
            (West, Turn::Straight) => East,
            (West, Turn::Right) => South,
        }
    }

    /// All twelve routes, entrance-major.
    pub fn all() -> Vec<RouteId> {
        let mut v = Vec::with_capacity(12);
        for from in Approach::ALL {
            for turn in Turn::ALL {
                v.push(RouteId { from, turn });
            }
        }
        v
    }
}

/// Junction geometry. Defaults describe a square junction of side 50 m with
/// three 3.75 m lanes per entrance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IntersectionMap {
    /// Half the junction square side [m].
    pub half_width: f64,
    /// Width of one lane [m].
    pub lane_width: f64,
    /// Entrance lanes per approach.
    pub lanes: usize,
    /// Stop-line distance upstream of the junction square [m].
    pub stop_line_setback: f64,
    /// Length of the straight approach segment kept in reference paths [m].
    pub approach_len: f64,
    /// Length of the straight exit segment kept in reference paths [m].
    pub exit_len: f64,
}

impl Default for IntersectionMap {
    fn default() -> Self {
        IntersectionMap {
            half_width: 25.0,
            lane_width: 3.75,
            lanes: 3,
            stop_line_setback: 0.5,
            approach_len: 80.0,
            exit_len: 80.0,
        }
    }
}

impl IntersectionMap {
    /// Half-width of one carriageway (all lanes of one direction) [m].
    pub fn road_half_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width
    }

    /// Lateral offset of the center of lane `lane` from the road centerline,
    /// measured towards the driving side (always positive).
    pub fn lane_offset(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Point where the given entrance lane meets the junction square.
    pub fn entry_point(&self, from: Approach, lane: usize) -> [f64; 2] {
        let d = from.entry_dir();
        let off = self.lane_offset(lane);
        // Lane centers sit to the right of travel.
        let right = [d[1], -d[0]];
        [
            -d[0] * self.half_width + right[0] * off,
            -d[1] * self.half_width + right[1] * off,
        ]
    }

    /// Point where the given exit lane leaves the junction square.
    pub fn exit_point(&self, towards: Approach, lane: usize) -> [f64; 2] {
        let d = towards.exit_dir();
        let off = self.lane_offset(lane);
        let right = [d[1], -d[0]];
        [
            d[0] * self.half_width + right[0] * off,
            d[1] * self.half_width + right[1] * off,
        ]
    }

    /// Distance of a stop line from the junction center, along its approach.
    pub fn stop_line_distance(&self) -> f64 {
        self.half_width + self.stop_line_setback
    }

    /// Signed progress of a point towards/through an entrance's stop line:
    /// negative upstream of the stop line, positive beyond it.
    pub fn progress_past_stop_line(&self, from: Approach, p: [f64; 2]) -> f64 {
        let d = from.entry_dir();
        p[0] * d[0] + p[1] * d[1] + self.stop_line_distance()
    }

    /// True if the point lies inside the junction square.
    pub fn within_junction(&self, p: [f64; 2]) -> bool {
        p[0].abs() <= self.half_width && p[1].abs() <= self.half_width
    }

    /// True if the point lies on the drivable area (junction square or any
    /// road arm).
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (ax, ay) = (p[0].abs(), p[1].abs());
        (ax <= self.half_width && ay <= self.half_width)
            || ax <= self.road_half_width()
            || ay <= self.road_half_width()
    }

    /// Boundary wall segments of the drivable area in folded coordinates
    /// (|x|, |y|); the full boundary is their image under the two mirror
    /// symmetries. Arms are truncated far outside the simulated region.
    pub fn boundary_segments(&self) -> [[[f64; 2]; 2]; 4] {
        let hw = self.half_width;
        let rw = self.road_half_width();
        let far = 500.0;
        [
            [[rw, hw], [hw, hw]],   // junction corner notch, x-parallel
            [[hw, hw], [hw, rw]],   // junction corner notch, y-parallel
            [[rw, hw], [rw, far]],  // arm wall along y
            [[hw, rw], [far, rw]],  // arm wall along x
        ]
    }

    /// Signed distance from `p` to the drivable-area boundary: positive
    /// inside the road, negative outside.
    pub fn boundary_distance(&self, p: [f64; 2]) -> f64 {
        let q = [p[0].abs(), p[1].abs()];
        let mut d = f64::INFINITY;
        for seg in self.boundary_segments() {
            d = d.min(dist_point_segment(q, seg[0], seg[1]));
        }
        if self.contains(p) {
            d
        } else {
            -d
        }
    }
}

/// Euclidean distance from point `p` to segment `a`-`b`.
pub fn dist_point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    (dx * dx + dy * dy).sqrt()
}
