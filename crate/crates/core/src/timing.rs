//! Kinematic duration model: grid shortest paths between region centroids,
//! constant speed, multiplicative Gaussian noise.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::environment::Environment;
use crate::petri::PlaceId;

/// Shortest movement duration reported for a non-stay action, seconds.
pub const MIN_MOVE_SECONDS: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum TimingError {
    #[error("robot speed must be positive, got {0}")]
    Speed(f64),
    #[error("noise sigma must be non-negative, got {0}")]
    Sigma(f64),
    #[error("no free path from `{from}` to `{to}`")]
    NoPath { from: String, to: String },
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct TimingModel {
    /// Metres per second.
    pub speed: f64,
    /// Relative standard deviation of the duration noise.
    pub sigma: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            speed: 1.0,
            sigma: 0.1,
        }
    }
}

impl TimingModel {
    pub fn new(speed: f64, sigma: f64) -> Result<Self, TimingError> {
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(TimingError::Speed(speed));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(TimingError::Sigma(sigma));
        }
        Ok(TimingModel { speed, sigma })
    }

    /// Noisy travel time for a path of `length` metres. Zero-length paths are
    /// stays and return 0; see [`synchronize`].
    pub fn estimate_duration<R: Rng + ?Sized>(&self, length: f64, rng: &mut R) -> f64 {
        if length <= 0.0 {
            return 0.0;
        }
        let eps = if self.sigma > 0.0 {
            Normal::new(0.0, self.sigma).expect("sigma checked").sample(rng)
        } else {
            0.0
        };
        (length / self.speed * (1.0 + eps)).max(MIN_MOVE_SECONDS)
    }
}

/// Polyline in metres.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Path(pub Vec<(f64, f64)>);

impl Path {
    pub fn length(&self) -> f64 {
        self.0
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() < 2
    }
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    cost: f64,
    cell: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest 8-connected cell path from centroid to centroid, restricted to the
/// cells of the two regions. Diagonal steps may not cut obstacle corners.
/// `from == to` is a stay and returns an empty path.
pub fn plan_path(env: &Environment, from: PlaceId, to: PlaceId) -> Result<Path, TimingError> {
    if from == to {
        return Ok(Path::default());
    }
    let no_path = || TimingError::NoPath {
        from: env.place_name(from).to_string(),
        to: env.place_name(to).to_string(),
    };
    let cs = env.cell_size;
    let (w, h) = (env.width as i64, env.height as i64);
    let centre = |(x, y): (u32, u32)| ((x as f64 + 0.5) * cs, (y as f64 + 0.5) * cs);
    let nearest = |p: PlaceId| {
        let c = env.region(p).centroid;
        *env.region(p)
            .cells
            .iter()
            .min_by(|a, b| {
                let (ax, ay) = centre(**a);
                let (bx, by) = centre(**b);
                let da = (ax - c.0).powi(2) + (ay - c.1).powi(2);
                let db = (bx - c.0).powi(2) + (by - c.1).powi(2);
                da.total_cmp(&db)
            })
            .expect("regions are non-empty")
    };
    let allowed = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && x < w
            && y < h
            && matches!(env.region_at(x as u32, y as u32), Some(p) if p == from || p == to)
    };
    let (sx, sy) = nearest(from);
    let (gx, gy) = nearest(to);
    let idx = |x: i64, y: i64| (y * w + x) as usize;
    let mut dist = vec![f64::INFINITY; (w * h) as usize];
    let mut prev = vec![usize::MAX; (w * h) as usize];
    let mut heap = BinaryHeap::new();
    dist[idx(sx as i64, sy as i64)] = 0.0;
    heap.push(Frontier {
        cost: 0.0,
        cell: idx(sx as i64, sy as i64),
    });
    let goal = idx(gx as i64, gy as i64);
    while let Some(Frontier { cost, cell }) = heap.pop() {
        if cell == goal {
            break;
        }
        if cost > dist[cell] {
            continue;
        }
        let (x, y) = ((cell as i64) % w, (cell as i64) / w);
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if !allowed(nx, ny) {
                continue;
            }
            if dx != 0 && dy != 0 && !(allowed(x + dx, y) && allowed(x, y + dy)) {
                continue;
            }
            let step = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 } * cs;
            let n = idx(nx, ny);
            if cost + step < dist[n] {
                dist[n] = cost + step;
                prev[n] = cell;
                heap.push(Frontier { cost: cost + step, cell: n });
            }
        }
    }
    if !dist[goal].is_finite() {
        return Err(no_path());
    }
    let mut cells = vec![goal];
    while let Some(&c) = cells.last() {
        if prev[c] == usize::MAX {
            break;
        }
        cells.push(prev[c]);
    }
    cells.reverse();
    let mut pts = vec![env.region(from).centroid];
    pts.extend(
        cells
            .iter()
            .map(|&c| centre(((c as i64 % w) as u32, (c as i64 / w) as u32))),
    );
    pts.push(env.region(to).centroid);
    Ok(Path(simplify(pts)))
}

/// Drops repeated and collinear interior points.
fn simplify(pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for p in pts {
        if out.last().is_some_and(|q| (q.0 - p.0).abs() < 1e-12 && (q.1 - p.1).abs() < 1e-12) {
            continue;
        }
        if out.len() >= 2 {
            let a = out[out.len() - 2];
            let b = out[out.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            let forward = (b.0 - a.0) * (p.0 - b.0) + (b.1 - a.1) * (p.1 - b.1) >= 0.0;
            if cross.abs() < 1e-12 && forward {
                out.pop();
            }
        }
        out.push(p);
    }
    out
}

/// Path lengths for every directed adjacency of an environment.
#[derive(Clone, Debug)]
pub struct PathTable {
    lengths: BTreeMap<(PlaceId, PlaceId), f64>,
}

impl PathTable {
    pub fn new(env: &Environment) -> Result<Self, TimingError> {
        let mut lengths = BTreeMap::new();
        for p in 0..env.place_count() {
            let p = PlaceId(p);
            for &q in env.neighbours(p) {
                lengths.insert((p, q), plan_path(env, p, q)?.length());
            }
        }
        Ok(PathTable { lengths })
    }

    /// Length in metres; 0 for stays and unknown pairs.
    pub fn length(&self, from: PlaceId, to: PlaceId) -> f64 {
        self.lengths.get(&(from, to)).copied().unwrap_or(0.0)
    }
}

/// Stays take as long as the slowest movement in the same timestep.
pub fn synchronize(durations: &mut [f64], is_stay: &[bool]) {
    let span = durations
        .iter()
        .zip(is_stay)
        .filter(|(_, &s)| !s)
        .map(|(&d, _)| d)
        .fold(0.0, f64::max);
    for (d, &s) in durations.iter_mut().zip(is_stay) {
        if s {
            *d = span;
        }
    }
}

/// Rounds to whole milliseconds, the resolution of trajectory logs.
pub fn quantize(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}
