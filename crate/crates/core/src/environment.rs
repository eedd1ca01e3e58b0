//! Grid environments abstracted into labelled regions, and the robot nets
//! built over them.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! name = "corridor"
//! n_reg = 2
//! cell_size = 1.0
//! width = 6
//! height = 3
//! obstacles = [[3, 0, 1, 1]]        # [x, y, w, h] in cells
//! robots = ["A"]                     # start region per robot
//!
//! [timing]
//! speed = 1.0                        # m/s
//! sigma = 0.1                        # relative noise
//!
//! [[region]]
//! id = "A"
//! rects = [[0, 0, 3, 3]]
//! labels = [1]
//! capacity = 1
//! ```
//!
//! Regions must partition the free (non-obstacle) cells. Two regions are
//! adjacent when a cell of one shares an edge with a cell of the other.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::LabelSet;
use crate::petri::{Marking, PetriNet, PlaceId, TransitionId};
use crate::timing::TimingModel;

/// Robot index, `0..team size`.
pub type RobotId = usize;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot write scenario: {0}")]
    Write(#[from] toml::ser::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown place `{0}`")]
    UnknownPlace(String),
    #[error("unknown robot {0}")]
    UnknownRobot(RobotId),
}

/// Axis-aligned rectangle `[x, y, w, h]` in cells.
pub type Rect = [u32; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TimingFile {
    speed: f64,
    sigma: f64,
}

impl Default for TimingFile {
    fn default() -> Self {
        let m = TimingModel::default();
        TimingFile {
            speed: m.speed,
            sigma: m.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RegionFile {
    id: String,
    rects: Vec<Rect>,
    #[serde(default)]
    labels: LabelSet,
    capacity: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EnvironmentFile {
    name: String,
    n_reg: u32,
    cell_size: f64,
    width: u32,
    height: u32,
    #[serde(default)]
    obstacles: Vec<Rect>,
    robots: Vec<String>,
    #[serde(default)]
    timing: TimingFile,
    region: Vec<RegionFile>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: String,
    pub rects: Vec<Rect>,
    pub cells: Vec<(u32, u32)>,
    pub labels: LabelSet,
    pub capacity: u32,
    /// Mean of the cell centres, in metres.
    pub centroid: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub name: String,
    pub n_reg: u32,
    pub cell_size: f64,
    pub width: u32,
    pub height: u32,
    pub timing: TimingModel,
    obstacles: Vec<Rect>,
    regions: Vec<Region>,
    cell_region: Vec<Option<usize>>,
    adjacency: Vec<Vec<PlaceId>>,
    robot_start: Vec<PlaceId>,
    index: HashMap<String, PlaceId>,
}

fn rect_cells(r: &Rect) -> impl Iterator<Item = (u32, u32)> {
    let [x, y, w, h] = *r;
    (y..y + h).flat_map(move |cy| (x..x + w).map(move |cx| (cx, cy)))
}

impl Environment {
    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let file: EnvironmentFile = toml::from_str(text)?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, EnvError> {
        let file = EnvironmentFile {
            name: self.name.clone(),
            n_reg: self.n_reg,
            cell_size: self.cell_size,
            width: self.width,
            height: self.height,
            obstacles: self.obstacles.clone(),
            robots: self
                .robot_start
                .iter()
                .map(|p| self.regions[p.0].id.clone())
                .collect(),
            timing: TimingFile {
                speed: self.timing.speed,
                sigma: self.timing.sigma,
            },
            region: self
                .regions
                .iter()
                .map(|r| RegionFile {
                    id: r.id.clone(),
                    rects: r.rects.clone(),
                    labels: r.labels,
                    capacity: r.capacity,
                })
                .collect(),
        };
        Ok(toml::to_string(&file)?)
    }

    fn from_file(file: EnvironmentFile) -> Result<Self, EnvError> {
        let invalid = |msg: String| Err(EnvError::Invalid(msg));
        if file.width == 0 || file.height == 0 {
            return invalid("grid must be non-empty".into());
        }
        if !(file.cell_size > 0.0) {
            return invalid("cell_size must be positive".into());
        }
        if file.n_reg == 0 || file.n_reg > crate::labels::MAX_ATOMS {
            return invalid(format!("n_reg = {} out of range", file.n_reg));
        }
        let timing = TimingModel::new(file.timing.speed, file.timing.sigma)
            .map_err(|e| EnvError::Invalid(e.to_string()))?;
        let (w, h) = (file.width, file.height);
        let inside = |r: &Rect| r[2] > 0 && r[3] > 0 && r[0] + r[2] <= w && r[1] + r[3] <= h;
        let mut blocked = vec![false; (w * h) as usize];
        for r in &file.obstacles {
            if !inside(r) {
                return invalid(format!("obstacle {r:?} outside the grid"));
            }
            for (x, y) in rect_cells(r) {
                blocked[(y * w + x) as usize] = true;
            }
        }
        let mut cell_region: Vec<Option<usize>> = vec![None; (w * h) as usize];
        let mut regions = Vec::new();
        let mut index = HashMap::new();
        for (i, rf) in file.region.iter().enumerate() {
            if rf.id.is_empty()
                || rf
                    .id
                    .chars()
                    .any(|c| c.is_whitespace() || ",;=|#".contains(c))
            {
                return invalid(format!("region id `{}` is not a plain token", rf.id));
            }
            if index.insert(rf.id.clone(), PlaceId(i)).is_some() {
                return invalid(format!("duplicate region `{}`", rf.id));
            }
            if rf.capacity == 0 {
                return invalid(format!("region `{}` has zero capacity", rf.id));
            }
            if rf.labels.max_atom() > file.n_reg {
                return invalid(format!("region `{}` uses atoms beyond y{}", rf.id, file.n_reg));
            }
            let mut cells = Vec::new();
            for r in &rf.rects {
                if !inside(r) {
                    return invalid(format!("region `{}` rect {r:?} outside the grid", rf.id));
                }
                for (x, y) in rect_cells(r) {
                    let c = (y * w + x) as usize;
                    if blocked[c] {
                        return invalid(format!("region `{}` covers obstacle cell ({x}, {y})", rf.id));
                    }
                    if let Some(other) = cell_region[c] {
                        return invalid(format!(
                            "regions `{}` and `{}` overlap at ({x}, {y})",
                            file.region[other].id, rf.id
                        ));
                    }
                    cell_region[c] = Some(i);
                    cells.push((x, y));
                }
            }
            if cells.is_empty() {
                return invalid(format!("region `{}` is empty", rf.id));
            }
            let n = cells.len() as f64;
            let cs = file.cell_size;
            let cx = cells.iter().map(|&(x, _)| (x as f64 + 0.5) * cs).sum::<f64>() / n;
            let cy = cells.iter().map(|&(_, y)| (y as f64 + 0.5) * cs).sum::<f64>() / n;
            regions.push(Region {
                id: rf.id.clone(),
                rects: rf.rects.clone(),
                cells,
                labels: rf.labels,
                capacity: rf.capacity,
                centroid: (cx, cy),
            });
        }
        for y in 0..h {
            for x in 0..w {
                let c = (y * w + x) as usize;
                if !blocked[c] && cell_region[c].is_none() {
                    return invalid(format!("free cell ({x}, {y}) belongs to no region"));
                }
            }
        }
        for atom in 1..=file.n_reg {
            if !regions.iter().any(|r| r.labels.contains(atom)) {
                return invalid(format!("atom y{atom} labels no region"));
            }
        }
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); regions.len()];
        for y in 0..h {
            for x in 0..w {
                let Some(a) = cell_region[(y * w + x) as usize] else {
                    continue;
                };
                for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                    if nx >= w || ny >= h {
                        continue;
                    }
                    if let Some(b) = cell_region[(ny * w + nx) as usize] {
                        if a != b {
                            adj[a].insert(b);
                            adj[b].insert(a);
                        }
                    }
                }
            }
        }
        let mut robot_start = Vec::new();
        for id in &file.robots {
            robot_start.push(*index.get(id).ok_or_else(|| EnvError::UnknownPlace(id.clone()))?);
        }
        if robot_start.is_empty() {
            return invalid("no robots".into());
        }
        let mut occupancy: BTreeMap<PlaceId, u32> = BTreeMap::new();
        for p in &robot_start {
            *occupancy.entry(*p).or_default() += 1;
        }
        for (p, n) in occupancy {
            if n > regions[p.0].capacity {
                return invalid(format!("{n} robots start in `{}` beyond its capacity", regions[p.0].id));
            }
        }
        Ok(Environment {
            name: file.name,
            n_reg: file.n_reg,
            cell_size: file.cell_size,
            width: w,
            height: h,
            timing,
            obstacles: file.obstacles,
            regions,
            cell_region,
            adjacency: adj
                .into_iter()
                .map(|s| s.into_iter().map(PlaceId).collect())
                .collect(),
            robot_start,
            index,
        })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, p: PlaceId) -> &Region {
        &self.regions[p.0]
    }

    pub fn place_count(&self) -> usize {
        self.regions.len()
    }

    pub fn place(&self, id: &str) -> Result<PlaceId, EnvError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| EnvError::UnknownPlace(id.to_string()))
    }

    pub fn place_name(&self, p: PlaceId) -> &str {
        &self.regions[p.0].id
    }

    pub fn team_size(&self) -> usize {
        self.robot_start.len()
    }

    pub fn robot_start(&self, r: RobotId) -> Result<PlaceId, EnvError> {
        self.robot_start.get(r).copied().ok_or(EnvError::UnknownRobot(r))
    }

    pub fn robot_starts(&self) -> &[PlaceId] {
        &self.robot_start
    }

    pub fn neighbours(&self, p: PlaceId) -> &[PlaceId] {
        &self.adjacency[p.0]
    }

    pub fn capacity(&self, p: PlaceId) -> u32 {
        self.regions[p.0].capacity
    }

    /// Region containing a free cell.
    pub fn region_at(&self, x: u32, y: u32) -> Option<PlaceId> {
        if x >= self.width || y >= self.height {
            return None;
        }
        self.cell_region[(y * self.width + x) as usize].map(PlaceId)
    }

    pub fn labels_of(&self, p: PlaceId) -> Result<LabelSet, EnvError> {
        self.regions
            .get(p.0)
            .map(|r| r.labels)
            .ok_or_else(|| EnvError::UnknownPlace(format!("#{}", p.0)))
    }

    /// Union of labels over a set of occupied places.
    pub fn observation(&self, occupied: impl IntoIterator<Item = PlaceId>) -> LabelSet {
        occupied
            .into_iter()
            .fold(LabelSet::EMPTY, |acc, p| acc.union(self.regions[p.0].labels))
    }
}

/// One robot's movement net: a place per region, a move transition per
/// directed adjacency and a `stay` self-loop per place.
#[derive(Clone, Debug)]
pub struct RobotNet {
    pub robot: RobotId,
    pub net: PetriNet,
    pub marking: Marking,
    stay: Vec<TransitionId>,
    moves: BTreeMap<(PlaceId, PlaceId), TransitionId>,
}

impl RobotNet {
    pub fn stay_transition(&self, p: PlaceId) -> TransitionId {
        self.stay[p.0]
    }

    pub fn move_transition(&self, from: PlaceId, to: PlaceId) -> Option<TransitionId> {
        self.moves.get(&(from, to)).copied()
    }

    pub fn is_stay(&self, t: TransitionId) -> bool {
        self.stay.get(self.endpoints(t).0 .0) == Some(&t)
    }

    /// `(from, to)` of a transition; equal for `stay`.
    pub fn endpoints(&self, t: TransitionId) -> (PlaceId, PlaceId) {
        let from = *self.net.preset(t).keys().next().expect("one input");
        let to = *self.net.postset(t).keys().next().expect("one output");
        (from, to)
    }

    /// Where the robot currently is.
    pub fn location(&self) -> PlaceId {
        self.marking.support().next().expect("robot net holds one token")
    }
}

pub fn build_robot_net(env: &Environment, r: RobotId) -> Result<RobotNet, EnvError> {
    let start = env.robot_start(r)?;
    let mut net = PetriNet::new();
    for region in &env.regions {
        net.add_place(region.id.clone(), Some(region.capacity))
            .expect("region ids are unique");
    }
    let mut stay = Vec::new();
    for p in 0..env.regions.len() {
        let t = net
            .add_transition(format!("stay_{}", env.regions[p].id))
            .expect("fresh name");
        net.add_input_arc(PlaceId(p), t, 1).expect("valid arc");
        net.add_output_arc(t, PlaceId(p), 1).expect("valid arc");
        stay.push(t);
    }
    let mut moves = BTreeMap::new();
    for (p, nbrs) in env.adjacency.iter().enumerate() {
        for &q in nbrs {
            let t = net
                .add_transition(format!("move_{}_{}", env.regions[p].id, env.regions[q.0].id))
                .expect("fresh name");
            net.add_input_arc(PlaceId(p), t, 1).expect("valid arc");
            net.add_output_arc(t, q, 1).expect("valid arc");
            moves.insert((PlaceId(p), q), t);
        }
    }
    let mut marking = Marking::zeros(net.place_count());
    marking.set(start, 1);
    Ok(RobotNet {
        robot: r,
        net,
        marking,
        stay,
        moves,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Three rooms in a row: A(y1) - B - C(y2), robots start in B.
    pub(crate) const ROW: &str = r#"
name = "row"
n_reg = 2
cell_size = 1.0
width = 9
height = 3
robots = ["B", "B"]

[[region]]
id = "A"
rects = [[0, 0, 3, 3]]
labels = [1]
capacity = 1

[[region]]
id = "B"
rects = [[3, 0, 3, 3]]
capacity = 2

[[region]]
id = "C"
rects = [[6, 0, 3, 3]]
labels = [2]
capacity = 1
"#;

    #[test]
    fn loads_and_computes_adjacency() {
        let env = Environment::from_toml(ROW).unwrap();
        let [a, b, c] = ["A", "B", "C"].map(|n| env.place(n).unwrap());
        assert_eq!(env.neighbours(a), &[b]);
        assert_eq!(env.neighbours(b), &[a, c]);
        assert_eq!(env.region(a).centroid, (1.5, 1.5));
        assert_eq!(env.labels_of(a).unwrap(), LabelSet::single(1));
        assert_eq!(env.labels_of(b).unwrap(), LabelSet::EMPTY);
        assert!(matches!(env.labels_of(PlaceId(9)), Err(EnvError::UnknownPlace(_))));
        assert_eq!(env.team_size(), 2);
        assert_eq!(env.region_at(4, 1), Some(b));
    }

    #[test]
    fn scenario_round_trips_through_toml() {
        let env = Environment::from_toml(ROW).unwrap();
        let again = Environment::from_toml(&env.to_toml().unwrap()).unwrap();
        assert_eq!(again, env);
    }

    #[test]
    fn rejects_bad_partitions() {
        let overlap = ROW.replace("rects = [[3, 0, 3, 3]]", "rects = [[2, 0, 4, 3]]");
        assert!(matches!(Environment::from_toml(&overlap), Err(EnvError::Invalid(_))));
        let hole = ROW.replace("rects = [[3, 0, 3, 3]]", "rects = [[3, 0, 3, 2]]");
        assert!(matches!(Environment::from_toml(&hole), Err(EnvError::Invalid(_))));
        let filled = hole.replace("width = 9", "width = 9\nobstacles = [[3, 2, 3, 1]]");
        assert!(Environment::from_toml(&filled).is_ok());
        let unlabeled = ROW.replace("labels = [2]", "");
        assert!(matches!(Environment::from_toml(&unlabeled), Err(EnvError::Invalid(_))));
        let crowded = ROW.replace("robots = [\"B\", \"B\"]", "robots = [\"A\", \"A\"]");
        assert!(matches!(Environment::from_toml(&crowded), Err(EnvError::Invalid(_))));
    }

    #[test]
    fn corridor_robot_net() {
        let two = r#"
name = "two"
n_reg = 1
cell_size = 1.0
width = 2
height = 1
robots = ["A"]
[[region]]
id = "A"
rects = [[0, 0, 1, 1]]
labels = [1]
capacity = 1
[[region]]
id = "B"
rects = [[1, 0, 1, 1]]
capacity = 1
"#;
        let env = Environment::from_toml(two).unwrap();
        let rn = build_robot_net(&env, 0).unwrap();
        assert_eq!(rn.net.place_count(), 2);
        assert_eq!(rn.net.transition_count(), 4);
        assert!(matches!(build_robot_net(&env, 1), Err(EnvError::UnknownRobot(1))));

        let row = Environment::from_toml(ROW).unwrap();
        let rn = build_robot_net(&row, 0).unwrap();
        let moves = rn.net.transitions().filter(|&t| !rn.is_stay(t)).count();
        assert_eq!((rn.net.place_count(), moves), (3, 4));
        assert_eq!(rn.location(), row.place("B").unwrap());
    }

    /// Random rectangular grids cut into unit regions; returns TOML text.
    fn grid_env(w: u32, h: u32, walls: &[bool]) -> String {
        let mut s = format!(
            "name = \"g\"\nn_reg = 1\ncell_size = 1.0\nwidth = {w}\nheight = {h}\nrobots = [\"c0_0\"]\n"
        );
        let mut obstacles = Vec::new();
        let mut regions = String::new();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if walls[i % walls.len()] && (x, y) != (0, 0) {
                    obstacles.push(format!("[{x}, {y}, 1, 1]"));
                    continue;
                }
                let label = if (x, y) == (0, 0) { "labels = [1]\n" } else { "" };
                regions.push_str(&format!(
                    "[[region]]\nid = \"c{x}_{y}\"\nrects = [[{x}, {y}, 1, 1]]\n{label}capacity = 1\n"
                ));
            }
        }
        s.push_str(&format!("obstacles = [{}]\n", obstacles.join(", ")));
        s + &regions
    }

    proptest! {
        #[test]
        fn one_token_and_symmetric_adjacency(
            w in 1u32..5, h in 1u32..5,
            walls in proptest::collection::vec(prop::bool::weighted(0.3), 7),
            picks in proptest::collection::vec(0usize..64, 0..30),
        ) {
            let env = Environment::from_toml(&grid_env(w, h, &walls)).unwrap();
            for p in 0..env.place_count() {
                for q in env.neighbours(PlaceId(p)) {
                    prop_assert!(env.neighbours(*q).contains(&PlaceId(p)));
                }
            }
            let rn = build_robot_net(&env, 0).unwrap();
            let mut m = rn.marking.clone();
            for pick in picks {
                let enabled: Vec<_> = rn.net.enabled_transitions(&m).into_iter().collect();
                prop_assert!(!enabled.is_empty()); // stay is always enabled
                m = rn.net.fire(&m, enabled[pick % enabled.len()]).unwrap();
                prop_assert_eq!(m.total(), 1);
            }
        }
    }
}
