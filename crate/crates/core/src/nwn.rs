//! Nets-within-Nets engine. The system net holds one specification net and one
//! robot net per robot; the global enabling function (GEF) enumerates the
//! joint robot moves that are capacity-feasible and acceptable to the
//! specification in the resulting observation snapshot.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::environment::{build_robot_net, EnvError, Environment, RobotId, RobotNet};
use crate::labels::LabelSet;
use crate::ltl::{SpecMove, SpecNet};
use crate::petri::{PlaceId, TransitionId};
use crate::timing::{quantize, synchronize, PathTable};

/// Default bound on macro-steps per trajectory.
pub const DEFAULT_MAX_STEPS: usize = 200;

#[derive(Debug, Error)]
pub enum NwnError {
    #[error("macro-transition is not enabled in the current state")]
    StaleMacro,
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenerateError {
    #[error("deadlock after {steps} steps: no macro-transition is enabled")]
    Deadlock { steps: usize },
    #[error("mission not completed within {0} steps")]
    StepLimit(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("anomaly not applicable: {0}")]
    NotApplicable(String),
}

/// One robot's part of a timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub robot: RobotId,
    /// Seconds.
    pub duration: f64,
    pub start: PlaceId,
    pub end: PlaceId,
    pub y_start: LabelSet,
    pub y_end: LabelSet,
}

impl Action {
    pub fn is_stay(&self) -> bool {
        self.start == self.end
    }
}

/// Actions fired together, ascending robot id.
pub type Timestep = Vec<Action>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Spurious,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Spurious => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Spurious),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Timestep>,
    pub label: Label,
    pub case: String,
    pub seed: u64,
}

impl Trajectory {
    pub fn actions(&self) -> impl Iterator<Item = (usize, &Action)> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(k, step)| step.iter().map(move |a| (k, a)))
    }

    pub fn action_count(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }
}

/// A synchronized step of the system net.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MacroTransition {
    /// Robots that move; all others stay.
    pub moves: BTreeMap<RobotId, TransitionId>,
    pub spec_fire: Option<TransitionId>,
}

/// State of the system net.
#[derive(Clone, Debug)]
pub struct NwnSystem<'a> {
    env: &'a Environment,
    spec: &'a SpecNet,
    robots: Vec<RobotNet>,
    capacities: Vec<u32>,
    spec_at: PlaceId,
}

impl<'a> NwnSystem<'a> {
    pub fn new(env: &'a Environment, spec: &'a SpecNet) -> Result<Self, NwnError> {
        let robots = (0..env.team_size())
            .map(|r| build_robot_net(env, r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NwnSystem {
            env,
            spec,
            robots,
            capacities: env.regions().iter().map(|r| r.capacity).collect(),
            spec_at: spec.start,
        })
    }

    /// Overrides the shared capacity of one region (low-level anomalies).
    pub fn set_capacity(&mut self, p: PlaceId, capacity: u32) {
        self.capacities[p.0] = capacity;
    }

    pub fn env(&self) -> &'a Environment {
        self.env
    }

    pub fn spec(&self) -> &'a SpecNet {
        self.spec
    }

    pub fn spec_place(&self) -> PlaceId {
        self.spec_at
    }

    pub fn is_complete(&self) -> bool {
        self.spec_at == self.spec.p_end
    }

    pub fn robot(&self, r: RobotId) -> &RobotNet {
        &self.robots[r]
    }

    pub fn locations(&self) -> Vec<PlaceId> {
        self.robots.iter().map(RobotNet::location).collect()
    }

    /// Locations after firing the given per-robot transitions, or `None` if
    /// the joint occupancy overflows a region.
    fn joint_post(&self, choice: &[TransitionId]) -> Option<Vec<PlaceId>> {
        let post: Vec<PlaceId> = choice
            .iter()
            .zip(&self.robots)
            .map(|(&t, rn)| rn.endpoints(t).1)
            .collect();
        let mut count: BTreeMap<PlaceId, u32> = BTreeMap::new();
        for p in &post {
            *count.entry(*p).or_default() += 1;
        }
        count
            .iter()
            .all(|(p, &n)| n <= self.capacities[p.0])
            .then_some(post)
    }

    fn spec_response(&self, post: &[PlaceId]) -> Option<Option<TransitionId>> {
        let obs = self.env.observation(post.iter().copied());
        match self.spec.step(self.spec_at, obs)? {
            SpecMove::Stay => Some(None),
            SpecMove::Fire(t) => Some(Some(t)),
        }
    }

    /// All enabled macro-transitions in a fixed order. Stay-only steps are
    /// excluded.
    pub fn gef_enumerate(&self) -> Vec<MacroTransition> {
        let options: Vec<Vec<TransitionId>> = self
            .robots
            .iter()
            .map(|rn| {
                let here = rn.location();
                let stay = rn.stay_transition(here);
                let mut v = vec![stay];
                v.extend(
                    rn.net
                        .enabled_transitions(&rn.marking)
                        .into_iter()
                        .filter(|&t| t != stay),
                );
                v
            })
            .collect();
        let mut out = Vec::new();
        let mut digits = vec![0usize; options.len()];
        loop {
            // odometer increment; all-zero (everyone stays) is skipped
            let mut i = 0;
            while i < digits.len() {
                digits[i] += 1;
                if digits[i] < options[i].len() {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
            if i == digits.len() {
                break;
            }
            let choice: Vec<TransitionId> =
                digits.iter().zip(&options).map(|(&d, o)| o[d]).collect();
            let Some(post) = self.joint_post(&choice) else {
                continue;
            };
            let Some(spec_fire) = self.spec_response(&post) else {
                continue;
            };
            let moves = digits
                .iter()
                .enumerate()
                .filter(|(_, &d)| d != 0)
                .map(|(r, _)| (r, choice[r]))
                .collect();
            out.push(MacroTransition { moves, spec_fire });
        }
        out
    }

    /// Fires a macro-transition atomically. Only movers emit actions; stayers
    /// fire their self-loop silently. Durations are left at zero.
    pub fn fire_macro(&self, mt: &MacroTransition) -> Result<(NwnSystem<'a>, Timestep), NwnError> {
        let mut choice = Vec::with_capacity(self.robots.len());
        for (r, rn) in self.robots.iter().enumerate() {
            match mt.moves.get(&r) {
                Some(&t) if !rn.is_stay(t) && rn.net.is_enabled(&rn.marking, t) => choice.push(t),
                Some(_) => return Err(NwnError::StaleMacro),
                None => choice.push(rn.stay_transition(rn.location())),
            }
        }
        if mt.moves.is_empty() || mt.moves.keys().any(|&r| r >= self.robots.len()) {
            return Err(NwnError::StaleMacro);
        }
        let post = self.joint_post(&choice).ok_or(NwnError::StaleMacro)?;
        if self.spec_response(&post) != Some(mt.spec_fire) {
            return Err(NwnError::StaleMacro);
        }
        let mut next = self.clone();
        let mut actions = Vec::with_capacity(self.robots.len());
        for (r, (rn, &t)) in next.robots.iter_mut().zip(&choice).enumerate() {
            let (start, end) = rn.endpoints(t);
            rn.marking = rn.net.fire(&rn.marking, t).map_err(|_| NwnError::StaleMacro)?;
            if !mt.moves.contains_key(&r) {
                continue;
            }
            actions.push(Action {
                robot: r,
                duration: 0.0,
                start,
                end,
                y_start: self.env.labels_of(start)?,
                y_end: self.env.labels_of(end)?,
            });
        }
        if let Some(t) = mt.spec_fire {
            next.spec_at = self.spec.target(self.spec_at, SpecMove::Fire(t));
        }
        Ok((next, actions))
    }
}

/// Fills durations of one timestep: movers sample the timing model, stays
/// wait for the slowest mover.
fn assign_durations<R: Rng + ?Sized>(env: &Environment, paths: &PathTable, step: &mut Timestep, rng: &mut R) {
    let mut d: Vec<f64> = step
        .iter()
        .map(|a| quantize(env.timing.estimate_duration(paths.length(a.start, a.end), rng)))
        .collect();
    let stays: Vec<bool> = step.iter().map(Action::is_stay).collect();
    synchronize(&mut d, &stays);
    for (a, t) in step.iter_mut().zip(d) {
        a.duration = t;
    }
}

/// Random-policy run of the system net until `p_end` is marked.
pub fn generate_trajectory<R: Rng + ?Sized>(
    mut sys: NwnSystem<'_>,
    paths: &PathTable,
    max_steps: usize,
    rng: &mut R,
) -> Result<Vec<Timestep>, GenerateError> {
    let mut steps = Vec::new();
    while !sys.is_complete() {
        if steps.len() >= max_steps {
            return Err(GenerateError::StepLimit(max_steps));
        }
        let options = sys.gef_enumerate();
        let Some(mt) = options.choose(rng) else {
            return Err(GenerateError::Deadlock { steps: steps.len() });
        };
        let (next, mut actions) = sys.fire_macro(mt).expect("enumerated macros are enabled");
        assign_durations(sys.env, paths, &mut actions, rng);
        steps.push(actions);
        sys = next;
    }
    Ok(steps)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AnomalyMode {
    TimingScale,
    CapacityViolation,
}

/// Attempts allowed when regenerating for a capacity violation.
pub const CAPACITY_RETRIES: usize = 64;

/// Turns a normal trajectory into a low-level anomaly labelled spurious.
///
/// `TimingScale` stretches a contiguous run of one robot's durations by a
/// factor in [3, 8]. `CapacityViolation` ignores `traj`'s actions and
/// regenerates under `spec` with one unit-capacity region opened to the whole
/// team, until some snapshot puts two robots in it.
pub fn inject_low_level_anomaly<R: Rng + ?Sized>(
    traj: &Trajectory,
    mode: AnomalyMode,
    env: &Environment,
    spec: &SpecNet,
    paths: &PathTable,
    max_steps: usize,
    rng: &mut R,
) -> Result<Trajectory, AnomalyError> {
    let steps = match mode {
        AnomalyMode::TimingScale => scale_timing(traj, rng)?,
        AnomalyMode::CapacityViolation => violate_capacity(env, spec, paths, max_steps, rng)?,
    };
    Ok(Trajectory {
        steps,
        label: Label::Spurious,
        case: traj.case.clone(),
        seed: traj.seed,
    })
}

fn scale_timing<R: Rng + ?Sized>(traj: &Trajectory, rng: &mut R) -> Result<Vec<Timestep>, AnomalyError> {
    if traj.steps.len() < 2 {
        return Err(AnomalyError::NotApplicable(format!(
            "{} timesteps is too short to scale",
            traj.steps.len()
        )));
    }
    let robots: Vec<RobotId> = {
        let mut v: Vec<RobotId> = traj.actions().map(|(_, a)| a.robot).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let robot = *robots.choose(rng).expect("non-empty trajectory");
    let own: Vec<(usize, usize)> = traj
        .steps
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            s.iter()
                .enumerate()
                .filter(|(_, a)| a.robot == robot && a.duration > 0.0)
                .map(move |(j, _)| (k, j))
        })
        .collect();
    if own.is_empty() {
        return Err(AnomalyError::NotApplicable("no positive durations".into()));
    }
    let lo = rng.random_range(0..own.len());
    let hi = rng.random_range(lo..own.len());
    let factor = rng.random_range(3.0..=8.0);
    let mut steps = traj.steps.clone();
    for &(k, j) in &own[lo..=hi] {
        let a = &mut steps[k][j];
        a.duration = quantize(a.duration * factor);
    }
    Ok(steps)
}

fn violate_capacity<R: Rng + ?Sized>(
    env: &Environment,
    spec: &SpecNet,
    paths: &PathTable,
    max_steps: usize,
    rng: &mut R,
) -> Result<Vec<Timestep>, AnomalyError> {
    let team = env.team_size() as u32;
    let exclusive: Vec<PlaceId> = (0..env.place_count())
        .map(PlaceId)
        .filter(|&p| env.capacity(p) == 1)
        .collect();
    if team < 2 || exclusive.is_empty() {
        return Err(AnomalyError::NotApplicable(
            "needs two robots and a unit-capacity region".into(),
        ));
    }
    for _ in 0..CAPACITY_RETRIES {
        let room = *exclusive.choose(rng).expect("non-empty");
        let mut sys = NwnSystem::new(env, spec).expect("validated environment");
        sys.set_capacity(room, team);
        let Ok(steps) = generate_trajectory(sys, paths, max_steps, rng) else {
            continue;
        };
        let mut at = env.robot_starts().to_vec();
        let crowded = steps.iter().any(|s| {
            for a in s {
                at[a.robot] = a.end;
            }
            at.iter().filter(|&&p| p == room).count() >= 2
        });
        if crowded {
            return Ok(steps);
        }
    }
    Err(AnomalyError::NotApplicable(format!(
        "no co-occupancy within {CAPACITY_RETRIES} regenerations"
    )))
}

#[derive(Debug, Error, PartialEq)]
pub enum LogError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown place `{name}`")]
    UnknownPlace { line: usize, name: String },
    #[error("missing `# case=... label=... seed=...` header")]
    MissingHeader,
}

/// Writes the canonical `.txt` log.
pub fn write_log(traj: &Trajectory, env: &Environment) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "# case={} label={} seed={}",
        traj.case,
        traj.label.as_u8(),
        traj.seed
    )
    .unwrap();
    for step in &traj.steps {
        let line: Vec<String> = step
            .iter()
            .map(|a| {
                format!(
                    "r={},t={:.3},ps={},pe={},ys={},ye={}",
                    a.robot,
                    a.duration,
                    env.place_name(a.start),
                    env.place_name(a.end),
                    a.y_start,
                    a.y_end
                )
            })
            .collect();
        out.push_str(&line.join(";"));
        out.push('\n');
    }
    out
}

/// Parses a log written by [`write_log`].
pub fn parse_log(text: &str, env: &Environment) -> Result<Trajectory, LogError> {
    let mut header = None;
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let syntax = |msg: String| LogError::Syntax { line: line_no, msg };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if header.is_none() && comment.trim_start().starts_with("case=") {
                header = Some(parse_header(comment).map_err(syntax)?);
            }
            continue;
        }
        let mut step = Vec::new();
        for item in line.split(';') {
            let fields: BTreeMap<&str, &str> = item
                .split(',')
                .map(|kv| kv.split_once('=').ok_or_else(|| syntax(format!("bad field `{kv}`"))))
                .collect::<Result<_, _>>()?;
            let get = |k: &str| {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| syntax(format!("missing `{k}`")))
            };
            if fields.len() != 6 {
                return Err(syntax(format!("expected 6 fields in `{item}`")));
            }
            let place = |k: &str| {
                let name = get(k)?;
                env.place(name).map_err(|_| LogError::UnknownPlace {
                    line: line_no,
                    name: name.to_string(),
                })
            };
            let labels = |k: &str| {
                get(k)?
                    .parse::<LabelSet>()
                    .map_err(|e| syntax(e.to_string()))
            };
            let duration: f64 = get("t")?
                .parse()
                .map_err(|_| syntax("bad duration".into()))?;
            if !(duration >= 0.0 && duration.is_finite()) {
                return Err(syntax(format!("negative or non-finite duration {duration}")));
            }
            step.push(Action {
                robot: get("r")?.parse().map_err(|_| syntax("bad robot id".into()))?,
                duration,
                start: place("ps")?,
                end: place("pe")?,
                y_start: labels("ys")?,
                y_end: labels("ye")?,
            });
        }
        let mut ids: Vec<RobotId> = step.iter().map(|a| a.robot).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(syntax("robot listed twice in one timestep".into()));
        }
        steps.push(step);
    }
    let (case, label, seed) = header.ok_or(LogError::MissingHeader)?;
    Ok(Trajectory {
        steps,
        label,
        case,
        seed,
    })
}

fn parse_header(comment: &str) -> Result<(String, Label, u64), String> {
    let mut case = None;
    let mut label = None;
    let mut seed = None;
    for kv in comment.split_whitespace() {
        match kv.split_once('=') {
            Some(("case", v)) => case = Some(v.to_string()),
            Some(("label", v)) => {
                label = v.parse::<u8>().ok().and_then(Label::from_u8);
                if label.is_none() {
                    return Err(format!("bad label `{v}`"));
                }
            }
            Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|_| format!("bad seed `{v}`"))?),
            _ => return Err(format!("bad header field `{kv}`")),
        }
    }
    match (case, label, seed) {
        (Some(c), Some(l), Some(s)) => Ok((c, l, s)),
        _ => Err("header needs case, label and seed".into()),
    }
}

impl fmt::Display for MacroTransition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let moves: Vec<String> = self.moves.iter().map(|(r, t)| format!("r{r}:{}", t.0)).collect();
        write!(f, "[{}]", moves.join(" "))?;
        if let Some(t) = self.spec_fire {
            write!(f, " spec:{}", t.0)?;
        }
        Ok(())
    }
}
