use thiserror::Error;

use crate::environment::{Environment, RobotId};
use crate::labels::LabelSet;
use crate::nwn::Trajectory;
use crate::petri::PlaceId;

/// Observation sets, one per timestep, after the step's actions complete.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace(Vec<LabelSet>);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("unknown place #{0}")]
    UnknownPlace(usize),
    #[error("unknown robot {0}")]
    UnknownRobot(RobotId),
    #[error("step {step}: robot {robot} starts in `{claimed}` but is in `{actual}`")]
    Discontinuous {
        step: usize,
        robot: RobotId,
        claimed: String,
        actual: String,
    },
    #[error("trajectory has no timesteps")]
    Empty,
}

impl Trace {
    pub fn new(obs: Vec<LabelSet>) -> Result<Self, TraceError> {
        if obs.is_empty() {
            return Err(TraceError::Empty);
        }
        Ok(Trace(obs))
    }

    pub fn as_slice(&self) -> &[LabelSet] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Robot locations after each timestep, replayed from the environment's
/// robot starts. Robots absent from a timestep stay where they are.
pub fn occupancy(traj: &Trajectory, env: &Environment) -> Result<Vec<Vec<PlaceId>>, TraceError> {
    let mut at: Vec<PlaceId> = env.robot_starts().to_vec();
    let mut out = Vec::with_capacity(traj.steps.len());
    for (k, step) in traj.steps.iter().enumerate() {
        for a in step {
            for p in [a.start, a.end] {
                if p.0 >= env.place_count() {
                    return Err(TraceError::UnknownPlace(p.0));
                }
            }
            let here = at.get_mut(a.robot).ok_or(TraceError::UnknownRobot(a.robot))?;
            if *here != a.start {
                return Err(TraceError::Discontinuous {
                    step: k,
                    robot: a.robot,
                    claimed: env.place_name(a.start).to_string(),
                    actual: env.place_name(*here).to_string(),
                });
            }
            *here = a.end;
        }
        out.push(at.clone());
    }
    Ok(out)
}

/// Observation trace induced by [`occupancy`].
pub fn induced_trace(traj: &Trajectory, env: &Environment) -> Result<Trace, TraceError> {
    let obs = occupancy(traj, env)?
        .into_iter()
        .map(|at| env.observation(at.into_iter()))
        .collect();
    Trace::new(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::tests::ROW;
    use crate::ltl::{compile_to_spec_net, parse_ltl};
    use crate::nwn::tests::sample;
    use crate::nwn::{Action, Label};
    use crate::timing::PathTable;
    use std::collections::BTreeMap;

    fn act(env: &Environment, robot: RobotId, from: &str, to: &str) -> Action {
        let (start, end) = (env.place(from).unwrap(), env.place(to).unwrap());
        Action {
            robot,
            duration: 1.0,
            start,
            end,
            y_start: env.labels_of(start).unwrap(),
            y_end: env.labels_of(end).unwrap(),
        }
    }

    fn traj(steps: Vec<Vec<Action>>) -> Trajectory {
        Trajectory {
            steps,
            label: Label::Normal,
            case: "t".into(),
            seed: 0,
        }
    }

    #[test]
    fn single_robot_walk() {
        let env = Environment::from_toml(&ROW.replace("[\"B\", \"B\"]", "[\"B\"]")).unwrap();
        let t = traj(vec![
            vec![act(&env, 0, "B", "A")],
            vec![act(&env, 0, "A", "B")],
            vec![act(&env, 0, "B", "C")],
        ]);
        let tr = induced_trace(&t, &env).unwrap();
        let y = LabelSet::single;
        assert_eq!(tr.as_slice(), &[y(1), LabelSet::EMPTY, y(2)]);
    }

    #[test]
    fn simultaneous_occupancy_is_one_observation() {
        let env = Environment::from_toml(ROW).unwrap();
        let t = traj(vec![vec![act(&env, 0, "B", "A"), act(&env, 1, "B", "C")]]);
        let tr = induced_trace(&t, &env).unwrap();
        assert_eq!(tr.as_slice(), &[LabelSet::from_atoms([1, 2]).unwrap()]);
    }

    #[test]
    fn errors() {
        let env = Environment::from_toml(ROW).unwrap();
        assert_eq!(induced_trace(&traj(vec![]), &env), Err(TraceError::Empty));
        let t = traj(vec![vec![act(&env, 5, "B", "A")]]);
        assert_eq!(induced_trace(&t, &env), Err(TraceError::UnknownRobot(5)));
        let mut bad = act(&env, 0, "B", "A");
        bad.end = PlaceId(42);
        assert_eq!(induced_trace(&traj(vec![vec![bad]]), &env), Err(TraceError::UnknownPlace(42)));
        let jump = traj(vec![vec![act(&env, 0, "A", "B")]]);
        assert!(matches!(induced_trace(&jump, &env), Err(TraceError::Discontinuous { .. })));
    }

    #[test]
    fn matches_independent_occupancy_replay() {
        let env = Environment::from_toml(ROW).unwrap();
        let spec = compile_to_spec_net(&parse_ltl("F (y1 & F (y2 & F y1))", 2).unwrap()).unwrap();
        let paths = PathTable::new(&env).unwrap();
        for seed in 0..50 {
            let t = sample(&env, &spec, &paths, seed);
            // occupancy as a multiset keyed by region name
            let mut occ: BTreeMap<String, i32> = BTreeMap::new();
            for p in env.robot_starts() {
                *occ.entry(env.place_name(*p).to_string()).or_default() += 1;
            }
            let mut expected = Vec::new();
            for step in &t.steps {
                for a in step {
                    *occ.get_mut(env.place_name(a.start)).unwrap() -= 1;
                    *occ.entry(env.place_name(a.end).to_string()).or_default() += 1;
                }
                let mut obs = LabelSet::EMPTY;
                for (name, n) in &occ {
                    if *n > 0 {
                        obs = obs.union(env.region(env.place(name).unwrap()).labels);
                    }
                }
                expected.push(obs);
            }
            assert_eq!(induced_trace(&t, &env).unwrap().as_slice(), expected.as_slice());
        }
    }
}
