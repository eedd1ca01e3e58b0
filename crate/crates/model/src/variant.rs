//! The baseline wiring and its ablation variants, and how each turns a
//! trajectory into a model input sequence.

use std::fmt;
use std::str::FromStr;

use nwn_core::encoding::{self, ordered_actions, trajectory_features, EncodeError};
use nwn_core::{LabelSet, Trajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transformer::{InputKind, ModelConfig, Pooling, Sequence};

/// Longest step index the one-hot step code can represent; later steps share
/// the last slot.
pub const SIMPLE_MAX_STEPS: usize = 200;
/// Width of a raw token: the log tuple's robot, seconds, src, dst, src
/// labels and dst labels. No position is given.
pub const RAW_DIM: usize = 6;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ours")]
    Ours,
    #[serde(rename = "simple")]
    SimpleEmbedding,
    #[serde(rename = "raw")]
    RawEmbedding,
    #[serde(rename = "mean")]
    MeanPooling,
    #[serde(rename = "reduced")]
    ReducedHeads,
    #[serde(rename = "increased")]
    IncreasedHeads,
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown variant {0:?}")]
pub struct UnknownVariant(pub String);

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ours,
        Variant::SimpleEmbedding,
        Variant::RawEmbedding,
        Variant::MeanPooling,
        Variant::ReducedHeads,
        Variant::IncreasedHeads,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::SimpleEmbedding => "simple",
            Variant::RawEmbedding => "raw",
            Variant::MeanPooling => "mean",
            Variant::ReducedHeads => "reduced",
            Variant::IncreasedHeads => "increased",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Variant::Ours => "Ours",
            Variant::SimpleEmbedding => "Simple Embedding",
            Variant::RawEmbedding => "Raw Embedding",
            Variant::MeanPooling => "Mean Pooling",
            Variant::ReducedHeads => "Reduced Multi-Head",
            Variant::IncreasedHeads => "Increased Multi-Head",
        }
    }

    /// Model architecture for a team of `team` robots over `places` regions.
    pub fn config(self, team: usize, places: usize, n_reg: usize) -> ModelConfig {
        let embedded = InputKind::Embedded {
            team,
            places,
            fixed: encoding::fixed_dim(n_reg),
        };
        let mut cfg = ModelConfig::standard(embedded);
        match self {
            Variant::Ours => {}
            Variant::SimpleEmbedding => {
                cfg.input = InputKind::Dense {
                    dim: simple_dim(team, places, n_reg),
                }
            }
            Variant::RawEmbedding => cfg.input = InputKind::Dense { dim: RAW_DIM },
            Variant::MeanPooling => cfg.pooling = Pooling::Mean,
            Variant::ReducedHeads => {
                cfg.heads = 1;
                cfg.layers = 1;
            }
            Variant::IncreasedHeads => cfg.heads = 32,
        }
        cfg
    }

    /// Token sequence for one trajectory.
    pub fn featurize(self, traj: &Trajectory, team: usize, places: usize, n_reg: usize, t_max: f64) -> Result<Sequence, EncodeError> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(EncodeError::BadTmax(t_max));
        }
        let acts = ordered_actions(traj);
        if acts.is_empty() {
            return Err(EncodeError::EmptyTrajectory);
        }
        for (_, a) in &acts {
            if a.robot >= team {
                return Err(EncodeError::UnknownRobot(a.robot));
            }
            for p in [a.start.0, a.end.0] {
                if p >= places {
                    return Err(EncodeError::UnknownPlace(p));
                }
            }
        }
        let len = acts.len();
        match self {
            Variant::SimpleEmbedding => {
                let dim = simple_dim(team, places, n_reg);
                let mut fixed = vec![0.0; len * dim];
                for (row, (k, a)) in fixed.chunks_exact_mut(dim).zip(&acts) {
                    row[a.robot] = 1.0;
                    row[team + a.start.0] = 1.0;
                    row[team + places + a.end.0] = 1.0;
                    let base = team + 2 * places;
                    for atom in a.y_end.atoms() {
                        check_atom(atom, n_reg)?;
                        row[base + atom as usize - 1] = 1.0;
                    }
                    row[base + n_reg] = a.duration.clamp(0.0, t_max) / t_max;
                    row[base + n_reg + 1 + (*k).min(SIMPLE_MAX_STEPS - 1)] = 1.0;
                }
                Ok(Sequence { ids: Vec::new(), fixed, len })
            }
            Variant::RawEmbedding => {
                let mut fixed = Vec::with_capacity(len * RAW_DIM);
                for (_, a) in &acts {
                    fixed.extend([
                        a.robot as f64,
                        a.duration,
                        a.start.0 as f64,
                        a.end.0 as f64,
                        label_code(a.y_start, n_reg)?,
                        label_code(a.y_end, n_reg)?,
                    ]);
                }
                Ok(Sequence { ids: Vec::new(), fixed, len })
            }
            _ => {
                let feats = trajectory_features(traj, n_reg, t_max)?;
                let ids = feats.iter().map(|f| [f.robot as u32, f.src as u32, f.dst as u32]).collect();
                let fixed = feats.into_iter().flat_map(|f| f.fixed).collect();
                Ok(Sequence { ids, fixed, len })
            }
        }
    }
}

/// `r + 2·|P| + N_reg + 1 + max_steps`.
pub fn simple_dim(team: usize, places: usize, n_reg: usize) -> usize {
    team + 2 * places + n_reg + 1 + SIMPLE_MAX_STEPS
}

fn check_atom(atom: u32, n_reg: usize) -> Result<(), EncodeError> {
    if atom == 0 || atom as usize > n_reg {
        return Err(EncodeError::LabelOutOfRange { atom, n_reg });
    }
    Ok(())
}

/// Label set as the integer whose bit `k - 1` marks atom `y_k`.
fn label_code(y: LabelSet, n_reg: usize) -> Result<f64, EncodeError> {
    y.atoms().try_fold(0.0, |code, atom| {
        check_atom(atom, n_reg)?;
        Ok(code + 2f64.powi(atom as i32 - 1))
    })
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| UnknownVariant(s.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nwn_core::nwn::{Action, Label};
    use nwn_core::PlaceId;

    fn traj() -> Trajectory {
        let act = |robot, s, e, ys: &[u32], ye: &[u32], duration| Action {
            robot,
            duration,
            start: PlaceId(s),
            end: PlaceId(e),
            y_start: LabelSet::from_atoms(ys.iter().copied()).unwrap(),
            y_end: LabelSet::from_atoms(ye.iter().copied()).unwrap(),
        };
        Trajectory {
            steps: vec![
                vec![act(0, 0, 1, &[], &[2], 3.0), act(1, 2, 2, &[1], &[1], 3.0)],
                vec![act(1, 2, 0, &[1], &[], 1.5), act(0, 1, 1, &[2], &[2], 1.5)],
            ],
            label: Label::Normal,
            case: "t".into(),
            seed: 0,
        }
    }

    #[test]
    fn tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>(), Ok(v));
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_wiring() {
        let base = Variant::Ours.config(2, 3, 4);
        assert_eq!(base.d_in(), 130 + 4);
        let mean = Variant::MeanPooling.config(2, 3, 4);
        assert_eq!(ModelConfig { pooling: Pooling::Max, ..mean }, base);
        assert_eq!(Variant::ReducedHeads.config(2, 3, 4).heads, 1);
        assert_eq!(Variant::ReducedHeads.config(2, 3, 4).layers, 1);
        let inc = Variant::IncreasedHeads.config(2, 3, 4);
        assert_eq!((inc.heads, inc.head_dim()), (32, 8));
        assert_eq!(Variant::SimpleEmbedding.config(3, 8, 10).d_in(), 3 + 16 + 10 + 1 + 200);
        assert_eq!(Variant::RawEmbedding.config(3, 8, 10).d_in(), RAW_DIM);
    }

    #[test]
    fn simple_tokens_are_one_hot() {
        let s = Variant::SimpleEmbedding.featurize(&traj(), 2, 3, 2, 6.0).unwrap();
        let dim = simple_dim(2, 3, 2);
        assert_eq!((s.len, s.fixed.len()), (4, 4 * dim));
        // step 0, robot 0, place 0 → 1, labels {2}, 3 s of 6
        let row = &s.fixed[..dim];
        let mut expect = vec![0.0; dim];
        expect[0] = 1.0;
        expect[2] = 1.0;
        expect[2 + 3 + 1] = 1.0;
        expect[2 + 6 + 1] = 1.0;
        expect[2 + 6 + 2] = 0.5;
        expect[2 + 6 + 3] = 1.0;
        assert_eq!(row, &expect[..]);
        // the last token is step 1 of robot 1
        let last = &s.fixed[3 * dim..];
        assert_eq!(last[1], 1.0);
        assert_eq!(last[2 + 6 + 3 + 1], 1.0);
    }

    #[test]
    fn raw_tokens_are_integer_codes() {
        let s = Variant::RawEmbedding.featurize(&traj(), 2, 3, 2, 6.0).unwrap();
        assert_eq!(&s.fixed[..RAW_DIM], &[0.0, 3.0, 0.0, 1.0, 0.0, 2.0]);
        assert_eq!(&s.fixed[3 * RAW_DIM..], &[1.0, 1.5, 2.0, 0.0, 1.0, 0.0]);
        let both = Trajectory {
            steps: vec![vec![Action {
                robot: 0,
                duration: 1.0,
                start: PlaceId(0),
                end: PlaceId(1),
                y_start: LabelSet::from_atoms([1, 2]).unwrap(),
                y_end: LabelSet::EMPTY,
            }]],
            ..traj()
        };
        let s = Variant::RawEmbedding.featurize(&both, 1, 2, 2, 6.0).unwrap();
        assert_eq!(s.fixed[4], 3.0);
    }

    #[test]
    fn embedded_tokens_carry_ids() {
        let s = Variant::Ours.featurize(&traj(), 2, 3, 2, 6.0).unwrap();
        assert_eq!(s.ids, vec![[0, 0, 1], [1, 2, 2], [0, 1, 1], [1, 2, 0]]);
        assert_eq!(s.fixed.len(), 4 * encoding::fixed_dim(2));
        assert!(matches!(
            Variant::Ours.featurize(&traj(), 1, 3, 2, 6.0),
            Err(EncodeError::UnknownRobot(1))
        ));
    }
}
