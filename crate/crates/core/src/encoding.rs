//! Action-token encoding.
//!
//! A token is `[robot (32) | source place (32) | destination place (32) |
//! label change (N_reg) | duration angle (2) | step (32)]`, so its width is
//! `130 + N_reg`. The first three segments are rows of trainable embedding
//! tables; the rest is fixed.
//!
//! Encoded datasets are cached in a little-endian binary file:
//!
//! ```text
//! magic     8 bytes  "NWNTOK01"
//! token_dim u64
//! n_reg     u64
//! seed      u64      dataset seed
//! t_max     f64
//! count     u64      number of trajectories
//! count x { len u64, label u8 }
//! payload   f64 x token_dim x sum(len), trajectories back to back
//! ```

use std::f64::consts::TAU;
use std::io::{self, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::environment::RobotId;
use crate::labels::LabelSet;
use crate::nwn::{Action, Label, Trajectory};

pub const D_ID: usize = 32;
pub const D_PLACE: usize = 32;
pub const D_POS: usize = 32;
pub const D_DUR: usize = 2;

/// Token width for `n_reg` atomic propositions.
pub const fn token_dim(n_reg: usize) -> usize {
    D_ID + 2 * D_PLACE + n_reg + D_DUR + D_POS
}

/// Width of the non-trainable tail of a token.
pub const fn fixed_dim(n_reg: usize) -> usize {
    n_reg + D_DUR + D_POS
}

const MAGIC: &[u8; 8] = b"NWNTOK01";

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("unknown robot {0}")]
    UnknownRobot(RobotId),
    #[error("unknown place #{0}")]
    UnknownPlace(usize),
    #[error("label y{atom} exceeds N_reg = {n_reg}")]
    LabelOutOfRange { atom: u32, n_reg: usize },
    #[error("trajectory has no actions")]
    EmptyTrajectory,
    #[error("t_max must be positive and finite, got {0}")]
    BadTmax(f64),
    #[error("bad encoded-dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Duration as a point on the unit circle, angle `2π·ln(t+1)/ln(t_max+1)`.
/// Durations above `t_max` are clamped.
pub fn encode_duration(t: f64, t_max: f64) -> [f64; 2] {
    let t = t.clamp(0.0, t_max);
    let theta = TAU * (t + 1.0).ln() / (t_max + 1.0).ln();
    [theta.sin(), theta.cos()]
}

/// −1 at origin labels, +1 at destination labels, 0 where both or neither.
pub fn encode_label_transition(
    y_start: LabelSet,
    y_end: LabelSet,
    n_reg: usize,
) -> Result<Vec<f64>, EncodeError> {
    for atom in y_start.union(y_end).atoms() {
        if atom as usize > n_reg {
            return Err(EncodeError::LabelOutOfRange { atom, n_reg });
        }
    }
    Ok((1..=n_reg as u32)
        .map(|i| f64::from(y_end.contains(i) as u8) - f64::from(y_start.contains(i) as u8))
        .collect())
}

/// Sinusoidal step code: entry `2i` is `sin(k / 10000^(2i/32))`, entry
/// `2i+1` the matching cosine.
pub fn encode_position(k: usize) -> [f64; D_POS] {
    let mut v = [0.0; D_POS];
    for i in 0..D_POS / 2 {
        let angle = k as f64 / 10000f64.powf(2.0 * i as f64 / D_POS as f64);
        v[2 * i] = angle.sin();
        v[2 * i + 1] = angle.cos();
    }
    v
}

/// The symbolic part of a token plus its fixed tail.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionFeatures {
    pub robot: usize,
    pub src: usize,
    pub dst: usize,
    /// `[label change | duration | step]`.
    pub fixed: Vec<f64>,
}

/// Fixed tail for an action at step `k`.
pub fn action_features(a: &Action, k: usize, n_reg: usize, t_max: f64) -> Result<ActionFeatures, EncodeError> {
    let mut fixed = encode_label_transition(a.y_start, a.y_end, n_reg)?;
    fixed.extend(encode_duration(a.duration, t_max));
    fixed.extend(encode_position(k));
    Ok(ActionFeatures {
        robot: a.robot,
        src: a.start.0,
        dst: a.end.0,
        fixed,
    })
}

/// Actions in timestep order, ascending robot id within a timestep.
pub fn ordered_actions(traj: &Trajectory) -> Vec<(usize, &Action)> {
    let mut out = Vec::with_capacity(traj.action_count());
    for (k, step) in traj.steps.iter().enumerate() {
        let mut acts: Vec<&Action> = step.iter().collect();
        acts.sort_by_key(|a| a.robot);
        out.extend(acts.into_iter().map(|a| (k, a)));
    }
    out
}

/// Features of every action of a trajectory.
pub fn trajectory_features(traj: &Trajectory, n_reg: usize, t_max: f64) -> Result<Vec<ActionFeatures>, EncodeError> {
    let acts = ordered_actions(traj);
    if acts.is_empty() {
        return Err(EncodeError::EmptyTrajectory);
    }
    acts.into_iter()
        .map(|(k, a)| action_features(a, k, n_reg, t_max))
        .collect()
}

/// Embedding tables and dataset statistics needed to build tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `team × 32`, row-major.
    pub w_id: Vec<f64>,
    /// `places × 32`, row-major; shared by source and destination.
    pub w_place: Vec<f64>,
    pub team: usize,
    pub places: usize,
    pub n_reg: usize,
    pub t_max: f64,
}

impl EncoderParams {
    /// Tables drawn from a standard normal.
    pub fn random<R: Rng + ?Sized>(
        team: usize,
        places: usize,
        n_reg: usize,
        t_max: f64,
        rng: &mut R,
    ) -> Result<Self, EncodeError> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(EncodeError::BadTmax(t_max));
        }
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        Ok(EncoderParams {
            w_id: draw(team * D_ID),
            w_place: draw(places * D_PLACE),
            team,
            places,
            n_reg,
            t_max,
        })
    }

    pub fn token_dim(&self) -> usize {
        token_dim(self.n_reg)
    }

    pub fn id_row(&self, r: usize) -> Result<&[f64], EncodeError> {
        if r >= self.team {
            return Err(EncodeError::UnknownRobot(r));
        }
        Ok(&self.w_id[r * D_ID..(r + 1) * D_ID])
    }

    pub fn place_row(&self, p: usize) -> Result<&[f64], EncodeError> {
        if p >= self.places {
            return Err(EncodeError::UnknownPlace(p));
        }
        Ok(&self.w_place[p * D_PLACE..(p + 1) * D_PLACE])
    }

    pub fn assemble(&self, f: &ActionFeatures) -> Result<Vec<f64>, EncodeError> {
        let mut v = Vec::with_capacity(self.token_dim());
        v.extend_from_slice(self.id_row(f.robot)?);
        v.extend_from_slice(self.place_row(f.src)?);
        v.extend_from_slice(self.place_row(f.dst)?);
        v.extend_from_slice(&f.fixed);
        Ok(v)
    }
}

pub fn encode_action(a: &Action, k: usize, params: &EncoderParams) -> Result<Vec<f64>, EncodeError> {
    params.assemble(&action_features(a, k, params.n_reg, params.t_max)?)
}

/// Row-major `len × token_dim` token matrix of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTrajectory {
    pub tokens: Vec<f64>,
    pub len: usize,
    pub label: Label,
}

pub fn encode_trajectory(traj: &Trajectory, params: &EncoderParams) -> Result<EncodedTrajectory, EncodeError> {
    let feats = trajectory_features(traj, params.n_reg, params.t_max)?;
    let mut tokens = Vec::with_capacity(feats.len() * params.token_dim());
    for f in &feats {
        tokens.extend(params.assemble(f)?);
    }
    Ok(EncodedTrajectory {
        tokens,
        len: feats.len(),
        label: traj.label,
    })
}

/// Zero-padded `batch × max_len × dim` tensor and its validity mask.
pub fn pad_batch(items: &[EncodedTrajectory], dim: usize) -> (Vec<f64>, Vec<bool>, usize) {
    let max_len = items.iter().map(|e| e.len).max().unwrap_or(0);
    let mut tokens = vec![0.0; items.len() * max_len * dim];
    let mut mask = vec![false; items.len() * max_len];
    for (b, e) in items.iter().enumerate() {
        let base = b * max_len;
        tokens[base * dim..(base + e.len) * dim].copy_from_slice(&e.tokens);
        mask[base..base + e.len].fill(true);
    }
    (tokens, mask, max_len)
}

/// Writes encoded trajectories in the cache format described above.
pub fn write_encoded<W: Write>(
    mut w: W,
    items: &[EncodedTrajectory],
    n_reg: usize,
    t_max: f64,
    dataset_seed: u64,
) -> Result<(), EncodeError> {
    let dim = token_dim(n_reg);
    w.write_all(MAGIC)?;
    for v in [dim as u64, n_reg as u64, dataset_seed] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&t_max.to_le_bytes())?;
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    for e in items {
        if e.tokens.len() != e.len * dim {
            return Err(EncodeError::Format("token matrix does not match its length".into()));
        }
        w.write_all(&(e.len as u64).to_le_bytes())?;
        w.write_all(&[e.label.as_u8()])?;
    }
    for e in items {
        for x in &e.tokens {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Header fields of an encoded-dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedHeader {
    pub token_dim: usize,
    pub n_reg: usize,
    pub dataset_seed: u64,
    pub t_max: f64,
}

pub fn read_encoded<R: Read>(mut r: R) -> Result<(EncodedHeader, Vec<EncodedTrajectory>), EncodeError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EncodeError::Format("bad magic".into()));
    }
    let mut u64_buf = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64, EncodeError> {
        r.read_exact(&mut u64_buf)?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let dim = next_u64(&mut r)? as usize;
    let n_reg = next_u64(&mut r)? as usize;
    let dataset_seed = next_u64(&mut r)?;
    let t_max = f64::from_bits(next_u64(&mut r)?);
    let count = next_u64(&mut r)? as usize;
    if dim != token_dim(n_reg) {
        return Err(EncodeError::Format(format!("token_dim {dim} != 130 + {n_reg}")));
    }
    let mut meta = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = next_u64(&mut r)? as usize;
        let mut lab = [0u8; 1];
        r.read_exact(&mut lab)?;
        let label = Label::from_u8(lab[0]).ok_or_else(|| EncodeError::Format("bad label".into()))?;
        meta.push((len, label));
    }
    let mut items = Vec::with_capacity(meta.len());
    for (len, label) in meta {
        let mut tokens = Vec::with_capacity(len * dim);
        for _ in 0..len * dim {
            tokens.push(f64::from_bits(next_u64(&mut r)?));
        }
        items.push(EncodedTrajectory { tokens, len, label });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(EncodeError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((
        EncodedHeader {
            token_dim: dim,
            n_reg,
            dataset_seed,
            t_max,
        },
        items,
    ))
}
