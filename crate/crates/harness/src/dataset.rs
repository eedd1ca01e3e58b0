//! Balanced, re-labeled datasets with stratified splits and a manifest.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;

use nwn_core::ltl::{eval_finite_trace, induced_trace, SpecNet};
use nwn_core::nwn::{
    generate_trajectory, inject_low_level_anomaly, parse_log, write_log, AnomalyMode, Label, LogError, NwnSystem,
};
use nwn_core::Trajectory;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cases::{CaseName, CaseSpec};

/// Generation attempts allowed per requested trajectory.
pub const ATTEMPTS_PER_ITEM: usize = 50;
/// RNG stream reserved for the split shuffle.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("only {normal} normal and {spurious} spurious trajectories after {attempts} attempts")]
    ExhaustedBudget {
        normal: usize,
        spurious: usize,
        attempts: usize,
    },
    #[error("dataset size must be an even number of at least 10, got {0}")]
    BadSize(usize),
    #[error("{file}: {source}")]
    Log { file: String, source: LogError },
    #[error("{0}: digest does not match the manifest")]
    Digest(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest is for case {found}, expected {expected}")]
    WrongCase { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub case: String,
    pub n: usize,
    pub seed: u64,
    pub normal: usize,
    pub spurious: usize,
    /// Spurious-formula runs that satisfied the normal formula and were kept
    /// as normal.
    pub relabeled: usize,
    /// Deadlocked, step-limited, inapplicable or surplus runs.
    pub discarded: usize,
    pub attempts: usize,
    pub max_steps: usize,
    pub relabel_policy: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Largest action duration in the training split.
    pub t_max: f64,
    pub files: Vec<FileDigest>,
    pub digest: String,
    pub test_digest: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub manifest: Manifest,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn run(case: &CaseSpec, net: &SpecNet, rng: &mut ChaCha8Rng) -> Option<Vec<nwn_core::nwn::Timestep>> {
    let sys = NwnSystem::new(&case.env, net).ok()?;
    generate_trajectory(sys, &case.paths, case.max_steps, rng).ok()
}

pub fn satisfies_normal(case: &CaseSpec, traj: &Trajectory) -> bool {
    induced_trace(traj, &case.env).is_ok_and(|t| eval_finite_trace(&case.normal, t.as_slice()))
}

/// A generated run and, for low-level anomalies, the index of its mechanism
/// in [`MODES`].
struct Candidate {
    traj: Trajectory,
    mode: Option<usize>,
}

const MODES: [AnomalyMode; 2] = [AnomalyMode::TimingScale, AnomalyMode::CapacityViolation];

fn log_name(i: usize) -> String {
    format!("{i:05}.log")
}

/// Generates `n/2` trajectories per class, splits them 80/10/10 within each
/// class and records everything in the manifest. Runs are kept in pairs of
/// one normal and one spurious run with equal token counts, so that
/// sequence length says nothing about the label.
pub fn build_dataset(case: &CaseSpec, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    if n < 10 || n % 2 != 0 {
        return Err(DatasetError::BadSize(n));
    }
    let half = n / 2;
    let slug = case.name.slug().to_string();
    let mut normal = Vec::with_capacity(half);
    let mut spurious = Vec::with_capacity(half);
    // runs waiting for a partner of the other class with the same token count
    let mut waiting: [BTreeMap<usize, VecDeque<Candidate>>; 2] = Default::default();
    // low-level spurious runs are split evenly between the two mechanisms
    let mut per_mode = [0usize; 2];
    let mode_quota = [half.div_ceil(2), half / 2];
    let (mut relabeled, mut discarded) = (0, 0);
    let budget = ATTEMPTS_PER_ITEM * n;
    let mut attempt = 0;
    while normal.len() < half {
        if attempt >= budget {
            return Err(DatasetError::ExhaustedBudget {
                normal: normal.len(),
                spurious: spurious.len(),
                attempts: attempt,
            });
        }
        let mut rng = trajectory_rng(seed, attempt as u64);
        let index = attempt as u64;
        let make = |steps, label| Trajectory {
            steps,
            label,
            case: slug.clone(),
            seed: index,
        };
        let want_normal = attempt % 2 == 0;
        let mode = if attempt % 4 == 1 { 0 } else { 1 };
        attempt += 1;
        let candidate = if want_normal {
            run(case, &case.normal_net, &mut rng).map(|steps| Candidate { traj: make(steps, Label::Normal), mode: None })
        } else if let Some(net) = &case.spurious_net {
            run(case, net, &mut rng).map(|steps| Candidate { traj: make(steps, Label::Spurious), mode: None })
        } else {
            run(case, &case.normal_net, &mut rng).and_then(|steps| {
                let base = make(steps, Label::Normal);
                inject_low_level_anomaly(&base, MODES[mode], &case.env, &case.normal_net, &case.paths, case.max_steps, &mut rng)
                    .ok()
                    .map(|traj| Candidate { traj, mode: Some(mode) })
            })
        };
        let Some(mut c) = candidate else {
            discarded += 1;
            continue;
        };
        if c.traj.label == Label::Spurious && case.spurious.is_some() && satisfies_normal(case, &c.traj) {
            c.traj.label = Label::Normal;
            relabeled += 1;
        }
        if c.mode.is_some_and(|m| per_mode[m] >= mode_quota[m]) {
            discarded += 1;
            continue;
        }
        let class = (c.traj.label == Label::Spurious) as usize;
        let len = c.traj.action_count();
        let partner = waiting[1 - class].get_mut(&len).and_then(|q| {
            let at = q.iter().position(|p| p.mode.is_none_or(|m| per_mode[m] < mode_quota[m]))?;
            q.remove(at)
        });
        let Some(partner) = partner else {
            waiting[class].entry(len).or_default().push_back(c);
            continue;
        };
        let (n_run, s_run) = if class == 0 { (c, partner) } else { (partner, c) };
        if let Some(m) = s_run.mode {
            per_mode[m] += 1;
        }
        normal.push(n_run.traj);
        spurious.push(s_run.traj);
    }
    discarded += waiting.iter().flat_map(|w| w.values()).map(VecDeque::len).sum::<usize>();

    // stratified split
    let mut rng = trajectory_rng(seed, SPLIT_STREAM);
    let mut trajectories = normal;
    trajectories.append(&mut spurious);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in [0..half, half..n] {
        let mut idx: Vec<usize> = class.collect();
        idx.shuffle(&mut rng);
        let n_train = half * 8 / 10;
        let n_val = (half - n_train) / 2;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for s in [&mut train, &mut val, &mut test] {
        s.sort_unstable();
    }
    let t_max = train
        .iter()
        .flat_map(|&i| trajectories[i].actions().map(|(_, a)| a.duration))
        .fold(0.0, f64::max);

    let logs: Vec<String> = trajectories.iter().map(|t| write_log(t, &case.env)).collect();
    let files = logs
        .iter()
        .enumerate()
        .map(|(i, l)| FileDigest {
            name: log_name(i),
            sha256: sha256_hex(l.as_bytes()),
        })
        .collect();
    let digest = sha256_hex(logs.concat().as_bytes());
    let test_digest = sha256_hex(test.iter().map(|&i| logs[i].as_str()).collect::<String>().as_bytes());
    let manifest = Manifest {
        case: slug,
        n,
        seed,
        normal: half,
        spurious: half,
        relabeled,
        discarded,
        attempts: attempt,
        max_steps: case.max_steps,
        relabel_policy: "re-labeled runs count as normal; classes are paired by token count".into(),
        train,
        val,
        test,
        t_max,
        files,
        digest,
        test_digest,
    };
    Ok(Dataset { trajectories, manifest })
}

impl Dataset {
    /// Writes `manifest.json` and one log per trajectory under `logs/`.
    pub fn save(&self, dir: &Path, case: &CaseSpec) -> Result<(), DatasetError> {
        let logs = dir.join("logs");
        fs::create_dir_all(&logs)?;
        for (i, t) in self.trajectories.iter().enumerate() {
            fs::write(logs.join(log_name(i)), write_log(t, &case.env))?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    /// Reads a saved dataset back, checking every file digest.
    pub fn load(dir: &Path, case: &CaseSpec) -> Result<Dataset, DatasetError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.case != case.name.slug() {
            return Err(DatasetError::WrongCase {
                expected: case.name.slug().into(),
                found: manifest.case,
            });
        }
        let mut trajectories = Vec::with_capacity(manifest.files.len());
        for f in &manifest.files {
            let text = fs::read_to_string(dir.join("logs").join(&f.name))?;
            if sha256_hex(text.as_bytes()) != f.sha256 {
                return Err(DatasetError::Digest(f.name.clone()));
            }
            let t = parse_log(&text, &case.env).map_err(|source| DatasetError::Log {
                file: f.name.clone(),
                source,
            })?;
            trajectories.push(t);
        }
        Ok(Dataset { trajectories, manifest })
    }

    pub fn split(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.manifest.train,
            SplitName::Val => &self.manifest.val,
            SplitName::Test => &self.manifest.test,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Loads the case a manifest was built for.
pub fn case_of(dir: &Path) -> Result<CaseName, DatasetError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.case.parse().map_err(|_| DatasetError::WrongCase {
        expected: "a shipped case".into(),
        found: manifest.case,
    })
}
