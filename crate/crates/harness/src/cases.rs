//! The shipped anomaly cases: a formula pair plus a scenario map each.

use std::fmt;
use std::str::FromStr;

use nwn_core::environment::EnvError;
use nwn_core::ltl::{compile_to_spec_net, parse_ltl, Formula, LtlError, SpecNet};
use nwn_core::timing::{PathTable, TimingError};
use nwn_core::Environment;
use thiserror::Error;

/// Longer runs are discarded. Under a uniform policy the slowest normal runs
/// are several times longer than spurious ones, which would let sequence length
/// alone separate the classes.
pub const CASE_MAX_STEPS: usize = 40;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CaseName {
    ForbiddenZone,
    Sequentiality,
    MutualExclusion,
    ConditionalAccess,
    Simultaneity,
    Recurrency,
    LowLevel,
}

impl CaseName {
    pub const ALL: [CaseName; 7] = [
        CaseName::ForbiddenZone,
        CaseName::Sequentiality,
        CaseName::MutualExclusion,
        CaseName::ConditionalAccess,
        CaseName::Simultaneity,
        CaseName::Recurrency,
        CaseName::LowLevel,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            CaseName::ForbiddenZone => "forbidden-zone",
            CaseName::Sequentiality => "sequentiality",
            CaseName::MutualExclusion => "mutual-exclusion",
            CaseName::ConditionalAccess => "conditional-access",
            CaseName::Simultaneity => "simultaneity",
            CaseName::Recurrency => "recurrency",
            CaseName::LowLevel => "low-level",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            CaseName::ForbiddenZone => "Forbidden Zone",
            CaseName::Sequentiality => "Sequentiality",
            CaseName::MutualExclusion => "Mutual Exclusion",
            CaseName::ConditionalAccess => "Conditional Access",
            CaseName::Simultaneity => "Simultaneity",
            CaseName::Recurrency => "Recurrency",
            CaseName::LowLevel => "Low-Level",
        }
    }

    fn map(self) -> &'static str {
        match self {
            CaseName::ForbiddenZone => include_str!("../cases/forbidden_zone.toml"),
            CaseName::Sequentiality => include_str!("../cases/sequentiality.toml"),
            CaseName::MutualExclusion => include_str!("../cases/mutual_exclusion.toml"),
            CaseName::ConditionalAccess => include_str!("../cases/conditional_access.toml"),
            CaseName::Simultaneity => include_str!("../cases/simultaneity.toml"),
            CaseName::Recurrency => include_str!("../cases/recurrency.toml"),
            CaseName::LowLevel => include_str!("../cases/low_level.toml"),
        }
    }

    /// Normal formula, and the spurious one for high-level cases.
    fn formulas(self) -> (&'static str, Option<&'static str>) {
        match self {
            CaseName::ForbiddenZone => (
                "◊(y8 ∧ ◊(y7 ∧ ◊y5)) ∧ □(¬y10 ∧ ¬y9 ∧ ¬y6)",
                Some("◊(y8 ∧ ◊(y7 ∧ ◊y5))"),
            ),
            CaseName::Sequentiality => (
                "◊(y1 ∧ ◊(y2 ∧ ◊(y3 ∧ ◊(y4 ∧ ◊y5))))",
                Some("◊(y1 ∧ ◊(y4 ∧ ◊(y3 ∧ ◊(y2 ∧ ◊y5))))"),
            ),
            CaseName::MutualExclusion => (
                "((◊y1 ∧ ◊y2 ∧ □(¬y3 ∧ ¬y4)) ∨ (◊y3 ∧ ◊y4 ∧ □(¬y1 ∧ ¬y2))) ∧ ◊y5",
                Some("(◊y1 ∨ ◊y3) ∧ (◊y2 ∨ ◊y4) ∧ ◊y5"),
            ),
            CaseName::ConditionalAccess => (
                "◊(y1 ∧ ◊(y2 ∧ ◊(y6 ∧ ◊(y7 ∧ ◊y8)))) ∧ □((y6 ∨ y7) → (y1 ∧ y2))",
                Some("◊y1 ∧ ◊y2 ∧ ◊y6 ∧ ◊y7 ∧ ◊y8"),
            ),
            CaseName::Simultaneity => ("◊(y3 ∧ y4 ∧ y5) ∧ ◊y6", Some("◊y3 ∧ ◊y4 ∧ ◊y5 ∧ ◊y6")),
            // Three conjoined copies of one chain collapse to a single chain,
            // so the repetitions are nested instead.
            CaseName::Recurrency => (
                "◊(y1 ∧ ◊(y2 ∧ ◊(y3 ∧ ◊(y1 ∧ ◊(y2 ∧ ◊(y3 ∧ ◊(y1 ∧ ◊(y2 ∧ ◊y3))))))))",
                Some("◊(y1 ∧ ◊(y2 ∧ ◊(y3 ∧ ◊(y1 ∧ ◊(y2 ∧ ◊(y3 ∧ ◊(y3 ∧ ◊(y2 ∧ ◊y1))))))))"),
            ),
            CaseName::LowLevel => ("◊(y1 ∧ ◊y2) ∧ ◊(y3 ∧ ◊y4)", None),
        }
    }

    /// Step cap for generated runs.
    pub fn max_steps(self) -> usize {
        CASE_MAX_STEPS
    }

    pub fn load(self) -> Result<CaseSpec, CaseError> {
        CaseSpec::new(self, Environment::from_toml(self.map())?)
    }
}

impl fmt::Display for CaseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown case {0:?}")]
pub struct UnknownCase(pub String);

impl FromStr for CaseName {
    type Err = UnknownCase;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('_', "-").to_ascii_lowercase();
        CaseName::ALL
            .into_iter()
            .find(|c| c.slug() == norm)
            .ok_or_else(|| UnknownCase(s.to_owned()))
    }
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("scenario: {0}")]
    Env(#[from] EnvError),
    #[error("formula: {0}")]
    Ltl(#[from] LtlError),
    #[error("paths: {0}")]
    Timing(#[from] TimingError),
}

/// Everything needed to generate a case's trajectories.
#[derive(Debug, Clone)]
pub struct CaseSpec {
    pub name: CaseName,
    pub env: Environment,
    pub normal: Formula,
    pub spurious: Option<Formula>,
    pub normal_net: SpecNet,
    pub spurious_net: Option<SpecNet>,
    pub paths: PathTable,
    /// Runs longer than this many timesteps are discarded.
    pub max_steps: usize,
}

impl CaseSpec {
    /// Checks both formulas against the map and compiles them. Use this to
    /// run a case on a different scenario file.
    pub fn new(name: CaseName, env: Environment) -> Result<Self, CaseError> {
        let n_reg = env.n_reg;
        let (normal_text, spurious_text) = name.formulas();
        let normal = parse_ltl(normal_text, n_reg)?;
        let spurious = spurious_text.map(|t| parse_ltl(t, n_reg)).transpose()?;
        let normal_net = compile_to_spec_net(&normal)?;
        let spurious_net = spurious.as_ref().map(compile_to_spec_net).transpose()?;
        let paths = PathTable::new(&env)?;
        Ok(CaseSpec {
            name,
            env,
            normal,
            spurious,
            normal_net,
            spurious_net,
            paths,
            max_steps: name.max_steps(),
        })
    }

    pub fn team(&self) -> usize {
        self.env.team_size()
    }

    pub fn places(&self) -> usize {
        self.env.place_count()
    }

    pub fn n_reg(&self) -> usize {
        self.env.n_reg as usize
    }
}
