//! Sets of atomic propositions `y_1 .. y_64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ATOMS: u32 = 64;

/// A set of atomic propositions stored as a bitmask; bit `i - 1` is `y_i`.
#[derive(Copy, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct LabelSet(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("atom index {0} outside 1..={MAX_ATOMS}")]
    OutOfRange(u32),
    #[error("cannot parse label `{0}`")]
    Syntax(String),
}

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn from_bits(bits: u64) -> Self {
        LabelSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn single(atom: u32) -> Self {
        assert!((1..=MAX_ATOMS).contains(&atom), "atom y{atom} out of range");
        LabelSet(1 << (atom - 1))
    }

    pub fn from_atoms(atoms: impl IntoIterator<Item = u32>) -> Result<Self, LabelError> {
        let mut s = LabelSet::EMPTY;
        for a in atoms {
            if !(1..=MAX_ATOMS).contains(&a) {
                return Err(LabelError::OutOfRange(a));
            }
            s.0 |= 1 << (a - 1);
        }
        Ok(s)
    }

    pub fn contains(self, atom: u32) -> bool {
        (1..=MAX_ATOMS).contains(&atom) && self.0 & (1 << (atom - 1)) != 0
    }

    pub fn insert(&mut self, atom: u32) {
        *self = self.union(LabelSet::single(atom));
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    /// Ascending atom indices.
    pub fn atoms(self) -> impl Iterator<Item = u32> {
        (1..=MAX_ATOMS).filter(move |&a| self.contains(a))
    }

    /// Largest atom index present, 0 when empty.
    pub fn max_atom(self) -> u32 {
        64 - self.0.leading_zeros()
    }
}

impl TryFrom<Vec<u32>> for LabelSet {
    type Error = LabelError;
    fn try_from(v: Vec<u32>) -> Result<Self, Self::Error> {
        LabelSet::from_atoms(v)
    }
}

impl From<LabelSet> for Vec<u32> {
    fn from(s: LabelSet) -> Vec<u32> {
        s.atoms().collect()
    }
}

/// `y1|y4`, or `-` for the empty set.
impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        for (i, a) in self.atoms().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "y{a}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

impl FromStr for LabelSet {
    type Err = LabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "-" {
            return Ok(LabelSet::EMPTY);
        }
        let atoms = s
            .split('|')
            .map(|part| {
                part.strip_prefix('y')
                    .and_then(|n| n.parse::<u32>().ok())
                    .ok_or_else(|| LabelError::Syntax(part.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        LabelSet::from_atoms(atoms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_and_parse() {
        let s = LabelSet::from_atoms([4, 1]).unwrap();
        assert_eq!(s.to_string(), "y1|y4");
        assert_eq!("y1|y4".parse::<LabelSet>().unwrap(), s);
        assert_eq!("-".parse::<LabelSet>().unwrap(), LabelSet::EMPTY);
        assert_eq!(LabelSet::EMPTY.to_string(), "-");
        assert!("y0".parse::<LabelSet>().is_err());
        assert!("x1".parse::<LabelSet>().is_err());
        assert_eq!(s.max_atom(), 4);
        assert_eq!(LabelSet::EMPTY.max_atom(), 0);
    }
}
