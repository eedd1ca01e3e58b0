//! Petri nets, co-safe LTL and the Nets-within-Nets trajectory generator,
//! together with the action-token encoding used by the classifier.

pub mod encoding;
pub mod environment;
pub mod labels;
pub mod ltl;
pub mod nwn;
pub mod petri;
pub mod timing;

pub use environment::{Environment, RobotId};
pub use labels::LabelSet;
pub use nwn::{Action, Label, Trajectory};
pub use petri::{Marking, PetriNet, PlaceId, TransitionId};
