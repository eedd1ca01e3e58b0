//! Place/transition nets with weighted arcs, optional place capacities and the
//! usual token game.
//!
//! Capacities are part of enabledness: a transition whose firing would push a
//! place above its capacity is simply not enabled.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlaceId(pub usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransitionId(pub usize);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PetriError {
    #[error("transition `{0}` is not enabled")]
    NotEnabled(String),
    #[error("firing `{transition}` would exceed the capacity of place `{place}`")]
    CapacityExceeded { transition: String, place: String },
    #[error("unknown place `{0}`")]
    UnknownPlace(String),
    #[error("unknown transition `{0}`")]
    UnknownTransition(String),
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("capacity of `{0}` must be at least 1")]
    ZeroCapacity(String),
    #[error("arc weight must be positive")]
    ZeroWeight,
    #[error("marking has {got} entries, net has {expected} places")]
    MarkingSize { expected: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Token counts, indexed by [`PlaceId`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Marking(pub Vec<u32>);

impl Marking {
    pub fn zeros(places: usize) -> Self {
        Marking(vec![0; places])
    }

    pub fn tokens(&self, p: PlaceId) -> u32 {
        self.0[p.0]
    }

    pub fn set(&mut self, p: PlaceId, tokens: u32) {
        self.0[p.0] = tokens;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|&t| t as u64).sum()
    }

    /// Places holding at least one token.
    pub fn support(&self) -> impl Iterator<Item = PlaceId> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &t)| t > 0)
            .map(|(i, _)| PlaceId(i))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PetriNet {
    places: Vec<String>,
    capacities: Vec<Option<u32>>,
    transitions: Vec<String>,
    pre: Vec<BTreeMap<PlaceId, u32>>,
    post: Vec<BTreeMap<PlaceId, u32>>,
    index: HashMap<String, Node>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Node {
    Place(PlaceId),
    Transition(TransitionId),
}

impl PetriNet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_place(
        &mut self,
        name: impl Into<String>,
        capacity: Option<u32>,
    ) -> Result<PlaceId, PetriError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PetriError::DuplicateName(name));
        }
        if capacity == Some(0) {
            return Err(PetriError::ZeroCapacity(name));
        }
        let id = PlaceId(self.places.len());
        self.index.insert(name.clone(), Node::Place(id));
        self.places.push(name);
        self.capacities.push(capacity);
        Ok(id)
    }

    pub fn add_transition(&mut self, name: impl Into<String>) -> Result<TransitionId, PetriError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PetriError::DuplicateName(name));
        }
        let id = TransitionId(self.transitions.len());
        self.index.insert(name.clone(), Node::Transition(id));
        self.transitions.push(name);
        self.pre.push(BTreeMap::new());
        self.post.push(BTreeMap::new());
        Ok(id)
    }

    /// Input arc `p -> t`. Repeated calls accumulate weight.
    pub fn add_input_arc(
        &mut self,
        p: PlaceId,
        t: TransitionId,
        weight: u32,
    ) -> Result<(), PetriError> {
        self.check_arc(p, t, weight)?;
        *self.pre[t.0].entry(p).or_insert(0) += weight;
        Ok(())
    }

    /// Output arc `t -> p`. Repeated calls accumulate weight.
    pub fn add_output_arc(
        &mut self,
        t: TransitionId,
        p: PlaceId,
        weight: u32,
    ) -> Result<(), PetriError> {
        self.check_arc(p, t, weight)?;
        *self.post[t.0].entry(p).or_insert(0) += weight;
        Ok(())
    }

    fn check_arc(&self, p: PlaceId, t: TransitionId, weight: u32) -> Result<(), PetriError> {
        if weight == 0 {
            return Err(PetriError::ZeroWeight);
        }
        if p.0 >= self.places.len() {
            return Err(PetriError::UnknownPlace(format!("#{}", p.0)));
        }
        if t.0 >= self.transitions.len() {
            return Err(PetriError::UnknownTransition(format!("#{}", t.0)));
        }
        Ok(())
    }

    pub fn place_count(&self) -> usize {
        self.places.len()
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn places(&self) -> impl Iterator<Item = PlaceId> {
        (0..self.places.len()).map(PlaceId)
    }

    pub fn transitions(&self) -> impl Iterator<Item = TransitionId> {
        (0..self.transitions.len()).map(TransitionId)
    }

    pub fn place_name(&self, p: PlaceId) -> &str {
        &self.places[p.0]
    }

    pub fn transition_name(&self, t: TransitionId) -> &str {
        &self.transitions[t.0]
    }

    pub fn place(&self, name: &str) -> Option<PlaceId> {
        match self.index.get(name) {
            Some(Node::Place(p)) => Some(*p),
            _ => None,
        }
    }

    pub fn transition(&self, name: &str) -> Option<TransitionId> {
        match self.index.get(name) {
            Some(Node::Transition(t)) => Some(*t),
            _ => None,
        }
    }

    pub fn capacity(&self, p: PlaceId) -> Option<u32> {
        self.capacities[p.0]
    }

    pub fn set_capacity(&mut self, p: PlaceId, capacity: Option<u32>) -> Result<(), PetriError> {
        if capacity == Some(0) {
            return Err(PetriError::ZeroCapacity(self.places[p.0].clone()));
        }
        self.capacities[p.0] = capacity;
        Ok(())
    }

    pub fn preset(&self, t: TransitionId) -> &BTreeMap<PlaceId, u32> {
        &self.pre[t.0]
    }

    pub fn postset(&self, t: TransitionId) -> &BTreeMap<PlaceId, u32> {
        &self.post[t.0]
    }

    /// Transitions with at least one arc out of `p`.
    pub fn output_transitions(&self, p: PlaceId) -> impl Iterator<Item = TransitionId> + '_ {
        self.transitions().filter(move |t| self.pre[t.0].contains_key(&p))
    }

    /// Incidence matrix `C[p][t] = post(t, p) - pre(p, t)`.
    pub fn incidence(&self) -> Vec<Vec<i64>> {
        let mut c = vec![vec![0i64; self.transitions.len()]; self.places.len()];
        for t in self.transitions() {
            for (p, &w) in &self.pre[t.0] {
                c[p.0][t.0] -= w as i64;
            }
            for (p, &w) in &self.post[t.0] {
                c[p.0][t.0] += w as i64;
            }
        }
        c
    }

    /// A marking respects every finite capacity.
    pub fn is_valid_marking(&self, m: &Marking) -> bool {
        m.0.len() == self.places.len()
            && self
                .capacities
                .iter()
                .zip(&m.0)
                .all(|(cap, &tok)| cap.is_none_or(|c| tok <= c))
    }

    fn check_marking(&self, m: &Marking) -> Result<(), PetriError> {
        if m.0.len() != self.places.len() {
            return Err(PetriError::MarkingSize {
                expected: self.places.len(),
                got: m.0.len(),
            });
        }
        Ok(())
    }

    fn has_tokens(&self, m: &Marking, t: TransitionId) -> bool {
        self.pre[t.0].iter().all(|(p, &w)| m.0[p.0] >= w)
    }

    /// First place whose capacity the firing of `t` would exceed, if any.
    fn capacity_violation(&self, m: &Marking, t: TransitionId) -> Option<PlaceId> {
        self.post[t.0].iter().find_map(|(&p, &w)| {
            let cap = self.capacities[p.0]?;
            let consumed = self.pre[t.0].get(&p).copied().unwrap_or(0);
            let after = (m.0[p.0] as u64).saturating_sub(consumed as u64) + w as u64;
            (after > cap as u64).then_some(p)
        })
    }

    pub fn is_enabled(&self, m: &Marking, t: TransitionId) -> bool {
        self.has_tokens(m, t) && self.capacity_violation(m, t).is_none()
    }

    pub fn enabled_transitions(&self, m: &Marking) -> BTreeSet<TransitionId> {
        self.transitions().filter(|&t| self.is_enabled(m, t)).collect()
    }

    pub fn is_deadlocked(&self, m: &Marking) -> bool {
        !self.transitions().any(|t| self.is_enabled(m, t))
    }

    pub fn fire(&self, m: &Marking, t: TransitionId) -> Result<Marking, PetriError> {
        self.check_marking(m)?;
        if t.0 >= self.transitions.len() {
            return Err(PetriError::UnknownTransition(format!("#{}", t.0)));
        }
        if !self.has_tokens(m, t) {
            return Err(PetriError::NotEnabled(self.transitions[t.0].clone()));
        }
        if let Some(p) = self.capacity_violation(m, t) {
            return Err(PetriError::CapacityExceeded {
                transition: self.transitions[t.0].clone(),
                place: self.places[p.0].clone(),
            });
        }
        let mut next = m.clone();
        for (p, &w) in &self.pre[t.0] {
            next.0[p.0] -= w;
        }
        for (p, &w) in &self.post[t.0] {
            next.0[p.0] += w;
        }
        Ok(next)
    }

    /// Parses the line-oriented net description format:
    ///
    /// ```text
    /// place <id> [capacity=<n>]
    /// transition <id>
    /// arc <place> -> <transition> [w]
    /// arc <transition> -> <place> [w]
    /// init <place> <tokens>
    /// ```
    ///
    /// `#` starts a comment. Places default to zero tokens.
    pub fn parse(text: &str) -> Result<(PetriNet, Marking), PetriError> {
        let mut net = PetriNet::new();
        let mut init: Vec<(PlaceId, u32)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| PetriError::Parse {
                line: lineno + 1,
                msg,
            };
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["place", name, rest @ ..] => {
                    let capacity = match rest {
                        [] => None,
                        [opt] => {
                            let n = opt
                                .strip_prefix("capacity=")
                                .ok_or_else(|| err(format!("unexpected `{opt}`")))?;
                            Some(n.parse().map_err(|_| err(format!("bad capacity `{n}`")))?)
                        }
                        _ => return Err(err("too many fields".into())),
                    };
                    net.add_place(*name, capacity)
                        .map_err(|e| err(e.to_string()))?;
                }
                ["transition", name] => {
                    net.add_transition(*name).map_err(|e| err(e.to_string()))?;
                }
                ["arc", from, "->", to, rest @ ..] => {
                    let weight = match rest {
                        [] => 1,
                        [w] => w.parse().map_err(|_| err(format!("bad weight `{w}`")))?,
                        _ => return Err(err("too many fields".into())),
                    };
                    match (net.index.get(*from).copied(), net.index.get(*to).copied()) {
                        (Some(Node::Place(p)), Some(Node::Transition(t))) => {
                            net.add_input_arc(p, t, weight)
                        }
                        (Some(Node::Transition(t)), Some(Node::Place(p))) => {
                            net.add_output_arc(t, p, weight)
                        }
                        (None, _) => return Err(err(format!("unknown node `{from}`"))),
                        (_, None) => return Err(err(format!("unknown node `{to}`"))),
                        _ => return Err(err("arc must connect a place and a transition".into())),
                    }
                    .map_err(|e| err(e.to_string()))?;
                }
                ["init", place, tokens] => {
                    let p = net
                        .place(place)
                        .ok_or_else(|| err(format!("unknown place `{place}`")))?;
                    let n = tokens
                        .parse()
                        .map_err(|_| err(format!("bad token count `{tokens}`")))?;
                    init.push((p, n));
                }
                _ => return Err(err(format!("cannot parse `{line}`"))),
            }
        }
        let mut m = Marking::zeros(net.place_count());
        for (p, n) in init {
            m.set(p, n);
        }
        Ok((net, m))
    }

    /// Writes the net back out in the format accepted by [`PetriNet::parse`].
    pub fn to_text(&self, m: &Marking) -> String {
        let mut out = String::new();
        for p in self.places() {
            match self.capacities[p.0] {
                Some(c) => out.push_str(&format!("place {} capacity={c}\n", self.places[p.0])),
                None => out.push_str(&format!("place {}\n", self.places[p.0])),
            }
        }
        for t in self.transitions() {
            out.push_str(&format!("transition {}\n", self.transitions[t.0]));
        }
        for t in self.transitions() {
            for (p, w) in &self.pre[t.0] {
                out.push_str(&format!(
                    "arc {} -> {} {w}\n",
                    self.places[p.0], self.transitions[t.0]
                ));
            }
            for (p, w) in &self.post[t.0] {
                out.push_str(&format!(
                    "arc {} -> {} {w}\n",
                    self.transitions[t.0], self.places[p.0]
                ));
            }
        }
        for p in m.support() {
            out.push_str(&format!("init {} {}\n", self.places[p.0], m.tokens(p)));
        }
        out
    }
}

impl fmt::Display for PetriNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PetriNet({} places, {} transitions)",
            self.places.len(),
            self.transitions.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain() -> (PetriNet, PlaceId, PlaceId, TransitionId) {
        let mut net = PetriNet::new();
        let p1 = net.add_place("p1", None).unwrap();
        let p2 = net.add_place("p2", None).unwrap();
        let t1 = net.add_transition("t1").unwrap();
        net.add_input_arc(p1, t1, 1).unwrap();
        net.add_output_arc(t1, p2, 1).unwrap();
        (net, p1, p2, t1)
    }

    #[test]
    fn single_enabled_transition() {
        let (net, _, _, t1) = chain();
        let m = Marking(vec![1, 0]);
        assert_eq!(net.enabled_transitions(&m), BTreeSet::from([t1]));
        assert!(!net.is_deadlocked(&m));
        assert!(net.enabled_transitions(&Marking(vec![0, 0])).is_empty());
        assert!(net.is_deadlocked(&Marking(vec![0, 0])));
    }

    #[test]
    fn unit_token_move() {
        let (net, _, _, t1) = chain();
        let m = net.fire(&Marking(vec![1, 0]), t1).unwrap();
        assert_eq!(m, Marking(vec![0, 1]));
        assert_eq!(
            net.fire(&m, t1),
            Err(PetriError::NotEnabled("t1".to_string()))
        );
    }

    #[test]
    fn capacity_blocks_enabledness_and_firing() {
        let (mut net, _, p2, t1) = chain();
        net.set_capacity(p2, Some(1)).unwrap();
        let m = Marking(vec![1, 1]);
        assert!(net.enabled_transitions(&m).is_empty());
        assert!(matches!(
            net.fire(&m, t1),
            Err(PetriError::CapacityExceeded { .. })
        ));
        assert_eq!(net.add_place("p3", Some(0)), Err(PetriError::ZeroCapacity("p3".into())));
    }

    #[test]
    fn self_loop_respects_capacity_after_consumption() {
        let mut net = PetriNet::new();
        let p = net.add_place("p", Some(1)).unwrap();
        let t = net.add_transition("stay").unwrap();
        net.add_input_arc(p, t, 1).unwrap();
        net.add_output_arc(t, p, 1).unwrap();
        assert_eq!(net.fire(&Marking(vec![1]), t).unwrap(), Marking(vec![1]));
    }

    #[test]
    fn text_format_round_trips() {
        let text = "\
# two-place chain
place a capacity=2
place b
transition go
arc a -> go
arc go -> b 2
init a 2
";
        let (net, m) = PetriNet::parse(text).unwrap();
        assert_eq!(m, Marking(vec![2, 0]));
        let t = net.transition("go").unwrap();
        assert_eq!(net.postset(t).values().copied().collect::<Vec<_>>(), vec![2]);
        let (again, m2) = PetriNet::parse(&net.to_text(&m)).unwrap();
        assert_eq!(again, net);
        assert_eq!(m2, m);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = PetriNet::parse("place a\narc a -> nowhere\n").unwrap_err();
        assert_eq!(
            err,
            PetriError::Parse {
                line: 2,
                msg: "unknown node `nowhere`".into()
            }
        );
        assert!(matches!(
            PetriNet::parse("place a\nplace b\narc a -> b\n"),
            Err(PetriError::Parse { line: 3, .. })
        ));
    }

    /// Random net description: (capacities, pre arcs, post arcs) over `n` places
    /// and `n` transitions.
    #[derive(Debug, Clone)]
    struct RandomNet {
        caps: Vec<Option<u32>>,
        pre: Vec<Vec<u32>>,
        post: Vec<Vec<u32>>,
        marking: Vec<u32>,
    }

    fn random_net(n: usize) -> impl Strategy<Value = RandomNet> {
        (
            proptest::collection::vec(proptest::option::of(1u32..4), n),
            proptest::collection::vec(proptest::collection::vec(0u32..3, n), n),
            proptest::collection::vec(proptest::collection::vec(0u32..3, n), n),
            proptest::collection::vec(0u32..3, n),
        )
            .prop_map(|(caps, pre, post, marking)| RandomNet {
                // only valid markings: tokens within finite capacities
                marking: marking
                    .iter()
                    .zip(&caps)
                    .map(|(&m, c)| c.map_or(m, |c| m.min(c)))
                    .collect(),
                caps,
                pre,
                post,
            })
    }

    fn build(r: &RandomNet) -> PetriNet {
        let mut net = PetriNet::new();
        for (i, c) in r.caps.iter().enumerate() {
            net.add_place(format!("p{i}"), *c).unwrap();
        }
        for t in 0..r.pre.len() {
            let tid = net.add_transition(format!("t{t}")).unwrap();
            for p in 0..r.caps.len() {
                if r.pre[t][p] > 0 {
                    net.add_input_arc(PlaceId(p), tid, r.pre[t][p]).unwrap();
                }
                if r.post[t][p] > 0 {
                    net.add_output_arc(tid, PlaceId(p), r.post[t][p]).unwrap();
                }
            }
        }
        net
    }

    /// The firing rule written straight from the definition over the raw arrays.
    fn brute_enabled(r: &RandomNet, m: &[u32]) -> BTreeSet<TransitionId> {
        (0..r.pre.len())
            .filter(|&t| {
                (0..m.len()).all(|p| m[p] >= r.pre[t][p])
                    && (0..m.len()).all(|p| {
                        let after = m[p] - r.pre[t][p] + r.post[t][p];
                        r.caps[p].is_none_or(|c| after <= c)
                    })
            })
            .map(TransitionId)
            .collect()
    }

    proptest! {
        #[test]
        fn enabled_matches_brute_force(r in random_net(5)) {
            let net = build(&r);
            let m = Marking(r.marking.clone());
            let enabled = net.enabled_transitions(&m);
            prop_assert_eq!(&enabled, &brute_enabled(&r, &r.marking));
            prop_assert_eq!(net.is_deadlocked(&m), enabled.is_empty());
        }

        #[test]
        fn firing_follows_state_equation(r in random_net(5), choices in proptest::collection::vec(0usize..100, 0..20)) {
            let net = build(&r);
            let mut m = Marking(r.marking.clone());
            let m0 = m.clone();
            let mut counts = vec![0i64; r.pre.len()];
            for c in choices {
                let enabled: Vec<_> = brute_enabled(&r, &m.0).into_iter().collect();
                if enabled.is_empty() {
                    break;
                }
                let t = enabled[c % enabled.len()];
                let before = m.clone();
                m = net.fire(&m, t).unwrap();
                // single step: difference equals the incidence column built from the arrays
                for p in 0..r.caps.len() {
                    let col = r.post[t.0][p] as i64 - r.pre[t.0][p] as i64;
                    prop_assert_eq!(m.0[p] as i64 - before.0[p] as i64, col);
                }
                counts[t.0] += 1;
            }
            let c = net.incidence();
            for p in 0..r.caps.len() {
                let expected = m0.0[p] as i64 + (0..counts.len()).map(|t| c[p][t] * counts[t]).sum::<i64>();
                prop_assert_eq!(m.0[p] as i64, expected);
            }
        }

        #[test]
        fn fire_on_enabled_never_fails(r in random_net(5)) {
            let net = build(&r);
            let m = Marking(r.marking.clone());
            for t in net.enabled_transitions(&m) {
                let next = net.fire(&m, t);
                prop_assert!(next.is_ok());
                let next = next.unwrap();
                if net.is_valid_marking(&m) {
                    prop_assert!(net.is_valid_marking(&next));
                }
            }
        }
    }
}
