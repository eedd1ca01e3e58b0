//! Translation of co-safe formulas into specification nets.
//!
//! The formula is put in negation normal form and unfolded one observation at
//! a time: reading an observation turns the current obligation into a Boolean
//! combination of obligations on the remainder of the trace (`F a` on a
//! non-empty remainder, `G a` on a possibly empty one). A state is the truth
//! table of that combination over all temporal subformulas, which makes the
//! construction deterministic from the start. The state graph is cut at the
//! first accepting state, states that cannot reach acceptance are dropped, and
//! the rest is minimised with Moore refinement. Surviving states become places,
//! acceptance becomes `p_end`, and edges become transitions guarded by the set
//! of observations that take them. Self-loop observations are kept as a per
//! place "stay" guard; observations leading nowhere are blocked.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use super::{Formula, LtlError, Nnf};
use crate::labels::LabelSet;
use crate::petri::{Marking, PetriNet, PlaceId, TransitionId};

/// Upper bound on `letters * 2^obligations` explored per state.
const MAX_WORK: usize = 1 << 24;

/// A Boolean condition on the team observation, restricted to the atoms the
/// formula mentions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Guard {
    atoms: Vec<u32>,
    letters: Vec<bool>,
}

impl Guard {
    fn empty(atoms: &[u32]) -> Self {
        Guard {
            atoms: atoms.to_vec(),
            letters: vec![false; 1 << atoms.len()],
        }
    }

    pub fn holds(&self, obs: LabelSet) -> bool {
        self.letters[project(&self.atoms, obs)]
    }

    pub fn is_empty(&self) -> bool {
        !self.letters.iter().any(|&b| b)
    }

    /// Observations over the formula's atoms accepted by this guard.
    pub fn satisfying(&self) -> Vec<LabelSet> {
        (0..self.letters.len())
            .filter(|&l| self.letters[l])
            .map(|l| letter_obs(&self.atoms, l))
            .collect()
    }

    /// Prime implicants chosen greedily to cover the accepted letters.
    fn implicants(&self) -> Vec<(usize, usize)> {
        let minterms: Vec<usize> = (0..self.letters.len()).filter(|&l| self.letters[l]).collect();
        // (value, dont-care mask)
        let mut layer: Vec<(usize, usize)> = minterms.iter().map(|&m| (m, 0)).collect();
        let mut primes = Vec::new();
        while !layer.is_empty() {
            let mut used = vec![false; layer.len()];
            let mut next = Vec::new();
            for i in 0..layer.len() {
                for j in i + 1..layer.len() {
                    let (a, b) = (layer[i], layer[j]);
                    let diff = a.0 ^ b.0;
                    if a.1 == b.1 && diff.count_ones() == 1 {
                        used[i] = true;
                        used[j] = true;
                        let merged = (a.0 & !diff, a.1 | diff);
                        if !next.contains(&merged) {
                            next.push(merged);
                        }
                    }
                }
            }
            for (i, imp) in layer.iter().enumerate() {
                if !used[i] && !primes.contains(imp) {
                    primes.push(*imp);
                }
            }
            layer = next;
        }
        let covers = |imp: &(usize, usize), m: usize| m & !imp.1 == imp.0;
        let mut uncovered = minterms;
        let mut chosen = Vec::new();
        while !uncovered.is_empty() {
            let best = primes
                .iter()
                .max_by_key(|imp| {
                    (
                        uncovered.iter().filter(|&&m| covers(imp, m)).count(),
                        imp.1.count_ones(),
                    )
                })
                .copied()
                .expect("every minterm is covered by some prime");
            uncovered.retain(|&m| !covers(&best, m));
            chosen.push(best);
        }
        chosen
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let imps = self.implicants();
        if imps.is_empty() {
            return f.write_str("false");
        }
        for (n, (value, mask)) in imps.iter().enumerate() {
            if n > 0 {
                f.write_str(" | ")?;
            }
            let lits: Vec<String> = self
                .atoms
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) == 0)
                .map(|(i, a)| {
                    if value & (1 << i) != 0 {
                        format!("y{a}")
                    } else {
                        format!("!y{a}")
                    }
                })
                .collect();
            if lits.is_empty() {
                f.write_str("true")?;
            } else {
                f.write_str(&lits.join(" & "))?;
            }
        }
        Ok(())
    }
}

fn project(atoms: &[u32], obs: LabelSet) -> usize {
    atoms
        .iter()
        .enumerate()
        .filter(|(_, &a)| obs.contains(a))
        .fold(0, |acc, (i, _)| acc | (1 << i))
}

fn letter_obs(atoms: &[u32], letter: usize) -> LabelSet {
    LabelSet::from_atoms(
        atoms
            .iter()
            .enumerate()
            .filter(|(i, _)| letter & (1 << i) != 0)
            .map(|(_, &a)| a),
    )
    .expect("atoms are in range")
}

/// Outcome of reading one observation in a specification place.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SpecMove {
    Stay,
    Fire(TransitionId),
}

/// Specification net compiled from a co-safe formula. Exactly one token moves
/// from `start` towards `p_end`.
#[derive(Clone, Debug)]
pub struct SpecNet {
    pub net: PetriNet,
    pub initial: Marking,
    pub start: PlaceId,
    pub p_end: PlaceId,
    formula: Formula,
    atoms: Vec<u32>,
    guards: Vec<Guard>,
    stay: Vec<Guard>,
    /// `moves[place][letter]`.
    moves: Vec<Vec<Option<SpecMove>>>,
}

impl SpecNet {
    pub fn formula(&self) -> &Formula {
        &self.formula
    }

    /// Atoms the formula depends on, ascending.
    pub fn atoms(&self) -> &[u32] {
        &self.atoms
    }

    pub fn guard(&self, t: TransitionId) -> &Guard {
        &self.guards[t.0]
    }

    pub fn stay_guard(&self, p: PlaceId) -> &Guard {
        &self.stay[p.0]
    }

    /// What the specification does when the team observes `obs` while the
    /// mission token sits in `at`. `None` means the observation is forbidden.
    pub fn step(&self, at: PlaceId, obs: LabelSet) -> Option<SpecMove> {
        self.moves[at.0][project(&self.atoms, obs)]
    }

    /// The place reached by [`SpecMove`] from `at`.
    pub fn target(&self, at: PlaceId, mv: SpecMove) -> PlaceId {
        match mv {
            SpecMove::Stay => at,
            SpecMove::Fire(t) => *self
                .net
                .postset(t)
                .keys()
                .next()
                .expect("spec transitions have one output place"),
        }
    }

    /// Index of the observation after which `p_end` becomes marked, if the
    /// trace is neither blocked before nor too short.
    pub fn accepting_index(&self, trace: &[LabelSet]) -> Option<usize> {
        let mut at = self.start;
        for (i, &obs) in trace.iter().enumerate() {
            at = self.target(at, self.step(at, obs)?);
            if at == self.p_end {
                return Some(i);
            }
        }
        None
    }

    pub fn accepts(&self, trace: &[LabelSet]) -> bool {
        self.accepting_index(trace).is_some()
    }

    /// Human-readable listing of places and guarded transitions.
    pub fn describe(&self) -> String {
        let mut out = format!("specification net for {}\n", self.formula);
        for p in self.net.places() {
            let mark = if p == self.start { " (initial)" } else { "" };
            out.push_str(&format!("  place {}{mark}", self.net.place_name(p)));
            if p != self.p_end {
                out.push_str(&format!("  stay when [{}]", self.stay[p.0]));
            }
            out.push('\n');
        }
        for t in self.net.transitions() {
            let from = self.net.preset(t).keys().next().unwrap();
            let to = self.net.postset(t).keys().next().unwrap();
            out.push_str(&format!(
                "  {} : {} -> {} when [{}]\n",
                self.net.transition_name(t),
                self.net.place_name(*from),
                self.net.place_name(*to),
                self.guards[t.0]
            ));
        }
        out
    }
}

type Table = Vec<u64>;

struct Unfolder {
    atoms: Vec<u32>,
    /// (formula, weak); weak obligations are vacuously met by an empty remainder.
    obligations: Vec<(Nnf, bool)>,
    index: HashMap<(Nnf, bool), usize>,
    bits: usize,
}

impl Unfolder {
    fn words(&self) -> usize {
        self.bits.div_ceil(64)
    }

    fn constant(&self, v: bool) -> Table {
        let mut t = vec![if v { u64::MAX } else { 0 }; self.words()];
        if v && self.bits < 64 {
            t[0] = (1u64 << self.bits) - 1;
        }
        t
    }

    fn var(&self, j: usize) -> Table {
        let mut t = vec![0u64; self.words()];
        for b in 0..self.bits {
            if b & (1 << j) != 0 {
                t[b / 64] |= 1 << (b % 64);
            }
        }
        t
    }

    fn collect(&mut self, f: &Nnf) {
        match f {
            Nnf::Lit { .. } => {}
            Nnf::And(a, b) | Nnf::Or(a, b) => {
                self.collect(a);
                self.collect(b);
            }
            Nnf::Eventually(a) => {
                self.add(f.clone(), false);
                self.collect(a);
            }
            Nnf::Always(a) => {
                self.add(f.clone(), true);
                self.collect(a);
            }
        }
    }

    fn add(&mut self, f: Nnf, weak: bool) -> usize {
        let key = (f, weak);
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.obligations.len();
        self.obligations.push(key.clone());
        self.index.insert(key, i);
        i
    }

    /// Obligation left on the remainder after reading `obs` at the current position.
    fn delta(&self, f: &Nnf, obs: LabelSet, vars: &[Table]) -> Table {
        match f {
            Nnf::Lit { atom, positive } => self.constant(obs.contains(*atom) == *positive),
            Nnf::And(a, b) => and(self.delta(a, obs, vars), &self.delta(b, obs, vars)),
            Nnf::Or(a, b) => or(self.delta(a, obs, vars), &self.delta(b, obs, vars)),
            Nnf::Eventually(a) => {
                let j = self.index[&(f.clone(), false)];
                or(self.delta(a, obs, vars), &vars[j])
            }
            Nnf::Always(a) => {
                let j = self.index[&(f.clone(), true)];
                and(self.delta(a, obs, vars), &vars[j])
            }
        }
    }
}

fn and(mut a: Table, b: &Table) -> Table {
    a.iter_mut().zip(b).for_each(|(x, y)| *x &= y);
    a
}

fn or(mut a: Table, b: &Table) -> Table {
    a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
    a
}

fn bit(t: &Table, b: usize) -> bool {
    t[b / 64] & (1 << (b % 64)) != 0
}

/// Compiles a formula of the supported co-safe fragment.
///
/// Fails with [`LtlError::UnsupportedFragment`] when `G` ranges over temporal
/// subformulas (or the formula is too large to unfold) and with
/// [`LtlError::NonCosafe`] when no finite trace can witness it.
pub fn compile_to_spec_net(f: &Formula) -> Result<SpecNet, LtlError> {
    let nnf = Nnf::from_formula(f);
    nnf.check_fragment()?;
    nnf.check_cosafe()?;

    let atoms: Vec<u32> = f.atoms().atoms().collect();
    let mut u = Unfolder {
        atoms: atoms.clone(),
        obligations: Vec::new(),
        index: HashMap::new(),
        bits: 0,
    };
    let root = u.add(nnf.clone(), false);
    u.collect(&nnf);
    let k = u.obligations.len();
    let letters = 1usize << atoms.len();
    if k > 20 || letters.saturating_mul(1 << k) > MAX_WORK {
        return Err(LtlError::UnsupportedFragment(format!(
            "{} atoms and {k} temporal obligations are too many to unfold",
            atoms.len()
        )));
    }
    u.bits = 1 << k;
    let vars: Vec<Table> = (0..k).map(|j| u.var(j)).collect();
    let accept_assignment: usize = u
        .obligations
        .iter()
        .enumerate()
        .filter(|(_, (_, weak))| *weak)
        .map(|(j, _)| 1 << j)
        .sum();

    // For each letter, the assignment of current obligations induced by every
    // assignment of next-step obligations.
    let substitution: Vec<Vec<u32>> = (0..letters)
        .map(|l| {
            let obs = letter_obs(&u.atoms, l);
            let deltas: Vec<Table> = u
                .obligations
                .iter()
                .map(|(g, _)| u.delta(g, obs, &vars))
                .collect();
            (0..u.bits)
                .map(|b| {
                    deltas
                        .iter()
                        .enumerate()
                        .filter(|(_, d)| bit(d, b))
                        .fold(0u32, |acc, (j, _)| acc | (1 << j))
                })
                .collect()
        })
        .collect();

    let mut tables: Vec<Table> = vec![vars[root].clone()];
    let mut ids: HashMap<Table, usize> = HashMap::from([(vars[root].clone(), 0)]);
    let mut accepting: Vec<bool> = vec![false];
    let mut next: Vec<Vec<usize>> = vec![Vec::new()];
    let mut queue = VecDeque::from([0usize]);
    while let Some(s) = queue.pop_front() {
        if accepting[s] {
            continue;
        }
        let mut row = Vec::with_capacity(letters);
        for sub in &substitution {
            let mut t = vec![0u64; u.words()];
            for (b, &a) in sub.iter().enumerate() {
                if bit(&tables[s], a as usize) {
                    t[b / 64] |= 1 << (b % 64);
                }
            }
            let id = match ids.get(&t) {
                Some(&id) => id,
                None => {
                    let id = tables.len();
                    accepting.push(bit(&t, accept_assignment));
                    ids.insert(t.clone(), id);
                    tables.push(t);
                    next.push(Vec::new());
                    queue.push_back(id);
                    id
                }
            };
            row.push(id);
        }
        next[s] = row;
    }
    let n = tables.len();

    // Live = can still reach acceptance.
    let mut live = accepting.clone();
    loop {
        let mut changed = false;
        for s in 0..n {
            if !live[s] && next[s].iter().any(|&t| live[t]) {
                live[s] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    if !live[0] {
        return Err(LtlError::NonCosafe("no finite trace satisfies the formula".into()));
    }

    // Moore refinement. Class 0 = accepting sink, class 1 = dead sink.
    const ACC: usize = 0;
    const DEAD: usize = 1;
    let sink = |s: usize| {
        if accepting[s] {
            Some(ACC)
        } else if !live[s] {
            Some(DEAD)
        } else {
            None
        }
    };
    let mut class: Vec<usize> = (0..n).map(|s| sink(s).unwrap_or(2)).collect();
    let mut count = class.iter().max().map_or(0, |m| m + 1);
    loop {
        let mut sigs: BTreeMap<(usize, Vec<usize>), usize> = BTreeMap::new();
        let mut order: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut refined = vec![0usize; n];
        for s in 0..n {
            if let Some(c) = sink(s) {
                refined[s] = c;
                continue;
            }
            let sig = (class[s], next[s].iter().map(|&t| class[t]).collect::<Vec<_>>());
            let id = match sigs.get(&sig) {
                Some(&id) => id,
                None => {
                    let id = 2 + order.len();
                    sigs.insert(sig.clone(), id);
                    order.push(sig);
                    id
                }
            };
            refined[s] = id;
        }
        let new_count = 2 + order.len();
        class = refined;
        if new_count == count {
            break;
        }
        count = new_count;
    }

    // Canonical place numbering: breadth-first from the initial class.
    let rep: HashMap<usize, usize> = (0..n).rev().map(|s| (class[s], s)).collect();
    let mut place_of: HashMap<usize, usize> = HashMap::new();
    let mut ordered = Vec::new();
    let mut bfs = VecDeque::from([class[0]]);
    place_of.insert(class[0], 0);
    ordered.push(class[0]);
    while let Some(c) = bfs.pop_front() {
        if c == ACC {
            continue;
        }
        for &t in &next[rep[&c]] {
            let tc = class[t];
            if tc == DEAD || tc == ACC || place_of.contains_key(&tc) {
                continue;
            }
            place_of.insert(tc, ordered.len());
            ordered.push(tc);
            bfs.push_back(tc);
        }
    }

    let mut net = PetriNet::new();
    let mut place_ids = Vec::new();
    for i in 0..ordered.len() {
        place_ids.push(net.add_place(format!("q{i}"), Some(1)).expect("fresh name"));
    }
    let p_end = net.add_place("p_end", Some(1)).expect("fresh name");
    place_of.insert(ACC, ordered.len());
    place_ids.push(p_end);

    let mut stay = vec![Guard::empty(&atoms); place_ids.len()];
    let mut guards: Vec<Guard> = Vec::new();
    let mut edge_ids: BTreeMap<(usize, usize), TransitionId> = BTreeMap::new();
    let mut moves = vec![vec![None; letters]; place_ids.len()];
    for (i, &c) in ordered.iter().enumerate() {
        for (l, &t) in next[rep[&c]].iter().enumerate() {
            let tc = class[t];
            if tc == DEAD {
                continue;
            }
            let j = place_of[&tc];
            if j == i {
                stay[i].letters[l] = true;
                moves[i][l] = Some(SpecMove::Stay);
                continue;
            }
            let tid = *edge_ids.entry((i, j)).or_insert_with(|| {
                let name = if tc == ACC {
                    format!("t_q{i}_end")
                } else {
                    format!("t_q{i}_q{j}")
                };
                let tid = net.add_transition(name).expect("fresh name");
                net.add_input_arc(place_ids[i], tid, 1).expect("valid arc");
                net.add_output_arc(tid, place_ids[j], 1).expect("valid arc");
                guards.push(Guard::empty(&atoms));
                tid
            });
            guards[tid.0].letters[l] = true;
            moves[i][l] = Some(SpecMove::Fire(tid));
        }
    }

    let mut initial = Marking::zeros(net.place_count());
    initial.set(place_ids[0], 1);
    Ok(SpecNet {
        net,
        initial,
        start: place_ids[0],
        p_end,
        formula: f.clone(),
        atoms,
        guards,
        stay,
        moves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltl::eval::tests::{all_traces, naive};
    use crate::ltl::{eval_finite_trace, parse_ltl};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(atoms: &[u32]) -> LabelSet {
        LabelSet::from_atoms(atoms.iter().copied()).unwrap()
    }

    fn compile(text: &str) -> SpecNet {
        compile_to_spec_net(&parse_ltl(text, 10).unwrap()).unwrap()
    }

    /// Shortest prefix satisfying the formula, by brute force over prefixes.
    fn first_satisfying_prefix(f: &Formula, tr: &[LabelSet]) -> Option<usize> {
        (1..=tr.len()).find(|&n| naive(f, &tr[..n], 0)).map(|n| n - 1)
    }

    #[test]
    fn single_eventuality_is_two_places() {
        let s = compile("F y1");
        assert_eq!(s.net.place_count(), 2);
        assert_eq!(s.net.transition_count(), 1);
        let t = TransitionId(0);
        assert_eq!(s.guard(t).to_string(), "y1");
        assert_eq!(s.net.preset(t).keys().next(), Some(&s.start));
        assert_eq!(s.net.postset(t).keys().next(), Some(&s.p_end));
        assert_eq!(s.net.output_transitions(s.p_end).count(), 0);
        assert_eq!(s.stay_guard(s.start).to_string(), "!y1");
    }

    #[test]
    fn ordered_mission_is_a_four_place_chain() {
        let s = compile("F (y1 & F (y2 & F y3))");
        assert_eq!(s.net.place_count(), 4);
        let mut at = s.start;
        let mut path = vec![at];
        for a in [1, 2, 3] {
            let mv = s.step(at, obs(&[a])).unwrap();
            assert!(matches!(mv, SpecMove::Fire(_)));
            at = s.target(at, mv);
            path.push(at);
        }
        assert_eq!(at, s.p_end);
        path.dedup();
        assert_eq!(path.len(), 4);
        // out-of-order visits do not advance
        assert_eq!(s.step(s.start, obs(&[2])), Some(SpecMove::Stay));
        assert_eq!(s.step(s.start, obs(&[3])), Some(SpecMove::Stay));
        assert_eq!(s.net.output_transitions(s.p_end).count(), 0);
    }

    #[test]
    fn safety_conjunct_blocks() {
        let s = compile("F y1 & G !y2");
        assert_eq!(s.step(s.start, obs(&[2])), None);
        assert_eq!(s.step(s.start, obs(&[1, 2])), None);
        assert!(matches!(s.step(s.start, obs(&[1])), Some(SpecMove::Fire(_))));
    }

    #[test]
    fn fragment_and_cosafety_errors() {
        let f = parse_ltl("G F y1", 10).unwrap();
        assert!(matches!(compile_to_spec_net(&f), Err(LtlError::UnsupportedFragment(_))));
        let g = parse_ltl("G !y1", 10).unwrap();
        assert!(matches!(compile_to_spec_net(&g), Err(LtlError::NonCosafe(_))));
        let h = parse_ltl("F (y1 & !y1)", 10).unwrap();
        assert!(matches!(compile_to_spec_net(&h), Err(LtlError::NonCosafe(_))));
    }

    #[test]
    fn acceptance_matches_first_satisfying_prefix_exhaustively() {
        let formulas = [
            "F y1",
            "F (y1 & F (y2 & F y3))",
            "F y3 & G (!y1 & !y2)",
            "(F y1 & G !y2) | (F y2 & G !y1)",
            "F (y1 & y2) & F y3",
            "F (y1 & F y2) & G (y3 -> y1)",
            "(F y1 | F y2) & F y3",
            "y1 & F y2",
        ];
        for text in formulas {
            let f = parse_ltl(text, 3).unwrap();
            let s = compile_to_spec_net(&f).unwrap();
            for tr in all_traces(6) {
                assert_eq!(
                    s.accepting_index(&tr),
                    first_satisfying_prefix(&f, &tr),
                    "{text} on {tr:?}"
                );
            }
        }
    }

    #[test]
    fn table_one_normal_formulas_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for text in crate::ltl::tests::TABLE_ONE.iter().step_by(2) {
            let f = parse_ltl(text, 10).unwrap();
            let s = compile_to_spec_net(&f).unwrap();
            for _ in 0..200 {
                let len = rng.random_range(1..40);
                let tr: Vec<LabelSet> = (0..len)
                    .map(|_| {
                        // sparse observations, like a small team in a large map
                        let mut o = LabelSet::EMPTY;
                        for _ in 0..rng.random_range(0..4) {
                            o.insert(rng.random_range(1..=10));
                        }
                        o
                    })
                    .collect();
                let expected = (1..=tr.len()).find(|&n| eval_finite_trace(&f, &tr[..n])).map(|n| n - 1);
                assert_eq!(s.accepting_index(&tr), expected, "{text}");
            }
        }
    }
}
