use super::Formula;
use crate::labels::LabelSet;

/// Finite-trace semantics evaluated at position 0.
///
/// `F a` holds at `i` if `a` holds at some `j >= i` inside the trace, `G a` if
/// `a` holds at every `j >= i` inside the trace. The empty trace satisfies
/// nothing.
pub fn eval_finite_trace(f: &Formula, trace: &[LabelSet]) -> bool {
    if trace.is_empty() {
        return false;
    }
    truth_table(f, trace)[0]
}

/// Truth value of `f` at every position of `trace`.
fn truth_table(f: &Formula, trace: &[LabelSet]) -> Vec<bool> {
    match f {
        Formula::Atom(k) => trace.iter().map(|obs| obs.contains(*k)).collect(),
        Formula::Not(a) => truth_table(a, trace).into_iter().map(|v| !v).collect(),
        Formula::And(a, b) => zip(a, b, trace, |x, y| x && y),
        Formula::Or(a, b) => zip(a, b, trace, |x, y| x || y),
        Formula::Implies(a, b) => zip(a, b, trace, |x, y| !x || y),
        Formula::Eventually(a) => {
            let mut v = truth_table(a, trace);
            for i in (0..v.len().saturating_sub(1)).rev() {
                v[i] = v[i] || v[i + 1];
            }
            v
        }
        Formula::Always(a) => {
            let mut v = truth_table(a, trace);
            for i in (0..v.len().saturating_sub(1)).rev() {
                v[i] = v[i] && v[i + 1];
            }
            v
        }
    }
}

fn zip(a: &Formula, b: &Formula, trace: &[LabelSet], op: impl Fn(bool, bool) -> bool) -> Vec<bool> {
    truth_table(a, trace)
        .into_iter()
        .zip(truth_table(b, trace))
        .map(|(x, y)| op(x, y))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ltl::parse_ltl;

    /// Direct recursive reading of the semantics; exponential, only for short traces.
    pub(crate) fn naive(f: &Formula, tr: &[LabelSet], i: usize) -> bool {
        match f {
            Formula::Atom(k) => tr[i].contains(*k),
            Formula::Not(a) => !naive(a, tr, i),
            Formula::And(a, b) => naive(a, tr, i) && naive(b, tr, i),
            Formula::Or(a, b) => naive(a, tr, i) || naive(b, tr, i),
            Formula::Implies(a, b) => !naive(a, tr, i) || naive(b, tr, i),
            Formula::Eventually(a) => (i..tr.len()).any(|j| naive(a, tr, j)),
            Formula::Always(a) => (i..tr.len()).all(|j| naive(a, tr, j)),
        }
    }

    fn obs(atoms: &[u32]) -> LabelSet {
        LabelSet::from_atoms(atoms.iter().copied()).unwrap()
    }

    #[test]
    fn basic_cases() {
        let f = parse_ltl("F y1", 10).unwrap();
        assert!(eval_finite_trace(&f, &[obs(&[]), obs(&[1])]));
        let g = parse_ltl("G !y2", 10).unwrap();
        assert!(!eval_finite_trace(&g, &[obs(&[1]), obs(&[2])]));
        assert!(!eval_finite_trace(&f, &[]));
    }

    #[test]
    fn ordered_visits_only_accept_one_permutation() {
        let f = parse_ltl("F (y1 & F (y2 & F y3))", 10).unwrap();
        let perms = [[1, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];
        for p in perms {
            let tr: Vec<_> = p.iter().map(|&a| obs(&[a])).collect();
            let expected = naive(&f, &tr, 0);
            assert_eq!(eval_finite_trace(&f, &tr), expected);
            assert_eq!(expected, p == [1, 2, 3], "{p:?}");
        }
    }

    /// Every trace of length 1..=len over atoms y1..y3.
    pub(crate) fn all_traces(len: usize) -> impl Iterator<Item = Vec<LabelSet>> {
        (1..=len).flat_map(|n| {
            (0..(8u64.pow(n as u32))).map(move |code| {
                (0..n)
                    .map(|i| LabelSet::from_bits((code >> (3 * i)) & 0b111))
                    .collect()
            })
        })
    }

    #[test]
    fn exhaustive_agreement_with_naive_semantics() {
        let formulas = [
            "F y1",
            "G y1",
            "F (y1 & F (y2 & F y3))",
            "G (!y1 | y2) & F y3",
            "F G y1 | G F y2",
            "F (y1 & y2 & y3)",
            "(y1 -> F y2) & G !y3",
        ];
        for text in formulas {
            let f = parse_ltl(text, 3).unwrap();
            for tr in all_traces(6) {
                assert_eq!(eval_finite_trace(&f, &tr), naive(&f, &tr, 0), "{text} on {tr:?}");
            }
        }
    }

    #[test]
    fn eventually_is_monotone_under_extension() {
        let f = parse_ltl("F (y1 & F y2)", 3).unwrap();
        for tr in all_traces(4) {
            if eval_finite_trace(&f, &tr) {
                for extra in 0..8 {
                    let mut longer = tr.clone();
                    longer.push(LabelSet::from_bits(extra));
                    assert!(eval_finite_trace(&f, &longer));
                }
            }
        }
    }
}
