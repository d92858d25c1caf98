//! Expansion plans: which low-dimensional problems to solve and how to
//! combine their values.
//!
//! The value `u(lambda)` is expanded around `lambda0 = (lambda_1, .., lambda_r, 0, ..)`
//! in the remaining eigenvalues. Derivatives in eigenvalue direction `i` are
//! replaced by forward differences with step `lambda_i`, so every term is a
//! solve in which a few principal directions diffuse with an integer multiple
//! of their eigenvalue and all others are frozen at the anchor.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::model::Spectrum;

/// Finite-difference weights on the nodes `0, lambda, 2 lambda, 3 lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    /// Derivative order `m`; the stencil approximates `lambda^m u^(m)(0) / m!`.
    pub derivative: usize,
    /// Accuracy order `t + 1` (0 for the plain value `u(0)`).
    pub order: usize,
    /// Multiples of the step.
    pub nodes: Vec<u32>,
    pub weights: Vec<Rational64>,
}

const SUPPORTED_STENCILS: &str = "(0, any), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)";

/// Stencil for derivative order `m` with accuracy order `order = t + 1`.
pub fn stencil_table(m: usize, order: usize) -> Result<Stencil> {
    let r = |n: i64, d: i64| Rational64::new(n, d);
    let (nodes, weights): (Vec<u32>, Vec<Rational64>) = match (m, order) {
        (0, _) => (vec![0], vec![r(1, 1)]),
        (1, 2) => (vec![1, 0], vec![r(1, 1), r(-1, 1)]),
        (1, 3) => (vec![2, 1, 0], vec![r(-1, 2), r(4, 2), r(-3, 2)]),
        (1, 4) => (vec![3, 2, 1, 0], vec![r(2, 6), r(-9, 6), r(18, 6), r(-11, 6)]),
        (2, 3) => (vec![2, 1, 0], vec![r(1, 2), r(-2, 2), r(1, 2)]),
        (2, 4) => (vec![3, 2, 1, 0], vec![r(-1, 2), r(4, 2), r(-5, 2), r(2, 2)]),
        (3, 4) => (vec![3, 2, 1, 0], vec![r(1, 6), r(-3, 6), r(3, 6), r(-1, 6)]),
        _ => {
            return Err(Error::InvalidConfig(format!(
                "no stencil for derivative {m} with accuracy order {order}; supported: {SUPPORTED_STENCILS}"
            )))
        }
    };
    Ok(Stencil {
        derivative: m,
        order: if m == 0 { 0 } else { order },
        nodes,
        weights,
    })
}

impl Stencil {
    /// `sum_k w_k n_k^p`, exactly. A correct stencil gives `[p == m]` for
    /// every `p < order` (with `n^0 = 1`, including at node 0).
    pub fn moment(&self, p: u32) -> Rational64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&n, &w)| w * Rational64::from_integer(i64::from(n).pow(p)))
            .fold(Rational64::zero(), |a, b| a + b)
    }
}

/// Sparse activation pattern of the non-leading directions: `(direction, multiple)`
/// pairs with `multiple >= 1`, sorted by direction. The leading `r`
/// directions are always active with their own eigenvalue.
pub type Pattern = Vec<(usize, u32)>;

/// One distinct low-dimensional problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSpec {
    pub pattern: Pattern,
}

impl TermSpec {
    /// `(direction, lambda')` for every diffusing direction.
    pub fn lambda_prime(&self, r: usize, spectrum: &Spectrum) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = (0..r).map(|k| (k, spectrum.eigenvalue(k))).collect();
        out.extend(
            self.pattern
                .iter()
                .map(|&(k, mult)| (k, f64::from(mult) * spectrum.eigenvalue(k))),
        );
        out
    }

    /// Number of diffusing directions given `r` leading ones.
    pub fn dimension(&self, r: usize) -> usize {
        r + self.pattern.len()
    }

    pub fn label(&self) -> String {
        if self.pattern.is_empty() {
            return "base".into();
        }
        let mut s = String::new();
        for (i, (k, m)) in self.pattern.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            // Directions are shown 1-based.
            let _ = write!(s, "{}x{}", m, k + 1);
        }
        s
    }
}

/// Terms of one Taylor order `s` evaluated with stencils of accuracy `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub s: usize,
    pub t: usize,
    /// `(term index, weight)`.
    pub weights: Vec<(usize, Rational64)>,
}

/// All terms of an expansion around `lambda0 = (lambda_1..lambda_r, 0, ..)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionPlan {
    pub n: usize,
    pub r: usize,
    pub levels: Vec<Level>,
    pub terms: Vec<TermSpec>,
}

/// All multi-indices `omega` over `vars` variables with `|omega| = s`, in
/// lexicographic order.
pub fn enumerate_terms(vars: usize, s: usize) -> Vec<Vec<usize>> {
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos + 1 == cur.len() {
            cur[pos] = left;
            out.push(cur.clone());
            return;
        }
        for v in (0..=left).rev() {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, out);
        }
    }
    if vars == 0 {
        return if s == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    rec(0, s, &mut vec![0; vars], &mut out);
    out
}

impl ExpansionPlan {
    /// Plan computing `V_{r,s,t}` for each `(s, t)` in `levels`.
    pub fn new(n: usize, r: usize, levels: &[(usize, usize)]) -> Result<Self> {
        if r >= n {
            return Err(Error::InvalidConfig(format!(
                "need r < N, got r = {r}, N = {n}"
            )));
        }
        let mut plan = Self {
            n,
            r,
            levels: Vec::new(),
            terms: Vec::new(),
        };
        let mut index: BTreeMap<Pattern, usize> = BTreeMap::new();
        for &(s, t) in levels {
            if s > n - r {
                return Err(Error::InvalidConfig(format!(
                    "order s = {s} exceeds the {} expandable directions",
                    n - r
                )));
            }
            let mut acc: BTreeMap<usize, Rational64> = BTreeMap::new();
            for omega in enumerate_terms(n - r, s) {
                let factors = omega
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m > 0)
                    .map(|(i, &m)| Ok((r + i, stencil_table(m, t + 1)?)))
                    .collect::<Result<Vec<_>>>()?;
                let mut partial: Vec<(Pattern, Rational64)> =
                    vec![(Vec::new(), Rational64::from_integer(1))];
                for (dir, st) in &factors {
                    let mut next = Vec::with_capacity(partial.len() * st.nodes.len());
                    for (pat, w) in &partial {
                        for (&node, &wn) in st.nodes.iter().zip(&st.weights) {
                            let mut p = pat.clone();
                            if node > 0 {
                                p.push((*dir, node));
                            }
                            next.push((p, *w * wn));
                        }
                    }
                    partial = next;
                }
                for (pat, w) in partial {
                    let next_id = index.len();
                    let id = *index.entry(pat.clone()).or_insert(next_id);
                    if id == plan.terms.len() {
                        plan.terms.push(TermSpec { pattern: pat });
                    }
                    *acc.entry(id).or_insert_with(Rational64::zero) += w;
                }
            }
            plan.levels.push(Level {
                s,
                t,
                weights: acc.into_iter().collect(),
            });
        }
        Ok(plan)
    }

    /// The truncation `u^(r,s)`: levels `(i, i)` for `i = 0..=s`, whose sum is
    /// `sum_i V_{r,i,i}`.
    pub fn truncation(n: usize, r: usize, s: usize) -> Result<Self> {
        let levels: Vec<(usize, usize)> = (0..=s).map(|i| (i, i)).collect();
        Self::new(n, r, &levels)
    }

    /// First-order plan `u^(1,1)`: base term plus one 2D term per direction `2..N`.
    pub fn first_order(n: usize) -> Result<Self> {
        Self::truncation(n, 1, 1)
    }

    /// Index of the term with pattern `pattern`.
    pub fn find(&self, pattern: &[(usize, u32)]) -> Option<usize> {
        self.terms.iter().position(|t| t.pattern == pattern)
    }

    pub fn max_dimension(&self) -> usize {
        self.terms.iter().map(|t| t.dimension(self.r)).max().unwrap_or(self.r)
    }

    /// Per-level values and the running total, from one value per term.
    pub fn assemble(&self, values: &[f64]) -> Result<Assembly> {
        if values.len() != self.terms.len() {
            return Err(Error::IncompletePlan(format!(
                "plan has {} terms but {} values were supplied",
                self.terms.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::IncompletePlan(format!(
                "value for term {i} ({}) is missing or not finite",
                self.terms[i].label()
            )));
        }
        let levels: Vec<f64> = self
            .levels
            .iter()
            .map(|lvl| {
                lvl.weights
                    .iter()
                    .map(|(i, w)| rational_to_f64(*w) * values[*i])
                    .sum()
            })
            .collect();
        let total = levels.iter().sum();
        Ok(Assembly { levels, total })
    }

    /// Audit table: one line per (level, term) with pattern and exact weight.
    pub fn table(&self) -> Vec<PlanRow> {
        let mut rows = Vec::new();
        for lvl in &self.levels {
            for (i, w) in &lvl.weights {
                if w.is_zero() {
                    continue;
                }
                rows.push(PlanRow {
                    s: lvl.s,
                    t: lvl.t,
                    term: *i,
                    pattern: self.terms[*i].label(),
                    dimension: self.terms[*i].dimension(self.r),
                    weight: *w,
                });
            }
        }
        rows
    }
}

/// Row of [`ExpansionPlan::table`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub s: usize,
    pub t: usize,
    pub term: usize,
    pub pattern: String,
    pub dimension: usize,
    pub weight: Rational64,
}

/// Output of [`ExpansionPlan::assemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    /// `V_{r,s,t}` per level, in plan order.
    pub levels: Vec<f64>,
    pub total: f64,
}

pub fn rational_to_f64(r: Rational64) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// `(2 - N) u(lambda0) + sum_{i=2..N} u(lambda0 + lambda_i e_i)`, with
/// `corrections` keyed by 0-based direction `1..N`.
pub fn first_order_combine(corrections: &BTreeMap<usize, f64>, base: f64, n: usize) -> Result<f64> {
    let mut sum = (2.0 - n as f64) * base;
    for k in 1..n {
        match corrections.get(&k) {
            Some(v) => sum += v,
            None => {
                return Err(Error::IncompletePlan(format!(
                    "missing first-order term for direction {}",
                    k + 1
                )))
            }
        }
    }
    Ok(sum)
}

/// Partial sums of the first-order expansion: entry `k - 1` includes the
/// corrections of directions `2..=k` only. `corrections[i]` is the value of
/// the term for 0-based direction `i + 1`.
pub fn partial_sum_profile(base: f64, corrections: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(corrections.len() + 1);
    let mut acc = base;
    out.push(acc);
    for v in corrections {
        acc += v - base;
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_rows() {
        let s = stencil_table(1, 3).unwrap();
        assert_eq!(s.nodes, vec![2, 1, 0]);
        assert_eq!(
            s.weights,
            vec![Rational64::new(-1, 2), Rational64::new(2, 1), Rational64::new(-3, 2)]
        );
        let s = stencil_table(2, 3).unwrap();
        assert_eq!(
            s.weights,
            vec![Rational64::new(1, 2), Rational64::new(-1, 1), Rational64::new(1, 2)]
        );
        assert!(matches!(stencil_table(2, 2), Err(Error::InvalidConfig(_))));
        assert!(matches!(stencil_table(4, 5), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stencils_sum_to_zero() {
        for (m, o) in [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)] {
            assert!(stencil_table(m, o).unwrap().moment(0).is_zero());
        }
    }

    #[test]
    fn term_counts() {
        assert_eq!(enumerate_terms(10, 1).len(), 10);
        assert_eq!(enumerate_terms(10, 2).len(), 55);
        assert_eq!(enumerate_terms(10, 0), vec![vec![0; 10]]);
        assert_eq!(enumerate_terms(0, 0).len(), 1);
    }

    #[test]
    fn first_order_plan_shape() {
        let plan = ExpansionPlan::first_order(11).unwrap();
        assert_eq!(plan.terms.len(), 11);
        assert_eq!(plan.levels.len(), 2);
        let base = plan.find(&[]).unwrap();
        let lvl = &plan.levels[1];
        let w_base = lvl.weights.iter().find(|(i, _)| *i == base).unwrap().1;
        assert_eq!(w_base, Rational64::from_integer(-10));
        assert_eq!(plan.max_dimension(), 2);
    }

    #[test]
    fn first_order_plan_matches_combination() {
        let n = 7;
        let plan = ExpansionPlan::first_order(n).unwrap();
        let values: Vec<f64> = (0..plan.terms.len()).map(|i| 1.0 + 0.1 * i as f64).collect();
        let total = plan.assemble(&values).unwrap().total;
        let base = values[plan.find(&[]).unwrap()];
        let corr: BTreeMap<usize, f64> =
            (1..n).map(|k| (k, values[plan.find(&[(k, 1)]).unwrap()])).collect();
        let direct = first_order_combine(&corr, base, n).unwrap();
        assert!((total - direct).abs() < 1e-12);
    }

    #[test]
    fn combine_edge_cases() {
        let mut corr = BTreeMap::new();
        corr.insert(1, 0.7);
        assert_eq!(first_order_combine(&corr, 0.3, 2).unwrap(), 0.7);
        let corr: BTreeMap<usize, f64> = (1..5).map(|k| (k, 2.5)).collect();
        assert_eq!(first_order_combine(&corr, 2.5, 5).unwrap(), 2.5);
        let mut missing = corr.clone();
        missing.remove(&3);
        assert!(matches!(
            first_order_combine(&missing, 2.5, 5),
            Err(Error::IncompletePlan(_))
        ));
    }

    #[test]
    fn partial_sums_end_at_full_combination() {
        let corrections = [1.2, 1.1, 1.05];
        let profile = partial_sum_profile(1.0, &corrections);
        assert_eq!(profile.len(), 4);
        assert_eq!(profile[0], 1.0);
        let corr: BTreeMap<usize, f64> = (1..4).map(|k| (k, corrections[k - 1])).collect();
        let full = first_order_combine(&corr, 1.0, 4).unwrap();
        assert!((profile[3] - full).abs() < 1e-15);
    }

    #[test]
    fn second_order_terms_dedupe() {
        // r = 1, s = 2, t = 2 over N = 4: stencils (1,3) and (2,3).
        let plan = ExpansionPlan::new(4, 1, &[(2, 2)]).unwrap();
        // Distinct patterns: base, {i:1}, {i:2} for 3 directions, and
        // {i:a, j:b} for 3 pairs with a, b in {1, 2}.
        assert_eq!(plan.terms.len(), 1 + 6 + 12);
        assert_eq!(plan.max_dimension(), 3);
        let sum: Rational64 = plan.levels[0].weights.iter().map(|(_, w)| *w).sum();
        assert!(sum.is_zero());
    }

    #[test]
    fn assemble_rejects_missing_values() {
        let plan = ExpansionPlan::first_order(3).unwrap();
        assert!(matches!(plan.assemble(&[1.0]), Err(Error::IncompletePlan(_))));
        assert!(matches!(
            plan.assemble(&[1.0, f64::NAN, 2.0]),
            Err(Error::IncompletePlan(_))
        ));
    }

    #[test]
    fn base_only_plan() {
        let plan = ExpansionPlan::truncation(5, 2, 0).unwrap();
        assert_eq!(plan.terms.len(), 1);
        let a = plan.assemble(&[0.42]).unwrap();
        assert_eq!(a.total, 0.42);
        assert!(ExpansionPlan::truncation(3, 3, 0).is_err());
    }
}
