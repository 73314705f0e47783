//! χ² balls around the empirical distribution and the offset parametrization.
//!
//! The divergence is `sum (q_i - p_i)^2 / p_i` with no 1/2 factor. Shifts are
//! stored as offsets `w = q - 1/m` so that the zero vector is the empirical
//! center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const BISECT_TOL: f64 = 1e-10;
const BISECT_MAX: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    #[default]
    ChiSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBudget {
    /// Radius of each within-instance ball.
    pub rho_ind: f64,
    /// Radius of the ball over instances.
    pub rho_xi: f64,
    #[serde(default)]
    pub divergence: Divergence,
}

impl UncertaintyBudget {
    pub fn new(rho_ind: f64, rho_xi: f64) -> Result<Self> {
        let b = UncertaintyBudget {
            rho_ind,
            rho_xi,
            divergence: Divergence::ChiSquare,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_ind >= 0.0) || !self.rho_ind.is_finite() {
            return Err(Error::config("rho_ind", format!("must be a non-negative number, got {}", self.rho_ind)));
        }
        if !(self.rho_xi >= 0.0) || !self.rho_xi.is_finite() {
            return Err(Error::config("rho_xi", format!("must be a non-negative number, got {}", self.rho_xi)));
        }
        Ok(())
    }
}

/// Offsets from the uniform distribution over instances and over each pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalShift {
    pub instance_ids: Vec<String>,
    pub w_xi: Vec<f64>,
    pub w_ind: Vec<Vec<f64>>,
}

impl HierarchicalShift {
    /// The empirical center for pools of the given sizes.
    pub fn zero(instance_ids: Vec<String>, pool_sizes: &[usize]) -> Self {
        HierarchicalShift {
            w_xi: vec![0.0; instance_ids.len()],
            w_ind: pool_sizes.iter().map(|&m| vec![0.0; m]).collect(),
            instance_ids,
        }
    }

    pub fn instance_distribution(&self) -> Result<Vec<f64>> {
        offset_to_distribution(&self.w_xi)
    }

    pub fn pool_distribution(&self, j: usize) -> Result<Vec<f64>> {
        offset_to_distribution(&self.w_ind[j])
    }
}

pub fn uniform(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

fn check_probability(q: &[f64], what: &str) -> Result<()> {
    if q.is_empty() {
        return Err(Error::argument(format!("{what} is empty")));
    }
    if q.iter().any(|v| !v.is_finite() || *v < -FEAS_TOL) {
        return Err(Error::argument(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::argument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `sum (q_i - p_i)^2 / p_i`.
pub fn chi_square_div(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::argument(format!("length mismatch: {} vs {}", q.len(), p.len())));
    }
    if p.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::argument("center has a zero entry"));
    }
    check_probability(q, "q")?;
    check_probability(p, "p")?;
    Ok(chi_square_unchecked(q, p))
}

fn chi_square_unchecked(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).map(|(a, b)| (a - b) * (a - b) / b).sum()
}

pub fn offset_to_distribution(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::InfeasibleOffset("empty offset".into()));
    }
    let m = w.len() as f64;
    let s: f64 = w.iter().sum();
    if !s.is_finite() || s.abs() > SUM_TOL {
        return Err(Error::InfeasibleOffset(format!("offset sums to {s}, not 0")));
    }
    if let Some((i, v)) = w.iter().enumerate().find(|(_, &v)| !(v >= -1.0 / m - FEAS_TOL)) {
        return Err(Error::InfeasibleOffset(format!("entry {i} = {v} is below -1/{}", w.len())));
    }
    Ok(w.iter().map(|v| (v + 1.0 / m).max(0.0)).collect())
}

pub fn distribution_to_offset(q: &[f64]) -> Vec<f64> {
    let m = q.len() as f64;
    q.iter().map(|v| v - 1.0 / m).collect()
}

/// Solves `sum_i max(0, a_i - b_i * mu) = 1` for `mu` given positive `b`.
///
/// Exact: the left side is piecewise linear and decreasing in `mu`.
fn solve_shift(a: &[f64], b: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..a.len()).collect();
    // breakpoints a_i / b_i, descending
    order.sort_by(|&i, &j| (a[j] / b[j]).total_cmp(&(a[i] / b[i])));
    let (mut sa, mut sb) = (0.0, 0.0);
    let mut mu = f64::NAN;
    for (r, &i) in order.iter().enumerate() {
        sa += a[i];
        sb += b[i];
        let candidate = (sa - 1.0) / sb;
        let next = order.get(r + 1).map(|&j| a[j] / b[j]);
        if next.is_none_or(|bp| candidate >= bp) {
            mu = candidate;
            break;
        }
    }
    mu
}

/// The point on the penalized path `argmax <v,q> - chi2(q,p) / (2t)`.
fn path_point(v: &[f64], p: &[f64], t: f64) -> Vec<f64> {
    if t <= 0.0 {
        return p.to_vec();
    }
    // q_i = max(0, p_i (1 + t v_i) - t p_i mu)
    let a: Vec<f64> = v.iter().zip(p).map(|(vi, pi)| pi * (1.0 + t * vi)).collect();
    let b: Vec<f64> = p.iter().map(|pi| t * pi).collect();
    let mu = solve_shift(&a, &b);
    let mut q: Vec<f64> = a.iter().zip(&b).map(|(ai, bi)| (ai - bi * mu).max(0.0)).collect();
    renormalize(&mut q);
    q
}

fn renormalize(q: &mut [f64]) {
    let s: f64 = q.iter().sum();
    if s > 0.0 {
        q.iter_mut().for_each(|v| *v /= s);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `<v, q>` over the simplex intersected with `chi2(q, p) <= rho`.
///
/// The optimum lies on the path `q(t) = max(0, p (1 + t (v - mu(t))))`, whose
/// divergence grows with `t`; bisection on `t` lands on the boundary of the
/// ball, always keeping the feasible end.
pub fn gradmax(v: &[f64], p: &[f64], rho: f64) -> Result<Vec<f64>> {
    if v.len() != p.len() {
        return Err(Error::argument(format!("length mismatch: {} vs {}", v.len(), p.len())));
    }
    if p.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::argument("center must be strictly positive"));
    }
    check_probability(p, "center")?;
    if !(rho >= 0.0) {
        return Err(Error::argument(format!("rho must be non-negative, got {rho}")));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::argument(format!("direction has non-finite entry {x}")));
    }
    let m = v.len();
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = vmax - vmin;
    if rho == 0.0 || spread <= 1e-15 * (1.0 + vmax.abs()) {
        return Ok(p.to_vec());
    }

    let best = v.iter().position(|&x| x == vmax).expect("non-empty");
    if rho >= (1.0 - p[best]) / p[best] {
        let mut q = vec![0.0; m];
        q[best] = 1.0;
        return Ok(q);
    }
    // With tied maxima the path tends to p restricted to the tied set.
    let tied: Vec<usize> = (0..m).filter(|&i| v[i] == vmax).collect();
    if tied.len() > 1 {
        let mass: f64 = tied.iter().map(|&i| p[i]).sum();
        let mut limit = vec![0.0; m];
        for &i in &tied {
            limit[i] = p[i] / mass;
        }
        if chi_square_unchecked(&limit, p) <= rho {
            return Ok(limit);
        }
    }

    // Scale t by the spread of v so the search interval is well conditioned.
    let mut lo = 0.0;
    let mut hi = 1.0 / spread;
    let mut doublings = 0;
    while chi_square_unchecked(&path_point(v, p, hi), p) < rho {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Ok(path_point(v, p, lo));
        }
    }
    for _ in 0..BISECT_MAX {
        if hi - lo <= BISECT_TOL * hi.max(f64::MIN_POSITIVE) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if chi_square_unchecked(&path_point(v, p, mid), p) <= rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = path_point(v, p, lo);
    debug_assert!(chi_square_unchecked(&q, p) <= rho + FEAS_TOL);
    debug_assert!(dot(v, &q) >= dot(v, p) - 1e-12);
    Ok(q)
}

/// Euclidean projection of `y` onto the simplex intersected with `chi2(q, p) <= rho`.
///
/// For a multiplier `lambda >= 0` on the divergence, the minimizer is
/// `q_i = max(0, p_i (y_i + 2 lambda - mu) / (p_i + 2 lambda))`; `mu` is found
/// exactly and `lambda` by bisection.
pub fn project(y: &[f64], p: &[f64], rho: f64) -> Result<Vec<f64>> {
    if y.len() != p.len() {
        return Err(Error::argument("length mismatch"));
    }
    if p.iter().any(|&x| !(x > 0.0)) || !(rho >= 0.0) {
        return Err(Error::argument("center must be positive and rho non-negative"));
    }
    let point = |lambda: f64| -> Vec<f64> {
        let a: Vec<f64> = y
            .iter()
            .zip(p)
            .map(|(yi, pi)| pi * (yi + 2.0 * lambda) / (pi + 2.0 * lambda))
            .collect();
        let b: Vec<f64> = p.iter().map(|pi| pi / (pi + 2.0 * lambda)).collect();
        let mu = solve_shift(&a, &b);
        let mut q: Vec<f64> = a.iter().zip(&b).map(|(ai, bi)| (ai - bi * mu).max(0.0)).collect();
        renormalize(&mut q);
        q
    };
    let q0 = point(0.0);
    if chi_square_unchecked(&q0, p) <= rho {
        return Ok(q0);
    }
    if rho == 0.0 {
        return Ok(p.to_vec());
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while chi_square_unchecked(&point(hi), p) > rho {
        lo = hi;
        hi *= 2.0;
        if hi > 1e30 {
            return Ok(p.to_vec());
        }
    }
    for _ in 0..BISECT_MAX {
        if hi - lo <= BISECT_TOL * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if chi_square_unchecked(&point(mid), p) <= rho {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(point(hi))
}

/// Which constraint of the shift set failed first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    Shape(String),
    InstanceOffsetSum { sum: f64 },
    InstanceNegative { index: usize },
    InstanceRadius { divergence: f64, rho: f64 },
    PoolOffsetSum { instance: usize, sum: f64 },
    PoolNegative { instance: usize, index: usize },
    PoolRadius { instance: usize, divergence: f64, rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    pub violation: Option<Violation>,
}

fn offset_violation(w: &[f64], rho: f64) -> Option<(u8, f64, usize)> {
    let m = w.len() as f64;
    let s: f64 = w.iter().sum();
    if !(s.abs() <= SUM_TOL) {
        return Some((0, s, 0));
    }
    if let Some(i) = w.iter().position(|&v| !(v >= -1.0 / m - FEAS_TOL)) {
        return Some((1, 0.0, i));
    }
    let q: Vec<f64> = w.iter().map(|v| v + 1.0 / m).collect();
    let div = chi_square_unchecked(&q, &uniform(w.len()));
    if !(div <= rho + FEAS_TOL) {
        return Some((2, div, 0));
    }
    None
}

/// Checks every induced distribution against its radius.
pub fn is_feasible(shift: &HierarchicalShift, budget: &UncertaintyBudget) -> Feasibility {
    let fail = |v: Violation| Feasibility {
        feasible: false,
        violation: Some(v),
    };
    if shift.w_xi.len() != shift.w_ind.len() || shift.w_xi.is_empty() || shift.w_ind.iter().any(Vec::is_empty) {
        return fail(Violation::Shape("instance and pool offsets disagree in shape".into()));
    }
    match offset_violation(&shift.w_xi, budget.rho_xi) {
        Some((0, sum, _)) => return fail(Violation::InstanceOffsetSum { sum }),
        Some((1, _, index)) => return fail(Violation::InstanceNegative { index }),
        Some((_, divergence, _)) => {
            return fail(Violation::InstanceRadius {
                divergence,
                rho: budget.rho_xi,
            })
        }
        None => {}
    }
    for (instance, w) in shift.w_ind.iter().enumerate() {
        match offset_violation(w, budget.rho_ind) {
            Some((0, sum, _)) => return fail(Violation::PoolOffsetSum { instance, sum }),
            Some((1, _, index)) => return fail(Violation::PoolNegative { instance, index }),
            Some((_, divergence, _)) => {
                return fail(Violation::PoolRadius {
                    instance,
                    divergence,
                    rho: budget.rho_ind,
                })
            }
            None => {}
        }
    }
    Feasibility {
        feasible: true,
        violation: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Best `<v, q>` over a grid of the simplex with the given step, among points
    /// inside the ball.
    fn grid_best(v: &[f64], p: &[f64], rho: f64, step: f64) -> f64 {
        let m = v.len();
        let n = (1.0 / step).round() as usize;
        let mut best = f64::NEG_INFINITY;
        let mut counts = vec![0usize; m];
        #[allow(clippy::too_many_arguments)]
        fn rec(
            i: usize,
            left: usize,
            n: usize,
            counts: &mut Vec<usize>,
            v: &[f64],
            p: &[f64],
            rho: f64,
            best: &mut f64,
        ) {
            let m = counts.len();
            if i == m - 1 {
                counts[i] = left;
                let q: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
                if chi_square_unchecked(&q, p) <= rho {
                    *best = best.max(dot(v, &q));
                }
                return;
            }
            for c in 0..=left {
                counts[i] = c;
                rec(i + 1, left - c, n, counts, v, p, rho, best);
            }
        }
        rec(0, n, n, &mut counts, v, p, rho, &mut best);
        best
    }

    #[test]
    fn chi_square_examples() {
        assert_eq!(chi_square_div(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((chi_square_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        let d = chi_square_div(&[0.4, 0.2, 0.2, 0.2], &[0.25; 4]).unwrap();
        let direct = (0.15f64.powi(2) + 3.0 * 0.05f64.powi(2)) / 0.25;
        assert!((d - direct).abs() < 1e-15);
        assert!((d - 0.12).abs() < 1e-12);
        assert!(chi_square_div(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(chi_square_div(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn offset_examples() {
        assert_eq!(offset_to_distribution(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(offset_to_distribution(&[0.5, -0.5]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(offset_to_distribution(&[0.5, 0.5]), Err(Error::InfeasibleOffset(_))));
        assert!(matches!(offset_to_distribution(&[-0.75, 0.75]), Err(Error::InfeasibleOffset(_))));
        let w = vec![0.1, -0.05, -0.05];
        let back = distribution_to_offset(&offset_to_distribution(&w).unwrap());
        for (a, b) in back.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradmax_examples() {
        let p = vec![0.2, 0.3, 0.5];
        assert_eq!(gradmax(&[2.0, 2.0, 2.0], &p, 1.0).unwrap(), p);
        let vertex = chi_square_div(&[1.0, 0.0, 0.0], &p).unwrap();
        assert_eq!(gradmax(&[1.0, 0.0, 0.0], &p, vertex).unwrap(), vec![1.0, 0.0, 0.0]);
        // Grid search over the 1-simplex with step 1e-5.
        let mut best = (f64::NEG_INFINITY, 0.0);
        for s in 0..=100_000 {
            let q0 = s as f64 * 1e-5;
            let q = [q0, 1.0 - q0];
            if chi_square_unchecked(&q, &[0.5, 0.5]) <= 0.5 && q0 > best.0 {
                best = (q0, q0);
            }
        }
        let q = gradmax(&[1.0, 0.0], &[0.5, 0.5], 0.5).unwrap();
        assert!((q[0] - best.1).abs() < 2e-5);
        assert!((q[0] - 0.853_553_390_593_273_7).abs() < 1e-8);
        assert!((q[1] - 0.146_446_609_406_726_3).abs() < 1e-8);
        assert_eq!(gradmax(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn gradmax_tied_maxima() {
        let p = uniform(4);
        let q = gradmax(&[1.0, 1.0, 0.0, 0.0], &p, 1.0).unwrap();
        assert!((dot(&[1.0, 1.0, 0.0, 0.0], &q) - 1.0).abs() < 1e-9);
        assert!(chi_square_unchecked(&q, &p) <= 1.0 + 1e-9);
    }

    #[test]
    fn feasibility_examples() {
        let zero = HierarchicalShift::zero(vec!["a".into(), "b".into()], &[4, 3]);
        assert!(is_feasible(&zero, &UncertaintyBudget::new(0.0, 0.0).unwrap()).feasible);

        let mut shift = zero.clone();
        shift.w_ind[0] = distribution_to_offset(&[1.0, 0.0, 0.0, 0.0]);
        assert!((chi_square_div(&[1.0, 0.0, 0.0, 0.0], &uniform(4)).unwrap() - 3.0).abs() < 1e-12);
        let f = is_feasible(&shift, &UncertaintyBudget::new(1.0, 1.0).unwrap());
        assert!(!f.feasible);
        assert!(matches!(f.violation, Some(Violation::PoolRadius { instance: 0, .. })));

        let mut shift = zero;
        shift.w_xi = vec![0.1, -0.1];
        let f = is_feasible(&shift, &UncertaintyBudget::new(0.0, 0.0).unwrap());
        assert!(matches!(f.violation, Some(Violation::InstanceRadius { .. })));
    }

    #[test]
    fn budget_rejects_negative_radius() {
        match UncertaintyBudget::new(-1.0, 1.0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "rho_ind"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn projection_is_identity_inside_and_lands_on_boundary() {
        let p = uniform(3);
        let q = vec![0.4, 0.3, 0.3];
        let out = project(&q, &p, 1.0).unwrap();
        for (a, b) in out.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        let out = project(&[2.0, -1.0, 0.0], &p, 0.3).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((chi_square_unchecked(&out, &p) - 0.3).abs() < 1e-6);
    }

    fn center_and_dir() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (2usize..5).prop_flat_map(|m| {
            (
                prop::collection::vec(0.05f64..1.0, m),
                prop::collection::vec(-1.0f64..1.0, m),
                0.0f64..3.0,
            )
                .prop_map(|(raw, v, rho)| {
                    let s: f64 = raw.iter().sum();
                    (raw.iter().map(|x| x / s).collect(), v, rho)
                })
        })
    }

    proptest! {
        #[test]
        fn gradmax_is_feasible_and_improves((p, v, rho) in center_and_dir()) {
            let q = gradmax(&v, &p, rho).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|&x| x >= 0.0));
            prop_assert!(chi_square_unchecked(&q, &p) <= rho + 1e-9);
            prop_assert!(dot(&v, &q) >= dot(&v, &p) - 1e-12);
        }

        #[test]
        fn gradmax_monotone_in_rho((p, v, rho) in center_and_dir(), extra in 0.0f64..2.0) {
            let small = dot(&v, &gradmax(&v, &p, rho).unwrap());
            let large = dot(&v, &gradmax(&v, &p, rho + extra).unwrap());
            prop_assert!(large >= small - 1e-9);
        }

        #[test]
        fn gradmax_scale_invariant((p, v, rho) in center_and_dir(), s in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            let a = dot(&v, &gradmax(&v, &p, rho).unwrap());
            let b = dot(&v, &gradmax(&scaled, &p, rho).unwrap());
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn gradmax_matches_grid((p, v, rho) in center_and_dir()) {
            prop_assume!(p.len() <= 3);
            let q = gradmax(&v, &p, rho).unwrap();
            let grid = grid_best(&v, &p, rho, 1e-3);
            prop_assert!(dot(&v, &q) >= grid - 1e-3, "{} vs grid {}", dot(&v, &q), grid);
        }

        #[test]
        fn projection_is_feasible((p, v, rho) in center_and_dir()) {
            let q = project(&v, &p, rho).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|&x| x >= 0.0));
            prop_assert!(chi_square_unchecked(&q, &p) <= rho + 1e-9);
        }
    }
}
