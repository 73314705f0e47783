//! Exact small-instance machinery.
//!
//! With `n` draws from a pool of `m` individuals the objective `E_q[DL']` is a
//! degree-`n` polynomial in `q`. Enumerating the `C(m+n-1, n)` multisets once
//! gives its value and derivatives exactly, which is what the Monte-Carlo
//! engine is checked against.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{shifted_loss, DrawnProblem, LossSpec};
use crate::predictors::ScoredPool;
use crate::rng::{keyed_rng, Stream};
use crate::uncertainty::{chi_square_div, gradmax, project, uniform};

pub const DEFAULT_CAP: u128 = 100_000;
pub const DEFAULT_RESTARTS: usize = 20;

const ASCENT_ITERS: usize = 2_000;
const GRID_STEP: f64 = 1e-3;

/// `C(m+n-1, n)`, saturating.
pub fn multiset_count(m: usize, n: usize) -> u128 {
    if m == 0 {
        return if n == 0 { 1 } else { 0 };
    }
    let mut c: u128 = 1;
    for i in 1..=n as u128 {
        c = match c.checked_mul(m as u128 - 1 + i) {
            Some(v) => v / i,
            None => return u128::MAX,
        };
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multiset {
    /// `(individual, count)` for every individual with a nonzero count.
    pub support: Vec<(usize, u32)>,
    /// Number of ordered draws mapping to this multiset.
    pub coefficient: f64,
}

impl Multiset {
    pub fn counts(&self, m: usize) -> Vec<u32> {
        let mut c = vec![0; m];
        for &(i, k) in &self.support {
            c[i] = k;
        }
        c
    }

    pub fn indices(&self) -> Vec<usize> {
        self.support
            .iter()
            .flat_map(|&(i, k)| std::iter::repeat_n(i, k as usize))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemEnumeration {
    pub m: usize,
    pub n: usize,
    pub multisets: Vec<Multiset>,
    /// `DL'` per multiset.
    pub losses: Vec<f64>,
}

impl ProblemEnumeration {
    /// All multisets of size `n` over `m` individuals, with zero losses.
    pub fn skeleton(m: usize, n: usize, cap: u128) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::argument("enumeration needs m >= 1 and n >= 1"));
        }
        let required = multiset_count(m, n);
        if required > cap {
            return Err(Error::EnumerationTooLarge { required, cap });
        }
        let mut factorial = vec![1.0f64; n + 1];
        for i in 1..=n {
            factorial[i] = factorial[i - 1] * i as f64;
        }
        let mut multisets = Vec::with_capacity(required as usize);
        let mut counts = vec![0u32; m];
        fill(&mut counts, 0, n, &factorial, &mut multisets);
        let losses = vec![0.0; multisets.len()];
        Ok(ProblemEnumeration { m, n, multisets, losses })
    }

    /// Replaces the cached losses, e.g. to inject a hand-built polynomial.
    pub fn with_losses(mut self, losses: Vec<f64>) -> Result<Self> {
        if losses.len() != self.multisets.len() {
            return Err(Error::argument(format!(
                "{} losses for {} multisets",
                losses.len(),
                self.multisets.len()
            )));
        }
        self.losses = losses;
        Ok(self)
    }

    fn powers(&self, q: &[f64]) -> Vec<Vec<f64>> {
        q.iter()
            .map(|&x| {
                let mut row = Vec::with_capacity(self.n + 1);
                let mut acc = 1.0;
                for _ in 0..=self.n {
                    row.push(acc);
                    acc *= x;
                }
                row
            })
            .collect()
    }

    fn check(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.m {
            return Err(Error::argument(format!("q has {} entries, expected {}", q.len(), self.m)));
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::argument("q must be finite"));
        }
        Ok(())
    }

    /// `Σ coefficient · Π q^count`; equals 1 on the simplex.
    pub fn total_probability(&self, q: &[f64]) -> Result<f64> {
        self.check(q)?;
        let pw = self.powers(q);
        Ok(self.multisets.iter().map(|s| s.coefficient * monomial(&pw, &s.support)).sum())
    }
}

fn fill(counts: &mut [u32], pos: usize, left: usize, factorial: &[f64], out: &mut Vec<Multiset>) {
    let m = counts.len();
    if pos == m - 1 {
        counts[pos] = left as u32;
        let mut coefficient = factorial[factorial.len() - 1];
        let mut support = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            coefficient /= factorial[c as usize];
            if c > 0 {
                support.push((i, c));
            }
        }
        out.push(Multiset {
            support,
            coefficient: coefficient.round(),
        });
        return;
    }
    for c in (0..=left).rev() {
        counts[pos] = c as u32;
        fill(counts, pos + 1, left - c, factorial, out);
    }
    counts[pos] = 0;
}

fn monomial(pw: &[Vec<f64>], support: &[(usize, u32)]) -> f64 {
    support.iter().map(|&(i, c)| pw[i][c as usize]).product()
}

/// Evaluates `DL'` once per multiset of `n` draws from `pool`.
pub fn enumerate_problems(pool: &ScoredPool, spec: &LossSpec, n: usize, cap: u128) -> Result<ProblemEnumeration> {
    let skeleton = ProblemEnumeration::skeleton(pool.len(), n, cap)?;
    let losses = skeleton
        .multisets
        .par_iter()
        .map(|s| shifted_loss(spec, &DrawnProblem::from_indices(pool, s.indices())?))
        .collect::<Result<Vec<f64>>>()?;
    skeleton.with_losses(losses)
}

/// Exact `E_q[DL']`.
pub fn exact_objective(e: &ProblemEnumeration, q: &[f64]) -> Result<f64> {
    e.check(q)?;
    let pw = e.powers(q);
    Ok(e
        .multisets
        .iter()
        .zip(&e.losses)
        .map(|(s, l)| s.coefficient * monomial(&pw, &s.support) * l)
        .sum())
}

/// Exact `E_q[DL]`, summing `DL' + 1` per multiset.
pub fn exact_expected_dl(e: &ProblemEnumeration, q: &[f64]) -> Result<f64> {
    e.check(q)?;
    let pw = e.powers(q);
    Ok(e
        .multisets
        .iter()
        .zip(&e.losses)
        .map(|(s, l)| s.coefficient * monomial(&pw, &s.support) * (l + 1.0))
        .sum())
}

/// `E[DL']` as a function of the offset `w = q - 1/m`.
pub fn exact_objective_offset(e: &ProblemEnumeration, w: &[f64]) -> Result<f64> {
    let q: Vec<f64> = w.iter().map(|x| x + 1.0 / e.m as f64).collect();
    exact_objective(e, &q)
}

/// Partial derivatives of the polynomial with respect to each `q_a`.
pub fn exact_gradient(e: &ProblemEnumeration, q: &[f64]) -> Result<Vec<f64>> {
    e.check(q)?;
    let pw = e.powers(q);
    let mut g = vec![0.0; e.m];
    let interior = q.iter().all(|&x| x > 1e-300);
    for (s, &l) in e.multisets.iter().zip(&e.losses) {
        let w = s.coefficient * l;
        if interior {
            let mono = w * monomial(&pw, &s.support);
            for &(a, ca) in &s.support {
                g[a] += mono * ca as f64 / q[a];
            }
            continue;
        }
        for (k, &(a, ca)) in s.support.iter().enumerate() {
            let mut term = w * ca as f64 * pw[a][ca as usize - 1];
            for (k2, &(i, c)) in s.support.iter().enumerate() {
                if k2 != k {
                    term *= pw[i][c as usize];
                }
            }
            g[a] += term;
        }
    }
    Ok(g)
}

/// Second partial derivatives, row-major `m × m`.
pub fn exact_hessian(e: &ProblemEnumeration, q: &[f64]) -> Result<Vec<Vec<f64>>> {
    e.check(q)?;
    let pw = e.powers(q);
    let m = e.m;
    let mut h = vec![vec![0.0; m]; m];
    for (s, &l) in e.multisets.iter().zip(&e.losses) {
        let w = s.coefficient * l;
        let sup = &s.support;
        for (ka, &(a, ca)) in sup.iter().enumerate() {
            for (kb, &(b, cb)) in sup.iter().enumerate() {
                let mut term = w;
                if ka == kb {
                    if ca < 2 {
                        continue;
                    }
                    term *= (ca * (ca - 1)) as f64 * pw[a][ca as usize - 2];
                } else {
                    term *= (ca * cb) as f64 * pw[a][ca as usize - 1] * pw[b][cb as usize - 1];
                }
                for (k, &(i, c)) in sup.iter().enumerate() {
                    if k != ka && k != kb {
                        term *= pw[i][c as usize];
                    }
                }
                h[a][b] += term;
            }
        }
    }
    Ok(h)
}

/// True iff every Hessian entry is at most `1e-9`.
pub fn check_dr_submodular(e: &ProblemEnumeration, q: &[f64]) -> Result<bool> {
    Ok(exact_hessian(e, q)?.iter().flatten().all(|&x| x <= 1e-9))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub q: Vec<f64>,
    /// Best `E[DL']` found.
    pub value: f64,
    /// Number of starting points tried, grid excluded.
    pub starts: usize,
    pub grid_checked: bool,
}

/// Projected gradient ascent with backtracking from one feasible start.
fn ascend(e: &ProblemEnumeration, center: &[f64], rho: f64, start: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    let mut x = start;
    let mut fx = exact_objective(e, &x)?;
    let mut step = 0.1;
    for _ in 0..ASCENT_ITERS {
        let g = exact_gradient(e, &x)?;
        let scale = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if scale == 0.0 {
            break;
        }
        let mut improved = false;
        while step * scale > 1e-13 {
            let y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            let cand = project(&y, center, rho)?;
            let fc = exact_objective(e, &cand)?;
            if fc > fx + 1e-15 {
                let gain = fc - fx;
                x = cand;
                fx = fc;
                step *= 2.0;
                improved = gain > 1e-14;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok((x, fx))
}

fn simplex_grid(m: usize, step: f64, mut visit: impl FnMut(&[f64])) {
    let k = (1.0 / step).round() as usize;
    match m {
        1 => visit(&[1.0]),
        2 => {
            for i in 0..=k {
                let a = i as f64 / k as f64;
                visit(&[a, 1.0 - a]);
            }
        }
        3 => {
            for i in 0..=k {
                for j in 0..=k - i {
                    let a = i as f64 / k as f64;
                    let b = j as f64 / k as f64;
                    visit(&[a, b, (1.0 - a - b).max(0.0)]);
                }
            }
        }
        _ => {}
    }
}

/// Multi-start maximization of `E_q[DL']` over the χ² ball around uniform.
pub fn oracle_maximize(e: &ProblemEnumeration, rho: f64, restarts: usize, seed: u64) -> Result<OracleResult> {
    oracle_maximize_from(e, rho, restarts, seed, &[])
}

/// As [`oracle_maximize`], also ascending from caller-supplied feasible points.
pub fn oracle_maximize_from(
    e: &ProblemEnumeration,
    rho: f64,
    restarts: usize,
    seed: u64,
    extra_starts: &[Vec<f64>],
) -> Result<OracleResult> {
    if restarts == 0 {
        return Err(Error::argument("restarts must be at least 1"));
    }
    if !(rho >= 0.0) {
        return Err(Error::config("rho_ind", "must be non-negative"));
    }
    let m = e.m;
    let center = uniform(m);
    let mut starts = vec![center.clone()];
    for i in 0..m {
        if starts.len() >= restarts {
            break;
        }
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        starts.push(gradmax(&v, &center, rho)?);
    }
    let mut d = 0;
    while starts.len() < restarts {
        let mut rng = keyed_rng(seed, Stream::Oracle, 0, 0, d);
        let raw: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = raw.iter().sum();
        let y: Vec<f64> = raw.iter().map(|x| x / total).collect();
        starts.push(project(&y, &center, rho)?);
        d += 1;
    }
    for s in extra_starts {
        e.check(s)?;
        starts.push(project(s, &center, rho)?);
    }
    let grid_checked = m <= 3;
    if grid_checked {
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut err = None;
        simplex_grid(m, GRID_STEP, |q| {
            if err.is_some() || chi_square_div(q, &center).map_or(true, |dv| dv > rho) {
                return;
            }
            match exact_objective(e, q) {
                Ok(f) if best.as_ref().is_none_or(|b| f > b.1) => best = Some((q.to_vec(), f)),
                Ok(_) => {}
                Err(x) => err = Some(x),
            }
        });
        if let Some(x) = err {
            return Err(x);
        }
        if let Some((q, _)) = best {
            starts.push(q);
        }
    }
    let n_starts = starts.len();
    let results = starts
        .into_par_iter()
        .map(|s| ascend(e, &center, rho, s))
        .collect::<Vec<_>>();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in results {
        let (q, f) = r?;
        if best.as_ref().is_none_or(|b| f > b.1) {
            best = Some((q, f));
        }
    }
    let (q, value) = best.expect("at least one start");
    Ok(OracleResult {
        q,
        value,
        starts: n_starts - usize::from(grid_checked),
        grid_checked,
    })
}
