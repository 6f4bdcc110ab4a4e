//! Least squares over the probability simplex.
//!
//! Minimizes `||A w - b||^2` subject to `w >= 0, sum(w) = 1` by accelerated
//! projected gradient with adaptive restart. Every iterate is projected, so
//! the returned weights are always feasible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Euclidean projection of `v` onto the unit simplex.
///
/// Sort-based thresholding: find `theta` with `sum(max(v_i - theta, 0)) = 1`
/// and return `max(v - theta, 0)`.
pub fn project_onto_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // absorb rounding so the weights sum to one
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for x in &mut w {
            *x /= total;
        }
    }
    w
}

/// A simplex-constrained least-squares problem.
#[derive(Debug, Clone)]
pub struct SimplexLsProblem {
    design: DMatrix<f64>,
    target: DVector<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl SimplexLsProblem {
    pub const DEFAULT_TOL: f64 = 1e-12;
    pub const DEFAULT_MAX_ITER: usize = 20_000;

    pub fn new(design: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        if design.ncols() == 0 {
            return Err(Error::Validation("design has no columns".into()));
        }
        if design.nrows() != target.len() {
            return Err(Error::Validation(format!(
                "design has {} rows but target has {}",
                design.nrows(),
                target.len()
            )));
        }
        if design.iter().chain(target.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite entry in least-squares problem".into()));
        }
        Ok(SimplexLsProblem {
            design,
            target,
            tol: Self::DEFAULT_TOL,
            max_iter: Self::DEFAULT_MAX_ITER,
        })
    }

    pub fn with_tolerance(mut self, tol: f64, max_iter: usize) -> Self {
        self.tol = tol;
        self.max_iter = max_iter;
        self
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// `||A w - b||^2`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        (&self.design * w - &self.target).norm_squared()
    }

    /// Gradient of `||A w - b||^2`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let w = DVector::from_column_slice(w);
        let r = &self.design * w - &self.target;
        (self.design.tr_mul(&r) * 2.0).iter().copied().collect()
    }
}

/// Solver output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexLsSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// Pairs of columns equal within 1e-12; the minimizer is not unique.
    pub ties: Vec<(usize, usize)>,
    pub notes: Vec<String>,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from the
/// all-ones vector.
pub fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next.max(norm);
            break;
        }
        lambda = next.max(norm);
    }
    lambda
}

fn duplicate_columns(a: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let mut ties = Vec::new();
    for i in 0..a.ncols() {
        for j in i + 1..a.ncols() {
            let diff = (a.column(i) - a.column(j)).amax();
            if diff <= 1e-12 {
                ties.push((i, j));
            }
        }
    }
    ties
}

/// Accelerated projected gradient with step `1/L` and restart whenever the
/// objective would increase. Stops when the relative objective decrease of an
/// accepted step falls below `tol`, then re-solves exactly on the support of
/// the iterate.
pub fn solve_simplex_ls(p: &SimplexLsProblem) -> Result<SimplexLsSolution> {
    let k = p.design.ncols();
    let ties = duplicate_columns(&p.design);
    let mut notes = Vec::new();
    if k == 1 {
        return Ok(SimplexLsSolution {
            weights: vec![1.0],
            objective: p.objective(&[1.0]),
            iterations: 0,
            restarts: 0,
            ties,
            notes,
        });
    }
    let gram = p.design.tr_mul(&p.design);
    let atb = p.design.tr_mul(&p.target);
    let lipschitz = largest_eigenvalue(&gram);
    let uniform = vec![1.0 / k as f64; k];
    if lipschitz <= f64::EPSILON {
        notes.push("design is zero; gradient vanishes and any feasible weight is optimal".into());
        return Ok(SimplexLsSolution {
            objective: p.objective(&uniform),
            weights: uniform,
            iterations: 0,
            restarts: 0,
            ties,
            notes,
        });
    }
    let step = 1.0 / lipschitz;
    // gradient of 0.5 ||Aw - b||^2
    let half_grad = |w: &DVector<f64>| &gram * w - &atb;

    let mut x = DVector::from_vec(uniform);
    let mut f_x = p.objective(x.as_slice());
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut restarts = 0;
    let floor = 1e-30 * (1.0 + p.target.norm_squared());
    for iter in 1..=p.max_iter {
        let g = half_grad(&y);
        let x_next = DVector::from_vec(project_onto_simplex((&y - g * step).as_slice()));
        let f_next = p.objective(x_next.as_slice());
        if f_next > f_x {
            if t == 1.0 {
                // a plain projected step no longer decreases: stationary up to rounding
                return Ok(finish(p, &gram, &atb, x.as_slice(), iter, restarts, ties, notes));
            }
            // momentum overshot: restart from the last accepted point
            restarts += 1;
            y = x.clone();
            t = 1.0;
            continue;
        }
        let decrease = f_x - f_next;
        let scale = f_x.abs().max(f64::MIN_POSITIVE);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
        t = t_next;
        x = x_next;
        f_x = f_next;
        if decrease / scale < p.tol || f_x <= floor {
            return Ok(finish(p, &gram, &atb, x.as_slice(), iter, restarts, ties, notes));
        }
    }
    let gradient_norm = (half_grad(&x) * 2.0).norm();
    Err(Error::NonConvergence {
        iterations: p.max_iter,
        objective: f_x,
        gradient_norm,
    })
}

/// Exact minimizer over the affine hull of the support of `w`, if it stays
/// nonnegative.
fn solve_on_support(gram: &DMatrix<f64>, atb: &DVector<f64>, w: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    let s = support.len();
    if s == 0 {
        return None;
    }
    // [G_SS 1; 1' 0] [w_S; mu] = [A'b_S; 1]
    let mut m = DMatrix::zeros(s + 1, s + 1);
    let mut rhs = DVector::zeros(s + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            m[(a, b)] = gram[(i, j)];
        }
        m[(a, s)] = 1.0;
        m[(s, a)] = 1.0;
        rhs[a] = atb[i];
    }
    rhs[s] = 1.0;
    let sol = m.lu().solve(&rhs)?;
    let mut out = vec![0.0; w.len()];
    for (a, &i) in support.iter().enumerate() {
        if !(sol[a] >= 0.0) {
            return None;
        }
        out[i] = sol[a];
    }
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Some(out)
}

/// Polishes the first-order iterate on its support and keeps whichever point
/// certifies optimality better.
#[allow(clippy::too_many_arguments)]
fn finish(
    p: &SimplexLsProblem,
    gram: &DMatrix<f64>,
    atb: &DVector<f64>,
    x: &[f64],
    iterations: usize,
    restarts: usize,
    ties: Vec<(usize, usize)>,
    notes: Vec<String>,
) -> SimplexLsSolution {
    let mut weights = x.to_vec();
    let mut objective = p.objective(x);
    if let Some(polished) = solve_on_support(gram, atb, x) {
        let f = p.objective(&polished);
        if f <= objective + 1e-14 * (1.0 + objective) && kkt_residual(p, &polished) < kkt_residual(p, x) {
            weights = polished;
            objective = f;
        }
    }
    SimplexLsSolution { weights, objective, iterations, restarts, ties, notes }
}

/// Scaled violation of the optimality conditions at `w`.
///
/// With `g` the gradient and `g_min` its smallest entry over the simplex,
/// coordinates in the support must have `g_i = g_min` and coordinates at zero
/// must have `g_i >= g_min`. The largest violation is divided by
/// `max(1, max |g_i|)`.
pub fn kkt_residual(p: &SimplexLsProblem, w: &[f64]) -> f64 {
    let g = p.gradient(w);
    let g_min = g.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = g.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let mut worst = 0.0f64;
    for (&wi, &gi) in w.iter().zip(&g) {
        let violation = if wi > 0.0 { gi - g_min } else { (g_min - gi).max(0.0) };
        worst = worst.max(violation.abs());
    }
    worst / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn projection_examples() {
        assert!(close(&project_onto_simplex(&[0.6, 0.6]), &[0.5, 0.5], 1e-15));
        assert!(close(&project_onto_simplex(&[2.0, 0.0]), &[1.0, 0.0], 1e-15));
        assert!(close(&project_onto_simplex(&[0.2, 0.1, 0.1]), &[0.4, 0.3, 0.3], 1e-15));
        assert!(close(&project_onto_simplex(&[-5.0]), &[1.0], 0.0));
    }

    #[test]
    fn recovers_vertex_and_interior_solutions() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let sol = solve_simplex_ls(&SimplexLsProblem::new(a, b).unwrap()).unwrap();
        assert!(close(&sol.weights, &[1.0, 0.0, 0.0], 1e-6), "{:?}", sol.weights);
        assert!(sol.objective < 1e-12);

        let a = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 2.0, -1.0, 0.5, 3.0]);
        let b = &a * DVector::from_vec(vec![0.3, 0.7]);
        let sol = solve_simplex_ls(&SimplexLsProblem::new(a, b).unwrap()).unwrap();
        assert!(close(&sol.weights, &[0.3, 0.7], 1e-6), "{:?}", sol.weights);
        assert!(sol.objective < 1e-12);
    }

    #[test]
    fn single_column_and_zero_design() {
        let a = DMatrix::from_element(4, 1, 2.0);
        let b = DVector::from_element(4, 1.0);
        let sol = solve_simplex_ls(&SimplexLsProblem::new(a, b).unwrap()).unwrap();
        assert_eq!(sol.weights, vec![1.0]);

        let a = DMatrix::zeros(4, 3);
        let b = DVector::from_element(4, 1.0);
        let sol = solve_simplex_ls(&SimplexLsProblem::new(a, b).unwrap()).unwrap();
        assert!(close(&sol.weights, &[1.0 / 3.0; 3], 1e-15));
        assert_eq!(sol.notes.len(), 1);
    }

    #[test]
    fn flags_duplicate_columns() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0, 0.0, 0.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        let sol = solve_simplex_ls(&SimplexLsProblem::new(a, b).unwrap()).unwrap();
        assert_eq!(sol.ties, vec![(0, 1)]);
        assert!((sol.weights[0] + sol.weights[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let a = DMatrix::zeros(3, 2);
        let b = DVector::zeros(2);
        assert!(SimplexLsProblem::new(a, b).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(30, 4, |_, _| rng.random::<f64>());
        let b = DVector::from_fn(30, |_, _| rng.random::<f64>() * 3.0);
        let p = SimplexLsProblem::new(a, b).unwrap().with_tolerance(0.0, 3);
        match solve_simplex_ls(&p) {
            Err(Error::NonConvergence { iterations, objective, .. }) => {
                assert_eq!(iterations, 3);
                assert!(objective.is_finite());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn power_iteration_matches_symmetric_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(20, 5, |_, _| rng.random::<f64>() - 0.3);
        let gram = a.tr_mul(&a);
        let want = gram.clone().symmetric_eigen().eigenvalues.max();
        assert!((largest_eigenvalue(&gram) - want).abs() <= 1e-8 * want);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn projection_is_feasible_and_idempotent(v in prop::collection::vec(-10f64..10.0, 1..12)) {
                let w = project_onto_simplex(&v);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let again = project_onto_simplex(&w);
                prop_assert!(close(&w, &again, 1e-12));
            }

            #[test]
            fn projection_is_closest_vertex_mixture(v in prop::collection::vec(-3f64..3.0, 2..6), seed in 0u64..1000) {
                // any other feasible point is at least as far from v
                let w = project_onto_simplex(&v);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let raw: Vec<f64> = v.iter().map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                let other: Vec<f64> = raw.iter().map(|x| x / s).collect();
                let d = |p: &[f64]| p.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                prop_assert!(d(&w) <= d(&other) + 1e-12);
            }

            #[test]
            fn solver_output_is_feasible(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = DMatrix::from_fn(15, 4, |_, _| rng.random::<f64>());
                let b = DVector::from_fn(15, |_, _| rng.random::<f64>());
                let sol = solve_simplex_ls(&SimplexLsProblem::new(a, b).unwrap()).unwrap();
                prop_assert!(sol.weights.iter().all(|&x| x >= 0.0));
                prop_assert!((sol.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
