//! ν one-class SVM with an RBF kernel, trained by SMO.
//!
//! Dual problem, with `α` normalized to sum to one:
//!
//! ```text
//! min ½ αᵀQα   s.t.  0 ≤ αᵢ ≤ 1/(νn),  Σαᵢ = 1,   Qᵢⱼ = exp(-γ‖xᵢ - xⱼ‖²)
//! ```
//!
//! The decision function is `f(x) = Σ αᵢ K(xᵢ, x) - ρ`; training points with
//! `f < 0` are the training errors, at most a fraction `ν` of the samples.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcSvmParams {
    pub nu: f64,
    /// Ignored by [`fit_auto_gamma`], which derives γ from the samples.
    pub gamma: f64,
    pub tol: f64,
    /// Budget in kernel evaluations; each SMO step costs two kernel rows.
    pub max_iter: u64,
}

impl Default for OcSvmParams {
    fn default() -> Self {
        Self {
            nu: 0.1,
            gamma: 1.0,
            tol: 0.01,
            max_iter: 10_000_000,
        }
    }
}

impl OcSvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidParameter(format!("nu {} outside (0, 1]", self.nu)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma {} must be positive", self.gamma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol {} must be positive", self.tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcSvmModel {
    dim: usize,
    support_vectors: Vec<f64>,
    alpha: Vec<f64>,
    rho: f64,
    gamma: f64,
    converged: bool,
    iterations: usize,
}

impl OcSvmModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_support(&self) -> usize {
        self.alpha.len()
    }

    pub fn support_vector(&self, i: usize) -> &[f64] {
        &self.support_vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Dual coefficients of the support vectors.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Decision value without the dimension check.
    pub(crate) fn decide(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (sv, &a) in self.support_vectors.chunks_exact(self.dim).zip(&self.alpha) {
            acc += a * (-self.gamma * sq_dist(sv, x)).exp();
        }
        acc - self.rho
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimensions(format!(
            "kernel arguments have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok((-gamma * sq_dist(x, y)).exp())
}

/// `1 / (d · var)` with the population variance over all entries.
pub fn gamma_scale(samples: ArrayView2<'_, f64>) -> Result<f64> {
    let (n, d) = samples.dim();
    if n * d < 2 {
        return Err(Error::InvalidParameter(format!(
            "gamma scale needs at least two entries, got {n}x{d}"
        )));
    }
    let first = samples[[0, 0]];
    if samples.iter().all(|&v| v == first) {
        return Err(Error::ZeroVariance);
    }
    let count = (n * d) as f64;
    let mean = samples.iter().sum::<f64>() / count;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(1.0 / (d as f64 * var))
}

/// Rows of the Gram matrix, precomputed for small problems.
enum Gram<'a> {
    Dense { n: usize, q: Vec<f64> },
    Lazy { samples: ArrayView2<'a, f64>, gamma: f64, row: Vec<f64> },
}

const DENSE_LIMIT: usize = 4096;

impl<'a> Gram<'a> {
    fn new(samples: ArrayView2<'a, f64>, gamma: f64) -> Self {
        let n = samples.nrows();
        if n > DENSE_LIMIT {
            return Gram::Lazy {
                samples,
                gamma,
                row: vec![0.0; n],
            };
        }
        let rows: Vec<Vec<f64>> = samples.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            q[i * n + i] = 1.0;
            for j in 0..i {
                let k = (-gamma * sq_dist(&rows[i], &rows[j])).exp();
                q[i * n + j] = k;
                q[j * n + i] = k;
            }
        }
        Gram::Dense { n, q }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        match self {
            Gram::Dense { n, q } => &q[i * *n..(i + 1) * *n],
            Gram::Lazy { samples, gamma, row } => {
                let xi = samples.row(i);
                for (j, out) in row.iter_mut().enumerate() {
                    let xj = samples.row(j);
                    let d: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    *out = (-*gamma * d).exp();
                }
                row
            }
        }
    }
}

/// Trains on the rows of `samples` with the γ given in `params`.
pub fn fit(samples: ArrayView2<'_, f64>, params: &OcSvmParams) -> Result<OcSvmModel> {
    params.validate()?;
    let (n, dim) = samples.dim();
    if n == 0 || dim == 0 {
        return Err(Error::Dimensions(format!("cannot fit on {n}x{dim} samples")));
    }
    if n == 1 {
        return Ok(OcSvmModel {
            dim,
            support_vectors: samples.row(0).to_vec(),
            alpha: vec![1.0],
            rho: 1.0,
            gamma: params.gamma,
            converged: true,
            iterations: 0,
        });
    }

    let nu_n = params.nu * n as f64;
    let upper = 1.0 / nu_n;
    // Same starting point as LIBSVM: the first ⌊νn⌋ coefficients at the bound.
    let mut alpha = vec![0.0; n];
    let full = (nu_n.floor() as usize).min(n);
    for a in alpha.iter_mut().take(full) {
        *a = upper;
    }
    if full < n {
        alpha[full] = (1.0 - full as f64 * upper).max(0.0);
    }

    let mut gram = Gram::new(samples, params.gamma);
    let mut grad = vec![0.0; n];
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            let row = gram.row(i);
            for (g, q) in grad.iter_mut().zip(row) {
                *g += a * q;
            }
        }
    }

    // The tolerance bounds the KKT gap both in this normalization and in
    // LIBSVM's, where α is scaled by νn.
    let tol = params.tol / nu_n.max(1.0);
    let max_steps = ((params.max_iter / (2 * n as u64)) as usize).max(1);
    let mut converged = false;
    let mut steps = 0;
    while steps < max_steps {
        // i: most violating coefficient that can grow, j: one that can shrink
        let mut i = usize::MAX;
        let mut j = usize::MAX;
        let (mut g_min, mut g_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..n {
            if alpha[t] < upper && grad[t] < g_min {
                g_min = grad[t];
                i = t;
            }
            if alpha[t] > 0.0 && grad[t] > g_max {
                g_max = grad[t];
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || g_max - g_min <= tol {
            converged = true;
            break;
        }
        steps += 1;

        let q_i = gram.row(i).to_vec();
        let q_j = gram.row(j);
        let curvature = (q_i[i] + q_j[j] - 2.0 * q_i[j]).max(1e-12);
        let room_i = upper - alpha[i];
        let room_j = alpha[j];
        let mut delta = (grad[j] - grad[i]) / curvature;
        if delta >= room_i {
            delta = room_i;
        }
        if delta >= room_j {
            delta = room_j;
        }
        if delta == room_i {
            alpha[i] = upper;
        } else {
            alpha[i] += delta;
        }
        if delta == room_j {
            alpha[j] = 0.0;
        } else {
            alpha[j] -= delta;
        }
        for t in 0..n {
            grad[t] += delta * (q_i[t] - q_j[t]);
        }
    }

    let rho = offset(&alpha, &grad, upper);
    let mut support_vectors = Vec::new();
    let mut coef = Vec::new();
    for (t, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.extend(samples.row(t).iter().copied());
            coef.push(a);
        }
    }
    if !converged {
        log::debug!("one-class SVM stopped after {steps} steps without converging");
    }
    Ok(OcSvmModel {
        dim,
        support_vectors,
        alpha: coef,
        rho,
        gamma: params.gamma,
        converged,
        iterations: steps,
    })
}

/// `ρ` is the gradient on free coefficients, or the midpoint of the feasible
/// interval when every coefficient sits at a bound.
fn offset(alpha: &[f64], grad: &[f64], upper: f64) -> f64 {
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&a, &g) in alpha.iter().zip(grad) {
        if a >= upper {
            lb = lb.max(g);
        } else if a <= 0.0 {
            ub = ub.min(g);
        } else {
            sum += g;
            free += 1;
        }
    }
    if free > 0 {
        sum / free as f64
    } else if ub.is_infinite() {
        lb
    } else if lb.is_infinite() {
        ub
    } else {
        0.5 * (ub + lb)
    }
}

/// Fits with `γ = gamma_scale(samples)`, falling back to `γ = 1` for
/// constant data.
pub fn fit_auto_gamma(samples: ArrayView2<'_, f64>, params: &OcSvmParams) -> Result<OcSvmModel> {
    let gamma = match gamma_scale(samples) {
        Ok(g) => g,
        Err(Error::ZeroVariance) => 1.0,
        Err(Error::InvalidParameter(_)) if samples.nrows() == 1 => 1.0,
        Err(e) => return Err(e),
    };
    fit(samples, &OcSvmParams { gamma, ..*params })
}

pub fn decision(model: &OcSvmModel, x: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != model.dim {
        return Err(Error::Dimensions(format!(
            "query has {} features, model expects {}",
            x.len(),
            model.dim
        )));
    }
    match x.as_slice() {
        Some(s) => Ok(model.decide(s)),
        None => Ok(model.decide(&x.to_vec())),
    }
}

/// Negated decision value: larger means more outlying.
pub fn outlier_likelihood(model: &OcSvmModel, x: ArrayView1<'_, f64>) -> Result<f64> {
    decision(model, x).map(|f| -f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, scale: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
    }

    /// Euclidean projection onto {Σα = 1, 0 ≤ α ≤ c} by bisection on the shift.
    fn project(y: &[f64], c: f64) -> Vec<f64> {
        let total = |tau: f64| y.iter().map(|v| (v - tau).clamp(0.0, c)).sum::<f64>();
        let (mut lo, mut hi) = (
            y.iter().cloned().fold(f64::INFINITY, f64::min) - c - 1.0,
            y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0,
        );
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(mid) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tau = 0.5 * (lo + hi);
        y.iter().map(|v| (v - tau).clamp(0.0, c)).collect()
    }

    /// Dense projected gradient on the box-simplex; returns (α, ρ).
    fn projected_gradient_oracle(x: &Array2<f64>, nu: f64, gamma: f64) -> (Vec<f64>, f64) {
        let n = x.nrows();
        let q = Array2::from_shape_fn((n, n), |(i, j)| {
            let d: f64 = x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
            (-gamma * d).exp()
        });
        let c = 1.0 / (nu * n as f64);
        let lipschitz = q.rows().into_iter().map(|r| r.sum()).fold(0.0, f64::max);
        let mut alpha = vec![1.0 / n as f64; n];
        for _ in 0..200_000 {
            let g = q.dot(&Array1::from(alpha.clone()));
            let step: Vec<f64> = alpha.iter().zip(g.iter()).map(|(a, gi)| a - gi / lipschitz).collect();
            alpha = project(&step, c);
        }
        let g = q.dot(&Array1::from(alpha.clone()));
        let free: Vec<f64> = (0..n).filter(|&i| alpha[i] > 1e-9 && alpha[i] < c - 1e-9).map(|i| g[i]).collect();
        let rho = free.iter().sum::<f64>() / free.len() as f64;
        (alpha, rho)
    }

    #[test]
    fn kernel_values() {
        assert_eq!(rbf_kernel(&[0.3, 0.1], &[0.3, 0.1], 5.0).unwrap(), 1.0);
        assert!((rbf_kernel(&[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((rbf_kernel(&[0.0, 0.0], &[9.0, 4.0], 1e-12).unwrap() - 1.0).abs() < 1e-9);
        assert!(rbf_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn gamma_scale_cases() {
        // d = 2, entries {0, 1}: population variance 0.25
        let x = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!((gamma_scale(x.view()).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(gamma_scale(Array2::from_elem((4, 3), 0.2).view()), Err(Error::ZeroVariance)));

        let x = gaussian(20, 8, 1.0, 3);
        let flat: Vec<f64> = x.iter().copied().collect();
        let mean = flat.iter().sum::<f64>() / 160.0;
        let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 160.0;
        assert!((gamma_scale(x.view()).unwrap() - 1.0 / (8.0 * var)).abs() < 1e-12);
    }

    #[test]
    fn gamma_scale_formula() {
        // d = 36 with var 0.5, d = 100 with var 0.01
        let half: Vec<f64> = (0..72).map(|i| if i % 2 == 0 { 0.0 } else { 2f64.sqrt() }).collect();
        let x = Array2::from_shape_vec((2, 36), half).unwrap();
        assert!((gamma_scale(x.view()).unwrap() - 1.0 / 18.0).abs() < 1e-12);
        let tiny: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { -0.1 } else { 0.1 }).collect();
        let x = Array2::from_shape_vec((2, 100), tiny).unwrap();
        assert!((gamma_scale(x.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_lie_on_boundary() {
        let x = Array2::from_elem((10, 3), 0.4);
        let p = OcSvmParams::default();
        let m = fit_auto_gamma(x.view(), &p).unwrap();
        for row in x.rows() {
            assert!(decision(&m, row).unwrap() >= -p.tol);
        }
    }

    #[test]
    fn single_point_model() {
        let x = arr2(&[[0.2, 0.7]]);
        let m = fit(x.view(), &OcSvmParams::default()).unwrap();
        assert_eq!(m.n_support(), 1);
        assert!(decision(&m, x.row(0)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn tight_cluster_training_errors() {
        let x = gaussian(50, 2, 0.05, 7);
        let p = OcSvmParams::default();
        let m = fit_auto_gamma(x.view(), &p).unwrap();
        let errors = x.rows().into_iter().filter(|r| decision(&m, *r).unwrap() < 0.0).count();
        assert!(errors as f64 / 50.0 <= 0.1 + 2.0 / 50.0, "{errors} errors");
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let x = arr2(&[[0.0, 0.0], [0.3, 0.1], [1.0, 0.9], [0.2, 0.5], [2.0, 0.0], [0.6, 0.6]]);
        for nu in [0.5, 0.3] {
            let gamma = 0.8;
            let p = OcSvmParams { nu, gamma, tol: 1e-10, max_iter: 10_000_000 };
            let m = fit(x.view(), &p).unwrap();
            assert!(m.converged());
            let (oracle, rho) = projected_gradient_oracle(&x, nu, gamma);
            // map support vectors back to training indices
            let mut alpha = vec![0.0; 6];
            for s in 0..m.n_support() {
                let idx = (0..6).find(|&i| x.row(i).to_vec() == m.support_vector(s)).unwrap();
                alpha[idx] = m.alpha()[s];
            }
            for (a, b) in alpha.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-4, "nu {nu}: {alpha:?} vs {oracle:?}");
            }
            assert!((m.rho() - rho).abs() < 1e-4);
            for q in [arr1(&[0.1, 0.2]), arr1(&[1.5, 0.4]), arr1(&[-0.5, 0.9])] {
                let f_oracle: f64 = (0..6)
                    .map(|i| oracle[i] * rbf_kernel(&x.row(i).to_vec(), q.as_slice().unwrap(), gamma).unwrap())
                    .sum::<f64>()
                    - rho;
                assert!((decision(&m, q.view()).unwrap() - f_oracle).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn dual_feasibility_and_nu_property() {
        for seed in 0..20 {
            let x = gaussian(50, 8, 1.0, 100 + seed);
            let p = OcSvmParams::default();
            let m = fit_auto_gamma(x.view(), &p).unwrap();
            let sum: f64 = m.alpha().iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            let c = 1.0 / (0.1 * 50.0);
            assert!(m.alpha().iter().all(|&a| a >= 0.0 && a <= c + 1e-12));
            let errors = x.rows().into_iter().filter(|r| decision(&m, *r).unwrap() < -p.tol).count();
            assert!(errors as f64 / 50.0 <= 0.1 + 2.0 / 50.0);
            assert!(m.n_support() as f64 / 50.0 >= 0.1 - 2.0 / 50.0);
        }
    }

    #[test]
    fn decision_far_away_and_lipschitz() {
        let x = gaussian(30, 3, 1.0, 5);
        let m = fit_auto_gamma(x.view(), &OcSvmParams::default()).unwrap();
        let far = arr1(&[1e3, -1e3, 1e3]);
        assert!((decision(&m, far.view()).unwrap() + m.rho()).abs() < 1e-12);

        let l = (2.0 * m.gamma() / std::f64::consts::E).sqrt() * m.alpha().iter().sum::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let b = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let dist: f64 = (&a - &b).mapv(|v: f64| v * v).sum().sqrt();
            let df = (decision(&m, a.view()).unwrap() - decision(&m, b.view()).unwrap()).abs();
            assert!(df <= l * dist + 1e-12);
        }
        assert!(decision(&m, arr1(&[0.0]).view()).is_err());
    }

    #[test]
    fn likelihood_is_negated_decision() {
        let x = gaussian(40, 2, 0.3, 8);
        let m = fit_auto_gamma(x.view(), &OcSvmParams::default()).unwrap();
        let center = arr1(&[0.0, 0.0]);
        let distant = arr1(&[3.0, 3.0]);
        assert!(outlier_likelihood(&m, center.view()).unwrap() < outlier_likelihood(&m, distant.view()).unwrap());

        let queries = gaussian(10, 2, 1.0, 21);
        let mut by_l: Vec<usize> = (0..10).collect();
        let mut by_f: Vec<usize> = (0..10).collect();
        let l: Vec<f64> = queries.rows().into_iter().map(|q| outlier_likelihood(&m, q).unwrap()).collect();
        let f: Vec<f64> = queries.rows().into_iter().map(|q| decision(&m, q).unwrap()).collect();
        for i in 0..10 {
            assert_eq!(l[i] + f[i], 0.0);
        }
        by_l.sort_by(|&a, &b| l[a].total_cmp(&l[b]));
        by_f.sort_by(|&a, &b| f[b].total_cmp(&f[a]));
        assert_eq!(by_l, by_f);
    }

    #[test]
    fn deterministic_fit() {
        let x = gaussian(60, 4, 1.0, 12);
        let p = OcSvmParams::default();
        assert_eq!(fit_auto_gamma(x.view(), &p).unwrap(), fit_auto_gamma(x.view(), &p).unwrap());
    }

    #[test]
    fn rejects_bad_params() {
        let x = gaussian(5, 2, 1.0, 1);
        assert!(fit(x.view(), &OcSvmParams { nu: 0.0, ..Default::default() }).is_err());
        assert!(fit(x.view(), &OcSvmParams { gamma: -1.0, ..Default::default() }).is_err());
        assert!(fit(x.view(), &OcSvmParams { tol: 0.0, ..Default::default() }).is_err());
    }
}
