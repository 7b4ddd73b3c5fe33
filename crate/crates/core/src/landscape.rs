//! Second-order analysis of the population Meta-LoRA loss.
//!
//! Parameters are flattened as `[vec(A); vec(U_1); ...; vec(U_T)]` with
//! column-major `vec`, matching [`MetaParams::to_flat`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frob_sq, min_eigenpair, null_space, outer_self, sym_eigen_sorted, symmetrize};
use crate::objectives::{meta_grad_population, meta_loss_population, MetaParams, PopulationObjective};
use crate::rng::{gaussian_matrix, labels, uniform_sphere, RngSpec};
use crate::schema;
use crate::solvers::{descend, train_meta_gd, TrainConfig, TrainTrace};
use crate::task_model::GroundTruth;

/// Largest Hessian order assembled densely.
pub const HESSIAN_ORDER_LIMIT: usize = 5000;
/// Relative tolerance for the eigenvector and kernel conditions of the
/// two-task curvature construction.
pub const PRECONDITION_TOL: f64 = 1e-8;
/// Largest flattened factor dimension for which a full net is attempted.
pub const FULL_NET_MAX_DIM: usize = 8;

fn check_factors(u: &[DMatrix<f64>], gt: &GroundTruth) -> Result<()> {
    if u.len() != gt.tasks {
        return Err(Error::Shape(format!(
            "{} factors for {} tasks",
            u.len(),
            gt.tasks
        )));
    }
    if u.iter().any(|m| m.shape() != (gt.d, gt.k)) {
        return Err(Error::Shape(format!("every U_t must be {}x{}", gt.d, gt.k)));
    }
    Ok(())
}

/// `S_t = U_t U_t^T - U_t* U_t*^T`.
fn shifted_grams(u: &[DMatrix<f64>], gt: &GroundTruth) -> Vec<DMatrix<f64>> {
    u.iter()
        .zip(gt.retrain_factors())
        .map(|(u, us)| outer_self(u) - outer_self(us))
        .collect()
}

/// `B_t = S_t - (1/T) sum_s S_s`. The `B_t` sum to zero by construction.
pub fn compute_b_matrices(u: &[DMatrix<f64>], gt: &GroundTruth) -> Result<Vec<DMatrix<f64>>> {
    check_factors(u, gt)?;
    let s = shifted_grams(u, gt);
    let mean = s.iter().fold(DMatrix::zeros(gt.d, gt.d), |acc, m| acc + m) / gt.tasks as f64;
    Ok(s.into_iter().map(|m| m - &mean).collect())
}

/// Jacobian of `vec(U U^T)` with respect to `vec(U)`; order `d^2 x dk`.
fn gram_jacobian(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = u.shape();
    let mut j = DMatrix::zeros(d * d, d * k);
    for col in 0..k {
        for i in 0..d {
            let c = col * d + i;
            // d(U U^T) along e_i e_col^T is e_i u_col^T + u_col e_i^T.
            for r in 0..d {
                j[(r * d + i, c)] += u[(r, col)];
                j[(i * d + r, c)] += u[(r, col)];
            }
        }
    }
    j
}

fn check_order(p: &MetaParams) -> Result<usize> {
    let order = p.flat_len();
    if order > HESSIAN_ORDER_LIMIT {
        return Err(Error::TooLarge {
            order,
            limit: HESSIAN_ORDER_LIMIT,
        });
    }
    Ok(order)
}

/// Residual `E_t = A + U_t U_t^T - A* - U_t* U_t*^T` for each task.
fn residuals(p: &MetaParams, gt: &GroundTruth) -> Vec<DMatrix<f64>> {
    p.u.iter()
        .zip(&gt.u_star)
        .map(|(u, us)| (&p.a - &gt.a_star) + (outer_self(u) - outer_self(us)))
        .collect()
}

/// `J_t^T J_t + 2 (I_k kron sym(E_t))`, the Hessian block of `U_t` alone.
fn factor_block(j: &DMatrix<f64>, e: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let d = e.nrows();
    let mut h = j.transpose() * j;
    let es = symmetrize(e) * 2.0;
    for c in 0..k {
        let mut blk = h.view_mut((c * d, c * d), (d, d));
        blk += &es;
    }
    h
}

/// Dense Hessian of the population meta loss in the flattened order.
pub fn hessian_meta(p: &MetaParams, gt: &GroundTruth) -> Result<DMatrix<f64>> {
    p.check_against(gt)?;
    let order = check_order(p)?;
    let (d, k, tasks) = (gt.d, gt.k, gt.tasks);
    let dd = d * d;
    let dk = d * k;
    let mut h = DMatrix::zeros(order, order);
    h.view_mut((0, 0), (dd, dd))
        .fill_with_identity();
    h.view_mut((0, 0), (dd, dd)).scale_mut(tasks as f64);
    for (t, (u, e)) in p.u.iter().zip(residuals(p, gt)).enumerate() {
        let j = gram_jacobian(u);
        let off = dd + t * dk;
        h.view_mut((0, off), (dd, dk)).copy_from(&j);
        h.view_mut((off, 0), (dk, dd)).copy_from(&j.transpose());
        h.view_mut((off, off), (dk, dk))
            .copy_from(&factor_block(&j, &e, k));
    }
    Ok(h)
}

/// `v^T H v` evaluated without forming `H`.
pub fn hessian_quadratic_form(p: &MetaParams, gt: &GroundTruth, v: &[f64]) -> Result<f64> {
    p.check_against(gt)?;
    let dv = MetaParams::from_flat(v, gt.d, gt.k, gt.tasks)?;
    let mut q = 0.0;
    for ((u, du), e) in p.u.iter().zip(&dv.u).zip(residuals(p, gt)) {
        let de = &dv.a + du * u.transpose() + u * du.transpose();
        q += frob_sq(&de) + 2.0 * e.component_mul(&(du * du.transpose())).sum();
    }
    Ok(q)
}

/// Schur complement of the `A` block: `H_UU - H_UA (T I)^{-1} H_AU`.
pub fn schur_complement_q(p: &MetaParams, gt: &GroundTruth) -> Result<DMatrix<f64>> {
    p.check_against(gt)?;
    check_order(p)?;
    let (d, k, tasks) = (gt.d, gt.k, gt.tasks);
    let dk = d * k;
    let js: Vec<_> = p.u.iter().map(gram_jacobian).collect();
    let es = residuals(p, gt);
    let inv_t = 1.0 / tasks as f64;
    let mut q = DMatrix::zeros(tasks * dk, tasks * dk);
    for t in 0..tasks {
        for s in 0..tasks {
            let mut blk = js[t].transpose() * &js[s] * (-inv_t);
            if s == t {
                blk += factor_block(&js[t], &es[t], k);
            }
            q.view_mut((t * dk, s * dk), (dk, dk)).copy_from(&blk);
        }
    }
    Ok(q)
}

fn difference_of_grams(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    outer_self(b) - outer_self(a)
}

/// Two-task quadratic form
/// `g(alpha; z) = ||U_1 alpha_1 + U_2 alpha_2||^2 + lambda (||alpha_1||^2 - ||alpha_2||^2)`.
///
/// `z` must be a unit eigenvector of `U_2* U_2*^T - U_1* U_1*^T` with
/// eigenvalue `lambda` and lie in the kernel of `U_2 U_2^T - U_1 U_1^T`. At a
/// first-order stationary point this equals the Schur-complement form along
/// [`embed_alpha_z`].
pub fn g_quadratic_form(
    alpha: &DVector<f64>,
    z: &DVector<f64>,
    u_hat: (&DMatrix<f64>, &DMatrix<f64>),
    lambda: f64,
    gt: &GroundTruth,
) -> Result<f64> {
    let (u1, u2) = u_hat;
    let k = u1.ncols();
    if gt.tasks != 2 {
        return Err(Error::Precondition("the g form is defined for T = 2".into()));
    }
    if alpha.len() != 2 * k || u2.shape() != u1.shape() || z.len() != u1.nrows() || z.len() != gt.d {
        return Err(Error::Shape("alpha must have 2k entries and z must have d".into()));
    }
    let star = difference_of_grams(&gt.u_star[0], &gt.u_star[1]);
    let hat = difference_of_grams(u1, u2);
    let eig_res = (&star * z - z * lambda).norm();
    let ker_res = (&hat * z).norm();
    if (z.norm() - 1.0).abs() > PRECONDITION_TOL
        || eig_res > PRECONDITION_TOL * star.norm().max(1.0)
        || ker_res > PRECONDITION_TOL * hat.norm().max(1.0)
    {
        return Err(Error::Precondition(format!(
            "z is not a kernel eigenvector: eigen residual {eig_res:.3e}, kernel residual {ker_res:.3e}"
        )));
    }
    Ok(g_value(alpha, u1, u2, lambda))
}

fn g_value(alpha: &DVector<f64>, u1: &DMatrix<f64>, u2: &DMatrix<f64>, lambda: f64) -> f64 {
    let k = u1.ncols();
    let a1 = alpha.rows(0, k);
    let a2 = alpha.rows(k, k);
    (u1 * a1 + u2 * a2).norm_squared() + lambda * (a1.norm_squared() - a2.norm_squared())
}

/// Coefficient matrix `G` with `g(alpha; z) = alpha^T G alpha`.
fn g_matrix(u1: &DMatrix<f64>, u2: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let k = u1.ncols();
    let w = DMatrix::from_fn(u1.nrows(), 2 * k, |r, c| {
        if c < k {
            u1[(r, c)]
        } else {
            u2[(r, c - k)]
        }
    });
    let mut g = w.transpose() * w;
    for i in 0..k {
        g[(i, i)] += lambda;
        g[(k + i, k + i)] -= lambda;
    }
    g
}

/// Direction in factor space whose Schur-complement form equals
/// `g(alpha; z)`: `U_1` moves along `z alpha_1^T` and `U_2` along
/// `-z alpha_2^T`. The sign on the second block reflects the minus sign of the
/// off-diagonal Schur blocks.
pub fn embed_alpha_z(alpha: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
    let k = alpha.len() / 2;
    let d = z.len();
    let mut v = DVector::zeros(2 * d * k);
    for c in 0..k {
        for r in 0..d {
            v[c * d + r] = z[r] * alpha[c];
            v[d * k + c * d + r] = -z[r] * alpha[k + c];
        }
    }
    v
}

/// Completes a factor-space direction with the `A` component that minimizes
/// the quadratic form, `dA = -(1/T) sum_t (dU_t U_t^T + U_t dU_t^T)`. The full
/// Hessian form of the result equals the Schur-complement form of `v_u`.
pub fn lift_to_full(p: &MetaParams, v_u: &DVector<f64>) -> Result<DVector<f64>> {
    let (d, k, tasks) = (p.d(), p.k(), p.tasks());
    if v_u.len() != tasks * d * k {
        return Err(Error::Shape("factor direction has the wrong length".into()));
    }
    let mut da = DMatrix::zeros(d, d);
    for (t, u) in p.u.iter().enumerate() {
        let du = DMatrix::from_column_slice(d, k, &v_u.as_slice()[t * d * k..(t + 1) * d * k]);
        da -= (&du * u.transpose() + u * du.transpose()) / tasks as f64;
    }
    let mut out = Vec::with_capacity(d * d + v_u.len());
    out.extend_from_slice(da.as_slice());
    out.extend_from_slice(v_u.as_slice());
    Ok(DVector::from_vec(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Construction {
    /// `U_1 alpha_1 + U_2 alpha_2 = 0` with unequal block norms.
    KernelCombination,
    /// `alpha_2` picks a vector of `im U_2` that also lies in `im U_1`.
    SharedImage,
    /// The case construction gave `g = 0`; stepped along `-grad g`.
    GradientNudge,
    /// Smallest eigenvector of `G(lambda)` for one admissible `z`.
    ReducedEigen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureDirection {
    /// Unit vector in the full flattened space.
    #[serde(with = "schema::vector")]
    pub direction: DVector<f64>,
    #[serde(with = "schema::vector")]
    pub alpha: DVector<f64>,
    #[serde(with = "schema::vector")]
    pub z: DVector<f64>,
    pub lambda: f64,
    pub g_value: f64,
    /// `v^T H v` for the unit `direction`.
    pub rayleigh_quotient: f64,
    pub construction: Construction,
    /// `N^-` of `U_2 U_2^T - U_1 U_1^T`.
    pub negative_count: usize,
}

/// Why no direction was produced, with the numbers that decided it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoCurvature {
    pub reason: String,
    pub grad_norm: f64,
    pub loss: f64,
    pub eigen_residual: f64,
    pub kernel_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CurvatureSearch {
    Found(CurvatureDirection),
    Absent(NoCurvature),
}

impl CurvatureSearch {
    pub fn direction(&self) -> Option<&CurvatureDirection> {
        match self {
            Self::Found(c) => Some(c),
            Self::Absent(_) => None,
        }
    }
}

struct KernelEigen {
    z: DVector<f64>,
    lambda: f64,
    eigen_residual: f64,
}

/// Eigenvectors of `star` restricted to the orthogonal complement of
/// `im U_1 + im U_2` with nonzero eigenvalue.
fn kernel_eigenvectors(u1: &DMatrix<f64>, u2: &DMatrix<f64>, star: &DMatrix<f64>) -> Vec<KernelEigen> {
    let d = u1.nrows();
    let k = u1.ncols();
    let joint = DMatrix::from_fn(d, 2 * k, |r, c| if c < k { u1[(r, c)] } else { u2[(r, c - k)] });
    // Complement of the column space is the null space of joint^T.
    let perp = null_space(&joint.transpose(), PRECONDITION_TOL);
    if perp.ncols() == 0 {
        return Vec::new();
    }
    let restricted = perp.transpose() * star * &perp;
    let (vals, vecs) = sym_eigen_sorted(&restricted);
    let scale = star.norm().max(f64::MIN_POSITIVE);
    vals.iter()
        .enumerate()
        .filter(|(_, &l)| l.abs() > PRECONDITION_TOL * scale)
        .map(|(i, &lambda)| {
            let z = (&perp * vecs.column(i)).normalize();
            let eigen_residual = (star * &z - &z * lambda).norm() / scale;
            KernelEigen {
                z,
                lambda,
                eigen_residual,
            }
        })
        .collect()
}

/// Negative-curvature direction at a two-task first-order stationary point
/// with nonzero loss.
pub fn find_negative_curvature_t2(p: &MetaParams, gt: &GroundTruth, tol: f64) -> Result<CurvatureSearch> {
    p.check_against(gt)?;
    let grad_norm = meta_grad_population(p, gt)?.norm();
    let loss = meta_loss_population(p, gt)?;
    let absent = |reason: &str, eig: f64, ker: f64| {
        Ok(CurvatureSearch::Absent(NoCurvature {
            reason: reason.to_string(),
            grad_norm,
            loss,
            eigen_residual: eig,
            kernel_residual: ker,
        }))
    };
    if gt.tasks != 2 {
        return absent("construction requires T = 2", f64::NAN, f64::NAN);
    }
    if grad_norm >= tol {
        return absent("not first-order stationary", f64::NAN, f64::NAN);
    }
    if loss <= tol {
        return absent("zero-loss point has no negative curvature", f64::NAN, f64::NAN);
    }
    let (u1, u2) = (&p.u[0], &p.u[1]);
    let k = gt.k;
    let star = difference_of_grams(&gt.u_star[0], &gt.u_star[1]);
    let hat = difference_of_grams(u1, u2);
    let hat_scale = hat.norm().max(1.0);
    let candidates: Vec<_> = kernel_eigenvectors(u1, u2, &star)
        .into_iter()
        .filter(|c| c.eigen_residual <= PRECONDITION_TOL)
        .collect();
    if candidates.is_empty() {
        return absent("no admissible kernel eigenvector", f64::NAN, f64::NAN);
    }
    let negatives = crate::linalg::negative_count(&hat, PRECONDITION_TOL * hat_scale);
    let g_tol = 1e-12 * (1.0 + u1.norm_squared() + u2.norm_squared());

    let finish = |alpha: DVector<f64>, cand: &KernelEigen, construction| -> Result<CurvatureSearch> {
        let g = g_value(&alpha, u1, u2, cand.lambda);
        let full = lift_to_full(p, &embed_alpha_z(&alpha, &cand.z))?;
        let norm = full.norm();
        let direction = full / norm;
        let rq = hessian_quadratic_form(p, gt, direction.as_slice())?;
        Ok(CurvatureSearch::Found(CurvatureDirection {
            direction,
            alpha,
            z: cand.z.clone(),
            lambda: cand.lambda,
            g_value: g,
            rayleigh_quotient: rq,
            construction,
            negative_count: negatives,
        }))
    };
    let nudge = |alpha: &DVector<f64>, lambda: f64| -> Option<DVector<f64>> {
        let gm = g_matrix(u1, u2, lambda);
        let grad = &gm * alpha * 2.0;
        if grad.norm() == 0.0 {
            return None;
        }
        let mut eta = 1.0 / (1.0 + gm.norm());
        for _ in 0..60 {
            let cand = alpha - &grad * eta;
            if g_value(&cand, u1, u2, lambda) < -g_tol {
                return Some(cand);
            }
            eta *= 0.5;
        }
        None
    };

    let joint = DMatrix::from_fn(gt.d, 2 * k, |r, c| if c < k { u1[(r, c)] } else { u2[(r, c - k)] });
    let scale_tol = PRECONDITION_TOL * joint.norm().max(1.0);
    if negatives < k {
        // Case 1: combine the columns into zero.
        let kernel = null_space(&joint, PRECONDITION_TOL);
        for i in 0..kernel.ncols() {
            let alpha = kernel.column(i).into_owned();
            if (&joint * &alpha).norm() > scale_tol {
                continue;
            }
            let diff = alpha.rows(0, k).norm_squared() - alpha.rows(k, k).norm_squared();
            for cand in &candidates {
                if cand.lambda * diff < 0.0 && g_value(&alpha, u1, u2, cand.lambda) < -g_tol {
                    return finish(alpha, cand, Construction::KernelCombination);
                }
            }
            if diff.abs() <= 1e-12 {
                for cand in &candidates {
                    if let Some(a) = nudge(&alpha, cand.lambda) {
                        return finish(a, cand, Construction::GradientNudge);
                    }
                }
            }
        }
    } else if negatives == k {
        // Case 2: y = U_2 b = U_1 a lies in both images.
        let stacked = DMatrix::from_fn(gt.d, 2 * k, |r, c| if c < k { u1[(r, c)] } else { -u2[(r, c - k)] });
        let shared = null_space(&stacked, PRECONDITION_TOL);
        for i in 0..shared.ncols() {
            let col = shared.column(i);
            let b = col.rows(k, k).into_owned();
            let bn = b.norm();
            if bn <= PRECONDITION_TOL {
                continue;
            }
            let mut alpha = DVector::zeros(2 * k);
            alpha.rows_mut(0, k).copy_from(&(-col.rows(0, k) / bn));
            alpha.rows_mut(k, k).copy_from(&(b / bn));
            for cand in candidates.iter().filter(|c| c.lambda > 0.0) {
                let g = g_value(&alpha, u1, u2, cand.lambda);
                if g < -g_tol {
                    return finish(alpha, cand, Construction::SharedImage);
                }
                if let Some(a) = nudge(&alpha, cand.lambda) {
                    return finish(a, cand, Construction::GradientNudge);
                }
            }
        }
    }
    // Outside the proof's normalizations (for instance rank-deficient
    // factors) the best alpha for each admissible z is still available.
    let mut best: Option<(f64, DVector<f64>, &KernelEigen)> = None;
    for cand in &candidates {
        let (val, vec) = min_eigenpair(&g_matrix(u1, u2, cand.lambda));
        if val < -g_tol && best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, vec, cand));
        }
    }
    match best {
        Some((_, alpha, cand)) => finish(alpha, cand, Construction::ReducedEigen),
        None => {
            let ker = candidates
                .iter()
                .map(|c| (&hat * &c.z).norm())
                .fold(0.0, f64::max);
            let eig = candidates.iter().map(|c| c.eigen_residual).fold(0.0, f64::max);
            absent("no alpha with negative g", eig, ker)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    GlobalMinimum,
    StrictSaddle,
    CandidateLocalMinimum,
    NotStationary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryReport {
    pub grad_norm: f64,
    pub min_hessian_eig: f64,
    pub classification: Classification,
    #[serde(with = "schema::opt_vector")]
    pub curvature_direction: Option<DVector<f64>>,
    /// Rayleigh quotient of `curvature_direction`, when present.
    pub curvature_rayleigh: Option<f64>,
    pub loss_value: f64,
    pub b_norms: Vec<f64>,
    /// Loss below which a stationary point counts as a global minimum.
    pub loss_tolerance: f64,
}

pub fn classify_stationary_point(
    p: &MetaParams,
    gt: &GroundTruth,
    grad_tol: f64,
    eig_tol: f64,
) -> Result<StationaryReport> {
    p.check_against(gt)?;
    let grad_norm = meta_grad_population(p, gt)?.norm();
    let loss_value = meta_loss_population(p, gt)?;
    let b_norms = compute_b_matrices(&p.u, gt)?
        .iter()
        .map(|b| b.norm())
        .collect();
    let h = hessian_meta(p, gt)?;
    let (min_eig, min_vec) = min_eigenpair(&h);
    let mut report = StationaryReport {
        grad_norm,
        min_hessian_eig: min_eig,
        classification: Classification::NotStationary,
        curvature_direction: None,
        curvature_rayleigh: None,
        loss_value,
        b_norms,
        loss_tolerance: grad_tol,
    };
    if grad_norm >= grad_tol {
        return Ok(report);
    }
    if loss_value < grad_tol {
        report.classification = Classification::GlobalMinimum;
        return Ok(report);
    }
    if min_eig < -eig_tol {
        report.classification = Classification::StrictSaddle;
        let analytic = if gt.tasks == 2 {
            find_negative_curvature_t2(p, gt, grad_tol)?
                .direction()
                .filter(|c| c.rayleigh_quotient < 0.0)
                .map(|c| (c.direction.clone(), c.rayleigh_quotient))
        } else {
            None
        };
        let (dir, rq) = match analytic {
            Some(found) => found,
            None => {
                let rq = hessian_quadratic_form(p, gt, min_vec.as_slice())?;
                (min_vec, rq)
            }
        };
        report.curvature_direction = Some(dir);
        report.curvature_rayleigh = Some(rq);
    } else {
        report.classification = Classification::CandidateLocalMinimum;
    }
    Ok(report)
}

/// `L_hat(U) = sum_t ||B_t||^2` (no factor 1/2) and its gradient `4 B_t U_t`.
pub fn reduced_loss_and_grad(u: &[DMatrix<f64>], gt: &GroundTruth) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let b = compute_b_matrices(u, gt)?;
    let loss = b.iter().map(frob_sq).sum();
    let grad = b.iter().zip(u).map(|(b, u)| b * u * 4.0).collect();
    Ok((loss, grad))
}

fn flatten(u: &[DMatrix<f64>]) -> Vec<f64> {
    u.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

fn unflatten(x: &[f64], d: usize, k: usize) -> Vec<DMatrix<f64>> {
    x.chunks(d * k)
        .map(|c| DMatrix::from_column_slice(d, k, c))
        .collect()
}

/// Analytic Hessian of `L_hat`: twice the Schur complement at the optimal `A`.
pub fn reduced_hessian(u: &[DMatrix<f64>], gt: &GroundTruth) -> Result<DMatrix<f64>> {
    check_factors(u, gt)?;
    let p = MetaParams {
        a: DMatrix::zeros(gt.d, gt.d),
        u: u.to_vec(),
    }
    .with_optimal_a(gt)?;
    Ok(schur_complement_q(&p, gt)? * 2.0)
}

/// Central finite differences of the analytic reduced gradient, symmetrized.
pub fn reduced_hessian_fd(u: &[DMatrix<f64>], gt: &GroundTruth, h: f64) -> Result<DMatrix<f64>> {
    check_factors(u, gt)?;
    let x = flatten(u);
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let gp = flatten(&reduced_loss_and_grad(&unflatten(&xp, gt.d, gt.k), gt)?.1);
        let gm = flatten(&reduced_loss_and_grad(&unflatten(&xm, gt.d, gt.k), gt)?.1);
        for j in 0..n {
            hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    Ok(symmetrize(&hess))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeStrategy {
    /// Levenberg-Marquardt on `||grad L_hat||^2` straight from the random
    /// start; converges to stationary points of every index.
    GradientZeros,
    /// Gradient descent on `L_hat` first, then the same polish; biased
    /// toward minima.
    DescentThenPolish,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub strategy: ProbeStrategy,
    pub starts: usize,
    /// Scale of the random starting factors.
    pub init_scale: f64,
    pub grad_tol: f64,
    pub min_loss: f64,
    pub min_eig: f64,
    /// Levenberg-Marquardt iterations on `||grad L_hat||^2`.
    pub polish_iters: usize,
    pub fd_step: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            strategy: ProbeStrategy::GradientZeros,
            starts: 500,
            init_scale: 1.0,
            grad_tol: 1e-8,
            min_loss: 1e-4,
            min_eig: 1e-8,
            polish_iters: 500,
            fd_step: 1e-5,
        }
    }
}

impl ProbeConfig {
    /// Descent settings for [`ProbeStrategy::DescentThenPolish`].
    pub fn default_search() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            max_iters: 20_000,
            grad_tol: 1e-10,
            init_scale: 1.0,
            perturbation_radius: 0.0,
            stall_window: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpuriousCandidate {
    #[serde(with = "schema::matrix_vec")]
    pub u_hat: Vec<DMatrix<f64>>,
    pub reduced_loss: f64,
    pub reduced_grad_norm: f64,
    pub reduced_min_eig: f64,
    pub start_index: usize,
    pub report: StationaryReport,
}

/// Summary of a probe, including what the starts converged to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub candidate: Option<SpuriousCandidate>,
    pub starts: usize,
    /// Starts whose polished point had `L_hat` below `min_loss`.
    pub reached_global: usize,
    /// Stationary with high loss but an indefinite or singular reduced Hessian.
    pub saddles: usize,
    /// Never reached the gradient tolerance.
    pub unconverged: usize,
}

enum StartResult {
    Global,
    Saddle,
    Unconverged,
    Spurious(Vec<DMatrix<f64>>, f64, f64, f64),
}

/// Levenberg-Marquardt on `1/2 ||grad L_hat||^2` using the analytic reduced
/// Hessian as the Jacobian of the gradient.
fn polish_gradient_zero(x0: Vec<f64>, gt: &GroundTruth, iters: usize, tol: f64) -> Result<Vec<f64>> {
    let (d, k) = (gt.d, gt.k);
    let grad_of = |x: &[f64]| -> Result<DVector<f64>> {
        Ok(DVector::from_vec(flatten(&reduced_loss_and_grad(&unflatten(x, d, k), gt)?.1)))
    };
    let mut x = x0;
    let mut g = grad_of(&x)?;
    let mut mu = 1e-3;
    for _ in 0..iters {
        if g.norm() < tol * 1e-3 {
            break;
        }
        let h = reduced_hessian(&unflatten(&x, d, k), gt)?;
        let rhs = -(&h * &g);
        let mut accepted = false;
        for _ in 0..30 {
            let mut m = &h * &h;
            for i in 0..m.nrows() {
                m[(i, i)] += mu;
            }
            let Some(chol) = m.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = chol.solve(&rhs);
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let gc = grad_of(&cand)?;
            if gc.norm() < g.norm() {
                x = cand;
                g = gc;
                mu = (mu * 0.3).max(1e-15);
                accepted = true;
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(x)
}

fn probe_one(
    gt: &GroundTruth,
    search: &TrainConfig,
    probe: &ProbeConfig,
    rng: RngSpec,
) -> Result<StartResult> {
    let (d, k, tasks) = (gt.d, gt.k, gt.tasks);
    let mut r = rng.rng();
    let u0: Vec<_> = (0..tasks)
        .map(|_| gaussian_matrix(&mut r, d, k, probe.init_scale))
        .collect();
    let loss = |x: &DVector<f64>| {
        reduced_loss_and_grad(&unflatten(x.as_slice(), d, k), gt)
            .map(|(l, _)| l)
            .unwrap_or(f64::INFINITY)
    };
    let grad = |x: &DVector<f64>| {
        let g = reduced_loss_and_grad(&unflatten(x.as_slice(), d, k), gt)
            .expect("shapes fixed")
            .1;
        DVector::from_vec(flatten(&g))
    };
    let start = match probe.strategy {
        ProbeStrategy::GradientZeros => flatten(&u0),
        ProbeStrategy::DescentThenPolish => {
            match descend(DVector::from_vec(flatten(&u0)), loss, grad, search, rng) {
                Ok(run) => run.x.as_slice().to_vec(),
                Err(Error::Divergence { .. }) => return Ok(StartResult::Unconverged),
                Err(e) => return Err(e),
            }
        }
    };
    let x = polish_gradient_zero(start, gt, probe.polish_iters, probe.grad_tol)?;
    let u = unflatten(&x, d, k);
    let (l, g) = reduced_loss_and_grad(&u, gt)?;
    let gn = flatten(&g).iter().map(|v| v * v).sum::<f64>().sqrt();
    if !gn.is_finite() || gn >= probe.grad_tol {
        return Ok(StartResult::Unconverged);
    }
    if l <= probe.min_loss {
        return Ok(StartResult::Global);
    }
    let (min_eig, _) = min_eigenpair(&reduced_hessian_fd(&u, gt, probe.fd_step)?);
    if min_eig > probe.min_eig {
        Ok(StartResult::Spurious(u, l, gn, min_eig))
    } else {
        Ok(StartResult::Saddle)
    }
}

/// Multi-start search for a spurious local minimum of the reduced loss: each
/// start drives `grad L_hat` to zero (after descending on `L_hat` first when
/// the strategy asks for it). A start is
/// reported if its point has a tiny gradient, `L_hat` above `min_loss`, and a
/// positive definite finite-difference Hessian. Starts run in parallel; the
/// lowest-index hit is returned so the outcome does not depend on scheduling.
pub fn probe_spurious_minimum(
    gt: &GroundTruth,
    search_cfg: &TrainConfig,
    probe: &ProbeConfig,
    rng: RngSpec,
) -> Result<ProbeOutcome> {
    if gt.tasks < 2 {
        return Err(Error::Precondition("probing needs at least two tasks".into()));
    }
    search_cfg.validate()?;
    let results = (0..probe.starts)
        .into_par_iter()
        .map(|i| probe_one(gt, search_cfg, probe, rng.derive_indexed(labels::PROBE, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut outcome = ProbeOutcome {
        candidate: None,
        starts: probe.starts,
        reached_global: 0,
        saddles: 0,
        unconverged: 0,
    };
    for (i, res) in results.into_iter().enumerate() {
        match res {
            StartResult::Global => outcome.reached_global += 1,
            StartResult::Saddle => outcome.saddles += 1,
            StartResult::Unconverged => outcome.unconverged += 1,
            StartResult::Spurious(u, l, gn, eig) => {
                if outcome.candidate.is_none() {
                    let p = MetaParams {
                        a: DMatrix::zeros(gt.d, gt.d),
                        u: u.clone(),
                    }
                    .with_optimal_a(gt)?;
                    let report = classify_stationary_point(&p, gt, probe.grad_tol, probe.min_eig)?;
                    outcome.candidate = Some(SpuriousCandidate {
                        u_hat: u,
                        reduced_loss: l,
                        reduced_grad_norm: gn,
                        reduced_min_eig: eig,
                        start_index: i,
                        report,
                    });
                }
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetMode {
    FullNet,
    MonteCarlo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetCertificate {
    #[serde(with = "schema::matrix_vec")]
    pub center: Vec<DMatrix<f64>>,
    pub delta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub min_r_value: f64,
    pub points_checked: u64,
    pub mode: NetMode,
    pub certified: bool,
}

/// Allocation-free evaluation of `r(U) = <U - U_hat, grad L_hat(U)>`.
struct RadialEvaluator {
    d: usize,
    k: usize,
    tasks: usize,
    targets: Vec<f64>,
}

struct Scratch {
    s: Vec<f64>,
    mean: Vec<f64>,
}

impl RadialEvaluator {
    fn new(gt: &GroundTruth) -> Self {
        let targets = gt
            .retrain_factors()
            .iter()
            .flat_map(|u| outer_self(u).as_slice().to_vec())
            .collect();
        Self {
            d: gt.d,
            k: gt.k,
            tasks: gt.tasks,
            targets,
        }
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            s: vec![0.0; self.tasks * self.d * self.d],
            mean: vec![0.0; self.d * self.d],
        }
    }

    /// `offset` is `U - U_hat`; `center` is `U_hat`, both flattened.
    fn r_value(&self, center: &[f64], offset: &[f64], sc: &mut Scratch) -> f64 {
        let (d, k) = (self.d, self.k);
        let dd = d * d;
        let dk = d * k;
        sc.mean.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..self.tasks {
            let u = |r: usize, c: usize| center[t * dk + c * d + r] + offset[t * dk + c * d + r];
            for j in 0..d {
                for i in 0..d {
                    let mut acc = 0.0;
                    for c in 0..k {
                        acc += u(i, c) * u(j, c);
                    }
                    let v = acc - self.targets[t * dd + j * d + i];
                    sc.s[t * dd + j * d + i] = v;
                    sc.mean[j * d + i] += v;
                }
            }
        }
        let inv_t = 1.0 / self.tasks as f64;
        let mut r = 0.0;
        for t in 0..self.tasks {
            let u = |r: usize, c: usize| center[t * dk + c * d + r] + offset[t * dk + c * d + r];
            for c in 0..k {
                for i in 0..d {
                    // (4 B_t U_t)[i, c]
                    let mut g = 0.0;
                    for j in 0..d {
                        let b = sc.s[t * dd + j * d + i] - sc.mean[j * d + i] * inv_t;
                        g += b * u(j, c);
                    }
                    r += offset[t * dk + c * d + i] * 4.0 * g;
                }
            }
        }
        r
    }
}

/// Grid points per cube axis for a net of the given resolution, and the total
/// number of points on all `2n` faces.
fn net_size(n: usize, delta: f64, epsilon: f64) -> (u64, f64) {
    // A face grid with spacing h covers the face to within (h/2) sqrt(n-1) in
    // the max-norm cube, and radial projection onto the sphere is
    // 1-Lipschitz from outside the unit ball.
    let per_axis = ((delta * ((n.max(2) - 1) as f64).sqrt() / epsilon).ceil() as u64 + 1).max(2);
    let total = 2.0 * n as f64 * (per_axis as f64).powi(n as i32 - 1);
    (per_axis, total)
}

/// Checks `r(U) > gamma` on the sphere of radius `delta` around `u_hat`.
///
/// `FullNet` evaluates a deterministic `epsilon`-net obtained by projecting a
/// grid on the faces of the cube `[-1, 1]^n` onto the sphere; it certifies
/// when every net point has `r > gamma`. `MonteCarlo` evaluates `max_points`
/// uniform random points and never certifies.
#[allow(clippy::too_many_arguments)]
pub fn certify_local_min(
    u_hat: &[DMatrix<f64>],
    gt: &GroundTruth,
    delta: f64,
    epsilon: f64,
    gamma: f64,
    max_points: u64,
    mode: NetMode,
    rng: RngSpec,
) -> Result<NetCertificate> {
    check_factors(u_hat, gt)?;
    if !(delta > 0.0 && epsilon > 0.0 && gamma > 0.0) {
        return Err(Error::Precondition("delta, epsilon and gamma must be positive".into()));
    }
    let center = flatten(u_hat);
    let n = center.len();
    let eval = RadialEvaluator::new(gt);
    let (min_r, points) = match mode {
        NetMode::FullNet => {
            let (per_axis, total) = net_size(n, delta, epsilon);
            if n > FULL_NET_MAX_DIM || total > max_points as f64 {
                return Err(Error::NetInfeasible { dim: n, points: total });
            }
            let face_points = per_axis.pow(n as u32 - 1);
            let step = 2.0 / (per_axis - 1) as f64;
            let total = 2 * n as u64 * face_points;
            let min_r = (0..total)
                .into_par_iter()
                .fold(
                    || (eval.scratch(), vec![0.0; n], f64::INFINITY),
                    |(mut sc, mut off, best), idx| {
                        let face = (idx / face_points) as usize;
                        let mut rest = idx % face_points;
                        let fixed = face / 2;
                        let sign = if face.is_multiple_of(2) { -1.0 } else { 1.0 };
                        for (axis, slot) in off.iter_mut().enumerate() {
                            if axis == fixed {
                                *slot = sign;
                            } else {
                                *slot = -1.0 + step * (rest % per_axis) as f64;
                                rest /= per_axis;
                            }
                        }
                        let norm = off.iter().map(|v| v * v).sum::<f64>().sqrt();
                        off.iter_mut().for_each(|v| *v *= delta / norm);
                        let r = eval.r_value(&center, &off, &mut sc);
                        (sc, off, best.min(r))
                    },
                )
                .map(|(_, _, best)| best)
                .reduce(|| f64::INFINITY, f64::min);
            (min_r, total)
        }
        NetMode::MonteCarlo => {
            let base = rng.derive(labels::NET);
            let min_r = (0..max_points)
                .into_par_iter()
                .map_init(
                    || (eval.scratch(), vec![0.0; n]),
                    |(sc, off), i| {
                        let mut r = base.derive(i).rng();
                        let dir = uniform_sphere(&mut r, n);
                        off.iter_mut().zip(dir).for_each(|(o, v)| *o = delta * v);
                        eval.r_value(&center, off, sc)
                    },
                )
                .reduce(|| f64::INFINITY, f64::min);
            (min_r, max_points)
        }
    };
    Ok(NetCertificate {
        center: u_hat.to_vec(),
        delta,
        epsilon,
        gamma,
        min_r_value: min_r,
        points_checked: points,
        mode,
        certified: mode == NetMode::FullNet && min_r > gamma,
    })
}

/// Ground truth with i.i.d. standard normal `A*` and factors and no task
/// diversity requirement, so `k(T+1) > d` is allowed.
pub fn unconstrained_instance(d: usize, k: usize, tasks: usize, rng: RngSpec) -> Result<GroundTruth> {
    let mut r = rng.derive(labels::GROUND_TRUTH).rng();
    let a_star = gaussian_matrix(&mut r, d, d, 1.0);
    let u_star = (0..=tasks).map(|_| gaussian_matrix(&mut r, d, k, 1.0)).collect();
    let mut gt = GroundTruth::new(a_star, u_star)?;
    gt.seed = Some(rng);
    Ok(gt)
}

/// The two-task instance with `A* = 0`, `u_t* = e_t` in `d = 2`, whose global
/// minima form a hyperbola. The held-out factor is `(e_1 + e_2)/sqrt(2)`.
pub fn hyperbola_instance() -> GroundTruth {
    let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let test = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]) / 2f64.sqrt();
    GroundTruth::new(DMatrix::zeros(2, 2), vec![e1, e2, test]).expect("shapes are consistent")
}

/// `||(U_1 U_1^T - U_2 U_2^T) - (U_1* U_1*^T - U_2* U_2*^T)||_F`, which
/// vanishes exactly on the two-task zero-loss set.
pub fn t2_difference_residual(u: &[DMatrix<f64>], gt: &GroundTruth) -> Result<f64> {
    check_factors(u, gt)?;
    if gt.tasks != 2 {
        return Err(Error::Precondition("defined for T = 2".into()));
    }
    let hat = outer_self(&u[0]) - outer_self(&u[1]);
    let star = outer_self(&gt.u_star[0]) - outer_self(&gt.u_star[1]);
    Ok((hat - star).norm())
}

/// Counts of eigenvalues of `U_2* U_2*^T - U_1* U_1*^T` above `tol` and below
/// `-tol`.
pub fn star_difference_inertia(gt: &GroundTruth, tol: f64) -> (usize, usize) {
    let star = difference_of_grams(&gt.u_star[0], &gt.u_star[1]);
    let (vals, _) = sym_eigen_sorted(&star);
    let pos = vals.iter().filter(|&&v| v > tol).count();
    let neg = vals.iter().filter(|&&v| v < -tol).count();
    (pos, neg)
}

/// `||[D_hat, D*]||_F / (||D_hat|| ||D*||)` for the two-task Gram differences.
pub fn eigenbasis_commutator(u: &[DMatrix<f64>], gt: &GroundTruth) -> Result<f64> {
    check_factors(u, gt)?;
    let hat = difference_of_grams(&u[0], &u[1]);
    let star = difference_of_grams(&gt.u_star[0], &gt.u_star[1]);
    let comm = &hat * &star - &star * &hat;
    Ok(comm.norm() / (hat.norm() * star.norm()).max(f64::MIN_POSITIVE))
}

/// `dim(im U_1 + im U_2)` at relative singular-value threshold `tol`.
pub fn joint_image_dim(u: &[DMatrix<f64>], tol: f64) -> usize {
    let d = u[0].nrows();
    let k = u[0].ncols();
    let joint = DMatrix::from_fn(d, 2 * k, |r, c| if c < k { u[0][(r, c)] } else { u[1][(r, c - k)] });
    crate::linalg::numerical_rank(&joint, tol)
}

/// Two-task stationary point with nonzero loss: a random subset of factor
/// columns (at least one) is zeroed and gradient descent runs from there.
/// Zero columns receive zero gradient, so descent stays on that face and
/// cannot reach a global minimum, which needs every factor at full rank.
pub fn manufacture_stationary_t2(
    gt: &GroundTruth,
    cfg: &TrainConfig,
    rng: RngSpec,
) -> Result<TrainTrace<MetaParams>> {
    if gt.tasks != 2 {
        return Err(Error::Precondition("manufactured points are two-task".into()));
    }
    let mut r = rng.derive(labels::META_INIT).rng();
    let mut p = MetaParams {
        a: gaussian_matrix(&mut r, gt.d, gt.d, cfg.init_scale),
        u: (0..2)
            .map(|_| gaussian_matrix(&mut r, gt.d, gt.k, 1.0))
            .collect(),
    };
    let columns = 2 * gt.k;
    let bits: u64 = rand::Rng::random_range(&mut r, 1..(1u64 << columns));
    for c in 0..columns {
        if bits & (1 << c) != 0 {
            p.u[c / gt.k].column_mut(c % gt.k).fill(0.0);
        }
    }
    let obj = PopulationObjective { gt };
    train_meta_gd(&p, &obj, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_model::generate_ground_truth;

    fn random_point(d: usize, k: usize, tasks: usize, seed: u64) -> (GroundTruth, MetaParams) {
        let gt = generate_ground_truth(d, k, tasks, RngSpec::new(seed)).unwrap();
        let mut r = RngSpec::with_stream(seed, 99).rng();
        let p = MetaParams {
            a: gaussian_matrix(&mut r, d, d, 1.0),
            u: (0..tasks).map(|_| gaussian_matrix(&mut r, d, k, 1.0)).collect(),
        };
        (gt, p)
    }

    #[test]
    fn b_matrices_sum_to_zero() {
        let (gt, p) = random_point(6, 2, 2, 1);
        let b = compute_b_matrices(&p.u, &gt).unwrap();
        assert!((&b[0] + &b[1]).norm() < 1e-12);
        let s1 = outer_self(&p.u[0]) - outer_self(&gt.u_star[0]);
        let s2 = outer_self(&p.u[1]) - outer_self(&gt.u_star[1]);
        assert!((&b[0] - (s1 - s2) * 0.5).norm() < 1e-12);
    }

    #[test]
    fn hessian_a_block_is_t_identity() {
        let (gt, p) = random_point(5, 1, 3, 2);
        let h = hessian_meta(&p, &gt).unwrap();
        let blk = h.view((0, 0), (25, 25)).into_owned();
        assert_eq!(blk, DMatrix::identity(25, 25) * 3.0);
        assert!((&h - h.transpose()).amax() < 1e-12);
    }

    #[test]
    fn quadratic_form_matches_dense() {
        let (gt, p) = random_point(8, 2, 3, 3);
        let h = hessian_meta(&p, &gt).unwrap();
        let v = gaussian_matrix(&mut RngSpec::new(4).rng(), h.nrows(), 1, 1.0);
        let dense = (v.transpose() * &h * &v)[(0, 0)];
        let direct = hessian_quadratic_form(&p, &gt, v.as_slice()).unwrap();
        assert!((dense - direct).abs() < 1e-9 * dense.abs().max(1.0));
    }

    #[test]
    fn schur_matches_explicit_two_task_blocks() {
        let (gt, p) = random_point(6, 2, 2, 5);
        let p = p.with_optimal_a(&gt).unwrap();
        let q = schur_complement_q(&p, &gt).unwrap();
        let b = compute_b_matrices(&p.u, &gt).unwrap();
        let (x, y) = (&p.u[0], &p.u[1]);
        let d = 6;
        let id = DMatrix::<f64>::identity(d, d);
        // Diagonal block (1,1) of Q_11 and the (1,2) block of Q_12.
        let x1 = x.column(0).into_owned();
        let y1 = y.column(0).into_owned();
        let q11 = &b[0] * 2.0 + &x1 * x1.transpose() + &id * x1.norm_squared();
        assert!((q.view((0, 0), (d, d)) - q11).norm() < 1e-10);
        let q12 = -(&id * x1.dot(&y1) + &y1 * x1.transpose());
        assert!((q.view((0, 2 * d), (d, d)) - q12).norm() < 1e-10);
        let x2 = x.column(1).into_owned();
        let q11_off = &id * x1.dot(&x2) + &x2 * x1.transpose();
        assert!((q.view((0, d), (d, d)) - q11_off).norm() < 1e-10);
    }

    #[test]
    fn reduced_identities() {
        let (gt, p) = random_point(6, 1, 3, 6);
        let (l, _) = reduced_loss_and_grad(&p.u, &gt).unwrap();
        let at_opt = p.with_optimal_a(&gt).unwrap();
        let meta = meta_loss_population(&at_opt, &gt).unwrap();
        assert!((l - 2.0 * meta).abs() < 1e-10 * l);
        let fd = reduced_hessian_fd(&p.u, &gt, 1e-5).unwrap();
        let an = reduced_hessian(&p.u, &gt).unwrap();
        assert!((fd - an).amax() < 1e-5);
    }

    #[test]
    fn ground_truth_classified_as_global_min() {
        let gt = generate_ground_truth(6, 1, 2, RngSpec::new(7)).unwrap();
        let p = MetaParams::from_ground_truth(&gt);
        let rep = classify_stationary_point(&p, &gt, 1e-8, 1e-8).unwrap();
        assert_eq!(rep.classification, Classification::GlobalMinimum);
        assert!(rep.min_hessian_eig > -1e-8);
        let found = find_negative_curvature_t2(&p, &gt, 1e-8).unwrap();
        assert!(found.direction().is_none());
    }

    #[test]
    fn all_zero_factors_give_a_saddle_direction() {
        let gt = generate_ground_truth(6, 1, 2, RngSpec::new(8)).unwrap();
        let p = MetaParams::zeros(6, 1, 2).with_optimal_a(&gt).unwrap();
        let CurvatureSearch::Found(c) = find_negative_curvature_t2(&p, &gt, 1e-8).unwrap() else {
            panic!("expected a direction");
        };
        assert!(c.rayleigh_quotient < -1e-8);
    }

    #[test]
    fn hyperbola_instance_has_expected_zero_set() {
        let gt = hyperbola_instance();
        let s: f64 = 0.7;
        let u1 = DMatrix::from_column_slice(2, 1, &[s.cosh(), s.sinh()]);
        let u2 = DMatrix::from_column_slice(2, 1, &[s.sinh(), s.cosh()]);
        assert!(t2_difference_residual(&[u1.clone(), u2.clone()], &gt).unwrap() < 1e-12);
        let off = DMatrix::from_column_slice(2, 1, &[s.cosh(), 0.0]);
        assert!(t2_difference_residual(&[off, u2], &gt).unwrap() > 0.1);
        let e1 = gt.u_star[0].clone();
        let e2 = gt.u_star[1].clone();
        assert!(t2_difference_residual(&[e1, e2], &gt).unwrap() < 1e-15);
    }

    #[test]
    fn inertia_of_star_difference() {
        let gt = generate_ground_truth(8, 2, 2, RngSpec::new(9)).unwrap();
        assert_eq!(star_difference_inertia(&gt, 1e-10), (2, 2));
    }

    #[test]
    fn full_net_infeasible_above_limit() {
        let gt = generate_ground_truth(10, 1, 3, RngSpec::new(10)).unwrap();
        let err = certify_local_min(
            gt.retrain_factors(),
            &gt,
            1e-2,
            1e-3,
            1e-8,
            1_000_000,
            NetMode::FullNet,
            RngSpec::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NetInfeasible { dim: 30, .. }));
    }

    #[test]
    fn radial_evaluator_matches_reduced_gradient() {
        let (gt, p) = random_point(3, 1, 2, 11);
        let eval = RadialEvaluator::new(&gt);
        let center = flatten(&p.u);
        let off: Vec<f64> = (0..center.len()).map(|i| 0.01 * (i as f64 - 2.0)).collect();
        let moved: Vec<f64> = center.iter().zip(&off).map(|(a, b)| a + b).collect();
        let (_, g) = reduced_loss_and_grad(&unflatten(&moved, 3, 1), &gt).unwrap();
        let direct: f64 = flatten(&g).iter().zip(&off).map(|(a, b)| a * b).sum();
        let fast = eval.r_value(&center, &off, &mut eval.scratch());
        assert!((direct - fast).abs() < 1e-12 * direct.abs().max(1.0));
    }
}
