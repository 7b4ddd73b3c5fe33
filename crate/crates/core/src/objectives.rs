//! Losses and analytic first derivatives.
//!
//! Population losses are the infinite-sample limits, written directly in terms
//! of the ground truth. Empirical losses average squared residuals over the
//! samples of each task (`1 / 2n_t` per task) and sum the tasks unweighted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frob_sq, outer_self};
use crate::schema;
use crate::task_model::{GroundTruth, TaskDataset};

/// Learner state: shared base matrix `A` and one symmetric-adapter factor per
/// retraining task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    #[serde(with = "schema::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "schema::matrix_vec")]
    pub u: Vec<DMatrix<f64>>,
}

impl MetaParams {
    pub fn new(a: DMatrix<f64>, u: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = Self { a, u };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(d: usize, k: usize, tasks: usize) -> Self {
        Self {
            a: DMatrix::zeros(d, d),
            u: vec![DMatrix::zeros(d, k); tasks],
        }
    }

    /// The ground-truth point `(A*, U_1*, ..., U_T*)`.
    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        Self {
            a: gt.a_star.clone(),
            u: gt.retrain_factors().to_vec(),
        }
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn k(&self) -> usize {
        self.u.first().map_or(0, |u| u.ncols())
    }

    pub fn tasks(&self) -> usize {
        self.u.len()
    }

    /// Length of the flattened vector `[vec(A); vec(U_1); ...; vec(U_T)]`.
    pub fn flat_len(&self) -> usize {
        let d = self.d();
        d * d + self.tasks() * d * self.k()
    }

    fn validate(&self) -> Result<()> {
        let d = self.a.nrows();
        if self.a.ncols() != d {
            return Err(Error::Shape(format!(
                "A must be square, got {}x{}",
                d,
                self.a.ncols()
            )));
        }
        if self.u.is_empty() {
            return Err(Error::Shape("at least one adapter factor required".into()));
        }
        let k = self.u[0].ncols();
        if self.u.iter().any(|u| u.shape() != (d, k)) {
            return Err(Error::Shape(format!("all U_t must be {d}x{k}")));
        }
        Ok(())
    }

    pub(crate) fn check_against(&self, gt: &GroundTruth) -> Result<()> {
        self.validate()?;
        if self.tasks() != gt.tasks || self.d() != gt.d || self.k() != gt.k {
            return Err(Error::Shape(format!(
                "params are (d={}, k={}, T={}) but ground truth is (d={}, k={}, T={})",
                self.d(),
                self.k(),
                self.tasks(),
                gt.d,
                gt.k,
                gt.tasks
            )));
        }
        Ok(())
    }

    /// Column-major flattening, `A` first and then each `U_t`.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.extend_from_slice(self.a.as_slice());
        for u in &self.u {
            v.extend_from_slice(u.as_slice());
        }
        DVector::from_vec(v)
    }

    pub fn from_flat(flat: &[f64], d: usize, k: usize, tasks: usize) -> Result<Self> {
        let expected = d * d + tasks * d * k;
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat vector has length {}, expected {expected}",
                flat.len()
            )));
        }
        let a = DMatrix::from_column_slice(d, d, &flat[..d * d]);
        let u = (0..tasks)
            .map(|t| {
                let off = d * d + t * d * k;
                DMatrix::from_column_slice(d, k, &flat[off..off + d * k])
            })
            .collect();
        Ok(Self { a, u })
    }

    /// `A` at which the gradient in `A` vanishes for the current factors:
    /// `A* - (1/T) sum_t (U_t U_t^T - U_t* U_t*^T)`.
    pub fn with_optimal_a(&self, gt: &GroundTruth) -> Result<Self> {
        self.check_against(gt)?;
        let mut a = gt.a_star.clone();
        let inv_t = 1.0 / gt.tasks as f64;
        for (u, us) in self.u.iter().zip(gt.retrain_factors()) {
            a -= (outer_self(u) - outer_self(us)) * inv_t;
        }
        Ok(Self {
            a,
            u: self.u.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub grad_a: DMatrix<f64>,
    pub grad_u: Vec<DMatrix<f64>>,
}

impl MetaGradient {
    pub fn norm(&self) -> f64 {
        (frob_sq(&self.grad_a) + self.grad_u.iter().map(frob_sq).sum::<f64>()).sqrt()
    }

    pub fn to_flat(&self) -> DVector<f64> {
        MetaParams {
            a: self.grad_a.clone(),
            u: self.grad_u.clone(),
        }
        .to_flat()
    }
}

/// Per-task residual `E_t = A + U_t U_t^T - A* - U_t* U_t*^T`.
fn population_residuals(p: &MetaParams, gt: &GroundTruth) -> Vec<DMatrix<f64>> {
    p.u.iter()
        .enumerate()
        .map(|(i, u)| (&p.a - &gt.a_star) + (outer_self(u) - outer_self(&gt.u_star[i])))
        .collect()
}

/// Gradient of `sum_t 1/2 ||f(A + U_t U_t^T)||` given the per-task derivative
/// `G_t` with respect to the task matrix: `dA = sum G_t`,
/// `dU_t = (G_t + G_t^T) U_t`.
fn chain_to_params(p: &MetaParams, task_grads: &[DMatrix<f64>]) -> MetaGradient {
    let d = p.d();
    let mut grad_a = DMatrix::zeros(d, d);
    let grad_u = task_grads
        .iter()
        .zip(&p.u)
        .map(|(g, u)| {
            grad_a += g;
            (g + g.transpose()) * u
        })
        .collect();
    MetaGradient { grad_a, grad_u }
}

/// `1/2 ||A* + U_t* U_t*^T - A_t||_F^2`.
pub fn task_loss_population(a_t: &DMatrix<f64>, gt: &GroundTruth, t: usize) -> Result<f64> {
    let target = gt.task_matrix(t)?;
    if a_t.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "A_t is {}x{}, expected {}x{}",
            a_t.nrows(),
            a_t.ncols(),
            gt.d,
            gt.d
        )));
    }
    Ok(0.5 * frob_sq(&(target - a_t)))
}

/// `(1/2n) sum_j ||y_j - A_t x_j||^2`.
pub fn task_loss_empirical(a_t: &DMatrix<f64>, data: &TaskDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if a_t.ncols() != data.x.nrows() || a_t.nrows() != data.y.nrows() {
        return Err(Error::Shape("A_t does not match the data dimension".into()));
    }
    let resid = &data.y - a_t * &data.x;
    Ok(frob_sq(&resid) / (2.0 * data.len() as f64))
}

/// `1/2 sum_t ||A* + U_t* U_t*^T - A - U_t U_t^T||_F^2`.
pub fn meta_loss_population(p: &MetaParams, gt: &GroundTruth) -> Result<f64> {
    p.check_against(gt)?;
    Ok(0.5 * population_residuals(p, gt).iter().map(frob_sq).sum::<f64>())
}

pub fn meta_loss_empirical(p: &MetaParams, data: &[TaskDataset]) -> Result<f64> {
    p.validate()?;
    if data.len() != p.tasks() {
        return Err(Error::Shape(format!(
            "{} datasets for {} tasks",
            data.len(),
            p.tasks()
        )));
    }
    p.u.iter()
        .zip(data)
        .map(|(u, ds)| task_loss_empirical(&(&p.a + outer_self(u)), ds))
        .sum()
}

/// `1/2 ||A* + U_{T+1}* U_{T+1}*^T - A_hat - U V^T||_F^2`.
pub fn test_loss_population(
    adapter: &crate::solvers::Adapter,
    a_hat: &DMatrix<f64>,
    gt: &GroundTruth,
) -> Result<f64> {
    if adapter.u.nrows() != gt.d || adapter.v.nrows() != gt.d || a_hat.shape() != (gt.d, gt.d) {
        return Err(Error::Shape("adapter or A_hat does not match d".into()));
    }
    let target = gt.task_matrix(gt.test_task())?;
    Ok(0.5 * frob_sq(&(target - a_hat - adapter.product())))
}

pub fn meta_grad_population(p: &MetaParams, gt: &GroundTruth) -> Result<MetaGradient> {
    p.check_against(gt)?;
    Ok(chain_to_params(p, &population_residuals(p, gt)))
}

pub fn meta_grad_empirical(p: &MetaParams, data: &[TaskDataset]) -> Result<MetaGradient> {
    p.validate()?;
    if data.len() != p.tasks() {
        return Err(Error::Shape(format!(
            "{} datasets for {} tasks",
            data.len(),
            p.tasks()
        )));
    }
    let mut grads = Vec::with_capacity(data.len());
    for (u, ds) in p.u.iter().zip(data) {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let w = &p.a + outer_self(u);
        let resid = &w * &ds.x - &ds.y;
        grads.push(resid * ds.x.transpose() / ds.len() as f64);
    }
    Ok(chain_to_params(p, &grads))
}

/// Anything gradient descent can minimize over [`MetaParams`].
pub trait MetaObjective: Sync {
    fn loss(&self, p: &MetaParams) -> f64;
    fn grad(&self, p: &MetaParams) -> MetaGradient;
    /// `(d, k, T)` expected of the parameters.
    fn dims(&self) -> (usize, usize, usize);
}

/// The infinite-sample Meta-LoRA loss of a ground truth.
#[derive(Debug, Clone, Copy)]
pub struct PopulationObjective<'a> {
    pub gt: &'a GroundTruth,
}

impl MetaObjective for PopulationObjective<'_> {
    fn loss(&self, p: &MetaParams) -> f64 {
        0.5 * population_residuals(p, self.gt)
            .iter()
            .map(frob_sq)
            .sum::<f64>()
    }

    fn grad(&self, p: &MetaParams) -> MetaGradient {
        chain_to_params(p, &population_residuals(p, self.gt))
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.gt.d, self.gt.k, self.gt.tasks)
    }
}

/// Second-moment summary of one task's samples. The empirical loss of a task
/// matrix `W` is `1/2 (tr S_yy - 2 <W, S_yx> + <W S_xx, W>)`, so training cost
/// no longer depends on the sample count.
#[derive(Debug, Clone)]
pub struct TaskMoments {
    pub sxx: DMatrix<f64>,
    pub syx: DMatrix<f64>,
    pub syy_trace: f64,
    pub n: usize,
}

impl TaskMoments {
    pub fn from_dataset(data: &TaskDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = data.len() as f64;
        Ok(Self {
            sxx: &data.x * data.x.transpose() / n,
            syx: &data.y * data.x.transpose() / n,
            syy_trace: frob_sq(&data.y) / n,
            n: data.len(),
        })
    }

    pub fn loss(&self, w: &DMatrix<f64>) -> f64 {
        let quad = (w * &self.sxx).component_mul(w).sum();
        let cross = w.component_mul(&self.syx).sum();
        (0.5 * (self.syy_trace - 2.0 * cross + quad)).max(0.0)
    }

    /// Derivative of [`TaskMoments::loss`] with respect to `W`.
    pub fn grad(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        w * &self.sxx - &self.syx
    }
}

/// Finite-sample Meta-LoRA loss built from per-task moments.
#[derive(Debug, Clone)]
pub struct EmpiricalObjective {
    pub tasks: Vec<TaskMoments>,
    pub k: usize,
}

impl EmpiricalObjective {
    pub fn new(data: &[TaskDataset], k: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let tasks = data
            .iter()
            .map(TaskMoments::from_dataset)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tasks, k })
    }
}

impl MetaObjective for EmpiricalObjective {
    fn loss(&self, p: &MetaParams) -> f64 {
        p.u.iter()
            .zip(&self.tasks)
            .map(|(u, m)| m.loss(&(&p.a + outer_self(u))))
            .sum()
    }

    fn grad(&self, p: &MetaParams) -> MetaGradient {
        let grads: Vec<_> = p
            .u
            .iter()
            .zip(&self.tasks)
            .map(|(u, m)| m.grad(&(&p.a + outer_self(u))))
            .collect();
        chain_to_params(p, &grads)
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.tasks[0].sxx.nrows(), self.k, self.tasks.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, RngSpec};
    use crate::task_model::{generate_ground_truth, sample_task};

    fn random_params(d: usize, k: usize, tasks: usize, seed: u64) -> MetaParams {
        let mut rng = RngSpec::new(seed).rng();
        MetaParams {
            a: gaussian_matrix(&mut rng, d, d, 1.0),
            u: (0..tasks).map(|_| gaussian_matrix(&mut rng, d, k, 1.0)).collect(),
        }
    }

    #[test]
    fn exact_task_parameters_have_zero_loss() {
        let gt = generate_ground_truth(6, 1, 2, RngSpec::new(0)).unwrap();
        let w = gt.task_matrix(2).unwrap();
        assert_eq!(task_loss_population(&w, &gt, 2).unwrap(), 0.0);
        let at_astar = task_loss_population(&gt.a_star, &gt, 2).unwrap();
        let expected = 0.5 * frob_sq(&gt.perturbation(2).unwrap());
        assert!((at_astar - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn population_task_loss_matches_entrywise_sum() {
        let gt = generate_ground_truth(4, 1, 2, RngSpec::new(5)).unwrap();
        let a_t = gaussian_matrix(&mut RngSpec::new(6).rng(), 4, 4, 1.0);
        let u = &gt.u_star[0];
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let target = gt.a_star[(i, j)] + u[(i, 0)] * u[(j, 0)];
                oracle += 0.5 * (target - a_t[(i, j)]).powi(2);
            }
        }
        let got = task_loss_population(&a_t, &gt, 1).unwrap();
        assert!((got - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn scalar_empirical_loss() {
        let data = TaskDataset {
            x: DMatrix::from_element(1, 1, 2.0),
            y: DMatrix::from_element(1, 1, 7.0),
            task_index: 1,
            sigma_eps: 0.0,
            sigma_x: 1.0,
            seed: None,
        };
        // 1/2 (7 - 3 * 2)^2
        let a = DMatrix::from_element(1, 1, 3.0);
        assert_eq!(task_loss_empirical(&a, &data).unwrap(), 0.5);
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = TaskDataset {
            x: DMatrix::zeros(2, 0),
            y: DMatrix::zeros(2, 0),
            task_index: 1,
            sigma_eps: 0.0,
            sigma_x: 1.0,
            seed: None,
        };
        assert!(matches!(
            task_loss_empirical(&DMatrix::zeros(2, 2), &data),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn ground_truth_point_is_a_zero() {
        let gt = generate_ground_truth(8, 2, 3, RngSpec::new(2)).unwrap();
        let p = MetaParams::from_ground_truth(&gt);
        assert_eq!(meta_loss_population(&p, &gt).unwrap(), 0.0);
        assert_eq!(meta_grad_population(&p, &gt).unwrap().norm(), 0.0);
    }

    #[test]
    fn shape_mismatch_reported() {
        let gt = generate_ground_truth(7, 1, 3, RngSpec::new(2)).unwrap();
        let p = random_params(7, 1, 2, 0);
        assert!(matches!(meta_loss_population(&p, &gt), Err(Error::Shape(_))));
        assert!(matches!(meta_grad_population(&p, &gt), Err(Error::Shape(_))));
    }

    #[test]
    fn optimal_a_zeroes_the_a_gradient() {
        let gt = generate_ground_truth(8, 2, 3, RngSpec::new(3)).unwrap();
        let p = random_params(8, 2, 3, 4).with_optimal_a(&gt).unwrap();
        let g = meta_grad_population(&p, &gt).unwrap();
        assert!(g.grad_a.norm() < 1e-12 * (1.0 + p.a.norm()));
    }

    #[test]
    fn flat_round_trip() {
        let p = random_params(5, 2, 3, 1);
        let flat = p.to_flat();
        assert_eq!(flat.len(), 25 + 30);
        let back = MetaParams::from_flat(flat.as_slice(), 5, 2, 3).unwrap();
        assert_eq!(back, p);
        assert!(MetaParams::from_flat(&flat.as_slice()[1..], 5, 2, 3).is_err());
    }

    #[test]
    fn moments_agree_with_direct_loss() {
        let gt = generate_ground_truth(6, 1, 2, RngSpec::new(8)).unwrap();
        let data: Vec<_> = (1..=2)
            .map(|t| sample_task(&gt, t, 300, 1.0, 0.1, RngSpec::new(t as u64)).unwrap())
            .collect();
        let p = random_params(6, 1, 2, 9);
        let obj = EmpiricalObjective::new(&data, 1).unwrap();
        let direct = meta_loss_empirical(&p, &data).unwrap();
        assert!((obj.loss(&p) - direct).abs() < 1e-9 * direct);
        let g_direct = meta_grad_empirical(&p, &data).unwrap().to_flat();
        let g_mom = obj.grad(&p).to_flat();
        assert!((&g_direct - &g_mom).norm() < 1e-9 * (1.0 + g_mom.norm()));
    }
}
