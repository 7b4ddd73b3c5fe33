//! Ground-truth parameters and synthetic task data.
//!
//! Task `t` maps features through `A* + U_t* U_t*^T`; tasks `1..=T` are used
//! for retraining and task `T + 1` is held out for fine-tuning. All indices in
//! the public API are 1-based to match that convention.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{outer_self, singular_values_desc};
use crate::rng::{gaussian_matrix, labels, RngSpec};
use crate::schema;

/// Relative singular-value threshold for the task-diversity check.
pub const DIVERSITY_TOL: f64 = 1e-10;

const MAX_GENERATION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub d: usize,
    pub k: usize,
    /// Number of retraining tasks.
    #[serde(rename = "T")]
    pub tasks: usize,
    #[serde(with = "schema::matrix")]
    pub a_star: DMatrix<f64>,
    /// `T + 1` factors; the last one belongs to the held-out task.
    #[serde(with = "schema::matrix_vec")]
    pub u_star: Vec<DMatrix<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<RngSpec>,
}

impl GroundTruth {
    /// Assembles a ground truth from explicit parts. Only shapes are checked;
    /// callers that need task diversity must call [`check_task_diversity`].
    /// Hand-built instances (for example two-dimensional landscape probes)
    /// deliberately violate it.
    pub fn new(a_star: DMatrix<f64>, u_star: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = a_star.nrows();
        if d == 0 || a_star.ncols() != d {
            return Err(Error::Shape(format!(
                "A* must be square and non-empty, got {}x{}",
                a_star.nrows(),
                a_star.ncols()
            )));
        }
        if u_star.len() < 2 {
            return Err(Error::Shape(
                "need at least one retraining task plus the held-out task".into(),
            ));
        }
        let k = u_star[0].ncols();
        if k == 0 {
            return Err(Error::Shape("factors must have at least one column".into()));
        }
        if let Some((i, u)) = u_star
            .iter()
            .enumerate()
            .find(|(_, u)| u.shape() != (d, k))
        {
            return Err(Error::Shape(format!(
                "factor {} is {}x{}, expected {d}x{k}",
                i + 1,
                u.nrows(),
                u.ncols()
            )));
        }
        Ok(Self {
            d,
            k,
            tasks: u_star.len() - 1,
            a_star,
            u_star,
            seed: None,
        })
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.tasks + 1 {
            return Err(Error::TaskIndex {
                index: t,
                max: self.tasks + 1,
            });
        }
        Ok(())
    }

    /// `U_t* U_t*^T` for a 1-based task index.
    pub fn perturbation(&self, t: usize) -> Result<DMatrix<f64>> {
        self.check_task(t)?;
        Ok(outer_self(&self.u_star[t - 1]))
    }

    /// The regression matrix `A* + U_t* U_t*^T` of task `t`.
    pub fn task_matrix(&self, t: usize) -> Result<DMatrix<f64>> {
        Ok(&self.a_star + self.perturbation(t)?)
    }

    pub fn test_task(&self) -> usize {
        self.tasks + 1
    }

    /// Factors of the retraining tasks only.
    pub fn retrain_factors(&self) -> &[DMatrix<f64>] {
        &self.u_star[..self.tasks]
    }
}

/// Draws `A*` and `T + 1` factors with i.i.d. standard normal entries,
/// redrawing until the factors are jointly linearly independent.
pub fn generate_ground_truth(d: usize, k: usize, tasks: usize, rng: RngSpec) -> Result<GroundTruth> {
    if d == 0 || k == 0 || tasks == 0 {
        return Err(Error::Dimension("d, k and T must all be positive".into()));
    }
    if k * (tasks + 1) > d {
        return Err(Error::Dimension(format!(
            "k(T+1) = {} exceeds d = {d}",
            k * (tasks + 1)
        )));
    }
    let mut stream = rng.rng();
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let a_star = gaussian_matrix(&mut stream, d, d, 1.0);
        let u_star = (0..=tasks)
            .map(|_| gaussian_matrix(&mut stream, d, k, 1.0))
            .collect();
        let mut gt = GroundTruth::new(a_star, u_star)?;
        if check_task_diversity(&gt, DIVERSITY_TOL) {
            gt.seed = Some(rng);
            return Ok(gt);
        }
    }
    Err(Error::GenerationFailed {
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

/// True iff the `d x k(T+1)` concatenation of all factors has full column
/// rank, judged by `sigma_min > tol * sigma_max`.
pub fn check_task_diversity(gt: &GroundTruth, tol: f64) -> bool {
    let cols = gt.k * gt.u_star.len();
    if cols > gt.d {
        return false;
    }
    let mut concat = DMatrix::zeros(gt.d, cols);
    for (i, u) in gt.u_star.iter().enumerate() {
        concat.view_mut((0, i * gt.k), (gt.d, gt.k)).copy_from(u);
    }
    let s = singular_values_desc(&concat);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) => hi > 0.0 && lo > tol * hi,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    /// Features, one sample per column.
    #[serde(with = "schema::matrix")]
    pub x: DMatrix<f64>,
    #[serde(with = "schema::matrix")]
    pub y: DMatrix<f64>,
    pub task_index: usize,
    pub sigma_eps: f64,
    pub sigma_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<RngSpec>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

/// Draws `n` samples `y = (A* + U_t* U_t*^T) x + eps` with
/// `x ~ N(0, sigma_x^2 I)` and `eps ~ N(0, sigma_eps^2 I)`.
pub fn sample_task(
    gt: &GroundTruth,
    task_index: usize,
    n: usize,
    sigma_x: f64,
    sigma_eps: f64,
    rng: RngSpec,
) -> Result<TaskDataset> {
    let w = gt.task_matrix(task_index)?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if sigma_x <= 0.0 || sigma_eps < 0.0 {
        return Err(Error::Config(format!(
            "need sigma_x > 0 and sigma_eps >= 0, got {sigma_x} and {sigma_eps}"
        )));
    }
    let mut stream = rng.rng();
    let x = gaussian_matrix(&mut stream, gt.d, n, sigma_x);
    let mut y = &w * &x;
    if sigma_eps > 0.0 {
        y += gaussian_matrix(&mut stream, gt.d, n, sigma_eps);
    }
    Ok(TaskDataset {
        x,
        y,
        task_index,
        sigma_eps,
        sigma_x,
        seed: Some(rng),
    })
}

/// Samples per retraining task when `total` samples are split over `tasks`.
pub fn samples_per_task(total: usize, tasks: usize) -> usize {
    total / tasks
}

/// Samples the `T` retraining datasets (each `floor(total / T)` samples) from
/// per-task sub-streams of `rng`.
pub fn sample_retraining_tasks(
    gt: &GroundTruth,
    total: usize,
    sigma_x: f64,
    sigma_eps: f64,
    rng: RngSpec,
) -> Result<Vec<TaskDataset>> {
    let n = samples_per_task(total, gt.tasks);
    (1..=gt.tasks)
        .map(|t| {
            sample_task(
                gt,
                t,
                n,
                sigma_x,
                sigma_eps,
                rng.derive_indexed(labels::TASK_DATA, t as u64),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frob_sq;

    /// Rank via the eigenvalues of the Gram matrix; independent of the SVD
    /// route used by `check_task_diversity`.
    fn gram_rank(gt: &GroundTruth) -> usize {
        let cols = gt.k * gt.u_star.len();
        let mut c = DMatrix::zeros(gt.d, cols);
        for (i, u) in gt.u_star.iter().enumerate() {
            c.view_mut((0, i * gt.k), (gt.d, gt.k)).copy_from(u);
        }
        let g = c.transpose() * &c;
        let eig = g.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        eig.eigenvalues.iter().filter(|&&v| v > 1e-12 * top).count()
    }

    #[test]
    fn paper_default_dimensions() {
        let gt = generate_ground_truth(10, 1, 3, RngSpec::new(0)).unwrap();
        assert_eq!(gt.u_star.len(), 4);
        assert!(gt.u_star.iter().all(|u| u.shape() == (10, 1)));
        assert_eq!(gram_rank(&gt), 4);
    }

    #[test]
    fn rejects_too_many_tasks_for_dimension() {
        let err = generate_ground_truth(2, 1, 2, RngSpec::new(9)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn diversity_matches_gram_oracle() {
        let gt = generate_ground_truth(6, 1, 3, RngSpec::new(7)).unwrap();
        assert!(check_task_diversity(&gt, DIVERSITY_TOL));
        assert_eq!(gram_rank(&gt), 4);
    }

    #[test]
    fn orthonormal_and_repeated_columns() {
        let e = |i: usize| {
            let mut v = DMatrix::zeros(10, 1);
            v[(i, 0)] = 1.0;
            v
        };
        let gt = GroundTruth::new(DMatrix::zeros(10, 10), vec![e(0), e(1), e(2), e(3)]).unwrap();
        assert!(check_task_diversity(&gt, DIVERSITY_TOL));

        let dup = GroundTruth::new(DMatrix::zeros(10, 10), vec![e(0), e(0), e(2), e(3)]).unwrap();
        assert!(!check_task_diversity(&dup, DIVERSITY_TOL));
    }

    #[test]
    fn diversity_holds_across_seeds() {
        for seed in 0..100 {
            let gt = generate_ground_truth(10, 1, 3, RngSpec::new(seed)).unwrap();
            assert!(check_task_diversity(&gt, DIVERSITY_TOL));
            assert_eq!(gram_rank(&gt), 4, "seed {seed}");
        }
    }

    #[test]
    fn noiseless_samples_are_exact() {
        let gt = generate_ground_truth(8, 2, 2, RngSpec::new(1)).unwrap();
        let data = sample_task(&gt, 2, 50, 1.0, 0.0, RngSpec::new(2)).unwrap();
        let resid = &data.y - gt.task_matrix(2).unwrap() * &data.x;
        assert_eq!(frob_sq(&resid), 0.0);
    }

    #[test]
    fn floor_split_of_samples() {
        assert_eq!(samples_per_task(5000, 3), 1666);
        let gt = generate_ground_truth(10, 1, 3, RngSpec::new(4)).unwrap();
        let sets = sample_retraining_tasks(&gt, 5000, 1.0, 0.1, RngSpec::new(4)).unwrap();
        assert!(sets.iter().all(|s| s.len() == 1666));
        assert_eq!(sets[2].task_index, 3);
    }

    #[test]
    fn task_index_out_of_range() {
        let gt = generate_ground_truth(6, 1, 2, RngSpec::new(0)).unwrap();
        assert!(matches!(
            sample_task(&gt, 4, 3, 1.0, 0.0, RngSpec::new(0)),
            Err(Error::TaskIndex { index: 4, max: 3 })
        ));
        assert!(sample_task(&gt, 0, 3, 1.0, 0.0, RngSpec::new(0)).is_err());
    }

    #[test]
    fn noise_floor_of_true_parameters() {
        // E[(1/2n) sum ||eps||^2] = d sigma^2 / 2.
        let gt = generate_ground_truth(10, 1, 3, RngSpec::new(11)).unwrap();
        let data = sample_task(&gt, 1, 100_000, 1.0, 0.1, RngSpec::new(12)).unwrap();
        let resid = &data.y - gt.task_matrix(1).unwrap() * &data.x;
        let loss = frob_sq(&resid) / (2.0 * data.len() as f64);
        let expected = 10.0 * 0.01 / 2.0;
        assert!((loss - expected).abs() / expected < 0.05, "{loss}");
    }

    #[test]
    fn serialization_is_deterministic() {
        let gt = generate_ground_truth(5, 1, 2, RngSpec::new(3)).unwrap();
        let again = generate_ground_truth(5, 1, 2, RngSpec::new(3)).unwrap();
        let a = serde_json::to_string(&gt).unwrap();
        assert_eq!(a, serde_json::to_string(&again).unwrap());
        let back: GroundTruth = serde_json::from_str(&a).unwrap();
        assert_eq!(back, gt);
    }
}
