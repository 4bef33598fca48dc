//! Synthetic datasets and frozen base networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ExperimentConfig, TaskKind};
use crate::matrix::Matrix;

/// Frozen pieces of a toy problem: base weights per layer, an optional
/// readout, and train/test splits with samples stored column-wise.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub base_weights: Vec<Matrix>,
    /// `1 x d` logit readout for classification.
    pub readout: Option<Matrix>,
    pub train_x: Matrix,
    pub train_y: Matrix,
    pub test_x: Matrix,
    pub test_y: Matrix,
}

fn teacher_forward(weights: &[Matrix], x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        h = w.matmul(&h).expect("square layers");
        if l + 1 < weights.len() {
            h = h.map(f64::tanh);
        }
    }
    h
}

impl ToyTask {
    pub fn generate<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Self {
        match cfg.task {
            TaskKind::TeacherStudentRegression => Self::teacher_student(cfg, rng),
            TaskKind::TwoMoonsClassification => Self::two_moons(cfg, rng),
        }
    }

    /// A random tanh teacher; the student's frozen weights are the teacher's
    /// plus an offset made of a shared part and a per-layer part.
    fn teacher_student<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Self {
        let (d, k, n_layers) = (cfg.d, cfg.k, cfg.layers);
        let gain = 1.0 / (k as f64).sqrt();
        let teacher: Vec<Matrix> = (0..n_layers)
            .map(|_| Matrix::random_normal(d, k, 1.5 * gain, rng))
            .collect();
        let shared_std = cfg.drift_scale * cfg.drift_shared.sqrt();
        let own_std = cfg.drift_scale * (1.0 - cfg.drift_shared).sqrt();
        let shared = Matrix::random_normal(d, k, shared_std, rng);
        let base_weights = teacher
            .iter()
            .map(|t| {
                let own = Matrix::random_normal(d, k, own_std, rng);
                t.add(&shared)
                    .and_then(|m| m.add(&own))
                    .expect("same shape")
            })
            .collect();

        let mut split = |n: usize| {
            let x = Matrix::random_normal(k, n, 1.0, rng);
            let noise = Matrix::random_normal(d, n, cfg.noise_std, rng);
            let y = teacher_forward(&teacher, &x)
                .add(&noise)
                .expect("same shape");
            (x, y)
        };
        let (train_x, train_y) = split(cfg.n_train);
        let (test_x, test_y) = split(cfg.n_test);
        Self {
            kind: cfg.task,
            base_weights,
            readout: None,
            train_x,
            train_y,
            test_x,
            test_y,
        }
    }

    /// Two interleaved half circles embedded into `k` dimensions by a fixed
    /// random map; labels in `{0, 1}`.
    fn two_moons<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Self {
        let (d, k, n_layers) = (cfg.d, cfg.k, cfg.layers);
        let embed = Matrix::random_normal(k, 2, 1.0, rng);
        let base_weights = (0..n_layers)
            .map(|_| Matrix::random_normal(d, k, 1.0 / (k as f64).sqrt(), rng))
            .collect();
        let readout = Matrix::random_normal(1, d, 1.0 / (d as f64).sqrt(), rng);

        let mut split = |n: usize| {
            let mut pts = Matrix::zeros(2, n);
            let mut labels = Matrix::zeros(1, n);
            for i in 0..n {
                let label = i % 2;
                let t = std::f64::consts::PI * rng.random::<f64>();
                let (mut px, mut py) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let jx: f64 = StandardNormal.sample(rng);
                let jy: f64 = StandardNormal.sample(rng);
                px += cfg.noise_std * jx - 0.5;
                py += cfg.noise_std * jy - 0.25;
                pts.set(0, i, px);
                pts.set(1, i, py);
                labels.set(0, i, label as f64);
            }
            (embed.matmul(&pts).expect("k x 2 by 2 x n"), labels)
        };
        let (train_x, train_y) = split(cfg.n_train);
        let (test_x, test_y) = split(cfg.n_test);
        Self {
            kind: cfg.task,
            base_weights,
            readout: Some(readout),
            train_x,
            train_y,
            test_x,
            test_y,
        }
    }

    pub fn n_train(&self) -> usize {
        self.train_x.cols()
    }
}

/// Gathers the listed sample columns.
pub fn select_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), idx.len());
    for (c, &i) in idx.iter().enumerate() {
        for r in 0..m.rows() {
            out.set(r, c, m.get(r, i));
        }
    }
    out
}
