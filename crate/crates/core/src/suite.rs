//! Synthetic related-task families with a shared initialization.
//!
//! Every task lives in the plane so decision regions can be drawn. The
//! "blobs" family has three Gaussian classes whose centers are rotated or
//! translated between tasks; the "moons" family is the two-class
//! interleaved half-circles problem, optionally rotated.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::model::{init_params, reinit_head, Activation, ModelSpec};
use crate::tensor::ParameterSet;

pub const TRAIN_SIZE: usize = 600;
pub const VAL_SIZE: usize = 600;
pub const TEST_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TaskKind {
    Blobs { rotation_deg: f64, shift: [f64; 2], spread: f64 },
    Moons { rotation_deg: f64, noise: f64 },
}

impl TaskKind {
    pub fn num_classes(&self) -> usize {
        match self {
            TaskKind::Blobs { .. } => 3,
            TaskKind::Moons { .. } => 2,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            TaskKind::Blobs { .. } => "blobs",
            TaskKind::Moons { .. } => "moons",
        }
    }

    /// Draws `n` labeled points, classes assigned round-robin.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng, provenance: &str) -> LabeledDataset {
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        let classes = self.num_classes();
        for i in 0..n {
            let y = i % classes;
            let (mut px, mut py, rot, shift) = match *self {
                TaskKind::Blobs { rotation_deg, shift, spread } => {
                    let angle = 2.0 * PI * y as f64 / 3.0;
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    (1.6 * angle.cos() + spread * nx, 1.6 * angle.sin() + spread * ny, rotation_deg, shift)
                }
                TaskKind::Moons { rotation_deg, noise } => {
                    let t = rng.gen_range(0.0..PI);
                    let (bx, by) = if y == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    (1.5 * (bx - 0.5) + noise * nx, 1.5 * (by - 0.25) + noise * ny, rotation_deg, [0.0, 0.0])
                }
            };
            let (s, c) = rot.to_radians().sin_cos();
            let rx = c * px - s * py;
            let ry = s * px + c * py;
            px = rx + shift[0];
            py = ry + shift[1];
            features.push(px);
            features.push(py);
            labels.push(y);
        }
        LabeledDataset::new(features, 2, labels, provenance).expect("finite synthetic data")
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.kind.num_classes()
    }

    fn generate(name: &str, kind: TaskKind, suite_seed: u64, index: u64) -> Task {
        let mut rng = ChaCha8Rng::seed_from_u64(suite_seed);
        rng.set_stream(index + 1);
        let prov = |split: &str| format!("suite(seed={suite_seed})/{name}/{split}");
        let train = kind.sample(TRAIN_SIZE, &mut rng, &prov("train"));
        let val = kind.sample(VAL_SIZE, &mut rng, &prov("val"));
        let test = kind.sample(TEST_SIZE, &mut rng, &prov("test"));
        Task { name: name.to_string(), kind, train, val, test }
    }
}

/// A shared initialization plus related tasks.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub seed: u64,
    pub spec: ModelSpec,
    pub init: ParameterSet,
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    /// Architecture for `task`: the suite body with the task's class count.
    pub fn spec_for(&self, task: &Task) -> ModelSpec {
        ModelSpec { num_classes: task.num_classes(), ..self.spec.clone() }
    }

    /// The shared init, with a fresh head when the task's class count differs.
    pub fn init_for(&self, task: &Task) -> Result<ParameterSet> {
        if task.num_classes() == self.spec.num_classes {
            Ok(self.init.clone())
        } else {
            reinit_head(&self.spec_for(task), &self.init, self.seed.wrapping_add(1))
        }
    }

    pub fn task(&self, name: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

/// Default body for suite models.
pub fn suite_spec() -> ModelSpec {
    ModelSpec::new(2, &[(16, Activation::Tanh), (16, Activation::Tanh)], 3)
}

/// Four blob tasks (base, two rotations, a translation) and two moons tasks.
pub fn make_task_suite(seed: u64) -> Result<TaskSuite> {
    let spec = suite_spec();
    let init = init_params(&spec, seed)?;
    let blobs = |rotation_deg: f64, shift: [f64; 2]| TaskKind::Blobs { rotation_deg, shift, spread: 0.9 };
    let defs = [
        ("blobs-base", blobs(0.0, [0.0, 0.0])),
        ("blobs-rot20", blobs(20.0, [0.0, 0.0])),
        ("blobs-rot40", blobs(40.0, [0.0, 0.0])),
        ("blobs-shift", blobs(0.0, [0.6, -0.4])),
        ("moons", TaskKind::Moons { rotation_deg: 0.0, noise: 0.25 }),
        ("moons-rot30", TaskKind::Moons { rotation_deg: 30.0, noise: 0.25 }),
    ];
    let tasks = defs.iter().enumerate().map(|(i, (name, kind))| Task::generate(name, *kind, seed, i as u64)).collect();
    Ok(TaskSuite { seed, spec, init, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_share_shape() {
        let suite = make_task_suite(3).unwrap();
        let blobs: Vec<&Task> = suite.tasks.iter().filter(|t| t.kind.family() == "blobs").collect();
        assert!(blobs.len() >= 4);
        assert!(blobs.iter().all(|t| t.num_classes() == 3 && t.train.input_dim() == 2));
        for t in &suite.tasks {
            assert_eq!(t.train.label_bound(), t.num_classes());
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let suite = make_task_suite(1).unwrap();
        for t in &suite.tasks {
            let train: std::collections::HashSet<(u64, u64)> =
                (0..t.train.len()).map(|i| (t.train.row(i)[0].to_bits(), t.train.row(i)[1].to_bits())).collect();
            for split in [&t.val, &t.test] {
                assert!(
                    (0..split.len()).all(|i| !train.contains(&(split.row(i)[0].to_bits(), split.row(i)[1].to_bits())))
                );
            }
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let a = make_task_suite(5).unwrap();
        let b = make_task_suite(5).unwrap();
        assert!(a.init.bit_eq(&b.init));
        assert_eq!(a.tasks[2].test, b.tasks[2].test);
        let moons = a.task("moons").unwrap();
        let init = a.init_for(moons).unwrap();
        assert_eq!(init.lineage_id(), a.init.lineage_id());
        assert_eq!(init.get("head.bias").unwrap().shape(), &[2]);
    }
}
