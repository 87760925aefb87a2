//! End-to-end experiment pipelines shared by the command line, the
//! acceptance suite and the browser demo.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::ensemble::{ensemble_compare, EnsembleReport};
use crate::error::{Error, Result};
use crate::fisher::{estimate_fisher, FisherConfig, FisherDiagonal, FisherMode};
use crate::merge::MergeMode;
use crate::model::{reinit_head, Classifier, ModelSpec};
use crate::search::{lambda_grid, sweep, SweepTemplate, DEFAULT_GRID_POINTS, DEFAULT_VAL_LIMIT};
use crate::suite::{make_task_suite, Task, TaskSuite};
use crate::tensor::ParameterSet;
use crate::train::{train, TrainConfig};

pub const ABLATION_SCHEMA: &str = "fishmerge.ablation/1";

/// Training budget for the desk-scale benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub n_models: usize,
    pub fisher_examples: usize,
    /// Rows of the target task's training split used to fine-tune the target.
    pub target_train_size: usize,
    pub pretrain_task: String,
    pub ensemble_task: String,
    pub donor_task: String,
    pub target_task: String,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            n_models: 5,
            fisher_examples: 4096,
            target_train_size: 40,
            pretrain_task: "blobs-base".into(),
            ensemble_task: "blobs-rot20".into(),
            donor_task: "blobs-rot20".into(),
            target_task: "blobs-rot40".into(),
        }
    }
}

fn suite_task<'s>(suite: &'s TaskSuite, name: &str) -> Result<&'s Task> {
    suite.task(name).ok_or_else(|| Error::invalid(format!("suite has no task '{name}'")))
}

fn pretrain(suite: &TaskSuite, spec: &ModelSpec, cfg: &BenchmarkConfig) -> Result<ParameterSet> {
    let base = suite_task(suite, &cfg.pretrain_task)?;
    let init = if spec.share_head {
        let mut p = suite.init_for(base)?;
        for name in spec.head_tensor_names() {
            p.set_role(&name, spec.head_role())?;
        }
        p
    } else {
        suite.init_for(base)?
    };
    train(spec, &init, &base.train, &TrainConfig { seed: suite.seed, ..cfg.pretrain.clone() })
}

/// Pretrains on the suite's base task, fine-tunes `n_models` copies on
/// `blobs-rot20` with different data orders, and compares the three
/// ensembling methods on that task's test split.
pub fn ensemble_benchmark(suite_seed: u64, cfg: &BenchmarkConfig) -> Result<EnsembleReport> {
    let suite = make_task_suite(suite_seed)?;
    let task = suite_task(&suite, &cfg.ensemble_task)?;
    let spec = ModelSpec { share_head: true, ..suite.spec_for(task) };
    let pre = pretrain(&suite, &spec, cfg)?;
    let fisher_cfg = FisherConfig { n_examples: cfg.fisher_examples, mode: FisherMode::Exact, seed: suite_seed };
    let mut models = Vec::with_capacity(cfg.n_models);
    let mut fishers = Vec::with_capacity(cfg.n_models);
    for k in 0..cfg.n_models {
        let tc = TrainConfig { seed: suite_seed.wrapping_mul(1000).wrapping_add(k as u64 + 1), ..cfg.finetune.clone() };
        let p = train(&spec, &pre, &task.train, &tc)?;
        fishers.push(estimate_fisher(&spec, &p, &task.train, &fisher_cfg)?);
        models.push(p);
    }
    ensemble_compare(&spec, &models, &fishers, &task.test)
}

/// A target model, a donor model and the data each Fisher is computed on.
#[derive(Debug, Clone, Copy)]
pub struct IntermediateTask<'a> {
    pub target_spec: &'a ModelSpec,
    pub target: &'a ParameterSet,
    pub target_train: &'a LabeledDataset,
    pub donor_spec: &'a ModelSpec,
    pub donor: &'a ParameterSet,
    pub donor_train: &'a LabeledDataset,
    pub val: &'a LabeledDataset,
    pub test: Option<&'a LabeledDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Fisher examples requested; 0 denotes isotropic merging.
    pub n_examples: usize,
    pub target_fisher_examples: usize,
    pub donor_fisher_examples: usize,
    pub best_lambdas: Vec<f64>,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema: String,
    pub grid_points: usize,
    pub val_limit: usize,
    pub target_val_acc: f64,
    pub target_test_acc: Option<f64>,
    pub isotropic: AblationRow,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub n_list: Vec<usize>,
    pub grid_points: usize,
    pub val_limit: usize,
    pub mode: FisherMode,
    pub seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            n_list: vec![256, 1024, 4096],
            grid_points: DEFAULT_GRID_POINTS,
            val_limit: DEFAULT_VAL_LIMIT,
            mode: FisherMode::Exact,
            seed: 0,
        }
    }
}

fn best_of(
    task: &IntermediateTask,
    fishers: [Option<&FisherDiagonal>; 2],
    mode: MergeMode,
    settings: &AblationSettings,
) -> Result<(Vec<f64>, f64, Option<f64>)> {
    let template = SweepTemplate::new(vec![task.target, task.donor], fishers.to_vec(), 0, mode);
    let grid = lambda_grid(2, settings.grid_points)?;
    let result = sweep(&template, &grid, task.target_spec, task.val, "acc", settings.val_limit)?;
    let best = result.best();
    let test_acc = match task.test {
        Some(test) => Some(Classifier::new(task.target_spec, &template.merged(&best.lambdas)?)?.evaluate(test, None)?),
        None => None,
    };
    Ok((best.lambdas.clone(), best.metrics["acc"], test_acc))
}

/// For each Fisher example count, estimates both Fishers, grid-searches the
/// coefficients on validation and records the selected merge's scores.
pub fn ablate_fisher_n(task: &IntermediateTask, settings: &AblationSettings) -> Result<AblationReport> {
    let target_model = Classifier::new(task.target_spec, task.target)?;
    let target_val_acc = target_model.evaluate(task.val, Some(settings.val_limit))?;
    let target_test_acc = task.test.map(|t| target_model.evaluate(t, None)).transpose()?;

    let (lambdas, val_acc, test_acc) = best_of(task, [None, None], MergeMode::Isotropic, settings)?;
    let isotropic = AblationRow {
        n_examples: 0,
        target_fisher_examples: 0,
        donor_fisher_examples: 0,
        best_lambdas: lambdas,
        val_acc,
        test_acc,
    };

    let mut rows = Vec::with_capacity(settings.n_list.len());
    for &n in &settings.n_list {
        let cfg = FisherConfig { n_examples: n, mode: settings.mode, seed: settings.seed };
        let f_target = estimate_fisher(task.target_spec, task.target, task.target_train, &cfg)?;
        let f_donor = estimate_fisher(task.donor_spec, task.donor, task.donor_train, &cfg)?;
        let (lambdas, val_acc, test_acc) =
            best_of(task, [Some(&f_target), Some(&f_donor)], MergeMode::Fisher, settings)?;
        rows.push(AblationRow {
            n_examples: n,
            target_fisher_examples: f_target.info.n_examples_used,
            donor_fisher_examples: f_donor.info.n_examples_used,
            best_lambdas: lambdas,
            val_acc,
            test_acc,
        });
    }
    Ok(AblationReport {
        schema: ABLATION_SCHEMA.to_string(),
        grid_points: settings.grid_points,
        val_limit: settings.val_limit,
        target_val_acc,
        target_test_acc,
        isotropic,
        rows,
    })
}

/// Checkpoints for the intermediate-task benchmark built from one suite.
#[derive(Debug, Clone)]
pub struct IntermediateBenchmark {
    pub suite: TaskSuite,
    pub target_spec: ModelSpec,
    pub target: ParameterSet,
    pub target_train: LabeledDataset,
    pub donor_spec: ModelSpec,
    pub donor: ParameterSet,
    pub donor_train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl IntermediateBenchmark {
    /// Pretrains on `blobs-base`, fine-tunes a donor on `blobs-rot20` and a
    /// target on a subset of `blobs-rot40`.
    pub fn build(suite_seed: u64, cfg: &BenchmarkConfig) -> Result<Self> {
        let suite = make_task_suite(suite_seed)?;
        let pre_task = suite_task(&suite, &cfg.pretrain_task)?;
        let donor_task = suite_task(&suite, &cfg.donor_task)?;
        let target_task = suite_task(&suite, &cfg.target_task)?;
        let pre_spec = suite.spec_for(pre_task);
        let pre = pretrain(&suite, &pre_spec, cfg)?;
        let tc = |k: u64| TrainConfig { seed: suite_seed.wrapping_mul(1000).wrapping_add(k), ..cfg.finetune.clone() };
        let start = |task: &Task, spec: &ModelSpec, k: u64| -> Result<ParameterSet> {
            if task.num_classes() == pre_spec.num_classes {
                Ok(pre.clone())
            } else {
                reinit_head(spec, &pre, suite_seed.wrapping_add(k))
            }
        };
        let donor_spec = suite.spec_for(donor_task);
        let donor = train(&donor_spec, &start(donor_task, &donor_spec, 11)?, &donor_task.train, &tc(1))?;
        let target_spec = suite.spec_for(target_task);
        let target_train = target_task.train.prefix(cfg.target_train_size);
        let target = train(&target_spec, &start(target_task, &target_spec, 12)?, &target_train, &tc(2))?;
        Ok(IntermediateBenchmark {
            donor_train: donor_task.train.clone(),
            val: target_task.val.clone(),
            test: target_task.test.clone(),
            suite,
            target_spec,
            target,
            target_train,
            donor_spec,
            donor,
        })
    }

    pub fn task(&self) -> IntermediateTask<'_> {
        IntermediateTask {
            target_spec: &self.target_spec,
            target: &self.target,
            target_train: &self.target_train,
            donor_spec: &self.donor_spec,
            donor: &self.donor,
            donor_train: &self.donor_train,
            val: &self.val,
            test: Some(&self.test),
        }
    }
}
