//! Run configuration: one JSON document, unknown keys rejected, command-line
//! flags layered on top, and a content hash recorded with every log.

use std::path::Path;

use autolambda_core::grouping::GroupingOptions;
use autolambda_core::network::LossKind;
use autolambda_core::tasks::{
    add_noise_task, gen_teacher_family, PairMode, PoolSizes, RelatednessPlan, TaskFamily,
    TeacherConfig,
};
use autolambda_core::train::{NetworkShape, StrategyConfig, TrainerConfig};
use autolambda_core::weighting::{AutoLambdaConfig, DEFAULT_BETA};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::load_csv_dataset;
use crate::error::CliError;


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub family: FamilyConfig,
    pub network: NetworkShape,
    pub trainer: TrainerConfig,
    /// Strategy of `run`.
    pub strategy: StrategyConfig,
    /// Strategies of `compare`; each gets its own row.
    pub strategies: Vec<StrategyConfig>,
    /// When set, overrides the trainer, network and family seeds.
    pub seed: Option<u64>,
    /// Worker threads for commands that fan out independent trainings.
    pub jobs: usize,
    /// Output directory.
    pub out: Option<String>,
    /// Trajectory rows between flushes.
    pub eval_every: usize,
    pub grouping: GroupingOptions,
    pub ablation: AblationConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            network: NetworkShape::default(),
            trainer: TrainerConfig::default(),
            strategy: StrategyConfig::AutoLambda(AutoLambdaConfig::default()),
            strategies: Vec::new(),
            seed: None,
            jobs: 1,
            out: None,
            eval_every: 100,
            grouping: GroupingOptions::default(),
            ablation: AblationConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyConfig {
    Teacher(TeacherFamily),
    Csv(CsvFamily),
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig::Teacher(TeacherFamily::default())
    }
}

/// A planted teacher family, optionally with a noise-prediction task and
/// classification heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherFamily {
    pub input_dim: usize,
    /// Uniform off-diagonal overlap used when `plan` is absent.
    pub num_tasks: usize,
    pub rho: f64,
    pub plan: Option<RelatednessPlan>,
    pub noise_std: f64,
    pub seed: u64,
    pub sizes: PoolSizes,
    pub multi_domain: bool,
    pub names: Vec<String>,
    pub noise_task: bool,
    /// Tasks turned into classification tasks, as `(task, classes)`.
    pub classify: Vec<(usize, usize)>,
}

impl Default for TeacherFamily {
    fn default() -> Self {
        Self {
            input_dim: 12,
            num_tasks: 3,
            rho: 0.5,
            plan: None,
            noise_std: 0.1,
            seed: 0,
            sizes: PoolSizes {
                train: 4096,
                val: 256,
                test: 1024,
            },
            multi_domain: false,
            names: Vec::new(),
            noise_task: true,
            classify: Vec::new(),
        }
    }
}

impl TeacherFamily {
    pub fn build(&self) -> Result<TaskFamily, CliError> {
        let plan = self
            .plan
            .clone()
            .unwrap_or_else(|| RelatednessPlan::uniform(self.num_tasks, self.rho, self.seed));
        let mut family = gen_teacher_family(&TeacherConfig {
            input_dim: self.input_dim,
            plan,
            noise_std: self.noise_std,
            seed: self.seed,
            sizes: self.sizes,
            multi_domain: self.multi_domain,
            names: self.names.clone(),
        })?;
        for &(task, classes) in &self.classify {
            family = family.classify(task, classes)?;
        }
        if self.noise_task {
            family = add_noise_task(&family, self.seed.wrapping_add(100));
        }
        Ok(family)
    }
}

/// A family read from a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvFamily {
    pub path: String,
    pub schema: CsvSchema,
    #[serde(default)]
    pub shuffle_seed: u64,
}

/// Column roles of a CSV dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub inputs: Vec<String>,
    pub tasks: Vec<CsvTask>,
    /// Column holding 0 (train), 1 (validation) or 2 (test). Without it the
    /// shuffled rows are split by the fractions below.
    #[serde(default)]
    pub split_column: Option<String>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub name: String,
    /// Target columns; one class-index column for classification.
    pub targets: Vec<String>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Class count of a classification task.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Marks a noise-prediction task, which is excluded from evaluation.
    #[serde(default)]
    pub noise: bool,
}

fn default_loss() -> LossKind {
    LossKind::Mse
}

impl FamilyConfig {
    pub fn build(&self) -> Result<TaskFamily, CliError> {
        match self {
            FamilyConfig::Teacher(t) => t.build(),
            FamilyConfig::Csv(c) => load_csv_dataset(Path::new(&c.path), &c.schema, c.shuffle_seed),
        }
    }
}

/// Which cells of the weight-learning ablation are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationDesign {
    /// Vary one factor at a time around the first value of each list.
    OneAtATime,
    /// Every combination.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub inits: Vec<f64>,
    pub betas: Vec<f64>,
    pub pair_modes: Vec<PairMode>,
    pub seeds: usize,
    pub design: AblationDesign,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            inits: vec![0.1, 0.01, 1.0],
            betas: vec![DEFAULT_BETA, 0.09, 0.9, 3.0],
            pair_modes: vec![PairMode::Swap, PairMode::NoSwap],
            seeds: 1,
            design: AblationDesign::OneAtATime,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub graphs: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Random networks on which the parameter partition is verified.
    pub partition_nets: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            graphs: 100,
            step: 1e-6,
            tolerance: 1e-4,
            partition_nets: 20,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
    }

    /// Copies the top-level seed into every seeded component.
    pub fn resolve_seed(&mut self) {
        let Some(seed) = self.seed else { return };
        self.trainer.seed = seed;
        self.network.seed = seed;
        match &mut self.family {
            FamilyConfig::Teacher(t) => {
                t.seed = seed;
                if let Some(plan) = &mut t.plan {
                    plan.teacher_seed = seed;
                }
            }
            FamilyConfig::Csv(c) => c.shuffle_seed = seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        let t = &self.trainer;
        if t.batch_size == 0 {
            return bad("trainer.batch_size must be at least 1");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("trainer.lr must be positive");
        }
        for s in std::iter::once(&self.strategy).chain(&self.strategies) {
            if let StrategyConfig::AutoLambda(a) = s {
                if !(a.beta >= 0.0 && a.beta.is_finite()) || !(a.init.is_finite()) {
                    return bad("auto_lambda beta and init must be finite, beta non-negative");
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring settings that cannot
    /// change results (output directory and worker count).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = None;
        canon.jobs = 1;
        let digest = Sha256::digest(serde_json::to_vec(&canon).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
