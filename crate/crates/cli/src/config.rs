//! Experiment configuration: strict TOML parsing and exhaustive validation.
//!
//! Parsing rejects unknown keys outright; semantic validation collects every
//! violation instead of stopping at the first, so one edit-run cycle fixes a
//! whole config. Defaults are filled at parse time, which makes
//! parse -> serialize -> parse an identity.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use fedinv_core::model::{Arch, Loss, ModelSpec};
use fedinv_core::sim::Behavior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub clients: ClientsConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `linear`, `logistic`, or `mlp`.
    pub arch: String,
    pub input_dim: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Hidden layer widths; `mlp` only.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// `squared-error` or `cross-entropy`.
    pub loss: String,
}

/// One table for all data kinds; which keys apply depends on `kind`, and
/// validation rejects keys from the wrong kind as strictly as serde rejects
/// unknown ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `synthetic`, `quadratic`, `stained-images`, or `container`.
    pub kind: String,

    // synthetic and stained-images
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_envs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_env: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr_schedule: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    /// Explicit client -> env assignment; defaults to round-robin over the
    /// training environments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_map: Option<Vec<usize>>,

    // synthetic only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_inv: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_spur: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_test: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_env: Option<usize>,

    // quadratic only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curv_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curv_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_scale: Option<f64>,

    // stained-images only; `num_envs` counts training environments and one
    // held-out test environment is appended after them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_noise: Option<f64>,
    /// `none`, `foreground`, `background`, or `both`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stain_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_corr: Option<f64>,
    /// The test environment colors label `l` as `(l + shift) % palette`;
    /// training environments use the identity combination `l % palette`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_color_shift: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noise: Option<f64>,

    // container only
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    pub count: usize,
    #[serde(default, rename = "override", skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<ClientOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientOverride {
    pub id: usize,
    /// `normal`, `slow-compute`, `lossy-link`, or `heterogeneous-env`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<String>,
    /// Upload period; `slow-compute` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    /// Per-round delivery probability; `lossy-link` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_prob: Option<f64>,
    /// Local data rotation; `heterogeneous-env` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_deg: Option<f64>,
    /// Aggregation weight override; defaults to the client's sample count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_n: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub eta: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// `zeros` or `scaled-normal`.
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Smoothness constant used inside the logged contribution metric.
    #[serde(default = "default_contribution_l")]
    pub contribution_l: f64,
    #[serde(default)]
    pub pretrain: PretrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default)]
    pub enabled: bool,
    /// Number of probe rounds.
    #[serde(rename = "K", default = "default_probe_rounds")]
    pub k: usize,
    #[serde(default)]
    pub epsilon_exit: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            enabled: false,
            k: default_probe_rounds(),
            epsilon_exit: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        OutputsConfig {
            dir: default_out_dir(),
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "default_upsilon")]
    pub upsilon: f64,
    #[serde(default = "default_grid_steps")]
    pub grid_steps: usize,
    /// Round horizons for the convergence check; defaults to `[T]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_max_tau")]
    pub max_tau: usize,
    #[serde(default = "default_num_probes")]
    pub num_probes: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            upsilon: default_upsilon(),
            grid_steps: default_grid_steps(),
            horizons: Vec::new(),
            max_tau: default_max_tau(),
            num_probes: default_num_probes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { lambdas: default_lambdas() }
    }
}

fn default_num_classes() -> usize {
    2
}
fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_eval_every() -> usize {
    10
}
fn default_threads() -> usize {
    1
}
fn default_init() -> String {
    "scaled-normal".into()
}
fn default_init_scale() -> f64 {
    0.1
}
fn default_contribution_l() -> f64 {
    1.0
}
fn default_probe_rounds() -> usize {
    10
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_upsilon() -> f64 {
    0.1
}
fn default_grid_steps() -> usize {
    10
}
fn default_max_tau() -> usize {
    5
}
fn default_num_probes() -> usize {
    20
}
fn default_lambdas() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1]
}

impl ModelConfig {
    pub fn to_spec(&self) -> Result<ModelSpec, String> {
        let arch = match self.arch.as_str() {
            "linear" => Arch::Linear {
                input_dim: self.input_dim,
            },
            "logistic" => Arch::Logistic {
                input_dim: self.input_dim,
                num_classes: self.num_classes,
            },
            "mlp" => Arch::MlpTanh {
                input_dim: self.input_dim,
                hidden: self.hidden.clone(),
                num_classes: self.num_classes,
            },
            other => return Err(format!("model.arch has no variant named {other:?}")),
        };
        let loss = match self.loss.as_str() {
            "squared-error" => Loss::SquaredError,
            "cross-entropy" => Loss::CrossEntropy,
            other => return Err(format!("model.loss has no variant named {other:?}")),
        };
        ModelSpec::new(arch, loss).map_err(|e| format!("model: {e}"))
    }
}

impl ClientOverride {
    /// The behavior this override requests; `None` when only the weight is
    /// overridden. Call after validation.
    pub fn to_behavior(&self) -> Option<Behavior> {
        match self.behavior.as_deref() {
            Some("normal") => Some(Behavior::Normal),
            Some("slow-compute") => Some(Behavior::SlowCompute {
                period: self.period.unwrap_or(1),
            }),
            Some("lossy-link") => Some(Behavior::LossyLink {
                success_prob: self.success_prob.unwrap_or(1.0),
            }),
            Some("heterogeneous-env") => Some(Behavior::HeterogeneousEnv {
                rotation_deg: self.rotation_deg.unwrap_or(0.0),
            }),
            _ => None,
        }
    }
}

impl ExperimentConfig {
    /// Every semantic violation in the config, named by key path. Empty
    /// means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.check_model(&mut v);
        self.check_data(&mut v);
        self.check_clients(&mut v);
        self.check_schedule(&mut v);
        self.check_outputs(&mut v);
        self.check_theory(&mut v);
        self.check_sweep(&mut v);
        v
    }

    fn check_model(&self, v: &mut Vec<String>) {
        let m = &self.model;
        if !matches!(m.arch.as_str(), "linear" | "logistic" | "mlp") {
            v.push(format!(
                "model.arch must be one of linear, logistic, mlp; got {:?}",
                m.arch
            ));
        }
        if !matches!(m.loss.as_str(), "squared-error" | "cross-entropy") {
            v.push(format!(
                "model.loss must be squared-error or cross-entropy; got {:?}",
                m.loss
            ));
        }
        if m.input_dim == 0 {
            v.push("model.input_dim must be at least 1".into());
        }
        if m.arch != "linear" && m.num_classes < 2 {
            v.push(format!(
                "model.num_classes must be at least 2, got {}",
                m.num_classes
            ));
        }
        if m.arch == "mlp" && (m.hidden.is_empty() || m.hidden.iter().any(|h| *h == 0)) {
            v.push("model.hidden must be nonempty with positive widths".into());
        }
        if m.arch == "linear" && m.loss == "cross-entropy" {
            v.push("model.loss cross-entropy needs a classifier arch (logistic or mlp)".into());
        }
    }

    fn check_data(&self, v: &mut Vec<String>) {
        let d = &self.data;
        let kind = d.kind.as_str();
        if !matches!(kind, "synthetic" | "quadratic" | "stained-images" | "container") {
            v.push(format!(
                "data.kind must be one of synthetic, quadratic, stained-images, container; got {kind:?}"
            ));
            return;
        }
        // Key applicability per kind.
        let mut require = |name: &str, present: bool| {
            if !present {
                v.push(format!("data.{name} is required when data.kind = {kind:?}"));
            }
        };
        match kind {
            "synthetic" => {
                require("num_envs", d.num_envs.is_some());
                require("n_per_env", d.n_per_env.is_some());
                require("d_inv", d.d_inv.is_some());
                require("d_spur", d.d_spur.is_some());
                require("corr_schedule", d.corr_schedule.is_some());
                require("holdout_env", d.holdout_env.is_some());
            }
            "quadratic" => {
                require("dim", d.dim.is_some());
            }
            "stained-images" => {
                require("num_envs", d.num_envs.is_some());
                require("n_per_env", d.n_per_env.is_some());
                require("corr_schedule", d.corr_schedule.is_some());
                require("stain_mode", d.stain_mode.is_some());
            }
            "container" => {
                require("path", d.path.is_some());
                require("holdout_env", d.holdout_env.is_some());
            }
            _ => unreachable!(),
        }
        let groups: [(&str, bool, &[&str]); 13] = [
            ("num_envs", d.num_envs.is_some(), &["synthetic", "stained-images"]),
            ("n_per_env", d.n_per_env.is_some(), &["synthetic", "stained-images"]),
            (
                "corr_schedule",
                d.corr_schedule.is_some(),
                &["synthetic", "stained-images"],
            ),
            (
                "train_fraction",
                d.train_fraction.is_some(),
                &["synthetic", "stained-images", "container"],
            ),
            (
                "env_map",
                d.env_map.is_some(),
                &["synthetic", "stained-images", "container"],
            ),
            (
                "d_inv",
                d.d_inv.is_some() || d.d_spur.is_some() || d.flip_test.is_some(),
                &["synthetic"],
            ),
            (
                "holdout_env",
                d.holdout_env.is_some(),
                &["synthetic", "container"],
            ),
            (
                "dim",
                d.dim.is_some()
                    || d.curv_min.is_some()
                    || d.curv_max.is_some()
                    || d.center_scale.is_some(),
                &["quadratic"],
            ),
            (
                "images",
                d.images.is_some() || d.labels.is_some(),
                &["stained-images"],
            ),
            (
                "image_rows",
                d.image_rows.is_some() || d.image_cols.is_some() || d.pixel_noise.is_some(),
                &["stained-images"],
            ),
            (
                "stain_mode",
                d.stain_mode.is_some() || d.palette.is_some(),
                &["stained-images"],
            ),
            (
                "test_corr",
                d.test_corr.is_some() || d.test_color_shift.is_some() || d.label_noise.is_some(),
                &["stained-images"],
            ),
            ("path", d.path.is_some(), &["container"]),
        ];
        for (name, present, kinds) in groups {
            if present && !kinds.contains(&kind) {
                v.push(format!("data.{name} does not apply when data.kind = {kind:?}"));
            }
        }
        // Value ranges.
        if let Some(n) = d.num_envs {
            if n == 0 {
                v.push("data.num_envs must be at least 1".into());
            }
        }
        if let Some(n) = d.n_per_env {
            if n == 0 {
                v.push("data.n_per_env must be at least 1".into());
            }
        }
        if let Some(cs) = &d.corr_schedule {
            let lo = if kind == "stained-images" { 0.0 } else { -1.0 };
            if let Some(bad) = cs.iter().find(|c| !(lo..=1.0).contains(*c)) {
                v.push(format!(
                    "data.corr_schedule entries must lie in [{lo}, 1], got {bad}"
                ));
            }
            if kind == "synthetic" {
                if let Some(n) = d.num_envs {
                    if cs.len() != n {
                        v.push(format!(
                            "data.corr_schedule has {} entries for {n} envs",
                            cs.len()
                        ));
                    }
                }
            }
            if kind == "stained-images" {
                if let Some(n) = d.num_envs {
                    if cs.len() != n {
                        v.push(format!(
                            "data.corr_schedule has {} entries for {n} training envs",
                            cs.len()
                        ));
                    }
                }
            }
        }
        if let Some(f) = d.train_fraction {
            if !(f > 0.0 && f <= 1.0) {
                v.push(format!("data.train_fraction must lie in (0, 1], got {f}"));
            }
        }
        if let (Some(h), Some(n)) = (d.holdout_env, d.num_envs) {
            if kind == "synthetic" && h >= n {
                v.push(format!(
                    "data.holdout_env {h} does not exist among {n} envs"
                ));
            }
        }
        if let Some(map) = &d.env_map {
            if map.len() != self.clients.count {
                v.push(format!(
                    "data.env_map has {} entries for {} clients",
                    map.len(),
                    self.clients.count
                ));
            }
            if let Some(n) = d.num_envs {
                let holdout = match kind {
                    "stained-images" => Some(n),
                    _ => d.holdout_env,
                };
                for e in map {
                    if *e >= n + usize::from(kind == "stained-images") {
                        v.push(format!("data.env_map references nonexistent env {e}"));
                    } else if Some(*e) == holdout {
                        v.push(format!("data.env_map assigns the holdout env {e} to a client"));
                    }
                }
            }
        }
        if let Some(dim) = d.dim {
            if dim == 0 {
                v.push("data.dim must be at least 1".into());
            }
        }
        let lo = d.curv_min.unwrap_or(0.5);
        let hi = d.curv_max.unwrap_or(1.5);
        if kind == "quadratic" && !(lo > 0.0 && hi >= lo) {
            v.push(format!(
                "data.curv_min/curv_max must satisfy 0 < min <= max, got ({lo}, {hi})"
            ));
        }
        if let Some(s) = d.center_scale {
            if !(s.is_finite() && s >= 0.0) {
                v.push(format!(
                    "data.center_scale must be finite and nonnegative, got {s}"
                ));
            }
        }
        if d.images.is_some() != d.labels.is_some() {
            v.push("data.images and data.labels must be given together".into());
        }
        if let Some(m) = &d.stain_mode {
            if !matches!(m.as_str(), "none" | "foreground" | "background" | "both") {
                v.push(format!(
                    "data.stain_mode must be one of none, foreground, background, both; got {m:?}"
                ));
            }
        }
        if let Some(p) = d.palette {
            if p < 2 {
                v.push(format!("data.palette must be at least 2, got {p}"));
            }
            if let Some(s) = d.test_color_shift {
                if s >= p {
                    v.push(format!(
                        "data.test_color_shift must be below the palette size {p}, got {s}"
                    ));
                }
            }
        }
        if let Some(c) = d.test_corr {
            if !(0.0..=1.0).contains(&c) {
                v.push(format!("data.test_corr must lie in [0, 1], got {c}"));
            }
        }
        if let Some(p) = d.label_noise {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("data.label_noise must lie in [0, 1], got {p}"));
            }
        }
        if let Some(p) = d.pixel_noise {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("data.pixel_noise must lie in [0, 1], got {p}"));
            }
        }
        if let Some(r) = d.image_rows {
            if r == 0 {
                v.push("data.image_rows must be at least 1".into());
            }
        }
        if let Some(c) = d.image_cols {
            if c == 0 {
                v.push("data.image_cols must be at least 1".into());
            }
        }
        // Cross-checks with the model, where the feature layout is known
        // before generation.
        match kind {
            "synthetic" => {
                if let (Some(di), Some(ds)) = (d.d_inv, d.d_spur) {
                    if di == 0 || ds == 0 {
                        v.push("data.d_inv and data.d_spur must be at least 1".into());
                    } else if self.model.input_dim != di + ds {
                        v.push(format!(
                            "model.input_dim must equal d_inv + d_spur = {}, got {}",
                            di + ds,
                            self.model.input_dim
                        ));
                    }
                }
                if self.model.arch != "linear" && self.model.num_classes != 2 {
                    v.push("model.num_classes must be 2 for synthetic data".into());
                }
            }
            "quadratic" => {
                if self.model.arch != "linear" || self.model.loss != "squared-error" {
                    v.push("quadratic data needs model.arch = linear with squared-error loss".into());
                }
                if let Some(dim) = d.dim {
                    if dim > 0 && self.model.input_dim != dim {
                        v.push(format!(
                            "model.input_dim must equal data.dim = {dim}, got {}",
                            self.model.input_dim
                        ));
                    }
                }
            }
            "stained-images" => {
                let rows = d.image_rows.unwrap_or(8);
                let cols = d.image_cols.unwrap_or(8);
                let palette = d.palette.unwrap_or(10);
                let expect = rows * cols * (1 + palette);
                if self.model.input_dim != expect {
                    v.push(format!(
                        "model.input_dim must equal rows*cols*(1+palette) = {expect}, got {}",
                        self.model.input_dim
                    ));
                }
                if self.model.arch != "linear" && self.model.num_classes != 10 {
                    v.push("model.num_classes must be 10 for stained digit images".into());
                }
            }
            _ => {}
        }
    }

    fn check_clients(&self, v: &mut Vec<String>) {
        let c = &self.clients;
        if c.count == 0 {
            v.push("clients.count must be at least 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &c.overrides {
            let key = format!("clients.override[id={}]", o.id);
            if o.id >= c.count && c.count > 0 {
                v.push(format!("{key} is out of range for {} clients", c.count));
            }
            if !seen.insert(o.id) {
                v.push(format!("{key} appears more than once"));
            }
            let behavior = o.behavior.as_deref();
            match behavior {
                None | Some("normal" | "slow-compute" | "lossy-link" | "heterogeneous-env") => {}
                Some(other) => v.push(format!(
                    "{key}.behavior must be one of normal, slow-compute, lossy-link, heterogeneous-env; got {other:?}"
                )),
            }
            if o.period.is_some() && behavior != Some("slow-compute") {
                v.push(format!("{key}.period applies only to slow-compute"));
            }
            if behavior == Some("slow-compute") && o.period.map_or(true, |p| p == 0) {
                v.push(format!("{key}.period must be at least 1 for slow-compute"));
            }
            if o.success_prob.is_some() && behavior != Some("lossy-link") {
                v.push(format!("{key}.success_prob applies only to lossy-link"));
            }
            if behavior == Some("lossy-link") {
                match o.success_prob {
                    Some(p) if (0.0..=1.0).contains(&p) => {}
                    Some(p) => v.push(format!(
                        "{key}.success_prob must lie in [0, 1], got {p}"
                    )),
                    None => v.push(format!("{key}.success_prob is required for lossy-link")),
                }
            }
            if o.rotation_deg.is_some() && behavior != Some("heterogeneous-env") {
                v.push(format!("{key}.rotation_deg applies only to heterogeneous-env"));
            }
            if behavior == Some("heterogeneous-env") {
                match o.rotation_deg {
                    Some(r) if r.is_finite() => {}
                    Some(r) => v.push(format!("{key}.rotation_deg must be finite, got {r}")),
                    None => v.push(format!(
                        "{key}.rotation_deg is required for heterogeneous-env"
                    )),
                }
            }
            if o.weight_n == Some(0) {
                v.push(format!("{key}.weight_n must be at least 1"));
            }
        }
    }

    fn check_schedule(&self, v: &mut Vec<String>) {
        let s = &self.schedule;
        if !(s.eta > 0.0 && s.eta.is_finite()) {
            v.push(format!(
                "schedule.eta must be positive and finite, got {}",
                s.eta
            ));
        }
        if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
            v.push(format!(
                "schedule.lambda must be nonnegative and finite, got {}",
                s.lambda
            ));
        }
        if s.eval_every == 0 {
            v.push("schedule.eval_every must be at least 1".into());
        }
        if s.threads == 0 {
            v.push("schedule.threads must be at least 1".into());
        }
        if !matches!(s.init.as_str(), "zeros" | "scaled-normal") {
            v.push(format!(
                "schedule.init must be zeros or scaled-normal; got {:?}",
                s.init
            ));
        }
        if !(s.init_scale > 0.0 && s.init_scale.is_finite()) {
            v.push(format!(
                "schedule.init_scale must be positive and finite, got {}",
                s.init_scale
            ));
        }
        if !(s.contribution_l >= 0.0 && s.contribution_l.is_finite()) {
            v.push(format!(
                "schedule.contribution_l must be nonnegative and finite, got {}",
                s.contribution_l
            ));
        }
        if s.pretrain.enabled && s.pretrain.k == 0 {
            v.push("schedule.pretrain.K must be at least 1".into());
        }
        if !s.pretrain.epsilon_exit.is_finite() {
            v.push(format!(
                "schedule.pretrain.epsilon_exit must be finite, got {}",
                s.pretrain.epsilon_exit
            ));
        }
    }

    fn check_outputs(&self, v: &mut Vec<String>) {
        if self.outputs.checkpoint_every == Some(0) {
            v.push("outputs.checkpoint_every must be at least 1".into());
        }
    }

    fn check_theory(&self, v: &mut Vec<String>) {
        let Some(t) = &self.theory else { return };
        if !(t.upsilon.is_finite() && t.upsilon >= 0.0) {
            v.push(format!(
                "theory.upsilon must be finite and nonnegative, got {}",
                t.upsilon
            ));
        }
        if t.grid_steps < 2 {
            v.push("theory.grid_steps must be at least 2".into());
        }
        if t.max_tau == 0 {
            v.push("theory.max_tau must be at least 1".into());
        }
        if t.num_probes == 0 {
            v.push("theory.num_probes must be at least 1".into());
        }
        for h in &t.horizons {
            if *h == 0 || *h > self.schedule.t {
                v.push(format!(
                    "theory.horizons entry {h} must lie in 1..=T ({})",
                    self.schedule.t
                ));
            }
        }
        if t.horizons.is_empty() && self.schedule.t == 0 {
            v.push("theory checks need schedule.T >= 1".into());
        }
    }

    fn check_sweep(&self, v: &mut Vec<String>) {
        let Some(s) = &self.sweep else { return };
        if s.lambdas.is_empty() {
            v.push("sweep.lambdas must be nonempty".into());
        }
        for l in &s.lambdas {
            if !(l.is_finite() && *l >= 0.0) {
                v.push(format!(
                    "sweep.lambdas entries must be nonnegative and finite, got {l}"
                ));
            }
        }
    }
}

/// Parses and fully validates a config file. The error is the complete list
/// of problems, one per line.
pub fn parse_config(path: &std::path::Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    parse_config_str(&text)
}

/// [`parse_config`] on in-memory text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, Vec<String>> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| vec![e.to_string()])?;
    let violations = cfg.violations();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(violations)
    }
}
