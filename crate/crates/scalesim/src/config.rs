//! Scenario configuration: a strict TOML schema (unknown keys are fatal,
//! because silent config typos are the dominant failure mode in simulation
//! studies), validation, and a canonical hash for artifact provenance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};
use crate::perfmodel::{calibrate_profile, InstanceClass, ModelKind, PerfProfile};
use crate::workload::{ArrivalProcess, RequestClass};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Simulated seconds.
    pub horizon: f64,
    #[serde(default = "default_gpu_cap")]
    pub gpu_cap: u32,
    /// Output directory; CLI flags and SIM_OUTPUT_ROOT take precedence.
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub autoscaler: AutoscalerConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub profiles: BTreeMap<String, ProfileConfig>,
    #[serde(default)]
    pub initial_instances: Vec<InitialInstances>,
    #[serde(default)]
    pub workload: Vec<WorkloadStream>,
    #[serde(default)]
    pub inject: Vec<Injection>,
    /// Pre-generated trace CSV; merged with generated workload streams.
    #[serde(default)]
    pub trace: Option<String>,
}

fn default_gpu_cap() -> u32 {
    50
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoscalerKind {
    /// Both tiers: per-instance batch sizing plus cluster scaling.
    Hierarchical,
    /// Utilization-threshold scaling with static batch sizes.
    Baseline,
    /// Batch-size controller only; instance counts stay fixed.
    LocalOnly,
    /// Cluster scaling only; batch sizes stay static.
    GlobalOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoscalerConfig {
    pub kind: AutoscalerKind,
    /// Interactive busy-fraction target.
    pub theta: f64,
    /// Band half-width around theta.
    pub delta: f64,
    /// EWMA weight for batch-size growth.
    pub alpha: f64,
    /// Backpressure band above 1 that still takes the EWMA branch.
    pub deadband: f64,
    /// Route backpressure exactly 1 to the halving branch.
    pub strict_alg1: bool,
    /// TTFT SLO clustering tolerance, seconds.
    pub group_tolerance: f64,
    /// Share of interactive-tier scale-ups provisioned as mixed instances.
    pub mixed_fraction: f64,
    pub baseline_low: f64,
    pub baseline_high: f64,
    /// Autoscale cadence, simulated seconds.
    pub tick: f64,
    pub max_batch_ceiling: u64,
    /// Starting max_batch_size under the adaptive controller.
    pub initial_max_batch: u64,
    /// Fixed max_batch_size when the local controller is off.
    pub static_max_batch: u64,
    /// Interactive+mixed instances the scaler must keep.
    pub min_interactive_pool: u64,
    /// ITL ring length in steps; also the controller holdoff.
    pub itl_window_steps: usize,
    /// Trailing completion window for throughput backpressure, seconds.
    pub tput_window: f64,
    /// Prior mean/std for queued-request output estimates before enough
    /// completions accumulate.
    pub output_prior_mean: f64,
    pub output_prior_std: f64,
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        AutoscalerConfig {
            kind: AutoscalerKind::Hierarchical,
            theta: 1.0 / 3.0,
            delta: 0.05,
            alpha: 0.5,
            deadband: 0.0,
            strict_alg1: false,
            group_tolerance: 60.0,
            mixed_fraction: 0.5,
            baseline_low: 0.3,
            baseline_high: 0.8,
            tick: 1.0,
            max_batch_ceiling: 4096,
            initial_max_batch: 8,
            static_max_batch: 16,
            min_interactive_pool: 1,
            itl_window_steps: 20,
            tput_window: 30.0,
            output_prior_mean: 250.0,
            output_prior_std: 100.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Simulated seconds excluded from attainment scoring.
    pub warmup: f64,
    /// Score ITL on the mean gap instead of the max.
    pub itl_mean: bool,
    /// Convergence band as a fraction of the settled value.
    pub convergence_band: f64,
    /// Trailing window defining the settled value, seconds.
    pub convergence_window: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            warmup: 30.0,
            itl_mean: false,
            convergence_band: 0.1,
            convergence_window: 60.0,
        }
    }
}

/// Profile entry: a calibrated base ("small" or "large") with optional
/// field-level overrides.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub kind: Option<ProfileKind>,
    pub prefill_rate: Option<f64>,
    pub decode_base: Option<f64>,
    pub decode_per_token: Option<f64>,
    pub kv_capacity: Option<u64>,
    pub preempt_penalty: Option<f64>,
    pub recompute_on_restart: Option<bool>,
    pub load_time: Option<f64>,
    pub gpus_per_instance: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Small,
    Large,
}

impl ProfileConfig {
    pub fn build(&self, model_id: &str) -> PerfProfile {
        let base = match self.kind.unwrap_or(ProfileKind::Small) {
            ProfileKind::Small => calibrate_profile(ModelKind::Small),
            ProfileKind::Large => calibrate_profile(ModelKind::Large),
        };
        PerfProfile {
            model_id: model_id.to_string(),
            prefill_rate: self.prefill_rate.unwrap_or(base.prefill_rate),
            decode_base: self.decode_base.unwrap_or(base.decode_base),
            decode_per_token: self.decode_per_token.unwrap_or(base.decode_per_token),
            kv_capacity: self.kv_capacity.unwrap_or(base.kv_capacity),
            preempt_penalty: self.preempt_penalty.unwrap_or(base.preempt_penalty),
            recompute_on_restart: self
                .recompute_on_restart
                .unwrap_or(base.recompute_on_restart),
            load_time: self.load_time.unwrap_or(base.load_time),
            gpus_per_instance: self.gpus_per_instance.unwrap_or(base.gpus_per_instance),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialInstances {
    pub model: String,
    pub class: InstanceClass,
    pub count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Poisson,
    Gamma,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadStream {
    pub model: String,
    pub class: RequestClass,
    pub process: ProcessKind,
    /// Mean arrivals per second.
    pub rate: f64,
    /// Inter-arrival coefficient of variation (gamma only).
    #[serde(default = "default_cv")]
    pub cv: f64,
    /// Offset of the stream's first possible arrival.
    #[serde(default)]
    pub start: f64,
    pub duration: f64,
    pub tokens: TokenSpec,
    #[serde(default)]
    pub ttft_slo: Option<f64>,
    #[serde(default)]
    pub itl_slo: Option<f64>,
}

fn default_cv() -> f64 {
    1.0
}

/// Bulk queue population: `count` requests all arriving at `time`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub model: String,
    #[serde(default = "default_batch_class")]
    pub class: RequestClass,
    pub time: f64,
    pub count: u32,
    pub tokens: TokenSpec,
    #[serde(default)]
    pub ttft_slo: Option<f64>,
    #[serde(default)]
    pub itl_slo: Option<f64>,
}

fn default_batch_class() -> RequestClass {
    RequestClass::Batch
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenSpec {
    /// Long-tailed defaults drawn from the bundled table.
    Builtin,
    Lognormal {
        input_location: f64,
        input_scale: f64,
        output_location: f64,
        output_scale: f64,
    },
    Empirical {
        /// (input, output) pairs sampled jointly.
        table: Vec<(u64, u64)>,
    },
    /// Every request identical.
    Fixed { input: u64, output: u64 },
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SimError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ScenarioConfig = toml::from_str(&text)
            .map_err(|e| SimError::validation(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(SimError::validation("scenario name must be nonempty"));
        }
        if !(self.horizon > 0.0) {
            return Err(SimError::validation("horizon must be positive"));
        }
        if self.gpu_cap == 0 {
            return Err(SimError::validation("gpu_cap must be at least 1"));
        }
        if self.profiles.is_empty() {
            return Err(SimError::validation("at least one profile is required"));
        }
        let a = &self.autoscaler;
        crate::autoscale::global::OverprovisionPolicy {
            theta: a.theta,
            delta: a.delta,
        }
        .validate()?;
        if !(a.alpha > 0.0 && a.alpha <= 1.0) {
            return Err(SimError::validation("alpha must be in (0, 1]"));
        }
        if a.deadband < 0.0 {
            return Err(SimError::validation("deadband must be >= 0"));
        }
        if !(0.0..=1.0).contains(&a.mixed_fraction) {
            return Err(SimError::validation("mixed_fraction must be in [0, 1]"));
        }
        if !(0.0 <= a.baseline_low && a.baseline_low < a.baseline_high && a.baseline_high <= 1.0)
        {
            return Err(SimError::validation(
                "baseline thresholds need 0 <= low < high <= 1",
            ));
        }
        if !(a.tick > 0.0) {
            return Err(SimError::validation("tick must be positive"));
        }
        if a.initial_max_batch == 0
            || a.static_max_batch == 0
            || a.max_batch_ceiling < a.initial_max_batch
        {
            return Err(SimError::validation(
                "batch sizes must be >= 1 and within the ceiling",
            ));
        }
        if a.group_tolerance < 0.0 || a.tput_window <= 0.0 || a.itl_window_steps == 0 {
            return Err(SimError::validation(
                "group_tolerance >= 0, tput_window > 0, itl_window_steps >= 1",
            ));
        }
        if self.metrics.warmup < 0.0
            || !(0.0..1.0).contains(&self.metrics.convergence_band)
            || self.metrics.convergence_window <= 0.0
        {
            return Err(SimError::validation(
                "metrics: warmup >= 0, band in [0, 1), window > 0",
            ));
        }
        for init in &self.initial_instances {
            self.profile_named(&init.model)?;
        }
        for (i, w) in self.workload.iter().enumerate() {
            self.profile_named(&w.model)?;
            if !(w.rate > 0.0) || !(w.duration > 0.0) || w.start < 0.0 {
                return Err(SimError::validation(format!(
                    "workload[{i}]: rate and duration must be positive, start >= 0"
                )));
            }
            if w.process == ProcessKind::Gamma && w.cv < 1.0 {
                return Err(SimError::validation(format!(
                    "workload[{i}]: gamma cv must be >= 1"
                )));
            }
            validate_tokens(&w.tokens, &format!("workload[{i}]"))?;
        }
        for (i, inj) in self.inject.iter().enumerate() {
            self.profile_named(&inj.model)?;
            if inj.time < 0.0 || inj.count == 0 {
                return Err(SimError::validation(format!(
                    "inject[{i}]: time >= 0 and count >= 1"
                )));
            }
            validate_tokens(&inj.tokens, &format!("inject[{i}]"))?;
        }
        if self.workload.is_empty()
            && self.inject.is_empty()
            && self.trace.is_none()
            && self.initial_instances.is_empty()
        {
            return Err(SimError::validation(
                "scenario declares no work and no instances",
            ));
        }
        Ok(())
    }

    pub fn profile_named(&self, model: &str) -> Result<&ProfileConfig> {
        self.profiles.get(model).ok_or_else(|| {
            SimError::validation(format!("model '{model}' has no [profiles.{model}] entry"))
        })
    }

    /// Built profiles keyed by model id.
    pub fn built_profiles(&self) -> BTreeMap<String, PerfProfile> {
        self.profiles
            .iter()
            .map(|(id, p)| (id.clone(), p.build(id)))
            .collect()
    }

    /// Hash of the canonical serialization; identifies the exact
    /// configuration in summary.json independent of file formatting.
    pub fn config_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Deterministic per-stream RNG seed.
    pub fn stream_seed(&self, index: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_mul(0xA24B_AED4_963E_E407))
    }
}

fn validate_tokens(spec: &TokenSpec, ctx: &str) -> Result<()> {
    match spec {
        TokenSpec::Builtin => Ok(()),
        TokenSpec::Lognormal {
            input_scale,
            output_scale,
            ..
        } => {
            if *input_scale < 0.0 || *output_scale < 0.0 {
                return Err(SimError::validation(format!(
                    "{ctx}: lognormal scales must be >= 0"
                )));
            }
            Ok(())
        }
        TokenSpec::Empirical { table } => {
            if table.is_empty() {
                return Err(SimError::validation(format!(
                    "{ctx}: empirical table must be nonempty"
                )));
            }
            if table.iter().any(|&(i, o)| i == 0 || o == 0) {
                return Err(SimError::validation(format!(
                    "{ctx}: empirical tokens must be >= 1"
                )));
            }
            Ok(())
        }
        TokenSpec::Fixed { input, output } => {
            if *input == 0 || *output == 0 {
                return Err(SimError::validation(format!(
                    "{ctx}: fixed tokens must be >= 1"
                )));
            }
            Ok(())
        }
    }
}

impl TokenSpec {
    pub fn to_dist(&self, seed: u64) -> crate::workload::TokenDist {
        use crate::workload::TokenDist;
        match self {
            TokenSpec::Builtin => crate::workload::builtin_token_dist(seed),
            TokenSpec::Lognormal {
                input_location,
                input_scale,
                output_location,
                output_scale,
            } => TokenDist::Lognormal {
                input_location: *input_location,
                input_scale: *input_scale,
                output_location: *output_location,
                output_scale: *output_scale,
                seed,
            },
            TokenSpec::Empirical { table } => TokenDist::Empirical {
                table: table.clone(),
                seed,
            },
            TokenSpec::Fixed { input, output } => TokenDist::Empirical {
                table: vec![(*input, *output)],
                seed,
            },
        }
    }
}

impl WorkloadStream {
    pub fn arrival_process(&self) -> ArrivalProcess {
        match self.process {
            ProcessKind::Poisson => ArrivalProcess::Poisson,
            ProcessKind::Gamma => ArrivalProcess::Gamma,
        }
    }

    pub fn slos(&self) -> (f64, f64) {
        let (ttft, itl) = self.class.default_slos();
        (self.ttft_slo.unwrap_or(ttft), self.itl_slo.unwrap_or(itl))
    }
}

impl Injection {
    pub fn slos(&self) -> (f64, f64) {
        let (ttft, itl) = self.class.default_slos();
        (self.ttft_slo.unwrap_or(ttft), self.itl_slo.unwrap_or(itl))
    }
}
