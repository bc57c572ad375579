//! Hardware and model descriptors plus the flat `key = value` config loader.
//!
//! Config files are UTF-8 text with one `key = value` pair per line and `#`
//! comments. Keys carry dotted section prefixes (`hardware.`, `timing.`,
//! `model.`). Unknown keys are rejected so typos surface immediately.
//! Descriptors are immutable after load and safe to share across concurrent
//! simulation runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got `{text}`")]
    Malformed {
        path: String,
        line: usize,
        text: String,
    },
    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}:{line}: duplicate key `{key}`")]
    DuplicateKey {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}: missing key `{key}`")]
    MissingKey { path: String, key: String },
    #[error("{path}: key `{key}`: cannot parse `{value}` as {ty}")]
    BadValue {
        path: String,
        key: String,
        value: String,
        ty: &'static str,
    },
    #[error("invalid config: {0}")]
    Invariant(String),
}

/// DRAM timing parameters. Cycle-valued fields are in tCK units at the
/// configured pin rate; refresh fields are in nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DramTiming {
    pub tck_ns: f64,
    pub trcd: u32,
    pub trp: u32,
    pub tras: u32,
    pub trc: u32,
    pub tcl: u32,
    pub twr: u32,
    pub tccd_s: u32,
    pub tccd_l: u32,
    pub trrd_s: u32,
    pub trrd_l: u32,
    pub tfaw: u32,
    pub trefi_ns: f64,
    pub trfc_ns: f64,
}

impl DramTiming {
    /// Fraction by which DRAM array time inflates because the array is
    /// unavailable for tRFC out of every tREFI window.
    pub fn refresh_inflation(&self) -> f64 {
        1.0 + self.trfc_ns / self.trefi_ns
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.tck_ns <= 0.0 {
            return Err(ConfigError::Invariant("tck_ns must be positive".into()));
        }
        if self.trc < self.tras + self.trp {
            return Err(ConfigError::Invariant(format!(
                "tRC < tRAS + tRP ({} < {} + {})",
                self.trc, self.tras, self.trp
            )));
        }
        if self.trefi_ns <= self.trfc_ns {
            return Err(ConfigError::Invariant(format!(
                "tREFI_ns must exceed tRFC_ns ({} <= {})",
                self.trefi_ns, self.trfc_ns
            )));
        }
        if self.trefi_ns <= 0.0 || self.trfc_ns < 0.0 {
            return Err(ConfigError::Invariant(
                "tREFI_ns must be positive and tRFC_ns non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Static description of one GPU plus its attached HBM-PIM stacks and the
/// NVLink domain connecting `num_gpus` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareConfig {
    /// Peak GPU fp16 throughput, TFLOP/s.
    pub gpu_fp16_tflops: f64,
    /// External HBM-PIM bandwidth per GPU, TB/s.
    pub hbm_bandwidth_tbps: f64,
    pub hbm_pim_stacks: u32,
    /// Capacity per GPU in GB with the PIM capacity sacrifice already applied.
    pub hbm_capacity_gb: f64,
    /// NVLink bandwidth per direction, GB/s.
    pub nvlink_bw_gbps_per_dir: f64,
    pub nvlink_latency_us: f64,
    pub pseudo_channels_per_stack: u32,
    pub banks_per_pseudo_channel: u32,
    pub page_size_bytes: u32,
    pub pin_rate_gbps: f64,
    pub pim_compute_density_ops_per_byte: f64,
    /// Achieved fraction of peak fp16 throughput for grouped GEMM.
    pub gemm_efficiency: f64,
    /// Charged wall time of one dynamic scheduling decision, microseconds.
    pub sched_overhead_us: f64,
    pub dram_timing: DramTiming,
    pub num_gpus: u32,
}

impl HardwareConfig {
    /// Independently commanded PIM channels attached to one GPU.
    pub fn pim_channels_per_gpu(&self) -> u32 {
        self.hbm_pim_stacks * self.pseudo_channels_per_stack
    }

    /// External HBM bandwidth in bytes/s.
    pub fn hbm_bandwidth_bytes(&self) -> f64 {
        self.hbm_bandwidth_tbps * 1e12
    }

    /// External bandwidth of a single pseudo-channel in bytes/s.
    pub fn channel_external_bw_bytes(&self) -> f64 {
        self.hbm_bandwidth_bytes() / self.pim_channels_per_gpu() as f64
    }

    /// NVLink bandwidth per direction in bytes/s.
    pub fn nvlink_bw_bytes(&self) -> f64 {
        self.nvlink_bw_gbps_per_dir * 1e9
    }

    pub fn nvlink_latency_s(&self) -> f64 {
        self.nvlink_latency_us * 1e-6
    }

    /// Peak GPU fp16 throughput in FLOP/s.
    pub fn gpu_peak_flops(&self) -> f64 {
        self.gpu_fp16_tflops * 1e12
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive_real = [
            ("gpu_fp16_tflops", self.gpu_fp16_tflops),
            ("hbm_bandwidth_tbps", self.hbm_bandwidth_tbps),
            ("hbm_capacity_gb", self.hbm_capacity_gb),
            ("nvlink_bw_gbps_per_dir", self.nvlink_bw_gbps_per_dir),
            ("pin_rate_gbps", self.pin_rate_gbps),
            (
                "pim_compute_density_ops_per_byte",
                self.pim_compute_density_ops_per_byte,
            ),
            ("gemm_efficiency", self.gemm_efficiency),
        ];
        for (name, v) in positive_real {
            if !(v > 0.0) {
                return Err(ConfigError::Invariant(format!(
                    "{name} must be strictly positive (got {v})"
                )));
            }
        }
        if self.nvlink_latency_us < 0.0 || self.sched_overhead_us < 0.0 {
            return Err(ConfigError::Invariant(
                "latencies must be non-negative".into(),
            ));
        }
        let positive_count = [
            ("hbm_pim_stacks", self.hbm_pim_stacks),
            ("pseudo_channels_per_stack", self.pseudo_channels_per_stack),
            ("banks_per_pseudo_channel", self.banks_per_pseudo_channel),
            ("page_size_bytes", self.page_size_bytes),
            ("num_gpus", self.num_gpus),
        ];
        for (name, v) in positive_count {
            if v == 0 {
                return Err(ConfigError::Invariant(format!(
                    "{name} must be strictly positive"
                )));
            }
        }
        self.dram_timing.validate()
    }

    /// Serializes back to the flat config format; `load` of the result is
    /// field-for-field equal.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let t = &self.dram_timing;
        let _ = write!(
            s,
            "hardware.gpu_fp16_tflops = {}\n\
             hardware.hbm_bandwidth_tbps = {}\n\
             hardware.hbm_pim_stacks = {}\n\
             hardware.hbm_capacity_gb = {}\n\
             hardware.nvlink_bw_gbps_per_dir = {}\n\
             hardware.nvlink_latency_us = {}\n\
             hardware.pseudo_channels_per_stack = {}\n\
             hardware.banks_per_pseudo_channel = {}\n\
             hardware.page_size_bytes = {}\n\
             hardware.pin_rate_gbps = {}\n\
             hardware.pim_compute_density_ops_per_byte = {}\n\
             hardware.gemm_efficiency = {}\n\
             hardware.sched_overhead_us = {}\n\
             hardware.num_gpus = {}\n\
             timing.tck_ns = {}\n\
             timing.trcd = {}\n\
             timing.trp = {}\n\
             timing.tras = {}\n\
             timing.trc = {}\n\
             timing.tcl = {}\n\
             timing.twr = {}\n\
             timing.tccd_s = {}\n\
             timing.tccd_l = {}\n\
             timing.trrd_s = {}\n\
             timing.trrd_l = {}\n\
             timing.tfaw = {}\n\
             timing.trefi_ns = {}\n\
             timing.trfc_ns = {}\n",
            self.gpu_fp16_tflops,
            self.hbm_bandwidth_tbps,
            self.hbm_pim_stacks,
            self.hbm_capacity_gb,
            self.nvlink_bw_gbps_per_dir,
            self.nvlink_latency_us,
            self.pseudo_channels_per_stack,
            self.banks_per_pseudo_channel,
            self.page_size_bytes,
            self.pin_rate_gbps,
            self.pim_compute_density_ops_per_byte,
            self.gemm_efficiency,
            self.sched_overhead_us,
            self.num_gpus,
            t.tck_ns,
            t.trcd,
            t.trp,
            t.tras,
            t.trc,
            t.tcl,
            t.twr,
            t.tccd_s,
            t.tccd_l,
            t.trrd_s,
            t.trrd_l,
            t.tfaw,
            t.trefi_ns,
            t.trfc_ns,
        );
        s
    }
}

/// Attention/KV parameters used for PIM attention time and the always-on
/// compute share.
#[derive(Debug, Clone, PartialEq)]
pub struct KvConfig {
    pub heads: u32,
    pub head_dim: u32,
    /// KV bytes appended per token per layer.
    pub bytes_per_token: u64,
    /// Context length of decode requests (tokens of KV streamed per step).
    pub context_len: u64,
}

/// MoE model descriptor. Expert ids `0..num_experts` are routed; shared
/// experts, when present, occupy ids `num_experts..num_experts+num_shared`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Number of MoE layers simulated.
    pub num_layers: u32,
    /// Routed experts per layer.
    pub num_experts: u32,
    /// Routed experts activated per token.
    pub top_k: u32,
    /// Shared experts; each receives every token.
    pub num_shared_experts: u32,
    pub d_model: u32,
    pub d_ff: u32,
    /// FFN weight matrices per expert (3 for gate/up/down).
    pub ffn_matrices_per_expert: u32,
    pub bytes_per_param: u32,
    /// Total always-on parameter bytes across all layers (attention
    /// projections, router); shared-expert bytes are accounted separately.
    pub non_moe_param_bytes: u64,
    /// Tokens contributed by one colocated prefill request.
    pub prefill_chunk_tokens: u32,
    pub kv: KvConfig,
    /// Expert-parallel degree; must equal the hardware GPU count.
    pub ep_degree: u32,
}

impl ModelConfig {
    /// Parameter bytes of a single expert.
    pub fn expert_param_bytes(&self) -> u64 {
        self.ffn_matrices_per_expert as u64
            * self.d_model as u64
            * self.d_ff as u64
            * self.bytes_per_param as u64
    }

    /// FLOPs to run one token through one expert.
    pub fn expert_flops_per_token(&self) -> f64 {
        2.0 * self.ffn_matrices_per_expert as f64 * self.d_model as f64 * self.d_ff as f64
    }

    /// Always-on (non-MoE) parameter bytes for a single layer.
    pub fn non_moe_param_bytes_per_layer(&self) -> f64 {
        self.non_moe_param_bytes as f64 / self.num_layers as f64
    }

    /// Per-token FLOPs of the always-on GPU work in one layer (QKV/O
    /// projections and router; decode attention itself runs on PIM).
    pub fn non_moe_flops_per_token_layer(&self) -> f64 {
        let params_per_layer =
            self.non_moe_param_bytes_per_layer() / self.bytes_per_param as f64;
        2.0 * params_per_layer
    }

    /// Routed experts hosted on each GPU.
    pub fn experts_per_gpu(&self) -> u32 {
        self.num_experts / self.ep_degree
    }

    /// Total expert ids including shared experts.
    pub fn total_expert_ids(&self) -> u32 {
        self.num_experts + self.num_shared_experts
    }

    /// Whether `expert` is a shared expert id.
    pub fn is_shared_expert(&self, expert: u32) -> bool {
        expert >= self.num_experts && expert < self.total_expert_ids()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.top_k < 1 || self.top_k > self.num_experts {
            return Err(ConfigError::Invariant(format!(
                "top_k must satisfy 1 <= top_k <= num_experts (top_k={}, num_experts={})",
                self.top_k, self.num_experts
            )));
        }
        if self.ep_degree == 0 || self.num_experts % self.ep_degree != 0 {
            return Err(ConfigError::Invariant(format!(
                "num_experts not divisible by ep_degree ({} % {})",
                self.num_experts, self.ep_degree
            )));
        }
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("ffn_matrices_per_expert", self.ffn_matrices_per_expert),
            ("bytes_per_param", self.bytes_per_param),
            ("prefill_chunk_tokens", self.prefill_chunk_tokens),
        ] {
            if v == 0 {
                return Err(ConfigError::Invariant(format!(
                    "{name} must be strictly positive"
                )));
            }
        }
        if self.expert_param_bytes() == 0 {
            return Err(ConfigError::Invariant(
                "expert parameter bytes must be positive".into(),
            ));
        }
        if self.kv.context_len == 0 {
            return Err(ConfigError::Invariant(
                "kv.context_len must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "model.name = {}\n\
             model.num_layers = {}\n\
             model.num_experts = {}\n\
             model.top_k = {}\n\
             model.num_shared_experts = {}\n\
             model.d_model = {}\n\
             model.d_ff = {}\n\
             model.ffn_matrices_per_expert = {}\n\
             model.bytes_per_param = {}\n\
             model.non_moe_param_bytes = {}\n\
             model.prefill_chunk_tokens = {}\n\
             model.kv.heads = {}\n\
             model.kv.head_dim = {}\n\
             model.kv.bytes_per_token = {}\n\
             model.kv.context_len = {}\n\
             model.ep_degree = {}\n",
            self.name,
            self.num_layers,
            self.num_experts,
            self.top_k,
            self.num_shared_experts,
            self.d_model,
            self.d_ff,
            self.ffn_matrices_per_expert,
            self.bytes_per_param,
            self.non_moe_param_bytes,
            self.prefill_chunk_tokens,
            self.kv.heads,
            self.kv.head_dim,
            self.kv.bytes_per_token,
            self.kv.context_len,
            self.ep_degree,
        );
        s
    }
}

/// Parsed `key = value` pairs with consumption tracking so unconsumed keys
/// can be reported as unknown.
#[derive(Debug)]
struct KvFile {
    path: String,
    // key -> (line, value, consumed)
    entries: BTreeMap<String, (usize, String, bool)>,
}

impl KvFile {
    fn parse(path: &Path, text: &str) -> Result<Self, ConfigError> {
        let path_s = path.display().to_string();
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                path: path_s.clone(),
                line: line_no,
                text: raw.trim().to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Malformed {
                    path: path_s.clone(),
                    line: line_no,
                    text: raw.trim().to_string(),
                });
            }
            if entries.contains_key(&key) {
                return Err(ConfigError::DuplicateKey {
                    path: path_s.clone(),
                    line: line_no,
                    key,
                });
            }
            entries.insert(key, (line_no, value, false));
        }
        Ok(KvFile {
            path: path_s,
            entries,
        })
    }

    fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(path, &text)
    }

    fn take(&mut self, key: &str) -> Result<String, ConfigError> {
        match self.entries.get_mut(key) {
            Some((_, value, consumed)) => {
                *consumed = true;
                Ok(value.clone())
            }
            None => Err(ConfigError::MissingKey {
                path: self.path.clone(),
                key: key.to_string(),
            }),
        }
    }

    fn take_or(&mut self, key: &str, default: &str) -> String {
        match self.entries.get_mut(key) {
            Some((_, value, consumed)) => {
                *consumed = true;
                value.clone()
            }
            None => default.to_string(),
        }
    }

    fn parse_value<T: std::str::FromStr>(
        &self,
        key: &str,
        value: &str,
        ty: &'static str,
    ) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError::BadValue {
            path: self.path.clone(),
            key: key.to_string(),
            value: value.to_string(),
            ty,
        })
    }

    fn real(&mut self, key: &str) -> Result<f64, ConfigError> {
        let v = self.take(key)?;
        self.parse_value(key, &v, "real")
    }

    fn real_or(&mut self, key: &str, default: &str) -> Result<f64, ConfigError> {
        let v = self.take_or(key, default);
        self.parse_value(key, &v, "real")
    }

    fn int<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        let v = self.take(key)?;
        self.parse_value(key, &v, "integer")
    }

    fn finish(&mut self) -> Result<(), ConfigError> {
        for (key, (line, _, consumed)) in std::mem::take(&mut self.entries) {
            if !consumed {
                return Err(ConfigError::UnknownKey {
                    path: self.path.clone(),
                    line,
                    key,
                });
            }
        }
        Ok(())
    }
}

/// Loads and validates a hardware config (`hardware.*` and `timing.*` keys).
pub fn load_hardware_config(path: impl AsRef<Path>) -> Result<HardwareConfig, ConfigError> {
    let mut kv = KvFile::load(path.as_ref())?;
    hardware_from_kv(&mut kv)
}

/// Same as [`load_hardware_config`] but from an in-memory string.
pub fn parse_hardware_config(text: &str) -> Result<HardwareConfig, ConfigError> {
    let mut kv = KvFile::parse(Path::new("<memory>"), text)?;
    hardware_from_kv(&mut kv)
}

fn hardware_from_kv(kv: &mut KvFile) -> Result<HardwareConfig, ConfigError> {
    let hw = HardwareConfig {
        gpu_fp16_tflops: kv.real("hardware.gpu_fp16_tflops")?,
        hbm_bandwidth_tbps: kv.real("hardware.hbm_bandwidth_tbps")?,
        hbm_pim_stacks: kv.int("hardware.hbm_pim_stacks")?,
        hbm_capacity_gb: kv.real("hardware.hbm_capacity_gb")?,
        nvlink_bw_gbps_per_dir: kv.real("hardware.nvlink_bw_gbps_per_dir")?,
        nvlink_latency_us: kv.real("hardware.nvlink_latency_us")?,
        pseudo_channels_per_stack: kv.int("hardware.pseudo_channels_per_stack")?,
        banks_per_pseudo_channel: kv.int("hardware.banks_per_pseudo_channel")?,
        page_size_bytes: kv.int("hardware.page_size_bytes")?,
        pin_rate_gbps: kv.real("hardware.pin_rate_gbps")?,
        pim_compute_density_ops_per_byte: kv.real("hardware.pim_compute_density_ops_per_byte")?,
        gemm_efficiency: kv.real_or("hardware.gemm_efficiency", "1.0")?,
        sched_overhead_us: kv.real_or("hardware.sched_overhead_us", "2.0")?,
        num_gpus: kv.int("hardware.num_gpus")?,
        dram_timing: DramTiming {
            tck_ns: kv.real("timing.tck_ns")?,
            trcd: kv.int("timing.trcd")?,
            trp: kv.int("timing.trp")?,
            tras: kv.int("timing.tras")?,
            trc: kv.int("timing.trc")?,
            tcl: kv.int("timing.tcl")?,
            twr: kv.int("timing.twr")?,
            tccd_s: kv.int("timing.tccd_s")?,
            tccd_l: kv.int("timing.tccd_l")?,
            trrd_s: kv.int("timing.trrd_s")?,
            trrd_l: kv.int("timing.trrd_l")?,
            tfaw: kv.int("timing.tfaw")?,
            trefi_ns: kv.real("timing.trefi_ns")?,
            trfc_ns: kv.real("timing.trfc_ns")?,
        },
    };
    kv.finish()?;
    hw.validate()?;
    Ok(hw)
}

/// Loads and validates a model config (`model.*` keys).
pub fn load_model_config(path: impl AsRef<Path>) -> Result<ModelConfig, ConfigError> {
    let mut kv = KvFile::load(path.as_ref())?;
    model_from_kv(&mut kv)
}

/// Same as [`load_model_config`] but from an in-memory string.
pub fn parse_model_config(text: &str) -> Result<ModelConfig, ConfigError> {
    let mut kv = KvFile::parse(Path::new("<memory>"), text)?;
    model_from_kv(&mut kv)
}

fn model_from_kv(kv: &mut KvFile) -> Result<ModelConfig, ConfigError> {
    let model = ModelConfig {
        name: kv.take("model.name")?,
        num_layers: kv.int("model.num_layers")?,
        num_experts: kv.int("model.num_experts")?,
        top_k: kv.int("model.top_k")?,
        num_shared_experts: kv.int("model.num_shared_experts")?,
        d_model: kv.int("model.d_model")?,
        d_ff: kv.int("model.d_ff")?,
        ffn_matrices_per_expert: kv.int("model.ffn_matrices_per_expert")?,
        bytes_per_param: kv.int("model.bytes_per_param")?,
        non_moe_param_bytes: kv.int("model.non_moe_param_bytes")?,
        prefill_chunk_tokens: kv.int("model.prefill_chunk_tokens")?,
        kv: KvConfig {
            heads: kv.int("model.kv.heads")?,
            head_dim: kv.int("model.kv.head_dim")?,
            bytes_per_token: kv.int("model.kv.bytes_per_token")?,
            context_len: kv.int("model.kv.context_len")?,
        },
        ep_degree: kv.int("model.ep_degree")?,
    };
    kv.finish()?;
    model.validate()?;
    Ok(model)
}

/// Contiguous half-open range of routed expert ids hosted on `gpu_id`.
/// Ranges over all GPUs partition `[0, num_experts)`.
pub fn per_gpu_expert_range(model: &ModelConfig, gpu_id: u32) -> Result<Range<u32>, ConfigError> {
    if gpu_id >= model.ep_degree {
        return Err(ConfigError::Invariant(format!(
            "gpu_id {} out of range (ep_degree {})",
            gpu_id, model.ep_degree
        )));
    }
    let per = model.experts_per_gpu();
    Ok(gpu_id * per..(gpu_id + 1) * per)
}

/// GPU hosting a routed expert id.
pub fn host_gpu(model: &ModelConfig, expert: u32) -> u32 {
    debug_assert!(expert < model.num_experts);
    expert / model.experts_per_gpu()
}
