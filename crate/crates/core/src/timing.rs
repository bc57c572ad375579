//! Component time estimators: interconnect all-to-all, GPU roofline for
//! grouped expert GEMM, the DRAM-timing-aware PIM GEMV model, and the
//! runtime EMA cost table.
//!
//! All estimators are pure functions returning seconds. The cost table is
//! mutated only between simulated iterations by a single owner; readers
//! during an iteration see a frozen snapshot.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::{host_gpu, HardwareConfig, ModelConfig};
use crate::workload::ExpertDistribution;

/// DRAM burst granularity per bank in bytes.
const BURST_BYTES: f64 = 32.0;

#[derive(Debug, Error)]
pub enum TimingError {
    #[error("non-positive observation for token count {0}")]
    NonPositiveObservation(u64),
}

/// One expert together with its assigned token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertLoad {
    pub expert: u32,
    pub tokens: u64,
}

/// The estimate triple for a candidate partition plus its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingEstimate {
    pub t_comm: f64,
    pub t_offchip: f64,
    pub t_comp: f64,
    pub t_gpu: f64,
    pub t_pim: f64,
    pub t_total: f64,
}

impl TimingEstimate {
    pub fn zero() -> Self {
        TimingEstimate {
            t_comm: 0.0,
            t_offchip: 0.0,
            t_comp: 0.0,
            t_gpu: 0.0,
            t_pim: 0.0,
            t_total: 0.0,
        }
    }
}

/// A single GEMV: input of `d_in` elements against a `d_in x d_out` weight
/// matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemvShape {
    pub d_in: u32,
    pub d_out: u32,
    pub bytes_per_param: u32,
}

impl GemvShape {
    pub fn weight_bytes(&self) -> f64 {
        self.d_in as f64 * self.d_out as f64 * self.bytes_per_param as f64
    }
}

/// The FFN weight shapes of one expert. `ffn_matrices_per_expert - 1`
/// up-projections followed by one down-projection.
pub fn expert_gemv_shapes(model: &ModelConfig) -> Vec<GemvShape> {
    let up = GemvShape {
        d_in: model.d_model,
        d_out: model.d_ff,
        bytes_per_param: model.bytes_per_param,
    };
    let down = GemvShape {
        d_in: model.d_ff,
        d_out: model.d_model,
        bytes_per_param: model.bytes_per_param,
    };
    let mats = model.ffn_matrices_per_expert;
    if mats == 1 {
        vec![up]
    } else {
        let mut shapes = vec![up; mats as usize - 1];
        shapes.push(down);
        shapes
    }
}

/// Sub-step breakdown of one GEMV on PIM. `input_write` and `array` carry
/// the refresh inflation; `readback` is a plain external transfer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PimGemvBreakdown {
    /// Broadcasting the input vector into every loaded channel's buffer.
    pub input_write: f64,
    /// Row activations plus burst-paced dot products inside the arrays.
    pub array: f64,
    /// Reading the output shard back over the external channel pins.
    pub readback: f64,
}

impl PimGemvBreakdown {
    pub fn total(&self) -> f64 {
        self.input_write + self.array + self.readback
    }
}

/// Analytic DRAM-timing model of one GEMV sharded over `channels` PIM
/// pseudo-channels (tensor parallelism along the output dimension).
///
/// Per loaded channel: the full input vector is written to the channel's
/// global buffer, the weight shard streams from the banks in 32 B bursts
/// paced by tCCD_L with one tRCD+tRP round per filled row buffer, and the
/// output shard returns over the channel's external pins. Banks within a
/// channel operate in parallel; channels are identical, so per-GPU time
/// equals per-channel time.
pub fn pim_gemv_breakdown(
    shape: &GemvShape,
    hw: &HardwareConfig,
    channels: u32,
) -> PimGemvBreakdown {
    let t = &hw.dram_timing;
    let tck = t.tck_ns * 1e-9;
    // Matrices narrower than the channel count leave channels idle.
    let loaded = channels.min(shape.d_out).max(1) as f64;
    let banks = hw.banks_per_pseudo_channel as f64;

    let bytes_per_channel = shape.weight_bytes() / loaded;
    let bytes_per_bank = bytes_per_channel / banks;
    let rows = (bytes_per_channel / (banks * hw.page_size_bytes as f64)).ceil();
    let bursts = (bytes_per_bank / BURST_BYTES).ceil();

    let ch_bw = hw.channel_external_bw_bytes();
    let input_write = shape.d_in as f64 * shape.bytes_per_param as f64 / ch_bw;
    let array = rows * (t.trcd + t.trp) as f64 * tck + bursts * t.tccd_l as f64 * tck;
    let readback =
        (shape.d_out as f64 / loaded) * shape.bytes_per_param as f64 / ch_bw;

    let inflation = t.refresh_inflation();
    PimGemvBreakdown {
        input_write: input_write * inflation,
        array: array * inflation,
        readback,
    }
}

/// Time of one GEMV sharded over every PIM channel of the GPU.
pub fn pim_gemv_time(shape: &GemvShape, hw: &HardwareConfig) -> f64 {
    pim_gemv_breakdown(shape, hw, hw.pim_channels_per_gpu()).total()
}

/// Aggregate internal streaming bandwidth of all PIM channels in bytes/s,
/// derived from burst pacing: channels x banks x 32 B per tCCD_L.
pub fn pim_internal_bandwidth(hw: &HardwareConfig) -> f64 {
    let t = &hw.dram_timing;
    hw.pim_channels_per_gpu() as f64 * hw.banks_per_pseudo_channel as f64 * BURST_BYTES
        / (t.tccd_l as f64 * t.tck_ns * 1e-9)
}

/// Roofline estimate of one GEMV on PIM: operation count over peak PIM
/// throughput (internal streaming bandwidth times compute density), with no
/// DRAM timing overheads.
pub fn pim_roofline_time(shape: &GemvShape, hw: &HardwareConfig) -> f64 {
    let ops = 2.0 * shape.d_in as f64 * shape.d_out as f64;
    ops / (pim_internal_bandwidth(hw) * hw.pim_compute_density_ops_per_byte)
}

/// Serialized-GEMV time of one token through one expert with full
/// tensor-parallel channel sharding.
pub fn pim_expert_token_time(model: &ModelConfig, hw: &HardwareConfig) -> f64 {
    expert_gemv_shapes(model)
        .iter()
        .map(|s| pim_gemv_time(s, hw))
        .sum()
}

/// PIM attention time: KV bytes streamed at internal bandwidth, inflated by
/// the refresh factor.
pub fn attention_pim_time(total_kv_bytes: f64, hw: &HardwareConfig) -> f64 {
    total_kv_bytes / pim_internal_bandwidth(hw) * hw.dram_timing.refresh_inflation()
}

/// Time of one all-to-all phase moving `bytes` per GPU: a hop into and out
/// of the switch plus the serialization time at per-direction bandwidth.
/// Zero when there are no peers.
pub fn all_to_all_phase_time(bytes: f64, hw: &HardwareConfig, num_gpus: u32) -> f64 {
    if num_gpus <= 1 {
        return 0.0;
    }
    bytes / hw.nvlink_bw_bytes() + 2.0 * hw.nvlink_latency_s()
}

/// Dispatch bytes leaving `home_gpu` for the routed assignments in `dist`
/// whose experts are hosted remotely. Shared experts are replicated and
/// never dispatched.
pub fn remote_assignment_bytes(
    dist: &ExpertDistribution,
    model: &ModelConfig,
    home_gpu: u32,
) -> f64 {
    let token_bytes = model.d_model as f64 * model.bytes_per_param as f64;
    dist.counts
        .iter()
        .filter(|(&e, _)| !model.is_shared_expert(e) && host_gpu(model, e) != home_gpu)
        .map(|(_, &n)| n as f64 * token_bytes)
        .sum()
}

/// Inter-GPU communication time for the dispatch and combine of the
/// assignments in `dist`, as seen from `home_gpu`. Independent of any
/// GPU/PIM partition.
pub fn t_comm(
    dist: &ExpertDistribution,
    model: &ModelConfig,
    hw: &HardwareConfig,
    home_gpu: u32,
) -> f64 {
    if model.ep_degree <= 1 {
        return 0.0;
    }
    let each_way = remote_assignment_bytes(dist, model, home_gpu);
    all_to_all_phase_time(each_way, hw, model.ep_degree)
        + all_to_all_phase_time(each_way, hw, model.ep_degree)
}

/// Always-on per-layer GPU work independent of the expert partition.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NonMoeLoad {
    /// Always-on parameter bytes loaded from HBM each layer.
    pub param_bytes: f64,
    /// Activation bytes read/written for the always-on projections.
    pub activation_bytes: f64,
    /// GPU FLOPs of QKV/O projections, router, and prefill attention.
    pub flops: f64,
}

impl NonMoeLoad {
    /// Always-on load for `local_tokens` resident tokens plus an optional
    /// prefill attention FLOP term.
    pub fn for_tokens(
        local_tokens: u64,
        prefill_attn_flops: f64,
        model: &ModelConfig,
    ) -> NonMoeLoad {
        let act = 2.0 * model.d_model as f64 * model.bytes_per_param as f64;
        NonMoeLoad {
            param_bytes: model.non_moe_param_bytes_per_layer(),
            activation_bytes: local_tokens as f64 * act,
            flops: local_tokens as f64 * model.non_moe_flops_per_token_layer()
                + prefill_attn_flops,
        }
    }
}

/// GPU-side estimate for the experts in `g`: off-chip time for parameters
/// and activations, grouped-GEMM compute time, and their max. Decode
/// attention is excluded (it runs on PIM).
pub fn t_gpu(
    g: &[ExpertLoad],
    non_moe: &NonMoeLoad,
    model: &ModelConfig,
    hw: &HardwareConfig,
) -> (f64, f64, f64) {
    let expert_bytes = model.expert_param_bytes() as f64;
    let act_bytes_per_token =
        (2 * model.d_model + model.d_ff) as f64 * model.bytes_per_param as f64;
    let flops_per_token = model.expert_flops_per_token();

    let mut bytes = non_moe.param_bytes + non_moe.activation_bytes;
    let mut flops = non_moe.flops;
    for load in g {
        bytes += expert_bytes + load.tokens as f64 * act_bytes_per_token;
        flops += load.tokens as f64 * flops_per_token;
    }
    let t_offchip = bytes / hw.hbm_bandwidth_bytes();
    let t_comp = flops / (hw.gpu_peak_flops() * hw.gemm_efficiency);
    (t_offchip, t_comp, t_offchip.max(t_comp))
}

/// Runtime cost table: token count to EMA-smoothed observed PIM expert time.
#[derive(Debug, Clone, PartialEq)]
pub struct PimCostTable {
    pub entries: BTreeMap<u64, f64>,
    pub alpha: f64,
}

impl Default for PimCostTable {
    fn default() -> Self {
        Self::new(0.25)
    }
}

impl PimCostTable {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        PimCostTable {
            entries: BTreeMap::new(),
            alpha,
        }
    }

    pub fn lookup(&self, tokens: u64) -> Option<f64> {
        self.entries.get(&tokens).copied()
    }

    /// Folds one iteration's observations in: existing keys move by the EMA
    /// weight, new keys adopt the observation directly.
    pub fn update(&mut self, observations: &BTreeMap<u64, f64>) -> Result<(), TimingError> {
        for (&tokens, &obs) in observations {
            if !(obs > 0.0) {
                return Err(TimingError::NonPositiveObservation(tokens));
            }
            self.entries
                .entry(tokens)
                .and_modify(|e| *e = (1.0 - self.alpha) * *e + self.alpha * obs)
                .or_insert(obs);
        }
        Ok(())
    }
}

/// PIM expert time for `tokens` assigned tokens: cost-table entry when one
/// exists, otherwise the serialized-GEMV fallback.
pub fn pim_expert_time(
    tokens: u64,
    table: &PimCostTable,
    model: &ModelConfig,
    hw: &HardwareConfig,
) -> f64 {
    match table.lookup(tokens) {
        Some(t) => t,
        None => tokens as f64 * pim_expert_token_time(model, hw),
    }
}

/// PIM-side estimate: attention plus the serialized expert times of `s`.
pub fn t_pim(
    s: &[ExpertLoad],
    attention_seconds: f64,
    model: &ModelConfig,
    hw: &HardwareConfig,
    table: &PimCostTable,
) -> f64 {
    let mut total = attention_seconds;
    for load in s {
        total += pim_expert_time(load.tokens, table, model, hw);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DramTiming, KvConfig};

    pub(crate) fn table1_hw(num_gpus: u32) -> HardwareConfig {
        HardwareConfig {
            gpu_fp16_tflops: 2250.0,
            hbm_bandwidth_tbps: 8.0,
            hbm_pim_stacks: 8,
            hbm_capacity_gb: 96.0,
            nvlink_bw_gbps_per_dir: 900.0,
            nvlink_latency_us: 0.8,
            pseudo_channels_per_stack: 32,
            banks_per_pseudo_channel: 24,
            page_size_bytes: 1024,
            pin_rate_gbps: 8.0,
            pim_compute_density_ops_per_byte: 1.0,
            gemm_efficiency: 1.0,
            sched_overhead_us: 2.0,
            dram_timing: DramTiming {
                tck_ns: 0.5,
                trcd: 28,
                trp: 28,
                tras: 68,
                trc: 96,
                tcl: 28,
                twr: 32,
                tccd_s: 2,
                tccd_l: 4,
                trrd_s: 6,
                trrd_l: 6,
                tfaw: 12,
                trefi_ns: 3900.0,
                trfc_ns: 400.0,
            },
            num_gpus,
        }
    }

    fn toy_model(num_experts: u32, top_k: u32, ep: u32) -> ModelConfig {
        ModelConfig {
            name: "toy".into(),
            num_layers: 1,
            num_experts,
            top_k,
            num_shared_experts: 0,
            d_model: 4096,
            d_ff: 14336,
            ffn_matrices_per_expert: 3,
            bytes_per_param: 2,
            non_moe_param_bytes: 1,
            prefill_chunk_tokens: 1,
            kv: KvConfig {
                heads: 1,
                head_dim: 1,
                bytes_per_token: 1,
                context_len: 1,
            },
            ep_degree: ep,
        }
    }

    fn dist_from(counts: &[(u32, u64)], batch: u64) -> ExpertDistribution {
        ExpertDistribution {
            layer: 0,
            counts: counts.iter().copied().collect(),
            batch_size: batch,
            prefill_tokens: 0,
        }
    }

    #[test]
    fn t_comm_single_gpu_is_zero() {
        let hw = table1_hw(1);
        let model = toy_model(8, 1, 1);
        let dist = dist_from(&[(0, 4), (3, 2)], 6);
        assert_eq!(t_comm(&dist, &model, &hw, 0), 0.0);
    }

    #[test]
    fn t_comm_matches_hand_arithmetic_for_one_remote_token() {
        // 1 token, top_k = 1, remote expert, 4096 x bf16 payload, 900 GB/s,
        // zero latency: 2 x 8192 B / 9.0e11 B/s.
        let mut hw = table1_hw(2);
        hw.nvlink_latency_us = 0.0;
        let model = toy_model(8, 1, 2);
        // expert 4 is hosted on gpu 1; the token lives on gpu 0
        let dist = dist_from(&[(4, 1)], 1);
        let got = t_comm(&dist, &model, &hw, 0);
        let want = 2.0 * 8192.0 / 9.0e11;
        assert!((got - want).abs() < 1e-18, "got {got:e}, want {want:e}");
    }

    #[test]
    fn t_comm_uniform_routing_matches_per_token_counter() {
        // Every token routes to every expert, so the remote fraction is
        // exactly (ep-1)/ep of assignments and an independent per-token
        // counter must agree with the estimator.
        let hw = table1_hw(4);
        let model = toy_model(16, 16, 4);
        let tokens = 12u64;
        let counts: Vec<(u32, u64)> = (0..16).map(|e| (e, tokens)).collect();
        let dist = dist_from(&counts, tokens);

        // brute-force oracle: walk token-expert pairs one at a time
        let mut oracle_bytes = 0.0;
        for _token in 0..tokens {
            for expert in 0..16u32 {
                if host_gpu(&model, expert) != 0 {
                    oracle_bytes += 4096.0 * 2.0;
                }
            }
        }
        let total_assignments = tokens as f64 * 16.0;
        assert_eq!(oracle_bytes, total_assignments * 0.75 * 8192.0);

        let got = t_comm(&dist, &model, &hw, 0);
        let want = 2.0 * (oracle_bytes / 9.0e11 + 2.0 * 0.8e-6);
        assert!((got - want).abs() / want < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn t_comm_guaranteed_invariant_under_partition() {
        // the estimator takes no partition at all; assert the estimates of
        // the same dist are bitwise equal when recomputed
        let hw = table1_hw(4);
        let model = toy_model(16, 2, 4);
        let dist = dist_from(&[(0, 3), (5, 1), (12, 2)], 6);
        let a = t_comm(&dist, &model, &hw, 0);
        let b = t_comm(&dist, &model, &hw, 0);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn t_gpu_empty_is_zero() {
        let hw = table1_hw(1);
        let model = toy_model(8, 1, 1);
        let (off, comp, total) = t_gpu(&[], &NonMoeLoad::default(), &model, &hw);
        assert_eq!((off, comp, total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn t_gpu_single_expert_hand_arithmetic() {
        // one expert, N = 1, 3 matrices of 4096 x 14336 bf16, 8 TB/s,
        // 2250 TFLOPS: t_offchip ~ 3*4096*14336*2 / 8e12, memory-bound.
        let hw = table1_hw(1);
        let model = toy_model(8, 1, 1);
        let g = [ExpertLoad {
            expert: 0,
            tokens: 1,
        }];
        let (off, comp, total) = t_gpu(&g, &NonMoeLoad::default(), &model, &hw);

        let param_bytes = 3.0 * 4096.0 * 14336.0 * 2.0;
        let act_bytes = (2.0 * 4096.0 + 14336.0) * 2.0;
        let want_off = (param_bytes + act_bytes) / 8e12;
        let want_comp = 2.0 * 3.0 * 4096.0 * 14336.0 / 2.25e15;
        assert!((off - want_off).abs() / want_off < 1e-12);
        assert!((off - 4.40e-5).abs() < 1e-7, "off {off:e}");
        assert!((comp - want_comp).abs() / want_comp < 1e-12);
        assert!((comp - 1.57e-7).abs() < 1e-9, "comp {comp:e}");
        assert_eq!(total, off, "memory-bound at N=1");
    }

    #[test]
    fn t_gpu_crossover_matches_analytic_ridge() {
        // solve t_comp(N) = t_offchip(N) analytically and check the model
        // flips from memory- to compute-bound at that N; the pure-parameter
        // ridge point for this hardware is ~281 ops/byte.
        let hw = table1_hw(1);
        let model = toy_model(8, 1, 1);
        let param_bytes = model.expert_param_bytes() as f64;
        let act_per_tok = (2 * model.d_model + model.d_ff) as f64 * 2.0;
        let flops_per_tok = model.expert_flops_per_token();
        // N* solves (P + N a)/BW = N f / F
        let n_star = param_bytes / (flops_per_tok * 8e12 / 2.25e15 - act_per_tok);

        let probe = |n: u64| {
            let g = [ExpertLoad {
                expert: 0,
                tokens: n,
            }];
            let (off, comp, _) = t_gpu(&g, &NonMoeLoad::default(), &model, &hw);
            comp > off
        };
        assert!(!probe(n_star.floor() as u64));
        assert!(probe(n_star.ceil() as u64));
        assert!(probe(10_000));

        // the crossover sits within a few percent of the hardware ridge
        // point (activation bytes push it slightly above)
        let ridge: f64 = 2.25e15 / 8e12;
        assert!((ridge - 281.25).abs() < 1e-9);
        assert!((n_star - ridge).abs() / ridge < 0.05, "n* = {n_star}");
    }

    #[test]
    fn pim_gemv_degenerate_closed_form() {
        // 1 channel, 1 bank, 1 row, 32 bursts, no refresh, free bus:
        // time = (tRCD + tRP) tck + 32 tCCD_L tck exactly.
        let mut hw = table1_hw(1);
        hw.hbm_pim_stacks = 1;
        hw.pseudo_channels_per_stack = 1;
        hw.banks_per_pseudo_channel = 1;
        hw.hbm_bandwidth_tbps = f64::INFINITY;
        hw.dram_timing.trfc_ns = 0.0;
        let shape = GemvShape {
            d_in: 16,
            d_out: 32,
            bytes_per_param: 2,
        }; // 1024 weight bytes = exactly one page
        let got = pim_gemv_time(&shape, &hw);
        let tck = 0.5e-9;
        let want = (28.0 + 28.0) * tck + 32.0 * 4.0 * tck;
        assert_eq!(got, want);
    }

    #[test]
    fn pim_gemv_expert_shape_lands_in_gap_band() {
        let hw = table1_hw(1);
        let shape = GemvShape {
            d_in: 4096,
            d_out: 14336,
            bytes_per_param: 2,
        };
        let ratio = pim_gemv_time(&shape, &hw) / pim_roofline_time(&shape, &hw);
        assert!(
            (1.8..=4.2).contains(&ratio),
            "gap ratio {ratio} outside band"
        );
    }

    #[test]
    fn pim_gemv_doubling_d_out_doubles_burst_dominated_time() {
        let hw = table1_hw(1);
        let base = GemvShape {
            d_in: 4096,
            d_out: 14336,
            bytes_per_param: 2,
        };
        let double = GemvShape {
            d_in: 4096,
            d_out: 28672,
            bytes_per_param: 2,
        };
        let t1 = pim_gemv_time(&base, &hw);
        let t2 = pim_gemv_time(&double, &hw);
        assert!(
            (t2 / (2.0 * t1) - 1.0).abs() < 0.10,
            "t2/2t1 = {}",
            t2 / (2.0 * t1)
        );
    }

    #[test]
    fn pim_gemv_refresh_strictly_inflates() {
        let hw = table1_hw(1);
        let mut no_refresh = hw.clone();
        no_refresh.dram_timing.trfc_ns = 0.0;
        let shape = GemvShape {
            d_in: 2880,
            d_out: 2880,
            bytes_per_param: 2,
        };
        assert!(pim_gemv_time(&shape, &no_refresh) < pim_gemv_time(&shape, &hw));
    }

    #[test]
    fn pim_gemv_narrow_output_uses_loaded_channel_share() {
        let hw = table1_hw(1); // 256 channels
        let narrow = GemvShape {
            d_in: 4096,
            d_out: 64,
            bytes_per_param: 2,
        };
        // 64 loaded channels each hold d_in x 1 columns of the matrix
        let b = pim_gemv_breakdown(&narrow, &hw, hw.pim_channels_per_gpu());
        assert!(b.total() > 0.0);
        let full = pim_gemv_breakdown(&narrow, &hw, 64);
        assert_eq!(b, full, "idle channels must not change the loaded share");
    }

    #[test]
    fn pim_internal_bandwidth_value() {
        let hw = table1_hw(1);
        // 256 channels x 24 banks x 32 B per 2 ns
        let want = 256.0 * 24.0 * 32.0 / 2e-9;
        assert_eq!(pim_internal_bandwidth(&hw), want);
    }

    #[test]
    fn t_pim_empty_is_zero() {
        let hw = table1_hw(1);
        let model = toy_model(8, 1, 1);
        let table = PimCostTable::default();
        assert_eq!(t_pim(&[], 0.0, &model, &hw, &table), 0.0);
    }

    #[test]
    fn t_pim_uses_table_entry_when_present() {
        let hw = table1_hw(1);
        let model = toy_model(8, 1, 1);
        let mut table = PimCostTable::default();
        table.entries.insert(3, 5.0e-5);
        let s = [ExpertLoad {
            expert: 0,
            tokens: 3,
        }];
        let got = t_pim(&s, 1.0e-5, &model, &hw, &table);
        assert!((got - 6.0e-5).abs() < 1e-18);
    }

    #[test]
    fn t_pim_fallback_composes_from_gemv_model() {
        let hw = table1_hw(1);
        let model = toy_model(8, 1, 1);
        let table = PimCostTable::default();
        let s = [
            ExpertLoad {
                expert: 0,
                tokens: 1,
            },
            ExpertLoad {
                expert: 1,
                tokens: 1,
            },
        ];
        let per_token: f64 = expert_gemv_shapes(&model)
            .iter()
            .map(|sh| pim_gemv_time(sh, &hw))
            .sum();
        let got = t_pim(&s, 0.0, &model, &hw, &table);
        assert!((got - 2.0 * per_token).abs() / got < 1e-12);
    }

    #[test]
    fn cost_table_first_observation_is_adopted() {
        let mut table = PimCostTable::new(0.25);
        table.update(&[(1u64, 4e-5)].into_iter().collect()).unwrap();
        assert_eq!(table.lookup(1), Some(4e-5));
    }

    #[test]
    fn cost_table_ema_arithmetic() {
        let mut table = PimCostTable::new(0.25);
        table.entries.insert(1, 4e-5);
        table.update(&[(1u64, 8e-5)].into_iter().collect()).unwrap();
        assert!((table.lookup(1).unwrap() - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn cost_table_converges_geometrically() {
        // after k updates with constant observation v:
        // |entry - v| = (1 - alpha)^k |initial - v|
        let alpha = 0.25;
        let v = 7e-5;
        let initial = 1e-5;
        let mut table = PimCostTable::new(alpha);
        table.entries.insert(2, initial);
        let obs: BTreeMap<u64, f64> = [(2u64, v)].into_iter().collect();
        for k in 1..=20 {
            table.update(&obs).unwrap();
            let want_gap = (1.0f64 - alpha).powi(k) * (initial - v).abs();
            let got_gap = (table.lookup(2).unwrap() - v).abs();
            assert!(
                (got_gap - want_gap).abs() < 1e-16,
                "k={k}: got {got_gap:e}, want {want_gap:e}"
            );
        }
    }

    #[test]
    fn cost_table_rejects_non_positive_observation() {
        let mut table = PimCostTable::default();
        let err = table.update(&[(1u64, 0.0)].into_iter().collect());
        assert!(err.is_err());
    }

    #[test]
    fn monotone_in_expert_set() {
        let hw = table1_hw(1);
        let model = toy_model(8, 2, 1);
        let table = PimCostTable::default();
        let loads: Vec<ExpertLoad> = (0..8)
            .map(|e| ExpertLoad {
                expert: e,
                tokens: (e as u64 % 3) + 1,
            })
            .collect();
        let mut prev_gpu = 0.0;
        let mut prev_pim = 0.0;
        for k in 0..=loads.len() {
            let (_, _, gpu) = t_gpu(&loads[..k], &NonMoeLoad::default(), &model, &hw);
            let pim = t_pim(&loads[..k], 0.0, &model, &hw, &table);
            assert!(gpu >= prev_gpu);
            assert!(pim >= prev_pim);
            prev_gpu = gpu;
            prev_pim = pim;
        }
    }
}
