//! Expert-placement policies behind one interface: the greedy dynamic
//! partitioner plus the three static baselines.
//!
//! All policies are pure functions over an immutable [`SchedContext`] and a
//! frozen cost-table snapshot; per-GPU scheduling calls may run
//! concurrently. Tie-breaking is fixed (descending token count, then
//! ascending expert id) so identical inputs give identical partitions.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::config::{HardwareConfig, ModelConfig};
use crate::timing::{
    self, ExpertLoad, NonMoeLoad, PimCostTable, PimGemvBreakdown, TimingEstimate,
};

/// Scheduling policy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PolicyKind {
    Sieve,
    NoExp,
    AllExp,
    Pimoe,
}

pub const POLICY_NAMES: [&str; 4] = ["sieve", "noexp", "allexp", "pimoe"];

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Sieve => "sieve",
            PolicyKind::NoExp => "noexp",
            PolicyKind::AllExp => "allexp",
            PolicyKind::Pimoe => "pimoe",
        }
    }

    /// How PIM channels execute the experts assigned to PIM.
    pub fn channel_model(&self) -> ChannelModel {
        match self {
            PolicyKind::Pimoe => ChannelModel::ExpertParallel,
            _ => ChannelModel::TensorParallel,
        }
    }

    /// Whether the policy makes a runtime decision (and therefore pays the
    /// configured scheduling overhead on the critical path).
    pub fn is_dynamic(&self) -> bool {
        matches!(self, PolicyKind::Sieve | PolicyKind::Pimoe)
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sieve" => Ok(PolicyKind::Sieve),
            "noexp" => Ok(PolicyKind::NoExp),
            "allexp" => Ok(PolicyKind::AllExp),
            "pimoe" => Ok(PolicyKind::Pimoe),
            other => Err(format!(
                "unknown policy `{other}`; valid policies: {}",
                POLICY_NAMES.join(", ")
            )),
        }
    }
}

/// How experts placed on PIM use the pseudo-channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelModel {
    /// Every GEMV is sharded across all channels.
    TensorParallel,
    /// Each expert owns a dedicated slice of channels.
    ExpertParallel,
}

/// The (S, G) split of the activated experts on one GPU together with its
/// estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub pim_set: BTreeSet<u32>,
    pub gpu_set: BTreeSet<u32>,
    pub estimate: TimingEstimate,
}

/// Frozen per-GPU inputs for one scheduling decision: the activated experts
/// hosted here (global token counts, post-AllGather) plus the
/// partition-independent cost terms.
#[derive(Debug, Clone)]
pub struct SchedContext<'a> {
    pub model: &'a ModelConfig,
    pub hw: &'a HardwareConfig,
    /// Activated experts in scheduling order: descending tokens, then
    /// ascending id. Shared experts carry their local token count.
    pub experts: Vec<ExpertLoad>,
    /// All-to-all dispatch + combine time for this GPU's resident tokens.
    pub t_comm: f64,
    /// PIM attention time for this GPU's resident decode tokens.
    pub attention_s: f64,
    /// Always-on GPU load for this layer.
    pub non_moe: NonMoeLoad,
}

impl<'a> SchedContext<'a> {
    pub fn new(
        loads: impl IntoIterator<Item = ExpertLoad>,
        model: &'a ModelConfig,
        hw: &'a HardwareConfig,
        t_comm: f64,
        attention_s: f64,
        non_moe: NonMoeLoad,
    ) -> Self {
        let mut experts: Vec<ExpertLoad> = loads.into_iter().collect();
        experts.sort_by(|a, b| b.tokens.cmp(&a.tokens).then(a.expert.cmp(&b.expert)));
        SchedContext {
            model,
            hw,
            experts,
            t_comm,
            attention_s,
            non_moe,
        }
    }

    fn gpu_order(&self, set: &BTreeSet<u32>) -> Vec<ExpertLoad> {
        self.experts
            .iter()
            .filter(|l| set.contains(&l.expert))
            .copied()
            .collect()
    }
}

/// Composes the component estimators for a candidate partition.
/// `t_gpu = max(t_offchip, t_comp)` and `t_total = max(t_comm, t_gpu,
/// t_pim)` hold exactly.
pub fn evaluate_partition(
    s: &BTreeSet<u32>,
    g: &BTreeSet<u32>,
    ctx: &SchedContext,
    table: &PimCostTable,
) -> TimingEstimate {
    debug_assert!(s.is_disjoint(g), "S and G overlap");
    debug_assert_eq!(
        s.len() + g.len(),
        ctx.experts.len(),
        "S and G must partition the activated set"
    );
    let g_loads = ctx.gpu_order(g);
    let s_loads = ctx.gpu_order(s);
    let (t_offchip, t_comp, t_gpu) = timing::t_gpu(&g_loads, &ctx.non_moe, ctx.model, ctx.hw);
    let t_pim = timing::t_pim(&s_loads, ctx.attention_s, ctx.model, ctx.hw, table);
    TimingEstimate {
        t_comm: ctx.t_comm,
        t_offchip,
        t_comp,
        t_gpu,
        t_pim,
        t_total: ctx.t_comm.max(t_gpu).max(t_pim),
    }
}

/// Objective value of the sorted-prefix partition G = experts[..k],
/// S = experts[k..], with the per-expert terms hoisted by the caller.
/// Accumulation order matches [`evaluate_partition`] bit for bit.
struct PrefixEvaluator<'a> {
    ctx: &'a SchedContext<'a>,
    pim_times: Vec<f64>,
    gpu_byte_terms: Vec<f64>,
    gpu_flop_terms: Vec<f64>,
}

impl<'a> PrefixEvaluator<'a> {
    fn new(ctx: &'a SchedContext, table: &PimCostTable) -> Self {
        let model = ctx.model;
        let expert_bytes = model.expert_param_bytes() as f64;
        let act_bytes_per_token =
            (2 * model.d_model + model.d_ff) as f64 * model.bytes_per_param as f64;
        let flops_per_token = model.expert_flops_per_token();
        let pim_times = ctx
            .experts
            .iter()
            .map(|l| timing::pim_expert_time(l.tokens, table, model, ctx.hw))
            .collect();
        let gpu_byte_terms = ctx
            .experts
            .iter()
            .map(|l| expert_bytes + l.tokens as f64 * act_bytes_per_token)
            .collect();
        let gpu_flop_terms = ctx
            .experts
            .iter()
            .map(|l| l.tokens as f64 * flops_per_token)
            .collect();
        PrefixEvaluator {
            ctx,
            pim_times,
            gpu_byte_terms,
            gpu_flop_terms,
        }
    }

    /// t_total for the prefix split at k, with the GPU accumulators carried
    /// in by the caller (running left-to-right sums including non-MoE).
    fn total_at(&self, k: usize, gpu_bytes: f64, gpu_flops: f64) -> f64 {
        let hw = self.ctx.hw;
        let t_offchip = gpu_bytes / hw.hbm_bandwidth_bytes();
        let t_comp = gpu_flops / (hw.gpu_peak_flops() * hw.gemm_efficiency);
        let t_gpu = t_offchip.max(t_comp);
        let mut t_pim = self.ctx.attention_s;
        for &t in &self.pim_times[k..] {
            t_pim += t;
        }
        self.ctx.t_comm.max(t_gpu).max(t_pim)
    }
}

/// Greedy dynamic partitioner. Starts with every activated expert on PIM
/// and walks the scheduling order, moving the next most-popular expert to
/// the GPU while that strictly lowers the bottleneck; stops at the first
/// non-improving move.
pub fn sieve_partition(ctx: &SchedContext, table: &PimCostTable) -> Partition {
    let ev = PrefixEvaluator::new(ctx, table);
    let mut gpu_bytes = ctx.non_moe.param_bytes + ctx.non_moe.activation_bytes;
    let mut gpu_flops = ctx.non_moe.flops;
    let mut current = ev.total_at(0, gpu_bytes, gpu_flops);
    let mut split = 0usize;
    while split < ctx.experts.len() {
        let next_bytes = gpu_bytes + ev.gpu_byte_terms[split];
        let next_flops = gpu_flops + ev.gpu_flop_terms[split];
        let next = ev.total_at(split + 1, next_bytes, next_flops);
        if next < current {
            split += 1;
            gpu_bytes = next_bytes;
            gpu_flops = next_flops;
            current = next;
        } else {
            break;
        }
    }
    partition_at_split(ctx, table, split)
}

fn partition_at_split(ctx: &SchedContext, table: &PimCostTable, split: usize) -> Partition {
    let gpu_set: BTreeSet<u32> = ctx.experts[..split].iter().map(|l| l.expert).collect();
    let pim_set: BTreeSet<u32> = ctx.experts[split..].iter().map(|l| l.expert).collect();
    let estimate = evaluate_partition(&pim_set, &gpu_set, ctx, table);
    Partition {
        pim_set,
        gpu_set,
        estimate,
    }
}

/// Attention-only offload: every expert executes on the GPU.
pub fn noexp_partition(ctx: &SchedContext, table: &PimCostTable) -> Partition {
    partition_at_split(ctx, table, ctx.experts.len())
}

/// Every expert executes on PIM.
pub fn allexp_partition(ctx: &SchedContext, table: &PimCostTable) -> Partition {
    partition_at_split(ctx, table, 0)
}

/// Dedicated channel slices for the expert-parallel PIM model: experts in
/// ascending-id order take groups round-robin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelGroups {
    pub num_groups: usize,
    pub group_size: u32,
}

pub fn channel_groups(num_hosted: usize, hw: &HardwareConfig) -> ChannelGroups {
    let channels = hw.pim_channels_per_gpu();
    let num_groups = (channels as usize).min(num_hosted.max(1));
    ChannelGroups {
        num_groups,
        group_size: channels / num_groups as u32,
    }
}

/// Round-robin group assignment over the activated experts in ascending-id
/// order. The same map drives both the pimoe decision loop and the engine's
/// expert-parallel PIM execution.
pub fn ep_group_map(
    activated_ids_ascending: &[u32],
    hw: &HardwareConfig,
) -> (ChannelGroups, std::collections::BTreeMap<u32, usize>) {
    let groups = channel_groups(activated_ids_ascending.len(), hw);
    let map = activated_ids_ascending
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, i % groups.num_groups))
        .collect();
    (groups, map)
}

/// Serialized-GEMV breakdown of one token through one expert when the
/// expert is sharded over `channels` channels only.
pub fn ep_token_breakdown(
    model: &ModelConfig,
    hw: &HardwareConfig,
    channels: u32,
) -> PimGemvBreakdown {
    let mut total = PimGemvBreakdown {
        input_write: 0.0,
        array: 0.0,
        readback: 0.0,
    };
    for shape in timing::expert_gemv_shapes(model) {
        let b = timing::pim_gemv_breakdown(&shape, hw, channels);
        total.input_write += b.input_write;
        total.array += b.array;
        total.readback += b.readback;
    }
    total
}

/// Static threshold baseline. All experts start on PIM under the
/// expert-parallel channel model; the most popular expert on the busiest
/// channel group moves to the GPU while the experts-only GPU time of the
/// move stays below the experts-only PIM time. Attention and interconnect
/// terms are deliberately ignored inside the loop; the stored estimate uses
/// the full objective so policies stay comparable.
pub fn pimoe_partition(ctx: &SchedContext, table: &PimCostTable) -> Partition {
    let mut by_id: Vec<ExpertLoad> = ctx.experts.clone();
    by_id.sort_by_key(|l| l.expert);
    let ids: Vec<u32> = by_id.iter().map(|l| l.expert).collect();
    let (groups, group_of) = ep_group_map(&ids, ctx.hw);
    let token_time = match PolicyKind::Pimoe.channel_model() {
        ChannelModel::ExpertParallel => {
            ep_token_breakdown(ctx.model, ctx.hw, groups.group_size).total()
        }
        ChannelModel::TensorParallel => timing::pim_expert_token_time(ctx.model, ctx.hw),
    };

    let mut group_load = vec![0.0f64; groups.num_groups];
    let mut on_pim: Vec<ExpertLoad> = by_id.clone();
    for l in &on_pim {
        group_load[group_of[&l.expert]] += l.tokens as f64 * token_time;
    }

    let expert_bytes = ctx.model.expert_param_bytes() as f64;
    let flops_per_token = ctx.model.expert_flops_per_token();
    let mut gpu_param_bytes = 0.0f64;
    let mut gpu_flops = 0.0f64;
    let mut gpu_set: BTreeSet<u32> = BTreeSet::new();

    loop {
        if on_pim.is_empty() {
            break;
        }
        // busiest group, ties to the lowest group index
        let busiest = group_load
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let t_pim_only = group_load[busiest];
        // most popular expert on that group, ties to the lowest id
        let victim_pos = on_pim
            .iter()
            .enumerate()
            .filter(|(_, l)| group_of[&l.expert] == busiest)
            .max_by(|a, b| a.1.tokens.cmp(&b.1.tokens).then(b.1.expert.cmp(&a.1.expert)))
            .map(|(i, _)| i)
            .unwrap();
        let victim = on_pim[victim_pos];

        let moved_bytes = gpu_param_bytes + expert_bytes;
        let moved_flops = gpu_flops + victim.tokens as f64 * flops_per_token;
        let t_gpu_only = (moved_bytes / ctx.hw.hbm_bandwidth_bytes())
            .max(moved_flops / (ctx.hw.gpu_peak_flops() * ctx.hw.gemm_efficiency));
        if t_pim_only <= t_gpu_only {
            break;
        }
        on_pim.remove(victim_pos);
        group_load[group_of[&victim.expert]] -= victim.tokens as f64 * token_time;
        gpu_param_bytes = moved_bytes;
        gpu_flops = moved_flops;
        gpu_set.insert(victim.expert);
    }

    let pim_set: BTreeSet<u32> = on_pim.iter().map(|l| l.expert).collect();
    let estimate = evaluate_partition(&pim_set, &gpu_set, ctx, table);
    Partition {
        pim_set,
        gpu_set,
        estimate,
    }
}

/// Runs the selected policy.
pub fn run_policy(kind: PolicyKind, ctx: &SchedContext, table: &PimCostTable) -> Partition {
    match kind {
        PolicyKind::Sieve => sieve_partition(ctx, table),
        PolicyKind::NoExp => noexp_partition(ctx, table),
        PolicyKind::AllExp => allexp_partition(ctx, table),
        PolicyKind::Pimoe => pimoe_partition(ctx, table),
    }
}
