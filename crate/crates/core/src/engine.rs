//! Discrete-event executor of the per-layer dependency graph across GPUs,
//! overlapping interconnect, GPU, and PIM work while preserving the
//! cross-device ordering, and iterating layers and iterations into
//! end-to-end latencies.
//!
//! One simulation run is single-threaded and deterministic. Independent
//! runs (sweep points) may execute concurrently with no shared state.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::{HardwareConfig, ModelConfig};
use crate::sched::{self, ChannelModel, Partition, PolicyKind};
use crate::timing::{self, ExpertLoad, NonMoeLoad, PimCostTable};
use crate::workload::{
    self, ExpertDistribution, RoutingRecord,
};

/// Fixed charge of the grouped-GEMM metadata preparation step.
const METADATA_SECONDS: f64 = 0.5e-6;
/// Bytes of routing metadata exchanged per token-expert assignment in the
/// AllGather step (expert id plus gate weight).
const METADATA_BYTES_PER_ASSIGNMENT: f64 = 8.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("model ep_degree {ep} does not match hardware num_gpus {gpus}")]
    GpuCountMismatch { ep: u32, gpus: u32 },
    #[error("dependency cycle in layer graph")]
    Cycle,
    #[error("schedule validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Workload(#[from] workload::WorkloadError),
    #[error(transparent)]
    Timing(#[from] timing::TimingError),
}

/// Node kinds of the per-layer dependency graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeKind {
    Attention,
    Router,
    AllGather,
    Metadata,
    Dispatch,
    SieveSched,
    /// Shared-expert (and prefetchable) weight loading.
    WeightLoadShared,
    /// Routed G-set weight loading, gated on the scheduling decision.
    WeightLoadRouted,
    TokenToPim,
    GpuExperts,
    PimExperts,
    PimReadback,
    Combine,
}

/// Execution resources. GPU compute, the external HBM channel, and the PIM
/// arrays are exclusive per GPU; the interconnect is bandwidth-shared with
/// contention pre-folded into node durations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Resource {
    GpuCompute(u32),
    GpuHbm(u32),
    Pim(u32),
    Interconnect,
}

impl Resource {
    pub fn is_exclusive(&self) -> bool {
        !matches!(self, Resource::Interconnect)
    }

    pub fn label(&self) -> String {
        match self {
            Resource::GpuCompute(g) => format!("gpu_compute:{g}"),
            Resource::GpuHbm(g) => format!("gpu_hbm:{g}"),
            Resource::Pim(g) => format!("pim:{g}"),
            Resource::Interconnect => "interconnect".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagNode {
    pub kind: NodeKind,
    pub gpu: u32,
    pub duration: f64,
    pub resource: Resource,
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledNode {
    pub node: DagNode,
    pub start: f64,
    pub end: f64,
}

/// The scheduled graph of one MoE layer with per-resource busy time.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSchedule {
    pub nodes: Vec<ScheduledNode>,
    pub layer_latency: f64,
    pub busy: BTreeMap<Resource, f64>,
}

/// List scheduling by earliest-ready time with resource exclusivity and
/// deterministic tie-break by node index.
pub fn simulate_layer(nodes: &[DagNode]) -> Result<LayerSchedule, EngineError> {
    let n = nodes.len();
    let mut scheduled: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut resource_free: BTreeMap<Resource, f64> = BTreeMap::new();
    let mut done = 0usize;

    while done < n {
        // earliest start among ready nodes, ties to the lowest index
        let mut pick: Option<(f64, usize)> = None;
        for (i, node) in nodes.iter().enumerate() {
            if scheduled[i].is_some() {
                continue;
            }
            let mut ready = 0.0f64;
            let mut deps_done = true;
            for &d in &node.deps {
                match scheduled[d] {
                    Some((_, end)) => ready = ready.max(end),
                    None => {
                        deps_done = false;
                        break;
                    }
                }
            }
            if !deps_done {
                continue;
            }
            let est = if node.resource.is_exclusive() {
                ready.max(*resource_free.get(&node.resource).unwrap_or(&0.0))
            } else {
                ready
            };
            if pick.map_or(true, |(best, _)| est < best) {
                pick = Some((est, i));
            }
        }
        let (start, i) = pick.ok_or(EngineError::Cycle)?;
        let end = start + nodes[i].duration;
        scheduled[i] = Some((start, end));
        if nodes[i].resource.is_exclusive() {
            resource_free.insert(nodes[i].resource, end);
        }
        done += 1;
    }

    let mut out = Vec::with_capacity(n);
    let mut latency = 0.0f64;
    let mut busy: BTreeMap<Resource, f64> = BTreeMap::new();
    for (node, slot) in nodes.iter().zip(&scheduled) {
        let (start, end) = slot.unwrap();
        latency = latency.max(end);
        *busy.entry(node.resource).or_insert(0.0) += end - start;
        out.push(ScheduledNode {
            node: node.clone(),
            start,
            end,
        });
    }
    let schedule = LayerSchedule {
        nodes: out,
        layer_latency: latency,
        busy,
    };
    validate_schedule(&schedule)?;
    Ok(schedule)
}

/// Post-hoc scanner: dependency ordering, exclusive-resource overlaps, and
/// the aggregation barrier (no Combine before every GPU's expert-completion
/// nodes).
pub fn validate_schedule(s: &LayerSchedule) -> Result<(), EngineError> {
    for (i, sn) in s.nodes.iter().enumerate() {
        for &d in &sn.node.deps {
            if s.nodes[d].end > sn.start + 1e-15 {
                return Err(EngineError::Validation(format!(
                    "node {i} ({:?}) starts at {} before dep {d} ends at {}",
                    sn.node.kind, sn.start, s.nodes[d].end
                )));
            }
        }
        if sn.end > s.layer_latency + 1e-15 {
            return Err(EngineError::Validation(
                "node ends after layer latency".into(),
            ));
        }
    }
    for (i, a) in s.nodes.iter().enumerate() {
        if !a.node.resource.is_exclusive() {
            continue;
        }
        for b in s.nodes.iter().skip(i + 1) {
            if a.node.resource != b.node.resource {
                continue;
            }
            let overlap = a.end.min(b.end) - a.start.max(b.start);
            if overlap > 1e-15 {
                return Err(EngineError::Validation(format!(
                    "{:?} and {:?} overlap on {:?}",
                    a.node.kind,
                    b.node.kind,
                    a.node.resource
                )));
            }
        }
    }
    let expert_completion_end = s
        .nodes
        .iter()
        .filter(|n| matches!(n.node.kind, NodeKind::GpuExperts | NodeKind::PimReadback))
        .map(|n| n.end)
        .fold(0.0f64, f64::max);
    for n in &s.nodes {
        if n.node.kind == NodeKind::Combine && n.start + 1e-15 < expert_completion_end {
            return Err(EngineError::Validation(
                "Combine starts before expert completion on every GPU".into(),
            ));
        }
    }
    Ok(())
}

/// PIM execution profile of one GPU's S set for one layer.
#[derive(Debug, Clone)]
pub struct PimExec {
    pub input_write: f64,
    pub array: f64,
    pub readback: f64,
    /// Expert-execution busy seconds per channel.
    pub per_channel: Vec<f64>,
    /// (token count, observed full expert time) per executed expert.
    pub observations: Vec<(u64, f64)>,
}

fn pim_exec(
    s_loads: &[ExpertLoad],
    activated_ids_ascending: &[u32],
    channel_model: ChannelModel,
    model: &ModelConfig,
    hw: &HardwareConfig,
) -> PimExec {
    let channels = hw.pim_channels_per_gpu() as usize;
    match channel_model {
        ChannelModel::TensorParallel => {
            let per_token = sched::ep_token_breakdown(model, hw, hw.pim_channels_per_gpu());
            let mut input_write = 0.0;
            let mut array = 0.0;
            let mut readback = 0.0;
            let mut observations = Vec::with_capacity(s_loads.len());
            for l in s_loads {
                let n = l.tokens as f64;
                input_write += n * per_token.input_write;
                array += n * per_token.array;
                readback += n * per_token.readback;
                observations.push((l.tokens, n * per_token.total()));
            }
            let total = input_write + array + readback;
            PimExec {
                input_write,
                array,
                readback,
                per_channel: vec![total; channels],
                observations,
            }
        }
        ChannelModel::ExpertParallel => {
            let (groups, group_of) = sched::ep_group_map(activated_ids_ascending, hw);
            let per_token = sched::ep_token_breakdown(model, hw, groups.group_size);
            let mut g_input = vec![0.0f64; groups.num_groups];
            let mut g_array = vec![0.0f64; groups.num_groups];
            let mut g_read = vec![0.0f64; groups.num_groups];
            let mut observations = Vec::with_capacity(s_loads.len());
            for l in s_loads {
                let g = group_of[&l.expert];
                let n = l.tokens as f64;
                g_input[g] += n * per_token.input_write;
                g_array[g] += n * per_token.array;
                g_read[g] += n * per_token.readback;
                observations.push((l.tokens, n * per_token.total()));
            }
            let mut per_channel = vec![0.0f64; channels];
            for g in 0..groups.num_groups {
                let load = g_input[g] + g_array[g] + g_read[g];
                let base = g * groups.group_size as usize;
                for c in 0..groups.group_size as usize {
                    per_channel[base + c] = load;
                }
            }
            PimExec {
                input_write: g_input.iter().cloned().fold(0.0, f64::max),
                array: g_array.iter().cloned().fold(0.0, f64::max),
                readback: g_read.iter().cloned().fold(0.0, f64::max),
                per_channel,
                observations,
            }
        }
    }
}

/// Everything the DAG builder needs for one GPU in one layer.
pub struct GpuLayerInput {
    pub partition: Partition,
    /// Hosted activated experts with global token counts, scheduling order.
    pub experts: Vec<ExpertLoad>,
    /// Routing of the tokens resident on this GPU.
    pub local: ExpertDistribution,
    pub attention_s: f64,
    pub non_moe: NonMoeLoad,
}

/// Builds the per-layer dependency graph for all GPUs. Node layout is fixed
/// per GPU so indices are deterministic.
pub fn build_layer_dag(
    inputs: &[GpuLayerInput],
    policy: PolicyKind,
    model: &ModelConfig,
    hw: &HardwareConfig,
    shared_prefetch: bool,
) -> Result<(Vec<DagNode>, Vec<PimExec>), EngineError> {
    if inputs.len() != hw.num_gpus as usize {
        return Err(EngineError::GpuCountMismatch {
            ep: inputs.len() as u32,
            gpus: hw.num_gpus,
        });
    }
    let ngpus = inputs.len();
    const SLOTS: usize = 14;
    let slot = |g: usize, k: usize| g * SLOTS + k;
    const ATTENTION: usize = 0;
    const ATTENTION_BULK: usize = 1;
    const ROUTER: usize = 2;
    const ALLGATHER: usize = 3;
    const METADATA: usize = 4;
    const SIEVESCHED: usize = 5;
    const DISPATCH: usize = 6;
    const WL_SHARED: usize = 7;
    const WL_ROUTED: usize = 8;
    const TOKEN_TO_PIM: usize = 9;
    const GPU_EXPERTS: usize = 10;
    const PIM_EXPERTS: usize = 11;
    const PIM_READBACK: usize = 12;

    let global_tokens: u64 = inputs.iter().map(|i| i.local.total_tokens()).sum();
    let expert_bytes = model.expert_param_bytes() as f64;
    let act_bytes_per_token =
        (2 * model.d_model + model.d_ff) as f64 * model.bytes_per_param as f64;
    let out_bytes_per_token = model.d_model as f64 * model.bytes_per_param as f64;
    let flops_per_token = model.expert_flops_per_token();

    let mut nodes = Vec::with_capacity(ngpus * SLOTS);
    let mut execs = Vec::with_capacity(ngpus);
    for (g, input) in inputs.iter().enumerate() {
        let gpu = g as u32;
        let part = &input.partition;

        let s_loads: Vec<ExpertLoad> = input
            .experts
            .iter()
            .filter(|l| part.pim_set.contains(&l.expert))
            .copied()
            .collect();
        let g_loads: Vec<ExpertLoad> = input
            .experts
            .iter()
            .filter(|l| part.gpu_set.contains(&l.expert))
            .copied()
            .collect();
        let activated_ids: Vec<u32> = {
            let mut ids: Vec<u32> = input.experts.iter().map(|l| l.expert).collect();
            ids.sort_unstable();
            ids
        };
        let exec = pim_exec(&s_loads, &activated_ids, policy.channel_model(), model, hw);

        let shared_g_bytes: f64 = g_loads
            .iter()
            .filter(|l| model.is_shared_expert(l.expert))
            .map(|_| expert_bytes)
            .sum();
        let routed_g_bytes: f64 = g_loads
            .iter()
            .filter(|l| !model.is_shared_expert(l.expert))
            .map(|_| expert_bytes)
            .sum();
        let g_flops: f64 = g_loads
            .iter()
            .map(|l| l.tokens as f64 * flops_per_token)
            .sum();
        let g_act_bytes: f64 = g_loads
            .iter()
            .map(|l| l.tokens as f64 * act_bytes_per_token)
            .sum();
        let reorder_bytes: f64 = g_loads
            .iter()
            .map(|l| l.tokens as f64 * out_bytes_per_token)
            .sum();

        let dispatch_bytes = timing::remote_assignment_bytes(&input.local, model, gpu);
        let allgather_bytes = (global_tokens - input.local.total_tokens()) as f64
            * model.top_k as f64
            * METADATA_BYTES_PER_ASSIGNMENT;

        let hbm_bw = hw.hbm_bandwidth_bytes();
        let peak = hw.gpu_peak_flops() * hw.gemm_efficiency;
        let router_duration =
            (input.non_moe.param_bytes / hbm_bw).max(input.non_moe.flops / peak);
        // the decision step is a fixed runtime pipeline stage, charged to
        // every policy alike
        let sched_duration = hw.sched_overhead_us * 1e-6;

        let shared_wl_dep = if shared_prefetch {
            slot(g, METADATA)
        } else {
            slot(g, SIEVESCHED)
        };

        // Two attention nodes model the mini-batch interleaving shared by
        // all policies: a zero-length anchor feeding the router chain, and
        // the bulk KV streaming that occupies the PIM arrays concurrently
        // with this batch's expert phase. PIM experts still queue behind it
        // on the pim resource.
        nodes.push(DagNode {
            kind: NodeKind::Attention,
            gpu,
            duration: 0.0,
            resource: Resource::Pim(gpu),
            deps: vec![],
        });
        nodes.push(DagNode {
            kind: NodeKind::Attention,
            gpu,
            duration: input.attention_s,
            resource: Resource::Pim(gpu),
            deps: vec![],
        });
        nodes.push(DagNode {
            kind: NodeKind::Router,
            gpu,
            duration: router_duration,
            resource: Resource::GpuCompute(gpu),
            deps: vec![slot(g, ATTENTION)],
        });
        nodes.push(DagNode {
            kind: NodeKind::AllGather,
            gpu,
            duration: timing::all_to_all_phase_time(allgather_bytes, hw, hw.num_gpus),
            resource: Resource::Interconnect,
            deps: (0..ngpus).map(|p| slot(p, ROUTER)).collect(),
        });
        nodes.push(DagNode {
            kind: NodeKind::Metadata,
            gpu,
            duration: METADATA_SECONDS,
            resource: Resource::GpuCompute(gpu),
            deps: vec![slot(g, ALLGATHER)],
        });
        nodes.push(DagNode {
            kind: NodeKind::SieveSched,
            gpu,
            duration: sched_duration,
            resource: Resource::GpuCompute(gpu),
            deps: vec![slot(g, METADATA)],
        });
        nodes.push(DagNode {
            kind: NodeKind::Dispatch,
            gpu,
            duration: timing::all_to_all_phase_time(dispatch_bytes, hw, hw.num_gpus),
            resource: Resource::Interconnect,
            deps: vec![slot(g, METADATA)],
        });
        nodes.push(DagNode {
            kind: NodeKind::WeightLoadShared,
            gpu,
            duration: shared_g_bytes / hbm_bw,
            resource: Resource::GpuHbm(gpu),
            deps: vec![shared_wl_dep],
        });
        nodes.push(DagNode {
            kind: NodeKind::WeightLoadRouted,
            gpu,
            duration: routed_g_bytes / hbm_bw,
            resource: Resource::GpuHbm(gpu),
            deps: vec![slot(g, SIEVESCHED)],
        });
        nodes.push(DagNode {
            kind: NodeKind::TokenToPim,
            gpu,
            duration: exec.input_write,
            resource: Resource::GpuHbm(gpu),
            deps: vec![slot(g, SIEVESCHED), slot(g, DISPATCH)],
        });
        nodes.push(DagNode {
            kind: NodeKind::GpuExperts,
            gpu,
            duration: (g_flops / peak).max(g_act_bytes / hbm_bw),
            resource: Resource::GpuCompute(gpu),
            deps: vec![slot(g, WL_SHARED), slot(g, WL_ROUTED), slot(g, DISPATCH)],
        });
        nodes.push(DagNode {
            kind: NodeKind::PimExperts,
            gpu,
            duration: exec.array,
            resource: Resource::Pim(gpu),
            deps: vec![slot(g, TOKEN_TO_PIM)],
        });
        nodes.push(DagNode {
            kind: NodeKind::PimReadback,
            gpu,
            duration: exec.readback,
            resource: Resource::GpuHbm(gpu),
            deps: vec![slot(g, PIM_EXPERTS)],
        });
        let mut combine_deps: Vec<usize> = (0..ngpus).map(|p| slot(p, GPU_EXPERTS)).collect();
        combine_deps.extend((0..ngpus).map(|p| slot(p, PIM_READBACK)));
        nodes.push(DagNode {
            kind: NodeKind::Combine,
            gpu,
            duration: timing::all_to_all_phase_time(dispatch_bytes, hw, hw.num_gpus)
                + reorder_bytes / hbm_bw,
            resource: Resource::Interconnect,
            deps: combine_deps,
        });

        execs.push(exec);
    }
    Ok((nodes, execs))
}

/// Workload source for a run.
#[derive(Debug, Clone)]
pub enum WorkloadSource {
    /// Power-law synthetic routing; iteration i draws with seed `seed + i`.
    Synthetic { skew: f64, seed: u64 },
    /// Pre-parsed trace records; iterations come from the trace itself.
    Trace { records: Vec<RoutingRecord> },
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub source: WorkloadSource,
    /// Decode tokens per iteration.
    pub batch: u64,
    /// Colocated prefill requests per iteration (0 = decode-only).
    pub prefill_requests: u32,
    /// Iterations to simulate (synthetic source only).
    pub iterations: u32,
    /// Leading iterations excluded from the steady-state mean.
    pub warmup: u32,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Start shared-expert weight loads right after Metadata instead of
    /// after the scheduling decision.
    pub shared_prefetch: bool,
    /// EMA weight of the cost table.
    pub cost_table_alpha: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            shared_prefetch: true,
            cost_table_alpha: 0.25,
        }
    }
}

/// Outcome of one simulated run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub policy: PolicyKind,
    pub batch_size: u64,
    pub prefill_requests: u32,
    pub num_gpus: u32,
    pub warmup: u32,
    pub per_iteration_latency: Vec<f64>,
    pub steady_mean_latency: f64,
    pub cost_tables: Vec<PimCostTable>,
    /// Expert-execution busy seconds per PIM channel, per GPU.
    pub channel_busy: Vec<Vec<f64>>,
    pub resource_busy: BTreeMap<String, f64>,
    pub total_time: f64,
}

/// Per-layer routing for every GPU.
struct LayerRouting {
    layer: u32,
    locals: Vec<ExpertDistribution>,
    global: ExpertDistribution,
}

fn synth_layer(
    model: &ModelConfig,
    spec: &WorkloadSpec,
    iteration: u32,
    layer: u32,
    num_gpus: u32,
) -> Result<LayerRouting, EngineError> {
    let prefill_tokens =
        spec.prefill_requests as u64 * model.prefill_chunk_tokens as u64;
    let (skew, seed) = match &spec.source {
        WorkloadSource::Synthetic { skew, seed } => (*skew, seed + iteration as u64),
        WorkloadSource::Trace { .. } => unreachable!("trace handled separately"),
    };
    let records = workload::synth_records(
        model,
        spec.batch,
        prefill_tokens,
        skew,
        seed,
        iteration as u64,
        layer,
    )?;
    let locals = workload::split_by_gpu(&records, model, num_gpus, layer);
    let global = workload::gather_global(&locals)?;
    Ok(LayerRouting {
        layer,
        locals,
        global,
    })
}

fn trace_iterations(
    records: &[RoutingRecord],
    model: &ModelConfig,
    num_gpus: u32,
) -> Result<Vec<Vec<LayerRouting>>, EngineError> {
    let mut by_iter: BTreeMap<u64, BTreeMap<u32, Vec<RoutingRecord>>> = BTreeMap::new();
    for r in records {
        by_iter
            .entry(r.iteration)
            .or_default()
            .entry(r.layer)
            .or_default()
            .push(r.clone());
    }
    let mut out = Vec::new();
    for (_, layers) in by_iter {
        let mut routing = Vec::new();
        for (layer, rs) in layers {
            let locals = workload::split_by_gpu(&rs, model, num_gpus, layer);
            let global = workload::gather_global(&locals)?;
            routing.push(LayerRouting {
                layer,
                locals,
                global,
            });
        }
        out.push(routing);
    }
    Ok(out)
}

fn prefill_attention_flops(local_prefill_tokens: u64, model: &ModelConfig) -> f64 {
    // self-attention over the chunk: each prefill token attends across its
    // chunk at the model's attention width
     4.0 * local_prefill_tokens as f64
        * model.prefill_chunk_tokens as f64
        * (model.kv.heads as u64 * model.kv.head_dim as u64) as f64
}

/// Simulates one MoE layer across all GPUs: schedules each GPU's partition
/// under the policy, builds and executes the dependency graph, and returns
/// the schedule plus per-GPU cost-table observations.
pub fn simulate_layer_step(
    routing_locals: &[ExpertDistribution],
    global: &ExpertDistribution,
    policy: PolicyKind,
    tables: &[PimCostTable],
    model: &ModelConfig,
    hw: &HardwareConfig,
    opts: &SimOptions,
) -> Result<(LayerSchedule, Vec<Vec<(u64, f64)>>, Vec<Vec<f64>>), EngineError> {
    let ngpus = hw.num_gpus as usize;
    let mut inputs = Vec::with_capacity(ngpus);
    for g in 0..ngpus {
        let gpu = g as u32;
        let local = &routing_locals[g];
        let local_tokens = local.total_tokens();
        let restricted = global.restrict_to_gpu(model, gpu, local_tokens);
        let loads: Vec<ExpertLoad> = restricted
            .counts
            .iter()
            .map(|(&expert, &tokens)| ExpertLoad { expert, tokens })
            .collect();
        let attention_s = timing::attention_pim_time(
            local.batch_size as f64
                * model.kv.context_len as f64
                * model.kv.bytes_per_token as f64,
            hw,
        );
        let non_moe = NonMoeLoad::for_tokens(
            local_tokens,
            prefill_attention_flops(local.prefill_tokens, model),
            model,
        );
        let t_comm = timing::t_comm(local, model, hw, gpu);
        let ctx = sched::SchedContext::new(
            loads,
            model,
            hw,
            t_comm,
            attention_s,
            non_moe.clone(),
        );
        let partition = sched::run_policy(policy, &ctx, &tables[g]);
        inputs.push(GpuLayerInput {
            partition,
            experts: ctx.experts,
            local: local.clone(),
            attention_s,
            non_moe,
        });
    }

    let (nodes, execs) = build_layer_dag(&inputs, policy, model, hw, opts.shared_prefetch)?;
    let schedule = simulate_layer(&nodes)?;
    let observations = execs.iter().map(|e| e.observations.clone()).collect();
    let channel_busy = execs.iter().map(|e| e.per_channel.clone()).collect();
    Ok((schedule, observations, channel_busy))
}

/// Simulates a full run: layers per iteration, cost-table update at each
/// iteration end, steady-state mean over the post-warmup iterations.
pub fn simulate_run(
    spec: &WorkloadSpec,
    policy: PolicyKind,
    model: &ModelConfig,
    hw: &HardwareConfig,
    opts: &SimOptions,
) -> Result<RunResult, EngineError> {
    if model.ep_degree != hw.num_gpus {
        return Err(EngineError::GpuCountMismatch {
            ep: model.ep_degree,
            gpus: hw.num_gpus,
        });
    }
    let ngpus = hw.num_gpus as usize;
    let channels = hw.pim_channels_per_gpu() as usize;
    let mut tables = vec![PimCostTable::new(opts.cost_table_alpha); ngpus];
    let mut channel_busy = vec![vec![0.0f64; channels]; ngpus];
    let mut resource_busy: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_iteration_latency = Vec::new();

    let trace_routing = match &spec.source {
        WorkloadSource::Trace { records } => Some(trace_iterations(records, model, hw.num_gpus)?),
        WorkloadSource::Synthetic { .. } => None,
    };
    let iterations = match &trace_routing {
        Some(t) => t.len() as u32,
        None => spec.iterations,
    };

    for it in 0..iterations {
        let routing: Vec<LayerRouting> = match &trace_routing {
            Some(t) => t[it as usize]
                .iter()
                .map(|r| LayerRouting {
                    layer: r.layer,
                    locals: r.locals.clone(),
                    global: r.global.clone(),
                })
                .collect(),
            None => (0..model.num_layers)
                .map(|layer| synth_layer(model, spec, it, layer, hw.num_gpus))
                .collect::<Result<_, _>>()?,
        };

        let mut iter_latency = 0.0f64;
        // token-count -> (sum, count) of observed expert times per GPU
        let mut obs: Vec<BTreeMap<u64, (f64, u64)>> = vec![BTreeMap::new(); ngpus];
        for layer_routing in &routing {
            let (schedule, layer_obs, layer_channels) = simulate_layer_step(
                &layer_routing.locals,
                &layer_routing.global,
                policy,
                &tables,
                model,
                hw,
                opts,
            )?;
            iter_latency += schedule.layer_latency;
            for (g, per_gpu) in layer_obs.iter().enumerate() {
                for &(tokens, time) in per_gpu {
                    let e = obs[g].entry(tokens).or_insert((0.0, 0));
                    e.0 += time;
                    e.1 += 1;
                }
            }
            for (g, per_gpu) in layer_channels.iter().enumerate() {
                for (c, t) in per_gpu.iter().enumerate() {
                    channel_busy[g][c] += t;
                }
            }
            for (res, t) in &schedule.busy {
                *resource_busy.entry(res.label()).or_insert(0.0) += t;
            }
        }
        for (g, per_gpu) in obs.iter().enumerate() {
            let means: BTreeMap<u64, f64> = per_gpu
                .iter()
                .map(|(&tokens, &(sum, count))| (tokens, sum / count as f64))
                .collect();
            if !means.is_empty() {
                tables[g].update(&means)?;
            }
        }
        per_iteration_latency.push(iter_latency);
    }

    let total_time: f64 = per_iteration_latency.iter().sum();
    let first = (spec.warmup as usize).min(per_iteration_latency.len().saturating_sub(1));
    let steady = &per_iteration_latency[first..];
    let steady_mean_latency = steady.iter().sum::<f64>() / steady.len().max(1) as f64;

    Ok(RunResult {
        policy,
        batch_size: spec.batch,
        prefill_requests: spec.prefill_requests,
        num_gpus: hw.num_gpus,
        warmup: spec.warmup,
        per_iteration_latency,
        steady_mean_latency,
        cost_tables: tables,
        channel_busy,
        resource_busy,
        total_time,
    })
}
