// scratch: policy dynamics probe over the preset configs
use sievesim::config::{load_hardware_config, load_model_config};
use sievesim::engine::{simulate_run, SimOptions, WorkloadSource, WorkloadSpec};
use sievesim::sched::PolicyKind;
use sievesim::workload::calibration;

fn main() {
    let hw = load_hardware_config("configs/b200.cfg").unwrap();
    let model = load_model_config("configs/gpt-oss-120b.cfg").unwrap();
    let opts = SimOptions::default();
    let policies = [PolicyKind::Sieve, PolicyKind::NoExp, PolicyKind::AllExp, PolicyKind::Pimoe];
    println!("gpt-oss-like x b200x4, skew {}", calibration::GPT_OSS_LIKE_SKEW);
    println!("{:>4} {:>12} {:>12} {:>12} {:>12}   (mean iter latency us; tput/gpu in parens)", "B", "sieve", "noexp", "allexp", "pimoe");
    for b in [1u64, 8, 32, 64, 128, 256] {
        let spec = WorkloadSpec {
            source: WorkloadSource::Synthetic { skew: calibration::GPT_OSS_LIKE_SKEW, seed: 17 },
            batch: b,
            prefill_requests: 0,
            iterations: 8,
            warmup: 3,
        };
        print!("{b:>4}");
        for p in policies {
            let r = simulate_run(&spec, p, &model, &hw, &opts).unwrap();
            let lat = r.steady_mean_latency;
            let tput = b as f64 / lat / hw.num_gpus as f64;
            print!(" {:>7.1}({:>8.0})", lat * 1e6, tput);
        }
        println!();
    }
}
