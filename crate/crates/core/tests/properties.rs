use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use racksim::rack::{run, Dispatch, Fault, RackSim, RunConfig, TimedFault};
use racksim::server::IntraPolicy;
use racksim::switch::{ReqTableConfig, SchedulingPolicy, TrackingConfig, TrackingKind};
use racksim::workload::{ClassSpec, ServiceDistribution, WorkloadSpec};

fn policy() -> impl Strategy<Value = SchedulingPolicy> {
    prop_oneof![
        Just(SchedulingPolicy::Random),
        Just(SchedulingPolicy::HashRandom),
        Just(SchedulingPolicy::RoundRobin),
        Just(SchedulingPolicy::Shortest),
        Just(SchedulingPolicy::Sampling { k: 2 }),
        Just(SchedulingPolicy::Jbsq { bound: 3 }),
    ]
}

fn tracking() -> impl Strategy<Value = TrackingKind> {
    prop_oneof![
        Just(TrackingKind::Int1),
        Just(TrackingKind::Int2),
        Just(TrackingKind::Int3),
        Just(TrackingKind::Proactive),
    ]
}

fn intra() -> impl Strategy<Value = IntraPolicy> {
    prop_oneof![
        Just(IntraPolicy::Cfcfs { preempt_threshold_us: None }),
        Just(IntraPolicy::Cfcfs { preempt_threshold_us: Some(100.0) }),
        Just(IntraPolicy::Ps { slice_us: 25.0 }),
    ]
}

#[allow(clippy::too_many_arguments)]
fn fuzz_config(
    policy: SchedulingPolicy,
    kind: TrackingKind,
    intra: IntraPolicy,
    packets: u32,
    slots: usize,
    load: f64,
    loss: f64,
    seed: u64,
) -> RunConfig {
    let mut class = ClassSpec::new(0, 1.0, ServiceDistribution::bimodal(0.9, 20.0, 200.0));
    class.packets = packets;
    let mut grouped = ClassSpec::new(1, 0.5, ServiceDistribution::exponential(30.0));
    grouped.group_size = 2;
    let mut cfg = RunConfig::new(
        4,
        2,
        WorkloadSpec { classes: vec![class, grouped], clients: 6, packet_gap_us: 1.0 },
        Dispatch::Switch(policy),
        intra,
    );
    cfg.tracking = TrackingConfig::new(kind);
    cfg.reqtable = ReqTableConfig { stages: 2, slots_per_stage: slots, ..ReqTableConfig::default() };
    cfg.initial_active[3] = false;
    cfg.load_fraction = load;
    cfg.network.reply_loss_prob = loss;
    cfg.requests = 4_000;
    cfg.seed = seed;
    cfg.faults = vec![
        TimedFault { at_us: 2_000.0, fault: Fault::AddServer { server: 3 } },
        TimedFault { at_us: 4_000.0, fault: Fault::RemoveServer { server: 1, planned: true } },
        TimedFault { at_us: 6_000.0, fault: Fault::SwitchFail { duration_us: 300.0 } },
        TimedFault { at_us: 8_000.0, fault: Fault::RemoveServer { server: 0, planned: false } },
        TimedFault { at_us: 9_000.0, fault: Fault::AddServer { server: 1 } },
    ];
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn packets_of_a_request_share_one_server(
        policy in policy(),
        kind in tracking(),
        intra in intra(),
        packets in 1u32..5,
        slots in prop_oneof![Just(4usize), Just(64), Just(4096)],
        load in 0.2f64..0.9,
        loss in prop_oneof![Just(0.0), Just(0.02)],
        seed in 0u64..1000,
    ) {
        let cfg = fuzz_config(policy, kind, intra, packets, slots, load, loss, seed);
        let mut sim = RackSim::new(cfg).unwrap();
        sim.enable_delivery_log();
        let m = sim.run_to_completion();
        let mut seen: BTreeMap<(u64, u32), BTreeSet<usize>> = BTreeMap::new();
        for d in sim.deliveries() {
            seen.entry((d.req_id.key(), d.member)).or_default().insert(d.server);
        }
        prop_assert!(seen.values().all(|s| s.len() == 1));
        prop_assert_eq!(m.affinity_violations, 0);
        prop_assert_eq!(m.injected_total, m.completed_total + m.lost_total + m.in_flight);
        prop_assert!(m.occupancy_after_recovery.iter().all(|&o| o == 0));
    }

    #[test]
    fn same_seed_same_trace(policy in policy(), kind in tracking(), seed in 0u64..1000) {
        let cfg = fuzz_config(policy, kind, IntraPolicy::Ps { slice_us: 25.0 }, 2, 64, 0.6, 0.01, seed);
        let a = run(cfg.clone()).unwrap();
        let b = run(cfg).unwrap();
        prop_assert_eq!(a.trace_fingerprint, b.trace_fingerprint);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn global_queue_matches_one_big_server() {
    let workload = WorkloadSpec::single(ServiceDistribution::exponential(50.0));
    let cfcfs = IntraPolicy::Cfcfs { preempt_threshold_us: None };
    let mut pooled = RunConfig::new(8, 8, workload.clone(), Dispatch::Global, cfcfs.clone());
    let mut single = RunConfig::new(1, 64, workload, Dispatch::Switch(SchedulingPolicy::RoundRobin), cfcfs);
    for cfg in [&mut pooled, &mut single] {
        cfg.load_fraction = 0.9;
        cfg.requests = 50_000;
    }
    let (a, b) = (run(pooled).unwrap(), run(single).unwrap());
    assert_eq!(a.latencies, b.latencies);
}

#[test]
fn sampling_all_servers_with_fresh_counts_is_shortest() {
    // With every server sampled and exact counters the two policies pick the
    // same minimum; only tie order may differ, so compare the tails.
    let base = |p| {
        let mut cfg = RunConfig::new(
            4,
            1,
            WorkloadSpec::single(ServiceDistribution::exponential(50.0)),
            Dispatch::Switch(p),
            IntraPolicy::Cfcfs { preempt_threshold_us: None },
        );
        cfg.tracking = TrackingConfig::new(TrackingKind::Proactive);
        cfg.load_fraction = 0.7;
        cfg.requests = 100_000;
        run(cfg).unwrap()
    };
    let a = base(SchedulingPolicy::Shortest).p99();
    let b = base(SchedulingPolicy::Sampling { k: 4 }).p99();
    assert!((a - b).abs() / a < 0.05, "{a} vs {b}");
}

#[test]
fn client_dispatch_improves_on_random() {
    let base = |d| {
        let mut cfg = RunConfig::new(
            8,
            8,
            WorkloadSpec::single(ServiceDistribution::bimodal(0.9, 50.0, 500.0)),
            d,
            IntraPolicy::Cfcfs { preempt_threshold_us: Some(250.0) },
        );
        cfg.load_fraction = 0.85;
        cfg.requests = 100_000;
        run(cfg).unwrap().p99()
    };
    let client = base(Dispatch::Client { k: 2, local_increment: true });
    let random = base(Dispatch::Switch(SchedulingPolicy::Random));
    assert!(client < random, "{client} vs {random}");
}
