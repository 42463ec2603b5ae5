use std::sync::OnceLock;

use proptest::prelude::*;
use swv::dataio::synth::two_moons;
use swv::dataio::{Dataset, Split};
use swv::device::DeviceSpec;
use swv::nngraph::{train_sgd, Evaluator, LossKind, Network, TrainConfig};
use swv::sensitivity::{magnitude_metric, random_order};
use swv::stats::ks_test;
use swv::strategy::{random_order_seed, run_strategy, DriverConfig, InSituConfig, Mapper, Strategy, Termination};
use swv::writeverify::WriteVerifyConfig;

fn fixture() -> &'static (Network, Dataset) {
    static F: OnceLock<(Network, Dataset)> = OnceLock::new();
    F.get_or_init(|| {
        let data = two_moons(300, 0.1, 21, Split::Train).unwrap();
        let mut net = Network::mlp(&[3, 10, 2], LossKind::SoftmaxCrossEntropy, 4, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 25,
            ..TrainConfig::default()
        };
        train_sgd(&mut net, &data.batch().unwrap(), &cfg).unwrap();
        (net, data)
    })
}

fn driver(strategy: Strategy, granularity: f64, seed: u64) -> DriverConfig {
    DriverConfig {
        granularity,
        delta_a: None,
        strategy,
        device: DeviceSpec::r4(0.1),
        write_verify: WriteVerifyConfig::default(),
        insitu: InSituConfig::default(),
        run_seed: seed,
    }
}

#[test]
fn random_order_positions_are_uniform() {
    // Position of one fixed weight across many run seeds.
    let n = 57;
    let pos: Vec<f64> = (0..2000u64)
        .map(|s| {
            let order = random_order(n, random_order_seed(s)).order;
            (order.iter().position(|&i| i == 7).unwrap() as f64 + 0.5) / n as f64
        })
        .collect();
    let (_, p) = ks_test(&pos, |x| x.clamp(0.0, 1.0)).unwrap();
    assert!(p > 0.001, "KS p = {p}");
}

#[test]
fn trajectory_is_reproducible_and_seed_sensitive() {
    let (net, data) = fixture();
    for s in [Strategy::Uswim, Strategy::Swim, Strategy::Magnitude, Strategy::Random, Strategy::InSitu] {
        let a = run_strategy(net, &driver(s, 0.1, 3), data, Some(data), 64).unwrap();
        let b = run_strategy(net, &driver(s, 0.1, 3), data, Some(data), 64).unwrap();
        assert_eq!(a, b, "{s}");
        let c = run_strategy(net, &driver(s, 0.1, 4), data, Some(data), 64).unwrap();
        assert_ne!(a.records, c.records, "{s}");
    }
}

#[test]
fn insitu_costs_one_cycle_per_weight_per_iteration() {
    let (net, data) = fixture();
    let t = run_strategy(net, &driver(Strategy::InSitu, 0.1, 1), data, None, 64).unwrap();
    let n = net.param_count() as u64;
    assert_eq!(t.termination, Termination::Exhausted);
    for r in &t.records {
        assert_eq!(r.cycles, r.batch as u64 * n);
    }
}

#[test]
fn budgets_stop_at_last_fitting_batch() {
    let (net, data) = fixture();
    let ev = Evaluator::new(net, &data.inputs, &data.labels).unwrap();
    let m = Mapper::new(net, DeviceSpec::r4(0.1), WriteVerifyConfig::default(), 0.05, None, Some(&ev)).unwrap();
    let order = magnitude_metric(m.network()).order;
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let pts = m.run_budgeted(&order, &grid, 9).unwrap();
    let full = Mapper::new(net, DeviceSpec::r4(0.1), WriteVerifyConfig::default(), 0.05, Some(&ev), Some(&ev))
        .unwrap()
        .run_selective(&order, None, 9, "Magnitude", 0)
        .unwrap();
    for p in &pts {
        let expect = full
            .records
            .iter()
            .rfind(|r| r.cycles as f64 <= p.budget * m.denominator())
            .unwrap();
        assert_eq!(p.cycles, expect.cycles);
        assert_eq!(p.verified, expect.verified);
        assert_eq!(Some(p.accuracy), expect.acc_eval);
        assert!(p.nwc <= p.budget);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batches_follow_rank_intervals(p in 0.01f64..1.0, seed in 0u64..1000, which in 0usize..4) {
        let (net, data) = fixture();
        let strategy = [Strategy::Uswim, Strategy::Swim, Strategy::Magnitude, Strategy::Random][which];
        let t = run_strategy(net, &driver(strategy, p, seed), data, None, 64).unwrap();
        let n = net.param_count();
        let step = (p * n as f64).ceil() as usize;
        prop_assert_eq!(t.records.len(), n.div_ceil(step) + 1);
        for (b, r) in t.records.iter().enumerate() {
            prop_assert_eq!(r.batch, b);
            prop_assert_eq!(r.verified, (b * step).min(n));
        }
        for w in t.records.windows(2) {
            prop_assert!(w[1].verified > w[0].verified);
            prop_assert!(w[1].cycles >= w[0].cycles + (w[1].verified - w[0].verified) as u64);
        }
    }
}
