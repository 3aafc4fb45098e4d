mod common;

use proptest::prelude::*;

use otafl::bound::max_dissimilarity;
use otafl::data::{gen_synthetic, Partition, SyntheticSpec};
use otafl::fl_protocol::{
    AlphaUMode, GlobalSchedule, JammerPolicy, LambdaSchedule, ProtocolConfig, ServerRescale,
    Trainer,
};
use otafl::model::{Algorithm, LocalHyper, ModelParams};

use common::{random_clients, rng};

fn protocol(algorithm: Algorithm, rounds: usize, seed: u64) -> ProtocolConfig {
    ProtocolConfig {
        schedule: GlobalSchedule { algorithm, rounds, lambda: LambdaSchedule::default() },
        hyper: LocalHyper {
            lr: 0.05,
            momentum: 0.5,
            local_epochs: 1,
            batch_size: 8,
            mu: if algorithm == Algorithm::FedAvg { 0.0 } else { 0.1 },
            tau: 0.5,
        },
        sigma_c: 0.2,
        alpha_u_mode: AlphaUMode::Dynamic,
        server_rescale: ServerRescale::TauOnly,
        jammer: JammerPolicy::Forced { alpha_cj: 0.05 },
        delta: 1e-5,
        seed,
    }
}

fn trainer(algorithm: Algorithm, rounds: usize, seed: u64) -> Trainer {
    let mut r = rng(seed);
    let clients = random_clients(&mut r, 4, 5, 3, 20.0);
    let init = ModelParams::init(&[(5, 4), (4, 3)], seed).unwrap();
    Trainer::new(protocol(algorithm, rounds, seed), clients, init).unwrap()
}

#[test]
fn transmission_counts() {
    for (alg, iters) in [(Algorithm::FedAvg, 7), (Algorithm::FedProx, 7), (Algorithm::Upcycled, 14)] {
        let mut t = trainer(alg, 7, 1);
        for it in 1..=iters {
            let rep = t.run_round(it).unwrap();
            assert_eq!(rep.transmitted, alg != Algorithm::Upcycled || it % 2 == 1);
        }
        assert!(t.is_finished());
        assert_eq!(t.draws_consumed(), 7, "{alg:?}");
        assert_eq!(t.ledger().rounds_counted(), 7);
        assert!(t.run_round(iters + 1).is_err());
    }
}

#[test]
fn rounds_must_run_in_order() {
    let mut t = trainer(Algorithm::FedAvg, 3, 2);
    assert!(t.run_round(2).is_err());
    t.run_round(1).unwrap();
    assert!(t.run_round(1).is_err());
}

#[test]
fn average_power_within_cap() {
    let mut t = trainer(Algorithm::Upcycled, 10, 3);
    let cap = t.clients().iter().map(|c| c.power_cap).fold(0.0, f64::max);
    for it in 1..=20 {
        let rep = t.run_round(it).unwrap();
        assert!(rep.avg_tx_power <= cap);
        assert!(rep.max_power_ratio <= 1.0 + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Even iterations never touch the ledger, so the ledger after `2M`
    /// Upcycled iterations equals one built from the `M` odd ones alone.
    #[test]
    fn even_iterations_leave_ledger_untouched(seed in any::<u64>(), rounds in 1usize..8) {
        let mut t = trainer(Algorithm::Upcycled, rounds, seed);
        let mut rebuilt = otafl::privacy::PrivacyLedger::new(1e-5, t.ledger().data_size(), 4).unwrap();
        for it in 1..=2 * rounds {
            let before = t.ledger().clone();
            let rep = t.run_round(it).unwrap();
            if rep.transmitted {
                rebuilt.record_round(otafl::privacy::EffectiveNoise { sigma_sq: rep.sigma_sq }, &rep.slack).unwrap();
            } else {
                prop_assert_eq!(&before, t.ledger());
            }
        }
        prop_assert_eq!(&rebuilt, t.ledger());
    }
}

#[test]
fn label_shard_is_more_heterogeneous_than_iid() {
    let kappa = |mode| {
        let total: f64 = (1..=5)
            .map(|seed| {
                let spec = SyntheticSpec {
                    clients: 10,
                    n_range: (80, 120),
                    feat_dim: 16,
                    classes: 10,
                    mode,
                    shards_per_client: 5,
                };
                let clients = gen_synthetic(&spec, seed).unwrap();
                let w = ModelParams::init(&[(16, 8), (8, 10)], seed).unwrap();
                max_dissimilarity(&w, &clients).unwrap()
            })
            .sum();
        total / 5.0
    };
    let (shard, iid) = (kappa(Partition::LabelShard), kappa(Partition::Iid));
    assert!(shard > iid, "label_shard {shard} vs iid {iid}");
}
