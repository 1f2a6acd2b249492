//! Every strategy's measured pass counts match the closed-form expectation.

use attrib_ens::cost::{verify_ledger, CostLedger, LedgerScope};
use attrib_ens::data::{gen_synthetic_classification, gen_synthetic_sequences, Dataset, SequenceGenerator};
use attrib_ens::ensembles::{run_ensemble, train_members, EnsembleConfig, Strategy};
use attrib_ens::model::{build_mlp, build_tiny_transformer, ModelSpec};
use attrib_ens::tda::Method;
use attrib_ens::training::{TrainConfig, TrainedMember};

const METHODS: [Method; 4] = [Method::Trak, Method::InfluenceCg, Method::GradDot, Method::GradCos];

fn check(spec: &ModelSpec, members: &[TrainedMember], train: &Dataset, test: &Dataset, cfg: &EnsembleConfig) {
    let mut ledger = CostLedger::new();
    run_ensemble(spec, members, train, test, cfg, &mut ledger).unwrap();
    let scope = LedgerScope {
        n_train: train.len() as u64,
        n_test: test.len() as u64,
        finetune_subset: (cfg.lora.fine_tune.subset_fraction * train.len() as f64).floor() as u64,
    };
    let report = verify_ledger(cfg, scope, &ledger).unwrap();
    assert!(report.passed(), "{:?} {:?}\n{report}", cfg.strategy, cfg.method);
}

fn config(strategy: Strategy, method: Method) -> EnsembleConfig {
    let mut c = EnsembleConfig::new(strategy, method);
    c.members = 2;
    c.masks = 3;
    c.seed = 4;
    c.trak.proj_dim = 16;
    c.influence.max_iters = 20;
    c
}

#[test]
fn mlp_strategies() {
    let spec = build_mlp(5, &[12], 3, 0.2).unwrap();
    let train = gen_synthetic_classification(40, 5, 3, 2.0, 0.05, 1).unwrap();
    let test = gen_synthetic_classification(6, 5, 3, 2.0, 0.05, 2).unwrap();
    let mut tc = TrainConfig::sgd_default(4, 3);
    tc.batch_size = 10;
    tc.checkpoint_epochs = vec![2, 4];
    let members = train_members(&spec, &train, &tc, 2, &mut CostLedger::new()).unwrap();

    for method in METHODS {
        for strategy in [Strategy::Naive, Strategy::Dropout, Strategy::Checkpoints] {
            let mut c = config(strategy, method);
            if strategy == Strategy::Checkpoints {
                c.checkpoint_epochs = vec![2, 4];
            }
            check(&spec, &members, &train, &test, &c);
        }
    }
    check(&spec, &members, &train, &test, &config(Strategy::DropoutForwardOnly, Method::Trak));
}

#[test]
fn lora_strategy() {
    let spec = build_tiny_transformer(8, 4, 8, 2, 1, 16, 0.1).unwrap();
    let gen = SequenceGenerator::Markov { order: 1, seed: 5 };
    let all = gen_synthetic_sequences(30, 8, 4, gen, 6).unwrap();
    let train = all.prefix(24).unwrap();
    let test = all.subset(&(24..30).collect::<Vec<_>>()).unwrap();
    let mut tc = TrainConfig::sgd_default(2, 7);
    tc.batch_size = 8;
    let members = train_members(&spec, &train, &tc, 2, &mut CostLedger::new()).unwrap();
    for method in METHODS {
        let mut c = config(Strategy::Lora, method);
        c.adapters = 2;
        c.lora.rank = 2;
        c.lora.fine_tune.epochs = 2;
        c.lora.fine_tune.batch_size = 8;
        check(&spec, &members, &train, &test, &c);
    }
}
