use genie_core::contracts::{
    consume_message, Call, CodeStatus, Contracts, DonorReceipt, EnclaveKind, ModelStatus, SplitSpec,
};
use genie_core::crypto::{digest, Digest, KeyPair, Rng};
use proptest::prelude::*;

struct World {
    contracts: Contracts,
    trainer: KeyPair,
    training: KeyPair,
    query: KeyPair,
    users: Vec<KeyPair>,
    owners: Vec<KeyPair>,
    model_id: Digest,
}

fn world(seed: u64, split: SplitSpec, price: u64) -> World {
    let mut rng = Rng::new(seed);
    let [dev, runner, trainer, training, query] =
        std::array::from_fn(|_| KeyPair::generate(&mut rng));
    let users: Vec<KeyPair> = (0..3).map(|_| KeyPair::generate(&mut rng)).collect();
    let owners: Vec<KeyPair> = (0..4).map(|_| KeyPair::generate(&mut rng)).collect();
    let alloc: Vec<_> = users
        .iter()
        .chain(&owners)
        .chain([&trainer])
        .map(|k| (k.public(), 1000))
        .collect();
    let mut c = Contracts::with_allocations(&alloc);
    let m = digest(b"image");
    c.execute(
        dev.public(),
        &Call::RegisterPackage {
            source_hash: digest(b"src"),
            measurement: m,
        },
    )
    .unwrap();
    c.execute(
        dev.public(),
        &Call::RegisterAudit {
            measurement: m,
            report_hash: digest(b"audit"),
        },
    )
    .unwrap();
    for (k, kind) in [
        (&training, EnclaveKind::Training),
        (&query, EnclaveKind::Query),
    ] {
        let call = Call::RegisterInstance {
            measurement: m,
            enclave_pubkey: k.public(),
            ias_report_hash: digest(&k.public().0),
            kind,
        };
        c.execute(runner.public(), &call).unwrap();
    }
    for (i, o) in owners.iter().enumerate() {
        c.execute(
            o.public(),
            &Call::RegisterData {
                report_hash: digest(&[b'd', i as u8]),
            },
        )
        .unwrap();
    }
    let model_id = c
        .execute(
            trainer.public(),
            &Call::RegisterModel {
                whitepaper_hash: digest(b"wp"),
                training_enclave: training.public(),
                price,
                split,
            },
        )
        .unwrap()
        .model_id
        .unwrap();
    World {
        contracts: c,
        trainer,
        training,
        query,
        users,
        owners,
        model_id,
    }
}

#[derive(Debug, Clone)]
enum Op {
    Donate { owner: usize, quality: u8 },
    Withdraw { owner: usize },
    Advance { with_runner: bool },
    Purchase { user: usize, code: u8, extra: u64 },
    Consume { code: u8, by_training: bool },
    ForgedConsume { code: u8 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..4usize, 0..=6u8).prop_map(|(owner, quality)| Op::Donate { owner, quality }),
        (0..4usize).prop_map(|owner| Op::Withdraw { owner }),
        any::<bool>().prop_map(|with_runner| Op::Advance { with_runner }),
        (0..4usize, 0..6u8, 0..500u64).prop_map(|(user, code, extra)| Op::Purchase {
            user,
            code,
            extra
        }),
        (0..6u8, any::<bool>()).prop_map(|(code, by_training)| Op::Consume { code, by_training }),
        (0..6u8).prop_map(|code| Op::ForgedConsume { code }),
    ]
}

fn split() -> impl Strategy<Value = SplitSpec> {
    (0..=10_000u32).prop_flat_map(|t| {
        (0..=10_000 - t).prop_map(move |r| SplitSpec {
            trainer_bp: t,
            runner_bp: r,
            donor_pool_bp: 10_000 - t - r,
        })
    })
}

fn code_hash(code: u8) -> Digest {
    digest(&[b'c', code])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_call_sequence_preserves_the_token_invariants(
        seed in any::<u64>(),
        split in split(),
        price in 1..200u64,
        ops in prop::collection::vec(op(), 1..40),
    ) {
        let mut w = world(seed, split, price);
        let mut last_status = ModelStatus::Recruiting;
        for op in ops {
            let model_id = w.model_id;
            let (caller, call) = match op {
                Op::Donate { owner, quality } => {
                    let o = &w.owners[owner];
                    let msg = DonorReceipt::signed_message(&model_id, &o.public(), quality);
                    let receipt = DonorReceipt { model_id, owner: o.public(), quality, enclave_sig: w.training.sign(&msg) };
                    (o.public(), Call::RegisterDonor { model_id, receipt })
                }
                Op::Withdraw { owner } => (w.owners[owner].public(), Call::WithdrawDonor { model_id }),
                Op::Advance { with_runner } => {
                    let status = last_status.next().unwrap_or(ModelStatus::Trained);
                    let runner_enclave = with_runner.then(|| w.query.public());
                    (w.trainer.public(), Call::SetModelStatus { model_id, status, runner_enclave })
                }
                Op::Purchase { user, code, extra } => {
                    let who = w.users.get(user).unwrap_or(&w.trainer).public();
                    (who, Call::PurchaseAccessCode { model_id, code_hash: code_hash(code), amount: price + extra })
                }
                Op::Consume { code, by_training } => {
                    let signer = if by_training { &w.training } else { &w.query };
                    let sig = signer.sign(&consume_message(&code_hash(code)));
                    (w.users[0].public(), Call::ConsumeAndDistribute { code_hash: code_hash(code), enclave_sig: sig })
                }
                Op::ForgedConsume { code } => {
                    let sig = w.trainer.sign(&consume_message(&code_hash(code)));
                    (w.trainer.public(), Call::ConsumeAndDistribute { code_hash: code_hash(code), enclave_sig: sig })
                }
            };
            let before = w.contracts.state_bytes();
            if w.contracts.execute(caller, &call).is_err() {
                prop_assert_eq!(&before, &w.contracts.state_bytes());
            }
            if matches!(call, Call::ConsumeAndDistribute { .. }) && matches!(op, Op::ForgedConsume { .. }) {
                prop_assert_eq!(&before, &w.contracts.state_bytes());
            }

            let token = &w.contracts.token;
            prop_assert!(token.conserved());
            prop_assert_eq!(token.total_balances() + token.total_escrow(), token.minted);
            let status = w.contracts.registry.model(&model_id).unwrap().status;
            prop_assert!(status == last_status || last_status.next() == Some(status));
            last_status = status;
            for code in token.codes.values() {
                let dists: Vec<_> = token.distributions.iter().filter(|d| d.code_hash == code.code_hash).collect();
                match code.status {
                    CodeStatus::Paid => {
                        prop_assert!(dists.is_empty());
                        prop_assert_eq!(token.escrow.get(&code.code_hash), Some(&code.amount));
                    }
                    CodeStatus::Consumed => {
                        prop_assert_eq!(dists.len(), 1);
                        prop_assert_eq!(dists[0].credits.iter().map(|c| c.amount).sum::<u64>(), code.amount);
                        prop_assert!(!token.escrow.contains_key(&code.code_hash));
                    }
                }
            }
        }
    }

    #[test]
    fn withdrawn_donors_are_never_credited(seed in any::<u64>(), qualities in prop::collection::vec(1..=5u8, 4), gone in 0..4usize) {
        let split = SplitSpec { trainer_bp: 2000, runner_bp: 1000, donor_pool_bp: 7000 };
        let mut w = world(seed, split, 10);
        let model_id = w.model_id;
        for (o, q) in w.owners.iter().zip(&qualities) {
            let msg = DonorReceipt::signed_message(&model_id, &o.public(), *q);
            let receipt = DonorReceipt { model_id, owner: o.public(), quality: *q, enclave_sig: w.training.sign(&msg) };
            w.contracts.execute(o.public(), &Call::RegisterDonor { model_id, receipt }).unwrap();
        }
        w.contracts.execute(w.owners[gone].public(), &Call::WithdrawDonor { model_id }).unwrap();
        for (status, runner) in [(ModelStatus::Training, None), (ModelStatus::Trained, Some(w.query.public()))] {
            w.contracts.execute(w.trainer.public(), &Call::SetModelStatus { model_id, status, runner_enclave: runner }).unwrap();
        }
        let code = code_hash(0);
        w.contracts.execute(w.users[0].public(), &Call::PurchaseAccessCode { model_id, code_hash: code, amount: 997 }).unwrap();
        let sig = w.query.sign(&consume_message(&code));
        let effects = w.contracts.execute(w.users[0].public(), &Call::ConsumeAndDistribute { code_hash: code, enclave_sig: sig }).unwrap();
        prop_assert!(effects.credits.iter().all(|c| c.recipient != w.owners[gone].public()));
        prop_assert_eq!(effects.credits.iter().map(|c| c.amount).sum::<u64>(), 997);
    }
}

#[test]
fn withdrawal_after_trained_is_rejected() {
    let mut w = world(
        1,
        SplitSpec {
            trainer_bp: 5000,
            runner_bp: 0,
            donor_pool_bp: 5000,
        },
        5,
    );
    let model_id = w.model_id;
    let o = &w.owners[0];
    let msg = DonorReceipt::signed_message(&model_id, &o.public(), 3);
    let receipt = DonorReceipt {
        model_id,
        owner: o.public(),
        quality: 3,
        enclave_sig: w.training.sign(&msg),
    };
    w.contracts
        .execute(o.public(), &Call::RegisterDonor { model_id, receipt })
        .unwrap();
    for (status, runner) in [
        (ModelStatus::Training, None),
        (ModelStatus::Trained, Some(w.query.public())),
    ] {
        w.contracts
            .execute(
                w.trainer.public(),
                &Call::SetModelStatus {
                    model_id,
                    status,
                    runner_enclave: runner,
                },
            )
            .unwrap();
    }
    let before = w.contracts.state_bytes();
    assert!(w
        .contracts
        .execute(o.public(), &Call::WithdrawDonor { model_id })
        .is_err());
    assert_eq!(before, w.contracts.state_bytes());
}
