//! Scenario files, the deterministic end-to-end runner, built-in invariant
//! checks, and standalone chain verification.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{
    ChainActor, DataOwner, EnclaveId, FlowError, OwnerPolicy, Platform, PlatformConfig, Runner,
    Trainer,
};
use crate::codec::{Decode, Encode};
use crate::contracts::{
    Call, CodeStatus, DonorReceipt, EnclaveKind, ModelStatus, Role, SplitSpec, BASIS_POINTS,
};
use crate::crypto::{Digest, KeyPair, Rng};
use crate::enclave::{
    Dataset, EnclaveError, EnclaveImage, ModelSpec, Refusal, Snp, ValidationReport, ValidatorConfig,
};
use crate::ledger::{
    dump_chain, parse_dump, validate_chain, Block, ChainInvalid, DumpError, LedgerConfig, TxStatus,
};
use crate::repository::DEFAULT_STORES;
use crate::vm::{
    assemble, run_query, run_training, OutputGate, Program, ProgramKind, Record, TrainingConfig,
    VmError, AVERAGING_PROGRAM, LINEAR_SCORER, SGD_PROGRAM,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn default_balance() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_balance")]
    pub initial_balance: u64,
    #[serde(default)]
    pub ledger: LedgerSection,
    #[serde(default)]
    pub repository: RepoSection,
    #[serde(default)]
    pub validator: ValidatorSection,
    #[serde(default)]
    pub synthetic: Synthetic,
    pub roles: Roles,
    pub owners: Vec<OwnerSpec>,
    #[serde(default)]
    pub end_users: Vec<String>,
    pub models: Vec<ModelSection>,
    #[serde(default)]
    pub faults: Faults,
    #[serde(default)]
    pub expect: Expect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerSection {
    pub max_txs_per_block: usize,
    pub miners: usize,
}

impl Default for LedgerSection {
    fn default() -> Self {
        Self {
            max_txs_per_block: LedgerConfig::default().max_txs_per_block,
            miners: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepoSection {
    pub stores: Vec<String>,
    pub mirrors: usize,
}

impl Default for RepoSection {
    fn default() -> Self {
        Self {
            stores: DEFAULT_STORES.iter().map(|s| s.to_string()).collect(),
            mirrors: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidatorSection {
    pub het_range: (f64, f64),
    pub trait_ranges: BTreeMap<String, (f64, f64)>,
    pub requested_traits: Vec<String>,
}

impl Default for ValidatorSection {
    fn default() -> Self {
        let d = ValidatorConfig::default();
        Self {
            het_range: d.het_range,
            trait_ranges: d.trait_ranges,
            requested_traits: d.requested_traits,
        }
    }
}

/// Genotype generation parameters. Sites are named `rs1..rsN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Synthetic {
    pub snp_count: usize,
    pub het_fraction: f64,
    pub hom_alt_fraction: f64,
}

impl Default for Synthetic {
    fn default() -> Self {
        Self {
            snp_count: 40,
            het_fraction: 0.3,
            hom_alt_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub developer: String,
    #[serde(default)]
    pub auditor: Option<String>,
    pub runner: String,
    pub trainer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnerSpec {
    pub name: String,
    #[serde(default)]
    pub policy: OwnerPolicy,
    /// Fixed dosages; every other site is generated.
    #[serde(default)]
    pub dosages: BTreeMap<String, u8>,
    #[serde(default)]
    pub traits: BTreeMap<String, f64>,
    /// Overrides the synthetic heterozygosity for this owner.
    #[serde(default)]
    pub het_fraction: Option<f64>,
    #[serde(default)]
    pub max_attestation_age: Option<u64>,
    /// Model tags this owner withdraws from right before training.
    #[serde(default)]
    pub withdraw_before_training: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalData {
    pub dosages: BTreeMap<String, u8>,
}

fn default_dmin() -> usize {
    1
}

fn default_dmax() -> usize {
    8
}

fn default_dummy_p() -> f64 {
    crate::vm::DEFAULT_DUMMY_P
}

fn default_queries() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub tag: String,
    pub panel: Vec<String>,
    pub target_trait: String,
    #[serde(default)]
    pub required_traits: Vec<String>,
    pub price: u64,
    pub split: SplitSpec,
    /// Assembly text, or `builtin:sgd`, `builtin:averaging`,
    /// `builtin:linear-scorer`.
    pub training_program: String,
    pub query_program: String,
    pub epochs: u32,
    #[serde(default = "default_dmin")]
    pub dmin: usize,
    #[serde(default = "default_dmax")]
    pub dmax: usize,
    #[serde(default = "default_dummy_p")]
    pub dummy_p: f64,
    #[serde(default)]
    pub evaluation: Option<EvalData>,
    #[serde(default = "default_queries")]
    pub queries_per_user: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperSpec {
    pub block: u64,
    pub bit: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Faults {
    /// Flip one bit of one encoded block after the run.
    pub tamper_chain: Option<TamperSpec>,
    /// Launch a patched image after package registration.
    pub tampered_image: bool,
    pub unpaid_query: bool,
    pub replay_query: bool,
    /// Query with a paid code but a program that was never registered.
    pub unregistered_query: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedPrediction {
    pub user: String,
    pub model: String,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expect {
    /// Exact count of successful transactions per operation.
    pub tx_counts: BTreeMap<String, u64>,
    pub failed_txs: u64,
    pub donors: BTreeMap<String, usize>,
    pub rejected_data: Vec<String>,
    pub failed_training: Vec<String>,
    pub predictions: Vec<ExpectedPrediction>,
    pub reattestations: Option<u64>,
    /// Invariants that must fail for the run to count as passing.
    pub expected_failures: Vec<String>,
}

pub fn resolve_program(src: &str, kind: ProgramKind) -> Result<Program, String> {
    let text = match src {
        "builtin:sgd" => SGD_PROGRAM,
        "builtin:averaging" => AVERAGING_PROGRAM,
        "builtin:linear-scorer" => LINEAR_SCORER,
        s if s.starts_with("builtin:") => return Err(format!("unknown builtin {s:?}")),
        s => s,
    };
    assemble(text, kind).map_err(|e| e.to_string())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(
                if path == "." {
                    "(root)".to_string()
                } else {
                    path
                },
                e.into_inner().to_string(),
            )
        })?;
        sc.check()?;
        Ok(sc)
    }

    /// Semantic checks serde cannot express.
    pub fn check(&self) -> Result<(), ScenarioError> {
        let r = &self.repository;
        if r.stores.is_empty() {
            return Err(schema(
                "repository.stores",
                "at least one store is required",
            ));
        }
        if r.mirrors == 0 || r.mirrors > r.stores.len() {
            return Err(schema(
                "repository.mirrors",
                format!("must be in 1..={}", r.stores.len()),
            ));
        }
        if self.ledger.max_txs_per_block == 0 {
            return Err(schema("ledger.max_txs_per_block", "must be positive"));
        }
        if self.ledger.miners == 0 {
            return Err(schema("ledger.miners", "must be positive"));
        }
        let (lo, hi) = self.validator.het_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(schema(
                "validator.het_range",
                "must be an ordered pair within [0, 1]",
            ));
        }
        let s = &self.synthetic;
        if s.snp_count == 0 {
            return Err(schema("synthetic.snp_count", "must be positive"));
        }
        if !(0.0..=1.0).contains(&s.het_fraction)
            || !(0.0..=1.0).contains(&s.hom_alt_fraction)
            || s.het_fraction + s.hom_alt_fraction > 1.0
        {
            return Err(schema(
                "synthetic",
                "fractions must lie in [0, 1] and sum to at most 1",
            ));
        }

        let mut names = BTreeSet::new();
        let roles = [
            Some(&self.roles.developer),
            self.roles.auditor.as_ref(),
            Some(&self.roles.runner),
            Some(&self.roles.trainer),
        ];
        for n in roles.into_iter().flatten() {
            if !names.insert(n.clone()) {
                return Err(schema("roles", format!("duplicate actor name {n:?}")));
            }
        }
        for (i, o) in self.owners.iter().enumerate() {
            if !names.insert(o.name.clone()) {
                return Err(schema(
                    format!("owners[{i}].name"),
                    format!("duplicate actor name {:?}", o.name),
                ));
            }
            if let Some((rsid, d)) = o.dosages.iter().find(|(_, d)| **d > 2) {
                return Err(schema(
                    format!("owners[{i}].dosages.{rsid}"),
                    format!("dosage {d} outside 0..=2"),
                ));
            }
            if let Some(h) = o.het_fraction.filter(|h| !(0.0..=1.0).contains(h)) {
                return Err(schema(
                    format!("owners[{i}].het_fraction"),
                    format!("{h} outside [0, 1]"),
                ));
            }
            if let Some((t, _)) = o.traits.iter().find(|(_, v)| !v.is_finite()) {
                return Err(schema(format!("owners[{i}].traits.{t}"), "must be finite"));
            }
        }
        for (i, u) in self.end_users.iter().enumerate() {
            if !self.owners.iter().any(|o| &o.name == u) {
                return Err(schema(
                    format!("end_users[{i}]"),
                    format!("{u:?} is not an owner"),
                ));
            }
        }

        let mut tags = BTreeSet::new();
        for (i, m) in self.models.iter().enumerate() {
            let at = |f: &str| format!("models[{i}].{f}");
            if !tags.insert(m.tag.clone()) {
                return Err(schema(at("tag"), format!("duplicate tag {:?}", m.tag)));
            }
            let sum =
                m.split.trainer_bp as u64 + m.split.runner_bp as u64 + m.split.donor_pool_bp as u64;
            if !m.split.is_valid() {
                return Err(schema(
                    at("split"),
                    format!("basis points sum to {sum}, expected {BASIS_POINTS}"),
                ));
            }
            if m.panel.is_empty() {
                return Err(schema(at("panel"), "must not be empty"));
            }
            if m.dmin == 0 || m.dmin > m.dmax {
                return Err(schema(at("dmin"), "need 1 <= dmin <= dmax"));
            }
            if !(0.0..=1.0).contains(&m.dummy_p) {
                return Err(schema(at("dummy_p"), "must lie in [0, 1]"));
            }
            resolve_program(&m.training_program, ProgramKind::Training)
                .map_err(|e| schema(at("training_program"), e))?;
            resolve_program(&m.query_program, ProgramKind::Query)
                .map_err(|e| schema(at("query_program"), e))?;
            if let Some((rsid, d)) = m
                .evaluation
                .iter()
                .flat_map(|e| &e.dosages)
                .find(|(_, d)| **d > 2)
            {
                return Err(schema(
                    at(&format!("evaluation.dosages.{rsid}")),
                    format!("dosage {d} outside 0..=2"),
                ));
            }
        }
        for (i, p) in self.expect.predictions.iter().enumerate() {
            if !self.end_users.contains(&p.user) {
                return Err(schema(
                    format!("expect.predictions[{i}].user"),
                    format!("{:?} is not an end user", p.user),
                ));
            }
            if !tags.contains(&p.model) {
                return Err(schema(
                    format!("expect.predictions[{i}].model"),
                    format!("unknown model {:?}", p.model),
                ));
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::from_json(&text)
}

/// Builds a genotype over `rs1..rsN` plus any fixed sites. The share of
/// heterozygous sites is exact (rounded to the nearest site).
pub fn synthetic_dataset(
    cfg: &Synthetic,
    het_fraction: f64,
    fixed: &BTreeMap<String, u8>,
    traits: &BTreeMap<String, f64>,
    owner_tag: &str,
    rng: &mut Rng,
) -> Dataset {
    let mut names: Vec<String> = (1..=cfg.snp_count).map(|i| format!("rs{i}")).collect();
    for k in fixed.keys() {
        if !names.contains(k) {
            names.push(k.clone());
        }
    }
    let free: Vec<&String> = names.iter().filter(|n| !fixed.contains_key(*n)).collect();
    let target = (het_fraction * names.len() as f64).round() as usize;
    let fixed_het = fixed.values().filter(|d| **d == 1).count();
    let want = target.saturating_sub(fixed_het).min(free.len());

    let mut order: Vec<usize> = (0..free.len()).collect();
    order.shuffle(rng);
    let mut dosage: BTreeMap<&str, u8> = fixed.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let hom_alt = cfg.hom_alt_fraction / (1.0 - cfg.het_fraction).max(f64::EPSILON);
    for (rank, &i) in order.iter().enumerate() {
        let d = if rank < want {
            1
        } else if rng.gen_bool(hom_alt.clamp(0.0, 1.0)) {
            2
        } else {
            0
        };
        dosage.insert(free[i].as_str(), d);
    }
    Dataset {
        genotype: dosage
            .into_iter()
            .map(|(rsid, dosage)| Snp {
                rsid: rsid.to_string(),
                dosage,
            })
            .collect(),
        phenotype: traits.clone(),
        owner_tag: owner_tag.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub expected_failure: bool,
    pub detail: String,
}

impl InvariantResult {
    /// Passing, or failing exactly when the scenario said it would.
    pub fn ok(&self) -> bool {
        self.passed != self.expected_failure
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub minted: u64,
    pub balances: u64,
    pub escrow: u64,
    pub distributed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub user: String,
    pub model: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub chain_dump: Option<String>,
    pub message_trace: Option<String>,
    pub blocks: usize,
    pub tx_counts: BTreeMap<String, u64>,
    pub failed_txs: u64,
    pub donors: BTreeMap<String, usize>,
    pub predictions: Vec<Prediction>,
    pub evaluations: BTreeMap<String, Vec<f64>>,
    pub flow_log: Vec<String>,
    pub conservation: Conservation,
    pub invariants: Vec<InvariantResult>,
    pub passed: bool,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn invariant(&self, name: &str) -> Option<&InvariantResult> {
        self.invariants.iter().find(|i| i.name == name)
    }

    /// `(name, passed)` for every invariant; stable across replays.
    pub fn verdicts(&self) -> Vec<(String, bool)> {
        self.invariants
            .iter()
            .map(|i| (i.name.clone(), i.passed))
            .collect()
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub blocks: Vec<Block>,
    pub chain_dump: String,
    pub trace: String,
    pub platform: Platform,
}

/// Outcomes of the probes every run performs.
#[derive(Debug, Default)]
struct Probes {
    forged_report: Vec<String>,
    forged_receipt: Vec<String>,
    gate: Vec<String>,
    refusals: Vec<(String, bool, String)>,
    tampered_image: Option<(bool, String)>,
    atomicity: Vec<String>,
    flow_errors: Vec<String>,
}

struct Owners {
    specs: Vec<OwnerSpec>,
    actors: Vec<DataOwner>,
}

impl Owners {
    fn index(&self, name: &str) -> usize {
        self.specs
            .iter()
            .position(|o| o.name == name)
            .expect("names checked at load")
    }
}

pub fn run(scenario: &Scenario) -> RunOutput {
    let started = Instant::now();
    let sc = scenario;
    let root = Rng::new(sc.seed);

    let mut developer = ChainActor::new(&sc.roles.developer, &root);
    let mut auditor = sc.roles.auditor.as_ref().map(|a| ChainActor::new(a, &root));
    let runner_actor = ChainActor::new(&sc.roles.runner, &root);
    let mut trainer = Trainer::new(&sc.roles.trainer, &root);
    let actors: Vec<DataOwner> = sc
        .owners
        .iter()
        .map(|o| {
            let mut r = root.derive(&format!("data/{}", o.name));
            let het = o.het_fraction.unwrap_or(sc.synthetic.het_fraction);
            let ds = synthetic_dataset(&sc.synthetic, het, &o.dosages, &o.traits, &o.name, &mut r);
            let mut owner = DataOwner::new(&o.name, ds, o.policy.clone(), &root);
            owner.max_attestation_age = o.max_attestation_age;
            owner
        })
        .collect();
    let mut owners = Owners {
        specs: sc.owners.clone(),
        actors,
    };

    let mut allocations = vec![
        (developer.id(), sc.initial_balance),
        (runner_actor.id(), sc.initial_balance),
    ];
    allocations.extend(auditor.iter().map(|a| (a.id(), sc.initial_balance)));
    allocations.push((trainer.actor.id(), sc.initial_balance));
    allocations.extend(owners.actors.iter().map(|o| (o.id(), sc.initial_balance)));

    let v = &sc.validator;
    let cfg = PlatformConfig {
        ledger: LedgerConfig {
            max_txs_per_block: sc.ledger.max_txs_per_block,
        },
        stores: sc.repository.stores.clone(),
        mirrors: sc.repository.mirrors,
        miners: sc.ledger.miners,
        allocations,
        validator: ValidatorConfig {
            het_range: v.het_range,
            trait_ranges: v.trait_ranges.clone(),
            requested_traits: v.requested_traits.clone(),
        },
    };
    let mut p = Platform::new(sc.seed, cfg);
    let cpu = p.manufacture_cpu(&sc.roles.runner);
    let mut runner = Runner {
        actor: runner_actor,
        cpu,
        enclaves: Vec::new(),
    };
    for o in &owners.actors {
        p.net.register(&o.p2p);
    }
    p.net.register(&trainer.p2p);

    let mut probes = Probes::default();
    let mut log = Vec::new();
    let mut donors_by_tag = BTreeMap::new();
    let mut predictions = Vec::new();
    let mut evaluations = BTreeMap::new();
    let mut model_ids: BTreeMap<String, Digest> = BTreeMap::new();
    let mut trained: BTreeSet<String> = BTreeSet::new();

    let image = EnclaveImage::standard(1);
    let kinds = [
        EnclaveKind::Validation,
        EnclaveKind::Training,
        EnclaveKind::Query,
    ];
    let onboarded = guarded(&mut p, &mut probes, "onboarding", |p| {
        p.flow_enclave_onboarding(
            &mut developer,
            auditor.as_mut(),
            &mut runner,
            &image,
            &kinds,
            None,
        )
    });
    let Some(ids) = onboarded else {
        log.push("onboarding aborted".to_string());
        return finish(
            sc,
            p,
            owners,
            probes,
            log,
            donors_by_tag,
            predictions,
            evaluations,
            &model_ids,
            started,
        );
    };
    let (validation, training, query) = (ids[0], ids[1], ids[2]);
    log.push(format!("onboarding: {} instances registered", ids.len()));

    if sc.faults.tampered_image {
        let mut patched = image.clone();
        patched.code.extend_from_slice(b"patch=1\n");
        let height = p.chain.height();
        let r = p.flow_enclave_onboarding(
            &mut developer,
            None,
            &mut runner,
            &image,
            &[EnclaveKind::Query],
            Some(&patched),
        );
        let refused =
            matches!(r, Err(FlowError::MeasurementMismatch)) && p.chain.height() == height;
        probes.tampered_image = Some((refused, format!("{r:?}")));
        log.push(format!(
            "tampered image onboarding: {}",
            if refused { "refused" } else { "NOT refused" }
        ));
    }

    for i in 0..owners.actors.len() {
        let name = owners.specs[i].name.clone();
        let height = p.chain.height();
        match p.flow_data_registration(&mut owners.actors[i], validation) {
            Ok(h) => log.push(format!("data {name}: registered {h}")),
            Err(FlowError::FakeData) => {
                log.push(format!("data {name}: rejected as fake"));
                if p.chain.height() != height || !p.chain.pending().is_empty() {
                    probes
                        .atomicity
                        .push(format!("fake data of {name} left chain records"));
                }
            }
            Err(e) => probes
                .flow_errors
                .push(format!("data registration {name}: {e}")),
        }
    }

    for m in &sc.models {
        let spec = ModelSpec {
            panel: m.panel.clone(),
            target_trait: m.target_trait.clone(),
        };
        let qprog = resolve_program(&m.query_program, ProgramKind::Query).expect("checked at load");
        let tprog =
            resolve_program(&m.training_program, ProgramKind::Training).expect("checked at load");
        let registered = guarded(
            &mut p,
            &mut probes,
            &format!("register model {}", m.tag),
            |p| {
                p.register_model(
                    &mut trainer,
                    &m.tag,
                    &spec,
                    &m.required_traits,
                    training,
                    m.price,
                    m.split,
                    &qprog,
                )
            },
        );
        let Some(call) = registered else { continue };
        let model_id = call.model_id;
        model_ids.insert(m.tag.clone(), model_id);

        let recruited = guarded(&mut p, &mut probes, &format!("recruiting {}", m.tag), |p| {
            p.flow_model_recruiting(&mut trainer, &call, &mut owners.actors)
        });
        let donors = recruited.unwrap_or_default();
        donors_by_tag.insert(m.tag.clone(), donors.len());
        log.push(format!(
            "recruiting {}: donors [{}]",
            m.tag,
            donors
                .iter()
                .map(|&i| owners.specs[i].name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        probe_forgery(&mut p, &mut probes, &owners, &donors, model_id, training);

        for &i in &donors {
            if owners.specs[i].withdraw_before_training.contains(&m.tag) {
                let name = owners.specs[i].name.clone();
                let r = p.commit(
                    &mut owners.actors[i].actor.account,
                    &Call::WithdrawDonor { model_id },
                );
                match r {
                    Ok(_) => log.push(format!("{name} withdrew from {}", m.tag)),
                    Err(e) => probes.flow_errors.push(format!("withdraw {name}: {e}")),
                }
            }
        }

        let cfg = TrainingConfig {
            epochs: m.epochs,
            dmin: m.dmin,
            dmax: m.dmax,
            dummy_p: m.dummy_p,
            ..Default::default()
        };
        let eval_data = m.evaluation.as_ref().map(|e| Dataset {
            genotype: e
                .dosages
                .iter()
                .map(|(r, d)| Snp {
                    rsid: r.clone(),
                    dosage: *d,
                })
                .collect(),
            phenotype: BTreeMap::new(),
            owner_tag: sc.roles.trainer.clone(),
        });
        let height = p.chain.height();
        let result = p.flow_training(
            &mut trainer,
            model_id,
            &tprog,
            &spec,
            &cfg,
            query,
            eval_data.as_ref().map(|d| (d, &qprog)),
        );
        if !p.chain.pending().is_empty() {
            probes
                .atomicity
                .push(format!("training {} left pending transactions", m.tag));
        }
        match result {
            Ok(eval) => {
                trained.insert(m.tag.clone());
                if let Some(v) = eval {
                    evaluations.insert(m.tag.clone(), v);
                }
                log.push(format!("training {}: trained", m.tag));
            }
            Err(e) => {
                log.push(format!(
                    "training {}: failed ({e}) after {} blocks",
                    m.tag,
                    p.chain.height() - height
                ));
                if !sc.expect.failed_training.contains(&m.tag) {
                    probes.flow_errors.push(format!("training {}: {e}", m.tag));
                }
            }
        }
        probe_gate(
            &mut p,
            &mut probes,
            &owners,
            model_id,
            query,
            &qprog,
            &tprog,
            &m.panel,
        );
    }

    for m in sc.models.iter().filter(|m| trained.contains(&m.tag)) {
        let model_id = model_ids[&m.tag];
        let qprog = resolve_program(&m.query_program, ProgramKind::Query).expect("checked at load");
        for user in &sc.end_users {
            let i = owners.index(user);
            for _ in 0..m.queries_per_user {
                let r = guarded(
                    &mut p,
                    &mut probes,
                    &format!("query {user} {}", m.tag),
                    |p| {
                        p.flow_query(
                            &mut owners.actors[i],
                            model_id,
                            validation,
                            qprog.program_hash,
                        )
                    },
                );
                if let Some(values) = r {
                    log.push(format!("query {user} {}: {values:?}", m.tag));
                    predictions.push(Prediction {
                        user: user.clone(),
                        model: m.tag.clone(),
                        values,
                    });
                }
            }
        }
        if let Some(user) = sc.end_users.first() {
            let i = owners.index(user);
            adversarial_queries(
                &mut p,
                &mut probes,
                &sc.faults,
                &mut owners.actors[i],
                model_id,
                query,
                &qprog,
            );
        }
    }

    finish(
        sc,
        p,
        owners,
        probes,
        log,
        donors_by_tag,
        predictions,
        evaluations,
        &model_ids,
        started,
    )
}

/// Runs a flow step and records an unexpected error instead of propagating.
fn guarded<T>(
    p: &mut Platform,
    probes: &mut Probes,
    what: &str,
    f: impl FnOnce(&mut Platform) -> Result<T, FlowError>,
) -> Option<T> {
    let r = f(p);
    if !p.chain.pending().is_empty() {
        probes
            .atomicity
            .push(format!("{what} left pending transactions"));
    }
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            probes.flow_errors.push(format!("{what}: {e}"));
            None
        }
    }
}

/// A forged validation report must be refused by the training enclave, and
/// a forged donor receipt by the registry.
fn probe_forgery(
    p: &mut Platform,
    probes: &mut Probes,
    owners: &Owners,
    donors: &[usize],
    model_id: Digest,
    training: EnclaveId,
) {
    let Some(&d) = donors.first() else { return };
    let owner = &owners.actors[d];
    let Some(report) = owner.report.clone() else {
        return;
    };
    let mut attacker_rng = p.stream(&format!("attacker/{model_id}"));
    let attacker = KeyPair::generate(&mut attacker_rng);
    let data = owner
        .processed
        .clone()
        .unwrap_or_else(|| owner.dataset.clone());
    let key = p.enclave(training).public();

    let mut upgraded = report.clone();
    upgraded.quality = if report.quality == 5 { 4 } else { 5 };
    let mut self_signed = report.clone();
    let msg = ValidationReport::signing_bytes(
        &report.data_fingerprint,
        5,
        report.verdict,
        &report.validator_measurement,
    );
    self_signed.quality = 5;
    self_signed.enclave_sig = attacker.sign(&msg);

    for (label, forged, expect) in [
        ("altered quality", upgraded, EnclaveError::ReportSignature),
        (
            "unregistered signer",
            self_signed,
            EnclaveError::UnregisteredValidator,
        ),
    ] {
        let ct =
            crate::enclave::secure_send(&key, data.canonical_text().as_bytes(), &mut attacker_rng)
                .expect("valid enclave key");
        let r =
            p.enclaves[training].ingest_donor_data(&ct, &forged, owner.id(), model_id, &p.chain);
        if r.as_ref().err() != Some(&expect) {
            probes.forged_report.push(format!("{label}: {r:?}"));
        }
    }

    // contract side, on a scratch copy of the chain
    let mut scratch = p.chain.clone();
    let quality = report.quality;
    let forged_receipt = DonorReceipt {
        model_id,
        owner: owner.id(),
        quality,
        enclave_sig: attacker.sign(&DonorReceipt::signed_message(
            &model_id,
            &owner.id(),
            quality,
        )),
    };
    let mut acct = owner.actor.account.clone();
    let tx = acct.call(&Call::RegisterDonor {
        model_id,
        receipt: forged_receipt,
    });
    let hash = tx.hash();
    if scratch.submit_tx(tx).is_ok() {
        scratch.mine_block(&attacker, p.clock + 1);
    }
    match scratch.receipt_for(&hash).map(|r| &r.status) {
        Some(TxStatus::Failed(_)) => {}
        other => probes
            .forged_receipt
            .push(format!("forged receipt outcome {other:?}")),
    }
}

/// Checks the output gate directly: an unregistered query program and a
/// Training-kind program that emits must both produce zero bytes.
#[allow(clippy::too_many_arguments)]
fn probe_gate(
    p: &mut Platform,
    probes: &mut Probes,
    owners: &Owners,
    model_id: Digest,
    query: EnclaveId,
    registered: &Program,
    training_program: &Program,
    panel: &[String],
) {
    let Some(model) = p.chain.contracts().registry.model(&model_id).cloned() else {
        return;
    };
    let gate = OutputGate::new(model.query_programs.iter().copied());
    let leak =
        assemble("INPUT 3\nEMIT\nJMP 0\nHALT\n", ProgramKind::Query).expect("static program");
    let leak_training =
        assemble("INPUT 3\nEMIT\nJMP 0\nHALT\n", ProgramKind::Training).expect("static program");
    let records: Vec<Record> = owners
        .actors
        .iter()
        .map(|o| Record {
            features: o.dataset.features(panel),
            label: 0.0,
        })
        .collect();
    let params = p
        .enclave(query)
        .model_params(&model_id)
        .cloned()
        .unwrap_or_default();
    let rng = p.stream(&format!("gate-probe/{model_id}"));

    if gate.is_open_for(registered) != model.query_programs.contains(&registered.program_hash) {
        probes
            .gate
            .push("gate disagrees with chain registration".into());
    }
    match run_query(&leak, &records, &params, &gate, &rng) {
        Err(VmError::GateRefused) => {}
        Ok(out) => probes.gate.push(format!(
            "unregistered program ran, {} bytes",
            out.emitted.len()
        )),
        Err(e) => probes.gate.push(format!("unregistered program: {e}")),
    }
    let cfg = TrainingConfig::default();
    if let Ok(out) = run_training(&leak_training, &records, &cfg, &rng) {
        if out.emitted_bytes != 0 {
            probes.gate.push(format!(
                "training-kind EMIT leaked {} bytes",
                out.emitted_bytes
            ));
        }
    }
    if run_training(training_program, &records, &cfg, &rng).is_ok_and(|o| o.emitted_bytes != 0) {
        probes.gate.push("scenario training program emitted".into());
    }
}

fn adversarial_queries(
    p: &mut Platform,
    probes: &mut Probes,
    faults: &Faults,
    user: &mut DataOwner,
    model_id: Digest,
    query: EnclaveId,
    program: &Program,
) {
    let Some(price) = p
        .chain
        .contracts()
        .registry
        .model(&model_id)
        .map(|m| m.price)
    else {
        return;
    };
    let data = user
        .processed
        .clone()
        .unwrap_or_else(|| user.dataset.clone());
    let name = user.actor.name.clone();
    let mut refusal =
        |p: &mut Platform, label: &str, r: Result<Vec<f64>, FlowError>, want: Refusal| {
            let dists = p.chain.contracts().token.distributions.len();
            p.mine();
            let refused = r == Err(FlowError::Enclave(EnclaveError::Refused(want)))
                && p.chain.contracts().token.distributions.len() == dists;
            probes
                .refusals
                .push((label.to_string(), refused, format!("{r:?}")));
        };

    if faults.unpaid_query {
        let secret = p.stream(&format!("unpaid/{name}")).bytes32().to_vec();
        let r = p.query_enclave(&name, query, model_id, &secret, &data, program);
        refusal(p, "unpaid query", r, Refusal::UnknownCode);
    }
    if faults.replay_query {
        match p.purchase(&mut user.actor, model_id, price) {
            Ok(secret) => {
                let first = p.query_enclave(&name, query, model_id, &secret, &data, program);
                if first.is_err() {
                    probes
                        .flow_errors
                        .push(format!("replay setup query: {first:?}"));
                }
                let r = p.query_enclave(&name, query, model_id, &secret, &data, program);
                refusal(p, "replayed code", r, Refusal::Replay);
            }
            Err(e) => probes.flow_errors.push(format!("replay purchase: {e}")),
        }
    }
    if faults.unregistered_query {
        let leak =
            assemble("INPUT 3\nEMIT\nJMP 0\nHALT\n", ProgramKind::Query).expect("static program");
        match p.purchase(&mut user.actor, model_id, price) {
            Ok(secret) => {
                let before = p.enclave(query).emissions().len();
                let r = p.query_enclave(&name, query, model_id, &secret, &data, &leak);
                let silent = p.enclave(query).emissions().len() == before;
                refusal(p, "unregistered program", r, Refusal::Gate);
                if !silent {
                    probes
                        .gate
                        .push("unregistered program reached the VM".into());
                }
            }
            Err(e) => probes
                .flow_errors
                .push(format!("unregistered purchase: {e}")),
        }
    }
}

fn count_txs(blocks: &[Block]) -> (BTreeMap<String, u64>, u64) {
    let mut counts = BTreeMap::new();
    let mut failed = 0;
    for b in blocks {
        for (tx, receipt) in b.txs.iter().zip(&b.receipts) {
            if receipt.ok() {
                let op = match tx.payload.decode_call() {
                    Ok(Some(call)) => call.operation().to_string(),
                    Ok(None) => "noop".to_string(),
                    Err(_) => "undecodable".to_string(),
                };
                *counts.entry(op).or_default() += 1;
            } else {
                failed += 1;
            }
        }
    }
    (counts, failed)
}

/// Flips one bit of the encoded block, retrying on the following bits
/// until the result still decodes.
pub fn flip_block_bit(block: &Block, bit: u64) -> Option<Block> {
    let bytes = block.to_bytes();
    let total = bytes.len() as u64 * 8;
    (0..total).find_map(|k| {
        let b = (bit + k) % total;
        let mut copy = bytes.clone();
        copy[(b / 8) as usize] ^= 1 << (b % 8);
        Block::from_bytes(&copy).ok()
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    sc: &Scenario,
    p: Platform,
    owners: Owners,
    probes: Probes,
    flow_log: Vec<String>,
    donors: BTreeMap<String, usize>,
    predictions: Vec<Prediction>,
    evaluations: BTreeMap<String, Vec<f64>>,
    model_ids: &BTreeMap<String, Digest>,
    started: Instant,
) -> RunOutput {
    let mut blocks = p.chain.blocks().to_vec();
    let mut inv = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        inv.push(InvariantResult {
            name: name.to_string(),
            passed,
            expected_failure: sc.expect.expected_failures.iter().any(|f| f == name),
            detail: if detail.is_empty() {
                "no violations".to_string()
            } else {
                detail
            },
        });
    };

    let mut tamper_detail = String::new();
    if let Some(t) = sc.faults.tamper_chain {
        let idx = t.block as usize;
        match blocks.get(idx).and_then(|b| flip_block_bit(b, t.bit)) {
            Some(b) => {
                blocks[idx] = b;
                tamper_detail = format!("bit {} of block {idx} flipped", t.bit);
            }
            None => tamper_detail = format!("block {idx} not tamperable"),
        }
    }
    let validity = validate_chain(&blocks);
    check(
        "chain_valid",
        validity.is_ok(),
        match validity {
            Ok(()) => format!("{} blocks valid", blocks.len()),
            Err(e) => e.to_string(),
        },
    );
    if let Some(t) = sc.faults.tamper_chain {
        let at = validity.err().map(|e| e.index);
        let near = at.is_some_and(|i| i >= t.block && i <= t.block + 1);
        check(
            "tamper_detected_at_site",
            near,
            format!("{tamper_detail}; first failure at {at:?}"),
        );
    }

    let token = &p.chain.contracts().token;
    let distributed: u64 = token.distributions.iter().map(|d| d.amount).sum();
    let credits_match = token
        .distributions
        .iter()
        .all(|d| d.credits.iter().map(|c| c.amount).sum::<u64>() == d.amount);
    let paid_escrow: u64 = token
        .codes
        .values()
        .filter(|c| c.status == CodeStatus::Paid)
        .map(|c| c.amount)
        .sum();
    let conservation = Conservation {
        minted: token.minted,
        balances: token.total_balances(),
        escrow: token.total_escrow(),
        distributed,
    };
    check(
        "token_conservation",
        token.conserved()
            && credits_match
            && paid_escrow == token.total_escrow()
            && p.conservation_violations.is_empty(),
        format!(
            "minted {} = balances {} + escrow {}; violations at blocks {:?}",
            token.minted, conservation.balances, conservation.escrow, p.conservation_violations
        ),
    );

    let training_enclaves: Vec<&crate::enclave::Enclave> = p
        .enclaves
        .iter()
        .filter(|e| e.kind() == EnclaveKind::Training)
        .collect();
    let external: u64 = training_enclaves
        .iter()
        .map(|e| e.external_output_bytes())
        .sum();
    let audits_silent = p.training_audits.iter().all(|a| a.external_bytes == 0);
    check(
        "rule1_training_silent",
        external == 0 && audits_silent,
        format!("{external} external bytes"),
    );

    let held: usize = training_enclaves
        .iter()
        .map(|e| e.held_dataset_count())
        .sum();
    let purged = p.training_audits.iter().all(|a| a.held_after == 0);
    check(
        "rule2_data_purged",
        purged && held == 0,
        format!(
            "{} training runs ({} failed), {held} datasets still held",
            p.training_audits.len(),
            p.training_audits.iter().filter(|a| !a.succeeded).count()
        ),
    );

    let forged_ok = probes.forged_report.is_empty() && probes.forged_receipt.is_empty();
    let mut issues = probes.forged_report.clone();
    issues.extend(probes.forged_receipt.iter().cloned());
    check(
        "rule3_forgery_rejected",
        forged_ok,
        if forged_ok {
            "enclave and contract refused".into()
        } else {
            issues.join("; ")
        },
    );

    let answered = p.successful_queries();
    let consumed = p.consumed_codes();
    check(
        "rule4_queries_match_codes",
        answered == consumed,
        format!(
            "answered {:?} vs consumed {:?}",
            answered.values().collect::<Vec<_>>(),
            consumed.values().collect::<Vec<_>>()
        ),
    );

    let mut gate_issues = probes.gate.clone();
    for e in &p.enclaves {
        for em in e.emissions() {
            if em.bytes > 0 && (em.kind != ProgramKind::Query || !em.registered) {
                gate_issues.push(format!(
                    "{:?} program {} emitted {} bytes",
                    em.kind, em.program_hash, em.bytes
                ));
            }
        }
    }
    check("gate_audit", gate_issues.is_empty(), gate_issues.join("; "));

    let withdrawn_paid = withdrawn_donor_credits(&p.chain);
    check(
        "withdrawn_donors_unpaid",
        withdrawn_paid.is_empty(),
        withdrawn_paid.join("; "),
    );

    let registry = &p.chain.contracts().registry;
    let mut consent_issues = Vec::new();
    for (tag, id) in model_ids {
        let Some(model) = registry.model(id) else {
            continue;
        };
        for o in &owners.actors {
            if !o.policy.consents(tag) && model.donors.iter().any(|d| d.owner == o.id()) {
                consent_issues.push(format!("{} donated to {tag}", o.actor.name));
            }
        }
    }
    check(
        "consent",
        consent_issues.is_empty(),
        consent_issues.join("; "),
    );

    // no plaintext dataset crosses the overlay or the enclave channels
    let magic = b"genie-dataset v1";
    let leaks = p
        .traffic
        .iter()
        .filter(|t| contains(&t.bytes, magic))
        .count()
        + p.delivered
            .iter()
            .filter(|m| contains(&m.payload, magic))
            .count();
    check(
        "plaintext_hygiene",
        leaks == 0,
        format!(
            "{} channel records, {} p2p messages scanned",
            p.traffic.len(),
            p.delivered.len()
        ),
    );

    let mut atomic = probes.atomicity.clone();
    if !p.chain.pending().is_empty() {
        atomic.push(format!(
            "{} transactions pending at end",
            p.chain.pending().len()
        ));
    }
    check("flow_atomicity", atomic.is_empty(), atomic.join("; "));

    check(
        "flows_completed",
        probes.flow_errors.is_empty(),
        probes.flow_errors.join("; "),
    );

    let (tx_counts, failed_txs) = count_txs(p.chain.blocks());
    if !sc.expect.tx_counts.is_empty() {
        let expected: BTreeMap<String, u64> = sc
            .expect
            .tx_counts
            .iter()
            .filter(|(_, n)| **n > 0)
            .map(|(k, n)| (k.clone(), *n))
            .collect();
        check(
            "tx_multiset",
            expected == tx_counts,
            format!("got {tx_counts:?}"),
        );
    }
    check(
        "failed_tx_count",
        failed_txs == sc.expect.failed_txs,
        format!("{failed_txs} failed transactions"),
    );

    if !sc.expect.donors.is_empty() {
        check(
            "donor_counts",
            sc.expect.donors == donors,
            format!("got {donors:?}"),
        );
    }

    let mut data_issues = Vec::new();
    for (spec, o) in owners.specs.iter().zip(&owners.actors) {
        let active = o
            .report
            .as_ref()
            .is_some_and(|r| registry.active_data(&o.id(), &r.hash()));
        let rejected = sc.expect.rejected_data.contains(&spec.name);
        let on_chain = registry.data.iter().any(|d| d.owner == o.id());
        if rejected == on_chain || (!rejected && !active) {
            data_issues.push(format!(
                "{}: active={active} on_chain={on_chain}",
                spec.name
            ));
        }
    }
    check(
        "data_registration",
        data_issues.is_empty(),
        data_issues.join("; "),
    );

    let mut pred_issues = Vec::new();
    for e in &sc.expect.predictions {
        let got: Vec<&Prediction> = predictions
            .iter()
            .filter(|p| p.user == e.user && p.model == e.model)
            .collect();
        if got.is_empty() {
            pred_issues.push(format!("no prediction for {} on {}", e.user, e.model));
        }
        for g in got {
            if g.values.len() != 1 || (g.values[0] - e.value).abs() > e.tolerance {
                pred_issues.push(format!(
                    "{} on {}: {:?} vs {}",
                    e.user, e.model, g.values, e.value
                ));
            }
        }
    }
    if !sc.expect.predictions.is_empty() {
        check(
            "predictions",
            pred_issues.is_empty(),
            pred_issues.join("; "),
        );
    }

    for (tag, id) in model_ids {
        let status = registry.model(id).map(|m| m.status);
        let want = if sc.expect.failed_training.contains(tag) {
            ModelStatus::Training
        } else {
            ModelStatus::Trained
        };
        check(
            &format!("model_status/{tag}"),
            status == Some(want),
            format!("{status:?}"),
        );
    }

    if let Some(n) = sc.expect.reattestations {
        check(
            "reattestation",
            p.reattestations == n,
            format!("{} re-attestations", p.reattestations),
        );
    }
    if let Some((refused, detail)) = &probes.tampered_image {
        check("tampered_image_refused", *refused, detail.clone());
    }
    for (label, refused, detail) in &probes.refusals {
        check(
            &format!("refused/{}", label.replace(' ', "_")),
            *refused,
            detail.clone(),
        );
    }

    let chain_dump = dump_chain(&blocks);
    let trace: String = p.net.trace().iter().map(|t| format!("{t}\n")).collect();
    let passed = inv.iter().all(|i| i.ok());
    let report = RunReport {
        scenario: sc.name.clone(),
        seed: sc.seed,
        chain_dump: None,
        message_trace: None,
        blocks: blocks.len(),
        tx_counts,
        failed_txs,
        donors,
        predictions,
        evaluations,
        flow_log,
        conservation,
        invariants: inv,
        passed,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    RunOutput {
        report,
        blocks,
        chain_dump,
        trace,
        platform: p,
    }
}

/// Donor credits paid after that donor withdrew from the model.
fn withdrawn_donor_credits(chain: &crate::ledger::Chain) -> Vec<String> {
    let codes = &chain.contracts().token.codes;
    let mut withdrawn = BTreeSet::new();
    let mut issues = Vec::new();
    for b in chain.blocks() {
        for (tx, receipt) in b.txs.iter().zip(&b.receipts) {
            if !receipt.ok() {
                continue;
            }
            match tx.payload.decode_call() {
                Ok(Some(Call::WithdrawDonor { model_id })) => {
                    withdrawn.insert((tx.sender, model_id));
                }
                Ok(Some(Call::ConsumeAndDistribute { code_hash, .. })) => {
                    let Some(model) = codes.get(&code_hash).map(|c| c.model_id) else {
                        continue;
                    };
                    for c in receipt.credits.iter().filter(|c| c.role == Role::Donor) {
                        if withdrawn.contains(&(c.recipient, model)) {
                            issues.push(format!(
                                "block {}: {} credited after withdrawal",
                                b.index, c.recipient
                            ));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    issues
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Runs the scenario and writes `chain.dump`, `trace.log`, `report.json`,
/// and `repo/` under `out`.
pub fn run_to_dir(scenario: &Scenario, out: &Path) -> Result<RunOutput, OutputError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| OutputError::Io { path, source }
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut output = run(scenario);
    let dump = out.join("chain.dump");
    let trace = out.join("trace.log");
    let report = out.join("report.json");
    let repo = out.join("repo");
    fs::write(&dump, &output.chain_dump).map_err(io_err(&dump))?;
    fs::write(&trace, &output.trace).map_err(io_err(&trace))?;
    output
        .platform
        .repo
        .export_to_dir(&repo)
        .map_err(io_err(&repo))?;
    output.report.chain_dump = Some(dump.display().to_string());
    output.report.message_trace = Some(trace.display().to_string());
    let json = serde_json::to_string_pretty(&output.report).expect("report serializes");
    fs::write(&report, json + "\n").map_err(io_err(&report))?;
    Ok(output)
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] DumpError),
    #[error("{0}")]
    Invalid(#[from] ChainInvalid),
}

/// Re-validates a chain dump on its own; returns the block count.
pub fn verify_dump(text: &str) -> Result<usize, VerifyError> {
    let blocks = parse_dump(text)?;
    validate_chain(&blocks)?;
    Ok(blocks.len())
}

pub fn verify(path: &Path) -> Result<usize, VerifyError> {
    let text = fs::read_to_string(path).map_err(|source| VerifyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    verify_dump(&text)
}
