//! Dapp-side orchestration: the shared [`Platform`] world and the five data
//! flows (onboarding, data registration, recruiting, training, query).
//!
//! Every flow mines after each chain write and stops at the first failed
//! check, so an aborted flow leaves nothing pending.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{verify_report_for, AttestationReport, CpuIdentity, Ias, ServiceProvider};
use crate::codec::{Decode, Encode};
use crate::contracts::{
    AccountId, Call, CodeStatus, DonorReceipt, EnclaveKind, ModelStatus, SplitSpec,
};
use crate::crypto::{digest, Digest, KeyPair, PublicKey, Rng};
use crate::enclave::{
    channel_request, open_reply, query_body, secure_send, Dataset, Enclave, EnclaveError,
    EnclaveImage, ExportGrant, ModelSpec, ValidationReport, ValidationVerdict, ValidatorConfig,
};
use crate::ledger::{Chain, ChainAccount, LedgerConfig, Receipt};
use crate::p2p::{Network, P2pAccount, P2pMessage, TrainerBinding};
use crate::repository::{verify_anchored, Repository};
use crate::vm::{assemble, Program, ProgramKind, TrainingConfig};

pub type EnclaveId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("{operation} rejected on chain: {reason}")]
    TxFailed { operation: String, reason: String },
    #[error("transaction not accepted: {0}")]
    Submit(String),
    #[error("repository object {0} missing or corrupt")]
    Missing(Digest),
    #[error("hash {0} is not anchored on chain")]
    NotAnchored(Digest),
    #[error("audit report does not cover this package")]
    BadAudit,
    #[error("image does not match the registered measurement")]
    MeasurementMismatch,
    #[error("attestation failed")]
    Attestation,
    #[error("enclave is not a registered {0:?} instance")]
    NotRegistered(EnclaveKind),
    #[error("dataset judged fake by the validator")]
    FakeData,
    #[error("model has no donors")]
    NoDonors,
    #[error("unknown model")]
    UnknownModel,
    #[error("enclave: {0}")]
    Enclave(#[from] EnclaveError),
    #[error("p2p: {0}")]
    P2p(String),
    #[error("malformed message: {0}")]
    Message(String),
    #[error("query program hash is not registered for the model")]
    UnregisteredProgram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Consent {
    #[default]
    Auto,
    Deny,
    ByTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OwnerPolicy {
    #[serde(default)]
    pub whitelist: Vec<String>,
    #[serde(default)]
    pub blacklist: Vec<String>,
    #[serde(default)]
    pub consent: Consent,
}

impl OwnerPolicy {
    pub fn consents(&self, tag: &str) -> bool {
        if self.blacklist.iter().any(|t| t == tag) {
            return false;
        }
        match self.consent {
            Consent::Auto => true,
            Consent::Deny => false,
            Consent::ByTag => self.whitelist.iter().any(|t| t == tag),
        }
    }
}

/// The trainer's broadcast recruiting message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecruitingCall {
    pub model_id: Digest,
    pub tag: String,
    pub required_traits: Vec<String>,
    pub panel: Vec<String>,
    pub price: u64,
    pub split: SplitSpec,
    pub whitepaper_hash: Digest,
}

/// An owner's reply to a recruiting call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Application {
    model_id: Digest,
    report: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Acceptance {
    model_id: Digest,
}

#[derive(Debug, Clone)]
pub struct ChainActor {
    pub name: String,
    pub account: ChainAccount,
}

impl ChainActor {
    pub fn new(name: &str, rng: &Rng) -> Self {
        let mut keys = rng.derive(&format!("actor/{name}"));
        Self {
            name: name.to_string(),
            account: ChainAccount::create(&mut keys),
        }
    }

    pub fn id(&self) -> AccountId {
        self.account.id()
    }
}

#[derive(Debug, Clone)]
pub struct Runner {
    pub actor: ChainActor,
    pub cpu: CpuIdentity,
    pub enclaves: Vec<EnclaveId>,
}

#[derive(Debug, Clone)]
pub struct DataOwner {
    pub actor: ChainActor,
    pub p2p: P2pAccount,
    pub dataset: Dataset,
    pub policy: OwnerPolicy,
    /// Re-attest the training enclave when its report is older than this.
    pub max_attestation_age: Option<u64>,
    pub report: Option<ValidationReport>,
    pub processed: Option<Dataset>,
    pub receipts: Vec<DonorReceipt>,
}

impl DataOwner {
    pub fn new(name: &str, dataset: Dataset, policy: OwnerPolicy, rng: &Rng) -> Self {
        let mut p2p_keys = rng.derive(&format!("p2p/{name}"));
        Self {
            actor: ChainActor::new(name, rng),
            p2p: P2pAccount::create(&mut p2p_keys),
            dataset,
            policy,
            max_attestation_age: None,
            report: None,
            processed: None,
            receipts: Vec::new(),
        }
    }

    pub fn id(&self) -> AccountId {
        self.actor.id()
    }

    /// Covers the panel and has every required trait.
    pub fn matches(&self, call: &RecruitingCall) -> bool {
        call.panel.iter().all(|r| self.dataset.dosage(r).is_some())
            && call
                .required_traits
                .iter()
                .all(|t| self.dataset.phenotype.contains_key(t))
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub actor: ChainActor,
    pub p2p: P2pAccount,
}

impl Trainer {
    pub fn new(name: &str, rng: &Rng) -> Self {
        let mut p2p_keys = rng.derive(&format!("p2p/{name}"));
        Self {
            actor: ChainActor::new(name, rng),
            p2p: P2pAccount::create(&mut p2p_keys),
        }
    }
}

/// Ciphertext that crossed a module boundary.
#[derive(Debug, Clone)]
pub struct TrafficRecord {
    pub tick: u64,
    pub channel: &'static str,
    pub to: PublicKey,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingAudit {
    pub model_id: Digest,
    pub enclave: EnclaveId,
    pub held_after: usize,
    pub external_bytes: u64,
    pub succeeded: bool,
}

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    pub ledger: LedgerConfig,
    pub stores: Vec<String>,
    pub mirrors: usize,
    pub miners: usize,
    pub allocations: Vec<(AccountId, u64)>,
    pub validator: ValidatorConfig,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            ledger: LedgerConfig::default(),
            stores: crate::repository::DEFAULT_STORES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            mirrors: 2,
            miners: 3,
            allocations: Vec::new(),
            validator: ValidatorConfig::default(),
        }
    }
}

/// Everything the actors share: chain, attestation service, repository,
/// overlay, enclaves, and the audit logs the harness checks.
pub struct Platform {
    pub rng: Rng,
    pub clock: u64,
    pub chain: Chain,
    pub ias: Ias,
    pub sp: ServiceProvider,
    pub repo: Repository,
    pub net: Network,
    pub enclaves: Vec<Enclave>,
    pub validator: ValidatorConfig,
    pub traffic: Vec<TrafficRecord>,
    pub delivered: Vec<P2pMessage>,
    pub issued_receipts: Vec<(DonorReceipt, ValidationReport)>,
    pub training_audits: Vec<TrainingAudit>,
    pub conservation_violations: Vec<u64>,
    pub reattestations: u64,
    mirrors: usize,
    miners: Vec<KeyPair>,
    next_miner: usize,
    nonce_counter: u64,
}

impl Platform {
    pub fn new(seed: u64, cfg: PlatformConfig) -> Self {
        let rng = Rng::new(seed);
        let mut ias_rng = rng.derive("ias");
        let mut miner_rng = rng.derive("miners");
        let stores: Vec<&str> = cfg.stores.iter().map(|s| s.as_str()).collect();
        Self {
            clock: 0,
            chain: Chain::new(cfg.ledger, &cfg.allocations),
            ias: Ias::new(&mut ias_rng),
            sp: ServiceProvider::new(),
            repo: Repository::new(&stores),
            net: Network::new(),
            enclaves: Vec::new(),
            validator: cfg.validator,
            traffic: Vec::new(),
            delivered: Vec::new(),
            issued_receipts: Vec::new(),
            training_audits: Vec::new(),
            conservation_violations: Vec::new(),
            reattestations: 0,
            mirrors: cfg.mirrors,
            miners: (0..cfg.miners.max(1))
                .map(|_| KeyPair::generate(&mut miner_rng))
                .collect(),
            next_miner: 0,
            nonce_counter: 0,
            rng,
        }
    }

    pub fn stream(&self, label: &str) -> Rng {
        self.rng.derive(label)
    }

    pub fn manufacture_cpu(&mut self, label: &str) -> CpuIdentity {
        let mut r = self.rng.derive(&format!("cpu/{label}"));
        self.ias.manufacture_cpu(&mut r)
    }

    /// Mines one block with the next miner in the rotation.
    pub fn mine(&mut self) -> u64 {
        let miner = &self.miners[self.next_miner % self.miners.len()];
        self.next_miner += 1;
        self.clock += 1;
        let idx = self.chain.mine_block(miner, self.clock).index;
        if !self.chain.contracts().token.conserved() {
            self.conservation_violations.push(idx);
        }
        idx
    }

    /// Submits, mines, and checks the receipt.
    pub fn commit(
        &mut self,
        account: &mut ChainAccount,
        call: &Call,
    ) -> Result<Receipt, FlowError> {
        let tx = account.call(call);
        let hash = tx.hash();
        self.chain
            .submit_tx(tx)
            .map_err(|e| FlowError::Submit(format!("{e:?}")))?;
        self.mine();
        let receipt = self
            .chain
            .receipt_for(&hash)
            .cloned()
            .expect("mined transaction has a receipt");
        match &receipt.status {
            crate::ledger::TxStatus::Ok => Ok(receipt),
            crate::ledger::TxStatus::Failed(reason) => Err(FlowError::TxFailed {
                operation: call.operation().to_string(),
                reason: reason.clone(),
            }),
        }
    }

    pub fn put(&mut self, bytes: &[u8]) -> Digest {
        self.repo
            .put(bytes, self.mirrors)
            .expect("mirror count validated at load")
    }

    fn fetch(&self, hash: &Digest) -> Result<Vec<u8>, FlowError> {
        self.repo.get(hash).ok_or(FlowError::Missing(*hash))
    }

    fn fresh_nonce(&mut self) -> Digest {
        self.nonce_counter += 1;
        self.rng
            .derive(&format!("nonce/{}", self.nonce_counter))
            .bytes32()
            .into()
    }

    fn log_traffic(&mut self, channel: &'static str, to: PublicKey, bytes: &[u8]) {
        self.traffic.push(TrafficRecord {
            tick: self.clock,
            channel,
            to,
            bytes: bytes.to_vec(),
        });
    }

    pub fn enclave(&self, id: EnclaveId) -> &Enclave {
        &self.enclaves[id]
    }

    pub fn enclave_by_key(&self, key: &PublicKey) -> Option<EnclaveId> {
        self.enclaves.iter().position(|e| e.public() == *key)
    }

    fn drain(&mut self, p2p: &P2pAccount) -> Vec<P2pMessage> {
        let msgs = self.net.drain_inbox(&p2p.id());
        self.delivered.extend(msgs.iter().cloned());
        msgs
    }

    /// Relying-party check of an enclave: registered with the expected kind,
    /// attestation record present, anchored, and valid for the registered
    /// measurement and key. With `max_age`, an old report triggers a fresh
    /// challenge-response attestation.
    pub fn verify_enclave(
        &mut self,
        key: &PublicKey,
        kind: EnclaveKind,
        max_age: Option<u64>,
    ) -> Result<(), FlowError> {
        let inst = self
            .chain
            .contracts()
            .registry
            .instance(key)
            .filter(|i| i.kind == kind)
            .cloned()
            .ok_or(FlowError::NotRegistered(kind))?;
        if !verify_anchored(&inst.ias_report_hash, &self.chain) {
            return Err(FlowError::NotAnchored(inst.ias_report_hash));
        }
        let record = self.fetch(&inst.ias_report_hash)?;
        let text = String::from_utf8(record).map_err(|_| FlowError::Attestation)?;
        let report = AttestationReport::from_record(&text).map_err(|_| FlowError::Attestation)?;
        if !verify_report_for(
            &report,
            &self.ias.public(),
            &report.nonce,
            &inst.measurement,
            key,
        ) {
            return Err(FlowError::Attestation);
        }
        if let Some(age) = max_age {
            if self.clock.saturating_sub(report.timestamp) > age {
                let id = self.enclave_by_key(key).ok_or(FlowError::Attestation)?;
                let nonce = self.fresh_nonce();
                let quote = self.enclaves[id]
                    .quote(nonce)
                    .map_err(|_| FlowError::Attestation)?;
                let fresh = self.sp.forward(&self.ias, &quote, self.clock);
                self.reattestations += 1;
                if !verify_report_for(&fresh, &self.ias.public(), &nonce, &inst.measurement, key) {
                    return Err(FlowError::Attestation);
                }
            }
        }
        Ok(())
    }

    /// Flow A. The developer publishes source and image, the auditor reviews
    /// and registers an audit, and the runner verifies the audits, launches
    /// one enclave per kind, attests it, and registers it.
    pub fn flow_enclave_onboarding(
        &mut self,
        developer: &mut ChainActor,
        auditor: Option<&mut ChainActor>,
        runner: &mut Runner,
        image: &EnclaveImage,
        kinds: &[EnclaveKind],
        launched_image: Option<&EnclaveImage>,
    ) -> Result<Vec<EnclaveId>, FlowError> {
        let source = format!("genie enclave source v{}\n", image.version);
        let source_hash = self.put(source.as_bytes());
        let measurement = digest(&image.bytes());
        self.put(&image.bytes());
        let registered = self
            .chain
            .contracts()
            .registry
            .packages
            .contains_key(&measurement);
        if !registered {
            self.commit(
                &mut developer.account,
                &Call::RegisterPackage {
                    source_hash,
                    measurement,
                },
            )?;
        }

        if let Some(auditor) = auditor {
            let src = self.fetch(&source_hash)?;
            let img = self.fetch(&measurement)?;
            if digest(&img) != measurement {
                return Err(FlowError::MeasurementMismatch);
            }
            let audit = format!(
                "audit package={measurement} source={} auditor={} verdict=pass\n",
                digest(&src),
                auditor.id()
            );
            let report_hash = self.put(audit.as_bytes());
            self.commit(
                &mut auditor.account,
                &Call::RegisterAudit {
                    measurement,
                    report_hash,
                },
            )?;
        }

        // runner reviews every audit against the registration record
        let package = self
            .chain
            .contracts()
            .registry
            .packages
            .get(&measurement)
            .cloned();
        for audit in package.iter().flat_map(|p| &p.audits) {
            if !verify_anchored(&audit.report_hash, &self.chain) {
                return Err(FlowError::NotAnchored(audit.report_hash));
            }
            let text = String::from_utf8(self.fetch(&audit.report_hash)?)
                .map_err(|_| FlowError::BadAudit)?;
            if !text.contains(&format!("package={measurement}")) || !text.contains("verdict=pass") {
                return Err(FlowError::BadAudit);
            }
        }
        let img = self.fetch(&measurement)?;
        if digest(&img) != measurement {
            return Err(FlowError::MeasurementMismatch);
        }

        let to_launch = launched_image.unwrap_or(image).clone();
        let mut ids = Vec::new();
        for kind in kinds {
            let mut r = self.rng.derive(&format!(
                "launch/{}/{}",
                runner.actor.name,
                self.enclaves.len()
            ));
            let enclave = Enclave::launch(&runner.cpu, &to_launch, *kind, &mut r)
                .with_validator(self.validator.clone());
            let nonce = self.fresh_nonce();
            let quote = enclave.quote(nonce).map_err(|_| FlowError::Attestation)?;
            let report = self.sp.forward(&self.ias, &quote, self.clock);
            if !verify_report_for(
                &report,
                &self.ias.public(),
                &nonce,
                &report.measurement,
                &enclave.public(),
            ) {
                return Err(FlowError::Attestation);
            }
            if report.measurement != measurement {
                return Err(FlowError::MeasurementMismatch);
            }
            let ias_report_hash = self.put(report.to_record().as_bytes());
            let call = Call::RegisterInstance {
                measurement,
                enclave_pubkey: enclave.public(),
                ias_report_hash,
                kind: *kind,
            };
            self.commit(&mut runner.actor.account, &call)?;
            self.enclaves.push(enclave);
            let id = self.enclaves.len() - 1;
            runner.enclaves.push(id);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Flow B. Returns the registered report hash.
    pub fn flow_data_registration(
        &mut self,
        owner: &mut DataOwner,
        validator: EnclaveId,
    ) -> Result<Digest, FlowError> {
        let key = self.enclaves[validator].public();
        self.verify_enclave(&key, EnclaveKind::Validation, None)?;
        let mut r = self.rng.derive(&format!(
            "channel/{}/{}",
            owner.actor.name,
            self.traffic.len()
        ));
        let (request, reply) =
            channel_request(&key, owner.dataset.canonical_text().as_bytes(), &mut r)
                .map_err(|e| FlowError::Enclave(e.into()))?;
        self.log_traffic("validate-request", key, &request);
        let resp = self.enclaves[validator].validate_data(&request)?;
        self.log_traffic("validate-response", owner.p2p.id(), &resp.processed);
        let processed =
            open_reply(&reply, &resp.processed).map_err(|e| FlowError::Enclave(e.into()))?;
        let processed = String::from_utf8(processed)
            .map_err(|_| FlowError::Message("processed data".into()))?;
        owner.processed =
            Some(Dataset::parse(&processed, &owner.dataset.owner_tag).map_err(EnclaveError::from)?);
        if resp.report.verdict != ValidationVerdict::Valid {
            owner.report = Some(resp.report);
            return Err(FlowError::FakeData);
        }
        let report_hash = resp.report.hash();
        owner.report = Some(resp.report);
        self.commit(
            &mut owner.actor.account,
            &Call::RegisterData { report_hash },
        )?;
        Ok(report_hash)
    }

    /// Publishes the whitepaper and query program, registers the model and
    /// its query program. Returns the model id and recruiting call.
    #[allow(clippy::too_many_arguments)]
    pub fn register_model(
        &mut self,
        trainer: &mut Trainer,
        tag: &str,
        spec: &ModelSpec,
        required_traits: &[String],
        training_enclave: EnclaveId,
        price: u64,
        split: SplitSpec,
        query_program: &Program,
    ) -> Result<RecruitingCall, FlowError> {
        let whitepaper = format!(
            "model tag={tag}\npanel={}\ntarget={}\ntraits={}\nprice={price}\nsplit={}/{}/{}\n",
            spec.panel.join(","),
            spec.target_trait,
            required_traits.join(","),
            split.trainer_bp,
            split.runner_bp,
            split.donor_pool_bp,
        );
        let whitepaper_hash = self.put(whitepaper.as_bytes());
        let program_hash = self.put(query_program.text.as_bytes());
        debug_assert_eq!(program_hash, query_program.program_hash);
        let training = self.enclaves[training_enclave].public();
        let receipt = self.commit(
            &mut trainer.actor.account,
            &Call::RegisterModel {
                whitepaper_hash,
                training_enclave: training,
                price,
                split,
            },
        )?;
        let model_id = receipt.model_id.ok_or(FlowError::UnknownModel)?;
        self.commit(
            &mut trainer.actor.account,
            &Call::RegisterQueryProgram {
                model_id,
                program_hash,
            },
        )?;
        Ok(RecruitingCall {
            model_id,
            tag: tag.to_string(),
            required_traits: required_traits.to_vec(),
            panel: spec.panel.clone(),
            price,
            split,
            whitepaper_hash,
        })
    }

    /// Flow C. Returns the owners (by index) who became donors.
    pub fn flow_model_recruiting(
        &mut self,
        trainer: &mut Trainer,
        call: &RecruitingCall,
        owners: &mut [DataOwner],
    ) -> Result<Vec<usize>, FlowError> {
        let model = self
            .chain
            .contracts()
            .registry
            .model(&call.model_id)
            .cloned()
            .ok_or(FlowError::UnknownModel)?;
        if model.status != ModelStatus::Recruiting {
            return Err(FlowError::TxFailed {
                operation: "recruit".into(),
                reason: "model not recruiting".into(),
            });
        }
        let binding = TrainerBinding::create(trainer.actor.account.keys(), &trainer.p2p.id());
        let payload = serde_json::to_vec(call).expect("recruiting call serializes");
        self.net
            .send_broadcast(&trainer.p2p, &payload, Some(binding), &self.chain)
            .map_err(|e| FlowError::P2p(e.to_string()))?;

        // owners are visited in a seed-derived order
        let mut order: Vec<usize> = (0..owners.len()).collect();
        order.shuffle(
            &mut self
                .rng
                .derive(&format!("schedule/recruit/{}", call.model_id)),
        );

        let mut applicants = Vec::new();
        for &i in &order {
            let owner = &owners[i];
            let msgs = self.drain(&owner.p2p);
            for m in msgs.iter().filter(|m| m.binding.is_some()) {
                let Ok(rc) = serde_json::from_slice::<RecruitingCall>(&m.payload) else {
                    continue;
                };
                if rc.model_id != call.model_id {
                    continue;
                }
                if !owner.policy.consents(&rc.tag) || !owner.matches(&rc) {
                    continue;
                }
                let anchored = verify_anchored(&rc.whitepaper_hash, &self.chain)
                    && self.repo.get(&rc.whitepaper_hash).is_some();
                let Some(report) = owner.report.as_ref().filter(|_| anchored) else {
                    continue;
                };
                let app = Application {
                    model_id: rc.model_id,
                    report: hex::encode(report.to_bytes()),
                };
                let body = serde_json::to_vec(&app).expect("application serializes");
                self.net
                    .send_unicast(&owner.p2p, &m.sender, &body)
                    .map_err(|e| FlowError::P2p(e.to_string()))?;
                applicants.push(i);
            }
        }

        // trainer screens applications
        let inbox = self.drain(&trainer.p2p);
        let mut accepted = Vec::new();
        for m in inbox {
            let Ok(app) = serde_json::from_slice::<Application>(&m.payload) else {
                continue;
            };
            let Some(report) = hex::decode(&app.report)
                .ok()
                .and_then(|b| ValidationReport::from_bytes(&b).ok())
            else {
                continue;
            };
            let validator_ok = self
                .chain
                .contracts()
                .registry
                .instance(&report.enclave_sig.signer)
                .is_some_and(|i| i.kind == EnclaveKind::Validation);
            if app.model_id == call.model_id
                && report.signature_valid()
                && validator_ok
                && self
                    .chain
                    .contracts()
                    .registry
                    .report_active(&report.hash())
            {
                let ack = serde_json::to_vec(&Acceptance {
                    model_id: app.model_id,
                })
                .expect("serializes");
                self.net
                    .send_unicast(&trainer.p2p, &m.sender, &ack)
                    .map_err(|e| FlowError::P2p(e.to_string()))?;
                accepted.push(m.sender);
            }
        }

        let training_key = model.training_enclave;
        let training_id = self
            .enclave_by_key(&training_key)
            .ok_or(FlowError::NotRegistered(EnclaveKind::Training))?;
        let mut donors = Vec::new();
        for i in applicants {
            let msgs = self.drain(&owners[i].p2p);
            let acked = msgs.iter().any(|m| {
                serde_json::from_slice::<Acceptance>(&m.payload)
                    .is_ok_and(|a| a.model_id == call.model_id)
            });
            if !acked {
                continue;
            }
            if self
                .donate(&mut owners[i], call.model_id, training_id)
                .is_ok()
            {
                donors.push(i);
            }
        }
        Ok(donors)
    }

    /// Owner side of recruiting once accepted: verify the training enclave,
    /// send the data, register the receipt.
    fn donate(
        &mut self,
        owner: &mut DataOwner,
        model_id: Digest,
        training: EnclaveId,
    ) -> Result<(), FlowError> {
        let key = self.enclaves[training].public();
        self.verify_enclave(&key, EnclaveKind::Training, owner.max_attestation_age)?;
        let report = owner.report.clone().ok_or(FlowError::FakeData)?;
        let data = owner
            .processed
            .clone()
            .unwrap_or_else(|| owner.dataset.clone());
        let mut r = self.rng.derive(&format!(
            "channel/{}/{}",
            owner.actor.name,
            self.traffic.len()
        ));
        let ct = secure_send(&key, data.canonical_text().as_bytes(), &mut r)
            .map_err(|e| FlowError::Enclave(e.into()))?;
        self.log_traffic("donate", key, &ct);
        let receipt = self.enclaves[training].ingest_donor_data(
            &ct,
            &report,
            owner.id(),
            model_id,
            &self.chain,
        )?;
        self.issued_receipts.push((receipt, report));
        owner.receipts.push(receipt);
        self.commit(
            &mut owner.actor.account,
            &Call::RegisterDonor { model_id, receipt },
        )?;
        Ok(())
    }

    /// Flow D: Training status, in-enclave training, optional paid
    /// evaluation query by the trainer, Trained with a runner enclave, and
    /// model handoff to that enclave.
    #[allow(clippy::too_many_arguments)]
    pub fn flow_training(
        &mut self,
        trainer: &mut Trainer,
        model_id: Digest,
        program: &Program,
        spec: &ModelSpec,
        cfg: &TrainingConfig,
        runner_enclave: EnclaveId,
        evaluation: Option<(&Dataset, &Program)>,
    ) -> Result<Option<Vec<f64>>, FlowError> {
        let model = self
            .chain
            .contracts()
            .registry
            .model(&model_id)
            .cloned()
            .ok_or(FlowError::UnknownModel)?;
        if model.donors.iter().all(|d| d.withdrawn) {
            return Err(FlowError::NoDonors);
        }
        let training = self
            .enclave_by_key(&model.training_enclave)
            .ok_or(FlowError::UnknownModel)?;
        self.commit(
            &mut trainer.actor.account,
            &Call::SetModelStatus {
                model_id,
                status: ModelStatus::Training,
                runner_enclave: None,
            },
        )?;
        let result = self.enclaves[training].train(model_id, program, spec, cfg, &self.chain);
        let e = &self.enclaves[training];
        self.training_audits.push(TrainingAudit {
            model_id,
            enclave: training,
            held_after: e.held_for_model(&model_id),
            external_bytes: e.external_output_bytes(),
            succeeded: result.is_ok(),
        });
        result?;

        let mut evaluated = None;
        if let Some((data, qprog)) = evaluation {
            let secret = self.purchase(&mut trainer.actor, model_id, model.price)?;
            evaluated = Some(self.query_enclave(
                &trainer.actor.name,
                training,
                model_id,
                &secret,
                data,
                qprog,
            )?);
        }

        let runner_key = self.enclaves[runner_enclave].public();
        self.commit(
            &mut trainer.actor.account,
            &Call::SetModelStatus {
                model_id,
                status: ModelStatus::Trained,
                runner_enclave: Some(runner_key),
            },
        )?;
        if runner_enclave != training {
            let importer = &self.enclaves[runner_enclave];
            let grant = ExportGrant::create(
                trainer.actor.account.keys(),
                model_id,
                importer.measurement(),
                runner_key,
            );
            let blob = self.enclaves[training].export_trained(&grant, &self.chain)?;
            self.log_traffic("model-export", runner_key, &blob.ciphertext);
            self.enclaves[runner_enclave].import_trained(&blob)?;
        }
        Ok(evaluated)
    }

    /// Buys an access code; returns the secret.
    pub fn purchase(
        &mut self,
        buyer: &mut ChainActor,
        model_id: Digest,
        amount: u64,
    ) -> Result<Vec<u8>, FlowError> {
        let secret = self
            .rng
            .derive(&format!("code/{}/{}", buyer.name, self.clock))
            .bytes32()
            .to_vec();
        let call = Call::PurchaseAccessCode {
            model_id,
            code_hash: digest(&secret),
            amount,
        };
        self.commit(&mut buyer.account, &call)?;
        Ok(secret)
    }

    /// Sends a query over the secure channel, mines the consume
    /// transaction, and decrypts the prediction.
    pub fn query_enclave(
        &mut self,
        who: &str,
        enclave: EnclaveId,
        model_id: Digest,
        secret: &[u8],
        data: &Dataset,
        program: &Program,
    ) -> Result<Vec<f64>, FlowError> {
        let key = self.enclaves[enclave].public();
        let mut r = self
            .rng
            .derive(&format!("channel/{who}/{}", self.traffic.len()));
        let (request, reply) = channel_request(&key, &query_body(&model_id, secret, data), &mut r)
            .map_err(|e| FlowError::Enclave(e.into()))?;
        self.log_traffic("query-request", key, &request);
        let resp = self.enclaves[enclave].query(&request, program, &mut self.chain)?;
        self.log_traffic("query-response", PublicKey::default(), &resp.ciphertext);
        self.mine();
        let code = self
            .chain
            .contracts()
            .verify_payment(&resp.code_hash)
            .map(|c| c.status);
        if code != Some(CodeStatus::Consumed) {
            return Err(FlowError::TxFailed {
                operation: "consume_and_distribute".into(),
                reason: format!("{code:?}"),
            });
        }
        let plain =
            open_reply(&reply, &resp.ciphertext).map_err(|e| FlowError::Enclave(e.into()))?;
        Ok(plain
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    /// Flow E. Registers the user's data first if needed.
    pub fn flow_query(
        &mut self,
        user: &mut DataOwner,
        model_id: Digest,
        validator: EnclaveId,
        program_hash: Digest,
    ) -> Result<Vec<f64>, FlowError> {
        let active = user.report.as_ref().is_some_and(|r| {
            self.chain
                .contracts()
                .registry
                .active_data(&user.id(), &r.hash())
        });
        if !active {
            self.flow_data_registration(user, validator)?;
        }
        let model = self
            .chain
            .contracts()
            .registry
            .model(&model_id)
            .cloned()
            .ok_or(FlowError::UnknownModel)?;
        if !model.query_programs.contains(&program_hash) {
            return Err(FlowError::UnregisteredProgram);
        }
        let text = String::from_utf8(self.fetch(&program_hash)?)
            .map_err(|_| FlowError::Missing(program_hash))?;
        let program =
            assemble(&text, ProgramKind::Query).map_err(|_| FlowError::Missing(program_hash))?;
        let runner = model
            .runner_enclave
            .ok_or(FlowError::NotRegistered(EnclaveKind::Query))?;
        self.verify_enclave(&runner, EnclaveKind::Query, None)?;
        let id = self
            .enclave_by_key(&runner)
            .ok_or(FlowError::NotRegistered(EnclaveKind::Query))?;
        let secret = self.purchase(&mut user.actor, model_id, model.price)?;
        let data = user
            .processed
            .clone()
            .unwrap_or_else(|| user.dataset.clone());
        let name = user.actor.name.clone();
        self.query_enclave(&name, id, model_id, &secret, &data, &program)
    }

    /// Successful queries per model, summed over all enclaves.
    pub fn successful_queries(&self) -> BTreeMap<Digest, u64> {
        let mut out = BTreeMap::new();
        for e in &self.enclaves {
            for (m, n) in e.successful_queries() {
                *out.entry(*m).or_default() += n;
            }
        }
        out
    }

    /// Consumed access codes per model on the mined chain.
    pub fn consumed_codes(&self) -> BTreeMap<Digest, u64> {
        let mut out = BTreeMap::new();
        for c in self.chain.contracts().token.codes.values() {
            if c.status == CodeStatus::Consumed {
                *out.entry(c.model_id).or_default() += 1;
            }
        }
        out
    }
}

impl From<[u8; 32]> for Digest {
    fn from(b: [u8; 32]) -> Self {
        Digest(b)
    }
}
