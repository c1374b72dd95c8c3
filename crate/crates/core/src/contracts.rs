//! The Registry and Token contracts executed by the ledger.
//!
//! Calls travel inside transactions as `(contract, operation, args)` where
//! `args` is the canonical encoding of the call's fields in declaration
//! order. Execution is deterministic and only ever happens inside
//! [`crate::ledger::Chain::mine_block`]; the ledger restores the previous
//! state when a call fails, so a failed call never leaves partial effects.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};
use crate::crypto::{digest, digest_parts, verify, Digest, PublicKey, Signature};

pub type AccountId = PublicKey;

pub const REGISTRY: &str = "registry";
pub const TOKEN: &str = "token";
pub const BASIS_POINTS: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum EnclaveKind {
    Validation,
    Training,
    Query,
}

impl EnclaveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnclaveKind::Validation => "validation",
            EnclaveKind::Training => "training",
            EnclaveKind::Query => "query",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        [Self::Validation, Self::Training, Self::Query]
            .get(t as usize)
            .copied()
    }
}

impl Encode for EnclaveKind {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.tag());
    }
}

impl Decode for EnclaveKind {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let t = dec.u8()?;
        Self::from_tag(t).ok_or_else(|| dec.err(format!("invalid enclave kind {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ModelStatus {
    Recruiting,
    Training,
    Trained,
}

impl ModelStatus {
    fn from_tag(t: u8) -> Option<Self> {
        [Self::Recruiting, Self::Training, Self::Trained]
            .get(t as usize)
            .copied()
    }

    /// The only legal successor.
    pub fn next(self) -> Option<Self> {
        match self {
            Self::Recruiting => Some(Self::Training),
            Self::Training => Some(Self::Trained),
            Self::Trained => None,
        }
    }
}

impl Encode for ModelStatus {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(*self as u8);
    }
}

impl Decode for ModelStatus {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let t = dec.u8()?;
        Self::from_tag(t).ok_or_else(|| dec.err(format!("invalid model status {t}")))
    }
}

/// Revenue split in basis points; must sum to exactly 10000.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub trainer_bp: u32,
    pub runner_bp: u32,
    pub donor_pool_bp: u32,
}

impl SplitSpec {
    pub fn is_valid(&self) -> bool {
        self.trainer_bp as u64 + self.runner_bp as u64 + self.donor_pool_bp as u64
            == BASIS_POINTS as u64
    }
}

impl Encode for SplitSpec {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.trainer_bp)
            .u32(self.runner_bp)
            .u32(self.donor_pool_bp);
    }
}

impl Decode for SplitSpec {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            trainer_bp: dec.u32()?,
            runner_bp: dec.u32()?,
            donor_pool_bp: dec.u32()?,
        })
    }
}

/// Training-enclave proof that an owner's validated data was ingested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DonorReceipt {
    pub model_id: Digest,
    pub owner: AccountId,
    pub quality: u8,
    pub enclave_sig: Signature,
}

impl DonorReceipt {
    pub fn signed_message(model_id: &Digest, owner: &AccountId, quality: u8) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/donor-receipt");
        enc.put(model_id).put(owner).u8(quality);
        enc.finish()
    }

    pub fn verify(&self, enclave: &PublicKey) -> bool {
        verify(
            enclave,
            &Self::signed_message(&self.model_id, &self.owner, self.quality),
            &self.enclave_sig,
        )
    }

    pub fn hash(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

impl Encode for DonorReceipt {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.model_id)
            .put(&self.owner)
            .u8(self.quality)
            .put(&self.enclave_sig);
    }
}

impl Decode for DonorReceipt {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            model_id: dec.get()?,
            owner: dec.get()?,
            quality: dec.u8()?,
            enclave_sig: dec.get()?,
        })
    }
}

/// Message an enclave signs to authorize consuming an access code.
pub fn consume_message(code_hash: &Digest) -> Vec<u8> {
    let mut enc = Encoder::tagged("genie/consume");
    enc.put(code_hash);
    enc.finish()
}

pub fn model_id_for(whitepaper_hash: &Digest, trainer: &AccountId) -> Digest {
    digest_parts(&[b"genie/model", &whitepaper_hash.0, &trainer.0])
}

/// Every contract operation. Field order here is the wire order of `args`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Call {
    RegisterPackage {
        source_hash: Digest,
        measurement: Digest,
    },
    RegisterAudit {
        measurement: Digest,
        report_hash: Digest,
    },
    RegisterInstance {
        measurement: Digest,
        enclave_pubkey: PublicKey,
        ias_report_hash: Digest,
        kind: EnclaveKind,
    },
    RegisterData {
        report_hash: Digest,
    },
    WithdrawData {
        report_hash: Digest,
    },
    RegisterModel {
        whitepaper_hash: Digest,
        training_enclave: PublicKey,
        price: u64,
        split: SplitSpec,
    },
    RegisterQueryProgram {
        model_id: Digest,
        program_hash: Digest,
    },
    RegisterDonor {
        model_id: Digest,
        receipt: DonorReceipt,
    },
    WithdrawDonor {
        model_id: Digest,
    },
    SetModelStatus {
        model_id: Digest,
        status: ModelStatus,
        runner_enclave: Option<PublicKey>,
    },
    PurchaseAccessCode {
        model_id: Digest,
        code_hash: Digest,
        amount: u64,
    },
    ConsumeAndDistribute {
        code_hash: Digest,
        enclave_sig: Signature,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallDecodeError {
    #[error("unknown contract operation {contract}.{operation}")]
    UnknownOperation { contract: String, operation: String },
    #[error("malformed arguments: {0}")]
    Args(#[from] DecodeError),
}

impl Call {
    pub fn contract(&self) -> &'static str {
        match self {
            Call::PurchaseAccessCode { .. } | Call::ConsumeAndDistribute { .. } => TOKEN,
            _ => REGISTRY,
        }
    }

    pub fn operation(&self) -> &'static str {
        match self {
            Call::RegisterPackage { .. } => "register_package",
            Call::RegisterAudit { .. } => "register_audit",
            Call::RegisterInstance { .. } => "register_instance",
            Call::RegisterData { .. } => "register_data",
            Call::WithdrawData { .. } => "withdraw_data",
            Call::RegisterModel { .. } => "register_model",
            Call::RegisterQueryProgram { .. } => "register_query_program",
            Call::RegisterDonor { .. } => "register_donor",
            Call::WithdrawDonor { .. } => "withdraw_donor",
            Call::SetModelStatus { .. } => "set_model_status",
            Call::PurchaseAccessCode { .. } => "purchase_access_code",
            Call::ConsumeAndDistribute { .. } => "consume_and_distribute",
        }
    }

    pub fn args(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            Call::RegisterPackage {
                source_hash,
                measurement,
            } => e.put(source_hash).put(measurement),
            Call::RegisterAudit {
                measurement,
                report_hash,
            } => e.put(measurement).put(report_hash),
            Call::RegisterInstance {
                measurement,
                enclave_pubkey,
                ias_report_hash,
                kind,
            } => e
                .put(measurement)
                .put(enclave_pubkey)
                .put(ias_report_hash)
                .put(kind),
            Call::RegisterData { report_hash } | Call::WithdrawData { report_hash } => {
                e.put(report_hash)
            }
            Call::RegisterModel {
                whitepaper_hash,
                training_enclave,
                price,
                split,
            } => e
                .put(whitepaper_hash)
                .put(training_enclave)
                .u64(*price)
                .put(split),
            Call::RegisterQueryProgram {
                model_id,
                program_hash,
            } => e.put(model_id).put(program_hash),
            Call::RegisterDonor { model_id, receipt } => e.put(model_id).put(receipt),
            Call::WithdrawDonor { model_id } => e.put(model_id),
            Call::SetModelStatus {
                model_id,
                status,
                runner_enclave,
            } => e.put(model_id).put(status).put(runner_enclave),
            Call::PurchaseAccessCode {
                model_id,
                code_hash,
                amount,
            } => e.put(model_id).put(code_hash).u64(*amount),
            Call::ConsumeAndDistribute {
                code_hash,
                enclave_sig,
            } => e.put(code_hash).put(enclave_sig),
        };
        e.finish()
    }

    pub fn from_parts(
        contract: &str,
        operation: &str,
        args: &[u8],
    ) -> Result<Call, CallDecodeError> {
        let mut d = Decoder::new(args);
        let call = match (contract, operation) {
            (REGISTRY, "register_package") => Call::RegisterPackage {
                source_hash: d.get()?,
                measurement: d.get()?,
            },
            (REGISTRY, "register_audit") => Call::RegisterAudit {
                measurement: d.get()?,
                report_hash: d.get()?,
            },
            (REGISTRY, "register_instance") => Call::RegisterInstance {
                measurement: d.get()?,
                enclave_pubkey: d.get()?,
                ias_report_hash: d.get()?,
                kind: d.get()?,
            },
            (REGISTRY, "register_data") => Call::RegisterData {
                report_hash: d.get()?,
            },
            (REGISTRY, "withdraw_data") => Call::WithdrawData {
                report_hash: d.get()?,
            },
            (REGISTRY, "register_model") => Call::RegisterModel {
                whitepaper_hash: d.get()?,
                training_enclave: d.get()?,
                price: d.u64()?,
                split: d.get()?,
            },
            (REGISTRY, "register_query_program") => Call::RegisterQueryProgram {
                model_id: d.get()?,
                program_hash: d.get()?,
            },
            (REGISTRY, "register_donor") => Call::RegisterDonor {
                model_id: d.get()?,
                receipt: d.get()?,
            },
            (REGISTRY, "withdraw_donor") => Call::WithdrawDonor { model_id: d.get()? },
            (REGISTRY, "set_model_status") => Call::SetModelStatus {
                model_id: d.get()?,
                status: d.get()?,
                runner_enclave: d.get()?,
            },
            (TOKEN, "purchase_access_code") => Call::PurchaseAccessCode {
                model_id: d.get()?,
                code_hash: d.get()?,
                amount: d.u64()?,
            },
            (TOKEN, "consume_and_distribute") => Call::ConsumeAndDistribute {
                code_hash: d.get()?,
                enclave_sig: d.get()?,
            },
            _ => {
                return Err(CallDecodeError::UnknownOperation {
                    contract: contract.to_string(),
                    operation: operation.to_string(),
                })
            }
        };
        d.finish()?;
        Ok(call)
    }

    /// Model named directly by the call arguments, if any.
    pub fn model_arg(&self) -> Option<Digest> {
        match self {
            Call::RegisterQueryProgram { model_id, .. }
            | Call::RegisterDonor { model_id, .. }
            | Call::WithdrawDonor { model_id }
            | Call::SetModelStatus { model_id, .. }
            | Call::PurchaseAccessCode { model_id, .. } => Some(*model_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("measurement already registered")]
    DuplicateMeasurement,
    #[error("unknown enclave package")]
    UnknownPackage,
    #[error("enclave package has no audit")]
    Unaudited,
    #[error("enclave key already registered")]
    DuplicateEnclave,
    #[error("unknown enclave instance")]
    UnknownEnclave,
    #[error("enclave is {actual:?}, expected {expected:?}")]
    WrongEnclaveKind {
        expected: EnclaveKind,
        actual: EnclaveKind,
    },
    #[error("data registration already active")]
    AlreadyActive,
    #[error("no active data registration")]
    NotActive,
    #[error("caller does not own this registration")]
    NotOwner,
    #[error("split does not sum to 10000 basis points")]
    BadSplit,
    #[error("unknown model")]
    UnknownModel,
    #[error("model already registered")]
    DuplicateModel,
    #[error("signature does not verify")]
    BadSignature,
    #[error("caller does not match the receipt owner")]
    WrongCaller,
    #[error("donor already registered")]
    DuplicateDonor,
    #[error("quality level {0} outside 1..=5")]
    BadQuality(u8),
    #[error("caller is not a donor of this model")]
    NotDonor,
    #[error("model is already trained")]
    ModelTrained,
    #[error("illegal status transition {from:?} -> {to:?}")]
    IllegalTransition { from: ModelStatus, to: ModelStatus },
    #[error("caller is not the model trainer")]
    NotTrainer,
    #[error("trained status requires a registered query-kind runner enclave")]
    RunnerRequired,
    #[error("model is not accepting this operation in status {0:?}")]
    WrongStatus(ModelStatus),
    #[error("insufficient balance")]
    InsufficientBalance,
    #[error("amount below the model price")]
    PriceNotMet,
    #[error("access code already used")]
    DuplicateCode,
    #[error("unknown access code")]
    UnknownCode,
    #[error("access code is not in paid state")]
    NotPaid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Audit {
    pub auditor: AccountId,
    pub report_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnclavePackage {
    pub measurement: Digest,
    pub source_hash: Digest,
    pub developer: AccountId,
    pub audits: Vec<Audit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnclaveInstance {
    pub enclave_pubkey: PublicKey,
    pub measurement: Digest,
    pub runner: AccountId,
    pub ias_report_hash: Digest,
    pub kind: EnclaveKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DataStatus {
    Active,
    Withdrawn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataRegistration {
    pub owner: AccountId,
    pub report_hash: Digest,
    pub status: DataStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Donor {
    pub owner: AccountId,
    pub quality: u8,
    pub receipt_hash: Digest,
    pub withdrawn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelRecord {
    pub model_id: Digest,
    pub trainer: AccountId,
    pub whitepaper_hash: Digest,
    pub status: ModelStatus,
    pub training_enclave: PublicKey,
    pub runner_enclave: Option<PublicKey>,
    pub price: u64,
    pub split: SplitSpec,
    pub donors: Vec<Donor>,
    pub query_programs: Vec<Digest>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Registry {
    pub packages: BTreeMap<Digest, EnclavePackage>,
    pub instances: BTreeMap<PublicKey, EnclaveInstance>,
    pub data: Vec<DataRegistration>,
    pub models: BTreeMap<Digest, ModelRecord>,
}

impl Registry {
    pub fn instance(&self, key: &PublicKey) -> Option<&EnclaveInstance> {
        self.instances.get(key)
    }

    pub fn model(&self, id: &Digest) -> Option<&ModelRecord> {
        self.models.get(id)
    }

    pub fn active_data(&self, owner: &AccountId, report_hash: &Digest) -> bool {
        self.data.iter().any(|d| {
            d.owner == *owner && d.report_hash == *report_hash && d.status == DataStatus::Active
        })
    }

    fn has_active_data(&self, owner: &AccountId) -> bool {
        self.data
            .iter()
            .any(|d| d.owner == *owner && d.status == DataStatus::Active)
    }

    /// True when the report hash is Active under any owner.
    pub fn report_active(&self, report_hash: &Digest) -> bool {
        self.data
            .iter()
            .any(|d| d.report_hash == *report_hash && d.status == DataStatus::Active)
    }

    pub fn is_trainer(&self, account: &AccountId) -> bool {
        self.models.values().any(|m| m.trainer == *account)
    }

    pub fn query_program_registered(&self, program_hash: &Digest) -> bool {
        self.models
            .values()
            .any(|m| m.query_programs.contains(program_hash))
    }

    /// Whether `hash` appears in any registry record.
    pub fn references(&self, hash: &Digest) -> bool {
        self.packages.values().any(|p| {
            p.measurement == *hash
                || p.source_hash == *hash
                || p.audits.iter().any(|a| a.report_hash == *hash)
        }) || self.instances.values().any(|i| i.ias_report_hash == *hash)
            || self.data.iter().any(|d| d.report_hash == *hash)
            || self.models.values().any(|m| {
                m.model_id == *hash
                    || m.whitepaper_hash == *hash
                    || m.query_programs.contains(hash)
                    || m.donors.iter().any(|d| d.receipt_hash == *hash)
            })
    }

    fn instance_of_kind(
        &self,
        key: &PublicKey,
        kind: EnclaveKind,
    ) -> Result<&EnclaveInstance, ContractError> {
        let inst = self
            .instances
            .get(key)
            .ok_or(ContractError::UnknownEnclave)?;
        if inst.kind != kind {
            return Err(ContractError::WrongEnclaveKind {
                expected: kind,
                actual: inst.kind,
            });
        }
        Ok(inst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CodeStatus {
    Paid,
    Consumed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccessCode {
    pub code_hash: Digest,
    pub model_id: Digest,
    pub payer: AccountId,
    pub amount: u64,
    pub status: CodeStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Role {
    Trainer,
    Runner,
    Donor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Credit {
    pub recipient: AccountId,
    pub role: Role,
    pub amount: u64,
}

impl Encode for Credit {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.recipient)
            .u8(self.role as u8)
            .u64(self.amount);
    }
}

impl Decode for Credit {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let recipient = dec.get()?;
        let role = match dec.u8()? {
            0 => Role::Trainer,
            1 => Role::Runner,
            2 => Role::Donor,
            other => return Err(dec.err(format!("invalid role {other}"))),
        };
        Ok(Self {
            recipient,
            role,
            amount: dec.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Distribution {
    pub code_hash: Digest,
    pub model_id: Digest,
    pub amount: u64,
    pub credits: Vec<Credit>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TokenState {
    pub balances: BTreeMap<AccountId, u64>,
    pub escrow: BTreeMap<Digest, u64>,
    pub codes: BTreeMap<Digest, AccessCode>,
    pub distributions: Vec<Distribution>,
    pub minted: u64,
}

impl TokenState {
    pub fn mint(&mut self, to: AccountId, amount: u64) {
        *self.balances.entry(to).or_default() += amount;
        self.minted += amount;
    }

    pub fn balance(&self, account: &AccountId) -> u64 {
        self.balances.get(account).copied().unwrap_or(0)
    }

    pub fn total_balances(&self) -> u64 {
        self.balances.values().sum()
    }

    pub fn total_escrow(&self) -> u64 {
        self.escrow.values().sum()
    }

    pub fn conserved(&self) -> bool {
        self.total_balances() + self.total_escrow() == self.minted
    }

    fn credit(&mut self, to: AccountId, amount: u64) {
        *self.balances.entry(to).or_default() += amount;
    }
}

/// Splits `amount` among trainer, runner, and quality-weighted donors.
///
/// Each share is floored; every leftover token goes to the trainer, so the
/// credits always sum to `amount`. Withdrawn donors get nothing, and with no
/// active donors the whole donor pool falls to the trainer.
pub fn split_payment(
    amount: u64,
    split: &SplitSpec,
    trainer: AccountId,
    runner: AccountId,
    donors: &[Donor],
) -> Vec<Credit> {
    let share = |bp: u32| ((amount as u128 * bp as u128) / BASIS_POINTS as u128) as u64;
    let runner_amt = share(split.runner_bp);
    let pool = share(split.donor_pool_bp);
    let active: Vec<&Donor> = donors.iter().filter(|d| !d.withdrawn).collect();
    let weight: u128 = active.iter().map(|d| d.quality as u128).sum();

    let mut donor_credits = Vec::with_capacity(active.len());
    let mut paid = runner_amt;
    // qualities are at least 1, so weight is non-zero whenever active is
    for d in &active {
        let amt = ((pool as u128 * d.quality as u128) / weight) as u64;
        paid += amt;
        donor_credits.push(Credit {
            recipient: d.owner,
            role: Role::Donor,
            amount: amt,
        });
    }
    let mut credits = vec![
        Credit {
            recipient: trainer,
            role: Role::Trainer,
            amount: amount - paid,
        },
        Credit {
            recipient: runner,
            role: Role::Runner,
            amount: runner_amt,
        },
    ];
    credits.extend(donor_credits);
    credits
}

/// Side effects of a successful call, recorded in the transaction receipt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub model_id: Option<Digest>,
    pub credits: Vec<Credit>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Contracts {
    pub registry: Registry,
    pub token: TokenState,
}

impl Contracts {
    pub fn with_allocations(allocations: &[(AccountId, u64)]) -> Self {
        let mut c = Self::default();
        for (acct, amt) in allocations {
            c.token.mint(*acct, *amt);
        }
        c
    }

    /// Canonical snapshot used to compare states byte for byte.
    pub fn state_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("contract state is always serializable")
    }

    /// Read-only payment lookup against the last mined state.
    pub fn verify_payment(&self, code_hash: &Digest) -> Option<&AccessCode> {
        self.token.codes.get(code_hash)
    }

    pub fn execute(&mut self, caller: AccountId, call: &Call) -> Result<Effects, ContractError> {
        let reg = &mut self.registry;
        match call {
            Call::RegisterPackage {
                source_hash,
                measurement,
            } => {
                if reg.packages.contains_key(measurement) {
                    return Err(ContractError::DuplicateMeasurement);
                }
                reg.packages.insert(
                    *measurement,
                    EnclavePackage {
                        measurement: *measurement,
                        source_hash: *source_hash,
                        developer: caller,
                        audits: Vec::new(),
                    },
                );
                Ok(Effects::default())
            }
            Call::RegisterAudit {
                measurement,
                report_hash,
            } => {
                let pkg = reg
                    .packages
                    .get_mut(measurement)
                    .ok_or(ContractError::UnknownPackage)?;
                pkg.audits.push(Audit {
                    auditor: caller,
                    report_hash: *report_hash,
                });
                Ok(Effects::default())
            }
            Call::RegisterInstance {
                measurement,
                enclave_pubkey,
                ias_report_hash,
                kind,
            } => {
                let pkg = reg
                    .packages
                    .get(measurement)
                    .ok_or(ContractError::UnknownPackage)?;
                if pkg.audits.is_empty() {
                    return Err(ContractError::Unaudited);
                }
                if reg.instances.contains_key(enclave_pubkey) {
                    return Err(ContractError::DuplicateEnclave);
                }
                reg.instances.insert(
                    *enclave_pubkey,
                    EnclaveInstance {
                        enclave_pubkey: *enclave_pubkey,
                        measurement: *measurement,
                        runner: caller,
                        ias_report_hash: *ias_report_hash,
                        kind: *kind,
                    },
                );
                Ok(Effects::default())
            }
            Call::RegisterData { report_hash } => {
                if reg.active_data(&caller, report_hash) {
                    return Err(ContractError::AlreadyActive);
                }
                reg.data.push(DataRegistration {
                    owner: caller,
                    report_hash: *report_hash,
                    status: DataStatus::Active,
                });
                Ok(Effects::default())
            }
            Call::WithdrawData { report_hash } => {
                let mut saw_other_owner = false;
                for d in reg
                    .data
                    .iter_mut()
                    .filter(|d| d.report_hash == *report_hash && d.status == DataStatus::Active)
                {
                    if d.owner == caller {
                        d.status = DataStatus::Withdrawn;
                        return Ok(Effects::default());
                    }
                    saw_other_owner = true;
                }
                Err(if saw_other_owner {
                    ContractError::NotOwner
                } else {
                    ContractError::NotActive
                })
            }
            Call::RegisterModel {
                whitepaper_hash,
                training_enclave,
                price,
                split,
            } => {
                reg.instance_of_kind(training_enclave, EnclaveKind::Training)?;
                if !split.is_valid() {
                    return Err(ContractError::BadSplit);
                }
                let model_id = model_id_for(whitepaper_hash, &caller);
                if reg.models.contains_key(&model_id) {
                    return Err(ContractError::DuplicateModel);
                }
                reg.models.insert(
                    model_id,
                    ModelRecord {
                        model_id,
                        trainer: caller,
                        whitepaper_hash: *whitepaper_hash,
                        status: ModelStatus::Recruiting,
                        training_enclave: *training_enclave,
                        runner_enclave: None,
                        price: *price,
                        split: *split,
                        donors: Vec::new(),
                        query_programs: Vec::new(),
                    },
                );
                Ok(Effects {
                    model_id: Some(model_id),
                    credits: Vec::new(),
                })
            }
            Call::RegisterQueryProgram {
                model_id,
                program_hash,
            } => {
                let model = reg
                    .models
                    .get_mut(model_id)
                    .ok_or(ContractError::UnknownModel)?;
                if model.trainer != caller {
                    return Err(ContractError::NotTrainer);
                }
                if !model.query_programs.contains(program_hash) {
                    model.query_programs.push(*program_hash);
                }
                Ok(Effects {
                    model_id: Some(*model_id),
                    credits: Vec::new(),
                })
            }
            Call::RegisterDonor { model_id, receipt } => {
                let has_data = reg.has_active_data(&caller);
                let model = reg
                    .models
                    .get_mut(model_id)
                    .ok_or(ContractError::UnknownModel)?;
                if model.status == ModelStatus::Trained {
                    return Err(ContractError::WrongStatus(model.status));
                }
                if receipt.owner != caller {
                    return Err(ContractError::WrongCaller);
                }
                if receipt.model_id != *model_id || !receipt.verify(&model.training_enclave) {
                    return Err(ContractError::BadSignature);
                }
                if !(1..=5).contains(&receipt.quality) {
                    return Err(ContractError::BadQuality(receipt.quality));
                }
                if !has_data {
                    return Err(ContractError::NotActive);
                }
                if model
                    .donors
                    .iter()
                    .any(|d| d.owner == caller && !d.withdrawn)
                {
                    return Err(ContractError::DuplicateDonor);
                }
                model.donors.push(Donor {
                    owner: caller,
                    quality: receipt.quality,
                    receipt_hash: receipt.hash(),
                    withdrawn: false,
                });
                Ok(Effects {
                    model_id: Some(*model_id),
                    credits: Vec::new(),
                })
            }
            Call::WithdrawDonor { model_id } => {
                let model = reg
                    .models
                    .get_mut(model_id)
                    .ok_or(ContractError::UnknownModel)?;
                if model.status == ModelStatus::Trained {
                    return Err(ContractError::ModelTrained);
                }
                let donor = model
                    .donors
                    .iter_mut()
                    .find(|d| d.owner == caller && !d.withdrawn)
                    .ok_or(ContractError::NotDonor)?;
                donor.withdrawn = true;
                Ok(Effects {
                    model_id: Some(*model_id),
                    credits: Vec::new(),
                })
            }
            Call::SetModelStatus {
                model_id,
                status,
                runner_enclave,
            } => {
                let runner_ok = match runner_enclave {
                    Some(key) => reg.instance_of_kind(key, EnclaveKind::Query).is_ok(),
                    None => false,
                };
                let model = reg
                    .models
                    .get_mut(model_id)
                    .ok_or(ContractError::UnknownModel)?;
                if model.trainer != caller {
                    return Err(ContractError::NotTrainer);
                }
                if model.status.next() != Some(*status) {
                    return Err(ContractError::IllegalTransition {
                        from: model.status,
                        to: *status,
                    });
                }
                match status {
                    ModelStatus::Trained if !runner_ok => {
                        return Err(ContractError::RunnerRequired)
                    }
                    ModelStatus::Trained => model.runner_enclave = *runner_enclave,
                    _ if runner_enclave.is_some() => return Err(ContractError::RunnerRequired),
                    _ => {}
                }
                model.status = *status;
                Ok(Effects {
                    model_id: Some(*model_id),
                    credits: Vec::new(),
                })
            }
            Call::PurchaseAccessCode {
                model_id,
                code_hash,
                amount,
            } => {
                let model = reg
                    .models
                    .get(model_id)
                    .ok_or(ContractError::UnknownModel)?;
                match model.status {
                    ModelStatus::Trained => {}
                    // evaluation queries by the trainer while training
                    ModelStatus::Training if model.trainer == caller => {}
                    other => return Err(ContractError::WrongStatus(other)),
                }
                if self.token.codes.contains_key(code_hash) {
                    return Err(ContractError::DuplicateCode);
                }
                if *amount < model.price {
                    return Err(ContractError::PriceNotMet);
                }
                let bal = self.token.balances.entry(caller).or_default();
                if *bal < *amount {
                    return Err(ContractError::InsufficientBalance);
                }
                *bal -= amount;
                self.token.escrow.insert(*code_hash, *amount);
                self.token.codes.insert(
                    *code_hash,
                    AccessCode {
                        code_hash: *code_hash,
                        model_id: *model_id,
                        payer: caller,
                        amount: *amount,
                        status: CodeStatus::Paid,
                    },
                );
                Ok(Effects {
                    model_id: Some(*model_id),
                    credits: Vec::new(),
                })
            }
            Call::ConsumeAndDistribute {
                code_hash,
                enclave_sig,
            } => {
                let code = self
                    .token
                    .codes
                    .get(code_hash)
                    .ok_or(ContractError::UnknownCode)?;
                if code.status != CodeStatus::Paid {
                    return Err(ContractError::NotPaid);
                }
                let model = reg
                    .models
                    .get(&code.model_id)
                    .ok_or(ContractError::UnknownModel)?;
                let signer = enclave_sig.signer;
                let authorized =
                    signer == model.training_enclave || Some(signer) == model.runner_enclave;
                if !authorized || !verify(&signer, &consume_message(code_hash), enclave_sig) {
                    return Err(ContractError::BadSignature);
                }
                let runner = reg
                    .instances
                    .get(&signer)
                    .ok_or(ContractError::UnknownEnclave)?
                    .runner;
                let amount = self.token.escrow.remove(code_hash).unwrap_or(0);
                let credits =
                    split_payment(amount, &model.split, model.trainer, runner, &model.donors);
                let model_id = code.model_id;
                for c in &credits {
                    self.token.credit(c.recipient, c.amount);
                }
                self.token
                    .codes
                    .get_mut(code_hash)
                    .expect("checked above")
                    .status = CodeStatus::Consumed;
                self.token.distributions.push(Distribution {
                    code_hash: *code_hash,
                    model_id,
                    amount,
                    credits: credits.clone(),
                });
                Ok(Effects {
                    model_id: Some(model_id),
                    credits,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, KeyPair, Rng};

    struct Fixture {
        c: Contracts,
        dev: KeyPair,
        trainer: KeyPair,
        runner: KeyPair,
        owners: Vec<KeyPair>,
        training: KeyPair,
        query: KeyPair,
        measurement: Digest,
    }

    fn ok(c: &mut Contracts, who: &KeyPair, call: Call) -> Effects {
        c.execute(who.public(), &call).unwrap()
    }

    fn fixture() -> Fixture {
        let mut rng = Rng::new(11);
        let dev = keygen(&mut rng);
        let trainer = keygen(&mut rng);
        let runner = keygen(&mut rng);
        let owners: Vec<_> = (0..4).map(|_| keygen(&mut rng)).collect();
        let training = keygen(&mut rng);
        let query = keygen(&mut rng);
        let mut alloc = vec![(trainer.public(), 1000)];
        alloc.extend(owners.iter().map(|o| (o.public(), 100)));
        let mut c = Contracts::with_allocations(&alloc);
        let measurement = digest(b"image");
        ok(
            &mut c,
            &dev,
            Call::RegisterPackage {
                source_hash: digest(b"src"),
                measurement,
            },
        );
        ok(
            &mut c,
            &dev,
            Call::RegisterAudit {
                measurement,
                report_hash: digest(b"audit"),
            },
        );
        for (k, kind) in [
            (&training, EnclaveKind::Training),
            (&query, EnclaveKind::Query),
        ] {
            ok(
                &mut c,
                &runner,
                Call::RegisterInstance {
                    measurement,
                    enclave_pubkey: k.public(),
                    ias_report_hash: digest(k.public().as_bytes()),
                    kind,
                },
            );
        }
        Fixture {
            c,
            dev,
            trainer,
            runner,
            owners,
            training,
            query,
            measurement,
        }
    }

    fn split(t: u32, r: u32, d: u32) -> SplitSpec {
        SplitSpec {
            trainer_bp: t,
            runner_bp: r,
            donor_pool_bp: d,
        }
    }

    fn register_model(f: &mut Fixture, price: u64, sp: SplitSpec) -> Digest {
        let eff = ok(
            &mut f.c,
            &f.trainer.clone(),
            Call::RegisterModel {
                whitepaper_hash: digest(b"wp"),
                training_enclave: f.training.public(),
                price,
                split: sp,
            },
        );
        eff.model_id.unwrap()
    }

    fn receipt(enclave: &KeyPair, model_id: Digest, owner: &KeyPair, quality: u8) -> DonorReceipt {
        let sig = enclave.sign(&DonorReceipt::signed_message(
            &model_id,
            &owner.public(),
            quality,
        ));
        DonorReceipt {
            model_id,
            owner: owner.public(),
            quality,
            enclave_sig: sig,
        }
    }

    fn donate(f: &mut Fixture, model_id: Digest, i: usize, quality: u8) {
        let owner = f.owners[i].clone();
        let report = digest(&[i as u8]);
        f.c.execute(
            owner.public(),
            &Call::RegisterData {
                report_hash: report,
            },
        )
        .unwrap();
        let r = receipt(&f.training, model_id, &owner, quality);
        ok(
            &mut f.c,
            &owner,
            Call::RegisterDonor {
                model_id,
                receipt: r,
            },
        );
    }

    #[test]
    fn package_registration_rules() {
        let mut f = fixture();
        let before = f.c.state_bytes();
        let err = f.c.execute(
            f.dev.public(),
            &Call::RegisterPackage {
                source_hash: digest(b"s"),
                measurement: f.measurement,
            },
        );
        assert_eq!(err, Err(ContractError::DuplicateMeasurement));
        assert_eq!(before, f.c.state_bytes());
        ok(
            &mut f.c,
            &f.dev.clone(),
            Call::RegisterPackage {
                source_hash: digest(b"s2"),
                measurement: digest(b"i2"),
            },
        );
        assert_eq!(f.c.registry.packages.len(), 2);
    }

    #[test]
    fn audits_and_instances() {
        let mut f = fixture();
        let other = digest(b"unaudited");
        assert_eq!(
            f.c.execute(
                f.dev.public(),
                &Call::RegisterAudit {
                    measurement: digest(b"nope"),
                    report_hash: digest(b"a")
                }
            ),
            Err(ContractError::UnknownPackage)
        );
        ok(
            &mut f.c,
            &f.dev.clone(),
            Call::RegisterAudit {
                measurement: f.measurement,
                report_hash: digest(b"a2"),
            },
        );
        let audits = &f.c.registry.packages[&f.measurement].audits;
        assert_eq!(audits.len(), 2);
        assert_eq!(audits[1].report_hash, digest(b"a2"));

        ok(
            &mut f.c,
            &f.dev.clone(),
            Call::RegisterPackage {
                source_hash: digest(b"s"),
                measurement: other,
            },
        );
        let inst = |m, k: &KeyPair| Call::RegisterInstance {
            measurement: m,
            enclave_pubkey: k.public(),
            ias_report_hash: digest(b"r"),
            kind: EnclaveKind::Validation,
        };
        let fresh = keygen(&mut Rng::new(99));
        assert_eq!(
            f.c.execute(f.runner.public(), &inst(other, &fresh)),
            Err(ContractError::Unaudited)
        );
        assert_eq!(
            f.c.execute(f.runner.public(), &inst(f.measurement, &f.training)),
            Err(ContractError::DuplicateEnclave)
        );
    }

    #[test]
    fn data_registration_lifecycle() {
        let mut f = fixture();
        let (a, b) = (f.owners[0].clone(), f.owners[1].clone());
        let h = digest(b"report");
        ok(&mut f.c, &a, Call::RegisterData { report_hash: h });
        assert_eq!(
            f.c.execute(a.public(), &Call::RegisterData { report_hash: h }),
            Err(ContractError::AlreadyActive)
        );
        assert_eq!(
            f.c.execute(b.public(), &Call::WithdrawData { report_hash: h }),
            Err(ContractError::NotOwner)
        );
        ok(&mut f.c, &a, Call::WithdrawData { report_hash: h });
        assert_eq!(f.c.registry.data[0].status, DataStatus::Withdrawn);
        ok(&mut f.c, &a, Call::RegisterData { report_hash: h });
        assert_eq!(f.c.registry.data.len(), 2);
        assert_eq!(f.c.registry.data[0].status, DataStatus::Withdrawn);
        assert_eq!(f.c.registry.data[1].status, DataStatus::Active);
    }

    #[test]
    fn model_registration_checks() {
        let mut f = fixture();
        let t = f.trainer.public();
        let bad = f.c.execute(
            t,
            &Call::RegisterModel {
                whitepaper_hash: digest(b"w"),
                training_enclave: f.training.public(),
                price: 1,
                split: split(5000, 2000, 2999),
            },
        );
        assert_eq!(bad, Err(ContractError::BadSplit));
        let wrong_kind = f.c.execute(
            t,
            &Call::RegisterModel {
                whitepaper_hash: digest(b"w"),
                training_enclave: f.query.public(),
                price: 1,
                split: split(4000, 2000, 4000),
            },
        );
        assert!(matches!(
            wrong_kind,
            Err(ContractError::WrongEnclaveKind { .. })
        ));
        let id = register_model(&mut f, 10, split(4000, 2000, 4000));
        assert_eq!(f.c.registry.models[&id].status, ModelStatus::Recruiting);
        assert!(f.c.registry.is_trainer(&t));
    }

    #[test]
    fn donor_registration_checks() {
        let mut f = fixture();
        let id = register_model(&mut f, 10, split(4000, 2000, 4000));
        let owner = f.owners[0].clone();
        // no data registered yet
        let r = receipt(&f.training, id, &owner, 3);
        assert_eq!(
            f.c.execute(
                owner.public(),
                &Call::RegisterDonor {
                    model_id: id,
                    receipt: r
                }
            ),
            Err(ContractError::NotActive)
        );
        f.c.execute(
            owner.public(),
            &Call::RegisterData {
                report_hash: digest(b"x"),
            },
        )
        .unwrap();
        let forged = receipt(&f.query, id, &owner, 3);
        assert_eq!(
            f.c.execute(
                owner.public(),
                &Call::RegisterDonor {
                    model_id: id,
                    receipt: forged
                }
            ),
            Err(ContractError::BadSignature)
        );
        assert_eq!(
            f.c.execute(
                f.owners[1].public(),
                &Call::RegisterDonor {
                    model_id: id,
                    receipt: r
                }
            ),
            Err(ContractError::WrongCaller)
        );
        ok(
            &mut f.c,
            &owner,
            Call::RegisterDonor {
                model_id: id,
                receipt: r,
            },
        );
        assert_eq!(f.c.registry.models[&id].donors.len(), 1);
        assert_eq!(
            f.c.execute(
                owner.public(),
                &Call::RegisterDonor {
                    model_id: id,
                    receipt: r
                }
            ),
            Err(ContractError::DuplicateDonor)
        );

        // withdrawn data cannot donate
        let other = f.owners[1].clone();
        f.c.execute(
            other.public(),
            &Call::RegisterData {
                report_hash: digest(b"y"),
            },
        )
        .unwrap();
        f.c.execute(
            other.public(),
            &Call::WithdrawData {
                report_hash: digest(b"y"),
            },
        )
        .unwrap();
        let r2 = receipt(&f.training, id, &other, 2);
        assert_eq!(
            f.c.execute(
                other.public(),
                &Call::RegisterDonor {
                    model_id: id,
                    receipt: r2
                }
            ),
            Err(ContractError::NotActive)
        );
    }

    #[test]
    fn status_transitions() {
        let mut f = fixture();
        let id = register_model(&mut f, 10, split(4000, 2000, 4000));
        let t = f.trainer.public();
        let to = |status, runner| Call::SetModelStatus {
            model_id: id,
            status,
            runner_enclave: runner,
        };
        assert!(matches!(
            f.c.execute(t, &to(ModelStatus::Trained, Some(f.query.public()))),
            Err(ContractError::IllegalTransition { .. })
        ));
        assert_eq!(
            f.c.execute(f.owners[0].public(), &to(ModelStatus::Training, None)),
            Err(ContractError::NotTrainer)
        );
        f.c.execute(t, &to(ModelStatus::Training, None)).unwrap();
        assert_eq!(
            f.c.execute(t, &to(ModelStatus::Trained, None)),
            Err(ContractError::RunnerRequired)
        );
        assert_eq!(
            f.c.execute(t, &to(ModelStatus::Trained, Some(f.training.public()))),
            Err(ContractError::RunnerRequired)
        );
        f.c.execute(t, &to(ModelStatus::Trained, Some(f.query.public())))
            .unwrap();
        let m = &f.c.registry.models[&id];
        assert_eq!(m.status, ModelStatus::Trained);
        assert_eq!(m.runner_enclave, Some(f.query.public()));
    }

    #[test]
    fn donor_withdrawal_rules() {
        let mut f = fixture();
        let id = register_model(&mut f, 10, split(4000, 2000, 4000));
        donate(&mut f, id, 0, 1);
        donate(&mut f, id, 1, 1);
        let o0 = f.owners[0].public();
        f.c.execute(o0, &Call::WithdrawDonor { model_id: id })
            .unwrap();
        assert!(f.c.registry.models[&id].donors[0].withdrawn);
        let t = f.trainer.public();
        f.c.execute(
            t,
            &Call::SetModelStatus {
                model_id: id,
                status: ModelStatus::Training,
                runner_enclave: None,
            },
        )
        .unwrap();
        f.c.execute(
            t,
            &Call::SetModelStatus {
                model_id: id,
                status: ModelStatus::Trained,
                runner_enclave: Some(f.query.public()),
            },
        )
        .unwrap();
        assert_eq!(
            f.c.execute(f.owners[1].public(), &Call::WithdrawDonor { model_id: id }),
            Err(ContractError::ModelTrained)
        );

        // withdrawn donor gets nothing
        let payer = f.owners[2].public();
        let code = digest(b"code");
        f.c.execute(
            payer,
            &Call::PurchaseAccessCode {
                model_id: id,
                code_hash: code,
                amount: 100,
            },
        )
        .unwrap();
        let sig = f.query.sign(&consume_message(&code));
        let eff =
            f.c.execute(
                payer,
                &Call::ConsumeAndDistribute {
                    code_hash: code,
                    enclave_sig: sig,
                },
            )
            .unwrap();
        assert!(eff.credits.iter().all(|c| c.recipient != o0));
        let donor1 = eff
            .credits
            .iter()
            .find(|c| c.recipient == f.owners[1].public())
            .unwrap();
        assert_eq!(donor1.amount, 40);
    }

    fn trained(f: &mut Fixture, qualities: &[u8], sp: SplitSpec, price: u64) -> Digest {
        let id = register_model(f, price, sp);
        for (i, q) in qualities.iter().enumerate() {
            donate(f, id, i, *q);
        }
        let t = f.trainer.public();
        f.c.execute(
            t,
            &Call::SetModelStatus {
                model_id: id,
                status: ModelStatus::Training,
                runner_enclave: None,
            },
        )
        .unwrap();
        f.c.execute(
            t,
            &Call::SetModelStatus {
                model_id: id,
                status: ModelStatus::Trained,
                runner_enclave: Some(f.query.public()),
            },
        )
        .unwrap();
        id
    }

    #[test]
    fn purchase_and_verify_payment() {
        let mut f = fixture();
        let id = trained(&mut f, &[1], split(4000, 2000, 4000), 10);
        let payer = f.owners[3].public();
        let code = digest(b"c1");
        assert!(f.c.verify_payment(&code).is_none());
        assert_eq!(
            f.c.execute(
                payer,
                &Call::PurchaseAccessCode {
                    model_id: id,
                    code_hash: code,
                    amount: 5
                }
            ),
            Err(ContractError::PriceNotMet)
        );
        assert_eq!(
            f.c.execute(
                payer,
                &Call::PurchaseAccessCode {
                    model_id: id,
                    code_hash: code,
                    amount: 101
                }
            ),
            Err(ContractError::InsufficientBalance)
        );
        f.c.execute(
            payer,
            &Call::PurchaseAccessCode {
                model_id: id,
                code_hash: code,
                amount: 10,
            },
        )
        .unwrap();
        assert_eq!(f.c.token.balance(&payer), 90);
        assert_eq!(f.c.token.escrow[&code], 10);
        assert_eq!(f.c.verify_payment(&code).unwrap().status, CodeStatus::Paid);
        assert_eq!(
            f.c.execute(
                payer,
                &Call::PurchaseAccessCode {
                    model_id: id,
                    code_hash: code,
                    amount: 10
                }
            ),
            Err(ContractError::DuplicateCode)
        );
        assert!(f.c.token.conserved());
    }

    #[test]
    fn distribution_examples() {
        let mut f = fixture();
        let id = trained(&mut f, &[1, 1, 1, 1], split(4000, 2000, 4000), 10);
        let code = digest(b"c");
        let payer = f.trainer.public();
        f.c.execute(
            payer,
            &Call::PurchaseAccessCode {
                model_id: id,
                code_hash: code,
                amount: 100,
            },
        )
        .unwrap();
        let sig = f.query.sign(&consume_message(&code));
        let eff =
            f.c.execute(
                payer,
                &Call::ConsumeAndDistribute {
                    code_hash: code,
                    enclave_sig: sig,
                },
            )
            .unwrap();
        let amounts: Vec<u64> = eff.credits.iter().map(|c| c.amount).collect();
        assert_eq!(amounts, vec![40, 20, 10, 10, 10, 10]);
        assert_eq!(eff.credits[1].recipient, f.runner.public());
        assert_eq!(
            f.c.verify_payment(&code).unwrap().status,
            CodeStatus::Consumed
        );

        let before = f.c.state_bytes();
        assert_eq!(
            f.c.execute(
                payer,
                &Call::ConsumeAndDistribute {
                    code_hash: code,
                    enclave_sig: sig
                }
            ),
            Err(ContractError::NotPaid)
        );
        assert_eq!(before, f.c.state_bytes());
        assert!(f.c.token.conserved());
    }

    #[test]
    fn quality_weighted_donor_shares() {
        let credits = split_payment(
            100,
            &split(4000, 2000, 4000),
            PublicKey([1; 32]),
            PublicKey([2; 32]),
            &[
                Donor {
                    owner: PublicKey([3; 32]),
                    quality: 3,
                    receipt_hash: Digest::default(),
                    withdrawn: false,
                },
                Donor {
                    owner: PublicKey([4; 32]),
                    quality: 1,
                    receipt_hash: Digest::default(),
                    withdrawn: false,
                },
            ],
        );
        let donor: Vec<u64> = credits
            .iter()
            .filter(|c| c.role == Role::Donor)
            .map(|c| c.amount)
            .collect();
        assert_eq!(donor, vec![30, 10]);
    }

    #[test]
    fn consume_requires_serving_enclave_signature() {
        let mut f = fixture();
        let id = trained(&mut f, &[2], split(4000, 2000, 4000), 10);
        let code = digest(b"c");
        let payer = f.owners[3].public();
        f.c.execute(
            payer,
            &Call::PurchaseAccessCode {
                model_id: id,
                code_hash: code,
                amount: 10,
            },
        )
        .unwrap();
        let stranger = keygen(&mut Rng::new(5));
        let bad = stranger.sign(&consume_message(&code));
        assert_eq!(
            f.c.execute(
                payer,
                &Call::ConsumeAndDistribute {
                    code_hash: code,
                    enclave_sig: bad
                }
            ),
            Err(ContractError::BadSignature)
        );
        let wrong_msg = f.query.sign(b"something else");
        assert_eq!(
            f.c.execute(
                payer,
                &Call::ConsumeAndDistribute {
                    code_hash: code,
                    enclave_sig: wrong_msg
                }
            ),
            Err(ContractError::BadSignature)
        );
    }

    #[test]
    fn call_wire_format_round_trips_and_rejects_unknown() {
        let call = Call::SetModelStatus {
            model_id: digest(b"m"),
            status: ModelStatus::Trained,
            runner_enclave: Some(PublicKey([7; 32])),
        };
        let back = Call::from_parts(call.contract(), call.operation(), &call.args()).unwrap();
        assert_eq!(back, call);
        assert!(matches!(
            Call::from_parts("registry", "mint", &[]),
            Err(CallDecodeError::UnknownOperation { .. })
        ));
        assert!(matches!(
            Call::from_parts("token", "register_data", &call.args()),
            Err(CallDecodeError::UnknownOperation { .. })
        ));
        let mut args = call.args();
        args.push(0);
        assert!(matches!(
            Call::from_parts(call.contract(), call.operation(), &args),
            Err(CallDecodeError::Args(_))
        ));
    }

    #[test]
    fn evaluation_purchase_only_by_trainer_while_training() {
        let mut f = fixture();
        let id = register_model(&mut f, 10, split(4000, 2000, 4000));
        let t = f.trainer.public();
        f.c.execute(
            t,
            &Call::SetModelStatus {
                model_id: id,
                status: ModelStatus::Training,
                runner_enclave: None,
            },
        )
        .unwrap();
        let code = digest(b"eval");
        assert_eq!(
            f.c.execute(
                f.owners[0].public(),
                &Call::PurchaseAccessCode {
                    model_id: id,
                    code_hash: code,
                    amount: 10
                }
            ),
            Err(ContractError::WrongStatus(ModelStatus::Training))
        );
        f.c.execute(
            t,
            &Call::PurchaseAccessCode {
                model_id: id,
                code_hash: code,
                amount: 10,
            },
        )
        .unwrap();
        let sig = f.training.sign(&consume_message(&code));
        let eff =
            f.c.execute(
                t,
                &Call::ConsumeAndDistribute {
                    code_hash: code,
                    enclave_sig: sig,
                },
            )
            .unwrap();
        assert_eq!(eff.credits.iter().map(|c| c.amount).sum::<u64>(), 10);
        let _ = &f.runner;
    }
}
