//! Simulated enclaves. One package image serves all three roles; the role is
//! a launch mode recorded at instance registration. Every enclave gets a
//! fresh identity key and memory key per launch, and a sealing key bound to
//! (CPU, measurement).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::attestation::{generate_quote, AttestationError, CpuIdentity, Quote};
use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};
use crate::contracts::{
    consume_message, AccountId, Call, CodeStatus, DonorReceipt, EnclaveKind, ModelStatus,
};
use crate::crypto::{
    digest, kdf, pk_decrypt, pk_encrypt, sym_decrypt, sym_encrypt, verify, CryptoError, Digest,
    KeyPair, PublicKey, Rng, Signature, SymKey,
};
use crate::ledger::{Chain, ChainAccount, TxRejection};
use crate::vm::{
    params_bytes, params_from_bytes, run_query, run_training, OutputGate, Params, Program,
    ProgramKind, Record, Status, TrainingConfig, VmError,
};

pub const PAGE_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveImage {
    pub code: Vec<u8>,
    pub version: u32,
}

impl EnclaveImage {
    /// The standard marketplace enclave package at a given version.
    pub fn standard(version: u32) -> Self {
        let code = format!(
            "genie-enclave\nroles=validation,training,query\nvm=stack-21\nversion={version}\n"
        );
        Self {
            code: code.into_bytes(),
            version,
        }
    }

    pub fn bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/enclave-image");
        enc.u32(self.version).bytes(&self.code);
        enc.finish()
    }

    pub fn measurement(&self) -> Digest {
        digest(&self.bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("empty genotype")]
    Empty,
    #[error("duplicate rsid {0}")]
    DuplicateRsid(String),
    #[error("dosage {dosage} for {rsid} outside 0..=2")]
    Dosage { rsid: String, dosage: u8 },
    #[error("non-finite value for trait {0}")]
    Value(String),
    #[error("malformed dataset text: {0}")]
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Snp {
    pub rsid: String,
    pub dosage: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub genotype: Vec<Snp>,
    pub phenotype: BTreeMap<String, f64>,
    pub owner_tag: String,
}

const DATASET_MAGIC: &str = "genie-dataset v1";

impl Dataset {
    pub fn check_schema(&self) -> Result<(), DatasetError> {
        if self.genotype.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut seen = BTreeSet::new();
        for s in &self.genotype {
            if !seen.insert(&s.rsid) {
                return Err(DatasetError::DuplicateRsid(s.rsid.clone()));
            }
            if s.dosage > 2 {
                return Err(DatasetError::Dosage {
                    rsid: s.rsid.clone(),
                    dosage: s.dosage,
                });
            }
        }
        if let Some((t, _)) = self.phenotype.iter().find(|(_, v)| !v.is_finite()) {
            return Err(DatasetError::Value(t.clone()));
        }
        Ok(())
    }

    /// Header, then `rsid\tdosage` sorted by rsid, then `trait\tvalue`
    /// sorted by trait. The owner tag is not part of it.
    pub fn canonical_text(&self) -> String {
        let mut snps: Vec<&Snp> = self.genotype.iter().collect();
        snps.sort();
        let mut out = format!(
            "{DATASET_MAGIC} snps={} traits={}\n",
            snps.len(),
            self.phenotype.len()
        );
        for s in snps {
            out.push_str(&format!("{}\t{}\n", s.rsid, s.dosage));
        }
        for (t, v) in &self.phenotype {
            out.push_str(&format!("{t}\t{v}\n"));
        }
        out
    }

    /// Parses canonical text; any other rendering is rejected.
    pub fn parse(text: &str, owner_tag: &str) -> Result<Self, DatasetError> {
        let bad = |m: &str| DatasetError::Text(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header"))?;
        let rest = header
            .strip_prefix(DATASET_MAGIC)
            .ok_or_else(|| bad("bad magic"))?;
        let counts: Vec<&str> = rest.split(' ').collect();
        let (n_snps, n_traits) = match counts.as_slice() {
            ["", s, t] => (
                s.strip_prefix("snps=")
                    .and_then(|x| x.parse::<usize>().ok())
                    .ok_or_else(|| bad("snps count"))?,
                t.strip_prefix("traits=")
                    .and_then(|x| x.parse::<usize>().ok())
                    .ok_or_else(|| bad("traits count"))?,
            ),
            _ => return Err(bad("header fields")),
        };
        let mut genotype = Vec::new();
        let mut phenotype = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let (k, v) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if i < n_snps {
                let dosage = v.parse::<u8>().map_err(|_| bad("dosage"))?;
                genotype.push(Snp {
                    rsid: k.to_string(),
                    dosage,
                });
            } else {
                phenotype.insert(
                    k.to_string(),
                    v.parse::<f64>().map_err(|_| bad("trait value"))?,
                );
            }
        }
        if genotype.len() != n_snps || phenotype.len() != n_traits {
            return Err(bad("count mismatch"));
        }
        let ds = Self {
            genotype,
            phenotype,
            owner_tag: owner_tag.to_string(),
        };
        ds.check_schema()?;
        if ds.canonical_text() != text {
            return Err(bad("non-canonical"));
        }
        Ok(ds)
    }

    pub fn fingerprint(&self) -> Digest {
        digest(self.canonical_text().as_bytes())
    }

    /// Share of dosage-1 sites.
    pub fn heterozygosity(&self) -> f64 {
        if self.genotype.is_empty() {
            return 0.0;
        }
        self.genotype.iter().filter(|s| s.dosage == 1).count() as f64 / self.genotype.len() as f64
    }

    pub fn dosage(&self, rsid: &str) -> Option<u8> {
        self.genotype
            .iter()
            .find(|s| s.rsid == rsid)
            .map(|s| s.dosage)
    }

    /// Feature vector over `panel` (absent sites count as 0).
    pub fn features(&self, panel: &[String]) -> Vec<f64> {
        panel
            .iter()
            .map(|r| self.dosage(r).unwrap_or(0) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationVerdict {
    Valid,
    Fake,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub data_fingerprint: Digest,
    pub quality: u8,
    pub verdict: ValidationVerdict,
    pub validator_measurement: Digest,
    pub enclave_sig: Signature,
}

impl ValidationReport {
    pub fn signing_bytes(
        fingerprint: &Digest,
        quality: u8,
        verdict: ValidationVerdict,
        measurement: &Digest,
    ) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/validation-report");
        enc.put(fingerprint)
            .u8(quality)
            .u8(verdict as u8)
            .put(measurement);
        enc.finish()
    }

    pub fn signature_valid(&self) -> bool {
        let msg = Self::signing_bytes(
            &self.data_fingerprint,
            self.quality,
            self.verdict,
            &self.validator_measurement,
        );
        verify(&self.enclave_sig.signer, &msg, &self.enclave_sig)
    }

    /// The value registered on chain.
    pub fn hash(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

impl Encode for ValidationReport {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.data_fingerprint)
            .u8(self.quality)
            .u8(self.verdict as u8)
            .put(&self.validator_measurement)
            .put(&self.enclave_sig);
    }
}

impl Decode for ValidationReport {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let data_fingerprint = dec.get()?;
        let quality = dec.u8()?;
        let verdict = match dec.u8()? {
            0 => ValidationVerdict::Valid,
            1 => ValidationVerdict::Fake,
            v => return Err(dec.err(format!("invalid verdict {v}"))),
        };
        Ok(Self {
            data_fingerprint,
            quality,
            verdict,
            validator_measurement: dec.get()?,
            enclave_sig: dec.get()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatorConfig {
    pub het_range: (f64, f64),
    pub trait_ranges: BTreeMap<String, (f64, f64)>,
    pub requested_traits: Vec<String>,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self {
            het_range: (0.15, 0.60),
            trait_ranges: BTreeMap::new(),
            requested_traits: Vec::new(),
        }
    }
}

/// Completeness mapped to levels 1-5 at 0.2/0.4/0.6/0.8.
pub fn quality_level(completeness: f64) -> u8 {
    match completeness {
        c if c >= 0.8 => 5,
        c if c >= 0.6 => 4,
        c if c >= 0.4 => 3,
        c if c >= 0.2 => 2,
        _ => 1,
    }
}

/// Which genotype sites feed the model and which trait it predicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub panel: Vec<String>,
    pub target_trait: String,
}

impl Encode for ModelSpec {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.panel).str(&self.target_trait);
    }
}

impl Decode for ModelSpec {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            panel: dec.get()?,
            target_trait: dec.str()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub ciphertext: Vec<u8>,
    pub measurement_tag: Digest,
}

/// Trainer's authorization to move a trained model into one query enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportGrant {
    pub model_id: Digest,
    pub importer_measurement: Digest,
    pub importer_pubkey: PublicKey,
    pub trainer_sig: Signature,
}

impl ExportGrant {
    pub fn signing_bytes(model_id: &Digest, measurement: &Digest, pubkey: &PublicKey) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/export-grant");
        enc.put(model_id).put(measurement).put(pubkey);
        enc.finish()
    }

    pub fn create(
        trainer: &KeyPair,
        model_id: Digest,
        importer_measurement: Digest,
        importer_pubkey: PublicKey,
    ) -> Self {
        let sig = trainer.sign(&Self::signing_bytes(
            &model_id,
            &importer_measurement,
            &importer_pubkey,
        ));
        Self {
            model_id,
            importer_measurement,
            importer_pubkey,
            trainer_sig: sig,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refusal {
    UnknownCode,
    NotPaid,
    WrongModel,
    Replay,
    NoModel,
    Gate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnclaveError {
    #[error("operation needs a {expected:?} enclave, this one is {actual:?}")]
    WrongKind {
        expected: EnclaveKind,
        actual: EnclaveKind,
    },
    #[error("secure channel: {0}")]
    Channel(CryptoError),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("unknown model")]
    UnknownModel,
    #[error("this enclave is not the model's training enclave")]
    NotModelEnclave,
    #[error("model is not recruiting")]
    NotRecruiting,
    #[error("validation report signature invalid")]
    ReportSignature,
    #[error("report signer is not a registered validation enclave")]
    UnregisteredValidator,
    #[error("report verdict is not Valid")]
    FakeVerdict,
    #[error("data registration is not active on chain")]
    DataNotActive,
    #[error("dataset does not match the report fingerprint")]
    FingerprintMismatch,
    #[error("no held datasets for this model")]
    NoHeldData,
    #[error("vm: {0}")]
    Vm(#[from] VmError),
    #[error("training stopped: {0:?}")]
    TrainingFailed(Status),
    #[error("query program stopped: {0:?}")]
    QueryFailed(Status),
    #[error("no trained model held")]
    NoTrainedModel,
    #[error("export grant invalid")]
    BadGrant,
    #[error("importer is not a registered query enclave with that measurement")]
    ImporterNotRegistered,
    #[error("blob sealed for another measurement")]
    MeasurementMismatch,
    #[error("page must be exactly {PAGE_SIZE} bytes")]
    PageSize,
    #[error("query refused: {0:?}")]
    Refused(Refusal),
    #[error("consume transaction rejected: {0:?}")]
    Submit(TxRejection),
}

impl From<CryptoError> for EnclaveError {
    fn from(e: CryptoError) -> Self {
        EnclaveError::Channel(e)
    }
}

impl From<DecodeError> for EnclaveError {
    fn from(e: DecodeError) -> Self {
        EnclaveError::Malformed(e.to_string())
    }
}

/// Client side of a request/response channel: the body is encrypted to the
/// enclave identity together with a fresh reply key.
pub fn channel_request(
    enclave: &PublicKey,
    body: &[u8],
    rng: &mut Rng,
) -> Result<(Vec<u8>, SymKey), CryptoError> {
    let reply = kdf(&rng.bytes32(), "genie/reply");
    let mut enc = Encoder::new();
    enc.fixed(&reply.bytes).bytes(body);
    Ok((pk_encrypt(enclave, &enc.finish(), rng)?, reply))
}

pub fn open_reply(key: &SymKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    sym_decrypt(key, ciphertext)
}

/// One-way encrypted delivery to an enclave.
pub fn secure_send(
    enclave: &PublicKey,
    plaintext: &[u8],
    rng: &mut Rng,
) -> Result<Vec<u8>, CryptoError> {
    pk_encrypt(enclave, plaintext, rng)
}

pub fn query_body(model_id: &Digest, code_secret: &[u8], dataset: &Dataset) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.put(model_id)
        .bytes(code_secret)
        .str(&dataset.canonical_text());
    enc.finish()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationResponse {
    pub report: ValidationReport,
    /// Canonical dataset text, encrypted to the requester's reply key.
    pub processed: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSummary {
    pub steps: u64,
    pub donors_used: usize,
    pub commits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResponse {
    /// Emitted values, encrypted to the requester's reply key.
    pub ciphertext: Vec<u8>,
    pub code_hash: Digest,
    pub steps: u64,
}

/// One VM run's output, kept for gate audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmissionRecord {
    pub program_hash: Digest,
    pub kind: ProgramKind,
    pub registered: bool,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
struct Held {
    model_id: Digest,
    dataset: Dataset,
}

pub struct Enclave {
    kind: EnclaveKind,
    image: EnclaveImage,
    measurement: Digest,
    cpu: CpuIdentity,
    identity: KeyPair,
    session_key: SymKey,
    sealing_key: SymKey,
    rng: Rng,
    validator: ValidatorConfig,
    validated: BTreeSet<Digest>,
    held: Vec<Held>,
    models: BTreeMap<Digest, TrainedModel>,
    spent_codes: BTreeSet<Digest>,
    external_output_bytes: u64,
    successful_queries: BTreeMap<Digest, u64>,
    vm_steps: u64,
    emissions: Vec<EmissionRecord>,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("kind", &self.kind)
            .field("measurement", &self.measurement)
            .field("identity", &self.identity.public())
            .finish_non_exhaustive()
    }
}

impl Enclave {
    pub fn launch(
        cpu: &CpuIdentity,
        image: &EnclaveImage,
        kind: EnclaveKind,
        rng: &mut Rng,
    ) -> Self {
        let measurement = digest(&image.bytes());
        let identity = KeyPair::generate(rng);
        let session_key = kdf(&rng.bytes32(), "genie/session-memory");
        let inner = rng.derive(&format!("enclave/{}", identity.public()));
        Self {
            kind,
            image: image.clone(),
            measurement,
            cpu: cpu.clone(),
            sealing_key: cpu.sealing_key(&measurement),
            identity,
            session_key,
            rng: inner,
            validator: ValidatorConfig::default(),
            validated: BTreeSet::new(),
            held: Vec::new(),
            models: BTreeMap::new(),
            spent_codes: BTreeSet::new(),
            external_output_bytes: 0,
            successful_queries: BTreeMap::new(),
            vm_steps: 0,
            emissions: Vec::new(),
        }
    }

    pub fn with_validator(mut self, cfg: ValidatorConfig) -> Self {
        self.validator = cfg;
        self
    }

    pub fn kind(&self) -> EnclaveKind {
        self.kind
    }

    pub fn public(&self) -> PublicKey {
        self.identity.public()
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn quote(&self, nonce: Digest) -> Result<Quote, AttestationError> {
        generate_quote(
            &self.cpu,
            &self.image.bytes(),
            self.identity.public(),
            nonce,
        )
    }

    fn require(&self, kind: EnclaveKind) -> Result<(), EnclaveError> {
        if self.kind != kind {
            return Err(EnclaveError::WrongKind {
                expected: kind,
                actual: self.kind,
            });
        }
        Ok(())
    }

    fn open_request(&self, ciphertext: &[u8]) -> Result<(SymKey, Vec<u8>), EnclaveError> {
        let plain = pk_decrypt(&self.identity, ciphertext)?;
        let mut dec = Decoder::new(&plain);
        let key = SymKey {
            bytes: dec.array()?,
            context: "genie/reply".into(),
        };
        let body = dec.bytes()?;
        dec.finish()?;
        Ok((key, body))
    }

    pub fn validate_data(&mut self, request: &[u8]) -> Result<ValidationResponse, EnclaveError> {
        self.require(EnclaveKind::Validation)?;
        let (reply, body) = self.open_request(request)?;
        let text = String::from_utf8(body)
            .map_err(|_| EnclaveError::Malformed("dataset not utf-8".into()))?;
        let dataset = Dataset::parse(&text, "")?;
        let fp = dataset.fingerprint();
        let cfg = &self.validator;
        let het = dataset.heterozygosity();
        let plausible = het >= cfg.het_range.0
            && het <= cfg.het_range.1
            && dataset.phenotype.iter().all(|(t, v)| {
                cfg.trait_ranges
                    .get(t)
                    .is_some_and(|(lo, hi)| *v >= *lo && *v <= *hi)
            });
        let fresh = !self.validated.contains(&fp);
        let verdict = if plausible && fresh {
            ValidationVerdict::Valid
        } else {
            ValidationVerdict::Fake
        };
        let completeness = if cfg.requested_traits.is_empty() {
            1.0
        } else {
            let present = cfg
                .requested_traits
                .iter()
                .filter(|t| dataset.phenotype.contains_key(*t))
                .count();
            present as f64 / cfg.requested_traits.len() as f64
        };
        let quality = quality_level(completeness);
        if verdict == ValidationVerdict::Valid {
            self.validated.insert(fp);
        }
        let sig = self.identity.sign(&ValidationReport::signing_bytes(
            &fp,
            quality,
            verdict,
            &self.measurement,
        ));
        let report = ValidationReport {
            data_fingerprint: fp,
            quality,
            verdict,
            validator_measurement: self.measurement,
            enclave_sig: sig,
        };
        let processed = sym_encrypt(&reply, dataset.canonical_text().as_bytes(), &mut self.rng);
        Ok(ValidationResponse { report, processed })
    }

    /// Accepts a donor dataset (sent with [`secure_send`]) for a recruiting
    /// model this enclave trains.
    pub fn ingest_donor_data(
        &mut self,
        sealed_dataset: &[u8],
        report: &ValidationReport,
        owner: AccountId,
        model_id: Digest,
        chain: &Chain,
    ) -> Result<DonorReceipt, EnclaveError> {
        self.require(EnclaveKind::Training)?;
        let reg = &chain.contracts().registry;
        let model = reg.model(&model_id).ok_or(EnclaveError::UnknownModel)?;
        if model.training_enclave != self.public() {
            return Err(EnclaveError::NotModelEnclave);
        }
        if model.status != ModelStatus::Recruiting {
            return Err(EnclaveError::NotRecruiting);
        }
        if !report.signature_valid() {
            return Err(EnclaveError::ReportSignature);
        }
        match reg.instance(&report.enclave_sig.signer) {
            Some(i) if i.kind == EnclaveKind::Validation => {}
            _ => return Err(EnclaveError::UnregisteredValidator),
        }
        if report.verdict != ValidationVerdict::Valid {
            return Err(EnclaveError::FakeVerdict);
        }
        if !reg.active_data(&owner, &report.hash()) {
            return Err(EnclaveError::DataNotActive);
        }
        let plain = pk_decrypt(&self.identity, sealed_dataset)?;
        let text = String::from_utf8(plain)
            .map_err(|_| EnclaveError::Malformed("dataset not utf-8".into()))?;
        let dataset = Dataset::parse(&text, &owner.to_hex())?;
        if dataset.fingerprint() != report.data_fingerprint {
            return Err(EnclaveError::FingerprintMismatch);
        }
        self.held.push(Held { model_id, dataset });
        let msg = DonorReceipt::signed_message(&model_id, &owner, report.quality);
        Ok(DonorReceipt {
            model_id,
            owner,
            quality: report.quality,
            enclave_sig: self.identity.sign(&msg),
        })
    }

    /// Trains on the held datasets of donors still registered on chain, then
    /// purges every held dataset for the model whatever the outcome.
    pub fn train(
        &mut self,
        model_id: Digest,
        program: &Program,
        spec: &ModelSpec,
        cfg: &TrainingConfig,
        chain: &Chain,
    ) -> Result<TrainingSummary, EnclaveError> {
        self.require(EnclaveKind::Training)?;
        let (mine, rest): (Vec<Held>, Vec<Held>) = std::mem::take(&mut self.held)
            .into_iter()
            .partition(|h| h.model_id == model_id);
        self.held = rest;
        if mine.is_empty() {
            return Err(EnclaveError::NoHeldData);
        }
        let model = chain
            .contracts()
            .registry
            .model(&model_id)
            .ok_or(EnclaveError::UnknownModel)?;
        if model.training_enclave != self.public() {
            return Err(EnclaveError::NotModelEnclave);
        }
        let donors: BTreeSet<String> = model
            .donors
            .iter()
            .filter(|d| !d.withdrawn)
            .map(|d| d.owner.to_hex())
            .collect();
        let used: Vec<&Held> = mine
            .iter()
            .filter(|h| donors.contains(&h.dataset.owner_tag))
            .collect();
        let donors_used = used.len();
        let records: Vec<Record> = used
            .into_iter()
            .filter_map(|h| {
                let label = *h.dataset.phenotype.get(&spec.target_trait)?;
                Some(Record {
                    features: h.dataset.features(&spec.panel),
                    label,
                })
            })
            .collect();
        let stream = self.rng.derive(&format!("train/{model_id}"));
        let out = run_training(program, &records, cfg, &stream)?;
        drop(mine);
        self.external_output_bytes += out.emitted_bytes as u64;
        self.emissions.push(EmissionRecord {
            program_hash: program.program_hash,
            kind: program.kind,
            registered: chain
                .contracts()
                .registry
                .query_program_registered(&program.program_hash),
            bytes: out.emitted_bytes,
        });
        self.vm_steps += out.stats.real_ops;
        if out.status != Status::Halted {
            return Err(EnclaveError::TrainingFailed(out.status));
        }
        self.models.insert(
            model_id,
            TrainedModel {
                spec: spec.clone(),
                params: out.params,
            },
        );
        Ok(TrainingSummary {
            steps: out.stats.real_ops,
            donors_used,
            commits: out.commits,
        })
    }

    pub fn export_trained(
        &mut self,
        grant: &ExportGrant,
        chain: &Chain,
    ) -> Result<SealedBlob, EnclaveError> {
        let model = self
            .models
            .get(&grant.model_id)
            .ok_or(EnclaveError::NoTrainedModel)?;
        let record = chain
            .contracts()
            .registry
            .model(&grant.model_id)
            .ok_or(EnclaveError::UnknownModel)?;
        let msg = ExportGrant::signing_bytes(
            &grant.model_id,
            &grant.importer_measurement,
            &grant.importer_pubkey,
        );
        if grant.trainer_sig.signer != record.trainer
            || !verify(&record.trainer, &msg, &grant.trainer_sig)
        {
            return Err(EnclaveError::BadGrant);
        }
        match chain.contracts().registry.instance(&grant.importer_pubkey) {
            Some(i)
                if i.kind == EnclaveKind::Query && i.measurement == grant.importer_measurement => {}
            _ => return Err(EnclaveError::ImporterNotRegistered),
        }
        let mut enc = Encoder::new();
        enc.put(&grant.model_id)
            .put(&model.spec)
            .bytes(&params_bytes(&model.params));
        let ciphertext = pk_encrypt(&grant.importer_pubkey, &enc.finish(), &mut self.rng)?;
        Ok(SealedBlob {
            ciphertext,
            measurement_tag: grant.importer_measurement,
        })
    }

    pub fn import_trained(&mut self, blob: &SealedBlob) -> Result<Digest, EnclaveError> {
        if blob.measurement_tag != self.measurement {
            return Err(EnclaveError::MeasurementMismatch);
        }
        let plain = pk_decrypt(&self.identity, &blob.ciphertext)?;
        let mut dec = Decoder::new(&plain);
        let model_id: Digest = dec.get()?;
        let spec: ModelSpec = dec.get()?;
        let params = params_from_bytes(&dec.bytes()?)?;
        dec.finish()?;
        self.models.insert(model_id, TrainedModel { spec, params });
        Ok(model_id)
    }

    /// Runs `program` for a paid access code, then signs and submits the
    /// code's consumption. Anything short of a valid payment is refused
    /// before the VM starts.
    pub fn query(
        &mut self,
        request: &[u8],
        program: &Program,
        chain: &mut Chain,
    ) -> Result<QueryResponse, EnclaveError> {
        if self.kind == EnclaveKind::Validation {
            return Err(EnclaveError::WrongKind {
                expected: EnclaveKind::Query,
                actual: self.kind,
            });
        }
        let (reply, body) = self.open_request(request)?;
        let mut dec = Decoder::new(&body);
        let model_id: Digest = dec.get()?;
        let secret = dec.bytes()?;
        let text = dec.str()?;
        dec.finish()?;
        let code_hash = digest(&secret);

        if self.spent_codes.contains(&code_hash) {
            return Err(EnclaveError::Refused(Refusal::Replay));
        }
        let code = chain
            .contracts()
            .verify_payment(&code_hash)
            .ok_or(EnclaveError::Refused(Refusal::UnknownCode))?;
        if code.status != CodeStatus::Paid {
            return Err(EnclaveError::Refused(Refusal::NotPaid));
        }
        if code.model_id != model_id {
            return Err(EnclaveError::Refused(Refusal::WrongModel));
        }
        let model = self
            .models
            .get(&model_id)
            .ok_or(EnclaveError::Refused(Refusal::NoModel))?;
        let record = chain
            .contracts()
            .registry
            .model(&model_id)
            .ok_or(EnclaveError::UnknownModel)?;
        let gate = OutputGate::new(record.query_programs.iter().copied());
        if program.kind != ProgramKind::Query || !gate.is_open_for(program) {
            return Err(EnclaveError::Refused(Refusal::Gate));
        }

        let dataset = Dataset::parse(&text, "")?;
        let records = vec![Record {
            features: dataset.features(&model.spec.panel),
            label: 0.0,
        }];
        let stream = self.rng.derive(&format!("query/{code_hash}"));
        let out = run_query(program, &records, &model.params, &gate, &stream)?;
        self.vm_steps += out.steps;
        self.emissions.push(EmissionRecord {
            program_hash: program.program_hash,
            kind: program.kind,
            registered: true,
            bytes: out.emitted.len(),
        });
        if out.status != Status::Halted {
            return Err(EnclaveError::QueryFailed(out.status));
        }

        let sig = self.identity.sign(&consume_message(&code_hash));
        let mut account = ChainAccount::from_keys(self.identity.clone());
        account.set_nonce(chain.next_nonce(&self.public()));
        chain
            .submit_tx(account.call(&Call::ConsumeAndDistribute {
                code_hash,
                enclave_sig: sig,
            }))
            .map_err(EnclaveError::Submit)?;
        self.spent_codes.insert(code_hash);
        *self.successful_queries.entry(model_id).or_default() += 1;
        let ciphertext = sym_encrypt(&reply, &out.emitted, &mut self.rng);
        Ok(QueryResponse {
            ciphertext,
            code_hash,
            steps: out.steps,
        })
    }

    pub fn seal(&mut self, bytes: &[u8]) -> SealedBlob {
        SealedBlob {
            ciphertext: sym_encrypt(&self.sealing_key, bytes, &mut self.rng),
            measurement_tag: self.measurement,
        }
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, EnclaveError> {
        if blob.measurement_tag != self.measurement {
            return Err(EnclaveError::MeasurementMismatch);
        }
        Ok(sym_decrypt(&self.sealing_key, &blob.ciphertext)?)
    }

    pub fn page_out(&mut self, page: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        if page.len() != PAGE_SIZE {
            return Err(EnclaveError::PageSize);
        }
        Ok(sym_encrypt(&self.session_key, page, &mut self.rng))
    }

    pub fn page_in(&self, external: &[u8]) -> Result<Vec<u8>, EnclaveError> {
        let page = sym_decrypt(&self.session_key, external)?;
        if page.len() != PAGE_SIZE {
            return Err(EnclaveError::PageSize);
        }
        Ok(page)
    }

    /// Test hook: datasets currently held in enclave memory.
    pub fn held_dataset_count(&self) -> usize {
        self.held.len()
    }

    pub fn held_for_model(&self, model_id: &Digest) -> usize {
        self.held.iter().filter(|h| h.model_id == *model_id).count()
    }

    /// Bytes sent on the external channel while training.
    pub fn external_output_bytes(&self) -> u64 {
        self.external_output_bytes
    }

    pub fn successful_queries(&self) -> &BTreeMap<Digest, u64> {
        &self.successful_queries
    }

    pub fn has_model(&self, model_id: &Digest) -> bool {
        self.models.contains_key(model_id)
    }

    /// Test hook: trained parameters held for a model.
    pub fn model_params(&self, model_id: &Digest) -> Option<&Params> {
        self.models.get(model_id).map(|m| &m.params)
    }

    pub fn emissions(&self) -> &[EmissionRecord] {
        &self.emissions
    }

    pub fn vm_steps(&self) -> u64 {
        self.vm_steps
    }

    pub fn sealing_key_fingerprint(&self) -> Digest {
        digest(&self.sealing_key.bytes)
    }

    pub fn session_key_fingerprint(&self) -> Digest {
        digest(&self.session_key.bytes)
    }
}
