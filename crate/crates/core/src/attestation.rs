//! Simulated SGX trust root.
//!
//! Each CPU gets a signing key at manufacture whose public half is known only
//! to the attestation service ([`Ias`]); quotes carry a bare signature with no
//! signer id, and the service tries every registered CPU key, standing in for
//! EPID group verification. Reports are signed by the service key, which is
//! the one well-known public constant relying parties hold.

use std::fmt;

use thiserror::Error;

use crate::codec::Encoder;
use crate::crypto::{
    digest, kdf, verify, verify_raw, Digest, KeyPair, PublicKey, Rng, Signature, SymKey,
    SIGNATURE_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttestationError {
    #[error("enclave image is empty")]
    EmptyImage,
    #[error("malformed report record: {0}")]
    Record(String),
}

/// A manufactured CPU. Its public key is never exported.
#[derive(Clone)]
pub struct CpuIdentity {
    keys: KeyPair,
}

impl CpuIdentity {
    /// Sealing root for one enclave measurement on this CPU.
    pub fn sealing_key(&self, measurement: &Digest) -> SymKey {
        let mut root = self.keys.secret_bytes().to_vec();
        root.extend_from_slice(&measurement.0);
        kdf(&root, "seal")
    }

    fn sign(&self, message: &[u8]) -> Signature {
        self.keys.sign(message)
    }
}

impl fmt::Debug for CpuIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CpuIdentity(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Digest,
    pub enclave_pubkey: PublicKey,
    pub nonce: Digest,
    pub cpu_signature: [u8; SIGNATURE_LEN],
}

impl Quote {
    pub fn signing_bytes(
        measurement: &Digest,
        enclave_pubkey: &PublicKey,
        nonce: &Digest,
    ) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/quote");
        enc.put(measurement).put(enclave_pubkey).put(nonce);
        enc.finish()
    }
}

/// Quotes an enclave image as loaded, before it starts running.
pub fn generate_quote(
    cpu: &CpuIdentity,
    image: &[u8],
    enclave_pubkey: PublicKey,
    nonce: Digest,
) -> Result<Quote, AttestationError> {
    if image.is_empty() {
        return Err(AttestationError::EmptyImage);
    }
    let measurement = digest(image);
    let sig = cpu.sign(&Quote::signing_bytes(&measurement, &enclave_pubkey, &nonce));
    Ok(Quote {
        measurement,
        enclave_pubkey,
        nonce,
        cpu_signature: sig.bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Invalid,
}

impl Verdict {
    fn as_str(self) -> &'static str {
        match self {
            Verdict::Ok => "OK",
            Verdict::Invalid => "INVALID",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub measurement: Digest,
    pub enclave_pubkey: PublicKey,
    pub nonce: Digest,
    pub verdict: Verdict,
    pub timestamp: u64,
    pub ias_signature: Signature,
}

const RECORD_MAGIC: &str = "genie-attestation-report-v1";

impl AttestationReport {
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::tagged("genie/ias-report");
        enc.put(&self.measurement)
            .put(&self.enclave_pubkey)
            .put(&self.nonce)
            .str(self.verdict.as_str())
            .u64(self.timestamp);
        enc.finish()
    }

    /// Fixed-field text record, as stored in the repository.
    pub fn to_record(&self) -> String {
        format!(
            "{RECORD_MAGIC} {} {} {} {} {} {} {}\n",
            self.measurement,
            self.enclave_pubkey,
            self.nonce,
            self.verdict.as_str(),
            self.timestamp,
            self.ias_signature.signer,
            hex::encode(self.ias_signature.bytes),
        )
    }

    pub fn from_record(text: &str) -> Result<Self, AttestationError> {
        let bad = |m: &str| AttestationError::Record(m.to_string());
        let body = text
            .strip_suffix('\n')
            .ok_or_else(|| bad("missing newline"))?;
        let f: Vec<&str> = body.split(' ').collect();
        if f.len() != 8 || f[0] != RECORD_MAGIC {
            return Err(bad("wrong field count or magic"));
        }
        let verdict = match f[4] {
            "OK" => Verdict::Ok,
            "INVALID" => Verdict::Invalid,
            _ => return Err(bad("verdict")),
        };
        let sig: [u8; SIGNATURE_LEN] = hex::decode(f[7])
            .map_err(|_| bad("signature hex"))?
            .try_into()
            .map_err(|_| bad("signature length"))?;
        let report = Self {
            measurement: Digest::from_hex(f[1]).map_err(|_| bad("measurement"))?,
            enclave_pubkey: PublicKey::from_hex(f[2]).map_err(|_| bad("enclave key"))?,
            nonce: Digest::from_hex(f[3]).map_err(|_| bad("nonce"))?,
            verdict,
            timestamp: f[5].parse().map_err(|_| bad("timestamp"))?,
            ias_signature: Signature::from_parts(
                sig,
                PublicKey::from_hex(f[6]).map_err(|_| bad("signer"))?,
            ),
        };
        // only one text form per report
        if report.to_record() != text {
            return Err(bad("non-canonical record"));
        }
        Ok(report)
    }

    /// Digest of the text record; this is what goes on chain.
    pub fn record_hash(&self) -> Digest {
        digest(self.to_record().as_bytes())
    }
}

/// True iff the report carries a valid service signature and an OK verdict.
pub fn verify_report(report: &AttestationReport, ias_public: &PublicKey) -> bool {
    report.verdict == Verdict::Ok
        && verify(ias_public, &report.signing_bytes(), &report.ias_signature)
}

/// [`verify_report`] plus the relying party's own freshness and binding checks.
pub fn verify_report_for(
    report: &AttestationReport,
    ias_public: &PublicKey,
    expected_nonce: &Digest,
    expected_measurement: &Digest,
    expected_enclave: &PublicKey,
) -> bool {
    verify_report(report, ias_public)
        && report.nonce == *expected_nonce
        && report.measurement == *expected_measurement
        && report.enclave_pubkey == *expected_enclave
}

/// Mock attestation service holding the private CPU registry.
pub struct Ias {
    keys: KeyPair,
    cpus: Vec<PublicKey>,
}

impl Ias {
    pub fn new(rng: &mut Rng) -> Self {
        Self {
            keys: KeyPair::generate(rng),
            cpus: Vec::new(),
        }
    }

    pub fn public(&self) -> PublicKey {
        self.keys.public()
    }

    pub fn manufacture_cpu(&mut self, rng: &mut Rng) -> CpuIdentity {
        let keys = KeyPair::generate(rng);
        self.cpus.push(keys.public());
        CpuIdentity { keys }
    }

    pub fn verify_quote(&self, quote: &Quote, timestamp: u64) -> AttestationReport {
        let msg = Quote::signing_bytes(&quote.measurement, &quote.enclave_pubkey, &quote.nonce);
        let genuine = self
            .cpus
            .iter()
            .any(|cpu| verify_raw(cpu, &msg, &quote.cpu_signature));
        let mut report = AttestationReport {
            measurement: quote.measurement,
            enclave_pubkey: quote.enclave_pubkey,
            nonce: quote.nonce,
            verdict: if genuine {
                Verdict::Ok
            } else {
                Verdict::Invalid
            },
            timestamp,
            ias_signature: Signature::from_parts([0; SIGNATURE_LEN], self.keys.public()),
        };
        report.ias_signature = self.keys.sign(&report.signing_bytes());
        report
    }

    /// Test hook: the private CPU registry.
    #[doc(hidden)]
    pub fn registered_cpu_keys(&self) -> &[PublicKey] {
        &self.cpus
    }
}

impl fmt::Debug for Ias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ias")
            .field("public", &self.keys.public())
            .field("cpus", &self.cpus.len())
            .finish()
    }
}

/// One proxied exchange, kept for harness assertions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyLogEntry {
    pub timestamp: u64,
    pub enclave_pubkey: PublicKey,
    pub verdict: Verdict,
}

/// The service-provider proxy between enclave runners and the IAS.
#[derive(Debug, Default)]
pub struct ServiceProvider {
    log: Vec<ProxyLogEntry>,
}

impl ServiceProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, ias: &Ias, quote: &Quote, timestamp: u64) -> AttestationReport {
        let report = ias.verify_quote(quote, timestamp);
        self.log.push(ProxyLogEntry {
            timestamp,
            enclave_pubkey: quote.enclave_pubkey,
            verdict: report.verdict,
        });
        report
    }

    pub fn log(&self) -> &[ProxyLogEntry] {
        &self.log
    }
}
