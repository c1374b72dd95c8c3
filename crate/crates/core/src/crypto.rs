//! Deterministic cryptographic primitives.
//!
//! SHA-256 for digests, Ed25519 for signatures, X25519 + ChaCha20-Poly1305
//! for public-key encryption (the recipient's Ed25519 key is mapped to its
//! Montgomery form, so one key pair serves as both identity and channel
//! endpoint), HKDF-SHA256 for key derivation. All randomness comes from an
//! explicitly passed [`Rng`].

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Decode, DecodeError, Decoder, Encode, Encoder};

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
const PK_OVERHEAD: usize = 32 + 16;
const SYM_NONCE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("decryption failed")]
    DecryptionFailed,
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("invalid hex: {0}")]
    Hex(String),
}

macro_rules! hex_newtype {
    ($name:ident, $len:expr) => {
        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                let raw = hex::decode(s).map_err(|e| CryptoError::Hex(e.to_string()))?;
                let arr: [u8; $len] = raw
                    .try_into()
                    .map_err(|_| CryptoError::Hex(format!("expected {} bytes", $len)))?;
                Ok(Self(arr))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}…)", stringify!($name), &self.to_hex()[..12])
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }

        impl Encode for $name {
            fn encode(&self, enc: &mut Encoder) {
                enc.fixed(&self.0);
            }
        }

        impl Decode for $name {
            fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
                Ok(Self(dec.array()?))
            }
        }
    };
}

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);
hex_newtype!(Digest, DIGEST_LEN);

/// A 32-byte Ed25519 verifying key. Doubles as account id and enclave identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PublicKey(pub [u8; 32]);
hex_newtype!(PublicKey, 32);

pub fn digest(message: &[u8]) -> Digest {
    Digest(Sha256::digest(message).into())
}

/// Digest over length-prefixed parts, so `["ab","c"]` and `["a","bc"]` differ.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Seeded ChaCha20 stream. Named sub-streams are derived from the seed
/// material and a label, independent of how much of the parent was consumed.
#[derive(Clone)]
pub struct Rng {
    material: [u8; 32],
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_material(digest_parts(&[b"genie/rng", &seed.to_be_bytes()]).0)
    }

    fn from_material(material: [u8; 32]) -> Self {
        Self {
            material,
            inner: ChaCha20Rng::from_seed(material),
        }
    }

    /// Independent stream for `label`.
    pub fn derive(&self, label: &str) -> Rng {
        Self::from_material(digest_parts(&[&self.material, label.as_bytes()]).0)
    }

    pub fn bytes32(&mut self) -> [u8; 32] {
        let mut out = [0u8; 32];
        self.inner.fill_bytes(&mut out);
        out
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

impl fmt::Debug for Rng {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rng({}…)", &hex::encode(self.material)[..12])
    }
}

/// Signing/decryption key pair. The secret half is never serialized.
#[derive(Clone)]
pub struct KeyPair {
    public: PublicKey,
    secret: SigningKey,
}

impl KeyPair {
    pub fn generate(rng: &mut Rng) -> Self {
        Self::from_seed(rng.bytes32())
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        let secret = SigningKey::from_bytes(&seed);
        let public = PublicKey(secret.verifying_key().to_bytes());
        Self { public, secret }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature {
            bytes: self.secret.sign(message).to_bytes(),
            signer: self.public,
        }
    }

    /// Root material for key derivation. Only the CPU simulator uses this.
    pub(crate) fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature {
    pub bytes: [u8; SIGNATURE_LEN],
    pub signer: PublicKey,
}

impl Signature {
    pub fn from_parts(bytes: [u8; SIGNATURE_LEN], signer: PublicKey) -> Self {
        Self { bytes, signer }
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Signature({}… by {:?})",
            &hex::encode(self.bytes)[..12],
            self.signer
        )
    }
}

impl Encode for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.bytes).put(&self.signer);
    }
}

impl Decode for Signature {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            bytes: dec.array()?,
            signer: dec.get()?,
        })
    }
}

pub fn keygen(rng: &mut Rng) -> KeyPair {
    KeyPair::generate(rng)
}

pub fn sign(keys: &KeyPair, message: &[u8]) -> Signature {
    keys.sign(message)
}

/// True iff `sig` was produced by `public`'s secret over exactly `message`.
pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    sig.signer == *public && verify_raw(public, message, &sig.bytes)
}

/// Verification against a bare signature value with no embedded signer.
pub fn verify_raw(public: &PublicKey, message: &[u8], sig: &[u8; SIGNATURE_LEN]) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(sig);
    key.verify_strict(message, &sig).is_ok()
}

fn channel_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &PublicKey) -> Key {
    let hk = Hkdf::<Sha256>::new(Some(b"genie/pk-channel"), shared);
    let mut info = Vec::with_capacity(64);
    info.extend_from_slice(ephemeral);
    info.extend_from_slice(&recipient.0);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm)
        .expect("32 bytes is a valid hkdf length");
    Key::from(okm)
}

/// Encrypts to an identity key: ephemeral X25519 agreement, then AEAD.
/// Output is `ephemeral_public || ciphertext || tag`.
pub fn pk_encrypt(
    recipient: &PublicKey,
    plaintext: &[u8],
    rng: &mut Rng,
) -> Result<Vec<u8>, CryptoError> {
    let vk = VerifyingKey::from_bytes(&recipient.0).map_err(|_| CryptoError::InvalidPublicKey)?;
    let their = x25519_dalek::PublicKey::from(vk.to_montgomery().to_bytes());
    let eph = x25519_dalek::StaticSecret::from(rng.bytes32());
    let eph_pub = x25519_dalek::PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&their).to_bytes();
    let cipher = ChaCha20Poly1305::new(&channel_key(&shared, &eph_pub, recipient));
    // the key is unique per message, so a fixed nonce is safe
    let ct = cipher
        .encrypt(&Nonce::default(), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(PK_OVERHEAD + plaintext.len());
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&ct);
    Ok(out)
}

pub fn pk_decrypt(keys: &KeyPair, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < PK_OVERHEAD {
        return Err(CryptoError::DecryptionFailed);
    }
    let (eph_pub, body) = ciphertext.split_at(32);
    let eph_pub: [u8; 32] = eph_pub.try_into().expect("split at 32");
    let ours = x25519_dalek::StaticSecret::from(keys.secret.to_scalar_bytes());
    let shared = ours
        .diffie_hellman(&x25519_dalek::PublicKey::from(eph_pub))
        .to_bytes();
    let cipher = ChaCha20Poly1305::new(&channel_key(&shared, &eph_pub, &keys.public));
    cipher
        .decrypt(&Nonce::default(), body)
        .map_err(|_| CryptoError::DecryptionFailed)
}

/// Symmetric key bound to a context label.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey {
    pub bytes: [u8; 32],
    pub context: String,
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymKey")
            .field("context", &self.context)
            .finish_non_exhaustive()
    }
}

pub fn kdf(root: &[u8], context: &str) -> SymKey {
    let hk = Hkdf::<Sha256>::new(Some(b"genie/kdf"), root);
    let mut bytes = [0u8; 32];
    hk.expand(context.as_bytes(), &mut bytes)
        .expect("32 bytes is a valid hkdf length");
    SymKey {
        bytes,
        context: context.to_string(),
    }
}

/// Output is `nonce || ciphertext || tag`; the key context is bound as AAD.
pub fn sym_encrypt(key: &SymKey, plaintext: &[u8], rng: &mut Rng) -> Vec<u8> {
    let mut nonce = [0u8; SYM_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(&Key::from(key.bytes));
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: key.context.as_bytes(),
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(SYM_NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

pub fn sym_decrypt(key: &SymKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < SYM_NONCE_LEN + 16 {
        return Err(CryptoError::DecryptionFailed);
    }
    let (nonce, body) = ciphertext.split_at(SYM_NONCE_LEN);
    let cipher = ChaCha20Poly1305::new(&Key::from(key.bytes));
    cipher
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: body,
                aad: key.context.as_bytes(),
            },
        )
        .map_err(|_| CryptoError::DecryptionFailed)
}
