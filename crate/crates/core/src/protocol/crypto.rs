// SPDX-License-Identifier: Apache-2.0

//! Keys, signatures, public-key encryption and hashing for the protocol.
//!
//! - Signatures: Ed25519.
//! - Encryption: ephemeral-static X25519, key derived with BLAKE3 in
//!   key-derivation mode, payload sealed with ChaCha20-Poly1305. A
//!   ciphertext is the 32-byte ephemeral public key followed by the AEAD
//!   output. Every message uses a fresh ephemeral key, so the AEAD nonce is
//!   fixed at zero.
//! - Hash: BLAKE3-256 over the length-prefixed encoding of its fields, with
//!   a label as the first field.

use std::collections::BTreeMap;
use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce as AeadNonce, Tag};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier as _, VerifyingKey};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use x25519_dalek::{PublicKey, StaticSecret};

use super::Role;

pub const NONCE_LEN: usize = 32;
pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const PUBLIC_KEYS_LEN: usize = 64;
const TAG_LEN: usize = 16;

pub type Nonce = [u8; NONCE_LEN];
pub type Digest = [u8; DIGEST_LEN];

const KDF_CONTEXT: &str = "power-attest 2024 hybrid encryption v1";

/// Algorithms in use, written at the top of every transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParameters {
    pub signature: String,
    pub encryption: String,
    pub hash: String,
    pub encoding: String,
}

impl Default for ProtocolParameters {
    fn default() -> Self {
        Self {
            signature: "Ed25519".into(),
            encryption: "X25519+BLAKE3-KDF+ChaCha20-Poly1305".into(),
            hash: "BLAKE3-256".into(),
            encoding: "u32-le-length-prefixed fields".into(),
        }
    }
}

/// Hash of labelled, length-prefixed fields. The hashed bytes are exactly
/// the wire encoding of `[label, fields...]`.
pub fn hash_fields(label: &str, fields: &[&[u8]]) -> Digest {
    let mut h = FieldHasher::new(label);
    for f in fields {
        h.field(f);
    }
    h.finish()
}

/// Streaming form of [`hash_fields`].
pub struct FieldHasher(blake3::Hasher);

impl FieldHasher {
    pub fn new(label: &str) -> Self {
        let mut h = Self(blake3::Hasher::new());
        h.field(label.as_bytes());
        h
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than 4 GiB");
        self.0.update(&len.to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn finish(&self) -> Digest {
        *self.0.finalize().as_bytes()
    }
}

/// Public halves of a party's keys.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKeys {
    verify: VerifyingKey,
    encrypt: PublicKey,
}

impl fmt::Debug for PublicKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKeys({})", hex::encode(&self.to_bytes()[..8]))
    }
}

impl PublicKeys {
    pub fn to_bytes(&self) -> [u8; PUBLIC_KEYS_LEN] {
        let mut out = [0u8; PUBLIC_KEYS_LEN];
        out[..32].copy_from_slice(self.verify.as_bytes());
        out[32..].copy_from_slice(self.encrypt.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let bytes: &[u8; PUBLIC_KEYS_LEN] = bytes.try_into().ok()?;
        let verify = VerifyingKey::from_bytes(bytes[..32].try_into().ok()?).ok()?;
        let enc: [u8; 32] = bytes[32..].try_into().ok()?;
        Some(Self {
            verify,
            encrypt: PublicKey::from(enc),
        })
    }

    /// Checks a signature over `digest`.
    pub fn verify(&self, digest: &Digest, signature: &[u8]) -> bool {
        let Ok(sig) = Signature::from_slice(signature) else {
            return false;
        };
        self.verify.verify(digest, &sig).is_ok()
    }

    /// Encrypts `plaintext` to this party.
    pub fn encrypt<R: RngCore + CryptoRng>(&self, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
        let eph = StaticSecret::random_from_rng(&mut *rng);
        let eph_pk = PublicKey::from(&eph);
        let cipher = cipher_for(&eph.diffie_hellman(&self.encrypt).to_bytes(), &eph_pk, &self.encrypt);
        let mut out = Vec::with_capacity(32 + plaintext.len() + TAG_LEN);
        out.extend_from_slice(eph_pk.as_bytes());
        out.extend_from_slice(plaintext);
        let tag = cipher
            .encrypt_in_place_detached(&AeadNonce::default(), b"", &mut out[32..])
            .expect("in-memory encryption does not fail");
        out.extend_from_slice(&tag);
        out
    }
}

fn cipher_for(shared: &[u8; 32], eph_pk: &PublicKey, recipient: &PublicKey) -> ChaCha20Poly1305 {
    let mut material = Vec::with_capacity(96);
    material.extend_from_slice(shared);
    material.extend_from_slice(eph_pk.as_bytes());
    material.extend_from_slice(recipient.as_bytes());
    let key = blake3::derive_key(KDF_CONTEXT, &material);
    ChaCha20Poly1305::new(Key::from_slice(&key))
}

/// A party's signing and decryption keys. Deliberately not serializable.
pub struct PartyKeys {
    role: Role,
    signing: SigningKey,
    decryption: StaticSecret,
}

impl fmt::Debug for PartyKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartyKeys")
            .field("role", &self.role)
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

impl PartyKeys {
    pub fn generate<R: RngCore + CryptoRng>(role: Role, rng: &mut R) -> Self {
        Self {
            role,
            signing: SigningKey::generate(rng),
            decryption: StaticSecret::random_from_rng(&mut *rng),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn public(&self) -> PublicKeys {
        PublicKeys {
            verify: self.signing.verifying_key(),
            encrypt: PublicKey::from(&self.decryption),
        }
    }

    pub fn sign(&self, digest: &Digest) -> [u8; SIGNATURE_LEN] {
        self.signing.sign(digest).to_bytes()
    }

    /// Opens a ciphertext produced by [`PublicKeys::encrypt`].
    pub fn decrypt(&self, ciphertext: &[u8]) -> Option<Vec<u8>> {
        if ciphertext.len() < 32 + TAG_LEN {
            return None;
        }
        let eph: [u8; 32] = ciphertext[..32].try_into().ok()?;
        let eph_pk = PublicKey::from(eph);
        let own = PublicKey::from(&self.decryption);
        let cipher = cipher_for(&self.decryption.diffie_hellman(&eph_pk).to_bytes(), &eph_pk, &own);
        let (body, tag) = ciphertext[32..].split_at(ciphertext.len() - 32 - TAG_LEN);
        let mut plain = body.to_vec();
        cipher
            .decrypt_in_place_detached(&AeadNonce::default(), b"", &mut plain, Tag::from_slice(tag))
            .ok()?;
        Some(plain)
    }
}

/// Published public keys, visible to every actor.
#[derive(Debug, Clone, Default)]
pub struct Directory {
    keys: BTreeMap<Role, PublicKeys>,
}

impl Directory {
    pub fn get(&self, role: Role) -> Option<&PublicKeys> {
        self.keys.get(&role)
    }

    pub fn publish(&mut self, role: Role, keys: PublicKeys) {
        self.keys.insert(role, keys);
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.keys.keys().copied()
    }
}

/// Independent keypairs for each role, derived from `seed`, with the public
/// halves published to a directory.
pub fn setup(roles: &[Role], seed: u64) -> (BTreeMap<Role, PartyKeys>, Directory) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keys = BTreeMap::new();
    let mut dir = Directory::default();
    for &role in roles {
        let k = PartyKeys::generate(role, &mut rng);
        dir.publish(role, k.public());
        keys.insert(role, k);
    }
    (keys, dir)
}
