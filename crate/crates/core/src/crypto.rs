//! Signature and credential primitives shared by every party.
//!
//! A [`Credential`] is the pair "issuer verification key + entity signed by
//! the issuer". The signature covers the entity *and* the label map, so
//! labels are tamper-evident. Signing uses Ed25519; sealing to an
//! endorsement key uses X25519 + ChaCha20-Poly1305.

use std::collections::BTreeMap;
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use crate::codec::{Canonical, DecodeResult, Reader, Writer};

pub type Digest = [u8; 32];
pub type GroupId = u32;

/// Group id → group verification key, as published by the PCA.
pub type GroupRegistry = BTreeMap<GroupId, PublicKey>;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

const CREDENTIAL_TAG: &str = "pseudorate/credential/v1";
const ISSUANCE_NONCE_TAG: &str = "pseudorate/issuance-nonce/v1";
const SEAL_TAG: &str = "pseudorate/seal/v1";

/// Well-known credential label keys.
pub mod labels {
    pub const GROUP: &str = "group";
    pub const IDENTITY_LABEL: &str = "identity-label";
    pub const PLATFORM_CLASS: &str = "platform-class";
    pub const RS: &str = "rs";
    pub const STATEMENT: &str = "statement";
    pub const KEY_USAGE: &str = "key-usage";

    pub const SHIELDED_STATEMENT: &str = "key-held-in-tpm-shielded-location-never-revealed";
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("entropy source failed: {0}")]
    Entropy(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("sealed box could not be opened")]
    Open,
    #[error("malformed key bytes")]
    MalformedKey,
}

pub fn digest(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn key_id(&self) -> Digest {
        digest(&self.0)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(PublicKey)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.0))
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Ed25519 signing key pair.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(SigningKey::generate(rng).to_bytes())
    }

    pub(crate) fn from_secret(secret: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&secret);
        let public = PublicKey(signing.verifying_key().to_bytes());
        Self { signing, public }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn key_id(&self) -> Digest {
        self.public.key_id()
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.signing.sign(message).to_bytes().to_vec()
    }

    pub(crate) fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    #[cfg(feature = "audit")]
    pub fn audit_secret(&self) -> Vec<u8> {
        self.secret_bytes().to_vec()
    }
}

/// Fresh key pair; a seed makes the result reproducible.
pub fn generate_keypair(seed: Option<[u8; 32]>) -> Result<KeyPair, CryptoError> {
    match seed {
        Some(seed) => Ok(KeyPair::generate(&mut ChaCha20Rng::from_seed(seed))),
        None => {
            let mut seed = [0u8; 32];
            rand::rngs::OsRng
                .try_fill_bytes(&mut seed)
                .map_err(|e| CryptoError::Entropy(e.to_string()))?;
            Ok(KeyPair::generate(&mut ChaCha20Rng::from_seed(seed)))
        }
    }
}

pub fn verify_signature(public: &[u8], message: &[u8], signature: &[u8]) -> bool {
    let Ok(public) = <[u8; PUBLIC_KEY_LEN]>::try_from(public) else {
        return false;
    };
    let Ok(signature) = <[u8; SIGNATURE_LEN]>::try_from(signature) else {
        return false;
    };
    let Ok(vk) = VerifyingKey::from_bytes(&public) else {
        return false;
    };
    vk.verify_strict(message, &Signature::from_bytes(&signature)).is_ok()
}

/// Bytes an AIK signs to answer an issuance challenge. The tag keeps these
/// signatures disjoint from credential signatures.
pub fn issuance_challenge_message(challenge_id: &[u8], nonce: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(ISSUANCE_NONCE_TAG).bytes(challenge_id).bytes(nonce);
    w.into_bytes()
}

/// Certified entity plus the issuer's verification key and signature.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Credential {
    pub entity: Vec<u8>,
    pub issuer_public: Vec<u8>,
    pub signature: Vec<u8>,
    pub meta: BTreeMap<String, String>,
}

impl Credential {
    pub fn signed_bytes(entity: &[u8], meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut w = Writer::new();
        w.str(CREDENTIAL_TAG).bytes(entity).str_map(meta);
        w.into_bytes()
    }

    /// The certified entity read as a verification key, for key credentials.
    pub fn entity_key(&self) -> Option<PublicKey> {
        PublicKey::from_slice(&self.entity)
    }

    pub fn issuer_key(&self) -> Option<PublicKey> {
        PublicKey::from_slice(&self.issuer_public)
    }
}

impl Canonical for Credential {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.entity).bytes(&self.issuer_public).bytes(&self.signature).str_map(&self.meta);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(Credential { entity: r.bytes()?, issuer_public: r.bytes()?, signature: r.bytes()?, meta: r.str_map()? })
    }
}

pub fn certify(issuer: &KeyPair, entity: &[u8], meta: BTreeMap<String, String>) -> Result<Credential, CryptoError> {
    if entity.is_empty() {
        return Err(CryptoError::InvalidArgument("entity must be non-empty"));
    }
    let signature = issuer.sign(&Credential::signed_bytes(entity, &meta));
    Ok(Credential { entity: entity.to_vec(), issuer_public: issuer.public().0.to_vec(), signature, meta })
}

pub fn verify_credential(c: &Credential) -> bool {
    !c.entity.is_empty() && verify_signature(&c.issuer_public, &Credential::signed_bytes(&c.entity, &c.meta), &c.signature)
}

/// Cert(r, CSK), Cert(CSK, AIK), Cert(AIK, g).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CredentialChain {
    pub rating_cred: Credential,
    pub csk_cred: Credential,
    pub aik_cred: Credential,
}

impl CredentialChain {
    pub fn digest(&self) -> Digest {
        digest(&self.encode())
    }

    /// Spend key of the ticket: digest of the AIK public certified by the group.
    pub fn aik_digest(&self) -> Digest {
        digest(&self.aik_cred.entity)
    }
}

impl Canonical for CredentialChain {
    fn write(&self, w: &mut Writer) {
        self.rating_cred.write(w);
        self.csk_cred.write(w);
        self.aik_cred.write(w);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(CredentialChain { rating_cred: Credential::read(r)?, csk_cred: Credential::read(r)?, aik_cred: Credential::read(r)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    Rating,
    Csk,
    Aik,
}

impl Link {
    pub fn as_str(&self) -> &'static str {
        match self {
            Link::Rating => "rating",
            Link::Csk => "csk",
            Link::Aik => "aik",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum ChainFault {
    #[error("empty group registry")]
    EmptyRegistry,
    #[error("bad signature on {} credential", .0.as_str())]
    BadSignature(Link),
    #[error("{} credential not issued by the key certified above it", .0.as_str())]
    LinkMismatch(Link),
    #[error("unknown group key")]
    UnknownGroup,
    #[error("group label does not match issuing group key")]
    GroupLabelMismatch,
}

impl ChainFault {
    pub fn code(&self) -> &'static str {
        match self {
            ChainFault::EmptyRegistry => "empty-registry",
            ChainFault::BadSignature(_) => "bad-signature",
            ChainFault::LinkMismatch(_) => "link-mismatch",
            ChainFault::UnknownGroup => "unknown-group",
            ChainFault::GroupLabelMismatch => "group-label-mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    /// Signature validity of the rating, CSK and AIK credentials, in that order.
    pub signatures: [bool; 3],
    pub csk_linked: bool,
    pub aik_linked: bool,
    pub group: Option<GroupId>,
    pub fault: Option<ChainFault>,
}

impl VerifyReport {
    pub fn valid(&self) -> bool {
        self.fault.is_none()
    }
}

pub fn verify_chain(chain: &CredentialChain, registry: &GroupRegistry) -> VerifyReport {
    let signatures = [
        verify_credential(&chain.rating_cred),
        verify_credential(&chain.csk_cred),
        verify_credential(&chain.aik_cred),
    ];
    let csk_linked = chain.csk_cred.entity == chain.rating_cred.issuer_public;
    let aik_linked = chain.aik_cred.entity == chain.csk_cred.issuer_public;
    let group = chain
        .aik_cred
        .issuer_key()
        .and_then(|k| registry.iter().find(|(_, v)| **v == k).map(|(g, _)| *g));

    let fault = if registry.is_empty() {
        Some(ChainFault::EmptyRegistry)
    } else if let Some(i) = signatures.iter().position(|ok| !ok) {
        Some(ChainFault::BadSignature([Link::Rating, Link::Csk, Link::Aik][i]))
    } else if !csk_linked {
        Some(ChainFault::LinkMismatch(Link::Rating))
    } else if !aik_linked {
        Some(ChainFault::LinkMismatch(Link::Csk))
    } else if let Some(g) = group {
        let label = chain.aik_cred.meta.get(labels::GROUP);
        (label.map(String::as_str) != Some(g.to_string().as_str())).then_some(ChainFault::GroupLabelMismatch)
    } else {
        Some(ChainFault::UnknownGroup)
    };
    VerifyReport { signatures, csk_linked, aik_linked, group, fault }
}

/// Endorsement-style X25519 decryption key.
#[derive(Clone)]
pub struct DecryptionKey {
    secret: StaticSecret,
    public: PublicKey,
}

impl fmt::Debug for DecryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DecryptionKey").field("public", &self.public).finish_non_exhaustive()
    }
}

impl DecryptionKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = StaticSecret::random_from_rng(rng);
        let public = PublicKey(XPublic::from(&secret).to_bytes());
        Self { secret, public }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn open(&self, label: &str, sealed: &SealedBox) -> Result<Vec<u8>, CryptoError> {
        let shared = self.secret.diffie_hellman(&XPublic::from(sealed.ephemeral_public));
        let key = seal_key(label, shared.as_bytes(), &sealed.ephemeral_public, &self.public.0);
        ChaCha20Poly1305::new(Key::from_slice(&key))
            .decrypt(Nonce::from_slice(&sealed.nonce), Payload { msg: &sealed.ciphertext, aad: label.as_bytes() })
            .map_err(|_| CryptoError::Open)
    }

    #[cfg(feature = "audit")]
    pub fn audit_secret(&self) -> Vec<u8> {
        self.secret.to_bytes().to_vec()
    }
}

/// Ciphertext addressed to one [`DecryptionKey`] and bound to a purpose label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBox {
    pub ephemeral_public: [u8; 32],
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

impl Canonical for SealedBox {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.ephemeral_public).bytes(&self.nonce).bytes(&self.ciphertext);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(SealedBox { ephemeral_public: r.fixed()?, nonce: r.fixed()?, ciphertext: r.bytes()? })
    }
}

fn seal_key(label: &str, shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut w = Writer::new();
    w.str(SEAL_TAG).str(label).raw(shared).raw(ephemeral).raw(recipient);
    digest(&w.into_bytes())
}

pub fn seal<R: RngCore + CryptoRng>(recipient: &PublicKey, label: &str, plaintext: &[u8], rng: &mut R) -> SealedBox {
    let ephemeral = StaticSecret::random_from_rng(&mut *rng);
    let ephemeral_public = XPublic::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&XPublic::from(recipient.0));
    let key = seal_key(label, shared.as_bytes(), &ephemeral_public, &recipient.0);
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let ciphertext = ChaCha20Poly1305::new(Key::from_slice(&key))
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: label.as_bytes() })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    SealedBox { ephemeral_public, nonce, ciphertext }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(n: u8) -> KeyPair {
        generate_keypair(Some([n; 32])).unwrap()
    }

    fn meta(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn sign_verify_empty_message() {
        let k = generate_keypair(None).unwrap();
        assert!(verify_signature(k.public().as_bytes(), b"", &k.sign(b"")));
    }

    #[test]
    fn fresh_keys_differ_and_seeds_repeat() {
        let a = generate_keypair(None).unwrap();
        let b = generate_keypair(None).unwrap();
        assert_ne!(a.key_id(), b.key_id());
        assert_eq!(kp(9).key_id(), kp(9).key_id());
        assert_eq!(kp(9).key_id(), digest(kp(9).public().as_bytes()));
    }

    #[test]
    fn certify_rejects_empty_entity() {
        assert_eq!(certify(&kp(1), b"", BTreeMap::new()), Err(CryptoError::InvalidArgument("entity must be non-empty")));
    }

    #[test]
    fn certify_then_verify() {
        let c = certify(&kp(1), b"r=5", BTreeMap::new()).unwrap();
        assert!(verify_credential(&c));
    }

    #[test]
    fn signature_bit_flips_are_rejected() {
        let c = certify(&kp(1), b"r=5", meta(&[("group", "1")])).unwrap();
        for bit in 0..c.signature.len() * 8 {
            let mut bad = c.clone();
            bad.signature[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify_credential(&bad), "bit {bit}");
        }
    }

    #[test]
    fn meta_is_covered_by_signature() {
        let c = certify(&kp(1), b"r=5", meta(&[("group", "1")])).unwrap();
        let mut bad = c.clone();
        bad.meta.insert("group".into(), "2".into());
        assert!(!verify_credential(&bad));
        let mut bad = c.clone();
        bad.meta.insert("extra".into(), String::new());
        assert!(!verify_credential(&bad));
        // flipping any bit of the encoded meta value and re-decoding never verifies
        let enc = c.encode();
        let meta_start = enc.len() - 1;
        for bit in 0..8 {
            let mut e = enc.clone();
            e[meta_start] ^= 1 << bit;
            if let Ok(d) = Credential::decode(&e) {
                assert!(!verify_credential(&d));
            }
        }
    }

    #[test]
    fn swapped_issuer_fails() {
        let mut c = certify(&kp(1), b"x", BTreeMap::new()).unwrap();
        c.issuer_public = kp(2).public().0.to_vec();
        assert!(!verify_credential(&c));
    }

    #[test]
    fn every_truncation_fails() {
        let c = certify(&kp(1), b"rating payload", meta(&[("a", "b")])).unwrap();
        for len in 0..c.entity.len() {
            let mut t = c.clone();
            t.entity.truncate(len);
            assert!(!verify_credential(&t));
        }
        let enc = c.encode();
        for len in 0..enc.len() {
            assert!(Credential::decode(&enc[..len]).map(|d| !verify_credential(&d)).unwrap_or(true));
        }
    }

    #[test]
    fn malformed_key_and_signature_lengths_do_not_panic() {
        assert!(!verify_signature(&[1, 2, 3], b"m", &[0; 64]));
        assert!(!verify_signature(&[0; 32], b"m", &[0; 3]));
        assert!(!verify_signature(&[0xff; 32], b"m", &[0; 64]));
    }

    #[test]
    fn seal_roundtrip_and_label_binding() {
        let mut rng = ChaCha20Rng::from_seed([3; 32]);
        let dk = DecryptionKey::generate(&mut rng);
        let other = DecryptionKey::generate(&mut rng);
        let boxed = seal(&dk.public(), "activation", b"secret", &mut rng);
        assert_eq!(dk.open("activation", &boxed).unwrap(), b"secret");
        assert_eq!(dk.open("challenge", &boxed), Err(CryptoError::Open));
        assert_eq!(other.open("activation", &boxed), Err(CryptoError::Open));
        assert_eq!(SealedBox::decode(&boxed.encode()).unwrap(), boxed);
    }

    fn honest_chain() -> (CredentialChain, GroupRegistry) {
        let group = kp(10);
        let aik = kp(11);
        let csk = kp(12);
        let aik_cred = certify(&group, aik.public().as_bytes(), meta(&[("group", "3")])).unwrap();
        let csk_cred = certify(&aik, csk.public().as_bytes(), meta(&[(labels::STATEMENT, labels::SHIELDED_STATEMENT)])).unwrap();
        let rating_cred = certify(&csk, b"rating", BTreeMap::new()).unwrap();
        let registry = GroupRegistry::from([(1, kp(20).public()), (3, group.public())]);
        (CredentialChain { rating_cred, csk_cred, aik_cred }, registry)
    }

    #[test]
    fn honest_chain_verifies_with_group() {
        let (chain, reg) = honest_chain();
        let report = verify_chain(&chain, &reg);
        assert!(report.valid(), "{report:?}");
        assert_eq!(report.group, Some(3));
        assert_eq!(CredentialChain::decode(&chain.encode()).unwrap(), chain);
    }

    #[test]
    fn csk_from_other_aik_is_link_mismatch() {
        let (mut chain, reg) = honest_chain();
        let other_aik = kp(30);
        chain.csk_cred = certify(&other_aik, &chain.csk_cred.entity, chain.csk_cred.meta.clone()).unwrap();
        let report = verify_chain(&chain, &reg);
        assert_eq!(report.fault, Some(ChainFault::LinkMismatch(Link::Csk)));
    }

    #[test]
    fn unknown_group_and_empty_registry() {
        let (chain, mut reg) = honest_chain();
        reg.remove(&3);
        assert_eq!(verify_chain(&chain, &reg).fault, Some(ChainFault::UnknownGroup));
        assert_eq!(verify_chain(&chain, &GroupRegistry::new()).fault, Some(ChainFault::EmptyRegistry));
    }

    #[test]
    fn group_label_must_match_key() {
        let (chain, reg) = honest_chain();
        let swapped = GroupRegistry::from([(2, reg[&3])]);
        assert_eq!(verify_chain(&chain, &swapped).fault, Some(ChainFault::GroupLabelMismatch));
    }
}
