//! Software TPM emulator.
//!
//! Only the behaviour the ticket protocol relies on is emulated: an
//! endorsement key that decrypts PCA messages, identity keys (AIKs) that
//! must be activated before use and may only certify keys or answer
//! issuance challenges, and wrapped signing keys (CSKs) that only the
//! creating instance can load. No private key ever leaves an instance.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::codec::{Canonical, DecodeResult, Reader, Writer};
use crate::crypto::{
    self, issuance_challenge_message, labels, Credential, DecryptionKey, Digest, KeyPair, PublicKey, SealedBox,
};

/// Purpose label for credentials sealed to the endorsement key.
pub const ACTIVATION_LABEL: &str = "tpm/activate-identity";
/// Purpose label for issuance nonces sealed to the endorsement key.
pub const CHALLENGE_LABEL: &str = "tpm/issuance-challenge";

const DEFAULT_MAX_KEYS: usize = 1024;
const INSTANCE_ID_LEN: usize = 16;
const WRAP_NONCE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TpmError {
    #[error("key store full")]
    StoreFull,
    #[error("invalid handle")]
    InvalidHandle,
    #[error("identity key not activated")]
    NotActivated,
    #[error("identity already activated")]
    AlreadyActivated,
    #[error("blob not addressed to this platform")]
    WrongPlatform,
    #[error("activation or challenge names a different identity key")]
    IdentityMismatch,
    #[error("wrapped key belongs to another TPM")]
    ForeignBlob,
    #[error("malformed key blob")]
    MalformedBlob,
    #[error("identity keys cannot sign arbitrary data")]
    ForbiddenAikSigning,
    #[error("{0} keys cannot perform this operation")]
    ForbiddenKeyRole(KeyKind),
}

impl TpmError {
    pub fn code(&self) -> &'static str {
        match self {
            TpmError::StoreFull => "store-full",
            TpmError::InvalidHandle => "invalid-handle",
            TpmError::NotActivated => "not-activated",
            TpmError::AlreadyActivated => "already-activated",
            TpmError::WrongPlatform => "wrong-platform",
            TpmError::IdentityMismatch => "identity-mismatch",
            TpmError::ForeignBlob => "foreign-blob",
            TpmError::MalformedBlob => "malformed-blob",
            TpmError::ForbiddenAikSigning => "forbidden-aik-signing",
            TpmError::ForbiddenKeyRole(_) => "forbidden-key-role",
        }
    }
}

/// Opaque key handle. The upper half identifies the owning instance so a
/// handle never resolves on another TPM.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Handle(u64);

impl fmt::Debug for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Handle({:#018x})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyKind {
    Ek,
    Aik,
    Csk,
}

impl fmt::Display for KeyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyKind::Ek => "EK",
            KeyKind::Aik => "AIK",
            KeyKind::Csk => "CSK",
        })
    }
}

enum Material {
    Decrypt(DecryptionKey),
    Sign(KeyPair),
}

#[cfg(feature = "audit")]
impl Material {
    fn audit_secret(&self) -> Vec<u8> {
        match self {
            Material::Sign(k) => k.audit_secret(),
            Material::Decrypt(k) => k.audit_secret(),
        }
    }
}

struct ShieldedKey {
    kind: KeyKind,
    material: Material,
    activated: bool,
}

impl ShieldedKey {
    fn signing(&self) -> Option<&KeyPair> {
        match &self.material {
            Material::Sign(k) => Some(k),
            Material::Decrypt(_) => None,
        }
    }
}

/// Public half plus the private half encrypted under the creating TPM's
/// storage key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedKey {
    pub public: PublicKey,
    pub private_blob: Vec<u8>,
}

/// Plaintext the PCA seals to the endorsement key to activate an AIK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationContents {
    pub blob_id: [u8; 16],
    pub aik_digest: Digest,
    pub credential: Credential,
}

impl Canonical for ActivationContents {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.blob_id).bytes(&self.aik_digest);
        self.credential.write(w);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(Self { blob_id: r.fixed()?, aik_digest: r.fixed()?, credential: Credential::read(r)? })
    }
}

/// Plaintext the PCA seals to the endorsement key as an issuance challenge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeContents {
    pub challenge_id: [u8; 16],
    pub aik_digest: Digest,
    pub nonce: [u8; 32],
}

impl Canonical for ChallengeContents {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.challenge_id).bytes(&self.aik_digest).bytes(&self.nonce);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(Self { challenge_id: r.fixed()?, aik_digest: r.fixed()?, nonce: r.fixed()? })
    }
}

struct TpmState {
    instance_tag: u32,
    instance_id: [u8; INSTANCE_ID_LEN],
    storage_key: [u8; 32],
    next_index: u32,
    ek_handle: Handle,
    keys: BTreeMap<Handle, ShieldedKey>,
    consumed_blobs: HashSet<[u8; 16]>,
    max_keys: usize,
    rng: ChaCha20Rng,
    #[cfg(feature = "audit")]
    retired: Vec<Vec<u8>>,
}

impl TpmState {
    fn allocate(&mut self, kind: KeyKind, material: Material) -> Result<Handle, TpmError> {
        if self.keys.len() >= self.max_keys {
            return Err(TpmError::StoreFull);
        }
        let handle = Handle(((self.instance_tag as u64) << 32) | self.next_index as u64);
        self.next_index = self.next_index.checked_add(1).ok_or(TpmError::StoreFull)?;
        self.keys.insert(handle, ShieldedKey { kind, material, activated: false });
        Ok(handle)
    }

    fn key(&self, handle: Handle) -> Result<&ShieldedKey, TpmError> {
        self.keys.get(&handle).ok_or(TpmError::InvalidHandle)
    }

    fn ek(&self) -> &DecryptionKey {
        match &self.keys[&self.ek_handle].material {
            Material::Decrypt(k) => k,
            Material::Sign(_) => unreachable!("endorsement key is a decryption key"),
        }
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.storage_key))
    }
}

/// One emulated TPM. Commands on an instance are serialized.
pub struct TpmInstance {
    state: Mutex<TpmState>,
    ek_public: PublicKey,
    platform_info: BTreeMap<String, String>,
}

impl fmt::Debug for TpmInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TpmInstance").field("ek_public", &self.ek_public).finish_non_exhaustive()
    }
}

impl TpmInstance {
    /// A seed makes every key and blob the instance produces reproducible.
    pub fn new(seed: Option<[u8; 32]>, platform_info: BTreeMap<String, String>) -> Self {
        let mut rng = match seed {
            Some(s) => ChaCha20Rng::from_seed(s),
            None => ChaCha20Rng::from_entropy(),
        };
        let instance_tag = rng.next_u32() | 1;
        let mut instance_id = [0u8; INSTANCE_ID_LEN];
        rng.fill_bytes(&mut instance_id);
        let mut storage_key = [0u8; 32];
        rng.fill_bytes(&mut storage_key);
        let ek = DecryptionKey::generate(&mut rng);
        let ek_public = ek.public();
        let mut state = TpmState {
            instance_tag,
            instance_id,
            storage_key,
            next_index: 1,
            ek_handle: Handle(0),
            keys: BTreeMap::new(),
            consumed_blobs: HashSet::new(),
            max_keys: DEFAULT_MAX_KEYS,
            rng,
            #[cfg(feature = "audit")]
            retired: Vec::new(),
        };
        state.ek_handle = state.allocate(KeyKind::Ek, Material::Decrypt(ek)).expect("empty store");
        Self { state: Mutex::new(state), ek_public, platform_info }
    }

    pub fn with_max_keys(self, max_keys: usize) -> Self {
        self.state.lock().max_keys = max_keys;
        self
    }

    pub fn ek_public(&self) -> PublicKey {
        self.ek_public
    }

    pub fn ek_handle(&self) -> Handle {
        self.state.lock().ek_handle
    }

    pub fn platform_info(&self) -> &BTreeMap<String, String> {
        &self.platform_info
    }

    pub fn key_kind(&self, handle: Handle) -> Result<KeyKind, TpmError> {
        Ok(self.state.lock().key(handle)?.kind)
    }

    pub fn is_activated(&self, handle: Handle) -> Result<bool, TpmError> {
        let st = self.state.lock();
        let key = st.key(handle)?;
        if key.kind != KeyKind::Aik {
            return Err(TpmError::InvalidHandle);
        }
        Ok(key.activated)
    }

    pub fn public_key(&self, handle: Handle) -> Result<PublicKey, TpmError> {
        let st = self.state.lock();
        Ok(match &st.key(handle)?.material {
            Material::Sign(k) => k.public(),
            Material::Decrypt(k) => k.public(),
        })
    }

    /// TPM_MakeIdentity: a fresh, not yet activated AIK.
    pub fn make_identity(&self) -> Result<(Handle, PublicKey), TpmError> {
        let mut st = self.state.lock();
        let pair = KeyPair::generate(&mut st.rng);
        let public = pair.public();
        let handle = st.allocate(KeyKind::Aik, Material::Sign(pair))?;
        Ok((handle, public))
    }

    /// Answers a sealed issuance challenge: decrypts it with the EK and signs
    /// the tagged nonce with the named AIK. This is the only signature an AIK
    /// produces over protocol bytes.
    pub fn respond_to_challenge(&self, aik: Handle, challenge: &SealedBox) -> Result<([u8; 16], Vec<u8>), TpmError> {
        let st = self.state.lock();
        let plain = st.ek().open(CHALLENGE_LABEL, challenge).map_err(|_| TpmError::WrongPlatform)?;
        let contents = ChallengeContents::decode(&plain).map_err(|_| TpmError::MalformedBlob)?;
        let key = st.key(aik)?;
        if key.kind != KeyKind::Aik {
            return Err(TpmError::InvalidHandle);
        }
        let pair = key.signing().ok_or(TpmError::InvalidHandle)?;
        if pair.key_id() != contents.aik_digest {
            return Err(TpmError::IdentityMismatch);
        }
        let msg = issuance_challenge_message(&contents.challenge_id, &contents.nonce);
        Ok((contents.challenge_id, pair.sign(&msg)))
    }

    /// TPM_ActivateIdentity: opens the PCA's blob with the EK, checks it names
    /// this AIK and marks the AIK usable. Each blob activates at most once.
    pub fn activate_identity(&self, handle: Handle, blob: &SealedBox) -> Result<Credential, TpmError> {
        let mut st = self.state.lock();
        let plain = st.ek().open(ACTIVATION_LABEL, blob).map_err(|_| TpmError::WrongPlatform)?;
        let contents = ActivationContents::decode(&plain).map_err(|_| TpmError::MalformedBlob)?;
        let key = st.key(handle)?;
        if key.kind != KeyKind::Aik {
            return Err(TpmError::InvalidHandle);
        }
        if st.consumed_blobs.contains(&contents.blob_id) || key.activated {
            return Err(TpmError::AlreadyActivated);
        }
        if key.signing().map(KeyPair::key_id) != Some(contents.aik_digest) {
            return Err(TpmError::IdentityMismatch);
        }
        st.consumed_blobs.insert(contents.blob_id);
        st.keys.get_mut(&handle).expect("checked above").activated = true;
        Ok(contents.credential)
    }

    /// TPM_CMK_CreateKey: a signing key whose private half is wrapped for
    /// this instance only.
    pub fn cmk_create_key(&self) -> Result<WrappedKey, TpmError> {
        let mut st = self.state.lock();
        let pair = KeyPair::generate(&mut st.rng);
        let mut nonce = [0u8; WRAP_NONCE_LEN];
        st.rng.fill_bytes(&mut nonce);
        let aad = wrap_aad(&st.instance_id, &pair.public());
        let sealed = st
            .cipher()
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: &pair.secret_bytes(), aad: &aad })
            .expect("in-memory encryption");
        let mut private_blob = Vec::with_capacity(INSTANCE_ID_LEN + WRAP_NONCE_LEN + sealed.len());
        private_blob.extend_from_slice(&st.instance_id);
        private_blob.extend_from_slice(&nonce);
        private_blob.extend_from_slice(&sealed);
        Ok(WrappedKey { public: pair.public(), private_blob })
    }

    /// TPM_LoadKey: unwraps a key created by this instance as a CSK.
    pub fn load_key(&self, wrapped: &WrappedKey) -> Result<Handle, TpmError> {
        let mut st = self.state.lock();
        let blob = &wrapped.private_blob;
        if blob.len() < INSTANCE_ID_LEN + WRAP_NONCE_LEN {
            return Err(TpmError::MalformedBlob);
        }
        if blob[..INSTANCE_ID_LEN] != st.instance_id {
            return Err(TpmError::ForeignBlob);
        }
        let nonce = &blob[INSTANCE_ID_LEN..INSTANCE_ID_LEN + WRAP_NONCE_LEN];
        let aad = wrap_aad(&st.instance_id, &wrapped.public);
        let secret = st
            .cipher()
            .decrypt(Nonce::from_slice(nonce), Payload { msg: &blob[INSTANCE_ID_LEN + WRAP_NONCE_LEN..], aad: &aad })
            .map_err(|_| TpmError::MalformedBlob)?;
        let secret: [u8; 32] = secret.try_into().map_err(|_| TpmError::MalformedBlob)?;
        let pair = KeyPair::from_secret(secret);
        if pair.public() != wrapped.public {
            return Err(TpmError::MalformedBlob);
        }
        st.allocate(KeyKind::Csk, Material::Sign(pair))
    }

    /// TPM_CertifyKey: the activated AIK vouches that the CSK is shielded.
    pub fn certify_key(&self, aik: Handle, csk: Handle) -> Result<Credential, TpmError> {
        let st = self.state.lock();
        let aik_key = st.key(aik)?;
        let csk_key = st.key(csk)?;
        if aik_key.kind != KeyKind::Aik {
            return Err(TpmError::ForbiddenKeyRole(aik_key.kind));
        }
        if csk_key.kind != KeyKind::Csk {
            return Err(TpmError::InvalidHandle);
        }
        if !aik_key.activated {
            return Err(TpmError::NotActivated);
        }
        let aik_pair = aik_key.signing().ok_or(TpmError::InvalidHandle)?;
        let csk_public = csk_key.signing().ok_or(TpmError::InvalidHandle)?.public();
        let meta = BTreeMap::from([
            (labels::STATEMENT.to_string(), labels::SHIELDED_STATEMENT.to_string()),
            (labels::KEY_USAGE.to_string(), "signing".to_string()),
        ]);
        Ok(crypto::certify(aik_pair, csk_public.as_bytes(), meta).expect("public key is non-empty"))
    }

    /// Signs a payload. Only CSKs may sign; identity keys are refused.
    pub fn sign_with_key(&self, handle: Handle, payload: &[u8]) -> Result<Vec<u8>, TpmError> {
        let st = self.state.lock();
        let key = st.key(handle)?;
        match key.kind {
            KeyKind::Aik => Err(TpmError::ForbiddenAikSigning),
            KeyKind::Ek => Err(TpmError::ForbiddenKeyRole(KeyKind::Ek)),
            KeyKind::Csk => Ok(key.signing().ok_or(TpmError::InvalidHandle)?.sign(payload)),
        }
    }

    /// Evicts a key. The endorsement key cannot be flushed.
    pub fn flush_key(&self, handle: Handle) -> Result<(), TpmError> {
        let mut st = self.state.lock();
        if handle == st.ek_handle {
            return Err(TpmError::ForbiddenKeyRole(KeyKind::Ek));
        }
        let key = st.keys.remove(&handle).ok_or(TpmError::InvalidHandle)?;
        #[cfg(feature = "audit")]
        st.retired.push(key.material.audit_secret());
        drop(key);
        Ok(())
    }

    pub fn key_count(&self) -> usize {
        self.state.lock().keys.len()
    }

    /// Every secret the instance holds or has held, for leak scans.
    #[cfg(feature = "audit")]
    pub fn audit_private_material(&self) -> Vec<Vec<u8>> {
        let st = self.state.lock();
        let mut out = vec![st.storage_key.to_vec()];
        out.extend(st.keys.values().map(|k| k.material.audit_secret()));
        out.extend(st.retired.iter().cloned());
        out
    }
}

fn wrap_aad(instance_id: &[u8], public: &PublicKey) -> Vec<u8> {
    let mut w = Writer::new();
    w.str("tpm/wrapped-key").bytes(instance_id).bytes(public.as_bytes());
    w.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{seal, verify_credential, verify_signature};

    fn tpm(n: u8) -> TpmInstance {
        TpmInstance::new(Some([n; 32]), BTreeMap::new())
    }

    fn activation_blob(tpm: &TpmInstance, aik: &PublicKey, id: u8) -> SealedBox {
        let group = KeyPair::from_secret([99; 32]);
        let credential = crypto::certify(&group, aik.as_bytes(), BTreeMap::new()).unwrap();
        let contents = ActivationContents { blob_id: [id; 16], aik_digest: aik.key_id(), credential };
        seal(&tpm.ek_public(), ACTIVATION_LABEL, &contents.encode(), &mut ChaCha20Rng::from_seed([id; 32]))
    }

    fn activated_aik(t: &TpmInstance) -> Handle {
        let (h, public) = t.make_identity().unwrap();
        t.activate_identity(h, &activation_blob(t, &public, 1)).unwrap();
        h
    }

    #[test]
    fn make_identity_is_unactivated_and_fresh() {
        let t = tpm(1);
        let (h1, p1) = t.make_identity().unwrap();
        let (h2, p2) = t.make_identity().unwrap();
        assert_ne!(h1, h2);
        assert_ne!(p1, p2);
        assert!(!t.is_activated(h1).unwrap());
    }

    #[test]
    fn certify_requires_activation() {
        let t = tpm(1);
        let (aik, _) = t.make_identity().unwrap();
        let csk = t.load_key(&t.cmk_create_key().unwrap()).unwrap();
        assert_eq!(t.certify_key(aik, csk), Err(TpmError::NotActivated));
    }

    #[test]
    fn activation_flow_and_replay() {
        let t = tpm(1);
        let (h, public) = t.make_identity().unwrap();
        let blob = activation_blob(&t, &public, 7);
        let cred = t.activate_identity(h, &blob).unwrap();
        assert!(verify_credential(&cred));
        assert!(t.is_activated(h).unwrap());
        assert_eq!(t.activate_identity(h, &blob), Err(TpmError::AlreadyActivated));
        // consumed blob stays consumed even for a different AIK
        let (h2, _) = t.make_identity().unwrap();
        assert_eq!(t.activate_identity(h2, &blob), Err(TpmError::AlreadyActivated));
    }

    #[test]
    fn activation_for_other_platform_or_aik() {
        let a = tpm(1);
        let b = tpm(2);
        let (h, public) = a.make_identity().unwrap();
        let blob_for_b = activation_blob(&b, &public, 3);
        assert_eq!(a.activate_identity(h, &blob_for_b), Err(TpmError::WrongPlatform));
        let (_, other) = a.make_identity().unwrap();
        assert_eq!(a.activate_identity(h, &activation_blob(&a, &other, 4)), Err(TpmError::IdentityMismatch));
        assert_eq!(a.activate_identity(a.ek_handle(), &activation_blob(&a, &public, 5)), Err(TpmError::InvalidHandle));
    }

    #[test]
    fn wrapped_key_locality() {
        let a = tpm(1);
        let b = tpm(2);
        let w = a.cmk_create_key().unwrap();
        let h1 = a.load_key(&w).unwrap();
        let h2 = a.load_key(&w).unwrap();
        assert_ne!(h1, h2);
        assert_eq!(a.public_key(h1).unwrap(), w.public);
        assert_eq!(a.public_key(h2).unwrap(), w.public);
        assert_eq!(b.load_key(&w), Err(TpmError::ForeignBlob));
        let mut bad = w.clone();
        *bad.private_blob.last_mut().unwrap() ^= 1;
        assert_eq!(a.load_key(&bad), Err(TpmError::MalformedBlob));
        bad = w.clone();
        bad.private_blob.truncate(10);
        assert_eq!(a.load_key(&bad), Err(TpmError::MalformedBlob));
        bad = w.clone();
        bad.public = a.make_identity().unwrap().1;
        assert_eq!(a.load_key(&bad), Err(TpmError::MalformedBlob));
    }

    #[test]
    fn wrapped_blob_hides_private_bytes() {
        let t = tpm(1);
        for _ in 0..20 {
            let w = t.cmk_create_key().unwrap();
            let h = t.load_key(&w).unwrap();
            let secret = {
                let st = t.state.lock();
                st.key(h).unwrap().signing().unwrap().secret_bytes()
            };
            assert!(!w.private_blob.windows(8).any(|win| secret.windows(8).any(|s| s == win)));
        }
    }

    #[test]
    fn role_discipline_for_signing() {
        let t = tpm(1);
        let aik = activated_aik(&t);
        let csk = t.load_key(&t.cmk_create_key().unwrap()).unwrap();
        let sig = t.sign_with_key(csk, b"r").unwrap();
        assert!(verify_signature(t.public_key(csk).unwrap().as_bytes(), b"r", &sig));
        assert_eq!(t.sign_with_key(aik, b"r"), Err(TpmError::ForbiddenAikSigning));
        assert_eq!(t.sign_with_key(t.ek_handle(), b"r"), Err(TpmError::ForbiddenKeyRole(KeyKind::Ek)));
        t.flush_key(csk).unwrap();
        assert_eq!(t.sign_with_key(csk, b"r"), Err(TpmError::InvalidHandle));
    }

    #[test]
    fn certify_key_honest_and_cross_instance() {
        let a = tpm(1);
        let b = tpm(2);
        let aik = activated_aik(&a);
        let csk = a.load_key(&a.cmk_create_key().unwrap()).unwrap();
        let cred = a.certify_key(aik, csk).unwrap();
        assert!(verify_credential(&cred));
        assert_eq!(cred.entity, a.public_key(csk).unwrap().as_bytes());
        assert_eq!(cred.meta[labels::STATEMENT], labels::SHIELDED_STATEMENT);
        let foreign_csk = b.load_key(&b.cmk_create_key().unwrap()).unwrap();
        assert_eq!(a.certify_key(aik, foreign_csk), Err(TpmError::InvalidHandle));
        assert_eq!(a.certify_key(csk, csk), Err(TpmError::ForbiddenKeyRole(KeyKind::Csk)));
    }

    #[test]
    fn challenge_response_is_scoped() {
        let t = tpm(1);
        let (aik, public) = t.make_identity().unwrap();
        let contents = ChallengeContents { challenge_id: [5; 16], aik_digest: public.key_id(), nonce: [6; 32] };
        let mut rng = ChaCha20Rng::from_seed([0; 32]);
        let sealed = seal(&t.ek_public(), CHALLENGE_LABEL, &contents.encode(), &mut rng);
        let (id, sig) = t.respond_to_challenge(aik, &sealed).unwrap();
        assert_eq!(id, [5; 16]);
        assert!(verify_signature(public.as_bytes(), &issuance_challenge_message(&[5; 16], &[6; 32]), &sig));
        // an activation-labelled box is not a challenge
        let as_activation = seal(&t.ek_public(), ACTIVATION_LABEL, &contents.encode(), &mut rng);
        assert_eq!(t.respond_to_challenge(aik, &as_activation), Err(TpmError::WrongPlatform));
        let (other, _) = t.make_identity().unwrap();
        assert_eq!(t.respond_to_challenge(other, &sealed), Err(TpmError::IdentityMismatch));
    }

    #[test]
    fn store_full_and_handles_not_reused() {
        let t = tpm(1).with_max_keys(3);
        let (a, _) = t.make_identity().unwrap();
        t.make_identity().unwrap();
        assert_eq!(t.make_identity(), Err(TpmError::StoreFull));
        t.flush_key(a).unwrap();
        let (c, _) = t.make_identity().unwrap();
        assert!(c > a);
        assert_eq!(t.flush_key(t.ek_handle()), Err(TpmError::ForbiddenKeyRole(KeyKind::Ek)));
    }

    #[test]
    fn seeded_instances_are_reproducible() {
        assert_eq!(tpm(4).ek_public(), tpm(4).ek_public());
        assert_eq!(tpm(4).make_identity().unwrap().1, tpm(4).make_identity().unwrap().1);
    }
}
