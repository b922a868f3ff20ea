//! Privacy CA: registers platforms, runs the challenge/response issuance
//! handshake, issues group credentials for AIKs and alone keeps the mapping
//! from AIKs back to platforms.
//!
//! Issuance is three messages: a credential request (authorized before any
//! handshake traffic), a challenge sealed to the platform's endorsement key
//! that the TPM answers by signing the nonce with the requesting AIK, and an
//! activation blob carrying `Cert(AIK, g)` sealed to the same endorsement key.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::clock::{SimClock, Timestamp};
use crate::codec::{Canonical, DecodeError, DecodeResult, Reader, Writer};
use crate::cp::{Amount, ChargePhase, ChargeReceipt, ChargingProvider, CpError};
use crate::crypto::{
    self, digest, issuance_challenge_message, labels, verify_signature, Digest, GroupId, GroupRegistry, KeyPair,
    PublicKey, SealedBox,
};
use crate::journal::{self, Journal, JournalError};
use crate::rs::{ExPostCharging, ExPostError};
use crate::tpm::{ActivationContents, ChallengeContents, ACTIVATION_LABEL, CHALLENGE_LABEL};
use crate::Impact;

/// Challenges expire after five minutes of simulated time.
pub const DEFAULT_CHALLENGE_TTL_MS: u64 = 5 * 60 * 1000;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("endorsement key already registered")]
    DuplicateEk,
    #[error("platform not registered")]
    UnregisteredPlatform,
    #[error("unknown group {0}")]
    UnknownGroup(GroupId),
    #[error("handshake failed: {0}")]
    HandshakeFailed(&'static str),
    #[error("missing or invalid authority token")]
    Forbidden,
    #[error("no identity record for this AIK")]
    NotFound,
    #[error("charging declined: {0}")]
    CpDeclined(CpError),
    #[error("charging failed: {0}")]
    Charging(CpError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

impl PcaError {
    pub fn code(&self) -> &'static str {
        match self {
            PcaError::DuplicateEk => "duplicate-ek",
            PcaError::UnregisteredPlatform => "unregistered-platform",
            PcaError::UnknownGroup(_) => "unknown-group",
            PcaError::HandshakeFailed(_) => "handshake-failed",
            PcaError::Forbidden => "forbidden",
            PcaError::NotFound => "not-found",
            PcaError::CpDeclined(_) => "cp-declined",
            PcaError::Charging(e) => e.code(),
            PcaError::InvalidConfig(_) => "invalid-config",
            PcaError::Journal(_) => "internal",
        }
    }

    fn from_cp(e: CpError) -> Self {
        match e {
            CpError::Declined { .. } => PcaError::CpDeclined(e),
            other => PcaError::Charging(other),
        }
    }
}

/// Digest of a platform's endorsement public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlatformId(pub Digest);

impl PlatformId {
    pub fn of(ek_public: &PublicKey) -> Self {
        PlatformId(digest(ek_public.as_bytes()))
    }
}

impl fmt::Debug for PlatformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlatformId({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for PlatformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Canonical for PlatformId {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(PlatformId(r.fixed()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub price_class: String,
    pub impact: Impact,
    /// Reputation system the group's tickets are valid for.
    pub rs_id: String,
}

pub struct GroupEntry {
    keys: KeyPair,
    pub price_class: String,
    pub impact: Impact,
    pub rs_id: String,
}

impl GroupEntry {
    pub fn public(&self) -> PublicKey {
        self.keys.public()
    }

    #[cfg(feature = "audit")]
    pub fn audit_secret(&self) -> Vec<u8> {
        self.keys.audit_secret()
    }
}

/// Groups `1..=G`, one shared key pair per group.
pub struct GroupTable {
    groups: BTreeMap<GroupId, GroupEntry>,
}

impl fmt::Debug for GroupTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.groups.iter().map(|(g, e)| (g, e.public()))).finish()
    }
}

impl GroupTable {
    pub fn generate<R: RngCore + CryptoRng>(specs: Vec<GroupSpec>, rng: &mut R) -> Result<Self, PcaError> {
        if specs.is_empty() {
            return Err(PcaError::InvalidConfig("at least one group is required"));
        }
        let mut groups = BTreeMap::new();
        for (i, spec) in specs.into_iter().enumerate() {
            if *spec.impact.numer() <= 0 {
                return Err(PcaError::InvalidConfig("group impact must be positive"));
            }
            let g = GroupId::try_from(i + 1).map_err(|_| PcaError::InvalidConfig("too many groups"))?;
            groups.insert(
                g,
                GroupEntry { keys: KeyPair::generate(rng), price_class: spec.price_class, impact: spec.impact, rs_id: spec.rs_id },
            );
        }
        Ok(Self { groups })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, g: GroupId) -> Option<&GroupEntry> {
        self.groups.get(&g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &GroupEntry)> {
        self.groups.iter().map(|(g, e)| (*g, e))
    }

    pub fn public_registry(&self) -> GroupRegistry {
        self.groups.iter().map(|(g, e)| (*g, e.public())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issuance {
    pub aik_digest: Digest,
    pub group: GroupId,
    pub at: Timestamp,
    pub identity_label: String,
}

impl Canonical for Issuance {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.aik_digest).u32(self.group).u64(self.at).str(&self.identity_label);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(Issuance { aik_digest: r.fixed()?, group: r.u32()?, at: r.u64()?, identity_label: r.str()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRecord {
    pub platform_id: PlatformId,
    pub ek_public: PublicKey,
    pub user_account: String,
    pub issued: Vec<Issuance>,
    pub blacklisted: bool,
}

impl Canonical for IdentityRecord {
    fn write(&self, w: &mut Writer) {
        self.platform_id.write(w);
        w.bytes(self.ek_public.as_bytes()).str(&self.user_account);
        w.seq(&self.issued, |w, i| i.write(w));
        w.bool(self.blacklisted);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(IdentityRecord {
            platform_id: PlatformId::read(r)?,
            ek_public: PublicKey(r.fixed()?),
            user_account: r.str()?,
            issued: r.seq(Issuance::read)?,
            blacklisted: r.bool()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CredentialRequest {
    pub aik_public: PublicKey,
    pub group: GroupId,
    pub platform_id: PlatformId,
    /// Opaque supplementary data; kept with the pending issuance, never interpreted.
    pub supplementary: BTreeMap<String, String>,
}

impl Canonical for CredentialRequest {
    fn write(&self, w: &mut Writer) {
        w.bytes(self.aik_public.as_bytes()).u32(self.group);
        self.platform_id.write(w);
        w.str_map(&self.supplementary);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(CredentialRequest {
            aik_public: PublicKey(r.fixed()?),
            group: r.u32()?,
            platform_id: PlatformId::read(r)?,
            supplementary: r.str_map()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub challenge_id: [u8; 16],
    pub sealed: SealedBox,
    pub expires_at: Timestamp,
}

impl Canonical for Challenge {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.challenge_id);
        self.sealed.write(w);
        w.u64(self.expires_at);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(Challenge { challenge_id: r.fixed()?, sealed: SealedBox::read(r)?, expires_at: r.u64()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    Blacklisted,
    ChargeNotAuthorized,
    AikAlreadyCertified,
}

impl DenyReason {
    pub fn code(&self) -> &'static str {
        match self {
            DenyReason::Blacklisted => "blacklisted",
            DenyReason::ChargeNotAuthorized => "charge-not-authorized",
            DenyReason::AikAlreadyCertified => "aik-already-certified",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        [DenyReason::Blacklisted, DenyReason::ChargeNotAuthorized, DenyReason::AikAlreadyCertified]
            .into_iter()
            .find(|d| d.code() == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestOutcome {
    Challenge(Challenge),
    Denied(DenyReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeResponse {
    pub challenge_id: [u8; 16],
    pub signature: Vec<u8>,
}

impl Canonical for ChallengeResponse {
    fn write(&self, w: &mut Writer) {
        w.bytes(&self.challenge_id).bytes(&self.signature);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(ChallengeResponse { challenge_id: r.fixed()?, signature: r.bytes()? })
    }
}

#[derive(Debug, Clone)]
struct PendingIssuance {
    nonce: [u8; 32],
    aik_public: PublicKey,
    group: GroupId,
    platform_id: PlatformId,
    expires: Timestamp,
    #[allow(dead_code)]
    supplementary: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChargingPhases {
    pub acquisition: bool,
    pub ex_post: bool,
}

impl ChargingPhases {
    pub const ACQUISITION: Self = Self { acquisition: true, ex_post: false };
    pub const EX_POST: Self = Self { acquisition: false, ex_post: true };
    pub const BOTH: Self = Self { acquisition: true, ex_post: true };
    pub const NONE: Self = Self { acquisition: false, ex_post: false };
}

#[derive(Debug, Clone)]
pub struct PcaConfig {
    pub authority_token: String,
    pub charging: ChargingPhases,
    /// Non-identifying platform description placed in every AIK credential.
    pub platform_class: String,
    pub challenge_ttl_ms: u64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            authority_token: String::new(),
            charging: ChargingPhases::ACQUISITION,
            platform_class: "tpm-1.2-compliant".into(),
            challenge_ttl_ms: DEFAULT_CHALLENGE_TTL_MS,
        }
    }
}

enum PcaRecord {
    Register { platform_id: PlatformId, ek_public: PublicKey, account: String },
    Issue { platform_id: PlatformId, issuance: Issuance },
    Blacklist { platform_id: PlatformId, flag: bool },
}

impl Canonical for PcaRecord {
    fn write(&self, w: &mut Writer) {
        match self {
            PcaRecord::Register { platform_id, ek_public, account } => {
                w.u8(0);
                platform_id.write(w);
                w.bytes(ek_public.as_bytes()).str(account);
            }
            PcaRecord::Issue { platform_id, issuance } => {
                w.u8(1);
                platform_id.write(w);
                issuance.write(w);
            }
            PcaRecord::Blacklist { platform_id, flag } => {
                w.u8(2);
                platform_id.write(w);
                w.bool(*flag);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        match r.u8()? {
            0 => Ok(PcaRecord::Register { platform_id: PlatformId::read(r)?, ek_public: PublicKey(r.fixed()?), account: r.str()? }),
            1 => Ok(PcaRecord::Issue { platform_id: PlatformId::read(r)?, issuance: Issuance::read(r)? }),
            2 => Ok(PcaRecord::Blacklist { platform_id: PlatformId::read(r)?, flag: r.bool()? }),
            tag => Err(DecodeError::InvalidTag { what: "pca record", tag }),
        }
    }
}

struct PcaState {
    platforms: BTreeMap<PlatformId, IdentityRecord>,
    aik_index: HashMap<Digest, PlatformId>,
    pending: HashMap<[u8; 16], PendingIssuance>,
    receipts: Vec<ChargeReceipt>,
    challenges_issued: u64,
    rng: ChaCha20Rng,
}

impl PcaState {
    fn apply(&mut self, record: PcaRecord) -> Result<(), PcaError> {
        match record {
            PcaRecord::Register { platform_id, ek_public, account } => {
                if self.platforms.contains_key(&platform_id) {
                    return Err(PcaError::DuplicateEk);
                }
                self.platforms.insert(
                    platform_id,
                    IdentityRecord { platform_id, ek_public, user_account: account, issued: Vec::new(), blacklisted: false },
                );
            }
            PcaRecord::Issue { platform_id, issuance } => {
                let rec = self.platforms.get_mut(&platform_id).ok_or(PcaError::UnregisteredPlatform)?;
                self.aik_index.insert(issuance.aik_digest, platform_id);
                rec.issued.push(issuance);
            }
            PcaRecord::Blacklist { platform_id, flag } => {
                self.platforms.get_mut(&platform_id).ok_or(PcaError::UnregisteredPlatform)?.blacklisted = flag;
            }
        }
        Ok(())
    }
}

pub struct PrivacyCa {
    config: PcaConfig,
    groups: GroupTable,
    state: Mutex<PcaState>,
    cp: Arc<ChargingProvider>,
    clock: SimClock,
    journal: Option<Journal>,
}

impl fmt::Debug for PrivacyCa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivacyCa").field("groups", &self.groups).finish_non_exhaustive()
    }
}

impl PrivacyCa {
    pub fn new(config: PcaConfig, groups: GroupTable, cp: Arc<ChargingProvider>, clock: SimClock, seed: [u8; 32]) -> Self {
        let state = PcaState {
            platforms: BTreeMap::new(),
            aik_index: HashMap::new(),
            pending: HashMap::new(),
            receipts: Vec::new(),
            challenges_issued: 0,
            rng: ChaCha20Rng::from_seed(seed),
        };
        Self { config, groups, state: Mutex::new(state), cp, clock, journal: None }
    }

    /// Like [`PrivacyCa::new`], replaying and then appending to the issuance
    /// log at `path` so identity resolution survives restarts.
    pub fn open(
        config: PcaConfig,
        groups: GroupTable,
        cp: Arc<ChargingProvider>,
        clock: SimClock,
        seed: [u8; 32],
        path: impl AsRef<Path>,
    ) -> Result<Self, PcaError> {
        let path = path.as_ref();
        let mut pca = Self::new(config, groups, cp, clock, seed);
        {
            let mut st = pca.state.lock();
            for (idx, bytes) in journal::read_records(path)?.iter().enumerate() {
                let record = PcaRecord::decode(bytes).map_err(|e| JournalError::decode(path, idx + 1, e))?;
                st.apply(record)?;
            }
        }
        pca.journal = Some(Journal::open(path)?);
        Ok(pca)
    }

    pub fn groups(&self) -> &GroupTable {
        &self.groups
    }

    pub fn group_registry(&self) -> GroupRegistry {
        self.groups.public_registry()
    }

    pub fn config(&self) -> &PcaConfig {
        &self.config
    }

    fn log(&self, record: &PcaRecord) -> Result<(), PcaError> {
        if let Some(j) = &self.journal {
            j.append(&record.encode())?;
        }
        Ok(())
    }

    pub fn register_platform(&self, ek_public: PublicKey, user_account: &str) -> Result<PlatformId, PcaError> {
        let platform_id = PlatformId::of(&ek_public);
        let mut st = self.state.lock();
        if st.platforms.contains_key(&platform_id) {
            return Err(PcaError::DuplicateEk);
        }
        let record = PcaRecord::Register { platform_id, ek_public, account: user_account.to_string() };
        self.log(&record)?;
        st.apply(record)?;
        Ok(platform_id)
    }

    /// Authorizes a credential request and, only if it passes, opens the
    /// handshake with a challenge sealed to the platform's endorsement key.
    pub fn request_credential(&self, req: &CredentialRequest) -> Result<RequestOutcome, PcaError> {
        let mut st = self.state.lock();
        let record = st.platforms.get(&req.platform_id).ok_or(PcaError::UnregisteredPlatform)?;
        if self.groups.get(req.group).is_none() {
            return Err(PcaError::UnknownGroup(req.group));
        }
        if record.blacklisted {
            return Ok(RequestOutcome::Denied(DenyReason::Blacklisted));
        }
        if st.aik_index.contains_key(&req.aik_public.key_id()) {
            return Ok(RequestOutcome::Denied(DenyReason::AikAlreadyCertified));
        }
        if self.config.charging.acquisition && !self.cp.authorize(&record.user_account, req.group).map_err(PcaError::from_cp)? {
            return Ok(RequestOutcome::Denied(DenyReason::ChargeNotAuthorized));
        }
        let ek_public = record.ek_public;

        let mut challenge_id = [0u8; 16];
        let mut nonce = [0u8; 32];
        st.rng.fill_bytes(&mut challenge_id);
        st.rng.fill_bytes(&mut nonce);
        let contents = ChallengeContents { challenge_id, aik_digest: req.aik_public.key_id(), nonce };
        let sealed = crypto::seal(&ek_public, CHALLENGE_LABEL, &contents.encode(), &mut st.rng);
        let expires = self.clock.now() + self.config.challenge_ttl_ms;
        st.pending.insert(
            challenge_id,
            PendingIssuance {
                nonce,
                aik_public: req.aik_public,
                group: req.group,
                platform_id: req.platform_id,
                expires,
                supplementary: req.supplementary.clone(),
            },
        );
        st.challenges_issued += 1;
        Ok(RequestOutcome::Challenge(Challenge { challenge_id, sealed, expires_at: expires }))
    }

    /// Checks the AIK's answer, charges if configured and returns `Cert(AIK, g)`
    /// sealed to the platform's endorsement key. A challenge is consumed by
    /// the first completion attempt, successful or not.
    pub fn complete_handshake(&self, resp: &ChallengeResponse) -> Result<SealedBox, PcaError> {
        let mut st = self.state.lock();
        let pending = st.pending.remove(&resp.challenge_id).ok_or(PcaError::HandshakeFailed("unknown or used challenge"))?;
        if self.clock.now() > pending.expires {
            return Err(PcaError::HandshakeFailed("challenge expired"));
        }
        let msg = issuance_challenge_message(&resp.challenge_id, &pending.nonce);
        if !verify_signature(pending.aik_public.as_bytes(), &msg, &resp.signature) {
            return Err(PcaError::HandshakeFailed("bad challenge signature"));
        }
        let aik_digest = pending.aik_public.key_id();
        if st.aik_index.contains_key(&aik_digest) {
            return Err(PcaError::HandshakeFailed("AIK already certified"));
        }
        let record = st.platforms.get(&pending.platform_id).ok_or(PcaError::UnregisteredPlatform)?;
        let (ek_public, account) = (record.ek_public, record.user_account.clone());
        let entry = self.groups.get(pending.group).ok_or(PcaError::UnknownGroup(pending.group))?;

        if self.config.charging.acquisition {
            let receipt = self.cp.charge_ticket(&account, pending.group, ChargePhase::Acquisition).map_err(PcaError::from_cp)?;
            st.receipts.push(receipt);
        }

        let mut label = [0u8; 16];
        st.rng.fill_bytes(&mut label);
        let identity_label = hex::encode(label);
        let meta = BTreeMap::from([
            (labels::GROUP.to_string(), pending.group.to_string()),
            (labels::IDENTITY_LABEL.to_string(), identity_label.clone()),
            (labels::PLATFORM_CLASS.to_string(), self.config.platform_class.clone()),
            (labels::RS.to_string(), entry.rs_id.clone()),
        ]);
        let credential = crypto::certify(&entry.keys, pending.aik_public.as_bytes(), meta).expect("non-empty entity");

        let issuance = Issuance { aik_digest, group: pending.group, at: self.clock.now(), identity_label };
        let record = PcaRecord::Issue { platform_id: pending.platform_id, issuance };
        self.log(&record)?;
        st.apply(record)?;

        let mut blob_id = [0u8; 16];
        st.rng.fill_bytes(&mut blob_id);
        let contents = ActivationContents { blob_id, aik_digest, credential };
        Ok(crypto::seal(&ek_public, ACTIVATION_LABEL, &contents.encode(), &mut st.rng))
    }

    pub fn resolve_identity(&self, aik_digest: &Digest, authority_token: &str) -> Result<IdentityRecord, PcaError> {
        if self.config.authority_token.is_empty() || authority_token != self.config.authority_token {
            return Err(PcaError::Forbidden);
        }
        let st = self.state.lock();
        let platform = st.aik_index.get(aik_digest).ok_or(PcaError::NotFound)?;
        Ok(st.platforms[platform].clone())
    }

    pub fn initiate_charging(&self, platform_id: &PlatformId, group: GroupId, phase: ChargePhase) -> Result<ChargeReceipt, PcaError> {
        let mut st = self.state.lock();
        let account = st.platforms.get(platform_id).ok_or(PcaError::UnregisteredPlatform)?.user_account.clone();
        if self.groups.get(group).is_none() {
            return Err(PcaError::UnknownGroup(group));
        }
        let receipt = self.cp.charge_ticket(&account, group, phase).map_err(PcaError::from_cp)?;
        st.receipts.push(receipt.clone());
        Ok(receipt)
    }

    pub fn blacklist(&self, platform_id: &PlatformId, flag: bool) -> Result<(), PcaError> {
        let mut st = self.state.lock();
        if !st.platforms.contains_key(platform_id) {
            return Err(PcaError::UnregisteredPlatform);
        }
        let record = PcaRecord::Blacklist { platform_id: *platform_id, flag };
        self.log(&record)?;
        st.apply(record)
    }

    pub fn authority_token_valid(&self, token: &str) -> bool {
        !self.config.authority_token.is_empty() && token == self.config.authority_token
    }

    pub fn identity_records(&self) -> Vec<IdentityRecord> {
        self.state.lock().platforms.values().cloned().collect()
    }

    pub fn receipts(&self) -> Vec<ChargeReceipt> {
        self.state.lock().receipts.clone()
    }

    pub fn charged_total(&self) -> Amount {
        self.state.lock().receipts.iter().map(|r| r.amount).sum()
    }

    /// Number of challenges sent so far (handshake messages produced).
    pub fn challenges_issued(&self) -> u64 {
        self.state.lock().challenges_issued
    }

    pub fn pending_count(&self) -> usize {
        self.state.lock().pending.len()
    }
}

impl ExPostCharging for PrivacyCa {
    fn charge_ex_post(&self, aik_digest: &Digest, group: GroupId) -> Result<(), ExPostError> {
        if !self.config.charging.ex_post {
            return Ok(());
        }
        let platform = self.state.lock().aik_index.get(aik_digest).copied().ok_or(ExPostError::UnknownTicket)?;
        self.initiate_charging(&platform, group, ChargePhase::ExPost)
            .map(|_| ())
            .map_err(|e| ExPostError::Failed(e.code().to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{PricingPolicy, RevenueShares};
    use crate::crypto::verify_credential;
    use crate::tpm::TpmInstance;
    use crate::Share;

    struct Fixture {
        pca: PrivacyCa,
        cp: Arc<ChargingProvider>,
        clock: SimClock,
    }

    fn fixture(charging: ChargingPhases, policy: PricingPolicy) -> Fixture {
        let clock = SimClock::new(1_000);
        let shares = RevenueShares::new(Share::new(1, 5), Share::new(2, 5), Share::new(2, 5)).unwrap();
        let cp = Arc::new(ChargingProvider::new(policy, shares, clock.clone()).unwrap());
        let specs = (1..=3)
            .map(|i| GroupSpec { price_class: format!("class-{i}"), impact: Impact::from_integer(i), rs_id: "rs-1".into() })
            .collect();
        let groups = GroupTable::generate(specs, &mut ChaCha20Rng::from_seed([1; 32])).unwrap();
        let config = PcaConfig { authority_token: "tok".into(), charging, ..PcaConfig::default() };
        let pca = PrivacyCa::new(config, groups, cp.clone(), clock.clone(), [2; 32]);
        Fixture { pca, cp, clock }
    }

    fn flat(p: Amount) -> PricingPolicy {
        PricingPolicy::Flat { prices: (1..=3).map(|g| (g, p)).collect() }
    }

    fn platform(f: &Fixture, n: u8, balance: Amount) -> (TpmInstance, PlatformId) {
        let tpm = TpmInstance::new(Some([n; 32]), BTreeMap::new());
        let account = format!("acct-{n}");
        f.cp.open_account(&account, balance, 0).unwrap();
        let id = f.pca.register_platform(tpm.ek_public(), &account).unwrap();
        (tpm, id)
    }

    fn request(f: &Fixture, tpm: &TpmInstance, id: PlatformId, g: GroupId) -> (crate::tpm::Handle, PublicKey, RequestOutcome) {
        let (h, public) = tpm.make_identity().unwrap();
        let req = CredentialRequest { aik_public: public, group: g, platform_id: id, supplementary: BTreeMap::new() };
        (h, public, f.pca.request_credential(&req).unwrap())
    }

    fn challenge(o: RequestOutcome) -> Challenge {
        match o {
            RequestOutcome::Challenge(c) => c,
            other => panic!("expected challenge, got {other:?}"),
        }
    }

    #[test]
    fn register_rules() {
        let f = fixture(ChargingPhases::NONE, PricingPolicy::Free);
        let (a, ida) = platform(&f, 1, 0);
        let (_, idb) = platform(&f, 2, 0);
        assert_ne!(ida, idb);
        assert!(matches!(f.pca.register_platform(a.ek_public(), "x"), Err(PcaError::DuplicateEk)));
    }

    #[test]
    fn full_issuance_and_activation() {
        let f = fixture(ChargingPhases::ACQUISITION, flat(100));
        let (tpm, id) = platform(&f, 1, 500);
        let (h, public, out) = request(&f, &tpm, id, 2);
        let ch = challenge(out);
        let (cid, sig) = tpm.respond_to_challenge(h, &ch.sealed).unwrap();
        let blob = f.pca.complete_handshake(&ChallengeResponse { challenge_id: cid, signature: sig.clone() }).unwrap();
        let cred = tpm.activate_identity(h, &blob).unwrap();
        assert!(verify_credential(&cred));
        assert_eq!(cred.entity, public.as_bytes());
        assert_eq!(cred.issuer_key(), Some(f.pca.groups().get(2).unwrap().public()));
        for g in [1, 3] {
            assert_ne!(cred.issuer_key(), Some(f.pca.groups().get(g).unwrap().public()));
        }
        assert_eq!(f.cp.balance("acct-1").unwrap(), 400);
        // replay of the same response
        let replay = f.pca.complete_handshake(&ChallengeResponse { challenge_id: cid, signature: sig });
        assert_eq!(replay.unwrap_err().code(), "handshake-failed");
        let rec = f.pca.resolve_identity(&public.key_id(), "tok").unwrap();
        assert_eq!(rec.platform_id, id);
        assert_eq!(rec.issued.len(), 1);
    }

    #[test]
    fn request_errors_and_denials() {
        let f = fixture(ChargingPhases::ACQUISITION, flat(100));
        let (tpm, id) = platform(&f, 1, 50);
        let (_, public) = tpm.make_identity().unwrap();
        let bad_group = CredentialRequest { aik_public: public, group: 4, platform_id: id, supplementary: BTreeMap::new() };
        assert!(matches!(f.pca.request_credential(&bad_group), Err(PcaError::UnknownGroup(4))));
        let stranger = CredentialRequest { platform_id: PlatformId([9; 32]), group: 1, ..bad_group.clone() };
        assert!(matches!(f.pca.request_credential(&stranger), Err(PcaError::UnregisteredPlatform)));
        // cannot afford 100
        let (_, _, out) = request(&f, &tpm, id, 1);
        assert_eq!(out, RequestOutcome::Denied(DenyReason::ChargeNotAuthorized));
        assert_eq!(f.pca.challenges_issued(), 0);
    }

    #[test]
    fn blacklist_toggles_requests() {
        let f = fixture(ChargingPhases::NONE, PricingPolicy::Free);
        let (tpm, id) = platform(&f, 1, 0);
        f.pca.blacklist(&id, true).unwrap();
        let (_, _, out) = request(&f, &tpm, id, 1);
        assert_eq!(out, RequestOutcome::Denied(DenyReason::Blacklisted));
        assert_eq!(f.pca.challenges_issued(), 0);
        f.pca.blacklist(&id, false).unwrap();
        let (_, _, out) = request(&f, &tpm, id, 1);
        assert!(matches!(out, RequestOutcome::Challenge(_)));
        assert!(matches!(f.pca.blacklist(&PlatformId([0; 32]), true), Err(PcaError::UnregisteredPlatform)));
    }

    #[test]
    fn crossover_response_fails() {
        let f = fixture(ChargingPhases::NONE, PricingPolicy::Free);
        let (a, ida) = platform(&f, 1, 0);
        let (b, idb) = platform(&f, 2, 0);
        let (_ha, _, out_a) = request(&f, &a, ida, 1);
        let (hb, _, out_b) = request(&f, &b, idb, 1);
        let (ca, cb) = (challenge(out_a), challenge(out_b));
        // B's AIK cannot open A's challenge, and a signature from B's AIK does not answer it
        assert!(b.respond_to_challenge(hb, &ca.sealed).is_err());
        let (_, sig_b) = b.respond_to_challenge(hb, &cb.sealed).unwrap();
        let err = f.pca.complete_handshake(&ChallengeResponse { challenge_id: ca.challenge_id, signature: sig_b }).unwrap_err();
        assert_eq!(err.code(), "handshake-failed");
    }

    #[test]
    fn expired_challenge() {
        let f = fixture(ChargingPhases::NONE, PricingPolicy::Free);
        let (tpm, id) = platform(&f, 1, 0);
        let (h, _, out) = request(&f, &tpm, id, 1);
        let ch = challenge(out);
        f.clock.advance(DEFAULT_CHALLENGE_TTL_MS + 1);
        let (cid, sig) = tpm.respond_to_challenge(h, &ch.sealed).unwrap();
        let err = f.pca.complete_handshake(&ChallengeResponse { challenge_id: cid, signature: sig }).unwrap_err();
        assert!(matches!(err, PcaError::HandshakeFailed("challenge expired")));
    }

    #[test]
    fn resolve_requires_token() {
        let f = fixture(ChargingPhases::NONE, PricingPolicy::Free);
        assert!(matches!(f.pca.resolve_identity(&[0; 32], ""), Err(PcaError::Forbidden)));
        assert!(matches!(f.pca.resolve_identity(&[0; 32], "wrong"), Err(PcaError::Forbidden)));
        assert!(matches!(f.pca.resolve_identity(&[0; 32], "tok"), Err(PcaError::NotFound)));
    }

    #[test]
    fn initiate_charging_policies() {
        let f = fixture(ChargingPhases::NONE, flat(70));
        let (_, id) = platform(&f, 1, 100);
        assert_eq!(f.pca.initiate_charging(&id, 1, ChargePhase::Acquisition).unwrap().amount, 70);
        assert_eq!(f.pca.initiate_charging(&id, 1, ChargePhase::ExPost).unwrap_err().code(), "cp-declined");
        f.cp.set_policy(PricingPolicy::Free).unwrap();
        assert_eq!(f.pca.initiate_charging(&id, 1, ChargePhase::ExPost).unwrap().amount, 0);
    }

    #[test]
    fn issuance_log_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.log");
        let clock = SimClock::new(0);
        let shares = RevenueShares::new(Share::new(1, 1), Share::new(0, 1), Share::new(0, 1)).unwrap();
        let mk = || {
            let cp = Arc::new(ChargingProvider::new(PricingPolicy::Free, shares, clock.clone()).unwrap());
            cp.open_account("acct", 0, 0).unwrap();
            let spec = vec![GroupSpec { price_class: "std".into(), impact: Impact::from_integer(1), rs_id: "rs".into() }];
            let groups = GroupTable::generate(spec, &mut ChaCha20Rng::from_seed([1; 32])).unwrap();
            let cfg = PcaConfig { authority_token: "tok".into(), ..PcaConfig::default() };
            PrivacyCa::open(cfg, groups, cp, clock.clone(), [3; 32], &path).unwrap()
        };
        let tpm = TpmInstance::new(Some([5; 32]), BTreeMap::new());
        let aik_digest = {
            let pca = mk();
            let id = pca.register_platform(tpm.ek_public(), "acct").unwrap();
            let (h, public) = tpm.make_identity().unwrap();
            let req = CredentialRequest { aik_public: public, group: 1, platform_id: id, supplementary: BTreeMap::new() };
            let ch = challenge(pca.request_credential(&req).unwrap());
            let (cid, sig) = tpm.respond_to_challenge(h, &ch.sealed).unwrap();
            pca.complete_handshake(&ChallengeResponse { challenge_id: cid, signature: sig }).unwrap();
            pca.blacklist(&id, true).unwrap();
            public.key_id()
        };
        let pca = mk();
        let rec = pca.resolve_identity(&aik_digest, "tok").unwrap();
        assert_eq!(rec.platform_id, PlatformId::of(&tpm.ek_public()));
        assert!(rec.blacklisted);
    }
}
