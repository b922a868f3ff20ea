//! Reputation system: verifies submitted ratings against their credential
//! chain, enforces one rating per ticket, stores ratings and computes
//! impact-weighted scores.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use num_integer::Integer;
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::clock::{SimClock, Timestamp};
use crate::codec::{Canonical, DecodeError, DecodeResult, Reader, Writer};
use crate::crypto::{labels, verify_chain, ChainFault, CredentialChain, Digest, GroupId, GroupRegistry, PublicKey};
use crate::journal::{self, Journal, JournalError};
use crate::score::{weighted_mean, ScoreScalar};
use crate::{ExactScore, Impact};

const PAYLOAD_TAG: &str = "pseudorate/rating/v1";
const RATING_LOG: &str = "ratings.log";
const SPENT_SNAPSHOT: &str = "spent.snapshot";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RatingPayload {
    pub subject: String,
    pub score: i32,
    pub comment: Option<String>,
    pub nonce: Vec<u8>,
    pub rs_id: String,
}

impl Canonical for RatingPayload {
    fn write(&self, w: &mut Writer) {
        w.str(PAYLOAD_TAG).str(&self.subject).u32(self.score as u32);
        w.option(self.comment.as_ref(), |w, c| {
            w.str(c);
        });
        w.bytes(&self.nonce).str(&self.rs_id);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        if r.str()? != PAYLOAD_TAG {
            return Err(DecodeError::Invalid("not a rating payload"));
        }
        Ok(RatingPayload {
            subject: r.str()?,
            score: r.u32()? as i32,
            comment: r.option(|r| r.str())?,
            nonce: r.bytes()?,
            rs_id: r.str()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsGroup {
    pub key: PublicKey,
    pub impact: Impact,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsConfig {
    pub rs_id: String,
    /// Inclusive score range.
    pub scale: (i32, i32),
}

impl RsConfig {
    pub fn new(rs_id: impl Into<String>) -> Self {
        Self { rs_id: rs_id.into(), scale: (1, 5) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Reject {
    #[error("invalid credential chain: {0}")]
    InvalidChain(ChainFault),
    #[error("ticket or rating is bound to a different reputation system")]
    WrongRs,
    #[error("ticket already spent")]
    DoubleSpend,
    #[error("bad payload: {0}")]
    BadPayload(&'static str),
}

impl Reject {
    pub fn code(&self) -> &'static str {
        match self {
            Reject::InvalidChain(_) => "invalid-chain",
            Reject::WrongRs => "wrong-rs",
            Reject::DoubleSpend => "double-spend",
            Reject::BadPayload(_) => "bad-payload",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub seq: u64,
    pub chain_digest: Digest,
}

impl Canonical for Ack {
    fn write(&self, w: &mut Writer) {
        w.u64(self.seq).bytes(&self.chain_digest);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(Ack { seq: r.u64()?, chain_digest: r.fixed()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingRecord {
    pub payload: RatingPayload,
    pub group: GroupId,
    pub impact: Impact,
    pub received: Timestamp,
    pub chain_digest: Digest,
}

impl Canonical for RatingRecord {
    fn write(&self, w: &mut Writer) {
        self.payload.write(w);
        w.u32(self.group).i64(*self.impact.numer()).i64(*self.impact.denom()).u64(self.received).bytes(&self.chain_digest);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        let payload = RatingPayload::read(r)?;
        let group = r.u32()?;
        let (n, d) = (r.i64()?, r.i64()?);
        if n <= 0 || d <= 0 || n.gcd(&d) != 1 {
            return Err(DecodeError::Invalid("impact must be positive and in lowest terms"));
        }
        Ok(RatingRecord { payload, group, impact: Impact::new(n, d), received: r.u64()?, chain_digest: r.fixed()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExPostError {
    #[error("ticket unknown to the charging party")]
    UnknownTicket,
    #[error("charging failed: {0}")]
    Failed(String),
}

/// Ex-post charging is initiated through the PCA, the only party that can
/// link a ticket to an account.
pub trait ExPostCharging: Send + Sync {
    fn charge_ex_post(&self, aik_digest: &Digest, group: GroupId) -> Result<(), ExPostError>;
}

#[derive(Debug, Error)]
pub enum RsError {
    #[error("group impact must be positive")]
    NonPositiveImpact,
    #[error("group registry must not be empty")]
    EmptyRegistry,
    #[error("two groups share one verification key")]
    DuplicateKey,
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PendingCharge {
    aik_digest: Digest,
    group: GroupId,
    attempts: u32,
}

#[derive(Default)]
struct RsState {
    spent: HashMap<Digest, Timestamp>,
    ratings: Vec<RatingRecord>,
}

struct Persistence {
    log: Journal,
    spent_path: PathBuf,
}

pub struct ReputationSystem {
    config: RsConfig,
    registry: RwLock<BTreeMap<GroupId, RsGroup>>,
    state: Mutex<RsState>,
    pending_charges: Mutex<Vec<PendingCharge>>,
    ex_post: Option<Arc<dyn ExPostCharging>>,
    clock: SimClock,
    persistence: Option<Persistence>,
}

impl fmt::Debug for ReputationSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReputationSystem").field("rs_id", &self.config.rs_id).finish_non_exhaustive()
    }
}

impl ReputationSystem {
    pub fn new(config: RsConfig, clock: SimClock) -> Self {
        Self {
            config,
            registry: RwLock::new(BTreeMap::new()),
            state: Mutex::new(RsState::default()),
            pending_charges: Mutex::new(Vec::new()),
            ex_post: None,
            clock,
            persistence: None,
        }
    }

    /// Persists to `dir/ratings.log` (append-only) and `dir/spent.snapshot`,
    /// restoring whatever is already there.
    pub fn open(config: RsConfig, clock: SimClock, dir: impl AsRef<Path>) -> Result<Self, RsError> {
        let dir = dir.as_ref();
        let log_path = dir.join(RATING_LOG);
        let spent_path = dir.join(SPENT_SNAPSHOT);
        let mut rs = Self::new(config, clock);
        {
            let mut st = rs.state.lock();
            for (idx, bytes) in journal::read_records(&log_path)?.iter().enumerate() {
                st.ratings.push(RatingRecord::decode(bytes).map_err(|e| JournalError::decode(&log_path, idx + 1, e))?);
            }
            for (idx, bytes) in journal::read_records(&spent_path)?.iter().enumerate() {
                let mut r = Reader::new(bytes);
                let entry = r.fixed::<32>().and_then(|d| Ok((d, r.u64()?))).and_then(|e| r.finish().map(|_| e));
                let (digest, at) = entry.map_err(|e| JournalError::decode(&spent_path, idx + 1, e))?;
                st.spent.insert(digest, at);
            }
        }
        rs.persistence = Some(Persistence { log: Journal::open(&log_path)?, spent_path });
        Ok(rs)
    }

    pub fn with_ex_post(mut self, charger: Arc<dyn ExPostCharging>) -> Self {
        self.ex_post = Some(charger);
        self
    }

    pub fn rs_id(&self) -> &str {
        &self.config.rs_id
    }

    pub fn configure_groups(&self, registry: BTreeMap<GroupId, RsGroup>) -> Result<(), RsError> {
        if registry.is_empty() {
            return Err(RsError::EmptyRegistry);
        }
        if registry.values().any(|g| *g.impact.numer() <= 0) {
            return Err(RsError::NonPositiveImpact);
        }
        let mut keys: Vec<_> = registry.values().map(|g| g.key).collect();
        keys.sort();
        keys.dedup();
        if keys.len() != registry.len() {
            return Err(RsError::DuplicateKey);
        }
        *self.registry.write() = registry;
        Ok(())
    }

    pub fn groups(&self) -> BTreeMap<GroupId, RsGroup> {
        self.registry.read().clone()
    }

    pub fn submit(&self, payload: &RatingPayload, chain: &CredentialChain) -> Result<Ack, Reject> {
        self.submit_encoded(&payload.encode(), chain)
    }

    /// Accepts a rating iff the chain verifies against the group registry,
    /// signs exactly these payload bytes, targets this RS and its ticket is
    /// unspent. Every other input maps to exactly one [`Reject`].
    pub fn submit_encoded(&self, payload_bytes: &[u8], chain: &CredentialChain) -> Result<Ack, Reject> {
        let (group, impact) = {
            let groups = self.registry.read();
            let registry: GroupRegistry = groups.iter().map(|(g, e)| (*g, e.key)).collect();
            let report = verify_chain(chain, &registry);
            if let Some(fault) = report.fault {
                return Err(Reject::InvalidChain(fault));
            }
            let group = report.group.expect("valid chain has a group");
            (group, groups[&group].impact)
        };
        if chain.rating_cred.entity != payload_bytes {
            return Err(Reject::BadPayload("signed rating differs from payload"));
        }
        let payload = RatingPayload::decode(payload_bytes).map_err(|_| Reject::BadPayload("malformed payload"))?;
        let (lo, hi) = self.config.scale;
        if payload.score < lo || payload.score > hi {
            return Err(Reject::BadPayload("score outside scale"));
        }
        if payload.nonce.is_empty() {
            return Err(Reject::BadPayload("empty nonce"));
        }
        if payload.rs_id != self.config.rs_id
            || chain.aik_cred.meta.get(labels::RS).map(String::as_str) != Some(self.config.rs_id.as_str())
        {
            return Err(Reject::WrongRs);
        }

        let aik_digest = chain.aik_digest();
        let chain_digest = chain.digest();
        let now = self.clock.now();
        let seq = {
            let mut st = self.state.lock();
            if st.spent.contains_key(&aik_digest) {
                return Err(Reject::DoubleSpend);
            }
            let record = RatingRecord { payload, group, impact, received: now, chain_digest };
            if let Some(p) = &self.persistence {
                let mut spent: Vec<Vec<u8>> = st.spent.iter().map(|(d, t)| spent_line(d, *t)).collect();
                spent.push(spent_line(&aik_digest, now));
                spent.sort();
                // a failed write leaves the ticket unspent and the rating unstored
                if p.log.append(&record.encode()).and_then(|_| journal::write_snapshot(&p.spent_path, &spent)).is_err() {
                    warn!("rating persistence failed; submission not recorded");
                    return Err(Reject::BadPayload("storage unavailable"));
                }
            }
            st.spent.insert(aik_digest, now);
            st.ratings.push(record);
            st.ratings.len() as u64
        };

        if let Some(charger) = &self.ex_post {
            if let Err(e) = charger.charge_ex_post(&aik_digest, group) {
                warn!("ex-post charge for rating {seq} failed ({e}); queued for retry");
                self.pending_charges.lock().push(PendingCharge { aik_digest, group, attempts: 1 });
            }
        }
        Ok(Ack { seq, chain_digest })
    }

    /// Retries queued ex-post charges; returns how many are still pending.
    pub fn retry_pending_charges(&self) -> usize {
        let Some(charger) = &self.ex_post else { return 0 };
        let mut pending = self.pending_charges.lock();
        pending.retain_mut(|p| match charger.charge_ex_post(&p.aik_digest, p.group) {
            Ok(()) => false,
            Err(_) => {
                p.attempts += 1;
                true
            }
        });
        pending.len()
    }

    pub fn pending_charge_count(&self) -> usize {
        self.pending_charges.lock().len()
    }

    pub fn spent_count(&self) -> usize {
        self.state.lock().spent.len()
    }

    pub fn is_spent(&self, aik_digest: &Digest) -> bool {
        self.state.lock().spent.contains_key(aik_digest)
    }

    pub fn ratings(&self) -> Vec<RatingRecord> {
        self.state.lock().ratings.clone()
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.state.lock().ratings.iter().map(|r| r.payload.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn aggregate(&self, subject: &str) -> Option<ExactScore> {
        self.aggregate_as(subject)
    }

    pub fn aggregate_as<S: ScoreScalar>(&self, subject: &str) -> Option<S> {
        aggregate_records(&self.state.lock().ratings, subject)
    }

    /// Canonical encoding of the complete RS state.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("rs-state/v1").str(&self.config.rs_id).u32(self.config.scale.0 as u32).u32(self.config.scale.1 as u32);
        let groups: Vec<(GroupId, RsGroup)> = self.registry.read().iter().map(|(g, e)| (*g, *e)).collect();
        w.seq(&groups, |w, (g, e)| {
            w.u32(*g).bytes(e.key.as_bytes()).i64(*e.impact.numer()).i64(*e.impact.denom());
        });
        let st = self.state.lock();
        let mut spent: Vec<Vec<u8>> = st.spent.iter().map(|(d, t)| spent_line(d, *t)).collect();
        spent.sort();
        w.seq(&spent, |w, s| {
            w.raw(s);
        });
        w.seq(&st.ratings, |w, r| r.write(w));
        let pending = self.pending_charges.lock().clone();
        w.seq(&pending, |w, p| {
            w.bytes(&p.aik_digest).u32(p.group).u32(p.attempts);
        });
        w.into_bytes()
    }
}

fn spent_line(digest: &Digest, at: Timestamp) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(digest).u64(at);
    w.into_bytes()
}

/// Weighted score of `subject` over a rating log.
pub fn aggregate_records<S: ScoreScalar>(records: &[RatingRecord], subject: &str) -> Option<S> {
    weighted_mean(records.iter().filter(|r| r.payload.subject == subject).map(|r| (r.payload.score, &r.impact)))
}

/// Reads a rating log written by [`ReputationSystem::open`].
pub fn read_rating_log(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>, JournalError> {
    let path = path.as_ref();
    journal::read_records(path)?
        .iter()
        .enumerate()
        .map(|(idx, b)| RatingRecord::decode(b).map_err(|e| JournalError::decode(path, idx + 1, e)))
        .collect()
}
