//! Wire protocol: message framing, endpoint bodies, the service router and
//! the in-process and TCP transports.
//!
//! A [`ProtocolMessage`] is encoded canonically as
//!
//! ```text
//! u16 version | str endpoint | bytes correlation_id | bytes body
//! ```
//!
//! Request bodies are the canonical encoding of the endpoint's request type.
//! Response bodies start with a status byte: `0` success followed by the
//! endpoint's result, `1` service error followed by `str code, str message`,
//! `2` protocol error followed by `str code, str message`. Over TCP each
//! message is framed by a `u32` big-endian length.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::debug;
use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::{SimClock, Timestamp};
use crate::codec::{Canonical, DecodeError, DecodeResult, Reader, Writer};
use crate::cp::{Amount, ChargePhase, ChargeReceipt, ChargingProvider, PricingPolicy};
use crate::crypto::{CredentialChain, Digest, GroupId, PublicKey, SealedBox};
use crate::pca::{ChallengeResponse, CredentialRequest, IdentityRecord, PlatformId, PrivacyCa, RequestOutcome};
use crate::rs::{Ack, ReputationSystem, RsGroup};
use crate::score::{read_exact, write_exact};
use crate::{ExactScore, Impact};

pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
/// Environment variable naming the TCP port services listen on in socket mode.
pub const PORT_ENV: &str = "PSEUDORATE_PORT";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("malformed message: {0}")]
    Malformed(#[from] DecodeError),
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::UnsupportedVersion(_) => "unsupported-version",
            WireError::UnknownEndpoint(_) => "unknown-endpoint",
            WireError::Malformed(_) => "malformed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub version: u16,
    pub endpoint: String,
    pub correlation_id: Vec<u8>,
    pub body: Vec<u8>,
}

impl ProtocolMessage {
    pub fn new(endpoint: Endpoint, correlation_id: Vec<u8>, body: Vec<u8>) -> Self {
        Self { version: PROTOCOL_VERSION, endpoint: endpoint.as_str().to_string(), correlation_id, body }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.version).str(&self.endpoint).bytes(&self.correlation_id).bytes(&self.body);
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let version = r.u16()?;
        if version != PROTOCOL_VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let msg = ProtocolMessage { version, endpoint: r.str()?, correlation_id: r.bytes()?, body: r.bytes()? };
        r.finish()?;
        Ok(msg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    PcaRegister,
    PcaRequest,
    PcaComplete,
    PcaResolve,
    PcaBlacklist,
    RsSubmit,
    RsScore,
    RsAdminGroups,
    CpCharge,
    CpBalance,
    CpPolicy,
}

impl Endpoint {
    pub const ALL: [Endpoint; 11] = [
        Endpoint::PcaRegister,
        Endpoint::PcaRequest,
        Endpoint::PcaComplete,
        Endpoint::PcaResolve,
        Endpoint::PcaBlacklist,
        Endpoint::RsSubmit,
        Endpoint::RsScore,
        Endpoint::RsAdminGroups,
        Endpoint::CpCharge,
        Endpoint::CpBalance,
        Endpoint::CpPolicy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Endpoint::PcaRegister => "pca/register",
            Endpoint::PcaRequest => "pca/request",
            Endpoint::PcaComplete => "pca/complete",
            Endpoint::PcaResolve => "pca/resolve",
            Endpoint::PcaBlacklist => "pca/blacklist",
            Endpoint::RsSubmit => "rs/submit",
            Endpoint::RsScore => "rs/score",
            Endpoint::RsAdminGroups => "rs/admin/groups",
            Endpoint::CpCharge => "cp/charge",
            Endpoint::CpBalance => "cp/balance",
            Endpoint::CpPolicy => "cp/policy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Request bodies, one variant per endpoint.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)] // built once per call; boxing the chain buys nothing
pub enum Request {
    Register { ek_public: PublicKey, account: String },
    RequestCredential(CredentialRequest),
    Complete(ChallengeResponse),
    Resolve { aik_digest: Digest, token: String },
    Blacklist { platform_id: PlatformId, flag: bool, token: String },
    Submit { payload: Vec<u8>, chain: CredentialChain },
    Score { subject: String },
    AdminGroups { token: String, groups: BTreeMap<GroupId, RsGroup> },
    Charge { account: String, amount: Amount, group: GroupId, phase: ChargePhase },
    Balance { account: String },
    Policy { token: String, set: Option<PricingPolicyBody> },
}

/// A transportable pricing policy (custom rules are not transportable).
#[derive(Debug, Clone)]
pub struct PricingPolicyBody(pub PricingPolicy);

impl PartialEq for PricingPolicyBody {
    fn eq(&self, other: &Self) -> bool {
        self.0.encode() == other.0.encode()
    }
}

impl Request {
    pub fn endpoint(&self) -> Endpoint {
        match self {
            Request::Register { .. } => Endpoint::PcaRegister,
            Request::RequestCredential(_) => Endpoint::PcaRequest,
            Request::Complete(_) => Endpoint::PcaComplete,
            Request::Resolve { .. } => Endpoint::PcaResolve,
            Request::Blacklist { .. } => Endpoint::PcaBlacklist,
            Request::Submit { .. } => Endpoint::RsSubmit,
            Request::Score { .. } => Endpoint::RsScore,
            Request::AdminGroups { .. } => Endpoint::RsAdminGroups,
            Request::Charge { .. } => Endpoint::CpCharge,
            Request::Balance { .. } => Endpoint::CpBalance,
            Request::Policy { .. } => Endpoint::CpPolicy,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Request::Register { ek_public, account } => {
                w.bytes(ek_public.as_bytes()).str(account);
            }
            Request::RequestCredential(req) => req.write(&mut w),
            Request::Complete(resp) => resp.write(&mut w),
            Request::Resolve { aik_digest, token } => {
                w.bytes(aik_digest).str(token);
            }
            Request::Blacklist { platform_id, flag, token } => {
                platform_id.write(&mut w);
                w.bool(*flag).str(token);
            }
            Request::Submit { payload, chain } => {
                w.bytes(payload);
                chain.write(&mut w);
            }
            Request::Score { subject } => {
                w.str(subject);
            }
            Request::AdminGroups { token, groups } => {
                w.str(token).u32(groups.len() as u32);
                for (g, e) in groups {
                    w.u32(*g).bytes(e.key.as_bytes()).i64(*e.impact.numer()).i64(*e.impact.denom());
                }
            }
            Request::Charge { account, amount, group, phase } => {
                w.str(account).i64(*amount).u32(*group);
                phase.write(&mut w);
            }
            Request::Balance { account } => {
                w.str(account);
            }
            Request::Policy { token, set } => {
                w.str(token).option(set.as_ref(), |w, p| p.0.write(w));
            }
        }
        w.into_bytes()
    }

    pub fn decode_body(endpoint: Endpoint, body: &[u8]) -> DecodeResult<Self> {
        let mut r = Reader::new(body);
        let req = match endpoint {
            Endpoint::PcaRegister => Request::Register { ek_public: PublicKey(r.fixed()?), account: r.str()? },
            Endpoint::PcaRequest => Request::RequestCredential(CredentialRequest::read(&mut r)?),
            Endpoint::PcaComplete => Request::Complete(ChallengeResponse::read(&mut r)?),
            Endpoint::PcaResolve => Request::Resolve { aik_digest: r.fixed()?, token: r.str()? },
            Endpoint::PcaBlacklist => {
                Request::Blacklist { platform_id: PlatformId::read(&mut r)?, flag: r.bool()?, token: r.str()? }
            }
            Endpoint::RsSubmit => Request::Submit { payload: r.bytes()?, chain: CredentialChain::read(&mut r)? },
            Endpoint::RsScore => Request::Score { subject: r.str()? },
            Endpoint::RsAdminGroups => {
                let token = r.str()?;
                let entries = r.seq(|r| {
                    let g = r.u32()?;
                    let key = PublicKey(r.fixed()?);
                    let (n, d) = (r.i64()?, r.i64()?);
                    if n <= 0 || d <= 0 {
                        return Err(DecodeError::Invalid("impact must be positive"));
                    }
                    let impact = Impact::new(n, d);
                    if (*impact.numer(), *impact.denom()) != (n, d) {
                        return Err(DecodeError::Invalid("impact not in lowest terms"));
                    }
                    Ok((g, RsGroup { key, impact }))
                })?;
                let mut groups = BTreeMap::new();
                for (g, e) in entries {
                    if groups.last_key_value().is_some_and(|(last, _)| *last >= g) {
                        return Err(DecodeError::UnsortedMap);
                    }
                    groups.insert(g, e);
                }
                Request::AdminGroups { token, groups }
            }
            Endpoint::CpCharge => Request::Charge {
                account: r.str()?,
                amount: r.i64()?,
                group: r.u32()?,
                phase: ChargePhase::read(&mut r)?,
            },
            Endpoint::CpBalance => Request::Balance { account: r.str()? },
            Endpoint::CpPolicy => {
                Request::Policy { token: r.str()?, set: r.option(|r| PricingPolicy::read(r).map(PricingPolicyBody))? }
            }
        };
        r.finish()?;
        Ok(req)
    }
}

/// Successful results, one variant per endpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Registered(PlatformId),
    Challenge(crate::pca::Challenge),
    Denied(String),
    Activation(SealedBox),
    Identity(IdentityRecord),
    Done,
    Accepted(Ack),
    Rejected { code: String, detail: String },
    Score { score: Option<ExactScore>, count: u64 },
    Receipt(ChargeReceipt),
    Balance(Amount),
    Policy(PricingPolicyBody),
}

impl Reply {
    fn write(&self, w: &mut Writer) {
        match self {
            Reply::Registered(id) => id.write(w),
            Reply::Challenge(c) => {
                w.u8(0);
                c.write(w);
            }
            Reply::Denied(code) => {
                w.u8(1).str(code);
            }
            Reply::Activation(b) => b.write(w),
            Reply::Identity(rec) => rec.write(w),
            Reply::Done => {}
            Reply::Accepted(ack) => {
                w.u8(0);
                ack.write(w);
            }
            Reply::Rejected { code, detail } => {
                w.u8(1).str(code).str(detail);
            }
            Reply::Score { score, count } => {
                w.option(score.as_ref(), write_exact);
                w.u64(*count);
            }
            Reply::Receipt(r) => r.write(w),
            Reply::Balance(b) => {
                w.i64(*b);
            }
            Reply::Policy(p) => p.0.write(w),
        }
    }

    fn read(endpoint: Endpoint, r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(match endpoint {
            Endpoint::PcaRegister => Reply::Registered(PlatformId::read(r)?),
            Endpoint::PcaRequest => match r.u8()? {
                0 => Reply::Challenge(crate::pca::Challenge::read(r)?),
                1 => Reply::Denied(r.str()?),
                tag => return Err(DecodeError::InvalidTag { what: "request outcome", tag }),
            },
            Endpoint::PcaComplete => Reply::Activation(SealedBox::read(r)?),
            Endpoint::PcaResolve => Reply::Identity(IdentityRecord::read(r)?),
            Endpoint::PcaBlacklist | Endpoint::RsAdminGroups => Reply::Done,
            Endpoint::RsSubmit => match r.u8()? {
                0 => Reply::Accepted(Ack::read(r)?),
                1 => Reply::Rejected { code: r.str()?, detail: r.str()? },
                tag => return Err(DecodeError::InvalidTag { what: "submit outcome", tag }),
            },
            Endpoint::RsScore => {
                let score = r.option(read_exact)?;
                Reply::Score { score, count: r.u64()? }
            }
            Endpoint::CpCharge => Reply::Receipt(ChargeReceipt::read(r)?),
            Endpoint::CpBalance => Reply::Balance(r.i64()?),
            Endpoint::CpPolicy => Reply::Policy(PricingPolicyBody(PricingPolicy::read(r)?)),
        })
    }
}

/// Decoded response body.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ok(Reply),
    ServiceError { code: String, message: String },
    ProtocolError { code: String, message: String },
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Response::Ok(reply) => {
                w.u8(0);
                reply.write(&mut w);
            }
            Response::ServiceError { code, message } => {
                w.u8(1).str(code).str(message);
            }
            Response::ProtocolError { code, message } => {
                w.u8(2).str(code).str(message);
            }
        }
        w.into_bytes()
    }

    pub fn decode(endpoint: Endpoint, body: &[u8]) -> DecodeResult<Self> {
        let mut r = Reader::new(body);
        let resp = match r.u8()? {
            0 => Response::Ok(Reply::read(endpoint, &mut r)?),
            1 => Response::ServiceError { code: r.str()?, message: r.str()? },
            2 => Response::ProtocolError { code: r.str()?, message: r.str()? },
            tag => return Err(DecodeError::InvalidTag { what: "response status", tag }),
        };
        r.finish()?;
        Ok(resp)
    }

    /// Short machine-readable outcome used in transcripts.
    pub fn outcome(&self) -> String {
        match self {
            Response::Ok(Reply::Denied(code)) => format!("denied:{code}"),
            Response::Ok(Reply::Rejected { code, .. }) => format!("reject:{code}"),
            Response::Ok(_) => "ok".into(),
            Response::ServiceError { code, .. } => format!("error:{code}"),
            Response::ProtocolError { code, .. } => format!("protocol-error:{code}"),
        }
    }
}

fn service_error(code: &str, message: impl fmt::Display) -> Response {
    Response::ServiceError { code: code.to_string(), message: message.to_string() }
}

/// One message as seen at service ingress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRecord {
    pub seq: u64,
    pub at: Timestamp,
    pub endpoint: String,
    pub request: Vec<u8>,
    pub response: Vec<u8>,
    pub outcome: String,
}

impl Canonical for MessageRecord {
    fn write(&self, w: &mut Writer) {
        w.u64(self.seq).u64(self.at).str(&self.endpoint).bytes(&self.request).bytes(&self.response).str(&self.outcome);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(MessageRecord {
            seq: r.u64()?,
            at: r.u64()?,
            endpoint: r.str()?,
            request: r.bytes()?,
            response: r.bytes()?,
            outcome: r.str()?,
        })
    }
}

#[derive(Clone)]
pub struct Services {
    pub pca: Arc<PrivacyCa>,
    pub rs: Arc<ReputationSystem>,
    pub cp: Arc<ChargingProvider>,
    pub clock: SimClock,
}

/// Dispatches protocol messages to the services and records every message
/// with a sequence number assigned at ingress.
pub struct Router {
    services: Services,
    admin_token: String,
    next_seq: AtomicU64,
    log: Mutex<Vec<MessageRecord>>,
}

impl fmt::Debug for Router {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Router").field("messages", &self.log.lock().len()).finish_non_exhaustive()
    }
}

impl Router {
    pub fn new(services: Services, admin_token: impl Into<String>) -> Self {
        Self { services, admin_token: admin_token.into(), next_seq: AtomicU64::new(1), log: Mutex::new(Vec::new()) }
    }

    pub fn services(&self) -> &Services {
        &self.services
    }

    /// Never panics: undecodable input yields a protocol-error response.
    pub fn handle_bytes(&self, bytes: &[u8]) -> Vec<u8> {
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let at = self.services.clock.now();
        let (endpoint, correlation_id, response) = match ProtocolMessage::decode(bytes) {
            Err(e) => (String::new(), Vec::new(), Response::ProtocolError { code: e.code().into(), message: e.to_string() }),
            Ok(msg) => {
                let resp = match Endpoint::parse(&msg.endpoint) {
                    None => {
                        let e = WireError::UnknownEndpoint(msg.endpoint.clone());
                        Response::ProtocolError { code: e.code().into(), message: e.to_string() }
                    }
                    Some(ep) => match Request::decode_body(ep, &msg.body) {
                        Err(e) => Response::ProtocolError { code: "malformed".into(), message: e.to_string() },
                        Ok(req) => self.dispatch(req),
                    },
                };
                (msg.endpoint, msg.correlation_id, resp)
            }
        };
        let outcome = response.outcome();
        let out = ProtocolMessage {
            version: PROTOCOL_VERSION,
            endpoint: endpoint.clone(),
            correlation_id,
            body: response.encode(),
        }
        .encode();
        debug!("#{seq} {endpoint} -> {outcome}");
        self.log.lock().push(MessageRecord { seq, at, endpoint, request: bytes.to_vec(), response: out.clone(), outcome });
        out
    }

    fn admin_ok(&self, token: &str) -> bool {
        !self.admin_token.is_empty() && token == self.admin_token
    }

    pub fn dispatch(&self, req: Request) -> Response {
        let s = &self.services;
        let result: Result<Reply, Response> = match req {
            Request::Register { ek_public, account } => {
                s.pca.register_platform(ek_public, &account).map(Reply::Registered).map_err(|e| service_error(e.code(), e))
            }
            Request::RequestCredential(r) => s
                .pca
                .request_credential(&r)
                .map(|o| match o {
                    RequestOutcome::Challenge(c) => Reply::Challenge(c),
                    RequestOutcome::Denied(d) => Reply::Denied(d.code().into()),
                })
                .map_err(|e| service_error(e.code(), e)),
            Request::Complete(r) => s.pca.complete_handshake(&r).map(Reply::Activation).map_err(|e| service_error(e.code(), e)),
            Request::Resolve { aik_digest, token } => {
                s.pca.resolve_identity(&aik_digest, &token).map(Reply::Identity).map_err(|e| service_error(e.code(), e))
            }
            Request::Blacklist { platform_id, flag, token } => {
                if !s.pca.authority_token_valid(&token) {
                    Err(service_error("forbidden", "missing or invalid authority token"))
                } else {
                    s.pca.blacklist(&platform_id, flag).map(|_| Reply::Done).map_err(|e| service_error(e.code(), e))
                }
            }
            Request::Submit { payload, chain } => Ok(match s.rs.submit_encoded(&payload, &chain) {
                Ok(ack) => Reply::Accepted(ack),
                Err(reject) => Reply::Rejected {
                    code: reject.code().into(),
                    detail: match &reject {
                        crate::rs::Reject::InvalidChain(f) => f.code().into(),
                        other => other.to_string(),
                    },
                },
            }),
            Request::Score { subject } => {
                let count = s.rs.ratings().iter().filter(|r| r.payload.subject == subject).count() as u64;
                Ok(Reply::Score { score: s.rs.aggregate(&subject), count })
            }
            Request::AdminGroups { token, groups } => {
                if !self.admin_ok(&token) {
                    Err(service_error("forbidden", "admin token required"))
                } else {
                    s.rs.configure_groups(groups).map(|_| Reply::Done).map_err(|e| service_error("invalid-groups", e))
                }
            }
            Request::Charge { account, amount, group, phase } => {
                s.cp.charge(&account, amount, group, phase).map(Reply::Receipt).map_err(|e| service_error(e.code(), e))
            }
            Request::Balance { account } => s.cp.balance(&account).map(Reply::Balance).map_err(|e| service_error(e.code(), e)),
            Request::Policy { token, set } => match set {
                None => Ok(Reply::Policy(PricingPolicyBody(s.cp.policy()))),
                Some(_) if !self.admin_ok(&token) => Err(service_error("forbidden", "admin token required")),
                Some(p) => s
                    .cp
                    .set_policy(p.0)
                    .map(|_| Reply::Policy(PricingPolicyBody(s.cp.policy())))
                    .map_err(|e| service_error(e.code(), e)),
            },
        };
        match result {
            Ok(reply) => Response::Ok(reply),
            Err(resp) => resp,
        }
    }

    /// Every message handled so far, ordered by ingress sequence number.
    pub fn messages(&self) -> Vec<MessageRecord> {
        let mut log = self.log.lock().clone();
        log.sort_by_key(|m| m.seq);
        log
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("message dropped")]
    Dropped,
}

/// Carries one encoded request to the services and returns the encoded response.
pub trait Transport: Send + Sync {
    fn roundtrip(&self, request: &[u8]) -> Result<Vec<u8>, TransportError>;
}

pub struct InProcess {
    router: Arc<Router>,
}

impl InProcess {
    pub fn new(router: Arc<Router>) -> Self {
        Self { router }
    }
}

impl Transport for InProcess {
    fn roundtrip(&self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        Ok(self.router.handle_bytes(request))
    }
}

pub fn write_frame(stream: &mut impl Write, bytes: &[u8]) -> Result<(), TransportError> {
    if bytes.len() > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(bytes.len()));
    }
    stream.write_all(&(bytes.len() as u32).to_be_bytes())?;
    stream.write_all(bytes)?;
    stream.flush()?;
    Ok(())
}

pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>, TransportError> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

/// TCP client holding one connection, re-established after errors.
pub struct SocketClient {
    addr: SocketAddr,
    conn: Mutex<Option<TcpStream>>,
}

impl SocketClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self { addr, conn: Mutex::new(None) }
    }
}

impl Transport for SocketClient {
    fn roundtrip(&self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        let mut conn = self.conn.lock();
        if conn.is_none() {
            let stream = TcpStream::connect(self.addr)?;
            stream.set_nodelay(true)?;
            *conn = Some(stream);
        }
        let stream = conn.as_mut().expect("connected above");
        let result = write_frame(stream, request).and_then(|_| read_frame(stream));
        if result.is_err() {
            *conn = None;
        }
        result
    }
}

/// Serves a [`Router`] over TCP until dropped.
pub struct SocketServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl SocketServer {
    pub fn bind(router: Arc<Router>, addr: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut stream) = stream else { continue };
                let router = router.clone();
                thread::spawn(move || {
                    let _ = stream.set_nodelay(true);
                    while let Ok(frame) = read_frame(&mut stream) {
                        let reply = router.handle_bytes(&frame);
                        if write_frame(&mut stream, &reply).is_err() {
                            break;
                        }
                    }
                    let _ = stream.shutdown(Shutdown::Both);
                });
            }
        });
        Ok(Self { addr, stop, accept: Some(accept) })
    }

    /// Binds to `127.0.0.1:$PSEUDORATE_PORT`, or an ephemeral port when unset.
    pub fn bind_from_env(router: Arc<Router>) -> io::Result<Self> {
        let port = match std::env::var(PORT_ENV) {
            Ok(p) => p
                .parse::<u16>()
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{PORT_ENV} is not a port: {p}")))?,
            Err(_) => 0,
        };
        Self::bind(router, SocketAddr::from(([127, 0, 0, 1], port)))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for SocketServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Where a [`FaultyTransport`] loses a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The n-th request (0-based) never reaches the services.
    DropRequest(usize),
    /// The n-th request is processed but its response is lost.
    DropResponse(usize),
}

/// Test transport that loses one message at a chosen boundary.
pub struct FaultyTransport<T> {
    inner: T,
    fault: Option<Fault>,
    count: AtomicUsize,
}

impl<T: Transport> FaultyTransport<T> {
    pub fn new(inner: T, fault: Option<Fault>) -> Self {
        Self { inner, fault, count: AtomicUsize::new(0) }
    }
}

impl<T: Transport> Transport for FaultyTransport<T> {
    fn roundtrip(&self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        let n = self.count.fetch_add(1, Ordering::SeqCst);
        match self.fault {
            Some(Fault::DropRequest(k)) if k == n => Err(TransportError::Dropped),
            Some(Fault::DropResponse(k)) if k == n => {
                self.inner.roundtrip(request)?;
                Err(TransportError::Dropped)
            }
            _ => self.inner.roundtrip(request),
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("protocol error {code}: {message}")]
    Protocol { code: String, message: String },
    #[error("{code}: {message}")]
    Service { code: String, message: String },
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Transport(_) => "transport",
            ClientError::Protocol { code, .. } | ClientError::Service { code, .. } => code,
            ClientError::Decode(_) => "decode",
        }
    }
}

/// Typed client for all endpoints over any [`Transport`].
pub struct Client {
    transport: Arc<dyn Transport>,
    label: String,
    next_id: AtomicU64,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client").field("label", &self.label).finish_non_exhaustive()
    }
}

impl Client {
    pub fn new(transport: Arc<dyn Transport>, label: impl Into<String>) -> Self {
        Self { transport, label: label.into(), next_id: AtomicU64::new(1) }
    }

    pub fn call(&self, req: &Request) -> Result<Reply, ClientError> {
        let endpoint = req.endpoint();
        let mut correlation_id = self.label.as_bytes().to_vec();
        correlation_id.push(b'#');
        correlation_id.extend_from_slice(&self.next_id.fetch_add(1, Ordering::SeqCst).to_be_bytes());
        let msg = ProtocolMessage::new(endpoint, correlation_id.clone(), req.encode_body());
        let raw = self.transport.roundtrip(&msg.encode())?;
        let resp = ProtocolMessage::decode(&raw).map_err(|e| ClientError::Decode(e.to_string()))?;
        if resp.correlation_id != correlation_id {
            return Err(ClientError::Decode("correlation id mismatch".into()));
        }
        match Response::decode(endpoint, &resp.body).map_err(|e| ClientError::Decode(e.to_string()))? {
            Response::Ok(reply) => Ok(reply),
            Response::ServiceError { code, message } => Err(ClientError::Service { code, message }),
            Response::ProtocolError { code, message } => Err(ClientError::Protocol { code, message }),
        }
    }

    fn unexpected(reply: Reply) -> ClientError {
        ClientError::Decode(format!("unexpected reply {reply:?}"))
    }

    pub fn register(&self, ek_public: PublicKey, account: &str) -> Result<PlatformId, ClientError> {
        match self.call(&Request::Register { ek_public, account: account.into() })? {
            Reply::Registered(id) => Ok(id),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn request_credential(&self, req: CredentialRequest) -> Result<Result<crate::pca::Challenge, String>, ClientError> {
        match self.call(&Request::RequestCredential(req))? {
            Reply::Challenge(c) => Ok(Ok(c)),
            Reply::Denied(code) => Ok(Err(code)),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn complete(&self, resp: ChallengeResponse) -> Result<SealedBox, ClientError> {
        match self.call(&Request::Complete(resp))? {
            Reply::Activation(b) => Ok(b),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn resolve(&self, aik_digest: Digest, token: &str) -> Result<IdentityRecord, ClientError> {
        match self.call(&Request::Resolve { aik_digest, token: token.into() })? {
            Reply::Identity(r) => Ok(r),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn blacklist(&self, platform_id: PlatformId, flag: bool, token: &str) -> Result<(), ClientError> {
        match self.call(&Request::Blacklist { platform_id, flag, token: token.into() })? {
            Reply::Done => Ok(()),
            other => Err(Self::unexpected(other)),
        }
    }

    /// `Ok(Err((code, detail)))` is a rejection by the reputation system.
    pub fn submit(&self, payload: Vec<u8>, chain: CredentialChain) -> Result<Result<Ack, (String, String)>, ClientError> {
        match self.call(&Request::Submit { payload, chain })? {
            Reply::Accepted(ack) => Ok(Ok(ack)),
            Reply::Rejected { code, detail } => Ok(Err((code, detail))),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn score(&self, subject: &str) -> Result<(Option<ExactScore>, u64), ClientError> {
        match self.call(&Request::Score { subject: subject.into() })? {
            Reply::Score { score, count } => Ok((score, count)),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn admin_groups(&self, token: &str, groups: BTreeMap<GroupId, RsGroup>) -> Result<(), ClientError> {
        match self.call(&Request::AdminGroups { token: token.into(), groups })? {
            Reply::Done => Ok(()),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn balance(&self, account: &str) -> Result<Amount, ClientError> {
        match self.call(&Request::Balance { account: account.into() })? {
            Reply::Balance(b) => Ok(b),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn charge(&self, account: &str, amount: Amount, group: GroupId, phase: ChargePhase) -> Result<ChargeReceipt, ClientError> {
        match self.call(&Request::Charge { account: account.into(), amount, group, phase })? {
            Reply::Receipt(r) => Ok(r),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn policy(&self, token: &str, set: Option<PricingPolicy>) -> Result<PricingPolicy, ClientError> {
        match self.call(&Request::Policy { token: token.into(), set: set.map(PricingPolicyBody) })? {
            Reply::Policy(p) => Ok(p.0),
            other => Err(Self::unexpected(other)),
        }
    }
}
