//! Scenario files and the driver that runs them end to end against freshly
//! built services, producing a deterministic [`Transcript`].
//!
//! Scenarios are TOML:
//!
//! ```toml
//! seed = 42
//! rs_id = "rs.example"
//! authority_token = "authority"
//! admin_token = "admin"
//! charging = "acquisition"        # acquisition | ex-post | both | none
//! scale = [1, 5]
//!
//! [shares]
//! cp = "1/5"
//! pca = "2/5"
//! rs = "2/5"
//!
//! [policy]
//! kind = "increasing"             # free | flat | increasing | reverse
//! step = 10
//!
//! [[groups]]
//! price = 100
//! impact = "1"
//!
//! [[agents]]
//! name = "alice"
//! balance = 1000
//!
//! [[steps]]
//! action = "acquire"
//! agent = "alice"
//! group = 1
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_integer::Integer;
use num_traits::ToPrimitive;
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::agent::{AgentError, Submission, TicketState, TrustedAgent};
use crate::clock::SimClock;
use crate::codec::{Canonical, DecodeError, DecodeResult, Reader, Writer};
use crate::cp::{parse_share, Amount, ChargingProvider, CpError, PricingPolicy, RevenueShares, RevenueTotals};
use crate::crypto::{verify_chain, CredentialChain, GroupId, GroupRegistry, PublicKey, VerifyReport};
use crate::journal::JournalError;
use crate::pca::{ChargingPhases, GroupSpec, GroupTable, PcaConfig, PcaError, PrivacyCa};
use crate::rs::{ReputationSystem, RsConfig, RsError, RsGroup};
use crate::score::{read_exact, write_exact};
use crate::wire::{Client, InProcess, MessageRecord, Router, Services, SocketClient, SocketServer, Transport};
use crate::{ExactScore, Impact};

const TRANSCRIPT_TAG: &str = "pseudorate-transcript/v1";
const BUNDLE_TAG: &str = "pseudorate-chain/v1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("service setup failed: {0}")]
    Setup(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<CpError> for ScenarioError {
    fn from(e: CpError) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

impl From<PcaError> for ScenarioError {
    fn from(e: PcaError) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

impl From<RsError> for ScenarioError {
    fn from(e: RsError) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

impl From<JournalError> for ScenarioError {
    fn from(e: JournalError) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

fn config_err(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Config(msg.into())
}

/// An integer or a `"n/d"` / decimal string.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum RatioText {
    Int(u64),
    Text(String),
}

impl RatioText {
    fn parse(&self) -> Option<crate::Share> {
        match self {
            RatioText::Int(n) => Some(crate::Share::from_integer(*n)),
            RatioText::Text(t) => parse_share(t),
        }
    }

    fn to_impact(&self) -> Option<Impact> {
        let r = self.parse()?;
        let n = i64::try_from(*r.numer()).ok()?;
        let d = i64::try_from(*r.denom()).ok()?;
        (n > 0).then(|| Impact::new(n, d))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharesConfig {
    pub cp: RatioText,
    pub pca: RatioText,
    pub rs: RatioText,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: String,
    #[serde(default)]
    pub step: Amount,
    #[serde(default)]
    pub incentive: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    #[serde(default)]
    pub price: Amount,
    pub impact: RatioText,
    #[serde(default)]
    pub price_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub name: String,
    #[serde(default)]
    pub balance: Amount,
    #[serde(default)]
    pub credit_limit: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TamperField {
    /// Sends a different payload than the one the CSK signed.
    Payload,
    /// Flips a bit of the CSK's signature over the rating.
    RatingSignature,
    /// Flips a bit of the certified CSK public key.
    CskEntity,
    /// Rewrites the group named in the AIK credential.
    GroupMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Step {
    /// Acquire `count` tickets of `group`.
    Acquire { agent: String, group: GroupId, #[serde(default = "one")] count: u32 },
    /// Rate `subject` with a fresh ticket (the first one, or `ticket`).
    Redeem {
        agent: String,
        subject: String,
        score: i32,
        #[serde(default)]
        ticket: Option<usize>,
        #[serde(default)]
        comment: Option<String>,
    },
    /// Resend the agent's last submission unchanged.
    Replay { agent: String },
    /// Sign a new rating with an already used ticket (last spent, or `ticket`).
    Respend { agent: String, subject: String, score: i32, #[serde(default)] ticket: Option<usize> },
    /// Submit a corrupted chain built from a fresh ticket.
    Tamper { agent: String, subject: String, score: i32, field: TamperField, #[serde(default)] ticket: Option<usize> },
    /// Ask the TPM to sign arbitrary data with a ticket's AIK.
    AikSign { agent: String, #[serde(default)] ticket: Option<usize> },
    /// Blacklist (or clear) the agent's platform at the PCA.
    Blacklist { agent: String, #[serde(default = "yes")] flag: bool },
    /// De-anonymize a ticket with the authority token and check the answer.
    Resolve { agent: String, #[serde(default)] ticket: Option<usize> },
    /// Retry ex-post charges that failed earlier.
    Settle,
    /// Move the simulated clock forward.
    Advance { ms: u64 },
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

impl Step {
    pub fn agent(&self) -> Option<&str> {
        match self {
            Step::Acquire { agent, .. }
            | Step::Redeem { agent, .. }
            | Step::Replay { agent }
            | Step::Respend { agent, .. }
            | Step::Tamper { agent, .. }
            | Step::AikSign { agent, .. }
            | Step::Blacklist { agent, .. }
            | Step::Resolve { agent, .. } => Some(agent),
            Step::Settle | Step::Advance { .. } => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Step::Acquire { .. } => "acquire",
            Step::Redeem { .. } => "redeem",
            Step::Replay { .. } => "replay",
            Step::Respend { .. } => "respend",
            Step::Tamper { .. } => "tamper",
            Step::AikSign { .. } => "aik-sign",
            Step::Blacklist { .. } => "blacklist",
            Step::Resolve { .. } => "resolve",
            Step::Settle => "settle",
            Step::Advance { .. } => "advance",
        }
    }
}

fn default_rs_id() -> String {
    "rs.example".into()
}

fn default_token() -> String {
    "authority".into()
}

fn default_admin() -> String {
    "admin".into()
}

fn default_charging() -> String {
    "acquisition".into()
}

fn default_scale() -> (i32, i32) {
    (1, 5)
}

fn default_shares() -> SharesConfig {
    SharesConfig { cp: RatioText::Text("1/3".into()), pca: RatioText::Text("1/3".into()), rs: RatioText::Text("1/3".into()) }
}

fn default_policy() -> PolicyConfig {
    PolicyConfig { kind: "flat".into(), step: 0, incentive: 0 }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rs_id")]
    pub rs_id: String,
    #[serde(default = "default_token")]
    pub authority_token: String,
    #[serde(default = "default_admin")]
    pub admin_token: String,
    #[serde(default = "default_charging")]
    pub charging: String,
    #[serde(default = "default_scale")]
    pub scale: (i32, i32),
    #[serde(default = "default_shares")]
    pub shares: SharesConfig,
    #[serde(default = "default_policy")]
    pub policy: PolicyConfig,
    pub groups: Vec<GroupConfig>,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub steps: Vec<Step>,
}

/// Everything needed to build the services, checked up front.
#[derive(Debug, Clone)]
pub struct ValidConfig {
    pub charging: ChargingPhases,
    pub shares: RevenueShares,
    pub policy: PricingPolicy,
    pub impacts: Vec<Impact>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The built-in happy-path demo: two users buy tickets of different
    /// groups and each rates once.
    pub fn demo(seed: u64) -> Self {
        let mut s = Self::parse(DEMO).expect("built-in demo is valid");
        s.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<ValidConfig, ScenarioError> {
        let charging = match self.charging.as_str() {
            "acquisition" => ChargingPhases::ACQUISITION,
            "ex-post" => ChargingPhases::EX_POST,
            "both" => ChargingPhases::BOTH,
            "none" => ChargingPhases::NONE,
            other => return Err(config_err(format!("unknown charging mode {other:?}"))),
        };
        if self.rs_id.is_empty() {
            return Err(config_err("rs_id must not be empty"));
        }
        if self.scale.0 > self.scale.1 {
            return Err(config_err("scale must be [low, high] with low <= high"));
        }
        let share = |name: &str, t: &RatioText| t.parse().ok_or_else(|| config_err(format!("bad {name} share")));
        let shares = RevenueShares::new(
            share("cp", &self.shares.cp)?,
            share("pca", &self.shares.pca)?,
            share("rs", &self.shares.rs)?,
        )
        .map_err(|_| config_err("revenue shares must sum to 1"))?;

        if self.groups.is_empty() {
            return Err(config_err("at least one group is required"));
        }
        let mut impacts = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            impacts.push(g.impact.to_impact().ok_or_else(|| config_err(format!("group {} impact must be positive", i + 1)))?);
        }
        let prices: BTreeMap<GroupId, Amount> = self.groups.iter().enumerate().map(|(i, g)| (i as GroupId + 1, g.price)).collect();
        let policy = match self.policy.kind.as_str() {
            "free" => PricingPolicy::Free,
            "flat" => PricingPolicy::Flat { prices },
            "increasing" => PricingPolicy::Increasing { base: prices, step: self.policy.step },
            "reverse" => PricingPolicy::Reverse { incentive: self.policy.incentive },
            other => return Err(config_err(format!("unknown policy kind {other:?}"))),
        };
        policy.validate().map_err(|e| config_err(e.to_string()))?;

        let mut names = BTreeSet::new();
        for a in &self.agents {
            if a.name.is_empty() || !names.insert(a.name.as_str()) {
                return Err(config_err(format!("agent names must be unique and non-empty: {:?}", a.name)));
            }
            if a.credit_limit < 0 {
                return Err(config_err(format!("agent {} has a negative credit limit", a.name)));
            }
        }
        let group_count = self.groups.len() as GroupId;
        for (i, step) in self.steps.iter().enumerate() {
            if let Some(agent) = step.agent() {
                if !names.contains(agent) {
                    return Err(config_err(format!("step {i} names undeclared agent {agent:?}")));
                }
            }
            if let Step::Acquire { group, .. } = step {
                if *group == 0 || *group > group_count {
                    return Err(config_err(format!("step {i} names undeclared group {group}")));
                }
            }
        }
        Ok(ValidConfig { charging, shares, policy, impacts })
    }
}

pub const DEMO: &str = r#"
seed = 42
rs_id = "rs.example"
charging = "acquisition"

[shares]
cp = "1/5"
pca = "2/5"
rs = "2/5"

[policy]
kind = "flat"

[[groups]]
price = 100
impact = "1"

[[groups]]
price = 250
impact = "3"

[[agents]]
name = "alice"
balance = 1000

[[agents]]
name = "bob"
balance = 1000

[[steps]]
action = "acquire"
agent = "alice"
group = 1

[[steps]]
action = "redeem"
agent = "alice"
subject = "seller-17"
score = 5

[[steps]]
action = "acquire"
agent = "bob"
group = 2

[[steps]]
action = "redeem"
agent = "bob"
subject = "seller-17"
score = 3
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Socket,
}

impl TransportKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inproc" => Some(TransportKind::InProcess),
            "socket" => Some(TransportKind::Socket),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    pub transport: TransportKind,
    /// Persist service state under this directory instead of memory only.
    pub data_dir: Option<PathBuf>,
}

/// A submission the RS accepted, with the registry needed to check it offline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainBundle {
    pub registry: GroupRegistry,
    pub payload: Vec<u8>,
    pub chain: CredentialChain,
}

impl ChainBundle {
    /// Checks the chain and that it signs exactly the bundled payload.
    pub fn verify(&self) -> VerifyReport {
        verify_chain(&self.chain, &self.registry)
    }

    pub fn valid(&self) -> bool {
        self.verify().valid() && self.chain.rating_cred.entity == self.payload
    }

    fn write_body(&self, w: &mut Writer) {
        write_registry(w, &self.registry);
        w.bytes(&self.payload);
        self.chain.write(w);
    }

    fn read_body(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(ChainBundle { registry: read_registry(r)?, payload: r.bytes()?, chain: CredentialChain::read(r)? })
    }
}

impl Canonical for ChainBundle {
    fn write(&self, w: &mut Writer) {
        w.str(BUNDLE_TAG);
        self.write_body(w);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        if r.str()? != BUNDLE_TAG {
            return Err(DecodeError::Invalid("not a chain bundle"));
        }
        Self::read_body(r)
    }
}

fn write_registry(w: &mut Writer, registry: &GroupRegistry) {
    w.u32(registry.len() as u32);
    for (g, k) in registry {
        w.u32(*g).bytes(k.as_bytes());
    }
}

fn read_registry(r: &mut Reader<'_>) -> DecodeResult<GroupRegistry> {
    let entries = r.seq(|r| Ok((r.u32()?, PublicKey(r.fixed()?))))?;
    let mut map = BTreeMap::new();
    for (g, k) in entries {
        if map.last_key_value().is_some_and(|(last, _)| *last >= g) {
            return Err(DecodeError::UnsortedMap);
        }
        map.insert(g, k);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub index: u32,
    pub action: String,
    pub agent: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub seed: u64,
    pub rs_id: String,
    pub registry: BTreeMap<GroupId, RsGroup>,
    pub messages: Vec<MessageRecord>,
    pub steps: Vec<StepOutcome>,
    pub balances: BTreeMap<String, Amount>,
    pub totals: RevenueTotals,
    pub spent_count: u64,
    pub rating_count: u64,
    pub scores: BTreeMap<String, Option<ExactScore>>,
    /// Every accepted submission, in acceptance order.
    pub accepted: Vec<ChainBundle>,
}

impl Transcript {
    /// Copy with every timestamp zeroed, for comparing runs.
    pub fn normalized(&self) -> Self {
        let mut t = self.clone();
        for m in &mut t.messages {
            m.at = 0;
        }
        t
    }

    pub fn public_registry(&self) -> GroupRegistry {
        self.registry.iter().map(|(g, e)| (*g, e.key)).collect()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "rs {}", self.rs_id);
        for (g, e) in &self.registry {
            let _ = writeln!(out, "group {g} key={} impact={}", e.key, e.impact);
        }
        for m in &self.messages {
            let _ = writeln!(out, "msg {} t={} {} {}", m.seq, m.at, m.endpoint, m.outcome);
        }
        for s in &self.steps {
            let agent = if s.agent.is_empty() { "-" } else { s.agent.as_str() };
            let _ = writeln!(out, "step {} {} {} {}", s.index, s.action, agent, s.outcome);
        }
        for (a, b) in &self.balances {
            let _ = writeln!(out, "balance {a} {b}");
        }
        let t = &self.totals;
        let _ = writeln!(out, "revenue cp={} pca={} rs={} incentives={}", t.cp, t.pca, t.rs, t.incentives_paid);
        let _ = writeln!(out, "spent {}", self.spent_count);
        let _ = writeln!(out, "ratings {}", self.rating_count);
        for (subject, score) in &self.scores {
            match score {
                Some(s) => {
                    let approx = s.to_f64().unwrap_or(f64::NAN);
                    let _ = writeln!(out, "score {subject} {s} ~{approx:.6}");
                }
                None => {
                    let _ = writeln!(out, "score {subject} none");
                }
            }
        }
        out
    }
}

impl Canonical for Transcript {
    fn write(&self, w: &mut Writer) {
        w.str(TRANSCRIPT_TAG).u64(self.seed).str(&self.rs_id);
        w.u32(self.registry.len() as u32);
        for (g, e) in &self.registry {
            w.u32(*g).bytes(e.key.as_bytes()).i64(*e.impact.numer()).i64(*e.impact.denom());
        }
        w.seq(&self.messages, |w, m| m.write(w));
        w.seq(&self.steps, |w, s| {
            w.u32(s.index).str(&s.action).str(&s.agent).str(&s.outcome);
        });
        w.u32(self.balances.len() as u32);
        for (a, b) in &self.balances {
            w.str(a).i64(*b);
        }
        let t = &self.totals;
        w.i64(t.cp).i64(t.pca).i64(t.rs).i64(t.incentives_paid);
        w.u64(self.spent_count).u64(self.rating_count);
        w.u32(self.scores.len() as u32);
        for (subject, score) in &self.scores {
            w.str(subject).option(score.as_ref(), write_exact);
        }
        w.seq(&self.accepted, |w, b| b.write_body(w));
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        if r.str()? != TRANSCRIPT_TAG {
            return Err(DecodeError::Invalid("not a transcript"));
        }
        let seed = r.u64()?;
        let rs_id = r.str()?;
        let mut registry = BTreeMap::new();
        for (g, group) in r.seq(|r| {
            let g = r.u32()?;
            let key = PublicKey(r.fixed()?);
            let (n, d) = (r.i64()?, r.i64()?);
            if n <= 0 || d <= 0 || n.gcd(&d) != 1 {
                return Err(DecodeError::Invalid("impact must be positive and in lowest terms"));
            }
            Ok((g, RsGroup { key, impact: Impact::new_raw(n, d) }))
        })? {
            if registry.last_key_value().is_some_and(|(last, _)| *last >= g) {
                return Err(DecodeError::UnsortedMap);
            }
            registry.insert(g, group);
        }
        let messages = r.seq(MessageRecord::read)?;
        let steps = r.seq(|r| Ok(StepOutcome { index: r.u32()?, action: r.str()?, agent: r.str()?, outcome: r.str()? }))?;
        let mut balances = BTreeMap::new();
        for (name, amount) in r.seq(|r| Ok((r.str()?, r.i64()?)))? {
            if balances.last_key_value().is_some_and(|(last, _): (&String, _)| last.as_bytes() >= name.as_bytes()) {
                return Err(DecodeError::UnsortedMap);
            }
            balances.insert(name, amount);
        }
        let totals = RevenueTotals { cp: r.i64()?, pca: r.i64()?, rs: r.i64()?, incentives_paid: r.i64()? };
        let spent_count = r.u64()?;
        let rating_count = r.u64()?;
        let mut scores = BTreeMap::new();
        for (subject, score) in r.seq(|r| Ok((r.str()?, r.option(read_exact)?)))? {
            if scores.last_key_value().is_some_and(|(last, _): (&String, _)| last.as_bytes() >= subject.as_bytes()) {
                return Err(DecodeError::UnsortedMap);
            }
            scores.insert(subject, score);
        }
        let accepted = r.seq(ChainBundle::read_body)?;
        Ok(Transcript { seed, rs_id, registry, messages, steps, balances, totals, spent_count, rating_count, scores, accepted })
    }
}

/// Seeds for every randomized component, drawn in a fixed order.
struct SeedSource(ChaCha20Rng);

impl SeedSource {
    fn new(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    fn next(&mut self) -> [u8; 32] {
        let mut s = [0u8; 32];
        self.0.fill_bytes(&mut s);
        s
    }
}

/// Freshly built services for one run.
pub struct World {
    pub services: Services,
    pub router: Arc<Router>,
    server: Option<SocketServer>,
    transport: TransportKind,
}

impl World {
    pub fn build(s: &Scenario, cfg: &ValidConfig, seed: u64, opts: &RunOptions) -> Result<Self, ScenarioError> {
        let mut seeds = SeedSource::new(seed);
        let clock = SimClock::new(1_000);
        if let Some(dir) = &opts.data_dir {
            if dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
                return Err(config_err(format!("data directory {} is not empty", dir.display())));
            }
            std::fs::create_dir_all(dir)?;
        }
        let cp = match &opts.data_dir {
            Some(dir) => ChargingProvider::open(cfg.policy.clone(), cfg.shares, clock.clone(), dir.join("ledger.log"))?,
            None => ChargingProvider::new(cfg.policy.clone(), cfg.shares, clock.clone())?,
        };
        let cp = Arc::new(cp);
        for a in &s.agents {
            cp.open_account(&a.name, a.balance, a.credit_limit)?;
        }
        let specs = s
            .groups
            .iter()
            .zip(&cfg.impacts)
            .enumerate()
            .map(|(i, (g, impact))| GroupSpec {
                price_class: g.price_class.clone().unwrap_or_else(|| format!("class-{}", i + 1)),
                impact: *impact,
                rs_id: s.rs_id.clone(),
            })
            .collect();
        let groups = GroupTable::generate(specs, &mut ChaCha20Rng::from_seed(seeds.next()))?;
        let config = PcaConfig { authority_token: s.authority_token.clone(), charging: cfg.charging, ..PcaConfig::default() };
        let pca_seed = seeds.next();
        let pca = match &opts.data_dir {
            Some(dir) => PrivacyCa::open(config, groups, cp.clone(), clock.clone(), pca_seed, dir.join("pca.log"))?,
            None => PrivacyCa::new(config, groups, cp.clone(), clock.clone(), pca_seed),
        };
        let pca = Arc::new(pca);
        let rs_config = RsConfig { rs_id: s.rs_id.clone(), scale: s.scale };
        let rs = match &opts.data_dir {
            Some(dir) => ReputationSystem::open(rs_config, clock.clone(), dir.join("rs"))?,
            None => ReputationSystem::new(rs_config, clock.clone()),
        };
        let rs = Arc::new(rs.with_ex_post(pca.clone()));
        let services = Services { pca, rs, cp, clock };
        let router = Arc::new(Router::new(services.clone(), s.admin_token.clone()));
        let server = match opts.transport {
            TransportKind::InProcess => None,
            TransportKind::Socket => Some(SocketServer::bind_from_env(router.clone())?),
        };
        Ok(Self { services, router, server, transport: opts.transport })
    }

    pub fn transport(&self) -> Arc<dyn Transport> {
        match (&self.server, self.transport) {
            (Some(server), TransportKind::Socket) => Arc::new(SocketClient::new(server.local_addr())),
            _ => Arc::new(InProcess::new(self.router.clone())),
        }
    }

    pub fn client(&self, label: &str) -> Client {
        Client::new(self.transport(), label)
    }

    /// The PCA's group keys and impacts, as the RS needs them.
    pub fn rs_registry(&self) -> BTreeMap<GroupId, RsGroup> {
        self.services.pca.groups().iter().map(|(g, e)| (g, RsGroup { key: e.public(), impact: e.impact })).collect()
    }
}

struct AgentSlot {
    agent: TrustedAgent,
    last_submission: Option<(usize, Submission)>,
}

fn pick_fresh(agent: &TrustedAgent, ticket: Option<usize>) -> Result<usize, String> {
    match ticket {
        Some(i) if i < agent.tickets().len() => Ok(i),
        Some(i) => Err(AgentError::NoSuchTicket(i).code()),
        None => agent.fresh_tickets().map(|(i, _)| i).next().ok_or_else(|| "no-fresh-ticket".to_string()),
    }
}

fn pick_spent(agent: &TrustedAgent, ticket: Option<usize>) -> Result<usize, String> {
    match ticket {
        Some(i) if i < agent.tickets().len() => Ok(i),
        Some(i) => Err(AgentError::NoSuchTicket(i).code()),
        None => agent
            .tickets()
            .iter()
            .enumerate()
            .rev()
            .find(|(_, t)| t.state == TicketState::Spent)
            .map(|(i, _)| i)
            .ok_or_else(|| "no-spent-ticket".to_string()),
    }
}

fn flip_bit(bytes: &mut [u8]) {
    if let Some(b) = bytes.first_mut() {
        *b ^= 0x01;
    }
}

/// Runs `s` against freshly built services. Configuration problems are
/// reported before any message is sent; step failures are recorded as
/// outcomes.
pub fn run_scenario(s: &Scenario, opts: &RunOptions) -> Result<Transcript, ScenarioError> {
    let cfg = s.validate()?;
    let seed = opts.seed.unwrap_or(s.seed);
    let world = World::build(s, &cfg, seed, opts)?;
    let services = world.services.clone();

    let driver = world.client("driver");
    let registry = world.rs_registry();
    driver.admin_groups(&s.admin_token, registry.clone()).map_err(|e| ScenarioError::Setup(e.to_string()))?;

    let mut agent_seeds = SeedSource::new(seed ^ 0x5eed_a6e7);
    let mut agents: BTreeMap<String, AgentSlot> = BTreeMap::new();
    for a in &s.agents {
        let mut agent = TrustedAgent::new(&a.name, agent_seeds.next(), world.client(&a.name));
        agent.register(&a.name).map_err(|e| ScenarioError::Setup(format!("registering {}: {e}", a.name)))?;
        agents.insert(a.name.clone(), AgentSlot { agent, last_submission: None });
    }

    let public_registry: GroupRegistry = registry.iter().map(|(g, e)| (*g, e.key)).collect();
    let mut accepted = Vec::new();
    let mut steps = Vec::new();
    for (index, step) in s.steps.iter().enumerate() {
        let outcome = run_step(step, &mut agents, &services, s, &public_registry, &mut accepted);
        steps.push(StepOutcome {
            index: index as u32,
            action: step.name().to_string(),
            agent: step.agent().unwrap_or_default().to_string(),
            outcome,
        });
    }
    drop(agents);

    let rs = &services.rs;
    let scores = rs.subjects().into_iter().map(|subject| {
        let score = rs.aggregate(&subject);
        (subject, score)
    });
    Ok(Transcript {
        seed,
        rs_id: s.rs_id.clone(),
        registry,
        messages: world.router.messages(),
        steps,
        balances: services.cp.balances(),
        totals: services.cp.totals(),
        spent_count: rs.spent_count() as u64,
        rating_count: rs.ratings().len() as u64,
        scores: scores.collect(),
        accepted,
    })
}

fn run_step(
    step: &Step,
    agents: &mut BTreeMap<String, AgentSlot>,
    services: &Services,
    s: &Scenario,
    registry: &GroupRegistry,
    accepted: &mut Vec<ChainBundle>,
) -> String {
    let slot = step.agent().and_then(|a| agents.get_mut(a));
    let result: Result<String, String> = match (step, slot) {
        (Step::Settle, _) => Ok(format!("ok retried={}", services.rs.retry_pending_charges())),
        (Step::Advance { ms }, _) => Ok(format!("ok now={}", services.clock.advance(*ms))),
        (_, None) => Err("unknown-agent".into()),
        (Step::Acquire { group, count, .. }, Some(slot)) => {
            let mut got = Vec::new();
            let mut failure = None;
            for _ in 0..*count {
                match slot.agent.acquire_ticket(*group) {
                    Ok(i) => got.push(i.to_string()),
                    Err(e) => {
                        failure = Some(e.code());
                        break;
                    }
                }
            }
            match failure {
                None => Ok(format!("ok tickets={}", got.join(","))),
                Some(code) if got.is_empty() => Err(code),
                Some(code) => Err(format!("{code} after tickets={}", got.join(","))),
            }
        }
        (Step::Redeem { subject, score, ticket, comment, .. }, Some(slot)) => (|| {
            let idx = pick_fresh(&slot.agent, *ticket)?;
            let payload = slot.agent.payload_for(idx, subject, *score, comment.clone()).map_err(|e| e.code())?;
            let sub = slot.agent.prepare_submission(idx, &payload).map_err(|e| e.code())?;
            send(slot, idx, sub, registry, accepted)
        })(),
        (Step::Replay { .. }, Some(slot)) => match slot.last_submission.clone() {
            None => Err("nothing-to-replay".into()),
            Some((idx, sub)) => send(slot, idx, sub, registry, accepted),
        },
        (Step::Respend { subject, score, ticket, .. }, Some(slot)) => (|| {
            let idx = pick_spent(&slot.agent, *ticket)?;
            let payload = slot.agent.payload_for(idx, subject, *score, None).map_err(|e| e.code())?;
            let sub = slot.agent.prepare_submission(idx, &payload).map_err(|e| e.code())?;
            send(slot, idx, sub, registry, accepted)
        })(),
        (Step::Tamper { subject, score, field, ticket, .. }, Some(slot)) => (|| {
            let idx = pick_fresh(&slot.agent, *ticket)?;
            let payload = slot.agent.payload_for(idx, subject, *score, None).map_err(|e| e.code())?;
            let mut sub = slot.agent.prepare_submission(idx, &payload).map_err(|e| e.code())?;
            match field {
                TamperField::Payload => {
                    let mut other = payload.clone();
                    other.score = if payload.score == s.scale.1 { s.scale.0 } else { s.scale.1 };
                    sub.payload = other.encode();
                }
                TamperField::RatingSignature => flip_bit(&mut sub.chain.rating_cred.signature),
                TamperField::CskEntity => flip_bit(&mut sub.chain.csk_cred.entity),
                TamperField::GroupMeta => {
                    let g = sub.chain.aik_cred.meta.entry(crate::crypto::labels::GROUP.to_string()).or_default();
                    *g = format!("{}", g.parse::<u64>().unwrap_or(0) + 1);
                }
            }
            send(slot, idx, sub, registry, accepted)
        })(),
        (Step::AikSign { ticket, .. }, Some(slot)) => {
            let idx = ticket.unwrap_or(slot.agent.tickets().len().saturating_sub(1));
            slot.agent.sign_payload_with_aik(idx, b"arbitrary data").map(|_| "ok signed".to_string()).map_err(|e| e.code())
        }
        (Step::Blacklist { flag, .. }, Some(slot)) => (|| {
            let id = slot.agent.platform_id().ok_or_else(|| AgentError::NotRegistered.code())?;
            slot.agent.client().blacklist(id, *flag, &s.authority_token).map(|_| "ok".to_string()).map_err(|e| e.code().to_string())
        })(),
        (Step::Resolve { ticket, .. }, Some(slot)) => (|| {
            let idx = ticket.unwrap_or(slot.agent.tickets().len().saturating_sub(1));
            let t = slot.agent.tickets().get(idx).ok_or_else(|| AgentError::NoSuchTicket(idx).code())?;
            let record = slot.agent.client().resolve(t.aik_digest(), &s.authority_token).map_err(|e| e.code().to_string())?;
            if Some(record.platform_id) == slot.agent.platform_id() {
                Ok("ok match".into())
            } else {
                Err("mismatch".into())
            }
        })(),
    };
    match result {
        Ok(o) => o,
        Err(e) => e,
    }
}

fn send(
    slot: &mut AgentSlot,
    idx: usize,
    sub: Submission,
    registry: &GroupRegistry,
    accepted: &mut Vec<ChainBundle>,
) -> Result<String, String> {
    slot.last_submission = Some((idx, sub.clone()));
    match slot.agent.submit(idx, &sub) {
        Ok(ack) => {
            accepted.push(ChainBundle { registry: registry.clone(), payload: sub.payload, chain: sub.chain });
            Ok(format!("ack seq={}", ack.seq))
        }
        Err(AgentError::Rejected { code, detail }) if code == "invalid-chain" => Err(format!("reject {code} {detail}")),
        Err(AgentError::Rejected { code, .. }) => Err(format!("reject {code}")),
        Err(e) => Err(e.code()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(steps: &str) -> String {
        format!(
            r#"
seed = 7
[policy]
kind = "increasing"
step = 10
[[groups]]
price = 100
impact = 1
[[groups]]
price = 50
impact = "1/2"
[[agents]]
name = "alice"
balance = 5000
[[agents]]
name = "bob"
balance = 5000
{steps}
"#
        )
    }

    #[test]
    fn demo_runs_happy_path() {
        let t = run_scenario(&Scenario::demo(42), &RunOptions::default()).unwrap();
        assert_eq!(t.rating_count, 2);
        assert_eq!(t.spent_count, 2);
        assert!(t.steps.iter().all(|s| s.outcome.starts_with("ok") || s.outcome.starts_with("ack")), "{:?}", t.steps);
        // (1*5 + 3*3) / 4 = 7/2
        assert_eq!(t.scores["seller-17"], Some(ExactScore::new(7.into(), 2.into())));
        assert_eq!(t.balances["alice"], 900);
        assert_eq!(t.balances["bob"], 750);
        assert_eq!(t.totals.cp + t.totals.pca + t.totals.rs, 350);
        assert!(t.accepted.iter().all(ChainBundle::valid));
    }

    #[test]
    fn double_spend_script() {
        let steps = r#"
[[steps]]
action = "acquire"
agent = "alice"
group = 1
[[steps]]
action = "redeem"
agent = "alice"
subject = "s"
score = 4
[[steps]]
action = "replay"
agent = "alice"
[[steps]]
action = "respend"
agent = "alice"
subject = "s"
score = 1
"#;
        let t = run_scenario(&Scenario::parse(&base(steps)).unwrap(), &RunOptions::default()).unwrap();
        let outcomes: Vec<&str> = t.steps.iter().map(|s| s.outcome.as_str()).collect();
        assert!(outcomes[1].starts_with("ack"));
        assert_eq!(outcomes[2], "reject double-spend");
        assert_eq!(outcomes[3], "reject double-spend");
        assert_eq!(t.rating_count, 1);
    }

    #[test]
    fn sybil_pays_arithmetic_series() {
        let steps = "[[steps]]\naction = \"acquire\"\nagent = \"alice\"\ngroup = 1\ncount = 10\n";
        let t = run_scenario(&Scenario::parse(&base(steps)).unwrap(), &RunOptions::default()).unwrap();
        assert_eq!(5000 - t.balances["alice"], (0..10).map(|i| 100 + 10 * i).sum::<i64>());
    }

    #[test]
    fn config_errors_are_caught_before_running() {
        let bad_agent = base("[[steps]]\naction = \"acquire\"\nagent = \"mallory\"\ngroup = 1\n");
        assert!(matches!(Scenario::parse(&bad_agent), Err(ScenarioError::Config(_))));
        let bad_group = base("[[steps]]\naction = \"acquire\"\nagent = \"alice\"\ngroup = 3\n");
        assert!(matches!(Scenario::parse(&bad_group), Err(ScenarioError::Config(_))));
        let bad_shares = base("[shares]\ncp = \"1/2\"\npca = \"1/2\"\nrs = \"1/2\"\n");
        assert!(Scenario::parse(&bad_shares).is_err());
        assert!(matches!(Scenario::parse("groups = 3"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn transcript_roundtrips() {
        let t = run_scenario(&Scenario::demo(1), &RunOptions::default()).unwrap();
        assert_eq!(Transcript::decode(&t.encode()).unwrap(), t);
        let b = &t.accepted[0];
        assert_eq!(ChainBundle::decode(&b.encode()).unwrap(), *b);
    }
}
