//! Charging provider: account ledger, ticket pricing and revenue sharing.
//!
//! Amounts are signed integers in minor currency units. A positive amount
//! is a charge (debit), a negative one a credit paid to the account. The CP
//! only ever sees a group id, never what the group means.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_integer::Integer;
use num_traits::{CheckedAdd, One, Zero};
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::clock::{SimClock, Timestamp};
use crate::codec::{Canonical, DecodeError, DecodeResult, Reader, Writer};
use crate::crypto::GroupId;
use crate::journal::{self, Journal, JournalError};
use crate::Share;

pub type Amount = i64;

#[derive(Debug, Error)]
pub enum CpError {
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("account {0} already exists")]
    DuplicateAccount(String),
    #[error("charge of {amount} declined: balance {balance}, credit limit {credit_limit}")]
    Declined { amount: Amount, balance: Amount, credit_limit: Amount },
    #[error("group {0} has no price in the pricing policy")]
    UnknownGroup(GroupId),
    #[error("revenue shares must be non-negative and sum to exactly 1")]
    InvalidShares,
    #[error("invalid pricing policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("amount overflow")]
    Overflow,
    #[error(transparent)]
    Journal(#[from] JournalError),
}

impl CpError {
    pub fn code(&self) -> &'static str {
        match self {
            CpError::UnknownAccount(_) => "unknown-account",
            CpError::DuplicateAccount(_) => "duplicate-account",
            CpError::Declined { .. } => "cp-declined",
            CpError::UnknownGroup(_) => "unknown-group",
            CpError::InvalidShares => "invalid-shares",
            CpError::InvalidPolicy(_) => "invalid-policy",
            CpError::InvalidArgument(_) => "invalid-argument",
            CpError::Overflow => "overflow",
            CpError::Journal(_) => "internal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChargePhase {
    Acquisition,
    ExPost,
}

impl ChargePhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChargePhase::Acquisition => "acquisition",
            ChargePhase::ExPost => "ex_post",
        }
    }

    fn tag(self) -> u8 {
        match self {
            ChargePhase::Acquisition => 0,
            ChargePhase::ExPost => 1,
        }
    }

    fn from_tag(tag: u8) -> DecodeResult<Self> {
        match tag {
            0 => Ok(ChargePhase::Acquisition),
            1 => Ok(ChargePhase::ExPost),
            tag => Err(DecodeError::InvalidTag { what: "charge phase", tag }),
        }
    }
}

impl Canonical for ChargePhase {
    fn write(&self, w: &mut Writer) {
        w.u8(self.tag());
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        ChargePhase::from_tag(r.u8()?)
    }
}

/// What a pricing rule may look at when quoting a ticket.
#[derive(Debug, Clone, Copy)]
pub struct PriceContext<'a> {
    pub prior_count: u64,
    /// Times of the account's earlier ticket charges, oldest first.
    pub prior_charges: &'a [Timestamp],
    pub now: Timestamp,
}

/// Extension point for pricing schemes beyond the built-in kinds, such as
/// frequency-based charging.
pub trait PricingRule: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn price(&self, group: GroupId, ctx: &PriceContext<'_>) -> Result<Amount, CpError>;
}

#[derive(Debug, Clone)]
pub enum PricingPolicy {
    Free,
    Flat { prices: BTreeMap<GroupId, Amount> },
    /// `base[g] + step * prior_count`.
    Increasing { base: BTreeMap<GroupId, Amount>, step: Amount },
    /// Pays `incentive` to the rater for every ticket.
    Reverse { incentive: Amount },
    Custom(Arc<dyn PricingRule>),
}

impl PricingPolicy {
    pub fn validate(&self) -> Result<(), CpError> {
        match self {
            PricingPolicy::Flat { prices } if prices.values().any(|p| *p < 0) => {
                Err(CpError::InvalidPolicy("flat prices must be non-negative"))
            }
            PricingPolicy::Increasing { base, .. } if base.values().any(|p| *p < 0) => {
                Err(CpError::InvalidPolicy("base prices must be non-negative"))
            }
            PricingPolicy::Increasing { step, .. } if *step < 0 => Err(CpError::InvalidPolicy("step must be non-negative")),
            PricingPolicy::Reverse { incentive } if *incentive <= 0 => {
                Err(CpError::InvalidPolicy("incentive must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> &str {
        match self {
            PricingPolicy::Free => "free",
            PricingPolicy::Flat { .. } => "flat",
            PricingPolicy::Increasing { .. } => "increasing",
            PricingPolicy::Reverse { .. } => "reverse",
            PricingPolicy::Custom(rule) => rule.name(),
        }
    }

    /// Price of the next ticket of group `group` for an account that already
    /// bought `prior_count` tickets.
    pub fn price(&self, group: GroupId, prior_count: u64) -> Result<Amount, CpError> {
        self.price_in(group, &PriceContext { prior_count, prior_charges: &[], now: 0 })
    }

    pub fn price_in(&self, group: GroupId, ctx: &PriceContext<'_>) -> Result<Amount, CpError> {
        match self {
            PricingPolicy::Free => Ok(0),
            PricingPolicy::Flat { prices } => prices.get(&group).copied().ok_or(CpError::UnknownGroup(group)),
            PricingPolicy::Increasing { base, step } => {
                let base = *base.get(&group).ok_or(CpError::UnknownGroup(group))?;
                let count = Amount::try_from(ctx.prior_count).map_err(|_| CpError::Overflow)?;
                step.checked_mul(count).and_then(|s| s.checked_add(base)).ok_or(CpError::Overflow)
            }
            PricingPolicy::Reverse { incentive } => Ok(-incentive),
            PricingPolicy::Custom(rule) => rule.price(group, ctx),
        }
    }
}

fn write_price_map(w: &mut Writer, map: &BTreeMap<GroupId, Amount>) {
    w.u32(map.len() as u32);
    for (g, p) in map {
        w.u32(*g).i64(*p);
    }
}

fn read_price_map(r: &mut Reader<'_>) -> DecodeResult<BTreeMap<GroupId, Amount>> {
    let entries = r.seq(|r| Ok((r.u32()?, r.i64()?)))?;
    let mut map = BTreeMap::new();
    for (g, p) in entries {
        if map.last_key_value().is_some_and(|(last, _)| *last >= g) {
            return Err(DecodeError::UnsortedMap);
        }
        map.insert(g, p);
    }
    Ok(map)
}

impl Canonical for PricingPolicy {
    /// Custom rules encode their name only and cannot be decoded.
    fn write(&self, w: &mut Writer) {
        match self {
            PricingPolicy::Free => {
                w.u8(0);
            }
            PricingPolicy::Flat { prices } => {
                w.u8(1);
                write_price_map(w, prices);
            }
            PricingPolicy::Increasing { base, step } => {
                w.u8(2);
                write_price_map(w, base);
                w.i64(*step);
            }
            PricingPolicy::Reverse { incentive } => {
                w.u8(3).i64(*incentive);
            }
            PricingPolicy::Custom(rule) => {
                w.u8(4).str(rule.name());
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        match r.u8()? {
            0 => Ok(PricingPolicy::Free),
            1 => Ok(PricingPolicy::Flat { prices: read_price_map(r)? }),
            2 => Ok(PricingPolicy::Increasing { base: read_price_map(r)?, step: r.i64()? }),
            3 => Ok(PricingPolicy::Reverse { incentive: r.i64()? }),
            4 => Err(DecodeError::Invalid("custom pricing rules cannot be transported")),
            tag => Err(DecodeError::InvalidTag { what: "pricing policy", tag }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RevenueShares {
    cp: Share,
    pca: Share,
    rs: Share,
}

impl RevenueShares {
    pub fn new(cp: Share, pca: Share, rs: Share) -> Result<Self, CpError> {
        let sum = cp.checked_add(&pca).and_then(|s| s.checked_add(&rs)).ok_or(CpError::InvalidShares)?;
        if !sum.is_one() {
            return Err(CpError::InvalidShares);
        }
        Ok(Self { cp, pca, rs })
    }

    pub fn parts(&self) -> [Share; 3] {
        [self.cp, self.pca, self.rs]
    }
}

impl Canonical for RevenueShares {
    fn write(&self, w: &mut Writer) {
        for s in self.parts() {
            w.u64(*s.numer()).u64(*s.denom());
        }
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        let mut parts = [Share::zero(); 3];
        for p in &mut parts {
            let (n, d) = (r.u64()?, r.u64()?);
            if d == 0 || n.gcd(&d) != 1 {
                return Err(DecodeError::Invalid("share not in lowest terms"));
            }
            *p = Share::new_raw(n, d);
        }
        RevenueShares::new(parts[0], parts[1], parts[2]).map_err(|_| DecodeError::Invalid("shares do not sum to 1"))
    }
}

/// Parses `"2/5"`, `"0.4"` or `"1"` as an exact share.
pub fn parse_share(text: &str) -> Option<Share> {
    let text = text.trim();
    if let Some((n, d)) = text.split_once('/') {
        let (n, d): (u64, u64) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
        return (d != 0).then(|| Share::new(n, d));
    }
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let den = 10u64.pow(frac.len() as u32);
    let frac_num: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    Some(Share::new(int.checked_mul(den)?.checked_add(frac_num)?, den))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RevenueSplit {
    pub cp: Amount,
    pub pca: Amount,
    pub rs: Amount,
}

impl RevenueSplit {
    pub fn total(&self) -> Amount {
        self.cp + self.pca + self.rs
    }
}

/// Splits `amount` by `shares` with largest-remainder rounding: every party
/// gets the floor of its exact share, then the leftover minor units go to
/// the largest fractional remainders (ties to cp, then pca, then rs).
pub fn split_revenue(amount: Amount, shares: &RevenueShares) -> Result<RevenueSplit, CpError> {
    if amount < 0 {
        return Err(CpError::InvalidArgument("amount must be non-negative"));
    }
    let total = amount as u128;
    let mut floors = [0u128; 3];
    let mut rems = [(0u128, 1u128); 3];
    for (i, s) in shares.parts().iter().enumerate() {
        let (n, d) = (*s.numer() as u128, *s.denom() as u128);
        let exact = total * n;
        floors[i] = exact / d;
        rems[i] = (exact % d, d);
    }
    let mut order = [0usize, 1, 2];
    // a/b > c/d  <=>  a*d > c*b; both products stay below 2^128
    order.sort_by(|&i, &j| (rems[j].0 * rems[i].1).cmp(&(rems[i].0 * rems[j].1)).then(i.cmp(&j)));
    let mut leftover = total - floors.iter().sum::<u128>();
    for &i in &order {
        if leftover == 0 {
            break;
        }
        floors[i] += 1;
        leftover -= 1;
    }
    debug_assert_eq!(leftover, 0);
    Ok(RevenueSplit { cp: floors[0] as Amount, pca: floors[1] as Amount, rs: floors[2] as Amount })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub at: Timestamp,
    pub amount: Amount,
    pub phase: ChargePhase,
    pub group: GroupId,
}

impl Canonical for LedgerEntry {
    fn write(&self, w: &mut Writer) {
        w.u64(self.at).i64(self.amount);
        self.phase.write(w);
        w.u32(self.group);
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(LedgerEntry { at: r.u64()?, amount: r.i64()?, phase: ChargePhase::read(r)?, group: r.u32()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Account {
    pub account_id: String,
    pub initial_balance: Amount,
    pub balance: Amount,
    /// The balance may not be pushed below `-credit_limit` by a charge.
    pub credit_limit: Amount,
    pub history: Vec<LedgerEntry>,
}

impl Account {
    /// Balance recomputed from the opening balance and the history.
    pub fn replayed_balance(&self) -> Amount {
        self.history.iter().fold(self.initial_balance, |b, e| b - e.amount)
    }
}

impl Canonical for Account {
    fn write(&self, w: &mut Writer) {
        w.str(&self.account_id).i64(self.initial_balance).i64(self.balance).i64(self.credit_limit);
        w.seq(&self.history, |w, e| e.write(w));
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(Account {
            account_id: r.str()?,
            initial_balance: r.i64()?,
            balance: r.i64()?,
            credit_limit: r.i64()?,
            history: r.seq(LedgerEntry::read)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChargeReceipt {
    pub receipt_id: u64,
    pub account_id: String,
    pub amount: Amount,
    pub balance_after: Amount,
    pub phase: ChargePhase,
    pub group: GroupId,
    pub split: Option<RevenueSplit>,
}

impl Canonical for ChargeReceipt {
    fn write(&self, w: &mut Writer) {
        w.u64(self.receipt_id).str(&self.account_id).i64(self.amount).i64(self.balance_after);
        self.phase.write(w);
        w.u32(self.group);
        w.option(self.split.as_ref(), |w, s| {
            w.i64(s.cp).i64(s.pca).i64(s.rs);
        });
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        Ok(ChargeReceipt {
            receipt_id: r.u64()?,
            account_id: r.str()?,
            amount: r.i64()?,
            balance_after: r.i64()?,
            phase: ChargePhase::read(r)?,
            group: r.u32()?,
            split: r.option(|r| Ok(RevenueSplit { cp: r.i64()?, pca: r.i64()?, rs: r.i64()? }))?,
        })
    }
}

/// Accumulated revenue per party and incentives paid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RevenueTotals {
    pub cp: Amount,
    pub pca: Amount,
    pub rs: Amount,
    pub incentives_paid: Amount,
}

enum LedgerRecord {
    Open { account_id: String, initial_balance: Amount, credit_limit: Amount },
    Charge { account_id: String, entry: LedgerEntry },
}

impl Canonical for LedgerRecord {
    fn write(&self, w: &mut Writer) {
        match self {
            LedgerRecord::Open { account_id, initial_balance, credit_limit } => {
                w.u8(0).str(account_id).i64(*initial_balance).i64(*credit_limit);
            }
            LedgerRecord::Charge { account_id, entry } => {
                w.u8(1).str(account_id);
                entry.write(w);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> DecodeResult<Self> {
        match r.u8()? {
            0 => Ok(LedgerRecord::Open { account_id: r.str()?, initial_balance: r.i64()?, credit_limit: r.i64()? }),
            1 => Ok(LedgerRecord::Charge { account_id: r.str()?, entry: LedgerEntry::read(r)? }),
            tag => Err(DecodeError::InvalidTag { what: "ledger record", tag }),
        }
    }
}

pub struct ChargingProvider {
    policy: RwLock<PricingPolicy>,
    shares: RevenueShares,
    accounts: RwLock<BTreeMap<String, Arc<Mutex<Account>>>>,
    totals: Mutex<RevenueTotals>,
    next_receipt: AtomicU64,
    clock: SimClock,
    journal: Option<Journal>,
}

impl fmt::Debug for ChargingProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChargingProvider").field("policy", &self.policy.read().kind()).finish_non_exhaustive()
    }
}

impl ChargingProvider {
    pub fn new(policy: PricingPolicy, shares: RevenueShares, clock: SimClock) -> Result<Self, CpError> {
        policy.validate()?;
        Ok(Self {
            policy: RwLock::new(policy),
            shares,
            accounts: RwLock::new(BTreeMap::new()),
            totals: Mutex::new(RevenueTotals::default()),
            next_receipt: AtomicU64::new(1),
            clock,
            journal: None,
        })
    }

    /// Like [`ChargingProvider::new`], replaying and then appending to the
    /// ledger file at `path`.
    pub fn open(
        policy: PricingPolicy,
        shares: RevenueShares,
        clock: SimClock,
        path: impl AsRef<Path>,
    ) -> Result<Self, CpError> {
        let path = path.as_ref();
        let mut cp = Self::new(policy, shares, clock)?;
        for (idx, bytes) in journal::read_records(path)?.iter().enumerate() {
            let record = LedgerRecord::decode(bytes).map_err(|e| JournalError::decode(path, idx + 1, e))?;
            match record {
                LedgerRecord::Open { account_id, initial_balance, credit_limit } => {
                    cp.insert_account(account_id, initial_balance, credit_limit)?;
                }
                LedgerRecord::Charge { account_id, entry } => {
                    let acct = cp.account_handle(&account_id)?;
                    let mut acct = acct.lock();
                    cp.apply(&mut acct, entry);
                }
            }
        }
        cp.journal = Some(Journal::open(path)?);
        Ok(cp)
    }

    pub fn shares(&self) -> RevenueShares {
        self.shares
    }

    pub fn policy(&self) -> PricingPolicy {
        self.policy.read().clone()
    }

    pub fn set_policy(&self, policy: PricingPolicy) -> Result<(), CpError> {
        policy.validate()?;
        *self.policy.write() = policy;
        Ok(())
    }

    fn insert_account(&self, account_id: String, initial_balance: Amount, credit_limit: Amount) -> Result<(), CpError> {
        if credit_limit < 0 {
            return Err(CpError::InvalidArgument("credit limit must be non-negative"));
        }
        let mut accounts = self.accounts.write();
        if accounts.contains_key(&account_id) {
            return Err(CpError::DuplicateAccount(account_id));
        }
        let account = Account {
            account_id: account_id.clone(),
            initial_balance,
            balance: initial_balance,
            credit_limit,
            history: Vec::new(),
        };
        accounts.insert(account_id, Arc::new(Mutex::new(account)));
        Ok(())
    }

    pub fn open_account(&self, account_id: &str, initial_balance: Amount, credit_limit: Amount) -> Result<(), CpError> {
        self.insert_account(account_id.to_string(), initial_balance, credit_limit)?;
        if let Some(j) = &self.journal {
            j.append(
                &LedgerRecord::Open { account_id: account_id.to_string(), initial_balance, credit_limit }.encode(),
            )?;
        }
        Ok(())
    }

    fn account_handle(&self, account_id: &str) -> Result<Arc<Mutex<Account>>, CpError> {
        self.accounts.read().get(account_id).cloned().ok_or_else(|| CpError::UnknownAccount(account_id.to_string()))
    }

    pub fn account(&self, account_id: &str) -> Result<Account, CpError> {
        Ok(self.account_handle(account_id)?.lock().clone())
    }

    pub fn balance(&self, account_id: &str) -> Result<Amount, CpError> {
        Ok(self.account_handle(account_id)?.lock().balance)
    }

    pub fn balances(&self) -> BTreeMap<String, Amount> {
        self.accounts.read().iter().map(|(k, v)| (k.clone(), v.lock().balance)).collect()
    }

    pub fn totals(&self) -> RevenueTotals {
        *self.totals.lock()
    }

    fn check_limit(acct: &Account, amount: Amount) -> Result<Amount, CpError> {
        let after = acct.balance.checked_sub(amount).ok_or(CpError::Overflow)?;
        if amount > 0 && after < -acct.credit_limit {
            return Err(CpError::Declined { amount, balance: acct.balance, credit_limit: acct.credit_limit });
        }
        Ok(after)
    }

    /// Applies an already-approved entry and returns the revenue split.
    fn apply(&self, acct: &mut Account, entry: LedgerEntry) -> Option<RevenueSplit> {
        acct.balance -= entry.amount;
        let mut totals = self.totals.lock();
        let split = if entry.amount >= 0 {
            let split = split_revenue(entry.amount, &self.shares).expect("non-negative amount");
            totals.cp += split.cp;
            totals.pca += split.pca;
            totals.rs += split.rs;
            Some(split)
        } else {
            totals.incentives_paid -= entry.amount;
            None
        };
        acct.history.push(entry);
        split
    }

    fn commit(&self, acct: &mut Account, amount: Amount, group: GroupId, phase: ChargePhase) -> Result<ChargeReceipt, CpError> {
        let balance_after = Self::check_limit(acct, amount)?;
        let entry = LedgerEntry { at: self.clock.now(), amount, phase, group };
        if let Some(j) = &self.journal {
            j.append(&LedgerRecord::Charge { account_id: acct.account_id.clone(), entry: entry.clone() }.encode())?;
        }
        let split = self.apply(acct, entry);
        Ok(ChargeReceipt {
            receipt_id: self.next_receipt.fetch_add(1, Ordering::SeqCst),
            account_id: acct.account_id.clone(),
            amount,
            balance_after,
            phase,
            group,
            split,
        })
    }

    /// Charges a given amount. Charges that would push the balance below the
    /// credit limit are declined and leave the account untouched.
    pub fn charge(&self, account_id: &str, amount: Amount, group: GroupId, phase: ChargePhase) -> Result<ChargeReceipt, CpError> {
        let acct = self.account_handle(account_id)?;
        let mut acct = acct.lock();
        self.commit(&mut acct, amount, group, phase)
    }

    fn quote_locked(&self, acct: &Account, group: GroupId) -> Result<Amount, CpError> {
        let times: Vec<Timestamp> = acct.history.iter().map(|e| e.at).collect();
        let ctx = PriceContext { prior_count: acct.history.len() as u64, prior_charges: &times, now: self.clock.now() };
        self.policy.read().price_in(group, &ctx)
    }

    pub fn quote(&self, account_id: &str, group: GroupId) -> Result<Amount, CpError> {
        let acct = self.account_handle(account_id)?;
        let acct = acct.lock();
        self.quote_locked(&acct, group)
    }

    /// Whether the next ticket of `group` would currently be accepted.
    pub fn authorize(&self, account_id: &str, group: GroupId) -> Result<bool, CpError> {
        let acct = self.account_handle(account_id)?;
        let acct = acct.lock();
        let price = self.quote_locked(&acct, group)?;
        match Self::check_limit(&acct, price) {
            Ok(_) => Ok(true),
            Err(CpError::Declined { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Prices the next ticket from the policy and the account's history and
    /// charges it, atomically with respect to other charges on the account.
    pub fn charge_ticket(&self, account_id: &str, group: GroupId, phase: ChargePhase) -> Result<ChargeReceipt, CpError> {
        let acct = self.account_handle(account_id)?;
        let mut acct = acct.lock();
        let price = self.quote_locked(&acct, group)?;
        self.commit(&mut acct, price, group, phase)
    }

    /// Canonical encoding of the complete CP state.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("cp-state/v1");
        self.policy.read().write(&mut w);
        self.shares.write(&mut w);
        let accounts: Vec<Account> = self.accounts.read().values().map(|a| a.lock().clone()).collect();
        w.seq(&accounts, |w, a| a.write(w));
        let t = self.totals();
        w.i64(t.cp).i64(t.pca).i64(t.rs).i64(t.incentives_paid);
        w.into_bytes()
    }
}
