//! Trusted agent: the user-side driver that owns a TPM, acquires group
//! tickets from the privacy CA and redeems them as signed ratings.

use std::collections::BTreeMap;
use std::fmt;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{labels, Credential, CredentialChain, Digest, GroupId, PublicKey};
use crate::pca::{ChallengeResponse, CredentialRequest, PlatformId};
use crate::rs::{Ack, RatingPayload};
use crate::tpm::{Handle, TpmError, TpmInstance};
use crate::wire::{Client, ClientError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("tpm: {0}")]
    Tpm(#[from] TpmError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("credential request denied: {0}")]
    Denied(String),
    #[error("rating rejected: {code} ({detail})")]
    Rejected { code: String, detail: String },
    #[error("platform not registered")]
    NotRegistered,
    #[error("no ticket {0}")]
    NoSuchTicket(usize),
    #[error("ticket {0} already spent")]
    TicketSpent(usize),
    #[error("issued credential does not match the requested identity")]
    BadCredential,
}

impl AgentError {
    pub fn code(&self) -> String {
        match self {
            AgentError::Tpm(e) => format!("tpm-{}", e.code()),
            AgentError::Client(e) => e.code().to_string(),
            AgentError::Denied(code) => format!("denied-{code}"),
            AgentError::Rejected { code, .. } => code.clone(),
            AgentError::NotRegistered => "not-registered".into(),
            AgentError::NoSuchTicket(_) => "no-such-ticket".into(),
            AgentError::TicketSpent(_) => "ticket-spent".into(),
            AgentError::BadCredential => "bad-credential".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TicketState {
    Fresh,
    Spent,
}

/// `(AIK, Cert(AIK, g))` held by the agent; the AIK private half never
/// leaves the TPM.
#[derive(Debug, Clone)]
pub struct Ticket {
    pub aik_handle: Handle,
    pub aik_public: PublicKey,
    pub credential: Credential,
    pub group: GroupId,
    pub state: TicketState,
}

impl Ticket {
    pub fn aik_digest(&self) -> Digest {
        self.aik_public.key_id()
    }

    pub fn rs_id(&self) -> Option<&str> {
        self.credential.meta.get(labels::RS).map(String::as_str)
    }
}

/// A signed rating ready to send; exposed so callers can replay or tamper.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submission {
    pub payload: Vec<u8>,
    pub chain: CredentialChain,
}

pub struct TrustedAgent {
    name: String,
    tpm: TpmInstance,
    client: Client,
    platform_id: Option<PlatformId>,
    wallet: Vec<Ticket>,
    rng: ChaCha20Rng,
}

impl fmt::Debug for TrustedAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustedAgent").field("name", &self.name).field("tickets", &self.wallet.len()).finish_non_exhaustive()
    }
}

impl TrustedAgent {
    pub fn new(name: impl Into<String>, seed: [u8; 32], client: Client) -> Self {
        let mut rng = ChaCha20Rng::from_seed(seed);
        let mut tpm_seed = [0u8; 32];
        rng.fill_bytes(&mut tpm_seed);
        Self {
            name: name.into(),
            tpm: TpmInstance::new(Some(tpm_seed), BTreeMap::new()),
            client,
            platform_id: None,
            wallet: Vec::new(),
            rng,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tpm(&self) -> &TpmInstance {
        &self.tpm
    }

    pub fn platform_id(&self) -> Option<PlatformId> {
        self.platform_id
    }

    pub fn tickets(&self) -> &[Ticket] {
        &self.wallet
    }

    pub fn fresh_tickets(&self) -> impl Iterator<Item = (usize, &Ticket)> {
        self.wallet.iter().enumerate().filter(|(_, t)| t.state == TicketState::Fresh)
    }

    /// Registers the EK with the privacy CA under the user's CP account.
    /// Safe to retry: an EK the PCA already knows counts as registered.
    pub fn register(&mut self, account: &str) -> Result<PlatformId, AgentError> {
        let id = match self.client.register(self.tpm.ek_public(), account) {
            Ok(id) => id,
            Err(ClientError::Service { code, .. }) if code == "duplicate-ek" => PlatformId::of(&self.tpm.ek_public()),
            Err(e) => return Err(e.into()),
        };
        self.platform_id = Some(id);
        Ok(id)
    }

    /// Runs the full issuance handshake for group `g`. The wallet changes
    /// only on success; on any failure the fresh AIK is flushed.
    pub fn acquire_ticket(&mut self, group: GroupId) -> Result<usize, AgentError> {
        let platform_id = self.platform_id.ok_or(AgentError::NotRegistered)?;
        let (aik, aik_public) = self.tpm.make_identity()?;
        match self.handshake(platform_id, group, aik, aik_public) {
            Ok(credential) => {
                self.wallet.push(Ticket { aik_handle: aik, aik_public, credential, group, state: TicketState::Fresh });
                Ok(self.wallet.len() - 1)
            }
            Err(e) => {
                let _ = self.tpm.flush_key(aik);
                Err(e)
            }
        }
    }

    fn handshake(&self, platform_id: PlatformId, group: GroupId, aik: Handle, aik_public: PublicKey) -> Result<Credential, AgentError> {
        let req = CredentialRequest { aik_public, group, platform_id, supplementary: BTreeMap::new() };
        let challenge = self.client.request_credential(req)?.map_err(AgentError::Denied)?;
        let (challenge_id, signature) = self.tpm.respond_to_challenge(aik, &challenge.sealed)?;
        let blob = self.client.complete(ChallengeResponse { challenge_id, signature })?;
        let credential = self.tpm.activate_identity(aik, &blob)?;
        if credential.entity_key() != Some(aik_public) {
            return Err(AgentError::BadCredential);
        }
        Ok(credential)
    }

    /// Builds a fresh nonce'd payload for the ticket's reputation system.
    pub fn payload_for(&mut self, idx: usize, subject: &str, score: i32, comment: Option<String>) -> Result<RatingPayload, AgentError> {
        let ticket = self.wallet.get(idx).ok_or(AgentError::NoSuchTicket(idx))?;
        let rs_id = ticket.rs_id().unwrap_or_default().to_string();
        let mut nonce = vec![0u8; 16];
        self.rng.fill_bytes(&mut nonce);
        Ok(RatingPayload { subject: subject.into(), score, comment, nonce, rs_id })
    }

    /// Signs `payload` with a new CSK certified by the ticket's AIK. The
    /// ticket's state is left alone.
    pub fn prepare_submission(&mut self, idx: usize, payload: &RatingPayload) -> Result<Submission, AgentError> {
        let ticket = self.wallet.get(idx).ok_or(AgentError::NoSuchTicket(idx))?.clone();
        let wrapped = self.tpm.cmk_create_key()?;
        let csk = self.tpm.load_key(&wrapped)?;
        let result = (|| {
            let csk_cred = self.tpm.certify_key(ticket.aik_handle, csk)?;
            let bytes = crate::codec::Canonical::encode(payload);
            let meta = BTreeMap::new();
            let signature = self.tpm.sign_with_key(csk, &Credential::signed_bytes(&bytes, &meta))?;
            let rating_cred = Credential { entity: bytes.clone(), issuer_public: wrapped.public.as_bytes().to_vec(), signature, meta };
            Ok(Submission { payload: bytes, chain: CredentialChain { rating_cred, csk_cred, aik_cred: ticket.credential.clone() } })
        })();
        let _ = self.tpm.flush_key(csk);
        result
    }

    /// Sends a prepared submission and updates the ticket from the answer.
    pub fn submit(&mut self, idx: usize, submission: &Submission) -> Result<Ack, AgentError> {
        if idx >= self.wallet.len() {
            return Err(AgentError::NoSuchTicket(idx));
        }
        match self.client.submit(submission.payload.clone(), submission.chain.clone())? {
            Ok(ack) => {
                self.wallet[idx].state = TicketState::Spent;
                Ok(ack)
            }
            Err((code, detail)) => {
                if code == "double-spend" {
                    self.wallet[idx].state = TicketState::Spent;
                }
                Err(AgentError::Rejected { code, detail })
            }
        }
    }

    /// Rates `subject` with ticket `idx`.
    pub fn redeem_ticket(&mut self, idx: usize, subject: &str, score: i32, comment: Option<String>) -> Result<Ack, AgentError> {
        let ticket = self.wallet.get(idx).ok_or(AgentError::NoSuchTicket(idx))?;
        if ticket.state == TicketState::Spent {
            return Err(AgentError::TicketSpent(idx));
        }
        let payload = self.payload_for(idx, subject, score, comment)?;
        let submission = self.prepare_submission(idx, &payload)?;
        self.submit(idx, &submission)
    }

    /// Asks the TPM to sign arbitrary bytes with the ticket's AIK. The TPM
    /// refuses; kept to exercise that refusal.
    pub fn sign_payload_with_aik(&self, idx: usize, payload: &[u8]) -> Result<Vec<u8>, AgentError> {
        let ticket = self.wallet.get(idx).ok_or(AgentError::NoSuchTicket(idx))?;
        Ok(self.tpm.sign_with_key(ticket.aik_handle, payload)?)
    }

    pub fn client(&self) -> &Client {
        &self.client
    }
}
