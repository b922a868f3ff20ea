#![allow(dead_code)]

use pseudorate_core::agent::TrustedAgent;
use pseudorate_core::cp::Amount;
use pseudorate_core::scenario::{
    AgentConfig, GroupConfig, PolicyConfig, RatioText, RunOptions, Scenario, SharesConfig, TransportKind, World,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const AUTHORITY: &str = "authority";
pub const ADMIN: &str = "admin";

/// `groups` groups priced 100 with impact `g`, and `agents` well-funded agents.
pub fn scenario(groups: usize, agents: usize, policy: &str) -> Scenario {
    Scenario {
        seed: 0,
        rs_id: "rs.example".into(),
        authority_token: AUTHORITY.into(),
        admin_token: ADMIN.into(),
        charging: "acquisition".into(),
        scale: (1, 5),
        shares: SharesConfig {
            cp: RatioText::Text("1/5".into()),
            pca: RatioText::Text("2/5".into()),
            rs: RatioText::Text("2/5".into()),
        },
        policy: PolicyConfig { kind: policy.into(), step: 10, incentive: 5 },
        groups: (1..=groups).map(|g| GroupConfig { price: 100, impact: RatioText::Int(g as u64), price_class: None }).collect(),
        agents: (0..agents).map(|i| AgentConfig { name: agent_name(i), balance: 1_000_000, credit_limit: 0 }).collect(),
        steps: Vec::new(),
    }
}

pub fn agent_name(i: usize) -> String {
    format!("agent-{i}")
}

pub fn with_balance(mut s: Scenario, balance: Amount) -> Scenario {
    for a in &mut s.agents {
        a.balance = balance;
    }
    s
}

/// Services for `s` with the RS already holding the PCA's group registry.
pub fn world(s: &Scenario, seed: u64, transport: TransportKind) -> World {
    let cfg = s.validate().expect("valid scenario");
    let opts = RunOptions { seed: Some(seed), transport, data_dir: None };
    let world = World::build(s, &cfg, seed, &opts).expect("services");
    world.services.rs.configure_groups(world.rs_registry()).expect("groups");
    world
}

pub fn seed32(seed: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut out);
    out
}

/// A registered agent for account `agent_name(i)`.
pub fn agent(world: &World, i: usize, seed: u64) -> TrustedAgent {
    let name = agent_name(i);
    let mut a = TrustedAgent::new(&name, seed32(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)), world.client(&name));
    a.register(&name).expect("register");
    a
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}
