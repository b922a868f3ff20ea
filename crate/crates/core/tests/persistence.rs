mod common;

use std::path::Path;
use std::sync::Arc;

use pseudorate_core::agent::{AgentError, TrustedAgent};
use pseudorate_core::clock::SimClock;
use pseudorate_core::cp::{ChargingProvider, PricingPolicy, RevenueShares};
use pseudorate_core::pca::{ChargingPhases, GroupSpec, GroupTable, PcaConfig, PrivacyCa};
use pseudorate_core::rs::{read_rating_log, ReputationSystem, RsConfig, RsGroup};
use pseudorate_core::wire::{Client, InProcess, Router, Services};
use pseudorate_core::{ExactScore, Impact, Share};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use common::{seed32, AUTHORITY};

fn services(dir: &Path, fresh: bool) -> Services {
    let clock = SimClock::new(5_000);
    let shares = RevenueShares::new(Share::new(1, 2), Share::new(1, 4), Share::new(1, 4)).unwrap();
    let policy = PricingPolicy::Increasing { base: [(1, 40), (2, 80)].into(), step: 5 };
    let cp = Arc::new(ChargingProvider::open(policy, shares, clock.clone(), dir.join("ledger.log")).unwrap());
    if fresh {
        cp.open_account("user", 1_000, 0).unwrap();
    }
    let specs = [1, 2]
        .map(|i| GroupSpec { price_class: format!("c{i}"), impact: Impact::from_integer(i), rs_id: "rs".into() })
        .to_vec();
    let groups = GroupTable::generate(specs, &mut ChaCha20Rng::from_seed(seed32(1))).unwrap();
    let config = PcaConfig { authority_token: AUTHORITY.into(), charging: ChargingPhases::ACQUISITION, ..PcaConfig::default() };
    let pca = Arc::new(PrivacyCa::open(config, groups, cp.clone(), clock.clone(), seed32(2), dir.join("pca.log")).unwrap());
    let rs = ReputationSystem::open(RsConfig::new("rs"), clock.clone(), dir.join("rs")).unwrap();
    let registry = pca.groups().iter().map(|(g, e)| (g, RsGroup { key: e.public(), impact: e.impact })).collect();
    rs.configure_groups(registry).unwrap();
    Services { pca, rs: Arc::new(rs), cp, clock }
}

fn client(svc: &Services) -> Client {
    Client::new(Arc::new(InProcess::new(Arc::new(Router::new(svc.clone(), "admin")))), "user")
}

#[test]
fn services_recover_their_state_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let svc = services(dir.path(), true);
    let mut agent = TrustedAgent::new("user", seed32(3), client(&svc));
    agent.register("user").unwrap();
    let first = agent.acquire_ticket(1).unwrap();
    agent.acquire_ticket(2).unwrap();
    let payload = agent.payload_for(first, "shop", 5, None).unwrap();
    let submission = agent.prepare_submission(first, &payload).unwrap();
    agent.submit(first, &submission).unwrap();
    let balance = svc.cp.balance("user").unwrap();
    assert_eq!(balance, 1_000 - 40 - 85);
    let snapshot_rs = svc.rs.snapshot_bytes();
    let snapshot_cp = svc.cp.snapshot_bytes();
    drop(svc);

    let svc = services(dir.path(), false);
    assert_eq!(svc.rs.snapshot_bytes(), snapshot_rs);
    assert_eq!(svc.cp.snapshot_bytes(), snapshot_cp);
    assert_eq!(svc.cp.balance("user").unwrap(), balance);
    assert_eq!(svc.cp.quote("user", 1).unwrap(), 40 + 2 * 5);

    // the spent registry survived, so the replay is caught
    assert_eq!(svc.rs.submit_encoded(&submission.payload, &submission.chain).unwrap_err().code(), "double-spend");
    // the PCA still knows who holds both tickets
    for t in agent.tickets() {
        let record = svc.pca.resolve_identity(&t.aik_digest(), AUTHORITY).unwrap();
        assert_eq!(Some(record.platform_id), agent.platform_id());
    }

    let mut agent = TrustedAgent::new("user", seed32(3), client(&svc));
    assert!(agent.register("user").is_ok(), "re-registering a known EK is idempotent");
    assert!(matches!(agent.redeem_ticket(0, "shop", 1, None), Err(AgentError::NoSuchTicket(0))));

    let log = read_rating_log(dir.path().join("rs").join("ratings.log")).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(svc.rs.aggregate("shop"), Some(ExactScore::from_integer(5.into())));
}
