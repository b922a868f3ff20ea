mod common;

use std::sync::Arc;

use proptest::prelude::*;
use pseudorate_core::agent::{AgentError, TrustedAgent};
use pseudorate_core::codec::Canonical;
use pseudorate_core::pca::PlatformId;
use pseudorate_core::scenario::{run_scenario, RunOptions, Scenario, Step, TamperField, TransportKind};
use pseudorate_core::wire::{
    Client, ClientError, Endpoint, Fault, FaultyTransport, InProcess, ProtocolMessage, Request, Response, PROTOCOL_VERSION,
};

use common::*;

fn retry<T>(mut op: impl FnMut() -> Result<T, AgentError>) -> Result<T, AgentError> {
    for _ in 0..3 {
        match op() {
            Err(AgentError::Client(ClientError::Transport(_))) => continue,
            other => return other,
        }
    }
    panic!("transport kept failing");
}

/// register, request, complete, submit: four request/response pairs.
const FLOW_MESSAGES: usize = 4;

#[test]
fn lost_messages_leave_every_party_consistent() {
    let faults = (0..FLOW_MESSAGES).flat_map(|k| [Fault::DropRequest(k), Fault::DropResponse(k)]);
    for fault in faults {
        let s = scenario(2, 1, "flat");
        let world = world(&s, 3, TransportKind::InProcess);
        let transport = FaultyTransport::new(InProcess::new(world.router.clone()), Some(fault));
        let name = agent_name(0);
        let mut agent = TrustedAgent::new(&name, seed32(9), Client::new(Arc::new(transport), &name));

        retry(|| agent.register(&name)).unwrap();
        let idx = retry(|| agent.acquire_ticket(1)).unwrap();
        let redeemed = retry(|| agent.redeem_ticket(idx, "subject", 4, None));
        match redeemed {
            Ok(_) => {}
            // the first submission landed but its ack was lost
            Err(AgentError::Rejected { code, .. }) => assert_eq!(code, "double-spend", "{fault:?}"),
            Err(e) => panic!("{fault:?}: {e}"),
        }

        let svc = &world.services;
        assert_eq!(agent.tickets().len(), 1, "{fault:?}");
        assert!(agent.tpm().is_activated(agent.tickets()[0].aik_handle).unwrap());
        // EK plus the one live AIK; failed AIKs and every CSK are flushed
        assert_eq!(agent.tpm().key_count(), 2, "{fault:?}");
        assert_eq!(svc.rs.ratings().len(), 1, "{fault:?}");
        assert_eq!(svc.rs.spent_count(), 1, "{fault:?}");

        let account = svc.cp.account(&name).unwrap();
        assert_eq!(account.balance, account.replayed_balance());
        let issued = svc.pca.identity_records()[0].issued.len();
        assert_eq!(account.history.len(), issued, "{fault:?}: one charge per issued credential");
        assert_eq!(svc.pca.charged_total(), account.initial_balance - account.balance);
        let t = svc.cp.totals();
        assert_eq!(t.cp + t.pca + t.rs, svc.pca.charged_total());
    }
}

fn scripted(steps: Vec<Step>) -> Scenario {
    let mut s = scenario(3, 3, "increasing");
    s.seed = 11;
    s.steps = steps;
    s
}

fn acquire(a: usize, group: u32, count: u32) -> Step {
    Step::Acquire { agent: agent_name(a), group, count }
}

fn redeem(a: usize, subject: &str, score: i32) -> Step {
    Step::Redeem { agent: agent_name(a), subject: subject.into(), score, ticket: None, comment: None }
}

fn scripts() -> Vec<Scenario> {
    vec![
        Scenario::demo(42),
        scripted(vec![acquire(0, 1, 2), redeem(0, "x", 5), Step::Replay { agent: agent_name(0) }, redeem(0, "y", 2)]),
        scripted(vec![
            acquire(1, 2, 1),
            Step::Tamper { agent: agent_name(1), subject: "x".into(), score: 1, field: TamperField::GroupMeta, ticket: None },
            Step::AikSign { agent: agent_name(1), ticket: None },
            Step::Resolve { agent: agent_name(1), ticket: None },
            redeem(1, "x", 1),
        ]),
        scripted(vec![
            acquire(2, 3, 1),
            Step::Blacklist { agent: agent_name(2), flag: true },
            acquire(2, 3, 1),
            Step::Advance { ms: 10_000 },
            Step::Settle,
            redeem(2, "z", 3),
        ]),
    ]
}

#[test]
fn transports_yield_identical_transcripts() {
    for s in scripts() {
        let inproc = run_scenario(&s, &RunOptions::default()).unwrap();
        let socket = run_scenario(&s, &RunOptions { transport: TransportKind::Socket, ..RunOptions::default() }).unwrap();
        assert_eq!(inproc.normalized().encode(), socket.normalized().encode());
        assert!(!inproc.messages.is_empty());
    }
}

#[test]
fn scripted_outcomes() {
    let t = run_scenario(&scripts()[2], &RunOptions::default()).unwrap();
    let outcomes: Vec<&str> = t.steps.iter().map(|s| s.outcome.as_str()).collect();
    assert!(outcomes[1].starts_with("reject invalid-chain"), "{outcomes:?}");
    assert_eq!(outcomes[2], "tpm-forbidden-aik-signing");
    assert_eq!(outcomes[3], "ok match");
    assert!(outcomes[4].starts_with("ack"));

    let t = run_scenario(&scripts()[3], &RunOptions::default()).unwrap();
    assert_eq!(t.steps[2].outcome, "denied-blacklisted");
    assert!(t.steps[5].outcome.starts_with("ack"));
}

#[test]
fn recorded_messages_follow_the_schema() {
    let s = scripts().remove(1);
    let cfg = s.validate().unwrap();
    let world = pseudorate_core::scenario::World::build(&s, &cfg, 5, &RunOptions::default()).unwrap();
    world.services.rs.configure_groups(world.rs_registry()).unwrap();
    let mut agents: Vec<TrustedAgent> = (0..3).map(|i| agent(&world, i, 5)).collect();
    for a in &mut agents {
        let idx = a.acquire_ticket(1).unwrap();
        a.redeem_ticket(idx, "subject", 3, Some("fine".into())).unwrap();
    }
    let secrets: Vec<Vec<u8>> = agents
        .iter()
        .flat_map(|a| [a.tpm().ek_public().as_bytes().to_vec(), PlatformId::of(&a.tpm().ek_public()).0.to_vec()])
        .collect();

    let messages = world.router.messages();
    for (i, m) in messages.iter().enumerate() {
        assert_eq!(m.seq, i as u64 + 1);
        let req = ProtocolMessage::decode(&m.request).unwrap();
        let resp = ProtocolMessage::decode(&m.response).unwrap();
        assert_eq!(req.version, PROTOCOL_VERSION);
        assert_eq!(req.correlation_id, resp.correlation_id);
        let ep = Endpoint::parse(&req.endpoint).unwrap();
        Request::decode_body(ep, &req.body).unwrap();
        Response::decode(ep, &resp.body).unwrap();
        if ep == Endpoint::RsSubmit {
            // nothing attestation-specific reaches the RS
            for secret in &secrets {
                assert!(!contains(&m.request, secret));
                assert!(!contains(&m.response, secret));
            }
        }
    }
}

#[test]
fn unknown_version_and_endpoint_are_protocol_errors() {
    let world = world(&scenario(1, 1, "free"), 1, TransportKind::InProcess);
    let mut msg = ProtocolMessage::new(Endpoint::RsScore, b"c".to_vec(), Request::Score { subject: "s".into() }.encode_body());
    msg.version = PROTOCOL_VERSION + 1;
    let resp = ProtocolMessage::decode(&world.router.handle_bytes(&msg.encode())).unwrap();
    match Response::decode(Endpoint::RsScore, &resp.body).unwrap() {
        Response::ProtocolError { code, .. } => assert_eq!(code, "unsupported-version"),
        other => panic!("{other:?}"),
    }
    msg.version = PROTOCOL_VERSION;
    msg.endpoint = "rs/nope".into();
    let resp = ProtocolMessage::decode(&world.router.handle_bytes(&msg.encode())).unwrap();
    assert!(matches!(Response::decode(Endpoint::RsScore, &resp.body).unwrap(), Response::ProtocolError { .. }));
}

#[test]
fn admin_endpoints_need_tokens() {
    let world = world(&scenario(1, 1, "flat"), 1, TransportKind::InProcess);
    let client = world.client("intruder");
    let err = client.admin_groups("guess", world.rs_registry()).unwrap_err();
    assert_eq!(err.code(), "forbidden");
    let err = client.policy("guess", Some(pseudorate_core::cp::PricingPolicy::Free)).unwrap_err();
    assert_eq!(err.code(), "forbidden");
    assert_eq!(client.policy("", None).unwrap().kind(), "flat");
    let a = agent(&world, 0, 1);
    let err = client.blacklist(a.platform_id().unwrap(), true, "guess").unwrap_err();
    assert_eq!(err.code(), "forbidden");
    let err = client.resolve([0; 32], "guess").unwrap_err();
    assert_eq!(err.code(), "forbidden");
    client.policy(ADMIN, Some(pseudorate_core::cp::PricingPolicy::Free)).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_endpoint_survives_fuzz(ep_idx in 0usize..Endpoint::ALL.len(), body in proptest::collection::vec(any::<u8>(), 0..256)) {
        let world = world(&scenario(1, 1, "free"), 1, TransportKind::InProcess);
        let ep = Endpoint::ALL[ep_idx];
        let msg = ProtocolMessage::new(ep, b"fuzz".to_vec(), body.clone());
        let resp = ProtocolMessage::decode(&world.router.handle_bytes(&msg.encode())).unwrap();
        let decoded = Response::decode(ep, &resp.body).unwrap();
        if Request::decode_body(ep, &body).is_err() {
            prop_assert!(matches!(decoded, Response::ProtocolError { .. }), "{ep}: {decoded:?}");
        }
    }

    #[test]
    fn raw_garbage_is_a_protocol_error(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let world = world(&scenario(1, 1, "free"), 1, TransportKind::InProcess);
        let resp = world.router.handle_bytes(&bytes);
        let resp = ProtocolMessage::decode(&resp).unwrap();
        if ProtocolMessage::decode(&bytes).is_err() {
            prop_assert_eq!(resp.body[0], 2);
        }
    }
}
