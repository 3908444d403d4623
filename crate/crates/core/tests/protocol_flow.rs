use openexposure::anchor::SimChain;
use openexposure::blindsig::{fdh, InstituteKeyPair, Miid};
use openexposure::keys::{IntervalNumber, TemporaryExposureKey};
use openexposure::protocol::{
    verify_publication, EndorsedReport, EpochPublication, InstituteError, LedgerServer, LedgerTiming, MedicalInstitute,
    Phone, PhoneConfig, ProtocolError, PublicationRejection, ReportRejection,
};
use openexposure::registry::Registry;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const DAY0: u32 = 2_682_432;

fn at(offset: u32) -> IntervalNumber {
    IntervalNumber::new(DAY0 + offset)
}

struct World {
    lab: MedicalInstitute,
    registry: Registry,
    ledger: LedgerServer,
    chain: SimChain,
    timing: LedgerTiming,
}

fn world() -> World {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let key = InstituteKeyPair::generate(&mut rng, 1024, Miid::new("LAB-1").unwrap()).unwrap();
    let mut registry = Registry::new();
    registry.register(key.public_key().miid(), &key.public_key().to_bytes(), at(0)).unwrap();
    World {
        lab: MedicalInstitute::new(key, 144, [1; 32]),
        registry,
        ledger: LedgerServer::new([2; 32]),
        chain: SimChain::new(),
        timing: LedgerTiming { genesis: at(0), epoch_length: 144, blocks_per_interval: 1 },
    }
}

fn meet(a: &mut Phone, b: &mut Phone, now: IntervalNumber) {
    let pa = a.broadcast(now).unwrap();
    let pb = b.broadcast(now).unwrap();
    a.receive(&pb, now);
    b.receive(&pa, now);
}

#[test]
fn report_publish_and_match() {
    let mut w = world();
    let mut alice = Phone::new(0, PhoneConfig::default(), [10; 32]);
    let mut bob = Phone::new(1, PhoneConfig::default(), [11; 32]);
    let mut carol = Phone::new(2, PhoneConfig::default(), [12; 32]);
    for phone in [&mut alice, &mut bob, &mut carol] {
        phone.tick(at(0));
    }
    meet(&mut alice, &mut bob, at(10));
    meet(&mut alice, &mut bob, at(11));

    w.lab.record_positive(0);
    let token = w.lab.issue_test_token(0, at(50)).unwrap();
    let reports = alice.request_endorsements(&mut w.lab, &w.registry, &token, at(50)).unwrap();
    assert_eq!(reports.len(), 1);
    let outcomes = alice.submit_report(&mut w.ledger, &w.registry, &reports, at(50));
    assert!(outcomes.iter().all(Result::is_ok));
    assert_eq!(alice.consent_log().len(), 1);

    w.chain.advance_block(143).unwrap();
    let done = w.ledger.finalize_and_anchor(0, &mut w.chain).unwrap().expect("one report");
    assert!(!done.receipt.already_stored);
    let publications = vec![done.publication];

    let got = bob.download_and_match(&publications, &w.chain, &w.timing, at(144));
    assert_eq!(got.notifications.len(), 1);
    assert_eq!(got.notifications[0].matched_intervals, vec![at(10), at(11)]);
    assert_eq!(got.notifications[0].miid, w.lab.miid());
    assert!(carol.download_and_match(&publications, &w.chain, &w.timing, at(144)).notifications.is_empty());

    // Already seen epochs are skipped on the next download.
    assert!(bob.download_and_match(&publications, &w.chain, &w.timing, at(150)).checked.is_empty());
}

#[test]
fn threshold_requires_enough_intervals() {
    let mut w = world();
    let config = PhoneConfig { match_threshold: 3, ..PhoneConfig::default() };
    let mut alice = Phone::new(0, PhoneConfig::default(), [20; 32]);
    let mut bob = Phone::new(1, config, [21; 32]);
    alice.tick(at(0));
    bob.tick(at(0));
    meet(&mut alice, &mut bob, at(5));
    meet(&mut alice, &mut bob, at(6));
    w.lab.record_positive(0);
    let token = w.lab.issue_test_token(0, at(20)).unwrap();
    let reports = alice.request_endorsements(&mut w.lab, &w.registry, &token, at(20)).unwrap();
    alice.submit_report(&mut w.ledger, &w.registry, &reports, at(20));
    let done = w.ledger.finalize_and_anchor(0, &mut w.chain).unwrap().unwrap();
    let got = bob.download_and_match(&[done.publication], &w.chain, &w.timing, at(144));
    assert!(got.notifications.is_empty());
}

#[test]
fn institute_never_sees_the_keys() {
    let mut w = world();
    let mut alice = Phone::new(0, PhoneConfig::default(), [30; 32]);
    for day in 0..3 {
        alice.tick(at(day * 144));
    }
    w.lab.record_positive(0);
    let token = w.lab.issue_test_token(0, at(300)).unwrap();
    let reports = alice.request_endorsements(&mut w.lab, &w.registry, &token, at(300)).unwrap();
    assert_eq!(reports.len(), 3);

    let transcript = serde_json::to_string(w.lab.transcript()).unwrap();
    let n = w.lab.public_key().modulus().clone();
    for report in &reports {
        assert!(!transcript.contains(&hex::encode(report.tek)));
        let encoded = fdh(&report.signed_message(), &n).unwrap();
        assert!(!transcript.contains(&hex::encode(encoded.to_bytes_be())));
        assert!(!transcript.contains(&hex::encode(&report.signature)));
    }
}

#[test]
fn tokens_are_single_use_and_expire() {
    let mut w = world();
    let mut alice = Phone::new(0, PhoneConfig::default(), [40; 32]);
    alice.tick(at(0));
    assert_eq!(w.lab.issue_test_token(0, at(1)), Err(InstituteError::NoPositiveResult(0)));
    w.lab.record_positive(0);

    let token = w.lab.issue_test_token(0, at(1)).unwrap();
    alice.request_endorsements(&mut w.lab, &w.registry, &token, at(2)).unwrap();
    let again = alice.request_endorsements(&mut w.lab, &w.registry, &token, at(3));
    assert!(matches!(again, Err(ProtocolError::Institute(InstituteError::TokenReused(_)))));

    let late = w.lab.issue_test_token(0, at(4)).unwrap();
    let expired = alice.request_endorsements(&mut w.lab, &w.registry, &late, at(4 + 144));
    assert!(matches!(expired, Err(ProtocolError::Institute(InstituteError::TokenExpired { .. }))));
}

#[test]
fn ledger_rejects_duplicates_forgeries_and_strangers() {
    let mut w = world();
    let mut alice = Phone::new(0, PhoneConfig::default(), [50; 32]);
    alice.tick(at(0));
    w.lab.record_positive(0);
    let token = w.lab.issue_test_token(0, at(1)).unwrap();
    let reports = alice.request_endorsements(&mut w.lab, &w.registry, &token, at(1)).unwrap();
    assert_eq!(w.ledger.accept_report(&w.registry, &reports[0]), Ok(()));
    assert_eq!(w.ledger.accept_report(&w.registry, &reports[0]), Err(ReportRejection::Duplicate));

    let mut forged = reports[0].clone();
    forged.tek[0] ^= 1;
    assert_eq!(w.ledger.accept_report(&w.registry, &forged), Err(ReportRejection::BadSignature));

    let mut stranger = reports[0].clone();
    stranger.tek[1] ^= 1;
    stranger.miid = Miid::new("NOBODY").unwrap();
    assert!(matches!(w.ledger.accept_report(&w.registry, &stranger), Err(ReportRejection::UnknownInstitute(_))));

    let stats = w.ledger.stats();
    assert_eq!((stats.accepted, stats.rejected_duplicate, stats.rejected_signature, stats.rejected_unknown), (1, 1, 1, 1));
}

#[test]
fn tampered_or_unanchored_publications_are_rejected() {
    let mut w = world();
    let mut alice = Phone::new(0, PhoneConfig::default(), [60; 32]);
    alice.tick(at(0));
    w.lab.record_positive(0);
    let token = w.lab.issue_test_token(0, at(1)).unwrap();
    let reports = alice.request_endorsements(&mut w.lab, &w.registry, &token, at(1)).unwrap();
    alice.submit_report(&mut w.ledger, &w.registry, &reports, at(1));
    w.chain.advance_block(100).unwrap();
    let publication = w.ledger.finalize_and_anchor(0, &mut w.chain).unwrap().unwrap().publication;
    assert!(verify_publication(&publication, &w.chain, &w.timing).is_ok());

    let mut tampered = publication.clone();
    tampered.reports[0].base_interval = at(144);
    assert!(matches!(
        verify_publication(&tampered, &w.chain, &w.timing),
        Err(PublicationRejection::RootMismatch { .. })
    ));

    let fresh_chain = SimChain::new();
    assert!(matches!(verify_publication(&publication, &fresh_chain, &w.timing), Err(PublicationRejection::NotAnchored(_))));

    let mut moved = publication.clone();
    moved.anchor_block += 1;
    assert!(matches!(
        verify_publication(&moved, &w.chain, &w.timing),
        Err(PublicationRejection::AnchorBlockMismatch { .. })
    ));

    // A valid epoch 0 root claimed as epoch 5 is far outside its block window.
    let mut relabelled = publication;
    relabelled.epoch_id = 5;
    assert!(matches!(
        verify_publication(&relabelled, &w.chain, &w.timing),
        Err(PublicationRejection::Implausible { .. })
    ));
}

fn arb_report() -> impl Strategy<Value = EndorsedReport> {
    (any::<[u8; 16]>(), 0u32..1_000_000, "[A-Z]{1,8}", proptest::collection::vec(any::<u8>(), 0..300)).prop_map(
        |(tek, day, miid, sig)| {
            let tek = TemporaryExposureKey::from_published(tek, IntervalNumber::new(day * 144)).unwrap();
            EndorsedReport::new(&tek, Miid::new(&miid).unwrap(), sig)
        },
    )
}

proptest! {
    #[test]
    fn report_encoding_round_trips(report in arb_report()) {
        let bytes = report.encode();
        prop_assert_eq!(bytes.len(), report.encoded_len());
        prop_assert_eq!(EndorsedReport::decode(&bytes).unwrap(), report.clone());
        for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(EndorsedReport::decode(&bytes[..cut]).is_err());
        }
        let mut extended = bytes.clone();
        extended.push(0);
        prop_assert!(EndorsedReport::decode(&extended).is_err());
    }

    #[test]
    fn publication_encoding_round_trips(
        reports in proptest::collection::vec(arb_report(), 0..12),
        epoch_id in any::<u32>(),
        anchor_block in any::<u64>(),
    ) {
        let mut publication = EpochPublication { epoch_id, root: Default::default(), anchor_block, reports };
        if !publication.reports.is_empty() {
            publication.root = publication.recompute_root().unwrap().0;
        }
        let bytes = publication.encode();
        prop_assert_eq!(EpochPublication::decode(&bytes).unwrap(), publication);
    }
}
