//! S3 multipart protocol against the local emulator: client ops, the
//! collective object sync (reshuffle, part planning, fallback), and
//! recovery into an object store.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use stagedio_core::s3::{
    sync_object, CoverageMap, ObjectSyncConfig, ObjectSyncMode, PartPlan, S3Client, S3Emulator,
    S3Locator, MIN_PART_SIZE, MULTIPART_THRESHOLD,
};

const MIB: u64 = 1024 * 1024;

fn client_for(emu: &S3Emulator, key: &str) -> S3Client {
    S3Client::new(S3Locator::parse(&format!("{}/bkt/{key}", emu.endpoint())).unwrap())
}

fn filled(len: usize, tag: u8) -> Vec<u8> {
    (0..len).map(|i| tag.wrapping_add(i as u8)).collect()
}

#[test]
fn put_and_get_round_trip() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/a.bin");
    let body = filled(4096, 3);
    client.put_object(&body).unwrap();
    assert_eq!(client.get_object().unwrap(), body);
    assert_eq!(emu.object("bkt", "obj/a.bin").unwrap(), body);
}

#[test]
fn multipart_happy_path() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/m.bin");
    let id = client.initiate_multipart().unwrap();

    let p1 = filled(5 * MIB as usize, 1);
    let p2 = filled(MIB as usize, 2);
    let e1 = client.upload_part(&id, 1, &p1).unwrap();
    let e2 = client.upload_part(&id, 2, &p2).unwrap();

    let listed = client.list_parts(&id).unwrap();
    assert_eq!(listed.len(), 2);
    assert_eq!(listed[0].part_number, 1);
    assert_eq!(listed[0].size, 5 * MIB);
    assert_eq!(listed[0].etag, e1);

    client.complete_multipart(&id, &[(1, e1), (2, e2)]).unwrap();
    let object = client.get_object().unwrap();
    assert_eq!(object.len() as u64, 6 * MIB);
    assert_eq!(&object[..p1.len()], &p1[..]);
    assert_eq!(&object[p1.len()..], &p2[..]);
    assert!(emu.active_uploads("bkt", "obj/m.bin").is_empty(), "upload consumed");
}

#[test]
fn reuploading_a_part_replaces_it() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/r.bin");
    let id = client.initiate_multipart().unwrap();
    client.upload_part(&id, 1, &filled(6 * MIB as usize, 9)).unwrap();
    let final_bytes = filled(6 * MIB as usize, 4);
    let etag = client.upload_part(&id, 1, &final_bytes).unwrap();
    client.complete_multipart(&id, &[(1, etag)]).unwrap();
    assert_eq!(client.get_object().unwrap(), final_bytes);
}

#[test]
fn initiating_again_supersedes_and_aborts_the_old_session() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/s.bin");
    let first = client.initiate_superseding().unwrap();
    let second = client.initiate_superseding().unwrap();
    assert_ne!(first, second);
    let ids = emu.active_uploads("bkt", "obj/s.bin");
    assert_eq!(ids, vec![second.clone()], "first session aborted explicitly");
    let listed = client.list_uploads().unwrap();
    assert_eq!(listed, vec![("obj/s.bin".to_string(), second)]);
}

#[test]
fn small_non_final_part_is_rejected_by_plan_and_endpoint() {
    // Plan-level: the validator refuses before any request goes out.
    let bad = PartPlan {
        parts: vec![
            stagedio_core::s3::PartSpec { part_number: 1, offset: 0, length: 4 * MIB },
            stagedio_core::s3::PartSpec { part_number: 2, offset: 4 * MIB, length: 5 * MIB },
        ],
    };
    assert!(bad.validate(9 * MIB).is_err());

    // Endpoint-level: completion enforces the floor too.
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/f.bin");
    let id = client.initiate_multipart().unwrap();
    let e1 = client.upload_part(&id, 1, &filled(4 * MIB as usize, 1)).unwrap();
    let e2 = client.upload_part(&id, 2, &filled(MIB as usize, 2)).unwrap();
    let err = client.complete_multipart(&id, &[(1, e1), (2, e2)]).unwrap_err();
    assert!(err.to_string().contains("EntityTooSmall"), "{err}");
    assert!(client.get_object().is_err(), "no partial object may appear");
}

#[test]
fn completion_refused_when_an_etag_is_missing() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/e.bin");
    let id = client.initiate_multipart().unwrap();
    let plan = PartPlan::for_object(MULTIPART_THRESHOLD);
    let mut etags = BTreeMap::new();
    etags.insert(1u32, client.upload_part(&id, 1, &filled(8 * MIB as usize, 1)).unwrap());
    // Part 2 was never uploaded; the leader must refuse locally.
    let err = client.complete_with_plan(&id, &plan, &etags).unwrap_err();
    assert!(err.to_string().contains("no etag"), "{err}");
    assert!(client.get_object().is_err());
    assert_eq!(emu.active_uploads("bkt", "obj/e.bin").len(), 1, "session still open for retry");
}

#[test]
fn bad_etag_fails_completion_atomically() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/b.bin");
    let id = client.initiate_multipart().unwrap();
    client.upload_part(&id, 1, &filled(5 * MIB as usize, 1)).unwrap();
    let err = client.complete_multipart(&id, &[(1, "\"forged\"".into())]).unwrap_err();
    assert!(err.to_string().contains("InvalidPart"), "{err}");
    assert!(client.get_object().is_err());
}

// --- collective object sync ------------------------------------------------

fn coverage_of(runs: &[(u64, Vec<u8>)]) -> CoverageMap {
    let mut cov = CoverageMap::new();
    for (off, data) in runs {
        cov.insert(*off, data);
    }
    cov
}

#[test]
fn solo_multipart_for_large_contiguous_object() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/solo.bin");
    let body = filled((MULTIPART_THRESHOLD + 3 * MIB) as usize, 7);
    let report =
        sync_object(&client, &coverage_of(&[(0, body.clone())]), &ObjectSyncConfig::solo())
            .unwrap();
    assert_eq!(report.mode, ObjectSyncMode::Multipart);
    let plan = report.plan.unwrap();
    plan.validate(body.len() as u64).unwrap();
    assert!(plan.parts.len() >= 2);
    assert!(plan.parts.iter().rev().skip(1).all(|p| p.length >= MIN_PART_SIZE));
    assert_eq!(client.get_object().unwrap(), body);
}

#[test]
fn small_object_routes_to_single_put() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/small.bin");
    let body = filled(3 * MIB as usize, 5);
    let report =
        sync_object(&client, &coverage_of(&[(0, body.clone())]), &ObjectSyncConfig::solo())
            .unwrap();
    assert_eq!(report.mode, ObjectSyncMode::SinglePut);
    assert_eq!(client.get_object().unwrap(), body);
    assert!(emu.active_uploads("bkt", "obj/small.bin").is_empty());
}

#[test]
fn holey_object_routes_to_single_put_with_zero_fill() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/holey.bin");
    // Large enough for multipart, but with a hole: must fall back.
    let a = filled(10 * MIB as usize, 1);
    let b = filled(10 * MIB as usize, 2);
    let cov = coverage_of(&[(0, a.clone()), (12 * MIB, b.clone())]);
    let report = sync_object(&client, &cov, &ObjectSyncConfig::solo()).unwrap();
    assert_eq!(report.mode, ObjectSyncMode::SinglePut);
    let object = client.get_object().unwrap();
    assert_eq!(object.len() as u64, 22 * MIB);
    assert_eq!(&object[..a.len()], &a[..]);
    assert!(object[a.len()..(12 * MIB) as usize].iter().all(|&x| x == 0), "hole zero-filled");
    assert_eq!(&object[(12 * MIB) as usize..], &b[..]);
}

#[test]
fn empty_coverage_commits_an_empty_object() {
    let emu = S3Emulator::start().unwrap();
    let client = client_for(&emu, "obj/empty.bin");
    let report = sync_object(&client, &CoverageMap::new(), &ObjectSyncConfig::solo()).unwrap();
    assert_eq!(report.mode, ObjectSyncMode::Empty);
    assert_eq!(client.get_object().unwrap(), Vec::<u8>::new());
}

/// Two nodes hold interleaved 1 MiB stripes of a 24 MiB object; the
/// collective sync must exchange ranges, plan three 8 MiB parts, and land a
/// byte-identical object.
#[test]
fn two_node_collective_multipart() {
    let emu = S3Emulator::start().unwrap();
    let coord = tempfile::tempdir().unwrap();
    let total = 24 * MIB;
    let mut expected = vec![0u8; total as usize];
    for stripe in 0..24u64 {
        let tag = stripe as u8 + 1;
        let start = (stripe * MIB) as usize;
        expected[start..start + MIB as usize].copy_from_slice(&filled(MIB as usize, tag));
    }

    let mut handles = Vec::new();
    for node in 0..2usize {
        let endpoint = emu.endpoint();
        let coord_dir: PathBuf = coord.path().to_path_buf();
        let expected = expected.clone();
        handles.push(std::thread::spawn(move || {
            let client = S3Client::new(
                S3Locator::parse(&format!("{endpoint}/bkt/obj/two.bin")).unwrap(),
            );
            let mut cov = CoverageMap::new();
            for stripe in (node as u64..24).step_by(2) {
                let start = (stripe * MIB) as usize;
                cov.insert(stripe * MIB, &expected[start..start + MIB as usize]);
            }
            let cfg = ObjectSyncConfig {
                node_id: node,
                nodes: 2,
                coord_dir: Some(coord_dir),
                poll: std::time::Duration::from_millis(5),
                timeout: std::time::Duration::from_secs(30),
            };
            sync_object(&client, &cov, &cfg).unwrap()
        }));
    }
    let reports: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();

    assert!(reports.iter().all(|r| r.mode == ObjectSyncMode::Multipart));
    let plan = reports[0].plan.as_ref().unwrap();
    plan.validate(total).unwrap();
    assert_eq!(plan.parts.len(), 3);
    assert!(plan.parts.iter().rev().skip(1).all(|p| p.length >= MIN_PART_SIZE));
    // Every planned part was uploaded by exactly one node.
    let mut uploaded: Vec<u32> = reports.iter().flat_map(|r| r.uploaded_parts.clone()).collect();
    uploaded.sort();
    assert_eq!(uploaded, vec![1, 2, 3]);

    let client = client_for(&emu, "obj/two.bin");
    assert_eq!(client.get_object().unwrap(), expected);
}

#[test]
fn leader_failure_propagates_to_followers() {
    // Follower waits on a coordination directory whose leader never shows
    // up; a short timeout must surface as an error, not a hang.
    let emu = S3Emulator::start().unwrap();
    let coord = tempfile::tempdir().unwrap();
    let client = Arc::new(client_for(&emu, "obj/dead.bin"));
    let cfg = ObjectSyncConfig {
        node_id: 1,
        nodes: 2,
        coord_dir: Some(coord.path().to_path_buf()),
        poll: std::time::Duration::from_millis(5),
        timeout: std::time::Duration::from_millis(200),
    };
    let err = sync_object(&client, &coverage_of(&[(0, filled(64, 1))]), &cfg).unwrap_err();
    assert!(err.to_string().contains("timed out"), "{err}");
}
