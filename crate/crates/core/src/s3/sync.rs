//! Collective object writeback.
//!
//! Every node syncer materializes the contiguous byte ranges it holds into
//! `.shuffled` range files inside a shared coordination directory (the
//! hermetic stand-in for the syncers' network exchange), then the lead node
//! decides the route: multipart upload for large hole-free objects, a single
//! zero-filled PUT otherwise. The leader initiates the upload and publishes
//! the id and part plan; nodes upload their assigned parts and report etags;
//! the leader completes the object.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::client::{S3Client, S3Error};
use super::{CoverageMap, PartPlan, MULTIPART_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectSyncMode {
    /// Nothing was written; an empty object is still committed.
    Empty,
    /// Below the multipart threshold or holey: one PUT, holes zero-filled.
    SinglePut,
    Multipart,
}

#[derive(Debug, Clone)]
pub struct ObjectSyncReport {
    pub mode: ObjectSyncMode,
    pub object_size: u64,
    pub plan: Option<PartPlan>,
    /// Parts uploaded by this node.
    pub uploaded_parts: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ObjectSyncConfig {
    pub node_id: usize,
    pub nodes: usize,
    /// Shared exchange directory; required when `nodes > 1`.
    pub coord_dir: Option<PathBuf>,
    pub poll: Duration,
    pub timeout: Duration,
}

impl ObjectSyncConfig {
    pub fn solo() -> ObjectSyncConfig {
        ObjectSyncConfig {
            node_id: 0,
            nodes: 1,
            coord_dir: None,
            poll: Duration::from_millis(10),
            timeout: Duration::from_secs(60),
        }
    }
}

/// One materialized contiguous range and where its bytes live.
struct RangeFile {
    offset: u64,
    length: u64,
    path: PathBuf,
}

/// Synchronizes the accumulated coverage of this node (and, through the
/// coordination directory, its peers) into the target object.
pub fn sync_object(
    client: &S3Client,
    coverage: &CoverageMap,
    cfg: &ObjectSyncConfig,
) -> Result<ObjectSyncReport, S3Error> {
    if cfg.nodes <= 1 {
        return sync_solo(client, coverage);
    }
    let coord = cfg
        .coord_dir
        .as_deref()
        .ok_or_else(|| S3Error::Protocol("multi-node object sync needs a coordination directory".into()))?;
    fs::create_dir_all(coord).map_err(|e| io_protocol("create coordination dir", e))?;

    publish_ranges(coord, cfg.node_id, coverage)?;
    let index = wait_and_load_all_manifests(coord, cfg)?;

    if cfg.node_id == 0 {
        lead(client, coord, cfg, &index)
    } else {
        follow(client, coord, cfg, &index)
    }
}

fn sync_solo(client: &S3Client, coverage: &CoverageMap) -> Result<ObjectSyncReport, S3Error> {
    if coverage.is_empty() {
        client.put_object(&[])?;
        return Ok(ObjectSyncReport {
            mode: ObjectSyncMode::Empty,
            object_size: 0,
            plan: None,
            uploaded_parts: Vec::new(),
        });
    }
    let size = coverage.end();
    if !coverage.is_contiguous_from_zero() || size < MULTIPART_THRESHOLD {
        client.put_object(&coverage.to_zero_filled())?;
        return Ok(ObjectSyncReport {
            mode: ObjectSyncMode::SinglePut,
            object_size: size,
            plan: None,
            uploaded_parts: Vec::new(),
        });
    }
    let plan = PartPlan::for_object(size);
    plan.validate(size).map_err(|e| S3Error::Protocol(e.to_string()))?;
    let upload_id = client.initiate_superseding()?;
    let image = coverage.to_zero_filled();
    let mut etags = BTreeMap::new();
    let mut uploaded = Vec::new();
    for p in &plan.parts {
        let data = &image[p.offset as usize..(p.offset + p.length) as usize];
        etags.insert(p.part_number, client.upload_part(&upload_id, p.part_number, data)?);
        uploaded.push(p.part_number);
    }
    client.complete_with_plan(&upload_id, &plan, &etags)?;
    Ok(ObjectSyncReport {
        mode: ObjectSyncMode::Multipart,
        object_size: size,
        plan: Some(plan),
        uploaded_parts: uploaded,
    })
}

fn publish_ranges(coord: &Path, node: usize, coverage: &CoverageMap) -> Result<(), S3Error> {
    let mut manifest = String::new();
    for (offset, data) in coverage.runs() {
        let name = format!("r{offset:020}.n{node}.shuffled");
        atomic_write(&coord.join(&name), &data)?;
        manifest.push_str(&format!("{offset}\t{}\t{name}\n", data.len()));
    }
    atomic_write(&coord.join(format!("cov.n{node}.txt")), manifest.as_bytes())
}

fn wait_and_load_all_manifests(
    coord: &Path,
    cfg: &ObjectSyncConfig,
) -> Result<Vec<RangeFile>, S3Error> {
    let mut index = Vec::new();
    for node in 0..cfg.nodes {
        let manifest = wait_for_file(coord, &format!("cov.n{node}.txt"), cfg)?;
        for (lineno, line) in manifest.lines().enumerate() {
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(off), Some(len), Some(name)) => index.push(RangeFile {
                    offset: off.parse().map_err(|_| bad_manifest(node, lineno))?,
                    length: len.parse().map_err(|_| bad_manifest(node, lineno))?,
                    path: coord.join(name),
                }),
                _ => return Err(bad_manifest(node, lineno)),
            }
        }
    }
    index.sort_by_key(|r| r.offset);
    for pair in index.windows(2) {
        if pair[0].offset + pair[0].length > pair[1].offset {
            return Err(S3Error::Protocol(format!(
                "nodes advertise overlapping ranges at offset {}; cross-node overwrite \
                 is not supported on object storage",
                pair[1].offset
            )));
        }
    }
    Ok(index)
}

fn lead(
    client: &S3Client,
    coord: &Path,
    cfg: &ObjectSyncConfig,
    index: &[RangeFile],
) -> Result<ObjectSyncReport, S3Error> {
    let outcome = (|| -> Result<ObjectSyncReport, S3Error> {
        let size = index.last().map(|r| r.offset + r.length).unwrap_or(0);
        let contiguous = index
            .windows(2)
            .all(|p| p[0].offset + p[0].length == p[1].offset)
            && index.first().map(|r| r.offset) == Some(0);

        if index.is_empty() {
            client.put_object(&[])?;
            atomic_write(&coord.join("plan.txt"), b"empty\n")?;
            atomic_write(&coord.join("done.txt"), b"ok\n")?;
            return Ok(ObjectSyncReport {
                mode: ObjectSyncMode::Empty,
                object_size: 0,
                plan: None,
                uploaded_parts: Vec::new(),
            });
        }
        if !contiguous || size < MULTIPART_THRESHOLD {
            let image = assemble_zero_filled(index, size)?;
            client.put_object(&image)?;
            atomic_write(&coord.join("plan.txt"), format!("single\t{size}\n").as_bytes())?;
            atomic_write(&coord.join("done.txt"), b"ok\n")?;
            return Ok(ObjectSyncReport {
                mode: ObjectSyncMode::SinglePut,
                object_size: size,
                plan: None,
                uploaded_parts: Vec::new(),
            });
        }

        let plan = PartPlan::for_object(size);
        plan.validate(size).map_err(|e| S3Error::Protocol(e.to_string()))?;
        let upload_id = client.initiate_superseding()?;
        let owners: Vec<usize> =
            plan.parts.iter().map(|p| owner_of(coord, index, p.offset)).collect();
        let mut plan_text = format!("multipart\t{upload_id}\t{size}\n");
        for (p, owner) in plan.parts.iter().zip(&owners) {
            plan_text.push_str(&format!("{}\t{}\t{}\t{owner}\n", p.part_number, p.offset, p.length));
        }
        atomic_write(&coord.join("plan.txt"), plan_text.as_bytes())?;

        let uploaded = upload_assigned_parts(client, &upload_id, &plan, &owners, 0, index)?;

        let mut etags: BTreeMap<u32, String> = BTreeMap::new();
        for node in 0..cfg.nodes {
            let listing = wait_for_file(coord, &format!("etag.n{node}.txt"), cfg)?;
            for line in listing.lines() {
                let (part, etag) = line
                    .split_once('\t')
                    .ok_or_else(|| S3Error::Protocol(format!("bad etag line from node {node}")))?;
                etags.insert(
                    part.parse()
                        .map_err(|_| S3Error::Protocol(format!("bad part number from node {node}")))?,
                    etag.to_string(),
                );
            }
        }
        client.complete_with_plan(&upload_id, &plan, &etags)?;
        atomic_write(&coord.join("done.txt"), b"ok\n")?;
        Ok(ObjectSyncReport {
            mode: ObjectSyncMode::Multipart,
            object_size: size,
            plan: Some(plan),
            uploaded_parts: uploaded,
        })
    })();

    if let Err(e) = &outcome {
        // Fail the followers fast instead of letting them time out.
        let _ = atomic_write(&coord.join("done.txt"), format!("error\t{e}\n").as_bytes());
    }
    outcome
}

fn follow(
    client: &S3Client,
    coord: &Path,
    cfg: &ObjectSyncConfig,
    index: &[RangeFile],
) -> Result<ObjectSyncReport, S3Error> {
    let plan_text = wait_for_file(coord, "plan.txt", cfg)?;
    let mut lines = plan_text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    let report = match header.as_slice() {
        ["empty"] => ObjectSyncReport {
            mode: ObjectSyncMode::Empty,
            object_size: 0,
            plan: None,
            uploaded_parts: Vec::new(),
        },
        ["single", size] => ObjectSyncReport {
            mode: ObjectSyncMode::SinglePut,
            object_size: size.parse().map_err(|_| S3Error::Protocol("bad plan size".into()))?,
            plan: None,
            uploaded_parts: Vec::new(),
        },
        ["multipart", upload_id, size] => {
            let size: u64 = size.parse().map_err(|_| S3Error::Protocol("bad plan size".into()))?;
            let mut parts = Vec::new();
            let mut owners = Vec::new();
            for line in lines {
                let f: Vec<&str> = line.split('\t').collect();
                let [num, off, len, owner] = f.as_slice() else {
                    return Err(S3Error::Protocol("bad plan row".into()));
                };
                parts.push(super::PartSpec {
                    part_number: num.parse().map_err(|_| S3Error::Protocol("bad plan row".into()))?,
                    offset: off.parse().map_err(|_| S3Error::Protocol("bad plan row".into()))?,
                    length: len.parse().map_err(|_| S3Error::Protocol("bad plan row".into()))?,
                });
                owners.push(
                    owner
                        .parse::<usize>()
                        .map_err(|_| S3Error::Protocol("bad plan row".into()))?,
                );
            }
            let plan = PartPlan { parts };
            plan.validate(size).map_err(|e| S3Error::Protocol(e.to_string()))?;
            let uploaded =
                upload_assigned_parts(client, upload_id, &plan, &owners, cfg.node_id, index)?;
            ObjectSyncReport {
                mode: ObjectSyncMode::Multipart,
                object_size: size,
                plan: Some(plan),
                uploaded_parts: uploaded,
            }
        }
        _ => return Err(S3Error::Protocol("unrecognized plan header".into())),
    };

    let done = wait_for_file(coord, "done.txt", cfg)?;
    match done.split_once('\t') {
        Some(("error", msg)) => Err(S3Error::Protocol(format!("leader failed: {}", msg.trim()))),
        _ => Ok(report),
    }
}

/// Uploads the parts assigned to `node` and publishes their etags when a
/// coordination directory is in play.
fn upload_assigned_parts(
    client: &S3Client,
    upload_id: &str,
    plan: &PartPlan,
    owners: &[usize],
    node: usize,
    index: &[RangeFile],
) -> Result<Vec<u32>, S3Error> {
    let mut etag_text = String::new();
    let mut uploaded = Vec::new();
    for (p, owner) in plan.parts.iter().zip(owners) {
        if *owner != node {
            continue;
        }
        let data = read_span(index, p.offset, p.length)?;
        let etag = client.upload_part(upload_id, p.part_number, &data)?;
        etag_text.push_str(&format!("{}\t{etag}\n", p.part_number));
        uploaded.push(p.part_number);
    }
    if let Some(parent) = index.first().map(|r| r.path.parent().unwrap().to_path_buf()) {
        atomic_write(&parent.join(format!("etag.n{node}.txt")), etag_text.as_bytes())?;
    }
    Ok(uploaded)
}

fn owner_of(coord: &Path, index: &[RangeFile], offset: u64) -> usize {
    index
        .iter()
        .find(|r| offset >= r.offset && offset < r.offset + r.length)
        .and_then(|r| {
            let name = r.path.file_name()?.to_str()?;
            let node = name.strip_suffix(".shuffled")?.rsplit(".n").next()?;
            node.parse().ok()
        })
        .unwrap_or_else(|| {
            log::warn!("no owner for offset {offset} in {}; assigning leader", coord.display());
            0
        })
}

/// Reads `[offset, offset+length)` out of the exchanged range files.
fn read_span(index: &[RangeFile], offset: u64, length: u64) -> Result<Vec<u8>, S3Error> {
    let mut out = Vec::with_capacity(length as usize);
    let mut pos = offset;
    let end = offset + length;
    for r in index {
        if r.offset + r.length <= pos {
            continue;
        }
        if r.offset > pos {
            return Err(S3Error::Protocol(format!("gap at offset {pos} while assembling a part")));
        }
        let from = (pos - r.offset) as usize;
        let to = ((end.min(r.offset + r.length)) - r.offset) as usize;
        let bytes = fs::read(&r.path).map_err(|e| io_protocol("read range file", e))?;
        out.extend_from_slice(&bytes[from..to]);
        pos = r.offset + to as u64;
        if pos >= end {
            return Ok(out);
        }
    }
    Err(S3Error::Protocol(format!("coverage ends at {pos}, needed {end}")))
}

fn assemble_zero_filled(index: &[RangeFile], size: u64) -> Result<Vec<u8>, S3Error> {
    let mut image = vec![0u8; size as usize];
    for r in index {
        let bytes = fs::read(&r.path).map_err(|e| io_protocol("read range file", e))?;
        image[r.offset as usize..r.offset as usize + bytes.len()].copy_from_slice(&bytes);
    }
    Ok(image)
}

fn atomic_write(path: &Path, data: &[u8]) -> Result<(), S3Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).map_err(|e| io_protocol("write coordination file", e))?;
    fs::rename(&tmp, path).map_err(|e| io_protocol("publish coordination file", e))
}

fn wait_for_file(coord: &Path, name: &str, cfg: &ObjectSyncConfig) -> Result<String, S3Error> {
    let path = coord.join(name);
    let deadline = Instant::now() + cfg.timeout;
    loop {
        match fs::read_to_string(&path) {
            Ok(text) => return Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if Instant::now() > deadline {
                    return Err(S3Error::Protocol(format!(
                        "timed out waiting for {name} in {}",
                        coord.display()
                    )));
                }
                std::thread::sleep(cfg.poll);
            }
            Err(e) => return Err(io_protocol("read coordination file", e)),
        }
    }
}

fn io_protocol(what: &str, e: std::io::Error) -> S3Error {
    S3Error::Protocol(format!("{what}: {e}"))
}

fn bad_manifest(node: usize, line: usize) -> S3Error {
    S3Error::Protocol(format!("malformed coverage manifest from node {node} at line {line}"))
}
