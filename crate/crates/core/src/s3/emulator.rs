//! Local S3-compatible emulator.
//!
//! Implements just the wire subset the syncer speaks: put-object,
//! initiate / upload-part / complete / abort multipart, object download and
//! the two listings. Completion is atomic and enforces the 5 MiB floor on
//! non-final parts, like the real service. State lives in memory; auth
//! headers are accepted and ignored.

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::http::{self, Request};
use super::MIN_PART_SIZE;

#[derive(Default)]
struct EmuState {
    objects: HashMap<(String, String), Vec<u8>>,
    uploads: HashMap<String, Upload>,
    next_upload: u64,
}

struct Upload {
    bucket: String,
    key: String,
    parts: BTreeMap<u32, (String, Vec<u8>)>,
}

/// Handle to a running emulator; shuts down on drop.
pub struct S3Emulator {
    addr: SocketAddr,
    state: Arc<Mutex<EmuState>>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl S3Emulator {
    /// Binds an ephemeral localhost port and starts serving.
    pub fn start() -> std::io::Result<S3Emulator> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(EmuState::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let thread_state = state.clone();
        let thread_stop = stop.clone();
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { break };
                let state = thread_state.clone();
                std::thread::spawn(move || {
                    if let Ok(req) = http::read_request(&stream) {
                        let _ = handle(&state, &stream, req);
                    }
                });
            }
        });
        Ok(S3Emulator { addr, state, stop, accept_thread: Some(accept_thread) })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Locator string for one key, as accepted by the backend parser.
    pub fn locator_str(&self, bucket: &str, key: &str) -> String {
        format!("s3:{}/{bucket}/{key}", self.endpoint())
    }

    /// Direct peek at a stored object, for assertions.
    pub fn object(&self, bucket: &str, key: &str) -> Option<Vec<u8>> {
        self.state.lock().unwrap().objects.get(&(bucket.into(), key.into())).cloned()
    }

    /// Active upload ids for a key, for assertions.
    pub fn active_uploads(&self, bucket: &str, key: &str) -> Vec<String> {
        let st = self.state.lock().unwrap();
        let mut ids: Vec<String> = st
            .uploads
            .iter()
            .filter(|(_, u)| u.bucket == bucket && u.key == key)
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    }
}

impl Drop for S3Emulator {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn etag_for(data: &[u8]) -> String {
    format!("\"{:08x}-{:x}\"", crc32fast::hash(data), data.len())
}

fn handle(state: &Mutex<EmuState>, stream: &TcpStream, req: Request) -> std::io::Result<()> {
    let path = req.path.trim_start_matches('/');
    let (bucket, key) = match path.split_once('/') {
        Some((b, k)) => (b.to_string(), k.to_string()),
        None => (path.to_string(), String::new()),
    };

    let respond_xml = |status: u16, reason: &str, body: String| {
        http::write_response(
            stream,
            status,
            reason,
            &[("Content-Type".into(), "application/xml".into())],
            body.as_bytes(),
        )
    };
    let respond_err = |status: u16, code: &str, msg: &str| {
        respond_xml(
            status,
            code,
            format!("<Error><Code>{code}</Code><Message>{msg}</Message></Error>"),
        )
    };

    match (req.method.as_str(), key.is_empty()) {
        ("PUT", false) => {
            if let (Some(part), Some(upload_id)) =
                (req.query_value("partNumber"), req.query_value("uploadId"))
            {
                let part: u32 = match part.parse() {
                    Ok(p) if p >= 1 => p,
                    _ => return respond_err(400, "InvalidArgument", "bad partNumber"),
                };
                let mut st = state.lock().unwrap();
                let Some(upload) = st.uploads.get_mut(upload_id) else {
                    return respond_err(404, "NoSuchUpload", upload_id);
                };
                let etag = etag_for(&req.body);
                upload.parts.insert(part, (etag.clone(), req.body));
                http::write_response(stream, 200, "OK", &[("ETag".into(), etag)], b"")
            } else {
                let etag = etag_for(&req.body);
                state.lock().unwrap().objects.insert((bucket, key), req.body);
                http::write_response(stream, 200, "OK", &[("ETag".into(), etag)], b"")
            }
        }
        ("POST", false) if req.has_query("uploads") => {
            let mut st = state.lock().unwrap();
            st.next_upload += 1;
            let id = format!("mpu-{:016x}", st.next_upload);
            st.uploads.insert(
                id.clone(),
                Upload { bucket: bucket.clone(), key: key.clone(), parts: BTreeMap::new() },
            );
            respond_xml(
                200,
                "OK",
                format!(
                    "<InitiateMultipartUploadResult><Bucket>{bucket}</Bucket><Key>{key}</Key>\
                     <UploadId>{id}</UploadId></InitiateMultipartUploadResult>"
                ),
            )
        }
        ("POST", false) => {
            let Some(upload_id) = req.query_value("uploadId").map(str::to_string) else {
                return respond_err(400, "InvalidRequest", "missing uploadId");
            };
            let body = String::from_utf8_lossy(&req.body).into_owned();
            let mut requested: Vec<(u32, String)> = Vec::new();
            for part_xml in http::extract_all_xml_tags(&body, "Part") {
                match (
                    http::extract_xml_tag(part_xml, "PartNumber").and_then(|n| n.parse().ok()),
                    http::extract_xml_tag(part_xml, "ETag"),
                ) {
                    (Some(n), Some(e)) => requested.push((n, e.to_string())),
                    _ => return respond_err(400, "MalformedXML", "bad Part entry"),
                }
            }
            if requested.is_empty() {
                return respond_err(400, "MalformedXML", "no parts listed");
            }
            if requested.windows(2).any(|w| w[0].0 >= w[1].0) {
                return respond_err(400, "InvalidPartOrder", "part numbers must ascend");
            }
            let mut st = state.lock().unwrap();
            let Some(upload) = st.uploads.get(&upload_id) else {
                return respond_err(404, "NoSuchUpload", &upload_id);
            };
            // Validate every requested part before mutating anything:
            // completion is atomic.
            let mut object = Vec::new();
            for (i, (number, etag)) in requested.iter().enumerate() {
                let Some((stored_etag, data)) = upload.parts.get(number) else {
                    return respond_err(400, "InvalidPart", &format!("part {number} not uploaded"));
                };
                if stored_etag != etag {
                    return respond_err(400, "InvalidPart", &format!("etag mismatch on part {number}"));
                }
                let is_last = i + 1 == requested.len();
                if !is_last && (data.len() as u64) < MIN_PART_SIZE {
                    return respond_err(
                        400,
                        "EntityTooSmall",
                        &format!("part {number} below minimum size"),
                    );
                }
                object.extend_from_slice(data);
            }
            let etag = etag_for(&object);
            let (bkt, k) = (upload.bucket.clone(), upload.key.clone());
            st.uploads.remove(&upload_id);
            st.objects.insert((bkt.clone(), k.clone()), object);
            respond_xml(
                200,
                "OK",
                format!(
                    "<CompleteMultipartUploadResult><Bucket>{bkt}</Bucket><Key>{k}</Key>\
                     <ETag>{etag}</ETag></CompleteMultipartUploadResult>"
                ),
            )
        }
        ("DELETE", false) => {
            let Some(upload_id) = req.query_value("uploadId") else {
                return respond_err(400, "InvalidRequest", "missing uploadId");
            };
            let mut st = state.lock().unwrap();
            match st.uploads.remove(upload_id) {
                Some(_) => http::write_response(stream, 204, "No Content", &[], b""),
                None => respond_err(404, "NoSuchUpload", upload_id),
            }
        }
        ("GET", false) if req.has_query("uploadId") => {
            let upload_id = req.query_value("uploadId").unwrap_or_default();
            let st = state.lock().unwrap();
            let Some(upload) = st.uploads.get(upload_id) else {
                return respond_err(404, "NoSuchUpload", upload_id);
            };
            let mut xml = String::from("<ListPartsResult>");
            for (number, (etag, data)) in &upload.parts {
                xml.push_str(&format!(
                    "<Part><PartNumber>{number}</PartNumber><ETag>{etag}</ETag>\
                     <Size>{}</Size></Part>",
                    data.len()
                ));
            }
            xml.push_str("</ListPartsResult>");
            respond_xml(200, "OK", xml)
        }
        ("GET", false) => {
            let st = state.lock().unwrap();
            match st.objects.get(&(bucket, key)) {
                Some(data) => http::write_response(stream, 200, "OK", &[], data),
                None => respond_err(404, "NoSuchKey", "object not found"),
            }
        }
        ("GET", true) if req.has_query("uploads") => {
            let st = state.lock().unwrap();
            let mut ids: Vec<(&String, &Upload)> =
                st.uploads.iter().filter(|(_, u)| u.bucket == bucket).collect();
            ids.sort_by(|a, b| a.0.cmp(b.0));
            let mut xml = String::from("<ListMultipartUploadsResult>");
            for (id, upload) in ids {
                xml.push_str(&format!(
                    "<Upload><Key>{}</Key><UploadId>{id}</UploadId></Upload>",
                    upload.key
                ));
            }
            xml.push_str("</ListMultipartUploadsResult>");
            respond_xml(200, "OK", xml)
        }
        _ => respond_err(400, "InvalidRequest", "unsupported operation"),
    }
}
