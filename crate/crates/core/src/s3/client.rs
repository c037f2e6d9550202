//! Client for the S3 REST multipart subset: initiate / upload-part /
//! complete / abort / put-object, plus the listings the tests use. Speaks
//! plain HTTP to any compatible endpoint; tests run against the local
//! emulator.

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::http;
use super::{PartPlan, S3Locator};
use crate::backend::RetryPolicy;
use crate::throttle::TokenBucket;

#[derive(Debug, Error)]
pub enum S3Error {
    #[error("transport failure talking to {host}: {source}")]
    Transport {
        host: String,
        #[source]
        source: std::io::Error,
    },
    #[error("endpoint returned {status} for {what}: {detail}")]
    Status { what: String, status: u16, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub struct S3Client {
    locator: S3Locator,
    throttle: Option<Arc<TokenBucket>>,
    retry: RetryPolicy,
    timeout: Duration,
    auth_header: Option<String>,
    uploaded: std::sync::atomic::AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartInfo {
    pub part_number: u32,
    pub etag: String,
    pub size: u64,
}

impl S3Client {
    pub fn new(locator: S3Locator) -> S3Client {
        // Standard credential variables; the emulator does not check them,
        // a real endpoint may.
        let auth_header = std::env::var("AWS_ACCESS_KEY_ID")
            .ok()
            .map(|key| format!("STAGEDIO-KEY {key}"));
        S3Client {
            locator,
            throttle: None,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(30),
            auth_header,
            uploaded: std::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn with_throttle(mut self, throttle: Option<Arc<TokenBucket>>) -> S3Client {
        self.throttle = throttle;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> S3Client {
        self.retry = retry;
        self
    }

    pub fn locator(&self) -> &S3Locator {
        &self.locator
    }

    pub fn bytes_uploaded(&self) -> u64 {
        self.uploaded.load(std::sync::atomic::Ordering::Relaxed)
    }

    fn object_path(&self) -> String {
        format!("/{}/{}", self.locator.bucket, self.locator.key)
    }

    fn call(
        &self,
        what: &str,
        method: &str,
        path_and_query: &str,
        body: &[u8],
        ok: &[u16],
    ) -> Result<http::Response, S3Error> {
        let headers: Vec<(String, String)> = self
            .auth_header
            .iter()
            .map(|v| ("Authorization".to_string(), v.clone()))
            .collect();
        if let Some(bucket) = &self.throttle {
            bucket.acquire(body.len() as u64);
        }
        let resp = self.retry.run(what, || {
            http::request(self.locator.host(), method, path_and_query, &headers, body, self.timeout)
                .map_err(|source| S3Error::Transport { host: self.locator.host().into(), source })
        })?;
        if !ok.contains(&resp.status) {
            return Err(S3Error::Status {
                what: what.to_string(),
                status: resp.status,
                detail: String::from_utf8_lossy(&resp.body).into_owned(),
            });
        }
        Ok(resp)
    }

    /// Starts a multipart upload and returns its id.
    pub fn initiate_multipart(&self) -> Result<String, S3Error> {
        let path = format!("{}?uploads", self.object_path());
        let resp = self.call("initiate multipart", "POST", &path, &[], &[200])?;
        let xml = String::from_utf8_lossy(&resp.body);
        http::extract_xml_tag(&xml, "UploadId")
            .map(str::to_string)
            .ok_or_else(|| S3Error::Protocol("initiate response lacks UploadId".into()))
    }

    /// Starts a fresh multipart upload, explicitly aborting any session
    /// already active for this key so exactly one survives.
    pub fn initiate_superseding(&self) -> Result<String, S3Error> {
        for (key, upload_id) in self.list_uploads()? {
            if key == self.locator.key {
                self.abort_multipart(&upload_id)?;
            }
        }
        self.initiate_multipart()
    }

    pub fn abort_multipart(&self, upload_id: &str) -> Result<(), S3Error> {
        let path = format!("{}?uploadId={upload_id}", self.object_path());
        self.call("abort multipart", "DELETE", &path, &[], &[200, 204])?;
        Ok(())
    }

    /// Uploads one numbered part; re-uploading the same number replaces it.
    pub fn upload_part(&self, upload_id: &str, part_number: u32, data: &[u8]) -> Result<String, S3Error> {
        let path = format!(
            "{}?partNumber={part_number}&uploadId={upload_id}",
            self.object_path()
        );
        let resp = self.call("upload part", "PUT", &path, data, &[200])?;
        self.uploaded
            .fetch_add(data.len() as u64, std::sync::atomic::Ordering::Relaxed);
        resp.header("ETag")
            .map(str::to_string)
            .ok_or_else(|| S3Error::Protocol("upload-part response lacks ETag".into()))
    }

    /// Commits the upload. Every planned part must have an etag; a missing
    /// one refuses completion locally so no partial object can appear.
    pub fn complete_multipart(
        &self,
        upload_id: &str,
        parts: &[(u32, String)],
    ) -> Result<(), S3Error> {
        let mut xml = String::from("<CompleteMultipartUpload>");
        for (number, etag) in parts {
            xml.push_str(&format!(
                "<Part><PartNumber>{number}</PartNumber><ETag>{etag}</ETag></Part>"
            ));
        }
        xml.push_str("</CompleteMultipartUpload>");
        let path = format!("{}?uploadId={upload_id}", self.object_path());
        self.call("complete multipart", "POST", &path, xml.as_bytes(), &[200])?;
        Ok(())
    }

    /// Checks a plan's etag set and completes the upload.
    pub fn complete_with_plan(
        &self,
        upload_id: &str,
        plan: &PartPlan,
        etags: &std::collections::BTreeMap<u32, String>,
    ) -> Result<(), S3Error> {
        let mut parts = Vec::with_capacity(plan.parts.len());
        for p in &plan.parts {
            match etags.get(&p.part_number) {
                Some(etag) => parts.push((p.part_number, etag.clone())),
                None => {
                    return Err(S3Error::Protocol(format!(
                        "part {} has no etag; refusing completion",
                        p.part_number
                    )))
                }
            }
        }
        self.complete_multipart(upload_id, &parts)
    }

    pub fn put_object(&self, data: &[u8]) -> Result<(), S3Error> {
        let path = self.object_path();
        self.call("put object", "PUT", &path, data, &[200])?;
        self.uploaded
            .fetch_add(data.len() as u64, std::sync::atomic::Ordering::Relaxed);
        Ok(())
    }

    pub fn get_object(&self) -> Result<Vec<u8>, S3Error> {
        let path = self.object_path();
        Ok(self.call("get object", "GET", &path, &[], &[200])?.body)
    }

    /// Lists in-progress multipart uploads in the bucket as (key, upload id).
    pub fn list_uploads(&self) -> Result<Vec<(String, String)>, S3Error> {
        let path = format!("/{}?uploads", self.locator.bucket);
        let resp = self.call("list uploads", "GET", &path, &[], &[200])?;
        let xml = String::from_utf8_lossy(&resp.body);
        Ok(http::extract_all_xml_tags(&xml, "Upload")
            .into_iter()
            .filter_map(|u| {
                Some((
                    http::extract_xml_tag(u, "Key")?.to_string(),
                    http::extract_xml_tag(u, "UploadId")?.to_string(),
                ))
            })
            .collect())
    }

    /// Lists the parts uploaded so far for one session.
    pub fn list_parts(&self, upload_id: &str) -> Result<Vec<PartInfo>, S3Error> {
        let path = format!("{}?uploadId={upload_id}&parts", self.object_path());
        let resp = self.call("list parts", "GET", &path, &[], &[200])?;
        let xml = String::from_utf8_lossy(&resp.body);
        Ok(http::extract_all_xml_tags(&xml, "Part")
            .into_iter()
            .filter_map(|p| {
                Some(PartInfo {
                    part_number: http::extract_xml_tag(p, "PartNumber")?.parse().ok()?,
                    etag: http::extract_xml_tag(p, "ETag")?.to_string(),
                    size: http::extract_xml_tag(p, "Size")?.parse().ok()?,
                })
            })
            .collect())
    }
}
