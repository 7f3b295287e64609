#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pc::imageio::image_to_png;
use pc::service::{router, Service, ServiceConfig};
use pc_core::backend::toy::{toy_bundle, toy_face_pairs, ToyBackendConfig};
use pc_core::latent::WPlusLatent;
use pc_core::training::Environment;
use pc_core::Tensor;
use serde_json::Value;
use tower::ServiceExt;

pub fn env() -> Environment {
    let bundle = toy_bundle(&ToyBackendConfig::default()).unwrap();
    pc::bundle::environment(bundle, None).unwrap()
}

pub fn faces(n: usize, seed: u64) -> Vec<(Tensor, WPlusLatent)> {
    toy_face_pairs(&ToyBackendConfig::default(), n, seed).unwrap()
}

/// A toy face as PNG bytes.
pub fn face_png(seed: u64) -> Vec<u8> {
    image_to_png(&faces(1, seed).remove(0).0).unwrap()
}

pub struct App {
    pub svc: Arc<Service>,
    pub router: Router,
    pub dir: tempfile::TempDir,
}

pub fn app_with(f: impl FnOnce(&mut ServiceConfig)) -> App {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig {
        store_dir: dir.path().join("store"),
        ..ServiceConfig::default()
    };
    f(&mut cfg);
    let svc = Service::with_environment(cfg, env()).unwrap();
    App {
        router: router(Arc::clone(&svc)),
        svc,
        dir,
    }
}

pub fn app() -> App {
    app_with(|_| {})
}

impl App {
    pub async fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        self.send(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    pub async fn get_json(&self, uri: &str) -> (StatusCode, Value) {
        let (s, b) = self.get(uri).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn post_json(&self, uri: &str, body: &Value) -> (StatusCode, Value) {
        let req = Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(body).unwrap()))
            .unwrap();
        let (s, b) = self.send(req).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn upload(&self, fields: &[(&str, Option<&str>, &[u8])]) -> (StatusCode, Value) {
        let (ctype, body) = multipart(fields);
        let req = Request::post("/subjects")
            .header("content-type", ctype)
            .body(Body::from(body))
            .unwrap();
        let (s, b) = self.send(req).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    /// Polls a job until it is done or failed.
    pub async fn wait(&self, job: &Value) -> Value {
        let id = job["job_id"].as_str().expect("job record");
        for _ in 0..6000 {
            let (s, v) = self.get_json(&format!("/jobs/{id}")).await;
            assert_eq!(s, StatusCode::OK);
            if v["state"] == "done" || v["state"] == "failed" {
                return v;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {id} did not finish");
    }

    /// Submits, expects 202 and waits for success.
    pub async fn run(&self, uri: &str, body: &Value) -> Value {
        let (s, job) = self.post_json(uri, body).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{uri}: {job}");
        let done = self.wait(&job).await;
        assert_eq!(done["state"], "done", "{uri}: {done}");
        done["result"].clone()
    }

    pub async fn add_subject(&self, id: &str, seed: u64, tune_cfg: Option<&str>) -> Value {
        let png = face_png(seed);
        let mut fields: Vec<(&str, Option<&str>, &[u8])> =
            vec![("image", Some("face.png"), &png), ("subject_id", None, id.as_bytes())];
        if let Some(cfg) = tune_cfg {
            fields.push(("tune", None, b"true"));
            fields.push(("tune_cfg", None, cfg.as_bytes()));
        }
        let (s, job) = self.upload(&fields).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{job}");
        let done = self.wait(&job).await;
        assert_eq!(done["state"], "done", "{done}");
        done["result"].clone()
    }
}

/// `multipart/form-data` content type and body. A field with a file name is
/// sent as a PNG file part.
pub fn multipart(fields: &[(&str, Option<&str>, &[u8])]) -> (String, Vec<u8>) {
    let boundary = "pcboundary7d1f";
    let mut body = Vec::new();
    for (name, file, data) in fields {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match file {
            Some(f) => body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: image/png\r\n\r\n")
                    .as_bytes(),
            ),
            None => body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes()),
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}
