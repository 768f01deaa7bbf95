// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};
use tale_core::engine::UserFixture;
use tale_server::{start, ServerConfig, ServerHandle};

pub const USERS: [(&str, &str); 3] = [("globus", "alice"), ("globus", "bob"), ("orcid", "carol")];

pub fn config(data_dir: Option<&Path>) -> ServerConfig {
    ServerConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        data_dir: data_dir.map(Path::to_path_buf),
        build_delay_ms: 20,
        background_gc: false,
        http_provider: false,
        users: USERS
            .iter()
            .map(|(i, s)| UserFixture {
                issuer: i.to_string(),
                subject: s.to_string(),
                secret: format!("{s}-pw"),
            })
            .collect(),
        ..ServerConfig::default()
    }
}

pub fn server(data_dir: Option<&Path>) -> ServerHandle {
    start(&config(data_dir)).unwrap()
}

pub fn credentials(subject: &str) -> Value {
    let issuer = USERS.iter().find(|(_, s)| *s == subject).unwrap().0;
    json!({"issuer": issuer, "subject": subject, "proof": format!("{subject}-pw")})
}

pub struct Client {
    pub base: String,
    agent: ureq::Agent,
}

pub struct Reply {
    pub status: u16,
    pub body: Value,
    pub text: String,
    pub headers: Vec<(String, String)>,
}

impl Reply {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

impl Client {
    pub fn new(handle: &ServerHandle) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            base: handle.url(),
            agent,
        }
    }

    pub fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<&Value>) -> Reply {
        self.call_with(method, path, token, body, &[])
    }

    pub fn call_with(
        &self,
        method: &str,
        path: &str,
        token: Option<&str>,
        body: Option<&Value>,
        headers: &[(&str, &str)],
    ) -> Reply {
        let url = format!("{}{}", self.base, path);
        let mut req = ureq::http::Request::builder().method(method).uri(&url);
        if let Some(t) = token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let result = match body {
            Some(b) => self.agent.run(
                req.header("Content-Type", "application/json")
                    .body(b.to_string())
                    .unwrap(),
            ),
            None => self.agent.run(req.body(()).unwrap()),
        };
        let mut resp = result.unwrap_or_else(|e| panic!("{method} {path}: {e}"));
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or("").to_string()))
            .collect();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(Value::Null);
        Reply {
            status,
            body,
            text,
            headers,
        }
    }

    pub fn get(&self, path: &str, token: &str) -> Reply {
        self.call("GET", path, Some(token), None)
    }

    pub fn post(&self, path: &str, token: &str, body: Value) -> Reply {
        self.call("POST", path, Some(token), Some(&body))
    }

    pub fn token(&self, subject: &str, scopes: Option<&[&str]>) -> String {
        let mut body = credentials(subject);
        if let Some(s) = scopes {
            body["scopes"] = json!(s);
        }
        let r = self.call("POST", "/v1/auth/token", None, Some(&body));
        assert_eq!(r.status, 200, "{}", r.text);
        r.body["value"].as_str().unwrap().to_string()
    }

    /// Polls a job until it is terminal.
    pub fn wait_job(&self, token: &str, id: &str) -> Value {
        for _ in 0..500 {
            let r = self.get(&format!("/v1/job/{id}"), token);
            assert_eq!(r.status, 200, "{}", r.text);
            let st = r.body["status"].as_str().unwrap();
            if st == "Done" || st == "Failed" {
                return r.body;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        panic!("job {id} did not finish");
    }

    /// Registers `identifier` into the caller's home and returns the
    /// finished job.
    pub fn register(&self, token: &str, identifier: &str) -> Value {
        let r = self.post("/v1/dataset/register", token, json!({"identifier": identifier}));
        assert_eq!(r.status, 202, "{}", r.text);
        self.wait_job(token, r.body["id"].as_str().unwrap())
    }

    /// Recipe, ready image and tale over a freshly registered dataset.
    pub fn tale(&self, token: &str, identifier: &str) -> Value {
        let job = self.register(token, identifier);
        assert_eq!(job["status"], "Done", "{job}");
        let folder = job["result"]["folder"].as_str().unwrap().to_string();
        let r = self.post(
            "/v1/recipe",
            token,
            json!({"name": "py", "repo_url": "https://example.org/env.git", "commit_id": "abc123", "config": {}}),
        );
        assert_eq!(r.status, 201, "{}", r.text);
        let r = self.post("/v1/image", token, json!({"recipe_id": r.body["id"]}));
        assert_eq!(r.status, 202, "{}", r.text);
        let image = r.body["image"]["id"].as_str().unwrap().to_string();
        let job = self.wait_job(token, r.body["id"].as_str().unwrap());
        assert_eq!(job["status"], "Done", "{job}");
        let r = self.post(
            "/v1/tale",
            token,
            json!({"image_id": image, "folder_id": folder, "metadata": {"title": "t"}}),
        );
        assert_eq!(r.status, 201, "{}", r.text);
        r.body
    }
}

pub fn seed(handle: &ServerHandle, id: &str, files: &[(&str, usize)]) {
    let mut ds = tale_core::repository::MockDataset::new(id);
    for (p, n) in files {
        ds = ds.generated_file(p, *n);
    }
    handle.engine().mock().insert(id, ds);
}
