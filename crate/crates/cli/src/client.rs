// SPDX-License-Identifier: Apache-2.0

//! Blocking JSON client for the `/v1` API.

use std::time::Duration;

use serde_json::Value;

#[derive(Debug)]
pub enum ClientError {
    /// The server answered with an error body.
    Api { status: u16, code: String, message: String },
    /// The server could not be reached.
    Network { url: String, message: String },
    /// The server answered with something that is not JSON.
    Decode { status: u16, message: String },
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Api { code, .. } => code,
            ClientError::Network { .. } => "Unreachable",
            ClientError::Decode { .. } => "BadResponse",
        }
    }

    pub fn message(&self) -> String {
        match self {
            ClientError::Api { message, .. } => message.clone(),
            ClientError::Network { url, message } => format!("cannot reach {url}: {message}"),
            ClientError::Decode { status, message } => format!("HTTP {status}: {message}"),
        }
    }
}

pub struct Client {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            base: base.to_string(),
            token,
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn get(&self, path: &str) -> Result<Value, ClientError> {
        self.get_query(path, &[])
    }

    pub fn get_query(&self, path: &str, query: &[(&str, &str)]) -> Result<Value, ClientError> {
        let text = self.get_text(path, query)?;
        decode(200, &text)
    }

    pub fn get_text(&self, path: &str, query: &[(&str, &str)]) -> Result<String, ClientError> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        for (k, v) in query {
            req = req.query(*k, *v);
        }
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        self.finish(req.call())
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        let text = self.post_text(path, body.to_string())?;
        decode(200, &text)
    }

    pub fn post_text(&self, path: &str, body: String) -> Result<String, ClientError> {
        let mut req = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        self.finish(req.send(body))
    }

    pub fn delete(&self, path: &str) -> Result<(), ClientError> {
        let mut req = self.agent.delete(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        self.finish(req.call()).map(|_| ())
    }

    fn finish(&self, resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<String, ClientError> {
        let mut resp = resp.map_err(|e| ClientError::Network {
            url: self.base.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(64 << 20)
            .read_to_string()
            .map_err(|e| ClientError::Network {
                url: self.base.clone(),
                message: e.to_string(),
            })?;
        if (200..300).contains(&status) {
            return Ok(text);
        }
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        let err = &body["error"];
        match (err["code"].as_str(), err["message"].as_str()) {
            (Some(code), Some(message)) => Err(ClientError::Api {
                status,
                code: code.to_string(),
                message: message.to_string(),
            }),
            _ => Err(ClientError::Api {
                status,
                code: format!("Http{status}"),
                message: text.trim().to_string(),
            }),
        }
    }
}

fn decode(status: u16, text: &str) -> Result<Value, ClientError> {
    if text.trim().is_empty() {
        return Ok(Value::Null);
    }
    serde_json::from_str(text).map_err(|e| ClientError::Decode {
        status,
        message: e.to_string(),
    })
}
