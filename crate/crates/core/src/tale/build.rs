// SPDX-License-Identifier: Apache-2.0

//! Environment image builders.

use std::collections::BTreeMap;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::Recipe;

/// Turns a recipe into an image digest. `log` receives build output lines.
pub trait Builder: Send + Sync {
    fn build(&self, recipe: &Recipe, log: &mut dyn FnMut(&str)) -> Result<String, String>;
}

/// Content digest of a recipe under the simulated builder: sha256 over
/// `repo_url`, `commit_id` and the canonical JSON of `config`, each
/// separated by a zero byte.
pub fn simulated_digest(repo_url: &str, commit_id: &str, config: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update(repo_url.as_bytes());
    h.update([0u8]);
    h.update(commit_id.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_string(config).expect("string map").as_bytes());
    format!("sha256:{}", hex::encode(h.finalize()))
}

/// Sleeps for `delay`, then yields [`simulated_digest`]. A config entry
/// `fail = "true"` makes the build fail.
#[derive(Debug, Clone)]
pub struct SimulatedBuilder {
    pub delay: Duration,
}

impl SimulatedBuilder {
    pub fn new(delay: Duration) -> Self {
        Self { delay }
    }
}

impl Default for SimulatedBuilder {
    fn default() -> Self {
        Self::new(Duration::from_millis(200))
    }
}

impl Builder for SimulatedBuilder {
    fn build(&self, recipe: &Recipe, log: &mut dyn FnMut(&str)) -> Result<String, String> {
        log(&format!("fetching {} at {}", recipe.repo_url, recipe.commit_id));
        std::thread::sleep(self.delay);
        if recipe.config.get("fail").map(String::as_str) == Some("true") {
            log("build step failed: simulated failure requested by config");
            return Err("simulated failure requested by config".into());
        }
        let digest = simulated_digest(&recipe.repo_url, &recipe.commit_id, &recipe.config);
        log(&format!("wrote image {digest}"));
        Ok(digest)
    }
}
