// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use parking_lot::RwLock;

/// Verifies that a caller controls `subject` at this issuer. A real adapter
/// would exchange an authorization code here; `proof` carries whatever the
/// issuer hands back.
pub trait IdentityProvider: Send + Sync {
    fn issuer(&self) -> &str;
    fn verify(&self, subject: &str, proof: &str) -> bool;
    fn display_name(&self, subject: &str) -> String {
        subject.to_string()
    }
}

/// Shared-secret provider for tests and single-host deployments.
#[derive(Debug)]
pub struct LocalIdentityProvider {
    issuer: String,
    secrets: RwLock<HashMap<String, String>>,
}

impl LocalIdentityProvider {
    pub fn new(issuer: &str) -> Self {
        Self {
            issuer: issuer.to_string(),
            secrets: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_user(self, subject: &str, secret: &str) -> Self {
        self.add_user(subject, secret);
        self
    }

    pub fn add_user(&self, subject: &str, secret: &str) {
        self.secrets.write().insert(subject.to_string(), secret.to_string());
    }
}

impl IdentityProvider for LocalIdentityProvider {
    fn issuer(&self) -> &str {
        &self.issuer
    }

    fn verify(&self, subject: &str, proof: &str) -> bool {
        use sha2::{Digest, Sha256};
        let secrets = self.secrets.read();
        let Some(secret) = secrets.get(subject) else {
            return false;
        };
        // compare digests so timing does not depend on the common prefix
        Sha256::digest(secret.as_bytes()) == Sha256::digest(proof.as_bytes())
    }
}
