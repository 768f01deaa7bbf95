// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub internal_port: u16,
}

/// Reverse-proxy routing table: route path to container endpoint.
#[derive(Debug, Default)]
pub struct ProxyTable {
    routes: RwLock<BTreeMap<String, Endpoint>>,
}

impl ProxyTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the path is already routed.
    pub fn register(&self, route_path: &str, endpoint: Endpoint) -> bool {
        let mut r = self.routes.write();
        if r.contains_key(route_path) {
            return false;
        }
        r.insert(route_path.to_string(), endpoint);
        true
    }

    pub fn remove(&self, route_path: &str) -> Option<Endpoint> {
        self.routes.write().remove(route_path)
    }

    pub fn lookup(&self, route_path: &str) -> Option<Endpoint> {
        self.routes.read().get(route_path).cloned()
    }

    pub fn len(&self) -> usize {
        self.routes.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn routes(&self) -> Vec<String> {
        self.routes.read().keys().cloned().collect()
    }
}
