// SPDX-License-Identifier: Apache-2.0

//! Identities, linked identity sets, scoped bearer tokens with delegation,
//! and per-resource access control lists.

mod provider;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::error::ErrorCode;
use crate::store::{Store, StoreError};

pub use provider::{IdentityProvider, LocalIdentityProvider};

const IDENTITIES: &str = "auth.identities";
const SETS: &str = "auth.sets";
const TOKENS: &str = "auth.tokens";
const ACLS: &str = "auth.acls";

pub const TOKEN_TTL: Duration = Duration::hours(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    DataRead,
    DataWrite,
    TaleWrite,
    InstanceLaunch,
    Publish,
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::DataRead,
        Scope::DataWrite,
        Scope::TaleWrite,
        Scope::InstanceLaunch,
        Scope::Publish,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::DataRead => "data:read",
            Scope::DataWrite => "data:write",
            Scope::TaleWrite => "tale:write",
            Scope::InstanceLaunch => "instance:launch",
            Scope::Publish => "publish",
        }
    }

    pub fn all() -> BTreeSet<Scope> {
        Self::ALL.into_iter().collect()
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = AuthError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| AuthError::UnknownScope(s.to_string()))
    }
}

impl Serialize for Scope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What a request wants to do to a resource; each action needs one scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    ReadData,
    WriteData,
    WriteTale,
    Launch,
    Publish,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::ReadData,
        Action::WriteData,
        Action::WriteTale,
        Action::Launch,
        Action::Publish,
    ];

    pub fn required_scope(self) -> Scope {
        match self {
            Action::ReadData => Scope::DataRead,
            Action::WriteData => Scope::DataWrite,
            Action::WriteTale => Scope::TaleWrite,
            Action::Launch => Scope::InstanceLaunch,
            Action::Publish => Scope::Publish,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuthError {
    #[error("unknown identity issuer {0:?}")]
    UnknownIssuer(String),
    #[error("bad credentials")]
    BadCredentials,
    #[error("token is invalid: {0}")]
    InvalidToken(DenyReason),
    #[error("unknown token")]
    UnknownToken,
    #[error("requested scopes exceed the parent token: {0}")]
    ScopeEscalation(String),
    #[error("unknown scope {0:?}")]
    UnknownScope(String),
    #[error("unknown identity {0}")]
    UnknownIdentity(String),
    #[error("issuer {0:?} already registered")]
    DuplicateIssuer(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ErrorCode for AuthError {
    fn code(&self) -> &'static str {
        match self {
            AuthError::UnknownIssuer(_) => "UnknownIssuer",
            AuthError::BadCredentials => "BadCredentials",
            AuthError::InvalidToken(_) => "InvalidToken",
            AuthError::UnknownToken => "UnknownToken",
            AuthError::ScopeEscalation(_) => "ScopeEscalation",
            AuthError::UnknownScope(_) => "UnknownScope",
            AuthError::UnknownIdentity(_) => "UnknownIdentity",
            AuthError::DuplicateIssuer(_) => "DuplicateIssuer",
            AuthError::Store(_) => "StorageError",
        }
    }
}

pub type Result<T, E = AuthError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenyReason {
    UnknownToken,
    Expired,
    Revoked,
    WrongAudience,
    InsufficientScope,
    NoAcl,
    Forbidden,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::UnknownToken => "UnknownToken",
            DenyReason::Expired => "Expired",
            DenyReason::Revoked => "Revoked",
            DenyReason::WrongAudience => "WrongAudience",
            DenyReason::InsufficientScope => "InsufficientScope",
            DenyReason::NoAcl => "NoAcl",
            DenyReason::Forbidden => "Forbidden",
        }
    }

    /// True when the token itself is unusable, as opposed to lacking rights.
    pub fn is_authentication(self) -> bool {
        matches!(
            self,
            DenyReason::UnknownToken | DenyReason::Expired | DenyReason::Revoked | DenyReason::WrongAudience
        )
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(self) -> bool {
        matches!(self, Decision::Allow)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub id: String,
    pub issuer: String,
    pub subject: String,
    pub display_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySet {
    pub id: String,
    pub members: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub value: String,
    pub subject: String,
    pub scopes: BTreeSet<Scope>,
    pub issued: DateTime<Utc>,
    pub expiry: DateTime<Utc>,
    pub parent: Option<String>,
    #[serde(default)]
    pub audience: Option<String>,
    #[serde(default)]
    pub revoked: bool,
}

/// Who holds a validated token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub identity: String,
    pub identities: BTreeSet<String>,
    pub scopes: BTreeSet<Scope>,
    pub token: String,
}

impl Principal {
    pub fn has_scope(&self, s: Scope) -> bool {
        self.scopes.contains(&s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acl {
    pub owner: String,
    #[serde(default)]
    pub grants: BTreeMap<String, BTreeSet<Action>>,
    /// Anyone with a valid token may read.
    #[serde(default)]
    pub public_read: bool,
}

impl Acl {
    pub fn owned_by(owner: &str) -> Self {
        Self {
            owner: owner.to_string(),
            ..Self::default()
        }
    }

    fn grants(&self, identity: &str, action: Action) -> bool {
        identity == self.owner || self.grants.get(identity).is_some_and(|a| a.contains(&action))
    }
}

/// Issuer, subject and the proof the issuer's provider checks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub issuer: String,
    pub subject: String,
    pub proof: String,
}

impl Credentials {
    pub fn new(issuer: &str, subject: &str, proof: &str) -> Self {
        Self {
            issuer: issuer.into(),
            subject: subject.into(),
            proof: proof.into(),
        }
    }
}

#[derive(Default)]
struct State {
    identities: HashMap<String, Identity>,
    by_subject: HashMap<(String, String), String>,
    sets: HashMap<String, IdentitySet>,
    set_of: HashMap<String, String>,
    tokens: HashMap<String, Token>,
    children: HashMap<String, Vec<String>>,
    acls: HashMap<String, Acl>,
}

pub struct AuthService {
    state: RwLock<State>,
    providers: RwLock<BTreeMap<String, Arc<dyn IdentityProvider>>>,
    store: Arc<Store>,
    clock: SharedClock,
}

impl fmt::Debug for AuthService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.state.read();
        f.debug_struct("AuthService")
            .field("identities", &s.identities.len())
            .field("tokens", &s.tokens.len())
            .field("acls", &s.acls.len())
            .finish()
    }
}

fn random_value() -> String {
    hex::encode(rand::random::<[u8; 32]>())
}

impl AuthService {
    pub fn open(store: Arc<Store>, clock: SharedClock) -> Result<Self> {
        let mut st = State::default();
        for (_, i) in store.scan::<Identity>(IDENTITIES)? {
            st.by_subject
                .insert((i.issuer.clone(), i.subject.clone()), i.id.clone());
            st.identities.insert(i.id.clone(), i);
        }
        for (_, s) in store.scan::<IdentitySet>(SETS)? {
            for m in &s.members {
                st.set_of.insert(m.clone(), s.id.clone());
            }
            st.sets.insert(s.id.clone(), s);
        }
        for (_, t) in store.scan::<Token>(TOKENS)? {
            if let Some(p) = &t.parent {
                st.children.entry(p.clone()).or_default().push(t.value.clone());
            }
            st.tokens.insert(t.value.clone(), t);
        }
        for (k, a) in store.scan::<Acl>(ACLS)? {
            st.acls.insert(k, a);
        }
        Ok(Self {
            state: RwLock::new(st),
            providers: RwLock::new(BTreeMap::new()),
            store,
            clock,
        })
    }

    pub fn in_memory(clock: SharedClock) -> Self {
        Self::open(Arc::new(Store::in_memory()), clock).expect("empty store")
    }

    pub fn register_provider(&self, provider: Arc<dyn IdentityProvider>) -> Result<()> {
        let mut p = self.providers.write();
        let issuer = provider.issuer().to_string();
        if p.contains_key(&issuer) {
            return Err(AuthError::DuplicateIssuer(issuer));
        }
        p.insert(issuer, provider);
        Ok(())
    }

    pub fn issuers(&self) -> Vec<String> {
        self.providers.read().keys().cloned().collect()
    }

    fn verify(&self, c: &Credentials) -> Result<String> {
        let provider = self
            .providers
            .read()
            .get(&c.issuer)
            .cloned()
            .ok_or_else(|| AuthError::UnknownIssuer(c.issuer.clone()))?;
        if !provider.verify(&c.subject, &c.proof) {
            return Err(AuthError::BadCredentials);
        }
        Ok(provider.display_name(&c.subject))
    }

    /// Identity for (issuer, subject), created with a singleton set on
    /// first sight.
    fn ensure_identity(&self, st: &mut State, c: &Credentials, display_name: String) -> Result<Identity> {
        if let Some(id) = st.by_subject.get(&(c.issuer.clone(), c.subject.clone())) {
            return Ok(st.identities[id].clone());
        }
        let identity = Identity {
            id: uuid::Uuid::new_v4().simple().to_string(),
            issuer: c.issuer.clone(),
            subject: c.subject.clone(),
            display_name,
        };
        let set = IdentitySet {
            id: uuid::Uuid::new_v4().simple().to_string(),
            members: [identity.id.clone()].into(),
        };
        self.store.put(IDENTITIES, &identity.id, &identity)?;
        self.store.put(SETS, &set.id, &set)?;
        st.by_subject
            .insert((c.issuer.clone(), c.subject.clone()), identity.id.clone());
        st.set_of.insert(identity.id.clone(), set.id.clone());
        st.sets.insert(set.id.clone(), set);
        st.identities.insert(identity.id.clone(), identity.clone());
        Ok(identity)
    }

    /// Verifies the credentials and issues a one-hour token. `scopes` of
    /// `None` grants the full vocabulary.
    pub fn authenticate(&self, c: &Credentials, scopes: Option<BTreeSet<Scope>>) -> Result<Token> {
        let display = self.verify(c)?;
        let mut st = self.state.write();
        let identity = self.ensure_identity(&mut st, c, display)?;
        let now = self.clock.now();
        let token = Token {
            value: random_value(),
            subject: identity.id,
            scopes: scopes.unwrap_or_else(Scope::all),
            issued: now,
            expiry: now + TOKEN_TTL,
            parent: None,
            audience: None,
            revoked: false,
        };
        self.store.put(TOKENS, &token.value, &token)?;
        st.tokens.insert(token.value.clone(), token.clone());
        Ok(token)
    }

    /// Merges the identity sets of `a` and `b`. Both proofs must verify;
    /// on failure nothing changes.
    pub fn link_identities(&self, a: &Credentials, b: &Credentials) -> Result<IdentitySet> {
        let da = self.verify(a)?;
        let db = self.verify(b)?;
        let mut st = self.state.write();
        let ia = self.ensure_identity(&mut st, a, da)?;
        let ib = self.ensure_identity(&mut st, b, db)?;
        let sa = st.set_of[&ia.id].clone();
        let sb = st.set_of[&ib.id].clone();
        if sa == sb {
            return Ok(st.sets[&sa].clone());
        }
        let (keep, gone) = if st.sets[&sa].members.len() >= st.sets[&sb].members.len() {
            (sa, sb)
        } else {
            (sb, sa)
        };
        let moved = st.sets.remove(&gone).expect("set exists").members;
        let mut merged = st.sets[&keep].clone();
        merged.members.extend(moved.iter().cloned());
        self.store.put(SETS, &keep, &merged)?;
        self.store.delete(SETS, &gone)?;
        for m in moved {
            st.set_of.insert(m, keep.clone());
        }
        st.sets.insert(keep, merged.clone());
        Ok(merged)
    }

    pub fn identity(&self, id: &str) -> Result<Identity> {
        self.state
            .read()
            .identities
            .get(id)
            .cloned()
            .ok_or_else(|| AuthError::UnknownIdentity(id.to_string()))
    }

    pub fn identity_by_subject(&self, issuer: &str, subject: &str) -> Option<Identity> {
        let st = self.state.read();
        let id = st.by_subject.get(&(issuer.to_string(), subject.to_string()))?;
        st.identities.get(id).cloned()
    }

    pub fn identity_set(&self, identity: &str) -> Result<IdentitySet> {
        let st = self.state.read();
        let set = st
            .set_of
            .get(identity)
            .ok_or_else(|| AuthError::UnknownIdentity(identity.to_string()))?;
        Ok(st.sets[set].clone())
    }

    pub fn token(&self, value: &str) -> Option<Token> {
        self.state.read().tokens.get(value).cloned()
    }

    fn check_chain(st: &State, value: &str, now: DateTime<Utc>) -> std::result::Result<Token, DenyReason> {
        let token = st.tokens.get(value).ok_or(DenyReason::UnknownToken)?;
        let mut cur = Some(token);
        while let Some(t) = cur {
            if t.revoked {
                return Err(DenyReason::Revoked);
            }
            if now >= t.expiry {
                return Err(DenyReason::Expired);
            }
            cur = t.parent.as_ref().and_then(|p| st.tokens.get(p));
        }
        Ok(token.clone())
    }

    /// Checks the token and, if `audience` is given, that the token is
    /// either unbound or bound to it.
    pub fn validate(&self, value: &str, audience: Option<&str>) -> std::result::Result<Principal, DenyReason> {
        let st = self.state.read();
        let token = Self::check_chain(&st, value, self.clock.now())?;
        if let (Some(want), Some(got)) = (audience, token.audience.as_deref()) {
            if want != got {
                return Err(DenyReason::WrongAudience);
            }
        }
        let identities = st
            .set_of
            .get(&token.subject)
            .and_then(|s| st.sets.get(s))
            .map(|s| s.members.clone())
            .unwrap_or_else(|| [token.subject.clone()].into());
        Ok(Principal {
            identity: token.subject,
            identities,
            scopes: token.scopes,
            token: token.value,
        })
    }

    /// Allow iff the token is live, carries the action's scope and the
    /// resource's ACL grants the action to some identity linked to the
    /// token's subject.
    pub fn authorize(&self, token: &str, resource: &str, action: Action) -> Decision {
        self.authorize_nearest(token, &[resource], action)
    }

    /// Like [`authorize`](Self::authorize), using the first resource in
    /// `chain` that has an ACL (nearest ancestor first).
    pub fn authorize_nearest(&self, token: &str, chain: &[&str], action: Action) -> Decision {
        let principal = match self.validate(token, None) {
            Ok(p) => p,
            Err(r) => return Decision::Deny(r),
        };
        self.authorize_principal(&principal, chain, action)
    }

    pub fn authorize_principal(&self, principal: &Principal, chain: &[&str], action: Action) -> Decision {
        if !principal.has_scope(action.required_scope()) {
            return Decision::Deny(DenyReason::InsufficientScope);
        }
        let st = self.state.read();
        let Some(acl) = chain.iter().find_map(|r| st.acls.get(*r)) else {
            return Decision::Deny(DenyReason::NoAcl);
        };
        if action == Action::ReadData && acl.public_read {
            return Decision::Allow;
        }
        if principal.identities.iter().any(|i| acl.grants(i, action)) {
            Decision::Allow
        } else {
            Decision::Deny(DenyReason::Forbidden)
        }
    }

    /// Issues a child token for `audience` carrying a subset of the
    /// parent's scopes and expiring no later than the parent.
    pub fn delegate(&self, parent: &str, audience: &str, scopes: BTreeSet<Scope>) -> Result<Token> {
        let mut st = self.state.write();
        let now = self.clock.now();
        let p = Self::check_chain(&st, parent, now).map_err(AuthError::InvalidToken)?;
        let extra: Vec<&str> = scopes.difference(&p.scopes).map(|s| s.as_str()).collect();
        if !extra.is_empty() {
            return Err(AuthError::ScopeEscalation(extra.join(", ")));
        }
        let token = Token {
            value: random_value(),
            subject: p.subject.clone(),
            scopes,
            issued: now,
            expiry: (now + TOKEN_TTL).min(p.expiry),
            parent: Some(p.value.clone()),
            audience: Some(audience.to_string()),
            revoked: false,
        };
        self.store.put(TOKENS, &token.value, &token)?;
        st.children.entry(p.value).or_default().push(token.value.clone());
        st.tokens.insert(token.value.clone(), token.clone());
        Ok(token)
    }

    /// Revokes the token and every token delegated from it.
    pub fn revoke(&self, value: &str) -> Result<usize> {
        let mut st = self.state.write();
        if !st.tokens.contains_key(value) {
            return Err(AuthError::UnknownToken);
        }
        let mut stack = vec![value.to_string()];
        let mut count = 0;
        while let Some(v) = stack.pop() {
            if let Some(kids) = st.children.get(&v) {
                stack.extend(kids.iter().cloned());
            }
            let t = st.tokens.get_mut(&v).expect("indexed token");
            if !t.revoked {
                t.revoked = true;
                count += 1;
                let t = t.clone();
                self.store.put(TOKENS, &t.value, &t)?;
            }
        }
        Ok(count)
    }

    pub fn set_acl(&self, resource: &str, acl: Acl) -> Result<()> {
        let mut st = self.state.write();
        self.store.put(ACLS, resource, &acl)?;
        st.acls.insert(resource.to_string(), acl);
        Ok(())
    }

    pub fn acl(&self, resource: &str) -> Option<Acl> {
        self.state.read().acls.get(resource).cloned()
    }

    pub fn grant(&self, resource: &str, identity: &str, actions: &[Action]) -> Result<Acl> {
        let mut acl = self.acl(resource).unwrap_or_else(|| Acl::owned_by(identity));
        acl.grants
            .entry(identity.to_string())
            .or_default()
            .extend(actions.iter().copied());
        self.set_acl(resource, acl.clone())?;
        Ok(acl)
    }

    pub fn remove_acl(&self, resource: &str) -> Result<()> {
        let mut st = self.state.write();
        if st.acls.remove(resource).is_some() {
            self.store.delete(ACLS, resource)?;
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.state.read().tokens.len()
    }
}
