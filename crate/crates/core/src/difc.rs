//! Secrecy labels, principals, declassification and embargoed tags.
//!
//! A label is a set of secrecy tag names. Data may flow to a principal only
//! when every tag still in effect is part of the principal's clearance. Tags
//! may carry an embargo instant after which they no longer restrict flow.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_json;

#[derive(Debug, thiserror::Error)]
pub enum DifcError {
    /// Deliberately carries no tag names.
    #[error("not authorized")]
    Unauthorized,
    #[error("registry i/o: {0}")]
    Io(#[from] io::Error),
    #[error("registry format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("registry invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label {
    pub secrecy: BTreeSet<String>,
}

impl Label {
    pub fn public() -> Self {
        Label::default()
    }

    pub fn from_tags<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Label { secrecy: tags.into_iter().map(Into::into).collect() }
    }

    pub fn is_public(&self) -> bool {
        self.secrecy.is_empty()
    }

    pub fn join(&self, other: &Label) -> Label {
        Label { secrecy: self.secrecy.union(&other.secrecy).cloned().collect() }
    }

    pub fn is_subset(&self, other: &Label) -> bool {
        self.secrecy.is_subset(&other.secrecy)
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.secrecy.contains(tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.secrecy.iter().map(String::as_str)
    }
}

/// Join over any number of labels; the empty join is public.
pub fn join_all<'a, I: IntoIterator<Item = &'a Label>>(labels: I) -> Label {
    labels.into_iter().fold(Label::public(), |acc, l| acc.join(l))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub name: String,
    #[serde(default)]
    pub embargo_until: Option<DateTime<Utc>>,
}

impl Tag {
    pub fn new(name: impl Into<String>) -> Self {
        Tag { name: name.into(), embargo_until: None }
    }

    pub fn embargoed(name: impl Into<String>, until: DateTime<Utc>) -> Self {
        Tag { name: name.into(), embargo_until: Some(until) }
    }

    pub fn expired_at(&self, at: DateTime<Utc>) -> bool {
        self.embargo_until.is_some_and(|t| t <= at)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: String,
    /// Bearer token used by the service to authenticate this principal.
    #[serde(default)]
    pub token: Option<String>,
    pub clearance: BTreeSet<String>,
    #[serde(default)]
    pub declassify_caps: BTreeSet<String>,
}

impl Principal {
    pub fn new<I, S>(id: impl Into<String>, clearance: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Principal {
            id: id.into(),
            token: None,
            clearance: clearance.into_iter().map(Into::into).collect(),
            declassify_caps: BTreeSet::new(),
        }
    }

    pub fn with_caps<I, S>(mut self, caps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.declassify_caps = caps.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }
}

/// Known tags and their embargoes. Tags absent from the registry never expire.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagSet {
    tags: BTreeMap<String, Tag>,
}

impl TagSet {
    pub fn new<I: IntoIterator<Item = Tag>>(tags: I) -> Self {
        TagSet { tags: tags.into_iter().map(|t| (t.name.clone(), t)).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tag> {
        self.tags.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tag> {
        self.tags.values()
    }

    pub fn insert(&mut self, tag: Tag) {
        self.tags.insert(tag.name.clone(), tag);
    }
}

/// Drops every tag whose embargo has passed at `at`.
pub fn effective_label(label: &Label, tags: &TagSet, at: DateTime<Utc>) -> Label {
    Label {
        secrecy: label
            .secrecy
            .iter()
            .filter(|name| !tags.get(name).is_some_and(|t| t.expired_at(at)))
            .cloned()
            .collect(),
    }
}

pub fn can_flow(label: &Label, principal: &Principal, tags: &TagSet, at: DateTime<Utc>) -> bool {
    effective_label(label, tags, at).secrecy.is_subset(&principal.clearance)
}

/// Record of a capability-gated tag removal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Declassification {
    pub principal: String,
    pub tags: BTreeSet<String>,
}

pub fn declassify(
    label: &Label,
    principal: &Principal,
    tags: &BTreeSet<String>,
) -> Result<(Label, Declassification), DifcError> {
    if !tags.is_subset(&principal.declassify_caps) {
        return Err(DifcError::Unauthorized);
    }
    let out = Label { secrecy: label.secrecy.difference(tags).cloned().collect() };
    let event = Declassification { principal: principal.id.clone(), tags: tags.clone() };
    Ok((out, event))
}

/// Tag and principal registry, persisted as `tags.json` and `principals.json`.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    pub tags: TagSet,
    pub principals: Vec<Principal>,
}

impl Registry {
    pub fn load(dir: &Path) -> Result<Self, DifcError> {
        let read_list = |file: &str| -> Result<Option<Vec<u8>>, DifcError> {
            match fs::read(dir.join(file)) {
                Ok(b) => Ok(Some(b)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let tags: Vec<Tag> = match read_list("tags.json")? {
            Some(b) => serde_json::from_slice(&b)?,
            None => Vec::new(),
        };
        let principals: Vec<Principal> = match read_list("principals.json")? {
            Some(b) => serde_json::from_slice(&b)?,
            None => Vec::new(),
        };
        let reg = Registry { tags: TagSet::new(tags), principals };
        reg.validate()?;
        Ok(reg)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DifcError> {
        fs::create_dir_all(dir)?;
        let tags: Vec<&Tag> = self.tags.iter().collect();
        let mut principals = self.principals.clone();
        principals.sort_by(|a, b| a.id.cmp(&b.id));
        fs::write(dir.join("tags.json"), to_canonical_json(&tags)?)?;
        fs::write(dir.join("principals.json"), to_canonical_json(&principals)?)?;
        Ok(())
    }

    fn validate(&self) -> Result<(), DifcError> {
        let mut ids = BTreeSet::new();
        for p in &self.principals {
            if !ids.insert(p.id.as_str()) {
                return Err(DifcError::Invalid(format!("duplicate principal {}", p.id)));
            }
            if let Some(unknown) = p.declassify_caps.iter().find(|c| self.tags.get(c).is_none()) {
                return Err(DifcError::Invalid(format!(
                    "principal {} holds a capability for an unregistered tag {unknown}",
                    p.id
                )));
            }
        }
        Ok(())
    }

    pub fn principal(&self, id: &str) -> Option<&Principal> {
        self.principals.iter().find(|p| p.id == id)
    }

    pub fn by_token(&self, token: &str) -> Option<&Principal> {
        self.principals.iter().find(|p| p.token.as_deref() == Some(token))
    }
}
