//! Entity database: constraint queries from belief states and
//! placeholder lexicalization for live chat.
//!
//! On disk a database is a directory of `<domain>_db.json` files, each a
//! JSON array of flat attribute records as distributed with MultiWOZ
//! (`name`, `area`, `pricerange`, `address`, `phone`, `postcode`, ...).
//! Attribute names are lowercased on load (`leaveAt` becomes `leaveat`).
//! Scalar values are kept as text; nested values (locations, price tables)
//! are skipped. Files whose top level is not an array (MultiWOZ's taxi
//! file) are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dialogue::ProvidedResults;
use crate::fuzzy::{fuzzy_equal, is_dontcare, normalize};
use crate::schema::DomainSchema;
use crate::state::BeliefState;

/// Attributes compared by normalized equality rather than fuzzily.
const EXACT_ATTRIBUTES: &[&str] = &["address", "phone", "postcode", "id", "trainid"];

#[derive(Debug, Error)]
pub enum DbError {
    #[error("no database table for domain `{0}`")]
    UnknownDomain(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub domain: String,
    pub attributes: BTreeMap<String, String>,
}

impl Entity {
    pub fn new(domain: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.attributes.insert(key.to_lowercase(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbResult {
    pub domain: String,
    /// Full match cardinality, even when `entities` is truncated.
    pub count: usize,
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub provided_externally: bool,
}

impl DbResult {
    pub fn counted(domain: impl Into<String>, count: usize) -> Self {
        Self {
            domain: domain.into(),
            count,
            entities: Vec::new(),
            provided_externally: false,
        }
    }

    pub fn top(&self) -> Option<&Entity> {
        self.entities.first()
    }

    /// Keeps at most `n` entities; `count` is unchanged.
    pub fn truncated(mut self, n: usize) -> Self {
        self.entities.truncate(n);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Database {
    tables: BTreeMap<String, Vec<Entity>>,
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_table(&mut self, domain: &str, entities: Vec<Entity>) {
        self.tables.insert(domain.to_string(), entities);
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.tables.contains_key(domain)
    }

    pub fn table(&self, domain: &str) -> Option<&[Entity]> {
        self.tables.get(domain).map(Vec::as_slice)
    }

    /// Parses one `<domain>_db.json` payload.
    pub fn parse_table(domain: &str, json: &str, path: &str) -> Result<Option<Vec<Entity>>, DbError> {
        let value: Value = serde_json::from_str(json).map_err(|e| DbError::Parse {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        let Value::Array(records) = value else {
            return Ok(None);
        };
        let mut entities = Vec::with_capacity(records.len());
        for record in records {
            let Value::Object(fields) = record else {
                return Err(DbError::Parse {
                    path: path.to_string(),
                    message: "expected an array of objects".into(),
                });
            };
            let mut e = Entity::new(domain);
            for (k, v) in fields {
                if let Some(s) = scalar(&v) {
                    e.attributes.insert(k.to_lowercase().replace(' ', ""), s);
                }
            }
            entities.push(e);
        }
        Ok(Some(entities))
    }

    /// Loads every `<domain>_db.json` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, DbError> {
        let io = |source| DbError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut db = Database::new();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .collect();
        paths.sort();
        for path in paths {
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(domain) = name.strip_suffix("_db.json") else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|source| DbError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if let Some(entities) = Self::parse_table(domain, &text, &path.display().to_string())? {
                db.insert_table(domain, entities);
            }
        }
        Ok(db)
    }

    /// Entities of `domain` matching every user-specified slot in `state`.
    ///
    /// `dontcare` values, booking slots, non-informable slots and slots the
    /// entity has no attribute for impose no constraint.
    pub fn query(
        &self,
        domain: &str,
        state: &BeliefState,
        schema: Option<&DomainSchema>,
        threshold: f64,
    ) -> Result<DbResult, DbError> {
        let table = self
            .tables
            .get(domain)
            .ok_or_else(|| DbError::UnknownDomain(domain.to_string()))?;
        let constraints = constraints(domain, state, schema);
        let entities: Vec<Entity> = table
            .iter()
            .filter(|e| entity_matches(e, &constraints, threshold))
            .cloned()
            .collect();
        Ok(DbResult {
            domain: domain.to_string(),
            count: entities.len(),
            entities,
            provided_externally: false,
        })
    }
}

/// Slot-value pairs of `state[domain]` that constrain a query.
pub fn constraints<'a>(
    domain: &str,
    state: &'a BeliefState,
    schema: Option<&DomainSchema>,
) -> Vec<(&'a str, &'a str)> {
    let Some(slots) = state.domain(domain) else {
        return Vec::new();
    };
    slots
        .iter()
        .filter(|(_, v)| !is_dontcare(v))
        .filter(|(s, _)| match schema.and_then(|sc| sc.slot(s)) {
            Some(spec) => spec.informable && !spec.booking,
            None => true,
        })
        .map(|(s, v)| (s.as_str(), v.as_str()))
        .collect()
}

/// Whether `value` matches the entity attribute `attr` under the query rules.
pub fn attribute_matches(attr: &str, entity_value: &str, value: &str, threshold: f64) -> bool {
    if EXACT_ATTRIBUTES.contains(&attr) {
        normalize(entity_value) == normalize(value)
    } else {
        fuzzy_equal(entity_value, value, threshold)
    }
}

fn entity_matches(entity: &Entity, constraints: &[(&str, &str)], threshold: f64) -> bool {
    constraints.iter().all(|(slot, value)| match entity.get(slot) {
        Some(attr) => attribute_matches(slot, attr, value, threshold),
        None => true,
    })
}

/// Wraps dataset-provided results. A missing annotation yields an empty
/// result and a warning.
pub fn external_result(domain: &str, provided: Option<&ProvidedResults>) -> (DbResult, Option<String>) {
    match provided {
        Some(p) => {
            let entities = p
                .records
                .iter()
                .map(|r| Entity {
                    domain: domain.to_string(),
                    attributes: r.clone(),
                })
                .collect::<Vec<_>>();
            (
                DbResult {
                    domain: domain.to_string(),
                    count: entities.len(),
                    entities,
                    provided_externally: true,
                },
                None,
            )
        }
        None => (
            DbResult {
                domain: domain.to_string(),
                count: 0,
                entities: Vec::new(),
                provided_externally: true,
            },
            Some("missing-db-annotation".to_string()),
        ),
    }
}

static BRACKETED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[([A-Za-z][A-Za-z0-9_]*)\]").unwrap());

/// Fills `[name]` placeholders from the entity (domain prefix stripped) or
/// from `extras`; unresolved placeholders stay verbatim and are reported.
pub fn lexicalize(
    template: &str,
    entity: Option<&Entity>,
    extras: &BTreeMap<String, String>,
) -> (String, Vec<String>) {
    let mut unresolved = Vec::new();
    let text = BRACKETED
        .replace_all(template, |cap: &regex::Captures<'_>| {
            let name = cap[1].to_lowercase();
            let stripped = name.split_once('_').map(|(_, rest)| rest);
            let from_entity = entity.and_then(|e| {
                stripped
                    .and_then(|s| e.attributes.get(s).filter(|_| name.starts_with(&e.domain)))
                    .or_else(|| e.attributes.get(&name))
            });
            let found = from_entity
                .or_else(|| extras.get(&name))
                .or_else(|| stripped.and_then(|s| extras.get(s)));
            match found {
                Some(v) => v.clone(),
                None => {
                    unresolved.push(format!("unresolved-placeholder:{name}"));
                    cap[0].to_string()
                }
            }
        })
        .into_owned();
    (text, unresolved)
}

/// Deterministic 8-character booking reference for a (session, domain) pair.
pub fn booking_reference(session: &str, domain: &str) -> String {
    let digest = Sha256::digest(format!("{session}\u{0}{domain}").as_bytes());
    hex::encode_upper(&digest[..4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::SlotSpec;

    fn toy() -> Database {
        let mut db = Database::new();
        db.insert_table(
            "hotel",
            vec![
                Entity::new("hotel")
                    .with("name", "alpha lodge")
                    .with("pricerange", "cheap")
                    .with("area", "north"),
                Entity::new("hotel")
                    .with("name", "beta house")
                    .with("pricerange", "cheap")
                    .with("area", "south"),
                Entity::new("hotel")
                    .with("name", "gamma hotel")
                    .with("pricerange", "expensive")
                    .with("area", "centre"),
            ],
        );
        db
    }

    fn st(pairs: &[(&str, &str)]) -> BeliefState {
        let mut s = BeliefState::new();
        for (k, v) in pairs {
            s.insert("hotel", k, v);
        }
        s
    }

    #[test]
    fn query_examples() {
        let db = toy();
        let q = |pairs: &[(&str, &str)]| db.query("hotel", &st(pairs), None, 0.9).unwrap().count;
        assert_eq!(q(&[("pricerange", "cheap")]), 2);
        assert_eq!(q(&[]), 3);
        assert_eq!(q(&[("pricerange", "dontcare"), ("area", "north")]), 1);
        assert_eq!(q(&[("pricerange", "Cheap ")]), 2);
        // booking-like slot without an attribute imposes nothing
        assert_eq!(q(&[("bookpeople", "2")]), 3);
    }

    #[test]
    fn booking_slots_excluded_via_schema() {
        let mut db = Database::new();
        db.insert_table("train", vec![Entity::new("train").with("day", "monday")]);
        let schema = DomainSchema::new("train", "").with_slot(SlotSpec::new("day", "").booking());
        let mut s = BeliefState::new();
        s.insert("train", "day", "friday");
        assert_eq!(db.query("train", &s, Some(&schema), 0.9).unwrap().count, 1);
        assert_eq!(db.query("train", &s, None, 0.9).unwrap().count, 0);
    }

    #[test]
    fn unknown_domain_is_error() {
        assert!(matches!(
            toy().query("spaceship", &BeliefState::new(), None, 0.9),
            Err(DbError::UnknownDomain(_))
        ));
    }

    #[test]
    fn exact_attributes_are_not_fuzzy() {
        assert!(!attribute_matches("phone", "01223 356354", "01223 356355", 0.5));
        assert!(attribute_matches("name", "alpha lodge", "alpha lodg", 0.9));
    }

    #[test]
    fn lexicalize_examples() {
        let e = Entity::new("hotel").with("address", "123 Northfolk Road");
        let none = BTreeMap::new();
        assert_eq!(
            lexicalize("It is [hotel_address].", Some(&e), &none).0,
            "It is 123 Northfolk Road."
        );
        assert_eq!(lexicalize("plain", Some(&e), &none), ("plain".to_string(), vec![]));
        let mut extras = BTreeMap::new();
        extras.insert("reference".to_string(), "ABC123".to_string());
        assert_eq!(lexicalize("[reference]", None, &extras).0, "ABC123");
        let (text, warnings) = lexicalize("call [hotel_phone]", Some(&e), &none);
        assert_eq!(text, "call [hotel_phone]");
        assert_eq!(warnings, vec!["unresolved-placeholder:hotel_phone"]);
    }

    #[test]
    fn external_results() {
        let mut p = ProvidedResults::default();
        for i in 0..4 {
            let mut r = BTreeMap::new();
            r.insert("restaurant_name".to_string(), format!("r{i}"));
            p.records.push(r);
        }
        let (res, w) = external_result("restaurants", Some(&p));
        assert_eq!(res.count, 4);
        assert!(res.provided_externally && w.is_none());
        let (res, w) = external_result("restaurants", None);
        assert_eq!(res.count, 0);
        assert!(w.is_some());
    }

    #[test]
    fn load_table_shapes() {
        let t = Database::parse_table(
            "hotel",
            r#"[{"name": "a", "leaveAt": "10:00", "stars": 4, "location": [1.0, 2.0]}]"#,
            "x",
        )
        .unwrap()
        .unwrap();
        assert_eq!(t[0].get("leaveat"), Some("10:00"));
        assert_eq!(t[0].get("stars"), Some("4"));
        assert_eq!(t[0].get("location"), None);
        assert!(Database::parse_table("taxi", r#"{"taxi_colors": []}"#, "x").unwrap().is_none());
    }

    #[test]
    fn references_are_stable() {
        let a = booking_reference("s1", "hotel");
        assert_eq!(a.len(), 8);
        assert_eq!(a, booking_reference("s1", "hotel"));
        assert_ne!(a, booking_reference("s2", "hotel"));
    }
}
