//! Source/target schemas, ground-truth mappings and the textual renderings
//! used in prompts and retrieval documents.
//!
//! Identity inside the crate is always the `(table, attribute)` pair. The
//! dashed `table-attribute(type)` key is only a rendering; [`KeyIndex`] maps
//! renderings back to references.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub data_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub attributes: Vec<Attribute>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub tables: Vec<Table>,
}

/// A `(table, attribute)` pair. Serialized as `"table.attribute"`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeRef {
    pub table: String,
    pub attribute: String,
}

impl AttributeRef {
    pub fn new(table: impl Into<String>, attribute: impl Into<String>) -> Self {
        AttributeRef {
            table: table.into(),
            attribute: attribute.into(),
        }
    }
}

impl fmt::Display for AttributeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.attribute)
    }
}

impl FromStr for AttributeRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once('.') {
            Some((t, a)) if !t.is_empty() && !a.is_empty() && !a.contains('.') => {
                Ok(AttributeRef::new(t, a))
            }
            _ => Err(Error::parse(
                "attribute reference",
                format!("expected `table.attribute`, got `{s}`"),
            )),
        }
    }
}

impl Serialize for AttributeRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AttributeRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Schema {
    pub fn from_json_str(text: &str) -> Result<Schema> {
        let schema: Schema =
            serde_json::from_str(text).map_err(|e| Error::parse("schema json", e))?;
        schema.validate()?;
        Ok(schema)
    }

    /// Checks every structural invariant: unique, non-empty names without
    /// `.`/`,`, no empty tables, and an injective key rendering.
    pub fn validate(&self) -> Result<()> {
        let mut tables = HashSet::new();
        let mut keys = HashMap::new();
        for table in &self.tables {
            check_name("table", &table.name)?;
            if !tables.insert(table.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate table `{}` in schema `{}`",
                    table.name, self.name
                )));
            }
            if table.attributes.is_empty() {
                return Err(Error::Validation(format!(
                    "table `{}` has no attributes",
                    table.name
                )));
            }
            let mut attrs = HashSet::new();
            for attr in &table.attributes {
                check_name("attribute", &attr.name)?;
                if !attrs.insert(attr.name.as_str()) {
                    return Err(Error::Validation(format!(
                        "duplicate attribute `{}.{}`",
                        table.name, attr.name
                    )));
                }
                let key = normalize_key(&key_string(table, attr));
                let this = AttributeRef::new(&table.name, &attr.name);
                if let Some(prev) = keys.insert(key.clone(), this.clone()) {
                    return Err(Error::Validation(format!(
                        "attributes {prev} and {this} render to the same key `{key}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn lookup(&self, r: &AttributeRef) -> Option<(&Table, &Attribute)> {
        let table = self.table(&r.table)?;
        let attr = table.attributes.iter().find(|a| a.name == r.attribute)?;
        Some((table, attr))
    }

    pub fn resolve(&self, r: &AttributeRef) -> Result<(&Table, &Attribute)> {
        self.lookup(r)
            .ok_or_else(|| Error::UnresolvedRef(format!("{r} (schema `{}`)", self.name)))
    }

    pub fn contains(&self, r: &AttributeRef) -> bool {
        self.lookup(r).is_some()
    }

    /// All attribute references in table order, then attribute order.
    pub fn refs(&self) -> impl Iterator<Item = AttributeRef> + '_ {
        self.tables.iter().flat_map(|t| {
            t.attributes
                .iter()
                .map(move |a| AttributeRef::new(&t.name, &a.name))
        })
    }

    pub fn attribute_count(&self) -> usize {
        self.tables.iter().map(|t| t.attributes.len()).sum()
    }

    /// `table-attribute(data_type)`
    pub fn render_key(&self, r: &AttributeRef) -> Result<String> {
        let (table, attr) = self.resolve(r)?;
        Ok(key_string(table, attr))
    }

    /// `<key>: Table <t> details-<table desc>, Attribute <a> details -<attr desc>`,
    /// or just the key when both descriptions are empty.
    pub fn render_query(&self, r: &AttributeRef) -> Result<String> {
        let (table, attr) = self.resolve(r)?;
        Ok(query_string(table, attr))
    }

    /// Inverse of [`Schema::render_key`].
    pub fn parse_key(&self, key: &str) -> Option<AttributeRef> {
        let wanted = normalize_key(key);
        self.tables.iter().find_map(|t| {
            t.attributes
                .iter()
                .find(|a| normalize_key(&key_string(t, a)) == wanted)
                .map(|a| AttributeRef::new(&t.name, &a.name))
        })
    }

    pub fn key_index(&self) -> KeyIndex {
        KeyIndex::new(self)
    }
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.trim().is_empty() {
        return Err(Error::Validation(format!("empty {kind} name")));
    }
    if name.contains('.') || name.contains(',') {
        return Err(Error::Validation(format!(
            "{kind} name `{name}` must not contain `.` or `,`"
        )));
    }
    Ok(())
}

fn key_string(table: &Table, attr: &Attribute) -> String {
    format!("{}-{}({})", table.name, attr.name, attr.data_type)
}

fn query_string(table: &Table, attr: &Attribute) -> String {
    let key = key_string(table, attr);
    if table.description.is_empty() && attr.description.is_empty() {
        return key;
    }
    format!(
        "{key}: Table {} details-{}, Attribute {} details -{}",
        table.name, table.description, attr.name, attr.description
    )
}

/// Canonical form used to match model-emitted key strings: surrounding
/// quotes and brackets stripped, all whitespace removed.
pub fn normalize_key(s: &str) -> String {
    let trimmed = s
        .trim()
        .trim_matches(|c: char| matches!(c, '\'' | '"' | '`' | '[' | ']') || c.is_whitespace());
    trimmed.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Lookup from normalized rendered keys to attribute references.
#[derive(Clone, Debug)]
pub struct KeyIndex {
    by_key: HashMap<String, AttributeRef>,
}

impl KeyIndex {
    pub fn new(schema: &Schema) -> Self {
        let mut by_key = HashMap::new();
        for t in &schema.tables {
            for a in &t.attributes {
                by_key.insert(
                    normalize_key(&key_string(t, a)),
                    AttributeRef::new(&t.name, &a.name),
                );
            }
        }
        KeyIndex { by_key }
    }

    /// Exact normalized lookup, then a retry with unbalanced parentheses
    /// closed (`t-a(bigint` → `t-a(bigint)`).
    pub fn get(&self, key: &str) -> Option<&AttributeRef> {
        let mut norm = normalize_key(key);
        if let Some(r) = self.by_key.get(&norm) {
            return Some(r);
        }
        let open = norm.matches('(').count();
        let close = norm.matches(')').count();
        if open <= close {
            return None;
        }
        norm.extend(std::iter::repeat_n(')', open - close));
        self.by_key.get(&norm)
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Schema::from_json_str(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub source: AttributeRef,
    pub target: Option<AttributeRef>,
}

/// m:1 gold mapping; one entry per source attribute, `None` for no match.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingSet {
    pub entries: Vec<MappingEntry>,
}

impl MappingSet {
    pub fn new(entries: Vec<MappingEntry>, source: &Schema, target: &Schema) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            source.resolve(&e.source)?;
            if let Some(t) = &e.target {
                target.resolve(t)?;
            }
            if !seen.insert(&e.source) {
                return Err(Error::Validation(format!(
                    "duplicate ground-truth entry for {}",
                    e.source
                )));
            }
        }
        Ok(MappingSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `None` when the source is absent; `Some(None)` for a NULL target.
    pub fn target_of(&self, source: &AttributeRef) -> Option<Option<&AttributeRef>> {
        self.entries
            .iter()
            .find(|e| &e.source == source)
            .map(|e| e.target.as_ref())
    }

    pub fn as_map(&self) -> HashMap<&AttributeRef, Option<&AttributeRef>> {
        self.entries
            .iter()
            .map(|e| (&e.source, e.target.as_ref()))
            .collect()
    }

    pub fn parse_csv(text: &str, source: &Schema, target: &Schema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse("ground truth csv", e))?;
            if record.len() != 2 {
                return Err(Error::parse(
                    "ground truth csv",
                    format!("line {}: expected 2 fields, got {}", i + 1, record.len()),
                ));
            }
            if i == 0 && &record[0] == "source" && &record[1] == "target" {
                continue;
            }
            let src: AttributeRef = record[0].parse()?;
            let tgt = match &record[1] {
                "NULL" | "" => None,
                other => Some(other.parse::<AttributeRef>()?),
            };
            entries.push(MappingEntry {
                source: src,
                target: tgt,
            });
        }
        MappingSet::new(entries, source, target)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,target\n");
        for e in &self.entries {
            let tgt = e
                .target
                .as_ref()
                .map_or_else(|| "NULL".to_string(), ToString::to_string);
            out.push_str(&format!("{},{}\n", e.source, tgt));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn load_ground_truth(
    path: impl AsRef<Path>,
    source: &Schema,
    target: &Schema,
) -> Result<MappingSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MappingSet::parse_csv(&text, source, target)
}
