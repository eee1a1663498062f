use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value as JsonValue;

use super::ConfigError;
use crate::digest::Digest;
use crate::fleetmodel::NodeId;

/// Layer precedence. Later variants override earlier ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precedence {
    Base,
    Site,
    System,
    Node,
}

/// Which nodes a layer applies to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Scope {
    Global,
    Node(NodeId),
}

impl Scope {
    pub fn covers(&self, node: Option<&NodeId>) -> bool {
        match (self, node) {
            (Scope::Global, _) => true,
            (Scope::Node(a), Some(b)) => a == b,
            (Scope::Node(_), None) => false,
        }
    }

    pub fn intersects(&self, other: &Scope) -> bool {
        match (self, other) {
            (Scope::Node(a), Scope::Node(b)) => a == b,
            _ => true,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::Node(n) => write!(f, "node:{n}"),
        }
    }
}

impl FromStr for Scope {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "global" => Ok(Scope::Global),
            Some(("node", n)) if !n.is_empty() => Ok(Scope::Node(NodeId::new(n))),
            _ => Err(ConfigError::InvalidScope(s.to_string())),
        }
    }
}

impl From<Scope> for String {
    fn from(s: Scope) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for Scope {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// One configuration layer: a flat map from dotted key paths to values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigLayer {
    pub name: String,
    pub precedence: Precedence,
    pub scope: Scope,
    pub values: BTreeMap<String, JsonValue>,
}

#[derive(Deserialize)]
struct LayerFile {
    layer: String,
    precedence: Precedence,
    #[serde(default = "global")]
    scope: Scope,
    #[serde(default)]
    values: toml::Table,
}

fn global() -> Scope {
    Scope::Global
}

#[derive(Serialize)]
struct LayerFileOut<'a> {
    layer: &'a str,
    precedence: Precedence,
    scope: &'a Scope,
    values: &'a BTreeMap<String, JsonValue>,
}

impl ConfigLayer {
    pub fn new(name: impl Into<String>, precedence: Precedence, scope: Scope) -> Self {
        ConfigLayer {
            name: name.into(),
            precedence,
            scope,
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: JsonValue) -> Self {
        self.values.insert(key.to_string(), value);
        self
    }

    /// Parses a layer file. Nested tables flatten to dotted keys, except
    /// tables with `kind = "sealed"`, which are sealed secrets and stay whole.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: LayerFile = toml::from_str(text)?;
        let mut values = BTreeMap::new();
        flatten("", toml::Value::Table(file.values), &mut values)?;
        Ok(ConfigLayer {
            name: file.layer,
            precedence: file.precedence,
            scope: file.scope,
            values,
        })
    }

    /// Canonical text form: keys in lexicographic order, one per line.
    pub fn to_toml(&self) -> String {
        toml::to_string(&LayerFileOut {
            layer: &self.name,
            precedence: self.precedence,
            scope: &self.scope,
            values: &self.values,
        })
        .expect("layer values are representable in TOML")
    }

    /// Content digest over name, precedence, scope and values.
    pub fn version(&self) -> Digest {
        let values = serde_json::to_vec(&self.values).expect("json values serialize");
        Digest::of_parts([
            self.name.as_bytes(),
            format!("{:?}", self.precedence).as_bytes(),
            self.scope.to_string().as_bytes(),
            &values,
        ])
    }
}

fn flatten(
    prefix: &str,
    v: toml::Value,
    out: &mut BTreeMap<String, JsonValue>,
) -> Result<(), ConfigError> {
    match v {
        toml::Value::Table(t) if !is_sealed(&t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out)?;
            }
            Ok(())
        }
        leaf => {
            if prefix.is_empty() {
                return Err(ConfigError::Validation(
                    "layer values must be a table".into(),
                ));
            }
            let json = serde_json::to_value(leaf)
                .map_err(|e| ConfigError::Validation(format!("{prefix}: {e}")))?;
            out.insert(prefix.to_string(), json);
            Ok(())
        }
    }
}

fn is_sealed(t: &toml::Table) -> bool {
    t.get("kind").and_then(|k| k.as_str()) == Some("sealed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const SITE: &str = r#"
        layer = "site-a"
        precedence = "site"
        scope = "global"

        [values]
        defaults.image = "v2"

        [values.groups.compute]
        members = ["n1", "n2"]
        image = "v2"

        [values.secrets.db]
        kind = "sealed"
        key_id = "k1"
        nonce = "AA"
        ciphertext = "BB"
        tag = "CC"
    "#;

    #[test]
    fn parse_flattens_nested_tables() {
        let l = ConfigLayer::from_toml(SITE).unwrap();
        assert_eq!(l.precedence, Precedence::Site);
        assert_eq!(l.values["defaults.image"], json!("v2"));
        assert_eq!(l.values["groups.compute.members"], json!(["n1", "n2"]));
        assert_eq!(l.values["secrets.db"]["kind"], json!("sealed"));
        assert_eq!(l.values.len(), 4);
    }

    #[test]
    fn canonical_text_is_sorted_and_reparses() {
        let l = ConfigLayer::from_toml(SITE).unwrap();
        let text = l.to_toml();
        let a = text.find("defaults.image").unwrap();
        let b = text.find("groups.compute.image").unwrap();
        assert!(a < b);
        let back = ConfigLayer::from_toml(&text).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.version(), l.version());
    }

    #[test]
    fn scopes() {
        assert_eq!(
            "node:n1".parse::<Scope>().unwrap(),
            Scope::Node(NodeId::new("n1"))
        );
        assert!("rack:3".parse::<Scope>().is_err());
        assert!("node:".parse::<Scope>().is_err());
        let n1 = Scope::Node(NodeId::new("n1"));
        let n2 = Scope::Node(NodeId::new("n2"));
        assert!(!n1.intersects(&n2));
        assert!(n1.intersects(&Scope::Global));
        assert!(n1.covers(Some(&NodeId::new("n1"))));
        assert!(!n1.covers(None));
    }
}
