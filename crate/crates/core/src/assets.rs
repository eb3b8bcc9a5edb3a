//! Commandment texts and templates shipped with the harness.
//!
//! Commandment bodies are data, not logic: they are embedded from
//! `assets/commandments/<id>.md` and checked against `assets/manifest.sum`
//! on every load. A digest mismatch is a startup error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::fsutil::sha256_hex;

/// The ten universal commandments in order, followed by the compute and math
/// domain sets.
pub const UNIVERSAL_IDS: [&str; 10] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X"];
pub const COMPUTE_IDS: [&str; 4] = ["C1", "C2", "C3", "C4"];
pub const MATH_IDS: [&str; 3] = ["M1", "M2", "M3"];

const MANIFEST_SUM: &str = include_str!("../assets/manifest.sum");

macro_rules! embedded {
    ($($id:literal),* $(,)?) => {
        &[$(($id, include_str!(concat!("../assets/commandments/", $id, ".md")))),*]
    };
}

const EMBEDDED: &[(&str, &str)] = embedded!(
    "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "C1", "C2", "C3", "C4", "M1",
    "M2", "M3",
);

pub const REPORT_TEMPLATE: &str = include_str!("../assets/templates/report.tex");
pub const WORKFLOW_GUIDE: &str = include_str!("../assets/templates/workflow.md");
pub const DEFAULT_HOOKS: &str = include_str!("../assets/templates/hooks.cfg");

pub const AGENT_CONFIGS: &[(&str, &str)] = &[
    ("claude", include_str!("../assets/agents/claude.toml")),
    ("codex", include_str!("../assets/agents/codex.toml")),
    ("gemini", include_str!("../assets/agents/gemini.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Compute,
    Math,
}

impl Domain {
    pub fn ids(self) -> &'static [&'static str] {
        match self {
            Domain::Compute => &COMPUTE_IDS,
            Domain::Math => &MATH_IDS,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Compute => "compute",
            Domain::Math => "math",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compute" => Ok(Domain::Compute),
            "math" => Ok(Domain::Math),
            other => Err(Error::Invalid(format!(
                "unknown domain `{other}` (expected compute or math)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAsset {
    pub id: String,
    pub title: String,
    pub body: String,
    pub digest: String,
}

impl PromptAsset {
    fn parse(id: &str, raw: &str, expected_digest: &str) -> Result<Self> {
        let digest = sha256_hex(raw.as_bytes());
        if digest != expected_digest {
            return Err(Error::Asset {
                id: id.to_string(),
                reason: format!("digest mismatch (expected {expected_digest}, found {digest})"),
            });
        }
        let (first, rest) = raw.split_once('\n').unwrap_or((raw, ""));
        let title = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::Asset {
                id: id.to_string(),
                reason: "first line must be `# <title>`".into(),
            })?
            .trim()
            .to_string();
        let body = rest.trim_matches('\n').to_string();
        if title.is_empty() || body.is_empty() {
            return Err(Error::Asset {
                id: id.to_string(),
                reason: "empty title or body".into(),
            });
        }
        Ok(PromptAsset {
            id: id.to_string(),
            title,
            body,
            digest,
        })
    }

    /// Markdown heading used in the instruction file, e.g. `VI. One Variable per Experiment`.
    pub fn heading(&self) -> String {
        format!("{}. {}", self.id, self.title)
    }
}

/// The verified set of all 17 commandment assets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssetSet {
    pub revision: String,
    assets: BTreeMap<String, PromptAsset>,
}

impl AssetSet {
    pub fn get(&self, id: &str) -> Option<&PromptAsset> {
        self.assets.get(id)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.assets.keys().map(String::as_str)
    }

    /// Universal commandments I..X then the domain set, in canonical order.
    pub fn for_domain(&self, domain: Domain) -> Vec<&PromptAsset> {
        UNIVERSAL_IDS
            .iter()
            .chain(domain.ids())
            .map(|id| &self.assets[*id])
            .collect()
    }
}

fn all_ids() -> impl Iterator<Item = &'static str> {
    UNIVERSAL_IDS
        .iter()
        .chain(COMPUTE_IDS.iter())
        .chain(MATH_IDS.iter())
        .copied()
}

struct SumFile {
    revision: String,
    digests: BTreeMap<String, String>,
}

fn parse_sum(text: &str) -> Result<SumFile> {
    let mut revision = String::new();
    let mut digests = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# revision:") {
            revision = rest.trim().to_string();
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (digest, path) = line.split_once("  ").ok_or_else(|| Error::Asset {
            id: "manifest.sum".into(),
            reason: format!("malformed line `{line}`"),
        })?;
        let id = path
            .trim()
            .strip_prefix("commandments/")
            .and_then(|p| p.strip_suffix(".md"))
            .ok_or_else(|| Error::Asset {
                id: "manifest.sum".into(),
                reason: format!("unexpected asset path `{path}`"),
            })?;
        if digests.insert(id.to_string(), digest.to_string()).is_some() {
            return Err(Error::Asset {
                id: id.to_string(),
                reason: "listed twice in manifest.sum".into(),
            });
        }
    }
    Ok(SumFile { revision, digests })
}

fn build(sum: &str, mut body_of: impl FnMut(&str) -> Result<Option<String>>) -> Result<AssetSet> {
    let sum = parse_sum(sum)?;
    let mut assets = BTreeMap::new();
    for id in all_ids() {
        let expected = sum.digests.get(id).ok_or_else(|| Error::Asset {
            id: id.to_string(),
            reason: "missing from manifest.sum".into(),
        })?;
        let raw = body_of(id)?.ok_or_else(|| Error::Asset {
            id: id.to_string(),
            reason: "asset file missing".into(),
        })?;
        assets.insert(id.to_string(), PromptAsset::parse(id, &raw, expected)?);
    }
    if let Some(extra) = sum.digests.keys().find(|k| !assets.contains_key(*k)) {
        return Err(Error::Asset {
            id: extra.clone(),
            reason: "unknown asset id in manifest.sum".into(),
        });
    }
    Ok(AssetSet {
        revision: sum.revision,
        assets,
    })
}

/// Load the embedded assets and verify every digest.
pub fn load_assets() -> Result<AssetSet> {
    build(MANIFEST_SUM, |id| {
        Ok(EMBEDDED
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, body)| body.to_string()))
    })
}

/// Load assets from an on-disk directory laid out like `assets/`.
pub fn load_assets_from(dir: &Path) -> Result<AssetSet> {
    let sum_path = dir.join("manifest.sum");
    let sum = fs::read_to_string(&sum_path).at(&sum_path)?;
    build(&sum, |id| {
        let path = dir.join("commandments").join(format!("{id}.md"));
        match fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_install_has_seventeen_assets() {
        let set = load_assets().unwrap();
        assert_eq!(set.len(), 17);
        let ids: Vec<&str> = set.ids().collect();
        for id in all_ids() {
            assert!(ids.contains(&id), "{id}");
        }
        assert!(!set.revision.is_empty());
    }

    #[test]
    fn loading_is_pure() {
        assert_eq!(load_assets().unwrap(), load_assets().unwrap());
    }

    #[test]
    fn c1_text_matches_source() {
        let set = load_assets().unwrap();
        let c1 = set.get("C1").unwrap();
        assert_eq!(c1.title, "One experiment per GPU; use them all");
        assert!(c1.body.contains("Never leave GPUs idle when independent tasks remain."));
        let m1 = set.get("M1").unwrap();
        assert_eq!(m1.title, "Derivations before code");
    }

    fn copy_assets(to: &Path) {
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
        fs::create_dir_all(to.join("commandments")).unwrap();
        fs::copy(src.join("manifest.sum"), to.join("manifest.sum")).unwrap();
        for id in all_ids() {
            let name = format!("commandments/{id}.md");
            fs::copy(src.join(&name), to.join(&name)).unwrap();
        }
    }

    #[test]
    fn tampered_body_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        copy_assets(dir.path());
        assert_eq!(load_assets_from(dir.path()).unwrap().len(), 17);
        let path = dir.path().join("commandments/VI.md");
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replace("exactly one thing", "a few things");
        fs::write(&path, text).unwrap();
        let err = load_assets_from(dir.path()).unwrap_err();
        assert!(err.to_string().contains("digest mismatch"), "{err}");
    }

    #[test]
    fn missing_asset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        copy_assets(dir.path());
        fs::remove_file(dir.path().join("commandments/M2.md")).unwrap();
        let err = load_assets_from(dir.path()).unwrap_err();
        assert!(err.to_string().contains("M2"));
    }

    #[test]
    fn domain_order_is_canonical() {
        let set = load_assets().unwrap();
        let ids: Vec<&str> = set.for_domain(Domain::Math).iter().map(|a| a.id.as_str()).collect();
        assert_eq!(
            ids,
            ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "M1", "M2", "M3"]
        );
    }
}
