use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

/// One degraded/reference pair. Paths are resolved (absolute or relative to
/// the working directory) once the manifest is loaded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub degraded: PathBuf,
    pub reference: PathBuf,
    pub split: Split,
}

/// A paired dataset listing.
///
/// On disk it is UTF-8 text with one `degraded,reference,split` line per pair,
/// paths relative to the manifest's directory. Lines starting with `#` are
/// comments, except `# seed=N`, which records the seed the listing was built
/// with. The id of an entry is the file stem of its degraded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

fn id_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::ingestion(path, "file name is not valid UTF-8"))
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>, seed: u64) -> Result<Self> {
        let m = Manifest { root: root.into(), entries, seed };
        m.validate()?;
        Ok(m)
    }

    /// Ids are unique, so no id can sit in two splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("id `{}` appears more than once in the manifest", e.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seed = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed=") {
                    seed = v.trim().parse().map_err(|_| Error::Config(format!("manifest line {}: bad seed `{v}`", lineno + 1)))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [degraded, reference, split] = fields[..] else {
                return Err(Error::Config(format!(
                    "manifest line {}: expected `degraded,reference,split`, got `{line}`",
                    lineno + 1
                )));
            };
            let degraded = root.join(degraded);
            entries.push(ManifestEntry {
                id: id_of(&degraded)?,
                degraded,
                reference: root.join(reference),
                split: split.parse()?,
            });
        }
        Manifest::new(root, entries, seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    /// Serializes with paths made relative to `root` where possible.
    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("# degraded,reference,split\n# seed={}\n", self.seed);
        let rel = |p: &Path| -> Result<String> {
            let p = p.strip_prefix(&self.root).unwrap_or(p);
            let s = p.to_str().ok_or_else(|| Error::ingestion(p, "path is not valid UTF-8"))?;
            if s.contains(',') || s.contains('\n') {
                return Err(Error::ingestion(p, "path contains a comma or newline"));
            }
            Ok(s.replace('\\', "/"))
        };
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", rel(&e.degraded)?, rel(&e.reference)?, e.split));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let root = PathBuf::from("/data/set");
        let entries = vec![
            ManifestEntry {
                id: "a_1".into(),
                degraded: root.join("degraded/a_1.png"),
                reference: root.join("reference/a.png"),
                split: Split::Train,
            },
            ManifestEntry {
                id: "b_3".into(),
                degraded: root.join("degraded/b_3.png"),
                reference: root.join("reference/b.png"),
                split: Split::Test,
            },
        ];
        let m = Manifest::new(&root, entries, 42).unwrap();
        let text = m.to_text().unwrap();
        assert!(text.contains("degraded/a_1.png,reference/a.png,train"));
        assert_eq!(Manifest::parse(&text, &root).unwrap(), m);
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        let root = Path::new(".");
        assert!(Manifest::parse("a.png,b.png\n", root).is_err());
        assert!(Manifest::parse("a.png,b.png,holdout\n", root).is_err());
        assert!(Manifest::parse("x/a.png,b.png,train\ny/a.png,c.png,test\n", root).is_err());
        let m = Manifest::parse("# comment\n\n a.png , b.png , val \n", root).unwrap();
        assert_eq!(m.entries[0].split, Split::Val);
        assert_eq!(m.entries[0].id, "a");
    }
}
