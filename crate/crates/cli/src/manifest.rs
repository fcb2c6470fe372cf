use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Cases of a batch run. Relative paths are resolved against the manifest's
/// directory when it is loaded.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub cases: Vec<CaseEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Named config files, e.g. `"plan"` or `"preprocess"`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub configs: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred: Option<PathBuf>,
    #[serde(default, rename = "ref", skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// One 4D softmax file per ensemble member.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probs: Vec<PathBuf>,
}

/// Which per-case inputs a subcommand reads.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub pred: bool,
    pub reference: bool,
    pub image: bool,
    pub probs: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("manifest {}: {e}", path.display())))?;
        // absolute, so entries stay valid when copied into manifests written elsewhere
        let base = std::path::absolute(path.parent().unwrap_or(Path::new(""))).map_err(|e| CliError::io(path, e))?;
        m.resolve(&base);
        Ok(m)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in &mut self.cases {
            c.pred.as_mut().map(fix);
            c.reference.as_mut().map(fix);
            c.image.as_mut().map(fix);
            c.probs.iter_mut().for_each(fix);
        }
        self.organs.as_mut().map(fix);
        self.output_dir.as_mut().map(fix);
        self.configs.values_mut().for_each(fix);
    }

    /// Checks everything a run will touch before any work starts.
    pub fn validate(&self, needs: Needs) -> CliResult<()> {
        if self.cases.is_empty() {
            return Err(CliError::invalid("manifest lists no cases"));
        }
        let mut seen = BTreeSet::new();
        let mut missing = Vec::new();
        for c in &self.cases {
            if c.id.is_empty() || c.id.contains(['/', '\\']) || c.id == "." || c.id == ".." {
                return Err(CliError::invalid(format!("case id {:?} is not a plain name", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(CliError::invalid(format!("duplicate case id {:?}", c.id)));
            }
            for (field, wanted, value) in [
                ("pred", needs.pred, &c.pred),
                ("ref", needs.reference, &c.reference),
                ("image", needs.image, &c.image),
            ] {
                if wanted && value.is_none() {
                    return Err(CliError::invalid(format!("case {:?} has no {field}", c.id)));
                }
            }
            if needs.probs && c.probs.is_empty() {
                return Err(CliError::invalid(format!("case {:?} lists no probs", c.id)));
            }
            let paths = c.pred.iter().chain(&c.reference).chain(&c.image).chain(&c.probs);
            missing.extend(paths.filter(|p| !p.is_file()).map(|p| p.display().to_string()));
        }
        missing.extend(
            self.organs.iter().chain(self.configs.values()).filter(|p| !p.is_file()).map(|p| p.display().to_string()),
        );
        if !missing.is_empty() {
            return Err(CliError::invalid(format!("manifest references missing files: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// Pairs same-named NIfTI files of two directories.
    pub fn from_dirs(preds: &Path, refs: &Path) -> CliResult<Self> {
        let p = nifti_files(preds)?;
        let r = nifti_files(refs)?;
        let unmatched: Vec<&String> = p.keys().filter(|k| !r.contains_key(*k)).chain(r.keys().filter(|k| !p.contains_key(*k))).collect();
        if !unmatched.is_empty() {
            return Err(CliError::invalid(format!(
                "prediction and reference directories differ in cases: {unmatched:?}"
            )));
        }
        if p.is_empty() {
            return Err(CliError::invalid(format!("no NIfTI files in {}", preds.display())));
        }
        let cases = p
            .into_iter()
            .map(|(id, pred)| CaseEntry {
                reference: Some(r[&id].clone()),
                pred: Some(pred),
                id,
                ..CaseEntry::default()
            })
            .collect();
        Ok(RunManifest { cases, ..RunManifest::default() })
    }
}

/// Case id (file name without the NIfTI extension) → path, sorted.
fn nifti_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let id = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"));
        if let (Some(id), true) = (id, path.is_file()) {
            out.insert(id.to_string(), path.clone());
        }
    }
    Ok(out)
}
