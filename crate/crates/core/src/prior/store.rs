//! On-disk layout for prior knowledge and trend tables.
//!
//! A store directory holds `manifest.json` plus one raw little-endian `f64`
//! blob per tensor, named `{kind}_t{t}_l{l}.f64`. Shapes live only in the
//! manifest. Every blob is length- and SHA-256-checked before decoding, and
//! the manifest itself is validated in full before any blob is read.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::OptimizationPlan;
use crate::error::{Error, Result};
use crate::numerics::{mean_abs_sum, Tensor};
use crate::prior::{PriorKnowledge, Provenance, TrendCell, TrendMode, TrendTable};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const PLAN_NAME: &str = "plan.json";

const PRIOR_MODE: &str = "prior";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub t: usize,
    pub l: usize,
    pub kind: String,
    pub shape: Vec<usize>,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "Q")]
    pub runs: usize,
    pub tokens: usize,
    pub width: usize,
    pub fingerprint: String,
    pub classes: Vec<usize>,
    /// `prior`, `adjacent` or `cumulative`.
    pub mode: String,
    pub files: Vec<FileEntry>,
}

fn blob_name(kind: &str, t: usize, l: usize) -> String {
    format!("{kind}_t{t}_l{l}.f64")
}

fn kinds_for(mode: &str) -> Option<[&'static str; 2]> {
    match mode {
        PRIOR_MODE => Some(["K_attn", "K_mlp"]),
        "adjacent" | "cumulative" => Some(["E_attn", "E_mlp"]),
        _ => None,
    }
}

impl Manifest {
    /// Parses and structurally validates a manifest; no blob is touched.
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Manifest> {
        let m: Manifest =
            serde_json::from_slice(bytes).map_err(|e| Error::integrity(path, e.to_string()))?;
        m.validate(path)?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Err(Error::integrity(path, msg));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.version));
        }
        if self.steps == 0 || self.layers == 0 || self.tokens == 0 || self.width == 0 {
            return bad("grid and tensor dimensions must be positive".into());
        }
        let Some(kinds) = kinds_for(&self.mode) else {
            return bad(format!("unknown mode `{}`", self.mode));
        };
        let shape = vec![self.tokens, self.width];
        let mut seen = BTreeSet::new();
        for f in &self.files {
            if !kinds.contains(&f.kind.as_str()) {
                return bad(format!(
                    "file {} has kind `{}` in a `{}` store",
                    f.name, f.kind, self.mode
                ));
            }
            if f.t >= self.steps || f.l >= self.layers {
                return bad(format!(
                    "file {} indexes cell ({}, {}) outside the grid",
                    f.name, f.t, f.l
                ));
            }
            if f.name != blob_name(&f.kind, f.t, f.l) {
                return bad(format!(
                    "file name {} does not match its kind and cell",
                    f.name
                ));
            }
            if f.shape != shape {
                return bad(format!(
                    "file {} has shape {:?}, expected {:?}",
                    f.name, f.shape, shape
                ));
            }
            if f.sha256.len() != 64 || !f.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
                return bad(format!("file {} has a malformed sha256", f.name));
            }
            match (self.mode.as_str(), f.anchor) {
                (PRIOR_MODE, None) => {}
                ("adjacent", Some(a)) if a + 1 == f.t => {}
                ("cumulative", Some(a)) if a < f.t => {}
                _ => {
                    return bad(format!(
                        "file {} has an invalid anchor {:?}",
                        f.name, f.anchor
                    ))
                }
            }
            if !seen.insert((f.kind.clone(), f.t, f.l)) {
                return bad(format!("duplicate entry {}", f.name));
            }
        }
        // attn and mlp come in pairs with matching anchors
        for f in &self.files {
            let partner = if f.kind == kinds[0] {
                kinds[1]
            } else {
                kinds[0]
            };
            let found = self
                .files
                .iter()
                .find(|g| g.kind == partner && g.t == f.t && g.l == f.l);
            match found {
                Some(g) if g.anchor == f.anchor => {}
                _ => return bad(format!("file {} has no matching {partner} entry", f.name)),
            }
        }
        let expected_cells = match self.mode.as_str() {
            PRIOR_MODE => self.steps * self.layers,
            "adjacent" => (self.steps - 1) * self.layers,
            _ => seen.len() / 2,
        };
        if seen.len() != 2 * expected_cells {
            return bad(format!(
                "manifest lists {} tensors, a complete `{}` grid needs {}",
                seen.len(),
                self.mode,
                2 * expected_cells
            ));
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_blob(
    dir: &Path,
    kind: &str,
    t: usize,
    l: usize,
    tensor: &Tensor,
    anchor: Option<usize>,
) -> Result<FileEntry> {
    let name = blob_name(kind, t, l);
    let bytes = tensor.to_le_bytes();
    let path = dir.join(&name);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileEntry {
        name,
        t,
        l,
        kind: kind.to_string(),
        shape: tensor.shape().to_vec(),
        sha256: sha256_hex(&bytes),
        anchor,
    })
}

fn read_blob(dir: &Path, f: &FileEntry) -> Result<Tensor> {
    let path = dir.join(&f.name);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::integrity(&path, "blob listed in manifest is missing")
        }
        _ => Error::io(&path, e),
    })?;
    let expected: usize = f.shape.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(Error::integrity(
            &path,
            format!(
                "blob is {} bytes, manifest shape {:?} needs {expected}",
                bytes.len(),
                f.shape
            ),
        ));
    }
    if sha256_hex(&bytes) != f.sha256 {
        return Err(Error::integrity(
            &path,
            "blob checksum does not match manifest",
        ));
    }
    Tensor::from_le_bytes(f.shape.clone(), &bytes)
        .map_err(|e| Error::integrity(&path, e.to_string()))
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let value = serde_json::to_value(m)?;
    let text = serde_json::to_string_pretty(&value)? + "\n";
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&bytes, &path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn provenance_of(m: &Manifest) -> Provenance {
    Provenance {
        fingerprint: m.fingerprint.clone(),
        runs: m.runs,
        classes: m.classes.clone(),
        tokens: m.tokens,
        width: m.width,
    }
}

pub fn save_prior(pk: &PriorKnowledge, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut files = Vec::with_capacity(2 * pk.steps() * pk.layers());
    for t in 0..pk.steps() {
        for l in 0..pk.layers() {
            files.push(write_blob(dir, "K_attn", t, l, pk.attn(t, l), None)?);
            files.push(write_blob(dir, "K_mlp", t, l, pk.mlp(t, l), None)?);
        }
    }
    let p = pk.provenance();
    write_manifest(
        dir,
        &Manifest {
            version: MANIFEST_VERSION,
            steps: pk.steps(),
            layers: pk.layers(),
            runs: p.runs,
            tokens: p.tokens,
            width: p.width,
            fingerprint: p.fingerprint.clone(),
            classes: p.classes.clone(),
            mode: PRIOR_MODE.into(),
            files,
        },
    )
}

pub fn load_prior(dir: &Path) -> Result<PriorKnowledge> {
    let m = read_manifest(dir)?;
    if m.mode != PRIOR_MODE {
        return Err(Error::integrity(
            dir.join(MANIFEST_NAME),
            format!("expected a prior store, found `{}`", m.mode),
        ));
    }
    let n = m.steps * m.layers;
    let mut attn = vec![None; n];
    let mut mlp = vec![None; n];
    for f in &m.files {
        let slot = if f.kind == "K_attn" {
            &mut attn
        } else {
            &mut mlp
        };
        slot[f.t * m.layers + f.l] = Some(read_blob(dir, f)?);
    }
    let unwrap = |v: Vec<Option<Tensor>>| v.into_iter().collect::<Option<Vec<_>>>();
    let (Some(attn), Some(mlp)) = (unwrap(attn), unwrap(mlp)) else {
        return Err(Error::integrity(dir.join(MANIFEST_NAME), "incomplete grid"));
    };
    PriorKnowledge::from_grids(m.steps, m.layers, attn, mlp, provenance_of(&m))
}

pub fn save_trend(tt: &TrendTable, dir: &Path) -> Result<()> {
    let p = tt
        .provenance()
        .ok_or_else(|| Error::config("trend", "trend table has no provenance to record"))?;
    create_dir(dir)?;
    let mut files = Vec::new();
    for ((t, l), c) in tt.cells() {
        files.push(write_blob(dir, "E_attn", t, l, &c.attn, Some(c.anchor))?);
        files.push(write_blob(dir, "E_mlp", t, l, &c.mlp, Some(c.anchor))?);
    }
    write_manifest(
        dir,
        &Manifest {
            version: MANIFEST_VERSION,
            steps: tt.steps(),
            layers: tt.layers(),
            runs: p.runs,
            tokens: p.tokens,
            width: p.width,
            fingerprint: p.fingerprint.clone(),
            classes: p.classes.clone(),
            mode: tt.mode().as_str().into(),
            files,
        },
    )
}

/// Loads a trend table; `v` is recomputed from the loaded tensors.
pub fn load_trend(dir: &Path) -> Result<TrendTable> {
    let m = read_manifest(dir)?;
    let mode = match m.mode.as_str() {
        "adjacent" => TrendMode::Adjacent,
        "cumulative" => TrendMode::Cumulative,
        other => {
            return Err(Error::integrity(
                dir.join(MANIFEST_NAME),
                format!("expected a trend store, found `{other}`"),
            ))
        }
    };
    let n = m.steps * m.layers;
    let mut attn: Vec<Option<(Tensor, usize)>> = vec![None; n];
    let mut mlp: Vec<Option<Tensor>> = vec![None; n];
    for f in &m.files {
        let tensor = read_blob(dir, f)?;
        let i = f.t * m.layers + f.l;
        if f.kind == "E_attn" {
            attn[i] = Some((tensor, f.anchor.expect("validated anchor")));
        } else {
            mlp[i] = Some(tensor);
        }
    }
    let cells = attn
        .into_iter()
        .zip(mlp)
        .map(|pair| match pair {
            (Some((attn, anchor)), Some(mlp)) => {
                let v = mean_abs_sum(&attn, &mlp)?;
                Ok(Some(TrendCell {
                    attn,
                    mlp,
                    v,
                    anchor,
                }))
            }
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrendTable::from_cells(mode, m.steps, m.layers, cells)?.with_provenance(provenance_of(&m)))
}

pub fn save_plan(plan: &OptimizationPlan, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    plan.save(&dir.join(PLAN_NAME))
}

/// Parses `dir/plan.json` without checking it against a schedule.
pub fn load_plan(dir: &Path) -> Result<OptimizationPlan> {
    let path = dir.join(PLAN_NAME);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    OptimizationPlan::from_json(&bytes).map_err(|e| match e {
        Error::Json(j) => Error::integrity(&path, j.to_string()),
        other => other,
    })
}
