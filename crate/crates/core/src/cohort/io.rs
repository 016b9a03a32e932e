//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<subject>_<visit>.f32   raw little-endian float32, row-major [H,W]
//! ```
//!
//! The manifest records `format`, `version`, `height`, `width`, `dtype`,
//! `byte_order`, `layout`, the generator config (if any) and one entry per
//! subject with its group label, speed and visits (`age`, `brain_state`,
//! `file` relative to the dataset directory).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LneError, Result};
use crate::rawio::{read_f32s, write_f32s};

use super::{Cohort, GeneratorConfig, Group, Image, Subject, Visit};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const FORMAT: &str = "lne-cohort";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    dtype: String,
    byte_order: String,
    layout: String,
    generator: Option<GeneratorConfig>,
    subjects: Vec<SubjectEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    group: Option<Group>,
    speed: f64,
    visits: Vec<VisitEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisitEntry {
    age: f64,
    brain_state: f64,
    file: String,
}

/// Write `cohort` under `dir` (created if needed).
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| LneError::io(&images, e))?;
    let mut subjects = Vec::with_capacity(cohort.subjects.len());
    for s in cohort.subjects.values() {
        let mut visits = Vec::with_capacity(s.visits.len());
        for (v, visit) in s.visits.iter().enumerate() {
            let rel = format!("images/{}_{v}.f32", s.id);
            write_f32s(&dir.join(&rel), &visit.image.data)?;
            visits.push(VisitEntry {
                age: visit.age,
                brain_state: visit.brain_state,
                file: rel,
            });
        }
        subjects.push(SubjectEntry {
            id: s.id.clone(),
            group: s.group,
            speed: s.speed,
            visits,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: MANIFEST_VERSION,
        height: cohort.height,
        width: cohort.width,
        dtype: "float32".into(),
        byte_order: "little".into(),
        layout: "row-major".into(),
        generator: cohort.generator.clone(),
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| LneError::io(&path, e))
}

/// Read a dataset directory written by [`save_cohort`].
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(LneError::MissingFile(path)),
        Err(e) => return Err(LneError::io(&path, e)),
    };
    let malformed = |reason: String| LneError::Manifest {
        path: path.clone(),
        reason,
    };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if m.format != FORMAT {
        return Err(malformed(format!("unknown format {:?}", m.format)));
    }
    if m.version != MANIFEST_VERSION {
        return Err(LneError::Version {
            found: m.version,
            expected: MANIFEST_VERSION,
        });
    }
    if m.dtype != "float32" || m.byte_order != "little" || m.layout != "row-major" {
        return Err(malformed(format!("unsupported encoding {}/{}/{}", m.dtype, m.byte_order, m.layout)));
    }
    if m.height == 0 || m.width == 0 {
        return Err(malformed("zero image dimensions".into()));
    }
    let mut cohort = Cohort::empty(m.height, m.width);
    cohort.generator = m.generator;
    for s in m.subjects {
        let mut visits = Vec::with_capacity(s.visits.len());
        for v in s.visits {
            let file: PathBuf = dir.join(&v.file);
            let data = read_f32s(&file, m.height * m.width)?;
            visits.push(Visit {
                subject_id: s.id.clone(),
                age: v.age,
                image: Image::new(m.height, m.width, data),
                group: s.group,
                brain_state: v.brain_state,
            });
        }
        if visits.windows(2).any(|w| !(w[1].age > w[0].age)) {
            return Err(malformed(format!("subject {} visits are not in increasing age order", s.id)));
        }
        if cohort.subjects.contains_key(&s.id) {
            return Err(malformed(format!("duplicate subject id {}", s.id)));
        }
        cohort.subjects.insert(
            s.id.clone(),
            Subject {
                id: s.id,
                group: s.group,
                speed: s.speed,
                visits,
            },
        );
    }
    Ok(cohort)
}
