//! Structural checks for everything a run directory may contain.

use std::path::Path;

use serde_json::Value;

use crate::commands::{ENDPOINTS_FILE, LOSS_FILE, PROFILES_DIR, SAMPLES_FILE, TRAJECTORIES_FILE};
use crate::export;
use crate::metrics::{FILE_NAME, SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvKind {
    Loss,
    Field,
    Trajectories,
    Endpoints,
    Samples,
    Profile,
}

impl CsvKind {
    pub fn header(self, dim: usize) -> Vec<String> {
        match self {
            CsvKind::Loss => export::LOSS_HEADER.map(String::from).to_vec(),
            CsvKind::Field => export::field_header(dim),
            CsvKind::Trajectories | CsvKind::Endpoints => export::trajectory_header(dim),
            CsvKind::Samples => export::samples_header(dim),
            CsvKind::Profile => export::profile_header(dim),
        }
    }

    /// Columns that are not floats: integer ids, labels, or the optional posterior.
    fn column_rule(self, name: &str) -> Cell {
        match (self, name) {
            (CsvKind::Loss, "epoch") => Cell::Integer,
            (CsvKind::Trajectories | CsvKind::Endpoints, "particle_id" | "step") => Cell::Integer,
            (CsvKind::Samples, "distribution") => Cell::Label(&["prior", "target"]),
            (CsvKind::Field, "alpha1") => Cell::OptionalProbability,
            (CsvKind::Profile, "alpha") => Cell::Probability,
            _ => Cell::Float,
        }
    }

    pub fn of_file(name: &str) -> Option<Self> {
        match name {
            LOSS_FILE => Some(CsvKind::Loss),
            TRAJECTORIES_FILE => Some(CsvKind::Trajectories),
            ENDPOINTS_FILE => Some(CsvKind::Endpoints),
            SAMPLES_FILE => Some(CsvKind::Samples),
            n if n.starts_with("field_") && n.ends_with(".csv") => Some(CsvKind::Field),
            _ => None,
        }
    }
}

enum Cell {
    Float,
    Integer,
    Label(&'static [&'static str]),
    Probability,
    OptionalProbability,
}

fn check_cell(rule: &Cell, s: &str) -> bool {
    let prob = |s: &str| s.parse::<f64>().is_ok_and(|p| (0.0..=1.0).contains(&p));
    match rule {
        Cell::Float => s.parse::<f64>().is_ok_and(f64::is_finite),
        Cell::Integer => s.parse::<u64>().is_ok(),
        Cell::Label(allowed) => allowed.contains(&s),
        Cell::Probability => prob(s),
        Cell::OptionalProbability => s.is_empty() || prob(s),
    }
}

/// Validates header and every cell; returns the number of data rows.
pub fn validate_csv(path: &Path, kind: CsvKind, dim: usize) -> Result<usize, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| format!("{}: {e}", path.display()))?
        .iter()
        .map(String::from)
        .collect();
    let expected = kind.header(dim);
    if header != expected {
        return Err(format!("{}: header {header:?}, expected {expected:?}", path.display()));
    }
    let rules: Vec<Cell> = header.iter().map(|h| kind.column_rule(h)).collect();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("{} row {}: {e}", path.display(), i + 1))?;
        for (cell, (rule, name)) in rec.iter().zip(rules.iter().zip(&header)) {
            if !check_cell(rule, cell) {
                return Err(format!("{} row {}: bad {name} value {cell:?}", path.display(), i + 1));
            }
        }
        rows += 1;
    }
    Ok(rows)
}

/// Checks the metrics document's fixed keys and the types of any sections present.
pub fn validate_metrics(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let obj = doc.as_object().ok_or("metrics root must be an object")?;
    if obj.get("schema_version").and_then(Value::as_u64) != Some(SCHEMA_VERSION) {
        return Err(format!("schema_version must be {SCHEMA_VERSION}"));
    }
    for key in ["config", "summary"] {
        if !obj.get(key).is_some_and(Value::is_object) {
            return Err(format!("missing object {key:?}"));
        }
    }
    let fractions = |v: &Value| {
        v.as_array()
            .is_some_and(|a| a.iter().all(|x| x.as_f64().is_some_and(|f| (0.0..=1.0).contains(&f))))
    };
    if let Some(modes) = obj.get("modes") {
        let modes = modes.as_object().ok_or("modes must be an object")?;
        for (src, m) in modes {
            if !m.get("per_mode").is_some_and(fractions) {
                return Err(format!("modes.{src}.per_mode must be fractions"));
            }
            for k in ["midpoint_mass", "covered"] {
                if !m.get(k).and_then(Value::as_f64).is_some_and(|f| (0.0..=1.0).contains(&f)) {
                    return Err(format!("modes.{src}.{k} must be a fraction"));
                }
            }
        }
    }
    if let Some(train) = obj.get("train") {
        if !train.get("epoch_losses").is_some_and(Value::is_array)
            || !train.get("checksum").is_some_and(Value::is_string)
        {
            return Err("train needs epoch_losses and checksum".into());
        }
    }
    if let Some(p) = obj.get("profile") {
        for key in ["jump_profiles", "residuals", "residual_negative_control", "posterior_sharpness"] {
            if p.get(key).is_none() {
                return Err(format!("profile.{key} missing"));
            }
        }
        if let Some(r) = p.get("underestimation_ratio") {
            if !r.as_f64().is_some_and(|f| f.is_finite() && f >= 0.0) {
                return Err("profile.underestimation_ratio must be a non-negative number".into());
            }
        }
    }
    Ok(doc)
}

/// Validates every recognised file in a run directory; returns `(file, rows)`.
pub fn validate_run_dir(dir: &Path, dim: usize) -> Result<Vec<(String, usize)>, String> {
    let mut seen = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(kind) = CsvKind::of_file(&name) {
            seen.push((name, validate_csv(&e.path(), kind, dim)?));
        } else if name == FILE_NAME {
            validate_metrics(&e.path())?;
            seen.push((name, 1));
        }
    }
    let profiles = dir.join(PROFILES_DIR);
    if profiles.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(&profiles)
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok())
            .collect();
        files.sort_by_key(|e| e.file_name());
        for e in files {
            let rows = validate_csv(&e.path(), CsvKind::Profile, dim)?;
            seen.push((format!("{PROFILES_DIR}/{}", e.file_name().to_string_lossy()), rows));
        }
    }
    Ok(seen)
}
