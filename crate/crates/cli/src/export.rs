//! CSV writers. Comma-separated, header row, one record per line, floats
//! in shortest round-trip form.

use std::fs::File;
use std::path::Path;

use csv::Writer;
use flowlab::analysis::ProfileRow;
use flowlab::sim::Trajectory;
use ndarray::ArrayView2;

use crate::CliError;

pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// `x, y, z` for up to three coordinates, `x0, x1, ...` beyond.
pub fn coord_names(prefix: &str, dim: usize) -> Vec<String> {
    const AXES: [&str; 3] = ["x", "y", "z"];
    if dim <= 3 {
        AXES[..dim].iter().map(|a| format!("{prefix}{a}")).collect()
    } else {
        (0..dim).map(|i| format!("{prefix}x{i}")).collect()
    }
}

pub fn field_header(dim: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(coord_names("", dim));
    h.extend(coord_names("v", dim));
    h.push("alpha1".into());
    h
}

pub fn trajectory_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["particle_id", "step", "t"].map(String::from).to_vec();
    h.extend(coord_names("", dim));
    h
}

pub fn profile_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "offset"].map(String::from).to_vec();
    h.extend(coord_names("v", dim));
    h.push("alpha".into());
    h
}

pub fn samples_header(dim: usize) -> Vec<String> {
    let mut h = vec!["distribution".to_string()];
    h.extend(coord_names("", dim));
    h
}

pub const LOSS_HEADER: [&str; 2] = ["epoch", "loss"];

struct Sheet {
    path: String,
    w: Writer<File>,
}

impl Sheet {
    fn create<S: AsRef<str>>(path: &Path, header: &[S]) -> Result<Self, CliError> {
        let mut sheet = Self {
            path: path.display().to_string(),
            w: Writer::from_path(path)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?,
        };
        sheet.row(header.iter().map(|s| s.as_ref().to_string()))?;
        Ok(sheet)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<(), CliError> {
        self.w
            .write_record(fields)
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", self.path)))
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.w
            .flush()
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", self.path)))
    }
}

pub fn write_loss(path: &Path, losses: &[f64]) -> Result<(), CliError> {
    let mut s = Sheet::create(path, &LOSS_HEADER)?;
    for (epoch, l) in losses.iter().enumerate() {
        s.row([epoch.to_string(), fmt(*l)])?;
    }
    s.finish()
}

/// `alpha1` is left blank when `alpha` is `None`.
pub fn write_field(
    path: &Path,
    t: f64,
    points: ArrayView2<f64>,
    velocity: ArrayView2<f64>,
    alpha: Option<&[f64]>,
) -> Result<(), CliError> {
    let mut s = Sheet::create(path, &field_header(points.ncols()))?;
    for (i, (x, v)) in points.rows().into_iter().zip(velocity.rows()).enumerate() {
        let mut rec = vec![fmt(t)];
        rec.extend(x.iter().map(|c| fmt(*c)));
        rec.extend(v.iter().map(|c| fmt(*c)));
        rec.push(alpha.map(|a| fmt(a[i])).unwrap_or_default());
        s.row(rec)?;
    }
    s.finish()
}

pub fn write_trajectories(path: &Path, dim: usize, trajectories: &[Trajectory]) -> Result<(), CliError> {
    let mut s = Sheet::create(path, &trajectory_header(dim))?;
    for tr in trajectories {
        for p in &tr.points {
            let mut rec = vec![tr.particle_id.to_string(), p.step.to_string(), fmt(p.t)];
            rec.extend(p.position.iter().map(|c| fmt(*c)));
            s.row(rec)?;
        }
    }
    s.finish()
}

pub fn write_endpoints(path: &Path, endpoints: ArrayView2<f64>, step: usize, t: f64) -> Result<(), CliError> {
    let mut s = Sheet::create(path, &trajectory_header(endpoints.ncols()))?;
    for (i, x) in endpoints.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string(), step.to_string(), fmt(t)];
        rec.extend(x.iter().map(|c| fmt(*c)));
        s.row(rec)?;
    }
    s.finish()
}

pub fn write_samples(path: &Path, sets: &[(&str, ArrayView2<f64>)]) -> Result<(), CliError> {
    let dim = sets.first().map(|(_, x)| x.ncols()).unwrap_or(0);
    let mut s = Sheet::create(path, &samples_header(dim))?;
    for (name, xs) in sets {
        for x in xs.rows() {
            let mut rec = vec![name.to_string()];
            rec.extend(x.iter().map(|c| fmt(*c)));
            s.row(rec)?;
        }
    }
    s.finish()
}

pub fn write_profile(path: &Path, dim: usize, rows: &[ProfileRow]) -> Result<(), CliError> {
    let mut s = Sheet::create(path, &profile_header(dim))?;
    for r in rows {
        let mut rec = vec![fmt(r.t), fmt(r.offset)];
        rec.extend(r.velocity.iter().map(|c| fmt(*c)));
        rec.push(fmt(r.alpha));
        s.row(rec)?;
    }
    s.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, f64::MIN_POSITIVE, 0.999] {
            assert_eq!(fmt(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt(0.5), "0.5");
        assert_eq!(fmt(3.0), "3.0");
    }

    #[test]
    fn headers() {
        assert_eq!(field_header(2), ["t", "x", "y", "vx", "vy", "alpha1"]);
        assert_eq!(trajectory_header(2), ["particle_id", "step", "t", "x", "y"]);
        assert_eq!(profile_header(2), ["t", "offset", "vx", "vy", "alpha"]);
        assert_eq!(field_header(1), ["t", "x", "vx", "alpha1"]);
        assert_eq!(coord_names("", 4), ["x0", "x1", "x2", "x3"]);
    }
}
