//! Profile records, covariate normalization, and the edge-cleaning and
//! inboard-reflection rules applied before fitting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default |psi| beyond which the edge-rise deletion rule is active.
pub const EDGE_THRESHOLD: f64 = 0.9;

/// Default |psi| beyond which outboard points are mirrored to the inboard side.
pub const REFLECTION_THRESHOLD: f64 = 0.87;

/// Engineering variables that may enter a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Covariate {
    /// Plasma current, MA.
    Ip,
    /// Toroidal field, T.
    Bt,
    /// Line-average density, 10^19 m^-3.
    Nbar,
    Q95,
    /// Geometric safety factor `q95 * Ip / Bt`.
    Qgeo,
    Kappa,
    /// Minor radius, m.
    A,
    /// Major radius, m.
    R,
    /// Loop voltage, V.
    Vloop,
    Zeff,
    Li,
    /// Time in discharge, s.
    Time,
}

/// How a raw covariate value is turned into a regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// `ln(raw / reference)`, reference = geometric mean.
    Log,
    /// `raw - reference`, reference = arithmetic mean.
    Linear,
}

impl Covariate {
    pub const ALL: [Covariate; 12] = [
        Covariate::Ip,
        Covariate::Bt,
        Covariate::Nbar,
        Covariate::Q95,
        Covariate::Qgeo,
        Covariate::Kappa,
        Covariate::A,
        Covariate::R,
        Covariate::Vloop,
        Covariate::Zeff,
        Covariate::Li,
        Covariate::Time,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Covariate::Ip => "Ip",
            Covariate::Bt => "Bt",
            Covariate::Nbar => "nbar",
            Covariate::Q95 => "q95",
            Covariate::Qgeo => "qgeo",
            Covariate::Kappa => "kappa",
            Covariate::A => "a",
            Covariate::R => "R",
            Covariate::Vloop => "Vloop",
            Covariate::Zeff => "Zeff",
            Covariate::Li => "li",
            Covariate::Time => "time",
        }
    }

    pub fn transform(self) -> Transform {
        match self {
            Covariate::Vloop | Covariate::Zeff | Covariate::Li | Covariate::Time => {
                Transform::Linear
            }
            _ => Transform::Log,
        }
    }

    /// Covariates computed from others rather than read from the record.
    pub fn is_derived(self) -> bool {
        matches!(self, Covariate::Qgeo)
    }

    /// Raw (untransformed) value for a record, computing derived covariates.
    pub fn raw(self, record: &ProfileRecord) -> Result<f64> {
        self.raw_from_map(&record.covariates, &record.id)
    }

    pub fn raw_from_map(self, covariates: &BTreeMap<String, f64>, id: &str) -> Result<f64> {
        let get = |c: Covariate| {
            covariates
                .get(c.name())
                .copied()
                .ok_or_else(|| Error::MissingCovariate {
                    id: id.to_string(),
                    covariate: c.name().to_string(),
                })
        };
        match self {
            Covariate::Qgeo => {
                if let Some(v) = covariates.get(self.name()) {
                    return Ok(*v);
                }
                Ok(get(Covariate::Q95)? * get(Covariate::Ip)? / get(Covariate::Bt)?)
            }
            other => get(other),
        }
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Covariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let c = match lower.as_str() {
            "ip" => Covariate::Ip,
            "bt" => Covariate::Bt,
            "nbar" | "n" | "ne" => Covariate::Nbar,
            "q95" => Covariate::Q95,
            "qgeo" | "q_geo" | "qhat" => Covariate::Qgeo,
            "kappa" => Covariate::Kappa,
            "a" => Covariate::A,
            "r" => Covariate::R,
            "vloop" | "volt" => Covariate::Vloop,
            "zeff" => Covariate::Zeff,
            "li" | "l_i" => Covariate::Li,
            "time" | "t" => Covariate::Time,
            _ => return Err(Error::Spec(format!("unknown covariate `{s}`"))),
        };
        Ok(c)
    }
}

impl Serialize for Covariate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Covariate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Reference values used to center covariates, keyed by covariate.
pub type Normalization = BTreeMap<Covariate, f64>;

/// Centered regressor value `ln(raw/ref)` or `raw - ref`.
pub fn covariate_value(
    record: &ProfileRecord,
    covariate: Covariate,
    normalization: &Normalization,
) -> Result<f64> {
    transform_value(covariate, covariate.raw(record)?, normalization, &record.id)
}

pub(crate) fn transform_value(
    covariate: Covariate,
    raw: f64,
    normalization: &Normalization,
    id: &str,
) -> Result<f64> {
    let reference = *normalization.get(&covariate).ok_or_else(|| Error::MissingCovariate {
        id: format!("{id} (normalization)"),
        covariate: covariate.name().to_string(),
    })?;
    match covariate.transform() {
        Transform::Log => {
            if !(raw > 0.0) || !(reference > 0.0) {
                return Err(Error::Domain(format!(
                    "record {id}: logarithm of nonpositive {covariate} value {raw} (reference {reference})"
                )));
            }
            Ok((raw / reference).ln())
        }
        Transform::Linear => Ok(raw - reference),
    }
}

/// One measured temperature profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub psi: Vec<f64>,
    #[serde(rename = "temp_ev")]
    pub temp: Vec<f64>,
    #[serde(rename = "sigma_ev")]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
    /// Per-point flag marking reflected (non-measured) points.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augmented: Vec<bool>,
    /// Notes on transformations applied to the record.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl ProfileRecord {
    pub fn new(
        id: impl Into<String>,
        psi: Vec<f64>,
        temp: Vec<f64>,
        sigma: Vec<f64>,
        covariates: BTreeMap<String, f64>,
    ) -> Self {
        Self {
            id: id.into(),
            psi,
            temp,
            sigma,
            covariates,
            augmented: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn is_augmented(&self, j: usize) -> bool {
        self.augmented.get(j).copied().unwrap_or(false)
    }

    /// Number of measured (non-reflected) points.
    pub fn measured_count(&self) -> usize {
        (0..self.len()).filter(|&j| !self.is_augmented(j)).count()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| Error::Validation {
            id: self.id.clone(),
            field: field.to_string(),
            message,
        };
        let n = self.psi.len();
        if self.temp.len() != n || self.sigma.len() != n {
            return Err(fail(
                "psi",
                format!(
                    "length mismatch: psi {}, temp_ev {}, sigma_ev {}",
                    n,
                    self.temp.len(),
                    self.sigma.len()
                ),
            ));
        }
        if !self.augmented.is_empty() && self.augmented.len() != n {
            return Err(fail("augmented", "length differs from psi".into()));
        }
        if n < 4 {
            return Err(fail("psi", format!("at least 4 points required, got {n}")));
        }
        if let Some(p) = self.psi.iter().find(|p| !(p.abs() <= 1.0)) {
            return Err(fail("psi", format!("value {p} outside [-1, 1]")));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(fail("sigma_ev", format!("must be strictly positive, got {s}")));
        }
        if let Some(t) = self.temp.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(fail("temp_ev", format!("must be strictly positive, got {t}")));
        }
        for (name, v) in &self.covariates {
            if !v.is_finite() {
                return Err(fail("covariates", format!("`{name}` is not finite")));
            }
        }
        Ok(())
    }

    fn retain_points(&mut self, keep: &[bool]) {
        let filter = |v: &Vec<f64>| -> Vec<f64> {
            v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect()
        };
        self.psi = filter(&self.psi);
        self.temp = filter(&self.temp);
        self.sigma = filter(&self.sigma);
        if !self.augmented.is_empty() {
            self.augmented = self
                .augmented
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(a, _)| *a)
                .collect();
        }
    }
}

/// Remove spurious temperature rises toward the wall.
///
/// Each side of the profile (outboard `psi >= 0`, inboard `psi < 0`) is
/// ordered by `|psi|`. The maximal strictly increasing run of temperatures
/// that ends at the wall is located; its points beyond `threshold` are
/// deleted, except the run's first point when a hotter point precedes it
/// (that point is the valley the rise starts from, not part of the rise).
pub fn clean_edge(record: &ProfileRecord) -> ProfileRecord {
    clean_edge_with(record, EDGE_THRESHOLD)
}

pub fn clean_edge_with(record: &ProfileRecord, threshold: f64) -> ProfileRecord {
    let mut keep = vec![true; record.len()];
    for outboard in [true, false] {
        let mut side: Vec<usize> = (0..record.len())
            .filter(|&j| (record.psi[j] >= 0.0) == outboard)
            .collect();
        side.sort_by(|&a, &b| record.psi[a].abs().total_cmp(&record.psi[b].abs()));
        if side.len() < 2 {
            continue;
        }
        let m = side.len();
        let mut start = m - 1;
        while start > 0 && record.temp[side[start - 1]] < record.temp[side[start]] {
            start -= 1;
        }
        if start == m - 1 {
            continue;
        }
        let first_removed = if start == 0 { 0 } else { start + 1 };
        for &j in &side[first_removed..] {
            if record.psi[j].abs() > threshold {
                keep[j] = false;
            }
        }
    }
    let mut out = record.clone();
    if keep.iter().any(|k| !k) {
        let removed: Vec<String> = (0..record.len())
            .filter(|&j| !keep[j])
            .map(|j| format!("{}", record.psi[j]))
            .collect();
        out.retain_points(&keep);
        out.provenance.push(format!(
            "clean_edge: removed {} point(s) at psi [{}]",
            removed.len(),
            removed.join(", ")
        ));
    }
    out
}

/// Mirror measured outboard points with `psi > threshold` to `-psi`,
/// appending them as augmented points. Existing points are never altered and
/// a reflection already present is not duplicated.
pub fn reflect_inboard(record: &ProfileRecord, threshold: f64) -> ProfileRecord {
    let mut out = record.clone();
    if out.augmented.is_empty() {
        out.augmented = vec![false; out.len()];
    }
    let mut added = 0;
    for j in 0..record.len() {
        if record.is_augmented(j) || !(record.psi[j] > threshold) {
            continue;
        }
        let mirrored = -record.psi[j];
        let exists = (0..record.len()).any(|i| record.is_augmented(i) && record.psi[i] == mirrored);
        if exists {
            continue;
        }
        out.psi.push(mirrored);
        out.temp.push(record.temp[j]);
        out.sigma.push(record.sigma[j]);
        out.augmented.push(true);
        added += 1;
    }
    if added > 0 {
        out.provenance
            .push(format!("reflect_inboard: added {added} point(s) beyond {threshold}"));
    }
    if out.augmented.iter().all(|a| !a) {
        out.augmented.clear();
    }
    out
}

/// A validated collection of profiles with covariate reference values.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub records: Vec<ProfileRecord>,
    pub normalization: Normalization,
}

impl ProfileSet {
    /// Validate every record and compute reference values: geometric means
    /// for log covariates and arithmetic means for linear ones, over every
    /// covariate available in all records.
    pub fn new(records: Vec<ProfileRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptySet);
        }
        for r in &records {
            r.validate()?;
        }
        let normalization = compute_normalization(&records);
        for (c, v) in &normalization {
            if c.transform() == Transform::Log && !(*v > 0.0) {
                return Err(Error::Validation {
                    id: "<set>".into(),
                    field: c.name().into(),
                    message: format!("nonpositive reference value {v} for log covariate"),
                });
            }
        }
        Ok(Self {
            records,
            normalization,
        })
    }

    /// Replace reference values, e.g. with those stored in a fitted model.
    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        for (k, v) in normalization {
            self.normalization.insert(k, v);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Apply `clean_edge` then `reflect_inboard` to every record.
    pub fn preprocess(&self, edge_threshold: f64, reflection_threshold: Option<f64>) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let cleaned = clean_edge_with(r, edge_threshold);
                match reflection_threshold {
                    Some(t) => reflect_inboard(&cleaned, t),
                    None => cleaned,
                }
            })
            .collect();
        let mut set = ProfileSet::new(records)?;
        set.normalization = self.normalization.clone();
        Ok(set)
    }

    pub fn measured_points(&self) -> usize {
        self.records.iter().map(|r| r.measured_count()).sum()
    }

    /// Mean over profiles of the average measured temperature.
    pub fn mean_line_average_temperature(&self) -> f64 {
        let per: Vec<f64> = self
            .records
            .iter()
            .map(|r| {
                let (s, n) = (0..r.len())
                    .filter(|&j| !r.is_augmented(j))
                    .fold((0.0, 0usize), |(s, n), j| (s + r.temp[j], n + 1));
                s / n.max(1) as f64
            })
            .collect();
        per.iter().sum::<f64>() / per.len() as f64
    }

    pub fn write_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        write_profiles(path, &self.records)
    }
}

fn compute_normalization(records: &[ProfileRecord]) -> Normalization {
    let mut out = Normalization::new();
    for c in Covariate::ALL {
        let values: Option<Vec<f64>> = records.iter().map(|r| c.raw(r).ok()).collect();
        let Some(values) = values else { continue };
        let n = values.len() as f64;
        let reference = match c.transform() {
            Transform::Log => {
                if values.iter().any(|v| !(*v > 0.0)) {
                    continue;
                }
                (values.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
            }
            Transform::Linear => values.iter().sum::<f64>() / n,
        };
        out.insert(c, reference);
    }
    out
}

/// Read one record per line. Blank lines are skipped.
pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ProfileRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    ProfileSet::new(records)
}

pub fn write_profiles(path: impl AsRef<Path>, records: &[ProfileRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("profile records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
