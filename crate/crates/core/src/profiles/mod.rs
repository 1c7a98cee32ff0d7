//! Profile tables at site, well and treatment level, mean aggregation, the
//! per-plate control-mean correction (PCs) and ZCA sphering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::util::{fmt_sig9, read_file, write_atomic};

// ── types ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Site,
    Well,
    Treatment,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Site => "site",
            Level::Well => "well",
            Level::Treatment => "treatment",
        })
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "site" => Ok(Level::Site),
            "well" => Ok(Level::Well),
            "treatment" => Ok(Level::Treatment),
            _ => Err(Error::InvalidArgument(format!("unknown profile level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Control,
    Treated,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Control => "control",
            Role::Treated => "treated",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "control" => Ok(Role::Control),
            "treated" => Ok(Role::Treated),
            _ => Err(Error::InvalidArgument(format!("unknown role {s:?}"))),
        }
    }
}

/// One profile. Keys finer than the table level are empty strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub plate: String,
    pub well: String,
    pub site: String,
    pub treatment: String,
    pub role: Role,
    #[serde(skip)]
    pub vector: Vec<f64>,
}

impl ProfileRow {
    fn key(&self, level: Level) -> (String, String, String) {
        match level {
            Level::Site => (self.plate.clone(), self.well.clone(), self.site.clone()),
            Level::Well => (self.plate.clone(), self.well.clone(), String::new()),
            Level::Treatment => (self.treatment.clone(), String::new(), String::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    level: Level,
    dim: usize,
    rows: Vec<ProfileRow>,
}

impl ProfileTable {
    /// Validate dimensions, finiteness and key uniqueness for `level`.
    pub fn new(level: Level, dim: usize, rows: Vec<ProfileRow>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("profile dimension must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &rows {
            if r.vector.len() != dim {
                return Err(Error::shape(
                    "profile_table",
                    format!("row {:?} has {} values, expected {dim}", r.key(level), r.vector.len()),
                ));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: format!("profile {:?}", r.key(level)) });
            }
            if !seen.insert(r.key(level)) {
                return Err(Error::InvalidArgument(format!("duplicate {level} key {:?}", r.key(level))));
            }
        }
        Ok(Self { level, dim, rows })
    }

    /// Build from a `[n, dim]` matrix and row metadata.
    pub fn from_matrix(level: Level, matrix: &Tensor<f64>, mut rows: Vec<ProfileRow>) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[0] != rows.len() {
            return Err(Error::shape("profile_table", format!("matrix {:?} for {} rows", matrix.shape(), rows.len())));
        }
        let dim = matrix.shape()[1];
        for (r, chunk) in rows.iter_mut().zip(matrix.data().chunks(dim)) {
            r.vector = chunk.to_vec();
        }
        Self::new(level, dim, rows)
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[ProfileRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row-major `[n, dim]` matrix of all vectors.
    pub fn matrix(&self) -> Tensor<f64> {
        let data = self.rows.iter().flat_map(|r| r.vector.iter().copied()).collect();
        Tensor::new(vec![self.rows.len(), self.dim], data).expect("table rows are validated")
    }

    pub fn plates(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.plate.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Ensure every plate has at least one control row.
    pub fn check_controls(&self) -> Result<()> {
        for plate in self.plates() {
            if !self.rows.iter().any(|r| r.plate == plate && r.role == Role::Control) {
                return Err(Error::MissingControls(plate));
            }
        }
        Ok(())
    }

    fn map_vectors(&self, mut f: impl FnMut(&ProfileRow) -> Vec<f64>) -> Result<Self> {
        let rows = self.rows.iter().map(|r| ProfileRow { vector: f(r), ..r.clone() }).collect();
        Self::new(self.level, self.dim, rows)
    }
}

// ── aggregation ──────────────────────────────────────────────────────────

fn mean_of(vectors: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for v in vectors {
        acc.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += x);
    }
    let n = vectors.len() as f64;
    acc.into_iter().map(|a| a / n).collect()
}

/// Mean-aggregate to the next coarser level. Rows are summed in key order,
/// so the result does not depend on the input row order.
pub fn aggregate(table: &ProfileTable, to: Level) -> Result<ProfileTable> {
    let ok = matches!((table.level, to), (Level::Site, Level::Well) | (Level::Well, Level::Treatment));
    if !ok {
        return Err(Error::InvalidArgument(format!("cannot aggregate {} to {to}", table.level)));
    }
    let mut order: Vec<&ProfileRow> = table.rows.iter().collect();
    order.sort_by_key(|r| r.key(Level::Site));
    let mut groups: BTreeMap<(String, String, String), Vec<&ProfileRow>> = BTreeMap::new();
    for r in order {
        groups.entry(r.key(to)).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let first = members[0];
        if let Some(odd) = members.iter().find(|m| m.role != first.role || m.treatment != first.treatment) {
            return Err(Error::Invariant(format!(
                "group {key:?} mixes {}/{} with {}/{}",
                first.treatment, first.role, odd.treatment, odd.role
            )));
        }
        let vectors: Vec<&[f64]> = members.iter().map(|m| m.vector.as_slice()).collect();
        let (plate, well) = match to {
            Level::Well => (first.plate.clone(), first.well.clone()),
            _ => (String::new(), String::new()),
        };
        rows.push(ProfileRow {
            plate,
            well,
            site: String::new(),
            treatment: first.treatment.clone(),
            role: first.role,
            vector: mean_of(&vectors, table.dim),
        });
    }
    ProfileTable::new(to, table.dim, rows)
}

// ── phenotype correction ─────────────────────────────────────────────────

/// Mean of all control profiles of `plate`: with C control wells of S sites
/// each this is `(1/(C·S)) Σ_j Σ_k ẑ_jk`.
pub fn pcs_control_mean(table: &ProfileTable, plate: &str) -> Result<Vec<f64>> {
    let controls: Vec<&[f64]> = table
        .rows
        .iter()
        .filter(|r| r.plate == plate && r.role == Role::Control)
        .map(|r| r.vector.as_slice())
        .collect();
    if controls.is_empty() {
        return Err(Error::MissingControls(plate.to_string()));
    }
    Ok(mean_of(&controls, table.dim))
}

/// Subtract `alpha` times the plate's control mean from every row of the plate.
pub fn pcs_apply(table: &ProfileTable, alpha: f64) -> Result<ProfileTable> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0,1], got {alpha}")));
    }
    if table.level == Level::Treatment {
        return Err(Error::InvalidArgument("PCs needs a site- or well-level table".into()));
    }
    let means = table
        .plates()
        .into_iter()
        .map(|p| pcs_control_mean(table, &p).map(|m| (p, m)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    table.map_vectors(|r| {
        let w = &means[&r.plate];
        r.vector.iter().zip(w).map(|(v, m)| v - alpha * m).collect()
    })
}

// ── sphering ─────────────────────────────────────────────────────────────

/// ZCA whitening transform `x ↦ matrix·(x − mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`, symmetric.
    pub matrix: Vec<f64>,
    pub epsilon: f64,
}

impl Whitening {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Relative regularizer used when no epsilon is given.
pub const DEFAULT_EPSILON_SCALE: f64 = 1e-3;

fn reference_moments(reference: &[&[f64]]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if reference.len() < 2 {
        return Err(Error::InvalidArgument(format!("sphering needs >= 2 reference rows, got {}", reference.len())));
    }
    let dim = reference[0].len();
    if dim == 0 || reference.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("sphering_fit", "reference rows differ in length".to_string()));
    }
    let mean = mean_of(reference, dim);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in reference {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= (reference.len() - 1) as f64;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sphering covariance".into() });
    }
    Ok((mean, cov))
}

/// Default epsilon: `1e-3 ×` the mean eigenvalue (trace / dim) of the
/// reference covariance.
pub fn default_epsilon(reference: &[&[f64]]) -> Result<f64> {
    let (_, cov) = reference_moments(reference)?;
    Ok(DEFAULT_EPSILON_SCALE * cov.trace() / cov.nrows() as f64)
}

/// Fit `U (Λ + εI)^(−1/2) Uᵀ` on the sample covariance of `reference`.
pub fn sphering_fit(reference: &[&[f64]], epsilon: f64) -> Result<Whitening> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let (mean, cov) = reference_moments(reference)?;
    let dim = mean.len();
    let eig = cov.symmetric_eigen();
    let scales = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            let s = l.max(0.0) + epsilon;
            if s > 0.0 {
                Ok(1.0 / s.sqrt())
            } else {
                Err(Error::Invariant("reference covariance is singular; use epsilon > 0".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let u = &eig.eigenvectors;
    let mut matrix = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let v: f64 = (0..dim).map(|k| u[(i, k)] * scales[k] * u[(j, k)]).sum();
            matrix[i * dim + j] = v;
            matrix[j * dim + i] = v;
        }
    }
    Ok(Whitening { mean, matrix, epsilon })
}

pub fn sphering_apply(table: &ProfileTable, w: &Whitening) -> Result<ProfileTable> {
    if w.dim() != table.dim {
        return Err(Error::shape("sphering_apply", format!("whitening dim {} vs table dim {}", w.dim(), table.dim)));
    }
    let d = table.dim;
    table.map_vectors(|r| {
        let c: Vec<f64> = r.vector.iter().zip(&w.mean).map(|(x, m)| x - m).collect();
        w.matrix.chunks(d).map(|row| row.iter().zip(&c).map(|(a, b)| a * b).sum()).collect()
    })
}

// ── pipeline ─────────────────────────────────────────────────────────────

/// Outputs of [`correct`].
#[derive(Debug, Clone)]
pub struct Corrected {
    /// Well profiles after PCs and sphering.
    pub wells: ProfileTable,
    pub treatments: ProfileTable,
    pub whitening: Whitening,
}

/// Site-level PCs, aggregation to wells, sphering fitted on the control
/// wells of the whole run, then aggregation to treatments. `epsilon = None`
/// selects [`default_epsilon`].
pub fn correct(sites: &ProfileTable, alpha: f64, epsilon: Option<f64>) -> Result<Corrected> {
    if sites.level != Level::Site {
        return Err(Error::InvalidArgument(format!("expected a site-level table, got {}", sites.level)));
    }
    sites.check_controls()?;
    let pcs = pcs_apply(sites, alpha)?;
    let wells = aggregate(&pcs, Level::Well)?;
    let reference: Vec<&[f64]> =
        wells.rows.iter().filter(|r| r.role == Role::Control).map(|r| r.vector.as_slice()).collect();
    let eps = match epsilon {
        Some(e) => e,
        None => default_epsilon(&reference)?,
    };
    let whitening = sphering_fit(&reference, eps)?;
    let wells = sphering_apply(&wells, &whitening)?;
    let treatments = aggregate(&wells, Level::Treatment)?;
    Ok(Corrected { wells, treatments, whitening })
}

// ── files ────────────────────────────────────────────────────────────────

const META_COLUMNS: [&str; 5] = ["plate", "well", "site", "treatment", "role"];

/// CSV layout: a first line `level,dim`, a column header
/// `plate,well,site,treatment,role,f0000,…`, then one row per profile.
pub fn write_profiles_csv(table: &ProfileTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    w.write_record([table.level.to_string(), table.dim.to_string()])?;
    let header = META_COLUMNS.iter().map(|s| s.to_string()).chain((0..table.dim).map(|i| format!("f{i:04}")));
    w.write_record(header)?;
    for r in &table.rows {
        let fields = [r.plate.clone(), r.well.clone(), r.site.clone(), r.treatment.clone(), r.role.to_string()]
            .into_iter()
            .chain(r.vector.iter().map(|&v| fmt_sig9(v)));
        w.write_record(fields)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_profiles_csv(path: impl AsRef<Path>) -> Result<ProfileTable> {
    let path = path.as_ref();
    let bad = |detail: String| Error::input(path, detail);
    let mut rdr =
        csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut records = rdr.records();
    let first = records.next().ok_or_else(|| bad("empty profile file".into()))??;
    if first.len() != 2 {
        return Err(bad("first line must be `level,dim`".into()));
    }
    let level: Level = first[0].parse()?;
    let dim: usize = first[1].parse().map_err(|_| bad(format!("bad dimension {:?}", &first[1])))?;
    let header = records.next().ok_or_else(|| bad("missing column header".into()))??;
    if header.len() != META_COLUMNS.len() + dim || header.iter().take(5).ne(META_COLUMNS.iter().copied()) {
        return Err(bad(format!("column header does not match `plate,well,site,treatment,role` + {dim} features")));
    }
    let mut rows = Vec::new();
    for (line, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(bad(format!("data row {} has {} fields, expected {}", line + 1, rec.len(), header.len())));
        }
        let vector = rec
            .iter()
            .skip(5)
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad(format!("data row {}: bad number {s:?}", line + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ProfileRow {
            plate: rec[0].to_string(),
            well: rec[1].to_string(),
            site: rec[2].to_string(),
            treatment: rec[3].to_string(),
            role: rec[4].parse()?,
            vector,
        });
    }
    ProfileTable::new(level, dim, rows).map_err(|e| bad(e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    level: Level,
    dim: usize,
    rows: Vec<ProfileRow>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Lossless binary form: a float64 tensor file plus a `<path>.json` sidecar
/// holding the row metadata.
pub fn write_profiles_binary(table: &ProfileTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_tensor(path, &table.matrix())?;
    let side = Sidecar { level: table.level, dim: table.dim, rows: table.rows.clone() };
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&side)?)
}

pub fn read_profiles_binary(path: impl AsRef<Path>) -> Result<ProfileTable> {
    let path = path.as_ref();
    let matrix: Tensor<f64> = read_tensor(path)?;
    let side: Sidecar = {
        let side_path = sidecar_path(path);
        serde_json::from_slice(&read_file(&side_path)?).map_err(|e| Error::input(&side_path, e.to_string()))?
    };
    if matrix.shape() != [side.rows.len(), side.dim] {
        return Err(Error::input(path, format!("payload {:?} does not match sidecar", matrix.shape())));
    }
    ProfileTable::from_matrix(side.level, &matrix, side.rows)
}

/// Read a profile table, choosing the format by extension (`.csv` or binary).
pub fn read_profiles(path: impl AsRef<Path>) -> Result<ProfileTable> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_profiles_csv(path)
    } else {
        read_profiles_binary(path)
    }
}

pub fn write_profiles(table: &ProfileTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        write_profiles_csv(table, path)
    } else {
        write_profiles_binary(table, path)
    }
}
