//! Strain time-series ingestion: CSV loading, shape-preserving interpolation
//! onto a uniform 200-point grid, z-score normalization with
//! training-strains-only statistics, and the held-out-strain split (low and
//! high producers train, the medium producer tests).

mod fixture;
mod pchip;

pub use fixture::write_fixture;
pub use pchip::Pchip;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loss::{Denorm, LossContext};
use crate::odeint::{OdeError, TimeGrid};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing required feature column '{0}'")]
    Schema(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Grid(#[from] OdeError),
}

impl DataError {
    /// Stable machine-readable class name for CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::Schema(_) => "SchemaError",
            DataError::Data(_) => "DataError",
            DataError::Config(_) => "ConfigError",
            DataError::Io(_) => "IoError",
            DataError::Csv(_) => "DataError",
            DataError::Grid(_) => "DataError",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Limonene,
    Isopentenol,
}

/// Protein (regulator) features common to both pathways, in table order.
pub const CONTROLS: [&str; 10] = [
    "AtoB",
    "GPPS",
    "HMGR",
    "HMGS",
    "Idi",
    "Limonene Synthase",
    "MK",
    "NudB",
    "PMD",
    "PMK",
];

impl Pathway {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s.to_ascii_lowercase().as_str() {
            "limonene" => Ok(Pathway::Limonene),
            "isopentenol" => Ok(Pathway::Isopentenol),
            other => Err(DataError::Config(format!(
                "unknown pathway '{other}' (expected limonene or isopentenol)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pathway::Limonene => "limonene",
            Pathway::Isopentenol => "isopentenol",
        }
    }

    /// Metabolite (state) features for this pathway, in table order; each
    /// pathway carries its own target metabolite.
    pub fn states(&self) -> Vec<&'static str> {
        match self {
            Pathway::Limonene => vec![
                "Acetyl-CoA",
                "HMG-CoA",
                "Mevalonate",
                "Mev-P",
                "IPP/DMAPP",
                "Limonene",
                "OD600",
                "GPP",
                "NAD",
                "NADP",
                "Acetate",
                "Pyruvate",
                "Citrate",
            ],
            Pathway::Isopentenol => vec![
                "Acetyl-CoA",
                "HMG-CoA",
                "Mevalonate",
                "Mev-P",
                "IPP/DMAPP",
                "OD600",
                "GPP",
                "NAD",
                "NADP",
                "Acetate",
                "Pyruvate",
                "Citrate",
                "Isopentenol",
            ],
        }
    }

    pub fn target(&self) -> &'static str {
        match self {
            Pathway::Limonene => "Limonene",
            Pathway::Isopentenol => "Isopentenol",
        }
    }

    /// The medium producer held out for testing.
    pub fn default_test_strain(&self) -> &'static str {
        match self {
            Pathway::Limonene => "L2",
            Pathway::Isopentenol => "I2",
        }
    }

    pub fn strain_ids(&self) -> [&'static str; 3] {
        match self {
            Pathway::Limonene => ["L1", "L2", "L3"],
            Pathway::Isopentenol => ["I1", "I2", "I3"],
        }
    }
}

/// Ordered feature list (controls first, then states) plus the state flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub feature_names: Vec<String>,
    pub state_mask: Vec<bool>,
    pub pathway: Option<Pathway>,
}

impl FeatureSchema {
    pub fn for_pathway(pathway: Pathway) -> Self {
        let mut names: Vec<String> = CONTROLS.iter().map(|s| s.to_string()).collect();
        let mut mask = vec![false; CONTROLS.len()];
        for s in pathway.states() {
            names.push(s.to_string());
            mask.push(true);
        }
        FeatureSchema {
            feature_names: names,
            state_mask: mask,
            pathway: Some(pathway),
        }
    }

    pub fn custom(feature_names: Vec<String>, state_mask: Vec<bool>) -> Self {
        assert_eq!(feature_names.len(), state_mask.len());
        FeatureSchema {
            feature_names,
            state_mask,
            pathway: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }
}

/// One strain's raw (pre-interpolation) series.
#[derive(Clone, Debug)]
pub struct StrainSeries {
    pub strain_id: String,
    pub times_h: Vec<f64>,
    /// `times_h.len() x dim` row-major, columns in schema order.
    pub values: Vec<f64>,
}

impl StrainSeries {
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.values.len() / self.times_h.len();
        &self.values[i * d..(i + 1) * d]
    }
}

/// The loaded file: all strains plus any ignored-column warnings.
#[derive(Clone, Debug)]
pub struct RawSeriesSet {
    pub schema: FeatureSchema,
    pub strains: Vec<StrainSeries>,
    pub warnings: Vec<String>,
    pub source_checksum: Option<String>,
}

/// Parse a `strain,time_h,<feature...>` CSV into per-strain series. Unknown
/// feature columns are ignored with a warning; missing required columns are
/// a schema error; per-strain times must increase strictly.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<RawSeriesSet, DataError> {
    let bytes = fs::read(path)?;
    let checksum = hex::encode(Sha256::digest(&bytes));
    let mut set = parse_csv_bytes(&bytes, schema)?;
    set.source_checksum = Some(checksum);
    Ok(set)
}

fn parse_csv_bytes(bytes: &[u8], schema: &FeatureSchema) -> Result<RawSeriesSet, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 2 || cols[0] != "strain" || cols[1] != "time_h" {
        return Err(DataError::Data(
            "header must start with 'strain,time_h'".into(),
        ));
    }

    // Map each schema feature to its column index.
    let mut col_of = Vec::with_capacity(schema.dim());
    for name in &schema.feature_names {
        match cols.iter().position(|c| c == name) {
            Some(i) => col_of.push(i),
            None => return Err(DataError::Schema(name.clone())),
        }
    }
    let mut warnings = Vec::new();
    for (i, c) in cols.iter().enumerate().skip(2) {
        if !schema.feature_names.iter().any(|n| n == c) {
            warnings.push(format!("ignoring unknown feature column '{c}' (index {i})"));
        }
    }

    // Group rows by strain in order of first appearance.
    let mut order: Vec<String> = Vec::new();
    let mut by_strain: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = row_idx + 2; // 1-based, after header
        let strain = record
            .get(0)
            .ok_or_else(|| DataError::Data(format!("line {line}: missing strain")))?
            .to_string();
        let time: f64 = record
            .get(1)
            .ok_or_else(|| DataError::Data(format!("line {line}: missing time_h")))?
            .parse()
            .map_err(|_| DataError::Data(format!("line {line}: time_h is not a number")))?;
        if !time.is_finite() {
            return Err(DataError::Data(format!("line {line}: non-finite time")));
        }
        if !by_strain.contains_key(&strain) {
            order.push(strain.clone());
        }
        let entry = by_strain.entry(strain.clone()).or_default();
        if let Some(&prev) = entry.0.last() {
            if time <= prev {
                return Err(DataError::Data(format!(
                    "strain {strain}: time {time} at line {line} does not increase (previous {prev})"
                )));
            }
        }
        entry.0.push(time);
        for (fi, &ci) in col_of.iter().enumerate() {
            let raw = record.get(ci).ok_or_else(|| {
                DataError::Data(format!("line {line}: missing value in column {ci}"))
            })?;
            let v: f64 = raw.parse().map_err(|_| {
                DataError::Data(format!(
                    "line {line}: '{raw}' in column '{}' is not a number",
                    schema.feature_names[fi]
                ))
            })?;
            if !v.is_finite() {
                return Err(DataError::Data(format!(
                    "line {line}: non-finite value in '{}'",
                    schema.feature_names[fi]
                )));
            }
            entry.1.push(v);
        }
    }

    let mut strains = Vec::with_capacity(order.len());
    for id in order {
        let (times, values) = by_strain.remove(&id).unwrap();
        if times.len() < 2 {
            return Err(DataError::Data(format!(
                "strain {id}: need at least 2 time points, got {}",
                times.len()
            )));
        }
        strains.push(StrainSeries {
            strain_id: id,
            times_h: times,
            values,
        });
    }
    if strains.is_empty() {
        return Err(DataError::Data("file contains no data rows".into()));
    }

    Ok(RawSeriesSet {
        schema: schema.clone(),
        strains,
        warnings,
        source_checksum: None,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    #[default]
    MonotoneCubic,
    Linear,
}

/// Resample one strain onto `n_points` uniform times spanning its raw range.
/// Returns an `n_points x dim` row-major matrix.
pub fn interpolate_to_grid(
    series: &StrainSeries,
    dim: usize,
    n_points: usize,
    mode: InterpMode,
) -> Result<Vec<f64>, DataError> {
    let n_raw = series.times_h.len();
    if n_raw < 2 {
        return Err(DataError::Data(format!(
            "strain {}: need at least 2 raw points",
            series.strain_id
        )));
    }
    let t0 = series.times_h[0];
    let t1 = series.times_h[n_raw - 1];
    let mut out = vec![0.0; n_points * dim];
    let grid_t: Vec<f64> = (0..n_points)
        .map(|i| {
            if i == n_points - 1 {
                t1
            } else {
                t0 + (t1 - t0) * i as f64 / (n_points - 1) as f64
            }
        })
        .collect();

    for j in 0..dim {
        let ys: Vec<f64> = (0..n_raw).map(|i| series.values[i * dim + j]).collect();
        match mode {
            InterpMode::MonotoneCubic => {
                let p = Pchip::new(&series.times_h, &ys)?;
                for (i, &tq) in grid_t.iter().enumerate() {
                    out[i * dim + j] = p.eval(tq);
                }
            }
            InterpMode::Linear => {
                for (i, &tq) in grid_t.iter().enumerate() {
                    out[i * dim + j] = linear_eval(&series.times_h, &ys, tq);
                }
            }
        }
    }
    Ok(out)
}

fn linear_eval(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    let n = xs.len();
    if q <= xs[0] {
        return ys[0];
    }
    if q >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&x| x <= q) - 1;
    let w = (q - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + w * (ys[k + 1] - ys[k])
}

/// Per-feature z-score statistics computed on training strains only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

impl NormStats {
    /// Population statistics over the stacked rows of `matrices`.
    pub fn compute(matrices: &[&[f64]], dim: usize) -> NormStats {
        let total_rows: usize = matrices.iter().map(|m| m.len() / dim).sum();
        let mut mean = vec![0.0; dim];
        for m in matrices {
            for row in m.chunks(dim) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in mean.iter_mut() {
            *v /= total_rows as f64;
        }
        let mut var = vec![0.0; dim];
        for m in matrices {
            for row in m.chunks(dim) {
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
        }
        let mut std = Vec::with_capacity(dim);
        let mut zero_variance = Vec::with_capacity(dim);
        for (j, v) in var.iter().enumerate() {
            let s = (v / total_rows as f64).sqrt();
            let flat = s <= 1e-12 * (1.0 + mean[j].abs());
            zero_variance.push(flat);
            std.push(s);
        }
        NormStats {
            mean,
            std,
            zero_variance,
        }
    }

    /// z-score in place; zero-variance features are centered only.
    pub fn normalize(&self, matrix: &mut [f64]) {
        let dim = self.mean.len();
        for row in matrix.chunks_mut(dim) {
            for (j, v) in row.iter_mut().enumerate() {
                *v -= self.mean[j];
                if !self.zero_variance[j] {
                    *v /= self.std[j];
                }
            }
        }
    }

    pub fn denormalize(&self, matrix: &mut [f64]) {
        let dim = self.mean.len();
        for row in matrix.chunks_mut(dim) {
            for (j, v) in row.iter_mut().enumerate() {
                if !self.zero_variance[j] {
                    *v *= self.std[j];
                }
                *v += self.mean[j];
            }
        }
    }

    pub fn denorm_map(&self) -> Denorm {
        Denorm {
            scale: self
                .std
                .iter()
                .zip(&self.zero_variance)
                .map(|(s, &z)| if z { 1.0 } else { *s })
                .collect(),
            shift: self.mean.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: String,
}

/// Held-out-strain assignment: the pathway's medium producer tests unless an
/// explicit override names another strain.
pub fn resolve_split(
    strain_ids: &[String],
    pathway: Option<Pathway>,
    test_override: Option<&str>,
) -> Result<Split, DataError> {
    let test = match test_override {
        Some(id) => {
            if !strain_ids.iter().any(|s| s == id) {
                return Err(DataError::Config(format!(
                    "test strain override '{id}' not present in {strain_ids:?}"
                )));
            }
            id.to_string()
        }
        None => {
            if strain_ids.len() != 3 {
                return Err(DataError::Config(format!(
                    "default split expects exactly 3 strains, got {} ({strain_ids:?}); \
                     pass an explicit test strain to override",
                    strain_ids.len()
                )));
            }
            let medium = pathway
                .map(|p| p.default_test_strain().to_string())
                .ok_or_else(|| {
                    DataError::Config("no pathway given; pass an explicit test strain".into())
                })?;
            if !strain_ids.contains(&medium) {
                return Err(DataError::Config(format!(
                    "medium producer '{medium}' not present in {strain_ids:?}"
                )));
            }
            medium
        }
    };
    let train: Vec<String> = strain_ids.iter().filter(|s| **s != test).cloned().collect();
    if train.is_empty() {
        return Err(DataError::Config("split leaves no training strains".into()));
    }
    Ok(Split { train, test })
}

struct StrainBlock {
    id: String,
    /// `n_points x dim`, normalized units.
    values: Vec<f64>,
    accesses: AtomicU64,
}

/// Interpolated, normalized, split dataset. Strain matrix reads are counted
/// so the no-test-leak property is checkable after training.
pub struct Dataset {
    pub pathway: Option<Pathway>,
    pub grid: TimeGrid,
    pub feature_names: Vec<String>,
    pub state_mask: Vec<bool>,
    pub norm: NormStats,
    pub split: Split,
    pub source_checksum: Option<String>,
    strains: Vec<StrainBlock>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildOptions {
    pub n_points: usize,
    pub interpolation: InterpMode,
    pub test_strain: Option<String>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            n_points: 200,
            interpolation: InterpMode::MonotoneCubic,
            test_strain: None,
        }
    }
}

/// Interpolate, split, and normalize a loaded series set.
pub fn build_dataset(raw: &RawSeriesSet, opts: &BuildOptions) -> Result<Dataset, DataError> {
    if opts.n_points < 2 {
        return Err(DataError::Config("n_points must be >= 2".into()));
    }
    let dim = raw.schema.dim();

    // All strains must share the experiment's time span.
    let t0 = raw.strains[0].times_h[0];
    let t1 = *raw.strains[0].times_h.last().unwrap();
    let span = t1 - t0;
    for s in &raw.strains {
        let (s0, s1) = (s.times_h[0], *s.times_h.last().unwrap());
        if (s0 - t0).abs() > 1e-9 * span.abs() || (s1 - t1).abs() > 1e-9 * span.abs() {
            return Err(DataError::Data(format!(
                "strain {} spans [{s0}, {s1}] but {} spans [{t0}, {t1}]",
                s.strain_id, raw.strains[0].strain_id
            )));
        }
    }

    let ids: Vec<String> = raw.strains.iter().map(|s| s.strain_id.clone()).collect();
    let split = resolve_split(&ids, raw.schema.pathway, opts.test_strain.as_deref())?;

    let mut matrices: Vec<(String, Vec<f64>)> = Vec::with_capacity(raw.strains.len());
    for s in &raw.strains {
        let m = interpolate_to_grid(s, dim, opts.n_points, opts.interpolation)?;
        matrices.push((s.strain_id.clone(), m));
    }

    let train_views: Vec<&[f64]> = matrices
        .iter()
        .filter(|(id, _)| split.train.contains(id))
        .map(|(_, m)| m.as_slice())
        .collect();
    let norm = NormStats::compute(&train_views, dim);

    let strains = matrices
        .into_iter()
        .map(|(id, mut m)| {
            norm.normalize(&mut m);
            StrainBlock {
                id,
                values: m,
                accesses: AtomicU64::new(0),
            }
        })
        .collect();

    let grid = TimeGrid::uniform(0.0, 1.0, opts.n_points)?.with_hours(t0, span);

    Ok(Dataset {
        pathway: raw.schema.pathway,
        grid,
        feature_names: raw.schema.feature_names.clone(),
        state_mask: raw.schema.state_mask.clone(),
        norm,
        split,
        source_checksum: raw.source_checksum.clone(),
        strains,
    })
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn strain_ids(&self) -> Vec<&str> {
        self.strains.iter().map(|s| s.id.as_str()).collect()
    }

    /// Normalized `n_points x dim` matrix for one strain. Every call is
    /// counted against that strain.
    pub fn strain(&self, id: &str) -> Result<&[f64], DataError> {
        let block = self
            .strains
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| DataError::Config(format!("unknown strain '{id}'")))?;
        block.accesses.fetch_add(1, Ordering::Relaxed);
        Ok(&block.values)
    }

    pub fn access_count(&self, id: &str) -> u64 {
        self.strains
            .iter()
            .find(|s| s.id == id)
            .map(|s| s.accesses.load(Ordering::Relaxed))
            .unwrap_or(0)
    }

    pub fn reset_access_counts(&self) {
        for s in &self.strains {
            s.accesses.store(0, Ordering::Relaxed);
        }
    }

    pub fn denorm(&self) -> Denorm {
        self.norm.denorm_map()
    }

    pub fn loss_context(&self) -> LossContext {
        LossContext {
            denorm: self.denorm(),
            state_mask: self.state_mask.clone(),
        }
    }

    /// State-feature indices (the columns reported in RMSE tables).
    pub fn state_indices(&self) -> Vec<usize> {
        self.state_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn save_cache(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        let meta = CacheMeta {
            schema_version: 1,
            pathway: self.pathway,
            feature_names: self.feature_names.clone(),
            state_mask: self.state_mask.clone(),
            strain_ids: self.strains.iter().map(|s| s.id.clone()).collect(),
            split: self.split.clone(),
            norm: self.norm.clone(),
            hours: self.grid.hours,
            n_points: self.n_points(),
            source_checksum: self.source_checksum.clone(),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| DataError::Data(format!("cache metadata: {e}")))?;
        fs::write(dir.join("dataset.json"), json)?;

        for s in &self.strains {
            let mut w = csv::Writer::from_path(dir.join(strain_file_name(&s.id)))?;
            let mut header = vec!["time_norm".to_string()];
            header.extend(self.feature_names.iter().cloned());
            w.write_record(&header)?;
            for (i, &t) in self.grid.times().iter().enumerate() {
                let mut rec = vec![format!("{t}")];
                let row = &s.values[i * self.dim()..(i + 1) * self.dim()];
                rec.extend(row.iter().map(|v| format!("{v}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load_cache(dir: &Path) -> Result<Dataset, DataError> {
        let meta_path = dir.join("dataset.json");
        let json = fs::read_to_string(&meta_path)?;
        let meta: CacheMeta = serde_json::from_str(&json)
            .map_err(|e| DataError::Data(format!("{}: {e}", meta_path.display())))?;
        if meta.schema_version != 1 {
            return Err(DataError::Data(format!(
                "unsupported cache schema version {}",
                meta.schema_version
            )));
        }
        let dim = meta.feature_names.len();

        let mut strains = Vec::with_capacity(meta.strain_ids.len());
        for id in &meta.strain_ids {
            let path = dir.join(strain_file_name(id));
            let mut reader = csv::Reader::from_path(&path)?;
            let mut values = Vec::with_capacity(meta.n_points * dim);
            for rec in reader.records() {
                let rec = rec?;
                for v in rec.iter().skip(1) {
                    values.push(v.parse::<f64>().map_err(|_| {
                        DataError::Data(format!("{}: bad float '{v}'", path.display()))
                    })?);
                }
            }
            if values.len() != meta.n_points * dim {
                return Err(DataError::Data(format!(
                    "{}: expected {} values, got {}",
                    path.display(),
                    meta.n_points * dim,
                    values.len()
                )));
            }
            strains.push(StrainBlock {
                id: id.clone(),
                values,
                accesses: AtomicU64::new(0),
            });
        }

        let mut grid = TimeGrid::uniform(0.0, 1.0, meta.n_points)?;
        if let Some(h) = meta.hours {
            grid = grid.with_hours(h.offset, h.scale);
        }
        Ok(Dataset {
            pathway: meta.pathway,
            grid,
            feature_names: meta.feature_names,
            state_mask: meta.state_mask,
            norm: meta.norm,
            split: meta.split,
            source_checksum: meta.source_checksum,
            strains,
        })
    }

    /// Assemble a dataset directly from normalized-space matrices; used for
    /// synthetic experiments that bypass the CSV pipeline.
    pub fn from_normalized_parts(
        pathway: Option<Pathway>,
        grid: TimeGrid,
        feature_names: Vec<String>,
        state_mask: Vec<bool>,
        norm: NormStats,
        split: Split,
        strains: Vec<(String, Vec<f64>)>,
    ) -> Dataset {
        let blocks = strains
            .into_iter()
            .map(|(id, values)| StrainBlock {
                id,
                values,
                accesses: AtomicU64::new(0),
            })
            .collect();
        Dataset {
            pathway,
            grid,
            feature_names,
            state_mask,
            norm,
            split,
            source_checksum: None,
            strains: blocks,
        }
    }
}

fn strain_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("strain_{safe}.csv")
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    schema_version: u32,
    pathway: Option<Pathway>,
    feature_names: Vec<String>,
    state_mask: Vec<bool>,
    strain_ids: Vec<String>,
    split: Split,
    norm: NormStats,
    hours: Option<crate::odeint::TimeAffine>,
    n_points: usize,
    source_checksum: Option<String>,
}
