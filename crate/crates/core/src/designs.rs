//! Experimental designs, simulation of synthetic data and dataset I/O.
//!
//! Factor labels are 1-based in files and 0-based in memory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Column layout of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// `y,row,col,treatment`
    Latin,
    /// `y,machine,treatment,measure`
    Nested,
}

impl Schema {
    pub fn factor_names(self) -> [&'static str; 3] {
        match self {
            Schema::Latin => ["row", "col", "treatment"],
            Schema::Nested => ["machine", "treatment", "measure"],
        }
    }

    pub fn header(self) -> String {
        let [a, b, c] = self.factor_names();
        format!("y,{a},{b},{c}")
    }

    fn from_header(fields: &[&str]) -> Option<Self> {
        [Schema::Latin, Schema::Nested].into_iter().find(|s| {
            let names = s.factor_names();
            fields.len() == 4 && fields[0] == "y" && fields[1..] == names[..]
        })
    }

    /// Position of the treatment label among the three factors.
    pub fn treatment_slot(self) -> usize {
        match self {
            Schema::Latin => 2,
            Schema::Nested => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub y: f64,
    /// 0-based labels in [`Schema::factor_names`] order.
    pub factors: [usize; 3],
}

/// Observations sharing one schema. Level counts are the largest label seen
/// in each factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    levels: [usize; 3],
    rows: Vec<Observation>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Vec<Observation>) -> Result<Self> {
        let mut levels = [0usize; 3];
        for (i, obs) in rows.iter().enumerate() {
            if !obs.y.is_finite() {
                return Err(Error::Validation(format!("observation {} has non-finite y", i + 1)));
            }
            for (l, &f) in levels.iter_mut().zip(&obs.factors) {
                *l = (*l).max(f + 1);
            }
        }
        if schema == Schema::Nested {
            let mut treatment_of = vec![None; levels[0]];
            for obs in &rows {
                let [m, t, _] = obs.factors;
                match treatment_of[m] {
                    None => treatment_of[m] = Some(t),
                    Some(prev) if prev != t => {
                        return Err(Error::Validation(format!(
                            "machine {} appears under treatments {} and {}",
                            m + 1,
                            prev + 1,
                            t + 1
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { schema, levels, rows })
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn y(&self) -> Vec<f64> {
        self.rows.iter().map(|o| o.y).collect()
    }

    /// Number of levels of the named factor.
    pub fn levels(&self, factor: &str) -> Option<usize> {
        self.factor_slot(factor).map(|i| self.levels[i])
    }

    /// 0-based labels of the named factor, one per observation.
    pub fn labels(&self, factor: &str) -> Option<Vec<usize>> {
        let slot = self.factor_slot(factor)?;
        Some(self.rows.iter().map(|o| o.factors[slot]).collect())
    }

    pub fn factor_slot(&self, factor: &str) -> Option<usize> {
        self.schema.factor_names().iter().position(|&n| n == factor)
    }

    pub fn n_treatments(&self) -> usize {
        self.levels[self.schema.treatment_slot()]
    }

    /// Observations grouped by treatment, in treatment order.
    pub fn by_treatment(&self) -> Vec<Vec<f64>> {
        let slot = self.schema.treatment_slot();
        let mut groups = vec![Vec::new(); self.n_treatments()];
        for obs in &self.rows {
            groups[obs.factors[slot]].push(obs.y);
        }
        groups
    }

    /// Copy with every `y` replaced by `f(y)`.
    pub fn map_y(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let rows = self.rows.iter().map(|o| Observation { y: f(o.y), ..*o }).collect();
        Self::new(self.schema, rows)
    }
}

/// K×K Latin square of 0-based treatment indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatinSquareDesign {
    order: usize,
    assignment: Vec<Vec<usize>>,
}

impl LatinSquareDesign {
    pub fn order(&self) -> usize {
        self.order
    }

    /// `assignment()[row][col]` is the treatment index of that plot.
    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }

    pub fn is_latin(&self) -> bool {
        is_latin(&self.assignment)
    }

    /// Recover the square from a latin-schema dataset with one observation
    /// per plot.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.schema() != Schema::Latin {
            return Err(Error::Validation("dataset does not use the latin schema".into()));
        }
        let k = data.levels[0];
        if data.levels != [k, k, k] || data.len() != k * k {
            return Err(Error::Validation(format!(
                "expected {k}x{k} plots with {k} treatments, got {} observations with levels {:?}",
                data.len(),
                data.levels
            )));
        }
        let mut grid = vec![vec![usize::MAX; k]; k];
        for obs in data.rows() {
            let [r, c, t] = obs.factors;
            if grid[r][c] != usize::MAX {
                return Err(Error::Validation(format!("plot ({}, {}) appears twice", r + 1, c + 1)));
            }
            grid[r][c] = t;
        }
        if !is_latin(&grid) {
            return Err(Error::Validation("treatment layout is not a Latin square".into()));
        }
        Ok(Self { order: k, assignment: grid })
    }
}

fn is_latin(grid: &[Vec<usize>]) -> bool {
    let k = grid.len();
    let row_ok = grid.iter().all(|row| {
        let mut seen = vec![false; k];
        row.len() == k && row.iter().all(|&t| t < k && !std::mem::replace(&mut seen[t], true))
    });
    let col_ok = (0..k).all(|c| {
        let mut seen = vec![false; k];
        grid.iter().all(|row| row[c] < k && !std::mem::replace(&mut seen[row[c]], true))
    });
    row_ok && col_ok
}

/// Random Latin square: the cyclic square `(r + c) mod K` with its rows,
/// columns and symbols independently permuted.
pub fn make_latin_square(order: usize, seed: u64) -> Result<LatinSquareDesign> {
    if order == 0 {
        return Err(Error::InvalidArgument("Latin square order must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "latin-square", 0);
    let mut rows: Vec<usize> = (0..order).collect();
    let mut cols: Vec<usize> = (0..order).collect();
    let mut symbols: Vec<usize> = (0..order).collect();
    rows.shuffle(&mut rng);
    cols.shuffle(&mut rng);
    symbols.shuffle(&mut rng);
    let assignment = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| symbols[(r + c) % order]).collect())
        .collect();
    Ok(LatinSquareDesign { order, assignment })
}

/// Machines partitioned into treatment groups, each measured `n_measures`
/// times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedDesign {
    pub n_machines: usize,
    pub n_groups: usize,
    pub n_measures: usize,
    /// 0-based treatment of each machine.
    pub group_of: Vec<usize>,
}

impl NestedDesign {
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }
}

/// Random most-even partition: the first `n_machines % n_groups` groups get
/// one extra machine; which machines land where is shuffled by `seed`.
pub fn make_nested_design(
    n_machines: usize,
    n_groups: usize,
    n_measures: usize,
    seed: u64,
) -> Result<NestedDesign> {
    if n_groups == 0 || n_measures == 0 {
        return Err(Error::InvalidArgument("groups and measures must be positive".into()));
    }
    if n_groups > n_machines {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n_machines} machines into {n_groups} nonempty groups"
        )));
    }
    let (base, extra) = (n_machines / n_groups, n_machines % n_groups);
    let mut slots: Vec<usize> = (0..n_groups)
        .flat_map(|g| std::iter::repeat(g).take(base + usize::from(g < extra)))
        .collect();
    let mut rng = rng::stream(seed, "nested-design", 0);
    slots.shuffle(&mut rng);
    Ok(NestedDesign { n_machines, n_groups, n_measures, group_of: slots })
}

/// Generative parameters for simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationTruth {
    pub grand_mean: f64,
    /// Effect sds keyed by batch name: `row`, `col`, `treatment`, `machine`.
    pub effect_sds: BTreeMap<String, f64>,
    pub residual_sd: f64,
    /// Treatment effects used verbatim instead of sampling them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_effects: Option<Vec<f64>>,
}

impl SimulationTruth {
    fn validate(&self, required: &[&str], n_treatments: usize) -> Result<()> {
        if !self.grand_mean.is_finite() {
            return Err(Error::InvalidArgument("grand_mean must be finite".into()));
        }
        if !(self.residual_sd > 0.0 && self.residual_sd.is_finite()) {
            return Err(Error::InvalidArgument("residual_sd must be positive".into()));
        }
        for (name, &sd) in &self.effect_sds {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::InvalidArgument(format!("effect_sds.{name} must be nonnegative")));
            }
        }
        for &name in required {
            if name == "treatment" && self.fixed_effects.is_some() {
                continue;
            }
            if !self.effect_sds.contains_key(name) {
                return Err(Error::InvalidArgument(format!("effect_sds.{name} is required")));
            }
        }
        if let Some(fx) = &self.fixed_effects {
            if fx.len() != n_treatments || fx.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "fixed_effects must hold {n_treatments} finite values"
                )));
            }
        }
        Ok(())
    }

    fn sd(&self, name: &str) -> f64 {
        self.effect_sds.get(name).copied().unwrap_or(0.0)
    }
}

/// The truth sidecar: generative parameters plus the effects actually drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub grand_mean: f64,
    pub effect_sds: BTreeMap<String, f64>,
    pub residual_sd: f64,
    pub realized_effects: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: TruthRecord,
}

fn draw_effects(rng: &mut rng::Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `y = grand_mean + row + col + treatment + noise` on every plot.
pub fn simulate_latin(
    design: &LatinSquareDesign,
    truth: &SimulationTruth,
    seed: u64,
) -> Result<Simulated> {
    let k = design.order();
    truth.validate(&["row", "col", "treatment"], k)?;
    let mut rng = rng::stream(seed, "simulate-latin", 0);
    let rows = draw_effects(&mut rng, k, truth.sd("row"));
    let cols = draw_effects(&mut rng, k, truth.sd("col"));
    let treats = match &truth.fixed_effects {
        Some(fx) => fx.clone(),
        None => draw_effects(&mut rng, k, truth.sd("treatment")),
    };
    let mut obs = Vec::with_capacity(k * k);
    for (r, row) in design.assignment().iter().enumerate() {
        for (c, &t) in row.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let y = truth.grand_mean + rows[r] + cols[c] + treats[t] + truth.residual_sd * noise;
            obs.push(Observation { y, factors: [r, c, t] });
        }
    }
    let realized = BTreeMap::from([
        ("row".to_string(), rows),
        ("col".to_string(), cols),
        ("treatment".to_string(), treats),
    ]);
    Ok(Simulated {
        dataset: Dataset::new(Schema::Latin, obs)?,
        truth: record(truth, realized),
    })
}

/// `y = grand_mean + treatment + machine + noise`, one row per measure,
/// ordered by machine then measure.
pub fn simulate_nested(
    design: &NestedDesign,
    truth: &SimulationTruth,
    seed: u64,
) -> Result<Simulated> {
    truth.validate(&["treatment", "machine"], design.n_groups)?;
    let mut rng = rng::stream(seed, "simulate-nested", 0);
    let treats = match &truth.fixed_effects {
        Some(fx) => fx.clone(),
        None => draw_effects(&mut rng, design.n_groups, truth.sd("treatment")),
    };
    let machines = draw_effects(&mut rng, design.n_machines, truth.sd("machine"));
    let mut obs = Vec::with_capacity(design.n_machines * design.n_measures);
    for (m, &g) in design.group_of.iter().enumerate() {
        for j in 0..design.n_measures {
            let noise: f64 = rng.sample(StandardNormal);
            let y = truth.grand_mean + treats[g] + machines[m] + truth.residual_sd * noise;
            obs.push(Observation { y, factors: [m, g, j] });
        }
    }
    let realized = BTreeMap::from([
        ("treatment".to_string(), treats),
        ("machine".to_string(), machines),
    ]);
    Ok(Simulated {
        dataset: Dataset::new(Schema::Nested, obs)?,
        truth: record(truth, realized),
    })
}

fn record(truth: &SimulationTruth, realized_effects: BTreeMap<String, Vec<f64>>) -> TruthRecord {
    TruthRecord {
        grand_mean: truth.grand_mean,
        effect_sds: truth.effect_sds.clone(),
        residual_sd: truth.residual_sd,
        realized_effects,
    }
}

/// Write `y` in shortest round-trip form and labels 1-based.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv_to(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv_to(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{}", dataset.schema().header())?;
    for obs in dataset.rows() {
        let [a, b, c] = obs.factors;
        writeln!(out, "{:?},{},{},{}", obs.y, a + 1, b + 1, c + 1)?;
    }
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv_from(File::open(path)?)
}

pub fn read_csv_from(input: impl std::io::Read) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    let schema = Schema::from_header(&fields).ok_or_else(|| Error::Schema { header: fields.join(",") })?;
    let names = schema.factor_names();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != 4 {
            return Err(Error::Parse { line, message: format!("expected 4 fields, found {}", record.len()) });
        }
        let y: f64 = record[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("y value {:?} is not a number", &record[0]),
        })?;
        if !y.is_finite() {
            return Err(Error::Parse { line, message: format!("y value {:?} is not finite", &record[0]) });
        }
        let mut factors = [0usize; 3];
        for (slot, name) in names.iter().enumerate() {
            let raw = record[slot + 1].trim();
            let label: i64 = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("{name} label {raw:?} is not an integer"),
            })?;
            if label < 1 {
                return Err(Error::Validation(format!(
                    "line {line}: {name} label {label} is out of range (labels start at 1)"
                )));
            }
            factors[slot] = (label - 1) as usize;
        }
        rows.push(Observation { y, factors });
    }
    Dataset::new(schema, rows)
}

/// `data.csv` → `data.truth.json`.
pub fn truth_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.truth.json"))
}

pub fn write_truth(truth: &TruthRecord, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(truth)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<TruthRecord> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
