//! Panel ingestion, validation, and within-group aggregation.
//!
//! A panel holds individual outcomes indexed by (unit, group, period). The
//! estimators only ever see cell distributions, so units are not linked
//! across periods and cells may hold different units in different periods.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SmallCell};
use crate::quantile::{QuantileCurve, QuantileGrid, Sample};

/// Treatment arm of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Treated,
    Control,
}

/// Column names for the delimited input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub unit: String,
    pub group: String,
    pub period: String,
    pub outcome: String,
    /// 0/1 treated column; `None` means roles come from a sidecar map.
    pub treated: Option<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            unit: "unit".into(),
            group: "group".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            treated: Some("treated".into()),
        }
    }
}

impl Schema {
    /// Parses overrides of the form `unit=id,group=county,treated=`.
    /// An empty value for `treated` disables the in-file role column.
    pub fn parse_overrides(spec: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::Validation(format!("schema entry `{part}` is not key=column"))
            })?;
            let value = value.trim().to_string();
            match key.trim() {
                "unit" => schema.unit = value,
                "group" => schema.group = value,
                "period" => schema.period = value,
                "outcome" => schema.outcome = value,
                "treated" => schema.treated = (!value.is_empty()).then_some(value),
                other => {
                    return Err(Error::Validation(format!("unknown schema key `{other}`")))
                }
            }
        }
        Ok(schema)
    }
}

/// Options for [`load_panel`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Field delimiter; detected from the header when `None` (tab if the
    /// header contains a tab and no comma, comma otherwise).
    pub delimiter: Option<u8>,
    pub min_cell_size: usize,
    /// Last pre-treatment period. Defaults to the first period.
    pub t0: Option<i64>,
    /// Sidecar roles, used when the schema has no treated column.
    pub roles: Option<BTreeMap<String, Role>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: None,
            min_cell_size: PanelDataset::DEFAULT_MIN_CELL_SIZE,
            t0: None,
            roles: None,
        }
    }
}

/// Outcomes of one (group, period) cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cell {
    /// Unit indices, parallel to `outcomes`.
    pub units: Vec<u32>,
    pub outcomes: Vec<f64>,
}

/// Validated individual-level panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    groups: Vec<String>,
    roles: Vec<Role>,
    unit_labels: Vec<String>,
    cells: BTreeMap<(usize, i64), Cell>,
    periods: Vec<i64>,
    t0: i64,
}

impl PanelDataset {
    pub const DEFAULT_MIN_CELL_SIZE: usize = 30;

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn role(&self, group: usize) -> Role {
        self.roles[group]
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn cells(&self) -> &BTreeMap<(usize, i64), Cell> {
        &self.cells
    }

    pub fn cell(&self, group: usize, period: i64) -> Option<&Cell> {
        self.cells.get(&(group, period))
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.binary_search_by(|g| g.as_str().cmp(name)).ok()
    }

    pub fn groups_in(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        (0..self.groups.len()).filter(move |&g| self.roles[g] == role)
    }

    pub fn n_observations(&self) -> usize {
        self.cells.values().map(|c| c.outcomes.len()).sum()
    }

    pub fn unit_label(&self, unit: u32) -> String {
        self.unit_labels
            .get(unit as usize)
            .cloned()
            .unwrap_or_else(|| format!("u{unit}"))
    }

    /// Writes the panel as comma-delimited text with the default schema.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["unit", "group", "period", "outcome", "treated"])?;
        for (&(g, t), cell) in &self.cells {
            let treated = if self.roles[g] == Role::Treated { "1" } else { "0" };
            for (&u, &y) in cell.units.iter().zip(&cell.outcomes) {
                w.write_record([
                    self.unit_label(u).as_str(),
                    self.groups[g].as_str(),
                    &t.to_string(),
                    &format!("{y:?}"),
                    treated,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Assembles a panel cell by cell; used by the simulator and by the loader.
#[derive(Debug, Clone, Default)]
pub struct PanelBuilder {
    groups: Vec<(String, Role)>,
    unit_labels: Vec<String>,
    cells: BTreeMap<(usize, i64), Cell>,
}

impl PanelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a group and returns its builder-local index.
    pub fn add_group(&mut self, name: impl Into<String>, role: Role) -> usize {
        self.groups.push((name.into(), role));
        self.groups.len() - 1
    }

    /// Adds a cell whose units are numbered `0..outcomes.len()`.
    pub fn push_cell(&mut self, group: usize, period: i64, outcomes: Vec<f64>) {
        let units = (0..outcomes.len() as u32).collect();
        self.cells.insert((group, period), Cell { units, outcomes });
    }

    /// Validates and finalizes. `t0` defaults to the first period.
    pub fn build(self, t0: Option<i64>, min_cell_size: usize) -> Result<PanelDataset> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.sort_by(|&a, &b| self.groups[a].0.cmp(&self.groups[b].0));
        if order
            .windows(2)
            .any(|w| self.groups[w[0]].0 == self.groups[w[1]].0)
        {
            return Err(Error::Validation("duplicate group name".into()));
        }
        let mut remap = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let groups: Vec<String> = order.iter().map(|&o| self.groups[o].0.clone()).collect();
        let roles: Vec<Role> = order.iter().map(|&o| self.groups[o].1).collect();
        let cells: BTreeMap<(usize, i64), Cell> = self
            .cells
            .into_iter()
            .map(|((g, t), c)| ((remap[g], t), c))
            .collect();
        let periods: Vec<i64> = cells
            .keys()
            .map(|&(_, t)| t)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let t0 = match t0 {
            Some(t) => t,
            None => *periods
                .first()
                .ok_or_else(|| Error::Validation("panel has no observations".into()))?,
        };
        let panel = PanelDataset {
            groups,
            roles,
            unit_labels: self.unit_labels,
            cells,
            periods,
            t0,
        };
        validate(&panel, min_cell_size)?;
        Ok(panel)
    }
}

fn validate(p: &PanelDataset, min_cell_size: usize) -> Result<()> {
    if !p.roles.contains(&Role::Treated) {
        return Err(Error::Validation("no treated group".into()));
    }
    if !p.roles.contains(&Role::Control) {
        return Err(Error::Validation("no control group".into()));
    }
    for (&(_, _), cell) in &p.cells {
        if let Some(bad) = cell.outcomes.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome {bad}")));
        }
    }
    let small: Vec<SmallCell> = p
        .cells
        .iter()
        .filter(|(_, c)| c.outcomes.len() < min_cell_size)
        .map(|(&(g, t), c)| SmallCell {
            group: p.groups[g].clone(),
            period: t,
            count: c.outcomes.len(),
            min: min_cell_size,
        })
        .collect();
    if !small.is_empty() {
        return Err(Error::CellTooSmall { cells: small });
    }
    for g in p.groups_in(Role::Treated) {
        let has_pre = p.cells.keys().any(|&(h, t)| h == g && t <= p.t0);
        if !has_pre {
            return Err(Error::Validation(format!(
                "treated group `{}` is observed only after period {}",
                p.groups[g], p.t0
            )));
        }
    }
    for g in 0..p.groups.len() {
        if !p.cells.keys().any(|&(h, _)| h == g) {
            return Err(Error::Validation(format!(
                "group `{}` has no observations",
                p.groups[g]
            )));
        }
    }
    Ok(())
}

/// Parses a period label: an integer, or an ISO date mapped to days since
/// 1970-01-01.
pub fn parse_period(label: &str) -> Option<i64> {
    let label = label.trim();
    if let Ok(t) = label.parse::<i64>() {
        return Some(t);
    }
    let date = NaiveDate::parse_from_str(label, "%Y-%m-%d").ok()?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)?;
    Some((date - epoch).num_days())
}

fn parse_role(raw: &str) -> Option<Role> {
    match raw.trim() {
        "1" | "true" | "TRUE" | "True" => Some(Role::Treated),
        "0" | "false" | "FALSE" | "False" => Some(Role::Control),
        _ => None,
    }
}

fn detect_delimiter(data: &[u8]) -> u8 {
    let header = data.split(|&b| b == b'\n').next().unwrap_or(&[]);
    if header.contains(&b'\t') && !header.contains(&b',') {
        b'\t'
    } else {
        b','
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Reads a delimited panel with a header row and validates it.
pub fn load_panel<R: Read>(mut source: R, schema: &Schema, opts: &LoadOptions) -> Result<PanelDataset> {
    let mut data = Vec::new();
    source.read_to_end(&mut data)?;
    let delimiter = opts.delimiter.unwrap_or_else(|| detect_delimiter(&data));
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(data.as_slice());
    let headers = reader.headers()?.clone();
    let c_unit = column(&headers, &schema.unit)?;
    let c_group = column(&headers, &schema.group)?;
    let c_period = column(&headers, &schema.period)?;
    let c_outcome = column(&headers, &schema.outcome)?;
    let c_treated = match &schema.treated {
        Some(name) => Some(column(&headers, name)?),
        None => None,
    };
    if c_treated.is_none() && opts.roles.is_none() {
        return Err(Error::Validation(
            "no treated column and no sidecar role map".into(),
        ));
    }

    let mut builder = PanelBuilder::new();
    let mut group_ids: HashMap<String, usize> = HashMap::new();
    let mut file_roles: HashMap<usize, Role> = HashMap::new();
    let mut unit_ids: HashMap<String, u32> = HashMap::new();
    let mut seen: HashMap<(u32, usize, i64), usize> = HashMap::new();
    let mut duplicates: Vec<usize> = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let group_name = field(c_group);
        let outcome: f64 = field(c_outcome).parse().map_err(|_| Error::Parse {
            line,
            message: format!("non-numeric outcome `{}`", field(c_outcome)),
        })?;
        if !outcome.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("non-finite outcome `{}`", field(c_outcome)),
            });
        }
        let period = parse_period(field(c_period)).ok_or_else(|| Error::Parse {
            line,
            message: format!("unrecognized period `{}`", field(c_period)),
        })?;
        let next = group_ids.len();
        let g = *group_ids.entry(group_name.to_string()).or_insert(next);
        if g == next {
            // role filled in below; placeholder keeps indices aligned
            builder.groups.push((group_name.to_string(), Role::Control));
        }
        if let Some(ct) = c_treated {
            let role = parse_role(field(ct)).ok_or_else(|| Error::Parse {
                line,
                message: format!("treated must be 0 or 1, got `{}`", field(ct)),
            })?;
            match file_roles.get(&g) {
                Some(&prev) if prev != role => {
                    return Err(Error::Parse {
                        line,
                        message: format!("group `{group_name}` has conflicting treated values"),
                    })
                }
                _ => {
                    file_roles.insert(g, role);
                }
            }
        }
        let next_unit = unit_ids.len() as u32;
        let u = *unit_ids.entry(field(c_unit).to_string()).or_insert(next_unit);
        if u == next_unit {
            builder.unit_labels.push(field(c_unit).to_string());
        }
        if let Some(&first) = seen.get(&(u, g, period)) {
            if duplicates.is_empty() {
                duplicates.push(first);
            }
            duplicates.push(line);
            continue;
        }
        seen.insert((u, g, period), line);
        let cell = builder.cells.entry((g, period)).or_default();
        cell.units.push(u);
        cell.outcomes.push(outcome);
    }
    if !duplicates.is_empty() {
        return Err(Error::DuplicateRow { lines: duplicates });
    }

    for (g, (name, role)) in builder.groups.iter_mut().enumerate() {
        *role = match (&opts.roles, file_roles.get(&g)) {
            (Some(map), _) if c_treated.is_none() => *map.get(name.as_str()).ok_or_else(|| {
                Error::Validation(format!("role map does not cover group `{name}`"))
            })?,
            (_, Some(&r)) => r,
            _ => unreachable!("every row sets a role when the column exists"),
        };
    }
    builder.build(opts.t0, opts.min_cell_size)
}

/// Reads a two-column sidecar (`group`, `treated`) into a role map.
pub fn load_roles<R: Read>(source: R) -> Result<BTreeMap<String, Role>> {
    let mut data = Vec::new();
    let mut source = source;
    source.read_to_end(&mut data)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(&data))
        .from_reader(data.as_slice());
    let headers = reader.headers()?.clone();
    let c_group = column(&headers, "group")?;
    let c_treated = column(&headers, "treated")?;
    let mut roles = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let raw = record.get(c_treated).unwrap_or("");
        let role = parse_role(raw).ok_or_else(|| Error::Parse {
            line,
            message: format!("treated must be 0 or 1, got `{raw}`"),
        })?;
        roles.insert(record.get(c_group).unwrap_or("").trim().to_string(), role);
    }
    Ok(roles)
}

/// Within-group quantile curves, one per (group, period) cell, on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellQuantiles {
    grid: QuantileGrid,
    groups: Vec<String>,
    roles: Vec<Role>,
    periods: Vec<i64>,
    t0: i64,
    by_cell: BTreeMap<(usize, i64), QuantileCurve>,
}

impl CellQuantiles {
    /// Assembles cell curves directly, e.g. from analytic population curves.
    pub fn from_curves(
        grid: QuantileGrid,
        groups: Vec<(String, Role)>,
        t0: i64,
        by_cell: BTreeMap<(usize, i64), QuantileCurve>,
    ) -> Result<Self> {
        for ((g, _), curve) in &by_cell {
            if *g >= groups.len() {
                return Err(Error::Validation(format!("cell for unknown group index {g}")));
            }
            if curve.grid() != grid.points() {
                return Err(Error::InvalidGrid("cell curve is not on the shared grid".into()));
            }
        }
        let periods = by_cell
            .keys()
            .map(|&(_, t)| t)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let (names, roles) = groups.into_iter().unzip();
        Ok(CellQuantiles {
            grid,
            groups: names,
            roles,
            periods,
            t0,
            by_cell,
        })
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn role(&self, group: usize) -> Role {
        self.roles[group]
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn by_cell(&self) -> &BTreeMap<(usize, i64), QuantileCurve> {
        &self.by_cell
    }

    pub fn curve(&self, group: usize, period: i64) -> Option<&QuantileCurve> {
        self.by_cell.get(&(group, period))
    }

    pub fn groups_in(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        (0..self.groups.len()).filter(move |&g| self.roles[g] == role)
    }

    /// Keeps only the listed groups (indices into `groups()`), renumbering them.
    pub fn subset(&self, keep: &[usize]) -> CellQuantiles {
        let mut remap = vec![usize::MAX; self.groups.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let by_cell = self
            .by_cell
            .iter()
            .filter(|((g, _), _)| remap[*g] != usize::MAX)
            .map(|(&(g, t), c)| ((remap[g], t), c.clone()))
            .collect();
        CellQuantiles {
            grid: self.grid.clone(),
            groups: keep.iter().map(|&g| self.groups[g].clone()).collect(),
            roles: keep.iter().map(|&g| self.roles[g]).collect(),
            periods: self.periods.clone(),
            t0: self.t0,
            by_cell,
        }
    }

    /// Same cells with every group's role replaced.
    pub fn with_roles(&self, roles: Vec<Role>) -> CellQuantiles {
        assert_eq!(roles.len(), self.groups.len());
        CellQuantiles {
            roles,
            ..self.clone()
        }
    }

    /// Relabels one period as another (all cells at `from` move to `to`).
    pub fn relabel_period(&self, from: i64, to: i64) -> CellQuantiles {
        let by_cell: BTreeMap<_, _> = self
            .by_cell
            .iter()
            .filter(|((_, t), _)| *t != to)
            .map(|(&(g, t), c)| ((g, if t == from { to } else { t }), c.clone()))
            .collect();
        let periods = by_cell
            .keys()
            .map(|&(_, t)| t)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        CellQuantiles {
            by_cell,
            periods,
            ..self.clone()
        }
    }

    /// Long-format dump with columns group, period, tau_u, value.
    pub fn write_long<W: Write>(&self, out: W, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
        w.write_record(["group", "period", "tau_u", "value"])?;
        for (&(g, t), curve) in &self.by_cell {
            for (tau, v) in curve.grid().iter().zip(curve.values()) {
                w.write_record([
                    self.groups[g].as_str(),
                    &t.to_string(),
                    &format!("{tau:?}"),
                    &format!("{v:?}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Tabulates every cell's sample quantile function on `grid`.
pub fn within_group_quantiles(p: &PanelDataset, grid: &QuantileGrid) -> Result<CellQuantiles> {
    let cells: Vec<(&(usize, i64), &Cell)> = p.cells.iter().collect();
    let curves: Vec<((usize, i64), QuantileCurve)> = cells
        .par_iter()
        .map(|(key, cell)| {
            let sample = Sample::from_slice(&cell.outcomes)?;
            Ok((**key, QuantileCurve::from_sample(&sample, grid)))
        })
        .collect::<Result<_>>()?;
    Ok(CellQuantiles {
        grid: grid.clone(),
        groups: p.groups.clone(),
        roles: p.roles.clone(),
        periods: p.periods.clone(),
        t0: p.t0,
        by_cell: curves.into_iter().collect(),
    })
}

/// Values of `eval(cell(g, period), tau_u)` over the groups of an arm.
pub fn cross_group_values(cq: &CellQuantiles, arm: Role, period: i64, tau_u: f64) -> Vec<f64> {
    cq.groups_in(arm)
        .filter_map(|g| cq.curve(g, period).map(|c| c.eval(tau_u)))
        .collect()
}

/// The cross-group quantile curve `tau_v -> Q_{Y_{arm,period}(tau_u)}(tau_v)`.
pub fn cross_group_curve(
    cq: &CellQuantiles,
    arm: Role,
    period: i64,
    tau_u: f64,
    grid_v: &QuantileGrid,
) -> Result<QuantileCurve> {
    let values = cross_group_values(cq, arm, period, tau_u);
    if values.is_empty() {
        return Err(Error::Estimation(format!(
            "{} arm has no groups observed in period {period}",
            arm_name(arm)
        )));
    }
    Ok(QuantileCurve::from_sample(&Sample::new(values)?, grid_v))
}

pub(crate) fn arm_name(arm: Role) -> &'static str {
    match arm {
        Role::Treated => "treated",
        Role::Control => "control",
    }
}
