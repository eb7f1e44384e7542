//! Result rows and their JSON-lines / CSV serialisation.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, HarnessError, Result};

/// Identifier used for cells an axis does not apply to.
pub const NONE: &str = "none";

/// One measured cell. Identifiers are never null: inapplicable axes hold
/// [`NONE`], `0.0` or `0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub dataset: String,
    pub model: String,
    /// `clean`, `pgd_linf`, `pgd_l2`, `adaptive_pgd_linf`, ...
    pub attack: String,
    pub adaptive: bool,
    pub defense: bool,
    /// Attack budget in data units.
    pub epsilon: f64,
    pub t_star: usize,
    pub corruption: String,
    pub severity: u8,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub std_error: f64,
}

impl ResultRow {
    /// Row with every optional axis at its neutral value.
    pub fn new(experiment: &str, dataset: &str, model: &str, metric: &str) -> Self {
        Self {
            experiment: experiment.into(),
            dataset: dataset.into(),
            model: model.into(),
            attack: "clean".into(),
            adaptive: false,
            defense: false,
            epsilon: 0.0,
            t_star: 0,
            corruption: NONE.into(),
            severity: 0,
            metric: metric.into(),
            value: 0.0,
            n: 0,
            std_error: 0.0,
        }
    }

    pub fn attack(mut self, name: &str, epsilon: f64) -> Self {
        self.attack = name.into();
        self.epsilon = epsilon;
        self
    }

    pub fn adaptive(mut self) -> Self {
        self.adaptive = true;
        self
    }

    /// Marks the row as purified at depth `t_star`.
    pub fn defended(mut self, t_star: usize) -> Self {
        self.defense = true;
        self.t_star = t_star;
        self
    }

    pub fn corruption(mut self, family: &str, severity: u8) -> Self {
        self.corruption = family.into();
        self.severity = severity;
        self
    }

    /// Accuracy value with its binomial standard error.
    pub fn accuracy(mut self, acc: f64, n: usize) -> Self {
        self.value = acc;
        self.n = n;
        self.std_error = if n > 0 { (acc * (1.0 - acc) / n as f64).sqrt() } else { 0.0 };
        self
    }

    pub fn measured(mut self, value: f64, std_error: f64, n: usize) -> Self {
        self.value = value;
        self.std_error = std_error;
        self.n = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.value.is_finite() || !self.std_error.is_finite() || !self.epsilon.is_finite() {
            return Err(HarnessError::Numerical(format!("non-finite value in row {self:?}")));
        }
        let ids = [&self.experiment, &self.dataset, &self.model, &self.attack, &self.corruption, &self.metric];
        if ids.iter().any(|s| s.is_empty()) {
            return Err(config_err(format!("row has an empty identifier: {self:?}")));
        }
        Ok(())
    }

    fn key(&self) -> (&str, &str, &str, &str, bool, bool, &str, u8, usize, &str) {
        (
            &self.experiment,
            &self.dataset,
            &self.model,
            &self.attack,
            self.adaptive,
            self.defense,
            &self.corruption,
            self.severity,
            self.t_star,
            &self.metric,
        )
    }

    /// Total order used for every emitted file.
    pub fn ordering(a: &Self, b: &Self) -> Ordering {
        a.key()
            .cmp(&b.key())
            .then_with(|| a.epsilon.total_cmp(&b.epsilon))
            .then_with(|| a.value.total_cmp(&b.value))
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(ResultRow::ordering);
}

pub fn write_jsonl(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        r.validate()?;
        serde_json::to_writer(&mut buf, r).expect("rows serialise");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| config_err(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| config_err(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| config_err(format!("csv: {e}")))?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}
