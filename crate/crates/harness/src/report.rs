//! Pivot tables for the defense, adaptive and corruption experiments plus
//! the sweep curves.
//!
//! Every table is emitted twice: CSV with full-precision values and a
//! fixed-width text rendering in percent. Missing cells are `-`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::artifacts::Series;
use crate::experiments::SEVERITIES;
use crate::rows::ResultRow;

pub const MISSING: &str = "-";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub title: String,
    pub columns: Vec<String>,
    /// Label cells (possibly several) followed by values.
    pub rows: Vec<(Vec<String>, Vec<Option<f64>>)>,
    pub label_columns: Vec<String>,
    /// Values are accuracies and render in percent.
    pub percent: bool,
}

fn cell_csv(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| format!("{v}"))
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = self.label_columns.iter().chain(&self.columns).map(String::as_str).collect();
        w.write_record(&header).expect("in-memory csv");
        for (labels, values) in &self.rows {
            let rec: Vec<String> = labels.iter().cloned().chain(values.iter().map(|v| cell_csv(*v))).collect();
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            None => MISSING.to_string(),
            Some(v) if self.percent => format!("{:.1}", 100.0 * v),
            Some(v) => format!("{v:.4}"),
        };
        let header: Vec<String> = self.label_columns.iter().chain(&self.columns).cloned().collect();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(l, v)| l.iter().cloned().chain(v.iter().map(|x| fmt(*x))).collect())
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i < self.label_columns.len() {
                    let _ = write!(s, "{c:<w$}  ", w = widths[i]);
                } else {
                    let _ = write!(s, "{c:>w$}  ", w = widths[i]);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        let head = line(&header);
        let _ = writeln!(out, "{head}");
        let _ = writeln!(out, "{}", "-".repeat(head.len()));
        for r in &body {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }
}

fn find(rows: &[ResultRow], pred: impl Fn(&ResultRow) -> bool) -> Option<f64> {
    rows.iter().find(|r| pred(r)).map(|r| r.value)
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn defense_label(defense: bool, t_star: Option<usize>) -> String {
    match (defense, t_star) {
        (false, _) => "undefended".into(),
        (true, Some(t)) => format!("purified (t*={t})"),
        (true, None) => "purified".into(),
    }
}

fn t_star_of(rows: &[ResultRow]) -> Option<usize> {
    rows.iter().find(|r| r.defense).map(|r| r.t_star)
}

/// Defense table. Attack columns are ordered by first appearance in the
/// sorted rows; "extra data"/"extra model" are static annotations.
pub fn defense_table(rows: &[ResultRow]) -> Option<Table> {
    let rows: Vec<&ResultRow> = rows.iter().filter(|r| r.experiment == "eval-defense").collect();
    if rows.is_empty() {
        return None;
    }
    let owned: Vec<ResultRow> = rows.iter().map(|r| (*r).clone()).collect();
    let mut attacks: Vec<(String, u64)> = Vec::new();
    for r in &owned {
        let key = (r.attack.clone(), r.epsilon.to_bits());
        if r.attack != "clean" && !attacks.contains(&key) {
            attacks.push(key);
        }
    }
    let mut columns = vec!["clean".to_string()];
    columns.extend(attacks.iter().map(|(a, e)| format!("{a} (eps={:.4})", f64::from_bits(*e))));
    let t = t_star_of(&owned);
    let table_rows = [false, true]
        .iter()
        .map(|&defense| {
            let mut values = vec![find(&owned, |r| r.attack == "clean" && r.defense == defense)];
            values.extend(
                attacks
                    .iter()
                    .map(|(a, e)| find(&owned, |r| &r.attack == a && r.epsilon.to_bits() == *e && r.defense == defense)),
            );
            let extra_model = if defense { "diffusion" } else { MISSING };
            (vec![defense_label(defense, t), MISSING.to_string(), extra_model.to_string()], values)
        })
        .collect();
    Some(Table {
        name: "defense".into(),
        title: "Accuracy (%) with and without purification".into(),
        columns,
        rows: table_rows,
        label_columns: vec!["method".into(), "extra data".into(), "extra model".into()],
        percent: true,
    })
}

/// Adaptive table: clean, plain PGD and adaptive PGD accuracy.
pub fn adaptive_table(rows: &[ResultRow]) -> Option<Table> {
    let owned: Vec<ResultRow> = rows.iter().filter(|r| r.experiment == "eval-adaptive").cloned().collect();
    if owned.is_empty() {
        return None;
    }
    let t = t_star_of(&owned);
    let table_rows = [false, true]
        .iter()
        .map(|&defense| {
            let values = vec![
                find(&owned, |r| r.attack == "clean" && r.defense == defense),
                find(&owned, |r| r.attack.starts_with("pgd") && !r.adaptive && r.defense == defense),
                find(&owned, |r| r.adaptive && r.defense == defense),
            ];
            (vec![defense_label(defense, t)], values)
        })
        .collect();
    Some(Table {
        name: "adaptive".into(),
        title: "Accuracy (%) under adaptive attack".into(),
        columns: vec!["clean".into(), "pgd".into(), "adaptive pgd".into()],
        rows: table_rows,
        label_columns: vec!["method".into()],
        percent: true,
    })
}

/// Corruption table: one row per (family, defense) with a severity mean, then a
/// mean row per defense averaging every family x severity cell.
pub fn corruption_table(rows: &[ResultRow]) -> Option<Table> {
    let owned: Vec<ResultRow> = rows.iter().filter(|r| r.experiment == "eval-ood").cloned().collect();
    if owned.is_empty() {
        return None;
    }
    let families: BTreeSet<String> = owned.iter().map(|r| r.corruption.clone()).collect();
    let t = t_star_of(&owned);
    let mut columns: Vec<String> = SEVERITIES.iter().map(|s| format!("severity {s}")).collect();
    columns.push("mean".into());
    let mut table_rows = Vec::new();
    for &defense in &[false, true] {
        let mut all = Vec::new();
        for fam in &families {
            let mut values: Vec<Option<f64>> = SEVERITIES
                .iter()
                .map(|&s| find(&owned, |r| &r.corruption == fam && r.severity == s && r.defense == defense))
                .collect();
            all.extend(values.iter().copied());
            values.push(mean_present(&values));
            table_rows.push((vec![fam.clone(), defense_label(defense, t)], values));
        }
        let mut means: Vec<Option<f64>> = (0..SEVERITIES.len())
            .map(|k| mean_present(&all.iter().skip(k).step_by(SEVERITIES.len()).copied().collect::<Vec<_>>()))
            .collect();
        means.push(mean_present(&all));
        table_rows.push((vec!["mean".into(), defense_label(defense, t)], means));
    }
    Some(Table {
        name: "corruption".into(),
        title: "Accuracy (%) on corrupted inputs".into(),
        columns,
        rows: table_rows,
        label_columns: vec!["corruption".into(), "method".into()],
        percent: true,
    })
}

/// Accuracy against the budget: one row per epsilon.
/// One table per swept attack, named `sweep_eps_<norm>`.
pub fn epsilon_tables(rows: &[ResultRow]) -> Vec<Table> {
    let owned: Vec<ResultRow> = rows.iter().filter(|r| r.experiment == "sweep-eps").cloned().collect();
    let mut attacks: Vec<String> = owned.iter().map(|r| r.attack.clone()).collect();
    attacks.sort();
    attacks.dedup();
    attacks
        .iter()
        .map(|attack| {
            let mut eps: Vec<f64> = owned.iter().filter(|r| &r.attack == attack).map(|r| r.epsilon).collect();
            eps.sort_by(f64::total_cmp);
            eps.dedup();
            let table_rows = eps
                .iter()
                .map(|&e| {
                    let v = |d: bool| find(&owned, |r| &r.attack == attack && r.epsilon == e && r.defense == d);
                    (vec![format!("{e}")], vec![v(false), v(true)])
                })
                .collect();
            Table {
                name: format!("sweep_eps_{}", attack.trim_start_matches("pgd_")),
                title: format!("Accuracy (%) against the {attack} budget"),
                columns: vec!["undefended".into(), "purified".into()],
                rows: table_rows,
                label_columns: vec!["epsilon".into()],
                percent: true,
            }
        })
        .collect()
}

/// Defended accuracy along t*; joint-grid budgets become extra columns.
pub fn tstar_table(rows: &[ResultRow]) -> Option<Table> {
    let owned: Vec<ResultRow> = rows.iter().filter(|r| r.experiment == "sweep-tstar").cloned().collect();
    if owned.is_empty() {
        return None;
    }
    let mut ts: Vec<usize> = owned.iter().map(|r| r.t_star).collect();
    ts.sort_unstable();
    ts.dedup();
    let mut budgets: Vec<f64> = owned.iter().filter(|r| r.attack != "clean").map(|r| r.epsilon).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let mut columns = vec!["clean".to_string()];
    columns.extend(budgets.iter().map(|e| format!("adversarial (eps={e:.4})")));
    let table_rows = ts
        .iter()
        .map(|&t| {
            let mut values = vec![find(&owned, |r| r.t_star == t && r.attack == "clean")];
            values.extend(
                budgets
                    .iter()
                    .map(|&e| find(&owned, |r| r.t_star == t && r.attack != "clean" && r.epsilon == e)),
            );
            (vec![t.to_string()], values)
        })
        .collect();
    Some(Table {
        name: "sweep_tstar".into(),
        title: "Purified accuracy (%) against diffusion depth t*".into(),
        columns,
        rows: table_rows,
        label_columns: vec!["t*".into()],
        percent: true,
    })
}

/// Plot series of a single-label-column table, one per value column; the
/// label must parse as a number.
pub fn table_series(table: &Table) -> Vec<Series> {
    table
        .columns
        .iter()
        .enumerate()
        .map(|(k, name)| Series {
            name: name.clone(),
            points: table
                .rows
                .iter()
                .filter_map(|(l, v)| Some((l[0].parse::<f64>().ok()?, v[k]?)))
                .collect(),
        })
        .collect()
}

pub fn all_tables(rows: &[ResultRow]) -> Vec<Table> {
    let mut tables: Vec<Table> = [defense_table(rows), adaptive_table(rows), corruption_table(rows)]
        .into_iter()
        .flatten()
        .collect();
    tables.extend(epsilon_tables(rows));
    tables.extend(tstar_table(rows));
    tables
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rows::sort_rows;

    fn acc(exp: &str, attack: &str, defense: bool, v: f64) -> ResultRow {
        let r = ResultRow::new(exp, "shapes", "small_conv", "accuracy").attack(attack, if attack == "clean" { 0.0 } else { 0.1 });
        let r = if defense { r.defended(12) } else { r };
        r.accuracy(v, 10)
    }

    fn ood_rows() -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for (i, fam) in ["gaussian_noise", "glass_blur"].iter().enumerate() {
            for s in SEVERITIES {
                for d in [false, true] {
                    let v = 0.9 - 0.05 * f64::from(s) + 0.1 * i as f64 + if d { 0.07 } else { 0.0 };
                    let r = ResultRow::new("eval-ood", "shapes", "small_conv", "accuracy").corruption(fam, s);
                    rows.push(if d { r.defended(12) } else { r }.accuracy(v, 10));
                }
            }
        }
        rows
    }

    #[test]
    fn missing_cells_render_as_dash() {
        let rows = vec![acc("eval-defense", "clean", false, 0.9), acc("eval-defense", "pgd_linf", false, 0.05)];
        let t = defense_table(&rows).unwrap();
        assert_eq!(t.rows[1].1, vec![None, None]);
        let csv = t.to_csv();
        assert!(csv.lines().nth(2).unwrap().ends_with(",-,-"));
        assert!(t.to_text().contains("90.0"));
    }

    #[test]
    fn ood_means_match_cells() {
        let t = corruption_table(&ood_rows()).unwrap();
        for (labels, values) in &t.rows {
            if labels[0] == "mean" {
                continue;
            }
            let m = values[..5].iter().map(|v| v.unwrap()).sum::<f64>() / 5.0;
            assert!((values[5].unwrap() - m).abs() < 1e-12);
        }
        let off_mean = t.rows.iter().find(|(l, _)| l[0] == "mean" && l[1] == "undefended").unwrap();
        let cells: Vec<f64> = ood_rows().iter().filter(|r| !r.defense).map(|r| r.value).collect();
        let expect = cells.iter().sum::<f64>() / cells.len() as f64;
        assert!((off_mean.1[5].unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn tables_are_independent_of_row_order() {
        let mut a = ood_rows();
        a.push(acc("eval-adaptive", "clean", true, 0.8));
        let mut b = a.clone();
        b.reverse();
        sort_rows(&mut a);
        sort_rows(&mut b);
        let ta: Vec<String> = all_tables(&a).iter().map(Table::to_csv).collect();
        let tb: Vec<String> = all_tables(&b).iter().map(Table::to_csv).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn adaptive_table_separates_plain_and_adaptive_rows() {
        let mut rows = vec![acc("eval-adaptive", "pgd_linf", false, 0.05)];
        rows.push(acc("eval-adaptive", "adaptive_pgd_linf", true, 0.6).adaptive());
        let t = adaptive_table(&rows).unwrap();
        assert_eq!(t.rows[0].1, vec![None, Some(0.05), None]);
        assert_eq!(t.rows[1].1, vec![None, None, Some(0.6)]);
    }

    #[test]
    fn sweep_series_follow_numeric_labels() {
        let rows: Vec<ResultRow> = [0.0, 0.1]
            .iter()
            .flat_map(|&e| {
                [false, true].map(|d| {
                    let r = ResultRow::new("sweep-eps", "shapes", "m", "accuracy").attack("pgd_linf", e);
                    if d { r.defended(12) } else { r }.accuracy(0.5 + e, 10)
                })
            })
            .collect();
        let tables = epsilon_tables(&rows);
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].name, "sweep_eps_linf");
        let s = table_series(&tables[0]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].points, vec![(0.0, 0.5), (0.1, 0.6)]);
    }
}
