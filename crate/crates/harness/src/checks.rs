//! Directional threshold checks over result rows, shared by `--check` and
//! the acceptance suite.

use crate::config::CheckSpec;
use distransfer_core::attacks::Norm;

use crate::experiments::{attack_name, mean_value};
use crate::rows::ResultRow;

/// Largest rise tolerated between consecutive points of a curve that should
/// be nonincreasing, and how many such rises are allowed.
pub const MONOTONE_SLACK: f64 = 0.02;
pub const MONOTONE_VIOLATIONS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    fn missing(name: &str) -> Self {
        Self::new(name, false, "required rows are missing".into())
    }
}

/// Nonincreasing up to at most `MONOTONE_VIOLATIONS` rises, each no larger
/// than `MONOTONE_SLACK`.
pub fn nearly_nonincreasing(values: &[f64]) -> bool {
    let rises: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    rises.len() <= MONOTONE_VIOLATIONS && rises.iter().all(|&d| d <= MONOTONE_SLACK)
}

/// The maximum is attained strictly inside: both endpoints are below it.
pub fn interior_maximum(values: &[f64]) -> bool {
    if values.len() < 3 {
        return false;
    }
    let inner = values[1..values.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    inner > values[0] && inner > values[values.len() - 1]
}

fn acc(rows: &[ResultRow], exp: &str, pred: impl Fn(&ResultRow) -> bool) -> Option<f64> {
    mean_value(rows, |r| r.experiment == exp && r.metric == "accuracy" && pred(r))
}

pub fn defense(rows: &[ResultRow], spec: &CheckSpec) -> Vec<Outcome> {
    let mut out = Vec::new();
    let clean = (acc(rows, "eval-defense", |r| r.attack == "clean" && !r.defense), acc(rows, "eval-defense", |r| r.attack == "clean" && r.defense));
    out.push(match clean {
        (Some(u), Some(d)) => Outcome::new(
            "defended clean accuracy within tolerance",
            u - d <= spec.clean_drop,
            format!("undefended {u:.3}, defended {d:.3}, allowed drop {:.2}", spec.clean_drop),
        ),
        _ => Outcome::missing("defended clean accuracy within tolerance"),
    });
    let u = acc(rows, "eval-defense", |r| r.attack == "pgd_linf" && !r.defense);
    let d = acc(rows, "eval-defense", |r| r.attack == "pgd_linf" && r.defense);
    out.push(match (u, d) {
        (Some(u), Some(d)) => Outcome::new(
            "purification gain on l-inf PGD",
            d - u >= spec.defense_gain,
            format!("undefended {u:.3}, defended {d:.3}, required gain {:.2}", spec.defense_gain),
        ),
        _ => Outcome::missing("purification gain on l-inf PGD"),
    });
    out
}

/// Curve of `(x, undefended, defended)` from the sweep-eps rows of one
/// attack, sorted by x.
pub fn epsilon_curve(rows: &[ResultRow], attack: &str) -> Vec<(f64, f64, f64)> {
    let rows: Vec<ResultRow> = rows
        .iter()
        .filter(|r| r.experiment == "sweep-eps" && r.attack == attack)
        .cloned()
        .collect();
    let rows = rows.as_slice();
    let mut eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    eps.into_iter()
        .filter_map(|e| {
            let u = acc(rows, "sweep-eps", |r| r.epsilon == e && !r.defense)?;
            let d = acc(rows, "sweep-eps", |r| r.epsilon == e && r.defense)?;
            Some((e, u, d))
        })
        .collect()
}

pub fn epsilon_sweep(rows: &[ResultRow], spec: &CheckSpec, norm: Norm) -> Vec<Outcome> {
    let curve = epsilon_curve(rows, &attack_name(norm));
    let nonzero: Vec<&(f64, f64, f64)> = curve.iter().filter(|c| c.0 > 0.0).collect();
    let (Some(first), Some(last)) = (nonzero.first(), nonzero.last()) else {
        return vec![Outcome::missing("epsilon sweep")];
    };
    let defended: Vec<f64> = curve.iter().map(|c| c.2).collect();
    let gap_first = first.2 - first.1;
    let gap_last = last.2 - last.1;
    vec![
        Outcome::new(
            "defended accuracy nonincreasing in epsilon",
            nearly_nonincreasing(&defended),
            format!("defended curve {defended:.3?}"),
        ),
        Outcome::new(
            "gap at smallest nonzero epsilon",
            gap_first >= spec.epsilon_gap,
            format!("gap {gap_first:.3} at eps {:.4}, required {:.2}", first.0, spec.epsilon_gap),
        ),
        Outcome::new(
            "gap shrinks at largest epsilon",
            gap_last < gap_first,
            format!("gap {gap_last:.3} at eps {:.4} vs {gap_first:.3}", last.0),
        ),
    ]
}

/// `(t*, clean, adversarial)` at the base budget, sorted by t*.
pub fn tstar_curve(rows: &[ResultRow]) -> Vec<(usize, f64, f64)> {
    let sweep: Vec<&ResultRow> = rows.iter().filter(|r| r.experiment == "sweep-tstar").collect();
    let base_eps = sweep
        .iter()
        .filter(|r| r.attack != "clean")
        .map(|r| r.epsilon)
        .fold(f64::INFINITY, f64::min);
    let mut ts: Vec<usize> = sweep.iter().map(|r| r.t_star).collect();
    ts.sort_unstable();
    ts.dedup();
    ts.into_iter()
        .filter_map(|t| {
            let c = acc(rows, "sweep-tstar", |r| r.t_star == t && r.attack == "clean")?;
            let a = acc(rows, "sweep-tstar", |r| r.t_star == t && r.attack != "clean" && r.epsilon == base_eps)?;
            Some((t, c, a))
        })
        .collect()
}

pub fn tstar_sweep(rows: &[ResultRow]) -> Vec<Outcome> {
    let curve = tstar_curve(rows);
    if curve.len() < 3 {
        return vec![Outcome::missing("t* sweep")];
    }
    let clean: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let adv: Vec<f64> = curve.iter().map(|c| c.2).collect();
    vec![
        Outcome::new(
            "clean accuracy nonincreasing in t*",
            nearly_nonincreasing(&clean),
            format!("clean curve {clean:.3?}"),
        ),
        Outcome::new(
            "adversarial accuracy peaks inside the grid",
            interior_maximum(&adv),
            format!("adversarial curve {adv:.3?}"),
        ),
    ]
}

pub fn adaptive(rows: &[ResultRow], spec: &CheckSpec) -> Vec<Outcome> {
    let plain = acc(rows, "eval-adaptive", |r| r.attack.starts_with("pgd") && !r.defense);
    let adaptive = acc(rows, "eval-adaptive", |r| r.adaptive && r.defense);
    vec![match (plain, adaptive) {
        (Some(p), Some(a)) => Outcome::new(
            "adaptive accuracy above undefended PGD",
            a - p >= spec.adaptive_gain,
            format!("undefended PGD {p:.3}, adaptive through purifier {a:.3}, required gain {:.2}", spec.adaptive_gain),
        ),
        _ => Outcome::missing("adaptive accuracy above undefended PGD"),
    }]
}

pub fn ood(rows: &[ResultRow], spec: &CheckSpec) -> Vec<Outcome> {
    let u = acc(rows, "eval-ood", |r| !r.defense);
    let d = acc(rows, "eval-ood", |r| r.defense);
    vec![match (u, d) {
        (Some(u), Some(d)) => Outcome::new(
            "mean corruption accuracy gain",
            d - u >= spec.ood_gain,
            format!("undefended {u:.3}, defended {d:.3}, required gain {:.2}", spec.ood_gain),
        ),
        _ => Outcome::missing("mean corruption accuracy gain"),
    }]
}

pub fn quality(rows: &[ResultRow], spec: &CheckSpec) -> Vec<Outcome> {
    let ssim = mean_value(rows, |r| r.experiment == "eval-quality" && r.metric == "ssim_vs_clean" && r.attack == "clean");
    let mad = mean_value(rows, |r| r.experiment == "eval-quality" && r.metric == "perturbation_panel_mad");
    vec![
        match ssim {
            Some(s) => Outcome::new(
                "purified clean images keep structure",
                s >= spec.min_ssim,
                format!("mean SSIM {s:.3}, required {:.2}", spec.min_ssim),
            ),
            None => Outcome::missing("purified clean images keep structure"),
        },
        match mad {
            Some(m) => Outcome::new(
                "residual perturbation differs from adversarial",
                m > 0.0,
                format!("mean absolute panel difference {m:.4}"),
            ),
            None => Outcome::missing("residual perturbation differs from adversarial"),
        },
    ]
}
