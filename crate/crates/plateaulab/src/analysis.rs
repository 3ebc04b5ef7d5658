//! Learning-curve analysis: plateau detection, dysfunction flags, and
//! sweep summaries.
//!
//! A run's accuracy curve is scanned for the first epoch whose value
//! clears the transition threshold (chance plus a fixed margin). The
//! stretch before that epoch is the plateau; runs that never clear the
//! threshold within budget are censored. Sweeps over entropy levels and
//! seeds are reduced to per-level medians and a rank correlation between
//! level and plateau length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin added to chance accuracy to form the transition threshold.
pub const TRANSITION_MARGIN: f64 = 0.07;
pub const ANALYSIS_SCHEMA_VERSION: u32 = 1;

/// Transition threshold for a label alphabet of the given size, unless an
/// explicit override is supplied.
pub fn transition_threshold(n_labels: usize, override_threshold: Option<f64>) -> Result<f64> {
    if let Some(t) = override_threshold {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
        return Ok(t);
    }
    if n_labels == 0 {
        return Err(Error::Config("label alphabet must be non-empty".into()));
    }
    Ok(1.0 / n_labels as f64 + TRANSITION_MARGIN)
}

/// Where a run left its plateau, if it did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// First epoch (index into the curve) with accuracy strictly above the
    /// threshold; `None` when the run stayed below budget-long.
    pub epoch: Option<usize>,
    /// Plateau length in epochs: the transition epoch itself, or the full
    /// curve length when censored.
    pub plateau_length: usize,
    /// True when the run never cleared the threshold within budget.
    pub censored: bool,
    pub threshold: f64,
}

/// Scans an accuracy curve for the first strict threshold crossing.
/// `smooth_window` > 1 applies a centered moving average first (the raw
/// curve is the default).
pub fn detect_transition(
    curve: &[f64],
    threshold: f64,
    smooth_window: usize,
) -> Result<Transition> {
    if curve.is_empty() {
        return Err(Error::Config("empty accuracy curve".into()));
    }
    if let Some(&bad) = curve.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("accuracy curve contains {bad}")));
    }
    let series = if smooth_window > 1 {
        smooth(curve, smooth_window)
    } else {
        curve.to_vec()
    };
    let epoch = series.iter().position(|&v| v > threshold);
    Ok(Transition {
        epoch,
        plateau_length: epoch.unwrap_or(curve.len()),
        censored: epoch.is_none(),
        threshold,
    })
}

/// Centered moving average; the window is clipped at the ends.
fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..curve.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(curve.len());
            curve[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// True when a capability score fell below its value at initialization.
pub fn dysfunction_flag(score: f64, init_score: f64) -> bool {
    score < init_score
}

/// Spearman rank correlation with average ranks for ties. Returns `None`
/// when either side is constant (the correlation is undefined).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "spearman: {} vs {} points",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Config("spearman needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman over non-finite values".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        vx += (a - mean).powi(2);
        vy += (b - mean).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(None);
    }
    Ok(Some(num / (vx * vy).sqrt()))
}

fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let mut ranks = vec![0.0; vals.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Median of a slice (mean of the middle pair for even lengths).
pub fn median(vals: &[f64]) -> Result<f64> {
    if vals.is_empty() {
        return Err(Error::Config("median of empty slice".into()));
    }
    let mut v = vals.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// One analyzed run inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mapping-pool entropy of the run's sampling distribution (nats).
    pub entropy: f64,
    pub seed: u64,
    pub transition: Transition,
    pub final_accuracy: f64,
    pub final_weights_score: Option<f64>,
    pub final_context_score: Option<f64>,
    pub dysfunction: Option<bool>,
}

/// Per-entropy-level aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub entropy: f64,
    pub n_runs: usize,
    pub median_plateau: f64,
    pub censored_runs: usize,
    pub median_final_accuracy: f64,
}

/// Sweep-level report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub levels: Vec<LevelSummary>,
    /// Spearman correlation between entropy level and per-run plateau
    /// length; `None` when undefined (constant on either side).
    pub entropy_plateau_spearman: Option<f64>,
    pub runs: Vec<RunSummary>,
}

/// Aggregates analyzed runs into per-level medians and the entropy/plateau
/// rank correlation. Requires at least three levels with at least three
/// runs each.
pub fn sweep_summary(runs: &[RunSummary]) -> Result<SweepSummary> {
    let mut levels: Vec<f64> = Vec::new();
    for r in runs {
        if !levels.iter().any(|&l| l == r.entropy) {
            levels.push(r.entropy);
        }
    }
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if levels.len() < 3 {
        return Err(Error::Config(format!(
            "sweep needs at least 3 entropy levels, got {}",
            levels.len()
        )));
    }
    let mut level_summaries = Vec::with_capacity(levels.len());
    for &h in &levels {
        let group: Vec<&RunSummary> = runs.iter().filter(|r| r.entropy == h).collect();
        if group.len() < 3 {
            return Err(Error::Config(format!(
                "entropy level {h} has {} runs, need at least 3",
                group.len()
            )));
        }
        let plateaus: Vec<f64> = group
            .iter()
            .map(|r| r.transition.plateau_length as f64)
            .collect();
        let finals: Vec<f64> = group.iter().map(|r| r.final_accuracy).collect();
        level_summaries.push(LevelSummary {
            entropy: h,
            n_runs: group.len(),
            median_plateau: median(&plateaus)?,
            censored_runs: group.iter().filter(|r| r.transition.censored).count(),
            median_final_accuracy: median(&finals)?,
        });
    }
    let xs: Vec<f64> = runs.iter().map(|r| r.entropy).collect();
    let ys: Vec<f64> = runs
        .iter()
        .map(|r| r.transition.plateau_length as f64)
        .collect();
    let rho = spearman(&xs, &ys)?;
    Ok(SweepSummary {
        schema_version: ANALYSIS_SCHEMA_VERSION,
        levels: level_summaries,
        entropy_plateau_spearman: rho,
        runs: runs.to_vec(),
    })
}

/// CSV header for per-run summary rows (stable order).
pub const RUN_CSV_HEADER: &str = "entropy,seed,transition_epoch,plateau_length,censored,threshold,final_accuracy,final_weights_score,final_context_score,dysfunction";

/// One CSV row per run, lossless for round-tripping.
pub fn run_csv_row(r: &RunSummary) -> String {
    let opt_u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let opt_f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let opt_b = |v: Option<bool>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{:?},{},{},{},{},{:?},{:?},{},{},{}",
        r.entropy,
        r.seed,
        opt_u(r.transition.epoch),
        r.transition.plateau_length,
        r.transition.censored,
        r.transition.threshold,
        r.final_accuracy,
        opt_f(r.final_weights_score),
        opt_f(r.final_context_score),
        opt_b(r.dysfunction),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_chance_plus_margin() {
        assert!((transition_threshold(5, None).unwrap() - 0.27).abs() < 1e-12);
        assert!((transition_threshold(10, None).unwrap() - 0.17).abs() < 1e-12);
        assert!((transition_threshold(4, Some(0.17)).unwrap() - 0.17).abs() < 1e-12);
        assert!(transition_threshold(0, None).is_err());
        assert!(transition_threshold(4, Some(1.5)).is_err());
    }

    #[test]
    fn transition_is_first_strict_crossing() {
        let curve = vec![0.2, 0.27, 0.2, 0.4, 0.9];
        let t = detect_transition(&curve, 0.27, 1).unwrap();
        // 0.27 is not strictly above 0.27.
        assert_eq!(t.epoch, Some(3));
        assert_eq!(t.plateau_length, 3);
        assert!(!t.censored);
    }

    #[test]
    fn censored_runs_report_full_budget() {
        let curve = vec![0.2; 7];
        let t = detect_transition(&curve, 0.27, 1).unwrap();
        assert_eq!(t.epoch, None);
        assert_eq!(t.plateau_length, 7);
        assert!(t.censored);
    }

    #[test]
    fn smoothing_is_opt_in_and_clips_ends() {
        // A single spike crosses raw but not after window-3 smoothing.
        let curve = vec![0.1, 0.1, 0.9, 0.1, 0.1];
        let raw = detect_transition(&curve, 0.5, 1).unwrap();
        assert_eq!(raw.epoch, Some(2));
        let smoothed = detect_transition(&curve, 0.5, 3).unwrap();
        assert_eq!(smoothed.epoch, None);
        // Clipped ends still average over the in-range window.
        assert!((smooth(&curve, 3)[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_curves_are_rejected() {
        assert!(detect_transition(&[0.1, f64::NAN], 0.2, 1).is_err());
        assert!(detect_transition(&[], 0.2, 1).is_err());
    }

    #[test]
    fn dysfunction_is_strictly_below_init() {
        assert!(dysfunction_flag(0.19, 0.2));
        assert!(!dysfunction_flag(0.2, 0.2));
        assert!(!dysfunction_flag(0.3, 0.2));
    }

    #[test]
    fn spearman_matches_hand_values() {
        // Perfect monotone.
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert!((rho.unwrap() - 1.0).abs() < 1e-12);
        // Perfect reversal.
        let rho = spearman(&[1.0, 2.0, 3.0], &[5.0, 4.0, 3.0]).unwrap();
        assert!((rho.unwrap() + 1.0).abs() < 1e-12);
        // Hand-computed with a tie: xs ranks [1, 2.5, 2.5, 4].
        let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .unwrap();
        // num = sum (rx - 2.5)(ry - 2.5) = (−1.5)(−1.5) + 0 + 0 + (1.5)(1.5) = 4.5
        // vx = 2·1.5² = 4.5, vy = 2·1.5² + 2·0.5² = 5 → rho = 4.5/sqrt(22.5)
        assert!((rho - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_sides_make_spearman_undefined() {
        assert_eq!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[7.0, 7.0, 7.0]).unwrap(), None);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    fn run(h: f64, seed: u64, plateau: usize, censored: bool) -> RunSummary {
        RunSummary {
            entropy: h,
            seed,
            transition: Transition {
                epoch: if censored { None } else { Some(plateau) },
                plateau_length: plateau,
                censored,
                threshold: 0.27,
            },
            final_accuracy: 0.9,
            final_weights_score: None,
            final_context_score: None,
            dysfunction: None,
        }
    }

    #[test]
    fn sweep_summary_aggregates_levels() {
        let mut runs = Vec::new();
        for (h, base) in [(0.0, 2), (1.38, 5), (4.15, 20)] {
            for s in 0..3u64 {
                runs.push(run(h, s, base + s as usize, false));
            }
        }
        let sum = sweep_summary(&runs).unwrap();
        assert_eq!(sum.levels.len(), 3);
        assert_eq!(sum.levels[0].median_plateau, 3.0);
        assert_eq!(sum.levels[2].median_plateau, 21.0);
        assert!(sum.entropy_plateau_spearman.unwrap() > 0.8);
    }

    #[test]
    fn sweep_summary_enforces_minimums() {
        let mut runs = Vec::new();
        for (h, base) in [(0.0, 2), (1.38, 5)] {
            for s in 0..3u64 {
                runs.push(run(h, s, base, false));
            }
        }
        assert!(sweep_summary(&runs).is_err());
        runs.clear();
        for (h, base) in [(0.0, 2), (1.38, 5), (4.15, 20)] {
            for s in 0..2u64 {
                runs.push(run(h, s, base, false));
            }
        }
        assert!(sweep_summary(&runs).is_err());
    }

    #[test]
    fn identical_plateaus_give_undefined_correlation() {
        let mut runs = Vec::new();
        for h in [0.0, 1.38, 4.15] {
            for s in 0..3u64 {
                runs.push(run(h, s, 5, false));
            }
        }
        let sum = sweep_summary(&runs).unwrap();
        assert_eq!(sum.entropy_plateau_spearman, None);
    }

    #[test]
    fn csv_rows_round_trip_floats() {
        let r = run(1.3862943611198906, 7, 4, false);
        let row = run_csv_row(&r);
        assert_eq!(RUN_CSV_HEADER.split(',').count(), row.split(',').count());
        let entropy: f64 = row.split(',').next().unwrap().parse().unwrap();
        assert_eq!(entropy, 1.3862943611198906);
        // Optional fields stay empty, booleans render as text.
        assert!(row.contains(",false,"));
        assert!(row.ends_with(",,"));
    }
}
