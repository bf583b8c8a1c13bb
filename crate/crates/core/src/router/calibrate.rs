use serde::{Deserialize, Serialize};

use super::{Action, CostModel, RouterError, Thresholds};
use crate::signals::{fuse, FusionWeights, SignalValues};

/// What threshold calibration maximizes. Both objectives score the binary
/// flagging rule `c_overall < θ_high` by F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CalibrationObjective {
    F1,
    /// F1 restricted to triples whose expected cost stays within `max_cost`.
    CostBoundedF1 {
        max_cost: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSample {
    pub score: f64,
    pub hallucinated: bool,
    pub optimal_action: Option<Action>,
}

impl CalibrationSample {
    pub fn new(score: f64, hallucinated: bool) -> Self {
        Self {
            score,
            hallucinated,
            optimal_action: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSample {
    pub signals: SignalValues,
    pub hallucinated: bool,
}

/// Grid values `k·step` strictly inside (0, 1).
pub fn threshold_grid(step: f64) -> Result<Vec<f64>, RouterError> {
    if !(step > 0.0 && step < 1.0) {
        return Err(RouterError::Calibration(format!(
            "grid step must lie in (0, 1), got {step}"
        )));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() < 1e-9 {
        let n = n as u64;
        Ok((1..n).map(|k| k as f64 / n as f64).collect())
    } else {
        Ok((1..)
            .map(|k| k as f64 * step)
            .take_while(|v| *v < 1.0 - 1e-9)
            .collect())
    }
}

/// Lattice points of the 2-simplex at resolution `step` (which must divide 1).
pub fn simplex_grid(step: f64) -> Result<Vec<FusionWeights>, RouterError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(RouterError::Calibration(format!(
            "grid step must lie in (0, 1], got {step}"
        )));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(RouterError::Calibration(format!(
            "grid step {step} does not divide 1"
        )));
    }
    let n = n as u64;
    let nf = n as f64;
    let mut out = Vec::new();
    for i in (0..=n).rev() {
        for j in (0..=n - i).rev() {
            let k = n - i - j;
            out.push(FusionWeights {
                sem: i as f64 / nf,
                conv: j as f64 / nf,
                learned: k as f64 / nf,
            });
        }
    }
    Ok(out)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn check_labels<T>(items: &[T], label: impl Fn(&T) -> bool) -> Result<(), RouterError> {
    if items.is_empty() {
        return Err(RouterError::Calibration("no labeled samples".into()));
    }
    let pos = items.iter().filter(|s| label(s)).count();
    if pos == 0 || pos == items.len() {
        return Err(RouterError::Calibration(
            "labels are single-class; need both hallucinated and correct samples".into(),
        ));
    }
    Ok(())
}

/// Counts of sorted values strictly below each grid value.
fn below_counts(sorted: &[f64], grid: &[f64]) -> Vec<usize> {
    grid.iter()
        .map(|t| sorted.partition_point(|s| s < t))
        .collect()
}

fn sorted_scores<'a>(it: impl Iterator<Item = &'a CalibrationSample>) -> Vec<f64> {
    let mut v: Vec<f64> = it.map(|s| s.score).collect();
    v.sort_by(f64::total_cmp);
    v
}

const TIE: f64 = 1e-12;

/// Exhaustive search over ordered threshold triples.
///
/// Candidates are ranked by the objective's F1, then (only when optimal
/// actions are annotated) by routing accuracy, then by lowest expected cost.
/// Every grid triple that routes each sample the same way as the winner ties
/// on all of these; among them each threshold is moved to the grid point
/// nearest the middle of the score-free gap around it, so a small
/// calibration pool does not leave a threshold touching its closest sample.
/// Thresholds without samples on both sides stay lexicographically smallest.
pub fn calibrate_thresholds(
    samples: &[CalibrationSample],
    cost: &CostModel,
    objective: CalibrationObjective,
    grid_step: f64,
) -> Result<Thresholds, RouterError> {
    let (grid, idx) = search_thresholds(samples, cost, objective, grid_step)?;
    let idx = center_in_gaps(&sorted_scores(samples.iter()), &grid, idx);
    Ok(Thresholds {
        high: grid[idx[0]],
        med: grid[idx[1]],
        low: grid[idx[2]],
    })
}

/// Moves each threshold index within its tie class: the grid points with the
/// same number of scores below them, keeping `high > med > low`.
fn center_in_gaps(sorted: &[f64], grid: &[f64], [mut h, mut m, mut l]: [usize; 3]) -> [usize; 3] {
    let below = below_counts(sorted, grid);
    let center = |i: usize, lo_idx: usize, hi_idx: usize| -> usize {
        let k = below[i];
        if k == 0 || k == sorted.len() {
            return i;
        }
        let mid = 0.5 * (sorted[k - 1] + sorted[k]);
        (lo_idx..=hi_idx)
            .filter(|&j| below[j] == k)
            .min_by(|&a, &b| {
                (grid[a] - mid)
                    .abs()
                    .total_cmp(&(grid[b] - mid).abs())
                    .then(a.cmp(&b))
            })
            .unwrap_or(i)
    };
    h = center(h, m + 1, grid.len() - 1);
    m = center(m, l + 1, h - 1);
    l = center(l, 0, m - 1);
    [h, m, l]
}

/// The ranked search; returns the grid and the winning `[h, m, l]`
/// indices with ties going to the lexicographically smallest triple.
fn search_thresholds(
    samples: &[CalibrationSample],
    cost: &CostModel,
    objective: CalibrationObjective,
    grid_step: f64,
) -> Result<(Vec<f64>, [usize; 3]), RouterError> {
    check_labels(samples, |s| s.hallucinated)?;
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(RouterError::Calibration("non-finite score".into()));
    }
    cost.validate()?;
    let grid = threshold_grid(grid_step)?;
    if grid.len() < 3 {
        return Err(RouterError::Calibration(format!(
            "grid step {grid_step} yields fewer than three threshold values"
        )));
    }

    let n = samples.len();
    let all = below_counts(&sorted_scores(samples.iter()), &grid);
    let pos = below_counts(
        &sorted_scores(samples.iter().filter(|s| s.hallucinated)),
        &grid,
    );
    let n_pos = samples.iter().filter(|s| s.hallucinated).count();
    let annotated = samples.iter().any(|s| s.optimal_action.is_some());
    let opt: Vec<(usize, Vec<usize>)> = Action::ALL
        .iter()
        .map(|a| {
            let members: Vec<&CalibrationSample> = samples
                .iter()
                .filter(|s| s.optimal_action == Some(*a))
                .collect();
            (
                members.len(),
                below_counts(&sorted_scores(members.into_iter()), &grid),
            )
        })
        .collect();

    let g = grid.len();
    let mut best: Option<(f64, f64, f64, [usize; 3])> = None;
    for h in 2..g {
        let tp = pos[h];
        let f1 = f1_from_counts(tp, all[h] - tp, n_pos - tp);
        for m in 1..h {
            for l in 0..m {
                let counts = [n - all[h], all[h] - all[m], all[m] - all[l], all[l]];
                let c = cost
                    .mean_cost(&[
                        counts[0] as u64,
                        counts[1] as u64,
                        counts[2] as u64,
                        counts[3] as u64,
                    ])
                    .expect("nonempty");
                if let CalibrationObjective::CostBoundedF1 { max_cost } = objective {
                    if c > max_cost + TIE {
                        continue;
                    }
                }
                let acc = if annotated {
                    let (nl, bl) = &opt[0];
                    let (_, br) = &opt[1];
                    let (_, bg) = &opt[2];
                    let (_, bh) = &opt[3];
                    (nl - bl[h]) + (br[h] - br[m]) + (bg[m] - bg[l]) + bh[l]
                } else {
                    0
                } as f64;
                let better = match &best {
                    None => true,
                    Some((bf, ba, bc, _)) => {
                        if (f1 - bf).abs() > TIE {
                            f1 > *bf
                        } else if (acc - ba).abs() > TIE {
                            acc > *ba
                        } else {
                            c < bc - TIE
                        }
                    }
                };
                if better {
                    best = Some((f1, acc, c, [h, m, l]));
                }
            }
        }
    }
    let idx = best.map(|b| b.3).ok_or_else(|| {
        RouterError::Calibration("no threshold triple satisfies the cost bound".into())
    })?;
    Ok((grid, idx))
}

/// F1 of flagging `fuse(signals) < theta_high` against the hallucination labels.
pub(crate) fn fused_f1(samples: &[WeightSample], w: &FusionWeights, theta_high: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in samples {
        let flagged = fuse(s.signals.sem, s.signals.conv, s.signals.learned, w) < theta_high;
        match (flagged, s.hallucinated) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

/// Grid search over simplex weights maximizing F1 of the induced flagging
/// rule. Among maximizers the most uniform (highest-entropy) vector wins; the
/// exact centroid is always a candidate alongside the lattice.
pub fn learn_fusion_weights(
    samples: &[WeightSample],
    theta_high: f64,
    grid_step: f64,
) -> Result<FusionWeights, RouterError> {
    learn_fusion_weights_over(samples, theta_high, grid_step, [true; 3])
}

/// [`learn_fusion_weights`] restricted to weight vectors that are zero on
/// every signal whose `active` flag (sem, conv, learned) is false.
pub fn learn_fusion_weights_over(
    samples: &[WeightSample],
    theta_high: f64,
    grid_step: f64,
    active: [bool; 3],
) -> Result<FusionWeights, RouterError> {
    check_labels(samples, |s| s.hallucinated)?;
    let k = active.iter().filter(|a| **a).count();
    if k == 0 {
        return Err(RouterError::Calibration("no active signals".into()));
    }
    let centroid = active.map(|a| if a { 1.0 / k as f64 } else { 0.0 });
    let mut candidates: Vec<FusionWeights> = simplex_grid(grid_step)?
        .into_iter()
        .filter(|w| w.as_array().iter().zip(active).all(|(v, a)| a || *v == 0.0))
        .collect();
    candidates.push(FusionWeights {
        sem: centroid[0],
        conv: centroid[1],
        learned: centroid[2],
    });

    let mut best: Option<(f64, f64, FusionWeights)> = None;
    for w in candidates {
        let f1 = fused_f1(samples, &w, theta_high);
        let ent = w.entropy();
        let better = match &best {
            None => true,
            Some((bf, be, _)) => {
                if (f1 - bf).abs() > TIE {
                    f1 > *bf
                } else {
                    ent > be + TIE
                }
            }
        };
        if better {
            best = Some((f1, ent, w));
        }
    }
    Ok(best.expect("candidate set is nonempty").2)
}
