//! Threshold and fusion-weight search on hand-built score distributions.

use confroute::router::{
    calibrate_thresholds, learn_fusion_weights, route, Action, CalibrationObjective,
    CalibrationSample, CostModel, WeightSample,
};
use confroute::signals::SignalValues;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples: Vec<CalibrationSample> = (0..400)
        .map(|i| {
            let bad = i % 3 == 0;
            let s = if bad {
                rng.random_range(0.05..0.45)
            } else {
                rng.random_range(0.55..0.95)
            };
            CalibrationSample::new(s, bad)
        })
        .collect();

    let cost = CostModel::default();
    for objective in [
        CalibrationObjective::F1,
        CalibrationObjective::CostBoundedF1 { max_cost: 2.0 },
    ] {
        let th = calibrate_thresholds(&samples, &cost, objective, 0.01)?;
        let local = samples
            .iter()
            .filter(|s| route(s.score, &th) == Ok(Action::Local))
            .count();
        println!(
            "{objective:?}: high {:.2} med {:.2} low {:.2}, {local} of {} answered locally",
            th.high,
            th.med,
            th.low,
            samples.len()
        );
    }

    // only the convergence signal separates the classes here
    let ws: Vec<WeightSample> = (0..300)
        .map(|i| {
            let bad = i % 2 == 0;
            WeightSample {
                signals: SignalValues {
                    sem: rng.random(),
                    conv: if bad {
                        rng.random_range(0.0..0.5)
                    } else {
                        rng.random_range(0.7..1.0)
                    },
                    learned: rng.random(),
                },
                hallucinated: bad,
            }
        })
        .collect();
    let w = learn_fusion_weights(&ws, 0.6, 0.05)?;
    println!(
        "weights sem {:.2} conv {:.2} learned {:.2}",
        w.sem, w.conv, w.learned
    );
    Ok(())
}
