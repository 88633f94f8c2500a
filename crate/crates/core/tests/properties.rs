use mfg_core::experiment::ExperimentConfig;
use mfg_core::game::hamiltonian::grid_argmax;
use mfg_core::metrics::{pinsker, tv_atoms};
use mfg_core::stationary::{cesaro_operator, Grid, Histogram};
use mfg_core::{ActionKind, ActionSet};
use proptest::prelude::*;

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn argmax_takes_first_maximiser(f3 in prop::collection::vec(-1.0f64..1.0, 1..60), z in -2.0f64..2.0) {
        let beta: Vec<f64> = (0..f3.len()).map(|j| (j % 3) as f64 - 1.0).collect();
        let (i, v) = grid_argmax(&beta, &f3, &[z]);
        let vals: Vec<f64> = f3.iter().zip(&beta).map(|(f, b)| f + z * b).collect();
        prop_assert_eq!(v, vals[i]);
        prop_assert!(vals.iter().all(|x| *x <= v));
        prop_assert!(vals[..i].iter().all(|x| *x < v));
    }

    #[test]
    fn pinsker_dominates_discrete_tv((p, q) in (2usize..30).prop_flat_map(|n| (simplex(n), simplex(n)))) {
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        prop_assert!(tv_atoms(&p, &q) <= pinsker(kl) + 1e-12);
    }

    #[test]
    fn histogram_tv_is_a_metric(a in simplex(16), b in simplex(16), c in simplex(16)) {
        let g = Grid { lo: -2.0, hi: 2.0, bins: 16 };
        let (ha, hb, hc) = (
            Histogram::new(g.clone(), a).unwrap(),
            Histogram::new(g.clone(), b).unwrap(),
            Histogram::new(g, c).unwrap(),
        );
        prop_assert!((ha.tv(&hb) - hb.tv(&ha)).abs() < 1e-15);
        prop_assert!(ha.tv(&hb) <= 1.0 + 1e-12);
        prop_assert!(ha.tv(&hc) <= ha.tv(&hb) + hb.tv(&hc) + 1e-12);
        prop_assert_eq!(ha.mirrored().unwrap().mirrored().unwrap(), ha.clone());
        prop_assert!((ha.mirrored().unwrap().mean() + ha.mean()).abs() < 1e-12);
    }

    #[test]
    fn cesaro_average_is_a_probability(flow in prop::collection::vec(simplex(5), 3..40), dt in 0.01f64..1.0) {
        let steps = flow.len() - 1;
        let d = cesaro_operator(&flow, dt, steps).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..5 {
            let lo = flow.iter().map(|m| m[j]).fold(f64::INFINITY, f64::min);
            let hi = flow.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d[j] >= lo - 1e-12 && d[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn nearest_action_is_within_half_a_cell(x in -1.5f64..1.5, n in 2usize..60) {
        let set = ActionSet::new(ActionKind::interval(-1.0, 1.0, n)).unwrap();
        let i = set.nearest_index(&[x]);
        let h = 2.0 / (n - 1) as f64;
        let clamped = x.clamp(-1.0, 1.0);
        prop_assert!((set.point(i)[0] - clamped).abs() <= 0.5 * h + 1e-12);
    }

    #[test]
    fn config_echo_round_trips(seed in any::<u64>(), paths in 2usize..100_000, tol in 1e-6f64..1.0) {
        let text = format!(r#"{{"game": "gaussian-repulsion", "seed": {seed}, "paths": {paths}, "tol_fp": {tol}}}"#);
        let cfg = ExperimentConfig::from_json_str(&text).unwrap();
        let echo = serde_json::to_string(&cfg).unwrap();
        let again = ExperimentConfig::from_json_str(&echo).unwrap();
        prop_assert_eq!(serde_json::to_value(&again).unwrap(), serde_json::to_value(&cfg).unwrap());
        prop_assert_eq!(again.seed, Some(seed));
    }
}
