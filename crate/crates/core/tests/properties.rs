use chrono::{NaiveDate, NaiveDateTime};
use proptest::prelude::*;

use arlp_core::checkpoint::Checkpoint;
use arlp_core::evaluation::{mae, mape, rmse};
use arlp_core::grid::{normalize, split_by_time, split_days};
use arlp_core::ingest::{bin_orders, Horizon, OrderRecord};
use arlp_core::semantic::{acf_vector, AttentionOutcome, ChannelWeights, SimilarityMaps};
use arlp_core::training::LossHistory;
use arlp_core::{Channel, CityCube, GridSpec, Model, ModelConfig, ModelKind, TrainConfig};

fn grid(rows: usize, cols: usize) -> GridSpec {
    GridSpec { rows, cols, interval_minutes: 240, neighborhood: 3, window: 3, history_days: 1, acf_lags: 1 }
}

fn cube_strategy() -> impl Strategy<Value = CityCube> {
    (1usize..4, 1usize..4, 2usize..5).prop_flat_map(|(r, c, days)| {
        let n = Channel::COUNT * days * 6 * r * c;
        prop::collection::vec(-50.0f64..50.0, n).prop_map(move |vals| {
            let mut cube = CityCube::zeros(grid(r, c), days).unwrap();
            let mut it = vals.into_iter();
            for ch in Channel::ALL {
                for d in 0..days {
                    for t in 0..6 {
                        for x in 0..r * c {
                            let v = it.next().unwrap();
                            let v = if ch.is_categorical() { v.abs().floor() % 4.0 } else { v };
                            cube.set(ch, d, t, x, v);
                        }
                    }
                }
            }
            cube
        })
    })
}

fn at(day: u32, minute: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2016, 1, 1 + day).unwrap().and_hms_opt(minute / 60, minute % 60, 0).unwrap()
}

fn order_strategy() -> impl Strategy<Value = OrderRecord> {
    (0u32..2, 0u32..1380, 0usize..4, 0usize..4, 0usize..3, 0usize..3, 0.0f64..20.0).prop_map(
        |(day, minute, sr, sc, er, ec, dist)| OrderRecord {
            start_time: at(day, minute),
            end_time: at(day, minute + 30),
            start_cell: (sr, sc),
            end_cell: (er, ec),
            distance_km: dist,
            served: false,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_training_days_lie_in_unit_range(cube in cube_strategy()) {
        let train = 0..cube.days() - 1;
        let (norm, stats) = normalize(&cube, train.clone()).unwrap();
        for ch in Channel::ALL {
            for d in 0..cube.days() {
                for t in 0..6 {
                    for (x, &v) in norm.slice(ch, d, t).iter().enumerate() {
                        let raw = cube.at(ch, d, t, x);
                        if ch.is_categorical() {
                            prop_assert_eq!(v, raw);
                            continue;
                        }
                        if train.contains(&d) {
                            prop_assert!((0.0..=1.0).contains(&v), "{ch:?} {v}");
                        }
                        prop_assert!((stats.denormalize_value(ch, v) - raw).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn autocorrelation_is_bounded(series in prop::collection::vec(-10.0f64..10.0, 3..24), lag_seed in 0usize..100) {
        let lags = lag_seed % (series.len() - 1);
        let acf = acf_vector(&series, lags).unwrap();
        prop_assert_eq!(acf.0.len(), lags + 1);
        prop_assert_eq!(acf.0[0], 1.0);
        for &r in &acf.0 {
            prop_assert!(r.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn final_attention_is_masked_sample_attention(
        maps in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 9), 4),
        w in prop::array::uniform4(-1.0f64..1.0),
        b in -0.5f64..0.5,
        target in 0usize..9,
        beta in 0.0f64..1.0,
    ) {
        let maps = SimilarityMaps { target, maps: [maps[0].clone(), maps[1].clone(), maps[2].clone(), maps[3].clone()] };
        let weights = ChannelWeights { w, b };
        let sd_k = b + (0..4).map(|c| w[c] * maps.maps[c][target]).sum::<f64>();
        match AttentionOutcome::compute(&maps, &weights, beta) {
            Err(_) => prop_assert!(sd_k.abs() <= 1e-8),
            Ok(att) => {
                prop_assert!((att.sa[target] - 1.0).abs() < 1e-12);
                prop_assert_eq!(att.ha[target], sd_k > beta * sd_k);
                for i in 0..9 {
                    prop_assert_eq!(att.ha[i], att.sd[i] > beta * sd_k);
                    prop_assert_eq!(att.fa[i], if att.ha[i] { att.sa[i] } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn cube_bytes_round_trip(cube in cube_strategy()) {
        let back = CityCube::read_from(cube.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, cube);
    }

    #[test]
    fn binned_demand_counts_in_grid_records(orders in prop::collection::vec(order_strategy(), 0..60)) {
        let g = GridSpec { rows: 3, cols: 3, interval_minutes: 60, ..grid(3, 3) };
        let horizon = Horizon { origin: at(0, 0).date(), days: 2 };
        let mut cube = CityCube::zeros(g, 2).unwrap();
        let skipped = bin_orders(&orders, &horizon, &mut cube);
        let inside = orders.iter().filter(|o| o.start_cell.0 < 3 && o.start_cell.1 < 3).count();
        prop_assert_eq!(skipped, orders.len() - inside);
        let total: f64 = (0..2).flat_map(|d| (0..24).map(move |t| (d, t)))
            .map(|(d, t)| cube.slice(Channel::Demand, d, t).iter().sum::<f64>())
            .sum();
        prop_assert_eq!(total, inside as f64);

        let mut reversed = orders.clone();
        reversed.reverse();
        let mut again = CityCube::zeros(g, 2).unwrap();
        bin_orders(&reversed, &horizon, &mut again);
        prop_assert_eq!(again, cube);
    }

    #[test]
    fn time_split_is_chronological(cube in cube_strategy(), a in 1u32..5, b in 1u32..5) {
        let days = cube.days();
        match split_days(days, (a, b)) {
            Err(_) => prop_assert!(split_by_time(&cube, (a, b)).is_err()),
            Ok((train, test)) => {
                prop_assert_eq!(train.start, 0);
                prop_assert_eq!(train.end, test.start);
                prop_assert_eq!(test.end, days);
                let (left, right) = split_by_time(&cube, (a, b)).unwrap();
                prop_assert_eq!(left.days() + right.days(), days);
                prop_assert_eq!(right.at(Channel::Gap, 0, 2, 0), cube.at(Channel::Gap, train.end, 2, 0));
            }
        }
    }

    #[test]
    fn metric_invariants(pairs in prop::collection::vec((-5.0f64..5.0, prop_oneof![Just(0.0), -5.0f64..5.0]), 1..50)) {
        let (pred, label): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(rmse(&pred, &label).unwrap() >= mae(&pred, &label).unwrap() - 1e-12);
        match mape(&pred, &label) {
            Ok(m) => prop_assert_eq!(m.included + m.excluded, label.len()),
            Err(e) => {
                prop_assert!(e.is_numeric());
                prop_assert!(label.iter().all(|l| l.abs() <= 1e-8));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), kind in prop_oneof![Just(ModelKind::Arlp), Just(ModelKind::Advanced), Just(ModelKind::Lstm)]) {
        let g = GridSpec { history_days: 2, ..grid(3, 2) };
        let cfg = ModelConfig { d_g: 3, channel_width: 2, d_h: 4, ..ModelConfig::default() };
        let (model, params) = Model::new(kind, g, cfg, seed).unwrap();
        let ck = Checkpoint {
            model,
            params,
            stats: arlp_core::NormalizationStats::identity(),
            train: TrainConfig { seed, ..TrainConfig::default() },
            step: (seed % 1000) as usize,
            history: LossHistory { steps: vec![seed as f64], epochs: Vec::new() },
            config_hash: format!("{seed:x}"),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.params, ck.params);
        prop_assert_eq!(back.model.kind(), kind);
    }
}
