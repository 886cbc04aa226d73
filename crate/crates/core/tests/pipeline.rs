use proptest::prelude::*;
use sthawkes::em::{fit_em, EmConfig};
use sthawkes::generator::{batch_seeds, simulate_batch, simulate_reported, simulate_stream, GenConfig};
use sthawkes::io::{read_streams, region_map_from_toml, region_map_hash, region_map_to_toml, write_streams, StreamMeta};
use sthawkes::noise::BaseNoise;
use sthawkes::thinning::{synthetic_partition, RegionMap};
use sthawkes::{BackgroundConfig, ModelParams};

fn params() -> ModelParams {
    ModelParams::new(0.6, 1.5, 1.0, 0.05)
}

#[test]
fn csv_round_trip_preserves_em_fit_bit_for_bit() {
    let bg = BackgroundConfig::default();
    let streams = simulate_batch(&params(), &bg, &batch_seeds(5, 6), &GenConfig::horizon(15.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    write_streams(&path, &streams, &StreamMeta::describe(&streams)).unwrap();
    let (back, meta) = read_streams(&path).unwrap();
    assert_eq!(meta.unwrap().n_streams, streams.len());
    let cfg = EmConfig { max_iters: 10, ..EmConfig::default() };
    let a = fit_em(&streams, &params(), &bg, &cfg).unwrap();
    let b = fit_em(&back, &params(), &bg, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_reporting_changes_nothing() {
    let bg = BackgroundConfig::default();
    let cfg = GenConfig::count(40);
    for seed in 0..5 {
        let full = simulate_stream(&params(), &bg, &mut BaseNoise::new(seed), &cfg).unwrap();
        let rep = simulate_reported(&params(), &bg, &RegionMap::none(), seed, &cfg).unwrap();
        assert_eq!(full.events, rep.events);
    }
}

#[test]
fn region_map_toml_round_trip_keeps_hash() {
    let rates: Vec<f64> = (0..19).map(|i| 0.05 + 0.04 * i as f64).collect();
    let map = synthetic_partition(&rates).unwrap();
    let text = region_map_to_toml(&map).unwrap();
    let back = region_map_from_toml(&text, std::path::Path::new("map.toml")).unwrap();
    assert_eq!(back, map);
    assert_eq!(region_map_hash(&back).unwrap(), region_map_hash(&map).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reported_events_are_a_subsequence_of_the_full_stream(seed in any::<u64>(), q in 0.05f64..1.0) {
        let bg = BackgroundConfig::default();
        let cfg = GenConfig::count(30);
        let full = simulate_stream(&params(), &bg, &mut BaseNoise::new(seed), &cfg).unwrap();
        let rep = simulate_reported(&params(), &bg, &RegionMap::uniform(q), seed, &cfg).unwrap();
        let mut it = full.events.iter();
        for e in &rep.events {
            prop_assert!(it.any(|f| f.t == e.t && f.x == e.x && f.y == e.y));
        }
        prop_assert_eq!(rep.horizon, full.horizon);
    }
}
