use std::collections::HashSet;

use gdm_core::bench::{map_from_log, read_measurement_log, run_benchmark, simulate, write_measurement_log, BenchOptions, MapExport, Scenario, Variant};

const ROOM: &str = r#"
name = "room"
seed = 5
wind = [1.0, 0.3]

[grid]
size = [12.0, 8.0, 3.0]
obstacles = [{ min = [6.0, 0.0, 0.0], max = [7.0, 3.0, 3.0] }]

[[sources]]
position = [2.5, 4.5, 1.5]
strength = 2.0

[plan]
mode = "lawnmower"
x = [0.5, 11.5]
y = [0.5, 7.5]
spacing = 2.0
z = 1.5
speed = 1.0

[timing]
dense_resolve_s = 4.0
"#;

fn room() -> Scenario {
    Scenario::from_toml_str(ROOM).unwrap()
}

#[test]
fn runs_are_deterministic_apart_from_wall_clock() {
    let s = room();
    for v in Variant::ALL {
        let a = run_benchmark(&s, v, BenchOptions::default()).unwrap();
        let b = run_benchmark(&s, v, BenchOptions::default()).unwrap();
        assert_eq!(a.series, b.series, "{v}");
        assert_eq!(a.map, b.map, "{v}");
        let strip = |mut st: gdm_core::bench::RunStats| {
            st.wall_total_s = 0.0;
            st.wall_mean_resolve_ms = 0.0;
            st.wall_median_resolve_ms = 0.0;
            st
        };
        assert_eq!(strip(a.stats), strip(b.stats), "{v}");
    }
}

#[test]
fn stats_agree_with_reports_and_map() {
    let s = room();
    for v in Variant::ALL {
        let r = run_benchmark(&s, v, BenchOptions::default()).unwrap();
        assert_eq!(r.stats.processed_measurements, r.insertions.len());
        assert_eq!(r.stats.processed_measurements, r.log.accepted().count());
        assert!(r.stats.mean_states <= r.stats.final_states as f64);
        assert_eq!(r.map.rows.len(), r.stats.final_states);
        assert_eq!(r.map.header.nodes, r.stats.final_states);
        let voxels: HashSet<_> = r.map.rows.iter().map(|row| row.voxel()).collect();
        assert_eq!(voxels.len(), r.map.rows.len());
        assert!(r.map.rows.iter().all(|row| row.variance > 0.0));
        // series points fall on the sampling grid
        for (k, p) in r.series.iter().enumerate() {
            assert_eq!(p.t, k as f64 * s.eval.rmse_interval);
        }
    }
}

#[test]
fn dense_variant_never_inserts_inside_an_unresolved_window() {
    let r = run_benchmark(&room(), Variant::DenseDirect, BenchOptions::default()).unwrap();
    assert!(r.stats.dropped_measurements > 0);
    for w in r.insertions.windows(2) {
        assert!(w[1].t >= w[0].t + w[0].resolve_s, "{} inserted before {} resolved", w[1].t, w[0].t);
    }
    let gabp = run_benchmark(&room(), Variant::GabpDynamic, BenchOptions::default()).unwrap();
    assert!(r.stats.processed_measurements < gabp.stats.processed_measurements);
}

#[test]
fn dynamic_graph_uses_fewer_states_on_the_same_stream() {
    let s = room();
    let d = run_benchmark(&s, Variant::GabpDynamic, BenchOptions::default()).unwrap();
    let f = run_benchmark(&s, Variant::GabpFull, BenchOptions::default()).unwrap();
    assert_eq!(d.log.accepted().count(), f.log.accepted().count());
    assert!(d.stats.final_states <= f.stats.final_states);
}

#[test]
fn simulated_log_maps_through_files() {
    let s = room();
    let dir = tempfile::tempdir().unwrap();
    let (_, rows) = simulate(&s).unwrap();
    assert!(!rows.is_empty());
    let log_path = dir.path().join("log.csv");
    write_measurement_log(&rows, std::fs::File::create(&log_path).unwrap()).unwrap();
    let back = read_measurement_log(std::fs::File::open(&log_path).unwrap()).unwrap();
    assert_eq!(back, rows);

    let map = map_from_log(&s, Variant::GabpDynamic, &back).unwrap();
    assert_eq!(map.header.nodes, map.rows.len());
    let map_path = dir.path().join("map.csv");
    map.save(&map_path).unwrap();
    assert_eq!(MapExport::load(&map_path).unwrap(), map);

    // the full graph covers every free voxel
    let full = map_from_log(&s, Variant::GabpFull, &back).unwrap();
    assert_eq!(full.rows.len(), s.build_grid().unwrap().free_voxels().count());
}
