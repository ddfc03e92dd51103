use std::fs;
use std::path::Path;

use aerosense::config::RunConfig;
use aerosense::features::{fit_norm_stats, NORMALIZED_DIM};
use aerosense::geometry::AirspaceConfig;
use aerosense::io::{
    parse_message_line, parse_norm_stats, parse_sample_line, parse_snapshot, read_ndjson_with, write_ndjson,
};
use aerosense::model::ModelParams;
use aerosense::simulator::{generate_traffic, SimConfig};
use aerosense::snapshot::{chronological_split, make_dataset, time_grid, DatasetSpec, LabeledSample};

fn dataset(hours: f64, seed: u64) -> Vec<LabeledSample> {
    let airspace = AirspaceConfig::terminal_default();
    let sim = SimConfig { duration_s: hours * 3600.0, seed, ..SimConfig::default() };
    let msgs = generate_traffic(&sim, &airspace).unwrap();
    let spec = DatasetSpec::default();
    let grid = time_grid(0.0, sim.duration_s - spec.horizon_s, 300.0);
    make_dataset(&msgs, &grid, spec, &airspace, Some((0.0, sim.duration_s))).unwrap()
}

/// Welford's streaming mean/variance, one component at a time.
fn welford(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in values {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    (mean, (m2 / n).sqrt())
}

#[test]
fn norm_stats_match_streaming_oracle() {
    let samples = dataset(30.0, 4);
    let (train, _, _) = chronological_split(samples, [0.8, 0.1, 0.1]).unwrap();
    let stats = fit_norm_stats(&train).unwrap();
    let states: Vec<[f64; NORMALIZED_DIM]> = train
        .iter()
        .flat_map(|s| &s.snapshot.aircraft)
        .map(|m| [m.pos.lat, m.pos.lon, m.pos.alt, m.v_gs, m.v_vs, m.heading, m.v_dial, m.h_dial])
        .collect();
    assert!(states.len() > 1000);
    for i in 0..NORMALIZED_DIM {
        let (mean, std) = welford(states.iter().map(|s| s[i]));
        assert!((stats.mean[i] - mean).abs() <= 1e-9 * mean.abs().max(1.0), "mean {i}");
        assert!((stats.std[i] - std).abs() <= 1e-9 * std.max(1.0), "std {i}");
    }
}

#[test]
fn dataset_files_round_trip() {
    let samples = dataset(6.0, 11);
    assert!(samples.iter().any(|s| !s.snapshot.is_empty()));
    let mut buf = Vec::new();
    write_ndjson(&mut buf, &samples).unwrap();
    let back = read_ndjson_with(buf.as_slice(), parse_sample_line).unwrap();
    assert_eq!(back, samples);
}

fn corpus(target: &str) -> Vec<(String, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<(String, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files
}

/// Seeds named `seed_ok_*` must parse; `seed_bad_*` must be rejected.
fn replay(target: &str, parse: impl Fn(&str) -> bool) {
    for (name, text) in corpus(target) {
        let accepted = parse(&text);
        if name.starts_with("seed_ok_") {
            assert!(accepted, "{target}/{name} should parse");
        } else if name.starts_with("seed_bad_") {
            assert!(!accepted, "{target}/{name} should be rejected");
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = RunConfig::from_toml(&fs::read_to_string(dir.join("default.toml")).unwrap()).unwrap();
    assert_eq!(default.model, RunConfig::default().model);
    assert_eq!(default.train, RunConfig::default().train);
    let synthetic = RunConfig::from_toml(&fs::read_to_string(dir.join("synthetic.toml")).unwrap()).unwrap();
    assert_eq!(synthetic.model.d_model, 32);
    assert_eq!(synthetic.simulation.duration_s, 14.0 * 86_400.0);
}

#[test]
fn fuzz_corpus_seeds_replay() {
    replay("message_line", |t| read_ndjson_with(t.as_bytes(), parse_message_line).is_ok());
    replay("sample_line", |t| read_ndjson_with(t.as_bytes(), parse_sample_line).is_ok());
    replay("snapshot_json", |t| parse_snapshot(t).is_ok());
    replay("run_config", |t| RunConfig::from_toml(t).is_ok());
    replay("params_json", |t| ModelParams::from_json(t).is_ok());
    replay("norm_stats", |t| parse_norm_stats(t).is_ok());
}
