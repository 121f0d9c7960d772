use std::fs;

use nielab::datagen::{
    gen_ie_spirals_with, gen_lorenz, gen_lotka_volterra, read_dataset, write_dataset, SpiralConfig,
};
use nielab::Error;

#[test]
fn lotka_volterra_default_shape_and_positive_states() {
    let ds = gen_lotka_volterra(100, 0).unwrap();
    assert_eq!(ds.trajectories.shape(), &[100, 100, 2]);
    assert_eq!(ds.times.last(), 15.0);
    assert!(ds.trajectories.data().iter().all(|&v| v > 0.0));
}

#[test]
fn lorenz_is_bounded() {
    let ds = gen_lorenz(100, 0).unwrap();
    assert_eq!(ds.trajectories.shape(), &[100, 100, 3]);
    let max_z = ds
        .trajectories
        .data()
        .chunks(3)
        .map(|r| r[2].abs())
        .fold(0.0, f64::max);
    assert!(max_z < 100.0, "{max_z}");
}

#[test]
fn generators_are_pure_functions_of_seed() {
    assert_eq!(gen_lorenz(5, 9).unwrap(), gen_lorenz(5, 9).unwrap());
    assert_ne!(gen_lorenz(5, 9).unwrap().trajectories, gen_lorenz(5, 10).unwrap().trajectories);
    let cfg = SpiralConfig {
        n_samples: 200,
        ..SpiralConfig::default()
    };
    let a = gen_ie_spirals_with(3, 4, &cfg).unwrap();
    let b = gen_ie_spirals_with(3, 4, &cfg).unwrap();
    assert_eq!(a.trajectories.data(), b.trajectories.data());
}

#[test]
fn roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_lorenz(4, 2).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn wrong_curve_count_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&gen_lotka_volterra(3, 0).unwrap(), dir.path()).unwrap();
    let mpath = dir.path().join("manifest.json");
    let text = fs::read_to_string(&mpath).unwrap();
    fs::write(&mpath, text.replace("\"n_curves\": 3", "\"n_curves\": 4")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::DatasetShape(_))));
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::MissingFile(_))));
}

#[test]
fn bad_cell_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&gen_lotka_volterra(1, 0).unwrap(), dir.path()).unwrap();
    let cpath = dir.path().join("curves/curve_0.csv");
    let mut lines: Vec<String> = fs::read_to_string(&cpath).unwrap().lines().map(String::from).collect();
    let first = lines[3].split(',').next().unwrap().to_string();
    lines[3] = format!("{first},oops");
    fs::write(&cpath, lines.join("\n")).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::BadCell { row, col, cell, .. }) => {
            assert_eq!((row, col, cell.as_str()), (3, 2, "oops"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn ingests_a_hand_written_grid_dataset() {
    // 4 x 4 lattice, 3 time points, single channel u
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("curves")).unwrap();
    fs::write(
        dir.path().join("manifest.json"),
        r#"{"generator": "external", "seed": 0, "n_curves": 1, "n_time": 3, "dim": 1,
            "channels": ["u"], "times": [0.0, 0.5, 1.0],
            "lattice": [{"lo": 0.0, "hi": 1.0, "count": 4}, {"lo": -1.0, "hi": 1.0, "count": 4}]}"#,
    )
    .unwrap();
    let mut header = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            header.push(format!("u@{i}_{j}"));
        }
    }
    let mut csv = header.join(",") + "\n";
    for k in 0..3 {
        let row: Vec<String> = (0..16).map(|p| (100 * k + p).to_string()).collect();
        csv += &(row.join(",") + "\n");
    }
    fs::write(dir.path().join("curves/curve_0.csv"), csv).unwrap();

    let ds = read_dataset(dir.path()).unwrap();
    assert_eq!(ds.trajectories.shape(), &[1, 3, 4, 4, 1]);
    let lat = ds.lattice.as_ref().unwrap();
    assert_eq!(lat.shape(), vec![4, 4]);
    assert_eq!(lat.coords(7), vec![1.0 / 3.0, 1.0]);
    assert_eq!(ds.trajectories.get(&[0, 2, 1, 3, 0]), 207.0);
    let again = tempfile::tempdir().unwrap();
    write_dataset(&ds, again.path()).unwrap();
    assert_eq!(read_dataset(again.path()).unwrap(), ds);
}
