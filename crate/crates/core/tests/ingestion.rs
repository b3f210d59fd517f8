use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dyngpi::data_model::{ingest_embeddings, load_dataset, save_dataset, Dataset, Trajectory};
use dyngpi::numerics::Rng;
use proptest::prelude::*;

/// Writes the three ingestion files for units given as `(id, y, w, r)`.
fn write_inputs(dir: &Path, units: &[(String, f64, Vec<u8>, Vec<Vec<f32>>)], keyed: bool) {
    let mut emb = String::new();
    let mut out = String::from("unit_id,y\n");
    let mut treat = String::from("unit_id,segment_index,w\n");
    for (id, y, w, r) in units {
        if keyed {
            emb += &serde_json::json!({ "unit_id": id, "r": r }).to_string();
        } else {
            emb += &serde_json::to_string(r).unwrap();
        }
        emb.push('\n');
        writeln!(out, "{id},{y:?}").unwrap();
        // Rows in reverse order: alignment must not rely on file order.
        for (s, wv) in w.iter().enumerate().rev() {
            writeln!(treat, "{id},{},{wv}", s + 1).unwrap();
        }
    }
    fs::write(dir.join("emb.jsonl"), emb).unwrap();
    fs::write(dir.join("y.csv"), out).unwrap();
    fs::write(dir.join("w.csv"), treat).unwrap();
}

fn ingest(dir: &Path) -> dyngpi::Result<Dataset> {
    ingest_embeddings(&dir.join("emb.jsonl"), &dir.join("y.csv"), &dir.join("w.csv"))
}

fn check_same(ds: &Dataset, units: &[(String, f64, Vec<u8>, Vec<Vec<f32>>)]) {
    assert_eq!(ds.len(), units.len());
    for (got, (_, y, w, r)) in ds.units().iter().zip(units) {
        assert_eq!(got.y.to_bits(), y.to_bits());
        assert_eq!(&got.w, w);
        for (s, seg) in r.iter().enumerate() {
            let want: Vec<f64> = seg.iter().map(|&v| f64::from(v)).collect();
            assert_eq!(got.segment(s + 1), want.as_slice());
        }
    }
}

#[test]
fn full_scale_round_trip() {
    let (n, s, d) = (2085, 2, 4096);
    let mut rng = Rng::new(77);
    let units: Vec<_> = (0..n)
        .map(|i| {
            let r: Vec<Vec<f32>> =
                (0..s).map(|_| (0..d).map(|_| rng.standard_normal() as f32).collect()).collect();
            let w = (0..s).map(|_| u8::from(rng.uniform() < 0.4)).collect();
            (format!("story-{i}"), rng.normal(0.0, 2.0), w, r)
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), &units, true);
    let ds = ingest(dir.path()).unwrap();
    assert_eq!((ds.len(), ds.s_max(), ds.d_r()), (n, s, d));
    check_same(&ds, &units);

    let native = dir.path().join("native.jsonl");
    save_dataset(&ds, &native).unwrap();
    let back = load_dataset(&native).unwrap();
    let first_diff = back.units().iter().zip(ds.units()).position(|(a, b)| a != b);
    assert_eq!(first_diff, None);
    assert_eq!((back.len(), back.s_max(), back.d_r()), (n, s, d));
}

#[test]
fn misaligned_ids_are_reported() {
    let units = vec![
        ("a".to_string(), 1.0, vec![1], vec![vec![0.5f32, 1.5]]),
        ("b".to_string(), 2.0, vec![0, 1], vec![vec![0.0f32, 1.0], vec![2.0, 3.0]]),
    ];
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), &units, true);
    let y = fs::read_to_string(dir.path().join("y.csv")).unwrap().replace("b,", "c,");
    fs::write(dir.path().join("y.csv"), y).unwrap();
    let err = ingest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("'b'"), "{err}");
}

fn unit_strategy(d: usize) -> impl Strategy<Value = (f64, Vec<u8>, Vec<Vec<f32>>)> {
    (1usize..=4).prop_flat_map(move |len| {
        (
            -1e6f64..1e6,
            prop::collection::vec(0u8..=1, len),
            prop::collection::vec(prop::collection::vec(-1e3f32..1e3, d), len),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ingestion_and_native_format_round_trip(
        raw in (1usize..6).prop_flat_map(|d| prop::collection::vec(unit_strategy(d), 1..20)),
        keyed in any::<bool>(),
    ) {
        let units: Vec<_> = raw
            .into_iter()
            .enumerate()
            .map(|(i, (y, w, r))| (i.to_string(), y, w, r))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        write_inputs(dir.path(), &units, keyed);
        let ds = ingest(dir.path()).unwrap();
        check_same(&ds, &units);
        let native = dir.path().join("native.jsonl");
        save_dataset(&ds, &native).unwrap();
        prop_assert_eq!(load_dataset(&native).unwrap(), ds.clone());

        let rebuilt: Vec<Trajectory> = ds
            .units()
            .iter()
            .map(|u| Trajectory::new(u.y, u.w.clone(), u.embeddings().map(<[f64]>::to_vec).collect()).unwrap())
            .collect();
        prop_assert_eq!(Dataset::from_units(rebuilt).unwrap(), ds);
    }
}
