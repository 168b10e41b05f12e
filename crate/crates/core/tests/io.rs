mod common;

use devscaffold::dataset;
use devscaffold::gridcore::Tensor;
use devscaffold::harness::{export_csv, export_png, read_csv, records_to_csv, MetricsRecord};
use proptest::prelude::*;

#[test]
fn suite_fixture_loads_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let rendered = dataset::render_suite(&dataset::default_suite(64).unwrap()).unwrap();
    assert_eq!(rendered.len(), 20);
    for (name, t) in &rendered {
        export_png(t, &dir.path().join(format!("{name}.png"))).unwrap();
    }
    let loaded = dataset::load_targets(dir.path()).unwrap();
    let mut names: Vec<&str> = rendered.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    assert_eq!(loaded.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), names);
    for (name, t) in &loaded {
        let original = &rendered.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(t.shape(), [64, 64, 4]);
        assert!(t.max_abs_diff(original) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn png_bytes_are_stable_and_clamped() {
    let t = common::uniform(&mut common::rng(3), &[5, 7, 6], -0.5, 1.5);
    let a = dataset::encode_png(&t).unwrap();
    assert_eq!(a, dataset::encode_png(&t.clone()).unwrap());
    let back = dataset::decode_png(&a).unwrap();
    assert_eq!(back.shape(), [5, 7, 4]);
    assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn unwritable_png_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = export_png(&Tensor::zeros(&[2, 2, 4]), &blocker.join("a.png")).unwrap_err();
    assert!(matches!(err, devscaffold::Error::Io { .. }), "{err:?}");
}

#[test]
fn csv_row_count_is_the_product_of_the_grid() {
    let (seeds, conditions, targets, metrics) = (3, 4, 2, 5);
    let mut rows = Vec::new();
    for s in 0..seeds {
        for c in 0..conditions {
            for t in 0..targets {
                for m in 0..metrics {
                    rows.push(MetricsRecord {
                        protocol: "robustness".into(),
                        model: "prepattern".into(),
                        seed: s,
                        condition: format!("p_eval={}", c as f64 / 4.0),
                        target: format!("t{t}"),
                        metric: format!("m{m}"),
                        value: (s * 100 + c * 10 + t) as f64 / 7.0,
                    });
                }
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    export_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + (seeds * conditions * targets * metrics) as usize);
    assert_eq!(read_csv(&path).unwrap(), rows);
    assert_eq!(std::fs::read(&path).unwrap(), records_to_csv(&rows).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn png_round_trip_within_one_level(
        (h, w, data) in (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0.0f64..=1.0, h * w * 4))
        })
    ) {
        let t = Tensor::new(&[h, w, 4], data).unwrap();
        let back = dataset::decode_png(&dataset::encode_png(&t).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&t) <= 1.0 / 255.0);
    }

    #[test]
    fn csv_values_round_trip_exactly(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let r = MetricsRecord {
            protocol: "capacity".into(),
            model: "goalnca".into(),
            seed: 1,
            condition: "patterns=2".into(),
            target: "all".into(),
            metric: "mse_mean".into(),
            value: v,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        export_csv(std::slice::from_ref(&r), &p).unwrap();
        prop_assert_eq!(read_csv(&p).unwrap()[0].value.to_bits(), v.to_bits());
    }
}
