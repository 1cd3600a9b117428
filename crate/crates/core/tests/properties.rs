use medfuse::augment::{draw_params, AugmentSpec};
use medfuse::features::{decode_fmx, encode_fmx, fuse, read_fmx, write_fmx, FeatureMatrix};
use medfuse::metadata::{encode_record, ColumnKind, ColumnSpec, MetaValue, MetadataRecord, MetadataSchema};
use medfuse::metrics::{auroc, class_metrics, confusion, BinaryCounts};
use medfuse::scalogram::{cwt_coefficients, WaveletSpec};
use medfuse::splits::{apportion, stratified_split, DatasetIndex, Subset};
use ndarray::Array2;
use proptest::prelude::*;

fn columns() -> Vec<ColumnSpec> {
    vec![
        ColumnSpec { name: "age".into(), kind: ColumnKind::Numeric },
        ColumnSpec { name: "site".into(), kind: ColumnKind::Categorical },
        ColumnSpec { name: "taken".into(), kind: ColumnKind::Datetime },
    ]
}

/// age, site index, (year, month, day); `None` is a missing value.
type RawRow = (Option<f64>, Option<usize>, Option<(u32, u32, u32)>);

fn meta_value() -> impl Strategy<Value = RawRow> {
    (
        proptest::option::of(-1e6f64..1e6),
        proptest::option::of(0usize..4),
        proptest::option::of((1950u32..2030, 1u32..13, 1u32..29)),
    )
}

fn record(i: usize, (age, site, taken): &RawRow) -> MetadataRecord {
    let sites = ["arm", "back", "face", "leg"];
    MetadataRecord::new(
        format!("r{i}"),
        [
            ("age", age.map_or(MetaValue::Missing, MetaValue::Number)),
            ("site", site.map_or(MetaValue::Missing, |s| MetaValue::Text(sites[s].into()))),
            (
                "taken",
                taken.map_or(MetaValue::Missing, |(y, m, d)| {
                    MetaValue::Text(format!("{y:04}-{m:02}-{d:02} 10:20:30"))
                }),
            ),
        ],
    )
}

fn matrix(n: usize, d: usize, seed: u64, prefix: &str) -> FeatureMatrix {
    let data = Array2::from_shape_fn((n, d), |(i, j)| ((i * 131 + j * 17 + seed as usize) % 257) as f32 / 7.0 - 9.0);
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    FeatureMatrix::new(data, ids, None, "test").unwrap()
}

proptest! {
    #[test]
    fn metadata_width_is_fixed_and_missing_is_minus_one(values in proptest::collection::vec(meta_value(), 1..30)) {
        let records: Vec<_> = values.iter().enumerate().map(|(i, v)| record(i, v)).collect();
        let schema = MetadataSchema::build(&records, &columns()).unwrap();
        for (rec, (age, site, taken)) in records.iter().zip(&values) {
            let v = encode_record(rec, &schema).unwrap().vector;
            prop_assert_eq!(v.len(), schema.width());
            prop_assert_eq!(v[0], age.unwrap_or(-1.0));
            if site.is_none() {
                prop_assert_eq!(v[1], -1.0);
            } else {
                prop_assert!(v[1] >= 0.0 && v[1] < 4.0);
            }
            match taken {
                None => prop_assert!(v[2..].iter().all(|&x| x == -1.0)),
                Some((y, m, d)) => prop_assert_eq!(&v[2..], &[*y as f64, *m as f64, *d as f64, 10.0, 20.0, 30.0][..]),
            }
        }
    }

    #[test]
    fn category_indices_are_dense_from_zero(sites in proptest::collection::vec(0usize..4, 1..40)) {
        let values: Vec<_> = sites.iter().map(|&s| (Some(1.0), Some(s), None)).collect();
        let records: Vec<_> = values.iter().enumerate().map(|(i, v)| record(i, v)).collect();
        let schema = MetadataSchema::build(&records, &columns()).unwrap();
        let mut idx: Vec<usize> = schema.category_index("site").unwrap().values().copied().collect();
        idx.sort_unstable();
        let dense: Vec<usize> = (0..idx.len()).collect();
        prop_assert_eq!(idx, dense);
    }

    #[test]
    fn fmx_round_trip(n in 0usize..20, d in 0usize..12, seed in any::<u64>()) {
        let m = matrix(n, d, seed % 1000, "s");
        let bytes = encode_fmx(&m).unwrap();
        prop_assert_eq!(bytes.len(), 12 + 4 * n * d);
        prop_assert_eq!(decode_fmx(&bytes, "x.fmx".as_ref()).unwrap(), m.data.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fmx");
        write_fmx(&m, &path).unwrap();
        prop_assert_eq!(read_fmx(&path).unwrap(), m);
    }

    #[test]
    fn fmx_rejects_truncation(n in 1usize..10, d in 1usize..10, cut in 1usize..40) {
        let bytes = encode_fmx(&matrix(n, d, 0, "s")).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_fmx(&bytes[..keep], "x.fmx".as_ref()).is_err());
    }

    #[test]
    fn fused_blocks_slice_back_to_inputs(n in 1usize..15, d in 1usize..8, q in 1usize..6, rot in 0usize..15) {
        let image = matrix(n, d, 1, "s");
        let mut meta = matrix(n, q, 2, "s");
        // shuffle metadata rows; fusion aligns by id
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        meta = meta.select_rows(&order);
        let fused = fuse(&image, &meta).unwrap();
        prop_assert_eq!(fused.split_point(), d);
        prop_assert_eq!(fused.matrix().ncols(), d + q);
        prop_assert_eq!(fused.image_block(), image.data.view());
        let expected = matrix(n, q, 2, "s");
        prop_assert_eq!(fused.metadata_block(), expected.data.view());
    }

    #[test]
    fn class_metrics_stay_in_range(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let m = class_metrics::<f64>(&BinaryCounts { tp, fp, fn_, tn });
        for (i, v) in m.values().iter().enumerate() {
            prop_assert!(v.is_finite());
            let lo = if i >= 5 { -1.0 } else { 0.0 };
            prop_assert!(*v >= lo - 1e-12 && *v <= 1.0 + 1e-12, "metric {} = {}", i, v);
        }
    }

    #[test]
    fn confusion_counts_partition_samples(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let c = confusion(&t, &p, 4).unwrap();
        for b in &c.per_class {
            prop_assert_eq!(b.total(), pairs.len() as u64);
        }
        prop_assert_eq!(c.per_class.iter().map(|b| b.tp).sum::<u64>(), c.correct);
    }

    #[test]
    fn auroc_is_invariant_under_monotone_maps(
        data in proptest::collection::vec((any::<bool>(), -50i32..50), 2..60)
    ) {
        let labels: Vec<bool> = data.iter().map(|d| d.0).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let s: Vec<f64> = data.iter().map(|d| d.1 as f64).collect();
        let a = auroc(&labels, &s).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let mapped: Vec<f64> = s.iter().map(|v| (v / 10.0).exp() + 3.0).collect();
        prop_assert!((auroc(&labels, &mapped).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&labels, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn apportion_is_exact(n in 0usize..10_000, a in 1u32..100, b in 1u32..100, c in 1u32..100) {
        let s = f64::from(a + b + c);
        let f = [f64::from(a) / s, f64::from(b) / s, f64::from(c) / s];
        let counts = apportion(n, f, [0, 1, 2]);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (k, frac) in counts.iter().zip(f) {
            prop_assert!((*k as f64 - frac * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn split_is_a_stratified_partition(sizes in proptest::collection::vec(1usize..60, 1..6), seed in any::<u64>()) {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                ids.push(format!("c{c}-{i}"));
                labels.push(format!("c{c}"));
            }
        }
        let index = DatasetIndex::new(ids, labels).unwrap();
        let (split, summary) = stratified_split(&index, [0.7, 0.15, 0.15], seed).unwrap();
        let mut all: Vec<usize> = Subset::ALL.iter().flat_map(|&s| split.indices(s)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..index.len()).collect::<Vec<_>>());
        for (c, &n) in sizes.iter().enumerate() {
            let counts = summary.per_class[&format!("c{c}")];
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            if n > 1 {
                for (k, f) in counts.iter().zip([0.7, 0.15, 0.15]) {
                    prop_assert!((*k as f64 - f * n as f64).abs() < 1.0 + 1e-9);
                }
            }
        }
        let (again, _) = stratified_split(&index, [0.7, 0.15, 0.15], seed).unwrap();
        prop_assert_eq!(again, split);
    }

    #[test]
    fn cwt_is_linear(
        a in proptest::collection::vec(-5.0f64..5.0, 40),
        b in proptest::collection::vec(-5.0f64..5.0, 40),
        alpha in -3.0f64..3.0,
    ) {
        let spec = WaveletSpec::default();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let ca = cwt_coefficients(&a, &spec).unwrap().coefficients;
        let cb = cwt_coefficients(&b, &spec).unwrap().coefficients;
        let cm = cwt_coefficients(&mix, &spec).unwrap().coefficients;
        let scale = cm.iter().map(|z| z.norm()).fold(1.0, f64::max);
        for ((m, x), y) in cm.iter().zip(&ca).zip(&cb) {
            prop_assert!((m - (x * alpha + y)).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn cwt_commutes_with_circular_shift(
        s in proptest::collection::vec(-5.0f64..5.0, 64),
        shift in 0usize..64,
    ) {
        let spec = WaveletSpec::default();
        let shifted: Vec<f64> = (0..64).map(|t| s[(t + 64 - shift) % 64]).collect();
        let c = cwt_coefficients(&s, &spec).unwrap().coefficients;
        let cs = cwt_coefficients(&shifted, &spec).unwrap().coefficients;
        let scale = c.iter().map(|z| z.norm()).fold(1.0, f64::max);
        for row in 0..c.nrows() {
            for t in 0..64 {
                prop_assert!((cs[[row, t]] - c[[row, (t + 64 - shift) % 64]]).norm() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn augment_draws_respect_bounds(
        max_shift in 0u32..50,
        max_rot in 0.0f64..360.0,
        rx in any::<bool>(),
        ry in any::<bool>(),
        seed in any::<u64>(),
        draw in any::<u64>(),
    ) {
        let spec = AugmentSpec {
            max_shift_px: max_shift,
            allow_reflect_x: rx,
            allow_reflect_y: ry,
            max_rotate_deg: max_rot,
            seed,
        };
        let p = draw_params(&spec, draw);
        prop_assert!(p.dx.unsigned_abs() <= u64::from(max_shift));
        prop_assert!(p.dy.unsigned_abs() <= u64::from(max_shift));
        prop_assert!(p.angle_deg.abs() <= max_rot);
        prop_assert!(rx || !p.reflect_x);
        prop_assert!(ry || !p.reflect_y);
        prop_assert_eq!(draw_params(&spec, draw), p);
    }
}
