use proptest::prelude::*;

use motionbev::geometry::{partition_with, GridConfig, GridIndex, MosClass, PoseSE3};
use motionbev::ingest::{read_label_words, read_scan, write_labels, write_scan};
use motionbev::netcore::{ring_conv2d, softmax, Tensor};
use motionbev::objective::{accumulate, lovasz_softmax, ConfusionCounts};
use motionbev::par::Exec;
use motionbev::{Point, PointCloud};

fn point() -> impl Strategy<Value = Point> {
    (-60.0..60.0f64, -60.0..60.0f64, -5.0..3.0f64).prop_map(|(x, y, z)| Point::new(x, y, z))
}

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), 0..max).prop_map(|p| PointCloud::new(p, 0))
}

fn grid() -> impl Strategy<Value = GridConfig> {
    (1usize..40, 1usize..40, 0.0..5.0f64, 10.0..70.0f64).prop_map(|(h, w, lo, hi)| GridConfig {
        angular_bins: h,
        radial_bins: w,
        rho_min: lo,
        rho_max: hi,
        ..GridConfig::default()
    })
}

fn tensor(shape: [usize; 3]) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, shape.iter().product::<usize>())
        .prop_map(move |d| Tensor::from_vec(&shape, d).unwrap())
}

fn mos(moving: bool) -> MosClass {
    if moving {
        MosClass::Moving
    } else {
        MosClass::Static
    }
}

proptest! {
    #[test]
    fn partition_is_a_disjoint_cover(c in cloud(400), cfg in grid()) {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let part = partition_with(&c, &cfg, exec);
            let mut seen = vec![0u32; c.len()];
            for v in 0..cfg.angular_bins {
                for u in 0..cfg.radial_bins {
                    let g = GridIndex { u, v };
                    for &i in part.cell(g) {
                        seen[i as usize] += 1;
                        prop_assert_eq!(part.assignment()[i as usize], Some(g));
                    }
                }
            }
            for (i, a) in part.assignment().iter().enumerate() {
                prop_assert_eq!(seen[i], u32::from(a.is_some()));
            }
            prop_assert_eq!(part.in_range_count() + part.out_of_range().count(), c.len());
        }
    }

    #[test]
    fn poses_are_rigid(a in point(), b in point(), x in -100.0..100.0f64, y in -100.0..100.0f64,
                       z in -5.0..5.0f64, yaw in -7.0..7.0f64) {
        let t = PoseSE3::planar(x, y, z, yaw);
        let d = |p: &Point, q: &Point| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
        prop_assert!((d(&t.apply(&a), &t.apply(&b)) - d(&a, &b)).abs() < 1e-9);
        let back = t.inverse().apply(&t.apply(&a));
        prop_assert!(d(&back, &a) < 1e-9);
        prop_assert!(t.compose(&t.inverse()).orthonormality_error() < 1e-12);
    }

    #[test]
    fn ring_conv_commutes_with_angular_shift(x in tensor([2, 7, 5]), w in tensor([3, 2, 9]), s in 0usize..7) {
        let weight = Tensor::from_vec(&[3, 2, 3, 3], w.into_data()).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let shifted_in = ring_conv2d(&x.roll_rows(s).unwrap(), &weight, &bias).unwrap();
        let shifted_out = ring_conv2d(&x, &weight, &bias).unwrap().roll_rows(s).unwrap();
        for (a, b) in shifted_in.data().iter().zip(shifted_out.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scans_and_labels_round_trip(raw in prop::collection::vec((any::<i16>(), any::<i16>(), any::<i16>(), 0.0..1.0f32, any::<u32>()), 0..200)) {
        let dir = tempfile::tempdir().unwrap();
        let points: Vec<Point> = raw
            .iter()
            .map(|&(x, y, z, i, _)| Point {
                intensity: Some(i),
                ..Point::new(f64::from(x) / 64.0, f64::from(y) / 64.0, f64::from(z) / 64.0)
            })
            .collect();
        let labels: Vec<u32> = raw.iter().map(|r| r.4).collect();
        let scan = dir.path().join("000042.bin");
        write_scan(&PointCloud::new(points.clone(), 42), &scan).unwrap();
        let back = read_scan(&scan).unwrap();
        prop_assert_eq!(back.frame_index, 42);
        prop_assert_eq!(back.points, points);
        let label_path = dir.path().join("000042.label");
        write_labels(&labels, &label_path).unwrap();
        prop_assert_eq!(read_label_words(&label_path).unwrap(), labels);
    }

    #[test]
    fn confusion_counts_add_over_splits(
        pairs in prop::collection::vec((any::<bool>(), prop::option::of(any::<bool>())), 0..300),
        cut in 0.0..1.0f64,
    ) {
        let pred: Vec<MosClass> = pairs.iter().map(|p| mos(p.0)).collect();
        let gt: Vec<Option<MosClass>> = pairs.iter().map(|p| p.1.map(mos)).collect();
        let k = (cut * pairs.len() as f64) as usize;
        let mut whole = ConfusionCounts::default();
        accumulate(&mut whole, &pred, &gt).unwrap();
        let (mut a, mut b) = (ConfusionCounts::default(), ConfusionCounts::default());
        accumulate(&mut a, &pred[..k], &gt[..k]).unwrap();
        accumulate(&mut b, &pred[k..], &gt[k..]).unwrap();
        prop_assert_eq!(a + b, whole);
        prop_assert_eq!(whole.total() as usize, gt.iter().filter(|g| g.is_some()).count());
        prop_assert!((0.0..=1.0).contains(&whole.iou()));
    }

    #[test]
    fn lovasz_ignores_pixel_order((logits, labels, order) in (1usize..40).prop_flat_map(|n| (
        prop::collection::vec(prop::collection::vec(-4.0..4.0f64, 3), n),
        prop::collection::vec(prop::option::of(0usize..3), n),
        Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
    ))) {
        let n = logits.len();
        let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
        let layout = |idx: &[usize]| Tensor::from_fn(&[3, n], |k| probs[idx[k % n]][k / n]);
        let identity: Vec<usize> = (0..n).collect();
        let permuted_labels: Vec<Option<usize>> = order.iter().map(|&i| labels[i]).collect();
        let (l0, _) = lovasz_softmax(&layout(&identity), &labels).unwrap();
        let (l1, _) = lovasz_softmax(&layout(&order), &permuted_labels).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-12, "{} vs {}", l0, l1);
    }
}
