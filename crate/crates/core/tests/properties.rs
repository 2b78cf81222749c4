use std::collections::BTreeMap;

use finegrain::cem::{compile, enforce, CemConfig, RepairStatus};
use finegrain::constraints::library::queue_constraints;
use finegrain::eval::{detect_bursts, normalize_errors, KnnBaseline};
use finegrain::model::{emd, l_combine};
use finegrain::refine::{l_class, EquivalenceClass};
use finegrain::series::{
    coarsen_values, make_windows, upsample_repeat, CoarsenerKind, CoarsenerSpec, EntrySpec, FineSeries, ValueDomain,
    WindowExample,
};
use proptest::prelude::*;

fn queue_windows(q: &[f64], sent: &[f64], zoom: usize, ctx: usize) -> Vec<WindowExample> {
    let channels = BTreeMap::from([
        ("qlen".to_string(), FineSeries::new("qlen", q.to_vec(), 1.0, ValueDomain::NonnegInt).unwrap()),
        ("sent".to_string(), FineSeries::new("sent", sent.to_vec(), 1.0, ValueDomain::NonnegInt).unwrap()),
    ]);
    let specs = vec![
        EntrySpec::new("qlen", CoarsenerSpec::new(CoarsenerKind::Max, zoom).unwrap()),
        EntrySpec::new("qlen", CoarsenerSpec::periodic(zoom, 0).unwrap()),
        EntrySpec::new("sent", CoarsenerSpec::new(CoarsenerKind::Sum, zoom).unwrap()),
    ];
    make_windows(&channels, &specs, "qlen", ctx, ctx * zoom).unwrap()
}

fn ints(len: usize, hi: u32) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0..=hi).prop_map(f64::from), len)
}

proptest! {
    #[test]
    fn upsampled_coarse_values_coarsen_back(coarse in prop::collection::vec(0.0..100.0f64, 1..8), zoom in 2usize..6) {
        let fine = upsample_repeat(&coarse, zoom);
        for (kind, factor) in [(CoarsenerKind::Max, 1.0), (CoarsenerKind::Min, 1.0), (CoarsenerKind::Mean, 1.0), (CoarsenerKind::Sum, zoom as f64)] {
            let spec = CoarsenerSpec::new(kind, zoom).unwrap();
            let back = coarsen_values(&fine, &spec, ValueDomain::NonnegReal).unwrap();
            for (b, c) in back.iter().zip(&coarse) {
                prop_assert!((b - c * factor).abs() <= 1e-9 * (1.0 + c * factor));
            }
        }
        let spec = CoarsenerSpec::periodic(zoom, zoom - 1).unwrap();
        prop_assert_eq!(coarsen_values(&fine, &spec, ValueDomain::NonnegReal).unwrap(), coarse);
    }

    #[test]
    fn emd_ignores_time_order(a in prop::collection::vec(0.0..50.0f64, 2..40), seed in any::<u64>()) {
        let mut b = a.clone();
        // deterministic shuffle driven by the seed
        let mut s = seed;
        for i in (1..b.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            b.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(emd(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn emd_is_a_metric(
        v in prop::collection::vec((0.0..10.0f64, 0.0..10.0f64, 0.0..10.0f64), 1..30),
    ) {
        let a: Vec<f64> = v.iter().map(|t| t.0).collect();
        let b: Vec<f64> = v.iter().map(|t| t.1).collect();
        let c: Vec<f64> = v.iter().map(|t| t.2).collect();
        let (ab, bc, ac) = (emd(&a, &b).unwrap(), emd(&b, &c).unwrap(), emd(&a, &c).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - emd(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn normalized_errors_are_bounded_and_monotone(e in prop::collection::vec(0.0..5.0f64, 2..8)) {
        let n = normalize_errors(&e);
        prop_assert!(n.iter().all(|v| (0.1..=0.9).contains(v)));
        for i in 0..e.len() {
            for j in 0..e.len() {
                if e[i] < e[j] {
                    prop_assert!(n[i] <= n[j]);
                }
            }
        }
    }

    #[test]
    fn class_loss_never_exceeds_member_loss(
        out in prop::collection::vec(0.0..5.0f64, 6),
        targets in prop::collection::vec(prop::collection::vec(0.0..5.0f64, 6), 1..4),
        w in 0.0..2.0f64,
    ) {
        let q = vec![0.0; 6];
        let bundle = queue_windows(&q, &q, 3, 2).remove(0).input;
        let cls = EquivalenceClass {
            members: (0..targets.len()).collect(),
            representative_input: bundle,
            targets: targets.iter().map(|t| FineSeries::new("qlen", t.clone(), 1.0, ValueDomain::NonnegReal).unwrap()).collect(),
        };
        let lc = l_class(&out, &cls, w).unwrap();
        for t in &targets {
            prop_assert!(lc <= l_combine(&out, t, w).unwrap());
        }
    }

    #[test]
    fn bursts_partition_the_high_samples(x in prop::collection::vec(0.0..20.0f64, 1..60), frac in 0.05..0.95f64) {
        let bursts = detect_bursts(&x, frac).unwrap();
        let peak = x.iter().copied().fold(0.0, f64::max);
        let covered: usize = bursts.iter().map(|b| b.duration).sum();
        prop_assert_eq!(covered, x.iter().filter(|&&v| peak > 0.0 && v >= frac * peak).count());
        for w in bursts.windows(2) {
            // maximal runs are separated by at least one low sample
            prop_assert!(w[0].start + w[0].duration < w[1].start);
        }
        for b in &bursts {
            let run = &x[b.start..b.start + b.duration];
            prop_assert_eq!(b.height, run.iter().copied().fold(0.0, f64::max));
        }
    }

    #[test]
    fn knn_with_every_neighbor_is_the_mean(q in ints(24, 9)) {
        let sent = vec![1.0; 24];
        let train = queue_windows(&q, &sent, 4, 2);
        let knn = KnnBaseline::fit(&train).unwrap();
        let got = knn.predict(&train[0].input, train.len()).unwrap();
        for t in 0..got.len() {
            let mean = train.iter().map(|w| w.target.values[t]).sum::<f64>() / train.len() as f64;
            prop_assert!((got.values[t] - mean).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn repair_recoarsens_and_is_idempotent(q in ints(12, 6), noise in ints(12, 6), extra in ints(12, 2)) {
        let sent: Vec<f64> = q.iter().zip(&extra).map(|(v, e)| if *v > 0.0 { 1.0 } else { *e }).collect();
        let w = queue_windows(&q, &sent, 4, 3).remove(0);
        let set = queue_constraints("qlen", "sent").unwrap();
        let guess = FineSeries::new("qlen", noise, 1.0, ValueDomain::NonnegInt).unwrap();
        let cfg = CemConfig::default();
        let first = enforce(&compile(&set, &w.input, &w.scalars, &guess, &cfg).unwrap(), &cfg).unwrap();
        prop_assert_ne!(first.report.status, RepairStatus::Infeasible);
        for e in w.input.entries.iter().filter(|e| e.channel == "qlen") {
            prop_assert_eq!(&coarsen_values(&first.series.values, &e.spec, ValueDomain::NonnegInt).unwrap(), &e.values);
        }
        let again = enforce(&compile(&set, &w.input, &w.scalars, &first.series, &cfg).unwrap(), &cfg).unwrap();
        prop_assert_eq!(again.report.status, RepairStatus::AlreadyFeasible);
        prop_assert_eq!(again.series, first.series);
    }
}
