use agridistill::evaluate::{aggregate, BenchmarkResult, CellOutcome, CellRecord, ResultStore};
use proptest::prelude::*;

fn result(method: &str, target: &str, seed: u64, iou: f64) -> BenchmarkResult {
    BenchmarkResult { method: method.into(), target_domain: target.into(), seed, iou }
}

#[test]
fn store_round_trip_and_listing() {
    let dir = tempfile::tempdir().unwrap();
    let store = ResultStore::new(dir.path());
    let ok = CellRecord {
        method: "erm".into(),
        target_domain: "Chard".into(),
        seed: 3,
        sources: vec!["Lettuce".into()],
        outcome: CellOutcome::Ok { iou: 0.25 },
    };
    let failed = CellRecord { seed: 4, outcome: CellOutcome::Failed { error: "diverged".into() }, ..ok.clone() };
    store.put(&ok).unwrap();
    store.put(&failed).unwrap();
    assert!(store.cell_path("erm", "Chard", 3).ends_with("erm/Chard/3.json"));
    assert_eq!(store.get("erm", "Chard", 3).unwrap(), Some(ok.clone()));
    assert_eq!(store.get("erm", "Chard", 9).unwrap(), None);
    assert_eq!(store.all().unwrap().len(), 2);
    assert_eq!(ok.result(), Some(result("erm", "Chard", 3, 0.25)));
    assert_eq!(failed.result(), None);
}

#[test]
fn table_highlights_best_and_second() {
    let results = [
        result("erm", "A", 0, 0.5),
        result("erm", "B", 0, 0.9),
        result("kd", "A", 0, 0.7),
        result("kd", "B", 0, 0.6),
        result("ibn", "A", 0, 0.6),
        result("ibn", "B", 0, 0.3),
    ];
    let table = aggregate(&results).unwrap();
    let md = table.to_markdown();
    assert!(md.contains("**70.00"), "{md}");
    assert!(md.contains("<u>60.00"), "{md}");
    assert!(md.contains("**90.00"), "{md}");
    assert_eq!(table.warnings().len(), 6);
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 1 + 6 + 3);
    assert!(csv.contains("erm,A,50.00,0.00,1\n"), "{csv}");
    assert!(csv.contains("kd,Average,65.00,,\n"), "{csv}");
}

#[test]
fn single_seed_reports_zero_spread() {
    let table = aggregate(&[result("erm", "A", 0, 0.42)]).unwrap();
    let cell = table.cell("erm", "A").unwrap();
    assert_eq!((cell.mean, cell.std, cell.n), (0.42, 0.0, 1));
    assert!(table.warnings()[0].contains("single seed"));
    assert!(aggregate(&[]).is_err());
}

proptest! {
    #[test]
    fn aggregation_ignores_result_order(
        values in prop::collection::vec(0.0f64..1.0, 2..30),
        rotate in 0usize..30,
    ) {
        let results: Vec<BenchmarkResult> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| result(["a", "b"][i % 2], ["x", "y", "z"][i % 3], i as u64, v))
            .collect();
        let mut shuffled = results.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(aggregate(&results).unwrap(), aggregate(&shuffled).unwrap());
    }

    #[test]
    fn cell_means_match_a_direct_sum(values in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let results: Vec<BenchmarkResult> = values.iter().enumerate().map(|(i, &v)| result("m", "t", i as u64, v)).collect();
        let table = aggregate(&results).unwrap();
        let cell = table.cell("m", "t").unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((cell.mean - mean).abs() < 1e-12);
        if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
            prop_assert!((cell.std - var.sqrt()).abs() < 1e-12);
        }
    }
}
