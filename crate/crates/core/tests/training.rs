use mna_core::tensor::Tensor;
use mna_core::train::checkpoint::{decode_entries, encode_entries, MAGIC};
use mna_core::train::{
    format_report, parse_report, run_epochs, ConfusionCounts, Evaluation, SubjectResult,
};
use proptest::prelude::*;
use std::path::Path;

#[test]
fn constant_loss_stops_after_patience() {
    let (run, best, loss) = run_epochs(1000, 20, 1e-6, |_| Ok(1.25), |_| {}).unwrap();
    assert_eq!((run, best, loss), (21, 1, 1.25));
}

#[test]
fn steadily_improving_loss_runs_to_the_cap() {
    let mut improved = 0;
    let (run, best, _) = run_epochs(50, 5, 1e-6, |e| Ok(1.0 / e as f64), |_| improved += 1).unwrap();
    assert_eq!((run, best, improved), (50, 50, 50));
}

#[test]
fn diverging_loss_is_an_error() {
    assert!(run_epochs(10, 3, 0.0, |e| Ok(if e == 2 { f64::NAN } else { 1.0 }), |_| {}).is_err());
}

#[test]
fn checkpoint_layout_is_bit_exact() {
    let t = Tensor::new(vec![2], vec![1.5f32, -0.25]).unwrap();
    let bytes = encode_entries(&[("w".to_string(), t)]).unwrap();
    let mut expected = MAGIC.to_vec();
    expected.extend_from_slice(&1u32.to_le_bytes());
    expected.extend_from_slice(&1u16.to_le_bytes());
    expected.push(b'w');
    expected.push(1);
    expected.extend_from_slice(&2u32.to_le_bytes());
    expected.extend_from_slice(&1.5f32.to_le_bytes());
    expected.extend_from_slice(&(-0.25f32).to_le_bytes());
    assert_eq!(bytes, expected);
    assert!(decode_entries(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let n = values.len();
        let entries = vec![("layer.weight".to_string(), Tensor::new(vec![n], values).unwrap())];
        let back = decode_entries(&encode_entries(&entries).unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].0, &entries[0].0);
        prop_assert_eq!(back[0].1.shape(), entries[0].1.shape());
        prop_assert_eq!(back[0].1.data(), entries[0].1.data());
    }

    #[test]
    fn report_summary_matches_recount(rows in prop::collection::vec((0u8..2, 0.0f32..1.0), 1..40)) {
        let eval = Evaluation {
            variant: "full".into(),
            split: "test".into(),
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(label, probability))| SubjectResult { subject_id: format!("S{i}"), label, probability })
                .collect(),
        };
        let parsed = parse_report(&format_report(&[eval]).unwrap()).unwrap();
        let mut c = ConfusionCounts::default();
        for (_, label, p, pred) in &parsed.rows["full"] {
            prop_assert_eq!(*pred, u8::from(*p >= 0.5));
            c.add(*pred, *label);
        }
        let s = &parsed.summaries["full"];
        for (k, v) in [("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn_)] {
            prop_assert_eq!(s[k].parse::<usize>().unwrap(), v);
        }
        let acc: f64 = s["accuracy"].parse().unwrap();
        prop_assert!((acc - c.accuracy()).abs() < 1e-6);
    }
}
