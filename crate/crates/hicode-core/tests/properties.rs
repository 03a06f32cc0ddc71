//! Property tests over the numeric and structural invariants.

use hicode_core::cograph;
use hicode_core::hierarchy::{normalize_code, CodeId, Hierarchy};
use hicode_core::metrics::{self, Mode};
use hicode_core::tensor::Tape;
use proptest::collection::vec;
use proptest::prelude::*;
use std::collections::BTreeSet;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..8,
        values in vec(-30.0f64..30.0, 40),
        shift in -50.0f64..50.0,
    ) {
        let data: Vec<f64> = values.iter().cycle().take(rows * cols).copied().collect();
        let mut tape = Tape::new();
        let x = tape.constant(rows, cols, data.clone());
        let s = tape.softmax_rows(x);
        for row in tape.value(s).chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        // Shift invariance.
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let xs = tape.constant(rows, cols, shifted);
        let ss = tape.softmax_rows(xs);
        for (a, b) in tape.value(s).to_vec().iter().zip(tape.value(ss)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_same_length_for_odd_widths(
        n in 1usize..40,
        half_width in 0usize..6,
        d_in in 1usize..4,
        d_out in 1usize..4,
    ) {
        let width = 2 * half_width + 1;
        let mut tape = Tape::new();
        let x = tape.constant(n, d_in, vec![0.3; n * d_in]);
        let w = tape.constant(width * d_in, d_out, vec![0.1; width * d_in * d_out]);
        let out = tape.conv1d_same(x, w, width).unwrap();
        prop_assert_eq!(tape.shape(out), (n, d_out));
    }

    #[test]
    fn expansion_counts_never_decrease_with_depth(
        stems in vec(100u32..999, 1..8),
        decs in vec(0u32..100, 8),
        pick in vec(proptest::bool::ANY, 8),
    ) {
        let finest: BTreeSet<CodeId> = stems
            .iter()
            .zip(&decs)
            .map(|(s, d)| normalize_code(&format!("{s:03}.{:02}", d), None).unwrap())
            .collect();
        let h = Hierarchy::build(&finest, 3, None).unwrap();
        let gold: BTreeSet<CodeId> = finest
            .iter()
            .zip(pick.iter().cycle())
            .filter(|(_, &keep)| keep)
            .map(|(c, _)| c.clone())
            .collect();
        let expanded = h.expand_labels(&gold).unwrap();
        for w in expanded.windows(2) {
            prop_assert!(w[0].len() <= w[1].len());
        }
        // Exactly the ancestors: every level-t label is a truncation of some
        // gold code at the finer level.
        for (t, set) in expanded.iter().enumerate().take(2) {
            for c in set {
                let has_child = expanded[t + 1]
                    .iter()
                    .any(|child| h.parent(t + 2, child) == Some(c));
                prop_assert!(has_child);
            }
        }
    }

    #[test]
    fn cograph_rows_normalize_and_propagation_is_doubly_bounded(
        memberships in vec(vec(proptest::bool::ANY, 4), 3..20),
    ) {
        let names = ["401.01", "402.01", "403.01", "404.01"];
        let finest: BTreeSet<CodeId> =
            names.iter().map(|c| normalize_code(c, None).unwrap()).collect();
        let h = Hierarchy::build(&finest, 3, None).unwrap();
        let records: Vec<hicode_core::corpus::Record> = memberships
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut gold: BTreeSet<CodeId> = names
                    .iter()
                    .zip(m)
                    .filter(|(_, &keep)| keep)
                    .map(|(c, _)| normalize_code(c, None).unwrap())
                    .collect();
                if gold.is_empty() {
                    gold.insert(normalize_code(names[i % 4], None).unwrap());
                }
                hicode_core::corpus::Record { id: format!("r{i}"), tokens: vec![1], gold }
            })
            .collect();
        let g = cograph::build_cograph(&records, &h, 3, cograph::SymMode::Avg).unwrap();
        let k = g.node_count();
        for i in 0..k {
            let row: f64 = g.weights[i * k..(i + 1) * k].iter().sum();
            prop_assert!(row == 0.0 || (row - 1.0).abs() < 1e-9);
            for j in 0..k {
                let p = g.propagation[i * k + j];
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!((p - g.propagation[j * k + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn precision_at_k_invariant_under_monotone_transform(
        raw_scores in vec(vec(0u8..40, 6), 1..6),
        raw_gold in vec(vec(proptest::bool::ANY, 6), 6),
        k in 1usize..6,
    ) {
        let scores: Vec<Vec<f64>> = raw_scores
            .iter()
            .map(|row| row.iter().map(|&v| v as f64 / 40.0).collect())
            .collect();
        let gold: Vec<Vec<bool>> =
            raw_gold.iter().take(scores.len()).cloned().collect();
        let transformed: Vec<Vec<f64>> = scores
            .iter()
            .map(|row| row.iter().map(|&s| (s * 2.0 + 0.5).exp()).collect())
            .collect();
        let (a, _) = metrics::precision_at_k(&scores, &gold, k).unwrap();
        let (b, _) = metrics::precision_at_k(&transformed, &gold, k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn code_normalization_round_trips(
        stem in 100u32..999,
        dec in proptest::option::of(0u32..100),
    ) {
        let raw = match dec {
            Some(d) => format!("{stem}{d:02}"),
            None => format!("{stem}"),
        };
        let code = normalize_code(&raw, None).unwrap();
        let again = normalize_code(&code.render(), Some(code.kind())).unwrap();
        prop_assert_eq!(code, again);
    }
}
