//! Property-based checks over randomly generated inputs.

use std::collections::BTreeSet;

use grable::constructors;
use grable::gml;
use grable::metrics;
use grable::table::{self, Row, Schema, Table, Value};
use grable::tasks::{self, CountMode, TaskKind};

use proptest::prelude::*;

fn text_table(cells: Vec<Vec<u8>>) -> Table {
    let n_cols = cells[0].len();
    let schema = Schema::new((0..n_cols).map(|i| format!("c{i}"))).unwrap();
    let rows = cells
        .into_iter()
        .map(|r| Row::new(r.into_iter().map(|v| Value::Text(format!("v{v}"))).collect()))
        .collect();
    Table::new(schema, rows).unwrap()
}

fn arb_table() -> impl Strategy<Value = Table> {
    (1usize..4).prop_flat_map(|n_cols| {
        prop::collection::vec(prop::collection::vec(0u8..6, n_cols..=n_cols), 1..25)
            .prop_map(text_table)
    })
}

proptest! {
    #[test]
    fn random_split_partitions_rows(table in arb_table(), seed in any::<u64>()) {
        let (a, b, c) = table::split_random(&table, (0.6, 0.2, 0.2), seed).unwrap();
        prop_assert_eq!(a.n_rows() + b.n_rows() + c.n_rows(), table.n_rows());
        let mut seen: Vec<Vec<Value>> = Vec::new();
        for part in [&a, &b, &c] {
            for i in 0..part.n_rows() {
                seen.push(
                    part.schema()
                        .columns()
                        .iter()
                        .map(|col| part.value(i, col).unwrap().clone())
                        .collect(),
                );
            }
        }
        let mut original: Vec<Vec<Value>> = (0..table.n_rows())
            .map(|i| {
                table
                    .schema()
                    .columns()
                    .iter()
                    .map(|col| table.value(i, col).unwrap().clone())
                    .collect()
            })
            .collect();
        seen.sort();
        original.sort();
        prop_assert_eq!(seen, original);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(
        scores in prop::collection::vec(-10.0f64..10.0, 2..30),
        flips in prop::collection::vec(any::<bool>(), 2..30),
    ) {
        let n = scores.len().min(flips.len());
        let scores = &scores[..n];
        let mut labels: Vec<u8> = flips[..n].iter().map(|&b| u8::from(b)).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        let base = metrics::roc_auc(scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|&s| (s / 3.0).exp() + 2.0 * s).collect();
        let after = metrics::roc_auc(&warped, &labels).unwrap();
        prop_assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn formula_display_round_trips(seed in any::<u64>()) {
        // drive a tiny deterministic formula generator from the seed
        fn build(state: &mut u64, depth: usize) -> gml::Formula {
            *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let choice = (*state >> 33) % if depth == 0 { 1 } else { 5 };
            match choice {
                0 => gml::Formula::atom(["Row", "Val", "Pair"][(*state >> 7) as usize % 3]),
                1 => gml::Formula::not(build(state, depth - 1)),
                2 => gml::Formula::and(build(state, depth - 1), build(state, depth - 1)),
                3 => gml::Formula::or(build(state, depth - 1), build(state, depth - 1)),
                _ => gml::Formula::diamond(
                    ["E_c0", "E_c1"][(*state >> 9) as usize % 2],
                    1 + (*state >> 11) as usize % 3,
                    build(state, depth - 1),
                ),
            }
        }
        let mut state = seed;
        let formula = build(&mut state, 3);
        let printed = formula.to_string();
        let reparsed = gml::parse(&printed).unwrap();
        prop_assert_eq!(reparsed, formula);
    }

    #[test]
    fn incidence_degree_equals_value_frequency(table in arb_table()) {
        let g = constructors::build_incidence(&table, &BTreeSet::new()).unwrap();
        let column = table.schema().columns()[0].clone();
        let labels = tasks::label(&table, &TaskKind::Unique { column: column.clone() }).unwrap();
        let adjacency = g.adjacency();
        let rel = &adjacency[&format!("E_{column}")];
        for (i, &v) in g.row_map.iter().enumerate() {
            // a row is unique iff its value node through this column has
            // degree one
            let value_node = rel[v][0];
            prop_assert_eq!(labels[i] == 1, rel[value_node].len() == 1);
        }
    }

    #[test]
    fn count_gt_labels_are_monotone_in_k(table in arb_table()) {
        let column = table.schema().columns()[0].clone();
        let mut previous: Option<Vec<u8>> = None;
        for k in 1..5usize {
            let labels =
                tasks::label_count(&table, &column, k, CountMode::Gt).unwrap();
            if let Some(prev) = &previous {
                for (l, p) in labels.iter().zip(prev) {
                    prop_assert!(l <= p, "gt labels must shrink as k grows");
                }
            }
            previous = Some(labels);
        }
    }
}
