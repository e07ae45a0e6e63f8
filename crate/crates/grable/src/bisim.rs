//! Counting bisimulation via color refinement, and separation certificates.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::constructors::Grable;
use crate::gml::PredicateSet;
use crate::table::{Row, Schema, Table, Value};

#[derive(Debug, Error)]
pub enum BisimError {
    #[error("node id {0} out of range")]
    BadNode(usize),
}

/// Per-round colors of every node under counting color refinement.
///
/// Round 0 interns `(node type, predicate bits)`; round `r+1` interns the
/// previous color together with, per relation, the sorted multiset of
/// neighbor colors. Color ids are first-seen (node-id order), so equal
/// inputs give byte-equal histories.
pub fn refine(grable: &Grable, predicates: &PredicateSet, rounds: usize) -> Vec<Vec<usize>> {
    let adjacency = grable.adjacency();
    let names = predicates.names();

    let mut intern: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut intern_key = |key: Vec<u8>| -> usize {
        let next = intern.len();
        *intern.entry(key).or_insert(next)
    };

    let initial: Vec<usize> = grable
        .nodes
        .iter()
        .map(|n| {
            let mut key = n.node_type.as_bytes().to_vec();
            for name in &names {
                key.push(predicates.holds(name, n).unwrap_or(false) as u8);
            }
            intern_key(key)
        })
        .collect();

    let mut history = vec![initial];
    for _ in 0..rounds {
        let prev = history.last().expect("non-empty");
        let next: Vec<usize> = (0..grable.nodes.len())
            .map(|v| {
                let mut key = prev[v].to_le_bytes().to_vec();
                for (rel, lists) in &adjacency {
                    let mut multiset: Vec<usize> = lists[v].iter().map(|&u| prev[u]).collect();
                    multiset.sort_unstable();
                    key.extend(rel.as_bytes());
                    key.push(0);
                    for c in multiset {
                        key.extend(c.to_le_bytes());
                    }
                }
                intern_key(key)
            })
            .collect();
        history.push(next);
    }
    history
}

/// Refine until the partition stops changing; returns the stable colors and
/// the number of rounds taken.
pub fn refine_stable(grable: &Grable, predicates: &PredicateSet) -> (Vec<usize>, usize) {
    let n = grable.nodes.len();
    // the partition can strictly refine at most n-1 times
    let history = refine(grable, predicates, n.max(1));
    for r in 1..history.len() {
        if partition_classes(&history[r]) == partition_classes(&history[r - 1]) {
            return (history[r].clone(), r - 1);
        }
    }
    (history.last().expect("non-empty").clone(), n)
}

fn partition_classes(colors: &[usize]) -> usize {
    let mut seen: Vec<usize> = colors.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Disjoint union of two grables; the second one's ids are offset.
pub fn disjoint_union(a: &Grable, b: &Grable) -> Grable {
    let offset = a.nodes.len();
    let mut nodes = a.nodes.clone();
    for node in &b.nodes {
        let mut node = node.clone();
        node.id += offset;
        nodes.push(node);
    }
    let mut edge_relations: BTreeMap<String, Vec<(usize, usize)>> = a.edge_relations.clone();
    for (rel, edges) in &b.edge_relations {
        let shifted = edges.iter().map(|&(x, y)| (x + offset, y + offset));
        edge_relations.entry(rel.clone()).or_default().extend(shifted);
    }
    let mut row_map = a.row_map.clone();
    row_map.extend(b.row_map.iter().map(|&v| v + offset));
    Grable {
        nodes,
        edge_relations,
        row_map,
        provenance: format!("union({},{})", a.provenance, b.provenance),
    }
}

/// Whether two nodes (possibly of different grables) receive the same color
/// after `k` rounds of counting refinement on the disjoint union.
pub fn indistinguishable(
    a: &Grable,
    node_a: usize,
    b: &Grable,
    node_b: usize,
    predicates: &PredicateSet,
    k: usize,
) -> Result<bool, BisimError> {
    if node_a >= a.nodes.len() {
        return Err(BisimError::BadNode(node_a));
    }
    if node_b >= b.nodes.len() {
        return Err(BisimError::BadNode(node_b));
    }
    let union = disjoint_union(a, b);
    let history = refine(&union, predicates, k);
    let colors = history.last().expect("non-empty");
    Ok(colors[node_a] == colors[a.nodes.len() + node_b])
}

/// A pair of tables whose rows carry different labels for a task, yet whose
/// row nodes no bounded amount of counting refinement can tell apart.
#[derive(Debug, Clone)]
pub struct SeparationWitness {
    /// All rows positive.
    pub positive: Table,
    /// All rows negative.
    pub negative: Table,
    /// Refinement budget the witness certifies against.
    pub k: usize,
}

/// Witness for the DIAMOND task over columns `c1`, `c2`.
///
/// The positive table is two rows sharing both values (its incidence grable
/// is a 4-cycle). The negative table is an alternating-share cycle of
/// `2k+4` rows: consecutive even/odd rows share a `c1` value and odd/even
/// rows share a `c2` value, wrapping around. Every node in either incidence
/// grable has degree 2 and refinement stabilizes at three colors on both,
/// so no budget distinguishes them, while every pair of values co-occurs
/// twice on the positive side and once on the negative side.
pub fn diamond_witness(k: usize) -> SeparationWitness {
    let schema = Schema::new(["c1", "c2"]).expect("distinct");
    let text = |s: String| Value::Text(s);

    let positive = Table::new(
        schema.clone(),
        vec![
            Row::new(vec![text("x0".into()), text("y0".into())]),
            Row::new(vec![text("x0".into()), text("y0".into())]),
        ],
    )
    .expect("arity");

    let n = 2 * k + 4;
    let half = n / 2;
    let rows = (0..n)
        .map(|i| {
            let j = i / 2;
            let c1 = format!("x{j}");
            // row 2j shares its c2 value with row 2j-1 (wrapping)
            let c2 = if i % 2 == 1 {
                format!("y{j}")
            } else {
                format!("y{}", (j + half - 1) % half)
            };
            Row::new(vec![text(c1), text(c2)])
        })
        .collect();
    let negative = Table::new(schema, rows).expect("arity");
    SeparationWitness { positive, negative, k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructors::{build_extended_incidence, build_incidence};
    use crate::gml::{self, Formula};
    use crate::table::{Row, Schema, Table};
    use crate::tasks;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn text(s: &str) -> Value {
        Value::Text(s.to_string())
    }

    fn random_table(seed: u64, n_rows: usize, n_cols: usize, alphabet: usize) -> Table {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = Schema::new((0..n_cols).map(|i| format!("c{i}"))).unwrap();
        let rows = (0..n_rows)
            .map(|_| {
                Row::new(
                    (0..n_cols)
                        .map(|_| text(&format!("v{}", rng.gen_range(0..alphabet))))
                        .collect(),
                )
            })
            .collect();
        Table::new(schema, rows).unwrap()
    }

    #[test]
    fn refinement_never_merges_classes() {
        for seed in 0..10u64 {
            let t = random_table(seed, 20, 2, 4);
            let g = build_incidence(&t, &BTreeSet::new()).unwrap();
            let history = refine(&g, &PredicateSet::standard(), 6);
            for r in 1..history.len() {
                // same color at round r implies same color at round r-1
                for i in 0..g.nodes.len() {
                    for j in 0..g.nodes.len() {
                        if history[r][i] == history[r][j] {
                            assert_eq!(history[r - 1][i], history[r - 1][j]);
                        }
                    }
                }
                assert!(partition_classes(&history[r]) >= partition_classes(&history[r - 1]));
            }
        }
    }

    #[test]
    fn refine_stable_is_a_fixpoint() {
        let t = random_table(3, 25, 3, 5);
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let (stable, rounds) = refine_stable(&g, &PredicateSet::standard());
        let more = refine(&g, &PredicateSet::standard(), rounds + 5);
        let late = more.last().unwrap();
        for i in 0..g.nodes.len() {
            for j in 0..g.nodes.len() {
                assert_eq!(stable[i] == stable[j], late[i] == late[j]);
            }
        }
    }

    #[test]
    fn unique_and_frequent_rows_separate() {
        let schema = Schema::new(["a"]).unwrap();
        let t = Table::new(
            schema,
            vec![
                Row::new(vec![text("solo")]),
                Row::new(vec![text("pair")]),
                Row::new(vec![text("pair")]),
            ],
        )
        .unwrap();
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        let p = PredicateSet::standard();
        let history = refine(&g, &p, 2);
        let (r0, r1) = (g.row_map[0], g.row_map[1]);
        assert_eq!(history[0][r0], history[0][r1], "same type at round 0");
        assert_eq!(history[1][r0], history[1][r1], "same degree at round 1");
        assert_ne!(history[2][r0], history[2][r1], "value degree shows at round 2");
        assert!(!indistinguishable(&g, r0, &g, r1, &p, 2).unwrap());
        assert!(indistinguishable(&g, g.row_map[1], &g, g.row_map[2], &p, 10).unwrap());
    }

    #[test]
    fn diamond_witness_labels_disagree() {
        for k in 1..=4 {
            let w = diamond_witness(k);
            let pos = tasks::label_diamond(&w.positive, "c1", "c2").unwrap();
            let neg = tasks::label_diamond(&w.negative, "c1", "c2").unwrap();
            assert!(pos.iter().all(|&l| l == 1), "k={k}");
            assert!(neg.iter().all(|&l| l == 0), "k={k}");
            assert_eq!(neg.len(), 2 * k + 4);
        }
    }

    #[test]
    fn diamond_witness_rows_are_indistinguishable() {
        let p = PredicateSet::standard();
        for k in 1..=4 {
            let w = diamond_witness(k);
            let gp = build_incidence(&w.positive, &BTreeSet::new()).unwrap();
            let gn = build_incidence(&w.negative, &BTreeSet::new()).unwrap();
            for &vn in &gn.row_map {
                assert!(
                    indistinguishable(&gp, gp.row_map[0], &gn, vn, &p, k).unwrap(),
                    "k={k}"
                );
            }
            // the witness is in fact stable-indistinguishable, not just k
            assert!(indistinguishable(&gp, gp.row_map[0], &gn, gn.row_map[0], &p, 3 * k + 10).unwrap());
        }
    }

    #[test]
    fn diamond_witness_separates_on_extended_incidence() {
        // the pair relation breaks the tie: refinement with pair nodes
        // distinguishes positive from negative rows immediately
        let w = diamond_witness(2);
        let gp = build_extended_incidence(&w.positive, &BTreeSet::new(), "c1", "c2").unwrap();
        let gn = build_extended_incidence(&w.negative, &BTreeSet::new(), "c1", "c2").unwrap();
        let p = PredicateSet::standard();
        assert!(!indistinguishable(&gp, gp.row_map[0], &gn, gn.row_map[0], &p, 2).unwrap());
    }

    fn random_formula(
        rng: &mut ChaCha8Rng,
        depth: usize,
        fuel: &mut usize,
        relations: &[String],
    ) -> Formula {
        let choice = if depth == 0 || *fuel == 0 {
            if *fuel == 0 { 0 } else { rng.gen_range(0..2) }
        } else {
            rng.gen_range(0..5)
        };
        *fuel = fuel.saturating_sub(1);
        match choice {
            0 => Formula::atom(["Row", "Val"][rng.gen_range(0..2)]),
            1 => Formula::not(random_formula(rng, depth, fuel, relations)),
            2 => Formula::and(
                random_formula(rng, depth, fuel, relations),
                random_formula(rng, depth, fuel, relations),
            ),
            3 => Formula::or(
                random_formula(rng, depth, fuel, relations),
                random_formula(rng, depth, fuel, relations),
            ),
            _ => Formula::diamond(
                &relations[rng.gen_range(0..relations.len())],
                rng.gen_range(1..4),
                random_formula(rng, depth - 1, fuel, relations),
            ),
        }
    }

    #[test]
    fn round_k_colors_decide_depth_k_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for seed in 0..8u64 {
            let t = random_table(seed, 18, 2, 4);
            let g = build_incidence(&t, &BTreeSet::new()).unwrap();
            let p = PredicateSet::standard();
            let relations = g.relation_names();
            let history = refine(&g, &p, 2);
            for _ in 0..25 {
                let mut fuel = 30usize;
                let f = random_formula(&mut rng, 2, &mut fuel, &relations);
                let k = f.modal_depth();
                let bits = gml::eval(&f, &g, &p).unwrap();
                for i in 0..g.nodes.len() {
                    for j in 0..g.nodes.len() {
                        if history[k][i] == history[k][j] {
                            assert_eq!(bits[i], bits[j], "formula {f} depth {k}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bad_node_errors() {
        let t = random_table(1, 3, 1, 2);
        let g = build_incidence(&t, &BTreeSet::new()).unwrap();
        assert!(matches!(
            indistinguishable(&g, 999, &g, 0, &PredicateSet::standard(), 1),
            Err(BisimError::BadNode(999))
        ));
    }
}
