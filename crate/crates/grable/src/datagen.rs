//! Synthetic transaction tables and adversarial stress sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constructors::stable_hash;
use crate::table::{Row, Schema, Table, Value};
use crate::tasks::{self, CountMode, TaskKind};

pub const ONLINE: &str = "ONLINE";

/// Fixed physical-city pool; merchants that are not online are assigned one
/// of these deterministically.
pub const CITIES: [&str; 20] = [
    "Amsterdam", "Athens", "Barcelona", "Berlin", "Brussels", "Copenhagen",
    "Dublin", "Helsinki", "Lisbon", "London", "Madrid", "Milan", "Munich",
    "Oslo", "Paris", "Prague", "Rome", "Stockholm", "Vienna", "Warsaw",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_rows: usize,
    pub n_cards: usize,
    pub n_merchants: usize,
    /// Probability that a merchant is online rather than located in a city.
    pub online_share: f64,
    /// Zipf exponent for the card-occurrence distribution.
    pub powerlaw_exponent: f64,
    /// Hard cap on how many rows any single card may occupy.
    pub powerlaw_cap: Option<usize>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_rows: 8000,
            n_cards: 2500,
            n_merchants: 3500,
            online_share: 0.15,
            powerlaw_exponent: 1.2,
            powerlaw_cap: Some(20),
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("n_cards ({cards}) exceeds n_rows ({rows}): coverage is impossible")]
    MoreCardsThanRows { cards: usize, rows: usize },
    #[error("{0} must be positive")]
    EmptyPool(&'static str),
    #[error("online_share must lie in [0, 1], got {0}")]
    BadShare(f64),
    #[error("cap {cap} times n_cards {cards} cannot hold n_rows {rows} occurrences")]
    CapTooTight { cap: usize, cards: usize, rows: usize },
    #[error("stress set needs reference values with {0}, none found")]
    UnusableReference(&'static str),
    #[error("stress sets are defined over the transaction schema, missing column `{0}`")]
    WrongSchema(String),
    #[error(transparent)]
    Task(#[from] tasks::TaskError),
    #[error(transparent)]
    Table(#[from] crate::table::TableError),
}

pub fn transaction_schema() -> Schema {
    Schema::new(["id", "card_id", "merchant_id", "merchant_city"]).expect("distinct")
}

fn card_name(i: usize) -> String {
    format!("C{i:06}")
}

fn merchant_name(i: usize) -> String {
    format!("M{i:05}")
}

/// City of a merchant: a pure function of the merchant identifier, so the
/// merchant→city dependency holds in every generated table.
pub fn merchant_city(merchant: &str, online_share: f64) -> String {
    let h = stable_hash(0x5EED_C171, merchant.as_bytes());
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < online_share {
        ONLINE.to_string()
    } else {
        let k = stable_hash(0xB0D3, merchant.as_bytes()) as usize % CITIES.len();
        CITIES[k].to_string()
    }
}

/// Generate a transaction table. Every card occurs at least once; residual
/// occurrences follow a bounded power law over card ranks; rows are shuffled
/// and then numbered sequentially.
pub fn generate_transactions(cfg: &GenConfig) -> Result<Table, DatagenError> {
    if cfg.n_rows == 0 {
        return Err(DatagenError::EmptyPool("n_rows"));
    }
    if cfg.n_cards == 0 {
        return Err(DatagenError::EmptyPool("n_cards"));
    }
    if cfg.n_merchants == 0 {
        return Err(DatagenError::EmptyPool("n_merchants"));
    }
    if !(0.0..=1.0).contains(&cfg.online_share) {
        return Err(DatagenError::BadShare(cfg.online_share));
    }
    if cfg.n_cards > cfg.n_rows {
        return Err(DatagenError::MoreCardsThanRows {
            cards: cfg.n_cards,
            rows: cfg.n_rows,
        });
    }
    if let Some(cap) = cfg.powerlaw_cap {
        if cap == 0 || cap.saturating_mul(cfg.n_cards) < cfg.n_rows {
            return Err(DatagenError::CapTooTight {
                cap,
                cards: cfg.n_cards,
                rows: cfg.n_rows,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // coverage: one occurrence per card, then power-law residual sampling
    let mut occurrences: Vec<usize> = (0..cfg.n_cards).collect();
    let mut counts = vec![1usize; cfg.n_cards];
    let cumulative: Vec<f64> = {
        let mut acc = 0.0;
        (0..cfg.n_cards)
            .map(|r| {
                acc += 1.0 / ((r + 1) as f64).powf(cfg.powerlaw_exponent);
                acc
            })
            .collect()
    };
    let total = *cumulative.last().expect("n_cards > 0");
    while occurrences.len() < cfg.n_rows {
        let u: f64 = rng.gen_range(0.0..total);
        let rank = cumulative.partition_point(|&c| c <= u);
        if cfg.powerlaw_cap.is_some_and(|cap| counts[rank] >= cap) {
            continue; // rejection keeps the residual draw bounded
        }
        counts[rank] += 1;
        occurrences.push(rank);
    }

    use rand::seq::SliceRandom;
    occurrences.shuffle(&mut rng);

    let schema = transaction_schema();
    let rows = occurrences
        .iter()
        .enumerate()
        .map(|(i, &card)| {
            let merchant = merchant_name(rng.gen_range(0..cfg.n_merchants));
            let city = merchant_city(&merchant, cfg.online_share);
            Row::new(vec![
                Value::Integer(i as i64 + 1),
                Value::Text(card_name(card)),
                Value::Text(merchant),
                Value::Text(city),
            ])
        })
        .collect();
    Ok(Table::new(schema, rows)?)
}

/// A table with ground-truth labels attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledTable {
    pub table: Table,
    pub labels: Vec<u8>,
}

impl LabeledTable {
    /// CSV with a trailing `label` column.
    pub fn to_csv_with_labels(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.table.schema().columns().join(","));
        out.push_str(",label\n");
        for (row, label) in self.table.rows().iter().zip(&self.labels) {
            let cells: Vec<String> = row.values().iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push_str(&format!(",{label}\n"));
        }
        out
    }
}

fn freq_split(reference: &Table, column: &str) -> Result<(Vec<Value>, Vec<Value>), DatagenError> {
    let values = reference
        .column(column)
        .map_err(|_| DatagenError::WrongSchema(column.to_string()))?;
    let mut counts: std::collections::BTreeMap<&Value, usize> = std::collections::BTreeMap::new();
    for v in values {
        if !v.is_missing() {
            *counts.entry(v).or_default() += 1;
        }
    }
    let mut pairs: Vec<(&Value, usize)> = counts.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let frequent = pairs
        .iter()
        .filter(|(_, c)| *c >= 2)
        .map(|(v, _)| (*v).clone())
        .collect();
    let unique = pairs
        .iter()
        .filter(|(_, c)| *c == 1)
        .map(|(v, _)| (*v).clone())
        .collect();
    Ok((frequent, unique))
}

fn finish(
    task: &TaskKind,
    schema: &Schema,
    proto: Vec<(Value, Value)>, // (c1-ish, c2-ish) prototypes filled below
    fill: impl Fn(usize, (Value, Value)) -> Row,
) -> Result<LabeledTable, DatagenError> {
    let rows: Vec<Row> = proto
        .into_iter()
        .enumerate()
        .map(|(i, p)| fill(i, p))
        .collect();
    let table = Table::new(schema.clone(), rows)?;
    let labels = tasks::label(&table, task)?;
    Ok(LabeledTable { table, labels })
}

/// Construct an adversarial stress table for a task. The table follows the
/// transaction schema; labels come from the exact labeler, never from the
/// construction.
///
/// - UNIQUE: frequency inversion against `reference` — its frequent values
///   become unique here and vice versa.
/// - COUNT: values that were frequent in `reference` stay below the
///   threshold; fresh values sit exactly at it.
/// - DOUBLE: every single column condition is (near-)uncorrelated with the
///   label while the two-column pattern decides it.
/// - DIAMOND: each first-column group is label-balanced.
pub fn generate_stress_set(
    task: &TaskKind,
    reference: &Table,
    n_groups: usize,
    seed: u64,
) -> Result<LabeledTable, DatagenError> {
    if n_groups == 0 {
        return Err(DatagenError::EmptyPool("n_groups"));
    }
    let schema = transaction_schema();
    for c in schema.columns() {
        if c != "id" && !reference.schema().contains(c) {
            return Err(DatagenError::WrongSchema(c.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = |rng: &mut ChaCha8Rng, tag: &str| -> String {
        format!("S{tag}{:08x}", rng.gen::<u32>())
    };

    match task {
        TaskKind::Unique { column } => {
            let (frequent, unique) = freq_split(reference, column)?;
            if frequent.is_empty() {
                return Err(DatagenError::UnusableReference("frequency >= 2"));
            }
            if unique.is_empty() {
                return Err(DatagenError::UnusableReference("frequency == 1"));
            }
            let mut proto = Vec::new();
            for v in frequent.iter().take(n_groups) {
                proto.push((v.clone(), Value::Missing)); // one row: unique now
            }
            for v in unique.iter().take(n_groups) {
                proto.push((v.clone(), Value::Missing));
                proto.push((v.clone(), Value::Missing)); // two rows: frequent now
            }
            finish(task, &schema, proto, |i, (card, _)| {
                let merchant = format!("SM{i:06}");
                let city = merchant_city(&merchant, 0.15);
                Row::new(vec![
                    Value::Integer(i as i64 + 1),
                    card,
                    Value::Text(merchant),
                    Value::Text(city),
                ])
            })
        }
        TaskKind::Count { column, k, mode } => {
            let (frequent, _) = freq_split(reference, column)?;
            if frequent.is_empty() {
                return Err(DatagenError::UnusableReference("frequency >= 2"));
            }
            // positives sit exactly at the decision boundary
            let positive_count = match mode {
                CountMode::Gt => k + 1,
                CountMode::Eq => *k,
            };
            let negative_cap = match mode {
                CountMode::Gt => *k,
                CountMode::Eq => k + 1, // eq-mode negatives overshoot by one
            };
            let mut proto = Vec::new();
            for v in frequent.iter().take(n_groups) {
                let reps = if matches!(mode, CountMode::Eq) {
                    negative_cap
                } else {
                    rng.gen_range(1..=negative_cap)
                };
                for _ in 0..reps {
                    proto.push((v.clone(), Value::Missing));
                }
            }
            for _ in 0..n_groups {
                let v = Value::Text(fresh(&mut rng, "C"));
                for _ in 0..positive_count {
                    proto.push((v.clone(), Value::Missing));
                }
            }
            finish(task, &schema, proto, |i, (card, _)| {
                let merchant = format!("SM{i:06}");
                let city = merchant_city(&merchant, 0.15);
                Row::new(vec![
                    Value::Integer(i as i64 + 1),
                    card,
                    Value::Text(merchant),
                    Value::Text(city),
                ])
            })
        }
        TaskKind::Double { anchor, .. } => {
            let anchor = anchor.clone();
            let mut proto: Vec<(Value, Value)> = Vec::new();
            // type A: pairs of anchor rows sharing a fresh card (labels 1,1)
            for _ in 0..n_groups {
                let v = Value::Text(fresh(&mut rng, "A"));
                proto.push((v.clone(), anchor.clone()));
                proto.push((v, anchor.clone()));
            }
            // type B: one anchor + one off-anchor row per fresh card (0,1)
            for _ in 0..2 * n_groups {
                let v = Value::Text(fresh(&mut rng, "B"));
                proto.push((v.clone(), anchor.clone()));
                proto.push((v, Value::Text(fresh(&mut rng, "Y"))));
            }
            // type C: two off-anchor rows per fresh card (0,0)
            for _ in 0..n_groups {
                let v = Value::Text(fresh(&mut rng, "D"));
                proto.push((v.clone(), Value::Text(fresh(&mut rng, "Y"))));
                proto.push((v, Value::Text(fresh(&mut rng, "Y"))));
            }
            finish(task, &schema, proto, |i, (card, city)| {
                Row::new(vec![
                    Value::Integer(i as i64 + 1),
                    card,
                    Value::Text(format!("SM{i:06}")),
                    city,
                ])
            })
        }
        TaskKind::Diamond { .. } => {
            let mut proto: Vec<(Value, Value)> = Vec::new();
            for _ in 0..n_groups {
                let v = Value::Text(fresh(&mut rng, "G"));
                let shared = Value::Text(fresh(&mut rng, "P"));
                proto.push((v.clone(), shared.clone()));
                proto.push((v.clone(), shared));
                proto.push((v.clone(), Value::Text(fresh(&mut rng, "Q"))));
                proto.push((v, Value::Text(fresh(&mut rng, "Q"))));
            }
            finish(task, &schema, proto, |i, (card, merchant)| {
                let merchant_s = merchant.to_string();
                let city = merchant_city(&merchant_s, 0.15);
                Row::new(vec![
                    Value::Integer(i as i64 + 1),
                    card,
                    merchant,
                    Value::Text(city),
                ])
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn counts_of(table: &Table, column: &str) -> BTreeMap<Value, usize> {
        let mut c = BTreeMap::new();
        for v in table.column(column).unwrap() {
            *c.entry(v.clone()).or_insert(0usize) += 1;
        }
        c
    }

    #[test]
    fn coverage_and_shape() {
        let cfg = GenConfig {
            n_rows: 1200,
            n_cards: 400,
            n_merchants: 300,
            seed: 7,
            ..GenConfig::default()
        };
        let t = generate_transactions(&cfg).unwrap();
        assert_eq!(t.n_rows(), 1200);
        let cards = counts_of(&t, "card_id");
        assert_eq!(cards.len(), 400);
        assert!(cards.values().all(|&c| c >= 1));
        if let Some(cap) = cfg.powerlaw_cap {
            assert!(cards.values().all(|&c| c <= cap));
        }
    }

    #[test]
    fn forced_full_coverage() {
        let cfg = GenConfig {
            n_rows: 100,
            n_cards: 100,
            n_merchants: 50,
            seed: 1,
            ..GenConfig::default()
        };
        let t = generate_transactions(&cfg).unwrap();
        let cards = counts_of(&t, "card_id");
        assert_eq!(cards.len(), 100);
        assert!(cards.values().all(|&c| c == 1));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = GenConfig {
            n_rows: 500,
            n_cards: 200,
            n_merchants: 100,
            seed: 42,
            ..GenConfig::default()
        };
        let a = generate_transactions(&cfg).unwrap();
        let b = generate_transactions(&cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let c = generate_transactions(&GenConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn ids_are_sequential() {
        let cfg = GenConfig {
            n_rows: 50,
            n_cards: 20,
            n_merchants: 10,
            seed: 3,
            ..GenConfig::default()
        };
        let t = generate_transactions(&cfg).unwrap();
        for (i, row) in t.rows().iter().enumerate() {
            assert_eq!(row.values()[0], Value::Integer(i as i64 + 1));
        }
    }

    #[test]
    fn merchant_city_is_functional() {
        let cfg = GenConfig {
            n_rows: 2000,
            n_cards: 600,
            n_merchants: 80,
            seed: 11,
            ..GenConfig::default()
        };
        let t = generate_transactions(&cfg).unwrap();
        let mut seen: BTreeMap<Value, Value> = BTreeMap::new();
        for row in t.rows() {
            let m = row.values()[2].clone();
            let city = row.values()[3].clone();
            if let Some(prev) = seen.insert(m, city.clone()) {
                assert_eq!(prev, city);
            }
        }
    }

    #[test]
    fn online_fraction_close_to_share() {
        let cfg = GenConfig {
            n_rows: 4000,
            n_cards: 1500,
            n_merchants: 3000,
            online_share: 0.15,
            seed: 5,
            ..GenConfig::default()
        };
        let t = generate_transactions(&cfg).unwrap();
        let online = t
            .column("merchant_city")
            .unwrap()
            .iter()
            .filter(|v| ***v == Value::Text(ONLINE.into()))
            .count();
        let frac = online as f64 / t.n_rows() as f64;
        assert!((frac - 0.15).abs() < 0.02, "online fraction {frac}");
    }

    #[test]
    fn unique_prevalence_in_band() {
        let cfg = GenConfig { seed: 0, ..GenConfig::default() };
        let t = generate_transactions(&cfg).unwrap();
        let labels = tasks::label_unique(&t, "card_id").unwrap();
        let prevalence =
            labels.iter().map(|&l| l as usize).sum::<usize>() as f64 / labels.len() as f64;
        assert!(
            (0.05..=0.25).contains(&prevalence),
            "unique prevalence {prevalence}"
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let base = GenConfig::default();
        assert!(matches!(
            generate_transactions(&GenConfig { n_rows: 10, n_cards: 20, ..base.clone() }),
            Err(DatagenError::MoreCardsThanRows { .. })
        ));
        assert!(generate_transactions(&GenConfig { n_cards: 0, ..base.clone() }).is_err());
        assert!(generate_transactions(&GenConfig { online_share: 1.5, ..base.clone() }).is_err());
        assert!(matches!(
            generate_transactions(&GenConfig {
                n_rows: 100,
                n_cards: 40,
                powerlaw_cap: Some(2),
                ..base
            }),
            Err(DatagenError::CapTooTight { .. })
        ));
    }

    fn reference() -> Table {
        generate_transactions(&GenConfig {
            n_rows: 1000,
            n_cards: 350,
            n_merchants: 300,
            seed: 9,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn unique_stress_inverts_frequencies() {
        let reference = reference();
        let task = TaskKind::Unique { column: "card_id".into() };
        let stress = generate_stress_set(&task, &reference, 60, 17).unwrap();
        let ref_counts = counts_of(&reference, "card_id");
        let stress_counts = counts_of(&stress.table, "card_id");
        for (v, &c) in &stress_counts {
            let ref_c = ref_counts.get(v).copied().unwrap_or(0);
            if ref_c >= 2 {
                assert_eq!(c, 1, "reference-frequent value must be unique");
            } else if ref_c == 1 {
                assert_eq!(c, 2, "reference-unique value must repeat");
            }
        }
        // labels agree with the labeler by construction of finish()
        assert_eq!(stress.labels, tasks::label(&stress.table, &task).unwrap());
        assert!(stress.labels.iter().any(|&l| l == 1));
        assert!(stress.labels.iter().any(|&l| l == 0));
    }

    #[test]
    fn count_stress_boundary() {
        let reference = reference();
        let k = 3;
        let task = TaskKind::Count { column: "card_id".into(), k, mode: CountMode::Gt };
        let stress = generate_stress_set(&task, &reference, 40, 23).unwrap();
        let ref_counts = counts_of(&reference, "card_id");
        let stress_counts = counts_of(&stress.table, "card_id");
        for (v, &c) in &stress_counts {
            if ref_counts.contains_key(v) {
                assert!(c <= k, "reference value stays below the threshold");
            } else {
                assert_eq!(c, k + 1, "fresh value sits exactly past it");
            }
        }
        assert!(stress.labels.iter().any(|&l| l == 1));
        assert!(stress.labels.iter().any(|&l| l == 0));
    }

    fn max_single_condition_corr(lt: &LabeledTable, skip: &[&str]) -> f64 {
        let n = lt.labels.len() as f64;
        let label_mean = lt.labels.iter().map(|&l| l as f64).sum::<f64>() / n;
        let label_var = label_mean * (1.0 - label_mean);
        let mut worst: f64 = 0.0;
        for column in lt.table.schema().columns() {
            if skip.contains(&column.as_str()) {
                continue;
            }
            let values = lt.table.column(column).unwrap();
            let distinct: std::collections::BTreeSet<&Value> = values.iter().copied().collect();
            for target in distinct {
                let xs: Vec<f64> = values.iter().map(|v| (*v == target) as u8 as f64).collect();
                let x_mean = xs.iter().sum::<f64>() / n;
                let x_var = x_mean * (1.0 - x_mean);
                if x_var == 0.0 || label_var == 0.0 {
                    continue;
                }
                let cov = xs
                    .iter()
                    .zip(&lt.labels)
                    .map(|(x, &l)| (x - x_mean) * (l as f64 - label_mean))
                    .sum::<f64>()
                    / n;
                worst = worst.max((cov / (x_var * label_var).sqrt()).abs());
            }
        }
        worst
    }

    #[test]
    fn double_stress_has_no_single_condition_signal() {
        let reference = reference();
        let task = TaskKind::Double {
            c1: "card_id".into(),
            c2: "merchant_city".into(),
            anchor: Value::Text(ONLINE.into()),
        };
        let stress = generate_stress_set(&task, &reference, 60, 31).unwrap();
        // balance: half the rows are positive
        let positives: usize = stress.labels.iter().map(|&l| l as usize).sum();
        assert_eq!(positives * 2, stress.labels.len());
        let worst = max_single_condition_corr(&stress, &["id", "merchant_id"]);
        assert!(worst <= 0.1, "max single-condition correlation {worst}");
    }

    #[test]
    fn diamond_stress_is_group_balanced() {
        let reference = reference();
        let task = TaskKind::Diamond { c1: "card_id".into(), c2: "merchant_id".into() };
        let stress = generate_stress_set(&task, &reference, 50, 41).unwrap();
        let positives: usize = stress.labels.iter().map(|&l| l as usize).sum();
        assert_eq!(positives * 2, stress.labels.len());
        // every card group is 50/50
        let mut by_card: BTreeMap<Value, (usize, usize)> = BTreeMap::new();
        for (row, &label) in stress.table.rows().iter().zip(&stress.labels) {
            let entry = by_card.entry(row.values()[1].clone()).or_insert((0, 0));
            if label == 1 {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
        for (pos, neg) in by_card.values() {
            assert_eq!(pos, neg);
        }
        let worst = max_single_condition_corr(&stress, &["id", "merchant_id", "merchant_city"]);
        assert!(worst <= 0.1);
    }

    #[test]
    fn stress_rejects_missing_columns() {
        let schema = Schema::new(["x"]).unwrap();
        let bad = Table::new(schema, vec![]).unwrap();
        let task = TaskKind::Unique { column: "card_id".into() };
        assert!(matches!(
            generate_stress_set(&task, &bad, 10, 0),
            Err(DatagenError::WrongSchema(_))
        ));
    }

    #[test]
    fn labeled_csv_has_label_column() {
        let reference = reference();
        let task = TaskKind::Unique { column: "card_id".into() };
        let stress = generate_stress_set(&task, &reference, 5, 2).unwrap();
        let csv = stress.to_csv_with_labels();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "id,card_id,merchant_id,merchant_city,label");
        assert_eq!(csv.lines().count(), stress.table.n_rows() + 1);
    }
}
