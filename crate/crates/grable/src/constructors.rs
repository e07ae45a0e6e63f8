//! Graph constructors: every one maps a table to a grable while preserving
//! the bijection between table rows and row nodes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::table::{Row, Schema, Table, Value};

pub const ROW_TYPE: &str = "row";
pub const VAL_TYPE: &str = "val";
pub const PAIR_TYPE: &str = "pair";
pub const CELL_TYPE: &str = "cell";
pub const TOKEN_TYPE: &str = "token";

/// Relation name for the incidence edges of a column.
pub fn column_relation(column: &str) -> String {
    format!("E_{column}")
}

/// Relation name for the pair edges of an extended incidence grable.
pub fn pair_relation(ci: &str, cj: &str) -> String {
    format!("E_{ci}__{cj}")
}

/// A node: type tag, local schema and a feature row over that schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub node_type: String,
    pub local_schema: Schema,
    pub features: Row,
}

/// A typed heterogeneous graph built from a table. Immutable once built;
/// relations store directed pairs (symmetric relations contain both
/// directions), and `row_map[i]` is the node id of table row `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grable {
    pub nodes: Vec<NodeRecord>,
    pub edge_relations: BTreeMap<String, Vec<(usize, usize)>>,
    pub row_map: Vec<usize>,
    pub provenance: String,
}

#[derive(Debug, Error)]
pub enum ConstructError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("designated columns must differ (both are `{0}`)")]
    SameColumn(String),
    #[error("base grable has no row nodes")]
    NoRowNodes,
    #[error("column `{column}` is not a timestamp at row node {node}")]
    NotATimestamp { column: String, node: usize },
}

impl Grable {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_relations.values().map(|e| e.len()).sum()
    }

    pub fn relation_names(&self) -> Vec<String> {
        self.edge_relations.keys().cloned().collect()
    }

    /// Out-neighbor lists per relation, indexed by node id. Neighbor lists
    /// are ascending, so sweeps over them are deterministic.
    pub fn adjacency(&self) -> BTreeMap<String, Vec<Vec<usize>>> {
        let mut adj = BTreeMap::new();
        for (name, edges) in &self.edge_relations {
            let mut lists = vec![Vec::new(); self.nodes.len()];
            for &(a, b) in edges {
                lists[a].push(b);
            }
            for list in &mut lists {
                list.sort_unstable();
            }
            adj.insert(name.clone(), lists);
        }
        adj
    }

    /// Node ids of type `row`, ascending.
    pub fn row_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.node_type == ROW_TYPE)
            .map(|n| n.id)
            .collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edge_relations
            .values()
            .flat_map(|e| e.iter())
            .filter(|(a, _)| *a == node)
            .count()
    }

    fn push_node(&mut self, node_type: &str, local_schema: Schema, features: Row) -> usize {
        let id = self.nodes.len();
        self.nodes.push(NodeRecord {
            id,
            node_type: node_type.to_string(),
            local_schema,
            features,
        });
        id
    }

    fn empty(provenance: String) -> Self {
        Grable {
            nodes: Vec::new(),
            edge_relations: BTreeMap::new(),
            row_map: Vec::new(),
            provenance,
        }
    }
}

/// Deterministic sign-hash featurizer: each (column, value) pair maps to a
/// single ±1 entry in a `dim`-bucket vector. Equal inputs map to equal
/// vectors for a fixed seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Featurizer {
    pub dim: usize,
    pub seed: u64,
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer { dim: 32, seed: 0 }
    }
}

/// Stable 64-bit digest of a byte string under a seed.
pub fn stable_hash(seed: u64, payload: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(payload);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn value_bytes(value: &Value) -> Vec<u8> {
    match value {
        Value::Text(s) => [b"t:", s.as_bytes()].concat(),
        Value::Integer(i) => [b"i:".as_slice(), &i.to_le_bytes()].concat(),
        Value::Real(r) => [b"r:".as_slice(), &r.to_bits().to_le_bytes()].concat(),
        Value::Timestamp(t) => [b"s:".as_slice(), &t.to_le_bytes()].concat(),
        Value::Missing => b"m:".to_vec(),
    }
}

impl Featurizer {
    pub fn features(&self, column: &str, value: &Value) -> Vec<f64> {
        let mut payload = column.as_bytes().to_vec();
        payload.push(0);
        payload.extend(value_bytes(value));
        let h = stable_hash(self.seed, &payload);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        let mut v = vec![0.0; self.dim];
        v[bucket] = sign;
        v
    }

    fn feature_schema(&self) -> Schema {
        Schema::new((0..self.dim).map(|i| format!("f{i}"))).expect("distinct names")
    }

    fn feature_row(&self, column: &str, value: &Value) -> Row {
        Row::new(self.features(column, value).into_iter().map(Value::Real).collect())
    }
}

fn push_row_nodes(g: &mut Grable, table: &Table) {
    for row in table.rows() {
        let id = g.push_node(ROW_TYPE, table.schema().clone(), row.clone());
        g.row_map.push(id);
    }
}

fn symmetric(edges: &mut Vec<(usize, usize)>, a: usize, b: usize) {
    edges.push((a, b));
    edges.push((b, a));
}

/// One edgeless row node per table row.
pub fn build_trivial(table: &Table) -> Grable {
    let mut g = Grable::empty("trivial".into());
    push_row_nodes(&mut g, table);
    g
}

fn val_node_schema() -> Schema {
    Schema::new(["column", "value"]).expect("distinct names")
}

fn incidence_into(
    g: &mut Grable,
    table: &Table,
    exclude_columns: &BTreeSet<String>,
) -> Result<BTreeMap<(usize, Value), usize>, ConstructError> {
    for c in exclude_columns {
        if !table.schema().contains(c) {
            return Err(ConstructError::UnknownColumn(c.clone()));
        }
    }
    push_row_nodes(g, table);
    let mut value_nodes: BTreeMap<(usize, Value), usize> = BTreeMap::new();
    for (ci, column) in table.schema().columns().iter().enumerate() {
        if exclude_columns.contains(column) {
            continue;
        }
        let mut edges = Vec::new();
        for (ri, row) in table.rows().iter().enumerate() {
            let v = &row.values()[ci];
            if v.is_missing() {
                continue;
            }
            let key = (ci, v.clone());
            let vid = *value_nodes.entry(key).or_insert_with(|| {
                g.push_node(
                    VAL_TYPE,
                    val_node_schema(),
                    Row::new(vec![Value::Text(column.clone()), v.clone()]),
                )
            });
            symmetric(&mut edges, g.row_map[ri], vid);
        }
        g.edge_relations.insert(column_relation(column), edges);
    }
    Ok(value_nodes)
}

/// Bipartite incidence grable: row nodes plus one value node per occurring
/// (column, value) pair, joined by symmetric column-typed edges. Missing
/// cells produce no edge.
pub fn build_incidence(
    table: &Table,
    exclude_columns: &BTreeSet<String>,
) -> Result<Grable, ConstructError> {
    let mut g = Grable::empty("incidence".into());
    incidence_into(&mut g, table, exclude_columns)?;
    Ok(g)
}

/// Incidence grable plus one pair node per occurring `(ci, cj)` value pair,
/// with a symmetric pair relation.
pub fn build_extended_incidence(
    table: &Table,
    exclude_columns: &BTreeSet<String>,
    ci: &str,
    cj: &str,
) -> Result<Grable, ConstructError> {
    if ci == cj {
        return Err(ConstructError::SameColumn(ci.to_string()));
    }
    let i = table
        .schema()
        .index_of(ci)
        .ok_or_else(|| ConstructError::UnknownColumn(ci.to_string()))?;
    let j = table
        .schema()
        .index_of(cj)
        .ok_or_else(|| ConstructError::UnknownColumn(cj.to_string()))?;
    let mut g = Grable::empty(format!("extended-incidence({ci},{cj})"));
    incidence_into(&mut g, table, exclude_columns)?;

    let pair_schema = Schema::new(["column_i", "value_i", "column_j", "value_j"]).unwrap();
    let mut pair_nodes: BTreeMap<(Value, Value), usize> = BTreeMap::new();
    let mut edges = Vec::new();
    for (ri, row) in table.rows().iter().enumerate() {
        let a = &row.values()[i];
        let b = &row.values()[j];
        if a.is_missing() || b.is_missing() {
            continue;
        }
        let key = (a.clone(), b.clone());
        let pid = *pair_nodes.entry(key).or_insert_with(|| {
            g.push_node(
                PAIR_TYPE,
                pair_schema.clone(),
                Row::new(vec![
                    Value::Text(ci.to_string()),
                    a.clone(),
                    Value::Text(cj.to_string()),
                    b.clone(),
                ]),
            )
        });
        symmetric(&mut edges, g.row_map[ri], pid);
    }
    g.edge_relations.insert(pair_relation(ci, cj), edges);
    Ok(g)
}

/// Disjoint union of per-row stars: a central row node joined to one cell
/// node per non-missing cell. No cross-row edges; the column name travels on
/// the (typed) relation.
pub fn build_carte(table: &Table, featurizer: &Featurizer) -> Grable {
    let mut g = Grable::empty("carte".into());
    push_row_nodes(&mut g, table);
    let cell_schema = featurizer.feature_schema();
    for (ci, column) in table.schema().columns().iter().enumerate() {
        let mut edges = Vec::new();
        for (ri, row) in table.rows().iter().enumerate() {
            let v = &row.values()[ci];
            if v.is_missing() {
                continue;
            }
            let cid = g.push_node(CELL_TYPE, cell_schema.clone(), featurizer.feature_row(column, v));
            symmetric(&mut edges, g.row_map[ri], cid);
        }
        g.edge_relations.insert(column_relation(column), edges);
    }
    g
}

/// Per-row token cliques (`E_attn`, ordered pairs, no self-loops) plus a
/// row-to-token star (`E_row`, forward only).
pub fn build_tarte(table: &Table, featurizer: &Featurizer) -> Grable {
    let mut g = Grable::empty("tarte".into());
    push_row_nodes(&mut g, table);
    let token_schema = featurizer.feature_schema();
    let m = table.schema().len();
    let mut attn = Vec::new();
    let mut row_edges = Vec::new();
    for (ri, row) in table.rows().iter().enumerate() {
        let tokens: Vec<usize> = (0..m)
            .map(|ci| {
                g.push_node(
                    TOKEN_TYPE,
                    token_schema.clone(),
                    featurizer.feature_row(&table.schema().columns()[ci], &row.values()[ci]),
                )
            })
            .collect();
        for &a in &tokens {
            row_edges.push((g.row_map[ri], a));
            for &b in &tokens {
                if a != b {
                    attn.push((a, b));
                }
            }
        }
    }
    g.edge_relations.insert("E_attn".into(), attn);
    g.edge_relations.insert("E_row".into(), row_edges);
    g
}

/// Cell and row nodes with two attention relations: `E_row` connects cells
/// within a row (plus the symmetric row-node star) and `E_col` connects
/// cells within a column across rows. Self-loops excluded.
pub fn build_tabpfn(table: &Table, featurizer: &Featurizer) -> Grable {
    let mut g = Grable::empty("tabpfn".into());
    push_row_nodes(&mut g, table);
    let cell_schema = featurizer.feature_schema();
    let m = table.schema().len();
    let n = table.n_rows();
    let mut cells = vec![vec![0usize; m]; n];
    for (ri, row) in table.rows().iter().enumerate() {
        for ci in 0..m {
            cells[ri][ci] = g.push_node(
                CELL_TYPE,
                cell_schema.clone(),
                featurizer.feature_row(&table.schema().columns()[ci], &row.values()[ci]),
            );
        }
    }
    let mut e_row = Vec::new();
    for ri in 0..n {
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    e_row.push((cells[ri][a], cells[ri][b]));
                }
            }
            symmetric(&mut e_row, g.row_map[ri], cells[ri][a]);
        }
    }
    let mut e_col = Vec::new();
    for ci in 0..m {
        for r in 0..n {
            for s in 0..n {
                if r != s {
                    e_col.push((cells[r][ci], cells[s][ci]));
                }
            }
        }
    }
    g.edge_relations.insert("E_col".into(), e_col);
    g.edge_relations.insert("E_row".into(), e_row);
    g
}

/// Per-relation row neighborhoods of a grable: for each relation, the rows
/// co-incident with `v` through a shared intermediate node (the bipartite
/// projection). Row nodes directly adjacent to `v` count as well.
fn row_projections(base: &Grable) -> Result<BTreeMap<String, Vec<BTreeSet<usize>>>, ConstructError> {
    if base.row_map.is_empty() && !base.nodes.is_empty() {
        return Err(ConstructError::NoRowNodes);
    }
    let is_row: Vec<bool> = base.nodes.iter().map(|n| n.node_type == ROW_TYPE).collect();
    let adj = base.adjacency();
    let mut out = BTreeMap::new();
    for (rel, lists) in &adj {
        let mut per_node: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); base.nodes.len()];
        for &v in &base.row_map {
            let mut rows = BTreeSet::new();
            for &u in &lists[v] {
                if is_row[u] {
                    rows.insert(u);
                } else {
                    for &w in &lists[u] {
                        if is_row[w] && w != v {
                            rows.insert(w);
                        }
                    }
                }
            }
            per_node[v] = rows;
        }
        out.insert(rel.clone(), per_node);
    }
    Ok(out)
}

fn row_schema_of(base: &Grable) -> Option<Schema> {
    base.row_map
        .first()
        .map(|&v| base.nodes[v].local_schema.clone())
}

struct NfaLayout {
    row_schema: Schema,
    /// (column index, column name) of numeric columns.
    numeric: Vec<(usize, String)>,
    /// (column index, column name, sorted distinct values) of text columns.
    categorical: Vec<(usize, String, Vec<Value>)>,
}

fn nfa_layout(base: &Grable) -> Option<NfaLayout> {
    let row_schema = row_schema_of(base)?;
    let mut numeric = Vec::new();
    let mut categorical = Vec::new();
    for (ci, column) in row_schema.columns().iter().enumerate() {
        let mut is_text = false;
        let mut is_numeric = false;
        let mut distinct: BTreeSet<Value> = BTreeSet::new();
        for &v in &base.row_map {
            match &base.nodes[v].features.values()[ci] {
                Value::Text(_) => {
                    is_text = true;
                    distinct.insert(base.nodes[v].features.values()[ci].clone());
                }
                Value::Missing => {}
                _ => is_numeric = true,
            }
        }
        if is_text {
            categorical.push((ci, column.clone(), distinct.into_iter().collect()));
        } else if is_numeric {
            numeric.push((ci, column.clone()));
        }
    }
    Some(NfaLayout { row_schema, numeric, categorical })
}

fn nfa_channels(
    layout: &NfaLayout,
    relations: &[String],
) -> Vec<String> {
    let mut names = Vec::new();
    for rel in relations {
        names.push(format!("nfa_{rel}_n"));
        for (_, col) in &layout.numeric {
            for agg in ["mean", "min", "max"] {
                names.push(format!("nfa_{rel}_{col}_{agg}"));
            }
        }
        for (_, col, values) in &layout.categorical {
            for (vi, _) in values.iter().enumerate() {
                names.push(format!("nfa_{rel}_{col}_onehot{vi}_mean"));
            }
        }
    }
    names
}

fn aggregate_channels(
    base: &Grable,
    layout: &NfaLayout,
    neighborhood: &BTreeSet<usize>,
) -> Vec<Value> {
    let mut out = Vec::new();
    out.push(Value::Integer(neighborhood.len() as i64));
    for &(ci, _) in &layout.numeric {
        let samples: Vec<f64> = neighborhood
            .iter()
            .filter_map(|&u| base.nodes[u].features.values()[ci].as_numeric())
            .collect();
        if samples.is_empty() {
            out.extend([Value::Missing, Value::Missing, Value::Missing]);
        } else {
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.extend([Value::Real(mean), Value::Real(min), Value::Real(max)]);
        }
    }
    for (ci, _, values) in &layout.categorical {
        let samples: Vec<&Value> = neighborhood
            .iter()
            .map(|&u| &base.nodes[u].features.values()[*ci])
            .filter(|v| !v.is_missing())
            .collect();
        for target in values {
            if samples.is_empty() {
                out.push(Value::Missing);
            } else {
                let hits = samples.iter().filter(|v| ***v == *target).count();
                out.push(Value::Real(hits as f64 / samples.len() as f64));
            }
        }
    }
    out
}

fn nfa_common(
    base: &Grable,
    neighborhoods: BTreeMap<String, Vec<BTreeSet<usize>>>,
    provenance: String,
) -> Grable {
    let mut g = Grable::empty(provenance);
    let layout = match nfa_layout(base) {
        Some(l) => l,
        None => return g, // empty base: empty trivial grable
    };
    let relations: Vec<String> = neighborhoods.keys().cloned().collect();
    let mut columns: Vec<String> = layout.row_schema.columns().to_vec();
    columns.extend(nfa_channels(&layout, &relations));
    let schema = Schema::new(columns).expect("channel names are fresh");
    for &v in &base.row_map {
        let mut values = base.nodes[v].features.values().to_vec();
        for rel in &relations {
            values.extend(aggregate_channels(base, &layout, &neighborhoods[rel][v]));
        }
        let id = g.push_node(ROW_TYPE, schema.clone(), Row::new(values));
        g.row_map.push(id);
    }
    g
}

/// Neighborhood feature aggregation: compiles one-hop inter-row statistics
/// of the base grable into row features and discards the graph. The output
/// is a trivial grable whose features are the original row followed, per
/// relation, by a co-incident row count channel and mean/min/max
/// (numerical) or one-hot-mean (categorical) aggregates.
pub fn apply_nfa(base: &Grable) -> Result<Grable, ConstructError> {
    let projections = row_projections(base)?;
    Ok(nfa_common(base, projections, format!("nfa({})", base.provenance)))
}

/// Time-aware variant: aggregates only over strictly earlier co-incident
/// rows within the window `w_seconds`.
pub fn apply_nfa_time(
    base: &Grable,
    time_column: &str,
    w_seconds: f64,
) -> Result<Grable, ConstructError> {
    let projections = row_projections(base)?;
    let row_schema = row_schema_of(base);
    let t_idx = row_schema
        .as_ref()
        .and_then(|s| s.index_of(time_column))
        .ok_or_else(|| ConstructError::UnknownColumn(time_column.to_string()))?;
    let mut times: HashMap<usize, i64> = HashMap::new();
    for &v in &base.row_map {
        let t = base.nodes[v].features.values()[t_idx]
            .as_timestamp()
            .ok_or(ConstructError::NotATimestamp {
                column: time_column.to_string(),
                node: v,
            })?;
        times.insert(v, t);
    }
    let filtered: BTreeMap<String, Vec<BTreeSet<usize>>> = projections
        .into_iter()
        .map(|(rel, per_node)| {
            let per_node = per_node
                .into_iter()
                .enumerate()
                .map(|(v, rows)| {
                    rows.into_iter()
                        .filter(|&u| {
                            let (tv, tu) = (times[&v], times[&u]);
                            tu < tv && (tv - tu) as f64 <= w_seconds
                        })
                        .collect()
                })
                .collect();
            (rel, per_node)
        })
        .collect();
    Ok(nfa_common(
        base,
        filtered,
        format!("nfa-time({},W={w_seconds})", base.provenance),
    ))
}
