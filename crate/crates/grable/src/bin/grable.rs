use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use grable::constructors::{self, Featurizer, Grable};
use grable::datagen::{self, GenConfig};
use grable::gml::{self, PredicateSet};
use grable::harness::{self, ExperimentConfig};
use grable::table::{self, Table, Value, ValueKind};
use grable::tasks::{self, CountMode, TaskKind};
use grable::bisim;

/// Tables, grables, logic and message passing from one binary.
#[derive(Parser)]
#[command(name = "grable", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic transaction table
    Gen {
        /// GenConfig as JSON; omit for the built-in defaults
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: String,
        /// Override the config seed (falls back to GRABLE_SEED)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label a CSV table and append a `label` column
    Label {
        input: String,
        #[arg(long)]
        out: String,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        hints: HintArgs,
    },
    /// Build a grable from a CSV table and write it as JSON
    Build {
        input: String,
        #[arg(long)]
        out: String,
        #[arg(long, value_enum)]
        constructor: ConstructorArg,
        /// Columns to leave out of incidence-style constructions
        #[arg(long)]
        exclude: Vec<String>,
        #[arg(long)]
        c1: Option<String>,
        #[arg(long)]
        c2: Option<String>,
        /// Feature-hash dimension for cell/token constructors
        #[arg(long, default_value_t = 32)]
        feat_dim: usize,
        #[arg(long)]
        time_column: Option<String>,
        #[arg(long)]
        window_seconds: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        hints: HintArgs,
    },
    /// Evaluate a logic formula over a grable JSON file
    Eval {
        /// Path to a file holding the formula text
        #[arg(long)]
        formula: String,
        #[arg(long)]
        grable: String,
        /// `rows` restricts output to row nodes; `all` prints every node
        #[arg(long, default_value = "rows")]
        nodes: String,
        /// Extra feature-equality predicate, as `Name:column:value`
        #[arg(long)]
        predicate: Vec<String>,
    },
    /// Print a separation witness and its refinement transcript
    CertifySeparation {
        #[command(flatten)]
        task: TaskArgs,
        /// Refinement budget k
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
    /// Run an experiment config and write its report
    Train {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment; with --assert, exit nonzero on a miss
    Run {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fail (exit 1) unless the asserted floors hold
        #[arg(long)]
        assert: bool,
        #[arg(long, default_value_t = 0.95)]
        min_test_auc: f64,
        #[arg(long, default_value_t = 0.0)]
        min_test_f1: f64,
    },
    /// Generate an adversarial stress set against a reference table
    Stress {
        /// Reference CSV the stress construction inverts
        #[arg(long)]
        reference: String,
        #[arg(long)]
        out: String,
        #[arg(long, default_value_t = 50)]
        groups: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        hints: HintArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstructorArg {
    Trivial,
    Incidence,
    ExtendedIncidence,
    Carte,
    Tarte,
    Tabpfn,
    Nfa,
    NfaTime,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Unique,
    Count,
    Double,
    Diamond,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gt,
    Eq,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Column for unique/count
    #[arg(long)]
    column: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "gt")]
    mode: ModeArg,
    #[arg(long)]
    c1: Option<String>,
    #[arg(long)]
    c2: Option<String>,
    /// Anchor value for double (required there; the choice is never implicit)
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Args)]
struct HintArgs {
    /// Column type hints, as `column:text|integer|real|timestamp`
    #[arg(long = "hint")]
    hints: Vec<String>,
}

fn fail(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::FAILURE
}

fn env_seed() -> Option<u64> {
    std::env::var("GRABLE_SEED").ok()?.parse().ok()
}

fn effective_seed(explicit: Option<u64>) -> Option<u64> {
    explicit.or_else(env_seed)
}

impl TaskArgs {
    fn to_task(&self) -> Result<TaskKind, String> {
        let need = |field: &Option<String>, name: &str| {
            field.clone().ok_or_else(|| format!("--{name} is required for this task"))
        };
        match self.task {
            TaskArg::Unique => Ok(TaskKind::Unique { column: need(&self.column, "column")? }),
            TaskArg::Count => Ok(TaskKind::Count {
                column: need(&self.column, "column")?,
                k: self.k.ok_or("--k is required for count")?,
                mode: match self.mode {
                    ModeArg::Gt => CountMode::Gt,
                    ModeArg::Eq => CountMode::Eq,
                },
            }),
            TaskArg::Double => Ok(TaskKind::Double {
                c1: need(&self.c1, "c1")?,
                c2: need(&self.c2, "c2")?,
                anchor: Value::Text(need(&self.anchor, "anchor")?),
            }),
            TaskArg::Diamond => Ok(TaskKind::Diamond {
                c1: need(&self.c1, "c1")?,
                c2: need(&self.c2, "c2")?,
            }),
        }
    }
}

impl HintArgs {
    fn to_map(&self) -> Result<BTreeMap<String, ValueKind>, String> {
        let mut map = BTreeMap::new();
        for hint in &self.hints {
            let (column, kind) = hint
                .split_once(':')
                .ok_or_else(|| format!("bad hint `{hint}`, expected column:kind"))?;
            let kind = match kind {
                "text" => ValueKind::Text,
                "integer" => ValueKind::Integer,
                "real" => ValueKind::Real,
                "timestamp" => ValueKind::Timestamp,
                other => return Err(format!("unknown kind `{other}`")),
            };
            map.insert(column.to_string(), kind);
        }
        Ok(map)
    }
}

fn read_table(path: &str, hints: &BTreeMap<String, ValueKind>) -> Result<Table, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    table::parse_table(&text, hints).map_err(|e| format!("{path}: {e}"))
}

fn write_file(path: &str, content: &str) -> Result<(), String> {
    std::fs::write(path, content).map_err(|e| format!("{path}: {e}"))
}

fn run() -> Result<ExitCode, String> {
    match Cli::parse().command {
        Command::Gen { config, out, seed } => {
            let mut cfg: GenConfig = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
                    serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))?
                }
                None => GenConfig::default(),
            };
            if let Some(s) = effective_seed(seed) {
                cfg.seed = s;
            }
            let t = datagen::generate_transactions(&cfg).map_err(|e| e.to_string())?;
            write_file(&out, &t.to_csv())?;
            eprintln!("wrote {} rows to {out}", t.n_rows());
        }
        Command::Label { input, out, task, hints } => {
            let task = task.to_task()?;
            let table = read_table(&input, &hints.to_map()?)?;
            let labels = tasks::label(&table, &task).map_err(|e| e.to_string())?;
            let labeled = datagen::LabeledTable { table, labels };
            write_file(&out, &labeled.to_csv_with_labels())?;
        }
        Command::Build {
            input,
            out,
            constructor,
            exclude,
            c1,
            c2,
            feat_dim,
            time_column,
            window_seconds,
            seed,
            hints,
        } => {
            let table = read_table(&input, &hints.to_map()?)?;
            let exclude: BTreeSet<String> = exclude.into_iter().collect();
            let featurizer = Featurizer {
                dim: feat_dim,
                seed: effective_seed(seed).unwrap_or(0),
            };
            let need = |o: Option<String>, n: &str| o.ok_or(format!("--{n} is required"));
            let g = match constructor {
                ConstructorArg::Trivial => constructors::build_trivial(&table),
                ConstructorArg::Incidence => {
                    constructors::build_incidence(&table, &exclude).map_err(|e| e.to_string())?
                }
                ConstructorArg::ExtendedIncidence => constructors::build_extended_incidence(
                    &table,
                    &exclude,
                    &need(c1, "c1")?,
                    &need(c2, "c2")?,
                )
                .map_err(|e| e.to_string())?,
                ConstructorArg::Carte => constructors::build_carte(&table, &featurizer),
                ConstructorArg::Tarte => constructors::build_tarte(&table, &featurizer),
                ConstructorArg::Tabpfn => constructors::build_tabpfn(&table, &featurizer),
                ConstructorArg::Nfa => {
                    let base = constructors::build_incidence(&table, &exclude)
                        .map_err(|e| e.to_string())?;
                    constructors::apply_nfa(&base).map_err(|e| e.to_string())?
                }
                ConstructorArg::NfaTime => {
                    let base = constructors::build_incidence(&table, &exclude)
                        .map_err(|e| e.to_string())?;
                    constructors::apply_nfa_time(
                        &base,
                        &need(time_column, "time-column")?,
                        window_seconds.ok_or("--window-seconds is required")?,
                    )
                    .map_err(|e| e.to_string())?
                }
            };
            let json = serde_json::to_string_pretty(&g).map_err(|e| e.to_string())?;
            write_file(&out, &json)?;
            eprintln!("{} nodes, {} edges", g.n_nodes(), g.n_edges());
        }
        Command::Eval { formula, grable, nodes, predicate } => {
            let text = std::fs::read_to_string(&formula).map_err(|e| format!("{formula}: {e}"))?;
            let f = gml::parse(text.trim()).map_err(|e| e.to_string())?;
            let g: Grable = {
                let text =
                    std::fs::read_to_string(&grable).map_err(|e| format!("{grable}: {e}"))?;
                serde_json::from_str(&text).map_err(|e| format!("{grable}: {e}"))?
            };
            let mut predicates = PredicateSet::standard();
            for spec in &predicate {
                let parts: Vec<&str> = spec.splitn(3, ':').collect();
                let [name, column, value] = parts[..] else {
                    return Err(format!("bad predicate `{spec}`, expected Name:column:value"));
                };
                predicates = predicates.with_feature_eq(
                    name,
                    column,
                    Value::Text(value.to_string()),
                );
            }
            let bits = gml::eval(&f, &g, &predicates).map_err(|e| e.to_string())?;
            match nodes.as_str() {
                "rows" => {
                    for (i, b) in gml::row_restriction(&g, &bits).iter().enumerate() {
                        println!("{i},{}", *b as u8);
                    }
                }
                "all" => {
                    for (i, b) in bits.iter().enumerate() {
                        println!("{i},{}", *b as u8);
                    }
                }
                other => return Err(format!("--nodes must be rows or all, got `{other}`")),
            }
        }
        Command::CertifySeparation { task, depth } => {
            let task = task.to_task()?;
            let TaskKind::Diamond { c1, c2 } = &task else {
                return Err("separation witnesses exist for the diamond task".into());
            };
            let witness = bisim::diamond_witness(depth);
            println!("# positive table (every row labeled 1)");
            print!("{}", witness.positive.to_csv());
            println!("# negative table (every row labeled 0)");
            print!("{}", witness.negative.to_csv());
            let pos_labels =
                tasks::label_diamond(&witness.positive, "c1", "c2").map_err(|e| e.to_string())?;
            let neg_labels =
                tasks::label_diamond(&witness.negative, "c1", "c2").map_err(|e| e.to_string())?;
            let labels_differ =
                pos_labels.iter().all(|&l| l == 1) && neg_labels.iter().all(|&l| l == 0);
            let empty = BTreeSet::new();
            let gp = constructors::build_incidence(&witness.positive, &empty)
                .map_err(|e| e.to_string())?;
            let gn = constructors::build_incidence(&witness.negative, &empty)
                .map_err(|e| e.to_string())?;
            let union = bisim::disjoint_union(&gp, &gn);
            let history = bisim::refine(&union, &PredicateSet::standard(), depth);
            println!("# refinement transcript (node colors per round, positive then negative)");
            for (round, colors) in history.iter().enumerate() {
                let rendered: Vec<String> = colors.iter().map(|c| c.to_string()).collect();
                println!("round {round}: {}", rendered.join(" "));
            }
            let last = history.last().expect("non-empty");
            let indistinct = gn
                .row_map
                .iter()
                .all(|&v| last[gp.row_map[0]] == last[gp.nodes.len() + v]);
            println!(
                "# columns ({c1},{c2}): labels differ: {labels_differ}; rows k-indistinguishable: {indistinct}"
            );
            println!("{}", if labels_differ && indistinct { "PASS" } else { "FAIL" });
            if !(labels_differ && indistinct) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train { config, out, seed } => {
            let report = run_config(&config, out.as_deref(), seed)?;
            println!("{}", report.to_csv_summary());
        }
        Command::Run { config, out, seed, assert, min_test_auc, min_test_f1 } => {
            let report = run_config(&config, out.as_deref(), seed)?;
            println!("{}", report.to_csv_summary());
            if assert {
                let pass =
                    report.median.test_auc >= min_test_auc && report.median.test_f1 >= min_test_f1;
                println!(
                    "ASSERT {}: median test auc {} (floor {min_test_auc}), f1 {} (floor {min_test_f1})",
                    if pass { "PASS" } else { "FAIL" },
                    report.median.test_auc,
                    report.median.test_f1
                );
                if !pass {
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Stress { reference, out, groups, seed, task, hints } => {
            let task = task.to_task()?;
            let reference = read_table(&reference, &hints.to_map()?)?;
            let stress = datagen::generate_stress_set(
                &task,
                &reference,
                groups,
                effective_seed(seed).unwrap_or(0),
            )
            .map_err(|e| e.to_string())?;
            write_file(&out, &stress.to_csv_with_labels())?;
            eprintln!("wrote {} stress rows to {out}", stress.table.n_rows());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_config(
    path: &str,
    out: Option<&str>,
    seed: Option<u64>,
) -> Result<harness::Report, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))?;
    if let Some(s) = effective_seed(seed) {
        config.seeds = vec![s];
    }
    if let Some(out) = out {
        config.report_path = Some(out.to_string());
    }
    harness::run_experiment(&config).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(message) => fail(message),
    }
}
