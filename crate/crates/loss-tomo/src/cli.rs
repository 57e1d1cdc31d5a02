//! Command-line front end: `simulate`, `classify`, `estimate`, `oracle`, and
//! `experiment` subcommands over the topology and observation text formats.
//!
//! Every subcommand is a pure function of its inputs and seeds: identical
//! invocations write identical bytes. Exit codes: 0 success (including
//! partial results carried as flags), 2 usage error, 3 input format error,
//! 4 total estimation failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::classifier::{classify_node, report_line};
use crate::estimators::{estimate_tree, SolverOptions, TreeEstimates};
use crate::multisource::estimate_general;
use crate::oracle::exact_loglik;
use crate::simulator::{simulate_general, simulate_tree, ObservationMatrix};
use crate::statistics::{pooled_stats, NodeStats, ReachIndicators};
use crate::topology::{GeneralTopology, LinkParams, MulticastTree};

#[derive(Parser)]
#[command(
    name = "loss-tomo",
    version,
    about = "Multicast loss tomography toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EstimatorFlags {
    /// Perfect-class fan-out at which the grouped closed form takes over.
    #[arg(long, default_value_t = 5)]
    grouping_threshold: usize,
    /// Tolerance on the likelihood-equation residual.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Subset enumeration cap for missing-term discovery.
    #[arg(long, default_value_t = 16)]
    enumeration_cap: usize,
}

impl EstimatorFlags {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            grouping_threshold: self.grouping_threshold,
            enumeration_cap: self.enumeration_cap,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate probing and write observation files for each (n, seed) pair.
    Simulate {
        /// Topology file.
        #[arg(long)]
        topology: PathBuf,
        /// Probe counts, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        /// Seeds, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        seed: Vec<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Treat the topology as a multi-source general topology.
        #[arg(long)]
        general: bool,
    },
    /// Classify each internal node's observation.
    Classify {
        #[arg(long)]
        topology: PathBuf,
        /// Observation file produced by `simulate`.
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        general: bool,
        /// Also dump the materialized intersection counts per node.
        #[arg(long)]
        dump_stats: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate path and link pass rates.
    Estimate {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        general: bool,
        #[command(flatten)]
        estimator: EstimatorFlags,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the exact log-likelihood profile of one node as CSV.
    Oracle {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        /// Node whose likelihood to profile.
        #[arg(long)]
        node: String,
        /// Profile resolution.
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run simulate -> classify -> estimate over an (n, seed) grid and
    /// summarize.
    Experiment {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        general: bool,
        #[command(flatten)]
        estimator: EstimatorFlags,
    },
}

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn format(msg: impl ToString) -> Self {
        CliError {
            code: 3,
            msg: msg.to_string(),
        }
    }

    fn total_failure(msg: impl ToString) -> Self {
        CliError {
            code: 4,
            msg: msg.to_string(),
        }
    }
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate {
            topology,
            n,
            seed,
            out,
            general,
        } => cmd_simulate(&topology, &n, &seed, &out, general),
        Command::Classify {
            topology,
            obs,
            general,
            dump_stats,
            out,
        } => cmd_classify(&topology, &obs, general, dump_stats, out.as_deref()),
        Command::Estimate {
            topology,
            obs,
            general,
            estimator,
            out,
        } => cmd_estimate(
            &topology,
            &obs,
            general,
            &estimator.options(),
            out.as_deref(),
        ),
        Command::Oracle {
            topology,
            obs,
            node,
            points,
            out,
        } => cmd_oracle(&topology, &obs, &node, points, out.as_deref()),
        Command::Experiment {
            topology,
            n,
            seed,
            out,
            general,
            estimator,
        } => cmd_experiment(&topology, &n, &seed, &out, general, &estimator.options()),
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::format(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::format(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, content)
        .map_err(|e| CliError::format(format!("cannot write {}: {e}", path.display())))
}

fn load_general(path: &Path) -> Result<GeneralTopology, CliError> {
    GeneralTopology::parse(&read_file(path)?).map_err(CliError::format)
}

fn load_tree(path: &Path) -> Result<MulticastTree, CliError> {
    MulticastTree::parse(&read_file(path)?).map_err(CliError::format)
}

fn load_obs(path: &Path, topo: &GeneralTopology) -> Result<ObservationMatrix, CliError> {
    let receivers: Vec<String> = topo
        .receiver_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    ObservationMatrix::parse(&read_file(path)?, receivers).map_err(CliError::format)
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, content),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn obs_file_name(n: usize, seed: u64) -> String {
    format!("obs_n{n}_seed{seed}.txt")
}

fn cmd_simulate(
    topology: &Path,
    ns: &[usize],
    seeds: &[u64],
    out: &Path,
    general: bool,
) -> Result<(), CliError> {
    let topo = load_general(topology)?;
    let params = LinkParams::from_topology(&topo).map_err(CliError::format)?;
    let tree = if general {
        None
    } else {
        Some(load_tree(topology)?)
    };
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::format(format!("cannot create {}: {e}", out.display())))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "command = simulate");
    let _ = writeln!(manifest, "topology = {}", topology.display());
    let _ = writeln!(manifest, "general = {general}");
    let _ = writeln!(manifest, "n = {}", join(ns));
    let _ = writeln!(manifest, "seed = {}", join(seeds));
    for &n in ns {
        for &seed in seeds {
            let obs = match &tree {
                Some(t) => simulate_tree(t, &params, n, seed).map_err(CliError::format)?,
                None => {
                    let mut per = BTreeMap::new();
                    for &s in topo.sources() {
                        per.insert(topo.node_name(s).to_string(), n);
                    }
                    simulate_general(&topo, &params, &per, seed).map_err(CliError::format)?
                }
            };
            let name = obs_file_name(n, seed);
            write_file(&out.join(&name), &obs.serialize())?;
            let _ = writeln!(manifest, "output = {name} n={n} seed={seed}");
        }
    }
    write_file(&out.join("manifest.txt"), &manifest)
}

fn tree_node_stats(
    obs: &ObservationMatrix,
    topo: &GeneralTopology,
    node: usize,
    cap: usize,
) -> Result<NodeStats, CliError> {
    let ind = ReachIndicators::for_node_rows(obs, topo, node, 0, obs.n_probes())
        .map_err(CliError::format)?;
    NodeStats::from_indicators(&ind, cap).map_err(CliError::format)
}

fn cmd_classify(
    topology: &Path,
    obs_path: &Path,
    general: bool,
    dump_stats: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let topo = load_general(topology)?;
    let obs = load_obs(obs_path, &topo)?;
    if obs.n_probes() == 0 {
        return Err(CliError::format(
            "observation file has zero probes: empty observation",
        ));
    }
    let mut report = String::new();
    let mut dumps = String::new();
    let internal: Vec<usize> = topo
        .topo_order()
        .iter()
        .copied()
        .filter(|&v| !topo.children(v).is_empty() && !topo.sources().contains(&v))
        .collect();
    for v in internal {
        let name = topo.node_name(v).to_string();
        let mut stats = if general {
            pooled_stats(&obs, &topo, &name, 16)
                .map_err(CliError::format)?
                .pooled
        } else {
            tree_node_stats(&obs, &topo, v, 16)?
        };
        match classify_node(&mut stats) {
            Ok((class, parts, me)) => {
                let _ = writeln!(report, "{}", report_line(&stats, class, &parts, &me));
            }
            Err(e) => {
                let _ = writeln!(report, "{name} no-information error={e}");
            }
        }
        if dump_stats {
            dumps.push_str(&stats.dump());
        }
    }
    if dump_stats {
        report.push_str(&dumps);
    }
    emit(out, &report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn sanitize(msg: &str) -> String {
    msg.replace(',', ";")
}

fn tree_estimate_csv(est: &TreeEstimates, truth: Option<&LinkParams>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "node,class,method,A_hat,residual,iterations,flags");
    for (name, r) in &est.nodes {
        match r {
            Ok(e) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:e},{},{}",
                    name,
                    e.class.as_str(),
                    e.method.as_str(),
                    e.a_hat,
                    e.residual,
                    e.iterations,
                    e.flags.join(";")
                );
            }
            Err(f) => {
                let _ = writeln!(
                    out,
                    "{},{},,,,,{}",
                    name,
                    f.class.map(|c| c.as_str()).unwrap_or("unclassified"),
                    sanitize(&f.message)
                );
            }
        }
    }
    if truth.is_some() {
        let _ = writeln!(
            out,
            "link,pass_rate_hat,loss_rate_hat,true_pass_rate,abs_error,flags"
        );
    } else {
        let _ = writeln!(out, "link,pass_rate_hat,loss_rate_hat,flags");
    }
    for l in &est.links {
        match truth {
            Some(t) => {
                let tr = t.rate(&l.link);
                let err = match (l.pass_rate, tr) {
                    (Some(p), Some(tv)) => Some((p - tv).abs()),
                    _ => None,
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    l.link,
                    fmt_opt(l.pass_rate),
                    fmt_opt(l.loss_rate()),
                    fmt_opt(tr),
                    fmt_opt(err),
                    l.flags.join(";")
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    l.link,
                    fmt_opt(l.pass_rate),
                    fmt_opt(l.loss_rate()),
                    l.flags.join(";")
                );
            }
        }
    }
    out
}

fn cmd_estimate(
    topology: &Path,
    obs_path: &Path,
    general: bool,
    opts: &SolverOptions,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let topo = load_general(topology)?;
    let obs = load_obs(obs_path, &topo)?;
    let truth = LinkParams::from_topology(&topo).ok();
    if general {
        let ge = estimate_general(&obs, &topo, opts).map_err(CliError::format)?;
        let mut text = String::new();
        let _ = writeln!(
            text,
            "node,obs_class,x_hat,residual,iterations,per_source_A,warnings"
        );
        for (name, j) in &ge.joints {
            let per: Vec<String> = j
                .per_source_a
                .iter()
                .map(|(s, a)| format!("{s}={a}"))
                .collect();
            let _ = writeln!(
                text,
                "{},{},{},{:e},{},{},{}",
                name,
                j.obs_class.as_str().replace(',', ";"),
                j.x_hat,
                j.residual,
                j.iterations,
                per.join(";"),
                j.warnings.join(";").replace(',', ";")
            );
        }
        for b in &ge.blocked {
            let _ = writeln!(text, "{},blocked,,,,,{}", b.node, sanitize(&b.reason));
        }
        let _ = writeln!(
            text,
            "link,pass_rate_hat,loss_rate_hat,true_pass_rate,abs_error,flags"
        );
        let mut all_failed = true;
        for l in &ge.links {
            let tr = truth.as_ref().and_then(|t| t.rate(&l.link));
            let err = match (l.pass_rate, tr) {
                (Some(p), Some(tv)) => Some((p - tv).abs()),
                _ => None,
            };
            if l.pass_rate.is_some() {
                all_failed = false;
            }
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                l.link,
                fmt_opt(l.pass_rate),
                fmt_opt(l.pass_rate.map(|p| 1.0 - p)),
                fmt_opt(tr),
                fmt_opt(err),
                l.flags.join(";")
            );
        }
        let _ = writeln!(text, "# decomposition");
        for t in &ge.decomposition_text {
            for line in t.lines() {
                let _ = writeln!(text, "# {line}");
            }
            let _ = writeln!(text, "#");
        }
        emit(out, &text)?;
        if all_failed {
            return Err(CliError::total_failure("no link could be estimated"));
        }
        Ok(())
    } else {
        let tree = load_tree(topology)?;
        let est = estimate_tree(&obs, &tree, opts).map_err(CliError::format)?;
        let text = tree_estimate_csv(&est, truth.as_ref());
        emit(out, &text)?;
        let total = est.nodes.len();
        let failed = est.failed_nodes().len();
        if total > 0 && failed == total {
            return Err(CliError::total_failure(format!(
                "all {total} internal nodes failed estimation"
            )));
        }
        Ok(())
    }
}

fn cmd_oracle(
    topology: &Path,
    obs_path: &Path,
    node: &str,
    points: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let topo = load_general(topology)?;
    let obs = load_obs(obs_path, &topo)?;
    let ix = topo.node_index(node).map_err(CliError::format)?;
    let mut stats = tree_node_stats(&obs, &topo, ix, 16)?;
    let (class, parts, me) = classify_node(&mut stats).map_err(CliError::format)?;
    let ll = exact_loglik(class, &stats, &parts, &me).map_err(CliError::format)?;
    let mut text = String::new();
    let _ = writeln!(text, "A,loglik");
    let step = (ll.hi - ll.lo) / (points.max(2) - 1) as f64;
    for i in 0..points.max(2) {
        let a = ll.lo + i as f64 * step;
        let v = ll.eval(a);
        let _ = writeln!(text, "{a},{v}");
    }
    emit(out, &text)
}

struct CellResult {
    n: usize,
    seed: u64,
    class_counts: BTreeMap<&'static str, u64>,
    method_counts: BTreeMap<&'static str, u64>,
    failed_nodes: u64,
    abs_errors: Vec<f64>,
    obs_text: String,
    result_text: String,
}

fn run_cell(
    topo: &GeneralTopology,
    tree: Option<&MulticastTree>,
    params: &LinkParams,
    n: usize,
    seed: u64,
    general: bool,
    opts: &SolverOptions,
) -> Result<CellResult, CliError> {
    let truth = params;
    let obs = match tree {
        Some(t) => simulate_tree(t, params, n, seed).map_err(CliError::format)?,
        None => {
            let mut per = BTreeMap::new();
            for &s in topo.sources() {
                per.insert(topo.node_name(s).to_string(), n);
            }
            simulate_general(topo, params, &per, seed).map_err(CliError::format)?
        }
    };
    let mut class_counts = BTreeMap::new();
    let mut method_counts = BTreeMap::new();
    let mut failed_nodes = 0u64;
    let mut abs_errors = Vec::new();
    let result_text = if general {
        let ge = estimate_general(&obs, topo, opts).map_err(CliError::format)?;
        for j in ge.joints.values() {
            *class_counts.entry(j.obs_class.as_str()).or_insert(0) += 1;
        }
        failed_nodes += ge.blocked.len() as u64;
        for (_, te) in &ge.tree_estimates {
            for r in te.nodes.values() {
                match r {
                    Ok(e) => {
                        *method_counts.entry(e.method.as_str()).or_insert(0) += 1;
                    }
                    Err(_) => failed_nodes += 1,
                }
            }
        }
        let mut text = String::new();
        let _ = writeln!(text, "link,pass_rate_hat,true_pass_rate,abs_error,flags");
        for l in &ge.links {
            let tr = truth.rate(&l.link);
            let err = match (l.pass_rate, tr) {
                (Some(p), Some(t)) => {
                    abs_errors.push((p - t).abs());
                    Some((p - t).abs())
                }
                _ => None,
            };
            let _ = writeln!(
                text,
                "{},{},{},{},{}",
                l.link,
                fmt_opt(l.pass_rate),
                fmt_opt(tr),
                fmt_opt(err),
                l.flags.join(";")
            );
        }
        let _ = writeln!(text, "# decomposition");
        for t in &ge.decomposition_text {
            for line in t.lines() {
                let _ = writeln!(text, "# {line}");
            }
            let _ = writeln!(text, "#");
        }
        text
    } else {
        let est = estimate_tree(&obs, tree.unwrap(), opts).map_err(CliError::format)?;
        for r in est.nodes.values() {
            match r {
                Ok(e) => {
                    *class_counts.entry(e.class.as_str()).or_insert(0) += 1;
                    *method_counts.entry(e.method.as_str()).or_insert(0) += 1;
                }
                Err(f) => {
                    failed_nodes += 1;
                    let label = f.class.map(|c| c.as_str()).unwrap_or("complete-exclusion");
                    *class_counts.entry(label).or_insert(0) += 1;
                }
            }
        }
        for l in &est.links {
            if let (Some(p), Some(t)) = (l.pass_rate, truth.rate(&l.link)) {
                abs_errors.push((p - t).abs());
            }
        }
        tree_estimate_csv(&est, Some(truth))
    };
    Ok(CellResult {
        n,
        seed,
        class_counts,
        method_counts,
        failed_nodes,
        abs_errors,
        obs_text: obs.serialize(),
        result_text,
    })
}

const CLASS_COLUMNS: [&str; 6] = [
    "perfect",
    "chained-only",
    "partition-only",
    "chained-partition",
    "complete-exclusion",
    "(perfect, perfect)",
];
const METHOD_COLUMNS: [&str; 5] = [
    "perfect-poly",
    "grouped-closed-form",
    "chained-poly",
    "partition-pooled",
    "chained-partition-poly",
];

fn cmd_experiment(
    topology: &Path,
    ns: &[usize],
    seeds: &[u64],
    out: &Path,
    general: bool,
    opts: &SolverOptions,
) -> Result<(), CliError> {
    let topo = load_general(topology)?;
    let tree = if general {
        None
    } else {
        Some(load_tree(topology)?)
    };
    let params = LinkParams::from_topology(&topo).map_err(CliError::format)?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::format(format!("cannot create {}: {e}", out.display())))?;
    let mut cells: Vec<(usize, u64)> = Vec::new();
    for &n in ns {
        for &seed in seeds {
            cells.push((n, seed));
        }
    }
    let results: Vec<Result<CellResult, CliError>> = cells
        .par_iter()
        .map(|&(n, seed)| run_cell(&topo, tree.as_ref(), &params, n, seed, general, opts))
        .collect();
    let mut ok_cells = Vec::new();
    let mut failed_cells = 0u64;
    for r in results {
        match r {
            Ok(c) => ok_cells.push(c),
            Err(_) => failed_cells += 1,
        }
    }
    ok_cells.sort_by_key(|c| (c.n, c.seed));
    for c in &ok_cells {
        write_file(&out.join(obs_file_name(c.n, c.seed)), &c.obs_text)?;
        write_file(
            &out.join(format!("results_n{}_seed{}.csv", c.n, c.seed)),
            &c.result_text,
        )?;
    }

    let mut summary = String::new();
    let _ = write!(summary, "n,cells,mae");
    for c in CLASS_COLUMNS {
        let _ = write!(summary, ",class:{}", c.replace(',', ";"));
    }
    for m in METHOD_COLUMNS {
        let _ = write!(summary, ",method:{m}");
    }
    let _ = writeln!(summary, ",failed_nodes");
    let mut sorted_ns: Vec<usize> = ns.to_vec();
    sorted_ns.sort_unstable();
    sorted_ns.dedup();
    for &n in &sorted_ns {
        let group: Vec<&CellResult> = ok_cells.iter().filter(|c| c.n == n).collect();
        let errs: Vec<f64> = group
            .iter()
            .flat_map(|c| c.abs_errors.iter().copied())
            .collect();
        let mae = if errs.is_empty() {
            String::new()
        } else {
            format!("{}", errs.iter().sum::<f64>() / errs.len() as f64)
        };
        let _ = write!(summary, "{n},{},{mae}", group.len());
        for cc in CLASS_COLUMNS {
            let total: u64 = group
                .iter()
                .map(|c| c.class_counts.get(cc).copied().unwrap_or(0))
                .sum();
            let _ = write!(summary, ",{total}");
        }
        for mc in METHOD_COLUMNS {
            let total: u64 = group
                .iter()
                .map(|c| c.method_counts.get(mc).copied().unwrap_or(0))
                .sum();
            let _ = write!(summary, ",{total}");
        }
        let failed: u64 = group.iter().map(|c| c.failed_nodes).sum();
        let _ = writeln!(summary, ",{failed}");
    }
    write_file(&out.join("summary.csv"), &summary)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "command = experiment");
    let _ = writeln!(manifest, "topology = {}", topology.display());
    let _ = writeln!(manifest, "general = {general}");
    let _ = writeln!(manifest, "n = {}", join(ns));
    let _ = writeln!(manifest, "seed = {}", join(seeds));
    let _ = writeln!(manifest, "tol = {}", opts.tol);
    let _ = writeln!(manifest, "grouping_threshold = {}", opts.grouping_threshold);
    let _ = writeln!(manifest, "enumeration_cap = {}", opts.enumeration_cap);
    let _ = writeln!(manifest, "failed_cells = {failed_cells}");
    for c in &ok_cells {
        let _ = writeln!(
            manifest,
            "cell = n={} seed={} obs={} results=results_n{}_seed{}.csv",
            c.n,
            c.seed,
            obs_file_name(c.n, c.seed),
            c.n,
            c.seed
        );
    }
    write_file(&out.join("manifest.txt"), &manifest)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
