use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use latentplan::trainer::{EvalStats, TrainLog};

use crate::commands::{EvalSummary, LOG_FILE, RETURNS_FILE, SUMMARY_FILE};
use crate::manifest::{io_err, status_path, write_text, RunManifest, RunStatus};
use crate::Failure;

pub const TABLE_FILE: &str = "table.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const LOSS_CURVES_FILE: &str = "loss_curves.csv";
pub const RETURN_CURVES_FILE: &str = "return_curves.csv";
pub const ISSUES_FILE: &str = "report_issues.txt";

/// Table rows are ordered like the usual results table: learned models first, then the oracle.
fn method_rank(method: &str) -> usize {
    ["reward", "state_pred", "deepmdp", "oracle"]
        .iter()
        .position(|m| *m == method)
        .unwrap_or(usize::MAX)
}

type GroupKey = (usize, String, usize);

fn group_key(method: &str, n: usize) -> GroupKey {
    (method_rank(method), method.to_string(), n)
}

#[derive(Default)]
struct EvalGroup {
    runs: usize,
    returns: Vec<f64>,
}

struct Curve {
    run: String,
    command: String,
    method: String,
    n_pendulums: usize,
    seed: u64,
    log: TrainLog,
}

fn find_manifests(dir: &Path, found: &mut Vec<PathBuf>, orphans: &mut Vec<PathBuf>) -> Result<(), Failure> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    let mut has_manifest = false;
    let mut has_outputs = false;
    for path in entries {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_dir() {
            find_manifests(&path, found, orphans)?;
        } else if name.starts_with("manifest-") && name.ends_with(".json") {
            has_manifest = true;
            found.push(path);
        } else if name == LOG_FILE || name == SUMMARY_FILE {
            has_outputs = true;
        }
    }
    if has_outputs && !has_manifest {
        orphans.push(dir.to_path_buf());
    }
    Ok(())
}

fn label(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    if rel.as_os_str().is_empty() {
        ".".into()
    } else {
        rel.to_string_lossy().replace('\\', "/")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let s = EvalStats::from_returns(xs.to_vec());
    (s.mean, s.std)
}

/// Aggregates every manifest under `runs` into result tables and curve data written to `out`.
///
/// Runs with a corrupt or missing manifest, failed status or missing outputs are skipped
/// and listed; the remaining runs are still aggregated, and the command then fails with an
/// I/O error.
pub fn report(runs: &Path, out: &Path) -> Result<(), Failure> {
    if !runs.is_dir() {
        return Err(Failure::Io(format!("{}: not a directory", runs.display())));
    }
    let (mut paths, mut orphans) = (Vec::new(), Vec::new());
    find_manifests(runs, &mut paths, &mut orphans)?;
    let mut issues: Vec<String> =
        orphans.iter().map(|d| format!("{}: outputs without a manifest", label(runs, d))).collect();
    if paths.is_empty() {
        return Err(Failure::Validation(format!("no run manifests under {}", runs.display())));
    }

    let mut evals: BTreeMap<GroupKey, EvalGroup> = BTreeMap::new();
    let mut curves = Vec::new();
    for path in &paths {
        let dir = path.parent().unwrap_or(runs);
        let run = label(runs, dir);
        let m = match RunManifest::load(path) {
            Ok(m) => m,
            Err(e) => {
                issues.push(format!("{run}: corrupt manifest: {e}"));
                continue;
            }
        };
        match read_status(dir, &m.command) {
            Ok(s) if s.success => {}
            Ok(s) => {
                issues.push(format!("{run}: {} failed: {}", m.command, s.error.unwrap_or_default()));
                continue;
            }
            Err(e) => {
                issues.push(format!("{run}: {} did not finish: {e}", m.command));
                continue;
            }
        }
        let missing: Vec<String> =
            m.outputs.values().filter(|p| !dir.join(p).exists()).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            issues.push(format!("{run}: missing outputs {}", missing.join(", ")));
            continue;
        }
        let n = m.config.env.n_pendulums;
        match m.command.as_str() {
            "eval" => match read_eval(dir) {
                Ok((summary, returns)) => {
                    let g = evals.entry(group_key(&summary.method, summary.n_pendulums)).or_default();
                    g.runs += 1;
                    g.returns.extend(returns);
                }
                Err(e) => issues.push(format!("{run}: {e}")),
            },
            "train-offline" | "train-online" => {
                let log_path = dir.join(LOG_FILE);
                let log = std::fs::read_to_string(&log_path)
                    .map_err(|e| e.to_string())
                    .and_then(|t| TrainLog::from_csv(&t).map_err(|e| e.to_string()));
                match log {
                    Ok(log) => curves.push(Curve {
                        run: run.clone(),
                        command: m.command.clone(),
                        method: m.method.clone(),
                        n_pendulums: n,
                        seed: m.seed,
                        log,
                    }),
                    Err(e) => issues.push(format!("{run}: {LOG_FILE}: {e}")),
                }
            }
            _ => {}
        }
    }

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join(TABLE_FILE), &table_csv(&evals))?;
    write_text(&out.join(CURVES_FILE), &curves_csv(&curves))?;
    write_text(&out.join(LOSS_CURVES_FILE), &loss_curves_csv(&curves))?;
    write_text(&out.join(RETURN_CURVES_FILE), &return_curves_csv(&curves))?;
    let issues_path = out.join(ISSUES_FILE);
    if issues.is_empty() {
        if issues_path.exists() {
            std::fs::remove_file(&issues_path).map_err(io_err(&issues_path))?;
        }
    } else {
        write_text(&issues_path, &(issues.join("\n") + "\n"))?;
    }
    println!(
        "{}",
        serde_json::json!({
            "manifests": paths.len(),
            "table_rows": evals.len(),
            "curves": curves.len(),
            "issues": issues.len(),
        })
    );
    if issues.is_empty() {
        Ok(())
    } else {
        for i in &issues {
            eprintln!("{i}");
        }
        Err(Failure::Io(format!("{} run(s) could not be read; see {}", issues.len(), issues_path.display())))
    }
}

fn read_status(dir: &Path, command: &str) -> Result<RunStatus, String> {
    let path = status_path(dir, command);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_eval(dir: &Path) -> Result<(EvalSummary, Vec<f64>), String> {
    let text = std::fs::read_to_string(dir.join(SUMMARY_FILE)).map_err(|e| format!("{SUMMARY_FILE}: {e}"))?;
    let summary: EvalSummary = serde_json::from_str(&text).map_err(|e| format!("{SUMMARY_FILE}: {e}"))?;
    let text = std::fs::read_to_string(dir.join(RETURNS_FILE)).map_err(|e| format!("{RETURNS_FILE}: {e}"))?;
    let returns = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().and_then(|v| v.parse::<f64>().ok()))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| format!("{RETURNS_FILE}: malformed row"))?;
    if returns.len() != summary.episodes {
        return Err(format!("{RETURNS_FILE} has {} rows, summary says {}", returns.len(), summary.episodes));
    }
    Ok((summary, returns))
}

fn table_csv(evals: &BTreeMap<GroupKey, EvalGroup>) -> String {
    let mut s = String::from("method,n_pendulums,runs,episodes,mean_return,std_return,mean_std\n");
    for ((_, method, n), g) in evals {
        let (mean, std) = mean_std(&g.returns);
        writeln!(s, "{method},{n},{},{},{mean},{std},{mean:.2}({std:.2})", g.runs, g.returns.len()).expect("String");
    }
    s
}

fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from(
        "run,command,method,n_pendulums,seed,iteration,env_steps,train_loss,eval_loss_10step,explore_return,eval_return\n",
    );
    for c in curves {
        for r in &c.log.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.run,
                c.command,
                c.method,
                c.n_pendulums,
                c.seed,
                r.iteration,
                r.env_steps,
                r.train_loss,
                r.eval_loss_10step,
                opt(r.explore_return),
                opt(r.eval_return)
            )
            .expect("String");
        }
    }
    s
}

type CurveKey = (String, usize, String, usize, u64, usize);

/// Mean and std over runs of one column, grouped by method, N, command, rank and (iteration, env steps).
fn aggregate<F: Fn(&latentplan::trainer::LogRecord) -> Option<f64>>(
    curves: &[Curve],
    column: F,
) -> BTreeMap<CurveKey, Vec<f64>> {
    let mut groups: BTreeMap<CurveKey, Vec<f64>> = BTreeMap::new();
    for c in curves {
        for r in &c.log.records {
            if let Some(v) = column(r) {
                let key = (c.command.clone(), method_rank(&c.method), c.method.clone(), c.n_pendulums, r.env_steps, r.iteration);
                groups.entry(key).or_default().push(v);
            }
        }
    }
    groups
}

fn loss_curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("command,method,n_pendulums,iteration,env_steps,runs,mean_eval_loss_10step,std_eval_loss_10step\n");
    for ((command, _, method, n, steps, it), xs) in aggregate(curves, |r| Some(r.eval_loss_10step)) {
        let (mean, std) = mean_std(&xs);
        writeln!(s, "{command},{method},{n},{it},{steps},{},{mean},{std}", xs.len()).expect("String");
    }
    s
}

fn return_curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("command,method,n_pendulums,iteration,env_steps,runs,mean_eval_return,std_eval_return\n");
    for ((command, _, method, n, steps, it), xs) in aggregate(curves, |r| r.eval_return) {
        let (mean, std) = mean_std(&xs);
        writeln!(s, "{command},{method},{n},{it},{steps},{},{mean},{std}", xs.len()).expect("String");
    }
    s
}
