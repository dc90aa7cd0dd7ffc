use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use tracediag_core::causal::{diagnose as run_diagnose, DiagnosisReport};
use tracediag_core::indicators::{compute_indicators, compute_indicators_with};
use tracediag_core::ingest::{aggregate as run_aggregate, keep_trace, load_traces, sample_traces, SpanFormat};
use tracediag_core::metrics::{hit_root_cause, pr_at_k, pr_avg, rca_rank_score};
use tracediag_core::pruning::{execute, FilteringTree, TreeFile};
use tracediag_core::rl::{train_ppo_from, EpisodeLog, PolicyFile};
use tracediag_core::simgen::{case_seeds, generate_case_with};
use tracediag_core::trace::{ComponentId, IncidentCase, Interval, WindowPair};

use crate::config::Config;
use crate::failure::Failure;
use crate::{AggregateArgs, DiagnoseArgs, EvaluateArgs, IndicatorsArgs, PruneArgs, SimulateArgs, TrainArgs};

pub const POLICY_FILE: &str = "policy.json";
pub const TREE_FILE: &str = "tree.json";
pub const LOG_FILE: &str = "train_log.csv";

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let file = File::open(path).map_err(|e| Failure::input(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Failure::input(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| Failure::output(path, e))?;
    let mut w = BufWriter::new(file);
    let res = if pretty {
        serde_json::to_writer_pretty(&mut w, value)
    } else {
        serde_json::to_writer(&mut w, value)
    };
    res.map_err(|e| Failure::output(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Failure::output(path, e))
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::pipeline(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::output(dir, e))
}

fn read_tree(path: &Path) -> Result<FilteringTree, Failure> {
    let file: TreeFile = read_json(path)?;
    file.into_tree().map_err(|e| Failure::input(path, e))
}

/// Case files in `dir`, sorted by name. Span files (`.jsonl`) are ignored.
fn case_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::input(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Failure::input(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Failure::usage(format!("{}: no case files", dir.display())));
    }
    Ok(files)
}

fn load_cases(dir: &Path) -> Result<Vec<IncidentCase>, Failure> {
    case_files(dir)?.iter().map(|p| read_json(p)).collect()
}

pub fn simulate(cfg: &Config, args: &SimulateArgs) -> Result<(), Failure> {
    let n = args.cases.unwrap_or(cfg.simulate.cases);
    if n == 0 {
        return Err(Failure::usage("--cases must be positive"));
    }
    create_dir(&args.out)?;
    let rate = cfg.simulate.span_sample_rate;
    for gen in case_seeds(&cfg.simulate.generator, n) {
        let tmp = args.out.join(format!(".spans-{:016x}.tmp", gen.seed));
        let file = File::create(&tmp).map_err(|e| Failure::output(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let case = generate_case_with(&gen, |t| {
            if keep_trace(&t.trace_id, rate, gen.seed) {
                for s in &t.spans {
                    serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
                    w.write_all(b"\n")?;
                }
            }
            Ok(())
        })
        .map_err(|e| Failure::pipeline(format!("simulate: {e}")))?;
        w.flush().map_err(|e| Failure::output(&tmp, e))?;
        drop(w);
        let spans = args.out.join(format!("{}.spans.jsonl", case.case_id));
        fs::rename(&tmp, &spans).map_err(|e| Failure::output(&spans, e))?;
        let path = args.out.join(format!("{}.json", case.case_id));
        write_json(&path, &case, true)?;
        log::info!(
            "{}: {} components, root causes {:?}",
            path.display(),
            case.graph.node_count(),
            case.root_causes()
        );
    }
    Ok(())
}

fn parse_interval(s: &str) -> Result<Interval, Failure> {
    let bad = || Failure::usage(format!("window {s:?} is not START:END in ms"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let start = a.trim().parse().map_err(|_| bad())?;
    let end = b.trim().parse().map_err(|_| bad())?;
    Ok(Interval::new(start, end))
}

pub fn aggregate(cfg: &Config, args: &AggregateArgs, seed: u64) -> Result<(), Failure> {
    let windows = WindowPair::new(parse_interval(&args.base)?, parse_interval(&args.alert)?)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let loaded = load_traces(&args.spans, SpanFormat::Jsonl).map_err(|e| Failure::input(&args.spans, e))?;
    if !loaded.skipped.is_empty() {
        log::warn!("skipped {} malformed traces", loaded.skipped.len());
    }
    let traces: Vec<_> = sample_traces(loaded.traces, cfg.aggregate.sample_rate, seed)
        .map_err(|e| Failure::usage(e.to_string()))?
        .collect();
    let graph = run_aggregate(&traces, windows, cfg.aggregate.bucket_ms)
        .map_err(|e| Failure::pipeline(format!("aggregate: {e}")))?;
    let truth: BTreeSet<ComponentId> = args.root_causes.iter().map(ComponentId::new).collect();
    let case = IncidentCase::new(args.case_id.clone(), graph, truth).map_err(|e| Failure::usage(e.to_string()))?;
    write_json(&args.out, &case, true)
}

pub fn indicators(args: &IndicatorsArgs) -> Result<(), Failure> {
    if !(args.k_sigma.is_finite() && args.k_sigma > 0.0) {
        return Err(Failure::usage("--k-sigma must be positive"));
    }
    let case: IncidentCase = read_json(&args.case)?;
    let inds = compute_indicators_with(&case.graph, args.k_sigma);
    match &args.out {
        Some(p) => write_json(p, &inds, true),
        None => {
            let s = serde_json::to_string_pretty(&inds).map_err(|e| Failure::pipeline(e.to_string()))?;
            emit(&format!("{s}\n"))
        }
    }
}

fn write_log(path: &Path, rows: &[EpisodeLog], append: bool) -> Result<(), Failure> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Failure::output(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Failure::output(path, e))?;
    }
    w.flush().map_err(|e| Failure::output(path, e))
}

pub fn train(cfg: &Config, args: &TrainArgs) -> Result<(), Failure> {
    let mut tc = cfg.train;
    if let Some(e) = args.episodes {
        tc.episodes = e;
    }
    let cases = load_cases(&args.cases)?;
    let policy_path = args.out.join(POLICY_FILE);
    let resume: Option<PolicyFile> = if args.resume {
        let f: PolicyFile = read_json(&policy_path)?;
        f.check().map_err(|e| Failure::input(&policy_path, e))?;
        tc.policy = f.train_config.policy;
        Some(f)
    } else {
        None
    };
    create_dir(&args.out)?;
    let out = train_ppo_from(&cases, &tc, resume.as_ref()).map_err(|e| Failure::pipeline(format!("train: {e}")))?;
    let file = out.to_file(&tc).map_err(|e| Failure::pipeline(format!("train: {e}")))?;
    write_json(&policy_path, &file, false)?;
    write_json(&args.out.join(TREE_FILE), &out.best_tree, true)?;
    write_log(&args.out.join(LOG_FILE), &out.history, args.resume)?;
    log::info!("best reward {:.4} after {} episodes", out.best_reward, out.episodes_done);
    emit(&format!("{}\n", out.best_tree.render()))
}

pub fn prune(args: &PruneArgs) -> Result<(), Failure> {
    let case: IncidentCase = read_json(&args.case)?;
    let tree = read_tree(&args.tree)?;
    let inds = compute_indicators(&case.graph);
    let res = execute(&tree, &case.graph, &inds).map_err(|e| Failure::pipeline(format!("pruning: {e}")))?;
    let truth = case.root_causes().intersection(&res.kept).cloned().collect();
    let pruned = IncidentCase::new(case.case_id.clone(), res.pruned_graph, truth)
        .map_err(|e| Failure::pipeline(format!("pruning: {e}")))?;
    write_json(&args.out, &pruned, true)?;
    emit(&format!("kept {} of {} components\n", res.kept.len(), case.graph.node_count()))
}

pub fn diagnose(cfg: &Config, args: &DiagnoseArgs) -> Result<(), Failure> {
    let case: IncidentCase = read_json(&args.case)?;
    let tree = match &args.tree {
        Some(p) if !args.no_prune => Some(read_tree(p)?),
        _ => None,
    };
    let report = run_diagnose(&case, tree.as_ref(), &cfg.rca).map_err(|e| Failure::pipeline(e.to_string()))?;
    write_json(&args.out, &report, true)?;
    let text = report.render_text(args.top);
    let txt = args.out.with_extension("txt");
    fs::write(&txt, &text).map_err(|e| Failure::output(&txt, e))?;
    emit(&text)
}

struct Scores {
    pr: [f64; 4],
    rank: f64,
    hit: f64,
    kept: usize,
}

fn score(case: &IncidentCase, report: &DiagnosisReport) -> Result<Scores, Failure> {
    let t = case.root_causes();
    let m = |e| Failure::pipeline(format!("metrics: {e}"));
    let kept: BTreeSet<ComponentId> = report.kept.iter().cloned().collect();
    Ok(Scores {
        pr: [
            pr_at_k(&report.ranking, t, 1).map_err(m)?,
            pr_at_k(&report.ranking, t, 3).map_err(m)?,
            pr_at_k(&report.ranking, t, 5).map_err(m)?,
            pr_avg(&report.ranking, t).map_err(m)?,
        ],
        rank: rca_rank_score(&report.ranking, t).map_err(m)?,
        hit: hit_root_cause(&kept, t).map_err(m)?,
        kept: kept.len(),
    })
}

pub const EVAL_HEADER: [&str; 9] =
    ["case_id", "pr@1", "pr@3", "pr@5", "pr@avg", "rankscore", "hitrootcause", "kept_nodes", "status"];

pub fn evaluate(cfg: &Config, args: &EvaluateArgs) -> Result<(), Failure> {
    let files = case_files(&args.cases)?;
    let tree = read_tree(&args.tree)?;
    let file = File::create(&args.out).map_err(|e| Failure::output(&args.out, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| Failure::output(&args.out, e);
    w.write_record(EVAL_HEADER).map_err(io)?;
    let mut ok: Vec<Scores> = Vec::new();
    let mut failed = 0usize;
    for path in &files {
        let result = read_json::<IncidentCase>(path).and_then(|case| {
            let report = run_diagnose(&case, Some(&tree), &cfg.rca).map_err(|e| Failure::pipeline(e.to_string()))?;
            Ok((case.case_id.clone(), score(&case, &report)?))
        });
        match result {
            Ok((id, s)) => {
                let mut row = vec![id];
                row.extend(s.pr.iter().map(f64::to_string));
                row.extend([s.rank.to_string(), s.hit.to_string(), s.kept.to_string(), "ok".into()]);
                w.write_record(&row).map_err(io)?;
                ok.push(s);
            }
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                failed += 1;
                let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                let mut row = vec![id];
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(format!("error: {e}"));
                w.write_record(&row).map_err(io)?;
            }
        }
    }
    let n = ok.len() as f64;
    let mean = |f: &dyn Fn(&Scores) -> f64| if ok.is_empty() { String::new() } else { (ok.iter().map(f).sum::<f64>() / n).to_string() };
    let mut row = vec!["mean".to_string()];
    for i in 0..4 {
        row.push(mean(&|s| s.pr[i]));
    }
    row.extend([mean(&|s| s.rank), mean(&|s| s.hit), mean(&|s| s.kept as f64), format!("{} of {} cases", ok.len(), files.len())]);
    w.write_record(&row).map_err(io)?;
    w.flush().map_err(|e| Failure::output(&args.out, e))?;
    if failed > 0 {
        return Err(Failure::pipeline(format!("{failed} of {} cases failed", files.len())));
    }
    Ok(())
}
