// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cart_core::controller::PolicyController;
use cart_core::dataset::{collect_dataset, read_dataset, samples_from, write_dataset};
use cart_core::encoder::Modality;
use cart_core::metrics::{avg_improvement, performance_report, stability_report, AxisStats, StabilityReport};
use cart_core::objective::{ResponseModel, TrainingReport};
use cart_core::pipeline::{build_tss, resolve_response, summarize, train_on_samples, RunSummary};
use cart_core::policy::TrainedPolicy;
use cart_core::sim::sweep::{read_sweep_csv, write_sweep_csv};
use cart_core::sim::{deltaq_vibration_sweep, run_rollout, sweep_trends, FixedCommand, RolloutTrace};
use cart_core::trace_io::{read_trace_json, write_trace_csv, write_trace_json, LabelledTrace};
use cart_core::tss::{benchmark_selection, load_library, save_library, ScoringHead, SelectionRecord, TssRuntime};
use cart_core::{CoreError, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CoreError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))
}

fn policy_file(modality: Modality) -> String {
    format!("policy-{}.ckpt", modality.as_str())
}

#[derive(Serialize)]
struct CollectReport<'a> {
    config: serde_json::Value,
    episodes: usize,
    samples: usize,
    runs: Vec<&'a str>,
}

pub fn collect(cfg: &RunConfig, out: &Path) -> Result<()> {
    let episodes = collect_dataset(&cfg.collect)?;
    write_dataset(out, &episodes)?;
    let kinds: Vec<&str> = episodes.iter().map(|e| e.manifest.terrain.kind.as_str()).collect();
    let report = CollectReport {
        config: cfg.to_json(),
        episodes: episodes.len(),
        samples: episodes.iter().map(|e| e.len()).sum(),
        runs: kinds,
    };
    write_json(&out.join("collect_report.json"), &report)?;
    println!(
        "collected {} episodes ({} samples) into {}",
        report.episodes,
        report.samples,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: serde_json::Value,
    dataset: String,
    response_model: ResponseModel,
    report: &'a TrainingReport,
}

pub fn train(cfg: &RunConfig, dataset: &Path, modality: Modality, out: &Path) -> Result<()> {
    let episodes = read_dataset(dataset)?;
    let samples = samples_from(&episodes, cfg.rollout.proprio_window);
    let exp = cfg.experiment();
    let response = resolve_response(&exp, &samples)?;
    let mut tc = cfg.train.clone();
    tc.response = response;
    let (policy, report) = train_on_samples(&cfg.policy, &samples, modality, &cfg.objective, &tc)?;
    create_dir(out)?;
    let tag = modality.as_str();
    write_json(
        &out.join(format!("train-report-{tag}.json")),
        &TrainOutput {
            config: cfg.to_json(),
            dataset: dataset.display().to_string(),
            response_model: response,
            report: &report,
        },
    )?;
    if let Some(reason) = &report.aborted {
        return Err(CoreError::Runtime(format!("training aborted, no checkpoint written: {reason}")));
    }
    let path = out.join(policy_file(modality));
    let tmp = out.join(format!(".{}.partial", policy_file(modality)));
    policy.save(&tmp, serde_json::json!({ "response_model": response, "seed": cfg.seed }))?;
    fs::rename(&tmp, &path).map_err(|e| CoreError::io(&path, e))?;
    let last = report.epochs.last().map(|e| e.mean_loss).unwrap_or(report.initial_loss);
    println!(
        "trained {tag} policy on {} samples: loss {:.6} -> {last:.6}; wrote {}",
        report.samples,
        report.initial_loss,
        path.display()
    );
    Ok(())
}

fn checkpoint_response(path: &Path) -> Result<Option<ResponseModel>> {
    let ck = cart_nn::checkpoint::Checkpoint::load(path).map_err(|e| CoreError::data(path, e.to_string()))?;
    Ok(ck
        .metadata
        .get("extra")
        .and_then(|x| x.get("response_model"))
        .and_then(|r| serde_json::from_value(r.clone()).ok()))
}

pub fn build_library(cfg: &RunConfig, full: &Path, proprio: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let mut live = TrainedPolicy::load(full)?;
    let other = TrainedPolicy::load(proprio)?;
    let diff = live.policy.layout().diff(other.policy.layout());
    if !diff.is_empty() {
        return Err(CoreError::Config(format!("checkpoint layouts differ:\n  {}", diff.join("\n  "))));
    }
    let episodes = read_dataset(dataset)?;
    let samples = samples_from(&episodes, cfg.rollout.proprio_window);
    let exp = cfg.experiment();
    let response = match checkpoint_response(full)? {
        Some(r) => r,
        None => resolve_response(&exp, &samples)?,
    };
    let (rt, report) = build_tss(&mut live, &other, &samples, &exp, response)?;
    save_library(out, &rt.library, cfg.embedder)?;
    rt.head.save(&out.join("head.ckpt"))?;
    write_json(
        &out.join("head-report.json"),
        &serde_json::json!({ "config": cfg.to_json(), "response_model": response, "report": report }),
    )?;
    println!(
        "library: {} segments from {} sources; head loss {:.4} -> {:.4}, candidate match {:.3}; wrote {}",
        rt.library.len(),
        rt.library.sources.len(),
        report.initial_loss,
        report.epoch_losses.last().copied().unwrap_or(report.initial_loss),
        report.candidate_match_rate,
        out.display()
    );
    Ok(())
}

fn load_runtime(live: &TrainedPolicy, dir: &Path) -> Result<TssRuntime> {
    let (lib, _) = load_library(dir)?;
    let head = ScoringHead::load(&dir.join("head.ckpt"))?;
    let mut problems = vec![];
    if head.ctx_dim != live.policy.s_hat_dim() {
        problems.push(format!(
            "scoring head context width {} != policy context width {}",
            head.ctx_dim,
            live.policy.s_hat_dim()
        ));
    }
    let live_len = live.params.len();
    for s in &lib.sources {
        if s.total_len != live_len {
            problems.push(format!(
                "library source `{}` has {} parameters, live policy has {live_len}",
                s.id, s.total_len
            ));
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::Config(format!(
            "library is incompatible with the checkpoint:\n  {}",
            problems.join("\n  ")
        )));
    }
    TssRuntime::new(lib, head, live_len)
}

pub struct InferArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub library: Option<&'a Path>,
    pub no_tss: bool,
    pub fixed: Option<(f64, f64)>,
    pub label: &'a str,
    pub out: &'a Path,
}

#[derive(Serialize)]
struct InferSummary {
    config: serde_json::Value,
    tss: bool,
    summary: RunSummary,
}

pub fn infer(cfg: &RunConfig, a: &InferArgs<'_>) -> Result<()> {
    let (trace, log, tss) = if let Some((speed, height)) = a.fixed {
        let mut c = FixedCommand { speed, height };
        (run_rollout(&mut c, &cfg.terrain, &cfg.rollout, cfg.perturbation, cfg.seed)?, None, false)
    } else {
        let ck = a
            .checkpoint
            .ok_or_else(|| CoreError::Config("infer needs --checkpoint (or --fixed for a fixed-command baseline)".into()))?;
        let live = TrainedPolicy::load(ck)?;
        let runtime = if a.no_tss {
            None
        } else {
            let dir = a
                .library
                .ok_or_else(|| CoreError::Config("infer needs --library unless --no-tss is given".into()))?;
            Some(load_runtime(&live, dir)?)
        };
        let tss = runtime.is_some();
        let mut c = PolicyController::new(live, runtime, a.label);
        let t = run_rollout(&mut c, &cfg.terrain, &cfg.rollout, cfg.perturbation, cfg.seed)?;
        (t, tss.then_some(c.log), tss)
    };
    create_dir(a.out)?;
    let label = a.label;
    let stem = format!("{label}-{}", cfg.seed);
    let lt = LabelledTrace {
        label: label.to_string(),
        terrain: cfg.terrain.kind.as_str().to_string(),
        seed: cfg.seed,
        trace,
    };
    write_trace_json(&a.out.join(format!("{stem}.trace.json")), &lt)?;
    write_trace_csv(&a.out.join(format!("{stem}.trace.csv")), &lt.trace)?;
    let sel_path = a.out.join(format!("{stem}.selections.csv"));
    match &log {
        Some(records) => write_selections(&sel_path, records)?,
        None if sel_path.exists() => fs::remove_file(&sel_path).map_err(|e| CoreError::io(&sel_path, e))?,
        None => {}
    }
    let summary = summarize(label, cfg.seed, &lt.trace);
    write_json(
        &a.out.join(format!("{stem}.summary.json")),
        &InferSummary {
            config: cfg.to_json(),
            tss,
            summary: summary.clone(),
        },
    )?;
    println!(
        "{label} on {} (seed {}): goal reached {}, elapsed {:.2} s, mean speed {:.3} m/s, total RMS rate {:.4} rad/s{}",
        lt.terrain,
        cfg.seed,
        summary.goal_reached,
        summary.elapsed,
        summary.mean_speed,
        summary.rms_total,
        if tss {
            format!(", {} selections logged", log.map(|l| l.len()).unwrap_or(0))
        } else {
            String::new()
        }
    );
    Ok(())
}

fn write_selections(path: &Path, records: &[SelectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::data(path, e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| CoreError::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn bench_tss(cfg: &RunConfig, segments: Option<usize>, trials: Option<usize>, out: &Path) -> Result<()> {
    let segments = segments.unwrap_or(cfg.bench.segments);
    let trials = trials.unwrap_or(cfg.bench.trials);
    let r = benchmark_selection(segments, trials, cfg.bench.ctx_dim, cfg.bench.head_hidden, cfg.seed)?;
    create_dir(out)?;
    write_json(&out.join("bench-tss.json"), &serde_json::json!({ "config": cfg.to_json(), "latency": r }))?;
    println!(
        "{} segments, {} trials: mean {:.1} ms, p95 {:.1} ms, min {:.1} ms, max {:.1} ms ({})",
        r.segments, r.trials, r.mean_ms, r.p95_ms, r.min_ms, r.max_ms, r.precision
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let rows = deltaq_vibration_sweep(&cfg.sweep)?;
    create_dir(out)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    let svg = out.join("sweep.svg");
    fs::write(&svg, plot::sweep_chart(&rows)).map_err(|e| CoreError::io(&svg, e))?;
    let trends = sweep_trends(&rows);
    write_json(
        &out.join("sweep-trends.json"),
        &serde_json::json!({ "config": cfg.to_json(), "trends": trends }),
    )?;
    for t in &trends {
        let rho = t.spearman.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into());
        println!("speed {:.2} m/s: Spearman(Δq, RMS) {rho}, zero-Δq minimum {}", t.speed, t.zero_is_minimum);
    }
    println!("{} rows written to {}", rows.len(), out.join("sweep.csv").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelRow {
    pub label: String,
    pub traces: usize,
    pub mean_jerk: f64,
    /// Mean over successful runs; absent when none succeeded.
    pub time_to_goal: Option<f64>,
    pub distance_10s: f64,
    pub success_rate: f64,
    pub stability: StabilityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImprovementRow {
    pub metric: String,
    pub candidate: f64,
    pub baselines: Vec<(String, f64)>,
    /// Percent; absent when a baseline value is zero.
    pub avg_improvement: Option<f64>,
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".trace.json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CoreError::data(dir, "no *.trace.json files found"));
    }
    Ok(files)
}

fn label_row(label: &str, traces: &[RolloutTrace], cfg: &RunConfig) -> Result<LabelRow> {
    let perf = traces.iter().map(performance_report).collect::<Result<Vec<_>>>()?;
    let n = perf.len() as f64;
    let times: Vec<f64> = perf.iter().filter_map(|p| p.time_to_goal).collect();
    Ok(LabelRow {
        label: label.to_string(),
        traces: traces.len(),
        mean_jerk: perf.iter().map(|p| p.mean_jerk).sum::<f64>() / n,
        time_to_goal: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
        distance_10s: perf.iter().map(|p| p.distance_10s).sum::<f64>() / n,
        success_rate: perf.iter().filter(|p| p.success).count() as f64 / n,
        stability: stability_report(traces, cfg.eval.pooling)?,
    })
}

fn lower_is_better(row: &LabelRow) -> Vec<(String, f64)> {
    let mut m = vec![("mean_jerk".to_string(), row.mean_jerk)];
    for (axis, s) in [
        ("roll", &row.stability.roll),
        ("pitch", &row.stability.pitch),
        ("yaw", &row.stability.yaw),
    ] {
        let AxisStats {
            mean_abs_angle,
            angle_variance,
            mean_abs_rate,
            rate_variance,
        } = *s;
        m.push((format!("{axis}_mean_abs_angle"), mean_abs_angle));
        m.push((format!("{axis}_angle_variance"), angle_variance));
        m.push((format!("{axis}_mean_abs_rate"), mean_abs_rate));
        m.push((format!("{axis}_rate_variance"), rate_variance));
    }
    m
}

pub fn improvements(candidate: &LabelRow, baselines: &[&LabelRow]) -> Vec<ImprovementRow> {
    let cand = lower_is_better(candidate);
    cand.iter()
        .enumerate()
        .map(|(i, (metric, c))| {
            let base: Vec<(String, f64)> = baselines.iter().map(|b| (b.label.clone(), lower_is_better(b)[i].1)).collect();
            let values: Vec<f64> = base.iter().map(|b| b.1).collect();
            ImprovementRow {
                metric: metric.clone(),
                candidate: *c,
                avg_improvement: avg_improvement(&values, *c).ok(),
                baselines: base,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "-".into())
}

fn tables(rows: &[LabelRow], imp: &[ImprovementRow], candidate: &str) -> String {
    let mut s = String::from(
        "## Performance\n\n| label | runs | mean jerk (m/s³) | time to goal (s) | distance in 10 s (m) | success |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s += &format!(
            "| {} | {} | {:.4} | {} | {:.3} | {:.2} |\n",
            r.label,
            r.traces,
            r.mean_jerk,
            fmt_opt(r.time_to_goal, 2),
            r.distance_10s,
            r.success_rate
        );
    }
    s += "\n## Stability\n\n| label | axis | mean abs angle (rad) | angle variance | mean abs rate (rad/s) | rate variance |\n|---|---|---|---|---|---|\n";
    for r in rows {
        for (axis, a) in [("roll", &r.stability.roll), ("pitch", &r.stability.pitch), ("yaw", &r.stability.yaw)] {
            s += &format!(
                "| {} | {axis} | {:.6} | {:.3e} | {:.6} | {:.3e} |\n",
                r.label, a.mean_abs_angle, a.angle_variance, a.mean_abs_rate, a.rate_variance
            );
        }
    }
    if !imp.is_empty() {
        s += &format!("\n## Average improvement of `{candidate}` over baselines (lower is better)\n\n| metric | {candidate} | baselines | avg improvement (%) |\n|---|---|---|---|\n");
        for i in imp {
            let b: Vec<String> = i.baselines.iter().map(|(l, v)| format!("{l}: {v:.4e}")).collect();
            s += &format!(
                "| {} | {:.4e} | {} | {} |\n",
                i.metric,
                i.candidate,
                b.join(", "),
                fmt_opt(i.avg_improvement, 2)
            );
        }
    }
    s
}

pub fn eval(cfg: &RunConfig, traces_dir: &Path, out: &Path) -> Result<()> {
    let files = trace_files(traces_dir)?;
    let mut groups: BTreeMap<String, Vec<RolloutTrace>> = BTreeMap::new();
    let mut dt: Option<(f64, PathBuf)> = None;
    for f in &files {
        let t = read_trace_json(f)?;
        match &dt {
            Some((d, first)) if *d != t.trace.dt => {
                return Err(CoreError::data(
                    f,
                    format!(
                        "timestep {} differs from {} in {}; traces must share one timestep",
                        t.trace.dt,
                        d,
                        first.display()
                    ),
                ))
            }
            None => dt = Some((t.trace.dt, f.clone())),
            _ => {}
        }
        groups.entry(t.label).or_default().push(t.trace);
    }
    let rows = groups.iter().map(|(l, ts)| label_row(l, ts, cfg)).collect::<Result<Vec<_>>>()?;
    let cand = &cfg.eval.candidate;
    let imp = match rows.iter().find(|r| &r.label == cand) {
        Some(c) => {
            let bases: Vec<&LabelRow> = rows
                .iter()
                .filter(|r| &r.label != cand && (cfg.eval.baselines.is_empty() || cfg.eval.baselines.contains(&r.label)))
                .collect();
            if bases.is_empty() {
                vec![]
            } else {
                improvements(c, &bases)
            }
        }
        None => vec![],
    };
    for b in &cfg.eval.baselines {
        if !groups.contains_key(b) {
            return Err(CoreError::Config(format!("baseline label `{b}` not found among traces")));
        }
    }
    create_dir(out)?;
    let md = tables(&rows, &imp, cand);
    let md_path = out.join("eval.md");
    fs::write(&md_path, &md).map_err(|e| CoreError::io(&md_path, e))?;
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({ "config": cfg.to_json(), "traces": files.len(), "labels": rows, "improvements": imp }),
    )?;
    print!("{md}");
    Ok(())
}

pub fn plot(input: &Path, out: Option<&Path>) -> Result<()> {
    let name = input.to_string_lossy();
    let (svg, default_out) = if name.ends_with(".csv") {
        (plot::sweep_chart(&read_sweep_csv(input)?), input.with_extension("svg"))
    } else if name.ends_with(".json") {
        let t = read_trace_json(input)?;
        (plot::trace_chart(&t.label, &t.trace), input.with_extension("svg"))
    } else {
        return Err(CoreError::Config(format!(
            "cannot plot {name}: expected a sweep .csv or a .trace.json file"
        )));
    };
    let path = out.map(Path::to_path_buf).unwrap_or(default_out);
    fs::write(&path, svg).map_err(|e| CoreError::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}
