use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use evidence_core::backends::{Backends, Script, ScriptedBackend};
use evidence_core::eval::{
    load_fixtures, parse_grid, parse_plan, run_ablation, run_eval, AblationAxis, EvalEnv, Protocol,
};
use evidence_core::highlight::{build_toolkit, save_toolkit, ToolkitRecipe};
use evidence_core::parser::parse_response;
use evidence_core::protocol::{screen_slide, start_session, CaseInput, DiagnosticSession, ExamAnswer, SessionEvent};
use evidence_core::reward::{exam_mentions, total_reward, Judge, RewardBreakdown};
use evidence_core::service::{ExamMode, SessionService};
use evidence_core::store::ingest_corpus;
use evidence_core::synth;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{EngineConfig, Layers};
use crate::context::{self, build_context, detect_paths, require, with_parent};
use crate::{Cli, Command, ModeArg, ProtocolArg, RunArgs, ToolkitCommand};

/// Version of the `--json` record envelope.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

/// Cases in the default ablation bench.
const BENCH_CASES: usize = 10;

struct Out {
    json: bool,
}

impl Out {
    fn emit<T: Serialize>(&self, kind: &str, data: &T, text: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            let record = json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "kind": kind,
                "data": data,
            });
            println!("{}", serde_json::to_string(&record)?);
        } else {
            print!("{}", text());
        }
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<EngineConfig> {
    let g = &cli.global;
    let mut flags = g.set.clone();
    let mut flag = |k: &str, v: String| flags.push((k.to_string(), v));
    if let Some(p) = &g.embeddings {
        flag("corpus", toml_string(&p.display().to_string()));
    }
    if let Some(p) = &g.toolkits {
        flag("toolkits", toml_string(&p.display().to_string()));
    }
    if let Some(n) = g.parallelism {
        flag("parallelism", n.to_string());
    }
    let seed = match &cli.command {
        Command::Highlight { seed, .. } | Command::Synth { seed, .. } => *seed,
        Command::Run(RunArgs { seed, .. }) => *seed,
        Command::Toolkit(ToolkitCommand::Build { seed, .. }) => *seed,
        _ => None,
    };
    if let Some(s) = seed {
        flag("seed", s.to_string());
    }
    if let Command::Serve { addr, token, .. } = &cli.command {
        if let Some(a) = addr {
            flag("service.addr", toml_string(a));
        }
        if let Some(t) = token {
            flag("service.token", toml_string(t));
        }
    }
    let env = std::env::vars().filter(|(k, _)| k.starts_with("ENGINE_")).collect();
    EngineConfig::load(&Layers {
        file: g.config.as_deref(),
        env,
        flags,
    })
}

/// Quote a value so paths and URLs are never read as TOML literals.
fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = Out { json: cli.global.json };
    match cli.command {
        Command::Ingest { corpus, check } => ingest(&out, &corpus, check),
        Command::Toolkit(ToolkitCommand::Build {
            recipes,
            library,
            out: dir,
            ..
        }) => toolkit_build(&out, &cfg, recipes, library, dir),
        Command::Toolkit(ToolkitCommand::Inspect { dir, name }) => toolkit_inspect(&out, &cfg, dir, name),
        Command::Highlight {
            slide,
            toolkit,
            plan,
            ..
        } => highlight(&out, &cfg, &slide, &toolkit, &plan),
        Command::Run(args) => run(&out, &mut cfg, &args),
        Command::Score {
            transcript,
            truth,
            alpha,
        } => score(&out, &cfg, &transcript, &truth, alpha),
        Command::Eval {
            corpus,
            protocol,
            report,
            logs,
        } => eval(&out, &mut cfg, &corpus, protocol, report, logs),
        Command::Ablate {
            axis,
            grid,
            corpus,
            protocol,
            report,
        } => ablate(&out, &mut cfg, &axis, grid.as_deref(), corpus, protocol, report),
        Command::Serve { mode, .. } => serve(&out, &cfg, mode),
        Command::Synth {
            out: dir,
            cases,
            dim,
            worked,
            ..
        } => synth_cmd(&out, &cfg, &dir, cases, dim, worked),
    }
}

#[derive(Serialize)]
struct IngestSummary {
    root: PathBuf,
    dim: usize,
    slides: usize,
    patches: usize,
    counts: BTreeMap<String, BTreeMap<String, usize>>,
    problems: Vec<String>,
}

fn ingest(out: &Out, corpus: &Path, check: bool) -> Result<()> {
    let handle = ingest_corpus(corpus).with_context(|| format!("ingesting {}", corpus.display()))?;
    let mut counts = BTreeMap::new();
    let mut problems = Vec::new();
    for slide in &handle.manifest().slides {
        let per: BTreeMap<String, usize> = slide
            .levels
            .iter()
            .map(|(l, e)| (l.to_string(), e.count))
            .collect();
        if slide.levels.is_empty() {
            problems.push(format!("{}: no levels", slide.slide_id));
        }
        for (l, n) in &per {
            if *n == 0 {
                problems.push(format!("{}: no patches at {l}", slide.slide_id));
            }
        }
        counts.insert(slide.slide_id.clone(), per);
    }
    let summary = IngestSummary {
        root: corpus.to_path_buf(),
        dim: handle.dim(),
        slides: counts.len(),
        patches: handle.total_records(),
        counts,
        problems,
    };
    out.emit("ingest", &summary, || {
        let mut s = format!(
            "{}: {} slides, {} patches, dim {}\n",
            summary.root.display(),
            summary.slides,
            summary.patches,
            summary.dim
        );
        for (slide, per) in &summary.counts {
            let levels: Vec<String> = per.iter().map(|(l, n)| format!("{l}={n}")).collect();
            let _ = writeln!(s, "  {slide}  {}", levels.join(" "));
        }
        for p in &summary.problems {
            let _ = writeln!(s, "  problem: {p}");
        }
        s
    })?;
    if check && !summary.problems.is_empty() {
        bail!("corpus check found {} problem(s)", summary.problems.len());
    }
    Ok(())
}

fn toolkit_build(
    out: &Out,
    cfg: &EngineConfig,
    recipes: Option<PathBuf>,
    library: Option<PathBuf>,
    dir: Option<PathBuf>,
) -> Result<()> {
    let library = library.or_else(|| cfg.corpus.clone()).context("toolkit build needs --library or a configured corpus")?;
    let dir = dir.or_else(|| cfg.toolkits.clone()).context("toolkit build needs --out or a configured toolkit dir")?;
    let recipes: Vec<ToolkitRecipe> = match recipes {
        Some(p) => serde_json::from_str(&context::read(&p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => synth::default_recipes(),
    };
    let corpus = ingest_corpus(&library).with_context(|| format!("ingesting {}", library.display()))?;
    let mut built = Vec::new();
    for r in &recipes {
        let kit = build_toolkit(r, &corpus, cfg.seed).with_context(|| format!("building toolkit {}", r.name))?;
        save_toolkit(&kit, &dir)?;
        built.push(json!({"name": kit.name, "prototypes": kit.prototypes.len()}));
    }
    out.emit("toolkit_build", &json!({"out": dir, "toolkits": built}), || {
        let mut s = String::new();
        for b in &built {
            let _ = writeln!(s, "built {} ({} prototypes)", b["name"].as_str().unwrap_or(""), b["prototypes"]);
        }
        let _ = writeln!(s, "written to {}", dir.display());
        s
    })
}

#[derive(Serialize)]
struct ToolkitInfo {
    name: String,
    mode: evidence_core::highlight::ToolkitMode,
    dim: Option<usize>,
    prototypes: usize,
    levels: Vec<String>,
    highlight: Vec<String>,
    descriptions: Vec<String>,
}

fn toolkit_inspect(out: &Out, cfg: &EngineConfig, dir: Option<PathBuf>, name: Option<String>) -> Result<()> {
    let dir = dir.or_else(|| cfg.toolkits.clone()).context("toolkit inspect needs --dir or a configured toolkit dir")?;
    let kits = context::load_toolkits(&dir)?;
    let infos: Vec<ToolkitInfo> = kits
        .iter()
        .filter(|k| name.as_ref().is_none_or(|n| &k.name == n))
        .map(|k| ToolkitInfo {
            name: k.name.clone(),
            mode: k.mode,
            dim: k.dim(),
            prototypes: k.prototypes.len(),
            levels: k.levels().iter().map(|l| l.to_string()).collect(),
            highlight: k.highlight_set.iter().cloned().collect(),
            descriptions: k.descriptions(),
        })
        .collect();
    if let (Some(n), true) = (&name, infos.is_empty()) {
        bail!("no toolkit named {n:?} in {}", dir.display());
    }
    out.emit("toolkit_inspect", &infos, || {
        let mut s = String::new();
        for i in &infos {
            let _ = writeln!(
                s,
                "{} ({:?}, {} prototypes, dim {}, levels {})",
                i.name,
                i.mode,
                i.prototypes,
                i.dim.map_or("-".into(), |d| d.to_string()),
                i.levels.join(",")
            );
            let _ = writeln!(s, "  highlight: {}", i.highlight.join(", "));
            for d in &i.descriptions {
                let _ = writeln!(s, "  - {d}");
            }
        }
        s
    })
}

fn highlight(out: &Out, cfg: &EngineConfig, slide: &str, toolkit: &str, plan: &str) -> Result<()> {
    require(&cfg.corpus, "corpus (--embeddings)")?;
    require(&cfg.toolkits, "toolkit dir (--toolkits)")?;
    let mut ctx = build_context(cfg)?;
    let mut plan = parse_plan(plan)?;
    plan.toolkit = toolkit.to_string();
    ctx.config.screening = plan;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sel = screen_slide(&ctx, slide, &mut rng)?;
    out.emit("highlight", &sel, || {
        let mut s = format!("{} on {slide} with {toolkit}: {} RoIs", sel.plan_name, sel.entries.len());
        if sel.shortfall {
            s.push_str(" (fewer than requested)");
        }
        s.push('\n');
        for e in &sel.entries {
            let score = e.score.map_or("-".into(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "  {:<36} {:>4} {:>8} {:?}", e.image_id, e.level.to_string(), score, e.provenance);
        }
        s
    })
}

#[derive(Debug, Deserialize)]
struct CaseFile {
    case_id: String,
    case_info: String,
    #[serde(default)]
    slide_id: Option<String>,
    #[serde(default)]
    script: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunSummary {
    session_id: String,
    status: &'static str,
    final_diagnosis: Option<String>,
    differential: Vec<String>,
    trace: Vec<String>,
    pending_exams: Vec<String>,
    abort_cause: Option<String>,
    log: PathBuf,
}

fn matching_answers(pending: &[String], given: &BTreeMap<String, String>) -> Vec<ExamAnswer> {
    pending
        .iter()
        .filter_map(|item| {
            given
                .iter()
                .find(|(name, _)| exam_mentions(item, name))
                .map(|(name, result)| ExamAnswer::new(name.clone(), result.clone()))
        })
        .collect()
}

fn run(out: &Out, cfg: &mut EngineConfig, args: &RunArgs) -> Result<()> {
    let case: CaseFile = serde_json::from_str(&context::read(&args.case)?)
        .with_context(|| format!("parsing case {}", args.case.display()))?;
    let case_dir = args.case.parent().map(Path::to_path_buf).unwrap_or_default();
    let hints = with_parent(&case_dir);
    detect_paths(cfg, &hints.iter().map(PathBuf::as_path).collect::<Vec<_>>());
    let mut ctx = build_context(cfg)?;
    let script = args.script.clone().or_else(|| case.script.as_ref().map(|p| case_dir.join(p)));
    if let Some(p) = &script {
        let s = Script::from_json(&context::read(p)?)?;
        ctx.backends = Backends::shared(Arc::new(ScriptedBackend::new(s)));
    }
    let exams: Option<BTreeMap<String, String>> = args
        .exams
        .as_ref()
        .map(|p| serde_json::from_str(&context::read(p)?).with_context(|| format!("parsing {}", p.display())))
        .transpose()?;
    let input = CaseInput {
        case_id: case.case_id.clone(),
        case_info: case.case_info,
        slide_id: args.slide.clone().or(case.slide_id),
    };
    let mut session = start_session(&ctx, input, cfg.seed);
    let stepped = match args.mode {
        ModeArg::Oracle => session.run_to_end(&ctx),
        ModeArg::Interactive => drive_interactive(&ctx, &mut session, exams.as_ref()),
    };
    let log = args.log.clone().unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", case.case_id)));
    session.write_log(&log).with_context(|| format!("writing {}", log.display()))?;
    stepped?;
    let awaiting = session.awaiting_evidence() && !session.pending_exams.is_empty();
    let status = if session.abort_cause.is_some() {
        "aborted"
    } else if session.is_finished() {
        "done"
    } else if awaiting {
        "awaiting_exams"
    } else {
        "in_progress"
    };
    let summary = RunSummary {
        session_id: session.session_id.clone(),
        status,
        final_diagnosis: session.final_diagnosis().map(str::to_string),
        differential: session.differential.clone(),
        trace: session.trace_labels(),
        pending_exams: if awaiting { session.pending_exams.clone() } else { Vec::new() },
        abort_cause: session.abort_cause.clone(),
        log,
    };
    out.emit("run", &summary, || {
        let mut s = format!("{} {}\n", summary.session_id, summary.status);
        let _ = writeln!(s, "trace: {}", summary.trace.join(" -> "));
        if let Some(d) = &summary.final_diagnosis {
            let _ = writeln!(s, "final: {d}");
        }
        if !summary.pending_exams.is_empty() {
            let _ = writeln!(s, "pending exams: {}", summary.pending_exams.join("; "));
        }
        if let Some(c) = &summary.abort_cause {
            let _ = writeln!(s, "aborted: {c}");
        }
        let _ = writeln!(s, "log: {}", summary.log.display());
        s
    })?;
    if let Some(c) = &summary.abort_cause {
        bail!("session aborted: {c}");
    }
    Ok(())
}

/// Advance until finished, stopping at the first exam request that the
/// given answers cannot cover at all.
fn drive_interactive(
    ctx: &evidence_core::protocol::EngineContext,
    session: &mut DiagnosticSession,
    exams: Option<&BTreeMap<String, String>>,
) -> Result<(), evidence_core::protocol::SessionError> {
    while !session.is_finished() {
        if session.awaiting_evidence() && !session.pending_exams.is_empty() {
            let Some(given) = exams else { break };
            let answers = matching_answers(&session.pending_exams, given);
            if answers.is_empty() {
                break;
            }
            session.advance(ctx, Some(&answers))?;
        } else {
            session.advance(ctx, None)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Scored {
    index: usize,
    diagnoses: Vec<String>,
    match_position: Option<usize>,
    breakdown: RewardBreakdown,
}

/// Reasoner replies in a session log, or the whole file as one reply.
fn replies(text: &str) -> Vec<String> {
    let events: Option<Vec<SessionEvent>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).ok())
        .collect();
    match events {
        Some(ev) if !ev.is_empty() => ev
            .into_iter()
            .filter_map(|e| match e {
                SessionEvent::Turn { turn, .. } => Some(turn.raw),
                _ => None,
            })
            .collect(),
        _ => vec![text.to_string()],
    }
}

fn score(out: &Out, cfg: &EngineConfig, transcript: &Path, truth: &Path, alpha: Option<f64>) -> Result<()> {
    let text = context::read(transcript)?;
    let truth_text = context::read(truth)?;
    let truth = truth_text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .with_context(|| format!("{} holds no diagnosis", truth.display()))?
        .to_string();
    let mut rc = cfg.reward.reward_config();
    if let Some(a) = alpha {
        rc = rc.with_alpha(a);
    }
    rc.validate()?;
    let judge = context::judge(cfg)?;
    let rules = context::tool_rules(cfg)?;
    let replies = replies(&text);
    if replies.is_empty() {
        bail!("{} holds no reasoner replies", transcript.display());
    }
    let scored = replies
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            let parsed = parse_response(raw);
            let diagnoses = parsed.diagnoses();
            let verdict = judge.judge(&diagnoses, parsed.exams(), &truth)?;
            let breakdown = total_reward(&parsed, &verdict, &rc, &rules)?;
            Ok(Scored {
                index: i + 1,
                diagnoses,
                match_position: verdict.match_position,
                breakdown,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = json!({"truth": truth, "alpha": rc.alpha, "replies": scored});
    out.emit("score", &data, || {
        let mut s = format!("truth: {truth}  alpha: {}\n", rc.alpha);
        for r in &scored {
            let b = &r.breakdown;
            let _ = writeln!(
                s,
                "reply {}: r_d={:.4} r_e={:+.2} r_t={:+.2} hacking={} n_f={} total={:.4}  match={}",
                r.index,
                b.r_d,
                b.r_e,
                b.r_t,
                b.hacking,
                b.n_f,
                b.total,
                r.match_position.map_or("-".into(), |p| p.to_string())
            );
        }
        s
    })
}

fn eval_env(cfg: &EngineConfig, ctx: evidence_core::protocol::EngineContext, logs: Option<PathBuf>) -> Result<EvalEnv> {
    let mut env = EvalEnv::new(ctx);
    env.judge = Arc::new(context::judge(cfg)?);
    env.seed = cfg.seed;
    env.parallelism = cfg.parallelism;
    env.out_dir = logs;
    Ok(env)
}

fn protocol(p: ProtocolArg) -> Protocol {
    match p {
        ProtocolArg::Op => Protocol::Op,
        ProtocolArg::Es => Protocol::Es,
    }
}

fn fixture_root_hints(corpus: &Path) -> Vec<PathBuf> {
    // `corpus` may be the data root or its `cases/` directory
    with_parent(corpus)
}

fn eval(
    out: &Out,
    cfg: &mut EngineConfig,
    corpus: &Path,
    p: ProtocolArg,
    report_path: Option<PathBuf>,
    logs: Option<PathBuf>,
) -> Result<()> {
    let fixtures = load_fixtures(corpus)?;
    let hints = fixture_root_hints(corpus);
    detect_paths(cfg, &hints.iter().map(PathBuf::as_path).collect::<Vec<_>>());
    let env = eval_env(cfg, build_context(cfg)?, logs)?;
    let report = run_eval(&env, &fixtures, protocol(p));
    if let Some(path) = &report_path {
        write_json(path, &report)?;
    }
    out.emit("eval", &report, || report.metrics.to_text())
}

fn ablate(
    out: &Out,
    cfg: &mut EngineConfig,
    axis: &str,
    grid: Option<&str>,
    corpus: Option<PathBuf>,
    p: ProtocolArg,
    report_path: Option<PathBuf>,
) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let grid = parse_grid(axis, grid)?;
    let (env, fixtures) = match &corpus {
        Some(dir) => {
            let fixtures = load_fixtures(dir)?;
            let hints = fixture_root_hints(dir);
            detect_paths(cfg, &hints.iter().map(PathBuf::as_path).collect::<Vec<_>>());
            (eval_env(cfg, build_context(cfg)?, None)?, fixtures)
        }
        None => {
            let (mut ctx, fixtures) = synth::synthetic_bench(BENCH_CASES, synth::DEFAULT_DIM, cfg.seed)?;
            ctx.config = context::protocol_config(cfg)?;
            ctx.registry = ctx.registry.with_icl_count(cfg.protocol.icl_references);
            (eval_env(cfg, ctx, None)?, fixtures)
        }
    };
    let report = run_ablation(&env, &fixtures, axis, &grid, protocol(p))?;
    if let Some(path) = &report_path {
        write_json(path, &report)?;
    }
    out.emit("ablate", &report, || report.to_text())
}

fn serve(out: &Out, cfg: &EngineConfig, mode: ModeArg) -> Result<()> {
    let ctx = build_context(cfg)?;
    let mode = match mode {
        ModeArg::Interactive => ExamMode::Interactive,
        ModeArg::Oracle => ExamMode::Oracle,
    };
    let service = Arc::new(
        SessionService::new(ctx)
            .with_token(cfg.service.token.clone())
            .with_default_mode(mode),
    );
    let handle = service
        .serve(&cfg.service.addr)
        .with_context(|| format!("binding {}", cfg.service.addr))?;
    let url = handle.base_url();
    out.emit("serve", &json!({"base_url": url}), || format!("listening on {url}\n"))?;
    handle.join();
    Ok(())
}

fn synth_cmd(out: &Out, cfg: &EngineConfig, dir: &Path, cases: usize, dim: usize, worked: bool) -> Result<()> {
    if dim == 0 {
        bail!("--dim must be at least 1");
    }
    let summary = if worked {
        synth::write_worked(dir, dim, cfg.seed)?
    } else {
        if cases == 0 {
            bail!("--cases must be at least 1");
        }
        synth::write_synthetic(dir, cases, dim, cfg.seed)?
    };
    out.emit("synth", &summary, || {
        format!(
            "{}: {} slides, {} patches, toolkits {}, {} cases\n",
            summary.out.display(),
            summary.slides,
            summary.patches,
            summary.toolkits.join(","),
            summary.cases.len()
        )
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
