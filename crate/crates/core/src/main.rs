use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use toolrl_core::config::Config;
use toolrl_core::eval::{render_report, score_run, Prediction, PredictionRun, ReportFormat};
use toolrl_core::grpo::{train_toy, PolicyParams, ToyEnv, TOY_STATES};
use toolrl_core::mat::{build_coding_bench, read_jsonl, validate_manifest, Manifest, Plan, SourceItem};
use toolrl_core::reward::{total_reward, AnswerKey, EmbeddingProvider, RewardBreakdown, TermFrequencyEmbedder};
use toolrl_core::rollout::{run_batch, ChatModel, ModelProvider, NullModel, RolloutConfig, ScriptedModel, ToolSet, Transcript};
use toolrl_core::sandbox::{CodeBackend, WorkerPool};
use toolrl_core::search::{FixtureIndex, SearchBackend, SerperBackend};

#[derive(Parser)]
#[command(
    name = "toolrl",
    version,
    about = "Agentic tool-use rollouts, verifiable rewards and MAT benchmark tooling"
)]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed (build-bench) or training seed (train-toy)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Backend::Builtin)]
    backend: Backend,
    /// Fixture search and scripted (or null) model; no network access
    #[arg(long, global = true)]
    offline: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Builtin,
    Worker,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Plain,
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Plain => ReportFormat::Plain,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate distorted coding items from clean sources
    BuildBench {
        /// JSON Lines of {id, image_path, question, gold_answers}
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `test`, `train` or a JSON plan file
        #[arg(long, default_value = "test")]
        plan: String,
    },
    /// Check a manifest; findings go to stderr and exit with 1
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// `test`, `train` or a JSON plan file; omit to skip quota checks
        #[arg(long)]
        plan: Option<String>,
        /// Skip image file existence checks
        #[arg(long)]
        no_files: bool,
    },
    /// Run rollouts over a manifest, writing transcripts and predictions
    Rollout {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scripted model turns, JSON Lines of {id, turns}
        #[arg(long)]
        scripts: Option<PathBuf>,
        /// Fixture search corpus, JSON Lines of {id, title, text, url?}
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Tool-free protocol: ask for a direct answer
        #[arg(long)]
        baseline: bool,
    },
    /// Score a prediction run against a manifest
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Plain)]
        format: FormatArg,
    },
    /// Compute rewards for the transcripts a prediction run references
    Reward {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Train the toy policy with GRPO
    TrainToy {
        #[arg(long)]
        updates: Option<usize>,
        /// JSON Lines training log
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Findings,
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Findings) => ExitCode::from(1),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_plan(spec: &str, cfg: &Config) -> Result<Plan, Failure> {
    match spec {
        "test" => Ok(Plan::test_with(cfg.bench.composite, cfg.bench.crop)),
        "train" => Ok(Plan::train_default()),
        path => Plan::load(Path::new(path)).map_err(|e| Failure::Usage(e.to_string())),
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn code_backend(cli: &Cli, cfg: &Config) -> Result<CodeBackend, Failure> {
    match cli.backend {
        Backend::Builtin => Ok(CodeBackend::Builtin),
        Backend::Worker => {
            let w = cfg
                .worker
                .clone()
                .ok_or_else(|| Failure::Usage("--backend worker needs a [worker] section in --config".into()))?;
            Ok(CodeBackend::Worker(Arc::new(WorkerPool::new(w))))
        }
    }
}

fn embedder(cli: &Cli, cfg: &Config) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    match (&cfg.embedding, cli.offline) {
        (Some(e), false) => Ok(Box::new(e.build()?)),
        _ => Ok(Box::new(TermFrequencyEmbedder)),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => Config::default(),
    };
    match &cli.cmd {
        Cmd::BuildBench { sources, out, plan } => {
            let plan = load_plan(plan, &cfg)?;
            let items: Vec<SourceItem> = read_jsonl(sources)?;
            let seed = cli.seed.unwrap_or(cfg.bench.master_seed);
            let summary = build_coding_bench(&items, &parent_dir(sources), &plan, seed, out)?;
            for id in &summary.unchanged {
                eprintln!("warning: item {id}: distortion left the image unchanged");
            }
            println!("wrote {} items to {}", summary.manifest.items.len(), out.join("manifest.jsonl").display());
            Ok(())
        }
        Cmd::Validate { manifest, plan, no_files } => {
            let plan = plan.as_deref().map(|p| load_plan(p, &cfg)).transpose()?;
            let m = Manifest::load(manifest)?;
            let base = parent_dir(manifest);
            let findings = validate_manifest(&m, (!no_files).then_some(base.as_path()), plan.as_ref());
            if findings.is_empty() {
                println!("ok: {} items", m.items.len());
                return Ok(());
            }
            for f in &findings {
                eprintln!("{f}");
            }
            eprintln!("{} finding(s)", findings.len());
            Err(Failure::Findings)
        }
        Cmd::Rollout {
            manifest,
            out,
            scripts,
            corpus,
            baseline,
        } => {
            let code = code_backend(&cli, &cfg)?;
            let m = Manifest::load(manifest)?;
            let model: Box<dyn ModelProvider> = match (scripts, cli.offline) {
                (Some(p), _) => Box::new(ScriptedModel::load_jsonl(p)?),
                (None, true) => Box::new(NullModel),
                (None, false) => Box::new(ChatModel::new(cfg.model.clone())?),
            };
            let search: Option<Arc<dyn SearchBackend>> = match (corpus, cli.offline) {
                (Some(p), _) => Some(Arc::new(FixtureIndex::load_jsonl(p)?)),
                (None, true) => None,
                (None, false) => Some(Arc::new(SerperBackend::new(cfg.search.clone())?)),
            };
            let tools = ToolSet { search, code: Some(code) };
            let rcfg = RolloutConfig {
                baseline: *baseline || cfg.rollout.baseline,
                record_latency: cfg.rollout.record_latency && !cli.offline,
                ..cfg.rollout.clone()
            };
            let results = run_batch(&m.items, &parent_dir(manifest), model.as_ref(), &tools, &rcfg);

            let tdir = out.join("transcripts");
            fs::create_dir_all(&tdir)?;
            let mut preds = Vec::with_capacity(results.len());
            let mut failed = 0;
            for (item, res) in m.items.iter().zip(results) {
                match res {
                    Ok(t) => {
                        let rel = format!("transcripts/{}.json", item.id);
                        fs::write(out.join(&rel), t.to_json() + "\n")?;
                        preds.push(Prediction {
                            id: item.id.clone(),
                            answer: t.final_answer.clone(),
                            transcript: Some(rel),
                        });
                    }
                    Err(e) => {
                        failed += 1;
                        eprintln!("item {}: {e}", item.id);
                        preds.push(Prediction {
                            id: item.id.clone(),
                            answer: None,
                            transcript: None,
                        });
                    }
                }
            }
            PredictionRun {
                run_id: "predictions".into(),
                predictions: preds,
            }
            .save(&out.join("predictions.jsonl"))?;
            println!("{} rollouts, {failed} failed, written to {}", m.items.len(), out.display());
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} rollout(s) failed")));
            }
            Ok(())
        }
        Cmd::Score { manifest, run, format } => {
            let m = Manifest::load(manifest)?;
            let r = PredictionRun::load(run)?;
            let report = score_run(&r, &m)?;
            print!("{}", render_report(&report, (*format).into()));
            Ok(())
        }
        Cmd::Reward { manifest, run } => {
            #[derive(Serialize)]
            struct Row<'a> {
                id: &'a str,
                #[serde(flatten)]
                reward: RewardBreakdown,
            }
            let m = Manifest::load(manifest)?;
            let r = PredictionRun::load(run)?;
            let emb = embedder(&cli, &cfg)?;
            let base = parent_dir(run);
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            let mut sum = 0.0;
            let mut n = 0;
            for p in &r.predictions {
                let Some(rel) = &p.transcript else { continue };
                let item = m
                    .get(&p.id)
                    .ok_or_else(|| Failure::Runtime(format!("prediction for unknown item id {}", p.id)))?;
                let text = fs::read_to_string(base.join(rel))?;
                let t: Transcript = serde_json::from_str(&text)?;
                let key = AnswerKey {
                    gold_answers: item.gold_answers.clone(),
                    reference_queries: item.reference_queries.clone(),
                };
                let reward = total_reward(&t.trajectory, &key, emb.as_ref());
                sum += reward.total;
                n += 1;
                writeln!(out, "{}", serde_json::to_string(&Row { id: &p.id, reward })?)?;
            }
            eprintln!("{n} transcripts, mean total reward {:.4}", if n > 0 { sum / n as f64 } else { 0.0 });
            Ok(())
        }
        Cmd::TrainToy { updates, log } => {
            let gcfg = toolrl_core::grpo::GrpoConfig {
                seed: cli.seed.unwrap_or(cfg.grpo.seed),
                updates: updates.unwrap_or(cfg.grpo.updates),
                ..cfg.grpo.clone()
            };
            let env = ToyEnv::default();
            let mut file = log.as_ref().map(fs::File::create).transpose()?.map(std::io::BufWriter::new);
            let res = train_toy(
                &env,
                PolicyParams::uniform(TOY_STATES, env.vocab),
                &gcfg,
                file.as_mut().map(|f| f as &mut dyn Write),
            )?;
            if let Some(f) = file.as_mut() {
                f.flush()?;
            }
            println!(
                "updates {}  oracle {:.3}  mean reward (last 50) {:.3}",
                res.log.len(),
                res.oracle_reward,
                res.tail_mean_reward(50)
            );
            Ok(())
        }
    }
}
