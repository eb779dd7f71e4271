use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lsrm::harness::checks::{scene_corpus, CheckResult};
use lsrm::harness::compare::{compare_layers, write_comparison, Reference};
use lsrm::harness::config::{Overrides, RunConfig};
use lsrm::harness::run::{cmd_run, dry_run};
use lsrm::harness::verify::{check_goldens, run_suite, write_goldens, Suite, SuiteReport};
use lsrm::harness::{exit_code, EXIT_CONFIG, EXIT_PASS, EXIT_VERIFY_FAILED};
use lsrm::parallel::imbalance_report;
use lsrm::pipeline::{build_instance, stage_one, Model, RoutingMode};
use lsrm::scene::SceneFile;
use lsrm::{LsrmError, Result};

#[derive(Parser)]
#[command(name = "lsrm", version, about = "Sparse-attention reconstruction runs and verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoutingArg {
    Score,
    #[value(name = "3d")]
    ThreeD,
}

impl From<RoutingArg> for RoutingMode {
    fn from(r: RoutingArg) -> Self {
        match r {
            RoutingArg::Score => RoutingMode::Score,
            RoutingArg::ThreeD => RoutingMode::ThreeD,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    routing: Option<RoutingArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            workers: self.workers,
            routing: self.routing.map(Into::into),
            seed: self.seed,
            out: self.out.clone(),
        })?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Stage 1, masks, routing and Stage 2; writes artifacts and summary.json.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Print token estimates without running the networks.
        #[arg(long)]
        dry_run: bool,
    },
    /// Oracle suites: attention, routing, pipeline, parallel, all, golden.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Directory for the result file.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Frozen golden directory; also checked alongside any suite.
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Per-layer overlap between logit top-k and the geometric plan. With
    /// `--routing 3d` the plan is compared with itself.
    CompareRouting {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Write a built-in scene as a scene file.
    Scene {
        #[arg(long, default_value = "sphere")]
        preset: String,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-aware versus naive load imbalance over random scenes.
    Balance {
        #[arg(long, default_value_t = 8)]
        workers: usize,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Regenerate golden vectors.
    Golden {
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn print_check(c: &CheckResult) {
    let status = if c.passed { "PASS" } else { "FAIL" };
    println!(
        "{status} {:<42} cases={:<6} max_err={:.3e} tol={:.1e}  {}",
        c.name, c.cases, c.max_error, c.tolerance, c.detail
    );
    if let Some(f) = &c.first_failure {
        println!("     first counterexample: {f}");
    }
}

fn verify(suite: &str, out: &Path, golden: Option<&Path>) -> Result<i32> {
    let (suite_id, mut results) = if suite == "golden" {
        let dir = golden.ok_or_else(|| LsrmError::Config("--suite golden needs --golden DIR".into()))?;
        (None, vec![check_goldens(dir)?])
    } else {
        let s: Suite = suite.parse()?;
        let mut r = run_suite(s)?;
        if let Some(dir) = golden {
            r.push(check_goldens(dir)?);
        }
        (Some(s), r)
    };
    results.iter().for_each(print_check);
    let report = SuiteReport::new(suite_id.unwrap_or(Suite::All), std::mem::take(&mut results));
    write_json(&out.join(format!("verify_{suite}.json")), &report)?;
    match &report.first_failure {
        None => Ok(EXIT_PASS),
        Some(f) => {
            eprintln!("verification failed: {f}");
            Ok(EXIT_VERIFY_FAILED)
        }
    }
}

fn compare_routing(args: &RunArgs) -> Result<i32> {
    let cfg = args.load()?;
    // the forward pass always follows the plan; --routing picks the reference
    let reference = match args.routing {
        Some(RoutingArg::ThreeD) => Reference::Plan,
        _ => Reference::Score,
    };
    let mut run_cfg = cfg.clone();
    run_cfg.routing = RoutingMode::ThreeD;
    let model = Model::random(&run_cfg.model, run_cfg.seed)?;
    let scene = run_cfg.scene()?;
    let s1 = stage_one(&model, &scene, run_cfg.feature_provider().as_ref())?;
    let inst = build_instance(&model, &scene, &s1, &run_cfg.instance_options())?;
    if inst.is_empty() {
        println!("no active tokens");
        return Ok(EXIT_PASS);
    }
    let (cmp, _) = compare_layers(&inst, &model.sparse_blocks, run_cfg.budgets, reference)?;
    write_comparison(&cfg.out, &inst, &cmp)?;
    println!("layer table queries mean_jaccard");
    for r in &cmp.rows {
        println!("{:>5} {:>5} {:>7} {:.4}", r.layer, r.table, r.queries, r.mean_jaccard);
    }
    Ok(EXIT_PASS)
}

fn balance(workers: usize, instances: usize, seed: u64, out: &Path) -> Result<i32> {
    let corpus = scene_corpus(instances, seed, 48, 24, 4)?;
    let pairs: Vec<_> = corpus.iter().map(|(v, i)| (v, i)).collect();
    let rows = imbalance_report(&pairs, workers)?;
    let mut csv = String::from("instance,block_aware_ratio,naive_ratio\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.instance, r.block_aware_ratio, r.naive_ratio));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("imbalance.csv"), csv)?;
    let wins = rows.iter().filter(|r| r.block_aware_ratio <= r.naive_ratio).count();
    println!("block-aware no worse than naive on {wins}/{} instances at W={workers}", rows.len());
    Ok(EXIT_PASS)
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Run { args, dry_run: true } => {
            let est = dry_run(&args.load()?)?;
            println!("{}", serde_json::to_string_pretty(&est)?);
            Ok(EXIT_PASS)
        }
        Cmd::Run { args, dry_run: false } => {
            let summary = cmd_run(&args.load()?)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(EXIT_PASS)
        }
        Cmd::Verify { suite, out, golden } => verify(&suite, &out, golden.as_deref()),
        Cmd::CompareRouting { args } => compare_routing(&args),
        Cmd::Scene { preset, views, out } => {
            if !lsrm::scene::PRESETS.contains(&preset.as_str()) {
                return Err(LsrmError::Config(format!("unknown scene preset {preset:?}")));
            }
            write_json(&out, &SceneFile::preset(&preset, views))?;
            Ok(EXIT_PASS)
        }
        Cmd::Balance {
            workers,
            instances,
            seed,
            out,
        } => balance(workers, instances, seed, &out),
        Cmd::Golden { out } => {
            for name in write_goldens(&out)? {
                println!("{}", out.join(name).display());
            }
            Ok(EXIT_PASS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors, not failed verifications
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("LSRM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second global pool cannot be built; the first one wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let code = match dispatch(cli.cmd) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
