use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use fimsel::estimate::{sweep_pools, SweepConfig, SweepReport};
use fimsel::select::run_selector;
use fimsel::{build_pools, builtin_scenario, Algorithm, BuiltinExample, JointSelection, Scenario, ScenarioPools};
use log::info;
use sha2::{Digest, Sha256};

use crate::output::{self, RunManifest};
use crate::{CliError, DemoArgs, GlobalArgs, SelectArgs, SweepArgs};

const BUILTIN_PREFIX: &str = "builtin:";

/// A scenario with the text it was resolved to, which is what gets hashed.
struct Resolved {
    scenario: Scenario,
    text: String,
}

impl Resolved {
    fn load(config: &str) -> Result<Self, CliError> {
        let scenario = match config.strip_prefix(BUILTIN_PREFIX) {
            Some(tag) => builtin_scenario(tag.parse()?),
            None => {
                let path = Path::new(config);
                let text = fs::read_to_string(path)
                    .map_err(|e| fimsel::Error::Config(format!("{}: {e}", path.display())))?;
                Scenario::from_toml(&text)?
            }
        };
        let text = scenario.to_toml()?;
        Ok(Resolved { scenario, text })
    }

    fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

struct Timer {
    start: Instant,
    phase: Instant,
    timings: BTreeMap<String, f64>,
}

impl Timer {
    fn new() -> Self {
        let now = Instant::now();
        Timer { start: now, phase: now, timings: BTreeMap::new() }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        *self.timings.entry(name.to_owned()).or_default() += (now - self.phase).as_secs_f64();
        self.phase = now;
    }
}

fn finish(
    global: &GlobalArgs,
    command: String,
    resolved: &Resolved,
    seed: u64,
    timer: Timer,
    outputs: Vec<String>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command,
        config_sha256: resolved.sha256(),
        seed,
        version: env!("CARGO_PKG_VERSION"),
        wall_clock_s: timer.start.elapsed().as_secs_f64(),
        timings_s: timer.timings,
        outputs,
    };
    let path = output::write_manifest(&global.out, &manifest)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn run(pools: &ScenarioPools, algorithm: Algorithm, budget: Option<usize>, seed: u64) -> Result<JointSelection, CliError> {
    let pools_b = match budget {
        Some(b) => pools.with_budget(b),
        None => pools.pools.clone(),
    };
    Ok(run_selector(algorithm, &pools_b, &pools.q0, seed)?)
}

pub fn select(global: &GlobalArgs, args: &SelectArgs, name: &str) -> Result<(), CliError> {
    let mut timer = Timer::new();
    let resolved = Resolved::load(&args.config)?;
    let seed = global.seed.unwrap_or(resolved.scenario.seed);
    let pools = build_pools(&resolved.scenario)?;
    timer.lap("build_pools");
    let selection = run(&pools, args.algorithm, args.budget, seed)?;
    timer.lap("select");
    let rows = output::selection_rows(&selection, &pools)?;
    output::write_selection(&global.out.join("selection.csv"), &rows)?;
    timer.lap("write");
    let budget = args.budget.map(|b| format!(" --budget {b}")).unwrap_or_default();
    let command = format!("{name} {} --algorithm {}{budget}", args.config, args.algorithm);
    finish(global, command, &resolved, seed, timer, vec!["selection.csv".into()])
}

fn write_sweep(dir: &Path, report: &SweepReport, pools: &ScenarioPools) -> Result<(), CliError> {
    output::write_error_curve(&dir.join("error_curve.csv"), report)?;
    output::write_mix(&dir.join("mix.csv"), &report.mix, pools)
}

pub fn sweep(global: &GlobalArgs, args: &SweepArgs) -> Result<(), CliError> {
    let mut timer = Timer::new();
    let resolved = Resolved::load(&args.config)?;
    let seed = global.seed.unwrap_or(resolved.scenario.seed);
    let pools = build_pools(&resolved.scenario)?;
    timer.lap("build_pools");
    let cfg = SweepConfig { budgets: args.budgets.clone(), trials: args.trials, selectors: args.selectors.clone(), seed };
    let report = sweep_pools(&pools, &cfg)?;
    timer.lap("sweep");
    write_sweep(&global.out, &report, &pools)?;
    timer.lap("write");
    let list = |v: Vec<String>| v.join(",");
    let command = format!(
        "sweep {} --budgets {} --trials {} --selectors {}",
        args.config,
        list(args.budgets.iter().map(|b| b.to_string()).collect()),
        args.trials,
        list(args.selectors.iter().map(|s| s.to_string()).collect()),
    );
    finish(global, command, &resolved, seed, timer, vec!["error_curve.csv".into(), "mix.csv".into()])
}

/// Budgets at which the demo writes selections, and the sweep budgets.
fn demo_budgets(tag: BuiltinExample) -> (&'static [usize], &'static [usize]) {
    match tag {
        BuiltinExample::Example1 => (&[10, 50, 100], &[10, 50, 100]),
        BuiltinExample::Example2 => (&[10], &[5, 10, 20, 50, 100]),
        BuiltinExample::Example3 => (&[10], &[5, 10, 20, 50]),
        BuiltinExample::Cooperative => (&[10], &[2, 5, 10, 20]),
    }
}

pub fn demo(global: &GlobalArgs, args: &DemoArgs) -> Result<(), CliError> {
    let mut timer = Timer::new();
    let resolved = Resolved::load(&format!("{BUILTIN_PREFIX}{}", args.tag))?;
    let seed = global.seed.unwrap_or(resolved.scenario.seed);
    let out = &global.out;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, &resolved.text).map_err(|e| CliError::io(&config_path, e))?;
    let pools = build_pools(&resolved.scenario)?;
    timer.lap("build_pools");

    let (select_budgets, sweep_budgets) = demo_budgets(args.tag);
    let mut outputs = vec!["config.toml".to_owned()];
    for &b in select_budgets {
        let dir = out.join(format!("B{b}"));
        let mut named = vec![("fim", run(&pools, Algorithm::Greedy, Some(b), seed)?)];
        if args.tag == BuiltinExample::Cooperative {
            named.push(("cooperative", run(&pools, Algorithm::Cooperative, Some(b), seed)?));
        }
        named.push(("random", run(&pools, Algorithm::Random, Some(b), seed)?));
        timer.lap("select");
        for (name, sel) in &named {
            let file = format!("selection_{name}.csv");
            output::write_selection(&dir.join(&file), &output::selection_rows(sel, &pools)?)?;
            outputs.push(format!("B{b}/{file}"));
        }
        let refs: Vec<(&str, &JointSelection)> = named.iter().map(|(n, s)| (*n, s)).collect();
        output::write_path(&dir.join("path.csv"), &pools, &refs)?;
        outputs.push(format!("B{b}/path.csv"));
        timer.lap("write");
    }

    let selectors = match args.tag {
        BuiltinExample::Cooperative => vec![Algorithm::Independent, Algorithm::Cooperative],
        _ => vec![Algorithm::Greedy, Algorithm::Random],
    };
    let cfg = SweepConfig { budgets: sweep_budgets.to_vec(), trials: args.trials, selectors, seed };
    let report = sweep_pools(&pools, &cfg)?;
    timer.lap("sweep");
    write_sweep(out, &report, &pools)?;
    outputs.extend(["error_curve.csv".to_owned(), "mix.csv".to_owned()]);
    timer.lap("write");
    let command = format!("demo {} --trials {}", args.tag, args.trials);
    finish(global, command, &resolved, seed, timer, outputs)
}
