//! Command-line front end.
//!
//! Each setting resolves as flag, then `--config` file entry, then default.
//! Config files hold `key = value` lines keyed by long flag names (`#` starts
//! a comment). Outputs are written atomically under `--out-dir`, and every
//! run records its resolved settings in `manifest_<command>.txt`, which can
//! be passed back as `--config` to repeat the run. Angles are in degrees on
//! the command line and in every file.
//!
//! Exit codes: 0 success, 1 non-convergence or failed check, 2 bad input.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basin::{estimate_basin, sample_in_basin, verify_at_radius, CenterChoice, RadiusChoice};
use crate::error::{Error, Result};
use crate::network::{load_case, GridCase, StateVector};
use crate::neural::{
    evaluate, evaluate_zero, generate_dataset, metrics_table, train, Dataset, DatasetConfig,
    InitModel, ParamRanges, Scheme, Split, TrainConfig,
};
use crate::nr::{convergence_map, fast_component_size, nr_solve, NrConfig};
use crate::rl::eval::{default_axes, eval_policy};
use crate::rl::{train_ppo, EnvConfig, GaussianPolicy, PpoConfig};

#[derive(Parser, Debug)]
#[command(
    name = "pflab",
    version,
    about = "Newton-Raphson power flow and initialization experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Seed for every random draw [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// `key = value` settings file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct NrArgs {
    /// Mismatch tolerance [default: 1e-8]
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Iteration cap [default: 50]
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve one case from a chosen initial guess
    Solve(SolveArgs),
    /// Iteration counts over a grid of uniform initial guesses
    Map(MapArgs),
    /// Basin-of-attraction radii and a warm-start check
    Basin(BasinArgs),
    /// Generate a labeled two-bus dataset
    GenData(GenDataArgs),
    /// Train an initializer network
    Train(TrainArgs),
    /// Evaluate initializers on the test split
    Eval(EvalArgs),
    /// Train the guess-adjustment agent
    RlTrain(RlTrainArgs),
    /// Steps-to-target map and traces for a trained agent
    RlEval(RlEvalArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct SolveArgs {
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// flat | zero | file | basin [default: flat]
    #[arg(long)]
    pub init: Option<InitKind>,
    /// `bus,v,theta_deg` file for `--init file`
    #[arg(long)]
    pub init_file: Option<PathBuf>,
    /// nominal | slack for `--init basin` [default: nominal]
    #[arg(long)]
    pub center: Option<CenterArg>,
    /// min | max for `--init basin` [default: min]
    #[arg(long)]
    pub radius: Option<RadiusArg>,
    #[command(flatten)]
    pub nr: NrArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct MapArgs {
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// [default: 0.5]
    #[arg(long)]
    pub v_min: Option<f64>,
    /// [default: 2.0]
    #[arg(long)]
    pub v_max: Option<f64>,
    /// [default: -90]
    #[arg(long, allow_negative_numbers = true)]
    pub theta_min: Option<f64>,
    /// [default: 90]
    #[arg(long, allow_negative_numbers = true)]
    pub theta_max: Option<f64>,
    /// Grid points per axis [default: 100]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Iteration bound defining the fast region [default: 3]
    #[arg(long)]
    pub fast_iterations: Option<usize>,
    #[command(flatten)]
    pub nr: NrArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct BasinArgs {
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// nominal | slack | previous [default: previous]
    #[arg(long)]
    pub center: Option<CenterArg>,
    /// min | max [default: min]
    #[arg(long)]
    pub radius: Option<RadiusArg>,
    /// Warm starts to test [default: 500]
    #[arg(long)]
    pub samples: Option<usize>,
    #[command(flatten)]
    pub nr: NrArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GenDataArgs {
    /// [default: 100]
    #[arg(long)]
    pub systems: Option<usize>,
    /// Operating points per system [default: 10]
    #[arg(long)]
    pub states: Option<usize>,
    /// Systems held out for testing [default: 10]
    #[arg(long)]
    pub test_systems: Option<usize>,
    #[arg(long)]
    pub r_min: Option<f64>,
    #[arg(long)]
    pub r_max: Option<f64>,
    #[arg(long)]
    pub x_min: Option<f64>,
    #[arg(long)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub p_min: Option<f64>,
    #[arg(long)]
    pub p_max: Option<f64>,
    #[arg(long)]
    pub q_min: Option<f64>,
    #[arg(long)]
    pub q_max: Option<f64>,
    #[command(flatten)]
    pub nr: NrArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Dataset CSV from `gen-data`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// supervised | unsupervised | semisupervised [default: supervised]
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// [default: 0.001]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Final learning rate as a fraction of the initial one [default: 0.01]
    #[arg(long)]
    pub final_lr_fraction: Option<f64>,
    /// [default: 500]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// MSE weight in the semisupervised loss [default: 0.5]
    #[arg(long)]
    pub data_weight: Option<f64>,
    /// Hidden layer widths [default: 64,64]
    #[arg(long)]
    pub hidden: Option<Widths>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated model files
    #[arg(long)]
    pub models: Option<PathList>,
    /// zero | none [default: zero]
    #[arg(long)]
    pub baseline: Option<Baseline>,
    #[command(flatten)]
    pub nr: NrArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EnvArgs {
    /// Two-bus case file [default: built-in benchmark, y = 100 + j10, load 0.9 + j0.6]
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// [default: 3]
    #[arg(long)]
    pub target_k: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RlTrainArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// [default: 200000]
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// [default: 0.0001]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [default: 0.99]
    #[arg(long)]
    pub discount: Option<f64>,
    /// [default: 2048]
    #[arg(long)]
    pub rollout_steps: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.2]
    #[arg(long)]
    pub clip_range: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    /// [default: 0.95]
    #[arg(long)]
    pub gae_lambda: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    pub value_coef: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// [default: 64,64]
    #[arg(long)]
    pub hidden: Option<Widths>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RlEvalArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Grid points per axis [default: 20]
    #[arg(long)]
    pub grid: Option<usize>,
    /// Trace starts as `v:theta_deg` pairs, comma-separated [default: the
    /// grid start with the largest initial iteration count]
    #[arg(long, allow_negative_numbers = true)]
    pub traces: Option<Points>,
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        "'{other}' is not one of: {}",
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $(Self::$variant => $text),+
                })
            }
        }
    };
}

keyword_enum!(InitKind { Flat => "flat", Zero => "zero", File => "file", Basin => "basin" });
keyword_enum!(CenterArg { Nominal => "nominal", Slack => "slack", Previous => "previous" });
keyword_enum!(RadiusArg { Min => "min", Max => "max" });
keyword_enum!(Baseline { Zero => "zero", None => "none" });

impl From<RadiusArg> for RadiusChoice {
    fn from(r: RadiusArg) -> Self {
        match r {
            RadiusArg::Min => RadiusChoice::Min,
            RadiusArg::Max => RadiusChoice::Max,
        }
    }
}

/// Comma-separated layer widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&w| w > 0)
                    .ok_or_else(|| Error::InvalidArgument(format!("bad layer width '{t}'")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Widths)
    }
}

impl Display for Widths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Comma-separated paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathList(pub Vec<PathBuf>);

impl FromStr for PathList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(PathList(
            s.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(PathBuf::from)
                .collect(),
        ))
    }
}

impl Display for PathList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.display().to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Comma-separated `v:theta_deg` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Points(pub Vec<(f64, f64)>);

impl FromStr for Points {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|pair| {
                let bad =
                    || Error::InvalidArgument(format!("bad point '{pair}', expected v:theta_deg"));
                let (v, t) = pair.trim().split_once(':').ok_or_else(bad)?;
                Ok((
                    v.trim().parse().map_err(|_| bad())?,
                    t.trim().parse().map_err(|_| bad())?,
                ))
            })
            .collect::<Result<Vec<_>>>()
            .map(Points)
    }
}

impl Display for Points {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(v, t)| format!("{v}:{t}")).collect();
        f.write_str(&parts.join(","))
    }
}

struct ConfigFile {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    fn empty() -> Self {
        Self {
            source: String::new(),
            entries: BTreeMap::new(),
        }
    }

    fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                field: "config".into(),
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    field: key,
                    message: "duplicate key".into(),
                });
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }
}

/// Settings resolution, output writing and manifest bookkeeping for one run.
struct Run {
    command: &'static str,
    config: ConfigFile,
    used: BTreeSet<String>,
    resolved: Vec<(String, String)>,
    out_dir: PathBuf,
    outputs: Vec<String>,
    seed: u64,
}

impl Run {
    fn new(command: &'static str, global: &GlobalArgs) -> Result<Self> {
        let config = match &global.config {
            Some(path) => {
                let text = crate::io::read_text(path)?;
                ConfigFile::parse(&text, &path.display().to_string())?
            }
            None => ConfigFile::empty(),
        };
        let mut run = Self {
            command,
            config,
            used: BTreeSet::new(),
            resolved: Vec::new(),
            out_dir: PathBuf::new(),
            outputs: Vec::new(),
            seed: 0,
        };
        run.seed = run.pick("seed", global.seed, 0u64)?;
        run.used.insert("out-dir".into());
        run.out_dir = match (&global.out_dir, run.config.entries.get("out-dir")) {
            (Some(p), _) => p.clone(),
            (None, Some((_, v))) => PathBuf::from(v),
            (None, None) => PathBuf::from("out"),
        };
        Ok(run)
    }

    fn lookup<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.config.entries.get(key) {
            Some((line, text)) => text.parse::<T>().map(Some).map_err(|e| Error::Parse {
                path: self.config.source.clone(),
                line: *line,
                field: key.to_string(),
                message: e.to_string(),
            }),
            None => Ok(None),
        }
    }

    fn pick<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let value = self.lookup(key, flag)?.unwrap_or(default);
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    fn pick_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let value = self.lookup(key, flag)?;
        if let Some(v) = &value {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(value)
    }

    fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.pick_opt(key, flag)?
            .ok_or_else(|| Error::InvalidArgument(format!("missing required setting --{key}")))
    }

    fn nr(&mut self, args: &NrArgs) -> Result<NrConfig> {
        let d = NrConfig::default();
        let tolerance = self.pick("tolerance", args.tolerance, d.tolerance)?;
        let max_iterations = self.pick("max-iterations", args.max_iterations, d.max_iterations)?;
        let cfg = NrConfig {
            tolerance,
            max_iterations,
            ill_conditioned_threshold: d.ill_conditioned_threshold.min(max_iterations),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        crate::io::write_atomic(&self.out_dir.join(name), contents.as_bytes())?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        for key in self.config.entries.keys() {
            if !self.used.contains(key) {
                eprintln!(
                    "warning: {}: setting '{key}' is not used by '{}'",
                    self.config.source, self.command
                );
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "# pflab {} {}", env!("CARGO_PKG_VERSION"), self.command);
        for (k, v) in &self.resolved {
            let _ = writeln!(s, "{k} = {v}");
        }
        for o in &self.outputs {
            let _ = writeln!(s, "# output {o}");
        }
        let name = format!("manifest_{}.txt", self.command.replace('-', "_"));
        self.write(&name, &s)
    }
}

/// Parse-free entry point: returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(&cli.global, a),
        Command::Map(a) => cmd_map(&cli.global, a),
        Command::Basin(a) => cmd_basin(&cli.global, a),
        Command::GenData(a) => cmd_gen_data(&cli.global, a),
        Command::Train(a) => cmd_train(&cli.global, a),
        Command::Eval(a) => cmd_eval(&cli.global, a),
        Command::RlTrain(a) => cmd_rl_train(&cli.global, a),
        Command::RlEval(a) => cmd_rl_eval(&cli.global, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => 1,
                _ => 2,
            }
        }
    }
}

fn state_csv(case: &GridCase, x: &StateVector) -> String {
    let (vm, va) = case.bus_voltages(x);
    let mut s = String::from("bus,v,theta_deg\n");
    for (i, (v, a)) in vm.iter().zip(&va).enumerate() {
        let _ = writeln!(s, "{},{},{}", i + 1, v, a.to_degrees());
    }
    s
}

/// Read a `bus,v,theta_deg` file; rows for the slack bus are ignored.
pub fn read_state(path: &Path, case: &GridCase) -> Result<StateVector> {
    let source = path.display().to_string();
    let text = crate::io::read_text(path)?;
    let err = |line: usize, field: &str, message: String| Error::Parse {
        path: source.clone(),
        line,
        field: field.into(),
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "bus,v,theta_deg" => {}
        _ => return Err(err(1, "header", "expected 'bus,v,theta_deg'".into())),
    }
    let pq = case.pq_buses();
    let mut v = vec![None; pq.len()];
    let mut theta = vec![0.0; pq.len()];
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 3 {
            return Err(err(
                n,
                "row",
                format!("expected 3 cells, got {}", cells.len()),
            ));
        }
        let bus: usize = cells[0]
            .parse()
            .map_err(|e| err(n, "bus", format!("{e}")))?;
        let vm: f64 = cells[1].parse().map_err(|e| err(n, "v", format!("{e}")))?;
        let ta: f64 = cells[2]
            .parse()
            .map_err(|e| err(n, "theta_deg", format!("{e}")))?;
        if bus == 0 || bus > case.n_buses() {
            return Err(err(
                n,
                "bus",
                format!("bus {bus} outside 1..={}", case.n_buses()),
            ));
        }
        if let Some(k) = pq.iter().position(|&b| b == bus - 1) {
            v[k] = Some(vm);
            theta[k] = ta.to_radians();
        }
    }
    let v = v
        .into_iter()
        .enumerate()
        .map(|(k, x)| x.ok_or_else(|| err(0, "bus", format!("no row for bus {}", pq[k] + 1))))
        .collect::<Result<Vec<_>>>()?;
    Ok(StateVector::new(v, theta))
}

fn center_choice(center: CenterArg, case: &GridCase, nr: &NrConfig) -> Result<CenterChoice> {
    Ok(match center {
        CenterArg::Nominal => CenterChoice::Nominal,
        CenterArg::Slack => CenterChoice::Slack,
        CenterArg::Previous => {
            let run = nr_solve(case, &StateVector::flat(case.n_pq()), nr);
            if !run.converged {
                return Err(Error::InvalidArgument(
                    "center 'previous' needs a flat-start solution, which did not converge".into(),
                ));
            }
            CenterChoice::PreviousSolution(run.solution)
        }
    })
}

fn cmd_solve(global: &GlobalArgs, a: &SolveArgs) -> Result<i32> {
    let mut run = Run::new("solve", global)?;
    let case_path: PathBuf = run
        .require("case", a.case.clone().map(PathBufArg))
        .map(|p| p.0)?;
    let case = load_case(&case_path)?;
    let init = run.pick("init", a.init, InitKind::Flat)?;
    let nr = run.nr(&a.nr)?;
    let m = case.n_pq();
    let x0 = match init {
        InitKind::Flat => StateVector::flat(m),
        InitKind::Zero => StateVector::uniform(m, 0.0, 0.0),
        InitKind::File => {
            let p = run.require("init-file", a.init_file.clone().map(PathBufArg))?;
            read_state(&p.0, &case)?
        }
        InitKind::Basin => {
            let center = run.pick("center", a.center, CenterArg::Nominal)?;
            let radius = run.pick("radius", a.radius, RadiusArg::Min)?;
            let est = estimate_basin(&case, &center_choice(center, &case, &nr)?)?;
            sample_in_basin(&est, &case, &mut run.rng(), radius.into())?
        }
    };
    let result = nr_solve(&case, &x0, &nr);
    let mut report = String::new();
    let _ = writeln!(report, "case        {}", case_path.display());
    let _ = writeln!(report, "init        {init}");
    let _ = writeln!(report, "converged   {}", result.converged);
    let _ = writeln!(report, "iterations  {}", result.iterations);
    let _ = writeln!(
        report,
        "failure     {}",
        result.failure.map_or("none".to_string(), |f| f.to_string())
    );
    let _ = writeln!(report, "residual history (max-norm)");
    for (k, r) in result.residual_norms.iter().enumerate() {
        let _ = writeln!(report, "  {k:>3}  {r:.6e}");
    }
    if result.converged {
        let _ = writeln!(report, "solution");
        let (vm, va) = case.bus_voltages(&result.solution);
        for (i, (v, t)) in vm.iter().zip(&va).enumerate() {
            let _ = writeln!(
                report,
                "  bus {:>3}  v {v:.9}  theta_deg {:.9}",
                i + 1,
                t.to_degrees()
            );
        }
        run.write("solution.csv", &state_csv(&case, &result.solution))?;
    }
    print!("{report}");
    run.write("solve_report.txt", &report)?;
    run.finish()?;
    Ok(if result.converged { 0 } else { 1 })
}

/// `PathBuf` wrapper so paths go through the same resolve-and-record path.
#[derive(Debug, Clone)]
struct PathBufArg(PathBuf);

impl FromStr for PathBufArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(PathBufArg(PathBuf::from(s)))
    }
}

impl Display for PathBufArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

fn path_setting(run: &mut Run, key: &str, flag: &Option<PathBuf>) -> Result<PathBuf> {
    run.require(key, flag.clone().map(PathBufArg)).map(|p| p.0)
}

fn cmd_map(global: &GlobalArgs, a: &MapArgs) -> Result<i32> {
    let mut run = Run::new("map", global)?;
    let case_path = path_setting(&mut run, "case", &a.case)?;
    let case = load_case(&case_path)?;
    let v_min = run.pick("v-min", a.v_min, 0.5)?;
    let v_max = run.pick("v-max", a.v_max, 2.0)?;
    let t_min = run.pick("theta-min", a.theta_min, -90.0)?;
    let t_max = run.pick("theta-max", a.theta_max, 90.0)?;
    let res = run.pick("resolution", a.resolution, 100usize)?;
    let fast = run.pick("fast-iterations", a.fast_iterations, 3usize)?;
    let nr = run.nr(&a.nr)?;
    let map = convergence_map(
        &case,
        (v_min, v_max),
        (t_min.to_radians(), t_max.to_radians()),
        (res, res),
        &nr,
        None,
    )?;
    let n_fast = map.cells.iter().filter(|c| c.iterations <= fast).count();
    let mut s = String::new();
    let _ = writeln!(s, "case                 {}", case_path.display());
    let _ = writeln!(s, "grid                 {res} x {res}");
    let _ = writeln!(
        s,
        "converged cells      {}",
        map.cells.iter().filter(|c| c.converged).count()
    );
    let _ = writeln!(s, "fast cells (<= {fast})    {n_fast}");
    let mut connected = false;
    match map.reference_cell() {
        Some((iv, it)) => {
            let comp = fast_component_size(&map, (iv, it), fast);
            connected = comp == n_fast && n_fast > 0;
            let _ = writeln!(
                s,
                "reference cell       v {:.6} theta_deg {:.6} iterations {}",
                map.v_axis[iv],
                map.theta_axis[it].to_degrees(),
                map.cell(iv, it).iterations
            );
            let _ = writeln!(s, "reference component  {comp}");
        }
        None => {
            let _ = writeln!(s, "reference cell       none (flat start did not converge)");
        }
    }
    let _ = writeln!(
        s,
        "fast region connected and contains reference  {connected}"
    );
    print!("{s}");
    run.write("map.csv", &map.to_csv())?;
    run.write("map_summary.txt", &s)?;
    run.finish()?;
    Ok(0)
}

fn cmd_basin(global: &GlobalArgs, a: &BasinArgs) -> Result<i32> {
    let mut run = Run::new("basin", global)?;
    let case_path = path_setting(&mut run, "case", &a.case)?;
    let case = load_case(&case_path)?;
    let center = run.pick("center", a.center, CenterArg::Previous)?;
    let radius = run.pick("radius", a.radius, RadiusArg::Min)?;
    let samples = run.pick("samples", a.samples, 500usize)?;
    let nr = run.nr(&a.nr)?;
    let est = estimate_basin(&case, &center_choice(center, &case, &nr)?)?;
    let mut s = String::new();
    let _ = writeln!(s, "case     {}", case_path.display());
    let _ = writeln!(s, "center   {center}");
    s.push_str(&est.report());
    let code = if est.valid {
        let r = est.radius(radius.into());
        let report = verify_at_radius(&case, &est, r, samples, &nr, &mut run.rng())?;
        let _ = writeln!(s, "warm starts within the r_{radius} ball");
        s.push_str(&report.report());
        0
    } else {
        let _ = writeln!(s, "estimate invalid: fewer than two positive radii");
        1
    };
    print!("{s}");
    run.write("basin_report.txt", &s)?;
    run.write("bands.csv", &est.bands_csv(&case))?;
    run.finish()?;
    Ok(code)
}

fn cmd_gen_data(global: &GlobalArgs, a: &GenDataArgs) -> Result<i32> {
    let mut run = Run::new("gen-data", global)?;
    let d = DatasetConfig::default();
    let r = d.ranges;
    let cfg = DatasetConfig {
        n_systems: run.pick("systems", a.systems, d.n_systems)?,
        n_states: run.pick("states", a.states, d.n_states)?,
        test_systems: run.pick("test-systems", a.test_systems, d.test_systems)?,
        ranges: ParamRanges {
            r: (
                run.pick("r-min", a.r_min, r.r.0)?,
                run.pick("r-max", a.r_max, r.r.1)?,
            ),
            x: (
                run.pick("x-min", a.x_min, r.x.0)?,
                run.pick("x-max", a.x_max, r.x.1)?,
            ),
            p_load: (
                run.pick("p-min", a.p_min, r.p_load.0)?,
                run.pick("p-max", a.p_max, r.p_load.1)?,
            ),
            q_load: (
                run.pick("q-min", a.q_min, r.q_load.0)?,
                run.pick("q-max", a.q_max, r.q_load.1)?,
            ),
        },
    };
    let nr = run.nr(&a.nr)?;
    let data = generate_dataset(&cfg, &mut run.rng(), &nr)?;
    println!(
        "records {}  train {}  test {}  flagged {}",
        data.records.len(),
        data.split(Split::Train).len(),
        data.split(Split::Test).len(),
        data.n_flagged()
    );
    run.write("dataset.csv", &data.to_csv())?;
    run.finish()?;
    Ok(0)
}

fn cmd_train(global: &GlobalArgs, a: &TrainArgs) -> Result<i32> {
    let mut run = Run::new("train", global)?;
    let data_path = path_setting(&mut run, "data", &a.data)?;
    let data = Dataset::load(&data_path)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        scheme: run.pick("scheme", a.scheme, d.scheme)?,
        learning_rate: run.pick("learning-rate", a.learning_rate, d.learning_rate)?,
        final_lr_fraction: run.pick(
            "final-lr-fraction",
            a.final_lr_fraction,
            d.final_lr_fraction,
        )?,
        epochs: run.pick("epochs", a.epochs, d.epochs)?,
        batch_size: run.pick("batch-size", a.batch_size, d.batch_size)?,
        data_weight: run.pick("data-weight", a.data_weight, d.data_weight)?,
        hidden: run
            .pick("hidden", a.hidden.clone(), Widths(d.hidden.clone()))?
            .0,
        seed: run.seed,
    };
    let (model, log) = train(&data, &cfg)?;
    if let Some(last) = log.epochs.last() {
        println!(
            "{} training: final epoch loss {:.6e}",
            cfg.scheme, last.loss
        );
    }
    run.write(&format!("model_{}.txt", cfg.scheme), &model.to_text())?;
    run.write(&format!("train_log_{}.csv", cfg.scheme), &log.to_csv())?;
    run.finish()?;
    Ok(0)
}

fn cmd_eval(global: &GlobalArgs, a: &EvalArgs) -> Result<i32> {
    let mut run = Run::new("eval", global)?;
    let data_path = path_setting(&mut run, "data", &a.data)?;
    let data = Dataset::load(&data_path)?;
    let models = run.pick("models", a.models.clone(), PathList(Vec::new()))?;
    let baseline = run.pick("baseline", a.baseline, Baseline::Zero)?;
    let nr = run.nr(&a.nr)?;
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test records".into()));
    }
    let mut metrics = Vec::new();
    if baseline == Baseline::Zero {
        metrics.push(evaluate_zero(&test, &nr)?);
    }
    let mut labels = BTreeSet::new();
    for path in &models.0 {
        let model = InitModel::load(path)?;
        let mut m = evaluate(&model, &test, &nr)?;
        // keep labels unique when two models share a scheme
        let base = m.label.clone();
        let mut k = 2;
        while !labels.insert(m.label.clone()) {
            m.label = format!("{base}_{k}");
            k += 1;
        }
        metrics.push(m);
    }
    if metrics.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to evaluate: give --models or --baseline zero".into(),
        ));
    }
    let table = metrics_table(&metrics);
    print!("{table}");
    run.write("metrics.txt", &table)?;
    for m in &metrics {
        run.write(&format!("samples_{}.csv", m.label), &m.samples_csv())?;
    }
    run.finish()?;
    Ok(0)
}

fn env_config(run: &mut Run, a: &EnvArgs) -> Result<EnvConfig> {
    let d = EnvConfig::default();
    let case = match run.pick_opt("case", a.case.clone().map(PathBufArg))? {
        Some(p) => load_case(&p.0)?,
        None => d.case.clone(),
    };
    let cfg = EnvConfig {
        case,
        target_k: run.pick("target-k", a.target_k, d.target_k)?,
        horizon: run.pick("horizon", a.horizon, d.horizon)?,
        nr: d.nr,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_rl_train(global: &GlobalArgs, a: &RlTrainArgs) -> Result<i32> {
    let mut run = Run::new("rl-train", global)?;
    let env = env_config(&mut run, &a.env)?;
    let d = PpoConfig::default();
    let cfg = PpoConfig {
        total_timesteps: run.pick("timesteps", a.timesteps, d.total_timesteps)?,
        learning_rate: run.pick("learning-rate", a.learning_rate, d.learning_rate)?,
        discount: run.pick("discount", a.discount, d.discount)?,
        rollout_steps: run.pick("rollout-steps", a.rollout_steps, d.rollout_steps)?,
        batch_size: run.pick("batch-size", a.batch_size, d.batch_size)?,
        epochs_per_update: run.pick("epochs", a.epochs, d.epochs_per_update)?,
        clip_range: run.pick("clip-range", a.clip_range, d.clip_range)?,
        entropy_coef: run.pick("entropy-coef", a.entropy_coef, d.entropy_coef)?,
        gae_lambda: run.pick("gae-lambda", a.gae_lambda, d.gae_lambda)?,
        value_coef: run.pick("value-coef", a.value_coef, d.value_coef)?,
        max_grad_norm: run.pick("max-grad-norm", a.max_grad_norm, d.max_grad_norm)?,
        hidden: run
            .pick("hidden", a.hidden.clone(), Widths(d.hidden.clone()))?
            .0,
        seed: run.seed,
    };
    let (policy, log) = train_ppo(&env, &cfg)?;
    if let Some(u) = log.updates.last() {
        println!(
            "{} updates, {} timesteps; last rollout mean return {:.3}, mean episode length {:.3}",
            log.updates.len(),
            u.timesteps,
            u.mean_return,
            u.mean_ep_len
        );
    }
    run.write("policy.txt", &policy.to_text())?;
    run.write("rl_log.csv", &log.to_csv())?;
    run.finish()?;
    Ok(0)
}

fn cmd_rl_eval(global: &GlobalArgs, a: &RlEvalArgs) -> Result<i32> {
    let mut run = Run::new("rl-eval", global)?;
    let env = env_config(&mut run, &a.env)?;
    let policy_path = path_setting(&mut run, "policy", &a.policy)?;
    let policy = GaussianPolicy::load(&policy_path)?;
    let grid = run.pick("grid", a.grid, 20usize)?;
    if grid == 0 {
        return Err(Error::InvalidArgument("grid must be >= 1".into()));
    }
    let traces = run.pick_opt("traces", a.traces.clone())?;
    let (va, ta) = default_axes(grid);
    let mut result = eval_policy(
        &policy,
        &env,
        &va,
        &ta,
        &traces.clone().map_or(Vec::new(), |p| p.0),
    );
    if traces.is_none() {
        let nt = ta.len();
        let worst = (0..result.map.start_k.len())
            .max_by(|&i, &j| {
                result.map.start_k[i]
                    .cmp(&result.map.start_k[j])
                    .then(j.cmp(&i))
            })
            .expect("grid is nonempty");
        let start = (va[worst / nt], ta[worst % nt]);
        result.traces = eval_policy(&policy, &env, &[], &[], &[start]).traces;
    }
    let map = &result.map;
    let hard: Vec<usize> = (0..map.steps.len())
        .filter(|&i| map.start_k[i] >= 10)
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, "policy                      {}", policy_path.display());
    let _ = writeln!(s, "grid                        {grid} x {grid}");
    let _ = writeln!(s, "target k                    {}", env.target_k);
    let _ = writeln!(s, "horizon                     {}", env.horizon);
    let _ = writeln!(
        s,
        "reached within horizon      {:.4}",
        map.reached_fraction()
    );
    let _ = writeln!(
        s,
        "starts with k0 >= 10        {} (reached {})",
        hard.len(),
        hard.iter()
            .filter(|&&i| map.steps[i] <= env.horizon)
            .count()
    );
    for (i, t) in result.traces.iter().enumerate() {
        let r0 = &t.rows[0];
        let _ = writeln!(
            s,
            "trace {i}: v0 {} theta0_deg {} k0 {} steps {}",
            r0.v,
            r0.theta_deg,
            r0.k,
            t.steps_to_target
                .map_or("never".to_string(), |n| n.to_string())
        );
    }
    print!("{s}");
    run.write("steps_map.csv", &map.to_csv())?;
    for (i, t) in result.traces.iter().enumerate() {
        run.write(&format!("trace_{i}.csv"), &t.to_csv())?;
    }
    run.write("rl_eval.txt", &s)?;
    run.finish()?;
    Ok(0)
}
