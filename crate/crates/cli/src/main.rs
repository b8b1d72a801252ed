//! `frontal-lab`: catalog, analysis, Blaschke fields and reconstruction from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use frontal_core::blaschke::Blaschke;
use frontal_core::catalog::{self, CatalogEntry, CatalogError, FrontalFile};
use frontal_core::config::{Config, ConfigError};
use frontal_core::equiaffine::EquiaffineError;
use frontal_core::frame::{FrameError, Frontal, Grid, Rect};
use frontal_core::reconstruct::{ReconstructError, StructureData, StructureFile};
use frontal_core::report::{self, Artifacts, Bound, Judged, ReportDocument};

#[derive(Parser)]
#[command(name = "frontal-lab", version, about = "Equiaffine invariants of frontals")]
struct Cli {
    /// TOML file of tolerance and step overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single override, `KEY=VALUE`; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print machine-readable JSON instead of a summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List catalog entries, or build a generator surface.
    Catalog(CatalogArgs),
    /// Frame data, singular set and wave-front / non-parabolic verdicts.
    Analyze(Target),
    /// Blaschke field, its verification and the improper-sphere verdict.
    Blaschke(Target),
    /// Rebuild a frontal from structure data.
    Reconstruct(Target),
    /// Run the invariant suite on one frontal.
    Check(Target),
    /// Write structure data or a surface mesh.
    Export(ExportArgs),
}

#[derive(Args)]
struct CatalogArgs {
    /// Generator name; omit to list the fixed entries.
    generator: Option<String>,
    /// Height function `h(u1, u2)` (rank-one and representation generators).
    #[arg(long)]
    h: Option<String>,
    /// Coefficient `c` in `h_u1u1 + c h_u2u2 = 0` (rank-one generator).
    #[arg(long)]
    c: Option<String>,
    /// First coordinate function `a(u1, u2)` (non-parabolic generator).
    #[arg(long)]
    a: Option<String>,
    /// Second coordinate `b(u1, u2)` (representation and non-parabolic generators).
    #[arg(long)]
    b: Option<String>,
    /// `l(t)` for the representation generator; defaults to 1.
    #[arg(long)]
    l: Option<String>,
    /// `r(t)` for the representation generator; defaults to 0.
    #[arg(long)]
    r: Option<String>,
    /// Parameter rectangle `u1min,u1max,u2min,u2max`.
    #[arg(long)]
    domain: Option<String>,
    /// Directory for the report and mesh.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Target {
    /// Catalog entry name.
    #[arg(long, conflicts_with = "input")]
    entry: Option<String>,
    /// Frontal JSON (analyze, blaschke, check, export) or structure JSON (reconstruct).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Grid `NxM`.
    #[arg(long)]
    grid: Option<String>,
    /// Directory for the report and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Structure,
    Surface,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    target: Target,
    /// Artifact to write.
    #[arg(long, value_enum, default_value = "structure")]
    what: ExportKind,
}

/// Failure classes, mapped to stable exit codes.
#[derive(Debug)]
enum Failure {
    Input(String),
    Precondition(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Precondition(_) => 3,
            Failure::Verification(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Precondition(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<CatalogError> for Failure {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::Frame(f) => f.into(),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<FrameError> for Failure {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::SingularPoint { .. } | FrameError::Jet(_) => Failure::Verification(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<EquiaffineError> for Failure {
    fn from(e: EquiaffineError) -> Self {
        match e {
            EquiaffineError::KVanishes { .. } | EquiaffineError::NotTransversal { .. } => {
                Failure::Precondition(e.to_string())
            }
            EquiaffineError::Frame(f) => f.into(),
            EquiaffineError::Expr(_) => Failure::Input(e.to_string()),
            other => Failure::Verification(other.to_string()),
        }
    }
}

impl From<ReconstructError> for Failure {
    fn from(e: ReconstructError) -> Self {
        match e {
            ReconstructError::Input(m) => Failure::Input(m),
            ReconstructError::Equiaffine(q) => q.into(),
            other => Failure::Verification(other.to_string()),
        }
    }
}

fn parse_grid(s: Option<&str>, default: Grid) -> Result<Grid, Failure> {
    let Some(s) = s else { return Ok(default) };
    let bad = || Failure::Input(format!("grid must look like 101x101, got '{s}'"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (nx, ny): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if nx < 2 || ny < 2 {
        return Err(Failure::Input("grid needs at least 2 nodes per axis".into()));
    }
    Ok(Grid::new(nx, ny))
}

fn parse_domain(s: &str) -> Result<Rect, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Input(format!("domain must be four numbers, got '{s}'")))?;
    match v[..] {
        [a, b, c, d] if a < b && c < d => Ok(Rect::new((a, b), (c, d))),
        _ => Err(Failure::Input(format!("domain must be u1min,u1max,u2min,u2max with increasing bounds, got '{s}'"))),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::from_toml_str(&read(p)?)?,
        None => Config::default(),
    };
    for s in &cli.set {
        cfg.set(s)?;
    }
    Ok(cfg)
}

/// A resolved frontal with its catalog entry when it came from the catalog.
struct Subject {
    name: String,
    frontal: Frontal,
    entry: Option<CatalogEntry>,
}

fn subject(t: &Target, cfg: &Config, blaschke_domain: bool) -> Result<Subject, Failure> {
    match (&t.entry, &t.input) {
        (Some(name), None) => {
            let e = catalog::entry(name)?;
            let f = e.load(cfg)?;
            let f = if blaschke_domain { f.with_domain(e.blaschke_domain) } else { f };
            Ok(Subject { name: name.clone(), frontal: f, entry: Some(e) })
        }
        (None, Some(path)) => {
            let file = FrontalFile::from_json(&read(path)?)?;
            let f = file.load(cfg)?;
            Ok(Subject { name: file.name, frontal: f, entry: None })
        }
        _ => Err(Failure::Input("give exactly one of --entry or --input".into())),
    }
}

fn write_outputs(out: Option<&Path>, rep: &ReportDocument, art: &Artifacts) -> Result<(), Failure> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), rep.to_json())?;
        for (name, body) in art {
            std::fs::write(dir.join(name), body)?;
        }
    }
    Ok(())
}

fn judged_line(name: &str, j: &Judged) -> String {
    let op = match j.bound {
        Bound::AtMost => "<=",
        Bound::AtLeast => ">=",
    };
    format!("  {name:<36} {:>12.4e} {op} {:<10.1e} {}", j.value, j.tol, if j.holds { "yes" } else { "NO" })
}

fn summary(rep: &ReportDocument) -> String {
    let mut s = format!("{} {}\n", rep.command, rep.subject);
    if let Some(g) = rep.grid {
        s.push_str(&format!("  grid {}x{}\n", g.nx, g.ny));
    }
    if !rep.verdicts.is_empty() {
        s.push_str("verdicts\n");
        for (k, v) in &rep.verdicts {
            s.push_str(&judged_line(k, v));
            s.push('\n');
        }
    }
    if !rep.checks.is_empty() {
        s.push_str("checks\n");
        for (k, v) in &rep.checks {
            s.push_str(&judged_line(k, v));
            s.push('\n');
        }
    }
    for (k, v) in &rep.counts {
        s.push_str(&format!("  {k}: {v}\n"));
    }
    for (k, v) in &rep.points {
        let shown: Vec<String> = v.iter().take(6).map(|p| format!("({}, {})", p[0], p[1])).collect();
        let more = if v.len() > 6 { ", ..." } else { "" };
        s.push_str(&format!("  {k}: {}{more}\n", shown.join(", ")));
    }
    for (k, v) in &rep.notes {
        s.push_str(&format!("  {k}: {v}\n"));
    }
    s
}

fn finish(cli: &Cli, rep: &ReportDocument, art: &Artifacts, out: Option<&Path>) -> Result<(), Failure> {
    write_outputs(out, rep, art)?;
    if cli.json {
        print!("{}", rep.to_json());
    } else {
        print!("{}", summary(rep));
    }
    if rep.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("checks failed: {}", rep.failed_checks().join(", "))))
    }
}

fn abbreviate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

const DEFAULT_GRID: Grid = Grid { nx: 101, ny: 101 };
const EXTRACTION_GRID: Grid = Grid { nx: 201, ny: 201 };

fn cmd_catalog(cli: &Cli, args: &CatalogArgs, cfg: &Config) -> Result<(), Failure> {
    let Some(generator) = &args.generator else {
        let listing: Vec<_> = catalog::entries().iter().map(CatalogEntry::describe).collect();
        if cli.json {
            let doc = serde_json::json!({ "schema": report::SCHEMA, "entries": listing, "generators": catalog::GENERATORS });
            println!("{}", serde_json::to_string_pretty(&doc).expect("listing serializes"));
        } else {
            for d in &listing {
                println!("{:<12} [{}, {}] x [{}, {}]  {}", d.name, d.domain.u1.0, d.domain.u1.1, d.domain.u2.0, d.domain.u2.1, d.summary);
                for (k, v) in &d.known {
                    println!("{:<12}   {k} = {}", "", abbreviate(v, 96));
                }
            }
            println!("generators: {}", catalog::GENERATORS.join(", "));
        }
        return Ok(());
    };
    let mut params = BTreeMap::new();
    for (k, v) in [("h", &args.h), ("c", &args.c), ("a", &args.a), ("b", &args.b), ("l", &args.l), ("r", &args.r)] {
        if let Some(v) = v {
            params.insert(k.to_string(), v.clone());
        }
    }
    let domain = args.domain.as_deref().map(parse_domain).transpose()?;
    let e = catalog::generate(generator, &params, domain)?;
    let f = e.load(cfg)?;
    let mut rep = ReportDocument::new("catalog", generator, cfg);
    rep.domain = Some(f.domain);
    let grid = Grid::new(11, 11);
    rep.grid = Some(grid);
    if let Some(known) = &e.known.lambda_omega {
        let mut worst = 0.0f64;
        for u in grid.points(&f.domain) {
            let lam = frontal_core::jets::mat2_det(&f.jets(u, 0)?.lambda).value();
            let k = known.eval(u[0], u[1], None).map_err(|e| Failure::Input(e.to_string()))?;
            worst = worst.max((lam - k).abs() / (1.0 + k.abs()));
        }
        rep.checks.insert("lambda_omega_identity".into(), Judged::at_most(worst, 1e-8));
    }
    let d = e.describe();
    for (k, v) in d.definition.iter().chain(&d.known) {
        rep.notes.insert(k.clone(), v.clone());
    }
    let pts = grid.points(&f.domain);
    let xs: Vec<[f64; 3]> = pts.iter().map(|&u| Ok(f.jets(u, 0)?.x.value())).collect::<Result<_, FrameError>>()?;
    let mut art = Artifacts::new();
    art.insert("surface.obj".into(), report::surface_obj(generator, grid, &xs));
    finish(cli, &rep, &art, args.out.as_deref())
}

fn cmd_reconstruct(cli: &Cli, t: &Target, cfg: &Config) -> Result<(), Failure> {
    let (sd, reference, name, grid) = match (&t.entry, &t.input) {
        (None, Some(path)) => {
            let sd = StructureFile::from_json(&read(path)?)?.into_data()?;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "structure".into());
            (sd, None, name, parse_grid(t.grid.as_deref(), DEFAULT_GRID)?)
        }
        (Some(_), None) => {
            let s = subject(t, cfg, true)?;
            let grid = parse_grid(t.grid.as_deref(), EXTRACTION_GRID)?;
            let sd = extract(&s.frontal, grid, cfg)?;
            (sd, Some(s.frontal), s.name, grid)
        }
        _ => return Err(Failure::Input("give exactly one of --entry or --input".into())),
    };
    let (rep, art, _) = report::reconstruct_run(&sd, reference.as_ref(), &name, grid, cfg)?;
    finish(cli, &rep, &art, t.out.as_deref())
}

fn extract(f: &Frontal, grid: Grid, cfg: &Config) -> Result<StructureData, Failure> {
    let q = [f.domain.u1.0, f.domain.u2.0];
    Ok(StructureData::from_field(f, Arc::new(Blaschke), q, cfg)?.sample(grid)?)
}

fn cmd_export(cli: &Cli, args: &ExportArgs, cfg: &Config) -> Result<(), Failure> {
    let t = &args.target;
    let (name, body) = match args.what {
        ExportKind::Structure => {
            let s = subject(t, cfg, true)?;
            let grid = parse_grid(t.grid.as_deref(), EXTRACTION_GRID)?;
            let file = StructureFile::from_data(&extract(&s.frontal, grid, cfg)?)?;
            ("structure.json", file.to_json())
        }
        ExportKind::Surface => {
            let s = subject(t, cfg, false)?;
            let grid = parse_grid(t.grid.as_deref(), DEFAULT_GRID)?;
            let pts = grid.points(&s.frontal.domain);
            let xs: Vec<[f64; 3]> =
                pts.iter().map(|&u| Ok(s.frontal.jets(u, 0)?.x.value())).collect::<Result<_, FrameError>>()?;
            ("surface.obj", report::surface_obj(&s.name, grid, &xs))
        }
    };
    match &t.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(name), body)?;
            if !cli.json {
                println!("wrote {}", dir.join(name).display());
            }
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Catalog(args) => cmd_catalog(cli, args, &cfg),
        Command::Analyze(t) => {
            let s = subject(t, &cfg, false)?;
            let grid = parse_grid(t.grid.as_deref(), DEFAULT_GRID)?;
            let (rep, art) = report::analyze(&s.frontal, &s.name, grid, &cfg)?;
            finish(cli, &rep, &art, t.out.as_deref())
        }
        Command::Blaschke(t) => {
            let s = subject(t, &cfg, true)?;
            let grid = parse_grid(t.grid.as_deref(), DEFAULT_GRID)?;
            let (rep, art) = report::blaschke(&s.frontal, s.entry.as_ref(), &s.name, grid, &cfg)?;
            finish(cli, &rep, &art, t.out.as_deref())
        }
        Command::Reconstruct(t) => cmd_reconstruct(cli, t, &cfg),
        Command::Check(t) => {
            let s = subject(t, &cfg, true)?;
            let grid = parse_grid(t.grid.as_deref(), DEFAULT_GRID)?;
            let rep = report::check(&s.frontal, &s.name, grid, &cfg)?;
            finish(cli, &rep, &Artifacts::new(), t.out.as_deref())
        }
        Command::Export(args) => cmd_export(cli, args, &cfg),
    }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("FRONTAL_LAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Input(format!("FRONTAL_LAB_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Input(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
