//! `nterrain`: fit, pack, query and analyze neural terrain models.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nterrain::codec::{
    bits_per_pixel, pack, sensitivity_sweep, sweep_groups, unpack, PackConfig,
};
use nterrain::metrics::{mae_maxae, psnr, shape_grad_mae, FidelityReport};
use nterrain::model::TerrainModel;
use nterrain::raster::{
    load_tile, normalize, save_ascii, save_raw, synth_tile, DemTile, Grid, SynthProfile,
    TileFormat,
};
use nterrain::siren::Want;
use nterrain::terrain_analysis::{
    find_critical_points, product_of_sines, seed_lattice, topo_rasters, trace_separatrices,
    NewtonConfig,
};
use nterrain::trainer::{fit_tile, shape_target, TrainConfig, TrainLog};
use nterrain::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Nominal grid side used to seed analysis of the built-in stage.
const BUILTIN_GRID: usize = 129;

#[derive(Parser, Debug)]
#[command(name = "nterrain", version, about = "Neural terrain codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic tile (raw f32 + .json sidecar, or .asc)
    Gen(GenArgs),
    /// Train a model on a tile and store it at full precision
    Fit(FitArgs),
    /// Quantize and entropy-code a model
    Pack(PackArgs),
    /// Decode a packed model back to a full-precision container
    Unpack(UnpackArgs),
    /// Evaluate elevation and gradient at coordinates from a text file
    Query(QueryArgs),
    /// Render a product of the model on a grid of any size
    Raster(RasterArgs),
    /// Fidelity report of a prediction or model against a truth tile
    Metrics(MetricsArgs),
    /// Critical points and separatrices of the shape stage
    Analyze(AnalyzeArgs),
    /// Per-group quantization sensitivity table (CSV)
    Sweep(SweepArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Profile {
    Bumps,
    Ridge,
    FlatPlusCliff,
    Fractal,
}

impl From<Profile> for SynthProfile {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Bumps => SynthProfile::Bumps,
            Profile::Ridge => SynthProfile::Ridge,
            Profile::FlatPlusCliff => SynthProfile::FlatPlusCliff,
            Profile::Fractal => SynthProfile::Fractal,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    profile: Profile,
    /// Side length in nodes
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Overrides --size for the x axis
    #[arg(long)]
    width: Option<usize>,
    /// Overrides --size for the y axis
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

/// Training overrides; unset flags fall back to the config file, then to the defaults shown.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// TOML file with any `TrainConfig` fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shape-stage iterations [default: 3000]
    #[arg(long)]
    shape_iters: Option<usize>,
    /// Geometry-stage iterations [default: 2000]
    #[arg(long)]
    geom_iters: Option<usize>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Gradient-matching weight [default: 0.1]
    #[arg(long)]
    lambda_grad: Option<f64>,
    /// Gradient-matching points per iteration [default: 10000]
    #[arg(long)]
    grad_samples: Option<usize>,
    /// Shape MSE batch as a fraction of nodes [default: 0.25]
    #[arg(long)]
    shape_subsample_frac: Option<f64>,
    /// Geometry batch fraction, >= 1 for the full grid [default: 0.25]
    #[arg(long)]
    geom_sample_frac: Option<f64>,
    /// Complexity weight in the sampling mixture [default: 0.75]
    #[arg(long)]
    alpha: Option<f64>,
    /// Gaussian sigma of the shape target, in cells [default: 4]
    #[arg(long)]
    sigma_smooth: Option<f64>,
    /// Hidden frequency factor of the shape stage [default: 30]
    #[arg(long)]
    omega0_shape: Option<f64>,
    /// Hidden frequency factor of the geometry stage [default: 150]
    #[arg(long)]
    omega0_geom: Option<f64>,
    /// Hidden width [default: 128]
    #[arg(long)]
    width: Option<usize>,
    /// Hidden layers per stage [default: 3]
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// Disable complexity masks on the geometry stage
    #[arg(long)]
    no_masks: bool,
    /// Seed of frequency tables and initial weights [default: 0]
    #[arg(long)]
    init_seed: Option<u64>,
    /// Seed of per-iteration coordinate draws [default: 1]
    #[arg(long)]
    sample_seed: Option<u64>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).map_err(|e| {
                    Error::InvalidArgument(format!("config {}: {e}", path.display()))
                })?
            }
            None => TrainConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        over!(
            shape_iters, geom_iters, lr, lambda_grad, grad_samples, shape_subsample_frac,
            geom_sample_frac, alpha, sigma_smooth, omega0_shape, omega0_geom, width,
            hidden_layers, init_seed, sample_seed
        );
        if self.no_masks {
            cfg.use_masks = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Training log destination (`-` for stdout)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Log every N iterations
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct BitFlags {
    /// Shape-stage weight bits (4-16, or 64 for raw f64)
    #[arg(long, default_value_t = 12)]
    b_shape: u8,
    /// Geometry-stage weight bits
    #[arg(long, default_value_t = 8)]
    b_geom: u8,
    /// Complexity decoder weight bits
    #[arg(long, default_value_t = 8)]
    b_wcf: u8,
    /// Complexity field bits
    #[arg(long, default_value_t = 4)]
    b_field: u8,
}

#[derive(Args, Debug)]
struct PackArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    bits: BitFlags,
}

#[derive(Args, Debug)]
struct UnpackArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(short, long)]
    model: PathBuf,
    /// Text file, one `x y` pair per line in normalized coordinates
    #[arg(short, long)]
    coords: PathBuf,
    /// Output file (default stdout)
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Product {
    Elevation,
    Slope,
    Aspect,
    Curvature,
}

#[derive(Args, Debug)]
struct RasterArgs {
    #[arg(short, long)]
    model: PathBuf,
    /// Square output side; defaults to the training tile dimensions
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, value_enum, default_value_t = Product::Elevation)]
    product: Product,
    /// `.asc` for ascii-grid, anything else raw f32
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    truth: PathBuf,
    /// Predicted tile
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pred: Option<PathBuf>,
    /// Model container, reconstructed at the truth dimensions
    #[arg(long)]
    model: Option<PathBuf>,
    /// Smoothing of the shape target for GradMAE, in cells
    #[arg(long, default_value_t = 4.0)]
    sigma_smooth: f64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(short, long, required_unless_present = "builtin")]
    model: Option<PathBuf>,
    /// Analyze a built-in stage instead of a model
    #[arg(long, value_enum, conflicts_with = "model")]
    builtin: Option<Builtin>,
    /// Newton start spacing in grid cells
    #[arg(long, default_value_t = 8)]
    seed_stride: usize,
    #[arg(long, default_value_t = nterrain::terrain_analysis::TOL_ROOT)]
    tol_root: f64,
    #[arg(long, default_value_t = nterrain::terrain_analysis::NEWTON_MAX_ITERS)]
    max_iters: usize,
    /// Separatrix integration step, normalized units
    #[arg(long, default_value_t = 0.005)]
    step: f64,
    #[arg(long, default_value_t = 2000)]
    max_steps: usize,
    /// Output file (default stdout)
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Builtin {
    /// sin(2 pi x) sin(2 pi y)
    Sines,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "16,12,10,8")]
    bits: Vec<u8>,
    /// Restrict to these groups (repeatable); default all layer groups
    #[arg(long)]
    group: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite(_) => EXIT_NUMERIC,
                Error::InvalidArgument(_) | Error::UnknownProfile(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Unpack(a) => cmd_unpack(a),
        Command::Query(a) => cmd_query(a),
        Command::Raster(a) => cmd_raster(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn read_tile(path: &Path) -> Result<DemTile> {
    load_tile(path, TileFormat::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

fn write_grid(path: &Path, grid: &Grid, cell_size: f64) -> Result<()> {
    match TileFormat::from_path(path) {
        TileFormat::AsciiGrid => save_ascii(path, grid, cell_size),
        TileFormat::RawF32 => save_raw(path, grid, cell_size),
    }
    .with_context(|| format!("writing {}", path.display()))
}

fn read_model(path: &Path) -> Result<TerrainModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(unpack(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

fn output_sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let w = a.width.unwrap_or(a.size);
    let h = a.height.unwrap_or(a.size);
    // a too-small size here is a bad flag, not bad data
    let tile = synth_tile(a.seed, w, h, a.profile.into()).map_err(|e| match e {
        Error::TooSmall { .. } => Error::InvalidArgument(e.to_string()),
        e => e,
    })?;
    write_grid(&a.output, &tile.elevations, tile.cell_size)
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let tile = read_tile(&a.input)?;
    let mut sink: Option<Box<dyn Write>> = match &a.log {
        Some(p) if p.as_os_str() == "-" => Some(Box::new(io::stdout())),
        Some(p) => Some(Box::new(BufWriter::new(fs::File::create(p)?))),
        None => None,
    };
    let outcome = {
        let mut log = match sink.as_mut() {
            Some(s) => TrainLog::to(s.as_mut(), a.log_every),
            None => TrainLog::none(),
        };
        fit_tile(&tile, &cfg, &mut log)?
    };
    drop(sink);
    let bytes = pack(&outcome.model, &PackConfig::passthrough())?;
    fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;

    let norm = normalize(&tile)?;
    let rec = outcome.model.reconstruct(tile.width(), tile.height())?;
    let mut report = FidelityReport::compare(&rec, &norm.grid, tile.z_range())?;
    let target = shape_target(&norm, cfg.sigma_smooth)?;
    report.gradmae = Some(shape_grad_mae(&outcome.model.shape, &target.grid)?);
    report.wall_ms = vec![
        ("shape".into(), outcome.shape_ms),
        ("geometry".into(), outcome.geom_ms),
    ];
    print!("{report}");
    Ok(())
}

fn cmd_pack(a: PackArgs) -> Result<()> {
    let model = read_model(&a.input)?;
    let cfg = PackConfig {
        b_shape: a.bits.b_shape,
        b_geom: a.bits.b_geom,
        b_wcf: a.bits.b_wcf,
        b_field: a.bits.b_field,
        ..Default::default()
    };
    let bytes = pack(&model, &cfg)?;
    fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
    println!("bytes {}", bytes.len());
    println!("bpp {:.4}", bits_per_pixel(bytes.len(), &model.meta));
    Ok(())
}

fn cmd_unpack(a: UnpackArgs) -> Result<()> {
    let model = read_model(&a.input)?;
    let bytes = pack(&model, &PackConfig::passthrough())?;
    fs::write(&a.output, bytes).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

fn parse_coords(path: &Path) -> Result<Vec<[f64; 2]>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Header(format!("line {}: expected `x y`", n + 1)))?;
        if vals.len() != 2 {
            return Err(Error::Header(format!("line {}: expected `x y`", n + 1)).into());
        }
        out.push([vals[0], vals[1]]);
    }
    Ok(out)
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let coords = parse_coords(&a.coords)?;
    let mut out = output_sink(a.output.as_deref())?;
    let start = Instant::now();
    // valid points go through one batched call; invalid ones get an error record
    let (ok_idx, ok_xy): (Vec<usize>, Vec<[f64; 2]>) = coords
        .iter()
        .enumerate()
        .filter(|(_, xy)| nterrain::siren::check_domain(**xy).is_ok())
        .map(|(i, xy)| (i, *xy))
        .unzip();
    let results = model.eval_elevation(&ok_xy, Want::ValueGrad)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut next = ok_idx.iter().zip(&results).peekable();
    for (i, xy) in coords.iter().enumerate() {
        match next.peek() {
            Some((&j, r)) if j == i => {
                writeln!(out, "{} {} {:.6} {:.6} {:.6}", xy[0], xy[1], r.value, r.grad[0], r.grad[1])?;
                next.next();
            }
            _ => writeln!(out, "{} {} error out-of-domain", xy[0], xy[1])?,
        }
    }
    out.flush()?;
    if !ok_xy.is_empty() {
        eprintln!(
            "{} points in {:.3} s ({:.0} points/s)",
            ok_xy.len(),
            elapsed,
            ok_xy.len() as f64 / elapsed.max(1e-9)
        );
    }
    Ok(())
}

fn cmd_raster(a: RasterArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let w = a.width.or(a.size).unwrap_or(model.meta.width);
    let h = a.height.or(a.size).unwrap_or(model.meta.height);
    let grid = match a.product {
        Product::Elevation => {
            let g = model.reconstruct(w, h)?;
            let range = model.meta.z_range();
            Grid::new(w, h, g.data.iter().map(|v| v * range + model.meta.z_min).collect())?
        }
        p => {
            let t = topo_rasters(&model.shape, w, h)?;
            match p {
                Product::Slope => t.slope,
                Product::Aspect => t.aspect,
                _ => t.curvature,
            }
        }
    };
    // cell size scales with the output resolution
    let span = (model.meta.width.max(2) - 1) as f64 * model.meta.cell_size;
    write_grid(&a.output, &grid, span / (w - 1) as f64)
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let truth = read_tile(&a.truth)?;
    let norm = normalize(&truth)?;
    let report = if let Some(p) = &a.pred {
        let pred = read_tile(p)?;
        let range = truth.z_range();
        let pn = Grid::new(
            pred.width(),
            pred.height(),
            pred.elevations.data.iter().map(|v| (v - truth.z_min) / range).collect(),
        )?;
        let (mae, maxae) = mae_maxae(&pn, &norm.grid, range)?;
        FidelityReport {
            psnr: Some(psnr(&pn, &norm.grid)?),
            mae_m: Some(mae),
            maxae_m: Some(maxae),
            ..Default::default()
        }
    } else {
        let path = a.model.as_ref().expect("clap requires one of pred/model");
        let model = read_model(path)?;
        let rec = model.reconstruct(truth.width(), truth.height())?;
        let mut r = FidelityReport::compare(&rec, &norm.grid, truth.z_range())?;
        let target = shape_target(&norm, a.sigma_smooth)?;
        r.gradmae = Some(shape_grad_mae(&model.shape, &target.grid)?);
        let len = fs::metadata(path)?.len() as usize;
        r.bpp = Some(len as f64 * 8.0 / truth.elevations.len() as f64);
        r
    };
    print!("{report}");
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    if a.seed_stride == 0 {
        return Err(Error::InvalidArgument("seed-stride must be >= 1".into()).into());
    }
    let (stage, side) = match (&a.model, a.builtin) {
        (_, Some(Builtin::Sines)) => (product_of_sines(), BUILTIN_GRID),
        (Some(p), None) => {
            let m = read_model(p)?;
            let side = m.meta.width.max(m.meta.height);
            (m.shape, side)
        }
        (None, None) => unreachable!("clap requires one of model/builtin"),
    };
    let per_side = (side.max(2) - 1) / a.seed_stride + 1;
    let cfg = NewtonConfig {
        tol_root: a.tol_root,
        max_iters: a.max_iters,
    };
    let critical = find_critical_points(&stage, &seed_lattice(per_side), &cfg)?;
    let seps = trace_separatrices(&stage, &critical, a.step, a.max_steps)?;
    let mut out = output_sink(a.output.as_deref())?;
    for c in &critical {
        let mut v = serde_json::to_value(c)?;
        v["record"] = "critical".into();
        writeln!(out, "{v}")?;
    }
    for s in &seps {
        let mut v = serde_json::to_value(s)?;
        v["record"] = "separatrix".into();
        writeln!(out, "{v}")?;
    }
    out.flush()?;
    eprintln!("{} critical points, {} separatrices", critical.len(), seps.len());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let truth = read_tile(&a.truth)?;
    let norm = normalize(&truth)?;
    let groups = if a.group.is_empty() { sweep_groups(&model) } else { a.group };
    let rows = sensitivity_sweep(&model, &norm.grid, &groups, &a.bits)?;
    println!("group,bits,psnr_db,delta_db");
    for r in rows {
        println!("{},{},{:.4},{:.4}", r.group, r.bits, r.psnr_db, r.delta_db);
    }
    Ok(())
}
