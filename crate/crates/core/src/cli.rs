//! Command-line front end: argument parsing and command execution.
//! Exit codes: 1 configuration, 2 I/O or parsing, 3 numerical failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use crate::cache::Cache;
use crate::config::{PipelineConfig, UniversePolicy};
use crate::error::{Error, Result};
use crate::eval::{cycle_deviation, geodesic_error, pck_auc, verify_theorem1, Normalization};
use crate::io::{atomic_write, load_fmat, load_index_map, save_fmat, save_index_map, save_json};
use crate::loss::{desk_optimize, total_loss, CycleVariant, LossTraceRow, OptimizeVars};
use crate::mesh::load_mesh_file;
use crate::pipeline::{build_state, match_collection, match_pair, prepare_shape, ShapeData};

#[derive(Parser, Debug)]
#[command(name = "shapecorr", version, about = "Multi-shape non-rigid correspondence toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-shape and per-pair stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Artifact cache directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Cycle loss variant: frobenius or cosine.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Universe size policy: max, ref:<name>, or a number.
    #[arg(long, global = true)]
    pub universe: Option<String>,
    /// Seed for attention initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute and cache bases and descriptors for meshes.
    Precompute { meshes: Vec<PathBuf> },
    /// Match two meshes: functional map plus hard vertex map.
    MatchPair { a: PathBuf, b: PathBuf },
    /// Match every mesh in a directory through the shared universe.
    MatchCollection { dir: PathBuf },
    /// Desk-scale descent on the collection objective; writes a loss trace.
    Optimize {
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.001)]
        rate: f64,
    },
    /// Geodesic error and PCK of a predicted map against a reference.
    Evaluate {
        pred: PathBuf,
        gt: PathBuf,
        mesh: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        max_threshold: f64,
        #[arg(long, default_value_t = 101)]
        samples: usize,
    },
    /// Check the cycle-consistency theorem on coefficient matrices.
    #[command(name = "verify-theorem1")]
    VerifyTheorem1 {
        coefficients: Vec<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Loss report for a mesh directory.
    Losses { dir: PathBuf },
}

#[derive(serde::Serialize)]
pub struct CliError {
    pub error: String,
    pub exit_code: i32,
}

/// Runs a parsed invocation; the binary maps errors to exit codes.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs < 1 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        // ignore failure when a global pool already exists (tests, repeats)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let config = resolve_config(cli)?;
    let cache = match cli.cache.as_ref().or(config.cache_dir.as_ref()) {
        Some(dir) => Some(Cache::new(dir)?),
        None => None,
    };
    match &cli.command {
        Command::Precompute { meshes } => precompute(meshes, &config, cache.as_ref()),
        Command::MatchPair { a, b } => {
            cmd_match_pair(a, b, &config, cache.as_ref(), &cli.out)
        }
        Command::MatchCollection { dir } => {
            cmd_match_collection(dir, &config, cache.as_ref(), &cli.out)
        }
        Command::Optimize { dir, steps, rate } => {
            cmd_optimize(dir, &config, cache.as_ref(), &cli.out, *steps, *rate)
        }
        Command::Evaluate { pred, gt, mesh, max_threshold, samples } => {
            cmd_evaluate(pred, gt, mesh, &cli.out, *max_threshold, *samples)
        }
        Command::VerifyTheorem1 { coefficients, tolerance } => {
            cmd_verify(coefficients, *tolerance, &cli.out)
        }
        Command::Losses { dir } => cmd_losses(dir, &config, cache.as_ref(), &cli.out),
    }
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(variant) = &cli.variant {
        config.cycle_variant = match variant.as_str() {
            "frobenius" => CycleVariant::Frobenius,
            "cosine" => CycleVariant::Cosine,
            other => return Err(Error::Config(format!("unknown variant '{other}'"))),
        };
    }
    if let Some(universe) = &cli.universe {
        config.universe_size_policy = UniversePolicy::parse(universe)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn mesh_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mesh".into())
}

fn load_collection_dir(dir: &Path, config: &PipelineConfig, cache: Option<&Cache>) -> Result<Vec<ShapeData>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("off") | Some("obj") | Some("ply")
            )
        })
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(Error::Config(format!("{} holds fewer than 2 meshes", dir.display())));
    }
    paths
        .iter()
        .map(|p| prepare_shape(load_mesh_file(p)?, config, cache))
        .collect()
}

fn precompute(meshes: &[PathBuf], config: &PipelineConfig, cache: Option<&Cache>) -> Result<()> {
    if meshes.is_empty() {
        return Err(Error::Config("precompute needs at least one mesh".into()));
    }
    let cache = cache.ok_or_else(|| {
        Error::Config("precompute needs --cache or a cache_dir in the config".into())
    })?;
    for path in meshes {
        let data = prepare_shape(load_mesh_file(path)?, config, Some(cache))?;
        println!(
            "{}: n={} k_lb={} k_elas={} d={}",
            data.name(),
            data.mesh.n_vertices(),
            data.basis.lb.k(),
            data.basis.elastic.k(),
            data.features.d()
        );
    }
    Ok(())
}

fn cmd_match_pair(
    a: &Path,
    b: &Path,
    config: &PipelineConfig,
    cache: Option<&Cache>,
    out: &Path,
) -> Result<()> {
    let shape_a = prepare_shape(load_mesh_file(a)?, config, cache)?;
    let shape_b = prepare_shape(load_mesh_file(b)?, config, cache)?;
    let pair = match_pair(&shape_a, &shape_b, config)?;
    let stem = format!("{}--{}", mesh_name(a), mesh_name(b));
    let fmat_path = out.join(format!("{stem}.fmat"));
    save_fmat(&pair.map_ab.full(), &fmat_path)?;
    save_json(
        &serde_json::json!({
            "source": shape_a.name(),
            "target": shape_b.name(),
            "k_lb": pair.map_ab.k_lb(),
            "k_elas": pair.map_ab.k_elas(),
        }),
        &out.join(format!("{stem}.json")),
    )?;
    let map_path = out.join(format!("{stem}.map"));
    save_index_map(&pair.pointmap_ab, &map_path)?;
    println!("{} {}", fmat_path.display(), map_path.display());
    Ok(())
}

fn cmd_match_collection(
    dir: &Path,
    config: &PipelineConfig,
    cache: Option<&Cache>,
    out: &Path,
) -> Result<()> {
    let shapes = load_collection_dir(dir, config, cache)?;
    let result = match_collection(&shapes, config)?;
    save_json(
        &serde_json::json!({
            "shapes": shapes.iter().map(|s| s.name()).collect::<Vec<_>>(),
            "neighbors": result.graph.neighbors,
            "k": result.graph.k,
            "reference": result.reference,
            "universe_size": result.c,
        }),
        &out.join("graph.json"),
    )?;
    for (s, assignment) in shapes.iter().zip(&result.assignments) {
        save_fmat(&assignment.soft, &out.join(format!("{}.universe.fmat", s.name())))?;
        let hard = crate::assign::PointMap::hard(
            assignment.hard.clone(),
            assignment.c,
            s.name(),
            "universe",
        )?;
        save_index_map(&hard, &out.join(format!("{}.universe.map", s.name())))?;
    }
    for ((i, j), map) in &result.pairwise {
        let stem = format!("{}--{}", shapes[*i].name(), shapes[*j].name());
        save_index_map(map, &out.join(format!("{stem}.map")))?;
    }
    // report cycle closure over all 3-cycles among the first few shapes
    let meshes: Vec<_> = shapes.iter().map(|s| s.mesh.clone()).collect();
    let mut cycles = Vec::new();
    for i in 0..shapes.len().min(5) {
        for j in 0..shapes.len().min(5) {
            for k in 0..shapes.len().min(5) {
                if i < j && j != k && k > i && i != k {
                    cycles.push(vec![i, j, k]);
                }
            }
        }
    }
    if !cycles.is_empty()
        && cycles.iter().all(|c| {
            c.windows(2).all(|w| result.pairwise.contains_key(&(w[0], w[1])))
                && result.pairwise.contains_key(&(c[c.len() - 1], c[0]))
        })
    {
        let devs = cycle_deviation(&result.pairwise, &cycles, &meshes)?;
        let max = devs.iter().cloned().fold(0.0, f64::max);
        println!("universe size {} (reference {}), max 3-cycle deviation {max}", result.c, result.reference);
    } else {
        println!("universe size {} (reference {})", result.c, result.reference);
    }
    Ok(())
}

fn write_trace_csv(trace: &[LossTraceRow], path: &Path) -> Result<()> {
    atomic_write(path, |out| {
        writeln!(out, "step,bij,orth,couple,cycle,total")?;
        for row in trace {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                row.step, row.bij, row.orth, row.couple, row.cycle, row.total
            )?;
        }
        Ok(())
    })
}

fn cmd_optimize(
    dir: &Path,
    config: &PipelineConfig,
    cache: Option<&Cache>,
    out: &Path,
    steps: usize,
    rate: f64,
) -> Result<()> {
    let shapes = load_collection_dir(dir, config, cache)?;
    let state = build_state(&shapes, config)?;
    let (_, trace) = desk_optimize(
        state,
        &config.weights,
        config.cycle_variant,
        steps,
        rate,
        OptimizeVars::Both,
    )?;
    let path = out.join("trace.csv");
    write_trace_csv(&trace, &path)?;
    let first = trace.first().map(|r| r.total).unwrap_or(0.0);
    let last = trace.last().map(|r| r.total).unwrap_or(0.0);
    println!("{}: total {first} -> {last}", path.display());
    Ok(())
}

fn cmd_losses(
    dir: &Path,
    config: &PipelineConfig,
    cache: Option<&Cache>,
    out: &Path,
) -> Result<()> {
    let shapes = load_collection_dir(dir, config, cache)?;
    let state = build_state(&shapes, config)?;
    let report = total_loss(&state, &config.weights, config.cycle_variant)?;
    let path = out.join("losses.csv");
    atomic_write(&path, |w| {
        writeln!(w, "scope,i,j,bij,orth,couple,cycle,spectral,total")?;
        for p in &report.per_pair {
            writeln!(w, "pair,{},{},{},{},{},{},,", p.i, p.j, p.bij, p.orth, p.couple, p.cycle)?;
        }
        writeln!(
            w,
            "total,,,{},{},{},{},{},{}",
            report.bij, report.orth, report.couple, report.cycle, report.spectral, report.total
        )?;
        Ok(())
    })?;
    println!("{}: total {}", path.display(), report.total);
    Ok(())
}

fn cmd_evaluate(
    pred: &Path,
    gt: &Path,
    mesh_path: &Path,
    out: &Path,
    max_threshold: f64,
    samples: usize,
) -> Result<()> {
    let mesh = load_mesh_file(mesh_path)?;
    let pred_map = load_index_map(pred, &mesh_name(pred), mesh.name())?;
    let gt_map = load_index_map(gt, &mesh_name(gt), mesh.name())?;
    let summary = geodesic_error(&pred_map, &gt_map, &mesh, Normalization::SqrtArea)?;
    let curve = pck_auc(&summary, max_threshold, samples)?;
    atomic_write(&out.join("errors.csv"), |w| {
        writeln!(w, "mean_geo_x100,excluded")?;
        writeln!(w, "{},{}", summary.mean_geo_x100, summary.excluded.len())?;
        writeln!(w, "vertex,error_x100")?;
        for (v, e) in summary.per_vertex.iter().enumerate() {
            writeln!(w, "{v},{e}")?;
        }
        Ok(())
    })?;
    atomic_write(&out.join("pck.csv"), |w| {
        writeln!(w, "auc,{}", curve.auc)?;
        writeln!(w, "threshold,proportion")?;
        for (t, p) in curve.thresholds.iter().zip(&curve.proportions) {
            writeln!(w, "{t},{p}")?;
        }
        Ok(())
    })?;
    println!("mean_geo_x100 {} auc {}", summary.mean_geo_x100, curve.auc);
    Ok(())
}

fn cmd_verify(coefficients: &[PathBuf], tolerance: f64, out: &Path) -> Result<()> {
    if coefficients.len() < 2 {
        return Err(Error::Config("verify-theorem1 needs >= 2 coefficient files".into()));
    }
    let mats: Vec<DMatrix<f64>> =
        coefficients.iter().map(|p| load_fmat(p)).collect::<Result<Vec<_>>>()?;
    let report = verify_theorem1(&mats, tolerance)?;
    let path = out.join("theorem1.json");
    save_json(&report, &path)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
