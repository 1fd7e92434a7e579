//! Command-line front end: `cluster`, `loss`, `eval-seg` and `synth`.
//!
//! Exit codes: `0` on success, `1` for usage, input and configuration
//! errors, `2` when the numerics fail.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array1, Array2, Axis};

use croc_core::cluster::{self, ClusteringResult};
use croc_core::config::RunConfig;
use croc_core::distill::{self, ProjectionParams};
use croc_core::features::{AttentionMarginal, CropGeometry, FeatureMatrix, ImageSize, ViewPair};
use croc_core::io;
use croc_core::segeval::{self, EvalImage};
use croc_core::synth::{self, SynthSpec};
use croc_core::Error;

#[derive(Debug, Parser)]
#[command(name = "croc", about = "Cross-view online clustering toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster the joint tokens of a view pair and write the pruned assignments.
    Cluster(ClusterArgs),
    /// Evaluate the dense, global and total distillation losses.
    Loss(LossArgs),
    /// Unsupervised segmentation scoring of a directory of feature/mask pairs.
    EvalSeg(EvalArgs),
    /// Write a synthetic view pair with ground-truth labels.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Token features of view 1 (N x d).
    #[arg(long, required_unless_present = "head", conflicts_with = "head")]
    features_a: Option<PathBuf>,
    /// Token features of view 2 (N x d).
    #[arg(long, required_unless_present = "head", conflicts_with = "head")]
    features_b: Option<PathBuf>,
    /// Per-head features of view 1 and view 2; repeat once per head.
    #[arg(long, num_args = 2, value_names = ["A", "B"], action = clap::ArgAction::Append)]
    head: Vec<PathBuf>,
    /// Attention weights over the 2N joint tokens (2N x 1); uniform if omitted.
    #[arg(long)]
    attention: Option<PathBuf>,
    /// Crop sidecar of view 1.
    #[arg(long)]
    geom_a: PathBuf,
    /// Crop sidecar of view 2.
    #[arg(long)]
    geom_b: PathBuf,
    /// Original image width and height; defaults to the extent of both crops.
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    image_size: Option<Vec<f64>>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_assignments: PathBuf,
    #[arg(long)]
    out_trace: PathBuf,
}

#[derive(Debug, Args)]
struct LossArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    /// Joint assignments (2N x K), as written by `cluster`.
    #[arg(long)]
    assignments: PathBuf,
    /// Dense projection head, L x (d + 1) with the bias in the last column.
    #[arg(long)]
    proj_weights: PathBuf,
    /// Global projection head in the same layout; defaults to the dense head.
    #[arg(long)]
    global_weights: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of `<name>.feat` / `<name>.mask` pairs.
    #[arg(long)]
    dataset_dir: PathBuf,
    #[arg(long)]
    classes: usize,
    /// Number of k-means seeds (0..S).
    #[arg(long, default_value_t = segeval::DEFAULT_SEEDS)]
    seeds: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    blobs: usize,
    #[arg(long)]
    sep: f64,
    #[arg(long)]
    sigma: f64,
    /// Tokens per view (a perfect square).
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each crop shared with the other one.
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Blob id of each vertical stripe, comma separated (default: one stripe per blob).
    #[arg(long, value_delimiter = ',')]
    stripes: Option<Vec<usize>>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Cluster(a) => cmd_cluster(&a),
        Command::Loss(a) => cmd_loss(&a),
        Command::EvalSeg(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn crop_extent(g1: &CropGeometry, g2: &CropGeometry) -> Result<ImageSize, Error> {
    ImageSize::new(
        (g1.x0 + g1.width).max(g2.x0 + g2.width),
        (g1.y0 + g1.height).max(g2.y0 + g2.height),
    )
}

fn load_attention(path: Option<&Path>, n_tokens: usize) -> Result<AttentionMarginal, Error> {
    let Some(p) = path else {
        return AttentionMarginal::uniform(n_tokens);
    };
    let a = io::read_features(p)?;
    if a.dim() != (n_tokens, 1) {
        return Err(Error::Shape(format!(
            "attention must be {n_tokens} x 1, got {:?}",
            a.dim()
        )));
    }
    AttentionMarginal::new(a.view().iter().map(|&v| f64::from(v)).collect())
}

fn cmd_cluster(a: &ClusterArgs) -> Result<String, Error> {
    let cfg = load_config(a.config.as_deref())?.clustering();
    let g1 = io::read_geometry(&a.geom_a)?;
    let g2 = io::read_geometry(&a.geom_b)?;
    let image = match &a.image_size {
        Some(wh) => ImageSize::new(wh[0], wh[1])?,
        None => crop_extent(&g1, &g2)?,
    };
    let pairs: Vec<(PathBuf, PathBuf)> = if a.head.is_empty() {
        vec![(
            a.features_a.clone().expect("required by clap"),
            a.features_b.clone().expect("required by clap"),
        )]
    } else {
        a.head.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect()
    };
    let mut views = Vec::with_capacity(pairs.len());
    for (pa, pb) in &pairs {
        let z1 = io::read_features(pa)?;
        let z2 = io::read_features(pb)?;
        let marginal = load_attention(a.attention.as_deref(), z1.rows() + z2.rows())?;
        views.push(ViewPair::assemble(&z1, &z2, marginal, &g1, &g2, &image)?);
    }

    let (q_joint, heads): (Array2<f64>, Vec<ClusteringResult>) = if a.head.is_empty() {
        let r = cluster::run(&views[0], &cfg)?;
        (r.q_joint.clone(), vec![r])
    } else {
        let m = cluster::multi_head_run(&views, &cfg)?;
        (m.q_joint, m.heads)
    };

    let mut trace = String::new();
    for (h, r) in heads.iter().enumerate() {
        for (k, dc) in &r.dc_trace {
            let _ = writeln!(trace, "{h} {k} {dc:.6}");
        }
    }
    io::write_features(&a.out_assignments, &io::matrix_to_features(&q_joint)?)?;
    io::write_atomic(&a.out_trace, trace.as_bytes())?;

    let mut out = String::new();
    for (h, r) in heads.iter().enumerate() {
        let _ = writeln!(
            out,
            "head {h}: k_selected {} clusters {} pruned {} converged {}",
            r.k_selected,
            r.n_clusters(),
            r.pruned(),
            r.all_converged
        );
    }
    let _ = writeln!(out, "clusters {}", q_joint.ncols());
    Ok(out)
}

fn load_head(path: &Path, d: usize, temperature: f64) -> Result<ProjectionParams, Error> {
    let m = io::read_features(path)?.to_f64();
    if m.ncols() != d + 1 {
        return Err(Error::Shape(format!(
            "projection file {} must have d + 1 = {} columns, got {}",
            path.display(),
            d + 1,
            m.ncols()
        )));
    }
    let weight = m.slice(s![.., ..d]).to_owned();
    let bias: Array1<f64> = m.column(d).to_owned();
    ProjectionParams::new(weight, bias, temperature)
}

fn cmd_loss(a: &LossArgs) -> Result<String, Error> {
    let cfg = load_config(a.config.as_deref())?;
    let z1 = io::read_features(&a.features_a)?;
    let z2 = io::read_features(&a.features_b)?;
    if z1.cols() != z2.cols() {
        return Err(Error::Shape(format!(
            "views have dimensions {} and {}",
            z1.cols(),
            z2.cols()
        )));
    }
    let q = io::read_features(&a.assignments)?.to_f64();
    let n = z1.rows();
    if z2.rows() != n || q.nrows() != 2 * n {
        return Err(Error::Shape(format!(
            "assignments have {} rows, views have {} and {} tokens",
            q.nrows(),
            n,
            z2.rows()
        )));
    }
    let d = z1.cols();
    let dense_t = load_head(&a.proj_weights, d, cfg.tau_t)?;
    let dense_s = dense_t.with_temperature(cfg.tau_s)?;
    let glob_t = match &a.global_weights {
        Some(p) => load_head(p, d, cfg.tau_t)?,
        None => dense_t.clone(),
    };
    let glob_s = glob_t.with_temperature(cfg.tau_s)?;

    let c1 = distill::pool_centroids(&z1, &q.slice(s![..n, ..]).to_owned())?;
    let c2 = distill::pool_centroids(&z2, &q.slice(s![n.., ..]).to_owned())?;
    let dense = distill::dense_loss(
        &distill::project_softmax(&c1, &dense_t)?,
        &distill::project_softmax(&c2, &dense_s)?,
        &distill::project_softmax(&c2, &dense_t)?,
        &distill::project_softmax(&c1, &dense_s)?,
    )?;
    let g1 = distill::mean_token(&z1);
    let g2 = distill::mean_token(&z2);
    let glob = distill::global_loss(
        &distill::project_softmax(&g1, &glob_t)?,
        &distill::project_softmax(&g2, &glob_s)?,
        &distill::project_softmax(&g2, &glob_t)?,
        &distill::project_softmax(&g1, &glob_s)?,
    )?;
    let total = distill::total_loss(dense, glob, cfg.loss_weights());
    Ok(format!("dense {dense:.6}\nglobal {glob:.6}\ntotal {total:.6}\n"))
}

/// `<stem>.feat` files of `dir` in name order, each with its `<stem>.mask`.
pub fn load_dataset(dir: &Path) -> Result<Vec<EvalImage>, Error> {
    let mut feats: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "feat"))
        .collect();
    feats.sort();
    if feats.is_empty() {
        return Err(Error::Input(format!("no .feat files in {}", dir.display())));
    }
    feats
        .iter()
        .map(|f| {
            let mask = f.with_extension("mask");
            if !mask.exists() {
                return Err(Error::Input(format!("{} has no matching mask", f.display())));
            }
            EvalImage::new(io::read_features(f)?, io::read_mask(&mask)?)
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<String, Error> {
    let images = load_dataset(&a.dataset_dir)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let report = segeval::evaluate_unsupervised(&images, a.classes, &seeds)?;
    let mut out = String::new();
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => {
                let _ = writeln!(out, "class {c} iou {v:.6}");
            }
            None => {
                let _ = writeln!(out, "class {c} iou absent");
            }
        }
    }
    let _ = writeln!(out, "mean_iou {:.6}", report.mean);
    Ok(out)
}

fn cmd_synth(a: &SynthArgs) -> Result<String, Error> {
    let mut spec = SynthSpec::new(a.blobs, a.sep, a.sigma, a.n, a.d, a.seed);
    spec.overlap = a.overlap;
    spec.stripes = a.stripes.clone();
    let s = synth::generate(&spec)?;
    io::write_synth(&a.out_dir, &s)?;
    let labels = s.labels.iter().fold(Vec::new(), |mut acc: Vec<usize>, &l| {
        if !acc.contains(&l) {
            acc.push(l);
        }
        acc
    });
    Ok(format!(
        "tokens_per_view {}\nimage_size {:.6} {:.6}\nclasses {}\n",
        a.n,
        s.image.width,
        s.image.height,
        labels.len()
    ))
}

/// Projection file content for `weight` and `bias` (bias as last column).
pub fn head_matrix(weight: &Array2<f64>, bias: &Array1<f64>) -> Result<FeatureMatrix, Error> {
    let b = bias.view().insert_axis(Axis(1));
    let m = ndarray::concatenate(Axis(1), &[weight.view(), b]).map_err(|e| Error::Shape(e.to_string()))?;
    io::matrix_to_features(&m)
}
