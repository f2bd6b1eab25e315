use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pccforge::cloud::PointCloud;
use pccforge::io::{read_xyz, write_xyz};
use pccforge::metrics::{MetricReport, CSV_HEADER};
use pccforge::model::ModelParams;
use pccforge::shapes::{gen_shape, make_partial, Shape, ShapeKind};
use pccforge::synth::{sample_viewpoint, synthesize_views_with_depth};
use pccforge::train::{
    complete, history_csv, parse_sidecar, sidecar_text, train_with, TrainConfig, TrainState,
};

/// Source samples per shape when rendering partials; dense enough that the
/// z-buffer rarely sees through the surface.
const DENSE_POINTS: usize = 32768;

#[derive(Parser)]
#[command(
    name = "pccforge",
    version,
    about = "Self-supervised point cloud completion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural shapes with ground truth and partial scans.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8192)]
        gt_points: usize,
        #[arg(long, default_value_t = 1024)]
        partial_points: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Render a cloud from random viewpoints and back-project each view.
    SynthViews {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write each depth map as a 16-bit PGM.
        #[arg(long)]
        dump_depth: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Train on every .xyz file of a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Complete one partial cloud with a trained checkpoint.
    Complete {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for key-point sampling; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against ground truth, matching files by name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        partial: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Report ×100 (×10⁴ for UCD) instead of raw distances.
        #[arg(long)]
        table_scale: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<pccforge::Error>() {
            return match err {
                pccforge::Error::NonFinite(_) | pccforge::Error::NonPositiveDelta(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            out,
            shapes,
            seed,
            gt_points,
            partial_points,
            resolution,
        } => gen_data(&out, shapes, seed, gt_points, partial_points, resolution),
        Command::SynthViews {
            input,
            n,
            out,
            dump_depth,
            seed,
            points,
            resolution,
        } => synth_views(&input, n, &out, dump_depth, seed, points, resolution),
        Command::Train {
            data,
            config,
            out,
            seed,
        } => train_cmd(&data, &config, &out, seed),
        Command::Complete {
            input,
            ckpt,
            out,
            seed,
        } => complete_cmd(&input, &ckpt, &out, seed),
        Command::Eval {
            pred,
            gt,
            partial,
            report,
            table_scale,
        } => eval(&pred, &gt, partial.as_deref(), &report, table_scale),
    }
}

fn gen_data(
    out: &Path,
    shapes: usize,
    seed: u64,
    gt_points: usize,
    partial_points: usize,
    resolution: usize,
) -> anyhow::Result<()> {
    let (gt_dir, partial_dir) = (out.join("gt"), out.join("partial"));
    fs::create_dir_all(&gt_dir).with_context(|| format!("creating {}", gt_dir.display()))?;
    fs::create_dir_all(&partial_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..shapes {
        let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
        let shape = Shape::random(kind, &mut rng);
        let gt = gen_shape(&shape, gt_points, rng.gen())?;
        let dense = gen_shape(&shape, DENSE_POINTS, rng.gen())?;
        let view = sample_viewpoint(&mut rng);
        let partial = make_partial(&dense, view, partial_points, resolution, &mut rng)?;
        let name = format!("{i:04}_{}.xyz", kind.name());
        write_xyz(gt_dir.join(&name), &gt)?;
        write_xyz(partial_dir.join(&name), &partial)?;
    }
    println!("wrote {shapes} shapes to {}", out.display());
    Ok(())
}

fn synth_views(
    input: &Path,
    n: usize,
    out: &Path,
    dump_depth: bool,
    seed: u64,
    points: usize,
    resolution: usize,
) -> anyhow::Result<()> {
    let cloud = read_xyz(input).with_context(|| format!("reading {}", input.display()))?;
    let (normalized, frame) = cloud.normalize_unit();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = synthesize_views_with_depth(&normalized, n, points, resolution, &mut rng)?;
    fs::create_dir_all(out)?;
    for (i, v) in views.iter().enumerate() {
        write_xyz(
            out.join(format!("view_{i}.xyz")),
            &v.cloud.map(|q| frame.invert(q)),
        )?;
        if dump_depth {
            fs::write(out.join(format!("view_{i}.pgm")), v.depth.to_pgm())?;
        }
    }
    println!("wrote {n} views to {}", out.display());
    Ok(())
}

/// `.xyz` files of `dir` sorted by name.
fn xyz_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    files.sort();
    Ok(files)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn save_checkpoint(out: &Path, state: &TrainState, cfg: &TrainConfig) -> anyhow::Result<()> {
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    state.params.save(std::io::BufWriter::new(file))?;
    fs::write(with_suffix(out, ".meta"), sidecar_text(state.step, cfg))?;
    fs::write(with_suffix(out, ".loss.csv"), history_csv(&state.history))?;
    Ok(())
}

fn train_cmd(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg: TrainConfig = text
        .parse()
        .with_context(|| format!("in {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // a gen-data output directory trains on its partial scans
    let data = if data.join("partial").is_dir() {
        data.join("partial")
    } else {
        data.to_path_buf()
    };
    let files = xyz_files(&data)?;
    if files.is_empty() {
        bail!(pccforge::Error::InvalidArgument(format!(
            "no .xyz files in {}",
            data.display()
        )));
    }
    let clouds = files
        .iter()
        .map(|f| read_xyz(f).with_context(|| format!("reading {}", f.display())))
        .collect::<anyhow::Result<Vec<PointCloud>>>()?;
    let state = train_with(&clouds, &cfg, |s| {
        eprintln!(
            "step {} L = {}",
            s.step,
            s.history.last().map_or(f64::NAN, |r| r.total)
        );
        save_checkpoint(out, s, &cfg).map_err(|e| pccforge::Error::Checkpoint(format!("{e:#}")))
    })?;
    save_checkpoint(out, &state, &cfg)?;
    println!("trained {} steps on {} clouds", state.step, clouds.len());
    Ok(())
}

fn load_checkpoint(ckpt: &Path) -> anyhow::Result<(ModelParams, TrainConfig)> {
    let meta = with_suffix(ckpt, ".meta");
    let text = fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
    let (_, cfg) = parse_sidecar(&text)?;
    let file = fs::File::open(ckpt).with_context(|| format!("opening {}", ckpt.display()))?;
    let params = ModelParams::load(std::io::BufReader::new(file), &cfg.model)?;
    Ok((params, cfg))
}

fn complete_cmd(input: &Path, ckpt: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let (params, cfg) = load_checkpoint(ckpt)?;
    let partial = read_xyz(input).with_context(|| format!("reading {}", input.display()))?;
    let completed = complete(&params, &partial, seed.unwrap_or(cfg.seed))?;
    write_xyz(out, &completed)?;
    Ok(())
}

fn eval(
    pred: &Path,
    gt: &Path,
    partial: Option<&Path>,
    report: &Path,
    table_scale: bool,
) -> anyhow::Result<()> {
    let files = xyz_files(pred)?;
    if files.is_empty() {
        bail!(pccforge::Error::InvalidArgument(format!(
            "no .xyz files in {}",
            pred.display()
        )));
    }
    let mut out = format!("{CSV_HEADER}\n");
    let mut sum = [0.0; 5];
    for f in &files {
        let name = f.file_name().expect("listed files have names");
        let p = read_xyz(f).with_context(|| format!("reading {}", f.display()))?;
        let g =
            read_xyz(gt.join(name)).with_context(|| format!("ground truth for {}", f.display()))?;
        let part = partial
            .map(|dir| {
                read_xyz(dir.join(name)).with_context(|| format!("partial for {}", f.display()))
            })
            .transpose()?;
        let mut r = MetricReport::evaluate(&p, &g, part.as_ref());
        if table_scale {
            r = r.table_scaled();
        }
        for (s, v) in sum.iter_mut().zip([
            r.precision,
            r.coverage,
            r.cd,
            r.ucd.unwrap_or(0.0),
            r.uhd.unwrap_or(0.0),
        ]) {
            *s += v;
        }
        let stem = Path::new(name)
            .file_stem()
            .expect("has stem")
            .to_string_lossy();
        out.push_str(&r.to_csv_line(&stem));
        out.push('\n');
    }
    let n = files.len() as f64;
    let mean = MetricReport {
        precision: sum[0] / n,
        coverage: sum[1] / n,
        cd: sum[2] / n,
        ucd: partial.map(|_| sum[3] / n),
        uhd: partial.map(|_| sum[4] / n),
    };
    out.push_str(&mean.to_csv_line("mean"));
    out.push('\n');
    fs::write(report, out).with_context(|| format!("writing {}", report.display()))?;
    println!("scored {} predictions", files.len());
    Ok(())
}
