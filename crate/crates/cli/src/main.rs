//! `boxpref`: scale and evaluate detections, tabulate the asymmetric loss,
//! run the toy regressor sweep, analyze study judgments and serve studies.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use boxpref_core::coco::{load_detections, load_ground_truth, write_detections};
use boxpref_core::eval::{coco_thresholds, evaluate, size_ratio_histogram};
use boxpref_core::geometry::scale_box;
use boxpref_core::loss::{loss_table, smooth_l1};
use boxpref_core::regressor::{simulate_detector, NoiseConfig, NoiseDistribution, SimulationSettings};
use boxpref_core::stats::{analyze, JudgmentTable, LabeledJudgment, PairwiseMethod};
use boxpref_core::{AsymmetricLossParams, ScaleFactor};
use boxpref_study::{StudyConfig, StudyExport, StudyService};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "boxpref", version, about = "Bounding-box size preference toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rescale every detection's area by a factor about its center, clipped to the image.
    Scale {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// COCO-style AP over IoU thresholds.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        /// Comma-separated IoU thresholds; defaults to 0.50:0.05:0.95.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Census of detections larger/smaller than their ground truth, by IoU bin.
    SizeHist {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss value and gradient tables as CSV.
    LossCurve {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
        x_min: f64,
        #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
        x_max: f64,
        #[arg(long, default_value_t = 121)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the toy size regressor for each alpha and report box growth and AP.
    Simulate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,4,10,100")]
        alpha: Vec<f64>,
        /// Smoothing interval in relative size units.
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        /// `uniform:<half_width>` or `gaussian:<sigma>`, relative to object size.
        #[arg(long, default_value = "uniform:0.2")]
        noise: NoiseDistribution,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw independent width and height errors.
        #[arg(long)]
        per_dimension: bool,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 100_000)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cochran's Q and pairwise post-hoc tests on study judgments (.csv, .jsonl or exported .json).
    AnalyzeStudy {
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Mcnemar)]
        method: Method,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the study HTTP server.
    Serve {
        /// Study config file; repeat for several studies.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        images_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Seed for candidate display order; random when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Mcnemar,
    Exact,
    ChiSquare,
}

impl From<Method> for PairwiseMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Mcnemar => PairwiseMethod::McNemar,
            Method::Exact => PairwiseMethod::McNemarExact,
            Method::ChiSquare => PairwiseMethod::McNemarChiSquare,
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("{}: no such file", p.display());
    }
    Ok(())
}

fn cmd_scale(gt: &Path, det: &Path, factor: f64, out: &Path) -> Result<()> {
    require_file(gt)?;
    require_file(det)?;
    let factor = ScaleFactor::new(factor)?;
    let bundle = load_ground_truth(gt)?;
    let mut dets = load_detections(det, &bundle)?;
    for (i, d) in dets.iter_mut().enumerate() {
        let size = bundle
            .image_size(d.image_id)
            .with_context(|| format!("{} (record {i}): unknown image {}", det.display(), d.image_id))?;
        d.bbox = scale_box(&d.bbox, factor, &size).with_context(|| format!("{} (record {i})", det.display()))?;
    }
    write_detections(&dets, out)?;
    Ok(())
}

fn cmd_eval(gt: &Path, det: &Path, thresholds: Option<Vec<f64>>, format: Format, out: Option<&Path>) -> Result<()> {
    require_file(gt)?;
    require_file(det)?;
    let bundle = load_ground_truth(gt)?;
    let dets = load_detections(det, &bundle)?;
    let thresholds = thresholds.unwrap_or_else(coco_thresholds);
    let report = evaluate(&dets, &bundle, &thresholds)?;
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Csv => report.to_csv(),
    };
    emit(out, &text)
}

fn cmd_size_hist(gt: &Path, det: &Path, out: Option<&Path>) -> Result<()> {
    require_file(gt)?;
    require_file(det)?;
    let bundle = load_ground_truth(gt)?;
    let dets = load_detections(det, &bundle)?;
    emit(out, &size_ratio_histogram(&dets, &bundle).to_csv())
}

fn csv_number(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn cmd_loss_curve(alphas: &[f64], beta: f64, x_min: f64, x_max: f64, points: usize, out: Option<&Path>) -> Result<()> {
    if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
        bail!("need finite x-min < x-max, got {x_min}..{x_max}");
    }
    if points < 2 {
        bail!("need at least 2 points, got {points}");
    }
    let mut text = String::from("alpha,beta,x,value,gradient,smooth_l1,ratio\n");
    for &alpha in alphas {
        let p = AsymmetricLossParams::new(alpha, beta)?;
        for s in loss_table(&p, x_min, x_max, points) {
            // loss(-x) / loss(x), undefined at x = 0
            let ratio = if s.x < 0.0 { s.value / p.value(-s.x) } else { p.value(-s.x) / s.value };
            text.push_str(&format!(
                "{alpha},{beta},{},{},{},{},{}\n",
                s.x,
                s.value,
                s.gradient,
                smooth_l1(s.x, beta),
                if s.x == 0.0 { String::new() } else { csv_number(ratio) }
            ));
        }
    }
    emit(out, &text)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    gt: &Path,
    alphas: &[f64],
    beta: f64,
    noise: NoiseDistribution,
    seed: u64,
    per_dimension: bool,
    settings: SimulationSettings,
    out: Option<&Path>,
) -> Result<()> {
    require_file(gt)?;
    let bundle = load_ground_truth(gt)?;
    let mut noise = NoiseConfig::new(noise, seed);
    noise.per_dimension = per_dimension;
    let mut text = String::from("alpha,beta,fraction_larger,ap,ap50,mean_scale_ratio,width_offset,height_offset\n");
    for &alpha in alphas {
        let p = AsymmetricLossParams::new(alpha, beta)?;
        let o = simulate_detector(&bundle, &noise, &p, settings).with_context(|| format!("alpha {alpha}"))?;
        text.push_str(&format!(
            "{alpha},{beta},{},{},{},{},{},{}\n",
            o.fraction_larger,
            o.ap.ap,
            o.ap.ap50.map(csv_number).unwrap_or_default(),
            o.mean_scale_ratio,
            o.width_offset.offset,
            o.height_offset.offset
        ));
    }
    emit(out, &text)
}

fn load_judgments(path: &Path) -> Result<JudgmentTable> {
    require_file(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let ctx = || format!("{}", path.display());
    let table = match ext.as_str() {
        "csv" => JudgmentTable::from_csv(fs::File::open(path).with_context(ctx)?).with_context(ctx)?,
        "jsonl" => {
            let text = fs::read_to_string(path).with_context(ctx)?;
            let records = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str::<LabeledJudgment>(l)
                        .with_context(|| format!("{} (record {i})", path.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            JudgmentTable::from_labeled(&records).with_context(ctx)?
        }
        "json" => {
            let text = fs::read_to_string(path).with_context(ctx)?;
            let export: StudyExport = serde_json::from_str(&text).with_context(ctx)?;
            export.judgment_table().with_context(ctx)?
        }
        _ => bail!("{}: expected a .csv, .jsonl or .json judgment file", path.display()),
    };
    Ok(table)
}

fn cmd_analyze_study(path: &Path, method: Method, format: ReportFormat, out: Option<&Path>) -> Result<()> {
    let table = load_judgments(path)?;
    let report = analyze(&table, method.into());
    let text = match format {
        ReportFormat::Text => report.summary(),
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
    };
    emit(out, &text)
}

fn cmd_serve(configs: &[PathBuf], data_dir: &Path, images_dir: Option<PathBuf>, addr: &str, seed: Option<u64>) -> Result<()> {
    let configs = configs
        .iter()
        .map(|p| StudyConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &images_dir {
        if !dir.is_dir() {
            bail!("{}: not a directory", dir.display());
        }
    }
    let service = Arc::new(StudyService::from_configs(&configs, data_dir, seed)?);
    let app = boxpref_study::http::router(service, images_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        io::stdout().flush()?;
        boxpref_study::http::serve(listener, app).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scale { gt, det, factor, out } => cmd_scale(&gt, &det, factor, &out),
        Command::Eval {
            gt,
            det,
            thresholds,
            format,
            out,
        } => cmd_eval(&gt, &det, thresholds, format, out.as_deref()),
        Command::SizeHist { gt, det, out } => cmd_size_hist(&gt, &det, out.as_deref()),
        Command::LossCurve {
            alpha,
            beta,
            x_min,
            x_max,
            points,
            out,
        } => cmd_loss_curve(&alpha, beta, x_min, x_max, points, out.as_deref()),
        Command::Simulate {
            gt,
            alpha,
            beta,
            noise,
            seed,
            per_dimension,
            lr,
            iters,
            out,
        } => cmd_simulate(&gt, &alpha, beta, noise, seed, per_dimension, SimulationSettings { lr, iters }, out.as_deref()),
        Command::AnalyzeStudy {
            judgments,
            method,
            format,
            out,
        } => cmd_analyze_study(&judgments, method, format, out.as_deref()),
        Command::Serve {
            configs,
            data_dir,
            images_dir,
            addr,
            seed,
        } => cmd_serve(&configs, &data_dir, images_dir, &addr, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
