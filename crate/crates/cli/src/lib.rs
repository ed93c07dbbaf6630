//! `sketchparse` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data errors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use sketchparse::augment::{expand, AugmentConfig};
use sketchparse::classstats::{apply_background_boost, collect_stats};
use sketchparse::gradcheck::{loss_gradient_suite, network_gradient_suite};
use sketchparse::homotrans::{homogeneous_transform, HtConfig, DEFAULT_THRESHOLD};
use sketchparse::metrics::{sketch_iou_with, BackgroundMode};
use sketchparse::raster::{
    load_gray, read_manifest, resolve_entry_path, save_gray, save_labels, write_manifest, Dataset, DatasetItem,
    LabelMap, ManifestEntry,
};
use sketchparse::staged::{train, LossKind, Mode, StagedPlan, Taxonomy, TrainedModel};
use sketchparse::synthgen::{generate, test_split, SynthSpec};

pub mod palette;

#[derive(Debug, Parser)]
#[command(name = "sketchparse", version, about = "Sketch part parsing toolkit", arg_required_else_help = true)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Skip the resolved-config banner and progress logging.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Homogeneous transformation to 1-pixel strokes.
    Ht(HtArgs),
    /// Rotation, mirroring and erasing of a manifest.
    Augment(AugmentArgs),
    /// Per-class pixel statistics and weights.
    Stats(StatsArgs),
    /// Finite-difference check of the loss and network gradients.
    LossCheck(LossCheckArgs),
    /// Synthetic sketch corpus with train/test manifests and taxonomy.
    Synth(SynthArgs),
    /// Trains a model directory.
    Train(TrainArgs),
    /// Writes predicted label maps and a prediction manifest.
    Predict(PredictArgs),
    /// Average and per-category IOU.
    Eval(EvalArgs),
    /// Colour PNG of a label map.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct HtArgs {
    #[arg(long = "in", conflicts_with = "manifest", requires = "out")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: u8,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Rotation angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-30,-20,-10,0,10,20,30")]
    pub angles: Vec<f64>,
    #[arg(long)]
    pub no_mirror: bool,
    #[arg(long, default_value_t = 31)]
    pub erase_size: usize,
    /// Erased copies per rotation/mirror variant.
    #[arg(long, default_value_t = 1)]
    pub erase_count: usize,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub classes: usize,
    /// Background weight multiplier.
    #[arg(long, default_value_t = 1.0)]
    pub bg_boost: f64,
    /// Stats file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Network parameter coordinates to probe.
    #[arg(long, default_value_t = 20)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub per_category: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_category: usize,
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// staged, super, full or independent.
    #[arg(long, default_value = "staged")]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
    /// soft-weighted or standard.
    #[arg(long, default_value = "soft-weighted")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 2000)]
    pub stage1_iters: usize,
    #[arg(long, default_value_t = 200)]
    pub stage2_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub bg_boost: f64,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_manifest: PathBuf,
    #[arg(long)]
    pub gt_manifest: PathBuf,
    #[arg(long)]
    pub per_category: bool,
    #[arg(long)]
    pub exclude_background: bool,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Label map (PGM or PNG).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Bad flag combinations found after parsing; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\nRun `sketchparse --help` for usage.");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(UsageError("--threads must be at least 1".into()).into());
    }
    if !cli.quiet {
        eprintln!("config: seed={} threads={} quiet={} {:?}", cli.seed, threads, cli.quiet, cli.command);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("building thread pool")?;
    pool.install(|| match &cli.command {
        Command::Ht(a) => cmd_ht(a),
        Command::Augment(a) => cmd_augment(a, cli.seed),
        Command::Stats(a) => cmd_stats(a),
        Command::LossCheck(a) => cmd_loss_check(a, cli.seed),
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    })
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Manifest path re-rooted under an output directory. Absolute paths keep
/// only their file name.
fn relocated(out_dir: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        out_dir.join(entry.file_name().unwrap_or(entry.as_os_str()))
    } else {
        out_dir.join(entry)
    }
}

fn cmd_ht(a: &HtArgs) -> anyhow::Result<()> {
    let cfg = HtConfig { threshold: a.threshold };
    match (&a.input, &a.out, &a.manifest, &a.out_dir) {
        (Some(input), Some(out), None, _) => {
            let img = load_gray(input).with_context(|| format!("reading {}", input.display()))?;
            create_parent(out)?;
            save_gray(&homogeneous_transform(&img, cfg), out).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        (None, _, Some(manifest), Some(out_dir)) => {
            let entries = read_manifest(manifest)?;
            for e in &entries {
                let src = resolve_entry_path(manifest, &e.image);
                let img = load_gray(&src).with_context(|| format!("reading {}", src.display()))?;
                let dst = relocated(out_dir, &e.image);
                create_parent(&dst)?;
                save_gray(&homogeneous_transform(&img, cfg), &dst)?;
                let lab_src = resolve_entry_path(manifest, &e.labels);
                let lab_dst = relocated(out_dir, &e.labels);
                if lab_src != lab_dst {
                    create_parent(&lab_dst)?;
                    fs::copy(&lab_src, &lab_dst).with_context(|| format!("copying {}", lab_src.display()))?;
                }
            }
            let rel: Vec<ManifestEntry> = entries
                .iter()
                .map(|e| ManifestEntry {
                    image: relocated(Path::new(""), &e.image),
                    labels: relocated(Path::new(""), &e.labels),
                    ..e.clone()
                })
                .collect();
            write_manifest(out_dir.join("manifest.tsv"), &rel)?;
            info!("transformed {} images into {}", entries.len(), out_dir.display());
            Ok(())
        }
        _ => Err(UsageError("ht needs either --in and --out, or --manifest and --out-dir".into()).into()),
    }
}

/// Loads a manifest; without `classes` the count is the largest label + 1.
pub fn load_manifest_dataset(manifest: &Path, classes: Option<usize>) -> anyhow::Result<Dataset> {
    let entries = read_manifest(manifest)?;
    let mut raw = Vec::with_capacity(entries.len());
    for e in &entries {
        let ip = resolve_entry_path(manifest, &e.image);
        let lp = resolve_entry_path(manifest, &e.labels);
        let image = load_gray(&ip).with_context(|| format!("reading {}", ip.display()))?;
        let labels = load_gray(&lp).with_context(|| format!("reading {}", lp.display()))?;
        raw.push((image, labels, e));
    }
    let max = raw.iter().flat_map(|(_, l, _)| l.data().iter().copied()).max().unwrap_or(0) as usize;
    let classes = classes.unwrap_or(max + 1);
    let mut items = Vec::with_capacity(raw.len());
    for (image, labels, e) in raw {
        let labels = LabelMap::new(labels.width(), labels.height(), classes, labels.into_data())?;
        items.push(DatasetItem {
            image,
            labels,
            category: e.category.clone(),
            super_category: e.super_category.clone(),
        });
    }
    Ok(Dataset::new(items, Vec::new())?)
}

/// Writes `images/NNNNNN.pgm`, `labels/NNNNNN.pgm` and `manifest.tsv`.
fn write_dataset(data: &Dataset, out_dir: &Path) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("labels"))?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, it) in data.items().iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:06}.pgm"));
        let labels = PathBuf::from(format!("labels/{i:06}.pgm"));
        save_gray(&it.image, out_dir.join(&image))?;
        save_labels(&it.labels, out_dir.join(&labels))?;
        entries.push(ManifestEntry {
            image,
            labels,
            category: it.category.clone(),
            super_category: it.super_category.clone(),
        });
    }
    let path = out_dir.join("manifest.tsv");
    write_manifest(&path, &entries)?;
    Ok(path)
}

fn cmd_augment(a: &AugmentArgs, seed: u64) -> anyhow::Result<()> {
    let cfg = AugmentConfig {
        angles: a.angles.clone(),
        mirror: !a.no_mirror,
        erase_size: a.erase_size,
        erase_count: a.erase_count,
        seed,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let data = load_manifest_dataset(&a.manifest, a.classes)?;
    let out = expand(&data, &cfg)?;
    let path = write_dataset(&out, &a.out_dir)?;
    info!("{} items -> {} items in {}", data.len(), out.len(), path.display());
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> anyhow::Result<()> {
    if !(a.bg_boost.is_finite() && a.bg_boost > 0.0) {
        return Err(UsageError("--bg-boost must be positive".into()).into());
    }
    let data = load_manifest_dataset(&a.manifest, Some(a.classes))?;
    let stats = apply_background_boost(&collect_stats(&data, a.classes)?, a.bg_boost)?;
    println!("class\tt\tn\tphi\talpha");
    for i in 0..stats.classes {
        println!("{i}\t{}\t{}\t{:.6}\t{:.6}", stats.t[i], stats.n[i], stats.phi[i], stats.alpha[i]);
    }
    println!("median\t{:.6}", stats.median);
    create_parent(&a.out)?;
    stats.write_file(&a.out)?;
    Ok(())
}

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

fn cmd_loss_check(a: &LossCheckArgs, seed: u64) -> anyhow::Result<()> {
    let loss = loss_gradient_suite(seed, a.cases)?;
    let net = network_gradient_suite(seed, a.coords)?;
    println!("check\tcases\tcoordinates\tmax_rel_error\ttolerance");
    println!("loss\t{}\t{}\t{:.6e}\t{LOSS_TOLERANCE:e}", loss.cases, loss.coordinates, loss.max_rel_error);
    println!("network\t{}\t{}\t{:.6e}\t{NETWORK_TOLERANCE:e}", net.cases, net.coordinates, net.max_rel_error);
    if !(loss.max_rel_error < LOSS_TOLERANCE && net.max_rel_error < NETWORK_TOLERANCE) {
        bail!("finite-difference check exceeded tolerance");
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> anyhow::Result<()> {
    let spec = SynthSpec { images_per_category: a.per_category, canvas: a.canvas, seed, ..SynthSpec::default() };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let train = generate(&spec)?;
    let test = generate(&test_split(&spec, a.test_per_category))?;
    let train_manifest = write_dataset(&train, &a.out_dir.join("train"))?;
    let test_manifest = write_dataset(&test, &a.out_dir.join("test"))?;
    let tax = Taxonomy::new(spec.categories.iter().fold(Vec::<(String, Vec<String>)>::new(), |mut groups, c| {
        match groups.iter_mut().find(|(s, _)| *s == c.super_category) {
            Some((_, cats)) => cats.push(c.name.clone()),
            None => groups.push((c.super_category.clone(), vec![c.name.clone()])),
        }
        groups
    }))?;
    tax.write_file(a.out_dir.join("taxonomy.tsv"))?;
    fs::write(
        a.out_dir.join("classes.tsv"),
        train.class_names.iter().enumerate().map(|(i, n)| format!("{i}\t{n}\n")).collect::<String>(),
    )?;
    info!("wrote {} and {}", train_manifest.display(), test_manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64) -> anyhow::Result<()> {
    let mut plan = StagedPlan {
        stage1_iters: a.stage1_iters,
        stage2_iters: a.stage2_iters,
        mode: a.mode,
        seed,
        loss: a.loss,
        background_boost: a.bg_boost,
        ..StagedPlan::default()
    };
    plan.stage1_opt.base_lr = a.lr;
    plan.stage2_opt.base_lr = a.lr;
    plan.validate().map_err(|e| UsageError(e.to_string()))?;
    let data = load_manifest_dataset(&a.manifest, a.classes)?;
    let tax = Taxonomy::read_file(&a.taxonomy).with_context(|| format!("reading {}", a.taxonomy.display()))?;
    info!("training {} on {} items, {} classes", plan.mode.name(), data.len(), data.classes());
    let model = train(&data, &tax, &plan)?;
    model.save(&a.out)?;
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> anyhow::Result<()> {
    let model = TrainedModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let entries = read_manifest(&a.manifest)?;
    fs::create_dir_all(a.out_dir.join("pred"))?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let src = resolve_entry_path(&a.manifest, &e.image);
        let img = load_gray(&src).with_context(|| format!("reading {}", src.display()))?;
        let pred = model.predict(&e.category, &img)?;
        let labels = PathBuf::from(format!("pred/{i:06}.pgm"));
        save_labels(&pred, a.out_dir.join(&labels))?;
        let image = fs::canonicalize(&src).unwrap_or(src);
        out.push(ManifestEntry { image, labels, ..e.clone() });
    }
    write_manifest(a.out_dir.join("manifest.tsv"), &out)?;
    Ok(())
}

/// Per-category and overall mean sketch IOU.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub per_category: BTreeMap<String, (usize, f64)>,
    pub count: usize,
    pub average: f64,
}

impl EvalTable {
    /// `category<TAB>sketches<TAB>iou` rows with six decimals, ending with the
    /// `average` row.
    pub fn to_tsv(&self, per_category: bool) -> String {
        let mut s = String::from("category\tsketches\tiou\n");
        if per_category {
            for (cat, (n, iou)) in &self.per_category {
                s.push_str(&format!("{cat}\t{n}\t{iou:.6}\n"));
            }
        }
        s.push_str(&format!("average\t{}\t{:.6}\n", self.count, self.average));
        s
    }
}

pub fn eval_manifests(
    pred_manifest: &Path,
    gt_manifest: &Path,
    classes: Option<usize>,
    mode: BackgroundMode,
) -> anyhow::Result<EvalTable> {
    let pe = read_manifest(pred_manifest)?;
    let ge = read_manifest(gt_manifest)?;
    if pe.len() != ge.len() {
        bail!("{} predictions for {} ground-truth rows", pe.len(), ge.len());
    }
    if pe.is_empty() {
        bail!("empty manifests");
    }
    let read = |m: &Path, e: &ManifestEntry| {
        let p = resolve_entry_path(m, &e.labels);
        load_gray(&p).with_context(|| format!("reading {}", p.display()))
    };
    let mut pairs = Vec::with_capacity(pe.len());
    for (i, (p, g)) in pe.iter().zip(&ge).enumerate() {
        if p.category != g.category {
            bail!("row {}: prediction category `{}` vs ground truth `{}`", i + 1, p.category, g.category);
        }
        pairs.push((read(pred_manifest, p)?, read(gt_manifest, g)?, &g.category));
    }
    let max = pairs.iter().flat_map(|(p, g, _)| p.data().iter().chain(g.data())).copied().max().unwrap_or(0);
    let classes = classes.unwrap_or(max as usize + 1);
    let mut per: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for (p, g, cat) in pairs {
        let p = LabelMap::new(p.width(), p.height(), classes, p.into_data())?;
        let g = LabelMap::new(g.width(), g.height(), classes, g.into_data())?;
        let iou = sketch_iou_with(&p, &g, mode)?;
        total += iou;
        let e = per.entry(cat.clone()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += iou;
    }
    for v in per.values_mut() {
        v.1 /= v.0 as f64;
    }
    Ok(EvalTable { per_category: per, count: pe.len(), average: total / pe.len() as f64 })
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let mode = if a.exclude_background { BackgroundMode::Exclude } else { BackgroundMode::Include };
    let table = eval_manifests(&a.pred_manifest, &a.gt_manifest, a.classes, mode)?;
    print!("{}", table.to_tsv(a.per_category));
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> anyhow::Result<()> {
    let labels = load_gray(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    create_parent(&a.out)?;
    fs::write(&a.out, palette::encode(&labels)?).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
