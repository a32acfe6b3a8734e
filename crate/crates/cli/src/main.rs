//! `templatenet` command-line driver.
//!
//! Every subcommand resolves its settings from built-in defaults, an
//! optional `key = value` file (`--config`) and flags, in that order, then
//! writes into its own run directory together with the effective settings
//! (`config.txt`) and the toolkit version (`version.txt`).

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use templatenet::evaluation::{accuracy_table, detect, format_table, pr_csv, Criterion, SceneResult};
use templatenet::geometry::Vec3;
use templatenet::network::{load_checkpoint, save_checkpoint};
use templatenet::orthopatch::{backproject, depth_to_patch, DepthImage};
use templatenet::synthgen::{make_dataset, make_test_scene, Dataset, DatasetSpec, ObjectKind, TestSceneConfig};
use templatenet::template_layer::{build_bank, BankGeometry, TemplateBank, ViewpointGrid};
use templatenet::training::{gradcheck, head_accuracy, GradcheckConfig, Precision, Trainer};
use templatenet::viz::{dump_filters, dump_template_response, normals_image, FilterMode};
use templatenet::{ArchConfig, HeadMode, NetworkParams, Scalar, TrainConfig};

use settings::Settings;

/// Environment variable naming the root under which relative run
/// directories are created.
const RUN_ROOT_ENV: &str = "TEMPLATENET_RUN_DIR";
const FAILED_MARKER: &str = ".failed";

#[derive(Parser)]
#[command(name = "templatenet", version, about = "Depth-based object instance recognition with a fixed template layer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run directory. Relative paths resolve against $TEMPLATENET_RUN_DIR,
    /// or ./runs when unset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Settings file of `key = value` lines; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    GenData(GenDataArgs),
    /// Render a template bank for an object.
    GenBank(GenBankArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Finite-difference gradient check on the miniature network.
    Gradcheck(GradcheckArgs),
    /// Sliding-window detection on a depth image.
    Detect(DetectArgs),
    /// Detection accuracy and PR curves on synthetic test scenes.
    Eval(EvalArgs),
    /// Filter and template-response images.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    object: Option<String>,
    #[arg(long)]
    n_fg: Option<usize>,
    #[arg(long)]
    n_bg: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Meters per patch cell.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    distance_min: Option<f64>,
    #[arg(long)]
    distance_max: Option<f64>,
    #[arg(long)]
    max_shift: Option<i32>,
    #[arg(long)]
    clutter: Option<bool>,
    #[arg(long)]
    floor: Option<bool>,
    #[arg(long)]
    clutter_min: Option<usize>,
    #[arg(long)]
    clutter_max: Option<usize>,
    /// Comma-separated distractor objects.
    #[arg(long)]
    library: Option<String>,
    #[arg(long)]
    bg_on_object: Option<f64>,
}

#[derive(Args, Debug)]
struct GenBankArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    object: Option<String>,
    /// Number of template viewpoints (9, 45 or 128).
    #[arg(long)]
    templates: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Template bank directory; rendered from the dataset object when absent.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Number of template viewpoints (9, 45 or 128).
    #[arg(long)]
    templates: Option<usize>,
    /// Train the plain CNN baseline without the template layer.
    #[arg(long)]
    no_template_layer: bool,
    #[arg(long)]
    template_layer: Option<bool>,
    /// mixed or pose-only.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    hardmine_period: Option<usize>,
    #[arg(long)]
    subset_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    decay_epoch: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    kink_guard: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    no_template_layer: bool,
    #[arg(long)]
    template_layer: Option<bool>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Depth image (DPT1) with its `.intrinsics` sidecar.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Patch centre as `x,y,z` meters, or `auto` for the point centroid.
    #[arg(long)]
    center: Option<String>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    object: Option<String>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stride: Option<usize>,
    /// Comma-separated objects placed in every scene.
    #[arg(long)]
    distractors: Option<String>,
    /// Row name in the accuracy table.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Convolution layer whose filters are tiled (1-based).
    #[arg(long)]
    layer: Option<usize>,
    /// averaged or per-channel.
    #[arg(long)]
    mode: Option<String>,
    /// Dataset providing the input for the template responses.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    example: Option<usize>,
    /// Comma-separated template channels (default: all).
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    zoom: Option<usize>,
}

/// Invalid input (exit 1) or a failure during the run (exit 2).
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = std::result::Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// A run directory plus the settings that produced it.
struct Run {
    dir: PathBuf,
}

impl Run {
    fn create(common: &Common, default_name: &str, command: &str, settings: &Settings) -> Outcome<Self> {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        let dir = root.join(common.out.clone().unwrap_or_else(|| PathBuf::from(default_name)));
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating run directory {}", dir.display()))
            .invalid()?;
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).context("clearing old failure marker").invalid()?;
        }
        fs::write(dir.join("version.txt"), format!("templatenet {}\n", templatenet::VERSION))
            .context("writing version.txt")
            .invalid()?;
        fs::write(dir.join("config.txt"), settings.to_text(command))
            .context("writing config.txt")
            .invalid()?;
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Outcome<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display())).runtime()
    }
}

fn setup_workers(settings: &Settings) -> Outcome<()> {
    let n: usize = settings.parse("workers").invalid()?;
    if n > 0 {
        // A second call in the same process fails harmlessly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn common_flags(c: &Common) -> Vec<(&'static str, Option<String>)> {
    vec![("workers", c.workers.map(|w| w.to_string()))]
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn path_opt(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn template_layer_flag(no: bool, explicit: Option<bool>) -> Option<String> {
    if no {
        Some("false".into())
    } else {
        explicit.map(|b| b.to_string())
    }
}

fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("{}: {}", s, e)))
        .collect()
}

fn required_path(settings: &Settings, key: &str) -> Outcome<PathBuf> {
    let v = settings.get(key);
    if v.is_empty() {
        return Err(Failure::Invalid(anyhow!("--{} is required", key.replace('_', "-"))));
    }
    Ok(PathBuf::from(v))
}

fn arch_for(templates: usize, template_layer: bool, head: HeadMode) -> anyhow::Result<ArchConfig> {
    let grid = ViewpointGrid::with_viewpoints(templates)?;
    Ok(ArchConfig::desk(3 * grid.len()).with_template_layer(template_layer).with_head(head))
}

fn render_bank(object: ObjectKind, arch: &ArchConfig) -> anyhow::Result<TemplateBank> {
    let grid = ViewpointGrid::with_viewpoints(arch.template_count() / 3)?;
    let geom = BankGeometry::for_arch(arch)?;
    Ok(build_bank(&object.mesh(), &grid.viewpoints(), &geom)?)
}

fn gen_data(args: &GenDataArgs) -> Outcome<()> {
    let spec0 = DatasetSpec::new(ObjectKind::Box, 1000, 1000, 1);
    let mut defaults = spec0.settings();
    defaults.push(("workers".into(), "0".into()));
    let mut flags = common_flags(&args.common);
    flags.extend([
        ("object", args.object.clone()),
        ("n_fg", opt(&args.n_fg)),
        ("n_bg", opt(&args.n_bg)),
        ("seed", opt(&args.seed)),
        ("patch_size", opt(&args.patch_size)),
        ("scale", opt(&args.scale)),
        ("distance_min", opt(&args.distance_min)),
        ("distance_max", opt(&args.distance_max)),
        ("max_shift", opt(&args.max_shift)),
        ("clutter", opt(&args.clutter)),
        ("floor", opt(&args.floor)),
        ("clutter_min", opt(&args.clutter_min)),
        ("clutter_max", opt(&args.clutter_max)),
        ("library", args.library.clone()),
        ("bg_on_object", opt(&args.bg_on_object)),
    ]);
    let settings = Settings::resolve(defaults, args.common.config.as_deref(), flags).invalid()?;
    let mut spec = spec0;
    for (k, v) in settings.pairs() {
        if k != "workers" {
            spec.apply_setting(k, v).invalid()?;
        }
    }
    spec.gen.validate().invalid()?;
    if spec.n_fg == 0 || spec.n_bg == 0 {
        return Err(Failure::Invalid(anyhow!("n_fg and n_bg must both be positive")));
    }
    setup_workers(&settings)?;
    let run = Run::create(&args.common, "gen-data", "gen-data", &settings)?;
    with_marker(&run, || {
        let data = make_dataset(&spec).runtime()?;
        data.save(&run.path("dataset")).runtime()?;
        println!(
            "wrote {} examples ({} foreground) to {}",
            data.len(),
            data.foreground_count(),
            run.path("dataset").display()
        );
        Ok(())
    })
}

fn gen_bank(args: &GenBankArgs) -> Outcome<()> {
    let defaults = vec![
        ("object".into(), "box".into()),
        ("templates".into(), "9".into()),
        ("workers".into(), "0".into()),
    ];
    let mut flags = common_flags(&args.common);
    flags.extend([("object", args.object.clone()), ("templates", opt(&args.templates))]);
    let settings = Settings::resolve(defaults, args.common.config.as_deref(), flags).invalid()?;
    let object: ObjectKind = settings.parse("object").invalid()?;
    let arch = arch_for(settings.parse("templates").invalid()?, true, HeadMode::Mixed).invalid()?;
    setup_workers(&settings)?;
    let run = Run::create(&args.common, "gen-bank", "gen-bank", &settings)?;
    with_marker(&run, || {
        let bank = render_bank(object, &arch).runtime()?;
        bank.save(&run.path("bank")).runtime()?;
        println!(
            "wrote {} template maps (density {:.3}) to {}",
            bank.len(),
            bank.density(),
            run.path("bank").display()
        );
        Ok(())
    })
}

fn train(args: &TrainArgs) -> Outcome<()> {
    let mut defaults: Vec<(String, String)> = vec![
        ("data".into(), String::new()),
        ("bank".into(), String::new()),
        ("templates".into(), "9".into()),
        ("template_layer".into(), "true".into()),
        ("head".into(), "mixed".into()),
    ];
    let base = TrainConfig::default();
    for k in TrainConfig::KEYS {
        defaults.push((k.to_string(), base.get(k).expect("known key")));
    }
    defaults.push(("workers".into(), "0".into()));
    let mut flags = common_flags(&args.common);
    flags.extend([
        ("data", path_opt(&args.data)),
        ("bank", path_opt(&args.bank)),
        ("templates", opt(&args.templates)),
        ("template_layer", template_layer_flag(args.no_template_layer, args.template_layer)),
        ("head", args.head.clone()),
        ("learning_rate", opt(&args.learning_rate)),
        ("momentum", opt(&args.momentum)),
        ("batch_size", opt(&args.batch_size)),
        ("epochs", opt(&args.epochs)),
        ("lambda", opt(&args.lambda)),
        ("hardmine_period", opt(&args.hardmine_period)),
        ("subset_fraction", opt(&args.subset_fraction)),
        ("seed", opt(&args.seed)),
        ("precision", args.precision.clone()),
        ("decay_epoch", opt(&args.decay_epoch)),
    ]);
    let settings = Settings::resolve(defaults, args.common.config.as_deref(), flags).invalid()?;
    let mut cfg = TrainConfig::default();
    for k in TrainConfig::KEYS {
        cfg.set(k, settings.get(k)).invalid()?;
    }
    cfg.validate().invalid()?;
    let head: HeadMode = settings.parse("head").invalid()?;
    let template_layer: bool = settings.parse("template_layer").invalid()?;
    let arch = arch_for(settings.parse("templates").invalid()?, template_layer, head).invalid()?;
    let data_dir = required_path(&settings, "data")?;
    let data = Dataset::load(&data_dir)
        .with_context(|| format!("loading dataset {}", data_dir.display()))
        .invalid()?;
    if data.spec.gen.patch_size != arch.input_size {
        return Err(Failure::Invalid(anyhow!(
            "dataset patches are {} cells, the network expects {}",
            data.spec.gen.patch_size,
            arch.input_size
        )));
    }
    let bank_dir = settings.get("bank");
    let bank = if !template_layer {
        None
    } else if bank_dir.is_empty() {
        None
    } else {
        let b = TemplateBank::load(Path::new(bank_dir))
            .with_context(|| format!("loading bank {}", bank_dir))
            .invalid()?;
        if b.len() != arch.template_count() {
            return Err(Failure::Invalid(anyhow!(
                "bank has {} maps, {} templates need {}",
                b.len(),
                arch.template_count() / 3,
                arch.template_count()
            )));
        }
        Some(b)
    };
    setup_workers(&settings)?;
    let run = Run::create(&args.common, "train", "train", &settings)?;
    with_marker(&run, || {
        let bank = match (template_layer, bank) {
            (false, _) => None,
            (true, Some(b)) => Some(Arc::new(b)),
            (true, None) => Some(Arc::new(render_bank(data.spec.object, &arch).runtime()?)),
        };
        match cfg.precision {
            Precision::F32 => train_as::<f32>(&run, &arch, bank, &data, &cfg),
            Precision::F64 => train_as::<f64>(&run, &arch, bank, &data, &cfg),
        }
    })
}

fn train_as<T: Scalar>(
    run: &Run,
    arch: &ArchConfig,
    bank: Option<Arc<TemplateBank>>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Outcome<()> {
    let params = NetworkParams::<T>::init(arch, bank, cfg.seed).runtime()?;
    let mut trainer = Trainer::new(params, &data.examples, cfg).runtime()?;
    let mut history = String::from("# epoch loss subset_size learning_rate\n");
    for _ in 0..cfg.epochs {
        let result = trainer.run_epoch();
        if let Ok(stats) = &result {
            history.push_str(&format!("{}\n", stats));
            println!("epoch {} loss {:.6}", stats.epoch, stats.loss);
        }
        if let Err(e) = result {
            run.write("history.txt", &history)?;
            return Err(Failure::Runtime(e.into()));
        }
    }
    run.write("history.txt", &history)?;
    let (params, _) = trainer.into_parts();
    save_checkpoint(&params, &run.path("checkpoint")).runtime()?;
    let grid = data.spec.gen.pose_grid();
    let acc = head_accuracy(&params, &data.examples, &grid, cfg.lambda).runtime()?;
    run.write(
        "metrics.txt",
        &format!(
            "train_fg_accuracy = {:.6}\ntrain_pose_accuracy = {:.6}\ntrain_pose_exact = {:.6}\ntrain_loss = {:.9}\n",
            acc.fg, acc.pose, acc.pose_exact, acc.loss
        ),
    )?;
    println!("training accuracy fg {:.4} pose {:.4}", acc.fg, acc.pose);
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Outcome<()> {
    let d = GradcheckConfig::default();
    let defaults = vec![
        ("trials".into(), d.trials.to_string()),
        ("seed".into(), d.seed.to_string()),
        ("epsilon".into(), format!("{:?}", d.epsilon)),
        ("tolerance".into(), format!("{:?}", d.tolerance)),
        ("kink_guard".into(), format!("{:?}", d.kink_guard)),
        ("lambda".into(), format!("{:?}", d.lambda)),
        ("head".into(), "mixed".into()),
        ("template_layer".into(), "true".into()),
        ("workers".into(), "0".into()),
    ];
    let mut flags = common_flags(&args.common);
    flags.extend([
        ("trials", opt(&args.trials)),
        ("seed", opt(&args.seed)),
        ("epsilon", opt(&args.epsilon)),
        ("tolerance", opt(&args.tolerance)),
        ("kink_guard", opt(&args.kink_guard)),
        ("lambda", opt(&args.lambda)),
        ("head", args.head.clone()),
        ("template_layer", template_layer_flag(args.no_template_layer, args.template_layer)),
    ]);
    let settings = Settings::resolve(defaults, args.common.config.as_deref(), flags).invalid()?;
    let head: HeadMode = settings.parse("head").invalid()?;
    let cfg = GradcheckConfig {
        arch: ArchConfig::miniature()
            .with_template_layer(settings.parse("template_layer").invalid()?)
            .with_head(head),
        trials: settings.parse("trials").invalid()?,
        epsilon: settings.parse("epsilon").invalid()?,
        tolerance: settings.parse("tolerance").invalid()?,
        kink_guard: settings.parse("kink_guard").invalid()?,
        lambda: settings.parse("lambda").invalid()?,
        seed: settings.parse("seed").invalid()?,
    };
    if cfg.trials == 0 || !(cfg.epsilon > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Failure::Invalid(anyhow!("trials, epsilon and tolerance must be positive")));
    }
    setup_workers(&settings)?;
    let run = Run::create(&args.common, "gradcheck", "gradcheck", &settings)?;
    with_marker(&run, || {
        let report = gradcheck(&cfg).runtime()?;
        let text = format!("{}\n", report);
        run.write("report.txt", &text)?;
        print!("{}", text);
        if report.passed() {
            Ok(())
        } else {
            Err(Failure::Runtime(anyhow!("gradient check failed")))
        }
    })
}

fn detect_cmd(args: &DetectArgs) -> Outcome<()> {
    let defaults = vec![
        ("checkpoint".into(), String::new()),
        ("depth".into(), String::new()),
        ("center".into(), "auto".into()),
        ("scale".into(), format!("{:?}", templatenet::orthopatch::DEFAULT_SCALE)),
        ("patch_size".into(), "192".into()),
        ("stride".into(), templatenet::evaluation::DEFAULT_STRIDE.to_string()),
        ("workers".into(), "0".into()),
    ];
    let mut flags = common_flags(&args.common);
    flags.extend([
        ("checkpoint", path_opt(&args.checkpoint)),
        ("depth", path_opt(&args.depth)),
        ("center", args.center.clone()),
        ("scale", opt(&args.scale)),
        ("patch_size", opt(&args.patch_size)),
        ("stride", opt(&args.stride)),
    ]);
    let settings = Settings::resolve(defaults, args.common.config.as_deref(), flags).invalid()?;
    let params: NetworkParams<f32> = load_checkpoint(&required_path(&settings, "checkpoint")?)
        .context("loading checkpoint")
        .invalid()?;
    let depth = DepthImage::read(&required_path(&settings, "depth")?)
        .context("loading depth image")
        .invalid()?;
    let scale: f64 = settings.parse("scale").invalid()?;
    let size: usize = settings.parse("patch_size").invalid()?;
    let stride: usize = settings.parse("stride").invalid()?;
    if size < params.arch().input_size || stride == 0 || !(scale > 0.0) {
        return Err(Failure::Invalid(anyhow!(
            "patch_size must be at least {}, stride and scale positive",
            params.arch().input_size
        )));
    }
    let center = match settings.get("center") {
        "auto" => {
            let cloud = backproject(&depth);
            if cloud.is_empty() {
                return Err(Failure::Invalid(anyhow!("depth image has no valid pixels")));
            }
            let n = cloud.valid_count() as f64;
            cloud.valid().fold(Vec3::new(0.0, 0.0, 0.0), |a, p| a + p) * (1.0 / n)
        }
        text => {
            let v: Vec<f64> = parse_list(text).invalid()?;
            if v.len() != 3 {
                return Err(Failure::Invalid(anyhow!("center needs three coordinates")));
            }
            Vec3::new(v[0], v[1], v[2])
        }
    };
    setup_workers(&settings)?;
    let run = Run::create(&args.common, "detect", "detect", &settings)?;
    with_marker(&run, || {
        let patch = depth_to_patch(&depth, scale, (size, size), center).runtime()?;
        normals_image(&patch.normals)
            .runtime()?
            .write(&run.path("scene_normals.ppm"))
            .runtime()?;
        let dets = detect(&params, &patch, stride).runtime()?;
        let mut csv = String::from("row,col,x,y,z,p_fg,pose_class\n");
        for d in &dets {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                d.cell.0, d.cell.1, d.world.x, d.world.y, d.world.z, d.p_fg, d.pose_class
            ));
        }
        run.write("detections.csv", &csv)?;
        println!("{} detections", dets.len());
        Ok(())
    })
}

fn eval_cmd(args: &EvalArgs) -> Outcome<()> {
    let defaults = vec![
        ("checkpoint".into(), String::new()),
        ("object".into(), "box".into()),
        ("scenes".into(), "50".into()),
        ("seed".into(), "1000".into()),
        ("stride".into(), templatenet::evaluation::DEFAULT_STRIDE.to_string()),
        ("distractors".into(), String::new()),
        ("label".into(), String::new()),
        ("workers".into(), "0".into()),
    ];
    let mut flags = common_flags(&args.common);
    flags.extend([
        ("checkpoint", path_opt(&args.checkpoint)),
        ("object", args.object.clone()),
        ("scenes", opt(&args.scenes)),
        ("seed", opt(&args.seed)),
        ("stride", opt(&args.stride)),
        ("distractors", args.distractors.clone()),
        ("label", args.label.clone()),
    ]);
    let settings = Settings::resolve(defaults, args.common.config.as_deref(), flags).invalid()?;
    let params: NetworkParams<f32> = load_checkpoint(&required_path(&settings, "checkpoint")?)
        .context("loading checkpoint")
        .invalid()?;
    let object: ObjectKind = settings.parse("object").invalid()?;
    let n: usize = settings.parse("scenes").invalid()?;
    let seed: u64 = settings.parse("seed").invalid()?;
    let stride: usize = settings.parse("stride").invalid()?;
    let distractors: Vec<ObjectKind> = parse_list(settings.get("distractors")).invalid()?;
    if n == 0 || stride == 0 {
        return Err(Failure::Invalid(anyhow!("scenes and stride must be positive")));
    }
    let label = match settings.get("label") {
        "" if params.arch().template_layer => "templateNet".to_string(),
        "" => "CNN".to_string(),
        l => l.to_string(),
    };
    setup_workers(&settings)?;
    let run = Run::create(&args.common, "eval", "eval", &settings)?;
    with_marker(&run, || {
        let scene_cfg = TestSceneConfig::new(Default::default(), object, distractors.clone());
        let grid = scene_cfg.gen.pose_grid();
        let mesh = Arc::new(object.mesh());
        let mut results = Vec::with_capacity(n);
        for i in 0..n {
            let scene = make_test_scene(&mesh, &scene_cfg, templatenet::synthgen::derive_seed(seed, i as u64)).runtime()?;
            let detections = detect(&params, &scene.patch, stride).runtime()?;
            results.push(SceneResult {
                detections,
                truth: scene.truth,
            });
        }
        let acc = accuracy_table(&results, &grid);
        let table = format_table(&[(label.clone(), acc)]);
        run.write("table.txt", &table)?;
        run.write("pr_location.csv", &pr_csv(&templatenet::evaluation::pr_curve(&results, &grid, Criterion::Location)))?;
        run.write(
            "pr_location_pose.csv",
            &pr_csv(&templatenet::evaluation::pr_curve(&results, &grid, Criterion::LocationPose)),
        )?;
        print!("{}", table);
        Ok(())
    })
}

fn viz_cmd(args: &VizArgs) -> Outcome<()> {
    let defaults = vec![
        ("checkpoint".into(), String::new()),
        ("layer".into(), "1".into()),
        ("mode".into(), "averaged".into()),
        ("data".into(), String::new()),
        ("example".into(), "0".into()),
        ("channels".into(), String::new()),
        ("zoom".into(), "4".into()),
        ("workers".into(), "0".into()),
    ];
    let mut flags = common_flags(&args.common);
    flags.extend([
        ("checkpoint", path_opt(&args.checkpoint)),
        ("layer", opt(&args.layer)),
        ("mode", args.mode.clone()),
        ("data", path_opt(&args.data)),
        ("example", opt(&args.example)),
        ("channels", args.channels.clone()),
        ("zoom", opt(&args.zoom)),
    ]);
    let settings = Settings::resolve(defaults, args.common.config.as_deref(), flags).invalid()?;
    let params: NetworkParams<f32> = load_checkpoint(&required_path(&settings, "checkpoint")?)
        .context("loading checkpoint")
        .invalid()?;
    let layer: usize = settings.parse("layer").invalid()?;
    let n_conv = params.base_layers().len() + params.classifier_layers().len();
    if layer == 0 || layer > n_conv {
        return Err(Failure::Invalid(anyhow!("layer must be between 1 and {}", n_conv)));
    }
    let mode = match settings.get("mode") {
        "averaged" => FilterMode::Averaged,
        "per-channel" => FilterMode::PerChannel,
        m => return Err(Failure::Invalid(anyhow!("unknown mode {:?} (averaged or per-channel)", m))),
    };
    let example: usize = settings.parse("example").invalid()?;
    let zoom: usize = settings.parse("zoom").invalid()?;
    let input = match settings.get("data") {
        "" => None,
        dir => {
            let data = Dataset::load(Path::new(dir)).context("loading dataset").invalid()?;
            let ex = data
                .examples
                .get(example)
                .ok_or_else(|| Failure::Invalid(anyhow!("dataset has {} examples", data.len())))?;
            Some(ex.input.clone())
        }
    };
    let maps = params.template_maps().map(|m| m.shape()[0]).unwrap_or(0);
    let channels: Vec<usize> = match settings.get("channels") {
        "" => (0..maps).collect(),
        text => parse_list(text).invalid()?,
    };
    if input.is_some() && maps == 0 {
        return Err(Failure::Invalid(anyhow!("template responses need a network with a template bank")));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= maps.max(1)) {
        return Err(Failure::Invalid(anyhow!("template channel {} out of range", c)));
    }
    setup_workers(&settings)?;
    let run = Run::create(&args.common, "viz", "viz", &settings)?;
    with_marker(&run, || {
        let name = format!("filters_conv{}.pgm", layer);
        dump_filters(&params, layer - 1, mode, &run.path(&name)).runtime()?;
        println!("wrote {}", name);
        if let Some(input) = &input {
            let name = format!("responses_example{}.pgm", example);
            dump_template_response(&params, input, &channels, zoom, &run.path(&name)).runtime()?;
            normals_image(input)
                .runtime()?
                .write(&run.path(&format!("normals_example{}.ppm", example)))
                .runtime()?;
            println!("wrote {}", name);
        }
        Ok(())
    })
}

/// Runs `body`; on failure leaves a `.failed` marker holding the error.
fn with_marker(run: &Run, body: impl FnOnce() -> Outcome<()>) -> Outcome<()> {
    let result = body();
    if let Err(Failure::Runtime(e) | Failure::Invalid(e)) = &result {
        let _ = fs::write(run.path(FAILED_MARKER), format!("{:#}\n", e));
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::GenBank(a) => gen_bank(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Viz(a) => viz_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}
