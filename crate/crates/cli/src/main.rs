use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dff_cli::config::PipelineConfig;
use dff_cli::error::{CliError, Stage, StageContext};
use dff_cli::pipeline::{self, CORLOC_FILE, MANIFEST_FILE, MAPS_FILE, MASK_INDEX_FILE, METRICS_FILE};
use dff_core::adapter::BatchManifest;
use dff_core::formats::load_predicted_boxes;
use dff_core::InitMethod;

#[derive(Parser)]
#[command(name = "dff", version, about = "Deep feature factorization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the model over images and dump activations.
    Extract(Overrides),
    /// Factorize the activations listed in a manifest.
    Factorize(Overrides),
    /// Upsample (and by default refine) factor maps to image size.
    Refine(Overrides),
    /// Threshold factor maps into masks and boxes.
    Segment(Overrides),
    /// Score masks against part annotations.
    EvalParts(Overrides),
    /// Score one factor's boxes against ground-truth boxes.
    EvalCorloc(Overrides),
    /// Write grayscale factor maps and color overlays.
    Render(Overrides),
    /// Average best-match IoU over layers, ranks and seeds.
    Sweep(Overrides),
    /// Every stage, end to end.
    Run(Overrides),
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    SeededUniform,
    Nndsvd,
}

/// Flags mirror the config file fields and take precedence over it.
#[derive(Args, Default)]
struct Overrides {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, conflicts_with = "native_size")]
    input_size: Option<u32>,
    /// Feed images at their own size instead of resizing.
    #[arg(long)]
    native_size: bool,
    /// Image files or directories.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Activation manifest (input of factorize; replaces extraction in run).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long)]
    refine_iterations: Option<usize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    pairwise_weight: Option<f64>,
    #[arg(long)]
    background_level: Option<f32>,
    /// Skip the mean-field refinement; maps are only upsampled.
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    cov_threshold: Option<f64>,
    /// Part index JSON.
    #[arg(long)]
    parts: Option<PathBuf>,
    /// Ground-truth boxes JSON.
    #[arg(long)]
    gt_boxes: Option<PathBuf>,
    #[arg(long)]
    class_name: Option<String>,
    #[arg(long)]
    corloc_factor: Option<usize>,
    /// Manual factor-to-part map JSON.
    #[arg(long)]
    factor_part_map: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Factorization container (input of refine).
    #[arg(long)]
    factorization: Option<PathBuf>,
    /// Maps manifest (input of render and segment).
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Mask index (input of eval-parts).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Predicted boxes JSON (input of eval-corloc).
    #[arg(long)]
    boxes: Option<PathBuf>,
}

impl Overrides {
    fn config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v.into(); })*
            };
        }
        set!(
            model => model,
            layer => layer,
            input_size => input_size,
            manifest => manifest,
            out => output_dir,
            k => nmf.k,
            seed => nmf.seed,
            max_iters => nmf.max_iters,
            rel_tol => nmf.rel_tol,
            refine_iterations => refine.iterations,
            radius => refine.radius,
            epsilon => refine.epsilon,
            pairwise_weight => refine.pairwise_weight,
            background_level => refine.background_level,
            percentile => percentile,
            cov_threshold => cov_threshold,
            parts => parts,
            gt_boxes => gt_boxes,
            class_name => class_name,
            corloc_factor => corloc_factor,
            factor_part_map => factor_part_map,
            seeds => sweep_seeds,
        );
        if self.native_size {
            cfg.input_size = None;
        }
        if let Some(init) = self.init {
            cfg.nmf.init = match init {
                InitArg::SeededUniform => InitMethod::SeededUniform,
                InitArg::Nndsvd => InitMethod::Nndsvd,
            };
        }
        if self.no_refine {
            cfg.use_refine = false;
        }
        if !self.images.is_empty() {
            cfg.images = self.images.clone();
        }
        if !self.ks.is_empty() {
            cfg.sweep_ks = self.ks.clone();
        }
        if !self.layers.is_empty() {
            cfg.sweep_layers = self.layers.clone();
        }
        cfg.validate()?;
        cfg.check_paths_exist()?;
        Ok(cfg)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, stage: Stage, flag: &str) -> Result<&'a PathBuf, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::config(stage, format!("--{flag} is required")))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Extract(o) => {
            let cfg = o.config()?;
            let out = cfg.output_dir()?;
            pipeline::extract_stage(&cfg, None, out)?;
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::Factorize(o) => {
            let cfg = o.config()?;
            let manifest = BatchManifest::load(required(&cfg.manifest, Stage::Factorize, "manifest")?)
                .stage(Stage::Factorize)?;
            let (f, _) = pipeline::factorize_stage(&manifest, &cfg.nmf, cfg.output_dir()?)?;
            println!("iterations {} loss {:.6e}", f.iterations_run, f.final_loss());
        }
        Command::Refine(o) => {
            let cfg = o.config()?;
            let manifest = BatchManifest::load(required(&cfg.manifest, Stage::Refine, "manifest")?)
                .stage(Stage::Refine)?;
            let factorization = required(&o.factorization, Stage::Refine, "factorization")?;
            let out = cfg.output_dir()?;
            pipeline::refine_stage(&manifest, factorization, cfg.use_refine.then_some(&cfg.refine), out)?;
            println!("{}", out.join(MAPS_FILE).display());
        }
        Command::Render(o) => {
            let cfg = o.config()?;
            let (manifest, stacks) = pipeline::load_maps(required(&o.maps, Stage::Render, "maps")?, Stage::Render)?;
            let images = pipeline::load_images(&manifest, Stage::Render)?;
            pipeline::render_stage(&stacks, &images, cfg.output_dir()?)?;
        }
        Command::Segment(o) => {
            let cfg = o.config()?;
            let (_, stacks) = pipeline::load_maps(required(&o.maps, Stage::Segment, "maps")?, Stage::Segment)?;
            let out = cfg.output_dir()?;
            pipeline::segment_stage(&stacks, cfg.percentile, out)?;
            println!("{}", out.join(MASK_INDEX_FILE).display());
        }
        Command::EvalParts(o) => {
            let cfg = o.config()?;
            let (index, sets) = pipeline::load_masks(required(&o.masks, Stage::EvalParts, "masks")?, Stage::EvalParts)?;
            let scores = pipeline::eval_parts_stage(&cfg, &index, &sets, &cfg.output_dir()?.join(METRICS_FILE))?;
            if let Some(v) = scores.average_best_iou {
                println!("average_best_iou {v:.6}");
            }
        }
        Command::EvalCorloc(o) => {
            let cfg = o.config()?;
            let boxes_path = required(&o.boxes, Stage::EvalCorloc, "boxes")?;
            let boxes = load_predicted_boxes(boxes_path).stage(Stage::EvalCorloc)?;
            // Scored over the images that have ground truth.
            let gts = dff_core::formats::load_boxes(required(&cfg.gt_boxes, Stage::EvalCorloc, "gt-boxes")?)
                .stage(Stage::EvalCorloc)?;
            let ids: Vec<String> = gts.keys().cloned().collect();
            let score = pipeline::eval_corloc_stage(&cfg, &boxes, &ids, &cfg.output_dir()?.join(CORLOC_FILE))?;
            println!("corloc {score:.4}");
        }
        Command::Sweep(o) => {
            let cfg = o.config()?;
            for row in dff_cli::run_sweep(&cfg)? {
                println!("{} k={} mean {:.6} std {:.6}", row.layer, row.k, row.mean(), row.std());
            }
        }
        Command::Run(o) => {
            let cfg = o.config()?;
            let summary = dff_cli::run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = dff_cli::init_threads_from_env().and_then(|_| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
