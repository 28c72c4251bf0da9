use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpb_core::dpb::export_masks;
use dpb_core::masks::GroupingScheme;
use dpb_core::metrics::{
    cmc_and_map, read_embedding_set, write_embedding_set, write_eval_report, EvalOptions, Role,
};
use dpb_core::{BnMode, Graph, Scalar, Tensor};
use dpb_harness::eval::{extract_embeddings, EvalSettings};
use dpb_harness::{
    ablate, synth_generate, Dataset, LayoutParams, Model, ModelVariant, RunConfig, Split,
    SyntheticDatasetSpec,
};

#[derive(Parser)]
#[command(
    name = "dpb",
    about = "Part-aligned block lab: synthetic data, training, retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic retrieval dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or saved embedding files) under the
    /// single-query protocol.
    Eval(EvalArgs),
    /// Run the full gradient-verification suite.
    Gradcheck,
    /// Dump part confidence maps and attention rows as graymaps.
    ExportMasks(ExportArgs),
    /// Train and evaluate the six-variant ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    train_ids: usize,
    #[arg(long, default_value_t = 12)]
    test_ids: usize,
    #[arg(long, default_value_t = 8)]
    images_per_id: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `synth` or matching its layout).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// baseline | hp-1 | hp-2 | hp-5 | latent | hp-5+latent
    #[arg(long, default_value = "hp-5+latent")]
    variant: String,
    /// 1-based stage the blocks attach to.
    #[arg(long, default_value_t = 2)]
    stage: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Grouping scheme JSON overriding the variant's built-in table.
    #[arg(long)]
    scheme: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long, default_value = "f32")]
    precision: String,
    /// Append per-epoch JSON records to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    no_triplet: bool,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate saved embedding files instead of a checkpoint.
    #[arg(long, requires = "gallery_emb")]
    query_emb: Option<PathBuf>,
    #[arg(long)]
    gallery_emb: Option<PathBuf>,
    /// Write the embedding files next to the report.
    #[arg(long)]
    dump_embeddings: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    k_max: usize,
    #[arg(long)]
    no_camera_exclusion: bool,
    /// Must match the arguments the checkpoint was trained with.
    #[arg(long, default_value = "hp-5+latent")]
    variant: String,
    #[arg(long, default_value_t = 2)]
    stage: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sample index within the dataset.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 2)]
    stage: usize,
    /// Comma-separated attention row indices; default picks three spread
    /// over the map.
    #[arg(long)]
    rows: Option<String>,
    #[arg(long, default_value = "hp-5+latent")]
    variant: String,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    stage: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck => return run_gradcheck(),
        Command::ExportMasks(args) => run_export(args),
        Command::Ablate(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run_synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticDatasetSpec {
        train_identities: args.train_ids,
        test_identities: args.test_ids,
        images_per_identity: args.images_per_id,
        cameras: args.cameras,
        height: args.height,
        width: args.width,
        noise: args.noise,
        seed: args.seed,
        layout: LayoutParams::default(),
    };
    let rows = synth_generate(&spec, &args.out)?;
    println!(
        "wrote {} images under {} ({} train / {} query / {} gallery)",
        rows.len(),
        args.out.display(),
        rows.iter().filter(|r| r.split == Split::Train).count(),
        rows.iter().filter(|r| r.split == Split::Query).count(),
        rows.iter().filter(|r| r.split == Split::Gallery).count(),
    );
    Ok(())
}

fn parse_variant(text: &str) -> anyhow::Result<ModelVariant> {
    ModelVariant::parse(text)
        .ok_or_else(|| anyhow::anyhow!("unknown variant '{text}' (baseline, hp-1, hp-2, hp-5, latent, hp-5+latent)"))
}

fn build_run(
    config: Option<&PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> anyhow::Result<RunConfig> {
    let mut run = match config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig {
            epochs: 30,
            p: 8,
            k: 4,
            ..RunConfig::default()
        },
    };
    if let Some(seed) = seed {
        run.seed = seed;
    }
    if let Some(epochs) = epochs {
        run.epochs = epochs;
    }
    Ok(run)
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let variant = parse_variant(&args.variant)?;
    let dataset = Dataset::load(&args.data)?;
    let mut run = build_run(args.config.as_ref(), args.seed, args.epochs)?;
    if args.no_triplet {
        run.use_triplet = false;
    }
    if args.no_augment {
        run.augment = dpb_harness::augment::AugmentFlags::disabled();
    }
    run.backbone = variant.configure(
        &run.backbone,
        args.stage,
        args.blocks,
        run.backbone.dpb.latent_mask_mode,
    );
    run.backbone.num_identities = dataset.num_train_identities.max(1);
    let scheme = match &args.scheme {
        Some(path) => GroupingScheme::from_json_file(path)?,
        None => GroupingScheme::for_part_count(run.backbone.dpb.part_count)?,
    };

    match args.precision.as_str() {
        "f32" => train_and_save::<f32>(&run, &dataset, &scheme, &args),
        "f64" => train_and_save::<f64>(&run, &dataset, &scheme, &args),
        other => anyhow::bail!("unknown precision '{other}' (f32 or f64)"),
    }
}

fn train_and_save<S: Scalar>(
    run: &RunConfig,
    dataset: &Dataset,
    scheme: &GroupingScheme,
    args: &TrainArgs,
) -> anyhow::Result<()> {
    let model = Model::<S>::new(&run.backbone, run.seed)?;
    let outcome = dpb_harness::train::train_with_scheme(run, dataset, &model, scheme)?;
    let mut log_lines = Vec::new();
    for epoch_log in &outcome.epoch_logs {
        let line = serde_json::to_string(epoch_log)?;
        println!("{line}");
        log_lines.push(line);
    }
    if let Some(log_path) = &args.log {
        std::fs::write(log_path, log_lines.join("\n") + "\n")?;
    }
    model.save(&args.out)?;
    println!("checkpoint written to {}", args.out.display());
    if let Some(eval) = &outcome.final_eval {
        println!(
            "validation: R-1 {:.4}  R-5 {:.4}  mAP {:.4}",
            eval.recall_at(1),
            eval.recall_at(5.min(eval.cmc.len())),
            eval.map
        );
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let opts = EvalOptions {
        k_max: args.k_max,
        exclude_same_camera: !args.no_camera_exclusion,
    };
    let result = if let (Some(query_path), Some(gallery_path)) = (&args.query_emb, &args.gallery_emb)
    {
        let queries = read_embedding_set(query_path)?;
        let gallery = read_embedding_set(gallery_path)?;
        cmc_and_map(&queries, &gallery, &opts)?
    } else {
        let checkpoint = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--checkpoint (or --query-emb/--gallery-emb) required"))?;
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--data required with --checkpoint"))?;
        let header = dpb_core::checkpoint::read_header(checkpoint)?;
        match header.precision.as_str() {
            "f32" => eval_checkpoint::<f32>(checkpoint, data, &args, &opts)?,
            "f64" => eval_checkpoint::<f64>(checkpoint, data, &args, &opts)?,
            other => anyhow::bail!("checkpoint has unknown precision '{other}'"),
        }
    };
    println!(
        "R-1 {:.4}  R-5 {:.4}  R-10 {:.4}  mAP {:.4}",
        result.recall_at(1),
        result.recall_at(5.min(result.cmc.len())),
        result.recall_at(10.min(result.cmc.len())),
        result.map
    );
    if let Some(report) = &args.report {
        write_eval_report(report, &result)?;
        println!("report written to {}", report.display());
    }
    Ok(())
}

fn eval_checkpoint<S: Scalar>(
    checkpoint: &PathBuf,
    data: &PathBuf,
    args: &EvalArgs,
    opts: &EvalOptions,
) -> anyhow::Result<dpb_core::metrics::EvalResult> {
    let variant = parse_variant(&args.variant)?;
    let dataset = Dataset::load(data)?;
    let mut backbone = dpb_harness::BackboneConfig::default();
    backbone = variant.configure(&backbone, args.stage, args.blocks, backbone.dpb.latent_mask_mode);
    backbone.num_identities = dataset.num_train_identities.max(1);
    let model = Model::<S>::new(&backbone, args.seed.unwrap_or(0))?;
    model.load(checkpoint)?;
    let scheme = GroupingScheme::for_part_count(backbone.dpb.part_count)?;
    let grouped = dataset.grouped_labels(&scheme)?;
    let settings = EvalSettings {
        k_max: opts.k_max,
        exclude_same_camera: opts.exclude_same_camera,
        batch_size: 32,
    };
    let queries = extract_embeddings(
        &model,
        &dataset,
        &grouped,
        &dataset.indices_of(Split::Query),
        Role::Query,
        &settings,
    )?;
    let gallery = extract_embeddings(
        &model,
        &dataset,
        &grouped,
        &dataset.indices_of(Split::Gallery),
        Role::Gallery,
        &settings,
    )?;
    if let Some(dir) = &args.dump_embeddings {
        std::fs::create_dir_all(dir)?;
        write_embedding_set(&dir.join("query.emb"), &queries)?;
        write_embedding_set(&dir.join("gallery.emb"), &gallery)?;
        println!("embeddings written to {}", dir.display());
    }
    let opts = EvalOptions {
        k_max: opts.k_max.min(gallery.len().max(1)),
        exclude_same_camera: opts.exclude_same_camera,
    };
    Ok(cmc_and_map(&queries, &gallery, &opts)?)
}

fn run_gradcheck() -> ExitCode {
    let entries = match dpb_harness::gradsuite::run_gradient_suite() {
        Ok(entries) => entries,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    let mut all_passed = true;
    let mut overall: f64 = 0.0;
    for entry in &entries {
        let status = if entry.passed() { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {:<24} max relative error {:.3e} (threshold {:.0e})",
            entry.name, entry.max_error, entry.threshold
        );
        all_passed &= entry.passed();
        overall = overall.max(entry.max_error);
    }
    println!("overall max relative error: {overall:.3e}");
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run_export(args: ExportArgs) -> anyhow::Result<()> {
    let variant = parse_variant(&args.variant)?;
    if variant == ModelVariant::Baseline {
        anyhow::bail!("the baseline has no block to visualize");
    }
    let dataset = Dataset::load(&args.data)?;
    if args.sample >= dataset.samples.len() {
        anyhow::bail!(
            "sample {} out of range ({} samples)",
            args.sample,
            dataset.samples.len()
        );
    }
    let mut backbone = dpb_harness::BackboneConfig::default();
    backbone = variant.configure(&backbone, args.stage, args.blocks, backbone.dpb.latent_mask_mode);
    backbone.num_identities = dataset.num_train_identities.max(1);
    let model = Model::<f32>::new(&backbone, args.seed.unwrap_or(0))?;
    if let Some(checkpoint) = &args.checkpoint {
        model.load(checkpoint)?;
    }
    let scheme = GroupingScheme::for_part_count(backbone.dpb.part_count)?;
    let grouped = dataset.grouped_labels(&scheme)?;

    let sample = &dataset.samples[args.sample];
    let data: Vec<f32> = sample.image.data.clone();
    let images = Tensor::from_vec(data, &[1, 3, sample.image.height, sample.image.width])?;
    let mut graph = Graph::inference();
    let features = model.features_entering_stage(
        &mut graph,
        &images,
        std::slice::from_ref(&grouped[args.sample]),
        args.stage,
        BnMode::Eval,
    )?;
    let map = graph.batch_index(&features, 0)?;
    let (h, w) = (map.dims()[1], map.dims()[2]);
    let labels = dpb_core::masks::resize_nearest(&grouped[args.sample], h, w)?;
    let rows: Vec<usize> = match &args.rows {
        Some(text) => text
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow::anyhow!("bad --rows list '{text}'"))?,
        None => {
            let n = h * w;
            vec![0, n / 2, n - 1]
        }
    };
    let (cfg, params) = model
        .dpb_at(args.stage, 0)
        .ok_or_else(|| anyhow::anyhow!("no block at stage {}", args.stage))?;
    export_masks(&map, &labels, cfg, params, &rows, &args.out)?;
    println!(
        "wrote {} part maps and {} attention rows ({}x{}) to {}",
        labels.part_count(),
        rows.len(),
        w,
        h,
        args.out.display()
    );
    Ok(())
}

fn run_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let run = build_run(args.config.as_ref(), args.seed, args.epochs)?;
    println!(
        "ablation at stage {} ({} block(s), seed {}, {} epochs)",
        args.stage, args.blocks, run.seed, run.epochs
    );
    println!("{:<14} {:>8} {:>8} {:>8}", "variant", "R-1", "R-5", "mAP");
    let results = ablate::<f32>(&dataset, args.stage, args.blocks, &run)?;
    for trial in &results {
        let eval = trial
            .outcome
            .final_eval
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("dataset has no query/gallery split"))?;
        println!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4}",
            trial.variant.label(),
            eval.recall_at(1),
            eval.recall_at(5.min(eval.cmc.len())),
            eval.map
        );
    }
    Ok(())
}
