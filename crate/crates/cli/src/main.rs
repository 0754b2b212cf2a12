//! `camseg`: data generation, two-stage training, evaluation and inference.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camseg::checkpoint::Checkpoint;
use camseg::data::io::{load_mask, load_rgb, save_heatmap, save_mask, save_rgb, write_text};
use camseg::data::{episodes_to_text, DatasetIndex, Instance, RenderedEpisode, StageSplit};
use camseg::metrics::{eval_episodes, evaluate, EvalReport, EVAL_SUPPORTS};
use camseg::train::{self, classifier_accuracy, EpochLog, StageOutcome};
use camseg::{Config, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "camseg", version, about = "Few-shot segmentation from class-activation priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fold whose five classes are held out (0-3).
    #[arg(long)]
    fold: Option<usize>,
    /// Supports per episode.
    #[arg(long)]
    k: Option<usize>,
    /// Master seed (for `eval`: the evaluation-set seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the instance manifest, the fold split, the evaluation episodes
    /// and a few preview images.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Preview instances rendered per class.
        #[arg(long, default_value_t = 2)]
        previews: usize,
    },
    /// Stage 1: classifier pretraining on the known classes.
    TrainCls {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: episodic training from a stage-1 checkpoint.
    TrainEpisodic {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint [default: OUT/stage1.ckpt].
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// FB-IoU over the fold's fixed evaluation episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score [default: OUT/stage2.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Segment a query image from support images and masks.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Support image (PNG); repeat for k > 1.
        #[arg(long = "support", required = true)]
        supports: Vec<PathBuf>,
        /// Support mask (PNG, 0/255), one per support image.
        #[arg(long = "support-mask", required = true)]
        support_masks: Vec<PathBuf>,
        #[arg(long)]
        query: PathBuf,
        /// Predicted mask (PNG).
        #[arg(long)]
        out: PathBuf,
        /// Optional normalised prior heatmap (PNG).
        #[arg(long)]
        prior_out: Option<PathBuf>,
    },
    /// Export the query prior and per-class activation maps of one
    /// evaluation episode as grayscale images.
    CamDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation episode id.
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

fn load_config(path: Option<&Path>) -> camseg::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Config with command-line overrides applied. `eval` reads `--seed` as the
/// evaluation seed and `--k` as its own shot count, leaving the training
/// configuration intact.
fn resolve(common: &Common, for_eval: bool) -> camseg::Result<Config> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(f) = common.fold {
        cfg.train.fold = f;
    }
    match (common.seed, for_eval) {
        (Some(s), true) => cfg.eval.seed = s,
        (Some(s), false) => cfg.data.master_seed = s,
        (None, _) => {}
    }
    if let (Some(k), false) = (common.k, for_eval) {
        cfg.train.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn index_for(cfg: &Config) -> DatasetIndex {
    DatasetIndex::build(cfg.data.master_seed, cfg.data.image_size, cfg.data.train_pool, cfg.data.test_pool)
}

fn create_dir(dir: &Path) -> camseg::Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn log_epoch(log: &EpochLog) {
    log::info!("{} epoch {} lr {:e} loss {:.5}", log.stage.as_str(), log.epoch, log.lr, log.mean_loss);
}

fn history_text(outcome: &StageOutcome) -> String {
    let mut s = String::from("# epoch lr mean_loss\n");
    for h in &outcome.history {
        s.push_str(&format!("{} {:?} {:?}\n", h.epoch, h.lr, h.mean_loss));
    }
    s
}

fn gen_data(common: &Common, previews: usize) -> camseg::Result<()> {
    let cfg = resolve(common, false)?;
    let index = index_for(&cfg);
    let split = StageSplit::for_fold(cfg.train.fold)?;
    create_dir(&common.out)?;
    write_text(&common.out.join("config.txt"), &cfg.to_text())?;
    write_text(&common.out.join("manifest.txt"), &index.manifest())?;
    let list = |c: &[usize]| c.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    write_text(
        &common.out.join("split.txt"),
        &format!(
            "fold = {}\nclassifier = {}\nepisodic = {}\ntest = {}\n",
            split.fold_index,
            list(&split.classifier_classes),
            list(&split.episodic_classes),
            list(&split.test_classes)
        ),
    )?;
    let eval = eval_episodes(&index, &split, cfg.eval.pairs, cfg.eval.seed)?;
    write_text(&common.out.join(format!("eval_fold{}.txt", cfg.train.fold)), &episodes_to_text(&eval))?;
    let preview_dir = common.out.join("preview");
    create_dir(&preview_dir)?;
    for class_id in 0..camseg::data::NUM_CLASSES {
        for &seed in index.pool(class_id, camseg::data::Pool::Train)?.iter().take(previews) {
            let inst = index.render(class_id, seed)?;
            save_instance(&preview_dir, &format!("class{class_id:02}_{seed}"), &inst)?;
        }
    }
    log::info!("wrote dataset description for fold {} to {}", cfg.train.fold, common.out.display());
    Ok(())
}

fn save_instance(dir: &Path, stem: &str, inst: &Instance) -> camseg::Result<()> {
    save_rgb(&dir.join(format!("{stem}.png")), &inst.pixels, inst.size, inst.size)?;
    save_mask(&dir.join(format!("{stem}_mask.png")), &inst.mask)
}

fn train_cls(common: &Common) -> camseg::Result<()> {
    let cfg = resolve(common, false)?;
    let index = index_for(&cfg);
    let split = StageSplit::for_fold(cfg.train.fold)?;
    create_dir(&common.out)?;
    let mut model = train::init_model(&cfg)?;
    let outcome = train::train_classifier(&cfg, &index, &mut model, &mut log_epoch)?;
    let acc = classifier_accuracy(&model, &index, &split, cfg.data.test_pool)?;
    log::info!("held-out known-class accuracy {acc:.4}");
    let opt = &outcome.optimizer;
    Checkpoint::capture(&model, Some((&opt.ids, &opt.state)), cfg.train.cls_epochs as u64, cfg.hash())?
        .save(&common.out.join("stage1.ckpt"))?;
    write_text(&common.out.join("stage1_log.txt"), &history_text(&outcome))?;
    write_text(&common.out.join("stage1_audit.txt"), &outcome.audit.to_text())?;
    write_text(&common.out.join("stage1_accuracy.txt"), &format!("accuracy = {acc:?}\n"))?;
    println!("stage 1 done: held-out accuracy {acc:.4}");
    Ok(())
}

fn train_episodic(common: &Common, init: Option<&Path>) -> camseg::Result<()> {
    let cfg = resolve(common, false)?;
    let index = index_for(&cfg);
    let split = StageSplit::for_fold(cfg.train.fold)?;
    let init = init.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("stage1.ckpt"));
    let mut model = train::restore_model(&cfg, &Checkpoint::load(&init)?)?;
    create_dir(&common.out)?;
    let outcome = train::train_episodic(&cfg, &index, &mut model, &mut log_epoch)?;
    let leaks = outcome.audit.leaks(&split).len();
    if leaks > 0 {
        return Err(Error::Validation(format!("{leaks} training instances came from held-out data")));
    }
    let opt = &outcome.optimizer;
    Checkpoint::capture(&model, Some((&opt.ids, &opt.state)), cfg.train.episodic_epochs as u64, cfg.hash())?
        .save(&common.out.join("stage2.ckpt"))?;
    write_text(&common.out.join("stage2_log.txt"), &history_text(&outcome))?;
    write_text(&common.out.join("stage2_audit.txt"), &outcome.audit.to_text())?;
    println!("stage 2 done: {} steps, no held-out instances touched", outcome.audit.entries.len());
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>) -> camseg::Result<()> {
    let cfg = resolve(common, true)?;
    let k = common.k.unwrap_or(1);
    if k == 0 || k > EVAL_SUPPORTS {
        return Err(Error::Range { what: "--k", value: k, allowed: format!("1..={EVAL_SUPPORTS}") });
    }
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("stage2.ckpt"));
    let model = train::restore_model(&cfg, &Checkpoint::load(&path)?)?;
    let index = index_for(&cfg);
    let split = StageSplit::for_fold(cfg.train.fold)?;
    let episodes = eval_episodes(&index, &split, cfg.eval.pairs, cfg.eval.seed)?;
    let fold = evaluate(&model, &index, &episodes, cfg.train.fold, k)?;
    let report = EvalReport { k, folds: vec![fold] };
    create_dir(&common.out)?;
    let stem = format!("eval_fold{}_k{k}", cfg.train.fold);
    write_text(&common.out.join(format!("{stem}.txt")), &report.to_text())?;
    write_text(&common.out.join(format!("{stem}.kv")), &report.to_key_values())?;
    println!("fold {} {k}-shot FB-IoU {:.4}", cfg.train.fold, report.mean_fb_iou());
    Ok(())
}

fn load_instance(image: &Path, mask: Option<&Path>, class_id: usize) -> camseg::Result<Instance> {
    let (pixels, h, w) = load_rgb(image)?;
    if h != w {
        return Err(Error::Image { path: image.to_path_buf(), detail: format!("expected a square image, got {h}×{w}") });
    }
    let mask = match mask {
        Some(p) => {
            let m = load_mask(p)?;
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Image {
                    path: p.to_path_buf(),
                    detail: format!("mask is {}×{} but its image is {h}×{w}", m.height(), m.width()),
                });
            }
            m
        }
        None => camseg::data::Mask::filled(h, w, false),
    };
    Ok(Instance { class_id, seed: 0, size: h, pixels, mask })
}

fn infer(
    config: Option<&Path>,
    checkpoint: &Path,
    supports: &[PathBuf],
    masks: &[PathBuf],
    query: &Path,
    out: &Path,
    prior_out: Option<&Path>,
) -> camseg::Result<()> {
    if supports.len() != masks.len() {
        return Err(Error::Validation(format!("{} support images but {} support masks", supports.len(), masks.len())));
    }
    let cfg = load_config(config)?;
    let model = train::restore_model(&cfg, &Checkpoint::load(checkpoint)?)?;
    let episode = RenderedEpisode {
        supports: supports.iter().zip(masks).map(|(i, m)| load_instance(i, Some(m), 0)).collect::<camseg::Result<_>>()?,
        query: load_instance(query, None, 0)?,
    };
    if episode.supports.iter().any(|s| s.size != episode.query.size) {
        return Err(Error::Validation("support and query images differ in size".into()));
    }
    let pred = model.predict(&episode)?;
    save_mask(out, &pred.mask)?;
    if let Some(p) = prior_out {
        save_heatmap(p, &pred.prior, pred.feature_size.0, pred.feature_size.1)?;
    }
    println!("{}: {} foreground pixels", out.display(), pred.mask.count());
    Ok(())
}

/// Nearest-neighbour upscaling of an h×w map by `factor`.
fn upscale(values: &[f32], h: usize, w: usize, factor: usize) -> Vec<f32> {
    let (oh, ow) = (h * factor, w * factor);
    (0..oh * ow).map(|i| values[(i / ow / factor) * w + (i % ow) / factor]).collect()
}

fn cam_dump(common: &Common, checkpoint: Option<&Path>, episode_id: usize) -> camseg::Result<()> {
    let cfg = resolve(common, true)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("stage2.ckpt"));
    let model = train::restore_model(&cfg, &Checkpoint::load(&path)?)?;
    let index = index_for(&cfg);
    let split = StageSplit::for_fold(cfg.train.fold)?;
    let episodes = eval_episodes(&index, &split, cfg.eval.pairs, cfg.eval.seed)?;
    let ep = episodes.get(episode_id).ok_or_else(|| Error::Range {
        what: "episode id",
        value: episode_id,
        allowed: format!("0..{}", episodes.len()),
    })?;
    let k = common.k.unwrap_or(1);
    let rendered = ep.with_shots(k)?.render(&index)?;
    let pred = model.predict(&rendered)?;
    let dir = common.out.join(format!("cam_ep{episode_id:04}"));
    create_dir(&dir)?;
    let (h, w) = pred.feature_size;
    let factor = rendered.query.size / h;
    save_instance(&dir, "query", &rendered.query)?;
    for (i, s) in rendered.supports.iter().enumerate() {
        save_instance(&dir, &format!("support{i}"), s)?;
    }
    save_mask(&dir.join("prediction.png"), &pred.mask)?;
    save_heatmap(&dir.join("prior.png"), &upscale(&pred.prior, h, w, factor), h * factor, w * factor)?;
    for (c, &class_id) in split.classifier_classes.iter().enumerate() {
        let channel = &pred.activations[c * h * w..(c + 1) * h * w];
        save_heatmap(&dir.join(format!("class{class_id:02}.png")), &upscale(channel, h, w, factor), h * factor, w * factor)?;
    }
    let weights: Vec<String> = split
        .classifier_classes
        .iter()
        .zip(&pred.weights)
        .map(|(c, s)| format!("class{c:02} = {s:?}"))
        .collect();
    write_text(
        &dir.join("weights.txt"),
        &format!("episode = {episode_id}\nclass_id = {}\nk = {k}\n{}\n", ep.class_id, weights.join("\n")),
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> camseg::Result<()> {
    match cli.command {
        Command::GenData { common, previews } => gen_data(&common, previews),
        Command::TrainCls { common } => train_cls(&common),
        Command::TrainEpisodic { common, init } => train_episodic(&common, init.as_deref()),
        Command::Eval { common, checkpoint } => eval(&common, checkpoint.as_deref()),
        Command::Infer { config, checkpoint, supports, support_masks, query, out, prior_out } => infer(
            config.as_deref(),
            &checkpoint,
            &supports,
            &support_masks,
            &query,
            &out,
            prior_out.as_deref(),
        ),
        Command::CamDump { common, checkpoint, episode } => cam_dump(&common, checkpoint.as_deref(), episode),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
