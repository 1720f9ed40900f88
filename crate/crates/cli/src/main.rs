use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use matchmap::alignment::{compute_matchmap, SimilarityKind};
use matchmap::audio::{logmel, read_wav};
use matchmap::checkpoint::{json_hash, Checkpoint};
use matchmap::concepts::{concept_report, Taxonomy, LEARNED_THRESHOLD, TOP_K};
use matchmap::data::{read_manifest, resolve, write_manifest, Corpus, LABELS_FILE};
use matchmap::discovery::{discover, extract_components, DiscoveryConfig};
use matchmap::eval::{
    encode_corpus, eval_input, eval_labels, localization_eval, mean_object_area, random_heatmap_baseline,
    recall_at_k, similarity_matrix, WordObjectPairSet, DEFAULT_TAU, INPUT_FRAME_RATE,
};
use matchmap::image::{read_ppm, write_pgm, ImageStats};
use matchmap::model::{Model, ModelConfig};
use matchmap::post::top_p_mass;
use matchmap::synth::{gen_corpus, SynthConfig, PAIRS_FILE, TAXONOMY_FILE, VAL_MANIFEST};
use matchmap::train::{train, Control, TrainConfig};
use matchmap::{mmtf, Exec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Settings for every command, read from `--config` and then overridden by flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthConfig,
    discovery: DiscoveryConfig,
    /// Heatmap threshold for localization.
    tau: f64,
    top_p: f64,
    concept_k: usize,
    concept_threshold: f64,
    baseline_trials: usize,
    /// Validation manifest used for per-epoch recall during training.
    val_manifest: Option<PathBuf>,
    pairs: Option<PathBuf>,
    taxonomy: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            discovery: DiscoveryConfig::default(),
            tau: DEFAULT_TAU,
            top_p: 0.15,
            concept_k: TOP_K,
            concept_threshold: LEARNED_THRESHOLD,
            baseline_trials: 1000,
            val_manifest: None,
            pairs: None,
            taxonomy: None,
        }
    }
}

#[derive(Parser)]
#[command(name = "matchmap", version, about = "Audio-visual matchmap training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    sim: Option<SimilarityKind>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Localization heatmap threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    top_p: Option<f64>,
    /// Output file (reports) or directory (synth, featurize, viz).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on one worker.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic shapes-and-tones corpus.
    Synth(Common),
    /// Precompute log-mel spectrograms and image statistics.
    Featurize(Common),
    Train(Common),
    /// Cross-modal retrieval recall.
    Eval(Common),
    /// Speech-prompted localization IoU.
    Localize(Common),
    Discover(Common),
    Concepts(Common),
    /// Per-sample PGM mask sequences of the top-p matchmap mass.
    Viz(VizArgs),
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    /// Only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

impl Common {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| matchmap::Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| BadConfig(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.sim {
            rc.train.sim = s;
        }
        if let Some(s) = self.seed {
            rc.train.seed = s;
            rc.synth.seed = s;
        }
        if let Some(e) = self.epochs {
            rc.train.epochs = e;
        }
        if let Some(b) = self.batch {
            rc.train.batch_size = b;
        }
        if let Some(t) = self.threshold {
            rc.tau = t;
        }
        if let Some(p) = self.top_p {
            rc.top_p = p;
        }
        if !(rc.tau >= 0.0 && rc.tau <= 1.0) {
            return Err(BadConfig(format!("threshold must lie in [0, 1], got {}", rc.tau)).into());
        }
        if !(rc.top_p > 0.0 && rc.top_p <= 1.0) {
            return Err(BadConfig(format!("top-p must lie in (0, 1], got {}", rc.top_p)).into());
        }
        rc.model.validate().map_err(|e| BadConfig(e.to_string()))?;
        rc.train.validate().map_err(|e| BadConfig(e.to_string()))?;
        Ok(rc)
    }

    fn manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().context(Missing("--manifest"))
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint.as_deref().context(Missing("--checkpoint"))
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    BadConfig(String),
    #[error("{0} is required")]
    Missing(&'static str),
}

use CliError::{BadConfig, Missing};

/// Wraps a command result with the provenance every report carries.
fn report(command: &str, rc: &RunConfig, result: serde_json::Value) -> Result<serde_json::Value> {
    Ok(json!({
        "command": command,
        "run_config_hash": json_hash(rc)?,
        "seed": rc.train.seed,
        "run_config": rc,
        "result": result,
    }))
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).map_err(|e| matchmap::Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_checkpoint(common: &Common, rc: &mut RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(common.checkpoint()?)?;
    rc.model = ck.model.config.clone();
    Ok(ck)
}

fn sidecar(manifest: &Path, configured: &Option<PathBuf>, name: &str) -> PathBuf {
    configured
        .clone()
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join(name))
}

fn cmd_synth(c: &Common) -> Result<()> {
    let rc = c.run_config()?;
    let out = c.out.as_deref().context(Missing("--out"))?;
    let paths = gen_corpus(&rc.synth, out, c.exec())?;
    eprintln!("wrote {} and {}", paths.train.display(), paths.val.display());
    Ok(())
}

fn cmd_featurize(c: &Common) -> Result<()> {
    c.run_config()?;
    let manifest = c.manifest()?;
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = c.out.clone().unwrap_or_else(|| dir.clone());
    let spec_dir = out.join("spectrograms");
    fs::create_dir_all(&spec_dir).map_err(|e| matchmap::Error::Io {
        path: spec_dir.clone(),
        source: e,
    })?;
    let same_dir = fs::canonicalize(&out).ok() == fs::canonicalize(&dir).ok();
    let entries = read_manifest(manifest)?;
    let exec = c.exec();
    let rewritten = exec.try_map_range(entries.len(), |i| -> matchmap::Result<_> {
        let mut e = entries[i].clone();
        let spec = logmel(&read_wav(resolve(&dir, &e.audio))?)?;
        let rel = PathBuf::from("spectrograms").join(format!("{}.mmtf", e.id));
        mmtf::tensor_write(out.join(&rel), &spec.frames)?;
        if !same_dir {
            e.image = fs::canonicalize(resolve(&dir, &e.image))?;
            e.audio = fs::canonicalize(resolve(&dir, &e.audio))?;
            e.mask = fs::canonicalize(resolve(&dir, &e.mask))?;
        }
        e.spectrogram = Some(rel);
        Ok(e)
    })?;
    let images = exec.try_map_range(entries.len(), |i| read_ppm(resolve(&dir, &entries[i].image)))?;
    let stats = ImageStats::from_images(images.iter())?;
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    let feat = out.join(format!("{stem}.feat.jsonl"));
    write_manifest(&feat, &rewritten)?;
    let stats_path = out.join("image_stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)?;
    if !same_dir {
        for name in [LABELS_FILE, TAXONOMY_FILE, PAIRS_FILE] {
            let src = dir.join(name);
            if src.exists() {
                fs::copy(&src, out.join(name))?;
            }
        }
    }
    eprintln!("wrote {} ({} captions)", feat.display(), rewritten.len());
    Ok(())
}

fn default_val_manifest(train_manifest: &Path) -> Option<PathBuf> {
    let dir = train_manifest.parent().unwrap_or(Path::new("."));
    ["val.feat.jsonl", VAL_MANIFEST]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists() && p != train_manifest)
}

fn cmd_train(c: &Common) -> Result<()> {
    let rc = c.run_config()?;
    let exec = c.exec();
    let manifest = c.manifest()?;
    let ck_path = c.checkpoint()?;
    let corpus = Corpus::load(manifest, exec)?;
    let val_path = rc.val_manifest.clone().or_else(|| default_val_manifest(manifest));
    let val = match &val_path {
        Some(p) => Some(Corpus::load(p, exec)?),
        None => None,
    };
    let stats = ImageStats::from_images(corpus.samples.iter().map(|s| &s.image))?;
    let model = Model::<f32>::init(rc.model.clone(), rc.train.seed)?;
    let mut ck = Checkpoint::new(model, stats, rc.train.seed)?;
    ck.run = serde_json::to_value(&rc)?;
    let mut history = Vec::new();
    let summaries = train(&mut ck, &corpus.samples, &rc.train, exec, |s, ck| {
        let mut line = json!({ "epoch": s.epoch, "loss": s.mean_loss, "learning_rate": s.learning_rate });
        if let Some(v) = &val {
            let enc = encode_corpus(&ck.model, &ck.image_stats, &v.samples, exec)?;
            let sim = similarity_matrix(&enc, rc.train.sim, exec)?;
            for k in [1, 5, 10] {
                if k <= v.len() {
                    let r = recall_at_k(&sim, k)?;
                    line[format!("r{k}_caption_to_image")] = json!(r.caption_to_image);
                    line[format!("r{k}_image_to_caption")] = json!(r.image_to_caption);
                }
            }
        }
        log::info!("{line}");
        history.push(line);
        ck.save(ck_path)?;
        Ok(Control::Continue)
    })?;
    ck.save(ck_path)?;
    let result = json!({
        "checkpoint": ck_path,
        "epochs": summaries.len(),
        "history": history,
    });
    emit(c.out.as_deref(), &report("train", &rc, result)?)
}

fn cmd_eval(c: &Common) -> Result<()> {
    let mut rc = c.run_config()?;
    let exec = c.exec();
    let ck = load_checkpoint(c, &mut rc)?;
    let corpus = Corpus::load(c.manifest()?, exec)?;
    let enc = encode_corpus(&ck.model, &ck.image_stats, &corpus.samples, exec)?;
    let sim = similarity_matrix(&enc, rc.train.sim, exec)?;
    let mut recalls = serde_json::Map::new();
    for k in [1, 5, 10] {
        if k <= corpus.len() {
            let r = recall_at_k(&sim, k)?;
            recalls.insert(
                format!("r{k}"),
                json!({ "caption_to_image": r.caption_to_image, "image_to_caption": r.image_to_caption }),
            );
        }
    }
    let result = json!({
        "similarity": rc.train.sim,
        "pairs": corpus.len(),
        "chance_r1": 1.0 / corpus.len() as f64,
        "recall": recalls,
    });
    emit(c.out.as_deref(), &report("eval", &rc, result)?)
}

fn read_pairs(manifest: &Path, rc: &RunConfig) -> Result<WordObjectPairSet> {
    Ok(WordObjectPairSet::read(sidecar(manifest, &rc.pairs, PAIRS_FILE))?)
}

fn cmd_localize(c: &Common) -> Result<()> {
    let mut rc = c.run_config()?;
    let exec = c.exec();
    let ck = load_checkpoint(c, &mut rc)?;
    let manifest = c.manifest()?;
    let corpus = Corpus::load(manifest, exec)?;
    let pairs = read_pairs(manifest, &rc)?;
    let rep = localization_eval(&ck.model, &ck.image_stats, &corpus, &pairs, rc.tau, exec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed);
    let baseline = random_heatmap_baseline(&corpus, &pairs, rc.tau, rc.baseline_trials, &mut rng)?;
    let result = json!({
        "localization": rep,
        "random_baseline": baseline,
        "mean_object_area": mean_object_area(&corpus, &pairs),
    });
    emit(c.out.as_deref(), &report("localize", &rc, result)?)
}

fn cmd_discover(c: &Common) -> Result<()> {
    let mut rc = c.run_config()?;
    let exec = c.exec();
    let ck = load_checkpoint(c, &mut rc)?;
    let corpus = Corpus::load(c.manifest()?, exec)?;
    let comps = extract_components(&ck.model, &ck.image_stats, &corpus, &rc.discovery, exec)?;
    if comps.is_empty() {
        bail!(matchmap::Error::InvalidArgument("no matchmap components survived binarization".into()));
    }
    let rep = discover(&comps, &rc.discovery)?;
    emit(c.out.as_deref(), &report("discover", &rc, serde_json::to_value(rep)?)?)
}

fn cmd_concepts(c: &Common) -> Result<()> {
    let mut rc = c.run_config()?;
    let exec = c.exec();
    let ck = load_checkpoint(c, &mut rc)?;
    let manifest = c.manifest()?;
    let corpus = Corpus::load(manifest, exec)?;
    let taxonomy = Taxonomy::read(sidecar(manifest, &rc.taxonomy, TAXONOMY_FILE))?;
    let enc = encode_corpus(&ck.model, &ck.image_stats, &corpus.samples, exec)?;
    let labels = exec.try_map_range(corpus.len(), |i| eval_labels(&ck.model, &corpus.samples[i]))?;
    let alignments: Vec<_> = corpus.samples.iter().map(|s| s.alignments.clone()).collect();
    let rep = concept_report(
        &enc.images,
        &enc.audio,
        &alignments,
        &labels,
        &corpus.label_names,
        &taxonomy,
        rc.concept_k,
        rc.concept_threshold,
    )?;
    emit(c.out.as_deref(), &report("concepts", &rc, serde_json::to_value(rep)?)?)
}

fn cmd_viz(v: &VizArgs) -> Result<()> {
    let c = &v.common;
    let mut rc = c.run_config()?;
    let exec = c.exec();
    let ck = load_checkpoint(c, &mut rc)?;
    let out = c.out.as_deref().context(Missing("--out"))?;
    let mut corpus = Corpus::load(c.manifest()?, exec)?;
    if let Some(n) = v.limit {
        corpus = corpus.subset(n);
    }
    let model = &ck.model;
    let size = model.config.image.input_size;
    let fps = INPUT_FRAME_RATE / model.config.audio.downsample_factor() as f64;
    let p = rc.top_p;
    let frames = exec.try_map_range(corpus.len(), |i| -> matchmap::Result<usize> {
        let s = &corpus.samples[i];
        let img = model.encode_image(&eval_input(model, &ck.image_stats, s)?)?;
        let aud = model.encode_audio(&s.spec)?;
        let mm = compute_matchmap(&img, &aud)?;
        let vol = top_p_mass(&mm, p)?;
        let dir = out.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| matchmap::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let cols = mm.cols();
        for t in 0..mm.frames() {
            let cells = vol.frame(t);
            let mut px = vec![0u8; size * size];
            for y in 0..size {
                for x in 0..size {
                    let (r, cc) = (y * mm.rows() / size, x * cols / size);
                    if cells[r * cols + cc] {
                        px[y * size + x] = 255;
                    }
                }
            }
            write_pgm(dir.join(format!("frame_{t:04}.pgm")), size, size, &px)?;
        }
        let timing = json!({
            "frames_per_second": fps,
            "frames": mm.frames(),
            "top_p": p,
            "width": size,
            "height": size,
        });
        let tp = dir.join("timing.json");
        fs::write(&tp, serde_json::to_string_pretty(&timing)?).map_err(|e| matchmap::Error::Io { path: tp, source: e })?;
        Ok(mm.frames())
    })?;
    let result = json!({
        "out": out,
        "samples": corpus.len(),
        "frames": frames.iter().sum::<usize>(),
        "frames_per_second": fps,
        "top_p": p,
    });
    emit(None, &report("viz", &rc, result)?)
}

/// Short failure class for the one-line diagnostic.
fn classify(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<CliError>() {
        Some(BadConfig(_)) => return "bad config",
        Some(Missing(_)) => return "missing argument",
        None => {}
    }
    for cause in err.chain() {
        match cause.downcast_ref::<CliError>() {
            Some(BadConfig(_)) => return "bad config",
            Some(Missing(_)) => return "missing argument",
            None => {}
        }
        if let Some(e) = cause.downcast_ref::<matchmap::Error>() {
            return match e {
                matchmap::Error::Io { source, .. } | matchmap::Error::RawIo(source)
                    if source.kind() == std::io::ErrorKind::NotFound =>
                {
                    "missing file"
                }
                matchmap::Error::Io { .. } | matchmap::Error::RawIo(_) => "io",
                matchmap::Error::Shape { .. } => "dimension mismatch",
                matchmap::Error::Json(_) => "bad config",
                matchmap::Error::InvalidArgument(_) => "invalid input",
                _ => "bad file",
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return if e.kind() == std::io::ErrorKind::NotFound { "missing file" } else { "io" };
        }
        if cause.is::<serde_json::Error>() {
            return "bad config";
        }
    }
    "error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Synth(c) => cmd_synth(c),
        Cmd::Featurize(c) => cmd_featurize(c),
        Cmd::Train(c) => cmd_train(c),
        Cmd::Eval(c) => cmd_eval(c),
        Cmd::Localize(c) => cmd_localize(c),
        Cmd::Discover(c) => cmd_discover(c),
        Cmd::Concepts(c) => cmd_concepts(c),
        Cmd::Viz(v) => cmd_viz(v),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error ({}): {msg}", classify(&e));
            ExitCode::FAILURE
        }
    }
}
