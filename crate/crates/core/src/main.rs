//! Command-line surface: corpus generation, two-stage training, single-input
//! multi-view rotation, random generation, evaluation with optional baseline
//! comparison, and embedding export.
//!
//! Exit codes: 0 success, 2 usage/validation, 3 numerical abort.

use clap::{Parser, Subcommand};
use crossview::checkpoint;
use crossview::data::{
    image_to_rgb8, load_corpus_dir, load_folder, load_single_image, make_corpus, save_corpus,
    strip_labels, Corpus, FolderCorpus,
};
use crossview::domain::{nearest_one_hot, one_hot_matrix, sample_latent, VIEW_BINS};
use crossview::evaluation::{
    export_embeddings, full_eval, train_identity_embedder, FeatureSource,
};
use crossview::rng::RngStream;
use crossview::tensor::Tensor;
use crossview::training::{
    continue_supervised, parse_kv, train_self_supervised, LineSink, Stage, TrainConfig, TrainCtx,
    TrainError, TrainMode, TrainState,
};
use crossview::Real;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "crossview", version, about = "Two-pathway multi-view GAN")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the deterministic synthetic multi-view corpus.
    MakeData {
        #[arg(long)]
        identities: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a training stage described by a flat key/value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's pathway mode.
        #[arg(long)]
        mode: Option<String>,
        /// Stage to run: supervised | self.
        #[arg(long, default_value = "supervised")]
        stage: String,
    },
    /// Generate all 9 views from a single input image.
    Rotate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate images from random latents at cycling view bins.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus; optionally compare to a baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export encoder embeddings of a corpus as a TSV table.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    /// Usage or validation problem (exit 2).
    Validation(String),
    /// Numerical abort (exit 3); carries the diagnostics path when written.
    Numerical(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical abort: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::MakeData { identities, size, seed, out } => cmd_make_data(identities, size, seed, &out),
        Cmd::Train { config, resume, mode, stage } => cmd_train(&config, resume.as_deref(), mode.as_deref(), &stage),
        Cmd::Rotate { ckpt, input, out } => cmd_rotate(&ckpt, &input, &out),
        Cmd::Generate { ckpt, n, seed, out } => cmd_generate(&ckpt, n, seed, &out),
        Cmd::Eval { ckpt, corpus, baseline, out } => cmd_eval(&ckpt, &corpus, baseline.as_deref(), &out),
        Cmd::Embed { ckpt, corpus, out } => cmd_embed(&ckpt, &corpus, &out),
    }
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

fn cmd_make_data(identities: usize, size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if identities == 0 {
        return Err(CliError::Validation("--identities must be at least 1".into()));
    }
    if size != 32 && size != 64 {
        return Err(CliError::Validation(format!("--size {size} unsupported (32 or 64)")));
    }
    let corpus: Corpus<Real> = make_corpus(identities, size, seed);
    save_corpus(&corpus, seed, out).map_err(CliError::validation)?;
    println!(
        "wrote {} images ({} identities x {} views) to {}",
        corpus.len(),
        identities,
        VIEW_BINS,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Exclusive-writer lock on a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(CliError::validation)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Validation(
                format!("run directory is locked by another process ({} exists)", path.display()),
            )),
            Err(e) => Err(CliError::validation(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct RunPaths {
    corpus: PathBuf,
    run_dir: PathBuf,
    unlabeled_corpus: Option<PathBuf>,
    strip_label_fraction: f64,
}

/// Parse the run config file: training keys plus path keys. Unknown keys are
/// rejected. Environment variables override paths only.
fn parse_run_config(path: &Path) -> Result<(TrainConfig, RunPaths), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut map = parse_kv(&text).map_err(CliError::Validation)?;

    let corpus = map.remove("corpus");
    let run_dir = map.remove("run_dir");
    let unlabeled = map.remove("unlabeled_corpus");
    let strip: f64 = match map.remove("strip_label_fraction") {
        Some(v) => v
            .parse()
            .map_err(|e| CliError::Validation(format!("strip_label_fraction: {e}")))?,
        None => 0.0,
    };
    let config = TrainConfig::from_map(&mut map).map_err(CliError::Validation)?;
    if !map.is_empty() {
        let keys: Vec<&String> = map.keys().collect();
        return Err(CliError::Validation(format!("unknown config keys: {keys:?}")));
    }

    let corpus = std::env::var("CROSSVIEW_CORPUS").ok().or(corpus);
    let run_dir = std::env::var("CROSSVIEW_RUN_DIR").ok().or(run_dir);
    let unlabeled = std::env::var("CROSSVIEW_UNLABELED_CORPUS").ok().or(unlabeled);

    let paths = RunPaths {
        corpus: PathBuf::from(corpus.ok_or(CliError::Validation("config needs `corpus = PATH`".into()))?),
        run_dir: PathBuf::from(run_dir.ok_or(CliError::Validation("config needs `run_dir = PATH`".into()))?),
        unlabeled_corpus: unlabeled.map(PathBuf::from),
        strip_label_fraction: strip,
    };
    Ok((config, paths))
}

fn echo_resolved_config(config: &TrainConfig, paths: &RunPaths) -> Result<(), CliError> {
    let mut text = config.canonical_kv();
    text.push_str(&format!("corpus = {}\n", paths.corpus.display()));
    text.push_str(&format!("run_dir = {}\n", paths.run_dir.display()));
    if let Some(u) = &paths.unlabeled_corpus {
        text.push_str(&format!("unlabeled_corpus = {}\n", u.display()));
    }
    text.push_str(&format!("strip_label_fraction = {}\n", paths.strip_label_fraction));
    fs::write(paths.run_dir.join("config.resolved"), text).map_err(CliError::validation)
}

fn map_train_error(e: TrainError, run_dir: &Path) -> CliError {
    match e {
        TrainError::NonFinite { step, objective, identities } => {
            let diag = run_dir.join("diagnostics.txt");
            let body = format!(
                "non-finite loss\nstep = {step}\nobjective = {objective}\nbatch_identities = {identities:?}\n"
            );
            let _ = fs::write(&diag, body);
            CliError::Numerical(format!(
                "non-finite {objective} loss at step {step}; diagnostics at {}",
                diag.display()
            ))
        }
        other => CliError::validation(other),
    }
}

fn cmd_train(
    config_path: &Path,
    resume: Option<&Path>,
    mode_override: Option<&str>,
    stage: &str,
) -> Result<(), CliError> {
    let (mut config, paths) = parse_run_config(config_path)?;
    if let Some(m) = mode_override {
        config.mode = TrainMode::parse(m)
            .ok_or(CliError::Validation(format!("--mode {m}: expected two_path or single_path")))?;
    }
    config.validate().map_err(CliError::validation)?;
    let stage = match stage {
        "supervised" => Stage::Supervised,
        "self" => Stage::SelfSupervised,
        other => {
            return Err(CliError::Validation(format!(
                "--stage {other}: expected supervised or self"
            )))
        }
    };
    if stage == Stage::SelfSupervised && resume.is_none() {
        return Err(CliError::Validation(
            "--stage self needs --resume CKPT (stage two starts from a pre-trained checkpoint)".into(),
        ));
    }

    let _lock = RunLock::acquire(&paths.run_dir)?;
    echo_resolved_config(&config, &paths)?;

    let corpus: Corpus<Real> = load_corpus_dir(&paths.corpus).map_err(CliError::validation)?;

    let mut state = match resume {
        Some(ckpt) => checkpoint::load_expecting::<Real>(ckpt, &config).map_err(CliError::validation)?,
        None => TrainState::new(config.clone()).map_err(CliError::validation)?,
    };

    let log_path = paths.run_dir.join("steps.log");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(CliError::validation)?;
    let mut sink = LineSink::new(std::io::BufWriter::new(log_file));
    let ckpt_dir = paths.run_dir.join("checkpoints");
    let mut ctx = TrainCtx {
        sink: &mut sink,
        audit: None,
        checkpoint_dir: Some(&ckpt_dir),
    };

    match stage {
        Stage::Supervised => {
            continue_supervised(&mut state, &corpus, &mut ctx)
                .map_err(|e| map_train_error(e, &paths.run_dir))?;
        }
        Stage::SelfSupervised => {
            let (labeled, mut unlabeled) =
                strip_labels(&corpus, paths.strip_label_fraction, config.seed)
                    .map_err(CliError::validation)?;
            if let Some(dir) = &paths.unlabeled_corpus {
                match load_folder::<Real>(dir, None, config.image_size).map_err(CliError::validation)? {
                    FolderCorpus::Unlabeled(mut extra) => unlabeled.append(&mut extra),
                    FolderCorpus::Labeled(_) => unreachable!("no labels file given"),
                }
            }
            train_self_supervised(&mut state, &labeled, &unlabeled, &mut ctx)
                .map_err(|e| map_train_error(e, &paths.run_dir))?;
        }
    }

    println!(
        "stage {} complete at step {}; checkpoints under {}",
        stage.as_str(),
        state.step,
        ckpt_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// rotate / generate
// ---------------------------------------------------------------------------

fn load_state(ckpt: &Path) -> Result<TrainState<Real>, CliError> {
    checkpoint::load::<Real>(ckpt).map_err(CliError::validation)
}

fn write_image_matrix(px: &Tensor<Real>, size: usize, path: &Path) -> Result<(), CliError> {
    // bounds check before raster encoding
    if !px.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
        return Err(CliError::Numerical(format!("{}: pixel values outside [-1, 1]", path.display())));
    }
    let img = crossview::domain::Image::from_tensor(size, size, px.clone());
    image_to_rgb8(&img).save(path).map_err(CliError::validation)
}

fn cmd_rotate(ckpt: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let state = load_state(ckpt)?;
    let size = state.config.image_size;
    let img = load_single_image::<Real>(input, size).map_err(CliError::validation)?;
    fs::create_dir_all(out).map_err(CliError::validation)?;

    let (dist, latent) = state.encoder.encode(&img).map_err(CliError::validation)?;
    let predicted = nearest_one_hot(&dist);

    // one shared encoding, all 9 views
    let bins: Vec<usize> = (0..VIEW_BINS).collect();
    let v = one_hot_matrix::<Real>(&bins);
    let mut z_rows = Vec::with_capacity(VIEW_BINS * latent.code().len());
    for _ in 0..VIEW_BINS {
        z_rows.extend_from_slice(latent.code());
    }
    let z = Tensor::from_vec(VIEW_BINS, latent.code().len(), z_rows);
    let gen = state.generator.generate_batch(&v, &z);
    let hw = size * size;
    for b in 0..VIEW_BINS {
        let px = Tensor::from_vec(hw, 3, gen.data()[b * hw * 3..(b + 1) * hw * 3].to_vec());
        write_image_matrix(&px, size, &out.join(format!("view_{b}.png")))?;
    }
    fs::write(
        out.join("predicted_view.txt"),
        format!("predicted_view_bin = {}\n", predicted.bin()),
    )
    .map_err(CliError::validation)?;
    println!("wrote 9 views to {}; input's predicted view bin: {}", out.display(), predicted.bin());
    Ok(())
}

fn cmd_generate(ckpt: &Path, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Validation("--n must be at least 1".into()));
    }
    let state = load_state(ckpt)?;
    let size = state.config.image_size;
    fs::create_dir_all(out).map_err(CliError::validation)?;
    let mut rng = RngStream::new(seed).split(0x6E);
    let hw = size * size;
    for i in 0..n {
        let bin = i % VIEW_BINS;
        let z = sample_latent::<Real>(&mut rng);
        let v = one_hot_matrix::<Real>(&[bin]);
        let zt = Tensor::from_vec(1, z.code().len(), z.code().to_vec());
        let gen = state.generator.generate_batch(&v, &zt);
        let px = Tensor::from_vec(hw, 3, gen.data().to_vec());
        write_image_matrix(&px, size, &out.join(format!("gen_{i:04}_view{bin}.png")))?;
    }
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / embed
// ---------------------------------------------------------------------------

const EMBEDDER_SEED: u64 = 0xE1;

fn cmd_eval(ckpt: &Path, corpus_dir: &Path, baseline: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let state = load_state(ckpt)?;
    let corpus: Corpus<Real> = load_corpus_dir(corpus_dir).map_err(CliError::validation)?;
    let embedder = train_identity_embedder(&corpus, EMBEDDER_SEED).map_err(CliError::validation)?;
    let mut report = full_eval(
        &state.encoder,
        &state.generator,
        &embedder,
        &corpus,
        &state.config.fingerprint(),
    )
    .map_err(CliError::validation)?;

    if let Some(base_path) = baseline {
        let base = load_state(base_path)?;
        let base_report = full_eval(
            &base.encoder,
            &base.generator,
            &embedder,
            &corpus,
            &base.config.fingerprint(),
        )
        .map_err(CliError::validation)?;
        for key in ["identity_similarity", "latent_coverage", "cross_recon_l1", "view_accuracy", "diversity"] {
            if let (Some(a), Some(b)) = (report.get(key), base_report.get(key)) {
                report.set(&format!("baseline.{key}"), b, 0);
                report.set(&format!("delta.{key}"), b - a, 0);
            }
        }
        let better_sim = report.get("identity_similarity") < report.get("baseline.identity_similarity");
        let better_cov = report.get("latent_coverage") < report.get("baseline.latent_coverage");
        report.set("verdict.identity_similarity_better", better_sim as u8 as f64, 0);
        report.set("verdict.latent_coverage_better", better_cov as u8 as f64, 0);
    }

    fs::write(out, report.to_kv_text()).map_err(CliError::validation)?;
    print!("{}", report.to_kv_text());
    Ok(())
}

fn cmd_embed(ckpt: &Path, corpus_dir: &Path, out: &Path) -> Result<(), CliError> {
    let state = load_state(ckpt)?;
    let corpus: Corpus<Real> = load_corpus_dir(corpus_dir).map_err(CliError::validation)?;
    let rows = export_embeddings(FeatureSource::Encoder(&state.encoder), &corpus, out)
        .map_err(CliError::validation)?;
    println!("{rows}");
    Ok(())
}
