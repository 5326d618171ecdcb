//! `cohedit`: synthesize clips, train the toy denoiser, invert, edit, ablate
//! and evaluate.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cohedit_core::denoiser::{all_layers, decoder_layers, load_weights, save_weights, train_toy};
use cohedit_core::io::{
    clip_hash, inversion_hash, ClipDirectory, LatentKey, LatentStore, RunConfig,
};
use cohedit_core::metrics::classifier::{
    AttributeClassifier, ClassifierConfig, ClassifierTrainConfig,
};
use cohedit_core::metrics::ToyEmbedder;
use cohedit_core::pipeline::{Evaluation, FlowSource};
use cohedit_core::synth::{
    clips_to_samples, generate_clip, generate_corpus_clips, rotational_fixture, standard_fixture,
    CorpusConfig,
};
use cohedit_core::Device;
use cohedit_core::{
    Denoiser, DiffusionSchedule, Editor, GradMethod, InjectionMode, LatentFrame, Variant, VideoClip,
};

#[derive(Parser)]
#[command(
    name = "cohedit",
    version,
    about = "Temporally coherent toy video editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic fixture clip or a training corpus.
    Synth(SynthArgs),
    /// Train the toy denoiser on a corpus directory.
    Train(TrainArgs),
    /// Train the attribute classifier used for prompt fidelity.
    TrainClassifier(TrainClassifierArgs),
    /// DDIM-invert every frame of a clip.
    Invert(InvertArgs),
    /// Edit a clip under a new prompt.
    Edit(EditArgs),
    /// Edit a clip once per variant and write a metrics table.
    Ablate(AblateArgs),
    /// Score an edited clip against its reference.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Standard,
    Rotational,
    Corpus,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "standard")]
    kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frame count override for fixtures.
    #[arg(long)]
    frames: Option<usize>,
    /// Number of clips for `--kind corpus`.
    #[arg(long, default_value_t = 200)]
    n_clips: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override fields of the run configuration.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    active_steps: Option<usize>,
    /// Injection mode: anchor_plus_prev, anchor_only, prev_only, random_prev or none.
    #[arg(long)]
    policy: Option<String>,
    /// `decoder`, `all` or a comma-separated list of block numbers.
    #[arg(long)]
    inject_layers: Option<String>,
    #[arg(long)]
    grad_method: Option<String>,
    /// Classifier-free guidance scale used while editing.
    #[arg(long)]
    cfg_scale: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output latents directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    clip: PathBuf,
    /// Latents from `invert`; computed on the fly when omitted.
    #[arg(long)]
    latents: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    overrides: Overrides,
    /// Output clip directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "ours,ours-w/o-update,per-frame"
    )]
    variants: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output metrics JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    edited: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_layers(spec: &str) -> anyhow::Result<BTreeSet<usize>> {
    match spec {
        "decoder" => Ok(decoder_layers()),
        "all" => Ok(all_layers()),
        list => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .with_context(|| format!("bad layer {s:?} in --inject-layers"))
            })
            .collect(),
    }
}

impl Overrides {
    fn load(&self) -> anyhow::Result<(RunConfig, DiffusionSchedule)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
            cfg.edit.seed = s;
        }
        if let Some(d) = self.delta {
            cfg.edit.guidance.delta = d;
        }
        if let Some(n) = self.active_steps {
            cfg.edit.guidance.active_steps = n;
        }
        if let Some(p) = &self.policy {
            cfg.edit.policy.mode = p.parse::<InjectionMode>()?;
        }
        if let Some(l) = &self.inject_layers {
            cfg.edit.policy.layers = parse_layers(l)?;
        }
        if let Some(g) = &self.grad_method {
            cfg.edit.guidance.grad_method = g.parse::<GradMethod>()?;
        }
        if let Some(s) = self.cfg_scale {
            cfg.edit.edit_cfg_scale = s;
        }
        let sched = cfg.validate()?;
        Ok((cfg, sched))
    }
}

fn load_model(flag: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<Denoiser> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.weights.clone())
        .context("no weights given (use --weights or set `weights` in the config)")?;
    let model =
        load_weights(&path, &Device::Cpu).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn read_clip(dir: &Path, model: Option<&Denoiser>) -> anyhow::Result<VideoClip> {
    let clip =
        ClipDirectory::read(dir).with_context(|| format!("reading clip {}", dir.display()))?;
    if clip.is_empty() {
        bail!("clip {} has no frames", dir.display());
    }
    if let (Some(m), Some((c, h, w))) = (model, clip.resolution()) {
        let mc = m.config();
        if (c, h, w) != (mc.image_channels, mc.image_size, mc.image_size) {
            bail!(
                "clip {} is {c}x{h}x{w} but the weights expect {}x{}x{}",
                dir.display(),
                mc.image_channels,
                mc.image_size,
                mc.image_size
            );
        }
    }
    Ok(clip)
}

/// Refuses to write into (or above) any input directory.
fn check_output(out: &Path, inputs: &[&Path]) -> anyhow::Result<()> {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let o = abs(out);
    for i in inputs {
        let i = abs(i);
        if o.starts_with(&i) || i.starts_with(&o) {
            bail!("output {} overlaps input {}", out.display(), i.display());
        }
    }
    Ok(())
}

fn read_corpus(dir: &Path) -> anyhow::Result<Vec<VideoClip>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("corpus {} contains no clip directories", dir.display());
    }
    dirs.iter().map(|d| read_clip(d, None)).collect()
}

fn latent_key(
    clip: &VideoClip,
    model: &Denoiser,
    sched: &DiffusionSchedule,
    cfg: &RunConfig,
) -> anyhow::Result<LatentKey> {
    Ok(LatentKey {
        clip: clip_hash(clip),
        weights: model.fingerprint()?,
        schedule: inversion_hash(sched, &cfg.edit)?,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_classifier(path: Option<&Path>) -> anyhow::Result<Option<AttributeClassifier>> {
    path.map(|p| {
        AttributeClassifier::load(p).with_context(|| format!("loading classifier {}", p.display()))
    })
    .transpose()
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    match a.kind {
        SynthKind::Corpus => {
            let clips = generate_corpus_clips(a.n_clips, a.seed, &CorpusConfig::default())?;
            for (i, c) in clips.iter().enumerate() {
                ClipDirectory::write(a.out.join(format!("clip_{i:05}")), c, Some(a.seed))?;
            }
            tracing::info!(clips = clips.len(), out = %a.out.display(), "corpus written");
        }
        kind => {
            let mut spec = match kind {
                SynthKind::Standard => standard_fixture(a.seed),
                _ => rotational_fixture(a.seed),
            };
            if let Some(n) = a.frames {
                spec.n_frames = n;
            }
            ClipDirectory::write(&a.out, &generate_clip(&spec)?, Some(a.seed))?;
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, sched) = a.overrides.load()?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    check_output(&a.out, &[&a.corpus])?;
    let samples = clips_to_samples(&read_corpus(&a.corpus)?);
    let every = (cfg.train.steps / 20).max(1);
    let (model, report) = train_toy(&samples, &cfg.denoiser, &cfg.train, &sched, |step, loss| {
        if (step + 1) % every == 0 {
            tracing::info!(step = step + 1, loss, "train");
        }
    })?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_weights(&model, &a.out)?;
    tracing::info!(
        initial = report.initial_loss(),
        final_loss = report.final_loss(),
        out = %a.out.display(),
        "weights written"
    );
    Ok(())
}

fn train_classifier(a: TrainClassifierArgs) -> anyhow::Result<()> {
    check_output(&a.out, &[&a.corpus])?;
    let samples = clips_to_samples(&read_corpus(&a.corpus)?);
    let mut tc = ClassifierTrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    let clf = AttributeClassifier::train(&samples, &ClassifierConfig::default(), &tc)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    clf.save(&a.out)?;
    Ok(())
}

fn invert(a: InvertArgs) -> anyhow::Result<()> {
    let (cfg, sched) = a.overrides.load()?;
    check_output(&a.out, &[&a.clip])?;
    let model = load_model(a.weights.as_deref(), &cfg)?;
    let clip = read_clip(&a.clip, Some(&model))?;
    let latents = Editor::new(&model, &sched).invert_clip(&clip, &cfg.edit)?;
    LatentStore::write(
        &a.out,
        &latents,
        &latent_key(&clip, &model, &sched, &cfg)?,
        &sched,
    )?;
    Ok(())
}

fn latents_for(
    clip: &VideoClip,
    dir: Option<&Path>,
    model: &Denoiser,
    sched: &DiffusionSchedule,
    cfg: &RunConfig,
) -> anyhow::Result<Vec<LatentFrame>> {
    match dir {
        Some(d) => Ok(LatentStore::read(
            d,
            Some(&latent_key(clip, model, sched, cfg)?),
            model.device(),
        )?),
        None => Ok(Editor::new(model, sched).invert_clip(clip, &cfg.edit)?),
    }
}

fn edit(a: EditArgs) -> anyhow::Result<()> {
    let (cfg, sched) = a.overrides.load()?;
    let mut inputs = vec![a.clip.as_path()];
    inputs.extend(a.latents.as_deref());
    check_output(&a.out, &inputs)?;
    let model = load_model(a.weights.as_deref(), &cfg)?;
    let clip = read_clip(&a.clip, Some(&model))?;
    let latents = latents_for(&clip, a.latents.as_deref(), &model, &sched, &cfg)?;
    let out = Editor::new(&model, &sched).edit_clip(&clip, &latents, &a.prompt, &cfg.edit, None)?;
    let mut edited = out.clip;
    // input motion does not describe the edited frames
    edited.flows = None;
    ClipDirectory::write(&a.out, &edited, Some(cfg.seed))?;
    let mut log = fs::File::create(a.out.join("guidance_log.jsonl"))?;
    for e in &out.events {
        writeln!(log, "{}", serde_json::to_string(e)?)?;
    }
    tracing::info!(frames = edited.len(), guided_updates = out.events.len(), out = %a.out.display(), "edit written");
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let (cfg, sched) = a.overrides.load()?;
    check_output(&a.out, &[&a.clip])?;
    let model = load_model(a.weights.as_deref(), &cfg)?;
    let clip = read_clip(&a.clip, Some(&model))?;
    let variants = a
        .variants
        .iter()
        .map(|v| Variant::named(v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let classifier = load_classifier(a.classifier.as_deref())?;
    let embedder = ToyEmbedder::default();
    let eval = Evaluation {
        embedder: &embedder,
        classifier: classifier.as_ref(),
        flow_source: FlowSource::Input,
    };
    let editor = Editor::new(&model, &sched);
    let latents = editor.invert_clip(&clip, &cfg.edit)?;
    let clip_id = a
        .clip
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rows: Vec<_> = editor
        .run_ablation(
            &clip, &latents, &a.prompt, &cfg.edit, &variants, &eval, &clip_id,
        )?
        .into_iter()
        .map(|(row, _)| row)
        .collect();
    write_json(&a.out, &rows)?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    check_output(&a.out, &[&a.edited, &a.reference])?;
    let edited = read_clip(&a.edited, None)?;
    let reference = read_clip(&a.reference, None)?;
    if edited.len() != reference.len() || edited.resolution() != reference.resolution() {
        bail!("edited and reference clips differ in frame count or resolution");
    }
    let classifier = load_classifier(a.classifier.as_deref())?;
    let embedder = ToyEmbedder::default();
    let eval = Evaluation {
        embedder: &embedder,
        classifier: classifier.as_ref(),
        flow_source: FlowSource::Input,
    };
    let clip_id = a
        .reference
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let row = eval.score(&reference, &edited.frames, &a.prompt, &clip_id, "edited")?;
    write_json(&a.out, &row)?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let result = match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::Invert(a) => invert(a),
        Command::Edit(a) => edit(a),
        Command::Ablate(a) => ablate(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
