//! `lapkit`: data generation, training, embedding, scoring, evaluation and
//! layer-usage analysis for layer attentive pooling backends.
//!
//! Exit codes: 0 success, 2 configuration or input error (including unknown
//! utterance ids), 3 I/O or file-format error, 4 non-finite training loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lap_core::embedder::{read_embeddings, write_embeddings, SpeakerEmbedding};
use lap_core::eval::{
    fit_calibration, score_trials, write_scores, Cohort, DetMetrics, EmbeddingTable,
    QualityFeatures, ScoreOptions, TrialList,
};
use lap_core::pooling::{
    dominant_layers, layer_usage, layer_usage_per_frame, write_usage_csv, AggregationMode,
    LayerAttentionRecord,
};
use lap_core::store::{self, load_stacks, validate_store, Manifest};
use lap_core::train::synth::read_schedule;
use lap_core::train::{
    make_synth_dataset, train, Checkpoint, EpochMetrics, KeyValueConfig, RunConfig, SynthSpec,
    TrainData, METRICS_HEADER,
};

const CHECKPOINT: &str = "checkpoint.lapc";
const METRICS: &str = "metrics.tsv";
const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(
    name = "lapkit",
    version,
    about = "Layer attentive pooling speaker-embedding toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; created if missing unless noted otherwise.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic rotating-layer dataset (the output directory must exist).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a backend and write checkpoint.lapc and metrics.tsv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs have completed.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Extract embeddings for every utterance of a manifest.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a trial list from embedding files.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        /// Embeddings TSV covering every trial id.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Embeddings TSV of the cohort utterances.
        #[arg(long)]
        cohort_embeddings: Option<PathBuf>,
    },
    /// Embed, score and compute detection metrics for a labeled trial list.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of the evaluation utterances.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Labeled trials, over utterances of --manifest, for fitting the
        /// quality-aware calibration.
        #[arg(long)]
        calibration_trials: Option<PathBuf>,
    },
    /// Count which layer wins each max in a sigmoid-max checkpoint.
    AnalyzeLayers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Analyze only the first N utterances.
        #[arg(long)]
        limit: Option<usize>,
        /// Generator schedule (`utt<TAB>l0,l1,...`) to compare dominant layers against.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Describe an LSF1 file or checkpoint, or validate a feature store.
    Inspect {
        /// An LSF1 file, a checkpoint, or a manifest (with --manifest).
        path: PathBuf,
        /// Treat PATH as a manifest and validate every referenced file.
        #[arg(long)]
        manifest: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct Scoring {
    /// Adaptive s-norm: `on` or `off`; overrides the `snorm` key.
    #[arg(long)]
    snorm: Option<String>,
}

/// Scoring options as `key = value` settings.
#[derive(Clone, Debug, PartialEq)]
struct EvalConfig {
    snorm: bool,
    /// Adaptive top-K, clamped to the cohort size.
    top_k: usize,
    /// Manifest whose per-speaker mean embeddings form the s-norm cohort.
    cohort_manifest: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snorm: true,
            top_k: 100,
            cohort_manifest: "train.tsv".into(),
        }
    }
}

fn on_off(key: &str, v: &str) -> lap_core::Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(lap_core::Error::Config(format!(
            "`{key}` must be on or off, got `{v}`"
        ))),
    }
}

impl KeyValueConfig for EvalConfig {
    fn set(&mut self, key: &str, v: &str) -> lap_core::Result<()> {
        match key {
            "snorm" => self.snorm = on_off(key, v)?,
            "top_k" => {
                self.top_k = v
                    .parse()
                    .map_err(|_| lap_core::Error::Config(format!("bad value `{v}` for `top_k`")))?
            }
            "cohort_manifest" => self.cohort_manifest = v.to_string(),
            _ => return Err(lap_core::Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("snorm", if self.snorm { "on" } else { "off" }.to_string()),
            ("top_k", self.top_k.to_string()),
            ("cohort_manifest", self.cohort_manifest.clone()),
        ]
    }

    fn validate(&self) -> lap_core::Result<()> {
        if self.top_k < 2 {
            return Err(lap_core::Error::Config("top_k must be at least 2".into()));
        }
        Ok(())
    }
}

/// An error that maps to exit code 2 without coming from the library.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use lap_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFiniteLoss { .. } => 4,
                E::Io { .. }
                | E::BadMagic { .. }
                | E::BadVersion { .. }
                | E::Truncated { .. }
                | E::Corrupt { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn resolve<C: KeyValueConfig>(common: &Common) -> Result<C> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| lap_core::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            C::from_text(&text, &path.display().to_string())?
        }
        None => C::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

/// Prints the resolved config and keeps a copy next to the outputs.
fn echo(cfg: &impl KeyValueConfig, out: &Path) -> Result<()> {
    let text = cfg.to_text();
    print!("{text}");
    store::write_atomic(&out.join(CONFIG_ECHO), text.as_bytes())?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| lap_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    store::write_atomic(path, &buf)?;
    Ok(())
}

fn manifest_root(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn embed_manifest(ck: &Checkpoint, path: &Path) -> Result<Vec<SpeakerEmbedding>> {
    let manifest = Manifest::read(path)?;
    let stacks = load_stacks(&manifest, manifest_root(path))?;
    stacks
        .iter()
        .map(|x| ck.model.backend.embed(x).map_err(Into::into))
        .collect()
}

fn read_embedding_file(path: &Path) -> Result<Vec<SpeakerEmbedding>> {
    let file = fs::File::open(path).map_err(|e| lap_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(read_embeddings(
        std::io::BufReader::new(file),
        &path.display().to_string(),
    )?)
}

fn read_trials(path: &Path) -> Result<TrialList> {
    let text = fs::read_to_string(path).map_err(|e| lap_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(TrialList::parse(&text, &path.display().to_string())?)
}

fn eval_config(common: &Common, scoring: &Scoring) -> Result<EvalConfig> {
    let mut cfg: EvalConfig = resolve(common)?;
    if let Some(v) = &scoring.snorm {
        cfg.set("snorm", v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Cohort of per-speaker mean embeddings, and the top-K clamped to its size.
fn build_cohort(
    cfg: &EvalConfig,
    manifest: &Manifest,
    embs: &[SpeakerEmbedding],
) -> Result<(Cohort, usize)> {
    let mut items = Vec::with_capacity(embs.len());
    for e in embs {
        let row = manifest
            .get(&e.utt_id)
            .ok_or_else(|| lap_core::Error::MissingId(e.utt_id.clone()))?;
        items.push((row.speaker.as_str(), e.vector.as_slice()));
    }
    let cohort = Cohort::from_speaker_means(items)?;
    let k = cfg.top_k.min(cohort.len());
    if k < cfg.top_k {
        log::info!(
            "s-norm top-K clamped from {} to the cohort size {k}",
            cfg.top_k
        );
    }
    if k < 2 {
        return Err(usage("s-norm needs a cohort of at least two speakers"));
    }
    Ok((cohort, k))
}

fn gen_data(common: &Common, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = resolve(common)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    print!("{}", spec.to_text());
    let written = make_synth_dataset(&spec, &common.out)?;
    store::write_atomic(&common.out.join(CONFIG_ECHO), spec.to_text().as_bytes())?;
    let manifest = Manifest::read(&written.train_manifest)?;
    let report = validate_store(&manifest, &common.out);
    if !report.all_pass() {
        bail!("generated store failed validation");
    }
    Ok(())
}

fn run_train(
    common: &Common,
    seed: Option<u64>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let mut cfg: RunConfig = resolve(common)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    ensure_dir(&common.out)?;
    echo(&cfg, &common.out)?;
    let data = TrainData::load(Path::new(&cfg.manifest))?;
    let metrics_path = common.out.join(METRICS);
    let (resume, mut log_text) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path, Some(&cfg))?;
            // Keep the rows of the epochs the checkpoint already covers.
            let old = fs::read_to_string(&metrics_path).unwrap_or_default();
            let mut kept = format!("{METRICS_HEADER}\n");
            for line in old.lines().skip(1) {
                let epoch: Option<usize> = line.split('\t').next().and_then(|e| e.parse().ok());
                if epoch.is_some_and(|e| e < ck.epoch) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            (Some(ck), kept)
        }
        None => (None, format!("{METRICS_HEADER}\n")),
    };
    let state = train(&cfg, &data, resume, stop_after, |m: &EpochMetrics| {
        log_text.push_str(&m.tsv_line());
        log_text.push('\n');
    })?;
    state.save(&common.out.join(CHECKPOINT))?;
    store::write_atomic(&metrics_path, log_text.as_bytes())?;
    Ok(())
}

fn run_embed(common: &Common, checkpoint: &Path, manifest: &Path) -> Result<()> {
    if !common.overrides.is_empty() || common.config.is_some() {
        return Err(usage("embed takes its configuration from the checkpoint"));
    }
    let ck = Checkpoint::load(checkpoint, None)?;
    ensure_dir(&common.out)?;
    echo(&ck.config, &common.out)?;
    let embs = embed_manifest(&ck, manifest)?;
    write_file(&common.out.join("embeddings.tsv"), |b| {
        write_embeddings(&embs, b)
    })
}

fn run_score(
    common: &Common,
    scoring: &Scoring,
    embeddings: &Path,
    trials: &Path,
    cohort_embeddings: Option<&Path>,
) -> Result<()> {
    let cfg = eval_config(common, scoring)?;
    ensure_dir(&common.out)?;
    echo(&cfg, &common.out)?;
    let table = EmbeddingTable::new(read_embedding_file(embeddings)?);
    let list = read_trials(trials)?;
    let mut opts = ScoreOptions::default();
    if cfg.snorm {
        let path = cohort_embeddings
            .ok_or_else(|| usage("s-norm is on but no --cohort-embeddings were given"))?;
        let manifest = Manifest::read(Path::new(&cfg.cohort_manifest))?;
        opts.snorm = Some(build_cohort(&cfg, &manifest, &read_embedding_file(path)?)?);
    }
    let scores = score_trials(&list, &table, &opts)?;
    write_file(&common.out.join("scores.tsv"), |b| {
        write_scores(&list, &scores, b)
    })
}

fn run_eval(
    common: &Common,
    scoring: &Scoring,
    checkpoint: &Path,
    manifest: &Path,
    trials: &Path,
    calibration_trials: Option<&Path>,
) -> Result<()> {
    let cfg = eval_config(common, scoring)?;
    ensure_dir(&common.out)?;
    echo(&cfg, &common.out)?;
    let ck = Checkpoint::load(checkpoint, None)?;
    let list = read_trials(trials)?;
    let labels = list
        .labels()
        .ok_or_else(|| usage("eval needs a labeled trial list"))?;
    let embs = embed_manifest(&ck, manifest)?;
    write_file(&common.out.join("embeddings.tsv"), |b| {
        write_embeddings(&embs, b)
    })?;
    let table = EmbeddingTable::new(embs);
    let mut opts = ScoreOptions::default();
    if cfg.snorm {
        let path = Path::new(&cfg.cohort_manifest);
        let cohort_manifest = Manifest::read(path)?;
        let cohort_embs = embed_manifest(&ck, path)?;
        opts.snorm = Some(build_cohort(&cfg, &cohort_manifest, &cohort_embs)?);
    }
    if let Some(path) = calibration_trials {
        let dev = read_trials(path)?;
        let dev_labels = dev
            .labels()
            .ok_or_else(|| usage("calibration trials must be labeled"))?;
        let dev_scores = score_trials(&dev, &table, &opts)?;
        let mut feats = Vec::with_capacity(dev_scores.len());
        for (t, s) in dev.trials.iter().zip(&dev_scores) {
            let (e, v) = (table.get(&t.enroll)?, table.get(&t.test)?);
            feats.push(QualityFeatures::new(*s, e.num_frames, v.num_frames));
        }
        let model = fit_calibration(&feats, &dev_labels)?;
        let w = model.weights;
        let text = format!(
            "bias={}\nscore={}\nlog_frames_enroll={}\nlog_frames_test={}\niterations={}\nconverged={}\n",
            w[0], w[1], w[2], w[3], model.iterations, model.converged
        );
        store::write_atomic(&common.out.join("calibration.txt"), text.as_bytes())?;
        opts.calibration = Some(model);
    }
    let scores = score_trials(&list, &table, &opts)?;
    write_file(&common.out.join("scores.tsv"), |b| {
        write_scores(&list, &scores, b)
    })?;
    let metrics = DetMetrics::compute(&scores, &labels)?;
    print!("{}", metrics.to_text());
    store::write_atomic(
        &common.out.join("metrics.txt"),
        metrics.to_text().as_bytes(),
    )?;
    Ok(())
}

fn run_analyze(
    common: &Common,
    checkpoint: &Path,
    manifest_path: &Path,
    limit: Option<usize>,
    schedule: Option<&Path>,
) -> Result<()> {
    if !common.overrides.is_empty() || common.config.is_some() {
        return Err(usage(
            "analyze-layers takes its configuration from the checkpoint",
        ));
    }
    let ck = Checkpoint::load(checkpoint, None)?;
    let mode = ck.model.backend.config.mode;
    if mode != AggregationMode::SigmoidMax {
        return Err(usage(format!(
            "analyze-layers needs a sigmoid-max checkpoint; this one uses {mode}, which weights every layer and selects none"
        )));
    }
    ensure_dir(&common.out)?;
    echo(&ck.config, &common.out)?;
    let mut manifest = Manifest::read(manifest_path)?;
    if let Some(n) = limit {
        manifest.rows.truncate(n);
    }
    let stacks = load_stacks(&manifest, manifest_root(manifest_path))?;
    let layers = ck.model.backend.config.layers;
    let max_frames = stacks.iter().map(|x| x.frames()).max().unwrap_or(0);
    let generator = match schedule {
        Some(p) => Some(
            read_schedule(p)?
                .into_iter()
                .collect::<std::collections::HashMap<_, _>>(),
        ),
        None => None,
    };
    let mut totals = vec![0u64; layers];
    let mut frame_totals = vec![vec![0u64; max_frames]; layers];
    let (mut agree, mut compared) = (0usize, 0usize);
    for x in &stacks {
        let (_, recs): (_, Vec<LayerAttentionRecord>) = ck.model.backend.embed_with_records(x)?;
        for (t, c) in totals.iter_mut().zip(layer_usage(&recs, layers)?) {
            *t += c;
        }
        let per_frame = layer_usage_per_frame(&recs, layers, x.frames())?;
        for (row, counts) in frame_totals.iter_mut().zip(&per_frame) {
            for (t, c) in row.iter_mut().zip(counts) {
                *t += c;
            }
        }
        if let Some(gen) = &generator {
            let active = gen
                .get(&x.utt_id)
                .ok_or_else(|| lap_core::Error::MissingId(x.utt_id.clone()))?;
            if active.len() != x.frames() {
                return Err(usage(format!(
                    "schedule for `{}` has {} frames, expected {}",
                    x.utt_id,
                    active.len(),
                    x.frames()
                )));
            }
            let dominant = dominant_layers(&per_frame);
            agree += dominant.iter().zip(active).filter(|(a, b)| a == b).count();
            compared += dominant.len();
        }
    }
    write_file(&common.out.join("layer_usage.csv"), |b| {
        write_usage_csv(&totals, b)
    })?;
    write_file(&common.out.join("layer_usage_frames.csv"), |b| {
        let header: Vec<String> = (0..max_frames).map(|t| format!("t{t}")).collect();
        writeln!(b, "layer,{}", header.join(","))?;
        for (l, row) in frame_totals.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(b, "{l},{}", cells.join(","))?;
        }
        Ok(())
    })?;
    let mut summary = format!(
        "utterances={}\nselections={}\n",
        stacks.len(),
        totals.iter().sum::<u64>()
    );
    if generator.is_some() && compared > 0 {
        summary.push_str(&format!(
            "frames_compared={compared}\nagreement={}\n",
            agree as f64 / compared as f64
        ));
    }
    print!("{summary}");
    store::write_atomic(&common.out.join("summary.txt"), summary.as_bytes())?;
    Ok(())
}

fn run_inspect(path: &Path, is_manifest: bool) -> Result<()> {
    if is_manifest {
        let manifest = Manifest::read(path)?;
        let report = validate_store(&manifest, manifest_root(path));
        for f in &report.files {
            match &f.problem {
                None => println!("{}\tok", f.utt_id),
                Some(p) => println!("{}\tFAIL\t{p}", f.utt_id),
            }
        }
        for g in &report.global {
            println!("store\tFAIL\t{g}");
        }
        if !report.all_pass() {
            let n = report.failures().count();
            return Err(anyhow!(lap_core::Error::Corrupt {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("{n} file(s) failed validation"),
            }));
        }
        return Ok(());
    }
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| lap_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        f.read_exact(&mut magic).map_err(|e| lap_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    if magic == store::MAGIC {
        let h = store::read_header(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        store::read_layerstack(path, &id)?;
        println!(
            "format=lsf1\nchannels={}\nlayers={}\nframes={}\nbytes={}",
            h.channels,
            h.layers,
            h.frames,
            h.file_len()
        );
    } else {
        let ck = Checkpoint::load(path, None).context("not an LSF1 file; read as a checkpoint")?;
        print!("{}", ck.config.to_text());
        println!(
            "format=checkpoint\nepoch={}\nstep={}\nspeakers={}\nbackend_scalars={}",
            ck.epoch,
            ck.step,
            ck.speakers.len(),
            ck.model.backend.backend_scalars()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => gen_data(&common, seed),
        Command::Train {
            common,
            seed,
            resume,
            stop_after_epoch,
        } => run_train(&common, seed, resume.as_deref(), stop_after_epoch),
        Command::Embed {
            common,
            checkpoint,
            manifest,
        } => run_embed(&common, &checkpoint, &manifest),
        Command::Score {
            common,
            scoring,
            embeddings,
            trials,
            cohort_embeddings,
        } => run_score(
            &common,
            &scoring,
            &embeddings,
            &trials,
            cohort_embeddings.as_deref(),
        ),
        Command::Eval {
            common,
            scoring,
            checkpoint,
            manifest,
            trials,
            calibration_trials,
        } => run_eval(
            &common,
            &scoring,
            &checkpoint,
            &manifest,
            &trials,
            calibration_trials.as_deref(),
        ),
        Command::AnalyzeLayers {
            common,
            checkpoint,
            manifest,
            limit,
            schedule,
        } => run_analyze(&common, &checkpoint, &manifest, limit, schedule.as_deref()),
        Command::Inspect { path, manifest } => run_inspect(&path, manifest),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lapkit: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
