//! Command-line driver: corpus generation, training, synthesis, evaluation,
//! and ablation grids. Every command persists the resolved config next to
//! its outputs.
//!
//! Exit codes: 0 success, 2 invariant failure, 3 config error, 1 other.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stylecodec::codec::TimbreEmbedding;
use stylecodec::config::RunConfig;
use stylecodec::corpus::{generate_dataset, load_dataset, write_dataset, Dataset};
use stylecodec::eval::{
    eval_control, eval_many_to_many, oracle_self_check, render_ablation_table,
    render_control_table, run_ablations,
};
use stylecodec::fusion::{assemble_output, cosine, prompt_frames, timbre_extract};
use stylecodec::model::Model;
use stylecodec::style_text::{StylePrompt, TemplateSplit};
use stylecodec::training::{
    check_compatible, dataset_hash, load_checkpoint, save_checkpoint, train_fusion, train_loop,
    TrainState,
};

#[derive(Parser)]
#[command(name = "stylecodec", about = "Style-controllable token synthesis over a factorized codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the single-core desk preset as the base config
    #[arg(long)]
    desk: bool,
    /// Run data-parallel loops sequentially
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if self.desk => RunConfig::desk_test(),
            None => {
                let mut c = RunConfig::default();
                c.resolve()?;
                c
            }
        };
        if self.sequential {
            cfg.parallel = false;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four-split synthetic corpus
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Override the dataset seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated corpus (joint phase, then timbre fusion)
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (defaults to $STYLECODEC_DATA_ROOT)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Synthesize from a checkpoint
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        style_text: String,
        /// Speaker id (integer) or a JSON utterance file for the timbre prompt
        #[arg(long)]
        timbre_from: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Content token ids, comma separated (random when omitted)
        #[arg(long)]
        content: Option<String>,
    },
    /// Evaluate control accuracy on a split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train | in_domain | heldout_style | heldout_speaker | all
        #[arg(long, default_value = "in_domain")]
        split: String,
        #[arg(long)]
        n: Option<usize>,
        /// Also run the many-to-many diversity protocol
        #[arg(long)]
        many_to_many: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/evaluate the component-count and noise-mode grids
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors that should map to exit code 3.
fn is_config_error(err: &anyhow::Error) -> bool {
    let msg = format!("{err:#}");
    msg.contains("config") || msg.contains("schema") || msg.contains("mismatch")
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var("STYLECODEC_DATA_ROOT") {
        return Ok(PathBuf::from(env));
    }
    bail!("no dataset directory: pass --data or set STYLECODEC_DATA_ROOT")
}

fn load_data(flag: Option<PathBuf>) -> Result<Dataset> {
    let dir = data_root(flag)?;
    load_dataset(&dir).with_context(|| format!("load dataset from {}", dir.display()))
}

/// The checkpoint carries its own model config (mode, K, dims); evaluation
/// only has to refuse a checkpoint trained on different data.
fn load_model_for_eval(ckpt: &Path, ds: &Dataset) -> Result<TrainState> {
    let (state, _) = load_checkpoint(ckpt)?;
    let expected = state.model.cfg.clone();
    check_compatible(&state, &expected, dataset_hash(ds)).context("checkpoint/dataset mismatch")?;
    Ok(state)
}

fn cmd_gen_data(config: ConfigArgs, out: PathBuf, seed: Option<u64>, force: bool) -> Result<()> {
    let mut cfg = config.load()?;
    if let Some(s) = seed {
        cfg.dataset.seed = s;
    }
    cfg.resolve()?;
    let ds = generate_dataset(&cfg.dataset, cfg.exec_mode())?;
    write_dataset(&ds, &out, force)?;
    cfg.save(&out.join("run_config.toml"))?;
    println!("wrote dataset to {}", out.display());
    println!(
        "splits: train={} in_domain={} heldout_style={} heldout_speaker={}",
        ds.train.len(),
        ds.test_in_domain.len(),
        ds.test_heldout_style.len(),
        ds.test_heldout_speaker.len()
    );
    Ok(())
}

fn cmd_train(
    config: ConfigArgs,
    data: Option<PathBuf>,
    out: PathBuf,
    resume: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<u64>,
) -> Result<()> {
    let mut cfg = config.load()?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    if let Some(s) = steps {
        cfg.training.total_steps = s;
    }
    cfg.resolve()?;
    let ds = load_data(data)?;
    anyhow::ensure!(
        ds.manifest.config == cfg.dataset,
        "dataset on disk does not match the configured dataset (config mismatch); \
         regenerate or point --config at the dataset's run_config.toml"
    );
    let hash = dataset_hash(&ds);
    std::fs::create_dir_all(&out)?;
    cfg.save(&out.join("run_config.toml"))?;

    let mut state = match resume {
        Some(path) => {
            let (state, _) = load_checkpoint(&path)?;
            check_compatible(&state, &cfg.model, hash).context("resume config mismatch")?;
            anyhow::ensure!(
                state.cfg == cfg.training,
                "resume training config mismatch with checkpoint"
            );
            state
        }
        None => {
            let model = Model::new(cfg.model.clone(), cfg.training.seed)?;
            TrainState::new(model, cfg.training.clone(), hash)
        }
    };

    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?,
    );
    let history = train_loop(&mut state, &ds.train, cfg.exec_mode(), Some(&mut log))?;
    use std::io::Write;
    log.flush()?;
    if let Some(last) = history.last() {
        println!(
            "joint phase done at step {}: l_codec={:.4} l_dur={:.4} l_style={:.4}",
            last.step + 1,
            last.l_codec,
            last.l_dur,
            last.l_style
        );
    }
    let fusion_losses = train_fusion(&mut state, &ds.train, cfg.exec_mode())?;
    if let (Some(first), Some(last)) = (fusion_losses.first(), fusion_losses.last()) {
        println!("fusion phase: loss {first:.4} -> {last:.4}");
    }

    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &state, cfg.training.seed)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn parse_content(spec: Option<&str>, vocab: usize, seed: u64) -> Result<Vec<usize>> {
    match spec {
        Some(s) => s
            .split(',')
            .map(|p| {
                let id: usize = p.trim().parse().context("content token id")?;
                anyhow::ensure!(id < vocab, "content token {id} outside vocab {vocab}");
                Ok(id)
            })
            .collect(),
        None => {
            use rand::Rng;
            let mut rng = stylecodec::rng::derive(seed, "cli-content", 0, 0);
            let mut toks = Vec::new();
            for i in 0..5usize {
                loop {
                    let t = rng.gen_range(0..vocab);
                    if i == 0 || toks[i - 1] != t {
                        toks.push(t);
                        break;
                    }
                }
            }
            Ok(toks)
        }
    }
}

fn cmd_synth(
    ckpt: PathBuf,
    data: Option<PathBuf>,
    style_text: String,
    timbre_from: String,
    seed: u64,
    n: usize,
    content: Option<String>,
) -> Result<()> {
    let ds = load_data(data)?;
    let state = load_model_for_eval(&ckpt, &ds)?;
    let model = &state.model;

    let timbre: TimbreEmbedding = match timbre_from.parse::<usize>() {
        Ok(speaker_id) => {
            anyhow::ensure!(
                speaker_id < ds.manifest.config.n_speakers,
                "unknown speaker id {speaker_id} (dataset has {})",
                ds.manifest.config.n_speakers
            );
            ds.manifest.config.speaker_timbre(speaker_id)
        }
        Err(_) => {
            let text = std::fs::read_to_string(&timbre_from)
                .with_context(|| format!("read utterance file {timbre_from}"))?;
            let utt: stylecodec::codec::SyntheticUtterance =
                serde_json::from_str(text.lines().next().unwrap_or_default())
                    .context("parse utterance record")?;
            utt.timbre
        }
    };

    let prompt = StylePrompt::from_text(&style_text);
    anyhow::ensure!(!prompt.tokens.is_empty(), "empty style text");
    let oov = model.vocab.oov_fraction(&prompt);
    if oov > 0.0 {
        eprintln!("note: {:.0}% of style words are out of vocabulary", oov * 100.0);
    }
    let content_tokens = parse_content(content.as_deref(), model.cfg.text_vocab, seed)?;

    for i in 0..n {
        let mut rng = stylecodec::rng::derive(seed, "cli-synth", 0, i as u64);
        let out = model.synthesize(&prompt, &content_tokens, &mut rng)?;
        let mut prng = stylecodec::rng::derive(seed, "cli-prompt", 0, i as u64);
        let frames = prompt_frames(
            &timbre,
            model.cfg.fusion.prompt_len,
            model.cfg.fusion.prompt_noise,
            &mut prng,
        );
        let extracted = timbre_extract(&model.store, &model.fusion, &frames)?;
        let assembled = assemble_output(
            &model.store,
            &model.fusion,
            &model.space,
            &ds.manifest.content_perm,
            &out.codec,
            &extracted,
        )?;
        let record = serde_json::json!({
            "sample": i,
            "oov_fraction": oov,
            "component": out.component,
            "frames": out.codec.frames(),
            "durations": out.durations,
            "attributes": assembled.attributes.as_ref().map(|(l, _)| l),
            "degrees": assembled.attributes.as_ref().map(|(_, d)| d),
            "content": assembled.content.as_ref().map(|(c, _)| c.clone()),
            "timbre_readout_cosine": cosine(&assembled.timbre_readout, &timbre.0),
        });
        println!("{record}");
    }
    Ok(())
}

fn cmd_eval(
    ckpt: PathBuf,
    data: Option<PathBuf>,
    split: String,
    n: Option<usize>,
    many_to_many: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let ds = load_data(data)?;
    let state = load_model_for_eval(&ckpt, &ds)?;
    let model = &state.model;
    let mode = stylecodec::ExecMode::Parallel;
    let eval_seed = 99;

    // invariant checks gate the exit code
    let mut invariant_failures = Vec::new();
    if oracle_self_check(model, &ds.test_in_domain) < 1.0 {
        invariant_failures.push("oracle round-trip on ground-truth codecs".to_string());
    }
    let heldout: std::collections::HashSet<usize> =
        model.bank.ids(TemplateSplit::Heldout).into_iter().collect();
    if ds.train.iter().any(|u| heldout.contains(&u.template_id)) {
        invariant_failures.push("heldout templates leaked into the training split".to_string());
    }
    let train_speakers: std::collections::HashSet<usize> =
        ds.train.iter().map(|u| u.speaker_id).collect();
    if ds.test_heldout_speaker.iter().any(|u| train_speakers.contains(&u.speaker_id)) {
        invariant_failures.push("heldout speakers leaked into the training split".to_string());
    }

    let splits: Vec<&str> = if split == "all" {
        vec!["in_domain", "heldout_style", "heldout_speaker"]
    } else {
        vec![split.as_str()]
    };
    let mut reports = Vec::new();
    for s in splits {
        let n = n.unwrap_or(usize::MAX);
        reports.push(eval_control(model, &ds, s, n, eval_seed, mode)?);
    }
    print!("{}", render_control_table(&reports));

    let mut artifacts = Vec::new();
    for r in &reports {
        artifacts.push(serde_json::to_string(r)?);
    }
    if many_to_many {
        let m2m = eval_many_to_many(model, 50, eval_seed, mode)?;
        println!(
            "many-to-many: SA={:.3} degree-variance={:.5} distinct-bins={:.2} entropy={:.3}",
            m2m.sa, m2m.degree_variance, m2m.distinct_degree_bins, m2m.component_entropy
        );
        artifacts.push(serde_json::to_string(&m2m)?);
    }
    if let Some(out) = out {
        std::fs::write(&out, artifacts.join("\n") + "\n")?;
        println!("reports written to {}", out.display());
    }

    if !invariant_failures.is_empty() {
        for f in &invariant_failures {
            eprintln!("invariant failure: {f}");
        }
        bail!("invariant failure");
    }
    Ok(())
}

fn cmd_ablate(config: ConfigArgs, data: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let mut cfg = config.load()?;
    cfg.resolve()?;
    let ds = load_data(data)?;
    anyhow::ensure!(
        ds.manifest.config == cfg.dataset,
        "dataset on disk does not match the configured dataset (config mismatch)"
    );
    std::fs::create_dir_all(&out)?;
    cfg.save(&out.join("run_config.toml"))?;
    let mut train_cfg = cfg.training.clone();
    train_cfg.total_steps = cfg.ablation.total_steps;
    train_cfg.warmup_steps = (cfg.ablation.total_steps / 10).max(1);
    train_cfg.batch_frames = cfg.ablation.batch_frames;
    let rows = run_ablations(
        &cfg.model,
        &train_cfg,
        &ds,
        &cfg.ablation.grid(),
        &out,
        cfg.ablation.m2m_samples,
        cfg.exec_mode(),
    )?;
    print!("{}", render_ablation_table(&rows));
    println!("grid artifacts in {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, seed, force } => cmd_gen_data(config, out, seed, force),
        Command::Train { config, data, out, resume, seed, steps } => {
            cmd_train(config, data, out, resume, seed, steps)
        }
        Command::Synth { ckpt, data, style_text, timbre_from, seed, n, content } => {
            cmd_synth(ckpt, data, style_text, timbre_from, seed, n, content)
        }
        Command::Eval { ckpt, data, split, n, many_to_many, out } => {
            cmd_eval(ckpt, data, split, n, many_to_many, out)
        }
        Command::Ablate { config, data, out } => cmd_ablate(config, data, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let msg = format!("{err:#}");
            if msg.contains("invariant failure") {
                ExitCode::from(2)
            } else if is_config_error(&err) {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
