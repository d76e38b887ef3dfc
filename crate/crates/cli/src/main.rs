//! `voxfc` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use voxfc::audio::{griffin_lim_invert, write_mels, write_wav, MelSpectrogram};
use voxfc::config::LabConfig;
use voxfc::data::{
    build_manifest, eval_items, labelled_mels, load_mel, load_mels, make_toy_dataset, speaker_index, train_examples,
    CorpusLayout, DatasetManifest, Split, SplitSpec,
};
use voxfc::eval::{
    evaluate, export_embeddings, natural_eer, natural_embeddings, project_2d, synthesize_eval_set, EmbeddingRow,
    EmbeddingTag, EvalReport, Protocol,
};
use voxfc::speaker::{train_verifier, VerifierModel};
use voxfc::synth::{text_to_ids, PrenetDropout, SynthesisLimits, SynthesizerModel};
use voxfc::training::{fit_mel_stats, load_prerequisites, run_training, Phase, RunOutputs};
use voxfc::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "voxfc", version, about = "Multispeaker TTS with a speaker-verifier feedback loss")]
struct Cli {
    /// TOML lab config; omitted keys keep the toy defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of whatever the subcommand randomises.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run batch loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a manifest from a corpus directory.
    PrepareData(PrepareData),
    /// Generate the synthetic tone corpus.
    MakeToy(MakeToy),
    /// Train the speaker verifier on the train split.
    TrainVerifier(TrainVerifier),
    /// Train the synthesizer without the feedback term.
    TrainBaseline(TrainSynth),
    /// Continue from a baseline with the feedback term.
    TrainFc(TrainSynth),
    /// Synthesize one sentence for a reference voice.
    Synthesize(Synthesize),
    /// SV-EER and average cosine on a manifest split.
    Evaluate(Evaluate),
    /// Write natural and synthesized embeddings (plus optional PCA coordinates).
    ExportEmbeddings(ExportEmbeddings),
}

#[derive(Args)]
struct PrepareData {
    #[arg(long)]
    layout: CorpusLayout,
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_speakers: Option<usize>,
    #[arg(long)]
    val_per_speaker: Option<usize>,
    /// Comma-separated speaker ids to keep.
    #[arg(long, value_delimiter = ',')]
    speakers: Vec<String>,
}

#[derive(Args)]
struct MakeToy {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utts: Option<usize>,
}

#[derive(Args)]
struct TrainVerifier {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct TrainSynth {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    verifier: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Starting synthesizer (required for train-fc; continues a baseline otherwise).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Metrics TSV; defaults to `<out>.metrics.tsv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct Synthesize {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    verifier: PathBuf,
    #[arg(long)]
    text: String,
    /// WAV whose speaker to clone.
    #[arg(long)]
    reference: PathBuf,
    /// Output MELS file.
    #[arg(long)]
    out: PathBuf,
    /// Also write a Griffin-Lim WAV here.
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    gl_iters: usize,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    verifier: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "dep")]
    protocol: Protocol,
    #[arg(long, default_value = "val")]
    split: Split,
    #[arg(long)]
    n_trials: Option<usize>,
    /// System label for the table row; defaults to the checkpoint stem.
    #[arg(long)]
    name: Option<String>,
    /// Also write the key-value report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExportEmbeddings {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    verifier: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dep")]
    protocol: Protocol,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Also write 2-D PCA coordinates here.
    #[arg(long)]
    pca: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::toy(),
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let seed = cli.seed;
    match cli.command {
        Command::PrepareData(a) => prepare_data(a, &cfg, seed),
        Command::MakeToy(a) => make_toy(a, &cfg, seed),
        Command::TrainVerifier(a) => train_verifier_cmd(a, &cfg, seed, exec),
        Command::TrainBaseline(a) => train_synth(a, Phase::Baseline, &cfg, seed, exec),
        Command::TrainFc(a) => train_synth(a, Phase::Fc, &cfg, seed, exec),
        Command::Synthesize(a) => synthesize(a, &cfg, seed),
        Command::Evaluate(a) => evaluate_cmd(a, &cfg, seed, exec),
        Command::ExportEmbeddings(a) => export_cmd(a, &cfg, seed, exec),
    }
}

fn prepare_data(a: PrepareData, cfg: &LabConfig, seed: Option<u64>) -> Result<()> {
    let split = SplitSpec {
        test_speakers: a.test_speakers.unwrap_or(cfg.split.test_speakers),
        val_per_speaker: a.val_per_speaker.unwrap_or(cfg.split.val_per_speaker),
        speakers: if a.speakers.is_empty() { cfg.split.speakers.clone() } else { a.speakers },
    };
    let (manifest, report) = build_manifest(&a.root, a.layout, &split, seed.unwrap_or(0))?;
    manifest.write(&a.out)?;
    eprintln!("{}", report.summary());
    println!("manifest={} entries={}", a.out.display(), manifest.entries.len());
    Ok(())
}

fn make_toy(a: MakeToy, cfg: &LabConfig, seed: Option<u64>) -> Result<()> {
    let mut spec = cfg.toy.clone();
    spec.n_speakers = a.speakers.unwrap_or(spec.n_speakers);
    spec.utterances_per_speaker = a.utts.unwrap_or(spec.utterances_per_speaker);
    spec.seed = seed.unwrap_or(spec.seed);
    let m = make_toy_dataset(&spec, &a.out)?;
    println!("manifest={} entries={}", a.out.join("manifest.tsv").display(), m.entries.len());
    Ok(())
}

fn split_ids(manifest: &DatasetManifest, split: Split) -> Vec<(String, String)> {
    manifest
        .split(split)
        .iter()
        .map(|e| (e.utt_id.clone(), e.speaker_id.clone()))
        .collect()
}

fn train_verifier_cmd(a: TrainVerifier, cfg: &LabConfig, seed: Option<u64>, exec: Exec) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let train = manifest.split(Split::Train);
    let index = speaker_index(&train);
    let mut arch = cfg.verifier.clone();
    arch.n_speakers = index.len();
    let mut tcfg = cfg.verifier_train.clone();
    tcfg.seed = seed.unwrap_or(tcfg.seed);
    tcfg.steps = a.steps.unwrap_or(tcfg.steps);

    let mels = load_mels(&manifest, &train, &cfg.mel, exec)?;
    let data = labelled_mels(&train, &mels, &index)?;
    let mut model = VerifierModel::new(arch, tcfg.seed)?;
    let report = train_verifier(&mut model, &data, &tcfg, exec, |step, loss| {
        if (step + 1) % 50 == 0 {
            eprintln!("verifier step {} loss {loss:.4}", step + 1);
        }
    })?;
    model.save(&a.out)?;
    println!("train_accuracy={:.4}", report.train_accuracy);

    let val = manifest.split(Split::Val);
    if !val.is_empty() {
        let val_mels = load_mels(&manifest, &val, &cfg.mel, exec)?;
        let embs = natural_embeddings(&model, &val_mels, exec)?;
        let eer = natural_eer(&embs, &split_ids(&manifest, Split::Val), cfg.eval.n_trials, cfg.eval.seed)?;
        println!("natural_eer_percent={:.4}", eer.eer_percent);
    }
    Ok(())
}

fn train_synth(a: TrainSynth, phase: Phase, cfg: &LabConfig, seed: Option<u64>, exec: Exec) -> Result<()> {
    let mut tcfg = match phase {
        Phase::Baseline => cfg.baseline.clone(),
        Phase::Fc => cfg.fc.clone(),
    };
    tcfg.seed = seed.unwrap_or(tcfg.seed);
    tcfg.total_steps = a.steps.unwrap_or(tcfg.total_steps);
    let (verifier, init) = load_prerequisites(phase, Some(&a.verifier), a.init.as_deref())?;

    let manifest = DatasetManifest::read(&a.manifest)?;
    let train = manifest.split(Split::Train);
    let mels = load_mels(&manifest, &train, &cfg.mel, exec)?;
    let examples = train_examples(&train, &mels, &verifier, exec)?;
    let mut synth = match init {
        Some(s) => s,
        None => {
            let mut s = SynthesizerModel::new(cfg.synthesizer.clone(), tcfg.seed)?;
            let (mean, std) = fit_mel_stats(&examples)?;
            s.set_mel_stats(mean, std)?;
            s
        }
    };
    let outputs = RunOutputs {
        metrics: a.metrics.unwrap_or_else(|| with_suffix(&a.out, ".metrics.tsv")),
        checkpoint: a.out,
    };
    let history = run_training(&mut synth, &verifier, &examples, &tcfg, &outputs, exec, |step, b| {
        if (step + 1) % 100 == 0 {
            eprintln!(
                "{} step {} total {:.4} mse_post {:.4} spk {:.4}",
                phase.name(),
                step + 1,
                b.total,
                b.mse_post,
                b.speaker_loss
            );
        }
    })?;
    if let Some(last) = history.last() {
        println!("final_total={:.6} final_speaker_loss={:.6}", last.total, last.speaker_loss);
    }
    println!("checkpoint={}", outputs.checkpoint.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synthesize(a: Synthesize, cfg: &LabConfig, seed: Option<u64>) -> Result<()> {
    let synth = SynthesizerModel::load(&a.system)?;
    let verifier = VerifierModel::load(&a.verifier)?;
    let reference = load_mel(&a.reference, &cfg.mel)?;
    let emb = verifier.embed_frames(&reference)?;
    let text = text_to_ids(&a.text)?;
    if text.unknown_count > 0 {
        eprintln!("warning: dropped {} characters outside the vocabulary", text.unknown_count);
    }
    let limits = SynthesisLimits::for_text(synth.arch(), text.len());
    let mut dropout = PrenetDropout::seeded(seed.unwrap_or(0));
    let out = synth.synthesize(&text.ids, &emb, limits, &mut dropout)?;
    write_mels(&a.out, &out.mel_post)?;
    if let Some(wav) = &a.wav {
        let mel = MelSpectrogram {
            frames: out.mel_post.clone(),
            config: cfg.mel.clone(),
        };
        write_wav(wav, &griffin_lim_invert(&mel, a.gl_iters)?)?;
    }
    println!("frames={} stopped_naturally={}", out.n_frames(), out.stopped_naturally);
    Ok(())
}

struct EvalInputs {
    manifest: DatasetManifest,
    synth: SynthesizerModel,
    verifier: VerifierModel,
    natural: std::collections::BTreeMap<String, voxfc::speaker::SpeakerEmbedding>,
}

fn eval_inputs(system: &Path, verifier: &Path, manifest: &Path, split: Split, cfg: &LabConfig, exec: Exec) -> Result<EvalInputs> {
    let manifest = DatasetManifest::read(manifest)?;
    let synth = SynthesizerModel::load(system)?;
    let verifier = VerifierModel::load(verifier)?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!("manifest has no {split} utterances")));
    }
    let mels = load_mels(&manifest, &entries, &cfg.mel, exec)?;
    let natural = natural_embeddings(&verifier, &mels, exec)?;
    Ok(EvalInputs {
        manifest,
        synth,
        verifier,
        natural,
    })
}

fn evaluate_cmd(a: Evaluate, cfg: &LabConfig, seed: Option<u64>, exec: Exec) -> Result<()> {
    let inp = eval_inputs(&a.system, &a.verifier, &a.manifest, a.split, cfg, exec)?;
    let seed = seed.unwrap_or(cfg.eval.seed);
    let items = eval_items(&inp.manifest.split(a.split));
    let set = synthesize_eval_set(&items, &inp.natural, &inp.synth, &inp.verifier, a.protocol, seed, exec)?;
    if set.skipped_speakers > 0 {
        eprintln!("warning: skipped {} single-utterance speakers", set.skipped_speakers);
    }
    let report = evaluate(&set, &inp.natural, a.n_trials.unwrap_or(cfg.eval.n_trials), seed)?;
    let kv = report.to_key_value();
    if let Some(p) = &a.report {
        std::fs::write(p, &kv).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    let name = a
        .name
        .unwrap_or_else(|| a.system.file_stem().map_or("system".into(), |s| s.to_string_lossy().into_owned()));
    print!("{kv}");
    println!("{}", EvalReport::table_header());
    println!("{}", report.table_row(&name, a.split.name()));
    Ok(())
}

fn export_cmd(a: ExportEmbeddings, cfg: &LabConfig, seed: Option<u64>, exec: Exec) -> Result<()> {
    let inp = eval_inputs(&a.system, &a.verifier, &a.manifest, a.split, cfg, exec)?;
    let entries = inp.manifest.split(a.split);
    let items = eval_items(&entries);
    let set = synthesize_eval_set(
        &items,
        &inp.natural,
        &inp.synth,
        &inp.verifier,
        a.protocol,
        seed.unwrap_or(cfg.eval.seed),
        exec,
    )?;
    let mut rows: Vec<EmbeddingRow> = entries
        .iter()
        .map(|e| EmbeddingRow {
            utt_id: e.utt_id.clone(),
            speaker_id: e.speaker_id.clone(),
            tag: EmbeddingTag::Natural,
            values: inp.natural[&e.utt_id].0.clone(),
        })
        .collect();
    rows.extend(set.records.iter().map(|r| EmbeddingRow {
        utt_id: r.utt_id.clone(),
        speaker_id: r.speaker_id.clone(),
        tag: EmbeddingTag::Synthesized,
        values: r.synth_emb.0.clone(),
    }));
    export_embeddings(&rows, &a.out)?;
    if let Some(p) = &a.pca {
        let pts: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
        let proj = project_2d(&pts)?;
        let mut text = String::from("utt_id\tspeaker_id\ttag\tpc1\tpc2\n");
        for (i, r) in rows.iter().enumerate() {
            let xy = proj.row_slice(i);
            text.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.utt_id, r.speaker_id, r.tag, xy[0], xy[1]));
        }
        std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    println!("rows={}", rows.len());
    Ok(())
}
