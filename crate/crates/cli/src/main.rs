//! `veil`: corpus synthesis, training, tokenization, detection and reporting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use veil_core::cdm::{read_tokens, write_tokens, CdmModel};
use veil_core::channel::{codec_roundtrip, CodecId};
use veil_core::config::{Seeds, VeilConfig};
use veil_core::corpus::{synth_corpus, Manifest, Split};
use veil_core::detector::{utterance_salt, DetectorModel};
use veil_core::pipeline::{infer, run_experiment, run_inference, run_probes, train_codec, train_detector_on};
use veil_core::privacy::{permutation_count, recovery_probability, shuffle, ShuffleMode};
use veil_core::probe::{ProbeResult, ProbeSource};
use veil_core::report::{
    detection_summary, scores_from_csv, scores_to_csv, text_scores, transcripts_from_tsv, transcripts_to_tsv, Report,
    ScoreRow, Transcripts,
};
use veil_core::signal::{load_wav, resample, AudioBuffer, SAMPLE_RATE};

#[derive(Parser)]
#[command(name = "veil", version, about = "Content-private deepfake detection over shuffled acoustic tokens")]
struct Cli {
    /// TOML config with stage settings and named seeds.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed overriding every named seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "veil-out")]
    out: PathBuf,
    /// Channel codec applied to input audio before tokenization
    /// (none, mu_law, a_law, bandlimit_gsm_like, external:NAME).
    #[arg(long, global = true)]
    codec: Option<CodecId>,
    /// Shuffle control: on, off, inverse, random or random:SEED.
    #[arg(long, global = true)]
    shuffle: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (WAVs and manifest.tsv).
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the codec on the training split.
    TrainCdm {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train bottleneck and detector on frozen codec tokens.
    TrainDetector {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cdm: PathBuf,
    },
    /// Encode WAV files into token files.
    Tokenize {
        #[arg(long)]
        cdm: PathBuf,
        wavs: Vec<PathBuf>,
    },
    /// Window-shuffle the acoustic stream of token files.
    Shuffle { tokens: Vec<PathBuf> },
    /// Score WAV files; prints the score CSV.
    Detect {
        #[arg(long)]
        cdm: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        wavs: Vec<PathBuf>,
    },
    /// Score a manifest split and write scores.csv and report.json.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cdm: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Content-recovery probes on the manifest's symbol sequences.
    Probe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cdm: PathBuf,
        /// Sources to probe (default: all).
        #[arg(long = "source")]
        sources: Vec<ProbeSource>,
    },
    /// Exact shuffle permutation count and recovery probability.
    Permcount {
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
    /// Consolidate scores, transcripts and probe outputs into one report.
    Report {
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Reference transcripts TSV.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Hypothesis transcripts as SOURCE=PATH.
        #[arg(long = "hypotheses")]
        hypotheses: Vec<String>,
        /// probes.json written by `veil probe`.
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Full run: synth, train-cdm, train-detector, eval, probe, report.
    Run,
}

fn load_config(cli: &Cli) -> Result<VeilConfig> {
    let mut cfg = match &cli.config {
        Some(p) => VeilConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => VeilConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = Seeds::from_root(s);
    }
    if let Some(s) = &cli.shuffle {
        match s.as_str() {
            "on" => cfg.privacy.shuffle = true,
            "off" => cfg.privacy.shuffle = false,
            mode => {
                cfg.privacy.shuffle = true;
                cfg.privacy.mode = mode.parse::<ShuffleMode>()?;
                if let ShuffleMode::Random { seed } = cfg.privacy.mode {
                    if mode.contains(':') {
                        cfg.seeds.shuffle = seed;
                    }
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn read_audio(path: &Path, codec: Option<&CodecId>, cfg: &VeilConfig) -> Result<AudioBuffer> {
    let mut a = load_wav(path).with_context(|| format!("reading {}", path.display()))?;
    if a.sample_rate != SAMPLE_RATE {
        a = resample(&a, SAMPLE_RATE)?;
    }
    if let Some(c) = codec {
        a = codec_roundtrip(&a, c, &cfg.channel)?;
    }
    Ok(a)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn probe_outputs(
    out: &Path,
    probes: BTreeMap<ProbeSource, (ProbeResult, Transcripts)>,
) -> Result<BTreeMap<String, ProbeResult>> {
    let mut results = BTreeMap::new();
    for (source, (r, hyps)) in probes {
        std::fs::write(out.join(format!("hypotheses_{source}.tsv")), transcripts_to_tsv(&hyps))?;
        println!("{source}: accuracy {:.4} (chance {:.4})", r.accuracy, r.chance);
        results.insert(source.to_string(), r);
    }
    Ok(results)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out)?;
    match &cli.command {
        Command::Synth { n } => {
            let mut synth = cfg.synth.clone();
            if let Some(n) = n {
                synth.n_utterances = *n;
            }
            let m = synth_corpus(&synth, &out)?;
            println!("{} utterances, manifest {}", m.rows.len(), out.join("manifest.tsv").display());
        }
        Command::TrainCdm { manifest } => {
            let m = Manifest::load(manifest)?;
            let (model, history) = train_codec(&m, &cfg)?;
            model.save(out.join("cdm.ckpt"))?;
            write_json(&out.join("cdm_history.json"), &history)?;
            println!("codec with {} parameters saved to {}", model.parameter_count(), out.join("cdm.ckpt").display());
        }
        Command::TrainDetector { manifest, cdm } => {
            let m = Manifest::load(manifest)?;
            let cdm = CdmModel::load(cdm)?;
            let (model, history) = train_detector_on(&m, &cdm, &cfg)?;
            model.save(out.join("detector.ckpt"))?;
            write_json(&out.join("detector_history.json"), &history)?;
            if let Some(last) = history.last() {
                println!("held-out EER after {} epochs: {:.4}", last.epoch, last.heldout_eer);
            }
        }
        Command::Tokenize { cdm, wavs } => {
            let cdm = CdmModel::load(cdm)?;
            for w in wavs {
                let t = cdm.tokenize(&read_audio(w, cli.codec.as_ref(), &cfg)?)?;
                let p = out.join(format!("{}.rvqt", stem(w)));
                write_tokens(BufWriter::new(File::create(&p)?), &t)?;
                println!("{} frames -> {}", t.frames, p.display());
            }
        }
        Command::Shuffle { tokens } => {
            if !cfg.privacy.shuffle {
                bail!("shuffling is disabled by --shuffle off");
            }
            for p in tokens {
                let mut t = read_tokens(BufReader::new(File::open(p)?))?;
                let id = stem(p);
                let record = cfg
                    .privacy
                    .record(t.frames, utterance_salt(&id))?
                    .context("shuffle record")?;
                let (a, record) = shuffle(&t.acoustic, t.acoustic_channels(), t.frames, record.mode, record.window_frames)?;
                t.acoustic = a;
                let tp = out.join(format!("{id}.shuffled.rvqt"));
                write_tokens(BufWriter::new(File::create(&tp)?), &t)?;
                std::fs::write(out.join(format!("{id}.perm.json")), record.to_json()?)?;
                println!("{} -> {}", p.display(), tp.display());
            }
        }
        Command::Detect { cdm, detector, wavs } => {
            let cdm = CdmModel::load(cdm)?;
            let det = DetectorModel::load(detector)?;
            println!("utterance_id,probability,label");
            for w in wavs {
                let id = stem(w);
                let inf = infer(&id, &read_audio(w, cli.codec.as_ref(), &cfg)?, &cdm, &det, &cfg.privacy, None)?;
                let label = if inf.probability >= 0.5 { "bonafide" } else { "deepfake" };
                println!("{id},{},{label}", inf.probability);
            }
        }
        Command::Eval { manifest, cdm, detector, split } => {
            let m = Manifest::load(manifest)?;
            let split: Split = split.parse()?;
            let cdm = CdmModel::load(cdm)?;
            let det = DetectorModel::load(detector)?;
            let rows: Vec<_> = m.split(split).collect();
            let scores = if let Some(c) = &cli.codec {
                // evaluation under a transmission channel
                let mut s = Vec::with_capacity(rows.len());
                for r in &rows {
                    let a = codec_roundtrip(&r.load_audio()?, c, &cfg.channel)?;
                    let inf = infer(&r.utterance_id, &a, &cdm, &det, &cfg.privacy, None)?;
                    s.push(ScoreRow {
                        utterance_id: r.utterance_id.clone(),
                        label: r.label,
                        probability: inf.probability,
                    });
                }
                std::fs::write(out.join("scores.csv"), scores_to_csv(&s))?;
                s
            } else {
                run_inference(&rows, &cdm, &det, &cfg.privacy, Some(&out))?
            };
            let mut report = Report::new(&cfg)?;
            let d = detection_summary(&scores, &cfg.tdcf)?;
            println!("EER {:.4}  min t-DCF {:.4}  ({} bonafide, {} spoof)", d.eer, d.min_t_dcf, d.n_bonafide, d.n_spoof);
            report.detection = Some(d);
            report.save(out.join("report.json"))?;
        }
        Command::Probe { manifest, cdm, sources } => {
            let m = Manifest::load(manifest)?;
            let cdm = CdmModel::load(cdm)?;
            let sources = if sources.is_empty() { ProbeSource::ALL.to_vec() } else { sources.clone() };
            let refs: Transcripts = m
                .split(Split::Test)
                .filter_map(|r| r.transcript.clone().map(|t| (r.utterance_id.clone(), t)))
                .collect();
            std::fs::write(out.join("transcripts.tsv"), transcripts_to_tsv(&refs))?;
            let results = probe_outputs(&out, run_probes(&m, &cdm, &cfg, &sources)?)?;
            write_json(&out.join("probes.json"), &results)?;
        }
        Command::Permcount { frames, window } => {
            let c = permutation_count(*frames, *window)?;
            let p = recovery_probability(*frames, *window)?;
            let (cm, ce) = c.scientific();
            let (pm, pe) = p.scientific();
            println!("frames {frames}, window {window}");
            println!("permutations = {}", c.exact);
            println!("             ≈ {cm:.4}e{ce} (log10 {:.3})", c.log10);
            println!("recovery probability ≈ {pm:.4}e{pe}");
        }
        Command::Report {
            scores,
            transcripts,
            hypotheses,
            probes,
        } => {
            let mut report = Report::new(&cfg)?;
            if let Some(s) = scores {
                let rows = scores_from_csv(&std::fs::read_to_string(s)?)?;
                report.detection = Some(detection_summary(&rows, &cfg.tdcf)?);
            }
            if !hypotheses.is_empty() {
                let refs = match transcripts {
                    Some(t) => transcripts_from_tsv(&std::fs::read_to_string(t)?)?,
                    None => bail!("--hypotheses needs --transcripts"),
                };
                for h in hypotheses {
                    let (source, path) = h.split_once('=').context("--hypotheses expects SOURCE=PATH")?;
                    let hyps = transcripts_from_tsv(&std::fs::read_to_string(path)?)?;
                    report.transcripts.insert(source.to_string(), text_scores(&refs, &hyps)?);
                }
            }
            if let Some(p) = probes {
                report.probes = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            }
            report.save(out.join("report.json"))?;
            print!("{}", report.to_json()?);
        }
        Command::Run => {
            let r = run_experiment(&cfg, &out)?;
            print!("{}", r.report.to_json()?);
        }
    }
    Ok(())
}

