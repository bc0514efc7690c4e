//! Stage orchestration: per-utterance inference in the fixed
//! augment → encode → quantize → bottleneck → shuffle → detect order, and the
//! end-to-end experiment that trains, scores, probes and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdm::{train_cdm, write_tokens, CdmEpoch, CdmModel, MockMelTeacher, SemanticTeacher, TokenStreams, TrainClip};
use crate::channel::{augment, ChannelConfig, CodecId};
use crate::config::VeilConfig;
use crate::corpus::{synth_corpus, transcript_of, Manifest, ManifestRow, Split};
use crate::detector::{train_detector, utterance_salt, DetectorEpoch, DetectorModel, DetectorTraining, Label, LabelledClip};
use crate::error::{Error, Result};
use crate::metrics::intelligibility_proxy;
use crate::privacy::{shuffle, PrivacyConfig};
use crate::probe::{probe_features, recovery_probe, ProbeSource};
use crate::report::{
    detection_summary, scores_to_csv, text_scores, transcripts_to_tsv, IntelligibilitySummary, Report, ScoreRow,
    Transcripts,
};
use crate::signal::AudioBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Augment,
    Encode,
    Quantize,
    Bottleneck,
    Shuffle,
    Detect,
}

/// The only admissible stage order; stages may be skipped, never swapped.
pub const STAGE_ORDER: [Stage; 6] = [
    Stage::Augment,
    Stage::Encode,
    Stage::Quantize,
    Stage::Bottleneck,
    Stage::Shuffle,
    Stage::Detect,
];

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Augment => "augment",
            Stage::Encode => "encode",
            Stage::Quantize => "quantize",
            Stage::Bottleneck => "bottleneck",
            Stage::Shuffle => "shuffle",
            Stage::Detect => "detect",
        };
        f.write_str(s)
    }
}

/// Errors unless `stages` is strictly increasing in [`STAGE_ORDER`].
pub fn assert_stage_order(stages: &[Stage]) -> Result<()> {
    for w in stages.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Contract(format!("stage `{}` ran before `{}`", w[0], w[1])));
        }
    }
    Ok(())
}

fn staged<T>(stage: Stage, utterance: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.to_string(),
        utterance: utterance.to_string(),
        source: Box::new(e),
    })
}

/// Outcome of one utterance through the pipeline.
#[derive(Clone, Debug)]
pub struct Inference {
    pub tokens: TokenStreams,
    pub probability: f64,
    pub codec: Option<CodecId>,
    pub stages: Vec<Stage>,
}

/// Runs one utterance. `augmentation` is for training-time replication
/// only; inference passes `None`.
pub fn infer(
    utterance_id: &str,
    audio: &AudioBuffer,
    cdm: &CdmModel,
    detector: &DetectorModel,
    privacy: &PrivacyConfig,
    augmentation: Option<(&ChannelConfig, u64)>,
) -> Result<Inference> {
    let mut stages = Vec::with_capacity(STAGE_ORDER.len());
    let mut codec = None;
    let owned;
    let input = match augmentation {
        Some((cfg, seed)) => {
            stages.push(Stage::Augment);
            let (a, c) = staged(Stage::Augment, utterance_id, augment(audio, cfg, seed))?;
            codec = Some(c);
            owned = a;
            &owned
        }
        None => audio,
    };
    stages.push(Stage::Encode);
    let e = staged(Stage::Encode, utterance_id, cdm.encode(input))?;
    stages.push(Stage::Quantize);
    let tokens = staged(Stage::Quantize, utterance_id, cdm.quantize(&e))?;
    stages.push(Stage::Bottleneck);
    let abar = staged(
        Stage::Bottleneck,
        utterance_id,
        detector.bottleneck_eval(&tokens.acoustic, tokens.frames),
    )?;
    let abar = match staged(Stage::Shuffle, utterance_id, privacy.record(tokens.frames, utterance_salt(utterance_id)))? {
        Some(r) => {
            stages.push(Stage::Shuffle);
            staged(
                Stage::Shuffle,
                utterance_id,
                shuffle(&abar, tokens.dim, tokens.frames, r.mode, r.window_frames),
            )?
            .0
        }
        None => abar,
    };
    stages.push(Stage::Detect);
    let score = staged(Stage::Detect, utterance_id, detector.detect(&abar, tokens.frames))?;
    assert_stage_order(&stages)?;
    Ok(Inference {
        tokens,
        probability: score.probability,
        codec,
        stages,
    })
}

fn load_row(row: &ManifestRow) -> Result<AudioBuffer> {
    staged(Stage::Encode, &row.utterance_id, row.load_audio())
}

/// Scores `rows` without augmentation. When `out_dir` is set, token files
/// go to `tokens/<id>.rvqt` and scores to `scores.csv`.
pub fn run_inference(
    rows: &[&ManifestRow],
    cdm: &CdmModel,
    detector: &DetectorModel,
    privacy: &PrivacyConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<ScoreRow>> {
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d.join("tokens"))?;
    }
    let mut scores = Vec::with_capacity(rows.len());
    for row in rows {
        let audio = load_row(row)?;
        let inf = infer(&row.utterance_id, &audio, cdm, detector, privacy, None)?;
        if let Some(d) = out_dir {
            let f = std::fs::File::create(d.join("tokens").join(format!("{}.rvqt", row.utterance_id)))?;
            write_tokens(std::io::BufWriter::new(f), &inf.tokens)?;
        }
        scores.push(ScoreRow {
            utterance_id: row.utterance_id.clone(),
            label: row.label,
            probability: inf.probability,
        });
    }
    if let Some(d) = out_dir {
        std::fs::write(d.join("scores.csv"), scores_to_csv(&scores))?;
    }
    Ok(scores)
}

pub fn labelled_clips(rows: &[&ManifestRow]) -> Result<Vec<LabelledClip>> {
    rows.iter()
        .map(|r| {
            Ok(LabelledClip {
                key: r.utterance_id.clone(),
                audio: load_row(r)?,
                label: r.label,
            })
        })
        .collect()
}

/// Trains the codec on every clip of the training split, both classes.
pub fn train_codec(manifest: &Manifest, cfg: &VeilConfig) -> Result<(CdmModel, Vec<CdmEpoch>)> {
    let cfg = cfg.resolved();
    let clips: Vec<TrainClip> = manifest
        .split(Split::Train)
        .map(|r| {
            Ok(TrainClip {
                key: r.utterance_id.clone(),
                audio: load_row(r)?,
            })
        })
        .collect::<Result<_>>()?;
    let teacher = MockMelTeacher::new(cfg.cdm.teacher_dim);
    train_cdm(&clips, &teacher as &dyn SemanticTeacher, cfg.cdm.clone(), &cfg.cdm_train)
}

/// Trains the detector on the training split with augmentation; the dev
/// split is the held-out set.
pub fn train_detector_on(
    manifest: &Manifest,
    cdm: &CdmModel,
    cfg: &VeilConfig,
) -> Result<(DetectorModel, Vec<DetectorEpoch>)> {
    let cfg = cfg.resolved();
    let train = labelled_clips(&manifest.split(Split::Train).collect::<Vec<_>>())?;
    let dev = labelled_clips(&manifest.split(Split::Dev).collect::<Vec<_>>())?;
    let setup = DetectorTraining {
        cdm,
        privacy: cfg.privacy,
        channel: cfg.channel.clone(),
        config: cfg.detector.clone(),
        seed: cfg.seeds.detector,
    };
    train_detector(&train, &dev, &setup)
}

/// Probe accuracies per source plus test-split hypothesis transcripts.
pub fn run_probes(
    manifest: &Manifest,
    cdm: &CdmModel,
    cfg: &VeilConfig,
    sources: &[ProbeSource],
) -> Result<BTreeMap<ProbeSource, (crate::probe::ProbeResult, Transcripts)>> {
    let cfg = cfg.resolved();
    let rows_of = |split| -> Result<Vec<(&ManifestRow, AudioBuffer, TokenStreams)>> {
        manifest
            .split(split)
            .map(|r| {
                if r.symbols.is_none() {
                    return Err(Error::Config(format!("{} lacks a symbol sequence", r.utterance_id)));
                }
                let audio = load_row(r)?;
                let tokens = staged(Stage::Encode, &r.utterance_id, cdm.tokenize(&audio))?;
                Ok((r, audio, tokens))
            })
            .collect()
    };
    let train = rows_of(Split::Train)?;
    let test = rows_of(Split::Test)?;
    let classes = cfg.synth.vocabulary;
    let mut out = BTreeMap::new();
    for &source in sources {
        let feats = |set: &[(&ManifestRow, AudioBuffer, TokenStreams)]| -> Result<Vec<_>> {
            set.iter()
                .map(|(r, a, t)| {
                    let symbols = r.symbols.as_deref().unwrap_or_default();
                    let n = symbols.len().min(t.frames);
                    staged(
                        Stage::Quantize,
                        &r.utterance_id,
                        probe_features(source, &r.utterance_id, a, t, &symbols[..n], &cfg.privacy, utterance_salt(&r.utterance_id)),
                    )
                })
                .collect()
        };
        let (result, predictions) = recovery_probe(source, &feats(&train)?, &feats(&test)?, classes, &cfg.probe)?;
        let hyps = test
            .iter()
            .zip(&predictions)
            .map(|((r, _, _), p)| (r.utterance_id.clone(), transcript_of(p)))
            .collect();
        log::info!("probe {source}: accuracy {:.3}", result.accuracy);
        out.insert(source, (result, hyps));
    }
    Ok(out)
}

/// Proxy intelligibility of full and acoustic-only shuffled decodes over the
/// first `n` bonafide test utterances.
pub fn intelligibility(manifest: &Manifest, cdm: &CdmModel, privacy: &PrivacyConfig, n: usize) -> Result<IntelligibilitySummary> {
    let on = PrivacyConfig {
        shuffle: true,
        ..*privacy
    };
    let (mut reference, mut full, mut shuffled, mut count) = (0.0, 0.0, 0.0, 0usize);
    for r in manifest.split(Split::Test).filter(|r| r.label == Label::Bonafide).take(n) {
        let audio = load_row(r)?;
        let t = staged(Stage::Encode, &r.utterance_id, cdm.tokenize(&audio))?;
        let trimmed = AudioBuffer {
            samples: audio.samples[..t.frames * crate::cdm::HOP].to_vec(),
            sample_rate: audio.sample_rate,
        };
        let whole = cdm.decode(&t)?;
        let record = on
            .record(t.frames, utterance_salt(&r.utterance_id))?
            .ok_or_else(|| Error::Contract("shuffle record missing".into()))?;
        let (acoustic, _) = shuffle(&t.acoustic, t.acoustic_channels(), t.frames, record.mode, record.window_frames)?;
        let shuffled_tokens = TokenStreams {
            acoustic,
            ..t.clone()
        };
        let only = cdm.decode_features(&shuffled_tokens.acoustic_sum(), t.dim, t.frames)?;
        reference += intelligibility_proxy(&trimmed, &trimmed)?;
        full += intelligibility_proxy(&trimmed, &whole)?;
        shuffled += intelligibility_proxy(&trimmed, &only)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("no bonafide test utterances for the intelligibility proxy".into()));
    }
    let c = count as f64;
    Ok(IntelligibilitySummary {
        reference: reference / c,
        full_decode: full / c,
        acoustic_shuffled_decode: shuffled / c,
        n: count,
    })
}

/// Everything an end-to-end run produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub manifest: Manifest,
    pub cdm_history: Vec<CdmEpoch>,
    pub detector_history: Vec<DetectorEpoch>,
    pub scores: Vec<ScoreRow>,
    pub report: Report,
    pub dir: PathBuf,
}

/// Synthesizes the corpus, trains codec and detector, scores the test
/// split, runs every probe and the intelligibility proxy, and writes
/// `report.json`. All outputs are pure functions of the config.
pub fn run_experiment(cfg: &VeilConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dir = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let manifest = synth_corpus(&cfg.synth, dir.join("corpus"))?;
    let (cdm, cdm_history) = train_codec(&manifest, &cfg)?;
    cdm.save(dir.join("cdm.ckpt"))?;
    let (detector, detector_history) = train_detector_on(&manifest, &cdm, &cfg)?;
    detector.save(dir.join("detector.ckpt"))?;
    std::fs::write(
        dir.join("history.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "cdm": cdm_history,
            "detector": detector_history,
        }))?,
    )?;
    let test: Vec<&ManifestRow> = manifest.split(Split::Test).collect();
    let scores = run_inference(&test, &cdm, &detector, &cfg.privacy, Some(&dir))?;

    let mut report = Report::new(&cfg)?;
    report.detection = Some(detection_summary(&scores, &cfg.tdcf)?);
    let references: Transcripts = test
        .iter()
        .filter_map(|r| r.transcript.clone().map(|t| (r.utterance_id.clone(), t)))
        .collect();
    std::fs::write(dir.join("transcripts.tsv"), transcripts_to_tsv(&references))?;
    let probes = run_probes(&manifest, &cdm, &cfg, &ProbeSource::ALL)?;
    for (source, (result, hyps)) in probes {
        std::fs::write(dir.join(format!("hypotheses_{source}.tsv")), transcripts_to_tsv(&hyps))?;
        if !references.is_empty() {
            report.transcripts.insert(source.to_string(), text_scores(&references, &hyps)?);
        }
        report.probes.insert(source.to_string(), result);
    }
    report.intelligibility = Some(intelligibility(&manifest, &cdm, &cfg.privacy, cfg.intelligibility.utterances)?);
    report.save(dir.join("report.json"))?;
    Ok(ExperimentOutput {
        manifest,
        cdm_history,
        detector_history,
        scores,
        report,
        dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order_guard() {
        assert_stage_order(&STAGE_ORDER).unwrap();
        assert_stage_order(&[Stage::Encode, Stage::Quantize, Stage::Bottleneck, Stage::Detect]).unwrap();
        assert!(matches!(assert_stage_order(&[Stage::Shuffle, Stage::Bottleneck]), Err(Error::Contract(_))));
        assert!(assert_stage_order(&[Stage::Encode, Stage::Encode]).is_err());
    }

    #[test]
    fn inference_skips_augmentation_and_names_failures() {
        let cdm = CdmModel::new(crate::cdm::CdmConfig::default(), 1).unwrap();
        let det = DetectorModel::new(crate::detector::DetectorConfig::default(), cdm.config.dim, 2).unwrap();
        let audio = crate::signal::sine(300.0, 0.3, 0.5, 16_000);
        let inf = infer("u1", &audio, &cdm, &det, &PrivacyConfig::default(), None).unwrap();
        assert_eq!(inf.stages, [Stage::Encode, Stage::Quantize, Stage::Bottleneck, Stage::Shuffle, Stage::Detect]);
        assert!(inf.codec.is_none());
        let off = infer("u1", &audio, &cdm, &det, &PrivacyConfig::unshuffled(), None).unwrap();
        assert!(!off.stages.contains(&Stage::Shuffle));
        let aug = infer("u1", &audio, &cdm, &det, &PrivacyConfig::default(), Some((&ChannelConfig::augmentation(), 3))).unwrap();
        assert_eq!(aug.stages[0], Stage::Augment);
        let short = crate::signal::sine(300.0, 0.3, 0.01, 16_000);
        match infer("tiny", &short, &cdm, &det, &PrivacyConfig::default(), None) {
            Err(Error::Stage { stage, utterance, .. }) => assert_eq!((stage.as_str(), utterance.as_str()), ("encode", "tiny")),
            other => panic!("{other:?}"),
        }
    }
}
