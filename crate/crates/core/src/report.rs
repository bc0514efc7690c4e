//! Score and transcript file formats and the consolidated run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Seeds, VeilConfig};
use crate::detector::Label;
use crate::error::{Error, Result};
use crate::metrics::{cer, eer, min_t_dcf, wer, ScoreSet, TdcfParams};
use crate::probe::ProbeResult;

pub const SCORE_HEADER: &str = "utterance_id,label,probability";
pub const TRANSCRIPT_HEADER: &str = "utterance_id\ttext";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub utterance_id: String,
    pub label: Label,
    /// P(bonafide).
    pub probability: f64,
}

/// CSV with [`SCORE_HEADER`]; probabilities use the shortest round-trip
/// decimal form so files are byte-stable.
pub fn scores_to_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from(SCORE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.utterance_id, r.label.as_str(), r.probability);
    }
    s
}

pub fn scores_from_csv(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(SCORE_HEADER) {
        return Err(Error::Schema {
            field: "header".into(),
            message: format!("expected `{SCORE_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.trim_end().split(',').collect();
            if f.len() != 3 {
                return Err(Error::Schema {
                    field: format!("row {}", n + 2),
                    message: format!("{} columns, expected 3", f.len()),
                });
            }
            let label = f[1].parse().map_err(|_| Error::Schema {
                field: "label".into(),
                message: format!("row {}: `{}`", n + 2, f[1]),
            })?;
            let probability: f64 = f[2].parse().map_err(|_| Error::Schema {
                field: "probability".into(),
                message: format!("row {}: `{}`", n + 2, f[2]),
            })?;
            if !(0.0..=1.0).contains(&probability) {
                return Err(Error::Schema {
                    field: "probability".into(),
                    message: format!("row {}: {probability} outside [0, 1]", n + 2),
                });
            }
            Ok(ScoreRow {
                utterance_id: f[0].to_string(),
                label,
                probability,
            })
        })
        .collect()
}

pub fn score_set_of(rows: &[ScoreRow]) -> ScoreSet {
    let mut s = ScoreSet::default();
    for r in rows {
        match r.label {
            Label::Bonafide => s.bonafide.push(r.probability),
            Label::Deepfake => s.spoof.push(r.probability),
        }
    }
    s
}

/// `utterance_id → text`, TSV with [`TRANSCRIPT_HEADER`].
pub type Transcripts = BTreeMap<String, String>;

pub fn transcripts_to_tsv(t: &Transcripts) -> String {
    let mut s = String::from(TRANSCRIPT_HEADER);
    s.push('\n');
    for (id, text) in t {
        let _ = writeln!(s, "{id}\t{text}");
    }
    s
}

pub fn transcripts_from_tsv(text: &str) -> Result<Transcripts> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(TRANSCRIPT_HEADER) {
        return Err(Error::Schema {
            field: "header".into(),
            message: format!("expected `{TRANSCRIPT_HEADER}`"),
        });
    }
    let mut out = Transcripts::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Schema {
            field: "text".into(),
            message: format!("row {}: missing tab separator", n + 2),
        })?;
        if out.insert(id.to_string(), text.to_string()).is_some() {
            return Err(Error::Schema {
                field: "utterance_id".into(),
                message: format!("duplicate id `{id}`"),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_t_dcf: f64,
    pub t_dcf_params: TdcfParams,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

pub fn detection_summary(rows: &[ScoreRow], params: &TdcfParams) -> Result<DetectionSummary> {
    let set = score_set_of(rows);
    let e = eer(&set)?;
    Ok(DetectionSummary {
        eer: e.eer,
        eer_threshold: e.threshold,
        min_t_dcf: min_t_dcf(&set, params)?,
        t_dcf_params: *params,
        n_bonafide: set.bonafide.len(),
        n_spoof: set.spoof.len(),
    })
}

/// Corpus-level error rates of one hypothesis set: total edits over total
/// reference length, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub wer: f64,
    pub cer: f64,
    pub n: usize,
}

/// Scores every hypothesis whose id has a reference; ids without a
/// reference are a schema error.
pub fn text_scores(references: &Transcripts, hypotheses: &Transcripts) -> Result<TextScores> {
    if hypotheses.is_empty() {
        return Err(Error::Input("no hypothesis transcripts".into()));
    }
    let (mut w, mut c, mut rw, mut rc) = (0.0, 0.0, 0usize, 0usize);
    for (id, hyp) in hypotheses {
        let r = references.get(id).ok_or_else(|| Error::Schema {
            field: "utterance_id".into(),
            message: format!("hypothesis `{id}` has no reference"),
        })?;
        let nw = r.split_whitespace().count();
        let nc = crate::metrics::normalize_text(r).chars().count();
        w += wer(r, hyp)? * nw as f64;
        c += cer(r, hyp)? * nc as f64;
        rw += nw;
        rc += nc;
    }
    Ok(TextScores {
        wer: w / rw as f64,
        cer: c / rc as f64,
        n: hypotheses.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntelligibilitySummary {
    /// Proxy of each reference against itself.
    pub reference: f64,
    /// Decoder output from the full token stack.
    pub full_decode: f64,
    /// Decoder output from window-shuffled acoustic tokens alone.
    pub acoustic_shuffled_decode: f64,
    pub n: usize,
}

/// Consolidated run report. Sections without inputs are omitted, never
/// zero-filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionSummary>,
    /// Keyed by hypothesis source.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub transcripts: BTreeMap<String, TextScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intelligibility: Option<IntelligibilitySummary>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub probes: BTreeMap<String, ProbeResult>,
    pub config_fingerprint: String,
    pub seeds: Seeds,
}

impl Report {
    pub fn new(config: &VeilConfig) -> Result<Self> {
        Ok(Self {
            version: REPORT_VERSION,
            detection: None,
            transcripts: BTreeMap::new(),
            intelligibility: None,
            probes: BTreeMap::new(),
            config_fingerprint: config.fingerprint()?,
            seeds: config.seeds,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(b: &[f64], s: &[f64]) -> Vec<ScoreRow> {
        let mk = |p: &f64, l, i| ScoreRow {
            utterance_id: format!("u{i}"),
            label: l,
            probability: *p,
        };
        b.iter()
            .enumerate()
            .map(|(i, p)| mk(p, Label::Bonafide, i))
            .chain(s.iter().enumerate().map(|(i, p)| mk(p, Label::Deepfake, i + b.len())))
            .collect()
    }

    #[test]
    fn score_csv_roundtrip_and_schema_errors() {
        let r = rows(&[0.9, 0.123456789012345], &[1e-7]);
        let text = scores_to_csv(&r);
        assert_eq!(scores_from_csv(&text).unwrap(), r);
        let bad = |t: &str| match scores_from_csv(t) {
            Err(Error::Schema { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(bad("id,label\n"), "header");
        assert_eq!(bad(&format!("{SCORE_HEADER}\nu,maybe,0.5\n")), "label");
        assert_eq!(bad(&format!("{SCORE_HEADER}\nu,bonafide,1.5\n")), "probability");
        assert_eq!(bad(&format!("{SCORE_HEADER}\nu,bonafide\n")), "row 2");
    }

    #[test]
    fn perfect_separation_reports_zero_eer() {
        let d = detection_summary(&rows(&[0.9, 0.8, 0.7], &[0.2, 0.3, 0.4]), &TdcfParams::default()).unwrap();
        assert_eq!(d.eer, 0.0);
        assert_eq!(d.min_t_dcf, 0.0);
        assert_eq!((d.n_bonafide, d.n_spoof), (3, 3));
    }

    #[test]
    fn absent_sections_are_omitted() {
        let mut r = Report::new(&VeilConfig::default()).unwrap();
        let json = r.to_json().unwrap();
        for key in ["detection", "transcripts", "intelligibility", "probes"] {
            assert!(!json.contains(key), "{key} present in {json}");
        }
        assert!(!json.contains("wer"));
        let refs = Transcripts::from([("a".to_string(), "ba de gi".to_string())]);
        let hyp = Transcripts::from([("a".to_string(), "ba de ko".to_string())]);
        r.transcripts.insert("semantic".into(), text_scores(&refs, &hyp).unwrap());
        let json = r.to_json().unwrap();
        assert!(json.contains("\"wer\""));
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn transcript_tsv_and_text_scores() {
        let refs = Transcripts::from([("a".to_string(), "the cat sat".to_string()), ("b".to_string(), "hi".to_string())]);
        assert_eq!(transcripts_from_tsv(&transcripts_to_tsv(&refs)).unwrap(), refs);
        let hyp = Transcripts::from([("a".to_string(), "the bat sat on".to_string()), ("b".to_string(), "a b c".to_string())]);
        // 2 + 3 word edits over 3 + 1 reference words
        assert!((text_scores(&refs, &hyp).unwrap().wer - 125.0).abs() < 1e-9);
        let stray = Transcripts::from([("z".to_string(), "x".to_string())]);
        assert!(matches!(text_scores(&refs, &stray), Err(Error::Schema { .. })));
    }
}
