//! Human-readable run manifest: config echo, per-round records and final
//! metrics. The format is a line-oriented `[section]` / `key = value` text
//! that parses back losslessly enough for report generation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LqError, Result};
use crate::quantizer::QuantReport;

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER: &str = "levelq-manifest 1";

/// One quantization round as recorded in the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: String,
    pub pre_quant_loss: f64,
    pub post_share_loss: f64,
    pub post_retrain_loss: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub frozen_fraction: f64,
    /// `(layer, clusters quantized this round)`.
    pub chosen: Vec<(usize, Vec<usize>)>,
}

impl RoundRecord {
    pub fn from_report(r: &QuantReport) -> Self {
        RoundRecord {
            round: r.round,
            phase: r.phase.name().to_string(),
            pre_quant_loss: r.pre_quant_loss,
            post_share_loss: r.post_share_loss,
            post_retrain_loss: r.post_retrain_loss,
            train_loss: r.train_loss,
            train_accuracy: r.train_accuracy,
            eval_loss: r.eval_loss,
            eval_accuracy: r.eval_accuracy,
            frozen_fraction: r.frozen_fraction,
            chosen: r.chosen.clone(),
        }
    }
}

/// Whole-run manifest.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub rounds: Vec<RoundRecord>,
    pub finals: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s);
        let _ = writeln!(s, "[config]");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k} = {v}");
        }
        for r in &self.rounds {
            let _ = writeln!(s);
            let _ = writeln!(s, "[round {}]", r.round);
            let _ = writeln!(s, "phase = {}", r.phase);
            let _ = writeln!(s, "pre_quant_loss = {:.9e}", r.pre_quant_loss);
            let _ = writeln!(s, "post_share_loss = {:.9e}", r.post_share_loss);
            let _ = writeln!(s, "post_retrain_loss = {:.9e}", r.post_retrain_loss);
            let _ = writeln!(s, "train_loss = {:.9e}", r.train_loss);
            let _ = writeln!(s, "train_accuracy = {:.6}", r.train_accuracy);
            if let (Some(l), Some(a)) = (r.eval_loss, r.eval_accuracy) {
                let _ = writeln!(s, "eval_loss = {l:.9e}");
                let _ = writeln!(s, "eval_accuracy = {a:.6}");
            }
            let _ = writeln!(s, "frozen_fraction = {:.6}", r.frozen_fraction);
            for (layer, clusters) in &r.chosen {
                let ids: Vec<String> = clusters.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(s, "chosen {layer} = {}", ids.join(","));
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[final]");
        for (k, v) in &self.finals {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => return Err(LqError::format(0, "not a levelq manifest")),
        }

        #[derive(PartialEq)]
        enum Section {
            None,
            Config,
            Round,
            Final,
        }
        let mut section = Section::None;
        let mut m = RunManifest::default();

        for (ln, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(head) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if head == "config" {
                    section = Section::Config;
                } else if head == "final" {
                    section = Section::Final;
                } else if let Some(num) = head.strip_prefix("round ") {
                    let round: usize = num
                        .parse()
                        .map_err(|_| LqError::format(ln, format!("bad round header '{head}'")))?;
                    m.rounds.push(RoundRecord {
                        round,
                        phase: String::new(),
                        pre_quant_loss: f64::NAN,
                        post_share_loss: f64::NAN,
                        post_retrain_loss: f64::NAN,
                        train_loss: f64::NAN,
                        train_accuracy: f64::NAN,
                        eval_loss: None,
                        eval_accuracy: None,
                        frozen_fraction: f64::NAN,
                        chosen: Vec::new(),
                    });
                    section = Section::Round;
                } else {
                    return Err(LqError::format(ln, format!("unknown section '{head}'")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| LqError::format(ln, format!("expected 'key = value': {line}")))?;
            match section {
                Section::Config => {
                    m.config.insert(key, value);
                }
                Section::Final => {
                    m.finals.insert(key, value);
                }
                Section::Round => {
                    let r = m.rounds.last_mut().expect("inside a round section");
                    let parse_f = |v: &str| -> Result<f64> {
                        v.parse().map_err(|_| LqError::format(ln, format!("bad number '{v}'")))
                    };
                    match key.as_str() {
                        "phase" => r.phase = value,
                        "pre_quant_loss" => r.pre_quant_loss = parse_f(&value)?,
                        "post_share_loss" => r.post_share_loss = parse_f(&value)?,
                        "post_retrain_loss" => r.post_retrain_loss = parse_f(&value)?,
                        "train_loss" => r.train_loss = parse_f(&value)?,
                        "train_accuracy" => r.train_accuracy = parse_f(&value)?,
                        "eval_loss" => r.eval_loss = Some(parse_f(&value)?),
                        "eval_accuracy" => r.eval_accuracy = Some(parse_f(&value)?),
                        "frozen_fraction" => r.frozen_fraction = parse_f(&value)?,
                        other => {
                            if let Some(layer) = other.strip_prefix("chosen ") {
                                let layer: usize = layer.parse().map_err(|_| {
                                    LqError::format(ln, format!("bad layer id '{other}'"))
                                })?;
                                let clusters: Vec<usize> = value
                                    .split(',')
                                    .filter(|t| !t.is_empty())
                                    .map(|t| t.trim().parse())
                                    .collect::<std::result::Result<_, _>>()
                                    .map_err(|_| {
                                        LqError::format(ln, format!("bad cluster list '{value}'"))
                                    })?;
                                r.chosen.push((layer, clusters));
                            } else {
                                return Err(LqError::format(ln, format!("unknown round key '{key}'")));
                            }
                        }
                    }
                }
                Section::None => {
                    return Err(LqError::format(ln, "key before any section"));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| LqError::argument(format!("missing manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let mut m = RunManifest::default();
        m.config.insert("mode".into(), "slq".into());
        m.config.insert("bits".into(), "5".into());
        m.rounds.push(RoundRecord {
            round: 1,
            phase: "clusters".into(),
            pre_quant_loss: 1.25,
            post_share_loss: 1.5,
            post_retrain_loss: 1.1,
            train_loss: 1.05,
            train_accuracy: 0.5,
            eval_loss: Some(1.2),
            eval_accuracy: Some(0.45),
            frozen_fraction: 0.294117,
            chosen: vec![(0, vec![3, 5, 7]), (4, vec![1])],
        });
        m.finals.insert("quantized_accuracy".into(), "0.45".into());
        let text = m.to_text();
        let back = RunManifest::parse(&text).unwrap();
        assert_eq!(back.config["mode"], "slq");
        assert_eq!(back.rounds.len(), 1);
        assert_eq!(back.rounds[0].chosen, m.rounds[0].chosen);
        assert!((back.rounds[0].pre_quant_loss - 1.25).abs() < 1e-12);
        assert_eq!(back.finals["quantized_accuracy"], "0.45");
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(RunManifest::parse("not a manifest").is_err());
        assert!(RunManifest::parse("levelq-manifest 1\nkey = 1\n").is_err());
    }
}
