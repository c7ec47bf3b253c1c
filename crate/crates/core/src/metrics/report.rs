//! Report containers with deterministic CSV / JSON / Markdown rendering.
//! Every artifact embeds the config hash and seed, so a report is
//! reproducible from its own header.

use serde::Serialize;

use super::ModeScores;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonRow {
    pub t: usize,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<HorizonRow>,
}

fn pct(x: f64) -> String {
    format!("{x:.4}")
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,seed,t,sr,macc,miou,samples\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.config_hash,
                self.seed,
                r.t,
                pct(r.sr),
                pct(r.macc),
                pct(r.miou),
                r.samples
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<(usize, ModeScores)>,
}

impl ModeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,seed,t,kl_div,nll,mode_precision,mode_recall\n");
        for (t, s) in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.config_hash,
                self.seed,
                t,
                format_args!("{:.6}", s.kl_div),
                format_args!("{:.6}", s.nll),
                pct(s.mode_precision),
                pct(s.mode_recall)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub sr: f64,
    pub macc: f64,
    pub miou: f64,
}

/// The ablation comparison table: one row per arm, metrics averaged over the
/// shared seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationGrid {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,seeds,arm,sr,macc,miou\n");
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join("+");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.config_hash,
                seeds,
                r.arm,
                pct(r.sr),
                pct(r.macc),
                pct(r.miou)
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "Seeds: {:?}; config {}\n\n",
            self.seeds, self.config_hash
        ));
        out.push_str("| arm | SR | mAcc | mIoU |\n|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} |\n",
                r.arm, r.sr, r.macc, r.miou
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
