//! `results.json` / `results.csv` for attack and transfer runs.
//!
//! The JSON file keeps raw fractions and every per-image record; the CSV is a
//! rendering of the summaries with mIoU and mis-ratio as percentages.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use seglab::attacks::{AttackKind, Schedule};
use seglab::campaign::{summarize, ImageResult, Summary};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub attack: AttackKind,
    pub iterations: usize,
    pub schedule: Schedule,
    pub epsilon: f64,
    pub alpha: f64,
    pub summary: Summary,
    pub images: Vec<ImageResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub classes: usize,
    pub rows: Vec<ResultRow>,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "attack",
    "iterations",
    "schedule",
    "epsilon",
    "alpha",
    "images",
    "clean_miou",
    "adv_miou",
    "clean_mis_ratio",
    "adv_mis_ratio",
];

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl ResultsFile {
    pub fn write_csv<W: Write>(&self, out: W) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            let s = &r.summary;
            w.write_record([
                r.attack.name().to_string(),
                r.iterations.to_string(),
                r.schedule.name(),
                r.epsilon.to_string(),
                r.alpha.to_string(),
                s.images.to_string(),
                pct(s.clean_miou),
                pct(s.adv_miou),
                pct(s.clean_mis_ratio),
                pct(s.adv_mis_ratio),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> CliResult<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("results.json"), json + "\n")?;
        std::fs::write(dir.join("results.csv"), self.csv_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Recomputes every summary from the stored per-image records.
    pub fn regenerated(&self) -> CliResult<Self> {
        let mut out = self.clone();
        for row in &mut out.rows {
            row.summary = summarize(self.classes, &row.images)?;
        }
        Ok(out)
    }
}
