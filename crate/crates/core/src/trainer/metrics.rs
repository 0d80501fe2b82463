//! Per-episode online metrics and their trailing window.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Episodes in the trailing window of the reported rates.
pub const WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub seed: u64,
    /// Ground-truth task success.
    pub success: bool,
    pub length: usize,
    pub intervention_steps: usize,
    pub episode_return: f64,
    pub wall_seconds: f64,
}

impl EpisodeMetrics {
    /// Succeeded without any intervention.
    pub fn autonomous_success(&self) -> bool {
        self.success && self.intervention_steps == 0
    }

    /// Fraction of steps under operator control.
    pub fn intervention_rate(&self) -> f64 {
        if self.length == 0 {
            0.0
        } else {
            self.intervention_steps as f64 / self.length as f64
        }
    }
}

/// Means over the last `min(WINDOW, n)` episodes.
#[derive(Debug, Clone, Default)]
pub struct MetricsWindow {
    recent: VecDeque<EpisodeMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowRates {
    pub success_rate: f64,
    pub autonomous_success_rate: f64,
    pub intervention_rate: f64,
    pub mean_length: f64,
}

impl MetricsWindow {
    pub fn push(&mut self, m: EpisodeMetrics) {
        if self.recent.len() == WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(m);
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    pub fn rates(&self) -> WindowRates {
        let n = self.recent.len();
        if n == 0 {
            return WindowRates {
                success_rate: 0.0,
                autonomous_success_rate: 0.0,
                intervention_rate: 0.0,
                mean_length: 0.0,
            };
        }
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| self.recent.iter().map(f).sum::<f64>() / n as f64;
        WindowRates {
            success_rate: mean(&|m| m.success as u8 as f64),
            autonomous_success_rate: mean(&|m| m.autonomous_success() as u8 as f64),
            intervention_rate: mean(&|m| m.intervention_rate()),
            mean_length: mean(&|m| m.length as f64),
        }
    }
}

#[derive(Serialize)]
struct Line<'a> {
    #[serde(flatten)]
    episode: &'a EpisodeMetrics,
    #[serde(flatten)]
    window: WindowRates,
}

/// Appends one JSON object per episode, flushed after every line.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, m: &EpisodeMetrics, window: WindowRates) -> Result<()> {
        serde_json::to_writer(&mut self.out, &Line { episode: m, window })?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(i: usize, success: bool, length: usize, iv: usize) -> EpisodeMetrics {
        EpisodeMetrics {
            episode: i,
            seed: i as u64,
            success,
            length,
            intervention_steps: iv,
            episode_return: 0.0,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn rates_are_means_of_the_last_twenty() {
        let mut w = MetricsWindow::default();
        let all: Vec<_> = (0..35).map(|i| ep(i, i % 3 == 0, 10 + i, i % 4)).collect();
        for (n, m) in all.iter().enumerate() {
            w.push(m.clone());
            let tail = &all[(n + 1).saturating_sub(WINDOW)..=n];
            let k = tail.len() as f64;
            let r = w.rates();
            let sr = tail.iter().filter(|m| m.success).count() as f64 / k;
            let asr = tail.iter().filter(|m| m.success && m.intervention_steps == 0).count() as f64 / k;
            let ir = tail.iter().map(|m| m.intervention_steps as f64 / m.length as f64).sum::<f64>() / k;
            let ml = tail.iter().map(|m| m.length as f64).sum::<f64>() / k;
            assert!((r.success_rate - sr).abs() < 1e-12);
            assert!((r.autonomous_success_rate - asr).abs() < 1e-12);
            assert!((r.intervention_rate - ir).abs() < 1e-12);
            assert!((r.mean_length - ml).abs() < 1e-12);
        }
    }

    #[test]
    fn log_lines_are_flat_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&path).unwrap();
        let mut w = MetricsWindow::default();
        for i in 0..3 {
            let m = ep(i, true, 5, 1);
            w.push(m.clone());
            log.write(&m, w.rates()).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2]["episode"], 2);
        assert!((lines[2]["intervention_rate"].as_f64().unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(lines[2]["success_rate"], 1.0);
    }
}
