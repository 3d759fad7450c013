//! Run artifact persistence: a run directory holds a manifest, the resolved
//! model, one delimited draw file per chain (header row = packed parameter
//! names), per-chain sampler statistics, and diagnostics summaries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::ParamDiagnostics;
use crate::error::{Error, Result};
use crate::samplers::{ChainDraws, RunOutcome, SamplerConfig, SamplerKind};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Everything needed to re-run and audit a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub sampler: SamplerKind,
    pub model_name: String,
    pub model_hash: String,
    pub data_path: String,
    pub data_hash: String,
    pub config: SamplerConfig,
    pub threads: usize,
    pub packed_dim: usize,
    pub param_names: Vec<String>,
    pub wall_warmup_s: Vec<f64>,
    pub wall_sampling_s: Vec<f64>,
    pub elapsed_s: f64,
    pub divergences: Vec<usize>,
    pub treedepth_hits: Vec<usize>,
}

pub fn write_run(
    dir: &Path,
    manifest: &Manifest,
    model_json: &str,
    outcome: &RunOutcome,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    std::fs::write(dir.join("model.json"), model_json)?;
    for (k, chain) in outcome.chains.iter().enumerate() {
        write_chain_csv(&dir.join(format!("chain_{k}.csv")), &outcome.names, chain)?;
        write_stats_csv(&dir.join(format!("stats_{k}.csv")), chain)?;
    }
    Ok(())
}

fn write_chain_csv(path: &Path, names: &[String], chain: &ChainDraws) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(names).map_err(|e| Error::Io(e.to_string()))?;
    for row in &chain.draws {
        let rec: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

fn write_stats_csv(path: &Path, chain: &ChainDraws) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["divergent", "treedepth_hit", "step_size", "accept_stat"])
        .map_err(|e| Error::Io(e.to_string()))?;
    for i in 0..chain.draws.len() {
        w.write_record([
            (chain.divergent[i] as u8).to_string(),
            (chain.treedepth_hit[i] as u8).to_string(),
            format!("{:.10e}", chain.step_size[i]),
            format!("{:.10e}", chain.accept_stat[i]),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

/// Draws read back from a run directory.
pub struct StoredRun {
    pub manifest: Manifest,
    pub names: Vec<String>,
    /// chains x draws x dim
    pub draws: Vec<Vec<Vec<f64>>>,
    pub dir: PathBuf,
}

impl StoredRun {
    pub fn param_chains(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let idx = self.names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Validation(format!(
                "parameter '{name}' not in draws; available: {}",
                self.names.join(", ")
            ))
        })?;
        Ok(self
            .draws
            .iter()
            .map(|chain| chain.iter().map(|row| row[idx]).collect())
            .collect())
    }

    /// Pooled draws in chain-major order for one parameter index.
    pub fn pooled(&self, idx: usize) -> Vec<f64> {
        self.draws.iter().flat_map(|chain| chain.iter().map(move |row| row[idx])).collect()
    }

    /// Posterior mean vector over all chains and draws.
    pub fn mean_vector(&self) -> Vec<f64> {
        let dim = self.names.len();
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for chain in &self.draws {
            for row in chain {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
                count += 1;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        mean
    }

    /// One pooled draw by chain-major index.
    pub fn draw(&self, index: usize) -> Result<Vec<f64>> {
        let mut i = index;
        for chain in &self.draws {
            if i < chain.len() {
                return Ok(chain[i].clone());
            }
            i -= chain.len();
        }
        Err(Error::Validation(format!("draw index {index} out of range")))
    }

    pub fn total_draws(&self) -> usize {
        self.draws.iter().map(|c| c.len()).sum()
    }
}

pub fn read_run(dir: &Path) -> Result<StoredRun> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut draws = Vec::with_capacity(manifest.config.chains);
    let mut names: Vec<String> = Vec::new();
    for k in 0..manifest.config.chains {
        let path = dir.join(format!("chain_{k}.csv"));
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
        if k == 0 {
            names = reader
                .headers()
                .map_err(|e| Error::Io(e.to_string()))?
                .iter()
                .map(str::to_string)
                .collect();
        }
        let mut chain = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Io(e.to_string()))?;
            let row: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|c| c.parse::<f64>()).collect();
            chain.push(row.map_err(|e| Error::Io(format!("bad draw value: {e}")))?);
        }
        draws.push(chain);
    }
    Ok(StoredRun { manifest, names, draws, dir: dir.to_path_buf() })
}

/// Write the per-parameter diagnostics table (CSV) and summary (JSON);
/// re-running over the same draws produces identical files.
pub fn write_diagnostics(dir: &Path, rows: &[ParamDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))
        .map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["param", "rhat", "bulk_ess", "tail_ess", "mean", "sd", "q05", "q50", "q95"])
        .map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            format!("{:.6}", r.rhat),
            format!("{:.2}", r.bulk_ess),
            format!("{:.2}", r.tail_ess),
            format!("{:.8e}", r.mean),
            format!("{:.8e}", r.sd),
            format!("{:.8e}", r.q05),
            format!("{:.8e}", r.q50),
            format!("{:.8e}", r.q95),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_roundtrip() {
        let dir = std::env::temp_dir().join(format!("dsemk-run-{}", std::process::id()));
        let chain = ChainDraws {
            draws: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            divergent: vec![false, true],
            treedepth_hit: vec![false, false],
            step_size: vec![0.5, 0.5],
            accept_stat: vec![0.9, 0.8],
            divergence_count: 1,
            wall_warmup_s: 0.1,
            wall_sampling_s: 0.2,
        };
        let outcome = RunOutcome {
            kind: SamplerKind::NutsKalman,
            names: vec!["a".into(), "b".into()],
            chains: vec![chain],
            elapsed_s: 0.4,
        };
        let manifest = Manifest {
            command: "test".into(),
            sampler: SamplerKind::NutsKalman,
            model_name: "eg1".into(),
            model_hash: sha256_hex(b"model"),
            data_path: "data.csv".into(),
            data_hash: sha256_hex(b"data"),
            config: SamplerConfig { chains: 1, iterations: 3, warmup: 1, ..Default::default() },
            threads: 1,
            packed_dim: 2,
            param_names: outcome.names.clone(),
            wall_warmup_s: vec![0.1],
            wall_sampling_s: vec![0.2],
            elapsed_s: 0.4,
            divergences: vec![1],
            treedepth_hits: vec![0],
        };
        write_run(&dir, &manifest, "{}", &outcome).unwrap();
        let back = read_run(&dir).unwrap();
        assert_eq!(back.names, outcome.names);
        assert_eq!(back.draws[0], outcome.chains[0].draws);
        assert_eq!(back.manifest.model_hash, manifest.model_hash);
        assert_eq!(back.mean_vector(), vec![2.0, 3.0]);
        assert_eq!(back.draw(1).unwrap(), vec![3.0, 4.0]);
        assert!(back.draw(2).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
