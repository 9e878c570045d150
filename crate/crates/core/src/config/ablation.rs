use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{write_atomic, RunConfig};
use crate::error::{Error, Result};

pub const SUMMARY_HEADER: &str =
    "cell_id,pipeline,divide_m,combine_n,combine_stage,combine_op,pairs_used,top1,loss_final,config_hash";

/// A base config plus `sweep.<key> = v1, v2, ...` axes.
///
/// Cells are the cartesian product of the axes in file order. Cells whose
/// config fails validation (say `n > m^2`) are skipped, and cells with an
/// identical config are kept once.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub base: RunConfig,
    pub sweeps: Vec<(String, Vec<String>)>,
    /// Give each cell a seed derived from its own config.
    pub derive_seeds: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    pub assignments: Vec<(String, String)>,
    pub config: RunConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellOutcome {
    pub top1: f64,
    pub loss_final: f64,
}

/// Seed from the cell's full config, so equal configs get equal seeds.
fn derived_seed(cfg: &RunConfig) -> u64 {
    let d = Sha256::digest(format!("seed-for:{}", cfg.hash()).as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl AblationMatrix {
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = RunConfig::default();
        let mut sweeps: Vec<(String, Vec<String>)> = Vec::new();
        let mut derive_seeds = true;
        let mut seen = HashSet::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "given more than once"));
            }
            if let Some(axis) = k.strip_prefix("sweep.") {
                if base.get(axis).is_none() {
                    return Err(Error::config(k, "sweeps an unknown key"));
                }
                let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if values.is_empty() {
                    return Err(Error::config(k, "empty sweep"));
                }
                // reject unparsable values up front
                for val in &values {
                    base.clone().set(axis, val)?;
                }
                sweeps.push((axis.to_string(), values));
            } else if k == "derive_seeds" {
                derive_seeds = super::parse_bool(k, v)?;
            } else {
                base.set(k, v)?;
            }
        }
        Ok(Self { base, sweeps, derive_seeds })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Valid, distinct cells, and the skipped assignments with the reason.
    pub fn cells(&self) -> (Vec<Cell>, Vec<(Vec<(String, String)>, String)>) {
        let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.sweeps {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut cells = Vec::new();
        let mut skipped = Vec::new();
        let mut hashes = HashSet::new();
        for assignments in combos {
            let mut cfg = self.base.clone();
            let applied = assignments.iter().try_for_each(|(k, v)| cfg.set(k, v));
            if self.derive_seeds {
                cfg.seed = derived_seed(&cfg);
            }
            if let Err(e) = applied.and_then(|_| cfg.validate()) {
                skipped.push((assignments, e.to_string()));
                continue;
            }
            if !hashes.insert(cfg.hash()) {
                continue;
            }
            let id = format!("cell{:03}", cells.len());
            cfg.output_dir = format!("{}/{}", self.base.output_dir, cfg.short_hash());
            cells.push(Cell { id, assignments, config: cfg });
        }
        (cells, skipped)
    }

    /// Runs every cell not already recorded in `summary` with a numeric
    /// top-1, appending one row per cell. A failing cell is recorded as
    /// failed and the rest continue. Returns the number of cells run.
    pub fn run<F>(&self, summary: &Path, mut runner: F) -> Result<usize>
    where
        F: FnMut(&Cell) -> Result<CellOutcome>,
    {
        let mut text = match fs::read_to_string(summary) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{SUMMARY_HEADER}\n"),
            Err(e) => return Err(Error::io(summary, e)),
        };
        if text.lines().next() != Some(SUMMARY_HEADER) {
            return Err(Error::Format {
                path: summary.to_path_buf(),
                detail: "unexpected summary header".into(),
            });
        }
        let done: HashSet<String> = text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f.len() == 10 && f[7].parse::<f64>().is_ok()).then(|| f[9].to_string())
            })
            .collect();
        write_atomic(summary, text.as_bytes())?;
        let mut ran = 0;
        for cell in self.cells().0 {
            let hash = cell.config.hash();
            if done.contains(&hash) {
                continue;
            }
            let (top1, loss) = match runner(&cell) {
                Ok(o) => (format!("{:.4}", o.top1), format!("{:.6}", o.loss_final)),
                Err(_) => ("failed".to_string(), "failed".to_string()),
            };
            let c = &cell.config;
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{top1},{loss},{hash}\n",
                cell.id,
                c.pipeline,
                c.divide_m,
                c.combine_n,
                c.combine_stage,
                c.combine_op,
                c.get("pairs_used").expect("known key"),
            ));
            write_atomic(summary, text.as_bytes())?;
            ran += 1;
        }
        Ok(ran)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_of_m_and_n_has_fourteen_cells() {
        let m = AblationMatrix::parse(
            "pairs_used = all\nsweep.divide_m = 1, 2, 3\nsweep.combine_n = 1,2,3,4,5,6,7,8,9\n",
        )
        .unwrap();
        let (cells, skipped) = m.cells();
        assert_eq!(cells.len(), 14);
        assert_eq!(skipped.len(), 27 - 14);
        let seeds: HashSet<u64> = cells.iter().map(|c| c.config.seed).collect();
        assert_eq!(seeds.len(), 14);
    }

    #[test]
    fn pipelines_give_six_cells_and_duplicates_collapse() {
        let m = AblationMatrix::parse(
            "sweep.pipeline = fastmoco, sec, encode_only, divide_combine_encode, sample_combine_encode, montage\n",
        )
        .unwrap();
        assert_eq!(m.cells().0.len(), 6);
        for derive in ["true", "false"] {
            let d = AblationMatrix::parse(&format!("derive_seeds = {derive}\nsweep.tau = 1.0, 1, 0.5\n")).unwrap();
            assert_eq!(d.cells().0.len(), 2);
        }
        assert!(AblationMatrix::parse("sweep.nope = 1").is_err());
        assert!(AblationMatrix::parse("sweep.divide_m = x").is_err());
    }

    #[test]
    fn resume_skips_completed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let summary = dir.path().join("summary.csv");
        let m = AblationMatrix::parse("sweep.seed = 1, 2, 3\nderive_seeds = false\n").unwrap();
        let mut calls = 0;
        let ran = m
            .run(&summary, |c| {
                calls += 1;
                if c.config.seed == 2 {
                    Err(Error::NonFinite("loss".into()))
                } else {
                    Ok(CellOutcome { top1: 50.0, loss_final: 1.0 })
                }
            })
            .unwrap();
        assert_eq!((ran, calls), (3, 3));
        let text = fs::read_to_string(&summary).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains(",failed,failed,"));
        // only the failed cell runs again
        let ran = m.run(&summary, |_| Ok(CellOutcome { top1: 40.0, loss_final: 2.0 })).unwrap();
        assert_eq!(ran, 1);
        assert_eq!(fs::read_to_string(&summary).unwrap().lines().count(), 5);
    }
}
