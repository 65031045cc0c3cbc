//! Seeded ablation grid and hyper-parameter sweeps at desk scale.
//!
//! Every (cell, seed) run is independent: it owns its dataset view, encoder,
//! bank and RNG, so the runs execute on the rayon pool and are merged back by
//! cell key in plan order.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{extract_features, linear_probe, ProbeConfig};
use crate::trainer::{train_epoch, BankInit, Mode, TrainConfig, TrainState};

pub const M_SWEEP: [f64; 6] = [0.0, 0.3, 0.5, 0.7, 0.9, 0.99];
pub const LAMBDA_SWEEP: [f64; 6] = [0.0, 1.0, 5.0, 10.0, 20.0, 30.0];
/// Epoch at which the early probe is taken (Feature Calibrate vs random init).
pub const EARLY_PROBE_EPOCH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Grid,
    Momentum,
    Lambda,
}

impl Block {
    fn name(self) -> &'static str {
        match self {
            Block::Grid => "grid",
            Block::Momentum => "m",
            Block::Lambda => "lambda",
        }
    }
}

/// One configuration of the study, before seeds are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub block: Block,
    pub key: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    /// The full method; every cell is derived from it.
    pub base: TrainConfig,
    pub encoder: EncoderConfig,
    pub probe: ProbeConfig,
    /// Each seed sets both the training seed and the encoder seed.
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    pub fn new(base: TrainConfig, encoder: EncoderConfig, probe: ProbeConfig) -> Self {
        let seeds = (0..3).map(|s| base.seed + s).collect();
        Self { base, encoder, probe, seeds }
    }

    /// The 2×2×2 grid over {calibrate, corrected update, sqrtkl}, then the
    /// momentum sweep and the λ sweep around the full method.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        let on_off = |b: bool| if b { "on" } else { "off" };
        for calibrate in [true, false] {
            for corrected in [true, false] {
                for sqrtkl in [true, false] {
                    let config = TrainConfig {
                        init: if calibrate { BankInit::Calibrate } else { BankInit::Random },
                        mode: if corrected { Mode::Ours } else { Mode::NpidNaive },
                        lambda: if sqrtkl { self.base.lambda } else { 0.0 },
                        ..self.base.clone()
                    };
                    cells.push(Cell {
                        block: Block::Grid,
                        key: format!(
                            "calibrate={} grad_update={} sqrtkl={}",
                            on_off(calibrate),
                            on_off(corrected),
                            on_off(sqrtkl)
                        ),
                        config,
                    });
                }
            }
        }
        for m in M_SWEEP {
            cells.push(Cell {
                block: Block::Momentum,
                key: format!("m={m}"),
                config: TrainConfig { bank_momentum: m, ..self.base.clone() },
            });
        }
        for lambda in LAMBDA_SWEEP {
            cells.push(Cell {
                block: Block::Lambda,
                key: format!("lambda={lambda}"),
                config: TrainConfig { lambda, ..self.base.clone() },
            });
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub probe_top1: f64,
    pub early_probe_top1: Option<f64>,
    pub final_inst_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub config_hash: String,
    pub runs: Vec<SeedResult>,
}

impl CellResult {
    pub fn median_probe(&self) -> f64 {
        median(self.runs.iter().map(|r| r.probe_top1).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn run_one(plan: &AblationPlan, data: &Dataset, labels: &[usize], config: &TrainConfig, seed: u64) -> Result<SeedResult> {
    let config = TrainConfig { seed, ..config.clone() };
    let encoder = EncoderConfig { seed, ..plan.encoder.clone() };
    let probe = |e: &Encoder| -> Result<f64> {
        let features = extract_features(e, data.features())?;
        Ok(linear_probe(&features, labels, &plan.probe)?.top1)
    };
    let mut state = TrainState::new(&config, encoder, data.instances())?;
    let mut early = None;
    let mut inst_acc = 0.0;
    while state.epoch < config.epochs {
        inst_acc = train_epoch(&mut state, &config, data.instances())?.inst_acc;
        if state.epoch == EARLY_PROBE_EPOCH {
            early = Some(probe(&state.encoder)?);
        }
    }
    Ok(SeedResult {
        seed,
        probe_top1: probe(&state.encoder)?,
        early_probe_top1: early,
        final_inst_acc: inst_acc,
    })
}

/// Runs every cell for every seed. The dataset must carry labels for the probe.
pub fn run_ablation(plan: &AblationPlan, data: &Dataset) -> Result<AblationReport> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("ablation needs a labelled dataset for the probe".into()))?;
    if plan.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    plan.base.validate(data.len())?;
    plan.probe.validate()?;
    let cells = plan.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| plan.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<(usize, SeedResult)> = jobs
        .par_iter()
        .map(|&(c, seed)| run_one(plan, data, labels, &cells[c].config, seed).map(|r| (c, r)))
        .collect::<Result<_>>()?;
    let mut merged: Vec<CellResult> = cells
        .into_iter()
        .map(|cell| CellResult {
            config_hash: cell.config.config_hash(),
            cell,
            runs: Vec::new(),
        })
        .collect();
    for (c, r) in results {
        merged[c].runs.push(r);
    }
    Ok(AblationReport { seeds: plan.seeds.clone(), cells: merged })
}

impl AblationReport {
    pub fn block(&self, block: Block) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.cell.block == block)
    }

    pub fn cell(&self, key: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell.key == key)
    }

    pub fn full_method(&self) -> &CellResult {
        self.cell("calibrate=on grad_update=on sqrtkl=on").expect("grid cell")
    }

    pub fn no_sqrtkl(&self) -> &CellResult {
        self.cell("calibrate=on grad_update=on sqrtkl=off").expect("grid cell")
    }

    pub fn all_off(&self) -> &CellResult {
        self.cell("calibrate=off grad_update=off sqrtkl=off").expect("grid cell")
    }

    /// Calibrated vs random init (both with corrected update and sqrtkl):
    /// seeds where the calibrated run's early probe is at least the random one's.
    pub fn calibrate_early_wins(&self) -> (usize, usize) {
        let cal = self.full_method();
        let rand = self.cell("calibrate=off grad_update=on sqrtkl=on").expect("grid cell");
        let pairs: Vec<(f64, f64)> = cal
            .runs
            .iter()
            .zip(&rand.runs)
            .filter_map(|(a, b)| Some((a.early_probe_top1?, b.early_probe_top1?)))
            .collect();
        (pairs.iter().filter(|(a, b)| a >= b).count(), pairs.len())
    }

    pub fn to_table(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# linear-probe top-1, median over {} seeds (seeds {}); early = probe after epoch {}",
            self.seeds.len(),
            seeds.join(","),
            EARLY_PROBE_EPOCH
        );
        let _ = writeln!(out, "{:<7} {:<42} {:>7}  {:<26} {:<26} config", "block", "cell", "median", "per-seed", "early");
        for c in &self.cells {
            let per: Vec<String> = c.runs.iter().map(|r| format!("{:.4}", r.probe_top1)).collect();
            let early: Vec<String> = c
                .runs
                .iter()
                .map(|r| r.early_probe_top1.map_or("-".into(), |v| format!("{v:.4}")))
                .collect();
            let _ = writeln!(
                out,
                "{:<7} {:<42} {:>7.4}  {:<26} {:<26} {}",
                c.cell.block.name(),
                c.cell.key,
                c.median_probe(),
                per.join(" "),
                early.join(" "),
                &c.config_hash[..12]
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::encoder::Activation;

    fn plan() -> AblationPlan {
        let base = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let probe = ProbeConfig { epochs: 5, ..ProbeConfig::default() };
        AblationPlan::new(base, EncoderConfig::new(vec![4, 6, 4], Activation::Tanh, 0), probe)
    }

    #[test]
    fn grid_and_sweeps_have_expected_shape() {
        let cells = plan().cells();
        assert_eq!(cells.iter().filter(|c| c.block == Block::Grid).count(), 8);
        assert_eq!(cells.iter().filter(|c| c.block == Block::Momentum).count(), 6);
        assert_eq!(cells.iter().filter(|c| c.block == Block::Lambda).count(), 6);
    }

    #[test]
    fn all_off_cell_is_the_baseline_config() {
        let p = plan();
        let cells = p.cells();
        let all_off = cells.iter().find(|c| c.key == "calibrate=off grad_update=off sqrtkl=off").unwrap();
        assert_eq!(all_off.config.config_hash(), p.base.npid_baseline().config_hash());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn tiny_run_merges_every_seed() {
        let data = make_blobs(2, 10, 4, 0.3, 5).unwrap();
        let report = run_ablation(&plan(), &data).unwrap();
        assert_eq!(report.cells.len(), 20);
        assert!(report.cells.iter().all(|c| c.runs.len() == 3));
        assert!(report.cells.iter().all(|c| c.runs.iter().map(|r| r.seed).eq(0..3)));
        assert_eq!(report.to_table().lines().count(), 22);
    }
}
