use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, verify_same_prompts, EvalOutput};
use super::plot::plot_ablation;
use super::train::train;
use super::{write_text, RunConfig};
use crate::backbone::{LayerRange, SgpmPosition};
use crate::error::{Error, Result};
use crate::synthdata::write_json;
use crate::zoomloss::{LossConfig, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub positions: Vec<SgpmPosition>,
    pub layer_ranges: Vec<LayerRange>,
    /// Repetition `r` trains with seed `base.seed + r`.
    pub repetitions: usize,
    pub base: RunConfig,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() || self.layer_ranges.is_empty() || self.repetitions == 0 {
            return Err(Error::Config(
                "ablation grid needs at least one position, one layer range and one repetition".into(),
            ));
        }
        let depth = self.base.model.encoder.num_blocks;
        if let Some(r) = self.layer_ranges.iter().find(|r| r.last > depth) {
            return Err(Error::Config(format!(
                "layer range {r} exceeds encoder depth {depth}"
            )));
        }
        self.base.validate()
    }

    pub fn cell_count(&self) -> usize {
        self.positions.len() * self.layer_ranges.len() * self.repetitions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub position: SgpmPosition,
    pub layers: LayerRange,
    pub repetition: usize,
    pub seed: u64,
    pub run_name: String,
    pub gate_count: usize,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "mDice")]
    pub mdice: f64,
    pub open_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub rows: Vec<AblationRow>,
    pub prompt_hash: String,
}

impl AblationResults {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,layers,repetition,seed,gate_count,mIoU,mDice,open_rate\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.position.letter(),
                r.layers,
                r.repetition,
                r.seed,
                r.gate_count,
                r.miou,
                r.mdice,
                r.open_rate
            );
        }
        out
    }

    /// Bar-chart data: one row per (position, range) with metrics averaged
    /// over repetitions.
    pub fn chart_data(&self) -> Vec<(SgpmPosition, LayerRange, f64, f64)> {
        let mut keys: Vec<(SgpmPosition, LayerRange)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.position, r.layers)) {
                keys.push((r.position, r.layers));
            }
        }
        keys.into_iter()
            .map(|(p, l)| {
                let cell: Vec<_> = self.rows.iter().filter(|r| r.position == p && r.layers == l).collect();
                let n = cell.len() as f64;
                (
                    p,
                    l,
                    cell.iter().map(|r| r.miou).sum::<f64>() / n,
                    cell.iter().map(|r| r.mdice).sum::<f64>() / n,
                )
            })
            .collect()
    }

    pub fn chart_csv(&self) -> String {
        let mut out = String::from("panel,layers,mIoU,mDice\n");
        for (p, l, miou, mdice) in self.chart_data() {
            let _ = writeln!(out, "{},{l},{miou},{mdice}", p.letter());
        }
        out
    }
}

fn check_fairness(first: &mut Option<EvalOutput>, current: EvalOutput) -> Result<String> {
    match first {
        Some(f) => verify_same_prompts(f, &current)?,
        None => *first = Some(current.clone()),
    }
    Ok(current.prompt_hash)
}

/// One train + evaluate cycle per grid cell, all against the same test
/// prompts. Writes `ablation.csv`, `ablation.json`, `fig4.csv` and
/// `plots/fig4.svg` under `out`.
pub fn ablate(grid: &AblationGrid, out: &Path, mut progress: impl FnMut(&str)) -> Result<AblationResults> {
    grid.validate()?;
    let mut rows = Vec::with_capacity(grid.cell_count());
    let mut reference = None;
    let mut hash = String::new();
    for &position in &grid.positions {
        for &layers in &grid.layer_ranges {
            for repetition in 0..grid.repetitions {
                let mut cfg = grid.base.clone();
                cfg.name = format!("{}_{}_{layers}_r{repetition}", grid.base.name, position.letter());
                cfg.out_dir = out.to_path_buf();
                cfg.seed = grid.base.seed + repetition as u64;
                cfg.model.encoder.sgpm_position = position;
                cfg.model.encoder.sgpm_layers = Some(layers);
                let outcome = train(&cfg, |_| {})?;
                let ev = evaluate(&outcome.run_dir, None, None)?;
                let row = AblationRow {
                    position,
                    layers,
                    repetition,
                    seed: cfg.seed,
                    run_name: cfg.name.clone(),
                    gate_count: cfg.model.encoder.gate_count(),
                    miou: ev.report.miou,
                    mdice: ev.report.mdice,
                    open_rate: ev.gate_stats.overall_open_rate,
                };
                progress(&format!(
                    "{}: mIoU {:.4} mDice {:.4} open rate {:.3}",
                    row.run_name, row.miou, row.mdice, row.open_rate
                ));
                hash = check_fairness(&mut reference, ev)?;
                rows.push(row);
            }
        }
    }
    let results = AblationResults { rows, prompt_hash: hash };
    write_text(&out.join("ablation.csv"), &results.to_csv())?;
    write_text(&out.join("fig4.csv"), &results.chart_csv())?;
    write_json(&out.join("ablation.json"), &results)?;
    plot_ablation(out)?;
    Ok(results)
}

pub const TABLE2_ROWS: [&str; 3] = ["Baseline", "+SGPM", "+SGPM+ZoomLoss"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub label: String,
    pub seeds: Vec<u64>,
    #[serde(rename = "mIoU")]
    pub miou: Vec<f64>,
    #[serde(rename = "mDice")]
    pub mdice: Vec<f64>,
    pub mean_miou: f64,
    pub mean_mdice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Results {
    pub rows: Vec<Table2Row>,
    pub prompt_hash: String,
}

impl Table2Results {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean_mIoU,mean_mDice,per_seed_mDice\n");
        for r in &self.rows {
            let per: Vec<String> = r.mdice.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{},{},{},{}", r.label, r.mean_miou, r.mean_mdice, per.join(" "));
        }
        out
    }

    /// Mean mDice of the three rows in table order.
    pub fn mean_mdice(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_mdice).collect()
    }
}

/// The three configurations compared in the component study: plain
/// backbone with Dice+BCE, gated backbone with Dice+BCE, and gated backbone
/// with the zoom objective.
pub fn table2_configs(base: &RunConfig) -> [RunConfig; 3] {
    let gated_layers = base
        .model
        .encoder
        .sgpm_layers
        .or_else(|| crate::backbone::EncoderConfig::default().sgpm_layers);
    let zoom = LossConfig {
        objective: Objective::Zoom,
        ..base.loss
    };
    let mut baseline = base.clone();
    baseline.model.encoder.sgpm_layers = None;
    baseline.loss = LossConfig::dice_bce();
    let mut sgpm = base.clone();
    sgpm.model.encoder.sgpm_layers = gated_layers;
    sgpm.loss = LossConfig::dice_bce();
    let mut full = sgpm.clone();
    full.loss = if base.loss.objective == Objective::Zoom { base.loss } else { zoom };
    [baseline, sgpm, full]
}

/// Trains and evaluates the three component-study configurations for each
/// seed; writes `table2.csv` / `table2.json` under `out`.
pub fn run_table2(base: &RunConfig, seeds: &[u64], out: &Path, mut progress: impl FnMut(&str)) -> Result<Table2Results> {
    if seeds.is_empty() {
        return Err(Error::Config("component study needs at least one seed".into()));
    }
    base.validate()?;
    let configs = table2_configs(base);
    let mut reference = None;
    let mut hash = String::new();
    let mut rows = Vec::with_capacity(3);
    for (label, template) in TABLE2_ROWS.iter().zip(&configs) {
        let (mut miou, mut mdice) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let mut cfg = template.clone();
            let slug: String = label
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
                .collect();
            cfg.name = format!("{}_{}_s{seed}", base.name, slug.trim_matches('_'));
            cfg.out_dir = out.to_path_buf();
            cfg.seed = seed;
            let outcome = train(&cfg, |_| {})?;
            let ev = evaluate(&outcome.run_dir, None, None)?;
            progress(&format!(
                "{label} seed {seed}: mIoU {:.4} mDice {:.4}",
                ev.report.miou, ev.report.mdice
            ));
            miou.push(ev.report.miou);
            mdice.push(ev.report.mdice);
            hash = check_fairness(&mut reference, ev)?;
        }
        let n = seeds.len() as f64;
        rows.push(Table2Row {
            label: (*label).to_string(),
            seeds: seeds.to_vec(),
            mean_miou: miou.iter().sum::<f64>() / n,
            mean_mdice: mdice.iter().sum::<f64>() / n,
            miou,
            mdice,
        });
    }
    let results = Table2Results { rows, prompt_hash: hash };
    write_text(&out.join("table2.csv"), &results.to_csv())?;
    write_json(&out.join("table2.json"), &results)?;
    plot_ablation(out)?;
    Ok(results)
}
