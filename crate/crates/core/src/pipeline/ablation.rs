use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::infer::evaluate_records;
use super::model::TaskFlags;
use super::report::{write_metrics_csv, MetricRow, SummaryRow};
use super::train::{prepare_split, RunRecord, Trainer};
use crate::error::{Error, Result};

/// The seven ablation variants: the bare backbone, the three auxiliary
/// configurations, and each of those with the graph modules added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    M0,
    M1,
    M2,
    M3,
    MStar1,
    MStar2,
    MStar3,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::M0,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::MStar1,
        Variant::MStar2,
        Variant::MStar3,
    ];

    pub fn flags(self) -> TaskFlags {
        let (boundary, shape, uce, graph) = match self {
            Variant::M0 => (false, false, false, false),
            Variant::M1 => (true, false, false, false),
            Variant::M2 => (true, true, false, false),
            Variant::M3 => (true, true, true, false),
            Variant::MStar1 => (true, false, false, true),
            Variant::MStar2 => (true, true, false, true),
            Variant::MStar3 => (true, true, true, true),
        };
        TaskFlags {
            boundary,
            shape,
            uce,
            graph,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::M0 => "M0",
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
            Variant::MStar1 => "M*1",
            Variant::MStar2 => "M*2",
            Variant::MStar3 => "M*3",
        }
    }

    /// `base` with this variant's task flags and the given training seed.
    pub fn config(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.model.tasks = self.flags();
        c.train.seed = seed;
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace("STAR", "*");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                Error::validation(format!("unknown variant `{s}` (expected M0..M3, M*1..M*3)"))
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub record: RunRecord,
    pub metrics: Vec<MetricRow>,
}

impl VariantRun {
    /// Mean test Dice of `task`.
    pub fn mean_dice(&self, task: &str) -> f64 {
        let d: Vec<f64> = self
            .metrics
            .iter()
            .filter(|r| r.task == task)
            .map(|r| r.metrics.dice)
            .collect();
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }
}

/// Trains `variant` from `base` with `seed` and evaluates it on the test
/// split. With `out_dir`, writes the checkpoint, record and metrics there.
pub fn run_variant(
    base: &RunConfig,
    variant: Variant,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<VariantRun> {
    let config = variant.config(base, seed);
    let split = prepare_split(&config)?;
    let mut trainer = Trainer::new(config)?;
    trainer.fit(&split, |t| {
        let e = t.record().epochs.last().expect("epoch recorded");
        log::info!(
            "{variant} seed {seed} epoch {}: loss {:.4}, val dice region {:.4} vessel {:.4}",
            e.epoch,
            e.total,
            e.val_region_dice,
            e.val_vessel_dice
        );
        Ok(())
    })?;
    let metrics = evaluate_records(trainer.model(), &split.test, trainer.config().train.batch)?;
    if let Some(dir) = out_dir {
        let dir = dir.join(format!(
            "{}_seed{seed}",
            variant.name().replace('*', "star")
        ));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        trainer.config().write(&dir.join("config.toml"))?;
        trainer.save(&dir.join("checkpoint.safetensors"))?;
        trainer.record().write_json(&dir.join("run_record.json"))?;
        write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    }
    Ok(VariantRun {
        variant,
        seed,
        record: trainer.record().clone(),
        metrics,
    })
}

/// One row per variant per task, each metric `mean(std)` over seeds of
/// the per-run mean.
pub fn summarize(runs: &[VariantRun]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let mut variants: Vec<Variant> = runs.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    for v in variants {
        for task in ["region", "vessel"] {
            let mut row = SummaryRow {
                variant: v.name().to_string(),
                task: task.to_string(),
                dice: Vec::new(),
                iou: Vec::new(),
                precision: Vec::new(),
                recall: Vec::new(),
            };
            for run in runs.iter().filter(|r| r.variant == v) {
                let sel: Vec<_> = run
                    .metrics
                    .iter()
                    .filter(|m| m.task == task)
                    .map(|m| m.metrics)
                    .collect();
                let n = sel.len().max(1) as f64;
                row.dice.push(sel.iter().map(|m| m.dice).sum::<f64>() / n);
                row.iou.push(sel.iter().map(|m| m.iou).sum::<f64>() / n);
                row.precision
                    .push(sel.iter().map(|m| m.precision).sum::<f64>() / n);
                row.recall
                    .push(sel.iter().map(|m| m.recall).sum::<f64>() / n);
            }
            rows.push(row);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_distinct_variants() {
        let flags: std::collections::HashSet<_> = Variant::ALL
            .iter()
            .map(|v| {
                let f = v.flags();
                (f.boundary, f.shape, f.uce, f.graph)
            })
            .collect();
        assert_eq!(flags.len(), 7);
        assert_eq!(Variant::MStar3.flags(), TaskFlags::FULL);
        assert_eq!("m*3".parse::<Variant>().unwrap(), Variant::MStar3);
        assert_eq!("MSTAR1".parse::<Variant>().unwrap(), Variant::MStar1);
        assert!("M4".parse::<Variant>().is_err());
    }
}
