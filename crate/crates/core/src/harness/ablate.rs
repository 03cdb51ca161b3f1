//! Ablation and frequency-sweep grid: variants × tasks × training seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::TaskId;

use super::collect::collect;
use super::dataset::build_dataset;
use super::eval::eval_policy;
use super::store::EpisodeStore;
use super::train::train_on;
use super::{fmt6, io_err, AblationFlags, ExperimentConfig, HarnessError};

/// Reported reference values, for context only.
pub const REFERENCE_VALUES: [(&str, f64); 4] = [
    ("gear_assembly_success_fmt", 0.95),
    ("gear_assembly_success_rgb_only", 0.35),
    ("ft_sweep_success_30hz", 0.40),
    ("ft_sweep_success_200hz", 0.95),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Overrides the config's F/T rate.
    #[serde(default)]
    pub ft_rate: Option<u32>,
    #[serde(default)]
    pub ablation: AblationFlags,
    /// Restricts the variant to these tasks; all grid tasks when absent.
    #[serde(default)]
    pub tasks: Option<Vec<TaskId>>,
}

impl Variant {
    pub fn new(name: &str, ft_rate: Option<u32>, ablation: AblationFlags) -> Self {
        Self { name: name.into(), ft_rate, ablation, tasks: None }
    }

    pub fn only(mut self, tasks: &[TaskId]) -> Self {
        self.tasks = Some(tasks.to_vec());
        self
    }

    pub fn applies_to(&self, task: TaskId) -> bool {
        self.tasks.as_ref().is_none_or(|t| t.contains(&task))
    }

    /// Experiment config for this variant on `task`.
    pub fn configure(&self, base: &ExperimentConfig, task: TaskId) -> ExperimentConfig {
        let mut cfg = base.for_task(task);
        if let Some(r) = self.ft_rate {
            cfg.ft_rate = r;
        }
        let a = &mut cfg.ablation;
        a.no_freq_embed |= self.ablation.no_freq_embed;
        a.no_modality_embed |= self.ablation.no_modality_embed;
        a.no_cross_attention |= self.ablation.no_cross_attention;
        a.rgb_only |= self.ablation.rgb_only;
        cfg
    }
}

/// Full FMT, RGB-only and 30 Hz F/T on both tasks; the architectural
/// ablations on peg insertion; the remaining sweep rates on the latch.
pub fn default_variants() -> Vec<Variant> {
    let flags = |f: fn(&mut AblationFlags)| {
        let mut a = AblationFlags::default();
        f(&mut a);
        a
    };
    vec![
        Variant::new("full", Some(200), AblationFlags::default()),
        Variant::new("rgb_only", None, flags(|a| a.rgb_only = true)),
        Variant::new("ft_30hz", Some(30), AblationFlags::default()),
        Variant::new("no_freq_embed", Some(200), flags(|a| a.no_freq_embed = true)).only(&[TaskId::PegInsert]),
        Variant::new("no_cross_attention", Some(200), flags(|a| a.no_cross_attention = true)).only(&[TaskId::PegInsert]),
        Variant::new("ft_60hz", Some(60), AblationFlags::default()).only(&[TaskId::LatchSpike]),
        Variant::new("ft_120hz", Some(120), AblationFlags::default()).only(&[TaskId::LatchSpike]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub task: TaskId,
    pub variant: String,
    pub ft_rate: u32,
    pub seed: u64,
    /// `Err` holds the failure message of a cell that did not complete.
    pub outcome: Result<CellOutcome, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub success_rate: f64,
    pub episodes: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub task: TaskId,
    pub variant: String,
    pub ft_rate: u32,
    pub mean_success: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
}

impl GridReport {
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut groups: BTreeMap<(String, String, u32), Vec<&CellResult>> = BTreeMap::new();
        let mut order = Vec::new();
        for c in &self.cells {
            let key = (c.task.name().to_string(), c.variant.clone(), c.ft_rate);
            if !groups.contains_key(&key) {
                order.push((key.clone(), c.task));
            }
            groups.entry(key).or_default().push(c);
        }
        order
            .into_iter()
            .map(|(key, task)| {
                let cells = &groups[&key];
                let ok: Vec<f64> = cells.iter().filter_map(|c| c.outcome.as_ref().ok().map(|o| o.success_rate)).collect();
                let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
                VariantSummary { task, variant: key.1, ft_rate: key.2, mean_success: mean, completed: ok.len(), failed: cells.len() - ok.len() }
            })
            .collect()
    }

    /// Mean success of `variant` on `task`, if any cell completed.
    pub fn mean(&self, task: TaskId, variant: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.task == task && s.variant == variant).map(|s| s.mean_success).filter(|v| v.is_finite())
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from("task,variant,ft_rate,seed,status,success_rate,episodes,final_loss\n");
        for c in &self.cells {
            let _ = write!(s, "{},{},{},{},", c.task.name(), c.variant, c.ft_rate, c.seed);
            match &c.outcome {
                Ok(o) => {
                    let _ = writeln!(s, "ok,{},{},{}", fmt6(o.success_rate), o.episodes, fmt6(o.final_loss));
                }
                Err(e) => {
                    let _ = writeln!(s, "error: {},,,", e.replace([',', '\n'], ";"));
                }
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("task,variant,ft_rate,mean_success,completed,failed\n");
        for v in self.summary() {
            let _ = writeln!(s, "{},{},{},{},{},{}", v.task.name(), v.variant, v.ft_rate, fmt6(v.mean_success), v.completed, v.failed);
        }
        s
    }

    pub fn reference_csv() -> String {
        let mut s = String::from("quantity,value\n");
        for (k, v) in REFERENCE_VALUES {
            let _ = writeln!(s, "{k},{}", fmt6(v));
        }
        s
    }

    /// Writes `grid.csv`, `summary.csv` and `reference.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, text) in [("grid.csv", self.cells_csv()), ("summary.csv", self.summary_csv()), ("reference.csv", Self::reference_csv())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

fn run_cell(cfg: &ExperimentConfig, store: &EpisodeStore, seed: u64) -> Result<CellOutcome, HarnessError> {
    let dataset = build_dataset(store, cfg)?;
    let (trained, report) = train_on(cfg, &dataset, seed)?;
    let eval = eval_policy(&trained, cfg)?;
    Ok(CellOutcome { success_rate: eval.success_rate(), episodes: eval.episodes.len(), final_loss: report.final_loss() })
}

/// Runs every applicable (task, variant, seed) cell. Demonstrations are
/// collected once per task under `out`; cell failures are recorded and the
/// grid continues.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<GridReport, HarnessError> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &task in &cfg.ablate.tasks {
        let task_cfg = cfg.for_task(task);
        let store = collect(&task_cfg, &out.join(format!("demos_{}", task.name())))?;
        for variant in cfg.ablate.variants.iter().filter(|v| v.applies_to(task)) {
            let vcfg = variant.configure(cfg, task);
            for &seed in &cfg.ablate.seeds {
                let started = std::time::Instant::now();
                let outcome = vcfg.validate().map_err(HarnessError::from).and_then(|_| run_cell(&vcfg, &store, seed)).map_err(|e| e.to_string());
                match &outcome {
                    Ok(o) => log::info!(
                        "{} {} seed {seed}: success {:.3} loss {:.4} ({:.0} s)",
                        task.name(),
                        variant.name,
                        o.success_rate,
                        o.final_loss,
                        started.elapsed().as_secs_f64()
                    ),
                    Err(e) => log::error!("{} {} seed {seed} failed: {e}", task.name(), variant.name),
                }
                cells.push(CellResult { task, variant: variant.name.clone(), ft_rate: vcfg.ft_rate, seed, outcome });
            }
        }
    }
    let report = GridReport { cells };
    report.write(out)?;
    Ok(report)
}
