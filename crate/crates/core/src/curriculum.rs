//! Progressive compression schedule, compression-aware learning rate and
//! the section-normalized loss.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurriculumError {
    #[error("eta_struct ({0}) must exceed eta_polish ({1}) > 0")]
    LearningRates(f64, f64),
    #[error("b_star must be at least 1")]
    BStar,
    #[error("epochs must be at least 1")]
    Epochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub epochs: usize,
    pub blocks_per_epoch: usize,
    /// Global stage after which the schedule switches to the polish phase.
    pub b_star: usize,
    pub eta_struct: f64,
    pub eta_polish: f64,
    /// Length of the cosine decay. `None` means "until the end of training".
    pub total_polish_steps: Option<usize>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            epochs: 13,
            blocks_per_epoch: 1,
            b_star: 9,
            eta_struct: 5e-6,
            eta_polish: 1e-6,
            total_polish_steps: None,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        if !(self.eta_struct > self.eta_polish && self.eta_polish > 0.0) {
            return Err(CurriculumError::LearningRates(
                self.eta_struct,
                self.eta_polish,
            ));
        }
        if self.b_star == 0 {
            return Err(CurriculumError::BStar);
        }
        if self.epochs == 0 {
            return Err(CurriculumError::Epochs);
        }
        Ok(())
    }
}

/// Number of latent blocks for a plan of `plan_len` intents: context, strategy, one per step.
pub fn blocks_for_sample(plan_len: usize) -> usize {
    2 + plan_len
}

/// Blocks compressed for a sample at `epoch`, clamped to the sample's block count.
pub fn stage_at_epoch(epoch: usize, cfg: &CurriculumConfig, plan_len: usize) -> usize {
    global_stage(epoch, cfg).min(blocks_for_sample(plan_len))
}

/// Curriculum-wide (unclamped) stage at `epoch`.
pub fn global_stage(epoch: usize, cfg: &CurriculumConfig) -> usize {
    epoch * cfg.blocks_per_epoch
}

/// Polish-phase rate `t - t_star` steps into a cosine decay of length `horizon`.
pub fn polish_lr(cfg: &CurriculumConfig, steps_since: usize, horizon: usize) -> f64 {
    let progress = (steps_since as f64 / horizon.max(1) as f64).min(1.0);
    (cfg.eta_polish * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Compression-aware learning rate. Owns the record of the first polish step.
#[derive(Debug, Clone)]
pub struct CalrSchedule {
    cfg: CurriculumConfig,
    total_steps: usize,
    t_star: Option<usize>,
}

impl CalrSchedule {
    pub fn new(cfg: CurriculumConfig, total_steps: usize) -> Self {
        CalrSchedule {
            cfg,
            total_steps,
            t_star: None,
        }
    }

    pub fn t_star(&self) -> Option<usize> {
        self.t_star
    }

    fn horizon(&self, t_star: usize) -> usize {
        self.cfg
            .total_polish_steps
            .unwrap_or_else(|| self.total_steps.saturating_sub(t_star))
    }

    pub fn lr_at_step(&mut self, t: usize, g: usize) -> f64 {
        if g <= self.cfg.b_star {
            return self.cfg.eta_struct;
        }
        let t_star = *self.t_star.get_or_insert(t);
        polish_lr(&self.cfg, t.saturating_sub(t_star), self.horizon(t_star))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrRegime {
    /// Constant `eta_struct`, then cosine from `eta_polish` past `b_star`.
    Calr,
    /// Single cosine decay from `eta_struct` over the whole run.
    Cosine,
    /// `eta_struct` throughout.
    Constant,
}

impl std::str::FromStr for LrRegime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "calr" => Ok(LrRegime::Calr),
            "cosine" => Ok(LrRegime::Cosine),
            "constant" => Ok(LrRegime::Constant),
            other => Err(format!("unknown LR regime '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub t: usize,
    pub epoch: usize,
    pub g: usize,
    pub lr: f64,
}

/// Step-indexed learning rate for a whole curriculum run.
#[derive(Debug, Clone)]
pub struct LrScheduler {
    regime: LrRegime,
    cfg: CurriculumConfig,
    steps_per_epoch: usize,
    calr: CalrSchedule,
}

impl LrScheduler {
    pub fn new(regime: LrRegime, cfg: CurriculumConfig, steps_per_epoch: usize) -> Self {
        let total = cfg.epochs * steps_per_epoch;
        LrScheduler {
            regime,
            calr: CalrSchedule::new(cfg.clone(), total),
            cfg,
            steps_per_epoch: steps_per_epoch.max(1),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn row(&mut self, t: usize) -> ScheduleRow {
        let epoch = t / self.steps_per_epoch;
        let g = global_stage(epoch, &self.cfg);
        let lr = match self.regime {
            LrRegime::Calr => self.calr.lr_at_step(t, g),
            LrRegime::Constant => self.cfg.eta_struct,
            LrRegime::Cosine => {
                let progress = t as f64 / self.total_steps().max(1) as f64;
                self.cfg.eta_struct * 0.5 * (1.0 + (PI * progress).cos())
            }
        };
        ScheduleRow { t, epoch, g, lr }
    }

    pub fn t_star(&self) -> Option<usize> {
        self.calr.t_star()
    }
}

pub fn schedule_rows(
    regime: LrRegime,
    cfg: &CurriculumConfig,
    steps_per_epoch: usize,
) -> Vec<ScheduleRow> {
    let mut sched = LrScheduler::new(regime, cfg.clone(), steps_per_epoch);
    (0..sched.total_steps()).map(|t| sched.row(t)).collect()
}

/// CSV with header `t,epoch,g,lr`; rates use shortest round-trip formatting.
pub fn schedule_csv(rows: &[ScheduleRow]) -> String {
    let mut out = String::from("t,epoch,g,lr\n");
    for r in rows {
        writeln!(out, "{},{},{},{:e}", r.t, r.epoch, r.g, r.lr).unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Section {
    Prompt,
    Cot,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SectionMask(pub Vec<Section>);

impl SectionMask {
    pub fn count(&self, section: Section) -> usize {
        self.0.iter().filter(|&&s| s == section).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Per-token weight such that the weighted sum of token losses equals the
    /// section-normalized loss. Prompt tokens get zero.
    pub fn weights(&self) -> Vec<f64> {
        let cot = self.count(Section::Cot);
        let json = self.count(Section::Json);
        self.0
            .iter()
            .map(|s| match s {
                Section::Prompt => 0.0,
                Section::Cot => 0.5 / cot as f64,
                Section::Json => 0.5 / json as f64,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SectionLossError {
    #[error("mask has {mask} entries but {losses} losses were given")]
    MaskMismatch { mask: usize, losses: usize },
    #[error("mask has no JSON tokens")]
    EmptyJson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionLoss {
    pub cot: f64,
    pub json: f64,
    pub total: f64,
}

/// Mean loss per section, averaged 1:1. An empty CoT section contributes 0.
pub fn section_loss(losses: &[f64], mask: &SectionMask) -> Result<SectionLoss, SectionLossError> {
    if losses.len() != mask.len() {
        return Err(SectionLossError::MaskMismatch {
            mask: mask.len(),
            losses: losses.len(),
        });
    }
    let mean = |section: Section| {
        let (sum, n) = losses
            .iter()
            .zip(&mask.0)
            .filter(|(_, &s)| s == section)
            .fold((0.0, 0usize), |(sum, n), (&l, _)| (sum + l, n + 1));
        (n > 0).then(|| sum / n as f64)
    };
    let json = mean(Section::Json).ok_or(SectionLossError::EmptyJson)?;
    let cot = mean(Section::Cot).unwrap_or(0.0);
    Ok(SectionLoss {
        cot,
        json,
        total: 0.5 * (cot + json),
    })
}

/// Plain token-level mean over every non-prompt token.
pub fn token_mean_loss(losses: &[f64], mask: &SectionMask) -> Result<f64, SectionLossError> {
    if losses.len() != mask.len() {
        return Err(SectionLossError::MaskMismatch {
            mask: mask.len(),
            losses: losses.len(),
        });
    }
    let (sum, n) = losses
        .iter()
        .zip(&mask.0)
        .filter(|(_, &s)| s != Section::Prompt)
        .fold((0.0, 0usize), |(sum, n), (&l, _)| (sum + l, n + 1));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
