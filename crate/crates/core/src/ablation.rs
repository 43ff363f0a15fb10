//! Seeded ablation runs over the decoupling, feature-sharing, fusion and
//! mask-gradient switches, reported as grouped comparison tables.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataset::{collapse_to_foreground, Sample};
use crate::error::Result;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub model: ModelConfig,
}

/// One comparison table: an ordered list of variant names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<String>,
}

pub const NO_DECOUPLING: &str = "no decoupling";
pub const FB: &str = "FB decoupling (n=1)";
pub const FB_FD: &str = "FB+FD decoupling (n=3)";
pub const SPLIT: &str = "FB+FD, separate backbones";
pub const SAFF_FIXED_W: &str = "FB+FD + SAFF, w fixed at 1";
pub const SAFF: &str = "FB+FD + SAFF";
pub const TRUNCATED: &str = "FB+FD + SAFF, truncated masks";

/// The seven distinct variants behind the four comparison tables, derived from
/// `base` (its widths for `n = 3` are kept; `n = 1` variants use the first width).
pub fn standard_variants(base: &ModelConfig) -> Vec<AblationVariant> {
    let n3 = ModelConfig {
        num_levels: 3,
        use_saff: false,
        shared_backbone: true,
        use_soft_masks: true,
        freeze_saff_w: false,
        ..base.clone()
    };
    let n3 = if n3.channels_per_level.len() == 3 {
        n3
    } else {
        ModelConfig { channels_per_level: ModelConfig::with_levels(3).channels_per_level, ..n3 }
    };
    let n1 = ModelConfig {
        num_levels: 1,
        channels_per_level: vec![n3.channels_per_level[0]],
        head_levels: None,
        ..n3.clone()
    };
    let v = |name: &str, model: ModelConfig| AblationVariant { name: name.to_string(), model };
    vec![
        v(NO_DECOUPLING, ModelConfig { lambda_weight: 0.0, ..n1.clone() }),
        v(FB, n1),
        v(FB_FD, n3.clone()),
        v(SPLIT, ModelConfig { shared_backbone: false, ..n3.clone() }),
        v(SAFF_FIXED_W, ModelConfig { use_saff: true, freeze_saff_w: true, ..n3.clone() }),
        v(SAFF, ModelConfig { use_saff: true, ..n3.clone() }),
        v(TRUNCATED, ModelConfig { use_saff: true, use_soft_masks: false, ..n3 }),
    ]
}

pub fn standard_tables() -> Vec<AblationTable> {
    let t = |title: &str, rows: &[&str]| AblationTable {
        title: title.to_string(),
        rows: rows.iter().map(|r| r.to_string()).collect(),
    };
    vec![
        t("Decoupling strategies", &[NO_DECOUPLING, FB, FB_FD]),
        t("Feature interaction", &[SPLIT, FB_FD]),
        t("Scale-adaptive fusion", &[FB_FD, SAFF_FIXED_W, SAFF]),
        t("Gradient interaction", &[TRUNCATED, SAFF]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    /// Regression-loss gradient norm on the decoupling head at the first step.
    pub ddm_reg_grad_norm: f64,
    pub final_total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub model: ModelConfig,
    pub seeds: Vec<SeedResult>,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub expected: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train: TrainConfig,
    pub variants: Vec<VariantResult>,
    pub tables: Vec<AblationTable>,
    /// Present when all three decoupling variants were run.
    pub decoupling_order: Option<OrderingCheck>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Samples labelled for a model with `levels` density levels; multi-level
/// labels are merged for single-level models.
fn relabel(samples: &[Sample], levels: usize) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| if levels == 1 && s.labels.num_levels != 1 { collapse_to_foreground(s) } else { s.clone() })
        .collect()
}

/// Trains every variant once per seed and evaluates on `val`.
///
/// `on_run` is called after each (variant, seed) run.
pub fn run_ablation_suite(
    variants: &[AblationVariant],
    tables: Vec<AblationTable>,
    train_config: &TrainConfig,
    seeds: &[u64],
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_run: impl FnMut(&str, &SeedResult),
) -> Result<AblationReport> {
    let mut results = Vec::with_capacity(variants.len());
    for v in variants {
        let mut seed_results = Vec::with_capacity(seeds.len());
        let train_v = relabel(train_set, v.model.num_levels);
        let val_v = relabel(val_set, v.model.num_levels);
        for &seed in seeds {
            let tc = TrainConfig { seed, ..train_config.clone() };
            let out = train(&v.model, &tc, &train_v, &val_v, |_| {})?;
            let eval = crate::trainer::evaluate_model(&out.last, &val_v, tc.batch_size)?;
            let first = out.history.first();
            let r = SeedResult {
                seed,
                mae: eval.mae,
                mse: eval.mse,
                ddm_reg_grad_norm: first.map_or(0.0, |h| h.ddm_reg_grad_norm),
                final_total_loss: out.history.last().map_or(0.0, |h| h.total),
            };
            on_run(&v.name, &r);
            seed_results.push(r);
        }
        let maes: Vec<f64> = seed_results.iter().map(|r| r.mae).collect();
        let mses: Vec<f64> = seed_results.iter().map(|r| r.mse).collect();
        let (mae_mean, mae_std) = mean_std(&maes);
        let (mse_mean, mse_std) = mean_std(&mses);
        results.push(VariantResult {
            name: v.name.clone(),
            model: v.model.clone(),
            seeds: seed_results,
            mae_mean,
            mae_std,
            mse_mean,
            mse_std,
        });
    }
    let mut report = AblationReport { train: train_config.clone(), variants: results, tables, decoupling_order: None };
    report.decoupling_order = decoupling_order(&report);
    Ok(report)
}

/// Checks mean MAE order FB+FD <= FB <= none, listing per-seed values when violated.
pub fn decoupling_order(report: &AblationReport) -> Option<OrderingCheck> {
    let none = report.variant(NO_DECOUPLING)?;
    let fb = report.variant(FB)?;
    let fbfd = report.variant(FB_FD)?;
    let holds = fbfd.mae_mean <= fb.mae_mean && fb.mae_mean <= none.mae_mean;
    let mut detail = format!(
        "mean MAE: {} {:.3}, {} {:.3}, {} {:.3}",
        FB_FD, fbfd.mae_mean, FB, fb.mae_mean, NO_DECOUPLING, none.mae_mean
    );
    if !holds {
        detail.push_str("; ORDER VIOLATED; per-seed MAE:");
        for v in [fbfd, fb, none] {
            let seeds: Vec<String> = v.seeds.iter().map(|s| format!("seed {} = {:.3}", s.seed, s.mae)).collect();
            let _ = write!(detail, " [{}: {}]", v.name, seeds.join(", "));
        }
    }
    Some(OrderingCheck { expected: format!("{FB_FD} <= {FB} <= {NO_DECOUPLING}"), holds, detail })
}

/// Plain-text rendering: one block per table, one row per variant.
pub fn render_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let width = report.variants.iter().map(|v| v.name.len()).max().unwrap_or(10).max(10);
    for t in &report.tables {
        let _ = writeln!(out, "{}", t.title);
        let _ = writeln!(out, "{:<width$} | {:>17} | {:>17} | seeds", "variant", "MAE", "MSE");
        let _ = writeln!(out, "{}", "-".repeat(width + 50));
        for name in &t.rows {
            if let Some(v) = report.variant(name) {
                let _ = writeln!(
                    out,
                    "{:<width$} | {:>8.3} ± {:<6.3} | {:>8.3} ± {:<6.3} | {}",
                    v.name,
                    v.mae_mean,
                    v.mae_std,
                    v.mse_mean,
                    v.mse_std,
                    v.seeds.len()
                );
            }
        }
        out.push('\n');
    }
    if let Some(o) = &report.decoupling_order {
        let _ = writeln!(out, "expected order: {}", o.expected);
        let _ = writeln!(out, "{}: {}", if o.holds { "holds" } else { "VIOLATED" }, o.detail);
    }
    out
}
