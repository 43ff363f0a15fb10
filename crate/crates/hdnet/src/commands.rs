//! Implementations behind each `hdnet` subcommand.

use std::io::Write as _;
use std::path::Path;

use hdnet_core::ablation::{render_table, run_ablation_suite, standard_tables, standard_variants, AblationReport};
use hdnet_core::dataset::density_target;
use hdnet_core::gt::{auto_thresholds, build_level_masks, GtConfig};
use hdnet_core::objective::{evaluate, EvalRecord, ImageRecord};
use hdnet_core::synth::standard_scene;
use hdnet_core::trainer::{train as train_model, EpochRecord, TrainState};
use hdnet_core::HdNet;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, SuiteConfig};
use crate::datadir::DatasetDir;
use crate::error::{io_err, write, Error, Result};
use crate::formats::{read_annotations, write_annotations, write_density, write_json, write_mask};
use crate::imageio::{read_gray, write_gray, write_heatmap, write_probability};
use crate::manifest::RunManifest;

/// Writes `scenes` synthetic scenes for seeds `seed..seed + scenes`.
pub fn gen_data(out: &Path, scenes: usize, height: usize, width: usize, seed: u64) -> Result<RunManifest> {
    let dir = DatasetDir::new(out);
    for s in seed..seed + scenes as u64 {
        let (img, ann) = standard_scene(s, width, height)?;
        write_gray(&dir.image(&ann.image_id), &img)?;
        write_annotations(&dir.annotation(&ann.image_id), &ann)?;
    }
    let m = RunManifest::scan("gen-data", vec![], Some(seed), out)?;
    m.write(out)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdSpec {
    /// Equal-frequency quantiles of this dataset's foreground cells.
    Auto,
    List(Vec<f64>),
}

impl std::str::FromStr for ThresholdSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(ThresholdSpec::Auto);
        }
        if s.trim().is_empty() {
            return Ok(ThresholdSpec::List(vec![]));
        }
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad threshold {v:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ThresholdSpec::List)
    }
}

/// Builds density and level-mask targets for every annotated image.
pub fn make_gt(data: &Path, sigma: f64, levels: usize, thresholds: &ThresholdSpec, epsilon: f64) -> Result<GtConfig> {
    let dir = DatasetDir::new(data);
    let ids = dir.ids()?;
    let mut cfg = GtConfig {
        sigma,
        background_epsilon: epsilon,
        num_levels: levels,
        level_thresholds: vec![0.0; levels.saturating_sub(1)],
        ..GtConfig::default()
    };
    let anns = ids.iter().map(|id| read_annotations(&dir.annotation(id))).collect::<Result<Vec<_>>>()?;
    let densities = anns.iter().map(|a| density_target(a, &cfg)).collect::<hdnet_core::Result<Vec<_>>>()?;
    cfg.level_thresholds = match thresholds {
        ThresholdSpec::Auto => auto_thresholds(&densities, levels, epsilon)?,
        ThresholdSpec::List(t) => t.clone(),
    };
    cfg.validate()?;
    for (id, d) in ids.iter().zip(&densities) {
        write_density(&dir.density(id), d)?;
        write_mask(&dir.mask(id), &build_level_masks(d, &cfg)?)?;
    }
    write_json(&dir.gt_config_path(), &cfg)?;
    RunManifest::scan("make-gt", vec![], None, data)?.write(data)?;
    Ok(cfg)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub workers: Option<usize>,
}

pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
    pub manifest: RunManifest,
}

fn check_levels(dir: &DatasetDir, levels: usize, config: &Path, field: &str) -> Result<()> {
    let gt = dir.gt_config()?;
    if gt.num_levels != levels {
        return Err(Error::Config {
            file: config.display().to_string(),
            field: field.to_string(),
            message: format!(
                "{} has ground truth for {} levels, the model has {levels}",
                dir.root.display(),
                gt.num_levels
            ),
        });
    }
    Ok(())
}

/// Trains from a config file, writing `checkpoint.bin`, `history.jsonl`,
/// `state.json`, `config.json` and `manifest.json` under `out`.
pub fn train(config_path: &Path, out: &Path, overrides: &TrainOverrides) -> Result<TrainResult> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = overrides.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = overrides.epochs {
        cfg.train.epochs = e;
    }
    if let Some(w) = overrides.workers {
        cfg.train.workers = w;
    }
    cfg.validate(config_path)?;
    let train_dir = DatasetDir::new(&cfg.data.train);
    check_levels(&train_dir, cfg.model.num_levels, config_path, "model.num_levels")?;
    let train_set = train_dir.load_samples(cfg.train.resize_longer_side, cfg.train.workers)?;
    let val_set = match &cfg.data.val {
        Some(v) => {
            let d = DatasetDir::new(v);
            check_levels(&d, cfg.model.num_levels, config_path, "model.num_levels")?;
            d.load_samples(cfg.train.resize_longer_side, cfg.train.workers)?
        }
        None => vec![],
    };

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("config.json"), &cfg)?;
    let history_path = out.join("history.jsonl");
    let mut history = std::fs::File::create(&history_path).map_err(io_err(&history_path))?;
    let mut write_err = None;
    let outcome = train_model(&cfg.model, &cfg.train, &train_set, &val_set, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(history, "{line}") {
            write_err.get_or_insert(e);
        }
        let val = r.val_mae.map_or(String::new(), |m| format!(" val_mae {m:.4}"));
        eprintln!("epoch {:>3}  l_reg {:.6}  l_dec {:.6}  total {:.6}{val}", r.epoch, r.l_reg, r.l_dec, r.total);
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&history_path)(e));
    }
    drop(history);
    checkpoint::save(&out.join("checkpoint.bin"), &outcome.checkpoint)?;
    write_json(&out.join("state.json"), &outcome.state)?;
    let manifest = RunManifest::scan("train", vec![config_path.display().to_string()], Some(cfg.train.seed), out)?;
    manifest.write(out)?;
    Ok(TrainResult { history: outcome.history, state: outcome.state, manifest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub checkpoint: String,
    pub data: String,
    #[serde(flatten)]
    pub record: EvalRecord,
}

/// Counts every image of a dataset. Each predicted cell is rounded to `f32`,
/// the precision ground-truth density files are stored in, before summing.
pub fn eval(checkpoint_path: &Path, data: &Path) -> Result<Metrics> {
    let model = checkpoint::load(checkpoint_path)?;
    let dir = DatasetDir::new(data);
    let samples = dir.load_samples(None, 1)?;
    let records = samples
        .iter()
        .map(|s| {
            let p = model.predict(&s.image)?;
            let predicted_count = p.density.values.iter().map(|&v| v as f32 as f64).sum();
            Ok(ImageRecord { image_id: s.id.clone(), gt_count: s.gt_count, predicted_count })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics {
        checkpoint: checkpoint_path.display().to_string(),
        data: data.display().to_string(),
        record: evaluate(records)?,
    })
}

/// Runs the standard ablation variants, writing `report.json`, `report.txt`
/// and `manifest.json` under `out`.
pub fn ablate(suite_path: &Path, out: &Path) -> Result<AblationReport> {
    let suite = SuiteConfig::load(suite_path)?;
    let mut variants = standard_variants(&suite.base_model);
    if let Some(names) = &suite.variants {
        for (i, n) in names.iter().enumerate() {
            if !variants.iter().any(|v| &v.name == n) {
                let known: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
                return Err(Error::Config {
                    file: suite_path.display().to_string(),
                    field: format!("variants[{i}]"),
                    message: format!("unknown variant {n:?}; known: {}", known.join(", ")),
                });
            }
        }
        variants.retain(|v| names.contains(&v.name));
    }
    let train_dir = DatasetDir::new(&suite.data.train);
    let val_dir = DatasetDir::new(suite.data.val.as_ref().expect("validated"));
    let train_set = train_dir.load_samples(suite.train.resize_longer_side, suite.train.workers)?;
    let val_set = val_dir.load_samples(suite.train.resize_longer_side, suite.train.workers)?;
    let tables = standard_tables()
        .into_iter()
        .map(|mut t| {
            t.rows.retain(|r| variants.iter().any(|v| &v.name == r));
            t
        })
        .filter(|t| !t.rows.is_empty())
        .collect();
    let report = run_ablation_suite(&variants, tables, &suite.train, &suite.seeds, &train_set, &val_set, |name, r| {
        eprintln!("{name} seed {}: mae {:.4} mse {:.4}", r.seed, r.mae, r.mse);
    })?;
    write_json(&out.join("report.json"), &report)?;
    write(&out.join("report.txt"), render_table(&report))?;
    RunManifest::scan("ablate", vec![suite_path.display().to_string()], None, out)?.write(out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub image: String,
    pub count: f64,
    /// Files written under the output directory.
    pub files: Vec<String>,
}

/// Predicts the count of one image. With `dump`, writes per-head density
/// heatmaps `head_<i>.png`, soft masks `mask_<j>.png` (background is 0),
/// masked heads `masked_<i>.png` and the final `density.png`.
pub fn infer(checkpoint_path: &Path, image: &Path, out: Option<&Path>, dump: bool) -> Result<InferReport> {
    let model: HdNet = checkpoint::load(checkpoint_path)?;
    let img = read_gray(image)?;
    let p = model.predict(&img)?;
    let mut files = Vec::new();
    if let Some(out) = out {
        if dump {
            let mut put = |name: String, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
                f(&out.join(&name))?;
                files.push(name);
                Ok(())
            };
            for (i, d) in p.heads.iter().enumerate() {
                put(format!("head_{}.png", i + 1), &|path| write_heatmap(path, d))?;
            }
            for (j, m) in p.masks.iter().enumerate() {
                put(format!("mask_{j}.png"), &|path| write_probability(path, m))?;
            }
            for (i, d) in p.masked.iter().enumerate() {
                put(format!("masked_{}.png", i + 1), &|path| write_heatmap(path, d))?;
            }
            put("density.png".to_string(), &|path| write_heatmap(path, &p.density))?;
        }
        let report = InferReport { image: image.display().to_string(), count: p.count, files: files.clone() };
        write_json(&out.join("prediction.json"), &report)?;
    }
    Ok(InferReport { image: image.display().to_string(), count: p.count, files })
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_parsers() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("0x4").is_err());
        assert_eq!("auto".parse::<ThresholdSpec>(), Ok(ThresholdSpec::Auto));
        assert_eq!("0.5, 2".parse::<ThresholdSpec>(), Ok(ThresholdSpec::List(vec![0.5, 2.0])));
        assert!("0.5,x".parse::<ThresholdSpec>().is_err());
    }
}
