//! Flat key/value training configuration files.
//!
//! Format: one `key = value` pair per line, `#` comments, every key
//! optional. CLI flags override file values, which override defaults.
//!
//! ```text
//! variant = diffabs
//! epochs = 50
//! lr_schedule = 0:1e-2,15:1e-3,35:1e-4,42:1e-5
//! ```

use std::path::Path;

use crate::error::{MpsnError, Result};
use crate::nn::NormKind;
use crate::train::TrainConfig;

/// Keys accepted in config files and `--set` flags.
pub const VALID_KEYS: &[&str] = &[
    "variant",
    "arch",
    "norm",
    "epochs",
    "lr_schedule",
    "batch_size",
    "seed",
    "momentum",
    "weight_decay",
    "clip_norm",
    "focal_gamma",
    "focal_alpha",
    "reg_weight",
    "pos_iou",
    "neg_iou",
    "cls_pos_norm",
    "alpha",
    "beta",
    "stride",
    "eval_score_thresh",
    "nms_iou",
];

fn bad_key(key: &str) -> MpsnError {
    MpsnError::Config(format!(
        "unknown config key '{key}'; valid keys: {}",
        VALID_KEYS.join(", ")
    ))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| MpsnError::Config(format!("bad value for '{key}': {e}")))
}

fn parse_schedule(value: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let (epoch, lr) = part.trim().split_once(':').ok_or_else(|| {
            MpsnError::Config(format!(
                "lr_schedule entries are 'epoch:lr', got '{part}'"
            ))
        })?;
        out.push((parse("lr_schedule", epoch)?, parse("lr_schedule", lr)?));
    }
    Ok(out)
}

/// Apply one key/value pair onto a config.
pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "variant" => cfg.variant = value.trim().parse()?,
        "arch" => cfg.arch = value.trim().parse()?,
        "norm" => {
            cfg.norm = match value.trim() {
                "batch" => NormKind::Batch,
                "instance" => NormKind::Instance,
                other => {
                    return Err(MpsnError::Config(format!(
                        "unknown norm '{other}' (expected batch|instance)"
                    )))
                }
            }
        }
        "epochs" => cfg.epochs = parse(key, value)?,
        "lr_schedule" => cfg.lr_schedule = parse_schedule(value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "momentum" => cfg.momentum = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "clip_norm" => {
            cfg.clip_norm = if value.trim() == "none" {
                None
            } else {
                Some(parse(key, value)?)
            }
        }
        "focal_gamma" => cfg.loss.focal_gamma = parse(key, value)?,
        "focal_alpha" => cfg.loss.focal_alpha = parse(key, value)?,
        "reg_weight" => cfg.loss.reg_weight = parse(key, value)?,
        "pos_iou" => cfg.loss.pos_iou = parse(key, value)?,
        "neg_iou" => cfg.loss.neg_iou = parse(key, value)?,
        "cls_pos_norm" => cfg.loss.cls_pos_norm = parse(key, value)?,
        "alpha" => cfg.agg.alpha = parse(key, value)?,
        "beta" => cfg.agg.beta = parse(key, value)?,
        "stride" => cfg.stride = parse(key, value)?,
        "eval_score_thresh" => cfg.eval_score_thresh = parse(key, value)?,
        "nms_iou" => cfg.nms_iou = parse(key, value)?,
        other => return Err(bad_key(other)),
    }
    Ok(())
}

/// Parse a config file's pairs onto a config, in file order.
pub fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| MpsnError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        apply_key(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Snapshot of the effective config as flat pairs, for run manifests.
pub fn config_snapshot(cfg: &TrainConfig) -> std::collections::BTreeMap<String, String> {
    let schedule = cfg
        .lr_schedule
        .iter()
        .map(|(e, l)| format!("{e}:{l}"))
        .collect::<Vec<_>>()
        .join(",");
    let mut map = std::collections::BTreeMap::new();
    map.insert("variant".into(), cfg.variant.to_string());
    map.insert("arch".into(), cfg.arch.to_string());
    map.insert(
        "norm".into(),
        match cfg.norm {
            NormKind::Batch => "batch".into(),
            NormKind::Instance => "instance".into(),
        },
    );
    map.insert("epochs".into(), cfg.epochs.to_string());
    map.insert("lr_schedule".into(), schedule);
    map.insert("batch_size".into(), cfg.batch_size.to_string());
    map.insert("seed".into(), cfg.seed.to_string());
    map.insert("momentum".into(), cfg.momentum.to_string());
    map.insert("weight_decay".into(), cfg.weight_decay.to_string());
    map.insert(
        "clip_norm".into(),
        cfg.clip_norm.map(|v| v.to_string()).unwrap_or("none".into()),
    );
    map.insert("focal_gamma".into(), cfg.loss.focal_gamma.to_string());
    map.insert("focal_alpha".into(), cfg.loss.focal_alpha.to_string());
    map.insert("reg_weight".into(), cfg.loss.reg_weight.to_string());
    map.insert("pos_iou".into(), cfg.loss.pos_iou.to_string());
    map.insert("neg_iou".into(), cfg.loss.neg_iou.to_string());
    map.insert("cls_pos_norm".into(), cfg.loss.cls_pos_norm.to_string());
    map.insert("alpha".into(), cfg.agg.alpha.to_string());
    map.insert("beta".into(), cfg.agg.beta.to_string());
    map.insert("stride".into(), cfg.stride.to_string());
    map.insert(
        "eval_score_thresh".into(),
        cfg.eval_score_thresh.to_string(),
    );
    map.insert("nms_iou".into(), cfg.nms_iou.to_string());
    map
}
