//! Ablation grids, the box-offset study and their tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ClassScore;
use crate::model::SegModel;
use crate::phantom::PhantomSample;
use crate::train::{evaluate, BoxOffset, EvalOptions, PreparedSample, Prompting, TrainConfig, Trainer};

/// Published MedSAM scores (DSC %, NSD %) on abdominal CT for box prompts
/// grown by the given offset. Kept for comparison in reports only.
pub const REFERENCE_BOX_OFFSET: [(&str, f64, f64); 6] = [
    ("0", 91.301, 89.816),
    ("5", 93.505, 92.969),
    ("15", 81.714, 64.624),
    ("30", 48.310, 28.924),
    ("50", 24.432, 16.525),
    ("Image Boundary", 2.359, 2.366),
];

/// A named set of config overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub deltas: Vec<(String, String)>,
}

impl Variant {
    pub fn new(label: &str, deltas: &[(&str, &str)]) -> Self {
        Self { label: label.into(), deltas: deltas.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        for (k, v) in &self.deltas {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses grid text: one variant per line as `label: key=value key=value`,
/// `#` starts a comment.
pub fn parse_grid(text: &str) -> Result<Vec<Variant>> {
    let mut out = vec![];
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (label, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("grid line {}: expected `label: key=value ...`", n + 1)))?;
        let mut deltas = vec![];
        for tok in rest.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid line {}: expected key=value, got {tok:?}", n + 1)))?;
            deltas.push((k.to_string(), v.to_string()));
        }
        out.push(Variant { label: label.trim().to_string(), deltas });
    }
    if out.is_empty() {
        return Err(Error::Config("grid defines no variants".into()));
    }
    Ok(out)
}

pub fn branch_grid() -> Vec<Variant> {
    vec![
        Variant::new("dense", &[("branch_mode", "dense")]),
        Variant::new("sparse", &[("branch_mode", "sparse")]),
        Variant::new("both", &[("branch_mode", "both")]),
    ]
}

pub fn diffusion_grid() -> Vec<Variant> {
    vec![
        Variant::new("diffusion off", &[("diffusion_enabled", "false")]),
        Variant::new("diffusion on", &[("diffusion_enabled", "true")]),
    ]
}

/// Each single loss family removed, then the full joint objective.
pub fn joint_loss_grid() -> Vec<Variant> {
    vec![
        Variant::new("-CE", &[("loss_toggles", "DC,SD,MSE")]),
        Variant::new("-DC", &[("loss_toggles", "CE,SD,MSE")]),
        Variant::new("-SD", &[("loss_toggles", "CE,DC,MSE")]),
        Variant::new("-MSE", &[("loss_toggles", "CE,DC,SD")]),
        Variant::new("full", &[("loss_toggles", "CE,DC,SD,MSE")]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub per_class: BTreeMap<usize, ClassScore>,
    pub dataset_hash: String,
    /// Digest of every batch drawn; equal across rows when data order is shared.
    pub order_hash: String,
}

/// Trains every variant from scratch on the same data and seed and scores the
/// final model on the held-out split.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    train: &[PhantomSample],
    val: &[PhantomSample],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let configs: Vec<TrainConfig> = variants.iter().map(|v| v.apply(base)).collect::<Result<_>>()?;
    let mut rows = vec![];
    for (v, cfg) in variants.iter().zip(configs) {
        let mut t = Trainer::new(cfg.clone(), train, val)?;
        t.run(|_, _| Ok(()))?;
        let eval = t.evaluate()?;
        let row = AblationRow {
            label: v.label.clone(),
            seed: cfg.seed,
            config: cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            mean_dsc: eval.mean_dsc,
            mean_nsd: eval.mean_nsd,
            per_class: eval.per_class,
            dataset_hash: t.dataset_hash.clone(),
            order_hash: t.order_hash(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Plain table rendered as JSON or aligned columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (i, c) in r.iter().enumerate().take(cols) {
                width[i] = width[i].max(c.chars().count());
            }
        }
        let fmt = |r: &Vec<String>| {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let pad = width[i] - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let rule = "-".repeat(width.iter().sum::<usize>() + 2 * cols.saturating_sub(1));
        let mut out = format!("{}\n{rule}\n{}\n{rule}\n", self.title, fmt(&self.header));
        for r in &self.rows {
            out.push_str(&fmt(r));
            out.push('\n');
        }
        out.push_str(&rule);
        out.push('\n');
        out
    }
}

/// One row per variant; the varied keys become columns, followed by the scores.
pub fn ablation_table(title: &str, variants: &[Variant], rows: &[AblationRow]) -> Table {
    let mut keys: Vec<String> = vec![];
    for v in variants {
        for (k, _) in &v.deltas {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    let mut header = vec!["Variant".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(["DSC(%)".to_string(), "NSD(%)".to_string()]);
    let body = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(keys.iter().map(|k| r.config.get(k).cloned().unwrap_or_default()));
            row.push(format!("{:.3}", r.mean_dsc));
            row.push(format!("{:.3}", r.mean_nsd));
            row
        })
        .collect();
    Table { title: title.into(), header, rows: body }
}

/// Parses `0,5,15,30,50,IB`; `IB` (any case) is the image boundary.
pub fn parse_offsets(s: &str) -> Result<Vec<BoxOffset>> {
    let out: Vec<BoxOffset> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            if t.eq_ignore_ascii_case("ib") {
                Ok(BoxOffset::ImageBoundary)
            } else {
                t.parse().map(BoxOffset::Pixels).map_err(|_| Error::Config(format!("bad offset {t:?}")))
            }
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("no offsets given".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetRow {
    pub offset: BoxOffset,
    pub label: String,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
}

/// Scores a box-prompted model with ground-truth boxes grown by each offset.
pub fn box_offset_study(
    model: &SegModel,
    data: &[PreparedSample],
    offsets: &[BoxOffset],
    threshold: f64,
    tau: f64,
    batch_size: usize,
) -> Result<Vec<OffsetRow>> {
    offsets
        .iter()
        .map(|&off| {
            let opts =
                EvalOptions { prompting: Prompting::Box(off), threshold, tau, batch_size, classes: None };
            let r = evaluate(model, data, &opts)?;
            Ok(OffsetRow { offset: off, label: off.label(), mean_dsc: r.mean_dsc, mean_nsd: r.mean_nsd })
        })
        .collect()
}

pub fn offset_table(rows: &[OffsetRow]) -> Table {
    Table {
        title: "Box offset study".into(),
        header: vec!["Box Offset(pixel)".into(), "DSC(%)".into(), "NSD(%)".into()],
        rows: rows
            .iter()
            .map(|r| vec![r.label.clone(), format!("{:.3}", r.mean_dsc), format!("{:.3}", r.mean_nsd)])
            .collect(),
    }
}
