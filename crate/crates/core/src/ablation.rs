//! Ablation sweeps: train one model per variant on the same data and seed, then score each.

use std::fmt::Write as _;

use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{evaluate, ApMode};
use crate::network::Model;
use crate::trainer::train;

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

/// Detection-layer subsets {7}, {6,7}, {5,6,7}, {4,5,6,7}.
pub fn layer_variants(base: &RunConfig) -> Vec<Variant> {
    (0..4)
        .rev()
        .map(|first| {
            let mut config = base.clone();
            config.model.detect_layers = (first..4).collect();
            let names: Vec<String> = (first..4).map(|l| (l + 4).to_string()).collect();
            Variant {
                name: format!("layers {{{}}}", names.join(",")),
                config,
            }
        })
        .collect()
}

/// With and without the objectness branch.
pub fn objectness_variants(base: &RunConfig) -> Vec<Variant> {
    [true, false]
        .into_iter()
        .map(|on| {
            let mut config = base.clone();
            config.model.objectness = on;
            Variant {
                name: if on { "objectness prior".into() } else { "no objectness prior".into() },
                config,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub map: Option<f64>,
    pub class_ap: Vec<Option<f64>>,
    pub final_loss: f64,
}

/// Trains and evaluates every variant (weights seeded by each variant's `seed`).
pub fn run(variants: &[Variant], train_set: &Dataset, val_set: &Dataset, mode: ApMode) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        v.config.validate()?;
        info!("ablation: training {}", v.name);
        let mut model = Model::<f32>::build(v.config.model.clone(), v.config.train.seed)?;
        let log = train(&mut model, train_set, &v.config.train, None)?;
        let metrics = evaluate(&model, val_set, mode, false)?;
        info!("ablation: {} mAP {:?}", v.name, metrics.map);
        rows.push(AblationRow {
            variant: v.name.clone(),
            map: metrics.map,
            class_ap: metrics.classes.iter().map(|c| c.ap).collect(),
            final_loss: log.last().map_or(0.0, |r| r.report.total),
        });
    }
    Ok(rows)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.1}", 100.0 * x))
}

/// Markdown table: one row per variant, mAP then per-class AP, in percent.
pub fn table(rows: &[AblationRow], classes: &[String]) -> String {
    let mut s = String::from("| variant | mAP |");
    for c in classes {
        let _ = write!(s, " {c} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(classes.len()));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} | {} |", r.variant, pct(r.map));
        for ap in &r.class_ap {
            let _ = write!(s, " {} |", pct(*ap));
        }
        s.push('\n');
    }
    s
}

pub fn csv(rows: &[AblationRow], classes: &[String]) -> String {
    let mut s = String::from("variant,map");
    for c in classes {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let _ = write!(s, "\"{}\",{}", r.variant, f(r.map));
        for ap in &r.class_ap {
            let _ = write!(s, ",{}", f(*ap));
        }
        s.push('\n');
    }
    s
}
