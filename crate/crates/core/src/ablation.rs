//! Model variants for ablation studies and the table that compares them.

use std::fmt::Write as _;

use crate::aggregator::AggregatorVariant;
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Metric};
use crate::trainer::TrainConfig;

pub const FULL_MODEL: &str = "CREME";

const OPERATORS: [&str; 3] = ["attention", "mean", "max"];

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub encoder: EncoderVariant,
    pub aggregator: AggregatorVariant,
    pub infomin: bool,
}

impl Variant {
    fn new(name: &str, encoder: &str, aggregator: &str, infomin: bool) -> Self {
        Self {
            name: name.to_string(),
            encoder: encoder.parse().expect("known operator"),
            aggregator: aggregator.parse().expect("known operator"),
            infomin,
        }
    }

    /// `base` with this cell's operators and objective switch.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.encoder = self.encoder;
        cfg.model.aggregator = self.aggregator;
        cfg.model.objective.infomin = self.infomin;
        cfg
    }

    /// Stable identifier, usable as a directory name.
    pub fn key(&self) -> String {
        let objective = if self.infomin { "infomin" } else { "infomax" };
        format!("enc-{}_agg-{}_{objective}", self.encoder, self.aggregator)
    }
}

/// The five single-change variants followed by the full model.
pub fn table_variants() -> Vec<Variant> {
    vec![
        Variant::new("CRE_V-mean", "mean", "attention", true),
        Variant::new("CRE_V-max", "max", "attention", true),
        Variant::new("CRE_M-mean", "attention", "mean", true),
        Variant::new("CRE_M-max", "attention", "max", true),
        Variant::new("CRE_C-ori", "attention", "attention", false),
        Variant::new(FULL_MODEL, "attention", "attention", true),
    ]
}

/// Every encoder × aggregator × objective combination (18 cells). Cells
/// that coincide with a named variant carry its name.
pub fn grid_variants() -> Vec<Variant> {
    let named = table_variants();
    let mut out = Vec::with_capacity(18);
    for enc in OPERATORS {
        for agg in OPERATORS {
            for infomin in [true, false] {
                let mut v = Variant::new("", enc, agg, infomin);
                v.name = named
                    .iter()
                    .find(|n| (n.encoder, n.aggregator, n.infomin) == (v.encoder, v.aggregator, v.infomin))
                    .map_or_else(|| v.key(), |n| n.name.clone());
                out.push(v);
            }
        }
    }
    out
}

/// Looks up variants by name or key; `"table"` and `"grid"` expand to the
/// preset lists.
pub fn parse_variants(spec: &str) -> Result<Vec<Variant>> {
    match spec.trim() {
        "table" => return Ok(table_variants()),
        "grid" => return Ok(grid_variants()),
        _ => {}
    }
    let all = grid_variants();
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            all.iter()
                .find(|v| v.name == s || v.key() == s)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
        })
        .collect()
}

/// Mean scores of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub nmi: f64,
}

impl AblationRow {
    pub fn from_report(variant: &str, report: &EvalReport) -> Self {
        let get = |m| report.mean(m).unwrap_or(f64::NAN);
        Self {
            variant: variant.to_string(),
            macro_f1: get(Metric::MacroF1),
            micro_f1: get(Metric::MicroF1),
            nmi: get(Metric::Nmi),
        }
    }
}

/// Plain-text table with a `Variants | MaF1 MiF1 NMI` header. A rule
/// separates the full model row, which goes last, from the ablations.
pub fn format_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("Variants".len());
    let rule = "-".repeat(width + 3 * 8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$} {:>7} {:>7} {:>7}", "Variants", "MaF1", "MiF1", "NMI");
    let _ = writeln!(out, "{rule}");
    let (full, rest): (Vec<&AblationRow>, Vec<&AblationRow>) = rows.iter().partition(|r| r.variant == FULL_MODEL);
    let line = |out: &mut String, r: &AblationRow| {
        let _ = writeln!(
            out,
            "{:<width$} {:>7.3} {:>7.3} {:>7.3}",
            r.variant, r.macro_f1, r.micro_f1, r.nmi
        );
    };
    for r in &rest {
        line(&mut out, r);
    }
    if !full.is_empty() {
        if !rest.is_empty() {
            let _ = writeln!(out, "{rule}");
        }
        for r in full {
            line(&mut out, r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_sizes() {
        let table = table_variants();
        assert_eq!(table.len(), 6);
        let grid = grid_variants();
        assert_eq!(grid.len(), 18);
        for v in &table {
            assert_eq!(grid.iter().filter(|g| g.name == v.name).count(), 1, "{}", v.name);
        }
        let mut keys: Vec<String> = grid.iter().map(Variant::key).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 18);
    }

    #[test]
    fn parse_by_name_or_key() {
        let v = parse_variants("CRE_C-ori, enc-max_agg-max_infomax").unwrap();
        assert!(!v[0].infomin);
        assert_eq!(v[1].encoder, EncoderVariant::Max);
        assert!(parse_variants("nope").is_err());
        assert_eq!(parse_variants("grid").unwrap().len(), 18);
    }

    #[test]
    fn table_puts_full_model_last() {
        let rows: Vec<AblationRow> = table_variants()
            .iter()
            .rev()
            .map(|v| AblationRow {
                variant: v.name.clone(),
                macro_f1: 0.5,
                micro_f1: 0.25,
                nmi: 0.125,
            })
            .collect();
        let text = format_table(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 9);
        assert!(lines[0].starts_with("Variants"));
        assert!(lines[7].starts_with("---"));
        assert!(lines[8].starts_with(FULL_MODEL));
        assert!(lines[8].ends_with("0.500   0.250   0.125"));
    }
}
