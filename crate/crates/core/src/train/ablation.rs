//! The four-variant component ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, VariantFlags};
use super::{train_and_evaluate, EpochRecord, RunOutcome};
use crate::error::{Error, Result};
use crate::report::Summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Attention backbone alone on degraded input.
    Dami,
    DamiFdmdsLambda02,
    DamiFdmdsLambda01,
    /// Stem, reconstruction weight 0.1 and ET-emphasis class weights.
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Dami,
        AblationVariant::DamiFdmdsLambda02,
        AblationVariant::DamiFdmdsLambda01,
        AblationVariant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Dami => "DAMI",
            AblationVariant::DamiFdmdsLambda02 => "DAMI+FDMDS(λ_rec=0.2)",
            AblationVariant::DamiFdmdsLambda01 => "DAMI+FDMDS(λ_rec=0.1)",
            AblationVariant::Full => "DAMI+FDMDS+ET_weight(λ_rec=0.1)",
        }
    }

    /// Short ASCII name used for output directories.
    pub fn slug(self) -> &'static str {
        match self {
            AblationVariant::Dami => "dami",
            AblationVariant::DamiFdmdsLambda02 => "dami_fdmds_l02",
            AblationVariant::DamiFdmdsLambda01 => "dami_fdmds_l01",
            AblationVariant::Full => "full",
        }
    }

    pub fn from_slug(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }

    /// Variant switches; `literal_eq3` is inherited from the base config.
    pub fn flags(self, literal_eq3: bool) -> VariantFlags {
        let (use_fdmds, lambda_rec, et_weight) = match self {
            AblationVariant::Dami => (false, 0.0, false),
            AblationVariant::DamiFdmdsLambda02 => (true, 0.2, false),
            AblationVariant::DamiFdmdsLambda01 => (true, 0.1, false),
            AblationVariant::Full => (true, 0.1, true),
        };
        VariantFlags {
            use_fdmds,
            lambda_rec,
            et_weight,
            literal_eq3,
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.set_flags(self.flags(base.net.fdmds.literal_eq3));
        c
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub summary: Summary,
    pub outcome: RunOutcome,
}

pub const ABLATION_HEADER: &str = "variant,dice_et,dice_tc,dice_wt,hd95_et,hd95_tc,hd95_wt";

/// Mean held-out Dice and HD95 per variant and region.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let (d, h) = (&r.summary.dice, &r.summary.hd95);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant.label(),
            d[0].mean,
            d[1].mean,
            d[2].mean,
            h[0].mean,
            h[1].mean,
            h[2].mean
        );
    }
    s
}

/// Trains and evaluates each variant on the same data and seed. With `out`
/// set, each run writes into `<out>/<slug>/` and the table goes to
/// `<out>/ablation.csv`.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[AblationVariant],
    out: Option<&Path>,
    mut on_epoch: impl FnMut(AblationVariant, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let config = v.apply(base);
        let dir = out.map(|o| o.join(v.slug()));
        let outcome = train_and_evaluate(&config, dir.as_deref(), |e| on_epoch(v, e))?;
        if outcome.report.cases.is_empty() {
            return Err(Error::Data("ablation needs held-out cases".into()));
        }
        rows.push(AblationRow {
            variant: v,
            summary: outcome.report.summary(),
            outcome,
        });
    }
    if let Some(o) = out {
        let p = o.join("ablation.csv");
        std::fs::write(&p, ablation_csv(&rows)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}
