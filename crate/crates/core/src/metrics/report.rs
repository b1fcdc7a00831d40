use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::overlap::{LobeDice, N_LOBES};
use super::stats::{one_way_anova, summarize, Anova, Summary};
use crate::error::{Error, Result};
use crate::volume::{LabelMask, ReconKernel, ScanMetadata, Vendor, LOBE_NAMES};

/// Structures whose volumes are compared in agreement analyses.
pub const STRUCTURES: [&str; 6] = ["lung", "RUL", "RML", "RLL", "LUL", "LLL"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub dice: LobeDice,
}

/// Per-case Dice scores plus cohort summaries per lobe and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseScores>,
    pub lobes: [Summary; N_LOBES],
    pub overall: Summary,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseScores>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("metrics report needs at least one case".into()));
        }
        let column = |f: &dyn Fn(&CaseScores) -> f64| cases.iter().map(f).collect::<Vec<_>>();
        let mut lobes = Vec::with_capacity(N_LOBES);
        for l in 0..N_LOBES {
            lobes.push(summarize(&column(&|c| c.dice.lobes[l]))?);
        }
        let overall = summarize(&column(&|c| c.dice.overall))?;
        Ok(Self {
            lobes: lobes.try_into().expect("five lobes"),
            overall,
            cases,
        })
    }

    pub fn mean_overall(&self) -> f64 {
        self.overall.mean
    }

    /// `case_id,RUL,RML,RLL,LUL,LLL,overall`, one row per case.
    pub fn case_csv(&self) -> String {
        let mut s = format!("case_id,{},overall\n", LOBE_NAMES.join(","));
        for c in &self.cases {
            let _ = write!(s, "{}", c.case_id);
            for v in c.dice.lobes.iter().chain([&c.dice.overall]) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// One row per lobe plus `overall`: mean, SD, quartiles and a
    /// `mean ± sd` column as printed in lobe-wise result tables.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("structure,n,mean,sd,q1,median,q3,mean_pm_sd\n");
        let rows = LOBE_NAMES.iter().copied().zip(self.lobes.iter()).chain([("overall", &self.overall)]);
        for (name, m) in rows {
            let _ = writeln!(
                s,
                "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4} ± {:.4}",
                m.n, m.mean, m.sd, m.q1, m.median, m.q3, m.mean, m.sd
            );
        }
        s
    }
}

/// Volumes in millilitres of the whole lung (labels 1..=5) and each lobe.
pub fn structure_volumes_ml(mask: &LabelMask) -> [f64; 6] {
    let h = mask.histogram();
    let v = mask.voxel_volume_ml();
    let lung: usize = h[1..].iter().sum();
    [lung as f64 * v, h[1] as f64 * v, h[2] as f64 * v, h[3] as f64 * v, h[4] as f64 * v, h[5] as f64 * v]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    ZSpacing,
    Vendor,
    ReconKernel,
}

impl Grouping {
    pub const ALL: [Grouping; 3] = [Grouping::ZSpacing, Grouping::Vendor, Grouping::ReconKernel];

    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::ZSpacing => "z_spacing",
            Grouping::Vendor => "vendor",
            Grouping::ReconKernel => "recon_kernel",
        }
    }

    /// Buckets reported even when empty.
    pub fn canonical_buckets(self) -> Vec<String> {
        match self {
            Grouping::ZSpacing => Z_BUCKETS.iter().map(|s| s.to_string()).collect(),
            Grouping::Vendor => Vendor::CLINICAL.iter().map(|v| format!("{v:?}")).collect(),
            Grouping::ReconKernel => ReconKernel::CLINICAL.iter().map(|k| format!("{k:?}").to_lowercase()).collect(),
        }
    }

    pub fn bucket_of(self, meta: &ScanMetadata) -> String {
        match self {
            Grouping::ZSpacing => {
                let z = meta.z_spacing;
                let i = if z <= 1.0 {
                    0
                } else if z < 2.0 {
                    1
                } else {
                    2
                };
                Z_BUCKETS[i].to_string()
            }
            Grouping::Vendor => format!("{:?}", meta.vendor),
            Grouping::ReconKernel => format!("{:?}", meta.recon_kernel).to_lowercase(),
        }
    }
}

const Z_BUCKETS: [&str; 3] = ["z<=1", "1<z<2", "z>=2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub n: usize,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub grouping: Grouping,
    pub buckets: Vec<Bucket>,
    pub anova: Option<Anova>,
    pub warning: Option<String>,
}

/// Groups per-case overall Dice scores by scan metadata, summarises each
/// bucket and runs a one-way ANOVA across them. ANOVA is skipped (with a
/// warning) when a bucket is empty or holds a single case.
pub fn robustness_buckets(scores: &[f64], metas: &[ScanMetadata], grouping: Grouping) -> Result<BucketReport> {
    if scores.len() != metas.len() {
        return Err(Error::ShapeMismatch(format!("{} scores but {} metadata records", scores.len(), metas.len())));
    }
    let mut labels = grouping.canonical_buckets();
    for m in metas {
        let b = grouping.bucket_of(m);
        if !labels.contains(&b) {
            labels.push(b);
        }
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    for (s, m) in scores.iter().zip(metas) {
        let b = grouping.bucket_of(m);
        groups[labels.iter().position(|l| *l == b).expect("bucket registered")].push(*s);
    }
    let buckets = labels
        .iter()
        .zip(&groups)
        .map(|(label, g)| {
            Ok(Bucket {
                label: label.clone(),
                n: g.len(),
                summary: if g.is_empty() { None } else { Some(summarize(g)?) },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let thin: Vec<&str> = labels.iter().zip(&groups).filter(|(_, g)| g.len() < 2).map(|(l, _)| l.as_str()).collect();
    let (anova, warning) = if thin.is_empty() {
        (Some(one_way_anova(&groups)?), None)
    } else {
        let w = format!("ANOVA over {} skipped: buckets with fewer than 2 cases: {}", grouping.as_str(), thin.join(", "));
        log::warn!("{w}");
        (None, Some(w))
    };
    Ok(BucketReport {
        grouping,
        buckets,
        anova,
        warning,
    })
}
