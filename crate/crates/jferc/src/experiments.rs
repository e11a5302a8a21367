//! Ablations, fusion-method comparison and hyperparameter sweeps.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use jferc_core::model::FusionMode;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::run::report_split;
use crate::train::{train, RunLog, Trained};

/// Largest cross-modal finite-difference sensitivity tolerated at J = 0.
pub const FIREWALL_TOL: f64 = 1e-12;
const FIREWALL_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoJfm,
    NoJoint,
    NoIcl,
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoJfm, Variant::NoJoint, Variant::NoIcl, Variant::Concat];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoJfm => "no_jfm",
            Variant::NoJoint => "no_joint",
            Variant::NoIcl => "no_icl",
            Variant::Concat => "concat",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Ours",
            Variant::NoJfm => "w/o JFM",
            Variant::NoJoint => "w/o v_j",
            Variant::NoIcl => "w/o ICL",
            Variant::Concat => "Concatenate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Variant::ALL.into_iter().find(|v| v.key() == s) {
            Some(v) => Ok(v),
            None => bail!("unknown variant {s:?}; expected one of full, no_jfm, no_joint, no_icl, concat"),
        }
    }

    /// `base` with this variant's switches, all others cleared.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.ablation = Default::default();
        cfg.fusion.mode = FusionMode::Jfm;
        match self {
            Variant::Full => {}
            Variant::NoJfm => cfg.ablation.no_jfm = true,
            Variant::NoJoint => cfg.ablation.no_joint = true,
            Variant::NoIcl => cfg.ablation.no_icl = true,
            Variant::Concat => cfg.fusion.mode = FusionMode::Concat,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub runs: Vec<VariantOutcome>,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => xs[n / 2],
        _ => 0.5 * (xs[n / 2 - 1] + xs[n / 2]),
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn signed_pct(x: f64) -> String {
    format!("{:+.2}", 100.0 * x)
}

impl AblationReport {
    /// Median `(accuracy, weighted F1)` of a variant over seeds.
    pub fn median(&self, v: Variant) -> Option<(f64, f64)> {
        let mut acc: Vec<f64> = self.runs.iter().filter(|r| r.variant == v).map(|r| r.accuracy).collect();
        let mut f1: Vec<f64> = self.runs.iter().filter(|r| r.variant == v).map(|r| r.weighted_f1).collect();
        (!acc.is_empty()).then(|| (median(&mut acc), median(&mut f1)))
    }

    /// Signed differences from the full model in percentage points.
    pub fn delta(&self, v: Variant) -> Option<(f64, f64)> {
        let (a, f) = self.median(v)?;
        let (a0, f0) = self.median(Variant::Full)?;
        Some((a - a0, f - f0))
    }

    /// Two tables in the layout of the paper's ablation and fusion-method
    /// tables: the full model as `/`, every other row as a signed delta.
    pub fn table(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!(
            "Median over seeds {} of test metrics in %; rows are differences from the full model (negative = worse).\n",
            seeds.join(",")
        );
        let mut section = |title: &str, ours: &str, rows: &[Variant]| {
            let _ = writeln!(s, "\n{title}\n{:<14}{:>8}{:>8}", "Method", "Acc", "W-F1");
            let _ = writeln!(s, "{ours:<14}{:>8}{:>8}", "/", "/");
            for &v in rows.iter().filter(|v| self.variants.contains(v)) {
                if let Some((da, df)) = self.delta(v) {
                    let _ = writeln!(s, "{:<14}{:>8}{:>8}", v.label(), signed_pct(da), signed_pct(df));
                }
            }
        };
        section("Ablation", "Ours", &[Variant::NoJfm, Variant::NoJoint, Variant::NoIcl]);
        section("Fusion methods", "JFM(ours)", &[Variant::Concat]);
        s.push_str("\nAbsolute\n");
        for &v in &self.variants {
            if let Some((a, f)) = self.median(v) {
                let _ = writeln!(s, "{:<14}{:>8}{:>8}", v.label(), pct(a), pct(f));
            }
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,accuracy,weighted_f1,delta_accuracy,delta_weighted_f1\n");
        let full = |seed: u64| self.runs.iter().find(|r| r.variant == Variant::Full && r.seed == seed);
        for r in &self.runs {
            let (da, df) = match full(r.seed) {
                Some(f) => (signed_pct(r.accuracy - f.accuracy), signed_pct(r.weighted_f1 - f.weighted_f1)),
                None => ("NaN".into(), "NaN".into()),
            };
            let _ = writeln!(s, "{},{},{},{},{da},{df}", r.variant.key(), r.seed, pct(r.accuracy), pct(r.weighted_f1));
        }
        for &v in &self.variants {
            if let Some((a, f)) = self.median(v) {
                let (da, df) = self.delta(v).unwrap_or((f64::NAN, f64::NAN));
                let _ = writeln!(s, "{},median,{},{},{},{}", v.key(), pct(a), pct(f), signed_pct(da), signed_pct(df));
            }
        }
        s
    }
}

/// Cross-modal sensitivity of a `J = 0` model on one example; errors when
/// either direction leaks.
pub fn assert_firewall(trained: &Trained, data: &Dataset) -> Result<(f64, f64)> {
    let example = data.split(report_split(data))[0];
    let s = trained
        .model
        .cross_modal_sensitivity(&trained.store, &example.input, FIREWALL_STEP)?;
    if s.audio_to_mt > FIREWALL_TOL || s.text_to_tm > FIREWALL_TOL {
        bail!(
            "information firewall violated at J = 0: audio→text-stream CLS {:e}, text→audio-stream CLS {:e}",
            s.audio_to_mt,
            s.text_to_tm
        );
    }
    Ok((s.audio_to_mt, s.text_to_tm))
}

/// Train and test one configuration on `data`.
pub fn train_and_test(cfg: &RunConfig, data: &Dataset, log: &mut RunLog) -> Result<(Trained, f64, f64)> {
    let (trained, _) = train(cfg, data, log, None)?;
    let split = report_split(data);
    let m = trained.evaluate(&data.split(split))?;
    log.line(format!("{} accuracy {:.4} weighted_f1 {:.4}", split.name(), m.accuracy, m.weighted_f1));
    Ok((trained, m.accuracy, m.weighted_f1))
}

/// Every variant for every seed. The data split stays fixed across seeds;
/// the seed drives initialization and batch order.
pub fn run_ablation(base: &RunConfig, data: &Dataset, variants: &[Variant], seeds: &[u64], log: &mut RunLog) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        bail!("ablation needs at least one seed and one variant");
    }
    let mut variants = variants.to_vec();
    if !variants.contains(&Variant::Full) {
        variants.insert(0, Variant::Full);
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for &v in &variants {
            let mut cfg = v.configure(base);
            cfg.seed = seed;
            cfg.data.split_seed = Some(base.split_seed());
            log.line(format!("== variant {} seed {seed}", v.key()));
            let (trained, accuracy, weighted_f1) = train_and_test(&cfg, data, log)?;
            if v == Variant::NoJoint {
                let (a, t) = assert_firewall(&trained, data)?;
                log.line(format!("firewall holds: sensitivities {a:e} {t:e}"));
            }
            runs.push(VariantOutcome {
                variant: v,
                seed,
                accuracy,
                weighted_f1,
            });
        }
    }
    Ok(AblationReport {
        variants,
        seeds: seeds.to_vec(),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Blocks,
    JointLen,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Blocks => "n_blocks",
            SweepParam::JointLen => "joint_len",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "n_blocks" | "model.n_blocks" | "N" => Ok(SweepParam::Blocks),
            "joint_len" | "model.joint_len" | "J" => Ok(SweepParam::JointLen),
            _ => bail!("unknown sweep parameter {s:?}; expected n_blocks or joint_len"),
        }
    }

    pub fn default_grid(self) -> Vec<usize> {
        match self {
            SweepParam::Blocks => vec![1, 2, 3, 4, 5],
            SweepParam::JointLen => vec![1, 2, 4, 8, 16, 24, 32],
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: usize) {
        match self {
            SweepParam::Blocks => cfg.model.n_blocks = value,
            SweepParam::JointLen => cfg.model.joint_len = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    /// NaN when the point failed.
    pub accuracy: f64,
    pub weighted_f1: f64,
}

/// One train and test per grid value, all with the base seed. A failing
/// point becomes a NaN row and the sweep moves on.
pub fn run_sweep(base: &RunConfig, data: &Dataset, param: SweepParam, grid: &[usize], log: &mut RunLog) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        bail!("sweep grid is empty");
    }
    let mut out = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value);
        log.line(format!("== {} = {value}", param.key()));
        let point = match train_and_test(&cfg, data, log) {
            Ok((_, accuracy, weighted_f1)) => SweepPoint {
                value,
                accuracy,
                weighted_f1,
            },
            Err(e) => {
                log.line(format!("point failed: {e:#}"));
                SweepPoint {
                    value,
                    accuracy: f64::NAN,
                    weighted_f1: f64::NAN,
                }
            }
        };
        out.push(point);
    }
    Ok(out)
}

pub fn sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut s = String::from("param,value,accuracy,weighted_f1\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", param.key(), p.value, pct(p.accuracy), pct(p.weighted_f1));
    }
    s
}
