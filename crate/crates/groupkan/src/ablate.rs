//! Ablation sweeps: build config variants along one axis, train each on the
//! same synthetic dataset, and collect parameter counts plus final metrics.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::{generate_synthetic, split};
use crate::error::{Error, Result};
use crate::layers::StageKind;
use crate::model::{build, read_checkpoint, EmbedActKind};
use crate::train::{evaluate, train};

/// The sweep axes mirroring the reported ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    GktDepth,
    GktVsMlp,
    Groups,
    Activation,
    GktComponents,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::GktDepth => "gkt_depth",
            AblationAxis::GktVsMlp => "gkt_vs_mlp",
            AblationAxis::Groups => "groups",
            AblationAxis::Activation => "activation",
            AblationAxis::GktComponents => "gkt_components",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gkt_depth" => Ok(AblationAxis::GktDepth),
            "gkt_vs_mlp" => Ok(AblationAxis::GktVsMlp),
            "groups" => Ok(AblationAxis::Groups),
            "activation" => Ok(AblationAxis::Activation),
            "gkt_components" => Ok(AblationAxis::GktComponents),
            other => Err(Error::Configuration(format!(
                "unknown ablation axis '{other}' \
                 (expected gkt_depth|gkt_vs_mlp|groups|activation|gkt_components)"
            ))),
        }
    }
}

/// One configuration variant of a sweep.
pub struct Variant {
    pub name: String,
    pub cfg: RunConfig,
}

/// Build the variant list for an axis from a base configuration.
pub fn ablation_variants(axis: AblationAxis, base: &RunConfig) -> Vec<Variant> {
    let mut variants = Vec::new();
    match axis {
        AblationAxis::GktDepth => {
            for n in 1..=5 {
                let mut cfg = base.clone();
                cfg.model.n_gkt_layers = n;
                cfg.model.token_layers = vec![StageKind::GroupedKan; n];
                variants.push(Variant {
                    name: format!("{n}_layer"),
                    cfg,
                });
            }
        }
        AblationAxis::GktVsMlp => {
            let schedules: [(&str, [StageKind; 3]); 5] = [
                ("gkt_gkt_gkt", [StageKind::GroupedKan; 3]),
                (
                    "mlp_gkt_gkt",
                    [StageKind::Mlp, StageKind::GroupedKan, StageKind::GroupedKan],
                ),
                (
                    "gkt_mlp_gkt",
                    [StageKind::GroupedKan, StageKind::Mlp, StageKind::GroupedKan],
                ),
                (
                    "gkt_gkt_mlp",
                    [StageKind::GroupedKan, StageKind::GroupedKan, StageKind::Mlp],
                ),
                ("mlp_mlp_mlp", [StageKind::Mlp; 3]),
            ];
            for (name, kinds) in schedules {
                let mut cfg = base.clone();
                cfg.model.n_gkt_layers = 3;
                cfg.model.token_layers = kinds.to_vec();
                variants.push(Variant {
                    name: name.into(),
                    cfg,
                });
            }
        }
        AblationAxis::Groups => {
            for g_gka in [1usize, 4, 16] {
                for g_gkt in [1usize, 4, 16] {
                    let mut cfg = base.clone();
                    cfg.model.g_gka = g_gka;
                    cfg.model.g_gkt = g_gkt;
                    variants.push(Variant {
                        name: format!("gka{g_gka}_gkt{g_gkt}"),
                        cfg,
                    });
                }
            }
        }
        AblationAxis::Activation => {
            for (name, kind) in [
                ("none", EmbedActKind::NoActivation),
                ("relu", EmbedActKind::Relu),
                ("gelu", EmbedActKind::Gelu),
                ("gka", EmbedActKind::Gka),
            ] {
                let mut cfg = base.clone();
                cfg.model.embed_activation = kind;
                variants.push(Variant {
                    name: name.into(),
                    cfg,
                });
            }
        }
        AblationAxis::GktComponents => {
            for (name, stage, pw, dw) in [
                ("full", StageKind::GroupedKan, true, true),
                ("no_pwconv", StageKind::GroupedKan, false, true),
                ("no_dwconv", StageKind::GroupedKan, true, false),
                ("no_gkt", StageKind::Identity, true, true),
            ] {
                let mut cfg = base.clone();
                cfg.model.token_layers = vec![stage; cfg.model.n_gkt_layers];
                cfg.model.use_pwconv = pw;
                cfg.model.use_dwconv = dw;
                variants.push(Variant {
                    name: name.into(),
                    cfg,
                });
            }
        }
    }
    variants
}

/// One trained variant's outcome.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub params: u64,
    pub gkt_spline_params: u64,
    pub val_iou: f64,
    pub val_f1: f64,
}

/// Sweep results; rows are in variant order.
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,params,gkt_spline_params,val_iou,val_f1";

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{ABLATION_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.variant, r.params, r.gkt_spline_params, r.val_iou, r.val_f1
            )?;
        }
        Ok(())
    }
}

/// Train every variant of one axis on the shared synthetic dataset and
/// report best-checkpoint validation metrics per variant. Deterministic
/// given the base config's seed.
pub fn run_ablation(axis: AblationAxis, base: &RunConfig) -> Result<AblationTable> {
    let samples = generate_synthetic(&base.synthetic_spec())?;
    let mut rows = Vec::new();
    for v in ablation_variants(axis, base) {
        let net = build(&v.cfg.model, v.cfg.seed)?;
        let plan = v.cfg.train_plan();
        let report = train(&net, &samples, &plan)?;
        let best = read_checkpoint(&mut report.checkpoint.as_slice())?;
        let (_, val) = split(&samples, plan.split_fraction, plan.seed)?;
        let (iou, f1) = evaluate(&best, &val)?;
        let p = net.count_params();
        rows.push(AblationRow {
            variant: v.name,
            params: p.total(),
            gkt_spline_params: p.gkt_spline,
            val_iou: iou,
            val_f1: f1,
        });
    }
    Ok(AblationTable { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_lists_have_expected_shapes() {
        let base = RunConfig::default();
        assert_eq!(ablation_variants(AblationAxis::GktDepth, &base).len(), 5);
        assert_eq!(ablation_variants(AblationAxis::GktVsMlp, &base).len(), 5);
        assert_eq!(ablation_variants(AblationAxis::Groups, &base).len(), 9);
        assert_eq!(ablation_variants(AblationAxis::Activation, &base).len(), 4);
        let comp = ablation_variants(AblationAxis::GktComponents, &base);
        assert_eq!(comp.len(), 4);
        assert_eq!(comp[0].name, "full");
        assert_eq!(comp[3].name, "no_gkt");
    }

    #[test]
    fn depth_variants_have_strictly_increasing_params() {
        let base = RunConfig::default();
        let mut last = 0;
        for v in ablation_variants(AblationAxis::GktDepth, &base) {
            let net = build(&v.cfg.model, 0).unwrap();
            let p = net.count_params().total();
            assert!(p > last, "{}: {p} <= {last}", v.name);
            last = p;
        }
    }

    #[test]
    fn no_gkt_variant_has_fewer_params_than_full() {
        let base = RunConfig::default();
        let variants = ablation_variants(AblationAxis::GktComponents, &base);
        let full = build(&variants[0].cfg.model, 0).unwrap().count_params();
        let no_gkt = build(&variants[3].cfg.model, 0).unwrap().count_params();
        assert!(no_gkt.total() < full.total());
        assert_eq!(no_gkt.gkt_spline, 0);
    }

    #[test]
    fn unknown_axis_is_a_usage_error() {
        assert!(matches!(
            "bogus".parse::<AblationAxis>(),
            Err(Error::Configuration(_))
        ));
    }
}
