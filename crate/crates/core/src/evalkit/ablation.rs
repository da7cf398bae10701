//! Ablation harness: sweep one design axis, train each variant briefly, and
//! report the tracking metrics side by side.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneVariant;
use crate::error::{Error, Result};
use crate::evalkit::metrics::{average_inference_time, delta_accuracy, mte, EvalFrame};
use crate::model::{ModelConfig, Tracker};
use crate::params::ModelParams;
use crate::phantom::{generate, PhantomSample, PhantomSpec};
use crate::refiner::ReasoningMode;
use crate::training::{train, OptimState, TrainConfig};

pub const WINDOW_SWEEP: [usize; 4] = [5, 7, 9, 11];
pub const TEMPORAL_SWEEP: [BackboneVariant; 4] = [
    BackboneVariant::FuseAdd,
    BackboneVariant::FuseCat,
    BackboneVariant::Btsm,
    BackboneVariant::Itsm,
];
pub const REASONING_SWEEP: [ReasoningMode; 3] = [
    ReasoningMode::FullJoint,
    ReasoningMode::CrossAttention,
    ReasoningMode::Knp,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// Correlation window sizes 5, 7, 9, 11.
    Window,
    /// Temporal feature enrichment strategies.
    Temporal,
    /// Cross-point reasoning strategies.
    Reasoning,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(Self::Window),
            "temporal" => Ok(Self::Temporal),
            "reasoning" => Ok(Self::Reasoning),
            other => Err(Error::InvalidConfig(format!("unknown ablation axis `{other}`"))),
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Self::Window => "window",
            Self::Temporal => "temporal",
            Self::Reasoning => "reasoning",
        }
    }

    pub fn variants(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        match self {
            Self::Window => WINDOW_SWEEP
                .iter()
                .map(|&r| {
                    let mut cfg = base.clone();
                    cfg.correlation.window = r;
                    (format!("{r}x{r}"), cfg)
                })
                .collect(),
            Self::Temporal => TEMPORAL_SWEEP
                .iter()
                .map(|&v| {
                    let mut cfg = base.clone();
                    cfg.backbone.variant = v;
                    (v.token().to_string(), cfg)
                })
                .collect(),
            Self::Reasoning => REASONING_SWEEP
                .iter()
                .map(|&m| {
                    let mut cfg = base.clone();
                    cfg.refiner.mode = m;
                    (m.token().to_string(), cfg)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub delta1: f64,
    pub delta2: f64,
    pub delta4: f64,
    pub mte: f64,
    pub ait_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,delta1,delta2,delta4,mte,ait\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{:.3},{:.4}\n",
                r.variant, r.delta1, r.delta2, r.delta4, r.mte, r.ait_seconds
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("## Ablation: {}\n\n", self.axis.token()));
        out.push_str("| variant | d1 | d2 | d4 | MTE | AIT (s) |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.3} | {:.4} |\n",
                r.variant, r.delta1, r.delta2, r.delta4, r.mte, r.ait_seconds
            ));
        }
        out
    }

    /// True when AIT does not decrease along the row order (the expected
    /// trend over growing window sizes; reported, never asserted).
    pub fn ait_non_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].ait_seconds >= w[0].ait_seconds - 1e-9)
    }
}

#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub train_samples: usize,
    pub eval_samples: usize,
}

/// Evaluate one trained tracker on held-out phantoms.
pub fn evaluate_tracker(
    tracker: &Tracker<f32>,
    eval_set: &[PhantomSample<f32>],
) -> Result<(f64, f64, f64, f64, f64)> {
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut d4 = 0.0;
    let mut med = 0.0;
    for sample in eval_set {
        let pred = tracker.track_final(&sample.video, &sample.gt.queries, sample.gt.query_frame)?;
        let ev = EvalFrame::new(&pred, &sample.gt, sample.spec.height, sample.spec.width)?;
        d1 += delta_accuracy(&ev, 1.0);
        d2 += delta_accuracy(&ev, 2.0);
        d4 += delta_accuracy(&ev, 4.0);
        med += mte(&ev)?;
    }
    let n = eval_set.len() as f64;
    let ait = average_inference_time(eval_set.len(), |i| {
        tracker
            .track_final(
                &eval_set[i].video,
                &eval_set[i].gt.queries,
                eval_set[i].gt.query_frame,
            )
            .map(|_| ())
    })?;
    Ok((d1 / n, d2 / n, d4 / n, med / n, ait))
}

/// Train and evaluate every variant along one axis.
pub fn ablation_run(axis: AblationAxis, setup: &AblationSetup) -> Result<AblationReport> {
    if setup.eval_samples == 0 {
        return Err(Error::InvalidConfig("ablation needs eval samples".into()));
    }
    let eval_set: Vec<PhantomSample<f32>> = (0..setup.eval_samples)
        .map(|i| {
            generate::<f32>(
                &setup.phantom,
                setup.phantom.seed.wrapping_add(0x5EED_0000 + i as u64),
            )
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (name, cfg) in axis.variants(&setup.model) {
        let mut params: ModelParams<f32> = cfg.init_params(1, setup.train.seed);
        let mut opt = OptimState::new(&params);
        train(
            &cfg,
            &setup.train,
            &setup.phantom,
            setup.train_samples,
            &mut params,
            &mut opt,
        )?;
        let tracker = Tracker {
            config: cfg,
            params,
            input_channels: 1,
        };
        let (delta1, delta2, delta4, med, ait_seconds) = evaluate_tracker(&tracker, &eval_set)?;
        rows.push(AblationRow {
            variant: name,
            delta1,
            delta2,
            delta4,
            mte: med,
            ait_seconds,
        });
    }
    Ok(AblationReport { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_tokens_round_trip() {
        for axis in [AblationAxis::Window, AblationAxis::Temporal, AblationAxis::Reasoning] {
            assert_eq!(AblationAxis::parse(axis.token()).unwrap(), axis);
        }
        assert!(AblationAxis::parse("windows").is_err());
    }

    #[test]
    fn variant_lists_match_the_sweeps() {
        let base = crate::model::micro_config();
        let names: Vec<String> = AblationAxis::Window
            .variants(&base)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, vec!["5x5", "7x7", "9x9", "11x11"]);
        let names: Vec<String> = AblationAxis::Temporal
            .variants(&base)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, vec!["fuse-add", "fuse-cat", "btsm", "itsm"]);
        let names: Vec<String> = AblationAxis::Reasoning
            .variants(&base)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, vec!["full-joint", "cross-attention", "knp"]);
    }

    #[test]
    fn report_formats_are_well_formed() {
        let report = AblationReport {
            axis: AblationAxis::Window,
            rows: vec![
                AblationRow {
                    variant: "5x5".into(),
                    delta1: 10.0,
                    delta2: 20.0,
                    delta4: 40.0,
                    mte: 3.25,
                    ait_seconds: 0.17,
                },
                AblationRow {
                    variant: "7x7".into(),
                    delta1: 11.0,
                    delta2: 21.0,
                    delta4: 41.0,
                    mte: 3.0,
                    ait_seconds: 0.21,
                },
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("variant,delta1,delta2,delta4,mte,ait\n"));
        assert_eq!(csv.lines().count(), 3);
        let md = report.to_markdown();
        assert!(md.contains("| 5x5 | 10.00 | 20.00 | 40.00 | 3.250 | 0.1700 |"));
        assert!(report.ait_non_decreasing());
    }
}
