//! Desk-scale training pilot: trains a small tracker on phantoms and reports
//! loss halving plus the delta2 margin over the static baseline.
//!
//! Usage: pilot [samples] [epochs] [eval_count]

use std::time::Instant;

use myotrack_core::backbone::BackboneConfig;
use myotrack_core::correlation::CorrConfig;
use myotrack_core::evalkit::{delta_accuracy, EvalFrame};
use myotrack_core::model::{ModelConfig, Tracker};
use myotrack_core::phantom::{generate, PhantomSpec};
use myotrack_core::refiner::RefinerConfig;
use myotrack_core::trajectory::TrajectoryState;
use myotrack_core::training::{train, OptimState, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let samples: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(40);
    let epochs: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(3);
    let eval_count: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(12);

    let model = ModelConfig {
        backbone: BackboneConfig::default(),
        correlation: CorrConfig {
            window: 5,
            token_dim: 16,
        },
        refiner: RefinerConfig::default(),
    };
    let train_cfg = TrainConfig {
        epochs,
        ..Default::default()
    };
    let phantom = PhantomSpec {
        frames: 8,
        points: 8,
        amplitude: 0.3,
        amplitude_jitter: 0.5,
        random_phase: true,
        noise_sigma: 0.01,
        grain_sigma: 1.5,
        seed: 100,
        ..Default::default()
    };
    phantom.validate().unwrap();

    let mut params = model.init_params::<f32>(1, 42);
    println!(
        "params: {} tensors, {} values",
        params.len(),
        params.total_values()
    );

    let t0 = Instant::now();
    let mut opt = OptimState::new(&params);
    let report = train(&model, &train_cfg, &phantom, samples, &mut params, &mut opt).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "trained {} clips x {} epochs in {:.1}s ({:.2} s/clip-pass)",
        samples,
        epochs,
        train_secs,
        train_secs / (samples * epochs) as f64
    );
    for (e, l) in report.loss_curve.iter().enumerate() {
        println!("epoch {e}: loss {l:.4}");
    }

    // held-out evaluation vs the static baseline
    let tracker = Tracker {
        config: model,
        params,
        input_channels: 1,
    };
    let mut d2_model = 0.0;
    let mut d2_static = 0.0;
    let te = Instant::now();
    for i in 0..eval_count {
        let sample = generate::<f32>(&phantom, 777_000 + i as u64).unwrap();
        let pred = tracker
            .track_final(&sample.video, &sample.gt.queries, 0)
            .unwrap();
        let ev = EvalFrame::new(&pred, &sample.gt, phantom.height, phantom.width).unwrap();
        d2_model += delta_accuracy(&ev, 2.0);
        let static_pred =
            TrajectoryState::broadcast(&sample.gt.queries, sample.gt.frames(), 0).unwrap();
        let evs = EvalFrame::new(&static_pred, &sample.gt, phantom.height, phantom.width).unwrap();
        d2_static += delta_accuracy(&evs, 2.0);
    }
    d2_model /= eval_count as f64;
    d2_static /= eval_count as f64;
    println!(
        "eval {:.1}s: delta2 model {:.2} vs static {:.2} (margin {:+.2})",
        te.elapsed().as_secs_f64(),
        d2_model,
        d2_static,
        d2_model - d2_static
    );
    let halved = report.loss_curve.last().unwrap() / report.loss_curve.first().unwrap();
    println!("loss ratio last/first: {halved:.3}");
}
