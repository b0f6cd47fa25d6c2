use lesionseg::augment::{build_pipeline, AugmentationConfig};
use lesionseg::dataset::synthetic_sample;
use lesionseg::metrics::{ApMode, MetricConfig};
use lesionseg::{FundusSample, LesionClass, Split};
use lesionseg_cli::evaluate::evaluate_source;

fn samples() -> Vec<FundusSample> {
    (0..4).map(|i| synthetic_sample(&format!("s{i}"), Split::Test, 48, 48, 30 + i)).collect()
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let data = samples();
    let pipeline = build_pipeline(AugmentationConfig::disabled().with_target_size(48, 48), 0).unwrap();
    for ap_mode in [ApMode::Component, ApMode::Image] {
        let config = MetricConfig {
            ap_mode,
            ..MetricConfig::default()
        };
        let report = evaluate_source(&data, &pipeline, &[config], |batch| {
            Ok(batch.iter().map(|s| s.masks.mapv(f32::from)).collect())
        })
        .unwrap()
        .remove(0);
        assert_eq!(report.num_images, 4);
        for class in LesionClass::ALL {
            let present = data.iter().any(|s| s.has_lesion(class));
            assert_eq!(report.ap(class), if present { 1.0 } else { 0.0 }, "{class}");
            assert_eq!(report.iou(class), 1.0);
        }
        if LesionClass::ALL.iter().all(|&c| data.iter().any(|s| s.has_lesion(c))) {
            assert_eq!(report.map, 1.0);
        }
        assert_eq!(report.miou, 1.0);
    }
}

#[test]
fn empty_split_is_an_error() {
    let pipeline = build_pipeline(AugmentationConfig::disabled().with_target_size(48, 48), 0).unwrap();
    let empty: Vec<FundusSample> = Vec::new();
    assert!(evaluate_source(&empty, &pipeline, &[MetricConfig::default()], |_| unreachable!()).is_err());
}
