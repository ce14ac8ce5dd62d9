//! End-to-end pipeline behavior on generated scenes.

use dhr_core::pipeline::{dhr_propagate, DhrConfig};
use dhr_core::synth::{generate_scene, SynthConfig};
use dhr_core::tensor::argmax_labels;

/// A clean scene (nothing absorbed, no noise) passes through unchanged: the
/// propagation must not damage an already-correct mask.
#[test]
fn noiseless_faithful_scene_is_a_no_op() {
    let cfg = SynthConfig { seed: 3, absorb_prob: 0.0, noise_sigma: 0.0, ..SynthConfig::default() };
    for idx in 0..3 {
        let record = generate_scene(&cfg, idx).unwrap();
        let scene = &record.bundle;
        let base_labels = argmax_labels(&scene.base_mask);
        assert_eq!(&base_labels, scene.ground_truth.as_ref().unwrap());
        let out = dhr_propagate(scene, &DhrConfig::default()).unwrap();
        assert!(out.provenance.vanished_classes.is_empty());
        assert_eq!(argmax_labels(&out.m_dh), base_labels, "scene {idx} changed a faithful mask");
    }
}

/// The canonical failure: an absorbed minor must reappear after propagation.
#[test]
fn absorbed_minor_reappears() {
    let cfg = SynthConfig { seed: 9, ..SynthConfig::default() };
    for idx in 0..5 {
        let record = generate_scene(&cfg, idx).unwrap();
        let scene = &record.bundle;
        let classes = scene.num_classes;
        let base_areas = argmax_labels(&scene.base_mask).class_areas(classes);
        for &minor in &record.absorbed_classes {
            assert_eq!(base_areas[minor as usize], 0, "scene {idx}: minor not absorbed in base");
        }
        let out = dhr_propagate(scene, &DhrConfig::default()).unwrap();
        let dh_areas = argmax_labels(&out.m_dh).class_areas(classes);
        for &minor in &record.absorbed_classes {
            assert!(dh_areas[minor as usize] > 0, "scene {idx}: minor {minor} not recovered");
            assert!(
                out.provenance.vanished_classes.contains(&minor),
                "scene {idx}: minor {minor} not flagged as vanished"
            );
        }
    }
}

/// The per-scene gain claimed by the pipeline, scene by scene: the refined
/// mask scores at least as well as the base mask and strictly better when a
/// class was absorbed.
#[test]
fn refined_miou_dominates_base() {
    let cfg = SynthConfig { seed: 17, ..SynthConfig::default() };
    for idx in 0..5 {
        let record = generate_scene(&cfg, idx).unwrap();
        let scene = &record.bundle;
        let gt = scene.ground_truth.as_ref().unwrap();
        let classes = scene.num_classes;
        let out = dhr_propagate(scene, &DhrConfig::default()).unwrap();
        let miou_of = |stack: &dhr_core::tensor::ScoreStack| {
            dhr_core::eval::miou(&dhr_core::eval::confusion(&argmax_labels(stack), gt, classes).unwrap()).mean
        };
        let base = miou_of(&scene.base_mask);
        let dh = miou_of(&out.m_dh);
        assert!(dh > base, "scene {idx}: dh {dh:.4} <= base {base:.4}");
    }
}
