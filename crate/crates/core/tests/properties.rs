use izoo_core::difaug::posterize_value;
use izoo_core::qc::{dataset_stats, filter_scenes, SceneScore};
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<SceneScore>> {
    prop::collection::vec((0u32..4, 15.0f64..40.0), 0..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (class_id, psnr))| SceneScore {
                scene_id: format!("s{i}"),
                class_id,
                psnr,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn filter_is_an_idempotent_subset(records in scores()) {
        let kept = filter_scenes(&records);
        let ids: Vec<&String> = records.iter().map(|r| &r.scene_id).collect();
        prop_assert!(kept.iter().all(|k| ids.contains(&k)));
        let again: Vec<SceneScore> = records.iter().filter(|r| kept.contains(&r.scene_id)).cloned().collect();
        prop_assert_eq!(filter_scenes(&again), kept.clone());
        for r in &again {
            prop_assert!(r.psnr >= 25.0);
            prop_assert!(again.iter().filter(|q| q.class_id == r.class_id).count() >= 5);
        }
    }

    #[test]
    fn stats_ignore_record_order(records in scores(), rot in 0usize..40) {
        let pairs: Vec<(u32, f64)> = records.iter().map(|r| (r.class_id, r.psnr)).collect();
        let mut rotated = pairs.clone();
        if !rotated.is_empty() {
            let k = rot % rotated.len();
            rotated.rotate_left(k);
        }
        prop_assert_eq!(dataset_stats(&pairs), dataset_stats(&rotated));
        let s = dataset_stats(&pairs);
        prop_assert_eq!(s.classes.iter().map(|c| c.count).sum::<usize>(), pairs.len());
        prop_assert!(s.classes.windows(2).all(|w| w[0].class_id < w[1].class_id));
    }

    #[test]
    fn posterize_is_idempotent_and_stays_in_range(v in 0.0f64..=1.0, bits in 0u32..8) {
        let p = posterize_value(v, bits);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(posterize_value(p, bits), p);
    }
}
