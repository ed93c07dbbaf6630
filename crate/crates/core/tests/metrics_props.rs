use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchparse::metrics::{average_iou, class_iou, confusion, sketch_iou, top_k_accuracy, RetrievalRun};
use sketchparse::raster::LabelMap;

/// IOU of class `c` by direct pixel counting.
fn brute_class_iou(pred: &LabelMap, gt: &LabelMap, c: u8) -> Option<f64> {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p == c && g == c) as u64;
        union += (p == c || g == c) as u64;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

fn brute_sketch_iou(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let present: Vec<u8> = (0..gt.classes() as u8).filter(|c| gt.data().contains(c)).collect();
    present.iter().map(|&c| brute_class_iou(pred, gt, c).unwrap()).sum::<f64>() / present.len() as f64
}

fn pair(n: usize, classes: usize) -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (prop::collection::vec(0..classes as u8, n * n), prop::collection::vec(0..classes as u8, n * n))
        .prop_map(move |(a, b)| (LabelMap::new(n, n, classes, a).unwrap(), LabelMap::new(n, n, classes, b).unwrap()))
}

proptest! {
    #[test]
    fn ious_match_brute_force((pred, gt) in pair(16, 6)) {
        let counts = confusion(&pred, &gt).unwrap();
        prop_assert_eq!(counts.total(), 256);
        for c in 0..6u8 {
            prop_assert_eq!(class_iou(&counts, c as usize), brute_class_iou(&pred, &gt, c));
        }
        let s = sketch_iou(&pred, &gt).unwrap();
        prop_assert_eq!(s, brute_sketch_iou(&pred, &gt));
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(sketch_iou(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn average_is_plain_mean(pairs in prop::collection::vec(pair(5, 3), 1..8)) {
        let expect = pairs.iter().map(|(p, g)| brute_sketch_iou(p, g)).sum::<f64>() / pairs.len() as f64;
        prop_assert_eq!(average_iou(&pairs).unwrap(), expect);
    }

    #[test]
    fn top_k_is_monotone(seed in any::<u64>(), queries in 1usize..30, gallery in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..gallery).collect();
        let rankings: Vec<Vec<usize>> = (0..queries).map(|_| { let mut r = ids.clone(); r.shuffle(&mut rng); r }).collect();
        let truth: Vec<usize> = (0..queries).map(|q| q % gallery).collect();
        let run = RetrievalRun::new(rankings, truth).unwrap();
        let accs: Vec<f64> = (1..=gallery + 2).map(|k| top_k_accuracy(&run, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*accs.last().unwrap(), 1.0);
    }
}
