use proptest::prelude::*;
use sketchparse::homotrans::{binarize, homogeneous_transform, skeletonize, HtConfig};
use sketchparse::raster::{BinaryImage, GrayImage};
use sketchparse::seed::item_rng;
use sketchparse::synthgen::{default_categories, render, SynthSpec};

/// 8-connected components by flood fill.
fn components(m: &BinaryImage) -> usize {
    let (w, h) = (m.width(), m.height());
    let mut seen = vec![false; w * h];
    let mut n = 0;
    for start in 0..w * h {
        if !m.data()[start] || seen[start] {
            continue;
        }
        n += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if m.data()[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
    }
    n
}

fn has_2x2_block(m: &BinaryImage) -> bool {
    (0..m.height().saturating_sub(1)).any(|y| {
        (0..m.width().saturating_sub(1))
            .any(|x| m.get(x, y) && m.get(x + 1, y) && m.get(x, y + 1) && m.get(x + 1, y + 1))
    })
}

fn synthetic(seed: u64, index: u64) -> GrayImage {
    let spec = SynthSpec::default();
    let cats = default_categories();
    let t = &cats[(index % cats.len() as u64) as usize];
    render(&spec, t, &mut item_rng(seed, index)).unwrap().image
}

#[test]
fn solid_bar_becomes_one_horizontal_path() {
    let bar = BinaryImage::new(9, 3, vec![true; 27]).unwrap();
    let s = skeletonize(&bar);
    assert!(s.count() >= 1);
    assert!(!has_2x2_block(&s));
    assert_eq!(components(&s), 1);
    for (i, &v) in s.data().iter().enumerate() {
        assert!(!v || bar.data()[i]);
    }
    // One pixel per occupied column, no column gaps inside the path.
    let cols: Vec<usize> = (0..9).filter(|&x| (0..3).any(|y| s.get(x, y))).collect();
    for x in &cols {
        assert_eq!((0..3).filter(|&y| s.get(*x, y)).count(), 1);
    }
    assert!(cols.windows(2).all(|p| p[1] == p[0] + 1));
    assert!(cols.len() >= 5, "path spans {cols:?}");
}

#[test]
fn single_pixel_and_empty_are_fixed() {
    let empty = BinaryImage::empty(5, 4).unwrap();
    assert_eq!(skeletonize(&empty), empty);
    let mut one = BinaryImage::empty(5, 4).unwrap();
    one.set(2, 1, true);
    assert_eq!(skeletonize(&one), one);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn skeleton_of_synthetic_sketch_is_thin_subset_with_same_topology(seed in any::<u64>(), index in 0u64..64) {
        let img = synthetic(seed, index);
        let mask = binarize(&img, HtConfig::default());
        let skel = skeletonize(&mask);
        for (s, m) in skel.data().iter().zip(mask.data()) {
            prop_assert!(!s || *m);
        }
        prop_assert!(!has_2x2_block(&skel));
        prop_assert_eq!(components(&skel), components(&mask));
    }

    #[test]
    fn transform_is_idempotent_and_two_valued(seed in any::<u64>(), index in 0u64..64, t in 1u8..=255) {
        let cfg = HtConfig { threshold: t };
        let once = homogeneous_transform(&synthetic(seed, index), cfg);
        prop_assert!(once.data().iter().all(|&v| v == 0 || v == 255));
        prop_assert_eq!(homogeneous_transform(&once, cfg), once);
    }

    #[test]
    fn skeleton_is_subset_of_any_mask(w in 1usize..12, h in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
        let mask = BinaryImage::new(w, h, bits[..w * h].to_vec()).unwrap();
        let skel = skeletonize(&mask);
        for (s, m) in skel.data().iter().zip(mask.data()) {
            prop_assert!(!s || *m);
        }
        prop_assert_eq!(components(&skel), components(&mask));
    }

    #[test]
    fn binarize_is_strict_threshold(v in any::<u8>(), t in any::<u8>()) {
        let img = GrayImage::filled(1, 1, v).unwrap();
        prop_assert_eq!(binarize(&img, HtConfig { threshold: t }).get(0, 0), v < t);
    }
}
