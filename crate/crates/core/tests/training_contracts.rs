use proptest::prelude::*;
use sketchparse::classstats::ClassStats;
use sketchparse::raster::Dataset;
use sketchparse::staged::{
    evaluate, init_super_net, train, train_baseline, train_stage1, train_stage2, Mode, StagedPlan, Taxonomy,
    TrainedModel,
};
use sketchparse::swloss::compute_soft_targets;
use sketchparse::synthgen::{generate, SynthSpec};
use sketchparse::tinynet::{checkpoint, ArchSpec, BranchNet, OptimState, Widths};

fn small_plan(mode: Mode) -> StagedPlan {
    StagedPlan {
        stage1_iters: 24,
        stage2_iters: 6,
        mode,
        widths: Widths { trunk_layers: 2, trunk_channels: 4, head_hidden: 3 },
        ..StagedPlan::default()
    }
}

fn corpus(per: usize, seed: u64) -> (Dataset, Taxonomy) {
    let d = generate(&SynthSpec { images_per_category: per, canvas: 32, seed, ..SynthSpec::default() }).unwrap();
    let t = Taxonomy::from_dataset(&d).unwrap().with_classes(&d).unwrap();
    (d, t)
}

#[test]
fn stage_two_freezes_trunk_and_routes_by_category() {
    let (data, tax) = corpus(3, 1);
    let plan = small_plan(Mode::Staged);
    let mut net = init_super_net(&tax, &plan).unwrap();
    let mut opt = plan.stage1_opt.state(plan.stage1_iters as u64);
    let log = train_stage1(&data, &tax, &plan, &mut net, &mut opt).unwrap();
    assert_eq!(log.len(), plan.stage1_iters);
    let (tuned, logs) = train_stage2(&data, &tax, &plan, &net).unwrap();
    assert_eq!(tuned.trunk.len(), net.trunk.len());
    for (a, b) in tuned.trunk.iter().zip(&net.trunk) {
        assert_eq!(a.weight.data, b.weight.data);
        assert_eq!(a.bias.data, b.bias.data);
        assert!(a.weight.frozen && a.bias.frozen);
    }
    let cats: Vec<&str> = tax.categories();
    assert_eq!(tuned.branches.keys().map(String::as_str).collect::<Vec<_>>(), {
        let mut c = cats.clone();
        c.sort();
        c
    });
    assert_eq!(logs.len(), cats.len());
    for cat in cats {
        assert_eq!(tuned.branch(cat).unwrap().classes, tax.category_classes(cat).unwrap());
    }
}

#[test]
fn zero_stage_two_iterations_copy_the_super_head() {
    let (data, tax) = corpus(2, 2);
    let plan = small_plan(Mode::Staged);
    let net = init_super_net(&tax, &plan).unwrap();
    let (tuned, _) = train_stage2(&data, &tax, &StagedPlan { stage2_iters: 0, ..plan }, &net).unwrap();
    for cat in tax.categories() {
        let sup = net.branch(tax.super_of(cat).unwrap()).unwrap();
        let sub = tuned.branch(cat).unwrap();
        for (a, b) in sub.layers.iter().zip(&sup.layers).take(sub.layers.len() - 1) {
            assert_eq!(a.weight.data, b.weight.data);
        }
        let (last_sub, last_sup) = (sub.layers.last().unwrap(), sup.layers.last().unwrap());
        let per_row = last_sub.weight.data.len() / sub.classes.len();
        for (i, c) in sub.classes.iter().enumerate() {
            let j = sup.classes.iter().position(|s| s == c).unwrap();
            assert_eq!(
                last_sub.weight.data[i * per_row..(i + 1) * per_row],
                last_sup.weight.data[j * per_row..(j + 1) * per_row]
            );
            assert_eq!(last_sub.bias.data[i], last_sup.bias.data[j]);
        }
    }
}

#[test]
fn zero_stage_one_iterations_leave_the_net_unchanged() {
    let (data, tax) = corpus(2, 3);
    let plan = StagedPlan { stage1_iters: 0, ..small_plan(Mode::SuperBranch) };
    let mut net = init_super_net(&tax, &plan).unwrap();
    let before = net.clone();
    let mut opt = plan.stage1_opt.state(0);
    assert!(train_stage1(&data, &tax, &plan, &mut net, &mut opt).unwrap().is_empty());
    assert_eq!(net, before);
}

#[test]
fn full_branch_with_singleton_groups_equals_super_branch() {
    let (data, tax) = corpus(2, 4);
    let flat = tax.flattened();
    let full = train_baseline(&data, &tax, &small_plan(Mode::FullBranch), Mode::FullBranch).unwrap();
    let sup = train_baseline(&data, &flat, &small_plan(Mode::SuperBranch), Mode::SuperBranch).unwrap();
    assert_eq!(full.nets, sup.nets);
}

#[test]
fn training_is_deterministic_and_thread_count_free() {
    let (data, tax) = corpus(2, 5);
    let (test, _) = corpus(1, 6);
    let plan = small_plan(Mode::Staged);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let m = train(&data, &tax, &plan).unwrap();
            let r = evaluate(&m, &test).unwrap();
            (m.nets, m.logs, r.average_iou.to_bits())
        })
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(4));
}

#[test]
fn saved_model_predicts_identically() {
    let (data, tax) = corpus(2, 7);
    let m = train(&data, &tax, &small_plan(Mode::Independent)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let loaded = TrainedModel::load(dir.path()).unwrap();
    assert_eq!(loaded.nets, m.nets);
    assert_eq!(loaded.routes, m.routes);
    assert!(dir.path().join("independent-quadruped.log").exists());
    for it in data.items() {
        assert_eq!(loaded.predict(&it.category, &it.image).unwrap(), m.predict(&it.category, &it.image).unwrap());
    }
}

fn tiny_arch() -> ArchSpec {
    ArchSpec::standard(Widths { trunk_layers: 1, trunk_channels: 2, head_hidden: 2 }, &[("x".into(), vec![0, 1])])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), iters in 0u64..5, frozen in any::<bool>()) {
        let mut net = BranchNet::init(&tiny_arch(), seed).unwrap();
        net.set_trunk_frozen(frozen);
        let mut opt = OptimState::new(0.05, 10);
        let (d, _) = corpus(1, seed);
        let it = &d.items()[0];
        let head = net.branch("x").unwrap().clone();
        let local = head.localize(&it.labels.remap(&[0, 1, 1, 1, 1, 1, 1, 1, 1, 1], 2).unwrap()).unwrap();
        for _ in 0..iters {
            let (_, g) = net.backward("x", &it.image, &compute_soft_targets(&local), &ClassStats::uniform(2)).unwrap();
            opt.step(&mut net, &g).unwrap();
        }
        let bytes = checkpoint::encode(&net, Some(&opt));
        let (n2, o2) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(n2, net);
        prop_assert_eq!(o2, Some(opt));
    }

    #[test]
    fn forward_is_finite_and_shaped(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let net = BranchNet::init(&tiny_arch(), seed).unwrap();
        let (d, _) = corpus(1, seed);
        let img = d.items()[0].image.clone();
        let crop = sketchparse::raster::GrayImage::new(
            w.min(img.width()), h.min(img.height()),
            (0..h.min(img.height())).flat_map(|y| (0..w.min(img.width())).map(move |x| (x, y))).map(|(x, y)| img.get(x, y)).collect(),
        ).unwrap();
        let logits = net.forward("x", &crop).unwrap();
        prop_assert_eq!((logits.width(), logits.height(), logits.classes()), (crop.width(), crop.height(), 2));
        prop_assert!(logits.data().iter().all(|v| v.is_finite()));
    }
}
