//! Central finite-difference checks of the analytic gradients.
//!
//! Relative error of one coordinate is `|a − n| / max(|a|, |n|, 1e-8)` with
//! `a` analytic and `n = (L(x + h) − L(x − h)) / 2h`.

use rand::Rng;

use crate::classstats::ClassStats;
use crate::error::Result;
use crate::raster::{GrayImage, LabelMap};
use crate::seed::{item_rng, named_rng};
use crate::swloss::{compute_soft_targets, soft_weighted_grad, soft_weighted_loss, LogitGrid};
use crate::tinynet::{ArchSpec, BranchNet, Widths};

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A random loss problem: up to 6×6 pixels, 2..=8 classes, logits in
/// [−3, 3], positive class weights.
pub fn random_loss_case<R: Rng>(rng: &mut R) -> Result<(LogitGrid, LabelMap, ClassStats)> {
    let (w, h) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let c = rng.gen_range(2..=8);
    let labels = LabelMap::new(w, h, c, (0..w * h).map(|_| rng.gen_range(0..c as u8)).collect())?;
    let logits = LogitGrid::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(-3.0..3.0)).collect())?;
    let stats = ClassStats::from_alpha((0..c).map(|_| rng.gen_range(0.2..4.0)).collect())?;
    Ok((logits, labels, stats))
}

/// Every logit coordinate of `cases` random problems.
pub fn loss_gradient_suite(seed: u64, cases: usize) -> Result<FdReport> {
    let mut coordinates = 0;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = item_rng(seed, case as u64);
        let (x, labels, stats) = random_loss_case(&mut rng)?;
        let target = compute_soft_targets(&labels);
        let g = soft_weighted_grad(&x, &target, &stats)?;
        for k in 0..x.data().len() {
            let eval = |d: f64| {
                let mut y = x.clone();
                y.data_mut()[k] += d;
                soft_weighted_loss(&y, &target, &stats)
            };
            let n = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(g.data()[k], n));
            coordinates += 1;
        }
    }
    Ok(FdReport { cases, coordinates, max_rel_error: worst })
}

/// Random parameter coordinates of a small two-branch network on a 12×10
/// two-part blob.
pub fn network_gradient_suite(seed: u64, coordinates: usize) -> Result<FdReport> {
    let widths = Widths { trunk_layers: 2, trunk_channels: 4, head_hidden: 3 };
    let arch = ArchSpec::standard(widths, &[("a".into(), vec![0, 1, 2]), ("b".into(), vec![0, 3])]);
    let mut net = BranchNet::init(&arch, seed)?;
    // Random biases keep blank-canvas activations off the rectifier kink.
    let mut rng = named_rng(seed, "gradcheck/bias");
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    for name in names.iter().filter(|n| n.ends_with("bias")) {
        if let Some(p) = net.param_mut(name) {
            p.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
    let (w, h) = (12, 10);
    let mut img = GrayImage::blank(w, h)?;
    let mut labels = LabelMap::background(w, h, 3)?;
    for y in 2..h - 2 {
        for x in 3..w - 3 {
            img.set(x, y, 0);
            labels.set(x, y, if x < w / 2 { 1 } else { 2 });
        }
    }
    let target = compute_soft_targets(&labels);
    let stats = ClassStats::from_alpha(vec![0.5, 2.0, 1.5])?;
    let (_, grads) = net.backward("a", &img, &target, &stats)?;
    let named: Vec<(String, Vec<f64>)> = grads
        .named(&net)?
        .into_iter()
        .filter(|(p, _)| !p.name.starts_with("head.b."))
        .map(|(p, g)| (p.name.clone(), g.to_vec()))
        .collect();
    let mut rng = named_rng(seed, "gradcheck/coords");
    let mut worst: f64 = 0.0;
    for _ in 0..coordinates {
        let (name, g) = &named[rng.gen_range(0..named.len())];
        let i = rng.gen_range(0..g.len());
        let eval = |d: f64| -> Result<f64> {
            let mut n = net.clone();
            if let Some(p) = n.param_mut(name) {
                p.data[i] += d;
            }
            soft_weighted_loss(&n.forward("a", &img)?, &target, &stats)
        };
        let n = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        worst = worst.max(relative_error(g[i], n));
    }
    Ok(FdReport { cases: 1, coordinates, max_rel_error: worst })
}
