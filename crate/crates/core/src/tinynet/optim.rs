//! Momentum SGD with polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tinynet::{BranchNet, Gradients};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub base_lr: f64,
    /// Applied to the final (logit) layer of each head.
    pub head_lr_multiplier: f64,
    pub momentum: f64,
    pub power: f64,
    pub max_iter: u64,
    pub iter: u64,
    /// Velocity per tensor name, created on first update.
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(base_lr: f64, max_iter: u64) -> Self {
        Self {
            base_lr,
            head_lr_multiplier: 10.0,
            momentum: 0.9,
            power: 0.9,
            max_iter,
            iter: 0,
            velocity: BTreeMap::new(),
        }
    }

    /// `base_lr · (1 − iter / max_iter)^power`, zero once `iter ≥ max_iter`.
    pub fn lr(&self) -> f64 {
        if self.iter >= self.max_iter {
            return 0.0;
        }
        self.base_lr * (1.0 - self.iter as f64 / self.max_iter as f64).powf(self.power)
    }

    /// Same hyper-parameters with empty velocity and a zero counter.
    pub fn fresh(&self, max_iter: u64) -> Self {
        Self { max_iter, iter: 0, velocity: BTreeMap::new(), ..self.clone() }
    }

    /// One update: `v ← m·v + g; θ ← θ − lr·v` for every unfrozen tensor on
    /// the gradient's branch. Frozen tensors and their velocity are left alone.
    pub fn step(&mut self, net: &mut BranchNet, grads: &Gradients) -> Result<()> {
        let lr = self.lr();
        let head = net.branches.get_mut(&grads.branch).ok_or_else(|| Error::UnknownBranch(grads.branch.clone()))?;
        if grads.head.len() != head.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} head gradients for {} layers",
                grads.head.len(),
                head.layers.len()
            )));
        }
        let last = head.layers.len() - 1;
        let mut tensors = Vec::new();
        for (i, (l, g)) in head.layers.iter_mut().zip(&grads.head).enumerate() {
            let rate = if i == last { lr * self.head_lr_multiplier } else { lr };
            tensors.push((&mut l.weight, g.weight.as_slice(), rate));
            tensors.push((&mut l.bias, g.bias.as_slice(), rate));
        }
        if grads.trunk.len() != net.trunk.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} trunk gradients for {} layers",
                grads.trunk.len(),
                net.trunk.len()
            )));
        }
        for (l, g) in net.trunk.iter_mut().zip(&grads.trunk) {
            tensors.push((&mut l.weight, g.weight.as_slice(), lr));
            tensors.push((&mut l.bias, g.bias.as_slice(), lr));
        }
        for (p, g, _) in &tensors {
            if p.data.len() != g.len() {
                return Err(Error::DimensionMismatch(format!("gradient for {} has {} values", p.name, g.len())));
            }
        }
        for (p, g, rate) in tensors {
            if p.frozen {
                continue;
            }
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((theta, vi), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *theta -= rate * *vi;
            }
        }
        self.iter += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classstats::ClassStats;
    use crate::raster::{GrayImage, LabelMap};
    use crate::swloss::compute_soft_targets;
    use crate::tinynet::{ArchSpec, LayerGrad, Widths};

    fn net() -> BranchNet {
        let w = Widths { trunk_layers: 1, trunk_channels: 2, head_hidden: 2 };
        BranchNet::init(&ArchSpec::standard(w, &[("a".into(), vec![0, 1])]), 3).unwrap()
    }

    fn grads_like(net: &BranchNet, v: f64) -> Gradients {
        let lg = |l: &crate::tinynet::ConvLayer| LayerGrad {
            weight: vec![v; l.weight.data.len()],
            bias: vec![v; l.bias.data.len()],
        };
        Gradients {
            branch: "a".into(),
            trunk: net.trunk.iter().map(lg).collect(),
            head: net.branch("a").unwrap().layers.iter().map(lg).collect(),
        }
    }

    #[test]
    fn poly_schedule() {
        let mut o = OptimState::new(0.1, 10);
        assert_eq!(o.lr(), 0.1);
        let mut prev = o.lr();
        for i in 1..=12 {
            o.iter = i;
            assert!(o.lr() <= prev && o.lr() >= 0.0);
            prev = o.lr();
        }
        o.iter = 10;
        assert_eq!(o.lr(), 0.0);
        assert_eq!(OptimState::new(0.1, 0).lr(), 0.0);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut n = net();
        let before = n.clone();
        let mut o = OptimState::new(0.5, 10);
        o.step(&mut n, &grads_like(&before, 0.0)).unwrap();
        assert_eq!(n, before);
        assert_eq!(o.iter, 1);
    }

    #[test]
    fn plain_sgd_step() {
        let mut n = net();
        let before = n.clone();
        let mut o = OptimState::new(0.25, 10);
        o.momentum = 0.0;
        o.step(&mut n, &grads_like(&before, 2.0)).unwrap();
        let (a, b) = (&before.trunk[0].weight.data, &n.trunk[0].weight.data);
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*y, x - 0.25 * 2.0);
        }
        let (a, b) = (&before.branch("a").unwrap().layers[1].bias.data, &n.branch("a").unwrap().layers[1].bias.data);
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*y, x - 2.5 * 2.0);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut n = net();
        let mut o = OptimState::new(1.0, 1_000_000);
        o.power = 0.0;
        let g = grads_like(&n, 1.0);
        let w0 = n.trunk[0].bias.data[0];
        o.step(&mut n, &g).unwrap();
        o.step(&mut n, &g).unwrap();
        // v1 = 1, v2 = 1.9.
        assert!((n.trunk[0].bias.data[0] - (w0 - 2.9)).abs() < 1e-12);
    }

    #[test]
    fn exhausted_schedule_freezes_parameters() {
        let mut n = net();
        let mut o = OptimState::new(0.5, 2);
        o.iter = 2;
        let before = n.clone();
        for _ in 0..3 {
            o.step(&mut n, &grads_like(&before, 1.0)).unwrap();
        }
        assert_eq!(n, before);
    }

    #[test]
    fn frozen_tensors_untouched() {
        let mut n = net();
        n.set_trunk_frozen(true);
        let before = n.clone();
        let mut o = OptimState::new(0.5, 10);
        o.step(&mut n, &grads_like(&before, 1.0)).unwrap();
        assert_eq!(n.trunk, before.trunk);
        assert_ne!(n.branches, before.branches);
        assert!(!o.velocity.contains_key("trunk.0.weight"));
    }

    #[test]
    fn memorizes_one_example() {
        let w = Widths { trunk_layers: 2, trunk_channels: 8, head_hidden: 8 };
        let mut n = BranchNet::init(&ArchSpec::standard(w, &[("a".into(), vec![0, 1, 2])]), 7).unwrap();
        let (wd, ht) = (16, 12);
        let mut img = GrayImage::blank(wd, ht).unwrap();
        let mut lab = LabelMap::background(wd, ht, 3).unwrap();
        for x in 2..14 {
            for y in 5..8 {
                img.set(x, y, 0);
                lab.set(x, y, if x < 10 { 1 } else { 2 });
            }
        }
        let target = compute_soft_targets(&lab);
        let stats = ClassStats::uniform(3);
        let mut o = OptimState::new(0.02, 200);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let (loss, g) = n.backward("a", &img, &target, &stats).unwrap();
            first.get_or_insert(loss);
            last = loss;
            o.step(&mut n, &g).unwrap();
        }
        let final_loss = n.backward("a", &img, &target, &stats).unwrap().0;
        assert!(final_loss < 0.1 * first.unwrap(), "{} -> {last} -> {final_loss}", first.unwrap());
    }
}
