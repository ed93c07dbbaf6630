//! A small convolutional segmentation network with a shared trunk and named
//! branch heads, trained with momentum SGD under polynomial decay.
//!
//! Activations are CHW `f64` buffers. The input channel is `(255 − v) / 255`,
//! so ink is 1 and blank canvas is 0, and zero padding reads as blank canvas.

pub mod checkpoint;
pub mod conv;
pub mod optim;

use std::collections::BTreeMap;

use rand::Rng;

use crate::classstats::ClassStats;
use crate::error::{Error, Result};
use crate::raster::{GrayImage, LabelMap, BACKGROUND};
use crate::seed::named_rng;
use crate::swloss::{soft_weighted_loss_and_grad, LogitGrid, SoftTarget};

pub use optim::OptimState;

/// Largest accepted image side by default.
pub const DEFAULT_MAX_SIDE: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, relu: bool) -> Self {
        Self { cin, cout, kernel, relu }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    /// Global class ids emitted by the head, background first.
    pub classes: Vec<u8>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub trunk: Vec<LayerSpec>,
    pub heads: Vec<HeadSpec>,
}

/// Default layer widths: a 4-layer 16-channel 3×3 trunk, and heads made of
/// a 3×3 rectified layer to 8 channels followed by 1×1 logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    pub trunk_layers: usize,
    pub trunk_channels: usize,
    pub head_hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self { trunk_layers: 4, trunk_channels: 16, head_hidden: 8 }
    }
}

impl ArchSpec {
    pub fn standard(widths: Widths, branches: &[(String, Vec<u8>)]) -> Self {
        let c = widths.trunk_channels;
        let trunk = (0..widths.trunk_layers).map(|i| LayerSpec::new(if i == 0 { 1 } else { c }, c, 3, true)).collect();
        let heads = branches
            .iter()
            .map(|(name, classes)| HeadSpec {
                name: name.clone(),
                classes: classes.clone(),
                layers: vec![
                    LayerSpec::new(c, widths.head_hidden, 3, true),
                    LayerSpec::new(widths.head_hidden, classes.len(), 1, false),
                ],
            })
            .collect();
        Self { trunk, heads }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.trunk.is_empty() {
            return bad("trunk needs at least one layer".into());
        }
        if self.trunk[0].cin != 1 {
            return bad(format!("trunk input has {} channels, expected 1", self.trunk[0].cin));
        }
        check_chain(&self.trunk, "trunk")?;
        let trunk_out = self.trunk.last().expect("non-empty").cout;
        for h in &self.heads {
            validate_head_classes(&h.name, &h.classes)?;
            let Some(first) = h.layers.first() else {
                return bad(format!("head {} has no layers", h.name));
            };
            if first.cin != trunk_out {
                return bad(format!("head {} takes {} channels but the trunk emits {trunk_out}", h.name, first.cin));
            }
            check_chain(&h.layers, &h.name)?;
            let last = h.layers.last().expect("non-empty");
            if last.cout != h.classes.len() {
                return bad(format!("head {} emits {} channels for {} classes", h.name, last.cout, h.classes.len()));
            }
        }
        Ok(())
    }
}

fn check_chain(layers: &[LayerSpec], what: &str) -> Result<()> {
    for (i, l) in layers.iter().enumerate() {
        if l.cin == 0 || l.cout == 0 {
            return Err(Error::InvalidArgument(format!("{what} layer {i} has zero channels")));
        }
        if l.kernel % 2 == 0 || l.kernel > conv::MAX_KERNEL {
            return Err(Error::InvalidArgument(format!("{what} layer {i}: kernel {} unsupported", l.kernel)));
        }
        if i > 0 && layers[i - 1].cout != l.cin {
            return Err(Error::InvalidArgument(format!(
                "{what} layer {i} takes {} channels after {}",
                l.cin,
                layers[i - 1].cout
            )));
        }
    }
    Ok(())
}

fn validate_head_classes(name: &str, classes: &[u8]) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
        return Err(Error::InvalidArgument(format!("bad branch name {name:?}")));
    }
    if classes.first() != Some(&BACKGROUND) {
        return Err(Error::InvalidArgument(format!("head {name} must list background first")));
    }
    if classes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("head {name} classes must be strictly increasing")));
    }
    Ok(())
}

/// A named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

impl Param {
    pub fn zeros(name: String, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { name, dims, data: vec![0.0; n], frozen: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    /// `[cout, cin, k, k]`.
    pub weight: Param,
    /// `[cout]`.
    pub bias: Param,
}

impl ConvLayer {
    fn init(spec: LayerSpec, prefix: &str, seed: u64) -> Self {
        let k = spec.kernel;
        let mut weight = Param::zeros(format!("{prefix}.weight"), vec![spec.cout, spec.cin, k, k]);
        let bias = Param::zeros(format!("{prefix}.bias"), vec![spec.cout]);
        let bound = init_bound(spec);
        let mut rng = named_rng(seed, &weight.name);
        for v in &mut weight.data {
            *v = rng.gen_range(-bound..bound);
        }
        Self { spec, weight, bias }
    }

    fn rename(&mut self, prefix: &str) {
        self.weight.name = format!("{prefix}.weight");
        self.bias.name = format!("{prefix}.bias");
    }

    fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Uniform fan-in bound: `sqrt(6 / fan_in)` before a rectifier, `sqrt(3 / fan_in)` otherwise.
fn init_bound(spec: LayerSpec) -> f64 {
    let fan_in = (spec.cin * spec.kernel * spec.kernel) as f64;
    if spec.relu {
        (6.0 / fan_in).sqrt()
    } else {
        (3.0 / fan_in).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub layers: Vec<ConvLayer>,
    /// Global class of each output channel; channel 0 is background.
    pub classes: Vec<u8>,
}

impl Head {
    /// Global → local class table for this head; classes the head does not
    /// emit map to `None`.
    pub fn local_index(&self, global: u8) -> Option<usize> {
        self.classes.iter().position(|&c| c == global)
    }

    /// Maps a global label map to head-local indices.
    pub fn localize(&self, labels: &LabelMap) -> Result<LabelMap> {
        let mut table = vec![u8::MAX; labels.classes()];
        for (i, &c) in self.classes.iter().enumerate() {
            if (c as usize) < table.len() {
                table[c as usize] = i as u8;
            }
        }
        for &v in &labels.present_classes() {
            if table[v as usize] == u8::MAX {
                return Err(Error::LabelOutOfRange { value: v, classes: self.classes.len() });
            }
        }
        labels.remap(&table, self.classes.len())
    }

    /// Maps local predictions back to global classes.
    pub fn globalize(&self, local: &LabelMap, classes: usize) -> Result<LabelMap> {
        local.remap(&self.classes, classes)
    }

    /// A head for `classes` initialised from `parent`: hidden layers are
    /// copied, and output rows for classes the parent emits are copied while
    /// the rest are freshly drawn.
    pub fn derive(parent: &Head, name: &str, classes: &[u8], seed: u64) -> Result<Head> {
        validate_head_classes(name, classes)?;
        let n = parent.layers.len();
        let mut layers = parent.layers.clone();
        for (i, l) in layers.iter_mut().enumerate() {
            l.rename(&format!("head.{name}.{i}"));
            l.weight.frozen = false;
            l.bias.frozen = false;
        }
        let old = &parent.layers[n - 1];
        let spec = LayerSpec { cout: classes.len(), ..old.spec };
        let fresh = ConvLayer::init(spec, &format!("head.{name}.{}", n - 1), seed);
        let row = spec.cin * spec.kernel * spec.kernel;
        let mut last = fresh.clone();
        for (j, &c) in classes.iter().enumerate() {
            if let Some(src) = parent.local_index(c) {
                last.weight.data[j * row..(j + 1) * row].copy_from_slice(&old.weight.data[src * row..(src + 1) * row]);
                last.bias.data[j] = old.bias.data[src];
            }
        }
        layers[n - 1] = last;
        Ok(Head { layers, classes: classes.to_vec() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchNet {
    pub trunk: Vec<ConvLayer>,
    pub branches: BTreeMap<String, Head>,
    pub max_side: usize,
}

/// Per-layer parameter gradients in the layer's own layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub branch: String,
    pub trunk: Vec<LayerGrad>,
    pub head: Vec<LayerGrad>,
}

impl Gradients {
    /// `(tensor name, gradient)` pairs in network order.
    pub fn named<'a>(&'a self, net: &'a BranchNet) -> Result<Vec<(&'a Param, &'a [f64])>> {
        let head = net.branch(&self.branch)?;
        let mut out = Vec::new();
        for (l, g) in net.trunk.iter().zip(&self.trunk).chain(head.layers.iter().zip(&self.head)) {
            out.push((&l.weight, g.weight.as_slice()));
            out.push((&l.bias, g.bias.as_slice()));
        }
        Ok(out)
    }
}

/// Cached activations of one forward pass.
struct Trace {
    /// Padded input to every layer, trunk first then head.
    inputs: Vec<Vec<f64>>,
    /// Output of every layer after its nonlinearity.
    outputs: Vec<Vec<f64>>,
}

/// Input encoding: ink 1, blank 0.
pub fn encode_input(img: &GrayImage) -> Vec<f64> {
    img.data().iter().map(|&v| f64::from(255 - v) / 255.0).collect()
}

fn run_layer(layer: &ConvLayer, input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let s = layer.spec;
    let padded = conv::pad(input, s.cin, h, w, s.kernel / 2);
    let mut out = vec![0.0; s.cout * h * w];
    conv::forward_padded(&padded, s.cin, h, w, &layer.weight.data, Some(&layer.bias.data), s.cout, s.kernel, &mut out);
    if s.relu {
        for v in &mut out {
            *v = v.max(0.0);
        }
    }
    (padded, out)
}

/// CHW logits to the pixel-major grid used by the loss.
fn to_grid(chw: &[f64], classes: usize, h: usize, w: usize) -> Result<LogitGrid> {
    let hw = h * w;
    let mut data = vec![0.0; chw.len()];
    for c in 0..classes {
        for p in 0..hw {
            data[p * classes + c] = chw[c * hw + p];
        }
    }
    LogitGrid::new(w, h, classes, data)
}

fn from_grid(grid: &LogitGrid) -> Vec<f64> {
    let (c, hw) = (grid.classes(), grid.pixels());
    let mut out = vec![0.0; grid.data().len()];
    for (p, px) in grid.data().chunks_exact(c).enumerate() {
        for (k, &v) in px.iter().enumerate() {
            out[k * hw + p] = v;
        }
    }
    out
}

impl BranchNet {
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let trunk =
            arch.trunk.iter().enumerate().map(|(i, &s)| ConvLayer::init(s, &format!("trunk.{i}"), seed)).collect();
        let mut branches = BTreeMap::new();
        for h in &arch.heads {
            let layers = h
                .layers
                .iter()
                .enumerate()
                .map(|(i, &s)| ConvLayer::init(s, &format!("head.{}.{i}", h.name), seed))
                .collect();
            if branches.insert(h.name.clone(), Head { layers, classes: h.classes.clone() }).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate branch {}", h.name)));
            }
        }
        Ok(Self { trunk, branches, max_side: DEFAULT_MAX_SIDE })
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            trunk: self.trunk.iter().map(|l| l.spec).collect(),
            heads: self
                .branches
                .iter()
                .map(|(name, h)| HeadSpec {
                    name: name.clone(),
                    classes: h.classes.clone(),
                    layers: h.layers.iter().map(|l| l.spec).collect(),
                })
                .collect(),
        }
    }

    pub fn branch(&self, name: &str) -> Result<&Head> {
        self.branches.get(name).ok_or_else(|| Error::UnknownBranch(name.to_string()))
    }

    pub fn branch_mut(&mut self, name: &str) -> Result<&mut Head> {
        self.branches.get_mut(name).ok_or_else(|| Error::UnknownBranch(name.to_string()))
    }

    pub fn set_trunk_frozen(&mut self, frozen: bool) {
        for l in &mut self.trunk {
            l.weight.frozen = frozen;
            l.bias.frozen = frozen;
        }
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.set_trunk_frozen(frozen);
        for h in self.branches.values_mut() {
            for l in &mut h.layers {
                l.weight.frozen = frozen;
                l.bias.frozen = frozen;
            }
        }
    }

    /// Every tensor in a fixed order: trunk, then branches by name.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.trunk.iter().flat_map(ConvLayer::params).collect();
        for h in self.branches.values() {
            out.extend(h.layers.iter().flat_map(ConvLayer::params));
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        let trunk = self.trunk.iter_mut();
        let heads = self.branches.values_mut().flat_map(|h| h.layers.iter_mut());
        trunk.chain(heads).flat_map(|l| [&mut l.weight, &mut l.bias]).find(|p| p.name == name)
    }

    fn check_image(&self, img: &GrayImage) -> Result<()> {
        if img.width() > self.max_side || img.height() > self.max_side {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image exceeds the {} pixel side limit",
                img.width(),
                img.height(),
                self.max_side
            )));
        }
        Ok(())
    }

    /// Trunk activations for `img`, shareable across heads.
    pub fn features(&self, img: &GrayImage) -> Result<Vec<f64>> {
        self.check_image(img)?;
        let (h, w) = (img.height(), img.width());
        let mut x = encode_input(img);
        for l in &self.trunk {
            x = run_layer(l, &x, h, w).1;
        }
        Ok(x)
    }

    /// Head logits on precomputed trunk features.
    pub fn head_logits(&self, branch: &str, features: &[f64], w: usize, h: usize) -> Result<LogitGrid> {
        let head = self.branch(branch)?;
        let mut x = features.to_vec();
        for l in &head.layers {
            x = run_layer(l, &x, h, w).1;
        }
        to_grid(&x, head.classes.len(), h, w)
    }

    /// Per-pixel logits over the branch's classes at input resolution.
    pub fn forward(&self, branch: &str, img: &GrayImage) -> Result<LogitGrid> {
        self.branch(branch)?;
        let f = self.features(img)?;
        self.head_logits(branch, &f, img.width(), img.height())
    }

    /// Arg-max prediction in global class ids.
    pub fn predict(&self, branch: &str, img: &GrayImage, classes: usize) -> Result<LabelMap> {
        let local = self.forward(branch, img)?.argmax();
        self.branch(branch)?.globalize(&local, classes)
    }

    fn trace(&self, head: &Head, img: &GrayImage) -> Trace {
        let (h, w) = (img.height(), img.width());
        let layers: Vec<&ConvLayer> = self.trunk.iter().chain(&head.layers).collect();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let input = encode_input(img);
        for (i, l) in layers.iter().enumerate() {
            let x = if i == 0 { &input } else { &outputs[i - 1] };
            let (p, o) = run_layer(l, x, h, w);
            inputs.push(p);
            outputs.push(o);
        }
        Trace { inputs, outputs }
    }

    /// Loss on one image and gradients for every tensor along the branch.
    /// `target` and `stats` are in head-local class indices. Frozen tensors
    /// get zero gradients.
    pub fn backward(
        &self,
        branch: &str,
        img: &GrayImage,
        target: &SoftTarget,
        stats: &ClassStats,
    ) -> Result<(f64, Gradients)> {
        let head = self.branch(branch)?;
        self.check_image(img)?;
        let (h, w) = (img.height(), img.width());
        if target.width() != w || target.height() != h {
            return Err(Error::DimensionMismatch(format!(
                "target {}x{} for image {w}x{h}",
                target.width(),
                target.height()
            )));
        }
        let trace = self.trace(head, img);
        let layers: Vec<&ConvLayer> = self.trunk.iter().chain(&head.layers).collect();
        let logits = to_grid(trace.outputs.last().expect("non-empty"), head.classes.len(), h, w)?;
        let (loss, grad) = soft_weighted_loss_and_grad(&logits, target, stats)?;

        // Index of the earliest layer that has a trainable tensor; nothing
        // below it needs an input gradient.
        let first_live = layers.iter().position(|l| !l.weight.frozen || !l.bias.frozen).unwrap_or(layers.len());
        let mut grads: Vec<LayerGrad> = layers
            .iter()
            .map(|l| LayerGrad { weight: vec![0.0; l.weight.data.len()], bias: vec![0.0; l.bias.data.len()] })
            .collect();
        let mut g = from_grid(&grad);
        for i in (first_live..layers.len()).rev() {
            let l = layers[i];
            let s = l.spec;
            if s.relu {
                for (gv, &o) in g.iter_mut().zip(&trace.outputs[i]) {
                    if o <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            if !l.weight.frozen || !l.bias.frozen {
                let (gw, gb) = conv::backward_params(&g, s.cout, &trace.inputs[i], s.cin, h, w, s.kernel);
                if !l.weight.frozen {
                    grads[i].weight = gw;
                }
                if !l.bias.frozen {
                    grads[i].bias = gb;
                }
            }
            if i > first_live {
                g = conv::backward_input(&g, s.cout, h, w, &l.weight.data, s.cin, s.kernel);
            }
        }
        let head_grads = grads.split_off(self.trunk.len());
        Ok((loss, Gradients { branch: branch.to_string(), trunk: grads, head: head_grads }))
    }
}
