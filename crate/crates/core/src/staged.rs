//! Staged shared/branch training and its baselines.
//!
//! Stage 1 trains the trunk jointly with one head per super-category. Stage 2
//! freezes the trunk, replaces each super head by copies restricted to each
//! sub-category's classes, and fine-tunes every copy on its own category.
//! The baselines train one net per category (`independent`), a shared trunk
//! with one head per category (`full_branch`), or stop after stage 1
//! (`super_branch`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::classstats::{apply_background_boost, ClassCounts, ClassStats};
use crate::error::{Error, Result};
use crate::metrics::{confusion, sketch_iou, ConfusionCounts};
use crate::raster::{Dataset, GrayImage, LabelMap};
use crate::seed::named_rng;
use crate::swloss::{compute_soft_targets, SoftTarget};
use crate::tinynet::{checkpoint, ArchSpec, BranchNet, Head, OptimState, Widths};

/// Super-categories and their categories, optionally with part classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    groups: Vec<(String, Vec<String>)>,
    category_classes: BTreeMap<String, Vec<u8>>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.contains(|c: char| c.is_whitespace() || c == ',')
}

impl Taxonomy {
    /// Each category must appear under exactly one super-category.
    pub fn new(groups: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (sup, cats) in &groups {
            if !valid_name(sup) {
                return Err(Error::InvalidArgument(format!("bad super-category name {sup:?}")));
            }
            if cats.is_empty() {
                return Err(Error::InvalidArgument(format!("super-category {sup} has no categories")));
            }
            if groups.iter().filter(|(s, _)| s == sup).count() > 1 {
                return Err(Error::InvalidArgument(format!("super-category {sup} listed twice")));
            }
            for c in cats {
                if !valid_name(c) {
                    return Err(Error::InvalidArgument(format!("bad category name {c:?}")));
                }
                if let Some(prev) = seen.insert(c.clone(), sup.clone()) {
                    return Err(Error::InvalidArgument(format!("category {c} under both {prev} and {sup}")));
                }
            }
        }
        if groups.is_empty() {
            return Err(Error::Empty("taxonomy"));
        }
        Ok(Self { groups, category_classes: BTreeMap::new() })
    }

    /// Lines `super<TAB>cat[,cat...]`; `#` lines and blank lines are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut groups = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Manifest { path: origin.to_path_buf(), line: i + 1, msg: msg.into() };
            let (sup, cats) = line.split_once('\t').ok_or_else(|| err("expected super<TAB>categories"))?;
            let cats: Vec<String> = cats.split(',').map(|c| c.trim().to_string()).collect();
            if cats.iter().any(|c| c.is_empty()) {
                return Err(err("empty category name"));
            }
            groups.push((sup.trim().to_string(), cats));
        }
        Self::new(groups)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (sup, cats) in &self.groups {
            let _ = writeln!(s, "{sup}\t{}", cats.join(","));
        }
        s
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Grouping recorded in the dataset's own items.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for it in data.items() {
            match groups.iter_mut().find(|(s, _)| *s == it.super_category) {
                Some((_, cats)) if cats.contains(&it.category) => {}
                Some((_, cats)) => cats.push(it.category.clone()),
                None => groups.push((it.super_category.clone(), vec![it.category.clone()])),
            }
        }
        Self::new(groups)
    }

    pub fn groups(&self) -> &[(String, Vec<String>)] {
        &self.groups
    }

    pub fn categories(&self) -> Vec<&str> {
        self.groups.iter().flat_map(|(_, c)| c.iter().map(String::as_str)).collect()
    }

    pub fn super_of(&self, category: &str) -> Option<&str> {
        self.groups.iter().find(|(_, c)| c.iter().any(|x| x == category)).map(|(s, _)| s.as_str())
    }

    /// One super-category per category.
    pub fn flattened(&self) -> Self {
        let groups = self.categories().into_iter().map(|c| (c.to_string(), vec![c.to_string()])).collect();
        Self { groups, category_classes: self.category_classes.clone() }
    }

    /// Records each category's part classes (background always included)
    /// from `data`. Categories without items get background only.
    pub fn with_classes(mut self, data: &Dataset) -> Result<Self> {
        let found = data.category_classes();
        for c in found.keys() {
            if self.super_of(c).is_none() {
                return Err(Error::UnknownCategory(c.clone()));
            }
        }
        self.category_classes = self
            .categories()
            .into_iter()
            .map(|c| (c.to_string(), found.get(c).cloned().unwrap_or_else(|| vec![0])))
            .collect();
        Ok(self)
    }

    pub fn category_classes(&self, category: &str) -> Result<&[u8]> {
        self.category_classes
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))
    }

    /// Sorted union of the classes of the super-category's members.
    pub fn super_classes(&self, sup: &str) -> Result<Vec<u8>> {
        let (_, cats) =
            self.groups.iter().find(|(s, _)| s == sup).ok_or_else(|| Error::UnknownCategory(sup.to_string()))?;
        let mut all: Vec<u8> = Vec::new();
        for c in cats {
            all.extend_from_slice(self.category_classes(c)?);
        }
        all.sort_unstable();
        all.dedup();
        Ok(all)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Independent,
    FullBranch,
    SuperBranch,
    Staged,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Mode::Independent),
            "full" | "full_branch" => Ok(Mode::FullBranch),
            "super" | "super_branch" => Ok(Mode::SuperBranch),
            "staged" => Ok(Mode::Staged),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Independent => "independent",
            Mode::FullBranch => "full",
            Mode::SuperBranch => "super",
            Mode::Staged => "staged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Boundary-softened targets with median-frequency class weights.
    SoftWeighted,
    /// One-hot targets, unit weights.
    Standard,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft-weighted" | "soft_weighted" | "sw" => Ok(LossKind::SoftWeighted),
            "standard" | "ce" => Ok(LossKind::Standard),
            _ => Err(Error::InvalidArgument(format!("unknown loss {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub head_lr_multiplier: f64,
    pub momentum: f64,
    pub power: f64,
}

impl OptimConfig {
    pub fn state(&self, max_iter: u64) -> OptimState {
        OptimState {
            head_lr_multiplier: self.head_lr_multiplier,
            momentum: self.momentum,
            power: self.power,
            ..OptimState::new(self.base_lr, max_iter)
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { base_lr: 0.01, head_lr_multiplier: 10.0, momentum: 0.9, power: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagedPlan {
    pub stage1_iters: usize,
    /// Per category.
    pub stage2_iters: usize,
    pub mode: Mode,
    pub seed: u64,
    pub stage1_opt: OptimConfig,
    pub stage2_opt: OptimConfig,
    pub loss: LossKind,
    /// Multiplier on the background weight.
    pub background_boost: f64,
    pub widths: Widths,
}

impl Default for StagedPlan {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 200,
            mode: Mode::Staged,
            seed: 0,
            stage1_opt: OptimConfig::default(),
            stage2_opt: OptimConfig::default(),
            loss: LossKind::SoftWeighted,
            background_boost: 1.0,
            widths: Widths::default(),
        }
    }
}

impl StagedPlan {
    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Staged && (self.stage1_iters == 0 || self.stage2_iters == 0) {
            return Err(Error::InvalidArgument("staged mode needs both stage iteration counts above zero".into()));
        }
        if !(self.background_boost > 0.0 && self.background_boost.is_finite()) {
            return Err(Error::InvalidArgument("background boost must be positive".into()));
        }
        for o in [self.stage1_opt, self.stage2_opt] {
            if !(o.base_lr >= 0.0 && o.momentum >= 0.0 && o.power >= 0.0 && o.head_lr_multiplier >= 0.0) {
                return Err(Error::InvalidArgument("optimizer settings must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Steps given to each isolated net in independent mode: an equal share
    /// of the stage-1 count, so every baseline takes the same total steps.
    pub fn independent_iters(&self, categories: usize) -> usize {
        self.stage1_iters / categories.max(1)
    }
}

/// One training example bound to a branch.
struct Sample<'a> {
    image: &'a GrayImage,
    branch: String,
    target: SoftTarget,
}

/// Targets and per-branch weights for `items` routed by `route`.
fn prepare<'a>(
    net: &BranchNet,
    data: &'a Dataset,
    route: impl Fn(&str) -> Result<String> + Sync,
    plan: &StagedPlan,
) -> Result<(Vec<Sample<'a>>, BTreeMap<String, ClassStats>)> {
    let samples = data
        .items()
        .par_iter()
        .map(|it| {
            let branch = route(&it.category)?;
            let local = net.branch(&branch)?.localize(&it.labels)?;
            let target = match plan.loss {
                LossKind::SoftWeighted => compute_soft_targets(&local),
                LossKind::Standard => SoftTarget::one_hot(&local),
            };
            Ok(Sample { image: &it.image, branch, target })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = BTreeMap::new();
    for (name, head) in &net.branches {
        let classes = head.classes.len();
        let s = match plan.loss {
            LossKind::Standard => ClassStats::uniform(classes),
            LossKind::SoftWeighted => {
                let mut counts = ClassCounts::zeros(classes);
                let mut any = false;
                for (s, it) in samples.iter().zip(data.items()) {
                    if s.branch == *name {
                        counts = counts.merge(&ClassCounts::from_labels(&head.localize(&it.labels)?, classes)?);
                        any = true;
                    }
                }
                if any {
                    ClassStats::from_counts(counts)?
                } else {
                    ClassStats::uniform(classes)
                }
            }
        };
        stats.insert(name.clone(), apply_background_boost(&s, plan.background_boost)?);
    }
    Ok((samples, stats))
}

/// `iters` sample indices: every epoch shuffles each group and then takes
/// one item per group in turn until all groups are drained.
fn round_robin(groups: &[Vec<usize>], iters: usize, seed: u64, stream: &str) -> Vec<usize> {
    let mut rng = named_rng(seed, stream);
    let total: usize = groups.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(iters);
    if total == 0 {
        return out;
    }
    while out.len() < iters {
        let mut epoch: Vec<Vec<usize>> = groups.to_vec();
        for g in &mut epoch {
            g.shuffle(&mut rng);
        }
        let longest = epoch.iter().map(Vec::len).max().unwrap_or(0);
        for r in 0..longest {
            for g in &epoch {
                if let Some(&i) = g.get(r) {
                    if out.len() < iters {
                        out.push(i);
                    }
                }
            }
        }
    }
    out
}

fn run_schedule(
    net: &mut BranchNet,
    samples: &[Sample],
    stats: &BTreeMap<String, ClassStats>,
    order: &[usize],
    opt: &mut OptimState,
    what: &str,
) -> Result<Vec<f64>> {
    let mut log = Vec::with_capacity(order.len());
    for (step, &i) in order.iter().enumerate() {
        let s = &samples[i];
        let (loss, grads) = net.backward(&s.branch, s.image, &s.target, &stats[&s.branch])?;
        opt.step(net, &grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if step % 100 == 0 {
            debug!("{what} step {step}: loss {loss:.6}");
        }
        log.push(loss);
    }
    Ok(log)
}

fn category_groups(data: &Dataset, categories: &[&str]) -> Vec<Vec<usize>> {
    categories
        .iter()
        .map(|c| data.items().iter().enumerate().filter(|(_, it)| it.category == *c).map(|(i, _)| i).collect())
        .collect()
}

fn check_categories(data: &Dataset, tax: &Taxonomy) -> Result<()> {
    for it in data.items() {
        if tax.super_of(&it.category).is_none() {
            return Err(Error::UnknownCategory(it.category.clone()));
        }
    }
    Ok(())
}

/// A freshly initialised shared net with one head per super-category.
pub fn init_super_net(tax: &Taxonomy, plan: &StagedPlan) -> Result<BranchNet> {
    let branches =
        tax.groups().iter().map(|(s, _)| Ok((s.clone(), tax.super_classes(s)?))).collect::<Result<Vec<_>>>()?;
    BranchNet::init(&ArchSpec::standard(plan.widths, &branches), plan.seed)
}

/// Joint training of the trunk and super heads; returns the per-step losses.
pub fn train_stage1(
    data: &Dataset,
    tax: &Taxonomy,
    plan: &StagedPlan,
    net: &mut BranchNet,
    opt: &mut OptimState,
) -> Result<Vec<f64>> {
    check_categories(data, tax)?;
    if plan.stage1_iters == 0 {
        return Ok(Vec::new());
    }
    let (samples, stats) = prepare(
        net,
        data,
        |c| Ok(tax.super_of(c).ok_or_else(|| Error::UnknownCategory(c.to_string()))?.to_string()),
        plan,
    )?;
    let cats = tax.categories();
    let order = round_robin(&category_groups(data, &cats), plan.stage1_iters, plan.seed, "stage1");
    info!("stage 1: {} steps over {} samples", order.len(), samples.len());
    run_schedule(net, &samples, &stats, &order, opt, "stage1")
}

/// Splits every super head into per-category heads and fine-tunes them with
/// the trunk frozen. Returns the new net and per-category losses.
pub fn train_stage2(
    data: &Dataset,
    tax: &Taxonomy,
    plan: &StagedPlan,
    net: &BranchNet,
) -> Result<(BranchNet, BTreeMap<String, Vec<f64>>)> {
    check_categories(data, tax)?;
    let mut base = net.clone();
    base.set_trunk_frozen(true);
    let cats: Vec<String> = tax.categories().into_iter().map(String::from).collect();
    let trained = cats
        .par_iter()
        .map(|cat| -> Result<(String, Head, OptimState, Vec<f64>)> {
            let sup = tax.super_of(cat).expect("category from taxonomy");
            let head = Head::derive(net.branch(sup)?, cat, tax.category_classes(cat)?, plan.seed)?;
            let mut single = BranchNet { branches: BTreeMap::from([(cat.clone(), head)]), ..base.clone() };
            let subset = data.filter_category(cat);
            let mut opt = plan.stage2_opt.state(plan.stage2_iters as u64);
            let (samples, stats) = prepare(&single, &subset, |_| Ok(cat.clone()), plan)?;
            let all: Vec<usize> = (0..samples.len()).collect();
            let order = round_robin(&[all], plan.stage2_iters, plan.seed, &format!("stage2/{cat}"));
            let log = run_schedule(&mut single, &samples, &stats, &order, &mut opt, cat)?;
            let head = single.branches.remove(cat).expect("trained branch");
            Ok((cat.clone(), head, opt, log))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = BranchNet { branches: BTreeMap::new(), ..base };
    let mut logs = BTreeMap::new();
    for (cat, head, _, log) in trained {
        out.branches.insert(cat.clone(), head);
        logs.insert(cat, log);
    }
    Ok((out, logs))
}

/// Where a category's predictions come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub net: usize,
    pub branch: String,
}

/// One or more nets plus a category → (net, branch) routing table.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub nets: Vec<(String, BranchNet)>,
    pub routes: BTreeMap<String, Route>,
    /// Global class count of the training data.
    pub classes: usize,
    /// Per-step loss logs keyed by stage name.
    pub logs: BTreeMap<String, Vec<f64>>,
}

impl TrainedModel {
    fn shared(
        net: BranchNet,
        routes: BTreeMap<String, String>,
        classes: usize,
        logs: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        let routes = routes.into_iter().map(|(c, b)| (c, Route { net: 0, branch: b })).collect();
        Self { nets: vec![("model".into(), net)], routes, classes, logs }
    }

    pub fn route(&self, category: &str) -> Result<(&BranchNet, &str)> {
        let r = self.routes.get(category).ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
        Ok((&self.nets[r.net].1, r.branch.as_str()))
    }

    pub fn predict(&self, category: &str, img: &GrayImage) -> Result<LabelMap> {
        let (net, branch) = self.route(category)?;
        net.predict(branch, img, self.classes)
    }

    /// Writes `<net>.ckpt` files, `routes.tsv` and one `<stage>.log` per loss log.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut routes = String::from("# classes n | net file | route category file branch\n");
        let _ = writeln!(routes, "classes\t{}", self.classes);
        for (name, _) in &self.nets {
            let _ = writeln!(routes, "net\t{name}.ckpt");
        }
        for (cat, r) in &self.routes {
            let _ = writeln!(routes, "route\t{cat}\t{}.ckpt\t{}", self.nets[r.net].0, r.branch);
        }
        for (name, net) in &self.nets {
            checkpoint::save(dir.join(format!("{name}.ckpt")), net, None)?;
        }
        fs::write(dir.join("routes.tsv"), routes)?;
        for (name, log) in &self.logs {
            fs::write(dir.join(format!("{}.log", name.replace('/', "-"))), format_log(log))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("routes.tsv");
        let text = fs::read_to_string(&path)?;
        let mut classes = None;
        let mut nets: Vec<(String, BranchNet)> = Vec::new();
        let mut routes = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Manifest { path: path.clone(), line: i + 1, msg: msg.into() };
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["classes", n] => classes = Some(n.parse::<usize>().map_err(|_| err("bad class count"))?),
                ["net", file] => {
                    load_net(dir, file, &mut nets).map_err(|m| m.unwrap_or_else(|| err(CKPT_NAME)))?;
                }
                ["route", cat, file, branch] => {
                    let idx = load_net(dir, file, &mut nets).map_err(|m| m.unwrap_or_else(|| err(CKPT_NAME)))?;
                    nets[idx].1.branch(branch)?;
                    routes.insert(cat.to_string(), Route { net: idx, branch: branch.to_string() });
                }
                _ => return Err(err("expected `classes`, `net` or `route` record")),
            }
        }
        let classes =
            classes.ok_or(Error::Manifest { path: path.clone(), line: 0, msg: "missing class count".into() })?;
        Ok(Self { nets, routes, classes, logs: BTreeMap::new() })
    }
}

const CKPT_NAME: &str = "checkpoint must be a plain `.ckpt` file name";

/// Index of the net stored in `file`, loading it on first sight. `Err(None)` marks a bad name.
fn load_net(dir: &Path, file: &str, nets: &mut Vec<(String, BranchNet)>) -> std::result::Result<usize, Option<Error>> {
    let stem = file.strip_suffix(".ckpt").ok_or(None)?;
    if stem.is_empty() || stem.contains(['/', '\\']) || stem.starts_with('.') {
        return Err(None);
    }
    if let Some(i) = nets.iter().position(|(n, _)| n == stem) {
        return Ok(i);
    }
    nets.push((stem.to_string(), checkpoint::load(dir.join(file)).map_err(Some)?.0));
    Ok(nets.len() - 1)
}

/// `iter<TAB>loss` lines with six decimals.
pub fn format_log(losses: &[f64]) -> String {
    let mut s = String::new();
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{l:.6}");
    }
    s
}

fn all_categories_routed(tax: &Taxonomy, f: impl Fn(&str) -> String) -> BTreeMap<String, String> {
    tax.categories().into_iter().map(|c| (c.to_string(), f(c))).collect()
}

/// Shared trunk with one head per group of `tax`, trained jointly.
fn train_shared(data: &Dataset, tax: &Taxonomy, plan: &StagedPlan, head_per_category: bool) -> Result<TrainedModel> {
    let grouping = if head_per_category { tax.flattened() } else { tax.clone() };
    let mut net = init_super_net(&grouping, plan)?;
    let mut opt = plan.stage1_opt.state(plan.stage1_iters as u64);
    let log = train_stage1(data, &grouping, plan, &mut net, &mut opt)?;
    let routes = all_categories_routed(tax, |c| grouping.super_of(c).expect("known").to_string());
    Ok(TrainedModel::shared(net, routes, data.classes(), BTreeMap::from([("stage1".to_string(), log)])))
}

/// One isolated net per category.
fn train_independent(data: &Dataset, tax: &Taxonomy, plan: &StagedPlan) -> Result<TrainedModel> {
    check_categories(data, tax)?;
    let cats: Vec<String> = tax.categories().into_iter().map(String::from).collect();
    let iters = plan.independent_iters(cats.len());
    let nets = cats
        .iter()
        .map(|cat| -> Result<(String, BranchNet, Vec<f64>)> {
            let one = Taxonomy::new(vec![(cat.clone(), vec![cat.clone()])])?;
            let one = Taxonomy {
                category_classes: BTreeMap::from([(cat.clone(), tax.category_classes(cat)?.to_vec())]),
                ..one
            };
            let seed = named_rng(plan.seed, &format!("independent/{cat}")).gen();
            let sub_plan = StagedPlan { stage1_iters: iters, seed, ..plan.clone() };
            let mut net = init_super_net(&one, &sub_plan)?;
            let mut opt = plan.stage1_opt.state(iters as u64);
            let log = train_stage1(&data.filter_category(cat), &one, &sub_plan, &mut net, &mut opt)?;
            Ok((cat.clone(), net, log))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model =
        TrainedModel { nets: Vec::new(), routes: BTreeMap::new(), classes: data.classes(), logs: BTreeMap::new() };
    for (i, (cat, net, log)) in nets.into_iter().enumerate() {
        model.nets.push((cat.clone(), net));
        model.routes.insert(cat.clone(), Route { net: i, branch: cat.clone() });
        model.logs.insert(format!("independent/{cat}"), log);
    }
    Ok(model)
}

/// Trains a baseline architecture; `mode` must not be staged.
pub fn train_baseline(data: &Dataset, tax: &Taxonomy, plan: &StagedPlan, mode: Mode) -> Result<TrainedModel> {
    match mode {
        Mode::Independent => train_independent(data, tax, plan),
        Mode::FullBranch => train_shared(data, tax, plan, true),
        Mode::SuperBranch => train_shared(data, tax, plan, false),
        Mode::Staged => Err(Error::InvalidArgument("staged is not a baseline".into())),
    }
}

/// Stage 2 on top of a stage-1 model from [`train_baseline`] in super mode.
pub fn continue_staged(
    data: &Dataset,
    tax: &Taxonomy,
    plan: &StagedPlan,
    stage1: &TrainedModel,
) -> Result<TrainedModel> {
    let net = &stage1.nets.first().ok_or(Error::Empty("stage-1 model"))?.1;
    let (net, logs2) = train_stage2(data, tax, plan, net)?;
    let mut logs = stage1.logs.clone();
    for (cat, l) in logs2 {
        logs.insert(format!("stage2/{cat}"), l);
    }
    let routes = all_categories_routed(tax, str::to_string);
    Ok(TrainedModel::shared(net, routes, data.classes(), logs))
}

/// Trains `plan.mode` on `data`. `tax` is completed with class lists from `data`.
pub fn train(data: &Dataset, tax: &Taxonomy, plan: &StagedPlan) -> Result<TrainedModel> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let tax = tax.clone().with_classes(data)?;
    match plan.mode {
        Mode::Staged => {
            let stage1 = train_shared(data, &tax, plan, false)?;
            continue_staged(data, &tax, plan, &stage1)
        }
        m => train_baseline(data, &tax, plan, m),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Unweighted mean sketch IOU over the whole test set.
    pub average_iou: f64,
    /// Per category: item count and mean sketch IOU.
    pub per_category: BTreeMap<String, (usize, f64)>,
    /// Pixel confusion summed over the test set.
    pub confusion: ConfusionCounts,
}

pub fn evaluate(model: &TrainedModel, test: &Dataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if test.classes() != model.classes {
        return Err(Error::DimensionMismatch(format!(
            "test set has {} classes, model {}",
            test.classes(),
            model.classes
        )));
    }
    let scored = test
        .items()
        .par_iter()
        .map(|it| {
            let pred = model.predict(&it.category, &it.image)?;
            Ok((sketch_iou(&pred, &it.labels)?, confusion(&pred, &it.labels)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut total = ConfusionCounts::zeros(model.classes);
    for (it, (iou, c)) in test.items().iter().zip(&scored) {
        let e = per.entry(it.category.clone()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += iou;
        total.add(c)?;
    }
    for v in per.values_mut() {
        v.1 /= v.0 as f64;
    }
    let average_iou = scored.iter().map(|(s, _)| s).sum::<f64>() / scored.len() as f64;
    Ok(EvalReport { average_iou, per_category: per, confusion: total })
}
