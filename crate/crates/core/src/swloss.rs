//! Soft-weighted cross-entropy for part segmentation.
//!
//! Per pixel with ground-truth class `i`, logits `x` and target distribution
//! `λ`:
//!
//! ```text
//! l_s(x, i) = α_i · (−Σ_j λ_j x_j + log Σ_k exp(x_k))
//! L_s       = Σ_p l_s(x_p, i_p) / Σ_p α_{i_p}
//! ```
//!
//! `λ` is one-hot at `i` except on boundaries between foreground parts, where
//! it holds the share of each foreground class inside the clipped 3×3 window
//! around the pixel (center included, background never counted). With one-hot
//! `λ` this is the class-weighted cross-entropy; with unit weights as well it
//! is the plain per-pixel mean.

use crate::classstats::ClassStats;
use crate::error::{Error, Result};
use crate::raster::{LabelMap, BACKGROUND};

/// Per-pixel class scores, pixel-major with classes contiguous per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrid {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogitGrid {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || classes == 0 {
            return Err(Error::DimensionMismatch(format!("empty logit grid {width}x{height}x{classes}")));
        }
        if data.len() != width * height * classes {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{classes} logits need {} values, got {}",
                width * height * classes,
                data.len()
            )));
        }
        Ok(Self { width, height, classes, data })
    }

    pub fn zeros(width: usize, height: usize, classes: usize) -> Result<Self> {
        Self::new(width, height, classes, vec![0.0; width * height * classes])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("logits"))
        }
    }

    /// Arg-max class per pixel; ties go to the lower index.
    pub fn argmax(&self) -> LabelMap {
        let data = self
            .data
            .chunks_exact(self.classes)
            .map(|x| {
                let mut best = 0;
                for k in 1..x.len() {
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.width, self.height, self.classes, data).expect("argmax below class count")
    }
}

/// Per-pixel target distributions, stored sparsely.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    width: usize,
    height: usize,
    classes: usize,
    gt: Vec<u8>,
    offsets: Vec<usize>,
    entries: Vec<(u8, f64)>,
}

impl SoftTarget {
    /// One-hot at the ground truth everywhere.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let p = labels.data().len();
        Self {
            width: labels.width(),
            height: labels.height(),
            classes: labels.classes(),
            gt: labels.data().to_vec(),
            offsets: (0..=p).collect(),
            entries: labels.data().iter().map(|&c| (c, 1.0)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.gt.len()
    }

    pub fn gt(&self, p: usize) -> u8 {
        self.gt[p]
    }

    /// Non-zero `(class, λ)` pairs of pixel `p`, ascending by class.
    pub fn lambda(&self, p: usize) -> &[(u8, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn is_softened(&self, p: usize) -> bool {
        self.offsets[p + 1] - self.offsets[p] > 1
    }

    /// Dense λ vector of pixel `p`.
    pub fn dense(&self, p: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        for &(c, l) in self.lambda(p) {
            v[c as usize] = l;
        }
        v
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_vector(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Empty("logit vector"));
    }
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("logits"))
    }
}

/// `−x_i + log Σ_j exp(x_j)`.
pub fn standard_ce(x: &[f64], class: usize) -> Result<f64> {
    check_vector(x)?;
    if class >= x.len() {
        return Err(Error::InvalidArgument(format!("class {class} >= {}", x.len())));
    }
    Ok(log_sum_exp(x) - x[class])
}

/// Builds λ for every pixel of `labels`.
pub fn compute_soft_targets(labels: &LabelMap) -> SoftTarget {
    let (w, h, c) = (labels.width(), labels.height(), labels.classes());
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut entries = Vec::with_capacity(w * h);
    let mut counts = vec![0u32; c];
    offsets.push(0);
    for y in 0..h {
        for x in 0..w {
            let gt = labels.get(x, y);
            let mut softened = false;
            if gt != BACKGROUND {
                counts.fill(0);
                let mut distinct = 0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let v = labels.get(xx, yy) as usize;
                        if v != BACKGROUND as usize {
                            if counts[v] == 0 {
                                distinct += 1;
                            }
                            counts[v] += 1;
                        }
                    }
                }
                if distinct >= 2 {
                    softened = true;
                    let total: u32 = counts.iter().sum();
                    for (k, &f) in counts.iter().enumerate() {
                        if f > 0 {
                            entries.push((k as u8, f as f64 / total as f64));
                        }
                    }
                }
            }
            if !softened {
                entries.push((gt, 1.0));
            }
            offsets.push(entries.len());
        }
    }
    SoftTarget { width: w, height: h, classes: c, gt: labels.data().to_vec(), offsets, entries }
}

fn alpha_of(stats: &ClassStats, class: usize) -> Result<f64> {
    stats.alpha.get(class).copied().ok_or_else(|| Error::DimensionMismatch(format!("no weight for class {class}")))
}

/// `α_i (−Σ_j λ_j x_j + log Σ_k exp(x_k))` for a dense λ.
pub fn soft_weighted_pixel_loss(x: &[f64], lambda: &[f64], gt: usize, stats: &ClassStats) -> Result<f64> {
    check_vector(x)?;
    if lambda.len() != x.len() {
        return Err(Error::DimensionMismatch(format!("{} logits vs {} targets", x.len(), lambda.len())));
    }
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("soft target"));
    }
    let alpha = alpha_of(stats, gt)?;
    let dot: f64 = lambda.iter().zip(x).map(|(l, v)| l * v).sum();
    Ok(alpha * (log_sum_exp(x) - dot))
}

fn check_shapes(x: &LogitGrid, target: &SoftTarget, stats: &ClassStats) -> Result<()> {
    if x.width != target.width || x.height != target.height || x.classes != target.classes {
        return Err(Error::DimensionMismatch(format!(
            "logits {}x{}x{} vs target {}x{}x{}",
            x.width, x.height, x.classes, target.width, target.height, target.classes
        )));
    }
    if stats.alpha.len() != x.classes {
        return Err(Error::DimensionMismatch(format!("{} class weights for {} classes", stats.alpha.len(), x.classes)));
    }
    Ok(())
}

/// Loss and its gradient with respect to the logits, in one pass.
pub fn soft_weighted_loss_and_grad(x: &LogitGrid, target: &SoftTarget, stats: &ClassStats) -> Result<(f64, LogitGrid)> {
    check_shapes(x, target, stats)?;
    x.check_finite()?;
    let c = x.classes;
    let mut grad = vec![0.0; x.data.len()];
    let mut numer = 0.0;
    let mut denom = 0.0;
    for p in 0..x.pixels() {
        let xp = x.pixel(p);
        let alpha = stats.alpha[target.gt[p] as usize];
        let m = xp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = &mut grad[p * c..(p + 1) * c];
        let mut s = 0.0;
        for (gk, &v) in g.iter_mut().zip(xp) {
            *gk = (v - m).exp();
            s += *gk;
        }
        let lse = m + s.ln();
        let mut dot = 0.0;
        for &(k, l) in target.lambda(p) {
            dot += l * xp[k as usize];
        }
        numer += alpha * (lse - dot);
        denom += alpha;
        for gk in g.iter_mut() {
            *gk = alpha * (*gk / s);
        }
        for &(k, l) in target.lambda(p) {
            g[k as usize] -= alpha * l;
        }
    }
    if denom <= 0.0 {
        return Err(Error::InvalidArgument("class weights sum to zero".into()));
    }
    for v in &mut grad {
        *v /= denom;
    }
    Ok((numer / denom, LogitGrid { data: grad, ..*x }))
}

pub fn soft_weighted_loss(x: &LogitGrid, target: &SoftTarget, stats: &ClassStats) -> Result<f64> {
    check_shapes(x, target, stats)?;
    x.check_finite()?;
    let mut numer = 0.0;
    let mut denom = 0.0;
    for p in 0..x.pixels() {
        let xp = x.pixel(p);
        let alpha = stats.alpha[target.gt[p] as usize];
        let dot: f64 = target.lambda(p).iter().map(|&(k, l)| l * xp[k as usize]).sum();
        numer += alpha * (log_sum_exp(xp) - dot);
        denom += alpha;
    }
    if denom <= 0.0 {
        return Err(Error::InvalidArgument("class weights sum to zero".into()));
    }
    Ok(numer / denom)
}

/// `∂L_s/∂x_{p,k} = α_{i_p} (softmax(x_p)_k − λ_{p,k}) / Σ_q α_{i_q}`.
pub fn soft_weighted_grad(x: &LogitGrid, target: &SoftTarget, stats: &ClassStats) -> Result<LogitGrid> {
    soft_weighted_loss_and_grad(x, target, stats).map(|(_, g)| g)
}

/// Class-weighted cross-entropy: the soft-weighted loss with one-hot λ.
pub fn weighted_ce_loss(x: &LogitGrid, labels: &LabelMap, stats: &ClassStats) -> Result<f64> {
    soft_weighted_loss(x, &SoftTarget::one_hot(labels), stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn standard_ce_examples() {
        assert!((standard_ce(&[0.0, 0.0], 0).unwrap() - LN2).abs() < 1e-15);
        for c in [-50.0, 0.0, 3.5, 700.0] {
            let v = standard_ce(&[c; 4], 2).unwrap();
            assert!((v - 4f64.ln()).abs() < 1e-12, "{c}: {v}");
        }
        // log(e^1000 + 1) − 0 = 1000 + log1p(e^-1000) = 1000 exactly in f64.
        assert_eq!(standard_ce(&[1000.0, 0.0], 1).unwrap(), 1000.0);
        assert!(matches!(standard_ce(&[f64::NAN, 0.0], 0), Err(Error::NonFinite(_))));
        assert!(standard_ce(&[0.0], 1).is_err());
    }

    #[test]
    fn window_example() {
        // 3x3 labels [4,4,2; 4,4,2; 4,3,3]; center has gt 4.
        let labels = LabelMap::new(3, 3, 5, vec![4, 4, 2, 4, 4, 2, 4, 3, 3]).unwrap();
        let st = compute_soft_targets(&labels);
        let center = st.lambda(4);
        assert_eq!(center, &[(2, 2.0 / 9.0), (3, 2.0 / 9.0), (4, 5.0 / 9.0)]);
        assert_eq!(st.gt(4), 4);
    }

    #[test]
    fn uniform_and_background_neighbours_stay_one_hot() {
        let uni = compute_soft_targets(&LabelMap::new(3, 2, 3, vec![2; 6]).unwrap());
        assert!((0..6).all(|p| st_one_hot(&uni, p, 2)));
        let lone = compute_soft_targets(&LabelMap::new(3, 3, 2, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap());
        assert!(st_one_hot(&lone, 4, 1));
        // Background pixel next to two parts is never softened.
        let bg = compute_soft_targets(&LabelMap::new(3, 1, 3, vec![1, 0, 2]).unwrap());
        assert!(st_one_hot(&bg, 1, 0));
    }

    fn st_one_hot(st: &SoftTarget, p: usize, class: u8) -> bool {
        st.lambda(p) == [(class, 1.0)]
    }

    #[test]
    fn pixel_loss_examples() {
        let s = ClassStats::uniform(2);
        assert!((soft_weighted_pixel_loss(&[0.0, 0.0], &[1.0, 0.0], 0, &s).unwrap() - LN2).abs() < 1e-15);
        for a in [-3.0, 0.0, 17.0] {
            let v = soft_weighted_pixel_loss(&[a, a], &[0.5, 0.5], 1, &s).unwrap();
            assert!((v - LN2).abs() < 1e-12);
        }
        let w = ClassStats::from_alpha(vec![0.5, 3.0]).unwrap();
        let x = [0.3, -1.2];
        let v = soft_weighted_pixel_loss(&x, &[0.0, 1.0], 1, &w).unwrap();
        assert!((v - 3.0 * standard_ce(&x, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn grid_reductions() {
        let labels = LabelMap::new(1, 1, 2, vec![1]).unwrap();
        let x = LogitGrid::new(1, 1, 2, vec![0.4, -0.1]).unwrap();
        let w = ClassStats::from_alpha(vec![1.0, 2.5]).unwrap();
        let ls = soft_weighted_pixel_loss(x.pixel(0), &[0.0, 1.0], 1, &w).unwrap();
        assert!((soft_weighted_loss(&x, &SoftTarget::one_hot(&labels), &w).unwrap() - ls / 2.5).abs() < 1e-15);
        // Two pixels, α = [1, 2]: (1·l(x0, 0) + 2·l(x1, 1)) / 3.
        let labels = LabelMap::new(2, 1, 2, vec![0, 1]).unwrap();
        let x = LogitGrid::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = ClassStats::from_alpha(vec![1.0, 2.0]).unwrap();
        let l = (1.0 + (-1f64).exp()).ln();
        let expect = (l + 2.0 * l) / 3.0;
        assert!((weighted_ce_loss(&x, &labels, &w).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn gradient_examples() {
        let labels = LabelMap::new(1, 1, 2, vec![0]).unwrap();
        let x = LogitGrid::zeros(1, 1, 2).unwrap();
        let g = soft_weighted_grad(&x, &SoftTarget::one_hot(&labels), &ClassStats::uniform(2)).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch() {
        let labels = LabelMap::new(2, 1, 2, vec![0, 1]).unwrap();
        let x = LogitGrid::zeros(1, 2, 2).unwrap();
        let st = SoftTarget::one_hot(&labels);
        assert!(matches!(soft_weighted_loss(&x, &st, &ClassStats::uniform(2)), Err(Error::DimensionMismatch(_))));
        let x = LogitGrid::zeros(2, 1, 2).unwrap();
        assert!(soft_weighted_grad(&x, &st, &ClassStats::uniform(3)).is_err());
    }
}
