//! Median-frequency class weights.
//!
//! For each class `i`, `t[i]` counts its pixels over the whole dataset and
//! `n[i]` the images in which it appears. The per-image average is
//! `phi[i] = t[i] / n[i]` and the weight is `alpha[i] = M / phi[i]`, where `M`
//! is the median of `phi` over every class that occurs (background included).
//! Rare parts therefore get large weights. Classes that never occur are
//! left out of the median and get weight 1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{Dataset, LabelMap, BACKGROUND};

/// Raw pixel/image counts. Merging is associative and commutative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub t: Vec<u64>,
    pub n: Vec<u64>,
}

impl ClassCounts {
    pub fn zeros(classes: usize) -> Self {
        Self { t: vec![0; classes], n: vec![0; classes] }
    }

    pub fn from_labels(labels: &LabelMap, classes: usize) -> Result<Self> {
        let mut c = Self::zeros(classes);
        for &v in labels.data() {
            let v = v as usize;
            if v >= classes {
                return Err(Error::LabelOutOfRange { value: v as u8, classes });
            }
            c.t[v] += 1;
        }
        for (n, &t) in c.n.iter_mut().zip(&c.t) {
            *n = u64::from(t > 0);
        }
        Ok(c)
    }

    pub fn merge(mut self, other: &Self) -> Self {
        for (a, b) in self.t.iter_mut().zip(&other.t) {
            *a += b;
        }
        for (a, b) in self.n.iter_mut().zip(&other.n) {
            *a += b;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub classes: usize,
    pub t: Vec<u64>,
    pub n: Vec<u64>,
    pub phi: Vec<f64>,
    pub median: f64,
    pub alpha: Vec<f64>,
    pub background_boost: f64,
}

/// Median with the two-middle-values mean for even lengths.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        (values[k / 2 - 1] + values[k / 2]) / 2.0
    }
}

impl ClassStats {
    pub fn from_counts(counts: ClassCounts) -> Result<Self> {
        let classes = counts.t.len();
        let phi: Vec<f64> =
            counts.t.iter().zip(&counts.n).map(|(&t, &n)| if n > 0 { t as f64 / n as f64 } else { 0.0 }).collect();
        let mut present: Vec<f64> = phi.iter().zip(&counts.n).filter(|(_, &n)| n > 0).map(|(&p, _)| p).collect();
        if present.is_empty() {
            return Err(Error::Empty("no labelled pixels"));
        }
        let m = median(&mut present);
        let alpha = phi.iter().zip(&counts.n).map(|(&p, &n)| if n > 0 { m / p } else { 1.0 }).collect();
        Ok(Self { classes, t: counts.t, n: counts.n, phi, median: m, alpha, background_boost: 1.0 })
    }

    /// Unit weights, i.e. plain cross-entropy.
    pub fn uniform(classes: usize) -> Self {
        Self {
            classes,
            t: vec![0; classes],
            n: vec![0; classes],
            phi: vec![0.0; classes],
            median: 0.0,
            alpha: vec![1.0; classes],
            background_boost: 1.0,
        }
    }

    /// Weights taken as given, without counts.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Empty("alpha vector"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and positive".into()));
        }
        let mut s = Self::uniform(alpha.len());
        s.alpha = alpha;
        Ok(s)
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.n.get(class).is_some_and(|&n| n > 0)
    }

    /// Restricts to `classes` (global ids) in the given order, recomputing
    /// median and weights over the subset.
    pub fn subset(&self, classes: &[u8]) -> Result<Self> {
        let counts = ClassCounts {
            t: classes.iter().map(|&c| self.t[c as usize]).collect(),
            n: classes.iter().map(|&c| self.n[c as usize]).collect(),
        };
        Self::from_counts(counts)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// `class<TAB>t<TAB>n<TAB>phi<TAB>alpha` lines under a `#` header.
    /// Reals use the shortest round-trip representation.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# classes={} median={} background_boost={}\n# class\tt\tn\tphi\talpha\n",
            self.classes, self.median, self.background_boost
        );
        for i in 0..self.classes {
            let _ = writeln!(s, "{i}\t{}\t{}\t{}\t{}", self.t[i], self.n[i], self.phi[i], self.alpha[i]);
        }
        s
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Manifest { path: origin.to_path_buf(), line, msg };
        let mut median_v = None;
        let mut boost = 1.0;
        let mut rows: Vec<(usize, u64, u64, f64, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    if let Some(v) = kv.strip_prefix("median=") {
                        median_v = v.parse::<f64>().ok();
                    } else if let Some(v) = kv.strip_prefix("background_boost=") {
                        boost = v.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()))?;
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, format!("expected 5 fields, got {}", f.len())));
            }
            let e = |s: String| bad(i + 1, s);
            rows.push((
                f[0].parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                f[1].parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                f[2].parse().map_err(|x: std::num::ParseIntError| e(x.to_string()))?,
                f[3].parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
                f[4].parse().map_err(|x: std::num::ParseFloatError| e(x.to_string()))?,
            ));
        }
        if rows.is_empty() {
            return Err(Error::Empty("stats file"));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
            return Err(bad(0, "class indices must be 0..C without gaps".into()));
        }
        Ok(Self {
            classes: rows.len(),
            t: rows.iter().map(|r| r.1).collect(),
            n: rows.iter().map(|r| r.2).collect(),
            phi: rows.iter().map(|r| r.3).collect(),
            median: median_v.unwrap_or(0.0),
            alpha: rows.iter().map(|r| r.4).collect(),
            background_boost: boost,
        })
    }
}

/// Counts every label map in `dataset` and derives the class weights.
pub fn collect_stats(dataset: &Dataset, classes: usize) -> Result<ClassStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let parts: Vec<ClassCounts> = dataset
        .items()
        .par_iter()
        .map(|item| ClassCounts::from_labels(&item.labels, classes))
        .collect::<Result<_>>()?;
    let total = parts.iter().fold(ClassCounts::zeros(classes), |acc, p| acc.merge(p));
    for (c, &n) in total.n.iter().enumerate().skip(1) {
        if n == 0 {
            log::debug!("class {c} absent from training data; weight fixed at 1");
        }
    }
    ClassStats::from_counts(total)
}

/// Scales the background weight by `factor`; foreground weights unchanged.
pub fn apply_background_boost(stats: &ClassStats, factor: f64) -> Result<ClassStats> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(Error::InvalidArgument(format!("boost factor must be positive, got {factor}")));
    }
    let mut out = stats.clone();
    out.alpha[BACKGROUND as usize] *= factor;
    out.background_boost *= factor;
    Ok(out)
}
