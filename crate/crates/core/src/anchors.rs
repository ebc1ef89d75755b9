//! Category anchors and active target-pixel identification.
//!
//! Anchors are per-category means of source features taken at the
//! classifier input. A target pixel is *active* when its nearest valid
//! anchor beats the runner-up by more than a margin `Δ_d`; it then gets the
//! nearest anchor's category as pseudo-label. The probability path instead
//! activates pixels whose top class probability exceeds a threshold `P₀`.
//! Both comparisons are strict, so boundary-equal pixels stay inactive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, SegModel};
use crate::synth::Dataset;
use crate::tensor::Tensor;

/// Per-category source centroids at the feature-transform output.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Vec<f64>>,
    pixel_counts: Vec<u64>,
}

impl AnchorSet {
    /// `valid[c]` is derived from `pixel_counts[c] > 0`.
    pub fn new(anchors: Vec<Vec<f64>>, pixel_counts: Vec<u64>) -> Result<Self> {
        if anchors.len() != pixel_counts.len() || anchors.is_empty() {
            return Err(Error::shape(
                "anchor set",
                &[anchors.len()],
                &[pixel_counts.len()],
            ));
        }
        let dim = anchors[0].len();
        if let Some(bad) = anchors.iter().find(|a| a.len() != dim) {
            return Err(Error::shape("anchor set", &[dim], &[bad.len()]));
        }
        Ok(Self {
            anchors,
            pixel_counts,
        })
    }

    /// Streaming mean over `(features [P × F], labels [P])` batches.
    pub fn from_batches<'a, I>(categories: usize, feature_dim: usize, batches: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a Tensor, &'a [usize])>,
    {
        let mut sums = vec![vec![0.0; feature_dim]; categories];
        let mut counts = vec![0u64; categories];
        for (features, labels) in batches {
            let (p, f) = features.dims2()?;
            if f != feature_dim || p != labels.len() {
                return Err(Error::shape(
                    "anchor batch",
                    &[labels.len(), feature_dim],
                    features.shape(),
                ));
            }
            for (j, &c) in labels.iter().enumerate() {
                if c >= categories {
                    return Err(Error::Contract(format!(
                        "label {c} outside [0, {categories})"
                    )));
                }
                counts[c] += 1;
                for (s, x) in sums[c].iter_mut().zip(features.row(j)) {
                    *s += x;
                }
            }
        }
        let anchors = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| {
                if n == 0 {
                    s
                } else {
                    s.into_iter().map(|x| x / n as f64).collect()
                }
            })
            .collect();
        Self::new(anchors, counts)
    }

    pub fn categories(&self) -> usize {
        self.anchors.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn pixel_counts(&self) -> &[u64] {
        &self.pixel_counts
    }

    pub fn is_valid(&self, c: usize) -> bool {
        self.pixel_counts.get(c).is_some_and(|&n| n > 0)
    }

    pub fn valid(&self) -> Vec<bool> {
        (0..self.categories()).map(|c| self.is_valid(c)).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.pixel_counts.iter().filter(|&&n| n > 0).count()
    }

    /// The anchor of `c`, or `None` for a category absent from the source.
    pub fn anchor(&self, c: usize) -> Option<&[f64]> {
        self.is_valid(c).then(|| self.anchors[c].as_slice())
    }
}

/// Anchors from every labelled pixel of every source grid, in one pass.
pub fn construct_anchors(source: &Dataset, model: &SegModel) -> Result<AnchorSet> {
    let dims = model.dims();
    if source.categories() != dims.categories {
        return Err(Error::shape(
            "construct_anchors",
            &[dims.categories],
            &[source.categories()],
        ));
    }
    let mut batches = Vec::with_capacity(source.len());
    for g in source.grids() {
        let (features, _) = model.forward(g)?;
        batches.push((features, g.label_indices()?));
    }
    AnchorSet::from_batches(
        dims.categories,
        dims.feature,
        batches.iter().map(|(f, l)| (f, l.as_slice())),
    )
}

/// Unsquared Euclidean distance from every feature row to every anchor,
/// `[P × C]`. Invalid anchors get `+∞`.
pub fn anchor_distances(features: &Tensor, anchors: &AnchorSet) -> Result<Tensor> {
    let (p, f) = features.dims2()?;
    if f != anchors.feature_dim() {
        return Err(Error::shape(
            "anchor_distances",
            features.shape(),
            &[anchors.categories(), anchors.feature_dim()],
        ));
    }
    let c = anchors.categories();
    let mut out = Vec::with_capacity(p * c);
    for j in 0..p {
        let x = features.row(j);
        for k in 0..c {
            out.push(match anchors.anchor(k) {
                Some(a) => a
                    .iter()
                    .zip(x)
                    .map(|(ai, xi)| (ai - xi) * (ai - xi))
                    .sum::<f64>()
                    .sqrt(),
                None => f64::INFINITY,
            });
        }
    }
    Tensor::matrix(p, c, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationSource {
    Anchor,
    Probability,
}

/// Active states and pseudo-labels for the pixels of one grid. A pixel is
/// active exactly when it carries a pseudo-label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationResult {
    source: ActivationSource,
    pseudo_labels: Vec<Option<usize>>,
}

impl ActivationResult {
    pub fn new(source: ActivationSource, pseudo_labels: Vec<Option<usize>>) -> Self {
        Self {
            source,
            pseudo_labels,
        }
    }

    pub fn source(&self) -> ActivationSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    pub fn pseudo_labels(&self) -> &[Option<usize>] {
        &self.pseudo_labels
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.pseudo_labels[j].is_some()
    }

    pub fn active(&self) -> Vec<bool> {
        self.pseudo_labels.iter().map(Option::is_some).collect()
    }

    pub fn active_count(&self) -> usize {
        self.pseudo_labels.iter().flatten().count()
    }
}

/// Margin test on a `[P × C]` distance matrix. Entries that are not finite
/// mark invalid anchors and take part in neither the nearest nor the
/// runner-up; rows with fewer than two finite entries stay inactive.
pub fn identify_active(distances: &Tensor, margin: f64) -> Result<ActivationResult> {
    let (_, c) = distances.dims2()?;
    let labels = distances
        .values()
        .chunks(c)
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            let mut second = f64::INFINITY;
            for (k, &d) in row.iter().enumerate() {
                if !d.is_finite() {
                    continue;
                }
                match best {
                    Some((_, b)) if d >= b => second = second.min(d),
                    Some((_, b)) => {
                        second = b;
                        best = Some((k, d));
                    }
                    None => best = Some((k, d)),
                }
            }
            let (k, nearest) = best?;
            if !second.is_finite() {
                return None;
            }
            // The gap form, the "below runner-up minus margin" form and the
            // additive form can disagree by one rounding step; all must hold.
            let clear =
                second - nearest > margin && nearest < second - margin && nearest + margin < second;
            clear.then_some(k)
        })
        .collect();
    Ok(ActivationResult::new(ActivationSource::Anchor, labels))
}

/// Activates pixels whose top probability exceeds `threshold`, labelled by
/// argmax with ties to the lowest category.
pub fn identify_active_by_probability(probs: &Tensor, threshold: f64) -> Result<ActivationResult> {
    let (_, c) = probs.dims2()?;
    let labels = probs
        .values()
        .chunks(c)
        .map(|row| {
            let k = argmax(row);
            (row[k] > threshold).then_some(k)
        })
        .collect();
    Ok(ActivationResult::new(ActivationSource::Probability, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    /// Active pixels per pseudo-label category.
    pub per_category_active: Vec<u64>,
    pub active_pixels: u64,
    pub total_pixels: u64,
    pub active_fraction: f64,
    /// Active pixels whose pseudo-label matches the oracle label.
    pub correct: Option<u64>,
    /// `correct / active_pixels`; absent without an oracle or active pixels.
    pub accuracy: Option<f64>,
}

/// Counts over per-grid results. `oracle` supplies true labels aligned grid
/// by grid when available.
pub fn activation_report(
    results: &[ActivationResult],
    categories: usize,
    oracle: Option<&Dataset>,
) -> Result<ActivationReport> {
    if let Some(ds) = oracle {
        if ds.len() != results.len() {
            return Err(Error::shape(
                "activation_report",
                &[results.len()],
                &[ds.len()],
            ));
        }
    }
    let mut per_category_active = vec![0u64; categories];
    let (mut active, mut total, mut correct) = (0u64, 0u64, 0u64);
    for (i, r) in results.iter().enumerate() {
        let truth = match oracle {
            Some(ds) => {
                let g = &ds.grids()[i];
                if g.pixels() != r.len() {
                    return Err(Error::shape("activation_report", &[r.len()], &[g.pixels()]));
                }
                Some(g.label_indices()?)
            }
            None => None,
        };
        total += r.len() as u64;
        for (j, label) in r.pseudo_labels().iter().enumerate() {
            let Some(c) = *label else { continue };
            if c >= categories {
                return Err(Error::Contract(format!(
                    "pseudo-label {c} outside [0, {categories})"
                )));
            }
            per_category_active[c] += 1;
            active += 1;
            if truth.as_ref().is_some_and(|t| t[j] == c) {
                correct += 1;
            }
        }
    }
    let correct = oracle.map(|_| correct);
    Ok(ActivationReport {
        per_category_active,
        active_pixels: active,
        total_pixels: total,
        active_fraction: if total == 0 {
            0.0
        } else {
            active as f64 / total as f64
        },
        accuracy: correct
            .filter(|_| active > 0)
            .map(|k| k as f64 / active as f64),
        correct,
    })
}
