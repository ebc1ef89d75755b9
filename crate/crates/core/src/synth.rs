//! Synthetic segmentation grids with a controllable appearance shift.
//!
//! A grid is `H×W` pixels, each carrying a `D`-dimensional feature vector.
//! Labels come in square blocks of `coherence_scale` pixels so that nearby
//! pixels share a category. A pixel of category `c` gets the feature
//! `A·prototype[c] + b + σ·z` with `z ~ N(0, I)`; source and target domains
//! share prototypes and differ in the affine map `(A, b)`, `σ` and seed.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! ```text
//! magic   b"CAGD"
//! version u16 (= 1)
//! role    u8   0 = source, 1 = target-train, 2 = target-eval
//! flags   u8   bit 0 set when label planes are present
//! H W D C u32 each
//! count   u32
//! per grid: H·W·D f32 feature plane, then (if labelled) H·W u16 labels
//! ```

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};

const MAGIC: &[u8; 4] = b"CAGD";
const VERSION: u16 = 1;

/// Radius of the sphere the default category prototypes live on.
pub const PROTOTYPE_RADIUS: f64 = 3.0;

/// One image: per-pixel features and optional per-pixel categories.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGrid {
    height: usize,
    width: usize,
    feature_dim: usize,
    features: Vec<f32>,
    labels: Option<Vec<u16>>,
}

impl LabeledGrid {
    pub fn new(
        height: usize,
        width: usize,
        feature_dim: usize,
        features: Vec<f32>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        if features.len() != height * width * feature_dim {
            return Err(Error::shape(
                "grid features",
                &[height, width, feature_dim],
                &[features.len()],
            ));
        }
        if let Some(l) = &labels {
            if l.len() != height * width {
                return Err(Error::shape("grid labels", &[height, width], &[l.len()]));
            }
        }
        Ok(Self {
            height,
            width,
            feature_dim,
            features,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn pixel(&self, j: usize) -> &[f32] {
        &self.features[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    /// Labels widened to `usize`, or a contract error when absent.
    pub fn label_indices(&self) -> Result<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&x| x as usize).collect())
            .ok_or_else(|| Error::Contract("grid has no labels".into()))
    }

    /// Features as `f64`, row-major `[H·W × D]`.
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&x| f64::from(x)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    TargetTrain,
    TargetEval,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Source => 0,
            Role::TargetTrain => 1,
            Role::TargetEval => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Role::Source),
            1 => Some(Role::TargetTrain),
            2 => Some(Role::TargetEval),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    role: Role,
    categories: usize,
    height: usize,
    width: usize,
    feature_dim: usize,
    grids: Vec<LabeledGrid>,
}

impl Dataset {
    pub fn new(
        role: Role,
        categories: usize,
        height: usize,
        width: usize,
        feature_dim: usize,
        grids: Vec<LabeledGrid>,
    ) -> Result<Self> {
        for (i, g) in grids.iter().enumerate() {
            if (g.height, g.width, g.feature_dim) != (height, width, feature_dim) {
                return Err(Error::Contract(format!(
                    "grid {i} is {}x{}x{}, dataset is {height}x{width}x{feature_dim}",
                    g.height, g.width, g.feature_dim
                )));
            }
            if let Some(l) = &g.labels {
                if let Some(bad) = l.iter().find(|&&c| c as usize >= categories) {
                    return Err(Error::Contract(format!(
                        "grid {i} has label {bad} outside [0, {categories})"
                    )));
                }
            }
        }
        Ok(Self {
            role,
            categories,
            height,
            width,
            feature_dim,
            grids,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn grids(&self) -> &[LabeledGrid] {
        &self.grids
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.grids.is_empty() && self.grids.iter().all(|g| g.labels.is_some())
    }

    /// Feature-only view handed to training code for unlabeled domains.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView { inner: self }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.encode()?.write_to(path)
    }

    fn encode(&self) -> Result<ByteWriter> {
        let labeled = self.is_labeled();
        if !labeled && self.grids.iter().any(|g| g.labels.is_some()) {
            return Err(Error::Contract(
                "cannot store a dataset where only some grids are labeled".into(),
            ));
        }
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(self.role.code());
        w.u8(u8::from(labeled));
        for v in [
            self.height,
            self.width,
            self.feature_dim,
            self.categories,
            self.grids.len(),
        ] {
            w.len_u32(v)?;
        }
        for g in &self.grids {
            for &x in &g.features {
                w.f32(x);
            }
            if let Some(l) = &g.labels {
                for &c in l {
                    w.u16(c);
                }
            }
        }
        Ok(w)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.encode()?.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC, VERSION)?;
        let role_code = r.u8()?;
        let role = Role::from_code(role_code)
            .ok_or_else(|| r.parse_error(format!("unknown role code {role_code}")))?;
        let flags = r.u8()?;
        if flags > 1 {
            return Err(r.parse_error(format!("unknown flags {flags:#04x}")));
        }
        let labeled = flags & 1 == 1;
        let height = r.usize32()?;
        let width = r.usize32()?;
        let feature_dim = r.usize32()?;
        let categories = r.usize32()?;
        let count = r.usize32()?;
        let pixels = height * width;
        let per_grid = pixels * feature_dim * 4 + if labeled { pixels * 2 } else { 0 };
        r.expect_remaining(per_grid.saturating_mul(count), "grid planes")?;

        let mut grids = Vec::with_capacity(count);
        for _ in 0..count {
            let features = (0..pixels * feature_dim)
                .map(|_| r.f32())
                .collect::<Result<Vec<_>>>()?;
            let labels = if labeled {
                let start = r.offset();
                let l = (0..pixels).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
                if let Some(bad) = l.iter().find(|&&c| c as usize >= categories) {
                    return Err(Error::Parse {
                        offset: start,
                        reason: format!("label {bad} outside [0, {categories})"),
                    });
                }
                Some(l)
            } else {
                None
            };
            grids.push(LabeledGrid::new(
                height,
                width,
                feature_dim,
                features,
                labels,
            )?);
        }
        r.finish()?;
        Dataset::new(role, categories, height, width, feature_dim, grids)
    }
}

/// Read-only access to a dataset's features. Label planes are not
/// reachable through this type.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    inner: &'a Dataset,
}

impl<'a> UnlabeledView<'a> {
    pub fn len(&self) -> usize {
        self.inner.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.grids.is_empty()
    }

    pub fn categories(&self) -> usize {
        self.inner.categories
    }

    pub fn height(&self) -> usize {
        self.inner.height
    }

    pub fn width(&self) -> usize {
        self.inner.width
    }

    pub fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    pub fn features(&self, i: usize) -> &'a [f32] {
        &self.inner.grids[i].features
    }

    pub fn features_f64(&self, i: usize) -> Vec<f64> {
        self.inner.grids[i].features_f64()
    }
}

/// Per-pixel affine map `x ↦ A·x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// Row-major `D×D`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            matrix,
            offset: vec![0.0; dim],
        }
    }

    /// `scale · R(angle) · x + offset_norm · u`, where `R` rotates by `angle`
    /// radians inside a seeded 2-plane and `u` is a seeded unit vector.
    pub fn shift(dim: usize, scale: f64, angle: f64, offset_norm: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Shift, 0);
        let frame = orthonormal_frame(dim, 2.min(dim), &mut rng);
        let (u, v) = (&frame[0], &frame[frame.len() - 1]);
        let (c, s) = (angle.cos(), angle.sin());
        let mut matrix = Affine::identity(dim).matrix;
        if dim >= 2 {
            for i in 0..dim {
                for j in 0..dim {
                    let rot =
                        (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
                    matrix[i * dim + j] += rot;
                }
            }
        }
        for m in &mut matrix {
            *m *= scale;
        }
        let dir = unit_vector(dim, &mut rng);
        Self {
            matrix,
            offset: dir.iter().map(|x| x * offset_norm).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                let row = &self.matrix[i * d..(i + 1) * d];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset[i]
            })
            .collect()
    }
}

/// Generation parameters for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub categories: usize,
    pub feature_dim: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub transform: Affine,
    pub noise_sigma: f64,
    pub coherence_scale: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.categories, self.feature_dim);
        if c < 2 || d < 2 {
            return Err(Error::Config(format!(
                "need at least 2 categories and 2 feature dims, got C={c}, D={d}"
            )));
        }
        if c > u16::MAX as usize {
            return Err(Error::Config(format!("C={c} exceeds the u16 label range")));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.coherence_scale < 1 {
            return Err(Error::Config("coherence_scale must be >= 1".into()));
        }
        if self.prototypes.len() != c || self.prototypes.iter().any(|p| p.len() != d) {
            return Err(Error::Config(format!(
                "prototypes must be {c} vectors of length {d}"
            )));
        }
        if self.transform.matrix.len() != d * d || self.transform.offset.len() != d {
            return Err(Error::Config(format!(
                "transform must be {d}x{d} plus a {d}-offset"
            )));
        }
        Ok(())
    }

    /// Whether `other` can be paired with `self` in one experiment.
    pub fn compatible_with(&self, other: &DomainSpec) -> bool {
        self.categories == other.categories
            && self.feature_dim == other.feature_dim
            && self.prototypes == other.prototypes
    }
}

/// `C` prototypes on the sphere of radius [`PROTOTYPE_RADIUS`]. When
/// `C ≤ D` they form a seeded orthonormal frame (pairwise equidistant);
/// otherwise they are seeded uniform directions. Coordinates are rounded to
/// `f32` so noise-free pixels reproduce them exactly.
pub fn default_prototypes(categories: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, Purpose::Prototypes, 0);
    let dirs = if categories <= dim {
        orthonormal_frame(dim, categories, &mut rng)
    } else {
        (0..categories)
            .map(|_| unit_vector(dim, &mut rng))
            .collect()
    };
    dirs.into_iter()
        .map(|v| {
            v.into_iter()
                .map(|x| f64::from((x * PROTOTYPE_RADIUS) as f32))
                .collect()
        })
        .collect()
}

fn gaussian_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v = gaussian_vector(dim, rng);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Gram-Schmidt over seeded Gaussian draws; `count ≤ dim`.
fn orthonormal_frame(dim: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v = gaussian_vector(dim, rng);
        for b in &frame {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    frame
}

/// Draws `count` grids of `height×width` pixels. Grid `i` uses the random
/// stream `(spec.seed, Grid, i)`: block labels first in row-major block
/// order, then per-pixel noise in row-major pixel order.
pub fn generate(
    spec: &DomainSpec,
    role: Role,
    count: usize,
    height: usize,
    width: usize,
) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "count, height and width must be >= 1, got {count}, {height}, {width}"
        )));
    }
    let d = spec.feature_dim;
    let clean: Vec<Vec<f64>> = spec
        .prototypes
        .iter()
        .map(|p| spec.transform.apply(p))
        .collect();
    let block = spec.coherence_scale;
    let (blocks_y, blocks_x) = (height.div_ceil(block), width.div_ceil(block));

    let grids = (0..count)
        .map(|i| {
            let mut rng = rng::stream(spec.seed, Purpose::Grid, i as u64);
            let block_labels: Vec<u16> = (0..blocks_y * blocks_x)
                .map(|_| rng.random_range(0..spec.categories) as u16)
                .collect();
            let mut labels = Vec::with_capacity(height * width);
            let mut features = Vec::with_capacity(height * width * d);
            for y in 0..height {
                for x in 0..width {
                    let c = block_labels[(y / block) * blocks_x + x / block];
                    labels.push(c);
                    for &mean in &clean[c as usize] {
                        let z: f64 = if spec.noise_sigma > 0.0 {
                            rng.sample(StandardNormal)
                        } else {
                            0.0
                        };
                        features.push((mean + spec.noise_sigma * z) as f32);
                    }
                }
            }
            LabeledGrid::new(height, width, d, features, Some(labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(role, spec.categories, height, width, d, grids)
}

/// Pixels per category over every grid.
pub fn class_pixel_counts(ds: &Dataset) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; ds.categories];
    for (i, g) in ds.grids.iter().enumerate() {
        let labels = g
            .labels()
            .ok_or_else(|| Error::Contract(format!("grid {i} has no labels")))?;
        for &c in labels {
            counts[c as usize] += 1;
        }
    }
    Ok(counts)
}

/// Mean distance from each target pixel to the source mean of its own
/// category, in input-feature units. Grows with the appearance gap and the
/// target noise level.
pub fn shift_proxy(source: &Dataset, target: &Dataset) -> Result<f64> {
    let d = source.feature_dim;
    if target.feature_dim != d || target.categories != source.categories {
        return Err(Error::shape(
            "shift_proxy",
            &[source.categories, d],
            &[target.categories, target.feature_dim],
        ));
    }
    let mut sums = vec![vec![0.0; d]; source.categories];
    let counts = class_pixel_counts(source)?;
    for g in &source.grids {
        for (j, &c) in g.labels().unwrap_or_default().iter().enumerate() {
            for (s, &x) in sums[c as usize].iter_mut().zip(g.pixel(j)) {
                *s += f64::from(x);
            }
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|x| x / n.max(1) as f64).collect())
        .collect();
    let (mut total, mut n) = (0.0, 0usize);
    for g in &target.grids {
        let labels = g
            .labels()
            .ok_or_else(|| Error::Contract("shift_proxy needs target labels".into()))?;
        for (j, &c) in labels.iter().enumerate() {
            if counts[c as usize] == 0 {
                continue;
            }
            let dist: f64 = g
                .pixel(j)
                .iter()
                .zip(&means[c as usize])
                .map(|(&x, m)| (f64::from(x) - m).powi(2))
                .sum::<f64>()
                .sqrt();
            total += dist;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
