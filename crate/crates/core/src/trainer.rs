//! Stagewise training: source pretraining, adversarial warm-up, then `K`
//! stages of anchor-guided adaptation.
//!
//! Each adaptation stage starts by snapshotting anchors, anchor-based and
//! probability-based activations for every target grid. The snapshot stays
//! fixed while the stage runs its `L` SGD iterations.
//!
//! Sampling is batch size 1: every iteration draws one source grid and one
//! target grid. Each phase and domain has its own seeded sequence of epoch
//! permutations indexed by the phase's iteration counter, so a stage can be
//! resumed from its snapshot without any sampler state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{
    anchor_distances, construct_anchors, identify_active, identify_active_by_probability,
    ActivationResult, ActivationSource, AnchorSet,
};
use crate::codec::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorDims, SegModel};
use crate::objectives::{
    adversarial_losses, ce_loss, combine, dis_loss, LossBreakdown, LossTerms, LossWeights,
};
use crate::optim::{poly_lr, Sgd};
use crate::rng::{self, Purpose};
use crate::synth::{Dataset, UnlabeledView};
use crate::tensor::{Tape, Var};

/// How the two target cross-entropy terms are scaled before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetCeScaling {
    /// Plain pixel sums.
    #[default]
    Sum,
    /// Each term divided by its own active-pixel count.
    PerActivePixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// K
    pub stages: usize,
    /// L
    pub iterations_per_stage: usize,
    pub pretrain_iterations: usize,
    pub warmup_iterations: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// λ₁
    pub lambda_dis: f64,
    /// λ₂
    pub lambda_ce: f64,
    /// Δ_d
    pub margin: f64,
    /// P₀
    pub prob_threshold: f64,
    pub adversarial_weight: f64,
    pub discriminator_lr: f64,
    pub discriminator_hidden: usize,
    /// Restart the poly schedule at every stage instead of decaying over
    /// all `K·L` adaptation iterations.
    pub restart_schedule_each_stage: bool,
    pub target_ce_scaling: TargetCeScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            iterations_per_stage: 400,
            pretrain_iterations: 800,
            warmup_iterations: 400,
            base_lr: 2.5e-4,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_dis: 0.3,
            lambda_ce: 0.7,
            margin: 2.5,
            prob_threshold: 0.95,
            adversarial_weight: 1e-2,
            discriminator_lr: 2.5e-4,
            discriminator_hidden: 32,
            restart_schedule_each_stage: false,
            target_ce_scaling: TargetCeScaling::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_stage < 1 {
            return Err(Error::Config(
                "iterations_per_stage (L) must be >= 1".into(),
            ));
        }
        let rates = [
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_dis", self.lambda_dis),
            ("lambda_ce", self.lambda_ce),
            ("margin", self.margin),
            ("prob_threshold", self.prob_threshold),
            ("adversarial_weight", self.adversarial_weight),
            ("discriminator_lr", self.discriminator_lr),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::Config("poly_power must be > 0".into()));
        }
        if self.discriminator_hidden == 0 {
            return Err(Error::Config("discriminator_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dis: self.lambda_dis,
            lambda_ce: self.lambda_ce,
        }
    }

    pub fn adaptation_iterations(&self) -> usize {
        self.stages * self.iterations_per_stage
    }
}

/// Enables each optional loss term and the warm-up's adversarial part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub dis_source: bool,
    pub dis_target: bool,
    pub ce_target: bool,
    pub ce_target_prob: bool,
    /// Off: the warm-up phase trains on source cross-entropy only and the
    /// discriminator is not updated.
    pub warmup: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::all()
    }
}

impl Switches {
    pub fn all() -> Self {
        Self {
            dis_source: true,
            dis_target: true,
            ce_target: true,
            ce_target_prob: true,
            warmup: true,
        }
    }

    pub fn none() -> Self {
        Self {
            dis_source: false,
            dis_target: false,
            ce_target: false,
            ce_target_prob: false,
            warmup: false,
        }
    }
}

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub config: TrainConfig,
    pub switches: Switches,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Warmup,
    Adapt,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Warmup => 1,
            Phase::Adapt => 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Domain {
    Source = 0,
    Target = 1,
}

/// Grid index for iteration `n` of a phase: a fresh seeded permutation per
/// epoch of `len` grids.
#[derive(Debug)]
struct Sampler {
    seed: u64,
    stream_base: u64,
    len: usize,
    epoch: Option<usize>,
    order: Vec<usize>,
}

impl Sampler {
    fn new(seed: u64, phase: Phase, domain: Domain, len: usize) -> Self {
        Self {
            seed,
            stream_base: (phase.tag() << 40) | ((domain as u64) << 32),
            len,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn index(&mut self, n: usize) -> usize {
        let epoch = n / self.len;
        if self.epoch != Some(epoch) {
            let mut rng = rng::stream(self.seed, Purpose::Sampler, self.stream_base | epoch as u64);
            self.order = rng::permutation(self.len, &mut rng);
            self.epoch = Some(epoch);
        }
        self.order[n % self.len]
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phase: Phase,
    /// 0 outside adaptation.
    pub stage: usize,
    /// Iteration within the phase (global across adaptation stages).
    pub iteration: usize,
    pub lr: f64,
    pub source_grid: usize,
    pub target_grid: Option<usize>,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub discriminator_loss: Option<f64>,
    pub alignment_loss: Option<f64>,
}

/// Frozen per-stage state plus the model and optimizer it trains.
#[derive(Clone, Debug, PartialEq)]
pub struct StageState {
    stage: usize,
    model: SegModel,
    optimizer_buffers: Vec<Vec<f64>>,
    anchors: AnchorSet,
    anchor_activations: Vec<ActivationResult>,
    prob_activations: Vec<ActivationResult>,
    /// Iterations already run within this stage.
    iteration: usize,
    /// Adaptation iterations completed before this stage began.
    global_offset: usize,
}

impl StageState {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn anchor_activations(&self) -> &[ActivationResult] {
        &self.anchor_activations
    }

    pub fn prob_activations(&self) -> &[ActivationResult] {
        &self.prob_activations
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn global_offset(&self) -> usize {
        self.global_offset
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.encode()?.write_to(path)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.encode()?.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    // Layout, little-endian:
    //   magic b"CAGS", version u16, stage u32, iteration u32, global_offset u64,
    //   C u32, F u32, anchors f64 × C·F, pixel counts u64 × C,
    //   model checkpoint: length u64 + bytes,
    //   buffer count u32, per buffer: length u32 + f64s,
    //   grid count u32, per grid: P u32, then for anchor and probability
    //   activations in that order: bitmap ⌈P/8⌉ bytes (LSB first) followed by
    //   a u16 pseudo-label plane (0 where inactive).
    fn encode(&self) -> Result<ByteWriter> {
        let mut w = ByteWriter::new();
        w.bytes(SNAPSHOT_MAGIC);
        w.u16(SNAPSHOT_VERSION);
        w.len_u32(self.stage)?;
        w.len_u32(self.iteration)?;
        w.u64(self.global_offset as u64);
        w.len_u32(self.anchors.categories())?;
        w.len_u32(self.anchors.feature_dim())?;
        for a in self.anchors.anchors() {
            for &x in a {
                w.f64(x);
            }
        }
        for &n in self.anchors.pixel_counts() {
            w.u64(n);
        }
        let model = self.model.to_bytes()?;
        w.u64(model.len() as u64);
        w.bytes(&model);
        w.len_u32(self.optimizer_buffers.len())?;
        for b in &self.optimizer_buffers {
            w.len_u32(b.len())?;
            for &x in b {
                w.f64(x);
            }
        }
        w.len_u32(self.anchor_activations.len())?;
        for (a, p) in self.anchor_activations.iter().zip(&self.prob_activations) {
            w.len_u32(a.len())?;
            write_activation(&mut w, a);
            write_activation(&mut w, p);
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
        let stage = r.usize32()?;
        let iteration = r.usize32()?;
        let global_offset = r.u64()? as usize;
        let c = r.usize32()?;
        let f = r.usize32()?;
        r.expect_remaining(c.saturating_mul(f).saturating_mul(8), "anchors")?;
        let anchors = (0..c)
            .map(|_| (0..f).map(|_| r.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let counts = (0..c).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let anchors = AnchorSet::new(anchors, counts).map_err(|e| r.parse_error(e.to_string()))?;
        let model_len = r.u64()? as usize;
        let model = SegModel::from_bytes(r.take(model_len)?)?;
        let nbuf = r.usize32()?;
        let mut optimizer_buffers = Vec::with_capacity(nbuf.min(64));
        for _ in 0..nbuf {
            let n = r.usize32()?;
            r.expect_remaining(n.saturating_mul(8), "optimizer buffer")?;
            optimizer_buffers.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        let grids = r.usize32()?;
        let mut anchor_activations = Vec::with_capacity(grids.min(1 << 16));
        let mut prob_activations = Vec::with_capacity(grids.min(1 << 16));
        for _ in 0..grids {
            let p = r.usize32()?;
            anchor_activations.push(read_activation(&mut r, p, c, ActivationSource::Anchor)?);
            prob_activations.push(read_activation(
                &mut r,
                p,
                c,
                ActivationSource::Probability,
            )?);
        }
        r.finish()?;
        Ok(Self {
            stage,
            model,
            optimizer_buffers,
            anchors,
            anchor_activations,
            prob_activations,
            iteration,
            global_offset,
        })
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"CAGS";
const SNAPSHOT_VERSION: u16 = 1;

fn write_activation(w: &mut ByteWriter, a: &ActivationResult) {
    let labels = a.pseudo_labels();
    for chunk in labels.chunks(8) {
        let mut byte = 0u8;
        for (bit, l) in chunk.iter().enumerate() {
            if l.is_some() {
                byte |= 1 << bit;
            }
        }
        w.u8(byte);
    }
    for l in labels {
        w.u16(l.unwrap_or(0) as u16);
    }
}

fn read_activation(
    r: &mut ByteReader<'_>,
    pixels: usize,
    categories: usize,
    source: ActivationSource,
) -> Result<ActivationResult> {
    r.expect_remaining(pixels.div_ceil(8) + pixels * 2, "activation planes")?;
    let bitmap = r.take(pixels.div_ceil(8))?.to_vec();
    let mut labels = Vec::with_capacity(pixels);
    for j in 0..pixels {
        let at = r.offset();
        let label = r.u16()? as usize;
        let active = bitmap[j / 8] >> (j % 8) & 1 == 1;
        if active && label >= categories {
            return Err(Error::Parse {
                offset: at,
                reason: format!("pseudo-label {label} outside [0, {categories})"),
            });
        }
        labels.push(active.then_some(label));
    }
    Ok(ActivationResult::new(source, labels))
}

/// Stage-level numbers reported after each adaptation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub valid_anchors: usize,
    pub anchor_active: u64,
    pub prob_active: u64,
    pub target_pixels: u64,
    /// Mean distance of anchor-active target pixels to their assigned
    /// anchor, with the stage-start and stage-end models respectively.
    pub active_distance_start: Option<f64>,
    pub active_distance_end: Option<f64>,
    pub mean_losses: LossBreakdown,
}

/// Hooks around adaptation stages.
pub trait StageObserver {
    fn stage_started(&mut self, _state: &StageState) -> Result<()> {
        Ok(())
    }

    fn stage_finished(&mut self, _model: &SegModel, _summary: &StageSummary) -> Result<()> {
        Ok(())
    }
}

impl StageObserver for () {}

/// Runs the phases over one source set and one unlabeled target set.
pub struct Trainer<'a> {
    source: &'a Dataset,
    target: UnlabeledView<'a>,
    plan: TrainPlan,
    source_labels: Vec<Vec<usize>>,
    log: Vec<IterationRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(source: &'a Dataset, target: UnlabeledView<'a>, plan: TrainPlan) -> Result<Self> {
        plan.config.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::Config(
                "source and target sets must be non-empty".into(),
            ));
        }
        if source.feature_dim() != target.feature_dim()
            || source.categories() != target.categories()
        {
            return Err(Error::shape(
                "trainer datasets",
                &[source.feature_dim(), source.categories()],
                &[target.feature_dim(), target.categories()],
            ));
        }
        let source_labels = source
            .grids()
            .iter()
            .map(|g| g.label_indices())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source,
            target,
            plan,
            source_labels,
            log: Vec::new(),
        })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn log(&self) -> &[IterationRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<IterationRecord> {
        std::mem::take(&mut self.log)
    }

    fn cfg(&self) -> &TrainConfig {
        &self.plan.config
    }

    fn check_model(&self, model: &SegModel) -> Result<()> {
        let d = model.dims();
        if d.input != self.source.feature_dim() || d.categories != self.source.categories() {
            return Err(Error::shape(
                "model vs data",
                &[d.input, d.categories],
                &[self.source.feature_dim(), self.source.categories()],
            ));
        }
        Ok(())
    }

    /// Source cross-entropy training with SGD and a poly schedule over
    /// `pretrain_iterations`.
    pub fn pretrain(&mut self, mut model: SegModel) -> Result<SegModel> {
        self.check_model(&model)?;
        let cfg = self.cfg().clone();
        let n_iter = cfg.pretrain_iterations;
        let mut sampler = Sampler::new(
            self.plan.seed,
            Phase::Pretrain,
            Domain::Source,
            self.source.len(),
        );
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let mut tape = Tape::new();
        for n in 0..n_iter {
            let lr = poly_lr(n, n_iter, cfg.base_lr, cfg.poly_power)?;
            let s = sampler.index(n);
            tape.reset();
            let bound = model.bind(&mut tape, true);
            let x = model.input_var(&mut tape, self.source.grids()[s].features_f64())?;
            let out = model.forward_on(&mut tape, &bound, x)?;
            let targets: Vec<Option<usize>> =
                self.source_labels[s].iter().map(|&c| Some(c)).collect();
            let ce = ce_loss(&mut tape, out.probs, &targets)?;
            let losses = LossBreakdown {
                ce_source: tape.item(ce),
                total: tape.item(ce),
                source_pixels: targets.len() as u64,
                ..LossBreakdown::default()
            };
            if !losses.is_finite() {
                return Err(non_finite(0, n, &losses));
            }
            tape.backward(ce)?;
            apply_grads(&tape, bound.vars(), model.params_mut())?;
            opt.step(model.params_mut(), lr)?;
            self.log.push(IterationRecord {
                phase: Phase::Pretrain,
                stage: 0,
                iteration: n,
                lr,
                source_grid: s,
                target_grid: None,
                losses,
                discriminator_loss: None,
                alignment_loss: None,
            });
        }
        Ok(model)
    }

    /// Adversarial warm-up. Each iteration first updates the discriminator
    /// on frozen features, then the segmentation model on
    /// `L_ce(src) + adversarial_weight · L_align`.
    pub fn warmup(
        &mut self,
        mut model: SegModel,
        mut disc: Discriminator,
    ) -> Result<(SegModel, Discriminator)> {
        self.check_model(&model)?;
        let cfg = self.cfg().clone();
        let adversarial = self.plan.switches.warmup;
        let adv_weight = if adversarial {
            cfg.adversarial_weight
        } else {
            0.0
        };
        let n_iter = cfg.warmup_iterations;
        let seed = self.plan.seed;
        let mut src_sampler = Sampler::new(seed, Phase::Warmup, Domain::Source, self.source.len());
        let mut tgt_sampler = Sampler::new(seed, Phase::Warmup, Domain::Target, self.target.len());
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let mut disc_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let mut tape = Tape::new();
        for n in 0..n_iter {
            let lr = poly_lr(n, n_iter, cfg.base_lr, cfg.poly_power)?;
            let s = src_sampler.index(n);
            let t = tgt_sampler.index(n);
            let src_x = self.source.grids()[s].features_f64();
            let tgt_x = self.target.features_f64(t);

            let mut disc_value = None;
            if adversarial {
                let disc_lr = poly_lr(n, n_iter, cfg.discriminator_lr, cfg.poly_power)?;
                tape.reset();
                let frozen = model.bind(&mut tape, false);
                let xs = model.input_var(&mut tape, src_x.clone())?;
                let xt = model.input_var(&mut tape, tgt_x.clone())?;
                let fs = model.forward_on(&mut tape, &frozen, xs)?.features;
                let ft = model.forward_on(&mut tape, &frozen, xt)?.features;
                let db = disc.bind(&mut tape, true);
                let (d_loss, _) = adversarial_losses(&mut tape, &disc, &db, fs, ft)?;
                disc_value = Some(tape.item(d_loss));
                if !tape.item(d_loss).is_finite() {
                    return Err(Error::NonFinite {
                        stage: 0,
                        iteration: n,
                        dump: format!("warm-up discriminator loss {}", tape.item(d_loss)),
                    });
                }
                tape.backward(d_loss)?;
                apply_grads(&tape, db.vars(), disc.params_mut())?;
                disc_opt.step(disc.params_mut(), disc_lr)?;
            }

            tape.reset();
            let bound = model.bind(&mut tape, true);
            let xs = model.input_var(&mut tape, src_x)?;
            let xt = model.input_var(&mut tape, tgt_x)?;
            let src = model.forward_on(&mut tape, &bound, xs)?;
            let tgt = model.forward_on(&mut tape, &bound, xt)?;
            let targets: Vec<Option<usize>> =
                self.source_labels[s].iter().map(|&c| Some(c)).collect();
            let ce = ce_loss(&mut tape, src.probs, &targets)?;
            let db = disc.bind(&mut tape, false);
            let (_, align) = adversarial_losses(&mut tape, &disc, &db, src.features, tgt.features)?;
            let weighted = tape.scale(align, adv_weight);
            let total = tape.add(ce, weighted)?;
            let losses = LossBreakdown {
                ce_source: tape.item(ce),
                total: tape.item(total),
                source_pixels: targets.len() as u64,
                ..LossBreakdown::default()
            };
            if !losses.is_finite() || !tape.item(align).is_finite() {
                return Err(non_finite(0, n, &losses));
            }
            let align_value = tape.item(align);
            tape.backward(total)?;
            apply_grads(&tape, bound.vars(), model.params_mut())?;
            opt.step(model.params_mut(), lr)?;
            self.log.push(IterationRecord {
                phase: Phase::Warmup,
                stage: 0,
                iteration: n,
                lr,
                source_grid: s,
                target_grid: Some(t),
                losses,
                discriminator_loss: disc_value,
                alignment_loss: Some(align_value),
            });
        }
        Ok((model, disc))
    }

    /// Snapshots anchors and activations for stage `stage` (1-based) with a
    /// fresh optimizer, as if `stage - 1` stages had already run.
    pub fn begin_stage(&self, model: SegModel, stage: usize) -> Result<StageState> {
        let offset = stage.saturating_sub(1) * self.cfg().iterations_per_stage;
        self.begin_stage_with(model, Vec::new(), stage, offset)
    }

    fn begin_stage_with(
        &self,
        model: SegModel,
        optimizer_buffers: Vec<Vec<f64>>,
        stage: usize,
        global_offset: usize,
    ) -> Result<StageState> {
        if stage < 1 {
            return Err(Error::Stage {
                stage,
                reason: "stages are numbered from 1".into(),
            });
        }
        self.check_model(&model)?;
        let anchors = construct_anchors(self.source, &model)?;
        if anchors.valid_count() < 2 {
            return Err(Error::Stage {
                stage,
                reason: format!(
                    "only {} category anchors are valid; use a larger source set covering at least two categories",
                    anchors.valid_count()
                ),
            });
        }
        let cfg = self.cfg();
        let mut anchor_activations = Vec::with_capacity(self.target.len());
        let mut prob_activations = Vec::with_capacity(self.target.len());
        for t in 0..self.target.len() {
            let (features, probs) = model.forward_features(self.target.features_f64(t))?;
            let d = anchor_distances(&features, &anchors)?;
            anchor_activations.push(identify_active(&d, cfg.margin)?);
            prob_activations.push(identify_active_by_probability(&probs, cfg.prob_threshold)?);
        }
        Ok(StageState {
            stage,
            model,
            optimizer_buffers,
            anchors,
            anchor_activations,
            prob_activations,
            iteration: 0,
            global_offset,
        })
    }

    /// Runs the remaining iterations of the stage on its frozen snapshot.
    pub fn run_stage(&mut self, state: &mut StageState) -> Result<StageSummary> {
        let cfg = self.cfg().clone();
        let switches = self.plan.switches;
        let seed = self.plan.seed;
        let l = cfg.iterations_per_stage;
        if state.anchor_activations.len() != self.target.len() {
            return Err(Error::Stage {
                stage: state.stage,
                reason: format!(
                    "snapshot covers {} target grids, target set has {}",
                    state.anchor_activations.len(),
                    self.target.len()
                ),
            });
        }
        let (schedule_len, schedule_base) = if cfg.restart_schedule_each_stage {
            (l, state.global_offset)
        } else {
            (cfg.adaptation_iterations().max(state.global_offset + l), 0)
        };
        let active_distance_start = self.mean_active_distance(state, &state.model)?;
        let mut src_sampler = Sampler::new(seed, Phase::Adapt, Domain::Source, self.source.len());
        let mut tgt_sampler = Sampler::new(seed, Phase::Adapt, Domain::Target, self.target.len());
        let mut opt = Sgd::with_buffers(
            cfg.momentum,
            cfg.weight_decay,
            std::mem::take(&mut state.optimizer_buffers),
        );
        let mut sums = LossBreakdown::default();
        let mut tape = Tape::new();
        let ran = l.saturating_sub(state.iteration);
        while state.iteration < l {
            let global = state.global_offset + state.iteration;
            let lr = poly_lr(
                global - schedule_base,
                schedule_len,
                cfg.base_lr,
                cfg.poly_power,
            )?;
            let s = src_sampler.index(global);
            let t = tgt_sampler.index(global);

            tape.reset();
            let model = &mut state.model;
            let bound = model.bind(&mut tape, true);
            let xs = model.input_var(&mut tape, self.source.grids()[s].features_f64())?;
            let xt = model.input_var(&mut tape, self.target.features_f64(t))?;
            let src = model.forward_on(&mut tape, &bound, xs)?;
            let tgt = model.forward_on(&mut tape, &bound, xt)?;

            let src_targets: Vec<Option<usize>> =
                self.source_labels[s].iter().map(|&c| Some(c)).collect();
            let anchor_targets = state.anchor_activations[t].pseudo_labels();
            let prob_targets = state.prob_activations[t].pseudo_labels();
            let n_anchor = state.anchor_activations[t].active_count();
            let n_prob = state.prob_activations[t].active_count();

            let ce_source = ce_loss(&mut tape, src.probs, &src_targets)?;
            let dis_source = if switches.dis_source {
                dis_loss(&mut tape, src.features, &src_targets, &state.anchors)?
            } else {
                tape.scalar(0.0)
            };
            let dis_target = if switches.dis_target {
                dis_loss(&mut tape, tgt.features, anchor_targets, &state.anchors)?
            } else {
                tape.scalar(0.0)
            };
            let mut ce_target_anchor = if switches.ce_target {
                ce_loss(&mut tape, tgt.probs, anchor_targets)?
            } else {
                tape.scalar(0.0)
            };
            let mut ce_target_prob = if switches.ce_target_prob {
                ce_loss(&mut tape, tgt.probs, prob_targets)?
            } else {
                tape.scalar(0.0)
            };
            if cfg.target_ce_scaling == TargetCeScaling::PerActivePixel {
                ce_target_anchor = per_active(&mut tape, ce_target_anchor, n_anchor);
                ce_target_prob = per_active(&mut tape, ce_target_prob, n_prob);
            }
            let terms = LossTerms {
                ce_source,
                dis_source,
                ce_target_anchor,
                dis_target,
                ce_target_prob,
            };
            let total = combine(&mut tape, &terms, cfg.weights())?;
            let mut losses = LossBreakdown::read(&tape, &terms, total);
            losses.source_pixels = src_targets.len() as u64;
            losses.anchor_active = n_anchor as u64;
            losses.prob_active = n_prob as u64;
            if !losses.is_finite() {
                return Err(non_finite(state.stage, global, &losses));
            }
            tape.backward(total)?;
            apply_grads(&tape, bound.vars(), model.params_mut())?;
            opt.step(model.params_mut(), lr)?;
            accumulate(&mut sums, &losses);
            self.log.push(IterationRecord {
                phase: Phase::Adapt,
                stage: state.stage,
                iteration: global,
                lr,
                source_grid: s,
                target_grid: Some(t),
                losses,
                discriminator_loss: None,
                alignment_loss: None,
            });
            state.iteration += 1;
        }
        state.optimizer_buffers = opt.buffers().to_vec();

        let target_pixels: u64 = state
            .anchor_activations
            .iter()
            .map(|a| a.len() as u64)
            .sum();
        Ok(StageSummary {
            stage: state.stage,
            valid_anchors: state.anchors.valid_count(),
            anchor_active: state
                .anchor_activations
                .iter()
                .map(|a| a.active_count() as u64)
                .sum(),
            prob_active: state
                .prob_activations
                .iter()
                .map(|a| a.active_count() as u64)
                .sum(),
            target_pixels,
            active_distance_start,
            active_distance_end: self.mean_active_distance(state, &state.model)?,
            mean_losses: scale_breakdown(&sums, ran),
        })
    }

    /// Mean distance from anchor-active target pixels to their assigned
    /// anchor, measured with `model`.
    fn mean_active_distance(&self, state: &StageState, model: &SegModel) -> Result<Option<f64>> {
        let (mut total, mut n) = (0.0, 0u64);
        for (t, act) in state.anchor_activations.iter().enumerate() {
            if act.active_count() == 0 {
                continue;
            }
            let (features, _) = model.forward_features(self.target.features_f64(t))?;
            let d = anchor_distances(&features, &state.anchors)?;
            let c = state.anchors.categories();
            for (j, label) in act.pseudo_labels().iter().enumerate() {
                if let Some(k) = *label {
                    total += d.values()[j * c + k];
                    n += 1;
                }
            }
        }
        Ok((n > 0).then(|| total / n as f64))
    }

    /// Runs stages `1..=K`. `K = 0` returns the model untouched.
    pub fn adapt(
        &mut self,
        model: SegModel,
        observer: &mut dyn StageObserver,
    ) -> Result<(SegModel, Vec<StageSummary>)> {
        if self.cfg().stages == 0 {
            return Ok((model, Vec::new()));
        }
        let state = self.begin_stage_with(model, Vec::new(), 1, 0)?;
        self.resume(state, observer)
    }

    /// Continues adaptation from a stage snapshot through stage `K`.
    pub fn resume(
        &mut self,
        mut state: StageState,
        observer: &mut dyn StageObserver,
    ) -> Result<(SegModel, Vec<StageSummary>)> {
        let k_max = self.cfg().stages;
        let l = self.cfg().iterations_per_stage;
        if state.stage > k_max || state.iteration > l {
            return Err(Error::Stage {
                stage: state.stage,
                reason: format!("snapshot is beyond the configured K={k_max}, L={l}"),
            });
        }
        let mut summaries = Vec::new();
        loop {
            observer.stage_started(&state)?;
            let summary = self.run_stage(&mut state)?;
            observer.stage_finished(&state.model, &summary)?;
            summaries.push(summary);
            if state.stage == k_max {
                return Ok((state.model, summaries));
            }
            let next_offset = state.global_offset + l;
            state = self.begin_stage_with(
                state.model,
                state.optimizer_buffers,
                state.stage + 1,
                next_offset,
            )?;
        }
    }
}

fn per_active(tape: &mut Tape, v: Var, n: usize) -> Var {
    tape.scale(v, 1.0 / n.max(1) as f64)
}

fn apply_grads(tape: &Tape, vars: &[Var], params: &mut [crate::tensor::Tensor]) -> Result<()> {
    for (v, p) in vars.iter().zip(params.iter_mut()) {
        tape.write_grad(*v, p)?;
    }
    Ok(())
}

fn non_finite(stage: usize, iteration: usize, losses: &LossBreakdown) -> Error {
    Error::NonFinite {
        stage,
        iteration,
        dump: serde_json::to_string(losses).unwrap_or_else(|_| format!("{losses:?}")),
    }
}

fn accumulate(sum: &mut LossBreakdown, x: &LossBreakdown) {
    sum.ce_source += x.ce_source;
    sum.dis_source += x.dis_source;
    sum.ce_target_anchor += x.ce_target_anchor;
    sum.dis_target += x.dis_target;
    sum.ce_target_prob += x.ce_target_prob;
    sum.total += x.total;
    sum.source_pixels += x.source_pixels;
    sum.anchor_active += x.anchor_active;
    sum.prob_active += x.prob_active;
}

fn scale_breakdown(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    let div = |v: u64| v / n.max(1) as u64;
    LossBreakdown {
        ce_source: sum.ce_source / k,
        dis_source: sum.dis_source / k,
        ce_target_anchor: sum.ce_target_anchor / k,
        dis_target: sum.dis_target / k,
        ce_target_prob: sum.ce_target_prob / k,
        total: sum.total / k,
        source_pixels: div(sum.source_pixels),
        anchor_active: div(sum.anchor_active),
        prob_active: div(sum.prob_active),
    }
}

/// Initial discriminator for a model's feature space.
pub fn init_discriminator(model: &SegModel, plan: &TrainPlan) -> Result<Discriminator> {
    Discriminator::init(
        DiscriminatorDims {
            feature: model.dims().feature,
            hidden: plan.config.discriminator_hidden,
        },
        plan.seed,
    )
}

/// Plain supervised source training over the same schedule as the full
/// pipeline: pretraining, then the warm-up's iterations and the adaptation
/// iterations, all on source cross-entropy only. Used as the reference for
/// the zero-weight reduction of the pipeline.
pub fn train_source_only(
    mut model: SegModel,
    source: &Dataset,
    plan: &TrainPlan,
) -> Result<SegModel> {
    let cfg = &plan.config;
    let labels = source
        .grids()
        .iter()
        .map(|g| g.label_indices())
        .collect::<Result<Vec<_>>>()?;
    let phases = [
        (Phase::Pretrain, cfg.pretrain_iterations, 1),
        (Phase::Warmup, cfg.warmup_iterations, 1),
        (Phase::Adapt, cfg.iterations_per_stage, cfg.stages),
    ];
    for (phase, len, repeats) in phases {
        let mut sampler = Sampler::new(plan.seed, phase, Domain::Source, source.len());
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let total = len * repeats;
        for n in 0..total {
            let lr = if phase == Phase::Adapt && cfg.restart_schedule_each_stage {
                poly_lr(n % len, len, cfg.base_lr, cfg.poly_power)?
            } else {
                poly_lr(n, total, cfg.base_lr, cfg.poly_power)?
            };
            let s = sampler.index(n);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = model.input_var(&mut tape, source.grids()[s].features_f64())?;
            let out = model.forward_on(&mut tape, &bound, x)?;
            let targets: Vec<Option<usize>> = labels[s].iter().map(|&c| Some(c)).collect();
            let loss = ce_loss(&mut tape, out.probs, &targets)?;
            tape.backward(loss)?;
            apply_grads(&tape, bound.vars(), model.params_mut())?;
            opt.step(model.params_mut(), lr)?;
        }
    }
    Ok(model)
}
