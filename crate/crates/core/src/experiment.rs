//! Experiment configuration and the end-to-end pipelines behind the command
//! line: data generation, full runs, ablation sweeps and evaluation.
//!
//! Every output is a pure function of the configuration (seed included) and
//! the dataset files, so reruns reproduce identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::{
    anchor_distances, construct_anchors, identify_active, identify_active_by_probability,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, pseudo_label_audit, EvalReport, PseudoLabelAudit};
use crate::model::{Discriminator, ModelDims, SegModel};
use crate::synth::{default_prototypes, generate, Affine, Dataset, DomainSpec, Role};
use crate::trainer::{
    init_discriminator, train_source_only, IterationRecord, StageObserver, StageState,
    StageSummary, Switches, TrainConfig, TrainPlan, Trainer,
};

/// Appearance gap applied to the target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetShift {
    pub scale: f64,
    /// Radians, inside a seeded 2-plane.
    pub rotation: f64,
    pub offset_norm: f64,
    pub noise_sigma: f64,
}

impl Default for TargetShift {
    fn default() -> Self {
        Self {
            scale: 1.2,
            rotation: 1.3,
            offset_norm: 0.0,
            noise_sigma: 0.8,
        }
    }
}

/// Existing dataset files to use instead of generating them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub source: PathBuf,
    pub target_train: PathBuf,
    pub target_eval: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub categories: usize,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    pub coherence_scale: usize,
    pub source_count: usize,
    pub target_train_count: usize,
    pub target_eval_count: usize,
    pub source_noise_sigma: f64,
    pub target: TargetShift,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<DataFiles>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: 6,
            feature_dim: 8,
            height: 8,
            width: 8,
            coherence_scale: 4,
            source_count: 40,
            target_train_count: 40,
            target_eval_count: 20,
            source_noise_sigma: 0.6,
            target: TargetShift::default(),
            files: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub feature: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            hidden: d.hidden,
            embed: d.embed,
            feature: d.feature,
        }
    }
}

/// Rows of the ablation table. `warmup` is the reference row; the others
/// add loss terms on top of the warmed model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Warmup,
    CeTargetProb,
    CeTarget,
    Distance,
    DistanceCeTarget,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Warmup,
        Variant::CeTargetProb,
        Variant::CeTarget,
        Variant::Distance,
        Variant::DistanceCeTarget,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Warmup => "warmup",
            Variant::CeTargetProb => "ce-target-prob",
            Variant::CeTarget => "ce-target",
            Variant::Distance => "distance",
            Variant::DistanceCeTarget => "distance-ce-target",
            Variant::Full => "full",
        }
    }

    /// Loss switches for the adaptation stages, `None` for the warm-up row.
    pub fn switches(self) -> Option<Switches> {
        let on = |dis: bool, ce_t: bool, ce_tp: bool| Switches {
            dis_source: dis,
            dis_target: dis,
            ce_target: ce_t,
            ce_target_prob: ce_tp,
            warmup: true,
        };
        match self {
            Variant::Warmup => None,
            Variant::CeTargetProb => Some(on(false, false, true)),
            Variant::CeTarget => Some(on(false, true, false)),
            Variant::Distance => Some(on(true, false, false)),
            Variant::DistanceCeTarget => Some(on(true, true, false)),
            Variant::Full => Some(on(true, true, true)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub switches: Switches,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    /// Default experiment for `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            out: default_out(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            switches: Switches::default(),
            ablation: AblationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (name, n) in [
            ("data.source_count", d.source_count),
            ("data.target_train_count", d.target_train_count),
            ("data.target_eval_count", d.target_eval_count),
            ("data.height", d.height),
            ("data.width", d.width),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let t = &d.target;
        for (name, v) in [
            ("data.source_noise_sigma", d.source_noise_sigma),
            ("data.target.noise_sigma", t.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if ![t.scale, t.rotation, t.offset_norm]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("data.target shift must be finite".into()));
        }
        self.source_spec().validate()?;
        self.model_dims().validate()?;
        self.train.validate()?;
        if self.train.stages == 0 {
            return Err(Error::Config("train.stages (K) must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.ablation.variants {
            if !seen.insert(*v) {
                return Err(Error::Config(format!(
                    "ablation variant {} listed twice",
                    v.name()
                )));
            }
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input: self.data.feature_dim,
            hidden: self.model.hidden,
            embed: self.model.embed,
            feature: self.model.feature,
            categories: self.data.categories,
        }
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            config: self.train.clone(),
            switches: self.switches,
            seed: self.seed,
        }
    }

    /// Source grids are keyed by `seed`, target-train by `seed + 1` and
    /// target-eval by `seed + 2`. Prototypes and the shift use `seed`.
    pub fn source_spec(&self) -> DomainSpec {
        let d = &self.data;
        DomainSpec {
            categories: d.categories,
            feature_dim: d.feature_dim,
            prototypes: default_prototypes(d.categories, d.feature_dim, self.seed),
            transform: Affine::identity(d.feature_dim),
            noise_sigma: d.source_noise_sigma,
            coherence_scale: d.coherence_scale,
            seed: self.seed,
        }
    }

    pub fn target_spec(&self, role: Role) -> DomainSpec {
        let t = &self.data.target;
        let mut spec = self.source_spec();
        spec.transform = Affine::shift(
            self.data.feature_dim,
            t.scale,
            t.rotation,
            t.offset_norm,
            self.seed,
        );
        spec.noise_sigma = t.noise_sigma;
        spec.seed = self
            .seed
            .wrapping_add(if role == Role::TargetEval { 2 } else { 1 });
        spec
    }
}

/// Source, target-train and target-eval sets of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        Ok(Self {
            source: generate(
                &cfg.source_spec(),
                Role::Source,
                d.source_count,
                d.height,
                d.width,
            )?,
            target_train: generate(
                &cfg.target_spec(Role::TargetTrain),
                Role::TargetTrain,
                d.target_train_count,
                d.height,
                d.width,
            )?,
            target_eval: generate(
                &cfg.target_spec(Role::TargetEval),
                Role::TargetEval,
                d.target_eval_count,
                d.height,
                d.width,
            )?,
        })
    }

    /// Loads `data.files` when set, otherwise generates from the spec.
    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.data.files {
            None => Self::generate(cfg),
            Some(f) => {
                let ds = Self {
                    source: Dataset::load(&f.source)?,
                    target_train: Dataset::load(&f.target_train)?,
                    target_eval: Dataset::load(&f.target_eval)?,
                };
                ds.check(cfg)?;
                Ok(ds)
            }
        }
    }

    fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        for (name, ds) in self.iter() {
            if ds.feature_dim() != cfg.data.feature_dim || ds.categories() != cfg.data.categories {
                return Err(Error::Config(format!(
                    "{name} has D={}, C={}; config says D={}, C={}",
                    ds.feature_dim(),
                    ds.categories(),
                    cfg.data.feature_dim,
                    cfg.data.categories
                )));
            }
            if !ds.is_labeled() {
                return Err(Error::Config(format!("{name} carries no labels")));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Dataset)> {
        [
            ("source", &self.source),
            ("target-train", &self.target_train),
            ("target-eval", &self.target_eval),
        ]
        .into_iter()
    }

    pub fn file_name(name: &str) -> String {
        format!("{name}.cagd")
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.iter()
            .map(|(name, ds)| {
                let path = dir.join(Self::file_name(name));
                ds.save(&path)?;
                Ok(path)
            })
            .collect()
    }
}

/// Pretrained and warmed models from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub pretrained: SegModel,
    pub warmed: SegModel,
    pub discriminator: Discriminator,
    pub log: Vec<IterationRecord>,
}

/// Runs pretraining and warm-up.
pub fn prepare(cfg: &ExperimentConfig, data: &Datasets) -> Result<Prepared> {
    let plan = cfg.plan();
    let mut trainer = Trainer::new(&data.source, data.target_train.unlabeled(), plan.clone())?;
    let init = SegModel::init(cfg.model_dims(), cfg.seed)?;
    let pretrained = trainer.pretrain(init)?;
    let disc = init_discriminator(&pretrained, &plan)?;
    let (warmed, discriminator) = trainer.warmup(pretrained.clone(), disc)?;
    Ok(Prepared {
        pretrained,
        warmed,
        discriminator,
        log: trainer.take_log(),
    })
}

/// Evaluation and pseudo-label audits for one adaptation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub summary: StageSummary,
    pub anchor_audit: PseudoLabelAudit,
    pub prob_audit: PseudoLabelAudit,
    pub eval: EvalReport,
}

/// Collects stage reports and optionally writes snapshots and checkpoints.
struct StageRecorder<'a> {
    data: &'a Datasets,
    out: Option<&'a Path>,
    pending: Option<(PseudoLabelAudit, PseudoLabelAudit)>,
    reports: Vec<StageReport>,
}

impl StageObserver for StageRecorder<'_> {
    fn stage_started(&mut self, state: &StageState) -> Result<()> {
        if let Some(out) = self.out {
            state.save(&snapshot_path(out, state.stage()))?;
        }
        self.pending = Some((
            pseudo_label_audit(state.anchor_activations(), &self.data.target_train)?,
            pseudo_label_audit(state.prob_activations(), &self.data.target_train)?,
        ));
        Ok(())
    }

    fn stage_finished(&mut self, model: &SegModel, summary: &StageSummary) -> Result<()> {
        if let Some(out) = self.out {
            model.save(
                &out.join("checkpoints")
                    .join(format!("stage-{}.cagm", summary.stage)),
            )?;
        }
        let (anchor_audit, prob_audit) = self
            .pending
            .take()
            .ok_or_else(|| Error::Contract("stage finished before it started".into()))?;
        self.reports.push(StageReport {
            summary: summary.clone(),
            anchor_audit,
            prob_audit,
            eval: evaluate(model, &self.data.target_eval)?,
        });
        Ok(())
    }
}

pub fn snapshot_path(out: &Path, stage: usize) -> PathBuf {
    out.join("snapshots").join(format!("stage-{stage}.cags"))
}

/// Adaptation from a warmed model through all `K` stages, or from a stage
/// snapshot when `resume` is given.
pub fn adapt(
    cfg: &ExperimentConfig,
    data: &Datasets,
    warmed: SegModel,
    resume: Option<StageState>,
    out: Option<&Path>,
) -> Result<(SegModel, Vec<StageReport>, Vec<IterationRecord>)> {
    let mut trainer = Trainer::new(&data.source, data.target_train.unlabeled(), cfg.plan())?;
    let mut recorder = StageRecorder {
        data,
        out,
        pending: None,
        reports: Vec::new(),
    };
    let (model, _) = match resume {
        None => trainer.adapt(warmed, &mut recorder)?,
        Some(state) => trainer.resume(state, &mut recorder)?,
    };
    Ok((model, recorder.reports, trainer.take_log()))
}

/// Results of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Pretrained model, before warm-up.
    pub pretrained: Option<EvalReport>,
    /// Source-only reference: source cross-entropy over the whole schedule.
    pub source_only: Option<EvalReport>,
    pub warmup: Option<EvalReport>,
    pub stages: Vec<StageReport>,
    #[serde(rename = "final")]
    pub final_eval: EvalReport,
}

/// Pretraining, warm-up, adaptation and the source-only reference, all in
/// memory.
pub fn run_in_memory(cfg: &ExperimentConfig, data: &Datasets) -> Result<RunReport> {
    let prepared = prepare(cfg, data)?;
    let (model, stages, _) = adapt(cfg, data, prepared.warmed.clone(), None, None)?;
    let source_only = train_source_only(
        SegModel::init(cfg.model_dims(), cfg.seed)?,
        &data.source,
        &cfg.plan(),
    )?;
    Ok(RunReport {
        seed: cfg.seed,
        pretrained: Some(evaluate(&prepared.pretrained, &data.target_eval)?),
        source_only: Some(evaluate(&source_only, &data.target_eval)?),
        warmup: Some(evaluate(&prepared.warmed, &data.target_eval)?),
        stages,
        final_eval: evaluate(&model, &data.target_eval)?,
    })
}

/// Writes line-delimited JSON records.
fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_report(out: &Path, name: &str, report: &EvalReport) -> Result<()> {
    write_json(&out.join("reports").join(format!("{name}.json")), report)?;
    write_text(
        &out.join("reports").join(format!("{name}.tsv")),
        &report.to_table(),
    )
}

/// Per-stage plot series: one row per stage.
pub fn stage_series(stages: &[StageReport]) -> String {
    let mut s = String::from(
        "stage\tmiou_x100\tanchor_active_fraction\tprob_active_fraction\tanchor_precision\tprob_precision\tdistance_start\tdistance_end\n",
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    for r in stages {
        let total = r.summary.target_pixels.max(1) as f64;
        let _ = writeln!(
            s,
            "{}\t{:.2}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
            r.summary.stage,
            r.eval.miou * 100.0,
            r.summary.anchor_active as f64 / total,
            r.summary.prob_active as f64 / total,
            opt(r.anchor_audit.overall_precision),
            opt(r.prob_audit.overall_precision),
            opt(r.summary.active_distance_start),
            opt(r.summary.active_distance_end),
        );
    }
    s
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let log = out.join("metrics.jsonl");
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::file(&log, e))?;
    }
    Ok(())
}

/// Writes the three dataset files under `out/data`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<(PathBuf, usize)>> {
    cfg.validate()?;
    let data = Datasets::generate(cfg)?;
    let paths = data.save(&cfg.out.join("data"))?;
    Ok(paths
        .into_iter()
        .zip(data.iter().map(|(_, d)| d.len()))
        .collect())
}

/// Full run with every artifact written under `cfg.out`:
///
/// ```text
/// config.toml           effective configuration
/// data/*.cagd           generated datasets, unless `data.files` is set
/// metrics.jsonl         one record per training iteration
/// checkpoints/*.cagm    pretrained, warmup, discriminator, source-only,
///                       stage-k, final
/// snapshots/*.cags      stage-start snapshots
/// reports/*.{json,tsv}  target-eval reports
/// plots/stages.tsv      per-stage series
/// summary.json          the run report
/// ```
///
/// With `resume`, pretraining and warm-up are skipped and adaptation
/// continues from the snapshot; the report then holds only what was rerun.
pub fn cmd_run(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    prepare_out(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let data = Datasets::for_config(cfg)?;
    if cfg.data.files.is_none() {
        data.save(&out.join("data"))?;
    }
    let ckpt = out.join("checkpoints");

    let (pretrained, source_only, warmup, stages, model) = match resume {
        Some(path) => {
            let state = StageState::load(path)?;
            let warmed = state.model().clone();
            let (model, stages, log) = adapt(cfg, &data, warmed, Some(state), Some(out))?;
            append_jsonl(&out.join("metrics.jsonl"), &log)?;
            (None, None, None, stages, model)
        }
        None => {
            let prepared = prepare(cfg, &data)?;
            append_jsonl(&out.join("metrics.jsonl"), &prepared.log)?;
            prepared.pretrained.save(&ckpt.join("pretrained.cagm"))?;
            prepared.warmed.save(&ckpt.join("warmup.cagm"))?;
            prepared
                .discriminator
                .save(&ckpt.join("discriminator.cagm"))?;
            let pre = evaluate(&prepared.pretrained, &data.target_eval)?;
            let warm = evaluate(&prepared.warmed, &data.target_eval)?;
            write_report(out, "pretrained", &pre)?;
            write_report(out, "warmup", &warm)?;

            let (model, stages, log) = adapt(cfg, &data, prepared.warmed, None, Some(out))?;
            append_jsonl(&out.join("metrics.jsonl"), &log)?;

            let so_model = train_source_only(
                SegModel::init(cfg.model_dims(), cfg.seed)?,
                &data.source,
                &cfg.plan(),
            )?;
            so_model.save(&ckpt.join("source-only.cagm"))?;
            let so = evaluate(&so_model, &data.target_eval)?;
            write_report(out, "source-only", &so)?;
            (Some(pre), Some(so), Some(warm), stages, model)
        }
    };
    model.save(&ckpt.join("final.cagm"))?;
    for s in &stages {
        write_report(out, &format!("stage-{}", s.summary.stage), &s.eval)?;
    }
    write_text(
        &out.join("plots").join("stages.tsv"),
        &stage_series(&stages),
    )?;
    let final_eval = evaluate(&model, &data.target_eval)?;
    write_report(out, "final", &final_eval)?;
    let report = RunReport {
        seed: cfg.seed,
        pretrained,
        source_only,
        warmup,
        stages,
        final_eval,
    };
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub miou: f64,
    /// `miou − warm-up miou`.
    pub gain: f64,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub warmup_miou: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Tab-separated: variant, mIoU×100, gain×100.
    pub fn to_table(&self) -> String {
        let mut s = String::from("variant\tmiou_x100\tgain_x100\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.2}\t{:+.2}",
                r.variant.name(),
                r.miou * 100.0,
                r.gain * 100.0
            );
        }
        s
    }
}

/// Runs every configured variant from one warmed model.
pub fn ablate_in_memory(
    cfg: &ExperimentConfig,
    data: &Datasets,
    prepared: &Prepared,
    out: Option<&Path>,
) -> Result<AblationReport> {
    cfg.validate()?;
    let warm = evaluate(&prepared.warmed, &data.target_eval)?;
    let mut rows = Vec::with_capacity(cfg.ablation.variants.len());
    for &variant in &cfg.ablation.variants {
        let eval = match variant.switches() {
            None => warm.clone(),
            Some(switches) => {
                let mut vcfg = cfg.clone();
                vcfg.switches = switches;
                let (model, _, log) = adapt(&vcfg, data, prepared.warmed.clone(), None, None)?;
                if let Some(out) = out {
                    let dir = out.join("variants").join(variant.name());
                    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
                    model.save(&dir.join("final.cagm"))?;
                    let log_path = dir.join("metrics.jsonl");
                    if log_path.exists() {
                        fs::remove_file(&log_path).map_err(|e| Error::file(&log_path, e))?;
                    }
                    append_jsonl(&log_path, &log)?;
                }
                evaluate(&model, &data.target_eval)?
            }
        };
        if let Some(out) = out {
            write_report(out, &format!("variant-{}", variant.name()), &eval)?;
        }
        rows.push(AblationRow {
            variant,
            miou: eval.miou,
            gain: eval.miou - warm.miou,
            eval,
        });
    }
    Ok(AblationReport {
        seed: cfg.seed,
        warmup_miou: warm.miou,
        rows,
    })
}

/// Ablation sweep with outputs under `cfg.out`: `ablation.tsv`,
/// `ablation.json`, per-variant checkpoints, logs and reports.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    prepare_out(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let data = Datasets::for_config(cfg)?;
    let prepared = prepare(cfg, &data)?;
    append_jsonl(&out.join("metrics.jsonl"), &prepared.log)?;
    prepared
        .warmed
        .save(&out.join("checkpoints").join("warmup.cagm"))?;
    let report = ablate_in_memory(cfg, &data, &prepared, Some(out))?;
    write_text(&out.join("ablation.tsv"), &report.to_table())?;
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

/// Evaluates a checkpoint on a dataset file and writes the report plus the
/// per-stage series of the run directory it belongs to, if any.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<EvalReport> {
    let model = SegModel::load(checkpoint)?;
    let data = Dataset::load(dataset)?;
    let report = evaluate(&model, &data)?;
    write_report(out, "eval", &report)?;
    let summary = checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|run| run.join("summary.json"))
        .filter(|p| p.is_file());
    if let Some(path) = summary {
        let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let run: RunReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: e.column() as u64,
            reason: format!("{}: {e}", path.display()),
        })?;
        write_text(
            &out.join("plots").join("stages.tsv"),
            &stage_series(&run.stages),
        )?;
    }
    Ok(report)
}

/// Anchor versus probability pseudo-labels at equal coverage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedAudit {
    pub prob_threshold: f64,
    pub prob_coverage: f64,
    pub prob_precision: Option<f64>,
    /// Margin chosen so the anchor active set matches the probability
    /// active set in size.
    pub margin: f64,
    pub anchor_coverage: f64,
    pub anchor_precision: Option<f64>,
}

/// Picks the margin whose anchor active count is closest to the number of
/// probability-active pixels, then audits both label sets against the
/// target-train labels.
pub fn matched_coverage_audit(
    model: &SegModel,
    source: &Dataset,
    target: &Dataset,
    prob_threshold: f64,
) -> Result<MatchedAudit> {
    let anchors = construct_anchors(source, model)?;
    let mut distances = Vec::with_capacity(target.len());
    let mut prob = Vec::with_capacity(target.len());
    for g in target.grids() {
        let (features, probs) = model.forward_features(g.features_f64())?;
        distances.push(anchor_distances(&features, &anchors)?);
        prob.push(identify_active_by_probability(&probs, prob_threshold)?);
    }
    let want: usize = prob.iter().map(|a| a.active_count()).sum();

    let c = anchors.categories();
    let mut gaps: Vec<f64> = distances
        .iter()
        .flat_map(|d| d.values().chunks(c).map(runner_up_gap).collect::<Vec<_>>())
        .flatten()
        .collect();
    gaps.sort_by(|a, b| b.total_cmp(a));
    // Strictly more than the margin is active, so the want-th largest gap
    // (0-based) admits exactly the `want` larger ones, ties aside.
    let candidates: Vec<f64> = [want.checked_sub(1), Some(want), Some(want + 1)]
        .into_iter()
        .flatten()
        .filter_map(|i| gaps.get(i).copied())
        .chain(std::iter::once(0.0))
        .collect();
    let mut best: Option<(usize, f64, Vec<_>)> = None;
    for margin in candidates {
        let acts = distances
            .iter()
            .map(|d| identify_active(d, margin))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = acts.iter().map(|a| a.active_count()).sum();
        let miss = n.abs_diff(want);
        if best.as_ref().is_none_or(|(m, _, _)| miss < *m) {
            best = Some((miss, margin, acts));
        }
    }
    let (_, margin, anchor) = best.ok_or_else(|| Error::Contract("no margin candidates".into()))?;
    let a = pseudo_label_audit(&anchor, target)?;
    let p = pseudo_label_audit(&prob, target)?;
    Ok(MatchedAudit {
        prob_threshold,
        prob_coverage: p.overall_coverage,
        prob_precision: p.overall_precision,
        margin,
        anchor_coverage: a.overall_coverage,
        anchor_precision: a.overall_precision,
    })
}

/// Runner-up distance minus nearest over finite entries.
fn runner_up_gap(row: &[f64]) -> Option<f64> {
    let mut finite: Vec<f64> = row.iter().copied().filter(|d| d.is_finite()).collect();
    if finite.len() < 2 {
        return None;
    }
    finite.sort_by(f64::total_cmp);
    Some(finite[1] - finite[0])
}
