//! End-to-end orchestration: simulate, teach, train, separate, evaluate.
//!
//! Every stage reads and writes files so it can be rerun on its own. Per
//! mixture failures are logged and collected, never fatal to the stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamform::{apply_beamformer, apply_mask, build_beamformers, BeamformerBank};
use crate::cacgmm::{em_fit, Initialization};
use crate::error::{Error, Result};
use crate::masks::{MaskSet, MaskStage, SIMPLEX_TOL};
use crate::metrics::{evaluate_mixture, EvalEntry, EvalReport, Extraction, ExtractionMode, SceneStfts};
use crate::mixsim::{render_scene, sample_scene, write_scene, Manifest, ManifestEntry, SimConfig};
use crate::permalign::align;
use crate::stft::{istft, stft, MultichannelStft, StftConfig};
use crate::student::{
    active_slots, extract_features, harden_targets, predict_masks, train, NetConfig, StudentNet, TrainConfig, TrainLog,
    TrainingExample,
};
use crate::tensor_io::{read_tensor, read_wav, write_atomic, write_tensor, write_wav, AudioBuffer, WavEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    TeacherOnly,
    StudentKmeans,
    StudentInitCacgmm,
}

impl PredictionMode {
    pub fn needs_student(self) -> bool {
        !matches!(self, PredictionMode::TeacherOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Speakers plus one noise class.
    pub classes: usize,
    pub iterations: usize,
    /// EM iterations when initialized from student masks.
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            iterations: 100,
            refine_iterations: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub context: usize,
    pub kmeans_restarts: usize,
    /// Only slots within this many dB of the loudest slot enter the loss
    /// and the k-means fit; the rest take the nearest centroid. `None` uses
    /// every slot.
    pub active_range_db: Option<f64>,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 20,
            hidden: 256,
            context: 2,
            kmeans_restarts: crate::clustering::DEFAULT_RESTARTS,
            active_range_db: None,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl StudentConfig {
    pub fn net_config(&self, bins: usize) -> NetConfig {
        NetConfig {
            bins,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden,
            context: self.context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    pub stft: StftConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub mode: PredictionMode,
    pub extraction: ExtractionMode,
    /// Channel used by mask extraction.
    pub reference_channel: usize,
    pub train_mixtures: usize,
    pub test_mixtures: usize,
    /// Scene seeds are `seed + index`; the test corpus starts at `seed + 1_000_000`.
    pub seed: u64,
    pub work_dir: PathBuf,
    pub workers: usize,
    pub dump_pgm: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            stft: StftConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            mode: PredictionMode::StudentInitCacgmm,
            extraction: ExtractionMode::Mvdr,
            reference_channel: 0,
            train_mixtures: 200,
            test_mixtures: 25,
            seed: 0,
            work_dir: PathBuf::from("udc-work"),
            workers: 0,
            dump_pgm: false,
        }
    }
}

impl PipelineConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.stft.validate()?;
        self.student.train.validate()?;
        if self.teacher.classes < 2 || self.teacher.iterations == 0 || self.teacher.refine_iterations == 0 {
            return Err(Error::Config("teacher needs at least 2 classes and 1 iteration".into()));
        }
        if self.teacher.classes < self.sim.sources {
            return Err(Error::Config(format!(
                "{} teacher classes cannot cover {} sources",
                self.teacher.classes, self.sim.sources
            )));
        }
        if self.reference_channel >= self.sim.mics {
            return Err(Error::Config("reference channel out of range".into()));
        }
        Ok(())
    }
}

/// Processing steps applied to one mixture, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stft,
    TeacherEm,
    Permalign,
    StudentKmeans,
    RefineEm,
    MaskExtraction,
    MvdrExtraction,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLog(pub Vec<Stage>);

impl StageLog {
    pub fn push(&mut self, stage: Stage) {
        self.0.push(stage);
    }

    pub fn contains(&self, stage: Stage) -> bool {
        self.0.contains(&stage)
    }
}

fn checked(masks: MaskSet) -> Result<MaskSet> {
    masks.check_simplex(SIMPLEX_TOL)?;
    Ok(masks)
}

/// Random-init cACGMM followed by permutation alignment.
pub fn teach_mixture(y: &MultichannelStft, cfg: &TeacherConfig, seed: u64, log: &mut StageLog) -> Result<MaskSet> {
    let fit = em_fit(y, cfg.classes, Initialization::Random { seed }, cfg.iterations)?;
    log.push(Stage::TeacherEm);
    let (aligned, _) = align(&checked(fit.masks)?)?;
    log.push(Stage::Permalign);
    checked(aligned.with_stage(MaskStage::Aligned))
}

/// Masks for one mixture according to `mode`. Student modes need `net`.
pub fn predict_mixture(
    y: &MultichannelStft,
    mode: PredictionMode,
    teacher: &TeacherConfig,
    student_cfg: &StudentConfig,
    net: Option<&StudentNet>,
    seed: u64,
    log: &mut StageLog,
) -> Result<MaskSet> {
    let student = |log: &mut StageLog| -> Result<MaskSet> {
        let net = net.ok_or_else(|| Error::Config(format!("{mode:?} needs a trained student")))?;
        let y1 = y.select_channel(0)?;
        let active = student_cfg.active_range_db.map(|r| active_slots(&y1, r)).transpose()?;
        let masks = predict_masks(net, &y1, teacher.classes, student_cfg.kmeans_restarts, seed, active.as_deref())?;
        log.push(Stage::StudentKmeans);
        checked(masks)
    };
    match mode {
        PredictionMode::TeacherOnly => teach_mixture(y, teacher, seed, log),
        PredictionMode::StudentKmeans => student(log),
        PredictionMode::StudentInitCacgmm => {
            let init = student(log)?;
            let fit = em_fit(y, teacher.classes, Initialization::Masks(init), teacher.refine_iterations)?;
            log.push(Stage::RefineEm);
            checked(fit.masks.with_stage(MaskStage::Final))
        }
    }
}

/// One separated single-channel STFT per class, plus the beamformers used.
pub fn extract(
    y: &MultichannelStft,
    masks: &MaskSet,
    mode: ExtractionMode,
    reference: usize,
    log: &mut StageLog,
) -> Result<(Vec<MultichannelStft>, Option<BeamformerBank>)> {
    match mode {
        ExtractionMode::Mask => {
            log.push(Stage::MaskExtraction);
            let outs = (0..masks.classes())
                .map(|k| apply_mask(masks.class_mask(k), y, reference))
                .collect::<Result<_>>()?;
            Ok((outs, None))
        }
        ExtractionMode::Mvdr => {
            log.push(Stage::MvdrExtraction);
            let bank = build_beamformers(y, masks)?;
            let outs = (0..masks.classes())
                .map(|k| apply_beamformer(bank.class_weights(k), y))
                .collect::<Result<_>>()?;
            Ok((outs, Some(bank)))
        }
    }
}

/// Invasive evaluation of one mixture's masks with the chosen extraction.
pub fn evaluate_masks(
    id: &str,
    y: &MultichannelStft,
    truth: &SceneStfts,
    masks: &MaskSet,
    mode: ExtractionMode,
    reference: usize,
) -> Result<EvalEntry> {
    match mode {
        ExtractionMode::Mask => evaluate_mixture(id, truth, &Extraction::Mask { masks, reference }, true),
        ExtractionMode::Mvdr => {
            let bank = build_beamformers(y, masks)?;
            evaluate_mixture(id, truth, &Extraction::Mvdr(&bank), true)
        }
    }
}

/// Pipeline stage that opened a file; used to audit ground-truth access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Simulate,
    Teach,
    Align,
    Train,
    Separate,
    Evaluate,
}

/// Root directory of a run with a worker pool and a record of every audio
/// file each stage read.
pub struct Workspace {
    root: PathBuf,
    pool: rayon::ThreadPool,
    reads: Mutex<Vec<(StageKind, PathBuf)>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub processed: Vec<String>,
    pub failures: Vec<(String, String)>,
}

impl StageSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    fn collect<T>(results: Vec<(String, Result<T>)>, stage: StageKind) -> (Self, Vec<(String, T)>) {
        let mut summary = Self::default();
        let mut outputs = Vec::new();
        for (id, r) in results {
            match r {
                Ok(v) => {
                    summary.processed.push(id.clone());
                    outputs.push((id, v));
                }
                Err(e) => {
                    log::error!("{stage:?} failed on {id}: {e}");
                    summary.failures.push((id, e.to_string()));
                }
            }
        }
        (summary, outputs)
    }
}

impl Workspace {
    /// `workers == 0` uses all available cores.
    pub fn new(root: impl Into<PathBuf>, workers: usize) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            root,
            pool,
            reads: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn read_audio(&self, stage: StageKind, path: &Path) -> Result<AudioBuffer> {
        self.reads.lock().expect("audit log poisoned").push((stage, path.to_path_buf()));
        read_wav(path)
    }

    /// Every (stage, path) pair read so far.
    pub fn audit_log(&self) -> Vec<(StageKind, PathBuf)> {
        self.reads.lock().expect("audit log poisoned").clone()
    }

    /// Stages that opened a source-image or noise file listed in `manifest`.
    pub fn ground_truth_readers(&self, manifest: &Manifest, manifest_dir: &Path) -> BTreeSet<StageKind> {
        let truth: BTreeSet<PathBuf> = manifest
            .entries
            .iter()
            .flat_map(|e| e.images.iter().chain(e.noise.iter()).map(|p| manifest_dir.join(p)))
            .collect();
        self.audit_log()
            .into_iter()
            .filter(|(_, p)| truth.contains(p))
            .map(|(s, _)| s)
            .collect()
    }

    fn par_map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
    }

    fn observation_stft(&self, stage: StageKind, dir: &Path, entry: &ManifestEntry, config: StftConfig) -> Result<MultichannelStft> {
        let audio = self.read_audio(stage, &dir.join(&entry.observation))?;
        stft(&audio, config)
    }

    /// Renders `count` scenes with seeds `seed..seed + count` into `out_dir`.
    pub fn simulate(&self, cfg: &SimConfig, out_dir: &Path, count: usize, seed: u64) -> Result<(Manifest, StageSummary)> {
        let ids: Vec<u64> = (0..count as u64).map(|i| seed + i).collect();
        let results = self.par_map(&ids, |_, &s| {
            let id = format!("mix{s:07}");
            let r = sample_scene(s, cfg)
                .and_then(|spec| render_scene(&spec, cfg.max_order))
                .and_then(|scene| write_scene(&scene, out_dir, &id, WavEncoding::Float32));
            (id, r)
        });
        let (summary, entries) = StageSummary::collect(results, StageKind::Simulate);
        let manifest = Manifest {
            entries: entries.into_iter().map(|(_, e)| e).collect(),
        };
        manifest.write(out_dir.join("manifest.json"))?;
        Ok((manifest, summary))
    }

    /// Aligned teacher masks `<id>_masks.tensor` for every mixture.
    pub fn teach(
        &self,
        manifest: &Manifest,
        manifest_dir: &Path,
        out_dir: &Path,
        stft_cfg: StftConfig,
        teacher: &TeacherConfig,
        dump_pgm: bool,
    ) -> Result<StageSummary> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let results = self.par_map(&manifest.entries, |i, entry| {
            let r = (|| {
                let y = self.observation_stft(StageKind::Teach, manifest_dir, entry, stft_cfg)?;
                let mut log = StageLog::default();
                let masks = teach_mixture(&y, teacher, teacher.seed.wrapping_add(i as u64), &mut log)?;
                write_tensor(out_dir.join(format!("{}_masks.tensor", entry.id)), &masks.to_tensor())?;
                if dump_pgm {
                    for k in 0..masks.classes() {
                        masks.write_pgm(k, &out_dir.join(format!("{}_class{k}.pgm", entry.id)))?;
                    }
                }
                Ok(())
            })();
            (entry.id.clone(), r)
        });
        Ok(StageSummary::collect(results, StageKind::Teach).0)
    }

    /// Trains a student on observations and hardened teacher masks.
    pub fn train(
        &self,
        manifest: &Manifest,
        manifest_dir: &Path,
        masks_dir: &Path,
        stft_cfg: StftConfig,
        student: &StudentConfig,
    ) -> Result<(StudentNet, TrainLog, StageSummary)> {
        let results = self.par_map(&manifest.entries, |_, entry| {
            let r = (|| {
                let y = self.observation_stft(StageKind::Train, manifest_dir, entry, stft_cfg)?;
                let masks = MaskSet::from_tensor(
                    &read_tensor(masks_dir.join(format!("{}_masks.tensor", entry.id)))?,
                    MaskStage::Aligned,
                )?;
                let y1 = y.select_channel(0)?;
                let mut targets = harden_targets(&masks);
                if let Some(range) = student.active_range_db {
                    targets = targets.with_active(active_slots(&y1, range)?)?;
                }
                TrainingExample::new(extract_features(&y1)?, targets)
            })();
            (entry.id.clone(), r)
        });
        let (summary, examples) = StageSummary::collect(results, StageKind::Train);
        let corpus: Vec<TrainingExample> = examples.into_iter().map(|(_, e)| e).collect();
        let bins = corpus
            .first()
            .map(|e| e.features.bins())
            .ok_or_else(|| Error::InvalidArgument("no usable training mixtures".into()))?;
        let net = StudentNet::new(student.net_config(bins), student.seed)?;
        let (net, log) = self.pool.install(|| train(net, &corpus, &student.train))?;
        Ok((net, log, summary))
    }

    /// Predicts masks, extracts every class and writes `<id>_masks.tensor`,
    /// `<id>_class<k>.wav` and `<id>_stages.json` into `out_dir`.
    #[allow(clippy::too_many_arguments)]
    pub fn separate(
        &self,
        manifest: &Manifest,
        manifest_dir: &Path,
        out_dir: &Path,
        cfg: &PipelineConfig,
        net: Option<&StudentNet>,
    ) -> Result<StageSummary> {
        if cfg.mode.needs_student() && net.is_none() {
            return Err(Error::Config(format!("mode {:?} requires a trained student", cfg.mode)));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let results = self.par_map(&manifest.entries, |i, entry| {
            let r = (|| {
                let audio = self.read_audio(StageKind::Separate, &manifest_dir.join(&entry.observation))?;
                let y = stft(&audio, cfg.stft)?;
                let mut log = StageLog::default();
                log.push(Stage::Stft);
                let seed = cfg.teacher.seed.wrapping_add(i as u64);
                let masks = predict_mixture(&y, cfg.mode, &cfg.teacher, &cfg.student, net, seed, &mut log)?;
                let (outs, _) = extract(&y, &masks, cfg.extraction, cfg.reference_channel, &mut log)?;
                write_tensor(out_dir.join(format!("{}_masks.tensor", entry.id)), &masks.to_tensor())?;
                for (k, z) in outs.iter().enumerate() {
                    let wav = istft(z, audio.num_samples())?;
                    write_wav(&wav, out_dir.join(format!("{}_class{k}.wav", entry.id)), WavEncoding::Float32)?;
                }
                if cfg.dump_pgm {
                    for k in 0..masks.classes() {
                        masks.write_pgm(k, &out_dir.join(format!("{}_class{k}.pgm", entry.id)))?;
                    }
                }
                let stages = out_dir.join(format!("{}_stages.json", entry.id));
                write_atomic(&stages, |file| Ok(serde_json::to_writer(file, &log)?))
            })();
            (entry.id.clone(), r)
        });
        Ok(StageSummary::collect(results, StageKind::Separate).0)
    }

    /// Invasive SDR of the masks in `est_dir` against the simulated images.
    pub fn evaluate(
        &self,
        manifest: &Manifest,
        manifest_dir: &Path,
        est_dir: &Path,
        stft_cfg: StftConfig,
        mode: ExtractionMode,
        reference: usize,
    ) -> Result<EvalReport> {
        let results = self.par_map(&manifest.entries, |_, entry| {
            let r = (|| {
                let audio = self.read_audio(StageKind::Evaluate, &manifest_dir.join(&entry.observation))?;
                let y = stft(&audio, stft_cfg)?;
                let masks = MaskSet::from_tensor(
                    &read_tensor(est_dir.join(format!("{}_masks.tensor", entry.id)))?,
                    MaskStage::Final,
                )?;
                let noise = entry
                    .noise
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{} lists no noise image", entry.id)))?;
                let images = entry
                    .images
                    .iter()
                    .map(|p| stft(&self.read_audio(StageKind::Evaluate, &manifest_dir.join(p))?, stft_cfg))
                    .collect::<Result<Vec<_>>>()?;
                let noise = stft(&self.read_audio(StageKind::Evaluate, &manifest_dir.join(noise))?, stft_cfg)?;
                let truth = SceneStfts::new(images, noise, audio.num_samples())?;
                evaluate_masks(&entry.id, &y, &truth, &masks, mode, reference)
            })();
            (entry.id.clone(), r)
        });
        Ok(EvalReport::from_results(mode, results))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub simulate_train: StageSummary,
    pub simulate_test: StageSummary,
    pub teach: Option<StageSummary>,
    pub train: Option<StageSummary>,
    pub train_log: Option<TrainLog>,
    pub separate: StageSummary,
    pub report: EvalReport,
}

impl PipelineSummary {
    pub fn all_succeeded(&self) -> bool {
        [Some(&self.simulate_train), Some(&self.simulate_test), self.teach.as_ref(), self.train.as_ref(), Some(&self.separate)]
            .into_iter()
            .flatten()
            .all(StageSummary::all_succeeded)
            && self.report.excluded.is_empty()
    }
}

/// The whole chain under `cfg.work_dir`: train corpus, teacher masks,
/// student, test corpus, separation and evaluation.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let ws = Workspace::new(&cfg.work_dir, cfg.workers)?;
    let train_dir = ws.path("train");
    let test_dir = ws.path("test");
    let (train_manifest, simulate_train) = if cfg.mode.needs_student() {
        ws.simulate(&cfg.sim, &train_dir, cfg.train_mixtures, cfg.seed)?
    } else {
        (Manifest::default(), StageSummary::default())
    };
    let (test_manifest, simulate_test) = ws.simulate(&cfg.sim, &test_dir, cfg.test_mixtures, cfg.seed + 1_000_000)?;
    let (teach, train_summary, train_log, net) = if cfg.mode.needs_student() {
        let masks_dir = ws.path("teacher");
        let teach = ws.teach(&train_manifest, &train_dir, &masks_dir, cfg.stft, &cfg.teacher, cfg.dump_pgm)?;
        let (net, log, summary) = ws.train(&train_manifest, &train_dir, &masks_dir, cfg.stft, &cfg.student)?;
        net.save(ws.path("student.tensor"))?;
        (Some(teach), Some(summary), Some(log), Some(net))
    } else {
        (None, None, None, None)
    };
    let out_dir = ws.path("separated");
    let separate = ws.separate(&test_manifest, &test_dir, &out_dir, cfg, net.as_ref())?;
    let report = ws.evaluate(&test_manifest, &test_dir, &out_dir, cfg.stft, cfg.extraction, cfg.reference_channel)?;
    report.write(ws.path("report.json"))?;
    Ok(PipelineSummary {
        simulate_train,
        simulate_test,
        teach,
        train: train_summary,
        train_log,
        separate,
        report,
    })
}
