//! Experiment orchestration: builds the corpus, trains or loads every
//! component a setting list needs, produces gestures per setting, computes
//! FGD / BC / Diversity in the matching evaluation space, and emits
//! CSV/Markdown reports whose rows are a pure function of the config and
//! master seed.

mod report;

pub use report::{parse_csv, render_csv, render_markdown, write_report_files};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{self, DiffusionError, GeneratorConfig, TrainedGenerator};
use crate::lifter::{train_lifter, LifterConfig, LifterError, TrainedLifter};
use crate::metrics::{
    beat_consistency, diversity_from_latents, extract_kinematic_beats, fgd_variant, BCParams,
    BeatSet, EncoderConfig, FgdVariant, GestureStats, MetricsError, PoseEncoder,
};
use crate::seeds::{self, domain};
use crate::skeleton::{project_2d, PoseSequence, SkeletonError, SkeletonTopology};
use crate::synth::{self, GestureDataset, SpeechTrack, SynthConfig, SynthError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    ConfigInvalid(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("setting `{setting}` failed: {source}")]
    Setting {
        setting: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Lifter(#[from] LifterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Evaluation space of a setting, mirroring the two table blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    ThreeD,
    TwoD,
}

impl Space {
    pub fn name(&self) -> &'static str {
        match self {
            Space::ThreeD => "3d",
            Space::TwoD => "2d",
        }
    }
}

/// One comparative setting. Each maps to exactly one evaluation space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Held-out ground-truth 3D gestures.
    Gt3d,
    /// Held-out ground truth projected to 2D.
    Gt2d,
    /// Conditional generator trained on 3D data.
    Gen3d,
    /// Conditional generator trained on 2D data.
    Gen2d,
    /// 2D generator outputs lifted to 3D (DiffGesture 2D + VP3D).
    Gen2dLift,
    /// 3D generator outputs narrowed to 2D (DiffGesture 3D->2D).
    Gen3dTo2d,
    UncondGen3d,
    UncondGen2d,
    UncondGen2dLift,
    UncondGen3dTo2d,
}

impl Setting {
    pub const ALL: [Setting; 10] = [
        Setting::Gt3d,
        Setting::Gen3d,
        Setting::Gen2dLift,
        Setting::UncondGen3d,
        Setting::UncondGen2dLift,
        Setting::Gt2d,
        Setting::Gen3dTo2d,
        Setting::Gen2d,
        Setting::UncondGen3dTo2d,
        Setting::UncondGen2d,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Setting::Gt3d => "gt3d",
            Setting::Gt2d => "gt2d",
            Setting::Gen3d => "gen3d",
            Setting::Gen2d => "gen2d",
            Setting::Gen2dLift => "gen2d_lift",
            Setting::Gen3dTo2d => "gen3d_to_2d",
            Setting::UncondGen3d => "uncond_gen3d",
            Setting::UncondGen2d => "uncond_gen2d",
            Setting::UncondGen2dLift => "uncond_gen2d_lift",
            Setting::UncondGen3dTo2d => "uncond_gen3d_to_2d",
        }
    }

    pub fn parse(s: &str) -> Option<Setting> {
        Setting::ALL.iter().copied().find(|x| x.name() == s)
    }

    pub fn space(&self) -> Space {
        match self {
            Setting::Gt3d
            | Setting::Gen3d
            | Setting::Gen2dLift
            | Setting::UncondGen3d
            | Setting::UncondGen2dLift => Space::ThreeD,
            _ => Space::TwoD,
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            Setting::Gt3d => "Ground Truth 3D",
            Setting::Gt2d => "Ground Truth 2D",
            Setting::Gen3d => "DiffGesture 3D",
            Setting::Gen2d => "DiffGesture 2D",
            Setting::Gen2dLift => "DiffGesture 2D + VP3D",
            Setting::Gen3dTo2d => "DiffGesture 3D->2D",
            Setting::UncondGen3d => "Uncond. DiffGesture 3D",
            Setting::UncondGen2d => "Uncond. DiffGesture 2D",
            Setting::UncondGen2dLift => "Uncond. DiffGesture 2D + VP3D",
            Setting::UncondGen3dTo2d => "Uncond. DiffGesture 3D->2D",
        }
    }

    fn index(&self) -> u64 {
        Setting::ALL.iter().position(|x| x == self).expect("setting in ALL") as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub bc_sigma: f64,
    pub beat_threshold: f64,
    pub diversity_n: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { bc_sigma: 0.1, beat_threshold: 0.05, diversity_n: 64 }
    }
}

/// Optional pre-trained component checkpoints. A listed path must exist;
/// unlisted components are trained in place.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPaths {
    pub generator_3d: Option<PathBuf>,
    pub generator_2d: Option<PathBuf>,
    pub uncond_generator_3d: Option<PathBuf>,
    pub uncond_generator_2d: Option<PathBuf>,
    pub lifter: Option<PathBuf>,
    pub encoder_3d: Option<PathBuf>,
    pub encoder_2d: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: SynthConfig,
    pub settings: Vec<Setting>,
    pub generator: GeneratorConfig,
    pub lifter: LifterConfig,
    pub encoder: EncoderConfig,
    pub metric: MetricConfig,
    /// Generated sequences per setting.
    pub eval_samples: usize,
    pub train_fraction: f64,
    pub master_seed: u64,
    pub fgd_variant: FgdVariant,
    /// Evaluate independent settings on worker threads. Per-setting seed
    /// substreams keep results identical to a sequential run.
    pub parallel: bool,
    pub checkpoints: CheckpointPaths,
    /// Output directory; when unset, nothing is written to disk.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: SynthConfig {
                ambiguity_mode: crate::synth::AmbiguityMode::Mirror,
                ..SynthConfig::default()
            },
            settings: Setting::ALL.to_vec(),
            generator: GeneratorConfig::default(),
            lifter: LifterConfig::default(),
            encoder: EncoderConfig::default(),
            metric: MetricConfig::default(),
            eval_samples: 512,
            train_fraction: 0.8,
            master_seed: 2024,
            fgd_variant: FgdVariant::Standard,
            parallel: false,
            checkpoints: CheckpointPaths::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.corpus.validate()?;
        if self.settings.is_empty() {
            return Err(HarnessError::ConfigInvalid("settings list is empty".into()));
        }
        let mut seen = Vec::new();
        for s in &self.settings {
            if seen.contains(s) {
                return Err(HarnessError::ConfigInvalid(format!(
                    "setting `{}` listed twice",
                    s.name()
                )));
            }
            seen.push(*s);
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HarnessError::ConfigInvalid(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        if self.metric.diversity_n == 0 {
            return Err(HarnessError::ConfigInvalid("diversity_n must be >= 1".into()));
        }
        if self.eval_samples < 2 * self.metric.diversity_n {
            return Err(HarnessError::ConfigInvalid(format!(
                "eval_samples {} < 2 * diversity_n {}",
                self.eval_samples, self.metric.diversity_n
            )));
        }
        let test_len = self.corpus.num_sequences
            - ((self.train_fraction * self.corpus.num_sequences as f64).round() as usize)
                .clamp(1, self.corpus.num_sequences.saturating_sub(1).max(1));
        let needs_gt = self
            .settings
            .iter()
            .any(|s| matches!(s, Setting::Gt3d | Setting::Gt2d));
        if needs_gt && test_len < 2 * self.metric.diversity_n {
            return Err(HarnessError::ConfigInvalid(format!(
                "test split of {} sequences cannot support diversity_n {} on ground-truth rows",
                test_len, self.metric.diversity_n
            )));
        }
        self.generator.validate()?;
        self.lifter.validate(self.corpus.seq_len)?;
        BCParams { sigma: self.metric.bc_sigma, threshold: self.metric.beat_threshold }
            .validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// One CSV row of a [`MetricReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub setting: Setting,
    pub space: Space,
    pub fgd: f64,
    /// Mean per-sequence beat consistency; absent when no evaluated
    /// sequence had kinematic beats.
    pub bc: Option<f64>,
    pub diversity: f64,
    /// Held-out lifter MPJPE, for settings that lift.
    pub mpjpe: Option<f64>,
    pub n_diversity: usize,
    pub bc_sigma: f64,
    pub beat_threshold: f64,
    pub encoder_sha: String,
    pub seed: u64,
}

/// Per-setting auxiliary numbers that do not fit the CSV schema.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SettingAux {
    /// BC pooled over all audio beats of all sequences (the alternative
    /// reading of the per-sequence average).
    pub bc_pooled: Option<f64>,
    pub bc_sequences: usize,
    /// Sequences skipped because they produced no kinematic beats.
    pub bc_degenerate_sequences: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub master_seed: u64,
    pub config_hash: String,
    pub crate_version: String,
    pub wall_seconds: f64,
    pub component_seeds: BTreeMap<String, u64>,
    pub checkpoint_sha: BTreeMap<String, String>,
    pub setting_aux: BTreeMap<String, SettingAux>,
    pub lifter_validation_mpjpe: Option<f64>,
    pub eval_samples: usize,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub metadata: RunMetadata,
}

/// Trained components shared by the settings of one run.
struct Components {
    gen3d: Option<TrainedGenerator>,
    gen2d: Option<TrainedGenerator>,
    uncond3d: Option<TrainedGenerator>,
    uncond2d: Option<TrainedGenerator>,
    lifter: Option<TrainedLifter>,
    encoder3d: Option<PoseEncoder>,
    encoder2d: Option<PoseEncoder>,
    ref_stats_3d: Option<GestureStats>,
    ref_stats_2d: Option<GestureStats>,
    sha3d: String,
    sha2d: String,
}

fn wants(settings: &[Setting], list: &[Setting]) -> bool {
    settings.iter().any(|s| list.contains(s))
}

fn sha_of(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_or_train_generator(
    path: Option<&PathBuf>,
    train_data: &GestureDataset,
    config: &GeneratorConfig,
) -> Result<TrainedGenerator, HarnessError> {
    match path {
        Some(base) => {
            if !base.with_extension("ckpt").exists() {
                return Err(HarnessError::MissingCheckpoint(base.clone()));
            }
            let gen = TrainedGenerator::load(base)?;
            if gen.bone_count != train_data.bone_count || gen.seq_len != train_data.seq_len {
                return Err(HarnessError::ConfigInvalid(format!(
                    "checkpoint {base:?} was trained for {}x{} sequences, corpus is {}x{}",
                    gen.seq_len, gen.bone_count, train_data.seq_len, train_data.bone_count
                )));
            }
            Ok(gen)
        }
        None => Ok(diffusion::train(train_data, config)?),
    }
}

/// Runs every requested setting end to end and assembles the report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricReport, HarnessError> {
    let started = Instant::now();
    config.validate()?;
    let topo = SkeletonTopology::default_upper_body();
    let master = config.master_seed;
    let mut component_seeds = BTreeMap::new();

    let corpus_seed = seeds::derive(master, domain::CORPUS, 0);
    component_seeds.insert("corpus".to_string(), corpus_seed);
    let corpus = synth::generate(&config.corpus, &topo, corpus_seed)?;
    let split_seed = seeds::derive(master, domain::SPLIT, 0);
    component_seeds.insert("split".to_string(), split_seed);
    let (train3d, test3d) = synth::split(&corpus, config.train_fraction, split_seed)?;
    let train2d = train3d.project_2d()?;
    let test2d = test3d.project_2d()?;

    let settings = &config.settings;
    let mut checkpoint_sha = BTreeMap::new();

    let mut components = Components {
        gen3d: None,
        gen2d: None,
        uncond3d: None,
        uncond2d: None,
        lifter: None,
        encoder3d: None,
        encoder2d: None,
        ref_stats_3d: None,
        ref_stats_2d: None,
        sha3d: String::new(),
        sha2d: String::new(),
    };

    if wants(settings, &[Setting::Gen3d, Setting::Gen3dTo2d]) {
        let seed = seeds::derive(master, domain::GEN_3D, 0);
        component_seeds.insert("generator_3d".to_string(), seed);
        let cfg = GeneratorConfig { dims: 3, seed, ..config.generator.clone() };
        let gen = load_or_train_generator(config.checkpoints.generator_3d.as_ref(), &train3d, &cfg)?;
        checkpoint_sha.insert("generator_3d".to_string(), sha_of(&gen.params_bytes()?));
        components.gen3d = Some(gen);
    }
    if wants(settings, &[Setting::Gen2d, Setting::Gen2dLift]) {
        let seed = seeds::derive(master, domain::GEN_2D, 0);
        component_seeds.insert("generator_2d".to_string(), seed);
        let cfg = GeneratorConfig { dims: 2, seed, ..config.generator.clone() };
        let gen = load_or_train_generator(config.checkpoints.generator_2d.as_ref(), &train2d, &cfg)?;
        checkpoint_sha.insert("generator_2d".to_string(), sha_of(&gen.params_bytes()?));
        components.gen2d = Some(gen);
    }
    if wants(settings, &[Setting::UncondGen3d, Setting::UncondGen3dTo2d]) {
        let seed = seeds::derive(master, domain::UNCOND_3D, 0);
        component_seeds.insert("uncond_generator_3d".to_string(), seed);
        let cfg = GeneratorConfig { dims: 3, p_uncond: 1.0, seed, ..config.generator.clone() };
        let gen = load_or_train_generator(
            config.checkpoints.uncond_generator_3d.as_ref(),
            &train3d,
            &cfg,
        )?;
        checkpoint_sha.insert("uncond_generator_3d".to_string(), sha_of(&gen.params_bytes()?));
        components.uncond3d = Some(gen);
    }
    if wants(settings, &[Setting::UncondGen2d, Setting::UncondGen2dLift]) {
        let seed = seeds::derive(master, domain::UNCOND_2D, 0);
        component_seeds.insert("uncond_generator_2d".to_string(), seed);
        let cfg = GeneratorConfig { dims: 2, p_uncond: 1.0, seed, ..config.generator.clone() };
        let gen = load_or_train_generator(
            config.checkpoints.uncond_generator_2d.as_ref(),
            &train2d,
            &cfg,
        )?;
        checkpoint_sha.insert("uncond_generator_2d".to_string(), sha_of(&gen.params_bytes()?));
        components.uncond2d = Some(gen);
    }
    if wants(settings, &[Setting::Gen2dLift, Setting::UncondGen2dLift]) {
        let lifter = match &config.checkpoints.lifter {
            Some(base) => {
                if !base.with_extension("ckpt").exists() {
                    return Err(HarnessError::MissingCheckpoint(base.clone()));
                }
                TrainedLifter::load(base)?
            }
            None => {
                let seed = seeds::derive(master, domain::LIFTER, 0);
                component_seeds.insert("lifter".to_string(), seed);
                let cfg = LifterConfig { seed, ..config.lifter.clone() };
                train_lifter(&train3d, &cfg)?
            }
        };
        checkpoint_sha.insert("lifter".to_string(), sha_of(&lifter.params_bytes()?));
        components.lifter = Some(lifter);
    }

    let needs_3d_space = settings.iter().any(|s| s.space() == Space::ThreeD);
    let needs_2d_space = settings.iter().any(|s| s.space() == Space::TwoD);
    if needs_3d_space {
        let encoder = match &config.checkpoints.encoder_3d {
            Some(base) => {
                if !base.with_extension("ckpt").exists() {
                    return Err(HarnessError::MissingCheckpoint(base.clone()));
                }
                PoseEncoder::load(base)?
            }
            None => {
                let seed = seeds::derive(master, domain::ENCODER_3D, 0);
                component_seeds.insert("encoder_3d".to_string(), seed);
                crate::metrics::train_encoder_with(&train3d, &config.encoder, seed)?
            }
        };
        components.sha3d = encoder.checksum()?;
        checkpoint_sha.insert("encoder_3d".to_string(), components.sha3d.clone());
        let gt: Vec<PoseSequence> = test3d.poses().cloned().collect();
        components.ref_stats_3d = Some(crate::metrics::gesture_stats(&encoder, &gt)?);
        components.encoder3d = Some(encoder);
    }
    if needs_2d_space {
        let encoder = match &config.checkpoints.encoder_2d {
            Some(base) => {
                if !base.with_extension("ckpt").exists() {
                    return Err(HarnessError::MissingCheckpoint(base.clone()));
                }
                PoseEncoder::load(base)?
            }
            None => {
                let seed = seeds::derive(master, domain::ENCODER_2D, 0);
                component_seeds.insert("encoder_2d".to_string(), seed);
                crate::metrics::train_encoder_with(&train2d, &config.encoder, seed)?
            }
        };
        components.sha2d = encoder.checksum()?;
        checkpoint_sha.insert("encoder_2d".to_string(), components.sha2d.clone());
        let gt: Vec<PoseSequence> = test2d.poses().cloned().collect();
        components.ref_stats_2d = Some(crate::metrics::gesture_stats(&encoder, &gt)?);
        components.encoder2d = Some(encoder);
    }

    // Evaluate settings in canonical order. Each setting derives its seeds
    // from (master, setting index) only, so parallel evaluation cannot
    // change results.
    let ordered: Vec<Setting> = Setting::ALL
        .iter()
        .copied()
        .filter(|s| settings.contains(s))
        .collect();

    let eval_one = |setting: Setting| -> Result<(MetricRow, SettingAux), HarnessError> {
        evaluate_setting(setting, config, &components, &test3d, &test2d).map_err(|e| {
            HarnessError::Setting { setting: setting.name(), source: Box::new(e) }
        })
    };

    let results: Vec<Result<(MetricRow, SettingAux), HarnessError>> = if config.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ordered
                .iter()
                .map(|&s| scope.spawn(move || eval_one(s)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("setting evaluation thread panicked"))
                .collect()
        })
    } else {
        ordered.iter().map(|&s| eval_one(s)).collect()
    };

    let mut rows = Vec::with_capacity(results.len());
    let mut setting_aux = BTreeMap::new();
    for result in results {
        let (row, aux) = result?;
        setting_aux.insert(row.setting.name().to_string(), aux);
        rows.push(row);
    }

    let metadata = RunMetadata {
        master_seed: master,
        config_hash: config.config_hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_seconds: started.elapsed().as_secs_f64(),
        component_seeds,
        checkpoint_sha,
        setting_aux,
        lifter_validation_mpjpe: components.lifter.as_ref().map(|l| l.validation_mpjpe),
        eval_samples: config.eval_samples,
    };
    let report = MetricReport { rows, metadata };

    if let Some(dir) = &config.out_dir {
        write_report_files(&report, config, dir)?;
        save_checkpoints(&components, dir)?;
    }
    Ok(report)
}

fn save_checkpoints(components: &Components, dir: &Path) -> Result<(), HarnessError> {
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    if let Some(g) = &components.gen3d {
        g.save(&ckpt_dir.join("generator_3d"))?;
    }
    if let Some(g) = &components.gen2d {
        g.save(&ckpt_dir.join("generator_2d"))?;
    }
    if let Some(g) = &components.uncond3d {
        g.save(&ckpt_dir.join("uncond_generator_3d"))?;
    }
    if let Some(g) = &components.uncond2d {
        g.save(&ckpt_dir.join("uncond_generator_2d"))?;
    }
    if let Some(l) = &components.lifter {
        l.save(&ckpt_dir.join("lifter"))?;
    }
    if let Some(e) = &components.encoder3d {
        e.save(&ckpt_dir.join("encoder_3d"))?;
    }
    if let Some(e) = &components.encoder2d {
        e.save(&ckpt_dir.join("encoder_2d"))?;
    }
    Ok(())
}

/// Generated or ground-truth sequences paired with the speech track whose
/// beats they are scored against.
struct EvalSet {
    poses: Vec<PoseSequence>,
    speech_index: Vec<usize>,
}

fn generate_eval_set(
    generator: &TrainedGenerator,
    test_speech: &[&SpeechTrack],
    count: usize,
    setting_seed: u64,
) -> Result<EvalSet, HarnessError> {
    let mut poses = Vec::with_capacity(count);
    let mut speech_index = Vec::with_capacity(count);
    for i in 0..count {
        let s = i % test_speech.len();
        let sample_seed = seeds::derive(setting_seed, domain::SAMPLE, i as u64);
        let mut seqs = generator.generate(test_speech[s], 1, sample_seed)?;
        poses.push(seqs.pop().expect("count 1 yields one sequence"));
        speech_index.push(s);
    }
    Ok(EvalSet { poses, speech_index })
}

fn evaluate_setting(
    setting: Setting,
    config: &ExperimentConfig,
    components: &Components,
    test3d: &GestureDataset,
    test2d: &GestureDataset,
) -> Result<(MetricRow, SettingAux), HarnessError> {
    let setting_seed = seeds::derive(config.master_seed, domain::SETTING, setting.index());
    let test_speech: Vec<&SpeechTrack> = test3d.speech().collect();

    let need = |gen: &Option<TrainedGenerator>, name: &str| -> Result<TrainedGenerator, HarnessError> {
        gen.clone().ok_or_else(|| HarnessError::ConfigInvalid(format!("{name} was not trained")))
    };

    let eval = match setting {
        Setting::Gt3d => EvalSet {
            poses: test3d.poses().cloned().collect(),
            speech_index: (0..test3d.len()).collect(),
        },
        Setting::Gt2d => EvalSet {
            poses: test2d.poses().cloned().collect(),
            speech_index: (0..test2d.len()).collect(),
        },
        Setting::Gen3d => generate_eval_set(
            &need(&components.gen3d, "generator_3d")?,
            &test_speech,
            config.eval_samples,
            setting_seed,
        )?,
        Setting::Gen2d => generate_eval_set(
            &need(&components.gen2d, "generator_2d")?,
            &test_speech,
            config.eval_samples,
            setting_seed,
        )?,
        Setting::UncondGen3d => generate_eval_set(
            &need(&components.uncond3d, "uncond_generator_3d")?,
            &test_speech,
            config.eval_samples,
            setting_seed,
        )?,
        Setting::UncondGen2d => generate_eval_set(
            &need(&components.uncond2d, "uncond_generator_2d")?,
            &test_speech,
            config.eval_samples,
            setting_seed,
        )?,
        Setting::Gen2dLift | Setting::UncondGen2dLift => {
            let gen = if setting == Setting::Gen2dLift {
                need(&components.gen2d, "generator_2d")?
            } else {
                need(&components.uncond2d, "uncond_generator_2d")?
            };
            let lifter = components
                .lifter
                .as_ref()
                .ok_or_else(|| HarnessError::ConfigInvalid("lifter was not trained".into()))?;
            let raw = generate_eval_set(&gen, &test_speech, config.eval_samples, setting_seed)?;
            let poses = raw
                .poses
                .iter()
                .map(|p| lifter.lift(p))
                .collect::<Result<Vec<_>, _>>()?;
            EvalSet { poses, speech_index: raw.speech_index }
        }
        Setting::Gen3dTo2d | Setting::UncondGen3dTo2d => {
            let gen = if setting == Setting::Gen3dTo2d {
                need(&components.gen3d, "generator_3d")?
            } else {
                need(&components.uncond3d, "uncond_generator_3d")?
            };
            let raw = generate_eval_set(&gen, &test_speech, config.eval_samples, setting_seed)?;
            let poses = raw
                .poses
                .iter()
                .map(project_2d)
                .collect::<Result<Vec<_>, _>>()?;
            EvalSet { poses, speech_index: raw.speech_index }
        }
    };

    let (encoder, ref_stats, encoder_sha) = match setting.space() {
        Space::ThreeD => (
            components.encoder3d.as_ref().expect("3d encoder trained"),
            components.ref_stats_3d.as_ref().expect("3d reference stats"),
            components.sha3d.clone(),
        ),
        Space::TwoD => (
            components.encoder2d.as_ref().expect("2d encoder trained"),
            components.ref_stats_2d.as_ref().expect("2d reference stats"),
            components.sha2d.clone(),
        ),
    };

    let latents = encoder.encode_set(&eval.poses)?;
    let stats = GestureStats::from_latents(&latents)?;
    let fgd_value = fgd_variant(ref_stats, &stats, config.fgd_variant)?;
    let diversity_seed = seeds::derive(setting_seed, domain::DIVERSITY, 0);
    let diversity = diversity_from_latents(&latents, config.metric.diversity_n, diversity_seed)?;

    // Beat consistency: per-sequence mean over audio beats, then mean over
    // sequences; sequences without kinematic beats are counted and skipped.
    let bc_params =
        BCParams { sigma: config.metric.bc_sigma, threshold: config.metric.beat_threshold };
    let mut per_sequence = Vec::new();
    let mut pooled_sum = 0.0;
    let mut pooled_beats = 0usize;
    let mut degenerate = 0usize;
    for (pose, &s) in eval.poses.iter().zip(eval.speech_index.iter()) {
        let audio = BeatSet::new(test_speech[s].beat_times().to_vec())?;
        if audio.is_empty() {
            continue;
        }
        let kinematic = extract_kinematic_beats(pose, &bc_params)?;
        if kinematic.is_empty() {
            degenerate += 1;
            continue;
        }
        let bc = beat_consistency(&audio, &kinematic, bc_params.sigma)?;
        per_sequence.push(bc);
        pooled_sum += bc * audio.len() as f64;
        pooled_beats += audio.len();
    }
    let bc = if per_sequence.is_empty() {
        None
    } else {
        Some(per_sequence.iter().sum::<f64>() / per_sequence.len() as f64)
    };
    let bc_pooled = (pooled_beats > 0).then(|| pooled_sum / pooled_beats as f64);

    let mpjpe = match setting {
        Setting::Gen2dLift | Setting::UncondGen2dLift => {
            components.lifter.as_ref().map(|l| l.validation_mpjpe)
        }
        _ => None,
    };

    let row = MetricRow {
        setting,
        space: setting.space(),
        fgd: fgd_value,
        bc,
        diversity,
        mpjpe,
        n_diversity: config.metric.diversity_n,
        bc_sigma: config.metric.bc_sigma,
        beat_threshold: config.metric.beat_threshold,
        encoder_sha,
        seed: setting_seed,
    };
    let aux = SettingAux {
        bc_pooled,
        bc_sequences: per_sequence.len(),
        bc_degenerate_sequences: degenerate,
    };
    Ok((row, aux))
}
