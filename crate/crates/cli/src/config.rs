//! Run configuration: one TOML file per experiment.
//!
//! Component seeds never appear in the file. Every random stream derives
//! from the root seed through [`RunConfig::component_seed`].

use std::path::{Path, PathBuf};

use alad::adapter::AdapterConfig;
use alad::alignment::{AlignmentPhase, AlignmentPhaseConfig, Budget};
use alad::encoders::{EncoderConfig, LoraConfig, MlmConfig};
use alad::finetune::{FinetuneConfig, FinetuneMode, MIN_REPEATS};
use alad::seed::derive_seed;
use alad::tasks::{LanguageParams, SpanQaParams, TagScheme, TaggingParams, TaskKind, MASK_TOKEN};
use alad::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl EncoderSection {
    pub fn with_seed(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            seed,
        }
    }

    pub fn of(cfg: &EncoderConfig) -> Self {
        Self {
            num_layers: cfg.num_layers,
            model_dim: cfg.model_dim,
            num_heads: cfg.num_heads,
            ffn_dim: cfg.ffn_dim,
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub mask_rate: f64,
    pub batch_size: usize,
}

impl PretrainSection {
    pub fn with_seed(&self, seed: u64) -> MlmConfig {
        MlmConfig {
            mask_rate: self.mask_rate,
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            mask_token: MASK_TOKEN,
            seed,
        }
    }
}

/// How the compressed encoder is obtained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StudentSection {
    /// The first `keep_layers` blocks of the teacher.
    Pruned { name: String, keep_layers: usize },
    /// A separately initialised and pretrained encoder.
    Independent {
        name: String,
        num_layers: usize,
        model_dim: usize,
        num_heads: usize,
        ffn_dim: usize,
        vocab_size: usize,
        max_len: usize,
    },
}

impl StudentSection {
    pub fn name(&self) -> &str {
        match self {
            StudentSection::Pruned { name, .. } | StudentSection::Independent { name, .. } => name,
        }
    }

    /// Architecture of the student given the teacher's.
    pub fn encoder(&self, teacher: &EncoderSection) -> EncoderSection {
        match self {
            StudentSection::Pruned { keep_layers, .. } => EncoderSection {
                num_layers: *keep_layers,
                ..teacher.clone()
            },
            StudentSection::Independent {
                num_layers,
                model_dim,
                num_heads,
                ffn_dim,
                vocab_size,
                max_len,
                ..
            } => EncoderSection {
                num_layers: *num_layers,
                model_dim: *model_dim,
                num_heads: *num_heads,
                ffn_dim: *ffn_dim,
                vocab_size: *vocab_size,
                max_len: *max_len,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub learning_rate: f64,
    pub budget: Budget,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub eval_every: usize,
    pub cache: bool,
}

impl PhaseSection {
    fn defaults(phase: AlignmentPhase) -> Self {
        let d = AlignmentPhaseConfig::defaults_for(phase, 0);
        Self {
            learning_rate: d.learning_rate,
            budget: d.budget,
            batch_size: d.batch_size,
            validation_fraction: d.validation_fraction,
            eval_every: d.eval_every,
            cache: true,
        }
    }

    pub fn with_seed(&self, phase: AlignmentPhase, seed: u64) -> AlignmentPhaseConfig {
        AlignmentPhaseConfig {
            phase,
            learning_rate: self.learning_rate,
            budget: self.budget,
            batch_size: self.batch_size,
            seed,
            validation_fraction: self.validation_fraction,
            eval_every: self.eval_every,
            cache: self.cache,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskChoice {
    Tagging,
    Spanqa,
}

impl TaskChoice {
    pub fn kind(self) -> TaskKind {
        match self {
            TaskChoice::Tagging => TaskKind::Tagging,
            TaskChoice::Spanqa => TaskKind::Span,
        }
    }
}

impl std::str::FromStr for TaskChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tagging" => Ok(TaskChoice::Tagging),
            "spanqa" => Ok(TaskChoice::Spanqa),
            other => Err(Error::Config(format!("unknown task {other:?} (expected tagging or spanqa)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: TaskChoice,
    pub mode: FinetuneMode,
    /// Mode default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Task default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub null_threshold: f64,
}

impl FinetuneSection {
    pub fn resolve(&self, mode: FinetuneMode, task: TaskChoice, seed: u64) -> FinetuneConfig {
        let base = FinetuneConfig::new(mode, task.kind(), seed);
        FinetuneConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size,
            null_threshold: self.null_threshold,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggingSection {
    pub scheme: TagScheme,
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanQaSection {
    pub num_items: usize,
    pub min_context: usize,
    pub max_context: usize,
    pub question_len: usize,
    pub answerable_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub language: LanguageParams,
    pub corpus_sequences: usize,
    pub corpus_min_len: usize,
    pub corpus_max_len: usize,
    pub tagging: TaggingSection,
    pub spanqa: SpanQaSection,
}

impl DataSection {
    pub fn tagging_params(&self) -> TaggingParams {
        TaggingParams {
            language: self.language.clone(),
            scheme: self.tagging.scheme.clone(),
            num_sequences: self.tagging.num_sequences,
            min_len: self.tagging.min_len,
            max_len: self.tagging.max_len,
        }
    }

    pub fn spanqa_params(&self) -> SpanQaParams {
        SpanQaParams {
            language: self.language.clone(),
            num_items: self.spanqa.num_items,
            min_context: self.spanqa.min_context,
            max_context: self.spanqa.max_context,
            question_len: self.spanqa.question_len,
            answerable_fraction: self.spanqa.answerable_fraction,
        }
    }

    /// Longest model input any generated dataset can produce.
    pub fn longest_input(&self) -> usize {
        let span = self.spanqa.question_len + 2 + self.spanqa.max_context;
        self.corpus_max_len.max(self.tagging.max_len).max(span)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Root seeds of the experiment; the first one is used unless a command
    /// names another.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub teacher: EncoderSection,
    pub pretrain: PretrainSection,
    pub student: StudentSection,
    pub adapter: AdapterConfig,
    pub lora: LoraConfig,
    pub align_phase1: PhaseSection,
    pub align_phase2: PhaseSection,
    pub finetune: FinetuneSection,
    pub latency_repeats: usize,
}

/// Student presets of the toy setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentPreset {
    /// Teacher pruned to its first two layers.
    A,
    /// Two layers at width 32.
    B,
    /// One layer at width 16.
    C,
}

impl std::str::FromStr for StudentPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(StudentPreset::A),
            "b" => Ok(StudentPreset::B),
            "c" => Ok(StudentPreset::C),
            other => Err(Error::Config(format!("unknown student preset {other:?} (expected a, b or c)"))),
        }
    }
}

const VOCAB: usize = 128;
const MAX_LEN: usize = 32;

impl RunConfig {
    pub fn preset(student: StudentPreset) -> Self {
        let teacher = EncoderSection::of(&EncoderConfig::teacher(VOCAB, MAX_LEN, 0));
        let independent = |name: &str, cfg: EncoderConfig| StudentSection::Independent {
            name: name.into(),
            num_layers: cfg.num_layers,
            model_dim: cfg.model_dim,
            num_heads: cfg.num_heads,
            ffn_dim: cfg.ffn_dim,
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_len,
        };
        let student = match student {
            StudentPreset::A => StudentSection::Pruned {
                name: "student-a".into(),
                keep_layers: 2,
            },
            StudentPreset::B => independent("student-b", EncoderConfig::mini(VOCAB, MAX_LEN, 0)),
            StudentPreset::C => independent("student-c", EncoderConfig::tiny(VOCAB, MAX_LEN, 0)),
        };
        let d_c = student.encoder(&teacher).model_dim;
        let mlm = MlmConfig::default();
        let tagging = TaggingParams::default();
        let span = SpanQaParams::default();
        Self {
            name: format!("toy-{}", student.name()),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs").join(student.name()),
            data: DataSection {
                language: LanguageParams::default(),
                corpus_sequences: 2000,
                corpus_min_len: 8,
                corpus_max_len: 16,
                tagging: TaggingSection {
                    scheme: tagging.scheme,
                    num_sequences: tagging.num_sequences,
                    min_len: tagging.min_len,
                    max_len: tagging.max_len,
                },
                spanqa: SpanQaSection {
                    num_items: span.num_items,
                    min_context: span.min_context,
                    max_context: span.max_context,
                    question_len: span.question_len,
                    answerable_fraction: span.answerable_fraction,
                },
            },
            pretrain: PretrainSection {
                steps: mlm.steps,
                learning_rate: mlm.learning_rate,
                mask_rate: mlm.mask_rate,
                batch_size: mlm.batch_size,
            },
            adapter: AdapterConfig::new(3, d_c, teacher.model_dim),
            teacher,
            student,
            lora: LoraConfig::default(),
            align_phase1: PhaseSection::defaults(AlignmentPhase::TaskIndependent),
            align_phase2: PhaseSection::defaults(AlignmentPhase::TaskSpecific),
            finetune: FinetuneSection {
                task: TaskChoice::Tagging,
                mode: FinetuneMode::FrozenAdapter,
                learning_rate: None,
                epochs: None,
                batch_size: 1,
                null_threshold: 0.0,
            },
            latency_repeats: 9,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn student_encoder(&self) -> EncoderSection {
        self.student.encoder(&self.teacher)
    }

    /// Cross-reference checks; every failure is a config error.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return fail("seeds must list at least one root seed".into());
        }
        let student = self.student_encoder();
        for (who, enc) in [("teacher", &self.teacher), ("student", &student)] {
            enc.with_seed(0).validate()?;
            if enc.vocab_size != self.data.language.vocab_size {
                return fail(format!(
                    "{who} vocabulary {} differs from the language's {}",
                    enc.vocab_size, self.data.language.vocab_size
                ));
            }
            if enc.max_len < self.data.longest_input() {
                return fail(format!(
                    "{who} max_len {} is shorter than the longest input {}",
                    enc.max_len,
                    self.data.longest_input()
                ));
            }
        }
        if let StudentSection::Pruned { keep_layers, .. } = self.student {
            if keep_layers == 0 || keep_layers >= self.teacher.num_layers {
                return fail(format!(
                    "keep_layers {keep_layers} must lie in [1, {})",
                    self.teacher.num_layers
                ));
            }
        }
        self.adapter.validate()?;
        if self.adapter.d_c != student.model_dim || self.adapter.d_l != self.teacher.model_dim {
            return fail(format!(
                "adapter maps {} -> {}, but student width is {} and teacher width {}",
                self.adapter.d_c, self.adapter.d_l, student.model_dim, self.teacher.model_dim
            ));
        }
        self.lora.validate(student.model_dim)?;
        self.align_phase1.with_seed(AlignmentPhase::TaskIndependent, 0).validate()?;
        self.align_phase2.with_seed(AlignmentPhase::TaskSpecific, 0).validate()?;
        if self.finetune.batch_size == 0 || self.finetune.learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return fail("fine-tuning needs a positive batch size and learning rate".into());
        }
        if self.latency_repeats < MIN_REPEATS {
            return fail(format!("latency_repeats must be at least {MIN_REPEATS}"));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.learning_rate > 0.0) {
            return fail("pretraining needs a positive batch size and learning rate".into());
        }
        Ok(())
    }

    /// `root XOR u64_le(sha256(tag)[0..8])`.
    pub fn component_seed(root: u64, tag: &str) -> u64 {
        derive_seed(root, tag)
    }

    pub fn teacher_config(&self, root: u64) -> EncoderConfig {
        self.teacher.with_seed(Self::component_seed(root, "teacher-init"))
    }

    pub fn student_config(&self, root: u64) -> EncoderConfig {
        self.student_encoder().with_seed(Self::component_seed(root, "student-init"))
    }

    pub fn adapter_config(&self, window_n: usize) -> AdapterConfig {
        AdapterConfig {
            window_n,
            ..self.adapter.clone()
        }
    }

    pub fn task_name(&self, task: TaskChoice) -> String {
        match (task, &self.data.tagging.scheme) {
            (TaskChoice::Spanqa, _) => "spanqa".into(),
            (TaskChoice::Tagging, TagScheme::Pos) => "pos".into(),
            (TaskChoice::Tagging, TagScheme::Ner { .. }) => "ner".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(StudentPreset::A)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [StudentPreset::A, StudentPreset::B, StudentPreset::C] {
            let cfg = RunConfig::preset(p);
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_survive_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.finetune.learning_rate = Some(3e-4);
        cfg.finetune.epochs = Some(2);
        cfg.align_phase1.budget = Budget::Epochs(2);
        cfg.data.tagging.scheme = TagScheme::Ner { entity_tags: 3 };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.task_name(TaskChoice::Tagging), "ner");
    }

    #[test]
    fn mismatched_adapter_rejected() {
        let mut cfg = RunConfig::default();
        cfg.adapter.d_c = 48;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::preset(StudentPreset::C);
        cfg.teacher.max_len = 12;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = RunConfig::default().to_toml().unwrap() + "\nbogus = 1\n";
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }
}
