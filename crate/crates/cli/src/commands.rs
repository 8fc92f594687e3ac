//! One function per command-line verb. Each reads its inputs from a run
//! directory, checks them against the run configuration and writes its
//! outputs next to them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use alad::adapter::{AdapterConfig, AlignmentAdapter};
use alad::alignment::{align_train, AlignmentPhase, AlignmentRunRecord};
use alad::checkpoint::Checkpoint;
use alad::encoders::{attach_lora, derive_pruned_student, encoder_skeleton, mlm_pretrain, Encoder, EncoderConfig, LoraConfig};
use alad::finetune::{
    build_report, evaluate_with, finetune, measure_latencies, speedup, FinetuneMode, FinetuneRecord, ParamBreakdown,
    ReportTable, RunReport, Stack,
};
use alad::gradient_suite::run_gradient_suite;
use alad::numerics::{GradCheck, GradCheckReport, Module, OpKind};
use alad::tasks::{
    corpus_from_text, corpus_to_text, gen_spanqa_corpus, gen_tagging_corpus, gen_unlabelled_corpus, MetricsReport,
    Split, TaskData, TaskHead, TaskKind,
};
use alad::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{EncoderSection, RunConfig, StudentSection, TaskChoice};

/// A run configuration bound to one root seed and its output directory
/// (`<out>/seed-<root>`).
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub seed: u64,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let seed = seed.unwrap_or(config.seeds[0]);
        let dir = out.unwrap_or_else(|| config.out_dir.clone()).join(format!("seed-{seed}"));
        Ok(Self { config, seed, dir })
    }

    fn component_seed(&self, tag: &str) -> u64 {
        RunConfig::component_seed(self.seed, tag)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.dir.join("data").join("corpus.txt")
    }

    pub fn dataset_path(&self, task: TaskChoice) -> PathBuf {
        self.dir.join("data").join(match task {
            TaskChoice::Tagging => "tagging.txt",
            TaskChoice::Spanqa => "spanqa.txt",
        })
    }

    pub fn teacher_base(&self) -> PathBuf {
        self.dir.join("teacher")
    }

    pub fn student_base(&self) -> PathBuf {
        self.dir.join("student")
    }

    /// Phase 1 adapters are task independent; phase 2 adapters belong to a task.
    pub fn adapter_base(&self, phase: u8, window_n: usize, task: TaskChoice) -> PathBuf {
        match phase {
            1 => self.dir.join(format!("adapter-n{window_n}-phase1")),
            _ => self.dir.join(format!("adapter-n{window_n}-phase2-{}", self.config.task_name(task))),
        }
    }

    pub fn run_base(&self, target: &FinetuneTarget) -> PathBuf {
        let task = self.config.task_name(target.task);
        let name = match (target.reference, target.window()) {
            (true, _) => format!("teacher-reference-{task}"),
            (false, Some(n)) => format!("{}-{}-n{n}-{task}", self.config.student.name(), target.mode.name()),
            (false, None) => format!("{}-{}-{task}", self.config.student.name(), target.mode.name()),
        };
        self.dir.join("runs").join(name)
    }
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Dependency(format!("{what} {} not found; run the earlier pipeline step first", path.display())));
    }
    Ok(())
}

fn load_corpus(run: &Run) -> Result<Vec<Vec<u32>>> {
    let path = run.corpus_path();
    require(&path, "corpus")?;
    corpus_from_text(&std::fs::read_to_string(path)?)
}

fn load_task(run: &Run, task: TaskChoice) -> Result<TaskData> {
    let path = run.dataset_path(task);
    require(&path, "dataset")?;
    let data = TaskData::load(&path)?;
    if data_kind(&data) != task.kind() {
        return Err(Error::Data(format!("{} does not hold {task:?} data", path.display())));
    }
    Ok(data)
}

fn data_kind(data: &TaskData) -> TaskKind {
    match data {
        TaskData::Tagging(_) => TaskKind::Tagging,
        TaskData::SpanQa(_) => TaskKind::Span,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSummary {
    pub corpus: usize,
    pub tagging: usize,
    pub spanqa: usize,
}

pub fn cmd_gen_data(run: &Run) -> Result<DataSummary> {
    let data = &run.config.data;
    let corpus = gen_unlabelled_corpus(
        &data.language,
        run.component_seed("corpus"),
        data.corpus_sequences,
        data.corpus_min_len,
        data.corpus_max_len,
    )?;
    let tagging = gen_tagging_corpus(&data.tagging_params(), run.component_seed("tagging-data"))?;
    let spanqa = gen_spanqa_corpus(&data.spanqa_params(), run.component_seed("spanqa-data"))?;
    write_file(&run.corpus_path(), &corpus_to_text(&corpus))?;
    write_file(&run.dataset_path(TaskChoice::Tagging), &tagging.to_text()?)?;
    write_file(&run.dataset_path(TaskChoice::Spanqa), &spanqa.to_text()?)?;
    Ok(DataSummary {
        corpus: corpus.len(),
        tagging: tagging.items.len(),
        spanqa: spanqa.items.len(),
    })
}

/// Loads an encoder checkpoint, refusing one whose architecture differs from
/// `expected`.
pub fn load_encoder(base: &Path, expected: &EncoderSection, who: &str) -> Result<Encoder> {
    let ckpt = Checkpoint::load(base)?;
    if ckpt.manifest.kind != "encoder" {
        return Err(Error::Checkpoint(format!("{} holds a {}, not an encoder", base.display(), ckpt.manifest.kind)));
    }
    let cfg: EncoderConfig = ckpt.config()?;
    if EncoderSection::of(&cfg) != *expected {
        return Err(Error::Config(format!(
            "{who} checkpoint {} has architecture {:?}, run config expects {expected:?}",
            base.display(),
            EncoderSection::of(&cfg)
        )));
    }
    let mut enc = encoder_skeleton(&cfg, None)?;
    ckpt.restore_into("", &mut enc)?;
    enc.freeze();
    Ok(enc)
}

fn save_encoder(enc: &Encoder, base: &Path) -> Result<()> {
    Checkpoint::from_modules("encoder", enc.config(), &[("", enc)])?.save(base)
}

fn loss_log(losses: &[f64]) -> String {
    let mut out = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{}\t{l}", i + 1).expect("string write");
    }
    out
}

pub fn cmd_pretrain_teacher(run: &Run) -> Result<Vec<f64>> {
    let corpus = load_corpus(run)?;
    let mut teacher = Encoder::init(run.config.teacher_config(run.seed))?;
    let mlm = run.config.pretrain.with_seed(run.component_seed("teacher-mlm"));
    let losses = mlm_pretrain(&mut teacher, &corpus, &mlm)?;
    save_encoder(&teacher, &run.teacher_base())?;
    write_file(&with_ext(&run.teacher_base(), "log"), &loss_log(&losses))?;
    Ok(losses)
}

/// Writes the student checkpoint; independent students are pretrained on
/// the corpus first and their losses returned.
pub fn cmd_derive_student(run: &Run) -> Result<Vec<f64>> {
    let teacher = load_encoder(&run.teacher_base(), &run.config.teacher, "teacher")?;
    let (student, losses) = match &run.config.student {
        StudentSection::Pruned { keep_layers, .. } => (derive_pruned_student(&teacher, *keep_layers)?, Vec::new()),
        StudentSection::Independent { .. } => {
            let corpus = load_corpus(run)?;
            let mut s = Encoder::init(run.config.student_config(run.seed))?;
            let mlm = run.config.pretrain.with_seed(run.component_seed("student-mlm"));
            let losses = mlm_pretrain(&mut s, &corpus, &mlm)?;
            write_file(&with_ext(&run.student_base(), "log"), &loss_log(&losses))?;
            (s, losses)
        }
    };
    save_encoder(&student, &run.student_base())?;
    Ok(losses)
}

fn load_pair(run: &Run) -> Result<(Encoder, Encoder)> {
    let teacher = load_encoder(&run.teacher_base(), &run.config.teacher, "teacher")?;
    let student = load_encoder(&run.student_base(), &run.config.student_encoder(), "student")?;
    Ok((teacher, student))
}

fn load_adapter(base: &Path, expected: &AdapterConfig) -> Result<AlignmentAdapter> {
    let ckpt = Checkpoint::load(base)?;
    if ckpt.manifest.kind != "adapter" {
        return Err(Error::Checkpoint(format!("{} holds a {}, not an adapter", base.display(), ckpt.manifest.kind)));
    }
    let cfg: AdapterConfig = ckpt.config()?;
    if cfg != *expected {
        return Err(Error::Config(format!(
            "adapter checkpoint {} has config {cfg:?}, run config expects {expected:?}",
            base.display()
        )));
    }
    let mut adapter = AlignmentAdapter::zeros(cfg)?;
    ckpt.restore_into("", &mut adapter)?;
    Ok(adapter)
}

#[derive(Clone, Debug)]
pub struct AlignArgs {
    pub phase: u8,
    pub window_n: Option<usize>,
    pub task: Option<TaskChoice>,
    pub from_scratch: bool,
}

pub fn cmd_align(run: &Run, args: &AlignArgs) -> Result<AlignmentRunRecord> {
    let n = args.window_n.unwrap_or(run.config.adapter.window_n);
    let task = args.task.unwrap_or(run.config.finetune.task);
    let acfg = run.config.adapter_config(n);
    acfg.validate()?;
    let (teacher, student) = load_pair(run)?;
    let (phase, section, corpus, mut adapter) = match args.phase {
        1 => (
            AlignmentPhase::TaskIndependent,
            &run.config.align_phase1,
            load_corpus(run)?,
            AlignmentAdapter::init(acfg, run.component_seed(&format!("adapter-init-n{n}")))?,
        ),
        2 => {
            let data = load_task(run, task)?;
            let p1 = run.adapter_base(1, n, task);
            let adapter = if args.from_scratch {
                AlignmentAdapter::init(acfg, run.component_seed(&format!("adapter-init-n{n}")))?
            } else {
                if !Checkpoint::exists(&p1) {
                    return Err(Error::Dependency(format!(
                        "phase 2 needs the phase-1 adapter {}; run phase 1 or pass --from-scratch",
                        p1.display()
                    )));
                }
                load_adapter(&p1, &acfg)?
            };
            (AlignmentPhase::TaskSpecific, &run.config.align_phase2, data.inputs(Split::Train), adapter)
        }
        other => return Err(Error::Config(format!("phase must be 1 or 2, got {other}"))),
    };
    let cfg = section.with_seed(phase, run.component_seed(&format!("align-phase{}-n{n}", args.phase)));
    let record = align_train(&mut adapter, &student, &teacher, &corpus, &cfg)?;
    let base = run.adapter_base(args.phase, n, task);
    Checkpoint::from_modules("adapter", adapter.config(), &[("", &adapter)])?.save(&base)?;
    write_file(&with_ext(&base, "log"), &record.to_log())?;
    Ok(record)
}

/// Which stack a fine-tuning, evaluation or report command addresses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinetuneTarget {
    pub mode: FinetuneMode,
    pub window_n: Option<usize>,
    pub task: TaskChoice,
    /// Fine-tune the teacher itself as the reference row.
    pub reference: bool,
}

impl FinetuneTarget {
    pub fn from_run(run: &Run, mode: Option<FinetuneMode>, window_n: Option<usize>, task: Option<TaskChoice>, reference: bool) -> Self {
        let mode = if reference {
            FinetuneMode::BaselineFinetune
        } else {
            mode.unwrap_or(run.config.finetune.mode)
        };
        Self {
            mode,
            window_n: Some(window_n.unwrap_or(run.config.adapter.window_n)),
            task: task.unwrap_or(run.config.finetune.task),
            reference,
        }
    }

    /// The window size, for modes that carry an adapter.
    pub fn window(&self) -> Option<usize> {
        (!self.reference && self.mode.uses_adapter()).then_some(self.window_n).flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StackMeta {
    student: EncoderConfig,
    lora: Option<LoraConfig>,
    adapter: Option<AdapterConfig>,
    task: TaskKind,
    num_classes: Option<usize>,
    mode: FinetuneMode,
}

fn new_head(task: TaskKind, input_dim: usize, data: &TaskData, seed: u64) -> TaskHead {
    match (task, data) {
        (TaskKind::Tagging, TaskData::Tagging(d)) => TaskHead::tagging(input_dim, d.num_classes(), seed),
        _ => TaskHead::span(input_dim, seed),
    }
}

fn reference_stack(teacher: &Encoder, data: &TaskData, seed: u64) -> Result<Stack> {
    Stack::new(teacher.clone(), None, new_head(data_kind(data), teacher.dim(), data, seed))
}

fn build_stack(run: &Run, target: &FinetuneTarget, teacher: &Encoder, data: &TaskData) -> Result<Stack> {
    let head_seed = run.component_seed("head-init");
    if target.reference {
        return reference_stack(teacher, data, head_seed);
    }
    let mut student = load_encoder(&run.student_base(), &run.config.student_encoder(), "student")?;
    if target.mode.uses_lora() {
        student = attach_lora(student, &run.config.lora, run.component_seed("lora-init"))?;
    }
    let adapter = match target.window() {
        Some(n) => {
            let base = run.adapter_base(2, n, target.task);
            if !Checkpoint::exists(&base) {
                return Err(Error::Dependency(format!(
                    "mode {} needs the phase-2 adapter {}; run align --phase 2 first",
                    target.mode,
                    base.display()
                )));
            }
            Some(load_adapter(&base, &run.config.adapter_config(n))?)
        }
        None => None,
    };
    let dim = adapter.as_ref().map_or(student.dim(), |a| a.config().d_l);
    Stack::new(student, adapter, new_head(data_kind(data), dim, data, head_seed))
}

fn save_stack(stack: &Stack, mode: FinetuneMode, base: &Path) -> Result<()> {
    let meta = StackMeta {
        student: stack.student.config().clone(),
        lora: stack.student.lora_config().cloned(),
        adapter: stack.adapter.as_ref().map(|a| a.config().clone()),
        task: stack.head.kind(),
        num_classes: stack.head.num_classes(),
        mode,
    };
    Checkpoint::from_modules("stack", &meta, &[("", stack)])?.save(base)
}

fn load_stack(run: &Run, target: &FinetuneTarget, base: &Path) -> Result<Stack> {
    let ckpt = Checkpoint::load(base)?;
    if ckpt.manifest.kind != "stack" {
        return Err(Error::Checkpoint(format!("{} holds a {}, not a stack", base.display(), ckpt.manifest.kind)));
    }
    let meta: StackMeta = ckpt.config()?;
    let expected = if target.reference {
        run.config.teacher.clone()
    } else {
        run.config.student_encoder()
    };
    if EncoderSection::of(&meta.student) != expected || meta.mode != target.mode {
        return Err(Error::Config(format!(
            "stack checkpoint {} does not match the run config (mode {}, encoder {:?})",
            base.display(),
            meta.mode,
            EncoderSection::of(&meta.student)
        )));
    }
    if let Some(a) = &meta.adapter {
        if Some(a) != target.window().map(|n| run.config.adapter_config(n)).as_ref() {
            return Err(Error::Config(format!("stack checkpoint {} carries adapter {a:?}", base.display())));
        }
    }
    let student = encoder_skeleton(&meta.student, meta.lora.as_ref())?;
    let adapter = meta.adapter.clone().map(AlignmentAdapter::zeros).transpose()?;
    let dim = adapter.as_ref().map_or(student.dim(), |a| a.config().d_l);
    let head = match meta.num_classes {
        Some(k) => TaskHead::tagging(dim, k, 0),
        None => TaskHead::span(dim, 0),
    };
    let mut stack = Stack::new(student, adapter, head)?;
    ckpt.restore_into("", &mut stack)?;
    Ok(stack)
}

fn finetune_log(record: &FinetuneRecord) -> String {
    let mut out = String::from("epoch\ttrain_loss\tdev_metric\n");
    for (i, (l, d)) in record.train_loss.iter().zip(&record.dev_metric).enumerate() {
        writeln!(out, "{}\t{l}\t{d}", i + 1).expect("string write");
    }
    out
}

pub fn cmd_finetune(run: &Run, target: &FinetuneTarget) -> Result<RunReport> {
    let data = load_task(run, target.task)?;
    let teacher = load_encoder(&run.teacher_base(), &run.config.teacher, "teacher")?;
    let stack = build_stack(run, target, &teacher, &data)?;
    let cfg = run
        .config
        .finetune
        .resolve(target.mode, target.task, run.component_seed("finetune"));
    let (trained, record) = finetune(stack, &data, &cfg)?;
    let metrics = evaluate_with(&trained, &data, Split::Test, cfg.null_threshold)?;

    let sequences = data.inputs(Split::Test);
    let reference = reference_stack(&teacher, &data, 0)?;
    let [reference_latency, latency]: [_; 2] = measure_latencies(&[&reference, &trained], &sequences, run.config.latency_repeats)?
        .try_into()
        .expect("one measurement per stack");

    let (model, adapter, head) = trained.breakdown();
    let params = ParamBreakdown {
        model,
        adapter,
        head,
        reference: teacher.param_count(),
    };
    let report = RunReport {
        model: if target.reference { "teacher".into() } else { run.config.student.name().into() },
        mode: (!target.reference).then_some(target.mode),
        window_n: target.window(),
        task: run.config.task_name(target.task),
        seed: run.seed,
        metrics,
        size_percent: params.size_percent()?,
        params,
        latency_seconds: Some(latency.median_seconds),
        speedup: Some(speedup(&reference_latency, &latency)),
        config: serde_json::json!({
            "experiment": run.config.name,
            "finetune": cfg,
            "adapter": trained.adapter.as_ref().map(|a| a.config().clone()),
            "lora": trained.student.lora_config(),
            "best_epoch": record.best_epoch,
        }),
    };
    let base = run.run_base(target);
    save_stack(&trained, target.mode, &base)?;
    write_file(&with_ext(&base, "log"), &finetune_log(&record))?;
    write_file(&with_ext(&base, "report.json"), &report.to_json()?)?;
    Ok(report)
}

/// Re-evaluates a fine-tuned stack on the test split and writes the metrics.
pub fn cmd_eval(run: &Run, target: &FinetuneTarget) -> Result<MetricsReport> {
    let data = load_task(run, target.task)?;
    let base = run.run_base(target);
    require(&with_ext(&base, "json"), "fine-tuned stack")?;
    let stack = load_stack(run, target, &base)?;
    let metrics = evaluate_with(&stack, &data, Split::Test, run.config.finetune.null_threshold)?;
    write_file(&with_ext(&base, "eval.json"), &serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_reports(&path, out)?;
        } else if path.to_string_lossy().ends_with(".report.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Aggregates every `*.report.json` below `dirs` into one table, written to
/// `<out>/report.txt` and `<out>/report.json`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<ReportTable> {
    let mut paths = Vec::new();
    for d in dirs {
        require(d, "run directory")?;
        collect_reports(d, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(Error::Dependency("no run reports found; run finetune first".into()));
    }
    let runs = paths
        .iter()
        .map(|p| RunReport::from_json(&std::fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    let table = build_report(&runs)?;
    write_file(&out.join("report.txt"), &table.render())?;
    write_file(&out.join("report.json"), &table.to_json()?)?;
    Ok(table)
}

pub fn cmd_gradcheck(instances: usize, fault: Option<OpKind>, seed: u64) -> Result<Vec<GradCheckReport>> {
    if instances == 0 {
        return Err(Error::Config("gradcheck needs at least one instance".into()));
    }
    let check = GradCheck {
        fault,
        ..GradCheck::default()
    };
    run_gradient_suite(&check, instances, seed)
}

/// Renders gradient-check reports one per line.
pub fn render_gradcheck(reports: &[GradCheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        writeln!(
            out,
            "{:<42} worst {:>10.3e}  checked {:>6}  unresolved {:>5}  {}",
            r.name,
            r.worst_rel_error,
            r.checked,
            r.unresolved,
            if r.passed { "ok" } else { "FAIL" }
        )
        .expect("string write");
    }
    out
}
