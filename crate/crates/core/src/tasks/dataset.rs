//! Dataset types and their line-delimited text format.
//!
//! Tagging files:
//!
//! ```text
//! #alad-tagging <meta as one-line JSON>
//! <split>\t<token ids, space separated>\t<label ids, space separated>
//! ```
//!
//! Span-QA files:
//!
//! ```text
//! #alad-spanqa <meta as one-line JSON>
//! <split>\t<question ids>\t<context ids>\t<start> <end>   (or "-" for no answer)
//! ```
//!
//! `<split>` is one of `train`, `dev`, `test`. Answer spans are inclusive
//! context positions.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::generate::{SpanQaParams, TaggingParams};
use crate::error::{bail, Error, Result};

const TAGGING_MAGIC: &str = "#alad-tagging ";
const SPANQA_MAGIC: &str = "#alad-spanqa ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggedSequence {
    pub ids: Vec<u32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggingMeta {
    pub class_names: Vec<String>,
    pub outside_class: Option<usize>,
    pub params: TaggingParams,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggingDataset {
    pub meta: TaggingMeta,
    pub items: Vec<TaggedSequence>,
}

impl TaggingDataset {
    pub fn num_classes(&self) -> usize {
        self.meta.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TaggedSequence> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "{TAGGING_MAGIC}{}", serde_json::to_string(&self.meta)?).expect("string write");
        for item in &self.items {
            writeln!(
                s,
                "{}\t{}\t{}",
                item.split.as_str(),
                join(&item.ids),
                join(&item.labels)
            )
            .expect("string write");
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))?;
        let meta_json = header
            .strip_prefix(TAGGING_MAGIC)
            .ok_or_else(|| Error::Data("missing tagging header".into()))?;
        let meta: TaggingMeta = serde_json::from_str(meta_json)?;
        let k = meta.class_names.len();
        let mut items = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                bail!(Data, "line {}: expected 3 fields, got {}", n + 2, fields.len());
            }
            let ids: Vec<u32> = parse_list(fields[1])?;
            let labels: Vec<usize> = parse_list(fields[2])?;
            if ids.len() != labels.len() || ids.is_empty() {
                bail!(Data, "line {}: {} tokens but {} labels", n + 2, ids.len(), labels.len());
            }
            if labels.iter().any(|&l| l >= k) {
                bail!(Data, "line {}: label outside [0, {k})", n + 2);
            }
            items.push(TaggedSequence {
                ids,
                labels,
                split: fields[0].parse()?,
            });
        }
        Ok(Self { meta, items })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanQaItem {
    pub question: Vec<u32>,
    pub context: Vec<u32>,
    /// Inclusive context positions, `None` when unanswerable.
    pub answer: Option<(usize, usize)>,
    pub split: Split,
}

impl SpanQaItem {
    /// `[CLS] question [SEP] context` and the offset of the first context
    /// token within it.
    pub fn model_input(&self) -> (Vec<u32>, usize) {
        let mut ids = Vec::with_capacity(self.question.len() + self.context.len() + 2);
        ids.push(super::CLS_TOKEN);
        ids.extend_from_slice(&self.question);
        ids.push(super::SEP_TOKEN);
        let offset = ids.len();
        ids.extend_from_slice(&self.context);
        (ids, offset)
    }

    /// Gold start/end positions in model-input coordinates; position 0 (the
    /// leading `[CLS]`) encodes "no answer".
    pub fn gold_positions(&self) -> (usize, usize) {
        let offset = self.question.len() + 2;
        match self.answer {
            Some((s, e)) => (s + offset, e + offset),
            None => (0, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SpanQaMeta {
    params: SpanQaParams,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanQaDataset {
    pub params: SpanQaParams,
    pub seed: u64,
    pub items: Vec<SpanQaItem>,
}

impl SpanQaDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SpanQaItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn to_text(&self) -> Result<String> {
        let meta = SpanQaMeta {
            params: self.params.clone(),
            seed: self.seed,
        };
        let mut s = String::new();
        writeln!(s, "{SPANQA_MAGIC}{}", serde_json::to_string(&meta)?).expect("string write");
        for item in &self.items {
            let answer = match item.answer {
                Some((a, b)) => format!("{a} {b}"),
                None => "-".to_string(),
            };
            writeln!(
                s,
                "{}\t{}\t{}\t{}",
                item.split.as_str(),
                join(&item.question),
                join(&item.context),
                answer
            )
            .expect("string write");
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))?;
        let meta_json = header
            .strip_prefix(SPANQA_MAGIC)
            .ok_or_else(|| Error::Data("missing span-QA header".into()))?;
        let meta: SpanQaMeta = serde_json::from_str(meta_json)?;
        let mut items = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                bail!(Data, "line {}: expected 4 fields, got {}", n + 2, fields.len());
            }
            let context: Vec<u32> = parse_list(fields[2])?;
            let answer = if fields[3] == "-" {
                None
            } else {
                let v: Vec<usize> = parse_list(fields[3])?;
                if v.len() != 2 || v[0] > v[1] || v[1] >= context.len() {
                    bail!(Data, "line {}: invalid answer span {:?}", n + 2, fields[3]);
                }
                Some((v[0], v[1]))
            };
            items.push(SpanQaItem {
                question: parse_list(fields[1])?,
                context,
                answer,
                split: fields[0].parse()?,
            });
        }
        Ok(Self {
            params: meta.params,
            seed: meta.seed,
            items,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Either task's dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Tagging(TaggingDataset),
    SpanQa(SpanQaDataset),
}

impl TaskData {
    pub fn split_len(&self, split: Split) -> usize {
        match self {
            TaskData::Tagging(d) => d.split(split).count(),
            TaskData::SpanQa(d) => d.split(split).count(),
        }
    }

    /// Model-input token sequences of one split.
    pub fn inputs(&self, split: Split) -> Vec<Vec<u32>> {
        match self {
            TaskData::Tagging(d) => d.split(split).map(|i| i.ids.clone()).collect(),
            TaskData::SpanQa(d) => d.split(split).map(|i| i.model_input().0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.starts_with(TAGGING_MAGIC) {
            Ok(TaskData::Tagging(TaggingDataset::from_text(&text)?))
        } else if text.starts_with(SPANQA_MAGIC) {
            Ok(TaskData::SpanQa(SpanQaDataset::from_text(&text)?))
        } else {
            bail!(Data, "{} is not a dataset file", path.display())
        }
    }
}

/// Unlabelled corpus: one space-separated sequence per line.
pub fn corpus_to_text(corpus: &[Vec<u32>]) -> String {
    let mut s = String::new();
    for seq in corpus {
        s.push_str(&join(seq));
        s.push('\n');
    }
    s
}

pub fn corpus_from_text(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines().map(parse_list).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| Error::Data(format!("bad number {t:?}"))))
        .collect()
}
