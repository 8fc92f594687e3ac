//! Synthetic token-level corpora.
//!
//! Every corpus is drawn from a latent "language": a Markov chain over
//! hidden tags that emits tokens from overlapping per-tag vocabularies. A
//! token alone therefore leaves its tag ambiguous while its neighbours
//! narrow it down. The same language feeds masked-LM pretraining,
//! task-independent alignment, and the tagging / span tasks.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::{Split, SpanQaDataset, SpanQaItem, TaggedSequence, TaggingDataset, TaggingMeta};
use super::FIRST_CONTENT_TOKEN;
use crate::error::{bail, Result};
use crate::seed::{derive_seed, rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceOrder {
    /// Tags drawn independently per position.
    Unigram,
    /// Tags follow a sticky Markov chain.
    Markov,
}

/// Generator parameters of the latent language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageParams {
    pub language_seed: u64,
    pub vocab_size: usize,
    pub num_tags: usize,
    pub order: SequenceOrder,
    /// Probability mass a tag spends on the next tag's vocabulary block.
    pub overlap: f64,
    /// Probability of keeping the previous tag; otherwise the chain moves to
    /// that tag's successor (Markov only).
    pub stickiness: f64,
}

impl Default for LanguageParams {
    fn default() -> Self {
        Self {
            language_seed: 17,
            vocab_size: 128,
            num_tags: 16,
            order: SequenceOrder::Markov,
            overlap: 0.4,
            stickiness: 0.9,
        }
    }
}

/// How latent tags become task labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TagScheme {
    /// Labels are the latent tags.
    Pos,
    /// The first `entity_tags` latent tags become entity classes `1..=entity_tags`;
    /// every other tag becomes the outside class `0`.
    Ner { entity_tags: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggingParams {
    pub language: LanguageParams,
    pub scheme: TagScheme,
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TaggingParams {
    fn default() -> Self {
        Self {
            language: LanguageParams::default(),
            scheme: TagScheme::Pos,
            num_sequences: 2000,
            min_len: 8,
            max_len: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanQaParams {
    pub language: LanguageParams,
    pub num_items: usize,
    pub min_context: usize,
    pub max_context: usize,
    pub question_len: usize,
    pub answerable_fraction: f64,
}

impl Default for SpanQaParams {
    fn default() -> Self {
        Self {
            language: LanguageParams::default(),
            num_items: 2000,
            min_context: 10,
            max_context: 18,
            question_len: 3,
            answerable_fraction: 0.8,
        }
    }
}

/// The latent generator.
#[derive(Clone, Debug)]
pub struct Language {
    params: LanguageParams,
    successor: Vec<usize>,
    block: usize,
}

impl Language {
    pub fn new(params: &LanguageParams) -> Result<Self> {
        if params.num_tags < 2 {
            bail!(Config, "need at least two tags, got {}", params.num_tags);
        }
        if !(0.0..=1.0).contains(&params.overlap) || !(0.0..=1.0).contains(&params.stickiness) {
            bail!(Config, "overlap and stickiness must lie in [0, 1]");
        }
        let content = params.vocab_size.saturating_sub(FIRST_CONTENT_TOKEN as usize);
        let block = content / params.num_tags;
        if block == 0 {
            bail!(
                Config,
                "vocabulary of {} cannot hold {} tag blocks",
                params.vocab_size,
                params.num_tags
            );
        }
        let mut r = rng(derive_seed(params.language_seed, "language"));
        let mut cycle: Vec<usize> = (0..params.num_tags).collect();
        cycle.shuffle(&mut r);
        let mut successor = vec![0; params.num_tags];
        for (i, &tag) in cycle.iter().enumerate() {
            successor[tag] = cycle[(i + 1) % cycle.len()];
        }
        Ok(Self {
            params: params.clone(),
            successor,
            block,
        })
    }

    pub fn params(&self) -> &LanguageParams {
        &self.params
    }

    pub fn num_tags(&self) -> usize {
        self.params.num_tags
    }

    /// Marginal tag distribution at every position (uniform: the transition
    /// matrix is doubly stochastic).
    pub fn tag_marginal(&self) -> Vec<f64> {
        vec![1.0 / self.num_tags() as f64; self.num_tags()]
    }

    /// `P(token | tag)` over the full vocabulary.
    pub fn emission(&self, tag: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.params.vocab_size];
        let own = tag;
        let next = (tag + 1) % self.num_tags();
        for (b, mass) in [(own, 1.0 - self.params.overlap), (next, self.params.overlap)] {
            let start = FIRST_CONTENT_TOKEN as usize + b * self.block;
            for t in start..start + self.block {
                p[t] += mass / self.block as f64;
            }
        }
        p
    }

    fn next_tag(&self, prev: Option<usize>, r: &mut Rng) -> usize {
        let k = self.num_tags();
        match (self.params.order, prev) {
            (SequenceOrder::Markov, Some(p)) if r.random_bool(self.params.stickiness) => p,
            (SequenceOrder::Markov, Some(p)) => self.successor[p],
            _ => r.random_range(0..k),
        }
    }

    fn emit(&self, tag: usize, r: &mut Rng) -> u32 {
        let b = if r.random_bool(self.params.overlap) {
            (tag + 1) % self.num_tags()
        } else {
            tag
        };
        (FIRST_CONTENT_TOKEN as usize + b * self.block + r.random_range(0..self.block)) as u32
    }

    /// One sequence of `(token, latent tag)` pairs.
    pub fn sample(&self, len: usize, r: &mut Rng) -> (Vec<u32>, Vec<usize>) {
        let mut tags = Vec::with_capacity(len);
        let mut ids = Vec::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let t = self.next_tag(prev, r);
            ids.push(self.emit(t, r));
            tags.push(t);
            prev = Some(t);
        }
        (ids, tags)
    }

    /// Accuracy of the Bayes-optimal context-free decoder, by exact
    /// enumeration over the vocabulary.
    pub fn bayes_unigram_accuracy(&self) -> f64 {
        let marginal = self.tag_marginal();
        let emissions: Vec<Vec<f64>> = (0..self.num_tags()).map(|k| self.emission(k)).collect();
        (0..self.params.vocab_size)
            .map(|t| {
                (0..self.num_tags())
                    .map(|k| marginal[k] * emissions[k][t])
                    .fold(0.0, f64::max)
            })
            .sum()
    }
}

fn check_lengths(min: usize, max: usize) -> Result<()> {
    if min == 0 || min > max {
        bail!(Config, "invalid length range [{min}, {max}]");
    }
    Ok(())
}

fn split_for(i: usize, n: usize) -> Split {
    let train = n * 8 / 10;
    let dev = n / 10;
    if i < train {
        Split::Train
    } else if i < train + dev {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Unlabelled sequences from the language (pretraining / alignment corpus).
pub fn gen_unlabelled_corpus(
    language: &LanguageParams,
    seed: u64,
    num_sequences: usize,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    check_lengths(min_len, max_len)?;
    let lang = Language::new(language)?;
    let mut r = rng(derive_seed(seed, "unlabelled-corpus"));
    Ok((0..num_sequences)
        .map(|_| {
            let len = r.random_range(min_len..=max_len);
            lang.sample(len, &mut r).0
        })
        .collect())
}

pub fn class_names(scheme: &TagScheme, num_tags: usize) -> Result<(Vec<String>, Option<usize>)> {
    match scheme {
        TagScheme::Pos => Ok(((0..num_tags).map(|k| format!("TAG{k}")).collect(), None)),
        TagScheme::Ner { entity_tags } => {
            if *entity_tags == 0 || *entity_tags >= num_tags {
                bail!(Config, "entity_tags must be in [1, {num_tags})");
            }
            let mut names = vec!["O".to_string()];
            names.extend((1..=*entity_tags).map(|k| format!("ENT{k}")));
            Ok((names, Some(0)))
        }
    }
}

fn map_label(scheme: &TagScheme, tag: usize) -> usize {
    match scheme {
        TagScheme::Pos => tag,
        TagScheme::Ner { entity_tags } => {
            if tag < *entity_tags {
                tag + 1
            } else {
                0
            }
        }
    }
}

/// Labelled tagging dataset split 80/10/10 into train/dev/test.
pub fn gen_tagging_corpus(params: &TaggingParams, seed: u64) -> Result<TaggingDataset> {
    check_lengths(params.min_len, params.max_len)?;
    if params.num_sequences < 10 {
        bail!(Config, "need at least 10 sequences to fill three splits");
    }
    let lang = Language::new(&params.language)?;
    let (names, outside) = class_names(&params.scheme, lang.num_tags())?;
    let mut r = rng(derive_seed(seed, "tagging-corpus"));
    let items: Vec<TaggedSequence> = (0..params.num_sequences)
        .map(|i| {
            let len = r.random_range(params.min_len..=params.max_len);
            let (ids, tags) = lang.sample(len, &mut r);
            TaggedSequence {
                ids,
                labels: tags.into_iter().map(|t| map_label(&params.scheme, t)).collect(),
                split: split_for(i, params.num_sequences),
            }
        })
        .collect();
    let ds = TaggingDataset {
        meta: TaggingMeta {
            class_names: names,
            outside_class: outside,
            params: params.clone(),
            seed,
        },
        items,
    };
    let mut seen = vec![false; ds.num_classes()];
    for item in ds.split(Split::Train) {
        for &l in &item.labels {
            seen[l] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        bail!(Config, "some class never appears in the training split; generate more sequences");
    }
    Ok(ds)
}

fn occurrences(haystack: &[u32], needle: &[u32]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(i, _)| i)
        .collect()
}

/// Extractive QA: the question's tokens are planted verbatim in the context
/// for answerable items (exactly once) and are absent otherwise.
pub fn gen_spanqa_corpus(params: &SpanQaParams, seed: u64) -> Result<SpanQaDataset> {
    check_lengths(params.min_context, params.max_context)?;
    if !(0.0..=1.0).contains(&params.answerable_fraction) {
        bail!(Config, "answerable_fraction must lie in [0, 1]");
    }
    if params.question_len == 0 || params.question_len > params.min_context {
        bail!(
            Config,
            "context of {} tokens is too short for a {}-token pattern",
            params.min_context,
            params.question_len
        );
    }
    if params.num_items < 10 {
        bail!(Config, "need at least 10 items to fill three splits");
    }
    let lang = Language::new(&params.language)?;
    let mut r = rng(derive_seed(seed, "spanqa-corpus"));
    let mut items = Vec::with_capacity(params.num_items);
    for i in 0..params.num_items {
        let answerable = r.random_bool(params.answerable_fraction);
        let question = lang.sample(params.question_len, &mut r).0;
        let len = r.random_range(params.min_context..=params.max_context);
        let mut attempts = 0;
        let (context, answer) = loop {
            attempts += 1;
            if attempts > 1000 {
                bail!(Config, "could not build a context with a unique pattern occurrence");
            }
            let mut context = lang.sample(len, &mut r).0;
            let answer = if answerable {
                let start = r.random_range(0..=len - params.question_len);
                context[start..start + params.question_len].copy_from_slice(&question);
                Some((start, start + params.question_len - 1))
            } else {
                None
            };
            let found = occurrences(&context, &question);
            let ok = match answer {
                Some((s, _)) => found == [s],
                None => found.is_empty(),
            };
            if ok {
                break (context, answer);
            }
        };
        items.push(SpanQaItem {
            question,
            context,
            answer,
            split: split_for(i, params.num_items),
        });
    }
    Ok(SpanQaDataset {
        params: params.clone(),
        seed,
        items,
    })
}

/// Exact-search oracle: the first occurrence of the question inside the
/// context, or no answer.
pub fn pattern_search_oracle(item: &SpanQaItem) -> Option<(usize, usize)> {
    occurrences(&item.context, &item.question)
        .first()
        .map(|&s| (s, s + item.question.len() - 1))
}
