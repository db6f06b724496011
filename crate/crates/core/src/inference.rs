//! Inference: classification by generation and direct generation.
//!
//! Classification renders one source per quotation and scores every candidate
//! speaker's target under teacher forcing. The score of a target is the
//! arithmetic mean of its per-step probabilities, the prefix tokens and any
//! end-of-sequence token included. Direct generation decodes freely and
//! resolves the generated name against the roster.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{DecodeStrategy, Seq2SeqBackend, SequencePair, StepProbabilities};
use crate::corpus::{CharacterEntry, CharacterId, CharacterRoster, NovelCorpus, QuotationInstance, QuoteKey};
use crate::error::{Error, Result};
use crate::normalize::{contains_phrase, normalize_name};
use crate::templates::{render_source, PromptTemplate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpace {
    /// Mean of step probabilities.
    #[default]
    Prob,
    /// Mean of step log-probabilities.
    Logprob,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AliasScoring {
    /// Score the canonical name only.
    #[default]
    Canonical,
    /// Score every name of the candidate and keep the best.
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    Sig,
    SigD,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Sig => "sig",
            InferenceMode::SigD => "sig_d",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    pub score_space: ScoreSpace,
    pub score_aliases: AliasScoring,
    /// Source token budget; the backend maximum when unset.
    pub budget: Option<usize>,
    pub max_target_len: usize,
    pub decode: DecodeStrategy,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            score_space: ScoreSpace::Prob,
            score_aliases: AliasScoring::Canonical,
            budget: None,
            max_target_len: 32,
            decode: DecodeStrategy::Greedy,
        }
    }
}

impl InferenceOptions {
    fn budget_for(&self, backend: &dyn Seq2SeqBackend) -> usize {
        let max = backend.max_source_len();
        self.budget.map_or(max, |b| b.min(max))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub character_id: CharacterId,
    pub target_text: String,
    pub score: f64,
    pub step_probs: StepProbabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    #[serde(flatten)]
    pub key: QuoteKey,
    pub chosen: CharacterId,
    pub ranked: Vec<CandidateScore>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "candidates", rename_all = "lowercase")]
pub enum Resolution {
    Resolved(CharacterId),
    Ambiguous(Vec<CharacterId>),
    Unresolved,
}

impl Resolution {
    pub fn resolved(&self) -> Option<&CharacterId> {
        match self {
            Resolution::Resolved(id) => Some(id),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    #[serde(flatten)]
    pub key: QuoteKey,
    pub raw_output: String,
    pub parsed_name: String,
    pub resolution: Resolution,
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Prediction {
    Sig(RankedPrediction),
    SigD(ParsedPrediction),
}

impl Prediction {
    pub fn key(&self) -> &QuoteKey {
        match self {
            Prediction::Sig(p) => &p.key,
            Prediction::SigD(p) => &p.key,
        }
    }

    /// The predicted speaker, if the prediction names exactly one.
    pub fn predicted(&self) -> Option<&CharacterId> {
        match self {
            Prediction::Sig(p) => Some(&p.chosen),
            Prediction::SigD(p) => p.resolution.resolved(),
        }
    }

    pub fn ranking(&self) -> Option<&[CandidateScore]> {
        match self {
            Prediction::Sig(p) => Some(&p.ranked),
            Prediction::SigD(_) => None,
        }
    }
}

/// Mean of `probs` in the requested space.
pub fn aggregate_score(probs: &StepProbabilities, space: ScoreSpace) -> f64 {
    let n = probs.len().max(1) as f64;
    match space {
        ScoreSpace::Prob => probs.as_slice().iter().sum::<f64>() / n,
        ScoreSpace::Logprob => probs.as_slice().iter().map(|p| p.ln()).sum::<f64>() / n,
    }
}

fn target_with_name(template: &PromptTemplate, name: &str) -> String {
    if template.target_prefix.is_empty() {
        name.to_string()
    } else {
        format!("{} {}", template.target_prefix, name)
    }
}

fn candidate_targets(candidate: &CharacterEntry, template: &PromptTemplate, aliases: AliasScoring) -> Vec<String> {
    match aliases {
        AliasScoring::Canonical => vec![target_with_name(template, &candidate.canonical_name)],
        AliasScoring::Max => candidate.names().map(|n| target_with_name(template, n)).collect(),
    }
}

fn best_of(candidate: &CharacterEntry, scored: Vec<(String, StepProbabilities)>, space: ScoreSpace) -> CandidateScore {
    let mut best: Option<CandidateScore> = None;
    for (target_text, step_probs) in scored {
        let score = aggregate_score(&step_probs, space);
        if best.as_ref().map_or(true, |b| score > b.score) {
            best = Some(CandidateScore {
                character_id: candidate.character_id.clone(),
                target_text,
                score,
                step_probs,
            });
        }
    }
    best.expect("every candidate has at least one name")
}

/// Scores one candidate for an already rendered source.
pub fn score_candidate(
    source_text: &str,
    candidate: &CharacterEntry,
    template: &PromptTemplate,
    backend: &dyn Seq2SeqBackend,
    options: &InferenceOptions,
) -> Result<CandidateScore> {
    let source = backend.encode_source(source_text)?;
    let targets = candidate_targets(candidate, template, options.score_aliases);
    let pairs = targets
        .iter()
        .map(|t| Ok(SequencePair::new(source.clone(), backend.encode_target(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let probs = backend.teacher_forced_probs_batch(&pairs)?;
    Ok(best_of(candidate, targets.into_iter().zip(probs).collect(), options.score_space))
}

fn with_quote<T>(key: &QuoteKey, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Scoring {
        quote: key.to_string(),
        source: Box::new(e),
    })
}

/// Ranks every candidate of `roster` (optionally filtered) for `instance`.
/// Ties keep roster order.
pub fn classify_by_generation(
    instance: &QuotationInstance,
    roster: &CharacterRoster,
    template: &PromptTemplate,
    backend: &dyn Seq2SeqBackend,
    filter: Option<&(dyn Fn(&CharacterEntry) -> bool + Sync)>,
    options: &InferenceOptions,
) -> Result<RankedPrediction> {
    let key = instance.key();
    let candidates: Vec<&CharacterEntry> = roster.entries.iter().filter(|e| filter.map_or(true, |f| f(e))).collect();
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let rendered = render_source(instance, template, backend, options.budget_for(backend))?;
    let ranked = with_quote(&key, (|| {
        let source = backend.encode_source(&rendered.text)?;
        let mut owners = Vec::new();
        let mut pairs = Vec::new();
        let mut texts = Vec::new();
        for (i, c) in candidates.iter().enumerate() {
            for t in candidate_targets(c, template, options.score_aliases) {
                pairs.push(SequencePair::new(source.clone(), backend.encode_target(&t)?));
                texts.push(t);
                owners.push(i);
            }
        }
        let probs = backend.teacher_forced_probs_batch(&pairs)?;
        let mut per_candidate: Vec<Vec<(String, StepProbabilities)>> = vec![Vec::new(); candidates.len()];
        for ((owner, text), p) in owners.into_iter().zip(texts).zip(probs) {
            per_candidate[owner].push((text, p));
        }
        let mut ranked: Vec<CandidateScore> = candidates
            .iter()
            .zip(per_candidate)
            .map(|(c, scored)| best_of(c, scored, options.score_space))
            .collect();
        // stable: equal scores keep roster order
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(ranked)
    })())?;
    Ok(RankedPrediction {
        key,
        chosen: ranked[0].character_id.clone(),
        ranked,
    })
}

/// Text after the first `target_prefix`, up to the auxiliary prefix or a
/// newline. `None` when the template has a prefix and the output lacks it.
pub fn parse_generated(raw: &str, template: &PromptTemplate) -> Option<String> {
    let rest = if template.target_prefix.is_empty() {
        raw
    } else {
        let at = raw.find(&template.target_prefix)?;
        &raw[at + template.target_prefix.len()..]
    };
    let mut end = rest.find('\n').unwrap_or(rest.len());
    if !template.aux_target_prefix.is_empty() {
        if let Some(aux) = rest[..end].find(&template.aux_target_prefix) {
            end = aux;
        }
    }
    Some(rest[..end].trim().to_string())
}

/// Matches a generated name against the roster: exact normalized match on
/// any name first, then a word-bounded substring of candidate names.
pub fn resolve_name(name: &str, roster: &CharacterRoster) -> Resolution {
    let needle = normalize_name(name);
    if needle.is_empty() {
        return Resolution::Unresolved;
    }
    let exact: Vec<CharacterId> = roster
        .entries
        .iter()
        .filter(|e| e.names().any(|n| normalize_name(n) == needle))
        .map(|e| e.character_id.clone())
        .collect();
    let hits = if exact.is_empty() {
        roster
            .entries
            .iter()
            .filter(|e| e.names().any(|n| contains_phrase(&normalize_name(n), &needle)))
            .map(|e| e.character_id.clone())
            .collect()
    } else {
        exact
    };
    match hits.len() {
        0 => Resolution::Unresolved,
        1 => Resolution::Resolved(hits.into_iter().next().expect("one hit")),
        _ => Resolution::Ambiguous(hits),
    }
}

pub fn direct_generate_speaker(
    instance: &QuotationInstance,
    roster: &CharacterRoster,
    template: &PromptTemplate,
    backend: &dyn Seq2SeqBackend,
    options: &InferenceOptions,
) -> Result<ParsedPrediction> {
    let key = instance.key();
    let rendered = render_source(instance, template, backend, options.budget_for(backend))?;
    let raw_output = with_quote(&key, (|| {
        let source = backend.encode_source(&rendered.text)?;
        let out = backend.free_generate(&source, options.max_target_len, options.decode)?;
        Ok(backend.decode(&out))
    })())?;
    Ok(parse_prediction(key, raw_output, roster, template))
}

/// Builds a [`ParsedPrediction`] from raw generated text.
pub fn parse_prediction(
    key: QuoteKey,
    raw_output: String,
    roster: &CharacterRoster,
    template: &PromptTemplate,
) -> ParsedPrediction {
    let (parsed_name, resolution) = match parse_generated(&raw_output, template) {
        Some(name) => {
            let r = resolve_name(&name, roster);
            (name, r)
        }
        None => (String::new(), Resolution::Unresolved),
    };
    ParsedPrediction {
        key,
        raw_output,
        parsed_name,
        resolution,
    }
}

/// First `k` ranked candidates.
pub fn top_k(prediction: &RankedPrediction, k: usize) -> Result<Vec<CharacterId>> {
    let max = prediction.ranked.len();
    if k == 0 || k > max {
        return Err(Error::KOutOfRange { k, max });
    }
    Ok(prediction.ranked[..k].iter().map(|c| c.character_id.clone()).collect())
}

/// Runs `mode` over `keys` in parallel; output follows `keys` order.
pub fn predict_all(
    corpus: &NovelCorpus,
    keys: &[QuoteKey],
    template: &PromptTemplate,
    backend: &dyn Seq2SeqBackend,
    mode: InferenceMode,
    options: &InferenceOptions,
) -> Result<Vec<Prediction>> {
    keys.par_iter()
        .map(|key| {
            let instance = corpus
                .quotation(key)
                .ok_or_else(|| Error::InvalidArgument(format!("quotation {key} not in corpus")))?;
            let roster = corpus
                .roster(&key.novel_id)
                .ok_or_else(|| Error::MissingRoster {
                    novel: key.novel_id.to_string(),
                    expected: "roster".into(),
                })?;
            Ok(match mode {
                InferenceMode::Sig => {
                    Prediction::Sig(classify_by_generation(instance, roster, template, backend, None, options)?)
                }
                InferenceMode::SigD => {
                    Prediction::SigD(direct_generate_speaker(instance, roster, template, backend, options)?)
                }
            })
        })
        .collect()
}
