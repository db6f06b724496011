//! Accuracy by quote type, fold aggregation, top-k accuracy and lenient
//! matching of free-text responses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{CharacterEntry, NovelCorpus, QuoteKey, QuoteType, SplitSpec};
use crate::error::{Error, Result};
use crate::inference::{Prediction, RankedPrediction};
use crate::normalize::{contains_phrase, normalize_name, normalize_text};

/// Largest k reported in top-k vectors.
pub const MAX_TOP_K: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
}

impl Cell {
    /// `correct / total`; zero for an empty cell.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += correct as usize;
    }

    fn merge(self, other: Cell) -> Cell {
        Cell {
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }
}

/// Whether one quotation was attributed correctly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub key: QuoteKey,
    pub quote_type: QuoteType,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub split: String,
    pub fold: usize,
    pub overall: Cell,
    pub per_type: BTreeMap<QuoteType, Cell>,
    pub non_explicit: Cell,
    /// Accuracy at k = 1, 2, ... up to [`MAX_TOP_K`] or the shallowest
    /// ranking, when rankings are available.
    pub top_k: Option<Vec<f64>>,
}

impl FoldReport {
    pub fn from_outcomes(split: &SplitSpec, outcomes: &[Outcome], top_k: Option<Vec<f64>>) -> Self {
        let mut per_type: BTreeMap<QuoteType, Cell> = QuoteType::ALL.iter().map(|t| (*t, Cell::default())).collect();
        let mut overall = Cell::default();
        for o in outcomes {
            overall.add(o.correct);
            per_type.entry(o.quote_type).or_default().add(o.correct);
        }
        let non_explicit = per_type[&QuoteType::Anaphoric].merge(per_type[&QuoteType::Implicit]);
        FoldReport {
            split: split.name.clone(),
            fold: split.fold_index,
            overall,
            per_type,
            non_explicit,
            top_k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot summarise an empty list".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Ok(Summary {
            mean: values.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldReport>,
    pub overall: Summary,
    pub per_type: BTreeMap<QuoteType, Summary>,
    pub non_explicit: Summary,
    pub top_k: Option<Vec<Summary>>,
}

/// Errors unless `keys` are exactly the test side of `split`.
pub fn check_coverage<'a>(keys: impl IntoIterator<Item = &'a QuoteKey>, split: &SplitSpec) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut extra = Vec::new();
    for key in keys {
        if !split.test_ids.contains(key) || !seen.insert(key) {
            extra.push(key.to_string());
        }
    }
    let missing: Vec<String> = split.test_ids.iter().filter(|k| !seen.contains(k)).map(|k| k.to_string()).collect();
    if missing.is_empty() && extra.is_empty() {
        Ok(())
    } else {
        Err(Error::Coverage { missing, extra })
    }
}

fn gold<'a>(corpus: &'a NovelCorpus, key: &QuoteKey) -> Result<&'a crate::corpus::QuotationInstance> {
    corpus
        .quotation(key)
        .ok_or_else(|| Error::InvalidCorpus(format!("prediction for {key}, which is not in the corpus")))
}

/// Single-fold report. A prediction is correct when it names exactly the
/// gold speaker; ambiguous and unresolved generations are wrong.
pub fn evaluate_predictions(predictions: &[Prediction], corpus: &NovelCorpus, split: &SplitSpec) -> Result<FoldReport> {
    check_coverage(predictions.iter().map(Prediction::key), split)?;
    let mut outcomes = Vec::with_capacity(predictions.len());
    for p in predictions {
        let q = gold(corpus, p.key())?;
        outcomes.push(Outcome {
            key: p.key().clone(),
            quote_type: q.quote_type,
            correct: p.predicted() == Some(&q.speaker_id),
        });
    }
    let ranked: Vec<&RankedPrediction> = predictions
        .iter()
        .filter_map(|p| match p {
            Prediction::Sig(r) => Some(r),
            Prediction::SigD(_) => None,
        })
        .collect();
    let top_k = if !ranked.is_empty() && ranked.len() == predictions.len() {
        let depth = ranked.iter().map(|r| r.ranked.len()).min().unwrap_or(0).min(MAX_TOP_K);
        Some((1..=depth).map(|k| topk_accuracy(&ranked, corpus, k)).collect::<Result<_>>()?)
    } else {
        None
    };
    Ok(FoldReport::from_outcomes(split, &outcomes, top_k))
}

/// Fraction of predictions whose gold speaker is among the first `k`
/// ranked candidates.
pub fn topk_accuracy(predictions: &[&RankedPrediction], corpus: &NovelCorpus, k: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for p in predictions {
        if p.ranked.len() < k {
            return Err(Error::InsufficientDepth {
                quote: p.key.to_string(),
                depth: p.ranked.len(),
                k,
            });
        }
        let speaker = &gold(corpus, &p.key)?.speaker_id;
        hits += p.ranked[..k].iter().any(|c| &c.character_id == speaker) as usize;
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean and median of every cell across folds.
pub fn aggregate_folds(folds: Vec<FoldReport>) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no fold reports to aggregate".into()));
    }
    let summarise = |f: &dyn Fn(&FoldReport) -> f64| Summary::of(&folds.iter().map(f).collect::<Vec<_>>());
    let overall = summarise(&|r| r.overall.accuracy())?;
    let non_explicit = summarise(&|r| r.non_explicit.accuracy())?;
    let mut per_type = BTreeMap::new();
    for t in QuoteType::ALL {
        per_type.insert(t, summarise(&|r| r.per_type.get(&t).copied().unwrap_or_default().accuracy())?);
    }
    let top_k = match folds.iter().map(|r| r.top_k.as_ref().map(Vec::len)).collect::<Option<Vec<_>>>() {
        Some(depths) => {
            let depth = depths.into_iter().min().unwrap_or(0);
            Some(
                (0..depth)
                    .map(|i| summarise(&|r| r.top_k.as_ref().expect("checked above")[i]))
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    Ok(EvalReport {
        folds,
        overall,
        per_type,
        non_explicit,
        top_k,
    })
}

/// True when the canonical name or an alias of `gold` occurs in `response`
/// as a whole-word phrase, ignoring case and spacing.
pub fn lenient_match(response: &str, gold: &CharacterEntry) -> bool {
    let haystack = normalize_text(response);
    gold.names().any(|n| contains_phrase(&haystack, &normalize_name(n)))
}

/// Table of `mean/median` accuracies, one row per cell.
pub fn format_table(report: &EvalReport) -> String {
    let cell = |s: &Summary| format!("{:.2}/{:.2}", s.mean, s.median);
    let mut out = String::new();
    let _ = writeln!(out, "{:<14}{:>12}", "", "mean/median");
    let _ = writeln!(out, "{:<14}{:>12}", "Total", cell(&report.overall));
    for t in QuoteType::ALL {
        let label = format!("{}{}", t.as_str()[..1].to_uppercase(), &t.as_str()[1..]);
        let _ = writeln!(out, "{:<14}{:>12}", label, cell(&report.per_type[&t]));
    }
    let _ = writeln!(out, "{:<14}{:>12}", "Non-explicit", cell(&report.non_explicit));
    if let Some(top) = &report.top_k {
        let values: Vec<String> = top.iter().map(|s| format!("{:.2}", s.mean * 100.0)).collect();
        let _ = writeln!(out, "{:<14}{:>12}", format!("Top 1-{}", top.len()), values.join(" / "));
    }
    let _ = write!(out, "folds: {}", report.folds.len());
    out
}
