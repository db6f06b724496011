use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::{NovelCorpus, NovelId, QuoteType, Side, SplitSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub total: usize,
    pub explicit: usize,
}

impl Counts {
    fn add(&mut self, quote_type: QuoteType) {
        self.total += 1;
        if quote_type.is_explicit() {
            self.explicit += 1;
        }
    }

    /// Fraction of explicit quotations; 0 for an empty cell.
    pub fn explicit_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.explicit as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SideStats {
    pub counts: Counts,
    pub per_novel: BTreeMap<NovelId, Counts>,
    pub per_type: BTreeMap<QuoteType, usize>,
}

impl SideStats {
    fn add(&mut self, novel: &NovelId, quote_type: QuoteType) {
        self.counts.add(quote_type);
        self.per_novel.entry(novel.clone()).or_default().add(quote_type);
        *self.per_type.entry(quote_type).or_default() += 1;
    }
}

/// Quotation counts for the whole corpus and, given a split, for each side.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StatsReport {
    pub all: SideStats,
    pub train: Option<SideStats>,
    pub test: Option<SideStats>,
}

pub fn corpus_stats(corpus: &NovelCorpus, split: Option<&SplitSpec>) -> StatsReport {
    let mut report = StatsReport::default();
    if split.is_some() {
        report.train = Some(SideStats::default());
        report.test = Some(SideStats::default());
    }
    for q in corpus.quotations() {
        report.all.add(&q.novel_id, q.quote_type);
        if let Some(split) = split {
            let side = match split.side_of(&q.key()) {
                Some(Side::Train) => report.train.as_mut(),
                Some(Side::Test) => report.test.as_mut(),
                None => None,
            };
            if let Some(side) = side {
                side.add(&q.novel_id, q.quote_type);
            }
        }
    }
    report
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |c: &Counts| format!("{} ({:.1}%)", c.total, 100.0 * c.explicit_ratio());
        writeln!(f, "{:<8} {:>18}", "side", "quotations")?;
        writeln!(f, "{:<8} {:>18}", "all", cell(&self.all.counts))?;
        if let (Some(train), Some(test)) = (&self.train, &self.test) {
            writeln!(f, "{:<8} {:>18}", "train", cell(&train.counts))?;
            writeln!(f, "{:<8} {:>18}", "test", cell(&test.counts))?;
        }
        writeln!(f)?;
        for t in QuoteType::ALL {
            writeln!(f, "{:<10} {:>8}", t.as_str(), self.all.per_type.get(&t).copied().unwrap_or(0))?;
        }
        writeln!(f)?;
        for (novel, c) in &self.all.per_novel {
            writeln!(f, "{:<32} {:>18}", novel.as_str(), cell(c))?;
        }
        Ok(())
    }
}
