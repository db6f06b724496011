//! t-SNE of decoder-side speaker-name embeddings.
//!
//! Each quotation is represented by the mean output embedding over the
//! name tokens of its gold speaker target. Points are projected to 2-D and
//! drawn as an SVG scatter coloured by novel.

use std::collections::BTreeMap;
use std::path::Path;

use linfa::metrics::SilhouetteScore;
use linfa::traits::Transformer;
use linfa::DatasetBase;
use linfa_tsne::TSneParams;
use ndarray::{Array1, Array2};
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Seq2SeqBackend, SequencePair};
use crate::corpus::{NovelCorpus, NovelId, QuoteKey};
use crate::error::{Error, Result};
use crate::templates::{self, PromptTemplate};

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub key: QuoteKey,
    pub vector: Vec<f32>,
}

/// Mean embedding of the gold speaker's name tokens for each selected
/// quotation, in corpus order.
pub fn speaker_name_embeddings(
    corpus: &NovelCorpus,
    keys: &std::collections::BTreeSet<QuoteKey>,
    template: &PromptTemplate,
    backend: &dyn Seq2SeqBackend,
    budget: Option<usize>,
) -> Result<Vec<SpeakerEmbedding>> {
    if !backend.supports_embeddings() {
        return Err(Error::EmbeddingsUnsupported);
    }
    let budget = budget.map_or(backend.max_source_len(), |b| b.min(backend.max_source_len()));
    let eos = usize::from(backend.eos().is_some());
    let mut out = Vec::new();
    for q in corpus.select(keys) {
        let gold = corpus
            .roster(&q.novel_id)
            .and_then(|r| r.get(&q.speaker_id))
            .ok_or_else(|| Error::InvalidCorpus(format!("no gold speaker entry for {}", q.key())))?;
        let source = templates::render_source(q, template, backend, budget)?;
        let target = templates::render_speaker_target(gold, template);
        let pair = SequencePair::new(backend.encode_source(&source.text)?, backend.encode_target(&target)?);
        let rows = backend.target_token_embeddings(&pair)?;
        let name_len = backend.encode_target(&gold.canonical_name)?.len().saturating_sub(eos).max(1);
        let end = rows.len().saturating_sub(eos);
        let start = end.saturating_sub(name_len);
        let span = &rows[start..end];
        if span.is_empty() {
            return Err(Error::Backend(format!("no name tokens in target for {}", q.key())));
        }
        let mut mean = vec![0f32; span[0].len()];
        for row in span {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / span.len() as f32;
            }
        }
        out.push(SpeakerEmbedding { key: q.key(), vector: mean });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            max_iter: 1000,
            seed: 0,
        }
    }
}

/// 2-D t-SNE coordinates, one row per input vector. Perplexity is lowered
/// to `(n - 1) / 3` for small inputs.
pub fn tsne(points: &[Vec<f32>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 4 {
        return Err(Error::Tsne(format!("need at least 4 points, got {n}")));
    }
    let dim = points[0].len();
    if dim < 2 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Tsne("points must share one dimension of at least 2".into()));
    }
    let data = Array2::from_shape_vec((n, dim), points.iter().flatten().map(|v| *v as f64).collect())
        .map_err(|e| Error::Tsne(e.to_string()))?;
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0);
    let y = TSneParams::embedding_size_with_rng(2, ChaCha8Rng::seed_from_u64(config.seed))
        .perplexity(perplexity)
        .approx_threshold(0.5)
        .max_iter(config.max_iter)
        .transform(data)
        .map_err(|e| Error::Tsne(e.to_string()))?;
    Ok(y.rows().into_iter().map(|r| [r[0], r[1]]).collect())
}

/// Mean silhouette of `points` clustered by `labels`.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::InvalidArgument("one label per point".into()));
    }
    let records = Array2::from_shape_vec((points.len(), 2), points.iter().flatten().copied().collect())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    DatasetBase::new(records, Array1::from_vec(labels.to_vec()))
        .silhouette_score()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateRow {
    pub novel_id: NovelId,
    pub quote_id: crate::corpus::QuoteId,
    pub x: f64,
    pub y: f64,
}

pub fn coordinate_rows(embeddings: &[SpeakerEmbedding], coords: &[[f64; 2]]) -> Vec<CoordinateRow> {
    embeddings
        .iter()
        .zip(coords)
        .map(|(e, c)| CoordinateRow {
            novel_id: e.key.novel_id.clone(),
            quote_id: e.key.quote_id.clone(),
            x: c[0],
            y: c[1],
        })
        .collect()
}

pub fn write_coordinates(path: &Path, rows: &[CoordinateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scatter plot with one colour per novel.
pub fn plot_scatter(path: &Path, rows: &[CoordinateRow], title: &str) -> Result<()> {
    let plot_err = |e: String| Error::Backend(format!("plotting {}: {e}", path.display()));
    let mut groups: BTreeMap<&NovelId, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.novel_id).or_default().push((r.x, r.y));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in rows {
        x0 = x0.min(r.x);
        x1 = x1.max(r.x);
        y0 = y0.min(r.y);
        y1 = y1.max(r.y);
    }
    if rows.is_empty() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let m = ((hi - lo) * 0.05).max(1e-6);
        (lo - m)..(hi + m)
    };

    let root = SVGBackend::new(path, (800, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(pad(x0, x1), pad(y0, y1))
        .map_err(|e| plot_err(e.to_string()))?;
    chart.configure_mesh().draw().map_err(|e| plot_err(e.to_string()))?;
    for (i, (novel, pts)) in groups.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(pts.into_iter().map(|(x, y)| Circle::new((x, y), 3, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?
            .label(novel.to_string())
            .legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::OracleBackend;
    use crate::backend::tiny::{TinyBackend, TinyConfig};
    use crate::synthetic::{generate_synthetic, SyntheticConfig};
    use rand::Rng;

    fn two_clusters(per: usize) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                pts.push((0..8).map(|d| if d == 0 { c as f32 * 20.0 } else { 0.0 } + rng.gen_range(-1.0..1.0)).collect());
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let (pts, labels) = two_clusters(20);
        let coords = tsne(&pts, &TsneConfig { perplexity: 5.0, max_iter: 500, seed: 1 }).unwrap();
        assert_eq!(coords.len(), 40);
        assert!(silhouette(&coords, &labels).unwrap() > 0.5);
    }

    #[test]
    fn fixed_seed_is_deterministic_and_perplexity_clamps() {
        let (pts, _) = two_clusters(5);
        let cfg = TsneConfig { max_iter: 300, ..Default::default() };
        assert_eq!(tsne(&pts, &cfg).unwrap(), tsne(&pts, &cfg).unwrap());
        assert!(tsne(&pts[..3], &cfg).is_err());
    }

    #[test]
    fn embeddings_need_a_capable_backend() {
        let corpus = generate_synthetic(&SyntheticConfig { novels: 2, quotes_per_novel: 4, ..Default::default() }).unwrap();
        let keys = corpus.quotations().map(|q| q.key()).collect();
        let template = templates::default_template();
        let oracle = OracleBackend::new(["Speaker:"]);
        let err = speaker_name_embeddings(&corpus, &keys, &template, &oracle, None).unwrap_err();
        assert!(err.to_string().contains("embeddings unsupported"), "{err}");

        let tiny = TinyBackend::for_corpus(&corpus, TinyConfig { embed_dim: 6, hidden_dim: 8, ..Default::default() }).unwrap();
        let emb = speaker_name_embeddings(&corpus, &keys, &template, &tiny, None).unwrap();
        assert_eq!(emb.len(), 8);
        assert!(emb.iter().all(|e| e.vector.len() == 6));
    }

    #[test]
    fn writes_csv_and_svg() {
        let (pts, _) = two_clusters(3);
        let embeddings: Vec<SpeakerEmbedding> = pts
            .iter()
            .enumerate()
            .map(|(i, v)| SpeakerEmbedding {
                key: QuoteKey::new(if i < 3 { "a" } else { "b" }, format!("q{i}")),
                vector: v.clone(),
            })
            .collect();
        let coords: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
        let rows = coordinate_rows(&embeddings, &coords);
        let dir = tempfile::tempdir().unwrap();
        write_coordinates(&dir.path().join("c.csv"), &rows).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("novel_id,quote_id,x,y"));
        plot_scatter(&dir.path().join("p.svg"), &rows, "speakers").unwrap();
        let svg = std::fs::read_to_string(dir.path().join("p.svg")).unwrap();
        assert!(svg.contains("<svg") && svg.matches("<circle").count() >= 6);
    }
}
