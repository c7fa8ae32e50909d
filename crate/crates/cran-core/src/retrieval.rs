//! Fused cross-media similarity, bidirectional ranking, and Recall@K.
//!
//! The fused score sums the global dot product with the mean dot product of
//! the K nearest image locals (and relations) to the text local (relation)
//! vector. Scoring respects the ablation mode: the baseline score keeps
//! only the global term.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::alignment::knn_select;
use crate::config::{Mode, RunConfig};
use crate::data::{Dataset, Split};
use crate::encoder::{encode_image, encode_text, BundleValues, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::text::{Alphabet, TextInstance};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Retrieval direction: image queries against a text gallery (image
/// annotation) or text queries against an image gallery (image retrieval).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageAnnotation,
    ImageRetrieval,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::ImageAnnotation => "image_annotation",
            Direction::ImageRetrieval => "image_retrieval",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScoringConfig {
    pub k: usize,
    pub mode: Mode,
}

/// Fused similarity between an image bundle and a text bundle. The relation
/// term is omitted (not renormalized) when the image has no relation
/// candidates.
pub fn cross_media_similarity(
    img: &BundleValues,
    txt: &BundleValues,
    cfg: &ScoringConfig,
) -> Result<f64> {
    if img.global.len() != txt.global.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_media_similarity",
            lhs: vec![img.global.len()],
            rhs: vec![txt.global.len()],
        });
    }
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut score = dot(&img.global, &txt.global);
    let (use_local, use_relation) = match cfg.mode {
        Mode::Baseline => (false, false),
        Mode::Local => (true, false),
        Mode::Relation => (false, true),
        Mode::Full => (true, true),
    };
    if use_local {
        let l_t = txt.locals.first().ok_or_else(|| {
            Error::InvalidArgument("text bundle has no local vector".into())
        })?;
        if !img.locals.is_empty() {
            let sel = knn_select(l_t, &img.locals, cfg.k)?;
            let mean =
                sel.iter().map(|&i| dot(l_t, &img.locals[i])).sum::<f64>() / sel.len() as f64;
            score += mean;
        }
    }
    if use_relation && !img.relations.is_empty() {
        let r_t = txt.relations.first().ok_or_else(|| {
            Error::InvalidArgument("text bundle has no relation vector".into())
        })?;
        let sel = knn_select(r_t, &img.relations, cfg.k)?;
        let mean =
            sel.iter().map(|&i| dot(r_t, &img.relations[i])).sum::<f64>() / sel.len() as f64;
        score += mean;
    }
    Ok(score)
}

/// Indices sorted by descending score, ties broken by lower index.
pub fn rank_from_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Rank a gallery against one query under the fused similarity.
pub fn rank(
    query: &BundleValues,
    gallery: &[BundleValues],
    direction: Direction,
    cfg: &ScoringConfig,
) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("rank: empty gallery".into()));
    }
    let scores: Vec<f64> = gallery
        .iter()
        .map(|g| match direction {
            Direction::ImageAnnotation => cross_media_similarity(query, g, cfg),
            Direction::ImageRetrieval => cross_media_similarity(g, query, cfg),
        })
        .collect::<Result<_>>()?;
    Ok(rank_from_scores(&scores))
}

/// Fraction of queries whose ground truth landed in the top K.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("recall_at_k: no ranks".into()));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("recall_at_k: k must be at least 1".into()));
    }
    if ranks.iter().any(|&r| r < 1) {
        return Err(Error::InvalidArgument("recall_at_k: ranks are 1-based".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Per-direction ranked outcome: the 1-based rank of the best ground-truth
/// item for every query, plus Recall@K scores.
#[derive(Clone, Debug)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub mode: Mode,
    pub ranks: Vec<usize>,
    pub recall_at: BTreeMap<usize, f64>,
}

impl RetrievalReport {
    pub fn from_ranks(direction: Direction, mode: Mode, ranks: Vec<usize>) -> Result<Self> {
        let mut recall_at = BTreeMap::new();
        for k in RECALL_KS {
            recall_at.insert(k, recall_at_k(&ranks, k)?);
        }
        Ok(RetrievalReport { direction, mode, ranks, recall_at })
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or_default()
    }

    /// Report-file shape: direction, R@1/R@5/R@10, query count, mode.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "direction": self.direction.to_string(),
            "R@1": self.recall(1),
            "R@5": self.recall(5),
            "R@10": self.recall(10),
            "num_queries": self.ranks.len(),
            "mode": self.mode.to_string(),
        })
    }
}

/// Encoded split: image and text bundles index-aligned with `range`, plus
/// the ground-truth gallery positions for each query.
pub struct EncodedSplit {
    pub images: Vec<BundleValues>,
    pub texts: Vec<BundleValues>,
    /// Gallery positions of the ground-truth texts for each image query.
    pub gt: Vec<Vec<usize>>,
}

/// Encode every instance of a split once, with frozen parameters.
pub fn encode_split(dataset: &Dataset, split: Split, params: &EncoderParams, cfg: &RunConfig) -> Result<EncodedSplit> {
    let range: Range<usize> = dataset.split_range(split);
    if range.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let alphabet = Alphabet::from_symbols(&cfg.model.alphabet)?;
    let mut images = Vec::with_capacity(range.len());
    let mut texts = Vec::with_capacity(range.len());
    let mut gt = Vec::with_capacity(range.len());
    for i in range.clone() {
        let pair = &dataset.pairs[i];
        let mut tape = Tape::inference();
        let text = TextInstance::encode(&pair.caption, &alphabet, cfg.model.seq_len)?;
        images.push(encode_image(&mut tape, &pair.image, params)?.values());
        texts.push(encode_text(&mut tape, &text, params)?.values());
        let links = dataset.links_within(i, &range);
        if links.is_empty() {
            return Err(Error::Data(format!(
                "record {i}: no ground-truth link inside split {split}"
            )));
        }
        gt.push(links.iter().map(|&j| j - range.start).collect());
    }
    Ok(EncodedSplit { images, texts, gt })
}

fn best_rank(ranking: &[usize], gt: &[usize]) -> usize {
    ranking
        .iter()
        .position(|i| gt.contains(i))
        .map(|p| p + 1)
        .expect("ground truth must appear in the gallery ranking")
}

/// Rank every query of both directions against the full opposite-media
/// gallery. Queries are scored independently (optionally in parallel);
/// report assembly is deterministic either way.
pub fn evaluate_encoded(
    encoded: &EncodedSplit,
    scoring: &ScoringConfig,
    mode_label: Mode,
    workers: usize,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let n = encoded.images.len();
    let img_to_txt = |q: usize| -> Result<usize> {
        let ranking = rank(&encoded.images[q], &encoded.texts, Direction::ImageAnnotation, scoring)?;
        Ok(best_rank(&ranking, &encoded.gt[q]))
    };
    let txt_to_img = |q: usize| -> Result<usize> {
        let ranking = rank(&encoded.texts[q], &encoded.images, Direction::ImageRetrieval, scoring)?;
        Ok(best_rank(&ranking, &encoded.gt[q]))
    };
    let (ranks_a, ranks_r): (Vec<usize>, Vec<usize>) = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| -> Result<_> {
            let a: Result<Vec<usize>> = (0..n).into_par_iter().map(img_to_txt).collect();
            let r: Result<Vec<usize>> = (0..n).into_par_iter().map(txt_to_img).collect();
            Ok((a?, r?))
        })?
    } else {
        (
            (0..n).map(img_to_txt).collect::<Result<_>>()?,
            (0..n).map(txt_to_img).collect::<Result<_>>()?,
        )
    };
    Ok((
        RetrievalReport::from_ranks(Direction::ImageAnnotation, mode_label, ranks_a)?,
        RetrievalReport::from_ranks(Direction::ImageRetrieval, mode_label, ranks_r)?,
    ))
}

/// Encode a split and evaluate both retrieval directions.
pub fn evaluate(
    dataset: &Dataset,
    split: Split,
    params: &EncoderParams,
    cfg: &RunConfig,
    mode: Mode,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let encoded = encode_split(dataset, split, params, cfg)?;
    let scoring = ScoringConfig { k: cfg.loss.k, mode };
    evaluate_encoded(&encoded, &scoring, mode, cfg.eval.workers)
}

/// Dense similarity matrix (images x texts) under the fused score;
/// optional inspection output.
pub fn similarity_matrix(
    images: &[BundleValues],
    texts: &[BundleValues],
    cfg: &ScoringConfig,
) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| texts.iter().map(|txt| cross_media_similarity(img, txt, cfg)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn values(
        global: Vec<f64>,
        locals: Vec<Vec<f64>>,
        relations: Vec<Vec<f64>>,
    ) -> BundleValues {
        let relations_disabled = relations.is_empty();
        BundleValues {
            global,
            locals,
            relations,
            attn_local: None,
            attn_relation: None,
            relations_disabled,
        }
    }

    fn random_bundle(rng: &mut ChaCha8Rng, dim: usize, n_loc: usize, n_rel: usize) -> BundleValues {
        let mut v = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        values(
            v(rng),
            (0..n_loc).map(|_| v(rng)).collect(),
            (0..n_rel).map(|_| v(rng)).collect(),
        )
    }

    const FULL: ScoringConfig = ScoringConfig { k: 3, mode: Mode::Full };

    #[test]
    fn all_zero_bundles_score_zero() {
        let img = values(vec![0.0; 4], vec![vec![0.0; 4]], vec![vec![0.0; 4]]);
        let txt = values(vec![0.0; 4], vec![vec![0.0; 4]], vec![vec![0.0; 4]]);
        assert_eq!(cross_media_similarity(&img, &txt, &FULL).unwrap(), 0.0);
    }

    #[test]
    fn single_region_image_keeps_global_and_local_terms() {
        let img = values(vec![1.0, 0.0], vec![vec![0.5, 0.0]], vec![]);
        let txt = values(vec![1.0, 0.0], vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]);
        let s = cross_media_similarity(&img, &txt, &FULL).unwrap();
        assert!((s - 1.5).abs() < 1e-12); // global 1.0 + local 0.5, no relation term
    }

    #[test]
    fn baseline_mode_scores_global_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_bundle(&mut rng, 4, 5, 20);
        let txt = random_bundle(&mut rng, 4, 1, 1);
        let baseline = ScoringConfig { k: 3, mode: Mode::Baseline };
        let s = cross_media_similarity(&img, &txt, &baseline).unwrap();
        let global: f64 = img.global.iter().zip(&txt.global).map(|(a, b)| a * b).sum();
        assert!((s - global).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let img = values(vec![0.0; 3], vec![], vec![]);
        let txt = values(vec![0.0; 4], vec![], vec![]);
        assert!(cross_media_similarity(&img, &txt, &FULL).is_err());
    }

    #[test]
    fn rank_single_gallery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_bundle(&mut rng, 4, 1, 1);
        let g = vec![random_bundle(&mut rng, 4, 3, 6)];
        assert_eq!(rank(&q, &g, Direction::ImageRetrieval, &FULL).unwrap(), vec![0]);
    }

    #[test]
    fn duplicated_best_item_ties_in_index_order() {
        let txt = values(vec![1.0, 0.0], vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]);
        let best = values(vec![1.0, 0.0], vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]);
        let worst = values(vec![-1.0, 0.0], vec![vec![-1.0, 0.0]], vec![vec![-1.0, 0.0]]);
        let gallery = vec![worst, best.clone(), best];
        let ranking = rank(&txt, &gallery, Direction::ImageRetrieval, &FULL).unwrap();
        assert_eq!(ranking, vec![1, 2, 0]);
    }

    #[test]
    fn rank_agrees_with_similarity_matrix_sort() {
        // brute-force oracle: build the full matrix, argsort each row
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let images: Vec<BundleValues> =
                (0..n).map(|_| random_bundle(&mut rng, 4, 3, 6)).collect();
            let texts: Vec<BundleValues> =
                (0..n).map(|_| random_bundle(&mut rng, 4, 1, 1)).collect();
            let matrix = similarity_matrix(&images, &texts, &FULL).unwrap();
            for (qi, img) in images.iter().enumerate() {
                let got = rank(img, &texts, Direction::ImageAnnotation, &FULL).unwrap();
                let mut expected: Vec<usize> = (0..n).collect();
                expected.sort_by(|&a, &b| {
                    matrix[qi][b].total_cmp(&matrix[qi][a]).then(a.cmp(&b))
                });
                assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn rank_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_bundle(&mut rng, 4, 1, 1);
        let gallery: Vec<BundleValues> =
            (0..9).map(|_| random_bundle(&mut rng, 4, 3, 6)).collect();
        let mut r = rank(&q, &gallery, Direction::ImageRetrieval, &FULL).unwrap();
        r.sort_unstable();
        assert_eq!(r, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn argsort_invariant_under_strictly_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let base = rank_from_scores(&scores);
        let shifted: Vec<f64> = scores.iter().map(|s| 2.5 * s + 7.0).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        assert_eq!(rank_from_scores(&shifted), base);
        assert_eq!(rank_from_scores(&exp), base);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[3], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[3], 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[3], 10).unwrap(), 1.0);
        assert!((recall_at_k(&[2, 7, 12], 5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(recall_at_k(&[], 5).is_err());
        assert!(recall_at_k(&[1], 0).is_err());
    }

    #[test]
    fn planted_identity_bundles_give_perfect_recall() {
        // every text equals a deterministic transform of its image bundle,
        // so the matched pair scores strictly highest
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut images = Vec::new();
        let mut texts = Vec::new();
        let mut gt = Vec::new();
        for q in 0..12 {
            let img = random_bundle(&mut rng, 6, 4, 12);
            let txt = values(
                img.global.clone(),
                vec![img.locals[0].clone()],
                vec![img.relations[0].clone()],
            );
            images.push(img);
            texts.push(txt);
            gt.push(vec![q]);
        }
        let encoded = EncodedSplit { images, texts, gt };
        let (annotation, retrieval) =
            evaluate_encoded(&encoded, &FULL, Mode::Full, 1).unwrap();
        assert_eq!(annotation.recall(1), 1.0);
        assert_eq!(retrieval.recall(1), 1.0);
    }

    #[test]
    fn reports_are_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..20)).collect();
            let report =
                RetrievalReport::from_ranks(Direction::ImageAnnotation, Mode::Full, ranks)
                    .unwrap();
            assert!(report.recall(1) <= report.recall(5));
            assert!(report.recall(5) <= report.recall(10));
        }
    }

    #[test]
    fn recall_is_one_when_k_reaches_gallery_size() {
        let ranks: Vec<usize> = (1..=7).collect(); // worst possible ranks in a 7-gallery
        assert_eq!(recall_at_k(&ranks, 7).unwrap(), 1.0);
    }

    #[test]
    fn workers_do_not_change_the_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 10;
        let images: Vec<BundleValues> =
            (0..n).map(|_| random_bundle(&mut rng, 4, 3, 6)).collect();
        let texts: Vec<BundleValues> =
            (0..n).map(|_| random_bundle(&mut rng, 4, 1, 1)).collect();
        let gt: Vec<Vec<usize>> = (0..n).map(|q| vec![q]).collect();
        let encoded = EncodedSplit { images, texts, gt };
        let (a1, r1) = evaluate_encoded(&encoded, &FULL, Mode::Full, 1).unwrap();
        let (a2, r2) = evaluate_encoded(&encoded, &FULL, Mode::Full, 4).unwrap();
        assert_eq!(a1.ranks, a2.ranks);
        assert_eq!(r1.ranks, r2.ranks);
    }
}
