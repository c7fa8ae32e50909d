//! Triplet sampling and the three alignment losses: a global joint-embedding
//! hinge over matched/mismatched pairs, and KNN-mean hinges over local and
//! relation fragments. All similarities are dot products and every term is
//! a max(0, margin - pos + neg) hinge.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::config::LossConfig;
use crate::encoder::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// One anchor pair with a mismatched text and a mismatched image, all given
/// as indices into the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub neg_text: usize,
    pub neg_image: usize,
}

/// Draw one triplet per batch element. `groups[i]` is the ground-truth
/// group of element i; negatives are drawn uniformly from elements of a
/// different group.
pub fn sample_triplets(groups: &[usize], rng: &mut impl Rng) -> Result<Vec<Triplet>> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "triplet sampling needs a batch of at least 2, got {}",
            groups.len()
        )));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (anchor, &g) in groups.iter().enumerate() {
        let candidates: Vec<usize> =
            (0..groups.len()).filter(|&j| groups[j] != g).collect();
        if candidates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "batch element {anchor} has no valid negative (single ground-truth group)"
            )));
        }
        let neg_text = candidates[rng.gen_range(0..candidates.len())];
        let neg_image = candidates[rng.gen_range(0..candidates.len())];
        out.push(Triplet { anchor, neg_text, neg_image });
    }
    Ok(out)
}

#[derive(PartialEq)]
struct RankKey {
    score: f64,
    index: usize,
}

impl Eq for RankKey {}

impl PartialOrd for RankKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RankKey {
    // greater = better: higher score first, lower index on ties
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Indices of the min(k, n) candidates with the largest dot product against
/// the query, in descending order; ties broken by lower index. Runs a
/// bounded heap selection rather than a full sort.
pub fn knn_select(query: &[f64], candidates: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("knn_select: empty candidate list".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("knn_select: k must be positive".into()));
    }
    let keep = k.min(candidates.len());
    let mut heap: BinaryHeap<std::cmp::Reverse<RankKey>> = BinaryHeap::with_capacity(keep + 1);
    for (index, c) in candidates.iter().enumerate() {
        if c.len() != query.len() {
            return Err(Error::ShapeMismatch {
                op: "knn_select",
                lhs: vec![query.len()],
                rhs: vec![c.len()],
            });
        }
        let score: f64 = query.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        heap.push(std::cmp::Reverse(RankKey { score, index }));
        if heap.len() > keep {
            heap.pop();
        }
    }
    let mut kept: Vec<RankKey> = heap.into_iter().map(|r| r.0).collect();
    kept.sort_by(|a, b| b.cmp(a));
    Ok(kept.into_iter().map(|key| key.index).collect())
}

/// Cross-media joint embedding loss over global vectors: for each triplet,
/// two hinges penalize the mismatched text and the mismatched image, and the
/// total is averaged over triplets.
pub fn global_loss(
    tape: &mut Tape,
    triplets: &[Triplet],
    images: &[EmbeddingBundle],
    texts: &[EmbeddingBundle],
    margin: f64,
) -> Result<Tensor> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("global_loss: empty triplet list".into()));
    }
    let alpha = Tensor::scalar(margin);
    let mut terms = Vec::with_capacity(2 * triplets.len());
    for t in triplets {
        let d_pos = tape.dot(&images[t.anchor].global, &texts[t.anchor].global)?;
        let d_neg_text = tape.dot(&images[t.anchor].global, &texts[t.neg_text].global)?;
        let d_neg_image = tape.dot(&images[t.neg_image].global, &texts[t.anchor].global)?;
        for d_neg in [d_neg_text, d_neg_image] {
            let gap = tape.sub(&alpha, &d_pos)?;
            let z = tape.add(&gap, &d_neg)?;
            terms.push(tape.max_zero(&z)?);
        }
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    let total = tape.sum_n(&refs)?;
    tape.scale(&total, 1.0 / triplets.len() as f64)
}

/// Mean dot product between `query` and the KNN-selected subset of
/// `fragments`, built on the tape so gradients flow through the selected
/// candidates (the discrete selection itself is treated as constant).
fn knn_mean_similarity(
    tape: &mut Tape,
    query: &Tensor,
    fragments: &[Tensor],
    k: usize,
) -> Result<Tensor> {
    let q = query.data();
    let candidates: Vec<Vec<f64>> = fragments.iter().map(|t| t.data()).collect();
    let selected = knn_select(&q, &candidates, k)?;
    let mut dots = Vec::with_capacity(selected.len());
    for idx in &selected {
        dots.push(tape.dot(query, &fragments[*idx])?);
    }
    let refs: Vec<&Tensor> = dots.iter().collect();
    let sum = tape.sum_n(&refs)?;
    tape.scale(&sum, 1.0 / selected.len() as f64)
}

/// Local alignment hinge for one triplet: the text local vector against the
/// K nearest locals of the matched image versus those of the mismatched one.
pub fn local_loss(
    tape: &mut Tape,
    anchor_text: &EmbeddingBundle,
    pos_image: &EmbeddingBundle,
    neg_image: &EmbeddingBundle,
    margin: f64,
    k: usize,
) -> Result<Tensor> {
    let l_t = anchor_text.locals.first().ok_or_else(|| {
        Error::InvalidArgument("local_loss: text bundle has no local vector".into())
    })?;
    if pos_image.locals.is_empty() || neg_image.locals.is_empty() {
        return Err(Error::InvalidArgument("local_loss: image bundle has no locals".into()));
    }
    let pos = knn_mean_similarity(tape, l_t, &pos_image.locals, k)?;
    let neg = knn_mean_similarity(tape, l_t, &neg_image.locals, k)?;
    let alpha = Tensor::scalar(margin);
    let gap = tape.sub(&alpha, &pos)?;
    let z = tape.add(&gap, &neg)?;
    tape.max_zero(&z)
}

/// Relation alignment hinge for one triplet, with the same form as
/// [`local_loss`] over relation candidates. Returns `None` when either image
/// has its relation channel disabled; the caller counts the skip.
pub fn relation_loss(
    tape: &mut Tape,
    anchor_text: &EmbeddingBundle,
    pos_image: &EmbeddingBundle,
    neg_image: &EmbeddingBundle,
    margin: f64,
    k: usize,
) -> Result<Option<Tensor>> {
    if pos_image.relations.is_empty() || neg_image.relations.is_empty() {
        return Ok(None);
    }
    let r_t = anchor_text.relations.first().ok_or_else(|| {
        Error::InvalidArgument("relation_loss: text bundle has no relation vector".into())
    })?;
    let pos = knn_mean_similarity(tape, r_t, &pos_image.relations, k)?;
    let neg = knn_mean_similarity(tape, r_t, &neg_image.relations, k)?;
    let alpha = Tensor::scalar(margin);
    let gap = tape.sub(&alpha, &pos)?;
    let z = tape.add(&gap, &neg)?;
    Ok(Some(tape.max_zero(&z)?))
}

/// Per-term values of one batch loss, for logging.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub relation: f64,
    /// Triplets whose relation term was skipped for lack of candidates.
    pub relation_skipped: usize,
}

/// Weighted sum of the three alignment terms under the mode gating of
/// `cfg`. Channels with a zero effective weight are not built at all, so
/// their parameters receive no gradient.
pub fn total_loss(
    tape: &mut Tape,
    triplets: &[Triplet],
    images: &[EmbeddingBundle],
    texts: &[EmbeddingBundle],
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    cfg.validate()?;
    let (w_g, w_l, w_r) = cfg.effective_weights();
    let mut breakdown = LossBreakdown::default();
    let mut weighted = Vec::new();

    if w_g > 0.0 {
        let lg = global_loss(tape, triplets, images, texts, cfg.margin)?;
        breakdown.global = lg.item();
        weighted.push(tape.scale(&lg, w_g)?);
    }
    if w_l > 0.0 {
        let mut terms = Vec::with_capacity(triplets.len());
        for t in triplets {
            terms.push(local_loss(
                tape,
                &texts[t.anchor],
                &images[t.anchor],
                &images[t.neg_image],
                cfg.margin,
                cfg.k,
            )?);
        }
        let refs: Vec<&Tensor> = terms.iter().collect();
        let sum = tape.sum_n(&refs)?;
        let ll = tape.scale(&sum, 1.0 / terms.len() as f64)?;
        breakdown.local = ll.item();
        weighted.push(tape.scale(&ll, w_l)?);
    }
    if w_r > 0.0 {
        let mut terms = Vec::new();
        for t in triplets {
            match relation_loss(
                tape,
                &texts[t.anchor],
                &images[t.anchor],
                &images[t.neg_image],
                cfg.margin,
                cfg.k,
            )? {
                Some(term) => terms.push(term),
                None => breakdown.relation_skipped += 1,
            }
        }
        if !terms.is_empty() {
            let refs: Vec<&Tensor> = terms.iter().collect();
            let sum = tape.sum_n(&refs)?;
            let lr = tape.scale(&sum, 1.0 / terms.len() as f64)?;
            breakdown.relation = lr.item();
            weighted.push(tape.scale(&lr, w_r)?);
        }
    }

    let refs: Vec<&Tensor> = weighted.iter().collect();
    let total = tape.sum_n(&refs)?;
    breakdown.total = total.item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle_from(global: Vec<f64>, locals: Vec<Vec<f64>>, relations: Vec<Vec<f64>>) -> EmbeddingBundle {
        let disabled = relations.is_empty();
        EmbeddingBundle {
            global: Tensor::new(global.clone(), &[global.len()]).unwrap(),
            locals: locals
                .into_iter()
                .map(|v| {
                    let n = v.len();
                    Tensor::new(v, &[n]).unwrap()
                })
                .collect(),
            relations: relations
                .into_iter()
                .map(|v| {
                    let n = v.len();
                    Tensor::new(v, &[n]).unwrap()
                })
                .collect(),
            attn_local: None,
            attn_relation: None,
            relations_disabled: disabled,
        }
    }

    fn global_only(v: Vec<f64>) -> EmbeddingBundle {
        bundle_from(v.clone(), vec![v.clone()], vec![v])
    }

    #[test]
    fn batch_of_two_uses_the_other_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let triplets = sample_triplets(&[0, 1], &mut rng).unwrap();
        assert_eq!(triplets[0], Triplet { anchor: 0, neg_text: 1, neg_image: 1 });
        assert_eq!(triplets[1], Triplet { anchor: 1, neg_text: 0, neg_image: 0 });
    }

    #[test]
    fn fixed_seed_reproduces_triplets() {
        let groups: Vec<usize> = (0..8).collect();
        let a = sample_triplets(&groups, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_triplets(&groups, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triplets(&[0], &mut rng).is_err());
        // two elements of one group: no negative exists
        assert!(sample_triplets(&[3, 3], &mut rng).is_err());
    }

    #[test]
    fn negative_draws_are_roughly_uniform() {
        // chi-square over 10k draws of neg_text for anchor 0 in a batch of
        // 8: 7 candidates, df=6, critical value 22.46 at p=0.001.
        let groups: Vec<usize> = (0..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let t = sample_triplets(&groups, &mut rng).unwrap();
            counts[t[0].neg_text] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = draws as f64 / 7.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 22.46, "chi-square statistic {chi2} too large");
    }

    #[test]
    fn knn_select_example_order() {
        // dots [0.5, 0.9, 0.1, 0.7], k=3 -> 0-based [1, 3, 0]
        let query = vec![1.0];
        let candidates = vec![vec![0.5], vec![0.9], vec![0.1], vec![0.7]];
        assert_eq!(knn_select(&query, &candidates, 3).unwrap(), vec![1, 3, 0]);
    }

    #[test]
    fn knn_select_k_larger_than_candidates() {
        let query = vec![1.0, 0.0];
        let candidates = vec![vec![0.2, 0.0], vec![0.4, 0.0]];
        assert_eq!(knn_select(&query, &candidates, 10).unwrap(), vec![1, 0]);
    }

    #[test]
    fn knn_select_ties_prefer_lower_index() {
        let query = vec![1.0];
        let candidates = vec![vec![0.5], vec![0.5], vec![0.5]];
        assert_eq!(knn_select(&query, &candidates, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn knn_select_rejects_empty() {
        assert!(knn_select(&[1.0], &[], 3).is_err());
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        // brute-force oracle: full sort by (score desc, index asc)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let dim = rng.gen_range(1..6);
            let n = rng.gen_range(1..12);
            let k = rng.gen_range(1..6);
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let candidates: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut scored: Vec<(f64, usize)> = candidates
                .iter()
                .enumerate()
                .map(|(i, c)| (query.iter().zip(c).map(|(a, b)| a * b).sum(), i))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = scored.iter().take(k.min(n)).map(|&(_, i)| i).collect();
            assert_eq!(knn_select(&query, &candidates, k).unwrap(), expected);
        }
    }

    #[test]
    fn global_loss_arithmetic() {
        // d(pos)=0.9, both negatives 0.2, margin 1 -> 0.3 + 0.3 = 0.6
        let img_pos = global_only(vec![0.9, 0.2]);
        let txt_pos = global_only(vec![1.0, 0.0]); // d(img_pos, txt_pos) = 0.9
        let txt_neg = global_only(vec![0.0, 1.0]); // d(img_pos, txt_neg) = 0.2
        let img_neg = global_only(vec![0.2, 0.0]); // d(img_neg, txt_pos) = 0.2
        let images = vec![img_pos, img_neg];
        let texts = vec![txt_pos, txt_neg];
        let triplets = vec![Triplet { anchor: 0, neg_text: 1, neg_image: 1 }];
        let mut tape = Tape::inference();
        let loss = global_loss(&mut tape, &triplets, &images, &texts, 1.0).unwrap();
        assert!((loss.item() - 0.6).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn global_loss_zero_when_margin_satisfied() {
        let img = global_only(vec![2.0, 0.0]);
        let txt = global_only(vec![2.0, 0.0]); // d_pos = 4
        let img_neg = global_only(vec![-1.0, 0.0]); // d = -2
        let txt_neg = global_only(vec![-1.0, 0.0]);
        let images = vec![img, img_neg];
        let texts = vec![txt, txt_neg];
        let triplets = vec![Triplet { anchor: 0, neg_text: 1, neg_image: 1 }];
        let mut tape = Tape::inference();
        let loss = global_loss(&mut tape, &triplets, &images, &texts, 1.0).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn global_loss_identical_embeddings_is_twice_margin() {
        let v = vec![0.3, -0.4];
        let images = vec![global_only(v.clone()), global_only(v.clone())];
        let texts = vec![global_only(v.clone()), global_only(v.clone())];
        let triplets = vec![Triplet { anchor: 0, neg_text: 1, neg_image: 1 }];
        let mut tape = Tape::inference();
        for margin in [0.5, 1.0, 2.0] {
            let loss = global_loss(&mut tape, &triplets, &images, &texts, margin).unwrap();
            assert!((loss.item() - 2.0 * margin).abs() < 1e-12);
        }
    }

    #[test]
    fn global_loss_rejects_empty_triplets() {
        let mut tape = Tape::inference();
        assert!(global_loss(&mut tape, &[], &[], &[], 1.0).is_err());
    }

    #[test]
    fn local_loss_orthogonal_sides_equals_margin() {
        // all image locals orthogonal to the text local on both sides:
        // both means are 0, loss = margin
        let txt = bundle_from(vec![1.0, 0.0], vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]);
        let img = bundle_from(
            vec![0.0, 1.0],
            vec![vec![0.0, 1.0], vec![0.0, -2.0]],
            vec![vec![0.0, 1.0]],
        );
        let mut tape = Tape::inference();
        let loss = local_loss(&mut tape, &txt, &img, &img, 1.0, 3).unwrap();
        assert_eq!(loss.item(), 1.0);
    }

    #[test]
    fn local_loss_saturated_hinge_is_zero() {
        // mean positive dot 1.5, mean negative dot 0.2 => max(0, 1-1.5+0.2)=0
        let txt = bundle_from(vec![1.0], vec![vec![1.0]], vec![vec![1.0]]);
        let pos = bundle_from(vec![1.0], vec![vec![1.5]], vec![vec![1.0]]);
        let neg = bundle_from(vec![1.0], vec![vec![0.2]], vec![vec![1.0]]);
        let mut tape = Tape::inference();
        let loss = local_loss(&mut tape, &txt, &pos, &neg, 1.0, 3).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn local_loss_invariant_under_region_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rand_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let txt = bundle_from(rand_vec(&mut rng), vec![rand_vec(&mut rng)], vec![]);
        let locs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng)).collect();
        let negs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng)).collect();
        let pos_a = bundle_from(rand_vec(&mut rng), locs.clone(), vec![]);
        let mut shuffled = locs.clone();
        shuffled.reverse();
        let pos_b = bundle_from(vec![0.0; 4], shuffled, vec![]);
        let neg = bundle_from(vec![0.0; 4], negs, vec![]);
        let mut tape = Tape::inference();
        let a = local_loss(&mut tape, &txt, &pos_a, &neg, 1.0, 3).unwrap();
        let b = local_loss(&mut tape, &txt, &pos_b, &neg, 1.0, 3).unwrap();
        assert!((a.item() - b.item()).abs() < 1e-12);
    }

    #[test]
    fn relation_loss_runs_over_twenty_candidates_for_five_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rand_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let rels: Vec<Vec<f64>> = (0..20).map(|_| rand_vec(&mut rng)).collect();
        let txt = bundle_from(rand_vec(&mut rng), vec![rand_vec(&mut rng)], vec![rand_vec(&mut rng)]);
        let img = bundle_from(rand_vec(&mut rng), vec![rand_vec(&mut rng)], rels);
        let mut tape = Tape::inference();
        let loss = relation_loss(&mut tape, &txt, &img, &img, 1.0, 3).unwrap();
        assert!(loss.is_some());
    }

    #[test]
    fn relation_loss_identical_sets_equals_margin() {
        let rels = vec![vec![0.4, 0.1], vec![-0.2, 0.3]];
        let txt = bundle_from(vec![1.0, 0.0], vec![vec![1.0, 0.0]], vec![vec![0.7, -0.3]]);
        let img = bundle_from(vec![1.0, 0.0], vec![vec![1.0, 0.0]], rels);
        let mut tape = Tape::inference();
        let loss = relation_loss(&mut tape, &txt, &img, &img, 1.0, 3).unwrap().unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relation_loss_skips_disabled_channel() {
        let txt = bundle_from(vec![1.0], vec![vec![1.0]], vec![vec![1.0]]);
        let img = bundle_from(vec![1.0], vec![vec![1.0]], vec![]);
        let mut tape = Tape::inference();
        assert!(relation_loss(&mut tape, &txt, &img, &img, 1.0, 3).unwrap().is_none());
    }

    fn toy_batch() -> (Vec<EmbeddingBundle>, Vec<EmbeddingBundle>, Vec<Triplet>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rand_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let mk_img = |rng: &mut ChaCha8Rng| {
            let locs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(rng)).collect();
            let rels: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(rng)).collect();
            bundle_from(rand_vec(rng), locs, rels)
        };
        let mk_txt = |rng: &mut ChaCha8Rng| {
            bundle_from(rand_vec(rng), vec![rand_vec(rng)], vec![rand_vec(rng)])
        };
        let images = vec![mk_img(&mut rng), mk_img(&mut rng)];
        let texts = vec![mk_txt(&mut rng), mk_txt(&mut rng)];
        let triplets = vec![
            Triplet { anchor: 0, neg_text: 1, neg_image: 1 },
            Triplet { anchor: 1, neg_text: 0, neg_image: 0 },
        ];
        (images, texts, triplets)
    }

    #[test]
    fn baseline_mode_equals_global_term_only() {
        let (images, texts, triplets) = toy_batch();
        let cfg = LossConfig { mode: Mode::Baseline, ..Default::default() };
        let mut tape = Tape::inference();
        let (total, breakdown) = total_loss(&mut tape, &triplets, &images, &texts, &cfg).unwrap();
        let lg = global_loss(&mut tape, &triplets, &images, &texts, cfg.margin).unwrap();
        assert!((total.item() - lg.item()).abs() < 1e-12);
        assert_eq!(breakdown.local, 0.0);
        assert_eq!(breakdown.relation, 0.0);
    }

    #[test]
    fn explicit_zero_weights_match_baseline_mode() {
        let (images, texts, triplets) = toy_batch();
        let gated = LossConfig { mode: Mode::Baseline, ..Default::default() };
        let zeroed = LossConfig {
            mode: Mode::Full,
            w_local: 0.0,
            w_relation: 0.0,
            ..Default::default()
        };
        let mut tape = Tape::inference();
        let (a, _) = total_loss(&mut tape, &triplets, &images, &texts, &gated).unwrap();
        let (b, _) = total_loss(&mut tape, &triplets, &images, &texts, &zeroed).unwrap();
        assert_eq!(a.item(), b.item());
    }

    #[test]
    fn all_terms_nonnegative_and_margin_monotone() {
        let (images, texts, triplets) = toy_batch();
        let mut tape = Tape::inference();
        let mut prev = -1.0;
        for margin in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let cfg = LossConfig { margin, ..Default::default() };
            let (total, b) = total_loss(&mut tape, &triplets, &images, &texts, &cfg).unwrap();
            assert!(b.global >= 0.0 && b.local >= 0.0 && b.relation >= 0.0);
            assert!(total.item() >= 0.0);
            assert!(total.item() >= prev, "hinge must not decrease with margin");
            prev = total.item();
        }
    }

    #[test]
    fn zero_weight_config_rejected() {
        let (images, texts, triplets) = toy_batch();
        let cfg = LossConfig {
            w_global: 0.0,
            w_local: 0.0,
            w_relation: 0.0,
            ..Default::default()
        };
        let mut tape = Tape::inference();
        assert!(total_loss(&mut tape, &triplets, &images, &texts, &cfg).is_err());
    }
}
