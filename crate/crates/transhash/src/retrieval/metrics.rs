//! Retrieval evaluation: mAP@N, precision at top-k, and micro-averaged
//! precision-recall points swept over Hamming radii.

use crate::error::{Error, Result};
use crate::loss::labels_overlap;

use super::{parallel_map, rank, CodeIndex, Neighbor};

/// Relevance pattern of a ranking against one query's labels.
fn relevance(ranking: &[Neighbor], gallery: &CodeIndex, query: &CodeIndex, q: usize) -> Result<Vec<bool>> {
    ranking
        .iter()
        .map(|hit| labels_overlap(query.labels(q), gallery.labels(hit.index)))
        .collect()
}

/// Average precision over the top `n` ranked items.
///
/// `AP@N = (1/R_ret) * sum over relevant positions k <= N of precision@k`,
/// where `R_ret` is the number of relevant items retrieved within the top N
/// (0 relevant retrieved gives AP 0). With that denominator, `AP@N == 1`
/// exactly when the relevant items in the top N form a prefix of the
/// ranking.
pub fn average_precision_at_n(relevance: &[bool], n: usize) -> Result<f64> {
    if relevance.is_empty() {
        return Err(Error::contract("average precision over an empty ranking"));
    }
    if n == 0 {
        return Err(Error::contract("average precision needs n >= 1"));
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (k, &rel) in relevance.iter().take(n).enumerate() {
        if rel {
            hits += 1;
            precision_sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Ok(0.0);
    }
    Ok(precision_sum / hits as f64)
}

/// Mean of per-query AP@N over all queries in `queries`.
pub fn mean_ap(queries: &CodeIndex, gallery: &CodeIndex, n: usize) -> Result<f64> {
    check_compatible(queries, gallery)?;
    let aps = parallel_map(queries.len(), |q| -> Result<f64> {
        let ranking = rank(queries.code(q), gallery)?;
        let rel = relevance(&ranking, gallery, queries, q)?;
        average_precision_at_n(&rel, n)
    });
    let mut total = 0.0;
    for ap in aps {
        total += ap?;
    }
    Ok(total / queries.len() as f64)
}

/// Mean over queries of the fraction of relevant items in the top k, for
/// each requested k.
pub fn precision_at_topk(queries: &CodeIndex, gallery: &CodeIndex, ks: &[usize]) -> Result<Vec<f64>> {
    check_compatible(queries, gallery)?;
    for &k in ks {
        if k == 0 || k > gallery.len() {
            return Err(Error::contract(format!(
                "precision@k with k={k} outside the gallery size {}",
                gallery.len()
            )));
        }
    }
    let per_query = parallel_map(queries.len(), |q| -> Result<Vec<f64>> {
        let ranking = rank(queries.code(q), gallery)?;
        let rel = relevance(&ranking, gallery, queries, q)?;
        Ok(ks
            .iter()
            .map(|&k| rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
            .collect())
    });
    let mut sums = vec![0.0; ks.len()];
    for row in per_query {
        for (s, v) in sums.iter_mut().zip(row?) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / queries.len() as f64).collect())
}

/// One precision-recall point at a Hamming radius threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub radius: u32,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points for radii 0..=B, micro-averaged over queries:
/// counts of retrieved and relevant-retrieved items are summed across
/// queries before the ratios. Thresholds that retrieve nothing report
/// precision 1 (the empty-retrieval convention).
pub fn precision_recall_curve(queries: &CodeIndex, gallery: &CodeIndex) -> Result<Vec<PrPoint>> {
    check_compatible(queries, gallery)?;
    let bits = gallery.bits();

    // per query: distance histogram split by relevance
    let per_query = parallel_map(queries.len(), |q| -> Result<(Vec<u64>, Vec<u64>, u64)> {
        let mut retrieved = vec![0u64; bits + 1];
        let mut relevant = vec![0u64; bits + 1];
        let mut total_relevant = 0u64;
        for i in 0..gallery.len() {
            let d = queries.code(q).hamming(gallery.code(i))? as usize;
            retrieved[d] += 1;
            if labels_overlap(queries.labels(q), gallery.labels(i))? {
                relevant[d] += 1;
                total_relevant += 1;
            }
        }
        Ok((retrieved, relevant, total_relevant))
    });

    let mut retrieved = vec![0u64; bits + 1];
    let mut relevant = vec![0u64; bits + 1];
    let mut total_relevant = 0u64;
    for row in per_query {
        let (ret, rel, tot) = row?;
        for (a, b) in retrieved.iter_mut().zip(ret) {
            *a += b;
        }
        for (a, b) in relevant.iter_mut().zip(rel) {
            *a += b;
        }
        total_relevant += tot;
    }
    if total_relevant == 0 {
        return Err(Error::contract(
            "precision-recall curve: no query has any relevant gallery item",
        ));
    }

    let mut points = Vec::with_capacity(bits + 1);
    let mut ret_cum = 0u64;
    let mut rel_cum = 0u64;
    for radius in 0..=bits {
        ret_cum += retrieved[radius];
        rel_cum += relevant[radius];
        let precision = if ret_cum == 0 {
            1.0
        } else {
            rel_cum as f64 / ret_cum as f64
        };
        points.push(PrPoint {
            radius: radius as u32,
            recall: rel_cum as f64 / total_relevant as f64,
            precision,
        });
    }
    Ok(points)
}

fn check_compatible(queries: &CodeIndex, gallery: &CodeIndex) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::contract("no queries"));
    }
    if gallery.is_empty() {
        return Err(Error::contract("empty gallery"));
    }
    if queries.bits() != gallery.bits() {
        return Err(Error::contract(format!(
            "query codes are {}-bit but the gallery is {}-bit",
            queries.bits(),
            gallery.bits()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSet;
    use crate::retrieval::HashCode;

    fn code(bits: &[i8]) -> HashCode {
        HashCode::from_signs(&bits.iter().map(|&b| b as f64).collect::<Vec<_>>()).unwrap()
    }

    fn index_of(items: &[(u64, u32, &[i8])]) -> CodeIndex {
        CodeIndex::build(
            items[0].2.len(),
            items.iter().map(|&(id, _, _)| id).collect(),
            items.iter().map(|&(_, l, _)| LabelSet::from([l])).collect(),
            items.iter().map(|&(_, _, c)| code(c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(
            average_precision_at_n(&[true, true, false, false], 4).unwrap(),
            1.0
        );
        assert_eq!(average_precision_at_n(&[false, true], 2).unwrap(), 0.5);
        assert_eq!(average_precision_at_n(&[false, false, false], 3).unwrap(), 0.0);
        // truncation at n hides later relevant items
        assert_eq!(average_precision_at_n(&[false, true, true], 1).unwrap(), 0.0);
        assert!(average_precision_at_n(&[], 3).is_err());
    }

    #[test]
    fn ap_is_one_iff_relevant_prefix() {
        // relevant items at a prefix: AP 1 even when more relevant exist past n
        assert_eq!(
            average_precision_at_n(&[true, true, false, false, true], 4).unwrap(),
            1.0
        );
        // non-prefix relevant: AP < 1
        let ap = average_precision_at_n(&[true, false, true, false], 4).unwrap();
        assert!(ap < 1.0);
    }

    #[test]
    fn mean_ap_perfect_retrieval_is_one() {
        let gallery = index_of(&[
            (0, 0, &[1, 1, 1, 1]),
            (1, 0, &[1, 1, 1, -1]),
            (2, 1, &[-1, -1, -1, -1]),
            (3, 1, &[-1, -1, -1, 1]),
        ]);
        // queries identical to their class codes retrieve their class first
        let queries = index_of(&[(10, 0, &[1, 1, 1, 1]), (11, 1, &[-1, -1, -1, -1])]);
        let map = mean_ap(&queries, &gallery, 4).unwrap();
        assert!((map - 1.0).abs() < 1e-12);
        // single query equals its own AP
        let one = index_of(&[(10, 0, &[1, 1, 1, 1])]);
        let single = mean_ap(&one, &gallery, 4).unwrap();
        let ranking = rank(one.code(0), &gallery).unwrap();
        let rel = super::relevance(&ranking, &gallery, &one, 0).unwrap();
        assert_eq!(single, average_precision_at_n(&rel, 4).unwrap());
    }

    #[test]
    fn precision_topk_hand_case() {
        let gallery = index_of(&[
            (0, 0, &[1, 1, 1, 1]),
            (1, 1, &[1, 1, 1, -1]),
            (2, 0, &[1, 1, -1, -1]),
            (3, 1, &[-1, -1, -1, -1]),
        ]);
        let queries = index_of(&[(9, 0, &[1, 1, 1, 1])]);
        // ranking: ids 0 (d0), 1 (d1), 2 (d2), 3 (d4); relevance 1,0,1,0
        let ps = precision_at_topk(&queries, &gallery, &[1, 2, 3, 4]).unwrap();
        assert_eq!(ps, vec![1.0, 0.5, 2.0 / 3.0, 0.5]);
        assert!(precision_at_topk(&queries, &gallery, &[5]).is_err());
        assert!(precision_at_topk(&queries, &gallery, &[0]).is_err());
    }

    #[test]
    fn pr_curve_perfect_codes() {
        let gallery = index_of(&[
            (0, 0, &[1, 1, 1, 1]),
            (1, 0, &[1, 1, 1, 1]),
            (2, 1, &[-1, -1, -1, -1]),
        ]);
        let queries = index_of(&[(9, 0, &[1, 1, 1, 1])]);
        let points = precision_recall_curve(&queries, &gallery).unwrap();
        assert_eq!(points.len(), 5);
        // radius 0 retrieves both relevant items: recall 1, precision 1
        assert_eq!(points[0].recall, 1.0);
        assert_eq!(points[0].precision, 1.0);
        // radius 4 retrieves everything: precision 2/3
        assert!((points[4].precision - 2.0 / 3.0).abs() < 1e-12);
        for w in points.windows(2) {
            assert!(w[0].recall <= w[1].recall, "recall must be nondecreasing");
        }
    }

    #[test]
    fn pr_curve_hand_computed() {
        // query 1111; gallery distances: 0 (rel), 1 (irrel), 2 (rel), 4 (irrel)
        let gallery = index_of(&[
            (0, 0, &[1, 1, 1, 1]),
            (1, 1, &[1, 1, 1, -1]),
            (2, 0, &[1, 1, -1, -1]),
            (3, 1, &[-1, -1, -1, -1]),
        ]);
        let queries = index_of(&[(9, 0, &[1, 1, 1, 1])]);
        let points = precision_recall_curve(&queries, &gallery).unwrap();
        let expect = [
            (0u32, 0.5, 1.0),
            (1, 0.5, 0.5),
            (2, 1.0, 2.0 / 3.0),
            (3, 1.0, 2.0 / 3.0),
            (4, 1.0, 0.5),
        ];
        for (p, (radius, recall, precision)) in points.iter().zip(expect) {
            assert_eq!(p.radius, radius);
            assert!((p.recall - recall).abs() < 1e-12, "radius {radius}");
            assert!((p.precision - precision).abs() < 1e-12, "radius {radius}");
        }
    }

    #[test]
    fn multi_label_relevance_uses_any_overlap() {
        let gallery = CodeIndex::build(
            4,
            vec![0, 1],
            vec![
                [3u32, 7].into_iter().collect(),
                [9u32].into_iter().collect(),
            ],
            vec![code(&[1, 1, 1, 1]), code(&[1, 1, 1, -1])],
        )
        .unwrap();
        // query shares label 7 with item 0 only
        let queries = CodeIndex::build(
            4,
            vec![9],
            vec![[7u32, 20].into_iter().collect()],
            vec![code(&[1, 1, 1, 1])],
        )
        .unwrap();
        let map = mean_ap(&queries, &gallery, 2).unwrap();
        assert_eq!(map, 1.0);
        let p = precision_at_topk(&queries, &gallery, &[2]).unwrap()[0];
        assert_eq!(p, 0.5);
    }

    #[test]
    fn mismatched_widths_refuse() {
        let gallery = index_of(&[(0, 0, &[1, 1, 1, 1])]);
        let queries = index_of(&[(9, 0, &[1, 1])]);
        assert!(mean_ap(&queries, &gallery, 1).is_err());
    }
}
