//! Multi-label evaluation: Precision@K, micro/macro F1, micro/macro AUC.
//!
//! Inputs are dense per-record score rows and gold indicator rows over one
//! level's code list. Macro averages exclude codes that cannot support the
//! metric (no gold positive for F1, single-class for AUC); exclusion counts
//! are surfaced, never silently dropped.

use crate::parallel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Micro,
    Macro,
}

/// Ranks for a value sequence with midrank tie handling, 1-based.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn check_dims(scores: &[Vec<f64>], gold: &[Vec<bool>]) -> Result<usize> {
    if scores.len() != gold.len() || scores.is_empty() {
        return Err(Error::Contract(format!(
            "{} score rows vs {} gold rows",
            scores.len(),
            gold.len()
        )));
    }
    let codes = scores[0].len();
    if codes == 0 {
        return Err(Error::Contract("zero codes".into()));
    }
    for (s, g) in scores.iter().zip(gold) {
        if s.len() != codes || g.len() != codes {
            return Err(Error::Contract("ragged score/gold rows".into()));
        }
    }
    Ok(codes)
}

/// Mean over records of `|top-K ∩ gold| / K`; ties break toward the lower
/// code index. Returns the value and whether K was clamped to the code count.
pub fn precision_at_k(
    scores: &[Vec<f64>],
    gold: &[Vec<bool>],
    k: usize,
) -> Result<(f64, bool)> {
    let codes = check_dims(scores, gold)?;
    if k == 0 {
        return Err(Error::Contract("K must be positive".into()));
    }
    let clamped = k > codes;
    let k_eff = k.min(codes);
    let per_record = parallel::ordered_map_indices(scores.len(), |r| {
        let row = &scores[r];
        let mut idx: Vec<usize> = (0..codes).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let hits = idx[..k_eff].iter().filter(|&&c| gold[r][c]).count();
        hits as f64 / k_eff as f64
    });
    Ok((per_record.iter().sum::<f64>() / scores.len() as f64, clamped))
}

#[derive(Debug, Clone, Copy)]
pub struct MetricOutcome {
    pub value: f64,
    /// Codes excluded from a macro average.
    pub excluded: usize,
}

/// Threshold F1. Micro pools all (record, code) decisions; macro averages
/// per-code F1 over codes with at least one gold positive.
pub fn f1(scores: &[Vec<f64>], gold: &[Vec<bool>], threshold: f64, mode: Mode) -> Result<MetricOutcome> {
    let codes = check_dims(scores, gold)?;
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0,1)")));
    }
    let f1_of = |tp: usize, fp: usize, fn_: usize| -> f64 {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    match mode {
        Mode::Micro => {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (s, g) in scores.iter().zip(gold) {
                for (v, &y) in s.iter().zip(g) {
                    let pred = *v >= threshold;
                    match (pred, y) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
            Ok(MetricOutcome { value: f1_of(tp, fp, fn_), excluded: 0 })
        }
        Mode::Macro => {
            let per_code = parallel::ordered_map_indices(codes, |c| {
                let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
                let mut has_pos = false;
                for (s, g) in scores.iter().zip(gold) {
                    let pred = s[c] >= threshold;
                    if g[c] {
                        has_pos = true;
                    }
                    match (pred, g[c]) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
                if has_pos {
                    Some(f1_of(tp, fp, fn_))
                } else {
                    None
                }
            });
            let included: Vec<f64> = per_code.iter().flatten().copied().collect();
            let excluded = codes - included.len();
            if included.is_empty() {
                return Err(Error::UndefinedMetric(
                    "macro F1: no code has a gold positive".into(),
                ));
            }
            Ok(MetricOutcome {
                value: included.iter().sum::<f64>() / included.len() as f64,
                excluded,
            })
        }
    }
}

/// ROC-AUC by the rank statistic with midrank ties. Micro pools all
/// (record, code) pairs; macro averages per-code AUC over codes that have
/// both a positive and a negative.
pub fn auc(scores: &[Vec<f64>], gold: &[Vec<bool>], mode: Mode) -> Result<MetricOutcome> {
    let codes = check_dims(scores, gold)?;
    let rank_auc = |vals: &[f64], labels: &[bool]| -> Option<f64> {
        let n_pos = labels.iter().filter(|&&y| y).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return None;
        }
        let ranks = midranks(vals);
        let r_pos: f64 =
            ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
        Some((r_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
    };
    match mode {
        Mode::Micro => {
            let mut vals = Vec::with_capacity(scores.len() * codes);
            let mut labels = Vec::with_capacity(scores.len() * codes);
            for (s, g) in scores.iter().zip(gold) {
                vals.extend_from_slice(s);
                labels.extend_from_slice(g);
            }
            let value = rank_auc(&vals, &labels).ok_or_else(|| {
                Error::UndefinedMetric("micro AUC: needs both classes".into())
            })?;
            Ok(MetricOutcome { value, excluded: 0 })
        }
        Mode::Macro => {
            let per_code = parallel::ordered_map_indices(codes, |c| {
                let vals: Vec<f64> = scores.iter().map(|s| s[c]).collect();
                let labels: Vec<bool> = gold.iter().map(|g| g[c]).collect();
                rank_auc(&vals, &labels)
            });
            let included: Vec<f64> = per_code.iter().flatten().copied().collect();
            let excluded = codes - included.len();
            if included.is_empty() {
                return Err(Error::UndefinedMetric(
                    "macro AUC: no code has both a positive and a negative".into(),
                ));
            }
            Ok(MetricOutcome {
                value: included.iter().sum::<f64>() / included.len() as f64,
                excluded,
            })
        }
    }
}

/// One hierarchy level's evaluation summary.
#[derive(Debug, Clone)]
pub struct LevelMetrics {
    pub level: usize,
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// `(K, value, clamped)` triples.
    pub p_at: Vec<(usize, f64, bool)>,
    pub f1_excluded: usize,
    pub auc_excluded: usize,
}

pub const REPORT_KS: [usize; 3] = [5, 8, 15];

/// Compute every reported metric for one level.
pub fn evaluate_level(
    level: usize,
    scores: &[Vec<f64>],
    gold: &[Vec<bool>],
    threshold: f64,
) -> Result<LevelMetrics> {
    let macro_f1 = f1(scores, gold, threshold, Mode::Macro)?;
    let micro_f1 = f1(scores, gold, threshold, Mode::Micro)?;
    let macro_auc = auc(scores, gold, Mode::Macro)?;
    let micro_auc = auc(scores, gold, Mode::Micro)?;
    let mut p_at = Vec::new();
    for k in REPORT_KS {
        let (v, clamped) = precision_at_k(scores, gold, k)?;
        p_at.push((k, v, clamped));
    }
    Ok(LevelMetrics {
        level,
        macro_auc: macro_auc.value,
        micro_auc: micro_auc.value,
        macro_f1: macro_f1.value,
        micro_f1: micro_f1.value,
        p_at,
        f1_excluded: macro_f1.excluded,
        auc_excluded: macro_auc.excluded,
    })
}

/// Full evaluation report, one block per level.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub levels: Vec<LevelMetrics>,
}

impl EvalReport {
    /// TSV rows, one per level.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "level\tmacro_auc\tmicro_auc\tmacro_f1\tmicro_f1\tp@5\tp@8\tp@15\tf1_excluded\tauc_excluded\n",
        );
        for m in &self.levels {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
                m.level,
                m.macro_auc,
                m.micro_auc,
                m.macro_f1,
                m.micro_f1,
                m.p_at[0].1,
                m.p_at[1].1,
                m.p_at[2].1,
                m.f1_excluded,
                m.auc_excluded
            ));
        }
        out
    }

    /// Human-readable block: AUC / F1 / P@K columns per level.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str("level |  AUC macro  AUC micro |  F1 macro   F1 micro |      P@5      P@8     P@15 | excl F1/AUC\n");
        out.push_str("------+------------------------+-----------------------+-----------------------------+------------\n");
        for m in &self.levels {
            out.push_str(&format!(
                "{:>5} | {:>10.4} {:>10.4} | {:>9.4} {:>10.4} | {:>8.4} {:>8.4} {:>8.4} | {}/{}\n",
                m.level,
                m.macro_auc,
                m.micro_auc,
                m.macro_f1,
                m.micro_f1,
                m.p_at[0].1,
                m.p_at[1].1,
                m.p_at[2].1,
                m.f1_excluded,
                m.auc_excluded,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_fixture(
        rng: &mut StdRng,
        records: usize,
        codes: usize,
    ) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        let scores: Vec<Vec<f64>> = (0..records)
            .map(|_| {
                (0..codes)
                    .map(|_| {
                        // Coarse grid so score ties actually occur.
                        (rng.random_range(0..20) as f64) / 20.0
                    })
                    .collect()
            })
            .collect();
        let gold: Vec<Vec<bool>> =
            (0..records).map(|_| (0..codes).map(|_| rng.random::<f64>() < 0.3).collect()).collect();
        (scores, gold)
    }

    #[test]
    fn p_at_k_hand_example() {
        // gold {a,b,c}, ranking [a,x,b,y,z], K=5 → 2 hits among top 5 → 0.4.
        let scores = vec![vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.1, 0.05, 0.01]];
        let gold = vec![vec![true, false, true, false, false, true, false, false]];
        let (v, clamped) = precision_at_k(&scores, &gold, 5).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert!(!clamped);
    }

    #[test]
    fn p_at_k_all_gold_is_one() {
        let scores = vec![vec![0.1, 0.9, 0.5, 0.7]];
        let gold = vec![vec![true; 4]];
        for k in 1..=4 {
            let (v, _) = precision_at_k(&scores, &gold, k).unwrap();
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn p_at_k_clamps_and_warns() {
        let scores = vec![vec![0.3, 0.6]];
        let gold = vec![vec![true, true]];
        let (v, clamped) = precision_at_k(&scores, &gold, 15).unwrap();
        assert_eq!(v, 1.0);
        assert!(clamped);
    }

    #[test]
    fn p_at_k_matches_bruteforce_on_100_fixtures() {
        let mut rng = StdRng::seed_from_u64(71);
        for trial in 0..100 {
            let records = rng.random_range(1..8);
            let codes = rng.random_range(2..10);
            let (scores, gold) = random_fixture(&mut rng, records, codes);
            let k = rng.random_range(1..=codes);
            let (got, _) = precision_at_k(&scores, &gold, k).unwrap();

            // Oracle: repeated max extraction with index tie-break.
            let mut total = 0.0;
            for r in 0..records {
                let mut remaining: Vec<usize> = (0..codes).collect();
                let mut hits = 0;
                for _ in 0..k {
                    let mut best = 0;
                    for (pos, &c) in remaining.iter().enumerate() {
                        let better = scores[r][c] > scores[r][remaining[best]]
                            || (scores[r][c] == scores[r][remaining[best]]
                                && c < remaining[best]);
                        if better {
                            best = pos;
                        }
                    }
                    let c = remaining.remove(best);
                    if gold[r][c] {
                        hits += 1;
                    }
                }
                total += hits as f64 / k as f64;
            }
            let want = total / records as f64;
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn p_at_k_invariant_under_monotone_transform() {
        let mut rng = StdRng::seed_from_u64(72);
        for _ in 0..20 {
            let (scores, gold) = random_fixture(&mut rng, 5, 7);
            let transformed: Vec<Vec<f64>> = scores
                .iter()
                .map(|row| row.iter().map(|&s| (3.0 * s + 1.0).powi(3)).collect())
                .collect();
            for k in [1, 3, 7] {
                let (a, _) = precision_at_k(&scores, &gold, k).unwrap();
                let (b, _) = precision_at_k(&transformed, &gold, k).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn f1_perfect_predictions() {
        let scores = vec![vec![0.9, 0.1, 0.8], vec![0.2, 0.95, 0.1]];
        let gold = vec![vec![true, false, true], vec![false, true, false]];
        assert_eq!(f1(&scores, &gold, 0.5, Mode::Micro).unwrap().value, 1.0);
        assert_eq!(f1(&scores, &gold, 0.5, Mode::Macro).unwrap().value, 1.0);
    }

    #[test]
    fn f1_macro_excludes_codes_without_gold_positives() {
        // Code 0: always predicted, never gold → excluded from macro.
        // Code 1: perfectly predicted → F1 1.0.
        let scores = vec![vec![0.9, 0.9], vec![0.9, 0.1]];
        let gold = vec![vec![false, true], vec![false, false]];
        let out = f1(&scores, &gold, 0.5, Mode::Macro).unwrap();
        assert_eq!(out.value, 1.0);
        assert_eq!(out.excluded, 1);
        // Micro still sees code 0's false positives.
        let micro = f1(&scores, &gold, 0.5, Mode::Micro).unwrap();
        assert!(micro.value < 1.0);
    }

    #[test]
    fn f1_micro_matches_pooled_confusion_oracle() {
        let mut rng = StdRng::seed_from_u64(73);
        for trial in 0..100 {
            let records = rng.random_range(1..8);
            let codes = rng.random_range(1..10);
            let (scores, gold) = random_fixture(&mut rng, records, codes);
            let got = f1(&scores, &gold, 0.5, Mode::Micro).unwrap().value;

            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for r in 0..records {
                for c in 0..codes {
                    let pred = scores[r][c] >= 0.5;
                    if pred && gold[r][c] {
                        tp += 1.0;
                    }
                    if pred && !gold[r][c] {
                        fp += 1.0;
                    }
                    if !pred && gold[r][c] {
                        fn_ += 1.0;
                    }
                }
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let want = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            assert!((got - want).abs() < 1e-12, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn auc_perfect_separation_and_ties() {
        let scores = vec![vec![0.9], vec![0.1]];
        let gold = vec![vec![true], vec![false]];
        assert_eq!(auc(&scores, &gold, Mode::Micro).unwrap().value, 1.0);

        let scores = vec![vec![0.4], vec![0.4], vec![0.4], vec![0.4]];
        let gold = vec![vec![true], vec![false], vec![true], vec![false]];
        assert_eq!(auc(&scores, &gold, Mode::Micro).unwrap().value, 0.5);
    }

    #[test]
    fn auc_matches_pairwise_oracle_within_1e12() {
        let mut rng = StdRng::seed_from_u64(74);
        for trial in 0..100 {
            let records = rng.random_range(2..12);
            let codes = rng.random_range(1..6);
            let (scores, mut gold) = random_fixture(&mut rng, records, codes);
            // Force both classes to exist somewhere.
            gold[0][0] = true;
            let last = records - 1;
            gold[last][0] = false;

            let got = auc(&scores, &gold, Mode::Micro).unwrap().value;

            // O(n²) oracle over pooled (record, code) pairs.
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for r in 0..records {
                for c in 0..codes {
                    if gold[r][c] {
                        pos.push(scores[r][c]);
                    } else {
                        neg.push(scores[r][c]);
                    }
                }
            }
            let mut acc = 0.0;
            for &p in &pos {
                for &n in &neg {
                    acc += if p > n {
                        1.0
                    } else if p == n {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            let want = acc / (pos.len() as f64 * neg.len() as f64);
            assert!((got - want).abs() < 1e-12, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn auc_macro_undefined_when_no_code_has_both_classes() {
        let scores = vec![vec![0.9], vec![0.8]];
        let gold = vec![vec![true], vec![true]];
        assert!(matches!(
            auc(&scores, &gold, Mode::Macro),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn micro_metrics_invariant_to_code_reordering() {
        let mut rng = StdRng::seed_from_u64(75);
        let (scores, mut gold) = random_fixture(&mut rng, 6, 5);
        gold[0][4] = true;
        gold[1][4] = false;
        let perm = [4usize, 2, 0, 3, 1];
        let scores_p: Vec<Vec<f64>> =
            scores.iter().map(|r| perm.iter().map(|&c| r[c]).collect()).collect();
        let gold_p: Vec<Vec<bool>> =
            gold.iter().map(|r| perm.iter().map(|&c| r[c]).collect()).collect();
        assert_eq!(
            f1(&scores, &gold, 0.5, Mode::Micro).unwrap().value,
            f1(&scores_p, &gold_p, 0.5, Mode::Micro).unwrap().value
        );
        assert!(
            (auc(&scores, &gold, Mode::Micro).unwrap().value
                - auc(&scores_p, &gold_p, Mode::Micro).unwrap().value)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn macro_metrics_invariant_to_record_reordering() {
        let mut rng = StdRng::seed_from_u64(76);
        let (scores, mut gold) = random_fixture(&mut rng, 6, 4);
        for c in 0..4 {
            gold[0][c] = true;
            gold[5][c] = false;
        }
        let perm = [5usize, 3, 0, 4, 2, 1];
        let scores_p: Vec<Vec<f64>> = perm.iter().map(|&r| scores[r].clone()).collect();
        let gold_p: Vec<Vec<bool>> = perm.iter().map(|&r| gold[r].clone()).collect();
        assert!(
            (f1(&scores, &gold, 0.5, Mode::Macro).unwrap().value
                - f1(&scores_p, &gold_p, 0.5, Mode::Macro).unwrap().value)
                .abs()
                < 1e-15
        );
        assert!(
            (auc(&scores, &gold, Mode::Macro).unwrap().value
                - auc(&scores_p, &gold_p, Mode::Macro).unwrap().value)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn report_formats_cover_all_levels() {
        let scores = vec![vec![0.9, 0.2], vec![0.3, 0.8]];
        let gold = vec![vec![true, false], vec![false, true]];
        let level = evaluate_level(1, &scores, &gold, 0.5).unwrap();
        let report = EvalReport { levels: vec![level] };
        let tsv = report.to_tsv();
        assert!(tsv.lines().count() == 2);
        let table = report.format_table();
        assert!(table.contains("AUC macro"));
    }
}
