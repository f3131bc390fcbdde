//! Shared oracles for the integration suites. These re-derive expected
//! values through independent routes (exhaustive sweeps, forward-only
//! finite differences) rather than calling the implementation paths they
//! check.

use metalora::data::Label;
use metalora::metrics::ScoreSet;

/// Brute-force equal error rate: recomputes FAR/FRR at every distinct
/// threshold (plus a sentinel) by a full O(n) scan per threshold, then
/// applies linear interpolation at the first FRR >= FAR crossing. The
/// count ratios and the interpolation rule match the production
/// estimator's definitions, so agreement must be exact.
pub fn eer_bruteforce(scores: &ScoreSet) -> f64 {
    let n_bona = scores
        .records
        .iter()
        .filter(|r| r.label == Label::Bonafide)
        .count();
    let n_spoof = scores.records.len() - n_bona;
    assert!(n_bona > 0 && n_spoof > 0, "oracle needs both classes");

    let mut thresholds: Vec<f64> = scores.records.iter().map(|r| r.score).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(thresholds.last().unwrap() + 1.0);

    let mut points = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let mut spoof_accepted = 0usize;
        let mut bona_rejected = 0usize;
        for r in &scores.records {
            match r.label {
                Label::Spoof if r.score >= t => spoof_accepted += 1,
                Label::Bonafide if r.score < t => bona_rejected += 1,
                _ => {}
            }
        }
        points.push((
            spoof_accepted as f64 / n_spoof as f64,
            bona_rejected as f64 / n_bona as f64,
        ));
    }

    for (i, &(far, frr)) in points.iter().enumerate() {
        if frr >= far {
            if frr == far || i == 0 {
                return far.max(frr);
            }
            let (f0, r0) = points[i - 1];
            let (f1, r1) = (far, frr);
            let u = (f0 - r0) / ((r1 - r0) - (f1 - f0));
            return f0 + u * (f1 - f0);
        }
    }
    unreachable!("sentinel point guarantees a crossing");
}
