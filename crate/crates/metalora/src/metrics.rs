//! Equal-error-rate computation, DET curves, and multi-seed aggregation.
//!
//! Score convention, used everywhere in this crate: a score is
//! log P(bonafide) - log P(spoof), so higher means more bonafide, and a
//! trial is accepted (called bonafide) when its score is >= the
//! threshold. FAR is the fraction of spoof trials accepted, FRR the
//! fraction of bonafide trials rejected.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::data::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub example_id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    SingleClass,
    NonFiniteScore { example_id: String },
    TooFewSeeds { got: usize },
    Io(String),
    Parse { line: usize, message: String },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::SingleClass => {
                write!(f, "score set must contain both bonafide and spoof trials")
            }
            MetricsError::NonFiniteScore { example_id } => {
                write!(f, "non-finite score for example `{example_id}`")
            }
            MetricsError::TooFewSeeds { got } => {
                write!(f, "seed aggregation needs at least 2 values, got {got}")
            }
            MetricsError::Io(e) => write!(f, "score file i/o: {e}"),
            MetricsError::Parse { line, message } => {
                write!(f, "score file line {line}: {message}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, example_id: impl Into<String>, score: f64, label: Label) {
        self.records.push(ScoreRecord {
            example_id: example_id.into(),
            score,
            label,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if let Some(r) = self.records.iter().find(|r| !r.score.is_finite()) {
            return Err(MetricsError::NonFiniteScore {
                example_id: r.example_id.clone(),
            });
        }
        let n_bona = self.records.iter().filter(|r| r.label == Label::Bonafide).count();
        if n_bona == 0 || n_bona == self.records.len() {
            return Err(MetricsError::SingleClass);
        }
        Ok(())
    }

    /// Write as line-delimited `example_id <TAB> score <TAB> label`.
    pub fn write_file(&self, path: &Path) -> Result<(), MetricsError> {
        let file = std::fs::File::create(path).map_err(|e| MetricsError::Io(e.to_string()))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}", r.example_id, r.score, r.label.as_int())
                .map_err(|e| MetricsError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<ScoreSet, MetricsError> {
        let file = std::fs::File::open(path).map_err(|e| MetricsError::Io(e.to_string()))?;
        let reader = std::io::BufReader::new(file);
        let mut set = ScoreSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| MetricsError::Io(e.to_string()))?;
            let mut parts = line.split('\t');
            let id = parts.next().unwrap_or_default().to_string();
            let score: f64 = parts
                .next()
                .ok_or_else(|| MetricsError::Parse {
                    line: i + 1,
                    message: "missing score column".into(),
                })?
                .parse()
                .map_err(|e| MetricsError::Parse {
                    line: i + 1,
                    message: format!("bad score: {e}"),
                })?;
            let label_txt = parts.next().ok_or_else(|| MetricsError::Parse {
                line: i + 1,
                message: "missing label column".into(),
            })?;
            let label = Label::from_str_int(label_txt).map_err(|message| MetricsError::Parse {
                line: i + 1,
                message,
            })?;
            set.push(id, score, label);
        }
        Ok(set)
    }
}

/// One operating point of a DET sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub probit_far: f64,
    pub probit_frr: f64,
}

#[derive(Debug, Clone)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Raw operating points: one per distinct threshold (ascending), plus a
/// sentinel above the maximum so the (FAR 0, FRR 1) endpoint is included.
/// FAR/FRR are exact count ratios.
fn sweep_points(scores: &ScoreSet) -> Vec<(f64, f64, f64)> {
    let n_bona = scores.records.iter().filter(|r| r.label == Label::Bonafide).count();
    let n_spoof = scores.records.len() - n_bona;

    let mut thresholds: Vec<f64> = scores.records.iter().map(|r| r.score).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let sentinel = thresholds.last().unwrap() + 1.0;
    thresholds.push(sentinel);

    // Sorted copies for counting by binary search.
    let mut bona: Vec<f64> = scores
        .records
        .iter()
        .filter(|r| r.label == Label::Bonafide)
        .map(|r| r.score)
        .collect();
    bona.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut spoof: Vec<f64> = scores
        .records
        .iter()
        .filter(|r| r.label == Label::Spoof)
        .map(|r| r.score)
        .collect();
    spoof.sort_by(|a, b| a.partial_cmp(b).unwrap());

    thresholds
        .into_iter()
        .map(|t| {
            let spoof_accepted = n_spoof - spoof.partition_point(|&s| s < t);
            let bona_rejected = bona.partition_point(|&s| s < t);
            (
                t,
                spoof_accepted as f64 / n_spoof as f64,
                bona_rejected as f64 / n_bona as f64,
            )
        })
        .collect()
}

/// Equal error rate: the value where FAR and FRR cross as the threshold
/// sweeps, with linear interpolation between adjacent operating points
/// when they do not coincide exactly. Also returns the crossing
/// threshold.
pub fn eer(scores: &ScoreSet) -> Result<EerResult, MetricsError> {
    scores.validate()?;
    let pts = sweep_points(scores);
    Ok(crossing_of(&pts))
}

/// Shared crossing rule for the sweep and for curve consistency checks.
fn crossing_of(pts: &[(f64, f64, f64)]) -> EerResult {
    for (i, &(t, far, frr)) in pts.iter().enumerate() {
        if frr >= far {
            if frr == far || i == 0 {
                return EerResult {
                    eer: far.max(frr),
                    threshold: t,
                };
            }
            let (t0, f0, r0) = pts[i - 1];
            let (t1, f1, r1) = (t, far, frr);
            let denom = (r1 - r0) - (f1 - f0);
            let u = (f0 - r0) / denom;
            return EerResult {
                eer: f0 + u * (f1 - f0),
                threshold: t0 + u * (t1 - t0),
            };
        }
    }
    // FRR never reached FAR; the sentinel point (FAR 0, FRR 1) makes this
    // unreachable for non-empty two-class input.
    unreachable!("DET sweep has no crossing");
}

/// Inverse standard-normal CDF (Acklam's rational approximation,
/// |relative error| < ~1.2e-9), with inputs clamped to
/// [1e-6, 1 - 1e-6].
pub fn probit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// DET sweep over all distinct thresholds. Probit coordinates are always
/// filled in; `probit` only controls whether downstream exports use them.
pub fn det_curve(scores: &ScoreSet) -> Result<DetCurve, MetricsError> {
    scores.validate()?;
    let points = sweep_points(scores)
        .into_iter()
        .map(|(threshold, far, frr)| DetPoint {
            threshold,
            far,
            frr,
            probit_far: probit(far),
            probit_frr: probit(frr),
        })
        .collect();
    Ok(DetCurve { points })
}

impl DetCurve {
    /// FAR = FRR crossing of the stored operating points; must agree with
    /// [`eer`] on the same score set.
    pub fn eer_crossing(&self) -> EerResult {
        let pts: Vec<(f64, f64, f64)> = self
            .points
            .iter()
            .map(|p| (p.threshold, p.far, p.frr))
            .collect();
        crossing_of(&pts)
    }

    /// Least-squares line through the probit-space points with both error
    /// rates inside [0.01, 0.99] (the operating region, away from clamped
    /// tails). Returns (slope, intercept, rms residual).
    pub fn probit_line_fit(&self) -> Option<(f64, f64, f64)> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.far > 0.01 && p.far < 0.99 && p.frr > 0.01 && p.frr < 0.99)
            .map(|p| (p.probit_far, p.probit_frr))
            .collect();
        if pts.len() < 3 {
            return None;
        }
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        if denom.abs() < 1e-12 {
            return None;
        }
        let slope = (n * sxy - sx * sy) / denom;
        let intercept = (sy - slope * sx) / n;
        let rms = (pts
            .iter()
            .map(|&(x, y)| {
                let e = y - (slope * x + intercept);
                e * e
            })
            .sum::<f64>()
            / n)
            .sqrt();
        Some((slope, intercept, rms))
    }

    /// Export as a text table: threshold, FAR, FRR, probit(FAR),
    /// probit(FRR), tab-separated with a header row.
    pub fn write_file(&self, path: &Path) -> Result<(), MetricsError> {
        let file = std::fs::File::create(path).map_err(|e| MetricsError::Io(e.to_string()))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "threshold\tfar\tfrr\tprobit_far\tprobit_frr")
            .map_err(|e| MetricsError::Io(e.to_string()))?;
        for p in &self.points {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                p.threshold, p.far, p.frr, p.probit_far, p.probit_frr
            )
            .map_err(|e| MetricsError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

/// Mean and sample (n-1) standard deviation over per-seed metric values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedAggregate, MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::TooFewSeeds { got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(SeedAggregate {
        values: values.to_vec(),
        mean,
        std: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn set_from(bona: &[f64], spoof: &[f64]) -> ScoreSet {
        let mut s = ScoreSet::new();
        for (i, &x) in bona.iter().enumerate() {
            s.push(format!("b{i}"), x, Label::Bonafide);
        }
        for (i, &x) in spoof.iter().enumerate() {
            s.push(format!("s{i}"), x, Label::Spoof);
        }
        s
    }

    #[test]
    fn perfect_separation_gives_zero() {
        let s = set_from(&[0.9, 0.8, 0.7], &[0.6, 0.4]);
        let r = eer(&s).unwrap();
        assert_eq!(r.eer, 0.0);
    }

    #[test]
    fn interleaved_scores_give_one_third() {
        let s = set_from(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]);
        let r = eer(&s).unwrap();
        assert!((r.eer - 1.0 / 3.0).abs() < 1e-12, "eer = {}", r.eer);
    }

    #[test]
    fn eer_is_symmetric_under_label_flip_with_negated_scores() {
        let s = set_from(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]);
        let flipped = set_from(&[-0.7, -0.2, -0.1], &[-0.9, -0.8, -0.3]);
        assert!((eer(&s).unwrap().eer - eer(&flipped).unwrap().eer).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = set_from(&[0.9, 0.8], &[]);
        assert_eq!(eer(&s).unwrap_err(), MetricsError::SingleClass);
    }

    #[test]
    fn det_endpoints_present() {
        let s = set_from(&[0.9, 0.1], &[0.5, 0.2]);
        let c = det_curve(&s).unwrap();
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((first.far, first.frr), (1.0, 0.0));
        assert_eq!((last.far, last.frr), (0.0, 1.0));
    }

    #[test]
    fn det_crossing_matches_eer() {
        let s = set_from(&[0.9, 0.8, 0.3, 0.25], &[0.7, 0.26, 0.2, 0.1]);
        let direct = eer(&s).unwrap();
        let via_curve = det_curve(&s).unwrap().eer_crossing();
        assert!((direct.eer - via_curve.eer).abs() < 1e-9);
    }

    #[test]
    fn probit_spot_values() {
        assert!(probit(0.5).abs() < 1e-9);
        assert!((probit(0.975) - 1.959963985).abs() < 1e-6);
        assert!((probit(0.025) + 1.959963985).abs() < 1e-6);
        // Clamped tails are finite.
        assert!(probit(0.0).is_finite());
        assert!(probit(1.0).is_finite());
    }

    #[test]
    fn gaussian_scores_give_a_straight_probit_line() {
        // Equal-variance Gaussians at +-1: the DET curve in probit space
        // is a straight line up to sampling noise.
        let mut rng = crate::rng::substream(17, "metrics.gaussian");
        let mut s = ScoreSet::new();
        for i in 0..10_000 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            if i % 2 == 0 {
                s.push(format!("b{i}"), 1.0 + z, Label::Bonafide);
            } else {
                s.push(format!("s{i}"), -1.0 + z, Label::Spoof);
            }
        }
        let curve = det_curve(&s).unwrap();
        let (slope, _, rms) = curve.probit_line_fit().unwrap();
        assert!(rms < 0.05, "rms residual {rms}");
        assert!(slope < 0.0, "DET slope should be negative, got {slope}");
    }

    #[test]
    fn aggregate_matches_hand_computation() {
        let a = aggregate_seeds(&[5.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(a.mean, 5.0);
        assert_eq!(a.std, 0.0);

        let b = aggregate_seeds(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.mean, 2.0);
        assert!((b.std - 1.0).abs() < 1e-15);

        let c = aggregate_seeds(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.mean, b.mean);
        assert_eq!(c.std, b.std);

        assert_eq!(
            aggregate_seeds(&[1.0]).unwrap_err(),
            MetricsError::TooFewSeeds { got: 1 }
        );
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        let s = set_from(&[0.912345678901234, -0.25], &[0.1, -3.5e-7]);
        s.write_file(&path).unwrap();
        let loaded = ScoreSet::read_file(&path).unwrap();
        assert_eq!(s.records, loaded.records);
    }

    proptest! {
        /// EER is invariant under strictly monotone score transforms.
        #[test]
        fn eer_invariant_under_monotone_transform(
            bona in proptest::collection::vec(-5.0f64..5.0, 1..40),
            spoof in proptest::collection::vec(-5.0f64..5.0, 1..40),
            scale in 0.1f64..3.0,
            shift in -2.0f64..2.0,
        ) {
            let s = set_from(&bona, &spoof);
            let mono = |x: &f64| scale * x + 0.05 * x * x * x + shift;
            let transformed = set_from(
                &bona.iter().map(mono).collect::<Vec<_>>(),
                &spoof.iter().map(mono).collect::<Vec<_>>(),
            );
            let e1 = eer(&s).unwrap().eer;
            let e2 = eer(&transformed).unwrap().eer;
            prop_assert!((e1 - e2).abs() < 1e-9, "{e1} vs {e2}");
        }

        /// FAR is non-increasing and FRR non-decreasing in the threshold.
        #[test]
        fn det_is_monotone(
            bona in proptest::collection::vec(-5.0f64..5.0, 1..40),
            spoof in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let c = det_curve(&set_from(&bona, &spoof)).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].threshold > w[0].threshold);
                prop_assert!(w[1].far <= w[0].far);
                prop_assert!(w[1].frr >= w[0].frr);
            }
        }
    }
}
