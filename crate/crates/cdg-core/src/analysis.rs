//! Tensor-regularity measurements and run reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precondition::Axis;
use crate::tensor::Tensor4;

/// Mean Pearson correlation over all slice pairs at a fixed index distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub mean_corr: f64,
    /// Pairs that entered the mean; zero-variance slices are skipped.
    pub n_pairs: usize,
}

/// Pearson correlation between channel slices at distance `d` along `axis`,
/// each slice flattened over the remaining axes and mean-centered. Pairs
/// containing a zero-variance slice are excluded.
pub fn channel_correlation(x: &Tensor4, axis: Axis, d: usize) -> Result<CorrelationPoint> {
    let work;
    let t = match axis {
        Axis::Output => x,
        Axis::Input => {
            work = x.transpose_axes([1, 0, 2, 3])?;
            &work
        }
    };
    let n = t.outer();
    if d == 0 || d >= n {
        return Err(Error::invalid(format!(
            "distance {} outside 1..{} for axis size {}",
            d,
            n.saturating_sub(1),
            n
        )));
    }
    let s = t.slice_len();
    // Center each slice once; zero-variance slices get a zero norm.
    let mut centered = vec![0.0; n * s];
    let mut norms = vec![0.0; n];
    for (idx, slice) in t.data().chunks_exact(s).enumerate() {
        let mean: f64 = slice.iter().sum::<f64>() / s as f64;
        let dst = &mut centered[idx * s..(idx + 1) * s];
        let mut sq = 0.0;
        for (c, &v) in dst.iter_mut().zip(slice) {
            *c = v - mean;
            sq += *c * *c;
        }
        norms[idx] = sq.sqrt();
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n - d {
        let j = i + d;
        if norms[i] == 0.0 || norms[j] == 0.0 {
            continue;
        }
        let a = &centered[i * s..(i + 1) * s];
        let b = &centered[j * s..(j + 1) * s];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::UndefinedResult(format!(
            "all slice pairs at distance {} are degenerate",
            d
        )));
    }
    Ok(CorrelationPoint {
        mean_corr: total / pairs as f64,
        n_pairs: pairs,
    })
}

/// One row of the correlation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrRow {
    pub layer: String,
    pub axis: String,
    pub d: usize,
    pub mean_corr: f64,
    pub n_pairs: usize,
}

/// Correlation at every distance `1..=max_d` (capped at the axis size);
/// degenerate distances are skipped.
pub fn correlation_curve(x: &Tensor4, layer: &str, axis: Axis, max_d: usize) -> Vec<CorrRow> {
    let size = match axis {
        Axis::Output => x.dims()[0],
        Axis::Input => x.dims()[1],
    };
    let mut rows = Vec::new();
    for d in 1..=max_d.min(size.saturating_sub(1)) {
        if let Ok(point) = channel_correlation(x, axis, d) {
            rows.push(CorrRow {
                layer: layer.to_string(),
                axis: axis.name().to_string(),
                d,
                mean_corr: point.mean_corr,
                n_pairs: point.n_pairs,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub mean: f64,
    /// Unbiased standard deviation (n-1 denominator); zero with the
    /// `degenerate` flag set for singleton inputs.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

pub fn trial_stats(values: &[f64]) -> Result<TrialStats> {
    if values.is_empty() {
        return Err(Error::invalid("trial_stats over an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.len() == 1 {
        return Ok(TrialStats {
            mean,
            std: 0.0,
            min,
            max,
            degenerate: true,
        });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(TrialStats {
        mean,
        std: var.sqrt(),
        min,
        max,
        degenerate: false,
    })
}

/// Everything one training trial produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    /// Metric label for the CSV rows (normally the metric name, optionally
    /// annotated with lambda).
    pub metric: String,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub correlations: Vec<CorrRow>,
    /// Echo of the run configuration, identical across the trials of a run.
    pub config: serde_json::Value,
}

impl TrialReport {
    pub fn final_test_acc(&self) -> f64 {
        self.test_acc.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug)]
pub struct ReportPaths {
    pub accuracy_csv: PathBuf,
    pub correlations_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Full-precision decimal rendering (17 significant digits) so parsing the
/// CSV back recovers the exact f64.
fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Writes the per-epoch accuracy CSV, the correlation CSV (averaged over
/// trials), and the summary JSON into `dir`.
pub fn emit_report(trials: &[TrialReport], dir: impl AsRef<Path>) -> Result<ReportPaths> {
    if trials.is_empty() {
        return Err(Error::invalid("emit_report needs at least one trial"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let accuracy_csv = dir.join("accuracy.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&accuracy_csv)?);
        out.write_all(b"epoch,seed,metric,train_acc,test_acc\n")?;
        for trial in trials {
            for (epoch, (tr, te)) in trial.train_acc.iter().zip(&trial.test_acc).enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    epoch,
                    trial.seed,
                    trial.metric,
                    fmt_f64(*tr),
                    fmt_f64(*te)
                )?;
            }
        }
    }

    let correlations_csv = dir.join("correlations.csv");
    {
        // Average mean_corr over trials per (layer, axis, d); pair counts add.
        let mut agg: BTreeMap<(String, String, usize), (f64, usize, usize)> = BTreeMap::new();
        for trial in trials {
            for row in &trial.correlations {
                let e = agg
                    .entry((row.layer.clone(), row.axis.clone(), row.d))
                    .or_insert((0.0, 0, 0));
                e.0 += row.mean_corr;
                e.1 += row.n_pairs;
                e.2 += 1;
            }
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(&correlations_csv)?);
        out.write_all(b"layer,axis,d,mean_corr,n_pairs\n")?;
        for ((layer, axis, d), (sum, pairs, count)) in &agg {
            writeln!(
                out,
                "{},{},{},{},{}",
                layer,
                axis,
                d,
                fmt_f64(sum / *count as f64),
                pairs
            )?;
        }
    }

    let summary_json = dir.join("summary.json");
    {
        #[derive(Serialize)]
        struct MetricSummary {
            n_trials: usize,
            mean_final_test_acc: f64,
            std_final_test_acc: f64,
            min_final_test_acc: f64,
            max_final_test_acc: f64,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a serde_json::Value,
            per_metric: BTreeMap<String, MetricSummary>,
            seeds: Vec<u64>,
        }
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for trial in trials {
            by_metric
                .entry(trial.metric.clone())
                .or_default()
                .push(trial.final_test_acc());
        }
        let mut per_metric = BTreeMap::new();
        for (metric, finals) in &by_metric {
            let stats = trial_stats(finals)?;
            per_metric.insert(
                metric.clone(),
                MetricSummary {
                    n_trials: finals.len(),
                    mean_final_test_acc: stats.mean,
                    std_final_test_acc: stats.std,
                    min_final_test_acc: stats.min,
                    max_final_test_acc: stats.max,
                },
            );
        }
        let summary = Summary {
            config: &trials[0].config,
            per_metric,
            seeds: trials.iter().map(|t| t.seed).collect(),
        };
        let mut out = std::fs::File::create(&summary_json)?;
        out.write_all(serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;
        out.write_all(b"\n")?;
    }

    Ok(ReportPaths {
        accuracy_csv,
        correlations_csv,
        summary_json,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_slices_correlate_perfectly() {
        // Every output slice is the same non-constant pattern.
        let x = Tensor4::from_fn([6, 2, 2, 1], |_, i, h, _| (i * 2 + h) as f64).unwrap();
        for d in 1..6 {
            let p = channel_correlation(&x, Axis::Output, d).unwrap();
            assert!((p.mean_corr - 1.0).abs() <= 1e-12, "d={}", d);
            assert_eq!(p.n_pairs, 6 - d);
        }
    }

    #[test]
    fn alternating_slices_anticorrelate() {
        let v = [1.0, -2.0, 0.5, 0.5]; // zero mean not required
        let x = Tensor4::from_fn([4, 4, 1, 1], |o, i, _, _| {
            if o % 2 == 0 {
                v[i]
            } else {
                -v[i]
            }
        })
        .unwrap();
        let p = channel_correlation(&x, Axis::Output, 1).unwrap();
        assert!((p.mean_corr + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn iid_noise_has_small_correlation() {
        // O=64 slices of 450 standard normals via Box-Muller.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut normal = || {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let x = Tensor4::from_fn([64, 18, 5, 5], |_, _, _, _| normal()).unwrap();
        let mut mags = Vec::new();
        for d in 1..64 {
            let p = channel_correlation(&x, Axis::Output, d).unwrap();
            assert!(p.mean_corr.abs() <= 0.2, "d={} corr={}", d, p.mean_corr);
            mags.push(p.mean_corr.abs());
        }
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = mags[mags.len() / 2];
        assert!(median <= 0.05, "median |corr| {}", median);
    }

    #[test]
    fn correlation_is_invariant_to_positive_affine_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::from_fn([5, 3, 2, 2], |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();
        let base = channel_correlation(&x, Axis::Output, 1).unwrap();
        // Rescale slice 0 by +3 and shift by 10.
        let mut y = x.clone();
        let s = y.slice_len();
        for v in &mut y.data_mut()[..s] {
            *v = 3.0 * *v + 10.0;
        }
        let scaled = channel_correlation(&y, Axis::Output, 1).unwrap();
        assert!((scaled.mean_corr - base.mean_corr).abs() <= 1e-12);
        // A negative scale flips the sign of the pairs involving slice 0.
        let mut z = x.clone();
        for v in &mut z.data_mut()[..s] {
            *v = -*v;
        }
        let flipped = channel_correlation(&z, Axis::Output, 1).unwrap();
        assert!(flipped.mean_corr < scaled.mean_corr);
    }

    #[test]
    fn degenerate_inputs_are_signaled() {
        let x = Tensor4::zeros([4, 2, 1, 1]).unwrap();
        assert!(matches!(
            channel_correlation(&x, Axis::Output, 1),
            Err(Error::UndefinedResult(_))
        ));
        let y = Tensor4::from_fn([4, 2, 1, 1], |o, i, _, _| (o + i) as f64).unwrap();
        assert!(channel_correlation(&y, Axis::Output, 4).is_err());
        assert!(channel_correlation(&y, Axis::Output, 0).is_err());
    }

    #[test]
    fn stats_hand_values() {
        let s = trial_stats(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        let s = trial_stats(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert!((s.std - 2f64.sqrt()).abs() <= 1e-15);
        let s = trial_stats(&[5.0]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, 0.0);
        assert!(s.degenerate);
        assert!(trial_stats(&[]).is_err());
    }

    fn sample_trial(seed: u64) -> TrialReport {
        TrialReport {
            seed,
            metric: "identity".into(),
            train_acc: vec![0.5, 0.75],
            test_acc: vec![0.46f64.sin(), 0.625],
            correlations: vec![CorrRow {
                layer: "conv2".into(),
                axis: "output".into(),
                d: 1,
                mean_corr: 0.25,
                n_pairs: 99,
            }],
            config: serde_json::json!({"task": "test"}),
        }
    }

    #[test]
    fn report_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&[sample_trial(1)], dir.path()).unwrap();
        let text = std::fs::read_to_string(&paths.accuracy_csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 epochs
        assert_eq!(lines[0], "epoch,seed,metric,train_acc,test_acc");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn report_values_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let trial = sample_trial(2);
        let paths = emit_report(&[trial.clone()], dir.path()).unwrap();
        let text = std::fs::read_to_string(&paths.accuracy_csv).unwrap();
        for (line, epoch) in text.lines().skip(1).zip(0..) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), epoch);
            let train: f64 = cols[3].parse().unwrap();
            let test: f64 = cols[4].parse().unwrap();
            assert_eq!(train, trial.train_acc[epoch]);
            assert_eq!(test, trial.test_acc[epoch]);
        }
    }

    #[test]
    fn empty_trial_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[], dir.path()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
