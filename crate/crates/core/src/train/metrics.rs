use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss_nats: f64,
    pub eval_bpb: f64,
    pub tokens_seen: u64,
    pub bytes_seen: u64,
    pub picked_fraction: f64,
    pub glitch: bool,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "step,train_loss_nats,eval_bpb,tokens_seen,bytes_seen,picked_fraction,glitch,wall_clock_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.train_loss_nats,
            self.eval_bpb,
            self.tokens_seen,
            self.bytes_seen,
            self.picked_fraction,
            self.glitch,
            self.wall_clock_s
        )
    }
}

/// Bits per byte: `total_ce_nats / (n_bytes * ln 2)`.
pub fn bpb(total_ce_nats: f64, n_bytes: usize) -> Result<f64> {
    if n_bytes == 0 {
        return Err(invalid("BPB needs at least one byte"));
    }
    Ok(total_ce_nats / (n_bytes as f64 * std::f64::consts::LN_2))
}

/// Trailing moving average over at most `window` values.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..series.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(w);
            series[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
        })
        .collect()
}

/// Indices `t` where the smoothed series rises more than `threshold` above
/// its running minimum over earlier indices.
pub fn detect_glitch(series: &[f64], threshold: f64, smoothing_window: usize) -> Vec<usize> {
    let s = smooth(series, smoothing_window);
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for (t, &v) in s.iter().enumerate() {
        if t > 0 && v - best > threshold {
            out.push(t);
        }
        best = best.min(v);
    }
    out
}

/// Writes metrics as JSON lines.
pub fn write_jsonl<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{}", MetricsRecord::CSV_HEADER)?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn bpb_examples() {
        assert!((bpb(LN_2, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((bpb(256f64.ln() * 10.0, 10).unwrap() - 8.0).abs() < 1e-12);
        assert!((bpb(4.0 * LN_2, 10).unwrap() - 0.4).abs() < 1e-15);
        assert!(bpb(1.0, 0).is_err());
    }

    fn brute_force(series: &[f64], threshold: f64, window: usize) -> Vec<usize> {
        let s: Vec<f64> = (0..series.len())
            .map(|t| {
                let lo = if t + 1 >= window { t + 1 - window } else { 0 };
                let vals = &series[lo..=t];
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect();
        (1..s.len())
            .filter(|&t| (0..t).any(|u| s[t] - s[u] > threshold))
            .collect()
    }

    #[test]
    fn glitch_examples() {
        assert_eq!(detect_glitch(&[1.0, 1.0, 1.6, 1.1], 0.3, 1), vec![2]);
        let dec: Vec<f64> = (0..50).map(|i| 5.0 - 0.1 * i as f64).collect();
        assert!(detect_glitch(&dec, 0.01, 3).is_empty());
    }

    #[test]
    fn glitch_matches_quadratic_scan() {
        let mut x = 0.37f64;
        let series: Vec<f64> = (0..200)
            .map(|i| {
                x = (x * 3.91 * (1.0 - x)).clamp(0.01, 0.99);
                3.0 - 0.01 * i as f64 + x
            })
            .collect();
        for window in [1, 2, 5] {
            for threshold in [0.05, 0.2, 0.5] {
                assert_eq!(
                    detect_glitch(&series, threshold, window),
                    brute_force(&series, threshold, window)
                );
            }
        }
    }

    #[test]
    fn csv_and_jsonl() {
        let r = MetricsRecord {
            step: 3,
            train_loss_nats: 1.5,
            eval_bpb: 2.0,
            tokens_seen: 10,
            bytes_seen: 8,
            picked_fraction: 0.25,
            glitch: false,
            wall_clock_s: 0.5,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&r)).unwrap();
        let back: MetricsRecord = serde_json::from_slice(buf.trim_ascii_end()).unwrap();
        assert_eq!(back, r);
        let mut csv = Vec::new();
        write_csv(&mut csv, &[r]).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "3,1.5,2,10,8,0.25,false,0.5");
    }
}
