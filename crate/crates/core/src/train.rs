//! Loss bookkeeping shared by every training loop.

/// Per-step training losses plus per-epoch means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub steps: Vec<f32>,
    pub epochs: Vec<f32>,
}

impl LossCurve {
    /// Closes an epoch that started at step index `from_step`.
    pub fn push_epoch(&mut self, from_step: usize) {
        let s = &self.steps[from_step..];
        if !s.is_empty() {
            self.epochs.push(s.iter().sum::<f32>() / s.len() as f32);
        }
    }

    /// CSV with a header and one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.steps.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f32], w: usize) -> Vec<f32> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w.max(1));
            let s = &xs[lo..=i];
            s.iter().sum::<f32>() / s.len() as f32
        })
        .collect()
}

/// Largest rise between consecutive entries of `xs` relative to its first
/// entry (0 for a non-increasing sequence).
pub fn worst_relative_rise(xs: &[f32]) -> f32 {
    let Some(&first) = xs.first() else {
        return 0.0;
    };
    xs.windows(2)
        .map(|w| (w[1] - w[0]).max(0.0))
        .fold(0.0, f32::max)
        / first.abs().max(f32::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0], 2), vec![2.0, 3.0, 5.0]);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let c = LossCurve {
            steps: vec![1.0, 0.5],
            epochs: vec![0.75],
        };
        assert_eq!(c.to_csv(), "step,loss\n1,1\n2,0.5\n");
    }

    #[test]
    fn rise_of_monotone_sequence_is_zero() {
        assert_eq!(worst_relative_rise(&[3.0, 2.0, 2.0, 1.0]), 0.0);
        assert!((worst_relative_rise(&[2.0, 1.0, 1.5]) - 0.25).abs() < 1e-6);
    }
}
