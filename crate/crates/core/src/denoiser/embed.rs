use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal step embedding `[sin(t w_0), .., sin(t w_{k-1}), cos(t w_0), ..]`
/// with `w_k = MAX_PERIOD^(-k / (dim/2 - 1))`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("embedding width must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| if half == 1 { 1.0 } else { MAX_PERIOD.powf(-(k as f64) / (half - 1) as f64) })
        .collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|w| (t * w).sin()));
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_phase() {
        let e = time_embed(0.0, 8).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hand_evaluated_dim4() {
        let e = time_embed(1.0, 4).unwrap();
        let expected = [1f64.sin(), 1e-4f64.sin(), 1f64.cos(), 1e-4f64.cos()];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bounded_and_validated() {
        for t in [1.0, 17.0, 999.0, 12345.0] {
            assert!(time_embed(t, 32).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(time_embed(1.0, 5).is_err());
        assert!(time_embed(1.0, 0).is_err());
    }
}
