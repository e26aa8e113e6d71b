use crate::error::{Error, Result};

/// Sinusoidal flow-time features `[sin(t ω_k)…, cos(t ω_k)…]` with
/// `ω_k = f_max^{-(k-1)/(d/2-1)}`, log-spaced from 1 down to `1/f_max`.
pub fn fourier_time_embed(t: f64, d: usize, f_max: f64) -> Result<Vec<f64>> {
    if d % 2 != 0 || d < 4 {
        return Err(Error::validation(format!(
            "time embedding dimension must be even and at least 4, got {d}"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let omega = f_max.powf(-(k as f64) / (half - 1) as f64);
        out[k] = (t * omega).sin();
        out[half + k] = (t * omega).cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time() {
        let e = fourier_time_embed(0.0, 8, 256.0).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frequency_endpoints() {
        // with t = 1 the sine features are sin(ω_k)
        let e = fourier_time_embed(1.0, 16, 256.0).unwrap();
        assert!((e[0] - 1.0f64.sin()).abs() < 1e-15);
        assert!((e[7] - (1.0f64 / 256.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn four_dimensional_case() {
        let e = fourier_time_embed(1.0, 4, 256.0).unwrap();
        let want = [
            1.0f64.sin(),
            (1.0f64 / 256.0).sin(),
            1.0f64.cos(),
            (1.0f64 / 256.0).cos(),
        ];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(fourier_time_embed(0.5, 7, 256.0).is_err());
        assert!(fourier_time_embed(0.5, 2, 256.0).is_err());
    }
}
