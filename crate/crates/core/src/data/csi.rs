//! Complex CSI frames to real amplitude tensors.

use num_complex::Complex64;
use std::f64::consts::PI;

use super::DataError;
use crate::scalar::{lit, Scalar};

/// One CSI snapshot: complex response per (antenna, subcarrier).
#[derive(Debug, Clone, PartialEq)]
pub struct RawCsiFrame {
    pub antennas: usize,
    pub subcarriers: usize,
    /// Row-major `(antennas, subcarriers)`.
    pub values: Vec<Complex64>,
    pub timestamp: u64,
}

impl RawCsiFrame {
    pub fn new(
        antennas: usize,
        subcarriers: usize,
        values: Vec<Complex64>,
        timestamp: u64,
    ) -> Result<Self, DataError> {
        if antennas == 0 || subcarriers == 0 {
            return Err(DataError::Shape(format!(
                "CSI frame needs at least one antenna and subcarrier, got {antennas}x{subcarriers}"
            )));
        }
        if values.len() != antennas * subcarriers {
            return Err(DataError::Shape(format!(
                "CSI frame has {} values, expected {antennas}x{subcarriers}",
                values.len()
            )));
        }
        Ok(Self {
            antennas,
            subcarriers,
            values,
            timestamp,
        })
    }

    /// Decodes interleaved little-endian `(re, im)` float32 pairs.
    pub fn from_interleaved_f32(
        antennas: usize,
        subcarriers: usize,
        bytes: &[u8],
        timestamp: u64,
    ) -> Result<Self, DataError> {
        let need = antennas * subcarriers * 8;
        if bytes.len() != need {
            return Err(DataError::Shape(format!(
                "raw CSI frame has {} bytes, expected {need}",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        Self::new(antennas, subcarriers, values, timestamp)
    }

    fn row(&self, antenna: usize) -> &[Complex64] {
        &self.values[antenna * self.subcarriers..(antenna + 1) * self.subcarriers]
    }
}

/// Least-squares linear phase fit `φ(s) ≈ slope·s + offset` over one
/// antenna's unwrapped subcarrier phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseFit {
    pub slope: f64,
    pub offset: f64,
}

/// Preprocessed window: amplitudes plus the phase calibration side channel.
#[derive(Debug, Clone)]
pub struct CalibratedWindow {
    pub antennas: usize,
    pub subcarriers: usize,
    pub frames: usize,
    /// Row-major `(A, S, T)` calibrated amplitudes.
    pub amplitude: Vec<f64>,
    /// Row-major `(A, S, T)` phase after removing the linear fit.
    pub calibrated_phase: Vec<f64>,
    /// Row-major `(T, A)` per-frame fits.
    pub fits: Vec<PhaseFit>,
}

/// Unwraps a phase sequence so consecutive differences lie in `(-π, π]`.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut correction = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let delta = p - phase[i - 1];
            if delta > PI {
                correction -= 2.0 * PI * ((delta + PI) / (2.0 * PI)).floor();
            } else if delta < -PI {
                correction += 2.0 * PI * ((-delta + PI) / (2.0 * PI)).floor();
            }
        }
        out.push(p + correction);
    }
    out
}

/// Ordinary least squares line through `(i, y_i)`.
pub fn fit_linear_phase(phase: &[f64]) -> PhaseFit {
    let n = phase.len() as f64;
    if phase.len() < 2 {
        return PhaseFit {
            slope: 0.0,
            offset: phase.first().copied().unwrap_or(0.0),
        };
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = phase.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &y) in phase.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    PhaseFit {
        slope,
        offset: mean_y - slope * mean_x,
    }
}

/// Converts `T` complex frames to a real `(A, S, T)` tensor.
///
/// Each frame's phase is unwrapped along subcarriers and a least-squares
/// slope and offset are removed; the amplitude of the detrended value is
/// returned. A phase rotation leaves the modulus unchanged, so the amplitude
/// equals `|H|` and the fits are carried only as metadata.
pub fn preprocess_window(frames: &[RawCsiFrame]) -> Result<CalibratedWindow, DataError> {
    let first = frames
        .first()
        .ok_or_else(|| DataError::Shape("empty CSI window".into()))?;
    let (na, ns, nt) = (first.antennas, first.subcarriers, frames.len());
    for (t, f) in frames.iter().enumerate() {
        if f.antennas != na || f.subcarriers != ns || f.values.len() != na * ns {
            return Err(DataError::Shape(format!(
                "frame {t} is {}x{}, expected {na}x{ns}",
                f.antennas, f.subcarriers
            )));
        }
        if f.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(DataError::NonFinite(format!("frame {t}")));
        }
    }

    let mut amplitude = vec![0.0; na * ns * nt];
    let mut calibrated_phase = vec![0.0; na * ns * nt];
    let mut fits = Vec::with_capacity(nt * na);
    for (t, frame) in frames.iter().enumerate() {
        for a in 0..na {
            let row = frame.row(a);
            let raw: Vec<f64> = row.iter().map(|v| v.arg()).collect();
            let unwrapped = unwrap_phase(&raw);
            let fit = fit_linear_phase(&unwrapped);
            for (s, v) in row.iter().enumerate() {
                let trend = fit.slope * s as f64 + fit.offset;
                let detrended = v * Complex64::from_polar(1.0, -trend);
                let idx = (a * ns + s) * nt + t;
                amplitude[idx] = detrended.norm();
                calibrated_phase[idx] = unwrapped[s] - trend;
            }
            fits.push(fit);
        }
    }
    Ok(CalibratedWindow {
        antennas: na,
        subcarriers: ns,
        frames: nt,
        amplitude,
        calibrated_phase,
        fits,
    })
}

/// Per-sample z-score over every entry. Near-constant input maps to zeros.
pub fn normalize_sample<T: Scalar>(z: &[T]) -> Vec<T> {
    if z.is_empty() {
        return Vec::new();
    }
    let n: T = lit(z.len() as f64);
    let mean = z.iter().copied().sum::<T>() / n;
    let var = z.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std < lit(1e-8) {
        return vec![T::zero(); z.len()];
    }
    z.iter().map(|&x| (x - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(na: usize, ns: usize, f: impl Fn(usize, usize) -> Complex64) -> RawCsiFrame {
        let values = (0..na)
            .flat_map(|a| (0..ns).map(move |s| (a, s)))
            .map(|(a, s)| f(a, s))
            .collect();
        RawCsiFrame::new(na, ns, values, 0).unwrap()
    }

    #[test]
    fn unit_constant_frames_give_ones() {
        let frames: Vec<_> = (0..10).map(|_| frame(3, 114, |_, _| Complex64::new(1.0, 0.0))).collect();
        let w = preprocess_window(&frames).unwrap();
        assert_eq!(w.amplitude.len(), 3 * 114 * 10);
        assert!(w.amplitude.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn linear_phase_ramp_keeps_unit_magnitude_and_is_detrended() {
        let frames: Vec<_> = (0..4)
            .map(|_| frame(2, 30, |_, s| Complex64::from_polar(1.0, 0.1 * s as f64)))
            .collect();
        let w = preprocess_window(&frames).unwrap();
        assert!(w.amplitude.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        for fit in &w.fits {
            assert!((fit.slope - 0.1).abs() < 1e-12);
            assert!(fit.offset.abs() < 1e-12);
        }
        assert!(w.calibrated_phase.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn steep_ramp_is_unwrapped() {
        let phase: Vec<f64> = (0..50).map(|s| 2.5 * s as f64).collect();
        let wrapped: Vec<f64> = phase
            .iter()
            .map(|p| Complex64::from_polar(1.0, *p).arg())
            .collect();
        let unwrapped = unwrap_phase(&wrapped);
        let fit = fit_linear_phase(&unwrapped);
        assert!((fit.slope - 2.5).abs() < 1e-9);
    }

    #[test]
    fn amplitude_matches_modulus_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<_> = (0..10)
            .map(|t| {
                let values = (0..3 * 114)
                    .map(|_| Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                    .collect();
                RawCsiFrame::new(3, 114, values, t).unwrap()
            })
            .collect();
        let w = preprocess_window(&frames).unwrap();
        for (t, f) in frames.iter().enumerate() {
            for a in 0..3 {
                for s in 0..114 {
                    let want = (f.values[a * 114 + s].re.powi(2) + f.values[a * 114 + s].im.powi(2)).sqrt();
                    let got = w.amplitude[(a * 114 + s) * 10 + t];
                    assert!((got - want).abs() <= 1e-12 * want.max(1.0));
                    assert!(got >= 0.0);
                }
            }
        }
    }

    #[test]
    fn mismatched_or_non_finite_frames_are_rejected() {
        let good = frame(2, 8, |_, _| Complex64::new(1.0, 1.0));
        let other = frame(2, 9, |_, _| Complex64::new(1.0, 1.0));
        assert!(matches!(
            preprocess_window(&[good.clone(), other]),
            Err(DataError::Shape(_))
        ));
        let bad = frame(2, 8, |a, s| {
            if a == 1 && s == 3 {
                Complex64::new(f64::NAN, 0.0)
            } else {
                Complex64::new(1.0, 0.0)
            }
        });
        assert!(matches!(preprocess_window(&[good, bad]), Err(DataError::NonFinite(_))));
        assert!(preprocess_window(&[]).is_err());
    }

    #[test]
    fn interleaved_decoding() {
        let mut bytes = Vec::new();
        for x in [1.0f32, 2.0, 3.0, -4.0] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let f = RawCsiFrame::from_interleaved_f32(1, 2, &bytes, 3).unwrap();
        assert_eq!(f.values, vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, -4.0)]);
        assert!(RawCsiFrame::from_interleaved_f32(1, 3, &bytes, 3).is_err());
    }

    #[test]
    fn z_score_contract() {
        assert_eq!(normalize_sample(&[3.0f64; 12]), vec![0.0; 12]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..3 * 114 * 10).map(|_| rng.random_range(-3.0..9.0)).collect();
        let n = normalize_sample(&z);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let std = (n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-4);

        let twice = normalize_sample(&n);
        assert!(twice.iter().zip(&n).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
