use crate::error::{Error, Result};

const TABLE_MIN_DB: f64 = -20.0;

/// Expected `ln E|z| - E ln|z|` for Gamma(0.4)-distributed speech amplitudes
/// in additive Gaussian noise, at SNRs from -20 dB to 100 dB in 1 dB steps.
/// Computed by quadrature from that model.
pub(crate) const G_TABLE: [f64; 121] = [
    0.409435, 0.409459, 0.409498, 0.409556, 0.409644, 0.409777, 0.409974, 0.410265,
    0.410687, 0.411293, 0.412148, 0.413339, 0.414969, 0.417164, 0.420066, 0.423839,
    0.428654, 0.434691, 0.442128, 0.451128, 0.461837, 0.474368, 0.488795, 0.505151,
    0.523423, 0.543551, 0.565434, 0.588934, 0.613881, 0.640087, 0.667346, 0.695450,
    0.724191, 0.753365, 0.782784, 0.812272, 0.841671, 0.870839, 0.899654, 0.928012,
    0.955825, 0.983020, 1.009541, 1.035341, 1.060388, 1.084657, 1.108135, 1.130813,
    1.152691, 1.173772, 1.194065, 1.213581, 1.232336, 1.250346, 1.267630, 1.284208,
    1.300102, 1.315332, 1.329921, 1.343892, 1.357266, 1.370065, 1.382311, 1.394026,
    1.405231, 1.415945, 1.426190, 1.435983, 1.445345, 1.454293, 1.462844, 1.471016,
    1.478825, 1.486286, 1.493414, 1.500225, 1.506731, 1.512947, 1.518885, 1.524557,
    1.529975, 1.535150, 1.540093, 1.544814, 1.549324, 1.553631, 1.557745, 1.561674,
    1.565426, 1.569010, 1.572433, 1.575702, 1.578824, 1.581806, 1.584654, 1.587373,
    1.589971, 1.592451, 1.594820, 1.597083, 1.599243, 1.601306, 1.603277, 1.605159,
    1.606956, 1.608673, 1.610312, 1.611877, 1.613372, 1.614800, 1.616163, 1.617465,
    1.618708, 1.619896, 1.621030, 1.622113, 1.623147, 1.624135, 1.625078, 1.625979,
    1.626839,
];

const EPS: f64 = 1e-10;

/// Blind SNR estimate in dB: the waveform amplitude statistic is looked up in
/// the Gamma-speech table and linearly interpolated. Clamped to [-20, 100].
pub fn wada_snr(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("wada_snr of an empty signal".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("wada_snr input is not finite".into()));
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let n = samples.len() as f64;
    let abs: Vec<f64> = samples.iter().map(|v| (v.abs() / scale).max(EPS)).collect();
    let mean = (abs.iter().sum::<f64>() / n).max(EPS);
    let mean_log = abs.iter().map(|v| v.ln()).sum::<f64>() / n;
    Ok(snr_from_statistic(mean.ln() - mean_log))
}

pub(crate) fn snr_from_statistic(g: f64) -> f64 {
    let last = G_TABLE.len() - 1;
    if g <= G_TABLE[0] {
        return TABLE_MIN_DB;
    }
    if g >= G_TABLE[last] {
        return TABLE_MIN_DB + last as f64;
    }
    let i = G_TABLE.partition_point(|&t| t <= g) - 1;
    TABLE_MIN_DB + i as f64 + (g - G_TABLE[i]) / (G_TABLE[i + 1] - G_TABLE[i])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Normal};

    use super::*;

    const ALPHA: f64 = 0.4;

    fn gamma_speech(n: usize, snr_db: Option<f64>, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Gamma::new(ALPHA, 1.0).unwrap();
        // E a² = α(α+1) for unit-scale Gamma(α)
        let noise = snr_db.map(|s| Normal::new(0.0, (ALPHA * (ALPHA + 1.0) / 10f64.powf(s / 10.0)).sqrt()).unwrap());
        (0..n)
            .map(|_| {
                let a = gamma.sample(&mut rng) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                a + noise.map_or(0.0, |d| d.sample(&mut rng))
            })
            .collect()
    }

    #[test]
    fn table_endpoints_match_closed_forms() {
        // pure Gaussian: ln sqrt(2/pi) + (gamma_E + ln 2) / 2
        let gauss = (2.0 / std::f64::consts::PI).sqrt().ln() + (0.5772156649015329 + 2f64.ln()) / 2.0;
        assert!((G_TABLE[0] - gauss).abs() < 1e-4);
        // noiseless Gamma(0.4): ln α - ψ(α), ψ(0.4) = -2.5613845445851161
        let clean = ALPHA.ln() + 2.561_384_544_585_116;
        assert!(G_TABLE[120] < clean && clean - G_TABLE[120] < 0.03);
        assert!(G_TABLE.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn interpolation_and_clamping() {
        assert_eq!(snr_from_statistic(0.0), -20.0);
        assert_eq!(snr_from_statistic(10.0), 100.0);
        assert_eq!(snr_from_statistic(G_TABLE[40]), 20.0);
        let mid = 0.5 * (G_TABLE[40] + G_TABLE[41]);
        assert!((snr_from_statistic(mid) - 20.5).abs() < 1e-12);
    }

    #[test]
    fn recovers_snr_of_model_signals() {
        for (snr, seed) in [(0.0, 1), (10.0, 2), (20.0, 3), (30.0, 4)] {
            let est = wada_snr(&gamma_speech(400_000, Some(snr), seed)).unwrap();
            assert!((est - snr).abs() < 1.0, "{snr} dB estimated as {est}");
        }
        // noiseless model speech saturates the table
        assert!(wada_snr(&gamma_speech(400_000, None, 5)).unwrap() > 90.0);
    }

    #[test]
    fn estimate_falls_as_noise_grows() {
        // one clean signal and one noise draw, scaled over 50 amplitudes from 30 dB to -10 dB
        let clean = gamma_speech(40_000, None, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let n = Normal::new(0.0, (ALPHA * (ALPHA + 1.0)).sqrt()).unwrap();
        let noise: Vec<f64> = (0..clean.len()).map(|_| n.sample(&mut rng)).collect();
        let est: Vec<f64> = (0..50)
            .map(|i| {
                let snr_db = 30.0 - 40.0 * i as f64 / 49.0;
                let a = 10f64.powf(-snr_db / 20.0);
                let x: Vec<f64> = clean.iter().zip(&noise).map(|(c, e)| c + a * e).collect();
                wada_snr(&x).unwrap()
            })
            .collect();
        assert!(est.windows(2).all(|w| w[1] <= w[0]), "{est:?}");
        assert!(est[0] - est[49] > 30.0, "{est:?}");
    }

    #[test]
    fn gaussian_noise_is_table_minimum_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..200_000).map(|_| n.sample(&mut rng)).collect();
        let est = wada_snr(&x).unwrap();
        assert!(est < -15.0, "{est}");
        let scaled: Vec<f64> = x.iter().map(|v| v * 37.0).collect();
        assert!((wada_snr(&scaled).unwrap() - est).abs() < 1e-9);
        // Laplacian amplitudes sit between Gaussian and Gamma(0.4)
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let lap: Vec<f64> = (0..200_000)
            .map(|_| {
                let u: f64 = rng.random_range(-0.5..0.5);
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let l = wada_snr(&lap).unwrap();
        assert!(l > est && l < 20.0, "{l}");
    }

    #[test]
    fn rejects_empty_and_nonfinite() {
        assert!(matches!(wada_snr(&[]), Err(Error::Input(_))));
        assert!(matches!(wada_snr(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert_eq!(wada_snr(&[0.0; 16]).unwrap(), -20.0);
    }
}
