use ndarray::Array2;
use rand::Rng;
use wsdc_core::metrics::index_error_rate;
use wsdc_core::modem::{awgn, demodulate, modulate, ser_theoretical, ChannelConfig, Constellation};
use wsdc_core::seeded_rng;

#[test]
fn index_error_rate_matches_theory_16qam_12db() {
    let c = Constellation::new(16).unwrap();
    let n = 1_000_000;
    let mut rng = seeded_rng(21, 0);
    let sent: Vec<usize> = (0..n).map(|_| rng.random_range(0..16)).collect();
    let rx = demodulate(&awgn(&modulate(&sent, &c).unwrap(), &ChannelConfig::new(12.0, 8)).unwrap(), &c);
    let s = Array2::from_shape_vec((n / 2, 2), sent).unwrap();
    let r = Array2::from_shape_vec((n / 2, 2), rx).unwrap();
    let rate = index_error_rate(s.view(), r.view()).unwrap();
    let p = ser_theoretical(16, 12.0).unwrap();
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((rate - p).abs() < 3.0 * se, "rate {rate}, theory {p}, se {se}");
}

#[test]
fn error_rate_falls_with_snr() {
    let c = Constellation::new(64).unwrap();
    let mut rng = seeded_rng(22, 0);
    let sent: Vec<usize> = (0..200_000).map(|_| rng.random_range(0..64)).collect();
    let tx = modulate(&sent, &c).unwrap();
    let rates: Vec<f64> = [4.0, 8.0, 12.0, 16.0, 20.0]
        .iter()
        .map(|&db| {
            let rx = demodulate(&awgn(&tx, &ChannelConfig::new(db, 3)).unwrap(), &c);
            rx.iter().zip(&sent).filter(|(a, b)| a != b).count() as f64 / sent.len() as f64
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[1] < w[0]), "{rates:?}");
}
