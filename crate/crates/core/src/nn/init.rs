use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Truncated-normal draw: resample until the value lands within two standard
/// deviations of zero.
pub fn trunc_normal_scalar(std: f64, rng: &mut ChaCha8Rng) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    loop {
        // Box-Muller on two uniform draws keeps us independent of distribution
        // crates and pins the byte-for-byte RNG stream.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Tensor filled with truncated-normal values.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| trunc_normal_scalar(std, rng)).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("init shape")
}

/// He-style scale for a layer with the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Standard-normal draws (used for reparameterization noise).
pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("noise shape")
}
