//! Variational autoencoder: encoder trunk with Gaussian latent heads,
//! mirrored upsampling decoder, and the warm-up-weighted evidence lower
//! bound with hand-derived gradients.

pub mod backbone;

pub use backbone::{BackboneSpec, Decoder, Encoder, Family, InitKind, SectionNet};

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD, Ix2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layer::Linear;
use crate::nn::params::{GradStore, Model};

/// Latent posterior parameters for a batch: row n holds sample n's mean
/// and log-variance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl LatentStats {
    pub fn latent_dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn all_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite()) && self.logvar.iter().all(|v| v.is_finite())
    }
}

/// The three ELBO components and their weighted sum. `total` is always
/// the exact arithmetic `recon + beta * kl`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

/// KL divergence from the diagonal-Gaussian posterior to the standard
/// normal: -1/2 sum_i (1 + logvar_i - mu_i^2 - exp(logvar_i)), summed
/// over latent dims and averaged over the batch.
pub fn kl_divergence(stats: &LatentStats) -> Result<f64> {
    if !stats.all_finite() {
        return Err(Error::NonFinite("kl".into()));
    }
    let n = stats.batch() as f64;
    let mut acc = 0.0;
    for (m, l) in stats.mu.iter().zip(stats.logvar.iter()) {
        acc += -0.5 * (1.0 + l - m * m - l.exp());
    }
    Ok(acc / n)
}

/// Mean squared error over every element of the image batch.
pub fn reconstruction_loss(x: &Array4<f64>, x_hat: &Array4<f64>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            context: "reconstruction".into(),
            expected: format!("{:?}", x.shape()),
            actual: format!("{:?}", x_hat.shape()),
        });
    }
    let numel = x.len() as f64;
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(x_hat.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / numel)
}

/// z = mu + exp(logvar / 2) * noise, elementwise.
pub fn reparameterize(stats: &LatentStats, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if noise.shape() != stats.mu.shape() {
        return Err(Error::ShapeMismatch {
            context: "reparameterization noise".into(),
            expected: format!("{:?}", stats.mu.shape()),
            actual: format!("{:?}", noise.shape()),
        });
    }
    Ok(&stats.mu + &(stats.logvar.mapv(|l| (0.5 * l).exp()) * noise))
}

/// KL weight for the given epoch: linear ramp from 0 to 1 over
/// `warmup_epochs`, then saturated at 1.
pub fn beta_schedule(epoch: usize, warmup_epochs: usize) -> f64 {
    assert!(warmup_epochs >= 1);
    if epoch >= warmup_epochs {
        1.0
    } else {
        epoch as f64 / warmup_epochs as f64
    }
}

pub fn elbo_loss(
    x: &Array4<f64>,
    x_hat: &Array4<f64>,
    stats: &LatentStats,
    beta: f64,
) -> Result<ElboTerms> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!(
            "beta must lie in [0,1], got {beta}"
        )));
    }
    let recon = reconstruction_loss(x, x_hat)?;
    let kl = kl_divergence(stats)?;
    Ok(ElboTerms {
        recon,
        kl,
        beta,
        total: recon + beta * kl,
    })
}

/// Full VAE: encoder trunk, one affine head each for mu and logvar from
/// the pooled feature, and the mirrored decoder.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub encoder: Encoder,
    pub mu_head: Linear,
    pub logvar_head: Linear,
    pub decoder: Decoder,
    pub latent_dim: usize,
}

impl VaeModel {
    pub fn new(
        spec: BackboneSpec,
        resolution: usize,
        latent_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = Encoder::new(spec.clone(), resolution, rng)?;
        let mu_head = Linear::new(spec.feature_dim, latent_dim, rng);
        let logvar_head = Linear::new(spec.feature_dim, latent_dim, rng);
        let decoder = Decoder::new(&spec, resolution, latent_dim, rng)?;
        Ok(Self {
            encoder,
            mu_head,
            logvar_head,
            decoder,
            latent_dim,
        })
    }

    pub fn resolution(&self) -> usize {
        self.encoder.resolution
    }

    /// Posterior parameters for a batch `[N, 3, R, R]`.
    pub fn encode(&self, x: &Array4<f64>) -> Result<LatentStats> {
        let features = self.encoder.forward(x)?;
        let stats = LatentStats {
            mu: self.mu_head.forward(&features),
            logvar: self.logvar_head.forward(&features),
        };
        if !stats.all_finite() {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(stats)
    }

    pub fn decode(&self, z: &Array2<f64>) -> Result<Array4<f64>> {
        self.decoder.forward(z)
    }
}

impl Model for VaeModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        self.encoder.net.visit("enc/", f);
        f("mu/w", self.mu_head.w.view().into_dyn());
        f("mu/b", self.mu_head.b.view().into_dyn());
        f("logvar/w", self.logvar_head.w.view().into_dyn());
        f("logvar/b", self.logvar_head.b.view().into_dyn());
        self.decoder.net.visit("dec/", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        self.encoder.net.visit_mut("enc/", f);
        f("mu/w", self.mu_head.w.view_mut().into_dyn());
        f("mu/b", self.mu_head.b.view_mut().into_dyn());
        f("logvar/w", self.logvar_head.w.view_mut().into_dyn());
        f("logvar/b", self.logvar_head.b.view_mut().into_dyn());
        self.decoder.net.visit_mut("dec/", f);
    }
}

/// One forward pass of the whole ELBO with the given noise, no grads.
pub fn elbo_forward(
    model: &VaeModel,
    x: &Array4<f64>,
    beta: f64,
    noise: &Array2<f64>,
) -> Result<ElboTerms> {
    let stats = model.encode(x)?;
    let z = reparameterize(&stats, noise)?;
    let x_hat = model.decode(&z)?;
    elbo_loss(x, &x_hat, &stats, beta)
}

/// Forward plus hand-derived backward for the total ELBO. Returns the
/// loss terms and gradients for every parameter of the model.
pub fn elbo_step(
    model: &VaeModel,
    x: &Array4<f64>,
    beta: f64,
    noise: &Array2<f64>,
) -> Result<(ElboTerms, GradStore)> {
    let mut enc_caches = Vec::new();
    let features = model.encoder.forward_cached(x, &mut enc_caches)?;
    let stats = LatentStats {
        mu: model.mu_head.forward(&features),
        logvar: model.logvar_head.forward(&features),
    };
    if !stats.all_finite() {
        return Err(Error::NonFinite("latent".into()));
    }
    let z = reparameterize(&stats, noise)?;
    let mut dec_caches = Vec::new();
    let x_hat = model.decoder.forward_cached(&z, &mut dec_caches)?;
    let terms = elbo_loss(x, &x_hat, &stats, beta)?;
    if !terms.recon.is_finite() {
        return Err(Error::NonFinite("recon".into()));
    }
    if !terms.kl.is_finite() {
        return Err(Error::NonFinite("kl".into()));
    }

    let mut grads = GradStore::new();
    let n = x.shape()[0] as f64;
    let numel = x.len() as f64;

    // d recon / d x_hat for the elementwise mean squared error
    let gx_hat = (&x_hat - x) * (2.0 / numel);
    let gz = model
        .decoder
        .net
        .backward(gx_hat.into_dyn(), &mut dec_caches, "dec/", &mut grads);
    let gz = gz.into_dimensionality::<Ix2>().unwrap();

    // reparameterization: dz/dmu = 1, dz/dlogvar = noise * exp(logvar/2) / 2
    // KL (batch mean): d/dmu = beta * mu / N, d/dlogvar = beta (e^l - 1) / 2N
    let gmu = &gz + &(&stats.mu * (beta / n));
    let sigma_half = stats.logvar.mapv(|l| 0.5 * (0.5 * l).exp());
    let glogvar =
        &gz * noise * &sigma_half + stats.logvar.mapv(|l| beta * (l.exp() - 1.0) / (2.0 * n));

    let gf_mu = model.mu_head.backward(&features, &gmu, "mu", &mut grads);
    let gf_logvar = model
        .logvar_head
        .backward(&features, &glogvar, "logvar", &mut grads);
    let gfeat = gf_mu + gf_logvar;

    model
        .encoder
        .net
        .backward(gfeat.into_dyn(), &mut enc_caches, "enc/", &mut grads);

    Ok((terms, grads))
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params_checked: usize,
    pub max_rel_err: f64,
    pub worst_path: String,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Checks every parameter gradient of the total ELBO against central
/// finite differences with the given step. Relative error uses the
/// larger of the two magnitudes with a small floor so near-zero
/// gradients compare on an absolute scale.
pub fn gradient_check(
    model: &mut VaeModel,
    x: &Array4<f64>,
    beta: f64,
    noise: &Array2<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = elbo_step(model, x, beta, noise)?;

    let mut paths: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |p, v| paths.push((p.to_string(), v.len())));

    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst_path = String::new();
    for (path, len) in &paths {
        let analytic = grads
            .get(path)
            .unwrap_or_else(|| panic!("missing gradient for {path}"))
            .clone();
        let flat = analytic.as_slice().expect("contiguous gradient");
        for (i, &analytic_i) in flat.iter().enumerate().take(*len) {
            let nudge = |m: &mut VaeModel, delta: f64| {
                m.visit_params_mut(&mut |p, mut v| {
                    if p == path {
                        v.as_slice_mut().unwrap()[i] += delta;
                    }
                });
            };
            nudge(model, step);
            let up = elbo_forward(model, x, beta, noise)?.total;
            nudge(model, -2.0 * step);
            let down = elbo_forward(model, x, beta, noise)?.total;
            nudge(model, step);
            let numeric = (up - down) / (2.0 * step);
            let denom = numeric.abs().max(analytic_i.abs()).max(1e-6);
            let rel = (numeric - analytic_i).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_path = format!("{path}[{i}]");
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        params_checked: checked,
        max_rel_err,
        worst_path,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::standard_normal;
    use ndarray::{arr2, Ix4};
    use rand::SeedableRng;

    fn stats(mu: Vec<f64>, logvar: Vec<f64>) -> LatentStats {
        let d = mu.len();
        LatentStats {
            mu: Array2::from_shape_vec((1, d), mu).unwrap(),
            logvar: Array2::from_shape_vec((1, d), logvar).unwrap(),
        }
    }

    #[test]
    fn kl_matches_closed_form_hand_cases() {
        assert!(kl_divergence(&stats(vec![0.0], vec![0.0])).unwrap().abs() < 1e-9);
        let half = kl_divergence(&stats(vec![1.0], vec![0.0])).unwrap();
        assert!((half - 0.5).abs() < 1e-9);
        let ln2 = kl_divergence(&stats(vec![0.0], vec![2.0f64.ln()])).unwrap();
        assert!((ln2 - 0.5 * (2.0 - 1.0 - 2.0f64.ln())).abs() < 1e-9);
        assert!((ln2 - 0.15342640972).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let mu = standard_normal(&[1, 4], &mut rng)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let logvar = standard_normal(&[1, 4], &mut rng)
                .into_dimensionality::<Ix2>()
                .unwrap()
                * 2.0;
            let kl = kl_divergence(&LatentStats { mu, logvar }).unwrap();
            assert!(kl >= 0.0, "kl {kl}");
        }
    }

    #[test]
    fn kl_zero_only_at_standard_normal() {
        assert_eq!(
            kl_divergence(&stats(vec![0.0, 0.0], vec![0.0, 0.0])).unwrap(),
            0.0
        );
        assert!(kl_divergence(&stats(vec![0.1, 0.0], vec![0.0, 0.0])).unwrap() > 0.0);
        assert!(kl_divergence(&stats(vec![0.0, 0.0], vec![0.1, 0.0])).unwrap() > 0.0);
    }

    #[test]
    fn kl_rejects_non_finite_stats() {
        let bad = stats(vec![f64::NAN], vec![0.0]);
        assert!(matches!(kl_divergence(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reparameterize_hand_cases() {
        let s = stats(vec![1.0, 2.0], vec![4.0f64.ln(), 0.0]);
        let zero = arr2(&[[0.0, 0.0]]);
        assert_eq!(reparameterize(&s, &zero).unwrap(), arr2(&[[1.0, 2.0]]));

        let ones = arr2(&[[1.0, 1.0]]);
        let z = reparameterize(&s, &ones).unwrap();
        assert!((z[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((z[[0, 1]] - 3.0).abs() < 1e-12);

        let unit = stats(vec![0.5, -0.5], vec![0.0, 0.0]);
        let n = arr2(&[[0.25, -0.25]]);
        let z = reparameterize(&unit, &n).unwrap();
        assert_eq!(z, arr2(&[[0.75, -0.75]]));

        let short = arr2(&[[1.0]]);
        assert!(reparameterize(&s, &short).is_err());
    }

    #[test]
    fn reparameterized_sample_mean_approaches_mu() {
        let s = stats(vec![0.5, -1.0], vec![0.0, 4.0f64.ln()]);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut sum = [0.0f64; 2];
        for _ in 0..n {
            let noise = standard_normal(&[1, 2], &mut rng)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let z = reparameterize(&s, &noise).unwrap();
            sum[0] += z[[0, 0]];
            sum[1] += z[[0, 1]];
        }
        let sigmas = [1.0, 2.0];
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let bound = 3.0 * sigmas[i] / (n as f64).sqrt();
            assert!((mean - s.mu[[0, i]]).abs() < bound, "coord {i}: {mean}");
        }
    }

    #[test]
    fn reconstruction_loss_hand_cases() {
        let x = Array4::zeros((1, 1, 1, 2));
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);

        let ones = Array4::ones((1, 1, 1, 2));
        assert_eq!(reconstruction_loss(&x, &ones).unwrap(), 1.0);

        let a = Array4::from_shape_vec((1, 1, 1, 2), vec![0.0, 0.5]).unwrap();
        let b = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.5]).unwrap();
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.125).abs() < 1e-12);

        let wide = Array4::zeros((1, 1, 1, 3));
        assert!(reconstruction_loss(&x, &wide).is_err());
    }

    #[test]
    fn beta_schedule_ramps_and_saturates() {
        assert_eq!(beta_schedule(0, 100), 0.0);
        assert_eq!(beta_schedule(50, 100), 0.5);
        assert_eq!(beta_schedule(100, 100), 1.0);
        assert_eq!(beta_schedule(300, 100), 1.0);
        let mut prev = -1.0;
        for epoch in 0..=300 {
            let b = beta_schedule(epoch, 100);
            assert!((0.0..=1.0).contains(&b));
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn elbo_terms_identity_and_linearity() {
        let x = Array4::from_elem((1, 1, 2, 2), 0.3);
        let standard = stats(vec![0.0], vec![0.0]);
        let zero = elbo_loss(&x, &x, &standard, 0.7).unwrap();
        assert_eq!(zero.total, 0.0);

        let off = stats(vec![1.0], vec![0.0]);
        let at0 = elbo_loss(&x, &x, &off, 0.0).unwrap();
        assert_eq!(at0.total, at0.recon);

        let x_hat = Array4::from_elem((1, 1, 2, 2), 0.8);
        let t = elbo_loss(&x, &x_hat, &off, 0.5).unwrap();
        assert!((t.total - (t.recon + 0.5 * t.kl)).abs() < 1e-15);

        // beta=0.5 kl=0.5: binary-exact linearity
        let t1 = elbo_loss(&x, &x_hat, &off, 0.5).unwrap();
        let t2 = elbo_loss(&x, &x_hat, &off, 0.25).unwrap();
        assert_eq!(t1.total - t2.total, (0.5 - 0.25) * t1.kl);

        assert!(elbo_loss(&x, &x_hat, &off, 1.5).is_err());
    }

    #[test]
    fn fixed_hand_terms_compose() {
        // recon=1.0, kl=0.5, beta=0.5 -> total 1.25
        let x = Array4::zeros((1, 1, 1, 2));
        let ones = Array4::ones((1, 1, 1, 2));
        let t = elbo_loss(&x, &ones, &stats(vec![1.0], vec![0.0]), 0.5).unwrap();
        assert_eq!(t.recon, 1.0);
        assert!((t.kl - 0.5).abs() < 1e-12);
        assert!((t.total - 1.25).abs() < 1e-12);
    }

    fn tiny_vae(rng: &mut ChaCha8Rng) -> VaeModel {
        let spec = BackboneSpec::toy().with_widths(vec![2, 3]);
        VaeModel::new(spec, 8, 3, rng).unwrap()
    }

    #[test]
    fn zero_image_through_zeroed_heads_gives_zero_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vae = tiny_vae(&mut rng);
        vae.mu_head.w.fill(0.0);
        vae.logvar_head.w.fill(0.0);
        let x = Array4::zeros((2, 3, 8, 8));
        let stats = vae.encode(&x).unwrap();
        assert!(stats.mu.iter().all(|v| *v == 0.0));
        assert!(stats.logvar.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vae = tiny_vae(&mut rng);
        let x = standard_normal(&[4, 3, 8, 8], &mut rng)
            .into_dimensionality::<Ix4>()
            .unwrap()
            .mapv(|v| v.abs().min(1.0));
        let a = vae.encode(&x).unwrap();
        assert_eq!(a.mu.shape(), [4, 3]);
        assert_eq!(a.logvar.shape(), [4, 3]);
        let b = vae.encode(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_roundtrip_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vae = tiny_vae(&mut rng);
        let z = standard_normal(&[2, 3], &mut rng)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let y = vae.decode(&z).unwrap();
        assert_eq!(y.shape(), [2, 3, 8, 8]);
        assert_eq!(vae.decode(&z).unwrap(), y);
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut vae = tiny_vae(&mut rng);
        let x = standard_normal(&[2, 3, 8, 8], &mut rng)
            .into_dimensionality::<Ix4>()
            .unwrap()
            .mapv(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let noise = standard_normal(&[2, 3], &mut rng)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let report = gradient_check(&mut vae, &x, 0.7, &noise, 1e-4, 1e-3).unwrap();
        assert!(report.params_checked > 100);
        assert!(
            report.passed(),
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_path
        );
    }

    #[test]
    fn epoch_zero_total_is_exactly_recon() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vae = tiny_vae(&mut rng);
        let x = standard_normal(&[2, 3, 8, 8], &mut rng)
            .into_dimensionality::<Ix4>()
            .unwrap()
            .mapv(|v| (0.5 + 0.1 * v).clamp(0.0, 1.0));
        let noise = Array2::zeros((2, 3));
        let beta = beta_schedule(0, 50);
        let terms = elbo_forward(&vae, &x, beta, &noise).unwrap();
        assert_eq!(terms.total, terms.recon);
        assert!(terms.kl > 0.0);
    }
}
