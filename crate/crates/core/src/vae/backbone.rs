use ndarray::{Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::init::he_std;
use crate::nn::layer::{Block, Cache, Layer, LayerNorm, LayerNorm2d, LayerScale, Linear, RunMode};
use crate::nn::params::{GradStore, Model};

/// Weight std for all convolutions in the convnext-style family.
const CONVNEXT_INIT_STD: f64 = 0.02;
/// Residual branch scale at init, small enough to start near identity.
const LAYER_SCALE_INIT: f64 = 1e-6;
/// Block counts per stage for the convnext-style family.
const CONVNEXT_DEPTHS: [usize; 4] = [3, 3, 9, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ConvnextTinyStyle,
    ToyCnn,
}

impl Family {
    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Family::ConvnextTinyStyle => vec![96, 192, 384, 768],
            Family::ToyCnn => vec![8, 16, 32],
        }
    }

    /// Total spatial downsampling factor from input to pooled features.
    fn downsample_factor(self, stages: usize) -> usize {
        match self {
            // stem /4, then one /2 between consecutive stages
            Family::ConvnextTinyStyle => 4 << (stages - 1),
            Family::ToyCnn => 1 << stages,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    ExternalPretrained,
}

/// Structural description of an encoder backbone. `init` records where
/// the weights are expected to come from; construction always starts
/// random and pretrained weights are loaded from a checkpoint afterwards.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub stage_widths: Vec<usize>,
    pub feature_dim: usize,
    pub init: InitKind,
}

impl BackboneSpec {
    pub fn toy() -> Self {
        Self::with_family(Family::ToyCnn)
    }

    pub fn convnext() -> Self {
        Self::with_family(Family::ConvnextTinyStyle)
    }

    pub fn with_family(family: Family) -> Self {
        let widths = family.default_widths();
        Self {
            family,
            feature_dim: *widths.last().unwrap(),
            stage_widths: widths,
            init: InitKind::Random,
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.feature_dim = *widths.last().expect("at least one stage width");
        self.stage_widths = widths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::InvalidConfig("stage widths must be positive".into()));
        }
        if self.feature_dim != *self.stage_widths.last().unwrap() {
            return Err(Error::InvalidConfig(format!(
                "feature_dim {} must equal the final stage width {}",
                self.feature_dim,
                self.stage_widths.last().unwrap()
            )));
        }
        if self.family == Family::ConvnextTinyStyle && self.stage_widths.len() != 4 {
            return Err(Error::InvalidConfig(
                "convnext_tiny_style takes exactly 4 stage widths".into(),
            ));
        }
        Ok(())
    }

    fn check_resolution(&self, resolution: usize) -> Result<()> {
        let factor = self.family.downsample_factor(self.stage_widths.len());
        if resolution < factor || !resolution.is_multiple_of(factor) {
            return Err(Error::InvalidConfig(format!(
                "resolution {resolution} must be a positive multiple of {factor} for this backbone"
            )));
        }
        Ok(())
    }
}

/// An ordered list of named blocks; parameter paths are
/// `{section}/{layer}/{tensor}`.
#[derive(Debug, Clone)]
pub struct SectionNet {
    pub sections: Vec<(String, Block)>,
}

impl SectionNet {
    pub fn forward_cached(
        &self,
        mut x: ArrayD<f64>,
        mode: RunMode,
        mut rng: Option<&mut ChaCha8Rng>,
        caches: &mut Vec<Cache>,
    ) -> ArrayD<f64> {
        for (_, block) in &self.sections {
            x = block.forward_cached(x, mode, rng.as_deref_mut(), caches);
        }
        x
    }

    pub fn forward(
        &self,
        x: ArrayD<f64>,
        mode: RunMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> ArrayD<f64> {
        let mut caches = Vec::new();
        self.forward_cached(x, mode, rng, &mut caches)
    }

    /// Runs sections `0..to` without caching; the result can feed
    /// `forward_from(to, ..)` when the prefix is frozen.
    pub fn forward_prefix(&self, to: usize, mut x: ArrayD<f64>) -> ArrayD<f64> {
        for (_, block) in self.sections.iter().take(to) {
            x = block.forward(x, RunMode::Eval, None);
        }
        x
    }

    /// Runs sections `from..end`, caching exactly what a later
    /// `backward_from(from, ..)` will consume.
    pub fn forward_from(
        &self,
        from: usize,
        mut x: ArrayD<f64>,
        mode: RunMode,
        mut rng: Option<&mut ChaCha8Rng>,
        caches: &mut Vec<Cache>,
    ) -> ArrayD<f64> {
        for (_, block) in self.sections.iter().skip(from) {
            x = block.forward_cached(x, mode, rng.as_deref_mut(), caches);
        }
        x
    }

    /// Backward through sections `from..end`, consuming their caches from
    /// the tail of `caches`. Earlier sections' caches stay in the vector
    /// and their parameters receive no gradients. `root` prefixes every
    /// gradient path, matching how the owning model names its params.
    pub fn backward_from(
        &self,
        from: usize,
        mut gy: ArrayD<f64>,
        caches: &mut Vec<Cache>,
        root: &str,
        grads: &mut GradStore,
    ) -> ArrayD<f64> {
        for (name, block) in self.sections.iter().skip(from).rev() {
            gy = block.backward_cached(gy, caches, &format!("{root}{name}"), grads);
        }
        gy
    }

    pub fn backward(
        &self,
        gy: ArrayD<f64>,
        caches: &mut Vec<Cache>,
        root: &str,
        grads: &mut GradStore,
    ) -> ArrayD<f64> {
        self.backward_from(0, gy, caches, root, grads)
    }

    pub fn section_index(&self, name: &str) -> Option<usize> {
        self.sections.iter().position(|(n, _)| n == name)
    }

    pub fn visit(&self, root: &str, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        for (name, block) in &self.sections {
            block.visit(&format!("{root}{name}"), f);
        }
    }

    pub fn visit_mut(&mut self, root: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        for (name, block) in &mut self.sections {
            block.visit_mut(&format!("{root}{name}"), f);
        }
    }
}

fn convnext_block(width: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Residual(Block::new(vec![
        Layer::Conv(Conv2d::new(
            width,
            width,
            7,
            1,
            3,
            width,
            CONVNEXT_INIT_STD,
            rng,
        )),
        Layer::Norm2d(LayerNorm2d::new(width)),
        Layer::Conv(Conv2d::new(
            width,
            4 * width,
            1,
            1,
            0,
            1,
            CONVNEXT_INIT_STD,
            rng,
        )),
        Layer::Gelu,
        Layer::Conv(Conv2d::new(
            4 * width,
            width,
            1,
            1,
            0,
            1,
            CONVNEXT_INIT_STD,
            rng,
        )),
        Layer::Scale(LayerScale::new(width, LAYER_SCALE_INIT)),
    ]))
}

/// Convolutional encoder ending in a pooled feature vector.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: BackboneSpec,
    pub net: SectionNet,
    pub resolution: usize,
}

impl Encoder {
    pub fn new(spec: BackboneSpec, resolution: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        spec.check_resolution(resolution)?;
        let w = &spec.stage_widths;
        let mut sections = Vec::new();
        match spec.family {
            Family::ToyCnn => {
                let mut cin = 3;
                for (i, &cout) in w.iter().enumerate() {
                    let std = he_std(cin * 9);
                    sections.push((
                        format!("stage{i}"),
                        Block::new(vec![
                            Layer::Conv(Conv2d::new(cin, cout, 3, 2, 1, 1, std, rng)),
                            Layer::Gelu,
                        ]),
                    ));
                    cin = cout;
                }
                sections.push(("pool".to_string(), Block::new(vec![Layer::AvgPoolAll])));
            }
            Family::ConvnextTinyStyle => {
                sections.push((
                    "stem".to_string(),
                    Block::new(vec![
                        Layer::Conv(Conv2d::new(3, w[0], 4, 4, 0, 1, CONVNEXT_INIT_STD, rng)),
                        Layer::Norm2d(LayerNorm2d::new(w[0])),
                    ]),
                ));
                for (i, &width) in w.iter().enumerate() {
                    let mut layers = Vec::new();
                    if i > 0 {
                        layers.push(Layer::Norm2d(LayerNorm2d::new(w[i - 1])));
                        layers.push(Layer::Conv(Conv2d::new(
                            w[i - 1],
                            width,
                            2,
                            2,
                            0,
                            1,
                            CONVNEXT_INIT_STD,
                            rng,
                        )));
                    }
                    for _ in 0..CONVNEXT_DEPTHS[i] {
                        layers.push(convnext_block(width, rng));
                    }
                    sections.push((format!("stage{i}"), Block::new(layers)));
                }
                sections.push((
                    "pool_norm".to_string(),
                    Block::new(vec![Layer::AvgPoolAll, Layer::Norm(LayerNorm::new(w[3]))]),
                ));
            }
        }
        Ok(Self {
            spec,
            net: SectionNet { sections },
            resolution,
        })
    }

    /// Section names making up the last stage and its normalization;
    /// everything else counts as "earlier stages" for freeze purposes.
    pub fn final_stage_sections(&self) -> Vec<String> {
        match self.spec.family {
            Family::ToyCnn => vec![format!("stage{}", self.spec.stage_widths.len() - 1)],
            Family::ConvnextTinyStyle => vec!["stage3".to_string(), "pool_norm".to_string()],
        }
    }

    pub fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let want = [x.shape()[0], 3, self.resolution, self.resolution];
        if x.shape() != want {
            return Err(Error::ShapeMismatch {
                context: "encoder input".into(),
                expected: format!("[N, 3, {}, {}]", self.resolution, self.resolution),
                actual: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Pooled features `[N, feature_dim]`.
    pub fn forward(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let y = self.net.forward(x.clone().into_dyn(), RunMode::Eval, None);
        Ok(y.into_dimensionality::<Ix2>().unwrap())
    }

    pub fn forward_cached(&self, x: &Array4<f64>, caches: &mut Vec<Cache>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let y = self
            .net
            .forward_cached(x.clone().into_dyn(), RunMode::Train, None, caches);
        Ok(y.into_dimensionality::<Ix2>().unwrap())
    }
}

impl Model for Encoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        self.net.visit("", f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        self.net.visit_mut("", f);
    }
}

/// Upsampling decoder mirroring an encoder: reversed stage widths, one
/// 2x upsample per encoder downsample, sigmoid output in [0,1].
#[derive(Debug, Clone)]
pub struct Decoder {
    pub net: SectionNet,
    pub resolution: usize,
    pub latent_dim: usize,
}

impl Decoder {
    pub fn new(
        spec: &BackboneSpec,
        resolution: usize,
        latent_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        spec.check_resolution(resolution)?;
        let w = &spec.stage_widths;
        let top = *w.last().unwrap();
        let mut sections = Vec::new();
        match spec.family {
            Family::ToyCnn => {
                let stages = w.len();
                let grid = resolution / (1 << stages);
                sections.push((
                    "input".to_string(),
                    Block::new(vec![
                        Layer::Linear(Linear::new(latent_dim, top, rng)),
                        Layer::Gelu,
                        Layer::ReshapeTo(vec![top, 1, 1]),
                        Layer::Upsample(grid),
                    ]),
                ));
                let rev: Vec<usize> = w.iter().rev().copied().collect();
                for i in 0..stages {
                    let cin = rev[i];
                    let cout = if i + 1 < stages {
                        rev[i + 1]
                    } else {
                        rev[stages - 1]
                    };
                    let std = he_std(cin * 9);
                    sections.push((
                        format!("stage{i}"),
                        Block::new(vec![
                            Layer::Upsample(2),
                            Layer::Conv(Conv2d::new(cin, cout, 3, 1, 1, 1, std, rng)),
                            Layer::Gelu,
                        ]),
                    ));
                }
                let last = rev[stages - 1];
                sections.push((
                    "out".to_string(),
                    Block::new(vec![
                        Layer::Conv(Conv2d::new(last, 3, 3, 1, 1, 1, he_std(last * 9), rng)),
                        Layer::Sigmoid,
                    ]),
                ));
            }
            Family::ConvnextTinyStyle => {
                let grid = resolution / 32;
                sections.push((
                    "input".to_string(),
                    Block::new(vec![
                        Layer::Linear(Linear::new(latent_dim, top, rng)),
                        Layer::Gelu,
                        Layer::ReshapeTo(vec![top, 1, 1]),
                        Layer::Upsample(grid),
                    ]),
                ));
                // mirror the encoder stages: widths reversed, depths reversed
                let rev_w: Vec<usize> = w.iter().rev().copied().collect();
                let rev_d: Vec<usize> = CONVNEXT_DEPTHS.iter().rev().copied().collect();
                for i in 0..rev_w.len() {
                    let mut layers = Vec::new();
                    if i > 0 {
                        layers.push(Layer::Upsample(2));
                        layers.push(Layer::Conv(Conv2d::new(
                            rev_w[i - 1],
                            rev_w[i],
                            1,
                            1,
                            0,
                            1,
                            CONVNEXT_INIT_STD,
                            rng,
                        )));
                    }
                    for _ in 0..rev_d[i] {
                        layers.push(convnext_block(rev_w[i], rng));
                    }
                    sections.push((format!("stage{i}"), Block::new(layers)));
                }
                sections.push((
                    "out".to_string(),
                    Block::new(vec![
                        Layer::Upsample(4),
                        Layer::Norm2d(LayerNorm2d::new(rev_w[3])),
                        Layer::Conv(Conv2d::new(rev_w[3], 3, 3, 1, 1, 1, CONVNEXT_INIT_STD, rng)),
                        Layer::Sigmoid,
                    ]),
                ));
            }
        }
        Ok(Self {
            net: SectionNet { sections },
            resolution,
            latent_dim,
        })
    }

    pub fn check_input(&self, z: &Array2<f64>) -> Result<()> {
        if z.shape()[1] != self.latent_dim {
            return Err(Error::ShapeMismatch {
                context: "decoder input".into(),
                expected: format!("[N, {}]", self.latent_dim),
                actual: format!("{:?}", z.shape()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, z: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_input(z)?;
        let y = self.net.forward(z.clone().into_dyn(), RunMode::Eval, None);
        Ok(y.into_dimensionality::<Ix4>().unwrap())
    }

    pub fn forward_cached(&self, z: &Array2<f64>, caches: &mut Vec<Cache>) -> Result<Array4<f64>> {
        self.check_input(z)?;
        let y = self
            .net
            .forward_cached(z.clone().into_dyn(), RunMode::Train, None, caches);
        Ok(y.into_dimensionality::<Ix4>().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::standard_normal;
    use crate::nn::params::{param_count, Model};
    use rand::SeedableRng;

    struct NetView<'a>(&'a SectionNet);
    impl Model for NetView<'_> {
        fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
            self.0.visit("", f);
        }
        fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
            unimplemented!("read-only view");
        }
    }

    #[test]
    fn toy_encoder_produces_feature_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(BackboneSpec::toy(), 16, &mut rng).unwrap();
        let x = standard_normal(&[4, 3, 16, 16], &mut rng)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let f = enc.forward(&x).unwrap();
        assert_eq!(f.shape(), [4, 32]);
        let again = enc.forward(&x).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn encoder_rejects_wrong_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Encoder::new(BackboneSpec::toy(), 12, &mut rng).is_err());
        let enc = Encoder::new(BackboneSpec::toy(), 16, &mut rng).unwrap();
        let x = Array4::zeros((1, 3, 8, 8));
        assert!(matches!(enc.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn convnext_style_has_four_stages_and_pool_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = BackboneSpec::convnext().with_widths(vec![4, 8, 12, 16]);
        let enc = Encoder::new(spec, 32, &mut rng).unwrap();
        let names: Vec<&str> = enc.net.sections.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["stem", "stage0", "stage1", "stage2", "stage3", "pool_norm"]
        );
        assert_eq!(enc.final_stage_sections(), ["stage3", "pool_norm"]);

        let x = standard_normal(&[2, 3, 32, 32], &mut rng)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let f = enc.forward(&x).unwrap();
        assert_eq!(f.shape(), [2, 16]);
    }

    #[test]
    fn convnext_spec_requires_four_widths() {
        let spec = BackboneSpec::convnext().with_widths(vec![4, 8, 12]);
        assert!(spec.validate().is_err());
        let mut bad = BackboneSpec::toy();
        bad.feature_dim = 7;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decoder_mirrors_encoder_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for resolution in [8usize, 16, 32] {
            let spec = BackboneSpec::toy();
            let dec = Decoder::new(&spec, resolution, 16, &mut rng).unwrap();
            let z = standard_normal(&[2, 16], &mut rng)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let y = dec.forward(&z).unwrap();
            assert_eq!(y.shape(), [2, 3, resolution, resolution]);
            assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn convnext_decoder_mirrors_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = BackboneSpec::convnext().with_widths(vec![4, 6, 8, 10]);
        let dec = Decoder::new(&spec, 32, 12, &mut rng).unwrap();
        let z = standard_normal(&[1, 12], &mut rng)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let y = dec.forward(&z).unwrap();
        assert_eq!(y.shape(), [1, 3, 32, 32]);
        let names: Vec<&str> = dec.net.sections.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["input", "stage0", "stage1", "stage2", "stage3", "out"]
        );
    }

    #[test]
    fn toy_decoder_param_count_is_within_twice_the_encode_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = BackboneSpec::toy();
        let latent = 256;
        let enc = Encoder::new(spec.clone(), 16, &mut rng).unwrap();
        let dec = Decoder::new(&spec, 16, latent, &mut rng).unwrap();
        // the encode path includes the two latent projection heads
        let heads = 2 * (spec.feature_dim * latent + latent);
        let enc_params = param_count(&NetView(&enc.net)) + heads;
        let dec_params = param_count(&NetView(&dec.net));
        let ratio = dec_params as f64 / enc_params as f64;
        assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn decoder_rejects_latent_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = Decoder::new(&BackboneSpec::toy(), 16, 8, &mut rng).unwrap();
        let z = Array2::zeros((1, 9));
        assert!(matches!(dec.forward(&z), Err(Error::ShapeMismatch { .. })));
    }
}
