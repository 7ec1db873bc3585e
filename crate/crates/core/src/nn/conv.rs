use ndarray::{s, Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use super::init::trunc_normal;

/// 2-D convolution over NCHW tensors, weight layout `[out, in/groups, kh, kw]`.
///
/// Forward and backward lower onto GEMM through an explicit im2col buffer;
/// `groups == in_channels` gives a depthwise convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Truncated-normal weights with the given std, zero biases.
    /// `in_channels` must be divisible by `groups`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(in_channels % groups, 0);
        assert_eq!(out_channels % groups, 0);
        let w = trunc_normal(
            &[out_channels, in_channels / groups, kernel, kernel],
            std,
            rng,
        )
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
        Self {
            w,
            b: Array1::zeros(out_channels),
            stride,
            padding,
            groups,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.w.shape()[2];
        let kw = self.w.shape()[3];
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    fn im2col(&self, x: &Array4<f64>, n: usize, g: usize, ho: usize, wo: usize) -> Array2<f64> {
        let (kh, kw) = (self.w.shape()[2], self.w.shape()[3]);
        let cg = self.w.shape()[1];
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (s, p) = (self.stride, self.padding);
        let mut col = Array2::<f64>::zeros((cg * kh * kw, ho * wo));
        for c in 0..cg {
            let ch = g * cg + c;
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    for oi in 0..ho {
                        let ii = (oi * s + ki) as isize - p as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * s + kj) as isize - p as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            col[[row, oi * wo + oj]] = x[[n, ch, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(cin, self.in_channels(), "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let cout = self.out_channels();
        let cog = cout / self.groups;
        let cg = self.w.shape()[1];
        let (kh, kw) = (self.w.shape()[2], self.w.shape()[3]);
        let mut y = Array4::<f64>::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for g in 0..self.groups {
                let col = self.im2col(x, ni, g, ho, wo);
                let w_mat = self
                    .w
                    .slice(s![g * cog..(g + 1) * cog, .., .., ..])
                    .to_shape((cog, cg * kh * kw))
                    .expect("weight reshape")
                    .to_owned();
                let out = w_mat.dot(&col); // [cog, ho*wo]
                for oc in 0..cog {
                    let ch = g * cog + oc;
                    let bias = self.b[ch];
                    for oi in 0..ho {
                        for oj in 0..wo {
                            y[[ni, ch, oi, oj]] = out[[oc, oi * wo + oj]] + bias;
                        }
                    }
                }
            }
        }
        y
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(
        &self,
        x: &Array4<f64>,
        gy: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
        let (n, _cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
        let cout = self.out_channels();
        let cog = cout / self.groups;
        let cg = self.w.shape()[1];
        let (kh, kw) = (self.w.shape()[2], self.w.shape()[3]);
        let (st, p) = (self.stride, self.padding);

        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        let mut gw_mat = Array2::<f64>::zeros((cout, cg * kh * kw));
        let mut gb = Array1::<f64>::zeros(cout);

        for ni in 0..n {
            for g in 0..self.groups {
                let col = self.im2col(x, ni, g, ho, wo);
                let mut gy_mat = Array2::<f64>::zeros((cog, ho * wo));
                for oc in 0..cog {
                    let ch = g * cog + oc;
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let v = gy[[ni, ch, oi, oj]];
                            gy_mat[[oc, oi * wo + oj]] = v;
                            gb[ch] += v;
                        }
                    }
                }
                let gw_part = gy_mat.dot(&col.t()); // [cog, cg*kh*kw]
                let mut gw_slice = gw_mat.slice_mut(s![g * cog..(g + 1) * cog, ..]);
                gw_slice += &gw_part;

                let w_mat = self
                    .w
                    .slice(s![g * cog..(g + 1) * cog, .., .., ..])
                    .to_shape((cog, cg * kh * kw))
                    .expect("weight reshape")
                    .to_owned();
                let gcol = w_mat.t().dot(&gy_mat); // [cg*kh*kw, ho*wo]

                // col2im scatter-add back onto the padded input window.
                for c in 0..cg {
                    let ch = g * cg + c;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let row = (c * kh + ki) * kw + kj;
                            for oi in 0..ho {
                                let ii = (oi * st + ki) as isize - p as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for oj in 0..wo {
                                    let jj = (oj * st + kj) as isize - p as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    gx[[ni, ch, ii as usize, jj as usize]] +=
                                        gcol[[row, oi * wo + oj]];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gw = gw_mat
            .to_shape((cout, cg, kh, kw))
            .expect("gw reshape")
            .to_owned();
        (gx, gw, gb)
    }
}
