//! Small convolutional encoder-decoder denoiser with additive timestep
//! conditioning. Three resolutions, one residual block per level, nearest
//! upsampling with additive skips.

use ndarray::{Array1, Array3, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    silu, silu_backward, silu_vec, silu_vec_backward, timestep_embedding, upsample2x,
    upsample2x_backward, Conv2d, Conv2dCache, Dense, DenseCache, GroupNorm, GroupNormCache,
    Parameterized,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub groups: usize,
    pub temb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            channels: [16, 32, 48],
            groups: 4,
            temb_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn describe(&self) -> String {
        format!(
            "unet-v1 in={} ch={:?} groups={} temb={}",
            self.in_channels, self.channels, self.groups, self.temb_dim
        )
    }
}

/// Residual block: x + conv3x3(silu(gn(x))) with a per-channel timestep bias
/// added to the convolution output.
#[derive(Debug, Clone)]
struct ConvBlock {
    gn: GroupNorm,
    conv: Conv2d,
    tproj: Dense,
}

struct ConvBlockCache {
    gn_cache: GroupNormCache,
    gn_out: Array3<f64>,
    conv_cache: Conv2dCache,
    tproj_cache: DenseCache,
}

impl ConvBlock {
    fn new(channels: usize, groups: usize, temb_dim: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            gn: GroupNorm::new(groups.min(channels), channels),
            conv: Conv2d::new(channels, channels, 3, 1, 1, rng),
            tproj: Dense::new(temb_dim, channels, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>, temb: &Array1<f64>) -> (Array3<f64>, ConvBlockCache) {
        let (gn_out, gn_cache) = self.gn.forward_cached(x);
        let act = silu(&gn_out);
        let (mut h, conv_cache) = self.conv.forward_cached(&act);
        let (bias, tproj_cache) = self.tproj.forward_cached(temb);
        for (ci, mut plane) in h.outer_iter_mut().enumerate() {
            plane += bias[ci];
        }
        let y = x + &h;
        (
            y,
            ConvBlockCache {
                gn_cache,
                gn_out,
                conv_cache,
                tproj_cache,
            },
        )
    }

    /// Returns (grad_x, grad_temb, [gn gamma, gn beta, conv w, conv b,
    /// tproj w, tproj b]).
    fn backward(
        &self,
        cache: &ConvBlockCache,
        grad_y: &Array3<f64>,
    ) -> (Array3<f64>, Array1<f64>, Vec<ArrayD<f64>>) {
        let bias_grad = Array1::from_iter(grad_y.outer_iter().map(|plane| plane.sum()));
        let (grad_temb, tproj_w, tproj_b) = self.tproj.backward(&cache.tproj_cache, &bias_grad);
        let (grad_act, conv_w, conv_b) = self.conv.backward(&cache.conv_cache, grad_y);
        let grad_gn_out = silu_backward(&cache.gn_out, &grad_act);
        let (grad_x_part, gn_gamma, gn_beta) = self.gn.backward(&cache.gn_cache, &grad_gn_out);
        let grad_x = grad_y + &grad_x_part;
        (
            grad_x,
            grad_temb,
            vec![
                gn_gamma.into_dyn(),
                gn_beta.into_dyn(),
                conv_w.into_dyn(),
                conv_b.into_dyn(),
                tproj_w.into_dyn(),
                tproj_b.into_dyn(),
            ],
        )
    }
}

impl Parameterized for ConvBlock {
    fn collect_params<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, f64>>) {
        self.gn.collect_params(out);
        self.conv.collect_params(out);
        self.tproj.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        self.gn.collect_params_mut(out);
        self.conv.collect_params_mut(out);
        self.tproj.collect_params_mut(out);
    }
}

/// The denoiser network: predicts the injected noise from a noisy image and
/// the step index.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    temb1: Dense,
    temb2: Dense,
    stem: Conv2d,
    block1: ConvBlock,
    down1: Conv2d,
    block2: ConvBlock,
    down2: Conv2d,
    block3: ConvBlock,
    reduce1: Conv2d,
    block4: ConvBlock,
    reduce2: Conv2d,
    block5: ConvBlock,
    head_gn: GroupNorm,
    head: Conv2d,
}

pub struct UNetCache {
    temb_raw: Array1<f64>,
    temb1_cache: DenseCache,
    temb1_out: Array1<f64>,
    temb2_cache: DenseCache,
    temb: Array1<f64>,
    stem_cache: Conv2dCache,
    b1: ConvBlockCache,
    down1_cache: Conv2dCache,
    b2: ConvBlockCache,
    down2_cache: Conv2dCache,
    b3: ConvBlockCache,
    reduce1_cache: Conv2dCache,
    b4: ConvBlockCache,
    reduce2_cache: Conv2dCache,
    b5: ConvBlockCache,
    head_gn_cache: GroupNormCache,
    head_gn_out: Array3<f64>,
    head_cache: Conv2dCache,
}

impl UNet {
    pub fn new(config: UNetConfig, rng: &mut impl Rng) -> Self {
        let [c0, c1, c2] = config.channels;
        let g = config.groups;
        let td = config.temb_dim;
        UNet {
            temb1: Dense::new(td, td, rng),
            temb2: Dense::new(td, td, rng),
            stem: Conv2d::new(config.in_channels, c0, 3, 1, 1, rng),
            block1: ConvBlock::new(c0, g, td, rng),
            down1: Conv2d::new(c0, c1, 3, 2, 1, rng),
            block2: ConvBlock::new(c1, g, td, rng),
            down2: Conv2d::new(c1, c2, 3, 2, 1, rng),
            block3: ConvBlock::new(c2, g, td, rng),
            reduce1: Conv2d::new(c2, c1, 1, 1, 0, rng),
            block4: ConvBlock::new(c1, g, td, rng),
            reduce2: Conv2d::new(c1, c0, 1, 1, 0, rng),
            block5: ConvBlock::new(c0, g, td, rng),
            head_gn: GroupNorm::new(g.min(c0), c0),
            head: Conv2d::new_zeroed(c0, config.in_channels, 3, 1, 1),
            config,
        }
    }

    pub fn forward(&self, z: &Array3<f64>, t: usize) -> Array3<f64> {
        self.forward_cached(z, t).0
    }

    pub fn forward_cached(&self, z: &Array3<f64>, t: usize) -> (Array3<f64>, UNetCache) {
        let temb_raw = timestep_embedding(t, self.config.temb_dim);
        let (t1, temb1_cache) = self.temb1.forward_cached(&temb_raw);
        let t1_act = silu_vec(&t1);
        let (temb, temb2_cache) = self.temb2.forward_cached(&t1_act);

        let (h0, stem_cache) = self.stem.forward_cached(z);
        let (h1, b1) = self.block1.forward(&h0, &temb);
        let (d1, down1_cache) = self.down1.forward_cached(&h1);
        let (h2, b2) = self.block2.forward(&d1, &temb);
        let (d2, down2_cache) = self.down2.forward_cached(&h2);
        let (h3, b3) = self.block3.forward(&d2, &temb);

        let (r1, reduce1_cache) = self.reduce1.forward_cached(&h3);
        let u1 = upsample2x(&r1) + &h2;
        let (h4, b4) = self.block4.forward(&u1, &temb);
        let (r2, reduce2_cache) = self.reduce2.forward_cached(&h4);
        let u2 = upsample2x(&r2) + &h1;
        let (h5, b5) = self.block5.forward(&u2, &temb);

        let (hg, head_gn_cache) = self.head_gn.forward_cached(&h5);
        let ha = silu(&hg);
        let (out, head_cache) = self.head.forward_cached(&ha);

        (
            out,
            UNetCache {
                temb_raw,
                temb1_cache,
                temb1_out: t1,
                temb2_cache,
                temb,
                stem_cache,
                b1,
                down1_cache,
                b2,
                down2_cache,
                b3,
                reduce1_cache,
                b4,
                reduce2_cache,
                b5,
                head_gn_cache,
                head_gn_out: hg,
                head_cache,
            },
        )
    }

    /// Backpropagates a gradient at the output; returns parameter gradients
    /// in `collect_params` order.
    pub fn backward(&self, cache: &UNetCache, grad_out: &Array3<f64>) -> Vec<ArrayD<f64>> {
        let _ = &cache.temb; // full cache is consumed below
        let (grad_ha, head_w, head_b) = self.head.backward(&cache.head_cache, grad_out);
        let grad_hg = silu_backward(&cache.head_gn_out, &grad_ha);
        let (grad_h5, hgn_gamma, hgn_beta) = self.head_gn.backward(&cache.head_gn_cache, &grad_hg);

        let (grad_u2, mut grad_temb, b5_grads) = self.block5.backward(&cache.b5, &grad_h5);
        let grad_r2 = upsample2x_backward(&grad_u2);
        let grad_h1_skip = grad_u2; // skip connection into u2
        let (grad_h4, red2_w, red2_b) = self.reduce2.backward(&cache.reduce2_cache, &grad_r2);

        let (grad_u1, gt4, b4_grads) = self.block4.backward(&cache.b4, &grad_h4);
        grad_temb += &gt4;
        let grad_r1 = upsample2x_backward(&grad_u1);
        let grad_h2_skip = grad_u1;
        let (grad_h3, red1_w, red1_b) = self.reduce1.backward(&cache.reduce1_cache, &grad_r1);

        let (grad_d2, gt3, b3_grads) = self.block3.backward(&cache.b3, &grad_h3);
        grad_temb += &gt3;
        let (grad_h2_main, down2_w, down2_b) = self.down2.backward(&cache.down2_cache, &grad_d2);
        let grad_h2 = grad_h2_main + &grad_h2_skip;

        let (grad_d1, gt2, b2_grads) = self.block2.backward(&cache.b2, &grad_h2);
        grad_temb += &gt2;
        let (grad_h1_main, down1_w, down1_b) = self.down1.backward(&cache.down1_cache, &grad_d1);
        let grad_h1 = grad_h1_main + &grad_h1_skip;

        let (grad_h0, gt1, b1_grads) = self.block1.backward(&cache.b1, &grad_h1);
        grad_temb += &gt1;
        let (_, stem_w, stem_b) = self.stem.backward(&cache.stem_cache, &grad_h0);

        let (grad_t1_act, t2_w, t2_b) = self.temb2.backward(&cache.temb2_cache, &grad_temb);
        let grad_t1 = silu_vec_backward(&cache.temb1_out, &grad_t1_act);
        let (_, t1_w, t1_b) = self.temb1.backward(&cache.temb1_cache, &grad_t1);
        let _ = &cache.temb_raw;

        let mut grads: Vec<ArrayD<f64>> = Vec::with_capacity(40);
        grads.push(t1_w.into_dyn());
        grads.push(t1_b.into_dyn());
        grads.push(t2_w.into_dyn());
        grads.push(t2_b.into_dyn());
        grads.push(stem_w.into_dyn());
        grads.push(stem_b.into_dyn());
        grads.extend(b1_grads);
        grads.push(down1_w.into_dyn());
        grads.push(down1_b.into_dyn());
        grads.extend(b2_grads);
        grads.push(down2_w.into_dyn());
        grads.push(down2_b.into_dyn());
        grads.extend(b3_grads);
        grads.push(red1_w.into_dyn());
        grads.push(red1_b.into_dyn());
        grads.extend(b4_grads);
        grads.push(red2_w.into_dyn());
        grads.push(red2_b.into_dyn());
        grads.extend(b5_grads);
        grads.push(hgn_gamma.into_dyn());
        grads.push(hgn_beta.into_dyn());
        grads.push(head_w.into_dyn());
        grads.push(head_b.into_dyn());
        grads
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::with_capacity(40);
        self.collect_params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::with_capacity(40);
        self.collect_params_mut(&mut out);
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }
}

impl Parameterized for UNet {
    fn collect_params<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, f64>>) {
        self.temb1.collect_params(out);
        self.temb2.collect_params(out);
        self.stem.collect_params(out);
        self.block1.collect_params(out);
        self.down1.collect_params(out);
        self.block2.collect_params(out);
        self.down2.collect_params(out);
        self.block3.collect_params(out);
        self.reduce1.collect_params(out);
        self.block4.collect_params(out);
        self.reduce2.collect_params(out);
        self.block5.collect_params(out);
        self.head_gn.collect_params(out);
        self.head.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        self.temb1.collect_params_mut(out);
        self.temb2.collect_params_mut(out);
        self.stem.collect_params_mut(out);
        self.block1.collect_params_mut(out);
        self.down1.collect_params_mut(out);
        self.block2.collect_params_mut(out);
        self.down2.collect_params_mut(out);
        self.block3.collect_params_mut(out);
        self.reduce1.collect_params_mut(out);
        self.block4.collect_params_mut(out);
        self.reduce2.collect_params_mut(out);
        self.block5.collect_params_mut(out);
        self.head_gn.collect_params_mut(out);
        self.head.collect_params_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_unet(rng: &mut ChaCha8Rng) -> UNet {
        let cfg = UNetConfig {
            in_channels: 2,
            channels: [4, 6, 8],
            groups: 2,
            temb_dim: 8,
        };
        let mut net = UNet::new(cfg, rng);
        // Head is zero-initialized; give it signal so gradients flow in tests.
        net.head.weight.mapv_inplace(|_| StandardNormal.sample(rng));
        net.head
            .weight
            .mapv_inplace(|v: f64| v * 0.2);
        net
    }

    #[test]
    fn grad_count_matches_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = small_unet(&mut rng);
        let x = Array3::from_shape_simple_fn((2, 8, 8), || StandardNormal.sample(&mut rng));
        let (y, cache) = net.forward_cached(&x, 3);
        let grads = net.backward(&cache, &y.mapv(|_| 1.0));
        let params = net.params();
        assert_eq!(grads.len(), params.len());
        for (g, p) in grads.iter().zip(params.iter()) {
            assert_eq!(g.shape(), p.shape());
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = small_unet(&mut rng);
        let x = Array3::from_shape_simple_fn((2, 8, 8), || StandardNormal.sample(&mut rng));
        let wout = Array3::from_shape_simple_fn((2, 8, 8), || StandardNormal.sample(&mut rng));
        let loss = |n: &UNet| (n.forward(&x, 5) * &wout).sum();

        let (_, cache) = net.forward_cached(&x, 5);
        let grads = net.backward(&cache, &wout);

        // Probe one scalar in every parameter tensor.
        let h = 1e-6;
        let n_params = grads.len();
        for pi in 0..n_params {
            let probe = grads[pi].len() / 2; // middle element
            let analytic = grads[pi].as_slice().unwrap()[probe];
            let mut plus = net.clone();
            {
                let mut views = plus.params_mut();
                views[pi].as_slice_mut().unwrap()[probe] += h;
            }
            let mut minus = net.clone();
            {
                let mut views = minus.params_mut();
                views[pi].as_slice_mut().unwrap()[probe] -= h;
            }
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = num.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (num - analytic).abs() / denom < 1e-5,
                "param {} mismatch: analytic {} vs numeric {}",
                pi,
                analytic,
                num
            );
        }
    }

    #[test]
    fn forward_is_deterministic_and_timestep_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = small_unet(&mut rng);
        let x = Array3::from_shape_simple_fn((2, 8, 8), || StandardNormal.sample(&mut rng));
        let a = net.forward(&x, 2);
        let b = net.forward(&x, 2);
        assert_eq!(a, b);
        let c = net.forward(&x, 7);
        assert!((&a - &c).mapv(f64::abs).sum() > 1e-9);
    }
}
