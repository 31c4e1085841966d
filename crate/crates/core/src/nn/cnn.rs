//! Small convolutional network family used for the classifier under
//! scrutiny, the evaluation oracle and the perceptual embedder.
//!
//! Backward supports gradient injection at the two feature taps (used by the
//! perceptual distance), at the embedding and at the logits, so one code path
//! serves training, input-gradient guidance and feature-space losses.

use ndarray::{Array1, Array3, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, silu, silu_backward, silu_vec, silu_vec_backward,
    Conv2d, Conv2dCache, Dense, DenseCache, Parameterized,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CnnConfig {
    pub in_channels: usize,
    /// Widths of the three strided stages.
    pub widths: [usize; 3],
    pub embed_dim: usize,
    pub num_outputs: usize,
}

impl CnnConfig {
    pub fn describe(&self) -> String {
        format!(
            "cnn-v1 in={} widths={:?} embed={} out={}",
            self.in_channels, self.widths, self.embed_dim, self.num_outputs
        )
    }
}

#[derive(Debug, Clone)]
pub struct SmallCnn {
    pub config: CnnConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    conv4: Conv2d,
    fc_embed: Dense,
    fc_out: Dense,
}

pub struct CnnCache {
    c1_cache: Conv2dCache,
    c1_out: Array3<f64>,
    c2_cache: Conv2dCache,
    c2_out: Array3<f64>,
    pub feat_a: Array3<f64>,
    c3_cache: Conv2dCache,
    c3_out: Array3<f64>,
    pub feat_b: Array3<f64>,
    c4_cache: Conv2dCache,
    c4_out: Array3<f64>,
    c4_act: Array3<f64>,
    fc_embed_cache: DenseCache,
    pub embedding: Array1<f64>,
    fc_out_cache: DenseCache,
    pub logits: Array1<f64>,
}

/// Gradients injected into the backward pass; any subset may be present.
#[derive(Default)]
pub struct CnnBackwardSignal {
    pub grad_logits: Option<Array1<f64>>,
    pub grad_embedding: Option<Array1<f64>>,
    pub grad_feat_a: Option<Array3<f64>>,
    pub grad_feat_b: Option<Array3<f64>>,
}

impl SmallCnn {
    pub fn new(config: CnnConfig, rng: &mut impl Rng) -> Self {
        let [w1, w2, w3] = config.widths;
        SmallCnn {
            conv1: Conv2d::new(config.in_channels, w1, 3, 1, 1, rng),
            conv2: Conv2d::new(w1, w2, 3, 2, 1, rng),
            conv3: Conv2d::new(w2, w3, 3, 2, 1, rng),
            conv4: Conv2d::new(w3, w3, 3, 2, 1, rng),
            fc_embed: Dense::new(w3, config.embed_dim, rng),
            fc_out: Dense::new(config.embed_dim, config.num_outputs, rng),
            config,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> CnnCache {
        let (c1_out, c1_cache) = self.conv1.forward_cached(x);
        let a1 = silu(&c1_out);
        let (c2_out, c2_cache) = self.conv2.forward_cached(&a1);
        let feat_a = silu(&c2_out);
        let (c3_out, c3_cache) = self.conv3.forward_cached(&feat_a);
        let feat_b = silu(&c3_out);
        let (c4_out, c4_cache) = self.conv4.forward_cached(&feat_b);
        let c4_act = silu(&c4_out);
        let pooled = global_avg_pool(&c4_act);
        let (embedding, fc_embed_cache) = self.fc_embed.forward_cached(&pooled);
        drop(pooled);
        let emb_act = silu_vec(&embedding);
        let (logits, fc_out_cache) = self.fc_out.forward_cached(&emb_act);
        CnnCache {
            c1_cache,
            c1_out,
            c2_cache,
            c2_out,
            feat_a,
            c3_cache,
            c3_out,
            feat_b,
            c4_cache,
            c4_out,
            c4_act,
            fc_embed_cache,
            embedding,
            fc_out_cache,
            logits,
        }
    }

    pub fn logits(&self, x: &Array3<f64>) -> Array1<f64> {
        self.forward(x).logits
    }

    /// Returns (grad_input, param grads in `collect_params` order).
    pub fn backward(
        &self,
        cache: &CnnCache,
        signal: CnnBackwardSignal,
    ) -> (Array3<f64>, Vec<ArrayD<f64>>) {
        let k = self.config.num_outputs;
        let grad_logits = signal
            .grad_logits
            .unwrap_or_else(|| Array1::zeros(k));
        let (grad_emb_act, fco_w, fco_b) = self.fc_out.backward(&cache.fc_out_cache, &grad_logits);
        let mut grad_embedding = silu_vec_backward(&cache.embedding, &grad_emb_act);
        if let Some(g) = signal.grad_embedding {
            grad_embedding += &g;
        }
        let (grad_pooled, fce_w, fce_b) =
            self.fc_embed.backward(&cache.fc_embed_cache, &grad_embedding);
        let grad_c4_act = global_avg_pool_backward(&grad_pooled, cache.c4_act.dim());
        let grad_c4_out = silu_backward(&cache.c4_out, &grad_c4_act);
        let (mut grad_feat_b, c4_w, c4_b) = self.conv4.backward(&cache.c4_cache, &grad_c4_out);
        if let Some(g) = signal.grad_feat_b {
            grad_feat_b += &g;
        }
        let grad_c3_out = silu_backward(&cache.c3_out, &grad_feat_b);
        let (mut grad_feat_a, c3_w, c3_b) = self.conv3.backward(&cache.c3_cache, &grad_c3_out);
        if let Some(g) = signal.grad_feat_a {
            grad_feat_a += &g;
        }
        let grad_c2_out = silu_backward(&cache.c2_out, &grad_feat_a);
        let (grad_a1, c2_w, c2_b) = self.conv2.backward(&cache.c2_cache, &grad_c2_out);
        let grad_c1_out = silu_backward(&cache.c1_out, &grad_a1);
        let (grad_input, c1_w, c1_b) = self.conv1.backward(&cache.c1_cache, &grad_c1_out);

        let grads: Vec<ArrayD<f64>> = vec![
            c1_w.into_dyn(),
            c1_b.into_dyn(),
            c2_w.into_dyn(),
            c2_b.into_dyn(),
            c3_w.into_dyn(),
            c3_b.into_dyn(),
            c4_w.into_dyn(),
            c4_b.into_dyn(),
            fce_w.into_dyn(),
            fce_b.into_dyn(),
            fco_w.into_dyn(),
            fco_b.into_dyn(),
        ];
        (grad_input, grads)
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::with_capacity(12);
        self.collect_params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::with_capacity(12);
        self.collect_params_mut(&mut out);
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }
}

impl Parameterized for SmallCnn {
    fn collect_params<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, f64>>) {
        self.conv1.collect_params(out);
        self.conv2.collect_params(out);
        self.conv3.collect_params(out);
        self.conv4.collect_params(out);
        self.fc_embed.collect_params(out);
        self.fc_out.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
        self.conv1.collect_params_mut(out);
        self.conv2.collect_params_mut(out);
        self.conv3.collect_params_mut(out);
        self.conv4.collect_params_mut(out);
        self.fc_embed.collect_params_mut(out);
        self.fc_out.collect_params_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny(rng: &mut ChaCha8Rng) -> SmallCnn {
        SmallCnn::new(
            CnnConfig {
                in_channels: 2,
                widths: [3, 4, 5],
                embed_dim: 6,
                num_outputs: 3,
            },
            rng,
        )
    }

    #[test]
    fn logit_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = tiny(&mut rng);
        let x = Array3::from_shape_simple_fn((2, 8, 8), || StandardNormal.sample(&mut rng));
        let cache = net.forward(&x);
        let mut gl = Array1::zeros(3);
        gl[1] = 1.0;
        let (gx, _) = net.backward(
            &cache,
            CnnBackwardSignal {
                grad_logits: Some(gl),
                ..Default::default()
            },
        );
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in [(0, 0, 0), (1, 3, 4), (0, 7, 7), (1, 5, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (net.logits(&xp)[1] - net.logits(&xm)[1]) / (2.0 * h);
            let denom = num.abs().max(gx[idx].abs()).max(1e-8);
            worst = worst.max((num - gx[idx]).abs() / denom);
        }
        assert!(worst < 1e-5, "worst {}", worst);
    }

    #[test]
    fn feature_tap_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = tiny(&mut rng);
        let x = Array3::from_shape_simple_fn((2, 8, 8), || StandardNormal.sample(&mut rng));
        let cache = net.forward(&x);
        let wa = Array3::from_shape_simple_fn(cache.feat_a.dim(), || StandardNormal.sample(&mut rng));
        let wb = Array3::from_shape_simple_fn(cache.feat_b.dim(), || StandardNormal.sample(&mut rng));
        let loss = |img: &Array3<f64>| {
            let c = net.forward(img);
            (&c.feat_a * &wa).sum() + (&c.feat_b * &wb).sum()
        };
        let (gx, _) = net.backward(
            &cache,
            CnnBackwardSignal {
                grad_feat_a: Some(wa.clone()),
                grad_feat_b: Some(wb.clone()),
                ..Default::default()
            },
        );
        let h = 1e-5;
        for idx in [(0, 1, 1), (1, 6, 3)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let denom = num.abs().max(gx[idx].abs()).max(1e-8);
            assert!((num - gx[idx]).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = tiny(&mut rng);
        let x = Array3::from_shape_simple_fn((2, 8, 8), || StandardNormal.sample(&mut rng));
        let wl = Array1::from_shape_simple_fn(3, || StandardNormal.sample(&mut rng));
        let loss = |n: &SmallCnn| (&n.forward(&x).logits * &wl).sum();
        let cache = net.forward(&x);
        let (_, grads) = net.backward(
            &cache,
            CnnBackwardSignal {
                grad_logits: Some(wl.clone()),
                ..Default::default()
            },
        );
        let h = 1e-6;
        for pi in 0..grads.len() {
            let probe = grads[pi].len() / 3;
            let analytic = grads[pi].as_slice().unwrap()[probe];
            let mut plus = net.clone();
            {
                let mut v = plus.params_mut();
                v[pi].as_slice_mut().unwrap()[probe] += h;
            }
            let mut minus = net.clone();
            {
                let mut v = minus.params_mut();
                v[pi].as_slice_mut().unwrap()[probe] -= h;
            }
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = num.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (num - analytic).abs() / denom < 1e-5,
                "param {}: {} vs {}",
                pi,
                analytic,
                num
            );
        }
    }
}
