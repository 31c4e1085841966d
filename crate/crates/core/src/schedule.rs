//! Noise-schedule construction, forward (corruption) sampling and test-time
//! respacing.
//!
//! Everything here is closed-form arithmetic on the per-step variances
//! `beta_t` and the cumulative signal levels `alpha_bar_t`; no network is
//! involved. All schedule arithmetic is done in f64 and only cast down (if
//! ever) at the model boundary.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference linear schedule endpoints, stated for 500 steps. Other lengths
/// scale the endpoints by `500 / num_steps` so the terminal signal level
/// stays comparable.
pub const REFERENCE_BETA_START: f64 = 1e-4;
pub const REFERENCE_BETA_END: f64 = 0.02;
pub const REFERENCE_NUM_STEPS: usize = 500;

/// The beta/alpha-bar ladder of a diffusion process.
///
/// Step indices are 1-based: `beta(t)` and `alpha_bar(t)` are defined for
/// `t in 1..=num_steps`, with the convention `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    num_steps: usize,
    respaced_from: Option<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances, computing the
    /// cumulative products by a running product.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let mut alphas_bar = Vec::with_capacity(betas.len());
        let mut product = 1.0f64;
        for beta in &betas {
            product *= 1.0 - beta;
            alphas_bar.push(product);
        }
        Self::from_parts(betas, alphas_bar, None)
    }

    fn from_parts(
        betas: Vec<f64>,
        alphas_bar: Vec<f64>,
        respaced_from: Option<usize>,
    ) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("no steps".into()));
        }
        debug_assert_eq!(betas.len(), alphas_bar.len());
        for (i, beta) in betas.iter().enumerate() {
            if !(*beta > 0.0 && *beta < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta[{}] = {} outside (0, 1)",
                    i + 1,
                    beta
                )));
            }
        }
        let mut prev = 1.0f64;
        for (i, ab) in alphas_bar.iter().enumerate() {
            if !(*ab > 0.0 && *ab < prev) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar[{}] = {} not strictly decreasing within (0, 1]",
                    i + 1,
                    ab
                )));
            }
            // Recursion alpha_bar_t = alpha_bar_{t-1} * (1 - beta_t), up to
            // rounding of the derived betas in respaced schedules.
            let recomputed = prev * (1.0 - betas[i]);
            if (recomputed - ab).abs() > 1e-9 * prev {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar[{}] inconsistent with running product",
                    i + 1
                )));
            }
            prev = *ab;
        }
        let num_steps = betas.len();
        Ok(Self {
            betas,
            alphas_bar,
            num_steps,
            respaced_from,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Original length of the schedule this one was respaced from, if any.
    pub fn respaced_from(&self) -> Option<usize> {
        self.respaced_from
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// Per-step variance, `t in 1..=num_steps`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative signal level; `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alphas_bar[t - 1])
    }

    /// Posterior variance of the reverse transition,
    /// `beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    ///
    /// Zero at `t = 1` thanks to the `alpha_bar(0) = 1` convention, which
    /// makes the final reverse step deterministic.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let beta = self.beta(t)?;
        let ab_prev = self.alpha_bar(t - 1)?;
        let ab = self.alpha_bar(t)?;
        Ok(beta * (1.0 - ab_prev) / (1.0 - ab))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::StepOutOfRange {
                t,
                max: self.num_steps,
            });
        }
        Ok(())
    }
}

/// Linearly interpolated betas, endpoints inclusive.
pub fn build_linear_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::InvalidSchedule("num_steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{}, {}]",
            beta_start, beta_end
        )));
    }
    let betas = if num_steps == 1 {
        vec![beta_start]
    } else {
        (0..num_steps)
            .map(|i| {
                let f = i as f64 / (num_steps - 1) as f64;
                beta_start + f * (beta_end - beta_start)
            })
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Default linear schedule for an arbitrary length: the 500-step reference
/// endpoints scaled by `500 / num_steps`.
pub fn build_default_schedule(num_steps: usize) -> Result<NoiseSchedule> {
    let scale = (REFERENCE_NUM_STEPS as f64 / num_steps.max(1) as f64)
        .min(0.98 / REFERENCE_BETA_END);
    build_linear_schedule(
        num_steps,
        REFERENCE_BETA_START * scale,
        REFERENCE_BETA_END * scale,
    )
}

/// Cosine schedule (squared-cosine alpha-bar profile), capped at `max_beta`.
pub fn build_cosine_schedule(num_steps: usize, max_beta: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::InvalidSchedule("num_steps must be >= 1".into()));
    }
    let f = |u: f64| ((u + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let betas = (0..num_steps)
        .map(|i| {
            let t1 = i as f64 / num_steps as f64;
            let t2 = (i + 1) as f64 / num_steps as f64;
            (1.0 - f(t2) / f(t1)).min(max_beta).max(1e-8)
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// One step of the forward corruption recursion:
/// `sqrt(1 - beta_t) * z_prev + sqrt(beta_t) * noise`.
pub fn forward_step(
    schedule: &NoiseSchedule,
    z_prev: &Array3<f64>,
    t: usize,
    noise: &Array3<f64>,
) -> Result<Array3<f64>> {
    check_same_shape(z_prev, noise)?;
    let beta = schedule.beta(t)?;
    let signal = (1.0 - beta).sqrt();
    let sigma = beta.sqrt();
    Ok(z_prev * signal + noise * sigma)
}

/// Direct forward sampling at depth `t`:
/// `sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * noise`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    x: &Array3<f64>,
    t: usize,
    noise: &Array3<f64>,
) -> Result<Array3<f64>> {
    check_same_shape(x, noise)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange {
            t,
            max: schedule.num_steps,
        });
    }
    let signal = alpha_bar.sqrt();
    let sigma = (1.0 - alpha_bar).sqrt();
    Ok(x * signal + noise * sigma)
}

/// Compresses a schedule to the kept step indices while preserving their
/// cumulative signal levels exactly. New betas are derived as
/// `1 - alpha_bar_keep[i] / alpha_bar_keep[i-1]`.
pub fn respace(schedule: &NoiseSchedule, keep: &[usize]) -> Result<NoiseSchedule> {
    if keep.is_empty() {
        return Err(Error::InvalidSchedule("respace: empty keep set".into()));
    }
    for w in keep.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidSchedule(
                "respace: keep must be strictly increasing".into(),
            ));
        }
    }
    let last = *keep.last().unwrap();
    if keep[0] == 0 || last > schedule.num_steps() {
        return Err(Error::InvalidSchedule(format!(
            "respace: keep indices must lie in 1..={}",
            schedule.num_steps()
        )));
    }
    let mut betas = Vec::with_capacity(keep.len());
    let mut alphas_bar = Vec::with_capacity(keep.len());
    let mut prev = 1.0f64;
    let mut prev_t = 0usize;
    for &t in keep {
        let ab = schedule.alpha_bar(t)?;
        // Adjacent kept steps are the original steps; reuse their betas
        // bit-exactly instead of rederiving them by division.
        if t == prev_t + 1 {
            betas.push(schedule.beta(t)?);
        } else {
            betas.push(1.0 - ab / prev);
        }
        alphas_bar.push(ab);
        prev = ab;
        prev_t = t;
    }
    NoiseSchedule::from_parts(betas, alphas_bar, Some(schedule.num_steps()))
}

/// Uniform-stride respacing to `target_steps` steps, always keeping the final
/// step so the terminal noise level is preserved.
pub fn respace_uniform(schedule: &NoiseSchedule, target_steps: usize) -> Result<NoiseSchedule> {
    let total = schedule.num_steps();
    if target_steps == 0 || target_steps > total {
        return Err(Error::InvalidSchedule(format!(
            "respace: target {} outside 1..={}",
            target_steps, total
        )));
    }
    let keep: Vec<usize> = (1..=target_steps)
        .map(|i| (i * total + target_steps - 1) / target_steps)
        .collect();
    respace(schedule, &keep)
}

/// Serialized form stored inside checkpoint archives. Cumulative products are
/// recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub betas: Vec<f64>,
    pub num_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respaced_from: Option<usize>,
}

impl From<&NoiseSchedule> for ScheduleSpec {
    fn from(s: &NoiseSchedule) -> Self {
        ScheduleSpec {
            betas: s.betas.clone(),
            num_steps: s.num_steps,
            respaced_from: s.respaced_from,
        }
    }
}

impl TryFrom<&ScheduleSpec> for NoiseSchedule {
    type Error = Error;

    fn try_from(spec: &ScheduleSpec) -> Result<NoiseSchedule> {
        if spec.betas.len() != spec.num_steps {
            return Err(Error::InvalidSchedule(format!(
                "num_steps {} != betas length {}",
                spec.num_steps,
                spec.betas.len()
            )));
        }
        let mut schedule = NoiseSchedule::from_betas(spec.betas.clone())?;
        schedule.respaced_from = spec.respaced_from;
        Ok(schedule)
    }
}
