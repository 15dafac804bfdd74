//! Channel statistics and statistic injection on feature maps.
//!
//! A feature map's "style" is its per-channel mean and population standard
//! deviation over the spatial dimensions. [`pgst_apply`] re-normalizes a map
//! so that each channel carries the requested statistics while keeping the
//! spatial pattern (the per-channel z-scores) intact.

use serde::{Deserialize, Serialize};

use crate::error::{PgstError, Result};
use crate::scalar::Scalar;

/// Lower bound applied to every standard deviation.
pub const EPS_STYLE: f64 = 1e-5;

/// Dense `C × H × W` activation tensor, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(PgstError::Shape(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(PgstError::Shape(format!(
                "expected {} values for {channels}x{height}x{width}, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(PgstError::InvalidInput(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Builds a map from data produced by trusted numeric code.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::from_raw(channels, height, width, vec![T::zero(); channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        )
    }
}

/// Per-channel `(mean, std)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ChannelStyle<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Scalar> ChannelStyle<T> {
    /// Validates lengths and clamps `sigma` to [`EPS_STYLE`].
    pub fn new(mu: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(PgstError::Shape(format!(
                "style mu has {} channels but sigma has {}",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.is_empty() {
            return Err(PgstError::InvalidInput("style must have at least one channel".into()));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(PgstError::InvalidInput("style contains non-finite values".into()));
        }
        let mut style = Self { mu, sigma };
        style.clamp_sigma();
        Ok(style)
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn clamp_sigma(&mut self) {
        let eps = T::of(EPS_STYLE);
        for s in &mut self.sigma {
            if *s < eps {
                *s = eps;
            }
        }
    }

    /// `[mu..., sigma...]`, the layout used by feature exports.
    pub fn flatten(&self) -> Vec<T> {
        self.mu.iter().chain(&self.sigma).copied().collect()
    }

    pub fn cast<U: Scalar>(&self) -> ChannelStyle<U> {
        ChannelStyle {
            mu: self.mu.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            sigma: self.sigma.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// Two-pass mean and population standard deviation of one channel plane.
/// Returns the unclamped standard deviation.
fn plane_moments<T: Scalar>(plane: &[T]) -> (T, T) {
    let n = T::of(plane.len() as f64);
    let mean = plane.iter().copied().sum::<T>() / n;
    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Per-channel spatial mean and clamped population standard deviation.
pub fn channel_stats<T: Scalar>(f: &FeatureMap<T>) -> Result<ChannelStyle<T>> {
    if !f.is_finite() {
        return Err(PgstError::InvalidInput("channel_stats on non-finite feature map".into()));
    }
    let eps = T::of(EPS_STYLE);
    let (mu, sigma) = (0..f.channels())
        .map(|c| {
            let (m, s) = plane_moments(f.channel(c));
            (m, s.max(eps))
        })
        .unzip();
    Ok(ChannelStyle { mu, sigma })
}

/// Intermediate values of one injection, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct InjectionCache<T> {
    /// Per-element z-scores of the source map.
    z: Vec<T>,
    source_sigma: Vec<T>,
    /// Channels whose spatial std fell below [`EPS_STYLE`].
    clamped: Vec<bool>,
    plane: usize,
}

/// Gradients of one injection with respect to its inputs.
#[derive(Debug, Clone)]
pub struct InjectionGrad<T> {
    pub input: Vec<T>,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

fn check_style_shape<T: Scalar>(f: &FeatureMap<T>, style: &ChannelStyle<T>) -> Result<()> {
    if style.mu.len() != f.channels() || style.sigma.len() != f.channels() {
        return Err(PgstError::Shape(format!(
            "style has {}/{} channels, feature map has {}",
            style.mu.len(),
            style.sigma.len(),
            f.channels()
        )));
    }
    Ok(())
}

/// Re-styles `f` so that channel `c` has mean `style.mu[c]` and std `style.sigma[c]`.
pub fn pgst_apply<T: Scalar>(f: &FeatureMap<T>, style: &ChannelStyle<T>) -> Result<FeatureMap<T>> {
    pgst_forward(f, style).map(|(out, _)| out)
}

/// [`pgst_apply`] that also returns the cache needed by [`pgst_backward`].
pub fn pgst_forward<T: Scalar>(
    f: &FeatureMap<T>,
    style: &ChannelStyle<T>,
) -> Result<(FeatureMap<T>, InjectionCache<T>)> {
    check_style_shape(f, style)?;
    let eps = T::of(EPS_STYLE);
    let plane = f.plane_len();
    let mut out = Vec::with_capacity(f.data().len());
    let mut z = Vec::with_capacity(f.data().len());
    let mut source_sigma = Vec::with_capacity(f.channels());
    let mut clamped = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let values = f.channel(c);
        let (mean, std) = plane_moments(values);
        let is_clamped = std < eps;
        let sigma = if is_clamped { eps } else { std };
        let (tm, ts) = (style.mu[c], style.sigma[c]);
        for &v in values {
            let zi = (v - mean) / sigma;
            z.push(zi);
            out.push(ts * zi + tm);
        }
        source_sigma.push(sigma);
        clamped.push(is_clamped);
    }
    let (ch, h, w) = f.shape();
    Ok((FeatureMap::from_raw(ch, h, w, out), InjectionCache { z, source_sigma, clamped, plane }))
}

/// Back-propagates `grad_out` (same layout as the injected map) through the
/// injection, returning gradients for the source map and both style vectors.
pub fn pgst_backward<T: Scalar>(
    cache: &InjectionCache<T>,
    style: &ChannelStyle<T>,
    grad_out: &[T],
) -> InjectionGrad<T> {
    let n = cache.plane;
    let nf = T::of(n as f64);
    let channels = cache.source_sigma.len();
    let mut input = vec![T::zero(); channels * n];
    let mut mu = vec![T::zero(); channels];
    let mut sigma = vec![T::zero(); channels];
    for c in 0..channels {
        let z = &cache.z[c * n..(c + 1) * n];
        let dy = &grad_out[c * n..(c + 1) * n];
        let mut sum_dy = T::zero();
        let mut sum_dy_z = T::zero();
        for (&g, &zi) in dy.iter().zip(z) {
            sum_dy += g;
            sum_dy_z += g * zi;
        }
        mu[c] = sum_dy;
        sigma[c] = sum_dy_z;

        // dz = sigma_t * dy; normalisation backward on dz.
        let ts = style.sigma[c];
        let mean_dz = ts * sum_dy / nf;
        let mean_dz_z = ts * sum_dy_z / nf;
        let inv = T::one() / cache.source_sigma[c];
        let dx = &mut input[c * n..(c + 1) * n];
        if cache.clamped[c] {
            for (o, &g) in dx.iter_mut().zip(dy) {
                *o = (ts * g - mean_dz) * inv;
            }
        } else {
            for ((o, &g), &zi) in dx.iter_mut().zip(dy).zip(z) {
                *o = (ts * g - mean_dz - zi * mean_dz_z) * inv;
            }
        }
    }
    InjectionGrad { input, mu, sigma }
}
