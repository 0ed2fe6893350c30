//! Depth-enhancement block: channel attention followed by spatial attention
//! on a `c × h × w` feature array.

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::sigmoid;

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_KERNEL: usize = 7;

/// Channel-major feature array: `data[(c · h + y) · w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureBlock {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("feature block needs non-zero extents".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{channels}×{height}×{width} block needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }
}

/// Parameters of the block.  The channel mapping is shared between the max-
/// and average-pooled descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DeParams {
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// `hidden × channels`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `channels × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `2 × kernel × kernel`; input 0 is the channel max, input 1 the mean.
    pub conv: Vec<f64>,
    pub conv_bias: f64,
}

impl DeParams {
    pub fn zeros(channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "channel count {channels} is not divisible by reduction ratio {reduction}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {kernel}")));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            hidden,
            kernel,
            w1: vec![0.0; hidden * channels],
            b1: vec![0.0; hidden],
            w2: vec![0.0; channels * hidden],
            b2: vec![0.0; channels],
            conv: vec![0.0; 2 * kernel * kernel],
            conv_bias: 0.0,
        })
    }

    /// Uniform random parameters in `[−scale, scale]`.
    pub fn random(channels: usize, reduction: usize, kernel: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction, kernel)?;
        for v in p.values_mut() {
            *v = rng.random_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.conv.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All parameters in a fixed order.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.conv);
        out.push(self.conv_bias);
        out
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.conv.iter_mut())
            .chain(std::iter::once(&mut self.conv_bias))
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            conv: vec![0.0; self.conv.len()],
            conv_bias: 0.0,
            ..self.clone()
        }
    }
}

/// Index into `[0, n)` reflecting about the edges without repeating them;
/// any offset is folded back, so tiny extents work.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Intermediates retained by [`de_forward`] for [`de_backward`].
#[derive(Debug, Clone)]
pub struct DeCache {
    params: DeParams,
    input: FeatureBlock,
    /// Spatial index of each channel's maximum.
    max_index: Vec<usize>,
    pooled: [Vec<f64>; 2],
    hidden_pre: [Vec<f64>; 2],
    hidden: [Vec<f64>; 2],
    /// Channel attention, one value per channel.
    pub channel_attention: Vec<f64>,
    refined: FeatureBlock,
    /// Channel index of the maximum at each pixel of the refined features.
    channel_argmax: Vec<usize>,
    spatial_inputs: [Vec<f64>; 2],
    /// Spatial attention, one value per pixel.
    pub spatial_attention: Vec<f64>,
}

impl DeCache {
    /// Every discrete choice of the forward pass: pooling maxima, channel
    /// argmaxima and the active hidden units.  Within a region where this is
    /// constant the block is smooth.
    pub fn branches(&self) -> Vec<usize> {
        let mut out = self.max_index.clone();
        out.extend_from_slice(&self.channel_argmax);
        out.extend(self.hidden_pre.iter().flatten().map(|&v| (v > 0.0) as usize));
        out
    }
}

fn mlp(p: &DeParams, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, hd) = (p.channels, p.hidden);
    let pre: Vec<f64> = (0..hd)
        .map(|j| p.b1[j] + (0..c).map(|i| p.w1[j * c + i] * x[i]).sum::<f64>())
        .collect();
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let out = (0..c)
        .map(|i| p.b2[i] + (0..hd).map(|j| p.w2[i * hd + j] * h[j]).sum::<f64>())
        .collect();
    (pre, h, out)
}

/// Refines `f` as `A_s ⊙ (A_c ⊙ f)`.
pub fn de_forward(f: &FeatureBlock, params: &DeParams) -> Result<(FeatureBlock, DeCache)> {
    if f.channels != params.channels {
        return Err(Error::ShapeMismatch(format!(
            "block has {} channels, parameters expect {}",
            f.channels, params.channels
        )));
    }
    let (c, h, w) = (f.channels, f.height, f.width);
    let hw = f.plane();

    let mut max_index = vec![0; c];
    let mut pooled_max = vec![0.0; c];
    let mut pooled_avg = vec![0.0; c];
    for ch in 0..c {
        let plane = &f.data[ch * hw..(ch + 1) * hw];
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        max_index[ch] = best;
        pooled_max[ch] = plane[best];
        pooled_avg[ch] = plane.iter().sum::<f64>() / hw as f64;
    }
    let (pre_m, h_m, out_m) = mlp(params, &pooled_max);
    let (pre_a, h_a, out_a) = mlp(params, &pooled_avg);
    let channel_attention: Vec<f64> = (0..c).map(|i| sigmoid(out_m[i] + out_a[i])).collect();

    let mut refined = f.clone();
    for ch in 0..c {
        for v in &mut refined.data[ch * hw..(ch + 1) * hw] {
            *v *= channel_attention[ch];
        }
    }

    let mut channel_argmax = vec![0; hw];
    let mut smax = vec![0.0; hw];
    let mut smean = vec![0.0; hw];
    for i in 0..hw {
        let mut best = 0;
        let mut sum = 0.0;
        for ch in 0..c {
            let v = refined.data[ch * hw + i];
            sum += v;
            if v > refined.data[best * hw + i] {
                best = ch;
            }
        }
        channel_argmax[i] = best;
        smax[i] = refined.data[best * hw + i];
        smean[i] = sum / c as f64;
    }
    let spatial_inputs = [smax, smean];

    let k = params.kernel;
    let r = (k / 2) as isize;
    let mut spatial_attention = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            let mut s = params.conv_bias;
            for (inp, map) in spatial_inputs.iter().enumerate() {
                for ky in 0..k {
                    let yy = reflect(y as isize + ky as isize - r, h);
                    for kx in 0..k {
                        let xx = reflect(x as isize + kx as isize - r, w);
                        s += params.conv[(inp * k + ky) * k + kx] * map[yy * w + xx];
                    }
                }
            }
            spatial_attention[y * w + x] = sigmoid(s);
        }
    }

    let mut out = refined.clone();
    for ch in 0..c {
        for i in 0..hw {
            out.data[ch * hw + i] *= spatial_attention[i];
        }
    }
    let cache = DeCache {
        params: params.clone(),
        input: f.clone(),
        max_index,
        pooled: [pooled_max, pooled_avg],
        hidden_pre: [pre_m, pre_a],
        hidden: [h_m, h_a],
        channel_attention,
        refined,
        channel_argmax,
        spatial_inputs,
        spatial_attention,
    };
    Ok((out, cache))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeGrads {
    pub input: FeatureBlock,
    pub params: DeParams,
}

/// Reverse-mode gradients of [`de_forward`] given `∂L/∂output`.
///
/// `params` must be the parameters the cache was produced with.
pub fn de_backward(cache: &DeCache, params: &DeParams, upstream: &FeatureBlock) -> Result<DeGrads> {
    if &cache.params != params {
        return Err(Error::StaleCache);
    }
    if !upstream.same_shape(&cache.input) {
        return Err(Error::ShapeMismatch("upstream gradient vs cached input".into()));
    }
    let f = &cache.input;
    let (c, h, w) = (f.channels, f.height, f.width);
    let hw = f.plane();
    let k = params.kernel;
    let r = (k / 2) as isize;
    let mut gp = params.zeros_like();

    // Output = A_s · F'.
    let mut g_refined = upstream.clone();
    let mut g_s = vec![0.0; hw];
    for i in 0..hw {
        let a = cache.spatial_attention[i];
        let mut acc = 0.0;
        for ch in 0..c {
            let j = ch * hw + i;
            acc += upstream.data[j] * cache.refined.data[j];
            g_refined.data[j] = upstream.data[j] * a;
        }
        g_s[i] = acc * a * (1.0 - a);
    }

    // Convolution over the channel-pooled maps.
    let mut g_inputs = [vec![0.0; hw], vec![0.0; hw]];
    for y in 0..h {
        for x in 0..w {
            let g = g_s[y * w + x];
            if g == 0.0 {
                continue;
            }
            gp.conv_bias += g;
            for inp in 0..2 {
                for ky in 0..k {
                    let yy = reflect(y as isize + ky as isize - r, h);
                    for kx in 0..k {
                        let xx = reflect(x as isize + kx as isize - r, w);
                        let wi = (inp * k + ky) * k + kx;
                        gp.conv[wi] += g * cache.spatial_inputs[inp][yy * w + xx];
                        g_inputs[inp][yy * w + xx] += g * params.conv[wi];
                    }
                }
            }
        }
    }
    for i in 0..hw {
        g_refined.data[cache.channel_argmax[i] * hw + i] += g_inputs[0][i];
        let gm = g_inputs[1][i] / c as f64;
        for ch in 0..c {
            g_refined.data[ch * hw + i] += gm;
        }
    }

    // F' = A_c · F.
    let mut g_input = FeatureBlock::zeros(c, h, w);
    let mut g_logit = vec![0.0; c];
    for ch in 0..c {
        let a = cache.channel_attention[ch];
        let mut acc = 0.0;
        for i in 0..hw {
            let j = ch * hw + i;
            acc += g_refined.data[j] * f.data[j];
            g_input.data[j] = g_refined.data[j] * a;
        }
        g_logit[ch] = acc * a * (1.0 - a);
    }

    // Shared mapping, once per pooled descriptor.
    let hd = params.hidden;
    for branch in 0..2 {
        let hidden = &cache.hidden[branch];
        let pre = &cache.hidden_pre[branch];
        let x = &cache.pooled[branch];
        let mut g_h = vec![0.0; hd];
        for i in 0..c {
            gp.b2[i] += g_logit[i];
            for j in 0..hd {
                gp.w2[i * hd + j] += g_logit[i] * hidden[j];
                g_h[j] += params.w2[i * hd + j] * g_logit[i];
            }
        }
        let mut g_x = vec![0.0; c];
        for j in 0..hd {
            if pre[j] <= 0.0 {
                continue;
            }
            gp.b1[j] += g_h[j];
            for i in 0..c {
                gp.w1[j * c + i] += g_h[j] * x[i];
                g_x[i] += params.w1[j * c + i] * g_h[j];
            }
        }
        for ch in 0..c {
            if branch == 0 {
                g_input.data[ch * hw + cache.max_index[ch]] += g_x[ch];
            } else {
                let g = g_x[ch] / hw as f64;
                for v in &mut g_input.data[ch * hw..(ch + 1) * hw] {
                    *v += g;
                }
            }
        }
    }
    Ok(DeGrads {
        input: g_input,
        params: gp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_block(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureBlock {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureBlock::from_vec(c, h, w, data).unwrap()
    }

    fn weighted_output(f: &FeatureBlock, p: &DeParams, weights: &FeatureBlock) -> f64 {
        let (out, _) = de_forward(f, p).unwrap();
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_parameters_quarter_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_block(&mut rng, 8, 5, 6);
        let p = DeParams::zeros(8, 4, 7).unwrap();
        let (out, cache) = de_forward(&f, &p).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert_abs_diff_eq!(*o, 0.25 * i, epsilon = 1e-15);
        }
        assert!(cache.channel_attention.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn uniform_channels_give_constant_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let levels: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = (0..4 * 3 * 3).map(|i| levels[i / 9]).collect();
        let f = FeatureBlock::from_vec(4, 3, 3, data).unwrap();
        let p = DeParams::random(4, 2, 3, 0.5, &mut rng).unwrap();
        let (out, cache) = de_forward(&f, &p).unwrap();
        assert_eq!(cache.pooled[0], cache.pooled[1]);
        let s0 = cache.spatial_attention[0];
        assert!(cache.spatial_attention.iter().all(|&s| (s - s0).abs() < 1e-15));
        for ch in 0..4 {
            assert_abs_diff_eq!(out.get(ch, 1, 1), s0 * cache.channel_attention[ch] * levels[ch], epsilon = 1e-15);
        }
    }

    #[test]
    fn ratio_and_shape_checked() {
        assert!(DeParams::zeros(6, 4, 7).is_err());
        let p = DeParams::zeros(8, 4, 7).unwrap();
        assert!(de_forward(&FeatureBlock::zeros(4, 2, 2), &p).is_err());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_block(&mut rng, 4, 3, 3);
        let mut p = DeParams::random(4, 4, 3, 0.5, &mut rng).unwrap();
        let (out, cache) = de_forward(&f, &p).unwrap();
        p.conv_bias += 1.0;
        assert!(matches!(de_backward(&cache, &p, &out), Err(Error::StaleCache)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_block(&mut rng, 4, 3, 5);
        let p = DeParams::random(4, 2, 7, 0.5, &mut rng).unwrap();
        let (_, cache) = de_forward(&f, &p).unwrap();
        let g = de_backward(&cache, &p, &FeatureBlock::zeros(4, 3, 5)).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.params.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_matches_closed_form() {
        // One channel, one pixel: out = σ(k0 F' + k1 F' + b) · F' with
        // F' = σ(2 (w2 relu(w1 F + b1) + b2)) · F.
        let (w1, b1, w2, b2, k0, k1, cb) = (0.7, 0.1, -0.4, 0.2, 0.3, -0.2, 0.05);
        let mut p = DeParams::zeros(1, 1, 1).unwrap();
        p.w1[0] = w1;
        p.b1[0] = b1;
        p.w2[0] = w2;
        p.b2[0] = b2;
        p.conv[0] = k0;
        p.conv[1] = k1;
        p.conv_bias = cb;
        let x = 0.8;
        let f = FeatureBlock::from_vec(1, 1, 1, vec![x]).unwrap();
        let (out, cache) = de_forward(&f, &p).unwrap();
        let ac = sigmoid(2.0 * (w2 * (w1 * x + b1) + b2));
        let fp = ac * x;
        let as_ = sigmoid((k0 + k1) * fp + cb);
        assert_abs_diff_eq!(out.data()[0], as_ * fp, epsilon = 1e-15);
        // d out / dx, by hand.
        let dac = ac * (1.0 - ac) * 2.0 * w2 * w1;
        let dfp = dac * x + ac;
        let das = as_ * (1.0 - as_) * (k0 + k1) * dfp;
        let expected = das * fp + as_ * dfp;
        let g = de_backward(&cache, &p, &FeatureBlock::from_vec(1, 1, 1, vec![1.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(g.input.data()[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn channel_permutation_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (4, 3, 4);
        let f = random_block(&mut rng, c, h, w);
        let p = DeParams::random(c, 2, 3, 0.6, &mut rng).unwrap();
        let perm = [2, 0, 3, 1];
        let mut fp = f.clone();
        for (new, &old) in perm.iter().enumerate() {
            let hw = h * w;
            fp.data_mut()[new * hw..(new + 1) * hw].copy_from_slice(&f.data()[old * hw..(old + 1) * hw]);
        }
        let mut pp = p.clone();
        for j in 0..p.hidden {
            for (new, &old) in perm.iter().enumerate() {
                pp.w1[j * c + new] = p.w1[j * c + old];
            }
        }
        for (new, &old) in perm.iter().enumerate() {
            pp.b2[new] = p.b2[old];
            for j in 0..p.hidden {
                pp.w2[new * p.hidden + j] = p.w2[old * p.hidden + j];
            }
        }
        let (out, _) = de_forward(&f, &p).unwrap();
        let (outp, _) = de_forward(&fp, &pp).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    assert_abs_diff_eq!(outp.get(new, y, x), out.get(old, y, x), epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn reflect_handles_tiny_extents() {
        assert_eq!(reflect(-3, 1), 0);
        assert_eq!(reflect(-1, 2), 1);
        assert_eq!(reflect(-3, 2), 1);
        assert_eq!(reflect(4, 2), 0);
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
    }

    #[test]
    fn gradients_match_fd() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let f = random_block(&mut rng, 8, 4, 4);
            let p = DeParams::random(8, 4, 7, 0.5, &mut rng).unwrap();
            let weights = random_block(&mut rng, 8, 4, 4);
            let (_, cache) = de_forward(&f, &p).unwrap();
            if cache.hidden_pre.iter().flatten().any(|v| v.abs() < 1e-4) {
                continue;
            }
            let g = de_backward(&cache, &p, &weights).unwrap();
            let h = 1e-6;
            for i in 0..f.data().len() {
                let mut a = f.clone();
                let mut b = f.clone();
                a.data_mut()[i] += h;
                b.data_mut()[i] -= h;
                let fd = (weighted_output(&a, &p, &weights) - weighted_output(&b, &p, &weights)) / (2.0 * h);
                let an = g.input.data()[i];
                assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-5) < 1e-4, "input {i}: {an} vs {fd}");
            }
            let gv = g.params.values();
            for i in 0..p.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                *a.values_mut().nth(i).unwrap() += h;
                *b.values_mut().nth(i).unwrap() -= h;
                let fd = (weighted_output(&f, &a, &weights) - weighted_output(&f, &b, &weights)) / (2.0 * h);
                assert!((gv[i] - fd).abs() / gv[i].abs().max(fd.abs()).max(1e-5) < 1e-4, "param {i}: {} vs {fd}", gv[i]);
            }
        }
    }
}
