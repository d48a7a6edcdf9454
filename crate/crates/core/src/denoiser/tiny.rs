//! A light-weight residual convolutional noise predictor.
//!
//! Layout: input conv, one residual block at full resolution, 2x average
//! pooling, two residual blocks at half resolution, nearest 2x upsampling
//! with an additive skip from the first block, one more full-resolution
//! block, then group norm, SiLU and a zero-initialised output conv. A
//! sinusoidal timestep embedding passes through a two-layer MLP and is
//! added per channel inside every block.

use crate::error::{Error, Result};
use crate::field::{Field, Rng};

use super::layers::*;
use super::Denoiser;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyConfig {
    pub in_channels: usize,
    pub width: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 32,
            groups: 8,
            time_dim: 32,
            emb_dim: 64,
        }
    }
}

impl TinyConfig {
    pub fn with_channels(in_channels: usize) -> Self {
        Self {
            in_channels,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.width == 0
            || self.groups == 0
            || self.width % self.groups != 0
            || self.time_dim < 2
            || self.time_dim % 2 != 0
            || self.emb_dim == 0
        {
            return Err(Error::Config(format!("invalid denoiser architecture {self:?}")));
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    len: usize,
}

impl Slot {
    fn get<'a, R>(&self, p: &'a [R]) -> &'a [R] {
        &p[self.offset..self.offset + self.len]
    }

    fn get_mut<'a, R>(&self, p: &'a mut [R]) -> &'a mut [R] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
struct NormSlots {
    gamma: Slot,
    beta: Slot,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    weight: Slot,
    bias: Slot,
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    norm1: NormSlots,
    conv1: LayerSlots,
    proj: LayerSlots,
    norm2: NormSlots,
    conv2: LayerSlots,
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<ParamEntry>,
    emb1: LayerSlots,
    emb2: LayerSlots,
    conv_in: LayerSlots,
    blocks: [BlockSlots; 4],
    norm_out: NormSlots,
    conv_out: LayerSlots,
    total: usize,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.entries.push(ParamEntry {
            name,
            shape,
            offset: self.total,
        });
        self.total += len;
        slot
    }

    fn layer(&mut self, name: &str, weight: Vec<usize>, out: usize) -> LayerSlots {
        LayerSlots {
            weight: self.add(format!("{name}.weight"), weight),
            bias: self.add(format!("{name}.bias"), vec![out]),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormSlots {
        NormSlots {
            gamma: self.add(format!("{name}.gamma"), vec![c]),
            beta: self.add(format!("{name}.beta"), vec![c]),
        }
    }
}

impl Layout {
    fn new(cfg: &TinyConfig) -> Self {
        let (c, w, e) = (cfg.in_channels, cfg.width, cfg.emb_dim);
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            total: 0,
        };
        let emb1 = b.layer("time.fc1", vec![e, cfg.time_dim], e);
        let emb2 = b.layer("time.fc2", vec![e, e], e);
        let conv_in = b.layer("conv_in", vec![w, c, 3, 3], w);
        let mut block = |i: usize| BlockSlots {
            norm1: b.norm(&format!("block{i}.norm1"), w),
            conv1: b.layer(&format!("block{i}.conv1"), vec![w, w, 3, 3], w),
            proj: b.layer(&format!("block{i}.time_proj"), vec![w, e], w),
            norm2: b.norm(&format!("block{i}.norm2"), w),
            conv2: b.layer(&format!("block{i}.conv2"), vec![w, w, 3, 3], w),
        };
        let blocks = [block(0), block(1), block(2), block(3)];
        let norm_out = b.norm("norm_out", w);
        let conv_out = b.layer("conv_out", vec![c, w, 3, 3], c);
        Layout {
            entries: b.entries,
            emb1,
            emb2,
            conv_in,
            blocks,
            norm_out,
            conv_out,
            total: b.total,
        }
    }
}

/// The trainable network, generic over its scalar type.
#[derive(Debug, Clone)]
pub struct TinyNet<R: Real> {
    cfg: TinyConfig,
    layout: Layout,
    params: Vec<R>,
}

/// The production denoiser: single-precision weights.
pub type TinyDenoiser = TinyNet<f32>;

struct BlockCache<R> {
    a1: Vec<R>,
    gn1: GroupNormCache<R>,
    cols1: Vec<R>,
    a2: Vec<R>,
    gn2: GroupNormCache<R>,
    cols2: Vec<R>,
}

struct NetCache<R> {
    temb: Vec<R>,
    z1: Vec<R>,
    s1: Vec<R>,
    z2: Vec<R>,
    emb: Vec<R>,
    cols_in: Vec<R>,
    blocks: Vec<BlockCache<R>>,
    g_out: Vec<R>,
    gn_out: GroupNormCache<R>,
    cols_out: Vec<R>,
}

impl<R: Real> TinyNet<R> {
    /// Fresh network. Convolution and linear weights are drawn uniformly in
    /// `±sqrt(3 / fan_in)`; norms start at identity; the output conv is zero
    /// so the untrained model predicts zero noise.
    pub fn new(cfg: TinyConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![R::zero(); layout.total];
        for e in &layout.entries {
            let r = e.range();
            if e.name.ends_with(".gamma") {
                params[r].fill(R::one());
            } else if e.name.ends_with(".weight") && !e.name.starts_with("conv_out") {
                let fan_in: usize = e.shape[1..].iter().product();
                let bound = (3.0 / fan_in as f64).sqrt();
                for p in &mut params[r] {
                    *p = R::lit(rng.uniform_range(-bound, bound));
                }
            }
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn from_params(cfg: TinyConfig, params: Vec<R>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> TinyConfig {
        self.cfg
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.layout.entries
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[R]> {
        let e = self.layout.entries.iter().find(|e| e.name == name)?;
        Some(&self.params[e.range()])
    }

    pub fn cast<S: Real>(&self) -> TinyNet<S> {
        TinyNet {
            cfg: self.cfg,
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| S::lit(p.as_f64())).collect(),
        }
    }

    pub fn supports_shape(&self, h: usize, w: usize, c: usize) -> bool {
        c == self.cfg.in_channels && h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0
    }

    fn check_shape(&self, h: usize, w: usize, c: usize) -> Result<()> {
        if !self.supports_shape(h, w, c) {
            return Err(Error::UnsupportedShape { h, w, c });
        }
        Ok(())
    }

    fn time_embedding(&self, t: f64) -> Vec<R> {
        let half = self.cfg.time_dim / 2;
        let mut out = vec![R::zero(); self.cfg.time_dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out[i] = R::lit((t * freq).sin());
            out[half + i] = R::lit((t * freq).cos());
        }
        out
    }

    fn block_forward(
        &self,
        b: &BlockSlots,
        x: &[R],
        h: usize,
        w: usize,
        emb: &[R],
    ) -> (Vec<R>, BlockCache<R>) {
        let p = &self.params;
        let (ch, g) = (self.cfg.width, self.cfg.groups);
        let hw = h * w;
        let (a1, gn1) = group_norm_forward(x, ch, hw, g, b.norm1.gamma.get(p), b.norm1.beta.get(p));
        let (mut hid, cols1) = conv3x3_forward(
            &silu(&a1),
            ch,
            h,
            w,
            b.conv1.weight.get(p),
            b.conv1.bias.get(p),
            ch,
        );
        let proj = linear_forward(emb, b.proj.weight.get(p), b.proj.bias.get(p), ch);
        for (c, row) in hid.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v += proj[c]);
        }
        let (a2, gn2) = group_norm_forward(&hid, ch, hw, g, b.norm2.gamma.get(p), b.norm2.beta.get(p));
        let (mut out, cols2) = conv3x3_forward(
            &silu(&a2),
            ch,
            h,
            w,
            b.conv2.weight.get(p),
            b.conv2.bias.get(p),
            ch,
        );
        out.iter_mut().zip(x).for_each(|(o, &xi)| *o += xi);
        (
            out,
            BlockCache {
                a1,
                gn1,
                cols1,
                a2,
                gn2,
                cols2,
            },
        )
    }

    /// Returns the input gradient; accumulates `d emb` and parameter grads.
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &BlockSlots,
        cache: &BlockCache<R>,
        dout: &[R],
        h: usize,
        w: usize,
        emb: &[R],
        demb: &mut [R],
        grad: &mut [R],
    ) -> Vec<R> {
        let p = &self.params;
        let (ch, g) = (self.cfg.width, self.cfg.groups);
        let hw = h * w;
        let mut ds2 = {
            let (dw, db) = split2(grad, b.conv2.weight, b.conv2.bias);
            conv3x3_backward(dout, &cache.cols2, ch, h, w, b.conv2.weight.get(p), ch, dw, db, true)
                .expect("dx requested")
        };
        silu_backward(&cache.a2, &mut ds2);
        let dhid = {
            let (dg, db) = split2(grad, b.norm2.gamma, b.norm2.beta);
            group_norm_backward(&ds2, &cache.gn2, ch, hw, g, b.norm2.gamma.get(p), dg, db)
        };
        let dproj: Vec<R> = dhid.chunks_exact(hw).map(|row| row.iter().copied().sum()).collect();
        {
            let (dw, db) = split2(grad, b.proj.weight, b.proj.bias);
            let de = linear_backward(&dproj, emb, b.proj.weight.get(p), dw, db);
            demb.iter_mut().zip(de).for_each(|(a, v)| *a += v);
        }
        let mut ds1 = {
            let (dw, db) = split2(grad, b.conv1.weight, b.conv1.bias);
            conv3x3_backward(&dhid, &cache.cols1, ch, h, w, b.conv1.weight.get(p), ch, dw, db, true)
                .expect("dx requested")
        };
        silu_backward(&cache.a1, &mut ds1);
        let mut dx = {
            let (dg, db) = split2(grad, b.norm1.gamma, b.norm1.beta);
            group_norm_backward(&ds1, &cache.gn1, ch, hw, g, b.norm1.gamma.get(p), dg, db)
        };
        dx.iter_mut().zip(dout).for_each(|(a, &d)| *a += d);
        dx
    }

    fn forward_cached(&self, x: &[R], h: usize, w: usize, t: f64) -> (Vec<R>, NetCache<R>) {
        let p = &self.params;
        let l = &self.layout;
        let (c, ch, g, e) = (self.cfg.in_channels, self.cfg.width, self.cfg.groups, self.cfg.emb_dim);
        let (hh, hw2) = (h / 2, w / 2);

        let temb = self.time_embedding(t);
        let z1 = linear_forward(&temb, l.emb1.weight.get(p), l.emb1.bias.get(p), e);
        let s1 = silu(&z1);
        let z2 = linear_forward(&s1, l.emb2.weight.get(p), l.emb2.bias.get(p), e);
        let emb = silu(&z2);

        let (h0, cols_in) = conv3x3_forward(x, c, h, w, l.conv_in.weight.get(p), l.conv_in.bias.get(p), ch);
        let (r1, b0) = self.block_forward(&l.blocks[0], &h0, h, w, &emb);
        let down = avg_pool2(&r1, ch, h, w);
        let (r2, b1) = self.block_forward(&l.blocks[1], &down, hh, hw2, &emb);
        let (r3, b2) = self.block_forward(&l.blocks[2], &r2, hh, hw2, &emb);
        let mut up = upsample2(&r3, ch, hh, hw2);
        up.iter_mut().zip(&r1).for_each(|(u, &s)| *u += s);
        let (r4, b3) = self.block_forward(&l.blocks[3], &up, h, w, &emb);
        let (g_out, gn_out) = group_norm_forward(&r4, ch, h * w, g, l.norm_out.gamma.get(p), l.norm_out.beta.get(p));
        let (out, cols_out) = conv3x3_forward(
            &silu(&g_out),
            ch,
            h,
            w,
            l.conv_out.weight.get(p),
            l.conv_out.bias.get(p),
            c,
        );
        (
            out,
            NetCache {
                temb,
                z1,
                s1,
                z2,
                emb,
                cols_in,
                blocks: vec![b0, b1, b2, b3],
                g_out,
                gn_out,
                cols_out,
            },
        )
    }

    fn backward(&self, cache: &NetCache<R>, dout: &[R], h: usize, w: usize, grad: &mut [R]) {
        let p = &self.params;
        let l = &self.layout;
        let (c, ch, g, e) = (self.cfg.in_channels, self.cfg.width, self.cfg.groups, self.cfg.emb_dim);
        let (hh, hw2) = (h / 2, w / 2);
        let mut demb = vec![R::zero(); e];

        let mut dg = {
            let (dw, db) = split2(grad, l.conv_out.weight, l.conv_out.bias);
            conv3x3_backward(dout, &cache.cols_out, ch, h, w, l.conv_out.weight.get(p), c, dw, db, true)
                .expect("dx requested")
        };
        silu_backward(&cache.g_out, &mut dg);
        let dr4 = {
            let (dgm, db) = split2(grad, l.norm_out.gamma, l.norm_out.beta);
            group_norm_backward(&dg, &cache.gn_out, ch, h * w, g, l.norm_out.gamma.get(p), dgm, db)
        };
        let du = self.block_backward(&l.blocks[3], &cache.blocks[3], &dr4, h, w, &cache.emb, &mut demb, grad);
        let dr3 = upsample2_backward(&du, ch, hh, hw2);
        let dr2 = self.block_backward(&l.blocks[2], &cache.blocks[2], &dr3, hh, hw2, &cache.emb, &mut demb, grad);
        let ddown = self.block_backward(&l.blocks[1], &cache.blocks[1], &dr2, hh, hw2, &cache.emb, &mut demb, grad);
        let mut dr1 = du;
        avg_pool2_backward(&ddown, ch, h, w, &mut dr1);
        let dh0 = self.block_backward(&l.blocks[0], &cache.blocks[0], &dr1, h, w, &cache.emb, &mut demb, grad);
        {
            let (dw, db) = split2(grad, l.conv_in.weight, l.conv_in.bias);
            conv3x3_backward(&dh0, &cache.cols_in, c, h, w, l.conv_in.weight.get(p), ch, dw, db, false);
        }

        silu_backward(&cache.z2, &mut demb);
        let mut ds1 = {
            let (dw, db) = split2(grad, l.emb2.weight, l.emb2.bias);
            linear_backward(&demb, &cache.s1, l.emb2.weight.get(p), dw, db)
        };
        silu_backward(&cache.z1, &mut ds1);
        let (dw, db) = split2(grad, l.emb1.weight, l.emb1.bias);
        linear_backward(&ds1, &cache.temb, l.emb1.weight.get(p), dw, db);
    }

    /// Noise prediction on a `C x H x W` buffer at (possibly fractional) timestep `t`.
    pub fn forward_chw(&self, x: &[R], h: usize, w: usize, t: f64) -> Result<Vec<R>> {
        self.check_shape(h, w, x.len() / (h * w).max(1))?;
        if x.len() != self.cfg.in_channels * h * w {
            return Err(Error::UnsupportedShape {
                h,
                w,
                c: x.len() / (h * w),
            });
        }
        Ok(self.forward_cached(x, h, w, t).0)
    }

    /// Weighted squared error `weight * mean((eps_hat - eps)^2)` for one
    /// sample, accumulating `scale * d loss / d params` into `grad`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        x_t: &[R],
        eps: &[R],
        h: usize,
        w: usize,
        t: f64,
        weight: f64,
        scale: f64,
        grad: &mut [R],
    ) -> Result<f64> {
        self.check_shape(h, w, self.cfg.in_channels)?;
        let (out, cache) = self.forward_cached(x_t, h, w, t);
        let n = out.len() as f64;
        let mut sq = 0.0;
        let coef = R::lit(2.0 * weight * scale / n);
        let dout: Vec<R> = out
            .iter()
            .zip(eps)
            .map(|(&o, &e)| {
                let d = o - e;
                sq += d.as_f64() * d.as_f64();
                d * coef
            })
            .collect();
        self.backward(&cache, &dout, h, w, grad);
        Ok(weight * sq / n)
    }

    /// Loss only, for finite-difference checks and evaluation.
    pub fn loss(&self, x_t: &[R], eps: &[R], h: usize, w: usize, t: f64, weight: f64) -> Result<f64> {
        let out = self.forward_chw(x_t, h, w, t)?;
        let sq: f64 = out
            .iter()
            .zip(eps)
            .map(|(&o, &e)| (o - e).as_f64().powi(2))
            .sum();
        Ok(weight * sq / out.len() as f64)
    }
}

fn split2<R>(grad: &mut [R], a: Slot, b: Slot) -> (&mut [R], &mut [R]) {
    debug_assert!(a.offset + a.len <= b.offset);
    let (lo, hi) = grad.split_at_mut(b.offset);
    (a.get_mut(lo), &mut hi[..b.len])
}

/// `(y, x, c)` field to a `C x H x W` buffer.
pub fn field_to_chw<R: Real>(f: &Field) -> Vec<R> {
    let (h, w, c) = f.shape();
    let mut out = vec![R::zero(); h * w * c];
    for (i, &v) in f.data().iter().enumerate() {
        let ch = i % c;
        let px = i / c;
        out[ch * h * w + px] = R::lit(v);
    }
    out
}

pub fn chw_to_field<R: Real>(buf: &[R], h: usize, w: usize, c: usize) -> Result<Field> {
    let mut data = vec![0.0; h * w * c];
    for (i, v) in data.iter_mut().enumerate() {
        *v = buf[(i % c) * h * w + i / c].as_f64();
    }
    Field::new(h, w, c, data)
}

impl<R: Real> Denoiser for TinyNet<R> {
    fn predict(&self, x_t: &Field, t: usize) -> Result<Field> {
        let (h, w, c) = x_t.shape();
        self.check_shape(h, w, c)?;
        let out = self.forward_chw(&field_to_chw(x_t), h, w, t as f64)?;
        chw_to_field(&out, h, w, c)
    }

    fn supports(&self, h: usize, w: usize, c: usize) -> bool {
        self.supports_shape(h, w, c)
    }

    fn param_count(&self) -> usize {
        self.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64) -> TinyNet<f64> {
        TinyNet::new(TinyConfig::default(), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn light_weight_budget() {
        let n = net(0);
        assert!(n.num_params() < 1_000_000);
        let rgb = TinyNet::<f32>::new(TinyConfig::with_channels(3), &mut Rng::new(0)).unwrap();
        assert!(rgb.num_params() < 1_000_000);
        let mut names: Vec<&str> = n.entries().iter().map(|e| e.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n.entries().len());
    }

    #[test]
    fn zero_output_at_init_and_purity() {
        let n = TinyNet::<f32>::new(TinyConfig::default(), &mut Rng::new(1)).unwrap();
        let x = Field::gaussian(&mut Rng::new(2), 8, 8, 1).unwrap();
        let y = n.predict(&x, 10).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut perturbed = n.clone();
        let mut rng = Rng::new(3);
        for p in perturbed.params_mut() {
            *p += (rng.uniform() as f32 - 0.5) * 0.1;
        }
        let a = perturbed.predict(&x, 10).unwrap();
        let b = perturbed.predict(&x, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
        assert!(a.is_finite());
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unsupported_shapes() {
        let n = net(0);
        assert!(n.predict(&Field::zeros(7, 8, 1).unwrap(), 1).is_err());
        assert!(n.predict(&Field::zeros(8, 8, 3).unwrap(), 1).is_err());
        assert!(!n.supports(9, 9, 1));
        assert!(n.supports(16, 64, 1));
    }

    #[test]
    fn layout_round_trip() {
        let n = net(4);
        let m = TinyNet::<f64>::from_params(n.config(), n.params().to_vec()).unwrap();
        assert_eq!(m.params(), n.params());
        assert!(TinyNet::<f64>::from_params(n.config(), vec![0.0; 3]).is_err());
        assert!(n.tensor("block2.conv1.weight").is_some());
        assert_eq!(n.tensor("conv_out.weight").unwrap().len(), 32 * 9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut n = net(5);
        let mut rng = Rng::new(6);
        // non-zero head so every parameter receives gradient
        for p in n.params_mut() {
            *p += rng.uniform_range(-0.05, 0.05);
        }
        let (h, w) = (8, 6);
        let x: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let eps: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let (t, weight) = (37.0, 1.7);
        let mut grad = vec![0.0; n.num_params()];
        n.loss_and_grad(&x, &eps, h, w, t, weight, 1.0, &mut grad).unwrap();
        let step = 1e-4;
        for e in n.entries().to_vec() {
            let i = e.offset + e.len() / 2;
            let orig = n.params()[i];
            n.params_mut()[i] = orig + step;
            let lp = n.loss(&x, &eps, h, w, t, weight).unwrap();
            n.params_mut()[i] = orig - step;
            let lm = n.loss(&x, &eps, h, w, t, weight).unwrap();
            n.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "{}: fd {fd} vs analytic {}", e.name, grad[i]);
        }
    }
}
