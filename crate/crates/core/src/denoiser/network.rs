//! Encoder–decoder noise predictor with skip connections.
//!
//! Input is the noisy HR raster stacked with the upsampled LR condition
//! (2 channels). Each resolution level is one residual block with group
//! normalization, SiLU and a per-block projection of the time embedding.
//! Down-sampling is 2x2 average pooling; up-sampling is nearest-neighbour
//! followed by concatenation with the encoder feature of the same size.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::embed::time_embed;
use super::layers::*;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Feat, Real};

pub const IN_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Descriptor {
    pub base_channels: usize,
    /// One multiplier per resolution level; its length is the number of
    /// 2x down-samplings.
    pub channel_mult: Vec<usize>,
    pub groups: usize,
    /// Width of the sinusoidal time embedding (and of its projection).
    pub time_dim: usize,
    pub kernel_size: usize,
}

impl Default for Descriptor {
    fn default() -> Self {
        Descriptor { base_channels: 8, channel_mult: vec![1, 2], groups: 4, time_dim: 16, kernel_size: 3 }
    }
}

impl Descriptor {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_mult[l]
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::invalid("descriptor has zero-sized channels or no levels"));
        }
        if self.groups == 0 {
            return Err(Error::invalid("group count must be positive"));
        }
        let mut widths = vec![self.base_channels];
        widths.extend((0..self.levels()).map(|l| self.level_channels(l)));
        if let Some(c) = widths.iter().find(|&&c| c % self.groups != 0) {
            return Err(Error::invalid(format!("{} groups do not divide {c} channels", self.groups)));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid("time embedding width must be even and positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("kernel size must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, F>(&self, p: &'a [F]) -> &'a [F] {
        &p[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, F>(&self, p: &'a mut [F]) -> &'a mut [F] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    pub fan_in: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Offset,
    /// Output projection, zero at initialization.
    OutputWeight,
}

#[derive(Clone, Debug)]
struct Conv {
    w: Slot,
    b: Slot,
    cout: usize,
    k: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: Slot,
    beta: Slot,
    groups: usize,
}

#[derive(Clone, Debug)]
struct Dense {
    w: Slot,
    b: Slot,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct LayoutBuilder {
    next: usize,
    entries: Vec<ParamEntry>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize, kind: ParamKind) -> Slot {
        let len = shape.iter().product();
        let slot = Slot { offset: self.next, len };
        self.next += len;
        self.entries.push(ParamEntry { name, shape, slot, fan_in, kind });
        slot
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let kind = if zero { ParamKind::OutputWeight } else { ParamKind::Weight };
        let w = self.push(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k, kind);
        let b = self.push(format!("{name}.bias"), vec![cout], cin * k * k, ParamKind::Bias);
        Conv { w, b, cout, k }
    }

    fn norm(&mut self, name: &str, ch: usize, groups: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), vec![ch], ch, ParamKind::Scale);
        let beta = self.push(format!("{name}.beta"), vec![ch], ch, ParamKind::Offset);
        Norm { gamma, beta, groups }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        let w = self.push(format!("{name}.weight"), vec![dout, din], din, ParamKind::Weight);
        let b = self.push(format!("{name}.bias"), vec![dout], din, ParamKind::Bias);
        Dense { w, b }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, d: &Descriptor) -> ResBlock {
        let k = d.kernel_size;
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin, d.groups),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, k, false),
            temb: self.dense(&format!("{name}.temb"), d.time_dim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout, d.groups),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, k, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false)),
        }
    }
}

/// Shapes and parameter offsets derived from a descriptor.
#[derive(Clone, Debug)]
pub struct Architecture {
    desc: Descriptor,
    conv_in: Conv,
    temb: Dense,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: Norm,
    conv_out: Conv,
    entries: Vec<ParamEntry>,
    n_params: usize,
}

impl Architecture {
    pub fn new(desc: &Descriptor) -> Result<Self> {
        desc.validate()?;
        let d = desc;
        let mut b = LayoutBuilder { next: 0, entries: Vec::new() };
        let conv_in = b.conv("conv_in", IN_CHANNELS, d.base_channels, d.kernel_size, false);
        let temb = b.dense("time_mlp", d.time_dim, d.time_dim);
        let mut down = Vec::new();
        let mut ch = d.base_channels;
        for l in 0..d.levels() {
            let out = d.level_channels(l);
            down.push(b.res_block(&format!("down{l}"), ch, out, d));
            ch = out;
        }
        let mid = b.res_block("mid", ch, ch, d);
        let mut up_rev = Vec::new();
        for l in (0..d.levels()).rev() {
            let skip = d.level_channels(l);
            up_rev.push(b.res_block(&format!("up{l}"), ch + skip, skip, d));
            ch = skip;
        }
        let norm_out = b.norm("norm_out", ch, d.groups);
        let conv_out = b.conv("conv_out", ch, 1, d.kernel_size, true);
        up_rev.reverse();
        Ok(Architecture {
            desc: desc.clone(),
            conv_in,
            temb,
            down,
            mid,
            up: up_rev,
            norm_out,
            conv_out,
            n_params: b.next,
            entries: b.entries,
        })
    }

    pub fn descriptor(&self) -> &Descriptor {
        &self.desc
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Learnable parameters as one flat vector laid out by `Architecture`.
#[derive(Clone, Debug)]
pub struct DenoiserParams<F> {
    arch: Architecture,
    data: Vec<F>,
}

impl<F: Real> PartialEq for DenoiserParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.arch.desc == other.arch.desc && self.data == other.data
    }
}

pub fn init_params<F: Real>(desc: &Descriptor, seed: u64) -> Result<DenoiserParams<F>> {
    let arch = Architecture::new(desc)?;
    let mut rng = rng_from_seed(seed);
    let mut data = vec![F::zero(); arch.n_params];
    for e in &arch.entries {
        let dst = e.slot.of_mut(&mut data);
        match e.kind {
            ParamKind::Weight => {
                let std = (1.0 / e.fan_in as f64).sqrt();
                for v in dst {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = F::real(z * std);
                }
            }
            ParamKind::Scale => dst.fill(F::one()),
            ParamKind::Bias | ParamKind::Offset | ParamKind::OutputWeight => dst.fill(F::zero()),
        }
    }
    Ok(DenoiserParams { arch, data })
}

impl<F: Real> DenoiserParams<F> {
    pub fn from_data(desc: &Descriptor, data: Vec<F>) -> Result<Self> {
        let arch = Architecture::new(desc)?;
        if data.len() != arch.n_params {
            return Err(Error::shape(format!("descriptor needs {} parameters, got {}", arch.n_params, data.len())));
        }
        Ok(DenoiserParams { arch, data })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn descriptor(&self) -> &Descriptor {
        &self.arch.desc
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.arch.entry(name).map(|e| e.slot.of(&self.data))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let slot = self.arch.entry(name)?.slot;
        Some(slot.of_mut(&mut self.data))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> DenoiserParams<G> {
        DenoiserParams { arch: self.arch.clone(), data: self.data.iter().map(|v| G::real(v.as_f64())).collect() }
    }

    pub fn zeros_like(&self) -> Vec<F> {
        vec![F::zero(); self.data.len()]
    }

    /// Predicted noise for one item. `cond` is the LR raster already
    /// upsampled to `f_t`'s size.
    pub fn forward(&self, cond: &Feat<F>, f_t: &Feat<F>, t: usize) -> Result<Feat<F>> {
        Ok(self.forward_cached(cond, f_t, t)?.0)
    }

    /// Gradient of `<dout, forward(cond, f_t, t)>` with respect to the
    /// parameters.
    pub fn vjp(&self, cond: &Feat<F>, f_t: &Feat<F>, t: usize, dout: &Feat<F>) -> Result<Vec<F>> {
        let (out, cache) = self.forward_cached(cond, f_t, t)?;
        if !out.same_shape(dout) {
            return Err(Error::shape("output cotangent has the wrong shape"));
        }
        let mut grads = self.zeros_like();
        self.backward(&cache, dout, &mut grads);
        Ok(grads)
    }

    pub(crate) fn check_inputs(&self, cond: &Feat<F>, f_t: &Feat<F>) -> Result<()> {
        if f_t.c != 1 || !cond.same_shape(f_t) {
            return Err(Error::shape(format!(
                "expected two 1-channel maps of equal size, got {}x{}x{} and {}x{}x{}",
                cond.c, cond.h, cond.w, f_t.c, f_t.h, f_t.w
            )));
        }
        let m = self.arch.desc.size_multiple();
        if !f_t.h.is_multiple_of(m) || !f_t.w.is_multiple_of(m) || f_t.h == 0 || f_t.w == 0 {
            return Err(Error::shape(format!("spatial size {}x{} not divisible by {m}", f_t.h, f_t.w)));
        }
        if !cond.all_finite() || !f_t.all_finite() {
            return Err(Error::Validation("non-finite network input".into()));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, cond: &Feat<F>, f_t: &Feat<F>, t: usize) -> Result<(Feat<F>, NetCache<F>)> {
        self.check_inputs(cond, f_t)?;
        let a = &self.arch;
        let p = &self.data[..];
        let x_in = concat(f_t, cond);
        let sin: Vec<F> = time_embed(t as f64, a.desc.time_dim)?.into_iter().map(F::real).collect();
        let temb_pre = dense(&sin, a.temb.w.of(p), a.temb.b.of(p));
        let temb = silu(&temb_pre);

        let h0 = conv2d(&x_in, a.conv_in.w.of(p), a.conv_in.b.of(p), a.conv_in.cout, a.conv_in.k);
        let mut h = h0.clone();
        let mut down = Vec::with_capacity(a.down.len());
        let mut skips = Vec::with_capacity(a.down.len());
        for blk in &a.down {
            let (out, cache) = res_forward(blk, p, h, &temb);
            skips.push(out.clone());
            down.push(cache);
            h = avg_pool2(&out);
        }
        let (mut h, mid) = res_forward(&a.mid, p, h, &temb);
        let mut up: Vec<Option<ResCache<F>>> = (0..a.up.len()).map(|_| None).collect();
        let mut up_split = vec![0; a.up.len()];
        for l in (0..a.up.len()).rev() {
            let upsampled = upsample2(&h);
            up_split[l] = upsampled.c;
            let x = concat(&upsampled, &skips[l]);
            let (out, cache) = res_forward(&a.up[l], p, x, &temb);
            up[l] = Some(cache);
            h = out;
        }
        let (na, norm_cache) = group_norm(&h, a.norm_out.gamma.of(p), a.norm_out.beta.of(p), a.norm_out.groups);
        let ns = silu_feat(&na);
        let out = conv2d(&ns, a.conv_out.w.of(p), a.conv_out.b.of(p), 1, a.conv_out.k);
        let cache = NetCache {
            x_in,
            sin,
            temb_pre,
            temb,
            down,
            mid,
            up: up.into_iter().map(|c| c.expect("every up level runs")).collect(),
            up_split,
            norm_out: norm_cache,
            out_a: na,
            out_s: ns,
        };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for one item given `d loss / d output`.
    pub(crate) fn backward(&self, cache: &NetCache<F>, dout: &Feat<F>, grads: &mut [F]) {
        let a = &self.arch;
        let p = &self.data[..];
        let mut dtemb = vec![F::zero(); a.desc.time_dim];

        let (gw, gb) = split_pair(grads, a.conv_out.w, a.conv_out.b);
        let ds = conv2d_backward(&cache.out_s, a.conv_out.w.of(p), 1, a.conv_out.k, dout, gw, gb);
        let da = silu_backward_feat(&cache.out_a, &ds);
        let (gg, gbeta) = split_pair(grads, a.norm_out.gamma, a.norm_out.beta);
        let mut dh = group_norm_backward(&cache.norm_out, a.norm_out.gamma.of(p), a.norm_out.groups, &da, gg, gbeta);

        let mut dskips: Vec<Feat<F>> = Vec::with_capacity(a.up.len());
        for l in 0..a.up.len() {
            let dx = res_backward(&a.up[l], p, &cache.up[l], &dh, &cache.temb, &mut dtemb, grads);
            let (dup, dskip) = split_channels(dx, cache.up_split[l]);
            dskips.push(dskip);
            dh = upsample2_backward(&dup);
        }
        let mut dpooled = res_backward(&a.mid, p, &cache.mid, &dh, &cache.temb, &mut dtemb, grads);
        for l in (0..a.down.len()).rev() {
            let mut dl = avg_pool2_backward(&dpooled);
            for (d, s) in dl.data.iter_mut().zip(&dskips[l].data) {
                *d += *s;
            }
            dpooled = res_backward(&a.down[l], p, &cache.down[l], &dl, &cache.temb, &mut dtemb, grads);
        }
        let (gw, gb) = split_pair(grads, a.conv_in.w, a.conv_in.b);
        conv2d_backward(&cache.x_in, a.conv_in.w.of(p), a.conv_in.cout, a.conv_in.k, &dpooled, gw, gb);

        let dpre = silu_backward(&cache.temb_pre, &dtemb);
        let (gw, gb) = split_pair(grads, a.temb.w, a.temb.b);
        dense_backward(&cache.sin, a.temb.w.of(p), &dpre, gw, gb);
    }
}

/// Two disjoint mutable views into the gradient vector. Weight slots always
/// precede their bias slots.
fn split_pair<F>(g: &mut [F], first: Slot, second: Slot) -> (&mut [F], &mut [F]) {
    debug_assert!(first.offset + first.len <= second.offset);
    let (lo, hi) = g.split_at_mut(second.offset);
    (first.of_mut(lo), &mut hi[..second.len])
}

pub(crate) struct ResCache<F> {
    x: Feat<F>,
    n1: NormCache<F>,
    a1: Feat<F>,
    s1: Feat<F>,
    n2: NormCache<F>,
    a2: Feat<F>,
    s2: Feat<F>,
}

pub(crate) struct NetCache<F> {
    x_in: Feat<F>,
    sin: Vec<F>,
    temb_pre: Vec<F>,
    temb: Vec<F>,
    down: Vec<ResCache<F>>,
    mid: ResCache<F>,
    up: Vec<ResCache<F>>,
    up_split: Vec<usize>,
    norm_out: NormCache<F>,
    out_a: Feat<F>,
    out_s: Feat<F>,
}

fn res_forward<F: Real>(blk: &ResBlock, p: &[F], x: Feat<F>, temb: &[F]) -> (Feat<F>, ResCache<F>) {
    let (a1, n1) = group_norm(&x, blk.norm1.gamma.of(p), blk.norm1.beta.of(p), blk.norm1.groups);
    let s1 = silu_feat(&a1);
    let mut h = conv2d(&s1, blk.conv1.w.of(p), blk.conv1.b.of(p), blk.conv1.cout, blk.conv1.k);
    let shift = dense(temb, blk.temb.w.of(p), blk.temb.b.of(p));
    for (c, &v) in shift.iter().enumerate() {
        for o in h.channel_mut(c) {
            *o += v;
        }
    }
    let (a2, n2) = group_norm(&h, blk.norm2.gamma.of(p), blk.norm2.beta.of(p), blk.norm2.groups);
    let s2 = silu_feat(&a2);
    let mut out = conv2d(&s2, blk.conv2.w.of(p), blk.conv2.b.of(p), blk.conv2.cout, blk.conv2.k);
    match &blk.skip {
        Some(sk) => {
            let proj = conv2d(&x, sk.w.of(p), sk.b.of(p), sk.cout, 1);
            for (o, v) in out.data.iter_mut().zip(&proj.data) {
                *o += *v;
            }
        }
        None => {
            for (o, v) in out.data.iter_mut().zip(&x.data) {
                *o += *v;
            }
        }
    }
    (out, ResCache { x, n1, a1, s1, n2, a2, s2 })
}

fn res_backward<F: Real>(
    blk: &ResBlock,
    p: &[F],
    c: &ResCache<F>,
    dout: &Feat<F>,
    temb: &[F],
    dtemb: &mut [F],
    grads: &mut [F],
) -> Feat<F> {
    let (gw, gb) = split_pair(grads, blk.conv2.w, blk.conv2.b);
    let ds2 = conv2d_backward(&c.s2, blk.conv2.w.of(p), blk.conv2.cout, blk.conv2.k, dout, gw, gb);
    let da2 = silu_backward_feat(&c.a2, &ds2);
    let (gg, gbeta) = split_pair(grads, blk.norm2.gamma, blk.norm2.beta);
    let dh = group_norm_backward(&c.n2, blk.norm2.gamma.of(p), blk.norm2.groups, &da2, gg, gbeta);

    let dshift: Vec<F> = (0..dh.c).map(|ch| dh.channel(ch).iter().copied().sum()).collect();
    let (gw, gb) = split_pair(grads, blk.temb.w, blk.temb.b);
    let dt = dense_backward(temb, blk.temb.w.of(p), &dshift, gw, gb);
    for (d, v) in dtemb.iter_mut().zip(dt) {
        *d += v;
    }

    let (gw, gb) = split_pair(grads, blk.conv1.w, blk.conv1.b);
    let ds1 = conv2d_backward(&c.s1, blk.conv1.w.of(p), blk.conv1.cout, blk.conv1.k, &dh, gw, gb);
    let da1 = silu_backward_feat(&c.a1, &ds1);
    let (gg, gbeta) = split_pair(grads, blk.norm1.gamma, blk.norm1.beta);
    let mut dx = group_norm_backward(&c.n1, blk.norm1.gamma.of(p), blk.norm1.groups, &da1, gg, gbeta);

    match &blk.skip {
        Some(sk) => {
            let (gw, gb) = split_pair(grads, sk.w, sk.b);
            let dskip = conv2d_backward(&c.x, sk.w.of(p), sk.cout, 1, dout, gw, gb);
            for (d, v) in dx.data.iter_mut().zip(&dskip.data) {
                *d += *v;
            }
        }
        None => {
            for (d, v) in dx.data.iter_mut().zip(&dout.data) {
                *d += *v;
            }
        }
    }
    dx
}
