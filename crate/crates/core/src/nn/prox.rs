//! Residual U-Net used as the learned proximal map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{relu, relu_backward, Conv, ConvCache, ConvKind, Feature};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Architecture of one proximal network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxNetSpec {
    pub scales: usize,
    pub base_channels: usize,
    /// Channel multiplier per scale, finest first.
    pub multipliers: Vec<usize>,
    pub residual_blocks: usize,
}

impl ProxNetSpec {
    /// 16 → 32 → 64 → 128 channels, one residual block per scale.
    pub fn desk() -> Self {
        ProxNetSpec {
            scales: 4,
            base_channels: 16,
            multipliers: vec![1, 2, 4, 8],
            residual_blocks: 1,
        }
    }

    /// 64 → 128 → 256 → 512 channels.
    pub fn paper() -> Self {
        ProxNetSpec {
            base_channels: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.base_channels == 0 {
            return Err(Error::Validation("prox net needs at least one scale and one channel".into()));
        }
        if self.multipliers.len() != self.scales || self.multipliers.contains(&0) {
            return Err(Error::Validation(format!(
                "expected {} positive channel multipliers, got {:?}",
                self.scales, self.multipliers
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial dims must be divisible by this factor.
    pub fn divisor(&self) -> usize {
        1 << (self.scales - 1)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

struct ResCache<T> {
    a: ConvCache<T>,
    act: Feature<T>,
    b: ConvCache<T>,
}

impl ResBlock {
    fn forward<T: Real>(&self, p: &[T], x: Feature<T>) -> (Feature<T>, ResCache<T>) {
        let (mut act, ca) = self.a.forward(p, &x);
        relu(&mut act);
        let (mut y, cb) = self.b.forward(p, &act);
        y.add_assign(&x);
        (y, ResCache { a: ca, act, b: cb })
    }

    fn backward<T: Real>(&self, p: &[T], cache: &ResCache<T>, dy: Feature<T>, grad: &mut [T]) -> Feature<T> {
        let mut dact = self.b.backward(p, &cache.b, &dy, grad);
        relu_backward(&cache.act, &mut dact);
        let mut dx = self.a.backward(p, &cache.a, &dact, grad);
        dx.add_assign(&dy);
        dx
    }
}

/// Forward-pass record needed by [`ProxNet::backward`].
pub struct ProxCache<T> {
    input: ConvCache<T>,
    enc: Vec<Vec<ResCache<T>>>,
    down: Vec<ConvCache<T>>,
    mid: Vec<ResCache<T>>,
    up: Vec<ConvCache<T>>,
    dec: Vec<Vec<ResCache<T>>>,
    output: ConvCache<T>,
}

/// Parameter layout of one U-Net; offsets are relative to the start of its
/// parameter slice.
#[derive(Debug, Clone)]
pub struct ProxNet {
    pub spec: ProxNetSpec,
    input: Conv,
    enc: Vec<Vec<ResBlock>>,
    down: Vec<Conv>,
    mid: Vec<ResBlock>,
    up: Vec<Conv>,
    dec: Vec<Vec<ResBlock>>,
    output: Conv,
    params: usize,
}

impl ProxNet {
    pub fn new(spec: &ProxNetSpec) -> Result<Self> {
        spec.validate()?;
        let ch = spec.channels();
        let mut off = 0;
        let mut conv = |kind, cin, cout| {
            let c = Conv::new(kind, cin, cout, off);
            off += c.param_count();
            c
        };
        let input = conv(ConvKind::Same3, 2, ch[0]);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for s in 0..spec.scales - 1 {
            let blocks = (0..spec.residual_blocks)
                .map(|_| ResBlock {
                    a: conv(ConvKind::Same3, ch[s], ch[s]),
                    b: conv(ConvKind::Same3, ch[s], ch[s]),
                })
                .collect();
            enc.push(blocks);
            down.push(conv(ConvKind::Down2, ch[s], ch[s + 1]));
        }
        let last = ch[spec.scales - 1];
        let mid = (0..spec.residual_blocks)
            .map(|_| ResBlock {
                a: conv(ConvKind::Same3, last, last),
                b: conv(ConvKind::Same3, last, last),
            })
            .collect();
        let mut up = vec![None; spec.scales - 1];
        let mut dec = vec![Vec::new(); spec.scales - 1];
        for s in (0..spec.scales - 1).rev() {
            up[s] = Some(conv(ConvKind::Up2, ch[s + 1], ch[s]));
            dec[s] = (0..spec.residual_blocks)
                .map(|_| ResBlock {
                    a: conv(ConvKind::Same3, ch[s], ch[s]),
                    b: conv(ConvKind::Same3, ch[s], ch[s]),
                })
                .collect();
        }
        let output = conv(ConvKind::Same3, ch[0], 2);
        Ok(ProxNet {
            spec: spec.clone(),
            input,
            enc,
            down,
            mid,
            up: up.into_iter().map(Option::unwrap).collect(),
            dec,
            output,
            params: off,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params
    }

    fn convs(&self) -> Vec<&Conv> {
        fn blocks(v: &[ResBlock]) -> impl Iterator<Item = &Conv> {
            v.iter().flat_map(|b| [&b.a, &b.b])
        }
        std::iter::once(&self.input)
            .chain(self.enc.iter().flat_map(|v| blocks(v)))
            .chain(&self.down)
            .chain(blocks(&self.mid))
            .chain(&self.up)
            .chain(self.dec.iter().flat_map(|v| blocks(v)))
            .chain(std::iter::once(&self.output))
            .collect()
    }

    /// Random trunk; the output convolution starts at zero when
    /// `zero_output` is set, so the whole net starts as the identity map.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, params: &mut [T], rng: &mut R, zero_output: bool) {
        assert_eq!(params.len(), self.params);
        for c in self.convs() {
            c.init(params, rng);
        }
        if zero_output {
            self.output.zero(params);
        }
    }

    /// Multiply-accumulates per `(2, height, width)` input.
    pub fn macs(&self, height: usize, width: usize) -> u64 {
        let mut total = 0;
        let (mut h, mut w) = (height, width);
        let block = |b: &ResBlock, h, w| b.a.macs(h, w) + b.b.macs(h, w);
        total += self.input.macs(h, w) + self.output.macs(h, w);
        for s in 0..self.spec.scales - 1 {
            for b in self.enc[s].iter().chain(&self.dec[s]) {
                total += block(b, h, w);
            }
            total += self.down[s].macs(h, w);
            h /= 2;
            w /= 2;
            total += self.up[s].macs(h, w);
        }
        total + self.mid.iter().map(|b| block(b, h, w)).sum::<u64>()
    }

    pub fn check_input<T: Real>(&self, x: &Feature<T>) -> Result<()> {
        let d = self.spec.divisor();
        if x.channels != 2 || x.height % d != 0 || x.width % d != 0 || x.height == 0 || x.width == 0 {
            return Err(Error::Validation(format!(
                "prox net input ({}, {}, {}) must have 2 channels and spatial dims divisible by {d}",
                x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    /// `x + trunk(x)`.
    pub fn forward<T: Real>(&self, params: &[T], x: &Feature<T>) -> (Feature<T>, ProxCache<T>) {
        assert_eq!(params.len(), self.params, "prox parameter slice");
        let (mut h, input) = self.input.forward(params, x);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut skips = Vec::new();
        for s in 0..self.spec.scales - 1 {
            let mut caches = Vec::new();
            for b in &self.enc[s] {
                let (y, c) = b.forward(params, h);
                h = y;
                caches.push(c);
            }
            enc.push(caches);
            let (y, c) = self.down[s].forward(params, &h);
            skips.push(h);
            h = y;
            down.push(c);
        }
        let mut mid = Vec::new();
        for b in &self.mid {
            let (y, c) = b.forward(params, h);
            h = y;
            mid.push(c);
        }
        let mut up: Vec<Option<ConvCache<T>>> = (0..self.spec.scales - 1).map(|_| None).collect();
        let mut dec: Vec<Vec<ResCache<T>>> = (0..self.spec.scales - 1).map(|_| Vec::new()).collect();
        for s in (0..self.spec.scales - 1).rev() {
            let (mut y, c) = self.up[s].forward(params, &h);
            up[s] = Some(c);
            y.add_assign(&skips[s]);
            h = y;
            for b in &self.dec[s] {
                let (y, c) = b.forward(params, h);
                h = y;
                dec[s].push(c);
            }
        }
        let (mut out, output) = self.output.forward(params, &h);
        out.add_assign(x);
        let cache = ProxCache {
            input,
            enc,
            down,
            mid,
            up: up.into_iter().map(Option::unwrap).collect(),
            dec,
            output,
        };
        (out, cache)
    }

    /// Adds parameter gradients into `grad` and returns the input gradient.
    pub fn backward<T: Real>(&self, params: &[T], cache: &ProxCache<T>, dout: &Feature<T>, grad: &mut [T]) -> Feature<T> {
        assert_eq!(grad.len(), self.params, "prox gradient slice");
        let mut dh = self.output.backward(params, &cache.output, dout, grad);
        let mut dskips: Vec<Option<Feature<T>>> = (0..self.spec.scales - 1).map(|_| None).collect();
        for s in 0..self.spec.scales - 1 {
            for (b, c) in self.dec[s].iter().zip(&cache.dec[s]).rev() {
                dh = b.backward(params, c, dh, grad);
            }
            dskips[s] = Some(dh.clone());
            dh = self.up[s].backward(params, &cache.up[s], &dh, grad);
        }
        for (b, c) in self.mid.iter().zip(&cache.mid).rev() {
            dh = b.backward(params, c, dh, grad);
        }
        for s in (0..self.spec.scales - 1).rev() {
            dh = self.down[s].backward(params, &cache.down[s], &dh, grad);
            dh.add_assign(dskips[s].as_ref().unwrap());
            for (b, c) in self.enc[s].iter().zip(&cache.enc[s]).rev() {
                dh = b.backward(params, c, dh, grad);
            }
        }
        let mut dx = self.input.backward(params, &cache.input, &dh, grad);
        dx.add_assign(dout);
        dx
    }
}
