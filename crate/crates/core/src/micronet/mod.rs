//! Compact dual-decoder 3D segmentation network with hand-written backprop.
//!
//! Encoder: `stem` conv3 1->8, `stage1` conv3/2 8->16, `stage2` conv3/2
//! 16->32, each followed by ReLU. Each decoder (LA and scar) upsamples x2,
//! conv3 32->16 + ReLU, adds the stage1 skip, upsamples x2, conv3 16->8 +
//! ReLU, adds the stem skip, then a 1x1x1 conv 8->1 and a sigmoid.
//!
//! All arithmetic is `f64`. Parameters are flat named tensors, each with a
//! trainability flag and a learning-rate multiplier read by [`AdamW`].

mod adamw;
pub mod checkpoint;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{Checkpoint, RngState};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};
use tensor::{
    conv_backward, conv_forward, relu_backward, relu_inplace, sigmoid, upsample2,
    upsample2_backward, ConvShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Stem,
    Stage1,
    Stage2,
    LaDecoder,
    ScarDecoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Stem,
        ParamGroup::Stage1,
        ParamGroup::Stage2,
        ParamGroup::LaDecoder,
        ParamGroup::ScarDecoder,
    ];

    pub fn is_encoder(self) -> bool {
        matches!(self, ParamGroup::Stem | ParamGroup::Stage1 | ParamGroup::Stage2)
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Stage::I),
            2 => Some(Stage::II),
            3 => Some(Stage::III),
            _ => None,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            other => Err(Error::invalid(format!("unknown stage {other:?} (expected I, II or III)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Vec<f64>,
    pub trainable: bool,
    pub lr_mult: f64,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    shape: ConvShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Decoder {
    up1: Conv,
    up2: Conv,
    head: Conv,
}

/// Which decoders a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub la: bool,
    pub scar: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads { la: true, scar: true };
    pub const LA: Heads = Heads { la: true, scar: false };
    pub const SCAR: Heads = Heads { la: false, scar: true };
}

#[derive(Debug, Clone)]
pub struct MicroNet {
    params: Vec<Param>,
    stem: Conv,
    stage1: Conv,
    stage2: Conv,
    decoders: [Decoder; 2],
    generation: u64,
}

struct DecoderCache {
    u1: Tensor,
    a1: Tensor,
    u2: Tensor,
    a2: Tensor,
    b2: Tensor,
    y: Vec<f64>,
}

/// Activations kept for [`MicroNet::backward`].
pub struct ForwardCache {
    generation: u64,
    x: Tensor,
    s0: Tensor,
    s1: Tensor,
    z: Tensor,
    dec: [Option<DecoderCache>; 2],
}

pub struct ForwardOutput {
    pub la: Option<Volume>,
    pub scar: Option<Volume>,
    pub cache: ForwardCache,
}

/// Parameter gradients, parallel to [`MicroNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(net: &MicroNet) -> Self {
        Grads(net.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|&g| g == 0.0)
    }
}

const ARCH: &str = "micronet-v1;stem:1>8:k3s1;stage1:8>16:k3s2;stage2:16>32:k3s2;\
dec:up2,32>16:k3s1,+stage1,up2,16>8:k3s1,+stem,8>1:k1s1,sigmoid;decoders:la,scar";

/// SHA-256 of the architecture descriptor.
pub fn arch_hash() -> [u8; 32] {
    Sha256::digest(ARCH.as_bytes()).into()
}

impl MicroNet {
    /// He-normal weights from a seeded generator, zero biases.
    pub fn new(seed: u64) -> Self {
        let mut params = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |name: &str, group, cin, cout, kernel, stride| {
            let shape = ConvShape {
                cin,
                cout,
                kernel,
                stride,
            };
            let fan_in = (cin * kernel.pow(3)) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let w = (0..shape.weight_len()).map(|_| normal.sample(&mut rng)).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                group,
                value: w,
                trainable: true,
                lr_mult: 1.0,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                group,
                value: vec![0.0; cout],
                trainable: true,
                lr_mult: 1.0,
            });
            Conv {
                shape,
                w: params.len() - 2,
                b: params.len() - 1,
            }
        };
        let stem = conv("stem", ParamGroup::Stem, 1, 8, 3, 1);
        let stage1 = conv("stage1", ParamGroup::Stage1, 8, 16, 3, 2);
        let stage2 = conv("stage2", ParamGroup::Stage2, 16, 32, 3, 2);
        let mut dec = |prefix: &str, group| Decoder {
            up1: conv(&format!("{prefix}.up1"), group, 32, 16, 3, 1),
            up2: conv(&format!("{prefix}.up2"), group, 16, 8, 3, 1),
            head: conv(&format!("{prefix}.head"), group, 8, 1, 1, 1),
        };
        let la = dec("la", ParamGroup::LaDecoder);
        let scar = dec("scar", ParamGroup::ScarDecoder);
        MicroNet {
            params,
            stem,
            stage1,
            stage2,
            decoders: [la, scar],
            generation: 0,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable access bumps the generation so stale caches are rejected.
    pub fn params_mut(&mut self) -> &mut [Param] {
        self.generation += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_indices(&self, g: ParamGroup) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == g)
            .map(|(i, _)| i)
    }

    /// Replaces every parameter value of `group` with those of `other`.
    pub fn copy_group_from(&mut self, other: &MicroNet, group: ParamGroup) {
        self.generation += 1;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            if p.group == group {
                p.value.clone_from(&q.value);
            }
        }
    }

    pub fn set_group(&mut self, group: ParamGroup, trainable: bool, lr_mult: f64) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
            p.lr_mult = lr_mult;
        }
    }

    /// Trainability and lr multipliers for a training stage.
    pub fn set_stage_trainability(&mut self, stage: Stage) {
        use ParamGroup::*;
        let table: [(ParamGroup, bool, f64); 5] = match stage {
            Stage::I => [
                (Stem, true, 1.0),
                (Stage1, true, 1.0),
                (Stage2, true, 1.0),
                (LaDecoder, true, 1.0),
                (ScarDecoder, false, 1.0),
            ],
            Stage::II => [
                (Stem, true, 0.1),
                (Stage1, true, 0.1),
                (Stage2, true, 0.1),
                (LaDecoder, true, 0.1),
                (ScarDecoder, true, 1.0),
            ],
            Stage::III => [
                (Stem, false, 1.0),
                (Stage1, false, 1.0),
                (Stage2, true, 1.0),
                (LaDecoder, false, 1.0),
                (ScarDecoder, true, 1.0),
            ],
        };
        for (g, t, m) in table {
            self.set_group(g, t, m);
        }
    }

    fn conv(&self, c: &Conv, x: &Tensor) -> Tensor {
        conv_forward(x, &self.params[c.w].value, &self.params[c.b].value, &c.shape)
    }

    pub fn forward(&self, x: &Volume, heads: Heads) -> Result<ForwardOutput> {
        let d = x.dims();
        if d.iter().any(|&n| n % 4 != 0) {
            return Err(Error::invalid(format!("network input dims must be divisible by 4, got {d:?}")));
        }
        let input = Tensor {
            channels: 1,
            dims: d,
            data: x.data().to_vec(),
        };
        let mut s0 = self.conv(&self.stem, &input);
        relu_inplace(&mut s0);
        let mut s1 = self.conv(&self.stage1, &s0);
        relu_inplace(&mut s1);
        let mut z = self.conv(&self.stage2, &s1);
        relu_inplace(&mut z);

        let mut dec: [Option<DecoderCache>; 2] = [None, None];
        let mut outs: [Option<Volume>; 2] = [None, None];
        for (i, on) in [heads.la, heads.scar].into_iter().enumerate() {
            if !on {
                continue;
            }
            let dc = &self.decoders[i];
            let u1 = upsample2(&z);
            let mut a1 = self.conv(&dc.up1, &u1);
            relu_inplace(&mut a1);
            let mut b1 = a1.clone();
            b1.data.iter_mut().zip(&s1.data).for_each(|(a, s)| *a += s);
            let u2 = upsample2(&b1);
            let mut a2 = self.conv(&dc.up2, &u2);
            relu_inplace(&mut a2);
            let mut b2 = a2.clone();
            b2.data.iter_mut().zip(&s0.data).for_each(|(a, s)| *a += s);
            let logit = self.conv(&dc.head, &b2);
            let y: Vec<f64> = logit.data.iter().map(|&v| sigmoid(v)).collect();
            outs[i] = Some(Volume::new(d, x.spacing(), y.clone(), VolumeKind::Intensity)?);
            dec[i] = Some(DecoderCache { u1, a1, u2, a2, b2, y });
        }
        let [la, scar] = outs;
        Ok(ForwardOutput {
            la,
            scar,
            cache: ForwardCache {
                generation: self.generation,
                x: input,
                s0,
                s1,
                z,
                dec,
            },
        })
    }

    /// Gradients of a loss with upstream gradients `d_la`, `d_scar` w.r.t.
    /// the output probabilities. Gradients are computed for every parameter
    /// regardless of trainability.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_la: Option<&[f64]>,
        d_scar: Option<&[f64]>,
    ) -> Result<Grads> {
        if cache.generation != self.generation {
            return Err(Error::invalid("forward cache is stale: parameters changed since forward"));
        }
        let mut grads = Grads::zeros_like(self);
        let mut ds0 = Tensor::zeros(cache.s0.channels, cache.s0.dims);
        let mut ds1 = Tensor::zeros(cache.s1.channels, cache.s1.dims);
        let mut dz = Tensor::zeros(cache.z.channels, cache.z.dims);
        for (i, up) in [d_la, d_scar].into_iter().enumerate() {
            let Some(up) = up else { continue };
            let dc = cache.dec[i].as_ref().ok_or_else(|| {
                Error::invalid(format!("upstream gradient for decoder {i} that was not evaluated"))
            })?;
            if up.len() != dc.y.len() {
                return Err(Error::invalid(format!(
                    "upstream gradient has {} values, output has {}",
                    up.len(),
                    dc.y.len()
                )));
            }
            let net = &self.decoders[i];
            let dlogit = Tensor {
                channels: 1,
                dims: cache.x.dims,
                data: up.iter().zip(&dc.y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            };
            let db2 = self.conv_back(&net.head, &dc.b2, &dlogit, &mut grads, true).unwrap();
            ds0.data.iter_mut().zip(&db2.data).for_each(|(a, g)| *a += g);
            let mut da2 = db2;
            relu_backward(&dc.a2, &mut da2);
            let du2 = self.conv_back(&net.up2, &dc.u2, &da2, &mut grads, true).unwrap();
            let db1 = upsample2_backward(&du2);
            ds1.data.iter_mut().zip(&db1.data).for_each(|(a, g)| *a += g);
            let mut da1 = db1;
            relu_backward(&dc.a1, &mut da1);
            let du1 = self.conv_back(&net.up1, &dc.u1, &da1, &mut grads, true).unwrap();
            let dzi = upsample2_backward(&du1);
            dz.data.iter_mut().zip(&dzi.data).for_each(|(a, g)| *a += g);
        }
        relu_backward(&cache.z, &mut dz);
        let d1 = self.conv_back(&self.stage2, &cache.s1, &dz, &mut grads, true).unwrap();
        ds1.data.iter_mut().zip(&d1.data).for_each(|(a, g)| *a += g);
        relu_backward(&cache.s1, &mut ds1);
        let d0 = self.conv_back(&self.stage1, &cache.s0, &ds1, &mut grads, true).unwrap();
        ds0.data.iter_mut().zip(&d0.data).for_each(|(a, g)| *a += g);
        relu_backward(&cache.s0, &mut ds0);
        self.conv_back(&self.stem, &cache.x, &ds0, &mut grads, false);
        Ok(grads)
    }

    fn conv_back(
        &self,
        c: &Conv,
        x: &Tensor,
        dout: &Tensor,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Tensor> {
        let (gw, gb) = split_two(&mut grads.0, c.w, c.b);
        conv_backward(x, &self.params[c.w].value, dout, &c.shape, gw, gb, need_dx)
    }

    /// Thresholded prediction helper: probabilities `>= 0.5` become 1.
    pub fn predict(&self, x: &Volume, heads: Heads) -> Result<(Option<Volume>, Option<Volume>)> {
        let out = self.forward(x, heads)?;
        Ok((out.la.map(|v| v.threshold(0.5)), out.scar.map(|v| v.threshold(0.5))))
    }

    pub(crate) fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut net = MicroNet::new(0);
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for (p, q) in net.params.iter().zip(&params) {
            if p.name != q.name || p.group != q.group || p.value.len() != q.value.len() {
                return Err(Error::Checkpoint(format!("parameter {:?} does not match the architecture", q.name)));
            }
        }
        net.params = params;
        Ok(net)
    }
}

fn split_two(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
