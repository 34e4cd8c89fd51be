//! Network architectures built on the tape.
//!
//! Hidden blocks run dense (or conv) → layer-norm → ReLU, then add the block
//! input when widths match. The last block of every network is a plain
//! projection so outputs are unconstrained.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{glorot_uniform, Bound, ParamId, ParamSet};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            w: ps.add(format!("{name}.w"), glorot_uniform(input, output, input, output, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(1, output)),
            input,
            output,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.linear(p[self.w], p[self.b])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        LayerNorm {
            scale: ps.add(format!("{name}.scale"), Tensor::full(1, width, 1.0)),
            shift: ps.add(format!("{name}.shift"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(p[self.scale], p[self.shift])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBlockSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub blocks: usize,
}

impl LinearBlockSpec {
    pub fn new(input: usize, output: usize) -> Self {
        LinearBlockSpec {
            input,
            hidden: 100,
            output,
            blocks: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LinearBlock {
    dense: Dense,
    norm: Option<LayerNorm>,
    skip: bool,
}

/// Stack of linear blocks: `input → hidden → … → hidden → output`. A single
/// block is one affine map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearBlockNet {
    pub spec: LinearBlockSpec,
    blocks: Vec<LinearBlock>,
}

impl LinearBlockNet {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, spec: LinearBlockSpec, rng: &mut R) -> Self {
        assert!(spec.blocks >= 1, "a linear-block net needs at least one block");
        let mut blocks = Vec::with_capacity(spec.blocks);
        for k in 0..spec.blocks {
            let last = k + 1 == spec.blocks;
            let input = if k == 0 { spec.input } else { spec.hidden };
            let output = if last { spec.output } else { spec.hidden };
            let bname = format!("{name}.block{k}");
            let dense = Dense::new(ps, &format!("{bname}.fc"), input, output, rng);
            let norm = (!last).then(|| LayerNorm::new(ps, &format!("{bname}.norm"), output));
            blocks.push(LinearBlock {
                dense,
                norm,
                skip: !last && k > 0 && input == output,
            });
        }
        LinearBlockNet { spec, blocks }
    }

    /// `x` is `batch × input`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for b in &self.blocks {
            let mut y = b.dense.forward(p, h);
            if let Some(n) = &b.norm {
                y = n.forward(p, y).relu();
            }
            h = if b.skip { h + y } else { y };
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// Spatial length L (grid points).
    pub length: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Convolutional blocks, including the one that changes channel count.
    pub conv_blocks: usize,
    /// Width of the dense side (latent dimension).
    pub latent: usize,
}

impl ConvSpec {
    pub fn new(length: usize, latent: usize) -> Self {
        ConvSpec {
            length,
            channels: 20,
            kernel: 5,
            conv_blocks: 9,
            latent,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConvBlock {
    kernel: ParamId,
    bias: ParamId,
    norm: Option<LayerNorm>,
    skip: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        length: usize,
        plain: bool,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            kernel: ps.add(
                format!("{name}.kernel"),
                glorot_uniform(c_in * ksize, c_out * ksize, c_out, c_in * ksize, rng),
            ),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(1, c_out)),
            norm: (!plain).then(|| LayerNorm::new(ps, &format!("{name}.norm"), c_out * length)),
            skip: !plain && c_in == c_out,
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, length: usize) -> Var<'t> {
        let mut y = x.conv1d_circular(p[self.kernel], p[self.bias], length);
        if let Some(n) = &self.norm {
            y = n.forward(p, y).relu();
        }
        if self.skip {
            x + y
        } else {
            y
        }
    }
}

/// Circular-convolution encoder: `batch × L` → conv blocks (1 → C → … → C
/// channels) → flatten (C·L) → dense → `batch × latent`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CircularConvNet {
    pub spec: ConvSpec,
    blocks: Vec<ConvBlock>,
    head: Dense,
}

impl CircularConvNet {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let blocks = (0..spec.conv_blocks)
            .map(|k| {
                let c_in = if k == 0 { 1 } else { spec.channels };
                ConvBlock::new(ps, &format!("{name}.conv{k}"), c_in, spec.channels, spec.kernel, spec.length, false, rng)
            })
            .collect();
        let head = Dense::new(ps, &format!("{name}.head"), spec.channels * spec.length, spec.latent, rng);
        CircularConvNet { spec, blocks, head }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(p, h, self.spec.length);
        }
        self.head.forward(p, h)
    }
}

/// Mirror of [`CircularConvNet`]: dense `latent → C·L`, conv blocks at C
/// channels, then a plain C → 1 convolution giving `batch × L`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CircularConvDecoder {
    pub spec: ConvSpec,
    stem: Dense,
    blocks: Vec<ConvBlock>,
    out: ConvBlock,
}

impl CircularConvDecoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let c = spec.channels;
        let stem = Dense::new(ps, &format!("{name}.stem"), spec.latent, c * spec.length, rng);
        let blocks = (0..spec.conv_blocks.saturating_sub(1))
            .map(|k| ConvBlock::new(ps, &format!("{name}.conv{k}"), c, c, spec.kernel, spec.length, false, rng))
            .collect();
        let out = ConvBlock::new(ps, &format!("{name}.out"), c, 1, spec.kernel, spec.length, true, rng);
        CircularConvDecoder { spec, stem, blocks, out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = self.stem.forward(p, x);
        for b in &self.blocks {
            h = b.forward(p, h, self.spec.length);
        }
        self.out.forward(p, h, self.spec.length)
    }
}

/// Any of the architectures, so models can pick one from configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Network {
    LinearBlock(LinearBlockNet),
    ConvEncoder(CircularConvNet),
    ConvDecoder(CircularConvDecoder),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NetworkSpec {
    LinearBlock(LinearBlockSpec),
    ConvEncoder(ConvSpec),
    ConvDecoder(ConvSpec),
}

impl Network {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, spec: &NetworkSpec, rng: &mut R) -> Self {
        match spec {
            NetworkSpec::LinearBlock(s) => Network::LinearBlock(LinearBlockNet::new(ps, name, s.clone(), rng)),
            NetworkSpec::ConvEncoder(s) => Network::ConvEncoder(CircularConvNet::new(ps, name, s.clone(), rng)),
            NetworkSpec::ConvDecoder(s) => Network::ConvDecoder(CircularConvDecoder::new(ps, name, s.clone(), rng)),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        match self {
            Network::LinearBlock(n) => n.forward(p, x),
            Network::ConvEncoder(n) => n.forward(p, x),
            Network::ConvDecoder(n) => n.forward(p, x),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Network::LinearBlock(n) => n.spec.input,
            Network::ConvEncoder(n) => n.spec.length,
            Network::ConvDecoder(n) => n.spec.latent,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Network::LinearBlock(n) => n.spec.output,
            Network::ConvEncoder(n) => n.spec.latent,
            Network::ConvDecoder(n) => n.spec.length,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_block_shapes_and_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let net = LinearBlockNet::new(&mut ps, "f", LinearBlockSpec::new(4, 20), &mut rng);
        // 10 dense layers, 9 norms
        assert_eq!(ps.len(), 10 * 2 + 9 * 2);
        let expected = 4 * 100 + 100 + 8 * (100 * 100 + 100) + 100 * 20 + 20 + 9 * 200;
        assert_eq!(ps.total_size(), expected);
        let tape = Tape::new();
        let p = ps.bind(&tape);
        let x = tape.constant(Tensor::from_fn(3, 4, |i, j| (i + j) as f64 * 0.1));
        assert_eq!(net.forward(&p, x).shape(), [3, 20]);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let d = Dense::new(&mut ps, "d", 30, 70, &mut rng);
        let a = (6.0f64 / 100.0).sqrt();
        assert!(ps.get(d.w).data.iter().all(|v| v.abs() <= a));
        assert!(ps.get(d.w).max_abs() > 0.9 * a);
    }

    #[test]
    fn conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let spec = ConvSpec::new(10, 16);
        let enc = CircularConvNet::new(&mut ps, "f", spec.clone(), &mut rng);
        let dec = CircularConvDecoder::new(&mut ps, "phi", spec, &mut rng);
        let tape = Tape::new();
        let p = ps.bind(&tape);
        let x = tape.constant(Tensor::from_fn(2, 10, |i, j| (i * 3 + j) as f64 * 0.2));
        let h = enc.forward(&p, x);
        assert_eq!(h.shape(), [2, 16]);
        assert_eq!(dec.forward(&p, h).shape(), [2, 10]);
    }
}
