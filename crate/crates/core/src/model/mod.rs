//! Encoder/decoder segmentation network with cross-scale attention (CSA)
//! gates in place of plain skip connections.
//!
//! Four encoder levels of widths `base·2^(l-1)`; level 4 is the bottleneck.
//! Decoder level 3 gates the level-3 encoder features using the level-1
//! features and the bottleneck; decoder level 2 gates the level-2 features
//! using the level-1 features and the level-3 decoder output. Level 1 uses a
//! plain skip.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, ConvSpec, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

pub const DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            _ => Err(Error::Config(format!("unknown activation `{s}` (relu | sigmoid)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
        })
    }
}

/// Hyper-parameters of one CSA gate.
#[derive(Clone, Debug, PartialEq)]
pub struct CsaConfig {
    /// kernel of the feature, decoder and squeeze convolutions (odd)
    pub k_size: usize,
    /// intermediate channels = level width / this divisor
    pub channel_divisor: usize,
    pub sigma1: Activation,
    pub sigma2: Activation,
}

impl Default for CsaConfig {
    fn default() -> Self {
        CsaConfig {
            k_size: 1,
            channel_divisor: 2,
            sigma1: Activation::Relu,
            sigma2: Activation::Sigmoid,
        }
    }
}

impl CsaConfig {
    /// Kernel and stride of the convolution aligning level-1 features with level `l`.
    pub fn align_stride(level: usize) -> usize {
        1 << (level - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub base_width: usize,
    /// encoder levels whose skip goes through a CSA gate, subset of {2, 3}
    pub csa_levels: Vec<usize>,
    pub csa: CsaConfig,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            classes: 2,
            base_width: 8,
            csa_levels: vec![2, 3],
            csa: CsaConfig::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetworkConfig {
    /// The same network with plain skips everywhere.
    pub fn plain(mut self) -> Self {
        self.csa_levels.clear();
        self
    }

    /// Channel width of encoder level `l` (1-based).
    pub fn width(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    pub fn has_csa(&self, level: usize) -> bool {
        self.csa_levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("in_channels and base_width must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if let Some(l) = self.csa_levels.iter().find(|l| !(2..=3).contains(*l)) {
            return Err(Error::Config(format!("csa level {l} is not one of 2, 3")));
        }
        if self.csa.k_size % 2 == 0 {
            return Err(Error::Config("csa_k_size must be odd".into()));
        }
        let mid = self.base_width * 2 / self.csa.channel_divisor.max(1);
        if self.csa.channel_divisor == 0 || mid == 0 {
            return Err(Error::Config("csa_channel_divisor leaves no intermediate channels".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let levels = match kv.take::<String>("csa_levels")? {
            None => d.csa_levels.clone(),
            Some(s) if s.trim().is_empty() || s.trim() == "none" => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad csa level `{t}`"))))
                .collect::<Result<_>>()?,
        };
        let cfg = NetworkConfig {
            in_channels: kv.take_or("in_channels", d.in_channels)?,
            classes: kv.take_or("classes", d.classes)?,
            base_width: kv.take_or("base_width", d.base_width)?,
            csa_levels: levels,
            csa: CsaConfig {
                k_size: kv.take_or("csa_k_size", d.csa.k_size)?,
                channel_divisor: kv.take_or("csa_channel_divisor", d.csa.channel_divisor)?,
                sigma1: kv.take_or("csa_sigma1", d.csa.sigma1)?,
                sigma2: kv.take_or("csa_sigma2", d.csa.sigma2)?,
            },
            bn_eps: kv.take_or("bn_eps", d.bn_eps)?,
            bn_momentum: kv.take_or("bn_momentum", d.bn_momentum)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("in_channels", self.in_channels);
        kv.set("classes", self.classes);
        kv.set("base_width", self.base_width);
        let levels: Vec<String> = self.csa_levels.iter().map(|l| l.to_string()).collect();
        kv.set("csa_levels", if levels.is_empty() { "none".to_string() } else { levels.join(",") });
        kv.set("csa_k_size", self.csa.k_size);
        kv.set("csa_channel_divisor", self.csa.channel_divisor);
        kv.set("csa_sigma1", self.csa.sigma1);
        kv.set("csa_sigma2", self.csa.sigma2);
        kv.set("bn_eps", self.bn_eps);
        kv.set("bn_momentum", self.bn_momentum);
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    spec: ConvSpec,
    transposed: bool,
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    /// buffer indices of the running mean and variance
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: Bn,
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct Csa {
    conv_l: Conv,
    conv_1: Conv,
    squeeze_1: Conv,
    conv_g: Conv,
    conv_lhat: Conv,
    squeeze_2: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    up: Conv,
    convs: DoubleConv,
}

/// Named learnable tensors and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    buffers: Vec<Tensor>,
    buffer_names: Vec<String>,
    encoders: Vec<DoubleConv>,
    /// decoders for levels 1..=3, index `l - 1`
    decoders: Vec<Decoder>,
    /// CSA gate per level, index `l - 1`
    csa: Vec<Option<Csa>>,
    head: Conv,
}

struct Builder<'a> {
    net: &'a mut Network,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn param(&mut self, name: String, t: Tensor) -> usize {
        self.net.params.push(t);
        self.net.param_names.push(name);
        self.net.params.len() - 1
    }

    fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool, transposed: bool) -> Conv {
        let k: usize = spec.kernel.iter().product();
        let (shape, fan_in) = if transposed {
            (
                vec![spec.in_channels, spec.out_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]],
                spec.in_channels * k / spec.stride.iter().product::<usize>(),
            )
        } else {
            (
                vec![spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]],
                spec.in_channels * k,
            )
        };
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        let w = Tensor::randn(&shape, std, &mut self.rng);
        let weight = self.param(format!("{name}.weight"), w);
        let bias = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Conv { weight, bias, spec, transposed }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.param(format!("{name}.gamma"), Tensor::ones(&[c]));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[c]));
        let n = &mut self.net;
        n.buffers.push(Tensor::zeros(&[c]));
        n.buffer_names.push(format!("{name}.running_mean"));
        n.buffers.push(Tensor::ones(&[c]));
        n.buffer_names.push(format!("{name}.running_var"));
        Bn {
            gamma,
            beta,
            mean: n.buffers.len() - 2,
            var: n.buffers.len() - 1,
        }
    }

    fn cbr(&mut self, name: &str, ci: usize, co: usize) -> ConvBnRelu {
        ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), ConvSpec::cubic(ci, co, 3, 1, 1), false, false),
            bn: self.bn(&format!("{name}.bn"), co),
        }
    }

    fn double(&mut self, name: &str, ci: usize, co: usize) -> DoubleConv {
        DoubleConv {
            a: self.cbr(&format!("{name}.0"), ci, co),
            b: self.cbr(&format!("{name}.1"), co, co),
        }
    }
}

/// What a forward pass records besides its output.
pub struct Forward {
    pub probs: Var,
    /// tape variables of the parameters, in [`Network::params`] order
    pub params: Vec<Var>,
    /// batch statistics per batch-norm layer (train mode only), keyed by the
    /// running-mean buffer index
    pub bn_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// batch statistics, gradients tracked
    Train,
    /// running statistics, no gradients
    Eval,
}

impl Network {
    /// He-initialised network; the same `(config, seed)` gives the same weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Network {
            config: config.clone(),
            params: Vec::new(),
            param_names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
            encoders: Vec::new(),
            decoders: Vec::new(),
            csa: Vec::new(),
            head: Conv {
                weight: 0,
                bias: None,
                spec: ConvSpec::cubic(1, 1, 1, 1, 0),
                transposed: false,
            },
        };
        let mut b = Builder {
            net: &mut net,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let w = |l: usize| config.width(l);
        let mut encoders = Vec::new();
        for l in 1..=DEPTH {
            let ci = if l == 1 { config.in_channels } else { w(l - 1) };
            encoders.push(b.double(&format!("enc{l}"), ci, w(l)));
        }
        let mut csa = Vec::new();
        for l in 1..DEPTH {
            if !config.has_csa(l) {
                csa.push(None);
                continue;
            }
            let c = &config.csa;
            let (k, p) = (c.k_size, c.k_size / 2);
            let mid = w(l) / c.channel_divisor;
            let s = CsaConfig::align_stride(l);
            // the gating signal comes from one level deeper
            let g = w(l + 1);
            let n = format!("csa{l}");
            csa.push(Some(Csa {
                conv_l: b.conv(&format!("{n}.conv_l"), ConvSpec::cubic(w(l), mid, k, 1, p), true, false),
                conv_1: b.conv(&format!("{n}.conv_1"), ConvSpec::cubic(w(1), mid, s, s, 0), true, false),
                squeeze_1: b.conv(&format!("{n}.squeeze_1"), ConvSpec::cubic(mid, 1, k, 1, p), true, false),
                conv_g: b.conv(&format!("{n}.conv_g"), ConvSpec::cubic(g, mid, k, 1, p), true, false),
                conv_lhat: b.conv(&format!("{n}.conv_lhat"), ConvSpec::cubic(w(l), mid, 2, 2, 0), true, false),
                squeeze_2: b.conv(&format!("{n}.squeeze_2"), ConvSpec::cubic(mid, 1, k, 1, p), true, false),
            }));
        }
        let mut decoders = Vec::new();
        for l in 1..DEPTH {
            let up = b.conv(
                &format!("dec{l}.up"),
                ConvSpec::cubic(w(l + 1), w(l), 3, 2, 1).with_output_padding(1),
                true,
                true,
            );
            decoders.push(Decoder {
                up,
                convs: b.double(&format!("dec{l}"), 2 * w(l), w(l)),
            });
        }
        let head = b.conv("head", ConvSpec::cubic(w(1), config.classes, 1, 1, 0), true, false);
        net.encoders = encoders;
        net.csa = csa;
        net.decoders = decoders;
        net.head = head;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    /// Total number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Bind the parameters to `tape` and start a forward pass.
    pub fn session<'a>(&'a self, tape: &'a mut Tape, mode: Mode) -> Session<'a> {
        let train = mode == Mode::Train;
        let vars = self.params.iter().map(|p| tape.leaf(p.clone(), train)).collect();
        Session {
            net: self,
            tape,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    /// A session over caller-supplied parameter variables (one per parameter,
    /// in [`Network::params`] order), e.g. to differentiate with respect to a
    /// single parameter tensor.
    pub fn session_with<'a>(&'a self, tape: &'a mut Tape, mode: Mode, vars: Vec<Var>) -> Result<Session<'a>> {
        if vars.len() != self.params.len() {
            return Err(Error::shape("parameter variables", self.params.len(), vars.len()));
        }
        for (i, (v, p)) in vars.iter().zip(&self.params).enumerate() {
            if tape.value(*v).shape() != p.shape() {
                return Err(Error::InvalidArgument(format!(
                    "variable for {} has shape {:?}, expected {:?}",
                    self.param_names[i],
                    tape.value(*v).shape(),
                    p.shape()
                )));
            }
        }
        Ok(Session {
            net: self,
            tape,
            vars,
            mode,
            stats: Vec::new(),
        })
    }

    /// Full forward pass on `x` (`[N, C_in, D, H, W]`), returning softmax probabilities.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Forward> {
        let mut s = self.session(tape, mode);
        let probs = s.forward(x)?;
        let (params, bn_stats) = s.into_parts();
        Ok(Forward { probs, params, bn_stats })
    }

    /// Eval-mode probabilities for `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let f = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(f.probs).clone())
    }

    /// Exponential moving average of the batch statistics into the running buffers.
    /// The running variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (mean_idx, s) in stats {
            let unbias = if s.count > 1 { s.count as f32 / (s.count - 1) as f32 } else { 1.0 };
            for (r, &b) in self.buffers[*mean_idx].data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in self.buffers[mean_idx + 1].data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * b * unbias;
            }
        }
    }
}

/// A forward pass in progress: the network's parameters bound to a tape.
pub struct Session<'a> {
    net: &'a Network,
    pub tape: &'a mut Tape,
    vars: Vec<Var>,
    mode: Mode,
    stats: Vec<(usize, BatchStats)>,
}

impl<'a> Session<'a> {
    /// Tape variable of parameter `i`.
    pub fn param(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// The bound parameter variables and the batch statistics recorded so far.
    pub fn into_parts(self) -> (Vec<Var>, Vec<(usize, BatchStats)>) {
        (self.vars, self.stats)
    }

    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let w = self.vars[c.weight];
        let b = c.bias.map(|i| self.vars[i]);
        if c.transposed {
            self.tape.conv_transpose3d(x, w, b, c.spec)
        } else {
            self.tape.conv3d(x, w, b, c.spec)
        }
    }

    fn cbr(&mut self, l: &ConvBnRelu, x: Var) -> Result<Var> {
        let y = self.conv(&l.conv, x)?;
        let (g, b) = (self.vars[l.bn.gamma], self.vars[l.bn.beta]);
        let eps = self.net.config.bn_eps;
        let mode = match self.mode {
            Mode::Train => BnMode::Train { eps },
            Mode::Eval => BnMode::Eval {
                mean: &self.net.buffers[l.bn.mean],
                var: &self.net.buffers[l.bn.var],
                eps,
            },
        };
        let (y, stats) = self.tape.batch_norm(y, g, b, mode)?;
        if let Some(s) = stats {
            self.stats.push((l.bn.mean, s));
        }
        Ok(self.tape.relu(y))
    }

    fn double(&mut self, d: &DoubleConv, x: Var) -> Result<Var> {
        let y = self.cbr(&d.a, x)?;
        self.cbr(&d.b, y)
    }

    fn extents(&self, v: Var) -> Result<[usize; 3]> {
        let [_, _, d, h, w] = self.tape.value(v).dims5()?;
        Ok([d, h, w])
    }

    /// Two Conv-BN-ReLU layers at level `level` (1-based), then 2×2×2 max
    /// pooling except at the bottleneck.
    pub fn encoder_block(&mut self, input: Var, level: usize) -> Result<(Var, Option<Var>)> {
        let net = self.net;
        let block = net
            .encoders
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("encoder level {level} outside 1..=4")))?;
        let f = self.double(block, input)?;
        let pooled = if level < DEPTH { Some(self.tape.max_pool3d(f, 2)?) } else { None };
        Ok((f, pooled))
    }

    fn csa_module(&self, level: usize) -> Result<&'a Csa> {
        self.net
            .csa
            .get(level.wrapping_sub(1))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("no CSA gate at level {level}")))
    }

    /// Detail gate: returns `(Att1, F̂l)` with `F̂l = Fl ⊙ Att1`.
    pub fn csa_attention_1(&mut self, f1: Var, fl: Var, level: usize) -> Result<(Var, Var)> {
        let net = self.net;
        let m = self.csa_module(level)?;
        let (e1, el) = (self.extents(f1)?, self.extents(fl)?);
        let s = CsaConfig::align_stride(level);
        if e1 != el.map(|e| e * s) {
            return Err(Error::Geometry(format!(
                "level-1 features {e1:?} are not {s}× the level-{level} features {el:?}"
            )));
        }
        let cfg = &net.config.csa;
        let a = self.conv(&m.conv_l, fl)?;
        let b = self.conv(&m.conv_1, f1)?;
        let sum = self.tape.add(a, b)?;
        let act = cfg.sigma1.apply(self.tape, sum);
        let sq = self.conv(&m.squeeze_1, act)?;
        let att1 = cfg.sigma2.apply(self.tape, sq);
        let fl_hat = self.tape.gate(fl, att1)?;
        Ok((att1, fl_hat))
    }

    /// Semantic gate: returns `(Att2, F_output)` where `Att2` lives at the
    /// resolution of `fg` and `F_output = F̂l ⊙ upsample(Att2)`.
    pub fn csa_attention_2(&mut self, fl_hat: Var, fg: Var, level: usize) -> Result<(Var, Var)> {
        let net = self.net;
        let m = self.csa_module(level)?;
        let (el, eg) = (self.extents(fl_hat)?, self.extents(fg)?);
        if el != eg.map(|e| e * 2) {
            return Err(Error::Geometry(format!(
                "gating features {eg:?} are not half of the level-{level} features {el:?}"
            )));
        }
        let cfg = &net.config.csa;
        let a = self.conv(&m.conv_g, fg)?;
        let b = self.conv(&m.conv_lhat, fl_hat)?;
        let sum = self.tape.add(a, b)?;
        let act = cfg.sigma1.apply(self.tape, sum);
        let sq = self.conv(&m.squeeze_2, act)?;
        let att2 = cfg.sigma2.apply(self.tape, sq);
        let up = self.tape.upsample_trilinear(att2, 2)?;
        let out = self.tape.gate(fl_hat, up)?;
        Ok((att2, out))
    }

    /// Transposed-conv upsampling of `input`, concatenation with `skip`, two Conv-BN-ReLU.
    pub fn decoder_block(&mut self, input: Var, skip: Var, level: usize) -> Result<Var> {
        let net = self.net;
        let d = net
            .decoders
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("decoder level {level} outside 1..=3")))?;
        let up = self.conv(&d.up, input)?;
        let (eu, es) = (self.extents(up)?, self.extents(skip)?);
        if eu != es {
            return Err(Error::Geometry(format!(
                "upsampled extents {eu:?} differ from skip extents {es:?}; input extents must be even"
            )));
        }
        let cat = self.tape.concat_channels(skip, up)?;
        self.double(&d.convs, cat)
    }

    /// Skip features for level `l`: CSA output where configured, the encoder features otherwise.
    fn skip(&mut self, f1: Var, fl: Var, fg: Var, level: usize) -> Result<Var> {
        if !self.net.config.has_csa(level) {
            return Ok(fl);
        }
        let (_, fl_hat) = self.csa_attention_1(f1, fl, level)?;
        Ok(self.csa_attention_2(fl_hat, fg, level)?.1)
    }

    /// Softmax probabilities `[N, classes, D, H, W]`.
    pub fn forward(&mut self, x: Var) -> Result<Var> {
        let e = self.extents(x)?;
        for (i, &n) in e.iter().enumerate() {
            if n % 8 != 0 {
                return Err(Error::NotDivisible { axis: i + 2, extent: n, divisor: 8 });
            }
        }
        let (f1, p1) = self.encoder_block(x, 1)?;
        let (f2, p2) = self.encoder_block(p1.unwrap(), 2)?;
        let (f3, p3) = self.encoder_block(p2.unwrap(), 3)?;
        let (f4, _) = self.encoder_block(p3.unwrap(), 4)?;
        let s3 = self.skip(f1, f3, f4, 3)?;
        let d3 = self.decoder_block(f4, s3, 3)?;
        let s2 = self.skip(f1, f2, d3, 2)?;
        let d2 = self.decoder_block(d3, s2, 2)?;
        let d1 = self.decoder_block(d2, f1, 1)?;
        let head = self.net.head.clone();
        let logits = self.conv(&head, d1)?;
        self.tape.softmax_channel(logits)
    }
}
