//! Per-channel conditional VAE stacks (encoder, prior, decoder) and the
//! spatial density estimation network, plus reparameterized latent sampling.
//!
//! Each color channel owns an independent set of all four networks; nothing
//! is shared across channels. Every layer is a stride-1 same-padding 3x3
//! convolution, so spatial shape is preserved end to end. Encoder and prior
//! emit a 2-channel head split into (mu, raw) with sigma = exp(raw / 2),
//! which keeps sigma strictly positive by construction. Their heads start
//! zero-initialized, so an untrained model encodes a unit Gaussian latent.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Act, Bn, Graph, Id, Mode, ParamStore};
use crate::rng::{self, stream_rng};

/// Color channel selector for the per-channel networks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Channel::R => "r",
            Channel::G => "g",
            Channel::B => "b",
        }
    }
}

/// Architecture hyperparameters shared by all channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Total layer count of encoder/prior/decoder, head included.
    pub depth: usize,
    /// Channels per hidden layer.
    pub filters: usize,
    /// Spatial kernel size; only 3 is supported.
    pub kernel: usize,
    /// Layer count of the densely connected density block.
    pub sde_layers: usize,
    /// Negative slope of the leaky rectifier.
    pub leak: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { depth: 7, filters: 16, kernel: 3, sde_layers: 5, leak: 0.2 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel != 3 {
            return Err(Error::Config(format!(
                "kernel size {} unsupported; stride-1 convolutions are specialized to kernel 3",
                self.kernel
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "depth {} too small; need at least one hidden layer plus the head",
                self.depth
            )));
        }
        if self.sde_layers < 2 {
            return Err(Error::Config(format!(
                "sde_layers {} too small; the dense block needs at least two layers",
                self.sde_layers
            )));
        }
        if self.filters == 0 {
            return Err(Error::Config("filters must be positive".into()));
        }
        if !self.leak.is_finite() || self.leak < 0.0 || self.leak >= 1.0 {
            return Err(Error::Config(format!("leak {} outside [0, 1)", self.leak)));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over a single-channel spatial latent.
#[derive(Clone, Debug)]
pub struct GaussianLatent {
    pub mu: ImageTensor,
    pub sigma: ImageTensor,
}

impl GaussianLatent {
    pub fn new(mu: ImageTensor, sigma: ImageTensor) -> Result<Self> {
        if !mu.same_shape(&sigma) || mu.channels() != 1 {
            return Err(Error::Arity(format!(
                "latent mu {}x{}x{} and sigma {}x{}x{} must be equal single-channel shapes",
                mu.height(),
                mu.width(),
                mu.channels(),
                sigma.height(),
                sigma.width(),
                sigma.channels()
            )));
        }
        if let Some(v) = sigma.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("latent sigma must be strictly positive, found {v}")));
        }
        Ok(GaussianLatent { mu, sigma })
    }
}

/// Training bookkeeping carried inside a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
}

/// Complete model state: architecture, all per-channel parameters, and
/// training metadata. Immutable once constructed; training builds new ones.
#[derive(Clone)]
pub struct ModelCheckpoint {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub meta: TrainMeta,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum NetKind {
    Sde,
    Enc,
    Prior,
    Dec,
}

impl NetKind {
    pub(crate) const ALL: [NetKind; 4] = [NetKind::Sde, NetKind::Enc, NetKind::Prior, NetKind::Dec];

    pub(crate) fn key(self) -> &'static str {
        match self {
            NetKind::Sde => "sde",
            NetKind::Enc => "enc",
            NetKind::Prior => "prior",
            NetKind::Dec => "dec",
        }
    }
}

/// (input channels, output channels, batch-normalized) per layer, index 1-based.
pub(crate) fn layer_dims(config: &NetworkConfig, net: NetKind) -> Vec<(usize, usize, bool)> {
    let f = config.filters;
    match net {
        NetKind::Sde => {
            let n = config.sde_layers;
            (1..=n)
                .map(|k| (1 + f * (k - 1), if k == n { 1 } else { f }, k < n))
                .collect()
        }
        NetKind::Enc | NetKind::Prior | NetKind::Dec => {
            let d = config.depth;
            let first = match net {
                NetKind::Enc | NetKind::Dec => 3,
                NetKind::Prior => 2,
                NetKind::Sde => unreachable!(),
            };
            let last = match net {
                NetKind::Enc | NetKind::Prior => 2,
                NetKind::Dec => 1,
                NetKind::Sde => unreachable!(),
            };
            (1..=d)
                .map(|k| {
                    (
                        if k == 1 { first } else { f },
                        if k == d { last } else { f },
                        k < d,
                    )
                })
                .collect()
        }
    }
}

pub(crate) fn conv_name(ch: Channel, net: NetKind, layer: usize, role: &str) -> String {
    format!("{}.{}.conv{}.{}", ch.key(), net.key(), layer, role)
}

pub(crate) fn bn_name(ch: Channel, net: NetKind, layer: usize, role: &str) -> String {
    format!("{}.{}.bn{}.{}", ch.key(), net.key(), layer, role)
}

/// Fan-in-scaled normal initialization of every per-channel network.
/// Encoder and prior heads start at zero so the initial latent is N(0, I);
/// batch-norm starts as the identity transform with unit running variance.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = stream_rng(seed, rng::streams::INIT);
    let mut store = ParamStore::new();
    for ch in Channel::ALL {
        for net in NetKind::ALL {
            let dims = layer_dims(config, net);
            let total = dims.len();
            for (i, &(cin, cout, bn)) in dims.iter().enumerate() {
                let k = i + 1;
                let zero_head = k == total && matches!(net, NetKind::Enc | NetKind::Prior);
                let w: Vec<f64> = if zero_head {
                    vec![0.0; cout * cin * 9]
                } else {
                    let std = (2.0 / (cin * 9) as f64).sqrt();
                    (0..cout * cin * 9)
                        .map(|_| {
                            let n: f64 = rng.sample(StandardNormal);
                            n * std
                        })
                        .collect()
                };
                store.add(&conv_name(ch, net, k, "w"), vec![cout, cin, 3, 3], w, true);
                store.add(&conv_name(ch, net, k, "b"), vec![cout], vec![0.0; cout], true);
                if bn {
                    store.add(&bn_name(ch, net, k, "gamma"), vec![cout], vec![1.0; cout], true);
                    store.add(&bn_name(ch, net, k, "beta"), vec![cout], vec![0.0; cout], true);
                    store.add(&bn_name(ch, net, k, "rmean"), vec![cout], vec![0.0; cout], false);
                    store.add(&bn_name(ch, net, k, "rvar"), vec![cout], vec![1.0; cout], false);
                }
            }
        }
    }
    Ok(store)
}

impl ModelCheckpoint {
    /// Fresh model with fan-in-initialized parameters.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        Ok(ModelCheckpoint {
            config,
            store: init_params(&config, seed)?,
            meta: TrainMeta { epoch: 0, step: 0, seed },
        })
    }
}

fn conv_block(
    g: &mut Graph,
    store: &ParamStore,
    ch: Channel,
    net: NetKind,
    layer: usize,
    xs: &[Id],
    bn: bool,
    act: Act,
) -> Id {
    let w = g.param(store, &conv_name(ch, net, layer, "w"));
    let b = g.param(store, &conv_name(ch, net, layer, "b"));
    let bn = bn.then(|| Bn {
        gamma: g.param(store, &bn_name(ch, net, layer, "gamma")),
        beta: g.param(store, &bn_name(ch, net, layer, "beta")),
        rmean: store.idx(&bn_name(ch, net, layer, "rmean")),
        rvar: store.idx(&bn_name(ch, net, layer, "rvar")),
    });
    g.conv(xs, w, b, bn, act)
}

/// Densely connected block: layer k sees the input plus every earlier
/// layer's output, hidden layers rectified, final layer a 1-channel sigmoid.
pub(crate) fn build_sde_net(
    g: &mut Graph,
    store: &ParamStore,
    config: &NetworkConfig,
    ch: Channel,
    x: Id,
) -> Id {
    let n = config.sde_layers;
    let mut feats = vec![x];
    for k in 1..n {
        let h = conv_block(g, store, ch, NetKind::Sde, k, &feats.clone(), true, Act::Relu);
        feats.push(h);
    }
    conv_block(g, store, ch, NetKind::Sde, n, &feats, false, Act::Sigmoid)
}

/// Plain stack ending in a linear 2-channel head split into (mu, raw).
pub(crate) fn build_gauss_net(
    g: &mut Graph,
    store: &ParamStore,
    config: &NetworkConfig,
    ch: Channel,
    net: NetKind,
    inputs: &[Id],
) -> (Id, Id) {
    debug_assert!(matches!(net, NetKind::Enc | NetKind::Prior));
    let d = config.depth;
    let mut h = conv_block(g, store, ch, net, 1, inputs, true, Act::LeakyRelu(config.leak));
    for k in 2..d {
        h = conv_block(g, store, ch, net, k, &[h], true, Act::LeakyRelu(config.leak));
    }
    let head = conv_block(g, store, ch, net, d, &[h], false, Act::None);
    (g.slice_c(head, 0, 1), g.slice_c(head, 1, 2))
}

/// Decoder stack: hidden layers as in the Gaussian nets, 1-channel sigmoid head.
pub(crate) fn build_dec_net(
    g: &mut Graph,
    store: &ParamStore,
    config: &NetworkConfig,
    ch: Channel,
    inputs: &[Id],
) -> Id {
    let d = config.depth;
    let mut h = conv_block(g, store, ch, NetKind::Dec, 1, inputs, true, Act::LeakyRelu(config.leak));
    for k in 2..d {
        h = conv_block(g, store, ch, NetKind::Dec, k, &[h], true, Act::LeakyRelu(config.leak));
    }
    conv_block(g, store, ch, NetKind::Dec, d, &[h], false, Act::Sigmoid)
}

pub(crate) fn require_plane(name: &str, t: &ImageTensor) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::Arity(format!(
            "{name} must be a single-channel plane, got {} channels",
            t.channels()
        )));
    }
    Ok(())
}

pub(crate) fn require_same_planes(planes: &[(&str, &ImageTensor)]) -> Result<()> {
    for &(name, t) in planes {
        require_plane(name, t)?;
    }
    let (n0, t0) = planes[0];
    for &(name, t) in &planes[1..] {
        if !t.same_shape(t0) {
            return Err(Error::Arity(format!(
                "{name} is {}x{} but {n0} is {}x{}",
                t.height(),
                t.width(),
                t0.height(),
                t0.width()
            )));
        }
    }
    Ok(())
}

pub(crate) fn plane_input(g: &mut Graph, t: &ImageTensor) -> Id {
    let id = g.input([1, 1, t.height(), t.width()]);
    g.set_input(id, t.data());
    id
}

pub(crate) fn plane_of(data: &[f64], h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, 1, data.to_vec()).expect("plane shape invariant")
}

fn latent_from(g: &Graph, mu: Id, raw: Id, h: usize, w: usize) -> Result<GaussianLatent> {
    // exp underflows to 0 for raw < -1490; floor at the smallest positive
    // normal so the sigma > 0 invariant survives arbitrary parameters
    let sigma: Vec<f64> = g
        .data(raw)
        .iter()
        .map(|r| (r * 0.5).exp().max(f64::MIN_POSITIVE))
        .collect();
    GaussianLatent::new(plane_of(g.data(mu), h, w), plane_of(&sigma, h, w))
}

/// Posterior q(z | x, y, density) for one channel.
pub fn encoder_forward(
    ckpt: &ModelCheckpoint,
    channel: Channel,
    x_c: &ImageTensor,
    y_c: &ImageTensor,
    d_c: &ImageTensor,
) -> Result<GaussianLatent> {
    require_same_planes(&[("x_c", x_c), ("y_c", y_c), ("d_c", d_c)])?;
    let mut g = Graph::new(Mode::Eval);
    let (x, y, d) = (plane_input(&mut g, x_c), plane_input(&mut g, y_c), plane_input(&mut g, d_c));
    let (mu, raw) = build_gauss_net(&mut g, &ckpt.store, &ckpt.config, channel, NetKind::Enc, &[x, y, d]);
    g.forward(&ckpt.store);
    latent_from(&g, mu, raw, x_c.height(), x_c.width())
}

/// Conditional prior p(z | x, density) for one channel.
pub fn prior_forward(
    ckpt: &ModelCheckpoint,
    channel: Channel,
    x_c: &ImageTensor,
    d_c: &ImageTensor,
) -> Result<GaussianLatent> {
    require_same_planes(&[("x_c", x_c), ("d_c", d_c)])?;
    let mut g = Graph::new(Mode::Eval);
    let (x, d) = (plane_input(&mut g, x_c), plane_input(&mut g, d_c));
    let (mu, raw) = build_gauss_net(&mut g, &ckpt.store, &ckpt.config, channel, NetKind::Prior, &[x, d]);
    g.forward(&ckpt.store);
    latent_from(&g, mu, raw, x_c.height(), x_c.width())
}

/// Draws z = mu + eps * sigma with eps i.i.d. standard normal per pixel in
/// row-major order from the stream keyed by `noise_seed`.
pub fn reparameterize(latent: &GaussianLatent, noise_seed: u64) -> ImageTensor {
    let mut rng = stream_rng(noise_seed, rng::streams::REPARAM);
    let mut z = latent.mu.clone();
    let sigma = latent.sigma.data();
    for (j, v) in z.data_mut().iter_mut().enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        *v += eps * sigma[j];
    }
    z
}

/// Reconstruction p(y | x, z, density) for one channel; output in [0, 1].
pub fn decoder_forward(
    ckpt: &ModelCheckpoint,
    channel: Channel,
    x_c: &ImageTensor,
    z: &ImageTensor,
    d_c: &ImageTensor,
) -> Result<ImageTensor> {
    require_same_planes(&[("x_c", x_c), ("z", z), ("d_c", d_c)])?;
    let mut g = Graph::new(Mode::Eval);
    let (x, zi, d) = (plane_input(&mut g, x_c), plane_input(&mut g, z), plane_input(&mut g, d_c));
    let y = build_dec_net(&mut g, &ckpt.store, &ckpt.config, channel, &[x, zi, d]);
    g.forward(&ckpt.store);
    Ok(plane_of(g.data(y), x_c.height(), x_c.width()))
}

/// Rain density estimate for one channel; output in [0, 1].
pub fn sde_forward(ckpt: &ModelCheckpoint, channel: Channel, x_c: &ImageTensor) -> Result<ImageTensor> {
    require_plane("x_c", x_c)?;
    let mut g = Graph::new(Mode::Eval);
    let x = plane_input(&mut g, x_c);
    let d = build_sde_net(&mut g, &ckpt.store, &ckpt.config, channel, x);
    g.forward(&ckpt.store);
    Ok(plane_of(g.data(d), x_c.height(), x_c.width()))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ForwardMode {
    /// Latents drawn from the posterior; requires the clean image.
    Train,
    /// Latents drawn from the conditional prior; clean image must be absent.
    Infer,
}

/// One full channel-wise pass over a 3-channel image.
pub struct ChannelwiseOutput {
    pub yhat: ImageTensor,
    pub latents: [GaussianLatent; 3],
    pub density: [ImageTensor; 3],
}

/// Runs density estimation, the mode-appropriate Gaussian head, one
/// reparameterized draw (noise stream keyed by channel and `noise_seed`),
/// and the decoder for each channel, merging the three reconstructions.
pub fn derain_channelwise_forward(
    ckpt: &ModelCheckpoint,
    x: &ImageTensor,
    y: Option<&ImageTensor>,
    mode: ForwardMode,
    noise_seed: u64,
) -> Result<ChannelwiseOutput> {
    if x.channels() != 3 {
        return Err(Error::Arity(format!("rainy input must have 3 channels, got {}", x.channels())));
    }
    match (mode, y) {
        (ForwardMode::Train, None) => {
            return Err(Error::Contract("train-mode forward requires the clean image".into()))
        }
        (ForwardMode::Infer, Some(_)) => {
            return Err(Error::Contract("infer-mode forward must not receive a clean image".into()))
        }
        _ => {}
    }
    if let Some(y) = y {
        if !y.same_shape(x) {
            return Err(Error::Arity(format!(
                "clean image {}x{}x{} does not match rainy {}x{}x{}",
                y.height(),
                y.width(),
                y.channels(),
                x.height(),
                x.width(),
                x.channels()
            )));
        }
    }
    let (h, w) = (x.height(), x.width());
    let x_planes = x.split_channels()?;
    let y_planes = y.map(|y| y.split_channels()).transpose()?;

    let mut outs: Vec<ImageTensor> = Vec::with_capacity(3);
    let mut latents: Vec<GaussianLatent> = Vec::with_capacity(3);
    let mut density: Vec<ImageTensor> = Vec::with_capacity(3);
    for ch in Channel::ALL {
        let c = ch.index();
        let mut g = Graph::new(Mode::Eval);
        let xi = plane_input(&mut g, &x_planes[c]);
        let d = build_sde_net(&mut g, &ckpt.store, &ckpt.config, ch, xi);
        let (mu, raw) = match mode {
            ForwardMode::Train => {
                let yi = plane_input(&mut g, &y_planes.as_ref().unwrap()[c]);
                build_gauss_net(&mut g, &ckpt.store, &ckpt.config, ch, NetKind::Enc, &[xi, yi, d])
            }
            ForwardMode::Infer => {
                build_gauss_net(&mut g, &ckpt.store, &ckpt.config, ch, NetKind::Prior, &[xi, d])
            }
        };
        let eps = g.input([1, 1, h, w]);
        let z = g.reparam(mu, raw, eps);
        let yhat = build_dec_net(&mut g, &ckpt.store, &ckpt.config, ch, &[xi, z, d]);

        let mut noise = stream_rng(noise_seed, rng::streams::inference_sample(c, 0));
        let eps_draw: Vec<f64> = (0..h * w).map(|_| noise.sample::<f64, _>(StandardNormal)).collect();
        g.set_input(eps, &eps_draw);
        g.forward(&ckpt.store);

        latents.push(latent_from(&g, mu, raw, h, w)?);
        density.push(plane_of(g.data(d), h, w));
        outs.push(plane_of(g.data(yhat), h, w));
    }
    let yhat = ImageTensor::merge_channels(&[outs[0].clone(), outs[1].clone(), outs[2].clone()])?;
    let [l0, l1, l2] = [latents.remove(0), latents.remove(0), latents.remove(0)];
    let [d0, d1, d2] = [density.remove(0), density.remove(0), density.remove(0)];
    Ok(ChannelwiseOutput { yhat, latents: [l0, l1, l2], density: [d0, d1, d2] })
}
