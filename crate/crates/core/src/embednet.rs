//! Dilated-convolution embedding network.
//!
//! Maps a log-magnitude spectrogram `F×T` to unit-norm `K`-dimensional
//! embeddings per time-frequency bin. Every layer is a 2-D convolution over
//! (frequency, time); hidden layers apply batch normalization and a ReLU, and
//! residual layers add their input back. Because each layer only looks a
//! bounded number of frames ahead, the same network can run incrementally
//! over a stream with a fixed output lag ([`StreamingEmbedder`]).

use std::collections::VecDeque;
use std::fmt::Write as _;

use dasep_autodiff::{BatchStats, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::FeatureMatrix;
use crate::error::{Error, Result};
use crate::kv;

/// Floor on the embedding norm before normalization.
pub const NORM_EPS: f64 = 1e-12;

/// One convolution layer. Pairs are `(frequency, time)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
    /// Kernel tap aligned with the output bin; the centre tap for
    /// symmetric layers.
    pub anchor: (usize, usize),
    pub channels: usize,
    pub residual: bool,
    pub batch_norm: bool,
}

impl LayerSpec {
    /// Symmetric 3×3 layer with the given dilation on both axes.
    pub fn symmetric(dilation: usize, channels: usize, residual: bool, batch_norm: bool) -> Self {
        LayerSpec {
            kernel: (3, 3),
            dilation: (dilation, dilation),
            anchor: (1, 1),
            channels,
            residual,
            batch_norm,
        }
    }

    fn is_centered(&self) -> bool {
        self.kernel.0 % 2 == 1
            && self.kernel.1 % 2 == 1
            && self.anchor == ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }

    /// Frames after the output frame that this layer reads.
    fn lookahead(&self) -> usize {
        self.dilation.1 * (self.kernel.1 - 1 - self.anchor.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_bins: usize,
    pub input_channels: usize,
    pub embedding_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    /// Two stacks of dilations 1..32 at 128 channels, then a linear
    /// projection to 20 dimensions.
    fn default() -> Self {
        NetworkConfig::dilated(129, 128, &[1, 2, 4, 8, 16, 32, 1, 2, 4, 8, 16, 32], 20)
    }
}

impl NetworkConfig {
    /// Hidden layers with the given dilations (residual on every second
    /// layer), followed by an undilated linear layer producing `k` channels.
    pub fn dilated(input_bins: usize, hidden: usize, dilations: &[usize], k: usize) -> Self {
        let mut layers: Vec<LayerSpec> = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| LayerSpec::symmetric(d, hidden, i % 2 == 1, true))
            .collect();
        layers.push(LayerSpec::symmetric(1, k, false, false));
        NetworkConfig {
            input_bins,
            input_channels: 1,
            embedding_dim: k,
            layers,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
        }
    }

    /// Three single-channel layers of time-width 2 and dilations 1, 2, 4:
    /// the first two look back, the last looks ahead by 4 frames.
    pub fn fixed_lag_toy() -> Self {
        let layer = |d: usize, anchor: usize| LayerSpec {
            kernel: (1, 2),
            dilation: (1, d),
            anchor: (0, anchor),
            channels: 1,
            residual: false,
            batch_norm: false,
        };
        NetworkConfig {
            input_bins: 1,
            input_channels: 1,
            embedding_dim: 1,
            layers: vec![layer(1, 1), layer(2, 1), layer(4, 0)],
            bn_eps: 1e-5,
            bn_momentum: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if self.input_bins == 0 || self.input_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        let mut cin = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            if l.kernel.0 == 0 || l.kernel.1 == 0 || l.dilation.0 == 0 || l.dilation.1 == 0 {
                return Err(Error::Config(format!("layer {n}: zero kernel or dilation")));
            }
            if l.anchor.0 >= l.kernel.0 || l.anchor.1 >= l.kernel.1 {
                return Err(Error::Config(format!("layer {n}: anchor outside kernel")));
            }
            if l.channels == 0 {
                return Err(Error::Config(format!("layer {n}: zero channels")));
            }
            if l.residual && l.channels != cin {
                return Err(Error::Config(format!(
                    "layer {n}: residual needs matching channels, got {cin} -> {}",
                    l.channels
                )));
            }
            cin = l.channels;
        }
        if cin != self.embedding_dim {
            return Err(Error::Config(format!(
                "last layer has {cin} channels, embedding_dim is {}",
                self.embedding_dim
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// Instantiable networks need centred odd kernels (zero "same" padding).
    fn validate_buildable(&self) -> Result<()> {
        self.validate()?;
        if let Some(i) = self.layers.iter().position(|l| !l.is_centered()) {
            return Err(Error::Config(format!(
                "layer {}: only centred odd kernels can be instantiated",
                i + 1
            )));
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_bins = {}", self.input_bins);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(s, "bn_eps = {:e}", self.bn_eps);
        let _ = writeln!(s, "bn_momentum = {}", self.bn_momentum);
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "layer.{} = kernel={}x{} dilation={}x{} anchor={}x{} channels={} residual={} batch_norm={}",
                i + 1,
                l.kernel.0,
                l.kernel.1,
                l.dilation.0,
                l.dilation.1,
                l.anchor.0,
                l.anchor.1,
                l.channels,
                l.residual,
                l.batch_norm
            );
        }
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig {
            layers: Vec::new(),
            ..NetworkConfig::default()
        };
        let mut layers: Vec<(usize, LayerSpec)> = Vec::new();
        for (key, v) in kv::parse(text)? {
            match key.as_str() {
                "input_bins" => cfg.input_bins = kv::value(&key, &v)?,
                "input_channels" => cfg.input_channels = kv::value(&key, &v)?,
                "embedding_dim" => cfg.embedding_dim = kv::value(&key, &v)?,
                "bn_eps" => cfg.bn_eps = kv::value(&key, &v)?,
                "bn_momentum" => cfg.bn_momentum = kv::value(&key, &v)?,
                k if k.starts_with("layer.") => {
                    let idx: usize = kv::value(&key, &k["layer.".len()..])?;
                    layers.push((idx, parse_layer(&key, &v)?));
                }
                _ => return Err(Error::Config(format!("unknown network key {key:?}"))),
            }
        }
        layers.sort_by_key(|(i, _)| *i);
        if layers.iter().enumerate().any(|(n, (i, _))| *i != n + 1) {
            return Err(Error::Config("layer indices must be 1..=n without gaps".into()));
        }
        cfg.layers = layers.into_iter().map(|(_, l)| l).collect();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_layer(key: &str, v: &str) -> Result<LayerSpec> {
    let mut l = LayerSpec::symmetric(1, 0, false, false);
    for field in v.split_whitespace() {
        let (name, val) = field
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{key}: expected name=value, got {field:?}")))?;
        match name {
            "kernel" => l.kernel = kv::pair(key, val)?,
            "dilation" => l.dilation = kv::pair(key, val)?,
            "anchor" => l.anchor = kv::pair(key, val)?,
            "channels" => l.channels = kv::value(key, val)?,
            "residual" => l.residual = kv::value(key, val)?,
            "batch_norm" => l.batch_norm = kv::value(key, val)?,
            _ => return Err(Error::Config(format!("{key}: unknown field {name:?}"))),
        }
    }
    Ok(l)
}

/// Extent of input influencing one output bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub rf_time: usize,
    /// Future frames required before an output frame can be emitted.
    pub lag: usize,
    /// Past frames influencing an output frame.
    pub history: usize,
    pub rf_freq: usize,
}

pub fn receptive_field(config: &NetworkConfig) -> ReceptiveField {
    let mut lag = 0;
    let mut history = 0;
    let mut rf_freq = 1;
    for l in &config.layers {
        lag += l.lookahead();
        history += l.dilation.1 * l.anchor.1;
        rf_freq += l.dilation.0 * (l.kernel.0 - 1);
    }
    ReceptiveField {
        rf_time: 1 + lag + history,
        lag,
        history,
        rf_freq,
    }
}

/// Unit-norm embeddings, laid out `[f][t][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTensor {
    pub values: Vec<f64>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub dim: usize,
}

impl EmbeddingTensor {
    pub fn get(&self, f: usize, t: usize) -> &[f64] {
        let i = (f * self.n_frames + t) * self.dim;
        &self.values[i..i + self.dim]
    }

    /// Frames `[start, start + len)`.
    pub fn frames(&self, start: usize, len: usize) -> Result<EmbeddingTensor> {
        if start + len > self.n_frames {
            return Err(Error::Range(format!(
                "frames [{start}, {}) exceed {}",
                start + len,
                self.n_frames
            )));
        }
        let mut values = Vec::with_capacity(self.n_bins * len * self.dim);
        for f in 0..self.n_bins {
            let i = (f * self.n_frames + start) * self.dim;
            values.extend_from_slice(&self.values[i..i + len * self.dim]);
        }
        Ok(EmbeddingTensor {
            values,
            n_bins: self.n_bins,
            n_frames: len,
            dim: self.dim,
        })
    }

    /// Converts a `[K, F, T]` channel-major block.
    pub fn from_channel_major(data: &[f64], dim: usize, n_bins: usize, n_frames: usize) -> Self {
        let plane = n_bins * n_frames;
        let mut values = vec![0.0; plane * dim];
        for k in 0..dim {
            for (i, v) in data[k * plane..(k + 1) * plane].iter().enumerate() {
                values[i * dim + k] = *v;
            }
        }
        EmbeddingTensor {
            values,
            n_bins,
            n_frames,
            dim,
        }
    }
}

/// Batch-norm running statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch normalization.
    Train,
    /// Running statistics in batch normalization.
    Eval,
}

#[derive(Clone, Debug)]
struct LayerParams {
    weight: ParamId,
    bias: ParamId,
    bn: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: ParamStore,
    layers: Vec<LayerParams>,
    running: Vec<Option<RunningStats>>,
}

impl Network {
    /// He-normal convolution weights (unit-gain on the linear last layer),
    /// zero biases, identity batch norm.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate_buildable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut running = Vec::with_capacity(config.layers.len());
        let mut cin = config.input_channels;
        for (i, l) in config.layers.iter().enumerate() {
            let n = i + 1;
            let fan_in = (cin * l.kernel.0 * l.kernel.1) as f64;
            let gain = if l.batch_norm { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let shape = [l.channels, cin, l.kernel.0, l.kernel.1];
            let weight = params.add(
                format!("layer{n}.weight"),
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng)),
            );
            let bias = params.add(format!("layer{n}.bias"), Tensor::zeros(&[l.channels]));
            let bn = if l.batch_norm {
                let g = params.add(format!("layer{n}.bn.gamma"), Tensor::full(&[l.channels], 1.0));
                let b = params.add(format!("layer{n}.bn.beta"), Tensor::zeros(&[l.channels]));
                running.push(Some(RunningStats {
                    mean: vec![0.0; l.channels],
                    var: vec![1.0; l.channels],
                }));
                Some((g, b))
            } else {
                running.push(None);
                None
            };
            layers.push(LayerParams { weight, bias, bn });
            cin = l.channels;
        }
        Ok(Network {
            config: config.clone(),
            params,
            layers,
            running,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalar parameters of layer `n` (1-based).
    pub fn layer_parameters(&self, n: usize) -> usize {
        let lp = &self.layers[n - 1];
        let mut ids = vec![lp.weight, lp.bias];
        if let Some((g, b)) = lp.bn {
            ids.extend([g, b]);
        }
        ids.iter().map(|&id| self.params.get(id).value.len()).sum()
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [Option<RunningStats>] {
        &mut self.running
    }

    /// Records the network on `tape`. `bound` is `self.params().bind(tape)`
    /// (or constants in the same order); `x` is `[B, Cin, F, T]`.
    /// Returns `[B, K, F, T]` embeddings, unit-norm along axis 1, and the
    /// batch statistics of every normalized layer in training mode.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != self.config.input_bins {
            return Err(Error::Shape(format!(
                "expected [B, {}, {}, T] input, got {shape:?}",
                self.config.input_channels, self.config.input_bins
            )));
        }
        let mut stats = Vec::new();
        let mut h = x;
        for (i, spec) in self.config.layers.iter().enumerate() {
            let out = self.layer_on_tape(tape, bound, i, spec, h, mode, &mut stats)?;
            h = out;
        }
        let v = tape.l2_normalize(h, 1, NORM_EPS)?;
        Ok((v, stats))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        i: usize,
        spec: &LayerSpec,
        h: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let lp = &self.layers[i];
        let mut y = tape.conv2d(h, bound[lp.weight.index()], bound[lp.bias.index()], spec.dilation)?;
        if let Some((g, b)) = lp.bn {
            let (gv, bv) = (bound[g.index()], bound[b.index()]);
            y = match mode {
                Mode::Train => {
                    let (out, s) = tape.batch_norm_train(y, gv, bv, self.config.bn_eps)?;
                    stats.push(s);
                    out
                }
                Mode::Eval => {
                    let rs = self.running[i].as_ref().expect("running stats for normalized layer");
                    tape.batch_norm_eval(y, gv, bv, &rs.mean, &rs.var, self.config.bn_eps)?
                }
            };
            y = tape.relu(y);
        }
        if spec.residual {
            y = tape.residual_add(y, h)?;
        }
        Ok(y)
    }

    /// Folds one training step's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let momentum = self.config.bn_momentum;
        let mut it = stats.iter();
        for rs in self.running.iter_mut().flatten() {
            let s = it
                .next()
                .ok_or_else(|| Error::Shape("too few batch statistics".into()))?;
            s.update_running(&mut rs.mean, &mut rs.var, momentum);
        }
        if it.next().is_some() {
            return Err(Error::Shape("too many batch statistics".into()));
        }
        Ok(())
    }

    /// Inference over a whole spectrogram. Intermediate activations are
    /// released layer by layer.
    pub fn forward(&self, x: &FeatureMatrix) -> Result<EmbeddingTensor> {
        self.check_input(x.n_bins, x.n_frames)?;
        if self.config.input_channels != 1 {
            return Err(Error::Shape("feature input needs a single input channel".into()));
        }
        let (nf, nt) = (x.n_bins, x.n_frames);
        let mut h = Tensor::new(&[1, 1, nf, nt], x.values.clone())?;
        let mut unused = Vec::new();
        for (i, spec) in self.config.layers.iter().enumerate() {
            let mut tape = Tape::new();
            let bound: Vec<Var> = self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect();
            let input = tape.constant(h);
            let out = self.layer_on_tape(&mut tape, &bound, i, spec, input, Mode::Eval, &mut unused)?;
            h = tape.into_value(out);
        }
        let mut tape = Tape::new();
        let input = tape.constant(h);
        let v = tape.l2_normalize(input, 1, NORM_EPS)?;
        let v = tape.into_value(v);
        Ok(EmbeddingTensor::from_channel_major(
            v.data(),
            self.config.embedding_dim,
            nf,
            nt,
        ))
    }

    fn check_input(&self, n_bins: usize, n_frames: usize) -> Result<()> {
        if n_bins != self.config.input_bins {
            return Err(Error::Shape(format!(
                "network expects {} frequency bins, got {n_bins}",
                self.config.input_bins
            )));
        }
        if n_frames == 0 {
            return Err(Error::Shape("input has no frames".into()));
        }
        Ok(())
    }

    pub fn streaming(&self) -> StreamingEmbedder<'_> {
        StreamingEmbedder::new(self)
    }

    /// Parameters, optimizer moments and running statistics.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut buffers = Vec::new();
        for (i, rs) in self.running.iter().enumerate() {
            if let Some(rs) = rs {
                let c = rs.mean.len();
                buffers.push((
                    format!("layer{}.bn.running_mean", i + 1),
                    Tensor::new(&[c], rs.mean.clone()).expect("shape matches"),
                ));
                buffers.push((
                    format!("layer{}.bn.running_var", i + 1),
                    Tensor::new(&[c], rs.var.clone()).expect("shape matches"),
                ));
            }
        }
        Checkpoint {
            step,
            params: self.params.clone(),
            buffers,
        }
    }

    /// Rebuilds a network of the given architecture from checkpointed state.
    pub fn from_checkpoint(config: &NetworkConfig, ckpt: &Checkpoint) -> Result<Network> {
        let mut net = Network::build(config, 0)?;
        if ckpt.params.len() != net.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, architecture has {}",
                ckpt.params.len(),
                net.params.len()
            )));
        }
        for p in net.params.iter_mut() {
            let id = ckpt
                .params
                .find(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks {}", p.name)))?;
            let src = ckpt.params.get(id);
            if src.value.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "{}: checkpoint shape {:?}, architecture {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            *p = src.clone();
        }
        for (i, rs) in net.running.iter_mut().enumerate() {
            if let Some(rs) = rs {
                for (suffix, dst) in [("running_mean", &mut rs.mean), ("running_var", &mut rs.var)] {
                    let name = format!("layer{}.bn.{suffix}", i + 1);
                    let t = ckpt
                        .buffers
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(_, t)| t)
                        .ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
                    if t.len() != dst.len() {
                        return Err(Error::Data(format!("{name}: wrong length {}", t.len())));
                    }
                    dst.copy_from_slice(t.data());
                }
            }
        }
        Ok(net)
    }
}

/// Per-layer incremental state: the input columns a layer still needs.
struct Stage {
    cin: usize,
    pad_t: usize,
    cols: VecDeque<Vec<f64>>,
    /// Absolute frame index of `cols[0]`.
    first: usize,
    received: usize,
    next: usize,
}

/// Incremental inference with a fixed lag.
///
/// Frames are pushed in order; embeddings for frame `t` are emitted as soon
/// as frame `t + lag` has arrived, and [`finish`](Self::finish) flushes the
/// tail. The concatenated output equals [`Network::forward`] on the whole
/// input: each layer sees zeros outside `[0, T)`, as in batch mode.
pub struct StreamingEmbedder<'a> {
    net: &'a Network,
    stages: Vec<Stage>,
    ingested: usize,
    emitted: usize,
    finished: bool,
}

impl<'a> StreamingEmbedder<'a> {
    fn new(net: &'a Network) -> Self {
        let mut cin = net.config.input_channels;
        let stages = net
            .config
            .layers
            .iter()
            .map(|l| {
                let s = Stage {
                    cin,
                    pad_t: l.lookahead(),
                    cols: VecDeque::new(),
                    first: 0,
                    received: 0,
                    next: 0,
                };
                cin = l.channels;
                s
            })
            .collect();
        StreamingEmbedder {
            net,
            stages,
            ingested: 0,
            emitted: 0,
            finished: false,
        }
    }

    pub fn lag(&self) -> usize {
        receptive_field(&self.net.config).lag
    }

    pub fn frames_ingested(&self) -> usize {
        self.ingested
    }

    pub fn frames_emitted(&self) -> usize {
        self.emitted
    }

    /// Feeds `chunk`, whose first frame has absolute index `start`, and
    /// returns the embeddings that became available.
    pub fn push(&mut self, start: usize, chunk: &FeatureMatrix) -> Result<EmbeddingTensor> {
        if self.finished || start != self.ingested {
            return Err(Error::Sequencing {
                expected: self.ingested,
                got: start,
            });
        }
        if chunk.n_bins != self.net.config.input_bins {
            return Err(Error::Shape(format!(
                "network expects {} frequency bins, got {}",
                self.net.config.input_bins, chunk.n_bins
            )));
        }
        let mut out = Vec::new();
        for t in 0..chunk.n_frames {
            let col: Vec<f64> = (0..chunk.n_bins).map(|f| chunk.get(f, t)).collect();
            self.ingested += 1;
            self.feed(0, col, None, &mut out);
        }
        Ok(self.collect(out))
    }

    /// Declares the end of input and returns the remaining embeddings.
    pub fn finish(&mut self) -> Result<EmbeddingTensor> {
        if self.finished {
            return Err(Error::Sequencing {
                expected: self.ingested,
                got: self.ingested,
            });
        }
        if self.ingested == 0 {
            return Err(Error::Shape("input has no frames".into()));
        }
        self.finished = true;
        let total = self.ingested;
        let mut out = Vec::new();
        for l in 0..self.stages.len() {
            while self.stages[l].next < total {
                let t = self.stages[l].next;
                let col = self.compute(l, t, total);
                self.advance(l, col, Some(total), &mut out);
            }
        }
        Ok(self.collect(out))
    }

    fn feed(&mut self, l: usize, col: Vec<f64>, total: Option<usize>, out: &mut Vec<Vec<f64>>) {
        let stage = &mut self.stages[l];
        stage.cols.push_back(col);
        stage.received += 1;
        loop {
            let stage = &self.stages[l];
            let t = stage.next;
            let ready = t + stage.pad_t < stage.received || total.is_some_and(|n| stage.received == n && t < n);
            if !ready {
                break;
            }
            let col = self.compute(l, t, total.unwrap_or(usize::MAX));
            self.advance(l, col, total, out);
        }
    }

    /// Hands output frame `next` of layer `l` downstream.
    fn advance(&mut self, l: usize, col: Vec<f64>, total: Option<usize>, out: &mut Vec<Vec<f64>>) {
        let stage = &mut self.stages[l];
        stage.next += 1;
        let spec = &self.net.config.layers[l];
        let keep_from = stage.next.saturating_sub(spec.dilation.1 * spec.anchor.1);
        while stage.first < keep_from && !stage.cols.is_empty() {
            stage.cols.pop_front();
            stage.first += 1;
        }
        if l + 1 < self.stages.len() {
            self.feed(l + 1, col, total, out);
        } else {
            out.push(col);
        }
    }

    /// Output column `t` of layer `l`; input frames outside `[0, total)` or
    /// not yet received count as zero.
    fn compute(&self, l: usize, t: usize, total: usize) -> Vec<f64> {
        let net = self.net;
        let spec = &net.config.layers[l];
        let lp = &net.layers[l];
        let stage = &self.stages[l];
        let nf = net.config.input_bins;
        let (kh, kw) = spec.kernel;
        let (df, dt) = spec.dilation;
        let (ah, aw) = spec.anchor;
        let cin = stage.cin;
        let cout = spec.channels;
        let w = net.params.get(lp.weight).value.data();
        let b = net.params.get(lp.bias).value.data();

        let mut y = vec![0.0; cout * nf];
        for c in 0..cout {
            y[c * nf..(c + 1) * nf].iter_mut().for_each(|v| *v = b[c]);
        }
        for j in 0..kw {
            let tau = t as isize + (dt * j) as isize - (dt * aw) as isize;
            if tau < 0 || tau as usize >= total || tau as usize >= stage.received {
                continue;
            }
            let col = &stage.cols[tau as usize - stage.first];
            for i in 0..kh {
                let shift = (df * i) as isize - (df * ah) as isize;
                let f_lo = (-shift).max(0) as usize;
                let f_hi = (nf as isize - shift).min(nf as isize).max(0) as usize;
                if f_lo >= f_hi {
                    continue;
                }
                for c in 0..cout {
                    let yc = &mut y[c * nf..(c + 1) * nf];
                    for ci in 0..cin {
                        let wv = w[((c * cin + ci) * kh + i) * kw + j];
                        let xc = &col[ci * nf..(ci + 1) * nf];
                        let src = &xc[(f_lo as isize + shift) as usize..(f_hi as isize + shift) as usize];
                        for (o, x) in yc[f_lo..f_hi].iter_mut().zip(src) {
                            *o += wv * x;
                        }
                    }
                }
            }
        }
        if let Some((g, bb)) = lp.bn {
            let gamma = net.params.get(g).value.data();
            let beta = net.params.get(bb).value.data();
            let rs = net.running[l].as_ref().expect("running stats for normalized layer");
            for c in 0..cout {
                let inv_std = 1.0 / (rs.var[c] + net.config.bn_eps).sqrt();
                for v in &mut y[c * nf..(c + 1) * nf] {
                    let h = (*v - rs.mean[c]) * inv_std;
                    *v = (gamma[c] * h + beta[c]).max(0.0);
                }
            }
        }
        if spec.residual {
            let own = &stage.cols[t - stage.first];
            y.iter_mut().zip(own).for_each(|(o, x)| *o += x);
        }
        y
    }

    fn collect(&mut self, cols: Vec<Vec<f64>>) -> EmbeddingTensor {
        let k = self.net.config.embedding_dim;
        let nf = self.net.config.input_bins;
        let n = cols.len();
        let mut values = vec![0.0; nf * n * k];
        for (t, col) in cols.iter().enumerate() {
            for f in 0..nf {
                let norm = (0..k).map(|c| col[c * nf + f].powi(2)).sum::<f64>().sqrt();
                let denom = norm.max(NORM_EPS);
                for c in 0..k {
                    values[(f * n + t) * k + c] = col[c * nf + f] / denom;
                }
            }
        }
        self.emitted += n;
        EmbeddingTensor {
            values,
            n_bins: nf,
            n_frames: n,
            dim: k,
        }
    }
}

/// Concatenates streamed pieces along time.
pub fn concat_frames(parts: &[EmbeddingTensor]) -> Result<EmbeddingTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
    let (nf, k) = (first.n_bins, first.dim);
    if parts.iter().any(|p| p.n_bins != nf || p.dim != k) {
        return Err(Error::Shape("mismatched embedding geometry".into()));
    }
    let n: usize = parts.iter().map(|p| p.n_frames).sum();
    let mut values = Vec::with_capacity(nf * n * k);
    for f in 0..nf {
        for p in parts {
            let i = f * p.n_frames * k;
            values.extend_from_slice(&p.values[i..i + p.n_frames * k]);
        }
    }
    Ok(EmbeddingTensor {
        values,
        n_bins: nf,
        n_frames: n,
        dim: k,
    })
}
