use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::schedule::{noise_sample, regression_target, NoiseSchedule};
use super::tape::{Tape, Var};
use super::DenoiserError;
use crate::attention::BiasMatrix;
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError, BLOCKED};

/// How reference images enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// References are noised to the target's timestep with their own noise.
    Noisy,
    /// References enter clean, at timestep zero.
    Clean,
}

impl std::str::FromStr for ReferenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noisy" => Ok(Self::Noisy),
            "clean" => Ok(Self::Clean),
            other => Err(format!(
                "unknown reference mode `{other}` (expected noisy or clean)"
            )),
        }
    }
}

/// Shape of the toy two-stream transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Token grid; one token per latent cell.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Extra per-cell input channels (depth conditioning); zero when unused.
    pub cond_channels: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
    pub time_features: usize,
    pub rotary: bool,
    pub reference: ReferenceMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            head_dim: 8,
            height: 8,
            width: 8,
            channels: 3,
            cond_channels: 1,
            text_len: 2,
            text_dim: 8,
            mlp_ratio: 2,
            time_features: 4,
            rotary: true,
            reference: ReferenceMode::Noisy,
        }
    }
}

impl ModelConfig {
    pub fn model_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("text_len", self.text_len),
            ("text_dim", self.text_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("time_features", self.time_features),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DenoiserError::Config(format!("{name} must be positive")));
        }
        if self.rotary && self.head_dim % 2 != 0 {
            return Err(DenoiserError::Config(
                "rotary embedding needs an even head_dim".into(),
            ));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.model_width();
        let hidden = d * self.mlp_ratio;
        let mut out = vec![
            (
                "input.w".to_string(),
                vec![self.channels + self.cond_channels, d],
            ),
            ("input.b".to_string(), vec![1, d]),
            ("caption.w".to_string(), vec![self.text_dim, d]),
            ("caption.b".to_string(), vec![1, d]),
            ("time.w".to_string(), vec![2 * self.time_features, d]),
            ("time.b".to_string(), vec![1, d]),
        ];
        for l in 0..self.layers {
            for stream in ["text", "image"] {
                let p = format!("layer{l}.{stream}");
                for proj in ["q", "k", "v", "o"] {
                    out.push((format!("{p}.{proj}"), vec![d, d]));
                }
                out.push((format!("{p}.mlp1.w"), vec![d, hidden]));
                out.push((format!("{p}.mlp1.b"), vec![1, hidden]));
                out.push((format!("{p}.mlp2.w"), vec![hidden, d]));
                out.push((format!("{p}.mlp2.b"), vec![1, d]));
            }
        }
        out.push(("output.w".to_string(), vec![d, self.channels]));
        out.push(("output.b".to_string(), vec![1, self.channels]));
        out
    }
}

/// All weights of the denoiser, stored by name in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl DenoiserParams {
    /// Scaled Gaussian weights and zero biases drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, DenoiserError> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let mut gain = 1.0 / (shape[0] as f64).sqrt();
                if name.ends_with(".o") || name.ends_with("mlp2.w") {
                    gain *= 0.5;
                }
                Tensor::randn(&shape, &mut rng).scale(gain)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            seed,
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(
        config: ModelConfig,
        seed: u64,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, DenoiserError> {
        config.validate()?;
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| DenoiserError::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(DenoiserError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(DenoiserError::Config(format!(
                "unexpected parameter {extra}"
            )));
        }
        Ok(Self {
            config,
            seed,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Parameters recorded on a tape.
struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl ParamVars {
    fn record(tape: &mut Tape, params: &DenoiserParams) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in params.names.iter().zip(&params.tensors) {
            let v = tape.leaf(t.clone());
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Self { vars, order }
    }

    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// One image (plus optional caption) in the token sequence.
struct Segment<'a> {
    latent: Tensor,
    cond: Option<&'a Tensor>,
    /// Normalized time in `[0, 1]`.
    time: f64,
    caption: Option<Tensor>,
    /// First rotary row of this image.
    row: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Stream {
    Text,
    Image,
}

struct Built {
    /// Final hidden state of each segment's image tokens.
    image_hidden: Vec<Var>,
    last_attention: Var,
}

fn time_features(time: f64, count: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * count);
    for k in 0..count {
        let angle = std::f64::consts::PI * time * (1u64 << k) as f64;
        data.push(angle.sin());
        data.push(angle.cos());
    }
    Tensor::new(vec![1, 2 * count], data).expect("nonempty")
}

fn check_latent(cfg: &ModelConfig, x: &Tensor, what: &str) -> Result<(), DenoiserError> {
    if x.shape() != cfg.latent_shape() {
        return Err(DenoiserError::Shape(TensorError::Shape {
            op: if what == "reference" {
                "reference grid"
            } else {
                "latent grid"
            },
            left: cfg.latent_shape().to_vec(),
            right: x.shape().to_vec(),
        }));
    }
    Ok(())
}

/// Per-cell input rows: latent channels followed by conditioning channels.
fn image_tokens(
    cfg: &ModelConfig,
    latent: &Tensor,
    cond: Option<&Tensor>,
) -> Result<Tensor, DenoiserError> {
    let n = cfg.tokens();
    let width = cfg.channels + cfg.cond_channels;
    let mut data = Vec::with_capacity(n * width);
    if let Some(c) = cond {
        if c.shape() != [cfg.height, cfg.width, cfg.cond_channels] {
            return Err(DenoiserError::Shape(TensorError::Shape {
                op: "conditioning grid",
                left: vec![cfg.height, cfg.width, cfg.cond_channels],
                right: c.shape().to_vec(),
            }));
        }
    }
    for i in 0..n {
        data.extend_from_slice(&latent.data()[i * cfg.channels..(i + 1) * cfg.channels]);
        match cond {
            Some(c) => data
                .extend_from_slice(&c.data()[i * cfg.cond_channels..(i + 1) * cfg.cond_channels]),
            None => data.extend(std::iter::repeat_n(0.0, cfg.cond_channels)),
        }
    }
    Ok(Tensor::new(vec![n, width], data)?)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn build(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    segs: &[Segment],
    bias: &Tensor,
) -> Result<Built, DenoiserError> {
    let mut pieces: Vec<(Stream, Var)> = Vec::new();
    let mut positions = Vec::new();
    let mut image_piece = Vec::with_capacity(segs.len());
    for seg in segs {
        if let Some(caption) = &seg.caption {
            let x = tape.leaf(caption.clone());
            let h = linear(tape, x, p.get("caption.w"), p.get("caption.b"))?;
            pieces.push((Stream::Text, h));
            positions.extend(std::iter::repeat_n(None, cfg.text_len));
        }
        let x = tape.leaf(image_tokens(cfg, &seg.latent, seg.cond)?);
        let h = linear(tape, x, p.get("input.w"), p.get("input.b"))?;
        let tf = tape.leaf(time_features(seg.time, cfg.time_features));
        let temb = linear(tape, tf, p.get("time.w"), p.get("time.b"))?;
        let temb = tape.silu(temb);
        let h = tape.add_row(h, temb)?;
        image_piece.push(pieces.len());
        pieces.push((Stream::Image, h));
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                positions.push(Some([(seg.row + r) as f64, c as f64]));
            }
        }
    }
    let total = positions.len();
    if bias.shape() != [total, total] {
        return Err(DenoiserError::Shape(TensorError::Shape {
            op: "attention bias",
            left: vec![total, total],
            right: bias.shape().to_vec(),
        }));
    }
    let positions = Rc::new(positions);
    let mut last_attention = None;
    for l in 0..cfg.layers {
        let name = |s: Stream, what: &str| {
            let stream = if s == Stream::Text { "text" } else { "image" };
            format!("layer{l}.{stream}.{what}")
        };
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for &(s, h) in &pieces {
            qs.push(tape.matmul(h, p.get(&name(s, "q")))?);
            ks.push(tape.matmul(h, p.get(&name(s, "k")))?);
            vs.push(tape.matmul(h, p.get(&name(s, "v")))?);
        }
        let mut q = tape.concat_rows(&qs)?;
        let mut k = tape.concat_rows(&ks)?;
        let v = tape.concat_rows(&vs)?;
        if cfg.rotary {
            q = tape.rope(q, positions.clone(), cfg.heads, cfg.head_dim)?;
            k = tape.rope(k, positions.clone(), cfg.heads, cfg.head_dim)?;
        }
        let att = tape.attention(q, k, v, bias, cfg.heads, cfg.head_dim)?;
        last_attention = Some(att);
        let mut start = 0;
        for (s, h) in pieces.iter_mut() {
            let len = tape.value(*h).shape()[0];
            let a = tape.slice_rows(att, start, len)?;
            start += len;
            let o = tape.matmul(a, p.get(&name(*s, "o")))?;
            let x = tape.add(*h, o)?;
            let m = linear(
                tape,
                x,
                p.get(&name(*s, "mlp1.w")),
                p.get(&name(*s, "mlp1.b")),
            )?;
            let m = tape.silu(m);
            let m = linear(
                tape,
                m,
                p.get(&name(*s, "mlp2.w")),
                p.get(&name(*s, "mlp2.b")),
            )?;
            *h = tape.add(x, m)?;
        }
    }
    Ok(Built {
        image_hidden: image_piece.iter().map(|&i| pieces[i].1).collect(),
        last_attention: last_attention.expect("at least one layer"),
    })
}

fn project_out(tape: &mut Tape, p: &ParamVars, hidden: Var) -> Result<Var, TensorError> {
    linear(tape, hidden, p.get("output.w"), p.get("output.b"))
}

/// Conditioning inputs of one denoiser call.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    /// Caption embedding (`text_len x text_dim`); `None` is the null caption.
    pub caption: Option<&'a Tensor>,
    /// Clean reference latents.
    pub refs: &'a [Tensor],
    /// Per-reference noise, required in reference-noisy mode.
    pub ref_noise: &'a [Tensor],
    /// Depth conditioning grid for the target (`H x W x cond_channels`).
    pub depth: Option<&'a Tensor>,
    /// First rotary row of each reference; defaults to `(k + 1) H`.
    pub ref_rows: Option<&'a [usize]>,
}

impl<'a> Conditioning<'a> {
    pub fn caption(caption: Option<&'a Tensor>) -> Self {
        Self {
            caption,
            ..Self::default()
        }
    }

    /// The same conditioning with references and captions removed as requested.
    pub fn without(self, refs: bool, caption: bool) -> Self {
        Self {
            caption: if caption { None } else { self.caption },
            refs: if refs { &[] } else { self.refs },
            ref_noise: if refs { &[] } else { self.ref_noise },
            ref_rows: if refs { None } else { self.ref_rows },
            ..self
        }
    }
}

/// Output of [`forward_detailed`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub prediction: Tensor,
    /// Final hidden states of each reference's tokens.
    pub reference_features: Vec<Tensor>,
}

fn null_caption(cfg: &ModelConfig) -> Tensor {
    Tensor::zeros(&[cfg.text_len, cfg.text_dim])
}

fn target_segments<'a>(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t: f64,
    cond: &Conditioning<'a>,
) -> Result<(Vec<Segment<'a>>, Tensor), DenoiserError> {
    let cfg = &params.config;
    check_latent(cfg, x_t, "target")?;
    let time = t / sched.steps as f64;
    sched.coefficients(t)?;
    let caption = match cond.caption {
        Some(c) if c.shape() != [cfg.text_len, cfg.text_dim] => {
            return Err(DenoiserError::Shape(TensorError::Shape {
                op: "caption embedding",
                left: vec![cfg.text_len, cfg.text_dim],
                right: c.shape().to_vec(),
            }))
        }
        Some(c) => c.clone(),
        None => null_caption(cfg),
    };
    let mut segs = vec![Segment {
        latent: x_t.clone(),
        cond: cond.depth,
        time,
        caption: Some(caption),
        row: 0,
    }];
    if let Some(rows) = cond.ref_rows {
        if rows.len() != cond.refs.len() {
            return Err(DenoiserError::Config(format!(
                "{} reference rows for {} references",
                rows.len(),
                cond.refs.len()
            )));
        }
    }
    if cfg.reference == ReferenceMode::Noisy && cond.ref_noise.len() != cond.refs.len() {
        return Err(DenoiserError::Config(format!(
            "reference-noisy mode needs noise for each of {} references, got {}",
            cond.refs.len(),
            cond.ref_noise.len()
        )));
    }
    for (k, r) in cond.refs.iter().enumerate() {
        check_latent(cfg, r, "reference")?;
        let (latent, time) = match cfg.reference {
            ReferenceMode::Noisy => (noise_sample(r, t, &cond.ref_noise[k], sched)?, time),
            ReferenceMode::Clean => (r.clone(), 0.0),
        };
        segs.push(Segment {
            latent,
            cond: None,
            time,
            caption: None,
            row: cond.ref_rows.map_or((k + 1) * cfg.height, |rows| rows[k]),
        });
    }
    // Target and caption see everything; each reference sees only itself.
    let head = cfg.text_len + cfg.tokens();
    let total = head + cond.refs.len() * cfg.tokens();
    let mut bias = Tensor::zeros(&[total, total]);
    for k in 0..cond.refs.len() {
        let block = head + k * cfg.tokens()..head + (k + 1) * cfg.tokens();
        for q in block.clone() {
            for (key, slot) in bias.row_mut(q).iter_mut().enumerate() {
                if !block.contains(&key) {
                    *slot = BLOCKED;
                }
            }
        }
    }
    Ok((segs, bias))
}

fn to_grid(cfg: &ModelConfig, t: &Tensor) -> Tensor {
    t.clone()
        .reshape(&cfg.latent_shape())
        .expect("token count matches grid")
}

/// Predicted velocity (diffusion) or flow for the noisy target `x_t` at time `t`.
pub fn denoiser_forward(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t: f64,
    cond: &Conditioning,
) -> Result<Tensor, DenoiserError> {
    Ok(forward_detailed(params, sched, x_t, t, cond)?.prediction)
}

pub fn forward_detailed(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t: f64,
    cond: &Conditioning,
) -> Result<ForwardOutput, DenoiserError> {
    let (segs, bias) = target_segments(params, sched, x_t, t, cond)?;
    let mut tape = Tape::new();
    let p = ParamVars::record(&mut tape, params);
    let built = build(&mut tape, &p, &params.config, &segs, &bias)?;
    let out = project_out(&mut tape, &p, built.image_hidden[0])?;
    Ok(ForwardOutput {
        prediction: to_grid(&params.config, tape.value(out)),
        reference_features: built.image_hidden[1..]
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
    })
}

/// Output of [`forward_set`].
#[derive(Debug, Clone)]
pub struct SetOutput {
    pub predictions: Vec<Tensor>,
    /// Last-layer attention from each image's tokens to its own caption tokens,
    /// `heads x text_len x (H W)` per image.
    pub cross_attention: Vec<Tensor>,
}

/// Stacks per-image bias rows into one square bias over the whole set.
pub fn stack_bias(masks: &[BiasMatrix]) -> Result<Tensor, DenoiserError> {
    let rows: Vec<&Tensor> = masks.iter().map(|m| &m.values).collect();
    Ok(Tensor::concat_rows(&rows)?)
}

/// Joint prediction for `N` images generated together, each with its own
/// caption, under a set-level attention bias (for instance a stacked MSA mask).
///
/// Image `i`'s tokens sit after its caption and occupy rotary rows `i H ..`.
pub fn forward_set(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    xs: &[Tensor],
    t: f64,
    captions: &[Option<&Tensor>],
    depths: &[Option<&Tensor>],
    bias: &Tensor,
) -> Result<SetOutput, DenoiserError> {
    let cfg = &params.config;
    if captions.len() != xs.len() || depths.len() != xs.len() || xs.is_empty() {
        return Err(DenoiserError::Config(format!(
            "{} images, {} captions, {} depth maps",
            xs.len(),
            captions.len(),
            depths.len()
        )));
    }
    sched.coefficients(t)?;
    let time = t / sched.steps as f64;
    let mut segs = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        check_latent(cfg, x, "target")?;
        segs.push(Segment {
            latent: x.clone(),
            cond: depths[i],
            time,
            caption: Some(captions[i].cloned().unwrap_or_else(|| null_caption(cfg))),
            row: i * cfg.height,
        });
    }
    let mut tape = Tape::new();
    let p = ParamVars::record(&mut tape, params);
    let built = build(&mut tape, &p, cfg, &segs, bias)?;
    let mut predictions = Vec::with_capacity(xs.len());
    for &h in &built.image_hidden {
        let out = project_out(&mut tape, &p, h)?;
        predictions.push(to_grid(cfg, tape.value(out)));
    }
    let probs = tape
        .attention_probs(built.last_attention)
        .expect("attention node");
    let n = cfg.text_len + cfg.tokens();
    let cross_attention = (0..xs.len())
        .map(|i| {
            let mut data = Vec::with_capacity(cfg.heads * cfg.text_len * cfg.tokens());
            for head in probs {
                for tok in 0..cfg.text_len {
                    for px in 0..cfg.tokens() {
                        data.push(head.get(&[i * n + cfg.text_len + px, i * n + tok]));
                    }
                }
            }
            Tensor::new(vec![cfg.heads, cfg.text_len, cfg.tokens()], data).expect("sized")
        })
        .collect();
    Ok(SetOutput {
        predictions,
        cross_attention,
    })
}

/// One training example: a target with optional references and caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub x: Tensor,
    pub refs: Vec<Tensor>,
    pub ref_noise: Vec<Tensor>,
    pub caption: Option<Tensor>,
    pub depth: Option<Tensor>,
    pub t: f64,
    pub eps: Tensor,
}

impl TrainSample {
    pub fn conditioning(&self) -> Conditioning<'_> {
        Conditioning {
            caption: self.caption.as_ref(),
            refs: &self.refs,
            ref_noise: &self.ref_noise,
            depth: self.depth.as_ref(),
            ref_rows: None,
        }
    }
}

fn loss_graph(
    tape: &mut Tape,
    sample: &TrainSample,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(Var, ParamVars), DenoiserError> {
    let x_t = noise_sample(&sample.x, sample.t, &sample.eps, sched)?;
    let target = regression_target(&sample.x, &sample.eps, sample.t, sched)?;
    let cond = sample.conditioning();
    let (segs, bias) = target_segments(params, sched, &x_t, sample.t, &cond)?;
    let p = ParamVars::record(tape, params);
    let built = build(tape, &p, &params.config, &segs, &bias)?;
    let out = project_out(tape, &p, built.image_hidden[0])?;
    let flat_target = target.reshape(&[params.config.tokens(), params.config.channels])?;
    let loss = tape.mse(out, &flat_target)?;
    Ok((loss, p))
}

/// Mean squared error between the regression target and the prediction.
pub fn training_loss(
    sample: &TrainSample,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<f64, DenoiserError> {
    let mut tape = Tape::new();
    let (loss, _) = loss_graph(&mut tape, sample, params, sched)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and its gradient with respect to every parameter tensor, in storage order.
pub fn loss_and_gradients(
    sample: &TrainSample,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>), DenoiserError> {
    let mut tape = Tape::new();
    let (loss, p) = loss_graph(&mut tape, sample, params, sched)?;
    let grads = tape.backward(loss)?;
    let out = p
        .order
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    Ok((tape.value(loss).data()[0], out))
}

/// Deterministic stand-in for a text encoder: hashes the caption into a
/// seeded Gaussian `text_len x text_dim` embedding.
pub fn embed_caption(text: &str, text_len: usize, text_dim: usize) -> Tensor {
    // FNV-1a keeps the embedding stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.trim().to_lowercase().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = Rng::new(h);
    Tensor::randn(&[text_len, text_dim], &mut rng)
}
