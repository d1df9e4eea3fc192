//! Strided convolutional encoder, gated recurrent context model and affine
//! prediction heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::math::{conv1d_output_len, Graph, Real, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub conv_widths: Vec<usize>,
    pub conv_strides: Vec<usize>,
    /// Latent dimension `D`, also the internal width of every conv layer.
    pub dim: usize,
    /// Recurrent state dimension `H`.
    pub hidden: usize,
    pub context_layers: usize,
    /// Number of prediction heads `K`.
    pub predictions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_widths: vec![8, 4],
            conv_strides: vec![4, 2],
            dim: 32,
            hidden: 32,
            context_layers: 1,
            predictions: 12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.conv_widths.len() != self.conv_strides.len() {
            return Err(Error::Config("conv widths and strides must be non-empty and equally long".into()));
        }
        if self.conv_widths.iter().chain(&self.conv_strides).any(|&v| v == 0) {
            return Err(Error::Config("conv widths and strides must be positive".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("latent dimension must be at least 2 for channel normalization".into()));
        }
        if self.hidden == 0 || self.context_layers == 0 || self.predictions == 0 {
            return Err(Error::Config("hidden size, context layers and predictions must be positive".into()));
        }
        Ok(())
    }

    /// Product of the conv strides.
    pub fn rate_reduction(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Input samples seen by one latent frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (&w, &s) in self.conv_widths.iter().zip(&self.conv_strides) {
            rf += (w - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Number of latents produced from `samples` input samples.
    pub fn latent_len(&self, samples: usize) -> Result<usize> {
        let mut len = samples;
        for (&w, &s) in self.conv_widths.iter().zip(&self.conv_strides) {
            len = conv1d_output_len(len, w, s)
                .map_err(|_| Error::TooShort(format!("{samples} samples, receptive field {}", self.receptive_field())))?;
        }
        Ok(len)
    }

    /// First input sample covered by latent `j`.
    pub fn latent_start(&self, j: usize) -> usize {
        j * self.rate_reduction()
    }

    /// Input sample at the centre of latent `j`'s receptive field.
    pub fn latent_center(&self, j: usize) -> usize {
        self.latent_start(j) + (self.receptive_field() - 1) / 2
    }
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    /// `[out, in, width]`
    pub kernel: Tensor<T>,
    pub stride: usize,
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Conv layers, each followed by channel normalization and a rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<EncoderLayer<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let layers = config
            .conv_widths
            .iter()
            .zip(&config.conv_strides)
            .map(|(&w, &s)| {
                let bound = 1.0 / ((cin * w) as f64).sqrt();
                let layer = EncoderLayer {
                    kernel: uniform(&[config.dim, cin, w], bound, rng),
                    stride: s,
                    gain: Tensor::new(vec![config.dim], vec![T::one(); config.dim]).unwrap(),
                    bias: Tensor::zeros(&[config.dim]),
                };
                cin = config.dim;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.kernel.shape()[0])
    }

    fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.kernel.clone(), l.gain.clone(), l.bias.clone()])
            .map(|t| g.param(t))
            .collect()
    }

    /// `input` is `[1, samples]`; returns `[T', D]`.
    fn forward(&self, g: &mut Graph<T>, vars: &[Var], input: Var) -> Result<Var> {
        let mut h = input;
        for (layer, v) in self.layers.iter().zip(vars.chunks(3)) {
            h = g.conv1d(h, v[0], layer.stride)?;
            h = g.channel_norm(h, v[1], v[2])?;
            h = g.relu(h);
        }
        g.transpose(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer<T> {
    /// `[3H, in]`, gate blocks ordered reset, update, candidate.
    pub w_in: Tensor<T>,
    /// `[3H, H]`
    pub w_h: Tensor<T>,
    /// `[3H]`
    pub bias: Tensor<T>,
}

/// Stack of gated recurrent layers started from a zero state.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextParams<T> {
    pub layers: Vec<GruLayer<T>>,
}

impl<T: Real> ContextParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden;
        let mut din = config.dim;
        let layers = (0..config.context_layers)
            .map(|_| {
                let layer = GruLayer {
                    w_in: uniform(&[3 * h, din], 1.0 / (din as f64).sqrt(), rng),
                    w_h: uniform(&[3 * h, h], 1.0 / (h as f64).sqrt(), rng),
                    bias: uniform(&[3 * h], 1.0 / (h as f64).sqrt(), rng),
                };
                din = h;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w_h.shape()[1])
    }

    fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.w_in.clone(), l.w_h.clone(), l.bias.clone()])
            .map(|t| g.param(t))
            .collect()
    }

    fn forward(&self, g: &mut Graph<T>, vars: &[Var], latents: Var) -> Result<Var> {
        let mut h = latents;
        for v in vars.chunks(3) {
            h = g.gru(h, v[0], v[1], v[2])?;
        }
        Ok(h)
    }
}

/// `K` affine maps from context to latent space stacked into one matrix:
/// rows `k*D..(k+1)*D` of `weight` belong to head `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHeads<T> {
    k: usize,
    dim: usize,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Real> PredictionHeads<T> {
    pub fn new(k: usize, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (rows, _) = weight.dims2()?;
        if k == 0 || rows % k != 0 || bias.len() != rows {
            return Err(shape_err(format!("{k} heads need a [K*D, H] weight and [K*D] bias")));
        }
        Ok(Self { k, dim: rows / k, weight, bias })
    }

    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let rows = config.predictions * config.dim;
        let bound = 1.0 / (config.hidden as f64).sqrt();
        Self {
            k: config.predictions,
            dim: config.dim,
            weight: uniform(&[rows, config.hidden], bound, rng),
            bias: uniform(&[rows], bound, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }
}

/// `[T', D]` encoder outputs of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T>(Tensor<T>);

/// `[T', H]` context vectors of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSequence<T>(Tensor<T>);

macro_rules! sequence_impl {
    ($name:ident) => {
        impl<T: Real> $name<T> {
            pub fn new(values: Tensor<T>) -> Result<Self> {
                let (len, _) = values.dims2()?;
                if len == 0 {
                    return Err(Error::Empty(concat!(stringify!($name), " with no frames")));
                }
                if !values.is_finite() {
                    return Err(Error::NonFinite(stringify!($name).into()));
                }
                Ok(Self(values))
            }

            pub fn len(&self) -> usize {
                self.0.rows()
            }

            pub fn is_empty(&self) -> bool {
                self.0.rows() == 0
            }

            pub fn width(&self) -> usize {
                self.0.cols()
            }

            pub fn frame(&self, t: usize) -> &[T] {
                self.0.row(t)
            }

            pub fn as_tensor(&self) -> &Tensor<T> {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor<T> {
                self.0
            }
        }
    };
}

sequence_impl!(LatentSequence);
sequence_impl!(ContextSequence);

/// Predictions made from the first `rows` contexts: `[rows, K * D]`.
pub fn predict_graph<T: Real>(g: &mut Graph<T>, contexts: Var, weight: Var, bias: Var, rows: usize) -> Result<Var> {
    let c = g.row_slice(contexts, 0, rows)?;
    g.linear(c, weight, bias)
}

fn input_tensor<T: Real>(samples: &[T]) -> Result<Tensor<T>> {
    Tensor::new(vec![1, samples.len()], samples.to_vec())
}

/// Maps a 1-channel sample stream to latents.
pub fn encode<T: Real>(samples: &[T], params: &EncoderParams<T>) -> Result<LatentSequence<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(input_tensor(samples)?);
    let z = params.forward(&mut g, &vars, x)?;
    LatentSequence::new(g.value(z).clone())
}

/// Runs the recurrent context model; `c_t` depends on `z_{<=t}` only.
pub fn contextualize<T: Real>(latents: &LatentSequence<T>, params: &ContextParams<T>) -> Result<ContextSequence<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let z = g.constant(latents.as_tensor().clone());
    let c = params.forward(&mut g, &vars, z)?;
    ContextSequence::new(g.value(c).clone())
}

/// The `K` predictions `[K, D]` made from one context vector.
pub fn predict<T: Real>(context: &[T], heads: &PredictionHeads<T>) -> Result<Tensor<T>> {
    if context.len() != heads.hidden() {
        return Err(shape_err(format!("context has {} entries, heads expect {}", context.len(), heads.hidden())));
    }
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(vec![1, context.len()], context.to_vec())?);
    let w = g.constant(heads.weight.clone());
    let b = g.constant(heads.bias.clone());
    let p = g.linear(c, w, b)?;
    Tensor::new(vec![heads.k, heads.dim], g.value(p).data().to_vec())
}

/// Graph handles of every model parameter, in [`Model::parameters`] order.
pub struct BoundModel {
    vars: Vec<Var>,
    encoder: usize,
    context: usize,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn encoder(&self) -> &[Var] {
        &self.vars[..self.encoder]
    }

    fn context(&self) -> &[Var] {
        &self.vars[self.encoder..self.encoder + self.context]
    }

    fn heads(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Full model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub context: ContextParams<T>,
    pub heads: PredictionHeads<T>,
}

impl<T: Real> Model<T> {
    /// Seeded uniform initialization in `±1/sqrt(fan_in)`; channel norm gains
    /// start at one and biases at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&config, &mut rng);
        let context = ContextParams::init(&config, &mut rng);
        let heads = PredictionHeads::init(&config, &mut rng);
        Ok(Self { config, encoder, context, heads })
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.kernel"), &l.kernel));
            out.push((format!("encoder.{i}.gain"), &l.gain));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        for (i, l) in self.context.layers.iter().enumerate() {
            out.push((format!("context.{i}.w_in"), &l.w_in));
            out.push((format!("context.{i}.w_h"), &l.w_h));
            out.push((format!("context.{i}.bias"), &l.bias));
        }
        out.push(("heads.weight".into(), &self.heads.weight));
        out.push(("heads.bias".into(), &self.heads.bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.gain);
            out.push(&mut l.bias);
        }
        for l in &mut self.context.layers {
            out.push(&mut l.w_in);
            out.push(&mut l.w_h);
            out.push(&mut l.bias);
        }
        out.push(&mut self.heads.weight);
        out.push(&mut self.heads.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        let mut vars = self.encoder.bind(g);
        let encoder = vars.len();
        let ctx = self.context.bind(g);
        let context = ctx.len();
        vars.extend(ctx);
        vars.push(g.param(self.heads.weight.clone()));
        vars.push(g.param(self.heads.bias.clone()));
        BoundModel { vars, encoder, context }
    }

    /// Reuses graph parameters already registered in [`Model::parameters`] order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundModel> {
        let encoder = 3 * self.encoder.layers.len();
        let context = 3 * self.context.layers.len();
        if vars.len() != encoder + context + 2 {
            return Err(shape_err(format!("{} parameter handles for a model with {}", vars.len(), encoder + context + 2)));
        }
        Ok(BoundModel { vars, encoder, context })
    }

    /// Encoder and context model on the graph; returns `(z, c)` handles.
    pub fn forward_graph(&self, g: &mut Graph<T>, bound: &BoundModel, samples: &[T]) -> Result<(Var, Var)> {
        let x = g.constant(input_tensor(samples)?);
        let z = self.encoder.forward(g, bound.encoder(), x)?;
        let c = self.context.forward(g, bound.context(), z)?;
        Ok((z, c))
    }

    /// Predictions from the first `rows` contexts.
    pub fn predict_graph(&self, g: &mut Graph<T>, bound: &BoundModel, contexts: Var, rows: usize) -> Result<Var> {
        let (w, b) = bound.heads();
        predict_graph(g, contexts, w, b, rows)
    }

    /// Latents and contexts of one sequence without recording gradients.
    pub fn features(&self, samples: &[T]) -> Result<(LatentSequence<T>, ContextSequence<T>)> {
        let z = encode(samples, &self.encoder)?;
        let c = contextualize(&z, &self.context)?;
        Ok((z, c))
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            encoder: EncoderParams {
                layers: self
                    .encoder
                    .layers
                    .iter()
                    .map(|l| EncoderLayer { kernel: l.kernel.cast(), stride: l.stride, gain: l.gain.cast(), bias: l.bias.cast() })
                    .collect(),
            },
            context: ContextParams {
                layers: self
                    .context
                    .layers
                    .iter()
                    .map(|l| GruLayer { w_in: l.w_in.cast(), w_h: l.w_h.cast(), bias: l.bias.cast() })
                    .collect(),
            },
            heads: PredictionHeads { k: self.heads.k, dim: self.heads.dim, weight: self.heads.weight.cast(), bias: self.heads.bias.cast() },
        }
    }
}
