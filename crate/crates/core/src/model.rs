//! Convolutional prominence estimator with variable-stride frame-to-word
//! downsampling.
//!
//! The network is a framewise encoder stack followed by a decoder stack. Where
//! the frame sequence is reduced to one vector per word is the model's
//! [`Location`]; how the frames of a word are combined is its [`Method`]:
//!
//! * `Framewise`: both stacks run on frames, training uses frame targets
//!   interpolated from the word targets, and frame scores are downsampled only
//!   at inference.
//! * `Posthoc`: both stacks run on frames and the frame scores are downsampled
//!   before the loss.
//! * `Intermediate`: encoder on frames, downsampling, decoder on words.
//! * `Prehoc`: the encoder runs on each word's frames in isolation, so its
//!   receptive field never crosses a word boundary.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{validate_spans, WordSpan};
use crate::error::{Error, Result};
use crate::features::NUM_MELS;
use crate::loss::{elementwise, LossKind};
use crate::rasch::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Framewise,
    Posthoc,
    Intermediate,
    Prehoc,
}

impl Location {
    pub const ALL: [Location; 4] = [
        Location::Framewise,
        Location::Posthoc,
        Location::Intermediate,
        Location::Prehoc,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Average,
    Max,
    Sum,
    Center,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Average, Method::Max, Method::Sum, Method::Center];
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(Location {
    Location::Framewise => "framewise",
    Location::Posthoc => "posthoc",
    Location::Intermediate => "intermediate",
    Location::Prehoc => "prehoc",
});
text_enum!(Method {
    Method::Average => "average",
    Method::Max => "max",
    Method::Sum => "sum",
    Method::Center => "center",
});
text_enum!(LossKind {
    LossKind::Bce => "bce",
    LossKind::Mse => "mse",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub location: Location,
    pub method: Method,
    pub layers_per_stack: usize,
    pub channels: usize,
    pub input_channels: usize,
    pub kernel_size: usize,
    pub activation: Activation,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            location: Location::Intermediate,
            method: Method::Sum,
            layers_per_stack: 6,
            channels: 80,
            input_channels: NUM_MELS,
            kernel_size: 3,
            activation: Activation::Relu,
            loss: LossKind::Bce,
        }
    }
}

impl ModelConfig {
    pub fn new(location: Location, method: Method) -> Self {
        Self {
            location,
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers_per_stack == 0 || self.channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("layers and channels must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd for same padding",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Reduces `[C × T]` frame features to `[C × W]` word features.
///
/// Frames outside every span are ignored. `Sum` is not normalized by word
/// length; `Center` takes frame `(start + end - 1) / 2`.
pub fn downsample(features: ArrayView2<f64>, spans: &[WordSpan], method: Method) -> Result<Array2<f64>> {
    let (channels, frames) = features.dim();
    for span in spans {
        if span.is_empty() || span.end_frame > frames {
            return Err(Error::Span {
                start: span.start_frame,
                end: span.end_frame,
                frames,
            });
        }
    }
    let mut out = Array2::zeros((channels, spans.len()));
    for (c, row) in features.outer_iter().enumerate() {
        for (w, span) in spans.iter().enumerate() {
            let frames = row.slice(s![span.start_frame..span.end_frame]);
            out[[c, w]] = match method {
                // Running mean; exact when all frames are equal.
                Method::Average => frames
                    .iter()
                    .enumerate()
                    .fold(0.0, |mean, (i, &x)| mean + (x - mean) / (i + 1) as f64),
                Method::Max => frames.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Method::Sum => frames.iter().fold(0.0, |acc, &x| acc + x),
                Method::Center => row[span.center()],
            };
        }
    }
    Ok(out)
}

/// Gradient of [`downsample`] with respect to its input.
fn downsample_backward(
    features: ArrayView2<f64>,
    spans: &[WordSpan],
    method: Method,
    grad: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(features.dim());
    for c in 0..features.nrows() {
        let row = features.row(c);
        for (w, span) in spans.iter().enumerate() {
            let g = grad[[c, w]];
            match method {
                Method::Average => {
                    let share = g / span.len() as f64;
                    out.slice_mut(s![c, span.start_frame..span.end_frame])
                        .mapv_inplace(|v| v + share);
                }
                Method::Sum => {
                    out.slice_mut(s![c, span.start_frame..span.end_frame])
                        .mapv_inplace(|v| v + g);
                }
                Method::Max => {
                    let mut best = span.start_frame;
                    for t in span.start_frame..span.end_frame {
                        if row[t] > row[best] {
                            best = t;
                        }
                    }
                    out[[c, best]] += g;
                }
                Method::Center => out[[c, span.center()]] += g,
            }
        }
    }
    out
}

/// Interpolates word prominence onto the frame axis.
///
/// Anchors sit at word center frames; values are linear between consecutive
/// anchors and constant before the first and after the last.
pub fn upsample_targets(prominence: &[f64], spans: &[WordSpan], frames: usize) -> Result<Vec<f64>> {
    if prominence.is_empty() || prominence.len() != spans.len() {
        return Err(Error::Dimension(format!(
            "{} prominence values for {} words",
            prominence.len(),
            spans.len()
        )));
    }
    let last_end = spans.last().map_or(0, |s| s.end_frame);
    if frames < last_end {
        return Err(Error::Dimension(format!(
            "{frames} frames but last word ends at {last_end}"
        )));
    }
    let anchors: Vec<(usize, f64)> = spans.iter().zip(prominence).map(|(s, &p)| (s.center(), p)).collect();
    let mut out = Vec::with_capacity(frames);
    let mut segment = 0;
    for t in 0..frames {
        while segment + 1 < anchors.len() && anchors[segment + 1].0 <= t {
            segment += 1;
        }
        let (x0, y0) = anchors[segment];
        let value = if t <= x0 || segment + 1 == anchors.len() {
            y0
        } else {
            let (x1, y1) = anchors[segment + 1];
            y0 + (y1 - y0) * (t - x0) as f64 / (x1 - x0) as f64
        };
        out.push(value);
    }
    Ok(out)
}

/// One-dimensional convolution with same (zero) padding.
///
/// The weight is stored as `[out × (in · kernel)]` so that the forward pass is
/// a single matrix product with the unfolded input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel_size: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(input: usize, output: usize, kernel_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input * kernel_size) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input * kernel_size), |_| rng.gen_range(-bound..bound)),
            bias: Array1::from_shape_fn(output, |_| rng.gen_range(-bound..bound)),
            kernel_size,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.weight.ncols() / self.kernel_size
    }

    pub fn output_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, cols: &Array2<f64>) -> Array2<f64> {
        let mut y = self.weight.dot(cols);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }
}

fn im2col(x: ArrayView2<f64>, kernel: usize) -> Array2<f64> {
    let (channels, frames) = x.dim();
    let pad = kernel / 2;
    let mut cols = Array2::zeros((channels * kernel, frames));
    for c in 0..channels {
        let row = x.row(c);
        for j in 0..kernel {
            let mut out = cols.row_mut(c * kernel + j);
            // out[t] = x[t + j - pad]
            let lo = pad.saturating_sub(j);
            let hi = (frames + pad).saturating_sub(j).min(frames);
            if lo < hi {
                out.slice_mut(s![lo..hi])
                    .assign(&row.slice(s![lo + j - pad..hi + j - pad]));
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, channels: usize, kernel: usize) -> Array2<f64> {
    let frames = cols.ncols();
    let pad = kernel / 2;
    let mut x = Array2::zeros((channels, frames));
    for c in 0..channels {
        let mut row = x.row_mut(c);
        for j in 0..kernel {
            let col = cols.row(c * kernel + j);
            let lo = pad.saturating_sub(j);
            let hi = (frames + pad).saturating_sub(j).min(frames);
            if lo < hi {
                let mut target = row.slice_mut(s![lo + j - pad..hi + j - pad]);
                target += &col.slice(s![lo..hi]);
            }
        }
    }
    x
}

struct LayerTrace {
    cols: Array2<f64>,
    output: Array2<f64>,
    relu: bool,
}

fn stack_forward(layers: &[Conv1d], input: ArrayView2<f64>, relu_last: bool) -> (Array2<f64>, Vec<LayerTrace>) {
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(layers.len());
    let mut current = input.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        let cols = im2col(current.view(), layer.kernel_size);
        let mut output = layer.forward(&cols);
        let relu = relu_last || i + 1 < layers.len();
        if relu {
            output.mapv_inplace(|v| v.max(0.0));
        }
        current = output.clone();
        traces.push(LayerTrace { cols, output, relu });
    }
    (current, traces)
}

/// Backpropagates through a stack, accumulating parameter gradients. Returns
/// the gradient with respect to the stack input when `input_grad` is set.
fn stack_backward(
    layers: &[Conv1d],
    traces: &[LayerTrace],
    grad_output: Array2<f64>,
    grads: &mut [ConvGrad],
    input_grad: bool,
) -> Option<Array2<f64>> {
    let mut grad = grad_output;
    for (i, (layer, trace)) in layers.iter().zip(traces).enumerate().rev() {
        if trace.relu {
            ndarray::Zip::from(&mut grad).and(&trace.output).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        grads[i].weight += &grad.dot(&trace.cols.t());
        grads[i].bias += &grad.sum_axis(Axis(1));
        if i == 0 && !input_grad {
            return None;
        }
        let grad_cols = layer.weight.t().dot(&grad);
        grad = col2im(&grad_cols, layer.input_channels(), layer.kernel_size);
    }
    Some(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients in the same order as [`ProminenceModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &ProminenceModel) -> Self {
        Self {
            layers: model
                .layers()
                .map(|l| ConvGrad {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weight *= factor;
            g.bias *= factor;
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| {
                [
                    g.weight.as_slice().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Per-word scores, plus per-frame scores for the framewise and posthoc
/// locations. Scores are logits under BCE and sigmoid-bounded under MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub word_scores: Array1<f64>,
    pub frame_scores: Option<Array1<f64>>,
    loss: LossKind,
}

impl ModelOutput {
    /// Word prominence estimates in `[0, 1]`.
    pub fn word_prominence(&self) -> Vec<f64> {
        match self.loss {
            LossKind::Bce => self.word_scores.iter().map(|&x| sigmoid(x)).collect(),
            LossKind::Mse => self.word_scores.to_vec(),
        }
    }
}

/// Loss, gradients and optionally the input gradient for one utterance.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Sum of elementwise losses.
    pub loss_sum: f64,
    /// Number of loss elements: words, or frames for the framewise location.
    pub count: usize,
    pub gradients: Gradients,
    pub input_gradient: Option<Array2<f64>>,
}

enum Trace {
    Frames {
        encoder: Vec<LayerTrace>,
        decoder: Vec<LayerTrace>,
        frame_raw: Array2<f64>,
    },
    Intermediate {
        encoder: Vec<LayerTrace>,
        hidden: Array2<f64>,
        decoder: Vec<LayerTrace>,
    },
    Prehoc {
        segments: Vec<(Vec<LayerTrace>, Array2<f64>)>,
        decoder: Vec<LayerTrace>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProminenceModel {
    pub config: ModelConfig,
    pub encoder: Vec<Conv1d>,
    pub decoder: Vec<Conv1d>,
}

impl ProminenceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let n = config.layers_per_stack;
        let encoder = (0..n)
            .map(|i| {
                let input = if i == 0 { config.input_channels } else { config.channels };
                Conv1d::new(input, config.channels, k, &mut rng)
            })
            .collect();
        let decoder = (0..n)
            .map(|i| {
                let output = if i + 1 == n { 1 } else { config.channels };
                Conv1d::new(config.channels, output, k, &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &Conv1d> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv1d> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    /// Flat parameter slices: weight then bias of each encoder then decoder layer.
    pub fn parameters(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// (encoder layers, decoder layers, layers applied at frame resolution).
    pub fn layer_counts(&self) -> (usize, usize, usize) {
        let frame_layers = match self.config.location {
            Location::Framewise | Location::Posthoc => self.encoder.len() + self.decoder.len(),
            Location::Intermediate | Location::Prehoc => self.encoder.len(),
        };
        (self.encoder.len(), self.decoder.len(), frame_layers)
    }

    fn check_input(&self, mel: ArrayView2<f64>, spans: &[WordSpan]) -> Result<()> {
        if spans.is_empty() {
            return Err(Error::Model("utterance has no words".into()));
        }
        if mel.nrows() != self.config.input_channels {
            return Err(Error::Config(format!(
                "input has {} channels, model expects {}",
                mel.nrows(),
                self.config.input_channels
            )));
        }
        validate_spans(spans, mel.ncols())
    }

    fn run(&self, mel: ArrayView2<f64>, spans: &[WordSpan]) -> Result<(Array1<f64>, Trace)> {
        self.check_input(mel, spans)?;
        let method = self.config.method;
        Ok(match self.config.location {
            Location::Framewise | Location::Posthoc => {
                let (hidden, encoder) = stack_forward(&self.encoder, mel, true);
                let (frame_raw, decoder) = stack_forward(&self.decoder, hidden.view(), false);
                let word_raw = downsample(frame_raw.view(), spans, method)?.row(0).to_owned();
                (
                    word_raw,
                    Trace::Frames {
                        encoder,
                        decoder,
                        frame_raw,
                    },
                )
            }
            Location::Intermediate => {
                let (hidden, encoder) = stack_forward(&self.encoder, mel, true);
                let words = downsample(hidden.view(), spans, method)?;
                let (word_raw, decoder) = stack_forward(&self.decoder, words.view(), false);
                (
                    word_raw.row(0).to_owned(),
                    Trace::Intermediate {
                        encoder,
                        hidden,
                        decoder,
                    },
                )
            }
            Location::Prehoc => {
                let mut words = Array2::zeros((self.config.channels, spans.len()));
                let mut segments = Vec::with_capacity(spans.len());
                for (w, span) in spans.iter().enumerate() {
                    let segment = mel.slice(s![.., span.start_frame..span.end_frame]);
                    let (hidden, encoder) = stack_forward(&self.encoder, segment, true);
                    let whole = [WordSpan::new("", 0, span.len())];
                    let pooled = downsample(hidden.view(), &whole, method)?;
                    words.column_mut(w).assign(&pooled.column(0));
                    segments.push((encoder, hidden));
                }
                let (word_raw, decoder) = stack_forward(&self.decoder, words.view(), false);
                (word_raw.row(0).to_owned(), Trace::Prehoc { segments, decoder })
            }
        })
    }

    fn bound(&self, raw: Array1<f64>) -> Array1<f64> {
        match self.config.loss {
            LossKind::Bce => raw,
            LossKind::Mse => raw.mapv(sigmoid),
        }
    }

    pub fn forward(&self, mel: ArrayView2<f64>, spans: &[WordSpan]) -> Result<ModelOutput> {
        let (word_raw, trace) = self.run(mel, spans)?;
        let frame_scores = match trace {
            Trace::Frames { frame_raw, .. } => Some(self.bound(frame_raw.row(0).to_owned())),
            _ => None,
        };
        Ok(ModelOutput {
            word_scores: self.bound(word_raw),
            frame_scores,
            loss: self.config.loss,
        })
    }

    /// Encoder activations `[C × T]` at frame resolution. For the prehoc
    /// location each word is encoded separately and gap frames stay zero.
    pub fn encoder_activations(&self, mel: ArrayView2<f64>, spans: &[WordSpan]) -> Result<Array2<f64>> {
        self.check_input(mel, spans)?;
        if self.config.location != Location::Prehoc {
            return Ok(stack_forward(&self.encoder, mel, true).0);
        }
        let mut out = Array2::zeros((self.config.channels, mel.ncols()));
        for span in spans {
            let segment = mel.slice(s![.., span.start_frame..span.end_frame]);
            let (hidden, _) = stack_forward(&self.encoder, segment, true);
            out.slice_mut(s![.., span.start_frame..span.end_frame]).assign(&hidden);
        }
        Ok(out)
    }

    /// Loss against word targets and its gradients.
    ///
    /// The framewise location is trained against frame targets interpolated
    /// from the word targets; every other location is trained at word level.
    pub fn loss_and_gradients(
        &self,
        mel: ArrayView2<f64>,
        spans: &[WordSpan],
        targets: &[f64],
        input_gradient: bool,
    ) -> Result<StepOutput> {
        if targets.len() != spans.len() {
            return Err(Error::Dimension(format!(
                "{} targets for {} words",
                targets.len(),
                spans.len()
            )));
        }
        let (word_raw, trace) = self.run(mel, spans)?;
        let loss_kind = self.config.loss;
        let method = self.config.method;
        let mut gradients = Gradients::zeros_like(self);
        let (encoder_grads, decoder_grads) = gradients.layers.split_at_mut(self.encoder.len());

        let word_loss = |raw: &Array1<f64>| -> (f64, Array2<f64>) {
            let mut sum = 0.0;
            let mut grad = Array2::zeros((1, raw.len()));
            for (w, (&x, &t)) in raw.iter().zip(targets).enumerate() {
                let (l, g) = elementwise(loss_kind, x, t);
                sum += l;
                grad[[0, w]] = g;
            }
            (sum, grad)
        };

        let (loss_sum, count, input_grad) = match trace {
            Trace::Frames {
                encoder,
                decoder,
                frame_raw,
            } => {
                let (loss_sum, count, grad_frames) = if self.config.location == Location::Framewise {
                    let frame_targets = upsample_targets(targets, spans, mel.ncols())?;
                    let mut sum = 0.0;
                    let mut grad = Array2::zeros(frame_raw.dim());
                    for (t, (&x, &y)) in frame_raw.row(0).iter().zip(&frame_targets).enumerate() {
                        let (l, g) = elementwise(loss_kind, x, y);
                        sum += l;
                        grad[[0, t]] = g;
                    }
                    (sum, frame_targets.len(), grad)
                } else {
                    let (sum, grad_words) = word_loss(&word_raw);
                    let grad = downsample_backward(frame_raw.view(), spans, method, grad_words.view());
                    (sum, spans.len(), grad)
                };
                let grad_hidden = stack_backward(&self.decoder, &decoder, grad_frames, decoder_grads, true)
                    .expect("decoder input gradient");
                let input = stack_backward(&self.encoder, &encoder, grad_hidden, encoder_grads, input_gradient);
                (loss_sum, count, input)
            }
            Trace::Intermediate {
                encoder,
                hidden,
                decoder,
            } => {
                let (loss_sum, grad_words) = word_loss(&word_raw);
                let grad_pooled = stack_backward(&self.decoder, &decoder, grad_words, decoder_grads, true)
                    .expect("decoder input gradient");
                let grad_hidden = downsample_backward(hidden.view(), spans, method, grad_pooled.view());
                let input = stack_backward(&self.encoder, &encoder, grad_hidden, encoder_grads, input_gradient);
                (loss_sum, spans.len(), input)
            }
            Trace::Prehoc { segments, decoder } => {
                let (loss_sum, grad_words) = word_loss(&word_raw);
                let grad_pooled = stack_backward(&self.decoder, &decoder, grad_words, decoder_grads, true)
                    .expect("decoder input gradient");
                let mut input = input_gradient.then(|| Array2::zeros(mel.dim()));
                for (w, ((traces, hidden), span)) in segments.iter().zip(spans).enumerate() {
                    let whole = [WordSpan::new("", 0, span.len())];
                    let column = grad_pooled.slice(s![.., w..w + 1]);
                    let grad_hidden = downsample_backward(hidden.view(), &whole, method, column);
                    let grad_segment =
                        stack_backward(&self.encoder, traces, grad_hidden, encoder_grads, input_gradient);
                    if let (Some(input), Some(g)) = (input.as_mut(), grad_segment) {
                        input.slice_mut(s![.., span.start_frame..span.end_frame]).assign(&g);
                    }
                }
                (loss_sum, spans.len(), input)
            }
        };
        Ok(StepOutput {
            loss_sum,
            count,
            gradients,
            input_gradient: input_grad,
        })
    }
}
