//! Minimal feedforward network engine: dense layers, ReLU hidden units,
//! inverted dropout, Adam, squared and logistic losses.
//!
//! Batches are row-major `n × width` slices. Layer weights are stored
//! `out × in` so a batch forward pass is one gemm per layer.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, Rng};

/// Probabilities are clamped to this band inside the logistic loss.
pub const LOGISTIC_CLAMP: f64 = 1e-7;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Minimum epoch-loss improvement that resets the patience counter.
pub const EARLY_STOP_TOL: f64 = 1e-6;

const CHECKPOINT_MAGIC: &str = "DYNGPI-MLP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Squared,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub output: OutputActivation,
    /// Rate used by [`Mlp::forward`] in train mode.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output: OutputActivation, seed: u64) -> Self {
        Self {
            layer_widths,
            output,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs input, at least one hidden and an output width; got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: {:?}",
                self.layer_widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without an improvement of the monitored
    /// loss of at least [`EARLY_STOP_TOL`]; 0 disables early stopping.
    pub patience: usize,
    pub dropout_rate: f64,
    /// Share of examples held out to monitor early stopping instead of the
    /// training loss; the best-scoring parameters are kept. 0 disables.
    #[serde(default)]
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in [0, 0.5), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Number of held-out examples out of `n`; at least one training
    /// example always remains.
    pub fn validation_len(&self, n: usize) -> usize {
        if self.validation_fraction == 0.0 || self.patience == 0 || n < 4 {
            return 0;
        }
        ((self.validation_fraction * n as f64).round() as usize).clamp(1, n - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Parameter-shaped gradient (or optimizer moment) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(m: &Mlp) -> Self {
        Self {
            layers: m
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(x, y)| *x += y);
            b.iter_mut().zip(ob).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|v| *v == 0.0))
    }
}

/// Activations kept from a batch forward pass for backpropagation.
#[derive(Debug)]
pub struct ForwardCache {
    n: usize,
    /// `inputs[l]` is the input of layer `l` (after ReLU and dropout).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
    /// Inverted dropout multipliers per hidden layer, when dropout is on.
    masks: Vec<Option<Vec<f64>>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn batch_len(&self) -> usize {
        self.n
    }
}

pub fn mlp_init(spec: MlpSpec) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            Layer {
                weights,
                biases: vec![0.0; fan_out],
                fan_in,
                fan_out,
            }
        })
        .collect();
    Ok(Mlp { spec, layers })
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.spec.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.spec.layer_widths.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied for a network with {}",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn check_batch(&self, x: &[f64]) -> Result<usize> {
        let width = self.input_width();
        if x.len() % width != 0 {
            return Err(Error::Shape(format!(
                "batch of {} values is not a multiple of input width {width}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network input".into()));
        }
        Ok(x.len() / width)
    }

    /// Single-example forward pass. Dropout at `spec.dropout_rate` is
    /// applied only when `train_mode` is set.
    pub fn forward(&self, x: &[f64], train_mode: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "input of length {} for a network of input width {}",
                x.len(),
                self.input_width()
            )));
        }
        let dropout = (train_mode && self.spec.dropout_rate > 0.0)
            .then_some((self.spec.dropout_rate, rng));
        Ok(self.forward_cached(x, dropout)?.output)
    }

    /// Eval-mode forward pass over a row-major batch.
    pub fn predict_batch(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, None)?.output)
    }

    pub fn forward_cached(
        &self,
        x: &[f64],
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<ForwardCache> {
        let n = self.check_batch(x)?;
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth - 1);
        let mut masks = Vec::with_capacity(depth - 1);
        inputs.push(x.to_vec());
        let mut output = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(n * layer.fan_out);
            for _ in 0..n {
                z.extend_from_slice(&layer.biases);
            }
            gemm(
                n,
                layer.fan_in,
                layer.fan_out,
                &inputs[idx],
                false,
                &layer.weights,
                true,
                &mut z,
                1.0,
            );
            if idx + 1 == depth {
                if self.spec.output == OutputActivation::Logistic {
                    z.iter_mut().for_each(|v| *v = logistic(*v));
                }
                output = z;
                break;
            }
            let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = 1.0 / (1.0 - *rate);
                    let m: Vec<f64> = (0..a.len())
                        .map(|_| if rng.uniform() < *rate { 0.0 } else { keep })
                        .collect();
                    a.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            pre.push(z);
            masks.push(mask);
            inputs.push(a);
        }
        Ok(ForwardCache {
            n,
            inputs,
            pre,
            masks,
            output,
        })
    }

    /// Backpropagates `d_output` (gradient of the loss with respect to the
    /// pre-activation output for logistic heads, or the output itself for
    /// identity heads). Returns parameter gradients and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64]) -> (Gradients, Vec<f64>) {
        let n = cache.n;
        let depth = self.layers.len();
        let mut grads = Vec::with_capacity(depth);
        let mut delta = d_output.to_vec();
        for idx in (0..depth).rev() {
            let layer = &self.layers[idx];
            let mut gw = vec![0.0; layer.weights.len()];
            gemm(
                layer.fan_out,
                n,
                layer.fan_in,
                &delta,
                true,
                &cache.inputs[idx],
                false,
                &mut gw,
                0.0,
            );
            let mut gb = vec![0.0; layer.fan_out];
            for row in delta.chunks_exact(layer.fan_out) {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            let mut d_in = vec![0.0; n * layer.fan_in];
            gemm(
                n,
                layer.fan_out,
                layer.fan_in,
                &delta,
                false,
                &layer.weights,
                false,
                &mut d_in,
                0.0,
            );
            grads.push((gw, gb));
            if idx > 0 {
                let h = idx - 1;
                if let Some(mask) = &cache.masks[h] {
                    d_in.iter_mut().zip(mask).for_each(|(d, k)| *d *= k);
                }
                d_in.iter_mut()
                    .zip(&cache.pre[h])
                    .for_each(|(d, z)| {
                        if *z <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            delta = d_in;
        }
        grads.reverse();
        (Gradients { layers: grads }, delta)
    }

    /// Writes the versioned checkpoint: a text header line, a JSON line with
    /// the spec, then every parameter as little-endian f64 in layer order
    /// (weights row-major `out × in`, then biases).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(
            format!(
                "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} params={}\n",
                self.parameter_count()
            )
            .as_bytes(),
        );
        buf.extend_from_slice(serde_json::to_string(&self.spec).unwrap().as_bytes());
        buf.push(b'\n');
        for v in self.parameters() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = bytes.splitn(3, |b| *b == b'\n');
        let header = std::str::from_utf8(lines.next().unwrap_or_default())
            .map_err(|e| parse_err(1, e.to_string()))?;
        let expected = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} ");
        if !header.starts_with(&expected) {
            return Err(parse_err(1, format!("unrecognised header '{header}'")));
        }
        let spec_line = lines
            .next()
            .ok_or_else(|| parse_err(2, "missing spec line".into()))?;
        let spec: MlpSpec =
            serde_json::from_slice(spec_line).map_err(|e| parse_err(2, e.to_string()))?;
        let payload = lines.next().unwrap_or_default();
        let mut m = mlp_init(spec)?;
        if payload.len() != m.parameter_count() * 8 {
            return Err(parse_err(
                3,
                format!(
                    "payload holds {} bytes, expected {}",
                    payload.len(),
                    m.parameter_count() * 8
                ),
            ));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        m.set_parameters(&flat)?;
        Ok(m)
    }
}

/// Mean loss over the batch and its gradient with respect to the last
/// pre-activation (logistic) or the output (squared).
pub fn loss_and_delta(loss: Loss, output: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = output.len().max(1) as f64;
    match loss {
        Loss::Squared => {
            let mut total = 0.0;
            let delta = output
                .iter()
                .zip(targets)
                .map(|(o, t)| {
                    let r = o - t;
                    total += r * r;
                    2.0 * r / n
                })
                .collect();
            (total / n, delta)
        }
        Loss::Logistic => {
            let mut total = 0.0;
            let delta = output
                .iter()
                .zip(targets)
                .map(|(p, t)| {
                    let clamped = p.clamp(LOGISTIC_CLAMP, 1.0 - LOGISTIC_CLAMP);
                    total -= t * clamped.ln() + (1.0 - t) * (1.0 - clamped).ln();
                    if clamped == *p {
                        (p - t) / n
                    } else {
                        0.0
                    }
                })
                .collect();
            (total / n, delta)
        }
    }
}

fn check_loss_head(m: &Mlp, loss: Loss) -> Result<()> {
    let ok = matches!(
        (loss, m.spec.output),
        (Loss::Squared, OutputActivation::Identity) | (Loss::Logistic, OutputActivation::Logistic)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{loss:?} loss needs the matching output head, network has {:?}",
            m.spec.output
        )))
    }
}

/// Analytic gradient of the mean batch loss with dropout disabled.
pub fn gradient(m: &Mlp, inputs: &[f64], targets: &[f64], loss: Loss) -> Result<Gradients> {
    check_loss_head(m, loss)?;
    let cache = m.forward_cached(inputs, None)?;
    if targets.len() != cache.output.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} outputs",
            targets.len(),
            cache.output.len()
        )));
    }
    let (_, delta) = loss_and_delta(loss, &cache.output, targets);
    Ok(m.backward(&cache, &delta).0)
}

/// Mean batch loss in eval mode.
pub fn evaluate_loss(m: &Mlp, inputs: &[f64], targets: &[f64], loss: Loss) -> Result<f64> {
    let out = m.predict_batch(inputs)?;
    Ok(loss_and_delta(loss, &out, targets).0)
}

#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    t: i32,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(m: &Mlp, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            t: 0,
            first: Gradients::zeros_like(m),
            second: Gradients::zeros_like(m),
        }
    }

    pub fn step(&mut self, m: &mut Mlp, g: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let lr = self.learning_rate;
        for (li, layer) in m.layers.iter_mut().enumerate() {
            let (gw, gb) = &g.layers[li];
            let (m1w, m1b) = &mut self.first.layers[li];
            let (m2w, m2b) = &mut self.second.layers[li];
            let update = |p: &mut [f64], g: &[f64], m1: &mut [f64], m2: &mut [f64]| {
                for i in 0..p.len() {
                    m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * g[i];
                    m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    p[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + ADAM_EPS);
                }
            };
            update(&mut layer.weights, gw, m1w, m2w);
            update(&mut layer.biases, gb, m1b, m2b);
        }
    }
}

/// Tracks the training-loss plateau rule.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss; true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.patience == 0 {
            return false;
        }
        if loss < self.best - EARLY_STOP_TOL {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    /// Held-out losses when a validation share is configured.
    pub validation_losses: Vec<f64>,
}

/// Mini-batch Adam on the mean batch loss. Rows of `inputs` are examples;
/// `targets` holds `output_width` values per example.
pub fn train(
    mut m: Mlp,
    inputs: &[f64],
    targets: &[f64],
    loss: Loss,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Mlp, TrainReport)> {
    cfg.validate()?;
    check_loss_head(&m, loss)?;
    let width = m.input_width();
    let out_width = m.output_width();
    let n = m.check_batch(inputs)?;
    if n == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if targets.len() != n * out_width {
        return Err(Error::Shape(format!(
            "{} targets for {n} examples of output width {out_width}",
            targets.len()
        )));
    }
    if loss == Loss::Logistic && targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
        return Err(Error::InvalidArgument(
            "logistic loss needs targets in {0, 1}".into(),
        ));
    }
    let mut adam = Adam::new(&m, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..n).collect();
    let n_val = cfg.validation_len(n);
    let mut val_x = Vec::new();
    let mut val_y = Vec::new();
    if n_val > 0 {
        rng.shuffle(&mut order);
        for &i in &order[..n_val] {
            val_x.extend_from_slice(&inputs[i * width..(i + 1) * width]);
            val_y.extend_from_slice(&targets[i * out_width..(i + 1) * out_width]);
        }
        order.drain(..n_val);
    }
    let n_train = order.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut report = TrainReport {
        epochs_run: 0,
        epoch_losses: Vec::new(),
        validation_losses: Vec::new(),
    };
    let mut xb = Vec::new();
    let mut yb = Vec::new();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(&inputs[i * width..(i + 1) * width]);
                yb.extend_from_slice(&targets[i * out_width..(i + 1) * out_width]);
            }
            let dropout = (cfg.dropout_rate > 0.0).then_some((cfg.dropout_rate, &mut *rng));
            let cache = m.forward_cached(&xb, dropout)?;
            let (batch_loss, delta) = loss_and_delta(loss, cache.output(), &yb);
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {batch_loss} at epoch {epoch}"
                )));
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            let (grads, _) = m.backward(&cache, &delta);
            adam.step(&mut m, &grads);
        }
        epoch_loss /= n_train as f64;
        report.epochs_run = epoch + 1;
        report.epoch_losses.push(epoch_loss);
        let monitored = if n_val > 0 {
            let v = evaluate_loss(&m, &val_x, &val_y, loss)?;
            report.validation_losses.push(v);
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, m.parameters()));
            }
            v
        } else {
            epoch_loss
        };
        if stopper.observe(monitored) {
            break;
        }
    }
    if let Some((_, params)) = best {
        m.set_parameters(&params)?;
    }
    if m.parameters().iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("parameters became non-finite".into()));
    }
    Ok((m, report))
}
