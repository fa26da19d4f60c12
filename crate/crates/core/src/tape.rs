//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward call appends one node: the node's index is its variable
//! id, and the value produced lives at the same index. Backward walks the
//! nodes in exact reverse execution order and accumulates gradients
//! additively, so a value consumed k times receives the sum of its k
//! contributions. The tape is single-threaded and lives for one training
//! step.

use crate::entropy::{compressibility_with_grad, soft_entropy_with_grad};
use crate::quant::{quantize_weights_with_scale, QuantizerState};
use crate::tensor::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Conv2d { x: VarId, w: VarId, stride: usize, pad: usize },
    BiasRows { x: VarId, bias: VarId },
    BiasChannels { x: VarId, bias: VarId },
    Relu { x: VarId },
    Reshape { x: VarId },
    Add { a: VarId, b: VarId },
    Scale { x: VarId, factor: f64 },
    SoftmaxCrossEntropy { logits: VarId, labels: Vec<usize> },
    /// Clip to `[0, alpha]`, snap to the level grid when `round`, with
    /// straight-through gradients; `alpha` is a 1-element variable.
    QuantizeSte { x: VarId, alpha: VarId, bits: u8, round: bool },
    /// Clip against a constant threshold; feeds the entropy regularizer.
    ClipTap { x: VarId, hi: f64 },
    /// Symmetric 8-bit weight view; gradient passes straight through.
    QuantizeWeights { w: VarId },
    SoftEntropy { x: VarId, levels: Vec<f64>, temperature: f64, selected: Vec<usize> },
    Compressibility { x: VarId },
}

/// Gradients produced by one backward pass, indexed by variable id.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: VarId) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an owned vector, zeros if the variable was not reached.
    pub fn dense(&self, v: VarId, len: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, val: Tensor) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(node);
        self.vals.push(val);
        id
    }

    /// Record a leaf value (input or parameter).
    pub fn input(&mut self, t: Tensor) -> VarId {
        self.push(Node::Leaf, t)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let val = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.push(Node::Matmul { a, b }, val))
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, TensorError> {
        let (tx, tw) = (&self.vals[x.0], &self.vals[w.0]);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d input", expected: 4, shape: sx.to_vec() });
        }
        if sw.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d kernel", expected: 4, shape: sw.to_vec() });
        }
        if sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d channels",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (h, wd) = (sx[2], sx[3]);
        let (kh, kw) = (sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(TensorError::KernelTooLarge {
                kernel: sw.to_vec(),
                input: sx.to_vec(),
                pad,
            });
        }
        let val = conv2d_forward(tx, tw, stride, pad);
        Ok(self.push(Node::Conv2d { x, w, stride, pad }, val))
    }

    /// `x: [N, M] + bias: [M]`, broadcast over rows.
    pub fn bias_rows(&mut self, x: VarId, bias: VarId) -> Result<VarId, TensorError> {
        let (tx, tb) = (&self.vals[x.0], &self.vals[bias.0]);
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_rows",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let cols = tx.shape()[1];
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % cols])
            .collect();
        let val = Tensor::new(tx.shape().to_vec(), data).expect("bias shape");
        Ok(self.push(Node::BiasRows { x, bias }, val))
    }

    /// `x: [N, C, H, W] + bias: [C]`, broadcast over batch and space.
    pub fn bias_channels(&mut self, x: VarId, bias: VarId) -> Result<VarId, TensorError> {
        let (tx, tb) = (&self.vals[x.0], &self.vals[bias.0]);
        if tx.shape().len() != 4 || tb.shape() != [tx.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_channels",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let plane = tx.shape()[2] * tx.shape()[3];
        let channels = tx.shape()[1];
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[(i / plane) % channels])
            .collect();
        let val = Tensor::new(tx.shape().to_vec(), data).expect("bias shape");
        Ok(self.push(Node::BiasChannels { x, bias }, val))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let val = Tensor::new(tx.shape().to_vec(), data).expect("relu shape");
        self.push(Node::Relu { x }, val)
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId, TensorError> {
        let tx = &self.vals[x.0];
        let val = Tensor::new(shape, tx.data().to_vec())?;
        Ok(self.push(Node::Reshape { x }, val))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let val = Tensor::new(ta.shape().to_vec(), data).expect("add shape");
        Ok(self.push(Node::Add { a, b }, val))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> VarId {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|&v| v * factor).collect();
        let val = Tensor::new(tx.shape().to_vec(), data).expect("scale shape");
        self.push(Node::Scale { x, factor }, val)
    }

    /// Mean over the batch of `-ln softmax(logits)[label]`, in nats.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
    ) -> Result<VarId, TensorError> {
        let tl = &self.vals[logits.0];
        if tl.shape().len() != 2 || tl.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let classes = tl.shape()[1];
        for &l in labels {
            if l >= classes {
                return Err(TensorError::LabelOutOfRange { label: l, classes });
            }
        }
        let probs = softmax_rows(tl);
        let n = labels.len();
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            loss -= probs[row * classes + label].max(f64::MIN_POSITIVE).ln();
        }
        let val = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            Node::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            val,
        ))
    }

    /// Learnable-clip quantization with straight-through gradients.
    ///
    /// With `round = false` the snap step is skipped, leaving the clip
    /// surrogate that the straight-through gradient is exact for.
    pub fn quantize_ste(
        &mut self,
        x: VarId,
        alpha: VarId,
        bits: u8,
        round: bool,
    ) -> Result<VarId, TensorError> {
        let alpha_val = self.vals[alpha.0].item();
        let qs = QuantizerState::new(alpha_val.max(f64::MIN_POSITIVE), bits)
            .expect("validated bits");
        let tx = &self.vals[x.0];
        let data: Vec<f64> = if round {
            tx.data().iter().map(|&v| qs.quantize_value(v)).collect()
        } else {
            tx.data().iter().map(|&v| v.clamp(0.0, alpha_val)).collect()
        };
        let val = Tensor::new(tx.shape().to_vec(), data).expect("quantize shape");
        Ok(self.push(Node::QuantizeSte { x, alpha, bits, round }, val))
    }

    /// Clip to `[0, hi]` with `hi` held constant; gradient is the interior
    /// mask. Used to tap clipped activations for the regularizer without
    /// routing gradient into the clip parameter.
    pub fn clip_tap(&mut self, x: VarId, hi: f64) -> VarId {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|&v| v.clamp(0.0, hi)).collect();
        let val = Tensor::new(tx.shape().to_vec(), data).expect("clip shape");
        self.push(Node::ClipTap { x, hi }, val)
    }

    /// Symmetric 8-bit quantized view of a weight tensor; backward is the
    /// identity into the master copy.
    pub fn quantize_weights(&mut self, w: VarId) -> VarId {
        let tw = &self.vals[w.0];
        let max_abs = tw.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
        let val = quantize_weights_with_scale(tw.data(), scale, tw.shape());
        self.push(Node::QuantizeWeights { w }, val)
    }

    /// Soft entropy in bits over the selected elements of `x`.
    pub fn soft_entropy(
        &mut self,
        x: VarId,
        levels: Vec<f64>,
        temperature: f64,
        selected: Vec<usize>,
    ) -> Result<VarId, TensorError> {
        if selected.is_empty() {
            return Err(TensorError::EmptyInput { op: "soft_entropy" });
        }
        let tx = &self.vals[x.0];
        let samples: Vec<f64> = selected.iter().map(|&i| tx.data()[i]).collect();
        let (value, _) = soft_entropy_with_grad(&samples, &levels, temperature, false);
        let val = Tensor::scalar(value);
        Ok(self.push(
            Node::SoftEntropy { x, levels, temperature, selected },
            val,
        ))
    }

    /// l1/l2 compressibility of all elements of `x`.
    pub fn compressibility(&mut self, x: VarId) -> VarId {
        let tx = &self.vals[x.0];
        let (value, _) = compressibility_with_grad(tx.data(), false);
        self.push(Node::Compressibility { x }, Tensor::scalar(value))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively
    /// over all uses of each variable.
    pub fn backward(&self, loss: VarId) -> Result<Grads, TensorError> {
        if !self.vals[loss.0].is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.vals[loss.0].shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id] {
            Node::Leaf => {}
            Node::Matmul { a, b } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC * B^T
                let da = matmul_nt(dy, tb.data(), m, n, k);
                // dB = A^T * dC
                let db = matmul_tn(ta.data(), dy, m, k, n);
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Node::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = conv2d_backward(
                    &self.vals[x.0],
                    &self.vals[w.0],
                    &self.vals[id],
                    dy,
                    *stride,
                    *pad,
                );
                accumulate(grads, *x, &dx);
                accumulate(grads, *w, &dw);
            }
            Node::BiasRows { x, bias } => {
                accumulate(grads, *x, dy);
                let cols = self.vals[bias.0].len();
                let mut db = vec![0.0; cols];
                for (i, &g) in dy.iter().enumerate() {
                    db[i % cols] += g;
                }
                accumulate(grads, *bias, &db);
            }
            Node::BiasChannels { x, bias } => {
                accumulate(grads, *x, dy);
                let channels = self.vals[bias.0].len();
                let plane = {
                    let s = self.vals[x.0].shape();
                    s[2] * s[3]
                };
                let mut db = vec![0.0; channels];
                for (i, &g) in dy.iter().enumerate() {
                    db[(i / plane) % channels] += g;
                }
                accumulate(grads, *bias, &db);
            }
            Node::Relu { x } => {
                let tx = &self.vals[x.0];
                // Subgradient 0 at exactly x = 0.
                let dx: Vec<f64> = tx
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Node::Reshape { x } => accumulate(grads, *x, dy),
            Node::Add { a, b } => {
                accumulate(grads, *a, dy);
                accumulate(grads, *b, dy);
            }
            Node::Scale { x, factor } => {
                let dx: Vec<f64> = dy.iter().map(|&g| g * factor).collect();
                accumulate(grads, *x, &dx);
            }
            Node::SoftmaxCrossEntropy { logits, labels } => {
                let tl = &self.vals[logits.0];
                let classes = tl.shape()[1];
                let n = labels.len();
                let mut probs = softmax_rows(tl);
                for (row, &label) in labels.iter().enumerate() {
                    probs[row * classes + label] -= 1.0;
                }
                let scale = dy[0] / n as f64;
                for p in &mut probs {
                    *p *= scale;
                }
                accumulate(grads, *logits, &probs);
            }
            Node::QuantizeSte { x, alpha, .. } => {
                let tx = &self.vals[x.0];
                let a = self.vals[alpha.0].item();
                let mut dx = vec![0.0; tx.len()];
                let mut dalpha = 0.0;
                for (i, &v) in tx.data().iter().enumerate() {
                    if v >= a {
                        dalpha += dy[i];
                    } else if v > 0.0 {
                        dx[i] = dy[i];
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *alpha, &[dalpha]);
            }
            Node::ClipTap { x, hi } => {
                let tx = &self.vals[x.0];
                let dx: Vec<f64> = tx
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 && v < *hi { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Node::QuantizeWeights { w } => accumulate(grads, *w, dy),
            Node::SoftEntropy { x, levels, temperature, selected } => {
                let tx = &self.vals[x.0];
                let samples: Vec<f64> = selected.iter().map(|&i| tx.data()[i]).collect();
                let (_, g) = soft_entropy_with_grad(&samples, levels, *temperature, true);
                let g = g.expect("gradient requested");
                let mut dx = vec![0.0; tx.len()];
                for (slot, &i) in selected.iter().enumerate() {
                    dx[i] += g[slot] * dy[0];
                }
                accumulate(grads, *x, &dx);
            }
            Node::Compressibility { x } => {
                let tx = &self.vals[x.0];
                let (_, g) = compressibility_with_grad(tx.data(), true);
                let dx: Vec<f64> = g
                    .expect("gradient requested")
                    .iter()
                    .map(|v| v * dy[0])
                    .collect();
                accumulate(grads, *x, &dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: VarId, contribution: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            debug_assert_eq!(g.len(), contribution.len());
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => grads[v.0] = Some(contribution.to_vec()),
    }
}

/// C[m,n] = A[m,k] * B[k,n]
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..n {
                acc += a[i * n + p] * b[j * n + p];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let classes = t.shape()[1];
    let mut out = vec![0.0; t.len()];
    for row in 0..t.shape()[0] {
        let logits = &t.data()[row * classes..(row + 1) * classes];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            out[row * classes + j] = e;
            sum += e;
        }
        for j in 0..classes {
            out[row * classes + j] /= sum;
        }
    }
    out
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let mut out = Tensor::zeros(vec![n, f, oh, ow]);
    let od = out.shape().to_vec();
    let data = out.data_mut();
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                acc += x.data()[x.idx4(ni, ci, iy - pad, ix - pad)]
                                    * w.data()[w.idx4(fi, ci, ky, kx)];
                            }
                        }
                    }
                    data[((ni * od[1] + fi) * od[2] + oy) * od[3] + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    out: &Tensor,
    dy: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[((ni * f + fi) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                let xi = x.idx4(ni, ci, iy - pad, ix - pad);
                                let wi = w.idx4(fi, ci, ky, kx);
                                dx[xi] += g * w.data()[wi];
                                dw[wi] += g * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// One SGD step with momentum and weight decay:
/// `v <- m*v + (g + wd*theta); theta <- theta - lr*v`.
pub fn sgd_step(
    theta: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(theta.len(), velocity.len());
    for i in 0..theta.len() {
        velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * theta[i];
        theta[i] -= lr * velocity[i];
    }
}
