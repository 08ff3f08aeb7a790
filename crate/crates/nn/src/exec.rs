//! Forward and backward execution of a [`Model`].

use rand::{Rng, RngCore};

use crate::error::{NnError, Result};
use crate::graph::{Activation, Op, Padding};
use crate::kernels::{self, sgemm, Window};
use crate::model::Model;
use crate::tensor::Tensor;

/// Per-node state saved by a training forward pass for the backward pass.
#[derive(Debug)]
enum Aux {
    None,
    MaxArg(Vec<u32>),
    /// `xhat` is present for batch-statistics normalization only.
    Norm {
        xhat: Option<Vec<f32>>,
        inv_std: Vec<f32>,
    },
    Mask(Vec<f32>),
    /// Depthwise stage output of a separable convolution.
    Depthwise(Vec<f32>),
}

/// Activations recorded by [`Model::forward_train`].
#[derive(Debug)]
pub struct Tape {
    outputs: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("tape is never empty")
    }

    pub fn node_output(&self, node: usize) -> &Tensor {
        &self.outputs[node]
    }
}

/// Seed gradient for [`Model::backward`].
#[derive(Debug)]
pub enum OutputGrad {
    /// Gradient with respect to the final layer's output.
    Output(Tensor),
    /// Gradient with respect to the final layer's pre-activation (e.g. the
    /// fused softmax + cross-entropy gradient `p - y`).
    PreActivation(Tensor),
}

/// Weight gradients, `None` for buffers and for frozen layers.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<Option<Vec<f32>>>>,
}

impl Gradients {
    pub fn get(&self, node: usize, param: usize) -> Option<&[f32]> {
        self.grads.get(node)?.get(param)?.as_deref()
    }

    pub fn nodes(&self) -> usize {
        self.grads.len()
    }

    pub fn params(&self, node: usize) -> usize {
        self.grads[node].len()
    }

    /// Global L2 norm over every present gradient.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

struct BnUpdate {
    node: usize,
    mean: Vec<f32>,
    var: Vec<f32>,
}

fn window(input: &[usize], kernel: [usize; 2], strides: [usize; 2], padding: Padding) -> Window {
    let rows = padding
        .resolve(input[0], kernel[0], strides[0])
        .expect("validated by shape inference");
    let cols = padding
        .resolve(input[1], kernel[1], strides[1])
        .expect("validated by shape inference");
    Window {
        in_h: input[0],
        in_w: input[1],
        channels: input[2],
        out_h: rows.output,
        out_w: cols.output,
        k_h: kernel[0],
        k_w: kernel[1],
        stride_h: strides[0],
        stride_w: strides[1],
        pad_top: rows.pad_before,
        pad_left: cols.pad_before,
    }
}

fn pointwise_window(shape: &[usize]) -> Window {
    window(shape, [1, 1], [1, 1], Padding::Valid)
}

fn apply_activation(act: Activation, y: &mut [f32], width: usize) {
    match act {
        Activation::Linear => {}
        Activation::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => kernels::softmax_rows(y, width),
    }
}

fn activation_backward(act: Activation, dy: Tensor, y: &Tensor, width: usize) -> Tensor {
    match act {
        Activation::Linear => dy,
        Activation::Relu => {
            let mut dz = dy;
            for (d, v) in dz.data_mut().iter_mut().zip(y.data()) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
            dz
        }
        Activation::Softmax => {
            let mut dz = dy;
            for (drow, yrow) in dz.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                let dot: f32 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (d, p) in drow.iter_mut().zip(yrow) {
                    *d = p * (*d - dot);
                }
            }
            dz
        }
    }
}

fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

impl Model {
    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let want = self.input_shape();
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(NnError::Shape(format!(
                "model expects [batch, {}, {}, {}] input, got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        Ok(x.batch())
    }

    /// Inference: dropout off, batch-norm on moving statistics.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let n = self.graph().len();
        // free intermediates after their last consumer
        let mut last_use = vec![0usize; n];
        for (i, node) in self.graph().nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = i;
            }
        }
        let mut outputs: Vec<Option<Tensor>> = vec![None; n];
        outputs[0] = Some(x.clone());
        for i in 1..n {
            let inputs: Vec<&Tensor> = self.graph().nodes[i]
                .inputs
                .iter()
                .map(|&j| outputs[j].as_ref().expect("consumed before last use"))
                .collect();
            let (y, _, _) = self.eval_node(i, &inputs, batch, None)?;
            outputs[i] = Some(y);
            for &j in &self.graph().nodes[i].inputs {
                if last_use[j] == i {
                    outputs[j] = None;
                }
            }
        }
        Ok(outputs.pop().flatten().expect("output computed"))
    }

    /// Runs [`Model::predict`] in chunks of `batch_size` samples.
    pub fn predict_batched(&self, x: &Tensor, batch_size: usize) -> Result<Tensor> {
        let total = self.check_input(x)?;
        let per = x.sample_len();
        let mut out: Vec<f32> = Vec::new();
        let mut start = 0;
        while start < total {
            let end = (start + batch_size.max(1)).min(total);
            let chunk = Tensor::from_vec(
                &with_batch(end - start, &self.input_shape()),
                x.data()[start * per..end * per].to_vec(),
            )?;
            let y = self.predict(&chunk)?;
            out.extend_from_slice(y.data());
            start = end;
        }
        let out_shape = self.shapes().last().expect("non-empty graph");
        Tensor::from_vec(&with_batch(total, out_shape), out)
    }

    /// Training-mode forward pass. Dropout is active and trainable
    /// batch-norm layers normalize with batch statistics and update their
    /// moving averages; frozen batch-norm layers stay in inference mode.
    pub fn forward_train<R: Rng>(&mut self, x: &Tensor, rng: &mut R) -> Result<Tape> {
        let batch = self.check_input(x)?;
        let n = self.graph().len();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        let mut updates = Vec::new();
        outputs.push(x.clone());
        aux.push(Aux::None);
        for i in 1..n {
            let inputs: Vec<&Tensor> = self.graph().nodes[i]
                .inputs
                .iter()
                .map(|&j| &outputs[j])
                .collect();
            let (y, a, upd) = self.eval_node(i, &inputs, batch, Some(&mut *rng as &mut dyn RngCore))?;
            if let Some(u) = upd {
                updates.push(u);
            }
            outputs.push(y);
            aux.push(a);
        }
        for u in updates {
            let Op::BatchNorm { momentum, .. } = self.graph().nodes[u.node].op else {
                unreachable!("updates come from batch-norm layers")
            };
            let mi = self.specs(u.node).iter().position(|s| s.name == "moving_mean").expect("bn has moving mean");
            let params = self.params_mut(u.node);
            for (m, v) in params[mi].data_mut().iter_mut().zip(&u.mean) {
                *m = *m * momentum + v * (1.0 - momentum);
            }
            for (m, v) in params[mi + 1].data_mut().iter_mut().zip(&u.var) {
                *m = *m * momentum + v * (1.0 - momentum);
            }
        }
        Ok(Tape { outputs, aux })
    }

    /// Whether a gradient must flow into each node: true when the node or
    /// anything upstream of it is trainable.
    fn grad_flow(&self) -> Vec<bool> {
        let mut flow = vec![false; self.graph().len()];
        for (i, node) in self.graph().nodes.iter().enumerate() {
            flow[i] = self.is_trainable(i) || node.inputs.iter().any(|&j| flow[j]);
        }
        flow
    }

    fn eval_node(
        &self,
        i: usize,
        inputs: &[&Tensor],
        batch: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Tensor, Aux, Option<BnUpdate>)> {
        let node = &self.graph().nodes[i];
        let in_shape = &self.shapes()[node.inputs[0]];
        let out_shape = &self.shapes()[i];
        let full_out = with_batch(batch, out_shape);
        let x = inputs[0];
        let params = self.params(i);
        let training = rng.is_some();
        let mut aux = Aux::None;
        let mut update = None;
        let mut y: Vec<f32> = match &node.op {
            Op::Input => unreachable!("input is not evaluated"),
            Op::Conv2d {
                filters,
                kernel,
                strides,
                padding,
                use_bias,
                ..
            } => {
                let g = window(in_shape, *kernel, *strides, *padding);
                let bias = use_bias.then(|| params[1].data());
                kernels::conv2d_forward(x.data(), batch, &g, params[0].data(), bias, *filters)
            }
            Op::SeparableConv2d {
                filters,
                kernel,
                strides,
                padding,
                use_bias,
                ..
            } => {
                let g = window(in_shape, *kernel, *strides, *padding);
                let d = kernels::depthwise_forward(x.data(), batch, &g, params[0].data());
                let gp = pointwise_window(&[g.out_h, g.out_w, g.channels]);
                let bias = use_bias.then(|| params[2].data());
                let y = kernels::conv2d_forward(&d, batch, &gp, params[1].data(), bias, *filters);
                if training {
                    aux = Aux::Depthwise(d);
                }
                y
            }
            Op::BatchNorm {
                epsilon,
                scale,
                center,
                ..
            } => {
                let c = *in_shape.last().expect("bn input has channels");
                let mut k = 0;
                let gamma = if *scale {
                    k += 1;
                    Some(params[k - 1].data())
                } else {
                    None
                };
                let beta = if *center {
                    k += 1;
                    Some(params[k - 1].data())
                } else {
                    None
                };
                let batch_stats = training && self.is_trainable(i);
                let (mean, var) = if batch_stats {
                    let (m, v) = kernels::channel_moments(x.data(), c);
                    update = Some(BnUpdate {
                        node: i,
                        mean: m.clone(),
                        var: v.clone(),
                    });
                    (m, v)
                } else {
                    (params[k].data().to_vec(), params[k + 1].data().to_vec())
                };
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                let mut xhat = x.data().to_vec();
                for px in xhat.chunks_mut(c) {
                    for ((v, m), s) in px.iter_mut().zip(&mean).zip(&inv_std) {
                        *v = (*v - m) * s;
                    }
                }
                let mut y = xhat.clone();
                for px in y.chunks_mut(c) {
                    for ch in 0..c {
                        let g = gamma.map_or(1.0, |g| g[ch]);
                        let b = beta.map_or(0.0, |b| b[ch]);
                        px[ch] = px[ch] * g + b;
                    }
                }
                if training {
                    aux = Aux::Norm {
                        xhat: batch_stats.then_some(xhat),
                        inv_std,
                    };
                }
                y
            }
            Op::Activation { .. } => x.data().to_vec(),
            Op::MaxPool2d {
                pool,
                strides,
                padding,
            } => {
                let g = window(in_shape, *pool, *strides, *padding);
                let (y, arg) = kernels::max_pool_forward(x.data(), batch, &g);
                if training {
                    aux = Aux::MaxArg(arg);
                }
                y
            }
            Op::AvgPool2d {
                pool,
                strides,
                padding,
            } => {
                let g = window(in_shape, *pool, *strides, *padding);
                kernels::avg_pool_forward(x.data(), batch, &g)
            }
            Op::GlobalAvgPool => {
                let c = in_shape[2];
                let hw = in_shape[0] * in_shape[1];
                let mut y = vec![0.0f32; batch * c];
                for n in 0..batch {
                    let out = &mut y[n * c..][..c];
                    for px in x.sample(n).chunks(c) {
                        for (o, v) in out.iter_mut().zip(px) {
                            *o += *v;
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= hw as f32);
                }
                y
            }
            Op::ZeroPad2d { padding } => {
                let [h, w, c] = [in_shape[0], in_shape[1], in_shape[2]];
                let ow = out_shape[1];
                let mut y = vec![0.0; full_out.iter().product()];
                let out_len = out_shape.iter().product::<usize>();
                for n in 0..batch {
                    let xs = x.sample(n);
                    for r in 0..h {
                        let dst = n * out_len + ((r + padding[0]) * ow + padding[2]) * c;
                        y[dst..dst + w * c].copy_from_slice(&xs[r * w * c..][..w * c]);
                    }
                }
                y
            }
            Op::Flatten => x.data().to_vec(),
            Op::Dense {
                units, use_bias, ..
            } => {
                let fan_in = in_shape[0];
                let mut y = vec![0.0; batch * units];
                sgemm(
                    batch,
                    fan_in,
                    *units,
                    x.data(),
                    (fan_in, 1),
                    params[0].data(),
                    (*units, 1),
                    &mut y,
                    0.0,
                );
                if *use_bias {
                    for row in y.chunks_mut(*units) {
                        for (v, b) in row.iter_mut().zip(params[1].data()) {
                            *v += *b;
                        }
                    }
                }
                y
            }
            Op::Dropout { rate } => match rng {
                Some(rng) if *rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f32> = (0..x.len())
                        .map(|_| if rng.gen::<f32>() < *rate { 0.0 } else { keep })
                        .collect();
                    let y = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                    aux = Aux::Mask(mask);
                    y
                }
                _ => x.data().to_vec(),
            },
            Op::Add => {
                let mut y = x.data().to_vec();
                for other in &inputs[1..] {
                    for (a, b) in y.iter_mut().zip(other.data()) {
                        *a += *b;
                    }
                }
                y
            }
            Op::Concat => {
                let total_c = out_shape[2];
                let pixels = batch * out_shape[0] * out_shape[1];
                let mut y = vec![0.0; pixels * total_c];
                let mut offset = 0;
                for inp in inputs {
                    let c = *inp.shape().last().expect("feature map");
                    for (dst, src) in y.chunks_mut(total_c).zip(inp.data().chunks(c)) {
                        dst[offset..offset + c].copy_from_slice(src);
                    }
                    offset += c;
                }
                y
            }
        };
        let width = *out_shape.last().expect("non-empty shape");
        apply_activation(node.op.activation(), &mut y, width);
        Ok((Tensor::from_vec(&full_out, y)?, aux, update))
    }

    /// Backpropagates through a training tape. Gradients are produced only
    /// for trainable layers, and only the part of the graph that leads to a
    /// trainable layer is visited.
    pub fn backward(&self, tape: &Tape, seed: OutputGrad) -> Result<Gradients> {
        let n = self.graph().len();
        let out = n - 1;
        let flow = self.grad_flow();
        let mut grads: Vec<Vec<Option<Vec<f32>>>> =
            (0..n).map(|i| vec![None; self.specs(i).len()]).collect();
        let mut dys: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let (seed, preact) = match seed {
            OutputGrad::Output(t) => (t, false),
            OutputGrad::PreActivation(t) => (t, true),
        };
        if seed.shape() != tape.output().shape() {
            return Err(NnError::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                seed.shape(),
                tape.output().shape()
            )));
        }
        dys[out] = Some(seed);
        let batch = tape.output().batch();

        for i in (1..n).rev() {
            if !flow[i] {
                continue;
            }
            let Some(dy) = dys[i].take() else { continue };
            let node = &self.graph().nodes[i];
            let y = &tape.outputs[i];
            let out_shape = &self.shapes()[i];
            let width = *out_shape.last().expect("non-empty shape");
            let dz = if i == out && preact {
                dy
            } else {
                activation_backward(node.op.activation(), dy, y, width)
            };
            let in_id = node.inputs[0];
            let x = &tape.outputs[in_id];
            let in_shape = &self.shapes()[in_id];
            let want_dx = flow[in_id];
            let train = self.is_trainable(i);
            let params = self.params(i);
            let mut dx: Option<Vec<f32>> = None;

            match &node.op {
                Op::Input => unreachable!("input has no gradient"),
                Op::Conv2d {
                    filters,
                    kernel,
                    strides,
                    padding,
                    use_bias,
                    ..
                } => {
                    let g = window(in_shape, *kernel, *strides, *padding);
                    let mut dk = train.then(|| vec![0.0; params[0].len()]);
                    let mut db = (train && *use_bias).then(|| vec![0.0; *filters]);
                    dx = want_dx.then(|| vec![0.0; x.len()]);
                    kernels::conv2d_backward(
                        x.data(),
                        batch,
                        &g,
                        params[0].data(),
                        *filters,
                        dz.data(),
                        dx.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    grads[i][0] = dk;
                    if *use_bias {
                        grads[i][1] = db;
                    }
                }
                Op::SeparableConv2d {
                    filters,
                    kernel,
                    strides,
                    padding,
                    use_bias,
                    ..
                } => {
                    let Aux::Depthwise(d) = &tape.aux[i] else {
                        return Err(NnError::Graph("tape lacks depthwise activations".into()));
                    };
                    let g = window(in_shape, *kernel, *strides, *padding);
                    let gp = pointwise_window(&[g.out_h, g.out_w, g.channels]);
                    let mut dpk = train.then(|| vec![0.0; params[1].len()]);
                    let mut db = (train && *use_bias).then(|| vec![0.0; *filters]);
                    let mut dd = (train || want_dx).then(|| vec![0.0; d.len()]);
                    kernels::conv2d_backward(
                        d,
                        batch,
                        &gp,
                        params[1].data(),
                        *filters,
                        dz.data(),
                        dd.as_deref_mut(),
                        dpk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    let mut ddk = train.then(|| vec![0.0; params[0].len()]);
                    dx = want_dx.then(|| vec![0.0; x.len()]);
                    if let Some(dd) = &dd {
                        kernels::depthwise_backward(
                            x.data(),
                            batch,
                            &g,
                            params[0].data(),
                            dd,
                            dx.as_deref_mut(),
                            ddk.as_deref_mut(),
                        );
                    }
                    grads[i][0] = ddk;
                    grads[i][1] = dpk;
                    if *use_bias {
                        grads[i][2] = db;
                    }
                }
                Op::BatchNorm { scale, center, .. } => {
                    let Aux::Norm { xhat, inv_std } = &tape.aux[i] else {
                        return Err(NnError::Graph("tape lacks batch-norm statistics".into()));
                    };
                    let c = width;
                    let gamma = scale.then(|| params[0].data());
                    match xhat {
                        Some(xhat) => {
                            let m = (dz.len() / c) as f32;
                            let mut sum_dz = vec![0.0f32; c];
                            let mut sum_dz_xhat = vec![0.0f32; c];
                            for (dpx, xpx) in dz.data().chunks(c).zip(xhat.chunks(c)) {
                                for ch in 0..c {
                                    sum_dz[ch] += dpx[ch];
                                    sum_dz_xhat[ch] += dpx[ch] * xpx[ch];
                                }
                            }
                            if want_dx {
                                let mut out = vec![0.0; dz.len()];
                                for ((opx, dpx), xpx) in
                                    out.chunks_mut(c).zip(dz.data().chunks(c)).zip(xhat.chunks(c))
                                {
                                    for ch in 0..c {
                                        let g = gamma.map_or(1.0, |g| g[ch]);
                                        opx[ch] = g * inv_std[ch] / m
                                            * (m * dpx[ch] - sum_dz[ch] - xpx[ch] * sum_dz_xhat[ch]);
                                    }
                                }
                                dx = Some(out);
                            }
                            if train {
                                let mut k = 0;
                                if *scale {
                                    grads[i][k] = Some(sum_dz_xhat);
                                    k += 1;
                                }
                                if *center {
                                    grads[i][k] = Some(sum_dz);
                                }
                            }
                        }
                        None => {
                            if want_dx {
                                let mut out = dz.data().to_vec();
                                for px in out.chunks_mut(c) {
                                    for ch in 0..c {
                                        px[ch] *= gamma.map_or(1.0, |g| g[ch]) * inv_std[ch];
                                    }
                                }
                                dx = Some(out);
                            }
                        }
                    }
                }
                Op::Activation { .. } | Op::Flatten => {
                    dx = want_dx.then(|| dz.into_data());
                }
                Op::MaxPool2d {
                    pool,
                    strides,
                    padding,
                } => {
                    if want_dx {
                        let Aux::MaxArg(arg) = &tape.aux[i] else {
                            return Err(NnError::Graph("tape lacks pooling indices".into()));
                        };
                        let g = window(in_shape, *pool, *strides, *padding);
                        let mut out = vec![0.0; x.len()];
                        kernels::max_pool_backward(dz.data(), arg, batch, &g, &mut out);
                        dx = Some(out);
                    }
                }
                Op::AvgPool2d {
                    pool,
                    strides,
                    padding,
                } => {
                    if want_dx {
                        let g = window(in_shape, *pool, *strides, *padding);
                        let mut out = vec![0.0; x.len()];
                        kernels::avg_pool_backward(dz.data(), batch, &g, &mut out);
                        dx = Some(out);
                    }
                }
                Op::GlobalAvgPool => {
                    if want_dx {
                        let c = in_shape[2];
                        let hw = (in_shape[0] * in_shape[1]) as f32;
                        let per = x.sample_len();
                        let mut out = vec![0.0; x.len()];
                        for nb in 0..batch {
                            let grad = &dz.data()[nb * c..][..c];
                            for px in out[nb * per..][..per].chunks_mut(c) {
                                for (o, g) in px.iter_mut().zip(grad) {
                                    *o = g / hw;
                                }
                            }
                        }
                        dx = Some(out);
                    }
                }
                Op::ZeroPad2d { padding } => {
                    if want_dx {
                        let [h, w, c] = [in_shape[0], in_shape[1], in_shape[2]];
                        let ow = out_shape[1];
                        let out_len = dz.sample_len();
                        let mut out = vec![0.0; x.len()];
                        for nb in 0..batch {
                            for r in 0..h {
                                let src = nb * out_len + ((r + padding[0]) * ow + padding[2]) * c;
                                out[(nb * h + r) * w * c..][..w * c]
                                    .copy_from_slice(&dz.data()[src..src + w * c]);
                            }
                        }
                        dx = Some(out);
                    }
                }
                Op::Dense {
                    units, use_bias, ..
                } => {
                    let fan_in = in_shape[0];
                    if train {
                        let mut dw = vec![0.0; fan_in * units];
                        sgemm(
                            fan_in,
                            batch,
                            *units,
                            x.data(),
                            (1, fan_in),
                            dz.data(),
                            (*units, 1),
                            &mut dw,
                            0.0,
                        );
                        grads[i][0] = Some(dw);
                        if *use_bias {
                            let mut db = vec![0.0; *units];
                            for row in dz.data().chunks(*units) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += *v;
                                }
                            }
                            grads[i][1] = Some(db);
                        }
                    }
                    if want_dx {
                        let mut out = vec![0.0; batch * fan_in];
                        sgemm(
                            batch,
                            *units,
                            fan_in,
                            dz.data(),
                            (*units, 1),
                            params[0].data(),
                            (1, *units),
                            &mut out,
                            0.0,
                        );
                        dx = Some(out);
                    }
                }
                Op::Dropout { .. } => {
                    if want_dx {
                        let mut out = dz.into_data();
                        if let Aux::Mask(mask) = &tape.aux[i] {
                            for (d, m) in out.iter_mut().zip(mask) {
                                *d *= m;
                            }
                        }
                        dx = Some(out);
                    }
                }
                Op::Add => {
                    for &j in &node.inputs {
                        if flow[j] {
                            accumulate(&mut dys, j, dz.clone());
                        }
                    }
                }
                Op::Concat => {
                    let total_c = width;
                    let mut offset = 0;
                    for &j in &node.inputs {
                        let c = *self.shapes()[j].last().expect("feature map");
                        if flow[j] {
                            let mut part = Vec::with_capacity(dz.len() / total_c * c);
                            for px in dz.data().chunks(total_c) {
                                part.extend_from_slice(&px[offset..offset + c]);
                            }
                            let t = Tensor::from_vec(tape.outputs[j].shape(), part)?;
                            accumulate(&mut dys, j, t);
                        }
                        offset += c;
                    }
                }
            }
            if let Some(dx) = dx {
                let t = Tensor::from_vec(x.shape(), dx)?;
                accumulate(&mut dys, in_id, t);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(dys: &mut [Option<Tensor>], node: usize, grad: Tensor) {
    match &mut dys[node] {
        Some(existing) => existing.add_assign(&grad),
        slot => *slot = Some(grad),
    }
}
