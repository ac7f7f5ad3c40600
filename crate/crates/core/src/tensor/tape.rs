//! Wengert tape: records forward operations, replays them in reverse.
//!
//! Values live in an arena of slots; [`Var`] is an index into it. Each op
//! validates its inputs, computes the result into a fresh slot, and pushes
//! a record carrying whatever the backward rule needs (argmax indices,
//! geometry). `backward` walks the records last-to-first and accumulates
//! gradients into every slot on the path that requires them.

use super::kernels;
use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

/// Handle to a value slot on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

struct Slot {
    shape: Shape4,
    data: Vec<f64>,
    requires_grad: bool,
}

enum Record {
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        out: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2x2 {
        input: Var,
        out: Var,
        argmax: Vec<usize>,
    },
    AdaptiveMaxPool {
        input: Var,
        out: Var,
        argmax: Vec<usize>,
    },
    BilinearUpsample {
        input: Var,
        out: Var,
    },
    ConcatChannels {
        inputs: Vec<Var>,
        out: Var,
    },
    Relu {
        input: Var,
        out: Var,
    },
    Sigmoid {
        input: Var,
        out: Var,
    },
    SumSquaredError {
        pred: Var,
        target: Var,
        out: Var,
    },
    Sum {
        input: Var,
        out: Var,
    },
    AddScalars {
        inputs: Vec<Var>,
        out: Var,
    },
    Scale {
        input: Var,
        factor: f64,
        out: Var,
    },
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    records: Vec<Record>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Copy a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor4) -> Var {
        self.push(t.shape(), t.data().to_vec(), t.requires_grad())
    }

    fn push(&mut self, shape: Shape4, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.numel());
        self.slots.push(Slot {
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.slots.len() - 1)
    }

    /// Overflow guard for the ops whose arithmetic can leave the finite
    /// range (convolution and the scalar reductions). Pooling, upsampling,
    /// concat, and the activations cannot, given finite inputs.
    fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.slots[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.slots[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    /// Value of a single-element slot.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let s = &self.slots[v.0];
        if s.shape.numel() != 1 {
            return Err(Error::invalid(format!(
                "expected scalar slot, found shape {}",
                s.shape
            )));
        }
        Ok(s.data[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor4 {
        let s = &self.slots[v.0];
        let mut t = Tensor4::new(s.shape, s.data.clone()).expect("tape values are finite");
        t.set_requires_grad(s.requires_grad);
        t
    }

    /// Accumulated gradient of a slot, once `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn same_spatial(op: &'static str, a: &Slot, b: &Slot) -> Result<()> {
        if a.shape.n != b.shape.n || a.shape.h != b.shape.h || a.shape.w != b.shape.w {
            return Err(Error::ShapeMismatch {
                op,
                left: a.shape.to_string(),
                right: b.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weights), self.shape(bias));
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        // weights are (out_c, in_c, k, k); bias is carried as (1, out_c, 1, 1)
        if ws.h != ws.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d: kernel must be square",
                left: ws.to_string(),
                right: ws.to_string(),
            });
        }
        if ws.c != is.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d: weight in_channels vs input channels",
                left: ws.to_string(),
                right: is.to_string(),
            });
        }
        if bs.numel() != ws.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d: bias length vs out_channels",
                left: bs.to_string(),
                right: ws.to_string(),
            });
        }
        let k = ws.h;
        if is.h + 2 * pad < k || is.w + 2 * pad < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d: kernel larger than padded input",
                left: is.to_string(),
                right: ws.to_string(),
            });
        }
        let d = kernels::ConvDims {
            n: is.n,
            ic: is.c,
            h: is.h,
            w: is.w,
            oc: ws.n,
            k,
            stride,
            pad,
            oh: (is.h + 2 * pad - k) / stride + 1,
            ow: (is.w + 2 * pad - k) / stride + 1,
        };
        let out_shape = Shape4::new(d.n, d.oc, d.oh, d.ow);
        let mut out = vec![0.0; out_shape.numel()];
        kernels::conv2d_forward(
            &d,
            &self.slots[input.0].data,
            &self.slots[weights.0].data,
            &self.slots[bias.0].data,
            &mut out,
        );
        Self::check_finite("conv2d", &out)?;
        let rg = self.requires_grad(input) || self.requires_grad(weights) || self.requires_grad(bias);
        let out_var = self.push(out_shape, out, rg);
        self.records.push(Record::Conv2d {
            input,
            weights,
            bias,
            out: out_var,
            stride,
            pad,
        });
        Ok(out_var)
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "max_pool_2x2: spatial dims must be even, found {s}"
            )));
        }
        let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
        let mut out = vec![0.0; out_shape.numel()];
        let mut argmax = Vec::new();
        kernels::max_pool_2x2_forward(s.n, s.c, s.h, s.w, &self.slots[input.0].data, &mut out, &mut argmax);
        let rg = self.requires_grad(input);
        let out_var = self.push(out_shape, out, rg);
        self.records.push(Record::MaxPool2x2 {
            input,
            out: out_var,
            argmax,
        });
        Ok(out_var)
    }

    pub fn adaptive_max_pool(&mut self, input: Var, bins: usize) -> Result<Var> {
        let s = self.shape(input);
        if bins == 0 || bins > s.h || bins > s.w {
            return Err(Error::invalid(format!(
                "adaptive_max_pool: {bins} bins not supported for input {s}"
            )));
        }
        let out_shape = Shape4::new(s.n, s.c, bins, bins);
        let mut out = vec![0.0; out_shape.numel()];
        let mut argmax = Vec::new();
        kernels::adaptive_max_pool_forward(s.n, s.c, s.h, s.w, bins, &self.slots[input.0].data, &mut out, &mut argmax);
        let rg = self.requires_grad(input);
        let out_var = self.push(out_shape, out, rg);
        self.records.push(Record::AdaptiveMaxPool {
            input,
            out: out_var,
            argmax,
        });
        Ok(out_var)
    }

    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(input);
        if out_h < s.h || out_w < s.w {
            return Err(Error::invalid(format!(
                "bilinear_upsample: target {out_h}x{out_w} smaller than input {}x{}",
                s.h, s.w
            )));
        }
        let out_shape = Shape4::new(s.n, s.c, out_h, out_w);
        let mut out = vec![0.0; out_shape.numel()];
        kernels::bilinear_upsample_forward(s.n, s.c, s.h, s.w, out_h, out_w, &self.slots[input.0].data, &mut out);
        let rg = self.requires_grad(input);
        let out_var = self.push(out_shape, out, rg);
        self.records.push(Record::BilinearUpsample { input, out: out_var });
        Ok(out_var)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels: no inputs"))?;
        let fs = self.shape(first);
        let mut channels = 0;
        for &v in inputs {
            Self::same_spatial("concat_channels", &self.slots[first.0], &self.slots[v.0])?;
            channels += self.shape(v).c;
        }
        let out_shape = Shape4::new(fs.n, channels, fs.h, fs.w);
        let plane = fs.h * fs.w;
        let mut out = vec![0.0; out_shape.numel()];
        for img in 0..fs.n {
            let mut dst = img * channels * plane;
            for &v in inputs {
                let c = self.shape(v).c;
                let src = &self.slots[v.0].data[img * c * plane..][..c * plane];
                out[dst..dst + c * plane].copy_from_slice(src);
                dst += c * plane;
            }
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let out_var = self.push(out_shape, out, rg);
        self.records.push(Record::ConcatChannels {
            inputs: inputs.to_vec(),
            out: out_var,
        });
        Ok(out_var)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let s = self.shape(input);
        let out: Vec<f64> = self.slots[input.0].data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.requires_grad(input);
        let out_var = self.push(s, out, rg);
        self.records.push(Record::Relu { input, out: out_var });
        out_var
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let s = self.shape(input);
        let out: Vec<f64> = self.slots[input.0].data.iter().map(|&v| stable_sigmoid(v)).collect();
        let rg = self.requires_grad(input);
        let out_var = self.push(s, out, rg);
        self.records.push(Record::Sigmoid { input, out: out_var });
        out_var
    }

    /// Sum of squared differences over every element (the per-stage loss).
    pub fn sum_squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts {
            return Err(Error::ShapeMismatch {
                op: "sum_squared_error",
                left: ps.to_string(),
                right: ts.to_string(),
            });
        }
        let p = &self.slots[pred.0].data;
        let t = &self.slots[target.0].data;
        let mut loss = 0.0;
        for (a, b) in p.iter().zip(t) {
            let diff = a - b;
            loss += diff * diff;
        }
        Self::check_finite("sum_squared_error", &[loss])?;
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        let out_var = self.push(Shape4::new(1, 1, 1, 1), vec![loss], rg);
        self.records.push(Record::SumSquaredError {
            pred,
            target,
            out: out_var,
        });
        Ok(out_var)
    }

    /// Sum of all elements, as a scalar slot.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.slots[input.0].data.iter().sum();
        Self::check_finite("sum", &[total])?;
        let rg = self.requires_grad(input);
        let out_var = self.push(Shape4::new(1, 1, 1, 1), vec![total], rg);
        self.records.push(Record::Sum { input, out: out_var });
        Ok(out_var)
    }

    /// Sum of scalar slots (stage losses combine through this).
    pub fn add_scalars(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("add_scalars: no inputs"));
        }
        let mut total = 0.0;
        for &v in inputs {
            total += self.scalar(v)?;
        }
        Self::check_finite("add_scalars", &[total])?;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let out_var = self.push(Shape4::new(1, 1, 1, 1), vec![total], rg);
        self.records.push(Record::AddScalars {
            inputs: inputs.to_vec(),
            out: out_var,
        });
        Ok(out_var)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let s = self.shape(input);
        let out: Vec<f64> = self.slots[input.0].data.iter().map(|&v| v * factor).collect();
        Self::check_finite("scale", &out)?;
        let rg = self.requires_grad(input);
        let out_var = self.push(s, out, rg);
        self.records.push(Record::Scale {
            input,
            factor,
            out: out_var,
        });
        Ok(out_var)
    }

    /// Reverse pass from a scalar loss slot. Single use per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward already ran on this tape"));
        }
        if self.slots[loss.0].shape.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, found shape {}",
                self.slots[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let records = std::mem::take(&mut self.records);
        for record in records.iter().rev() {
            self.apply_backward(record);
        }
        self.records = records;
        Ok(())
    }

    fn take_out_grad(&mut self, out: Var) -> Option<Vec<f64>> {
        self.grads[out.0].take()
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if !self.slots[v.0].requires_grad {
            return;
        }
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; self.slots[v.0].shape.numel()]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn ensure_grad(&mut self, v: Var) -> &mut Vec<f64> {
        let numel = self.slots[v.0].shape.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn apply_backward(&mut self, record: &Record) {
        match record {
            Record::Conv2d {
                input,
                weights,
                bias,
                out,
                stride,
                pad,
            } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                let (is, ws) = (self.shape(*input), self.shape(*weights));
                let d = kernels::ConvDims {
                    n: is.n,
                    ic: is.c,
                    h: is.h,
                    w: is.w,
                    oc: ws.n,
                    k: ws.h,
                    stride: *stride,
                    pad: *pad,
                    oh: self.shape(*out).h,
                    ow: self.shape(*out).w,
                };
                let want_input = self.slots[input.0].requires_grad;
                let mut d_input = if want_input { Some(vec![0.0; is.numel()]) } else { None };
                let mut d_weights = vec![0.0; ws.numel()];
                let mut d_bias = vec![0.0; d.oc];
                kernels::conv2d_backward(
                    &d,
                    &self.slots[input.0].data,
                    &self.slots[weights.0].data,
                    &gout,
                    d_input.as_deref_mut(),
                    &mut d_weights,
                    &mut d_bias,
                );
                if let Some(di) = d_input {
                    self.accumulate(*input, &di);
                }
                self.accumulate(*weights, &d_weights);
                self.accumulate(*bias, &d_bias);
                self.grads[out.0] = Some(gout);
            }
            Record::MaxPool2x2 { input, out, argmax }
            | Record::AdaptiveMaxPool { input, out, argmax } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                if self.slots[input.0].requires_grad {
                    let gin = self.ensure_grad(*input);
                    for (i, &src) in argmax.iter().enumerate() {
                        gin[src] += gout[i];
                    }
                }
                self.grads[out.0] = Some(gout);
            }
            Record::BilinearUpsample { input, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                if self.slots[input.0].requires_grad {
                    let is = self.shape(*input);
                    let os = self.shape(*out);
                    let mut d_input = vec![0.0; is.numel()];
                    kernels::bilinear_upsample_backward(is.n, is.c, is.h, is.w, os.h, os.w, &gout, &mut d_input);
                    self.accumulate(*input, &d_input);
                }
                self.grads[out.0] = Some(gout);
            }
            Record::ConcatChannels { inputs, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                let os = self.shape(*out);
                let plane = os.h * os.w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v).c;
                    if self.slots[v.0].requires_grad {
                        let mut contrib = vec![0.0; self.shape(v).numel()];
                        for img in 0..os.n {
                            let src = &gout[(img * os.c + offset) * plane..][..c * plane];
                            contrib[img * c * plane..][..c * plane].copy_from_slice(src);
                        }
                        self.accumulate(v, &contrib);
                    }
                    offset += c;
                }
                self.grads[out.0] = Some(gout);
            }
            Record::Relu { input, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                if self.slots[input.0].requires_grad {
                    let contrib: Vec<f64> = self.slots[input.0]
                        .data
                        .iter()
                        .zip(&gout)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(*input, &contrib);
                }
                self.grads[out.0] = Some(gout);
            }
            Record::Sigmoid { input, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                if self.slots[input.0].requires_grad {
                    let contrib: Vec<f64> = self.slots[out.0]
                        .data
                        .iter()
                        .zip(&gout)
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(*input, &contrib);
                }
                self.grads[out.0] = Some(gout);
            }
            Record::SumSquaredError { pred, target, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                let g = gout[0];
                if self.slots[pred.0].requires_grad || self.slots[target.0].requires_grad {
                    let contrib: Vec<f64> = self.slots[pred.0]
                        .data
                        .iter()
                        .zip(&self.slots[target.0].data)
                        .map(|(&p, &t)| 2.0 * g * (p - t))
                        .collect();
                    self.accumulate(*pred, &contrib);
                    if self.slots[target.0].requires_grad {
                        let neg: Vec<f64> = contrib.iter().map(|v| -v).collect();
                        self.accumulate(*target, &neg);
                    }
                }
                self.grads[out.0] = Some(gout);
            }
            Record::Sum { input, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                if self.slots[input.0].requires_grad {
                    let contrib = vec![gout[0]; self.shape(*input).numel()];
                    self.accumulate(*input, &contrib);
                }
                self.grads[out.0] = Some(gout);
            }
            Record::AddScalars { inputs, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                for &v in inputs {
                    self.accumulate(v, &gout);
                }
                self.grads[out.0] = Some(gout);
            }
            Record::Scale { input, factor, out } => {
                let Some(gout) = self.take_out_grad(*out) else { return };
                if self.slots[input.0].requires_grad {
                    let contrib: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                    self.accumulate(*input, &contrib);
                }
                self.grads[out.0] = Some(gout);
            }
        }
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
