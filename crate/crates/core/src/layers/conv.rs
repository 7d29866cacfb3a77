//! Spatial layers for `[B × C × H × W]` inputs.

use super::{kaiming_bound, missing_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

fn dims4(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, x.shape(), &[0, 0, 0, 0])),
    }
}

/// 2-D convolution lowered to a matrix product over flattened patches.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: Param,
    pub bias: Param,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    input_shape: Vec<usize>,
    out_hw: (usize, usize),
    /// One `[Cin·kh·kw × Hout·Wout]` patch matrix per sample.
    cols: Vec<Tensor>,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = kaiming_bound(fan_in);
        let k = Tensor::rand_uniform(rng, &[out_channels, in_channels, kernel, kernel], -bound, bound)
            .expect("finite init");
        Conv2d {
            kernel: Param::new(k),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            stride,
            padding,
            cache: None,
        }
    }

    fn kdims(&self) -> (usize, usize, usize, usize) {
        let s = self.kernel.value.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn im2col(&self, x: &[f64], c: usize, h: usize, w: usize, out_hw: (usize, usize)) -> Tensor {
        let (_, _, kh, kw) = self.kdims();
        let (oh, ow) = out_hw;
        let mut cols = vec![0.0; c * kh * kw * oh * ow];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[row * oh * ow + oi * ow + oj] = x[(ci * h + ii as usize) * w + jj as usize];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c * kh * kw, oh * ow], cols).expect("finite patches")
    }

    fn col2im(&self, cols: &Tensor, c: usize, h: usize, w: usize, out_hw: (usize, usize), dx: &mut [f64]) {
        let (_, _, kh, kw) = self.kdims();
        let (oh, ow) = out_hw;
        let data = cols.data();
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dx[(ci * h + ii as usize) * w + jj as usize] += data[row * oh * ow + oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn hyper(&self) -> serde_json::Value {
        let (o, i, kh, kw) = self.kdims();
        serde_json::json!({
            "in_channels": i, "out_channels": o, "kernel": [kh, kw],
            "stride": self.stride, "padding": self.padding,
        })
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = dims4(x, "conv2d")?;
        let (oc, ic, kh, kw) = self.kdims();
        if c != ic {
            return Err(Error::dim("conv2d channels", x.shape(), self.kernel.value.shape()));
        }
        let oh = conv_output_size(h, kh, self.stride, self.padding);
        let ow = conv_output_size(w, kw, self.stride, self.padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim("conv2d kernel larger than input", x.shape(), self.kernel.value.shape()));
        };
        let kflat = self.kernel.value.reshape(&[oc, ic * kh * kw])?;
        let mut out = Vec::with_capacity(b * oc * oh * ow);
        let mut cols = Vec::with_capacity(b);
        for bi in 0..b {
            let col = self.im2col(x.row(bi), c, h, w, (oh, ow));
            let y = kflat.matmul(&col)?;
            for (o, chunk) in y.data().chunks(oh * ow).enumerate() {
                let bias = self.bias.value.data()[o];
                out.extend(chunk.iter().map(|v| v + bias));
            }
            cols.push(col);
        }
        self.cache = Some(ConvCache {
            input_shape: x.shape().to_vec(),
            out_hw: (oh, ow),
            cols,
        });
        Tensor::new(vec![b, oc, oh, ow], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("conv2d"))?;
        let (b, c, h, w) = (cache.input_shape[0], cache.input_shape[1], cache.input_shape[2], cache.input_shape[3]);
        let (oc, ic, kh, kw) = self.kdims();
        let (oh, ow) = cache.out_hw;
        if grad_out.shape() != [b, oc, oh, ow] {
            return Err(Error::dim("conv2d backward", grad_out.shape(), &[b, oc, oh, ow]));
        }
        let kflat = self.kernel.value.reshape(&[oc, ic * kh * kw])?;
        let kflat_t = kflat.transpose()?;
        let mut gk = Tensor::zeros(&[oc, ic * kh * kw]);
        let mut gb = vec![0.0; oc];
        let mut dx = vec![0.0; b * c * h * w];
        for bi in 0..b {
            let g = Tensor::new(vec![oc, oh * ow], grad_out.row(bi).to_vec())?;
            gk.add_assign(&g.matmul(&cache.cols[bi].transpose()?)?)?;
            for (o, chunk) in g.data().chunks(oh * ow).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
            let dcols = kflat_t.matmul(&g)?;
            self.col2im(&dcols, c, h, w, (oh, ow), &mut dx[bi * c * h * w..(bi + 1) * c * h * w]);
        }
        self.kernel.accumulate(&gk.reshape(&[oc, ic, kh, kw])?)?;
        self.bias.accumulate(&Tensor::new(vec![oc], gb)?)?;
        Tensor::new(cache.input_shape.clone(), dx)
    }

    fn params(&self) -> Vec<(String, &Param)> {
        vec![("kernel".into(), &self.kernel), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("kernel".into(), &mut self.kernel), ("bias".into(), &mut self.bias)]
    }
}

/// Non-overlapping max pooling with a square window (stride = window).
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    size: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        MaxPool2d { size, cache: None }
    }
}

impl Layer for MaxPool2d {
    fn kind(&self) -> &'static str {
        "maxpool2d"
    }

    fn hyper(&self) -> serde_json::Value {
        serde_json::json!({ "size": self.size })
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = dims4(x, "maxpool2d")?;
        let (oh, ow) = (h / self.size, w / self.size);
        if oh == 0 || ow == 0 {
            return Err(Error::dim("maxpool2d window larger than input", x.shape(), &[self.size, self.size]));
        }
        let data = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * self.size * w + oj * self.size;
                    for di in 0..self.size {
                        for dj in 0..self.size {
                            let idx = base + (oi * self.size + di) * w + oj * self.size + dj;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        self.cache = Some((x.shape().to_vec(), argmax));
        Tensor::new(vec![b, c, oh, ow], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (shape, argmax) = self.cache.as_ref().ok_or_else(|| missing_forward("maxpool2d"))?;
        if grad_out.len() != argmax.len() {
            return Err(Error::dim("maxpool2d backward", grad_out.shape(), shape));
        }
        let mut dx = vec![0.0; shape.iter().product()];
        for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
            dx[idx] += g;
        }
        Tensor::new(shape.clone(), dx)
    }
}

/// Spatial mean per channel: `[B × C × H × W] -> [B × C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x, "global_avg_pool")?;
    let hw = h * w;
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![b, c], out)
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn kind(&self) -> &'static str {
        "global-avg-pool"
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let y = global_avg_pool(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.as_ref().ok_or_else(|| missing_forward("global-avg-pool"))?;
        let hw = shape[2] * shape[3];
        if grad_out.shape() != [shape[0], shape[1]] {
            return Err(Error::dim("global-avg-pool backward", grad_out.shape(), shape));
        }
        let mut dx = Vec::with_capacity(grad_out.len() * hw);
        for &g in grad_out.data() {
            dx.extend(std::iter::repeat(g / hw as f64).take(hw));
        }
        Tensor::new(shape.clone(), dx)
    }
}
