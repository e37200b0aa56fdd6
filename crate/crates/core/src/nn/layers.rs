use candle_core::{DType, Tensor, Var, D};
use rand::Rng;

use super::conv::{conv2d, Geometry};
use super::ParamStore;
use crate::error::{Error, Result};

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: store.xavier(&format!("{name}.weight"), &[outputs, inputs], inputs, outputs)?,
            bias: store.zeros(&format!("{name}.bias"), &[outputs])?,
        })
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Stride-`s` 2-D convolution with half-kernel zero padding.
pub struct Conv2d {
    weight: Var,
    bias: Var,
    geo: Geometry,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let field = kh * kw;
        Ok(Self {
            weight: store.xavier(&format!("{name}.weight"), &[cout, cin, kh, kw], cin * field, cout * field)?,
            bias: store.zeros(&format!("{name}.bias"), &[cout])?,
            geo: Geometry { kh, kw, sh: stride, sw: stride, ph: kh / 2, pw: kw / 2 },
        })
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        self.geo.out_dims(h, w)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.geo)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Stride-1 temporal convolution over (B, C, L).
pub struct Conv1d {
    weight: Var,
    bias: Var,
    geo: Geometry,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: store.xavier(&format!("{name}.weight"), &[cout, cin, 1, kernel], cin * kernel, cout * kernel)?,
            bias: store.zeros(&format!("{name}.bias"), &[cout])?,
            geo: Geometry { kh: 1, kw: kernel, sh: 1, sw: 1, ph: 0, pw: kernel / 2 },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let y = conv2d(&x.reshape((b, c, 1, l))?, &self.weight, self.geo)?;
        let y = y.squeeze(2)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Batch normalization over axis 1 of (B, C) or (B, C, H, W) inputs.
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let dev = store.device().clone();
        let dt = store.dtype();
        Ok(Self {
            gamma: store.ones(&format!("{name}.weight"), &[channels])?,
            beta: store.zeros(&format!("{name}.bias"), &[channels])?,
            running_mean: store.buffer(&format!("{name}.running_mean"), Tensor::zeros(channels, dt, &dev)?)?,
            running_var: store.buffer(&format!("{name}.running_var"), Tensor::ones(channels, dt, &dev)?)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In training mode, normalizes with batch statistics and updates the
    /// running averages; otherwise uses the running averages.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rank = x.rank();
        if rank != 2 && rank != 4 {
            return Err(Error::shape("rank 2 or 4", rank));
        }
        let c = x.dim(1)?;
        let view = |t: &Tensor| -> candle_core::Result<Tensor> {
            if rank == 2 {
                t.reshape((1, c))
            } else {
                t.reshape((1, c, 1, 1))
            }
        };
        let (mean, var) = if train {
            let dims: Vec<usize> = if rank == 2 { vec![0] } else { vec![0, 2, 3] };
            let n = x.elem_count() / c;
            if n < 2 {
                return Err(Error::invalid("batch normalization needs at least 2 values per channel in training"));
            }
            let mean = x.mean_keepdim(dims.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(dims.as_slice())?;
            let m = self.momentum;
            let bm = mean.detach().flatten_all()?;
            let bv = (var.detach().flatten_all()? * (n as f64 / (n - 1) as f64))?;
            self.running_mean.set(&((self.running_mean.as_tensor() * (1.0 - m))? + (bm * m)?)?)?;
            self.running_var.set(&((self.running_var.as_tensor() * (1.0 - m))? + (bv * m)?)?)?;
            (mean, var)
        } else {
            (view(self.running_mean.as_tensor())?, view(self.running_var.as_tensor())?)
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&view(&self.gamma)?)?.broadcast_add(&view(&self.beta)?)?)
    }
}

/// Adaptive instance normalization with per-sample affine parameters.
///
/// `h` is (B, C, H, W) with statistics over the spatial extent of each
/// channel, or (B, F) with statistics over the F features of each sample.
/// `gamma` and `beta` are (B, C) or (B, F).
pub fn adain(h: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c) = (h.dim(0)?, h.dim(1)?);
    if gamma.dims() != [b, c] || beta.dims() != [b, c] {
        return Err(Error::shape(format!("({b}, {c})"), format!("{:?}", gamma.dims())));
    }
    let (hn, g, bt) = match h.rank() {
        4 => {
            let mean = h.mean_keepdim((2, 3))?;
            let centered = h.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((2, 3))?;
            let std = stable_sqrt(&var)?;
            let hn = centered.broadcast_div(&(std + eps)?)?;
            (hn, gamma.reshape((b, c, 1, 1))?, beta.reshape((b, c, 1, 1))?)
        }
        2 => {
            let mean = h.mean_keepdim(1)?;
            let centered = h.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?;
            let std = stable_sqrt(&var)?;
            (centered.broadcast_div(&(std + eps)?)?, gamma.clone(), beta.clone())
        }
        r => return Err(Error::shape("rank 2 or 4", r)),
    };
    Ok(hn.broadcast_mul(&g)?.broadcast_add(&bt)?)
}

// sqrt with a tiny inner offset so the gradient stays finite at zero variance.
fn stable_sqrt(v: &Tensor) -> candle_core::Result<Tensor> {
    let tiny = if v.dtype() == DType::F64 { 1e-24 } else { 1e-12 };
    (v + tiny)?.sqrt()
}

pub fn celu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Inverted dropout with an explicit random stream.
pub fn dropout<R: Rng>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Nearest-neighbour resize of (B, C, H, W) to (B, C, h, w), source index floor(i·H/h).
pub fn resize_nearest(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, hi, wi) = x.dims4()?;
    if h.is_multiple_of(hi) && w.is_multiple_of(wi) {
        let (fh, fw) = (h / hi, w / wi);
        return Ok(x
            .reshape((b, c, hi, 1, wi, 1))?
            .broadcast_as((b, c, hi, fh, wi, fw))?
            .reshape((b, c, h, w))?);
    }
    let idx = |n_in: usize, n_out: usize| -> candle_core::Result<Tensor> {
        let v: Vec<u32> = (0..n_out).map(|i| (i * n_in / n_out) as u32).collect();
        Tensor::from_vec(v, n_out, x.device())
    };
    let mut y = x.clone();
    if hi != h {
        y = y.index_select(&idx(hi, h)?, 2)?;
    }
    if wi != w {
        y = y.index_select(&idx(wi, w)?, 3)?;
    }
    Ok(y)
}

/// Rearrange (B, C·f, L) into (B, C, L·f) so channel groups become time steps.
pub fn pixel_shuffle_1d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, cf, l) = x.dims3()?;
    if cf % factor != 0 {
        return Err(Error::shape(format!("channels divisible by {factor}"), cf));
    }
    let c = cf / factor;
    Ok(x.reshape((b, c, factor, l))?.transpose(2, 3)?.reshape((b, c, l * factor))?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn stats(t: &Tensor) -> Vec<(f64, f64)> {
        let v = t.flatten_from(2).unwrap().to_vec3::<f64>().unwrap();
        let mut out = Vec::new();
        for xs in v.iter().flatten() {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            out.push((m, s));
        }
        out
    }

    #[test]
    fn adain_sets_channel_statistics() {
        let dev = Device::Cpu;
        let h = Tensor::randn(0f64, 1.0, (2, 3, 7, 5), &dev).unwrap().affine(4.0, 1.5).unwrap();
        let g = Tensor::full(2f64, (2, 3), &dev).unwrap();
        let b = Tensor::full(3f64, (2, 3), &dev).unwrap();
        let y = adain(&h, &g, &b, 1e-5).unwrap();
        for (m, s) in stats(&y) {
            assert!((m - 3.0).abs() < 1e-3, "{m}");
            assert!((s - 2.0).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn adain_constant_channel_gives_beta() {
        let dev = Device::Cpu;
        let h = Tensor::full(7f64, (1, 2, 4, 4), &dev).unwrap();
        let g = Tensor::new(&[[1.5f64, -2.0]], &dev).unwrap();
        let b = Tensor::new(&[[0.25f64, -1.0]], &dev).unwrap();
        let y = adain(&h, &g, &b, 1e-5).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v[..16].iter().all(|x| (x - 0.25).abs() < 1e-12));
        assert!(v[16..].iter().all(|x| (x + 1.0).abs() < 1e-12));
    }

    #[test]
    fn adain_identity_on_standardized_features() {
        let dev = Device::Cpu;
        // zero mean, unit (population) std per sample
        let h = Tensor::new(&[[1f64, -1.0, 1.0, -1.0]], &dev).unwrap();
        let y = adain(&h, &Tensor::ones((1, 4), DType::F64, &dev).unwrap(), &Tensor::zeros((1, 4), DType::F64, &dev).unwrap(), 1e-5).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in v.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 2e-5);
        }
    }

    #[test]
    fn batchnorm_train_then_eval() {
        let dev = Device::Cpu;
        let mut s = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm::new(&mut s, "bn", 2).unwrap();
        let x = Tensor::new(&[[1f64, 10.0], [3.0, 30.0]], &dev).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec2::<f64>().unwrap();
        assert!((y[0][0] + 1.0).abs() < 1e-4 && (y[1][1] - 1.0).abs() < 1e-4);
        let rm: Vec<f64> = bn.running_mean.to_vec1().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
        let ye = bn.forward(&x, false).unwrap();
        let ye2 = bn.forward(&x, false).unwrap();
        assert_eq!(ye.to_vec2::<f64>().unwrap(), ye2.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn resize_and_shuffle_shapes() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 6.0, &dev).unwrap().reshape((1, 1, 2, 3)).unwrap();
        let y = resize_nearest(&x, 6, 9).unwrap();
        assert_eq!(y.dims(), &[1, 1, 6, 9]);
        let row: Vec<f32> = y.get(0).unwrap().get(0).unwrap().get(5).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![3., 3., 3., 4., 4., 4., 5., 5., 5.]);

        let z = Tensor::arange(0f32, 12.0, &dev).unwrap().reshape((1, 6, 2)).unwrap();
        let p = pixel_shuffle_1d(&z, 3).unwrap();
        assert_eq!(p.dims(), &[1, 2, 6]);
        // channel group 0 = rows 0,1,2: time t=0 gives [0,2,4], t=1 gives [1,3,5]
        let v: Vec<f32> = p.get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0., 2., 4., 1., 3., 5.]);
    }

    #[test]
    fn dropout_is_seeded() {
        let dev = Device::Cpu;
        let x = Tensor::ones((4, 50), DType::F32, &dev).unwrap();
        let run = |seed| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            dropout(&x, 0.3, &mut r).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(5), run(5));
        let v = run(5);
        let zeros = v.iter().filter(|x| **x == 0.0).count();
        assert!(zeros > 30 && zeros < 90);
        assert!(v.iter().all(|x| *x == 0.0 || (x - 1.0 / 0.7).abs() < 1e-6));
    }
}
