use super::{Param, Parameterized, INIT_STD};
use crate::rng::Rng;
use crate::tensor::{gemm, gemm_ld, MatRef, Tensor3};

/// Position-wise linear map over channels (a 1×1 convolution).
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `out × in`, row-major.
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::trunc_normal(in_features * out_features, INIT_STD, rng),
            bias: Param::zeros(out_features),
        }
    }

    pub fn zeroed(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::zeros(in_features * out_features),
            bias: Param::zeros(out_features),
        }
    }

    fn weight_mat(&self) -> MatRef<'_> {
        MatRef::new(&self.weight.value, self.out_features, self.in_features)
    }

    /// Applies the map to a `in × n` row-major matrix.
    pub fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_features * n];
        self.apply_into(MatRef::new(x, self.in_features, n), &mut out, n);
        out
    }

    /// Writes `W · x + b` into `out` whose rows are `ldo` apart.
    pub fn apply_into(&self, x: MatRef<'_>, out: &mut [f64], ldo: usize) {
        let n = x.cols;
        for (o, b) in self.bias.value.iter().enumerate() {
            out[o * ldo..o * ldo + n].fill(*b);
        }
        gemm_ld(1.0, self.weight_mat(), x, 1.0, out, ldo);
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_features);
        let n = x.plane_len();
        Tensor3 {
            channels: self.out_features,
            height: x.height,
            width: x.width,
            data: self.apply(&x.data, n),
        }
    }

    /// Backward for a `in × n` input `x` given `dy` (`out × n`); returns `dx`.
    pub fn backward_raw(&mut self, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        let dy_m = MatRef::new(dy, self.out_features, n);
        gemm(
            1.0,
            dy_m,
            MatRef::new(x, self.in_features, n).t(),
            1.0,
            &mut self.weight.grad,
        );
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        let mut dx = vec![0.0; self.in_features * n];
        gemm(1.0, self.weight_mat().t(), dy_m, 0.0, &mut dx);
        dx
    }

    /// The cache of a linear layer is its input.
    pub fn backward(&mut self, x: &Tensor3, dy: &Tensor3) -> Tensor3 {
        let n = x.plane_len();
        Tensor3 {
            channels: self.in_features,
            height: x.height,
            width: x.width,
            data: self.backward_raw(&x.data, &dy.data, n),
        }
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out × (in · k · k)`, row-major.
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let k = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::fan_in_uniform(k * out_channels, k, rng),
            bias: Param::fan_in_uniform(out_channels, k, rng),
        }
    }

    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::zeros(in_channels * kernel * kernel * out_channels),
            bias: Param::zeros(out_channels),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor3) -> (Vec<f64>, usize, usize) {
        let (c, h, w) = x.shape();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let l = oh * ow;
        let mut cols = vec![0.0; c * k * k * l];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = x.idx(ci, iy as usize, 0);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x.data[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn col2im(&self, cols: &[f64], in_shape: (usize, usize, usize)) -> Tensor3 {
        let (c, h, w) = in_shape;
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let l = oh * ow;
        let mut dx = Tensor3::zeros(c, h, w);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = dx.idx(ci, iy as usize, 0);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dx.data[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn apply_cols(&self, cols: &[f64], oh: usize, ow: usize) -> Tensor3 {
        let l = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        for (o, b) in self.bias.value.iter().enumerate() {
            out.data[o * l..(o + 1) * l].fill(*b);
        }
        gemm(
            1.0,
            MatRef::new(&self.weight.value, self.out_channels, kk),
            MatRef::new(cols, kk, l),
            1.0,
            &mut out.data,
        );
        out
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_channels);
        let (cols, oh, ow) = self.im2col(x);
        self.apply_cols(&cols, oh, ow)
    }

    pub fn forward_train(&self, x: &Tensor3) -> (Tensor3, Conv2dCache) {
        let (cols, oh, ow) = self.im2col(x);
        let out = self.apply_cols(&cols, oh, ow);
        (
            out,
            Conv2dCache {
                cols,
                in_shape: x.shape(),
            },
        )
    }

    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Tensor3) -> Tensor3 {
        let l = dy.plane_len();
        let kk = self.in_channels * self.kernel * self.kernel;
        let dy_m = MatRef::new(&dy.data, self.out_channels, l);
        gemm(
            1.0,
            dy_m,
            MatRef::new(&cache.cols, kk, l).t(),
            1.0,
            &mut self.weight.grad,
        );
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.data[o * l..(o + 1) * l].iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; kk * l];
        gemm(
            1.0,
            MatRef::new(&self.weight.value, self.out_channels, kk).t(),
            dy_m,
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, cache.in_shape)
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 2×2, stride-2 transposed convolution: every input pixel expands into a
/// 2×2 output block.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Rows indexed by `(out_channel * 2 + dy) * 2 + dx`, columns by input channel.
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2x2 {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::fan_in_uniform(4 * in_channels * out_channels, 4 * out_channels, rng),
            bias: Param::fan_in_uniform(out_channels, 4 * out_channels, rng),
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        let (_, h, w) = x.shape();
        let n = h * w;
        let mut z = vec![0.0; 4 * self.out_channels * n];
        gemm(
            1.0,
            MatRef::new(&self.weight.value, 4 * self.out_channels, self.in_channels),
            MatRef::new(&x.data, self.in_channels, n),
            0.0,
            &mut z,
        );
        let mut out = Tensor3::zeros(self.out_channels, 2 * h, 2 * w);
        for co in 0..self.out_channels {
            let b = self.bias.value[co];
            for dy in 0..2 {
                for dx in 0..2 {
                    let row = &z[((co * 2 + dy) * 2 + dx) * n..][..n];
                    for y in 0..h {
                        for xx in 0..w {
                            let i = out.idx(co, 2 * y + dy, 2 * xx + dx);
                            out.data[i] = row[y * w + xx] + b;
                        }
                    }
                }
            }
        }
        out
    }

    /// The cache is the input.
    pub fn backward(&mut self, x: &Tensor3, dout: &Tensor3) -> Tensor3 {
        let (_, h, w) = x.shape();
        let n = h * w;
        let mut dz = vec![0.0; 4 * self.out_channels * n];
        for co in 0..self.out_channels {
            let mut bsum = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let row = &mut dz[((co * 2 + dy) * 2 + dx) * n..][..n];
                    for y in 0..h {
                        for xx in 0..w {
                            let g = dout.at(co, 2 * y + dy, 2 * xx + dx);
                            row[y * w + xx] = g;
                            bsum += g;
                        }
                    }
                }
            }
            self.bias.grad[co] += bsum;
        }
        let dz_m = MatRef::new(&dz, 4 * self.out_channels, n);
        gemm(
            1.0,
            dz_m,
            MatRef::new(&x.data, self.in_channels, n).t(),
            1.0,
            &mut self.weight.grad,
        );
        let mut dx = Tensor3::zeros(self.in_channels, h, w);
        gemm(
            1.0,
            MatRef::new(&self.weight.value, 4 * self.out_channels, self.in_channels).t(),
            dz_m,
            0.0,
            &mut dx.data,
        );
        dx
    }
}

impl Parameterized for ConvTranspose2x2 {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use crate::rng::rng_from_seed;

    fn random_tensor(c: usize, h: usize, w: usize, salt: u64) -> Tensor3 {
        Tensor3::from_vec(c, h, w, probe(c * h * w, salt)).unwrap()
    }

    fn randomize<M: Parameterized>(m: &mut M, salt: u64) {
        let n = m.num_params();
        let v: Vec<f64> = probe(n, salt).iter().map(|x| x * 0.5).collect();
        m.set_flat_values(&v);
    }

    /// Direct-summation oracle for a zero-padded strided convolution.
    fn conv_oracle(conv: &Conv2d, x: &Tensor3) -> Tensor3 {
        let (c, h, w) = x.shape();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Tensor3::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.value[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.weight.value[o * c * k * k + (ci * k + ky) * k + kx]
                                        * x.at(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    let i = out.idx(o, oy, ox);
                    out.data[i] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = rng_from_seed(1);
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 5, k, s, p, &mut rng);
            randomize(&mut conv, 3);
            let x = random_tensor(3, 8, 6, 9);
            let y = conv.forward(&x);
            assert!(y.max_abs_diff(&conv_oracle(&conv, &x)) < 1e-12);
        }
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let mut rng = rng_from_seed(2);
        let conv = Conv2d::new(4, 8, 4, 2, 1, &mut rng);
        let y = conv.forward(&Tensor3::zeros(4, 16, 12));
        assert_eq!(y.shape(), (8, 8, 6));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(3);
        let mut conv = Conv2d::new(2, 3, 4, 2, 1, &mut rng);
        randomize(&mut conv, 5);
        let x = random_tensor(2, 6, 6, 4);
        let (y, cache) = conv.forward_train(&x);
        let w = probe(y.data.len(), 77);
        conv.zero_grad();
        let dx = conv.backward(&cache, &Tensor3::from_vec(y.channels, y.height, y.width, w.clone()).unwrap());
        let idx: Vec<usize> = (0..x.data.len()).collect();
        let num = numeric_input_grad(&x, &idx, 1e-5, |xx| dot(&conv.forward(xx).data, &w));
        assert!(rel_error(&dx.data, &num) < 1e-8);
        let analytic = conv.flat_grads();
        let pidx: Vec<usize> = (0..analytic.len()).collect();
        let num = numeric_param_grad(&mut conv, &pidx, 1e-5, |m| dot(&m.forward(&x).data, &w));
        assert!(rel_error(&analytic, &num) < 1e-8);
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(4);
        let mut up = ConvTranspose2x2::new(4, 2, &mut rng);
        randomize(&mut up, 8);
        let x = random_tensor(4, 3, 5, 1);
        let y = up.forward(&x);
        assert_eq!(y.shape(), (2, 6, 10));
        let w = probe(y.data.len(), 11);
        up.zero_grad();
        let dx = up.backward(&x, &Tensor3::from_vec(2, 6, 10, w.clone()).unwrap());
        let idx: Vec<usize> = (0..x.data.len()).collect();
        let num = numeric_input_grad(&x, &idx, 1e-5, |xx| dot(&up.forward(xx).data, &w));
        assert!(rel_error(&dx.data, &num) < 1e-8);
        let analytic = up.flat_grads();
        let pidx: Vec<usize> = (0..analytic.len()).collect();
        let num = numeric_param_grad(&mut up, &pidx, 1e-5, |m| dot(&m.forward(&x).data, &w));
        assert!(rel_error(&analytic, &num) < 1e-8);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(5);
        let mut lin = Linear::new(3, 4, &mut rng);
        randomize(&mut lin, 2);
        let x = random_tensor(3, 2, 5, 6);
        let y = lin.forward(&x);
        let w = probe(y.data.len(), 13);
        lin.zero_grad();
        let dx = lin.backward(&x, &Tensor3::from_vec(4, 2, 5, w.clone()).unwrap());
        let idx: Vec<usize> = (0..x.data.len()).collect();
        let num = numeric_input_grad(&x, &idx, 1e-5, |xx| dot(&lin.forward(xx).data, &w));
        assert!(rel_error(&dx.data, &num) < 1e-8);
        let analytic = lin.flat_grads();
        let pidx: Vec<usize> = (0..analytic.len()).collect();
        let num = numeric_param_grad(&mut lin, &pidx, 1e-5, |m| dot(&m.forward(&x).data, &w));
        assert!(rel_error(&analytic, &num) < 1e-8);
    }
}
