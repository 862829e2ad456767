use rand::Rng;

use crate::error::{Result, TcvcError};
use crate::tensor::Tensor;

/// Same-padded 2-D convolution, stride 1, odd square kernel.
///
/// Weights are stored as a `cout × (cin·k·k)` row-major matrix so the forward
/// pass is a single GEMM against the im2col expansion of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    cin: usize,
    cout: usize,
    k: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Gradient (or optimizer moment) buffers matching one [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(layer: &Conv2d) -> Self {
        ConvGrad {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= k);
    }

    pub fn norm_sq(&self) -> f64 {
        self.weight.iter().chain(&self.bias).map(|v| v * v).sum()
    }
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        Conv2d {
            cin,
            cout,
            k,
            weight: vec![0.0; cout * cin * k * k],
            bias: vec![0.0; cout],
        }
    }

    /// Uniform initialization with variance `gain² / fan_in`; zero bias.
    pub fn random(cin: usize, cout: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let mut layer = Conv2d::zeros(cin, cout, k);
        let fan_in = (cin * k * k) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        for w in &mut layer.weight {
            *w = rng.gen_range(-bound..bound);
        }
        layer
    }

    pub fn from_parts(cin: usize, cout: usize, k: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(TcvcError::InvalidArgument(format!("kernel size {k} must be odd")));
        }
        if weight.len() != cout * cin * k * k {
            return Err(TcvcError::shape("Conv2d weight", cout * cin * k * k, weight.len()));
        }
        if bias.len() != cout {
            return Err(TcvcError::shape("Conv2d bias", cout, bias.len()));
        }
        Ok(Conv2d {
            cin,
            cout,
            k,
            weight,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Zeroes the weights and bias in place.
    pub fn zero_(&mut self) {
        self.weight.iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.cin {
            return Err(TcvcError::shape(
                "conv input channels",
                self.cin,
                x.channels(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let cols_owned;
        let cols: &[f64] = if self.k == 1 {
            x.data()
        } else {
            cols_owned = im2col(x, self.k);
            &cols_owned
        };
        let mut out = vec![0.0; self.cout * hw];
        for (o, b) in out.chunks_exact_mut(hw).zip(&self.bias) {
            o.fill(*b);
        }
        gemm(
            self.cout, kk, hw,
            &self.weight, kk as isize, 1,
            cols, hw as isize, 1,
            1.0,
            &mut out, hw as isize,
        );
        Tensor::from_vec(self.cout, h, w, out)
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad: Option<&mut ConvGrad>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        self.check_input(x)?;
        grad_out.ensure_plane(x.height(), x.width(), "conv backward")?;
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let g = grad_out.data();

        let cols_owned;
        let cols: &[f64] = if self.k == 1 {
            x.data()
        } else {
            cols_owned = im2col(x, self.k);
            &cols_owned
        };

        if let Some(pg) = grad {
            // dW += dY · colsᵀ
            gemm(
                self.cout, hw, kk,
                g, hw as isize, 1,
                cols, 1, hw as isize,
                1.0,
                &mut pg.weight, kk as isize,
            );
            for (b, row) in pg.bias.iter_mut().zip(g.chunks_exact(hw)) {
                *b += row.iter().sum::<f64>();
            }
        }

        if !need_input_grad {
            return Ok(None);
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0; kk * hw];
        gemm(
            kk, self.cout, hw,
            &self.weight, 1, kk as isize,
            g, hw as isize, 1,
            0.0,
            &mut dcols, hw as isize,
        );
        let dx = if self.k == 1 {
            dcols
        } else {
            col2im(&dcols, self.cin, h, w, self.k)
        };
        Ok(Some(Tensor::from_vec(self.cin, h, w, dx)?))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the m×k, k×n and m×n extents addressed by the
    // given strides, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n,
            1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), rsc, 1,
        );
    }
}

/// Expands an input into `(cin·k·k) × (h·w)` patch columns with zero padding.
fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for ci in 0..cin {
        let plane = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sr as usize * w..][..w];
                    let dst_row = &mut row[r * w..][..w];
                    let c0 = (-dx).max(0) as usize;
                    let c1 = (w as isize - dx.max(0)) as usize;
                    if c0 < c1 {
                        let s0 = (c0 as isize + dx) as usize;
                        dst_row[c0..c1].copy_from_slice(&src_row[s0..s0 + (c1 - c0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for ci in 0..cin {
        let plane = &mut x[ci * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let c0 = (-dx).max(0) as usize;
                    let c1 = (w as isize - dx.max(0)) as usize;
                    if c0 < c1 {
                        let s0 = (c0 as isize + dx) as usize;
                        let dst = &mut plane[sr as usize * w + s0..][..c1 - c0];
                        for (d, s) in dst.iter_mut().zip(&row[r * w + c0..r * w + c1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}
