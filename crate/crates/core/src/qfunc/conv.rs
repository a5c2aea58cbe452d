//! Same-padded 2D convolution with explicit forward and backward passes.
//!
//! Tensors are flat `[channel][y][x]` slices. Weights are `[out][in][ky][kx]`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// `out = conv(input, weight) + bias`, zero padding, output `h × w`.
pub fn forward(shape: &ConvShape, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (weight, bias) = params.split_at(shape.weight_len());
    let k = shape.kernel;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![0.0; shape.out_channels * plane];
    for co in 0..shape.out_channels {
        let dst = &mut out[co * plane..(co + 1) * plane];
        dst.fill(bias[co]);
        for ci in 0..shape.in_channels {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let oy = ky as isize - pad;
                let y0 = (-oy).max(0) as usize;
                let y1 = (h as isize - oy).min(h as isize).max(0) as usize;
                for kx in 0..k {
                    let wv = weight[((co * shape.in_channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox = kx as isize - pad;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let drow = &mut dst[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + (x0 as isize + ox) as usize..sy * w + (x1 as isize + ox) as usize];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grad_params` and returns the input gradient
/// when `want_input` is set.
pub fn backward(
    shape: &ConvShape,
    params: &[f64],
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    grad_params: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let weight = &params[..shape.weight_len()];
    let (grad_w, grad_b) = grad_params.split_at_mut(shape.weight_len());
    let k = shape.kernel;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut grad_in = want_input.then(|| vec![0.0; shape.in_channels * plane]);
    for co in 0..shape.out_channels {
        let g = &grad_out[co * plane..(co + 1) * plane];
        grad_b[co] += g.iter().sum::<f64>();
        for ci in 0..shape.in_channels {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let oy = ky as isize - pad;
                let y0 = (-oy).max(0) as usize;
                let y1 = (h as isize - oy).min(h as isize).max(0) as usize;
                for kx in 0..k {
                    let widx = ((co * shape.in_channels + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let ox = kx as isize - pad;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let sx0 = (x0 as isize + ox) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (gv, s) in grow.iter().zip(srow) {
                            acc += gv * s;
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let irow = &mut gi[ci * plane + sy * w + sx0..ci * plane + sy * w + sx0 + (x1 - x0)];
                            for (iv, gv) in irow.iter_mut().zip(grow) {
                                *iv += wv * gv;
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    grad_in
}
