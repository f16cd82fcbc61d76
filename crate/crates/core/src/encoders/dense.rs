use std::ops::Range;

/// Affine layer `y = W x + b` addressing a row-major `out x inp` weight and
/// an `out` bias inside a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub out: usize,
    pub inp: usize,
}

impl Dense {
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        let w = &params[self.w.clone()];
        let b = &params[self.b.clone()];
        w.chunks_exact(self.inp)
            .zip(b)
            .map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Accumulates dW += g x^T and db += g; returns W^T g.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &[f64], g: &[f64]) -> Vec<f64> {
        let w = &params[self.w.clone()];
        let mut gx = vec![0.0; self.inp];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &w[o * self.inp..(o + 1) * self.inp];
            let grow = &mut grads[self.w.start + o * self.inp..self.w.start + (o + 1) * self.inp];
            for ((gw, xi), (gxi, wi)) in grow.iter_mut().zip(x).zip(gx.iter_mut().zip(row)) {
                *gw += go * xi;
                *gxi += go * wi;
            }
            grads[self.b.start + o] += go;
        }
        gx
    }
}

impl Dense {
    /// Accumulates dW += g x^T and db += g without forming W^T g.
    pub fn backward_params(&self, grads: &mut [f64], x: &[f64], g: &[f64]) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let grow = &mut grads[self.w.start + o * self.inp..self.w.start + (o + 1) * self.inp];
            for (gw, xi) in grow.iter_mut().zip(x) {
                *gw += go * xi;
            }
            grads[self.b.start + o] += go;
        }
    }
}

pub fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// dL/d(pre-activation) from dL/d(activation) for tanh.
pub fn tanh_backward(act: &[f64], g: &[f64]) -> Vec<f64> {
    act.iter().zip(g).map(|(a, gi)| gi * (1.0 - a * a)).collect()
}
