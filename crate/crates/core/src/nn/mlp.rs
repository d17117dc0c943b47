//! Residual MLP over the flattened trajectory. Fixed horizon.

use super::{mish_backward, mish_vec, Linear, ParamBuilder};

#[derive(Debug, Clone)]
pub(crate) struct ResidualMlp {
    input: usize,
    layers: Vec<Linear>,
    embs: Vec<Linear>,
    out: Linear,
}

pub(crate) struct MlpTape {
    /// Input to each hidden layer, starting with the flattened trajectory.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    last: Vec<f64>,
}

impl ResidualMlp {
    pub fn new(pb: &mut ParamBuilder, input: usize, widths: &[usize], emb_dim: usize) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut embs = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            layers.push(Linear::new(pb, prev, w));
            embs.push(Linear::new(pb, emb_dim, w));
            prev = w;
        }
        let out = Linear::new(pb, prev, input);
        Self {
            input,
            layers,
            embs,
            out,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input
    }

    pub fn forward(&self, p: &[f64], x: &[f64], batch: usize, memb: &[f64]) -> (Vec<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (layer, emb) in self.layers.iter().zip(&self.embs) {
            let mut z = layer.forward(p, &h, batch);
            for (a, b) in z.iter_mut().zip(emb.forward(p, memb, batch)) {
                *a += b;
            }
            let mut a = mish_vec(&z);
            if layer.din == layer.dout {
                for (a, r) in a.iter_mut().zip(&h) {
                    *a += r;
                }
            }
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
        }
        let y = self.out.forward(p, &h, batch);
        (y, MlpTape { inputs, pre, last: h })
    }

    pub fn backward(
        &self,
        p: &[f64],
        tape: &MlpTape,
        batch: usize,
        memb: &[f64],
        dy: &[f64],
        g: &mut [f64],
        dmemb: &mut [f64],
    ) {
        let mut d = self.out.backward(p, &tape.last, dy, batch, g);
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let dz = mish_backward(&tape.pre[i], &d);
            let dm = self.embs[i].backward(p, memb, &dz, batch, g);
            for (a, b) in dmemb.iter_mut().zip(&dm) {
                *a += b;
            }
            let mut dx = layer.backward(p, &tape.inputs[i], &dz, batch, g);
            if layer.din == layer.dout {
                for (a, r) in dx.iter_mut().zip(&d) {
                    *a += r;
                }
            }
            d = dx;
        }
    }
}
