//! Step and return-condition embeddings shared by both architectures.

use serde::{Deserialize, Serialize};

use super::{mish_backward, mish_vec, sinusoidal_embedding, Linear, ParamBuilder};

/// How the condition embedding joins the step embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    #[default]
    Sum,
    Concat,
}

#[derive(Debug, Clone)]
pub(crate) struct Embedder {
    step_dim: usize,
    cond_dim: usize,
    injection: Injection,
    t1: Linear,
    t2: Linear,
    c1: Linear,
    c2: Linear,
}

pub(crate) struct EmbedCache {
    batch: usize,
    sin: Vec<f64>,
    t1: Vec<f64>,
    t1m: Vec<f64>,
    rows: Vec<usize>,
    c_in: Vec<f64>,
    c1: Vec<f64>,
    c1m: Vec<f64>,
    emb: Vec<f64>,
}

impl Embedder {
    pub fn new(pb: &mut ParamBuilder, step_dim: usize, cond_dim: usize, injection: Injection) -> Self {
        let t1 = Linear::new(pb, step_dim, 2 * step_dim);
        let t2 = Linear::new(pb, 2 * step_dim, step_dim);
        let c1 = Linear::new(pb, 1, cond_dim);
        let c2 = Linear::new(pb, cond_dim, cond_dim);
        Self {
            step_dim,
            cond_dim,
            injection,
            t1,
            t2,
            c1,
            c2,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.injection {
            Injection::Sum => self.step_dim,
            Injection::Concat => self.step_dim + self.cond_dim,
        }
    }

    /// Returns `mish(emb)` as `[batch][out_dim]`. Null conditions (`None`)
    /// contribute a zero embedding and never reach the condition encoder.
    pub fn forward(&self, p: &[f64], steps: &[usize], conds: &[Option<f64>]) -> (Vec<f64>, EmbedCache) {
        let batch = steps.len();
        let sin = sinusoidal_embedding(steps, self.step_dim);
        let t1 = self.t1.forward(p, &sin, batch);
        let t1m = mish_vec(&t1);
        let t = self.t2.forward(p, &t1m, batch);

        let rows: Vec<usize> = (0..batch).filter(|&b| conds[b].is_some()).collect();
        let c_in: Vec<f64> = rows.iter().map(|&b| conds[b].unwrap_or(0.0)).collect();
        let (c1, c1m, c) = if rows.is_empty() {
            (Vec::new(), Vec::new(), Vec::new())
        } else {
            let c1 = self.c1.forward(p, &c_in, rows.len());
            let c1m = mish_vec(&c1);
            let c = self.c2.forward(p, &c1m, rows.len());
            (c1, c1m, c)
        };

        let e = self.out_dim();
        let mut emb = vec![0.0; batch * e];
        for b in 0..batch {
            emb[b * e..b * e + self.step_dim].copy_from_slice(&t[b * self.step_dim..(b + 1) * self.step_dim]);
        }
        let offset = match self.injection {
            Injection::Sum => 0,
            Injection::Concat => self.step_dim,
        };
        for (j, &b) in rows.iter().enumerate() {
            let dst = &mut emb[b * e + offset..b * e + offset + self.cond_dim];
            for (d, s) in dst.iter_mut().zip(&c[j * self.cond_dim..(j + 1) * self.cond_dim]) {
                *d += s;
            }
        }
        let memb = mish_vec(&emb);
        let cache = EmbedCache {
            batch,
            sin,
            t1,
            t1m,
            rows,
            c_in,
            c1,
            c1m,
            emb,
        };
        (memb, cache)
    }

    pub fn backward(&self, p: &[f64], cache: &EmbedCache, dmemb: &[f64], g: &mut [f64]) {
        let batch = cache.batch;
        let e = self.out_dim();
        let demb = mish_backward(&cache.emb, dmemb);

        let mut dt = vec![0.0; batch * self.step_dim];
        for b in 0..batch {
            dt[b * self.step_dim..(b + 1) * self.step_dim].copy_from_slice(&demb[b * e..b * e + self.step_dim]);
        }
        let dt1m = self.t2.backward(p, &cache.t1m, &dt, batch, g);
        let dt1 = mish_backward(&cache.t1, &dt1m);
        self.t1.backward(p, &cache.sin, &dt1, batch, g);

        if cache.rows.is_empty() {
            return;
        }
        let offset = match self.injection {
            Injection::Sum => 0,
            Injection::Concat => self.step_dim,
        };
        let mut dc = Vec::with_capacity(cache.rows.len() * self.cond_dim);
        for &b in &cache.rows {
            dc.extend_from_slice(&demb[b * e + offset..b * e + offset + self.cond_dim]);
        }
        let n = cache.rows.len();
        let dc1m = self.c2.backward(p, &cache.c1m, &dc, n, g);
        let dc1 = mish_backward(&cache.c1, &dc1m);
        self.c1.backward(p, &cache.c_in, &dc1, n, g);
    }
}
