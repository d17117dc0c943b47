//! Temporal 1-D convolutional U-Net over waypoints.

use super::{
    add_channel_bias, channel_bias_backward, mish_backward, mish_vec, upsample2, upsample2_backward, Act, Conv1d,
    ConvCache, GroupNorm, Linear, NormCache, ParamBuilder,
};

const GROUPS: usize = 8;

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    gn1: GroupNorm,
    conv2: Conv1d,
    gn2: GroupNorm,
    emb: Linear,
    skip: Option<Conv1d>,
}

struct ResCache {
    c1: ConvCache,
    g1: NormCache,
    n1: Vec<f64>,
    c2: ConvCache,
    g2: NormCache,
    n2: Vec<f64>,
    skip: Option<ConvCache>,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, kernel: usize, emb_dim: usize) -> Self {
        Self {
            conv1: Conv1d::new(pb, cin, cout, kernel, 1),
            gn1: GroupNorm::new(pb, cout, GROUPS),
            conv2: Conv1d::new(pb, cout, cout, kernel, 1),
            gn2: GroupNorm::new(pb, cout, GROUPS),
            emb: Linear::new(pb, emb_dim, cout),
            skip: (cin != cout).then(|| Conv1d::new(pb, cin, cout, 1, 1)),
        }
    }

    fn forward(&self, p: &[f64], x: &Act, memb: &[f64]) -> (Act, ResCache) {
        let (a1, c1) = self.conv1.forward(p, x);
        let (n1, g1) = self.gn1.forward(p, &a1);
        let mut h = Act {
            data: mish_vec(&n1.data),
            ..n1.like()
        };
        let e = self.emb.forward(p, memb, x.b);
        add_channel_bias(&mut h, &e);
        let (a2, c2) = self.conv2.forward(p, &h);
        let (n2, g2) = self.gn2.forward(p, &a2);
        let mut out = Act {
            data: mish_vec(&n2.data),
            ..n2.like()
        };
        let skip = match &self.skip {
            Some(conv) => {
                let (r, cache) = conv.forward(p, x);
                out.add_assign(&r);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        let cache = ResCache {
            c1,
            g1,
            n1: n1.data,
            c2,
            g2,
            n2: n2.data,
            skip,
        };
        (out, cache)
    }

    fn backward(
        &self,
        p: &[f64],
        cache: &ResCache,
        memb: &[f64],
        dout: &Act,
        g: &mut [f64],
        dmemb: &mut [f64],
        need_dx: bool,
    ) -> Option<Act> {
        let dn2 = Act {
            data: mish_backward(&cache.n2, &dout.data),
            ..dout.like()
        };
        let da2 = self.gn2.backward(p, &cache.g2, &dn2, g);
        let dh = self.conv2.backward(p, &cache.c2, &da2, g, true).expect("dx requested");
        let de = channel_bias_backward(&dh);
        let dm = self.emb.backward(p, memb, &de, dh.b, g);
        for (a, b) in dmemb.iter_mut().zip(&dm) {
            *a += b;
        }
        let dn1 = Act {
            data: mish_backward(&cache.n1, &dh.data),
            ..dh.like()
        };
        let da1 = self.gn1.backward(p, &cache.g1, &dn1, g);
        let dx = self.conv1.backward(p, &cache.c1, &da1, g, need_dx);
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => {
                let dr = conv.backward(p, sc, dout, g, need_dx);
                match (dx, dr) {
                    (Some(mut dx), Some(dr)) => {
                        dx.add_assign(&dr);
                        Some(dx)
                    }
                    _ => None,
                }
            }
            _ => dx.map(|mut dx| {
                dx.add_assign(dout);
                dx
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TemporalUnet {
    widths: Vec<usize>,
    enc: Vec<ResBlock>,
    downs: Vec<Conv1d>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    ups: Vec<Conv1d>,
    out: Conv1d,
}

pub(crate) struct UnetTape {
    enc: Vec<ResCache>,
    downs: Vec<ConvCache>,
    mid: ResCache,
    dec: Vec<ResCache>,
    ups: Vec<ConvCache>,
    out: ConvCache,
}

impl TemporalUnet {
    pub fn new(pb: &mut ParamBuilder, dims: usize, widths: &[usize], kernel: usize, emb_dim: usize) -> Self {
        let levels = widths.len();
        let mut enc = Vec::with_capacity(levels);
        let mut downs = Vec::new();
        let mut prev = dims;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(ResBlock::new(pb, prev, w, kernel, emb_dim));
            if i + 1 < levels {
                downs.push(Conv1d::new(pb, w, w, 3, 2));
            }
            prev = w;
        }
        let mid = ResBlock::new(pb, prev, prev, kernel, emb_dim);
        let mut dec = Vec::with_capacity(levels);
        let mut ups = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            dec.push(ResBlock::new(pb, 2 * w, w, kernel, emb_dim));
            if i > 0 {
                ups.push(Conv1d::new(pb, w, widths[i - 1], 3, 1));
            }
        }
        let out = Conv1d::new(pb, widths[0], dims, 1, 1);
        Self {
            widths: widths.to_vec(),
            enc,
            downs,
            mid,
            dec,
            ups,
            out,
        }
    }

    /// Horizons must halve cleanly at every downsampling level.
    pub fn supports_horizon(&self, n: usize) -> bool {
        let f = 1usize << (self.widths.len() - 1);
        n >= f && n % f == 0
    }

    pub fn forward(&self, p: &[f64], x: &Act, memb: &[f64]) -> (Act, UnetTape) {
        let levels = self.widths.len();
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(levels);
        let mut enc = Vec::with_capacity(levels);
        let mut downs = Vec::new();
        for i in 0..levels {
            let (y, c) = self.enc[i].forward(p, &h, memb);
            enc.push(c);
            h = y;
            skips.push(h.clone());
            if i + 1 < levels {
                let (y, c) = self.downs[i].forward(p, &h);
                downs.push(c);
                h = y;
            }
        }
        let (y, mid) = self.mid.forward(p, &h, memb);
        h = y;
        let mut dec: Vec<Option<ResCache>> = (0..levels).map(|_| None).collect();
        let mut ups: Vec<Option<ConvCache>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        for i in (0..levels).rev() {
            let cat = h.cat(&skips[i]);
            let (y, c) = self.dec[i].forward(p, &cat, memb);
            dec[i] = Some(c);
            h = y;
            if i > 0 {
                let (y, c) = self.ups[i - 1].forward(p, &upsample2(&h));
                ups[i - 1] = Some(c);
                h = y;
            }
        }
        let (y, out) = self.out.forward(p, &h);
        let tape = UnetTape {
            enc,
            downs,
            mid,
            dec: dec.into_iter().map(|c| c.expect("every level decoded")).collect(),
            ups: ups.into_iter().map(|c| c.expect("every level upsampled")).collect(),
            out,
        };
        (y, tape)
    }

    pub fn backward(&self, p: &[f64], tape: &UnetTape, memb: &[f64], dy: &Act, g: &mut [f64], dmemb: &mut [f64]) {
        let levels = self.widths.len();
        let mut d = self.out.backward(p, &tape.out, dy, g, true).expect("dx requested");
        let mut dskips: Vec<Option<Act>> = (0..levels).map(|_| None).collect();
        for i in 0..levels {
            if i > 0 {
                let du = self.ups[i - 1].backward(p, &tape.ups[i - 1], &d, g, true).expect("dx requested");
                d = upsample2_backward(&du);
            }
            let dcat = self.dec[i]
                .backward(p, &tape.dec[i], memb, &d, g, dmemb, true)
                .expect("dx requested");
            let (dh, ds) = dcat.split(self.widths[i]);
            d = dh;
            dskips[i] = Some(ds);
        }
        d = self.mid.backward(p, &tape.mid, memb, &d, g, dmemb, true).expect("dx requested");
        for i in (0..levels).rev() {
            if i + 1 < levels {
                d = self.downs[i].backward(p, &tape.downs[i], &d, g, true).expect("dx requested");
            }
            d.add_assign(dskips[i].as_ref().expect("filled above"));
            let need_dx = i > 0;
            match self.enc[i].backward(p, &tape.enc[i], memb, &d, g, dmemb, need_dx) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}
