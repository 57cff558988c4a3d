//! A vanilla single-image DiT on plain `Vec<f64>` matrices, reading the
//! same named parameters as the group model. It knows nothing about groups,
//! masks or the tape.

#![allow(dead_code)]

use gdt_core::model::{position_table, timestep_embedding, ModelConfig, ParamStore, Variant, TIME_FREQ_DIM};
use gdt_core::Tensor;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..other.cols {
                    out[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        Mat::new(self.rows, other.cols, out)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Adds `row` to every row.
    fn add_row(&self, row: &[f64]) -> Mat {
        assert_eq!(row.len(), self.cols);
        Mat::new(self.rows, self.cols, self.data.iter().enumerate().map(|(i, v)| v + row[i % self.cols]).collect())
    }

    fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::new(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    fn mul_row(&self, row: &[f64]) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().enumerate().map(|(i, v)| v * row[i % self.cols]).collect())
    }

    fn rows_range(&self, start: usize, len: usize) -> Mat {
        Mat::new(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }

    fn cols_range(&self, start: usize, len: usize) -> Mat {
        let mut out = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            out.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + start + len]);
        }
        Mat::new(self.rows, len, out)
    }

    fn vstack(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols, b.cols);
        let mut d = a.data.clone();
        d.extend_from_slice(&b.data);
        Mat::new(a.rows + b.rows, a.cols, d)
    }

    fn hstack(parts: &[Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut d = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                d.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Mat::new(rows, cols, d)
    }

    fn transpose(&self) -> Mat {
        let mut d = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                d[c * self.rows + r] = self.at(r, c);
            }
        }
        Mat::new(self.cols, self.rows, d)
    }
}

const LN_EPS: f64 = 1e-5;

fn layer_norm(x: &Mat) -> Mat {
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.cols as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()));
    }
    Mat::new(x.rows, x.cols, out)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Mat::new(x.rows, x.cols, out)
}

struct Weights<'a> {
    params: &'a ParamStore<f64>,
}

impl Weights<'_> {
    fn mat(&self, name: &str) -> Mat {
        let t = self.params.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let s = t.shape();
        assert_eq!(s.len(), 2, "{name}");
        Mat::new(s[0], s[1], t.data().to_vec())
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.params.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
    }

    fn linear(&self, x: &Mat, prefix: &str, w: &str, b: &str) -> Mat {
        x.matmul(&self.mat(&format!("{prefix}.{w}"))).add_row(&self.vec(&format!("{prefix}.{b}")))
    }

    fn attention(&self, q_in: &Mat, kv_in: &Mat, prefix: &str, heads: usize) -> Mat {
        let q = self.linear(q_in, prefix, "wq", "bq");
        let k = self.linear(kv_in, prefix, "wk", "bk");
        let v = self.linear(kv_in, prefix, "wv", "bv");
        let dh = q.cols / heads;
        let outs: Vec<Mat> = (0..heads)
            .map(|h| {
                let (qh, kh, vh) = (q.cols_range(h * dh, dh), k.cols_range(h * dh, dh), v.cols_range(h * dh, dh));
                let logits = qh.matmul(&kh.transpose()).map(|x| x / (dh as f64).sqrt());
                softmax_rows(&logits).matmul(&vh)
            })
            .collect();
        self.linear(&Mat::hstack(&outs), prefix, "wo", "bo")
    }

    fn mlp(&self, x: &Mat, prefix: &str) -> Mat {
        let h = self.linear(x, prefix, "w1", "b1").map(gelu);
        self.linear(&h, prefix, "w2", "b2")
    }

    /// `k` modulation vectors from `c`.
    fn modulation(&self, c: &Mat, prefix: &str, k: usize) -> Vec<Vec<f64>> {
        let m = self.linear(c, prefix, "w", "b");
        let d = m.cols / k;
        (0..k).map(|i| m.data[i * d..(i + 1) * d].to_vec()).collect()
    }
}

fn modulate(x: &Mat, shift: &[f64], scale: &[f64]) -> Mat {
    let one_plus: Vec<f64> = scale.iter().map(|s| 1.0 + s).collect();
    layer_norm(x).mul_row(&one_plus).add_row(shift)
}

/// `[C, H, W]` to `[(H/p)·(W/p), p·p·C]`, patch pixels row-major, channels
/// innermost.
pub fn to_patches(img: &Tensor<f64>, p: usize) -> Mat {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let mut rows = Vec::with_capacity(img.numel());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        rows.push(img.data()[ch * h * w + (gy * p + py) * w + gx * p + px]);
                    }
                }
            }
        }
    }
    Mat::new(gh * gw, p * p * c, rows)
}

pub fn from_patches(m: &Mat, p: usize, size: usize, c: usize) -> Tensor<f64> {
    let g = size / p;
    let mut data = vec![0.0; c * size * size];
    for gy in 0..g {
        for gx in 0..g {
            let row = gy * g + gx;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        let col = (py * p + px) * c + ch;
                        data[ch * size * size + (gy * p + py) * size + gx * p + px] = m.at(row, col);
                    }
                }
            }
        }
    }
    Tensor::new([c, size, size], data).unwrap()
}

/// Single-image forward: `[C_in, H, W]` input, one context, model time.
pub fn vanilla_dit(cfg: &ModelConfig, params: &ParamStore<f64>, input: &Tensor<f64>, context: &[usize], time: f64) -> Tensor<f64> {
    let w = Weights { params };
    let d = cfg.dim;
    let pos = position_table::<f64>(cfg.grid(), d);
    let pos = Mat::new(cfg.tokens_per_image(), d, pos.data().to_vec());
    let mut x = w.linear(&to_patches(input, cfg.patch), "patch_embed", "w", "b").add(&pos);

    let table = w.mat("ctx_embed.table");
    let cpos = w.mat("ctx_embed.pos");
    let mut ctx_rows = Vec::new();
    for (i, &id) in context.iter().enumerate() {
        ctx_rows.extend((0..d).map(|j| table.at(id, j) + cpos.at(i, j)));
    }
    let ctx = Mat::new(context.len(), d, ctx_rows);

    let feats = timestep_embedding::<f64>(time, TIME_FREQ_DIM);
    let f = Mat::new(1, TIME_FREQ_DIM, feats.data().to_vec());
    let temb = w.linear(&w.linear(&f, "time_mlp", "w1", "b1").map(silu), "time_mlp", "w2", "b2");
    let c = temb.map(silu);

    match cfg.variant {
        Variant::EncoderOnly => {
            let mut seq = Mat::vstack(&ctx, &x);
            for b in 0..cfg.depth {
                let p = format!("blocks.{b}");
                let m = w.modulation(&c, &format!("{p}.ada"), 6);
                let h = modulate(&seq, &m[0], &m[1]);
                seq = seq.add(&w.attention(&h, &h, &format!("{p}.attn"), cfg.heads).mul_row(&m[2]));
                let h = modulate(&seq, &m[3], &m[4]);
                seq = seq.add(&w.mlp(&h, &format!("{p}.mlp")).mul_row(&m[5]));
            }
            x = seq.rows_range(context.len(), cfg.tokens_per_image());
        }
        Variant::EncoderDecoder => {
            for b in 0..cfg.depth {
                let p = format!("blocks.{b}");
                let m = w.modulation(&c, &format!("{p}.ada"), 6);
                let h = modulate(&x, &m[0], &m[1]);
                x = x.add(&w.attention(&h, &h, &format!("{p}.attn"), cfg.heads).mul_row(&m[2]));
                if !context.is_empty() {
                    let q = layer_norm(&x)
                        .mul_row(&w.vec(&format!("{p}.cross_norm.gain")))
                        .add_row(&w.vec(&format!("{p}.cross_norm.bias")));
                    x = x.add(&w.attention(&q, &ctx, &format!("{p}.cross"), cfg.heads));
                }
                let h = modulate(&x, &m[3], &m[4]);
                x = x.add(&w.mlp(&h, &format!("{p}.mlp")).mul_row(&m[5]));
            }
        }
    }
    let m = w.modulation(&c, "final.ada", 2);
    let out = w.linear(&modulate(&x, &m[0], &m[1]), "final.linear", "w", "b");
    from_patches(&out, cfg.patch, cfg.image_size, cfg.channels)
}
