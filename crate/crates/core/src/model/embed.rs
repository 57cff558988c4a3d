use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits `[C, H, W]` into raster-ordered, non-overlapping `patch × patch`
/// tiles, flattened as `(py, px, c)`: `[(H/p)·(W/p), p·p·C]`.
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::config(format!("patchify expects [C, H, W], got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("patch {patch} does not tile a {h}x{w} image")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Tensor::new([gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`] for a square image of side `size`.
pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, patch: usize, size: usize, channels: usize) -> Result<Tensor<S>> {
    let g = if patch == 0 { 0 } else { size / patch };
    if patch == 0 || size % patch != 0 || tokens.shape() != [g * g, patch * patch * channels] {
        return Err(Error::config(format!(
            "cannot unpatchify {:?} into {channels}x{size}x{size} with patch {patch}",
            tokens.shape()
        )));
    }
    let src = tokens.data();
    let mut out = vec![S::zero(); channels * size * size];
    let mut i = 0;
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    for ch in 0..channels {
                        out[(ch * size + y) * size + x] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Tensor::new([channels, size, size], out)
}

fn sincos(pos: f64, width: usize, out: &mut Vec<f64>) {
    let half = width / 2;
    for k in 0..half {
        let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
        out.push((pos * omega).sin());
    }
    for k in 0..half {
        let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
        out.push((pos * omega).cos());
    }
}

/// Fixed 2D sine-cosine table `[grid², dim]`: the first half of each row
/// encodes the patch row, the second half the patch column. Shared by every
/// member of a group.
pub fn position_table<S: Scalar>(grid: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            sincos(gy as f64, dim / 2, &mut data);
            sincos(gx as f64, dim / 2, &mut data);
        }
    }
    Tensor::new([grid * grid, dim], data.into_iter().map(S::lit).collect()).expect("table size")
}

/// Sinusoidal features of a timestep value: `dim/2` cosines followed by
/// `dim/2` sines on geometrically spaced frequencies.
pub fn timestep_embedding<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let mut data: Vec<S> = freqs.iter().map(|f| S::lit((t * f).cos())).collect();
    data.extend(freqs.iter().map(|f| S::lit((t * f).sin())));
    data.resize(dim, S::zero());
    Tensor::new([dim], data).expect("embedding size")
}
