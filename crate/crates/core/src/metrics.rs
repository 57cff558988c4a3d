//! Group evaluation: content consistency, prompt adherence and a
//! distributional fidelity score, all on hand-crafted image features.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{caption_values, factor_oracle_decode, Slot};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HIST_BINS: usize = 4;
const BG_WEIGHT: f64 = 0.5;
const FG_WEIGHT: f64 = 1.0;
const EDGE_WEIGHT: f64 = 0.5;
/// Both sets passed to [`fidelity_mmd`] need at least this many images.
pub const MIN_MMD_SET: usize = 50;

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit-norm feature of a `[3, S, S]` image, three blocks each normalized
/// before the whole vector is: the background color (the modal bin of a
/// `4×4×4` RGB histogram), the square-rooted histogram of the remaining
/// pixels, and the `2×2`-pooled gradient magnitude of the channel mean.
pub fn image_features<S: Scalar>(image: &Tensor<S>) -> Result<Vec<f64>> {
    features_with(image, [BG_WEIGHT, FG_WEIGHT, EDGE_WEIGHT])
}

pub fn features_with<S: Scalar>(image: &Tensor<S>, weights: [f64; 3]) -> Result<Vec<f64>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("image_features", image.shape(), &[3]));
    };
    let plane = h * w;
    let d: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let bin = |v: f64| (((v + 1.0) * HIST_BINS as f64 / 2.0).floor() as i64).clamp(0, HIST_BINS as i64 - 1) as usize;
    let colors = HIST_BINS.pow(3);
    let mut hist = vec![0.0f64; colors];
    for p in 0..plane {
        let idx = (bin(d[p]) * HIST_BINS + bin(d[plane + p])) * HIST_BINS + bin(d[2 * plane + p]);
        hist[idx] += 1.0;
    }
    let modal = (0..colors).fold(0, |best, i| if hist[i] > hist[best] { i } else { best });
    let mut bg = vec![0.0; colors];
    bg[modal] = 1.0;
    let mut fg = hist;
    fg[modal] = 0.0;
    fg.iter_mut().for_each(|v| *v = v.sqrt());
    unit(&mut fg);

    let gray: Vec<f64> = (0..plane).map(|p| (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0).collect();
    let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
    let mut edges = vec![0.0; ph * pw];
    for y in 0..h {
        for x in 0..w {
            let g = gray[y * w + x];
            let gx = if x + 1 < w { gray[y * w + x + 1] - g } else { 0.0 };
            let gy = if y + 1 < h { gray[(y + 1) * w + x] - g } else { 0.0 };
            edges[(y / 2) * pw + x / 2] += (gx * gx + gy * gy).sqrt() / 4.0;
        }
    }
    unit(&mut edges);
    let mut out = Vec::with_capacity(2 * colors + edges.len());
    for (block, wt) in [(bg, weights[0]), (fg, weights[1]), (edges, weights[2])] {
        out.extend(block.iter().map(|v| v * wt));
    }
    unit(&mut out);
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Which image pairs are left out when references are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Exclusion {
    /// Drop only reference-reference pairs: `C(n,2) - C(m,2)` pairs remain.
    #[default]
    ReferencePairs,
    /// Drop every pair touching a reference: `C(n-m,2)` pairs remain.
    AnyReference,
}

/// Unordered member pairs counted under `rule`.
pub fn counted_pairs(flags: &[bool], rule: Exclusion) -> Vec<(usize, usize)> {
    let n = flags.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let skip = match rule {
                Exclusion::ReferencePairs => flags[i] && flags[j],
                Exclusion::AnyReference => flags[i] || flags[j],
            };
            if !skip {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub score: f64,
    pub pairs: usize,
}

/// Mean feature cosine over the counted pairs of one group.
pub fn content_consistency_features(features: &[Vec<f64>], flags: &[bool], rule: Exclusion) -> Result<Consistency> {
    let n = features.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("content consistency needs 2 or more images, got {n}")));
    }
    if flags.len() != n {
        return Err(Error::contract(format!("{} reference flags for {n} images", flags.len())));
    }
    let pairs = counted_pairs(flags, rule);
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no image pairs left after exclusion".into()));
    }
    let total: f64 = pairs.iter().map(|&(i, j)| cosine(&features[i], &features[j])).sum();
    Ok(Consistency { score: total / pairs.len() as f64, pairs: pairs.len() })
}

pub fn content_consistency<S: Scalar>(images: &[Tensor<S>], flags: &[bool], rule: Exclusion) -> Result<Consistency> {
    if images.len() < 2 {
        return Err(Error::UndefinedMetric(format!("content consistency needs 2 or more images, got {}", images.len())));
    }
    let feats = images.iter().map(image_features).collect::<Result<Vec<_>>>()?;
    content_consistency_features(&feats, flags, rule)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adherence {
    pub accuracy: f64,
    /// Non-reference members scored.
    pub members: usize,
}

/// Per-slot agreement between decoded factors and captions, averaged over
/// `slots` and the non-reference members.
pub fn prompt_adherence<S: Scalar>(
    images: &[Tensor<S>],
    captions: &[Vec<usize>],
    flags: &[bool],
    slots: &[Slot],
) -> Result<Adherence> {
    if images.len() != captions.len() || images.len() != flags.len() {
        return Err(Error::contract(format!(
            "{} images, {} captions, {} flags",
            images.len(),
            captions.len(),
            flags.len()
        )));
    }
    if slots.is_empty() {
        return Err(Error::UndefinedMetric("no slots selected".into()));
    }
    let mut hits = 0usize;
    let mut members = 0usize;
    for ((img, cap), &is_ref) in images.iter().zip(captions).zip(flags) {
        if is_ref {
            continue;
        }
        let want = caption_values(cap)?;
        let got = factor_oracle_decode(img).values();
        hits += slots.iter().filter(|s| want[s.index()] == got[s.index()]).count();
        members += 1;
    }
    if members == 0 {
        return Err(Error::UndefinedMetric("every member is a reference".into()));
    }
    Ok(Adherence { accuracy: hits as f64 / (members * slots.len()) as f64, members })
}

/// Expected adherence of a decoder that guesses every slot uniformly.
pub fn chance_adherence(slots: &[Slot]) -> f64 {
    slots.iter().map(|s| 1.0 / s.cardinality() as f64).sum::<f64>() / slots.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Unbiased squared MMD with an RBF kernel whose bandwidth is the median
/// pairwise distance of the pooled set (1 if that median is 0).
pub fn fidelity_mmd(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (generated.len(), reference.len());
    if m < MIN_MMD_SET || n < MIN_MMD_SET {
        return Err(Error::contract(format!("MMD needs {MIN_MMD_SET}+ images per set, got {m} and {n}")));
    }
    let pooled: Vec<&Vec<f64>> = generated.iter().chain(reference).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { (dists[mid - 1] + dists[mid]) / 2.0 } else { dists[mid] };
    let sigma = if median > 0.0 { median } else { 1.0 };
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();

    let within = |set: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..set.len() {
            for j in 0..set.len() {
                if i != j {
                    s += k(&set[i], &set[j]);
                }
            }
        }
        s / (set.len() * (set.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in generated {
        for b in reference {
            cross += k(a, b);
        }
    }
    Ok(within(generated) + within(reference) - 2.0 * cross / (m * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub content_consistency: Option<f64>,
    pub prompt_adherence: Option<f64>,
    pub fidelity_mmd: Option<f64>,
    pub groups: usize,
    /// Image pairs behind the consistency mean.
    pub image_pairs: usize,
    /// Image-caption pairs behind the adherence mean.
    pub text_pairs: usize,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// Tab-separated `metric<TAB>value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "content_consistency\t{}\nprompt_adherence\t{}\nfidelity_mmd\t{}\ngroups\t{}\nimage_pairs\t{}\ntext_pairs\t{}\n",
            cell(self.content_consistency),
            cell(self.prompt_adherence),
            cell(self.fidelity_mmd),
            self.groups,
            self.image_pairs,
            self.text_pairs
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub key: String,
    /// `None` when the variant could not be evaluated.
    pub report: Option<EvalReport>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Evaluates every variant, sorted by key. A failing variant becomes an
/// absent row and the rest still run.
pub fn ablation_report<F>(keys: &[String], mut evaluate: F) -> AblationReport
where
    F: FnMut(&str) -> Result<EvalReport>,
{
    let mut keys = keys.to_vec();
    keys.sort();
    let rows = keys
        .into_iter()
        .map(|key| match evaluate(&key) {
            Ok(r) => AblationRow { key, report: Some(r), note: None },
            Err(e) => AblationRow { key, report: None, note: Some(e.to_string()) },
        })
        .collect();
    AblationReport { rows }
}

impl AblationReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.key.len()).max().unwrap_or(0).max("variant".len());
        let mut s = format!("{:<width$}  {:>12}  {:>12}  {:>12}\n", "variant", "consistency", "adherence", "mmd");
        for r in &self.rows {
            match &r.report {
                Some(e) => {
                    let _ = writeln!(
                        s,
                        "{:<width$}  {:>12}  {:>12}  {:>12}",
                        r.key,
                        cell(e.content_consistency),
                        cell(e.prompt_adherence),
                        cell(e.fidelity_mmd)
                    );
                }
                None => {
                    let _ = writeln!(s, "{:<width$}  absent ({})", r.key, r.note.as_deref().unwrap_or("no report"));
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}
