use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Context,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo {
    pub member: usize,
    pub kind: TokenKind,
}

/// Token bookkeeping for one group of `n` members.
///
/// The joint sequence is ordered `(c_1, x_1, c_2, x_2, ..)`: each member's
/// context tokens followed by its image tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    img_tokens: usize,
    ctx_tokens: Vec<usize>,
}

impl GroupLayout {
    pub fn new(img_tokens: usize, ctx_tokens: Vec<usize>) -> Result<Self> {
        if ctx_tokens.is_empty() {
            return Err(Error::contract("group layout needs at least one member"));
        }
        Ok(GroupLayout { img_tokens, ctx_tokens })
    }

    pub fn uniform(n: usize, img_tokens: usize, ctx_tokens: usize) -> Result<Self> {
        Self::new(img_tokens, vec![ctx_tokens; n])
    }

    pub fn n(&self) -> usize {
        self.ctx_tokens.len()
    }

    pub fn img_tokens(&self) -> usize {
        self.img_tokens
    }

    pub fn ctx_tokens(&self) -> &[usize] {
        &self.ctx_tokens
    }

    pub fn ctx_total(&self) -> usize {
        self.ctx_tokens.iter().sum()
    }

    /// Length of the joint context + image sequence used by the encoder-only
    /// variant.
    pub fn joint_len(&self) -> usize {
        self.ctx_total() + self.n() * self.img_tokens
    }

    /// Length of the image-only sequence used by the encoder-decoder variant.
    pub fn image_len(&self) -> usize {
        self.n() * self.img_tokens
    }

    /// Start of member `i`'s block (its first context token) in the joint
    /// sequence.
    pub fn member_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.n());
        let mut at = 0;
        for &c in &self.ctx_tokens {
            offsets.push(at);
            at += c + self.img_tokens;
        }
        offsets
    }

    /// Start of member `i`'s image tokens in the joint sequence.
    pub fn joint_image_offsets(&self) -> Vec<usize> {
        self.member_offsets()
            .into_iter()
            .zip(&self.ctx_tokens)
            .map(|(o, &c)| o + c)
            .collect()
    }

    /// Start of member `i`'s tokens in the concatenated image-only sequence.
    pub fn image_offsets(&self) -> Vec<usize> {
        (0..self.n()).map(|i| i * self.img_tokens).collect()
    }

    /// Per-member segment lengths of the joint sequence, alternating
    /// context and image: `[c_1, L, c_2, L, ..]`.
    pub fn joint_segments(&self) -> Vec<usize> {
        self.ctx_tokens.iter().flat_map(|&c| [c, self.img_tokens]).collect()
    }

    pub fn tokens(&self) -> Vec<TokenInfo> {
        let mut out = Vec::with_capacity(self.joint_len());
        for (member, &c) in self.ctx_tokens.iter().enumerate() {
            out.extend((0..c).map(|_| TokenInfo { member, kind: TokenKind::Context }));
            out.extend((0..self.img_tokens).map(|_| TokenInfo { member, kind: TokenKind::Image }));
        }
        out
    }
}

/// Boolean attention mask; `true` means the query row may attend to the key
/// column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        AttentionMask { rows, cols, bits }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        AttentionMask { rows, cols, bits: vec![true; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| (r + 1..self.cols).all(|c| self.get(r, c) == self.get(c, r)))
    }

    pub fn diagonal_all_true(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| self.get(i, i))
    }

    pub fn check_row_coverage(&self) -> Result<()> {
        match (0..self.rows).find(|&r| !self.row(r).iter().any(|&b| b)) {
            Some(r) => Err(Error::InvalidMask(format!("row {r} masks every key"))),
            None => Ok(()),
        }
    }

    /// One line of `0`/`1` characters per row.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            s.extend(self.row(r).iter().map(|&b| if b { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    pub fn from_grid(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let cols = lines.first().map_or(0, |l| l.len());
        let mut bits = Vec::with_capacity(lines.len() * cols);
        for (i, line) in lines.iter().enumerate() {
            if line.len() != cols {
                return Err(Error::format("mask grid", format!("row {i} has {} columns, expected {cols}", line.len())));
            }
            for ch in line.chars() {
                bits.push(match ch {
                    '1' => true,
                    '0' => false,
                    other => return Err(Error::format("mask grid", format!("unexpected character {other:?}"))),
                });
            }
        }
        Ok(AttentionMask { rows: lines.len(), cols, bits })
    }
}

/// Group attention mask over the joint sequence: two tokens may attend to
/// each other iff they belong to the same member, or both are image tokens.
pub fn build_group_mask(layout: &GroupLayout) -> AttentionMask {
    let tokens = layout.tokens();
    let s = tokens.len();
    AttentionMask::from_fn(s, s, |p, q| {
        let (a, b) = (tokens[p], tokens[q]);
        a.member == b.member || (a.kind == TokenKind::Image && b.kind == TokenKind::Image)
    })
}

/// Mask that confines attention to each member's own tokens.
pub fn block_diagonal_mask(layout: &GroupLayout) -> AttentionMask {
    let tokens = layout.tokens();
    let s = tokens.len();
    AttentionMask::from_fn(s, s, |p, q| tokens[p].member == tokens[q].member)
}
