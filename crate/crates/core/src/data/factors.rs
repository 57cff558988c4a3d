use crate::error::{Error, Result};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const PALETTES: [&str; 8] = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"];
pub const STYLES: [&str; 2] = ["filled", "outline"];
pub const QUADRANTS: usize = 4;
pub const SCALES: usize = 3;
pub const SHADES: [f32; 4] = [-0.7, -0.35, 0.0, 0.35];

const HI: f32 = 0.9;
const LO: f32 = -0.7;
const MID: f32 = 0.2;

/// Foreground color of each palette, RGB in `[-1, 1]`.
pub const PALETTE_RGB: [[f32; 3]; 8] = [
    [HI, LO, LO],
    [LO, HI, LO],
    [LO, LO, HI],
    [HI, HI, LO],
    [HI, LO, HI],
    [LO, HI, HI],
    [HI, MID, LO],
    [HI, HI, HI],
];

/// Channel offset of the warm/cool background tint.
pub const TINT_OFFSET: f32 = 0.3;

/// Group-level background tint. It is not written into captions, so it is a
/// correlation members can only share through joint generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tint {
    Warm,
    Cool,
}

impl Tint {
    pub const ALL: [Tint; 2] = [Tint::Warm, Tint::Cool];
}

/// Background RGB for a shade index and tint.
pub fn background_rgb(shade: usize, tint: Tint) -> [f32; 3] {
    let g = SHADES[shade];
    match tint {
        Tint::Warm => [g + TINT_OFFSET, g, g - TINT_OFFSET],
        Tint::Cool => [g - TINT_OFFSET, g, g + TINT_OFFSET],
    }
}

/// Factors shared by every member of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SharedFactors {
    pub shape: usize,
    pub palette: usize,
    pub style: usize,
}

/// Factors drawn independently for each member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemberFactors {
    pub quadrant: usize,
    pub scale: usize,
    pub shade: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FactorSpec {
    pub shared: SharedFactors,
    pub tint: Tint,
    pub members: Vec<MemberFactors>,
}

/// Caption slots, in token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Identity,
    Palette,
    Style,
    Position,
    Scale,
    Background,
}

impl Slot {
    pub const ALL: [Slot; 6] = [Slot::Identity, Slot::Palette, Slot::Style, Slot::Position, Slot::Scale, Slot::Background];
    /// Slots whose value is identical across a group.
    pub const SHARED: [Slot; 3] = [Slot::Identity, Slot::Palette, Slot::Style];

    pub fn cardinality(self) -> usize {
        match self {
            Slot::Identity => SHAPES.len(),
            Slot::Palette => PALETTES.len(),
            Slot::Style => STYLES.len(),
            Slot::Position => QUADRANTS,
            Slot::Scale => SCALES,
            Slot::Background => SHADES.len(),
        }
    }

    /// First token id of this slot.
    pub fn offset(self) -> usize {
        Slot::ALL.iter().take_while(|&&s| s != self).map(|s| s.cardinality()).sum()
    }

    pub fn index(self) -> usize {
        Slot::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Identity => "identity",
            Slot::Palette => "palette",
            Slot::Style => "style",
            Slot::Position => "position",
            Slot::Scale => "scale",
            Slot::Background => "background",
        }
    }
}

pub const CAPTION_LEN: usize = 6;
/// Token used for dropped captions.
pub const NULL_TOKEN: usize = 25;
pub const VOCAB: usize = 26;

/// Token ids `[identity, palette, style, position, scale, background]`.
pub fn caption(shared: SharedFactors, member: MemberFactors) -> Vec<usize> {
    let values = [shared.shape, shared.palette, shared.style, member.quadrant, member.scale, member.shade];
    Slot::ALL.iter().zip(values).map(|(s, v)| s.offset() + v).collect()
}

/// Slot values of a caption (token id minus slot offset).
pub fn caption_values(tokens: &[usize]) -> Result<[usize; CAPTION_LEN]> {
    if tokens.len() != CAPTION_LEN {
        return Err(Error::contract(format!("caption of {} tokens", tokens.len())));
    }
    let mut out = [0; CAPTION_LEN];
    for (i, (&tok, slot)) in tokens.iter().zip(Slot::ALL).enumerate() {
        let v = tok.wrapping_sub(slot.offset());
        if v >= slot.cardinality() {
            return Err(Error::contract(format!("token {tok} is not a {} value", slot.name())));
        }
        out[i] = v;
    }
    Ok(out)
}

pub fn decode_caption(tokens: &[usize]) -> Result<(SharedFactors, MemberFactors)> {
    let v = caption_values(tokens)?;
    Ok((
        SharedFactors { shape: v[0], palette: v[1], style: v[2] },
        MemberFactors { quadrant: v[3], scale: v[4], shade: v[5] },
    ))
}

/// Readable form, e.g. `red filled circle, top-left, small, dark`.
pub fn describe(tokens: &[usize]) -> String {
    match decode_caption(tokens) {
        Err(_) => format!("{tokens:?}"),
        Ok((s, m)) => format!(
            "{} {} {}, {}, {}, {}",
            PALETTES[s.palette],
            STYLES[s.style],
            SHAPES[s.shape],
            ["top-left", "top-right", "bottom-left", "bottom-right"][m.quadrant],
            ["small", "medium", "large"][m.scale],
            ["dark", "dim", "gray", "light"][m.shade],
        ),
    }
}
