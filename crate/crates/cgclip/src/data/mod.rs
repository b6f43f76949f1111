//! Synthetic attribute-identity corpus: generation, on-disk format, and
//! batch sampling.
//!
//! Every identity is a unique tuple of rendered attributes. Coarse attributes
//! (uniform and team color) fill large image regions; fine attributes (chest
//! number glyph, hair, shoe and sock color) occupy a few pixels each, so
//! telling near-duplicate identities apart hinges on small cues. Captions are
//! closed-vocabulary token sequences that enumerate exactly those attribute
//! values.

mod format;
mod sampler;
mod synthetic;

pub use format::{load_dataset, read_tensor_f32, save_dataset, write_tensor_f32};
pub use sampler::{
    pk_sample, sample_frame_indices, split_tracklets, subsample_identities, Batch, PkSampler,
};
pub use synthetic::gen_synthetic_dataset;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const UNIFORM_VALUES: usize = 8;
pub const TEAM_VALUES: usize = 4;
pub const NUMBER_VALUES: usize = 10;
pub const HAIR_VALUES: usize = 4;
pub const SHOE_VALUES: usize = 6;
pub const SOCK_VALUES: usize = 6;

pub const SOS_TOKEN: usize = 0;
pub const EOS_TOKEN: usize = 1;
const ATTR_TOKEN_BASE: usize = 2;

/// First identity token; identity `y` maps to `ID_TOKEN_BASE + y`.
pub const ID_TOKEN_BASE: usize =
    ATTR_TOKEN_BASE + UNIFORM_VALUES + TEAM_VALUES + NUMBER_VALUES + HAIR_VALUES + SHOE_VALUES + SOCK_VALUES;

/// Vocabulary size for a corpus with `y` identities.
pub fn vocab_size(y: usize) -> usize {
    ID_TOKEN_BASE + y
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttrKind {
    Uniform,
    Team,
    Number,
    Hair,
    Shoe,
    Sock,
}

impl AttrKind {
    pub const FINE: [AttrKind; 4] = [AttrKind::Number, AttrKind::Hair, AttrKind::Shoe, AttrKind::Sock];

    pub fn cardinality(self) -> usize {
        match self {
            AttrKind::Uniform => UNIFORM_VALUES,
            AttrKind::Team => TEAM_VALUES,
            AttrKind::Number => NUMBER_VALUES,
            AttrKind::Hair => HAIR_VALUES,
            AttrKind::Shoe => SHOE_VALUES,
            AttrKind::Sock => SOCK_VALUES,
        }
    }

    fn token_offset(self) -> usize {
        let mut off = ATTR_TOKEN_BASE;
        for kind in [
            AttrKind::Uniform,
            AttrKind::Team,
            AttrKind::Number,
            AttrKind::Hair,
            AttrKind::Shoe,
            AttrKind::Sock,
        ] {
            if kind == self {
                return off;
            }
            off += kind.cardinality();
        }
        unreachable!()
    }
}

/// Full attribute tuple of one identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub uniform: usize,
    pub team: usize,
    pub number: usize,
    pub hair: usize,
    pub shoe: usize,
    pub sock: usize,
}

impl Attributes {
    pub fn get(&self, kind: AttrKind) -> usize {
        match kind {
            AttrKind::Uniform => self.uniform,
            AttrKind::Team => self.team,
            AttrKind::Number => self.number,
            AttrKind::Hair => self.hair,
            AttrKind::Shoe => self.shoe,
            AttrKind::Sock => self.sock,
        }
    }

    pub fn set(&mut self, kind: AttrKind, value: usize) {
        match kind {
            AttrKind::Uniform => self.uniform = value,
            AttrKind::Team => self.team = value,
            AttrKind::Number => self.number = value,
            AttrKind::Hair => self.hair = value,
            AttrKind::Shoe => self.shoe = value,
            AttrKind::Sock => self.sock = value,
        }
    }

    /// Attribute tokens in canonical caption order.
    pub fn tokens(&self) -> Vec<usize> {
        [
            AttrKind::Uniform,
            AttrKind::Team,
            AttrKind::Number,
            AttrKind::Hair,
            AttrKind::Shoe,
            AttrKind::Sock,
        ]
        .into_iter()
        .map(|kind| token_for(kind, self.get(kind)))
        .collect()
    }

    /// Reconstructs the tuple from any ordering of its attribute tokens.
    pub fn from_tokens(tokens: &[usize]) -> Result<Attributes> {
        let mut attrs = Attributes {
            uniform: usize::MAX,
            team: usize::MAX,
            number: usize::MAX,
            hair: usize::MAX,
            shoe: usize::MAX,
            sock: usize::MAX,
        };
        for &tok in tokens {
            if let Some((kind, value)) = decode_token(tok) {
                attrs.set(kind, value);
            }
        }
        for kind in [
            AttrKind::Uniform,
            AttrKind::Team,
            AttrKind::Number,
            AttrKind::Hair,
            AttrKind::Shoe,
            AttrKind::Sock,
        ] {
            if attrs.get(kind) == usize::MAX {
                return Err(Error::Data(format!("caption lacks a {:?} token", kind)));
            }
        }
        Ok(attrs)
    }
}

pub fn token_for(kind: AttrKind, value: usize) -> usize {
    debug_assert!(value < kind.cardinality());
    kind.token_offset() + value
}

pub fn decode_token(token: usize) -> Option<(AttrKind, usize)> {
    for kind in [
        AttrKind::Uniform,
        AttrKind::Team,
        AttrKind::Number,
        AttrKind::Hair,
        AttrKind::Shoe,
        AttrKind::Sock,
    ] {
        let off = kind.token_offset();
        if (off..off + kind.cardinality()).contains(&token) {
            return Some((kind, token - off));
        }
    }
    None
}

pub fn identity_token(label: usize) -> usize {
    ID_TOKEN_BASE + label
}

/// Generation settings; a copy is echoed into the manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenConfig {
    pub identities: usize,
    pub tracklets_per_identity: usize,
    pub frames_per_tracklet: usize,
    pub hard_split: bool,
    pub noise: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub max_tracklet_len: usize,
    pub captions_per_identity: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            identities: 16,
            tracklets_per_identity: 8,
            frames_per_tracklet: 4,
            hard_split: false,
            noise: 0.05,
            seed: 0,
            height: 32,
            width: 16,
            max_tracklet_len: 50,
            captions_per_identity: 10,
        }
    }
}

/// One rendered image: `height * width * 3` values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Identity {
    pub label: usize,
    pub attrs: Attributes,
}

#[derive(Clone, Debug)]
pub struct Tracklet {
    pub id: usize,
    pub identity: usize,
    pub camera: usize,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug)]
pub struct Caption {
    pub identity: usize,
    /// Full sequence including the SOS and single EOS markers.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GenConfig,
    pub identities: Vec<Identity>,
    pub tracklets: Vec<Tracklet>,
    pub captions: Vec<Caption>,
}

impl Dataset {
    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn tracklet_ids_of(&self, identity: usize) -> Vec<usize> {
        self.tracklets
            .iter()
            .filter(|t| t.identity == identity)
            .map(|t| t.id)
            .collect()
    }

    pub fn captions_of(&self, identity: usize) -> Vec<&Caption> {
        self.captions
            .iter()
            .filter(|c| c.identity == identity)
            .collect()
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        (self.config.height, self.config.width, 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_codec_round_trips() {
        for kind in [
            AttrKind::Uniform,
            AttrKind::Team,
            AttrKind::Number,
            AttrKind::Hair,
            AttrKind::Shoe,
            AttrKind::Sock,
        ] {
            for v in 0..kind.cardinality() {
                assert_eq!(decode_token(token_for(kind, v)), Some((kind, v)));
            }
        }
        assert_eq!(decode_token(SOS_TOKEN), None);
        assert_eq!(decode_token(EOS_TOKEN), None);
        assert_eq!(decode_token(identity_token(0)), None);
    }

    #[test]
    fn attribute_tokens_decode_regardless_of_order() {
        let attrs = Attributes {
            uniform: 3,
            team: 1,
            number: 7,
            hair: 2,
            shoe: 5,
            sock: 0,
        };
        let mut tokens = attrs.tokens();
        tokens.reverse();
        assert_eq!(Attributes::from_tokens(&tokens).unwrap(), attrs);
    }
}
