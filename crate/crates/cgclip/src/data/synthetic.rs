//! Renders identities as colored block figures and emits their captions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use super::{
    split_tracklets, AttrKind, Attributes, Caption, Dataset, Frame, GenConfig, Identity, Tracklet,
    EOS_TOKEN, SOS_TOKEN,
};
use crate::{Error, Result};

const UNIFORM_PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.20, 0.85],
    [0.10, 0.70, 0.20],
    [0.90, 0.85, 0.10],
    [0.80, 0.15, 0.80],
    [0.10, 0.75, 0.80],
    [0.95, 0.55, 0.10],
    [0.45, 0.15, 0.65],
];

const TEAM_PALETTE: [[f32; 3]; 4] = [
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
    [0.55, 0.55, 0.55],
    [0.45, 0.30, 0.15],
];

const HAIR_PALETTE: [[f32; 3]; 4] = [
    [0.05, 0.05, 0.05],
    [0.90, 0.80, 0.35],
    [0.55, 0.25, 0.10],
    [0.75, 0.75, 0.75],
];

const SHOE_PALETTE: [[f32; 3]; 6] = [
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.85, 0.15, 0.15],
    [0.15, 0.25, 0.85],
    [0.15, 0.75, 0.25],
    [0.90, 0.80, 0.15],
];

const SOCK_PALETTE: [[f32; 3]; 6] = [
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.85, 0.15, 0.15],
    [0.15, 0.25, 0.85],
    [0.90, 0.55, 0.10],
    [0.55, 0.15, 0.70],
];

// 4x4 chest glyphs, one bit pattern per number value, row-major from the top.
const GLYPHS: [u16; 10] = [
    0b1111_1001_1001_1111, // 0
    0b0010_0110_0010_0111, // 1
    0b1111_0001_1110_1111, // 2 (mirrored s)
    0b1111_0110_0001_1111, // 3
    0b1001_1111_0001_0001, // 4
    0b1111_1000_0111_1111, // 5 (s)
    0b1000_1111_1001_1111, // 6
    0b1111_0001_0010_0100, // 7
    0b0110_1111_1001_1111, // 8
    0b1111_1001_1111_0001, // 9
];

/// Generates the full synthetic corpus deterministically from its config.
pub fn gen_synthetic_dataset(config: &GenConfig) -> Result<Dataset> {
    if config.identities < 2 {
        return Err(Error::Config("need at least 2 identities".into()));
    }
    if config.tracklets_per_identity < 2 {
        return Err(Error::Config("need at least 2 tracklets per identity".into()));
    }
    if config.frames_per_tracklet < 1 || config.max_tracklet_len < 1 {
        return Err(Error::Config("tracklet lengths must be positive".into()));
    }
    if config.height % 8 != 0 || config.width % 8 != 0 {
        return Err(Error::Config(
            "frame height and width must be multiples of 8".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let attrs = assign_attributes(config, &mut rng)?;
    let identities: Vec<Identity> = attrs
        .iter()
        .enumerate()
        .map(|(label, &attrs)| Identity { label, attrs })
        .collect();

    let captions = make_captions(config, &identities, &mut rng);

    let mut tracklets = Vec::new();
    let mut next_id = 0;
    for identity in &identities {
        for camera in 0..config.tracklets_per_identity {
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(config.seed);
            jitter_rng.set_stream(((identity.label as u64) << 24) | (camera as u64 + 1));
            let frames: Vec<Frame> = (0..config.frames_per_tracklet)
                .map(|_| render_frame(config, &identity.attrs, &mut jitter_rng))
                .collect();
            // Appendix-style splitting rule keeps every chunk within the cap.
            for chunk in split_tracklets(&frames, config.max_tracklet_len) {
                tracklets.push(Tracklet {
                    id: next_id,
                    identity: identity.label,
                    camera,
                    frames: chunk,
                });
                next_id += 1;
            }
        }
    }

    Ok(Dataset {
        config: config.clone(),
        identities,
        tracklets,
        captions,
    })
}

fn attribute_space() -> usize {
    AttrKind::Uniform.cardinality()
        * AttrKind::Team.cardinality()
        * AttrKind::Number.cardinality()
        * AttrKind::Hair.cardinality()
        * AttrKind::Shoe.cardinality()
        * AttrKind::Sock.cardinality()
}

fn random_attrs(rng: &mut ChaCha8Rng) -> Attributes {
    Attributes {
        uniform: rng.gen_range(0..AttrKind::Uniform.cardinality()),
        team: rng.gen_range(0..AttrKind::Team.cardinality()),
        number: rng.gen_range(0..AttrKind::Number.cardinality()),
        hair: rng.gen_range(0..AttrKind::Hair.cardinality()),
        shoe: rng.gen_range(0..AttrKind::Shoe.cardinality()),
        sock: rng.gen_range(0..AttrKind::Sock.cardinality()),
    }
}

fn assign_attributes(config: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Attributes>> {
    let y = config.identities;
    if y > attribute_space() {
        return Err(Error::Config(format!(
            "attribute space ({}) too small for {} unique identities",
            attribute_space(),
            y
        )));
    }
    let mut seen: HashSet<Attributes> = HashSet::new();
    let mut out = Vec::with_capacity(y);
    let budget = 1000 * y;
    let mut attempts = 0;

    if config.hard_split {
        if y % 2 != 0 {
            return Err(Error::Config(
                "hard split pairs identities; identity count must be even".into(),
            ));
        }
        for pair in 0..y / 2 {
            // Pairs agree on everything except one fine attribute.
            let kind = AttrKind::FINE[pair % AttrKind::FINE.len()];
            loop {
                attempts += 1;
                if attempts > budget {
                    return Err(Error::Config(
                        "could not place unique hard-split identity pairs".into(),
                    ));
                }
                let base = random_attrs(rng);
                let mut twin = base;
                let bump = 1 + rng.gen_range(0..kind.cardinality() - 1);
                twin.set(kind, (base.get(kind) + bump) % kind.cardinality());
                if !seen.contains(&base) && !seen.contains(&twin) {
                    seen.insert(base);
                    seen.insert(twin);
                    out.push(base);
                    out.push(twin);
                    break;
                }
            }
        }
    } else {
        while out.len() < y {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Config("could not place unique identities".into()));
            }
            let attrs = random_attrs(rng);
            if seen.insert(attrs) {
                out.push(attrs);
            }
        }
    }
    Ok(out)
}

fn make_captions(config: &GenConfig, identities: &[Identity], rng: &mut ChaCha8Rng) -> Vec<Caption> {
    let mut captions = Vec::new();
    for identity in identities {
        let canonical = identity.attrs.tokens();
        for j in 0..config.captions_per_identity {
            let mut body = canonical.clone();
            if j > 0 {
                body.shuffle(rng);
            }
            let mut tokens = Vec::with_capacity(body.len() + 2);
            tokens.push(SOS_TOKEN);
            tokens.extend_from_slice(&body);
            tokens.push(EOS_TOKEN);
            captions.push(Caption {
                identity: identity.label,
                tokens,
            });
        }
    }
    captions
}

struct Region {
    rows: (usize, usize),
    cols: (usize, usize),
}

fn scaled(config: &GenConfig, r0: usize, r1: usize, c0: usize, c1: usize) -> Region {
    // Layout is defined on a 32x16 grid and scaled proportionally.
    let h = config.height;
    let w = config.width;
    Region {
        rows: (r0 * h / 32, r1 * h / 32),
        cols: (c0 * w / 16, c1 * w / 16),
    }
}

fn fill(pixels: &mut [f32], width: usize, region: &Region, color: [f32; 3], jitter: (isize, isize)) {
    let height = pixels.len() / (width * 3);
    for r in region.rows.0..region.rows.1 {
        let rr = r as isize + jitter.0;
        if rr < 0 || rr >= height as isize {
            continue;
        }
        for c in region.cols.0..region.cols.1 {
            let cc = c as isize + jitter.1;
            if cc < 0 || cc >= width as isize {
                continue;
            }
            let base = (rr as usize * width + cc as usize) * 3;
            pixels[base..base + 3].copy_from_slice(&color);
        }
    }
}

fn render_frame(config: &GenConfig, attrs: &Attributes, rng: &mut ChaCha8Rng) -> Frame {
    let (h, w) = (config.height, config.width);
    let mut pixels = vec![0.12_f32; h * w * 3]; // dark background

    let body = scaled(config, 4, 18, 2, 14);
    let shorts = scaled(config, 18, 24, 3, 13);
    let hair = scaled(config, 0, 4, 4, 12);
    let socks = scaled(config, 24, 28, 4, 12);
    let shoes = scaled(config, 28, 32, 3, 13);
    let glyph = scaled(config, 8, 12, 6, 10);

    let mut jitter = || -> (isize, isize) { (rng.gen_range(-1..=1), rng.gen_range(-1..=1)) };

    // Coarse regions are anchored; fine regions jitter by one pixel per frame.
    fill(&mut pixels, w, &body, UNIFORM_PALETTE[attrs.uniform], (0, 0));
    fill(&mut pixels, w, &shorts, TEAM_PALETTE[attrs.team], (0, 0));
    fill(&mut pixels, w, &hair, HAIR_PALETTE[attrs.hair], jitter());
    fill(&mut pixels, w, &socks, SOCK_PALETTE[attrs.sock], jitter());
    fill(&mut pixels, w, &shoes, SHOE_PALETTE[attrs.shoe], jitter());

    let (gj_r, gj_c) = jitter();
    let bits = GLYPHS[attrs.number];
    let gh = glyph.rows.1 - glyph.rows.0;
    let gw = glyph.cols.1 - glyph.cols.0;
    for r in 0..gh {
        for c in 0..gw {
            let bit_r = r * 4 / gh;
            let bit_c = c * 4 / gw;
            if bits >> (15 - (bit_r * 4 + bit_c)) & 1 == 1 {
                let rr = (glyph.rows.0 + r) as isize + gj_r;
                let cc = (glyph.cols.0 + c) as isize + gj_c;
                if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                    let base = (rr as usize * w + cc as usize) * 3;
                    pixels[base..base + 3].copy_from_slice(&[1.0, 1.0, 1.0]);
                }
            }
        }
    }

    if config.noise > 0.0 {
        let a = config.noise as f32;
        for p in pixels.iter_mut() {
            *p = (*p + rng.gen_range(-a..a)).clamp(0.0, 1.0);
        }
    }

    Frame { pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toy_corpus_counts() {
        let config = GenConfig::default();
        let ds = gen_synthetic_dataset(&config).unwrap();
        assert_eq!(ds.identities.len(), 16);
        assert_eq!(ds.tracklets.len(), 128);
        let frames: usize = ds.tracklets.iter().map(|t| t.frames.len()).sum();
        assert_eq!(frames, 512);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = GenConfig {
            identities: 4,
            tracklets_per_identity: 2,
            ..GenConfig::default()
        };
        let a = gen_synthetic_dataset(&config).unwrap();
        let b = gen_synthetic_dataset(&config).unwrap();
        for (ta, tb) in a.tracklets.iter().zip(&b.tracklets) {
            assert_eq!(ta.frames, tb.frames);
        }
        for (ca, cb) in a.captions.iter().zip(&b.captions) {
            assert_eq!(ca.tokens, cb.tokens);
        }
    }

    #[test]
    fn zero_noise_tracklets_of_one_identity_share_anchored_regions() {
        let config = GenConfig {
            identities: 2,
            tracklets_per_identity: 2,
            noise: 0.0,
            ..GenConfig::default()
        };
        let ds = gen_synthetic_dataset(&config).unwrap();
        // Body pixels are not jittered, so they match across tracklets exactly.
        let t0 = &ds.tracklets[0].frames[0];
        let t1 = &ds.tracklets[1].frames[0];
        let w = config.width;
        let center = (10 * w + 8) * 3;
        assert_eq!(t0.pixels[center..center + 3], t1.pixels[center..center + 3]);
    }

    #[test]
    fn hard_split_pairs_differ_in_exactly_one_fine_attribute() {
        let config = GenConfig {
            identities: 8,
            hard_split: true,
            ..GenConfig::default()
        };
        let ds = gen_synthetic_dataset(&config).unwrap();
        for pair in 0..4 {
            let a = ds.identities[2 * pair].attrs;
            let b = ds.identities[2 * pair + 1].attrs;
            assert_eq!(a.uniform, b.uniform);
            assert_eq!(a.team, b.team);
            let diffs = AttrKind::FINE
                .iter()
                .filter(|&&k| a.get(k) != b.get(k))
                .count();
            assert_eq!(diffs, 1, "pair {} differs in {} fine attrs", pair, diffs);
        }
    }

    #[test]
    fn unique_attribute_tuples() {
        let ds = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        let mut seen = HashSet::new();
        for id in &ds.identities {
            assert!(seen.insert(id.attrs));
        }
    }

    #[test]
    fn captions_decode_to_identity_attributes() {
        let ds = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        for caption in &ds.captions {
            let body = &caption.tokens[1..caption.tokens.len() - 1];
            let decoded = Attributes::from_tokens(body).unwrap();
            assert_eq!(decoded, ds.identities[caption.identity].attrs);
        }
    }

    #[test]
    fn rejects_undersized_attribute_space() {
        let config = GenConfig {
            identities: 3,
            hard_split: true,
            ..GenConfig::default()
        };
        assert!(gen_synthetic_dataset(&config).is_err());
    }
}
