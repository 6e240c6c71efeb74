//! Procedural bimodal dataset generator.
//!
//! Every class owns a latent prototype (a handful of coloured Gaussian
//! blobs) and a caption made of a fixed template followed by the class
//! name tokens. `visual_variance` jitters blob positions and colours and
//! adds pixel noise; `text_separation` controls how many name tokens
//! neighbouring classes share.
//!
//! Generation is a pure function of the [`SyntheticSpec`]: each example
//! draws from its own generator keyed by `(seed, split, class, index)`.

mod export;
mod shift;

pub use export::{read_records, write_records};
pub use shift::{make_shifted_variant, Shift};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id reserved for padding.
pub const PAD_TOKEN: usize = 0;
/// Number of template tokens ("a photo of a" analogue) preceding the name.
pub const TEMPLATE_LEN: usize = 4;
/// Tokens per class name.
pub const NAME_LEN: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("vocabulary of {vocab} tokens cannot hold {needed} tokens for {classes} classes")]
    VocabularyTooSmall {
        vocab: usize,
        needed: usize,
        classes: usize,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("unknown shift {0:?} (expected brightness, noise or style)")]
    UnknownShift(String),
    #[error("malformed record on line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Channel-major pixel grid `[channels, side, side]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || side == 0 || data.len() != channels * side * side {
            return Err(DataError::InvalidSpec(format!(
                "{} pixel values for a {channels}×{side}×{side} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            side,
            data,
        })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Self {
            channels,
            side,
            data: vec![0.0; channels * side * side],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.side + y) * self.side + x]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of classes N.
    pub classes: usize,
    /// Training examples generated per class.
    pub shots: usize,
    pub test_per_class: usize,
    /// σ_v ≥ 0: intra-class visual variance.
    pub visual_variance: f64,
    /// δ_t ∈ [0, 1]: textual separation between neighbouring class names.
    pub text_separation: f64,
    pub image_side: usize,
    pub channels: usize,
    pub blobs_per_class: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    /// Fixes class prototypes and names.
    pub seed: u64,
    /// Fixes the individual examples drawn around the prototypes.
    pub sample_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            shots: 16,
            test_per_class: 50,
            visual_variance: 0.6,
            text_separation: 0.34,
            image_side: 16,
            channels: 3,
            blobs_per_class: 2,
            vocab_size: 64,
            caption_len: 8,
            seed: 7,
            sample_seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Vocabulary entries consumed by padding, template and class names.
    pub fn required_vocab(&self) -> usize {
        1 + TEMPLATE_LEN + NAME_LEN * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 4 {
            return Err(DataError::InvalidSpec(format!(
                "need at least 4 classes, got {}",
                self.classes
            )));
        }
        if self.vocab_size < self.required_vocab() {
            return Err(DataError::VocabularyTooSmall {
                vocab: self.vocab_size,
                needed: self.required_vocab(),
                classes: self.classes,
            });
        }
        if !(self.visual_variance >= 0.0 && self.visual_variance.is_finite()) {
            return Err(DataError::InvalidSpec("visual_variance must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.text_separation) {
            return Err(DataError::InvalidSpec("text_separation must lie in [0, 1]".into()));
        }
        if self.caption_len < TEMPLATE_LEN + NAME_LEN {
            return Err(DataError::InvalidSpec(format!(
                "caption_len {} cannot hold template and name ({})",
                self.caption_len,
                TEMPLATE_LEN + NAME_LEN
            )));
        }
        if self.image_side < 4 || self.channels == 0 || self.blobs_per_class == 0 {
            return Err(DataError::InvalidSpec("image_side >= 4, channels >= 1 and blobs >= 1 required".into()));
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return Err(DataError::InvalidSpec("shots and test_per_class must be positive".into()));
        }
        Ok(())
    }

    /// How many leading name tokens each odd class borrows from its even neighbour.
    pub fn shared_name_tokens(&self) -> usize {
        ((1.0 - self.text_separation) * NAME_LEN as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub radius: f64,
    pub color: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfo {
    pub id: usize,
    pub blobs: Vec<Blob>,
    pub background: Vec<f64>,
    pub name_tokens: Vec<usize>,
    pub caption: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub caption: Vec<usize>,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Stream {
    World = 1,
    Train = 2,
    Test = 3,
    Pretrain = 4,
    Shift = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ a);
    h = splitmix(h ^ b.wrapping_mul(0xA24B_AED4_963E_E407));
    ChaCha8Rng::seed_from_u64(h)
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Build the class prototypes and captions for a spec.
pub fn class_table(spec: &SyntheticSpec) -> Result<Vec<ClassInfo>> {
    spec.validate()?;
    let shared = spec.shared_name_tokens();
    let side = spec.image_side as f64;
    let mut classes: Vec<ClassInfo> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut rng = stream_rng(spec.seed, Stream::World, c as u64, 0);
        let blobs = (0..spec.blobs_per_class)
            .map(|_| Blob {
                center: (rng.gen_range(0.2..0.8) * side, rng.gen_range(0.2..0.8) * side),
                radius: rng.gen_range(0.12..0.25) * side,
                color: (0..spec.channels).map(|_| rng.gen_range(0.0..1.0)).collect(),
            })
            .collect();
        let background = (0..spec.channels).map(|_| rng.gen_range(0.0..0.3)).collect();
        let own: Vec<usize> = (0..NAME_LEN).map(|j| 1 + TEMPLATE_LEN + NAME_LEN * c + j).collect();
        let name_tokens = if c % 2 == 1 {
            let partner = &classes[c - 1].name_tokens;
            (0..NAME_LEN).map(|j| if j < shared { partner[j] } else { own[j] }).collect()
        } else {
            own
        };
        let mut caption: Vec<usize> = (1..=TEMPLATE_LEN).collect();
        caption.extend(&name_tokens);
        caption.resize(spec.caption_len, PAD_TOKEN);
        classes.push(ClassInfo {
            id: c,
            blobs,
            background,
            name_tokens,
            caption,
        });
    }
    Ok(classes)
}

/// Position of the last non-pad token: where the class representation is read.
pub fn class_position(caption: &[usize]) -> Option<usize> {
    caption.iter().rposition(|&t| t != PAD_TOKEN)
}

/// Render one example of `class` with jitter drawn from `rng`.
pub fn render<R: Rng>(spec: &SyntheticSpec, class: &ClassInfo, rng: &mut R) -> Image {
    let side = spec.image_side;
    let sv = spec.visual_variance;
    let pos_std = sv * side as f64 / 4.0;
    let color_std = sv / 2.0;
    let noise_std = sv / 2.0;
    let blobs: Vec<Blob> = class
        .blobs
        .iter()
        .map(|b| Blob {
            center: (b.center.0 + pos_std * gauss(rng), b.center.1 + pos_std * gauss(rng)),
            radius: b.radius,
            color: b.color.iter().map(|c| c + color_std * gauss(rng)).collect(),
        })
        .collect();
    let mut img = Image::zeros(spec.channels, side);
    for ch in 0..spec.channels {
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = class.background[ch];
                for b in &blobs {
                    let d2 = (px - b.center.0).powi(2) + (py - b.center.1).powi(2);
                    v += b.color[ch] * (-d2 / (2.0 * b.radius * b.radius)).exp();
                }
                if noise_std > 0.0 {
                    v += noise_std * gauss(rng);
                }
                img.data[(ch * side + y) * side + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn sample(spec: &SyntheticSpec, classes: &[ClassInfo], stream: Stream, per_class: usize) -> Vec<LabeledExample> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for class in classes {
        for i in 0..per_class {
            let mut rng = stream_rng(spec.sample_seed ^ spec.seed.rotate_left(17), stream, class.id as u64, i as u64);
            out.push(LabeledExample {
                image: render(spec, class, &mut rng),
                caption: class.caption.clone(),
                class: class.id,
            });
        }
    }
    out
}

/// Generate train and test splits for every class.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    let classes = class_table(spec)?;
    let train = sample(spec, &classes, Stream::Train, spec.shots);
    let test = sample(spec, &classes, Stream::Test, spec.test_per_class);
    Ok(Dataset {
        spec: spec.clone(),
        classes,
        train,
        test,
    })
}

/// Image/caption pairs for backbone pretraining, disjoint from train and test streams.
pub fn generate_pretraining(spec: &SyntheticSpec, per_class: usize) -> Result<Vec<LabeledExample>> {
    let classes = class_table(spec)?;
    Ok(sample(spec, &classes, Stream::Pretrain, per_class))
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn caption(&self, class: usize) -> &[usize] {
        &self.classes[class].caption
    }

    pub fn captions(&self, label_space: &[usize]) -> Vec<Vec<usize>> {
        label_space.iter().map(|&c| self.classes[c].caption.clone()).collect()
    }

    /// Relabel classes by `perm` (new id `i` takes old class `perm[i]`),
    /// keeping each prototype paired with its own caption.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Dataset> {
        let n = self.classes.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(DataError::InvalidSplit("not a permutation of the class ids".into()));
        }
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let classes = perm
            .iter()
            .enumerate()
            .map(|(new, &old)| ClassInfo {
                id: new,
                ..self.classes[old].clone()
            })
            .collect();
        let relabel = |xs: &[LabeledExample]| {
            let mut v: Vec<LabeledExample> = xs
                .iter()
                .map(|e| LabeledExample {
                    class: inverse[e.class],
                    ..e.clone()
                })
                .collect();
            v.sort_by_key(|e| e.class);
            v
        };
        Ok(Dataset {
            spec: self.spec.clone(),
            classes,
            train: relabel(&self.train),
            test: relabel(&self.test),
        })
    }
}

/// Deterministic base/new class partition: the first `round(N·fraction)`
/// classes are base, the rest new.
pub fn split_base_new(num_classes: usize, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidSplit(format!("fraction {fraction} outside (0, 1)")));
    }
    let k = (num_classes as f64 * fraction).round() as usize;
    if k == 0 || k >= num_classes {
        return Err(DataError::InvalidSplit(format!(
            "fraction {fraction} of {num_classes} classes leaves one side empty"
        )));
    }
    Ok(((0..k).collect(), (k..num_classes).collect()))
}

/// Examples whose class is in `classes`, in dataset order.
pub fn filter_classes(examples: &[LabeledExample], classes: &[usize]) -> Vec<LabeledExample> {
    examples.iter().filter(|e| classes.contains(&e.class)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sv: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 6,
            shots: 4,
            test_per_class: 3,
            visual_variance: sv,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_variance_gives_identical_class_images() {
        let d = generate(&small(0.0)).unwrap();
        for c in 0..6 {
            let imgs: Vec<_> = d.train.iter().chain(&d.test).filter(|e| e.class == c).collect();
            assert!(imgs.windows(2).all(|w| w[0].image == w[1].image));
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = generate(&small(0.3)).unwrap();
        let b = generate(&small(0.3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn name_sharing_follows_separation() {
        let mut s = small(0.1);
        s.text_separation = 1.0;
        let d = class_table(&s).unwrap();
        let mut all: Vec<usize> = d.iter().flat_map(|c| c.name_tokens.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 6 * NAME_LEN);

        s.text_separation = 0.0;
        let d = class_table(&s).unwrap();
        for p in 0..3 {
            assert_eq!(d[2 * p].name_tokens, d[2 * p + 1].name_tokens);
            assert_eq!(d[2 * p].caption, d[2 * p + 1].caption);
        }
        assert_ne!(d[1].name_tokens, d[2].name_tokens);
    }

    #[test]
    fn captions_are_consistent_with_class() {
        let d = generate(&small(0.2)).unwrap();
        for e in d.train.iter().chain(&d.test) {
            assert_eq!(e.caption, d.classes[e.class].caption);
        }
        assert_eq!(class_position(d.caption(0)), Some(TEMPLATE_LEN + NAME_LEN - 1));
    }

    #[test]
    fn vocabulary_must_fit() {
        let mut s = small(0.1);
        s.vocab_size = 5;
        assert!(matches!(generate(&s), Err(DataError::VocabularyTooSmall { .. })));
    }

    #[test]
    fn split_arithmetic() {
        let (b, n) = split_base_new(8, 0.5).unwrap();
        assert_eq!(b, vec![0, 1, 2, 3]);
        assert_eq!(n, vec![4, 5, 6, 7]);
        assert!(split_base_new(8, 0.0).is_err());
        assert!(split_base_new(8, 1.0).is_err());
        assert!(split_base_new(4, 0.05).is_err());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let d = generate(&small(2.0)).unwrap();
        assert!(d.test.iter().all(|e| e.image.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
