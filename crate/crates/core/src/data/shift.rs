use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{stream_rng, DataError, Dataset, Image, LabeledExample, Result, Stream};

/// Label-preserving distribution shifts for domain-generalisation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    /// Add `magnitude` to every pixel, clamped to `[0, 1]`.
    Brightness,
    /// Additive Gaussian pixel noise with standard deviation `magnitude`.
    Noise,
    /// Blend each channel with the next one by `min(magnitude, 1)`.
    Style,
}

impl Shift {
    pub const ALL: [Shift; 3] = [Shift::Brightness, Shift::Noise, Shift::Style];

    pub fn as_str(self) -> &'static str {
        match self {
            Shift::Brightness => "brightness",
            Shift::Noise => "noise",
            Shift::Style => "style",
        }
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shift {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(Shift::Brightness),
            "noise" => Ok(Shift::Noise),
            "style" | "style-permutation" | "style_permutation" => Ok(Shift::Style),
            other => Err(DataError::UnknownShift(other.to_string())),
        }
    }
}

fn shift_image(img: &Image, shift: Shift, magnitude: f64, rng: &mut impl Rng) -> Image {
    let mut out = img.clone();
    match shift {
        Shift::Brightness => {
            for v in out.data.iter_mut() {
                *v = (*v + magnitude).clamp(0.0, 1.0);
            }
        }
        Shift::Noise => {
            for v in out.data.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + magnitude * n).clamp(0.0, 1.0);
            }
        }
        Shift::Style => {
            let m = magnitude.min(1.0);
            let plane = img.side * img.side;
            for c in 0..img.channels {
                let next = (c + 1) % img.channels;
                for i in 0..plane {
                    out.data[c * plane + i] = (1.0 - m) * img.data[c * plane + i] + m * img.data[next * plane + i];
                }
            }
        }
    }
    out
}

/// Apply `shift` at `magnitude` to every image; labels and captions are untouched.
pub fn make_shifted_variant(dataset: &Dataset, shift: Shift, magnitude: f64) -> Result<Dataset> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(DataError::InvalidSpec(format!("shift magnitude {magnitude} must be finite and >= 0")));
    }
    if magnitude == 0.0 {
        return Ok(dataset.clone());
    }
    let seed = dataset.spec.seed ^ dataset.spec.sample_seed.rotate_left(29);
    let apply = |xs: &[LabeledExample], split: u64| -> Vec<LabeledExample> {
        xs.iter()
            .enumerate()
            .map(|(i, e)| {
                let mut rng = stream_rng(seed, Stream::Shift, split * 8 + shift as u64, i as u64);
                LabeledExample {
                    image: shift_image(&e.image, shift, magnitude, &mut rng),
                    ..e.clone()
                }
            })
            .collect()
    };
    Ok(Dataset {
        spec: dataset.spec.clone(),
        classes: dataset.classes.clone(),
        train: apply(&dataset.train, 0),
        test: apply(&dataset.test, 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn data() -> Dataset {
        generate(&SyntheticSpec {
            classes: 4,
            shots: 2,
            test_per_class: 2,
            visual_variance: 0.2,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let d = data();
        for s in Shift::ALL {
            assert_eq!(make_shifted_variant(&d, s, 0.0).unwrap(), d);
        }
    }

    #[test]
    fn brightness_clamps_and_keeps_labels() {
        let d = data();
        let s = make_shifted_variant(&d, Shift::Brightness, 0.2).unwrap();
        for (a, b) in d.test.iter().zip(&s.test) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.caption, b.caption);
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((0.0..=1.0).contains(y));
                assert!((y - (x + 0.2).min(1.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unknown_shift_name_rejected() {
        assert!(matches!("blur".parse::<Shift>(), Err(DataError::UnknownShift(_))));
        assert_eq!("style-permutation".parse::<Shift>().unwrap(), Shift::Style);
    }

    #[test]
    fn negative_magnitude_rejected() {
        assert!(make_shifted_variant(&data(), Shift::Noise, -0.1).is_err());
    }
}
