//! Line-delimited record export.
//!
//! One example per line, three tab-separated fields in fixed order:
//! class id, comma-separated caption token ids, comma-separated flattened
//! image (channel-major, then row, then column).

use std::io::{BufRead, Write};

use super::{DataError, Image, LabeledExample, Result};

pub fn write_records<W: Write>(mut w: W, examples: &[LabeledExample]) -> Result<()> {
    for e in examples {
        let caption: Vec<String> = e.caption.iter().map(usize::to_string).collect();
        let pixels: Vec<String> = e.image.data.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}\t{}\t{}", e.class, caption.join(","), pixels.join(","))?;
    }
    Ok(())
}

/// Parse records written by [`write_records`] for images of the given geometry.
pub fn read_records<R: BufRead>(r: R, channels: usize, side: usize) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |reason: &str| DataError::Record {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad("expected 3 tab-separated fields"));
        }
        let class = fields[0].parse().map_err(|_| bad("class id"))?;
        let caption = fields[1]
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad("caption token"))?;
        let data = fields[2]
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad("pixel value"))?;
        let image = Image::new(channels, side, data).map_err(|_| bad("image size"))?;
        out.push(LabeledExample { image, caption, class });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    #[test]
    fn records_round_trip_exactly() {
        let d = generate(&SyntheticSpec {
            classes: 4,
            shots: 1,
            test_per_class: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &d.test).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 4);
        let back = read_records(&buf[..], 3, 16).unwrap();
        assert_eq!(back, d.test);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let err = read_records(&b"0\t1,2\n"[..], 3, 16).unwrap_err();
        assert!(matches!(err, DataError::Record { line: 1, .. }));
    }
}
