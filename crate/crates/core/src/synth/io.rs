//! On-disk dataset layout:
//!
//! ```text
//! <dir>/meta.json        {"format":"cprn-synth","version":1,"height":..,"width":..,"count":..,"vocabulary":[..]}
//! <dir>/manifest.jsonl   one record per sample
//! <dir>/images/<id>.ppm  binary P6, 8-bit RGB
//! <dir>/masks/<id>.pgm   binary P5, 0 or 255
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{grammar, Object, Sample, Scene};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "cprn-synth";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    count: usize,
    vocabulary: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: usize,
    image: String,
    mask: String,
    tokens: Vec<usize>,
    text: String,
    referent: usize,
    mask_ratio: f64,
    token_length: usize,
    objects: Vec<Object>,
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dimension(format!("PPM needs H×W×3, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

/// Parses `width height maxval` after the magic and returns them with the payload.
fn netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2], what: &'static str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(what, "bad header field"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format(what, format!("max value {} unsupported", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(what, "missing separator before payload"));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = netpbm(&bytes, b"P6", "PPM image")?;
    if payload.len() != w * h * 3 {
        return Err(Error::format("PPM image", format!("expected {} bytes, found {}", w * h * 3, payload.len())));
    }
    Tensor::new(&[h, w, 3], payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = netpbm(&bytes, b"P5", "PGM mask")?;
    if payload.len() != w * h {
        return Err(Error::format("PGM mask", format!("expected {} bytes, found {}", w * h, payload.len())));
    }
    BinaryMask::new(h, w, payload.iter().map(|&b| b >= 128).collect())
}

pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::config("refusing to save an empty dataset"))?;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let meta = Meta {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        height: first.scene.height(),
        width: first.scene.width(),
        count: samples.len(),
        vocabulary: grammar::vocabulary(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for s in samples {
        let image = format!("images/{:06}.ppm", s.id);
        let mask = format!("masks/{:06}.pgm", s.id);
        write_ppm(&dir.join(&image), &s.scene.image)?;
        write_pgm(&dir.join(&mask), &s.mask)?;
        let rec = Record {
            id: s.id,
            image,
            mask,
            tokens: s.tokens.clone(),
            text: s.text(),
            referent: s.referent,
            mask_ratio: s.mask_ratio,
            token_length: s.token_length(),
            objects: s.scene.objects.clone(),
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let meta: Meta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta.format != FORMAT {
        return Err(Error::format("dataset", format!("unknown format `{}`", meta.format)));
    }
    if meta.version != DATASET_VERSION {
        return Err(Error::format("dataset", format!("unsupported version {}", meta.version)));
    }
    if meta.vocabulary != grammar::vocabulary() {
        return Err(Error::format("dataset", "vocabulary differs from this build"));
    }
    let file = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut samples = Vec::with_capacity(meta.count);
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let image = read_ppm(&dir.join(&rec.image))?;
        let mask = read_pgm(&dir.join(&rec.mask))?;
        if image.shape() != [meta.height, meta.width, 3] || (mask.height, mask.width) != (meta.height, meta.width) {
            return Err(Error::format("dataset", format!("sample {} has the wrong extents", rec.id)));
        }
        if rec.referent >= rec.objects.len() || rec.tokens.len() != rec.token_length {
            return Err(Error::format("dataset", format!("sample {} is inconsistent", rec.id)));
        }
        samples.push(Sample {
            id: rec.id,
            scene: Scene {
                image,
                objects: rec.objects,
            },
            tokens: rec.tokens,
            referent: rec.referent,
            mask_ratio: mask.area_ratio(),
            mask,
        });
    }
    if samples.len() != meta.count {
        return Err(Error::format(
            "dataset",
            format!("meta declares {} samples, manifest has {}", meta.count, samples.len()),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::super::{generate, GeneratorConfig};
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(9, 5, &GeneratorConfig::default()).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn truncated_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        fs::write(&p, b"P6\n2 2\n255\n\x00\x00").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P3\n2 2\n255\n").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
