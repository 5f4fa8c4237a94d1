//! JSON-lines dataset index with PPM images and inline RLE masks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{rle_decode, rle_encode, SegSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::Mask;
use crate::tensor::Elem;

pub const INDEX_FILE: &str = "index.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexLine {
    id: String,
    image: String,
    expression: String,
    mask_rle: RleRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RleRecord {
    size: [usize; 2],
    counts: Vec<u64>,
}

/// Writes `dir/index.jsonl` and one `dir/images/<id>.ppm` per sample.
/// Returns the index path.
pub fn write_dataset(dir: &Path, samples: &[SegSample]) -> Result<PathBuf> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut index = String::new();
    for s in samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) {
            return Err(Error::Validation(format!("sample id {:?} is not a file name", s.id)));
        }
        let rel = format!("{IMAGE_DIR}/{}.ppm", s.id);
        write_ppm(&dir.join(&rel), &s.image)?;
        let line = IndexLine {
            id: s.id.clone(),
            image: rel,
            expression: s.expression.clone(),
            mask_rle: RleRecord {
                size: [s.mask.height, s.mask.width],
                counts: rle_encode(&s.mask),
            },
        };
        index.push_str(&serde_json::to_string(&line)?);
        index.push('\n');
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads an index written by [`write_dataset`]. Image paths are relative
/// to the index's directory. Blank lines are skipped.
pub fn load_dataset(index: &Path) -> Result<Vec<SegSample>> {
    let text = fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
    let base = index.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |detail: String| Error::Format {
            path: index.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: IndexLine = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let [h, w] = rec.mask_rle.size;
        let mask = rle_decode(&rec.mask_rle.counts, h, w).map_err(|e| fail(e.to_string()))?;
        let image = read_ppm(&base.join(&rec.image)).map_err(|e| fail(e.to_string()))?;
        if (image.height(), image.width()) != (h, w) {
            return Err(fail(format!(
                "image is {}x{} but mask is {h}x{w}",
                image.height(),
                image.width()
            )));
        }
        out.push(SegSample {
            id: rec.id,
            image,
            expression: rec.expression,
            mask,
        });
    }
    Ok(out)
}

fn quantize(v: Elem) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary P6, maxval 255.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    buf.extend(image.pixels().iter().map(|&v| quantize(v)));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Binary P5 with 0 for background and 255 for the mask.
pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    buf.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        line: 1,
        detail,
    })
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("expected P6 magic, found {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    let need = w * h * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("PPM pixel data shorter than {need} bytes"))?;
    Image::new(h, w, data.iter().map(|&b| b as Elem / 255.0).collect()).map_err(|e| e.to_string())
}
