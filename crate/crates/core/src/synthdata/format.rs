//! Dataset container.
//!
//! ```text
//! "LQSD" | u32 LE index length | JSON index | scene blobs…
//! ```
//!
//! Each scene blob is the image as little-endian `f32` (`C×H×W`, row-major)
//! followed by one packed bitmap per instance: row-major bits, most
//! significant bit first, each bitmap padded to a whole byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Instance, Mask, Scene, SceneAnnotation, SynthError, CHANNELS, K_ATTR, K_CLS};

pub const DATASET_MAGIC: &[u8; 4] = b"LQSD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    version: u32,
    image_size: usize,
    #[serde(rename = "K_cls")]
    k_cls: usize,
    #[serde(rename = "K_attr")]
    k_attr: usize,
    scenes: Vec<SceneEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneEntry {
    id: u64,
    class_ids: Vec<usize>,
    attributes: Vec<Vec<u8>>,
    layer_order: Vec<u32>,
}

fn bitmap_len(pixels: usize) -> usize {
    pixels.div_ceil(8)
}

pub fn write_dataset(ds: &Dataset, w: &mut impl Write) -> Result<(), SynthError> {
    let index = Index {
        version: DATASET_VERSION,
        image_size: ds.image_size,
        k_cls: K_CLS,
        k_attr: K_ATTR,
        scenes: ds
            .scenes
            .iter()
            .map(|s| SceneEntry {
                id: s.id,
                class_ids: s.annotation.instances.iter().map(|i| i.class_id).collect(),
                attributes: s.annotation.instances.iter().map(|i| i.attributes.clone()).collect(),
                layer_order: s.annotation.instances.iter().map(|i| i.layer_order).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&index).map_err(std::io::Error::other)?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for scene in &ds.scenes {
        let mut buf = Vec::with_capacity(scene.image.pixels.len() * 4);
        for v in &scene.image.pixels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for inst in &scene.annotation.instances {
            let mut bytes = vec![0u8; bitmap_len(inst.mask.bits.len())];
            for (i, &b) in inst.mask.bits.iter().enumerate() {
                if b {
                    bytes[i / 8] |= 0x80 >> (i % 8);
                }
            }
            buf.extend_from_slice(&bytes);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SynthError> {
        if self.bytes.len() - self.pos < n {
            return Err(SynthError::Parse {
                offset: self.bytes.len() as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn schema(field: &'static str, expected: impl ToString, found: impl ToString) -> SynthError {
    SynthError::Schema {
        field,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset, SynthError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(SynthError::Parse {
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let len = u32::from_le_bytes(cur.take(4, "index length")?.try_into().expect("4 bytes")) as usize;
    let json = cur.take(len, "index")?;
    let index: Index = serde_json::from_slice(json).map_err(|e| SynthError::Index {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    if index.version != DATASET_VERSION {
        return Err(schema("version", DATASET_VERSION, index.version));
    }
    if index.k_cls != K_CLS {
        return Err(schema("K_cls", K_CLS, index.k_cls));
    }
    if index.k_attr != K_ATTR {
        return Err(schema("K_attr", K_ATTR, index.k_attr));
    }
    let size = index.image_size;
    if size == 0 {
        return Err(schema("image_size", "a positive size", 0));
    }
    let pixels = size * size;
    let mut scenes = Vec::with_capacity(index.scenes.len());
    for entry in index.scenes {
        let n = entry.class_ids.len();
        if entry.attributes.len() != n || entry.layer_order.len() != n {
            return Err(schema(
                "scenes",
                format!("{n} attributes and layer orders for scene {}", entry.id),
                format!("{} and {}", entry.attributes.len(), entry.layer_order.len()),
            ));
        }
        if let Some(&c) = entry.class_ids.iter().find(|&&c| c >= K_CLS) {
            return Err(schema("class_ids", format!("ids below {K_CLS}"), c));
        }
        for a in &entry.attributes {
            if a.len() != K_ATTR {
                return Err(schema("K_attr", K_ATTR, a.len()));
            }
            if a.iter().any(|&v| v > 1) {
                return Err(schema("attributes", "values in {0, 1}", format!("{a:?}")));
            }
        }
        let raw = cur.take(CHANNELS * pixels * 4, "image")?;
        let image = Image {
            height: size,
            width: size,
            pixels: raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        };
        let mut instances = Vec::with_capacity(n);
        for k in 0..n {
            let packed = cur.take(bitmap_len(pixels), "mask")?;
            let bits = (0..pixels).map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0).collect();
            instances.push(Instance {
                class_id: entry.class_ids[k],
                mask: Mask {
                    height: size,
                    width: size,
                    bits,
                },
                attributes: entry.attributes[k].clone(),
                layer_order: entry.layer_order[k],
            });
        }
        scenes.push(Scene {
            id: entry.id,
            image,
            annotation: SceneAnnotation { instances },
        });
    }
    if cur.pos != bytes.len() {
        return Err(SynthError::Parse {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes after the last scene", bytes.len() - cur.pos),
        });
    }
    Ok(Dataset {
        image_size: size,
        scenes,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SynthError> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}
