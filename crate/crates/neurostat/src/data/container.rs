//! NSDS set-corpus container and the CSV label sidecar.
//!
//! Layout (little-endian):
//!   magic "NSDS" | version u32 | n_sets u32 | sample_size u32 |
//!   n_features u32 | n_sets·sample_size·n_features f32 (set-major,
//!   row-major) | label kind u8 | per-set labels when kind > 0
//!   (class_id u32, mean f64, variance f64).
//!
//! Values are stored at 32-bit precision; save→load is value-exact for data
//! already at that precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Corpus, Family, SetLabel, SetRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NSDS_MAGIC: &[u8; 4] = b"NSDS";
pub const NSDS_VERSION: u32 = 1;

/// What the per-set `class_id` means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    None,
    SyntheticFamily,
    ClassId,
}

impl LabelKind {
    fn code(self) -> u8 {
        match self {
            LabelKind::None => 0,
            LabelKind::SyntheticFamily => 1,
            LabelKind::ClassId => 2,
        }
    }

    fn from_code(code: u8, path: &Path) -> Result<LabelKind> {
        match code {
            0 => Ok(LabelKind::None),
            1 => Ok(LabelKind::SyntheticFamily),
            2 => Ok(LabelKind::ClassId),
            other => Err(Error::format(path, format!("unknown label kind {other}"))),
        }
    }
}

pub fn save_sets(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(NSDS_MAGIC).map_err(io)?;
    w.write_all(&NSDS_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(corpus.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(corpus.sample_size as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(corpus.n_features as u32).to_le_bytes())
        .map_err(io)?;
    let row = corpus.sample_size * corpus.n_features;
    for set in &corpus.sets {
        if set.values.len() != row {
            return Err(Error::ShapeMismatch {
                op: "save_sets",
                lhs: vec![corpus.sample_size, corpus.n_features],
                rhs: set.values.shape().to_vec(),
            });
        }
        for &v in set.values.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.write_all(&[corpus.label_kind.code()]).map_err(io)?;
    if corpus.label_kind != LabelKind::None {
        for set in &corpus.sets {
            let label = set.label.ok_or_else(|| {
                Error::Config(format!("set {} lacks a label but the corpus declares labels", set.id))
            })?;
            w.write_all(&label.class_id.to_le_bytes()).map_err(io)?;
            w.write_all(&label.mean.to_le_bytes()).map_err(io)?;
            w.write_all(&label.variance.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_exact_or(path: &Path, r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {what}")))
}

fn read_u32(path: &Path, r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or(path, r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_sets(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or(path, &mut r, &mut magic, "magic")?;
    if &magic != NSDS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:?}, expected {NSDS_MAGIC:?}"),
        ));
    }
    let version = read_u32(path, &mut r, "version")?;
    if version != NSDS_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {NSDS_VERSION}"),
        ));
    }
    let n_sets = read_u32(path, &mut r, "set count")? as usize;
    let sample_size = read_u32(path, &mut r, "sample size")? as usize;
    let n_features = read_u32(path, &mut r, "feature count")? as usize;
    let row = sample_size * n_features;
    let mut payload = vec![0u8; n_sets * row * 4];
    read_exact_or(path, &mut r, &mut payload, "value payload")?;
    let mut kind_byte = [0u8; 1];
    read_exact_or(path, &mut r, &mut kind_byte, "label kind")?;
    let label_kind = LabelKind::from_code(kind_byte[0], path)?;

    let mut labels: Vec<Option<SetLabel>> = vec![None; n_sets];
    if label_kind != LabelKind::None {
        for slot in labels.iter_mut() {
            let class_id = read_u32(path, &mut r, "label class")?;
            let mut f = [0u8; 8];
            read_exact_or(path, &mut r, &mut f, "label mean")?;
            let mean = f64::from_le_bytes(f);
            read_exact_or(path, &mut r, &mut f, "label variance")?;
            let variance = f64::from_le_bytes(f);
            *slot = Some(SetLabel {
                class_id,
                mean,
                variance,
            });
        }
    }

    let sets = (0..n_sets)
        .map(|i| {
            let values: Vec<f64> = payload[i * row * 4..(i + 1) * row * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok(SetRecord {
                id: i as u32,
                values: Tensor::new(vec![sample_size, n_features], values)?,
                label: labels[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        sample_size,
        n_features,
        label_kind,
        sets,
    })
}

/// Writes the `set_id,family,mean,variance` sidecar. The family column
/// carries the family name for synthetic corpora and the class id
/// otherwise.
pub fn save_labels_csv(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "set_id,family,mean,variance").map_err(io)?;
    for set in &corpus.sets {
        let (family, mean, variance) = match set.label {
            Some(l) => (class_name(corpus, l.class_id), l.mean, l.variance),
            None => (String::new(), 0.0, 0.0),
        };
        writeln!(w, "{},{},{},{}", set.id, family, mean, variance).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Human-readable class column for CSV outputs.
pub fn class_name(corpus: &Corpus, class_id: u32) -> String {
    match corpus.label_kind {
        LabelKind::SyntheticFamily => Family::from_class_id(class_id)
            .map(|f| f.name().to_string())
            .unwrap_or_else(|| class_id.to_string()),
        _ => class_id.to_string(),
    }
}
