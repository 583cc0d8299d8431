//! The "DFF1" field-file format.
//!
//! Little-endian layout:
//!
//! ```text
//! header   magic "DFF1" | version u32 | sample count u64 | d_seg u32 | d_q u32 | flags u32
//! flags    bit0 = gt_labels column present, bit1 = ray block, bit2 = viewpoint block
//! records  count x { position 3xf32 | sigma f32 | seg d_seg x f32 | query d_q x f32
//!                    | label i32 (iff bit0; -1 encodes "no label") }
//! rays     (iff bit1) u64 ray count, then per ray:
//!          origin 3xf32 | direction 3xf32 | n u32 | n x u64 sample index | n x f32 delta
//! views    (iff bit2) u64 viewpoint count, then per viewpoint:
//!          id u32 | ray_start u64 | ray_count u64 | position 3xf32 | forward 3xf32
//! ```
//!
//! The class catalog and generator seed live in a JSON sidecar next to the
//! binary file (`<path>.catalog.json`); floats survive the JSON round trip
//! bit-exactly at f32 precision.

use super::{ClassCatalog, FieldSample, FieldSet, Ray, Viewpoint};
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 4] = *b"DFF1";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_LABELS: u32 = 1;
const FLAG_RAYS: u32 = 1 << 1;
const FLAG_VIEWPOINTS: u32 = 1 << 2;

/// Sidecar path for a field file: `<path>.catalog.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".catalog.json");
    PathBuf::from(os)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: Option<u64>,
    catalog: ClassCatalog,
}

/// Byte-counting reader so format errors can point at an offset.
struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn new(inner: R) -> Self {
        Counted { inner, offset: 0 }
    }

    fn truncated(&self) -> Error {
        Error::format(self.offset, "truncated payload")
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| self.truncated())?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let v = self.inner.read_u32::<LittleEndian>().map_err(|_| self.truncated())?;
        self.offset += 4;
        Ok(v)
    }

    fn u64(&mut self) -> Result<u64> {
        let v = self.inner.read_u64::<LittleEndian>().map_err(|_| self.truncated())?;
        self.offset += 8;
        Ok(v)
    }

    fn i32(&mut self) -> Result<i32> {
        let v = self.inner.read_i32::<LittleEndian>().map_err(|_| self.truncated())?;
        self.offset += 4;
        Ok(v)
    }

    fn f32(&mut self) -> Result<f32> {
        let v = self.inner.read_f32::<LittleEndian>().map_err(|_| self.truncated())?;
        self.offset += 4;
        Ok(v)
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = vec![0f32; n];
        for v in &mut out {
            *v = self.f32()?;
        }
        Ok(out)
    }

    fn f32_3(&mut self) -> Result<[f32; 3]> {
        Ok([self.f32()?, self.f32()?, self.f32()?])
    }
}

/// Write a [`FieldSet`] to `path` (plus the JSON sidecar when the set carries
/// a catalog or seed). The round trip through [`load_fieldset`] is bit-exact.
pub fn save_fieldset(fieldset: &FieldSet, path: &Path) -> Result<()> {
    fieldset.validate()?;
    let mut w = BufWriter::new(File::create(path)?);

    let has_labels = fieldset.samples.iter().any(|s| s.gt_label.is_some());
    let mut flags = 0u32;
    if has_labels {
        flags |= FLAG_LABELS;
    }
    if !fieldset.rays.is_empty() {
        flags |= FLAG_RAYS;
    }
    if !fieldset.viewpoints.is_empty() {
        flags |= FLAG_VIEWPOINTS;
    }

    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(fieldset.samples.len() as u64)?;
    w.write_u32::<LittleEndian>(fieldset.d_seg as u32)?;
    w.write_u32::<LittleEndian>(fieldset.d_q as u32)?;
    w.write_u32::<LittleEndian>(flags)?;

    for s in &fieldset.samples {
        for &p in &s.position {
            w.write_f32::<LittleEndian>(p)?;
        }
        w.write_f32::<LittleEndian>(s.sigma)?;
        for &v in &s.seg_feature {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &v in &s.query_feature {
            w.write_f32::<LittleEndian>(v)?;
        }
        if has_labels {
            w.write_i32::<LittleEndian>(s.gt_label.map_or(-1, |l| l as i32))?;
        }
    }

    if !fieldset.rays.is_empty() {
        w.write_u64::<LittleEndian>(fieldset.rays.len() as u64)?;
        for ray in &fieldset.rays {
            for &p in &ray.origin {
                w.write_f32::<LittleEndian>(p)?;
            }
            for &p in &ray.direction {
                w.write_f32::<LittleEndian>(p)?;
            }
            w.write_u32::<LittleEndian>(ray.samples.len() as u32)?;
            for &i in &ray.samples {
                w.write_u64::<LittleEndian>(u64::from(i))?;
            }
            for &d in &ray.deltas {
                w.write_f32::<LittleEndian>(d)?;
            }
        }
    }

    if !fieldset.viewpoints.is_empty() {
        w.write_u64::<LittleEndian>(fieldset.viewpoints.len() as u64)?;
        for vp in &fieldset.viewpoints {
            w.write_u32::<LittleEndian>(vp.id)?;
            w.write_u64::<LittleEndian>(vp.ray_start)?;
            w.write_u64::<LittleEndian>(vp.ray_count)?;
            for &p in &vp.position {
                w.write_f32::<LittleEndian>(p)?;
            }
            for &p in &vp.forward {
                w.write_f32::<LittleEndian>(p)?;
            }
        }
    }
    w.flush()?;

    if fieldset.seed.is_some() || !fieldset.catalog.is_empty() {
        let sidecar = Sidecar {
            seed: fieldset.seed,
            catalog: fieldset.catalog.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Validation(format!("catalog serialization failed: {e}")))?;
        std::fs::write(sidecar_path(path), json)?;
    }
    Ok(())
}

/// Load a field file written by [`save_fieldset`]. Malformed content is
/// rejected with a format error carrying the byte offset; nothing partial
/// is returned.
pub fn load_fieldset(path: &Path) -> Result<FieldSet> {
    let mut r = Counted::new(BufReader::new(File::open(path)?));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"DFF1\"")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let d_seg = r.u32()? as usize;
    let d_q = r.u32()? as usize;
    if d_seg == 0 || d_q == 0 {
        return Err(Error::format(16, "feature dimensions must be positive"));
    }
    let flags = r.u32()?;
    if flags & !(FLAG_LABELS | FLAG_RAYS | FLAG_VIEWPOINTS) != 0 {
        return Err(Error::format(24, format!("unknown flag bits in {flags:#x}")));
    }
    let has_labels = flags & FLAG_LABELS != 0;

    let mut samples = Vec::with_capacity(count.min(1 << 24) as usize);
    for i in 0..count {
        let position = r.f32_3()?;
        let sigma = r.f32()?;
        if sigma < 0.0 {
            return Err(Error::format(r.offset - 4, format!("sample {i}: negative sigma")));
        }
        let seg_feature = r.f32_vec(d_seg)?;
        let query_feature = r.f32_vec(d_q)?;
        let gt_label = if has_labels {
            let raw = r.i32()?;
            if raw < -1 {
                return Err(Error::format(r.offset - 4, format!("sample {i}: bad label {raw}")));
            }
            (raw >= 0).then_some(raw as u32)
        } else {
            None
        };
        samples.push(FieldSample {
            position,
            sigma,
            seg_feature,
            query_feature,
            gt_label,
        });
    }

    let mut rays = Vec::new();
    if flags & FLAG_RAYS != 0 {
        let n_rays = r.u64()?;
        for ri in 0..n_rays {
            let origin = r.f32_3()?;
            let direction = r.f32_3()?;
            let n = r.u32()? as usize;
            let mut idx = Vec::with_capacity(n);
            for _ in 0..n {
                let v = r.u64()?;
                if v >= count {
                    return Err(Error::format(
                        r.offset - 8,
                        format!("ray {ri}: sample index {v} out of range ({count} samples)"),
                    ));
                }
                idx.push(v as u32);
            }
            let mut deltas = Vec::with_capacity(n);
            for _ in 0..n {
                let d = r.f32()?;
                if d <= 0.0 {
                    return Err(Error::format(r.offset - 4, format!("ray {ri}: non-positive delta")));
                }
                deltas.push(d);
            }
            rays.push(Ray {
                origin,
                direction,
                samples: idx,
                deltas,
            });
        }
    }

    let mut viewpoints = Vec::new();
    if flags & FLAG_VIEWPOINTS != 0 {
        let n_vp = r.u64()?;
        for vi in 0..n_vp {
            let id = r.u32()?;
            let ray_start = r.u64()?;
            let ray_count = r.u64()?;
            if ray_start + ray_count > rays.len() as u64 {
                return Err(Error::format(
                    r.offset - 16,
                    format!("viewpoint {vi}: ray range out of bounds"),
                ));
            }
            let position = r.f32_3()?;
            let forward = r.f32_3()?;
            viewpoints.push(Viewpoint {
                id,
                position,
                forward,
                ray_start,
                ray_count,
            });
        }
    }

    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(Error::Io)? != 0 {
        return Err(Error::format(r.offset, "trailing bytes after payload"));
    }

    let (seed, catalog) = {
        let sp = sidecar_path(path);
        if sp.exists() {
            let text = std::fs::read_to_string(&sp)?;
            let sidecar: Sidecar = serde_json::from_str(&text)
                .map_err(|e| Error::format(0, format!("catalog sidecar: {e}")))?;
            (sidecar.seed, sidecar.catalog)
        } else {
            (None, ClassCatalog::default())
        }
    };

    let fieldset = FieldSet {
        d_seg,
        d_q,
        samples,
        rays,
        viewpoints,
        seed,
        catalog,
    };
    fieldset.validate()?;
    Ok(fieldset)
}
