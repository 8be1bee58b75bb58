use std::path::Path;

use super::{AbundanceMap, EndmemberMatrix, HsiCube, Scene, SceneSpec};
use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSIS";
const VERSION: u32 = 1;

/// Serializes a scene: magic, version, `H W B K` as u32, then the cube,
/// abundances and endmembers as little-endian f64, then a u32-length-prefixed
/// JSON copy of the spec.
pub fn scene_to_bytes(scene: &Scene) -> Result<Vec<u8>> {
    scene.check()?;
    let s = &scene.spec;
    let json = serde_json::to_vec(s)?;
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    for d in [s.height, s.width, s.bands, s.k] {
        w.len_u32(d)?;
    }
    w.f64s(scene.cube.data());
    w.f64s(scene.abundances.data());
    w.f64s(scene.endmembers.data());
    w.len_u32(json.len())?;
    w.bytes(&json);
    Ok(w.buf)
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<Scene> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"HSIS\""),
        });
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let b = r.u32("bands")? as usize;
    let k = r.u32("k")? as usize;
    let at = r.offset();
    let cube = r.f64s(h * w * b, "cube")?;
    let cube = HsiCube::new(h, w, b, cube).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
    let at = r.offset();
    let ab = r.f64s(h * w * k, "abundances")?;
    let ab = AbundanceMap::new(h, w, k, ab).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
    let at = r.offset();
    let em = r.f64s(k * b, "endmembers")?;
    let em = EndmemberMatrix::new(k, b, em).map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
    let len = r.u32("spec length")? as usize;
    let at = r.offset();
    let json = r.take(len, "spec")?;
    let spec: SceneSpec = serde_json::from_slice(json).map_err(|e| Error::Format {
        offset: at,
        message: format!("spec trailer: {e}"),
    })?;
    if !r.at_end() {
        return Err(r.fail("trailing bytes after spec"));
    }
    let scene = Scene {
        spec,
        cube,
        abundances: ab,
        endmembers: em,
    };
    scene.check().map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
    Ok(scene)
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_atomic(path, &scene_to_bytes(scene)?)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    scene_from_bytes(&std::fs::read(path)?)
}

/// Whether an endmember CSV starts with a row of band wavelengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvHeader {
    Present,
    Absent,
    /// Header if the first row is non-numeric, or strictly increasing with
    /// every value above 1 (reflectances stay near `[0, 1]`).
    Auto,
}

/// Parses one endmember per row, comma separated.
pub fn parse_endmembers_csv(text: &str, header: CsvHeader) -> Result<EndmemberMatrix> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let parse = |(no, l): (usize, &str)| -> std::result::Result<Vec<f64>, String> {
        l.split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|_| format!("line {no}: '{}' is not a number", f.trim())))
            .collect()
    };
    let skip = match header {
        CsvHeader::Present => 1,
        CsvHeader::Absent => 0,
        CsvHeader::Auto => match lines.first().map(|l| parse(*l)) {
            Some(Err(_)) => 1,
            Some(Ok(v)) if lines.len() > 1 && v.iter().all(|x| *x > 1.0) && v.windows(2).all(|p| p[0] < p[1]) => 1,
            _ => 0,
        },
    };
    let mut rows = Vec::new();
    for l in lines.into_iter().skip(skip) {
        rows.push(parse(l).map_err(Error::Config)?);
    }
    let bands = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || bands == 0 {
        return Err(Error::Config("endmember CSV has no data rows".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != bands) {
        return Err(Error::Config(format!(
            "endmember CSV row {} has {} values, expected {bands}",
            i + 1,
            rows[i].len()
        )));
    }
    if rows.iter().flatten().any(|v| *v < 0.0) {
        return Err(Error::Config("endmember CSV contains negative reflectance".into()));
    }
    EndmemberMatrix::new(rows.len(), bands, rows.concat())
}

pub fn read_endmembers_csv(path: &Path, header: CsvHeader) -> Result<EndmemberMatrix> {
    parse_endmembers_csv(&std::fs::read_to_string(path)?, header)
}

/// One endmember per row, shortest round-trip formatting.
pub fn write_endmembers_csv(endm: &EndmemberMatrix) -> String {
    let mut out = String::new();
    for k in 0..endm.k() {
        let row: Vec<String> = endm.row(k).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
