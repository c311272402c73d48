//! Binary little-endian PLY with `x,y,z` float32 and `red,green,blue` uchar.
//!
//! The reader accepts extra scalar vertex properties (skipped) and any
//! elements after `vertex`; it rejects ASCII and big-endian files.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{CorpusError, Point};

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

pub fn write_ply(path: &Path, points: &[Point]) -> Result<(), CorpusError> {
    let mut buf = Vec::with_capacity(128 + points.len() * 15);
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )
    .expect("writing to a Vec cannot fail");
    for p in points {
        buf.extend_from_slice(&p.x.to_le_bytes());
        buf.extend_from_slice(&p.y.to_le_bytes());
        buf.extend_from_slice(&p.z.to_le_bytes());
        buf.extend_from_slice(&[p.r, p.g, p.b]);
    }
    std::fs::write(path, buf).map_err(|e| CorpusError::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Vec<Point>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let field = "points";

    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String, CorpusError> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| CorpusError::io(path, e))?;
        if n == 0 {
            return Err(CorpusError::schema(field, "unexpected end of PLY header"));
        }
        Ok(line.trim_end().to_string())
    };

    if next_line(&mut reader)? != "ply" {
        return Err(CorpusError::schema(field, "missing `ply` magic"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_other_element = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(CorpusError::schema(
                        field,
                        format!("unsupported PLY format `{fmt}`"),
                    ));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                if *name == "vertex" {
                    if seen_other_element {
                        return Err(CorpusError::schema(field, "vertex must be the first element"));
                    }
                    vertex_count = Some(count.parse().map_err(|_| {
                        CorpusError::schema(field, format!("bad vertex count `{count}`"))
                    })?);
                    in_vertex = true;
                } else {
                    seen_other_element = true;
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(CorpusError::schema(field, "list properties on vertex unsupported"));
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| {
                    CorpusError::schema(field, format!("unknown property type `{ty}`"))
                })?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(CorpusError::schema(field, format!("bad header line `{l}`"))),
        }
    }
    let count = vertex_count.ok_or_else(|| CorpusError::schema(field, "no vertex element"))?;

    let find = |name: &str, want: &[&str]| -> Result<usize, CorpusError> {
        let (i, (_, ty)) = props
            .iter()
            .enumerate()
            .find(|(_, (n, _))| n == name)
            .ok_or_else(|| CorpusError::schema(field, format!("missing property `{name}`")))?;
        let ok = match ty {
            Scalar::F32 => want.contains(&"float"),
            Scalar::U8 => want.contains(&"uchar"),
            _ => false,
        };
        if !ok {
            return Err(CorpusError::schema(
                field,
                format!("property `{name}` must be {}", want[0]),
            ));
        }
        Ok(i)
    };
    let idx = [
        find("x", &["float"])?,
        find("y", &["float"])?,
        find("z", &["float"])?,
        find("red", &["uchar"])?,
        find("green", &["uchar"])?,
        find("blue", &["uchar"])?,
    ];
    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, ty) in &props {
        offsets.push(stride);
        stride += ty.size();
    }

    let mut body = vec![0u8; stride * count];
    reader
        .read_exact(&mut body)
        .map_err(|_| CorpusError::schema(field, format!("PLY body shorter than {count} vertices")))?;
    let f32_at = |rec: &[u8], o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
    let points = body
        .chunks_exact(stride)
        .map(|rec| Point {
            x: f32_at(rec, offsets[idx[0]]),
            y: f32_at(rec, offsets[idx[1]]),
            z: f32_at(rec, offsets[idx[2]]),
            r: rec[offsets[idx[3]]],
            g: rec[offsets[idx[4]]],
            b: rec[offsets[idx[5]]],
        })
        .collect();
    Ok(points)
}
