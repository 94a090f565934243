//! Wavefront OBJ and Stanford PLY reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, TriMesh};

fn parse_err(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

/// Parses OBJ text. Polygons are fan-triangulated; texture and normal
/// indices (`v/vt/vn`) and negative (relative) indices are accepted.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let loc = || format!("line {}", n + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    let tok = it.next().ok_or_else(|| parse_err(path, loc(), "vertex needs 3 coordinates"))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| parse_err(path, loc(), format!("bad coordinate `{tok}`")))?;
                }
                vertices.push(Point::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| parse_err(path, loc(), format!("bad face index `{tok}`")))?;
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        -1
                    };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(parse_err(path, loc(), format!("face index {i} out of range")));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err(path, loc(), "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(TriMesh { vertices, faces })
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

/// OBJ text with shortest round-trip float formatting.
pub fn format_obj(mesh: &TriMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {:?} {:?} {:?}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

pub fn save_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    fs::write(path, format_obj(mesh)).map_err(|e| Error::io(path, e))
}

/// Vertices and (possibly empty) triangle list read from a PLY file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Point>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn into_cloud(self) -> Result<PointCloud> {
        PointCloud::new(self.vertices)
    }

    pub fn into_mesh(self) -> TriMesh {
        TriMesh {
            vertices: self.vertices,
            faces: self.faces,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

/// Parses ASCII or binary little-endian PLY with `vertex` (x, y, z) and
/// optional `face` elements; other elements and properties are skipped.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<PlyData> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| *pos + e);
        let line = String::from_utf8_lossy(&bytes[*pos..end]).trim().to_string();
        *pos = (end + 1).min(bytes.len());
        line_no += 1;
        Some(line)
    };
    let header_err = |msg: &str, pos: usize| parse_err(path, format!("header byte {pos}"), msg);

    if next_line(&mut pos).as_deref() != Some("ply") {
        return Err(header_err("missing `ply` magic", 0));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let at = pos;
        let line = next_line(&mut pos).ok_or_else(|| header_err("header not terminated", at))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    _ => return Err(header_err(&format!("unsupported format `{f}`"), at)),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| header_err("bad element count", at))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let (c, i) = (Scalar::parse(ct), Scalar::parse(it));
                let el = elements.last_mut().ok_or_else(|| header_err("property before element", at))?;
                match (c, i) {
                    (Some(c), Some(i)) => el.props.push(Property::List(name.to_string(), c, i)),
                    _ => return Err(header_err("unknown list type", at)),
                }
            }
            ["property", ty, name] => {
                let t = Scalar::parse(ty).ok_or_else(|| header_err(&format!("unknown type `{ty}`"), at))?;
                let el = elements.last_mut().ok_or_else(|| header_err("property before element", at))?;
                el.props.push(Property::Scalar(name.to_string(), t));
            }
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(header_err(&format!("unrecognized header line `{line}`"), at)),
        }
    }
    let format = format.ok_or_else(|| header_err("missing format line", pos))?;

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    match format {
        Format::BinaryLe => {
            let mut cur = pos;
            let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
                if *cur + n > bytes.len() {
                    return Err(parse_err(path, format!("byte {}", *cur), "truncated body"));
                }
                let s = &bytes[*cur..*cur + n];
                *cur += n;
                Ok(s)
            };
            for el in &elements {
                for _ in 0..el.count {
                    let mut xyz = [0.0; 3];
                    let mut poly: Option<Vec<u32>> = None;
                    for p in &el.props {
                        match p {
                            Property::Scalar(name, t) => {
                                let v = t.read_le(take(&mut cur, t.size())?);
                                match name.as_str() {
                                    "x" => xyz[0] = v,
                                    "y" => xyz[1] = v,
                                    "z" => xyz[2] = v,
                                    _ => {}
                                }
                            }
                            Property::List(name, ct, it) => {
                                let n = ct.read_le(take(&mut cur, ct.size())?) as usize;
                                let mut items = Vec::with_capacity(n);
                                for _ in 0..n {
                                    items.push(it.read_le(take(&mut cur, it.size())?) as u32);
                                }
                                if name == "vertex_indices" || name == "vertex_index" {
                                    poly = Some(items);
                                }
                            }
                        }
                    }
                    collect(el, xyz, poly, &mut vertices, &mut faces, path, cur)?;
                }
            }
        }
        Format::Ascii => {
            let body = String::from_utf8_lossy(&bytes[pos..]);
            let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            let header_lines = line_no;
            for el in &elements {
                for _ in 0..el.count {
                    let (n, line) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, "end of file".into(), "truncated body"))?;
                    let loc = format!("line {}", header_lines + n + 1);
                    let mut toks = line.split_whitespace();
                    let num = |toks: &mut std::str::SplitWhitespace| -> Result<f64> {
                        let t = toks.next().ok_or_else(|| parse_err(path, loc.clone(), "missing value"))?;
                        t.parse().map_err(|_| parse_err(path, loc.clone(), format!("bad number `{t}`")))
                    };
                    let mut xyz = [0.0; 3];
                    let mut poly = None;
                    for p in &el.props {
                        match p {
                            Property::Scalar(name, _) => {
                                let v = num(&mut toks)?;
                                match name.as_str() {
                                    "x" => xyz[0] = v,
                                    "y" => xyz[1] = v,
                                    "z" => xyz[2] = v,
                                    _ => {}
                                }
                            }
                            Property::List(name, _, _) => {
                                let n = num(&mut toks)? as usize;
                                let items = (0..n).map(|_| num(&mut toks).map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
                                if name == "vertex_indices" || name == "vertex_index" {
                                    poly = Some(items);
                                }
                            }
                        }
                    }
                    collect(el, xyz, poly, &mut vertices, &mut faces, path, n)?;
                }
            }
        }
    }
    Ok(PlyData { vertices, faces })
}

fn collect(
    el: &Element,
    xyz: [f64; 3],
    poly: Option<Vec<u32>>,
    vertices: &mut Vec<Point>,
    faces: &mut Vec<[u32; 3]>,
    path: &Path,
    at: usize,
) -> Result<()> {
    match el.name.as_str() {
        "vertex" => vertices.push(Point::new(xyz[0], xyz[1], xyz[2])),
        "face" => {
            let p = poly.unwrap_or_default();
            if p.len() < 3 {
                return Err(parse_err(path, format!("record {at}"), "face needs at least 3 vertices"));
            }
            for k in 1..p.len() - 1 {
                faces.push([p[0], p[k], p[k + 1]]);
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<PlyData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let data = parse_ply(&bytes, path)?;
    if let Some(f) = data.faces.iter().flatten().find(|&&i| i as usize >= data.vertices.len()) {
        return Err(parse_err(path, "faces".into(), format!("vertex index {f} out of range")));
    }
    Ok(data)
}

/// Binary little-endian PLY with `double` coordinates, so values round-trip exactly.
pub fn encode_ply_binary(vertices: &[Point], faces: &[[u32; 3]]) -> Vec<u8> {
    let mut out = ply_header("binary_little_endian", vertices.len(), faces.len(), "double").into_bytes();
    for v in vertices {
        for c in [v.x, v.y, v.z] {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for f in faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

pub fn encode_ply_ascii(vertices: &[Point], faces: &[[u32; 3]]) -> String {
    let mut out = ply_header("ascii", vertices.len(), faces.len(), "double");
    for v in vertices {
        out.push_str(&format!("{:?} {:?} {:?}\n", v.x, v.y, v.z));
    }
    for f in faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    out
}

fn ply_header(format: &str, nv: usize, nf: usize, ty: &str) -> String {
    let mut h = format!("ply\nformat {format} 1.0\nelement vertex {nv}\n");
    for axis in ["x", "y", "z"] {
        h.push_str(&format!("property {ty} {axis}\n"));
    }
    if nf > 0 {
        h.push_str(&format!("element face {nf}\nproperty list uchar int vertex_indices\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn save_ply(vertices: &[Point], faces: &[[u32; 3]], path: &Path, binary: bool) -> Result<()> {
    let bytes = if binary {
        encode_ply_binary(vertices, faces)
    } else {
        encode_ply_ascii(vertices, faces).into_bytes()
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a point cloud from `.ply` or `.obj` (vertices only) by extension.
pub fn load_points(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => PointCloud::new(load_obj(path)?.vertices),
        _ => load_ply(path)?.into_cloud(),
    }
}

/// Reads a mesh from `.obj` or `.ply` by extension.
pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => Ok(load_ply(path)?.into_mesh()),
        _ => load_obj(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn single_triangle_obj_round_trip() {
        let mesh = TriMesh {
            vertices: vec![Point::new(0.1, 0.2, 0.3), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, -1e-7)],
            faces: vec![[0, 1, 2]],
        };
        assert_eq!(parse_obj(&format_obj(&mesh), p()).unwrap(), mesh);
    }

    #[test]
    fn polygon_is_fan_triangulated() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0.5 1.5 0\nv 0 1 0\nf 1/1/1 2/2/2 3 4 5\n";
        let m = parse_obj(text, p()).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3], [0, 3, 4]]);
        let rel = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n", p()).unwrap();
        assert_eq!(rel.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn malformed_obj_reports_line() {
        let err = parse_obj("v 0 0 0\nv 1 x 0\n", p()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_obj("v 0 0 0\nf 1 2 3\n", p()).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn binary_ply_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let verts: Vec<Point> = (0..1000)
            .map(|_| Point::new(rng.random(), rng.random::<f64>() * 1e-9, -rng.random::<f64>() * 1e6))
            .collect();
        let faces = vec![[0, 1, 2], [997, 998, 999]];
        let bytes = encode_ply_binary(&verts, &faces);
        let back = parse_ply(&bytes, p()).unwrap();
        assert_eq!(back.faces, faces);
        for (a, b) in back.vertices.iter().zip(&verts) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
        assert_eq!(encode_ply_binary(&back.vertices, &back.faces), bytes);
    }

    #[test]
    fn ascii_ply_round_trip() {
        let verts = vec![Point::new(0.25, -1.5, 3.0), Point::new(1e-7, 2.0, 0.1)];
        let back = parse_ply(encode_ply_ascii(&verts, &[]).as_bytes(), p()).unwrap();
        for (a, b) in back.vertices.iter().zip(&verts) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn float_ply_with_extra_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n".to_vec();
        for v in [1.5f32, -2.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(200);
        let d = parse_ply(&bytes, p()).unwrap();
        assert_eq!(d.vertices, vec![Point::new(1.5, -2.0, 0.25)]);
    }

    #[test]
    fn truncated_ply_is_rejected() {
        let bytes = encode_ply_binary(&[Point::new(1.0, 2.0, 3.0)], &[]);
        let err = parse_ply(&bytes[..bytes.len() - 4], p()).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        assert!(parse_ply(b"plx\n", p()).is_err());
    }
}
