//! Point cloud, mesh, grid and CSV files.
//!
//! Every writer goes through [`atomic_write`]: output lands in a temporary file
//! next to the destination and is renamed over it once complete.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::field::{OrientedPoint, PointCloud};
use crate::kernel::{KernelKind, KernelParams};
use crate::mesh::Mesh;
use crate::shapes::default_kernel_params;
use crate::Vec3;

/// Writes `path` through a temporary sibling file and an atomic rename.
pub fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PLY

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Clone, Debug)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

impl Element {
    fn index_of(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

/// One element instance: scalars in declaration order, lists as vectors.
#[derive(Clone, Debug)]
enum Value {
    Scalar(f64),
    List(Vec<f64>),
}

impl Value {
    fn scalar(&self) -> f64 {
        match self {
            Value::Scalar(v) => *v,
            Value::List(_) => f64::NAN,
        }
    }
}

struct PlyData {
    elements: Vec<(Element, Vec<Vec<Value>>)>,
}

impl PlyData {
    fn element(&self, name: &str) -> Option<&(Element, Vec<Vec<Value>>)> {
        self.elements.iter().find(|(e, _)| e.name == name)
    }
}

fn read_ply(path: &Path) -> Result<PlyData> {
    let bytes = fs::read(path)?;
    let err = |location: String, message: &str| Error::parse(path, location, message);

    // Header: ASCII lines up to and including `end_header`.
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(end) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(err(format!("line {}", lines.len() + 1), "missing end_header"));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| err(format!("line {}", lines.len() + 1), "header is not valid text"))?
            .trim_end_matches('\r')
            .to_string();
        pos += end + 1;
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(err("line 1".into(), "not a PLY file (missing `ply` magic)"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let loc = format!("line {}", i + 1);
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["format", kind, _version] => {
                format = Some(match *kind {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => return Err(err(loc, &format!("unsupported format `{other}`"))),
                })
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| err(loc.clone(), &format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, name] => {
                let (Some(count), Some(item)) = (ScalarType::parse(count), ScalarType::parse(item)) else {
                    return Err(err(loc, "unknown list property type"));
                };
                let Some(element) = elements.last_mut() else {
                    return Err(err(loc, "property before any element"));
                };
                element.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::List { count, item },
                });
            }
            ["property", ty, name] => {
                let Some(ty) = ScalarType::parse(ty) else {
                    return Err(err(loc, &format!("unknown property type `{ty}`")));
                };
                let Some(element) = elements.last_mut() else {
                    return Err(err(loc, "property before any element"));
                };
                element.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::Scalar(ty),
                });
            }
            _ => return Err(err(loc, &format!("malformed header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| err("header".into(), "missing format line"))?;

    let mut data = Vec::with_capacity(elements.len());
    match format {
        Format::Ascii => {
            let body = std::str::from_utf8(&bytes[pos..]).map_err(|_| err("body".into(), "body is not valid text"))?;
            let mut body_lines = body
                .lines()
                .enumerate()
                .map(|(i, l)| (i + lines.len() + 1, l))
                .filter(|(_, l)| !l.trim().is_empty());
            for element in elements {
                let mut rows = Vec::with_capacity(element.count);
                for idx in 0..element.count {
                    let Some((line_no, line)) = body_lines.next() else {
                        return Err(err(
                            format!("{} element {idx}", element.name),
                            "unexpected end of file",
                        ));
                    };
                    let loc = format!("line {line_no}");
                    let mut tokens = line.split_whitespace();
                    let mut next = |what: &str| -> Result<f64> {
                        let t = tokens
                            .next()
                            .ok_or_else(|| err(loc.clone(), &format!("missing value for `{what}`")))?;
                        t.parse::<f64>()
                            .map_err(|_| err(loc.clone(), &format!("bad number `{t}` for `{what}`")))
                    };
                    let mut row = Vec::with_capacity(element.properties.len());
                    for prop in &element.properties {
                        match prop.kind {
                            PropertyKind::Scalar(_) => row.push(Value::Scalar(next(&prop.name)?)),
                            PropertyKind::List { .. } => {
                                let n = next(&prop.name)?;
                                if !(n >= 0.0 && n.fract() == 0.0) {
                                    return Err(err(loc.clone(), "bad list length"));
                                }
                                let items = (0..n as usize)
                                    .map(|_| next(&prop.name))
                                    .collect::<Result<Vec<_>>>()?;
                                row.push(Value::List(items));
                            }
                        }
                    }
                    rows.push(row);
                }
                data.push((element, rows));
            }
        }
        Format::BinaryLe => {
            let mut cursor = pos;
            for element in elements {
                let mut rows = Vec::with_capacity(element.count.min(1 << 24));
                for idx in 0..element.count {
                    let loc = || format!("{} element {idx}", element.name);
                    let mut take = |ty: ScalarType| -> Result<f64> {
                        let n = ty.size();
                        if cursor + n > bytes.len() {
                            return Err(err(loc(), "unexpected end of file"));
                        }
                        let v = ty.read_le(&bytes[cursor..cursor + n]);
                        cursor += n;
                        Ok(v)
                    };
                    let mut row = Vec::with_capacity(element.properties.len());
                    for prop in &element.properties {
                        match prop.kind {
                            PropertyKind::Scalar(ty) => row.push(Value::Scalar(take(ty)?)),
                            PropertyKind::List { count, item } => {
                                let n = take(count)?;
                                if n < 0.0 {
                                    return Err(err(loc(), "negative list length"));
                                }
                                let items = (0..n as usize).map(|_| take(item)).collect::<Result<Vec<_>>>()?;
                                row.push(Value::List(items));
                            }
                        }
                    }
                    rows.push(row);
                }
                data.push((element, rows));
            }
        }
    }
    Ok(PlyData { elements: data })
}

// ---------------------------------------------------------------------------
// Point clouds

/// One oriented point exactly as stored in a file.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRecord {
    pub position: Vec3,
    pub normal: Vec3,
    /// `(k, m)` when the file carries both.
    pub kernel: Option<(f64, f64)>,
    pub feature: Vec<f64>,
}

const COLOR_NAMES: [&str; 3] = ["red", "green", "blue"];

/// Reads a PLY or XYZ point file without any normalization.
pub fn read_point_records(path: &Path) -> Result<Vec<PointRecord>> {
    match extension(path).as_str() {
        "ply" => read_ply_points(path),
        "xyz" | "txt" => read_xyz(path),
        other => Err(Error::invalid(format!(
            "unsupported point file extension `{other}` (expected .ply or .xyz)"
        ))),
    }
}

fn read_ply_points(path: &Path) -> Result<Vec<PointRecord>> {
    let data = read_ply(path)?;
    let (element, rows) = data
        .element("vertex")
        .ok_or_else(|| Error::parse(path, "header", "no vertex element"))?;
    let required = ["x", "y", "z", "nx", "ny", "nz"];
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(required) {
        *slot = element
            .index_of(name)
            .ok_or_else(|| Error::parse(path, "header", format!("missing vertex property `{name}`")))?;
    }
    let k_idx = element.index_of("k");
    let m_idx = element.index_of("m");
    let colors: Vec<Option<usize>> = COLOR_NAMES.iter().map(|c| element.index_of(c)).collect();
    let has_color = colors.iter().all(|c| c.is_some());
    let color_scale: Vec<f64> = colors
        .iter()
        .map(|c| match c.map(|i| &element.properties[i].kind) {
            Some(PropertyKind::Scalar(ScalarType::U8)) => 1.0 / 255.0,
            Some(PropertyKind::Scalar(ScalarType::U16)) => 1.0 / 65535.0,
            _ => 1.0,
        })
        .collect();

    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let loc = || format!("vertex {i}");
        let v = |j: usize| row[j].scalar();
        let values: Vec<f64> = idx.iter().map(|&j| v(j)).collect();
        let kernel = match (k_idx, m_idx) {
            (Some(k), Some(m)) => Some((v(k), v(m))),
            _ => None,
        };
        let feature: Vec<f64> = if has_color {
            colors
                .iter()
                .zip(&color_scale)
                .map(|(c, s)| v(c.unwrap()) * s)
                .collect()
        } else {
            Vec::new()
        };
        let kernel_values = kernel.map_or(Vec::new(), |(k, m)| vec![k, m]);
        if let Some(bad) = values.iter().chain(&kernel_values).chain(&feature).find(|x| !x.is_finite()) {
            return Err(Error::parse(path, loc(), format!("non-finite value {bad}")));
        }
        out.push(PointRecord {
            position: Vec3::new(values[0], values[1], values[2]),
            normal: Vec3::new(values[3], values[4], values[5]),
            kernel,
            feature,
        });
    }
    Ok(out)
}

fn read_xyz(path: &Path) -> Result<Vec<PointRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(path, loc.clone(), format!("bad number `{t}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 6 {
            return Err(Error::parse(
                path,
                loc,
                format!("expected 6 columns (x y z nx ny nz), found {}", values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::parse(path, loc, format!("non-finite value {bad}")));
        }
        out.push(PointRecord {
            position: Vec3::new(values[0], values[1], values[2]),
            normal: Vec3::new(values[3], values[4], values[5]),
            kernel: None,
            feature: Vec::new(),
        });
    }
    Ok(out)
}

/// Affine map taking the bounding box of `positions` into `[0.05, 0.95]³`
/// with uniform scale, centred at 0.5. Returns `(scale, center)`.
pub fn normalization(positions: &[Vec3]) -> (f64, Vec3) {
    let Some(first) = positions.first() else {
        return (1.0, Vec3::new(0.5, 0.5, 0.5));
    };
    let (mut lo, mut hi) = (*first, *first);
    for p in positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    let scale = if extent > 0.0 { 0.9 / extent } else { 1.0 };
    (scale, (lo + hi) * 0.5)
}

/// Builds a cloud from file records. With `normalize`, positions are mapped by
/// [`normalization`] and stored `k` values scaled by its square. Points
/// without kernel parameters get [`default_kernel_params`].
pub fn cloud_from_records(records: Vec<PointRecord>, normalize: bool, kernel: KernelKind) -> Result<PointCloud> {
    if records.is_empty() {
        return Err(Error::invalid("point file holds no points"));
    }
    let (scale, center) = if normalize {
        normalization(&records.iter().map(|r| r.position).collect::<Vec<_>>())
    } else {
        (1.0, Vec3::new(0.5, 0.5, 0.5))
    };
    let map = |p: &Vec3| if normalize { Vec3::new(0.5, 0.5, 0.5) + (p - center) * scale } else { *p };
    let positions: Vec<Vec3> = records.iter().map(|r| map(&r.position)).collect();
    let fallback = if records.iter().any(|r| r.kernel.is_none()) {
        Some(default_kernel_params(&positions)?)
    } else {
        None
    };
    let points = records
        .into_iter()
        .zip(positions)
        .map(|(r, p)| {
            let params = match r.kernel {
                Some((k, m)) => KernelParams::new(k * scale * scale, m)?,
                None => fallback.expect("fallback computed when any point lacks parameters"),
            };
            OrientedPoint::new(p, r.normal, params, r.feature)
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(points, kernel)
}

/// Reads a point file and normalizes it into `[0.05, 0.95]³`.
pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    cloud_from_records(read_point_records(path)?, true, KernelKind::Compact)
}

/// Binary little-endian PLY with double `x y z nx ny nz k m` and, for
/// three-channel features, double `red green blue`.
pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let d = cloud.feature_dim;
    if d != 0 && d != 3 {
        return Err(Error::invalid(format!(
            "point PLY stores 0 or 3 feature channels, cloud has {d}"
        )));
    }
    atomic_write(path, |w| {
        writeln!(w, "ply\nformat binary_little_endian 1.0")?;
        writeln!(w, "element vertex {}", cloud.len())?;
        for name in ["x", "y", "z", "nx", "ny", "nz", "k", "m"] {
            writeln!(w, "property double {name}")?;
        }
        if d == 3 {
            for name in COLOR_NAMES {
                writeln!(w, "property double {name}")?;
            }
        }
        writeln!(w, "end_header")?;
        for p in &cloud.points {
            let values = p
                .position
                .iter()
                .chain(p.normal.iter())
                .copied()
                .chain([p.kernel.k(), p.kernel.m()])
                .chain(p.feature.iter().copied());
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Meshes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match extension(path).as_str() {
            "obj" => Ok(MeshFormat::Obj),
            "ply" => Ok(MeshFormat::Ply),
            other => Err(Error::invalid(format!(
                "unsupported mesh extension `{other}` (expected .obj or .ply)"
            ))),
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

pub fn write_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<()> {
    if !mesh.validate_indices() {
        return Err(Error::invalid("mesh has out-of-range triangle indices"));
    }
    match format {
        MeshFormat::Obj => write_obj(mesh, path),
        MeshFormat::Ply => write_mesh_ply(mesh, path),
    }
}

fn normals_for(mesh: &Mesh) -> Vec<Vec3> {
    if mesh.vertex_normals.len() == mesh.vertices.len() {
        mesh.vertex_normals.clone()
    } else {
        let mut m = mesh.clone();
        m.compute_vertex_normals();
        m.vertex_normals
    }
}

fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let normals = normals_for(mesh);
    atomic_write(path, |w| {
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for n in &normals {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
        }
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        }
        Ok(())
    })
}

fn write_mesh_ply(mesh: &Mesh, path: &Path) -> Result<()> {
    let normals = normals_for(mesh);
    let colors = mesh
        .vertex_features
        .as_ref()
        .filter(|f| f.len() == mesh.vertices.len() && f.iter().all(|c| c.len() == 3));
    atomic_write(path, |w| {
        writeln!(w, "ply\nformat binary_little_endian 1.0")?;
        writeln!(w, "element vertex {}", mesh.vertices.len())?;
        for name in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(w, "property float {name}")?;
        }
        if colors.is_some() {
            for name in COLOR_NAMES {
                writeln!(w, "property uchar {name}")?;
            }
        }
        writeln!(w, "element face {}", mesh.triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")?;
        for (i, (v, n)) in mesh.vertices.iter().zip(&normals).enumerate() {
            for x in v.iter().chain(n.iter()) {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
            if let Some(colors) = colors {
                for c in &colors[i] {
                    w.write_all(&[(c.clamp(0.0, 1.0) * 255.0).round() as u8])?;
                }
            }
        }
        for t in &mesh.triangles {
            w.write_all(&[3u8])?;
            for &i in t {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        }
        Ok(())
    })
}

/// Reads an OBJ or PLY mesh; polygons are fan-triangulated.
pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let mut mesh = match MeshFormat::from_path(path)? {
        MeshFormat::Obj => read_obj(path)?,
        MeshFormat::Ply => read_mesh_ply(path)?,
    };
    if !mesh.validate_indices() {
        return Err(Error::parse(path, "faces", "face index out of range"));
    }
    if mesh.vertex_normals.len() != mesh.vertices.len() {
        mesh.compute_vertex_normals();
    }
    Ok(mesh)
}

fn push_fan(triangles: &mut Vec<[u32; 3]>, poly: &[u32]) {
    for i in 1..poly.len().saturating_sub(1) {
        triangles.push([poly[0], poly[i], poly[i + 1]]);
    }
}

fn read_obj(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    let mut mesh = Mesh::default();
    let mut normals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let loc = || format!("line {}", i + 1);
        let mut tokens = line.split_whitespace();
        let number = |t: Option<&str>| -> Result<f64> {
            let t = t.ok_or_else(|| Error::parse(path, loc(), "missing coordinate"))?;
            let v: f64 = t
                .parse()
                .map_err(|_| Error::parse(path, loc(), format!("bad number `{t}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(path, loc(), format!("non-finite value {v}")))
            }
        };
        match tokens.next() {
            Some("v") => {
                let (x, y, z) = (number(tokens.next())?, number(tokens.next())?, number(tokens.next())?);
                mesh.vertices.push(Vec3::new(x, y, z));
            }
            Some("vn") => {
                let (x, y, z) = (number(tokens.next())?, number(tokens.next())?, number(tokens.next())?);
                normals.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let n = mesh.vertices.len() as i64;
                let poly = tokens
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let idx: i64 = first
                            .parse()
                            .map_err(|_| Error::parse(path, loc(), format!("bad face index `{t}`")))?;
                        let resolved = if idx < 0 { n + idx } else { idx - 1 };
                        if resolved < 0 || resolved >= n {
                            return Err(Error::parse(path, loc(), format!("face index {idx} out of range")));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<Vec<u32>>>()?;
                if poly.len() < 3 {
                    return Err(Error::parse(path, loc(), "face with fewer than 3 vertices"));
                }
                push_fan(&mut mesh.triangles, &poly);
            }
            _ => {}
        }
    }
    // Only trust normals that pair one-to-one with vertices, as we write them.
    if normals.len() == mesh.vertices.len() {
        mesh.vertex_normals = normals;
    }
    Ok(mesh)
}

fn read_mesh_ply(path: &Path) -> Result<Mesh> {
    let data = read_ply(path)?;
    let (element, rows) = data
        .element("vertex")
        .ok_or_else(|| Error::parse(path, "header", "no vertex element"))?;
    let idx = |name: &str| {
        element
            .index_of(name)
            .ok_or_else(|| Error::parse(path, "header", format!("missing vertex property `{name}`")))
    };
    let (x, y, z) = (idx("x")?, idx("y")?, idx("z")?);
    let normal_idx = match (element.index_of("nx"), element.index_of("ny"), element.index_of("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let colors: Option<Vec<usize>> = COLOR_NAMES.iter().map(|c| element.index_of(c)).collect();
    let mut mesh = Mesh::default();
    let mut features = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let p = Vec3::new(row[x].scalar(), row[y].scalar(), row[z].scalar());
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::parse(path, format!("vertex {i}"), "non-finite position"));
        }
        mesh.vertices.push(p);
        if let Some([a, b, c]) = normal_idx {
            mesh.vertex_normals
                .push(Vec3::new(row[a].scalar(), row[b].scalar(), row[c].scalar()));
        }
        if let Some(colors) = &colors {
            features.push(colors.iter().map(|&c| row[c].scalar() / 255.0).collect());
        }
    }
    if colors.is_some() {
        mesh.vertex_features = Some(features);
    }
    if let Some((face, rows)) = data.element("face") {
        let list = face
            .properties
            .iter()
            .position(|p| matches!(p.kind, PropertyKind::List { .. }))
            .ok_or_else(|| Error::parse(path, "header", "face element has no index list"))?;
        for (i, row) in rows.iter().enumerate() {
            let Value::List(items) = &row[list] else {
                unreachable!("list property holds a list");
            };
            if items.len() < 3 {
                return Err(Error::parse(path, format!("face {i}"), "face with fewer than 3 vertices"));
            }
            let poly: Vec<u32> = items.iter().map(|&v| v as u32).collect();
            push_fan(&mut mesh.triangles, &poly);
        }
    }
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// Grid dumps and CSV

pub const GRID_MAGIC: &[u8; 8] = b"IMLSGRID";

/// 16-byte header (`IMLSGRID`, u32 resolution, u32 reserved) followed by `R³`
/// little-endian doubles.
pub fn write_grid_dump(path: &Path, resolution: usize, values: &[f64]) -> Result<()> {
    if values.len() != resolution.pow(3) {
        return Err(Error::invalid("grid dump needs R³ values"));
    }
    let r = u32::try_from(resolution).map_err(|_| Error::invalid("resolution too large"))?;
    atomic_write(path, |w| {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&r.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn read_grid_dump(path: &Path) -> Result<(usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != GRID_MAGIC {
        return Err(Error::parse(path, "header", "missing IMLSGRID magic"));
    }
    let r = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 16 + 8 * r.pow(3);
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            "body",
            format!("expected {expected} bytes for resolution {r}, found {}", bytes.len()),
        ));
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((r, values))
}

/// Writes a header row and one row per record. Floats use the shortest
/// representation that reads back to the same value.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "{}", header.join(","))?;
        for row in rows {
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })
}

/// `step,loss,alpha` per optimization step.
pub fn write_loss_history(path: &Path, losses: &[f64], alphas: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = losses
        .iter()
        .zip(alphas)
        .enumerate()
        .map(|(s, (l, a))| vec![s.to_string(), l.to_string(), a.to_string()])
        .collect();
    write_csv(path, &["step", "loss", "alpha"], &rows)
}
