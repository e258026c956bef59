//! PLY 1.0 reader and writer for colored vertex clouds.
//!
//! Supported formats: `ascii 1.0` and `binary_little_endian 1.0`. The vertex
//! element must carry float/double `x`, `y`, `z` and uchar `red`, `green`,
//! `blue`; any other elements and properties are skipped.

use super::{PointCloud, PointCloudError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Result<Self, PointCloudError> {
        Ok(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => {
                return Err(PointCloudError::BadProperty(format!(
                    "unknown scalar type `{other}`"
                )))
            }
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Self::I8 => bytes[0] as i8 as f64,
            Self::U8 => bytes[0] as f64,
            Self::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { ty: ScalarType, name: String },
    List { count_ty: ScalarType, item_ty: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PointCloudError> {
    // the header is ASCII lines up to and including `end_header`
    let mut offset = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PointCloudError::MalformedHeader("missing end_header".into()))?;
        let line = String::from_utf8_lossy(&rest[..nl]).trim_end_matches('\r').to_string();
        offset += nl + 1;
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
        if offset >= bytes.len() {
            return Err(PointCloudError::MalformedHeader("missing end_header".into()));
        }
    }
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(PointCloudError::MalformedHeader(
            "first line must be `ply`".into(),
        ));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in &lines[1..lines.len() - 1] {
        let mut it = line.split_whitespace();
        match it.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                let kind = it.next().unwrap_or("");
                let version = it.next().unwrap_or("");
                if version != "1.0" {
                    return Err(PointCloudError::UnsupportedFormat(format!(
                        "version `{version}`"
                    )));
                }
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    other => {
                        return Err(PointCloudError::UnsupportedFormat(format!(
                            "`{other}`"
                        )))
                    }
                });
            }
            Some("element") => {
                let name = it
                    .next()
                    .ok_or_else(|| PointCloudError::MalformedHeader("element without name".into()))?;
                let count: usize = it
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| PointCloudError::MalformedHeader("element without count".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements.last_mut().ok_or_else(|| {
                    PointCloudError::MalformedHeader("property before any element".into())
                })?;
                let first = it.next().ok_or_else(|| {
                    PointCloudError::MalformedHeader("property without type".into())
                })?;
                if first == "list" {
                    let count_ty = ScalarType::parse(it.next().unwrap_or(""))?;
                    let item_ty = ScalarType::parse(it.next().unwrap_or(""))?;
                    element.properties.push(Property::List { count_ty, item_ty });
                } else {
                    let ty = ScalarType::parse(first)?;
                    let name = it.next().unwrap_or("").to_string();
                    element.properties.push(Property::Scalar { ty, name });
                }
            }
            Some(other) => {
                return Err(PointCloudError::MalformedHeader(format!(
                    "unrecognized keyword `{other}`"
                )));
            }
        }
    }
    let format = format
        .ok_or_else(|| PointCloudError::MalformedHeader("missing format line".into()))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
    })
}

/// Column indexes of x/y/z/red/green/blue inside the vertex property list.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: [usize; 3],
}

fn vertex_layout(element: &Element) -> Result<VertexLayout, PointCloudError> {
    let mut xyz = [usize::MAX; 3];
    let mut rgb = [usize::MAX; 3];
    for (i, prop) in element.properties.iter().enumerate() {
        if let Property::Scalar { ty, name } = prop {
            let slot = match name.as_str() {
                "x" => Some((&mut xyz, 0, true)),
                "y" => Some((&mut xyz, 1, true)),
                "z" => Some((&mut xyz, 2, true)),
                "red" => Some((&mut rgb, 0, false)),
                "green" => Some((&mut rgb, 1, false)),
                "blue" => Some((&mut rgb, 2, false)),
                _ => None,
            };
            if let Some((arr, idx, is_coord)) = slot {
                if is_coord && !matches!(ty, ScalarType::F32 | ScalarType::F64) {
                    return Err(PointCloudError::BadProperty(format!(
                        "coordinate `{name}` must be float or double"
                    )));
                }
                if !is_coord && *ty != ScalarType::U8 {
                    return Err(PointCloudError::BadProperty(format!(
                        "color `{name}` must be uchar"
                    )));
                }
                arr[idx] = i;
            }
        }
    }
    if xyz.contains(&usize::MAX) {
        return Err(PointCloudError::BadProperty("vertex element lacks x/y/z".into()));
    }
    if rgb.contains(&usize::MAX) {
        return Err(PointCloudError::BadProperty(
            "vertex element lacks red/green/blue".into(),
        ));
    }
    Ok(VertexLayout { xyz, rgb })
}

/// Parses a PLY document into a point cloud, one point per declared vertex,
/// in declaration order.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, PointCloudError> {
    let header = parse_header(bytes)?;
    let vertex = header
        .elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| PointCloudError::BadProperty("no vertex element".into()))?;
    let layout = vertex_layout(vertex)?;
    let body = &bytes[header.body_offset..];
    match header.format {
        PlyFormat::Ascii => parse_ascii(body, &header.elements, &layout),
        PlyFormat::BinaryLe => parse_binary(body, &header.elements, &layout),
    }
}

fn parse_ascii(
    body: &[u8],
    elements: &[Element],
    layout: &VertexLayout,
) -> Result<PointCloud, PointCloudError> {
    let text = String::from_utf8_lossy(body);
    let mut tokens = text.split_ascii_whitespace();
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for element in elements {
        let is_vertex = element.name == "vertex";
        for record in 0..element.count {
            let mut scalars: Vec<f64> = Vec::with_capacity(element.properties.len());
            for prop in &element.properties {
                match prop {
                    Property::Scalar { .. } => {
                        let tok = tokens.next().ok_or(PointCloudError::CountMismatch {
                            expected: element.count,
                            got: record,
                        })?;
                        let v: f64 = tok.parse().map_err(|_| {
                            PointCloudError::BadProperty(format!("bad number `{tok}`"))
                        })?;
                        scalars.push(v);
                    }
                    Property::List { .. } => {
                        let tok = tokens.next().ok_or(PointCloudError::CountMismatch {
                            expected: element.count,
                            got: record,
                        })?;
                        let n: usize = tok.parse().map_err(|_| {
                            PointCloudError::BadProperty(format!("bad list count `{tok}`"))
                        })?;
                        for _ in 0..n {
                            tokens.next().ok_or(PointCloudError::CountMismatch {
                                expected: element.count,
                                got: record,
                            })?;
                        }
                        scalars.push(f64::NAN); // placeholder, never a vertex column
                    }
                }
            }
            if is_vertex {
                push_vertex(&scalars, layout, &mut positions, &mut colors)?;
            }
        }
    }
    PointCloud::new(positions, colors)
}

fn parse_binary(
    body: &[u8],
    elements: &[Element],
    layout: &VertexLayout,
) -> Result<PointCloud, PointCloudError> {
    let mut offset = 0usize;
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for element in elements {
        let is_vertex = element.name == "vertex";
        for record in 0..element.count {
            let mut scalars: Vec<f64> = Vec::with_capacity(element.properties.len());
            for prop in &element.properties {
                match prop {
                    Property::Scalar { ty, .. } => {
                        let size = ty.size();
                        if offset + size > body.len() {
                            return Err(PointCloudError::CountMismatch {
                                expected: element.count,
                                got: record,
                            });
                        }
                        scalars.push(ty.read_le(&body[offset..offset + size]));
                        offset += size;
                    }
                    Property::List { count_ty, item_ty } => {
                        let csize = count_ty.size();
                        if offset + csize > body.len() {
                            return Err(PointCloudError::CountMismatch {
                                expected: element.count,
                                got: record,
                            });
                        }
                        let n = count_ty.read_le(&body[offset..offset + csize]) as usize;
                        offset += csize;
                        let skip = n * item_ty.size();
                        if offset + skip > body.len() {
                            return Err(PointCloudError::CountMismatch {
                                expected: element.count,
                                got: record,
                            });
                        }
                        offset += skip;
                        scalars.push(f64::NAN);
                    }
                }
            }
            if is_vertex {
                push_vertex(&scalars, layout, &mut positions, &mut colors)?;
            }
        }
    }
    PointCloud::new(positions, colors)
}

fn push_vertex(
    scalars: &[f64],
    layout: &VertexLayout,
    positions: &mut Vec<[f64; 3]>,
    colors: &mut Vec<[u8; 3]>,
) -> Result<(), PointCloudError> {
    let p = [
        scalars[layout.xyz[0]],
        scalars[layout.xyz[1]],
        scalars[layout.xyz[2]],
    ];
    if p.iter().any(|c| !c.is_finite()) {
        return Err(PointCloudError::NonFinite);
    }
    let c = [
        scalars[layout.rgb[0]] as u8,
        scalars[layout.rgb[1]] as u8,
        scalars[layout.rgb[2]] as u8,
    ];
    positions.push(p);
    colors.push(c);
    Ok(())
}

/// Serializes the cloud. Coordinates are written as doubles so a round trip
/// reproduces them exactly; binary output is byte-deterministic.
pub fn write_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + cloud.len() * 27);
    let format_line = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLe => "binary_little_endian",
    };
    out.extend_from_slice(
        format!(
            "ply\nformat {format_line} 1.0\nelement vertex {}\n\
             property double x\nproperty double y\nproperty double z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            cloud.len()
        )
        .as_bytes(),
    );
    match format {
        PlyFormat::Ascii => {
            for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
                out.extend_from_slice(
                    format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], c[0], c[1], c[2]).as_bytes(),
                );
            }
        }
        PlyFormat::BinaryLe => {
            for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
                for coord in p {
                    out.extend_from_slice(&coord.to_le_bytes());
                }
                out.extend_from_slice(c);
            }
        }
    }
    out
}
