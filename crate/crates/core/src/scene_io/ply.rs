//! Binary little-endian PLY in the 3DGS property layout.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::splat::GaussianCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Scalar> {
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

    fn read(self, b: &[u8]) -> f32 {
        match self {
            Scalar::I8 => b[0] as i8 as f32,
            Scalar::U8 => b[0] as f32,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f32,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f32,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()) as f32,
        }
    }
}

struct Property {
    name: String,
    ty: Scalar,
    offset: usize,
}

struct Header {
    count: usize,
    stride: usize,
    props: Vec<Property>,
    /// Bytes of any elements declared before `vertex`.
    skip_before: usize,
}

fn perr(message: impl Into<String>) -> Error {
    Error::parse("PLY", message)
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| perr(format!("reading header: {e}")))?;
        if n == 0 {
            return Err(perr("header ended before end_header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };

    if next(r)? != "ply" {
        return Err(perr("missing 'ply' magic"));
    }
    let mut format_seen = false;
    let mut current: Option<String> = None;
    let mut vertex: Option<(usize, Vec<Property>)> = None;
    let mut skip_before = 0usize;
    let mut other: Option<(usize, usize)> = None; // (count, stride) of element being declared
    loop {
        let l = next(r)?;
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                let fmt = tok.next().unwrap_or("");
                if fmt != "binary_little_endian" {
                    return Err(perr(format!("unsupported format '{fmt}', need binary_little_endian")));
                }
                format_seen = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                if let (Some((c, s)), None) = (other.take(), vertex.as_ref()) {
                    skip_before += c * s;
                }
                let name = tok.next().ok_or_else(|| perr("element without name"))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| perr(format!("bad count for element '{name}'")))?;
                if name == "vertex" {
                    vertex = Some((count, Vec::new()));
                } else {
                    other = Some((count, 0));
                }
                current = Some(name.to_string());
            }
            Some("property") => {
                let ty = tok.next().ok_or_else(|| perr("property without type"))?;
                if ty == "list" {
                    if current.as_deref() == Some("vertex") {
                        return Err(perr("list properties on vertex are not supported"));
                    }
                    if vertex.is_none() {
                        return Err(perr("list-typed element before vertex cannot be skipped"));
                    }
                    continue;
                }
                let scalar = Scalar::parse(ty).ok_or_else(|| perr(format!("unknown type '{ty}'")))?;
                let name = tok.next().ok_or_else(|| perr("property without name"))?;
                match (current.as_deref(), vertex.as_mut(), other.as_mut()) {
                    (Some("vertex"), Some((_, props)), _) => {
                        let offset = props.iter().map(|p| p.ty.size()).sum();
                        props.push(Property {
                            name: name.to_string(),
                            ty: scalar,
                            offset,
                        });
                    }
                    (Some(_), _, Some((_, stride))) => *stride += scalar.size(),
                    _ => return Err(perr("property outside an element")),
                }
            }
            Some("end_header") => break,
            Some(other_kw) => return Err(perr(format!("unexpected header keyword '{other_kw}'"))),
        }
    }
    if !format_seen {
        return Err(perr("missing format line"));
    }
    if let (Some((c, s)), None) = (other.take(), vertex.as_ref()) {
        skip_before += c * s;
    }
    let (count, props) = vertex.ok_or_else(|| perr("no 'vertex' element"))?;
    let stride = props.iter().map(|p| p.ty.size()).sum();
    Ok(Header {
        count,
        stride,
        props,
        skip_before,
    })
}

/// Reads a 3DGS PLY from any reader.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<GaussianCloud> {
    let header = read_header(&mut r)?;
    let find = |name: &str| -> Result<&Property> {
        header
            .props
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| perr(format!("missing property '{name}'")))
    };
    let rest_count = header.props.iter().filter(|p| p.name.starts_with("f_rest_")).count();
    let degree: u8 = match rest_count {
        0 => 0,
        9 => 1,
        24 => 2,
        45 => 3,
        n => return Err(perr(format!("{n} f_rest properties do not match any SH degree"))),
    };

    let mut pos = Vec::with_capacity(3);
    for n in ["x", "y", "z"] {
        pos.push(find(n)?);
    }
    let mut dc = Vec::with_capacity(3);
    for c in 0..3 {
        dc.push(find(&format!("f_dc_{c}"))?);
    }
    let mut rest = Vec::with_capacity(rest_count);
    for i in 0..rest_count {
        rest.push(find(&format!("f_rest_{i}"))?);
    }
    let opacity = find("opacity")?;
    let mut scale = Vec::with_capacity(3);
    for i in 0..3 {
        scale.push(find(&format!("scale_{i}"))?);
    }
    let mut rot = Vec::with_capacity(4);
    for i in 0..4 {
        rot.push(find(&format!("rot_{i}"))?);
    }

    if header.count == 0 {
        return Err(Error::EmptyScene);
    }

    if header.skip_before > 0 {
        std::io::copy(&mut (&mut r).take(header.skip_before as u64), &mut std::io::sink())
            .map_err(|e| perr(format!("skipping leading elements: {e}")))?;
    }

    let k_per_channel = (degree as usize + 1).pow(2);
    let rest_per_channel = k_per_channel - 1;
    let mut cloud = GaussianCloud::new(degree);
    let mut row = vec![0u8; header.stride];
    let mut sh = vec![0f32; 3 * k_per_channel];
    for i in 0..header.count {
        let got = fill(&mut r, &mut row).map_err(|e| perr(format!("reading vertex {i}: {e}")))?;
        if got < header.stride {
            let missing = header
                .props
                .iter()
                .find(|p| p.offset + p.ty.size() > got)
                .map(|p| p.name.as_str())
                .unwrap_or("?");
            return Err(perr(format!(
                "truncated payload: vertex {i} of {} ends before property '{missing}'",
                header.count
            )));
        }
        let get = |p: &Property| p.ty.read(&row[p.offset..p.offset + p.ty.size()]);
        let position = [get(pos[0]), get(pos[1]), get(pos[2])];
        for c in 0..3 {
            sh[c] = get(dc[c]);
            for j in 0..rest_per_channel {
                // f_rest is channel-major: all coefficients of R, then G, then B
                sh[3 * (j + 1) + c] = get(rest[c * rest_per_channel + j]);
            }
        }
        cloud.push_raw(
            position,
            &sh,
            get(opacity),
            [get(scale[0]), get(scale[1]), get(scale[2])],
            [get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3])],
        );
    }
    cloud.validate()?;
    Ok(cloud)
}

/// Reads until `buf` is full or the stream ends; returns bytes read.
fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    read_ply(super::open(path)?).map_err(|e| match e {
        Error::Parse { what, message } => Error::Parse {
            what: format!("{what} {}", path.display()),
            message,
        },
        other => other,
    })
}

fn property_names(degree: u8) -> Vec<String> {
    let rest = 3 * ((degree as usize + 1).pow(2) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Writes the cloud with zero normals, the layout 3DGS viewers expect.
pub fn write_ply<W: Write>(cloud: &GaussianCloud, mut w: W) -> std::io::Result<()> {
    let names = property_names(cloud.sh_degree());
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for n in &names {
        writeln!(w, "property float {n}")?;
    }
    writeln!(w, "end_header")?;
    let k = cloud.sh_coeffs_per_channel();
    let mut row: Vec<f32> = Vec::with_capacity(names.len());
    for i in 0..cloud.len() {
        row.clear();
        row.extend_from_slice(&cloud.raw_position(i));
        row.extend_from_slice(&[0.0; 3]);
        let sh = cloud.sh(i);
        row.extend_from_slice(&sh[..3]);
        for c in 0..3 {
            for j in 1..k {
                row.push(sh[3 * j + c]);
            }
        }
        row.push(cloud.raw_opacity(i));
        row.extend_from_slice(&cloud.raw_scale(i));
        row.extend_from_slice(&cloud.raw_rotation(i));
        for v in &row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let w = super::create(path)?;
    write_ply(cloud, w).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;
    use proptest::prelude::*;

    fn header_only(props: &[&str], count: usize) -> Vec<u8> {
        let mut s = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
        for p in props {
            s.push_str(&format!("property float {p}\n"));
        }
        s.push_str("end_header\n");
        s.into_bytes()
    }

    const MIN_PROPS: [&str; 14] = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
        "rot_0", "rot_1", "rot_2", "rot_3",
    ];

    fn one_vertex(values: [f32; 14]) -> Vec<u8> {
        let mut b = header_only(&MIN_PROPS, 1);
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn raw_opacity_zero_activates_to_half() {
        let b = one_vertex([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let cloud = read_ply(&b[..]).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.opacity(0), 0.5);
        assert_eq!(cloud.scale(0).to_array(), [1.0, 1.0, 1.0]);
        assert_eq!(cloud.sh_degree(), 0);
    }

    #[test]
    fn quaternion_is_normalized_on_access() {
        let b = one_vertex([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
        let cloud = read_ply(&b[..]).unwrap();
        let q = cloud.rotation(0);
        assert!((q.length() - 1.0).abs() < 1e-12);
        assert!((q.w - 0.5f64.sqrt()).abs() < 1e-12 && (q.y - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn missing_property_is_named() {
        let mut props = MIN_PROPS.to_vec();
        props.retain(|p| *p != "scale_1");
        let mut b = header_only(&props, 1);
        b.extend(std::iter::repeat_n(0u8, 4 * props.len()));
        let err = read_ply(&b[..]).unwrap_err().to_string();
        assert!(err.contains("scale_1"), "{err}");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut b = one_vertex([0.0; 14]);
        b.truncate(b.len() - 3);
        let err = read_ply(&b[..]).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("vertex 0"), "{err}");
    }

    #[test]
    fn zero_gaussians_is_empty_scene() {
        let b = header_only(&MIN_PROPS, 0);
        assert!(matches!(read_ply(&b[..]), Err(Error::EmptyScene)));
    }

    #[test]
    fn ascii_format_is_rejected() {
        let b = b"ply\nformat ascii 1.0\nelement vertex 1\nend_header\n";
        assert!(read_ply(&b[..]).unwrap_err().to_string().contains("binary_little_endian"));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let b = one_vertex([f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(read_ply(&b[..]).unwrap_err().to_string().contains("non-finite"));
    }

    #[test]
    fn extra_properties_and_leading_elements_are_skipped() {
        let mut s = String::from("ply\nformat binary_little_endian 1.0\ncomment made by hand\n");
        s.push_str("element camera 1\nproperty double fov\n");
        s.push_str("element vertex 1\nproperty uchar red\n");
        for p in MIN_PROPS {
            s.push_str(&format!("property float {p}\n"));
        }
        s.push_str("end_header\n");
        let mut b = s.into_bytes();
        b.extend_from_slice(&1.5f64.to_le_bytes());
        b.push(200);
        let vals = [1.0f32, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = read_ply(&b[..]).unwrap();
        assert_eq!(cloud.raw_position(0), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn degree_one_rest_layout_is_channel_major() {
        let mut cloud = GaussianCloud::new(1);
        let mut g = Gaussian::isotropic([0.0; 3], 0.1, 0.5, [0.5; 3]);
        g.sh = vec![[0.0; 3], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        cloud.push(&g);
        let mut bytes = Vec::new();
        write_ply(&cloud, &mut bytes).unwrap();
        let text_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let floats: Vec<f32> = bytes[text_end..]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        // x y z nx ny nz dc0 dc1 dc2, then R coefficients 1..3
        assert_eq!(&floats[9..12], &[1.0, 4.0, 7.0]);
        assert_eq!(read_ply(&bytes[..]).unwrap(), cloud);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_then_load_is_bit_exact(seed in any::<u64>(), degree in 0u8..=3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut cloud = GaussianCloud::new(degree);
            let k = (degree as usize + 1).pow(2);
            for _ in 0..100 {
                let sh: Vec<f32> = (0..3 * k).map(|_| rng.random_range(-2.0..2.0)).collect();
                cloud.push_raw(
                    [rng.random(), rng.random(), rng.random()],
                    &sh,
                    rng.random_range(-5.0..5.0),
                    [rng.random_range(-6.0..0.0), rng.random_range(-6.0..0.0), rng.random_range(-6.0..0.0)],
                    [rng.random_range(0.1..1.0), rng.random(), rng.random(), rng.random()],
                );
            }
            let mut bytes = Vec::new();
            write_ply(&cloud, &mut bytes).unwrap();
            let back = read_ply(&bytes[..]).unwrap();
            prop_assert_eq!(&back, &cloud);
            let mut again = Vec::new();
            write_ply(&back, &mut again).unwrap();
            prop_assert_eq!(again, bytes);
        }
    }
}
