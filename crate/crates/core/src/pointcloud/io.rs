//! XYZ and ASCII PLY readers/writers.
//!
//! Writers use Rust's shortest round-trip float formatting, so every written
//! coordinate parses back to the identical `f64`.

use super::PointCloud;
use crate::geom::Vec3;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read(path)
        .map_err(|e| Error::io(path, e))
        .and_then(|bytes| {
            String::from_utf8(bytes).map_err(|_| Error::Format {
                path: path.into(),
                msg: "file is not valid UTF-8 text (binary data?)".into(),
            })
        })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One point per line, at least three whitespace-separated numbers; extra
/// columns are ignored. Blank lines and `#` comments are skipped.
pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    load_xyz_normals(path).map(|(c, _)| c)
}

/// Like [`load_xyz`], also returning columns 4..6 as normals when every row
/// has them.
pub fn load_xyz_normals(path: impl AsRef<Path>) -> Result<(PointCloud, Option<Vec<Vec3>>)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut points = Vec::new();
    let mut normals = Some(Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut p = [0.0; 3];
        for (k, c) in p.iter_mut().enumerate() {
            let tok = fields.next().ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("expected 3 coordinates, found {k}"),
            })?;
            *c = parse_f64(tok).ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("not a number: {tok:?}"),
            })?;
        }
        points.push(p);
        if let Some(ns) = normals.as_mut() {
            let n: Vec<f64> = fields.take(3).filter_map(parse_f64).collect();
            match n.as_slice() {
                [a, b, c] => ns.push([*a, *b, *c]),
                _ => normals = None,
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Empty(format!("{}: no points parsed", path.display())));
    }
    Ok((PointCloud::new(points)?, normals))
}

/// Six columns per line: position then normal.
pub fn save_xyz_normals(points: &[Vec3], normals: &[Vec3], path: impl AsRef<Path>) -> Result<()> {
    if points.len() != normals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} normals",
            points.len(),
            normals.len()
        )));
    }
    let mut out = String::with_capacity(points.len() * 128);
    for (p, n) in points.iter().zip(normals) {
        let _ = writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]);
    }
    write_text(path.as_ref(), &out)
}

pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 64);
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    write_text(path.as_ref(), &out)
}

pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 64 + 128);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    write_text(path.as_ref(), &out)
}

/// Vertex positions read from a PLY file.
pub fn load_ply_ascii(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let data = parse_ply_ascii(path, &read_text(path)?)?;
    if data.vertices.is_empty() {
        return Err(Error::Empty(format!("{}: no vertices", path.display())));
    }
    PointCloud::new(data.vertices)
}

/// Loads `.xyz`, `.txt` or `.ply` by extension.
pub fn load_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("xyz" | "txt" | "pts") => load_xyz(path),
        Some("ply") => load_ply_ascii(path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unknown point cloud extension (expected .xyz or .ply)",
            path.display()
        ))),
    }
}

/// Saves `.xyz`, `.txt` or `.ply` by extension.
pub fn save_points(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("xyz" | "txt" | "pts") => save_xyz(cloud, path),
        Some("ply") => save_ply(cloud, path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unknown point cloud extension (expected .xyz or .ply)",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

/// Geometry pulled out of an ASCII PLY: vertex positions and, when a `face`
/// element is present, its polygons.
#[derive(Debug, Clone, Default)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<Vec<usize>>,
}

#[derive(Debug)]
enum Property {
    Scalar(String),
    List,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_f64(tok: &str) -> Option<f64> {
    tok.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_ply_ascii(path: &Path, text: &str) -> Result<PlyData> {
    let fmt_err = |msg: String| Error::Format {
        path: path.into(),
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(fmt_err("missing 'ply' magic".into())),
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                match toks.get(1).copied() {
                    Some("ascii") => {}
                    Some(f) if f.starts_with("binary") => {
                        return Err(fmt_err(format!("binary PLY ({f}) is not supported")))
                    }
                    other => return Err(fmt_err(format!("unknown PLY format {other:?}"))),
                }
                format_seen = true;
            }
            Some("element") => {
                let (name, count) = match (toks.get(1), toks.get(2).and_then(|c| c.parse().ok())) {
                    (Some(n), Some(c)) => (n.to_string(), c),
                    _ => {
                        return Err(Error::Parse {
                            path: path.into(),
                            line: i + 1,
                            msg: "malformed element line".into(),
                        })
                    }
                };
                elements.push(Element {
                    name,
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: "property before any element".into(),
                })?;
                let prop = if toks.get(1) == Some(&"list") {
                    Property::List
                } else {
                    Property::Scalar(toks.get(2).unwrap_or(&"").to_string())
                };
                el.props.push(prop);
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("unexpected header keyword {other:?}"),
                })
            }
        }
    }
    if !format_seen || !header_done {
        return Err(fmt_err("incomplete PLY header".into()));
    }

    let mut data = PlyData::default();
    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let xyz = if is_vertex {
            let find = |axis: &str| {
                el.props
                    .iter()
                    .position(|p| matches!(p, Property::Scalar(n) if n == axis))
                    .ok_or_else(|| fmt_err(format!("vertex element lacks property '{axis}'")))
            };
            if el.props.iter().any(|p| matches!(p, Property::List)) {
                return Err(fmt_err("list properties on vertices are not supported".into()));
            }
            Some([find("x")?, find("y")?, find("z")?])
        } else {
            None
        };
        for _ in 0..el.count {
            let (i, line) = body
                .next()
                .ok_or_else(|| fmt_err(format!("truncated '{}' element data", el.name)))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |msg: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg,
            };
            if let Some(idx) = xyz {
                if toks.len() < el.props.len() {
                    return Err(parse_err(format!(
                        "expected {} vertex values, found {}",
                        el.props.len(),
                        toks.len()
                    )));
                }
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = parse_f64(toks[idx[k]])
                        .ok_or_else(|| parse_err(format!("not a number: {:?}", toks[idx[k]])))?;
                }
                data.vertices.push(p);
            } else if is_face {
                let n: usize = toks
                    .first()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err("malformed face record".into()))?;
                if toks.len() < n + 1 {
                    return Err(parse_err("face record shorter than its count".into()));
                }
                let face = toks[1..=n]
                    .iter()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| parse_err("bad face index".into()))?;
                data.faces.push(face);
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn xyz_two_points() {
        let f = write_tmp("0 0 0\n1 2 3\n");
        let c = load_xyz(f.path()).unwrap();
        assert_eq!(c.points, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn xyz_comments_and_extra_columns() {
        let f = write_tmp("# header\n\n0 0 0 0.1 0.2 0.3\n");
        assert_eq!(load_xyz(f.path()).unwrap().len(), 1);
    }

    #[test]
    fn xyz_short_line_reports_line_number() {
        let f = write_tmp("1 2\n");
        match load_xyz(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("0 0 0\n1 x 2\n");
        assert!(matches!(load_xyz(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn xyz_without_points_fails() {
        let f = write_tmp("# nothing\n\n");
        assert!(matches!(load_xyz(f.path()), Err(Error::Empty(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_xyz("/nonexistent/cloud.xyz"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ply_single_vertex() {
        let f = write_tmp(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
        );
        assert_eq!(load_ply_ascii(f.path()).unwrap().points, vec![[0.0; 3]]);
    }

    #[test]
    fn ply_missing_z_is_schema_error() {
        let f = write_tmp(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
        );
        assert!(matches!(load_ply_ascii(f.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn ply_binary_rejected() {
        let f = write_tmp(
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        );
        let err = load_ply_ascii(f.path()).unwrap_err();
        assert!(err.to_string().contains("binary"), "{err}");
    }

    #[test]
    fn ply_skips_other_properties_and_faces() {
        let f = write_tmp(
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty uchar red\nproperty float z\nproperty float x\nproperty float y\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n255 3 1 2\n0 6 4 5\n3 0 1 1\n",
        );
        let c = load_ply_ascii(f.path()).unwrap();
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn xyz_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.xyz");
        let pts = vec![[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]];
        let nrm = vec![[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]];
        save_xyz_normals(&pts, &nrm, &p).unwrap();
        let (c, n) = load_xyz_normals(&p).unwrap();
        assert_eq!(c.points, pts);
        assert_eq!(n.unwrap(), nrm);
        assert_eq!(load_xyz(&p).unwrap().points, pts);
        std::fs::write(&p, "0 0 0 1 0 0\n1 1 1\n").unwrap();
        assert!(load_xyz_normals(&p).unwrap().1.is_none());
        assert!(save_xyz_normals(&pts, &nrm[..1], &p).is_err());
    }

    #[test]
    fn dispatch_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3], [-1.0, 2.5, 1e-9]]).unwrap();
        for name in ["a.xyz", "a.XYZ", "a.txt", "a.ply"] {
            let p = dir.path().join(name);
            save_points(&cloud, &p).unwrap();
            assert_eq!(load_points(&p).unwrap().points, cloud.points);
        }
        assert!(save_points(&cloud, dir.path().join("a.obj")).is_err());
        assert!(load_points(dir.path().join("a")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn xyz_round_trip(points in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..200)) {
            let cloud = PointCloud::new(points).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            save_xyz(&cloud, f.path()).unwrap();
            let back = load_xyz(f.path()).unwrap();
            prop_assert_eq!(back.len(), cloud.len());
            for (a, b) in cloud.points.iter().zip(&back.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-6);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn ply_round_trip_1024(points in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1024)) {
            let cloud = PointCloud::new(points).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            save_ply(&cloud, f.path()).unwrap();
            prop_assert_eq!(load_ply_ascii(f.path()).unwrap().points, cloud.points);
        }
    }
}
