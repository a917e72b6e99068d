//! Line-oriented text formats for poses, detections, calibration, maps and
//! ground truth.
//!
//! Every format ignores blank lines and anything after `#`. Numbers are
//! written with the shortest representation that reads back to the same
//! `f64`, so a write/read cycle is lossless and reruns are byte-identical.
//!
//! | file | one line |
//! |------|----------|
//! | poses | `frame t x y z qw qx qy qz` |
//! | detections | `frame camera_id u0 v0 u1 v1 u2 v2 u3 v3` |
//! | calibration pairs | `u v x y` |
//! | map | `marking_id corner_idx x y count` |
//! | ground truth | `marking_id corner_idx x y` |
//!
//! Camera calibrations are key-value blocks, one per camera:
//!
//! ```text
//! camera front
//! fx 800
//! fy 800
//! cx 640
//! cy 360
//! skew 0                  # optional
//! width 1280
//! height 720
//! translation 1.5 0 1.6   # optical center in the vehicle frame
//! rotation 0.5 -0.5 0.5 -0.5   # camera-to-vehicle, qw qx qy qz
//! homography h00 h01 ... h22   # optional, row-major; defaults to the model's
//! roi u0 v0 u1 v1 ...     # pixel region of interest polygon
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::association::MarkingId;
use crate::geometry::{CameraModel, GroundPoint, Intrinsics, MapPoint, PixelPoint, RigidTransform};
use crate::ipm::{homography_from_camera, Homography, PointPair, RegionOfInterest};
use crate::mapbuild::{CameraSetup, DetectionRecord, MapState, VehiclePoseRecord};
use crate::metrics::MarkingCorners;

/// Bumped whenever any format below changes shape.
pub const FORMAT_VERSION: u32 = 1;

/// Quaternion norm deviation accepted silently.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;
/// Quaternion norm deviation beyond which a file is rejected.
pub const QUATERNION_LIMIT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Content(String),
}

fn line_error(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Line {
        line,
        message: message.into(),
    }
}

/// Non-empty lines with comments stripped, paired with 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let body = raw.split('#').next().unwrap_or("");
        let fields: Vec<&str> = body.split_whitespace().collect();
        (!fields.is_empty()).then_some((i + 1, fields))
    })
}

fn number(line: usize, field: &str, what: &str) -> Result<f64, FormatError> {
    let v: f64 = field
        .parse()
        .map_err(|_| line_error(line, format!("{what}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(line_error(line, format!("{what}: '{field}' is not finite")));
    }
    Ok(v)
}

fn integer<T: std::str::FromStr>(line: usize, field: &str, what: &str) -> Result<T, FormatError> {
    field
        .parse()
        .map_err(|_| line_error(line, format!("{what}: '{field}' is not a non-negative integer")))
}

fn numbers(line: usize, fields: &[&str], what: &str) -> Result<Vec<f64>, FormatError> {
    fields.iter().map(|f| number(line, f, what)).collect()
}

fn expect_fields(line: usize, fields: &[&str], n: usize, layout: &str) -> Result<(), FormatError> {
    if fields.len() != n {
        return Err(line_error(
            line,
            format!("expected {n} fields ({layout}), found {}", fields.len()),
        ));
    }
    Ok(())
}

/// Unit quaternion from `[w, x, y, z]`, renormalized when its norm is off by
/// at most [`QUATERNION_LIMIT`].
pub fn unit_quaternion(q: [f64; 4]) -> Result<UnitQuaternion<f64>, String> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let deviation = (raw.norm() - 1.0).abs();
    if deviation > QUATERNION_LIMIT {
        return Err(format!("quaternion norm off by {deviation:.3e}"));
    }
    if deviation > QUATERNION_TOLERANCE {
        warn!("renormalizing quaternion with norm error {deviation:.3e}");
    }
    Ok(UnitQuaternion::from_quaternion(raw))
}

fn quaternion_fields(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn push_fields(out: &mut String, fields: &[f64]) {
    for v in fields {
        write!(out, " {v}").unwrap();
    }
}

pub fn parse_poses(text: &str) -> Result<Vec<VehiclePoseRecord>, FormatError> {
    let mut out: Vec<VehiclePoseRecord> = Vec::new();
    for (line, f) in records(text) {
        expect_fields(line, &f, 9, "frame t x y z qw qx qy qz")?;
        let frame: u64 = integer(line, f[0], "frame")?;
        if let Some(prev) = out.last() {
            if frame <= prev.frame {
                return Err(line_error(
                    line,
                    format!("frame {frame} does not follow frame {}", prev.frame),
                ));
            }
        }
        let v = numbers(line, &f[1..], "pose")?;
        let q = unit_quaternion([v[4], v[5], v[6], v[7]]).map_err(|m| line_error(line, m))?;
        out.push(VehiclePoseRecord {
            frame,
            timestamp: v[0],
            pose: RigidTransform::from_quaternion(q, Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

pub fn write_poses(poses: &[VehiclePoseRecord]) -> String {
    let mut out = String::from("# frame t x y z qw qx qy qz\n");
    for p in poses {
        let t = &p.pose.translation;
        write!(out, "{}", p.frame).unwrap();
        push_fields(&mut out, &[p.timestamp, t.x, t.y, t.z]);
        push_fields(&mut out, &quaternion_fields(&p.pose.quaternion()));
        out.push('\n');
    }
    out
}

/// Detection records. A record may carry any even number of coordinates so
/// the pipeline can count (and skip) detections with the wrong corner count.
pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>, FormatError> {
    let mut out = Vec::new();
    for (line, f) in records(text) {
        if f.len() < 2 {
            return Err(line_error(line, "expected 'frame camera_id u0 v0 ...'"));
        }
        let frame = integer(line, f[0], "frame")?;
        let coords = numbers(line, &f[2..], "pixel")?;
        if coords.len() % 2 != 0 {
            return Err(line_error(line, "odd number of pixel coordinates"));
        }
        out.push(DetectionRecord {
            frame,
            camera_id: f[1].to_string(),
            pixels: coords.chunks(2).map(|c| PixelPoint::new(c[0], c[1])).collect(),
        });
    }
    Ok(out)
}

pub fn write_detections(detections: &[DetectionRecord]) -> String {
    let mut out = String::from("# frame camera_id u0 v0 u1 v1 u2 v2 u3 v3\n");
    for d in detections {
        write!(out, "{} {}", d.frame, d.camera_id).unwrap();
        for p in &d.pixels {
            push_fields(&mut out, &[p.u, p.v]);
        }
        out.push('\n');
    }
    out
}

pub fn parse_pairs(text: &str) -> Result<Vec<PointPair>, FormatError> {
    records(text)
        .map(|(line, f)| {
            expect_fields(line, &f, 4, "u v x y")?;
            let v = numbers(line, &f, "pair")?;
            Ok(PointPair::new(
                PixelPoint::new(v[0], v[1]),
                GroundPoint::new(v[2], v[3]),
            ))
        })
        .collect()
}

pub fn write_pairs(pairs: &[PointPair]) -> String {
    let mut out = String::from("# u v x y\n");
    for p in pairs {
        writeln!(out, "{} {} {} {}", p.pixel.u, p.pixel.v, p.ground.x, p.ground.y).unwrap();
    }
    out
}

#[derive(Default)]
struct CameraBlockFields {
    line: usize,
    values: BTreeMap<&'static str, (usize, Vec<f64>)>,
}

const CAMERA_KEYS: [&str; 11] = [
    "fx",
    "fy",
    "cx",
    "cy",
    "skew",
    "width",
    "height",
    "translation",
    "rotation",
    "homography",
    "roi",
];

impl CameraBlockFields {
    fn scalar(&self, key: &str) -> Result<Option<f64>, FormatError> {
        match self.values.get(key) {
            None => Ok(None),
            Some((_, v)) if v.len() == 1 => Ok(Some(v[0])),
            Some((line, _)) => Err(line_error(*line, format!("{key} takes one value"))),
        }
    }

    fn required(&self, key: &str) -> Result<&(usize, Vec<f64>), FormatError> {
        self.values
            .get(key)
            .ok_or_else(|| line_error(self.line, format!("camera block lacks '{key}'")))
    }

    fn required_scalar(&self, key: &str) -> Result<f64, FormatError> {
        self.required(key)?;
        Ok(self.scalar(key)?.expect("checked present"))
    }

    fn vector<const N: usize>(&self, key: &str) -> Result<(usize, [f64; N]), FormatError> {
        let (line, v) = self.required(key)?;
        let arr: [f64; N] = v
            .as_slice()
            .try_into()
            .map_err(|_| line_error(*line, format!("{key} takes {N} values")))?;
        Ok((*line, arr))
    }

    fn size(&self, key: &str) -> Result<u32, FormatError> {
        let v = self.required_scalar(key)?;
        if v < 1.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
            return Err(line_error(
                self.required(key)?.0,
                format!("{key} must be a positive integer"),
            ));
        }
        Ok(v as u32)
    }

    fn build(&self, id: &str) -> Result<CameraSetup, FormatError> {
        let skew = self.scalar("skew")?.unwrap_or(0.0);
        let mut intrinsics = Intrinsics::new(
            self.required_scalar("fx")?,
            self.required_scalar("fy")?,
            self.required_scalar("cx")?,
            self.required_scalar("cy")?,
        )
        .map_err(|e| line_error(self.line, e.to_string()))?;
        intrinsics.skew = skew;
        let (_, t) = self.vector::<3>("translation")?;
        let (qline, q) = self.vector::<4>("rotation")?;
        let q = unit_quaternion(q).map_err(|m| line_error(qline, m))?;
        // The file stores the camera pose in the vehicle frame; the model
        // keeps the inverse.
        let camera_to_vehicle = RigidTransform::from_quaternion(q, Vector3::from(t));
        let model = CameraModel::new(
            id,
            intrinsics,
            camera_to_vehicle.inverse(),
            self.size("width")?,
            self.size("height")?,
        );
        let (rline, roi) = self.required("roi")?;
        if roi.len() % 2 != 0 || roi.len() < 6 {
            return Err(line_error(*rline, "roi needs at least three u v vertices"));
        }
        let roi = RegionOfInterest::new(roi.chunks(2).map(|c| PixelPoint::new(c[0], c[1])).collect())
            .map_err(|e| line_error(*rline, e.to_string()))?;
        let homography = match self.values.get("homography") {
            Some(_) => {
                let (hline, h) = self.vector::<9>("homography")?;
                Homography::from_row_slice(&h).map_err(|e| line_error(hline, e.to_string()))?
            }
            None => homography_from_camera(&model).map_err(|e| line_error(self.line, e.to_string()))?,
        };
        Ok(CameraSetup {
            model: Some(model),
            homography,
            roi,
        })
    }
}

/// Camera calibration blocks keyed by camera id.
pub fn parse_calibration(text: &str) -> Result<BTreeMap<String, CameraSetup>, FormatError> {
    let mut blocks: Vec<(String, CameraBlockFields)> = Vec::new();
    for (line, f) in records(text) {
        if f[0] == "camera" {
            expect_fields(line, &f, 2, "camera <id>")?;
            if blocks.iter().any(|(id, _)| id == f[1]) {
                return Err(line_error(line, format!("camera '{}' defined twice", f[1])));
            }
            blocks.push((
                f[1].to_string(),
                CameraBlockFields {
                    line,
                    ..Default::default()
                },
            ));
            continue;
        }
        let Some((_, block)) = blocks.last_mut() else {
            return Err(line_error(line, "key outside a 'camera <id>' block"));
        };
        let Some(key) = CAMERA_KEYS.iter().find(|k| **k == f[0]) else {
            return Err(line_error(line, format!("unknown key '{}'", f[0])));
        };
        if block.values.contains_key(key) {
            return Err(line_error(line, format!("duplicate key '{key}'")));
        }
        let values = numbers(line, &f[1..], key)?;
        block.values.insert(key, (line, values));
    }
    if blocks.is_empty() {
        return Err(FormatError::Content("no camera blocks".into()));
    }
    blocks.iter().map(|(id, b)| Ok((id.clone(), b.build(id)?))).collect()
}

pub fn write_calibration(setups: &BTreeMap<String, CameraSetup>) -> String {
    let mut out = String::from(
        "# camera calibration blocks; translation and rotation give the camera pose in the vehicle frame\n",
    );
    for (id, setup) in setups {
        writeln!(out, "camera {id}").unwrap();
        if let Some(m) = &setup.model {
            let k = &m.intrinsics;
            let pose = m.extrinsic.inverse();
            for (key, v) in [("fx", k.fx), ("fy", k.fy), ("cx", k.cx), ("cy", k.cy), ("skew", k.skew)] {
                writeln!(out, "{key} {v}").unwrap();
            }
            writeln!(out, "width {}\nheight {}", m.width, m.height).unwrap();
            out.push_str("translation");
            push_fields(&mut out, pose.translation.as_slice());
            out.push_str("\nrotation");
            push_fields(&mut out, &quaternion_fields(&pose.quaternion()));
            out.push('\n');
        }
        out.push_str("homography");
        push_fields(&mut out, &setup.homography.to_row_array());
        out.push_str("\nroi");
        for p in setup.roi.vertices() {
            push_fields(&mut out, &[p.u, p.v]);
        }
        out.push('\n');
    }
    out
}

/// Row count and optional `(corner, count)` per corner index.
type MapRow = (usize, [Option<(MapPoint, u64)>; 4]);

/// Corners grouped by marking id; every marking needs corners 0..4 exactly
/// once. Returns the corners and, when `with_counts`, the per-corner counts.
fn parse_corner_table(text: &str, with_counts: bool) -> Result<Vec<(MarkingCorners, [u64; 4])>, FormatError> {
    let layout = if with_counts {
        "marking_id corner_idx x y count"
    } else {
        "marking_id corner_idx x y"
    };
    let mut table: BTreeMap<u32, MapRow> = BTreeMap::new();
    for (line, f) in records(text) {
        expect_fields(line, &f, if with_counts { 5 } else { 4 }, layout)?;
        let id: u32 = integer(line, f[0], "marking_id")?;
        let k: usize = integer(line, f[1], "corner_idx")?;
        if k > 3 {
            return Err(line_error(line, format!("corner_idx {k} out of range 0..=3")));
        }
        let v = numbers(line, &f[2..4], "coordinate")?;
        let count = if with_counts { integer(line, f[4], "count")? } else { 0 };
        let entry = table.entry(id).or_insert((line, [None; 4]));
        if entry.1[k].is_some() {
            return Err(line_error(line, format!("marking {id} corner {k} repeated")));
        }
        entry.1[k] = Some((MapPoint::ground(v[0], v[1]), count));
    }
    table
        .into_iter()
        .map(|(id, (line, corners))| {
            let mut pts = [MapPoint::default(); 4];
            let mut counts = [0; 4];
            for (k, c) in corners.iter().enumerate() {
                let (p, n) = c.ok_or_else(|| line_error(line, format!("marking {id} lacks corner {k}")))?;
                pts[k] = p;
                counts[k] = n;
            }
            Ok(((MarkingId(id), pts), counts))
        })
        .collect()
}

fn write_corner_table<'a>(
    header: &str,
    rows: impl Iterator<Item = (MarkingId, &'a [MapPoint; 4], Option<[u64; 4]>)>,
) -> String {
    let mut out = String::from(header);
    for (id, corners, counts) in rows {
        for (k, c) in corners.iter().enumerate() {
            write!(out, "{} {k} {} {}", id.0, c.x, c.y).unwrap();
            if let Some(n) = counts {
                write!(out, " {}", n[k]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// A map file: corners and per-corner observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub markings: Vec<MarkingCorners>,
    pub counts: Vec<[u64; 4]>,
}

pub fn parse_map(text: &str) -> Result<MapFile, FormatError> {
    let (markings, counts) = parse_corner_table(text, true)?.into_iter().unzip();
    Ok(MapFile { markings, counts })
}

pub fn write_map(map: &MapState) -> String {
    write_corner_table(
        "# marking_id corner_idx x y count\n",
        map.markings()
            .map(|m| (m.id, &m.corners, Some(m.accumulators.map(|a| a.count)))),
    )
}

pub fn parse_truth(text: &str) -> Result<Vec<MarkingCorners>, FormatError> {
    Ok(parse_corner_table(text, false)?.into_iter().map(|(m, _)| m).collect())
}

pub fn write_truth(markings: &[MarkingCorners]) -> String {
    write_corner_table(
        "# marking_id corner_idx x y\n",
        markings.iter().map(|(id, c)| (*id, c, None)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_log;
    use crate::mapbuild::AssociationConfig;
    use crate::mapbuild::PoseLog;

    fn camera_setup() -> CameraSetup {
        let k = Intrinsics::new(800.0, 810.0, 640.0, 360.0).unwrap();
        let ext = CameraModel::mounted(Vector3::new(1.5, 0.1, 1.6), 0.05, 0.45);
        let model = CameraModel::new("front", k, ext, 1280, 720);
        let roi = RegionOfInterest::new(vec![
            PixelPoint::new(100.0, 400.0),
            PixelPoint::new(1180.0, 400.0),
            PixelPoint::new(1180.0, 700.0),
            PixelPoint::new(100.0, 700.0),
        ])
        .unwrap();
        CameraSetup::from_model(model, roi).unwrap()
    }

    #[test]
    fn poses_round_trip_exactly() {
        let poses: Vec<_> = (0..5)
            .map(|i| VehiclePoseRecord {
                frame: 3 * i,
                timestamp: 0.1 * i as f64,
                pose: RigidTransform::planar(1.0 / 3.0 * i as f64, -2.5, 0.7 * i as f64),
            })
            .collect();
        let text = write_poses(&poses);
        let back = parse_poses(&text).unwrap();
        assert_eq!(write_poses(&back), text);
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.frame, b.frame);
            assert_eq!(a.timestamp, b.timestamp);
            assert!((a.pose.translation - b.pose.translation).norm() == 0.0);
            assert!(so3_log(&(a.pose.rotation * b.pose.rotation.inverse())).norm() < 1e-15);
        }
    }

    #[test]
    fn pose_quaternion_tolerances() {
        let line = |s: f64| format!("0 0 0 0 0 {s} 0 0 0\n");
        assert!(parse_poses(&line(1.0 + 5e-7)).is_ok());
        let renorm = parse_poses(&line(1.0 + 5e-4)).unwrap();
        assert!((renorm[0].pose.quaternion().norm() - 1.0).abs() < 1e-15);
        let err = parse_poses(&format!("# header\n\n{}", line(1.01))).unwrap_err();
        assert!(matches!(err, FormatError::Line { line: 3, .. }), "{err}");
    }

    #[test]
    fn pose_errors_carry_line_numbers() {
        let text = "0 0 0 0 0 1 0 0 0\n# c\n0 0.1 0 0 0 1 0 0 0\n";
        assert!(matches!(parse_poses(text), Err(FormatError::Line { line: 3, .. })));
        assert!(matches!(
            parse_poses("0 0 0 0 1 0 0 0"),
            Err(FormatError::Line { line: 1, .. })
        ));
        assert!(matches!(
            parse_poses("x 0 0 0 0 1 0 0 0"),
            Err(FormatError::Line { line: 1, .. })
        ));
        assert!(matches!(
            parse_poses("\n0 0 nan 0 0 1 0 0 0"),
            Err(FormatError::Line { line: 2, .. })
        ));
        // Parsed poses satisfy the pose log's ordering rule.
        let ok = parse_poses("1 0 0 0 0 1 0 0 0\n4 0 0 0 0 1 0 0 0 # trailing\n").unwrap();
        assert!(PoseLog::new(ok).is_ok());
    }

    #[test]
    fn detections_round_trip_and_reject_odd_coordinates() {
        let dets = vec![
            DetectionRecord {
                frame: 2,
                camera_id: "rear".into(),
                pixels: vec![
                    PixelPoint::new(1.5, 2.25),
                    PixelPoint::new(3.0, 4.0),
                    PixelPoint::new(5.0, 6.0),
                    PixelPoint::new(7.0, 8.125),
                ],
            },
            DetectionRecord {
                frame: 3,
                camera_id: "front".into(),
                pixels: vec![
                    PixelPoint::new(0.1, 0.2),
                    PixelPoint::new(0.3, 0.4),
                    PixelPoint::new(0.5, 0.6),
                ],
            },
        ];
        let text = write_detections(&dets);
        assert_eq!(parse_detections(&text).unwrap(), dets);
        let err = parse_detections("1 front 1 2 3\n").unwrap_err();
        assert!(matches!(err, FormatError::Line { line: 1, .. }));
    }

    #[test]
    fn pairs_round_trip() {
        let pairs = vec![
            PointPair::new(PixelPoint::new(1.0, 2.0), GroundPoint::new(3.0, -4.0)),
            PointPair::new(PixelPoint::new(0.1, 1e-7), GroundPoint::new(1.0 / 3.0, 5.0)),
        ];
        let text = write_pairs(&pairs);
        assert!(text.lines().skip(1).all(|l| !l.starts_with(' ')));
        assert_eq!(parse_pairs(&text).unwrap(), pairs);
        assert!(matches!(parse_pairs("1 2 3"), Err(FormatError::Line { line: 1, .. })));
    }

    #[test]
    fn calibration_round_trip() {
        let setups = BTreeMap::from([("front".to_string(), camera_setup())]);
        let text = write_calibration(&setups);
        let back = parse_calibration(&text).unwrap();
        let (a, b) = (&setups["front"], &back["front"]);
        let (ma, mb) = (a.model.as_ref().unwrap(), b.model.as_ref().unwrap());
        assert_eq!(ma.intrinsics, mb.intrinsics);
        assert_eq!((ma.width, ma.height), (mb.width, mb.height));
        assert!((ma.extrinsic.translation - mb.extrinsic.translation).norm() < 1e-14);
        assert!(so3_log(&(ma.extrinsic.rotation * mb.extrinsic.rotation.inverse())).norm() < 1e-14);
        assert_eq!(a.homography, b.homography);
        assert_eq!(a.roi, b.roi);
    }

    #[test]
    fn calibration_without_homography_composes_it() {
        let setups = BTreeMap::from([("front".to_string(), camera_setup())]);
        let text: String = write_calibration(&setups)
            .lines()
            .filter(|l| !l.starts_with("homography"))
            .map(|l| format!("{l}\n"))
            .collect();
        let back = parse_calibration(&text).unwrap();
        assert!(back["front"].homography.relative_error(&setups["front"].homography) < 1e-12);
    }

    #[test]
    fn calibration_errors() {
        let good = write_calibration(&BTreeMap::from([("front".to_string(), camera_setup())]));
        assert!(matches!(
            parse_calibration("fx 1\n"),
            Err(FormatError::Line { line: 1, .. })
        ));
        assert!(parse_calibration("# nothing\n").is_err());
        let missing: String = good
            .lines()
            .filter(|l| !l.starts_with("fy"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = parse_calibration(&missing).unwrap_err();
        assert!(err.to_string().contains("fy"), "{err}");
        let unknown = good.replace("skew", "shear");
        assert!(parse_calibration(&unknown).unwrap_err().to_string().contains("shear"));
        let dup = format!("{good}{}", good.lines().skip(1).collect::<Vec<_>>().join("\n"));
        assert!(parse_calibration(&dup).is_err());
    }

    #[test]
    fn map_and_truth_round_trip() {
        let poses = PoseLog::new(vec![VehiclePoseRecord {
            frame: 0,
            timestamp: 0.0,
            pose: RigidTransform::identity(),
        }])
        .unwrap();
        let mut map = MapState::new(poses, BTreeMap::new(), AssociationConfig::default());
        let corners = |x: f64| {
            [
                MapPoint::ground(x, -0.5),
                MapPoint::ground(x + 0.5, 0.0),
                MapPoint::ground(x, 0.5),
                MapPoint::ground(x - 0.5, 0.0),
            ]
        };
        map.insert_marking(MarkingId(4), corners(1.0 / 3.0), 3);
        map.insert_marking(MarkingId(9), corners(7.0), 1);
        let text = write_map(&map);
        let parsed = parse_map(&text).unwrap();
        assert_eq!(parsed.markings, crate::metrics::map_markings(&map));
        assert_eq!(parsed.counts, vec![[3; 4], [1; 4]]);

        let truth = crate::metrics::map_markings(&map);
        let t = write_truth(&truth);
        assert_eq!(parse_truth(&t).unwrap(), truth);
        // A map file is not a truth file.
        assert!(matches!(parse_truth(&text), Err(FormatError::Line { line: 2, .. })));
    }

    #[test]
    fn corner_table_errors() {
        assert!(matches!(
            parse_truth("0 4 1 1\n"),
            Err(FormatError::Line { line: 1, .. })
        ));
        assert!(matches!(
            parse_truth("0 0 1 1\n0 0 1 1\n"),
            Err(FormatError::Line { line: 2, .. })
        ));
        let err = parse_truth("0 0 1 1\n0 1 1 1\n0 2 1 1\n").unwrap_err();
        assert!(err.to_string().contains("lacks corner 3"), "{err}");
    }
}
