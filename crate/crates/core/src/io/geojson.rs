//! GeoJSON subset: a FeatureCollection of Polygon / MultiPolygon features.
//! Numeric properties become zone attributes; other properties are ignored.
//! All rings of a feature form one zone under the even-odd rule.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use super::{read_text, write_json, IoError};
use crate::raster::{Zone, ZoneSet};

fn ring(path: &Path, v: &Value) -> Result<Vec<(f64, f64)>, IoError> {
    let pts = v
        .as_array()
        .ok_or_else(|| IoError::format(path, "ring is not an array"))?;
    pts.iter()
        .map(|p| match p.as_array().map(|a| a.as_slice()) {
            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok((x, y)),
                _ => Err(IoError::format(path, "coordinate is not numeric")),
            },
            _ => Err(IoError::format(path, "position needs two numbers")),
        })
        .collect()
}

fn rings_of_polygon(path: &Path, v: &Value) -> Result<Vec<Vec<(f64, f64)>>, IoError> {
    v.as_array()
        .ok_or_else(|| IoError::format(path, "polygon coordinates are not an array"))?
        .iter()
        .map(|r| ring(path, r))
        .collect()
}

pub fn parse_zones(text: &str, path: &Path) -> Result<ZoneSet, IoError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(IoError::format(path, "expected a FeatureCollection"));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| IoError::format(path, "missing 'features' array"))?;
    let mut zones = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let geom = f
            .get("geometry")
            .ok_or_else(|| IoError::format(path, format!("feature {i} has no geometry")))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| IoError::format(path, format!("feature {i} has no coordinates")))?;
        let rings = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => rings_of_polygon(path, coords)?,
            Some("MultiPolygon") => {
                let mut all = Vec::new();
                for poly in coords
                    .as_array()
                    .ok_or_else(|| IoError::format(path, "multipolygon is not an array"))?
                {
                    all.extend(rings_of_polygon(path, poly)?);
                }
                all
            }
            other => {
                return Err(IoError::format(
                    path,
                    format!("feature {i}: unsupported geometry type {other:?}"),
                ))
            }
        };
        let attributes: BTreeMap<String, f64> = f
            .get("properties")
            .and_then(Value::as_object)
            .map(|props| {
                props
                    .iter()
                    .filter_map(|(k, v)| v.as_f64().map(|n| (k.clone(), n)))
                    .collect()
            })
            .unwrap_or_default();
        zones.push(Zone { rings, attributes });
    }
    ZoneSet::new(zones).map_err(|e| IoError::format(path, e))
}

pub fn read_zones(path: &Path) -> Result<ZoneSet, IoError> {
    parse_zones(&read_text(path)?, path)
}

pub fn to_value(zones: &ZoneSet) -> Value {
    let features: Vec<Value> = zones
        .zones()
        .iter()
        .map(|z| {
            let coords: Vec<Vec<[f64; 2]>> = z
                .rings
                .iter()
                .map(|r| r.iter().map(|&(x, y)| [x, y]).collect())
                .collect();
            json!({
                "type": "Feature",
                "properties": z.attributes,
                "geometry": {"type": "Polygon", "coordinates": coords},
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

pub fn write_zones(zones: &ZoneSet, path: &Path) -> Result<(), IoError> {
    write_json(path, &to_value(zones))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_multipolygon() {
        let square = vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)];
        let zs = ZoneSet::new(vec![Zone {
            rings: vec![square.clone()],
            attributes: BTreeMap::from([("POP".to_string(), 0.1 + 0.2)]),
        }])
        .unwrap();
        let text = serde_json::to_string(&to_value(&zs)).unwrap();
        assert_eq!(parse_zones(&text, Path::new("z")).unwrap(), zs);

        let multi = r#"{"type":"FeatureCollection","features":[{"type":"Feature",
            "properties":{"name":"a","v":2},
            "geometry":{"type":"MultiPolygon","coordinates":[
              [[[0,0],[1,0],[1,1],[0,0]]],
              [[[5,5],[6,5],[6,6],[5,5]]]]}}]}"#;
        let z = parse_zones(multi, Path::new("z")).unwrap();
        assert_eq!(z.zones()[0].rings.len(), 2);
        assert_eq!(z.attribute_names(), vec!["v".to_string()]);
    }

    #[test]
    fn rejects_other_geometries() {
        let t = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{},
            "geometry":{"type":"Point","coordinates":[0,0]}}]}"#;
        assert!(parse_zones(t, Path::new("z")).is_err());
    }
}
