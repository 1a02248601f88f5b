//! Labeled-polygon sources: GeoJSON feature collections and ESRI shapefiles,
//! each carrying a per-feature class attribute naming water or ice.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::rasterize::{IceClass, LabeledPolygon};

/// Attribute names probed, in order, for the feature class.
const CLASS_KEYS: [&str; 3] = ["class", "label", "ice"];

fn parse_class(value: &Value, source: &str) -> Result<IceClass> {
    match value {
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "water" | "0" => Ok(IceClass::Water),
            "ice" | "sea_ice" | "seaice" | "1" => Ok(IceClass::Ice),
            other => Err(Error::UnknownLabelClass {
                value: other.to_string(),
                context: source.to_string(),
            }),
        },
        Value::Number(n) => match n.as_i64() {
            Some(0) => Ok(IceClass::Water),
            Some(1) => Ok(IceClass::Ice),
            _ => Err(Error::UnknownLabelClass {
                value: n.to_string(),
                context: source.to_string(),
            }),
        },
        other => Err(Error::UnknownLabelClass {
            value: other.to_string(),
            context: source.to_string(),
        }),
    }
}

fn ring_from_json(ring: &Value, source: &str) -> Result<Vec<(f64, f64)>> {
    let arr = ring.as_array().ok_or_else(|| Error::RasterFormat {
        path: source.into(),
        detail: "polygon ring is not an array".into(),
    })?;
    let mut out = Vec::with_capacity(arr.len());
    for pt in arr {
        let xy = pt.as_array().ok_or_else(|| Error::RasterFormat {
            path: source.into(),
            detail: "ring coordinate is not an array".into(),
        })?;
        if xy.len() < 2 {
            return Err(Error::RasterFormat {
                path: source.into(),
                detail: "ring coordinate has fewer than two values".into(),
            });
        }
        out.push((
            xy[0].as_f64().unwrap_or(f64::NAN),
            xy[1].as_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(out)
}

/// Parse a GeoJSON FeatureCollection of Polygon/MultiPolygon features. The
/// class comes from the first of the `class`/`label`/`ice` properties found.
/// Coordinates must be in the target raster's map coordinate system.
pub fn read_geojson(path: &Path) -> Result<Vec<LabeledPolygon>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file_io(path, e))?;
    let doc: Value = serde_json::from_str(&text)?;
    let source = path.display().to_string();
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::RasterFormat {
            path: path.to_path_buf(),
            detail: "not a GeoJSON FeatureCollection".into(),
        })?;
    let mut polygons = Vec::new();
    for feature in features {
        let props = feature.get("properties").unwrap_or(&Value::Null);
        let class_value = CLASS_KEYS
            .iter()
            .find_map(|k| props.get(*k))
            .ok_or_else(|| Error::UnknownLabelClass {
                value: "<missing class property>".into(),
                context: source.clone(),
            })?;
        let class = parse_class(class_value, &source)?;
        let geometry = feature.get("geometry").unwrap_or(&Value::Null);
        let gtype = geometry.get("type").and_then(Value::as_str).unwrap_or("");
        let coords = geometry.get("coordinates").unwrap_or(&Value::Null);
        match gtype {
            "Polygon" => {
                let rings = coords
                    .as_array()
                    .map(|rs| rs.iter().map(|r| ring_from_json(r, &source)).collect())
                    .transpose()?
                    .unwrap_or_default();
                polygons.push(LabeledPolygon { class, rings });
            }
            "MultiPolygon" => {
                for poly in coords.as_array().into_iter().flatten() {
                    let rings = poly
                        .as_array()
                        .map(|rs| rs.iter().map(|r| ring_from_json(r, &source)).collect())
                        .transpose()?
                        .unwrap_or_default();
                    polygons.push(LabeledPolygon { class, rings });
                }
            }
            other => {
                return Err(Error::RasterFormat {
                    path: path.to_path_buf(),
                    detail: format!("unsupported geometry type {other:?}"),
                })
            }
        }
    }
    Ok(polygons)
}

/// Read polygons and their class attribute from a shapefile (.shp + .dbf).
pub fn read_shapefile(path: &Path) -> Result<Vec<LabeledPolygon>> {
    let source = path.display().to_string();
    let mut reader = shapefile::Reader::from_path(path).map_err(|e| Error::RasterFormat {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut polygons = Vec::new();
    for pair in reader.iter_shapes_and_records() {
        let (shape, record) = pair.map_err(|e| Error::RasterFormat {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let class_value = CLASS_KEYS
            .iter()
            .find_map(|k| record.get(k))
            .ok_or_else(|| Error::UnknownLabelClass {
                value: "<missing class field>".into(),
                context: source.clone(),
            })?;
        let class = match class_value {
            shapefile::dbase::FieldValue::Character(Some(s)) => {
                parse_class(&Value::String(s.clone()), &source)?
            }
            shapefile::dbase::FieldValue::Numeric(Some(n)) => {
                parse_class(&serde_json::json!(*n as i64), &source)?
            }
            shapefile::dbase::FieldValue::Integer(n) => {
                parse_class(&serde_json::json!(n), &source)?
            }
            other => {
                return Err(Error::UnknownLabelClass {
                    value: format!("{other:?}"),
                    context: source.clone(),
                })
            }
        };
        match shape {
            shapefile::Shape::Polygon(poly) => {
                // Shapefile polygons may hold several outer rings; treat each
                // ring as part of one even-odd region of this class.
                let rings: Vec<Vec<(f64, f64)>> = poly
                    .rings()
                    .iter()
                    .map(|ring| ring.points().iter().map(|p| (p.x, p.y)).collect())
                    .collect();
                polygons.push(LabeledPolygon { class, rings });
            }
            other => {
                return Err(Error::RasterFormat {
                    path: path.to_path_buf(),
                    detail: format!("unsupported shape type {}", other.shapetype()),
                })
            }
        }
    }
    Ok(polygons)
}
