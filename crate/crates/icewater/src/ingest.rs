//! Scene ingestion: co-registered channel rasters plus a label source become
//! an immutable `Scene`, with the validity mask derived and an ingest report
//! describing what was kept.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geotiff;
use crate::grid::Grid;
use crate::labels;
use crate::rasterize::{rasterize_labels, RasterizeReport};
use crate::scene::{Scene, NUM_CHANNELS};

/// Where a scene's labels come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum LabelSource {
    /// Pre-rasterized single-band GeoTIFF of {0, 1, 255}.
    Raster(PathBuf),
    /// GeoJSON FeatureCollection of classed polygons.
    GeoJson(PathBuf),
    /// ESRI shapefile of classed polygons.
    Shapefile(PathBuf),
}

impl LabelSource {
    /// Infer the source kind from a file extension.
    pub fn from_path(path: impl Into<PathBuf>) -> Result<LabelSource> {
        let path = path.into();
        match path.extension().and_then(|e| e.to_str()) {
            Some("tif") | Some("tiff") => Ok(LabelSource::Raster(path)),
            Some("json") | Some("geojson") => Ok(LabelSource::GeoJson(path)),
            Some("shp") => Ok(LabelSource::Shapefile(path)),
            _ => Err(Error::RasterFormat {
                path,
                detail: "unrecognized label source extension".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestReport {
    pub scene_id: String,
    pub month: u8,
    pub height: usize,
    pub width: usize,
    pub valid_fraction: f64,
    pub label_overlap_conflicts: u64,
}

/// Ingest one scene from 1 multi-band or `NUM_CHANNELS` single-band rasters
/// plus a label source on the same grid.
pub fn ingest_scene(
    channel_sources: &[PathBuf],
    label_source: &LabelSource,
    id: &str,
    month: u8,
) -> Result<(Scene, IngestReport)> {
    let (channels, geotransform) = read_channels(channel_sources)?;
    let (h, w) = channels[0].dims();

    let (label_grid, raster_report) = match label_source {
        LabelSource::Raster(path) => {
            let (grid, label_gt) = geotiff::read_labels(path)?;
            if grid.dims() != (h, w) {
                return Err(Error::GridMismatch {
                    what: format!("label raster {}", path.display()),
                    expected_h: h,
                    expected_w: w,
                    got_h: grid.height(),
                    got_w: grid.width(),
                });
            }
            if !label_gt.approx_eq(&geotransform) {
                return Err(Error::GeoMismatch {
                    what: format!("label raster {}", path.display()),
                    detail: format!(
                        "label transform {:?} differs from channel transform {:?}",
                        label_gt.0, geotransform.0
                    ),
                });
            }
            (grid, RasterizeReport::default())
        }
        LabelSource::GeoJson(path) => {
            let polys = labels::read_geojson(path)?;
            rasterize_labels(&polys, &geotransform, h, w)
        }
        LabelSource::Shapefile(path) => {
            let polys = labels::read_shapefile(path)?;
            rasterize_labels(&polys, &geotransform, h, w)
        }
    };

    let scene = Scene::assemble(id, month, channels, label_grid, geotransform)?;
    let report = IngestReport {
        scene_id: scene.id.clone(),
        month,
        height: h,
        width: w,
        valid_fraction: scene.valid_fraction(),
        label_overlap_conflicts: raster_report.overlap_conflicts,
    };
    Ok((scene, report))
}

/// Ingest every cataloged scene (optionally restricted to `only` ids) in
/// parallel, returning the scene store plus per-scene reports ordered by
/// month then id.
pub fn ingest_catalog(
    root: &Path,
    catalog: &crate::fixture::CatalogFile,
    only: Option<&std::collections::BTreeSet<String>>,
) -> Result<(std::collections::BTreeMap<String, Scene>, Vec<IngestReport>)> {
    use rayon::prelude::*;
    let mut wanted: Vec<&crate::fixture::CatalogScene> = catalog
        .scenes
        .iter()
        .filter(|s| only.is_none_or(|ids| ids.contains(&s.id)))
        .collect();
    wanted.sort_by_key(|s| (s.month, s.id.clone()));
    let ingested: Vec<(Scene, IngestReport)> = wanted
        .par_iter()
        .map(|entry| {
            let channels: Vec<PathBuf> = entry.channels.iter().map(|p| root.join(p)).collect();
            let labels = LabelSource::from_path(root.join(&entry.labels))?;
            ingest_scene(&channels, &labels, &entry.id, entry.month)
        })
        .collect::<Result<_>>()?;
    let mut scenes = std::collections::BTreeMap::new();
    let mut reports = Vec::with_capacity(ingested.len());
    for (scene, report) in ingested {
        scenes.insert(scene.id.clone(), scene);
        reports.push(report);
    }
    Ok((scenes, reports))
}

fn read_channels(
    sources: &[PathBuf],
) -> Result<([Grid<f32>; NUM_CHANNELS], crate::grid::GeoTransform)> {
    match sources {
        [single] => {
            let raster = geotiff::read(single)?;
            if raster.bands.len() != NUM_CHANNELS {
                return Err(Error::RasterFormat {
                    path: single.clone(),
                    detail: format!(
                        "expected {NUM_CHANNELS} bands (HH, HV, incidence angle), got {}",
                        raster.bands.len()
                    ),
                });
            }
            let mut bands = raster.bands.into_iter();
            Ok((
                [
                    bands.next().unwrap(),
                    bands.next().unwrap(),
                    bands.next().unwrap(),
                ],
                raster.geotransform,
            ))
        }
        [hh, hv, ia] => {
            let first = geotiff::read(hh)?;
            let (h, w) = first.bands[0].dims();
            let gt = first.geotransform;
            let mut grids = vec![take_single_band(first, hh)?];
            for path in [hv, ia] {
                let raster = geotiff::read(path)?;
                let band = take_single_band(raster, path)?;
                if band.dims() != (h, w) {
                    return Err(Error::GridMismatch {
                        what: format!("channel raster {}", path.display()),
                        expected_h: h,
                        expected_w: w,
                        got_h: band.height(),
                        got_w: band.width(),
                    });
                }
                grids.push(band);
            }
            // Re-read transforms for the comparison (cheap relative to data).
            for path in [hv, ia] {
                let raster_gt = geotiff::read(path)?.geotransform;
                if !raster_gt.approx_eq(&gt) {
                    return Err(Error::GeoMismatch {
                        what: format!("channel raster {}", path.display()),
                        detail: format!("transform {:?} differs from {:?}", raster_gt.0, gt.0),
                    });
                }
            }
            let mut it = grids.into_iter();
            Ok((
                [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
                gt,
            ))
        }
        other => Err(Error::RasterFormat {
            path: other.first().cloned().unwrap_or_default(),
            detail: format!(
                "need 1 multi-band or {NUM_CHANNELS} single-band rasters, got {}",
                other.len()
            ),
        }),
    }
}

fn take_single_band(raster: geotiff::RasterFile, path: &Path) -> Result<Grid<f32>> {
    if raster.bands.len() != 1 {
        return Err(Error::RasterFormat {
            path: path.to_path_buf(),
            detail: format!("expected a single band, got {}", raster.bands.len()),
        });
    }
    Ok(raster.bands.into_iter().next().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoTransform;
    use crate::scene::{LABEL_ICE, LABEL_IGNORE};

    fn write_band(
        dir: &Path,
        name: &str,
        h: usize,
        w: usize,
        f: impl Fn(usize, usize) -> f32,
        gt: &GeoTransform,
    ) -> PathBuf {
        let mut g = Grid::new(h, w, 0.0f32);
        for r in 0..h {
            for c in 0..w {
                g.set(r, c, f(r, c));
            }
        }
        let path = dir.join(name);
        geotiff::write_f32(&path, &g, gt).unwrap();
        path
    }

    #[test]
    fn ingest_per_band_with_geojson_labels() {
        let dir = tempfile::tempdir().unwrap();
        let gt = GeoTransform::north_up(0.0, 16.0, 1.0);
        let hh = write_band(dir.path(), "hh.tif", 16, 16, |r, c| (r + c) as f32, &gt);
        let hv = write_band(dir.path(), "hv.tif", 16, 16, |r, _| r as f32, &gt);
        let ia = write_band(dir.path(), "ia.tif", 16, 16, |_, c| 19.0 + c as f32, &gt);
        let labels_path = dir.path().join("labels.geojson");
        std::fs::write(
            &labels_path,
            serde_json::json!({
                "type": "FeatureCollection",
                "features": [{
                    "type": "Feature",
                    "properties": {"class": "ice"},
                    "geometry": {"type": "Polygon",
                        "coordinates": [[[-1.0,-1.0],[17.0,-1.0],[17.0,17.0],[-1.0,17.0]]]}
                }]
            })
            .to_string(),
        )
        .unwrap();
        let (scene, report) =
            ingest_scene(&[hh, hv, ia], &LabelSource::GeoJson(labels_path), "s1", 3).unwrap();
        assert_eq!(scene.dims(), (16, 16));
        assert_eq!(scene.labels.count(|v| v == LABEL_ICE), 256);
        assert_eq!(report.valid_fraction, 1.0);
    }

    #[test]
    fn grid_mismatch_between_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let gt = GeoTransform::north_up(0.0, 8.0, 1.0);
        let hh = write_band(dir.path(), "hh.tif", 8, 8, |_, _| 0.0, &gt);
        let hv = write_band(dir.path(), "hv.tif", 8, 9, |_, _| 0.0, &gt);
        let ia = write_band(dir.path(), "ia.tif", 8, 8, |_, _| 0.0, &gt);
        let labels_path = dir.path().join("labels.tif");
        geotiff::write_u8(&labels_path, &Grid::new(8, 8, LABEL_ICE), &gt).unwrap();
        let err =
            ingest_scene(&[hh, hv, ia], &LabelSource::Raster(labels_path), "s", 4).unwrap_err();
        assert!(err.to_string().contains("8x8") && err.to_string().contains("8x9"));
    }

    #[test]
    fn label_transform_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let gt = GeoTransform::north_up(0.0, 8.0, 1.0);
        let other_gt = GeoTransform::north_up(100.0, 8.0, 1.0);
        let hh = write_band(dir.path(), "hh.tif", 8, 8, |_, _| 0.0, &gt);
        let hv = write_band(dir.path(), "hv.tif", 8, 8, |_, _| 0.0, &gt);
        let ia = write_band(dir.path(), "ia.tif", 8, 8, |_, _| 0.0, &gt);
        let labels_path = dir.path().join("labels.tif");
        geotiff::write_u8(&labels_path, &Grid::new(8, 8, LABEL_ICE), &other_gt).unwrap();
        assert!(matches!(
            ingest_scene(&[hh, hv, ia], &LabelSource::Raster(labels_path), "s", 4),
            Err(Error::GeoMismatch { .. })
        ));
    }

    #[test]
    fn uncovered_pixels_become_ignore_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let gt = GeoTransform::north_up(0.0, 10.0, 1.0);
        let hh = write_band(dir.path(), "hh.tif", 10, 10, |_, _| 1.0, &gt);
        let hv = write_band(dir.path(), "hv.tif", 10, 10, |_, _| 1.0, &gt);
        let ia = write_band(dir.path(), "ia.tif", 10, 10, |_, _| 30.0, &gt);
        let labels_path = dir.path().join("labels.geojson");
        // Covers only the left half (map x in [0, 5]).
        std::fs::write(
            &labels_path,
            serde_json::json!({
                "type": "FeatureCollection",
                "features": [{
                    "type": "Feature",
                    "properties": {"class": "water"},
                    "geometry": {"type": "Polygon",
                        "coordinates": [[[0.0,0.0],[5.0,0.0],[5.0,10.0],[0.0,10.0]]]}
                }]
            })
            .to_string(),
        )
        .unwrap();
        let (scene, report) =
            ingest_scene(&[hh, hv, ia], &LabelSource::GeoJson(labels_path), "s", 5).unwrap();
        assert_eq!(scene.labels.count(|v| v == LABEL_IGNORE), 50);
        assert_eq!(scene.valid.count(|v| v), 50);
        assert!((report.valid_fraction - 0.5).abs() < 1e-12);
    }
}
