//! Minimal GeoTIFF reading and writing on top of the `tiff` crate: single- or
//! multi-band rasters plus the affine georeferencing carried in the
//! ModelPixelScale/ModelTiepoint (or ModelTransformation) tags.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{Error, Result};
use crate::grid::{GeoTransform, Grid};

/// A decoded raster: per-band grids plus georeferencing.
pub struct RasterFile {
    pub bands: Vec<Grid<f32>>,
    pub geotransform: GeoTransform,
}

fn read_geotransform<R: std::io::Read + std::io::Seek>(
    decoder: &mut Decoder<R>,
    path: &Path,
) -> Result<GeoTransform> {
    // Full affine matrix takes precedence when present.
    if let Ok(Some(v)) = decoder.find_tag(Tag::ModelTransformationTag) {
        let m = v.into_f64_vec()?;
        if m.len() >= 8 {
            return Ok(GeoTransform([m[3], m[0], m[1], m[7], m[4], m[5]]));
        }
    }
    let scale = decoder
        .find_tag(Tag::ModelPixelScaleTag)?
        .map(|v| v.into_f64_vec())
        .transpose()?;
    let tiepoint = decoder
        .find_tag(Tag::ModelTiepointTag)?
        .map(|v| v.into_f64_vec())
        .transpose()?;
    match (scale, tiepoint) {
        (Some(s), Some(t)) if s.len() >= 2 && t.len() >= 6 => {
            // Tiepoint maps raster (i, j) to map (x, y); scale is (sx, sy).
            let (i, j, x, y) = (t[0], t[1], t[3], t[4]);
            Ok(GeoTransform([
                x - i * s[0],
                s[0],
                0.0,
                y + j * s[1],
                0.0,
                -s[1],
            ]))
        }
        _ => Err(Error::RasterFormat {
            path: path.to_path_buf(),
            detail: "no ModelTransformation or ModelPixelScale+ModelTiepoint tags".into(),
        }),
    }
}

/// Read a GeoTIFF with any number of interleaved bands into f32 grids.
pub fn read(path: &Path) -> Result<RasterFile> {
    let file = File::open(path).map_err(|e| Error::file_io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file))?;
    let (w, h) = decoder.dimensions()?;
    let (w, h) = (w as usize, h as usize);
    let samples = match decoder.colortype()? {
        tiff::ColorType::Gray(_) => 1usize,
        tiff::ColorType::RGB(_) => 3,
        tiff::ColorType::Multiband { num_samples, .. } => num_samples as usize,
        other => {
            return Err(Error::RasterFormat {
                path: path.to_path_buf(),
                detail: format!("unsupported color type {other:?}"),
            })
        }
    };
    let geotransform = read_geotransform(&mut decoder, path)?;
    let flat: Vec<f32> = match decoder.read_image()? {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        other => {
            return Err(Error::RasterFormat {
                path: path.to_path_buf(),
                detail: format!("unsupported sample format {other:?}"),
            })
        }
    };
    if flat.len() != h * w * samples {
        return Err(Error::RasterFormat {
            path: path.to_path_buf(),
            detail: format!(
                "expected {} samples ({h}x{w}x{samples}), got {}",
                h * w * samples,
                flat.len()
            ),
        });
    }
    let mut bands = Vec::with_capacity(samples);
    for b in 0..samples {
        let mut data = Vec::with_capacity(h * w);
        for px in 0..h * w {
            data.push(flat[px * samples + b]);
        }
        bands.push(Grid::from_vec(h, w, data)?);
    }
    Ok(RasterFile {
        bands,
        geotransform,
    })
}

/// Read a single-band raster of integer class labels.
pub fn read_labels(path: &Path) -> Result<(Grid<u8>, GeoTransform)> {
    let file = File::open(path).map_err(|e| Error::file_io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file))?;
    let (w, h) = decoder.dimensions()?;
    let (w, h) = (w as usize, h as usize);
    let geotransform = read_geotransform(&mut decoder, path)?;
    let data: Vec<u8> = match decoder.read_image()? {
        DecodingResult::U8(v) => v,
        DecodingResult::U16(v) => v
            .into_iter()
            .map(|x| {
                u8::try_from(x).map_err(|_| Error::UnknownLabelClass {
                    value: x.to_string(),
                    context: path.display().to_string(),
                })
            })
            .collect::<Result<_>>()?,
        other => {
            return Err(Error::RasterFormat {
                path: path.to_path_buf(),
                detail: format!("label raster must be u8/u16, got {other:?}"),
            })
        }
    };
    Ok((Grid::from_vec(h, w, data)?, geotransform))
}

fn geo_tags<W, C>(
    image: &mut tiff::encoder::ImageEncoder<W, C, tiff::encoder::TiffKindStandard>,
    gt: &GeoTransform,
) -> Result<()>
where
    W: std::io::Write + std::io::Seek,
    C: colortype::ColorType,
{
    let c = gt.0;
    if gt.is_axis_aligned() && c[5] < 0.0 {
        image
            .encoder()
            .write_tag(Tag::ModelPixelScaleTag, &[c[1], -c[5], 0.0][..])?;
        image
            .encoder()
            .write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, c[0], c[3], 0.0][..])?;
    } else {
        let m = [
            c[1], c[2], 0.0, c[0], //
            c[4], c[5], 0.0, c[3], //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        image
            .encoder()
            .write_tag(Tag::ModelTransformationTag, &m[..])?;
    }
    Ok(())
}

/// Write a single-band f32 GeoTIFF.
pub fn write_f32(path: &Path, grid: &Grid<f32>, gt: &GeoTransform) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file_io(path, e))?;
    let mut encoder = TiffEncoder::new(BufWriter::new(file))?;
    let mut image =
        encoder.new_image::<colortype::Gray32Float>(grid.width() as u32, grid.height() as u32)?;
    geo_tags(&mut image, gt)?;
    image.write_data(grid.as_slice())?;
    Ok(())
}

/// Write a single-band u8 GeoTIFF (class maps, labels, error masks).
pub fn write_u8(path: &Path, grid: &Grid<u8>, gt: &GeoTransform) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file_io(path, e))?;
    let mut encoder = TiffEncoder::new(BufWriter::new(file))?;
    let mut image =
        encoder.new_image::<colortype::Gray8>(grid.width() as u32, grid.height() as u32)?;
    geo_tags(&mut image, gt)?;
    image.write_data(grid.as_slice())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_preserves_data_and_transform() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("band.tif");
        let mut grid = Grid::new(5, 7, 0.0f32);
        for r in 0..5 {
            for c in 0..7 {
                grid.set(r, c, (r * 7 + c) as f32 * 0.25 - 3.0);
            }
        }
        let gt = GeoTransform::north_up(-1200.0, 84000.0, 80.0);
        write_f32(&path, &grid, &gt).unwrap();
        let raster = read(&path).unwrap();
        assert_eq!(raster.bands.len(), 1);
        assert_eq!(raster.bands[0], grid);
        assert!(raster.geotransform.approx_eq(&gt));
    }

    #[test]
    fn u8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tif");
        let mut grid = Grid::new(4, 4, 255u8);
        grid.set(0, 0, 0);
        grid.set(3, 3, 1);
        let gt = GeoTransform::north_up(0.0, 0.0, 80.0);
        write_u8(&path, &grid, &gt).unwrap();
        let (read_back, read_gt) = read_labels(&path).unwrap();
        assert_eq!(read_back, grid);
        assert!(read_gt.approx_eq(&gt));
    }

    #[test]
    fn missing_geo_tags_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.tif");
        let file = File::create(&path).unwrap();
        let mut encoder = TiffEncoder::new(BufWriter::new(file)).unwrap();
        encoder
            .write_image::<colortype::Gray8>(3, 3, &[0u8; 9])
            .unwrap();
        drop(encoder);
        assert!(matches!(read(&path), Err(Error::RasterFormat { .. })));
    }
}
