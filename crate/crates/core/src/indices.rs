//! Per-pixel spectral and thermal indices. Every index treats nodata as
//! absorbing and maps near-zero denominators to nodata.

use serde::{Deserialize, Serialize};

use crate::raster::{zip3_cells, zip_cells, Grid, RasterError};

const DENOMINATOR_EPS: f64 = 1e-12;

/// EVI gain, red and blue aerosol coefficients, and canopy adjustment.
const EVI_G: f64 = 2.5;
const EVI_C1: f64 = 6.0;
const EVI_C2: f64 = 7.5;
const EVI_L: f64 = 1.0;

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den.abs() >= DENOMINATOR_EPS).then(|| num / den)
}

/// `(a - b) / (a + b)`.
pub fn normalized_difference(a: &Grid, b: &Grid, name: &str) -> Result<Grid, RasterError> {
    zip_cells(a, b, name, |x, y| ratio(x - y, x + y))
}

pub fn ndvi(nir: &Grid, red: &Grid) -> Result<Grid, RasterError> {
    normalized_difference(nir, red, "NDVI")
}

pub fn ndbi(swir1: &Grid, nir: &Grid) -> Result<Grid, RasterError> {
    normalized_difference(swir1, nir, "NDBI")
}

pub fn ndmi(nir: &Grid, swir1: &Grid) -> Result<Grid, RasterError> {
    normalized_difference(nir, swir1, "NDMI")
}

/// Soil-adjusted vegetation index. With `l == 0` this is bit-identical to
/// [`ndvi`].
pub fn savi(nir: &Grid, red: &Grid, l: f64) -> Result<Grid, RasterError> {
    if l == 0.0 {
        return normalized_difference(nir, red, "SAVI");
    }
    zip_cells(nir, red, "SAVI", |n, r| {
        ratio(n - r, n + r + l).map(|v| (1.0 + l) * v)
    })
}

pub fn evi(nir: &Grid, red: &Grid, blue: &Grid) -> Result<Grid, RasterError> {
    zip3_cells(nir, red, blue, "EVI", |n, r, b| {
        ratio(EVI_G * (n - r), n + EVI_C1 * r - EVI_C2 * b + EVI_L)
    })
}

/// Absolute day/night land-surface temperature difference.
pub fn lst_difference(day: &Grid, night: &Grid) -> Result<Grid, RasterError> {
    zip_cells(day, night, "DIFFLST", |d, n| Some((d - n).abs()))
}

/// Which layer supplies each reflectance band.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandRoles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub red: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swir1: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralIndex {
    Ndvi,
    Evi,
    Savi,
    Ndmi,
    Ndbi,
}

impl SpectralIndex {
    pub const ALL: [SpectralIndex; 5] = [
        SpectralIndex::Ndvi,
        SpectralIndex::Evi,
        SpectralIndex::Savi,
        SpectralIndex::Ndmi,
        SpectralIndex::Ndbi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpectralIndex::Ndvi => "NDVI",
            SpectralIndex::Evi => "EVI",
            SpectralIndex::Savi => "SAVI",
            SpectralIndex::Ndmi => "NDMI",
            SpectralIndex::Ndbi => "NDBI",
        }
    }

    pub fn required_bands(self) -> &'static [&'static str] {
        match self {
            SpectralIndex::Ndvi | SpectralIndex::Savi => &["nir", "red"],
            SpectralIndex::Evi => &["nir", "red", "blue"],
            SpectralIndex::Ndmi | SpectralIndex::Ndbi => &["nir", "swir1"],
        }
    }
}

/// Reflectance bands of one scene.
#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub blue: Option<Grid>,
    pub red: Option<Grid>,
    pub nir: Option<Grid>,
    pub swir1: Option<Grid>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("index {index} needs band '{band}' which is not configured")]
    MissingBand { index: &'static str, band: &'static str },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl Scene {
    fn band(&self, index: SpectralIndex, band: &'static str) -> Result<&Grid, IndexError> {
        let g = match band {
            "blue" => &self.blue,
            "red" => &self.red,
            "nir" => &self.nir,
            _ => &self.swir1,
        };
        g.as_ref().ok_or(IndexError::MissingBand {
            index: index.name(),
            band,
        })
    }

    pub fn compute(&self, index: SpectralIndex) -> Result<Grid, IndexError> {
        let b = |band| self.band(index, band);
        Ok(match index {
            SpectralIndex::Ndvi => ndvi(b("nir")?, b("red")?)?,
            SpectralIndex::Evi => evi(b("nir")?, b("red")?, b("blue")?)?,
            SpectralIndex::Savi => savi(b("nir")?, b("red")?, 0.5)?,
            SpectralIndex::Ndmi => ndmi(b("nir")?, b("swir1")?)?,
            SpectralIndex::Ndbi => ndbi(b("swir1")?, b("nir")?)?,
        })
    }
}

/// Index per scene followed by a per-cell temporal mean.
pub fn composite_index(scenes: &[Scene], index: SpectralIndex) -> Result<Grid, IndexError> {
    let per_scene: Vec<Grid> = scenes
        .iter()
        .map(|s| s.compute(index))
        .collect::<Result<_, _>>()?;
    Ok(crate::raster::temporal_mean(&per_scene, index.name())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GridGeoref, DEFAULT_NODATA};
    use proptest::prelude::*;

    fn g(values: &[f64]) -> Grid {
        let georef = GridGeoref::new(values.len(), 1, 0.0, 0.0, 30.0, DEFAULT_NODATA).unwrap();
        Grid::new("b", georef, values.to_vec()).unwrap()
    }

    #[test]
    fn ndvi_cases() {
        let out = ndvi(&g(&[0.6, 0.3, 0.0, DEFAULT_NODATA]), &g(&[0.2, 0.3, 0.0, 0.1])).unwrap();
        assert!((out.values()[0] - 0.5).abs() < 1e-15);
        assert_eq!(out.values()[1], 0.0);
        assert_eq!(out.values()[2], DEFAULT_NODATA);
        assert_eq!(out.values()[3], DEFAULT_NODATA);
    }

    #[test]
    fn normalized_difference_cases() {
        let out = normalized_difference(&g(&[0.4]), &g(&[0.1]), "ND").unwrap();
        assert!((out.values()[0] - 0.6).abs() < 1e-15);
        let nir = g(&[0.5, 0.2, 0.31]);
        let swir = g(&[0.3, 0.25, 0.07]);
        let b = ndbi(&swir, &nir).unwrap();
        let m = ndmi(&nir, &swir).unwrap();
        for (x, y) in b.values().iter().zip(m.values()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn savi_cases() {
        let out = savi(&g(&[0.6, 0.25]), &g(&[0.2, 0.25]), 0.5).unwrap();
        assert!((out.values()[0] - 1.5 * 0.4 / 1.3).abs() < 1e-12);
        assert!((out.values()[0] - 0.461538).abs() < 1e-6);
        assert_eq!(out.values()[1], 0.0);
    }

    #[test]
    fn evi_cases() {
        let out = evi(&g(&[0.5, 0.3, 0.4]), &g(&[0.1, 0.3, 0.1]), &g(&[0.05, 0.02, DEFAULT_NODATA])).unwrap();
        assert!((out.values()[0] - 1.0 / 1.725).abs() < 1e-12);
        assert!((out.values()[0] - 0.579710).abs() < 1e-6);
        assert_eq!(out.values()[1], 0.0);
        assert_eq!(out.values()[2], DEFAULT_NODATA);
    }

    #[test]
    fn lst_difference_cases() {
        let out = lst_difference(&g(&[40.0, 25.0, DEFAULT_NODATA]), &g(&[18.0, 25.0, 20.0])).unwrap();
        assert_eq!(out.values(), &[22.0, 0.0, DEFAULT_NODATA]);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let a = g(&[0.1, 0.2]);
        let b = g(&[0.1]);
        assert!(matches!(ndvi(&a, &b), Err(RasterError::MisalignedGrids(..))));
    }

    #[test]
    fn scene_composite_and_missing_band() {
        let s1 = Scene { nir: Some(g(&[0.6])), red: Some(g(&[0.2])), ..Default::default() };
        let s2 = Scene { nir: Some(g(&[0.3])), red: Some(g(&[0.1])), ..Default::default() };
        let out = composite_index(&[s1.clone(), s2], SpectralIndex::Ndvi).unwrap();
        assert!((out.values()[0] - 0.5).abs() < 1e-15);
        assert_eq!(
            s1.compute(SpectralIndex::Ndmi).unwrap_err(),
            IndexError::MissingBand { index: "NDMI", band: "swir1" }
        );
    }

    proptest! {
        #[test]
        fn index_invariants(a in prop::collection::vec(0.0f64..1.0, 1..16), seed in 0.0f64..1.0) {
            let b: Vec<f64> = a.iter().map(|x| (x * 7.3 + seed).fract()).collect();
            let (ga, gb) = (g(&a), g(&b));
            let nd = ndvi(&ga, &gb).unwrap();
            for v in nd.values() {
                prop_assert!(*v == DEFAULT_NODATA || (-1.0..=1.0).contains(v));
            }
            let s0 = savi(&ga, &gb, 0.0).unwrap();
            prop_assert_eq!(s0.values(), nd.values());
            let d1 = lst_difference(&ga, &gb).unwrap();
            let d2 = lst_difference(&gb, &ga).unwrap();
            prop_assert_eq!(d1.values(), d2.values());
        }
    }
}
