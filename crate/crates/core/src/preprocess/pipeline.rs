use crate::grid::{ancillary_channel_names, make_coordinate_channels, GeoGrid, GridStack};

use super::{
    compute_lswi, compute_ndwi, compute_tvdi, fit_tvdi_edges, idw_fill, screen_outliers, IdwFillParams, Result,
    ScreenParams, DEFAULT_TVDI_BINS,
};

/// Raw band order expected by [`assemble_ancillary`].
pub const RAW_BAND_NAMES: [&str; 7] = ["dem", "lstd", "lstn", "evi", "nir", "mir", "swir2"];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineOptions {
    pub screen: ScreenParams,
    pub fill: IdwFillParams,
    /// Skip outlier screening of the DEM.
    pub keep_dem: bool,
}

/// Screens outliers and fills gaps in every raw band.
pub fn clean_bands(raw: &GridStack, opts: &PipelineOptions) -> Result<GridStack> {
    raw.ensure_order(&RAW_BAND_NAMES)?;
    let mut out = Vec::with_capacity(raw.len());
    for (name, band) in raw.names().iter().zip(raw.channels()) {
        let screened = if name == "dem" && opts.keep_dem {
            band.clone()
        } else {
            screen_outliers(band, opts.screen)?
        };
        let filled = if screened.has_nodata() {
            idw_fill(&screened, opts.fill)?
        } else {
            screened
        };
        out.push(filled);
    }
    Ok(GridStack::new(out, raw.names().to_vec())?)
}

/// Builds the nine ancillary factors (lon, lat, DEM, day and night LST,
/// EVI, TVDI, NDWI, LSWI) from cleaned raw bands.
pub fn assemble_ancillary(raw: &GridStack, opts: &PipelineOptions) -> Result<GridStack> {
    let clean = clean_bands(raw, opts)?;
    let band = |n: &str| -> &GeoGrid { clean.by_name(n).expect("order checked") };
    let (lon, lat) = make_coordinate_channels(band("dem"));
    let edges = fit_tvdi_edges(band("lstd"), band("evi"), DEFAULT_TVDI_BINS)?;
    let tvdi = compute_tvdi(band("lstd"), band("evi"), &edges)?;
    let ndwi = compute_ndwi(band("nir"), band("mir"))?;
    let lswi = compute_lswi(band("nir"), band("swir2"))?;
    let channels = vec![
        lon,
        lat,
        band("dem").clone(),
        band("lstd").clone(),
        band("lstn").clone(),
        band("evi").clone(),
        tvdi,
        ndwi,
        lswi,
    ];
    let names = ancillary_channel_names().iter().map(|s| s.to_string()).collect();
    Ok(GridStack::new(channels, names)?)
}
