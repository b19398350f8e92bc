//! Regional aggregation geometry: named lat/lon boxes, the default
//! evaluation regions, and subregion splitting schemes.
//!
//! Cell membership uses half-open intervals `[lo, hi)` against cell
//! centers, so splitting a box at an interior line partitions its cells
//! exactly. A longitude range with `lon.0 > lon.1` wraps the antimeridian.

use serde::{Deserialize, Serialize};

use crate::data::GridSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub name: String,
    /// (south, north) bounds in degrees.
    pub lat: (f64, f64),
    /// (west, east) bounds in degrees; west > east wraps the antimeridian.
    pub lon: (f64, f64),
}

impl RegionBox {
    pub fn new(name: &str, lat: (f64, f64), lon: (f64, f64)) -> Self {
        Self {
            name: name.into(),
            lat,
            lon,
        }
    }

    pub fn wraps(&self) -> bool {
        self.lon.0 > self.lon.1
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        if !(lat >= self.lat.0 && lat < self.lat.1) {
            return false;
        }
        if self.wraps() {
            lon >= self.lon.0 || lon < self.lon.1
        } else {
            lon >= self.lon.0 && lon < self.lon.1
        }
    }

    /// Grid cells whose centers fall inside the box.
    pub fn cells(&self, grid: &GridSpec) -> Result<Vec<(usize, usize)>> {
        let (h, w) = (grid.h()?, grid.w()?);
        let mut out = Vec::new();
        for i in 0..h {
            let lat = grid.lat_center(i);
            for j in 0..w {
                if self.contains(lat, grid.lon_center(j)) {
                    out.push((i, j));
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.lat.0 >= self.lat.1 {
            return Err(Error::Config(format!(
                "region `{}`: empty latitude range {:?}",
                self.name, self.lat
            )));
        }
        if self.cells(grid)?.is_empty() {
            return Err(Error::Config(format!(
                "region `{}` contains no grid cells",
                self.name
            )));
        }
        Ok(())
    }
}

/// Default evaluation regions (config-overridable).
pub fn default_regions() -> Vec<RegionBox> {
    vec![
        RegionBox::new("USA", (25.0, 50.0), (-125.0, -65.0)),
        RegionBox::new("SouthAmerica", (-35.0, 10.0), (-85.0, -35.0)),
        RegionBox::new("Africa", (-35.0, 15.0), (-20.0, 50.0)),
        RegionBox::new("Australia", (-45.0, -10.0), (110.0, 155.0)),
        RegionBox::new("MaritimeContinent", (-10.0, 10.0), (90.0, 160.0)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubregionScheme {
    /// Four quadrants split at the box midpoints (NW, NE, SW, SE).
    Quadrants,
    /// North/South split at the equator.
    EquatorNs,
    /// South of the equator plus a NW/NE split of the northern half.
    Africa3Way,
}

/// Default subregion scheme per region, following the supplementary
/// regional analysis: quadrants except for South America (equator split)
/// and Africa (three-way).
pub fn default_scheme_for(region_name: &str) -> SubregionScheme {
    match region_name {
        "SouthAmerica" => SubregionScheme::EquatorNs,
        "Africa" => SubregionScheme::Africa3Way,
        _ => SubregionScheme::Quadrants,
    }
}

fn wrap_lon(x: f64) -> f64 {
    let mut v = x;
    while v >= 180.0 {
        v -= 360.0;
    }
    while v < -180.0 {
        v += 360.0;
    }
    v
}

fn lon_midpoint(lon: (f64, f64)) -> f64 {
    if lon.0 <= lon.1 {
        0.5 * (lon.0 + lon.1)
    } else {
        wrap_lon(lon.0 + 0.5 * ((lon.1 - lon.0) + 360.0))
    }
}

/// Splits a region into subregions. Every returned box must contain at
/// least one grid cell, otherwise the box is too small to split.
pub fn subregion_split(
    parent: &RegionBox,
    scheme: SubregionScheme,
    grid: &GridSpec,
) -> Result<Vec<RegionBox>> {
    parent.validate(grid)?;
    let lat_mid = 0.5 * (parent.lat.0 + parent.lat.1);
    let lon_mid = lon_midpoint(parent.lon);
    let boxes = match scheme {
        SubregionScheme::Quadrants => vec![
            RegionBox::new("NW", (lat_mid, parent.lat.1), (parent.lon.0, lon_mid)),
            RegionBox::new("NE", (lat_mid, parent.lat.1), (lon_mid, parent.lon.1)),
            RegionBox::new("SW", (parent.lat.0, lat_mid), (parent.lon.0, lon_mid)),
            RegionBox::new("SE", (parent.lat.0, lat_mid), (lon_mid, parent.lon.1)),
        ],
        SubregionScheme::EquatorNs => {
            if !(parent.lat.0 < 0.0 && parent.lat.1 > 0.0) {
                return Err(Error::Config(format!(
                    "region `{}` does not straddle the equator",
                    parent.name
                )));
            }
            vec![
                RegionBox::new("North", (0.0, parent.lat.1), parent.lon),
                RegionBox::new("South", (parent.lat.0, 0.0), parent.lon),
            ]
        }
        SubregionScheme::Africa3Way => {
            if !(parent.lat.0 < 0.0 && parent.lat.1 > 0.0) {
                return Err(Error::Config(format!(
                    "region `{}` does not straddle the equator",
                    parent.name
                )));
            }
            vec![
                RegionBox::new("NW", (0.0, parent.lat.1), (parent.lon.0, lon_mid)),
                RegionBox::new("NE", (0.0, parent.lat.1), (lon_mid, parent.lon.1)),
                RegionBox::new("South", (parent.lat.0, 0.0), parent.lon),
            ]
        }
    };
    for b in &boxes {
        if b.cells(grid)?.is_empty() {
            return Err(Error::Config(format!(
                "splitting region `{}` produces an empty subregion `{}` on this grid",
                parent.name, b.name
            )));
        }
    }
    Ok(boxes)
}
