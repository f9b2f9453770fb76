//! AGRID binary rasters and station CSV files.
//!
//! AGRID layout, little-endian:
//!
//! ```text
//! "AGRD" | version u32 = 1 | nchannels u32 | nrows u32 | ncols u32
//! | x_min f64 | y_min f64 | cell_size f64 | nodata f32
//! | per channel: name_len u16, UTF-8 name, nrows*ncols f32 (row 0 = north)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{GeoGrid, GeoTransform, GridError, GridStack, Result, Station, StationSet};

const MAGIC: [u8; 4] = *b"AGRD";
const VERSION: u32 = 1;
// Header fields after the magic: 4 u32 + 3 f64 + 1 f32.
const HEADER_LEN: usize = 4 + 4 * 4 + 3 * 8 + 4;

pub fn write_grid(grid: &GeoGrid, path: impl AsRef<Path>) -> Result<()> {
    let stack = GridStack::new(vec![grid.clone()], vec![String::new()])?;
    write_stack(&stack, path)
}

pub fn write_stack(stack: &GridStack, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(stack, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a single-channel file.
pub fn read_grid(path: impl AsRef<Path>) -> Result<GeoGrid> {
    let stack = read_stack(path)?;
    if stack.len() != 1 {
        return Err(GridError::ChannelCount {
            expected: 1,
            found: stack.len(),
        });
    }
    let (mut channels, _) = stack.into_parts();
    Ok(channels.remove(0))
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<GridStack> {
    let mut r = BufReader::new(File::open(path)?);
    decode(&mut r)
}

pub(crate) fn encode<W: Write>(stack: &GridStack, w: &mut W) -> Result<()> {
    let t = stack.template().transform();
    let to_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| GridError::Dimension(format!("{what} {n} exceeds u32")))
    };
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(to_u32(stack.len(), "nchannels")?)?;
    w.write_u32::<LittleEndian>(to_u32(stack.nrows(), "nrows")?)?;
    w.write_u32::<LittleEndian>(to_u32(stack.ncols(), "ncols")?)?;
    w.write_f64::<LittleEndian>(t.x_min)?;
    w.write_f64::<LittleEndian>(t.y_min)?;
    w.write_f64::<LittleEndian>(t.cell_size)?;
    w.write_f32::<LittleEndian>(stack.template().nodata())?;
    for (grid, name) in stack.channels().iter().zip(stack.names()) {
        let len = u16::try_from(name.len())
            .map_err(|_| GridError::MalformedHeader(format!("channel name too long: {name}")))?;
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(name.as_bytes())?;
        for &v in grid.values() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn truncated(e: std::io::Error, what: &str) -> GridError {
    if e.kind() == ErrorKind::UnexpectedEof {
        GridError::Truncated(what.to_string())
    } else {
        GridError::Io(e)
    }
}

pub(crate) fn decode<R: Read>(r: &mut R) -> Result<GridStack> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| truncated(e, "magic"))?;
    if magic != MAGIC {
        return Err(GridError::BadMagic(magic));
    }
    let mut header = [0u8; HEADER_LEN - 4];
    r.read_exact(&mut header).map_err(|e| truncated(e, "header"))?;
    let mut h = &header[..];
    let version = h.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(GridError::UnsupportedVersion(version));
    }
    let nchannels = h.read_u32::<LittleEndian>()? as usize;
    let nrows = h.read_u32::<LittleEndian>()? as usize;
    let ncols = h.read_u32::<LittleEndian>()? as usize;
    let x_min = h.read_f64::<LittleEndian>()?;
    let y_min = h.read_f64::<LittleEndian>()?;
    let cell_size = h.read_f64::<LittleEndian>()?;
    let nodata = h.read_f32::<LittleEndian>()?;

    if nchannels == 0 || nrows == 0 || ncols == 0 {
        return Err(GridError::Dimension(format!(
            "header declares {nchannels} channels of {nrows}x{ncols}"
        )));
    }
    let npix = nrows
        .checked_mul(ncols)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| GridError::Dimension(format!("{nrows}x{ncols} overflows")))?;
    let transform = GeoTransform::new(x_min, y_min, cell_size)
        .map_err(|e| GridError::MalformedHeader(e.to_string()))?;

    let mut channels = Vec::with_capacity(nchannels.min(64));
    let mut names = Vec::with_capacity(nchannels.min(64));
    let mut bytes = Vec::new();
    for ch in 0..nchannels {
        let len = r
            .read_u16::<LittleEndian>()
            .map_err(|e| truncated(e, &format!("channel {ch} name length")))?;
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|e| truncated(e, &format!("channel {ch} name")))?;
        let name = String::from_utf8(name)
            .map_err(|_| GridError::MalformedHeader(format!("channel {ch} name is not UTF-8")))?;
        // Read incrementally so a lying header cannot force a huge allocation.
        bytes.clear();
        let got = r
            .by_ref()
            .take((npix * 4) as u64)
            .read_to_end(&mut bytes)?;
        if got != npix * 4 {
            return Err(GridError::Truncated(format!(
                "channel {ch} has {got} of {} payload bytes",
                npix * 4
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        channels.push(GeoGrid::new(nrows, ncols, transform, values, nodata)?);
        names.push(name);
    }
    GridStack::new(channels, names)
}

#[derive(Debug, Serialize, Deserialize)]
struct StationRow {
    station_id: String,
    lon: f64,
    lat: f64,
    value: Option<f64>,
}

pub fn write_stations(stations: &StationSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stations.records() {
        w.serialize(StationRow {
            station_id: s.id.clone(),
            lon: s.lon,
            lat: s.lat,
            value: s.value,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stations(path: impl AsRef<Path>) -> Result<StationSet> {
    let mut r = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in r.deserialize() {
        let row: StationRow = row?;
        records.push(Station {
            id: row.station_id,
            lon: row.lon,
            lat: row.lat,
            value: row.value,
        });
    }
    Ok(StationSet::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DEFAULT_NODATA;
    use proptest::prelude::*;

    fn to_bytes(stack: &GridStack) -> Vec<u8> {
        let mut out = Vec::new();
        encode(stack, &mut out).unwrap();
        out
    }

    fn single(grid: &GeoGrid) -> GridStack {
        GridStack::new(vec![grid.clone()], vec![String::new()]).unwrap()
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.agrd");
        let g = GeoGrid::filled(3, 4, GeoTransform::new(100.0, 30.0, 0.1).unwrap(), 7.5).unwrap();
        write_grid(&g, &path).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.transform(), g.transform());
    }

    #[test]
    fn one_pixel_zero_payload() {
        let g = GeoGrid::filled(1, 1, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), 0.0).unwrap();
        let bytes = to_bytes(&single(&g));
        assert_eq!(&bytes[..4], b"AGRD");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // header, empty name length, then exactly one f32 zero
        assert_eq!(bytes.len(), HEADER_LEN + 2 + 4);
        assert_eq!(&bytes[bytes.len() - 4..], &0f32.to_le_bytes());
    }

    #[test]
    fn ten_channel_stack_header() {
        let g = GeoGrid::filled(2, 2, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), 1.0).unwrap();
        let pairs = crate::grid::CANONICAL_CHANNELS
            .iter()
            .map(|n| (n.to_string(), g.clone()))
            .collect();
        let stack = GridStack::from_named(pairs).unwrap();
        let bytes = to_bytes(&stack);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        let back = decode(&mut &bytes[..]).unwrap();
        assert_eq!(back.names(), stack.names());
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn zero_columns_is_dimension_error() {
        let g = GeoGrid::filled(1, 1, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), 0.0).unwrap();
        let mut bytes = to_bytes(&single(&g));
        bytes[16..20].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&mut &bytes[..]), Err(GridError::Dimension(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let g = GeoGrid::filled(1, 1, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), 0.0).unwrap();
        let mut bytes = to_bytes(&single(&g));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&mut &bytes[..]), Err(GridError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn truncation_and_overflow_are_distinct() {
        let g = GeoGrid::filled(2, 3, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), 1.0).unwrap();
        let bytes = to_bytes(&single(&g));
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(&mut &cut[..]), Err(GridError::Truncated(_))));
        let cut = &bytes[..10];
        assert!(matches!(decode(&mut &cut[..]), Err(GridError::Truncated(_))));

        let mut huge = bytes.clone();
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&mut &huge[..]), Err(GridError::Dimension(_))));
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.agrd"), dir.path().join("b.agrd"));
        let g = GeoGrid::from_fn(5, 3, GeoTransform::new(-3.5, 12.25, 0.01).unwrap(), |r, c| {
            (r as f32 - 2.0) * 0.3 + c as f32
        })
        .unwrap();
        write_grid(&g, &a).unwrap();
        write_grid(&read_grid(&a).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn stations_csv_roundtrip_with_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let set = StationSet::new(vec![
            Station {
                id: "A1".into(),
                lon: 100.25,
                lat: 30.125,
                value: Some(12.5),
            },
            Station {
                id: "B2".into(),
                lon: 101.0,
                lat: 31.0,
                value: None,
            },
        ]);
        write_stations(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("station_id,lon,lat,value\n"));
        assert!(text.contains("B2,101.0,31.0,\n"));
        assert_eq!(read_stations(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn agrid_roundtrip_is_bitwise(
            nrows in 1usize..6,
            ncols in 1usize..6,
            seed in proptest::collection::vec(-1e6f32..1e6, 36),
            negzero in any::<bool>(),
        ) {
            let mut values: Vec<f32> = seed[..nrows * ncols].to_vec();
            if negzero { values[0] = -0.0; }
            let g = GeoGrid::new(nrows, ncols, GeoTransform::new(73.5, 18.0, 0.1).unwrap(), values, DEFAULT_NODATA).unwrap();
            let bytes = to_bytes(&single(&g));
            let back = decode(&mut &bytes[..]).unwrap();
            let back = back.channel(0);
            prop_assert_eq!(back.transform(), g.transform());
            for (a, b) in back.values().iter().zip(g.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
