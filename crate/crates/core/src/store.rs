//! The `.lra` map file: a fixed header, then every cell sorted by (ix, iy)
//! with its surface layers and packed descriptor. Little-endian throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::codec::{Descriptor, SegmentConfig, BITS_PER_SEGMENT};
use crate::error::{Error, Result};
use crate::fusion::{Atlas, AtlasConfig};
use crate::gaussian::SurfaceLayer;
use crate::grid::CellIndex;

pub const MAGIC: [u8; 4] = *b"LRA1";
pub const VERSION: u16 = 1;
/// magic, version, resolution, origin, n_segments, bits, z_low, z_high, cell_count, keyframe_count
pub const HEADER_BYTES: usize = 4 + 2 + 8 + 16 + 1 + 1 + 4 + 4 + 8 + 8;
/// ix, iy, layer_count
pub const CELL_HEADER_BYTES: usize = 4 + 4 + 1;
/// mu, sigma, n_obs, label, occupancy
pub const LAYER_BYTES: usize = 4 + 4 + 4 + 1 + 1;
/// Persisted occupancy is log-odds in steps of 1/32, stored as i8.
pub const OCCUPANCY_STEPS_PER_UNIT: f32 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasFileHeader {
    pub version: u16,
    pub resolution: f64,
    pub origin: [f64; 2],
    pub n_segments: u8,
    pub bits_per_segment: u8,
    /// Absolute world altitude of the band bottom.
    pub z_low: f32,
    /// Absolute world altitude of the band top.
    pub z_high: f32,
    pub cell_count: u64,
    pub keyframe_count: u64,
}

pub fn quantize_occupancy(logodds: f32) -> i8 {
    (logodds * OCCUPANCY_STEPS_PER_UNIT).round().clamp(-127.0, 127.0) as i8
}

pub fn dequantize_occupancy(q: i8) -> f32 {
    q as f32 / OCCUPANCY_STEPS_PER_UNIT
}

/// Exact file size for a map with these totals.
pub fn file_size(cell_count: u64, layer_count: u64, n_segments: u8) -> u64 {
    let desc = (n_segments as u64).div_ceil(2);
    HEADER_BYTES as u64 + cell_count * (CELL_HEADER_BYTES as u64 + desc) + layer_count * LAYER_BYTES as u64
}

/// Serializes the atlas. Cells with layers, a descriptor or both are written
/// once each; a cell without a descriptor gets all-zero (unobserved) codes.
pub fn encode_atlas(atlas: &Atlas) -> Result<Vec<u8>> {
    let cfg = atlas.config();
    let n = cfg.segments.n_segments;
    let mut cells: BTreeMap<CellIndex, (Option<&[SurfaceLayer]>, Option<&Descriptor>)> = BTreeMap::new();
    for (c, col) in atlas.columns() {
        cells.entry(*c).or_default().0 = Some(&col.layers);
    }
    for (c, d) in atlas.descriptors() {
        cells.entry(*c).or_default().1 = Some(d);
    }
    let layers: usize = cells.values().map(|(l, _)| l.map_or(0, |l| l.len())).sum();
    let mut out = Vec::with_capacity(file_size(cells.len() as u64, layers as u64, n) as usize);

    let band = atlas.band();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.resolution.to_le_bytes());
    out.extend_from_slice(&cfg.origin[0].to_le_bytes());
    out.extend_from_slice(&cfg.origin[1].to_le_bytes());
    out.push(n);
    out.push(BITS_PER_SEGMENT);
    out.extend_from_slice(&(band.z_floor as f32).to_le_bytes());
    out.extend_from_slice(&(band.z_ceil as f32).to_le_bytes());
    out.extend_from_slice(&(cells.len() as u64).to_le_bytes());
    out.extend_from_slice(&atlas.keyframe_count().to_le_bytes());

    let empty = Descriptor::new(n);
    for (c, (layers, desc)) in &cells {
        let layers = layers.unwrap_or(&[]);
        let count = u8::try_from(layers.len())
            .map_err(|_| Error::MalformedInput(format!("cell {c:?} has {} layers, at most 255 fit", layers.len())))?;
        out.extend_from_slice(&c.ix.to_le_bytes());
        out.extend_from_slice(&c.iy.to_le_bytes());
        out.push(count);
        for l in layers {
            let label = u8::try_from(l.label)
                .map_err(|_| Error::MalformedInput(format!("cell {c:?} label {} exceeds 255", l.label)))?;
            out.extend_from_slice(&(l.mu as f32).to_le_bytes());
            out.extend_from_slice(&(l.sigma as f32).to_le_bytes());
            out.extend_from_slice(&l.n_obs.to_le_bytes());
            out.push(label);
            out.push(quantize_occupancy(l.occupancy) as u8);
        }
        out.extend_from_slice(desc.unwrap_or(&empty).as_bytes());
    }
    debug_assert_eq!(out.len() as u64, file_size(cells.len() as u64, layers as u64, n));
    Ok(out)
}

/// Writes the atlas and returns the number of bytes written.
pub fn save_atlas(atlas: &Atlas, path: &Path) -> Result<u64> {
    let bytes = encode_atlas(atlas)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn error(&self, at: usize, message: String) -> Error {
        Error::Parse {
            offset: at as u64,
            message,
        }
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<AtlasFileHeader> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader<'_>) -> Result<AtlasFileHeader> {
    let magic: [u8; 4] = r.array("magic")?;
    if magic != MAGIC {
        return Err(r.error(0, format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    let resolution = f64::from_le_bytes(r.array("resolution")?);
    let origin = [
        f64::from_le_bytes(r.array("origin x")?),
        f64::from_le_bytes(r.array("origin y")?),
    ];
    let n_segments = r.u8("n_segments")?;
    let bits_per_segment = r.u8("bits_per_segment")?;
    if bits_per_segment != BITS_PER_SEGMENT {
        return Err(r.error(
            r.pos - 1,
            format!("bits_per_segment {bits_per_segment}, expected {BITS_PER_SEGMENT}"),
        ));
    }
    let z_low = f32::from_le_bytes(r.array("z_low")?);
    let z_high = f32::from_le_bytes(r.array("z_high")?);
    let cell_count = u64::from_le_bytes(r.array("cell_count")?);
    let keyframe_count = u64::from_le_bytes(r.array("keyframe_count")?);
    Ok(AtlasFileHeader {
        version,
        resolution,
        origin,
        n_segments,
        bits_per_segment,
        z_low,
        z_high,
        cell_count,
        keyframe_count,
    })
}

/// Parses a whole file image. Any defect fails the load; no partial atlas.
pub fn decode_atlas(bytes: &[u8]) -> Result<Atlas> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_header(&mut r)?;
    let config = AtlasConfig {
        resolution: h.resolution,
        origin: h.origin,
        segments: SegmentConfig {
            z_low: h.z_low as f64,
            z_high: h.z_high as f64,
            n_segments: h.n_segments,
        },
        vertical_datum: 0.0,
        ..AtlasConfig::default()
    };
    let desc_bytes = (h.n_segments as usize).div_ceil(2);
    // Every cell needs at least its header and descriptor; reject absurd counts early.
    let min_cell = (CELL_HEADER_BYTES + desc_bytes) as u64;
    if h.cell_count.saturating_mul(min_cell) > (bytes.len() - r.pos) as u64 {
        return Err(r.error(
            r.pos,
            format!(
                "truncated: {} cells cannot fit in {} bytes",
                h.cell_count,
                bytes.len() - r.pos
            ),
        ));
    }
    let mut columns = Vec::new();
    let mut descriptors = Vec::new();
    let mut previous: Option<CellIndex> = None;
    for _ in 0..h.cell_count {
        let at = r.pos;
        let cell = CellIndex::new(
            i32::from_le_bytes(r.array("cell ix")?),
            i32::from_le_bytes(r.array("cell iy")?),
        );
        if previous.is_some_and(|p| p >= cell) {
            return Err(r.error(at, format!("cell {cell:?} out of order")));
        }
        previous = Some(cell);
        let count = r.u8("layer count")?;
        let mut layers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.pos;
            let mu = f32::from_le_bytes(r.array("layer mu")?) as f64;
            let sigma = f32::from_le_bytes(r.array("layer sigma")?) as f64;
            let n_obs = u32::from_le_bytes(r.array("layer n_obs")?);
            let label = r.u8("layer label")? as u32;
            let occupancy = dequantize_occupancy(r.u8("layer occupancy")? as i8);
            if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) {
                return Err(r.error(at, format!("invalid layer ({mu}, {sigma})")));
            }
            layers.push(SurfaceLayer {
                mu,
                sigma,
                n_obs,
                label,
                occupancy,
            });
        }
        let at = r.pos;
        let raw = r.take(desc_bytes, "descriptor")?;
        let d = Descriptor::from_bytes(raw, h.n_segments).map_err(|e| r.error(at, e.to_string()))?;
        if d.as_bytes().iter().any(|&b| b != 0) {
            descriptors.push((cell, d));
        }
        columns.push((cell, layers));
    }
    if r.pos != bytes.len() {
        return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Atlas::from_stored(config, columns, descriptors, h.keyframe_count).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("invalid header: {e}"),
    })
}

pub fn load_atlas(path: &Path) -> Result<Atlas> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_atlas(&bytes)
}

/// Storage and memory accounting for a map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AtlasStats {
    pub cells: u64,
    pub surface_cells: u64,
    pub layers: u64,
    pub multi_layer_cells: u64,
    pub descriptor_cells: u64,
    pub n_segments: u8,
    /// Packed code bytes over all cells.
    pub descriptor_bytes: u64,
    /// Exact `.lra` size.
    pub serialized_bytes: u64,
    /// One f32 probability per segment per cell.
    pub dense_baseline_bytes: u64,
    /// `descriptor_bytes / dense_baseline_bytes`.
    pub compaction_ratio: f64,
    /// Same cells stored as a dense voxel column (cubic voxels at the map
    /// resolution over the band, one f32 each) plus the cell index.
    pub dense_voxel_dump_bytes: u64,
    /// `serialized_bytes / dense_voxel_dump_bytes`.
    pub file_to_voxel_dump_ratio: f64,
    /// Rough in-memory footprint of layers and descriptors.
    pub memory_estimate_bytes: u64,
    pub keyframes: u64,
}

pub fn stats(atlas: &Atlas) -> AtlasStats {
    let n = atlas.config().segments.n_segments;
    let mut cells: Vec<CellIndex> = atlas
        .columns()
        .keys()
        .chain(atlas.descriptors().keys())
        .copied()
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let cell_count = cells.len() as u64;
    if cell_count == 0 {
        return AtlasStats {
            n_segments: n,
            keyframes: atlas.keyframe_count(),
            ..AtlasStats::default()
        };
    }
    let layers: u64 = atlas.columns().values().map(|c| c.layers.len() as u64).sum();
    let descriptor_bytes = cell_count * (n as u64).div_ceil(2);
    let dense_baseline_bytes = cell_count * n as u64 * 4;
    let band = atlas.band();
    let voxels_per_column = ((band.z_ceil - band.z_floor) / atlas.resolution()).ceil() as u64;
    let dense_voxel_dump_bytes = cell_count * (8 + voxels_per_column * 4);
    let serialized_bytes = file_size(cell_count, layers, n);
    let per_entry = std::mem::size_of::<CellIndex>() as u64;
    let memory_estimate_bytes = atlas.columns().len() as u64
        * (per_entry + std::mem::size_of::<Vec<SurfaceLayer>>() as u64)
        + layers * std::mem::size_of::<SurfaceLayer>() as u64
        + atlas.descriptors().len() as u64 * (per_entry + std::mem::size_of::<Descriptor>() as u64);
    AtlasStats {
        cells: cell_count,
        surface_cells: atlas.columns().len() as u64,
        layers,
        multi_layer_cells: atlas.columns().values().filter(|c| c.layers.len() > 1).count() as u64,
        descriptor_cells: atlas.descriptors().len() as u64,
        n_segments: n,
        descriptor_bytes,
        serialized_bytes,
        dense_baseline_bytes,
        compaction_ratio: descriptor_bytes as f64 / dense_baseline_bytes as f64,
        dense_voxel_dump_bytes,
        file_to_voxel_dump_ratio: serialized_bytes as f64 / dense_voxel_dump_bytes as f64,
        memory_estimate_bytes,
        keyframes: atlas.keyframe_count(),
    }
}

impl fmt::Display for AtlasStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cells                {}", self.cells)?;
        writeln!(f, "surface_cells        {}", self.surface_cells)?;
        writeln!(f, "layers               {}", self.layers)?;
        writeln!(f, "multi_layer_cells    {}", self.multi_layer_cells)?;
        writeln!(f, "descriptor_cells     {}", self.descriptor_cells)?;
        writeln!(f, "n_segments           {}", self.n_segments)?;
        writeln!(f, "keyframes            {}", self.keyframes)?;
        writeln!(f, "descriptor_bytes     {}", self.descriptor_bytes)?;
        writeln!(f, "dense_baseline_bytes {}", self.dense_baseline_bytes)?;
        writeln!(f, "compaction_ratio     {:.6}", self.compaction_ratio)?;
        writeln!(f, "serialized_bytes     {}", self.serialized_bytes)?;
        writeln!(f, "voxel_dump_bytes     {}", self.dense_voxel_dump_bytes)?;
        writeln!(f, "file_to_voxel_dump   {:.6}", self.file_to_voxel_dump_ratio)?;
        write!(f, "memory_estimate      {}", self.memory_estimate_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{GroundCell, Keyframe};
    use crate::geometry::Pose;

    fn empty() -> Atlas {
        Atlas::new(AtlasConfig::default()).unwrap()
    }

    fn sample() -> Atlas {
        let mut a = Atlas::new(AtlasConfig {
            resolution: 0.5,
            ..AtlasConfig::default()
        })
        .unwrap();
        for k in 0..3u64 {
            let ground = (0..40u16)
                .map(|i| GroundCell {
                    cx: 10 + i % 8,
                    cy: 10 + i / 8,
                    centroid: [
                        (i % 8) as f32 * 0.5 - 1.0,
                        (i / 8) as f32 * 0.5 - 1.0,
                        -1.8 + 0.01 * k as f32,
                    ],
                    sigma: 0.15,
                    distance: 1.0 + i as f32 * 0.1,
                    occupancy: -0.8,
                })
                .collect();
            let obstacles = (0..30).map(|i| [4.0, i as f32 * 0.1, -1.0 + i as f32 * 0.1]).collect();
            let kf = Keyframe {
                frame_id: k,
                time: k as f64,
                resolution: 0.5,
                ground,
                obstacles,
            };
            a.integrate(kf, &Pose::from_xyz_yaw(k as f64 * 0.3, 0.0, 1.8, 0.1))
                .unwrap();
        }
        a
    }

    #[test]
    fn empty_atlas_is_header_only() {
        let bytes = encode_atlas(&empty()).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(decode_header(&bytes).unwrap().cell_count, 0);
        let s = stats(&empty());
        assert_eq!(
            (s.cells, s.layers, s.descriptor_bytes, s.dense_baseline_bytes),
            (0, 0, 0, 0)
        );
        assert_eq!(s.compaction_ratio, 0.0);
    }

    #[test]
    fn golden_bytes_for_a_one_cell_map() {
        let layer = SurfaceLayer {
            mu: 1.5,
            sigma: 0.25,
            n_obs: 3,
            label: 1,
            occupancy: -1.0,
        };
        let d = Descriptor::from_codes(&[1, 2, 3, 4, 5, 6, 7, 15]);
        let a = Atlas::from_stored(
            AtlasConfig {
                resolution: 0.2,
                origin: [-1.0, 2.0],
                ..AtlasConfig::default()
            },
            vec![(CellIndex::new(-2, 5), vec![layer])],
            vec![(CellIndex::new(-2, 5), d)],
            7,
        )
        .unwrap();
        let bytes = encode_atlas(&a).unwrap();
        let golden: Vec<u8> = [
            b"LRA1".to_vec(),
            vec![1, 0],
            0.2f64.to_le_bytes().to_vec(),
            (-1.0f64).to_le_bytes().to_vec(),
            2.0f64.to_le_bytes().to_vec(),
            vec![8, 4],
            vec![0x00, 0x00, 0x80, 0xbf], // -1.0f32
            vec![0x00, 0x00, 0xe0, 0x40], // 7.0f32
            vec![1, 0, 0, 0, 0, 0, 0, 0],
            vec![7, 0, 0, 0, 0, 0, 0, 0],
            vec![0xfe, 0xff, 0xff, 0xff, 5, 0, 0, 0, 1],
            vec![0x00, 0x00, 0xc0, 0x3f], // 1.5f32
            vec![0x00, 0x00, 0x80, 0x3e], // 0.25f32
            vec![3, 0, 0, 0, 1, 0xe0],    // n_obs, label, -32 / 32
            vec![0x21, 0x43, 0x65, 0xf7],
        ]
        .concat();
        assert_eq!(bytes, golden);
        let b = decode_atlas(&bytes).unwrap();
        assert_eq!(b.column(CellIndex::new(-2, 5)).unwrap().layers, vec![layer]);
        assert_eq!(b.descriptors()[&CellIndex::new(-2, 5)], d);
        assert_eq!(b.keyframe_count(), 7);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = sample();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.lra");
        let p2 = dir.path().join("b.lra");
        let n1 = save_atlas(&a, &p1).unwrap();
        let b = load_atlas(&p1).unwrap();
        assert!(b.is_read_only());
        let n2 = save_atlas(&b, &p2).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(b.descriptors(), a.descriptors());
        for (c, col) in a.columns() {
            let got = &b.column(*c).unwrap().layers;
            assert_eq!(got.len(), col.layers.len());
            for (x, y) in col.layers.iter().zip(got) {
                assert_eq!(x.mu as f32, y.mu as f32);
                assert_eq!(x.sigma as f32, y.sigma as f32);
                assert_eq!((x.n_obs, x.label), (y.n_obs, y.label));
                assert_eq!(quantize_occupancy(x.occupancy), quantize_occupancy(y.occupancy));
            }
        }
        assert_eq!(stats(&a).serialized_bytes, n1);
    }

    #[test]
    fn size_formula_for_a_thousand_single_layer_cells() {
        let layer = SurfaceLayer {
            mu: 0.0,
            sigma: 0.1,
            n_obs: 1,
            label: 1,
            occupancy: -0.5,
        };
        let cols = (0..1000)
            .map(|i| (CellIndex::new(i % 40, i / 40), vec![layer]))
            .collect();
        let a = Atlas::from_stored(AtlasConfig::default(), cols, vec![], 0).unwrap();
        let bytes = encode_atlas(&a).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + 1000 * (4 + 4 + 1 + 14 + 4));
        let s = stats(&a);
        assert_eq!(s.compaction_ratio, 1.0 / 8.0);
        assert_eq!(s.descriptor_bytes * 8, s.dense_baseline_bytes);
    }

    #[test]
    fn occupancy_quantization_is_idempotent() {
        for q in i8::MIN + 1..=i8::MAX {
            assert_eq!(quantize_occupancy(dequantize_occupancy(q)), q);
        }
        assert_eq!(quantize_occupancy(100.0), 127);
    }

    #[test]
    fn malformed_files_are_rejected_with_offsets() {
        let bytes = encode_atlas(&sample()).unwrap();
        for cut in [0, 3, HEADER_BYTES - 1, HEADER_BYTES + 5, bytes.len() - 1] {
            match decode_atlas(&bytes[..cut]) {
                Err(Error::Parse { offset, message }) => {
                    assert!(offset as usize <= cut, "{offset} {cut}");
                    assert!(message.contains("truncated"), "{message}");
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_atlas(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_atlas(&bad), Err(Error::Parse { offset: 4, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_atlas(&long).is_err());
        let missing = Path::new("/nonexistent/dir/map.lra");
        assert!(matches!(load_atlas(missing), Err(Error::Io { .. })));
        assert!(matches!(save_atlas(&sample(), missing), Err(Error::Io { .. })));
    }
}
