//! Versioned little-endian binary encoding of a [`NetworkRealization`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "ACSN"  u32 version  u64 seed
//! propagation: 7 x f64 (area_radius, annulus_min, annulus_max,
//!              pathloss_exponent, ref_attenuation_db, ref_distance, rician_factor)
//! u32 K
//! K x { u32 devices, u32 antennas, f64 noise_power, f64 max_power, f64 weight, u32 quant_bits }
//! K x (f64 x, f64 y)                       fusion centers
//! for each cluster: N_k x (f64 x, f64 y)   devices
//! for l, n_l, k: M_k x (f64 re, f64 im)    channels
//! ```

use thiserror::Error;

use super::{ClusterSpec, NetworkRealization, Point, Propagation, Topology};
use crate::linalg::{CVec, C64};

pub const SCENARIO_MAGIC: &[u8; 4] = b"ACSN";
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioIoError {
    #[error("not a scenario file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported scenario version {0} (expected {SCENARIO_VERSION})")]
    Version(u32),
    #[error("scenario stream truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed scenario: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn point(&mut self, p: Point) {
        self.f64(p[0]);
        self.f64(p[1]);
    }
}

pub fn serialize_realization(r: &NetworkRealization) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(SCENARIO_MAGIC);
    w.u32(SCENARIO_VERSION);
    w.u64(r.seed);
    let p = &r.propagation;
    for v in [
        p.area_radius,
        p.device_annulus_min,
        p.device_annulus_max,
        p.pathloss_exponent,
        p.ref_attenuation_db,
        p.ref_distance,
        p.rician_factor,
    ] {
        w.f64(v);
    }
    w.u32(r.clusters.len() as u32);
    for c in &r.clusters {
        w.u32(c.devices as u32);
        w.u32(c.antennas as u32);
        w.f64(c.noise_power);
        w.f64(c.max_power);
        w.f64(c.weight);
        w.u32(c.quant_bits);
    }
    for &c in &r.topology.centers {
        w.point(c);
    }
    for devs in &r.topology.devices {
        for &d in devs {
            w.point(d);
        }
    }
    for per_dev in &r.channels {
        for links in per_dev {
            for h in links {
                for &x in h.as_interleaved() {
                    w.f64(x);
                }
            }
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ScenarioIoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ScenarioIoError::Truncated(self.buf.len())),
        }
    }
    fn u32(&mut self) -> Result<u32, ScenarioIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ScenarioIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ScenarioIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn point(&mut self) -> Result<Point, ScenarioIoError> {
        Ok([self.f64()?, self.f64()?])
    }
    /// Refuses counts that cannot possibly fit in the remaining bytes.
    fn count(&mut self, per_item: usize) -> Result<usize, ScenarioIoError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(per_item) > self.buf.len() - self.pos {
            return Err(ScenarioIoError::Truncated(self.buf.len()));
        }
        Ok(n)
    }
}

pub fn deserialize_realization(bytes: &[u8]) -> Result<NetworkRealization, ScenarioIoError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(ScenarioIoError::Truncated(bytes.len()));
    }
    if r.take(4)? != SCENARIO_MAGIC {
        return Err(ScenarioIoError::BadMagic);
    }
    let version = r.u32()?;
    if version != SCENARIO_VERSION {
        return Err(ScenarioIoError::Version(version));
    }
    let seed = r.u64()?;
    let propagation = Propagation {
        area_radius: r.f64()?,
        device_annulus_min: r.f64()?,
        device_annulus_max: r.f64()?,
        pathloss_exponent: r.f64()?,
        ref_attenuation_db: r.f64()?,
        ref_distance: r.f64()?,
        rician_factor: r.f64()?,
    };
    let k = r.count(36)?;
    if k == 0 {
        return Err(ScenarioIoError::Malformed("zero clusters".into()));
    }
    let mut clusters = Vec::with_capacity(k);
    for _ in 0..k {
        let devices = r.u32()? as usize;
        let antennas = r.u32()? as usize;
        let spec = ClusterSpec {
            devices,
            antennas,
            noise_power: r.f64()?,
            max_power: r.f64()?,
            weight: r.f64()?,
            quant_bits: r.u32()?,
        };
        if devices == 0 || antennas == 0 {
            return Err(ScenarioIoError::Malformed("empty cluster".into()));
        }
        clusters.push(spec);
    }
    let total_devices: usize = clusters.iter().map(|c| c.devices).sum();
    let total_antennas: usize = clusters.iter().map(|c| c.antennas).sum();
    let expected = 16 * (k + total_devices) + 16 * total_devices * total_antennas;
    if bytes.len() - r.pos < expected {
        return Err(ScenarioIoError::Truncated(bytes.len()));
    }
    let centers = (0..k).map(|_| r.point()).collect::<Result<Vec<_>, _>>()?;
    let devices = clusters
        .iter()
        .map(|c| (0..c.devices).map(|_| r.point()).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut channels = Vec::with_capacity(k);
    for c in &clusters {
        let mut per_dev = Vec::with_capacity(c.devices);
        for _ in 0..c.devices {
            let mut links = Vec::with_capacity(k);
            for ck in &clusters {
                let h = (0..ck.antennas)
                    .map(|_| Ok(C64::new(r.f64()?, r.f64()?)))
                    .collect::<Result<Vec<_>, ScenarioIoError>>()?;
                links.push(CVec::new(h));
            }
            per_dev.push(links);
        }
        channels.push(per_dev);
    }
    if r.pos != bytes.len() {
        return Err(ScenarioIoError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(NetworkRealization::from_parts(
        seed,
        propagation,
        clusters,
        Topology { centers, devices },
        channels,
    ))
}

impl NetworkRealization {
    pub fn save(&self, path: &std::path::Path) -> Result<(), ScenarioIoError> {
        std::fs::write(path, serialize_realization(self))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioIoError> {
        deserialize_realization(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;
    use proptest::prelude::*;

    fn sample() -> NetworkRealization {
        NetworkRealization::generate(&ScenarioConfig::uniform(3, 2, 4), 17).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let r = sample();
        let back = deserialize_realization(&serialize_realization(&r)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn truncated_stream_rejected() {
        let bytes = serialize_realization(&sample());
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(deserialize_realization(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = serialize_realization(&sample());
        bytes[0] = b'X';
        assert!(matches!(deserialize_realization(&bytes), Err(ScenarioIoError::BadMagic)));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = serialize_realization(&sample());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(deserialize_realization(&bytes), Err(ScenarioIoError::Version(2))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = serialize_realization(&sample());
        bytes.push(0);
        assert!(matches!(
            deserialize_realization(&bytes),
            Err(ScenarioIoError::Malformed(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_any_realization(k in 1usize..4, n in 1usize..4, m in 1usize..5, seed: u64) {
            let r = NetworkRealization::generate(&ScenarioConfig::uniform(k, n, m), seed).unwrap();
            let bytes = serialize_realization(&r);
            let back = deserialize_realization(&bytes).unwrap();
            prop_assert_eq!(serialize_realization(&back), bytes);
            prop_assert_eq!(back, r);
        }
    }
}
