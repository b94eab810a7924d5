//! Network topologies and Rician-fading channel realizations.
//!
//! A [`ScenarioConfig`] describes the deployment (cluster count, devices,
//! antennas, geometry, propagation and radio parameters). Per-cluster
//! quantities accept either one value for every cluster or an explicit list.
//! [`NetworkRealization::generate`] resolves the config into concrete
//! positions and channel vectors for a given seed.

mod io;

pub use io::{deserialize_realization, serialize_realization, ScenarioIoError, SCENARIO_MAGIC, SCENARIO_VERSION};

use std::f64::consts::PI;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CVec, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid scenario config: {0}")]
    Invalid(String),
    #[error("per-cluster list `{field}` has {found} entries, expected {expected}")]
    ListLength {
        field: &'static str,
        expected: usize,
        found: usize,
    },
}

/// A per-cluster parameter: one shared value or one value per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCluster<T> {
    Uniform(T),
    List(Vec<T>),
}

impl<T: Copy> PerCluster<T> {
    pub fn get(&self, k: usize) -> T {
        match self {
            PerCluster::Uniform(v) => *v,
            PerCluster::List(v) => v[k],
        }
    }

    fn check_len(&self, field: &'static str, expected: usize) -> Result<(), ConfigError> {
        match self {
            PerCluster::List(v) if v.len() != expected => Err(ConfigError::ListLength {
                field,
                expected,
                found: v.len(),
            }),
            _ => Ok(()),
        }
    }

    fn values(&self, k: usize) -> Vec<T> {
        (0..k).map(|i| self.get(i)).collect()
    }
}

impl<T> From<T> for PerCluster<T> {
    fn from(v: T) -> Self {
        PerCluster::Uniform(v)
    }
}

/// Deployment and radio parameters. Distances in meters, powers in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_clusters: usize,
    pub devices_per_cluster: PerCluster<usize>,
    pub antennas: PerCluster<usize>,
    pub area_radius: f64,
    pub device_annulus_min: f64,
    pub device_annulus_max: f64,
    pub pathloss_exponent: f64,
    pub ref_attenuation_db: f64,
    pub ref_distance: f64,
    /// Power ratio between line-of-sight and scattered components (linear).
    pub rician_factor: f64,
    pub noise_power: PerCluster<f64>,
    /// Maximum transmit power of every device in the cluster.
    pub max_power: PerCluster<f64>,
    pub weights: PerCluster<f64>,
    pub quant_bits: PerCluster<u32>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_clusters: 5,
            devices_per_cluster: 5.into(),
            antennas: 8.into(),
            area_radius: 2000.0,
            device_annulus_min: 100.0,
            device_annulus_max: 1000.0,
            pathloss_exponent: 2.2,
            ref_attenuation_db: -30.0,
            ref_distance: 1.0,
            rician_factor: 5.0,
            // -90 dBm
            noise_power: 1e-12.into(),
            max_power: 1.0.into(),
            weights: 1.0.into(),
            quant_bits: 2.into(),
        }
    }
}

impl ScenarioConfig {
    /// Uniform config with `k` clusters of `n` devices and `m` antennas,
    /// other fields at their defaults.
    pub fn uniform(k: usize, n: usize, m: usize) -> Self {
        ScenarioConfig {
            num_clusters: k,
            devices_per_cluster: n.into(),
            antennas: m.into(),
            ..Default::default()
        }
    }

    /// Scales every distance in the deployment by `ratio`.
    pub fn scaled_area(&self, ratio: f64) -> Self {
        ScenarioConfig {
            area_radius: self.area_radius * ratio,
            device_annulus_min: self.device_annulus_min * ratio,
            device_annulus_max: self.device_annulus_max * ratio,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let k = self.num_clusters;
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if k == 0 {
            return bad("num_clusters must be at least 1");
        }
        self.devices_per_cluster.check_len("devices_per_cluster", k)?;
        self.antennas.check_len("antennas", k)?;
        self.noise_power.check_len("noise_power", k)?;
        self.max_power.check_len("max_power", k)?;
        self.weights.check_len("weights", k)?;
        self.quant_bits.check_len("quant_bits", k)?;
        for c in 0..k {
            if self.devices_per_cluster.get(c) == 0 {
                return bad("devices_per_cluster must be at least 1");
            }
            if self.antennas.get(c) == 0 {
                return bad("antennas must be at least 1");
            }
            if !(self.noise_power.get(c) > 0.0) {
                return bad("noise_power must be positive");
            }
            if !(self.max_power.get(c) > 0.0) {
                return bad("max_power must be positive");
            }
            if !(self.weights.get(c) >= 0.0) {
                return bad("weights must be nonnegative");
            }
            if self.quant_bits.get(c) == 0 {
                return bad("quant_bits must be at least 1");
            }
        }
        if !(self.device_annulus_min > 0.0
            && self.device_annulus_min <= self.device_annulus_max
            && self.device_annulus_max <= self.area_radius)
        {
            return bad("need 0 < device_annulus_min <= device_annulus_max <= area_radius");
        }
        if !(self.rician_factor >= 0.0) {
            return bad("rician_factor must be nonnegative");
        }
        if !(self.ref_distance > 0.0) {
            return bad("ref_distance must be positive");
        }
        if !self.pathloss_exponent.is_finite() || !self.ref_attenuation_db.is_finite() {
            return bad("propagation parameters must be finite");
        }
        Ok(())
    }

    pub fn clusters(&self) -> Vec<ClusterSpec> {
        let k = self.num_clusters;
        let n = self.devices_per_cluster.values(k);
        let m = self.antennas.values(k);
        let noise = self.noise_power.values(k);
        let p = self.max_power.values(k);
        let w = self.weights.values(k);
        let q = self.quant_bits.values(k);
        (0..k)
            .map(|c| ClusterSpec {
                devices: n[c],
                antennas: m[c],
                noise_power: noise[c],
                max_power: p[c],
                weight: w[c],
                quant_bits: q[c],
            })
            .collect()
    }

    pub fn propagation(&self) -> Propagation {
        Propagation {
            area_radius: self.area_radius,
            device_annulus_min: self.device_annulus_min,
            device_annulus_max: self.device_annulus_max,
            pathloss_exponent: self.pathloss_exponent,
            ref_attenuation_db: self.ref_attenuation_db,
            ref_distance: self.ref_distance,
            rician_factor: self.rician_factor,
        }
    }
}

/// Resolved parameters of one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub devices: usize,
    pub antennas: usize,
    pub noise_power: f64,
    pub max_power: f64,
    pub weight: f64,
    pub quant_bits: u32,
}

impl ClusterSpec {
    /// `1 / (Q_k + log2 N_k)`, the rate normalization of the cluster.
    pub fn rate_scale(&self) -> f64 {
        1.0 / (self.quant_bits as f64 + (self.devices as f64).log2())
    }
}

/// Geometry and propagation parameters a realization was drawn with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    pub area_radius: f64,
    pub device_annulus_min: f64,
    pub device_annulus_max: f64,
    pub pathloss_exponent: f64,
    pub ref_attenuation_db: f64,
    pub ref_distance: f64,
    pub rician_factor: f64,
}

impl Propagation {
    /// Large-scale power gain at distance `d`; distances below the reference
    /// distance are clamped to it.
    pub fn gain(&self, d: f64) -> f64 {
        let d = d.max(self.ref_distance);
        10f64.powf(self.ref_attenuation_db / 10.0) * (d / self.ref_distance).powf(-self.pathloss_exponent)
    }
}

pub type Point = [f64; 2];

/// Device and fusion-center positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub centers: Vec<Point>,
    pub devices: Vec<Vec<Point>>,
}

/// Identifies device `index` of cluster `cluster`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceId {
    pub cluster: usize,
    pub index: usize,
}

/// A concrete network: positions plus every device-to-center channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkRealization {
    pub seed: u64,
    pub propagation: Propagation,
    pub clusters: Vec<ClusterSpec>,
    pub topology: Topology,
    /// `channels[l][n][k]` is the channel from device `n` of cluster `l`
    /// to fusion center `k`, of length `M_k`.
    pub(crate) channels: Vec<Vec<Vec<CVec>>>,
    offsets: Vec<usize>,
}

/// Derives an independent stream seed from a master seed (SplitMix64).
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TOPOLOGY_STREAM: u64 = 1;
const FADING_STREAM: u64 = 2;

fn uniform_in_annulus(rng: &mut impl Rng, center: Point, r_min: f64, r_max: f64) -> Point {
    let u: f64 = rng.random();
    let r = (u * (r_max * r_max - r_min * r_min) + r_min * r_min).sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    [center[0] + r * theta.cos(), center[1] + r * theta.sin()]
}

/// Places fusion centers uniformly in the disk and each device uniformly in
/// the annulus around its own fusion center.
pub fn sample_topology(cfg: &ScenarioConfig, seed: u64) -> Result<Topology, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(cfg.num_clusters);
    let mut devices = Vec::with_capacity(cfg.num_clusters);
    for _ in 0..cfg.num_clusters {
        centers.push(uniform_in_annulus(&mut rng, [0.0, 0.0], 0.0, cfg.area_radius));
    }
    for (k, &c) in centers.iter().enumerate() {
        let n = cfg.devices_per_cluster.get(k);
        devices.push(
            (0..n)
                .map(|_| uniform_in_annulus(&mut rng, c, cfg.device_annulus_min, cfg.device_annulus_max))
                .collect(),
        );
    }
    Ok(Topology { centers, devices })
}

fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Rician channel vector of length `m` for a link of length `d` whose
/// arrival bearing at the array is `bearing`.
fn rician_channel(rng: &mut impl Rng, prop: &Propagation, d: f64, bearing: f64, m: usize) -> CVec {
    let amp = prop.gain(d).sqrt();
    let kappa = prop.rician_factor;
    let los = (kappa / (1.0 + kappa)).sqrt();
    let nlos = (1.0 / (1.0 + kappa)).sqrt();
    let s = bearing.sin();
    (0..m)
        .map(|i| {
            let steer = C64::from_polar(1.0, PI * i as f64 * s);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let scatter = C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
            (steer * los + scatter * nlos) * amp
        })
        .collect()
}

/// Draws every channel of a topology.
pub fn generate_channels(
    topology: Topology,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<NetworkRealization, ConfigError> {
    cfg.validate()?;
    let clusters = cfg.clusters();
    if topology.centers.len() != clusters.len()
        || topology.devices.iter().zip(&clusters).any(|(d, c)| d.len() != c.devices)
    {
        return Err(ConfigError::Invalid("topology does not match config".into()));
    }
    let prop = cfg.propagation();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = Vec::with_capacity(clusters.len());
    for devs in &topology.devices {
        let mut per_device = Vec::with_capacity(devs.len());
        for &p in devs {
            let mut links = Vec::with_capacity(clusters.len());
            for (k, &c) in topology.centers.iter().enumerate() {
                let d = distance(p, c);
                if d < prop.ref_distance {
                    warn!("link distance {d} m below reference distance, clamped");
                }
                let bearing = (p[1] - c[1]).atan2(p[0] - c[0]);
                links.push(rician_channel(&mut rng, &prop, d, bearing, clusters[k].antennas));
            }
            per_device.push(links);
        }
        channels.push(per_device);
    }
    Ok(NetworkRealization::from_parts(seed, prop, clusters, topology, channels))
}

impl NetworkRealization {
    /// Topology and fading drawn from independent streams of `master_seed`.
    pub fn generate(cfg: &ScenarioConfig, master_seed: u64) -> Result<Self, ConfigError> {
        let topo = sample_topology(cfg, split_seed(master_seed, TOPOLOGY_STREAM))?;
        let mut r = generate_channels(topo, cfg, split_seed(master_seed, FADING_STREAM))?;
        r.seed = master_seed;
        Ok(r)
    }

    pub(crate) fn from_parts(
        seed: u64,
        propagation: Propagation,
        clusters: Vec<ClusterSpec>,
        topology: Topology,
        channels: Vec<Vec<Vec<CVec>>>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        let mut acc = 0;
        for c in &clusters {
            offsets.push(acc);
            acc += c.devices;
        }
        offsets.push(acc);
        NetworkRealization {
            seed,
            propagation,
            clusters,
            topology,
            channels,
            offsets,
        }
    }

    /// Builds a realization from explicit channels, mainly for tests and
    /// hand-constructed instances. `channels[l][n][k]` as in the struct.
    pub fn from_channels(clusters: Vec<ClusterSpec>, channels: Vec<Vec<Vec<CVec>>>) -> Self {
        assert_eq!(channels.len(), clusters.len());
        for (l, per_dev) in channels.iter().enumerate() {
            assert_eq!(per_dev.len(), clusters[l].devices);
            for links in per_dev {
                assert_eq!(links.len(), clusters.len());
                for (k, h) in links.iter().enumerate() {
                    assert_eq!(h.len(), clusters[k].antennas);
                }
            }
        }
        let topology = Topology {
            centers: vec![[0.0, 0.0]; clusters.len()],
            devices: clusters.iter().map(|c| vec![[0.0, 0.0]; c.devices]).collect(),
        };
        let prop = ScenarioConfig::default().propagation();
        Self::from_parts(0, prop, clusters, topology, channels)
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_devices(&self) -> usize {
        self.offsets[self.clusters.len()]
    }

    pub fn cluster(&self, k: usize) -> &ClusterSpec {
        &self.clusters[k]
    }

    /// Channel from device `n` of cluster `l` to fusion center `k`.
    pub fn channel(&self, l: usize, n: usize, k: usize) -> &CVec {
        &self.channels[l][n][k]
    }

    /// Global index of a device, ordering clusters then devices.
    pub fn flat_index(&self, id: DeviceId) -> usize {
        self.offsets[id.cluster] + id.index
    }

    /// Range of global indices belonging to cluster `k`.
    pub fn cluster_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn device_ids(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(l, c)| (0..c.devices).map(move |n| DeviceId { cluster: l, index: n }))
    }

    /// Cluster of each global device index.
    pub fn cluster_of(&self) -> Vec<usize> {
        self.device_ids().map(|d| d.cluster).collect()
    }

    /// Same network with clusters reordered: new cluster `i` is old cluster
    /// `perm[i]`. Channel vectors follow their endpoints.
    pub fn permute_clusters(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_clusters());
        let clusters = perm.iter().map(|&p| self.clusters[p]).collect();
        let channels = perm
            .iter()
            .map(|&l| {
                self.channels[l]
                    .iter()
                    .map(|links| perm.iter().map(|&k| links[k].clone()).collect())
                    .collect()
            })
            .collect();
        let topology = Topology {
            centers: perm.iter().map(|&p| self.topology.centers[p]).collect(),
            devices: perm.iter().map(|&p| self.topology.devices[p].clone()).collect(),
        };
        Self::from_parts(self.seed, self.propagation, clusters, topology, channels)
    }

    /// Same network with the devices of cluster `l` reordered: new device
    /// `i` is old device `perm[i]`.
    pub fn permute_devices(&self, l: usize, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.clusters[l].devices);
        let mut out = self.clone();
        out.channels[l] = perm.iter().map(|&p| self.channels[l][p].clone()).collect();
        out.topology.devices[l] = perm.iter().map(|&p| self.topology.devices[l][p]).collect();
        out
    }

    pub fn is_finite(&self) -> bool {
        self.channels
            .iter()
            .flatten()
            .flatten()
            .all(|h| h.is_finite())
    }
}
