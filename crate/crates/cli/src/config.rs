//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use accelplug::{AcceleratorProfile, AlgoKind, BlockPolicy, ComputationModel};
use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProfileChoice {
    CpuLike,
    GpuLike,
    Custom(AcceleratorProfile),
}

impl ProfileChoice {
    pub fn profile(self) -> AcceleratorProfile {
        match self {
            ProfileChoice::CpuLike => AcceleratorProfile::cpu_like(),
            ProfileChoice::GpuLike => AcceleratorProfile::gpu_like(),
            ProfileChoice::Custom(p) => p,
        }
    }
}

impl FromStr for ProfileChoice {
    type Err = anyhow::Error;

    /// `cpu-like`, `gpu-like` or `custom:LANES,PER_UNIT_COST,CALL_OVERHEAD`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu-like" => Ok(ProfileChoice::CpuLike),
            "gpu-like" => Ok(ProfileChoice::GpuLike),
            _ => {
                let Some(rest) = s.strip_prefix("custom:") else {
                    bail!("unknown daemon profile {s:?} (cpu-like, gpu-like or custom:LANES,PER_UNIT,OVERHEAD)");
                };
                let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    bail!("custom profile needs LANES,PER_UNIT_COST,CALL_OVERHEAD, got {rest:?}");
                }
                let p = AcceleratorProfile {
                    lanes: parts[0].parse().context("lanes")?,
                    per_unit_cost: parts[1].parse().context("per_unit_cost")?,
                    call_overhead: parts[2].parse().context("call_overhead")?,
                };
                p.validate()?;
                Ok(ProfileChoice::Custom(p))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Balance {
    None,
    Data,
    Capacity,
}

impl FromStr for Balance {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Balance::None),
            "data" => Ok(Balance::Data),
            "capacity" => Ok(Balance::Capacity),
            other => bail!("unknown balance mode {other:?} (none, data or capacity)"),
        }
    }
}

pub fn parse_block_size(s: &str) -> Result<BlockPolicy> {
    if s == "auto" {
        return Ok(BlockPolicy::Auto);
    }
    let b: usize = s.parse().with_context(|| format!("block size {s:?} is neither auto nor an integer"))?;
    if b == 0 {
        bail!("block size must be at least 1");
    }
    Ok(BlockPolicy::Fixed(b))
}

/// Keys accepted in a config file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub algo: Option<String>,
    pub graph: Option<PathBuf>,
    pub partitions: Option<usize>,
    pub daemons_per_node: Option<usize>,
    pub daemon_profile: Option<String>,
    pub model: Option<String>,
    pub block_size: Option<toml::Value>,
    pub enable_cache: Option<bool>,
    pub cache_capacity: Option<usize>,
    pub enable_skip: Option<bool>,
    pub balance: Option<String>,
    pub seed: Option<u64>,
    pub metrics_out: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub max_iterations: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub algo: AlgoKind,
    pub graph: PathBuf,
    pub partitions: usize,
    pub daemons_per_node: usize,
    pub daemon_profile: ProfileChoice,
    pub model: ComputationModel,
    pub block_size: BlockPolicy,
    pub enable_cache: bool,
    pub cache_capacity: usize,
    pub enable_skip: bool,
    pub balance: Balance,
    pub seed: u64,
    pub metrics_out: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub max_iterations: Option<usize>,
}

/// Values given on the command line; each wins over the file.
#[derive(Debug, Default)]
pub struct FlagValues {
    pub algo: Option<String>,
    pub graph: Option<PathBuf>,
    pub partitions: Option<usize>,
    pub daemons_per_node: Option<usize>,
    pub daemon_profile: Option<String>,
    pub model: Option<String>,
    pub block_size: Option<String>,
    pub enable_cache: bool,
    pub cache_capacity: Option<usize>,
    pub enable_skip: bool,
    pub balance: Option<String>,
    pub seed: Option<u64>,
    pub metrics_out: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub max_iterations: Option<usize>,
}

impl RunConfig {
    pub fn resolve(flags: FlagValues, file: FileConfig) -> Result<Self> {
        let algo = flags.algo.or(file.algo).context("--algo is required")?;
        let graph = flags.graph.or(file.graph).context("--graph is required")?;
        let block_size = match (flags.block_size, file.block_size) {
            (Some(s), _) => parse_block_size(&s)?,
            (None, Some(toml::Value::Integer(b))) => {
                parse_block_size(&b.to_string())?
            }
            (None, Some(toml::Value::String(s))) => parse_block_size(&s)?,
            (None, Some(other)) => bail!("block_size must be \"auto\" or an integer, got {other}"),
            (None, None) => BlockPolicy::Auto,
        };
        let cfg = RunConfig {
            algo: algo.parse()?,
            graph,
            partitions: flags.partitions.or(file.partitions).unwrap_or(1),
            daemons_per_node: flags.daemons_per_node.or(file.daemons_per_node).unwrap_or(1),
            daemon_profile: flags
                .daemon_profile
                .or(file.daemon_profile)
                .map_or(Ok(ProfileChoice::CpuLike), |s| s.parse())?,
            model: flags.model.or(file.model).map_or(Ok(ComputationModel::Bsp), |s| s.parse())?,
            block_size,
            enable_cache: flags.enable_cache || file.enable_cache.unwrap_or(false),
            cache_capacity: flags.cache_capacity.or(file.cache_capacity).unwrap_or(1024),
            enable_skip: flags.enable_skip || file.enable_skip.unwrap_or(false),
            balance: flags.balance.or(file.balance).map_or(Ok(Balance::None), |s| s.parse())?,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            metrics_out: flags.metrics_out.or(file.metrics_out),
            dump: flags.dump.or(file.dump),
            max_iterations: flags.max_iterations.or(file.max_iterations),
        };
        if cfg.partitions == 0 {
            bail!("--partitions must be at least 1");
        }
        if cfg.daemons_per_node == 0 {
            bail!("--daemons-per-node must be at least 1");
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_parse() {
        assert_eq!("cpu-like".parse::<ProfileChoice>().unwrap().profile().lanes, 20);
        assert_eq!("gpu-like".parse::<ProfileChoice>().unwrap().profile().lanes, 1024);
        let c = "custom:8,0.25,3".parse::<ProfileChoice>().unwrap().profile();
        assert_eq!((c.lanes, c.per_unit_cost, c.call_overhead), (8, 0.25, 3.0));
        assert!("custom:0,1,1".parse::<ProfileChoice>().is_err());
        assert!("custom:1,2".parse::<ProfileChoice>().is_err());
        assert!("tpu".parse::<ProfileChoice>().is_err());
    }

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str(
            "algo = \"lp\"\ngraph = \"g.el\"\npartitions = 4\nblock_size = 16\nenable_skip = true\n",
        )
        .unwrap();
        let flags = FlagValues {
            partitions: Some(2),
            ..FlagValues::default()
        };
        let cfg = RunConfig::resolve(flags, file).unwrap();
        assert_eq!(cfg.algo, AlgoKind::Lp);
        assert_eq!(cfg.partitions, 2);
        assert_eq!(cfg.block_size, BlockPolicy::Fixed(16));
        assert!(cfg.enable_skip);
        assert!(!cfg.enable_cache);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("colour = 3\n").is_err());
    }

    #[test]
    fn zero_partitions_is_an_error() {
        let flags = FlagValues {
            algo: Some("sssp".into()),
            graph: Some("g".into()),
            partitions: Some(0),
            ..FlagValues::default()
        };
        assert!(RunConfig::resolve(flags, FileConfig::default()).is_err());
    }

    #[test]
    fn block_size_forms() {
        assert_eq!(parse_block_size("auto").unwrap(), BlockPolicy::Auto);
        assert_eq!(parse_block_size("7").unwrap(), BlockPolicy::Fixed(7));
        assert!(parse_block_size("0").is_err());
        assert!(parse_block_size("big").is_err());
    }
}
