//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and `#` comments are ignored. Every key may appear at most
//! once; unknown keys are errors and `seed` has no default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use codecforge_core::blocks::{BlockConfig, BlockKind, DimSchedule};
use codecforge_core::graph::{build_topology, GraphSpec, TopologyKind};
use codecforge_core::point::DEFAULT_RATIOS;
use codecforge_core::supervision::SupervisionMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub topology: TopologyKind,
    pub levels: usize,
    pub block: BlockKind,
    pub block_layers: usize,
    pub k: usize,
    pub dims: Vec<usize>,
    pub width_mult: usize,
    pub wide: bool,
    pub supervision: SupervisionMode,
    pub ratios: Vec<usize>,
    /// Input channels: 3 (`xyz`) or 6 (`xyz` + `rgb`).
    pub features: usize,
    pub points: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
}

pub const KEYS: [&str; 19] = [
    "topology",
    "levels",
    "block",
    "block_layers",
    "k",
    "dims",
    "width_mult",
    "wide",
    "supervision",
    "ratios",
    "features",
    "points",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "epochs",
    "seed",
];

impl TrainConfig {
    /// Desk-scale defaults around a mandatory seed.
    pub fn new(seed: u64) -> Self {
        Self {
            topology: TopologyKind::UNext,
            levels: 3,
            block: BlockKind::SharedMlp,
            block_layers: 2,
            k: 16,
            dims: DimSchedule::default().row_dims,
            width_mult: 1,
            wide: false,
            supervision: SupervisionMode::MultiLevel,
            ratios: DEFAULT_RATIOS.to_vec(),
            features: 6,
            points: 4096,
            batch_size: 4,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            seed,
        }
    }

    pub fn dim_schedule(&self) -> DimSchedule {
        let dims = DimSchedule {
            row_dims: self.dims.clone(),
            width_mult: self.width_mult,
            extra: Vec::new(),
        };
        if self.wide {
            dims.wide()
        } else {
            dims
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            kind: self.block,
            k: self.k,
            layers: self.block_layers,
        }
    }

    /// The supervised graph this configuration trains.
    pub fn graph(&self) -> Result<GraphSpec> {
        let mut g = build_topology(self.topology, self.levels, &self.dim_schedule(), self.block_config())?;
        g.supervise(self.supervision);
        Ok(g)
    }

    /// Sampling ratios for rows `0..=levels`.
    pub fn hierarchy_ratios(&self) -> &[usize] {
        &self.ratios[..=self.levels]
    }

    /// Fewest points a sample may have for the hierarchy to reach row `L`.
    pub fn min_points(&self) -> usize {
        self.hierarchy_ratios().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        for (name, v) in [
            ("levels", self.levels),
            ("block_layers", self.block_layers),
            ("k", self.k),
            ("width_mult", self.width_mult),
            ("points", self.points),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.dims.iter().any(|&d| d == 0) || self.dims.is_empty() {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.levels + 1 > self.dims.len() {
            return bad(format!("levels {} needs {} dims, got {}", self.levels, self.levels + 1, self.dims.len()));
        }
        if self.levels + 1 > self.ratios.len() {
            return bad(format!(
                "levels {} needs {} ratios, got {}",
                self.levels,
                self.levels + 1,
                self.ratios.len()
            ));
        }
        if self.ratios.iter().any(|&r| r == 0) {
            return bad(format!("ratios must be positive, got {:?}", self.ratios));
        }
        if !matches!(self.features, 3 | 6) {
            return bad(format!("features must be 3 or 6, got {}", self.features));
        }
        if self.points < self.min_points() {
            return bad(format!(
                "{} points cannot be sampled through ratios {:?}",
                self.points,
                self.hierarchy_ratios()
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a String");
        kv("topology", self.topology.name().into());
        kv("levels", self.levels.to_string());
        kv("block", self.block.name().into());
        kv("block_layers", self.block_layers.to_string());
        kv("k", self.k.to_string());
        kv("dims", list(&self.dims));
        kv("width_mult", self.width_mult.to_string());
        kv("wide", self.wide.to_string());
        kv("supervision", self.supervision.name().into());
        kv("ratios", list(&self.ratios));
        kv("features", self.features.to_string());
        kv("points", self.points.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("epsilon", format!("{:?}", self.epsilon));
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        out
    }

    /// [`TrainConfig::to_text`] with comments on full-scale values.
    pub fn to_documented_text(&self) -> String {
        let mut out = String::from(
            "# codecforge training configuration\n\
             # full scale: points = 40960, batch_size = 4, k = 16, lr = 0.01, levels = 4\n\
             # desk scale keeps points around 4096 and levels <= 3\n",
        );
        out.push_str(&self.to_text());
        out
    }

    /// SHA-256 of everything but `epochs`, which may grow on resume.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("epochs "))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::parse(lineno, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|&&k| k == key)
                .ok_or_else(|| HarnessError::parse(lineno, format!("unknown key `{key}`")))?;
            if seen.insert(known, (lineno, value)).is_some() {
                return Err(HarnessError::parse(lineno, format!("duplicate key `{key}`")));
            }
        }
        let seed = match seen.get("seed") {
            Some(&(line, v)) => parse_value(line, "seed", v)?,
            None => return Err(HarnessError::Config("`seed` is mandatory".into())),
        };
        let mut cfg = Self::new(seed);
        for (&key, &(line, v)) in &seen {
            match key {
                "topology" => cfg.topology = core_value(line, v.parse())?,
                "levels" => cfg.levels = parse_value(line, key, v)?,
                "block" => cfg.block = core_value(line, v.parse())?,
                "block_layers" => cfg.block_layers = parse_value(line, key, v)?,
                "k" => cfg.k = parse_value(line, key, v)?,
                "dims" => cfg.dims = parse_list(line, key, v)?,
                "width_mult" => cfg.width_mult = parse_value(line, key, v)?,
                "wide" => cfg.wide = parse_value(line, key, v)?,
                "supervision" => cfg.supervision = core_value(line, v.parse())?,
                "ratios" => cfg.ratios = parse_list(line, key, v)?,
                "features" => cfg.features = parse_value(line, key, v)?,
                "points" => cfg.points = parse_value(line, key, v)?,
                "batch_size" => cfg.batch_size = parse_value(line, key, v)?,
                "lr" => cfg.lr = parse_value(line, key, v)?,
                "beta1" => cfg.beta1 = parse_value(line, key, v)?,
                "beta2" => cfg.beta2 = parse_value(line, key, v)?,
                "epsilon" => cfg.epsilon = parse_value(line, key, v)?,
                "epochs" => cfg.epochs = parse_value(line, key, v)?,
                "seed" => {}
                _ => unreachable!("keys are checked against KEYS"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Parse { line, message } => HarnessError::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }
}

fn parse_value<V: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| HarnessError::parse(line, format!("bad value `{v}` for `{key}`")))
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_value(line, key, p.trim())).collect()
}

fn core_value<V>(line: usize, r: codecforge_core::Result<V>) -> Result<V> {
    r.map_err(|e| HarnessError::parse(line, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::new(17);
        cfg.topology = TopologyKind::UNetPlusPlus;
        cfg.block = BlockKind::LocalAgg;
        cfg.lr = 0.003;
        cfg.wide = true;
        cfg.supervision = SupervisionMode::Lateral;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(TrainConfig::parse(&cfg.to_documented_text()).unwrap(), cfg);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(TrainConfig::parse("levels = 2\n"), Err(HarnessError::Config(m)) if m.contains("seed")));
        let cfg = TrainConfig::parse("seed = 5 # trailing comment\n\n").unwrap();
        assert_eq!(cfg, TrainConfig::new(5));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        match TrainConfig::parse("seed = 1\nmomentum = 0.9\n") {
            Err(HarnessError::Parse { line: 2, message }) => assert!(message.contains("momentum")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            TrainConfig::parse("seed = 1\nseed = 2\n"),
            Err(HarnessError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            TrainConfig::parse("seed = 1\ntopology = resnet\n"),
            Err(HarnessError::Parse { line: 2, .. })
        ));
        assert!(TrainConfig::parse("seed\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "levels = 0",
            "levels = 5",
            "points = 100",
            "features = 4",
            "lr = -1",
            "beta2 = 1.0",
            "batch_size = 0",
            "ratios = 4,0,4,4,2",
        ] {
            assert!(TrainConfig::parse(&format!("seed = 1\n{bad}\n")).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_ignores_epochs_only() {
        let a = TrainConfig::new(3);
        let mut b = a.clone();
        b.epochs += 10;
        assert_eq!(a.hash(), b.hash());
        b.lr = 0.02;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn graph_applies_supervision() {
        let mut cfg = TrainConfig::new(1);
        cfg.levels = 2;
        cfg.supervision = SupervisionMode::NoDs;
        assert!(cfg.graph().unwrap().supervised.is_empty());
        assert_eq!(cfg.hierarchy_ratios(), &[4, 4, 4]);
        assert_eq!(cfg.min_points(), 64);
    }
}
