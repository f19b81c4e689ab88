//! Run configuration: a flat `key = value` file mirrored by command-line
//! flags, with flags taking precedence over file values.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use divatt::error::{Error, Result};
use divatt::HyperParams;

/// Which model the run trains or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Plain multi-head attention baseline; no diversity penalty.
    Mha,
    /// Diversity-constrained attention, the single-model default.
    #[default]
    Mhad,
    /// Three models trained on labeled source data alone.
    Tri1,
    /// Full tri-training with pseudo-labeled unlabeled source data.
    Tri2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mha => "mha",
            Variant::Mhad => "mhad",
            Variant::Tri1 => "tri1",
            Variant::Tri2 => "tri2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "mha" => Ok(Variant::Mha),
            "mhad" => Ok(Variant::Mhad),
            "tri1" => Ok(Variant::Tri1),
            "tri2" => Ok(Variant::Tri2),
            other => Err(Error::Config(format!("unknown variant '{other}' (mha, mhad, tri1, tri2)"))),
        }
    }
}

/// Everything one run needs: hyperparameters, data paths, variant, seeds,
/// and output locations. `source` and `target` are labels echoed into
/// evaluation reports, not paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub source: String,
    pub target: String,
    pub train: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Where checkpoints land; defaults to `output_dir`.
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub hp: HyperParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        RunConfig {
            variant: Variant::default(),
            source: "source".into(),
            target: "target".into(),
            train: None,
            unlabeled: None,
            test: None,
            embeddings: None,
            checkpoint_dir: None,
            output_dir: PathBuf::from("runs"),
            seeds: vec![hp.seed],
            hp,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
}

impl RunConfig {
    /// Parse the flat config format: one `key = value` per line, `#` starts
    /// a comment, blank lines ignored, later keys override earlier ones.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", idx + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Set one field from its config key. Unknown keys are errors so typos
    /// never pass silently.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "source" => self.source = value.to_string(),
            "target" => self.target = value.to_string(),
            "train" => self.train = Some(PathBuf::from(value)),
            "unlabeled" => self.unlabeled = Some(PathBuf::from(value)),
            "test" => self.test = Some(PathBuf::from(value)),
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seeds" => {
                let seeds: Result<Vec<u64>> = value.split(',').map(|s| parse_num("seeds", s.trim())).collect();
                let seeds = seeds?;
                if seeds.is_empty() {
                    return Err(Error::Config("seeds needs at least one value".into()));
                }
                self.seeds = seeds;
            }
            "hidden" => self.hp.hidden = parse_num(key, value)?,
            "heads" => self.hp.heads = parse_num(key, value)?,
            "max_len" => self.hp.max_len = parse_num(key, value)?,
            "scoring" => self.hp.scoring = value.parse()?,
            "dropout" => self.hp.dropout = parse_num(key, value)?,
            "train_embeddings" => self.hp.train_embeddings = parse_num(key, value)?,
            "gamma" => self.hp.gamma = parse_num(key, value)?,
            "alpha" => self.hp.alpha = parse_num(key, value)?,
            "beta" => self.hp.beta = parse_num(key, value)?,
            "tau" => self.hp.tau = parse_num(key, value)?,
            "learning_rate" => self.hp.learning_rate = parse_num(key, value)?,
            "lr_decay" => self.hp.lr_decay = parse_num(key, value)?,
            "batch_size" => self.hp.batch_size = parse_num(key, value)?,
            "max_epochs" => self.hp.max_epochs = parse_num(key, value)?,
            "patience" => self.hp.patience = parse_num(key, value)?,
            "val_fraction" => self.hp.val_fraction = parse_num(key, value)?,
            "agreement_stop" => self.hp.agreement_stop = parse_num(key, value)?,
            "max_iterations" => self.hp.max_iterations = parse_num(key, value)?,
            "seed" => self.hp.seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Serialize in the same flat format, in a fixed key order. Parsing the
    /// result reproduces this config exactly.
    pub fn to_config_string(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("variant", &self.variant.to_string());
        kv("source", &self.source);
        kv("target", &self.target);
        for (key, path) in [
            ("train", &self.train),
            ("unlabeled", &self.unlabeled),
            ("test", &self.test),
            ("embeddings", &self.embeddings),
            ("checkpoint_dir", &self.checkpoint_dir),
        ] {
            if let Some(p) = path {
                kv(key, &p.display().to_string());
            }
        }
        kv("output_dir", &self.output_dir.display().to_string());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        kv("seeds", &seeds.join(","));
        let hp = &self.hp;
        kv("hidden", &hp.hidden.to_string());
        kv("heads", &hp.heads.to_string());
        kv("max_len", &hp.max_len.to_string());
        kv("scoring", &hp.scoring.to_string());
        kv("dropout", &hp.dropout.to_string());
        kv("train_embeddings", &hp.train_embeddings.to_string());
        kv("gamma", &hp.gamma.to_string());
        kv("alpha", &hp.alpha.to_string());
        kv("beta", &hp.beta.to_string());
        kv("tau", &hp.tau.to_string());
        kv("learning_rate", &hp.learning_rate.to_string());
        kv("lr_decay", &hp.lr_decay.to_string());
        kv("batch_size", &hp.batch_size.to_string());
        kv("max_epochs", &hp.max_epochs.to_string());
        kv("patience", &hp.patience.to_string());
        kv("val_fraction", &hp.val_fraction.to_string());
        kv("agreement_stop", &hp.agreement_stop.to_string());
        kv("max_iterations", &hp.max_iterations.to_string());
        kv("seed", &hp.seed.to_string());
        out
    }

    /// Structural checks shared by all commands: hyperparameters in range,
    /// referenced input files present, variant-specific requirements met.
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds needs at least one value".into()));
        }
        if self.variant == Variant::Tri2 && self.unlabeled.is_none() {
            return Err(Error::Config("variant tri2 requires an unlabeled path".into()));
        }
        for (what, path) in [
            ("train", &self.train),
            ("unlabeled", &self.unlabeled),
            ("test", &self.test),
            ("embeddings", &self.embeddings),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Root directory for this run's artifacts.
    pub fn run_root(&self) -> &Path {
        self.checkpoint_dir.as_deref().unwrap_or(&self.output_dir)
    }

    /// Where artifacts for one seed of this run live.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.run_root().join(format!("{}-seed{seed}", self.variant))
    }
}
