//! Run configuration: a plain `key = value` file overlaid with command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use qfnlos::deconv::{DeconvOptions, Padding};
use qfnlos::extract::Estimator;
use qfnlos::forward::{Deposit, Noise};
use qfnlos::io::{Dtype, Layout};
use qfnlos::pipeline::{DsChoice, Mode, PipelineConfig};
use qfnlos::{Falloff, WallGrid};

use crate::error::CliError;

pub const KEYS: &[&str] = &[
    "scene",
    "grid",
    "nt",
    "bin_length",
    "k",
    "s",
    "ds",
    "max_depth",
    "mode",
    "padding",
    "albedo_threshold",
    "estimator",
    "noise",
    "deposit",
    "seed",
    "photons",
    "dtype",
    "layout",
    "histogram",
    "events",
    "out_dir",
];

/// Flags mirroring the config keys; any flag given wins over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct KeyArgs {
    /// Surfel list, one `x y z albedo` per line
    #[arg(long, global = true)]
    scene: Option<String>,
    /// `nx ny pitch [origin_x origin_y]`; origin defaults to a centered grid
    #[arg(long, global = true, allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long, global = true)]
    nt: Option<String>,
    /// Bin length as round-trip path, meters
    #[arg(long = "bin-length", global = true)]
    bin_length: Option<String>,
    /// Falloff exponent, 2 or 4
    #[arg(long, global = true)]
    k: Option<String>,
    /// Quasi-Fresnel parameter s, meters
    #[arg(long, global = true)]
    s: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    ds: Option<String>,
    #[arg(long = "max-depth", global = true)]
    max_depth: Option<String>,
    /// traditional, loading or fdh
    #[arg(long, global = true)]
    mode: Option<String>,
    /// full or circular
    #[arg(long, global = true)]
    padding: Option<String>,
    #[arg(long = "albedo-threshold", global = true)]
    albedo_threshold: Option<String>,
    /// phase-ratio or derivative
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// none or poisson:<exposure_scale>
    #[arg(long, global = true)]
    noise: Option<String>,
    /// linear or nearest
    #[arg(long, global = true)]
    deposit: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Mean photons per surfel-pixel pair for event synthesis
    #[arg(long, global = true)]
    photons: Option<String>,
    /// f32 or f64
    #[arg(long, global = true)]
    dtype: Option<String>,
    /// pixel-major (0) or time-major (1)
    #[arg(long, global = true)]
    layout: Option<String>,
    /// Histogram file (render output, reconstruct input)
    #[arg(long, global = true)]
    histogram: Option<String>,
    /// Event file (render output, fdh input)
    #[arg(long, global = true)]
    events: Option<String>,
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<String>,
}

impl KeyArgs {
    fn pairs(&self) -> [(&'static str, &Option<String>); 21] {
        [
            ("scene", &self.scene),
            ("grid", &self.grid),
            ("nt", &self.nt),
            ("bin_length", &self.bin_length),
            ("k", &self.k),
            ("s", &self.s),
            ("ds", &self.ds),
            ("max_depth", &self.max_depth),
            ("mode", &self.mode),
            ("padding", &self.padding),
            ("albedo_threshold", &self.albedo_threshold),
            ("estimator", &self.estimator),
            ("noise", &self.noise),
            ("deposit", &self.deposit),
            ("seed", &self.seed),
            ("photons", &self.photons),
            ("dtype", &self.dtype),
            ("layout", &self.layout),
            ("histogram", &self.histogram),
            ("events", &self.events),
            ("out_dir", &self.out_dir),
        ]
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: String,
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<&'static str, Entry>,
}

fn known_key(key: &str) -> Option<&'static str> {
    KEYS.iter().copied().find(|k| *k == key)
}

impl Config {
    pub fn parse_str(text: &str, source: &str) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{source}:{}", lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}: expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let key = known_key(key).ok_or_else(|| CliError::Usage(format!("{origin}: unknown key `{key}`")))?;
            if let Some(prev) = cfg.entries.get(key) {
                return Err(CliError::Usage(format!(
                    "{origin}: key `{key}` already set at {}",
                    prev.origin
                )));
            }
            cfg.entries.insert(
                key,
                Entry {
                    value: value.trim().to_string(),
                    origin,
                },
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse_str(&text, &path.display().to_string())
    }

    pub fn apply_flags(&mut self, flags: &KeyArgs) {
        for (key, value) in flags.pairs() {
            if let Some(v) = value {
                self.set(key, v.clone(), format!("--{}", key.replace('_', "-")));
            }
        }
    }

    pub fn set(&mut self, key: &'static str, value: String, origin: String) {
        self.entries.insert(key, Entry { value, origin });
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn invalid(&self, key: &str, why: impl std::fmt::Display) -> CliError {
        let e = &self.entries[key];
        CliError::Usage(format!("{}: invalid value `{}` for `{key}`: {why}", e.origin, e.value))
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| self.invalid(key, e)),
        }
    }

    pub fn require<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing required key `{key}` (config file or --{})",
                key.replace('_', "-")
            ))
        })
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<Option<T>, CliError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        options
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| Some(*t))
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.invalid(key, format!("expected one of {}", names.join(", ")))
            })
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key).ok_or_else(|| {
            CliError::Usage(format!(
                "missing required key `{key}` (config file or --{})",
                key.replace('_', "-")
            ))
        })
    }

    pub fn grid(&self) -> Result<WallGrid, CliError> {
        let raw = self
            .raw("grid")
            .ok_or_else(|| CliError::Usage("missing required key `grid`".into()))?;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != 3 && parts.len() != 5 {
            return Err(self.invalid("grid", "expected `nx ny pitch [origin_x origin_y]`"));
        }
        let nx: usize = parts[0].parse().map_err(|e| self.invalid("grid", e))?;
        let ny: usize = parts[1].parse().map_err(|e| self.invalid("grid", e))?;
        let pitch: f64 = parts[2].parse().map_err(|e| self.invalid("grid", e))?;
        let origin = if parts.len() == 5 {
            let ox: f64 = parts[3].parse().map_err(|e| self.invalid("grid", e))?;
            let oy: f64 = parts[4].parse().map_err(|e| self.invalid("grid", e))?;
            [ox, oy]
        } else {
            [-((nx / 2) as f64) * pitch, -((ny / 2) as f64) * pitch]
        };
        Ok(WallGrid::new(nx, ny, pitch, origin)?)
    }

    pub fn falloff(&self) -> Result<Falloff, CliError> {
        let k: u32 = self.require("k")?;
        Ok(Falloff::from_exponent(k)?)
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        Ok(self
            .choice(
                "mode",
                &[
                    ("traditional", Mode::Traditional),
                    ("loading", Mode::Loading),
                    ("fdh", Mode::Fdh),
                ],
            )?
            .unwrap_or_default())
    }

    pub fn dtype(&self, default: Dtype) -> Result<Dtype, CliError> {
        Ok(self
            .choice("dtype", &[("f32", Dtype::F32), ("f64", Dtype::F64)])?
            .unwrap_or(default))
    }

    pub fn layout(&self) -> Result<Layout, CliError> {
        Ok(self
            .choice(
                "layout",
                &[
                    ("pixel-major", Layout::PixelMajor),
                    ("0", Layout::PixelMajor),
                    ("time-major", Layout::TimeMajor),
                    ("1", Layout::TimeMajor),
                ],
            )?
            .unwrap_or_default())
    }

    pub fn deposit(&self) -> Result<Deposit, CliError> {
        Ok(self
            .choice(
                "deposit",
                &[("linear", Deposit::LinearSplit), ("nearest", Deposit::NearestBin)],
            )?
            .unwrap_or_default())
    }

    pub fn noise(&self) -> Result<Noise, CliError> {
        match self.raw("noise") {
            None | Some("none") => Ok(Noise::None),
            Some(v) => {
                let scale = v
                    .strip_prefix("poisson:")
                    .ok_or_else(|| self.invalid("noise", "expected `none` or `poisson:<exposure_scale>`"))?;
                let exposure_scale: f64 = scale.trim().parse().map_err(|e| self.invalid("noise", e))?;
                Ok(Noise::Poisson { exposure_scale })
            }
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        Ok(self.get("seed")?.unwrap_or(0))
    }

    pub fn ds_is_pinned(&self) -> bool {
        self.raw("ds").is_some() || self.raw("max_depth").is_some()
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let s: f64 = self.require("s")?;
        let ds = match (self.get::<f64>("ds")?, self.get::<f64>("max_depth")?) {
            (Some(ds), _) => DsChoice::Explicit(ds),
            (None, Some(d)) => DsChoice::FromMaxDepth(d),
            (None, None) => DsChoice::Auto,
        };
        let padding = self
            .choice("padding", &[("full", Padding::Full), ("circular", Padding::Circular)])?
            .unwrap_or_default();
        let estimator = self
            .choice(
                "estimator",
                &[
                    ("phase-ratio", Estimator::PhaseRatio),
                    ("derivative", Estimator::Derivative),
                ],
            )?
            .unwrap_or_default();
        let mut cfg = PipelineConfig::new(s);
        cfg.ds = ds;
        cfg.deconv = DeconvOptions {
            padding,
            ..DeconvOptions::default()
        };
        cfg.estimator = estimator;
        if let Some(t) = self.get("albedo_threshold")? {
            cfg.albedo_threshold = t;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = Config::parse_str("# header\n\ns = 0.05  # inline\nnt=300\n", "c").unwrap();
        assert_eq!(cfg.raw("s"), Some("0.05"));
        assert_eq!(cfg.get::<usize>("nt").unwrap(), Some(300));
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = Config::parse_str("s = 1\nbogus = 2\n", "c.txt").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("c.txt:2"), "{err}");
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn duplicate_and_malformed_lines_are_errors() {
        assert!(Config::parse_str("s = 1\ns = 2\n", "c").is_err());
        assert!(Config::parse_str("s 1\n", "c").is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = Config::parse_str("s = 0.05\nnt = 10\n", "c").unwrap();
        let flags = KeyArgs {
            s: Some("0.07".into()),
            ..KeyArgs::default()
        };
        cfg.apply_flags(&flags);
        assert_eq!(cfg.get::<f64>("s").unwrap(), Some(0.07));
        assert_eq!(cfg.get::<usize>("nt").unwrap(), Some(10));
    }

    #[test]
    fn grid_defaults_to_centered_origin() {
        let cfg = Config::parse_str("grid = 4 2 0.5\n", "c").unwrap();
        let g = cfg.grid().unwrap();
        assert_eq!((g.nx(), g.ny()), (4, 2));
        assert_eq!(g.origin(), [-1.0, -0.5]);
        assert_eq!(g.pixel_center(2, 1), [0.0, 0.0]);
        let cfg = Config::parse_str("grid = 1 1 1.0 0.25 -0.5\n", "c").unwrap();
        assert_eq!(cfg.grid().unwrap().origin(), [0.25, -0.5]);
        assert!(Config::parse_str("grid = 4 4\n", "c").unwrap().grid().is_err());
    }

    #[test]
    fn ds_choice_follows_keys() {
        let cfg = Config::parse_str("s = 0.05\n", "c").unwrap();
        assert_eq!(cfg.pipeline().unwrap().ds, DsChoice::Auto);
        let cfg = Config::parse_str("s = 0.05\nmax_depth = 1.5\n", "c").unwrap();
        assert_eq!(cfg.pipeline().unwrap().ds, DsChoice::FromMaxDepth(1.5));
        let cfg = Config::parse_str("s = 0.05\nmax_depth = 1.5\nds = 0.001\n", "c").unwrap();
        assert_eq!(cfg.pipeline().unwrap().ds, DsChoice::Explicit(0.001));
    }

    #[test]
    fn enumerated_values_are_checked() {
        let cfg = Config::parse_str("mode = fast\n", "c").unwrap();
        assert_eq!(cfg.mode().unwrap_err().exit_code(), 1);
        let cfg = Config::parse_str("noise = poisson:20\nlayout = 1\n", "c").unwrap();
        assert_eq!(cfg.noise().unwrap(), Noise::Poisson { exposure_scale: 20.0 });
        assert_eq!(cfg.layout().unwrap(), Layout::TimeMajor);
        assert!(Config::parse_str("noise = gaussian\n", "c").unwrap().noise().is_err());
    }

    #[test]
    fn missing_s_is_a_usage_error() {
        let err = Config::default().pipeline().unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
