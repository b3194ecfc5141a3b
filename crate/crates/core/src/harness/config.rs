//! TOML experiment configuration.
//!
//! A config is parsed, patched with command-line overrides and then resolved:
//! every defaulted field is filled in, so the canonical re-serialization (and
//! with it the digest) pins down everything a run depends on.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Codebook, Codec, ScaleSchedule};
use crate::editing::{default_start_scale, default_target_tau, default_tau, ContextMode, EditConfig, LambdaKind};
use crate::error::{Error, Result};
use crate::inversion::InversionKind;
use crate::predictor::{Predictor, PredictorParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub dim: usize,
    /// Number of codebook entries, the zero code included.
    pub codebook_size: usize,
    pub codebook_seed: u64,
    pub schedule: ScaleSchedule,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            dim: 4,
            codebook_size: 64,
            codebook_seed: 1,
            schedule: ScaleSchedule::dyadic(5).expect("dyadic schedule"),
        }
    }
}

impl CodecSection {
    pub fn build(&self) -> Result<Codec> {
        let codebook = Codebook::seeded(self.dim, self.codebook_size, self.codebook_seed)
            .map_err(|e| Error::config(format!("codec: {e}")))?;
        Ok(Codec::new(codebook, self.schedule.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    #[default]
    Varin,
    Regen,
    TargetOnly,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::Varin => "varin",
            EditMode::Regen => "regen",
            EditMode::TargetOnly => "target-only",
        }
    }
}

impl fmt::Display for EditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "varin" => Ok(EditMode::Varin),
            "regen" => Ok(EditMode::Regen),
            "target-only" => Ok(EditMode::TargetOnly),
            other => Err(Error::input(format!("unknown edit mode {other:?} (varin, regen, target-only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    #[serde(default)]
    pub mode: EditMode,
    pub source_label: String,
    pub target_label: String,
    /// Defaults to the reference start scale mapped onto the schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_scale: Option<usize>,
    /// Defaults depend on the mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default)]
    pub lambda: LambdaKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub context: ContextMode,
    #[serde(default)]
    pub kind: InversionKind,
}

impl EditSection {
    /// Only meaningful after [`ExperimentConfig::resolve`].
    pub fn edit_config(&self) -> EditConfig {
        EditConfig {
            source_label: self.source_label.clone(),
            target_label: self.target_label.clone(),
            start_scale: self.start_scale.unwrap_or(1),
            tau: self.tau.unwrap_or(0.0),
            lambda: self.lambda,
            seed: self.seed,
            context: self.context,
            kind: self.kind,
        }
    }
}

/// Where the source grid comes from: a bundled scene or a grid file, with
/// an optional ASCII mask file. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Tau,
    StartScale,
    Lambda,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::Tau => "tau",
            SweepParameter::StartScale => "start-scale",
            SweepParameter::Lambda => "lambda",
        }
    }
}

/// Either a count `n` (seeds `seed..seed + n`, with `seed` from the edit
/// section) or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSet {
    Count(u64),
    List(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub seeds: SeedSet,
}

impl SweepSection {
    pub fn seed_list(&self, base: u64) -> Vec<u64> {
        match &self.seeds {
            SeedSet::Count(n) => (0..*n).map(|i| base.wrapping_add(i)).collect(),
            SeedSet::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory, relative to the working directory. Not part of the
    /// digest.
    #[serde(default = "default_out", skip_serializing)]
    pub out: PathBuf,
    #[serde(default)]
    pub codec: CodecSection,
    #[serde(default)]
    pub predictor: PredictorParams,
    pub edit: EditSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("varin-out")
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<EditMode>,
    pub kind: Option<InversionKind>,
    pub tau: Option<f64>,
    pub start_scale: Option<usize>,
    pub lambda: Option<LambdaKind>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, overrides)
    }

    pub fn parse(text: &str, base_dir: PathBuf, overrides: &Overrides) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.base_dir = base_dir;
        config.apply(overrides);
        config.resolve()?;
        Ok(config)
    }

    fn apply(&mut self, o: &Overrides) {
        let edit = &mut self.edit;
        if let Some(seed) = o.seed {
            edit.seed = seed;
        }
        if let Some(mode) = o.mode {
            edit.mode = mode;
        }
        if let Some(kind) = o.kind {
            edit.kind = kind;
        }
        if let Some(tau) = o.tau {
            edit.tau = Some(tau);
        }
        if let Some(s) = o.start_scale {
            edit.start_scale = Some(s);
        }
        if let Some(lambda) = o.lambda {
            edit.lambda = lambda;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    /// Fills defaults and validates every section.
    pub fn resolve(&mut self) -> Result<()> {
        self.predictor.validate()?;
        let scales = self.codec.build()?.scales();
        let edit = &mut self.edit;
        let start = *edit.start_scale.get_or_insert(default_start_scale(scales));
        let tau = *edit.tau.get_or_insert(match edit.mode {
            EditMode::TargetOnly => default_target_tau(),
            _ => default_tau(),
        });
        let max_start = if edit.mode == EditMode::Regen { scales + 1 } else { scales };
        if start == 0 || start > max_start {
            return Err(Error::config(format!("start_scale {start} outside 1..={max_start}")));
        }
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::config(format!("tau must be non-negative, got {tau}")));
        }
        if let Some(input) = &self.input {
            if input.scene.is_some() == input.grid.is_some() {
                return Err(Error::config("input needs exactly one of `scene` or `grid`"));
            }
        }
        Ok(())
    }

    /// The sweep section, checked against the edit mode and schedule.
    pub fn sweep_section(&self) -> Result<&SweepSection> {
        let sweep = self.sweep.as_ref().ok_or_else(|| Error::config("config has no [sweep] section"))?;
        let scales = self.scales();
        let max_start = if self.edit.mode == EditMode::Regen { scales + 1 } else { scales };
        if sweep.values.is_empty() {
            return Err(Error::config("sweep values are empty"));
        }
        if sweep.seed_list(self.edit.seed).is_empty() {
            return Err(Error::config("sweep seeds are empty"));
        }
        let mode = self.edit.mode;
        if mode == EditMode::Regen && sweep.parameter != SweepParameter::StartScale {
            return Err(Error::config(format!("sweeping {} has no effect in regen mode", sweep.parameter.as_str())));
        }
        for &v in &sweep.values {
            let ok = match sweep.parameter {
                SweepParameter::Tau => v.is_finite() && v >= 0.0,
                SweepParameter::Lambda => (0.0..=1.0).contains(&v),
                SweepParameter::StartScale => v.fract() == 0.0 && v >= 1.0 && v <= max_start as f64,
            };
            if !ok {
                return Err(Error::config(format!(
                    "sweep value {v} invalid for {} (schedule has {scales} scales)",
                    sweep.parameter.as_str()
                )));
            }
        }
        Ok(sweep)
    }

    /// Canonical TOML of the resolved config, minus the output directory.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    pub fn predictor(&self) -> Result<Predictor> {
        Predictor::new(self.predictor.clone(), self.codec.build()?)
    }

    pub fn scales(&self) -> usize {
        self.codec.schedule.len()
    }

    pub fn resolve_path(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[edit]
source_label = "a"
target_label = "b"
"#;

    #[test]
    fn defaults_are_resolved() {
        let c = ExperimentConfig::parse(MINIMAL, PathBuf::new(), &Overrides::default()).unwrap();
        assert_eq!(c.edit.start_scale, Some(2));
        assert_eq!(c.edit.tau, Some(4.5));
        assert_eq!(c.codec.codebook_size, 64);
        assert!(c.canonical().contains("start_scale = 2"));
    }

    #[test]
    fn target_only_gets_its_own_tau() {
        let o = Overrides {
            mode: Some(EditMode::TargetOnly),
            ..Default::default()
        };
        let c = ExperimentConfig::parse(MINIMAL, PathBuf::new(), &o).unwrap();
        assert_eq!(c.edit.tau, Some(3.0));
    }

    #[test]
    fn canonical_form_is_stable_and_complete() {
        let a = ExperimentConfig::parse(MINIMAL, PathBuf::new(), &Overrides::default()).unwrap();
        let b = ExperimentConfig::parse(&a.canonical(), PathBuf::new(), &Overrides::default()).unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig::parse(
            MINIMAL,
            PathBuf::new(),
            &Overrides {
                seed: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn out_does_not_change_the_digest() {
        let a = ExperimentConfig::parse(MINIMAL, PathBuf::new(), &Overrides::default()).unwrap();
        let o = Overrides {
            out: Some("elsewhere".into()),
            ..Default::default()
        };
        let b = ExperimentConfig::parse(MINIMAL, PathBuf::new(), &o).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(b.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn rejects_invalid_sections() {
        let bad = [
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\ntau = -1.0\n",
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\nstart_scale = 6\n",
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\nbogus = 1\n",
            "[predictor]\nbeta = 0.0\n[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n",
            "[codec]\nschedule = [[2, 2], [3, 3]]\n[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n",
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n[sweep]\nparameter = \"tau\"\nvalues = []\nseeds = 4\n",
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n[sweep]\nparameter = \"tau\"\nvalues = [1.0]\nseeds = []\n",
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n[sweep]\nparameter = \"size\"\nvalues = [1.0]\nseeds = 4\n",
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n[sweep]\nparameter = \"start-scale\"\nvalues = [2.5]\nseeds = 4\n",
            "[edit]\nmode = \"regen\"\nsource_label = \"a\"\ntarget_label = \"b\"\n[sweep]\nparameter = \"tau\"\nvalues = [1.0]\nseeds = 4\n",
            "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n[input]\nscene = \"square\"\ngrid = \"x.vgrid\"\n",
        ];
        for text in bad {
            let err = ExperimentConfig::parse(text, PathBuf::new(), &Overrides::default())
                .and_then(|c| c.sweep_section().map(|_| ()))
                .unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn sweep_is_only_checked_when_used() {
        let text = "[edit]\nmode = \"regen\"\nsource_label = \"a\"\ntarget_label = \"b\"\n[sweep]\nparameter = \"tau\"\nvalues = [1.0]\nseeds = 4\n";
        let c = ExperimentConfig::parse(text, PathBuf::new(), &Overrides::default()).unwrap();
        assert!(c.sweep_section().is_err());
        let text = "[edit]\nsource_label = \"a\"\ntarget_label = \"b\"\n";
        let c = ExperimentConfig::parse(text, PathBuf::new(), &Overrides::default()).unwrap();
        assert!(c.sweep_section().is_err());
    }

    #[test]
    fn regen_allows_start_past_the_last_scale() {
        let text = "[edit]\nmode = \"regen\"\nsource_label = \"a\"\ntarget_label = \"b\"\nstart_scale = 6\n";
        assert!(ExperimentConfig::parse(text, PathBuf::new(), &Overrides::default()).is_ok());
    }

    #[test]
    fn seed_sets() {
        let sweep = SweepSection {
            parameter: SweepParameter::Tau,
            values: vec![1.0],
            seeds: SeedSet::Count(3),
        };
        assert_eq!(sweep.seed_list(10), vec![10, 11, 12]);
        let listed = SweepSection {
            seeds: SeedSet::List(vec![4, 2]),
            ..sweep
        };
        assert_eq!(listed.seed_list(10), vec![4, 2]);
    }
}
