//! Run configuration and its sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [optim]
//! preset = desk
//! seed = 7
//! ```
//!
//! Values are resolved in three layers: the preset, then the file, then
//! command-line overrides.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use moaecr_core::crloss::{BaselineLoss, RegularizerConfig};
use moaecr_core::datasynth::{image_side, AttackType, SyntheticSpec};
use moaecr_core::encoder::EncoderConfig;
use moaecr_core::moae::{MoaeConfig, SublayerKind};
use moaecr_core::optim::AdamConfig;

use crate::error::{CliError, CliResult};

/// Named optimizer defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// lr 1e-6, 300 iterations: the fine-tuning schedule of a large pretrained encoder.
    Paper,
    /// lr 1e-3, 2000 iterations: training the small encoder from scratch.
    Desk,
}

impl Preset {
    pub fn lr(self) -> f64 {
        match self {
            Preset::Paper => 1e-6,
            Preset::Desk => 1e-3,
        }
    }

    pub fn iterations(self) -> usize {
        match self {
            Preset::Paper => 300,
            Preset::Desk => 2000,
        }
    }

    pub const WEIGHT_DECAY: f64 = 5e-4;
    pub const BATCH_SIZE: usize = 32;
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset {other:?} (paper|desk)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Every attack type appears in train, dev and test.
    Intra,
    /// One attack type is kept out of train and dev and makes up the test fakes.
    Loto,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Intra => "intra",
            Protocol::Loto => "loto",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "intra" => Ok(Protocol::Intra),
            "loto" => Ok(Protocol::Loto),
            other => Err(format!("unknown protocol {other:?} (intra|loto)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub preset: Preset,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Seeds initialization and batch order.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub spec: SyntheticSpec,
    pub protocol: Protocol,
    /// Attack type held out under [`Protocol::Loto`]; `None` means the rare type.
    pub held_type: Option<usize>,
}

impl DataConfig {
    pub fn held(&self) -> AttackType {
        AttackType(self.held_type.unwrap_or(self.spec.attack_types))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub regularizer: RegularizerConfig,
    /// Replaces DM and CDM when set.
    pub baseline: Option<BaselineLoss>,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Defaults of `preset` with the given seed.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let spec = SyntheticSpec::default();
        let patch_side = 4;
        let mut encoder = EncoderConfig {
            patch_side,
            ..EncoderConfig::default()
        };
        encoder.image_side = image_side(spec.dims, patch_side).expect("default dims are a square");
        Self {
            encoder,
            regularizer: RegularizerConfig::default(),
            baseline: None,
            optim: OptimConfig {
                preset,
                adam: AdamConfig {
                    lr: preset.lr(),
                    weight_decay: Preset::WEIGHT_DECAY,
                    ..AdamConfig::default()
                },
                iterations: preset.iterations(),
                batch_size: Preset::BATCH_SIZE,
                seed,
            },
            data: DataConfig {
                spec,
                protocol: Protocol::Intra,
                held_type: None,
            },
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self::preset(Preset::Desk, seed)
    }

    /// Checks cross-field constraints and derives the image side from the data.
    pub fn finish(mut self) -> CliResult<Self> {
        self.data.spec.validate()?;
        self.encoder.image_side = image_side(self.data.spec.dims, self.encoder.patch_side)?;
        self.encoder.validate()?;
        if self.optim.batch_size < 2 || !self.optim.batch_size.is_multiple_of(2) {
            return Err(CliError::Usage(format!(
                "batch_size must be even and >= 2, got {}",
                self.optim.batch_size
            )));
        }
        if self.data.protocol == Protocol::Loto {
            let held = self.data.held().0;
            if held == 0 || held > self.data.spec.attack_types {
                return Err(CliError::Usage(format!(
                    "held_type must be in 1..={}, got {held}",
                    self.data.spec.attack_types
                )));
            }
        }
        Ok(self)
    }

    /// Parses config text, then applies `overrides` on top.
    pub fn parse(text: &str, overrides: &Overrides) -> CliResult<Self> {
        let entries = parse_entries(text)?;
        let preset = match overrides.preset {
            Some(p) => p,
            None => match entries.get(&("optim".into(), "preset".into())) {
                Some((line, v)) => v.parse().map_err(|msg| CliError::Config { line: *line, msg })?,
                None => Preset::Desk,
            },
        };
        let mut cfg = Self::preset(preset, 0);
        let mut seed_given = false;
        for ((section, key), (line, value)) in &entries {
            let bad = |msg: String| CliError::Config { line: *line, msg };
            seed_given |= section == "optim" && key == "seed";
            cfg.set(section, key, value).map_err(bad)?;
        }
        if let Some(seed) = overrides.seed {
            cfg.optim.seed = seed;
            seed_given = true;
        }
        if !seed_given {
            return Err(CliError::Usage("a seed is required ([optim] seed = N or --seed N)".into()));
        }
        if let Some(p) = overrides.protocol {
            cfg.data.protocol = p;
        }
        if let Some(k) = overrides.held_type {
            cfg.data.held_type = Some(k);
        }
        cfg.finish()
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let e = &mut self.encoder;
        let s = &mut self.data.spec;
        match (section, key) {
            ("model", "sublayer") => e.sublayer = v.parse().map_err(|x: moaecr_core::Error| x.to_string())?,
            ("model", "patch_side") => e.patch_side = num(v)?,
            ("model", "d") => e.d = num(v)?,
            ("model", "blocks") => e.blocks = num(v)?,
            ("model", "attn_heads") => e.attn_heads = num(v)?,
            ("model", "mlp_hidden") => e.mlp_hidden = num(v)?,
            ("model", "embed_dim") => e.embed_dim = num(v)?,
            ("model", "experts") => e.moae.experts = num(v)?,
            ("model", "heads") => e.moae.heads = num(v)?,
            ("model", "slots_per_expert") => e.moae.slots_per_expert = num(v)?,
            ("model", "expert_hidden") => e.moae.expert_hidden = num(v)?,
            ("loss", "dm") => self.regularizer.dm = flag(v)?,
            ("loss", "cdm") => self.regularizer.cdm = flag(v)?,
            ("loss", "t") => self.regularizer.t = num(v)?,
            ("loss", "baseline") => {
                self.baseline = match v {
                    "none" => None,
                    name => Some(BaselineLoss::parse(name).map_err(|x| x.to_string())?),
                }
            }
            ("loss", "margin") => match &mut self.baseline {
                Some(BaselineLoss::Triplet { margin } | BaselineLoss::HardTriplet { margin }) => *margin = num(v)?,
                _ => return Err("margin needs baseline = triplet or hard_triplet".into()),
            },
            ("loss", "temperature") => match &mut self.baseline {
                Some(BaselineLoss::SupCon { temperature }) => *temperature = num(v)?,
                _ => return Err("temperature needs baseline = supcon".into()),
            },
            ("optim", "preset") => {}
            ("optim", "algorithm") => {
                if v != "adam" {
                    return Err(format!("unknown algorithm {v:?} (adam)"));
                }
            }
            ("optim", "lr") => self.optim.adam.lr = num(v)?,
            ("optim", "weight_decay") => self.optim.adam.weight_decay = num(v)?,
            ("optim", "iterations") => self.optim.iterations = num(v)?,
            ("optim", "batch_size") => self.optim.batch_size = num(v)?,
            ("optim", "seed") => self.optim.seed = num(v)?,
            ("data", "protocol") => self.data.protocol = v.parse()?,
            ("data", "held_type") => self.data.held_type = Some(num(v)?),
            ("data", "dims") => s.dims = num(v)?,
            ("data", "attack_types") => s.attack_types = num(v)?,
            ("data", "live_spread") => s.live_spread = num(v)?,
            ("data", "type_spread") => s.type_spread = num(v)?,
            ("data", "rare_spread") => s.rare_spread = num(v)?,
            ("data", "gap") => s.gap = num(v)?,
            ("data", "rare_offset") => s.rare_offset = num(v)?,
            ("data", "n_live") => s.n_live = num(v)?,
            ("data", "n_per_type") => s.n_per_type = num(v)?,
            ("data", "n_rare") => s.n_rare = num(v)?,
            ("data", "seed") => s.seed = num(v)?,
            _ => return Err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    /// Renders every setting; parsing the result gives back this config.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let m = &e.moae;
        let s = &self.data.spec;
        let r = &self.regularizer;
        let mut out = String::new();
        let mut put = |line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        put("[model]".into());
        put(format!("sublayer = {}", e.sublayer));
        put(format!("patch_side = {}", e.patch_side));
        put(format!("d = {}", e.d));
        put(format!("blocks = {}", e.blocks));
        put(format!("attn_heads = {}", e.attn_heads));
        put(format!("mlp_hidden = {}", e.mlp_hidden));
        put(format!("embed_dim = {}", e.embed_dim));
        put(format!("experts = {}", m.experts));
        put(format!("heads = {}", m.heads));
        put(format!("slots_per_expert = {}", m.slots_per_expert));
        put(format!("expert_hidden = {}", m.expert_hidden));
        put("\n[loss]".into());
        put(format!("dm = {}", r.dm));
        put(format!("cdm = {}", r.cdm));
        put(format!("t = {}", r.t));
        match self.baseline {
            None => put("baseline = none".into()),
            Some(b) => {
                put(format!("baseline = {}", b.name()));
                match b {
                    BaselineLoss::Triplet { margin } | BaselineLoss::HardTriplet { margin } => {
                        put(format!("margin = {margin}"))
                    }
                    BaselineLoss::SupCon { temperature } => put(format!("temperature = {temperature}")),
                    BaselineLoss::NPair => {}
                }
            }
        }
        let o = &self.optim;
        put("\n[optim]".into());
        put(format!("preset = {}", o.preset));
        put("algorithm = adam".into());
        put(format!("lr = {}", o.adam.lr));
        put(format!("weight_decay = {}", o.adam.weight_decay));
        put(format!("iterations = {}", o.iterations));
        put(format!("batch_size = {}", o.batch_size));
        put(format!("seed = {}", o.seed));
        put("\n[data]".into());
        put(format!("protocol = {}", self.data.protocol));
        if let Some(k) = self.data.held_type {
            put(format!("held_type = {k}"));
        }
        put(format!("dims = {}", s.dims));
        put(format!("attack_types = {}", s.attack_types));
        put(format!("live_spread = {}", s.live_spread));
        put(format!("type_spread = {}", s.type_spread));
        put(format!("rare_spread = {}", s.rare_spread));
        put(format!("gap = {}", s.gap));
        put(format!("rare_offset = {}", s.rare_offset));
        put(format!("n_live = {}", s.n_live));
        put(format!("n_per_type = {}", s.n_per_type));
        put(format!("n_rare = {}", s.n_rare));
        put(format!("seed = {}", s.seed));
        out
    }

    /// Short human-readable tag of the model and loss choices.
    pub fn variant_label(&self) -> String {
        let mut label = String::from("CE");
        if self.encoder.sublayer != SublayerKind::None {
            let _ = write!(label, "+{}", self.encoder.sublayer);
        }
        match self.baseline {
            Some(b) => {
                let _ = write!(label, "+{}", b.name());
            }
            None => {
                if self.regularizer.dm {
                    label.push_str("+DM");
                }
                if self.regularizer.cdm {
                    label.push_str("+CDM");
                }
            }
        }
        label
    }

    /// Routing configuration as the encoder sees it.
    pub fn moae(&self) -> MoaeConfig {
        self.encoder.moae_config()
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub protocol: Option<Protocol>,
    pub held_type: Option<usize>,
}

type Entries = BTreeMap<(String, String), (usize, String)>;

/// Entries keyed by (section, key). They are applied in sorted order, so
/// `baseline` lands before the `margin` and `temperature` that refine it.
fn parse_entries(text: &str) -> CliResult<Entries> {
    let mut section: Option<String> = None;
    let mut out = Entries::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let bad = |msg: String| CliError::Config { line, msg };
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| bad("unterminated section header".into()))?;
            let name = name.trim();
            if !matches!(name, "model" | "loss" | "optim" | "data") {
                return Err(bad(format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| bad(format!("expected key = value, got {s:?}")))?;
        let sec = section.clone().ok_or_else(|| bad("key before any section header".into()))?;
        let k = (sec, key.trim().to_string());
        if out.contains_key(&k) {
            return Err(bad(format!("duplicate key {:?} in [{}]", k.1, k.0)));
        }
        out.insert(k, (line, value.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| format!("bad value {v:?}: {e}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}
