//! Config resolution. Each value comes from the first of: command-line
//! flag, config file, preset, built-in default. The source of every value
//! is recorded in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sevi_lab::align::{preset, AlignConfig, MixDomain, Mode};
use sevi_lab::decode::{ContrastConfig, GenerationConfig, Strategy};
use sevi_lab::metrics::{ChairConvention, Pooling};
use sevi_lab::model::ModelConfig;
use sevi_lab::{Error, Result};

use crate::args::GlobalArgs;

pub const DEFAULT_PROMPT: [u32; 4] = [17, 42, 99, 5];

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignPatch {
    kappa: Option<f64>,
    omega: Option<f64>,
    start_layer: Option<usize>,
    mix_domain: Option<MixDomain>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContrastPatch {
    enabled: Option<bool>,
    negative_image_seed: Option<u64>,
    jsd_floor: Option<f64>,
    alpha_cap: Option<f64>,
    align_negative: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerationPatch {
    max_new_tokens: Option<usize>,
    strategy: Option<Strategy>,
    temperature: Option<f64>,
    top_p: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabFile {
    model: Option<ModelConfig>,
    mode: Option<Mode>,
    align: Option<AlignPatch>,
    contrast: Option<ContrastPatch>,
    generation: Option<GenerationPatch>,
    prompt: Option<Vec<u32>>,
    seed: Option<u64>,
}

fn load_file(path: &Path) -> Result<LabFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let bare_model = value.get("num_layers").is_some();
    let parsed = if bare_model {
        serde_json::from_value(value).map(|model| LabFile {
            model: Some(model),
            ..LabFile::default()
        })
    } else {
        serde_json::from_value(value)
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Flag,
    File,
    Preset,
    Default,
    /// Computed from another resolved value.
    Derived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub image: u64,
    pub generation: u64,
    pub negative_image: u64,
    pub model_init: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub model: ModelConfig,
    pub mode: Option<Mode>,
    /// Alignment as requested, before clamping to the model depth.
    pub align: Option<AlignConfig>,
    /// The start layer actually used after clamping.
    pub effective_start_layer: Option<usize>,
    pub contrast: ContrastConfig,
    pub generation: GenerationConfig,
    pub prompt: Vec<u32>,
    pub seeds: Seeds,
    pub convention: ChairConvention,
    pub pooling: Pooling,
    pub sources: BTreeMap<String, Source>,
}

impl Resolved {
    /// Alignment clamped to the model, ready for the hooks.
    pub fn effective_align(&self) -> Option<AlignConfig> {
        self.align
            .zip(self.effective_start_layer)
            .map(|(a, start_layer)| AlignConfig { start_layer, ..a })
    }
}

struct Picker<'a> {
    sources: &'a mut BTreeMap<String, Source>,
}

impl Picker<'_> {
    fn pick<T>(&mut self, name: &str, candidates: [(Option<T>, Source); 3], default: T) -> T {
        for (value, source) in candidates {
            if let Some(v) = value {
                self.sources.insert(name.into(), source);
                return v;
            }
        }
        self.sources.insert(name.into(), Source::Default);
        default
    }
}

fn single<T: Copy>(values: &[T], flag: &str) -> Result<Option<T>> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(Error::Config(format!(
            "--{flag} takes one value outside grid"
        ))),
    }
}

/// Resolve every setting. `grid` allows list-valued `--omega` and
/// `--start-layer`; those lists are then handled by the caller.
pub fn resolve(args: &GlobalArgs, grid: bool) -> Result<Resolved> {
    let file = match &args.config {
        Some(path) => load_file(path)?,
        None => LabFile::default(),
    };
    let mut sources = BTreeMap::new();
    let mut p = Picker {
        sources: &mut sources,
    };

    let model = p.pick(
        "model",
        [
            (None, Source::Flag),
            (file.model, Source::File),
            (None, Source::Preset),
        ],
        ModelConfig::default(),
    );
    model.validate()?;

    let mode = args.mode.or(file.mode);
    let fa = file.align.unwrap_or_default();
    let (omega_flag, start_flag) = if grid {
        (None, None)
    } else {
        (
            single(&args.omega, "omega")?,
            single(&args.start_layer, "start-layer")?,
        )
    };
    let align_requested = mode.is_some()
        || grid
        || args.kappa.is_some()
        || omega_flag.is_some()
        || start_flag.is_some()
        || args.mix_domain.is_some()
        || fa.kappa.is_some()
        || fa.omega.is_some()
        || fa.start_layer.is_some()
        || fa.mix_domain.is_some();
    let base = preset(mode.unwrap_or(Mode::Focused));
    let align = if align_requested {
        let fallback = preset(Mode::Focused);
        Some(AlignConfig {
            kappa: p.pick(
                "align.kappa",
                [
                    (args.kappa, Source::Flag),
                    (fa.kappa, Source::File),
                    (mode.map(|_| base.kappa), Source::Preset),
                ],
                fallback.kappa,
            ),
            omega: p.pick(
                "align.omega",
                [
                    (omega_flag, Source::Flag),
                    (fa.omega, Source::File),
                    (mode.map(|_| base.omega), Source::Preset),
                ],
                fallback.omega,
            ),
            start_layer: p.pick(
                "align.start_layer",
                [
                    (start_flag, Source::Flag),
                    (fa.start_layer, Source::File),
                    (mode.map(|_| base.start_layer), Source::Preset),
                ],
                fallback.start_layer,
            ),
            mix_domain: p.pick(
                "align.mix_domain",
                [
                    (args.mix_domain, Source::Flag),
                    (fa.mix_domain, Source::File),
                    (mode.map(|_| base.mix_domain), Source::Preset),
                ],
                MixDomain::default(),
            ),
        })
    } else {
        None
    };
    let effective = align.map(|a| a.clamped_to(model.num_layers));
    if let Some(a) = effective {
        a.validate(model.num_layers)?;
    }
    let effective_start_layer = effective.map(|a| a.start_layer);

    let seed = p.pick(
        "seed",
        [
            (args.seed, Source::Flag),
            (file.seed, Source::File),
            (None, Source::Preset),
        ],
        0,
    );
    let prompt = p.pick(
        "prompt",
        [
            (args.prompt.clone(), Source::Flag),
            (file.prompt, Source::File),
            (None, Source::Preset),
        ],
        DEFAULT_PROMPT.to_vec(),
    );
    if prompt.is_empty() {
        return Err(Error::Config("prompt must not be empty".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= model.vocab_size) {
        return Err(Error::Config(format!(
            "prompt token {bad} outside vocabulary of {}",
            model.vocab_size
        )));
    }

    let fc = file.contrast.unwrap_or_default();
    let defaults = ContrastConfig::default();
    let enabled = p.pick(
        "contrast.enabled",
        [
            (args.contrast.then_some(true), Source::Flag),
            (fc.enabled, Source::File),
            (None, Source::Preset),
        ],
        false,
    );
    let negative_image_seed = match (args.neg_seed, fc.negative_image_seed) {
        (Some(s), _) => {
            p.sources
                .insert("contrast.negative_image_seed".into(), Source::Flag);
            s
        }
        (None, Some(s)) => {
            p.sources
                .insert("contrast.negative_image_seed".into(), Source::File);
            s
        }
        (None, None) => {
            p.sources
                .insert("contrast.negative_image_seed".into(), Source::Derived);
            seed.wrapping_add(1)
        }
    };
    let contrast = ContrastConfig {
        enabled,
        negative_image_seed,
        jsd_floor: p.pick(
            "contrast.jsd_floor",
            [
                (None, Source::Flag),
                (fc.jsd_floor, Source::File),
                (None, Source::Preset),
            ],
            defaults.jsd_floor,
        ),
        alpha_cap: p.pick(
            "contrast.alpha_cap",
            [
                (args.alpha_cap, Source::Flag),
                (fc.alpha_cap, Source::File),
                (None, Source::Preset),
            ],
            defaults.alpha_cap,
        ),
        align_negative: p.pick(
            "contrast.align_negative",
            [
                (None, Source::Flag),
                (fc.align_negative, Source::File),
                (None, Source::Preset),
            ],
            defaults.align_negative,
        ),
    };
    contrast.validate()?;

    let fg = file.generation.unwrap_or_default();
    let gdef = GenerationConfig::default();
    let generation = GenerationConfig {
        max_new_tokens: p.pick(
            "generation.max_new_tokens",
            [
                (args.max_new_tokens, Source::Flag),
                (fg.max_new_tokens, Source::File),
                (None, Source::Preset),
            ],
            gdef.max_new_tokens,
        ),
        strategy: p.pick(
            "generation.strategy",
            [
                (args.greedy.then_some(Strategy::Greedy), Source::Flag),
                (fg.strategy, Source::File),
                (None, Source::Preset),
            ],
            gdef.strategy,
        ),
        temperature: p.pick(
            "generation.temperature",
            [
                (args.temperature, Source::Flag),
                (fg.temperature, Source::File),
                (None, Source::Preset),
            ],
            gdef.temperature,
        ),
        top_p: p.pick(
            "generation.top_p",
            [
                (args.top_p, Source::Flag),
                (fg.top_p, Source::File),
                (None, Source::Preset),
            ],
            gdef.top_p,
        ),
        rng_seed: seed,
    };
    generation.validate()?;

    let convention = p.pick(
        "convention",
        [
            (args.convention, Source::Flag),
            (None, Source::File),
            (None, Source::Preset),
        ],
        ChairConvention::default(),
    );
    let pooling = p.pick(
        "pooling",
        [
            (args.pooling, Source::Flag),
            (None, Source::File),
            (None, Source::Preset),
        ],
        Pooling::default(),
    );

    Ok(Resolved {
        seeds: Seeds {
            image: seed,
            generation: seed,
            negative_image: contrast.negative_image_seed,
            model_init: model.init_seed,
        },
        model,
        mode,
        align,
        effective_start_layer,
        contrast,
        generation,
        prompt,
        convention,
        pooling,
        sources,
    })
}

/// Everything needed to audit or repeat a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub args: Vec<String>,
    pub resolved: Resolved,
    /// FNV-1a checksum of the initialized weights, hex.
    pub model_checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub omegas: Vec<f64>,
    pub start_layers: Vec<usize>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
