use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sevi_lab::align::AlignConfig;
use sevi_lab::decode::{generate, Interventions};
use sevi_lab::flow::{compute_flow, peak_attention_stats, vision_mask_probe};
use sevi_lab::metrics::{
    amber_scores, capture_corpus, chair_scores, composite_scores, object_recall, CaptionRecord,
    CaptureSets, ChairScores, GroundTruth,
};
use sevi_lab::model::{
    context_inputs, encode_image, forward_full, init_model, KVCache, ModelParams, SequenceLayout,
    SyntheticImage,
};
use sevi_lab::report::{flow_csv, peaks_csv, probe_csv, read_jsonl};
use sevi_lab::{Error, Result};

use crate::args::Command;
use crate::resolve::{manifest_path, resolve, GridSpec, Resolved, RunManifest};
use crate::Cli;

/// Generated token 0 ends a sentence.
pub const SENTENCE_BREAK: u32 = 0;
/// Tokens `1..OBJECT_VOCAB` name objects `obj_<id>`; the rest are filler.
pub const OBJECT_VOCAB: u32 = 64;

pub fn run(cli: &Cli, raw_args: &[String]) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest);
    }
    let out = cli
        .global
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    let is_grid = matches!(cli.command, Command::Grid { .. });
    let resolved = resolve(&cli.global, is_grid)?;
    let params = init_model(&resolved.model)?;
    let mut outputs = vec![out.clone()];
    let mut grid_spec = None;

    match &cli.command {
        Command::AnalyzeFlow => {
            let (attention, layout) = attention_maps(&params, &resolved)?;
            write(&out, &flow_csv(&compute_flow(&attention, &layout)?))?;
        }
        Command::ProbeMask { mask_layers } => {
            let layers = if mask_layers.is_empty() {
                (1..=resolved.model.num_layers + 1).collect()
            } else {
                mask_layers.clone()
            };
            let image = SyntheticImage::from_seed(&resolved.model, resolved.seeds.image);
            let rows = layers
                .iter()
                .map(|&l| vision_mask_probe(&params, &image, &resolved.prompt, l))
                .collect::<Result<Vec<_>>>()?;
            write(&out, &probe_csv(&rows))?;
        }
        Command::Generate => {
            let image = SyntheticImage::from_seed(&resolved.model, resolved.seeds.image);
            let interventions = Interventions {
                align: resolved.effective_align(),
                boost: None,
            };
            let generation = generate(
                &params,
                &image,
                &resolved.prompt,
                &interventions,
                &resolved.contrast,
                &resolved.generation,
            )?;
            let mut text = String::new();
            for step in &generation.trace {
                text.push_str(&serde_json::to_string(step)?);
                text.push('\n');
            }
            write(&out, &text)?;
            println!("{}", serde_json::to_string(&generation.tokens)?);
        }
        Command::Grid { truths } => {
            let omegas = nonempty(&cli.global.omega, "omega")?;
            let start_layers = nonempty(&cli.global.start_layer, "start-layer")?;
            let truths = load_truths(truths)?;
            write(
                &out,
                &grid(&params, &resolved, &omegas, &start_layers, &truths)?,
            )?;
            grid_spec = Some(GridSpec {
                omegas,
                start_layers,
            });
        }
        Command::EvalChair { captions, truths } => {
            let records = load_captions(captions)?;
            let truths = load_truths(truths)?;
            let scores = chair_scores(&records, &truths, resolved.convention, resolved.pooling)?;
            let report = ChairReport {
                scores,
                recall: object_recall(&records, &truths)?,
                captions: records.len(),
            };
            write_json(&out, &report)?;
        }
        Command::EvalAmber { captions, truths } => {
            let records = load_captions(captions)?;
            let truths = load_truths(truths)?;
            write_json(&out, &amber_scores(&records, &truths)?)?;
        }
        Command::EvalCapture { corpus } => {
            let items: Vec<CaptureSets> = read_input(corpus)?;
            write_json(&out, &capture_corpus(&items)?)?;
        }
        Command::StatsPeaks => {
            let (attention, layout) = attention_maps(&params, &resolved)?;
            let kappa = resolved.align.map_or(
                sevi_lab::align::preset(sevi_lab::align::Mode::Focused).kappa,
                |a| a.kappa,
            );
            write(
                &out,
                &peaks_csv(&peak_attention_stats(&attention, &layout, kappa)?),
            )?;
        }
        Command::DumpParams => {
            let index = out.with_extension("index.json");
            params.write_dump(&out, &index)?;
            outputs.push(index);
        }
        Command::Replay { .. } => unreachable!("handled above"),
    }

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cli.command.name().into(),
        args: raw_args.to_vec(),
        resolved,
        model_checksum: format!("{:016x}", params.checksum()),
        grid: grid_spec,
        outputs,
    };
    let mpath = manifest_path(&out);
    write(&mpath, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    log::info!("wrote {} and {}", out.display(), mpath.display());
    Ok(())
}

fn replay(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let cli = crate::parse(&manifest.args)
        .map_err(|e| Error::Input(format!("manifest arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Error::Input("a manifest cannot record a replay".into()));
    }
    run(&cli, &manifest.args)
}

fn attention_maps(
    params: &ModelParams,
    resolved: &Resolved,
) -> Result<(Vec<sevi_lab::model::AttentionTensor>, SequenceLayout)> {
    let image = SyntheticImage::from_seed(&resolved.model, resolved.seeds.image);
    let visual = encode_image(&image, params)?;
    let layout = SequenceLayout::for_prompt(visual.len(), resolved.prompt.len())?;
    let inputs = context_inputs(&visual, &resolved.prompt);
    let out = forward_full(params, &mut KVCache::new(params), &inputs, &layout, None)?;
    Ok((out.attention, layout))
}

fn nonempty<T: Clone>(values: &[T], flag: &str) -> Result<Vec<T>> {
    if values.is_empty() {
        return Err(Error::Config(format!(
            "grid needs --{flag} with at least one value"
        )));
    }
    Ok(values.to_vec())
}

/// Split generated tokens into sentences of object mentions.
pub fn tokens_to_caption(caption_id: &str, tokens: &[u32]) -> CaptionRecord {
    let sentences = tokens
        .split(|&t| t == SENTENCE_BREAK)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.iter()
                .filter(|&&t| t < OBJECT_VOCAB)
                .map(|t| format!("obj_{t}"))
                .collect()
        })
        .collect();
    CaptionRecord {
        caption_id: caption_id.into(),
        objects: Vec::new(),
        sentences,
    }
    .normalized()
}

fn grid(
    params: &ModelParams,
    resolved: &Resolved,
    omegas: &[f64],
    start_layers: &[usize],
    truths: &[GroundTruth],
) -> Result<String> {
    let base = resolved.align.expect("grid always aligns");
    let cells: Vec<(f64, usize)> = omegas
        .iter()
        .flat_map(|&o| start_layers.iter().map(move |&s| (o, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(omega, start_layer)| {
            let align = AlignConfig {
                omega,
                start_layer,
                ..base
            }
            .clamped_to(resolved.model.num_layers);
            align.validate(resolved.model.num_layers)?;
            grid_cell(params, resolved, align, truths)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv =
        String::from("omega,start_layer,chairs,chairi,recall,r_minus_cs_ci,two_r_minus_cs_ci\n");
    for ((omega, start_layer), (chair, recall)) in cells.iter().zip(rows) {
        let (cs, ci, r) = (100.0 * chair.chairs, 100.0 * chair.chairi, 100.0 * recall);
        let (c1, c2) = composite_scores(r, cs, ci);
        writeln!(csv, "{omega},{start_layer},{cs},{ci},{r},{c1},{c2}").expect("string write");
    }
    Ok(csv)
}

fn grid_cell(
    params: &ModelParams,
    resolved: &Resolved,
    align: AlignConfig,
    truths: &[GroundTruth],
) -> Result<(ChairScores, f64)> {
    let interventions = Interventions {
        align: Some(align),
        boost: None,
    };
    let records = truths
        .iter()
        .enumerate()
        .map(|(i, truth)| {
            let image = SyntheticImage::from_seed(
                &resolved.model,
                resolved.seeds.image.wrapping_add(i as u64),
            );
            let generation = generate(
                params,
                &image,
                &resolved.prompt,
                &interventions,
                &resolved.contrast,
                &resolved.generation,
            )?;
            Ok(tokens_to_caption(&truth.caption_id, &generation.tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let chair = chair_scores(&records, truths, resolved.convention, resolved.pooling)?;
    Ok((chair, object_recall(&records, truths)?))
}

#[derive(Serialize)]
struct ChairReport {
    #[serde(flatten)]
    scores: ChairScores,
    recall: f64,
    captions: usize,
}

fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(Error::Input(format!(
            "missing input file {}",
            path.display()
        )));
    }
    read_jsonl(path)
}

fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    Ok(read_input::<CaptionRecord>(path)?
        .into_iter()
        .map(CaptionRecord::normalized)
        .collect())
}

fn load_truths(path: &Path) -> Result<Vec<GroundTruth>> {
    read_input::<GroundTruth>(path)?
        .into_iter()
        .map(GroundTruth::normalized)
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}
