//! Writes the default model's parameter dump and a seeded image so external
//! scripts can recompute forward passes independently.
//!
//! cargo run -p sevi-lab --example dump_fixture -- OUT_DIR [IMAGE_SEED]

use std::path::PathBuf;

use sevi_lab::model::{init_model, ModelConfig, SyntheticImage};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(
        args.next()
            .ok_or("usage: dump_fixture OUT_DIR [IMAGE_SEED]")?,
    );
    let image_seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    std::fs::create_dir_all(&dir)?;
    let config = ModelConfig::default();
    let params = init_model(&config)?;
    params.write_dump(&dir.join("params.bin"), &dir.join("params.json"))?;
    let image = SyntheticImage::from_seed(&config, image_seed);
    std::fs::write(dir.join("image.json"), serde_json::to_string(&image)?)?;
    for seed in [config.init_seed, config.init_seed + 1] {
        let p = init_model(&ModelConfig {
            init_seed: seed,
            ..config.clone()
        })?;
        p.write_dump(
            &dir.join(format!("params_seed{seed}.bin")),
            &dir.join(format!("params_seed{seed}.json")),
        )?;
    }
    Ok(())
}
