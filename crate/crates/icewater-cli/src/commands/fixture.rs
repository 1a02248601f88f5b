//! `icewater fixture` — write the synthetic dataset plus a desk-scale config
//! so every other command is runnable immediately.

use icewater::fixture;

use crate::commands::Ctx;
use crate::config::{PipelineConfig, SamplerConfig};
use crate::{Classify, CliResult};

pub fn run(ctx: &Ctx, scenes: u8, size: usize, with_pretrained: bool) -> CliResult {
    let out = ctx.out_dir()?;
    if scenes == 0 {
        return Err(crate::usage_error("--scenes must be at least 1"));
    }
    if size < 64 {
        return Err(crate::usage_error("--size must be at least 64"));
    }
    std::fs::create_dir_all(out).data()?;
    let summary = fixture::write_dataset(out, scenes, size, ctx.seed).data()?;

    // Desk-scale configuration sized to the fixture.
    let mut config = PipelineConfig::load_or_default(ctx.config_path.as_deref()).usage()?;
    if ctx.config_path.is_none() {
        let patch = (size / 4).clamp(32, 128);
        config.sampler = SamplerConfig {
            patch_size: patch,
            patches_per_region: 8,
            ..SamplerConfig::default()
        };
        config.train.batch_size = 4;
        config.train.initial_lr = 1e-4;
        config.train.max_epochs = 20;
        config.inference.tile = 1024;
        config.inference.overlap = 256;
    }
    config.save(&out.join("config.toml")).data()?;

    let pretrained = if with_pretrained {
        let path = out.join("pretrained_encoder.safetensors");
        fixture::write_synthetic_pretrained(&path, &config.model, ctx.seed).data()?;
        Some(path)
    } else {
        None
    };

    println!(
        "fixture: {} scenes of {size}x{size} at {}, config at {}",
        summary.months.len(),
        out.display(),
        out.join("config.toml").display()
    );
    if let Some(p) = pretrained {
        println!("fixture: synthetic pretrained encoder at {}", p.display());
    }
    Ok(())
}
