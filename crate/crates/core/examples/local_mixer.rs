//! Builds the three MNIST/CIFAR presets, prints parameter counts and runs a
//! forward pass with per-block local logits.

use fwdgrad::mixer::{full_forward, patchify, ForwardOptions, InputShape, MixerConfig, MixerParams, Preset};
use fwdgrad::{RngStream, Tensor};

fn main() -> fwdgrad::Result<()> {
    for (preset, input) in [(Preset::S1_1, InputShape::MNIST), (Preset::M1_16, InputShape::MNIST), (Preset::M8_16, InputShape::CIFAR10)] {
        let cfg = MixerConfig::preset(preset, input);
        let params = MixerParams::<f32>::init(&cfg, 0)?;
        println!(
            "{preset:<6} blocks {} patches {} channels {} groups {}: {} parameters ({} in heads)",
            cfg.blocks,
            cfg.patches(),
            cfg.channels,
            cfg.groups,
            params.num_params(),
            params.head_params()
        );
        let images: Tensor<f32> = RngStream::new(1, 0).uniform_tensor([2, cfg.height, cfg.width, cfg.in_channels], 1.0);
        let (logits, local) = full_forward(&params, &patchify(&images, cfg.side)?, ForwardOptions::default())?;
        println!("        logits {:?}, {} local logit sets", logits.shape(), local.len());
    }
    Ok(())
}
