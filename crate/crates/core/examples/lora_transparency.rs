//! Zero-initialised LoRA leaves the model output untouched, and the
//! learnable parameter count for each placement.

use candle_core::{DType, Device, Tensor};
use urbansam::model::{analytic_param_count, LoraPlacement, ModelConfig, UrbanSam};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let with = UrbanSam::new(ModelConfig::default(), DType::F32, 1)?;
    let mut cfg = ModelConfig::default();
    cfg.components.lora = false;
    let plain = UrbanSam::new(cfg, DType::F32, 1)?;

    let x = Tensor::randn(0f32, 1.0, (4, 3, 64, 64), &Device::Cpu)?;
    let a = with.forward(&x)?.seg_logits;
    let b = plain.forward(&x)?.seg_logits;
    let diff = (a - b)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("max |LoRA - plain| before training: {diff:e}");

    println!("{:14} {:>12} {:>12}", "placement", "learnable", "frozen");
    for placement in LoraPlacement::ALL {
        let mut cfg = ModelConfig::default();
        cfg.lora.placement = placement;
        let n = analytic_param_count(&cfg);
        println!("{:14} {:>12} {:>12}", format!("{placement:?}"), n.trainable, n.frozen);
    }
    for rank in [1, 4, 8, 16] {
        let mut cfg = ModelConfig::default();
        cfg.lora.rank = rank;
        cfg.lora.alpha = 2.0 * rank as f64;
        println!("rank {rank:2}: {:.4} M learnable", analytic_param_count(&cfg).learnable_millions());
    }
    Ok(())
}
