use teformer::data::{gen_order_task, OrderTaskSpec};
use teformer::model::{build_model, configure_ablation, AblationVariant, ModelConfig};
use teformer::neurons::LifParams;
use teformer::training::{train, TrainConfig, TrainData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = match args.get(1).map(|s| s.as_str()) {
        Some("baseline") => AblationVariant::Baseline,
        Some("+tea") => AblationVariant::TeaOnly,
        Some("+tmlp") => AblationVariant::TmlpOnly,
        _ => AblationVariant::Full,
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let n: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10000);
    let tau: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let depth: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(2);
    let placement: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let data = gen_order_task(&OrderTaskSpec {
        t_steps: 8, grid_h: 8, grid_w: 8, n_samples: n, noise_sigma: 0.05, seed: 100,
    }).unwrap();
    let (train_split, test_split) = data.split_at(n * 4 / 5, "train", "test");

    let base_cfg = ModelConfig {
        time_steps: 8, in_channels: 1, image_h: 8, image_w: 8, patch_size: 4,
        embed_dim: 32, depth, heads: 4, mlp_ratio: 4, num_classes: 2, seed: 1, placement,
        neuron: LifParams { tau, ..Default::default() },
        ..Default::default()
    };
    let cfg = configure_ablation(&base_cfg, variant);
    let mut model = build_model::<f32>(&cfg).unwrap();
    eprintln!("variant {:?} depth {depth} placement {placement} tau {tau} params {}", variant, model.param_count());
    let tc = TrainConfig { epochs, batch_size: batch, lr, seed: 1, ..Default::default() };
    let report = train(&mut model, TrainData::Temporal(&train_split), TrainData::Temporal(&test_split), &tc).unwrap();
    for m in &report.history {
        println!("epoch {:3} {:5} loss {:.4} top1 {:.4} wall {:.1}s alphas {:?}", m.epoch, m.split, m.loss, m.top1, m.wall_s, m.tea_alphas);
    }
}
