//! Scratch probe for training dynamics (not part of the example set).

use parl::ensemble::{evaluate, EnsembleHandle};
use parl::harness::{train_seed, ExperimentConfig, Role};

fn main() -> parl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.001);
    let noise: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let toml = format!(
        r#"
        name = "probe"
        seeds = [1, 2, 3]
        [dataset]
        kind = "two_moons"
        n = 3000
        noise = {noise}
        [model]
        kind = "mlp"
        dims = [2, 16, 16, 2]
        activation = "relu"
        [parl]
        gamma2 = 0.0
        [optimizer]
        lr = {lr}
        [training]
        epochs = {epochs}
        batch_size = {batch}
    "#
    );
    let config = ExperimentConfig::from_toml_str(&toml)?;
    for &seed in &config.seeds.clone() {
        let t = std::time::Instant::now();
        let run = train_seed(&config, Role::Target, seed)?;
        let ens: &EnsembleHandle = run.ensemble.as_ref().unwrap();
        let (_, test) = config.dataset.build(seed)?;
        let eval = evaluate(ens, &test.subsample(1000, 7), None, None, 0)?;
        println!(
            "seed {seed}: ensemble {:.4}, members {:?} ({:.1}s)",
            eval.accuracy,
            eval.per_member_accuracy.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
