//! Full black-box transfer comparison: train an unprotected baseline
//! ensemble, a diversity-trained ensemble, and an unprotected surrogate on
//! the same data, craft attacks on the surrogate, and compare how well they
//! transfer to each target.
//!
//! Run with: cargo run --release --example black_box_transfer

use parl::attacks::AttackFamily;
use parl::ensemble::evaluate;
use parl::harness::{eval_rows_for_seed, train_seed, ExperimentConfig, Role};

fn config(gamma2: f64, epochs: usize) -> ExperimentConfig {
    let toml = format!(
        r#"
        name = "moons-transfer"
        seeds = [1, 2, 3]

        [dataset]
        kind = "two_moons"
        n = 3000
        noise = 0.1

        [model]
        kind = "mlp"
        dims = [2, 16, 16, 2]
        activation = "relu"

        [parl]
        gamma1 = 1.0
        gamma2 = {gamma2}

        [optimizer]
        lr = 0.003

        [training]
        epochs = {epochs}
        batch_size = 64

        [evaluation]
        sample_count = 1000
        epsilons = [0.03, 0.05, 0.07]
        families = ["fgsm", "pgd"]
    "#
    );
    ExperimentConfig::from_toml_str(&toml).expect("valid config")
}

fn main() -> parl::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(60);
    let baseline_cfg = config(0.0, epochs);
    let parl_cfg = config(0.5, epochs);

    let mut rows_baseline = Vec::new();
    let mut rows_parl = Vec::new();
    let mut summary = Vec::new();

    for &seed in &parl_cfg.seeds.clone() {
        let t0 = std::time::Instant::now();
        let baseline = train_seed(&baseline_cfg, Role::Target, seed)?;
        let diverse = train_seed(&parl_cfg, Role::Target, seed)?;
        let surrogate = train_seed(&parl_cfg, Role::Surrogate, seed)?;
        let (b_ens, p_ens, s_ens) = (
            baseline.ensemble.as_ref().expect("baseline trained"),
            diverse.ensemble.as_ref().expect("diverse ensemble trained"),
            surrogate.ensemble.as_ref().expect("surrogate trained"),
        );
        println!(
            "seed {seed}: trained 3 ensembles in {:.1}s | clean acc baseline {:.3} vs diverse {:.3} | final R/H baseline {:.3} vs diverse {:.3}",
            t0.elapsed().as_secs_f64(),
            baseline.summary.clean_test_accuracy.unwrap(),
            diverse.summary.clean_test_accuracy.unwrap(),
            baseline.summary.final_r_normalized.unwrap(),
            diverse.summary.final_r_normalized.unwrap(),
        );
        summary.push((
            baseline.summary.clean_test_accuracy.unwrap(),
            diverse.summary.clean_test_accuracy.unwrap(),
            baseline.summary.final_r_normalized.unwrap(),
            diverse.summary.final_r_normalized.unwrap(),
        ));

        let t1 = std::time::Instant::now();
        rows_baseline.extend(eval_rows_for_seed(&baseline_cfg, b_ens, Some(s_ens), seed)?);
        rows_parl.extend(eval_rows_for_seed(&parl_cfg, p_ens, Some(s_ens), seed)?);
        println!("seed {seed}: attack sweeps in {:.1}s", t1.elapsed().as_secs_f64());

        // white-box sanity row at the strongest budget
        let subset = parl::harness::attack_eval::eval_subset(&parl_cfg, seed)?;
        let spec = parl_cfg.evaluation.attack_spec(AttackFamily::Pgd, 0.07);
        let wb_base = evaluate(b_ens, &subset, Some(&spec), None, seed)?;
        let wb_parl = evaluate(p_ens, &subset, Some(&spec), None, seed)?;
        println!(
            "seed {seed}: white-box pgd@0.07 baseline {:.3} vs diverse {:.3}",
            wb_base.accuracy, wb_parl.accuracy
        );
    }

    println!("\n=== 3-seed means, black-box transfer from the unprotected surrogate ===");
    println!("{:<8} {:>8} {:>10} {:>10}", "attack", "epsilon", "baseline", "diverse");
    for family in [AttackFamily::Fgsm, AttackFamily::Pgd] {
        for eps in [0.03, 0.05, 0.07] {
            let b = parl::harness::seed_mean(&rows_baseline, Some(family), eps).unwrap();
            let p = parl::harness::seed_mean(&rows_parl, Some(family), eps).unwrap();
            println!("{:<8} {:>8.2} {:>10.4} {:>10.4}", family.name(), eps, b, p);
        }
    }
    let clean_b = parl::harness::seed_mean(&rows_baseline, None, 0.0).unwrap();
    let clean_p = parl::harness::seed_mean(&rows_parl, None, 0.0).unwrap();
    println!("{:<8} {:>8} {:>10.4} {:>10.4}", "clean", "-", clean_b, clean_p);

    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| {
        summary.iter().map(f).sum::<f64>() / summary.len() as f64
    };
    println!(
        "\nmean clean acc: baseline {:.4}, diverse {:.4}",
        mean(|s| s.0),
        mean(|s| s.1)
    );
    println!(
        "mean final R/H: baseline {:.4}, diverse {:.4}",
        mean(|s| s.2),
        mean(|s| s.3)
    );
    Ok(())
}
