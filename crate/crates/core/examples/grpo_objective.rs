//! Group-relative advantages, the clipped surrogate with its KL penalty, and
//! a finite-difference check of the analytic gradient on a toy policy.

use agentic_search::grpo::{
    group_advantages, surrogate, surrogate_gradient, GrpoConfig, Norm, PolicySurface, TokenMask, ToyPolicy,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rewards = [1.0, 0.1, 0.9, 0.0];
    println!("rewards     {rewards:?}");
    println!("std-norm    {:?}", group_advantages(&rewards, Norm::default())?);
    println!("mean-only   {:?}", group_advantages(&rewards, Norm::MeanOnly)?);

    // four positions, vocabulary of three; sequences share the positions
    let policy = ToyPolicy::new(vec![
        vec![0.2, -0.1, 0.5],
        vec![1.0, 0.0, -1.0],
        vec![0.3, 0.3, 0.3],
        vec![-0.5, 0.8, 0.1],
    ]);
    let old = ToyPolicy::new(vec![vec![0.0; 3]; 4]);
    let reference = ToyPolicy::new(vec![vec![0.1, 0.0, -0.1]; 4]);
    let seqs = vec![vec![2, 0, 1, 1], vec![0, 1, 2, 0]];
    // the middle two tokens of the first rollout came from retrieval
    let masks = vec![TokenMask { bits: vec![1, 0, 0, 1] }, TokenMask::ones(4)];
    let adv = group_advantages(&[1.0, 0.0], Norm::default())?;
    let cfg = GrpoConfig { beta: 0.05, ..GrpoConfig::default() };

    let surfaces_for = |p: &ToyPolicy| -> Vec<PolicySurface> {
        seqs.iter()
            .map(|s| PolicySurface { new: p.log_probs(s), old: old.log_probs(s), reference: reference.log_probs(s) })
            .collect()
    };
    let surfaces = surfaces_for(&policy);
    let value = surrogate(&adv, &masks, &surfaces, &cfg, true)?;
    println!("\nobjective {:.6}  loss {:.6}", value.objective, value.loss);

    let analytic = policy.logit_gradient(&seqs, &surrogate_gradient(&adv, &masks, &surfaces, &cfg)?);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for t in 0..4 {
        for j in 0..3 {
            let (mut up, mut down) = (policy.clone(), policy.clone());
            up.logits[t][j] += h;
            down.logits[t][j] -= h;
            let numeric = (surrogate(&adv, &masks, &surfaces_for(&up), &cfg, true)?.loss
                - surrogate(&adv, &masks, &surfaces_for(&down), &cfg, true)?.loss)
                / (2.0 * h);
            worst = worst.max((numeric - analytic[t][j]).abs());
        }
    }
    println!("max |analytic - numeric| = {worst:.2e}");
    println!("exact KL at position 0: {:.6}", policy.exact_kl(&reference, 0));
    Ok(())
}
