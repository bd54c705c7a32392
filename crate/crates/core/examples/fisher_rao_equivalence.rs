//! The softmax image of the dual mirror flow matches the primal Fisher-Rao flow.

use frmdp::bench::{generate_mdp, random_logits, rng, GeneratorSpec};
use frmdp::flow::{integrate_fisher_rao_flow, integrate_mirror_flow, FlowConfig};

fn main() -> frmdp::Result<()> {
    let mdp = generate_mdp(&GeneratorSpec::new(4, 3, 11).with_gamma_tau(0.9, 1.0))?;
    let z0 = random_logits(&mut rng(2), 4, 3, 1.0);
    let pi0 = mdp.policy_from_logits(&z0)?;
    for dt in [0.2, 0.1, 0.05, 0.025, 1e-3] {
        let cfg = FlowConfig::new(2.0).with_dt(dt).with_snapshot_every((0.2 / dt).round() as usize);
        let dual = integrate_mirror_flow(&mdp, &z0, &cfg)?;
        let primal = integrate_fisher_rao_flow(&mdp, &pi0, &cfg)?;
        let dev = dual
            .pi_snapshots
            .iter()
            .zip(&primal.pi_snapshots)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        println!("dt = {dt:<6} sup deviation = {dev:.3e}");
    }
    Ok(())
}
