#![allow(dead_code)]

use fedvar::federated::{init_from_largest_client, pooled_operator_norm, FedConfig, FistaConfig};
use fedvar::dp::{NoisePolicy, PrivacyBudget};
use fedvar::single_client::AdmmConfig;
use fedvar::tuning::AnchorRule;
use fedvar::var::{assemble_dgp, lag_design, simulate, Dgp, DgpSpec, Innovations, LagDesign};
use fedvar::{Mat, SeedTree};

pub fn world(seed: u64, d: usize, rank: usize, clients: usize, len: usize) -> (Dgp<f64>, Vec<LagDesign<f64>>) {
    let tree = SeedTree::new(seed);
    let spec = DgpSpec {
        d,
        rank,
        clients,
        ..DgpSpec::standard()
    };
    let dgp = assemble_dgp(&spec, &mut tree.child(0).rng()).unwrap();
    let designs = (0..clients)
        .map(|k| {
            let mut rng = tree.path(&[1, k as u64]).rng();
            lag_design(&simulate(&dgp.client_matrix(k), 1, len, 200, &Innovations::StandardNormal, &mut rng).unwrap())
        })
        .collect();
    (dgp, designs)
}

pub fn anchored_admm(design: &LagDesign<f64>) -> AdmmConfig<f64> {
    let rule = AnchorRule::standard();
    let (pd, n) = (design.stacked_dim(), design.len());
    AdmmConfig::new(rule.lambda(pd, n), Some(rule.omega(pd, n)), None)
}

pub fn fed_setup(designs: &[LagDesign<f64>], rank: usize, noise: NoisePolicy<f64>, eps: f64, delta: f64) -> (FedConfig<f64>, Vec<FistaConfig<f64>>) {
    let admm: Vec<_> = designs.iter().map(anchored_admm).collect();
    let init: Mat<f64> = init_from_largest_client(designs, &admm, rank).unwrap();
    let total: usize = designs.iter().map(|d| d.len()).sum();
    let rounds = fedvar::federated::default_rounds(total);
    let cfg = FedConfig {
        rank,
        step_rho: 0.25 / pooled_operator_norm(designs).unwrap(),
        rounds,
        init_a0: init,
        weights: fedvar::federated::sample_size_weights(&designs.iter().map(|d| d.len()).collect::<Vec<_>>()).unwrap(),
        noise,
        budget: PrivacyBudget::new(eps, delta, rounds).unwrap(),
    };
    let rule = AnchorRule::standard();
    let fista = designs
        .iter()
        .map(|d| FistaConfig::for_design(d, rule.omega(d.stacked_dim(), d.len())).unwrap())
        .collect();
    (cfg, fista)
}
