use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LinkId, Network, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub local_guidance: bool,
    pub regional_guidance: bool,
    /// Regional occupancy above which vehicles are turned away from the guided region.
    pub regional_threshold: f64,
    /// Share of drivers who follow regional guidance.
    pub compliance: f64,
    pub guided_region: u32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            local_guidance: false,
            regional_guidance: false,
            regional_threshold: 0.95,
            compliance: 1.0,
            guided_region: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn joint(compliance: f64) -> Self {
        GuidanceConfig {
            local_guidance: true,
            regional_guidance: true,
            compliance,
            ..Self::default()
        }
    }
}

/// Links a vehicle may take at `node` when it arrived over `incoming`. The reverse
/// link is only offered where U-turns are allowed, or at a dead end.
pub fn downstream_links(net: &Network, node: NodeId, incoming: Option<LinkId>) -> Result<Vec<LinkId>> {
    let out = net.out_links(node);
    if out.is_empty() {
        return Err(Error::Topology(format!(
            "node {} has no outgoing links",
            net.node(node).id
        )));
    }
    let back = incoming.and_then(|l| net.reverse_of(l));
    let allow_u = net.node(node).allows_u_turn;
    let v: Vec<LinkId> = out.iter().copied().filter(|&l| allow_u || Some(l) != back).collect();
    Ok(if v.is_empty() { out.to_vec() } else { v })
}

/// Next link for a vehicle searching for an on-street spot at `node`.
///
/// `occupied` holds the occupied on-street spots per link index. `allowed` narrows the
/// candidates (regional guidance); it is ignored when it would leave nothing.
pub fn local_search_step<R: Rng + ?Sized>(
    net: &Network,
    node: NodeId,
    incoming: Option<LinkId>,
    occupied: &[u32],
    guidance: &GuidanceConfig,
    allowed: &dyn Fn(LinkId) -> bool,
    rng: &mut R,
) -> Result<LinkId> {
    let downstream = downstream_links(net, node, incoming)?;
    let restricted: Vec<LinkId> = downstream.iter().copied().filter(|&l| allowed(l)).collect();
    let pool = if restricted.is_empty() { downstream } else { restricted };
    let supplied: Vec<LinkId> = pool
        .iter()
        .copied()
        .filter(|&l| net.link(l).parking_capacity > 0)
        .collect();

    if guidance.local_guidance {
        let occ = |l: LinkId| occupied[l.0] as f64 / net.link(l).parking_capacity as f64;
        let free: Vec<LinkId> = supplied
            .iter()
            .copied()
            .filter(|&l| occupied[l.0] < net.link(l).parking_capacity)
            .collect();
        if let Some(best) = free.iter().map(|&l| occ(l)).min_by(f64::total_cmp) {
            let ties: Vec<LinkId> = free.into_iter().filter(|&l| occ(l) <= best + 1e-12).collect();
            return Ok(*ties.choose(rng).expect("non-empty"));
        }
        return Ok(*pool.choose(rng).expect("non-empty"));
    }
    if supplied.is_empty() {
        // nothing to search here, keep going to the next intersection
        return Ok(*pool.choose(rng).expect("non-empty"));
    }
    Ok(*supplied.choose(rng).expect("non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionalDecision {
    Divert,
    Proceed,
}

/// Decision for a driver whose compliance draw is `u` in `[0, 1)`.
pub fn regional_decision(region_occupancy: f64, guidance: &GuidanceConfig, u: f64) -> RegionalDecision {
    if guidance.regional_guidance && region_occupancy > guidance.regional_threshold && u < guidance.compliance {
        RegionalDecision::Divert
    } else {
        RegionalDecision::Proceed
    }
}

pub fn apply_regional_guidance<R: Rng + ?Sized>(
    region_occupancy: f64,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> RegionalDecision {
    regional_decision(region_occupancy, guidance, rng.gen())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn interior() -> (Network, NodeId, LinkId) {
        let net = build_grid(3, 3, 0.1, 50.0, 150.0, 5, 0.01).unwrap();
        // node 4 is the centre; arrive from node 3
        let incoming = net
            .link_ids()
            .find(|&l| net.link(l).from == NodeId(3) && net.link(l).to == NodeId(4))
            .unwrap();
        (net, NodeId(4), incoming)
    }

    #[test]
    fn uniform_over_three_downstream() {
        let (net, node, incoming) = interior();
        let occupied = vec![5; net.links().len()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = std::collections::HashMap::new();
        let n = 30_000;
        for _ in 0..n {
            let l = local_search_step(
                &net,
                node,
                Some(incoming),
                &occupied,
                &GuidanceConfig::none(),
                &|_| true,
                &mut rng,
            )
            .unwrap();
            *counts.entry(l).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        assert!(!counts.contains_key(&net.reverse_of(incoming).unwrap()));
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.015);
        }
    }

    #[test]
    fn local_guidance_picks_least_occupied() {
        let (net, node, incoming) = interior();
        let down = downstream_links(&net, node, Some(incoming)).unwrap();
        let mut occupied = vec![0; net.links().len()];
        // occupancies 0.8, 0.4 and 1.0 on a 5-spot supply
        occupied[down[0].0] = 4;
        occupied[down[1].0] = 2;
        occupied[down[2].0] = 5;
        let g = GuidanceConfig {
            local_guidance: true,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let l = local_search_step(&net, node, Some(incoming), &occupied, &g, &|_| true, &mut rng).unwrap();
            assert_eq!(l, down[1]);
        }
    }

    #[test]
    fn no_supplies_keeps_driving() {
        let mut net = build_grid(3, 3, 0.1, 50.0, 150.0, 0, 0.0).unwrap();
        let (_, node, incoming) = interior();
        let far = net.link_ids().find(|&l| net.link(l).from == NodeId(0)).unwrap();
        net.set_parking_capacity(far, 3, 0.01).unwrap();
        let occupied = vec![0; net.links().len()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = local_search_step(
            &net,
            node,
            Some(incoming),
            &occupied,
            &GuidanceConfig::none(),
            &|_| true,
            &mut rng,
        )
        .unwrap();
        assert!(downstream_links(&net, node, Some(incoming)).unwrap().contains(&l));
    }

    #[test]
    fn regional_rules() {
        let g = GuidanceConfig::joint(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(apply_regional_guidance(0.96, &g, &mut rng), RegionalDecision::Divert);
        assert_eq!(apply_regional_guidance(0.90, &g, &mut rng), RegionalDecision::Proceed);
        let nobody = GuidanceConfig::joint(0.0);
        assert_eq!(
            apply_regional_guidance(0.96, &nobody, &mut rng),
            RegionalDecision::Proceed
        );
        assert_eq!(
            regional_decision(0.99, &GuidanceConfig::none(), 0.0),
            RegionalDecision::Proceed
        );
    }
}
