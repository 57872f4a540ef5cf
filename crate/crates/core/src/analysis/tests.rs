use proptest::prelude::*;

use super::*;
use crate::sim::{self, ClientPlacement, SimConfig};
use crate::topology::{LinkParams, ThreeLayerShape};

fn small_tree() -> (Topology, NodeId, Vec<NodeId>) {
    let mut t = Topology::build_three_layer(ThreeLayerShape::new(1, 2, 1, 3), LinkParams::default()).unwrap();
    let c = t.attach_external(sim::EXTERNAL_CLIENT_IP, LinkParams::default());
    (t, c, vec![NodeId(5), NodeId(6), NodeId(8)])
}

#[test]
fn small_tree_case_counts_eleven_links() {
    let (t, c, d) = small_tree();
    let case = PlacementCase::from_topology(&t, c, &d).unwrap();
    assert_eq!(case.class, ClientClass::Outside);
    assert_eq!(case.asc, vec![0, 1, 3]);
    assert_eq!(case.desc, vec![3, 1, 3]);
    assert_eq!(case.l_total(), 11);
    assert_eq!(case.eliminated(), 4);
    assert_eq!(case.saving_ratio(), Some(4.0 / 11.0));
    let tr = chain_traversals(&t, c, &d).unwrap();
    let asc: Vec<_> = tr.iter().filter(|t| t.ascending && !t.external).map(|t| t.number).collect();
    let desc: Vec<_> = tr.iter().filter(|t| !t.ascending && !t.external).map(|t| t.number).collect();
    assert_eq!(asc, vec![5, 7, 8, 9]);
    assert_eq!(desc, vec![2, 3, 4, 6, 10, 11, 12]);
}

#[test]
fn degenerate_cases() {
    let one = PlacementCase::new(ClientClass::CoServer, vec![0], vec![0]).unwrap();
    assert_eq!(one.l_total(), 0);
    assert_eq!(one.saving_ratio(), None);
    let rack = PlacementCase::new(ClientClass::CoRack, vec![1], vec![1]).unwrap();
    assert_eq!(rack.saving_ratio(), Some(0.0));
    // D_1 on the client's server keeps its own ascent.
    let cs = PlacementCase::new(ClientClass::CoServer, vec![0, 3, 3], vec![0, 3, 3]).unwrap();
    assert_eq!(cs.saving_ratio(), Some(3.0 / 12.0));
    assert_eq!(enumerate_average_savings(2, ClientClass::CoServer), 0.0);
}

#[test]
fn invalid_cases_are_rejected() {
    assert_eq!(PlacementCase::new(ClientClass::Outside, vec![], vec![]), Err(AnalysisError::Empty));
    assert_eq!(PlacementCase::new(ClientClass::Outside, vec![0], vec![3, 1]), Err(AnalysisError::LengthMismatch));
    assert!(PlacementCase::new(ClientClass::Outside, vec![1], vec![3]).is_err());
    assert!(PlacementCase::new(ClientClass::CrossRack, vec![1], vec![1]).is_err());
    assert!(PlacementCase::new(ClientClass::Outside, vec![0, 2], vec![3, 1]).is_err());
    assert!(PlacementCase::new(ClientClass::Outside, vec![0, 4], vec![3, 4]).is_err());
}

/// Nested-loop reference: hop 0 fixed per class, later hops 1..=3.
fn oracle_mean(k: usize, class: ClientClass) -> f64 {
    let first: Vec<u32> = match class {
        ClientClass::Outside => vec![0],
        ClientClass::CoServer => vec![0],
        ClientClass::CoRack => vec![1],
        ClientClass::CrossRack => vec![2, 3],
    };
    let desc0 = |a: u32| if class == ClientClass::Outside { 3 } else { a };
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut rest = vec![vec![]];
    for _ in 1..k {
        rest = rest.into_iter().flat_map(|v: Vec<u32>| (1..=3).map(move |a| [v.clone(), vec![a]].concat())).collect();
    }
    for &a0 in &first {
        for r in &rest {
            let total = a0 + desc0(a0) + 2 * r.iter().sum::<u32>();
            let skip = if class == ClientClass::CoServer { 1 } else { 0 };
            let elim: u32 = r.iter().skip(skip).sum();
            sum += if total == 0 { 0.0 } else { elim as f64 / total as f64 };
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn enumeration_matches_oracle() {
    for k in 1..=5 {
        for class in ClientClass::ALL {
            let got = enumerate_average_savings(k, class);
            assert!((got - oracle_mean(k, class)).abs() < 1e-12, "k={k} {class:?}");
        }
    }
    assert_eq!(enumerate_cases(3, ClientClass::CrossRack).len(), 18);
    let k3 = pooled_average_savings(3);
    assert!((0.15..=0.40).contains(&k3), "{k3}");
    for k in 2..5 {
        assert!(pooled_average_savings(k + 1) > pooled_average_savings(k));
    }
}

fn chain_and_mirrored(k: usize, client: ClientPlacement) -> (sim::RunMetrics, sim::RunMetrics, PlacementCase, Topology, NodeId) {
    let base = SimConfig { k, client, block_size: 256 << 10, ..SimConfig::default() };
    let chain = sim::run(&SimConfig { mode: crate::replication::Mode::Chain, ..base.clone() }).unwrap();
    let mr = sim::run(&base).unwrap();
    assert_eq!(chain.data_nodes, mr.data_nodes);
    let (topo, c) = sim::topology_for(&base).unwrap();
    let case = PlacementCase::from_topology(&topo, c, &chain.data_nodes).unwrap();
    let mut origins = vec![c];
    origins.extend(&chain.data_nodes[..k - 1]);
    let links: usize = origins.iter().map(|&o| chain.replication_links_from(o).len()).sum();
    assert_eq!(links as u32, case.l_total());
    (chain, mr, case, topo, c)
}

#[test]
fn simulated_saving_matches_analytic_for_outside_client() {
    for k in 2..=5 {
        let (chain, mr, case, topo, c) = chain_and_mirrored(k, ClientPlacement::Outside);
        let simulated = 1.0 - mr.payload_link_traversals() as f64 / chain.payload_link_traversals() as f64;
        let analytic = case.saving_ratio().unwrap();
        let mut union = std::collections::BTreeSet::new();
        for &d in &mr.data_nodes {
            let nodes = topo.path_nodes(c, d).unwrap();
            union.extend(nodes.windows(2).skip(1).map(|w| (w[0], w[1])));
        }
        if union.len() as u32 == case.l_total() - case.eliminated() {
            assert!((simulated - analytic).abs() <= 0.02, "k={k}: {simulated} vs {analytic}");
        } else {
            // Shared descents are carried once by the tree.
            assert!(simulated > analytic, "k={k}: {simulated} vs {analytic}");
        }
    }
}

#[test]
fn in_dc_client_mirror_traffic_follows_path_union() {
    for (k, host) in [(4, 14), (2, 8), (3, 7), (5, 20)] {
        let (_, mr, _, topo, c) = chain_and_mirrored(k, ClientPlacement::Host(NodeId(host)));
        let mut union = std::collections::BTreeSet::new();
        for &d in &mr.data_nodes {
            let nodes = topo.path_nodes(c, d).unwrap();
            for w in nodes.windows(2) {
                union.insert((w[0], w[1]));
            }
        }
        let used: std::collections::BTreeSet<_> = mr.replication_links_from(c).iter().map(|l| (l.from, l.to)).collect();
        assert_eq!(used, union, "k={k} client={host}");
    }
}

#[test]
fn scenario_toml_round_trips_and_rejects_unknown_keys() {
    let cfg = ScenarioConfig::default();
    assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let text = "name = \"x\"\n[replication]\nk = 4\nclient = 3\nplacement = [0, 4, 8, 12]\n[engine]\nseed = 9\n";
    let c = ScenarioConfig::from_toml(text).unwrap();
    assert_eq!(c.replication.client, ClientSpec::Host(3));
    assert_eq!(c.engine.seed, 9);
    assert!(matches!(ScenarioConfig::from_toml("[engine]\nsed = 1\n"), Err(ConfigError::Parse(_))));
    assert!(matches!(ScenarioConfig::from_toml("bogus = 1\n"), Err(ConfigError::Parse(_))));
    assert!(matches!(ScenarioConfig::from_toml("[replication]\nk = 0\n"), Err(ConfigError::Invalid { .. })));
    assert!(matches!(ScenarioConfig::from_toml("[replication]\nclient = \"moon\"\n"), Err(ConfigError::Invalid { .. })));
    assert!(matches!(ScenarioConfig::from_toml("[topology]\nloss = 1.0\n"), Err(ConfigError::Invalid { .. })));
    let sim = c.to_sim(crate::replication::Mode::Chain, 4).unwrap();
    assert_eq!(sim.placement.as_ref().unwrap().len(), 4);
    assert!(c.to_sim(crate::replication::Mode::Chain, 5).is_err());
}

#[test]
fn csv_rows_and_sweep_shape() {
    let mut cfg = ScenarioConfig::default();
    cfg.replication.block_size = 128 << 10;
    let runs = run_scenario(&cfg).unwrap();
    let mut buf = Vec::new();
    write_csv(&runs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_HEADER);
    assert!(lines[1].starts_with("default,chain,3,"));
    assert!(lines[2].starts_with("default,mirrored,3,"));
    let swept = sweep(&cfg, 2..=5).unwrap();
    assert_eq!(swept.len(), 8);
    let keys: Vec<_> = swept.iter().map(|r| (r.metrics.k, r.metrics.mode)).collect();
    assert_eq!(keys[0], (2, crate::replication::Mode::Chain));
    assert_eq!(keys[7], (5, crate::replication::Mode::Mirrored));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out.csv");
    emit_csv(&swept, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 9);
    assert!(emit_csv(&swept, &dir.path().join("missing/out.csv")).is_err());
}

proptest! {
    #[test]
    fn ratio_bounds_and_monotonicity(class in 0usize..4, hops in proptest::collection::vec(1u32..=3, 0..5), extra in 1u32..=3) {
        let class = ClientClass::ALL[class];
        let (a0, d0) = class.first_hop_options()[0];
        let mut asc = vec![a0];
        asc.extend(&hops);
        let mut desc = vec![d0];
        desc.extend(&hops);
        let case = PlacementCase::new(class, asc.clone(), desc.clone()).unwrap();
        if let Some(r) = case.saving_ratio() {
            prop_assert!((0.0..1.0).contains(&r));
            asc.push(extra);
            desc.push(extra);
            let longer = PlacementCase::new(class, asc, desc).unwrap();
            prop_assert!(longer.saving_ratio().unwrap() >= r);
        }
    }

    #[test]
    fn topology_cases_match_path_lengths(seed in 0u64..200, k in 1usize..=5, host_client in any::<bool>()) {
        let mut t = Topology::build_three_layer(ThreeLayerShape::new(2, 2, 2, 3), LinkParams::default()).unwrap();
        let hosts: Vec<NodeId> = t.hosts().map(|n| n.id).collect();
        let client = if host_client { hosts[seed as usize % hosts.len()] } else { t.attach_external(sim::EXTERNAL_CLIENT_IP, LinkParams::default()) };
        let d = crate::replication::name_node_allocate(&t, client, seed, k, seed).unwrap();
        let case = PlacementCase::from_topology(&t, client, &d).unwrap();
        let mut expect = 0;
        let mut src = client;
        for &n in &d {
            expect += t.distance(src, n).unwrap();
            src = n;
        }
        if !host_client {
            expect -= 1;
        }
        prop_assert_eq!(case.l_total(), expect);
    }
}
