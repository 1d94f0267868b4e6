#[macro_use]
mod common;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use common::{random_graph, rng};
use graphprompter::graph::{
    draw_classes, generate_sbm, generate_synthetic_kg, load_graph, save_graph, Direction, Edge,
    Graph, KgParams, Node, SbmParams,
};
use graphprompter::rng::stream;

fn sorted_nodes(g: &Graph) -> Vec<(usize, Vec<u64>, Option<usize>)> {
    let mut v: Vec<_> = g
        .nodes()
        .iter()
        .map(|n| {
            (
                n.id,
                n.features.iter().map(|f| f.to_bits()).collect(),
                n.label,
            )
        })
        .collect();
    v.sort();
    v
}

fn sorted_edges(g: &Graph) -> Vec<(usize, usize, usize, Option<usize>)> {
    let mut v: Vec<_> = g
        .edges()
        .iter()
        .map(|e| (e.src, e.rel, e.dst, e.label))
        .collect();
    v.sort();
    v
}

pub fn sbm_round_trips_through_a_file() {
    let g = generate_sbm(&SbmParams {
        blocks: 5,
        nodes_per_block: 100,
        seed: 4,
        ..SbmParams::default()
    })
    .unwrap();
    assert_eq!(g.num_nodes(), 500);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    save_graph(&g, &path).unwrap();
    let back = load_graph(&path).unwrap();
    assert_eq!(sorted_nodes(&g), sorted_nodes(&back));
    assert_eq!(sorted_edges(&g), sorted_edges(&back));
    assert_eq!(g.relations(), back.relations());
    assert_eq!(g.feature_dim(), back.feature_dim());
}

pub fn adjacency_matches_edge_list_scan() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let base = random_graph(&mut r, 50, 0.08, 2, 3, 4);
        let mut edges = base.edges().to_vec();
        // Parallel edges and a self-loop.
        for _ in 0..5 {
            let e = edges[r.random_range(0..edges.len())].clone();
            edges.push(Edge {
                rel: (e.rel + 1) % 3,
                ..e
            });
        }
        edges.push(Edge {
            src: 7,
            rel: 0,
            dst: 7,
            label: None,
        });
        let g = Graph::new(
            2,
            base.nodes().to_vec(),
            edges.clone(),
            base.relations().clone(),
        )
        .unwrap();
        for v in 0..50 {
            let mut scan = Vec::new();
            for (i, e) in edges.iter().enumerate() {
                if e.src == v {
                    scan.push((e.dst, e.rel, Direction::Out, i));
                }
                if e.dst == v {
                    scan.push((e.src, e.rel, Direction::In, i));
                }
            }
            scan.sort();
            let got: Vec<_> = g
                .neighbors(v)
                .unwrap()
                .iter()
                .map(|n| (n.node, n.relation, n.direction, n.edge))
                .collect();
            assert_eq!(got, scan, "node {v}");
            let ids: BTreeSet<usize> = scan.iter().map(|s| s.0).filter(|&u| u != v).collect();
            assert_eq!(
                g.neighbor_ids(v).unwrap(),
                ids.into_iter().collect::<Vec<_>>()
            );
            for u in 0..50 {
                let linked = edges
                    .iter()
                    .any(|e| (e.src, e.dst) == (u, v) || (e.src, e.dst) == (v, u));
                assert_eq!(g.has_edge(v, u), linked, "{v}-{u}");
            }
        }
        assert!(g.adjacency_consistent());
    }
}

pub fn sbm_within_block_fraction_matches_expectation() {
    let p = SbmParams::default();
    let g = generate_sbm(&p).unwrap();
    let (b, n) = (p.blocks as f64, p.nodes_per_block as f64);
    let within = b * n * (n - 1.0) / 2.0 * p.p_in;
    let across = b * (b - 1.0) / 2.0 * n * n * p.p_out;
    let expected = within / (within + across);
    let inside = g
        .edges()
        .iter()
        .filter(|e| g.node_label(e.src) == g.node_label(e.dst))
        .count() as f64;
    let frac = inside / g.num_edges() as f64;
    assert!(
        (frac - expected).abs() <= 0.05 * expected,
        "within-block fraction {frac:.4}, expected {expected:.4}"
    );
    let total = within + across;
    let m = g.num_edges() as f64;
    assert!(
        (m - total).abs() < 4.0 * total.sqrt(),
        "{m} edges, expected {total}"
    );
}

pub fn kg_relations_are_predictable_from_cluster_pairs() {
    let g = generate_synthetic_kg(&KgParams::default()).unwrap();
    let mut counts: BTreeMap<(usize, usize), BTreeMap<usize, usize>> = BTreeMap::new();
    for e in g.edges() {
        let key = (g.node_label(e.src).unwrap(), g.node_label(e.dst).unwrap());
        *counts.entry(key).or_default().entry(e.rel).or_default() += 1;
    }
    let correct: usize = counts
        .values()
        .map(|c| c.values().copied().max().unwrap())
        .sum();
    let acc = correct as f64 / g.num_edges() as f64;
    assert!(acc > 0.9, "majority-vote relation accuracy {acc:.3}");
}

pub fn kg_has_no_self_loops_or_duplicate_triples() {
    let g = generate_synthetic_kg(&KgParams {
        num_entities: 60,
        num_clusters: 3,
        seed: 3,
        ..KgParams::default()
    })
    .unwrap();
    let mut seen = BTreeSet::new();
    for e in g.edges() {
        assert_ne!(e.src, e.dst);
        assert!(seen.insert((e.src, e.rel, e.dst)), "duplicate {e:?}");
    }
    assert_eq!(g.num_edges(), 50 * 100);
}

pub fn drawn_classes_are_uniform() {
    let g = generate_sbm(&SbmParams::default()).unwrap();
    let classes: Vec<usize> = g
        .nodes()
        .iter()
        .filter_map(|n: &Node| n.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut hits = vec![0usize; classes.len()];
    let draws = 1000;
    for i in 0..draws {
        let mut r = stream(9, &[i]);
        let chosen = draw_classes(&classes, 5, &mut r).unwrap();
        assert_eq!(chosen.iter().collect::<BTreeSet<_>>().len(), 5);
        for c in chosen {
            hits[c] += 1;
        }
    }
    let p = 0.5;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (c, &h) in hits.iter().enumerate() {
        assert!(
            (h as f64 - mean).abs() <= 3.0 * sd,
            "class {c}: {h} draws, expected {mean} ± {:.1}",
            3.0 * sd
        );
    }
}

pub fn generators_are_deterministic_per_seed() {
    let p = SbmParams {
        blocks: 3,
        nodes_per_block: 40,
        seed: 11,
        ..SbmParams::default()
    };
    let a = generate_sbm(&p).unwrap();
    assert_eq!(sorted_edges(&a), sorted_edges(&generate_sbm(&p).unwrap()));
    assert_eq!(sorted_nodes(&a), sorted_nodes(&generate_sbm(&p).unwrap()));
    let other = generate_sbm(&SbmParams { seed: 12, ..p }).unwrap();
    assert_ne!(sorted_edges(&a), sorted_edges(&other));
    let k = KgParams {
        num_entities: 100,
        num_relations: 5,
        triples_per_relation: 20,
        seed: 2,
        ..KgParams::default()
    };
    let a = generate_synthetic_kg(&k).unwrap();
    assert_eq!(
        sorted_edges(&a),
        sorted_edges(&generate_synthetic_kg(&k).unwrap())
    );
    assert_eq!(
        sorted_nodes(&a),
        sorted_nodes(&generate_synthetic_kg(&k).unwrap())
    );
}

tests_for!(
    sbm_round_trips_through_a_file,
    adjacency_matches_edge_list_scan,
    sbm_within_block_fraction_matches_expectation,
    kg_relations_are_predictable_from_cluster_pairs,
    kg_has_no_self_loops_or_duplicate_triples,
    drawn_classes_are_uniform,
    generators_are_deterministic_per_seed
);
