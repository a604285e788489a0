//! Scoring, sweeping, searching and reporting on self-generated fixtures.

use std::sync::atomic::{AtomicUsize, Ordering};

use relprune::fixtures::{make_fixture, FixtureKind};
use relprune::graph::ComponentKind;
use relprune::lrp::{attribute, CompositeConfig, Rule};
use relprune::prune::{
    component_relevance, rank_components, ref_count_study, run_sweep, Attributor, ReferenceSet, SeededSweep, SweepConfig,
};
use relprune::report::{display_heatmap, flow_csv, perturbation_curve, relevance_flow};
use relprune::search::{grid_search, hybrid_search, BayesConfig, Evaluator, SearchLog, SearchSpace, SweepEvaluator};
use relprune::stats::mean;

fn eps_all() -> CompositeConfig {
    CompositeConfig::preset("eps-all").unwrap()
}

#[test]
fn sweep_starts_at_full_accuracy_and_keeps_it_while_planted_filters_go() {
    let f = make_fixture(FixtureKind::PlantedCnn, 11).unwrap();
    let refs = ReferenceSet::draw(&f.train, 5, 0, 0).unwrap();
    let s = component_relevance(&f.graph, &refs, &Attributor::Lrp(eps_all()).fit_to(&f.graph), ComponentKind::ConvFilter).unwrap();
    let order = rank_components(&s);
    let mut first: Vec<usize> = order[..24].to_vec();
    first.sort_unstable();
    assert_eq!(first, f.manifest.irrelevant);
    let curve = run_sweep(&f.graph, &s, &SweepConfig::new(8, ComponentKind::ConvFilter), &f.eval).unwrap();
    assert_eq!(curve.accuracy[0], f.manifest.eval_accuracy);
    assert!(curve.accuracy[..7].iter().all(|a| *a == curve.accuracy[0]));
    assert!(curve.accuracy[7] < curve.accuracy[0]);
}

#[test]
fn planted_vit_heads_rank_dead_heads_first() {
    let f = make_fixture(FixtureKind::PlantedVit, 1).unwrap();
    let refs = ReferenceSet::draw(&f.train, 5, 0, 0).unwrap();
    let a = Attributor::Lrp(CompositeConfig::preset("ours-vit-heads").unwrap()).fit_to(&f.graph);
    let s = component_relevance(&f.graph, &refs, &a, ComponentKind::AttentionHead).unwrap();
    let mut first: Vec<usize> = rank_components(&s)[..8].to_vec();
    first.sort_unstable();
    assert_eq!(first, f.manifest.irrelevant);
}

#[test]
fn more_references_do_not_raise_the_spread() {
    let f = make_fixture(FixtureKind::PlantedCnn, 3).unwrap();
    let a = Attributor::Lrp(eps_all()).fit_to(&f.graph);
    let base = SeededSweep {
        graph: &f.graph,
        pool: &f.train,
        eval: &f.eval,
        attributor: &a,
        sweep: SweepConfig::new(10, ComponentKind::ConvFilter),
        n_ref: 1,
        master_seed: 0,
        seeds: (0..6).collect(),
    };
    let rows = ref_count_study(&base, &[1, 5, 10, 20]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[2].a_pr_sem <= rows[0].a_pr_sem);
}

#[test]
fn search_over_real_sweeps_resumes_from_its_log() {
    let f = make_fixture(FixtureKind::PlantedCnn, 0).unwrap();
    let eps = Rule::eps();
    let space = SearchSpace::new(
        [vec![eps, Rule::z_plus()], vec![eps], vec![eps, Rule::ab21()], vec![eps]],
        Vec::new(),
        vec![false, true],
    )
    .unwrap();
    let calls = AtomicUsize::new(0);
    let inner = SweepEvaluator {
        graph: &f.graph,
        pool: &f.train,
        eval: &f.eval,
        sweep: SweepConfig::new(8, ComponentKind::ConvFilter),
        n_ref: 2,
        master_seed: 0,
        seeds: vec![0],
    };
    let counting = |c: &CompositeConfig| {
        calls.fetch_add(1, Ordering::SeqCst);
        inner.evaluate(c)
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("search.jsonl");
    let first = {
        let mut log = SearchLog::open(&path).unwrap();
        grid_search(&space, &counting, Some(&mut log)).unwrap()
    };
    assert_eq!(calls.load(Ordering::SeqCst), 8);
    assert!(first.records.iter().all(|(_, r)| r.a_pr.is_some_and(|v| (0.0..=1.0).contains(&v))));
    let mut log = SearchLog::open(&path).unwrap();
    assert_eq!(log.len(), 8);
    let again = grid_search(&space, &counting, Some(&mut log)).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 8, "a complete log needs no new evaluations");
    assert_eq!(again.best.0, first.best.0);
    assert_eq!(again.best.1.a_pr, first.best.1.a_pr);
}

#[test]
fn hybrid_on_a_tiny_space_is_exhaustive() {
    let space = SearchSpace::new(
        [vec![Rule::eps()], vec![Rule::eps(), Rule::z_plus()], vec![Rule::eps()], vec![Rule::eps()]],
        Vec::new(),
        vec![false],
    )
    .unwrap();
    let obj = |c: &CompositeConfig| Ok(if c.label().contains("z_plus") { 0.7 } else { 0.4 });
    let h = hybrid_search(&space, &obj, &BayesConfig::for_space(&space, 0), None).unwrap();
    assert_eq!(h.outcome.best.1.a_pr, Some(0.7));
    assert!(h.evaluations <= 2);
}

#[test]
fn relevance_order_removes_evidence_faster_than_reversed() {
    let f = make_fixture(FixtureKind::TrainedCnn, 0).unwrap();
    let baseline = f.train.channel_mean();
    let composite = eps_all().fit_to(&f.graph);
    let (mut lrp_area, mut reversed_area) = (Vec::new(), Vec::new());
    for i in 0..10 {
        let (x, y) = f.eval.get(i);
        let tr = attribute(&f.graph, x, y, &composite).unwrap();
        lrp_area.push(perturbation_curve(&f.graph, &tr.input, x, y, &baseline, 16, 0).unwrap().area);
        let flipped = tr.input.map(|v| -v);
        reversed_area.push(perturbation_curve(&f.graph, &flipped, x, y, &baseline, 16, 0).unwrap().area);
    }
    assert!(mean(&lrp_area) < mean(&reversed_area), "{} vs {}", mean(&lrp_area), mean(&reversed_area));
}

#[test]
fn flow_report_covers_both_conv_layers() {
    let f = make_fixture(FixtureKind::PlantedCnn, 5).unwrap();
    let refs = ReferenceSet::draw(&f.train, 3, 0, 0).unwrap();
    let s = component_relevance(&f.graph, &refs, &Attributor::Lrp(eps_all()).fit_to(&f.graph), ComponentKind::ConvFilter).unwrap();
    let rows = relevance_flow(&s);
    assert_eq!(rows.iter().map(|r| r.count).collect::<Vec<_>>(), vec![16, 16]);
    let live_max = s.scores.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert_eq!(rows.iter().map(|r| r.max_abs).fold(0.0, f64::max), live_max);
    let csv = flow_csv(&rows);
    assert!(csv.starts_with("layer,count,mean_abs,max_abs\nconv1,16,"));
    let (x, y) = f.eval.get(0);
    let h = display_heatmap(&attribute(&f.graph, x, y, &eps_all().fit_to(&f.graph)).unwrap().input);
    assert_eq!(h.len(), 64);
}
