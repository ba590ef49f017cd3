//! One PASS/FAIL line per acceptance criterion. Lines go straight to stdout
//! so they show up without `--nocapture`.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use fhsim::aggregation::{aggregate, effective_weights, CenterUpdate, WeightScheme};
use fhsim::augmentation::AugmentationTier;
use fhsim::cli::{cmd_run, RunOutcome};
use fhsim::evaluation::{plan_ccv, plan_lco, Cell, ExperimentResult, Framework, Scheme};
use fhsim::federation::{build_reference, run_cds, run_federated, CenterNode, HarmonizationNode, Prediction, RoundContext};
use fhsim::harmonization::{HistogramAggregate, Region};
use fhsim::model::{gradient_features, ModelSpec, ParameterVector};
use fhsim::phantom::Prior;
use rand::Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Warn(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let (tag, detail, ok) = match verdict {
        Verdict::Pass(d) => ("PASS", d, true),
        Verdict::Fail(d) => ("FAIL", d, false),
        Verdict::Warn(d) => ("WARN", d, true),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] {n:>2}. {name}: {detail}");
    let _ = out.flush();
    ok
}

fn scalar_updates(values: &[Vec<f64>], counts: &[usize]) -> Vec<CenterUpdate> {
    values
        .iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (v, &n))| CenterUpdate::new(format!("k{i}"), ParameterVector::raw(v.clone()).unwrap(), n))
        .collect()
}

fn aggregation_algebra() -> Verdict {
    let start = Instant::now();
    let mut rng = common::rng(1);
    let (mut sum_err, mut neg, mut fl_ev, mut idem, mut homog) = (0.0f64, 0usize, 0.0f64, 0.0f64, 0.0f64);
    let schemes = [WeightScheme::SampleProportional, WeightScheme::EqualVote];
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let len = rng.random_range(1..=16);
        let values: Vec<Vec<f64>> = (0..k).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(1..=200)).collect();
        let u = scalar_updates(&values, &counts);
        for s in &schemes {
            let w = effective_weights(&u, s).unwrap();
            neg += w.iter().filter(|(_, x)| *x < 0.0).count();
            sum_err = sum_err.max((w.iter().map(|(_, x)| x).sum::<f64>() - 1.0).abs());
        }

        let equal = scalar_updates(&values, &vec![counts[0]; k]);
        let a = aggregate(&equal, &schemes[0]).unwrap();
        let b = aggregate(&equal, &schemes[1]).unwrap();
        fl_ev = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(fl_ev, f64::max);

        let copies = scalar_updates(&vec![values[0].clone(); k], &counts);
        let alpha = rng.random_range(-2.0..2.0);
        let scaled: Vec<Vec<f64>> = values.iter().map(|v| v.iter().map(|x| alpha * x).collect()).collect();
        for s in &schemes {
            let c = aggregate(&copies, s).unwrap();
            idem = c.values().iter().zip(&values[0]).map(|(x, y)| (x - y).abs()).fold(idem, f64::max);
            let base = aggregate(&u, s).unwrap();
            let sc = aggregate(&scalar_updates(&scaled, &counts), s).unwrap();
            homog = sc.values().iter().zip(base.values()).map(|(x, y)| (x - alpha * y).abs()).fold(homog, f64::max);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        neg == 0 && sum_err <= 1e-12 && fl_ev <= 1e-15 && idem <= 1e-15 && homog <= 1e-15 && secs < 5.0,
        format!(
            "1000 sets, |sum w - 1| max {sum_err:.1e}, negative weights {neg}, FL vs FL-EV {fl_ev:.1e}, idempotence {idem:.1e}, homogeneity {homog:.1e}, {secs:.2} s"
        ),
    )
}

fn table_one_mean() -> Verdict {
    let u = scalar_updates(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]], &[46, 70, 24, 40]);
    let got = aggregate(&u, &WeightScheme::SampleProportional).unwrap().values()[0];
    let err = (got - 418.0 / 180.0).abs();
    check(err <= 1e-12, format!("aggregate {got:.15}, expected 418/180, error {err:.1e}"))
}

fn framework_equivalence() -> Verdict {
    let setup = common::setup(AugmentationTier::None);
    let mut worst = 0.0f64;
    let mut rounds_equal = true;
    for seed in 0..5 {
        let data: Vec<_> = common::default_preprocessed(seed).into_iter().filter(|c| c.center_id == "sagrada-familia").collect();
        let plan = common::folds(&data, Scheme::Ccv, seed);
        let fold = common::prepared(&data, &plan, 0);
        let cds = run_cds(&fold.training, &setup, seed).unwrap();
        let fl = run_federated(&fold.training, &WeightScheme::SampleProportional, &setup, seed).unwrap();
        rounds_equal &= cds.logs.len() == fl.logs.len()
            && cds.logs.iter().zip(&fl.logs).all(|(a, b)| a.validation_score == b.validation_score);
        let last = |o: &fhsim::federation::TrainingOutcome| o.logs.last().unwrap().global_params.clone();
        for (a, b) in [(cds.best_params.clone(), fl.best_params.clone()), (last(&cds), last(&fl))] {
            worst = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        }
    }
    check(
        worst <= 1e-12 && rounds_equal,
        format!("5 seeds, max parameter difference {worst:.1e}, round-by-round validation AUCs identical: {rounds_equal}"),
    )
}

fn gradient_check() -> Verdict {
    let mut rng = common::rng(4);
    let mut worst = [0.0f64; 2];
    for (i, mlp) in [false, true].into_iter().enumerate() {
        for _ in 0..100 {
            let (spec, params, rows, labels) = common::random_draw(&mut rng, mlp);
            let g = gradient_features(&spec, &params, &rows, &labels).unwrap();
            let fd = common::finite_difference(&spec, &params, &rows, &labels, 1e-5);
            worst[i] = worst[i].max(common::relative_error(g.values(), &fd));
        }
    }
    check(
        worst.iter().all(|&e| e < 1e-5),
        format!("100 draws per kind, max relative error logistic {:.1e}, mlp {:.1e}", worst[0], worst[1]),
    )
}

fn auc_oracle() -> Verdict {
    let mut rng = common::rng(5);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..100 {
        let (s, l) = common::random_auc_instance(&mut rng);
        let distinct: BTreeSet<u64> = s.iter().map(|x| x.to_bits()).collect();
        ties += usize::from(distinct.len() < s.len());
        mismatches += usize::from(!common::auc_matches_oracle(&s, &l));
    }
    check(mismatches == 0, format!("100 instances ({ties} with ties), {mismatches} mismatches against the pairwise count"))
}

fn fold_laws() -> Verdict {
    let mut rng = common::rng(6);
    let mut violations = Vec::new();
    for i in 0..200 {
        let roster = common::random_roster(&mut rng, 2);
        let data = common::dummy_dataset(&roster);
        let seed = rng.random();
        for plan in [plan_ccv(&roster, seed).unwrap(), plan_lco(&roster, seed).unwrap()] {
            if let Err(e) = common::check_fold_laws(&roster, &plan).and_then(|_| common::check_timepoints_colocated(&data, &plan)) {
                violations.push(format!("config {i} {:?}: {e}", plan.scheme));
            }
        }
    }
    check(
        violations.is_empty(),
        format!("200 configurations, {} violations {}", violations.len(), violations.first().cloned().unwrap_or_default()),
    )
}

fn harmonization_efficacy() -> Verdict {
    let data = common::default_preprocessed(0);
    let (before, after) = common::harmonization_l1(&data);
    let reduction = 1.0 - after / before;
    let all: BTreeSet<String> = data.iter().map(|c| c.center_id.clone()).collect();
    let lco = common::folds(&data, Scheme::Lco, 0);
    let wiring = (0..lco.fold_count()).all(|i| {
        let held: BTreeSet<String> = lco.folds[i].test.iter().map(|r| r.center_id.clone()).collect();
        let fold = common::prepared(&data, &lco, i);
        fold.reference_contributors.iter().cloned().collect::<BTreeSet<_>>() == &all - &held
    });
    check(
        reduction >= 0.5 && wiring,
        format!("mean pairwise L1 {before:.3} -> {after:.3} ({:.0}% reduction), LCO reference excludes held-out center: {wiring}", 100.0 * reduction),
    )
}

/// Holds nothing but an id and a count.
struct Opaque(String, usize);

impl CenterNode for Opaque {
    fn center_id(&self) -> &str {
        &self.0
    }
    fn train_sample_count(&self) -> usize {
        self.1
    }
    fn local_round(&self, global: &ParameterVector, _: &RoundContext<'_>) -> fhsim::federation::Result<CenterUpdate> {
        Ok(CenterUpdate::new(self.0.clone(), global.clone(), self.1))
    }
    fn validation_scores(&self, _: &ModelSpec, _: &ParameterVector) -> fhsim::federation::Result<Vec<(f64, u8)>> {
        Ok(vec![(0.25, 0), (0.75, 1)])
    }
    fn test_predictions(&self, _: &ModelSpec, _: &ParameterVector) -> fhsim::federation::Result<Vec<Prediction>> {
        Ok(Vec::new())
    }
}

impl HarmonizationNode for Opaque {
    fn center_id(&self) -> &str {
        &self.0
    }
    fn intensity_bounds(&self, _: Region) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }
    fn histogram_aggregate(&self, _: Region, edges: &[f64]) -> fhsim::federation::Result<Option<HistogramAggregate>> {
        let mut a = HistogramAggregate::empty(self.0.clone(), edges.to_vec());
        let bin = self.1 % a.counts.len();
        a.counts[bin] = 1.0;
        a.sample_count = 1;
        Ok(Some(a))
    }
}

fn privacy_boundary() -> Verdict {
    let nodes = vec![Opaque("a".into(), 3), Opaque("b".into(), 5)];
    let setup = common::setup(AugmentationTier::None);
    let trained = run_federated(&nodes, &WeightScheme::SampleProportional, &setup, 0).is_ok();
    let reference = build_reference(&nodes, Region::MaskOnly, 4).is_ok();
    let src = include_str!("../src/federation/mod.rs");
    let mut leaks = Vec::new();
    for name in ["CenterNode", "HarmonizationNode"] {
        let start = src.find(&format!("pub trait {name}")).unwrap();
        let body = &src[start..start + src[start..].find("\n}").unwrap()];
        for banned in ["Volume", "Subject", "CenterDataset", "MultiChannel", "Grid3", "Sample", "features"] {
            if body.contains(banned) {
                leaks.push(format!("{name} mentions {banned}"));
            }
        }
    }
    check(
        trained && reference && leaks.is_empty(),
        format!(
            "orchestrator trained and built a reference from data-free nodes: {}, subject-level types in node traits: {}",
            trained && reference,
            if leaks.is_empty() { "none".to_string() } else { leaks.join("; ") }
        ),
    )
}

const GAP_CONFIG: &str = r#"
framework = ["cds", "fl"]
scheme = ["ccv", "lco"]
prior = "masked"
tier = "none"
seeds = [0, 1, 2, 3, 4]
output_dir = "out"
"#;

fn run_config(dir: &Path, text: &str) -> ExperimentResult {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("config.toml"), text).unwrap();
    match cmd_run(&dir.join("config.toml"), true, false, None).unwrap() {
        RunOutcome::Completed { result, .. } => result,
        RunOutcome::DryRun(_) => unreachable!(),
    }
}

fn mean_auc(r: &ExperimentResult, framework: Framework, scheme: Scheme, tier: AugmentationTier) -> (f64, f64) {
    let s = r
        .summary_for(Cell {
            framework,
            scheme,
            tier,
            prior: Prior::Masked,
        })
        .unwrap();
    (s.total.mean, s.total.sd)
}

fn iid_gap(r: &ExperimentResult, secs: f64) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = secs < 600.0;
    for fw in [Framework::Cds, Framework::Fl] {
        let (ccv, _) = mean_auc(r, fw, Scheme::Ccv, AugmentationTier::None);
        let (lco, _) = mean_auc(r, fw, Scheme::Lco, AugmentationTier::None);
        ok &= ccv - lco >= 0.03;
        parts.push(format!("{} CCV {ccv:.3} vs LCO {lco:.3} (gap {:+.3})", fw.as_str(), ccv - lco));
    }
    check(ok, format!("{}, {secs:.1} s", parts.join(", ")))
}

fn seed_robustness(dir: &Path) -> Verdict {
    let cfg = GAP_CONFIG
        .replace("scheme = [\"ccv\", \"lco\"]", "scheme = \"ccv\"")
        .replace("tier = \"none\"", "tier = [\"none\", \"basic\", \"shape\", \"shape-intensity\"]");
    let r = run_config(dir, &cfg);
    let mut wins = 0;
    let mut parts = Vec::new();
    for tier in [AugmentationTier::None, AugmentationTier::Basic, AugmentationTier::Shape, AugmentationTier::ShapeIntensity] {
        let (_, cds) = mean_auc(&r, Framework::Cds, Scheme::Ccv, tier);
        let (_, fl) = mean_auc(&r, Framework::Fl, Scheme::Ccv, tier);
        wins += usize::from(fl <= cds);
        parts.push(format!("{} sd FL {fl:.3} / CDS {cds:.3}", tier.as_str()));
    }
    let detail = format!("FL sd <= CDS sd in {wins}/4 tiers ({})", parts.join(", "));
    if wins >= 3 {
        Verdict::Pass(detail)
    } else {
        Verdict::Warn(format!("{detail}; soft check"))
    }
}

fn determinism(a: &Path, b: &Path) -> Verdict {
    let x = std::fs::read(a.join("out/results.csv")).unwrap();
    let y = std::fs::read(b.join("out/results.csv")).unwrap();
    check(x == y && !x.is_empty(), format!("results.csv {} bytes, identical across two runs: {}", x.len(), x == y))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let _ = writeln!(std::io::stdout());
    let mut ok = Vec::new();
    ok.push(report(1, "aggregation algebra", aggregation_algebra));
    ok.push(report(2, "weighted mean over the four center sizes", table_one_mean));
    ok.push(report(3, "single-center FL equals pooled training", framework_equivalence));
    ok.push(report(4, "analytic vs finite-difference gradients", gradient_check));
    ok.push(report(5, "AUC against the pairwise oracle", auc_oracle));
    ok.push(report(6, "fold-plan laws", fold_laws));
    ok.push(report(7, "harmonization efficacy and LCO reference scope", harmonization_efficacy));
    ok.push(report(8, "privacy boundary", privacy_boundary));

    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let start = Instant::now();
    let gap_run = catch_unwind(|| run_config(&first, GAP_CONFIG));
    let secs = start.elapsed().as_secs_f64();
    ok.push(report(9, "CCV exceeds LCO for CDS and FL", || match &gap_run {
        Ok(r) => iid_gap(r, secs),
        Err(_) => Verdict::Fail("experiment run failed".into()),
    }));
    ok.push(report(10, "seed robustness of FL vs CDS", || seed_robustness(&tmp.path().join("tiers"))));
    ok.push(report(11, "byte-identical results across runs", || {
        run_config(&second, GAP_CONFIG);
        determinism(&first, &second)
    }));

    let failed: Vec<usize> = ok.iter().enumerate().filter(|(_, &o)| !o).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
