//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Always exits 0 so the workspace test run stays green; set
//! `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use mmsl::config::ExperimentConfig;
use mmsl::eval::{dataset_for, run_experiment, with_variant, ComparisonTable, RunArtifacts, RunSummary, SweepParam};
use mmsl::fusion::{FusionHead, FusionMode};
use mmsl::gradcheck;
use mmsl::losses::mmsl_pair_loss;
use mmsl::mining::{mine, Label, MarginParams};
use mmsl::synth::{iou, BBox, Dataset};
use mmsl::{Metric, Vector};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const TIE: f64 = 0.01;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        println!("[{}] criterion {id:>2}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, pass, detail));
    }
}

fn gradients(r: &mut Report) {
    let t = Instant::now();
    let results = gradcheck::run_all(20, 2024).expect("suites run");
    let elapsed = t.elapsed();
    let failing: Vec<&str> = results.iter().filter(|s| !s.passed(20)).map(|s| s.name).collect();
    let worst = results.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    for s in &results {
        println!(
            "        {:<16} checked {:>2}  rejected {:>3}  max rel error {:.2e}",
            s.name, s.checked, s.rejected, s.max_rel_error
        );
    }
    r.record(
        1,
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} suites x 20 configs, worst relative error {worst:.2e}, failing {failing:?}, {:.1}s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn interval_geometry(r: &mut Report) {
    let params = MarginParams::new(1.6, 0.1, 0.2, 0.2).unwrap();
    let mut violations = 0;
    let mut inside = 0;
    let mut check = |d: f64| {
        for label in [Label::Positive, Label::Negative] {
            let (lo, hi) = match label {
                Label::Positive => params.positive_band(),
                Label::Negative => params.negative_band(),
            };
            let v = mmsl_pair_loss(d, label, &params).unwrap();
            let ok = if d >= lo && d <= hi {
                inside += 1;
                v == params.beta
            } else {
                v > params.beta
            };
            if !ok {
                violations += 1;
            }
        }
    };
    for i in 0..1000 {
        check(4.0 * i as f64 / 999.0);
    }
    for (lo, hi) in [params.positive_band(), params.negative_band()] {
        for i in 0..=1000 {
            check(lo + (hi - lo) * i as f64 / 1000.0);
        }
    }
    r.record(
        2,
        violations == 0,
        format!("{violations} violations; {inside} in-band evaluations equal beta exactly"),
    );
}

fn mining_oracle(r: &mut Report) {
    let t = Instant::now();
    let mut rng = common::rng(31);
    let mut mismatches = 0;
    let mut mined = 0;
    for k in 0..1000 {
        let (anchor, samples) = common::random_batch(&mut rng, 500);
        let params = MarginParams::new(rng.random_range(0.5..2.5), 0.1, rng.random_range(0.0..1.5), 0.2).unwrap();
        let metric = if k % 2 == 0 { Metric::Squared } else { Metric::Unsquared };
        let got = mine(&anchor, &samples, &params, metric).unwrap();
        mined += got.len();
        if got != common::mine_oracle(&anchor, &samples, &params, metric) {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    r.record(
        3,
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!(
            "1000 batches, {mismatches} mismatches, {mined} samples mined, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn fusion_invariants(r: &mut Report) {
    let mut rng = common::rng(77);
    let (mut gates, mut dims, mut masks) = (0, 0, 0);
    for k in 0..10_000 {
        let dim = rng.random_range(1..12);
        let head = FusionHead::init(dim, FusionMode::Attention, k);
        let scale = [0.1, 1.0, 10.0, 100.0][k as usize % 4];
        let mut draw = || Vector::new((0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (a, b) = (draw(), draw());
        let f = head.fuse(&a, &b).unwrap();
        if !f.gates_r.iter().chain(&f.gates_t).all(|g| *g > 0.0 && *g < 1.0) {
            gates += 1;
        }
        if f.components.len() != 2 * dim {
            dims += 1;
        }
        let z = Vector::zeros(dim);
        let fr = head.fuse(&z, &b).unwrap();
        let ft = head.fuse(&a, &z).unwrap();
        let rgb_masked = fr.components[..dim].iter().all(|v| *v == 0.0) && fr.components[dim..] == f.components[dim..];
        let t_masked = ft.components[dim..].iter().all(|v| *v == 0.0) && ft.components[..dim] == f.components[..dim];
        if !(rgb_masked && t_masked) {
            masks += 1;
        }
    }
    r.record(
        9,
        gates + dims + masks == 0,
        format!("10000 inputs: {gates} gate, {dims} dimension, {masks} masking violations"),
    );
}

fn iou_properties(r: &mut Report) {
    let mut rng = common::rng(5);
    let mut bad = 0;
    for _ in 0..10_000 {
        let mut draw = || {
            BBox::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(0.5..40.0),
                rng.random_range(0.5..40.0),
            )
            .unwrap()
        };
        let (a, b) = (draw(), draw());
        let far = BBox::new(a.cx + a.w + b.w + 1.0, a.cy, b.w, b.h).unwrap();
        let v = iou(&a, &b);
        if (v - iou(&b, &a)).abs() > 1e-12 || (iou(&a, &a) - 1.0).abs() > 1e-12 || iou(&a, &far) != 0.0 || !(0.0..=1.0).contains(&v) {
            bad += 1;
        }
    }
    let unit = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
    let shifted = BBox::new(1.0, 0.5, 1.0, 1.0).unwrap();
    let hand = iou(&unit, &shifted);
    r.record(
        11,
        bad == 0 && (hand - 1.0 / 3.0).abs() <= 1e-12,
        format!("10000 random pairs, {bad} violations; offset unit squares {hand:.15}"),
    );
}

fn base() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn run(exp: &ExperimentConfig, data: &Dataset, label: &str) -> RunArtifacts {
    let t = Instant::now();
    let a = run_experiment(exp, data, label).expect("training run");
    let s = &a.summary;
    println!(
        "        {label:<18} seed {} PR {:.3} SR {:.3} band+ {:.3} band- {:.3} margin {:.3} cross {:.3} mined {:.2} -> {:.2} ({:.0}s)",
        exp.train.seed,
        s.precision_rate,
        s.success_rate,
        s.band_occupancy_pos,
        s.band_occupancy_neg,
        s.margin_satisfaction,
        s.cross_modal_satisfaction,
        s.mined_early,
        s.mined_late,
        t.elapsed().as_secs_f64()
    );
    a
}

fn mean_of(runs: &[RunSummary], f: fn(&RunSummary) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn ge(a: f64, b: f64) -> bool {
    a >= b - TIE
}

fn experiments(r: &mut Report) {
    let datasets: Vec<Dataset> = SEEDS.iter().map(|&s| dataset_for(&base().with_seed(s)).unwrap()).collect();
    let variant_runs = |name: &str| -> Vec<RunArtifacts> {
        SEEDS
            .iter()
            .zip(&datasets)
            .map(|(&s, d)| run(&with_variant(&base().with_seed(s), name).unwrap(), d, name))
            .collect()
    };

    println!("        -- full variant, fixture defaults");
    let t = Instant::now();
    let full = variant_runs("full");
    let full_time = t.elapsed();
    let full_s: Vec<RunSummary> = full.iter().map(|a| a.summary.clone()).collect();

    let band_ok = full_s
        .iter()
        .filter(|s| s.band_occupancy_pos >= 0.9 && s.band_occupancy_neg >= 0.9)
        .count();
    let per_seed = |f: fn(&RunSummary) -> f64| full_s.iter().map(|s| format!("{:.3}", f(s))).collect::<Vec<_>>().join("/");
    for a in &full {
        let t = &a.structure.train;
        println!(
            "        seed {}: mined positives {} (below {}, in {}, above {}), mined negatives {} (below {}, in {}, above {})",
            a.summary.seed.unwrap_or(0),
            t.mined_pos,
            t.pos_below,
            t.mined_pos - t.pos_below - t.pos_above,
            t.pos_above,
            t.mined_neg,
            t.neg_below,
            t.mined_neg - t.neg_below - t.neg_above,
            t.neg_above
        );
    }
    r.record(
        4,
        band_ok >= 2 && full_time < Duration::from_secs(300),
        format!(
            "band occupancy pos {} neg {} (need both >= 0.9 on 2 of 3 seeds, got {band_ok}), {:.0}s for 3 seeds",
            per_seed(|s| s.band_occupancy_pos),
            per_seed(|s| s.band_occupancy_neg),
            full_time.as_secs_f64()
        ),
    );

    let sep_ok = full_s.iter().filter(|s| s.margin_satisfaction >= 0.9).count();
    r.record(
        5,
        sep_ok >= 2,
        format!(
            "held-out margin satisfaction {} (need >= 0.9 on 2 of 3 seeds, got {sep_ok})",
            per_seed(|s| s.margin_satisfaction)
        ),
    );

    println!("        -- ablation variants");
    let no_cross: Vec<RunSummary> = variant_runs("no_cross").into_iter().map(|a| a.summary).collect();
    let baseline: Vec<RunSummary> = variant_runs("baseline_triplet").into_iter().map(|a| a.summary).collect();

    let cross_full = mean_of(&full_s, |s| s.cross_modal_satisfaction);
    let cross_nc = mean_of(&no_cross, |s| s.cross_modal_satisfaction);
    r.record(
        6,
        cross_full >= 0.9 && cross_full > cross_nc,
        format!(
            "held-out cross-modal satisfaction full {} (mean {cross_full:.4}) vs no_cross mean {cross_nc:.4}",
            per_seed(|s| s.cross_modal_satisfaction)
        ),
    );

    let pr = |v: &[RunSummary]| mean_of(v, |s| s.precision_rate);
    let sr = |v: &[RunSummary]| mean_of(v, |s| s.success_rate);
    let (pf, pn, pb) = (pr(&full_s), pr(&no_cross), pr(&baseline));
    let saturated = [pf, pn, pb].iter().all(|p| *p == 1.0);
    r.record(
        7,
        ge(pf, pn) && ge(pn, pb),
        format!(
            "mean toy-PR full {pf:.4} no_cross {pn:.4} baseline {pb:.4}{}; SR {:.4} / {:.4} / {:.4}",
            if saturated { " (all saturated, ordering holds only as a tie)" } else { "" },
            sr(&full_s),
            sr(&no_cross),
            sr(&baseline)
        ),
    );

    println!("        -- margin sweep");
    let sweep = |param: SweepParam, value: f64| -> Vec<RunSummary> {
        SEEDS
            .iter()
            .zip(&datasets)
            .map(|(&s, d)| {
                let mut exp = base().with_seed(s);
                param.apply(&mut exp, value);
                run(&exp, d, &format!("{}={value}", param.name())).summary
            })
            .collect()
    };
    let m0 = sweep(SweepParam::M, 0.0);
    let m4 = sweep(SweepParam::M, 0.4);
    let (p0, p2, p4) = (pr(&m0), pf, pr(&m4));
    r.record(
        8,
        p2 >= p0 && p2 >= p4,
        format!(
            "mean toy-PR m=0 {p0:.4} m=0.2 {p2:.4} m=0.4 {p4:.4}; SR {:.4} / {:.4} / {:.4}",
            sr(&m0),
            sr(&full_s),
            sr(&m4)
        ),
    );

    println!("        -- beta sweep (reported, not gated)");
    let mut beta_rows = Vec::new();
    for b in [0.0, 0.2, 0.3] {
        beta_rows.push((b, sweep(SweepParam::Beta, b)));
    }
    beta_rows.insert(1, (0.1, full_s.clone()));
    let best = beta_rows
        .iter()
        .map(|(b, rows)| (*b, pr(rows), sr(rows)))
        .collect::<Vec<_>>();
    for (b, p, s) in &best {
        println!("        beta={b}: mean PR {p:.4} SR {s:.4}");
    }
    let at_01 = best[1].1;
    let identical = best.iter().all(|(_, p, s)| *p == best[0].1 && *s == best[0].2);
    let flagged = best.iter().any(|(_, p, _)| *p > at_01);
    println!(
        "        beta sweep {}",
        if identical {
            "no effect: every beta gives the same mean PR and SR (mined samples never reach the beta edges)"
        } else if flagged {
            "FLAGGED: beta=0.1 is not the best mean toy-PR"
        } else {
            "agrees: beta=0.1 has the best (or tied) mean toy-PR"
        }
    );

    let mut all = full_s.clone();
    all.extend(no_cross);
    all.extend(baseline);
    all.extend(m0);
    all.extend(m4);
    for (_, rows) in beta_rows.into_iter().filter(|(b, _)| *b != 0.1) {
        all.extend(rows);
    }
    let table = ComparisonTable::from_runs(all);
    if let Ok(dir) = std::env::var("ACCEPTANCE_OUT") {
        std::fs::create_dir_all(&dir).unwrap();
        table.write_csv(std::fs::File::create(format!("{dir}/acceptance_runs.csv")).unwrap()).unwrap();
    }

    let early = mean_of(&full_s, |s| s.mined_early);
    let late = mean_of(&full_s, |s| s.mined_late);
    println!("        mean mined-set size, full variant: first 10% of steps {early:.2}, last 10% {late:.2}");

    // determinism: retrain seed 0 and compare the serialized artifacts
    let again = run_experiment(&with_variant(&base().with_seed(SEEDS[0]), "full").unwrap(), &datasets[0], "full").unwrap();
    let bytes = |a: &RunArtifacts| {
        let mut csv = Vec::new();
        a.outcome.history.write_csv(&mut csv).unwrap();
        (a.outcome.model.to_json().unwrap(), csv)
    };
    let (m1, h1) = bytes(&full[0]);
    let (m2, h2) = bytes(&again);
    r.record(
        10,
        m1 == m2 && h1 == h2,
        format!(
            "model JSON {} bytes {}, history CSV {} bytes {}",
            m1.len(),
            if m1 == m2 { "identical" } else { "differ" },
            h1.len(),
            if h1 == h2 { "identical" } else { "differ" }
        ),
    );
}

fn main() {
    let mut r = Report { lines: Vec::new() };
    let quick = std::env::var("ACCEPTANCE_QUICK").is_ok();
    gradients(&mut r);
    interval_geometry(&mut r);
    mining_oracle(&mut r);
    fusion_invariants(&mut r);
    iou_properties(&mut r);
    if quick {
        println!("ACCEPTANCE_QUICK set: training criteria 4-8 and 10 skipped");
    } else {
        experiments(&mut r);
    }
    r.lines.sort_by_key(|l| l.0);
    let passed = r.lines.iter().filter(|l| l.1).count();
    println!("acceptance summary: {passed}/{} criteria passed", r.lines.len());
    for (id, pass, _) in &r.lines {
        if !pass {
            println!("    failing: criterion {id}");
        }
    }
    if std::env::var("ACCEPTANCE_STRICT").is_ok() && passed < r.lines.len() {
        std::process::exit(1);
    }
}
