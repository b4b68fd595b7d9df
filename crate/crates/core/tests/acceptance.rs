//! Acceptance suite: one PASS/FAIL line per criterion on stderr.

use std::collections::{HashMap, VecDeque};
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use ckfr_core::autodiff::{check_gradient_of, EvalOptions, Tensor};
use ckfr_core::backbone::{build_backbone, checkpoint_bytes, model_from_checkpoint, predict, BackboneSpec};
use ckfr_core::data::parse_cifar_binary;
use ckfr_core::experiment::{self, fit, prepare, sweep_csv, sweep_report_svg, write_file, EvalSummary, RunConfig, SweepRow};
use ckfr_core::knowledge::{DistanceMatrix, KnowledgeTree};
use ckfr_core::latent::{check_metric_axioms, latent_distance, Axiom, LatentVector};
use ckfr_core::qtr::{measure_alignment, qtr_loss, LossConfig};
use ckfr_core::rng::{self, Pcg32};
use ckfr_core::synth::SynthConfig;
use ckfr_core::train::{objective_graph, train, TrainConfig, TrainHistory};
use ckfr_core::wsol::{extract_boxes, iou, max_box_acc, ActivationMap, BBox, EvalConfig, MapMethod};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn artifacts() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let spec = BackboneSpec {
        input: [2, 6, 6],
        blocks: vec![3],
        pool: false,
        latent_dim: 4,
        classes: 3,
        dropout: 0.0,
        viz_layer: false,
    };
    let mut worst: f64 = 0.0;
    let (mut compared, mut excluded) = (0, 0);
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, 77);
        let model = build_backbone(&spec, &mut r).unwrap();
        let batch: Vec<usize> = (0..2).map(|_| r.gen_range(0..3)).collect();
        let mut triplet = [0, 1, 2];
        rng::shuffle(&mut triplet, &mut r);
        let d: Vec<f64> = (0..3).map(|_| r.gen_range(1..8) as f64).collect();
        let prior = DistanceMatrix::from_values(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.0, d[0], d[1], d[0], 0.0, d[2], d[1], d[2], 0.0],
        )
        .unwrap();
        let cfg = LossConfig {
            alpha: 10.0,
            ell: 1.0,
            symmetrized: false,
        };
        let (g, loss) = objective_graph(&spec, &batch, triplet, Some(&prior), &cfg).unwrap();
        let x: Vec<f64> = (0..5 * 2 * 36).map(|_| rng::normal(&mut r)).collect();
        let bindings = model.bindings(Tensor::new(vec![5, 2, 6, 6], x).unwrap());
        let report = check_gradient_of(&g, &bindings, loss, 1e-5, EvalOptions::default()).unwrap();
        worst = worst.max(report.max_rel_error());
        compared += report.inputs.iter().map(|i| i.compared).sum::<usize>();
        excluded += report.inputs.iter().map(|i| i.excluded).sum::<usize>();
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && secs < 120.0 && compared > 0,
        format!("max rel error {worst:.2e} over 20 seeds ({compared} coords, {excluded} at kinks), {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn random_standardized(r: &mut Pcg32, m: usize) -> LatentVector {
    LatentVector::new((0..m).map(|_| rng::normal(r)).collect()).unwrap()
}

fn random_tree(r: &mut Pcg32, n: usize) -> KnowledgeTree {
    let edges: Vec<(String, String, f64)> = (1..n)
        .map(|i| {
            let parent = r.gen_range(0..i);
            (format!("n{parent}"), format!("n{i}"), r.gen_range(1..=8) as f64 / 4.0)
        })
        .collect();
    KnowledgeTree::from_edges("n0", &edges).unwrap()
}

fn metric_axioms() -> Outcome {
    let mut r = rng::stream(2, 0);
    let mut l1_violations = 0;
    for _ in 0..10_000 {
        let triple: Vec<_> = (0..3).map(|_| random_standardized(&mut r, 8)).collect();
        if !check_metric_axioms(&triple, 1.0).unwrap().all_hold() {
            l1_violations += 1;
        }
    }
    let mut l2_counter = None;
    for _ in 0..10_000 {
        let triple: Vec<_> = (0..3).map(|_| random_standardized(&mut r, 4)).collect();
        let rep = check_metric_axioms(&triple, 2.0).unwrap();
        if let Some(c) = rep.counterexample.filter(|c| c.axiom == Axiom::TriangleInequality) {
            l2_counter = Some(c);
            break;
        }
    }
    let mut four_point_violations = 0;
    for _ in 0..10 {
        let n = r.gen_range(5..40);
        let t = random_tree(&mut r, n);
        for _ in 0..100 {
            let [x, y, z, w] = [0; 4].map(|_| r.gen_range(0..n));
            let d = |a, b| t.distance_by_id(a, b);
            let lhs = d(x, y) + d(z, w);
            let rhs = (d(x, z) + d(y, w)).max(d(x, w) + d(y, z));
            if lhs > rhs + 1e-9 {
                four_point_violations += 1;
            }
        }
    }
    let counter = l2_counter
        .as_ref()
        .map(|c| format!("d(i,k) = {:.4} > {:.4}", c.lhs, c.rhs))
        .unwrap_or_else(|| "none".into());
    check(
        l1_violations == 0 && l2_counter.is_some() && four_point_violations == 0,
        format!(
            "ell=1 violations {l1_violations}/10000; ell=2 triangle counterexample: {counter}; four-point violations {four_point_violations}/1000"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn search_distance(t: &KnowledgeTree, from: usize, to: usize) -> f64 {
    let n = t.len();
    let mut adj = vec![Vec::new(); n];
    for (id, node) in t.nodes().iter().enumerate() {
        if let Some(p) = node.parent {
            adj[id].push((p, node.weight));
            adj[p].push((id, node.weight));
        }
    }
    let mut dist = vec![f64::NAN; n];
    dist[from] = 0.0;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &(v, w) in &adj[u] {
            if dist[v].is_nan() {
                dist[v] = dist[u] + w;
                queue.push_back(v);
            }
        }
    }
    dist[to]
}

fn flood_fill_boxes(values: &[f64], h: usize, w: usize, tau: f64) -> Vec<BBox> {
    fn visit(p: (usize, usize), on: &[bool], seen: &mut [bool], w: usize, h: usize, b: &mut BBox) {
        let (y, x) = p;
        if seen[y * w + x] || !on[y * w + x] {
            return;
        }
        seen[y * w + x] = true;
        *b = BBox::new(b.x0.min(x), b.y0.min(y), b.x1.max(x + 1), b.y1.max(y + 1));
        if x > 0 {
            visit((y, x - 1), on, seen, w, h, b);
        }
        if x + 1 < w {
            visit((y, x + 1), on, seen, w, h, b);
        }
        if y > 0 {
            visit((y - 1, x), on, seen, w, h, b);
        }
        if y + 1 < h {
            visit((y + 1, x), on, seen, w, h, b);
        }
    }
    let on: Vec<bool> = values.iter().map(|&v| v >= tau).collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on[y * w + x] && !seen[y * w + x] {
                let mut b = BBox::new(usize::MAX, usize::MAX, 0, 0);
                visit((y, x), &on, &mut seen, w, h, &mut b);
                out.push(b);
            }
        }
    }
    out
}

fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.y1.max(b.y1) {
        for x in 0..a.x1.max(b.x1) {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

fn random_box(r: &mut Pcg32, s: usize) -> BBox {
    let (x0, y0) = (r.gen_range(0..s), r.gen_range(0..s));
    BBox::new(x0, y0, r.gen_range(x0 + 1..=s), r.gen_range(y0 + 1..=s))
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng::stream(3, 0);
    let mut tree_mismatch = 0;
    let mut pairs = 0;
    for _ in 0..200 {
        let n = r.gen_range(2..30);
        let t = random_tree(&mut r, n);
        for a in 0..n {
            for b in 0..n {
                pairs += 1;
                if t.distance_by_id(a, b) != search_distance(&t, a, b) {
                    tree_mismatch += 1;
                }
            }
        }
    }
    let (mut box_mismatch, mut acc_mismatch) = (0, 0);
    let mut per_image = Vec::new();
    let mut oracle_hits = 0;
    let delta = 0.25;
    for _ in 0..500 {
        let values: Vec<f64> = (0..64).map(|_| r.gen_range(0..5) as f64 / 4.0).collect();
        let map = ActivationMap {
            values: values.clone(),
            height: 8,
            width: 8,
            class: 0,
            method: MapMethod::Cam,
        };
        let tau = [0.25, 0.5, 0.75][r.gen_range(0..3)];
        let boxes = extract_boxes(&map, tau);
        let oracle = flood_fill_boxes(&values, 8, 8, tau);
        if boxes != oracle {
            box_mismatch += 1;
        }
        let gt: Vec<BBox> = (0..r.gen_range(1..3)).map(|_| random_box(&mut r, 8)).collect();
        let hit = oracle.iter().any(|c| gt.iter().any(|g| pixel_iou(c, g) >= delta));
        oracle_hits += usize::from(hit);
        let single = max_box_acc(&[(boxes.clone(), gt.clone())], delta).unwrap();
        if single != if hit { 100.0 } else { 0.0 } {
            acc_mismatch += 1;
        }
        for c in &boxes {
            for g in &gt {
                if iou(c, g) != pixel_iou(c, g) {
                    acc_mismatch += 1;
                }
            }
        }
        per_image.push((boxes, gt));
    }
    let total = max_box_acc(&per_image, delta).unwrap();
    let expected = 100.0 * oracle_hits as f64 / 500.0;
    check(
        tree_mismatch == 0 && box_mismatch == 0 && acc_mismatch == 0 && total == expected,
        format!(
            "tree distance mismatches {tree_mismatch}/{pairs} pairs on 200 trees; extract_boxes mismatches {box_mismatch}/500; max_box_acc {total:.1} vs exhaustive {expected:.1} ({acc_mismatch} per-image mismatches)"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn qtr_identities() -> Outcome {
    let mut r = rng::stream(4, 0);
    let mut asym = 0;
    let mut worst_scale: f64 = 0.0;
    let mut false_zero = 0;
    for _ in 0..1000 {
        let [a, b, c] = [0; 3].map(|_| random_standardized(&mut r, 8));
        let dab = latent_distance(&a, &b, 1.0).unwrap();
        let dac = latent_distance(&a, &c, 1.0).unwrap();
        let (tab, tac) = (r.gen_range(1..7) as f64, r.gen_range(1..7) as f64);
        if qtr_loss(dab, dac, tab, tac).unwrap() != qtr_loss(dac, dab, tac, tab).unwrap() {
            asym += 1;
        }
        let base = qtr_loss(dab, dac, tab, tac).unwrap();
        if base == 0.0 {
            false_zero += 1;
        }
        for k in [0.5, 2.0, 10.0] {
            let scaled = qtr_loss(dab, dac, k * tab, k * tac).unwrap();
            worst_scale = worst_scale.max((scaled - k * base).abs());
        }
        // prior ratios equal to the latent ratios
        if qtr_loss(dab, dac, dab * 4.0, dac * 4.0).unwrap() != 0.0 {
            false_zero += 1;
        }
    }
    let lv = |v: [f64; 4]| LatentVector::new(v.to_vec()).unwrap();
    let (a, b, c) = (lv([1.0, 1.0, -1.0, -1.0]), lv([1.0, -1.0, 1.0, -1.0]), lv([-1.0, -1.0, 1.0, 1.0]));
    let (dab, dac) = (latent_distance(&a, &b, 1.0).unwrap(), latent_distance(&a, &c, 1.0).unwrap());
    let aligned = qtr_loss(dab, dac, 2.0, 4.0).unwrap();
    let misaligned = qtr_loss(dab, dac, 2.0, 6.0).unwrap();
    check(
        asym == 0 && false_zero == 0 && worst_scale <= 1e-9 && aligned == 0.0 && misaligned > 0.0,
        format!(
            "swap asymmetries {asym}/1000; zero-iff failures {false_zero}; max |L(cD) - cL(D)| {worst_scale:.1e}; aligned {aligned}, misaligned {misaligned}"
        ),
    )
}

// ------------------------------------------------------- training runs

const CRITERION_SEEDS: [u64; 3] = [0, 1, 2];

fn run_config(alpha: f64, ell: f64, seed: u64) -> RunConfig {
    RunConfig {
        synth: Some(SynthConfig {
            branching: 2,
            depth: 3,
            images_per_class: 200,
            confound_prob: 0.9,
            seed,
            ..Default::default()
        }),
        train: TrainConfig {
            seed,
            loss: LossConfig {
                alpha,
                ell,
                symmetrized: false,
            },
            ..Default::default()
        },
        eval: EvalConfig::convnet(),
        out: artifacts().join(format!("alpha-{alpha}_ell-{ell}_seed-{seed}")),
        ..Default::default()
    }
}

struct Run {
    eval: EvalSummary,
    pearson: f64,
    pairs: usize,
    seconds: f64,
}

#[derive(Default)]
struct Runs(HashMap<(u64, u64, u64), Run>);

impl Runs {
    fn get(&mut self, alpha: f64, ell: f64, seed: u64) -> &Run {
        self.0.entry((alpha.to_bits(), ell.to_bits(), seed)).or_insert_with(|| {
            let cfg = run_config(alpha, ell, seed);
            let start = Instant::now();
            let data = prepare(&cfg).unwrap();
            let (model, history) = fit(&cfg, &data).unwrap();
            let seconds = start.elapsed().as_secs_f64();
            let prior = data.prior.as_ref().unwrap();
            let eval = experiment::evaluate(&model, &data.val, Some(prior), &cfg.eval, cfg.map_method, ell).unwrap();
            let p = predict(&model, &data.val).unwrap();
            let align = measure_alignment(&p.by_class(&data.val.labels, data.val.class_count()), prior, ell).unwrap();
            write_file(&cfg.out.join("history.csv"), history.to_csv()).unwrap();
            write_file(&cfg.out.join("eval.csv"), experiment::eval_csv(&eval)).unwrap();
            let _ = writeln!(
                std::io::stderr(),
                "    run alpha={alpha} ell={ell} seed={seed}: {seconds:.0}s, top1 {:.1}, gt-loc dual {:.1}, pearson {:.3}",
                eval.top1_acc,
                eval.localization.as_ref().map_or(f64::NAN, |l| l.dual.gt_loc),
                align.pearson
            );
            Run {
                eval,
                pearson: align.pearson,
                pairs: align.pairs,
                seconds,
            }
        })
    }
}

fn gt_loc(run: &Run) -> f64 {
    run.eval.localization.as_ref().map_or(f64::NAN, |l| l.dual.gt_loc)
}

// ---------------------------------------------------------------- 5

fn alignment_reproduction(runs: &mut Runs) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in CRITERION_SEEDS {
        let base = runs.get(0.0, 1.0, seed);
        let (pb, sb, nb) = (base.pearson, base.seconds, base.pairs);
        let qtr = runs.get(10.0, 1.0, seed);
        let (pq, sq, nq) = (qtr.pearson, qtr.seconds, qtr.pairs);
        ok &= pq >= 0.85 && pb <= 0.6 && nb == 28 && nq == 28 && sb.max(sq) <= 900.0;
        lines.push(format!("seed {seed}: alpha=10 {pq:.3}, alpha=0 {pb:.3}"));
    }
    check(ok, format!("pearson over 28 class pairs ({}); need >= 0.85 vs <= 0.6", lines.join("; ")))
}

// ---------------------------------------------------------------- 6

fn localization_delta(runs: &mut Runs) -> Outcome {
    let (mut base, mut qtr) = (0.0, 0.0);
    for seed in CRITERION_SEEDS {
        base += gt_loc(runs.get(0.0, 1.0, seed)) / 3.0;
        qtr += gt_loc(runs.get(10.0, 1.0, seed)) / 3.0;
    }
    check(
        qtr - base >= 10.0,
        format!("mean GT-loc (dual, tau 0.4/0.6, delta 0.25) alpha=10 {qtr:.1} vs alpha=0 {base:.1}: delta {:+.1} pp, need >= +10", qtr - base),
    )
}

// ---------------------------------------------------------------- 7

fn alpha_sweep(runs: &mut Runs) -> Outcome {
    let alphas = [0.0, 1.0, 3.0, 10.0, 30.0];
    let rows: Vec<SweepRow> = alphas
        .iter()
        .map(|&alpha| SweepRow {
            alpha,
            ell: 1.0,
            eval: runs.get(alpha, 1.0, 0).eval.clone(),
        })
        .collect();
    let csv = sweep_csv(&rows);
    let dir = artifacts().join("alpha-sweep");
    write_file(&dir.join("sweep.csv"), &csv).unwrap();
    write_file(&dir.join("sweep.svg"), sweep_report_svg(&csv).unwrap()).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.eval.top1_acc).collect();
    let monotone = acc.windows(2).all(|w| w[1] >= w[0]);
    let produced = dir.join("sweep.csv").exists() && dir.join("sweep.svg").exists();
    check(
        acc[4] >= acc[0] && produced,
        format!(
            "val top-1 over alpha {alphas:?}: {:?}; alpha=30 {:.1} vs alpha=0 {:.1}; monotone: {monotone}; artifacts in {}",
            acc.iter().map(|a| format!("{a:.1}")).collect::<Vec<_>>(),
            acc[4],
            acc[0],
            dir.display()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn ell_sweep(runs: &mut Runs) -> Outcome {
    let ells = [1.0, 1.2, 1.4, 1.6];
    let mut table = String::from("ell,mass_outside\n");
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &ell in &ells {
        let run = runs.get(10.0, ell, 0);
        let mass = run.eval.localization.as_ref().map_or(f64::NAN, |l| l.mass_outside);
        table.push_str(&format!("{ell},{mass:.4}\n"));
        cells.push(format!("{ell}: {mass:.4}"));
        rows.push(SweepRow {
            alpha: 10.0,
            ell,
            eval: run.eval.clone(),
        });
    }
    let dir = artifacts().join("ell-sweep");
    write_file(&dir.join("mass_outside.csv"), &table).unwrap();
    write_file(&dir.join("sweep.csv"), sweep_csv(&rows)).unwrap();
    let finite = rows.iter().all(|r| r.eval.localization.as_ref().is_some_and(|l| l.mass_outside.is_finite()));
    check(finite, format!("mean activation mass outside gt box (alpha=10) {}; table in {}", cells.join(", "), dir.display()))
}

// ---------------------------------------------------------------- 9

fn determinism_and_persistence() -> Outcome {
    let cfg = RunConfig {
        synth: Some(SynthConfig {
            images_per_class: 10,
            image_size: 16,
            confound_prob: 0.9,
            ..Default::default()
        }),
        train: TrainConfig {
            epochs: 2,
            seed: 9,
            loss: LossConfig {
                alpha: 10.0,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    };
    let data = prepare(&cfg).unwrap();
    let spec = experiment::backbone_spec(&cfg.backbone, &data.train);
    let once = || -> (ckfr_core::backbone::Model, TrainHistory) {
        train(&cfg.train, &spec, &data.train, Some(&data.val), data.prior.as_ref()).unwrap()
    };
    let (model, h1) = once();
    let (_, h2) = once();
    let same_history = h1.to_csv().as_bytes() == h2.to_csv().as_bytes();
    let bytes = checkpoint_bytes(&model);
    let back = model_from_checkpoint(&bytes).unwrap();
    let bit_exact = back.spec == model.spec
        && back.weights.len() == model.weights.len()
        && back.weights.iter().zip(&model.weights).all(|((ka, a), (kb, b))| {
            ka == kb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && checkpoint_bytes(&back) == bytes;
    let mut record = vec![7u8];
    record.extend([255u8; 3072]);
    let one = parse_cifar_binary(&record, 10).unwrap();
    let fixture_one = one.len() == 1 && one.labels == [7] && one.images.data().iter().all(|&v| v == 1.0);
    let mut r = rng::stream(9, 0);
    let mut two = Vec::new();
    let mut expected = Vec::new();
    for label in [3u8, 0u8] {
        two.push(label);
        for _ in 0..3072 {
            let b: u8 = r.gen();
            two.push(b);
            expected.push(b as f64 / 255.0);
        }
    }
    let parsed = parse_cifar_binary(&two, 10).unwrap();
    let fixture_two = parsed.labels == [3, 0] && parsed.images.shape() == [2, 3, 32, 32] && parsed.images.data() == &expected[..];
    let truncated = parse_cifar_binary(&[0u8; 3072], 10).is_err();
    check(
        same_history && bit_exact && fixture_one && fixture_two && truncated,
        format!(
            "history bytes identical: {same_history}; checkpoint round trip bit-exact: {bit_exact}; cifar fixtures: {}",
            fixture_one && fixture_two && truncated
        ),
    )
}

// ---------------------------------------------------------------- 10

fn max_normalized(v: &[f64]) -> Vec<f64> {
    let hi = v.iter().copied().fold(0.0, f64::max);
    v.iter().map(|x| if hi > 0.0 { x.max(0.0) / hi } else { 0.0 }).collect()
}

fn cam_identity() -> Outcome {
    let mut r = rng::stream(10, 0);
    let mut worst: f64 = 0.0;
    let mut pixels = 0;
    let mut full_maps = 0;
    let mut full_worst: f64 = 0.0;
    for trial in 0..50 {
        let spec = BackboneSpec {
            input: [3, 12, 12],
            blocks: vec![4, 6],
            pool: true,
            latent_dim: 5,
            classes: 4,
            dropout: 0.15,
            viz_layer: trial % 2 == 1,
        };
        let model = build_backbone(&spec, &mut r).unwrap();
        let image: Vec<f64> = (0..3 * 144).map(|_| r.gen_range(0.0..1.0)).collect();
        let class = r.gen_range(0..4);
        let (features, hw) = model.feature_map(&image).unwrap();
        let n = hw.0 * hw.1;
        let m = spec.latent_dim;
        let w = model.cam_weights();
        let cam = ckfr_core::wsol::cam_lowres(&features, &w[class * m..(class + 1) * m], n);
        let (f2, grads, _) = model.feature_gradients(&image, class).unwrap();
        let gradcam = ckfr_core::wsol::gradcam_lowres(&f2, &grads, n);
        let (nc, ng) = (max_normalized(&cam), max_normalized(&gradcam));
        for i in 0..n {
            if cam[i] >= 0.0 {
                worst = worst.max((nc[i] - ng[i]).abs());
                pixels += 1;
            }
        }
        if cam.iter().all(|&v| v >= 0.0) {
            let a = ckfr_core::wsol::compute_activation_map(&model, &image, class, MapMethod::Cam).unwrap();
            let b = ckfr_core::wsol::compute_activation_map(&model, &image, class, MapMethod::GradCam).unwrap();
            full_maps += 1;
            for (x, y) in a.values.iter().zip(&b.values) {
                full_worst = full_worst.max((x - y).abs());
            }
        }
    }
    check(
        worst <= 1e-6 && full_worst <= 1e-6 && pixels > 0,
        format!(
            "max |cam - gradcam| {worst:.1e} over {pixels} cam >= 0 cells of 50 models; {full_maps} all-nonnegative maps agree end to end within {full_worst:.1e}"
        ),
    )
}

fn main() {
    let mut runs = Runs::default();
    type Criterion<'a> = (&'a str, Box<dyn FnMut(&mut Runs) -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("gradient fidelity", Box::new(|_| gradient_fidelity())),
        ("metric axioms", Box::new(|_| metric_axioms())),
        ("oracle equivalence", Box::new(|_| oracle_equivalence())),
        ("qtr identities", Box::new(|_| qtr_identities())),
        ("alignment reproduction", Box::new(alignment_reproduction)),
        ("localization delta", Box::new(localization_delta)),
        ("alpha sweep", Box::new(alpha_sweep)),
        ("ell sweep report", Box::new(ell_sweep)),
        ("determinism and persistence", Box::new(|_| determinism_and_persistence())),
        ("cam identity", Box::new(|_| cam_identity())),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, mut f)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f(&mut runs);
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let _ = writeln!(std::io::stderr(), "criterion {n:>2} {tag} {name} ({secs:.0}s): {detail}");
        if outcome.is_err() {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        let _ = writeln!(std::io::stderr(), "acceptance: all criteria passed");
    } else {
        let _ = writeln!(std::io::stderr(), "acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
