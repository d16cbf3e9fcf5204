//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the report is always
//! printed; use `cargo test -p gtloc --test acceptance`.

use std::time::{Duration, Instant};

use gtloc::datastore::{
    make_splits, synth_generate, Dataset, SplitFractions, SplitMode, SplitTag, SynthSpec, TimeDistribution,
};
use gtloc::diffnet::gradcheck::{central_difference, relative_error};
use gtloc::diffnet::{dot, l2_normalize_rows, Tensor2};
use gtloc::encoders::EncoderConfig;
use gtloc::geotime::{cyclic_abs_error, geodesic_km, toroidal_distance, tps, CyclicTime, GeoCoord, ToyScale};
use gtloc::objectives::{loc_contrastive_loss, tml_loss, tml_targets, LocationQueue, TimeDistance};
use gtloc::retrieval::{
    build_gallery, eval_geo, eval_time, gps_items_from, metric_rows, retrieve_in, time_items_from, write_metrics_csv,
    GeoMetrics, TimeMetrics, DEFAULT_THRESHOLDS_KM,
};
use gtloc::trainer::{train, Checkpoint, TrainConfig, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GALLERY_SIZE: usize = 4000;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(name.to_string());
        }
    }
}

fn random_time(rng: &mut ChaCha8Rng) -> CyclicTime {
    CyclicTime::new(rng.random(), rng.random()).unwrap()
}

fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor2<f64> {
    let m = Tensor2::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0));
    l2_normalize_rows(&m).unwrap().0
}

/// Minimum over the nine integer translates of `b`.
fn nine_copy_distance(a: &CyclicTime, b: &CyclicTime) -> f64 {
    let mut best = f64::INFINITY;
    for dx in [-1.0, 0.0, 1.0] {
        for dy in [-1.0, 0.0, 1.0] {
            let d = ((a.theta() - b.theta() - dx).powi(2) + (a.phi() - b.phi() - dy).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}

fn metric_axioms(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..10_000 {
        let (a, b, c) = (random_time(&mut rng), random_time(&mut rng), random_time(&mut rng));
        let (ab, ba, bc, ac) = (
            toroidal_distance(&a, &b),
            toroidal_distance(&b, &a),
            toroidal_distance(&b, &c),
            toroidal_distance(&a, &c),
        );
        ok &= ab == ba;
        ok &= toroidal_distance(&a, &a) == 0.0;
        ok &= ac <= ab + bc + 1e-12;
        worst = worst.max((ab - nine_copy_distance(&a, &b)).abs());
    }
    ok &= worst < 1e-12;
    let took = start.elapsed();
    r.line(
        "1 metric axioms",
        ok && took < Duration::from_secs(5),
        format!("10^4 triples, max |d - nine-copy| = {worst:.1e}, {:.2} s", took.as_secs_f64()),
    );
}

fn formula_cross_checks(r: &mut Report) {
    let table = tps(1.40, 2.72).unwrap();
    let ok = (table - 0.77).abs() <= 5e-4 && tps(0.0, 0.0).unwrap() == 1.0 && tps(6.0, 12.0).unwrap() == 0.0;
    r.line("2 formula cross-checks", ok, format!("tps(1.40, 2.72) = {table:.4}, tps(0,0) = 1, tps(6,12) = 0"));
}

/// Mean over anchors of `-log(exp(v_i·l_i/τ) / Σ_k exp(v_i·c_k/τ))` over batch and queue.
fn loc_oracle(v: &Tensor2<f64>, l: &Tensor2<f64>, q: &Tensor2<f64>, tau: f64) -> f64 {
    let b = v.rows();
    let mut total = 0.0;
    for i in 0..b {
        let s = |c: &[f64]| (v.row(i).iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
        let denom: f64 = (0..b).map(|k| s(l.row(k))).sum::<f64>() + (0..q.rows()).map(|k| s(q.row(k))).sum::<f64>();
        total -= (s(l.row(i)) / denom).ln();
    }
    total / b as f64
}

/// Mean over anchors of `-Σ_j q_ij log p_ij` with `q_ij = 1 - softmax_j(δ_ij)`.
fn tml_oracle(v: &Tensor2<f64>, t: &Tensor2<f64>, times: &[CyclicTime], tau: f64) -> f64 {
    let b = v.rows();
    let mut total = 0.0;
    for i in 0..b {
        let sims: Vec<f64> =
            (0..b).map(|j| (v.row(i).iter().zip(t.row(j)).map(|(a, c)| a * c).sum::<f64>() / tau).exp()).collect();
        let zs: f64 = sims.iter().sum();
        let deltas: Vec<f64> = (0..b)
            .map(|j| {
                let dt = (times[i].theta() - times[j].theta()).abs();
                let dp = (times[i].phi() - times[j].phi()).abs();
                (dt.min(1.0 - dt).powi(2) + dp.min(1.0 - dp).powi(2)).sqrt()
            })
            .collect();
        let zd: f64 = deltas.iter().map(|d| d.exp()).sum();
        for j in 0..b {
            total -= (1.0 - deltas[j].exp() / zd) * (sims[j] / zs).ln();
        }
    }
    total / b as f64
}

fn gradient_correctness(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, d, h) = (4, 8, 1e-6);
    let mat = |p: &[f64]| Tensor2::from_vec(b, d, p.to_vec()).unwrap();
    let v = unit_rows(b, d, &mut rng);
    let l = unit_rows(b, d, &mut rng);
    let t = unit_rows(b, d, &mut rng);
    let q = unit_rows(6, d, &mut rng);
    let times: Vec<CyclicTime> = (0..b).map(|_| random_time(&mut rng)).collect();
    let targets = tml_targets(&times, TimeDistance::Cyclic, false).unwrap();
    let log_tau = 0.2f64.ln();

    let loc = |v: &Tensor2<f64>, l: &Tensor2<f64>, lt: f64| {
        loc_contrastive_loss(std::slice::from_ref(v), std::slice::from_ref(l), &q, lt).unwrap()
    };
    let out = loc(&v, &l, log_tau);
    let loc_errs = [
        relative_error(out.grad_image[0].data(), &central_difference(|p| loc(&mat(p), &l, log_tau).loss, v.data(), h)),
        relative_error(
            out.grad_location[0].data(),
            &central_difference(|p| loc(&v, &mat(p), log_tau).loss, l.data(), h),
        ),
        relative_error(&[out.grad_log_tau], &central_difference(|p| loc(&v, &l, p[0]).loss, &[log_tau], h)),
    ];
    let tml = |v: &Tensor2<f64>, t: &Tensor2<f64>, lt: f64| tml_loss(v, t, &targets, lt).unwrap();
    let out = tml(&v, &t, log_tau);
    let tml_errs = [
        relative_error(out.grad_image.data(), &central_difference(|p| tml(&mat(p), &t, log_tau).loss, v.data(), h)),
        relative_error(out.grad_time.data(), &central_difference(|p| tml(&v, &mat(p), log_tau).loss, t.data(), h)),
        relative_error(&[out.grad_log_tau], &central_difference(|p| tml(&v, &t, p[0]).loss, &[log_tau], h)),
    ];
    let worst = loc_errs.iter().chain(&tml_errs).fold(0.0f64, |a, &e| a.max(e));
    let took = start.elapsed();
    r.line(
        "3 gradient correctness",
        worst < 1e-6 && took < Duration::from_secs(30),
        format!(
            "B=4 dim=8, max relative error {worst:.1e} (time {:.1e}, loc {:.1e}), {:.2} s",
            tml_errs.iter().fold(0.0f64, |a, &e| a.max(e)),
            loc_errs.iter().fold(0.0f64, |a, &e| a.max(e)),
            took.as_secs_f64()
        ),
    );
}

fn loss_value_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, d) = (3, 4);
    let v = unit_rows(b, d, &mut rng);
    let l = unit_rows(b, d, &mut rng);
    let t = unit_rows(b, d, &mut rng);
    let q = unit_rows(5, d, &mut rng);
    let times: Vec<CyclicTime> = (0..b).map(|_| random_time(&mut rng)).collect();
    let tau = 0.07;
    let targets = tml_targets(&times, TimeDistance::Cyclic, false).unwrap();
    let got_t = tml_loss(&v, &t, &targets, f64::ln(tau)).unwrap().loss;
    let want_t = tml_oracle(&v, &t, &times, tau);
    let got_l =
        loc_contrastive_loss(std::slice::from_ref(&v), std::slice::from_ref(&l), &q, f64::ln(tau)).unwrap().loss;
    let want_l = loc_oracle(&v, &l, &q, tau);
    let et = ((got_t - want_t) / want_t).abs();
    let el = ((got_l - want_l) / want_l).abs();
    r.line(
        "4 loss-value oracle",
        et < 1e-6 && el < 1e-6,
        format!("tml {got_t:.6} (rel err {et:.1e}), loc {got_l:.6} (rel err {el:.1e})"),
    );
}

fn retrieval_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 64;
    let mut ok = true;
    let mut big_time = Duration::ZERO;
    for &n in &[10usize, 1_000, 100_000] {
        let gallery: Tensor2<f32> = unit_rows(n, dim, &mut rng).cast();
        // duplicated rows exercise the tie-break
        let gallery = Tensor2::from_fn(n, dim, |i, c| gallery.get(if i % 7 == 3 { i - 1 } else { i }, c));
        for _ in 0..3 {
            let query: Tensor2<f32> = unit_rows(1, dim, &mut rng).cast();
            let query = query.row(0);
            let start = Instant::now();
            let got = retrieve_in(query, &gallery, n).unwrap();
            if n == 100_000 {
                big_time = big_time.max(start.elapsed());
            }
            let scores: Vec<f32> =
                (0..n).map(|i| query.iter().zip(gallery.row(i)).fold(0.0f32, |acc, (a, b)| acc + a * b)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let sims: Vec<f32> = order.iter().map(|&i| scores[i]).collect();
            ok &= got.indices == order;
            ok &= got.similarities.iter().zip(&sims).all(|(a, b)| a.to_bits() == b.to_bits());
            ok &= dot(query, gallery.row(order[0])) == sims[0];
        }
    }
    r.line(
        "5 retrieval oracle",
        ok && big_time < Duration::from_secs(10),
        format!("sizes 10 / 1k / 100k bit-exact against a full scan; 100k query {:.3} s", big_time.as_secs_f64()),
    );
}

fn queue_semantics(r: &mut Report) {
    let cap = 4096;
    let mut ok = true;
    for k in [1usize, 100, 5000] {
        let mut q = LocationQueue::new(cap, 2);
        let total = cap + k;
        for i in 0..total {
            q.push(&[i as f32, -(i as f32)]).unwrap();
        }
        let held: Vec<Vec<f32>> = q.iter().map(|r| r.to_vec()).collect();
        let want: Vec<Vec<f32>> = (total - cap..total).map(|i| vec![i as f32, -(i as f32)]).collect();
        ok &= q.len() == cap && held == want;
    }
    r.line("10 queue semantics", ok, "4096 + k insertions keep the newest 4096 in order for k = 1, 100, 5000".into());
}

/// One synthetic benchmark run: data, split, training and evaluation.
struct Run {
    checkpoint: Checkpoint,
    time: TimeMetrics,
    geo: GeoMetrics,
    metrics_csv: Vec<u8>,
    oracle: (f64, f64, f64),
    elapsed: Duration,
}

#[derive(Clone, Copy)]
struct Setup {
    seed: u64,
    mode: TrainMode,
    distance: TimeDistance,
    times: TimeDistribution,
    label_noise: f64,
}

impl Setup {
    fn base(seed: u64) -> Self {
        Self {
            seed,
            mode: TrainMode::GtLoc,
            distance: TimeDistance::Cyclic,
            times: TimeDistribution::Uniform,
            label_noise: 0.0,
        }
    }
}

fn split_dataset(spec: &SynthSpec) -> (Dataset, Dataset) {
    let ds = synth_generate(spec).unwrap();
    let tags = make_splits(&ds, SplitMode::Random, SplitFractions { train: 0.75, eval: 0.25 }, spec.seed).unwrap();
    let ds = ds.with_splits(tags).unwrap();
    (ds.split(SplitTag::Train).unwrap(), ds.split(SplitTag::Eval).unwrap())
}

/// Errors of the best gallery label for each ground truth: the floor any
/// retrieval model can reach with these galleries.
fn label_oracle(train_ds: &Dataset, eval_ds: &Dataset, seed: u64) -> (f64, f64, f64) {
    let times: Vec<CyclicTime> = time_items_from(train_ds, GALLERY_SIZE, seed, ToyScale::Monthly)
        .unwrap()
        .iter()
        .map(|i| i.time.unwrap())
        .collect();
    let geos: Vec<GeoCoord> =
        gps_items_from(train_ds, GALLERY_SIZE, seed).unwrap().iter().map(|i| i.geo.unwrap()).collect();
    let truth = eval_ds.times(ToyScale::Monthly).unwrap();
    let (mut m, mut h) = (0.0, 0.0);
    for t in &truth {
        let best = times.iter().min_by(|a, b| toroidal_distance(a, t).total_cmp(&toroidal_distance(b, t))).unwrap();
        let (dm, dh) = cyclic_abs_error(best, t);
        m += dm;
        h += dh;
    }
    let within = eval_ds
        .geos()
        .iter()
        .filter(|g| geos.iter().map(|x| geodesic_km(x, g)).fold(f64::INFINITY, f64::min) < 200.0)
        .count();
    let n = truth.len() as f64;
    (m / n, h / n, within as f64 / n)
}

fn benchmark(s: Setup) -> Run {
    let start = Instant::now();
    let mut spec = SynthSpec::new(2000, s.seed, 64);
    spec.time_distribution = s.times;
    let (train_ds, eval_ds) = split_dataset(&spec);
    let mut cfg = TrainConfig { seed: s.seed, mode: s.mode, ..TrainConfig::desk() };
    cfg.tml.distance = s.distance;
    cfg.noise.label_noise_sigma = s.label_noise;
    let enc = EncoderConfig { seed: s.seed, ..EncoderConfig::desk(64) };
    let report = train(&train_ds, enc, cfg).unwrap();
    assert!(report.aborted.is_none(), "training aborted: {:?}", report.aborted);
    let checkpoint = report.checkpoint;
    let hash = checkpoint.model_hash();
    let model = &checkpoint.model;
    let tg = build_gallery(
        gtloc::retrieval::GalleryKind::Time,
        time_items_from(&train_ds, GALLERY_SIZE, s.seed, ToyScale::Monthly).unwrap(),
        model,
        &hash,
    )
    .unwrap();
    let gg = build_gallery(
        gtloc::retrieval::GalleryKind::Gps,
        gps_items_from(&train_ds, GALLERY_SIZE, s.seed).unwrap(),
        model,
        &hash,
    )
    .unwrap();
    let emb = model.embed_images(eval_ds.embeddings()).unwrap();
    let time = eval_time(&emb, &eval_ds.times(ToyScale::Monthly).unwrap(), &tg).unwrap();
    let geo = eval_geo(&emb, eval_ds.geos(), &gg, &DEFAULT_THRESHOLDS_KM).unwrap();
    let mut metrics_csv = Vec::new();
    write_metrics_csv(&mut metrics_csv, &metric_rows(Some(&time), Some(&geo))).unwrap();
    let oracle = label_oracle(&train_ds, &eval_ds, s.seed);
    Run { checkpoint, time, geo, metrics_csv, oracle, elapsed: start.elapsed() }
}

/// Mean cyclic time error on the TPS scale: `1 - TPS`.
fn time_error(t: &TimeMetrics) -> f64 {
    1.0 - t.tps
}

fn main() {
    let mut r = Report { failures: Vec::new() };
    metric_axioms(&mut r);
    formula_cross_checks(&mut r);
    gradient_correctness(&mut r);
    loss_value_oracle(&mut r);
    retrieval_oracle(&mut r);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let single = |s: Setup| pool.install(|| benchmark(s));

    let base = single(Setup::base(0));
    let acc200 = base.geo.accuracy_at(200.0).unwrap();
    let (om, oh, oacc) = base.oracle;
    r.line(
        "6 end-to-end recoverability",
        base.time.n == 500
            && base.time.hour_err < 2.0
            && base.time.month_err < 1.5
            && acc200 >= 0.70
            && base.elapsed < Duration::from_secs(15 * 60),
        format!(
            "n={} month {:.3} mo, hour {:.3} h, acc@200km {:.3}, TPS {:.4}, {:.1} s (label oracle: month {om:.3}, hour {oh:.3}, acc@200km {oacc:.3})",
            base.time.n, base.time.month_err, base.time.hour_err, acc200, base.time.tps, base.elapsed.as_secs_f64()
        ),
    );

    // trained time embeddings are continuous across the wrap of the torus
    let model = &base.checkpoint.model;
    let a = model.encode_time(&CyclicTime::new(0.0, 0.0).unwrap()).unwrap();
    let b = model.encode_time(&CyclicTime::new(1.0 - 1e-9, 0.0).unwrap()).unwrap();
    let cos = dot(&a, &b);
    r.line("wrap continuity", cos > 0.99, format!("cos(e(0,0), e(1-1e-9,0)) = {cos:.6}"));

    let mut gaps = Vec::new();
    for seed in 0..3u64 {
        let joint = if seed == 0 { base.time.tps } else { single(Setup::base(seed)).time.tps };
        let time_only = single(Setup { mode: TrainMode::TimeLoc, ..Setup::base(seed) }).time.tps;
        gaps.push((joint, time_only));
    }
    r.line(
        "7 joint vs time-only",
        gaps.iter().all(|(j, t)| *j >= t - 0.01),
        format!(
            "TPS gtloc/timeloc per seed: {}",
            gaps.iter().map(|(j, t)| format!("{j:.4}/{t:.4}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let mut ablation = Vec::new();
    for seed in 0..3u64 {
        let wrap = Setup { times: TimeDistribution::WrapHeavy, ..Setup::base(seed) };
        let cyclic = single(wrap).time;
        let l2 = single(Setup { distance: TimeDistance::L2, ..wrap }).time;
        ablation.push((cyclic, l2));
    }
    r.line(
        "8 cyclic vs l2 targets",
        ablation.iter().all(|(c, l)| time_error(c) < time_error(l)),
        format!(
            "1-TPS cyclic/l2 per seed: {}",
            ablation
                .iter()
                .map(|(c, l)| format!(
                    "{:.4}/{:.4} (month {:.2}/{:.2}, hour {:.2}/{:.2})",
                    time_error(c),
                    time_error(l),
                    c.month_err,
                    l.month_err,
                    c.hour_err,
                    l.hour_err
                ))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    let noisy = single(Setup { label_noise: 1.0, ..Setup::base(0) });
    let drop = base.time.tps - noisy.time.tps;
    r.line(
        "9 label-noise robustness",
        drop < 0.10,
        format!("TPS {:.4} -> {:.4} at sigma = 1 (drop {:.2} points)", base.time.tps, noisy.time.tps, 100.0 * drop),
    );

    queue_semantics(&mut r);

    let again = single(Setup::base(0));
    let same_ckpt = again.checkpoint.to_bytes() == base.checkpoint.to_bytes();
    let same_csv = again.metrics_csv == base.metrics_csv;
    r.line(
        "11 determinism",
        same_ckpt && same_csv,
        format!(
            "checkpoint bytes identical: {same_ckpt}, metric CSV identical: {same_csv} (hash {})",
            &base.checkpoint.content_hash()[..16]
        ),
    );

    if r.failures.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failed {}", r.failures.join(", "));
        std::process::exit(1);
    }
}
