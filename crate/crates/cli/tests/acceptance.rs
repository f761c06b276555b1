//! Acceptance run: one PASS/FAIL line per criterion. Criteria 6 to 9 use a
//! pipeline at the scale of `configs/acceptance.config`; criterion 10 runs
//! `configs/smoke.config` twice. The run takes most of an hour on one core.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use hardcase::agent::{encode_action, obs_tensor, AgentConfig, PlanningAgent, ACTION_DIM};
use hardcase::buckets::{BucketStore, BucketWeights, DecileThresholds};
use hardcase::corpus::generate_corpus;
use hardcase::curricula::{geometric_raw, geometric_weights, is_weights, score_ranges, StrategySpec, DEFAULT_ALPHA, DEFAULT_EPSILON};
use hardcase::difficulty::DifficultyReport;
use hardcase::embedding::rasterize_views;
use hardcase::eval::VariantReport;
use hardcase::features::observe;
use hardcase::seeding::{stream_rng, Stream};
use hardcase::stats::{paired_wins, sign_test_p, spearman};
use hardcase::trainer::*;
use hardcase::world::{expert_rollout, generate_scenario, KnobDistribution, RunSegment, FRAMES};
use hardcase_cli::{ExperimentConfig, Pipeline, Workspace};
use hardcase_nn::{backward, Gmm, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TABLE_MIN: [f64; 10] = [0.001, 0.019, 0.031, 0.046, 0.066, 0.094, 0.133, 0.189, 0.270, 0.407];
const TABLE_TOP: f64 = 0.939;
const TABLE_MEAN: [f64; 10] = [0.013, 0.025, 0.038, 0.056, 0.079, 0.112, 0.159, 0.227, 0.331, 0.573];
const PRINTED_RANGES: [f64; 10] = [0.0180, 0.0126, 0.0150, 0.0199, 0.0276, 0.0392, 0.0557, 0.0814, 0.1368, 0.5324];

fn verdict(id: u8, name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("{} {id:>2} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = std::io::stdout().flush();
    pass
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sampler_fidelity() -> bool {
    let t = Instant::now();
    let segs: Vec<Arc<RunSegment>> = generate_corpus(0..100, &KnobDistribution::default(), 1).unwrap().into_iter().map(Arc::new).collect();
    let scores: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
    let mut store = BucketStore::from_scores(&segs, &scores, 8, "acceptance").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = BucketWeights::new((0..10).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
    let p = w.normalized();
    let mut counts = [0u64; 10];
    let mut reads_ok = true;
    for _ in 0..1000 {
        let before = store.record_reads();
        for s in store.sample_batch(&w, 1000, &mut rng).unwrap() {
            counts[s.bucket] += 1;
        }
        reads_ok &= store.record_reads() - before == 1000;
    }
    let linf = (0..10).map(|k| (counts[k] as f64 / 1e6 - p[k]).abs()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    verdict(1, "sampler fidelity", linf < 0.002 && reads_ok && secs < 30.0, format!("L-inf {linf:.5} over 1e6 draws, reads per batch = B: {reads_ok}, {secs:.1} s"))
}

fn geometric_exactness() -> bool {
    let qi = [1.0; 10];
    let w0 = geometric_weights(0, &qi, &TABLE_MEAN, DEFAULT_ALPHA).unwrap().normalized();
    let uniform = w0.iter().all(|&w| (w - 0.1).abs() < 1e-15);
    let s: f64 = TABLE_MEAN.iter().sum();
    let wl = geometric_weights(10_000_000, &qi, &TABLE_MEAN, DEFAULT_ALPHA).unwrap().normalized();
    let limit = (0..10).map(|k| (wl[k] - TABLE_MEAN[k] / s).abs()).fold(0.0, f64::max);
    let t = 27_726u64;
    let alpha = 0.5f64.powf(1.0 / t as f64);
    let raw = geometric_raw(t, &qi, &TABLE_MEAN, alpha);
    let want: Vec<f64> = (0..10).map(|k| (qi[k] - TABLE_MEAN[k]) * 0.5 + TABLE_MEAN[k]).collect();
    let spot = (0..10).map(|k| (raw[k] - want[k]).abs()).fold(0.0, f64::max);
    let ws: f64 = want.iter().sum();
    let norm = geometric_weights(t, &qi, &TABLE_MEAN, alpha).unwrap().normalized();
    let spot_n = (0..10).map(|k| (norm[k] - want[k] / ws).abs()).fold(0.0, f64::max);
    let pass = uniform && limit < 1e-12 && spot < 1e-12 && spot_n < 1e-12;
    verdict(2, "geometric schedule", pass, format!("t=0 uniform: {uniform}, limit error {limit:.1e}, half-way error {spot:.1e} raw / {spot_n:.1e} normalized"))
}

fn uniform_range_vector() -> bool {
    let mut b = TABLE_MIN.to_vec();
    b.push(TABLE_TOP);
    let r = score_ranges(&DecileThresholds::new(b).unwrap());
    let (k, worst) = (0..10).map(|k| (k, (r[k] - PRINTED_RANGES[k]).abs())).fold((0, 0.0), |a, x| if x.1 > a.1 { x } else { a });
    verdict(
        3,
        "uniform-range vector",
        worst <= 5e-4,
        format!("max deviation {worst:.4} at bucket {} ({:.4} from the table boundaries vs {:.4} printed)", k + 1, r[k], PRINTED_RANGES[k]),
    )
}

fn importance_sampling() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut analytic = 0.0f64;
    for _ in 0..1000 {
        let q = BucketWeights::new((0..10).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let f: Vec<f64> = (0..10).map(|_| rng.random_range(-10.0..10.0)).collect();
        let p = q.normalized();
        let w = is_weights(&q, 1.0, &[]).unwrap();
        let lhs = f.iter().sum::<f64>() / 10.0;
        let rhs: f64 = (0..10).map(|i| p[i] * f[i] * w[i]).sum();
        analytic = analytic.max((lhs - rhs).abs());
    }
    let mut worst_z = 0.0f64;
    for _ in 0..5 {
        let q = BucketWeights::new((0..10).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
        let f: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..5.0)).collect();
        let p = q.normalized();
        let w = is_weights(&q, 1.0, &[]).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let k = p.iter().position(|&pk| {
                    acc += pk;
                    u < acc
                });
                let k = k.unwrap_or(9);
                f[k] * w[k]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        worst_z = worst_z.max((mean - f.iter().sum::<f64>() / 10.0).abs() / se);
    }
    verdict(4, "importance-sampling unbiasedness", analytic < 1e-12 && worst_z < 3.0, format!("analytic max error {analytic:.1e} over 1000 instances, Monte Carlo worst |z| {worst_z:.2} over 5 x 1e5 draws"))
}

/// Largest per-coordinate relative error, with a 1e-3 floor on the
/// denominator for gradients at the finite-difference noise level.
fn grad_error(params: &ParamSet, coords: usize, f: impl Fn(&ParamSet) -> (f64, Vec<Tensor>)) -> f64 {
    let h = 1e-6;
    let (_, analytic) = f(params);
    let flat: Vec<f64> = analytic.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = params.num_scalars();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..coords.min(n) {
        let c = i * n / coords.min(n);
        let orig = *probe.coord_mut(c);
        *probe.coord_mut(c) = orig + h;
        let up = f(&probe).0;
        *probe.coord_mut(c) = orig - h;
        let down = f(&probe).0;
        *probe.coord_mut(c) = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((flat[c] - numeric).abs() / (flat[c].abs() + numeric.abs()).max(1e-3));
    }
    worst
}

fn gradient_integrity() -> bool {
    let corpus: Vec<RunSegment> = generate_corpus(0..200, &KnobDistribution::default(), 1).unwrap().into_iter().filter(|s| !s.scenario.agents.is_empty()).collect();
    let cfg = AgentConfig { policy_hidden: vec![16], discriminator_hidden: vec![16], components: 2, log_std_min: -1.0 };
    let pick = |rng: &mut ChaCha8Rng| {
        let s = &corpus[rng.random_range(0..corpus.len())];
        let t = rng.random_range(0..FRAMES - 1);
        (s, t)
    };
    let (mut bc, mut lp, mut disc, mut mgail) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = PlanningAgent::new(&cfg, &mut rng);
        let rows: Vec<_> = (0..3).map(|_| pick(&mut rng)).collect();
        let obs: Vec<_> = rows.iter().map(|(s, t)| observe(&s.scenario, *t, &s.ego_track[*t])).collect();
        let acts: Vec<f64> = rows.iter().flat_map(|(s, t)| encode_action(&s.expert_actions[*t], &s.ego_track[*t])).collect();

        bc = bc.max(grad_error(&agent.policy_params, 24, |p| {
            let mut tape = Tape::new();
            let b = tape.bind(p);
            let x = tape.constant(obs_tensor(&obs));
            let a = tape.constant(Tensor::from_vec(3, ACTION_DIM, acts.clone()).unwrap());
            let head = agent.policy_head(&mut tape, &b, x).unwrap();
            let l = bc_loss(&mut tape, &agent.gmm, &head, a).unwrap();
            let g = backward(&tape, l).unwrap();
            (tape.value(l).item(), g.of(&tape, &b))
        }));

        let gmm = Gmm::new(3, ACTION_DIM);
        let mut head = ParamSet::new();
        head.push("head", Tensor::from_vec(4, gmm.head_width(), (0..4 * gmm.head_width()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap());
        let a: Vec<f64> = (0..4 * ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect();
        lp = lp.max(grad_error(&head, 40, |p| {
            let mut tape = Tape::new();
            let b = tape.bind(p);
            let g = gmm.split(&mut tape, b.var(0)).unwrap();
            let av = tape.constant(Tensor::from_vec(4, ACTION_DIM, a.clone()).unwrap());
            let l = gmm.log_prob(&mut tape, &g, av).unwrap();
            let l = tape.mean(l);
            let gr = backward(&tape, l).unwrap();
            (tape.value(l).item(), gr.of(&tape, &b))
        }));

        let w: Vec<f64> = (0..2).map(|_| rng.random_range(0.5..2.0)).collect();
        for objective in [DiscriminatorObjective::CrossEntropy, DiscriminatorObjective::AsWritten] {
            disc = disc.max(grad_error(&agent.discriminator_params, 40, |p| {
                let mut tape = Tape::new();
                let b = tape.bind(p);
                let po = tape.constant(obs_tensor(&obs[..2]));
                let eo = tape.constant(obs_tensor(&obs[1..]));
                let pl = agent.discriminator_logits(&mut tape, &b, po).unwrap();
                let el = agent.discriminator_logits(&mut tape, &b, eo).unwrap();
                let wv = tape.constant(Tensor::column(w.clone()));
                let l = match objective {
                    DiscriminatorObjective::CrossEntropy => discriminator_cross_entropy(&mut tape, pl, el, Some(wv), Some(wv)),
                    DiscriminatorObjective::AsWritten => discriminator_loss(&mut tape, pl, el, Some(wv), Some(wv)),
                }
                .unwrap();
                let g = backward(&tape, l).unwrap();
                (tape.value(l).item(), g.of(&tape, &b))
            }));
        }

        let h = 5;
        let segs: Vec<&RunSegment> = rows[..2].iter().map(|(s, _)| *s).collect();
        let starts: Vec<usize> = (0..2).map(|_| rng.random_range(0..=FRAMES - 1 - h)).collect();
        let noise = RolloutNoise::draw(2, h, &mut rng);
        mgail = mgail.max(grad_error(&agent.policy_params, 24, |p| {
            let mut tape = Tape::new();
            let bp = tape.bind(p);
            let bd = tape.bind(&agent.discriminator_params);
            let mut src = PolicySampler { noise: noise.clone() };
            let r = mgail_rollout(&agent, &mut tape, &bp, &segs, &starts, h, &mut src).unwrap();
            let l = mgail_policy_loss(&agent, &mut tape, &bd, &r).unwrap();
            let g = backward(&tape, l).unwrap();
            (tape.value(l).item(), g.of(&tape, &bp))
        }));
    }
    let worst = bc.max(lp).max(disc).max(mgail);
    verdict(
        5,
        "gradient integrity",
        worst < 1e-4,
        format!("max relative error over 100 seeds: BC {bc:.1e}, GMM log-prob {lp:.1e}, discriminator {disc:.1e}, MGAIL policy H=5 {mgail:.1e}"),
    )
}

fn difficulty_quality(p: &Pipeline) -> bool {
    let t = Instant::now();
    p.gen_data().unwrap();
    p.label().unwrap();
    p.train_embedding().unwrap();
    p.train_difficulty().unwrap();
    let secs = t.elapsed().as_secs_f64();
    let rep: DifficultyReport = p.ws.load("difficulty", &p.keys.difficulty).unwrap().read_json("report.json").unwrap();
    let enc = p.embedding_model().unwrap();
    let model = p.difficulty_model().unwrap();
    let mut means = Vec::new();
    for density in [0u32, 4, 8] {
        let mut total = 0.0;
        for i in 0..300u64 {
            let seed = 90_000_000 + i;
            let mut knobs = p.cfg.knobs.sample(&mut stream_rng(Stream::Knobs, &[seed]));
            knobs.agent_density = density;
            let seg = expert_rollout(&generate_scenario(seed, &knobs).unwrap());
            total += model.score(&enc.embed(&rasterize_views(&seg)).unwrap()).unwrap();
        }
        means.push(total / 300.0);
    }
    let monotone = means[0] < means[1] && means[1] < means[2];
    let pass = rep.holdout_auc >= 0.8 && monotone && secs < 600.0;
    verdict(
        6,
        "difficulty model quality",
        pass,
        format!(
            "held-out AUC {:.3} on {} train segments, mean score at density 0/4/8 = {:.4}/{:.4}/{:.4}, {secs:.0} s",
            rep.holdout_auc, p.cfg.corpus.train, means[0], means[1], means[2]
        ),
    )
}

fn variant<'a>(reps: &'a [VariantReport], name: &str) -> &'a VariantReport {
    reps.iter().find(|r| r.variant == name).unwrap_or_else(|| panic!("no variant {name}"))
}

fn bucket_monotonicity(reps: &[VariantReport]) -> bool {
    let b = variant(reps, "baseline_10");
    let coll: Vec<f64> = b.per_bucket.iter().map(|m| m.mean.collision).collect();
    let idx: Vec<f64> = (0..coll.len()).map(|k| k as f64).collect();
    let rho = spearman(&idx, &coll).unwrap();
    let shown: Vec<String> = coll.iter().map(|c| format!("{:.3}", c)).collect();
    verdict(7, "bucket monotonicity", rho >= 0.8, format!("Spearman {rho:.3}; baseline_10 collision by bucket [{}]", shown.join(" ")))
}

fn curriculum_effect(reps: &[VariantReport], sweep_secs: f64) -> bool {
    let top = |r: &VariantReport| r.per_seed_bucket.iter().map(|b| b[9].collision).collect::<Vec<f64>>();
    let base = variant(reps, "baseline_10");
    let mut a_pass = true;
    let mut parts = Vec::new();
    for name in ["uniform_10", "highest_10"] {
        let v = variant(reps, name);
        let (wins, n) = paired_wins(&top(v), &top(base));
        let pv = sign_test_p(wins, n);
        let lower = v.per_bucket[9].mean.collision < base.per_bucket[9].mean.collision;
        a_pass &= lower && pv < 0.05;
        parts.push(format!("{name} top-bucket collision {:.4} vs {:.4}, {wins}/{n} seeds better, p = {pv:.4}", v.per_bucket[9].mean.collision, base.per_bucket[9].mean.collision));
    }
    let lowest = variant(reps, "baseline_lowest_10").full.mean.collision;
    let b_pass = reps.iter().filter(|r| r.variant != "baseline_lowest_10").all(|r| r.full.mean.collision < lowest);
    let worst = reps.iter().max_by(|a, b| a.full.mean.collision.total_cmp(&b.full.mean.collision)).unwrap();
    parts.push(format!("worst full-set collision: {} ({:.4})", worst.variant, worst.full.mean.collision));
    let all = variant(reps, "baseline_all");
    let diff = (base.full.mean.failure - all.full.mean.failure).abs();
    let band = 2.0 * (base.full.se.failure.powi(2) + all.full.se.failure.powi(2)).sqrt();
    let c_pass = diff < band;
    parts.push(format!("baseline_10 vs baseline_all failure gap {diff:.4} vs 2-SE band {band:.4}"));
    parts.push(format!("sweep {:.0} min", sweep_secs / 60.0));
    let pass = a_pass && b_pass && c_pass && sweep_secs < 8.0 * 3600.0;
    verdict(8, "curriculum effect", pass, format!("(a) {} (b) {} (c) {} | {}", ok(a_pass), ok(b_pass), ok(c_pass), parts.join("; ")))
}

fn ok(b: bool) -> &'static str {
    if b {
        "holds"
    } else {
        "fails"
    }
}

fn per_dynamics(p: &Pipeline) -> bool {
    let inp = p.training_inputs().unwrap();
    let validation: Vec<&RunSegment> = inp.validation.iter().take(20).collect();
    let cfg = TrainConfig { steps: 1000, batch: 32, eval_every: 1000, select_after: 1000, validation_rollouts: 1, ..p.cfg.training.clone() };
    let run = |gamma: f64| {
        let spec = StrategySpec::PerAdaptive { gamma, beta: 1.0, epsilon: DEFAULT_EPSILON, window: 100 };
        let mut store = inp.store(p).unwrap();
        train(&mut store, &validation, &spec, &cfg, 0, RunOptions { workers: 1, record_losses: false }).unwrap().windows
    };
    let hot = run(1.0);
    let top = hot.iter().take(10).map(|w| w.weights[9]).fold(0.0, f64::max);
    let cool = run(0.1);
    let (lo, hi) = cool.iter().flat_map(|w| w.weights.iter().copied()).fold((1.0f64, 0.0f64), |(l, h), q| (l.min(q), h.max(q)));
    let hot_pass = top > 0.5;
    let cool_pass = lo >= 0.05 && hi <= 0.20;
    verdict(
        9,
        "PER dynamics",
        hot_pass && cool_pass,
        format!(
            "gamma=1: top-bucket probability peaks at {top:.3} over the first 10 windows ({}); gamma=0.1: every probability in [{lo:.4}, {hi:.4}] over {} windows ({})",
            ok(hot_pass),
            cool.len(),
            ok(cool_pass)
        ),
    )
}

fn report_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut names: Vec<String> = std::fs::read_dir(root.join("report")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), std::fs::read(root.join("report").join(&n)).unwrap())).collect()
}

fn determinism() -> bool {
    let cfg = ExperimentConfig::load(&configs().join("smoke.config")).unwrap();
    let mut times = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        Pipeline::new(cfg.clone(), Workspace::new(dir.path(), false), 1).unwrap().run_all().unwrap();
        times.push(t.elapsed().as_secs_f64());
        reports.push(report_bytes(dir.path()));
    }
    let same = reports[0] == reports[1];
    let pass = same && reports[0].len() == 9 && times.iter().all(|&s| s < 300.0);
    verdict(10, "determinism", pass, format!("smoke reports byte-identical: {same} ({} files), runs took {:.0} s and {:.0} s", reports[0].len(), times[0], times[1]))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut passed = 0;
    passed += sampler_fidelity() as usize;
    passed += geometric_exactness() as usize;
    passed += uniform_range_vector() as usize;
    passed += importance_sampling() as usize;
    passed += gradient_integrity() as usize;

    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&configs().join("acceptance.config")).unwrap();
    let p = Pipeline::new(cfg, Workspace::new(out.path(), false), 1).unwrap();
    passed += difficulty_quality(&p) as usize;
    let t = Instant::now();
    p.score().unwrap();
    p.bucketize().unwrap();
    let all = p.variants(&[]).unwrap();
    p.train_agents(&all).unwrap();
    p.eval(&all).unwrap();
    p.report().unwrap();
    let sweep_secs = t.elapsed().as_secs_f64();
    let reps: Vec<VariantReport> = all.iter().map(|v| p.ws.load(&format!("eval/{}", v.name), &p.keys.eval[&v.name]).unwrap().read_json("report.json").unwrap()).collect();
    println!("{}", std::fs::read_to_string(out.path().join("report/table.txt")).unwrap());
    passed += bucket_monotonicity(&reps) as usize;
    passed += curriculum_effect(&reps, sweep_secs) as usize;
    passed += per_dynamics(&p) as usize;
    passed += determinism() as usize;
    println!("{passed}/10 criteria pass ({:.0} min)", start.elapsed().as_secs_f64() / 60.0);
}
