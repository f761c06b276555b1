use hardcase::embedding::*;
use hardcase::geometry::Vec2;
use hardcase::seeding::{stream_rng, Stream};
use hardcase::world::*;

fn segment(seed: u64, density: u32) -> RunSegment {
    let knobs = DifficultyKnobs { agent_density: density, ..DifficultyKnobs::default() };
    expert_rollout(&generate_scenario(seed, &knobs).unwrap())
}

fn lit(v: &[f32]) -> usize {
    v.iter().filter(|&&x| x > 0.0).count()
}

/// Rotates the whole scene by `angle` about the world origin, then shifts it.
fn rigid(seg: &RunSegment, angle: f64, shift: Vec2) -> RunSegment {
    let mv = |x: f64, y: f64| Vec2::new(x, y).rotate(angle) + shift;
    let mut out = seg.clone();
    let road = &mut out.scenario.road;
    road.origin = road.origin.rotate(angle) + shift;
    road.heading += angle;
    for a in &mut out.scenario.agents {
        for p in &mut a.poses {
            let q = mv(p.x, p.y);
            (p.x, p.y, p.heading) = (q.x, q.y, p.heading + angle);
        }
    }
    for s in &mut out.ego_track {
        let q = mv(s.x, s.y);
        (s.x, s.y, s.heading) = (q.x, q.y, s.heading + angle);
    }
    out
}

#[test]
fn parked_ego_lights_one_cell() {
    let mut seg = segment(3, 0);
    let start = seg.ego_track[0];
    seg.ego_track.iter_mut().for_each(|s| *s = EgoState { speed: 0.0, ..start });
    assert_eq!(lit(&rasterize_views(&seg).ego), 1);
}

#[test]
fn rasters_ignore_the_global_frame() {
    for seed in 0..20 {
        let seg = segment(seed, 6);
        let base = rasterize_views(&seg);
        assert_eq!(rasterize_views(&rigid(&seg, 0.0, Vec2::new(100.0, 100.0))), base);
        assert_eq!(rasterize_views(&rigid(&seg, 0.7, Vec2::new(-40.0, 12.0))), base, "seed {seed}");
    }
}

#[test]
fn straight_drive_traces_a_line() {
    let mut seg = segment(5, 0);
    let start = seg.ego_track[0];
    let (c, s) = (start.heading.cos(), start.heading.sin());
    for (t, st) in seg.ego_track.iter_mut().enumerate() {
        let d = 5.0 * DT * t as f64 + 0.01;
        *st = EgoState { x: start.x + d * c, y: start.y + d * s, heading: start.heading, speed: 5.0 };
    }
    let length = 5.0 * DT * (FRAMES - 1) as f64;
    assert!((length - 50.0).abs() < 0.6);
    let n = lit(&rasterize_views(&seg).ego);
    assert!((19..=21).contains(&n), "{n} cells");
}

#[test]
fn pair_batches_are_balanced() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let pairs = make_pairs(2, &mut rng).unwrap();
    assert_eq!(pairs.iter().filter(|p| p.label).count(), 2);
    assert_eq!(pairs.iter().filter(|p| !p.label).count(), 2);
    assert!(pairs.iter().filter(|p| !p.label).all(|p| p.env != p.ego));
    assert!(make_pairs(1, &mut rng).is_err());
}

fn config() -> EmbeddingConfig {
    EmbeddingConfig { epochs: 150, hidden: vec![128, 128], learning_rate: 3e-3, ..Default::default() }
}

/// Empty roads against dense traffic. Other knobs vary and every road bends,
/// so segments within a cluster still differ.
fn clusters() -> (Vec<SegmentViews>, Vec<bool>) {
    let dist = KnobDistribution { straight_fraction: 0.0, ..Default::default() };
    let mut views = Vec::new();
    let mut dense = Vec::new();
    for seed in 0..1000u64 {
        let d = seed % 2 == 1;
        let mut knobs = dist.sample(&mut stream_rng(Stream::Knobs, &[seed]));
        knobs.agent_density = if d { 10 } else { 0 };
        views.push(rasterize_views(&expert_rollout(&generate_scenario(seed + 700, &knobs).unwrap())));
        dense.push(d);
    }
    (views, dense)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn two_clusters_are_told_apart() {
    let (views, dense) = clusters();
    let (model, report) = train_embedding(&views, &config()).unwrap();
    assert!(report.holdout_accuracy > 0.9, "{report:?}");
    assert!(report.warning.is_none());

    let emb = model.embed_corpus(&views, 1).unwrap();
    for e in &emb {
        assert!((cos(e, e) - 1.0).abs() < 1e-9);
    }
    assert_eq!(model.embed(&views[3]).unwrap(), emb[3]);
    let dense_idx: Vec<usize> = (0..200).filter(|&i| dense[i]).collect();
    let empty_idx: Vec<usize> = (0..200).filter(|&i| !dense[i]).collect();
    let mean = |a: &[usize], b: &[usize]| {
        let mut s = 0.0;
        let mut n = 0.0;
        for &i in a {
            for &j in b {
                if i != j {
                    s += cos(&emb[i], &emb[j]);
                    n += 1.0;
                }
            }
        }
        s / n
    };
    assert!(mean(&dense_idx, &dense_idx) > mean(&dense_idx, &empty_idx));
}

#[test]
fn identical_segments_cannot_be_paired() {
    let v = rasterize_views(&segment(1, 5));
    let views = vec![v; 1000];
    let (_, report) = train_embedding(&views, &EmbeddingConfig { epochs: 1, ..Default::default() }).unwrap();
    assert_eq!(report.holdout_accuracy, 0.5);
    assert!(report.warning.is_some());
}

#[test]
fn shuffled_labels_leave_nothing_to_learn() {
    let (views, _) = clusters();
    let cfg = EmbeddingConfig { shuffle_labels: true, holdout_fraction: 0.5, epochs: 20, ..config() };
    let (_, report) = train_embedding(&views, &cfg).unwrap();
    assert!((report.holdout_accuracy - 0.5).abs() < 0.05, "{report:?}");
}

#[test]
fn training_is_reproducible() {
    let views: Vec<SegmentViews> = (0..1000).map(|s| rasterize_views(&segment(s, (s % 7) as u32))).collect();
    let cfg = EmbeddingConfig { epochs: 1, ..Default::default() };
    let (a, _) = train_embedding(&views, &cfg).unwrap();
    let (b, _) = train_embedding(&views, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert!(train_embedding(&views[..999], &cfg).is_err());
}
