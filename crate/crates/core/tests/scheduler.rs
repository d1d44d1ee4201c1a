use pqkv::sched::{
    simulate_decode_step, simulate_prefill, simulate_tt2t, CostModel, PipelineConfig, Resource,
    Scheduler, Timeline,
};
use pqkv::{ModelShape, PqConfig, SegmentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RESOURCES: [Resource; 3] = [Resource::Compute, Resource::Transfer, Resource::CpuPool];

/// Longest path through the event graph whose edges are declared deps and
/// lane order, with event durations as node weights.
fn longest_path(tl: &Timeline) -> f64 {
    let mut finish = vec![0.0f64; tl.events.len()];
    for (i, e) in tl.events.iter().enumerate() {
        let ready = e
            .deps
            .iter()
            .chain(e.lane_pred.iter())
            .map(|&p| finish[p])
            .fold(0.0, f64::max);
        finish[i] = ready + e.duration();
    }
    finish.into_iter().fold(0.0, f64::max)
}

fn check_lanes(tl: &Timeline, pool_width: usize) {
    for a in 0..tl.events.len() {
        let ea = &tl.events[a];
        if ea.resource == Resource::CpuPool {
            assert!(ea.lane < pool_width);
        } else {
            assert_eq!(ea.lane, 0);
        }
        for eb in &tl.events[a + 1..] {
            if ea.resource == eb.resource && ea.lane == eb.lane {
                assert!(
                    eb.start >= ea.end || ea.start >= eb.end,
                    "{} overlaps {}",
                    ea.label,
                    eb.label
                );
            }
        }
    }
}

#[test]
fn random_dags_match_longest_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let width = rng.random_range(1..5);
        let mut sched = Scheduler::new(width);
        let n = rng.random_range(1..40);
        for i in 0..n {
            let deps: Vec<usize> = (0..i).filter(|_| rng.random_bool(0.15)).collect();
            let resource = RESOURCES[rng.random_range(0..3)];
            let duration = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.0..5.0)
            };
            sched.add(resource, format!("e{i}"), duration, &deps);
        }
        let tl = sched.finish();
        check_lanes(&tl, width);
        for e in &tl.events {
            for &d in &e.deps {
                assert!(e.start >= tl.events[d].end);
            }
        }
        assert!((longest_path(&tl) - tl.end_to_end).abs() <= 1e-9 * tl.end_to_end.max(1.0));

        let path = tl.critical_path();
        let total: f64 = path.iter().map(|&i| tl.events[i].duration()).sum();
        assert!((total - tl.end_to_end).abs() <= 1e-9 * tl.end_to_end.max(1.0));
        for w in path.windows(2) {
            let (a, b) = (&tl.events[w[0]], &tl.events[w[1]]);
            assert!(b.deps.contains(&w[0]) || b.lane_pred == Some(w[0]));
            assert_eq!(a.end, b.start);
        }
    }
}

fn cfg(layers: usize, pool: Option<usize>) -> PipelineConfig {
    PipelineConfig {
        shape: ModelShape::new(layers, 8, 2, 64),
        pq: PqConfig::new(2, 6),
        seg: SegmentConfig {
            n_init: 4,
            n_local: 16,
            k: 256,
        },
        pool_width: pool,
    }
}

#[test]
fn prefill_matches_recurrence_when_pool_never_queues() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let layers = rng.random_range(1..12);
        let c = cfg(layers, Some(layers * 4));
        let model = CostModel {
            alpha1: rng.random_range(0.0..0.01),
            beta1: rng.random_range(1e-8..1e-5),
            offload_bandwidth: rng.random_range(1e7..1e10),
            ..CostModel::reference()
        };
        let s = rng.random_range(512..16384);
        let iters = rng.random_range(1..30);
        let tl = simulate_prefill(&c, s, &model, iters).unwrap();

        let compute = model.compute_time(s as f64);
        let offload = c.kv_bytes(s) / model.offload_bandwidth;
        let job = model.clustering_time(s as f64, iters as f64);
        let (mut compute_end, mut offload_end, mut last) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..layers {
            compute_end += compute;
            offload_end = offload_end.max(compute_end) + offload;
            last = last.max(offload_end + job);
        }
        let want = compute_end.max(offload_end).max(last);
        assert!(
            (tl.end_to_end - want).abs() <= 1e-12 * want,
            "{} vs {want}",
            tl.end_to_end
        );
        check_lanes(&tl, layers * 4);
    }
}

#[test]
fn prefill_makespan_grows_with_iterations_and_shrinks_with_pool() {
    let model = CostModel::reference();
    let mut prev = 0.0;
    for iters in 1..=40 {
        let t = simulate_prefill(&cfg(8, None), 8192, &model, iters)
            .unwrap()
            .end_to_end;
        assert!(t >= prev);
        prev = t;
    }
    let mut prev = f64::INFINITY;
    for pool in 1..=8 {
        let t = simulate_prefill(&cfg(8, Some(pool)), 8192, &model, 30)
            .unwrap()
            .end_to_end;
        assert!(t <= prev);
        prev = t;
    }
}

#[test]
fn decode_step_monotone_in_hit_rate() {
    let model = CostModel::reference();
    for prefetch in [true, false] {
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let t = simulate_decode_step(&cfg(16, None), 16384, &model, i as f64 / 20.0, prefetch)
                .unwrap()
                .end_to_end;
            assert!(t <= prev);
            prev = t;
        }
    }
}

#[test]
fn tt2t_covers_prefill_and_one_step() {
    let model = CostModel::reference();
    for iters in [1, 5, 30] {
        let c = cfg(8, None);
        let prefill = simulate_prefill(&c, 8192, &model, iters).unwrap();
        let step = simulate_decode_step(&c, 8192, &model, 0.0, true).unwrap();
        let tt2t = simulate_tt2t(&c, 8192, &model, iters, 0.0, true).unwrap();
        assert!(
            tt2t.end_to_end
                >= prefill.busy(Resource::Compute) + step.busy(Resource::Compute) - 1e-12
        );
        assert!(
            tt2t.end_to_end
                <= prefill.end_to_end
                    + step.end_to_end
                    + c.code_bytes(8192) / model.fetch_bandwidth
                    + 1e-12
        );
        assert!((longest_path(&tt2t) - tt2t.end_to_end).abs() <= 1e-12);
    }
}

#[test]
fn timeline_csv_layout() {
    let tl = simulate_prefill(&cfg(1, Some(1)), 1024, &CostModel::reference(), 3).unwrap();
    let mut out = Vec::new();
    tl.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("resource,label,start,end"));
    assert!(lines
        .next()
        .unwrap()
        .starts_with("compute,prefill_compute_l0,0,"));
    assert_eq!(text.lines().count(), 1 + tl.events.len());
    assert!(!text.contains('\r'));
}
