#![allow(dead_code)]

pub mod oracles;

use evtrack::backbone::ModelConfig;
use evtrack::event_io::{BBox, EventPoint, EventStream, SensorSize};
use evtrack::graph::{build_knn_graph, EventGraph};
use evtrack::head::{CenterHead, MapGrads};
use evtrack::loss::{focal_loss, giou_loss, kd_loss, l1_loss, LossWeights};
use evtrack::model::{Sample, Tracker, TrackerKind};
use evtrack::nn::gcn::NormAdj;
use evtrack::nn::gradcheck::{grad_check, rel_err, FD_STEP};
use evtrack::nn::{AttentionBlock, GcnLayer, Grads, ParamStore};
use evtrack::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Worst relative error between `analytic` and central differences of `f`.
pub fn fd_vector(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut x = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x);
        x[i] = orig - FD_STEP;
        let down = f(&x);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn random_stream(rng: &mut ChaCha8Rng, n: usize, sensor: SensorSize, duration: u64) -> EventStream {
    let mut pts: Vec<EventPoint> = (0..n)
        .map(|_| EventPoint {
            t: rng.gen_range(0..=duration),
            x: rng.gen_range(0..sensor.width),
            y: rng.gen_range(0..sensor.height),
            p: if rng.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect();
    pts.sort_by_key(|p| p.t);
    EventStream {
        points: pts,
        duration,
        sensor,
    }
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, k: usize) -> EventGraph {
    let s = random_stream(rng, n, SensorSize::new(64, 64), 10_000);
    build_knn_graph(&s, k).unwrap()
}

/// Attention block on `n` tokens, parameters and input.
pub fn grad_attention(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut ps = ParamStore::<f64>::new();
    let blk = AttentionBlock::new(&mut ps, "blk", "backbone", 8, 2, 4, &mut r).unwrap();
    ps.perturb(&mut r, 0.3);
    let x = random_mat(&mut r, n, 8, 1.0);
    let w = random_mat(&mut r, n, 8, 1.0);
    let loss = |ps: &ParamStore<f64>, x: &Mat<f64>| {
        let (y, _) = blk.forward(ps, x).unwrap();
        y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = blk.forward(&ps, &x).unwrap();
    let mut g = ps.grads();
    let dx = blk.backward(&ps, &cache, &w, &mut g);
    let rep = grad_check(&mut ps, &g, |p| loss(p, &x), GRAD_TOL, 48);
    let ein = fd_vector(
        |v| loss(&ps, &Mat::from_vec(n, 8, v.to_vec()).unwrap()),
        &x.data,
        &dx.data,
    );
    rep.max_rel_err().max(ein)
}

/// GCN layer on a random graph of `n` nodes: W, b and node features.
pub fn grad_gcn(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let graph = random_graph(&mut r, n, 3);
    let adj = NormAdj::<f64>::from_graph(&graph);
    let mut ps = ParamStore::<f64>::new();
    let layer = GcnLayer::new(&mut ps, "gcn", "gcn", 3, 5, true, &mut r).unwrap();
    ps.perturb(&mut r, 0.5);
    let h = random_mat(&mut r, n, 3, 1.0);
    let w = random_mat(&mut r, n, 5, 1.0);
    let loss = |ps: &ParamStore<f64>, h: &Mat<f64>| {
        let (y, _) = layer.forward(ps, &adj, h).unwrap();
        y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = layer.forward(&ps, &adj, &h).unwrap();
    let mut g = ps.grads();
    let dh = layer.backward(&ps, &adj, &cache, &w, &mut g);
    let rep = grad_check(&mut ps, &g, |p| loss(p, &h), GRAD_TOL, 64);
    let ein = fd_vector(
        |v| loss(&ps, &Mat::from_vec(n, 3, v.to_vec()).unwrap()),
        &h.data,
        &dh.data,
    );
    rep.max_rel_err().max(ein)
}

/// All three head branches and the token input.
pub fn grad_head(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut ps = ParamStore::<f64>::new();
    let head = CenterHead::new(&mut ps, 8, 4, &mut r).unwrap();
    ps.perturb(&mut r, 0.2);
    let x = random_mat(&mut r, 16, 8, 1.0);
    let ws = random_mat(&mut r, 16, 1, 1.0);
    let wo = random_mat(&mut r, 16, 2, 1.0);
    let wz = random_mat(&mut r, 16, 2, 1.0);
    let dot = |a: &Mat<f64>, b: &Mat<f64>| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
    let loss = |ps: &ParamStore<f64>, x: &Mat<f64>| {
        let (m, _) = head.forward(ps, x).unwrap();
        dot(&m.score, &ws) + dot(&m.offset, &wo) + dot(&m.size, &wz)
    };
    let (_, cache) = head.forward(&ps, &x).unwrap();
    let mut g = ps.grads();
    let dm = MapGrads {
        score: ws.clone(),
        offset: wo.clone(),
        size: wz.clone(),
    };
    let dx = head.backward(&ps, &cache, &dm, &mut g);
    let rep = grad_check(&mut ps, &g, |p| loss(p, &x), GRAD_TOL, 48);
    let ein = fd_vector(
        |v| loss(&ps, &Mat::from_vec(16, 8, v.to_vec()).unwrap()),
        &x.data,
        &dx.data,
    );
    rep.max_rel_err().max(ein)
}

pub fn grad_focal(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 16;
    let mut hm: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..0.9)).collect();
    hm[r.gen_range(0..n)] = 1.0;
    let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
    let (_, g) = focal_loss(&p, &hm);
    fd_vector(|v| focal_loss(v, &hm).0, &p, &g)
}

fn random_corners(r: &mut ChaCha8Rng) -> [f64; 4] {
    let (x, y) = (r.gen_range(0.0..0.6), r.gen_range(0.0..0.6));
    [x, y, x + r.gen_range(0.1..0.4), y + r.gen_range(0.1..0.4)]
}

pub fn grad_l1(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (p, g) = (random_corners(&mut r), random_corners(&mut r));
    let (_, d) = l1_loss(&p, &g);
    fd_vector(|v| l1_loss(&[v[0], v[1], v[2], v[3]], &g).0, &p, &d)
}

pub fn grad_giou(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (p, g) = (random_corners(&mut r), random_corners(&mut r));
    let (_, d) = giou_loss(&p, &g);
    fd_vector(|v| giou_loss(&[v[0], v[1], v[2], v[3]], &g).0, &p, &d)
}

/// Student-side gradient; the teacher receives none by construction.
pub fn grad_kd(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_mat(&mut r, 6, 5, 1.0);
    let b = random_mat(&mut r, 6, 5, 1.0);
    let (_, g) = kd_loss(&a, &b).unwrap();
    fd_vector(
        |v| kd_loss(&Mat::from_vec(6, 5, v.to_vec()).unwrap(), &b).unwrap().0,
        &a.data,
        &g.data,
    )
}

/// 8-token trackers: template 8x8 and search 8x8 with 4x4 patches.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        patch_size: 4,
        template_size: 8,
        search_size: 8,
        depth_slow: 2,
        depth_fast: 1,
        heads: 2,
        ..ModelConfig::desk()
    }
}

pub fn tiny_sample(r: &mut ChaCha8Rng, nodes: usize) -> Sample {
    let img = |r: &mut ChaCha8Rng| (0..3 * 64).map(|_| r.gen_range(0.0f32..2.0)).collect::<Vec<f32>>();
    Sample {
        template: img(r),
        search: img(r),
        graph: Some(random_graph(r, nodes, 1)),
    }
}

/// Whole tracker forward plus weighted loss, every parameter.
pub fn grad_tracker(seed: u64, kind: TrackerKind, nodes: usize) -> f64 {
    let mut r = rng(seed);
    let mut t = Tracker::<f64>::new(kind, &tiny_config(), seed).unwrap();
    t.ps.perturb(&mut r, 0.2);
    let sample = tiny_sample(&mut r, nodes);
    let gt = BBox::from_center(0.4, 0.6, 0.3, 0.25);
    let teacher = (kind == TrackerKind::Fast).then(|| random_mat(&mut r, 4, 8, 1.0));
    let weights = LossWeights::default();
    let mut g: Grads<f64> = t.ps.grads();
    t.loss_and_grad(&sample, &gt, teacher.as_ref(), weights, &mut g).unwrap();
    let dead: Vec<&str> = t
        .ps
        .iter()
        .filter(|(id, _)| g.is_all_zero(*id))
        .map(|(_, p)| p.name.as_str())
        .collect();
    // two nodes of opposite polarity aggregate to exactly zero
    assert!(nodes <= 2 || dead.is_empty(), "parameters without gradient: {dead:?}");
    let mut ps = t.ps.clone();
    let probe = t.clone();
    let rep = grad_check(
        &mut ps,
        &g,
        |p| {
            let mut m = probe.clone();
            m.ps = p.clone();
            m.loss(&sample, &gt, teacher.as_ref(), weights).unwrap().total
        },
        GRAD_TOL,
        24,
    );
    if !rep.passed() {
        eprintln!("{rep}");
    }
    rep.max_rel_err()
}
