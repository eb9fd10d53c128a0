//! Independent reference implementations. Each check rebuilds a result by
//! brute force or closed form and compares it with the library.

use std::collections::{BTreeMap, BTreeSet};

use evtrack::backbone::{patchify, ModelConfig};
use evtrack::eval::metrics_from_errors;
use evtrack::event_io::{crop_region, parse_events_str, stack_events, BBox, EventPoint, EventStream, SensorSize, FRAME_CHANNELS};
use evtrack::fusion::{fuse_gate, subwindow_events, FusionPlan};
use evtrack::graph::{build_knn_graph, build_radius_graph, downsample_uniform, maxpool_features, voxel_cluster, ClusterAssignment, EventGraph, DEFAULT_VOXEL_GRID};
use evtrack::head::{decode_box, HeadMaps};
use evtrack::loss::{encode_target, focal_loss, giou_loss, kd_loss};
use evtrack::model::{Sample, Tracker, TrackerKind};
use evtrack::nn::gcn::NormAdj;
use evtrack::nn::{AdamW, AdamWConfig, AttentionBlock, GcnLayer, Init, ParamStore};
use evtrack::synthgen::{generate_sequence, SynthConfig};
use evtrack::tensor::{measure_flops, Mat};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{random_mat, rng, tiny_config};

pub type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

/// Every oracle, by name.
pub const ALL: &[(&str, Check)] = &[
    ("unsorted event file rejected", unsorted_file_rejected),
    ("frame stacking equals histogram", stacking_histogram),
    ("corner crop equals index map", corner_crop_index_map),
    ("downsample index formula", downsample_indices),
    ("knn equals all-pairs search", knn_all_pairs),
    ("knn ties go to lower index", knn_duplicate_ties),
    ("radius graph equals all-pairs search", radius_all_pairs),
    ("voxel clusters equal floor division", voxel_floor_division),
    ("maxpool equals per-cluster loop", maxpool_loop),
    ("single-token attention closed form", attention_single_token),
    ("gcn equals dense normalized adjacency", gcn_dense_path),
    ("adamw single step by hand", adamw_single_step),
    ("patch gather by index arithmetic", patch_gather),
    ("truncated slow stack equals fast", truncation_equivalence),
    ("single-node pyramid composition", pyramid_single_node),
    ("gate equals scalar loop", gate_scalar_loop),
    ("sub-window point sets nested", subwindows_nested),
    ("decode argmax equals full scan", decode_full_scan),
    ("encode then decode recovers centre", encode_decode_roundtrip),
    ("focal loss equals direct sum", focal_direct_sum),
    ("giou of disjoint unit boxes", giou_disjoint),
    ("kd loss equals mean squared difference", kd_mean_square),
    ("static box events on boundary band", synth_boundary_band),
    ("metrics on hand-built track", metrics_hand_built),
    ("flop counters equal closed forms", flop_closed_forms),
];

pub fn run_all() -> Vec<(&'static str, Result<(), String>)> {
    ALL.iter().map(|(name, f)| (*name, f())).collect()
}

// Power-of-two sensor and stream lengths keep every normalized coordinate
// exact in f64, so integer oracles see the same distances as the library.
const EXACT_SENSOR: u32 = 64;
const EXACT_T: u64 = 4096;

fn exact_stream(r: &mut impl Rng, n: usize, span: u32) -> EventStream {
    let mut points: Vec<EventPoint> = (0..n)
        .map(|_| EventPoint {
            t: r.gen_range(0..=EXACT_T),
            x: r.gen_range(0..span.min(EXACT_SENSOR)),
            y: r.gen_range(0..span.min(EXACT_SENSOR)),
            p: if r.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect();
    points.sort_by_key(|p| p.t);
    EventStream {
        points,
        duration: EXACT_T,
        sensor: SensorSize::new(EXACT_SENSOR, EXACT_SENSOR),
    }
}

/// Squared normalized distance scaled by `(W * T)^2`, exact in integers.
fn int_dist(a: &EventPoint, b: &EventPoint) -> u128 {
    let d = |u: i128, v: i128| (u - v) * (u - v);
    let (w, t) = (EXACT_SENSOR as i128, EXACT_T as i128);
    (d(a.x as i128, b.x as i128) * t * t + d(a.y as i128, b.y as i128) * t * t + d(a.t as i128, b.t as i128) * w * w) as u128
}

fn knn_oracle(s: &EventStream, k: usize) -> BTreeSet<(usize, usize)> {
    let n = s.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut all: Vec<(u128, usize)> = (0..n).filter(|&j| j != i).map(|j| (int_dist(&s.points[i], &s.points[j]), j)).collect();
        all.sort();
        for &(_, j) in all.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges
}

fn edge_set(g: &EventGraph) -> BTreeSet<(usize, usize)> {
    g.edges().into_iter().collect()
}

fn check_adjacency(g: &EventGraph) -> Result<(), String> {
    let a = g.adjacency();
    for i in 0..a.len() {
        ensure!(a[i][i] == 0, "self loop at {i}");
        for j in 0..a.len() {
            ensure!(a[i][j] == a[j][i], "asymmetric at ({i}, {j})");
        }
    }
    let ones: usize = a.iter().map(|r| r.iter().map(|&v| v as usize).sum::<usize>()).sum();
    ensure!(ones == 2 * g.num_edges(), "edge count {} vs {} adjacency ones", g.num_edges(), ones);
    Ok(())
}

pub fn unsorted_file_rejected() -> Result<(), String> {
    let mut r = rng(100);
    let mut lines: Vec<String> = (0..10_000)
        .map(|i| format!("{},{},{},{}", i * 7, r.gen_range(0..32), r.gen_range(0..32), if r.gen_bool(0.5) { 1 } else { -1 }))
        .collect();
    lines.shuffle(&mut r);
    match parse_events_str(&lines.join("\n"), SensorSize::new(32, 32), None) {
        Err(e) => {
            ensure!(e.to_string().contains("unsorted timestamps"), "wrong error: {e}");
            Ok(())
        }
        Ok(_) => Err("shuffled file accepted".into()),
    }
}

pub fn stacking_histogram() -> Result<(), String> {
    let mut r = rng(101);
    let (h, w, dt, total) = (16usize, 24usize, 10_000u64, 40_000u64);
    let mut points: Vec<EventPoint> = (0..1000)
        .map(|_| EventPoint {
            t: r.gen_range(0..=total),
            x: r.gen_range(0..w as u32),
            y: r.gen_range(0..h as u32),
            p: if r.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect();
    points.push(EventPoint { t: total, x: 0, y: 0, p: 1 });
    points.sort_by_key(|p| p.t);
    let s = EventStream {
        points,
        duration: total,
        sensor: SensorSize::new(h as u32, w as u32),
    };
    let fs = stack_events(&s, dt).map_err(|e| e.to_string())?;
    ensure!(fs.n == 4, "{} frames", fs.n);
    let mut counts = vec![[0u32; 2]; 4 * h * w];
    let mut last = vec![None::<u64>; 4 * h * w];
    for e in &s.points {
        let i = if e.t == total { 3 } else { (e.t / dt) as usize };
        let cell = (i * h + e.y as usize) * w + e.x as usize;
        counts[cell][if e.p > 0 { 0 } else { 1 }] += 1;
        last[cell] = Some(last[cell].map_or(e.t, |t: u64| t.max(e.t)));
    }
    let mut mass = 0.0;
    for i in 0..4 {
        for y in 0..h {
            for x in 0..w {
                let cell = (i * h + y) * w + x;
                for ch in 0..2 {
                    let got = fs.at(i, ch, y, x);
                    ensure!(got == counts[cell][ch] as f32, "frame {i} ch {ch} ({y},{x}): {got} vs {}", counts[cell][ch]);
                    mass += got;
                }
                let want = last[cell].map_or(0.0, |t| ((t - i as u64 * dt) as f64 / dt as f64) as f32);
                ensure!(fs.at(i, 2, y, x) == want, "timestamp surface at frame {i} ({y},{x})");
            }
        }
    }
    ensure!(mass == s.len() as f32, "mass {mass} for {} events", s.len());
    Ok(())
}

pub fn corner_crop_index_map() -> Result<(), String> {
    let mut r = rng(102);
    let (c, h, w) = (FRAME_CHANNELS, 32usize, 40usize);
    let frame: Vec<f32> = (0..c * h * w).map(|_| r.gen_range(0.0..5.0)).collect();
    // side 2 * 8 = 16 centred on (4, 4): the crop starts at (-4, -4), one
    // sensor pixel per crop pixel
    let (crop, tf) = crop_region(&frame, c, h, w, &BBox::new(0.0, 0.0, 8.0, 8.0), 2.0, 16).map_err(|e| e.to_string())?;
    ensure!(tf.scale == 1.0 && tf.origin_x == -4.0 && tf.origin_y == -4.0, "transform {tf:?}");
    for ch in 0..c {
        for v in 0..16isize {
            for u in 0..16isize {
                let (sy, sx) = (v - 4, u - 4);
                let want = if sy < 0 || sx < 0 { 0.0 } else { frame[(ch * h + sy as usize) * w + sx as usize] };
                let got = crop[(ch * 16 + v as usize) * 16 + u as usize];
                ensure!(got == want, "ch {ch} ({v},{u}): {got} vs {want}");
            }
        }
    }
    Ok(())
}

pub fn downsample_indices() -> Result<(), String> {
    let pts = |m: usize| EventStream {
        points: (0..m as u64).map(|t| EventPoint { t, x: 0, y: 0, p: 1 }).collect(),
        duration: m as u64,
        sensor: SensorSize::new(4, 4),
    };
    let ds = downsample_uniform(&pts(900), 300).map_err(|e| e.to_string())?;
    let got: Vec<u64> = ds.points.iter().map(|p| p.t).collect();
    let want: Vec<u64> = (0..300).map(|i| 3 * i).collect();
    ensure!(got == want, "900 -> 300 picked {:?}...", &got[..5]);
    let mut r = rng(103);
    for _ in 0..50 {
        let m = r.gen_range(1..3000);
        let n_max = r.gen_range(1..400);
        let ds = downsample_uniform(&pts(m), n_max).map_err(|e| e.to_string())?;
        let want: Vec<u64> = if m <= n_max {
            (0..m as u64).collect()
        } else {
            (0..n_max).map(|i| (i * m / n_max) as u64).collect()
        };
        let got: Vec<u64> = ds.points.iter().map(|p| p.t).collect();
        ensure!(got == want, "m={m} n_max={n_max}");
    }
    Ok(())
}

pub fn knn_all_pairs() -> Result<(), String> {
    let mut r = rng(104);
    let mut cases: Vec<(usize, usize)> = vec![(50, 8), (500, 8)];
    cases.extend((0..18).map(|_| (r.gen_range(2..200), r.gen_range(1..16))));
    for (seed, (n, k)) in cases.into_iter().enumerate() {
        let s = exact_stream(&mut rng(1000 + seed as u64), n, EXACT_SENSOR);
        let g = build_knn_graph(&s, k).map_err(|e| e.to_string())?;
        check_adjacency(&g)?;
        ensure!(edge_set(&g) == knn_oracle(&s, k), "n={n} k={k}: edge sets differ");
    }
    Ok(())
}

pub fn knn_duplicate_ties() -> Result<(), String> {
    for seed in 0..10 {
        // a 3x3 pixel patch at a handful of timestamps: many exact duplicates
        let mut r = rng(2000 + seed);
        let mut s = exact_stream(&mut r, 60, 3);
        for p in &mut s.points {
            p.t = (p.t / 1024) * 1024;
        }
        s.points.sort_by_key(|p| p.t);
        for k in [1, 3, 8] {
            let g = build_knn_graph(&s, k).map_err(|e| e.to_string())?;
            ensure!(edge_set(&g) == knn_oracle(&s, k), "seed {seed} k={k}");
        }
    }
    Ok(())
}

pub fn radius_all_pairs() -> Result<(), String> {
    let mut r = rng(105);
    for _ in 0..10 {
        let s = exact_stream(&mut r, 80, EXACT_SENSOR);
        let radius = r.gen_range(0.05..0.6);
        let g = build_radius_graph(&s, radius).map_err(|e| e.to_string())?;
        check_adjacency(&g)?;
        let pos: Vec<[f64; 3]> = s
            .points
            .iter()
            .map(|p| [p.x as f64 / 64.0, p.y as f64 / 64.0, p.t as f64 / EXACT_T as f64])
            .collect();
        let mut want = BTreeSet::new();
        for i in 0..pos.len() {
            for j in i + 1..pos.len() {
                let d: f64 = (0..3).map(|a| (pos[i][a] - pos[j][a]).powi(2)).sum::<f64>().sqrt();
                if d <= radius {
                    want.insert((i, j));
                }
            }
        }
        ensure!(edge_set(&g) == want, "radius {radius}");
    }
    Ok(())
}

pub fn voxel_floor_division() -> Result<(), String> {
    let grid = DEFAULT_VOXEL_GRID;
    for seed in 0..5 {
        let s = exact_stream(&mut rng(3000 + seed), 300, EXACT_SENSOR);
        let g = build_knn_graph(&s, 4).map_err(|e| e.to_string())?;
        let a = voxel_cluster(&g, grid).map_err(|e| e.to_string())?;
        let cell = |v: u64, g: usize, extent: u64| ((v * g as u64 / extent) as usize).min(g - 1);
        let keys: Vec<[usize; 3]> = s
            .points
            .iter()
            .map(|p| [cell(p.t, grid[0], EXACT_T), cell(p.y as u64, grid[1], 64), cell(p.x as u64, grid[2], 64)])
            .collect();
        let ordered: BTreeSet<[usize; 3]> = keys.iter().copied().collect();
        let id: BTreeMap<[usize; 3], usize> = ordered.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let want: Vec<usize> = keys.iter().map(|k| id[k]).collect();
        ensure!(a.cluster_of == want, "seed {seed}: assignment differs");
        ensure!(a.members.iter().map(Vec::len).sum::<usize>() == s.len(), "partition size");
        for (k, voxel) in ordered.iter().enumerate() {
            let centroid = [
                (voxel[2] as f64 + 0.5) / grid[2] as f64,
                (voxel[1] as f64 + 0.5) / grid[1] as f64,
                (voxel[0] as f64 + 0.5) / grid[0] as f64,
            ];
            let mut best = (f64::INFINITY, usize::MAX);
            for i in (0..s.len()).filter(|&i| want[i] == k) {
                let p = &g.positions[i];
                let d = (p[0] - centroid[0]).powi(2) + (p[1] - centroid[1]).powi(2) + (p[2] - centroid[2]).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            ensure!(a.centers[k] == best.1, "cluster {k}: centre {} vs {}", a.centers[k], best.1);
        }
        let adj = g.adjacency();
        let mut coarse = BTreeSet::new();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if adj[i][j] == 1 && want[i] != want[j] {
                    coarse.insert((want[i].min(want[j]), want[i].max(want[j])));
                }
            }
        }
        ensure!(a.coarse_edges == coarse.into_iter().collect::<Vec<_>>(), "seed {seed}: coarse edges differ");
    }
    Ok(())
}

pub fn maxpool_loop() -> Result<(), String> {
    let mut r = rng(106);
    for _ in 0..20 {
        let n = r.gen_range(1..60);
        let clusters = r.gen_range(1..=n.min(8));
        let mut cluster_of: Vec<usize> = (0..n).map(|i| if i < clusters { i } else { r.gen_range(0..clusters) }).collect();
        cluster_of.shuffle(&mut r);
        let members: Vec<Vec<usize>> = (0..clusters).map(|k| (0..n).filter(|&i| cluster_of[i] == k).collect()).collect();
        let a = ClusterAssignment {
            centers: members.iter().map(|m| m[0]).collect(),
            cluster_of: cluster_of.clone(),
            members,
            coarse_edges: Vec::new(),
        };
        let f = random_mat(&mut r, n, 5, 3.0);
        let (out, _) = maxpool_features(&f, &a).map_err(|e| e.to_string())?;
        for k in 0..clusters {
            for c in 0..5 {
                let want = (0..n).filter(|&i| cluster_of[i] == k).map(|i| f.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
                ensure!(out.get(k, c) == want, "cluster {k} column {c}");
            }
        }
    }
    Ok(())
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + b[i]).collect()
}

/// `x W + b` with `W` stored `[d_in, d_out]` under `name.weight`.
fn affine(ps: &ParamStore<f64>, name: &str, x: &[f64], col0: usize, d_out: usize) -> Vec<f64> {
    let w = ps.get(ps.id(&format!("{name}.weight")).unwrap());
    let b = ps.get(ps.id(&format!("{name}.bias")).unwrap());
    let stride = w.len() / x.len();
    (0..d_out)
        .map(|o| b[col0 + o] + x.iter().enumerate().map(|(i, v)| v * w[i * stride + col0 + o]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn attention_single_token() -> Result<(), String> {
    let mut r = rng(107);
    let mut ps = ParamStore::<f64>::new();
    let c = 8;
    let blk = AttentionBlock::new(&mut ps, "b", "g", c, 1, 4, &mut r).map_err(|e| e.to_string())?;
    ps.perturb(&mut r, 0.5);
    let x: Vec<f64> = (0..c).map(|_| r.gen_range(-2.0..2.0)).collect();
    let (y, cache) = blk.forward(&ps, &Mat::from_vec(1, c, x.clone()).unwrap()).map_err(|e| e.to_string())?;
    ensure!((cache.probs[0] - 1.0).abs() < 1e-15, "attention weight {}", cache.probs[0]);
    let p = |n: &str| ps.get(ps.id(n).unwrap()).to_vec();
    let h1 = layer_norm(&x, &p("b.norm1.weight"), &p("b.norm1.bias"));
    // a lone token attends only to itself: the context is its value vector
    let v = affine(&ps, "b.attn.qkv", &h1, 2 * c, c);
    let attn = affine(&ps, "b.attn.proj", &v, 0, c);
    let mid: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let h2 = layer_norm(&mid, &p("b.norm2.weight"), &p("b.norm2.bias"));
    let f1: Vec<f64> = affine(&ps, "b.mlp.fc1", &h2, 0, 4 * c).into_iter().map(gelu).collect();
    let f2 = affine(&ps, "b.mlp.fc2", &f1, 0, c);
    for i in 0..c {
        let want = mid[i] + f2[i];
        ensure!((y.data[i] - want).abs() < 1e-12, "component {i}: {} vs {want}", y.data[i]);
    }
    Ok(())
}

pub fn gcn_dense_path() -> Result<(), String> {
    let mut r = rng(108);
    let n = 5;
    let g = EventGraph::from_edges(vec![[0.0; 3]; n], vec![0.0; n], 1, (0..n - 1).map(|i| (i, i + 1)));
    let mut ps = ParamStore::<f64>::new();
    let layer = GcnLayer::new(&mut ps, "gcn", "gcn", 3, 4, true, &mut r).map_err(|e| e.to_string())?;
    ps.perturb(&mut r, 1.0);
    let h = random_mat(&mut r, n, 3, 1.0);
    let (out, _) = layer.forward(&ps, &NormAdj::from_graph(&g), &h).map_err(|e| e.to_string())?;
    let adj = g.adjacency();
    let deg: Vec<f64> = (0..n).map(|i| 1.0 + adj[i].iter().map(|&v| v as f64).sum::<f64>()).collect();
    let w = ps.get(layer.lin.weight);
    let b = ps.get(layer.lin.bias);
    for i in 0..n {
        for o in 0..4 {
            let mut s = b[o];
            for j in 0..n {
                let a_hat = adj[i][j] as f64 + if i == j { 1.0 } else { 0.0 };
                let norm = a_hat / (deg[i] * deg[j]).sqrt();
                for d in 0..3 {
                    s += norm * h.get(j, d) * w[d * 4 + o];
                }
            }
            let want = s.max(0.0);
            ensure!((out.get(i, o) - want).abs() < 1e-6, "node {i} out {o}: {} vs {want}", out.get(i, o));
        }
    }
    Ok(())
}

pub fn adamw_single_step() -> Result<(), String> {
    let mut r = rng(109);
    let mut ps = ParamStore::<f64>::new();
    let id = ps.add("w", "g", &[1], Init::Ones, &mut r).map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &ps,
    );
    let mut grads = ps.grads();
    // f(w) = w^2 / 2, so the gradient is w = 1
    grads.get_mut(id)[0] = 1.0;
    opt.step(&mut ps, &grads).map_err(|e| e.to_string())?;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let m_hat = (1.0 - b1) * 1.0 / (1.0 - b1);
    let v_hat = (1.0 - b2) * 1.0 / (1.0 - b2);
    let want = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + eps);
    ensure!((ps.get(id)[0] - want).abs() < 1e-12, "{} vs {want}", ps.get(id)[0]);
    Ok(())
}

pub fn patch_gather() -> Result<(), String> {
    let mut r = rng(110);
    let (size, p) = (32usize, 8usize);
    let img: Vec<f32> = (0..3 * size * size).map(|_| r.gen_range(-1.0..1.0)).collect();
    let m = patchify::<f64>(&img, size, p).map_err(|e| e.to_string())?;
    let g = size / p;
    ensure!(m.rows == g * g && m.cols == 3 * p * p, "shape {}x{}", m.rows, m.cols);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        let want = img[(c * size + gy * p + py) * size + gx * p + px] as f64;
                        let got = m.get(gy * g + gx, (c * p + py) * p + px);
                        ensure!(got == want, "patch ({gy},{gx}) element ({c},{py},{px})");
                    }
                }
            }
        }
    }
    Ok(())
}

fn random_sample(r: &mut impl Rng, cfg: &ModelConfig, nodes: usize) -> Sample {
    let img = |r: &mut dyn rand::RngCore, s: usize| (0..3 * s * s).map(|_| r.gen_range(0.0f32..2.0)).collect::<Vec<f32>>();
    let stream = exact_stream(r, nodes, EXACT_SENSOR);
    Sample {
        template: img(r, cfg.template_size),
        search: img(r, cfg.search_size),
        graph: Some(build_knn_graph(&stream, cfg.knn_k).unwrap()),
    }
}

/// A fast tracker built from a slow one computes exactly what the slow
/// tracker's own first blocks compute under the fast fusion plan.
pub fn truncation_equivalence() -> Result<(), String> {
    let cfg = ModelConfig {
        depth_slow: 4,
        depth_fast: 2,
        ..tiny_config()
    };
    let mut r = rng(111);
    let mut slow = Tracker::<f64>::new(TrackerKind::Slow, &cfg, 7).map_err(|e| e.to_string())?;
    slow.ps.perturb(&mut r, 0.3);
    let fast = Tracker::fast_from_slow(&slow, 8).map_err(|e| e.to_string())?;
    let sample = random_sample(&mut r, &cfg, 20);
    let (fwd, _) = fast.forward(&sample).map_err(|e| e.to_string())?;

    let vecs = slow.graph_vectors(sample.graph.as_ref()).map_err(|e| e.to_string())?;
    let (state, _) = slow.backbone.embed_tokens(&slow.ps, &sample.template, &sample.search).map_err(|e| e.to_string())?;
    let (out, _) = slow
        .backbone
        .run_backbone(&slow.ps, state, cfg.depth_fast, &FusionPlan::fast(cfg.depth_fast), &vecs)
        .map_err(|e| e.to_string())?;
    ensure!(out.search_tokens() == fwd.features, "features differ by {:e}", out.search_tokens().max_abs_diff(&fwd.features));
    let (maps, _) = slow.head.forward(&slow.ps, &out.search_tokens()).map_err(|e| e.to_string())?;
    ensure!(maps == fwd.maps, "head maps differ");
    Ok(())
}

pub fn pyramid_single_node() -> Result<(), String> {
    let mut r = rng(112);
    let mut t = Tracker::<f64>::new(TrackerKind::Slow, &tiny_config(), 3).map_err(|e| e.to_string())?;
    t.ps.perturb(&mut r, 0.5);
    for polarity in [1.0, -1.0] {
        let g = EventGraph::from_edges(vec![[0.3, 0.6, 0.2]], vec![polarity], 1, []);
        let vecs = t.graph_vectors(Some(&g)).map_err(|e| e.to_string())?;
        let [d0, d1, d2] = t.cfg.gcn_dims;
        let c = t.cfg.embed_dim;
        // one node: the normalized adjacency is [1] and every pool is the identity
        let g1: Vec<f64> = affine(&t.ps, "graph.gcn1", &vec![polarity; d0], 0, d1).into_iter().map(|v| v.max(0.0)).collect();
        let g2: Vec<f64> = affine(&t.ps, "graph.gcn2", &g1, 0, d2).into_iter().map(|v| v.max(0.0)).collect();
        let want = [
            affine(&t.ps, "graph.proj1", &g1, 0, c),
            affine(&t.ps, "graph.proj2", &g2, 0, c),
            affine(&t.ps, "graph.lin3", &g2, 0, c),
        ];
        for (lvl, w) in want.iter().enumerate() {
            let got = vecs[lvl].as_ref().ok_or(format!("level {} missing", lvl + 1))?;
            let err = got.iter().zip(w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure!(err < 1e-12, "polarity {polarity} level {}: {err:e}", lvl + 1);
        }
    }
    Ok(())
}

pub fn gate_scalar_loop() -> Result<(), String> {
    let mut r = rng(113);
    for _ in 0..20 {
        let (n, c) = (r.gen_range(1..20), r.gen_range(1..12));
        let fv = random_mat(&mut r, n, c, 3.0);
        let g: Vec<f64> = (0..c).map(|_| r.gen_range(-2.0..2.0)).collect();
        let out = fuse_gate(&fv, &g).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..c {
                let f = fv.get(i, j);
                ensure!(out.get(i, j) == f * g[j] + f, "({i},{j})");
            }
        }
    }
    Ok(())
}

pub fn subwindows_nested() -> Result<(), String> {
    let mut r = rng(114);
    for _ in 0..30 {
        let n = r.gen_range(0..200);
        let s = exact_stream(&mut r, n, EXACT_SENSOR);
        let k = r.gen_range(1..6);
        let mut prev: Vec<EventPoint> = Vec::new();
        for j in 1..=k {
            let sub = subwindow_events(&s, j, k).map_err(|e| e.to_string())?;
            ensure!(sub.points.starts_with(&prev), "sub-window {j} of {k} drops earlier points");
            let cut = EXACT_T as f64 * j as f64 / k as f64;
            ensure!(
                j == k || sub.points.iter().all(|p| (p.t as f64) < cut),
                "sub-window {j} of {k} holds late points"
            );
            prev = sub.points;
        }
        ensure!(prev == s.points, "last sub-window is not the whole window");
    }
    Ok(())
}

fn random_maps(r: &mut impl Rng, size: usize, levels: u32) -> HeadMaps<f64> {
    let cells = size * size;
    HeadMaps {
        h: size,
        w: size,
        // few distinct levels so ties actually occur
        score: Mat::from_fn(cells, 1, |_, _| r.gen_range(0..levels) as f64 / levels as f64),
        offset: Mat::from_fn(cells, 2, |_, _| r.gen_range(0.0..1.0)),
        size: Mat::from_fn(cells, 2, |_, _| r.gen_range(0.05..0.5)),
    }
}

pub fn decode_full_scan() -> Result<(), String> {
    let mut r = rng(115);
    for trial in 0..50 {
        let maps = random_maps(&mut r, 8, if trial % 2 == 0 { 5 } else { 1000 });
        let d = decode_box(&maps);
        let mut best = (0, 0);
        for row in 0..8 {
            for col in 0..8 {
                if maps.score_at(row, col) > maps.score_at(best.0, best.1) {
                    best = (row, col);
                }
            }
        }
        ensure!(d.cell == best, "trial {trial}: {:?} vs {best:?}", d.cell);
        let (ox, oy) = maps.offset_at(best.0, best.1);
        let (w, h) = maps.size_at(best.0, best.1);
        let (cx, cy) = ((best.1 as f64 + ox) / 8.0, (best.0 as f64 + oy) / 8.0);
        let want = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h);
        ensure!(d.bbox == want, "trial {trial}: box {:?} vs {want:?}", d.bbox);
    }
    Ok(())
}

pub fn encode_decode_roundtrip() -> Result<(), String> {
    let mut r = rng(116);
    let size = 16;
    for _ in 0..100 {
        let gt = BBox::from_center(r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.05..0.6), r.gen_range(0.05..0.6));
        let t = encode_target(&gt, size);
        let cells = size * size;
        let maps = HeadMaps {
            h: size,
            w: size,
            score: Mat::from_vec(cells, 1, t.heatmap.clone()).unwrap(),
            offset: Mat::from_fn(cells, 2, |_, c| if c == 0 { t.offset.0 } else { t.offset.1 }),
            size: Mat::from_fn(cells, 2, |_, c| if c == 0 { t.wh.0 } else { t.wh.1 }),
        };
        let d = decode_box(&maps);
        let ((px, py), (gx, gy)) = (d.bbox.center(), gt.center());
        let tol = 1.0 / (2.0 * size as f64);
        ensure!((px - gx).abs() < tol && (py - gy).abs() < tol, "{gt:?} decoded as {:?}", d.bbox);
        ensure!((d.bbox.w - gt.w).abs() < 1e-12 && (d.bbox.h - gt.h).abs() < 1e-12, "size of {gt:?}");
    }
    Ok(())
}

pub fn focal_direct_sum() -> Result<(), String> {
    let mut r = rng(117);
    for _ in 0..20 {
        let n = 64;
        let mut y: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..0.99)).collect();
        for _ in 0..r.gen_range(1..4) {
            y[r.gen_range(0..n)] = 1.0;
        }
        let p = vec![0.5; n];
        let (got, _) = focal_loss(&p, &y);
        let positives = y.iter().filter(|&&v| v == 1.0).count() as f64;
        let mut sum = 0.0;
        for &yi in &y {
            sum += if yi == 1.0 {
                -(0.5f64 * 0.5) * 0.5f64.ln()
            } else {
                -(1.0 - yi).powi(4) * 0.25 * 0.5f64.ln()
            };
        }
        let want = sum / positives;
        ensure!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    Ok(())
}

pub fn giou_disjoint() -> Result<(), String> {
    let (l, _) = giou_loss(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]);
    // IoU 0, hull 9, union 2: GIoU = -7/9
    ensure!((l - 16.0 / 9.0).abs() < 1e-12, "loss {l}");
    Ok(())
}

pub fn kd_mean_square() -> Result<(), String> {
    let mut r = rng(118);
    for _ in 0..10 {
        let (n, c) = (r.gen_range(1..30), r.gen_range(1..10));
        let a = random_mat(&mut r, n, c, 2.0);
        let b = random_mat(&mut r, n, c, 2.0);
        let (got, _) = kd_loss(&a, &b).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..c {
                sum += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        let want = sum / (n * c) as f64;
        ensure!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    Ok(())
}

pub fn synth_boundary_band() -> Result<(), String> {
    let mut r = rng(119);
    for seed in 0..10 {
        let start = BBox::new(r.gen_range(2.0..30.0), r.gen_range(2.0..30.0), r.gen_range(4.0..20.0), r.gen_range(4.0..20.0));
        let cfg = SynthConfig {
            sensor: SensorSize::new(64, 64),
            duration: 50_000,
            delta_t: 10_000,
            start,
            velocity: (0.0, 0.0),
            wobble: None,
            lambda_edge: 3.0,
            lambda_bg: 0.0,
            seed,
        };
        let rec = generate_sequence(&cfg).map_err(|e| e.to_string())?;
        ensure!(!rec.stream.is_empty(), "no events");
        let (x0, y0, x1, y1) = (start.x, start.y, start.x + start.w, start.y + start.h);
        for e in &rec.stream.points {
            // pixel centre within one pixel of the box outline
            let (cx, cy) = (e.x as f64 + 0.5, e.y as f64 + 0.5);
            let inside_outer = cx >= x0 - 1.0 && cx <= x1 + 1.0 && cy >= y0 - 1.0 && cy <= y1 + 1.0;
            let inside_inner = cx > x0 + 1.0 && cx < x1 - 1.0 && cy > y0 + 1.0 && cy < y1 - 1.0;
            ensure!(inside_outer && !inside_inner, "event ({}, {}) off the outline of {start:?}", e.x, e.y);
        }
    }
    Ok(())
}

pub fn metrics_hand_built() -> Result<(), String> {
    let ious = [1.0, 0.6, 0.4, 0.0, 0.8];
    let ce = [0.0, 10.0, 25.0, 100.0, 5.0];
    let ne = [0.0, 0.1, 0.3, 1.0, 0.05];
    let m = metrics_from_errors(&ious, &ce, &ne).map_err(|e| e.to_string())?;
    // thresholds i/20: four boxes pass for i <= 8, three for 9..=12, two for
    // 13..=16 and one above: (9*4 + 4*3 + 4*2 + 4*1) / 5 = 12 of 21
    let sr = 100.0 * 12.0 / 21.0;
    // thresholds i/100: 51 + 46 + 41 + 21 passes out of 5 * 51
    let npr = 100.0 * 159.0 / 255.0;
    ensure!((m.sr - sr).abs() < 1e-9, "SR {} vs {sr}", m.sr);
    ensure!((m.pr - 60.0).abs() < 1e-9, "PR {}", m.pr);
    ensure!((m.npr - npr).abs() < 1e-9, "NPR {} vs {npr}", m.npr);
    Ok(())
}

pub fn flop_closed_forms() -> Result<(), String> {
    let cfg = ModelConfig::desk();
    let mut r = rng(120);
    for kind in [TrackerKind::Slow, TrackerKind::Fast] {
        let model = Tracker::<f32>::new(kind, &cfg, 1).map_err(|e| e.to_string())?;
        let stream = exact_stream(&mut r, 250, EXACT_SENSOR);
        let mut sample = random_sample(&mut r, &cfg, 1);
        let (graph, build) = measure_flops(|| build_knn_graph(&stream, cfg.knn_k).unwrap());
        let (n, nnz) = (graph.num_nodes(), graph.nnz_with_self_loops());
        sample.graph = Some(graph);
        let (res, fwd) = measure_flops(|| model.forward(&sample).map(|_| ()));
        res.map_err(|e| e.to_string())?;
        let total = build + fwd;
        ensure!(total == model.forward_flops(n, nnz), "{kind}: counted {total}, closed form {}", model.forward_flops(n, nnz));

        if kind == TrackerKind::Fast {
            let vecs = model.zero_vectors();
            let cached = model.encode_visual(&sample.template, &sample.search, &vecs).map_err(|e| e.to_string())?;
            let (res, inc) = measure_flops(|| model.accumulation_step(&cached, &stream, 1, 1, None));
            res.map_err(|e| e.to_string())?;
            ensure!(inc == model.incremental_flops(n, nnz), "incremental: counted {inc}, closed form {}", model.incremental_flops(n, nnz));
        }
    }
    Ok(())
}
