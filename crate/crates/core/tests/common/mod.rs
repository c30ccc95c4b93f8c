//! Finite-difference and brute-force oracles shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use meshrecon::decoder::{graph_conv, TemplateMode};
use meshrecon::deformer::DeformerConfig;
use meshrecon::losses::{chamfer, chamfer_matches, edge_loss, laplacian_loss, mesh_loss, normal_loss, seg_cross_entropy, GtSurface, LossWeights, MeshTopology};
use meshrecon::mesh::{build_template_bundle, icosphere, FactorLadder, TriMesh, Vec3};
use meshrecon::pipeline::{Model, ModelConfig, RunConfig};
use meshrecon::tensor::{batchnorm, conv3d, conv3d_transpose, linear, sparse_matmul, BatchNormState, NormMode, SparseMatrix, Tensor};
use meshrecon::vol2pc::trilinear_sample;
use meshrecon::volume::{LabelGrid, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;
pub const FD_RTOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-6;
/// Entries probed per input tensor.
const FD_PROBES: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

pub fn param(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(shape, rand_vec(r, n, scale)).unwrap()
}

pub fn constant(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(r, n, scale)).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Largest relative disagreement between reverse-mode gradients and
/// central differences of `⟨f(inputs), r⟩` for a fixed random `r`. Up to
/// [`FD_PROBES`] entries of every differentiable input are probed.
pub fn gradcheck(seed: u64, inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    let mut r = rng(seed);
    let out = f(inputs);
    let weights = Tensor::new(out.shape(), rand_vec(&mut r, out.numel(), 1.0)).unwrap();
    let scalar = |xs: &[Tensor<f64>]| f(xs).mul(&weights).unwrap().sum();
    inputs.iter().for_each(Tensor::zero_grad);
    let loss = scalar(inputs);
    loss.backward().unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        if !x.requires_grad() {
            continue;
        }
        let grad = x.grad_vec().unwrap_or_else(|| vec![0.0; x.numel()]);
        let n = x.numel();
        let probes: Vec<usize> = if n <= FD_PROBES { (0..n).collect() } else { (0..FD_PROBES).map(|_| r.gen_range(0..n)).collect() };
        for i in probes {
            let eval = |delta: f64| {
                let mut data = x.to_vec();
                data[i] += delta;
                let mut xs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
                xs[k] = Tensor::new(x.shape(), data).unwrap();
                scalar(&xs).item()
            };
            let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    worst
}

fn sphere_points(r: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| loop {
            let v: Vec3 = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if l > 0.1 && l <= 1.0 {
                break [v[0] / l * radius, v[1] / l * radius, v[2] / l * radius];
            }
        })
        .collect()
}

/// Icosphere with jittered vertices, as a differentiable `[V, 3]` tensor.
pub fn jittered(mesh: &TriMesh, r: &mut ChaCha8Rng, amount: f64) -> Tensor<f64> {
    let data = mesh.flat_vertices().into_iter().map(|v| v + r.gen_range(-amount..amount)).collect();
    Tensor::parameter(&[mesh.num_vertices(), 3], data).unwrap()
}

fn gt_sphere(r: &mut ChaCha8Rng, n: usize, radius: f64) -> GtSurface {
    let pts = sphere_points(r, n, radius);
    let normals = pts.iter().map(|p| [p[0] / radius, p[1] / radius, p[2] / radius]).collect();
    GtSurface::new(pts, normals).unwrap()
}

/// Tiny f64 model whose zero-initialized output layers are randomized so
/// every parameter group receives a gradient.
pub fn tiny_model(mode: TemplateMode, seed: u64) -> (Model<f64>, Volume) {
    let cfg = RunConfig {
        mode,
        seed,
        model: ModelConfig {
            channels: [2, 2, 3, 3, 4],
            decoder: meshrecon::decoder::DecoderConfig { hidden: 8, latent: 6, gcn_channels: [4, 4, 4] },
            deformer: DeformerConfig { hidden: 6, ..DeformerConfig::default() },
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let base = icosphere(2);
    let bundle = build_template_bundle(&base, FactorLadder::for_vertex_count(base.num_vertices())).unwrap();
    let mut m = Model::<f64>::new(cfg, bundle, Some(base.translated([0.02, 0.0, 0.0])), [16; 3], 1).unwrap();
    let mut r = rng(seed + 1);
    for name in m.params.names() {
        if name.ends_with("proj.w") || name == "decoder.gcn3.w" {
            let n = m.params.get(&name).unwrap().numel();
            m.params.set_data(&name, rand_vec(&mut r, n, 0.05)).unwrap();
        }
    }
    let vol = Volume::from_fn([16; 3], |d, h, w| {
        let p = [d as f64 / 7.5 - 1.0, h as f64 / 7.5 - 1.0, w as f64 / 7.5 - 1.0];
        let rr = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        (1.0 / (1.0 + ((rr - 0.6) * 8.0).exp())) as f32
    })
    .unwrap();
    (m, vol)
}

/// Gradient check of the full forward pass plus staged mesh loss with
/// respect to a sample of entries in every parameter group.
pub fn composite_gradcheck(seed: u64) -> f64 {
    let (mut model, vol) = tiny_model(TemplateMode::Ta, seed);
    let mut r = rng(seed + 2);
    let gt = gt_sphere(&mut r, 400, 0.5);
    let topo = MeshTopology::new(model.baseline()).unwrap();
    let w = LossWeights::default();
    let eval = |m: &mut Model<f64>| {
        m.params.zero_grad();
        let pred = m.forward(&vol, NormMode::Train).unwrap();
        mesh_loss(&pred.trace.stages, &topo, &gt, &w).unwrap().total
    };
    let loss = eval(&mut model);
    loss.backward().unwrap();
    let names = [
        "unet.stem.conv.w",
        "unet.down4.conv.w",
        "unet.up4.conv.w",
        "decoder.fc0.w",
        "decoder.gcn1.w",
        "decoder.gcn3.w",
        "deformer.b0.gcn0.w",
        "deformer.b2.bn1.gamma",
        "deformer.b3.proj.w",
    ];
    let mut grads = Vec::new();
    for n in names {
        let p = model.params.get(n).unwrap();
        grads.push((n, p.grad_vec().unwrap_or_else(|| vec![0.0; p.numel()]), p.to_vec()));
    }
    let mut worst = 0.0f64;
    for (name, grad, orig) in grads {
        for _ in 0..4 {
            let i = r.gen_range(0..orig.len());
            let mut at = |delta: f64| {
                let mut d = orig.clone();
                d[i] += delta;
                model.params.set_data(name, d).unwrap();
                eval(&mut model).item()
            };
            let numeric = (at(FD_EPS) - at(-FD_EPS)) / (2.0 * FD_EPS);
            model.params.set_data(name, orig.clone()).unwrap();
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    worst
}

fn random_sparse(r: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseMatrix {
    let mut e = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if r.gen::<f64>() < density {
                e.push((i, j, r.gen_range(-1.0..1.0)));
            }
        }
    }
    SparseMatrix::from_triplets(rows, cols, e).unwrap()
}

/// `(op, max relative error)` for every differentiable op.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(11);

    let x = param(&mut r, &[1, 2, 5, 4, 6], 1.0);
    let w = param(&mut r, &[3, 2, 3, 3, 3], 0.5);
    let b = param(&mut r, &[3], 0.5);
    out.push(("conv3d", gradcheck(1, &[x, w, b], |t| conv3d(&t[0], &t[1], Some(&t[2]), 2, 1).unwrap())));

    let x = param(&mut r, &[1, 3, 2, 3, 2], 1.0);
    let w = param(&mut r, &[3, 2, 3, 3, 3], 0.5);
    let b = param(&mut r, &[2], 0.5);
    out.push((
        "conv3d_transpose",
        gradcheck(2, &[x, w, b], |t| conv3d_transpose(&t[0], &t[1], Some(&t[2]), 2, 1, 1).unwrap()),
    ));

    let x = param(&mut r, &[2, 3, 2, 2, 3], 1.0);
    let g = param(&mut r, &[3], 1.0);
    let be = param(&mut r, &[3], 1.0);
    out.push((
        "batchnorm",
        gradcheck(3, &[x, g, be], |t| {
            let mut st = BatchNormState::new(3);
            batchnorm(&t[0], &t[1], &t[2], &mut st, NormMode::Train).unwrap()
        }),
    ));

    let x = param(&mut r, &[4, 5], 1.0);
    let w = param(&mut r, &[3, 5], 1.0);
    let b = param(&mut r, &[3], 1.0);
    out.push(("linear", gradcheck(4, &[x, w, b], |t| linear(&t[0], &t[1], Some(&t[2])).unwrap())));

    let m = random_sparse(&mut r, 7, 5, 0.4);
    let x = param(&mut r, &[5, 3], 1.0);
    out.push(("sparse_matmul", gradcheck(5, &[x], |t| sparse_matmul(&m, &t[0]).unwrap())));

    let f = param(&mut r, &[1, 2, 4, 5, 3], 1.0);
    let p = param(&mut r, &[6, 3], 0.9);
    out.push(("trilinear_sample", gradcheck(6, &[f, p], |t| trilinear_sample(&t[0], &t[1]).unwrap())));

    let mesh = icosphere(1);
    let adj = mesh.build_adjacency();
    let x = param(&mut r, &[42, 4], 1.0);
    let w = param(&mut r, &[3, 4], 1.0);
    let b = param(&mut r, &[3], 1.0);
    out.push(("graph_conv", gradcheck(7, &[x, w, b], |t| graph_conv(&t[0], &adj, &t[1], &t[2]).unwrap())));

    let gt = gt_sphere(&mut r, 300, 0.8);
    let pred = jittered(&mesh, &mut r, 0.05);
    out.push(("chamfer", gradcheck(8, &[pred.clone()], |t| chamfer(&t[0], &gt).unwrap())));
    let lap = mesh.laplacian_matrix().unwrap();
    out.push(("laplacian_loss", gradcheck(9, &[pred.clone()], |t| laplacian_loss(&t[0], &lap).unwrap())));
    let faces = mesh.faces.clone();
    out.push(("normal_loss", gradcheck(10, &[pred.clone()], |t| normal_loss(&t[0], &faces, &gt).unwrap().0)));
    let edges = mesh.edges();
    out.push(("edge_loss", gradcheck(12, &[pred], |t| edge_loss(&t[0], &edges).unwrap())));

    let logits = param(&mut r, &[1, 3, 2, 3, 2], 2.0);
    let labels = LabelGrid::new([2, 3, 2], (0..12).map(|i| (i % 3) as u8).collect()).unwrap();
    out.push(("seg_cross_entropy", gradcheck(13, &[logits], |t| seg_cross_entropy(&t[0], &labels).unwrap())));

    out.push(("pipeline_composite", composite_gradcheck(21)));
    out
}

/// Squared nearest-neighbour indices by exhaustive search, lowest index on ties.
pub fn brute_nearest(points: &[Vec3], q: Vec3) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// O(PQ) Chamfer value with its match indices.
pub fn brute_chamfer(pred: &[Vec3], gt: &[Vec3]) -> (f64, Vec<usize>, Vec<usize>) {
    let d2 = |a: Vec3, b: Vec3| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    let p2g: Vec<usize> = pred.iter().map(|&p| brute_nearest(gt, p)).collect();
    let g2p: Vec<usize> = gt.iter().map(|&g| brute_nearest(pred, g)).collect();
    let f: f64 = pred.iter().zip(&p2g).map(|(&p, &j)| d2(p, gt[j])).sum::<f64>() / pred.len() as f64;
    let b: f64 = gt.iter().zip(&g2p).map(|(&g, &i)| d2(pred[i], g)).sum::<f64>() / gt.len() as f64;
    (f + b, p2g, g2p)
}

pub struct ChamferOracle {
    pub pairs: usize,
    pub index_mismatches: usize,
    pub max_value_err: f64,
}

/// Accelerated Chamfer against the brute-force oracle on random pairs of
/// at most 512 points. Points are snapped to a coarse lattice so ties occur.
pub fn chamfer_oracle(pairs: usize, seed: u64) -> ChamferOracle {
    let mut r = rng(seed);
    let mut res = ChamferOracle { pairs, index_mismatches: 0, max_value_err: 0.0 };
    for k in 0..pairs {
        let np = r.gen_range(1..=512);
        let ng = r.gen_range(1..=512);
        let snap = k % 4 == 0;
        let mut pts = |n: usize| -> Vec<Vec3> {
            (0..n)
                .map(|_| {
                    let mut v = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
                    if snap {
                        v = v.map(|c: f64| (c * 4.0).round() / 4.0);
                    }
                    v
                })
                .collect()
        };
        let pred = pts(np);
        let gt_pts = pts(ng);
        let gt = GtSurface::new(gt_pts.clone(), vec![[0.0, 0.0, 1.0]; ng]).unwrap();
        let (value, p2g, g2p) = brute_chamfer(&pred, &gt_pts);
        let (fp2g, fg2p) = chamfer_matches(&pred, &gt);
        if fp2g != p2g || fg2p != g2p {
            res.index_mismatches += 1;
        }
        let t = Tensor::new(&[np, 3], pred.iter().flatten().copied().collect()).unwrap();
        let fast = chamfer(&t, &gt).unwrap().item();
        res.max_value_err = res.max_value_err.max((fast - value).abs());
    }
    res
}

/// Largest entrywise gap between `sparse_matmul` and a dense product.
pub fn sparse_oracle(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (rows, cols, width) = (r.gen_range(1..40), r.gen_range(1..40), r.gen_range(1..6));
        let m = random_sparse(&mut r, rows, cols, 0.2);
        let x = rand_vec(&mut r, cols * width, 2.0);
        let dense = m.to_dense();
        let got = sparse_matmul(&m, &Tensor::new(&[cols, width], x.clone()).unwrap()).unwrap().to_vec();
        for i in 0..rows {
            for c in 0..width {
                let want: f64 = (0..cols).map(|j| dense[i * cols + j] * x[j * width + c]).sum();
                worst = worst.max((got[i * width + c] - want).abs());
            }
        }
    }
    worst
}

/// Largest gap between `seg_cross_entropy` and a direct log-softmax sum.
pub fn cross_entropy_oracle(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = r.gen_range(2..6);
        let dims = [r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5)];
        let n: usize = dims.iter().product();
        let x = rand_vec(&mut r, c * n, 6.0);
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..c) as u8).collect();
        let mut want = 0.0;
        for v in 0..n {
            let z: f64 = (0..c).map(|k| x[k * n + v].exp()).sum();
            want -= (x[labels[v] as usize * n + v].exp() / z).ln();
        }
        want /= n as f64;
        let t = Tensor::new(&[1, c, dims[0], dims[1], dims[2]], x).unwrap();
        let got = seg_cross_entropy(&t, &LabelGrid::new(dims, labels).unwrap()).unwrap().item();
        worst = worst.max((got - want).abs());
    }
    worst
}
