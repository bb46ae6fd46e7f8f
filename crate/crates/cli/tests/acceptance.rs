//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to the
//! raw stderr handle so it shows up without `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use aseg_core::gradcheck::{check_gradient, max_relative_error, numeric_gradient};
use aseg_core::losses::{uncertainty_aggregate, LossMember, UncertaintyWeights};
use aseg_core::metrics::{boundary, dsc, edt, nsd, BinaryMask, DistanceMap};
use aseg_core::model::{ModelConfig, PromptKind, SegModel};
use aseg_core::optim::AdamW;
use aseg_core::phantom::{generate, split, PhantomConfig, PhantomSample};
use aseg_core::prompt::{noise_schedule, DiffusionConfig, PromptEncoder, PromptVars};
use aseg_core::study::{self, Variant};
use aseg_core::train::{TrainConfig, Trainer};
use aseg_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria run one at a time so wall-clock limits are measured alone.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("acceptance criterion {n} ({name}): {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    let r = g.constant(randn(g.shape(y), &mut rng));
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Analytic gradient with parameter gradients routed into a copy of `store`.
fn analytic_with(f: &impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>, store: &ParamStore) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv).unwrap();
    let mut scratch = store.clone();
    g.backward(out, &mut scratch).unwrap().get(xv).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; x.len()])
}

#[derive(Default)]
struct Worst(Vec<(&'static str, f64, f64)>);

impl Worst {
    fn add(&mut self, name: &'static str, tol: f64, e: f64) {
        match self.0.iter_mut().find(|w| w.0 == name) {
            Some(w) => w.2 = w.2.max(e),
            None => self.0.push((name, tol, e)),
        }
    }

    fn failing(&self) -> Vec<String> {
        self.0.iter().filter(|w| !(w.2 < w.1)).map(|w| format!("{} {:.2e}", w.0, w.2)).collect()
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let _s = serial();
    const H: f64 = 1e-3;
    const H_FINE: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const TOL_RELU: f64 = 1e-3;
    let start = Instant::now();
    let mut worst = Worst::default();
    let seeds = 100u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut op = |name, f: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>| {
            worst.add(name, TOL, check_gradient(f, x, H).unwrap());
        };

        let x = randn(&[2, 2, 5, 5], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        op("conv2d dx", &|g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            weighted(g, y, seed)
        }, &x);
        op("conv2d dw", &|g, w| {
            let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, w, Some(b), 1, 1)?;
            weighted(g, y, seed)
        }, &w);
        op("conv2d db", &|g, b| {
            let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(x, w, Some(b), 1, 1)?;
            weighted(g, y, seed)
        }, &b);

        let xt = randn(&[2, 3, 3, 3], &mut rng);
        let wt = randn(&[3, 2, 2, 2], &mut rng);
        let bt = randn(&[2], &mut rng);
        op("conv_transpose2d dx", &|g, x| {
            let (w, b) = (g.constant(wt.clone()), g.constant(bt.clone()));
            let y = g.conv_transpose2d(x, w, Some(b), 2, 0)?;
            weighted(g, y, seed)
        }, &xt);
        op("conv_transpose2d dw", &|g, w| {
            let (x, b) = (g.constant(xt.clone()), g.constant(bt.clone()));
            let y = g.conv_transpose2d(x, w, Some(b), 2, 0)?;
            weighted(g, y, seed)
        }, &wt);
        op("conv_transpose2d db", &|g, b| {
            let (x, w) = (g.constant(xt.clone()), g.constant(wt.clone()));
            let y = g.conv_transpose2d(x, w, Some(b), 2, 0)?;
            weighted(g, y, seed)
        }, &bt);

        let xl = randn(&[3, 4], &mut rng);
        let wl = randn(&[4, 5], &mut rng);
        let bl = randn(&[5], &mut rng);
        op("linear dx", &|g, x| {
            let (w, b) = (g.constant(wl.clone()), g.constant(bl.clone()));
            let y = g.linear(x, w, Some(b))?;
            weighted(g, y, seed)
        }, &xl);
        op("linear dw", &|g, w| {
            let (x, b) = (g.constant(xl.clone()), g.constant(bl.clone()));
            let y = g.linear(x, w, Some(b))?;
            weighted(g, y, seed)
        }, &wl);
        op("linear db", &|g, b| {
            let (x, w) = (g.constant(xl.clone()), g.constant(wl.clone()));
            let y = g.linear(x, w, Some(b))?;
            weighted(g, y, seed)
        }, &bl);
        let ba = randn(&[2, 3, 4], &mut rng);
        let bb = randn(&[2, 4, 2], &mut rng);
        op("bmm da", &|g, a| {
            let b = g.constant(bb.clone());
            let y = g.bmm(a, b)?;
            weighted(g, y, seed)
        }, &ba);
        op("bmm db", &|g, b| {
            let a = g.constant(ba.clone());
            let y = g.bmm(a, b)?;
            weighted(g, y, seed)
        }, &bb);

        let xs = randn(&[2, 3, 4], &mut rng);
        op("transpose+softmax", &|g, x| {
            let t = g.transpose_last2(x)?;
            let s = g.softmax_last(t)?;
            weighted(g, s, seed)
        }, &xs);
        op("sigmoid", &|g, x| {
            let s = g.sigmoid(x)?;
            weighted(g, s, seed)
        }, &xs);
        let xr = randn(&[4, 5], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.05f64.copysign(v) } else { v });
        op("relu", &|g, x| {
            let r = g.relu(x)?;
            weighted(g, r, seed)
        }, &xr);

        let xe = randn(&[2, 3, 2, 2], &mut rng);
        let ye = randn(&[2, 3, 2, 2], &mut rng);
        op("add/sub/mul/scale", &|g, x| {
            let y = g.constant(ye.clone());
            let a = g.add(x, y)?;
            let s = g.sub(a, x)?;
            let m = g.mul(s, x)?;
            let m = g.mul(m, x)?;
            let k = g.scale(m, -1.7)?;
            let k = g.add_scalar(k, 0.3)?;
            weighted(g, k, seed)
        }, &xe);

        let yb = randn(&[3, 2, 2], &mut rng);
        let mm = randn(&[2, 1, 2, 2], &mut rng);
        let sc = randn(&[6], &mut rng);
        op("scale_channels", &|g, s| {
            let x = g.constant(xe.clone());
            let a = g.scale_channels(x, s)?;
            weighted(g, a, seed)
        }, &sc);
        op("add_batch_broadcast", &|g, y| {
            let x = g.constant(xe.clone());
            let a = g.add_batch_broadcast(x, y)?;
            let a = g.mul(a, a)?;
            weighted(g, a, seed)
        }, &yb);
        op("add_channel_map", &|g, m| {
            let x = g.constant(xe.clone());
            let a = g.add_channel_map(x, m)?;
            let a = g.mul(a, a)?;
            weighted(g, a, seed)
        }, &mm);
        op("add_channel_bias", &|g, v| {
            let x = g.constant(xe.clone());
            let a = g.add_channel_bias(x, v)?;
            let a = g.mul(a, a)?;
            weighted(g, a, seed)
        }, &sc);

        let xp = randn(&[2, 2, 3, 3], &mut rng);
        let other = randn(&[2, 1, 3, 3], &mut rng);
        op("concat/upsample/pool/reshape/mean", &|g, x| {
            let o = g.constant(other.clone());
            let c = g.concat_channels(o, x)?;
            let u = g.upsample_nearest(c, 2)?;
            let u = g.mul(u, u)?;
            let p = g.adaptive_avg_pool(u)?;
            let r = g.reshape(p, &[2, 3])?;
            let w = weighted(g, r, seed)?;
            let m = g.mean(x)?;
            g.add(w, m)
        }, &xp);

        let shape = [2, 1, 4, 4];
        let probs = Tensor::<f64>::uniform(&shape, 0.1, 0.9, &mut rng);
        let gt = Tensor::<f64>::new(&shape, (0..32).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect()).unwrap();
        let target = randn(&shape, &mut rng);
        op("MSE", &|g, p| {
            let t = g.constant(target.clone());
            g.mse(p, t)
        }, &probs);
        op("DC", &|g, p| g.dice_loss(p, &gt), &probs);
        op("CE", &|g, p| g.bce_loss(p, &gt), &probs);
        let dmap = Tensor::<f64>::new(
            &shape,
            probs
                .data()
                .iter()
                .map(|&p| {
                    let d: f64 = rng.random_range(0.0..1.0);
                    if (d - p).abs() < 0.01 { (p + 0.5) % 1.0 } else { d }
                })
                .collect(),
        )
        .unwrap();
        op("SD", &|g, p| g.shape_distance_loss(p, &dmap), &probs);

        // joint aggregate over all members, in each λ and in a member loss;
        // L/(2λ²) is strongly curved at small λ, so a finer step keeps truncation error down
        let members = [LossMember::Ce, LossMember::Dice, LossMember::Sd];
        let mut store = ParamStore::new();
        let weights = UncertaintyWeights::new(&mut store, &members);
        for &id in weights.lambdas.values() {
            let v: f32 = rng.random_range(0.3..2.5);
            store.set_value(id, Tensor::full(&[1], v)).unwrap();
        }
        let raw: Vec<f64> = members.iter().map(|_| rng.random_range(0.1..4.0)).collect();
        let aggregate = |g: &mut Graph<f64>, first: Var| -> Result<Var> {
            let mut ls = vec![(members[0], first)];
            for (m, &v) in members.iter().zip(&raw).skip(1) {
                ls.push((*m, g.constant(Tensor::scalar(v))));
            }
            Ok(uncertainty_aggregate(g, &store, &ls, &weights, true, 0)?.0)
        };
        for &id in weights.lambdas.values() {
            let lam = Tensor::<f64>::scalar(store.tensor(id).data()[0] as f64);
            let f = |g: &mut Graph<f64>, x: Var| {
                g.override_param(id, x);
                let l0 = g.constant(Tensor::scalar(raw[0]));
                aggregate(g, l0)
            };
            let a = analytic_with(&f, &lam, &store);
            let n = numeric_gradient(&f, &lam, H_FINE).unwrap();
            worst.add("aggregate dλ", TOL, max_relative_error(&a, &n));
        }
        let f = |g: &mut Graph<f64>, x: Var| {
            let sq = g.mul(x, x)?;
            aggregate(g, sq)
        };
        let l = Tensor::<f64>::scalar(raw[0].sqrt());
        let a = analytic_with(&f, &l, &store);
        worst.add("aggregate dL", TOL, max_relative_error(&a, &numeric_gradient(&f, &l, H_FINE).unwrap()));

        // compositions through ReLU
        if seed % 4 == 0 {
            let mut store = ParamStore::new();
            let mut init = ChaCha8Rng::seed_from_u64(seed + 1000);
            let enc = PromptEncoder::new(&mut store, 3, 4, 4, DiffusionConfig::default(), &mut init).unwrap();
            let x = randn(&[1, 32, 4, 4], &mut rng);
            let f = |g: &mut Graph<f64>, x: Var| {
                let feats = enc.encode_features(g, &store, x)?;
                let mut total = weighted(g, feats[0], seed)?;
                for &ft in &feats[1..] {
                    let w = weighted(g, ft, seed + 1)?;
                    total = g.add(total, w)?;
                }
                Ok(total)
            };
            let a = analytic_with(&f, &x, &store);
            worst.add("prompt encoder stages", TOL_RELU, max_relative_error(&a, &numeric_gradient(&f, &x, H_FINE).unwrap()));
        }
    }
    let model = SegModel::new(ModelConfig {
        num_classes: 2,
        height: 32,
        width: 32,
        diffusion: DiffusionConfig::default(),
        init_seed: 3,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f_i = model.encode_images(&Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng)).unwrap().cast::<f64>();
    let dense = randn(&[1, 32, 8, 8], &mut rng);
    let sparse = randn(&[1, 2, 32], &mut rng);
    let pe = model.pe.cast::<f64>();
    let f = |g: &mut Graph<f64>, s: Var| {
        let (fv, d, p) = (g.constant(f_i.clone()), g.constant(dense.clone()), g.constant(pe.clone()));
        let logits = model.mask_decoder.decode(g, &model.store, fv, p, PromptVars { sparse: s, dense: d })?;
        let probs = g.sigmoid(logits)?;
        weighted(g, probs, 5)
    };
    let a = analytic_with(&f, &sparse, &model.store);
    worst.add("mask decoder", TOL_RELU, max_relative_error(&a, &numeric_gradient(&f, &sparse, H_FINE).unwrap()));

    let secs = start.elapsed().as_secs_f64();
    let failing = worst.failing();
    let max_e = worst.0.iter().filter(|w| w.1 == TOL).map(|w| w.2).fold(0.0, f64::max);
    let max_relu = worst.0.iter().filter(|w| w.1 == TOL_RELU).map(|w| w.2).fold(0.0, f64::max);
    verdict(
        1,
        "gradient correctness",
        failing.is_empty() && secs < 120.0,
        &format!(
            "{} checks x {seeds} seeds, max rel err {max_e:.2e} (smooth), {max_relu:.2e} (through ReLU), {secs:.1}s{}",
            worst.0.len(),
            if failing.is_empty() { String::new() } else { format!(", over tolerance: {}", failing.join("; ")) }
        ),
    );
}

fn brute_edt(m: &BinaryMask) -> Vec<f64> {
    let (h, w) = (m.height(), m.width());
    let src: Vec<(usize, usize)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| m.get(y, x)).collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let d2 = src.iter().map(|&(sy, sx)| y.abs_diff(sy).pow(2) + x.abs_diff(sx).pow(2)).min();
            d2.map_or(f64::INFINITY, |d| (d as f64).sqrt())
        })
        .collect()
}

fn brute_boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = vec![];
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn brute_dsc(g: &BinaryMask, s: &BinaryMask) -> f64 {
    let inter = g.data().iter().zip(s.data()).filter(|(&a, &b)| a == 1 && b == 1).count();
    let total = g.count() + s.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn brute_nsd(g: &BinaryMask, s: &BinaryMask, tau: f64) -> f64 {
    match (g.is_empty(), s.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (bg, bs) = (brute_boundary(g), brute_boundary(s));
    let near = |p: (usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|&q| ((p.0.abs_diff(q.0).pow(2) + p.1.abs_diff(q.1).pow(2)) as f64).sqrt() <= tau)
    };
    let hits = bg.iter().filter(|&&p| near(p, &bs)).count() + bs.iter().filter(|&&p| near(p, &bg)).count();
    hits as f64 / (bg.len() + bs.len()) as f64
}

#[test]
fn criterion_2_metric_oracles() {
    let _s = serial();
    let start = Instant::now();
    let mut failures = vec![];
    let mut max_nsd_err = 0.0f64;
    let pairs = 250;
    for seed in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let dg: f64 = rng.random_range(0.0..0.6);
        let ds: f64 = rng.random_range(0.0..0.6);
        let g = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(dg));
        let s = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(ds));
        let tau: f64 = rng.random_range(0.0..5.0);
        if dsc(&g, &s).unwrap() != brute_dsc(&g, &s) {
            failures.push(format!("dsc seed {seed}"));
        }
        let e = (nsd(&g, &s, tau).unwrap() - brute_nsd(&g, &s, tau)).abs();
        max_nsd_err = max_nsd_err.max(e);
        if !(e <= 1e-9) {
            failures.push(format!("nsd seed {seed}"));
        }
        for m in [&g, &s] {
            let d: DistanceMap = edt(m);
            let want = brute_edt(m);
            let exact = if m.is_empty() {
                d.empty_source
            } else {
                !d.empty_source && d.data == want
            };
            if !exact {
                failures.push(format!("edt seed {seed}"));
            }
            let mut b: Vec<(usize, usize)> = vec![];
            let bm = boundary(m);
            for y in 0..h {
                for x in 0..w {
                    if bm.get(y, x) {
                        b.push((y, x));
                    }
                }
            }
            if b != brute_boundary(m) {
                failures.push(format!("boundary seed {seed}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "metric oracles",
        failures.is_empty() && secs < 60.0,
        &format!(
            "{pairs} random mask pairs up to 32x32, dsc exact, max nsd err {max_nsd_err:.1e}, edt exact, {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!(", mismatches: {}", failures.join(", ")) }
        ),
    );
}

#[test]
fn criterion_3_noise_schedule() {
    let _s = serial();
    let mut exact = true;
    for t in 0..=10_000u32 {
        let s = noise_schedule(t as i64).unwrap();
        exact &= s.to_bits() == (1.0 / f64::from(t + 1)).to_bits() && (s * f64::from(t + 1) - 1.0).abs() <= f64::EPSILON;
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let enc = PromptEncoder::new(&mut store, 2, 16, 16, DiffusionConfig::default(), &mut rng).unwrap();
    let b = 13; // 13 * 32 * 16 * 16 > 1e5 draws
    let mut devs = vec![];
    for t in [0usize, 1, 4, 9] {
        let mut g = Graph::<f64>::no_grad();
        let f_i = g.constant(Tensor::zeros(&[b, 32, 16, 16]));
        let c = g.constant(Tensor::zeros(&[b, 1, 16, 16]));
        let mut noise = ChaCha8Rng::seed_from_u64(1000 + t as u64);
        let out = enc.forward_diffuse(&mut g, f_i, c, &vec![t; b], Some(&mut noise)).unwrap();
        let v = g.value(out).data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        devs.push((t, (std * (t as f64 + 1.0) - 1.0).abs()));
    }
    let worst = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    verdict(
        3,
        "noise schedule",
        exact && worst < 0.02,
        &format!(
            "sigma_t = 1/(t+1) {} for t in 0..=10000; empirical std rel dev {} over {} draws each",
            if exact { "exact" } else { "NOT exact" },
            devs.iter().map(|(t, d)| format!("t={t}: {:.2}%", 100.0 * d)).collect::<Vec<_>>().join(", "),
            b * 32 * 16 * 16
        ),
    );
}

/// Two linear-regression members whose irreducible errors differ tenfold.
fn lambda_toy(seed: u64, steps: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (64, 4);
    let x = randn(&[n, d], &mut rng);
    let targets: Vec<Tensor<f64>> = [10f64.sqrt(), 1.0]
        .iter()
        .map(|&s| {
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let noise = Tensor::<f64>::randn(&[n, 1], s, &mut rng);
            let y = (0..n).map(|i| (0..d).map(|j| x.data()[i * d + j] * w[j]).sum::<f64>() + noise.data()[i]).collect();
            Tensor::new(&[n, 1], y).unwrap()
        })
        .collect();
    let members = [LossMember::Ce, LossMember::Dice];
    let mut store = ParamStore::new();
    let thetas: Vec<_> = members.iter().map(|m| store.add(format!("theta.{}", m.name()), Tensor::zeros(&[d, 1]))).collect();
    let weights = UncertaintyWeights::new(&mut store, &members);
    let mut ids = thetas.clone();
    ids.extend(weights.lambdas.values().copied());
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    for step in 0..steps {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let mut losses = vec![];
        for ((&m, &th), y) in members.iter().zip(&thetas).zip(&targets) {
            let w = g.param(&store, th);
            let pred = g.linear(xv, w, None).unwrap();
            let yv = g.constant(y.clone());
            losses.push((m, g.mse(pred, yv).unwrap()));
        }
        let (total, _) = uncertainty_aggregate(&mut g, &store, &losses, &weights, true, step).unwrap();
        g.backward(total, &mut store).unwrap();
        opt.step(&mut store, &ids, 1e-2);
        store.zero_grad();
    }
    let v = weights.values(&store);
    (v[members[0].name()], v[members[1].name()])
}

#[test]
fn criterion_4_uncertainty_weighting() {
    let _s = serial();
    let mut store = ParamStore::new();
    let weights = UncertaintyWeights::new(&mut store, &[LossMember::Dice]);
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::scalar(2.0));
    let (total, _) = uncertainty_aggregate(&mut g, &store, &[(LossMember::Dice, l)], &weights, true, 0).unwrap();
    let spot = g.value(total).item();
    let spot_ok = (spot - (1.0 + 2f64.ln())).abs() < 1e-6;
    let runs: Vec<(f64, f64)> = (0..5).map(|s| lambda_toy(s, 2000)).collect();
    let wins = runs.iter().filter(|(big, small)| big > small).count();
    verdict(
        4,
        "uncertainty weighting",
        spot_ok && wins >= 4,
        &format!(
            "J=1 lambda=1 L=2 gives {spot:.9} (1+ln2 = {:.9}); larger member has larger lambda in {wins}/5 seeds [{}]",
            1.0 + 2f64.ln(),
            runs.iter().map(|(b, s)| format!("{b:.2}>{s:.2}")).collect::<Vec<_>>().join(" ")
        ),
    );
}

fn phantoms(n: usize) -> (Vec<PhantomSample>, Vec<PhantomSample>) {
    let cfg = PhantomConfig::default();
    assert!(cfg.symmetric_pair && cfg.height == 64 && cfg.width == 64 && cfg.num_classes == 4);
    split(&generate(&cfg, n).unwrap(), 0.8).unwrap()
}

#[test]
fn criterion_5_end_to_end_learning() {
    let _s = serial();
    let (train, val) = phantoms(200);
    let start = Instant::now();
    let mut t = Trainer::new(TrainConfig::default(), &train, &val).unwrap();
    let mut hit: Option<(usize, f64, f64, f64)> = None;
    let mut best = (0usize, 0.0f64, 0.0f64, f64::INFINITY);
    while t.epoch < t.config.epochs {
        let s = t.run_epoch(|_| {}).unwrap();
        let pc = &s.eval.per_class;
        let gap = (pc[&0].dsc - pc[&1].dsc).abs();
        if s.eval.mean_dsc > best.1 {
            best = (s.epoch, s.eval.mean_dsc, s.eval.mean_nsd, gap);
        }
        if hit.is_none() && s.eval.mean_dsc >= 85.0 && s.eval.mean_nsd >= 80.0 && gap < 10.0 {
            hit = Some((s.epoch, s.eval.mean_dsc, s.eval.mean_nsd, gap));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let fin = t.evaluate().unwrap();
    let detail = format!(
        "{} epochs in {:.0}s; first epoch meeting DSC>=85, NSD>=80, mirror gap<10: {}; best DSC {:.3} (NSD {:.3}, gap {:.2}) at epoch {}; final DSC {:.3} NSD {:.3}",
        t.epoch,
        secs,
        hit.map_or("none".to_string(), |h| format!("{} (DSC {:.3} NSD {:.3} gap {:.2})", h.0, h.1, h.2, h.3)),
        best.1,
        best.2,
        best.3,
        best.0,
        fin.mean_dsc,
        fin.mean_nsd
    );
    verdict(5, "end-to-end learning", hit.is_some() && secs < 1800.0, &detail);
}

#[test]
fn criterion_6_ablation_direction() {
    let _s = serial();
    let (train, val) = phantoms(200);
    let variants = vec![
        Variant::new("default", &[]),
        Variant::new("dense", &[("branch_mode", "dense")]),
        Variant::new("sparse", &[("branch_mode", "sparse")]),
        Variant::new("diffusion off", &[("diffusion_enabled", "false")]),
        Variant::new("-CE", &[("loss_toggles", "DC,SD,MSE")]),
        Variant::new("-DC", &[("loss_toggles", "CE,SD,MSE")]),
        Variant::new("-SD", &[("loss_toggles", "CE,DC,MSE")]),
        Variant::new("-MSE", &[("loss_toggles", "CE,DC,SD")]),
    ];
    let seeds = 5u64;
    let (mut branch, mut diffusion, mut joint) = (0, 0, 0);
    let mut lines = vec![];
    let start = Instant::now();
    for seed in 0..seeds {
        let base = TrainConfig { epochs: 30, seed, ..TrainConfig::default() };
        let rows = study::run_ablation(&base, &variants, &train, &val, |_| {}).unwrap();
        assert!(rows.iter().all(|r| r.order_hash == rows[0].order_hash), "variants must share batches");
        let d = |label: &str| rows.iter().find(|r| r.label == label).unwrap().mean_dsc;
        let full = d("default");
        branch += (full >= d("dense").max(d("sparse")) + 0.5) as usize;
        diffusion += (full >= d("diffusion off") + 0.5) as usize;
        joint += (["-CE", "-DC", "-SD", "-MSE"].iter().all(|l| full >= d(l))) as usize;
        lines.push(format!(
            "seed {seed}: {}",
            rows.iter().map(|r| format!("{} {:.2}", r.label, r.mean_dsc)).collect::<Vec<_>>().join(", ")
        ));
    }
    let _ = std::io::stderr().write_all(format!("criterion 6 rows ({:.0}s):\n  {}\n", start.elapsed().as_secs_f64(), lines.join("\n  ")).as_bytes());
    verdict(
        6,
        "ablation direction",
        branch >= 3 && diffusion >= 3 && joint >= 3,
        &format!(
            "both >= max(dense, sparse)+0.5 in {branch}/5, diffusion on >= off+0.5 in {diffusion}/5, full loss >= every single-removed in {joint}/5 (30 epochs, 160/40 phantoms)"
        ),
    );
}

#[test]
fn criterion_7_offset_trend() {
    let _s = serial();
    let (train, val) = phantoms(200);
    let cfg = TrainConfig { prompt_kind: PromptKind::Box, epochs: 30, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg, &train, &val).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let offsets = study::parse_offsets("0,5,15,30,50,IB").unwrap();
    let rows = study::box_offset_study(&t.model, t.val_data(), &offsets, t.config.threshold, t.config.tau, 16).unwrap();
    let dsc: Vec<f64> = rows.iter().map(|r| r.mean_dsc).collect();
    let near = dsc[0].min(dsc[1]);
    let far = &dsc[2..];
    let beats = far.iter().all(|&f| near > f);
    let monotone = far.windows(2).all(|w| w[0] >= w[1]);
    verdict(
        7,
        "offset trend",
        beats && monotone,
        &format!(
            "DSC by offset: {}; offsets 0-5 above all larger offsets: {beats}; non-increasing over 15,30,50,IB: {monotone}",
            rows.iter().map(|r| format!("{} {:.2}", r.label, r.mean_dsc)).collect::<Vec<_>>().join(", ")
        ),
    );
}

fn aseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aseg")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_8_determinism_and_round_trips() {
    let _s = serial();
    let cfg = PhantomConfig { height: 32, width: 32, ..PhantomConfig::default() };
    let (train, val) = split(&generate(&cfg, 40).unwrap(), 0.8).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 8, seed: 4, ..TrainConfig::default() };
    let hash = |t: &Trainer| t.model.store.hash_where(|_| true);

    let mut a = Trainer::new(tc.clone(), &train, &val).unwrap();
    let mut b = Trainer::new(tc.clone(), &train, &val).unwrap();
    let mut same_run = true;
    for _ in 0..2 {
        let (mut la, mut lb) = (vec![], vec![]);
        let sa = a.run_epoch(|r| la.push(r.clone())).unwrap();
        let sb = b.run_epoch(|r| lb.push(r.clone())).unwrap();
        same_run &= la == lb && sa.eval == sb.eval && hash(&a) == hash(&b);
    }

    let dir = tempfile::tempdir().unwrap();
    let mut c = Trainer::new(tc, &train, &val).unwrap();
    c.run_epoch(|_| {}).unwrap();
    c.save_checkpoint(&dir.path().join("ck")).unwrap();
    let mut d = Trainer::resume(&dir.path().join("ck"), &train, &val).unwrap();
    let batch: Vec<(usize, usize)> = (0..8).map(|i| (i, 0)).collect();
    let rc = c.train_step(&batch).unwrap();
    let rd = d.train_step(&batch).unwrap();
    let mut resumed = rc == rd && hash(&c) == hash(&d);
    let (ec, ed) = (c.run_epoch(|_| {}).unwrap(), d.run_epoch(|_| {}).unwrap());
    resumed &= ec.eval == ed.eval && hash(&c) == hash(&d) && c.optimizer == d.optimizer;

    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(aseg(&["gen", "--out", path(&data), "--set", "n=20"]).status.success());
    assert!(aseg(&["train", "--data", path(&data), "--out", path(&run), "--epochs", "1"]).status.success());
    let ck = run.join("checkpoints/final");
    let mut outputs = vec![];
    for name in ["e1", "e2"] {
        let out = dir.path().join(name);
        assert!(aseg(&["eval", "--checkpoint", path(&ck), "--data", path(&data), "--out", path(&out)]).status.success());
        outputs.push(std::fs::read(out.join("metrics.json")).unwrap());
    }
    let idempotent = outputs[0] == outputs[1];
    verdict(
        8,
        "determinism and round trips",
        same_run && resumed && idempotent,
        &format!("same-seed trajectory identical: {same_run}; resume next step identical: {resumed}; eval idempotent: {idempotent}"),
    );
}
