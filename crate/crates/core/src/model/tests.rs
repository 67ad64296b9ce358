use super::*;
use crate::gradcheck::GradCheck;
use crate::wavelet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[allow(clippy::too_many_arguments)]
fn config(
    hw: (usize, usize),
    cin: usize,
    cout: usize,
    patch: usize,
    widths: &[usize],
    window: usize,
    heads: usize,
    conv_k: usize,
) -> ModelConfig {
    ModelConfig {
        height: hw.0,
        width: hw.1,
        in_channels: cin,
        out_channels: cout,
        patch,
        widths: widths.to_vec(),
        window,
        heads,
        ffn_ratio: 2,
        conv_k,
        blocks_per_scale: 1,
        ln_eps: 1e-5,
    }
}

fn toy() -> ModelConfig {
    config((16, 16), 3, 1, 2, &[16, 32], 2, 2, 3)
}

/// Random non-trivial parameters: biases and gains perturbed so no term
/// of the gradient vanishes by construction.
fn perturbed(cfg: &ModelConfig, seed: u64) -> ParamMap {
    let mut p = ModelParameters::init(cfg, seed).unwrap().into_map();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".gain") {
            for v in t.data_mut() {
                *v += 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
        if name.ends_with("wao.end.weight") || name.ends_with("ffn.fc2.weight") {
            for v in t.data_mut() {
                *v *= 3.0;
            }
        }
    }
    p
}

/// `⟨x, r⟩` as a scalar graph node.
fn project(g: &mut Graph, x: Var, r: &Tensor) -> Result<Var> {
    let n = g.value(x).len();
    let flat = g.reshape(x, &[1, n])?;
    let rv = g.constant(r.reshaped(&[n, 1])?);
    g.matmul(flat, rv)
}

fn set(p: &mut ParamMap, name: &str, t: Tensor) {
    let slot = p.get_mut(name).unwrap_or_else(|| panic!("{name}"));
    assert_eq!(slot.shape(), t.shape(), "{name}");
    *slot = t;
}

fn zero(p: &mut ParamMap, name: &str) {
    let slot = p.get_mut(name).unwrap_or_else(|| panic!("{name}"));
    *slot = Tensor::zeros(slot.shape());
}

/// `rows×cols` matrix with ones on the diagonal `i == j`.
fn selector(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.set(&[i, i], 1.0);
    }
    t
}

fn identity_conv(
    k: usize,
    cin: usize,
    cout: usize,
    map: impl Fn(usize) -> Option<usize>,
) -> Tensor {
    let mut t = Tensor::zeros(&[k, k, cin, cout]);
    for c in 0..cin {
        if let Some(o) = map(c) {
            t.set(&[k / 2, k / 2, c, o], 1.0);
        }
    }
    t
}

fn run_tokenize(cfg: &ModelConfig, p: &ParamMap, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::all(&mut g, p);
    let xv = g.constant(x.clone());
    let z = tokenize(&mut g, cfg, &b, xv).unwrap();
    g.value(z.var).clone()
}

fn run_untokenize(cfg: &ModelConfig, p: &ParamMap, z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::all(&mut g, p);
    let zv = g.constant(z.clone());
    let y = untokenize(&mut g, cfg, &b, TokenGrid { var: zv, scale: 0 }).unwrap();
    g.value(y).clone()
}

#[test]
fn tokenize_p1_is_pointwise_affine() {
    let cfg = config((4, 4), 3, 1, 1, &[4], 2, 1, 1);
    let p = perturbed(&cfg, 1);
    let x = random(&[4, 4, 3], 2);
    let z = run_tokenize(&cfg, &p, &x);
    let w = &p["tokenizer.weight"];
    let b = &p["tokenizer.bias"];
    for i in 0..4 {
        for j in 0..4 {
            for o in 0..4 {
                let mut s = 0.0;
                for c in 0..3 {
                    s += x.get(&[i, j, c]) * w.get(&[c, o]);
                }
                s += b.data()[o];
                assert!((z.get(&[i, j, o]) - s).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn tokenize_patch_sum() {
    let cfg = config((4, 4), 1, 1, 2, &[4], 1, 1, 1);
    let mut p = ModelParameters::init(&cfg, 0).unwrap().into_map();
    // Column 0 sums the patch (4 × the patch mean); other outputs zero.
    let mut w = Tensor::zeros(&[4, 4]);
    for r in 0..4 {
        w.set(&[r, 0], 1.0);
    }
    set(&mut p, "tokenizer.weight", w);
    let x = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
    let z = run_tokenize(&cfg, &p, &x);
    assert_eq!(z.get(&[0, 0, 0]), 0.0 + 1.0 + 4.0 + 5.0);
    assert_eq!(z.get(&[1, 1, 0]), 10.0 + 11.0 + 14.0 + 15.0);
}

#[test]
fn tokenizer_identity_roundtrip_and_zero() {
    let cfg = config((8, 8), 2, 2, 2, &[8], 2, 1, 1);
    let mut p = ModelParameters::init(&cfg, 0).unwrap().into_map();
    set(&mut p, "tokenizer.weight", Tensor::eye(8));
    set(&mut p, "detokenizer.weight", Tensor::eye(8));
    let x = random(&[8, 8, 2], 3);
    let z = run_tokenize(&cfg, &p, &x);
    assert_eq!(run_untokenize(&cfg, &p, &z), x);
    let mut g = Graph::new();
    let b = Bound::all(&mut g, &p);
    let wrong = g.constant(Tensor::zeros(&[8, 6, 2]));
    assert!(tokenize(&mut g, &cfg, &b, wrong).is_err());
    let zero_out = run_untokenize(&cfg, &p, &Tensor::zeros(&[4, 4, 8]));
    assert_eq!(zero_out, Tensor::zeros(&[8, 8, 2]));
}

fn invert(m: &Tensor) -> Tensor {
    let n = m.shape()[0];
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| m.get(&[i, j])).collect();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    Tensor::from_fn(&[n, n], |k| a[k / n][n + k % n])
}

#[test]
fn untokenize_inverse_matrix_roundtrip() {
    let cfg = config((4, 4), 4, 4, 1, &[4], 1, 1, 1);
    let mut p = ModelParameters::init(&cfg, 0).unwrap().into_map();
    let w = Tensor::eye(4).add(&random(&[4, 4], 5).scale(0.3)).unwrap();
    set(&mut p, "detokenizer.weight", w.clone());
    set(&mut p, "tokenizer.weight", invert(&w));
    let z = random(&[4, 4, 4], 6);
    let x = run_untokenize(&cfg, &p, &z);
    let back = run_tokenize(&cfg, &p, &x);
    assert!(back.max_abs_diff(&z) < 1e-12);
}

fn run_wao(cfg: &ModelConfig, p: &ParamMap, prefix: &str, z: &Tensor, scale: usize) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::with_prefix(&mut g, p, prefix);
    let zv = g.constant(z.clone());
    let out = wao_forward(&mut g, cfg, &b, prefix, TokenGrid { var: zv, scale }).unwrap();
    g.value(out.var).clone()
}

#[test]
fn wao_zero_weights_give_zero() {
    let cfg = config((16, 16), 1, 1, 1, &[8], 4, 2, 3);
    let mut p = ModelParameters::init(&cfg, 3).unwrap().into_map();
    for name in p.keys().cloned().collect::<Vec<_>>() {
        if name.contains(".wao.") {
            zero(&mut p, &name);
        }
    }
    let out = run_wao(&cfg, &p, "mid.b0", &random(&[16, 16, 8], 4), 0);
    assert_eq!(out.max_abs(), 0.0);
}

#[test]
fn wao_uniform_attention_closed_form() {
    // Front/end select and pad, mixing conv is the identity, Q = K = 0 and
    // V = O = I, so each window outputs its mean subband vector.
    let d = 8;
    let cfg = config((8, 8), 1, 1, 1, &[d], 2, 2, 3);
    let mut p = ModelParameters::init(&cfg, 3).unwrap().into_map();
    let pre = "mid.b0.wao";
    set(&mut p, &format!("{pre}.front.weight"), selector(d, d / 4));
    zero(&mut p, &format!("{pre}.front.bias"));
    set(
        &mut p,
        &format!("{pre}.conv.weight"),
        identity_conv(3, d, d, Some),
    );
    zero(&mut p, &format!("{pre}.conv.bias"));
    zero(&mut p, &format!("{pre}.q.weight"));
    zero(&mut p, &format!("{pre}.k.weight"));
    set(&mut p, &format!("{pre}.v.weight"), Tensor::eye(d));
    set(&mut p, &format!("{pre}.proj.weight"), Tensor::eye(d));
    zero(&mut p, &format!("{pre}.proj.bias"));
    set(&mut p, &format!("{pre}.end.weight"), selector(d / 4, d));
    zero(&mut p, &format!("{pre}.end.bias"));

    let z = random(&[8, 8, d], 9);
    let out = run_wao(&cfg, &p, "mid.b0", &z, 0);

    let y = z.channel_slice(0, d / 4).unwrap();
    let yw = wavelet::analysis_even(&y).unwrap();
    let mut pooled = Tensor::zeros(&[4, 4, d]);
    for wi in 0..2 {
        for wj in 0..2 {
            for c in 0..d {
                let mut s = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        s += yw.get(&[2 * wi + a, 2 * wj + b, c]);
                    }
                }
                for a in 0..2 {
                    for b in 0..2 {
                        pooled.set(&[2 * wi + a, 2 * wj + b, c], s / 4.0);
                    }
                }
            }
        }
    }
    let expect_quarter = wavelet::synthesis_even(&pooled).unwrap();
    let expect =
        Tensor::concat_channels(&[&expect_quarter, &Tensor::zeros(&[8, 8, d - d / 4])]).unwrap();
    assert!(out.max_abs_diff(&expect) < 1e-13);
}

/// Unwindowed O(N²) multi-head attention.
fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (n, d) = q.rc().unwrap();
    let dh = d / heads;
    let mut out = Tensor::zeros(&[n, d]);
    for h in 0..heads {
        for t in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|s| {
                    (0..dh)
                        .map(|c| q.get(&[t, h * dh + c]) * k.get(&[s, h * dh + c]))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let val: f64 = (0..n).map(|s| e[s] / z * v.get(&[s, h * dh + c])).sum();
                out.set(&[t, h * dh + c], val);
            }
        }
    }
    out
}

#[test]
fn single_window_equals_full_attention() {
    for (rows, cols, heads) in [(4, 4, 1), (4, 4, 2), (2, 6, 3)] {
        let d = 6;
        let q = random(&[rows * cols, d], 1).scale(2.0);
        let k = random(&[rows * cols, d], 2).scale(2.0);
        let v = random(&[rows * cols, d], 3);
        let window = rows.max(cols);
        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let layout = WindowLayout::new(rows, cols, window, heads).unwrap();
        let out = g.window_attention(qv, kv, vv, layout).unwrap();
        let reference = full_attention(&q, &k, &v, heads);
        assert!(g.value(out).max_abs_diff(&reference) <= 1e-12);
    }
}

#[test]
fn wao_single_window_matches_full_attention_reference() {
    // m = H/2 = W/2: recompute the WAO pipeline with the unwindowed
    // reference and compare.
    let d = 8;
    let cfg = config((8, 8), 1, 1, 1, &[d], 4, 2, 3);
    let p = perturbed(&cfg, 11);
    let z = random(&[8, 8, d], 12);
    let out = run_wao(&cfg, &p, "mid.b0", &z, 0);

    let pre = "mid.b0.wao";
    let lin = |x: &Tensor, name: &str, bias: bool| {
        let (h, w, c) = x.hwc().unwrap();
        let flat = x.reshaped(&[h * w, c]).unwrap();
        let mut y = crate::tensor::matmul(&flat, &p[&format!("{pre}.{name}.weight")]).unwrap();
        if bias {
            let b = &p[&format!("{pre}.{name}.bias")];
            let n = b.len();
            for row in y.data_mut().chunks_mut(n) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
        let oc = y.shape()[1];
        y.reshape(&[h, w, oc]).unwrap()
    };
    let y = lin(&z, "front", true);
    let yw = wavelet::analysis_even(&y).unwrap();
    let mut mixed = crate::tensor::conv2d(
        &yw,
        &p[&format!("{pre}.conv.weight")],
        1,
        Padding::CircularCentered,
    )
    .unwrap();
    let cb = &p[&format!("{pre}.conv.bias")];
    for row in mixed.data_mut().chunks_mut(d) {
        for (v, bb) in row.iter_mut().zip(cb.data()) {
            *v += bb;
        }
    }
    let tokens = mixed.reshaped(&[16, d]).unwrap();
    let q = crate::tensor::matmul(&tokens, &p[&format!("{pre}.q.weight")]).unwrap();
    let k = crate::tensor::matmul(&tokens, &p[&format!("{pre}.k.weight")]).unwrap();
    let v = crate::tensor::matmul(&tokens, &p[&format!("{pre}.v.weight")]).unwrap();
    let att = full_attention(&q, &k, &v, 2).reshape(&[4, 4, d]).unwrap();
    let att = lin(&att, "proj", true);
    let back = wavelet::synthesis_even(&att).unwrap();
    let expect = lin(&back, "end", true);
    assert!(out.max_abs_diff(&expect) <= 1e-12);
}

#[test]
fn attention_outputs_within_value_hull() {
    let d = 4;
    let mut g = Graph::new();
    let q = g.constant(random(&[16, d], 1).scale(3.0));
    let k = g.constant(random(&[16, d], 2).scale(3.0));
    let vt = random(&[16, d], 3);
    let v = g.constant(vt.clone());
    let layout = WindowLayout::new(4, 4, 2, 2).unwrap();
    let out = g.window_attention(q, k, v, layout).unwrap();
    let out = g.value(out).clone();
    for wr in 0..2 {
        for wc in 0..2 {
            let idx: Vec<usize> = (0..2)
                .flat_map(|r| (0..2).map(move |c| (wr * 2 + r) * 4 + wc * 2 + c))
                .collect();
            for c in 0..d {
                let vals: Vec<f64> = idx.iter().map(|&t| vt.get(&[t, c])).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for &t in &idx {
                    let o = out.get(&[t, c]);
                    assert!(o >= lo - 1e-15 && o <= hi + 1e-15);
                }
            }
        }
    }
}

fn zero_residual_outputs(p: &mut ParamMap) {
    for name in p.keys().cloned().collect::<Vec<_>>() {
        if name.contains("wao.end.") || name.contains("ffn.fc2.") {
            zero(p, &name);
        }
    }
}

#[test]
fn block_with_zero_sublayers_is_identity() {
    let cfg = config((8, 8), 1, 1, 1, &[8], 2, 2, 3);
    let mut p = perturbed(&cfg, 2);
    zero_residual_outputs(&mut p);
    let z = random(&[8, 8, 8], 3);
    let mut g = Graph::new();
    let b = Bound::all(&mut g, &p);
    let zv = g.constant(z.clone());
    let out = wattn_block(&mut g, &cfg, &b, "mid.b0", TokenGrid { var: zv, scale: 0 }).unwrap();
    assert_eq!(g.value(out.var), &z);
}

#[test]
fn block_preserves_shape() {
    for (h, w) in [(8, 8), (8, 16), (16, 16)] {
        let cfg = config((h, w), 1, 1, 1, &[8], 2, 2, 3);
        let p = ModelParameters::init(&cfg, 1).unwrap().into_map();
        let mut g = Graph::new();
        let b = Bound::all(&mut g, &p);
        let zv = g.constant(random(&[h, w, 8], 4));
        let out = wattn_block(&mut g, &cfg, &b, "mid.b0", TokenGrid { var: zv, scale: 0 }).unwrap();
        assert_eq!(g.value(out.var).shape(), &[h, w, 8]);
    }
}

#[test]
fn wao_rejects_indivisible_window() {
    let cfg = config((12, 12), 1, 1, 1, &[8], 4, 2, 3);
    let p = ModelParameters::init(&config((12, 12), 1, 1, 1, &[8], 3, 2, 3), 1)
        .unwrap()
        .into_map();
    let mut g = Graph::new();
    let b = Bound::all(&mut g, &p);
    let zv = g.constant(random(&[12, 12, 8], 4));
    assert!(wao_forward(&mut g, &cfg, &b, "mid.b0", TokenGrid { var: zv, scale: 0 }).is_err());
}

fn block_check(cfg: &ModelConfig, prefix: &'static str, seed: u64) -> f64 {
    let params: ParamMap = perturbed(cfg, seed)
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .collect();
    let (h, w) = cfg.grid_at(0);
    let d = cfg.widths[0];
    let z = random(&[h, w, d], seed + 1);
    let r = random(&[h, w, d], seed + 2);
    let cfg = cfg.clone();
    let f = move |g: &mut Graph, p: &ParamMap| -> Result<Var> {
        let b = Bound::all(g, p);
        let zv = g.constant(z.clone());
        let out = wattn_block(g, &cfg, &b, prefix, TokenGrid { var: zv, scale: 0 })?;
        project(g, out.var, &r)
    };
    GradCheck::with_step(1e-5)
        .run(f, &params)
        .unwrap()
        .max_rel_error
}

#[test]
fn wattn_block_gradient_matches_finite_differences() {
    let cfg = config((8, 8), 1, 1, 1, &[8], 2, 2, 3);
    let err = block_check(&cfg, "mid.b0", 21);
    assert!(err <= 1e-5, "max rel error {err}");
}

fn sampling_params(cfg: &ModelConfig) -> ParamMap {
    let mut p = ModelParameters::init(cfg, 0).unwrap().into_map();
    let d = cfg.widths[0];
    set(&mut p, "down0.proj.weight", selector(d, d / 4));
    zero(&mut p, "down0.proj.bias");
    set(&mut p, "down0.conv.weight", identity_conv(1, d, d, Some));
    zero(&mut p, "down0.conv.bias");
    p
}

fn run_down(cfg: &ModelConfig, p: &ParamMap, z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = Bound::all(&mut g, p);
    let zv = g.constant(z.clone());
    let out = downsample(&mut g, cfg, &b, TokenGrid { var: zv, scale: 0 }).unwrap();
    g.value(out.var).clone()
}

#[test]
fn downsample_constant_field() {
    let d = 8;
    let cfg = config((8, 8), 1, 1, 1, &[d, d], 2, 2, 1);
    let p = sampling_params(&cfg);
    let out = run_down(&cfg, &p, &Tensor::full(&[8, 8, d], 1.5));
    assert_eq!(out.shape(), &[4, 4, d]);
    let q = d / 4;
    for pix in out.data().chunks(d) {
        assert!(pix[..q].iter().all(|&v| (v - 3.0).abs() < 1e-15));
        assert!(pix[q..].iter().all(|&v| v == 0.0));
    }
    let zero_p = {
        let mut p = p.clone();
        zero(&mut p, "down0.proj.bias");
        p
    };
    assert_eq!(
        run_down(&cfg, &zero_p, &Tensor::zeros(&[8, 8, d])).max_abs(),
        0.0
    );
}

#[test]
fn upsample_skip_passthrough_and_roundtrip() {
    let d = 8;
    let q = d / 4;
    let cfg = config((8, 8), 1, 1, 1, &[d, d], 2, 2, 1);
    let mut p = sampling_params(&cfg);
    set(&mut p, "up0.proj.weight", Tensor::eye(d));
    zero(&mut p, "up0.proj.bias");
    zero(&mut p, "up0.fuse.bias");

    // Skip pass-through: fused channel q+c → c for the skip half.
    let skip_only = identity_conv(1, q + d, d, |c| c.checked_sub(q));
    set(&mut p, "up0.fuse.weight", skip_only);
    let skip = random(&[8, 8, d], 3);
    let run_up = |p: &ParamMap, coarse: &Tensor, skip: &Tensor| {
        let mut g = Graph::new();
        let b = Bound::all(&mut g, p);
        let cv = g.constant(coarse.clone());
        let sv = g.constant(skip.clone());
        let out = upsample(
            &mut g,
            &cfg,
            &b,
            TokenGrid { var: cv, scale: 1 },
            TokenGrid { var: sv, scale: 0 },
        )
        .unwrap();
        g.value(out.var).clone()
    };
    let out = run_up(&p, &Tensor::zeros(&[4, 4, d]), &skip);
    assert_eq!(out, skip);

    // Perfect-reconstruction path: the upsampled half lands on channels
    // 0..q and must equal the compressed content (first q channels) of z.
    let up_only = identity_conv(1, q + d, d, |c| (c < q).then_some(c));
    set(&mut p, "up0.fuse.weight", up_only);
    let z = random(&[8, 8, d], 4);
    let coarse = run_down(&cfg, &p, &z);
    let out = run_up(&p, &coarse, &Tensor::zeros(&[8, 8, d]));
    assert_eq!(out.shape(), &[8, 8, d]);
    let expect = z.channel_slice(0, q).unwrap();
    assert!(out.channel_slice(0, q).unwrap().max_abs_diff(&expect) < 1e-14);
    assert_eq!(out.channel_slice(q, d - q).unwrap().max_abs(), 0.0);
}

#[test]
fn sampling_extent_checks() {
    let cfg = config((8, 8), 1, 1, 1, &[8, 8], 2, 2, 1);
    let p = ModelParameters::init(&cfg, 0).unwrap().into_map();
    let mut g = Graph::new();
    let b = Bound::all(&mut g, &p);
    let a = g.constant(random(&[4, 4, 8], 1));
    let s = g.constant(random(&[4, 4, 8], 2));
    assert!(upsample(
        &mut g,
        &cfg,
        &b,
        TokenGrid { var: a, scale: 1 },
        TokenGrid { var: s, scale: 0 }
    )
    .is_err());
    let odd = g.constant(random(&[3, 4, 8], 3));
    assert!(downsample(&mut g, &cfg, &b, TokenGrid { var: odd, scale: 0 }).is_err());
}

fn sampling_check(seed: u64, which: &'static str) -> f64 {
    let cfg = config((8, 8), 1, 1, 1, &[8, 16], 2, 2, 3);
    let params: ParamMap = perturbed(&cfg, seed)
        .into_iter()
        .filter(|(n, _)| n.starts_with(which))
        .collect();
    let fine = random(&[8, 8, 8], seed + 1);
    let coarse = random(&[4, 4, 16], seed + 2);
    let f = move |g: &mut Graph, p: &ParamMap| -> Result<Var> {
        let b = Bound::all(g, p);
        let fv = g.constant(fine.clone());
        let out = if which == "down" {
            downsample(g, &cfg, &b, TokenGrid { var: fv, scale: 0 })?
        } else {
            let cv = g.constant(coarse.clone());
            upsample(
                g,
                &cfg,
                &b,
                TokenGrid { var: cv, scale: 1 },
                TokenGrid { var: fv, scale: 0 },
            )?
        };
        let r = random(g.value(out.var).shape(), 99);
        project(g, out.var, &r)
    };
    GradCheck::with_step(1e-5)
        .run(f, &params)
        .unwrap()
        .max_rel_error
}

#[test]
fn sampling_gradients_match_finite_differences() {
    for which in ["down", "up"] {
        let err = sampling_check(5, which);
        assert!(err <= 1e-5, "{which}: {err}");
    }
}

#[test]
fn forward_shape_and_determinism() {
    let cfg = config((32, 32), 3, 1, 2, &[16, 32], 4, 2, 3);
    let m = Mswt::init(cfg, 3).unwrap();
    let x = random(&[32, 32, 3], 4);
    let a = m.predict(&x).unwrap();
    assert_eq!(a.shape(), &[32, 32, 1]);
    let b = m.predict(&x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn shape_trace_follows_schedule() {
    let cfg = config((64, 32), 3, 2, 2, &[8, 16, 32], 2, 2, 3);
    let p = ModelParameters::init(&cfg, 0).unwrap().into_map();
    let mut g = Graph::new();
    let b = Bound::all(&mut g, &p);
    let x = g.constant(random(&[64, 32, 3], 1));
    let mut z = tokenize(&mut g, &cfg, &b, x).unwrap();
    let mut skips = vec![];
    for s in 0..2 {
        assert_eq!(
            g.value(z.var).shape(),
            &[64 / (2 << s), 32 / (2 << s), cfg.widths[s]]
        );
        z = wattn_block(&mut g, &cfg, &b, &format!("enc{s}.b0"), z).unwrap();
        skips.push(z);
        z = downsample(&mut g, &cfg, &b, z).unwrap();
    }
    assert_eq!(g.value(z.var).shape(), &[8, 4, 32]);
    for s in (0..2).rev() {
        z = upsample(&mut g, &cfg, &b, z, skips[s]).unwrap();
        assert_eq!(
            g.value(z.var).shape(),
            &[64 / (2 << s), 32 / (2 << s), cfg.widths[s]]
        );
    }
    let y = untokenize(&mut g, &cfg, &b, z).unwrap();
    assert_eq!(g.value(y).shape(), &[64, 32, 2]);
}

#[test]
fn residual_skeleton_identity() {
    for widths in [vec![16], vec![16, 32], vec![8, 16, 32]] {
        let cfg = config((32, 32), 3, 1, 2, &widths, 2, 2, 3);
        let mut p = perturbed(&cfg, 4);
        zero_residual_outputs(&mut p);
        for s in 0..widths.len() - 1 {
            let d = widths[s];
            let q = d / 4;
            set(
                &mut p,
                &format!("up{s}.fuse.weight"),
                identity_conv(3, q + d, d, |c| c.checked_sub(q)),
            );
            zero(&mut p, &format!("up{s}.fuse.bias"));
        }
        let tokens = random(&[16, 16, widths[0]], 5);
        let mut g = Graph::new();
        let b = Bound::all(&mut g, &p);
        let t = g.constant(tokens.clone());
        let out = trunk(&mut g, &cfg, &b, TokenGrid { var: t, scale: 0 }).unwrap();
        assert!(g.value(out.var).max_abs_diff(&tokens) <= 1e-14);
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = toy();
    let params = perturbed(&cfg, 8);
    let x = random(&[16, 16, 3], 9);
    let r = random(&[16, 16, 1], 10);
    let f = move |g: &mut Graph, p: &ParamMap| -> Result<Var> {
        let b = Bound::all(g, p);
        let xv = g.constant(x.clone());
        let y = mswt_forward(g, &cfg, &b, xv)?;
        project(g, y, &r)
    };
    let rep = GradCheck::with_step(1e-5).run(f, &params).unwrap();
    assert!(rep.max_rel_error <= 1e-5, "{rep:?}");
}
