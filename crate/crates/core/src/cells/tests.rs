use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::check_gradients;

const D: usize = 6;
const H: usize = 5;
const K: usize = 4;

/// Seeded parameters with a wider range than the training initializer.
fn random_params(kind: CellKind, d: usize, h: usize, k: usize, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    for spec in kind.param_specs(d, h, k) {
        let mut t = Tensor::uniform(&spec.shape, 0.9, &mut rng);
        if spec.name == "w_d" {
            t = t.map(|v| v.abs() + 0.05);
        }
        p.insert(spec.name, t);
    }
    p.insert("embedding", Tensor::uniform(&[9, d], 1.0, &mut rng));
    p
}

fn set(p: &mut Params, name: &str, value: f64) {
    let shape = p.get(name).unwrap().shape().to_vec();
    p.insert(name, Tensor::full(&shape, value));
}

fn zero_all(p: &mut Params) {
    let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        if n != "embedding" && n != "memory" {
            set(p, &n, 0.0);
        }
    }
}

fn row(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap())
}

fn vals(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

fn rand_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    Tensor::uniform(&[n], scale, &mut ChaCha8Rng::seed_from_u64(seed)).into_data()
}

// ---- straight-line reference evaluator -------------------------------------

mod oracle {
    use crate::autodiff::Tensor;
    use crate::params::Params;

    pub fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// `x · W` for `W: [in, out]`.
    pub fn vm(x: &[f64], w: &Tensor) -> Vec<f64> {
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), n_in);
        (0..n_out).map(|o| (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum()).collect()
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn had(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }

    pub fn p<'a>(params: &'a Params, n: &str) -> &'a Tensor {
        params.get(n).unwrap()
    }

    pub fn lstm(x: &[f64], h: &[f64], c: &[f64], w: &Params) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let mut i = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut cand = vec![0.0; n];
        let (xi, hi) = (vm(x, p(w, "w_xi")), vm(h, p(w, "w_hi")));
        let (xf, hf) = (vm(x, p(w, "w_xf")), vm(h, p(w, "w_hf")));
        let (xc, hc) = (vm(x, p(w, "w_xc")), vm(h, p(w, "w_hc")));
        for k in 0..n {
            i[k] = sig(xi[k] + hi[k] + c[k] * p(w, "w_ci").data()[k] + p(w, "b_i").data()[k]);
            f[k] = sig(xf[k] + hf[k] + c[k] * p(w, "w_cf").data()[k] + p(w, "b_f").data()[k]);
            cand[k] = (xc[k] + hc[k] + p(w, "b_c").data()[k]).tanh();
        }
        let c_new: Vec<f64> = (0..n).map(|k| f[k] * c[k] + i[k] * cand[k]).collect();
        let (xo, ho) = (vm(x, p(w, "w_xo")), vm(h, p(w, "w_ho")));
        let h_new = (0..n)
            .map(|k| {
                let o = sig(xo[k] + ho[k] + c_new[k] * p(w, "w_co").data()[k] + p(w, "b_o").data()[k]);
                o * c_new[k].tanh()
            })
            .collect();
        (h_new, c_new)
    }

    /// Temporary update given the vector multiplying `W_hh`.
    pub fn temporal(x: &[f64], h: &[f64], retained: &[f64], z: &[f64], w: &Params) -> Vec<f64> {
        let a = vm(retained, p(w, "w_hh"));
        let b = vm(x, p(w, "w_xh"));
        (0..h.len())
            .map(|k| (1.0 - z[k]) * h[k] + z[k] * (a[k] + b[k] + p(w, "b_h").data()[k]).tanh())
            .collect()
    }

    pub fn gate(terms: &[(&[f64], &Tensor)], b: &Tensor) -> Vec<f64> {
        let mut acc = b.data().to_vec();
        for (x, w) in terms {
            acc = add(&acc, &vm(x, w));
        }
        acc.into_iter().map(sig).collect()
    }

    pub fn gru(x: &[f64], h: &[f64], w: &Params) -> Vec<f64> {
        let z = gate(&[(x, p(w, "w_xz")), (h, p(w, "w_hz"))], p(w, "b_z"));
        let r = gate(&[(x, p(w, "w_xr")), (h, p(w, "w_hr"))], p(w, "b_r"));
        temporal(x, h, &had(&r, h), &z, w)
    }

    /// Returns `(alpha, c_tilde)`.
    pub fn memory_attention(h: &[f64], theta: &[f64], w: &Params) -> (Vec<f64>, Vec<f64>) {
        let m = p(w, "memory");
        let (k, d) = (m.shape()[0], m.shape()[1]);
        let hp = vm(h, p(w, "mem_w_h"));
        let scores: Vec<f64> = (0..k)
            .map(|j| {
                let scaled: Vec<f64> = m.row(j).iter().map(|v| v * theta[j]).collect();
                let tp = vm(&scaled, p(w, "mem_w_theta"));
                let act: Vec<f64> = add(&hp, &tp).into_iter().map(sig).collect();
                act.iter().zip(p(w, "mem_v").data()).map(|(a, b)| a * b).sum()
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let tot: f64 = e.iter().sum();
        let alpha: Vec<f64> = e.iter().map(|v| v / tot).collect();
        let c_tilde = (0..d).map(|c| (0..k).map(|j| alpha[j] * m.row(j)[c]).sum()).collect();
        (alpha, c_tilde)
    }

    /// Full hierarchical step, returns `(h, c)`.
    pub fn hcrnn(version: u8, x: &[f64], h: &[f64], c_prev: &[f64], theta: &[f64], w: &Params) -> (Vec<f64>, Vec<f64>) {
        let (_, c_tilde) = memory_attention(h, theta, w);
        let gl = gate(&[(x, p(w, "w_xl")), (h, p(w, "w_hl")), (c_prev, p(w, "w_cl"))], p(w, "b_l"));
        let c: Vec<f64> = (0..c_prev.len()).map(|k| (1.0 - gl[k]) * c_prev[k] + gl[k] * c_tilde[k]).collect();
        let z = gate(&[(x, p(w, "w_xz")), (h, p(w, "w_hz")), (&c, p(w, "w_cz"))], p(w, "b_z"));
        let xc = had(x, &c);
        let retained = match version {
            1 => had(&gate(&[(x, p(w, "w_xr")), (h, p(w, "w_hr")), (&c, p(w, "w_cr"))], p(w, "b_r")), h),
            2 => had(&gate(&[(x, p(w, "w_xr")), (h, p(w, "w_hr")), (&xc, p(w, "w_d"))], p(w, "b_r")), h),
            _ => {
                let gd = gate(&[(&xc, p(w, "w_d"))], p(w, "b_d"));
                let r = gate(&[(x, p(w, "w_xr")), (h, p(w, "w_hr"))], p(w, "b_r"));
                had(&r, &had(&gd, h))
            }
        };
        (temporal(x, h, &retained, &z, w), c)
    }
}

fn hcrnn_version(kind: CellKind) -> u8 {
    match kind {
        CellKind::Hcrnn1 => 1,
        CellKind::Hcrnn2 => 2,
        _ => 3,
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|s| (s - mx).exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|x| x / t).collect()
}

// ---- LSTM ------------------------------------------------------------------

#[test]
fn lstm_zero_weights_zero_state_stays_zero() {
    let mut p = random_params(CellKind::Lstm, D, H, K, 1);
    zero_all(&mut p);
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let x = row(&mut g, &rand_vec(D, 1.0, 2));
    let st = StateVars { h: row(&mut g, &[0.0; H]), c: Some(row(&mut g, &[0.0; H])) };
    let (next, _) = lstm_peephole_step(&mut g, &w, x, &st).unwrap();
    assert!(vals(&g, next.h).iter().all(|v| *v == 0.0));
    assert!(vals(&g, next.c.unwrap()).iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_zero_weights_halves_cell() {
    let mut p = random_params(CellKind::Lstm, D, H, K, 1);
    zero_all(&mut p);
    let v = rand_vec(H, 2.0, 3);
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let x = row(&mut g, &rand_vec(D, 1.0, 2));
    let st = StateVars { h: row(&mut g, &rand_vec(H, 1.0, 4)), c: Some(row(&mut g, &v)) };
    let (next, gates) = lstm_peephole_step(&mut g, &w, x, &st).unwrap();
    for (c, v) in vals(&g, next.c.unwrap()).iter().zip(&v) {
        assert!((c - 0.5 * v).abs() < 1e-15);
    }
    assert!(vals(&g, gates.forget.unwrap()).iter().all(|f| *f == 0.5));
}

#[test]
fn lstm_matches_oracle() {
    for seed in 0..5 {
        let p = random_params(CellKind::Lstm, D, H, K, seed);
        let (x, h, c) = (rand_vec(D, 1.0, seed + 10), rand_vec(H, 0.9, seed + 20), rand_vec(H, 1.5, seed + 30));
        let mut g = Graph::new();
        let w = p.bind(&mut g, false);
        let xv = row(&mut g, &x);
        let st = StateVars { h: row(&mut g, &h), c: Some(row(&mut g, &c)) };
        let (next, _) = lstm_peephole_step(&mut g, &w, xv, &st).unwrap();
        let (h_ref, c_ref) = oracle::lstm(&x, &h, &c, &p);
        for (a, b) in vals(&g, next.h).iter().zip(&h_ref).chain(vals(&g, next.c.unwrap()).iter().zip(&c_ref)) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}

// ---- GRU -------------------------------------------------------------------

fn gru_once(p: &Params, x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let xv = row(&mut g, x);
    let st = StateVars { h: row(&mut g, h), c: None };
    let (next, _) = gru_step(&mut g, &w, xv, &st).unwrap();
    vals(&g, next.h)
}

#[test]
fn gru_zero_weights_halves_state() {
    let mut p = random_params(CellKind::Gru, D, H, K, 1);
    zero_all(&mut p);
    let v = rand_vec(H, 0.9, 5);
    let out = gru_once(&p, &rand_vec(D, 1.0, 6), &v);
    for (a, b) in out.iter().zip(&v) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn gru_closed_update_gate_keeps_state() {
    let mut p = random_params(CellKind::Gru, D, H, K, 2);
    set(&mut p, "b_z", -60.0);
    let v = rand_vec(H, 0.9, 7);
    let out = gru_once(&p, &rand_vec(D, 1.0, 8), &v);
    for (a, b) in out.iter().zip(&v) {
        assert!((a - b).abs() < 1e-20_f64.max(1e-12));
    }
}

#[test]
fn gru_matches_oracle() {
    for seed in 0..5 {
        let p = random_params(CellKind::Gru, D, H, K, seed);
        let (x, h) = (rand_vec(D, 1.0, seed + 1), rand_vec(H, 0.9, seed + 2));
        let out = gru_once(&p, &x, &h);
        let reference = oracle::gru(&x, &h, &p);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}

// ---- memory attention and local update ---------------------------------------

fn memory_attention_once(p: &Params, h: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let th = row(&mut g, theta);
    let mem = MemoryInputs::new(&mut g, &w, th).unwrap();
    let hv = row(&mut g, h);
    let (a, c) = hcrnn_memory_attention(&mut g, &w, hv, &mem).unwrap();
    (vals(&g, a), vals(&g, c))
}

#[test]
fn single_memory_row_gets_all_attention() {
    let p = random_params(CellKind::Hcrnn1, D, H, 1, 3);
    let (alpha, c) = memory_attention_once(&p, &rand_vec(H, 0.9, 1), &[1.0]);
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(c, p.get("memory").unwrap().data());
}

#[test]
fn zero_score_vector_gives_uniform_attention() {
    let mut p = random_params(CellKind::Hcrnn1, D, H, K, 4);
    set(&mut p, "mem_v", 0.0);
    let theta = softmax(&rand_vec(K, 1.0, 2));
    let (alpha, _) = memory_attention_once(&p, &rand_vec(H, 0.9, 1), &theta);
    assert!(alpha.iter().all(|a| (a - 0.25).abs() < 1e-15));
}

#[test]
fn memory_candidate_is_weighted_row_sum() {
    let p = random_params(CellKind::Hcrnn2, D, H, 3, 5);
    let theta = softmax(&rand_vec(3, 1.0, 9));
    let h = rand_vec(H, 0.9, 10);
    let (alpha, c) = memory_attention_once(&p, &h, &theta);
    let (alpha_ref, c_ref) = oracle::memory_attention(&h, &theta, &p);
    let m = p.get("memory").unwrap();
    for j in 0..D {
        let direct: f64 = (0..3).map(|k| alpha[k] * m.row(k)[j]).sum();
        assert!((c[j] - direct).abs() < 1e-14);
        assert!((c[j] - c_ref[j]).abs() < 1e-13);
    }
    for (a, b) in alpha.iter().zip(&alpha_ref) {
        assert!((a - b).abs() < 1e-13);
    }
}

fn local_once(p: &Params, c_prev: &[f64], c_tilde: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let x = row(&mut g, &rand_vec(D, 1.0, 1));
    let h = row(&mut g, &rand_vec(H, 0.9, 2));
    let cp = row(&mut g, c_prev);
    let ct = row(&mut g, c_tilde);
    let (gate, c) = hcrnn_local_update(&mut g, &w, x, h, cp, ct).unwrap();
    (vals(&g, gate), vals(&g, c))
}

#[test]
fn local_gate_limits() {
    let (cp, ct) = (rand_vec(D, 1.0, 3), rand_vec(D, 1.0, 4));
    let mut p = random_params(CellKind::Hcrnn1, D, H, K, 6);
    set(&mut p, "b_l", -60.0);
    let (_, c) = local_once(&p, &cp, &ct);
    assert!(c.iter().zip(&cp).all(|(a, b)| (a - b).abs() < 1e-12));
    set(&mut p, "b_l", 60.0);
    let (_, c) = local_once(&p, &cp, &ct);
    assert!(c.iter().zip(&ct).all(|(a, b)| (a - b).abs() < 1e-12));
    zero_all(&mut p);
    let (gate, c) = local_once(&p, &cp, &ct);
    assert!(gate.iter().all(|v| *v == 0.5));
    assert!(c.iter().zip(cp.iter().zip(&ct)).all(|(a, (x, y))| (a - 0.5 * (x + y)).abs() < 1e-15));
}

// ---- temporary update, reset and drift gates -----------------------------------

#[test]
fn hcrnn1_zero_weights_halves_state() {
    let mut p = random_params(CellKind::Hcrnn1, D, H, K, 7);
    zero_all(&mut p);
    let v = rand_vec(H, 0.9, 11);
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let x = row(&mut g, &rand_vec(D, 1.0, 12));
    let h = row(&mut g, &v);
    let c = row(&mut g, &rand_vec(D, 1.0, 13));
    let (_, _, out) = hcrnn1_temporal_update(&mut g, &w, x, h, c).unwrap();
    assert!(vals(&g, out).iter().zip(&v).all(|(a, b)| (a - 0.5 * b).abs() < 1e-15));
}

#[test]
fn hcrnn1_closed_reset_ignores_history() {
    let mut p = random_params(CellKind::Hcrnn1, D, H, K, 8);
    set(&mut p, "b_r", -60.0);
    set(&mut p, "b_z", 60.0);
    let run = |hv: &[f64]| {
        let mut g = Graph::new();
        let w = p.bind(&mut g, false);
        let x = row(&mut g, &rand_vec(D, 1.0, 14));
        let h = row(&mut g, hv);
        let c = row(&mut g, &rand_vec(D, 1.0, 15));
        let (_, _, out) = hcrnn1_temporal_update(&mut g, &w, x, h, c).unwrap();
        vals(&g, out)
    };
    let a = run(&rand_vec(H, 0.9, 16));
    let b = run(&rand_vec(H, 0.9, 17));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

fn reset2_once(p: &Params, x: &[f64], h: &[f64], c: &[f64]) -> crate::error::Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let (xv, hv, cv) = (row(&mut g, x), row(&mut g, h), row(&mut g, c));
    let r = hcrnn2_reset(&mut g, &w, xv, hv, cv)?;
    Ok(vals(&g, r))
}

#[test]
fn hcrnn2_reset_without_agreement_term() {
    let mut p = random_params(CellKind::Hcrnn2, D, H, K, 9);
    let (x, h, c) = (rand_vec(D, 1.0, 1), rand_vec(H, 0.9, 2), rand_vec(D, 1.0, 3));
    let plain = oracle::gate(&[(&x, p.get("w_xr").unwrap()), (&h, p.get("w_hr").unwrap())], p.get("b_r").unwrap());
    let with_term = reset2_once(&p, &x, &h, &c).unwrap();
    assert!(with_term.iter().zip(&plain).any(|(a, b)| (a - b).abs() > 1e-6));
    // orthogonal contexts
    let zeros = vec![0.0; D];
    let r = reset2_once(&p, &x, &h, &zeros).unwrap();
    assert!(r.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-15));
    set(&mut p, "w_d", 0.0);
    let r = reset2_once(&p, &x, &h, &c).unwrap();
    assert!(r.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn negative_drift_weight_is_an_invariant_violation() {
    for kind in [CellKind::Hcrnn2, CellKind::Hcrnn3] {
        let mut p = random_params(kind, D, H, K, 10);
        p.get_mut("w_d").unwrap().data_mut()[3] = -0.01;
        let mut g = Graph::new();
        let w = p.bind(&mut g, false);
        let (x, h, c) = (row(&mut g, &[0.1; D]), row(&mut g, &[0.1; H]), row(&mut g, &[0.1; D]));
        let err = if kind == CellKind::Hcrnn2 {
            hcrnn2_reset(&mut g, &w, x, h, c).err()
        } else {
            hcrnn3_drift_step(&mut g, &w, x, h, c).err()
        };
        assert!(matches!(err, Some(Error::Invariant(_))), "{kind}");
    }
}

#[test]
fn hcrnn3_neutral_drift_gate() {
    let mut p = random_params(CellKind::Hcrnn3, D, H, K, 11);
    set(&mut p, "w_d", 0.0);
    set(&mut p, "b_d", 0.0);
    let mut g = Graph::new();
    let w = p.bind(&mut g, false);
    let (x, h, c) = (row(&mut g, &rand_vec(D, 1.0, 1)), row(&mut g, &rand_vec(H, 0.9, 2)), row(&mut g, &rand_vec(D, 1.0, 3)));
    let d = hcrnn3_drift_step(&mut g, &w, x, h, c).unwrap();
    assert!(vals(&g, d.drift).iter().all(|v| *v == 0.5));
}

#[test]
fn hierarchical_steps_match_oracle() {
    for kind in [CellKind::Hcrnn1, CellKind::Hcrnn2, CellKind::Hcrnn3] {
        for seed in 0..4 {
            let p = random_params(kind, D, H, K, seed);
            let theta = softmax(&rand_vec(K, 1.5, seed + 40));
            let (x, h, c) = (rand_vec(D, 1.0, seed + 1), rand_vec(H, 0.9, seed + 2), rand_vec(D, 1.0, seed + 3));
            let mut g = Graph::new();
            let w = p.bind(&mut g, false);
            let th = row(&mut g, &theta);
            let mem = MemoryInputs::new(&mut g, &w, th).unwrap();
            let xv = row(&mut g, &x);
            let st = StateVars { h: row(&mut g, &h), c: Some(row(&mut g, &c)) };
            let (next, _) = step(kind, &mut g, &w, xv, &st, Some(&mem)).unwrap();
            let (h_ref, c_ref) = oracle::hcrnn(hcrnn_version(kind), &x, &h, &c, &theta, &p);
            for (a, b) in vals(&g, next.h).iter().zip(&h_ref).chain(vals(&g, next.c.unwrap()).iter().zip(&c_ref)) {
                assert!((a - b).abs() < 1e-13, "{kind} seed {seed}");
            }
        }
    }
}

#[test]
fn product_gate_is_below_agreement_reset() {
    // σ(a)σ(s) < σ(a + s): with b_d = 0 the HCRNN-3 retention sits strictly
    // below the HCRNN-2 reset built from the same weights.
    let mut p3 = random_params(CellKind::Hcrnn3, D, H, K, 12);
    set(&mut p3, "b_d", 0.0);
    let mut p2 = Params::new();
    for (n, t) in p3.iter() {
        if n != "b_d" {
            p2.insert(n, t.clone());
        }
    }
    for seed in 0..20 {
        let (x, h, c) = (rand_vec(D, 1.0, seed), rand_vec(H, 0.9, seed + 100), rand_vec(D, 1.0, seed + 200));
        let r2 = reset2_once(&p2, &x, &h, &c).unwrap();
        let mut g = Graph::new();
        let w = p3.bind(&mut g, false);
        let (xv, hv, cv) = (row(&mut g, &x), row(&mut g, &h), row(&mut g, &c));
        let d = hcrnn3_drift_step(&mut g, &w, xv, hv, cv).unwrap();
        let (r3, gd) = (vals(&g, d.reset), vals(&g, d.drift));
        for k in 0..H {
            let eff = r3[k] * gd[k];
            assert!(eff < r2[k]);
            assert!(eff <= r3[k].min(gd[k]));
        }
    }
}

// ---- projection ---------------------------------------------------------------

#[test]
fn projection_clamps_negatives() {
    let mut w = Tensor::matrix(2, 2, vec![-1.0, 2.0, 0.0, -3.0]).unwrap();
    project_nonnegative(&mut w);
    assert_eq!(w.data(), &[0.0, 2.0, 0.0, 0.0]);
    let before = w.clone();
    project_nonnegative(&mut w);
    assert_eq!(w, before);
}

// ---- unrolling -----------------------------------------------------------------

fn global_for(p: &Params, k: usize, seed: u64) -> Option<GlobalContext> {
    let theta = softmax(&rand_vec(k, 1.0, seed));
    Some(GlobalContext {
        memory: p.get("memory").ok()?.clone(),
        theta_tilde: theta.clone(),
        theta,
        mu: vec![0.0; k],
        log_sigma: vec![0.0; k],
    })
}

#[test]
fn length_one_unroll_is_one_step() {
    for kind in CellKind::ALL {
        let p = random_params(kind, D, H, K, 13);
        let global = global_for(&p, K, 1);
        let (states, traces) = unroll_sequence(&[4], kind, global.as_ref(), &p).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(traces.len(), 1);
        let x = p.get("embedding").unwrap().row(4).to_vec();
        let expect_h = match kind {
            CellKind::Gru => oracle::gru(&x, &[0.0; H], &p),
            CellKind::Lstm => oracle::lstm(&x, &[0.0; H], &[0.0; H], &p).0,
            _ => oracle::hcrnn(hcrnn_version(kind), &x, &[0.0; H], &[0.0; D], &global.as_ref().unwrap().theta, &p).0,
        };
        for (a, b) in states[0].h.iter().zip(&expect_h) {
            assert!((a - b).abs() < 1e-13, "{kind}");
        }
    }
}

#[test]
fn out_of_vocabulary_item_is_rejected() {
    let p = random_params(CellKind::Gru, D, H, K, 14);
    assert!(matches!(unroll_sequence(&[1, 9], CellKind::Gru, None, &p), Err(Error::Input(_))));
    assert!(matches!(unroll_sequence(&[], CellKind::Gru, None, &p), Err(Error::Input(_))));
}

#[test]
fn degenerate_memory_pins_local_context() {
    let mut p = random_params(CellKind::Hcrnn1, D, H, 1, 15);
    set(&mut p, "b_l", 80.0);
    let global = global_for(&p, 1, 2).unwrap();
    let (states, _) = unroll_sequence(&[1, 5, 2, 2, 7], CellKind::Hcrnn1, Some(&global), &p).unwrap();
    let m = p.get("memory").unwrap().data();
    for s in &states {
        let c = s.c.as_ref().unwrap();
        assert!(c.iter().zip(m).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn repeated_item_settles_local_context_first() {
    let mut init = ChaCha8Rng::seed_from_u64(16);
    let mut p = Params::new();
    for spec in CellKind::Hcrnn3.param_specs(D, H, K) {
        p.insert(spec.name, spec.init.sample(&spec.shape, &mut init));
    }
    p.insert("embedding", Tensor::uniform(&[9, D], 1.0, &mut init));
    let global = global_for(&p, K, 3).unwrap();
    let items = vec![3usize; 30];
    let (_, traces) = unroll_sequence(&items, CellKind::Hcrnn3, Some(&global), &p).unwrap();
    let dc: Vec<f64> = traces.iter().map(|t| t.delta_c.unwrap()).collect();
    let dh: Vec<f64> = traces.iter().map(|t| t.delta_h).collect();
    assert!(dc[29] < dc[1] && dc[29] < 1e-3, "{dc:?}");
    let mean_dh: f64 = dh[1..].iter().sum::<f64>() / 29.0;
    let mean_dc: f64 = dc[1..].iter().sum::<f64>() / 29.0;
    assert!(mean_dh > mean_dc, "dh {mean_dh} dc {mean_dc}");
}

/// Scalar loss of a five-step unroll from inputs and every cell parameter.
fn unroll_loss(kind: CellKind, names: &[String], g: &mut Graph, vars: &[Var], theta: &[f64]) -> crate::error::Result<Var> {
    let mut bound = Params::new().bind(g, false);
    for (n, &v) in names.iter().zip(vars) {
        bound = bound.with(n, v);
    }
    let batch = 2;
    let xs = (0..5)
        .map(|t| g.gather_rows(bound.get("embedding")?, &[t % 9, (t * 4 + 1) % 9]))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let mem = if kind.is_hierarchical() {
        let th = g.constant(Tensor::new(&[batch, K], theta.to_vec())?);
        Some(MemoryInputs::new(g, &bound, th)?)
    } else {
        None
    };
    let out = unroll(kind, g, &bound, &xs, 6, mem.as_ref())?;
    let w = g.constant(Tensor::new(&[batch, 6], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?);
    let mut total = None;
    for s in &out.states {
        let p = g.mul(s.h, w)?;
        let mut term = g.sum(p)?;
        if let Some(c) = s.c {
            let sq = g.mul(c, c)?;
            let cs = g.sum(sq)?;
            let cs = g.scale(cs, 0.3)?;
            term = g.add(term, cs)?;
        }
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.unwrap())
}

#[test]
fn five_step_unroll_gradients_match_finite_differences() {
    for kind in CellKind::ALL {
        let p = random_params(kind, 6, 6, K, 17);
        let theta: Vec<f64> = softmax(&rand_vec(K, 1.0, 1)).into_iter().chain(softmax(&rand_vec(K, 1.0, 2))).collect();
        let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
        let tensors: Vec<Tensor> = p.iter().map(|(_, t)| t.clone()).collect();
        let errs = check_gradients(|g, v| unroll_loss(kind, &names, g, v, &theta), &tensors, 1e-5).unwrap();
        for (n, e) in names.iter().zip(&errs) {
            assert!(*e < 1e-4, "{kind} {n}: {e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gates_attention_and_local_context_invariants(seed in any::<u64>(), kind_idx in 0usize..5, len in 1usize..12) {
        let kind = CellKind::ALL[kind_idx];
        let p = random_params(kind, D, H, K, seed);
        let global = global_for(&p, K, seed ^ 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let items: Vec<usize> = (0..len).map(|_| rand::Rng::gen_range(&mut rng, 0..9)).collect();
        let (states, traces) = unroll_sequence(&items, kind, global.as_ref(), &p).unwrap();
        for t in &traces {
            for gate in t.gates() {
                prop_assert!(gate.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
            if let Some(a) = &t.memory_attention {
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        if kind != CellKind::Lstm {
            for s in &states {
                prop_assert!(s.h.iter().all(|v| v.abs() < 1.0));
            }
        }
        if kind.is_hierarchical() {
            // c_t between c_{t-1} and c̃_t coordinate-wise; c̃ is a convex
            // combination of memory rows, so c_t stays inside their box
            let m = p.get("memory").unwrap();
            for s in &states {
                for (j, v) in s.c.as_ref().unwrap().iter().enumerate() {
                    let col: Vec<f64> = (0..K).map(|k| m.row(k)[j]).collect();
                    let lo = col.iter().cloned().fold(0.0, f64::min);
                    let hi = col.iter().cloned().fold(0.0, f64::max);
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn local_update_is_convex(seed in any::<u64>()) {
        let p = random_params(CellKind::Hcrnn1, D, H, K, seed);
        let (cp, ct) = (rand_vec(D, 2.0, seed ^ 3), rand_vec(D, 2.0, seed ^ 4));
        let (_, c) = local_once(&p, &cp, &ct);
        for j in 0..D {
            prop_assert!(c[j] >= cp[j].min(ct[j]) - 1e-15 && c[j] <= cp[j].max(ct[j]) + 1e-15);
        }
    }

    #[test]
    fn agreement_reset_is_monotone(seed in any::<u64>(), coord in 0usize..D, delta in 0.01f64..2.0) {
        let p = random_params(CellKind::Hcrnn2, D, H, K, seed);
        let (x, h) = (rand_vec(D, 1.0, seed ^ 5), rand_vec(H, 0.9, seed ^ 6));
        let mut c = rand_vec(D, 1.0, seed ^ 7);
        // scaling c_j moves (x ⊙ c)_j by x_j δ; push it upward
        let base = reset2_once(&p, &x, &h, &c).unwrap();
        if x[coord].abs() > 1e-6 {
            c[coord] += delta * x[coord].signum();
            let bumped = reset2_once(&p, &x, &h, &c).unwrap();
            for k in 0..H {
                prop_assert!(bumped[k] >= base[k]);
            }
        }
    }

    #[test]
    fn projection_is_idempotent(data in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let mut w = Tensor::vector(data);
        project_nonnegative(&mut w);
        prop_assert!(w.data().iter().all(|v| *v >= 0.0));
        let once = w.clone();
        project_nonnegative(&mut w);
        prop_assert_eq!(w, once);
    }
}
