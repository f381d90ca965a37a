//! Central finite-difference verification of analytic gradients.
//!
//! A check takes a store of `f64` inputs and a closure that builds a scalar
//! on a fresh [`Graph`]. Every trainable element is perturbed by `±h` and
//! the symmetric difference quotient is compared with the gradient from one
//! backward sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::session::{Mode, Session};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::training::{batch_loss_graph, PROB_FLOOR};
use crate::transducer::{unroll, Decoder, Encoder, TargetBatch, EOS, PAD, SOS, SPECIALS};
use crate::vision::FeatureSequence;

/// Smallest denominator used when forming relative errors, so that
/// gradients that are zero up to rounding compare on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} {} elements  max rel err {:.3e}  {}",
            self.name,
            self.checked,
            self.max_rel_err,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Checks `∂f/∂θ` for every trainable element θ of `store`.
pub fn check<F>(name: &str, store: &ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut work = store.clone();
    work.zero_grads();
    work.accumulate(&g, &grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = f(&mut g, s)?;
        Ok(g.data(l)[0])
    };

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let mut probe = store.clone();
    for id in store.trainable_ids() {
        let analytic = work.get(id).grad.clone().unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let rel = relative_error(a, numeric);
            checked += 1;
            if rel > max_rel || !rel.is_finite() {
                max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(GradCheckReport { name: name.to_string(), checked, max_rel_err: max_rel, worst, passed: max_rel < opts.tolerance })
}

fn random_store(rng: &mut ChaCha8Rng, spec: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in spec {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.add(*name, Tensor::new(shape.to_vec(), data).expect("shape"), true);
    }
    s
}

/// Reduces an op output to a scalar through fixed random weights, so every
/// output element influences the checked value.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ab_cdef);
    let w = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = g.mul_const(out, w)?;
    Ok(g.sum(p))
}

fn bind(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> Var {
    g.param(s, s.id(name).expect("declared input"))
}

/// Finite-difference checks of every differentiable tape operation on
/// random inputs drawn from `seed`.
pub fn op_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let s = random_store(&mut rng, &[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5]), ("y", &[3, 5])]);
    out.push(check("affine/matmul/add/sub/mul/scale/sum", &s, |g, s| {
        let (x, w, b, y) = (bind(g, s, "x"), bind(g, s, "w"), bind(g, s, "b"), bind(g, s, "y"));
        let a = g.affine(x, w, b)?;
        let m = g.matmul(x, w)?;
        let p = g.mul(a, m)?;
        let q = g.sub(p, y)?;
        let r = g.add(q, a)?;
        let r = g.scale(r, 0.7);
        let r = g.add_row(r, b)?;
        let sq = g.square(r);
        let t = g.sum(sq);
        let u = project(g, r, seed)?;
        g.add(t, u)
    }, opts)?);

    let s = random_store(&mut rng, &[("x", &[2, 2, 5, 6]), ("k", &[3, 2, 3, 3])]);
    out.push(check("conv2d", &s, |g, s| {
        let (x, k) = (bind(g, s, "x"), bind(g, s, "k"));
        let same = g.conv2d(x, k, (1, 1))?;
        let valid = g.conv2d(x, k, (0, 0))?;
        let a = project(g, same, seed + 1)?;
        let b = project(g, valid, seed + 2)?;
        g.add(a, b)
    }, opts)?);

    let s = random_store(&mut rng, &[("x", &[2, 3, 4, 6])]);
    out.push(check("maxpool2d", &s, |g, s| {
        let x = bind(g, s, "x");
        let y = g.maxpool2d(x, 2, 2)?;
        let y = g.maxpool2d(y, 2, 1)?;
        project(g, y, seed + 3)
    }, opts)?);

    let s = random_store(&mut rng, &[("x", &[2, 3, 2, 4]), ("gamma", &[3]), ("beta", &[3])]);
    let mask: Vec<bool> = (0..8).map(|i| i % 4 != 3).collect();
    out.push(check("batch_norm (train, masked)/mask_columns", &s, |g, s| {
        let (x, ga, be) = (bind(g, s, "x"), bind(g, s, "gamma"), bind(g, s, "beta"));
        let y = g.batch_norm_train(x, ga, be, 1e-5, Some(&mask))?.out;
        let y = g.mask_columns(y, &mask)?;
        project(g, y, seed + 4)
    }, opts)?);
    out.push(check("batch_norm (infer)", &s, |g, s| {
        let (x, ga, be) = (bind(g, s, "x"), bind(g, s, "gamma"), bind(g, s, "beta"));
        let y = g.batch_norm_infer(x, ga, be, &[0.1, 0.2, -0.3], &[1.5, 0.7, 2.0], 1e-5, None)?;
        project(g, y, seed + 5)
    }, opts)?);

    let s = random_store(&mut rng, &[("x", &[3, 6]), ("gain", &[6]), ("bias", &[6])]);
    out.push(check("layer_norm", &s, |g, s| {
        let (x, ga, bi) = (bind(g, s, "x"), bind(g, s, "gain"), bind(g, s, "bias"));
        let y = g.layer_norm(x, ga, bi, 1e-5)?;
        project(g, y, seed + 6)
    }, opts)?);

    let s = random_store(&mut rng, &[("x", &[3, 5])]);
    let valid: Vec<bool> = (0..15).map(|i| i % 5 != 1).collect();
    out.push(check("softmax/log_softmax/masked_softmax", &s, |g, s| {
        let x = bind(g, s, "x");
        let a = g.softmax(x)?;
        let b = g.log_softmax(x)?;
        let c = g.masked_softmax(x, &valid)?;
        let pa = project(g, a, seed + 7)?;
        let pb = project(g, b, seed + 8)?;
        let pc = project(g, c, seed + 9)?;
        let ab = g.add(pa, pb)?;
        g.add(ab, pc)
    }, opts)?);
    out.push(check("leaky_relu/sigmoid/tanh/dropout", &s, |g, s| {
        let x = bind(g, s, "x");
        let a = g.leaky_relu(x, 0.01);
        let b = g.sigmoid(x);
        let c = g.tanh(x);
        let ab = g.mul(a, b)?;
        let y = g.add(ab, c)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
        let y = g.dropout(y, 0.3, true, &mut drop_rng)?;
        project(g, y, seed + 10)
    }, opts)?);

    let s = random_store(&mut rng, &[("a", &[2, 4, 3]), ("v", &[2, 3]), ("alpha", &[2, 4]), ("shared", &[1, 4, 3])]);
    out.push(check("add_broadcast_steps/weighted_sum", &s, |g, s| {
        let (a, v, al, sh) = (bind(g, s, "a"), bind(g, s, "v"), bind(g, s, "alpha"), bind(g, s, "shared"));
        let e = g.add_broadcast_steps(a, v)?;
        let e = g.tanh(e);
        let ws = g.weighted_sum(al, e)?;
        let eb = g.add_broadcast_steps(sh, v)?;
        let wb = g.weighted_sum(al, sh)?;
        let p1 = project(g, ws, seed + 11)?;
        let p2 = project(g, eb, seed + 12)?;
        let p3 = project(g, wb, seed + 13)?;
        let p = g.add(p1, p2)?;
        g.add(p, p3)
    }, opts)?);

    let s = random_store(&mut rng, &[("table", &[5, 3]), ("x", &[4, 3])]);
    out.push(check("embedding/concat/slice/gather/blend", &s, |g, s| {
        let (tb, x) = (bind(g, s, "table"), bind(g, s, "x"));
        let e = g.embedding(tb, &[1, 3, 1, 0])?;
        let c = g.concat_cols(&[e, x])?;
        let sl = g.slice_cols(c, 1, 4)?;
        let ga = g.gather_rows(sl, &[3, 0, 0])?;
        let bl = g.blend_rows(e, x, &[true, false, true, false])?;
        let a = project(g, ga, seed + 14)?;
        let b = project(g, bl, seed + 15)?;
        g.sub(a, b)
    }, opts)?);

    let s = random_store(&mut rng, &[("x", &[2, 3, 1, 4]), ("y", &[2, 3])]);
    out.push(check("map_to_sequence/step_of/stack_steps/reshape", &s, |g, s| {
        let (x, y) = (bind(g, s, "x"), bind(g, s, "y"));
        let seq = g.map_to_sequence(x)?;
        let a = g.step_of(seq, 2)?;
        let b = g.step_of(seq, 0)?;
        let st = g.stack_steps(&[a, y, b])?;
        let st = g.reshape(st, &[6, 3])?;
        project(g, st, seed + 16)
    }, opts)?);

    let s = random_store(&mut rng, &[("logits", &[4, 5])]);
    let targets = [Some(1), None, Some(4), Some(0)];
    for gamma in [0.0, 2.0] {
        out.push(check(&format!("focal_loss gamma={gamma}"), &s, |g, s| {
            let z = bind(g, s, "logits");
            g.focal_loss(z, &targets, gamma, 0.5, PROB_FLOOR)
        }, opts)?);
    }
    Ok(out)
}

/// Sizes of the reduced recognizer used by [`composite`].
#[derive(Debug, Clone, Copy)]
pub struct CompositeDims {
    pub batch: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for CompositeDims {
    fn default() -> Self {
        Self { batch: 2, frames: 4, feature_dim: 5, hidden: 8, classes: 6 }
    }
}

/// End-to-end check of features → encoder → attention → decoder → focal
/// loss. The second item has a masked last frame and a shorter target, so
/// masking and loss masking are exercised as well.
pub fn composite(seed: u64, dims: CompositeDims, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let CompositeDims { batch, frames, feature_dim, hidden, classes } = dims;
    let mut store = random_store(&mut rng, &[("input.features", &[batch, frames, feature_dim])]);
    let encoder = Encoder::new(&mut store, feature_dim, hidden, 2, 0.0, &mut rng);
    let decoder = Decoder::new(&mut store, classes, hidden, hidden, 2 * hidden, hidden, 2, 0.0, &mut rng);
    // Move LN gains/biases and the forget bias away from their exact
    // initial values so their gradients are generic.
    for id in store.trainable_ids() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let mask: Vec<bool> = (0..batch * frames).map(|i| i / frames == 0 || i % frames + 1 < frames).collect();
    let chars = classes - SPECIALS;
    let rows: Vec<Vec<usize>> = (0..batch)
        .map(|b| {
            let len = if b == 0 { 2 } else { 1 };
            let mut r = vec![SOS];
            r.extend((0..len).map(|i| SPECIALS + (b + i) % chars.max(1)));
            r.push(EOS);
            r.resize(4, PAD);
            r
        })
        .collect();
    let targets = TargetBatch::from_rows(rows)?;
    let x_id = store.id("input.features").expect("declared");
    check("encode→attend→decoder_step→focal_loss", &store, |g, s| {
        let mut sess = Session::with_graph(std::mem::take(g), s, Mode::Infer, 0);
        let vectors = sess.p(x_id);
        let seq = FeatureSequence { vectors, mask: mask.clone(), batch, steps: frames, dim: feature_dim };
        let result = (|| {
            let enc = encoder.encode(&mut sess, &seq)?;
            let logits = unroll(&decoder, &mut sess, &enc, &targets)?;
            batch_loss_graph(&mut sess, logits, &targets, 2.0)
        })();
        *g = sess.graph;
        result
    }, opts)
}

/// The full suite: every op plus the composite path, for each seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for seed in seeds {
        out.extend(op_suite(seed, opts)?);
        let mut r = composite(seed, CompositeDims::default(), opts)?;
        r.name = format!("{} (seed {seed})", r.name);
        out.push(r);
    }
    Ok(out)
}
