//! Finite-difference verification of every layer's backward pass and of a
//! toy fusion network, all in double precision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2, maxpool2_backward,
    relu, relu_backward, softmax, softmax_backward,
};
use super::loss::{one_hot, LossKind};
use super::model::{BranchConfig, FusionConfig, Model, ModelConfig, Sample, StreamMode};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Initial finite-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared absolutely.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Perturbs one analytic gradient component; the suite must then fail.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-6,
            tolerance: 1e-5,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose probes crossed a ReLU kink or changed a pooling
    /// winner, where the function is not differentiable.
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl CheckResult {
    /// Within tolerance, with at most a tenth of the coordinates skipped.
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance && self.skipped * 10 <= self.checked + self.skipped
    }
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed(self.tolerance))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let verdict = if r.passed(self.tolerance) {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{:<40} {:>6} {:>4} {:>12.3e} {verdict}\n",
                r.name, r.checked, r.skipped, r.max_rel_err
            ));
        }
        out.push_str(&format!(
            "{} (tolerance {:e})\n",
            if self.passed() {
                "all checks passed"
            } else {
                "gradient check FAILED"
            },
            self.tolerance
        ));
        out
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` with central differences of `f` around `x`.
fn compare(
    name: impl Into<String>,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
    mut f: impl FnMut(&[f64]) -> f64,
) -> CheckResult {
    compare_piecewise(name, x, analytic, cfg, |p| (f(p), Vec::new()))
}

/// As `compare`, for a function that also reports its activation pattern.
/// Each coordinate uses the five-point central stencil; if a probe leaves the
/// pattern at `x` the step is halved, and the coordinate is skipped only when
/// no step down to `step / 2^13` stays inside one smooth region.
fn compare_piecewise(
    name: impl Into<String>,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
    mut f: impl FnMut(&[f64]) -> (f64, Vec<u32>),
) -> CheckResult {
    let base = f(x).1;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for i in 0..x.len() {
        let mut numeric = None;
        let mut h = cfg.step;
        for _ in 0..14 {
            let mut vals = [0.0; 4];
            let mut smooth = true;
            for (v, m) in vals.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                probe[i] = x[i] + m * h;
                let (fv, pat) = f(&probe);
                *v = fv;
                smooth &= pat == base;
            }
            probe[i] = x[i];
            if smooth {
                numeric = Some((-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * h));
                break;
            }
            h /= 2.0;
        }
        match numeric {
            Some(n) => worst = worst.max(rel_err(analytic[i], n, cfg.floor)),
            None => skipped += 1,
        }
    }
    CheckResult {
        name: name.into(),
        checked: x.len() - skipped,
        skipped,
        max_rel_err: worst,
    }
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).expect("shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_conv(
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    k: usize,
    out: &mut Vec<CheckResult>,
) -> Result<(), NnError> {
    let (c, h, w, o) = (2, 6, 5, 3);
    let xs = [c, h, w];
    let ks = [o, c, k, k];
    let x = rand_vec(c * h * w, rng);
    let kv = rand_vec(o * c * k * k, rng);
    let b = rand_vec(o, rng);
    let r = rand_vec(o * h * w, rng);
    let mut gk = Tensor::zeros(&ks);
    let mut gb = Tensor::zeros(&[o]);
    let gx = conv2d_backward(
        &t(&xs, &x),
        &t(&ks, &kv),
        &t(&[o], &b),
        &t(&[o, h, w], &r),
        &mut gk,
        &mut gb,
    )?;
    let obj = |x: &[f64], kv: &[f64], b: &[f64]| {
        dot(
            conv2d_forward(&t(&xs, x), &t(&ks, kv), &t(&[o], b))
                .expect("shape")
                .data(),
            &r,
        )
    };
    out.push(compare(
        format!("conv2d {k}x{k} input"),
        &x,
        gx.data(),
        cfg,
        |p| obj(p, &kv, &b),
    ));
    out.push(compare(
        format!("conv2d {k}x{k} kernels"),
        &kv,
        gk.data(),
        cfg,
        |p| obj(&x, p, &b),
    ));
    out.push(compare(
        format!("conv2d {k}x{k} bias"),
        &b,
        gb.data(),
        cfg,
        |p| obj(&x, &kv, p),
    ));
    Ok(())
}

fn layer_checks(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>, NnError> {
    let mut out = Vec::new();
    check_conv(cfg, rng, 3, &mut out)?;
    check_conv(cfg, rng, 1, &mut out)?;

    // Points kept away from the kink at zero.
    let x: Vec<f64> = (0..40)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let r = rand_vec(40, rng);
    let g = relu_backward(&t(&[40], &x), &t(&[40], &r));
    out.push(compare("relu", &x, g.data(), cfg, |p| {
        dot(relu(&t(&[40], p)).data(), &r)
    }));

    // Distinct values separated well beyond the step so the argmax is stable.
    let shape = [2, 5, 6];
    let mut x: Vec<f64> = (0..60).map(|i| i as f64 * 0.05).collect();
    x.shuffle(rng);
    let (y, arg) = maxpool2(&t(&shape, &x))?;
    let r = rand_vec(y.len(), rng);
    let g = maxpool2_backward(&shape, &arg, &t(y.shape(), &r));
    out.push(compare("maxpool2", &x, g.data(), cfg, |p| {
        dot(maxpool2(&t(&shape, p)).expect("shape").0.data(), &r)
    }));

    let (o, i) = (5, 7);
    let x = rand_vec(i, rng);
    let wv = rand_vec(o * i, rng);
    let b = rand_vec(o, rng);
    let r = rand_vec(o, rng);
    let mut gw = Tensor::zeros(&[o, i]);
    let mut gb = Tensor::zeros(&[o]);
    let gx = dense_backward(&x, &t(&[o, i], &wv), &r, &mut gw, &mut gb);
    let obj = |x: &[f64], wv: &[f64], b: &[f64]| {
        dot(
            &dense_forward(x, &t(&[o, i], wv), &t(&[o], b)).expect("shape"),
            &r,
        )
    };
    out.push(compare("dense input", &x, &gx, cfg, |p| obj(p, &wv, &b)));
    out.push(compare("dense weights", &wv, gw.data(), cfg, |p| {
        obj(&x, p, &b)
    }));
    out.push(compare("dense bias", &b, gb.data(), cfg, |p| {
        obj(&x, &wv, p)
    }));

    let z = rand_vec(6, rng);
    let r = rand_vec(6, rng);
    let g = softmax_backward(&softmax(&z), &r);
    out.push(compare("softmax", &z, &g, cfg, |p| dot(&softmax(p), &r)));

    for (name, kind) in [
        ("softmax+rmse", LossKind::Rmse),
        ("softmax+cross_entropy", LossKind::CrossEntropy),
    ] {
        let target = one_hot(2, 6);
        let probs = softmax(&z);
        let (_, gp) = kind.eval(&probs, &target)?;
        let g = softmax_backward(&probs, &gp);
        out.push(compare(name, &z, &g, cfg, |p| {
            kind.eval(&softmax(p), &target).expect("len").0
        }));
    }
    Ok(out)
}

/// The toy network used by the suite: two blocks of widths 2 and 3 on a
/// 12×12 input, fused, with a small two-layer head.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        branch: BranchConfig {
            block_filters: vec![2, 3],
            block_conv_counts: vec![2, 2],
            kernel: 3,
            input_rows: 12,
            input_cols: 12,
        },
        fusion: FusionConfig {
            fc_sizes: vec![8, 6],
            n_classes: 2,
        },
        mode: StreamMode::Fusion,
    }
}

fn param_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    let streams: &[&str] = match cfg.mode {
        StreamMode::Fusion => &["vowel", "consonant"],
        StreamMode::Vowel => &["vowel"],
        StreamMode::Consonant => &["consonant"],
    };
    for s in streams {
        for (b, &count) in cfg.branch.block_conv_counts.iter().enumerate() {
            for c in 0..count {
                names.push(format!("network {s} block{} conv{} kernels", b + 1, c + 1));
                names.push(format!("network {s} block{} conv{} bias", b + 1, c + 1));
            }
        }
    }
    for d in 0..=cfg.fusion.fc_sizes.len() {
        names.push(format!("network dense{} weights", d + 1));
        names.push(format!("network dense{} bias", d + 1));
    }
    names
}

fn network_checks(
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CheckResult>, NnError> {
    let mcfg = toy_config();
    let mut model = Model::<f64>::new(mcfg.clone(), cfg.seed)?;
    // Non-zero biases so every parameter receives a generic gradient.
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let (h, w) = (mcfg.branch.input_rows, mcfg.branch.input_cols);
    let samples: Vec<Sample<f64>> = (0..2)
        .map(|label| Sample {
            vowel: Some(t(&[1, h, w], &rand_vec(h * w, rng))),
            consonant: Some(t(&[1, h, w], &rand_vec(h * w, rng))),
            label,
        })
        .collect();
    let loss = LossKind::Rmse;
    let mut grads = model.zero_grads();
    for s in &samples {
        model.loss_and_grad(s, loss, &mut grads)?;
    }
    if cfg.corrupt {
        grads[0].data_mut()[0] *= 1.0 + 1e-3;
    }
    let names = param_names(&mcfg);
    let mut out = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        let base = model.params()[idx].data().to_vec();
        let analytic = grads[idx].data().to_vec();
        let mut probe_model = model.clone();
        out.push(compare_piecewise(
            name.clone(),
            &base,
            &analytic,
            cfg,
            |p| {
                probe_model.params_mut()[idx].data_mut().copy_from_slice(p);
                let mut total = 0.0;
                let mut pattern = Vec::new();
                for s in &samples {
                    let trace = probe_model.trace(s).expect("shapes");
                    let target = one_hot(s.label, probe_model.n_classes());
                    total += loss.eval(&trace.probs, &target).expect("len").0;
                    pattern.extend(trace.activation_pattern());
                }
                (total, pattern)
            },
        ));
    }
    Ok(out)
}

/// Runs every layer check and the toy network check.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = layer_checks(cfg, &mut rng)?;
    results.extend(network_checks(cfg, &mut rng)?);
    Ok(GradReport {
        results,
        tolerance: cfg.tolerance,
    })
}
