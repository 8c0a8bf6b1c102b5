//! Tape gradients and compander chain rules against central differences.

use wcomp::compander::{chain_backward, wrap_model, CompandedModel, ReparamPolicy};
use wcomp::nn::{forward, Architecture, ForwardOptions, InitScheme, ParamRole};
use wcomp::reparam::{weight_norm_materialize, AbScope, ReparamKind, ReparamParams, ReparamSpec};
use wcomp::rng::{Purpose, Stream};
use wcomp::Tensor;

const H: f64 = 1e-6;

fn batch(rng: &mut Stream, shape: &[usize], classes: usize) -> (Tensor, Vec<usize>) {
    let len: usize = shape.iter().product();
    let x = (0..len).map(|_| rng.normal()).collect();
    let y = (0..shape[0]).map(|_| rng.below(classes)).collect();
    (Tensor::new(shape.to_vec(), x).unwrap(), y)
}

fn loss(arch: &Architecture, params: &[Tensor], x: &Tensor, y: &[usize]) -> f64 {
    let refs: Vec<&Tensor> = params.iter().collect();
    let p = forward(arch, &refs, &arch.initial_buffers(), x, Some(y), ForwardOptions::train()).unwrap();
    p.tape.value(p.loss.unwrap()).data()[0]
}

fn assert_close(what: &str, analytic: f64, numeric: f64) {
    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
    assert!(err < 1e-5, "{what}: analytic {analytic}, numeric {numeric}, rel err {err:.2e}");
}

/// Checks up to `per_param` random entries of every parameter and input.
fn check_network(arch: &Architecture, input_shape: &[usize], classes: usize, seed: u64, per_param: usize) {
    let mut rng = Stream::new(seed, Purpose::Probe, 0);
    let params = InitScheme::default().init_params::<f64>(arch, seed).unwrap();
    // Perturb BN affine parameters and biases away from their neutral start.
    let params: Vec<Tensor> = params
        .into_iter()
        .map(|mut p| {
            p.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
            p
        })
        .collect();
    let (x, y) = batch(&mut rng, input_shape, classes);
    let refs: Vec<&Tensor> = params.iter().collect();
    let opts = ForwardOptions {
        input_grad: true,
        ..ForwardOptions::train()
    };
    let pass = forward(arch, &refs, &arch.initial_buffers(), &x, Some(&y), opts).unwrap();
    let grads = pass.tape.backward(pass.loss.unwrap()).unwrap();

    for (i, &var) in pass.params.iter().enumerate() {
        let g = grads.wrt(var);
        for _ in 0..per_param {
            let j = rng.below(g.len());
            let at = |d: f64| {
                let mut q = params.clone();
                q[i].data_mut()[j] += d;
                loss(arch, &q, &x, &y)
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            assert_close(&format!("param {i}[{j}]"), g.data()[j], fd);
        }
    }
    let gx = grads.wrt(pass.input);
    for _ in 0..per_param {
        let j = rng.below(gx.len());
        let at = |d: f64| {
            let mut x2 = x.clone();
            x2.data_mut()[j] += d;
            loss(arch, &params, &x2, &y)
        };
        assert_close(&format!("input[{j}]"), gx.data()[j], (at(H) - at(-H)) / (2.0 * H));
    }
}

#[test]
fn mlp_gradients() {
    check_network(&Architecture::mlp(&[7, 9, 6, 4]).unwrap(), &[5, 7], 4, 1, 12);
}

#[test]
fn cnn_gradients_with_batch_norm_and_pooling() {
    check_network(&Architecture::small_cnn(2, 6, 6, 3).unwrap(), &[4, 2, 6, 6], 3, 2, 10);
}

fn model_loss(m: &mut CompandedModel, x: &Tensor, y: &[usize], lambda: f64, on_w: bool) -> f64 {
    let p = m.forward(x, Some(y), ForwardOptions::train()).unwrap();
    let ce = p.tape.value(p.loss.unwrap()).data()[0];
    let penalty: f64 = m
        .params()
        .iter()
        .filter(|q| q.spec.role == ParamRole::Weight)
        .map(|q| {
            let t = if on_w { q.cached() } else { q.latent() };
            t.data().iter().map(|v| v * v).sum::<f64>()
        })
        .sum();
    ce + lambda * penalty
}

/// `grad_v` from [`chain_backward`] against differences of the penalized loss.
fn check_chain(spec: ReparamSpec, seed: u64) {
    let arch = Architecture::mlp(&[12, 8, 3]).unwrap();
    let lambda = 0.05;
    let on_w = spec.params.mode == wcomp::reparam::AbMode::Fixed;
    let mut m = wrap_model::<f64>(&arch, &ReparamPolicy::default(), &spec, &InitScheme::default(), seed).unwrap();
    let mut rng = Stream::new(seed, Purpose::Probe, 1);
    let (x, y) = batch(&mut rng, &[6, 12], 3);
    let p = m.forward(&x, Some(&y), ForwardOptions::train()).unwrap();
    let grads = p.tape.backward(p.loss.unwrap()).unwrap();
    for i in 0..m.params().len() {
        let gw = grads.wrt(p.params[i]);
        let lam = if m.params()[i].spec.role == ParamRole::Weight { lambda } else { 0.0 };
        let chain = chain_backward(&m.params()[i], m.ab(), &gw, lam).unwrap();
        for _ in 0..6 {
            let j = rng.below(gw.len());
            let at = |d: f64| {
                let mut q = m.clone();
                q.param_mut(i).latent_mut().data_mut()[j] += d;
                model_loss(&mut q, &x, &y, lambda, on_w)
            };
            let fd = (at(H) - at(-H)) / (2.0 * H);
            assert_close(&format!("{} v{i}[{j}]", spec.kind), chain.grad_v.data()[j], fd);
        }
        if let Some(gain) = m.params()[i].gain() {
            let gg = chain.grad_gain.expect("weight-norm gain gradient");
            let v = m.params()[i].latent().clone();
            let w: Vec<Tensor> = (0..m.params().len()).map(|k| m.weight(k).clone()).collect();
            for r in 0..gain.len() {
                let at = |d: f64| {
                    let mut g = gain.data().to_vec();
                    g[r] += d;
                    let mut w2 = w.clone();
                    w2[i] = weight_norm_materialize(&v, &g).unwrap();
                    let sq: f64 = w2
                        .iter()
                        .zip(arch.param_specs())
                        .filter(|(_, s)| s.role == ParamRole::Weight)
                        .map(|(t, _)| t.data().iter().map(|z| z * z).sum::<f64>())
                        .sum();
                    loss(&arch, &w2, &x, &y) + lambda * sq
                };
                assert_close(&format!("gain {i}[{r}]"), gg.data()[r], (at(H) - at(-H)) / (2.0 * H));
            }
        }
    }
}

#[test]
fn chain_rule_arctan_fixed() {
    check_chain(ReparamSpec::arctan(1.0, 0.6), 3);
}

#[test]
fn chain_rule_arctan_learnable_decays_latent() {
    check_chain(ReparamSpec::learnable_arctan(1.0, 0.7, AbScope::Global), 4);
}

#[test]
fn chain_rule_other_kinds() {
    let p = ReparamParams::fixed(1.0, 1.0);
    for kind in [ReparamKind::Arcsinh, ReparamKind::Erf, ReparamKind::WeightNorm, ReparamKind::Identity] {
        check_chain(ReparamSpec::new(kind, p), 5);
    }
    check_chain(ReparamSpec::new(ReparamKind::Powerprop { alpha: 2.0 }, p), 5);
}
