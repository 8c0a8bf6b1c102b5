//! Binding of a reparameterization to a network.
//!
//! Every included weight tensor is stored as latent values `v`; the network
//! consumes the materialized weights `w = psi(v)`. Biases and batch-norm
//! parameters are never reparameterized. Gradients with respect to `w` are
//! routed back to `v` (and to learnable `a`, `b`), and a trained model can be
//! baked into a plain [`Network`] that stores `psi(v)` directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    forward, Architecture, ForwardOptions, ForwardPass, InitScheme, Network, ParamRole,
    ParamSpec,
};
use crate::optim::Optimizer;
use crate::reparam::{
    row_norm, weight_norm_materialize, AbMode, AbScope, ReparamKind, ReparamSpec, ScalarMap,
    LEARNABLE_AB_MIN,
};
use crate::tensor::{Real, Tensor};

/// Which parameters are reparameterized. Biases and batch-norm parameters
/// are always excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReparamPolicy {
    #[serde(default = "yes")]
    pub linear: bool,
    #[serde(default = "yes")]
    pub conv: bool,
    /// Layer indices left unreparameterized.
    #[serde(default)]
    pub skip_layers: Vec<usize>,
}

fn yes() -> bool {
    true
}

impl Default for ReparamPolicy {
    fn default() -> Self {
        ReparamPolicy {
            linear: true,
            conv: true,
            skip_layers: Vec::new(),
        }
    }
}

impl ReparamPolicy {
    pub fn includes(&self, spec: &ParamSpec) -> bool {
        spec.role == ParamRole::Weight
            && !self.skip_layers.contains(&spec.layer)
            && if spec.is_conv { self.conv } else { self.linear }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Binding<T> {
    /// Stored directly, `w = v`.
    Plain,
    Elementwise { kind: ReparamKind, scope: usize },
    WeightNorm { gain: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct CompandedParam<T> {
    pub spec: ParamSpec,
    v: Tensor<T>,
    binding: Binding<T>,
    w_cache: Tensor<T>,
    dirty: bool,
}

impl<T: Real> CompandedParam<T> {
    pub fn latent(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn binding(&self) -> &Binding<T> {
        &self.binding
    }

    pub fn is_companded(&self) -> bool {
        !matches!(self.binding, Binding::Plain)
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    /// Latent values for in-place updates; marks the cache stale.
    pub fn latent_mut(&mut self) -> &mut Tensor<T> {
        self.dirty = true;
        &mut self.v
    }

    pub fn gain(&self) -> Option<&Tensor<T>> {
        match &self.binding {
            Binding::WeightNorm { gain } => Some(gain),
            _ => None,
        }
    }

    /// Cached `psi(v)`; valid only after [`materialize`].
    pub fn cached(&self) -> &Tensor<T> {
        &self.w_cache
    }
}

/// Current `(a, b)` values with their scope and gradient accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedAbState {
    pub mode: AbMode,
    pub scope: AbScope,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    /// Name of the layer owning each scope (`"global"` for coarse sharing).
    pub labels: Vec<String>,
}

impl SharedAbState {
    pub fn scopes(&self) -> usize {
        self.a.len()
    }

    pub fn map(&self, kind: ReparamKind, scope: usize) -> Result<ScalarMap> {
        ScalarMap::new(kind, self.a[scope], self.b[scope])
    }
}

/// Materializes `w = psi(v)` into the cache if stale and returns it.
pub fn materialize<'a, T: Real>(
    param: &'a mut CompandedParam<T>,
    ab: &SharedAbState,
) -> Result<&'a Tensor<T>> {
    if param.dirty {
        param.w_cache = match &param.binding {
            Binding::Plain => param.v.clone(),
            Binding::Elementwise { kind, scope } => {
                let map = ab.map(*kind, *scope)?;
                param.v.map(|x| T::from_f64(map.value(x.as_f64())))
            }
            Binding::WeightNorm { gain } => weight_norm_materialize(&param.v, gain.data())?,
        };
        param.dirty = false;
    }
    Ok(&param.w_cache)
}

/// Result of [`chain_backward`].
#[derive(Debug, Clone)]
pub struct ChainGrads<T> {
    /// Gradient for the latent weights.
    pub grad_v: Tensor<T>,
    /// Raw gradient `dL/dpsi(v)` including the weight-decay term.
    pub grad_psi_raw: Tensor<T>,
    /// Gradient of the weight-norm gains.
    pub grad_gain: Option<Tensor<T>>,
}

/// Routes `grad_w = dL/dw` to the latent weights.
///
/// With fixed hyperparameters the decay acts on `w`:
/// `raw = grad_w + 2 lambda w` and `grad_v = raw * psi'(v)`. With learnable
/// `a`, `b` the decay acts on `v` instead: `grad_v = grad_w * psi'(v) + 2 lambda v`,
/// and the same `2 lambda v` term is added to the raw gradient.
pub fn chain_backward<T: Real>(
    param: &CompandedParam<T>,
    ab: &SharedAbState,
    grad_w: &Tensor<T>,
    lambda: f64,
) -> Result<ChainGrads<T>> {
    if grad_w.shape() != param.v.shape() {
        return Err(Error::Dimension {
            layer: param.spec.name.clone(),
            detail: format!(
                "gradient {:?} for latent {:?}",
                grad_w.shape(),
                param.v.shape()
            ),
        });
    }
    let two_lambda = T::from_f64(2.0 * lambda);
    let on_v = ab.mode == AbMode::Learnable;
    let raw = if lambda == 0.0 {
        grad_w.clone()
    } else if on_v {
        grad_w.zip_map(&param.v, |g, v| g + two_lambda * v)
    } else {
        if param.dirty {
            return Err(Error::Contract(format!(
                "`{}` must be materialized before its gradient is routed",
                param.spec.name
            )));
        }
        grad_w.zip_map(&param.w_cache, |g, w| g + two_lambda * w)
    };
    match &param.binding {
        Binding::Plain => Ok(ChainGrads {
            grad_v: raw.clone(),
            grad_psi_raw: raw,
            grad_gain: None,
        }),
        Binding::Elementwise { kind, scope } => {
            let map = ab.map(*kind, *scope)?;
            let prime = |v: T| T::from_f64(map.derivative(v.as_f64()));
            let grad_v = if on_v && lambda != 0.0 {
                let data = grad_w
                    .data()
                    .iter()
                    .zip(param.v.data())
                    .map(|(&g, &v)| g * prime(v) + two_lambda * v)
                    .collect();
                Tensor::new(param.v.shape().to_vec(), data)?
            } else {
                raw.zip_map(&param.v, |g, v| g * prime(v))
            };
            Ok(ChainGrads {
                grad_v,
                grad_psi_raw: raw,
                grad_gain: None,
            })
        }
        Binding::WeightNorm { gain } => {
            let cols = param.v.row_len();
            let mut grad_v = Vec::with_capacity(param.v.len());
            let mut grad_gain = Vec::with_capacity(gain.len());
            for (r, (row, graw)) in param
                .v
                .data()
                .chunks(cols)
                .zip(raw.data().chunks(cols))
                .enumerate()
            {
                let norm = row_norm(row);
                if norm == T::zero() {
                    return Err(Error::DegenerateDirection { row: r });
                }
                let g = gain.data()[r];
                let dg = graw.iter().zip(row).map(|(&a, &b)| a * b).sum::<T>() / norm;
                grad_gain.push(dg);
                let k1 = g / norm;
                let k2 = g * dg / (norm * norm);
                grad_v.extend(graw.iter().zip(row).map(|(&gw, &v)| k1 * gw - k2 * v));
            }
            Ok(ChainGrads {
                grad_v: Tensor::new(param.v.shape().to_vec(), grad_v)?,
                grad_psi_raw: raw,
                grad_gain: Some(Tensor::new(gain.shape().to_vec(), grad_gain)?),
            })
        }
    }
}

/// Sums `dL/da` and `dL/db` per scope from the weight gradients, storing
/// them in the state's accumulators and returning `(dL/da, dL/db)` pairs.
pub fn accumulate_ab_grads<T: Real>(
    state: &mut SharedAbState,
    params: &[CompandedParam<T>],
    grads_w: &[Tensor<T>],
) -> Result<Vec<(f64, f64)>> {
    if state.mode != AbMode::Learnable {
        return Err(Error::Contract(
            "a, b gradients requested for fixed hyperparameters".into(),
        ));
    }
    if params.len() != grads_w.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads_w.len(),
            params.len()
        )));
    }
    state.grad_a.iter_mut().for_each(|g| *g = 0.0);
    state.grad_b.iter_mut().for_each(|g| *g = 0.0);
    for (param, gw) in params.iter().zip(grads_w) {
        let Binding::Elementwise { kind, scope } = param.binding else {
            continue;
        };
        if kind != ReparamKind::Arctan {
            return Err(Error::UnsupportedKind {
                kind: kind.to_string(),
                what: "learnable a, b".into(),
            });
        }
        let map = state.map(kind, scope)?;
        let (mut da, mut db) = (0.0, 0.0);
        for (&v, &g) in param.v.data().iter().zip(gw.data()) {
            let (pa, pb) = map.grad_ab_unchecked(v.as_f64());
            da += g.as_f64() * pa;
            db += g.as_f64() * pb;
        }
        state.grad_a[scope] += da;
        state.grad_b[scope] += db;
    }
    Ok(state.grad_a.iter().copied().zip(state.grad_b.iter().copied()).collect())
}

/// How the weight-decay gradient enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `2 lambda psi(v)` added to the raw gradient by [`chain_backward`].
    #[default]
    Gradient,
    /// `lambda * sum psi(v)^2` added to the loss on the tape.
    LossTerm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Cross-entropy of the batch (without any penalty).
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

/// A network whose weights are reparameterized.
#[derive(Debug, Clone)]
pub struct CompandedModel<T = f64> {
    pub arch: Architecture,
    pub spec: ReparamSpec,
    pub policy: ReparamPolicy,
    params: Vec<CompandedParam<T>>,
    ab: SharedAbState,
    buffers: Vec<Tensor<T>>,
    steps: u64,
}

/// Builds a companded model whose materialized weights reproduce the
/// baseline initialization: `v = psi^-1(w0)` for every included weight.
pub fn wrap_model<T: Real>(
    arch: &Architecture,
    policy: &ReparamPolicy,
    spec: &ReparamSpec,
    init: &InitScheme,
    seed: u64,
) -> Result<CompandedModel<T>> {
    let baseline = init.init_params::<f64>(arch, seed)?;
    CompandedModel::from_weights(arch, policy, spec, baseline, arch.initial_buffers())
}

impl<T: Real> CompandedModel<T> {
    /// Wraps explicit effective weights (`w0`, in f64) by inversion.
    pub fn from_weights(
        arch: &Architecture,
        policy: &ReparamPolicy,
        spec: &ReparamSpec,
        weights: Vec<Tensor<f64>>,
        buffers: Vec<Tensor<T>>,
    ) -> Result<Self> {
        spec.validate()?;
        let specs = arch.param_specs();
        if weights.len() != specs.len() {
            return Err(Error::Contract(format!(
                "{} weights for {} parameters",
                weights.len(),
                specs.len()
            )));
        }
        let included: Vec<usize> = (0..specs.len())
            .filter(|&i| policy.includes(&specs[i]))
            .collect();
        let (scope_labels, scope_of): (Vec<String>, Vec<Option<usize>>) = {
            let mut labels = Vec::new();
            let mut scope_of = vec![None; specs.len()];
            match spec.params.scope {
                AbScope::Global => {
                    labels.push("global".to_string());
                    for &i in &included {
                        scope_of[i] = Some(0);
                    }
                }
                AbScope::PerLayer => {
                    for &i in &included {
                        scope_of[i] = Some(labels.len());
                        labels.push(specs[i].name.clone());
                    }
                }
            }
            (labels, scope_of)
        };
        let n_scopes = scope_labels.len();
        let ab = SharedAbState {
            mode: spec.params.mode,
            scope: spec.params.scope,
            a: vec![spec.params.a; n_scopes],
            b: vec![spec.params.b; n_scopes],
            grad_a: vec![0.0; n_scopes],
            grad_b: vec![0.0; n_scopes],
            labels: scope_labels,
        };

        let mut params = Vec::with_capacity(specs.len());
        for (i, (pspec, w0)) in specs.into_iter().zip(weights).enumerate() {
            if w0.shape() != pspec.shape.as_slice() {
                return Err(Error::Dimension {
                    layer: pspec.name.clone(),
                    detail: format!("expected {:?}, got {:?}", pspec.shape, w0.shape()),
                });
            }
            let (v, binding) = match (scope_of[i], spec.kind) {
                (None, _) | (_, ReparamKind::Identity) => (w0.cast::<T>(), Binding::Plain),
                (Some(_), ReparamKind::WeightNorm) => {
                    let cols = w0.row_len();
                    let gain: Vec<f64> = w0.data().chunks(cols).map(row_norm).collect();
                    if let Some(r) = gain.iter().position(|&g| g == 0.0) {
                        return Err(Error::DegenerateDirection { row: r });
                    }
                    let gain = Tensor::new(vec![gain.len()], gain)?;
                    (
                        w0.cast::<T>(),
                        Binding::WeightNorm {
                            gain: gain.cast::<T>(),
                        },
                    )
                }
                (Some(scope), kind) => {
                    let map = ab.map(kind, scope)?;
                    if let Some(bad) = w0.data().iter().find(|&&w| !map.in_image(w)) {
                        log::debug!("first out-of-image weight {bad}");
                        return Err(Error::InitDomain {
                            layer: pspec.name.clone(),
                            a: map.a(),
                            max_abs: w0.max_abs(),
                        });
                    }
                    let v: Vec<T> = w0
                        .data()
                        .iter()
                        .map(|&w| map.inverse(w).map(T::from_f64))
                        .collect::<Result<_>>()?;
                    (
                        Tensor::new(w0.shape().to_vec(), v)?,
                        Binding::Elementwise { kind, scope },
                    )
                }
            };
            let zeros = Tensor::zeros(&pspec.shape);
            params.push(CompandedParam {
                spec: pspec,
                v,
                binding,
                w_cache: zeros,
                dirty: true,
            });
        }
        let expected = arch.buffer_specs();
        if buffers.len() != expected.len() {
            return Err(Error::Contract(format!(
                "{} buffers for {} expected",
                buffers.len(),
                expected.len()
            )));
        }
        let mut model = CompandedModel {
            arch: arch.clone(),
            spec: *spec,
            policy: policy.clone(),
            params,
            ab,
            buffers,
            steps: 0,
        };
        model.refresh()?;
        Ok(model)
    }

    /// Rebuilds a model from stored latent state (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_state(
        arch: Architecture,
        spec: ReparamSpec,
        policy: ReparamPolicy,
        latents: Vec<Tensor<T>>,
        gains: Vec<Option<Tensor<T>>>,
        ab: SharedAbState,
        buffers: Vec<Tensor<T>>,
        steps: u64,
    ) -> Result<Self> {
        let specs = arch.param_specs();
        if latents.len() != specs.len() || gains.len() != specs.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        let mut scope = 0;
        let mut params = Vec::with_capacity(specs.len());
        for ((pspec, v), gain) in specs.into_iter().zip(latents).zip(gains) {
            if v.shape() != pspec.shape.as_slice() {
                return Err(Error::Checkpoint(format!("shape of `{}`", pspec.name)));
            }
            let binding = if !policy.includes(&pspec) || spec.kind == ReparamKind::Identity {
                Binding::Plain
            } else if spec.kind == ReparamKind::WeightNorm {
                Binding::WeightNorm {
                    gain: gain.ok_or_else(|| {
                        Error::Checkpoint(format!("missing gain for `{}`", pspec.name))
                    })?,
                }
            } else {
                let b = Binding::Elementwise {
                    kind: spec.kind,
                    scope,
                };
                if spec.params.scope == AbScope::PerLayer {
                    scope += 1;
                }
                b
            };
            let zeros = Tensor::zeros(&pspec.shape);
            params.push(CompandedParam {
                spec: pspec,
                v,
                binding,
                w_cache: zeros,
                dirty: true,
            });
        }
        let mut model = CompandedModel {
            arch,
            spec,
            policy,
            params,
            ab,
            buffers,
            steps,
        };
        model.refresh()?;
        Ok(model)
    }

    pub fn params(&self) -> &[CompandedParam<T>] {
        &self.params
    }

    pub fn param_mut(&mut self, index: usize) -> &mut CompandedParam<T> {
        &mut self.params[index]
    }

    pub fn ab(&self) -> &SharedAbState {
        &self.ab
    }

    /// Replaces `(a, b)` of one scope; caches are refreshed.
    pub fn set_ab(&mut self, scope: usize, a: f64, b: f64) -> Result<()> {
        self.ab.a[scope] = a;
        self.ab.b[scope] = b;
        self.params.iter_mut().for_each(|p| p.dirty = true);
        self.refresh()
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Number of optimizer slots: parameters, then weight-norm gains, then
    /// `a` and `b` of every learnable scope.
    pub fn slot_count(&self) -> usize {
        let gains = self.params.iter().filter(|p| p.gain().is_some()).count();
        let ab = if self.ab.mode == AbMode::Learnable {
            2 * self.ab.scopes()
        } else {
            0
        };
        self.params.len() + gains + ab
    }

    /// Brings every stale cache up to date.
    pub fn refresh(&mut self) -> Result<()> {
        for p in self.params.iter_mut() {
            materialize(p, &self.ab)?;
        }
        Ok(())
    }

    /// Materialized weights in parameter order.
    pub fn weights(&mut self) -> Result<Vec<&Tensor<T>>> {
        self.refresh()?;
        Ok(self.params.iter().map(|p| &p.w_cache).collect())
    }

    /// Materialized weight of parameter `index` (caches must be fresh).
    pub fn weight(&self, index: usize) -> &Tensor<T> {
        debug_assert!(!self.params[index].dirty);
        &self.params[index].w_cache
    }

    /// Indices of the weights that receive weight decay.
    fn decayed(&self) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.spec.role == ParamRole::Weight && self.policy.includes(&p.spec))
            .map(|(i, _)| i)
    }

    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        labels: Option<&[usize]>,
        opts: ForwardOptions,
    ) -> Result<ForwardPass<T>> {
        self.refresh()?;
        let refs: Vec<&Tensor<T>> = self.params.iter().map(|p| &p.w_cache).collect();
        forward(&self.arch, &refs, &self.buffers, input, labels, opts)
    }

    /// Eval-mode logits.
    pub fn logits(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let pass = self.forward(input, None, ForwardOptions::eval())?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// One optimizer iteration on a mini-batch.
    pub fn train_step(
        &mut self,
        opt: &mut Optimizer<T>,
        input: &Tensor<T>,
        labels: &[usize],
        lambda: f64,
        decay: DecayMode,
    ) -> Result<StepStats> {
        let learnable = self.ab.mode == AbMode::Learnable;
        if opt.is_modified() && self.spec.kind == ReparamKind::WeightNorm {
            return Err(Error::UnsupportedKind {
                kind: self.spec.kind.to_string(),
                what: "modified adaptive optimizer".into(),
            });
        }
        if decay == DecayMode::LossTerm && learnable {
            return Err(Error::Contract(
                "loss-term decay applies to psi(v) and needs fixed a, b".into(),
            ));
        }
        self.refresh()?;
        let decayed: Vec<usize> = self.decayed().collect();
        let mut pass = self.forward(input, Some(labels), ForwardOptions::train())?;
        let ce_var = pass.loss.expect("labels were given");
        let ce = pass.tape.value(ce_var).data()[0].as_f64();
        if !ce.is_finite() {
            return Err(Error::RunDiverged {
                step: self.steps as usize,
                loss: ce,
            });
        }
        let correct = count_correct(pass.tape.value(pass.logits), labels);
        let loss_var = if decay == DecayMode::LossTerm && lambda != 0.0 && !decayed.is_empty() {
            let mut total = pass.tape.sum_squares(pass.params[decayed[0]]);
            for &i in &decayed[1..] {
                let sq = pass.tape.sum_squares(pass.params[i]);
                total = pass.tape.add(total, sq)?;
            }
            let penalty = pass.tape.scale(total, T::from_f64(lambda));
            pass.tape.add(ce_var, penalty)?
        } else {
            ce_var
        };
        let mut grads = pass.tape.backward(loss_var)?;
        let grads_w: Vec<Tensor<T>> = pass.params.iter().map(|&v| grads.take(v)).collect();

        if learnable {
            accumulate_ab_grads(&mut self.ab, &self.params, &grads_w)?;
        }

        let injected = if decay == DecayMode::Gradient {
            lambda
        } else {
            0.0
        };
        let n = self.params.len();
        let mut gain_slot = n;
        for (i, gw) in grads_w.iter().enumerate() {
            let lam = if decayed.contains(&i) { injected } else { 0.0 };
            let chain = chain_backward(&self.params[i], &self.ab, gw, lam)?;
            let name = self.params[i].spec.name.clone();
            match (&mut *opt, &self.params[i].binding) {
                (Optimizer::ModifiedAdam(state), Binding::Elementwise { kind, scope }) => {
                    let map = self.ab.map(*kind, *scope)?;
                    let prime = self.params[i]
                        .v
                        .map(|v| T::from_f64(map.derivative(v.as_f64())));
                    state.modified_step(
                        i,
                        &name,
                        &mut self.params[i].v,
                        &chain.grad_psi_raw,
                        &prime,
                    )?;
                }
                _ => opt.step(i, &name, &mut self.params[i].v, &chain.grad_v)?,
            }
            if let (Some(gg), Binding::WeightNorm { gain }) =
                (chain.grad_gain, &mut self.params[i].binding)
            {
                opt.step(gain_slot, &format!("{name}.gain"), gain, &gg)?;
                gain_slot += 1;
            }
            self.params[i].dirty = true;
        }

        if learnable {
            let base = gain_slot;
            for s in 0..self.ab.scopes() {
                let label = self.ab.labels[s].clone();
                for (k, which) in ["a", "b"].into_iter().enumerate() {
                    let (value, grad) = if k == 0 {
                        (self.ab.a[s], self.ab.grad_a[s])
                    } else {
                        (self.ab.b[s], self.ab.grad_b[s])
                    };
                    let mut t = Tensor::scalar(T::from_f64(value));
                    opt.step(
                        base + 2 * s + k,
                        &format!("{label}.{which}"),
                        &mut t,
                        &Tensor::scalar(T::from_f64(grad)),
                    )?;
                    let updated = t.data()[0].as_f64().max(LEARNABLE_AB_MIN);
                    if k == 0 {
                        self.ab.a[s] = updated;
                    } else {
                        self.ab.b[s] = updated;
                    }
                }
            }
        }

        if let Some(b) = pass.buffers.take() {
            self.buffers = b;
        }
        self.steps += 1;
        self.refresh()?;
        Ok(StepStats {
            loss: ce,
            correct,
            batch: labels.len(),
        })
    }

    /// Plain network storing `psi(v)` as its weights.
    pub fn bake(&mut self) -> Result<Network<T>> {
        self.refresh()?;
        Ok(Network {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| p.w_cache.clone()).collect(),
            buffers: self.buffers.clone(),
        })
    }

    /// Checks that only included weights carry a non-identity binding.
    pub fn audit(&self) -> Result<()> {
        for p in &self.params {
            let excluded = !self.policy.includes(&p.spec);
            if excluded && p.is_companded() {
                return Err(Error::Contract(format!(
                    "`{}` ({:?}) must not be reparameterized",
                    p.spec.name, p.spec.role
                )));
            }
        }
        Ok(())
    }
}

/// Number of rows of `logits` whose argmax equals the label.
pub fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn tiny() -> Architecture {
        Architecture::mlp(&[3, 4, 2]).unwrap()
    }

    #[test]
    fn identity_wrap_is_bitwise_baseline() {
        let arch = tiny();
        let init = InitScheme::default();
        let base: Vec<Tensor<f64>> = init.init_params(&arch, 5).unwrap();
        let m: CompandedModel<f64> = wrap_model(
            &arch,
            &ReparamPolicy::default(),
            &ReparamSpec::identity(),
            &init,
            5,
        )
        .unwrap();
        for (p, w0) in m.params().iter().zip(&base) {
            assert!(p.latent().bitwise_eq(w0));
        }
    }

    #[test]
    fn biases_and_bn_are_never_companded() {
        let arch = Architecture::small_cnn(1, 6, 6, 3).unwrap();
        let m: CompandedModel<f64> = wrap_model(
            &arch,
            &ReparamPolicy::default(),
            &ReparamSpec::arctan(1.0, 1.0),
            &InitScheme::default(),
            1,
        )
        .unwrap();
        m.audit().unwrap();
        for p in m.params() {
            assert_eq!(p.is_companded(), p.spec.role == ParamRole::Weight);
        }
        let gamma = m
            .params()
            .iter()
            .find(|p| p.spec.role == ParamRole::BnScale)
            .unwrap();
        assert!(gamma.latent().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn init_outside_image_is_rejected() {
        // fan_in = 1 gives bound sqrt(6) > 0.5 * pi / 2.
        let arch = Architecture::new(
            vec![1],
            vec![
                LayerSpec::Linear {
                    input: 1,
                    output: 64,
                    bias: false,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
        )
        .unwrap();
        let r: Result<CompandedModel<f64>> = wrap_model(
            &arch,
            &ReparamPolicy::default(),
            &ReparamSpec::arctan(0.5, 1.0),
            &InitScheme::default(),
            0,
        );
        match r {
            Err(Error::InitDomain { layer, a, max_abs }) => {
                assert_eq!(layer, "layer0.weight");
                assert_eq!(a, 0.5);
                assert!(max_abs >= 0.5 * std::f64::consts::FRAC_PI_2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chain_backward_scalar_examples() {
        let arch = Architecture::new(
            vec![1],
            vec![
                LayerSpec::Linear {
                    input: 1,
                    output: 1,
                    bias: false,
                },
                LayerSpec::SoftmaxCrossEntropy,
            ],
        )
        .unwrap();
        let m: CompandedModel<f64> = CompandedModel::from_weights(
            &arch,
            &ReparamPolicy::default(),
            &ReparamSpec::arctan(1.0, 1.0),
            vec![Tensor::zeros(&[1, 1])],
            vec![],
        )
        .unwrap();
        let p = &m.params()[0];
        let g = chain_backward(p, m.ab(), &Tensor::full(&[1, 1], 0.3), 0.0).unwrap();
        assert_eq!(g.grad_v.data(), &[0.3]);
        let g = chain_backward(p, m.ab(), &Tensor::zeros(&[1, 1]), 0.0).unwrap();
        assert_eq!(g.grad_v.data(), &[0.0]);
        assert!(chain_backward(p, m.ab(), &Tensor::zeros(&[2]), 0.0).is_err());
    }

    #[test]
    fn ab_grads_need_learnable_mode() {
        let arch = tiny();
        let m: CompandedModel<f64> = wrap_model(
            &arch,
            &ReparamPolicy::default(),
            &ReparamSpec::arctan(1.0, 1.0),
            &InitScheme::default(),
            0,
        )
        .unwrap();
        let zeros: Vec<Tensor<f64>> = m
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.latent().shape()))
            .collect();
        let params = m.params().to_vec();
        assert!(matches!(
            accumulate_ab_grads(&mut m.ab.clone(), &params, &zeros),
            Err(Error::Contract(_))
        ));
        let mut l: CompandedModel<f64> = wrap_model(
            &arch,
            &ReparamPolicy::default(),
            &ReparamSpec::learnable_arctan(1.0, 1.0, AbScope::PerLayer),
            &InitScheme::default(),
            0,
        )
        .unwrap();
        let params = l.params().to_vec();
        let got = accumulate_ab_grads(&mut l.ab, &params, &zeros).unwrap();
        assert_eq!(got, vec![(0.0, 0.0), (0.0, 0.0)]);
    }

    #[test]
    fn materialize_is_idempotent() {
        let mut m: CompandedModel<f64> = wrap_model(
            &tiny(),
            &ReparamPolicy::default(),
            &ReparamSpec::arctan(1.0, 0.8),
            &InitScheme::default(),
            2,
        )
        .unwrap();
        let ab = m.ab().clone();
        let p = m.param_mut(0);
        p.latent_mut().data_mut()[0] = 3.0;
        let first = materialize(p, &ab).unwrap().clone();
        let second = materialize(p, &ab).unwrap().clone();
        assert!(first.bitwise_eq(&second));
        assert_eq!(first.data()[0], 1.0 * (3.0f64 / 0.8).atan());
    }
}
