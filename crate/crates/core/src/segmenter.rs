//! End-to-end pipelines: full-batch (`kcsr`), stochastic (`skcsr`) and
//! multi-sequence (`mkcsr`) segmentation, plus hard-label decoding.

use std::env;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{concat_sequences, DataSequence};
use crate::error::{KcsrError, Result};
use crate::kernels::{build_kernel_matrix, build_partial_kernel, kernel_diagonal, KernelMatrix, KernelSpec};
use crate::objective::{
    auto_lambda, grad_wrt_gamma, objective_value, streaming_objective_value, ObjectiveParams, Ridge,
};
use crate::optim::{run_gd, run_sgd, DifferentiableObjective, GdConfig, OptResult, SgdConfig, StochasticObjective};

/// Default ceiling on the bytes a full kernel matrix may take: 2 GiB.
pub const DEFAULT_MEM_CAP_BYTES: u64 = 2 << 30;

/// Environment variable that overrides [`DEFAULT_MEM_CAP_BYTES`].
pub const MEM_CAP_ENV: &str = "KCSR_MEM_CAP_BYTES";

/// SGD records the full objective only for sequences up to this length.
pub const FULL_TRACE_MAX_LEN: usize = 5000;

pub const DEFAULT_ALPHA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    /// `0.01 · Tr(K) · k / n²`, see [`auto_lambda`].
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Full kernel, gradient descent with Armijo steps.
    Kcsr(GdConfig),
    /// Partial kernels on random ordered minibatches, SGD with momentum.
    Skcsr(SgdConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationRequest {
    pub k: usize,
    pub kernel: KernelSpec,
    pub alpha: f64,
    pub lambda: LambdaPolicy,
    pub method: Method,
    pub ridge: Ridge,
    pub mem_cap_bytes: u64,
    /// Start from the optimum of flatter sigmoids (see [`warm_start_alphas`])
    /// instead of evenly spaced midpoints.
    pub warm_start: bool,
}

impl SegmentationRequest {
    pub fn kcsr(k: usize, kernel: KernelSpec) -> Self {
        Self {
            k,
            kernel,
            alpha: DEFAULT_ALPHA,
            lambda: LambdaPolicy::Auto,
            method: Method::Kcsr(GdConfig::default()),
            ridge: Ridge::default(),
            mem_cap_bytes: mem_cap_from_env(),
            warm_start: true,
        }
    }

    pub fn skcsr(k: usize, kernel: KernelSpec, sgd: SgdConfig) -> Self {
        Self {
            method: Method::Skcsr(sgd),
            ..Self::kcsr(k, kernel)
        }
    }

    pub fn with_lambda(mut self, lambda: LambdaPolicy) -> Self {
        self.lambda = lambda;
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k > n {
            return Err(KcsrError::input(format!(
                "need 1 <= k <= n, got k = {}, n = {n}",
                self.k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(KcsrError::input(format!(
                "steepness must be positive, got {}",
                self.alpha
            )));
        }
        if let LambdaPolicy::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(KcsrError::input(format!("lambda must be non-negative, got {l}")));
            }
        }
        if let KernelSpec::Rbf { sigma } = self.kernel {
            KernelSpec::rbf(sigma)?;
        }
        Ok(())
    }

    fn resolve_lambda(&self, kernel_trace: f64, n: usize) -> f64 {
        match self.lambda {
            LambdaPolicy::Auto => auto_lambda(kernel_trace, n, self.k),
            LambdaPolicy::Fixed(l) => l,
        }
    }
}

/// Steepness values of the warm-start stages, flattest first: geometric with
/// ratio 4 from `40 · segments / n`, which spreads each sigmoid over about a
/// tenth of an average segment, and stopping below `alpha / 2`.
pub fn warm_start_alphas(alpha: f64, n: usize, segments: usize) -> Vec<f64> {
    let mut a = 40.0 * segments.max(1) as f64 / n.max(1) as f64;
    let mut stages = Vec::new();
    while a < alpha / 2.0 {
        stages.push(a);
        a *= 4.0;
    }
    stages
}

/// Memory cap from `KCSR_MEM_CAP_BYTES`, falling back to 2 GiB.
pub fn mem_cap_from_env() -> u64 {
    env::var(MEM_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_MEM_CAP_BYTES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEcho {
    pub kind: String,
    pub sigma: Option<f64>,
}

impl From<&KernelSpec> for KernelEcho {
    fn from(spec: &KernelSpec) -> Self {
        Self {
            kind: spec.kind().to_string(),
            sigma: spec.sigma(),
        }
    }
}

/// The serialized outcome of a segmentation run.
///
/// `boundaries` holds the 1-based index of the last sample of each of the
/// first `k − 1` segments (for multi-sequence results: per block, in
/// global coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub method: String,
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub kernel: KernelEcho,
    pub betas: Vec<f64>,
    pub tau: Vec<f64>,
    pub labels: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub objective_trace: Vec<(usize, f64)>,
    pub seed: Option<u64>,
    pub block_lengths: Option<Vec<usize>>,
}

/// A result together with optimizer diagnostics that are not serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub result: SegmentationResult,
    pub gamma: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Segments (1-based) that decoded to zero samples, per block.
    pub empty_segments: Vec<usize>,
    pub full_objective_trace: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSegmentation {
    pub global: Segmentation,
    /// One result per input sequence, in local coordinates.
    pub per_sequence: Vec<SegmentationResult>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub labels: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub empty_segments: Vec<usize>,
}

/// Hard labels by rounding `τ` to the nearest integer in `[1, k]`, with
/// exact halves rounded down. `boundaries[c−1]` is the number of samples
/// labelled `≤ c`; an empty segment repeats the previous boundary.
pub fn labels_from_tau(tau: &[f64], k: usize) -> Decoded {
    let labels: Vec<usize> = tau
        .iter()
        .map(|&t| {
            let rounded = (t - 0.5).ceil();
            rounded.clamp(1.0, k as f64) as usize
        })
        .collect();
    let mut boundaries = Vec::with_capacity(k.saturating_sub(1));
    let mut empty_segments = Vec::new();
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l - 1] += 1;
    }
    let mut acc = 0;
    for (c, &size) in sizes.iter().enumerate() {
        if size == 0 {
            empty_segments.push(c + 1);
        }
        acc += size;
        if c + 1 < k {
            boundaries.push(acc);
        }
    }
    Decoded {
        labels,
        boundaries,
        empty_segments,
    }
}

struct FullBatch<'a> {
    kernel: &'a KernelMatrix,
    params: ObjectiveParams,
}

impl DifferentiableObjective for FullBatch<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        objective_value(x, self.kernel, None, &self.params)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let r = grad_wrt_gamma(x, self.kernel, None, &self.params)?;
        Ok((r.value, r.grad_gamma))
    }
}

/// Minibatch problem that only ever forms `b × b` kernels.
///
/// The batch objective is divided by `b` times the mean kernel diagonal, so
/// that step sizes do not depend on the batch size or the kernel's scale.
struct Minibatch<'a> {
    x: &'a DataSequence,
    spec: KernelSpec,
    /// Parameters of the full objective.
    params: ObjectiveParams,
    /// Parameters with the balanced weight rescaled by `n / b`, so that the
    /// minibatch objective estimates `(b / n) · J`.
    batch_params: ObjectiveParams,
    scale: f64,
    /// Starting steepness and the number of updates it takes to reach the
    /// target.
    ramp: Option<(f64, usize)>,
}

impl<'a> Minibatch<'a> {
    fn new(x: &'a DataSequence, spec: KernelSpec, params: ObjectiveParams, batch: usize, kernel_trace: f64) -> Self {
        let mut batch_params = params.clone();
        batch_params.lambda = params.lambda * x.len() as f64 / batch as f64;
        let mean_diag = kernel_trace / x.len() as f64;
        let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
            1.0 / (batch as f64 * mean_diag)
        } else {
            1.0 / batch as f64
        };
        Self {
            x,
            spec,
            params,
            batch_params,
            scale,
            ramp: None,
        }
    }

    /// Raise the steepness geometrically from `start` to the target over
    /// `iterations` updates.
    fn with_ramp(mut self, start: Option<f64>, iterations: usize) -> Self {
        self.ramp = start.map(|a| (a, iterations.max(1)));
        self
    }

    fn alpha_at(&self, t: usize) -> f64 {
        let target = self.params.layout.alpha;
        match self.ramp {
            Some((start, len)) if t < len => start * (target / start).powf(t as f64 / len as f64),
            _ => target,
        }
    }
}

impl StochasticObjective for Minibatch<'_> {
    fn samples(&self) -> usize {
        self.x.len()
    }

    fn minibatch(&self, t: usize, x: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        let kernel = build_partial_kernel(self.x, indices, &self.spec)?;
        let alpha = self.alpha_at(t);
        let r = if alpha == self.batch_params.layout.alpha {
            grad_wrt_gamma(x, &kernel, Some(indices), &self.batch_params)?
        } else {
            let mut staged = self.batch_params.clone();
            staged.layout.alpha = alpha;
            grad_wrt_gamma(x, &kernel, Some(indices), &staged)?
        };
        let s = self.scale;
        Ok((r.value * s, r.grad_gamma.iter().map(|g| g * s).collect()))
    }

    fn full_value(&self, x: &[f64]) -> Option<Result<f64>> {
        (self.x.len() <= FULL_TRACE_MAX_LEN).then(|| streaming_objective_value(x, self.x, &self.spec, &self.params))
    }
}

fn finish(
    method: &str,
    request: &SegmentationRequest,
    lambda: f64,
    params: &ObjectiveParams,
    opt: OptResult,
    seed: Option<u64>,
) -> Result<Segmentation> {
    let betas = params.layout.betas(&opt.gamma)?;
    let tau = params.layout.tau_full(&betas);
    let k = request.k;
    let lengths = params.layout.lengths().to_vec();
    let mut labels = Vec::with_capacity(tau.len());
    let mut boundaries = Vec::new();
    let mut empty_segments = Vec::new();
    let mut offset = 0;
    for &len in &lengths {
        let decoded = labels_from_tau(&tau[offset..offset + len], k);
        labels.extend(decoded.labels);
        boundaries.extend(decoded.boundaries.iter().map(|b| b + offset));
        empty_segments.extend(decoded.empty_segments);
        offset += len;
    }
    if !empty_segments.is_empty() {
        warn!("segments {empty_segments:?} decoded to zero samples");
    }
    let result = SegmentationResult {
        method: method.to_string(),
        k,
        alpha: request.alpha,
        lambda,
        kernel: KernelEcho::from(&request.kernel),
        betas,
        tau,
        labels,
        boundaries,
        objective_trace: opt.objective_trace,
        seed,
        block_lengths: (lengths.len() > 1).then_some(lengths),
    };
    Ok(Segmentation {
        result,
        gamma: opt.gamma,
        converged: opt.converged,
        iterations_used: opt.iterations_used,
        empty_segments,
        full_objective_trace: opt.full_objective_trace,
    })
}

/// Full-batch segmentation: builds the `n × n` kernel and runs gradient
/// descent from `γ = 0`.
pub fn kcsr_segment(x: &DataSequence, request: &SegmentationRequest) -> Result<Segmentation> {
    let n = x.len();
    request.validate(n)?;
    let Method::Kcsr(gd) = request.method else {
        return Err(KcsrError::input("kcsr_segment needs a gradient-descent configuration"));
    };
    let bytes = (n as u128) * (n as u128) * 8;
    if bytes > u128::from(request.mem_cap_bytes) {
        return Err(KcsrError::Resource(format!(
            "a full kernel for {n} samples needs {bytes} bytes, above the {} byte cap; \
             use the stochastic method (skcsr), which only stores minibatch kernels",
            request.mem_cap_bytes
        )));
    }
    let kernel = build_kernel_matrix(x, &request.kernel)?;
    let lambda = request.resolve_lambda(kernel.trace(), n);
    let params = ObjectiveParams::single(request.k, request.alpha, n, lambda).with_ridge(request.ridge);
    let mut gamma = vec![0.0; params.layout.gamma_len()];
    if request.warm_start {
        for alpha in warm_start_alphas(request.alpha, n, request.k) {
            let mut staged = params.clone();
            staged.layout.alpha = alpha;
            let stage = run_gd(
                &FullBatch {
                    kernel: &kernel,
                    params: staged,
                },
                &gamma,
                &gd,
            )?;
            debug!("warm start at α = {alpha:.4}: {} iterations", stage.iterations_used);
            gamma = stage.gamma;
        }
    }
    let problem = FullBatch {
        kernel: &kernel,
        params: params.clone(),
    };
    let opt = run_gd(&problem, &gamma, &gd)?;
    info!(
        "kcsr: {} iterations, J = {:.6e}",
        opt.iterations_used,
        opt.objective_trace.last().map_or(f64::NAN, |t| t.1)
    );
    finish("kcsr", request, lambda, &params, opt, None)
}

/// Stochastic segmentation: each update sees only a `b × b` partial kernel.
pub fn skcsr_segment(x: &DataSequence, request: &SegmentationRequest) -> Result<Segmentation> {
    let n = x.len();
    request.validate(n)?;
    let Method::Skcsr(sgd) = request.method else {
        return Err(KcsrError::input("skcsr_segment needs an SGD configuration"));
    };
    sgd.validate(n)?;
    let trace: f64 = kernel_diagonal(x, &request.kernel).iter().sum();
    let lambda = request.resolve_lambda(trace, n);
    let params = ObjectiveParams::single(request.k, request.alpha, n, lambda).with_ridge(request.ridge);
    let start = request
        .warm_start
        .then(|| warm_start_alphas(request.alpha, n, request.k).first().copied())
        .flatten();
    let problem = Minibatch::new(x, request.kernel, params.clone(), sgd.batch, trace).with_ramp(start, sgd.iterations);
    let opt = run_sgd(&problem, &vec![0.0; params.layout.gamma_len()], &sgd)?;
    finish("skcsr", request, lambda, &params, opt, Some(sgd.seed))
}

/// Joint segmentation of `m ≥ 2` related sequences into `k` matched
/// segments each, by SGD on their concatenation with label resets at the
/// junctions. Segment `c` of every sequence carries class id `c`.
pub fn mkcsr_segment(sequences: &[DataSequence], request: &SegmentationRequest) -> Result<MultiSegmentation> {
    if sequences.len() < 2 {
        return Err(KcsrError::input(
            "multi-sequence segmentation needs at least two sequences; use kcsr_segment for one",
        ));
    }
    let Method::Skcsr(sgd) = request.method else {
        return Err(KcsrError::input(
            "multi-sequence segmentation runs SGD; pass an SGD configuration",
        ));
    };
    if let Some(short) = sequences.iter().find(|s| s.len() < request.k) {
        return Err(KcsrError::input(format!(
            "sequence `{}` has {} samples, fewer than k = {}",
            short.name,
            short.len(),
            request.k
        )));
    }
    let multi = concat_sequences(sequences.to_vec())?;
    let x = &multi.joined;
    let n = x.len();
    request.validate(n)?;
    sgd.validate(n)?;
    let trace: f64 = kernel_diagonal(x, &request.kernel).iter().sum();
    let lambda = request.resolve_lambda(trace, n);
    let params =
        ObjectiveParams::multi(request.k, request.alpha, multi.lengths.clone(), lambda).with_ridge(request.ridge);
    // Only the free sigmoids are ramped; flat junction sigmoids would let τ
    // leave [1, k] around the junctions.
    let start = request
        .warm_start
        .then(|| {
            warm_start_alphas(request.alpha, n, request.k * multi.lengths.len())
                .first()
                .copied()
        })
        .flatten();
    let problem = Minibatch::new(x, request.kernel, params.clone(), sgd.batch, trace).with_ramp(start, sgd.iterations);
    let opt = run_sgd(&problem, &vec![0.0; params.layout.gamma_len()], &sgd)?;
    let global = finish("mkcsr", request, lambda, &params, opt, Some(sgd.seed))?;

    let k = request.k;
    let mut per_sequence = Vec::with_capacity(sequences.len());
    let mut offset = 0;
    for (p, &len) in multi.lengths.iter().enumerate() {
        let g = &global.result;
        let betas: Vec<f64> = g.betas[p * (k - 1)..(p + 1) * (k - 1)]
            .iter()
            .map(|b| b - offset as f64)
            .collect();
        let boundaries = g.boundaries[p * (k - 1)..(p + 1) * (k - 1)]
            .iter()
            .map(|b| b - offset)
            .collect();
        per_sequence.push(SegmentationResult {
            betas,
            tau: g.tau[offset..offset + len].to_vec(),
            labels: g.labels[offset..offset + len].to_vec(),
            boundaries,
            block_lengths: None,
            ..g.clone()
        });
        offset += len;
    }
    Ok(MultiSegmentation { global, per_sequence })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoding_examples() {
        let d = labels_from_tau(&[1.0, 1.2, 1.8, 2.0], 2);
        assert_eq!(d.labels, vec![1, 1, 2, 2]);
        assert_eq!(d.boundaries, vec![2]);
        assert!(d.empty_segments.is_empty());

        assert_eq!(labels_from_tau(&[1.5], 2).labels, vec![1]);
        assert_eq!(labels_from_tau(&[2.5000001], 3).labels, vec![3]);

        let d = labels_from_tau(&[1.0, 1.1, 2.9, 3.0], 3);
        assert_eq!(d.labels, vec![1, 1, 3, 3]);
        assert_eq!(d.boundaries, vec![2, 2]);
        assert_eq!(d.empty_segments, vec![2]);

        let d = labels_from_tau(&[1.0; 3], 1);
        assert!(d.boundaries.is_empty());
    }

    #[test]
    fn warm_start_schedule() {
        let stages = warm_start_alphas(10.0, 1000, 4);
        assert_eq!(stages.len(), 3);
        assert!((stages[0] - 0.16).abs() < 1e-12);
        assert!(stages.windows(2).all(|w| (w[1] / w[0] - 4.0).abs() < 1e-12));
        assert!(*stages.last().unwrap() < 5.0);
        // short sequences start steep enough to skip the warm-up
        assert!(warm_start_alphas(10.0, 20, 4).is_empty());
    }

    #[test]
    fn minibatch_gradients_average_to_the_full_one() {
        use rand::SeedableRng;
        let means = vec![vec![0.0], vec![3.0], vec![-2.0]];
        let x = crate::data::generate_mean_shift(&[40, 70, 50], &means, 0.5, 9).unwrap();
        let spec = KernelSpec::rbf(1.0).unwrap();
        let n = x.len();
        let kernel = build_kernel_matrix(&x, &spec).unwrap();
        let params = ObjectiveParams::single(3, 10.0, n, auto_lambda(kernel.trace(), n, 3));
        let gamma = [0.3, -0.2, 0.1];
        let full = grad_wrt_gamma(&gamma, &kernel, None, &params).unwrap().grad_gamma;

        let batch = Minibatch::new(&x, spec, params, 48, kernel.trace());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut mean = vec![0.0; 3];
        for t in 0..400 {
            let mut idx = rand::seq::index::sample(&mut rng, n, 48).into_vec();
            idx.sort_unstable();
            let (_, g) = batch.minibatch(t, &gamma, &idx).unwrap();
            mean.iter_mut().zip(&g).for_each(|(m, v)| *m += v);
        }
        let dot: f64 = mean.iter().zip(&full).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (norm(&mean) * norm(&full)) > 0.9);
    }

    #[test]
    fn toy_two_segments() {
        let x = DataSequence::from_scalars(&[0.0, 0.0, 0.0, 4.0, 4.0, 4.0], "toy").unwrap();
        let seg = kcsr_segment(&x, &SegmentationRequest::kcsr(2, KernelSpec::Linear)).unwrap();
        assert_eq!(seg.result.boundaries, vec![3]);
        assert_eq!(seg.result.labels, vec![1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn single_segment_request() {
        let x = DataSequence::from_scalars(&[0.0, 1.0, 2.0], "one").unwrap();
        let seg = kcsr_segment(&x, &SegmentationRequest::kcsr(1, KernelSpec::Linear)).unwrap();
        assert!(seg.result.boundaries.is_empty());
        assert!(seg.result.betas.is_empty());
        assert_eq!(seg.result.labels, vec![1, 1, 1]);
    }

    #[test]
    fn memory_cap_refuses_kcsr() {
        let x = DataSequence::from_scalars(&[0.0; 100], "big").unwrap();
        let mut req = SegmentationRequest::kcsr(2, KernelSpec::Linear);
        req.mem_cap_bytes = 100 * 100 * 8 - 1;
        let err = kcsr_segment(&x, &req).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("skcsr"));
    }

    #[test]
    fn mkcsr_needs_two_sequences() {
        let x = DataSequence::from_scalars(&[0.0; 10], "a").unwrap();
        let req = SegmentationRequest::skcsr(2, KernelSpec::Linear, SgdConfig::for_length(10));
        assert!(matches!(mkcsr_segment(&[x], &req), Err(KcsrError::Input(_))));
    }
}
