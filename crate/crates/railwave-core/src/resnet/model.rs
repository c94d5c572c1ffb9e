use super::blocks::{BasicBlock, BlockCache, BottleneckBlock, ConvBn, ResidualBlock};
use super::spec::{BlockKind, ResNetSpec};
use super::ResNetError;
use crate::nn::{
    linear, linear_backward, pool2d, pool2d_backward, relu, relu_backward, LinearParams, NnError,
    PoolCache, PoolParams, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Whether a named tensor is updated by the optimizer or only tracked as
/// state (batch-norm running moments).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    State,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ResNetSpec,
    stem: ConvBn,
    stages: Vec<Vec<ResidualBlock>>,
    fc: LinearParams,
}

/// Intermediates of one training forward pass, consumed by `backward`.
pub struct ForwardCache {
    stem: super::blocks::ConvBnCache,
    stem_bn_out: Tensor,
    pool_in: Tensor,
    pool_cache: PoolCache,
    blocks: Vec<Vec<BlockCache>>,
    gap_in: Tensor,
    gap_cache: PoolCache,
    gap_window: (usize, usize),
    flat: Tensor,
}

fn stem_pool_params() -> PoolParams {
    PoolParams {
        mode: crate::nn::PoolMode::Max,
        window: (3, 3),
        stride: 2,
        padding: 1,
    }
}

/// Deterministic build: structure from the spec, weights drawn from a
/// ChaCha stream seeded with `seed`. Every tensor of rank 2 or higher gets
/// a fan-in scaled normal draw; biases, gamma, and beta keep their
/// constructor values (0, 1, 0). All parameters land on the f32 grid.
pub fn build_model(spec: &ResNetSpec, seed: u64) -> Result<Model, ResNetError> {
    spec.validate()?;
    let (in_ch, _, _) = spec.input_shape;
    let stem = ConvBn::new(in_ch, spec.stem_channels, 7, 2, 3);
    let expansion = spec.block_kind.expansion();
    let mut stages = Vec::new();
    let mut channels = spec.stem_channels;
    for (si, &count) in spec.stage_block_counts.iter().enumerate() {
        let width = spec.stage_width(si);
        let mut stage = Vec::new();
        for bi in 0..count {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let block = match spec.block_kind {
                BlockKind::Basic => ResidualBlock::Basic(BasicBlock::new(channels, width, stride)),
                BlockKind::Bottleneck => {
                    ResidualBlock::Bottleneck(BottleneckBlock::new(channels, width, stride))
                }
            };
            channels = width * expansion;
            stage.push(block);
        }
        stages.push(stage);
    }
    let fc = LinearParams::new(spec.num_classes, channels);
    let mut model = Model {
        spec: spec.clone(),
        stem,
        stages,
        fc,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.for_each_param(&mut |_, kind, t| {
        if kind == ParamKind::Trainable && t.shape.len() >= 2 {
            let fan_in: usize = t.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in t.data.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            t.round_to_f32();
        }
    });
    Ok(model)
}

impl Model {
    /// Visits every parameter in a fixed order; the same order defines
    /// initialization draws and checkpoint layout.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        fn visit_convbn(prefix: &str, layer: &mut ConvBn, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
            f(&format!("{prefix}.conv.weight"), ParamKind::Trainable, &mut layer.conv.kernels);
            f(&format!("{prefix}.conv.bias"), ParamKind::Trainable, &mut layer.conv.bias);
            f(&format!("{prefix}.bn.gamma"), ParamKind::Trainable, &mut layer.bn.gamma);
            f(&format!("{prefix}.bn.beta"), ParamKind::Trainable, &mut layer.bn.beta);
            f(&format!("{prefix}.bn.running_mean"), ParamKind::State, &mut layer.bn.running_mean);
            f(&format!("{prefix}.bn.running_var"), ParamKind::State, &mut layer.bn.running_var);
        }
        visit_convbn("stem", &mut self.stem, f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("layer{si}.{bi}");
                match block {
                    ResidualBlock::Basic(b) => {
                        visit_convbn(&format!("{p}.conv1"), &mut b.conv1, f);
                        visit_convbn(&format!("{p}.conv2"), &mut b.conv2, f);
                        if let Some(proj) = &mut b.projection {
                            f(&format!("{p}.downsample.weight"), ParamKind::Trainable, &mut proj.kernels);
                            f(&format!("{p}.downsample.bias"), ParamKind::Trainable, &mut proj.bias);
                        }
                    }
                    ResidualBlock::Bottleneck(b) => {
                        visit_convbn(&format!("{p}.conv1"), &mut b.conv1, f);
                        visit_convbn(&format!("{p}.conv2"), &mut b.conv2, f);
                        visit_convbn(&format!("{p}.conv3"), &mut b.conv3, f);
                        if let Some(proj) = &mut b.projection {
                            f(&format!("{p}.downsample.weight"), ParamKind::Trainable, &mut proj.kernels);
                            f(&format!("{p}.downsample.bias"), ParamKind::Trainable, &mut proj.bias);
                        }
                    }
                }
            }
        }
        f("fc.weight", ParamKind::Trainable, &mut self.fc.weight);
        f("fc.bias", ParamKind::Trainable, &mut self.fc.bias);
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |_, _, t| t.grad = None);
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), NnError> {
        let (c, h, w) = self.spec.input_shape;
        match batch.shape[..] {
            [_, bc, bh, bw] if (bc, bh, bw) == (c, h, w) => Ok(()),
            _ => Err(NnError::ShapeMismatch {
                op: "model_forward",
                detail: format!(
                    "batch shape {:?}, model expects [N, {c}, {h}, {w}]",
                    batch.shape
                ),
            }),
        }
    }

    /// Training-mode forward: batch statistics in every BN layer, running
    /// moments updated, full cache returned for `backward`.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<(Tensor, ForwardCache), NnError> {
        self.check_input(batch)?;
        let (stem_bn_out, stem_cache) = self.stem.forward_train(batch)?;
        let pool_in = relu(&stem_bn_out);
        let (mut x, pool_cache) = pool2d(&pool_in, &stem_pool_params())?;
        let mut block_caches = Vec::new();
        for stage in self.stages.iter_mut() {
            let mut stage_caches = Vec::new();
            for block in stage.iter_mut() {
                let (next, cache) = block.forward_train(&x)?;
                x = next;
                stage_caches.push(cache);
            }
            block_caches.push(stage_caches);
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let gap_window = (h, w);
        let (gap_out, gap_cache) = pool2d(&x, &PoolParams::avg(gap_window, 1))?;
        let flat = Tensor::new(vec![n, c], gap_out.data.clone())?;
        let logits = linear(&flat, &self.fc)?;
        Ok((
            logits,
            ForwardCache {
                stem: stem_cache,
                stem_bn_out,
                pool_in,
                pool_cache,
                blocks: block_caches,
                gap_in: x,
                gap_cache,
                gap_window,
                flat,
            },
        ))
    }

    /// Inference forward; immutable, safe to call from many threads on a
    /// shared frozen model.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(batch)?;
        let a = relu(&self.stem.forward_eval(batch)?);
        let (mut x, _) = pool2d(&a, &stem_pool_params())?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward_eval(&x)?;
            }
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (gap_out, _) = pool2d(&x, &PoolParams::avg((h, w), 1))?;
        let flat = Tensor::new(vec![n, c], gap_out.data.clone())?;
        linear(&flat, &self.fc)
    }

    /// Accumulates gradients on every trainable parameter given the
    /// gradient w.r.t. the logits. Call `zero_grads` first for a fresh
    /// step.
    pub fn backward(
        &mut self,
        cache: &mut ForwardCache,
        grad_logits: &Tensor,
    ) -> Result<(), NnError> {
        linear_backward(&mut cache.flat, &mut self.fc, grad_logits)?;
        let n = cache.gap_in.shape[0];
        let c = cache.gap_in.shape[1];
        let g_gap = Tensor::new(vec![n, c, 1, 1], cache.flat.grad.clone().unwrap())?;
        pool2d_backward(
            &mut cache.gap_in,
            &PoolParams::avg(cache.gap_window, 1),
            &cache.gap_cache,
            &g_gap,
        )?;
        let mut g = Tensor::new(cache.gap_in.shape.clone(), cache.gap_in.grad.clone().unwrap())?;
        for (stage, caches) in self
            .stages
            .iter_mut()
            .zip(cache.blocks.iter_mut())
            .rev()
        {
            for (block, bcache) in stage.iter_mut().zip(caches.iter_mut()).rev() {
                g = block.backward(bcache, &g)?;
            }
        }
        pool2d_backward(&mut cache.pool_in, &stem_pool_params(), &cache.pool_cache, &g)?;
        let g_pool =
            Tensor::new(cache.pool_in.shape.clone(), cache.pool_in.grad.clone().unwrap())?;
        relu_backward(&mut cache.stem_bn_out, &g_pool)?;
        let g_stem = Tensor::new(
            cache.stem_bn_out.shape.clone(),
            cache.stem_bn_out.grad.clone().unwrap(),
        )?;
        self.stem.backward(&mut cache.stem, &g_stem)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, 1, 64, 64],
            (0..n * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let spec = ResNetSpec::tiny();
        let mut a = build_model(&spec, 9).unwrap();
        let mut b = build_model(&spec, 9).unwrap();
        let mut mismatch = false;
        a.for_each_param(&mut |name, _, ta| {
            let data = ta.data.clone();
            let name = name.to_string();
            b.for_each_param(&mut |n2, _, tb| {
                if n2 == name && tb.data != data {
                    mismatch = true;
                }
            });
        });
        assert!(!mismatch);
        let mut c = build_model(&spec, 10).unwrap();
        let mut any_diff = false;
        a.for_each_param(&mut |name, kind, ta| {
            if kind == ParamKind::Trainable && name == "stem.conv.weight" {
                let data = ta.data.clone();
                c.for_each_param(&mut |n2, _, tc| {
                    if n2 == "stem.conv.weight" && tc.data != data {
                        any_diff = true;
                    }
                });
            }
        });
        assert!(any_diff, "different seeds must give different stem weights");
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let mut m = build_model(&ResNetSpec::tiny(), 1).unwrap();
        let mut names = Vec::new();
        m.for_each_param(&mut |name, _, _| names.push(name.to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate parameter name");
        assert!(names.contains(&"stem.conv.weight".to_string()));
        assert!(names.contains(&"layer1.0.downsample.weight".to_string()));
        assert!(names.contains(&"fc.bias".to_string()));
        let mut again = Vec::new();
        m.for_each_param(&mut |name, _, _| again.push(name.to_string()));
        assert_eq!(names, again, "visitation order must be stable");
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let mut m = build_model(&ResNetSpec::tiny(), 2).unwrap();
        let batch = Tensor::zeros(&[2, 1, 64, 64]);
        let (logits, _) = m.forward_train(&batch).unwrap();
        assert_eq!(logits.shape, vec![2, 17]);
        assert!(logits.data.iter().all(|v| v.is_finite()));
        let logits = m.forward_eval(&batch).unwrap();
        assert!(logits.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_equivariant() {
        let m = build_model(&ResNetSpec::tiny(), 3).unwrap();
        let batch = small_batch(3, 40);
        let a = m.forward_eval(&batch).unwrap();
        let b = m.forward_eval(&batch).unwrap();
        assert_eq!(a.data, b.data);
        // Reverse the batch rows; logits must permute identically.
        let mut rev = Tensor::zeros(&[3, 1, 64, 64]);
        for i in 0..3 {
            rev.data[i * 4096..(i + 1) * 4096]
                .copy_from_slice(&batch.data[(2 - i) * 4096..(3 - i) * 4096]);
        }
        let c = m.forward_eval(&rev).unwrap();
        for i in 0..3 {
            assert_eq!(
                c.data[i * 17..(i + 1) * 17],
                a.data[(2 - i) * 17..(3 - i) * 17],
                "permuted batch row {i} must carry its logits along"
            );
        }
    }

    #[test]
    fn deeper_bottleneck_build_has_more_parameters() {
        let mut tiny = build_model(&ResNetSpec::tiny(), 1).unwrap();
        let mut r18 = build_model(&ResNetSpec::resnet18(), 1).unwrap();
        let mut r50 = build_model(&ResNetSpec::resnet50(), 1).unwrap();
        let (t, a, b) = (
            tiny.parameter_count(),
            r18.parameter_count(),
            r50.parameter_count(),
        );
        assert!(t < a, "tiny {t} should be below resnet18 {a}");
        assert!(a < b, "resnet18 {a} should be below resnet50 {b}");
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut m = build_model(&ResNetSpec::tiny(), 1).unwrap();
        let batch = Tensor::zeros(&[2, 1, 32, 32]);
        assert!(m.forward_train(&batch).is_err());
        assert!(m.forward_eval(&batch).is_err());
    }

    #[test]
    fn full_model_gradients_match_a_directional_derivative_at_stem_8() {
        use crate::nn::{
            grad_check_directional, softmax_cross_entropy, softmax_cross_entropy_backward,
        };
        let mut spec = ResNetSpec::tiny();
        spec.stem_channels = 8;
        spec.input_shape = (1, 16, 16);
        let mut model = build_model(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let batch = Tensor::new(
            vec![2, 1, 16, 16],
            (0..2 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let labels = vec![3usize, 11];

        model.zero_grads();
        let (mut logits, mut cache) = model.forward_train(&batch).unwrap();
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        softmax_cross_entropy_backward(&mut logits, &probs, &labels).unwrap();
        let g = Tensor::new(logits.shape.clone(), logits.grad.clone().unwrap()).unwrap();
        model.backward(&mut cache, &g).unwrap();

        let mut flat_point = Vec::new();
        let mut analytic = Vec::new();
        model.for_each_param(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                flat_point.extend_from_slice(&t.data);
                analytic.extend_from_slice(t.grad.as_ref().expect("grad populated"));
            }
        });
        let point = Tensor::new(vec![flat_point.len()], flat_point).unwrap();
        let direction: Vec<f64> =
            (0..analytic.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

        let template = model.clone();
        let loss = |p: &Tensor| {
            let mut m = template.clone();
            let mut at = 0;
            m.for_each_param(&mut |_, kind, t| {
                if kind == ParamKind::Trainable {
                    let len = t.data.len();
                    t.data.copy_from_slice(&p.data[at..at + len]);
                    t.grad = None;
                    at += len;
                }
            });
            let (logits, _) = m.forward_train(&batch).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().0
        };
        let r = grad_check_directional(loss, &point, &analytic, &direction, 1e-3);
        assert!(r.passed(), "full-model max rel err {}", r.max_rel_err);
    }
}
