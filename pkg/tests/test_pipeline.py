import inspect

import numpy as np
import pytest

from rebq import tensor as T
from rebq.pipeline import (ModelConfig, OptimizerConfig, VariantSpec, build_variant,
                           forward_batch, forward_sample, predict, predict_batch,
                           train_task, variant_from_name)
from rebq.prompt import PromptPool, PromptVector
from rebq.reconstruct import counterparts
from rebq.tensor import Tensor

from conftest import TINY

MCFG = ModelConfig(num_classes=4, pool_size=6, memory_pool_size=6, prompt_len=3,
                   prompted_layers=8, lam=0.01)


def make_model(tiny_backbone, variant="canonical", **overrides):
    import dataclasses
    mcfg = dataclasses.replace(MCFG, **overrides)
    return build_variant(variant, tiny_backbone, mcfg, seed=42)


def masked_pair(sample):
    return counterparts(sample, TINY.num_patches, TINY.patch_dim)


class TestBuildVariant:
    def test_canonical_trainable_set(self, tiny_backbone):
        model = make_model(tiny_backbone)
        names = set(model.named_parameters())
        groups = {n.split(".")[0] for n in names}
        assert groups == {"folder", "album", "memory", "head"}
        assert isinstance(model.folder, PromptPool)
        assert isinstance(model.memory, PromptPool)

    def test_prompted_layers_clamped_to_backbone(self, tiny_backbone):
        model = make_model(tiny_backbone)
        assert model.prompted_layers == TINY.num_layers
        assert model.folder.components.shape[1] == TINY.num_layers

    def test_no_memory_pool_is_single_block(self, tiny_backbone):
        model = make_model(tiny_backbone, variant="no_memory_pool")
        assert isinstance(model.memory, PromptVector)
        assert model.memory.block.shape == (TINY.num_layers, 2, 3, TINY.embed_dim)

    def test_unified_pool_shared(self, tiny_backbone):
        model = make_model(tiny_backbone, variant="no_modality_specific_pool")
        assert model.unified is not None
        assert model.text_source() is model.visual_source()
        assert model.folder is None and model.album is None

    def test_baseline_blocks(self, tiny_backbone):
        model = make_model(tiny_backbone, variant="baseline")
        assert set(model.baseline_blocks) == {"text-only", "image-only", "complete"}
        assert model.memory is None and model.folder is None

    def test_contradictory_specs_rejected(self, tiny_backbone):
        with pytest.raises(ValueError):
            build_variant(VariantSpec(text_prompts="unified", visual_prompts="pool"),
                          tiny_backbone, MCFG, 0)
        with pytest.raises(ValueError):
            build_variant(VariantSpec(reconstruction=True, memory="none"),
                          tiny_backbone, MCFG, 0)
        with pytest.raises(ValueError):
            variant_from_name("not_a_variant")

    def test_unfrozen_backbone_rejected(self):
        from rebq.backbone import MultimodalBackbone
        bb = MultimodalBackbone(TINY, np.random.default_rng(0))
        with pytest.raises(ValueError):
            build_variant("canonical", bb, MCFG, 0)


class TestForward:
    def test_logits_length(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        logits = forward_sample(model, complete_samples[0])
        assert logits.shape == (4,)

    def test_complete_sample_skips_reconstruction(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        _, info = forward_batch(model, complete_samples[:3])
        assert info.reconstructed_text == [False] * 3
        assert info.reconstructed_visual == [False] * 3

    def test_missing_modality_reconstructed(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        t_only, i_only = masked_pair(complete_samples[0])
        _, info = forward_batch(model, [t_only, i_only, complete_samples[1]])
        assert info.reconstructed_visual == [True, False, False]
        assert info.reconstructed_text == [False, True, False]

    def test_no_reconstruction_variant_uses_raw_queries(self, tiny_backbone,
                                                        complete_samples):
        model = make_model(tiny_backbone, variant="no_reconstruction")
        t_only, _ = masked_pair(complete_samples[0])
        _, info = forward_batch(model, [t_only])
        assert info.reconstructed_visual == [False]

    def test_msq_off_injects_only_available_modality(self, tiny_backbone,
                                                     complete_samples):
        model = make_model(tiny_backbone, variant="no_modality_specific_query")
        t_only, i_only = masked_pair(complete_samples[0])
        _, info = forward_batch(model, [t_only, i_only, complete_samples[1]])
        assert info.injected[0] == ("text",)
        assert info.injected[1] == ("visual",)
        assert info.injected[2] == ("text", "visual")

    def test_both_missing_rejected(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        bad = type(complete_samples[0])(id="bad", text_tokens=[1],
                                        patches=complete_samples[0].patches, label=0)
        bad.has_text = False
        bad.has_visual = False
        with pytest.raises(ValueError):
            forward_batch(model, [bad])

    def test_batch_matches_single(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        t_only, i_only = masked_pair(complete_samples[0])
        batch = [complete_samples[1], t_only, i_only]
        logits, info = forward_batch(model, batch)
        for row, orig in enumerate(info.order):
            single = forward_sample(model, batch[orig])
            np.testing.assert_allclose(logits.data[row], single.data, atol=1e-10)

    def test_group_order_permutation(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        t_only, i_only = masked_pair(complete_samples[0])
        batch = [complete_samples[1], t_only, i_only]
        _, info = forward_batch(model, batch)
        assert info.order == [1, 2, 0]


class TestPredict:
    def test_argmax(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        pred = predict(model, complete_samples[0])
        logits = forward_sample(model, complete_samples[0]).data
        assert pred == int(np.argmax(logits))

    def test_shift_invariance(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        logits = forward_sample(model, complete_samples[0]).data
        assert int(np.argmax(logits)) == int(np.argmax(logits + 123.0))

    def test_multi_label_threshold(self):
        # sigmoid(z) > 0.5 iff z > 0: logits (-2, +2) activate only index 1
        logits = np.array([-2.0, 2.0])
        active = sorted(int(c) for c in np.nonzero(logits > 0.0)[0])
        assert active == [1]

    def test_predict_signature_task_agnostic(self):
        params = inspect.signature(predict).parameters
        assert "session" not in params and "task" not in params

    def test_predict_batch_matches_predict(self, tiny_backbone, complete_samples):
        model = make_model(tiny_backbone)
        t_only, i_only = masked_pair(complete_samples[0])
        batch = [complete_samples[1], t_only, i_only, complete_samples[2]]
        assert predict_batch(model, batch) == [predict(model, s) for s in batch]


class TestTrainTask:
    def test_empty_session_rejected(self, tiny_backbone):
        model = make_model(tiny_backbone)
        with pytest.raises(ValueError):
            train_task(model, [], 1, OptimizerConfig(), seed=0)

    def test_loss_decomposition_exact(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone)
        log = train_task(model, stream.train_data(0)[:8], 1,
                         OptimizerConfig(batch_size=4), seed=1)
        lam = model.mcfg.lam
        for step in log.steps:
            assert step.total == step.classification + lam * step.reconstruction

    def test_lambda_zero_total_equals_classification(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone, lam=0.0)
        log = train_task(model, stream.train_data(0)[:8], 1,
                         OptimizerConfig(batch_size=4), seed=2)
        for step in log.steps:
            assert step.total == step.classification
            assert step.reconstruction == 0.0

    def test_zero_lr_step_leaves_parameters(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone)
        before = model.parameter_bytes()
        # warmup over the single step: lr at step 0 is exactly 0
        train_task(model, stream.train_data(0)[:4], 1,
                   OptimizerConfig(batch_size=4, warmup_frac=1.0), seed=3)
        assert model.parameter_bytes() == before

    def test_backbone_frozen_through_training(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone)
        before = tiny_backbone.parameter_bytes()
        train_task(model, stream.train_data(0)[:12], 1,
                   OptimizerConfig(batch_size=4), seed=4)
        assert tiny_backbone.parameter_bytes() == before

    def test_training_moves_pools_and_head(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone)
        before = model.parameter_bytes()
        train_task(model, stream.train_data(0)[:12], 2,
                   OptimizerConfig(batch_size=4), seed=5)
        assert model.parameter_bytes() != before

    def test_gradient_routing_lambda_positive(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone)
        batch = [s for s in stream.train_data(0) if s.missing_type == "complete"][:3]
        logits, info = forward_batch(model, batch)
        from rebq.pipeline import _targets
        from rebq.reconstruct import reconstruction_loss
        l_c = T.cross_entropy(logits, _targets(model, [batch[i] for i in info.order]))
        l_r = reconstruction_loss(batch, model.memory, model.backbone,
                                  model.prompted_layers)
        T.add(l_c, T.scale(l_r, 0.01)).backward()
        assert model.memory.components.grad is not None
        assert np.abs(model.memory.components.grad).sum() > 0
        for p in (model.folder.components, model.head_w):
            assert p.grad is not None

    def test_gradient_routing_lambda_zero_classification_path(self, tiny_backbone,
                                                              tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone, lam=0.0)
        incomplete = [s for s in stream.train_data(0) if s.missing_type != "complete"][:3]
        complete = [s for s in stream.train_data(0) if s.missing_type == "complete"][:3]
        from rebq.pipeline import _targets

        # only complete samples: no reconstruction happens, memory gets nothing
        logits, info = forward_batch(model, complete)
        T.cross_entropy(logits, _targets(model, [complete[i] for i in info.order])).backward()
        assert model.memory.components.grad is None

        # incomplete samples route gradient into the memory pool through q-hat
        logits, info = forward_batch(model, incomplete)
        T.cross_entropy(logits, _targets(model, [incomplete[i] for i in info.order])).backward()
        assert model.memory.components.grad is not None
        assert np.abs(model.memory.components.grad).sum() > 0

    def test_deterministic_training(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        runs = []
        for _ in range(2):
            model = make_model(tiny_backbone)
            train_task(model, stream.train_data(0)[:12], 1,
                       OptimizerConfig(batch_size=4), seed=6)
            runs.append(model.parameter_bytes())
        assert runs[0] == runs[1]

    def test_baseline_trains(self, tiny_backbone, tiny_benchmark):
        _, stream = tiny_benchmark
        model = make_model(tiny_backbone, variant="baseline")
        log = train_task(model, stream.train_data(0)[:8], 1,
                         OptimizerConfig(batch_size=4), seed=7)
        assert all(s.reconstruction == 0.0 for s in log.steps)
        names = set(model.named_parameters())
        assert any(n.startswith("baseline.") for n in names)


class TestFusedPath:
    def test_fused_losses_match_unfused(self, tiny_backbone, tiny_benchmark):
        """The shared-pass training path must agree with the spec-surface ops."""
        from rebq.pipeline import _classification_losses, _targets
        from rebq.reconstruct import reconstruction_loss

        _, stream = tiny_benchmark
        model = make_model(tiny_backbone)
        batch = stream.train_data(0)[:6]
        l_c_fused, l_r_fused = _classification_losses(model, batch)

        logits, info = forward_batch(model, batch)
        l_c_ref = T.cross_entropy(logits, _targets(model, [batch[i] for i in info.order]))
        complete = [s for s in batch if s.missing_type == "complete"]
        l_r_ref = reconstruction_loss(complete, model.memory, model.backbone,
                                      model.prompted_layers)
        assert l_c_fused.item() == pytest.approx(l_c_ref.item(), abs=1e-10)
        assert l_r_fused.item() == pytest.approx(l_r_ref.item(), abs=1e-10)


class TestEndToEndGradient:
    def test_joint_loss_gradient_vs_finite_differences(self, tiny_backbone,
                                                       complete_samples):
        """Finite-difference check of the full objective on a tiny model."""
        from test_tensor import assert_grad_close, finite_diff_grad
        from rebq.pipeline import _targets
        from rebq.reconstruct import reconstruction_loss

        model = make_model(tiny_backbone, pool_size=2, memory_pool_size=2,
                           prompt_len=2)
        t_only, _ = masked_pair(complete_samples[0])
        batch = [complete_samples[1], t_only]

        def build():
            logits, info = forward_batch(model, batch)
            l_c = T.cross_entropy(logits, _targets(model, [batch[i] for i in info.order]))
            l_r = reconstruction_loss([complete_samples[1]], model.memory,
                                      model.backbone, model.prompted_layers)
            return T.add(l_c, T.scale(l_r, model.mcfg.lam))

        build().backward()
        for name in ("memory.components", "memory.keys", "memory.attention",
                     "folder.components", "album.keys", "head.w"):
            p = model.named_parameters()[name]
            analytic = p.grad.copy()
            p.grad = None
            assert_grad_close(analytic, finite_diff_grad(build, p))
