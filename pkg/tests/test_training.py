"""Training loops: optimizer arithmetic, loss logging, freezing, early stop."""

import numpy as np
import pytest

from smdssl import autodiff as ad
from smdssl import losses as L
from smdssl.augment import AugmentConfig
from smdssl.autodiff import Tensor
from smdssl.cohort import CohortSpec, generate
from smdssl.config import TrainConfig
from smdssl.data import build_ft_dataset, compute_stats, filter_visits, make_split
from smdssl.losses import LossConfig
from smdssl.models import (
    HeadConfig, MLPConfig, ModelConfig, SequenceConfig, SignalEncoderConfig,
    init_model,
)
from smdssl.training import (
    Adam, FitResult, NonFiniteLossError, assemble_view_batch, evaluate,
    finetune, pretrain, pt_forward,
)

SAMPLE_RATE = 4.0
P_VIEW = 40


def tiny_model_config(mode="multimodal", family="nt_xent"):
    return ModelConfig(
        mode=mode,
        structured_encoder=MLPConfig(layers=2, hidden=16, out_dim=8),
        static_encoder=MLPConfig(layers=2, hidden=16, out_dim=8),
        signal_encoder=SignalEncoderConfig(stage_channels=(8, 16), blocks_per_stage=(1, 1),
                                           kernel=7, out_dim=16),
        sequence=SequenceConfig(layers=1, hidden=16),
        head=HeadConfig(layers=2, hidden=32, out_dim=16),
        with_predictors=(family == "simsiam"),
    )


def tiny_world(n_patients=16, hours_min=12, hours_max=14, seed=0):
    spec = CohortSpec(n_patients=n_patients, hours_min=hours_min, hours_max=hours_max,
                      sample_rate=SAMPLE_RATE, signal_missing_rate=0.05, seed=seed)
    visits = generate(spec.validate())
    split = make_split(visits, seed)
    stats = compute_stats(filter_visits(visits, split.development()))
    return visits, split, stats


def tiny_train_cfg(**kw):
    base = dict(batch_size=4, pt_epochs=1, ft_max_epochs=3, eval_batch_size=64,
                bootstrap_resamples=50)
    base.update(kw)
    return TrainConfig(**base).validate()


class TestAdam:
    def test_single_step_magnitude(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        opt = Adam([("p", p)], lr=1e-3)
        opt.step()
        delta = p.data[0] - 1.0
        # first step with g=1: -lr * 1 / (1 + eps)
        assert delta == pytest.approx(-1e-3 / (1.0 + 1e-8), abs=1e-12)
        assert delta == pytest.approx(-1e-3, abs=1e-8)

    def test_none_grad_means_no_movement(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        opt.step()
        assert p.data[0] == 2.0

    def test_bias_correction_sequence(self):
        # two steps with constant gradient follow the closed-form update
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.01, beta1=0.9, beta2=0.999, eps=0.0)
        for _ in range(2):
            p.grad = np.array([2.0])
            opt.step()
        # with constant gradients m_hat/sqrt(v_hat) == 1 at every step
        assert p.data[0] == pytest.approx(-0.02, abs=1e-12)


class TestPretrain:
    def test_one_epoch_logs_finite_losses(self):
        visits, split, stats = tiny_world()
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 0)
        curves = pretrain(
            filter_visits(visits, split.development()), model,
            LossConfig(family="nt_xent").validate(), AugmentConfig(),
            tiny_train_cfg(), stats, SAMPLE_RATE, seed=0,
        )
        assert len(curves.steps) >= 2
        for row in curves.steps:
            assert np.isfinite(row["global_loss"])
            assert np.isfinite(row["component_loss"])
            assert np.isfinite(row["total_loss"])

    def test_determinism_bitwise(self):
        visits, split, stats = tiny_world(seed=1)
        dev = filter_visits(visits, split.development())
        runs = []
        for _ in range(2):
            model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 3)
            curves = pretrain(dev, model, LossConfig().validate(), AugmentConfig(),
                              tiny_train_cfg(), stats, SAMPLE_RATE, seed=3)
            runs.append((curves, {k: v.copy() for k, (v, _) in model.state_arrays().items()}))
        assert runs[0][0].steps == runs[1][0].steps
        for name in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][name], runs[1][1][name])

    def test_component_only_gives_exact_zero_gradients_elsewhere(self):
        visits, split, stats = tiny_world(seed=2)
        dev = filter_visits(visits, split.development())
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 4)
        from smdssl.data import build_pt_dataset

        trajs = build_pt_dataset(dev, stats, seed=0)[:4]
        rng = np.random.default_rng(0)
        d, w, s, present = assemble_view_batch(trajs, AugmentConfig(), stats, SAMPLE_RATE, rng)
        cfg = LossConfig(family="nt_xent", global_weight=0.0, component_weight=1.0)
        g_term, c_term = pt_forward(model, cfg, d, w, s, present)
        total = L.combined_loss(g_term, c_term, cfg.global_weight, cfg.component_weight)
        model.zero_grad()
        ad.backward(total)
        for name, p in model.gru.named_parameters():
            assert np.allclose(p.grad, 0.0), f"gru.{name}"
        for name, p in model.structured_encoder.named_parameters():
            assert np.allclose(p.grad, 0.0), f"structured.{name}"
        for name, p in model.global_head.named_parameters():
            assert np.allclose(p.grad, 0.0), f"global_head.{name}"
        sig_grads = [np.abs(p.grad).max() for _, p in model.signal_encoder.named_parameters()]
        assert max(sig_grads) > 0.0

    def test_both_losses_monitored_under_global_only(self):
        visits, split, stats = tiny_world(seed=3)
        dev = filter_visits(visits, split.development())
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 5)
        head_before = {k: v.copy() for k, (v, _) in model.signal_head.state_arrays().items() }
        curves = pretrain(dev, model, LossConfig(global_weight=1.0, component_weight=0.0).validate(),
                          AugmentConfig(), tiny_train_cfg(), stats, SAMPLE_RATE, seed=5)
        assert all(np.isfinite(r["component_loss"]) for r in curves.steps)
        # the signal head never receives gradient: it stays at random init
        for name, p in model.signal_head.named_parameters():
            np.testing.assert_array_equal(head_before[f"{name}"], p.data)

    def test_non_finite_loss_aborts_with_diagnostic(self):
        # batchnorm keeps a diverging run finite, so simulate a numerically
        # dead parameter state directly
        visits, split, stats = tiny_world(seed=4)
        dev = filter_visits(visits, split.development())
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 6)
        model.signal_encoder.stem.weight.data[:] = np.nan
        with pytest.raises(NonFiniteLossError, match="epoch 0"):
            pretrain(dev, model, LossConfig().validate(), AugmentConfig(),
                     tiny_train_cfg(), stats, SAMPLE_RATE, seed=6)

    def test_negative_pool_instrumented_on_real_batch(self):
        visits, split, stats = tiny_world(seed=5)
        dev = filter_visits(visits, split.development())
        from smdssl.data import build_pt_dataset

        trajs = [t for t in build_pt_dataset(dev, stats, seed=1) if not t.signal_missing.any()][:4]
        assert len(trajs) == 4
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 7)
        rng = np.random.default_rng(1)
        d, w, s, present = assemble_view_batch(trajs, AugmentConfig(), stats, SAMPLE_RATE, rng)
        _, _, infos = pt_forward(model, LossConfig(family="nt_xent"), d, w, s, present, return_info=True)
        assert len(infos) == 8
        for info in infos:
            assert np.all(info["logits_per_anchor"] == 2 * 4 - 1)


class TestFinetune:
    def _fixture(self, strategy, label_fraction=1.0, seed=6, mode="multimodal"):
        visits, split, stats = tiny_world(n_patients=24, hours_min=12, hours_max=16, seed=seed)
        model = init_model(tiny_model_config(mode=mode),
                           {"static_dim": 4, "structured_dim": 6, "channels": 1}, seed)
        result = finetune(model, visits, split, "elevated_map", strategy,
                          tiny_train_cfg(), stats, P_VIEW, seed, label_fraction)
        return model, result, (visits, split, stats)

    def test_linear_strategy_freezes_encoder(self):
        visits, split, stats = tiny_world(n_patients=24, hours_min=12, hours_max=16, seed=6)
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 6)
        before = {name: p.data.copy() for name, p in model.named_parameters()
                  if not name.startswith("classifier")}
        finetune(model, visits, split, "elevated_map", "linear",
                 tiny_train_cfg(), stats, P_VIEW, 6)
        for name, p in model.named_parameters():
            if not name.startswith("classifier"):
                np.testing.assert_array_equal(before[name], p.data)

    def test_full_ft_respects_epoch_cap(self):
        _, result, _ = self._fixture("full_ft")
        assert result.epochs_run <= tiny_train_cfg().ft_max_epochs

    def test_early_stop_restores_best_epoch(self):
        model, result, (visits, split, stats) = self._fixture("full_ft")
        assert result.best_epoch == int(np.argmax(result.val_trace))
        # restored weights reproduce the best epoch's validation score
        from smdssl.metrics import auroc
        from smdssl.training import predict_scores, restrict_patients, _labels

        val_trajs, _ = build_ft_dataset(filter_visits(visits, split.validation), "elevated_map", stats)
        scores = predict_scores(model, val_trajs, P_VIEW)
        assert auroc(_labels(val_trajs), scores) == pytest.approx(result.val_trace[result.best_epoch], abs=1e-12)

    def test_label_fraction_restricts_patients(self):
        from smdssl.training import restrict_patients

        patients = [f"p{i}" for i in range(20)]
        subset = restrict_patients(patients, 0.25, seed=0)
        assert len(subset) == 5
        assert restrict_patients(patients, 0.25, seed=0) == subset
        assert set(subset) <= set(patients)

    def test_unknown_strategy_rejected(self):
        visits, split, stats = tiny_world(n_patients=24, hours_min=12, hours_max=16, seed=7)
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, 7)
        with pytest.raises(ValueError):
            finetune(model, visits, split, "elevated_map", "prompt_tuning",
                     tiny_train_cfg(), stats, P_VIEW, 7)


class TestEvaluate:
    def _models_and_trajs(self, seed=8):
        visits, split, stats = tiny_world(n_patients=24, hours_min=12, hours_max=16, seed=seed)
        model = init_model(tiny_model_config(), {"static_dim": 4, "structured_dim": 6, "channels": 1}, seed)
        test_trajs, _ = build_ft_dataset(filter_visits(visits, split.test), "elevated_map", stats)
        return model, test_trajs

    def test_strategy_selection_argmax(self):
        model, test_trajs = self._models_and_trajs()
        fits = [FitResult("linear", "elevated_map", 0.61, 0, [0.61], 1),
                FitResult("full_ft", "elevated_map", 0.75, 0, [0.75], 1)]
        entry = evaluate(fits, {"linear": model, "full_ft": model}, test_trajs, P_VIEW, 0, 20)
        assert entry["strategy"] == "full_ft"

    def test_tie_prefers_linear(self):
        model, test_trajs = self._models_and_trajs(seed=9)
        fits = [FitResult("linear", "elevated_map", 0.7, 0, [0.7], 1),
                FitResult("full_ft", "elevated_map", 0.7, 0, [0.7], 1)]
        entry = evaluate(fits, {"linear": model, "full_ft": model}, test_trajs, P_VIEW, 0, 20)
        assert entry["strategy"] == "linear"

    def test_report_entry_invariants(self):
        model, test_trajs = self._models_and_trajs(seed=10)
        fits = [FitResult("linear", "elevated_map", 0.6, 0, [0.6], 1),
                FitResult("full_ft", "elevated_map", 0.65, 0, [0.65], 1)]
        entry = evaluate(fits, {"linear": model, "full_ft": model}, test_trajs, P_VIEW, 0, 50)
        assert entry["auroc_ci95"][0] <= entry["auroc"] <= entry["auroc_ci95"][1]
        assert entry["n_test"] == len(test_trajs)

    def test_empty_test_set_rejected(self):
        model, _ = self._models_and_trajs(seed=11)
        fits = [FitResult("linear", "elevated_map", 0.6, 0, [0.6], 1)]
        with pytest.raises(ValueError):
            evaluate(fits, {"linear": model}, [], P_VIEW, 0, 10)


class TestCurves:
    def test_epoch_means_and_smoothing(self):
        from smdssl.training import Curves

        curves = Curves()
        for step in range(100):
            curves.append(step, step // 50, 1.0 - step * 0.004, 2.0 - step * 0.004, 3.0)
        means = curves.epoch_means("global_loss")
        assert means[1] < means[0]
        smooth = curves.smoothed("component_loss", window=50)
        assert smooth[0] > smooth[-1]

    def test_csv_round_trip_precision(self, tmp_path):
        from smdssl.training import Curves

        curves = Curves()
        curves.append(0, 0, 1.2345678901234567, 0.1, 1.33)
        path = tmp_path / "curves.csv"
        curves.write_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,epoch,global_loss,component_loss,total_loss"
        assert float(lines[1].split(",")[2]) == 1.2345678901234567
