import numpy as np

from lwta.attacks import AttackConfig
from lwta.baseline import build_relu_twin, relu_twin_spec
from lwta.data import synth_blobs
from lwta.network import (
    ConvLwtaSpec,
    ConvSpec,
    DenseLwtaSpec,
    DenseSpec,
    NetworkSpec,
    preset_spec,
    spec_param_count,
)
from lwta.objective import predict
from lwta.training import TrainConfig, adversarial_train, init_weights


class TestTwinSpec:
    def test_parameter_counts_match_for_presets(self):
        for name, shape in (("mlp-small", (8, 8, 1)), ("cnn-small", (8, 8, 1))):
            spec = preset_spec(name, shape, 10)
            twin = relu_twin_spec(spec)
            assert spec_param_count(twin) == spec_param_count(spec)

    def test_layer_mapping(self):
        spec = NetworkSpec(
            (6, 6, 1), 4,
            [ConvLwtaSpec(3, 2, kernel=3), DenseLwtaSpec(8, 2), DenseSpec(4)],
        )
        twin = relu_twin_spec(spec)
        conv, dense, head = twin.layers
        assert isinstance(conv, ConvSpec) and conv.channels == 6 and conv.activation == "relu"
        assert isinstance(dense, DenseSpec) and dense.width == 16 and dense.activation == "relu"
        assert isinstance(head, DenseSpec) and head.activation == "none"

    def test_single_unit_twin_differs_only_in_activation(self):
        spec = NetworkSpec((4, 1, 1), 2, [DenseLwtaSpec(5, 1), DenseSpec(2)])
        twin = relu_twin_spec(spec)
        assert twin.layers[0].width == 5  # same width as the 5 one-unit blocks
        assert twin.layers[0].activation == "relu"

    def test_built_twin_parameter_count(self):
        spec = preset_spec("mlp-small", (8, 8, 1), 10)
        lwta_net = init_weights(spec, np.random.default_rng(0))
        twin = build_relu_twin(spec, np.random.default_rng(0))
        assert twin.num_params() == lwta_net.num_params()


class TestTwinBehavior:
    def test_twin_is_deterministic_across_samples_and_seeds(self, rng):
        spec = NetworkSpec((6, 1, 1), 3, [DenseLwtaSpec(4, 2), DenseSpec(3)])
        twin = build_relu_twin(spec, np.random.default_rng(2))
        x = rng.random((5, 6, 1, 1))
        base, _ = predict(x, twin, num_samples=1, rng=np.random.default_rng(0))
        for L, seed in ((1, 123), (8, 7), (32, 99)):
            probs, _ = predict(x, twin, num_samples=L, rng=np.random.default_rng(seed))
            np.testing.assert_allclose(probs, base, atol=1e-12)
        assert not twin.is_stochastic

    def test_twin_trains_on_separable_blobs(self):
        data = synth_blobs(2, 64, 4, separation=0.9, seed=3, sigma=0.08)
        spec = NetworkSpec((4, 1, 1), 2, [DenseLwtaSpec(4, 2), DenseSpec(2)])
        twin = build_relu_twin(spec, np.random.default_rng(1))
        cfg = TrainConfig(
            epochs=40, batch_size=32, lr0=0.3, lr_halving_start_epoch=1000,
            attack=AttackConfig(epsilon=0.0, step_size=0.01, num_steps=1),
            kl_weight=0.0, seed=0, eval_size=128,
        )
        _, hist = adversarial_train(twin, data, cfg)
        assert hist.records[-1].nat_acc >= 0.95

    def test_twin_has_no_winner_states(self, rng):
        spec = NetworkSpec((6, 1, 1), 3, [DenseLwtaSpec(4, 2), DenseSpec(3)])
        twin = build_relu_twin(spec, np.random.default_rng(2))
        from lwta.tensor import Tensor

        _, states = twin.forward(Tensor(rng.random((2, 6, 1, 1)).astype(np.float32)))
        assert states == []
