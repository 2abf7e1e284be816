from math import comb

import numpy as np
import pytest
import torch

from diarist import ModelConfig, build_model, load_model, save_model
from diarist.errors import FormatError
from diarist.segmentation import segment_forward


def desk_config(**overrides):
    base = dict(
        processing="mamba", window=10.0, num_speakers=3, max_overlap=2,
        loss_type="powerset", feature_dim=40, d_model=16, n_blocks=1, d_state=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_multilabel_output_width(self):
        config = desk_config(loss_type="multilabel", num_speakers=4)
        assert config.num_classes == 4

    def test_powerset_output_width(self):
        config = desk_config(loss_type="powerset", num_speakers=4, max_overlap=2)
        assert config.num_classes == 11  # 1 + 4 + 6

    def test_output_width_formula_enumerated(self):
        for n in range(1, 7):
            for k in range(1, min(n, 3) + 1):
                config = desk_config(loss_type="powerset", num_speakers=n, max_overlap=k)
                assert config.num_classes == sum(comb(n, i) for i in range(k + 1))

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            desk_config(num_speakers=2, max_overlap=3)
        with pytest.raises(ValueError):
            desk_config(processing="transformer")
        with pytest.raises(ValueError):
            desk_config(loss_type="ordinal")
        with pytest.raises(ValueError):
            desk_config(window=-1.0)


class TestBuildAndForward:
    def test_deterministic_initialization(self):
        config = desk_config()
        m1, m2 = build_model(config, seed=7), build_model(config, seed=7)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)

    def test_different_seeds_differ(self):
        config = desk_config()
        m1, m2 = build_model(config, seed=1), build_model(config, seed=2)
        assert any(not torch.equal(p1, p2) for p1, p2 in zip(m1.parameters(), m2.parameters()))

    def test_powerset_rows_are_distributions(self, rng):
        model = build_model(desk_config(), seed=0)
        probs = segment_forward(model, rng.standard_normal((50, 40)).astype(np.float32))
        assert probs.shape == (50, 7)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6
        assert (probs >= 0).all()

    def test_multilabel_entries_in_unit_interval(self, rng):
        model = build_model(desk_config(loss_type="multilabel"), seed=0)
        probs = segment_forward(model, rng.standard_normal((30, 40)).astype(np.float32))
        assert probs.shape == (30, 3)
        assert ((probs > 0) & (probs < 1)).all()

    def test_output_frames_for_ten_second_window(self, rng):
        # 10 s at 50 fps -> 500 frames in, 500 frames out.
        model = build_model(desk_config(), seed=0)
        probs = segment_forward(model, rng.standard_normal((500, 40)).astype(np.float32))
        assert probs.shape[0] == 500

    def test_lstm_trunk_width_feeds_head(self):
        model = build_model(desk_config(processing="lstm", lstm_hidden=128, lstm_layers=4), seed=0)
        assert model.head[0].in_features == 256

    def test_forward_deterministic(self, rng):
        model = build_model(desk_config(processing="lstm", lstm_layers=1, lstm_hidden=8), seed=0)
        x = rng.standard_normal((20, 40)).astype(np.float32)
        assert np.array_equal(segment_forward(model, x), segment_forward(model, x))

    def test_feature_dim_mismatch_rejected(self, rng):
        model = build_model(desk_config(), seed=0)
        with pytest.raises(ValueError, match="feature dim"):
            segment_forward(model, rng.standard_normal((10, 13)).astype(np.float32))


class TestParameterCounts:
    def test_full_scale_mamba_processing_size(self):
        model = build_model(ModelConfig.full_scale(processing="mamba"), seed=0)
        count = model.num_parameters()
        assert abs(count - 8.1e6) / 8.1e6 < 0.10

    def test_full_scale_lstm_processing_size(self):
        model = build_model(ModelConfig.full_scale(processing="lstm"), seed=0)
        count = model.num_parameters()
        assert abs(count - 2.1e6) / 2.1e6 < 0.10


class TestCheckpointFormat:
    def test_round_trip_bit_identical(self, tmp_path):
        model = build_model(desk_config(), seed=5)
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        back = load_model(path)
        assert back.config == model.config
        for (n1, p1), (n2, p2) in zip(model.state_dict().items(), back.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model = build_model(desk_config(), seed=0)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        blob = bytearray(path.read_bytes())
        blob[4] = 42
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = build_model(desk_config(), seed=0)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FormatError, match="truncated"):
            load_model(path)

    def test_embedded_config_drives_rebuild(self, tmp_path, rng):
        # No external config: the checkpoint alone must reproduce behavior.
        config = desk_config(processing="lstm", lstm_layers=2, lstm_hidden=16, loss_type="multilabel")
        model = build_model(config, seed=9)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        back = load_model(path)
        x = rng.standard_normal((25, 40)).astype(np.float32)
        assert np.array_equal(segment_forward(model, x), segment_forward(back, x))
        assert back.config.processing == "lstm"
        assert back.config.lstm_layers == 2
