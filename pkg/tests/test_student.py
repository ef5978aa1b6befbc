import numpy as np
import pytest

from agglomerate.errors import ContractError, DimensionError, FormatError
from agglomerate.features import PatchGrid
from agglomerate.numerics import Tensor, mse_loss
from agglomerate.student import (ProjectionHead, StudentConfig, encode,
                                 encode_tokens, init_projection_head,
                                 init_student, load_checkpoint,
                                 parameter_checksum, parameter_count, patchify,
                                 project, save_checkpoint)
from util import check_gradients

MINI = StudentConfig(patch_size=8, embed_dim=8, depth=1, heads=2, grid=(2, 1), mlp_ratio=2)


def mini_params(seed=0, dtype=np.float64):
    return init_student(MINI, np.random.default_rng(seed), dtype=dtype)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ContractError):
            StudentConfig(embed_dim=64, heads=5)

    def test_desk_scale_defaults(self):
        cfg = StudentConfig()
        assert (cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.heads, cfg.grid) == (8, 64, 2, 4, (8, 8))


class TestEncode:
    def test_output_shape_at_defaults(self):
        cfg = StudentConfig()
        params = init_student(cfg, np.random.default_rng(0))
        out = encode(np.random.default_rng(1).normal(size=(1, 64, 64)).astype(np.float32),
                     cfg, params)
        assert out.data.shape == (1, 8, 8, 64)

    def test_indivisible_input_rejected(self):
        cfg = StudentConfig()
        params = init_student(cfg, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            encode(np.zeros((1, 60, 64), dtype=np.float32), cfg, params)

    def test_wrong_grid_rejected(self):
        cfg = StudentConfig()
        params = init_student(cfg, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            encode(np.zeros((1, 32, 32), dtype=np.float32), cfg, params)

    def test_deterministic(self):
        cfg = StudentConfig()
        params = init_student(cfg, np.random.default_rng(0))
        x = np.random.default_rng(2).normal(size=(2, 64, 64)).astype(np.float32)
        np.testing.assert_array_equal(encode(x, cfg, params).data.data,
                                      encode(x, cfg, params).data.data)

    def test_permutation_equivariance_with_zeroed_positions(self):
        cfg = StudentConfig(patch_size=8, embed_dim=16, depth=2, heads=2, grid=(2, 2))
        params = init_student(cfg, np.random.default_rng(3))
        params["pos"].data[:] = 0.0
        patches = np.random.default_rng(4).normal(size=(1, 4, 64)).astype(np.float32)
        perm = np.array([2, 0, 3, 1])
        base = encode_tokens(patches, cfg, params).data.data.reshape(1, 4, 16)
        permuted = encode_tokens(patches[:, perm], cfg, params).data.data.reshape(1, 4, 16)
        np.testing.assert_allclose(permuted, base[:, perm], atol=1e-6)

    def test_gradcheck_miniature(self):
        params = mini_params()
        x = np.random.default_rng(5).normal(size=(1, 16, 8))
        target = np.random.default_rng(6).normal(size=(1, 2, 1, 8))

        def loss(p):
            return mse_loss(encode(x, MINI, p).data, Tensor(target))

        worst = check_gradients(loss, {k: v.data for k, v in params.items()}, total_probes=120)
        assert worst < 1e-4


class TestProjectionHead:
    def test_zero_weights_constant_bias(self):
        head = init_projection_head("t", 8, 5, np.random.default_rng(0), dtype=np.float64)
        head.w1.data[:] = 0.0
        head.w2.data[:] = 0.0
        head.b2.data[:] = 2.5
        emb = PatchGrid(Tensor(np.random.default_rng(1).normal(size=(2, 2, 2, 8))))
        out = project(emb, head)
        np.testing.assert_allclose(out.data.data, 2.5)

    def test_output_channels_per_teacher(self):
        emb = PatchGrid(Tensor(np.random.default_rng(2).normal(size=(1, 2, 2, 8))))
        for channels in (3, 8, 17):
            head = init_projection_head("t", 8, channels, np.random.default_rng(0), dtype=np.float64)
            assert project(emb, head).channels == channels

    def test_channel_mismatch(self):
        head = init_projection_head("t", 16, 4, np.random.default_rng(0))
        emb = PatchGrid(Tensor(np.zeros((1, 2, 2, 8), dtype=np.float32)))
        with pytest.raises(DimensionError):
            project(emb, head)

    def test_hidden_default_is_max(self):
        head = init_projection_head("t", 8, 20, np.random.default_rng(0))
        assert head.w1.shape == (8, 20)
        assert head.w2.shape == (20, 20)

    def test_gradcheck(self):
        emb_data = np.random.default_rng(3).normal(size=(1, 2, 2, 6))
        target = np.random.default_rng(4).normal(size=(1, 2, 2, 4))
        head0 = init_projection_head("t", 6, 4, np.random.default_rng(5), dtype=np.float64)
        arrays = {k.split(".")[-1]: v.data for k, v in head0.params("h").items()}

        def loss(p):
            head = ProjectionHead("t", p["w1"], p["b1"], p["w2"], p["b2"])
            return mse_loss(project(PatchGrid(Tensor(emb_data)), head).data, Tensor(target))

        assert check_gradients(loss, arrays, total_probes=60) < 1e-4


class TestParameterBudget:
    def test_desk_scale_total_under_500k(self):
        cfg = StudentConfig()
        params = init_student(cfg, np.random.default_rng(0))
        total = parameter_count(params)
        for i, channels in enumerate((64, 64, 64)):
            head = init_projection_head(f"t{i}", cfg.embed_dim, channels,
                                        np.random.default_rng(i))
            total += parameter_count(head.params())
        assert total < 500_000

    def test_checksum_tracks_any_change(self):
        params = init_student(StudentConfig(), np.random.default_rng(0))
        before = parameter_checksum(params)
        assert parameter_checksum(params) == before
        params["pos"].data[0, 0] += 1.0
        assert parameter_checksum(params) != before


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_student(StudentConfig(embed_dim=16, depth=1, heads=2, grid=(2, 2)),
                              np.random.default_rng(0))
        path = tmp_path / "ckpt.bin"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(params)
        for name, arr in loaded.items():
            np.testing.assert_array_equal(arr, params[name].data)

    def test_scalarless_shapes_preserved(self, tmp_path):
        params = {"a": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)),
                  "b": Tensor(np.float32(3.0))}
        path = tmp_path / "c.bin"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert loaded["a"].shape == (2, 3)
        assert loaded["b"].shape == ()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_crc_mismatch(self, tmp_path):
        params = {"w": Tensor(np.ones((4, 4), dtype=np.float32))}
        path = tmp_path / "crc.bin"
        save_checkpoint(params, path)
        blob = bytearray(path.read_bytes())
        blob[-6] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)


def test_patchify_layout():
    # token (i, j) must carry exactly the pixels of its patch, row-major
    cfg = StudentConfig(patch_size=2, embed_dim=4, depth=1, heads=1, grid=(2, 2))
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    patches = patchify(img, cfg)
    np.testing.assert_array_equal(patches[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(patches[0, 3], [10, 11, 14, 15])
