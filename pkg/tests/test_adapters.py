import numpy as np
import pytest

from fedrf.adapters import (
    LayoutError,
    attach_film,
    attach_lora,
    count_trainable,
    pack,
    read_vector,
    unpack,
    write_vector,
)
from fedrf.tensor import grad_check, mse_loss
from fedrf.wavenet import WaveNetConfig, build


@pytest.fixture(scope="module")
def backbone():
    return build(WaveNetConfig(), np.random.default_rng(0))


@pytest.fixture(scope="module")
def mixture():
    return np.random.default_rng(1).standard_normal((2, 2, 300)).astype(np.float32)


def small(seed=0):
    return build(WaveNetConfig(n_blocks=2, channels=4), np.random.default_rng(seed)).astype(np.float64)


def adapter_grad_error(model, seed=0):
    rng = np.random.default_rng(seed)
    x, t = rng.standard_normal((2, 2, 32)), rng.standard_normal((2, 2, 32))
    ps = model.trainable_parameters()

    def fun(w):
        pos = 0
        for p in ps:
            p.values[...] = w[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        model.zero_grad()
        y, cache = model.forward_train(x)
        loss, gy = mse_loss(y, t)
        model.backward(gy, cache)
        return loss, np.concatenate([p.grad.ravel() for p in ps])

    return grad_check(fun, np.concatenate([p.values.ravel() for p in ps]))


class TestLora:
    @pytest.mark.parametrize("rank,count", [(2, 7_200), (4, 14_400), (8, 28_800)])
    def test_counts(self, backbone, rank, count):
        m = backbone.clone()
        attach_lora(m, rank)
        assert count_trainable(m) == count == 15 * (3 * rank * 48 + 2 * 48 * rank)
        assert len(pack(m)) == count

    def test_share_of_backbone(self, backbone):
        m = backbone.clone()
        attach_lora(m, 4)
        assert round(100 * count_trainable(m) / backbone.param_count(), 3) == 5.107

    @pytest.mark.parametrize("rank", [2, 4, 8])
    def test_zero_init_equivalence(self, backbone, mixture, rank):
        m = backbone.clone()
        attach_lora(m, rank, rng=np.random.default_rng(rank))
        np.testing.assert_array_equal(m(mixture), backbone(mixture))

    def test_branch_dilation_and_shapes(self, backbone):
        m = backbone.clone()
        a = attach_lora(m, 4)
        assert a.dilations == backbone.config.dilations
        assert a.A[0].shape == (4, 48, 3) and a.B[0].shape == (96, 4, 1)
        assert all(not b.values.any() for b in a.B)
        assert a.scale == 1.0

    def test_backbone_frozen(self, backbone):
        m = backbone.clone()
        attach_lora(m, 4)
        assert all(not p.trainable for p in m.params)

    def test_double_attach(self, backbone):
        m = backbone.clone()
        attach_lora(m, 2)
        with pytest.raises(RuntimeError, match="already"):
            attach_lora(m, 2)
        with pytest.raises(RuntimeError, match="already"):
            attach_film(m)

    def test_grad_check(self):
        m = small()
        a = attach_lora(m, 2, rng=np.random.default_rng(3))
        for b in a.B:
            b.values[...] = 0.3 * np.random.default_rng(4).standard_normal(b.shape)
        assert adapter_grad_error(m) < 1e-4

    def test_backbone_untouched_by_backward(self):
        m = small()
        attach_lora(m, 2)
        x = np.random.default_rng(0).standard_normal((2, 1, 32))
        y, cache = m.forward_train(x)
        m.backward(np.ones_like(y), cache)
        assert all(not p.grad.any() for p in m.params)


class TestFilm:
    def test_count(self, backbone):
        m = backbone.clone()
        attach_film(m)
        assert count_trainable(m) == 1_440

    def test_identity_init(self, backbone, mixture):
        m = backbone.clone()
        attach_film(m)
        np.testing.assert_array_equal(m(mixture), backbone(mixture))

    def test_annihilation(self):
        m = small()
        f = attach_film(m)
        for g in f.gamma:
            g.values[...] = 0
        x = np.random.default_rng(0).standard_normal((2, 1, 32))
        _, cache = m.forward_train(x)
        for bc in cache["blocks"]:
            assert not bc["x"].any()

    def test_grad_check(self):
        m = small()
        f = attach_film(m)
        rng = np.random.default_rng(2)
        for p in f.parameters():
            p.values += 0.3 * rng.standard_normal(p.shape)
        assert adapter_grad_error(m) < 1e-4


class TestVectors:
    def test_full_mode_count(self, backbone):
        m = backbone.clone()
        m.set_trainable(True)
        assert count_trainable(m) == 281_954
        assert len(pack(m, "full")) == 281_954

    def test_pack_unpack_idempotent(self, backbone):
        m = backbone.clone()
        attach_lora(m, 4)
        v = pack(m)
        v2 = v.with_data(np.random.default_rng(0).standard_normal(len(v)))
        unpack(v2, m)
        np.testing.assert_array_equal(pack(m).data, v2.data)
        unpack(pack(m), m)
        np.testing.assert_array_equal(pack(m).data, v2.data)

    def test_rank_mismatch(self, backbone):
        m2, m4 = backbone.clone(), backbone.clone()
        attach_lora(m2, 2)
        attach_lora(m4, 4)
        with pytest.raises(LayoutError, match="rank"):
            unpack(pack(m2), m4)

    def test_method_mismatch(self, backbone):
        mf, ml = backbone.clone(), backbone.clone()
        attach_film(mf)
        attach_lora(ml, 4)
        with pytest.raises(LayoutError):
            unpack(pack(mf), ml)

    def test_size_mismatch(self):
        a, b = small(), build(WaveNetConfig(n_blocks=3, channels=4))
        attach_lora(a, 2)
        attach_lora(b, 2)
        with pytest.raises(LayoutError):
            unpack(pack(a), b)

    def test_no_adapter(self, backbone):
        with pytest.raises(LayoutError):
            pack(backbone)


class TestFladFile:
    @pytest.mark.parametrize("method", ["lora", "film"])
    def test_round_trip(self, backbone, tmp_path, method):
        m = backbone.clone()
        attach_lora(m, 8) if method == "lora" else attach_film(m)
        v = pack(m)
        v = v.with_data(np.random.default_rng(0).standard_normal(len(v)))
        path = tmp_path / "a.flad"
        write_vector(v, path)
        back = read_vector(path)
        assert back.same_layout(v)
        np.testing.assert_array_equal(back.data, v.data)

    def test_payload_size(self, backbone, tmp_path):
        m = backbone.clone()
        attach_lora(m, 4)
        path = tmp_path / "a.flad"
        write_vector(pack(m), path)
        assert path.stat().st_size == 10 + 14_400 * 4

    def test_truncated(self, backbone, tmp_path):
        m = backbone.clone()
        attach_film(m)
        path = tmp_path / "a.flad"
        write_vector(pack(m), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(LayoutError, match="payload"):
            read_vector(path)

    def test_full_vector_rejected(self, backbone, tmp_path):
        with pytest.raises(LayoutError):
            write_vector(pack(backbone, "full"), tmp_path / "x.flad")
