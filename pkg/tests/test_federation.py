import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrf.adapters import AdapterVector, LayoutError, attach_lora, pack
from fedrf.federation import (
    AdaptConfig,
    CommLedger,
    InterferenceKind,
    exchanged_count,
    fedavg,
    node_profiles,
    partition,
    run_federated,
    run_local,
)
from fedrf.signal_chain import OfdmConfig
from fedrf.wavenet import WaveNetConfig, build

TINY_OFDM = OfdmConfig(n_symbols=2)
CS2, CS3, EMI = InterferenceKind.CS2, InterferenceKind.CS3, InterferenceKind.EMI


def vec(values, layout=(("x", (3,)),)):
    data = np.asarray(values, dtype=np.float32)
    return AdapterVector("lora", 1, 1, 1, layout, data)


@pytest.fixture(scope="module")
def backbone():
    return build(WaveNetConfig(n_blocks=2, channels=4), np.random.default_rng(0))


@pytest.fixture(scope="module")
def nodes():
    # 12 samples per 3000 at full scale
    return partition("balanced", seed=3, scale=0.004, cfg=TINY_OFDM)


def fast(**kw):
    base = dict(adapter="lora", rank=2, lr=1e-2, batch_size=4, epochs=3, rounds=2, local_epochs=1)
    base.update(kw)
    return AdaptConfig(**base)


def same_params(a, b):
    return all(np.array_equal(p.values, q.values) for p, q in zip(a.params, b.params))


class TestPartition:
    def test_balanced_totals(self):
        profs = node_profiles("balanced")
        assert [p.total for p in profs] == [3000] * 5
        assert [p.count(EMI) for p in profs] == [0, 0, 1000, 1000, 3000]

    def test_compositions(self):
        kinds = [{k for k, _ in p.composition} for p in node_profiles("balanced")]
        assert kinds == [{CS2}, {CS3}, {CS2, EMI}, {CS3, EMI}, {EMI}]

    def test_imbalanced_emi(self):
        assert [p.count(EMI) for p in node_profiles("imbalanced")] == [0, 0, 200, 200, 200]

    def test_unknown_regime(self):
        with pytest.raises(ValueError):
            node_profiles("chaotic")

    def test_deterministic(self):
        a = partition("imbalanced", 9, 0.004, TINY_OFDM)
        b = partition("imbalanced", 9, 0.004, TINY_OFDM)
        for na, nb in zip(a, b):
            assert len(na.train) == len(nb.train)
            np.testing.assert_array_equal(na.train[0].mixture, nb.train[0].mixture)

    def test_split(self, nodes):
        for n in nodes:
            assert len(n.train) + len(n.val) == n.profile.total
            assert len(n.val) >= 1

    def test_desk_scale_sizes(self):
        profs = node_profiles("balanced", 200 / 3000)
        assert [p.total for p in profs] == [200] * 5
        assert profs[2].count(EMI) == 67


class TestFedavg:
    def test_hand_value(self):
        out = fedavg([vec([0, 0, 0]), vec([4, 4, 4])], [1, 3])
        np.testing.assert_array_equal(out.data, [3, 3, 3])

    def test_equal_weights_mean(self):
        rng = np.random.default_rng(0)
        vs = [vec(rng.standard_normal(3)) for _ in range(5)]
        out = fedavg(vs, [7] * 5)
        np.testing.assert_allclose(out.data, np.mean([v.data for v in vs], axis=0), atol=1e-7)

    @settings(max_examples=100, deadline=None)
    @given(
        k=st.integers(1, 6),
        seed=st.integers(0, 2**32 - 1),
        weights=st.lists(st.integers(1, 5000), min_size=6, max_size=6),
    )
    def test_permutation_invariant(self, k, seed, weights):
        rng = np.random.default_rng(seed)
        vs = [vec(rng.standard_normal(3)) for _ in range(k)]
        w = weights[:k]
        perm = rng.permutation(k)
        a = fedavg(vs, w)
        b = fedavg([vs[i] for i in perm], [w[i] for i in perm])
        np.testing.assert_array_equal(a.data, b.data)

    @settings(max_examples=100, deadline=None)
    @given(k=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
    def test_fixed_point(self, k, seed):
        rng = np.random.default_rng(seed)
        v = vec(rng.standard_normal(3) * 10)
        out = fedavg([v] * k, list(rng.integers(1, 100, k)))
        np.testing.assert_array_equal(out.data, v.data)

    def test_layout_mismatch(self):
        with pytest.raises(LayoutError):
            fedavg([vec([1, 2, 3]), vec([1, 2, 3], (("y", (3,)),))], [1, 1])

    def test_zero_weight(self):
        with pytest.raises(ValueError, match="positive"):
            fedavg([vec([1, 2, 3])], [0])


class TestLedger:
    def test_csv_round_trip(self, tmp_path):
        led = CommLedger()
        led.record(1, 1, "lora_r4", 0.25, 14_400, 14_400)
        led.record(1, 2, "lora_r4", 0.125, 14_400, 14_400)
        path = tmp_path / "ledger.csv"
        led.to_csv(path)
        assert path.read_text().splitlines()[0] == "round,node,method,val_mse,params_up,params_down"
        back = CommLedger.from_csv(path)
        assert back.rows == led.rows
        assert back.bytes_uploaded() == 4 * 28_800

    def test_exchanged_counts_default_model(self):
        bb = build(WaveNetConfig())
        assert exchanged_count(bb, AdaptConfig(adapter="lora", rank=4)) == 14_400
        assert exchanged_count(bb, AdaptConfig(adapter="film")) == 1_440
        assert exchanged_count(bb, AdaptConfig(adapter="full")) == 281_954

    def test_upload_arithmetic(self):
        R, K = 10, 5
        assert R * K * 14_400 == 720_000
        assert R * K * 281_954 == 14_097_700
        assert round(281_954 / 14_400, 2) == 19.58


class TestRunLocal:
    def test_backbone_untouched(self, backbone, nodes):
        res = run_local("backbone", nodes[0], backbone)
        assert same_params(res.model, backbone)

    def test_lora_trains_only_adapter(self, backbone, nodes):
        res = run_local("l_lora", nodes[4], backbone, fast())
        assert same_params(res.model, backbone)
        assert any(b.values.any() for b in res.model.lora.B)

    def test_full_ft_changes_backbone(self, backbone, nodes):
        res = run_local("full_ft", nodes[0], backbone, fast(lr=1e-3))
        assert not same_params(res.model, backbone)
        assert res.model.adapter is None

    def test_best_restore(self, backbone, nodes):
        res = run_local("l_film", nodes[2], backbone, fast(epochs=4))
        assert min(res.val_history) <= res.val_history[0]
        assert res.val_history[res.best_epoch] == min(res.val_history)

    def test_plateau_halves_lr(self, backbone, nodes):
        res = run_local("l_lora", nodes[3], backbone, fast(lr=5.0, epochs=6))
        assert any(b == a * 0.5 for a, b in zip(res.lr_history, res.lr_history[1:]))

    def test_unknown_method(self, backbone, nodes):
        with pytest.raises(ValueError, match="unknown"):
            run_local("l_prompt", nodes[0], backbone)


class TestRunFederated:
    def test_ledger_and_freeze(self, backbone, nodes):
        res = run_federated(nodes, backbone, fast(rounds=2))
        assert len(res.ledger.rows) == 2 * 5
        n = exchanged_count(backbone, fast())
        assert all(r["params_up"] == n for r in res.ledger.rows)
        assert res.ledger.total_uploaded() == 2 * 5 * n
        assert res.val_history.shape == (2, 5)
        for m in res.models:
            assert same_params(m, backbone)

    def test_one_round_one_upload(self, backbone, nodes):
        res = run_federated(nodes, backbone, fast(rounds=1, local_epochs=1, adapter="film"))
        assert sorted(r["node"] for r in res.ledger.rows) == [1, 2, 3, 4, 5]

    def test_zero_epochs_forbidden(self, backbone, nodes):
        with pytest.raises(ValueError):
            run_federated(nodes, backbone, fast(local_epochs=0))

    def test_degenerate_matches_local(self, backbone, nodes):
        cfg = fast(rounds=1, local_epochs=2, epochs=2, schedule=False)
        fed = run_federated(nodes[2:3], backbone, cfg)
        loc = run_local("l_lora", nodes[2], backbone, cfg)
        np.testing.assert_array_equal(fed.global_vector.data, pack(loc.model).data)

    def test_parallel_matches_sequential(self, backbone, nodes):
        a = run_federated(nodes, backbone, fast(parallel=1))
        b = run_federated(nodes, backbone, fast(parallel=3))
        np.testing.assert_array_equal(a.global_vector.data, b.global_vector.data)
        assert a.ledger.rows == b.ledger.rows

    def test_fedavg_full(self, backbone, nodes):
        res = run_federated(nodes, backbone, fast(adapter="full", lr=1e-4, rounds=1))
        assert all(r["params_up"] == backbone.param_count() for r in res.ledger.rows)
        assert res.global_vector.method == "full"

    def test_empty_node_rejected(self, backbone, nodes):
        empty = nodes[0].__class__(nodes[0].profile, nodes[0].train.subset([]), nodes[0].val)
        with pytest.raises(ValueError, match="no training data"):
            run_federated([empty], backbone, fast())
