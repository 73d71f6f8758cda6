import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgrade.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mgrade.data import SequenceBatch, load_dataset, save_dataset
from mgrade.dcls import make_cd
from mgrade.gradcheck import check_network, reference_config
from mgrade.layers import MlpParams, init_norm, layernorm_fwd
from mgrade.mingru import GruParams
from mgrade.model import (ConfigError, LayerParams, NetworkConfig, StreamingNetwork, count_params,
                          init_network, layer_fwd, network_fwd, params_from_arrays)
from mgrade.numcore import Rng, ShapeError

configs = st.builds(
    NetworkConfig,
    L=st.integers(1, 3), H=st.integers(1, 6), H_in=st.integers(1, 3), H_out=st.integers(1, 3),
    conv=st.sampled_from(["CD", "EID", "L", "none"]), K=st.integers(1, 4), d=st.integers(1, 3),
    d_b=st.integers(1, 2), gamma=st.integers(1, 5), mixer=st.sampled_from(["mingru", "relu"]),
    use_mlp=st.booleans(), use_norm=st.booleans(), encoder_bias=st.booleans(),
)


@given(configs)
@settings(max_examples=60, deadline=None)
def test_counted_equals_stored(cfg):
    params = init_network(cfg, 0)
    assert count_params(cfg).stored == params.num_stored()


def test_closed_form_count():
    H, K, L, H_in, H_out = 32, 8, 6, 1, 10
    cfg = NetworkConfig(L=L, H=H, H_in=H_in, H_out=H_out, conv="L", K=K, gamma=16)
    expect = H_in * H + H * H_out + L * (2 * K * H + 2 * H * H + 2 * H + 4 * H * H + 3 * H + 2 * H)
    assert count_params(cfg).total == expect


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(L=0)
    with pytest.raises(ConfigError, match="did you mean 'EID'"):
        NetworkConfig(conv="EDI")
    with pytest.raises(ConfigError, match="did you mean 'gamma'"):
        NetworkConfig.from_dict({"gama": 3})
    with pytest.raises(ConfigError):
        NetworkConfig(head="classify-last", loss="mse")
    assert NetworkConfig.from_dict(NetworkConfig(H=5).to_dict()) == NetworkConfig(H=5)


def test_layer_hand_composition():
    H = 3
    cfg = NetworkConfig(L=1, H=H, H_in=H, conv="CD", K=1, d=1, precision="f64")
    lp = LayerParams(
        conv=make_cd(np.ones((H, 1)), 1),
        gru=GruParams(np.zeros((H, H)), np.full(H, 60.0), np.eye(H), np.zeros(H)),
        mlp=MlpParams(np.zeros((2 * H, H)), np.zeros(2 * H), np.zeros((H, 2 * H)), np.zeros(H)),
        norm=init_norm(H, np.float64),
    )
    x = Rng(0).normal((2, 5, H))
    y, hidden, _ = layer_fwd(lp, x, cfg)
    np.testing.assert_allclose(y, layernorm_fwd(lp.norm, 2 * x)[0], atol=1e-12)
    np.testing.assert_allclose(hidden, x, atol=1e-12)


def test_zero_input_zero_activations():
    cfg = NetworkConfig(L=2, H=4, H_in=2, conv="L", K=2, gamma=3, use_norm=False, encoder_bias=False,
                        precision="f64")
    params = init_network(cfg, 1)
    out, aux = network_fwd(params, np.zeros((1, 6, 2)))
    assert not out.any()
    assert all(not h.any() for h in aux["layer_outputs"])


def test_end_to_end_gradcheck():
    rep = check_network(reference_config(), B=1, T=6)
    assert rep.passed, rep.failures()


def test_batch_permutation():
    cfg = NetworkConfig(L=2, H=5, H_in=2, H_out=3, conv="L", K=3, gamma=4)
    params = init_network(cfg, 2)
    u = Rng(3).normal((4, 9, 2), dtype=np.float32)
    perm = np.array([2, 0, 3, 1])
    out, _ = network_fwd(params, u)
    out_p, _ = network_fwd(params, u[perm])
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-6, atol=1e-6)


def test_input_shape_checked():
    params = init_network(NetworkConfig(H_in=2), 0)
    with pytest.raises(ShapeError):
        network_fwd(params, np.ones((1, 4, 3), dtype=np.float32))


@pytest.mark.parametrize("head", ["classify-last", "classify-mean", "classify-per-step", "regress-per-step"])
def test_head_shapes(head):
    loss = "mse" if head == "regress-per-step" else "ce"
    params = init_network(NetworkConfig(H=4, H_in=1, H_out=3, head=head, loss=loss), 0)
    out, _ = network_fwd(params, np.ones((2, 7, 1), dtype=np.float32))
    assert out.shape == ((2, 3) if head in ("classify-last", "classify-mean") else (2, 7, 3))


@pytest.mark.parametrize("conv", ["CD", "EID", "L", "none"])
def test_streaming_network_matches_dense(conv):
    cfg = NetworkConfig(L=2, H=4, H_in=2, H_out=2, conv=conv, K=3, d=2, d_b=1, gamma=5,
                        position_init="uniform", precision="f64")
    params = init_network(cfg, 4)
    u = Rng(5).normal((3, 20, 2))
    dense, _ = network_fwd(params, u)
    stream = StreamingNetwork(params, batch=3)
    np.testing.assert_allclose(stream.run(u), dense, atol=1e-9)
    floats = stream.state_floats()
    assert floats["recurrent"] == 3 * cfg.L * cfg.H


def test_params_roundtrip_and_checkpoint(tmp_path):
    cfg = NetworkConfig(L=2, H=3, H_in=2, conv="L", K=2, gamma=3)
    params = init_network(cfg, 7)
    again = params_from_arrays(cfg, params.as_dict())
    for (n1, a1), (n2, a2) in zip(params.named(), again.named()):
        assert n1 == n2
        np.testing.assert_array_equal(a1, a2)
    save_checkpoint(tmp_path / "c.ckpt", params, {"epoch": 3}, {"m.x": np.ones(2)})
    loaded, meta, extra = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"epoch": 3}
    np.testing.assert_array_equal(extra["m.x"], np.ones(2))
    for (_, a1), (_, a2) in zip(params.named(), loaded.named()):
        np.testing.assert_array_equal(a1, a2)
        assert a1.dtype == a2.dtype


def test_checkpoint_corruption_detected(tmp_path):
    params = init_network(NetworkConfig(H=3), 0)
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, params)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)
    path.write_bytes(b"junk")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_params_from_arrays_mismatch():
    cfg = NetworkConfig(H=3)
    arrays = init_network(cfg, 0).as_dict()
    arrays.pop("decoder.W")
    with pytest.raises(ShapeError, match="decoder.W"):
        params_from_arrays(cfg, arrays)


def test_dataset_roundtrip(tmp_path):
    batch = SequenceBatch(np.ones((3, 4, 2), dtype=np.float32), np.array([0, 1, 2]), "smnist",
                          {"ids": np.arange(3)})
    save_dataset(tmp_path, {"train": batch}, {"seed": 1})
    splits, prov = load_dataset(tmp_path)
    got = splits["train"]
    assert prov == {"seed": 1}
    assert got.targets.dtype == batch.targets.dtype
    np.testing.assert_array_equal(got.extras["ids"], np.arange(3))
    np.testing.assert_array_equal(got.inputs, batch.inputs)


def test_sequence_batch_checks():
    with pytest.raises(ValueError):
        SequenceBatch(np.ones((2, 3, 1)), np.ones(3), "smnist")
    with pytest.raises(ValueError):
        SequenceBatch(np.ones((2, 3, 1)), np.ones(2), "audio")
