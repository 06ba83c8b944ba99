import numpy as np
import pytest
import torch

from tryonlab import adapters as A
from tryonlab import model as M
from tryonlab.checkpoint import CorruptCheckpointError
from tests.conftest import randomize_base
from tests.test_model import make_sequences


def test_adapt_linear_zero_b_equals_base():
    rng = np.random.default_rng(0)
    x = rng.random((5, 8))
    w = rng.random((6, 8))
    b = rng.random(6)
    a = rng.random((2, 8))
    out = A.adapt_linear(x, w, b, a, np.zeros((6, 2)), alpha=2.0)
    assert np.allclose(out, x @ w.T + b)


def test_adapt_linear_identity_subspace():
    # base 0, A/B identity slices, alpha == rank: passes the rank subspace
    r, d = 2, 4
    a = np.zeros((r, d))
    a[0, 0] = 1.0
    a[1, 1] = 1.0
    b = a.T.copy()
    x = np.arange(d, dtype=float)[None]
    out = A.adapt_linear(x, np.zeros((d, d)), None, a, b, alpha=r)
    assert np.allclose(out, [[0.0, 1.0, 0.0, 0.0]])


def test_adapt_linear_matches_dense_oracle():
    rng = np.random.default_rng(1)
    x = rng.random((3, 4))
    w = rng.random((4, 4))
    a = rng.random((2, 4))
    b = rng.random((4, 2))
    alpha = 16.0
    out = A.adapt_linear(x, w, None, a, b, alpha)
    dense = w + (alpha / 2) * (b @ a)
    assert np.abs(out - x @ dense.T).max() < 1e-7


def test_lowrank_delta_scale():
    d = A.LowRankDelta(A=np.zeros((16, 8)), B=np.zeros((8, 16)), rank=16,
                       alpha=16.0)
    assert d.scale == 1.0


def test_insertion_plan_counts():
    assert len(A.insertion_plan(M.ModelConfig(depth=6))) == 50
    assert len(A.insertion_plan(M.ModelConfig(depth=1))) == 10
    plan = A.insertion_plan(M.ModelConfig(depth=3))
    assert len(plan) == len(set(plan))
    assert plan[0] == "patch_in" and plan[-1] == "head"


def test_zero_init_equivalence_full_model(tiny_config):
    torch.manual_seed(0)
    net = randomize_base(M.TryOnModel(tiny_config), scale=0.03)
    for i in range(5):
        seq = make_sequences(net, b=1, seed=i)
        with torch.no_grad():
            va = net(seq, torch.tensor([0.4]), use_adapters=True)
            vb = net(seq, torch.tensor([0.4]), use_adapters=False)
        assert torch.equal(va, vb)


def test_stage1_identity_gradients_zero(tiny_config):
    torch.manual_seed(1)
    net = randomize_base(M.TryOnModel(tiny_config), scale=0.03)
    ad = A.AdapterSet(net)
    ad.reinit_("location", 5)
    seq = make_sequences(net, b=1, with_object=False)
    v = net(seq, torch.tensor([0.5]))
    v.square().mean().backward()
    for p in ad.parameters("identity"):
        assert p.grad is None or torch.all(p.grad == 0)
    got_loc_grad = any(p.grad is not None and p.grad.abs().max() > 0
                       for p in ad.parameters("location"))
    assert got_loc_grad


def test_one_stream_uses_location_everywhere(tiny_config):
    torch.manual_seed(2)
    net = randomize_base(M.TryOnModel(tiny_config), scale=0.03)
    ad = A.AdapterSet(net)
    ad.reinit_("location", 3)
    with torch.no_grad():
        for layer in ad.layers.values():
            layer.lora_B["location"].normal_(0, 0.05)
            layer.lora_B["identity"].normal_(0, 0.05)
    seq = make_sequences(net, b=1)
    with torch.no_grad():
        v_two = net(seq, torch.tensor([0.5]))
        v_one = net(seq, torch.tensor([0.5]), one_stream=True)
    sl2 = seq.slice_of(M.SOURCE_OBJECT_IMAGE)
    assert (v_two[:, sl2] - v_one[:, sl2]).abs().max() > 1e-6
    # zeroing the identity stream makes the two-stream path equal base on
    # object tokens
    ad.zero_("identity")
    with torch.no_grad():
        v_zero = net(seq, torch.tensor([0.5]))
        v_base = net(seq, torch.tensor([0.5]), use_adapters=False)
    loc_b_only = all(torch.all(l.lora_B["identity"] == 0)
                     for l in ad.layers.values())
    assert loc_b_only
    # object tokens still touched by location-adapter attention outputs? no:
    # object queries only read object keys, and object tokens route through
    # the identity stream, so they match the base exactly
    assert (v_zero[:, sl2] - v_base[:, sl2]).abs().max() < 1e-6


def test_adapter_roundtrip_bitwise(tmp_path, tiny_config):
    torch.manual_seed(3)
    net = M.TryOnModel(tiny_config)
    ad = A.AdapterSet(net)
    ad.reinit_("location", 7)
    with torch.no_grad():
        for layer in ad.layers.values():
            layer.lora_B["location"].normal_(0, 0.1)
    path = tmp_path / "ad.npz"
    A.save_adapters(ad, path, roles=("location", "identity"))
    net2 = M.TryOnModel(tiny_config)
    ad2 = A.AdapterSet(net2)
    A.load_adapters(ad2, path)
    src, dst = ad.deltas("location"), ad2.deltas("location")
    for name in src:
        assert np.array_equal(src[name].A, dst[name].A)
        assert np.array_equal(src[name].B, dst[name].B)
    assert ad2.roles == {"location", "identity"}


def test_adapter_rank_mismatch_no_partial_load(tmp_path, tiny_config):
    net = M.TryOnModel(tiny_config)
    ad = A.AdapterSet(net)
    A.save_adapters(ad, tmp_path / "ad.npz")
    cfg8 = M.ModelConfig(embed_dim=64, num_heads=4, depth=2, patch_size=4,
                         lora_rank=8, lora_alpha=8.0)
    net8 = M.TryOnModel(cfg8)
    snap = {k: v.clone() for k, v in net8.state_dict().items()}
    with pytest.raises(A.AdapterLoadError):
        A.load_adapters(A.AdapterSet(net8), tmp_path / "ad.npz")
    for k, v in net8.state_dict().items():
        assert torch.equal(snap[k], v)


def test_stage2_init_from_location_only_file(tmp_path, tiny_config):
    net = M.TryOnModel(tiny_config)
    ad = A.AdapterSet(net)
    ad.reinit_("location", 11)
    A.save_adapters(ad, tmp_path / "loc.npz", roles=("location",))

    net2 = M.TryOnModel(tiny_config)
    ad2 = A.AdapterSet(net2)
    A.load_adapters(ad2, tmp_path / "loc.npz", fresh_identity_seed=4)
    assert ad2.init_tag == "stage2-init"
    assert ad2.roles == {"location", "identity"}
    assert ad2.max_abs_b("identity") == 0.0

    # without a fresh identity the set is flagged location-only
    ad3 = A.AdapterSet(M.TryOnModel(tiny_config))
    A.load_adapters(ad3, tmp_path / "loc.npz")
    assert ad3.roles == {"location"}


def test_corrupt_checkpoint_detected(tmp_path, tiny_config):
    net = M.TryOnModel(tiny_config)
    path = tmp_path / "ad.npz"
    A.save_adapters(A.AdapterSet(net), path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises((CorruptCheckpointError, Exception)):
        A.load_adapters(A.AdapterSet(net), path)
