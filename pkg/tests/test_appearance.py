import numpy as np
import pytest
import torch

from helpers import randomized_mlp
from oracles import central_diff
from relightgs import appearance as A
from relightgs.sh import DC_UNIT


def test_shapes_and_layers():
    mlp = A.AppearanceMLP(torch.Generator().manual_seed(0))
    light, sky = mlp(torch.zeros(A.EMBED_DIM, dtype=torch.float64))
    assert light.shape == (3, 25) and sky.shape == (3, 4)
    light, sky = mlp(torch.zeros(5, A.EMBED_DIM, dtype=torch.float64))
    assert light.shape == (5, 3, 25) and sky.shape == (5, 3, 4)
    dims = [(l.in_features, l.out_features) for l in mlp.modules() if isinstance(l, torch.nn.Linear)]
    assert dims == [(128, 256), (256, 256), (256, 256), (256, 12), (256, 128), (128, 75)]


def test_initial_outputs_are_head_biases():
    mlp = A.AppearanceMLP(torch.Generator().manual_seed(0))
    light, sky = mlp(torch.zeros(A.EMBED_DIM, dtype=torch.float64))
    assert torch.equal(light.flatten(), mlp.light_head.bias) and torch.equal(sky.flatten(), mlp.sky_head.bias)
    assert torch.allclose(light[:, 0], torch.full((3,), A.INIT_LIGHT_RADIANCE * DC_UNIT, dtype=torch.float64))
    assert torch.all(light[:, 1:] == 0) and torch.all(sky[:, 1:] == 0)


def test_errors():
    mlp = A.AppearanceMLP()
    with pytest.raises(ValueError):
        mlp(torch.zeros(64, dtype=torch.float64))
    with pytest.raises(ValueError):
        A.EmbeddingTable(["a", "a"])
    with pytest.raises(KeyError):
        A.EmbeddingTable(["a"])("b")


def test_embedding_jacobian_fd():
    mlp, table = randomized_mlp(["x"], seed=1, head_scale=0.1)
    e0 = table.weight[0].detach().numpy().copy()
    e = torch.as_tensor(e0).requires_grad_(True)
    light, sky = mlp(e)
    rng = np.random.default_rng(0)
    for out in (light, sky):
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in out.shape)
            g = torch.autograd.grad(out[idx], e, retain_graph=True)[0].numpy()
            fd = central_diff(lambda v: mlp(torch.as_tensor(v))[0 if out is light else 1][idx].item(), e0.copy(), 1e-6)
            assert np.all(np.abs(g - fd) <= 1e-4 * np.abs(fd) + 1e-9)


def test_backward_zero_upstream():
    mlp, table = randomized_mlp(["a", "b"], seed=2)
    g = A.backward(mlp, table, "a", torch.zeros(3, 25), torch.zeros(3, 4))
    assert all(torch.all(v == 0) for v in g.values())


def test_backward_fd_and_sparsity():
    ids = ["a", "b", "c", "d"]
    mlp, table = randomized_mlp(ids, seed=3, head_scale=0.1)
    rng = np.random.default_rng(1)
    dl, ds = rng.normal(size=(3, 25)), rng.normal(size=(3, 4))
    g = A.backward(mlp, table, "c", dl, ds)
    assert torch.all(g["embedding"][[0, 1, 3]] == 0) and torch.any(g["embedding"][2] != 0)

    def objective():
        light, sky = mlp(table("c"))
        return float((light.detach().numpy() * dl).sum() + (sky.detach().numpy() * ds).sum())

    params = dict(mlp.named_parameters())
    params["embedding"] = table.weight
    for name in ("trunk.0.weight", "trunk.4.bias", "sky_head.weight", "light_hidden.weight", "light_head.bias", "embedding"):
        p = params[name]
        flat = p.data.view(-1)
        for k in rng.choice(flat.numel(), 4, replace=False) if name != "embedding" else 2 * 128 + rng.choice(128, 4, replace=False):
            old = flat[k].item()
            with torch.no_grad():
                flat[k] = old + 1e-6
                fp = objective()
                flat[k] = old - 1e-6
                fm = objective()
                flat[k] = old
            fd = (fp - fm) / 2e-6
            ad = g[name].reshape(-1)[k].item()
            assert abs(ad - fd) <= 1e-4 * abs(fd) + 1e-7, (name, k, ad, fd)


def test_per_image_independence():
    mlp, table = randomized_mlp(["a", "b"], seed=4)
    la, _ = mlp(table("a"))
    with torch.no_grad():
        table.weight[1] += 1.0
    la2, _ = mlp(table("a"))
    assert torch.equal(la, la2)


def test_predict_wraps_sh():
    mlp, table = randomized_mlp(["a"], seed=5)
    light, sky = A.predict(mlp, table("a"))
    assert light.degree == 4 and sky.degree == 1


def test_weights_roundtrip(tmp_path):
    mlp, table = randomized_mlp(["img 1", "img2"], seed=6)
    extra = {"adam/x/0/step": np.array([3.0])}
    p = tmp_path / "w.safetensors"
    A.save_weights(p, mlp, table, extra)
    m2, t2, rest = A.load_weights(p)
    assert t2.image_ids == ["img 1", "img2"]
    assert torch.equal(t2.weight, table.weight)
    for (k, v), (k2, v2) in zip(mlp.state_dict().items(), m2.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    np.testing.assert_array_equal(rest["adam/x/0/step"], [3.0])
    q = tmp_path / "w2.safetensors"
    A.save_weights(q, m2, t2, extra)
    assert p.read_bytes() == q.read_bytes()


def test_weights_invalid(tmp_path):
    p = tmp_path / "bad.safetensors"
    p.write_bytes(b"garbage")
    with pytest.raises(ValueError):
        A.load_weights(p)
