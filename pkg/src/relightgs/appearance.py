"""Per-image appearance codes decoded into light and sky SH coefficients."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from safetensors import safe_open
from safetensors.numpy import save_file
from torch import nn

from .sh import DC_UNIT, SHCoefficients

EMBED_DIM = 128
HIDDEN = 256
LIGHT_HIDDEN = 128
LIGHT_COEFFS = 25
SKY_COEFFS = 4

INIT_LIGHT_RADIANCE = 0.5
INIT_SKY_GRAY = 0.5


class EmbeddingTable(nn.Module):
    """One learnable 128-d code per training image, addressed by image id."""

    def __init__(self, image_ids: list[str], dim: int = EMBED_DIM, generator: torch.Generator | None = None):
        super().__init__()
        if len(set(image_ids)) != len(image_ids):
            raise ValueError("image ids must be unique")
        self.image_ids = list(image_ids)
        self._index = {k: i for i, k in enumerate(self.image_ids)}
        self.weight = nn.Parameter(torch.randn(len(image_ids), dim, generator=generator, dtype=torch.float64))

    def index(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def forward(self, image_id: str) -> torch.Tensor:
        return self.weight[self.index(image_id)]


class AppearanceMLP(nn.Module):
    """Three 256-unit layers feeding a sky head and a 128-unit light branch."""

    def __init__(self, generator: torch.Generator | None = None):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Linear(EMBED_DIM, HIDDEN), nn.ReLU(),
            nn.Linear(HIDDEN, HIDDEN), nn.ReLU(),
            nn.Linear(HIDDEN, HIDDEN), nn.ReLU(),
        )
        self.sky_head = nn.Linear(HIDDEN, 3 * SKY_COEFFS)
        self.light_hidden = nn.Linear(HIDDEN, LIGHT_HIDDEN)
        self.light_head = nn.Linear(LIGHT_HIDDEN, 3 * LIGHT_COEFFS)
        self.double()
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for layer in (*self.trunk[::2], self.light_hidden):
            bound = 1.0 / np.sqrt(layer.in_features)
            layer.weight.uniform_(-bound, bound, generator=generator)
            layer.bias.uniform_(-bound, bound, generator=generator)
        # heads start at zero so every image begins with the same gray light
        for head in (self.sky_head, self.light_head):
            head.weight.zero_()
            head.bias.zero_()
        self.light_head.bias.view(3, LIGHT_COEFFS)[:, 0] = INIT_LIGHT_RADIANCE * DC_UNIT
        self.sky_head.bias.view(3, SKY_COEFFS)[:, 0] = INIT_SKY_GRAY * DC_UNIT

    def forward(self, embedding: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Embedding (..., 128) -> light (..., 3, 25), sky (..., 3, 4)."""
        if embedding.shape[-1] != EMBED_DIM:
            raise ValueError(f"embedding must have {EMBED_DIM} entries, got {embedding.shape[-1]}")
        h = self.trunk(embedding)
        sky = self.sky_head(h).unflatten(-1, (3, SKY_COEFFS))
        light = self.light_head(torch.relu(self.light_hidden(h))).unflatten(-1, (3, LIGHT_COEFFS))
        return light, sky


def predict(mlp: AppearanceMLP, embedding: torch.Tensor) -> tuple[SHCoefficients, SHCoefficients]:
    """Detached light/sky SH for one embedding row."""
    with torch.no_grad():
        light, sky = mlp(embedding)
    return SHCoefficients(4, light), SHCoefficients(1, sky)


def backward(mlp: AppearanceMLP, table: EmbeddingTable, image_id: str, d_light, d_sky) -> dict[str, torch.Tensor]:
    """Gradients of ``<d_light, light> + <d_sky, sky>`` for weights and the image's code.

    Returned keys are the MLP parameter names plus ``"embedding"`` (a full
    table-shaped gradient, non-zero only on this image's row).
    """
    light, sky = mlp(table(image_id))
    params = dict(mlp.named_parameters())
    targets = list(params.values()) + [table.weight]
    grads = torch.autograd.grad(
        [light, sky],
        targets,
        [torch.as_tensor(d_light, dtype=light.dtype), torch.as_tensor(d_sky, dtype=sky.dtype)],
        allow_unused=True,
    )
    out = {k: (torch.zeros_like(p) if g is None else g) for (k, p), g in zip(params.items(), grads[:-1])}
    out["embedding"] = grads[-1]
    return out


def save_weights(path: str | Path, mlp: AppearanceMLP, table: EmbeddingTable, extra: dict[str, np.ndarray] | None = None) -> None:
    """Named-tensor container (safetensors) holding MLP weights, the embedding table and its ids.

    ``extra`` arrays (optimizer moments, for instance) are stored alongside.
    The byte stream depends only on the tensor values.
    """
    path = Path(path)
    arrays = {f"mlp/{k}": v.detach().cpu().numpy() for k, v in mlp.state_dict().items()}
    arrays["embedding/weight"] = table.weight.detach().cpu().numpy()
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    arrays = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    tmp = path.with_name(path.name + ".tmp")
    save_file(arrays, str(tmp), metadata={"image_ids": json.dumps(table.image_ids)})
    tmp.replace(path)


def load_weights(path: str | Path) -> tuple[AppearanceMLP, EmbeddingTable, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with safe_open(str(path), framework="numpy") as f:
            meta = f.metadata() or {}
            data = {k: f.get_tensor(k) for k in f.keys()}
    except Exception as exc:  # safetensors raises its own error types
        raise ValueError(f"{path}: not a valid weights file ({exc})") from None
    if "image_ids" not in meta or "embedding/weight" not in data:
        raise ValueError(f"{path}: weights file is missing the embedding table")
    mlp = AppearanceMLP()
    mlp.load_state_dict({k[4:]: torch.from_numpy(v.copy()) for k, v in data.items() if k.startswith("mlp/")})
    table = EmbeddingTable([str(s) for s in json.loads(meta["image_ids"])])
    with torch.no_grad():
        table.weight.copy_(torch.from_numpy(data["embedding/weight"].copy()))
    rest = {k: v for k, v in data.items() if not (k.startswith("mlp/") or k.startswith("embedding/"))}
    return mlp, table, rest
