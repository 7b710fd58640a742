"""Optimisation loop, adaptive density control and checkpointing."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import brdf
from .appearance import AppearanceMLP, EmbeddingTable, load_weights, save_weights
from .dataset import Dataset, View
from .losses import (
    TERM_ORDER,
    LossWeights,
    active_terms,
    depth_normals,
    loss_fg_sky,
    loss_light,
    loss_normal,
    loss_rec,
    loss_scale,
    loss_sky_depth,
    mean_visible_depth,
    total_loss,
)
from .pipeline import ViewRender, render_view
from .scene import (
    SKY_COUNT_SCALE,
    SPLIT_FACTOR,
    Scene,
    clamp_constraints,
    init_scene,
    inverse_sigmoid,
    load_scene,
    save_scene,
    split_sky_gaussians,
)
from .shading import quat_to_rotmat

# stream tags for np.random.default_rng([seed, counter, tag])
TAG_INIT, TAG_LIGHT, TAG_DENSIFY, TAG_ORDER = 0, 1, 2, 3

SCENE_FILE = "scene.ply"
WEIGHTS_FILE = "weights.safetensors"
LOG_FILE = "loss.csv"
CONFIG_FILE = "config.txt"
LOG_COLUMNS = ("iteration", "image_id", *TERM_ORDER, "total", "psnr", "num_fg", "num_sky")

OPACITY_RESET_VALUE = 0.01


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    seed: int = 0
    lr_embedding: float = 2e-4
    lr_mlp: float = 2e-4
    lr_roughness: float = 2e-4
    lr_albedo: float = 2e-3
    lr_radius: float = 1e-4
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    densify_start: int = 500
    densify_stop: int = 2500
    densify_interval: int = 100
    densify_tau0: float = 2e-4
    densify_growth: float = math.log(3.0)
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 5000
    opacity_reset: int = 0  # iteration of the single reset, 0 disables it
    sky_count_scale: float = SKY_COUNT_SCALE
    roughness_power: float = 2.0
    lut_path: str = ""
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    loss_rec_l1: float = 0.8
    loss_light: float = 1.0
    loss_normal: float = 0.05
    loss_scale: float = 1.0
    loss_fg_sky: float = 0.5
    loss_sky_depth: float = 0.005
    loss_gamma_sky_depth: float = 0.02
    loss_light_samples: int = 256
    loss_warmup_iters: int = 500
    loss_geometry_start: int = 2000
    loss_literal_fg_sky_masks: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.lr_position_init > 0 and self.lr_position_final <= 0:
            raise ValueError("lr_position_final must be positive when lr_position_init is")
        if not 0 <= self.densify_start <= self.densify_stop:
            raise ValueError("need 0 <= densify_start <= densify_stop")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be >= 1")
        self.loss_weights()  # validates the loss fields

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            rec_l1=self.loss_rec_l1,
            light=self.loss_light,
            normal=self.loss_normal,
            scale=self.loss_scale,
            fg_sky=self.loss_fg_sky,
            sky_depth=self.loss_sky_depth,
            gamma_sky_depth=self.loss_gamma_sky_depth,
            light_samples=self.loss_light_samples,
            warmup_iters=self.loss_warmup_iters,
            geometry_start=self.loss_geometry_start,
            literal_fg_sky_masks=self.loss_literal_fg_sky_masks,
        )


def _convert(name: str, default, text: str):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    try:
        return type(default)(text)
    except ValueError:
        raise ValueError(f"{name}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    base = base or TrainConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    values = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {no}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {no}: unknown key {key!r}")
        try:
            values[key] = _convert(key, known[key], val)
        except ValueError as exc:
            raise ValueError(f"line {no}: {exc}") from None
    return replace(base, **values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        return parse_config(text)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(cfg).items())


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    scene: Scene
    mlp: AppearanceMLP
    table: EmbeddingTable
    optimizer: torch.optim.Adam
    lut_grid: torch.Tensor
    extent: float
    iteration: int = 0
    grad_accum: torch.Tensor | None = None
    grad_count: torch.Tensor | None = None

    def __post_init__(self):
        if self.grad_accum is None:
            self.reset_stats()

    def reset_stats(self) -> None:
        n = self.scene.num_fg + self.scene.num_sky
        self.grad_accum = torch.zeros(n, dtype=torch.float64)
        self.grad_count = torch.zeros(n, dtype=torch.float64)


SCENE_GROUPS = {
    "fg_xyz": "position",
    "sky_theta": "position",
    "sky_phi": "position",
    "fg_rot": "rotation",
    "sky_rot": "rotation",
    "fg_log_scale": "scale",
    "sky_log_scale": "scale",
    "fg_opacity_logit": "opacity",
    "sky_opacity_logit": "opacity",
    "fg_albedo": "albedo",
    "fg_roughness": "roughness",
    "dome_radius": "radius",
}


def _make_leaves(scene: Scene) -> None:
    for name in Scene.LEARNABLE:
        setattr(scene, name, getattr(scene, name).detach().clone().requires_grad_(True))


def _group_lr(cfg: TrainConfig, kind: str) -> float:
    return cfg.lr_position_init if kind == "position" else getattr(cfg, f"lr_{kind}")


def build_optimizer(cfg: TrainConfig, scene: Scene, mlp: AppearanceMLP, table: EmbeddingTable) -> torch.optim.Adam:
    groups = [
        {"name": name, "params": [getattr(scene, name)], "lr": _group_lr(cfg, kind)}
        for name, kind in SCENE_GROUPS.items()
    ]
    groups.append({"name": "mlp", "params": list(mlp.parameters()), "lr": cfg.lr_mlp})
    groups.append({"name": "embedding", "params": [table.weight], "lr": cfg.lr_embedding})
    return torch.optim.Adam(groups, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps, foreach=False)


def camera_extent(views: list[View]) -> float:
    """1.1 times the largest camera distance from the mean camera centre."""
    c = np.stack([v.camera.center for v in views])
    return 1.1 * max(float(np.linalg.norm(c - c.mean(axis=0), axis=1).max()), 1e-3)


def lut_for(cfg: TrainConfig) -> torch.Tensor:
    return brdf.load_or_bake(cfg.lut_path or None).torch_grid()


def init_state(cfg: TrainConfig, data: Dataset) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 0, TAG_INIT])
    scene = init_scene(data.points, data.colors, cfg.sky_count_scale, rng)
    _make_leaves(scene)
    gen = torch.Generator().manual_seed(cfg.seed)
    mlp = AppearanceMLP(gen)
    table = EmbeddingTable(data.image_ids, generator=gen)
    opt = build_optimizer(cfg, scene, mlp, table)
    return TrainState(cfg, scene, mlp, table, opt, lut_for(cfg), camera_extent(data.views))


def position_lr(cfg: TrainConfig, iteration: int) -> float:
    """Log-linear decay from the initial to the final position rate."""
    if cfg.lr_position_init == 0:
        return 0.0
    t = min(iteration / cfg.iterations, 1.0) if cfg.iterations else 0.0
    a, b = math.log(cfg.lr_position_init), math.log(cfg.lr_position_final)
    return math.exp(a + (b - a) * t)


def _group(opt: torch.optim.Optimizer, name: str) -> dict:
    for g in opt.param_groups:
        if g["name"] == name:
            return g
    raise KeyError(name)


# ---------------------------------------------------------------------------
# one step


def view_order(cfg: TrainConfig, n_views: int, iteration: int) -> int:
    """Index of the view used at ``iteration``: a fresh permutation per epoch."""
    epoch, pos = divmod(iteration, n_views)
    return int(np.random.default_rng([cfg.seed, epoch, TAG_ORDER]).permutation(n_views)[pos])


def compute_terms(
    state: TrainState, out: ViewRender, view: View, light: torch.Tensor, active, rng: np.random.Generator
) -> dict[str, torch.Tensor]:
    """Every loss term active at this step, unweighted."""
    w = state.config.loss_weights()
    occ = view.occluder_mask
    terms: dict[str, torch.Tensor] = {}
    if "rec" in active:
        target = torch.as_tensor(view.image, dtype=out.color.dtype)
        terms["rec"] = loss_rec(out.color, target, occ, w.rec_l1)
    if "fg_sky" in active:
        terms["fg_sky"] = loss_fg_sky(out.fg_color, out.sky_color, view.sky_mask, occ, w.literal_fg_sky_masks)
    if "light" in active:
        terms["light"] = loss_light(light, w.light_samples, rng)
    if "normal" in active:
        ref, valid = depth_normals(out.depth, out.alpha, view.camera)
        terms["normal"] = loss_normal(out.normal_blend, out.fg_weight, ref, valid, occ)
    if "scale" in active:
        terms["scale"] = loss_scale(state.scene.fg_log_scale)
    if "sky_depth" in active:
        d_fg = mean_visible_depth(out.gaussian_depth, out.weight_sum, ~out.is_sky)
        d_sky = mean_visible_depth(out.gaussian_depth, out.weight_sum, out.is_sky)
        terms["sky_depth"] = loss_sky_depth(d_fg, d_sky, w.gamma_sky_depth)
    return terms


def masked_psnr(render: np.ndarray, target: np.ndarray, excluded: np.ndarray) -> float:
    keep = ~excluded
    if not keep.any():
        return float("nan")
    mse = float(np.mean((render[keep] - target[keep]) ** 2))
    return 99.0 if mse == 0 else min(99.0, -10.0 * math.log10(mse))


def train_step(state: TrainState, view: View) -> dict[str, float]:
    """Forward, backward, Adam update, constraint projection, densification."""
    cfg = state.config
    w = cfg.loss_weights()
    it = state.iteration
    scene = state.scene
    for name in ("fg_xyz", "sky_theta", "sky_phi"):
        _group(state.optimizer, name)["lr"] = position_lr(cfg, it)

    light, sky = state.mlp(state.table(view.image_id))
    out = render_view(scene, view.camera, light, sky, state.lut_grid, cfg.roughness_power)
    if out.proj.mean2d.requires_grad:
        out.proj.mean2d.retain_grad()
    active = active_terms(it, w)
    rng = np.random.default_rng([cfg.seed, it, TAG_LIGHT])
    terms = compute_terms(state, out, view, light, active, rng)
    for name, value in terms.items():
        if not bool(torch.isfinite(value).all()):
            raise FloatingPointError(f"loss term {name!r} is not finite at iteration {it} (image {view.image_id})")
    total, breakdown = total_loss(terms, w, it)

    state.optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    g = out.proj.mean2d.grad
    if g is not None:
        cam = view.camera
        ndc = g.detach() * torch.tensor([0.5 * cam.width, 0.5 * cam.height], dtype=g.dtype)
        vis = torch.from_numpy(out.proj.visible)
        state.grad_accum[vis] += torch.linalg.norm(ndc, dim=-1)[vis]
        state.grad_count[vis] += 1.0
    state.optimizer.step()
    clamp_constraints(scene)
    state.iteration = it + 1

    done = state.iteration
    stop = min(cfg.densify_stop, cfg.iterations)
    if cfg.densify_start < done <= stop and done % cfg.densify_interval == 0:
        t_norm = (done - cfg.densify_start) / max(stop - cfg.densify_start, 1)
        densify_and_prune(state, t_norm, np.random.default_rng([cfg.seed, done, TAG_DENSIFY]))
    if cfg.opacity_reset and done == cfg.opacity_reset:
        reset_opacity(state)

    breakdown["psnr"] = masked_psnr(out.color.detach().numpy(), view.image, view.occluder_mask)
    return breakdown


# ---------------------------------------------------------------------------
# density control


def densification_threshold(cfg: TrainConfig, t_norm: float) -> float:
    """``tau0 * exp(k * t)`` for the window fraction ``t`` in [0, 1]."""
    return cfg.densify_tau0 * math.exp(cfg.densify_growth * min(max(t_norm, 0.0), 1.0))


def _rebuild(state: TrainState, name: str, keep: torch.Tensor, new_rows: torch.Tensor) -> None:
    """Replace one parameter bank by ``cat(old[keep], new_rows)``, carrying Adam moments."""
    opt = state.optimizer
    group = _group(opt, name)
    old = group["params"][0]
    value = torch.cat([old.detach()[keep], new_rows.to(old.dtype)], dim=0)
    new = value.clone().requires_grad_(True)
    st = opt.state.pop(old, None)
    if st:
        pad = lambda m: torch.cat([m[keep], torch.zeros_like(new_rows, dtype=m.dtype)], dim=0)
        opt.state[new] = {"step": st["step"], "exp_avg": pad(st["exp_avg"]), "exp_avg_sq": pad(st["exp_avg_sq"])}
    group["params"][0] = new
    setattr(state.scene, name, new)


def _select_budget(score: np.ndarray, chosen: np.ndarray, budget: int) -> np.ndarray:
    if chosen.sum() <= budget:
        return chosen
    idx = np.flatnonzero(chosen)
    top = idx[np.argsort(-score[idx], kind="stable")[: max(budget, 0)]]
    out = np.zeros_like(chosen)
    out[top] = True
    return out


@torch.no_grad()
def densify_and_prune(state: TrainState, t_norm: float, rng: np.random.Generator) -> dict[str, int]:
    """Clone or split high-gradient Gaussians, split sky ones on the dome, prune faint ones.

    Every densified Gaussian adds one net row; when that would exceed
    ``max_gaussians`` the highest-gradient candidates win.
    """
    cfg = state.config
    scene = state.scene
    nf, ns = scene.num_fg, scene.num_sky
    avg = (state.grad_accum / state.grad_count.clamp_min(1.0)).numpy()
    chosen = avg >= densification_threshold(cfg, t_norm)
    chosen = _select_budget(avg, chosen, cfg.max_gaussians - (nf + ns))
    fg_sel, sky_sel = chosen[:nf], chosen[nf:]

    max_scale = torch.exp(scene.fg_log_scale).max(dim=-1).values.numpy()
    small = max_scale <= cfg.percent_dense * state.extent
    clone, split = fg_sel & small, fg_sel & ~small

    # foreground: keep non-split rows, then append clones and split children
    fg_keep = torch.from_numpy(np.flatnonzero(~split))
    ci = torch.from_numpy(np.flatnonzero(clone))
    si = torch.from_numpy(np.repeat(np.flatnonzero(split), 2))
    new_fg = {name: torch.cat([getattr(scene, name)[ci], getattr(scene, name)[si]]) for name in Scene.FG_FIELDS}
    if len(si):
        R = quat_to_rotmat(scene.fg_rot[si])
        s = torch.exp(scene.fg_log_scale[si])
        offs = torch.einsum("nij,nj->ni", R, torch.as_tensor(rng.standard_normal((len(si), 3))) * s)
        new_fg["fg_xyz"][len(ci):] = scene.fg_xyz[si] + offs
        new_fg["fg_log_scale"][len(ci):] = scene.fg_log_scale[si] - math.log(SPLIT_FACTOR)

    # sky: every selected Gaussian is split and its children projected onto the dome
    sky_keep = torch.from_numpy(np.flatnonzero(~sky_sel))
    pi = np.flatnonzero(sky_sel)
    th, ph, ls = split_sky_gaussians(
        scene.sky_theta[pi].numpy(), scene.sky_phi[pi].numpy(), scene.sky_rot[pi].numpy(),
        scene.sky_log_scale[pi].numpy(), scene.dome_center.numpy(), float(scene.dome_radius[0]), rng,
    ) if len(pi) else (np.zeros(0), np.zeros(0), np.zeros((0, 3)))
    rep = torch.from_numpy(np.repeat(pi, 2))
    new_sky = {
        "sky_theta": torch.as_tensor(th),
        "sky_phi": torch.as_tensor(ph),
        "sky_rot": scene.sky_rot[rep],
        "sky_log_scale": torch.as_tensor(ls).reshape(-1, 3),
        "sky_opacity_logit": scene.sky_opacity_logit[rep],
    }

    for name in Scene.FG_FIELDS:
        _rebuild(state, name, fg_keep, new_fg[name])
    for name in Scene.SKY_FIELDS:
        _rebuild(state, name, sky_keep, new_sky[name])

    # prune faint Gaussians of both kinds
    thr = inverse_sigmoid(cfg.prune_opacity)
    fg_alive = scene.fg_opacity_logit.detach() >= thr
    sky_alive = scene.sky_opacity_logit.detach() >= thr
    stats = {
        "cloned": int(clone.sum()),
        "split": int(split.sum()),
        "sky_split": int(sky_sel.sum()),
        "pruned": int((~fg_alive).sum() + (~sky_alive).sum()),
    }
    if stats["pruned"]:
        fk = torch.nonzero(fg_alive).flatten()
        sk = torch.nonzero(sky_alive).flatten()
        for name in Scene.FG_FIELDS:
            _rebuild(state, name, fk, getattr(scene, name).detach()[:0])
        for name in Scene.SKY_FIELDS:
            _rebuild(state, name, sk, getattr(scene, name).detach()[:0])
    state.reset_stats()
    return stats


@torch.no_grad()
def reset_opacity(state: TrainState) -> None:
    """Cap every opacity at 0.01 and clear the opacity moments."""
    cap = inverse_sigmoid(OPACITY_RESET_VALUE)
    for name in ("fg_opacity_logit", "sky_opacity_logit"):
        p = getattr(state.scene, name)
        p.clamp_(max=cap)
        st = state.optimizer.state.get(p)
        if st:
            st["exp_avg"].zero_()
            st["exp_avg_sq"].zero_()


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for group in state.optimizer.param_groups:
        for k, p in enumerate(group["params"]):
            st = state.optimizer.state.get(p)
            if not st:
                continue
            pre = f"adam/{group['name']}/{k}/"
            arrays[pre + "step"] = np.array([float(st["step"])])
            arrays[pre + "exp_avg"] = st["exp_avg"].detach().numpy()
            arrays[pre + "exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
    return arrays


def _restore_optimizer(state: TrainState, arrays: dict[str, np.ndarray]) -> None:
    for group in state.optimizer.param_groups:
        for k, p in enumerate(group["params"]):
            pre = f"adam/{group['name']}/{k}/"
            if pre + "step" not in arrays:
                continue
            state.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[pre + "step"][0])),
                "exp_avg": torch.from_numpy(arrays[pre + "exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[pre + "exp_avg_sq"].copy()),
            }


def predicted_lights(mlp: AppearanceMLP, table: EmbeddingTable) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    with torch.no_grad():
        return {i: mlp(table(i)) for i in table.image_ids}


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(LOG_COLUMNS)
    for r in rows:
        wr.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in LOG_COLUMNS])
    return buf.getvalue()


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        d: dict = {"iteration": int(r["iteration"]), "image_id": r["image_id"]}
        for c in LOG_COLUMNS[2:]:
            if r.get(c, "") != "":
                d[c] = int(r[c]) if c.startswith("num_") else float(r[c])
        out.append(d)
    return out


def save_checkpoint(state: TrainState, out_dir: str | Path, log_rows: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(out / SCENE_FILE, state.scene, predicted_lights(state.mlp, state.table))
    extra = _optimizer_arrays(state)
    extra["train/iteration"] = np.array([state.iteration], dtype=np.int64)
    extra["train/grad_accum"] = state.grad_accum.numpy()
    extra["train/grad_count"] = state.grad_count.numpy()
    save_weights(out / WEIGHTS_FILE, state.mlp, state.table, extra)
    _atomic_text(out / LOG_FILE, format_log(log_rows))
    _atomic_text(out / CONFIG_FILE, format_config(state.config))


def load_checkpoint(ckpt_dir: str | Path):
    """``(scene, mlp, table, extra_arrays)`` from a checkpoint directory."""
    ckpt = Path(ckpt_dir)
    for name in (SCENE_FILE, WEIGHTS_FILE):
        if not (ckpt / name).exists():
            raise ValueError(f"{ckpt / name}: checkpoint file missing")
    scene, _ = load_scene(ckpt / SCENE_FILE)
    mlp, table, extra = load_weights(ckpt / WEIGHTS_FILE)
    return scene, mlp, table, extra


def resume_state(cfg: TrainConfig, data: Dataset, ckpt_dir: str | Path) -> TrainState:
    scene, mlp, table, extra = load_checkpoint(ckpt_dir)
    if table.image_ids != data.image_ids:
        raise ValueError(f"{ckpt_dir}: checkpoint image ids do not match the dataset")
    _make_leaves(scene)
    opt = build_optimizer(cfg, scene, mlp, table)
    state = TrainState(cfg, scene, mlp, table, opt, lut_for(cfg), camera_extent(data.views))
    state.iteration = int(extra["train/iteration"][0])
    state.grad_accum = torch.from_numpy(extra["train/grad_accum"].copy())
    state.grad_count = torch.from_numpy(extra["train/grad_count"].copy())
    _restore_optimizer(state, extra)
    return state


def fit(cfg: TrainConfig, data: Dataset, out_dir: str | Path, resume: bool = False, progress=None) -> TrainState:
    """Train for ``cfg.iterations`` steps, writing checkpoints into ``out_dir``.

    With ``resume=True`` and an existing checkpoint the run continues from its
    iteration; the log keeps only rows before that point.
    """
    out = Path(out_dir)
    rows: list[dict] = []
    if resume and (out / WEIGHTS_FILE).exists():
        state = resume_state(cfg, data, out)
        if (out / LOG_FILE).exists():
            rows = [r for r in read_log(out / LOG_FILE) if r["iteration"] < state.iteration]
    else:
        state = init_state(cfg, data)
    if state.iteration > cfg.iterations:
        raise ValueError(f"checkpoint is at iteration {state.iteration}, beyond iterations={cfg.iterations}")
    while state.iteration < cfg.iterations:
        it = state.iteration
        view = data.views[view_order(cfg, len(data.views), it)]
        b = train_step(state, view)
        rows.append({"iteration": it, "image_id": view.image_id, **b,
                     "num_fg": state.scene.num_fg, "num_sky": state.scene.num_sky})
        if progress is not None:
            progress(it, b)
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0 and state.iteration < cfg.iterations:
            save_checkpoint(state, out, rows)
    save_checkpoint(state, out, rows)
    return state
