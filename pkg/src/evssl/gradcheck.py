"""Central finite-difference checks of every loss and of the encoder composite.

Error metric per coordinate: ``|g_analytic - g_fd| / max(1, |g_analytic|)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import gradcore as gc
from . import losses as L
from .model import ENCODER_KEYS, HEAD_KEYS, ONLINE_NAMES, ModelDims, encode_batch, init_model, project_batch
from .viewgen import PatchSet

FD_STEP = 1e-6
TOLERANCE = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def check_gradients(
    fn: Callable[[dict[str, gc.Tensor]], gc.Tensor],
    inputs: dict[str, np.ndarray],
    h: float = FD_STEP,
    coords: dict[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``coords`` optionally restricts the finite differences to some flat
    indices per input; all coordinates are checked otherwise.
    """
    tape = gc.Tape()
    leaves = {k: tape.param(v) for k, v in inputs.items()}
    grads = tape.backward(fn(leaves))
    worst = 0.0
    for name, value in inputs.items():
        g = grads[leaves[name].id].reshape(-1)
        flat = value.reshape(-1)
        idx = coords[name] if coords and name in coords else np.arange(flat.size)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[i] += sign * h
                args = {k: gc.constant(bumped.reshape(value.shape) if k == name else v) for k, v in inputs.items()}
                vals.append(fn(args).item())
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, rel_error(g[idx], numeric))
    return worst


def random_batch(rng: np.random.Generator, b: int = 4, e: int = 8) -> dict[str, np.ndarray]:
    y = rng.standard_normal((b, e))
    return {
        "q_evt": rng.standard_normal((b, e)),
        "k_evt": rng.standard_normal((b, e)),
        "q_img": rng.standard_normal((b, e)),
        "y": y / np.linalg.norm(y, axis=1, keepdims=True),
    }


def random_patch_sets(rng: np.random.Generator, dims: ModelDims, b: int, n: int) -> list[PatchSet]:
    side = int(round(np.sqrt(dims.num_patches)))
    grid = (side, dims.num_patches // side)
    w, h = grid[1] * dims.patch_size, grid[0] * dims.patch_size
    out = []
    for _ in range(b):
        idx = np.sort(rng.choice(dims.num_patches, size=n, replace=False))
        out.append(PatchSet(idx, rng.random((n, dims.patch_dim)), grid, (w, h, dims.patch_size)))
    return out


def _emb(t: dict[str, gc.Tensor], arrays: dict[str, np.ndarray]) -> L.BatchEmbeddings:
    return L.BatchEmbeddings(t["q_evt"], gc.constant(arrays["k_evt"]), t["q_img"], gc.constant(arrays["y"]))


def _sample_coords(rng: np.random.Generator, params: dict[str, np.ndarray], per_tensor: int) -> dict[str, np.ndarray]:
    return {k: rng.choice(v.size, size=min(per_tensor, v.size), replace=False) for k, v in params.items()}


def run_suite(seed: int = 0, instances: int = 20, b: int = 4, e: int = 8, d: int = 16, coords_per_tensor: int = 6) -> dict[str, float]:
    """Max relative error per component over ``instances`` seeded random cases."""
    rng = np.random.default_rng(seed)
    tau = 0.2
    cfg = L.LossConfig(tau=tau, lambda1=2.0)
    worst = dict.fromkeys(["L_nce", "L_evt", "L_evt_query", "L_evt_vanilla", "L_RGB", "L_kl", "L_total", "encoder", "L_total_params"], 0.0)
    dims = ModelDims(patch_size=2, num_patches=4, embed_dim=d, proj_dim=e)

    for _ in range(instances):
        arr = random_batch(rng, b, e)
        q_in = {"q": rng.standard_normal(e), "keys": rng.standard_normal((5, e))}
        worst["L_nce"] = max(worst["L_nce"], check_gradients(lambda t: L.info_nce(t["q"], t["keys"], 2, tau), q_in))

        evt_in = {"q_evt": arr["q_evt"]}
        full = lambda t: _emb({"q_evt": t["q_evt"], "q_img": gc.constant(arr["q_img"])}, arr)  # noqa: E731
        worst["L_evt"] = max(worst["L_evt"], check_gradients(lambda t: L.l_evt(full(t), tau, "own"), evt_in))
        worst["L_evt_query"] = max(worst["L_evt_query"], check_gradients(lambda t: L.l_evt(full(t), tau, "query"), evt_in))
        worst["L_evt_vanilla"] = max(worst["L_evt_vanilla"], check_gradients(lambda t: L.l_evt_vanilla(full(t), tau), evt_in))

        img_in = {"q_img": arr["q_img"]}
        img = lambda t: _emb({"q_evt": gc.constant(arr["q_evt"]), "q_img": t["q_img"]}, arr)  # noqa: E731
        worst["L_RGB"] = max(worst["L_RGB"], check_gradients(lambda t: L.l_rgb(img(t), tau), img_in))
        s_y = L.pairwise_scores(gc.constant(arr["y"]), tau)
        worst["L_kl"] = max(worst["L_kl"], check_gradients(lambda t: L.l_kl(L.pairwise_scores(t["q_img"], tau), s_y), img_in))

        both = {"q_evt": arr["q_evt"], "q_img": arr["q_img"]}
        worst["L_total"] = max(worst["L_total"], check_gradients(lambda t: L.total_loss(_emb(t, arr), cfg)[0], both))

        # encoder composite and the full objective through every online parameter
        state = init_model(int(rng.integers(2**31)), dims)
        params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in state.online.items()}
        views = random_patch_sets(rng, dims, b, n=2)
        k_views = random_patch_sets(rng, dims, b, n=2)
        weights = gc.constant(rng.standard_normal((b, d)))
        enc_params = {f"encoder.{k}": params[f"encoder.{k}"] for k in ENCODER_KEYS}

        def encoder_scalar(t):
            feats = encode_batch({k: t[f"encoder.{k}"] for k in ENCODER_KEYS}, views, dims)
            return gc.sum_(gc.mul(feats, weights))

        coords = _sample_coords(rng, enc_params, coords_per_tensor)
        worst["encoder"] = max(worst["encoder"], check_gradients(encoder_scalar, enc_params, coords=coords))

        k_evt = project_batch(state.head("evt", "momentum"), encode_batch(state.encoder("momentum"), k_views, dims))

        def objective(t):
            feats = encode_batch({k: t[f"encoder.{k}"] for k in ENCODER_KEYS}, views, dims)
            q_evt = project_batch({k: t[f"evt_head.{k}"] for k in HEAD_KEYS}, feats)
            q_img = project_batch({k: t[f"img_head.{k}"] for k in HEAD_KEYS}, feats)
            emb = L.BatchEmbeddings(q_evt, k_evt, q_img, gc.constant(arr["y"]))
            return L.total_loss(emb, cfg)[0]

        all_params = {k: params[k] for k in ONLINE_NAMES}
        coords = _sample_coords(rng, all_params, coords_per_tensor)
        worst["L_total_params"] = max(worst["L_total_params"], check_gradients(objective, all_params, coords=coords))
    return worst
