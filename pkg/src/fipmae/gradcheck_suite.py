"""Finite-difference verification of every autodiff primitive.

Each primitive's analytic backward rule is compared against central
differences at double precision on randomized small shapes, over many
seeds; a composite check runs the full pretraining loss of a tiny model
end to end. The suite is the oracle side of the dual-route gradient
story: it never calls the backward rules it is checking to produce its
expected values.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .modalities import MODALITIES, ModalityKind, MultimodalSample
from .model import ModelConfig, ModelParams, forward_pretrain
from .training import FipConfig, fip_loss, make_mask_plan, masked_mse, target_patches

__all__ = ["run_gradcheck_suite", "tiny_model_loss_check", "PRIMITIVE_CHECKS"]


def _pt(rng, *shape):
    return ad.tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _const(rng, *shape):
    return ad.tensor(rng.normal(size=shape), dtype=np.float64)


def _check(name, make_points, make_loss, rng, tolerance):
    points = make_points(rng)
    loss_fn = make_loss(points, rng)
    report = ad.gradient_check(lambda pts: loss_fn(), points, tolerance=tolerance)
    return name, report


def PRIMITIVE_CHECKS():
    """(name, make_points(rng) -> dict, make_loss(points, rng) -> callable, tol)."""

    def simple(name, shapes, expr, tol=1e-6):
        def make_points(rng):
            return {k: _pt(rng, *s) for k, s in shapes.items()}

        def make_loss(pts, rng):
            out = expr(pts)
            tgt = _const(rng, *out.shape) if out.shape else None
            if tgt is None:
                return lambda: expr(pts)
            return lambda: ad.mse(expr(pts), tgt)

        return name, make_points, make_loss, tol

    idx5 = np.array([0, 2, 2, 4, 1])
    uniq3 = np.array([4, 0, 2])
    tok_idx = np.array([[0, 2, 3], [1, 4, 2]])
    labels = np.array([1, 0, 3])

    checks = [
        simple("add", {"a": (4, 5), "b": (4, 5)}, lambda p: ad.add(p["a"], p["b"])),
        simple("add_broadcast", {"a": (3, 4, 5), "b": (5,)}, lambda p: ad.add(p["a"], p["b"])),
        simple("scale", {"a": (4, 3)}, lambda p: ad.scale(p["a"], -2.5)),
        simple("matmul", {"a": (4, 6), "b": (6, 3)}, lambda p: ad.matmul(p["a"], p["b"])),
        simple("matmul_batched", {"a": (2, 4, 6), "b": (2, 6, 3)}, lambda p: ad.matmul(p["a"], p["b"])),
        simple("matmul_nd2d", {"a": (2, 4, 6), "b": (6, 3)}, lambda p: ad.matmul(p["a"], p["b"])),
        simple("linear", {"x": (5, 4), "w": (4, 3), "b": (3,)},
               lambda p: ad.linear(p["x"], p["w"], p["b"])),
        simple("linear_3d", {"x": (2, 5, 4), "w": (4, 3), "b": (3,)},
               lambda p: ad.linear(p["x"], p["w"], p["b"])),
        simple("transpose", {"a": (3, 4, 5)}, lambda p: ad.transpose(p["a"], (2, 0, 1))),
        simple("reshape", {"a": (4, 6)}, lambda p: ad.reshape(p["a"], (2, 12))),
        simple("gather_rows_dup", {"a": (6, 3)}, lambda p: ad.gather_rows(p["a"], idx5)),
        simple("scatter_rows", {"a": (3, 4)}, lambda p: ad.scatter_rows(p["a"], uniq3, 6)),
        simple("concat_rows", {"a": (3, 4), "b": (2, 4)},
               lambda p: ad.concat_rows([p["a"], p["b"]])),
        simple("tile_rows", {"a": (5,)}, lambda p: ad.tile_rows(p["a"], 4)),
        simple("gather_tokens", {"a": (2, 6, 3)}, lambda p: ad.gather_tokens(p["a"], tok_idx)),
        simple("scatter_tokens", {"a": (2, 3, 4)}, lambda p: ad.scatter_tokens(p["a"], tok_idx, 6)),
        simple("slice_tokens", {"a": (2, 6, 3)}, lambda p: ad.slice_tokens(p["a"], 1, 4)),
        simple("concat_tokens", {"a": (2, 3, 4), "b": (2, 2, 4)},
               lambda p: ad.concat_tokens([p["a"], p["b"]])),
        simple("fill_tokens", {"a": (5,)}, lambda p: ad.fill_tokens(p["a"], 2, 3)),
        simple("layer_norm", {"x": (6, 8), "g": (8,), "b": (8,)},
               lambda p: ad.layer_norm(p["x"], p["g"], p["b"]), tol=1e-4),
        # gelu's flat negative tail can leave a sampled coordinate with a
        # near-zero gradient, where central differences carry more noise
        simple("gelu", {"x": (4, 5)}, lambda p: ad.gelu(p["x"]), tol=1e-5),
        simple("softmax", {"x": (4, 6)}, lambda p: ad.softmax(p["x"])),
        simple("attention", {"q": (5, 4), "k": (6, 4), "v": (6, 4)},
               lambda p: ad.attention(p["q"], p["k"], p["v"]), tol=1e-4),
        simple("attention_batched", {"q": (2, 3, 5, 4), "k": (2, 3, 6, 4), "v": (2, 3, 6, 4)},
               lambda p: ad.attention(p["q"], p["k"], p["v"]), tol=1e-4),
        simple("mean", {"x": (4, 5)}, lambda p: ad.mean(p["x"])),
        simple("mean_axis", {"x": (3, 4, 5)}, lambda p: ad.mean(p["x"], axis=1)),
        simple("sum", {"x": (4, 5)}, lambda p: ad.tsum(p["x"])),
        simple("mse", {"a": (4, 5), "b": (4, 5)}, lambda p: ad.mse(p["a"], p["b"])),
        simple("cross_entropy", {"x": (3, 7)},
               lambda p: ad.cross_entropy_with_logits(p["x"], labels)),
    ]
    return checks


def tiny_model_config() -> ModelConfig:
    """Smallest gradient-checkable model: 4 patches per modality, width 8."""
    return ModelConfig(
        image_size=8, patch_size=4, d_model=8, n_heads=2, mlp_ratio=2.0,
        encoder_layers=1,
        decoder_layers={ModalityKind.CONSTELLATION: 2, ModalityKind.SCALOGRAM: 1,
                        ModalityKind.RAW: 1, ModalityKind.NOISE: 1},
        decoder_width=8,
    )


def tiny_model_loss_check(seed: int, tolerance: float = 1e-3, max_coords: int = 12):
    """Gradient-check the full pretraining loss of the tiny model.

    Parameters are drawn at a well-scaled random point (weights N(0, 0.4))
    rather than the training init: at 0.02-scale weights the encoder
    gradients shrink below 1e-8 and central differences drown in round-off
    before the analytic rule can be judged. A deterministic random subset
    of coordinates is checked per parameter (central differences over all
    of them would dominate the runtime without adding coverage).
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_model_config()
    params = ModelParams.init(cfg, rng, dtype=np.float64)
    for name, t in params.items():
        if name.endswith(("ln1.g", "ln2.g")):
            t.data = 1.0 + 0.2 * rng.normal(size=t.data.shape)
        else:
            t.data = 0.4 * rng.normal(size=t.data.shape)
    fip = FipConfig()
    imgs = {m: rng.uniform(0.0, 1.0, size=(3, cfg.image_size, cfg.image_size)) for m in MODALITIES}
    sample = MultimodalSample(inputs=imgs, targets={m: v.copy() for m, v in imgs.items()},
                              label=0, snr_db=0.0)
    sample.targets[ModalityKind.NOISE] = sample.inputs[ModalityKind.NOISE]
    plan = make_mask_plan(fip, cfg, rng)
    targets = {m: target_patches(sample, m, cfg, None).astype(np.float64) for m in MODALITIES}

    def loss_fn(_pts):
        preds = forward_pretrain(sample, plan, params)
        losses = {m: masked_mse(pred, targets[m], plan.masks[m])[0] for m, pred in preds.items()}
        return fip_loss(losses, fip)

    # step 3e-4, not the 1e-5 used for primitives: the composite loss is
    # O(30) here, so difference round-off is ~|L|*eps/(2h); coordinates
    # whose true gradient is ~1e-8 need the larger step, while 1e-3 starts
    # to show truncation error on high-curvature coordinates
    points = dict(params.items())
    return ad.gradient_check(loss_fn, points, tolerance=tolerance, step=3e-4,
                             max_coords=max_coords, rng=np.random.default_rng(seed + 1))


def run_gradcheck_suite(seed: int = 0, n_seeds: int = 20, full_loss_seeds: int = 20,
                        verbose: bool = False) -> dict:
    """Run every primitive check over n_seeds seeds plus the tiny-model check."""
    worst = 0.0
    n_checks = 0
    failures = []
    for name, make_points, make_loss, tol in PRIMITIVE_CHECKS():
        for s in range(n_seeds):
            rng = np.random.default_rng((seed, zlib.crc32(name.encode()), s))
            _, report = _check(name, make_points, make_loss, rng, tol)
            n_checks += 1
            worst = max(worst, report.max_rel_error)
            if not report.passed:
                failures.append((name, s, report))
        if verbose:
            print(f"  {name}: ok over {n_seeds} seeds")
    for s in range(full_loss_seeds):
        report = tiny_model_loss_check(seed + s)
        n_checks += 1
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(("pretrain_loss", s, report))
    if verbose:
        print(f"  pretrain_loss: ok over {full_loss_seeds} seeds" if not failures
              else f"  FAILURES: {failures}")
    return {"passed": not failures, "worst": worst, "n_checks": n_checks,
            "failures": failures}
