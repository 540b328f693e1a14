"""Finite-difference verification battery for the toy model.

Checks every isolated operation at 1e-6 and the composed model (class score
gradients with respect to the input image, every parameter tensor, and each
retained attention matrix) at 1e-4.  Deviations are measured relative to the
largest gradient magnitude of the tensor under test, floored at 1e-8.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .vit import ModelConfig, VisionTransformer

ISOLATED_TOL = 1e-6
MODEL_TOL = 1e-4


def _isolated_checks(rng: np.random.Generator) -> list[tuple[str, float, float]]:
    w34 = Tensor(rng.standard_normal((3, 4)))
    g6 = Tensor(rng.standard_normal(6), requires_grad=False)
    b6 = Tensor(rng.standard_normal(6), requires_grad=False)
    proj = Tensor(rng.standard_normal((4, 6)))
    bias = Tensor(rng.standard_normal(6))
    mix46 = Tensor(rng.standard_normal((4, 6)))
    mix46b = Tensor(rng.standard_normal((4, 6)))
    mix33 = Tensor(rng.standard_normal((3, 3)))
    mix14 = Tensor(rng.standard_normal((1, 4)))
    targets = (rng.random((3, 4)) > 0.5).astype(float)
    seg_labels = np.array([0, 2, 255, 1])

    cases = [
        ("op matmul", lambda x: ad.sum_all(ad.matmul(x, w34)),
         rng.standard_normal((5, 3))),
        ("op softmax_rows", lambda x: ad.sum_all(
            ad.mul(ad.softmax_rows(x), mix46b)),
         rng.standard_normal((4, 6))),
        ("op add", lambda x: ad.sum_all(ad.add(x, Tensor(np.ones((3, 3))))),
         rng.standard_normal((3, 3))),
        ("op mul", lambda x: ad.sum_all(ad.mul(x, mix33)),
         rng.standard_normal((3, 3))),
        ("op relu", lambda x: ad.sum_all(ad.relu(x)),
         rng.standard_normal((4, 4)) + 0.1),
        ("op power", lambda x: ad.sum_all(ad.power(x, 3.0)),
         rng.random((3, 3)) + 0.5),
        ("op gelu", lambda x: ad.sum_all(ad.gelu(x)), rng.standard_normal((3, 4))),
        ("op layer_norm", lambda x: ad.sum_all(ad.mul(
            ad.layer_norm(x, g6, b6), mix46)), rng.standard_normal((4, 6))),
        ("op linear", lambda x: ad.sum_all(ad.linear(x, proj, bias)),
         rng.standard_normal((5, 4))),
        ("op mean_pool", lambda x: ad.sum_all(ad.mul(
            ad.mean_pool(x), mix14)),
         rng.standard_normal((6, 4))),
        ("op slice/concat", lambda x: ad.sum_all(ad.power(ad.concat_rows(
            ad.slice_rows(x, 0, 2), ad.slice_cols(x, 0, 4)), 2.0)),
         rng.standard_normal((4, 4))),
        ("op transpose/reshape", lambda x: ad.sum_all(ad.power(
            ad.reshape(ad.transpose2d(x), (2, 8)), 2.0)),
         rng.standard_normal((4, 4))),
        ("op extract_patches", lambda x: ad.sum_all(ad.power(
            ad.extract_patches(x, 4), 2.0)), rng.standard_normal((3, 8, 8))),
        ("op bce_with_logits", lambda x: ad.bce_with_logits_mean(x, targets),
         rng.standard_normal((3, 4))),
        ("op softmax_xent", lambda x: ad.softmax_xent_ignore(x, seg_labels),
         rng.standard_normal((4, 3))),
    ]
    return [(name, finite_difference_check(f, x), ISOLATED_TOL)
            for name, f, x in cases]


def _model_value(model: VisionTransformer, image: np.ndarray, c: int,
                 attn_override=None) -> float:
    pred, _, _ = model.forward_with_taps(image, attn_override=attn_override)
    return pred.y(c).item()


def _fd_against(analytic: np.ndarray, value_fn, array: np.ndarray,
                eps: float = 1e-5, coords=None) -> float:
    """Generic two-sided check perturbing ``array`` in place."""
    if coords is None:
        coords = list(np.ndindex(*array.shape))
    scale = max(1e-8, float(np.abs(analytic).max()))
    worst = 0.0
    for idx in coords:
        orig = array[idx]
        array[idx] = orig + eps
        fp = value_fn()
        array[idx] = orig - eps
        fm = value_fn()
        array[idx] = orig
        num = (fp - fm) / (2 * eps)
        worst = max(worst, abs(analytic[idx] - num) / max(scale, abs(num)))
    return worst


def run_gradcheck(seed: int = 0, max_coords_per_tensor: int = 96,
                  ) -> list[tuple[str, float, float]]:
    """Full battery on the 2-block, d=8, 2-head, 32px/patch-8 toy model.

    Large tensors are checked at a seeded random subset of coordinates
    (``max_coords_per_tensor``) to keep the run well under the CPU budget;
    small tensors are checked exhaustively.
    """
    rng = np.random.default_rng(seed)
    results = _isolated_checks(rng)

    cfg = ModelConfig(image_size=32, patch_size=8, d=8, L=2, heads=2, C=3)
    model = VisionTransformer(cfg, seed=seed)
    image = rng.random((3, 32, 32))
    c = int(rng.integers(0, cfg.C))

    # one reverse pass: gradients for image, every parameter, every tap
    img_tensor = Tensor(image, requires_grad=True)
    pred, _, taps = model.forward_with_taps(img_tensor)
    root = pred.y(c)
    tape = root.tape
    ad.backward(root, tape)
    img_grad = img_tensor.grad.copy()
    param_grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                   for name, p in model.params.items()}
    tap_grads = [t.A.grad.copy() for t in taps]
    tap_values = [t.A.data.copy() for t in taps]
    tape.clear_gradients()

    def subset(shape, n):
        coords = list(np.ndindex(*shape))
        if len(coords) <= n:
            return coords
        picked = rng.choice(len(coords), size=n, replace=False)
        return [coords[i] for i in picked]

    value = lambda: _model_value(model, image, c)

    err = _fd_against(img_grad, value, image,
                      coords=subset(image.shape, 4 * max_coords_per_tensor))
    results.append(("model d y^c / d image", err, MODEL_TOL))

    worst_param = 0.0
    for name, p in model.params.items():
        coords = subset(p.data.shape, max_coords_per_tensor)
        worst_param = max(worst_param,
                          _fd_against(param_grads[name], value, p.data,
                                      coords=coords))
    results.append(("model d y^c / d parameters", worst_param, MODEL_TOL))

    for i, tap in enumerate(taps):
        base = tap_values[i]

        def tap_value(i=i, base=base):
            return _model_value(model, image, c, attn_override={i: base})

        err = _fd_against(tap_grads[i], tap_value, base,
                          coords=subset(base.shape, max_coords_per_tensor))
        results.append((f"model d y^c / d A^{i} (retained)", err, MODEL_TOL))

    return results
